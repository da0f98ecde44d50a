//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly. Shapes are checked when an
//! operation is recorded; a mismatch is a programming error and panics.

use crate::tensor::Tensor;

/// Receives the parent values, the node's value and its output gradient;
/// returns one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root w.r.t. every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    t(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-axis bilinear resampling table (half-pixel centers, edge clamp).
fn resize_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let needs_grad = backward.is_some() && parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation computed outside the graph.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, parents.iter().map(|v| v.0).collect(), Some(backward))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        let shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = back(&parents, &node.value, &g);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(gp.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
            // keep gradients of leaves, drop consumed intermediates
            if node.parents.is_empty() {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn binary_same(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add");
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, vec![a.0, b.0], Some(Box::new(|_, _, g| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub");
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|_, _, g| vec![Some(g.clone()), Some(g.map(|x| -x))])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul");
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| {
                vec![
                    Some(zip_map(g, p[1], |g, y| g * y)),
                    Some(zip_map(g, p[0], |g, x| g * x)),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, vec![a.0], Some(Box::new(move |_, _, g| vec![Some(g.map(|x| x * s))])))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, vec![a.0], Some(Box::new(|_, _, g| vec![Some(g.clone())])))
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, vec![a.0], Some(Box::new(|_, _, g| vec![Some(g.map(|x| -x))])))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|_, y, g| vec![Some(zip_map(g, y, |g, y| g * y * (1.0 - y)))])),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|_, y, g| vec![Some(zip_map(g, y, |g, y| g * (1.0 - y * y)))])),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                vec![Some(zip_map(g, p[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
            })),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|p, _, g| vec![Some(Tensor::full(p[0].shape(), g.item()))])),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Weighted sum of scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = terms.iter().map(|(v, w)| self.value(*v).item() * w).sum();
        let weights: Vec<f64> = terms.iter().map(|(_, w)| *w).collect();
        for (v, _) in terms {
            assert_eq!(self.value(*v).len(), 1, "weighted_sum expects scalars");
        }
        self.push(
            Tensor::scalar(value),
            terms.iter().map(|(v, _)| v.0).collect(),
            Some(Box::new(move |_, _, g| {
                weights.iter().map(|w| Some(Tensor::scalar(g.item() * w))).collect()
            })),
        )
    }

    /// `[M, K] × [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let v = matmul_raw(self.value(a).data(), self.value(b).data(), 1, sa[0], sa[1], sb[1], false);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.push(
            t(&[m, n], v),
            vec![a.0, b.0],
            Some(Box::new(move |p, _, g| {
                let ga = matmul_nt(g.data(), p[1].data(), 1, m, n, k);
                let gb = matmul_tn(p[0].data(), g.data(), 1, k, m, n);
                vec![Some(t(&[m, k], ga)), Some(t(&[k, n], gb))]
            })),
        )
    }

    /// Batched `[B, M, K] × [B, K, N]`, or `× [B, N, K]ᵀ` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: {sa:?} x {sb:?}");
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        assert_eq!(if transpose_b { sb[2] } else { sb[1] }, k, "bmm inner dims");
        let v = matmul_raw(self.value(a).data(), self.value(b).data(), bs, m, k, n, transpose_b);
        self.push(
            t(&[bs, m, n], v),
            vec![a.0, b.0],
            Some(Box::new(move |p, _, g| {
                if transpose_b {
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    let ga = matmul_raw(g.data(), p[1].data(), bs, m, n, k, false);
                    let gb = matmul_tn(g.data(), p[0].data(), bs, n, m, k);
                    vec![Some(t(&[bs, m, k], ga)), Some(t(&[bs, n, k], gb))]
                } else {
                    let ga = matmul_nt(g.data(), p[1].data(), bs, m, n, k);
                    let gb = matmul_tn(p[0].data(), g.data(), bs, k, m, n);
                    vec![Some(t(&[bs, m, k], ga)), Some(t(&[bs, k, n], gb))]
                }
            })),
        )
    }

    /// Adds a bias vector to every row of `[..., N]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let n = *self.shape(a).last().expect("non-scalar");
        assert_eq!(self.shape(bias), [n], "add_row_bias");
        let mut v = self.value(a).clone();
        let bv = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&bv) {
                *x += b;
            }
        }
        self.push(
            v,
            vec![a.0, bias.0],
            Some(Box::new(move |_, _, g| {
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (s, x) in gb.iter_mut().zip(row) {
                        *s += x;
                    }
                }
                vec![Some(g.clone()), Some(t(&[n], gb))]
            })),
        )
    }

    /// 2D convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`,
    /// `b: [Cout]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1] && sw[2] == sw[3], "conv2d: {sx:?} * {sw:?}");
        assert_eq!(self.shape(b), [sw[0]], "conv2d bias");
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k: sw[2],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_dims();
        let v = conv_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        self.push(
            t(&[geom.batch, geom.cout, oh, ow], v),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |p, _, g| {
                let (gx, gw, gb) = conv_backward(&geom, p[0].data(), p[1].data(), g.data());
                vec![
                    Some(t(&[geom.batch, geom.cin, geom.h, geom.w], gx)),
                    Some(t(&[geom.cout, geom.cin, geom.k, geom.k], gw)),
                    Some(t(&[geom.cout], gb)),
                ]
            })),
        )
    }

    /// Bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]`.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "resize expects NCHW");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let ty = resize_table(h, oh);
        let tx = resize_table(w, ow);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for pl in 0..planes {
            let base = pl * h * w;
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[base + y0 * w + x0] * (1.0 - fx) + src[base + y0 * w + x1] * fx;
                    let bot = src[base + y1 * w + x0] * (1.0 - fx) + src[base + y1 * w + x1] * fx;
                    out[(pl * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        self.push(
            t(&[s[0], s[1], oh, ow], out),
            vec![x.0],
            Some(Box::new(move |_, _, g| {
                let gd = g.data();
                let mut gx = vec![0.0; planes * h * w];
                for pl in 0..planes {
                    let base = pl * h * w;
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let go = gd[(pl * oh + oy) * ow + ox];
                            gx[base + y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                            gx[base + y0 * w + x1] += go * (1.0 - fy) * fx;
                            gx[base + y1 * w + x0] += go * fy * (1.0 - fx);
                            gx[base + y1 * w + x1] += go * fy * fx;
                        }
                    }
                }
                vec![Some(t(&[s[0], s[1], h, w], gx))]
            })),
        )
    }

    /// Concatenates `[B, C_i, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        assert_eq!(first.len(), 4, "concat expects NCHW");
        let (b, h, w) = (first[0], first[2], first[3]);
        let chans: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert!(s[0] == b && s[2] == h && s[3] == w, "concat: {first:?} vs {s:?}");
                s[1]
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for n in 0..b {
            for (&p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p).data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let chans2 = chans.clone();
        self.push(
            t(&[b, total, h, w], out),
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |_, _, g| {
                let gd = g.data();
                let mut grads: Vec<Vec<f64>> = chans2.iter().map(|c| Vec::with_capacity(b * c * plane)).collect();
                for n in 0..b {
                    let mut off = n * total * plane;
                    for (gi, &c) in grads.iter_mut().zip(&chans2) {
                        gi.extend_from_slice(&gd[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                grads
                    .into_iter()
                    .zip(&chans2)
                    .map(|(gv, &c)| Some(t(&[b, c, h, w], gv)))
                    .collect()
            })),
        )
    }

    /// `out[i] = x[index[i]]`, or 0 where the index is `None`. Covers
    /// reshapes, permutations, crops, pads and slices.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, out_shape: &[usize]) -> Var {
        assert_eq!(index.len(), numel(out_shape), "gather: index length vs shape");
        let src = self.value(x);
        let in_len = src.len();
        let in_shape = src.shape().to_vec();
        let out: Vec<f64> = index
            .iter()
            .map(|i| i.map_or(0.0, |i| src.data()[i]))
            .collect();
        self.push(
            t(out_shape, out),
            vec![x.0],
            Some(Box::new(move |_, _, g| {
                let mut gx = vec![0.0; in_len];
                for (gi, i) in g.data().iter().zip(&index) {
                    if let Some(i) = i {
                        gx[*i] += gi;
                    }
                }
                vec![Some(t(&in_shape, gx))]
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n = self.value(x).len();
        assert_eq!(n, numel(shape), "reshape");
        self.gather(x, (0..n).map(Some).collect(), shape)
    }

    /// Channel range `[start, start + len)` of `[B, C, H, W]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let plane = s[2] * s[3];
        assert!(start + len <= s[1], "slice_channels out of range");
        let mut idx = Vec::with_capacity(s[0] * len * plane);
        for n in 0..s[0] {
            let base = (n * s[1] + start) * plane;
            idx.extend((base..base + len * plane).map(Some));
        }
        self.gather(x, idx, &[s[0], len, s[2], s[3]])
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let s = self.shape(x).to_vec();
        let n = *s.last().expect("non-scalar");
        assert_eq!(self.shape(gamma), [n]);
        assert_eq!(self.shape(beta), [n]);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data();
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        self.push(
            t(&s, out),
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |_, _, g| {
                let gd = g.data();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let i = r * n + j;
                        gg[j] += gd[i] * xhat[i];
                        gb[j] += gd[i];
                        let dh = gd[i] * gv[j];
                        sum_d += dh;
                        sum_dx += dh * xhat[i];
                    }
                    for j in 0..n {
                        let i = r * n + j;
                        let dh = gd[i] * gv[j];
                        gx[i] = inv_std[r] / n as f64 * (n as f64 * dh - sum_d - xhat[i] * sum_dx);
                    }
                }
                vec![Some(t(&s, gx)), Some(t(&[n], gg)), Some(t(&[n], gb))]
            })),
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let n = *s.last().expect("non-scalar");
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(
            t(&s, out),
            vec![x.0],
            Some(Box::new(move |_, y, g| {
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(t(&s, gx))]
            })),
        )
    }
}

/// `C[b] = A[b] · B[b]` (or `A[b] · B[b]ᵀ`), row-major.
fn matmul_raw(a: &[f64], b: &[f64], bs: usize, m: usize, k: usize, n: usize, transpose_b: bool) -> Vec<f64> {
    let mut c = vec![0.0; bs * m * n];
    for bi in 0..bs {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let c = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            if transpose_b {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
                }
            } else {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
    c
}

/// `G[b] · B[b]ᵀ` with `G: [m, n]`, `B: [k, n]` → `[m, k]`.
fn matmul_nt(g: &[f64], b: &[f64], bs: usize, m: usize, n: usize, k: usize) -> Vec<f64> {
    matmul_raw(g, b, bs, m, n, k, true)
}

/// `A[b]ᵀ · G[b]` with `A: [m, k]`, `G: [m, n]` → `[k, n]`.
fn matmul_tn(a: &[f64], g: &[f64], bs: usize, k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; bs * k * n];
    for bi in 0..bs {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let g = &g[bi * m * n..(bi + 1) * m * n];
        let o = &mut out[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (ov, gv) in o[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                    *ov += av * gv;
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_dims(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Valid output range along one axis for kernel tap `kk`.
    fn range(&self, kk: usize, input: usize, output: usize) -> (usize, usize) {
        // input index = o*stride + kk - pad must lie in [0, input)
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(self.stride) };
        let hi_excl = if input + self.pad > kk {
            ((input + self.pad - kk - 1) / self.stride + 1).min(output)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_dims();
    let mut out = vec![0.0; g.batch * g.cout * oh * ow];
    for n in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * oh * ow..(n * g.cout + co + 1) * oh * ow];
            o.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..g.cin {
                let xi = &x[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let (y_lo, y_hi) = g.range(ky, g.h, oh);
                    for kx in 0..g.k {
                        let wv = w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                        let (x_lo, x_hi) = g.range(kx, g.w, ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut o[oy * ow..(oy + 1) * ow];
                            let irow = &xi[iy * g.w..(iy + 1) * g.w];
                            for ox in x_lo..x_hi {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], go: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.out_dims();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.cout];
    for n in 0..g.batch {
        for co in 0..g.cout {
            let o = &go[(n * g.cout + co) * oh * ow..(n * g.cout + co + 1) * oh * ow];
            gb[co] += o.iter().sum::<f64>();
            for ci in 0..g.cin {
                let xoff = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.k {
                    let (y_lo, y_hi) = g.range(ky, g.h, oh);
                    for kx in 0..g.k {
                        let wi = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                        let wv = w[wi];
                        let (x_lo, x_hi) = g.range(kx, g.w, ow);
                        let mut acc = 0.0;
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            for ox in x_lo..x_hi {
                                let ix = xoff + iy * g.w + ox * g.stride + kx - g.pad;
                                let gv = o[oy * ow + ox];
                                acc += gv * x[ix];
                                gx[ix] += gv * wv;
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
