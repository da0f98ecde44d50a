//! Bilinear sampling with border clamping, shared by every resampling path.

/// Four-neighbour bilinear stencil for one sample position.
///
/// `pixels` are flat pixel indices (`y * width + x`), `weights` the
/// interpolation weights and `d_dx`/`d_dy` their derivatives w.r.t. the
/// sample coordinate. Derivatives are zero along an axis on which the
/// coordinate was clamped.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub pixels: [usize; 4],
    pub weights: [f64; 4],
    pub d_dx: [f64; 4],
    pub d_dy: [f64; 4],
}

impl Tap {
    #[inline]
    pub fn new(x: f64, y: f64, width: usize, height: usize) -> Tap {
        let max_x = (width - 1) as f64;
        let max_y = (height - 1) as f64;
        let cx = x.clamp(0.0, max_x);
        let cy = y.clamp(0.0, max_y);
        let x0 = (cx.floor() as usize).min(width - 1);
        let y0 = (cy.floor() as usize).min(height - 1);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let fx = cx - x0 as f64;
        let fy = cy - y0 as f64;
        let gx = if x < 0.0 || x > max_x { 0.0 } else { 1.0 };
        let gy = if y < 0.0 || y > max_y { 0.0 } else { 1.0 };
        Tap {
            pixels: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            d_dx: [
                -gx * (1.0 - fy),
                gx * (1.0 - fy),
                -gx * fy,
                gx * fy,
            ],
            d_dy: [
                -gy * (1.0 - fx),
                -gy * fx,
                gy * (1.0 - fx),
                gy * fx,
            ],
        }
    }

    /// Interpolated value of channel `c` in a channel-last buffer.
    #[inline]
    pub fn sample(&self, data: &[f64], channels: usize, c: usize) -> f64 {
        let mut acc = 0.0;
        for k in 0..4 {
            acc += self.weights[k] * data[self.pixels[k] * channels + c];
        }
        acc
    }

    /// `(value, d value/dx, d value/dy)` for channel `c`.
    #[inline]
    pub fn sample_with_grad(&self, data: &[f64], channels: usize, c: usize) -> (f64, f64, f64) {
        let mut v = 0.0;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for k in 0..4 {
            let s = data[self.pixels[k] * channels + c];
            v += self.weights[k] * s;
            gx += self.d_dx[k] * s;
            gy += self.d_dy[k] * s;
        }
        (v, gx, gy)
    }

    /// Adds `g * weight` into the four source samples of channel `c`.
    #[inline]
    pub fn scatter(&self, grad: &mut [f64], channels: usize, c: usize, g: f64) {
        for k in 0..4 {
            grad[self.pixels[k] * channels + c] += g * self.weights[k];
        }
    }
}

/// Clamped linear stencil along one axis for a constant offset: position
/// `i + offset` for every `i` in `0..len`.
pub(crate) struct Axis {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub frac: Vec<f64>,
    /// 1 where the position was not clamped, so the derivative is live.
    pub live: Vec<f64>,
}

impl Axis {
    pub fn new(len: usize, offset: f64) -> Axis {
        let max = (len - 1) as f64;
        let mut axis = Axis {
            i0: Vec::with_capacity(len),
            i1: Vec::with_capacity(len),
            frac: Vec::with_capacity(len),
            live: Vec::with_capacity(len),
        };
        for i in 0..len {
            let p = i as f64 + offset;
            let c = p.clamp(0.0, max);
            let i0 = (c.floor() as usize).min(len - 1);
            axis.i0.push(i0);
            axis.i1.push((i0 + 1).min(len - 1));
            axis.frac.push(c - i0 as f64);
            axis.live.push(if p < 0.0 || p > max { 0.0 } else { 1.0 });
        }
        axis
    }
}

/// Bilinear resampling of a whole RGB image at `(x + ox, y + oy)`, matching
/// [`Tap`] sample for sample.
pub(crate) struct Shift {
    pub xs: Axis,
    pub ys: Axis,
    pub width: usize,
}

impl Shift {
    pub fn new(height: usize, width: usize, ox: f64, oy: f64) -> Shift {
        Shift { xs: Axis::new(width, ox), ys: Axis::new(height, oy), width }
    }

    /// Resampled image into `out`.
    pub fn apply(&self, src: &[f64], out: &mut [f64]) {
        let w = self.width;
        for (y, ((&y0, &y1), &fy)) in self.ys.i0.iter().zip(&self.ys.i1).zip(&self.ys.frac).enumerate() {
            let (r0, r1) = (&src[y0 * w * 3..(y0 + 1) * w * 3], &src[y1 * w * 3..(y1 + 1) * w * 3]);
            let row = &mut out[y * w * 3..(y + 1) * w * 3];
            for x in 0..w {
                let (x0, x1, fx) = (self.xs.i0[x] * 3, self.xs.i1[x] * 3, self.xs.frac[x]);
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w01 = fx * (1.0 - fy);
                let w10 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                for c in 0..3 {
                    row[x * 3 + c] = w00 * r0[x0 + c] + w01 * r0[x1 + c] + w10 * r1[x0 + c] + w11 * r1[x1 + c];
                }
            }
        }
    }

    /// Adjoint of [`Shift::apply`] for `g`, accumulated onto `grad`. Returns
    /// `(Σ g·∂out/∂ox, Σ g·∂out/∂oy)` for the source image `src`.
    pub fn backward(&self, src: &[f64], g: &[f64], grad: &mut [f64]) -> (f64, f64) {
        let w = self.width;
        let row_len = w * 3;
        let (mut dx, mut dy) = (0.0, 0.0);
        let mut t = vec![0.0; row_len];
        for y in 0..self.ys.i0.len() {
            let (y0, y1, fy, ly) = (self.ys.i0[y], self.ys.i1[y], self.ys.frac[y], self.ys.live[y]);
            let a0 = &src[y0 * row_len..(y0 + 1) * row_len];
            let a1 = &src[y1 * row_len..(y1 + 1) * row_len];
            let gr = &g[y * row_len..(y + 1) * row_len];
            t.fill(0.0);
            let (mut sx, mut sy) = (0.0, 0.0);
            for x in 0..w {
                let (x0, x1, fx, lx) = (self.xs.i0[x] * 3, self.xs.i1[x] * 3, self.xs.frac[x], self.xs.live[x]);
                for c in 0..3 {
                    let v = gr[x * 3 + c];
                    let (a, b, p, q) = (a0[x0 + c], a0[x1 + c], a1[x0 + c], a1[x1 + c]);
                    sx += v * lx * ((1.0 - fy) * (b - a) + fy * (q - p));
                    sy += v * ((1.0 - fx) * (p - a) + fx * (q - b));
                    t[x0 + c] += v * (1.0 - fx);
                    t[x1 + c] += v * fx;
                }
            }
            dx += sx;
            dy += ly * sy;
            let g0 = &mut grad[y0 * row_len..(y0 + 1) * row_len];
            g0.iter_mut().zip(&t).for_each(|(o, v)| *o += (1.0 - fy) * v);
            let g1 = &mut grad[y1 * row_len..(y1 + 1) * row_len];
            g1.iter_mut().zip(&t).for_each(|(o, v)| *o += fy * v);
        }
        (dx, dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_positions_hit_single_pixel() {
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let tap = Tap::new(2.0, 1.0, 4, 3);
        assert_eq!(tap.sample(&data, 1, 0), 6.0);
    }

    #[test]
    fn clamps_outside_the_border() {
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(Tap::new(-3.0, -1.0, 4, 3).sample(&data, 1, 0), 0.0);
        assert_eq!(Tap::new(10.0, 9.0, 4, 3).sample(&data, 1, 0), 11.0);
        let t = Tap::new(-3.0, 0.5, 4, 3);
        assert!(t.d_dx.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn interpolates_linearly() {
        // f(x, y) = x + 4y is reproduced exactly by bilinear interpolation
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let tap = Tap::new(1.25, 0.5, 4, 3);
        let (v, gx, gy) = tap.sample_with_grad(&data, 1, 0);
        assert!((v - (1.25 + 2.0)).abs() < 1e-12);
        assert!((gx - 1.0).abs() < 1e-12);
        assert!((gy - 4.0).abs() < 1e-12);
    }
}
