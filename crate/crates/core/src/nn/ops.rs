//! Graph nodes wrapping the light-field kernels and losses.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::lf::{td_backward_raw, td_forward_raw, AngularGrid, LightField, CHANNELS};
use crate::losses::bins_raw;
use crate::tensor::Tensor;
use crate::warp::DisparityMap;

/// Adaptive TD synthesis inside the graph. `f` is `[N, R, H, W, 3]`, `d` is
/// `[N]`; the result is `[views, H, W, 3]`.
pub fn td_synthesize(g: &mut Graph, f: Var, d: Var, grid: AngularGrid) -> Var {
    let s = g.shape(f).to_vec();
    assert!(s.len() == 5 && s[4] == CHANNELS, "td_synthesize expects [N, R, H, W, 3], got {s:?}");
    let (layers, rank, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(g.shape(d), [layers], "one displacement per layer");
    let out = td_forward_raw(g.value(f).data(), layers, rank, h, w, g.value(d).data(), grid);
    let value = Tensor::new(vec![grid.len(), h, w, CHANNELS], out).expect("shape");
    g.custom(
        &[f, d],
        value,
        Box::new(move |p, _, go| {
            let (gf, gd) = td_backward_raw(p[0].data(), layers, rank, h, w, p[1].data(), grid, go.data());
            vec![
                Some(Tensor::new(p[0].shape().to_vec(), gf).expect("shape")),
                Some(Tensor::from_vec(gd)),
            ]
        }),
    )
}

/// Turns a scalar loss with an analytic gradient into a graph node. The
/// light field value must be `[views, H, W, 3]` within `[0, 1]`.
pub fn lf_loss(
    g: &mut Graph,
    lf: Var,
    grid: AngularGrid,
    loss: impl FnOnce(&LightField) -> Result<(f64, Vec<f64>)>,
) -> Result<Var> {
    let s = g.shape(lf).to_vec();
    let field = LightField::new(grid, s[1], s[2], g.value(lf).data().to_vec())?;
    let (value, grad) = loss(&field)?;
    Ok(g.custom(
        &[lf],
        Tensor::scalar(value),
        Box::new(move |_, _, go| {
            let k = go.item();
            vec![Some(Tensor::new(s.clone(), grad.iter().map(|v| v * k).collect()).expect("shape"))]
        }),
    ))
}

/// Bins chamfer term on a `[N]` displacement node.
pub fn bins_loss(g: &mut Graph, d: Var, disparity: &DisparityMap) -> Result<Var> {
    let (value, grad) = bins_raw(g.value(d).data(), disparity)?;
    Ok(g.custom(
        &[d],
        Tensor::scalar(value),
        Box::new(move |_, _, go| {
            let k = go.item();
            vec![Some(Tensor::from_vec(grad.iter().map(|v| v * k).collect()))]
        }),
    ))
}
