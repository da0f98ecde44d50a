//! Light field video synthesis from monocular video through an adaptive
//! tensor-display representation.

pub mod autograd;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod fit;
pub mod image;
pub mod io;
pub mod lf;
pub mod losses;
pub mod nn;
pub(crate) mod sampling;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use image::Image;
pub use lf::{
    center_view, refocus, td_synthesize, td_synthesize_fixed, AngularGrid, DisplacementVector,
    LightField, TDRepresentation,
};
pub use tensor::Tensor;
pub use warp::{
    depth_to_disparity, forward_splat_disparity, inverse_warp, warp_sai_to_center,
    AffineDepthParams, DepthMap, DisparityMap, FlowField, HoleMask, Mask,
};
