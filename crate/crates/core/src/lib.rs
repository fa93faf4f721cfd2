//! Point-cloud semantic segmentation with learnable token sparsification,
//! weighted cross-attention aggregation, dual global attention and iterative
//! token reconstruction, arranged as a two-stage W-net.

pub mod ablations;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod dta;
pub mod error;
pub mod gfe;
pub mod gradcheck;
pub mod itr;
pub mod lts;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod tensor;
pub mod wnet;

pub use error::{Error, Result};
pub use tensor::Matrix;
