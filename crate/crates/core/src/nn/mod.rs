//! Differentiable building blocks and network assemblies.

pub mod assembly;
pub mod chain;
pub mod conv;
pub mod ops;
pub mod params;

pub use assembly::{
    logistic, Branch, BranchGrads, BranchKind, BranchOutputs, CenterHead, Cma, DenseEnc,
    NetConfig, SparseEnc,
};
pub use chain::{Block, Chain};
pub use conv::{conv2d, tconv2d, ConvGeom, ConvParams};
pub use ops::{aggregate, concat, rectify};
pub use params::{Param, ParamStore};
