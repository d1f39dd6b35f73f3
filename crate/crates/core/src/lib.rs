//! Multi-scale cyclic-shifting window attention.
//!
//! Template and search-region feature maps are cut into `r×r` windows; every
//! key/value window is expanded into its cyclic shifts and attended to as a
//! whole flattened vector. Four interchangeable kernels compute the same
//! result with progressively less work, see [`attention::KernelRegistry`].

pub mod attention;
pub mod bench;
pub mod error;
pub mod export;
pub mod matcher;
pub mod rng;
pub mod shift;
pub mod tensor;
pub mod verify;
pub mod window;

pub use attention::{
    default_registry, multi_head_attention, spatial_mask, window_attention, AttentionKernel,
    AttentionResult, HeadConfig, KernelRegistry, MaskGrid, MultiScaleConfig, ProjectionSet,
};
pub use error::{Error, Result};
pub use shift::{ShiftMode, ShiftOffset, ShiftSet};
pub use tensor::{FeatureMap, FlatVector};
pub use window::{Window, WindowGrid};
