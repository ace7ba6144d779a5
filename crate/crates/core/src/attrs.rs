//! Per-node operator attributes.
//!
//! Every field is optional: a graph fresh out of the builder carries only the
//! attributes that do not influence shapes (clamp bounds), and the solver fills
//! in the rest. A field that is already `Some` before solving is treated as pinned.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Attrs {
    /// 0-indexed axis for reductions, softmax, cumulative ops and `cat`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keepdim: Option<bool>,
    /// Spatial kernel extents. For convolutions these mirror the weight's trailing dims.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<u32>,
    /// Convolution groups, or the group count of `group_norm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_max: Option<f64>,
}

impl Attrs {
    pub fn is_empty(&self) -> bool {
        *self == Attrs::default()
    }
}

/// Attribute domains used when the solver resolves a placeholder.
pub mod domains {
    pub const STRIDE: (u32, u32) = (1, 4);
    pub const PADDING: (u32, u32) = (0, 3);
    pub const DILATION: (u32, u32) = (1, 4);
    pub const KERNEL: (u32, u32) = (1, 7);
    pub const GROUPS: [u32; 3] = [1, 2, 4];
    pub const CLAMP_MIN: [f64; 3] = [-1.0, -0.5, 0.0];
    pub const CLAMP_MAX: [f64; 3] = [0.5, 1.0, 2.0];
}
