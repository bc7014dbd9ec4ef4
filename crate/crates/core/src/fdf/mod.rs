//! Feature dependency facilitation: the MI difference loss and GAM gating.

pub mod gam;
pub mod mi;

pub use gam::{gam, GamParams};
pub use mi::{
    entropy, entropy_of, histogram, joint_histogram, mi_difference, mi_loss, mi_loss_var, mutual_information, soft_mi_per_image,
    soft_mutual_information, HistogramMi, HistogramMode,
};
