//! Point cloud completion inference with self-structure augmentation.
//!
//! The pipeline renders the partial input into depth maps, fuses point and
//! view features into a global descriptor, decodes a coarse shape, and
//! refines it through two dual-path upsampling steps. The crate also ships
//! the evaluation metrics, the viewpoint-crop benchmark protocol, and the
//! brute-force references used to verify the fast kernels.

pub mod error;
pub mod geom;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod profile;
pub mod projection;
pub mod reference;
pub mod sdg;
pub mod selfcheck;
pub mod svfnet;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{PointCloud, Viewpoint};
pub use profile::Profile;
