//! Video frame interpolation via adaptive separable convolution, from scratch.
//!
//! A kernel-prediction network ([`model`]) looks at two frames and emits four
//! 1D kernels per output pixel; the position-varying separable convolution
//! operator ([`sepconv`]) renders the intermediate frame from them in one
//! pass. Everything differentiable is verified against the central-difference
//! oracle in [`gradcheck`]. [`training`] provides the losses, the AdaMax
//! optimizer and the two-phase training loop; [`datapipe`] builds
//! motion-weighted patch datasets from frame sequences; [`eval`] holds the
//! image-quality metrics, the withheld-frame protocol and benchmarks.

pub mod datapipe;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod rng;
pub mod sepconv;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Reduction, Scalar, Tensor};
