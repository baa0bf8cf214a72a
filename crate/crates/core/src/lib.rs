//! LiDAR adverse-weather point removal with a spatial-temporal kNN convolution network.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod knn;
pub mod loss;
pub mod network;
pub mod projection;
pub mod scalar;
pub mod scan_io;
pub mod snowsim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
