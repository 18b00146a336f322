//! Wavelet convolutions and the depthwise fast wavelet transform, with the
//! networks built from them, on a small deterministic tensor engine.

pub mod autograd;
pub mod complexity;
pub mod connectivity;
pub mod data;
pub mod error;
pub mod layers;
pub mod models;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Tape, Var};
pub use complexity::{
    closed_form, count_macs, count_params, reconcile, ClosedFormKind, ComplexityReport, LayerSpec,
};
pub use connectivity::{
    adjacency_of_dfwt, adjacency_of_wconv, compose, haar_matrix, is_full, minimality_exhaustive,
    minimality_lower_bound, nnz, AdjacencyMatrix, HaarMatrix,
};
pub use error::{Error, Result};
pub use layers::{
    ablation_unit_forward, dfwt_forward, waveletnet_unit_forward, wconv_forward,
    wconv_partition_in, wconv_partition_out, DfwtSpec, UnitSpec, WConv, WConvSpec, WaveletUnit,
};
pub use models::{build_ablation, build_cifar, build_imagenet, Architecture, ModelConfig, Network};
pub use ops::{ConvKernel, SignConvention};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type WConvF32 = WConv<f32>;
pub type WaveletUnitF32 = WaveletUnit<f32>;
pub type WaveletUnitF64 = WaveletUnit<f64>;
pub type NetworkF32 = Network<f32>;
pub type NetworkF64 = Network<f64>;
