//! State-space machinery: HiPPO initialization, bilinear discretization,
//! recurrent scan, the convolution kernel (naive and structured) and FFT
//! causal convolution.

mod conv;
mod discrete;
mod grad;
mod kernel;
mod params;

pub use conv::{accumulate_kernel_grad, causal_conv, ConvWorkspace, FftConv};
pub use discrete::{discretize_bilinear, kernel_naive, ssm_scan, DiscreteSsm};
pub use grad::{kernel_backward, KernelGrads};
pub use kernel::{kernel_fast, kernel_fast_multi, DplrView};
pub use params::{
    complex_eigenvalues, hippo_legs_decomposition, hippo_legs_init, hippo_legs_matrix, DplrParams,
    LegsDecomposition, LOG_DT_MAX, LOG_DT_MIN,
};

pub(crate) use params::random_output_map;

/// Convolution filter taps, tap 0 first.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel(pub Vec<f64>);

impl Kernel {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}
