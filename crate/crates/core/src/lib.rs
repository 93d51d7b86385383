pub mod adaptive;
pub mod averaging;
pub mod calibration;
pub mod error;
pub mod io;
pub mod kernels;
mod linalg;
pub mod maxlik;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod states;

pub use error::{Result, TomoError};
pub use kernels::{kernel_fock, kernel_oracle, KernelBank, KernelEvaluator};
pub use states::{
    fock_wavefunction, quadrature_pdf, sample_quadratures, DetectorModel, FockDensityMatrix, QuadratureSample,
    StateModel,
};
