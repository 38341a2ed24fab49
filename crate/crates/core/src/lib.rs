pub mod error;
pub mod estimator;
pub mod experiments;
pub mod ltisim;
pub mod poly;
pub mod regression;
pub mod scalar;

pub use error::{IdentError, Result};
pub use scalar::Scalar;

pub use estimator::{
    bcd_identify, EstimationReport, EstimatorConfig, InnerMethod, ModelSetup, SetupKind,
    StabilityPolicy,
};
pub use ltisim::{DataRecord, Intersample};
pub use poly::{ModelStructure, ParameterVector, Polynomial, TransferFunction};

pub type Polynomial64 = Polynomial<f64>;
pub type Polynomial32 = Polynomial<f32>;
pub type TransferFunction64 = TransferFunction<f64>;
pub type TransferFunction32 = TransferFunction<f32>;
pub type ParameterVector64 = ParameterVector<f64>;
pub type ParameterVector32 = ParameterVector<f32>;
pub type DataRecord64 = DataRecord<f64>;
pub type DataRecord32 = DataRecord<f32>;
