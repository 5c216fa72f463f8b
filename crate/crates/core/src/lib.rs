//! Decentralized training, storage and reward accounting over a simulated network.

pub mod autoloop;
pub mod diloco;
pub mod erasure;
pub mod identity;
pub mod ledger;
pub mod quantcore;
pub mod rounds;
pub mod scalar;
pub mod scenario;
pub mod simnet;
pub mod storagemon;
pub mod tier;

pub use scalar::Scalar;

/// Default-precision parameter vector.
pub type ParamVector = quantcore::Params<f64>;
pub type ParamVectorF32 = quantcore::Params<f32>;
pub type TernaryTensor = quantcore::Ternary<f64>;
pub type PseudoGradientF64 = diloco::PseudoGradient<f64>;
/// Exact reward arithmetic.
pub type Score = num_rational::BigRational;
