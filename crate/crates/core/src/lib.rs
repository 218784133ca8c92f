pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod objectives;
pub mod rnn;
pub mod scalar;
pub mod training;

pub use scalar::Scalar;

pub type Real = f64;
pub type Tensor = autodiff::Tensor<Real>;
pub type Tape = autodiff::Tape<Real>;
pub type Segment = rnn::Segment<Real>;
pub type Posterior = rnn::Posterior<Real>;
pub type Model = rnn::Model<Real>;
pub type EncoderParams = rnn::EncoderParams<Real>;
pub type DecoderParams = rnn::DecoderParams<Real>;
pub type GruCellParams = rnn::GruCellParams<Real>;
