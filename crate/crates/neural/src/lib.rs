//! Small reverse-mode autodiff engine with the layers needed for
//! convolutional, recurrent and adversarial audio models.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod recurrent;
pub mod tape;
pub mod tensor;
pub mod tensor_file;

pub use adam::Adam;
pub use conv::{ConvGeom, Padding};
pub use error::NeuralError;
pub use layers::{BatchNorm, Conv, ConvSpec, Ctx, Dense, Layer, LayerKind, LayerRow, Sequential};
pub use params::{BufferId, ParamId, ParamStore, ParamVars, Parameter};
pub use recurrent::{Attention, BiDilatedLstm, Lstm};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use tensor_file::{tensor_read, tensor_write};
