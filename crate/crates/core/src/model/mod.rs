//! Visual-prefix decoder-only language model shared by teacher and student.

mod encoder;
mod lm;
mod params;
mod spec;

pub use encoder::{VisualEncoder, VisualInput};
pub use lm::{Generation, LmOutputs, LmValues, TransformerLM};
pub use params::{LayerParams, LmParams, ParamGroup};
pub use spec::{ModelSpec, Role, VisualEncoderSpec};
