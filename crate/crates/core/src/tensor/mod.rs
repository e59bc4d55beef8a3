mod adam;
mod conv;
mod params;
mod tape;

pub use adam::Adam;
pub use conv::conv_out_len;
pub use params::{glorot_uniform, GradMap, ParamId, ParamSet, Tensor};
pub use tape::{BackwardResult, Tape, Var};
