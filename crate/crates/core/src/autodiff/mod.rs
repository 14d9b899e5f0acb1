//! Dense matrices, a reverse-mode tape, layers and optimizers.
//!
//! Everything runs in `f64`; gradients are checked against central finite
//! differences in the unit tests of each file.

mod matrix;
mod nn;
mod optim;
mod tape;

pub use matrix::Matrix;
pub use nn::{
    sinusoidal_embedding, Graph, LayerNorm, Linear, ParamId, ParamStore, SelfAttention,
    TransformerBlock,
};
pub use optim::{clip_grad_norm, AdamW, WarmupCosine};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
pub(crate) use tape::smooth_l1;
