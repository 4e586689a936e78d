//! Layers, collapsible blocks and sequential models.

mod batchnorm;
mod block;
mod conv;
mod dropout;
mod init;
mod linear;
mod model;
mod prelu;

pub use batchnorm::BatchNorm;
pub use block::CollapsibleBlock;
pub use conv::Conv2d;
pub use dropout::Dropout;
pub use init::{init_model, ArchSpec, LayerSpec, SCRATCH_ALPHA};
pub use linear::Linear;
pub use model::{Layer, LayerNode, ModelGraph};
pub use prelu::PRelu;

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: the train/eval flag and the dropout stream.
#[derive(Clone, Debug)]
pub struct Ctx {
    pub mode: Mode,
    pub rng: Rng,
}

impl Ctx {
    pub fn train(rng: Rng) -> Self {
        Ctx { mode: Mode::Train, rng }
    }

    pub fn eval() -> Self {
        Ctx {
            mode: Mode::Eval,
            rng: Rng::seed(0),
        }
    }
}
