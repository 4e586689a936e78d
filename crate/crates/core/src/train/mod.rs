//! Desk-scale training, datasets and the sequential collapse workflow.

mod data;
mod optim;
mod trainer;
mod workflow;

pub use data::{
    encode_idx, gen_blobs, gen_regression_1d, gen_two_spirals, load_idx, parse_idx, read_idx, write_idx, Dataset,
    IdxFile, Shape1d, Split, Targets, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, VAL_FRACTION,
};
pub use optim::{sgd_step, Sgd};
pub use trainer::{
    evaluate, evaluate_split, train, train_layers, EpochRecord, Evaluation, LrStep, TrainConfig, TrainLog, FINETUNE_LR,
    SCRATCH_LR,
};
pub use workflow::{
    demo_fig1, sensitivity_sweep, sequential_collapse, Fig1Config, Fig1Output, Fig1Point, Fig1Setting,
    SequentialOutcome, StageReport, SweepRow, FIG1_FIXED_ALPHAS,
};
