//! Synthetic benchmarks, training, evaluation, ablation and persistence.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointError};
pub use config::Config;
pub use data::{gen_synthetic, Dataset, LabeledClip, SyntheticSpec, Task};
pub use eval::{evaluate, evaluate_checkpoint};
pub use train::{train, EpochRecord, TrainOutcome};

use crate::error::Result;
use data::load_dataset;

/// Train and test sets named by `cfg`: read from `[data] train_path` and
/// `test_path` when set, generated from `seed` otherwise.
pub fn datasets(cfg: &Config, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = match (&cfg.data.train_path, &cfg.data.test_path) {
        (Some(a), Some(b)) => return Ok((load_dataset(a)?, load_dataset(b)?)),
        (a, b) => {
            let (gen_train, gen_test) = gen_synthetic(&cfg.synthetic_spec(seed))?;
            let train = a.as_deref().map(load_dataset).transpose()?.unwrap_or(gen_train);
            let test = b.as_deref().map(load_dataset).transpose()?.unwrap_or(gen_test);
            (train, test)
        }
    };
    Ok((train, test))
}
