//! Test-mode evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{SampleMode, SamplingPlan};
use crate::error::Result;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::data::Dataset;
use crate::harness::train::{assemble_batch, check_data};
use crate::loss::{argmax, uar_war, EvalReport};
use crate::stt::{predict_logits, ModelConfig, ModelParams};

/// Clips per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

/// Predicted class of every clip, sampled mid-segment.
pub fn predict(params: &ModelParams<f32>, cfg: &ModelConfig, plan: &SamplingPlan, data: &Dataset) -> Result<Vec<usize>> {
    check_data(cfg, data)?;
    let plan = plan.with_mode(SampleMode::Test);
    // test-mode sampling never draws from the RNG
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let (frames, _) = assemble_batch(data, chunk, &plan, &mut rng)?;
        let logits = predict_logits(params, cfg, frames)?;
        preds.extend(logits.data().chunks_exact(cfg.classes).map(argmax));
    }
    Ok(preds)
}

pub fn evaluate(params: &ModelParams<f32>, cfg: &ModelConfig, plan: &SamplingPlan, data: &Dataset) -> Result<EvalReport> {
    let preds = predict(params, cfg, plan, data)?;
    uar_war(&preds, &data.labels(), cfg.classes)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, plan: &SamplingPlan, data: &Dataset) -> Result<EvalReport> {
    evaluate(&ckpt.params, &ckpt.config, plan, data)
}
