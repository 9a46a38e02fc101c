//! Seeded mini-batch SGD.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::{sample_frames, SampleMode, SamplingPlan};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::Config;
use crate::harness::data::Dataset;
use crate::harness::eval::evaluate;
use crate::loss::LossConfig;
use crate::stt::{self, ModelConfig, ModelParams};
use crate::tensor::{Graph, Tensor};

/// Stream tags for the training RNGs. The data generator uses tags below
/// `2 << 62`, so none of these collide with a clip stream.
const STREAM_INIT: u64 = 2 << 62;
const STREAM_SHUFFLE: u64 = (2 << 62) | (1 << 56);
const STREAM_BATCH: u64 = (2 << 62) | (2 << 56);

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial parameters for `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    ModelParams::init(cfg, &mut stream_rng(seed, STREAM_INIT))
}

/// Seed of the frame-sampling RNG for one batch; named in non-finite loss
/// diagnostics.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    stream_rng(seed, STREAM_BATCH | ((epoch as u64) << 24) | batch as u64).next_u64()
}

/// Order in which epoch `epoch` visits the `n` training clips.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_SHUFFLE | epoch as u64));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Clip-weighted mean of the batch losses.
    pub train_loss: f64,
    /// Test-set `(uar, war)` when evaluation was requested for this epoch.
    pub eval: Option<(f64, f64)>,
}

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,uar,war\n");
    for r in records {
        let (uar, war) = r.eval.map_or((String::new(), String::new()), |(u, w)| (u.to_string(), w.to_string()));
        writeln!(s, "{},{},{},{uar},{war}", r.epoch, r.lr, r.train_loss).unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Check that every clip fits the model's input geometry and class count.
pub fn check_data(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    let want = (cfg.stem.in_height, cfg.stem.in_width, cfg.stem.in_channels);
    if data.classes != cfg.classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model has {}",
            data.classes, cfg.classes
        )));
    }
    for (i, clip) in data.clips.iter().enumerate() {
        if clip.frame_shape() != want || clip.is_empty() {
            return Err(Error::config(format!(
                "clip {i} has frames {:?} x {}, model expects {want:?}",
                clip.frame_shape(),
                clip.len()
            )));
        }
        if clip.label >= cfg.classes {
            return Err(Error::config(format!("clip {i} has label {} >= {}", clip.label, cfg.classes)));
        }
    }
    Ok(())
}

/// Sample frames from each listed clip and stack them into
/// `[B, F, H, W, C]`, with the labels.
pub fn assemble_batch(
    data: &Dataset,
    indices: &[usize],
    plan: &SamplingPlan,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = &data.clips[indices[0]];
    let (h, w, c) = first.frame_shape();
    let per = h * w * c;
    let mut buf = Vec::with_capacity(indices.len() * plan.frames() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let clip = &data.clips[i];
        for t in sample_frames(clip.len(), plan, rng)? {
            buf.extend_from_slice(clip.frame(t));
        }
        labels.push(clip.label);
    }
    let frames = Tensor::from_vec(vec![indices.len(), plan.frames(), h, w, c], buf)?;
    Ok((frames, labels))
}

/// One forward/backward pass; returns the batch loss and the gradient of
/// every parameter in [`ModelParams::tensors`] order. Parameters the loss
/// does not reach get `None`.
pub fn loss_and_grads(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    loss: &LossConfig,
    frames: Tensor<f32>,
    labels: &[usize],
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.constant(frames);
    let logits = stt::forward(&mut g, x, &vars, cfg)?;
    let l = loss.apply(&mut g, logits, labels)?;
    let value = f64::from(g.value(l).item());
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(l)?;
    let grads = vars.vars().into_iter().map(|v| g.grad(v).cloned()).collect();
    Ok((value, grads))
}

/// `v <- mu v + grad + wd theta; theta <- theta - lr v`. Without a velocity
/// buffer this is `theta <- theta - lr (grad + wd theta)`.
pub fn sgd_update(theta: &mut [f32], velocity: Option<&mut [f32]>, grad: &[f32], lr: f32, momentum: f32, weight_decay: f32) {
    match velocity {
        None => {
            for (x, &d) in theta.iter_mut().zip(grad) {
                let step = if weight_decay == 0.0 { d } else { d + weight_decay * *x };
                *x -= lr * step;
            }
        }
        Some(vel) => {
            for ((x, m), &d) in theta.iter_mut().zip(vel).zip(grad) {
                *m = momentum * *m + d + weight_decay * *x;
                *x -= lr * *m;
            }
        }
    }
}

fn sgd_step(
    params: &mut ModelParams<f32>,
    mut velocity: Option<&mut ModelParams<f32>>,
    grads: &[Option<Tensor<f32>>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    let mut vel: Vec<Option<&mut Tensor<f32>>> = match velocity.as_deref_mut() {
        Some(v) => v.tensors_mut().into_iter().map(Some).collect(),
        None => Vec::new(),
    };
    vel.resize_with(grads.len(), || None);
    for ((p, grad), v) in params.tensors_mut().into_iter().zip(grads).zip(vel) {
        let zeros;
        let grad = match grad {
            Some(g) => g.data(),
            None if v.is_none() && wd == 0.0 => continue,
            None => {
                zeros = vec![0.0; p.numel()];
                &zeros
            }
        };
        sgd_update(p.data_mut(), v.map(|v| v.data_mut()), grad, lr, mu, wd);
    }
}

/// Train from scratch, or continue from `resume`.
///
/// `eval_set` is scored every `cfg.output.eval_every` epochs when that is
/// nonzero. `on_epoch` sees each finished epoch with a checkpoint of the state
/// after it, which is what the CLI persists.
pub fn train(
    cfg: &Config,
    seed: u64,
    data: &Dataset,
    eval_set: Option<&Dataset>,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    let model = cfg.model_config()?;
    let loss = cfg.loss_config();
    let plan = cfg.sampling_plan(SampleMode::Train)?;
    let test_plan = plan.with_mode(SampleMode::Test);
    let opt = &cfg.optimizer;
    check_data(&model, data)?;
    if data.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if let Some(e) = eval_set {
        check_data(&model, e)?;
    }
    let digest = cfg.digest();
    let mut ckpt = match resume {
        Some(c) => {
            if c.config != model {
                return Err(Error::config(format!(
                    "checkpoint geometry {:?} does not match config {:?}",
                    c.config, model
                )));
            }
            if c.digest != digest || c.seed != seed {
                return Err(Error::config(
                    "checkpoint was written by a different configuration or seed",
                ));
            }
            c
        }
        None => Checkpoint {
            config: model,
            epoch: 0,
            seed,
            digest,
            params: init_params(&model, seed)?,
            velocity: None,
        },
    };
    if opt.momentum > 0.0 && ckpt.velocity.is_none() {
        ckpt.velocity = Some(ModelParams::zeros(&model)?);
    }

    let mut log = Vec::new();
    for epoch in ckpt.epoch..opt.epochs {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(seed, epoch, data.len());
        let mut total = 0.0;
        for (b, indices) in order.chunks(opt.batch_size).enumerate() {
            let bseed = batch_seed(seed, epoch, b);
            let mut rng = ChaCha8Rng::seed_from_u64(bseed);
            let (frames, labels) = assemble_batch(data, indices, &plan, &mut rng)?;
            let (value, grads) = loss_and_grads(&ckpt.params, &model, &loss, frames, &labels)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    batch_seed: bseed,
                    loss: value,
                });
            }
            total += value * indices.len() as f64;
            sgd_step(
                &mut ckpt.params,
                ckpt.velocity.as_mut(),
                &grads,
                lr,
                opt.momentum,
                opt.weight_decay,
            );
        }
        ckpt.epoch = epoch + 1;
        let eval = match eval_set {
            Some(e) if cfg.output.eval_every > 0 && (epoch + 1) % cfg.output.eval_every == 0 => {
                let r = evaluate(&ckpt.params, &model, &test_plan, e)?;
                Some((r.uar, r.war))
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / data.len() as f64,
            eval,
        };
        on_epoch(&record, &ckpt)?;
        log.push(record);
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{gen_synthetic, SyntheticSpec, Task};

    #[test]
    fn quadratic_iterates_follow_the_geometric_closed_form() {
        // f(x) = a x^2 / 2, so x_k = (1 - lr a)^k x_0
        let (a, lr, x0) = (3.0f64, 0.05f64, 1.7f64);
        let mut x = [x0 as f32];
        for k in 1..=60 {
            let grad = [(a as f32) * x[0]];
            sgd_update(&mut x, None, &grad, lr as f32, 0.0, 0.0);
            let want = (1.0 - lr * a).powi(k) * x0;
            assert!((f64::from(x[0]) - want).abs() <= 1e-5 * want.abs() + 1e-12, "step {k}");
        }
    }

    #[test]
    fn zero_momentum_buffer_matches_plain_sgd() {
        let grad = [0.3f32, -1.0, 2.5];
        let mut plain = [1.0f32, 2.0, -3.0];
        let mut heavy = plain;
        let mut vel = [0f32; 3];
        sgd_update(&mut plain, None, &grad, 0.1, 0.0, 0.01);
        sgd_update(&mut heavy, Some(&mut vel), &grad, 0.1, 0.0, 0.01);
        assert_eq!(plain, heavy);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(3, 0, 50);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 0, 50));
        assert_ne!(a, epoch_order(3, 1, 50));
        assert_ne!(a, epoch_order(4, 0, 50));
        assert_ne!(batch_seed(3, 0, 0), batch_seed(3, 0, 1));
    }

    #[test]
    fn non_finite_loss_names_the_batch_seed() {
        let mut cfg = Config::default();
        cfg.data = crate::harness::config::DataSection {
            task: Task::StaticPattern,
            train_size: 4,
            test_size: 0,
            ..cfg.data
        };
        cfg.optimizer.batch_size = 2;
        let spec: SyntheticSpec = cfg.synthetic_spec(1);
        let (mut data, _) = gen_synthetic(&spec).unwrap();
        data.clips[3].frames.data_mut().fill(f32::NAN);
        let order = epoch_order(1, 0, 4);
        let batch = order.iter().position(|&i| i == 3).unwrap() / 2;
        let err = train(&cfg, 1, &data, None, None, &mut |_, _| Ok(())).unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch, batch: b, batch_seed: s, .. } => {
                assert_eq!((epoch, b, s), (0, batch, batch_seed(1, 0, batch)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn data_geometry_must_match_the_model() {
        let cfg = Config::default();
        let spec = SyntheticSpec {
            height: 8,
            train_size: 2,
            ..cfg.synthetic_spec(0)
        };
        let (data, _) = gen_synthetic(&spec).unwrap();
        let err = train(&cfg, 0, &data, None, None, &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
