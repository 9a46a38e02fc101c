//! Finite-difference gradient checks over every differentiable op, every
//! model component and the end-to-end tiny model, all in `f64`.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{assemble_input, stem_forward, tokenize_project, PositionalVars, StemConfig, StemKind, StemParams, StemVars};
use crate::error::Result;
use crate::loss::{compact_loss, cross_entropy, label_smoothing_loss, KlVariant, LossConfig};
use crate::stt::{
    attend, block_mlp, forward, spatial_attention, temporal_attention, AttentionAxis, AttnVars, MlpVars, ModelConfig,
    ModelParams, ModelVars,
};
use crate::tensor::{
    grad_check_with, GradCheckOptions, GradCheckReport, Graph, Tensor, TensorError, UnfoldSpec, Var, LN_EPS,
};

/// Acceptance threshold on the largest relative error.
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub cases: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    /// `name,coords,max_rel_error,max_abs_error,passed` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,coords,max_rel_error,max_abs_error,passed\n");
        for c in &self.cases {
            out.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                c.name,
                c.report.coords_checked,
                c.report.max_rel_error,
                c.report.max_abs_error,
                c.report.passed()
            ));
        }
        out
    }
}

type Objective = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + Send + Sync>;

struct Case {
    name: String,
    params: Vec<Tensor<f64>>,
    f: Objective,
}

fn lift(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// Wrap an op with a fixed random weighting so every output coordinate
/// reaches the scalar objective with a distinct coefficient.
fn weighted<F>(name: &str, shapes: &[&[usize]], rng: &mut ChaCha8Rng, op: F) -> Case
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + Send + Sync + 'static,
{
    let params: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s.to_vec(), 1.0, rng)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let out = op(&mut g, &vars).expect("suite op is well formed");
        g.shape(out).to_vec()
    };
    let weights = Tensor::<f64>::randn(out_shape, 1.0, rng);
    Case {
        name: name.to_string(),
        params,
        f: Box::new(move |g, p| {
            let out = op(g, p)?;
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        }),
    }
}

fn attn_vars(p: &[Var]) -> AttnVars {
    AttnVars {
        ln_gamma: p[1],
        ln_beta: p[2],
        w_q: p[3],
        w_k: p[4],
        w_v: p[5],
        w_o: p[6],
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = vec![
        weighted("add", &[&[3, 4], &[3, 4]], rng, |g, p| g.add(p[0], p[1])),
        weighted("sub", &[&[3, 4], &[3, 4]], rng, |g, p| g.sub(p[0], p[1])),
        weighted("mul", &[&[3, 4], &[3, 4]], rng, |g, p| g.mul(p[0], p[1])),
        weighted("scale", &[&[5]], rng, |g, p| Ok(g.scale(p[0], -1.7))),
        weighted("add_scalar", &[&[5]], rng, |g, p| Ok(g.add_scalar(p[0], 0.3))),
        weighted("add_trailing", &[&[2, 3, 4], &[3, 4]], rng, |g, p| g.add_trailing(p[0], p[1])),
        weighted("expand", &[&[3]], rng, |g, p| g.expand(p[0], &[2, 4, 3])),
        weighted("matmul", &[&[3, 4], &[4, 2]], rng, |g, p| g.matmul(p[0], p[1])),
        weighted("linear", &[&[2, 3, 4], &[4, 5]], rng, |g, p| g.linear(p[0], p[1])),
        weighted("reshape", &[&[2, 6]], rng, |g, p| g.reshape(p[0], &[3, 4])),
        weighted("permute", &[&[2, 3, 4]], rng, |g, p| g.permute(p[0], &[2, 0, 1])),
        weighted("concat", &[&[2, 1, 3], &[2, 2, 3]], rng, |g, p| g.concat(&[p[0], p[1]], 1)),
        weighted("narrow", &[&[3, 5, 2]], rng, |g, p| g.narrow(p[0], 1, 1, 3)),
        weighted("take_last", &[&[2, 4]], rng, |g, p| g.take_last(p[0], vec![3, 0, 1, 1, 2, 2])),
        weighted("softmax", &[&[2, 4, 3]], rng, |g, p| g.softmax(p[0], 1)),
        weighted("log_softmax", &[&[3, 5]], rng, |g, p| g.log_softmax(p[0], 1)),
        weighted("layer_norm", &[&[4, 6], &[6], &[6]], rng, |g, p| {
            g.layer_norm(p[0], p[1], p[2], LN_EPS)
        }),
        weighted("gelu", &[&[4, 5]], rng, |g, p| Ok(g.gelu(p[0]))),
        weighted("exp", &[&[6]], rng, |g, p| Ok(g.exp(p[0]))),
        weighted("log", &[&[6]], rng, |g, p| {
            let e = g.exp(p[0]);
            Ok(g.log(e))
        }),
        weighted("sum", &[&[2, 3]], rng, |g, p| Ok(g.sum(p[0]))),
        weighted("mean", &[&[2, 3]], rng, |g, p| Ok(g.mean(p[0]))),
        weighted("mean_axis", &[&[2, 3, 4]], rng, |g, p| g.mean_axis(p[0], 1)),
        weighted("unfold", &[&[2, 5, 5, 2]], rng, |g, p| {
            g.unfold(
                p[0],
                UnfoldSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            )
        }),
    ];
    for axis in [AttentionAxis::Spatial, AttentionAxis::Temporal] {
        let name = format!("attend_{axis:?}").to_lowercase();
        let s: &[usize] = &[2, 3, 4, 4];
        cases.push(weighted(&name, &[s, s, s], rng, move |g, p| {
            Ok(attend(g, p[0], p[1], p[2], 2, axis)?.output)
        }));
    }
    cases
}

fn component_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let d = 8;
    let z: &[usize] = &[2, 3, 4, d];
    let attn_shapes: [&[usize]; 7] = [z, &[d], &[d], &[d, d], &[d, d], &[d, d], &[d, d]];
    let mut cases = vec![
        weighted("spatial_attention", &attn_shapes, rng, |g, p| {
            Ok(spatial_attention(g, p[0], &attn_vars(p), 2).map_err(lift)?.output)
        }),
        weighted("temporal_attention", &attn_shapes, rng, |g, p| {
            Ok(temporal_attention(g, p[0], &attn_vars(p), 2).map_err(lift)?.output)
        }),
        weighted("block_mlp", &[z, &[d], &[d], &[d, 12], &[12, d]], rng, |g, p| {
            let m = MlpVars {
                ln_gamma: p[1],
                ln_beta: p[2],
                w1: p[3],
                w2: p[4],
            };
            block_mlp(g, p[0], &m).map_err(lift)
        }),
        weighted("tokenize_project", &[&[2, 3, 2, 2, 5], &[5, 4]], rng, |g, p| {
            tokenize_project(g, p[0], p[1]).map_err(lift)
        }),
    ];
    for with_time in [true, false] {
        let name = if with_time { "assemble_input" } else { "assemble_input_no_time" };
        cases.push(weighted(name, &[&[2, 3, 4, 5], &[4, 5], &[4, 5], &[5]], rng, move |g, p| {
            let pos = PositionalVars {
                space: p[1],
                time: p[2],
                cls: p[3],
            };
            assemble_input(g, p[0], &pos, with_time).map_err(lift)
        }));
    }
    for (name, kind, side) in [
        ("conv_stem", StemKind::ConvStem, 8),
        ("linear_patch_stem", StemKind::LinearPatch { patch: 2 }, 4),
    ] {
        let cfg = StemConfig {
            kind,
            in_height: side,
            in_width: side,
            in_channels: 2,
            channels: 3,
        };
        let stem = StemParams::<f64>::init(&cfg, rng);
        let frame_shape = [2, 2, side, side, 2];
        let mut shapes: Vec<Vec<usize>> = vec![frame_shape.to_vec()];
        for layer in &stem.layers {
            shapes.push(layer.weight.shape().to_vec());
            shapes.push(layer.bias.shape().to_vec());
        }
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        cases.push(weighted(name, &refs, rng, move |g, p| {
            let vars = StemVars {
                layers: p[1..].chunks(2).map(|c| (c[0], c[1])).collect(),
            };
            stem_forward(g, p[0], &cfg, &vars).map_err(lift)
        }));
    }
    cases
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let labels = vec![1usize, 0, 3];
    let logits = Tensor::<f64>::randn([3, 4], 1.5, rng);
    type LossFn = fn(&mut Graph<f64>, Var, &[usize]) -> crate::Result<Var>;
    let losses: [(&str, LossFn); 4] = [
        ("cross_entropy", |g, x, y| cross_entropy(g, x, y)),
        ("label_smoothing", |g, x, y| label_smoothing_loss(g, x, y, 0.1)),
        ("compact_standard", |g, x, y| compact_loss(g, x, y, 0.7, KlVariant::Standard)),
        ("compact_unweighted", |g, x, y| compact_loss(g, x, y, 0.7, KlVariant::Unweighted)),
    ];
    losses
        .into_iter()
        .map(|(name, loss)| {
            let labels = labels.clone();
            Case {
                name: name.to_string(),
                params: vec![logits.clone()],
                f: Box::new(move |g, p| loss(g, p[0], &labels).map_err(lift)),
            }
        })
        .collect()
}

fn model_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    for (spatial, temporal) in [(true, true), (true, false), (false, true), (false, false)] {
        let cfg = ModelConfig {
            spatial,
            temporal,
            ..ModelConfig::tiny()
        };
        let params = ModelParams::<f64>::init(&cfg, rng).expect("tiny geometry is valid");
        let frames = Tensor::<f64>::randn(cfg.frame_shape(2), 1.0, rng);
        let flat: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
        let loss = LossConfig::default();
        let name = format!(
            "tiny_model{}{}",
            if spatial { "_spatial" } else { "" },
            if temporal { "_temporal" } else { "" }
        );
        cases.push(Case {
            name,
            params: flat,
            f: Box::new(move |g, p| {
                let vars = ModelVars::from_flat(&params, p);
                let x = g.constant(frames.clone());
                let logits = forward(g, x, &vars, &cfg).map_err(lift)?;
                loss.apply(g, logits, &[0, 2]).map_err(lift)
            }),
        });
    }
    cases
}

/// Run every case with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<Case> = op_cases(&mut rng)
        .into_iter()
        .chain(component_cases(&mut rng))
        .chain(loss_cases(&mut rng))
        .chain(model_cases(&mut rng))
        .collect();
    let opts = GradCheckOptions {
        eps: GRAD_EPS,
        tol: GRAD_TOL,
        ..GradCheckOptions::default()
    };
    let mut results = Vec::with_capacity(cases.len());
    for case in cases {
        let report = grad_check_with(&case.f, &case.params, opts)?;
        results.push(CaseResult {
            name: case.name,
            report,
        });
    }
    Ok(SuiteResult {
        cases: results,
        elapsed: start.elapsed(),
    })
}
