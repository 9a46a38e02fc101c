//! Classification losses over batched logits `[B, C]` and evaluation metrics.
//!
//! Every loss is the mean of its per-clip value over the batch.

mod metrics;

pub use metrics::{argmax, uar_war, ConfusionMatrix, EvalReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    LabelSmoothing,
    Compact,
}

/// Form of `KL(p' || u')` in the compact loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlVariant {
    /// `sum_c p'_c log((C-1) p'_c)`.
    Standard,
    /// `sum_c log(1 / ((C-1) p'_c))`, without the `p'` weighting.
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda: f64,
    pub beta: f64,
    pub kl_variant: KlVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Compact,
            lambda: 0.1,
            beta: 0.2,
            kl_variant: KlVariant::Standard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        check_beta(self.beta)
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
        match self.kind {
            LossKind::CrossEntropy => cross_entropy(g, logits, labels),
            LossKind::LabelSmoothing => label_smoothing_loss(g, logits, labels, self.lambda),
            LossKind::Compact => compact_loss(g, logits, labels, self.beta, self.kl_variant),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::input(format!("smoothing factor must be in [0, 1), got {lambda}")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::input(format!("regularizer weight must be >= 0, got {beta}")));
    }
    Ok(())
}

/// Batch size and class count, after checking the labels against them.
fn check_labels<T: Real>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let s = g.shape(logits);
    if s.len() != 2 {
        return Err(Error::input(format!("logits must be [B, C], got {s:?}")));
    }
    let (b, c) = (s[0], s[1]);
    if c < 2 {
        return Err(Error::input(format!("need at least 2 classes, got {c}")));
    }
    if labels.len() != b {
        return Err(Error::input(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::input(format!("label {y} out of range for {c} classes")));
    }
    Ok((b, c))
}

/// Log-probability of each clip's label, `[B, 1]`, and the full
/// log-softmax `[B, C]`.
fn target_log_prob<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<(Var, Var)> {
    let log_p = g.log_softmax(logits, 1)?;
    let picked = g.take_last(log_p, labels.to_vec())?;
    Ok((picked, log_p))
}

/// `-log softmax(logits)[y]`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(g, logits, labels)?;
    let (picked, _) = target_log_prob(g, logits, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -T::one()))
}

/// Cross entropy against the soft target `(1 - lambda) onehot(y) + lambda u`.
pub fn label_smoothing_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize], lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    check_labels(g, logits, labels)?;
    let (picked, log_p) = target_log_prob(g, logits, labels)?;
    let target = g.mean(picked);
    let target = g.scale(target, T::lit(lambda - 1.0));
    // mean over B*C entries is (1/C) sum_k log p_k averaged over the batch
    let uniform = g.mean(log_p);
    let uniform = g.scale(uniform, T::lit(-lambda));
    Ok(g.add(target, uniform)?)
}

/// Softmax over the non-target logits, ascending class order, `[B, C-1]`.
pub fn nontarget_softmax<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let rest = nontarget_logits(g, logits, labels)?;
    Ok(g.softmax(rest, 1)?)
}

fn nontarget_logits<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, c) = check_labels(g, logits, labels)?;
    let index: Vec<usize> = labels
        .iter()
        .flat_map(|&y| (0..c).filter(move |&k| k != y))
        .collect();
    Ok(g.take_last(logits, index)?)
}

/// Symmetric KL between the non-target distribution `p'` and the uniform
/// `u'` over the `C-1` non-target classes, halved and batch-averaged.
pub fn compact_regularizer<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize], variant: KlVariant) -> Result<Var> {
    let (b, c) = check_labels(g, logits, labels)?;
    let rest = nontarget_logits(g, logits, labels)?;
    let log_p = g.log_softmax(rest, 1)?;
    let ln_k = T::lit(((c - 1) as f64).ln());
    // KL(u'||p') = -ln(C-1) - (1/(C-1)) sum log p'
    let mean_log = g.mean(log_p);
    let neg = g.scale(mean_log, -T::one());
    let kl_up = g.add_scalar(neg, -ln_k);
    let kl_pu = match variant {
        KlVariant::Standard => {
            let p = g.exp(log_p);
            let plogp = g.mul(p, log_p)?;
            let total = g.sum(plogp);
            let per_clip = g.scale(total, T::one() / T::from_usize(b).unwrap());
            g.add_scalar(per_clip, ln_k)
        }
        KlVariant::Unweighted => g.scale(kl_up, T::from_usize(c - 1).unwrap()),
    };
    let sum = g.add(kl_up, kl_pu)?;
    Ok(g.scale(sum, T::lit(0.5)))
}

/// `CE + beta/2 (KL(u'||p') + KL(p'||u'))`. With `beta = 0` this is
/// exactly [`cross_entropy`].
pub fn compact_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    beta: f64,
    variant: KlVariant,
) -> Result<Var> {
    check_beta(beta)?;
    let ce = cross_entropy(g, logits, labels)?;
    if beta == 0.0 {
        return Ok(ce);
    }
    let reg = compact_regularizer(g, logits, labels, variant)?;
    let reg = g.scale(reg, T::lit(beta));
    Ok(g.add(ce, reg)?)
}

#[cfg(test)]
mod tests;
