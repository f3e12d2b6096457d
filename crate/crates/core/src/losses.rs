//! Training objectives: next-item cross-entropy, the uniform routing loss,
//! and the easy/hard guide loss.

use serde::{Deserialize, Serialize};

use crate::backbone::{Dimension, Exit, Route, RoutingSpace, Supernet};
use crate::error::{Error, Result};
use crate::eval::rank_target;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the uniform routing loss.
    pub lambda_uniform: f64,
    /// Weight of the guide loss.
    pub lambda_guide: f64,
    /// Top-k cutoff deciding whether the smallest submodel handles a user.
    pub recall_k: usize,
    /// Decay rate of the exponential guide targets.
    pub beta: f64,
    pub eps_log: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_uniform: 0.01,
            lambda_guide: 0.01,
            recall_k: 5,
            beta: 1.0,
            eps_log: LOG_EPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_uniform >= 0.0 && self.lambda_guide >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.recall_k == 0 {
            return Err(Error::Config("recall_k must be at least 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if !(self.eps_log > 0.0) {
            return Err(Error::Config("eps_log must be positive".into()));
        }
        Ok(())
    }
}

/// Summed cross-entropy over rows with a non-zero mask and the number of such
/// rows. `targets[r]` is the item expected after position `r`.
pub fn sr_loss_sum(tape: &mut Tape<'_>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<(Var, usize)> {
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let count = mask.iter().filter(|&&m| m).count();
    Ok((tape.cross_entropy(logits, targets, &weights)?, count))
}

/// Mean next-item cross-entropy over non-padded positions.
pub fn sr_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let (sum, count) = sr_loss_sum(tape, logits, targets, mask)?;
    if count == 0 {
        return Err(Error::Data("no non-padding positions to score".into()));
    }
    Ok(tape.scale(sum, 1.0 / count as f64))
}

/// Cross-entropy of `[B, n]` route probabilities against the uniform
/// distribution, averaged over rows.
pub fn uniform_loss(tape: &mut Tape<'_>, probs: Var, eps_log: f64) -> Var {
    let total = tape.value(probs).len() as f64;
    let logp = tape.log_clamp(probs, eps_log);
    let s = tape.sum(logp);
    tape.scale(s, -1.0 / total)
}

/// Plain-value form of [`uniform_loss`] for one distribution.
pub fn uniform_loss_value(p: &[f64], eps_log: f64) -> f64 {
    -p.iter().map(|x| x.max(eps_log).ln()).sum::<f64>() / p.len() as f64
}

/// Exponential soft target over `m` ascending candidates, peaked at the
/// smallest candidate for easy users and at the largest for hard users.
pub fn guide_targets(easy: bool, m: usize, beta: f64) -> Vec<f64> {
    assert!(m >= 1 && beta > 0.0);
    let raw: Vec<f64> = (0..m)
        .map(|i| {
            let dist = if easy { i } else { m - 1 - i };
            (-beta * dist as f64).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

/// Per-user easy flags and the three per-dimension soft targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideLabels {
    pub easy: Vec<bool>,
    pub y_emb: Vec<Vec<f64>>,
    pub y_hidden: Vec<Vec<f64>>,
    pub y_depth: Vec<Vec<f64>>,
}

impl GuideLabels {
    pub fn from_easy(easy: Vec<bool>, space: &RoutingSpace, beta: f64) -> Self {
        let build = |dim: Dimension| {
            let m = space.candidates(dim).len();
            easy.iter().map(|&e| guide_targets(e, m, beta)).collect()
        };
        Self {
            y_emb: build(Dimension::Emb),
            y_hidden: build(Dimension::Hidden),
            y_depth: build(Dimension::Depth),
            easy,
        }
    }

    pub fn targets(&self, dim: Dimension) -> &[Vec<f64>] {
        match dim {
            Dimension::Emb => &self.y_emb,
            Dimension::Hidden => &self.y_hidden,
            Dimension::Depth => &self.y_depth,
        }
    }

    pub fn len(&self) -> usize {
        self.easy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.easy.is_empty()
    }

    /// Sum over dimensions of the entropy of each user's targets, averaged
    /// over users; the lower bound of [`guide_loss`].
    pub fn mean_target_entropy(&self) -> f64 {
        let h = |y: &[f64]| -y.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        let total: f64 = Dimension::ALL
            .iter()
            .flat_map(|&d| self.targets(d).iter().map(|y| h(y)))
            .sum();
        total / self.len() as f64
    }
}

/// Decide easy/hard per sequence: easy iff `target` is within the top
/// `k` items predicted by `smallest` at the last position. Runs on a
/// gradient-free tape.
pub fn label_users(
    store: &ParamStore,
    net: &Supernet,
    seqs: &[&[usize]],
    targets: &[usize],
    smallest: &Route,
    k: usize,
) -> Result<Vec<bool>> {
    if seqs.len() != targets.len() {
        return Err(Error::Dimension {
            op: "label_users",
            lhs: vec![seqs.len()],
            rhs: vec![targets.len()],
        });
    }
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::no_grad(store);
    let logits = net.forward(&mut tape, seqs, smallest, Exit::Final, None)?;
    let v = tape.value(logits);
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| Ok(rank_target(v.row(r), t)? <= k))
        .collect()
}

/// Mean over users of the summed cross-entropies between the route
/// marginals and the guide targets.
pub fn guide_loss(
    tape: &mut Tape<'_>,
    probs: Var,
    labels: &GuideLabels,
    space: &RoutingSpace,
    eps_log: f64,
) -> Result<Var> {
    let b = tape.value(probs).rows();
    if labels.len() != b {
        return Err(Error::Dimension {
            op: "guide_loss",
            lhs: vec![b],
            rhs: vec![labels.len()],
        });
    }
    let mut terms = Vec::with_capacity(3);
    for dim in Dimension::ALL {
        let m = tape.constant(space.marginal_matrix(dim));
        let marg = tape.matmul(probs, m)?;
        let logm = tape.log_clamp(marg, eps_log);
        let y = Tensor::from_rows(labels.targets(dim))?;
        let weighted = tape.mul_const(logm, &y)?;
        terms.push(tape.sum(weighted));
    }
    let s01 = tape.add(terms[0], terms[1])?;
    let s = tape.add(s01, terms[2])?;
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// Plain-value guide loss for one user.
pub fn guide_loss_value(p: &[f64], easy: bool, space: &RoutingSpace, beta: f64, eps_log: f64) -> Result<f64> {
    let mut total = 0.0;
    for dim in Dimension::ALL {
        let marg = crate::backbone::marginalize(p, dim, space)?;
        let y = guide_targets(easy, marg.len(), beta);
        total -= y.iter().zip(&marg).map(|(yi, mi)| yi * mi.max(eps_log).ln()).sum::<f64>();
    }
    Ok(total)
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub sr: f64,
    pub uniform: f64,
    pub guide: f64,
    pub total: f64,
}

/// `sr + λ₁·uniform + λ₂·guide`, rejecting non-finite components.
pub fn total_loss(sr: f64, uniform: f64, guide: f64, cfg: &LossConfig) -> Result<f64> {
    for (name, v) in [("sr", sr), ("uniform", uniform), ("guide", guide)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(sr + cfg.lambda_uniform * uniform + cfg.lambda_guide * guide)
}
