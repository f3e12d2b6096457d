//! The route predictor and its differentiable discrete sampler.

use serde::{Deserialize, Serialize};

use crate::backbone::{Route, RoutingSpace};
use crate::dynlayers::{self, LayerParams, SeqLayout, SliceableParam, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{softmax, ParamId, ParamStore, RngState, Tape, Tensor, Var};

pub const ROUTER_WIDTH: usize = 32;
pub const ROUTER_HEADS: usize = 1;
/// Uniform draws are clamped to `[U_CLAMP, 1 - U_CLAMP]` before the double log.
pub const U_CLAMP: f64 = 1e-10;
pub const PROB_FLOOR: f64 = 1e-12;

/// Single-block self-attentive encoder with a linear head over routes.
#[derive(Debug, Clone)]
pub struct Router {
    pub num_routes: usize,
    pub max_len: usize,
    pub item_emb: ParamId,
    pub pos_emb: ParamId,
    pub block: LayerParams,
    pub head: SliceableParam,
}

/// Routing signals for one batch, recorded on a tape.
#[derive(Debug, Clone)]
pub struct RouterOutput {
    /// `[B, n]` route logits.
    pub logits: Var,
    /// `[B, n]` route probabilities `p(r|u)`.
    pub probs: Var,
    /// `[B, n]` Gumbel-softmax weights.
    pub alpha: Var,
    /// Gumbel-max sample per sequence.
    pub hard: Vec<Route>,
    pub temperature: f64,
}

impl Router {
    /// Encoder weights are truncated-normal; the head starts at zero so the
    /// initial route distribution is uniform.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        num_items: usize,
        max_len: usize,
        num_routes: usize,
    ) -> Result<Self> {
        let w = ROUTER_WIDTH;
        let rows = num_items + 1;
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect() };
        let item_emb = store.insert("router.item_emb", Tensor::new(vec![rows, w], normal(rows * w))?)?;
        let pos_emb = store.insert("router.pos_emb", Tensor::new(vec![max_len, w], normal(max_len * w))?)?;
        let block = LayerParams::new(store, rng, "router.block0", w)?;
        let head = SliceableParam::zeros(store, "router.head", w, num_routes)?;
        Ok(Self {
            num_routes,
            max_len,
            item_emb,
            pos_emb,
            block,
            head,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.item_emb, self.pos_emb];
        let b = &self.block;
        for p in [
            &b.query, &b.key, &b.value, &b.output, &b.ffn_in, &b.ffn_out, &b.attn_norm, &b.ffn_norm, &self.head,
        ] {
            ids.extend([p.weight, p.bias]);
        }
        ids.extend([b.attn_scale, b.ffn_scale]);
        ids
    }

    /// Route logits `[B, n]` read from the final position of each sequence.
    pub fn logits(&self, tape: &mut Tape<'_>, seqs: &[&[usize]]) -> Result<Var> {
        let layout = SeqLayout::from_ids(seqs)?;
        if let Some(b) = seqs.iter().position(|s| s.iter().all(|&i| i == 0)) {
            return Err(Error::Data(format!("sequence {b} has no items")));
        }
        if layout.seq > self.max_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds maximum {}",
                layout.seq, self.max_len
            )));
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = (0..layout.batch).flat_map(|_| 0..layout.seq).collect();
        let table = tape.param(self.item_emb);
        let pos_table = tape.param(self.pos_emb);
        let items = tape.embed(table, &ids, ROUTER_WIDTH)?;
        let pos = tape.embed(pos_table, &positions, ROUTER_WIDTH)?;
        let sum = tape.add(items, pos)?;
        let mask: Vec<f64> = ids
            .iter()
            .flat_map(|&i| std::iter::repeat(if i == 0 { 0.0 } else { 1.0 }).take(ROUTER_WIDTH))
            .collect();
        let e = tape.mul_const(sum, &Tensor::new(vec![ids.len(), ROUTER_WIDTH], mask)?)?;
        let h = dynlayers::block_forward(tape, e, &self.block, ROUTER_HEADS, ROUTER_WIDTH, &layout, None)?;
        let last = tape.rows(h, &layout.final_rows())?;
        dynlayers::dynamic_linear(tape, last, &self.head, ROUTER_WIDTH, self.num_routes)
    }

    /// `p(r|u)` for each sequence, `[B, n]`.
    pub fn route_probabilities(&self, tape: &mut Tape<'_>, seqs: &[&[usize]]) -> Result<(Var, Var)> {
        let logits = self.logits(tape, seqs)?;
        let probs = tape.softmax(logits)?;
        Ok((logits, probs))
    }

    /// Deterministic argmax routing used at inference.
    pub fn argmax_routes(&self, store: &ParamStore, seqs: &[&[usize]], space: &RoutingSpace) -> Result<Vec<Route>> {
        let mut tape = Tape::no_grad(store);
        let logits = self.logits(&mut tape, seqs)?;
        let v = tape.value(logits);
        (0..v.rows()).map(|r| space.route(argmax(v.row(r)))).collect()
    }

    /// Training-time routing: route probabilities, Gumbel-max sample and
    /// Gumbel-softmax weights sharing the same noise.
    pub fn sample(
        &self,
        tape: &mut Tape<'_>,
        seqs: &[&[usize]],
        space: &RoutingSpace,
        temperature: f64,
        rng: &mut RngState,
    ) -> Result<RouterOutput> {
        let (logits, probs) = self.route_probabilities(tape, seqs)?;
        let noise = gumbel_matrix(seqs.len(), self.num_routes, rng)?;
        let (hard, alpha) = relaxed_selection(tape, probs, &noise, temperature)?;
        Ok(RouterOutput {
            logits,
            probs,
            alpha,
            hard: hard.into_iter().map(|i| space.route(i)).collect::<Result<_>>()?,
            temperature,
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `-ln(-ln a)` with `a` clamped away from 0 and 1.
pub fn gumbel_from_uniform(a: f64) -> f64 {
    let a = a.clamp(U_CLAMP, 1.0 - U_CLAMP);
    -(-a.ln()).ln()
}

/// One Gumbel(0, 1) draw.
pub fn gumbel_noise(rng: &mut RngState) -> f64 {
    gumbel_from_uniform(rng.uniform())
}

/// `[rows, cols]` of independent Gumbel draws, filled row-major.
pub fn gumbel_matrix(rows: usize, cols: usize, rng: &mut RngState) -> Result<Tensor> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| gumbel_noise(rng)).collect())
}

/// Hard choice `argmax(log p + g)` and relaxed weights
/// `softmax((log p + g) / τ)` for given noise.
pub fn gumbel_select(p: &[f64], noise: &[f64], temperature: f64) -> Result<(usize, Vec<f64>)> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if p.len() != noise.len() || p.is_empty() {
        return Err(Error::Dimension {
            op: "gumbel_select",
            lhs: vec![p.len()],
            rhs: vec![noise.len()],
        });
    }
    let perturbed: Vec<f64> = p.iter().zip(noise).map(|(pi, g)| pi.max(PROB_FLOOR).ln() + g).collect();
    let hard = argmax(&perturbed);
    let scaled: Vec<f64> = perturbed.iter().map(|x| x / temperature).collect();
    Ok((hard, softmax(&scaled)))
}

/// Draw a route index from `p` with the Gumbel-max trick.
pub fn sample_route(p: &[f64], temperature: f64, rng: &mut RngState) -> Result<(usize, Vec<f64>)> {
    let noise: Vec<f64> = (0..p.len()).map(|_| gumbel_noise(rng)).collect();
    gumbel_select(p, &noise, temperature)
}

/// Tape version of [`gumbel_select`] for a `[B, n]` probability matrix.
pub fn relaxed_selection(tape: &mut Tape<'_>, probs: Var, noise: &Tensor, temperature: f64) -> Result<(Vec<usize>, Var)> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let logp = tape.log_clamp(probs, PROB_FLOOR);
    let perturbed = tape.add_const(logp, noise)?;
    let pv = tape.value(perturbed);
    let hard: Vec<usize> = (0..pv.rows()).map(|r| argmax(pv.row(r))).collect();
    let scaled = tape.scale(perturbed, 1.0 / temperature);
    let alpha = tape.softmax(scaled)?;
    Ok((hard, alpha))
}

/// How the relaxed weight of the sampled route reaches the task loss.
/// Both gates are exactly one in value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// `α_R / stopgrad(α_R)`: local gradient `1 / α_R`.
    #[default]
    Ratio,
    /// `1 + α_R - stopgrad(α_R)`: local gradient 1.
    StraightThrough,
}

/// Per-sequence gate factor for the sampled routes `hard`.
pub fn gate_factors(tape: &mut Tape<'_>, alpha: Var, hard: &[usize], kind: GateKind) -> Result<Var> {
    let picked = tape.pick(alpha, hard)?;
    let local: Vec<f64> = match kind {
        GateKind::Ratio => tape
            .value(picked)
            .data()
            .iter()
            .map(|a| 1.0 / a.max(PROB_FLOOR))
            .collect(),
        GateKind::StraightThrough => vec![1.0; hard.len()],
    };
    let ones = Tensor::vector(vec![1.0; hard.len()])?;
    tape.surrogate(picked, ones, &Tensor::vector(local)?)
}

/// Multiply each sequence's rows of `output` by its gate factor. `members[i]`
/// names the batch row (index into `factors`) owning row block `i`.
pub fn straight_through_gate(tape: &mut Tape<'_>, output: Var, factors: Var, members: &[usize]) -> Result<Var> {
    let rows = tape.value(output).rows();
    if members.is_empty() || rows % members.len() != 0 {
        return Err(Error::Dimension {
            op: "straight_through_gate",
            lhs: tape.shape(output).to_vec(),
            rhs: vec![members.len()],
        });
    }
    tape.scale_row_blocks(output, factors, rows / members.len(), members)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_reference_points() {
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-15);
        let a = (-std::f64::consts::E).exp();
        assert!((gumbel_from_uniform(a) + 1.0).abs() < 1e-12);
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = RngState::new(2024);
        let n = 1_000_000;
        let mean = (0..n).map(|_| gumbel_noise(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn equal_noise_picks_most_probable() {
        let p = [0.1, 0.5, 0.15, 0.25];
        let (hard, _) = gumbel_select(&p, &[0.3; 4], 1.0).unwrap();
        assert_eq!(hard, 1);
    }

    #[test]
    fn uniform_p_equal_noise_gives_uniform_alpha() {
        let (_, alpha) = gumbel_select(&[0.25; 4], &[0.7; 4], 1.0).unwrap();
        for a in alpha {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let (hard, alpha) = gumbel_select(&[0.0, 1.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(hard, 1);
        assert!(alpha.iter().all(|a| a.is_finite()));
    }

    #[test]
    fn lower_temperature_sharpens() {
        let mut rng = RngState::new(5);
        let raw: Vec<f64> = (0..6).map(|_| rng.uniform() + 0.1).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let noise: Vec<f64> = (0..6).map(|_| gumbel_noise(&mut rng)).collect();
        let entropy = |a: &[f64]| -a.iter().map(|x| x * x.ln()).sum::<f64>();
        let mut last = 0.0;
        for tau in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let (_, alpha) = gumbel_select(&p, &noise, tau).unwrap();
            let h = entropy(&alpha);
            assert!(h > last, "entropy not increasing at τ={tau}");
            last = h;
        }
    }

    #[test]
    fn bad_temperature_is_rejected() {
        assert!(gumbel_select(&[0.5, 0.5], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn gate_is_exactly_neutral_in_value() {
        let mut rng = RngState::new(8);
        let mut tape = Tape::new();
        let z: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let zv = tape.leaf(Tensor::new(vec![2, 4], z).unwrap(), true);
        let p = tape.softmax(zv).unwrap();
        let noise = gumbel_matrix(2, 4, &mut rng).unwrap();
        let (hard, alpha) = relaxed_selection(&mut tape, p, &noise, 1.0).unwrap();
        let out: Vec<f64> = (0..2 * 3 * 5).map(|_| rng.normal()).collect();
        let ov = tape.leaf(Tensor::new(vec![6, 5], out).unwrap(), true);
        let f = gate_factors(&mut tape, alpha, &hard, GateKind::Ratio).unwrap();
        let gated = straight_through_gate(&mut tape, ov, f, &[0, 1]).unwrap();
        assert_eq!(tape.value(gated), tape.value(ov));
    }

    #[test]
    fn router_gradient_scales_with_inverse_temperature() {
        // Uniform probabilities with equal noise keep α uniform at every
        // temperature, so the gradient is exactly proportional to 1/τ.
        let grad_at = |tau: f64| {
            let mut tape = Tape::new();
            let zv = tape.leaf(Tensor::zeros(&[1, 4]), true);
            let p = tape.softmax(zv).unwrap();
            let noise = Tensor::zeros(&[1, 4]);
            let (hard, alpha) = relaxed_selection(&mut tape, p, &noise, tau).unwrap();
            let f = gate_factors(&mut tape, alpha, &hard, GateKind::Ratio).unwrap();
            let out = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, 0.2]).unwrap());
            let gated = straight_through_gate(&mut tape, out, f, &[0]).unwrap();
            let s = tape.sum(gated);
            let l = tape.mul(s, s).unwrap();
            tape.backward(l).unwrap();
            tape.grad(zv).unwrap().into_data()
        };
        let g1 = grad_at(1.0);
        let g100 = grad_at(100.0);
        // d/dz_k = 2s·s·(δ_kR − 1/4)/τ with s = 2.8 and R = 0.
        let c = 2.0 * 2.8 * 2.8;
        for (k, (a, b)) in g1.iter().zip(&g100).enumerate() {
            let want = c * (if k == 0 { 0.75 } else { -0.25 });
            assert!((a - want).abs() < 1e-9, "{a} vs {want}");
            assert!((b * 100.0 - want).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_router_is_uniform() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(3);
        let router = Router::new(&mut store, &mut rng, 20, 6, 36).unwrap();
        let mut tape = Tape::no_grad(&store);
        let seqs: Vec<&[usize]> = vec![&[0, 0, 1, 2, 3, 4], &[5, 6, 7, 8, 9, 10]];
        let (_, p) = router.route_probabilities(&mut tape, &seqs).unwrap();
        for x in tape.value(p).data() {
            assert!((x - 1.0 / 36.0).abs() < 1e-15);
        }
        let empty: Vec<&[usize]> = vec![&[0, 0, 0, 0, 0, 0]];
        assert!(matches!(
            router.route_probabilities(&mut tape, &empty),
            Err(Error::Data(_))
        ));
    }
}
