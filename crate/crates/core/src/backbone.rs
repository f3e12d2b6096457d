//! The weight-sliced supernet and its routing space.

use serde::{Deserialize, Serialize};

use crate::dynlayers::{self, Dropout, LayerParams, SeqLayout, SliceableParam, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, RngState, Tape, Tensor, Var};

/// Candidate sizes along each routed dimension, all ascending.
///
/// Routes are enumerated embedding-major, then hidden, then depth:
/// `index = e·(b·c) + h·c + d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingSpace {
    pub emb: Vec<usize>,
    pub hidden: Vec<usize>,
    pub depth: Vec<usize>,
}

/// One of the three routed dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Emb,
    Hidden,
    Depth,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Emb, Dimension::Hidden, Dimension::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Emb => "emb",
            Dimension::Hidden => "hidden",
            Dimension::Depth => "depth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Route {
    pub emb: usize,
    pub hidden: usize,
    pub depth: usize,
    pub index: usize,
}

impl RoutingSpace {
    pub fn new(emb: Vec<usize>, hidden: Vec<usize>, depth: Vec<usize>) -> Result<Self> {
        for (name, c) in [("emb", &emb), ("hidden", &hidden), ("depth", &depth)] {
            if c.is_empty() || c.contains(&0) || c.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "{name} candidates must be positive and strictly ascending, got {c:?}"
                )));
            }
        }
        Ok(Self { emb, hidden, depth })
    }

    /// Embedding {64, 96, 128} × hidden {64, 96, 128} × depth {2, 4, 6, 8}.
    pub fn full_scale() -> Self {
        Self {
            emb: vec![64, 96, 128],
            hidden: vec![64, 96, 128],
            depth: vec![2, 4, 6, 8],
        }
    }

    /// The full-scale space with widths divided by four.
    pub fn desk_scale() -> Self {
        Self {
            emb: vec![16, 24, 32],
            hidden: vec![16, 24, 32],
            depth: vec![2, 4, 6, 8],
        }
    }

    pub fn len(&self) -> usize {
        self.emb.len() * self.hidden.len() * self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn candidates(&self, dim: Dimension) -> &[usize] {
        match dim {
            Dimension::Emb => &self.emb,
            Dimension::Hidden => &self.hidden,
            Dimension::Depth => &self.depth,
        }
    }

    /// Position of `index` along `dim`.
    pub fn coordinate(&self, index: usize, dim: Dimension) -> usize {
        let (b, c) = (self.hidden.len(), self.depth.len());
        match dim {
            Dimension::Emb => index / (b * c),
            Dimension::Hidden => (index / c) % b,
            Dimension::Depth => index % c,
        }
    }

    pub fn route(&self, index: usize) -> Result<Route> {
        if index >= self.len() {
            return Err(Error::Index {
                index,
                len: self.len(),
            });
        }
        Ok(Route {
            emb: self.emb[self.coordinate(index, Dimension::Emb)],
            hidden: self.hidden[self.coordinate(index, Dimension::Hidden)],
            depth: self.depth[self.coordinate(index, Dimension::Depth)],
            index,
        })
    }

    pub fn index_of(&self, emb: usize, hidden: usize, depth: usize) -> Result<usize> {
        let pos = |c: &[usize], v: usize, what: &str| {
            c.iter()
                .position(|&x| x == v)
                .ok_or_else(|| Error::Config(format!("{what} {v} is not a candidate ({c:?})")))
        };
        let e = pos(&self.emb, emb, "embedding size")?;
        let h = pos(&self.hidden, hidden, "hidden size")?;
        let d = pos(&self.depth, depth, "depth")?;
        Ok(e * self.hidden.len() * self.depth.len() + h * self.depth.len() + d)
    }

    pub fn route_of(&self, emb: usize, hidden: usize, depth: usize) -> Result<Route> {
        self.route(self.index_of(emb, hidden, depth)?)
    }

    pub fn routes(&self) -> impl Iterator<Item = Route> + '_ {
        (0..self.len()).map(|i| self.route(i).expect("in range"))
    }

    pub fn contains(&self, r: &Route) -> bool {
        self.route(r.index).map_or(false, |x| x == *r)
    }

    pub fn smallest(&self) -> Route {
        self.route(0).expect("non-empty space")
    }

    pub fn largest(&self) -> Route {
        self.route(self.len() - 1).expect("non-empty space")
    }

    /// Indicator matrix `[n, m]` with a one where route `i` uses candidate
    /// `j` of `dim`; `p · M` is the marginal of `p` over `dim`.
    pub fn marginal_matrix(&self, dim: Dimension) -> Tensor {
        let m = self.candidates(dim).len();
        let mut t = Tensor::zeros(&[self.len(), m]);
        for i in 0..self.len() {
            let j = self.coordinate(i, dim);
            t.data_mut()[i * m + j] = 1.0;
        }
        t
    }
}

/// Sum route probabilities that share a candidate along `dim`.
pub fn marginalize(p_routes: &[f64], dim: Dimension, space: &RoutingSpace) -> Result<Vec<f64>> {
    if p_routes.len() != space.len() {
        return Err(Error::Dimension {
            op: "marginalize",
            lhs: vec![p_routes.len()],
            rhs: vec![space.len()],
        });
    }
    let total: f64 = p_routes.iter().sum();
    if (total - 1.0).abs() > 1e-9 || p_routes.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Numeric(format!("route probabilities sum to {total}")));
    }
    let mut out = vec![0.0; space.candidates(dim).len()];
    for (i, p) in p_routes.iter().enumerate() {
        out[space.coordinate(i, dim)] += p;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub num_items: usize,
    pub max_len: usize,
    pub heads: usize,
    pub dropout: f64,
}

/// The single full-size model every route is sliced from.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub config: SupernetConfig,
    pub space: RoutingSpace,
    pub item_emb: ParamId,
    pub pos_emb: ParamId,
    pub input_transform: SliceableParam,
    pub layers: Vec<LayerParams>,
    pub classifier: SliceableParam,
}

/// Which rows the classifier is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    /// Logits over `|I| + 1` outputs at every position.
    AllPositions,
    /// Logits over `|I| + 1` outputs at the last position only.
    Final,
    /// Logits over the `|I|` real items (padding column dropped) at the last
    /// position; column `c` scores item `c + 1`.
    FinalItems,
}

impl Supernet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        space: RoutingSpace,
        config: SupernetConfig,
    ) -> Result<Self> {
        if config.num_items == 0 || config.max_len == 0 {
            return Err(Error::Config("item count and sequence length must be positive".into()));
        }
        if let Some(h) = space.hidden.iter().find(|&&h| config.heads == 0 || h % config.heads != 0) {
            return Err(Error::Config(format!(
                "hidden size {h} is not divisible by {} heads",
                config.heads
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let e_max = *space.emb.last().unwrap();
        let h_max = *space.hidden.last().unwrap();
        let d_max = *space.depth.last().unwrap();
        let rows = config.num_items + 1;
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect() };
        let item_emb = store.insert("backbone.item_emb", Tensor::new(vec![rows, e_max], normal(rows * e_max))?)?;
        let pos_emb = store.insert(
            "backbone.pos_emb",
            Tensor::new(vec![config.max_len, e_max], normal(config.max_len * e_max))?,
        )?;
        let input_transform = SliceableParam::linear(store, rng, "backbone.input", e_max, h_max)?;
        let layers = (0..d_max)
            .map(|l| LayerParams::new(store, rng, &format!("backbone.block{l}"), h_max))
            .collect::<Result<Vec<_>>>()?;
        let classifier = SliceableParam::linear(store, rng, "backbone.classifier", h_max, rows)?;
        Ok(Self {
            config,
            space,
            item_emb,
            pos_emb,
            input_transform,
            layers,
            classifier,
        })
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    /// Every parameter id owned by the supernet.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.item_emb, self.pos_emb];
        let mut push = |p: &SliceableParam| ids.extend([p.weight, p.bias]);
        push(&self.input_transform);
        for l in &self.layers {
            for p in [
                &l.query, &l.key, &l.value, &l.output, &l.ffn_in, &l.ffn_out, &l.attn_norm, &l.ffn_norm,
            ] {
                push(p);
            }
        }
        push(&self.classifier);
        for l in &self.layers {
            ids.extend([l.attn_scale, l.ffn_scale]);
        }
        ids
    }

    fn check_route(&self, route: &Route) -> Result<()> {
        if !self.space.contains(route) {
            return Err(Error::Config(format!("route {route:?} is not in the routing space")));
        }
        Ok(())
    }

    /// Embedding stage at width `emb`: item plus position embedding, zeroed
    /// at padding positions.
    pub fn embed(&self, tape: &mut Tape<'_>, seqs: &[&[usize]], emb: usize) -> Result<Var> {
        let layout = SeqLayout::from_ids(seqs)?;
        if layout.seq > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds maximum {}",
                layout.seq, self.config.max_len
            )));
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i > self.config.num_items) {
            return Err(Error::Data(format!(
                "item id {bad} outside 0..={}",
                self.config.num_items
            )));
        }
        let positions: Vec<usize> = (0..layout.batch).flat_map(|_| 0..layout.seq).collect();
        let table = tape.param(self.item_emb);
        let pos_table = tape.param(self.pos_emb);
        let items = tape.embed(table, &ids, emb)?;
        let pos = tape.embed(pos_table, &positions, emb)?;
        let sum = tape.add(items, pos)?;
        let mask: Vec<f64> = ids
            .iter()
            .flat_map(|&i| std::iter::repeat(if i == 0 { 0.0 } else { 1.0 }).take(emb))
            .collect();
        tape.mul_const(sum, &Tensor::new(vec![ids.len(), emb], mask)?)
    }

    /// Hidden states after the first `route.depth` blocks, `[B·T, hidden]`.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        seqs: &[&[usize]],
        route: &Route,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        self.check_route(route)?;
        let layout = SeqLayout::from_ids(seqs)?;
        let mut e = self.embed(tape, seqs, route.emb)?;
        if let Some(d) = dropout.as_deref_mut() {
            e = d.apply(tape, e)?;
        }
        let mut h = dynlayers::dynamic_linear(tape, e, &self.input_transform, route.emb, route.hidden)?;
        for layer in &self.layers[..route.depth] {
            h = dynlayers::block_forward(
                tape,
                h,
                layer,
                self.config.heads,
                route.hidden,
                &layout,
                dropout.as_deref_mut(),
            )?;
        }
        Ok(h)
    }

    /// Logits of the submodel selected by `route`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        seqs: &[&[usize]],
        route: &Route,
        exit: Exit,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let h = self.encode(tape, seqs, route, dropout)?;
        let layout = SeqLayout::from_ids(seqs)?;
        match exit {
            Exit::AllPositions => dynlayers::shared_classifier(tape, h, &self.classifier, route.hidden),
            Exit::Final => {
                let last = tape.rows(h, &layout.final_rows())?;
                dynlayers::shared_classifier(tape, last, &self.classifier, route.hidden)
            }
            Exit::FinalItems => {
                let last = tape.rows(h, &layout.final_rows())?;
                let w = tape.param(self.classifier.weight);
                let b = tape.param(self.classifier.bias);
                tape.linear_rows(last, w, Some(b), route.hidden, 1, self.config.num_items)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_indexing() {
        let s = RoutingSpace::full_scale();
        assert_eq!(s.len(), 36);
        let r = s.route(0).unwrap();
        assert_eq!((r.emb, r.hidden, r.depth), (64, 64, 2));
        let r = s.route(35).unwrap();
        assert_eq!((r.emb, r.hidden, r.depth), (128, 128, 8));
        let r = s.route(7).unwrap();
        assert_eq!((r.emb, r.hidden, r.depth), (64, 96, 8));
        assert!(matches!(s.route(36), Err(Error::Index { index: 36, len: 36 })));
        for i in 0..36 {
            let r = s.route(i).unwrap();
            assert_eq!(s.index_of(r.emb, r.hidden, r.depth).unwrap(), i);
        }
    }

    #[test]
    fn rejects_unsorted_candidates() {
        assert!(RoutingSpace::new(vec![32, 16], vec![16], vec![2]).is_err());
        assert!(RoutingSpace::new(vec![], vec![16], vec![2]).is_err());
    }

    #[test]
    fn marginal_cases() {
        let s = RoutingSpace::full_scale();
        let uniform = vec![1.0 / 36.0; 36];
        for m in marginalize(&uniform, Dimension::Emb, &s).unwrap() {
            assert!((m - 1.0 / 3.0).abs() < 1e-12);
        }
        for m in marginalize(&uniform, Dimension::Depth, &s).unwrap() {
            assert!((m - 0.25).abs() < 1e-12);
        }
        let mut one_hot = vec![0.0; 36];
        one_hot[35] = 1.0;
        assert_eq!(marginalize(&one_hot, Dimension::Emb, &s).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(
            marginalize(&vec![0.5; 36], Dimension::Emb, &s),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn marginal_matches_enumeration() {
        let s = RoutingSpace::full_scale();
        let mut rng = RngState::new(4);
        let raw: Vec<f64> = (0..36).map(|_| rng.uniform()).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
        for dim in Dimension::ALL {
            let got = marginalize(&p, dim, &s).unwrap();
            for (j, &cand) in s.candidates(dim).iter().enumerate() {
                let mut want = 0.0;
                for i in 0..36 {
                    let r = s.route(i).unwrap();
                    let v = match dim {
                        Dimension::Emb => r.emb,
                        Dimension::Hidden => r.hidden,
                        Dimension::Depth => r.depth,
                    };
                    if v == cand {
                        want += p[i];
                    }
                }
                assert!((got[j] - want).abs() < 1e-12);
            }
        }
    }

    fn tiny() -> (ParamStore, Supernet) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(1);
        let space = RoutingSpace::new(vec![4, 8], vec![4, 8], vec![1, 2]).unwrap();
        let net = Supernet::new(
            &mut store,
            &mut rng,
            space,
            SupernetConfig {
                num_items: 10,
                max_len: 5,
                heads: 2,
                dropout: 0.0,
            },
        )
        .unwrap();
        (store, net)
    }

    #[test]
    fn output_shapes_for_every_route() {
        let (store, net) = tiny();
        let seqs: Vec<&[usize]> = vec![&[0, 0, 3, 4, 5], &[1, 2, 3, 4, 5]];
        for r in net.space.routes() {
            let mut tape = Tape::no_grad(&store);
            let y = net.forward(&mut tape, &seqs, &r, Exit::AllPositions, None).unwrap();
            assert_eq!(tape.shape(y), &[10, 11]);
            let y = net.forward(&mut tape, &seqs, &r, Exit::FinalItems, None).unwrap();
            assert_eq!(tape.shape(y), &[2, 10]);
        }
    }

    #[test]
    fn unknown_item_is_a_data_error() {
        let (store, net) = tiny();
        let mut tape = Tape::no_grad(&store);
        let seqs: Vec<&[usize]> = vec![&[0, 0, 3, 4, 11]];
        let r = net.space.largest();
        assert!(matches!(
            net.forward(&mut tape, &seqs, &r, Exit::Final, None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn foreign_route_is_a_config_error() {
        let (store, net) = tiny();
        let mut tape = Tape::no_grad(&store);
        let seqs: Vec<&[usize]> = vec![&[0, 0, 3, 4, 5]];
        let r = Route {
            emb: 6,
            hidden: 4,
            depth: 1,
            index: 0,
        };
        assert!(matches!(
            net.forward(&mut tape, &seqs, &r, Exit::Final, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn supernet_stores_each_parameter_once() {
        let (store, net) = tiny();
        let mut ids = net.param_ids();
        assert_eq!(ids.len(), store.len());
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), store.len());
    }
}
