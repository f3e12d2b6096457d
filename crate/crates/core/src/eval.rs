//! Full-item-set ranking metrics, analytic FLOPs and routing statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{Dimension, Exit, Route, RoutingSpace, Supernet};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape};
use crate::router::{Router, ROUTER_WIDTH};

/// Cutoffs reported in [`MetricsReport`].
pub const CUTOFFS: [usize; 2] = [10, 20];

/// `1 / log2(rank + 1)` inside the cutoff, else 0.
pub fn ndcg_at_n(rank: Option<usize>, n: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= n => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

pub fn recall_at_n(rank: Option<usize>, n: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= n => 1.0,
        _ => 0.0,
    }
}

/// 1-based rank of `scores[target]` where ties count against the target:
/// `1 + #{j != target : scores[j] >= scores[target]}`.
fn pessimistic_rank(scores: &[f64], target: usize) -> Result<usize> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score while ranking".into()));
    }
    let t = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && s >= t)
        .count();
    Ok(1 + ahead)
}

/// Rank of `target` among items `1..logits.len()`; index 0 is padding and
/// never competes. Ties are broken against the target.
pub fn rank_target(logits: &[f64], target: usize) -> Result<usize> {
    if target == 0 {
        return Err(Error::Data("target 0 is the padding id".into()));
    }
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            len: logits.len(),
        });
    }
    pessimistic_rank(&logits[1..], target - 1)
}

/// Closed-form inference FLOPs of one route at padded length `seq_len`.
///
/// One multiply-accumulate counts as 2; embeddings, biases, softmax and
/// activations are free; the classifier runs at the final position only.
/// `heads` does not change the count since the per-head work sums to the
/// full width.
pub fn flops_of_route(route: &Route, seq_len: usize, num_items: usize, heads: usize) -> u64 {
    let _ = heads;
    let (t, e, h, d, n) = (
        seq_len as u64,
        route.emb as u64,
        route.hidden as u64,
        route.depth as u64,
        num_items as u64,
    );
    let transform = 2 * t * e * h;
    transform + d * block_flops(t, h) + 2 * h * n
}

fn block_flops(t: u64, h: u64) -> u64 {
    let projections = 4 * (2 * t * h * h);
    let attention = 2 * (2 * t * t * h);
    let norms = 2 * (5 * t * h);
    let ffn = 2 * (2 * t * h * h);
    projections + attention + norms + ffn
}

/// Cost of one block at hidden width `hidden`; the depth slope of
/// [`flops_of_route`].
pub fn block_cost(seq_len: usize, hidden: usize) -> u64 {
    block_flops(seq_len as u64, hidden as u64)
}

/// Closed-form FLOPs of one router evaluation under the same convention.
pub fn router_flops(seq_len: usize, num_routes: usize) -> u64 {
    block_flops(seq_len as u64, ROUTER_WIDTH as u64) + 2 * (ROUTER_WIDTH * num_routes) as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub users: usize,
    pub ndcg_10: f64,
    pub ndcg_20: f64,
    pub recall_10: f64,
    pub recall_20: f64,
}

impl GroupMetrics {
    pub fn from_ranks<'a>(ranks: impl IntoIterator<Item = &'a usize>) -> Self {
        let mut m = Self::default();
        for &r in ranks {
            m.users += 1;
            m.ndcg_10 += ndcg_at_n(Some(r), CUTOFFS[0]);
            m.ndcg_20 += ndcg_at_n(Some(r), CUTOFFS[1]);
            m.recall_10 += recall_at_n(Some(r), CUTOFFS[0]);
            m.recall_20 += recall_at_n(Some(r), CUTOFFS[1]);
        }
        if m.users > 0 {
            let z = m.users as f64;
            m.ndcg_10 /= z;
            m.ndcg_20 /= z;
            m.recall_10 /= z;
            m.recall_20 /= z;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: GroupMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<GroupMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail: Option<GroupMetrics>,
}

impl MetricsReport {
    /// Aggregate per-user ranks; `tail` adds the head/tail user breakdown.
    pub fn from_ranks(ranks: &[usize], tail: Option<&[bool]>) -> Result<Self> {
        let overall = GroupMetrics::from_ranks(ranks);
        let (head, tail) = match tail {
            None => (None, None),
            Some(flags) => {
                if flags.len() != ranks.len() {
                    return Err(Error::Dimension {
                        op: "metrics_report",
                        lhs: vec![ranks.len()],
                        rhs: vec![flags.len()],
                    });
                }
                let pick = |want: bool| {
                    GroupMetrics::from_ranks(ranks.iter().zip(flags).filter(|(_, &f)| f == want).map(|(r, _)| r))
                };
                (Some(pick(false)), Some(pick(true)))
            }
        };
        Ok(Self { overall, head, tail })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteFlops {
    pub index: usize,
    pub emb: usize,
    pub hidden: usize,
    pub depth: usize,
    pub flops: u64,
    pub usage: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub seq_len: usize,
    pub num_items: usize,
    pub routes: Vec<RouteFlops>,
    /// Backbone FLOPs averaged over evaluated inputs.
    pub average: f64,
    /// FLOPs of the largest route.
    pub static_flops: u64,
    pub savings: f64,
    /// Per-input router cost, reported separately from `average`.
    pub router_flops: u64,
}

impl FlopsReport {
    pub fn from_routes(
        space: &RoutingSpace,
        used: &[Route],
        seq_len: usize,
        num_items: usize,
        heads: usize,
        with_router: bool,
    ) -> Result<Self> {
        if used.is_empty() {
            return Err(Error::Data("no routed inputs to average over".into()));
        }
        let mut usage = vec![0u64; space.len()];
        for r in used {
            if !space.contains(r) {
                return Err(Error::Config(format!("route {r:?} is not in the routing space")));
            }
            usage[r.index] += 1;
        }
        let routes: Vec<RouteFlops> = space
            .routes()
            .map(|r| RouteFlops {
                index: r.index,
                emb: r.emb,
                hidden: r.hidden,
                depth: r.depth,
                flops: flops_of_route(&r, seq_len, num_items, heads),
                usage: usage[r.index],
            })
            .collect();
        let total: f64 = routes.iter().map(|r| r.usage as f64 * r.flops as f64).sum();
        let average = total / used.len() as f64;
        let static_flops = flops_of_route(&space.largest(), seq_len, num_items, heads);
        Ok(Self {
            seq_len,
            num_items,
            routes,
            average,
            static_flops,
            savings: 1.0 - average / static_flops as f64,
            router_flops: if with_router { router_flops(seq_len, space.len()) } else { 0 },
        })
    }
}

/// How inputs are assigned to routes at inference.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    Learned(&'a Router),
    Static(Route),
}

/// Route every input, `batch` sequences at a time.
pub fn assign_routes(
    store: &ParamStore,
    routing: Routing<'_>,
    space: &RoutingSpace,
    inputs: &[&[usize]],
    batch: usize,
) -> Result<Vec<Route>> {
    match routing {
        Routing::Static(r) => Ok(vec![r; inputs.len()]),
        Routing::Learned(router) => {
            let mut out = Vec::with_capacity(inputs.len());
            for chunk in inputs.chunks(batch.max(1)) {
                out.extend(router.argmax_routes(store, chunk, space)?);
            }
            Ok(out)
        }
    }
}

/// Pessimistic full-item-set rank of each target under its assigned route.
/// Inputs sharing a route are scored together in chunks of `batch`.
pub fn rank_cases(
    store: &ParamStore,
    net: &Supernet,
    inputs: &[&[usize]],
    targets: &[usize],
    routes: &[Route],
    batch: usize,
) -> Result<Vec<usize>> {
    if inputs.len() != targets.len() || inputs.len() != routes.len() {
        return Err(Error::Dimension {
            op: "rank_cases",
            lhs: vec![inputs.len(), targets.len()],
            rhs: vec![routes.len()],
        });
    }
    let mut ranks = vec![0usize; inputs.len()];
    let mut by_route: Vec<Vec<usize>> = vec![Vec::new(); net.space.len()];
    for (i, r) in routes.iter().enumerate() {
        by_route
            .get_mut(r.index)
            .ok_or(Error::Index {
                index: r.index,
                len: net.space.len(),
            })?
            .push(i);
    }
    for (route_index, members) in by_route.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let route = net.space.route(route_index)?;
        for chunk in members.chunks(batch.max(1)) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| inputs[i]).collect();
            let mut tape = Tape::no_grad(store);
            let logits = net.forward(&mut tape, &seqs, &route, Exit::FinalItems, None)?;
            let v = tape.value(logits);
            for (row, &i) in chunk.iter().enumerate() {
                let t = targets[i];
                if t == 0 || t > net.num_items() {
                    return Err(Error::Data(format!("target {t} outside 1..={}", net.num_items())));
                }
                ranks[i] = pessimistic_rank(v.row(row), t - 1)?;
            }
        }
    }
    Ok(ranks)
}

/// Shannon entropy (nats) of the empirical route usage.
pub fn usage_entropy(routes: &[Route], num_routes: usize) -> f64 {
    let mut counts = vec![0usize; num_routes];
    for r in routes {
        counts[r.index] += 1;
    }
    entropy_of_counts(&counts)
}

pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let z = total as f64;
    let h = -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / z;
            p * p.ln()
        })
        .sum::<f64>();
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub dimension: String,
    pub candidate: usize,
    pub fraction: f64,
    pub group: String,
}

/// Per-dimension usage fractions over all inputs and, when `tail` is given,
/// over tail users only.
pub fn routing_histogram(routes: &[Route], space: &RoutingSpace, tail: Option<&[bool]>) -> Result<Vec<HistogramRow>> {
    let mut groups: Vec<(&str, Vec<&Route>)> = vec![("all", routes.iter().collect())];
    if let Some(flags) = tail {
        if flags.len() != routes.len() {
            return Err(Error::Dimension {
                op: "routing_histogram",
                lhs: vec![routes.len()],
                rhs: vec![flags.len()],
            });
        }
        groups.push(("tail", routes.iter().zip(flags).filter(|(_, &f)| f).map(|(r, _)| r).collect()));
    }
    let mut rows = Vec::new();
    for (group, members) in groups {
        if members.is_empty() {
            continue;
        }
        for dim in Dimension::ALL {
            let cands = space.candidates(dim);
            let mut counts = vec![0usize; cands.len()];
            for r in &members {
                counts[space.coordinate(r.index, dim)] += 1;
            }
            for (c, n) in cands.iter().zip(counts) {
                rows.push(HistogramRow {
                    dimension: dim.name().to_string(),
                    candidate: *c,
                    fraction: n as f64 / members.len() as f64,
                    group: group.to_string(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn histogram_csv(rows: &[HistogramRow]) -> String {
    let mut out = String::from("dimension,candidate,fraction,group\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.dimension, r.candidate, r.fraction, r.group);
    }
    out
}

/// Mean selected candidate value along `dim`, e.g. the average depth.
pub fn mean_candidate(routes: &[Route], dim: Dimension) -> f64 {
    if routes.is_empty() {
        return 0.0;
    }
    let v: usize = routes
        .iter()
        .map(|r| match dim {
            Dimension::Emb => r.emb,
            Dimension::Hidden => r.hidden,
            Dimension::Depth => r.depth,
        })
        .sum();
    v as f64 / routes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SupernetConfig;
    use crate::numerics::RngState;

    #[test]
    fn ndcg_and_recall_cases() {
        assert_eq!(ndcg_at_n(Some(1), 10), 1.0);
        assert!((ndcg_at_n(Some(3), 10) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_n(Some(11), 10), 0.0);
        assert_eq!(ndcg_at_n(None, 10), 0.0);
        assert_eq!(recall_at_n(Some(10), 10), 1.0);
        assert_eq!(recall_at_n(Some(11), 10), 0.0);
    }

    #[test]
    fn rank_cases_by_hand() {
        assert_eq!(rank_target(&[9.0, 0.1, 3.0, 0.2], 2).unwrap(), 1);
        assert_eq!(rank_target(&[0.0; 6], 3).unwrap(), 5);
        assert!(matches!(rank_target(&[0.0; 3], 0), Err(Error::Data(_))));
        assert!(rank_target(&[0.0; 3], 3).is_err());
        // Padding logit never competes.
        assert_eq!(rank_target(&[100.0, 1.0, 0.0], 1).unwrap(), 1);
    }

    #[test]
    fn closed_form_small_route() {
        let space = RoutingSpace::desk_scale();
        let r = space.route_of(16, 16, 2).unwrap();
        let t = 20u64;
        let block = 8 * t * 256 + 4 * t * t * 16 + 10 * t * 16 + 4 * t * 256;
        assert_eq!(flops_of_route(&r, 20, 1000, 4), 2 * t * 256 + 2 * block + 2 * 16 * 1000);
    }

    #[test]
    fn monotone_and_linear_over_space() {
        let space = RoutingSpace::desk_scale();
        for r in space.routes() {
            let f = flops_of_route(&r, 20, 1000, 4);
            for dim in Dimension::ALL {
                let c = space.coordinate(r.index, dim);
                if c + 1 < space.candidates(dim).len() {
                    let bigger = match dim {
                        Dimension::Emb => space.route_of(space.emb[c + 1], r.hidden, r.depth),
                        Dimension::Hidden => space.route_of(r.emb, space.hidden[c + 1], r.depth),
                        Dimension::Depth => space.route_of(r.emb, r.hidden, space.depth[c + 1]),
                    }
                    .unwrap();
                    assert!(flops_of_route(&bigger, 20, 1000, 4) > f);
                }
            }
        }
    }

    #[test]
    fn runtime_counter_matches_closed_form() {
        let space = RoutingSpace::desk_scale();
        let cfg = SupernetConfig {
            num_items: 50,
            max_len: 6,
            heads: 4,
            dropout: 0.0,
        };
        let mut store = ParamStore::new();
        let mut rng = RngState::new(3);
        let net = Supernet::new(&mut store, &mut rng, space.clone(), cfg).unwrap();
        let seq = [0, 3, 4, 9, 1, 2];
        for r in [space.smallest(), space.largest(), space.route(13).unwrap()] {
            let mut tape = Tape::no_grad(&store);
            net.forward(&mut tape, &[&seq], &r, Exit::FinalItems, None).unwrap();
            assert_eq!(tape.flops(), flops_of_route(&r, 6, 50, 4));
        }
    }

    #[test]
    fn router_counter_matches_closed_form() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(3);
        let router = Router::new(&mut store, &mut rng, 50, 6, 36).unwrap();
        let mut tape = Tape::no_grad(&store);
        router.logits(&mut tape, &[&[0, 3, 4, 9, 1, 2]]).unwrap();
        assert_eq!(tape.flops(), router_flops(6, 36));
    }

    #[test]
    fn flops_report_average_and_savings() {
        let space = RoutingSpace::desk_scale();
        let small = space.smallest();
        let large = space.largest();
        let rep = FlopsReport::from_routes(&space, &[small, large, large], 20, 1000, 4, false).unwrap();
        let fs = flops_of_route(&small, 20, 1000, 4) as f64;
        let fl = flops_of_route(&large, 20, 1000, 4) as f64;
        assert!((rep.average - (fs + 2.0 * fl) / 3.0).abs() < 1e-6);
        assert!((rep.savings - (1.0 - rep.average / fl)).abs() < 1e-15);
        assert!(rep.average >= fs && rep.average <= fl);
        assert_eq!(rep.routes.iter().map(|r| r.usage).sum::<u64>(), 3);
    }

    #[test]
    fn histogram_fractions_sum_to_one() {
        let space = RoutingSpace::desk_scale();
        let routes: Vec<Route> = (0..10).map(|i| space.route(i * 3).unwrap()).collect();
        let tail: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let rows = routing_histogram(&routes, &space, Some(&tail)).unwrap();
        for group in ["all", "tail"] {
            for dim in Dimension::ALL {
                let s: f64 = rows
                    .iter()
                    .filter(|r| r.group == group && r.dimension == dim.name())
                    .map(|r| r.fraction)
                    .sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let csv = histogram_csv(&rows);
        assert!(csv.starts_with("dimension,candidate,fraction,group\n"));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn report_groups() {
        let rep = MetricsReport::from_ranks(&[1, 3, 30], Some(&[false, true, true])).unwrap();
        assert_eq!(rep.head.unwrap().users, 1);
        assert_eq!(rep.head.unwrap().ndcg_10, 1.0);
        let tail = rep.tail.unwrap();
        assert!((tail.ndcg_10 - 0.25).abs() < 1e-15);
        assert!((tail.recall_20 - 0.5).abs() < 1e-15);
        assert!(MetricsReport::from_ranks(&[1], None).unwrap().tail.is_none());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy_of_counts(&[5, 0, 0]), 0.0);
        assert!((entropy_of_counts(&[1, 1, 1, 1]) - 4f64.ln()).abs() < 1e-15);
    }
}
