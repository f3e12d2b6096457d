use proptest::prelude::*;

use canet_core::backbone::{marginalize, Dimension};
use canet_core::data::{self, filter_items, leave_one_out_split, pad_left, InteractionSequence};
use canet_core::eval::{entropy_of_counts, rank_target};
use canet_core::losses::{self, guide_targets};
use canet_core::numerics::softmax;
use canet_core::router::{argmax, gumbel_select};
use canet_core::trainer::Checkpoint;
use canet_core::{Dataset, RoutingSpace, Tensor};

fn normalized(raw: Vec<f64>) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

fn seq_strategy(max_item: usize) -> impl Strategy<Value = Vec<InteractionSequence>> {
    prop::collection::vec(prop::collection::vec(1..=max_item, 1..12), 1..40).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(u, items)| InteractionSequence {
                user_id: u as u64,
                items,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_ignores_order_of_competitors(
        scores in prop::collection::vec(-5i32..5, 3..60),
        pick in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let target = 1 + pick.index(scores.len() - 1);
        let r = rank_target(&scores, target).unwrap();
        prop_assert!(r >= 1 && r < scores.len());
        // Shuffle every real item except the target.
        let mut others: Vec<usize> = (1..scores.len()).filter(|&i| i != target).collect();
        let mut rng = canet_core::RngState::new(seed);
        rng.shuffle(&mut others);
        let mut permuted = scores.clone();
        for (slot, &src) in (1..scores.len()).filter(|&i| i != target).zip(&others) {
            permuted[slot] = scores[src];
        }
        prop_assert_eq!(rank_target(&permuted, target).unwrap(), r);
    }

    #[test]
    fn padding_score_never_counts(scores in prop::collection::vec(-3.0f64..3.0, 3..30), pad in -10.0f64..10.0) {
        let mut s = scores.clone();
        s[0] = pad;
        prop_assert_eq!(rank_target(&s, 1).unwrap(), rank_target(&scores, 1).unwrap());
    }

    #[test]
    fn pad_left_keeps_suffix(items in prop::collection::vec(1usize..50, 0..30), len in 1usize..25) {
        let p = pad_left(&items, len);
        prop_assert_eq!(p.len(), len);
        let keep = items.len().min(len);
        prop_assert_eq!(&p[len - keep..], &items[items.len() - keep..]);
        prop_assert!(p[..len - keep].iter().all(|&x| x == 0));
    }

    #[test]
    fn filtering_is_idempotent(seqs in seq_strategy(8)) {
        let (once, n, _) = filter_items(seqs);
        let (twice, n2, report) = filter_items(once.clone());
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(n, n2);
        prop_assert_eq!(report.dropped_items + report.dropped_interactions + report.dropped_sequences, 0);
        for s in &once {
            prop_assert!(s.items.len() >= data::MIN_SEQ_LEN);
            prop_assert!(s.items.iter().all(|&i| i >= 1 && i <= n));
        }
    }

    #[test]
    fn split_covers_every_long_sequence(seqs in seq_strategy(30), t in 2usize..15) {
        let ds = Dataset::new(seqs.clone(), 30, t).unwrap();
        let split = leave_one_out_split(&ds);
        let long = seqs.iter().filter(|s| s.items.len() >= data::MIN_SEQ_LEN).count();
        let trainable = seqs.iter().filter(|s| s.items.len() > data::MIN_SEQ_LEN).count();
        prop_assert_eq!(split.train.len(), trainable);
        prop_assert_eq!(split.valid.len(), long);
        prop_assert_eq!(split.test.len(), long);
        prop_assert_eq!(split.excluded, seqs.len() - long);
        for (va, te) in split.valid.iter().zip(&split.test) {
            prop_assert_eq!(va.user, te.user);
            let x = &seqs[te.user].items;
            let l = x.len();
            prop_assert_eq!(te.target, x[l - 1]);
            prop_assert_eq!(va.target, x[l - 2]);
            prop_assert_eq!(&te.input, &pad_left(&x[..l - 1], t));
            prop_assert_eq!(&va.input, &pad_left(&x[..l - 2], t));
        }
        for tr in &split.train {
            let x = &seqs[tr.user].items;
            let l = x.len();
            // Held-out items never appear as training targets.
            prop_assert_eq!(tr.last_target(), x[l - 3]);
            // Each target is the next input.
            for i in 0..t - 1 {
                if tr.targets[i] != 0 {
                    prop_assert_eq!(tr.targets[i], tr.input[i + 1]);
                }
            }
            prop_assert_eq!(tr.input.iter().filter(|&&i| i != 0).count(),
                            tr.targets.iter().filter(|&&i| i != 0).count());
        }
    }

    #[test]
    fn checkpoint_round_trip(
        data in prop::collection::vec(any::<f64>(), 1..40),
        cols in 1usize..5,
        state in any::<u64>(),
        epoch in any::<u32>(),
    ) {
        let rows = data.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let c = Checkpoint {
            config: serde_json::json!({"x": 1}),
            tensors: vec![("w".into(), t.clone()), ("s".into(), Tensor::scalar(data[0]))],
            rng_state: state,
            epoch,
        };
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back.tensor("w").unwrap()), bits(&t));
        prop_assert_eq!(back.rng_state, state);
        prop_assert_eq!(back.epoch, epoch);
    }

    #[test]
    fn gumbel_select_matches_perturbed_argmax(
        raw in prop::collection::vec(0.01f64..1.0, 2..10),
        noise_seed in any::<u64>(),
        tau in 0.1f64..5.0,
    ) {
        let p = normalized(raw);
        let mut rng = canet_core::RngState::new(noise_seed);
        let g: Vec<f64> = (0..p.len()).map(|_| canet_core::router::gumbel_noise(&mut rng)).collect();
        let (hard, alpha) = gumbel_select(&p, &g, tau).unwrap();
        let perturbed: Vec<f64> = p.iter().zip(&g).map(|(x, n)| x.ln() + n).collect();
        prop_assert_eq!(hard, argmax(&perturbed));
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(argmax(&alpha), hard);
    }

    #[test]
    fn uniform_loss_bounded_below(raw in prop::collection::vec(0.001f64..1.0, 2..40)) {
        let p = normalized(raw);
        let n = p.len() as f64;
        prop_assert!(losses::uniform_loss_value(&p, losses::LOG_EPS) >= n.ln() - 1e-12);
    }

    #[test]
    fn guide_loss_bounded_by_target_entropy(raw in prop::collection::vec(0.001f64..1.0, 36), easy in any::<bool>(), beta in 0.1f64..4.0) {
        let space = RoutingSpace::desk_scale();
        let p = normalized(raw);
        let h = |m: usize| {
            let y = guide_targets(easy, m, beta);
            -y.iter().map(|v| v * v.ln()).sum::<f64>()
        };
        let floor = h(3) + h(3) + h(4);
        let l = losses::guide_loss_value(&p, easy, &space, beta, losses::LOG_EPS).unwrap();
        prop_assert!(l >= floor - 1e-12);
    }

    #[test]
    fn marginals_are_distributions(raw in prop::collection::vec(0.0f64..1.0, 36)) {
        prop_assume!(raw.iter().sum::<f64>() > 0.0);
        let p = normalized(raw);
        let space = RoutingSpace::desk_scale();
        for dim in [Dimension::Emb, Dimension::Hidden, Dimension::Depth] {
            let m = marginalize(&p, dim, &space).unwrap();
            prop_assert_eq!(m.len(), space.candidates(dim).len());
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-20.0f64..20.0, 1..20), c in -50.0f64..50.0) {
        let a = softmax(&xs);
        let b = softmax(&xs.iter().map(|x| x + c).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_of_counts_in_range(counts in prop::collection::vec(0usize..50, 1..40)) {
        let h = entropy_of_counts(&counts);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (counts.len() as f64).ln() + 1e-12);
    }
}

#[test]
fn written_dataset_reads_back() {
    let ds = data::generate_synthetic(&data::SyntheticConfig {
        users: 300,
        items: 40,
        len: 8,
        seed: 9,
        ..data::SyntheticConfig::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    ds.write_to(&mut buf).unwrap();
    let (back, report) = data::read_sequences(buf.as_slice()).unwrap();
    assert_eq!(report.dropped_items, 0);
    assert_eq!(back.sequences, ds.sequences);
    assert_eq!(back.num_items, ds.num_items);
    assert_eq!(back.max_len, ds.max_len);
}
