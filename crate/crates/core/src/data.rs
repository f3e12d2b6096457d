//! Interaction sequences: synthetic generation, file I/O, filtering,
//! leave-one-out splits and head/tail partitioning.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Items seen by fewer distinct users are dropped at load time.
pub const MIN_ITEM_USERS: usize = 5;
/// Shortest sequence that still yields train, validation and test targets.
pub const MIN_SEQ_LEN: usize = 3;

/// Easy users follow the head-item chain with this probability per step.
const EASY_FOLLOW: f64 = 0.9;
/// Hard users follow the tail-item chain with this probability per step.
const HARD_FOLLOW: f64 = 0.5;
/// Share of hard-user steps that jump to a popular head item.
const HARD_HEAD_MIX: f64 = 0.15;

/// One user's chronologically ordered items (ids start at 1; 0 is padding
/// and never stored here).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: u64,
    pub items: Vec<usize>,
}

impl InteractionSequence {
    /// Last `len` items, left-padded with 0 up to `len`.
    pub fn padded(&self, len: usize) -> Vec<usize> {
        pad_left(&self.items, len)
    }
}

/// Keep the last `len` entries of `items`, left-padding with 0.
pub fn pad_left(items: &[usize], len: usize) -> Vec<usize> {
    let keep = &items[items.len().saturating_sub(len)..];
    let mut out = vec![0; len - keep.len()];
    out.extend_from_slice(keep);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub num_items: usize,
    /// Padded model input length `T`.
    pub max_len: usize,
    /// Generator's easy-user labels, aligned with `sequences`.
    pub easy: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub actions: usize,
    pub sequences: usize,
    pub items: usize,
    pub avg_length: f64,
    pub max_len: usize,
}

impl Dataset {
    pub fn new(sequences: Vec<InteractionSequence>, num_items: usize, max_len: usize) -> Result<Self> {
        let ds = Self {
            sequences,
            num_items,
            max_len,
            easy: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        for s in &self.sequences {
            if let Some(&bad) = s.items.iter().find(|&&i| i == 0 || i > self.num_items) {
                return Err(Error::Data(format!(
                    "user {} has item {bad} outside 1..={}",
                    s.user_id, self.num_items
                )));
            }
        }
        if let Some(e) = &self.easy {
            if e.len() != self.sequences.len() {
                return Err(Error::Data("easy labels do not match sequence count".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn stats(&self) -> DatasetStats {
        let actions: usize = self.sequences.iter().map(|s| s.items.len()).sum();
        let items: BTreeSet<usize> = self.sequences.iter().flat_map(|s| s.items.iter().copied()).collect();
        DatasetStats {
            actions,
            sequences: self.sequences.len(),
            items: items.len(),
            avg_length: if self.sequences.is_empty() {
                0.0
            } else {
                actions as f64 / self.sequences.len() as f64
            },
            max_len: self.max_len,
        }
    }

    /// Write in the `user_id<TAB>item,item,...` line format.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for s in &self.sequences {
            let items: Vec<String> = s.items.iter().map(|i| i.to_string()).collect();
            writeln!(w, "{}\t{}", s.user_id, items.join(","))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub len: usize,
    pub zipf_s: f64,
    pub easy_fraction: f64,
    pub head_share: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 5000,
            items: 1000,
            len: 20,
            zipf_s: 1.1,
            easy_fraction: 0.6,
            head_share: 0.2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 {
            return Err(Error::Config("user and item counts must be positive".into()));
        }
        if self.len < MIN_SEQ_LEN {
            return Err(Error::Config(format!(
                "sequence length {} is below the minimum of {MIN_SEQ_LEN}",
                self.len
            )));
        }
        if !(0.0..=1.0).contains(&self.easy_fraction) || !(0.0..=1.0).contains(&self.head_share) {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if !(self.zipf_s > 0.0) {
            return Err(Error::Config("zipf exponent must be positive".into()));
        }
        let head = self.head_count();
        if head == 0 || head >= self.items {
            return Err(Error::Config(format!(
                "{} items with head share {} leaves no head or no tail items",
                self.items, self.head_share
            )));
        }
        Ok(())
    }

    /// `ceil(head_share * items)`.
    pub fn head_count(&self) -> usize {
        head_count(self.items, self.head_share)
    }
}

fn head_count(items: usize, share: f64) -> usize {
    // Guard against 0.2 * 10 = 2.0000000000000004.
    let raw = share * items as f64;
    let r = raw.round();
    if (raw - r).abs() < 1e-9 {
        r as usize
    } else {
        raw.ceil() as usize
    }
}

fn zipf_cdf(ranks: std::ops::Range<usize>, s: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = ranks
        .map(|r| {
            acc += (r as f64).powf(-s);
            acc
        })
        .collect();
    for c in &mut cdf {
        *c /= acc;
    }
    cdf
}

/// Random single cycle over `items`.
fn cycle_successors(items: &[usize], rng: &mut RngState, succ: &mut [usize]) {
    let mut order = items.to_vec();
    rng.shuffle(&mut order);
    for (j, &i) in order.iter().enumerate() {
        succ[i] = order[(j + 1) % order.len()];
    }
}

/// Easy/hard mixture over a Zipf-popular catalogue.
///
/// Item ids `1..=H` (H = `ceil(head_share * items)`) form the head. Easy
/// users walk a fixed cycle over head items, restarting at a Zipf draw
/// with small probability. Hard users walk a cycle over tail items with a
/// much weaker follow rate, otherwise draw Zipf tail items or occasionally
/// a head item.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = RngState::new(cfg.seed);
    let h = cfg.head_count();
    let head: Vec<usize> = (1..=h).collect();
    let tail: Vec<usize> = (h + 1..=cfg.items).collect();
    let head_cdf = zipf_cdf(1..h + 1, cfg.zipf_s);
    let tail_cdf = zipf_cdf(h + 1..cfg.items + 1, cfg.zipf_s);
    let mut succ = vec![0usize; cfg.items + 1];
    cycle_successors(&head, &mut rng, &mut succ);
    cycle_successors(&tail, &mut rng, &mut succ);

    let n_easy = (cfg.easy_fraction * cfg.users as f64).round() as usize;
    let mut easy: Vec<bool> = (0..cfg.users).map(|u| u < n_easy).collect();
    rng.shuffle(&mut easy);

    let head_draw = |rng: &mut RngState| head[rng.sample_cdf(&head_cdf)];
    let tail_draw = |rng: &mut RngState| tail[rng.sample_cdf(&tail_cdf)];
    let mut sequences = Vec::with_capacity(cfg.users);
    for (u, &is_easy) in easy.iter().enumerate() {
        let mut items = Vec::with_capacity(cfg.len);
        let mut cur = if is_easy { head_draw(&mut rng) } else { tail_draw(&mut rng) };
        items.push(cur);
        while items.len() < cfg.len {
            let a = rng.uniform();
            cur = if is_easy {
                if a < EASY_FOLLOW {
                    succ[cur]
                } else {
                    head_draw(&mut rng)
                }
            } else if a < HARD_HEAD_MIX {
                head_draw(&mut rng)
            } else if a < HARD_HEAD_MIX + HARD_FOLLOW && cur > h {
                succ[cur]
            } else {
                tail_draw(&mut rng)
            };
            items.push(cur);
        }
        sequences.push(InteractionSequence {
            user_id: u as u64 + 1,
            items,
        });
    }
    Ok(Dataset {
        sequences,
        num_items: cfg.items,
        max_len: cfg.len,
        easy: Some(easy),
    })
}

/// Counts reported by [`load_sequences`] and [`filter_items`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub dropped_items: usize,
    pub dropped_interactions: usize,
    pub dropped_sequences: usize,
}

/// Parse the line format; ids are kept as written.
pub fn parse_sequences(r: impl BufRead) -> Result<Vec<InteractionSequence>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (user, items) = trimmed.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected `user_id<TAB>item,item,...`".into(),
        })?;
        let user_id = user.trim().parse::<u64>().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("user id {user:?}: {e}"),
        })?;
        let items = items
            .split(',')
            .map(|t| {
                let id = t.trim().parse::<usize>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("item id {t:?}: {e}"),
                })?;
                if id == 0 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "item id 0 is reserved for padding".into(),
                    });
                }
                Ok(id)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(InteractionSequence { user_id, items });
    }
    Ok(out)
}

/// Drop items seen by fewer than [`MIN_ITEM_USERS`] distinct users and
/// sequences left with fewer than [`MIN_SEQ_LEN`] items, repeating until
/// nothing changes; then re-index surviving items densely from 1 in
/// ascending original-id order.
pub fn filter_items(sequences: Vec<InteractionSequence>) -> (Vec<InteractionSequence>, usize, FilterReport) {
    let mut report = FilterReport::default();
    let mut seqs = sequences;
    let original: BTreeSet<usize> = seqs.iter().flat_map(|s| s.items.iter().copied()).collect();
    loop {
        let mut users: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
        for s in &seqs {
            for &i in &s.items {
                users.entry(i).or_default().insert(s.user_id);
            }
        }
        let cold: BTreeSet<usize> = users
            .iter()
            .filter(|(_, u)| u.len() < MIN_ITEM_USERS)
            .map(|(&i, _)| i)
            .collect();
        let before = seqs.len();
        for s in &mut seqs {
            let n = s.items.len();
            s.items.retain(|i| !cold.contains(i));
            report.dropped_interactions += n - s.items.len();
        }
        seqs.retain(|s| {
            let keep = s.items.len() >= MIN_SEQ_LEN;
            if !keep {
                report.dropped_interactions += s.items.len();
            }
            keep
        });
        report.dropped_sequences += before - seqs.len();
        if cold.is_empty() && before == seqs.len() {
            break;
        }
    }
    let kept: BTreeSet<usize> = seqs.iter().flat_map(|s| s.items.iter().copied()).collect();
    report.dropped_items = original.len() - kept.len();
    let remap: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(k, &i)| (i, k + 1)).collect();
    for s in &mut seqs {
        for i in &mut s.items {
            *i = remap[i];
        }
    }
    (seqs, kept.len(), report)
}

/// Read, filter and re-index a sequence file. `T` is the longest surviving
/// sequence unless overridden with [`Dataset::max_len`].
pub fn load_sequences(path: &Path) -> Result<(Dataset, FilterReport)> {
    let f = fs::File::open(path)?;
    read_sequences(BufReader::new(f))
}

pub fn read_sequences(r: impl BufRead) -> Result<(Dataset, FilterReport)> {
    let raw = parse_sequences(r)?;
    if raw.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let (seqs, num_items, report) = filter_items(raw);
    if seqs.is_empty() {
        return Err(Error::Data("no sequences survive filtering".into()));
    }
    let max_len = seqs.iter().map(|s| s.items.len()).max().unwrap_or(0);
    Ok((Dataset::new(seqs, num_items, max_len)?, report))
}

/// One next-item training example: `input[t]` predicts `targets[t]`; a 0
/// target marks a padded position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub user: usize,
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TrainExample {
    /// The last training target; used to label users easy or hard.
    pub fn last_target(&self) -> usize {
        *self.targets.last().expect("non-empty example")
    }
}

/// One held-out prediction: `input` (padded) followed by `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<TrainExample>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
    /// Sequences shorter than [`MIN_SEQ_LEN`] left out of every split.
    pub excluded: usize,
}

/// Leave-one-out: for items `x1..xL`, test predicts `xL` from `x1..x(L-1)`,
/// validation predicts `x(L-1)` from `x1..x(L-2)`, and training learns
/// every next item inside `x1..x(L-2)`, so neither held-out item is ever a
/// training target. A sequence of exactly 3 has no training pair and only
/// appears in validation and test. Inputs keep their last `T` items.
/// `user` indexes `ds.sequences`.
pub fn leave_one_out_split(ds: &Dataset) -> Split {
    let t = ds.max_len;
    let mut split = Split {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        excluded: 0,
    };
    for (u, s) in ds.sequences.iter().enumerate() {
        let x = &s.items;
        let l = x.len();
        if l < MIN_SEQ_LEN {
            split.excluded += 1;
            continue;
        }
        if l > MIN_SEQ_LEN {
            split.train.push(TrainExample {
                user: u,
                input: pad_left(&x[..l - 3], t),
                targets: pad_left(&x[1..l - 2], t),
            });
        }
        split.valid.push(EvalCase {
            user: u,
            input: pad_left(&x[..l - 2], t),
            target: x[l - 2],
        });
        split.test.push(EvalCase {
            user: u,
            input: pad_left(&x[..l - 1], t),
            target: x[l - 1],
        });
    }
    split
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadTail {
    pub head_items: Vec<usize>,
    pub tail_items: Vec<usize>,
    /// Per sequence: at least one interaction with a tail item.
    pub tail_users: Vec<bool>,
}

/// Rank items by interaction count (ties to the smaller id); the top
/// `ceil(0.2 * |I|)` are head items.
pub fn head_tail_partition(ds: &Dataset) -> HeadTail {
    let mut counts = vec![0usize; ds.num_items + 1];
    for s in &ds.sequences {
        for &i in &s.items {
            counts[i] += 1;
        }
    }
    let mut ranked: Vec<usize> = (1..=ds.num_items).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let h = head_count(ds.num_items, 0.2).min(ds.num_items);
    let mut is_head = vec![false; ds.num_items + 1];
    for &i in &ranked[..h] {
        is_head[i] = true;
    }
    let mut head_items = ranked[..h].to_vec();
    let mut tail_items = ranked[h..].to_vec();
    head_items.sort_unstable();
    tail_items.sort_unstable();
    let tail_users = ds
        .sequences
        .iter()
        .map(|s| s.items.iter().any(|&i| !is_head[i]))
        .collect();
    HeadTail {
        head_items,
        tail_items,
        tail_users,
    }
}
