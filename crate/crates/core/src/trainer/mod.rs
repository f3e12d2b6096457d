//! Joint optimization of router and supernet, validation tracking and
//! checkpointing.

pub mod adam;
pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::backbone::{Exit, Route, RoutingSpace, Supernet, SupernetConfig};
use crate::data::{leave_one_out_split, Dataset, EvalCase, Split, TrainExample};
use crate::dynlayers::Dropout;
use crate::error::{Error, Result};
use crate::eval::{self, FlopsReport, MetricsReport, Routing};
use crate::losses::{self, GuideLabels, LossConfig, LossParts};
use crate::numerics::{ParamStore, RngState, Tape, Tensor, Var};
use crate::router::{self, GateKind, Router};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub space: RoutingSpace,
    pub seed: u64,
    pub disable_uniform: bool,
    pub disable_guide: bool,
    /// `[emb, hidden, depth]`; bypasses the router when set.
    pub static_route: Option<[usize; 3]>,
    pub heads: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub gate: GateKind,
    /// Sequences per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            space: RoutingSpace::desk_scale(),
            seed: 0,
            disable_uniform: false,
            disable_guide: false,
            static_route: None,
            heads: 4,
            dropout: 0.0,
            temperature: 1.0,
            gate: GateKind::default(),
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        self.loss.validate()?;
        self.static_route()?;
        Ok(())
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss.clone();
        if self.disable_uniform {
            l.lambda_uniform = 0.0;
        }
        if self.disable_guide {
            l.lambda_guide = 0.0;
        }
        l
    }

    pub fn static_route(&self) -> Result<Option<Route>> {
        self.static_route
            .map(|[e, h, d]| self.space.route_of(e, h, d))
            .transpose()
    }
}

/// Supernet and router sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub supernet: Supernet,
    pub router: Router,
    pub static_route: Option<Route>,
}

/// Evaluation output for a set of held-out cases.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub flops: FlopsReport,
    pub routes: Vec<Route>,
    pub ranks: Vec<usize>,
}

impl Model {
    pub fn new(cfg: &TrainConfig, num_items: usize, max_len: usize) -> Result<Self> {
        let mut rng = RngState::new(cfg.seed).fork(INIT_STREAM);
        let mut store = ParamStore::new();
        let supernet = Supernet::new(
            &mut store,
            &mut rng,
            cfg.space.clone(),
            SupernetConfig {
                num_items,
                max_len,
                heads: cfg.heads,
                dropout: cfg.dropout,
            },
        )?;
        let router = Router::new(&mut store, &mut rng, num_items, max_len, cfg.space.len())?;
        Ok(Self {
            store,
            supernet,
            router,
            static_route: cfg.static_route()?,
        })
    }

    pub fn space(&self) -> &RoutingSpace {
        &self.supernet.space
    }

    pub fn routing(&self) -> Routing<'_> {
        match self.static_route {
            Some(r) => Routing::Static(r),
            None => Routing::Learned(&self.router),
        }
    }

    /// Inference-time route of every input.
    pub fn route(&self, inputs: &[&[usize]], batch: usize) -> Result<Vec<Route>> {
        eval::assign_routes(&self.store, self.routing(), self.space(), inputs, batch)
    }

    pub fn evaluate(&self, cases: &[EvalCase], tail: Option<&[bool]>, batch: usize) -> Result<Evaluation> {
        let inputs: Vec<&[usize]> = cases.iter().map(|c| c.input.as_slice()).collect();
        let targets: Vec<usize> = cases.iter().map(|c| c.target).collect();
        let routes = self.route(&inputs, batch)?;
        let ranks = eval::rank_cases(&self.store, &self.supernet, &inputs, &targets, &routes, batch)?;
        let tail_flags: Option<Vec<bool>> = tail.map(|t| cases.iter().map(|c| t[c.user]).collect());
        let metrics = MetricsReport::from_ranks(&ranks, tail_flags.as_deref())?;
        let cfg = &self.supernet.config;
        let flops = FlopsReport::from_routes(
            self.space(),
            &routes,
            cfg.max_len,
            cfg.num_items,
            cfg.heads,
            self.static_route.is_none(),
        )?;
        Ok(Evaluation {
            metrics,
            flops,
            routes,
            ranks,
        })
    }

    fn load_params(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", self.store.name(id));
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != self.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.store.get(id).shape()
                )));
            }
            *self.store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sr: f64,
    pub uniform: f64,
    pub guide: f64,
    pub total: f64,
    /// Entropy of the sampled training routes over the epoch; the collapse
    /// diagnostic.
    pub route_entropy: f64,
    /// Entropy of argmax route usage on the validation inputs.
    pub argmax_entropy: f64,
    pub valid_ndcg10: f64,
    /// Share of training users labeled easy.
    pub easy_fraction: f64,
    /// Average backbone FLOPs on the validation inputs.
    pub avg_flops: f64,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: LossParts,
    pub routes: Vec<Route>,
    pub easy: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub valid_ndcg10: f64,
    pub params: ParamStore,
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub rng: RngState,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    supernet: SupernetConfig,
    rng_seed: u64,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_valid_ndcg10: Option<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, num_items: usize, max_len: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config, num_items, max_len)?;
        let adam = Adam::new(config.adam, &model.store);
        let rng = RngState::new(config.seed).fork(TRAIN_STREAM);
        Ok(Self {
            config,
            model,
            adam,
            rng,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    /// One optimizer step on the given examples.
    pub fn train_step(&mut self, batch: &[&TrainExample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let lcfg = self.config.effective_loss();
        let inputs: Vec<&[usize]> = batch.iter().map(|e| e.input.as_slice()).collect();
        let model = &self.model;
        let space = model.space();
        let mut tape = Tape::with_params(&model.store);

        let (routes, gate, probs) = match model.static_route {
            Some(r) => (vec![r; batch.len()], None, None),
            None => {
                let out = model
                    .router
                    .sample(&mut tape, &inputs, space, self.config.temperature, &mut self.rng)?;
                let idx: Vec<usize> = out.hard.iter().map(|r| r.index).collect();
                let factors = router::gate_factors(&mut tape, out.alpha, &idx, self.config.gate)?;
                (out.hard, Some(factors), Some(out.probs))
            }
        };

        let mut sr_sum: Option<Var> = None;
        let mut count = 0usize;
        for route in space.routes() {
            let members: Vec<usize> = (0..batch.len()).filter(|&b| routes[b].index == route.index).collect();
            if members.is_empty() {
                continue;
            }
            let seqs: Vec<&[usize]> = members.iter().map(|&b| inputs[b]).collect();
            let mut dropout = Dropout {
                rate: self.config.dropout,
                rng: &mut self.rng,
            };
            let mut logits = model
                .supernet
                .forward(&mut tape, &seqs, &route, Exit::AllPositions, Some(&mut dropout))?;
            if let Some(f) = gate {
                logits = router::straight_through_gate(&mut tape, logits, f, &members)?;
            }
            let targets: Vec<usize> = members.iter().flat_map(|&b| batch[b].targets.iter().copied()).collect();
            let mask: Vec<bool> = targets.iter().map(|&t| t != 0).collect();
            let (s, c) = losses::sr_loss_sum(&mut tape, logits, &targets, &mask)?;
            count += c;
            sr_sum = Some(match sr_sum {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        if count == 0 {
            return Err(Error::Data("batch has no training targets".into()));
        }
        let sr = tape.scale(sr_sum.expect("at least one route group"), 1.0 / count as f64);
        let mut parts = LossParts {
            sr: tape.value(sr).item(),
            ..LossParts::default()
        };
        let mut total = sr;
        let mut easy = None;
        if let Some(p) = probs {
            let uni = losses::uniform_loss(&mut tape, p, lcfg.eps_log);
            parts.uniform = tape.value(uni).item();
            let last: Vec<usize> = batch.iter().map(|e| e.last_target()).collect();
            let flags = losses::label_users(
                &model.store,
                &model.supernet,
                &inputs,
                &last,
                &space.smallest(),
                lcfg.recall_k,
            )?;
            let labels = GuideLabels::from_easy(flags.clone(), space, lcfg.beta);
            let guide = losses::guide_loss(&mut tape, p, &labels, space, lcfg.eps_log)?;
            parts.guide = tape.value(guide).item();
            easy = Some(flags);
            if lcfg.lambda_uniform > 0.0 {
                let w = tape.scale(uni, lcfg.lambda_uniform);
                total = tape.add(total, w)?;
            }
            if lcfg.lambda_guide > 0.0 {
                let w = tape.scale(guide, lcfg.lambda_guide);
                total = tape.add(total, w)?;
            }
        }
        losses::total_loss(parts.sr, parts.uniform, parts.guide, &lcfg)?;
        parts.total = tape.value(total).item();
        tape.backward(total)?;
        let grads = tape.param_grads();
        drop(tape);
        self.adam.step(&mut self.model.store, &grads)?;
        Ok(StepStats {
            loss: parts,
            routes,
            easy,
        })
    }

    /// One pass over the shuffled training examples followed by validation.
    pub fn train_epoch(&mut self, split: &Split) -> Result<EpochRecord> {
        if split.train.is_empty() {
            return Err(Error::Data("no training examples".into()));
        }
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut sums = LossParts::default();
        let mut steps = 0usize;
        let mut usage = vec![0usize; self.model.space().len()];
        let (mut easy, mut labeled) = (0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let st = self.train_step(&batch)?;
            sums.sr += st.loss.sr;
            sums.uniform += st.loss.uniform;
            sums.guide += st.loss.guide;
            sums.total += st.loss.total;
            steps += 1;
            for r in &st.routes {
                usage[r.index] += 1;
            }
            if let Some(flags) = st.easy {
                labeled += flags.len();
                easy += flags.iter().filter(|&&e| e).count();
            }
        }
        self.epoch += 1;
        let valid = self.model.evaluate(&split.valid, None, self.config.eval_batch)?;
        let z = steps as f64;
        let rec = EpochRecord {
            epoch: self.epoch,
            sr: sums.sr / z,
            uniform: sums.uniform / z,
            guide: sums.guide / z,
            total: sums.total / z,
            route_entropy: eval::entropy_of_counts(&usage),
            argmax_entropy: eval::usage_entropy(&valid.routes, self.model.space().len()),
            valid_ndcg10: valid.metrics.overall.ndcg_10,
            easy_fraction: if labeled == 0 { 0.0 } else { easy as f64 / labeled as f64 },
            avg_flops: valid.flops.average,
        };
        if self.best.as_ref().map_or(true, |b| rec.valid_ndcg10 > b.valid_ndcg10) {
            self.best = Some(BestSnapshot {
                epoch: self.epoch,
                valid_ndcg10: rec.valid_ndcg10,
                params: self.model.store.clone(),
            });
        }
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Train until `self.epoch == until`, reporting each record to `on_epoch`.
    pub fn run(&mut self, split: &Split, until: usize, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while self.epoch < until {
            let rec = self.train_epoch(split)?;
            on_epoch(&rec);
        }
        Ok(())
    }

    /// The model with the best-validation parameters (current ones if no
    /// epoch has finished).
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.store = b.params.clone();
        }
        m
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            train: self.config.clone(),
            supernet: self.model.supernet.config.clone(),
            rng_seed: self.rng.seed(),
            history: self.history.clone(),
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_valid_ndcg10: self.best.as_ref().map(|b| b.valid_ndcg10),
        };
        let store = &self.model.store;
        let mut tensors: Vec<(String, Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        for (id, name, _) in store.iter() {
            tensors.push((format!("adam.m/{name}"), self.adam.m[id.index()].clone()));
            tensors.push((format!("adam.v/{name}"), self.adam.v[id.index()].clone()));
        }
        tensors.push((
            "adam.steps".into(),
            Tensor::vector(self.adam.steps.iter().map(|&s| s as f64).collect())?,
        ));
        if let Some(b) = &self.best {
            for (_, name, t) in b.params.iter() {
                tensors.push((format!("best/{name}"), t.clone()));
            }
        }
        Ok(Checkpoint {
            config: serde_json::to_value(meta)?,
            tensors,
            rng_state: self.rng.state(),
            epoch: u32::try_from(self.epoch).map_err(|_| Error::Checkpoint("epoch overflow".into()))?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.config.clone())?;
        let mut t = Self::new(meta.train, meta.supernet.num_items, meta.supernet.max_len)?;
        t.model.load_params(ckpt, "")?;
        let ids: Vec<_> = t.model.store.ids().collect();
        for id in ids {
            let name = t.model.store.name(id).to_string();
            for (prefix, slot) in [("adam.m/", &mut t.adam.m), ("adam.v/", &mut t.adam.v)] {
                let key = format!("{prefix}{name}");
                let src = ckpt
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if src.shape() != slot[id.index()].shape() {
                    return Err(Error::Checkpoint(format!("tensor {key} has the wrong shape")));
                }
                slot[id.index()] = src.clone();
            }
        }
        let steps = ckpt
            .tensor("adam.steps")
            .ok_or_else(|| Error::Checkpoint("missing tensor adam.steps".into()))?;
        if steps.len() != t.adam.steps.len() {
            return Err(Error::Checkpoint("adam.steps has the wrong length".into()));
        }
        t.adam.steps = steps.data().iter().map(|&s| s as u64).collect();
        if let (Some(epoch), Some(ndcg)) = (meta.best_epoch, meta.best_valid_ndcg10) {
            let mut best = t.model.clone();
            best.load_params(ckpt, "best/")?;
            t.best = Some(BestSnapshot {
                epoch,
                valid_ndcg10: ndcg,
                params: best.store,
            });
        }
        t.rng = RngState::from_parts(meta.rng_seed, ckpt.rng_state);
        t.epoch = ckpt.epoch as usize;
        t.history = meta.history;
        if t.history.len() != t.epoch {
            return Err(Error::Checkpoint(format!(
                "history has {} epochs but the checkpoint is at epoch {}",
                t.history.len(),
                t.epoch
            )));
        }
        Ok(t)
    }
}

/// Split `ds` leave-one-out and train for `cfg.epochs` epochs.
pub fn fit(ds: &Dataset, cfg: &TrainConfig) -> Result<(Trainer, Split)> {
    let split = leave_one_out_split(ds);
    let mut t = Trainer::new(cfg.clone(), ds.num_items, ds.max_len)?;
    t.run(&split, cfg.epochs, |_| {})?;
    Ok((t, split))
}
