use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use canet_core::data::{self, head_tail_partition, leave_one_out_split, FilterReport};
use canet_core::eval::{histogram_csv, routing_histogram};
use canet_core::trainer::{Checkpoint, Evaluation, Trainer};
use canet_core::{Dataset, Error, Result, SyntheticConfig, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "canet", version, about = "Routed sequential recommender: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic easy/hard interaction dataset.
    GenData(GenDataArgs),
    /// Train on a sequence file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Per-dimension routing histogram of a checkpoint.
    RouteStats(RouteStatsArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    zipf: Option<f64>,
    #[arg(long)]
    easy_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Sequence file (`user_id<TAB>item,item,...`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Drop auxiliary losses: `u` (uniform), `g` (guide) or `ug` (both).
    #[arg(long)]
    ablation: Option<String>,
    /// Fixed `emb,hidden,depth` route; disables the router.
    #[arg(long)]
    static_route: Option<String>,
    /// Routing space preset: `desk` or `full`.
    #[arg(long)]
    space: Option<String>,
    /// Padded input length; defaults to the longest sequence.
    #[arg(long)]
    max_len: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Add head/tail user breakdown to the test metrics.
    #[arg(long)]
    tail_split: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    tail_split: bool,
}

#[derive(Args, Debug)]
struct RouteStatsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    max_len: Option<usize>,
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(serde_json::from_slice(&fs::read(p)?)?),
    }
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn load_dataset(path: &Path, max_len: Option<usize>) -> Result<(Dataset, FilterReport)> {
    let (mut ds, report) = data::load_sequences(path)?;
    if let Some(t) = max_len {
        if t == 0 {
            return Err(Error::Usage("--max-len must be positive".into()));
        }
        ds.max_len = t;
    }
    Ok((ds, report))
}

fn parse_route(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || Error::Usage(format!("--static-route expects emb,hidden,depth, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(out)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = read_config(a.common.config.as_deref())?;
    if let Some(v) = a.users {
        cfg.users = v;
    }
    if let Some(v) = a.items {
        cfg.items = v;
    }
    if let Some(v) = a.len {
        cfg.len = v;
    }
    if let Some(v) = a.zipf {
        cfg.zipf_s = v;
    }
    if let Some(v) = a.easy_fraction {
        cfg.easy_fraction = v;
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    let ds = data::generate_synthetic(&cfg)?;
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    write_json(out, "config.json", &cfg)?;
    ds.save(&out.join("sequences.tsv"))?;
    write_json(out, "stats.json", &ds.stats())?;
    let labels: String = ds
        .sequences
        .iter()
        .zip(ds.easy.as_deref().unwrap_or_default())
        .map(|(s, e)| format!("{}\t{}\n", s.user_id, if *e { "easy" } else { "hard" }))
        .collect();
    fs::write(out.join("labels.tsv"), labels)?;
    eprintln!("wrote {} sequences to {}", ds.len(), out.join("sequences.tsv").display());
    Ok(())
}

fn write_eval(out: &Path, ev: &Evaluation, tail: &[bool], test_users: &[usize], space: &canet_core::RoutingSpace) -> Result<()> {
    write_json(out, "metrics.json", &ev.metrics)?;
    write_json(out, "flops.json", &ev.flops)?;
    let tail_flags: Vec<bool> = test_users.iter().map(|&u| tail[u]).collect();
    let rows = routing_histogram(&ev.routes, space, Some(&tail_flags))?;
    fs::write(out.join("routing.csv"), histogram_csv(&rows))?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (ds, report) = load_dataset(&a.data, a.max_len)?;
    if report.dropped_items > 0 || report.dropped_sequences > 0 {
        eprintln!(
            "filtered {} cold items, {} interactions, {} sequences",
            report.dropped_items, report.dropped_interactions, report.dropped_sequences
        );
    }
    let split = leave_one_out_split(&ds);
    if split.excluded > 0 {
        eprintln!("excluded {} sequences shorter than {}", split.excluded, data::MIN_SEQ_LEN);
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            let net = &t.model.supernet.config;
            if net.num_items != ds.num_items || net.max_len != ds.max_len {
                return Err(Error::Checkpoint(format!(
                    "checkpoint expects {} items and length {}, data has {} and {}",
                    net.num_items, net.max_len, ds.num_items, ds.max_len
                )));
            }
            t
        }
        None => {
            let mut cfg: TrainConfig = read_config(a.common.config.as_deref())?;
            if let Some(v) = a.common.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.adam.lr = v;
            }
            match a.space.as_deref() {
                None => {}
                Some("desk") => cfg.space = canet_core::RoutingSpace::desk_scale(),
                Some("full") => cfg.space = canet_core::RoutingSpace::full_scale(),
                Some(other) => return Err(Error::Usage(format!("unknown space {other:?}; use desk or full"))),
            }
            match a.ablation.as_deref() {
                None => {}
                Some("u") => cfg.disable_uniform = true,
                Some("g") => cfg.disable_guide = true,
                Some("ug") => {
                    cfg.disable_uniform = true;
                    cfg.disable_guide = true;
                }
                Some(other) => return Err(Error::Usage(format!("unknown ablation {other:?}; use u, g or ug"))),
            }
            if let Some(s) = &a.static_route {
                cfg.static_route = Some(parse_route(s)?);
            }
            Trainer::new(cfg, ds.num_items, ds.max_len)?
        }
    };
    if let Some(e) = a.epochs {
        trainer.config.epochs = e;
    }
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    write_json(out, "config.json", &trainer.config)?;
    let until = trainer.config.epochs;
    trainer.run(&split, until, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4} (sr {:.4} uni {:.4} guide {:.4})  valid ndcg@10 {:.4}  route entropy {:.3} (argmax {:.3})  easy {:.3}  flops {:.0}",
            r.epoch, r.total, r.sr, r.uniform, r.guide, r.valid_ndcg10, r.route_entropy, r.argmax_entropy, r.easy_fraction, r.avg_flops
        );
    })?;
    write_json(out, "history.json", &trainer.history)?;
    trainer.to_checkpoint()?.save(&out.join("model.ckpt"))?;
    let model = trainer.best_model();
    let ht = head_tail_partition(&ds);
    let tail = a.tail_split.then_some(ht.tail_users.as_slice());
    let ev = model.evaluate(&split.test, tail, trainer.config.eval_batch)?;
    let users: Vec<usize> = split.test.iter().map(|c| c.user).collect();
    write_eval(out, &ev, &ht.tail_users, &users, model.space())?;
    println!(
        "test ndcg@10 {:.4}  recall@10 {:.4}  avg flops {:.0}  savings {:.3}",
        ev.metrics.overall.ndcg_10, ev.metrics.overall.recall_10, ev.flops.average, ev.flops.savings
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ds, _) = load_dataset(&a.data, a.max_len)?;
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let model = trainer.best_model();
    let split = leave_one_out_split(&ds);
    let ht = head_tail_partition(&ds);
    let tail = a.tail_split.then_some(ht.tail_users.as_slice());
    let ev = model.evaluate(&split.test, tail, trainer.config.eval_batch)?;
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    let users: Vec<usize> = split.test.iter().map(|c| c.user).collect();
    write_eval(out, &ev, &ht.tail_users, &users, model.space())?;
    println!(
        "ndcg@10 {:.4}  ndcg@20 {:.4}  recall@10 {:.4}  recall@20 {:.4}",
        ev.metrics.overall.ndcg_10, ev.metrics.overall.ndcg_20, ev.metrics.overall.recall_10, ev.metrics.overall.recall_20
    );
    println!(
        "avg flops {:.0}  static flops {}  savings {:.4}",
        ev.flops.average, ev.flops.static_flops, ev.flops.savings
    );
    Ok(())
}

fn route_stats(a: RouteStatsArgs) -> Result<()> {
    let (ds, _) = load_dataset(&a.data, a.max_len)?;
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let model = trainer.best_model();
    let split = leave_one_out_split(&ds);
    let ht = head_tail_partition(&ds);
    let inputs: Vec<&[usize]> = split.test.iter().map(|c| c.input.as_slice()).collect();
    let routes = model.route(&inputs, trainer.config.eval_batch)?;
    let tail: Vec<bool> = split.test.iter().map(|c| ht.tail_users[c.user]).collect();
    let rows = routing_histogram(&routes, model.space(), Some(&tail))?;
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    let csv = histogram_csv(&rows);
    fs::write(out.join("routing.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("E_USAGE: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::RouteStats(a) => route_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
