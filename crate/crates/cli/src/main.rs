mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rewardlab::baselines::{
    self_train, train_regressor, RegressionReward, Regressor, SentenceBleuReward, Sparsified,
};
use rewardlab::eval::{evaluate_model, write_histogram, write_reports, DecodeMode};
use rewardlab::experiment::{
    reward_spread, sample_for_histogram, sweep_dp, sweep_du, sweep_k, write_sweep, PipelineConfig, SweepRow,
};
use rewardlab::reward::{RewardFn, TrajectoryReward};
use rewardlab::rl::{train_rl, write_rl_curve, RlHooks};
use rewardlab::scorer::CheckpointKind;
use rewardlab::supervised::{split_validation, train_on_split, write_curve};
use rewardlab::task::{
    detect_task, generate, read_datasets, split_path, vocab_path, write_datasets, Datasets, Pair, TaskKind,
};
use rewardlab::verify::{run_suite, Suite};
use rewardlab::{AdamState, Checkpoint, ScorerConfig, ScorerParams};

use manifest::Manifest;

#[derive(Parser)]
#[command(
    name = "rewardlab",
    version,
    about = "Reward induction and off-policy RL for sequence generation"
)]
struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunConfig {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task and write its splits.
    GenData {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Stage one: teacher-forced training on the parallel split.
    TrainTf {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: RunConfig,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage two: off-policy REINFORCE on the non-parallel split.
    TrainRl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, value_enum)]
        reward: RewardKind,
        /// Sync period for the behavior policy.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        updates: Option<usize>,
        /// Regressor checkpoint, required by the rregress rewards.
        #[arg(long)]
        regressor: Option<PathBuf>,
        /// Directory for checkpoints written every k updates.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        #[command(flatten)]
        run: RunConfig,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-training baseline from a supervised checkpoint.
    SelfTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        run: RunConfig,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the sentence-BLEU regressor used by the rregress rewards.
    TrainRegressor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        run: RunConfig,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the test split and report BLEU-2/4, Self-BLEU-4 and iBLEU-4.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "greedy")]
        decode: DecodeMode,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        report: PathBuf,
        /// Also write the decoded outputs as JSON lines.
        #[arg(long)]
        outputs: Option<PathBuf>,
    },
    /// Reward-to-go histograms of several rewards on the same sampled trajectories.
    RewardHist {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Any of induced, induced-sparse, sentence-bleu, rregress-dense, rregress-sparse.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<HistMethod>,
        #[arg(long)]
        regressor: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        trajectories: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[command(flatten)]
        run: RunConfig,
        #[arg(long)]
        out: PathBuf,
    },
    /// Induced-reward RL at several sync periods.
    SweepK {
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Self-training and induced RL on growing shares of the non-parallel data.
    SweepDu {
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Every method from supervised models on growing shares of the parallel data.
    SweepDp {
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Run the exact-oracle verification suites.
    Verify {
        /// A suite name or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the suite reports as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "synonym")]
    task: TaskKind,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RewardKind {
    Induced,
    RregressSparse,
    RregressDense,
    InducedSparse,
}

impl RewardKind {
    fn name(self) -> &'static str {
        match self {
            RewardKind::Induced => "induced",
            RewardKind::RregressSparse => "rregress-sparse",
            RewardKind::RregressDense => "rregress-dense",
            RewardKind::InducedSparse => "induced-sparse",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HistMethod {
    Induced,
    InducedSparse,
    SentenceBleu,
    RregressDense,
    RregressSparse,
}

impl HistMethod {
    fn name(self) -> &'static str {
        match self {
            HistMethod::Induced => "induced",
            HistMethod::InducedSparse => "induced-sparse",
            HistMethod::SentenceBleu => "sentence-bleu",
            HistMethod::RregressDense => "rregress-dense",
            HistMethod::RregressSparse => "rregress-sparse",
        }
    }
}

struct Data {
    kind: TaskKind,
    sets: Datasets,
    files: Vec<PathBuf>,
}

fn load_data(dir: &Path) -> Result<Data> {
    let kind = detect_task(dir)?;
    let sets = read_datasets(dir, kind, None)?;
    let files = ["parallel", "nonparallel", "test"]
        .iter()
        .map(|s| split_path(dir, kind, s))
        .chain([vocab_path(dir, kind)])
        .collect();
    Ok(Data { kind, sets, files })
}

fn resolve(kind: TaskKind, run: &RunConfig) -> Result<PipelineConfig> {
    Ok(config::resolve(kind, run.config.as_deref(), &run.set, run.seed)?)
}

fn scorer_config(cfg: &PipelineConfig, data: &Data) -> ScorerConfig {
    ScorerConfig {
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        ..ScorerConfig::new(data.sets.vocab.size, cfg.horizon)
    }
}

fn load_scorer(path: &Path) -> Result<ScorerParams> {
    let c = Checkpoint::load(path)?;
    if c.kind != CheckpointKind::Scorer {
        bail!("{} is not a scorer checkpoint", path.display());
    }
    Ok(c.params()?)
}

fn load_regressor(path: Option<&Path>) -> Result<Regressor> {
    let path = path.ok_or_else(|| anyhow!("this reward needs --regressor CKPT"))?;
    let c = Checkpoint::load(path)?;
    if c.kind != CheckpointKind::Regressor {
        bail!("{} is not a regressor checkpoint", path.display());
    }
    Ok(Regressor::from_checkpoint(&c)?)
}

fn check_fits(params: &ScorerParams, data: &Data) -> Result<()> {
    if params.config().vocab_size != data.sets.vocab.size {
        bail!(
            "checkpoint vocabulary size {} does not match the data ({})",
            params.config().vocab_size,
            data.sets.vocab.size
        );
    }
    Ok(())
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn validation_split(cfg: &PipelineConfig, data: &Data) -> Result<(Vec<Pair>, Vec<Pair>)> {
    Ok(split_validation(
        &data.sets.parallel,
        cfg.tf.val_fraction,
        cfg.tf.seed,
    )?)
}

fn finish(mut m: Manifest, threads: Option<usize>, outputs: &[&Path], manifest_path: &Path) -> Result<()> {
    m.threads = threads;
    for o in outputs {
        m.output(o)?;
    }
    m.write(manifest_path)
}

fn gen_data(
    task: TaskKind,
    seed: u64,
    out: &Path,
    file: Option<&Path>,
    sets: &[String],
    threads: Option<usize>,
) -> Result<()> {
    let cfg = config::resolve(task, file, sets, Some(seed))?;
    let data = generate(&cfg.task)?;
    let written = write_datasets(out, &data)?;
    let mut m = Manifest::new("gen-data", Some(seed), Some(cfg));
    if let Some(f) = file {
        m.input(f)?;
    }
    let outs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    finish(m, threads, &outs, &out.join("manifest.json"))?;
    println!(
        "wrote {} parallel, {} non-parallel, {} test examples to {}",
        data.parallel.len(),
        data.nonparallel.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn train_tf(data_dir: &Path, run: &RunConfig, out: &Path, threads: Option<usize>) -> Result<()> {
    let data = load_data(data_dir)?;
    let cfg = resolve(data.kind, run)?;
    let (train, val) = validation_split(&cfg, &data)?;
    let init = ScorerParams::init(scorer_config(&cfg, &data), cfg.tf.seed)?;
    let result = train_on_split(init, &train, &val, &cfg.tf)?;
    ensure_parent(out)?;
    Checkpoint::from_params(&result.params, cfg.tf.seed, None).save(out)?;
    let curve = sidecar(out, ".curve.csv");
    write_curve(&curve, &result.curve)?;
    let mut m = Manifest::new("train-tf", Some(cfg.tf.seed), Some(cfg));
    m.inputs(&data.files)?;
    if let Some(c) = &run.config {
        m.input(c)?;
    }
    finish(m, threads, &[out, &curve], &sidecar(out, ".manifest.json"))?;
    println!(
        "best epoch {} (val loss {:.4}); wrote {}",
        result.best_epoch,
        result.best_val_loss,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_rl_cmd(
    data_dir: &Path,
    init_path: &Path,
    reward: RewardKind,
    k: Option<usize>,
    updates: Option<usize>,
    regressor: Option<&Path>,
    snapshots: Option<&Path>,
    run: &RunConfig,
    out: &Path,
    threads: Option<usize>,
) -> Result<()> {
    let data = load_data(data_dir)?;
    let mut cfg = resolve(data.kind, run)?;
    if let Some(k) = k {
        cfg.rl.sync_period = k;
    }
    if let Some(u) = updates {
        cfg.rl.updates = u;
    }
    cfg.rl.validate()?;
    let init = load_scorer(init_path)?;
    check_fits(&init, &data)?;
    let (_, val) = validation_split(&cfg, &data)?;
    let reward_fn: Box<dyn TrajectoryReward> = match reward {
        RewardKind::Induced => Box::new(RewardFn::new(init.clone(), cfg.shaping)?),
        RewardKind::InducedSparse => Box::new(Sparsified(RewardFn::new(init.clone(), cfg.shaping)?)),
        RewardKind::RregressSparse | RewardKind::RregressDense => Box::new(RegressionReward {
            regressor: load_regressor(regressor)?,
            dense: reward == RewardKind::RregressDense,
        }),
    };
    if let Some(dir) = snapshots {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let seed = cfg.rl.seed;
    let mut snapshot_paths = Vec::new();
    let mut save = |i: usize, p: &ScorerParams, a: &AdamState| -> rewardlab::Result<()> {
        if let Some(dir) = snapshots {
            let path = dir.join(format!("update{i:06}.json"));
            Checkpoint::from_params(p, seed, Some(a)).save(&path)?;
            snapshot_paths.push(path);
        }
        Ok(())
    };
    let hooks = RlHooks {
        method: reward.name(),
        eval_set: Some(&val),
        checkpoint: Some(&mut save),
    };
    let result = train_rl(&data.sets.nonparallel, &*reward_fn, init, &cfg.rl, hooks)?;
    ensure_parent(out)?;
    Checkpoint::from_params(&result.params, seed, Some(&result.adam)).save(out)?;
    let curve = sidecar(out, ".curve.csv");
    write_rl_curve(&curve, &result.curve)?;
    let mut m = Manifest::new("train-rl", Some(seed), Some(cfg));
    m.inputs(&data.files)?;
    m.input(init_path)?;
    if let Some(r) = regressor {
        m.input(r)?;
    }
    if let Some(c) = &run.config {
        m.input(c)?;
    }
    let mut outs: Vec<&Path> = vec![out, &curve];
    outs.extend(snapshot_paths.iter().map(PathBuf::as_path));
    finish(m, threads, &outs, &sidecar(out, ".manifest.json"))?;
    let last = result
        .final_eval()
        .map(|r| format!("val BLEU-4 {:.2}", r.bleu4))
        .unwrap_or_default();
    println!(
        "{} updates, {} syncs, {last}; wrote {}",
        cfg.rl.updates,
        result.syncs,
        out.display()
    );
    Ok(())
}

fn self_train_cmd(
    data_dir: &Path,
    init_path: &Path,
    run: &RunConfig,
    out: &Path,
    threads: Option<usize>,
) -> Result<()> {
    let data = load_data(data_dir)?;
    let cfg = resolve(data.kind, run)?;
    let init = load_scorer(init_path)?;
    check_fits(&init, &data)?;
    let (_, val) = validation_split(&cfg, &data)?;
    let result = self_train(&data.sets.nonparallel, &init, &val, &cfg.self_train)?;
    ensure_parent(out)?;
    Checkpoint::from_params(&result.run.params, cfg.self_train.seed, None).save(out)?;
    let curve = sidecar(out, ".curve.csv");
    write_curve(&curve, &result.run.curve)?;
    let mut m = Manifest::new("self-train", Some(cfg.self_train.seed), Some(cfg));
    m.inputs(&data.files)?;
    m.input(init_path)?;
    finish(m, threads, &[out, &curve], &sidecar(out, ".manifest.json"))?;
    println!(
        "{} pseudo-pairs ({} dropped without eos); wrote {}",
        result.pseudo.len(),
        result.dropped,
        out.display()
    );
    Ok(())
}

fn train_regressor_cmd(
    data_dir: &Path,
    init_path: &Path,
    run: &RunConfig,
    out: &Path,
    threads: Option<usize>,
) -> Result<()> {
    let data = load_data(data_dir)?;
    let cfg = resolve(data.kind, run)?;
    let init = load_scorer(init_path)?;
    check_fits(&init, &data)?;
    let (train, _) = validation_split(&cfg, &data)?;
    let result = train_regressor(&train, &init, &cfg.regressor)?;
    ensure_parent(out)?;
    result.regressor.to_checkpoint(cfg.regressor.seed).save(out)?;
    let curve = sidecar(out, ".curve.csv");
    write_curve(&curve, &result.curve)?;
    let mut m = Manifest::new("train-regressor", Some(cfg.regressor.seed), Some(cfg));
    m.inputs(&data.files)?;
    m.input(init_path)?;
    finish(m, threads, &[out, &curve], &sidecar(out, ".manifest.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    ckpt: &Path,
    data_dir: &Path,
    decode: DecodeMode,
    alpha: Option<f64>,
    report: &Path,
    outputs: Option<&Path>,
    threads: Option<usize>,
) -> Result<()> {
    let data = load_data(data_dir)?;
    let params = load_scorer(ckpt)?;
    check_fits(&params, &data)?;
    let method = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let alpha = alpha.unwrap_or(rewardlab::eval::DEFAULT_ALPHA);
    let ev = evaluate_model(&params, &data.sets.test, decode, method, alpha)?;
    ensure_parent(report)?;
    write_reports(report, std::slice::from_ref(&ev.report))?;
    let mut outs = vec![report.to_path_buf()];
    if let Some(o) = outputs {
        ensure_parent(o)?;
        let mut text = String::new();
        for (pair, out) in data.sets.test.iter().zip(&ev.outputs) {
            text.push_str(&serde_json::to_string(
                &serde_json::json!({ "src": pair.src, "out": out }),
            )?);
            text.push('\n');
        }
        fs::write(o, text).with_context(|| format!("writing {}", o.display()))?;
        outs.push(o.to_path_buf());
    }
    let mut m = Manifest::new("eval", None, None);
    m.inputs(&data.files)?;
    m.input(ckpt)?;
    let outs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
    finish(m, threads, &outs, &sidecar(report, ".manifest.json"))?;
    let r = &ev.report;
    println!(
        "BLEU-2 {:.2}  BLEU-4 {:.2}  Self-BLEU-4 {:.2}  iBLEU-4 {:.2}  ({} pairs, {decode})",
        r.bleu2, r.bleu4, r.sbleu4, r.ibleu4, r.n_pairs
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn reward_hist_cmd(
    ckpt: &Path,
    data_dir: &Path,
    methods: &[HistMethod],
    regressor: Option<&Path>,
    trajectories: usize,
    bins: usize,
    run: &RunConfig,
    out: &Path,
    threads: Option<usize>,
) -> Result<()> {
    let data = load_data(data_dir)?;
    let cfg = resolve(data.kind, run)?;
    let params = load_scorer(ckpt)?;
    check_fits(&params, &data)?;
    let trajs = sample_for_histogram(
        &params,
        &data.sets.test,
        trajectories,
        cfg.rl.temperature,
        cfg.rl.seed,
    )?;
    let reg = if methods
        .iter()
        .any(|m| matches!(m, HistMethod::RregressDense | HistMethod::RregressSparse))
    {
        Some(load_regressor(regressor)?)
    } else {
        None
    };
    let mut boxed: Vec<(&str, Box<dyn TrajectoryReward>)> = Vec::new();
    for &m in methods {
        let r: Box<dyn TrajectoryReward> = match m {
            HistMethod::Induced => Box::new(RewardFn::new(params.clone(), cfg.shaping)?),
            HistMethod::InducedSparse => Box::new(Sparsified(RewardFn::new(params.clone(), cfg.shaping)?)),
            HistMethod::SentenceBleu => Box::new(SentenceBleuReward::new(&data.sets.test)),
            HistMethod::RregressDense | HistMethod::RregressSparse => Box::new(RegressionReward {
                regressor: reg.clone().expect("loaded above"),
                dense: m == HistMethod::RregressDense,
            }),
        };
        boxed.push((m.name(), r));
    }
    let rewards: Vec<(&str, &dyn TrajectoryReward)> = boxed.iter().map(|(n, r)| (*n, r.as_ref())).collect();
    let rows = reward_spread(&trajs, &rewards, bins)?;
    ensure_parent(out)?;
    write_histogram(out, &rows)?;
    let mut m = Manifest::new("reward-hist", Some(cfg.rl.seed), Some(cfg));
    m.inputs(&data.files)?;
    m.input(ckpt)?;
    if let Some(r) = regressor {
        m.input(r)?;
    }
    finish(m, threads, &[out], &sidecar(out, ".manifest.json"))?;
    for (name, _) in &rewards {
        let own: Vec<_> = rows.iter().filter(|r| r.method == *name).cloned().collect();
        println!(
            "{name}: max-bin fraction {:.4}",
            rewardlab::eval::max_bin_fraction(&own)
        );
    }
    Ok(())
}

fn sweep_cmd(
    name: &str,
    args: &SweepArgs,
    threads: Option<usize>,
    run: impl FnOnce(&PipelineConfig, &[u64]) -> rewardlab::Result<Vec<SweepRow>>,
) -> Result<()> {
    let cfg = config::resolve(args.task, args.config.as_deref(), &args.set, None)?;
    let rows = run(&cfg, &args.seeds)?;
    ensure_parent(&args.out)?;
    write_sweep(&args.out, &rows)?;
    let mut m = Manifest::new(name, None, Some(cfg));
    if let Some(c) = &args.config {
        m.input(c)?;
    }
    finish(m, threads, &[&args.out], &sidecar(&args.out, ".manifest.json"))?;
    println!("{} rows; wrote {}", rows.len(), args.out.display());
    Ok(())
}

/// Suites that failed their check.
fn verify_cmd(suite: &str, seed: u64, report: Option<&Path>) -> Result<usize> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    let mut reports = Vec::new();
    for s in suites {
        let r = run_suite(s, seed)?;
        println!(
            "[{}] {:<13} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.elapsed.as_secs_f64(),
            r.detail
        );
        reports.push(r);
    }
    if let Some(path) = report {
        ensure_parent(path)?;
        fs::write(path, serde_json::to_string_pretty(&reports)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(reports.iter().filter(|r| !r.passed).count())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let t = cli.threads;
    match cli.command {
        Command::GenData {
            task,
            seed,
            out,
            config,
            set,
        } => gen_data(task, seed, &out, config.as_deref(), &set, t)?,
        Command::TrainTf { data, run, out } => train_tf(&data, &run, &out, t)?,
        Command::TrainRl {
            data,
            init,
            reward,
            k,
            updates,
            regressor,
            snapshots,
            run,
            out,
        } => train_rl_cmd(
            &data,
            &init,
            reward,
            k,
            updates,
            regressor.as_deref(),
            snapshots.as_deref(),
            &run,
            &out,
            t,
        )?,
        Command::SelfTrain { data, init, run, out } => self_train_cmd(&data, &init, &run, &out, t)?,
        Command::TrainRegressor { data, init, run, out } => train_regressor_cmd(&data, &init, &run, &out, t)?,
        Command::Eval {
            ckpt,
            data,
            decode,
            alpha,
            report,
            outputs,
        } => eval_cmd(&ckpt, &data, decode, alpha, &report, outputs.as_deref(), t)?,
        Command::RewardHist {
            ckpt,
            data,
            methods,
            regressor,
            trajectories,
            bins,
            run,
            out,
        } => reward_hist_cmd(
            &ckpt,
            &data,
            &methods,
            regressor.as_deref(),
            trajectories,
            bins,
            &run,
            &out,
            t,
        )?,
        Command::SweepK { values, sweep } => sweep_cmd("sweep-k", &sweep, t, |c, s| sweep_k(c, s, &values))?,
        Command::SweepDu { fractions, sweep } => {
            sweep_cmd("sweep-du", &sweep, t, |c, s| sweep_du(c, s, &fractions))?
        }
        Command::SweepDp { fractions, sweep } => {
            sweep_cmd("sweep-dp", &sweep, t, |c, s| sweep_dp(c, s, &fractions))?
        }
        Command::Verify { suite, seed, report } => {
            let failed = verify_cmd(&suite, seed, report.as_deref())?;
            if failed > 0 {
                eprintln!("error: {failed} verification suite(s) failed");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<rewardlab::Error>())
        .any(rewardlab::Error::is_numerical);
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
