//! End-to-end pipeline runs: supervised stage, then each comparison method,
//! plus the sweeps over sync period and data sizes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self_train, train_regressor, RegressionReward, RegressorConfig, Sparsified};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, reward_histogram, DecodeMode, HistogramRow, MetricReport, DEFAULT_ALPHA};
use crate::mdp::{Token, Trajectory};
use crate::reward::{rewards_to_go, RewardFn, RewardShaping, TrajectoryReward};
use crate::rl::{sample_trajectory, train_rl, trajectory_rng, RlConfig, RlHooks, RlRun};
use crate::scorer::{ScorerConfig, ScorerParams};
use crate::supervised::{split_validation, train_on_split, SupervisedRun, TfConfig};
use crate::task::{generate, Datasets, Pair, TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Supervised,
    SelfTrain,
    Induced,
    InducedSparse,
    RRegressSparse,
    RRegressDense,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Supervised,
        Method::SelfTrain,
        Method::Induced,
        Method::InducedSparse,
        Method::RRegressSparse,
        Method::RRegressDense,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::SelfTrain => "self-train",
            Method::Induced => "induced",
            Method::InducedSparse => "induced-sparse",
            Method::RRegressSparse => "rregress-sparse",
            Method::RRegressDense => "rregress-dense",
        }
    }

    pub fn is_rl(&self) -> bool {
        !matches!(self, Method::Supervised | Method::SelfTrain)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: TaskSpec,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub horizon: usize,
    pub tf: TfConfig,
    pub self_train: TfConfig,
    pub rl: RlConfig,
    pub regressor: RegressorConfig,
    pub shaping: RewardShaping,
    pub decode: DecodeMode,
    pub alpha: f64,
}

impl PipelineConfig {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            task: TaskSpec::new(kind, 0),
            embed_dim: 32,
            hidden_dim: 64,
            horizon: 32,
            tf: TfConfig::default(),
            self_train: TfConfig::default(),
            rl: RlConfig::default(),
            regressor: RegressorConfig::default(),
            shaping: RewardShaping::default(),
            decode: DecodeMode::Greedy,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn scorer(&self) -> ScorerConfig {
        ScorerConfig {
            vocab_size: self.task.data_tokens + 3,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            ..ScorerConfig::new(self.task.data_tokens + 3, self.horizon)
        }
    }

    /// Copy with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = *self;
        c.task.seed = seed;
        c.tf.seed = seed;
        c.self_train.seed = seed;
        c.rl.seed = seed;
        c.regressor.seed = seed;
        c
    }
}

/// Data and the supervised model every method starts from.
#[derive(Debug, Clone)]
pub struct StageOne {
    pub data: Datasets,
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub supervised: SupervisedRun,
}

impl StageOne {
    pub fn sources(&self) -> &[Vec<Token>] {
        &self.data.nonparallel
    }
}

/// Generate the task, hold out validation pairs, keep `dp_fraction` of the
/// remaining parallel pairs, and train the supervised model.
pub fn stage_one(cfg: &PipelineConfig, dp_fraction: f64) -> Result<StageOne> {
    cfg.task.validate(cfg.horizon)?;
    let data = generate(&cfg.task)?;
    let (mut train, val) = split_validation(&data.parallel, cfg.tf.val_fraction, cfg.tf.seed)?;
    train.truncate(fraction_len(train.len(), dp_fraction)?);
    let init = ScorerParams::init(cfg.scorer(), cfg.tf.seed)?;
    let supervised = train_on_split(init, &train, &val, &cfg.tf)?;
    Ok(StageOne {
        data,
        train,
        val,
        supervised,
    })
}

fn fraction_len(n: usize, f: f64) -> Result<usize> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::InvalidConfig(format!("fraction {f} outside (0, 1]")));
    }
    Ok(((n as f64 * f).round() as usize).max(1))
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub params: ScorerParams,
    /// Test-set report.
    pub report: MetricReport,
    pub rl: Option<RlRun>,
}

/// Train one method from stage one on the first `du_fraction` of the
/// non-parallel sources and evaluate it on the test set.
pub fn run_method(
    cfg: &PipelineConfig,
    s1: &StageOne,
    method: Method,
    du_fraction: f64,
    rl: &RlConfig,
) -> Result<MethodOutcome> {
    let sources = &s1.sources()[..fraction_len(s1.sources().len(), du_fraction)?];
    let init = s1.supervised.params.clone();
    let hooks = || RlHooks {
        method: method.name(),
        eval_set: Some(&s1.val),
        checkpoint: None,
    };
    let (params, rl_run) = match method {
        Method::Supervised => (init, None),
        Method::SelfTrain => (
            self_train(sources, &init, &s1.val, &cfg.self_train)?.run.params,
            None,
        ),
        Method::Induced => {
            let reward = RewardFn::new(init.clone(), cfg.shaping)?;
            let run = train_rl(sources, &reward, init, rl, hooks())?;
            (run.params.clone(), Some(run))
        }
        Method::InducedSparse => {
            let reward = Sparsified(RewardFn::new(init.clone(), cfg.shaping)?);
            let run = train_rl(sources, &reward, init, rl, hooks())?;
            (run.params.clone(), Some(run))
        }
        Method::RRegressSparse | Method::RRegressDense => {
            let reg = train_regressor(&s1.train, &init, &cfg.regressor)?.regressor;
            let reward = RegressionReward {
                regressor: reg,
                dense: method == Method::RRegressDense,
            };
            let run = train_rl(sources, &reward, init, rl, hooks())?;
            (run.params.clone(), Some(run))
        }
    };
    let report = evaluate_model(&params, &s1.data.test, cfg.decode, method.name(), cfg.alpha)?.report;
    Ok(MethodOutcome {
        method,
        params,
        report,
        rl: rl_run,
    })
}

/// Stage one plus every requested method for one seed.
pub fn run_seed(cfg: &PipelineConfig, seed: u64, methods: &[Method]) -> Result<Vec<MethodOutcome>> {
    let cfg = cfg.with_seed(seed);
    let s1 = stage_one(&cfg, 1.0)?;
    methods
        .iter()
        .map(|&m| run_method(&cfg, &s1, m, 1.0, &cfg.rl))
        .collect()
}

/// Whether the last evaluation fell below half of the best one.
pub fn collapsed(evals: &[(usize, MetricReport)]) -> bool {
    let peak = evals
        .iter()
        .map(|(_, r)| r.bleu4)
        .fold(f64::NEG_INFINITY, f64::max);
    match evals.last() {
        Some((_, last)) => peak > 0.0 && last.bleu4 < 0.5 * peak,
        None => false,
    }
}

/// Trajectories sampled from `params` on the sources of `pairs`, cycling
/// through the pairs in order.
pub fn sample_for_histogram(
    params: &ScorerParams,
    pairs: &[Pair],
    count: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if pairs.is_empty() {
        return Err(Error::Empty("pairs to sample from"));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let idx = i % pairs.len();
            let mut rng = trajectory_rng(seed, idx, 0, i);
            sample_trajectory(params, &pairs[idx].src, temperature, &mut rng)
        })
        .collect()
}

/// Every per-token reward-to-go of `trajs` under `reward`.
pub fn reward_to_go_values<R: TrajectoryReward + ?Sized>(
    trajs: &[Trajectory],
    reward: &R,
) -> Result<Vec<f64>> {
    let per: Vec<Vec<f64>> = trajs
        .par_iter()
        .map(|t| Ok(rewards_to_go(&reward.rewards(t)?)))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Histogram rows for several labelled rewards on the same trajectories.
pub fn reward_spread(
    trajs: &[Trajectory],
    rewards: &[(&str, &dyn TrajectoryReward)],
    bins: usize,
) -> Result<Vec<HistogramRow>> {
    let mut rows = Vec::new();
    for (label, reward) in rewards {
        let values = reward_to_go_values(trajs, *reward)?;
        rows.extend(reward_histogram(&values, bins, label)?);
    }
    Ok(rows)
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub value: f64,
    pub seed: u64,
    pub method: String,
    /// Update index for curve points; empty for final test reports.
    pub update: Option<usize>,
    pub bleu2: f64,
    pub bleu4: f64,
    pub sbleu4: f64,
    pub ibleu4: f64,
}

impl SweepRow {
    fn new(sweep: &str, value: f64, seed: u64, update: Option<usize>, r: &MetricReport) -> Self {
        Self {
            sweep: sweep.into(),
            value,
            seed,
            method: r.method.clone(),
            update,
            bleu2: r.bleu2,
            bleu4: r.bleu4,
            sbleu4: r.sbleu4,
            ibleu4: r.ibleu4,
        }
    }
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    crate::supervised::write_curve(path, rows)
}

/// Induced-reward RL with each sync period: validation curves plus the
/// final test report, per seed.
pub fn sweep_k(cfg: &PipelineConfig, seeds: &[u64], ks: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let c = cfg.with_seed(seed);
        let s1 = stage_one(&c, 1.0)?;
        for &k in ks {
            let rl = RlConfig {
                sync_period: k,
                ..c.rl
            };
            let out = run_method(&c, &s1, Method::Induced, 1.0, &rl)?;
            for (u, r) in &out.rl.as_ref().expect("rl run").evals {
                rows.push(SweepRow::new("k", k as f64, seed, Some(*u), r));
            }
            rows.push(SweepRow::new("k", k as f64, seed, None, &out.report));
        }
    }
    Ok(rows)
}

/// Induced-reward RL and self-training on growing shares of the
/// non-parallel data.
pub fn sweep_du(cfg: &PipelineConfig, seeds: &[u64], fractions: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let c = cfg.with_seed(seed);
        let s1 = stage_one(&c, 1.0)?;
        for &f in fractions {
            for m in [Method::SelfTrain, Method::Induced] {
                let out = run_method(&c, &s1, m, f, &c.rl)?;
                rows.push(SweepRow::new("du", f, seed, None, &out.report));
            }
        }
    }
    Ok(rows)
}

/// Every stage-two method starting from supervised models trained on
/// growing shares of the parallel data.
pub fn sweep_dp(cfg: &PipelineConfig, seeds: &[u64], fractions: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let c = cfg.with_seed(seed);
        for &f in fractions {
            let s1 = stage_one(&c, f)?;
            for m in [
                Method::Supervised,
                Method::SelfTrain,
                Method::Induced,
                Method::RRegressDense,
            ] {
                let out = run_method(&c, &s1, m, 1.0, &c.rl)?;
                rows.push(SweepRow::new("dp", f, seed, None, &out.report));
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(bleu4: f64) -> MetricReport {
        MetricReport {
            method: "m".into(),
            bleu2: 0.0,
            bleu4,
            sbleu4: 0.0,
            ibleu4: 0.0,
            alpha: 0.1,
            n_pairs: 1,
        }
    }

    #[test]
    fn collapse_rule() {
        let ev = |v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(i, &b)| (i, report(b)))
                .collect::<Vec<_>>()
        };
        assert!(collapsed(&ev(&[10.0, 20.0, 9.9])));
        assert!(!collapsed(&ev(&[10.0, 20.0, 10.0])));
        assert!(!collapsed(&ev(&[0.0, 0.0])));
        assert!(!collapsed(&[]));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("ppo".parse::<Method>().is_err());
    }

    #[test]
    fn tiny_pipeline_runs() {
        let mut cfg = PipelineConfig::new(TaskKind::Cipher);
        cfg.task = TaskSpec {
            data_tokens: 6,
            min_len: 2,
            max_len: 3,
            n_parallel: 40,
            n_nonparallel: 20,
            n_test: 10,
            ..cfg.task
        };
        cfg.embed_dim = 4;
        cfg.hidden_dim = 6;
        cfg.horizon = 6;
        cfg.tf = TfConfig {
            max_epochs: 40,
            warmup: 4,
            peak_lr: 2e-2,
            ..cfg.tf
        };
        cfg.self_train = cfg.tf;
        cfg.rl = RlConfig {
            updates: 3,
            sync_period: 2,
            batch_size: 2,
            eval_every: 1,
            ..cfg.rl
        };
        cfg.regressor = RegressorConfig {
            epochs: 1,
            hypotheses: 1,
            ..cfg.regressor
        };
        let out = run_seed(&cfg, 1, &Method::ALL).unwrap();
        assert_eq!(out.len(), 6);
        for o in &out {
            assert_eq!(o.report.n_pairs, 10);
            assert_eq!(o.rl.is_some(), o.method.is_rl());
        }
        let induced = out[2].rl.as_ref().unwrap();
        let sparse = out[3].rl.as_ref().unwrap();
        assert_eq!(induced.first_batch, sparse.first_batch);
        assert_eq!(induced.evals.len(), 4);
    }
}
