//! Flat `key = value` run configuration. Later sources override earlier
//! ones: defaults, then the file, then `--set` pairs, then dedicated flags.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rewardlab::experiment::PipelineConfig;
use rewardlab::task::TaskKind;
use rewardlab::{Error, Result};

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn tf_key(cfg: &mut rewardlab::supervised::TfConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "smoothing" => cfg.smoothing = parse(key, v)?,
        "warmup" => cfg.warmup = parse(key, v)?,
        "peak_lr" => cfg.peak_lr = parse(key, v)?,
        "batch_size" => cfg.batch_size = parse(key, v)?,
        "max_epochs" => cfg.max_epochs = parse(key, v)?,
        "patience" => cfg.patience = parse(key, v)?,
        "val_fraction" => cfg.val_fraction = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Apply one setting. `seed` is applied last by the caller and ignored here.
pub fn set(cfg: &mut PipelineConfig, key: &str, v: &str) -> Result<()> {
    let known = match key.split_once('.') {
        None => {
            match key {
                "seed" => {}
                "task" => cfg.task.kind = parse::<TaskKind>(key, v)?,
                "embed_dim" => cfg.embed_dim = parse(key, v)?,
                "hidden_dim" => cfg.hidden_dim = parse(key, v)?,
                "horizon" => cfg.horizon = parse(key, v)?,
                "alpha" => cfg.alpha = parse(key, v)?,
                "decode" => cfg.decode = parse(key, v)?,
                _ => return Err(unknown(key)),
            }
            true
        }
        Some(("tf", f)) => tf_key(&mut cfg.tf, f, key, v)?,
        Some(("self_train", f)) => tf_key(&mut cfg.self_train, f, key, v)?,
        Some(("rl", f)) => {
            let rl = &mut cfg.rl;
            match f {
                "updates" => rl.updates = parse(key, v)?,
                "k" | "sync_period" => rl.sync_period = parse(key, v)?,
                "lr" => rl.lr = parse(key, v)?,
                "batch_size" => rl.batch_size = parse(key, v)?,
                "rho_cap" => rl.rho_cap = optional(key, v)?,
                "temperature" => rl.temperature = parse(key, v)?,
                "eval_every" => rl.eval_every = parse(key, v)?,
                "eval_decode" => rl.eval_decode = parse(key, v)?,
                _ => return Err(unknown(key)),
            }
            true
        }
        Some(("regressor", f)) => {
            let r = &mut cfg.regressor;
            match f {
                "hypotheses" => r.hypotheses = parse(key, v)?,
                "epochs" => r.epochs = parse(key, v)?,
                "lr" => r.lr = parse(key, v)?,
                "batch_size" => r.batch_size = parse(key, v)?,
                "temperature" => r.temperature = parse(key, v)?,
                "val_fraction" => r.val_fraction = parse(key, v)?,
                _ => return Err(unknown(key)),
            }
            true
        }
        Some(("shaping", f)) => {
            match f {
                "scale" => cfg.shaping.scale = optional(key, v)?,
                "clip" => {
                    cfg.shaping.clip = match v {
                        "none" => None,
                        _ => {
                            let (lo, hi) = v
                                .split_once(',')
                                .ok_or_else(|| Error::InvalidConfig(format!("{key} wants lo,hi or none")))?;
                            Some((parse(key, lo.trim())?, parse(key, hi.trim())?))
                        }
                    }
                }
                _ => return Err(unknown(key)),
            }
            true
        }
        Some(("task", f)) => {
            let t = &mut cfg.task;
            match f {
                "data_tokens" => t.data_tokens = parse(key, v)?,
                "min_len" => t.min_len = parse(key, v)?,
                "max_len" => t.max_len = parse(key, v)?,
                "class_size" => t.class_size = parse(key, v)?,
                "rot" => t.rot = parse(key, v)?,
                "n_parallel" => t.n_parallel = parse(key, v)?,
                "n_nonparallel" => t.n_nonparallel = parse(key, v)?,
                "n_test" => t.n_test = parse(key, v)?,
                _ => return Err(unknown(key)),
            }
            true
        }
        Some(_) => false,
    };
    if known {
        Ok(())
    } else {
        Err(unknown(key))
    }
}

fn unknown(key: &str) -> Error {
    Error::InvalidConfig(format!("unknown config key {key:?}"))
}

/// Settings read from a file, in order.
pub fn read_file(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg: "expected key = value".into(),
        })?;
        out.push((i + 1, k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

/// Resolve the configuration for a run on `kind`.
pub fn resolve(
    kind: TaskKind,
    file: Option<&Path>,
    sets: &[String],
    seed_flag: Option<u64>,
) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::new(kind);
    let mut seed = 0;
    if let Some(path) = file {
        for (line, k, v) in read_file(path)? {
            set(&mut cfg, &k, &v).map_err(|e| Error::Parse {
                path: path.into(),
                line,
                msg: e.to_string(),
            })?;
            if k == "seed" {
                seed = parse(&k, &v)?;
            }
        }
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set wants KEY=VALUE, got {s:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        set(&mut cfg, k, v)?;
        if k == "seed" {
            seed = parse(k, v)?;
        }
    }
    if cfg.task.kind != kind {
        return Err(Error::InvalidConfig(format!(
            "configuration names task {} but the data holds {}",
            cfg.task.kind.name(),
            kind.name()
        )));
    }
    let cfg = cfg.with_seed(seed_flag.unwrap_or(seed));
    cfg.tf.validate()?;
    cfg.self_train.validate()?;
    cfg.rl.validate()?;
    cfg.shaping.validate()?;
    Ok(cfg)
}
