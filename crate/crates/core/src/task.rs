//! Synthetic parallel/non-parallel tasks and their line-delimited file format.
//!
//! * cipher: every data token `i` maps to `(i + rot) mod n`; one valid target.
//! * synonym: data tokens are grouped into classes of `class_size`; each
//!   token is replaced by a random *other* member of its class, so a source
//!   has many valid targets.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Token, Vocab, BOS, EOS, PAD};
use crate::reward::splitmix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Cipher,
    Synonym,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Cipher => "cipher",
            TaskKind::Synonym => "synonym",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cipher" => Ok(TaskKind::Cipher),
            "synonym" => Ok(TaskKind::Synonym),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub data_tokens: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub class_size: usize,
    pub rot: usize,
    pub n_parallel: usize,
    pub n_nonparallel: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        Self {
            kind,
            data_tokens: 24,
            min_len: 4,
            max_len: 12,
            class_size: 3,
            rot: 1,
            n_parallel: 500,
            n_nonparallel: 5000,
            n_test: 500,
            seed,
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::with_data_tokens(self.data_tokens)
    }

    /// Targets are the source length plus `eos`.
    pub fn max_target_len(&self) -> usize {
        self.max_len + 1
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        self.vocab()?;
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig(format!(
                "length range {}..{} is empty",
                self.min_len, self.max_len
            )));
        }
        if self.max_target_len() > horizon {
            return Err(Error::InvalidConfig(format!(
                "targets of length {} exceed horizon {horizon}",
                self.max_target_len()
            )));
        }
        if self.kind == TaskKind::Synonym
            && (self.class_size == 0 || !self.data_tokens.is_multiple_of(self.class_size))
        {
            return Err(Error::InvalidConfig(format!(
                "{} data tokens cannot be split into classes of {}",
                self.data_tokens, self.class_size
            )));
        }
        Ok(())
    }

    pub fn task_vocab(&self) -> Result<TaskVocab> {
        let vocab = self.vocab()?;
        let n = self.data_tokens;
        let (rot, classes) = match self.kind {
            TaskKind::Cipher => (Some(self.rot % n), None),
            TaskKind::Synonym => {
                let classes = (0..n / self.class_size)
                    .map(|c| {
                        (0..self.class_size)
                            .map(|k| vocab.data(c * self.class_size + k))
                            .collect()
                    })
                    .collect();
                (None, Some(classes))
            }
        };
        Ok(TaskVocab {
            task: self.kind,
            size: vocab.size(),
            bos: BOS,
            eos: EOS,
            pad: PAD,
            data_tokens: n,
            rot,
            classes,
        })
    }
}

/// Sidecar vocabulary description written next to the datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskVocab {
    pub task: TaskKind,
    pub size: usize,
    pub bos: Token,
    pub eos: Token,
    pub pad: Token,
    pub data_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rot: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<Vec<Token>>>,
}

impl TaskVocab {
    pub fn vocab(&self) -> Result<Vocab> {
        let v = Vocab::new(self.size)?;
        if (self.bos, self.eos, self.pad) != (BOS, EOS, PAD) {
            return Err(Error::Schema("reserved ids must be bos=0, eos=1, pad=2".into()));
        }
        if v.data_tokens() != self.data_tokens {
            return Err(Error::Schema("data token count does not match size".into()));
        }
        Ok(v)
    }

    fn class_of(&self, tok: Token) -> Option<&[Token]> {
        self.classes
            .as_ref()?
            .iter()
            .find(|c| c.contains(&tok))
            .map(Vec::as_slice)
    }

    /// Whether `out` is an acceptable rendering of source token `src`.
    pub fn token_ok(&self, src: Token, out: Token) -> bool {
        match self.task {
            TaskKind::Cipher => {
                let n = self.data_tokens as Token;
                let rot = self.rot.unwrap_or(0) as Token;
                src >= 3 && out == (src - 3 + rot) % n + 3
            }
            TaskKind::Synonym => match self.class_of(src) {
                Some(c) if c.len() > 1 => c.contains(&out) && out != src,
                Some(c) => c.contains(&out),
                None => false,
            },
        }
    }

    /// Fraction of source positions rendered correctly (missing or extra
    /// positions count as errors).
    pub fn token_accuracy(&self, source: &[Token], output: &[Token]) -> f64 {
        let out: Vec<Token> = output.iter().copied().filter(|&t| t != EOS).collect();
        let denom = source.len().max(out.len());
        if denom == 0 {
            return 1.0;
        }
        let hits = source
            .iter()
            .zip(&out)
            .filter(|(&s, &o)| self.token_ok(s, o))
            .count();
        hits as f64 / denom as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub src: Vec<Token>,
    /// Target tokens ending in `eos`.
    pub tgt: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceRecord {
    src: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub vocab: TaskVocab,
    pub parallel: Vec<Pair>,
    pub nonparallel: Vec<Vec<Token>>,
    pub test: Vec<Pair>,
}

fn stream(seed: u64, split: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(split)))
}

fn random_source(spec: &TaskSpec, vocab: &Vocab, rng: &mut ChaCha8Rng) -> Vec<Token> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    (0..len)
        .map(|_| vocab.data(rng.gen_range(0..spec.data_tokens)))
        .collect()
}

fn target(spec: &TaskSpec, vocab: &Vocab, src: &[Token], rng: &mut ChaCha8Rng) -> Vec<Token> {
    let n = spec.data_tokens;
    let mut tgt: Vec<Token> = src
        .iter()
        .map(|&t| {
            let i = vocab.data_index(t).expect("data token");
            match spec.kind {
                TaskKind::Cipher => vocab.data((i + spec.rot) % n),
                TaskKind::Synonym => {
                    let s = spec.class_size;
                    let base = i / s * s;
                    if s == 1 {
                        t
                    } else {
                        // Uniform over the other s - 1 members.
                        let k = rng.gen_range(0..s - 1);
                        let k = if base + k >= i { k + 1 } else { k };
                        vocab.data(base + k)
                    }
                }
            }
        })
        .collect();
    tgt.push(EOS);
    tgt
}

fn pairs(spec: &TaskSpec, vocab: &Vocab, count: usize, split: u64) -> Vec<Pair> {
    let mut rng = stream(spec.seed, split);
    (0..count)
        .map(|_| {
            let src = random_source(spec, vocab, &mut rng);
            let tgt = target(spec, vocab, &src, &mut rng);
            Pair { src, tgt }
        })
        .collect()
}

pub fn generate(spec: &TaskSpec) -> Result<Datasets> {
    spec.validate(usize::MAX)?;
    let vocab = spec.vocab()?;
    let parallel = pairs(spec, &vocab, spec.n_parallel, 1);
    let mut rng = stream(spec.seed, 2);
    let nonparallel = (0..spec.n_nonparallel)
        .map(|_| random_source(spec, &vocab, &mut rng))
        .collect();
    let test = pairs(spec, &vocab, spec.n_test, 3);
    Ok(Datasets {
        vocab: spec.task_vocab()?,
        parallel,
        nonparallel,
        test,
    })
}

pub fn gen_cipher(spec: &TaskSpec) -> Result<Datasets> {
    generate(&TaskSpec {
        kind: TaskKind::Cipher,
        ..*spec
    })
}

pub fn gen_synonym(spec: &TaskSpec) -> Result<Datasets> {
    generate(&TaskSpec {
        kind: TaskKind::Synonym,
        ..*spec
    })
}

pub fn split_path(dir: &Path, task: TaskKind, split: &str) -> PathBuf {
    dir.join(format!("{}.{split}.jsonl", task.name()))
}

pub fn vocab_path(dir: &Path, task: TaskKind) -> PathBuf {
    dir.join(format!("{}.vocab.json", task.name()))
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write every split plus the vocabulary sidecar into `dir`. Returns the
/// paths written.
pub fn write_datasets(dir: &Path, data: &Datasets) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let task = data.vocab.task;
    let paths = vec![
        split_path(dir, task, "parallel"),
        split_path(dir, task, "nonparallel"),
        split_path(dir, task, "test"),
        vocab_path(dir, task),
    ];
    write_lines(&paths[0], data.parallel.iter())?;
    write_lines(
        &paths[1],
        data.nonparallel.iter().map(|s| SourceRecord { src: s.clone() }),
    )?;
    write_lines(&paths[2], data.test.iter())?;
    let text = serde_json::to_string_pretty(&data.vocab)?;
    fs::write(&paths[3], text + "\n").map_err(|e| Error::io(&paths[3], e))?;
    Ok(paths)
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn check_sequence(path: &Path, line: usize, vocab: &Vocab, seq: &[Token], target: bool) -> Result<()> {
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let body = if target {
        match seq.split_last() {
            Some((&EOS, body)) => body,
            _ => return Err(bad("target must end with eos".into())),
        }
    } else {
        seq
    };
    for &t in body {
        if !vocab.is_data(t) {
            return Err(bad(format!(
                "token {t} is not a data token of a size-{} vocabulary",
                vocab.size()
            )));
        }
    }
    Ok(())
}

/// Discover which task a directory holds from its vocabulary sidecar.
pub fn detect_task(dir: &Path) -> Result<TaskKind> {
    let found: Vec<TaskKind> = [TaskKind::Cipher, TaskKind::Synonym]
        .into_iter()
        .filter(|&t| vocab_path(dir, t).exists())
        .collect();
    match found.as_slice() {
        [t] => Ok(*t),
        [] => Err(Error::Schema(format!("no *.vocab.json in {}", dir.display()))),
        _ => Err(Error::Schema(format!("several tasks in {}", dir.display()))),
    }
}

/// Read all splits of `task` from `dir`. When `expected` is given the
/// stored vocabulary must match it exactly.
pub fn read_datasets(dir: &Path, task: TaskKind, expected: Option<&TaskVocab>) -> Result<Datasets> {
    let vpath = vocab_path(dir, task);
    let text = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
    let tv: TaskVocab = serde_json::from_str(&text)?;
    if tv.task != task {
        return Err(Error::Schema(format!(
            "{} describes task {:?}",
            vpath.display(),
            tv.task
        )));
    }
    if let Some(exp) = expected {
        if exp != &tv {
            return Err(Error::Schema(format!(
                "vocabulary in {} does not match the run configuration",
                vpath.display()
            )));
        }
    }
    let vocab = tv.vocab()?;

    let ppath = split_path(dir, task, "parallel");
    let parallel: Vec<Pair> = read_lines(&ppath)?;
    let tpath = split_path(dir, task, "test");
    let test: Vec<Pair> = read_lines(&tpath)?;
    for (path, set) in [(&ppath, &parallel), (&tpath, &test)] {
        for (i, p) in set.iter().enumerate() {
            check_sequence(path, i + 1, &vocab, &p.src, false)?;
            check_sequence(path, i + 1, &vocab, &p.tgt, true)?;
        }
    }
    let npath = split_path(dir, task, "nonparallel");
    let records: Vec<SourceRecord> = read_lines(&npath)?;
    for (i, r) in records.iter().enumerate() {
        check_sequence(&npath, i + 1, &vocab, &r.src, false)?;
    }
    Ok(Datasets {
        vocab: tv,
        parallel,
        nonparallel: records.into_iter().map(|r| r.src).collect(),
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            n_parallel: 20,
            n_nonparallel: 30,
            n_test: 10,
            ..TaskSpec::new(kind, 7)
        }
    }

    #[test]
    fn cipher_rotates() {
        let spec = TaskSpec {
            data_tokens: 10,
            ..small(TaskKind::Cipher)
        };
        let vocab = spec.vocab().unwrap();
        let mut rng = stream(0, 0);
        let src = vec![vocab.data(3), vocab.data(4)];
        assert_eq!(
            target(&spec, &vocab, &src, &mut rng),
            vec![vocab.data(4), vocab.data(5), EOS]
        );
        let ident = TaskSpec { rot: 0, ..spec };
        assert_eq!(
            target(&ident, &vocab, &src, &mut rng),
            vec![vocab.data(3), vocab.data(4), EOS]
        );
        let wrap = vec![vocab.data(9)];
        assert_eq!(target(&spec, &vocab, &wrap, &mut rng), vec![vocab.data(0), EOS]);
    }

    #[test]
    fn synonym_stays_in_class() {
        let spec = small(TaskKind::Synonym);
        let vocab = spec.vocab().unwrap();
        let tv = spec.task_vocab().unwrap();
        let src = vec![vocab.data(0), vocab.data(3)];
        let mut seen = std::collections::BTreeSet::new();
        let mut rng = stream(1, 1);
        for _ in 0..200 {
            let t = target(&spec, &vocab, &src, &mut rng);
            assert!([vocab.data(1), vocab.data(2)].contains(&t[0]));
            assert!([vocab.data(4), vocab.data(5)].contains(&t[1]));
            assert_eq!(t[2], EOS);
            seen.insert(t);
        }
        assert_eq!(seen.len(), 4);
        let data = generate(&spec).unwrap();
        for p in &data.parallel {
            assert_eq!(tv.token_accuracy(&p.src, &p.tgt), 1.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(TaskKind::Synonym);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = TaskSpec { seed: 8, ..spec };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn lengths_and_split_sizes() {
        let data = generate(&small(TaskKind::Cipher)).unwrap();
        assert_eq!(data.parallel.len(), 20);
        assert_eq!(data.nonparallel.len(), 30);
        assert_eq!(data.test.len(), 10);
        for s in &data.nonparallel {
            assert!((4..=12).contains(&s.len()));
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [TaskKind::Cipher, TaskKind::Synonym] {
            let data = generate(&small(kind)).unwrap();
            write_datasets(dir.path(), &data).unwrap();
            let back = read_datasets(dir.path(), kind, Some(&data.vocab)).unwrap();
            assert_eq!(back, data);
        }
    }

    #[test]
    fn identical_specs_give_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = small(TaskKind::Synonym);
        let pa = write_datasets(a.path(), &generate(&spec).unwrap()).unwrap();
        let pb = write_datasets(b.path(), &generate(&spec).unwrap()).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let np = fs::read_to_string(&pa[1]).unwrap();
        assert!(!np.contains("tgt"));
    }

    #[test]
    fn nonparallel_with_target_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small(TaskKind::Cipher)).unwrap();
        write_datasets(dir.path(), &data).unwrap();
        let p = split_path(dir.path(), TaskKind::Cipher, "nonparallel");
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("{\"src\":[3,4],\"tgt\":[5,1]}\n");
        fs::write(&p, text).unwrap();
        match read_datasets(dir.path(), TaskKind::Cipher, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 31),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small(TaskKind::Cipher)).unwrap();
        write_datasets(dir.path(), &data).unwrap();
        let other = TaskSpec {
            data_tokens: 12,
            ..small(TaskKind::Cipher)
        }
        .task_vocab()
        .unwrap();
        assert!(matches!(
            read_datasets(dir.path(), TaskKind::Cipher, Some(&other)),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn malformed_line_names_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small(TaskKind::Cipher)).unwrap();
        write_datasets(dir.path(), &data).unwrap();
        let p = split_path(dir.path(), TaskKind::Cipher, "test");
        let mut lines: Vec<String> = fs::read_to_string(&p)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        lines[3] = "{\"src\":[3],\"tgt\":[4]}".into();
        fs::write(&p, lines.join("\n")).unwrap();
        let err = read_datasets(dir.path(), TaskKind::Cipher, None).unwrap_err();
        assert!(err.to_string().contains(":4:"), "{err}");
    }

    #[test]
    fn invalid_specs() {
        let s = TaskSpec {
            data_tokens: 10,
            ..small(TaskKind::Synonym)
        };
        assert!(s.validate(32).is_err());
        assert!(small(TaskKind::Cipher).validate(8).is_err());
        assert!(small(TaskKind::Cipher).validate(32).is_ok());
    }
}
