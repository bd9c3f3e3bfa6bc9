//! Run configuration and the train/evaluate pipeline shared by the command
//! line and the acceptance experiments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::bleu::{corpus_bleu_owned, BleuConfig};
use crate::corpus::{build_vocab, generate, splitmix64, ParallelCorpus, Split, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::inference::{evaluate_policies, translate, ModelRewriter, PolicyReport, StoppingPolicy};
use crate::model::{Backbone, Model, ModelConfig};
use crate::pgd::{train, EpochMetrics, NeuralModels, RhoSchedule, TrainerConfig, TrainerState};
use crate::tensor::{read_checkpoint, write_checkpoint, RmsPropConfig};
use crate::vocab::Vocabulary;

pub type Pairs = Vec<(Vec<String>, Vec<String>)>;

/// Flat `key = value` configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub pairs: usize,
    pub task_vocab: usize,
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Load this corpus instead of generating one.
    pub corpus: Option<PathBuf>,
    pub backbone: Backbone,
    pub hidden: usize,
    pub share: bool,
    pub copy: bool,
    pub rho: RhoSchedule,
    pub delta: f64,
    pub max_k: usize,
    pub expected_iters: usize,
    pub batch: usize,
    /// Defaults to `batch * expected_iters`.
    pub capacity: Option<usize>,
    pub epochs: usize,
    pub patience: Option<usize>,
    pub sample_budget: Option<usize>,
    pub lr: f64,
    pub clip: Option<f64>,
    /// One optimizer step per sub-batch of the training list rather than
    /// one per trainer step.
    pub step_per_sub_batch: bool,
    pub beam: usize,
    /// Policy used for test translation; `threshold` uses `delta`.
    pub policy: String,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Variant overrides for the ablation table, each `key=value`.
    pub ablate: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::NoisyReversal,
            pairs: 2000,
            task_vocab: 64,
            noise: 0.15,
            min_len: 4,
            max_len: 10,
            corpus: None,
            backbone: Backbone::Gru,
            hidden: 32,
            share: true,
            copy: true,
            rho: RhoSchedule::Annealed,
            delta: 0.01,
            max_k: 4,
            expected_iters: 3,
            batch: 16,
            capacity: None,
            epochs: 10,
            patience: Some(3),
            sample_budget: None,
            lr: 3e-3,
            clip: Some(5.0),
            step_per_sub_batch: false,
            beam: 4,
            policy: "threshold".into(),
            seed: 1,
            out_dir: None,
            ablate: DEFAULT_ABLATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub const DEFAULT_ABLATIONS: &[&str] = &[
    "share=false",
    "copy=false",
    "rho=0",
    "rho=0.1",
    "rho=1.0",
    "rho=annealed",
    "delta=0",
    "delta=0.01",
    "delta=0.1",
    "max_k=2",
    "max_k=4",
    "max_k=6",
    "max_k=8",
];

/// Keys that only affect translation, so variants touching just these can
/// reuse an already trained model.
const INFERENCE_KEYS: &[&str] = &["delta", "max_k", "beam", "policy", "out_dir", "ablate"];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {v:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// `0` or `none` disable an optional limit.
fn parse_opt<T: std::str::FromStr + PartialEq + Default>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        return Ok(None);
    }
    let n: T = parse_num(key, v)?;
    Ok((n != T::default()).then_some(n))
}

fn parse_rho(v: &str) -> Result<RhoSchedule> {
    if v == "annealed" {
        return Ok(RhoSchedule::Annealed);
    }
    let x = v.strip_prefix("fixed:").unwrap_or(v);
    Ok(RhoSchedule::Fixed(parse_num("rho", x)?))
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".to_string(), |x| x.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => self.task = v.parse()?,
            "pairs" => self.pairs = parse_num(key, v)?,
            "task_vocab" => self.task_vocab = parse_num(key, v)?,
            "noise" => self.noise = parse_num(key, v)?,
            "min_len" => self.min_len = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "corpus" => self.corpus = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "backbone" => self.backbone = v.parse()?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "share" => self.share = parse_bool(key, v)?,
            "copy" => self.copy = parse_bool(key, v)?,
            "rho" => self.rho = parse_rho(v)?,
            "delta" => self.delta = parse_num(key, v)?,
            "max_k" => self.max_k = parse_num(key, v)?,
            "expected_iters" => self.expected_iters = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "capacity" => self.capacity = parse_opt(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_opt(key, v)?,
            "sample_budget" => self.sample_budget = parse_opt(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "clip" => self.clip = parse_opt(key, v)?,
            "update" => {
                self.step_per_sub_batch = match v {
                    "step" => false,
                    "sub-batch" => true,
                    _ => {
                        return Err(Error::Config(format!(
                            "update: expected step or sub-batch, got {v:?}"
                        )))
                    }
                }
            }
            "beam" => self.beam = parse_num(key, v)?,
            "policy" => {
                StoppingPolicy::parse(v, 0.0, 1)?;
                self.policy = v.to_string();
            }
            "seed" => self.seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "ablate" => {
                self.ablate = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
                for a in &self.ablate {
                    if !a.contains('=') {
                        return Err(Error::Config(format!("ablation {a:?} is not key=value")));
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        self.model_config(0).validate()?;
        self.trainer_config().validate()?;
        self.test_policy()?.validate()?;
        if self.pairs == 0 {
            return Err(Error::Config("pairs must be at least 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// Serialises every key, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let rho = match self.rho {
            RhoSchedule::Annealed => "annealed".to_string(),
            RhoSchedule::Fixed(x) => format!("fixed:{x}"),
        };
        vec![
            ("task", self.task.to_string()),
            ("pairs", self.pairs.to_string()),
            ("task_vocab", self.task_vocab.to_string()),
            ("noise", self.noise.to_string()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            (
                "corpus",
                self.corpus
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string()),
            ),
            ("backbone", self.backbone.to_string()),
            ("hidden", self.hidden.to_string()),
            ("share", self.share.to_string()),
            ("copy", self.copy.to_string()),
            ("rho", rho),
            ("delta", self.delta.to_string()),
            ("max_k", self.max_k.to_string()),
            ("expected_iters", self.expected_iters.to_string()),
            ("batch", self.batch.to_string()),
            ("capacity", fmt_opt(&self.capacity)),
            ("epochs", self.epochs.to_string()),
            ("patience", fmt_opt(&self.patience)),
            ("sample_budget", fmt_opt(&self.sample_budget)),
            ("lr", self.lr.to_string()),
            ("clip", fmt_opt(&self.clip)),
            (
                "update",
                if self.step_per_sub_batch {
                    "sub-batch"
                } else {
                    "step"
                }
                .to_string(),
            ),
            ("beam", self.beam.to_string()),
            ("policy", self.policy.clone()),
            ("seed", self.seed.to_string()),
            (
                "out_dir",
                self.out_dir
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string()),
            ),
            ("ablate", self.ablate.join(",")),
        ]
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_root(self.seed)
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            vocab_size: self.task_vocab,
            min_len: self.min_len,
            max_len: self.max_len,
            noise: self.noise,
            seed: self.seeds().data,
        }
    }

    pub fn model_config(&self, max_positions: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            hidden: self.hidden,
            share_encoders: self.share,
            copy: self.copy,
            max_positions: max_positions.max(ModelConfig::default().max_positions),
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let mut t = TrainerConfig::new(
            self.batch,
            self.expected_iters,
            self.max_k,
            self.seeds().shuffle,
        );
        t.capacity = self.capacity.unwrap_or(self.batch * self.expected_iters);
        t.rho = self.rho;
        t.max_epochs = self.epochs;
        t.patience = self.patience;
        t.sample_budget = self.sample_budget;
        t
    }

    pub fn optimizer(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.lr,
            ..RmsPropConfig::default()
        }
    }

    pub fn test_policy(&self) -> Result<StoppingPolicy> {
        StoppingPolicy::parse(&self.policy, self.delta, self.max_k)
    }

    /// Applies `key=value` overrides on a copy.
    pub fn with_overrides(&self, overrides: &[&str]) -> Result<Self> {
        let mut c = self.clone();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Text identifying everything that influences training.
    fn training_key(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| !INFERENCE_KEYS.contains(k))
            .map(|(k, v)| format!("{k}={v};"))
            .collect()
    }
}

/// Per-component seeds derived from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub root: u64,
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Self {
            root,
            data: splitmix64(root ^ 0xda7a),
            init: splitmix64(root ^ 0x1417),
            shuffle: splitmix64(root ^ 0x5bf1),
        }
    }

    pub fn header(&self) -> String {
        format!(
            "# seed={} data={} init={} shuffle={}",
            self.root, self.data, self.init, self.shuffle
        )
    }
}

/// The corpus and vocabulary of a run, split three ways.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Pairs,
    pub dev: Pairs,
    pub test: Pairs,
}

fn pairs_of(c: &ParallelCorpus) -> Pairs {
    c.pairs
        .iter()
        .map(|p| (p.src.clone(), p.reference.clone()))
        .collect()
}

impl Dataset {
    /// Splits by pair index; the vocabulary is built from the training part.
    pub fn from_corpus(corpus: &ParallelCorpus) -> Result<Self> {
        let train = corpus.split(Split::Train);
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocab = build_vocab(&train, usize::MAX)?;
        Ok(Self {
            vocab,
            train: pairs_of(&train),
            dev: pairs_of(&corpus.split(Split::Dev)),
            test: pairs_of(&corpus.split(Split::Test)),
        })
    }

    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        let corpus = match &cfg.corpus {
            Some(p) => ParallelCorpus::load(p)?,
            None => generate(&cfg.task_spec(), cfg.pairs)?,
        };
        Self::from_corpus(&corpus)
    }

    /// Longest source or reference over all splits.
    pub fn max_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .map(|(x, y)| x.len().max(y.len()))
            .max()
            .unwrap_or(0)
    }
}

/// Files written into a run directory.
pub struct RunFiles;

impl RunFiles {
    pub const LATEST: &'static str = "latest.ckpt";
    pub const BEST: &'static str = "best.ckpt";
    pub const STATE: &'static str = "trainer_state.json";
    pub const METRICS: &'static str = "metrics.csv";
    pub const CONFIG: &'static str = "config.txt";
    pub const VOCAB: &'static str = "vocab.txt";

    pub fn epoch(e: usize) -> String {
        format!("epoch-{e:03}.ckpt")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: NeuralModels,
    /// Parameters at the epoch with the best dev BLEU.
    pub best: Model,
    pub metrics: Vec<EpochMetrics>,
    pub state: TrainerState,
}

fn fresh_models(cfg: &RunConfig, data: &Dataset) -> Result<NeuralModels> {
    let mc = cfg.model_config(2 * data.max_len() + 4);
    let model = Model::new(mc, data.vocab.clone(), cfg.seeds().init)?;
    Ok(
        NeuralModels::new(model, cfg.optimizer(), cfg.clip, cfg.batch)
            .with_step_per_sub_batch(cfg.step_per_sub_batch),
    )
}

/// Trains in memory with no files written.
pub fn train_in_memory(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut models = fresh_models(cfg, data)?;
    let tc = cfg.trainer_config();
    let mut state = TrainerState::new(&tc);
    let mut best = models.model.clone();
    let metrics = train(
        &tc,
        &data.train,
        &data.dev,
        &mut models,
        &mut state,
        |m, st, row| {
            if st.best_epoch == Some(row.epoch) {
                best = m.model.clone();
            }
            Ok(())
        },
    )?;
    Ok(TrainOutcome {
        models,
        best,
        metrics,
        state,
    })
}

/// Trains with per-epoch checkpoints, trainer state and an append-only
/// metrics log under `dir`. With `resume`, continues from the last
/// completed epoch found there. `stop_after` ends this invocation after that
/// many epochs without marking the run finished.
pub fn train_to_dir(
    cfg: &RunConfig,
    data: &Dataset,
    dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(dir)?;
    let mut tc = cfg.trainer_config();
    let state_path = dir.join(RunFiles::STATE);
    let metrics_path = dir.join(RunFiles::METRICS);
    let (mut models, mut state, mut best, mut metrics) = if resume && state_path.exists() {
        let ck = read_checkpoint(&dir.join(RunFiles::LATEST))?;
        let models = NeuralModels::from_checkpoint(&ck, cfg.optimizer(), cfg.clip, cfg.batch)?
            .with_step_per_sub_batch(cfg.step_per_sub_batch);
        if models.model.vocab() != &data.vocab {
            return Err(Error::VocabMismatch(
                "checkpoint vocabulary differs from the corpus".into(),
            ));
        }
        let state = TrainerState::from_json(&fs::read_to_string(&state_path)?)?;
        let best = match Model::load(&dir.join(RunFiles::BEST)) {
            Ok(m) => m,
            Err(_) => models.model.clone(),
        };
        let rows = read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.epoch < state.epoch)
            .collect::<Vec<_>>();
        (models, state, best, rows)
    } else {
        let models = fresh_models(cfg, data)?;
        let best = models.model.clone();
        (models, TrainerState::new(&tc), best, Vec::new())
    };
    fs::write(
        dir.join(RunFiles::CONFIG),
        format!("{}\n{}", cfg.seeds().header(), cfg.to_text()),
    )?;
    data.vocab.save(&dir.join(RunFiles::VOCAB))?;
    write_metrics(&metrics_path, &cfg.seeds(), &metrics)?;
    if let Some(n) = stop_after {
        tc.max_epochs = tc.max_epochs.min(state.epoch + n);
    }

    let new_rows = train(
        &tc,
        &data.train,
        &data.dev,
        &mut models,
        &mut state,
        |m, st, row| {
            let ck = m.to_checkpoint();
            write_checkpoint(&dir.join(RunFiles::epoch(row.epoch)), &ck)?;
            write_checkpoint(&dir.join(RunFiles::LATEST), &ck)?;
            if st.best_epoch == Some(row.epoch) {
                m.model.save(&dir.join(RunFiles::BEST))?;
                best = m.model.clone();
            }
            let mut f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
            writeln!(f, "{}", row.csv_row())?;
            fs::write(&state_path, st.to_json()?)?;
            Ok(())
        },
    )?;
    metrics.extend(new_rows);
    Ok(TrainOutcome {
        models,
        best,
        metrics,
        state,
    })
}

fn write_metrics(path: &Path, seeds: &Seeds, rows: &[EpochMetrics]) -> Result<()> {
    let mut text = format!("{}\n{}\n", seeds.header(), EpochMetrics::CSV_HEADER);
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parses a metrics log written by [`train_to_dir`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("epoch") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            line: n + 1,
            msg: format!("bad metrics row {line:?}"),
        };
        if f.len() != 9 {
            return Err(bad());
        }
        let u = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        rows.push(EpochMetrics {
            epoch: u(0)?,
            step: u(1)?,
            loss_rewriter: x(2)?,
            loss_evaluator: x(3)?,
            dev_bleu: x(4)?,
            mean_r: x(5)?,
            mean_passes: x(6)?,
            evictions: u(7)?,
            ms_per_sample: x(8)?,
        });
    }
    Ok(rows)
}

/// Test-set result under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub bleu: f64,
    pub mean_k: f64,
}

/// Translates `pairs` with `policy` and reports corpus BLEU.
pub fn test_bleu(
    model: &Model,
    pairs: &[(Vec<String>, Vec<String>)],
    policy: &StoppingPolicy,
    beam: usize,
) -> Result<TestResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let rw = ModelRewriter::new(model, beam);
    let mut cands = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    let mut k_sum = 0;
    for (x, y) in pairs {
        let t = translate(&rw, x, policy, Some(y))?;
        k_sum += t.trace.chosen;
        cands.push(t.tokens);
        refs.push(y.clone());
    }
    Ok(TestResult {
        bleu: corpus_bleu_owned(&cands, &refs, &BleuConfig::unsmoothed())?.value,
        mean_k: k_sum as f64 / pairs.len() as f64,
    })
}

/// Every policy at once from shared traces.
pub fn policy_report(
    model: &Model,
    pairs: &[(Vec<String>, Vec<String>)],
    cfg: &RunConfig,
) -> Result<PolicyReport> {
    evaluate_policies(
        &ModelRewriter::new(model, cfg.beam),
        pairs,
        cfg.max_k,
        cfg.delta,
    )
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub config: RunConfig,
    pub result: TestResult,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "variant,backbone,share,copy,rho,delta,max_k,expected_iters,batch,hidden,policy,seed,test_bleu,mean_k";

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        let rho = match c.rho {
            RhoSchedule::Annealed => "annealed".to_string(),
            RhoSchedule::Fixed(x) => x.to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.4}",
            self.variant,
            c.backbone,
            c.share,
            c.copy,
            rho,
            c.delta,
            c.max_k,
            c.expected_iters,
            c.batch,
            c.hidden,
            c.policy,
            c.seed,
            self.result.bleu,
            self.result.mean_k
        )
    }
}

/// Trains the base configuration and every variant, evaluating each on
/// the test split. Variants that change only translation settings, or
/// that train identically to an earlier row, reuse that model.
pub fn ablate(cfg: &RunConfig, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let data = Dataset::for_config(cfg)?;
    let mut trained: BTreeMap<String, Model> = BTreeMap::new();
    let mut rows = Vec::new();
    let variants = std::iter::once("base".to_string()).chain(cfg.ablate.iter().cloned());
    for name in variants {
        let vc = if name == "base" {
            cfg.clone()
        } else {
            cfg.with_overrides(&[name.as_str()])?
        };
        let key = vc.training_key();
        if !trained.contains_key(&key) {
            let out = train_in_memory(&vc, &data)?;
            trained.insert(key.clone(), out.best);
        }
        let result = test_bleu(&trained[&key], &data.test, &vc.test_policy()?, vc.beam)?;
        let row = AblationRow {
            variant: name,
            config: vc,
            result,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_reads_keys_and_comments() {
        let text = "# toy\nhidden = 16 # half size\nshare=false\nrho = fixed:0.5\npatience = 0\n\nablate = copy=false, rho=0\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.hidden, 16);
        assert!(!c.share);
        assert_eq!(c.rho, RhoSchedule::Fixed(0.5));
        assert_eq!(c.patience, None);
        assert_eq!(c.ablate, vec!["copy=false", "rho=0"]);
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig {
            capacity: Some(20),
            rho: RhoSchedule::Fixed(0.1),
            corpus: Some(PathBuf::from("data/x.jsonl")),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match RunConfig::parse("hidden = 32\nbogus = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("capacity = 100\n").is_err());
        assert!(RunConfig::parse("hidden = 31\n").is_err());
        assert!(RunConfig::parse("policy = sometimes\n").is_err());
        assert!(RunConfig::parse("just text\n").is_err());
    }

    #[test]
    fn seeds_differ_per_component() {
        let s = Seeds::from_root(5);
        assert_ne!(s.data, s.init);
        assert_ne!(s.init, s.shuffle);
        assert_eq!(s, Seeds::from_root(5));
    }

    #[test]
    fn inference_keys_do_not_change_training_key() {
        let c = RunConfig::default();
        let d = c.with_overrides(&["delta=0.1", "max_k=8"]).unwrap();
        assert_eq!(c.training_key(), d.training_key());
        let e = c.with_overrides(&["copy=false"]).unwrap();
        assert_ne!(c.training_key(), e.training_key());
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let row = EpochMetrics {
            epoch: 2,
            step: 30,
            loss_rewriter: 1.5,
            loss_evaluator: 0.25,
            dev_bleu: 0.5,
            mean_r: 0.125,
            mean_passes: 1.5,
            evictions: 4,
            ms_per_sample: 2.0,
        };
        write_metrics(&p, &Seeds::from_root(1), std::slice::from_ref(&row)).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), vec![row]);
    }
}
