//! Prioritized gradient descent: rewriter and evaluator are trained jointly
//! while a capacity-bounded queue keeps poorly rewritten samples around for
//! further passes.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bleu::{corpus_bleu_owned, sentence_bleu, BleuConfig};
use crate::corpus::splitmix64;
use crate::error::{Error, Result};
use crate::inference::{translate, ModelRewriter, Pass, Rewriter, StoppingPolicy};
use crate::model::{hinge_loss, Model};
use crate::tensor::{Checkpoint, Gradients, Graph, RmsProp, RmsPropConfig};

/// A sample in the queue together with its latest draft.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteState {
    pub x: Vec<String>,
    pub y: Vec<String>,
    pub z: Vec<String>,
    /// Quality score; `-inf` until the first pass.
    pub r: f64,
    /// Evaluator score of `z`; `-inf` until the first pass.
    pub q: f64,
    pub passes_done: usize,
}

impl RewriteState {
    pub fn fresh(x: Vec<String>, y: Vec<String>) -> Self {
        Self {
            x,
            y,
            z: Vec::new(),
            r: f64::NEG_INFINITY,
            q: f64::NEG_INFINITY,
            passes_done: 0,
        }
    }
}

/// Serialisable form of [`RewriteState`]; infinite scores become `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredState {
    x: Vec<String>,
    y: Vec<String>,
    z: Vec<String>,
    r: Option<f64>,
    q: Option<f64>,
    passes_done: usize,
}

impl From<&RewriteState> for StoredState {
    fn from(s: &RewriteState) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            x: s.x.clone(),
            y: s.y.clone(),
            z: s.z.clone(),
            r: finite(s.r),
            q: finite(s.q),
            passes_done: s.passes_done,
        }
    }
}

impl From<StoredState> for RewriteState {
    fn from(s: StoredState) -> Self {
        Self {
            x: s.x,
            y: s.y,
            z: s.z,
            r: s.r.unwrap_or(f64::NEG_INFINITY),
            q: s.q.unwrap_or(f64::NEG_INFINITY),
            passes_done: s.passes_done,
        }
    }
}

/// Entries ordered by ascending `r`, ties by insertion order. Overflow is
/// removed from the high end; among equal `r` the later insertion goes
/// first.
#[derive(Debug, Clone, PartialEq)]
pub struct PrioritySampleQueue {
    capacity: usize,
    entries: Vec<(RewriteState, u64)>,
    next_seq: u64,
}

impl PrioritySampleQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// States in queue order.
    pub fn iter(&self) -> impl Iterator<Item = &RewriteState> {
        self.entries.iter().map(|(s, _)| s)
    }

    /// Inserts without enforcing the capacity.
    pub fn push(&mut self, state: RewriteState) {
        let at = self
            .entries
            .partition_point(|(s, _)| s.r.total_cmp(&state.r).is_le());
        self.entries.insert(at, (state, self.next_seq));
        self.next_seq += 1;
    }

    /// Removes entries beyond the capacity, highest `r` first.
    pub fn evict_overflow(&mut self) -> Vec<RewriteState> {
        let mut evicted = Vec::new();
        while self.entries.len() > self.capacity {
            evicted.push(self.entries.pop().expect("non-empty").0);
        }
        evicted
    }

    pub fn push_with_eviction(&mut self, state: RewriteState) -> Vec<RewriteState> {
        self.push(state);
        self.evict_overflow()
    }

    pub fn into_states(self) -> Vec<RewriteState> {
        self.entries.into_iter().map(|(s, _)| s).collect()
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        let states: Vec<StoredState> = self.iter().map(StoredState::from).collect();
        Ok(serde_json::json!({ "capacity": self.capacity, "entries": states }))
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let capacity = value["capacity"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("queue capacity missing".into()))?
            as usize;
        let states: Vec<StoredState> = serde_json::from_value(value["entries"].clone())?;
        let mut q = Self::new(capacity);
        for s in states {
            q.push(s.into());
        }
        Ok(q)
    }
}

/// Weight of the evaluator score in the quality score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoSchedule {
    /// `e / (e + 10)` for epoch `e` (counting from 0).
    Annealed,
    Fixed(f64),
}

impl RhoSchedule {
    pub fn value(&self, epoch: usize) -> f64 {
        match *self {
            RhoSchedule::Annealed => rho_schedule(epoch),
            RhoSchedule::Fixed(v) => v,
        }
    }
}

pub fn rho_schedule(epoch: usize) -> f64 {
    epoch as f64 / (epoch as f64 + 10.0)
}

/// `r = BLEU(z, y) + rho * q` with smoothed sentence BLEU.
pub fn quality_score(z: &[String], y: &[String], q: f64, rho: f64) -> Result<f64> {
    let bleu = sentence_bleu(z, y, &BleuConfig::default())?.value;
    Ok(if rho == 0.0 { bleu } else { bleu + rho * q })
}

/// One element of the training list: the pre-rewrite draft, the rewrite it
/// produced, and that rewrite's score.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub x: Vec<String>,
    pub y: Vec<String>,
    pub z_prev: Vec<String>,
    pub z_new: Vec<String>,
    pub q_new: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    /// Mean per-sample rewriter loss.
    pub loss_rewriter: f64,
    /// Mean per-sample hinge loss.
    pub loss_evaluator: f64,
}

/// Models trainable by [`pgd_epoch_step`].
pub trait PgdModels: Rewriter {
    fn update(&mut self, samples: &[TrainingSample]) -> Result<UpdateStats>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub queue: PrioritySampleQueue,
    pub training: Vec<TrainingSample>,
    pub evicted: Vec<RewriteState>,
    /// Samples dropped after reaching the pass limit.
    pub retired: Vec<RewriteState>,
    pub stats: UpdateStats,
}

/// One iteration of the training loop: enqueue the batch as fresh samples,
/// drop overflow, rewrite and score every queued sample once, update both
/// models on the collected list, and return the re-scored queue. Samples
/// that have now been rewritten `max_passes` times are not re-queued.
pub fn pgd_epoch_step<M: PgdModels + ?Sized>(
    mut queue: PrioritySampleQueue,
    batch: &[(Vec<String>, Vec<String>)],
    models: &mut M,
    rho: f64,
    max_passes: Option<usize>,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    for (x, y) in batch {
        queue.push(RewriteState::fresh(x.clone(), y.clone()));
    }
    let evicted = queue.evict_overflow();
    let mut next = PrioritySampleQueue::new(queue.capacity());
    let mut training = Vec::with_capacity(queue.len());
    let mut retired = Vec::new();
    for state in queue.into_states() {
        let Pass { tokens, q, .. } = models.pass(&state.x, &state.z)?;
        let r = quality_score(&tokens, &state.y, q, rho)?;
        training.push(TrainingSample {
            x: state.x.clone(),
            y: state.y.clone(),
            z_prev: state.z,
            z_new: tokens.clone(),
            q_new: q,
        });
        let done = RewriteState {
            x: state.x,
            y: state.y,
            z: tokens,
            r,
            q,
            passes_done: state.passes_done + 1,
        };
        if max_passes.is_some_and(|k| done.passes_done >= k) {
            retired.push(done);
        } else {
            next.push(done);
        }
    }
    let stats = models.update(&training)?;
    Ok(StepOutcome {
        queue: next,
        training,
        evicted,
        retired,
        stats,
    })
}

/// Neural rewriter and evaluator with an RMSProp optimizer. Training
/// rewrites decode greedily.
#[derive(Debug, Clone)]
pub struct NeuralModels {
    pub model: Model,
    pub optimizer: RmsProp,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Samples per gradient accumulation chunk.
    pub sub_batch: usize,
    /// Take an optimizer step after every chunk instead of once per call.
    pub step_per_sub_batch: bool,
}

impl NeuralModels {
    pub fn new(
        model: Model,
        optim: RmsPropConfig,
        clip_norm: Option<f64>,
        sub_batch: usize,
    ) -> Self {
        let optimizer = RmsProp::new(optim, model.params());
        Self {
            model,
            optimizer,
            clip_norm,
            sub_batch: sub_batch.max(1),
            step_per_sub_batch: false,
        }
    }

    pub fn with_step_per_sub_batch(mut self, on: bool) -> Self {
        self.step_per_sub_batch = on;
        self
    }

    fn apply(&mut self, mut grads: Gradients, n: usize) -> Result<()> {
        grads.scale(1.0 / n as f64);
        if let Some(limit) = self.clip_norm {
            grads.clip_global_norm(limit);
        }
        self.optimizer.step(self.model.params_mut(), &grads)
    }

    /// Gradients of the summed rewriter and hinge losses of one sample.
    pub fn sample_gradients(&self, s: &TrainingSample) -> Result<(Gradients, f64, f64)> {
        let m = &self.model;
        let mut g = Graph::new(m.params());
        let enc = m.encode(&mut g, &s.x, &s.z_prev)?;
        let rw = m.rewrite_loss(&mut g, &enc, &s.y);
        let gold = m.encode(&mut g, &s.x, &s.y)?;
        let q_star = m.score(&mut g, &gold);
        let draft = m.encode(&mut g, &s.x, &s.z_new)?;
        let q_k = m.score(&mut g, &draft);
        let ev = hinge_loss(&mut g, q_star, q_k);
        let total = g.add(rw, ev);
        g.backward(total)?;
        Ok((g.param_grads(), g.scalar(rw), g.scalar(ev)))
    }

    /// Model tensors plus optimizer state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.tensors
            .extend(self.optimizer.state_tensors(self.model.params()));
        ck
    }

    pub fn from_checkpoint(
        ck: &Checkpoint,
        optim: RmsPropConfig,
        clip_norm: Option<f64>,
        sub_batch: usize,
    ) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let mut nm = Self::new(model, optim, clip_norm, sub_batch);
        nm.optimizer.load_state(nm.model.params(), &ck.tensors)?;
        Ok(nm)
    }
}

impl Rewriter for NeuralModels {
    fn pass(&self, x: &[String], z_prev: &[String]) -> Result<Pass> {
        ModelRewriter::new(&self.model, 1).pass(x, z_prev)
    }
}

impl PgdModels for NeuralModels {
    /// Accumulates gradients over all samples in chunks of `sub_batch`,
    /// averages them, and applies a single optimizer step, or one step per
    /// chunk when `step_per_sub_batch` is set.
    fn update(&mut self, samples: &[TrainingSample]) -> Result<UpdateStats> {
        if samples.is_empty() {
            return Ok(UpdateStats::default());
        }
        let mut grads = Gradients::zeros_like(self.model.params());
        let (mut rw, mut ev) = (0.0, 0.0);
        for chunk in samples.chunks(self.sub_batch) {
            for s in chunk {
                let (gs, a, b) = self.sample_gradients(s)?;
                grads.accumulate(&gs);
                rw += a;
                ev += b;
            }
            if self.step_per_sub_batch {
                let full =
                    std::mem::replace(&mut grads, Gradients::zeros_like(self.model.params()));
                self.apply(full, chunk.len())?;
            }
        }
        if !self.step_per_sub_batch {
            self.apply(grads, samples.len())?;
        }
        let n = samples.len() as f64;
        Ok(UpdateStats {
            loss_rewriter: rw / n,
            loss_evaluator: ev / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub expected_iters: usize,
    pub capacity: usize,
    pub rho: RhoSchedule,
    /// Pass limit for a sample during training.
    pub max_passes: Option<usize>,
    pub max_epochs: usize,
    /// Stop after this many epochs without a dev BLEU improvement.
    pub patience: Option<usize>,
    /// Stop once this many training samples have been processed.
    pub sample_budget: Option<usize>,
    pub seed: u64,
    /// Policy used to translate the dev split after each epoch.
    pub dev_policy: StoppingPolicy,
}

impl TrainerConfig {
    /// Capacity `B * E`, annealed rho, patience 3, the same pass limit in
    /// training and for dev translation.
    pub fn new(batch_size: usize, expected_iters: usize, max_passes: usize, seed: u64) -> Self {
        Self {
            batch_size,
            expected_iters,
            capacity: batch_size * expected_iters,
            rho: RhoSchedule::Annealed,
            max_passes: Some(max_passes),
            max_epochs: 10,
            patience: Some(3),
            sample_budget: None,
            seed,
            dev_policy: StoppingPolicy::ArgmaxEvaluator { max_passes },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b, e, c) = (self.batch_size, self.expected_iters, self.capacity);
        if b == 0 || e == 0 {
            return Err(Error::Config(
                "batch size and expected iterations must be at least 1".into(),
            ));
        }
        if c < b || c > b * e {
            return Err(Error::Config(format!(
                "capacity {c} must lie in [B, B*E] = [{b}, {}]",
                b * e
            )));
        }
        if self.max_passes == Some(0) {
            return Err(Error::Config("max passes must be at least 1".into()));
        }
        if let RhoSchedule::Fixed(v) = self.rho {
            if !v.is_finite() {
                return Err(Error::Config("rho must be finite".into()));
            }
        }
        self.dev_policy.validate()
    }
}

/// Per-epoch metrics; one CSV row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss_rewriter: f64,
    pub loss_evaluator: f64,
    pub dev_bleu: f64,
    /// Mean quality score of the samples rewritten this epoch.
    pub mean_r: f64,
    /// Mean pass count of the samples rewritten this epoch, after the pass.
    pub mean_passes: f64,
    pub evictions: usize,
    pub ms_per_sample: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str =
        "epoch,step,loss_rewriter,loss_evaluator,dev_bleu,mean_r,mean_passes,evictions,ms_per_sample";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.4},{},{:.4}",
            self.epoch,
            self.step,
            self.loss_rewriter,
            self.loss_evaluator,
            self.dev_bleu,
            self.mean_r,
            self.mean_passes,
            self.evictions,
            self.ms_per_sample
        )
    }

    /// The row without the wall-clock column, for reproducibility checks.
    pub fn deterministic_part(&self) -> String {
        let row = self.csv_row();
        row[..row.rfind(',').expect("csv row")].to_string()
    }
}

/// Everything needed to continue training after an interruption.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub processed: usize,
    pub best_dev: f64,
    pub best_epoch: Option<usize>,
    pub epochs_without_improvement: usize,
    pub finished: bool,
    pub queue: PrioritySampleQueue,
}

impl TrainerState {
    pub fn new(config: &TrainerConfig) -> Self {
        Self {
            epoch: 0,
            step: 0,
            processed: 0,
            best_dev: f64::NEG_INFINITY,
            best_epoch: None,
            epochs_without_improvement: 0,
            finished: false,
            queue: PrioritySampleQueue::new(config.capacity),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "processed": self.processed,
            "best_dev": self.best_dev.is_finite().then_some(self.best_dev),
            "best_epoch": self.best_epoch,
            "epochs_without_improvement": self.epochs_without_improvement,
            "finished": self.finished,
            "queue": self.queue.to_json()?,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let int = |k: &str| {
            v[k].as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| Error::Checkpoint(format!("trainer state field {k}")))
        };
        Ok(Self {
            epoch: int("epoch")?,
            step: int("step")?,
            processed: int("processed")?,
            best_dev: v["best_dev"].as_f64().unwrap_or(f64::NEG_INFINITY),
            best_epoch: v["best_epoch"].as_u64().map(|n| n as usize),
            epochs_without_improvement: int("epochs_without_improvement")?,
            finished: v["finished"].as_bool().unwrap_or(false),
            queue: PrioritySampleQueue::from_json(&v["queue"])?,
        })
    }
}

/// Corpus BLEU of translating every dev pair under `policy`.
pub fn dev_bleu<R: Rewriter + ?Sized>(
    rewriter: &R,
    dev: &[(Vec<String>, Vec<String>)],
    policy: &StoppingPolicy,
) -> Result<f64> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let mut cands = Vec::with_capacity(dev.len());
    let mut refs = Vec::with_capacity(dev.len());
    for (x, y) in dev {
        cands.push(translate(rewriter, x, policy, Some(y))?.tokens);
        refs.push(y.clone());
    }
    Ok(corpus_bleu_owned(&cands, &refs, &BleuConfig::unsmoothed())?.value)
}

/// Runs epochs until the epoch budget, the sample budget, or the patience
/// limit is reached. Only the last two mark the state finished, so a run
/// cut short by `max_epochs` can be continued with a larger budget. `on_epoch` sees the models, the updated state and the
/// epoch's metrics, and may persist them.
pub fn train<M, F>(
    config: &TrainerConfig,
    train_pairs: &[(Vec<String>, Vec<String>)],
    dev_pairs: &[(Vec<String>, Vec<String>)],
    models: &mut M,
    state: &mut TrainerState,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    M: PgdModels + ?Sized,
    F: FnMut(&M, &TrainerState, &EpochMetrics) -> Result<()>,
{
    config.validate()?;
    if train_pairs.len() < config.batch_size {
        return Err(Error::Contract(format!(
            "{} training pairs for batch size {}",
            train_pairs.len(),
            config.batch_size
        )));
    }
    let mut log = Vec::new();
    while !state.finished && state.epoch < config.max_epochs {
        let epoch = state.epoch;
        let rho = config.rho.value(epoch);
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ splitmix64(epoch as u64)));
        order.shuffle(&mut rng);

        let started = Instant::now();
        let (mut rw, mut ev, mut n) = (0.0, 0.0, 0usize);
        let (mut r_sum, mut r_count, mut passes_sum, mut passes_count, mut evictions) =
            (0.0, 0usize, 0usize, 0usize, 0);
        let processed_before = state.processed;
        let mut budget_hit = false;
        for idx in order.chunks_exact(config.batch_size) {
            if config.sample_budget.is_some_and(|b| state.processed >= b) {
                budget_hit = true;
                break;
            }
            let batch: Vec<_> = idx.iter().map(|&i| train_pairs[i].clone()).collect();
            let queue =
                std::mem::replace(&mut state.queue, PrioritySampleQueue::new(config.capacity));
            let out = pgd_epoch_step(queue, &batch, models, rho, config.max_passes)?;
            let k = out.training.len();
            rw += out.stats.loss_rewriter * k as f64;
            ev += out.stats.loss_evaluator * k as f64;
            n += k;
            evictions += out.evicted.len();
            for s in out.queue.iter().chain(&out.retired) {
                if s.r.is_finite() {
                    r_sum += s.r;
                    r_count += 1;
                }
                passes_sum += s.passes_done;
                passes_count += 1;
            }
            state.queue = out.queue;
            state.processed += k;
            state.step += 1;
        }
        let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        let dev = dev_bleu(models, dev_pairs, &config.dev_policy)?;
        let processed = state.processed - processed_before;
        let metrics = EpochMetrics {
            epoch,
            step: state.step,
            loss_rewriter: if n > 0 { rw / n as f64 } else { 0.0 },
            loss_evaluator: if n > 0 { ev / n as f64 } else { 0.0 },
            dev_bleu: dev,
            mean_r: if r_count > 0 {
                r_sum / r_count as f64
            } else {
                0.0
            },
            mean_passes: if passes_count > 0 {
                passes_sum as f64 / passes_count as f64
            } else {
                0.0
            },
            evictions,
            ms_per_sample: if processed > 0 {
                elapsed_ms / processed as f64
            } else {
                0.0
            },
        };
        if dev > state.best_dev {
            state.best_dev = dev;
            state.best_epoch = Some(epoch);
            state.epochs_without_improvement = 0;
        } else {
            state.epochs_without_improvement += 1;
        }
        state.epoch += 1;
        let out_of_patience = config
            .patience
            .is_some_and(|p| state.epochs_without_improvement >= p);
        let budget_done = budget_hit || config.sample_budget.is_some_and(|b| state.processed >= b);
        if out_of_patience || budget_done {
            state.finished = true;
        }
        on_epoch(models, state, &metrics)?;
        log.push(metrics);
    }
    Ok(log)
}
