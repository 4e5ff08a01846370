//! Warm-up on the classification loss, then per-batch alternation between a
//! disentangling step (disentanglers only) and an adaptation step (everything
//! else), with a momentum copy that pseudo-labels the target.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{batch_indices, batch_iter, features_of, Batch, DatasetBundle, Sample};
use crate::distance::{fit_gaussian_stats, source_pair_alpha, AlphaConfig, AlphaMatrix, GaussianStats, KernelConfig};
use crate::error::{Error, Result};
use crate::eval::{branch_confusion, evaluate, EvalOptions};
use crate::losses::{loss_adapt, loss_ce, loss_fcd_total, CpaVariant, LossResult};
use crate::model::{DaNet, ForwardMode, MomentumNet, ParamGroup};
use crate::netcore::Tensor2;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoFcd,
    NoCpa,
    CpaLanguageMmd,
    CpaScl,
    /// `no_fcd` and `no_cpa` together: only classification steps.
    Erm,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoFcd,
        Ablation::NoCpa,
        Ablation::CpaLanguageMmd,
        Ablation::CpaScl,
        Ablation::Erm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoFcd => "no_fcd",
            Ablation::NoCpa => "no_cpa",
            Ablation::CpaLanguageMmd => "cpa_language_mmd",
            Ablation::CpaScl => "cpa_scl",
            Ablation::Erm => "erm",
        }
    }

    pub fn runs_fcd(self) -> bool {
        !matches!(self, Ablation::NoFcd | Ablation::Erm)
    }

    pub fn cpa_variant(self) -> Option<CpaVariant> {
        match self {
            Ablation::Full | Ablation::NoFcd => Some(CpaVariant::ClassAware),
            Ablation::CpaLanguageMmd => Some(CpaVariant::LanguageMmd),
            Ablation::CpaScl => Some(CpaVariant::SupervisedContrastive),
            Ablation::NoCpa | Ablation::Erm => None,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub eta: f64,
    pub gamma: f64,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub batch_size: usize,
    /// Total epochs including the warm-up epoch.
    pub epochs: usize,
    pub seed: u64,
    pub shrinkage: f64,
    pub alpha_subsample: usize,
    pub ablation: Ablation,
    /// Target rows whose pseudo-label confidence is below this are left out of
    /// the alignment term.
    pub pseudo_confidence_threshold: Option<f64>,
    pub deterministic: bool,
    pub optimizer: Optimizer,
    pub kernel: KernelConfig,
    /// Fraction of every source held out for validation.
    pub validation_fraction: f64,
    /// Also log target-test metrics per epoch (diagnostic only).
    pub log_target_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            eta: 0.1,
            gamma: 0.0001,
            lr_encoder: 0.1,
            lr_heads: 0.5,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            shrinkage: 0.1,
            alpha_subsample: 256,
            ablation: Ablation::Full,
            pseudo_confidence_threshold: None,
            deterministic: true,
            optimizer: Optimizer::Sgd,
            kernel: KernelConfig::MedianHeuristic,
            validation_fraction: 0.1,
            log_target_metrics: true,
        }
    }
}

impl TrainConfig {
    /// Settings of the standard synthetic benchmark. A run there has a few
    /// hundred adaptation steps, so the momentum model tracks the live one
    /// faster than the default.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            seed,
            gamma: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.eta >= 0.0) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.lr_encoder > 0.0) || !(self.lr_heads > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return bad(format!("shrinkage must lie in [0, 1], got {}", self.shrinkage));
        }
        if self.alpha_subsample < 2 {
            return bad("alpha_subsample must be >= 2".into());
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction must lie in [0, 0.5], got {}",
                self.validation_fraction
            ));
        }
        if let Some(t) = self.pseudo_confidence_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("pseudo_confidence_threshold must lie in [0, 1], got {t}"));
            }
        }
        self.kernel.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Warmup,
    Fcd,
    Adapt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub kind: StepKind,
    pub loss: f64,
    /// Loss term name to its unweighted value; names the objective that ran.
    pub terms: BTreeMap<String, f64>,
    pub alignment_skipped: bool,
    /// Target rows that entered the alignment term.
    pub pseudo_kept: Option<usize>,
    /// Frozen tensors were compared bit for bit after the update.
    pub frozen_verified: bool,
    pub momentum_updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub warmup: bool,
    pub mean_ce: f64,
    pub mean_fcd: Option<f64>,
    pub mean_cpa: Option<f64>,
    /// Own-branch accuracy on each source's validation split.
    pub source_accuracy: Vec<f64>,
    /// `[i][m]`: source `m` routed through branch `i`.
    pub cross_branch_accuracy: Vec<Vec<f64>>,
    pub target_accuracy: Option<f64>,
    pub target_macro_f1: Option<f64>,
    pub classwise_mmd_mean: Option<Vec<f64>>,
    pub alpha: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub momentum_updates: usize,
    pub freeze_checks: usize,
}

/// Splits every source into (train, validation) with a seeded shuffle.
pub fn split_sources(sources: &[Vec<Sample>], fraction: f64, seed: u64) -> Result<(Vec<Vec<Sample>>, Vec<Vec<Sample>>)> {
    let mut train = Vec::with_capacity(sources.len());
    let mut val = Vec::with_capacity(sources.len());
    for (i, set) in sources.iter().enumerate() {
        let held = (set.len() as f64 * fraction).round() as usize;
        if held == 0 {
            train.push(set.clone());
            val.push(set.clone());
            continue;
        }
        if set.len() - held < 2 {
            return Err(Error::Config(format!("source {i} too small to hold out {held} samples")));
        }
        let order = batch_indices(set.len(), set.len().max(2), rng::derive(seed, &[0x5A11, i as u64]), 0)?
            .concat();
        let (v, t) = order.split_at(held);
        let pick = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            idx.into_iter().map(|j| set[j].clone()).collect::<Vec<_>>()
        };
        train.push(pick(t));
        val.push(pick(v));
    }
    Ok((train, val))
}

/// Per-step source batches for one epoch: `M` batches per step. Sources with
/// fewer batches cycle until the largest source is exhausted.
pub fn source_schedule(train: &[Vec<Sample>], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<Batch>>> {
    let per_source = train
        .iter()
        .enumerate()
        .map(|(i, set)| batch_iter(set, batch_size, rng::derive(seed, &[0x5B, i as u64]), epoch as u64))
        .collect::<Result<Vec<_>>>()?;
    let steps = per_source.iter().map(Vec::len).max().unwrap_or(0);
    Ok((0..steps)
        .map(|s| per_source.iter().map(|b| b[s % b.len()].clone()).collect())
        .collect())
}

/// Dropout stream of a step.
pub fn step_mode(seed: u64, kind: StepKind, epoch: usize, step: usize) -> ForwardMode {
    let tag = match kind {
        StepKind::Warmup => 0x3A,
        StepKind::Fcd => 0xF0,
        StepKind::Adapt => 0xAD,
    };
    ForwardMode::Train {
        seed: rng::derive(seed, &[tag, epoch as u64, step as u64]),
    }
}

pub fn is_encoder(id: &str) -> bool {
    matches!(ParamGroup::of(id), Some(ParamGroup::Encoder))
}

pub fn is_disentangler(id: &str) -> bool {
    ParamGroup::of(id).is_some_and(ParamGroup::is_disentangler)
}

/// Gaussian statistics of every source's eval-mode encodings.
pub fn fit_source_stats(net: &DaNet, sources: &[Vec<Sample>], shrinkage: f64) -> Result<Vec<GaussianStats>> {
    sources
        .iter()
        .map(|s| fit_gaussian_stats(&net.encode(&features_of(s)?, ForwardMode::Eval)?, shrinkage))
        .collect()
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

#[derive(Debug, Clone, Default)]
struct OptState {
    adam: BTreeMap<String, AdamSlot>,
}

/// Seeded target batches that restart with a fresh permutation once exhausted.
#[derive(Debug, Clone)]
struct TargetCursor {
    seed: u64,
    pass: u64,
    batches: Vec<Vec<usize>>,
    next: usize,
}

impl TargetCursor {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            pass: 0,
            batches: Vec::new(),
            next: 0,
        }
    }

    fn next_batch(&mut self, len: usize, batch_size: usize) -> Result<Vec<usize>> {
        if self.next >= self.batches.len() {
            self.batches = batch_indices(len, batch_size, self.seed, self.pass)?;
            self.pass += 1;
            self.next = 0;
        }
        self.next += 1;
        Ok(self.batches[self.next - 1].clone())
    }
}

fn at_step<T>(r: Result<T>, what: &str, epoch: usize, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{what} at epoch {epoch}, step {step}: {msg}")),
        other => other,
    })
}

fn in_epoch<T>(r: Result<T>, epoch: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("statistics refit after epoch {epoch}: {msg}")),
        other => other,
    })
}

fn ensure_finite(loss: &LossResult, what: &str, epoch: usize, step: usize) -> Result<()> {
    if !loss.value.is_finite() {
        return Err(Error::NonFinite(format!(
            "{what} loss is {} at epoch {epoch}, step {step}",
            loss.value
        )));
    }
    if let Some((id, _)) = loss.grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{what} gradient of {id} is not finite at epoch {epoch}, step {step}"
        )));
    }
    Ok(())
}

fn snapshot(net: &DaNet, frozen: impl Fn(&str) -> bool) -> Vec<(String, Vec<u64>)> {
    net.params()
        .into_iter()
        .filter(|p| frozen(&p.id))
        .map(|p| (p.id.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn verify_frozen(net: &DaNet, before: &[(String, Vec<u64>)], frozen: impl Fn(&str) -> bool, what: &str) -> Result<()> {
    let after = snapshot(net, frozen);
    if after.len() != before.len() {
        return Err(Error::Integrity(format!("{what}: frozen tensor set changed")));
    }
    for ((id, a), (_, b)) in before.iter().zip(&after) {
        if a != b {
            return Err(Error::Integrity(format!("{what} modified frozen tensor {id}")));
        }
    }
    Ok(())
}

/// Output of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub net: DaNet,
    pub momentum: Option<MomentumNet>,
    pub log: TrainLog,
    /// Gaussian statistics of the final live model.
    pub stats: Vec<GaussianStats>,
    /// Held-out source samples (the training sources when nothing is held out).
    pub validation: Vec<Vec<Sample>>,
}

/// Training state. `net` always holds the last parameters whose loss and
/// gradients were finite.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: DaNet,
    pub momentum: Option<MomentumNet>,
    pub stats: Vec<GaussianStats>,
    pub momentum_stats: Vec<GaussianStats>,
    pub alpha: Option<AlphaMatrix>,
    pub log: TrainLog,
    pub train_sources: Vec<Vec<Sample>>,
    pub validation: Vec<Vec<Sample>>,
    bundle: DatasetBundle,
    opt: OptState,
    target: TargetCursor,
    epoch: usize,
}

impl Trainer {
    pub fn new(net: DaNet, bundle: &DatasetBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        bundle.validate()?;
        if bundle.num_sources() != net.num_sources() {
            return Err(Error::Contract(format!(
                "bundle has {} sources, model {} branches",
                bundle.num_sources(),
                net.num_sources()
            )));
        }
        if bundle.dim != net.config.input_dim || bundle.num_classes != net.num_classes() {
            return Err(Error::Contract(format!(
                "bundle is {}-dimensional with {} classes, model expects {} and {}",
                bundle.dim,
                bundle.num_classes,
                net.config.input_dim,
                net.num_classes()
            )));
        }
        let (train_sources, validation) = split_sources(&bundle.sources, cfg.validation_fraction, cfg.seed)?;
        Ok(Self {
            target: TargetCursor::new(rng::derive(cfg.seed, &[0x7A])),
            log: TrainLog {
                config: cfg.clone(),
                epochs: Vec::new(),
                steps: Vec::new(),
                momentum_updates: 0,
                freeze_checks: 0,
            },
            cfg,
            net,
            momentum: None,
            stats: Vec::new(),
            momentum_stats: Vec::new(),
            alpha: None,
            train_sources,
            validation,
            bundle: bundle.clone(),
            opt: OptState::default(),
            epoch: 0,
        })
    }

    fn lr(&self, id: &str) -> f64 {
        if is_encoder(id) {
            self.cfg.lr_encoder
        } else {
            self.cfg.lr_heads
        }
    }

    /// Applies `grads` to every tensor accepted by `trainable`; the mask, not
    /// the loss, decides what moves. Nothing is written when any updated value
    /// would be non-finite.
    fn apply(
        &mut self,
        grads: &BTreeMap<String, Tensor2>,
        trainable: impl Fn(&str) -> bool,
        what: &str,
        step: usize,
    ) -> Result<()> {
        let adam = self.cfg.optimizer == Optimizer::Adam;
        let mut staged: BTreeMap<String, (Vec<f64>, Option<AdamSlot>)> = BTreeMap::new();
        for p in self.net.params() {
            if !trainable(&p.id) {
                continue;
            }
            let Some(g) = grads.get(&p.id) else { continue };
            let lr = self.lr(&p.id);
            let mut values = p.value.data().to_vec();
            let mut slot = None;
            if adam {
                let mut s = self.opt.adam.get(&p.id).cloned().unwrap_or_else(|| AdamSlot {
                    m: vec![0.0; g.len()],
                    v: vec![0.0; g.len()],
                    t: 0,
                });
                s.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(s.t);
                let c2 = 1.0 - ADAM_BETA2.powi(s.t);
                for (j, (v, gv)) in values.iter_mut().zip(g.data()).enumerate() {
                    s.m[j] = ADAM_BETA1 * s.m[j] + (1.0 - ADAM_BETA1) * gv;
                    s.v[j] = ADAM_BETA2 * s.v[j] + (1.0 - ADAM_BETA2) * gv * gv;
                    *v -= lr * (s.m[j] / c1) / ((s.v[j] / c2).sqrt() + ADAM_EPS);
                }
                slot = Some(s);
            } else {
                for (v, gv) in values.iter_mut().zip(g.data()) {
                    *v -= lr * gv;
                }
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{what} update of {} is not finite at epoch {}, step {step}",
                    p.id, self.epoch
                )));
            }
            staged.insert(p.id.clone(), (values, slot));
        }
        for p in self.net.params_mut() {
            if let Some((values, slot)) = staged.remove(&p.id) {
                p.value.data_mut().copy_from_slice(&values);
                if let Some(s) = slot {
                    self.opt.adam.insert(p.id.clone(), s);
                }
            }
        }
        Ok(())
    }

    /// Refits the Gaussian statistics of the live and momentum models.
    pub fn refresh_stats(&mut self) -> Result<()> {
        self.stats = fit_source_stats(&self.net, &self.train_sources, self.cfg.shrinkage)?;
        if let Some(m) = &self.momentum {
            self.momentum_stats = fit_source_stats(&m.net, &self.train_sources, self.cfg.shrinkage)?;
        }
        Ok(())
    }

    /// Recomputes the source-pair distances used by the disentangling loss.
    pub fn refresh_alpha(&mut self) -> Result<()> {
        self.alpha = Some(source_pair_alpha(
            &self.net,
            &self.train_sources,
            &AlphaConfig {
                subsample: self.cfg.alpha_subsample,
                seed: rng::derive(self.cfg.seed, &[0xA1, self.epoch as u64]),
                kernel: self.cfg.kernel,
            },
        )?);
        Ok(())
    }

    fn epoch_record(&self, warmup: bool, first_step: usize) -> Result<EpochRecord> {
        let steps = &self.log.steps[first_step..];
        let mean_of = |kind: StepKind, term: &str| {
            let v: Vec<f64> = steps
                .iter()
                .filter(|s| s.kind == kind)
                .filter_map(|s| s.terms.get(term).copied())
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let ce_kind = if warmup { StepKind::Warmup } else { StepKind::Adapt };
        let cpa_name = self.cfg.ablation.cpa_variant().map(CpaVariant::name);
        let confusion = branch_confusion(&self.net, &self.validation)?;
        let (target_accuracy, target_macro_f1, classwise) = if self.cfg.log_target_metrics {
            let r = evaluate(
                &self.net,
                &self.bundle,
                &self.validation,
                &self.stats,
                &EvalOptions {
                    seed: self.cfg.seed,
                    ..EvalOptions::default()
                },
            )?;
            (Some(r.target_accuracy), Some(r.target_macro_f1), Some(r.classwise_mmd_mean))
        } else {
            (None, None, None)
        };
        let m = self.net.num_sources();
        Ok(EpochRecord {
            epoch: self.epoch,
            warmup,
            mean_ce: mean_of(ce_kind, "ce").unwrap_or(0.0),
            mean_fcd: mean_of(StepKind::Fcd, "fcd"),
            mean_cpa: cpa_name.and_then(|n| mean_of(StepKind::Adapt, n)),
            source_accuracy: (0..m).map(|i| confusion[i][i]).collect(),
            cross_branch_accuracy: confusion,
            target_accuracy,
            target_macro_f1,
            classwise_mmd_mean: classwise,
            alpha: self
                .alpha
                .as_ref()
                .map(|a| (0..m).map(|i| a.values.row(i).to_vec()).collect()),
        })
    }

    /// One pass of plain classification updates over every parameter, then
    /// the momentum copy and the Gaussian statistics.
    pub fn warmup_epoch(&mut self) -> Result<EpochRecord> {
        let first = self.log.steps.len();
        let schedule = source_schedule(&self.train_sources, self.cfg.batch_size, self.cfg.seed, self.epoch)?;
        for (step, batches) in schedule.iter().enumerate() {
            let mode = step_mode(self.cfg.seed, StepKind::Warmup, self.epoch, step);
            let loss = at_step(loss_ce(&self.net, batches, mode), "warm-up", self.epoch, step)?;
            ensure_finite(&loss, "warm-up", self.epoch, step)?;
            self.apply(&loss.grads, |_| true, "warm-up", step)?;
            self.log.steps.push(StepRecord {
                epoch: self.epoch,
                step,
                kind: StepKind::Warmup,
                loss: loss.value,
                terms: BTreeMap::from([("ce".to_string(), loss.value)]),
                alignment_skipped: false,
                pseudo_kept: None,
                frozen_verified: false,
                momentum_updated: false,
            });
        }
        self.momentum = Some(MomentumNet::from_live(&self.net, self.cfg.gamma)?);
        in_epoch(self.refresh_stats(), self.epoch)?;
        let rec = self.epoch_record(true, first)?;
        self.log.epochs.push(rec.clone());
        self.epoch += 1;
        Ok(rec)
    }

    /// Disentangling update: only the disentanglers move.
    pub fn fcd_step(&mut self, batches: &[Batch], step: usize) -> Result<StepRecord> {
        let mut rec = StepRecord {
            epoch: self.epoch,
            step,
            kind: StepKind::Fcd,
            loss: 0.0,
            terms: BTreeMap::new(),
            alignment_skipped: false,
            pseudo_kept: None,
            frozen_verified: false,
            momentum_updated: false,
        };
        if !self.cfg.ablation.runs_fcd() {
            return Ok(rec);
        }
        let alpha = self
            .alpha
            .as_ref()
            .ok_or_else(|| Error::State("source distances not computed; run the epoch refresh first".into()))?;
        let mode = step_mode(self.cfg.seed, StepKind::Fcd, self.epoch, step);
        let loss = at_step(loss_fcd_total(&self.net, batches, alpha, mode), "disentangling", self.epoch, step)?;
        ensure_finite(&loss, "disentangling", self.epoch, step)?;
        let frozen = |id: &str| !is_disentangler(id);
        let before = snapshot(&self.net, frozen);
        self.apply(&loss.grads, is_disentangler, "disentangling", step)?;
        verify_frozen(&self.net, &before, frozen, "disentangling step")?;
        self.log.freeze_checks += 1;
        rec.loss = loss.value;
        rec.terms.insert("fcd".into(), loss.value);
        rec.frozen_verified = true;
        Ok(rec)
    }

    /// Adaptation update on everything except the disentanglers, followed by
    /// one momentum update. `target` is an unlabelled target batch.
    pub fn adapt_step(&mut self, batches: &[Batch], target: &Batch, step: usize) -> Result<StepRecord> {
        let mom = self
            .momentum
            .as_ref()
            .ok_or_else(|| Error::State("momentum model missing; run the warm-up epoch first".into()))?;
        let variant = self.cfg.ablation.cpa_variant().filter(|_| self.cfg.eta != 0.0);
        let mut pseudo_kept = None;
        let mut labelled = None;
        if variant.is_some() {
            let pseudo = mom.predict_target(&target.x, &self.momentum_stats)?;
            let keep: Vec<usize> = (0..target.len())
                .filter(|&r| self.cfg.pseudo_confidence_threshold.is_none_or(|t| pseudo.confidences[r] >= t))
                .collect();
            pseudo_kept = Some(keep.len());
            if !keep.is_empty() {
                let labels = keep.iter().map(|&r| pseudo.labels[r]).collect();
                labelled = Some(Batch::labelled(target.x.select_rows(&keep), labels));
            }
        }
        let empty = Batch::labelled(Tensor2::zeros(0, target.x.cols()), Vec::new());
        let mode = step_mode(self.cfg.seed, StepKind::Adapt, self.epoch, step);
        let loss = at_step(
            loss_adapt(
                &self.net,
                batches,
                labelled.as_ref().unwrap_or(&empty),
                self.cfg.eta,
                self.cfg.tau,
                &self.cfg.kernel,
                variant.filter(|_| labelled.is_some()),
                mode,
            ),
            "adaptation",
            self.epoch,
            step,
        )?;
        ensure_finite(&loss.total, "adaptation", self.epoch, step)?;
        let before = snapshot(&self.net, is_disentangler);
        self.apply(&loss.total.grads, |id| !is_disentangler(id), "adaptation", step)?;
        verify_frozen(&self.net, &before, is_disentangler, "adaptation step")?;
        self.log.freeze_checks += 1;
        let mom = self.momentum.as_mut().expect("checked above");
        mom.momentum_update(&self.net)?;
        self.log.momentum_updates += 1;

        let mut terms = BTreeMap::from([("ce".to_string(), loss.ce)]);
        if let (Some(v), Some(a)) = (variant, loss.alignment) {
            terms.insert(v.name().to_string(), a);
        }
        Ok(StepRecord {
            epoch: self.epoch,
            step,
            kind: StepKind::Adapt,
            loss: loss.total.value,
            terms,
            alignment_skipped: variant.is_some() && (labelled.is_none() || loss.alignment_skipped),
            pseudo_kept,
            frozen_verified: true,
            momentum_updated: true,
        })
    }

    /// One alternation epoch: refresh the source distances, then per batch a
    /// disentangling step followed by an adaptation step; statistics are
    /// refitted at the end.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.momentum.is_none() {
            return Err(Error::State("run the warm-up epoch first".into()));
        }
        if self.cfg.ablation.runs_fcd() {
            self.refresh_alpha()?;
        }
        for (step, batches) in self.epoch_schedule()?.iter().enumerate() {
            let rec = self.fcd_step(batches, step)?;
            self.log.steps.push(rec);
            let target = self.next_target_batch()?;
            let rec = self.adapt_step(batches, &target, step)?;
            self.log.steps.push(rec);
        }
        self.finish_epoch()
    }

    /// Index of the epoch in progress (0 is the warm-up).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Source batches of the current epoch, one entry per step.
    pub fn epoch_schedule(&self) -> Result<Vec<Vec<Batch>>> {
        source_schedule(&self.train_sources, self.cfg.batch_size, self.cfg.seed, self.epoch)
    }

    /// The next unlabelled target batch of the cycling target iterator.
    pub fn next_target_batch(&mut self) -> Result<Batch> {
        let idx = self
            .target
            .next_batch(self.bundle.target_train.len(), self.cfg.batch_size)?;
        Batch::from_samples(idx.iter().map(|&r| &self.bundle.target_train[r]))
    }

    /// Refits the statistics, logs the epoch record and advances the epoch.
    /// `run_epoch` is `refresh_alpha`, then per step `fcd_step` and
    /// `adapt_step` on `next_target_batch` (both pushed to the log), then this.
    pub fn finish_epoch(&mut self) -> Result<EpochRecord> {
        let first = self
            .log
            .steps
            .iter()
            .position(|s| s.epoch == self.epoch)
            .unwrap_or(self.log.steps.len());
        in_epoch(self.refresh_stats(), self.epoch)?;
        let rec = self.epoch_record(false, first)?;
        self.log.epochs.push(rec.clone());
        self.epoch += 1;
        Ok(rec)
    }

    /// Warm-up plus the remaining epochs. On error the trainer keeps the last
    /// finite parameters in `net`.
    pub fn run(&mut self) -> Result<()> {
        if self.momentum.is_none() {
            self.warmup_epoch()?;
        }
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn into_output(self) -> FitOutput {
        FitOutput {
            net: self.net,
            momentum: self.momentum,
            log: self.log,
            stats: self.stats,
            validation: self.validation,
        }
    }
}

/// Trains `net` on `bundle`; the final epoch's parameters are returned.
pub fn fit(net: DaNet, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<FitOutput> {
    let mut t = Trainer::new(net, bundle, cfg.clone())?;
    t.run()?;
    Ok(t.into_output())
}

#[cfg(test)]
mod tests;
