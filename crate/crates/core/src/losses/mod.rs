//! Training objectives.
//!
//! Every loss returns a [`LossResult`] whose gradient map holds exactly the
//! loss's trainable set (zero where a tensor does not influence the value):
//!
//! | loss | trainable set |
//! |------|---------------|
//! | cross-entropy | all parameters |
//! | disentangling max / min / total | disentanglers (`branch.i.disentangler.*`) |
//! | class-aware adaptation, per branch | encoder, adaptor and classifier of the branch |
//! | class-aware adaptation, all branches | encoder, adaptors, classifiers |
//! | language-level MMD | encoder, adaptors |
//! | supervised contrastive | encoder, adaptor(s) |
//!
//! A loss with nothing to compare (see [`loss_ca`]) returns value 0, an empty
//! gradient map and `skipped = true`.

use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::Batch;
use crate::distance::{mmd2_on, AlphaMatrix, KernelConfig};
use crate::error::{Error, Result};
use crate::model::{DaNet, ForwardMode, ParamGroup};
use crate::netcore::{Graph, Tensor2, Var};
use crate::rng;

mod verify;

pub use verify::{
    toy_fixture, verify_gradients, verify_losses, Fixture, GradSuiteConfig, LossCheck, LOSS_NAMES,
};

/// Minimum samples of a class on one side for it to enter [`loss_ca`].
pub const MIN_CLASS_COUNT: usize = 2;
/// Stabilizer added to the [`loss_ca`] denominator.
pub const CA_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grads: BTreeMap<String, Tensor2>,
    pub skipped: bool,
}

impl LossResult {
    pub fn skipped() -> Self {
        Self {
            value: 0.0,
            grads: BTreeMap::new(),
            skipped: true,
        }
    }

    /// Adds `weight * other` into `self`. Keys not yet present are inserted.
    pub fn accumulate(&mut self, other: &LossResult, weight: f64) {
        self.value += weight * other.value;
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(mine) => mine.scale_add_assign(g, weight),
                None => {
                    self.grads.insert(id.clone(), g.map(|v| weight * v));
                }
            }
        }
        self.skipped = self.skipped && other.skipped;
    }
}

/// The uniform distribution over `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformTarget {
    pub q: Vec<f64>,
}

impl UniformTarget {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("uniform target needs K >= 1".into()));
        }
        Ok(Self {
            q: vec![1.0 / k as f64; k],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.q.len()
    }
}

/// Dropout stream of the `k`-th encoded batch inside one loss evaluation.
/// Sources use `k = i`, the target batch `k = M`.
pub fn sub_mode(mode: ForwardMode, k: usize) -> ForwardMode {
    match mode {
        ForwardMode::Eval => ForwardMode::Eval,
        ForwardMode::Train { seed } => ForwardMode::Train {
            seed: rng::derive(seed, &[k as u64]),
        },
    }
}

/// Backpropagates `root` and keeps the gradients of `trainable`, zero-filling
/// tensors the value does not depend on.
fn finish(g: &Graph, root: Var, net: &DaNet, trainable: &BTreeSet<String>) -> Result<LossResult> {
    let value = g.value(root).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss value {value}")));
    }
    let mut all = g.backward(root)?.params();
    let mut grads = BTreeMap::new();
    for p in net.params() {
        if trainable.contains(&p.id) {
            let grad = all
                .remove(&p.id)
                .unwrap_or_else(|| Tensor2::zeros(p.value.rows(), p.value.cols()));
            grads.insert(p.id.clone(), grad);
        }
    }
    Ok(LossResult {
        value,
        grads,
        skipped: false,
    })
}

fn ids(net: &DaNet, pred: impl Fn(ParamGroup) -> bool) -> BTreeSet<String> {
    net.ids_where(pred).into_iter().collect()
}

fn check_sources(net: &DaNet, batches: &[Batch], what: &str) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::Contract(format!("{what} needs at least one source batch")));
    }
    if batches.len() != net.num_sources() {
        return Err(Error::Contract(format!(
            "{what} got {} source batches for {} branches",
            batches.len(),
            net.num_sources()
        )));
    }
    if let Some(i) = batches.iter().position(Batch::is_empty) {
        return Err(Error::Contract(format!("{what}: source batch {i} is empty")));
    }
    Ok(())
}

fn check_branch(net: &DaNet, i: usize) -> Result<()> {
    if i >= net.num_sources() {
        return Err(Error::Contract(format!(
            "branch {i} out of range ({} branches)",
            net.num_sources()
        )));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature tau must be > 0, got {tau}")));
    }
    Ok(())
}

/// Sum of `-log softmax(logits)[j, y_j]` over rows.
fn nll_sum(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = g.log_softmax_rows(logits);
    let entries: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let picked = g.gather(ls, &entries)?;
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0))
}

fn add_opt(g: &mut Graph, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        None => v,
        Some(a) => g.add(a, v)?,
    }))
}

/// Encoder outputs of the source batches (and optionally the target batch) on
/// a fresh graph.
struct Encoded {
    g: Graph,
    sources: Vec<Var>,
    target: Option<Var>,
}

fn encode_all(net: &DaNet, batches: &[Batch], target: Option<&Batch>, mode: ForwardMode) -> Result<Encoded> {
    let mut g = Graph::new();
    let mut sources = Vec::with_capacity(batches.len());
    for (i, b) in batches.iter().enumerate() {
        let x = g.constant(b.x.clone());
        sources.push(net.encode_on(&mut g, x, sub_mode(mode, i))?);
    }
    let target = match target {
        Some(t) => {
            let x = g.constant(t.x.clone());
            Some(net.encode_on(&mut g, x, sub_mode(mode, net.num_sources()))?)
        }
        None => None,
    };
    Ok(Encoded { g, sources, target })
}

fn ce_on(g: &mut Graph, net: &DaNet, hs: &[Var], batches: &[Batch]) -> Result<Var> {
    let mut total = None;
    let mut count = 0usize;
    for (i, (h, b)) in hs.iter().zip(batches).enumerate() {
        let labels = b.require_labels("cross-entropy")?;
        let out = net.branch_on(g, i, *h)?;
        let nll = nll_sum(g, out.logits, labels)?;
        total = add_opt(g, total, nll)?;
        count += labels.len();
    }
    let total = total.expect("at least one batch");
    Ok(g.scale(total, 1.0 / count as f64))
}

/// Mean cross-entropy of every source through its own branch, normalized by
/// the total number of samples.
pub fn loss_ce(net: &DaNet, batches: &[Batch], mode: ForwardMode) -> Result<LossResult> {
    check_sources(net, batches, "cross-entropy")?;
    let mut enc = encode_all(net, batches, None, mode)?;
    let root = ce_on(&mut enc.g, net, &enc.sources, batches)?;
    finish(&enc.g, root, net, &ids(net, |_| true))
}

// The disentangling losses never update the encoder, so `h` enters the graph
// as a constant.
fn encode_constant(g: &mut Graph, net: &DaNet, batch: &Batch, mode: ForwardMode) -> Result<Var> {
    let h = net.encode(&batch.x, mode)?;
    Ok(g.constant(h))
}

fn fcd_max_on(g: &mut Graph, net: &DaNet, i: usize, h: Var, labels: &[usize]) -> Result<Var> {
    let out = net.branch_on(g, i, h)?;
    let nll = nll_sum(g, out.logits, labels)?;
    Ok(g.scale(nll, 1.0 / labels.len() as f64))
}

fn fcd_min_on(g: &mut Graph, net: &DaNet, i: usize, h: Var, alpha: &[f64]) -> Result<Option<Var>> {
    let m_total = net.num_sources();
    if alpha.len() + 1 != m_total {
        return Err(Error::Contract(format!(
            "expected {} alpha factors for branch {i}, got {}",
            m_total - 1,
            alpha.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::Contract(format!("alpha factors must be >= 0, got {a}")));
    }
    let n = g.shape(h).0;
    let k = net.num_classes();
    let b = net.branch_on(g, i, h)?;
    let mut total = None;
    for (m, &a) in (0..m_total).filter(|&m| m != i).zip(alpha) {
        let (_, logits) = net.head_on(g, m, b.z)?;
        let p = g.softmax_rows(logits);
        let diff = g.add_const(p, -1.0 / k as f64);
        let sq = g.mul(diff, diff)?;
        let s = g.sum_all(sq);
        let term = g.scale(s, a / (m_total * n) as f64);
        total = add_opt(g, total, term)?;
    }
    Ok(total)
}

/// Cross-entropy of source `i` through its own branch; only `D_i` is trainable.
pub fn loss_fcd_max(net: &DaNet, i: usize, batch: &Batch, mode: ForwardMode) -> Result<LossResult> {
    check_branch(net, i)?;
    let labels = batch.require_labels("disentangling max loss")?;
    let mut g = Graph::new();
    let h = encode_constant(&mut g, net, batch, sub_mode(mode, i))?;
    let root = fcd_max_on(&mut g, net, i, h, labels)?;
    finish(&g, root, net, &ids(net, |p| p == ParamGroup::Disentangler(i)))
}

/// `1/(M n) sum_{m != i} alpha_m sum_j |p_<i,m>^j - q_uni|^2`: source `i`'s
/// disentangled features routed through every other branch should look
/// uninformative. `alpha` lists the factors for `m != i` in increasing `m`.
/// Only `D_i` is trainable.
pub fn loss_fcd_min(
    net: &DaNet,
    i: usize,
    batch: &Batch,
    alpha: &[f64],
    mode: ForwardMode,
) -> Result<LossResult> {
    check_branch(net, i)?;
    if batch.is_empty() {
        return Err(Error::Contract("disentangling min loss needs a non-empty batch".into()));
    }
    let mut g = Graph::new();
    let h = encode_constant(&mut g, net, batch, sub_mode(mode, i))?;
    let trainable = ids(net, |p| p == ParamGroup::Disentangler(i));
    match fcd_min_on(&mut g, net, i, h, alpha)? {
        Some(root) => finish(&g, root, net, &trainable),
        None => zero_result(net, &trainable),
    }
}

fn zero_result(net: &DaNet, trainable: &BTreeSet<String>) -> Result<LossResult> {
    let grads = net
        .params()
        .into_iter()
        .filter(|p| trainable.contains(&p.id))
        .map(|p| (p.id.clone(), Tensor2::zeros(p.value.rows(), p.value.cols())))
        .collect();
    Ok(LossResult {
        value: 0.0,
        grads,
        skipped: false,
    })
}

/// `sum_i (max_i + min_i)` over all branches; only the disentanglers are trainable.
pub fn loss_fcd_total(
    net: &DaNet,
    batches: &[Batch],
    alpha: &AlphaMatrix,
    mode: ForwardMode,
) -> Result<LossResult> {
    check_sources(net, batches, "disentangling loss")?;
    if alpha.num_sources() != net.num_sources() {
        return Err(Error::Contract(format!(
            "alpha matrix is {0}x{0}, model has {1} branches",
            alpha.num_sources(),
            net.num_sources()
        )));
    }
    let mut g = Graph::new();
    let mut total = None;
    for (i, b) in batches.iter().enumerate() {
        let labels = b.require_labels("disentangling loss")?;
        let h = encode_constant(&mut g, net, b, sub_mode(mode, i))?;
        let max = fcd_max_on(&mut g, net, i, h, labels)?;
        total = add_opt(&mut g, total, max)?;
        if let Some(min) = fcd_min_on(&mut g, net, i, h, &alpha.row_without_diagonal(i))? {
            total = add_opt(&mut g, total, min)?;
        }
    }
    let root = total.expect("at least one batch");
    finish(&g, root, net, &ids(net, ParamGroup::is_disentangler))
}

fn class_rows(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); k];
    for (r, &y) in labels.iter().enumerate() {
        if y < k {
            rows[y].push(r);
        }
    }
    rows
}

/// Class-aware contrast of branch `i` on graph-resident adaptor outputs.
/// Returns `None` when no class has both a positive pair and a negative.
fn ca_on(
    g: &mut Graph,
    es: Var,
    et: Var,
    src_labels: &[usize],
    tgt_labels: &[usize],
    k: usize,
    tau: f64,
    kernel: &KernelConfig,
) -> Result<Option<Var>> {
    let src = class_rows(src_labels, k);
    let tgt = class_rows(tgt_labels, k);
    let ok_s: Vec<bool> = src.iter().map(|r| r.len() >= MIN_CLASS_COUNT).collect();
    let ok_t: Vec<bool> = tgt.iter().map(|r| r.len() >= MIN_CLASS_COUNT).collect();

    let mut sel_s: BTreeMap<usize, Var> = BTreeMap::new();
    let mut sel_t: BTreeMap<usize, Var> = BTreeMap::new();
    for c in 0..k {
        if ok_s[c] {
            sel_s.insert(c, g.select_rows(es, &src[c])?);
        }
        if ok_t[c] {
            sel_t.insert(c, g.select_rows(et, &tgt[c])?);
        }
    }
    // unordered pair distances within one side, computed once
    let mut within_s: BTreeMap<(usize, usize), Var> = BTreeMap::new();
    let mut within_t: BTreeMap<(usize, usize), Var> = BTreeMap::new();
    let mut total = None;
    for c in 0..k {
        if !(ok_s[c] && ok_t[c]) {
            continue;
        }
        let neg_s: Vec<usize> = (0..k).filter(|&o| o != c && ok_s[o]).collect();
        let neg_t: Vec<usize> = (0..k).filter(|&o| o != c && ok_t[o]).collect();
        if neg_s.is_empty() && neg_t.is_empty() {
            continue;
        }
        let d_pos = mmd2_on(g, sel_s[&c], sel_t[&c], kernel)?;
        let mut denom = None;
        for (negs, sel, cache) in [(&neg_s, &sel_s, &mut within_s), (&neg_t, &sel_t, &mut within_t)] {
            for &o in negs {
                let key = (c.min(o), c.max(o));
                let d = match cache.get(&key) {
                    Some(&d) => d,
                    None => {
                        let d = mmd2_on(g, sel[&key.0], sel[&key.1], kernel)?;
                        cache.insert(key, d);
                        d
                    }
                };
                let a = g.scale(d, -1.0 / tau);
                let e = g.exp(a);
                denom = add_opt(g, denom, e)?;
            }
        }
        let denom = denom.expect("at least one negative");
        let denom = g.add_const(denom, CA_EPSILON);
        let log_denom = g.log(denom);
        // -log(2 exp(-d_pos / tau) / denom) = d_pos / tau - ln 2 + ln denom
        let pos = g.scale(d_pos, 1.0 / tau);
        let pos = g.add_const(pos, -std::f64::consts::LN_2);
        let term = g.add(pos, log_denom)?;
        total = add_opt(g, total, term)?;
    }
    Ok(total)
}

fn ca_trainable(net: &DaNet, branches: &[usize]) -> BTreeSet<String> {
    ids(net, |p| match p {
        ParamGroup::Encoder => true,
        ParamGroup::Adaptor(b) | ParamGroup::Classifier(b) => branches.contains(&b),
        ParamGroup::Disentangler(_) => false,
    })
}

/// Class-aware contrastive adaptation for branch `i`.
///
/// For every class `k` with at least [`MIN_CLASS_COUNT`] samples on both
/// sides, with `P^k`, `Q^k` the source and (pseudo-labelled) target adaptor
/// outputs of class `k` and `d` the MMD:
///
/// `-log(2 exp(-d(P^k, Q^k)/tau) / (sum_neg exp(-d(P^k, P^o)/tau) + sum_neg exp(-d(Q^k, Q^o)/tau) + eps))`
///
/// The negatives `o != k` are the other classes present (again with at least
/// [`MIN_CLASS_COUNT`] samples) on the same side. Classes without negatives are
/// skipped; the terms are summed.
#[allow(clippy::too_many_arguments)]
pub fn loss_ca(
    net: &DaNet,
    i: usize,
    source: &Batch,
    target: &Batch,
    tau: f64,
    kernel: &KernelConfig,
    mode: ForwardMode,
) -> Result<LossResult> {
    check_tau(tau)?;
    check_branch(net, i)?;
    let src_labels = source.require_labels("class-aware adaptation (source)")?;
    let tgt_labels = target.require_labels("class-aware adaptation (pseudo-labelled target)")?;
    let mut g = Graph::new();
    let xs = g.constant(source.x.clone());
    let hs = net.encode_on(&mut g, xs, sub_mode(mode, i))?;
    let xt = g.constant(target.x.clone());
    let ht = net.encode_on(&mut g, xt, sub_mode(mode, net.num_sources()))?;
    let es = net.branch_on(&mut g, i, hs)?.e;
    let et = net.branch_on(&mut g, i, ht)?.e;
    match ca_on(&mut g, es, et, src_labels, tgt_labels, net.num_classes(), tau, kernel)? {
        Some(root) => finish(&g, root, net, &ca_trainable(net, &[i])),
        None => Ok(LossResult::skipped()),
    }
}

/// Which alignment objective the adaptation step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpaVariant {
    ClassAware,
    LanguageMmd,
    SupervisedContrastive,
}

impl CpaVariant {
    pub fn name(self) -> &'static str {
        match self {
            CpaVariant::ClassAware => "class_aware",
            CpaVariant::LanguageMmd => "language_mmd",
            CpaVariant::SupervisedContrastive => "supervised_contrastive",
        }
    }
}

fn cpa_trainable(net: &DaNet, variant: CpaVariant) -> BTreeSet<String> {
    ids(net, |p| match (variant, p) {
        (_, ParamGroup::Encoder | ParamGroup::Adaptor(_)) => true,
        (CpaVariant::ClassAware, ParamGroup::Classifier(_)) => true,
        _ => false,
    })
}

/// Sum over branches of the chosen alignment objective on one graph.
/// `None` means every branch had nothing to compare.
#[allow(clippy::too_many_arguments)]
fn cpa_on(
    g: &mut Graph,
    net: &DaNet,
    hs: &[Var],
    ht: Var,
    batches: &[Batch],
    target: &Batch,
    tau: f64,
    kernel: &KernelConfig,
    variant: CpaVariant,
) -> Result<Option<Var>> {
    let mut total = None;
    for (i, &h) in hs.iter().enumerate() {
        let es = net.branch_on(g, i, h)?.e;
        let et = net.branch_on(g, i, ht)?.e;
        let term = match variant {
            CpaVariant::ClassAware => ca_on(
                g,
                es,
                et,
                batches[i].require_labels("class-aware adaptation (source)")?,
                target.require_labels("class-aware adaptation (pseudo-labelled target)")?,
                net.num_classes(),
                tau,
                kernel,
            )?,
            CpaVariant::LanguageMmd => Some(mmd2_on(g, es, et, kernel)?),
            CpaVariant::SupervisedContrastive => scl_on(
                g,
                es,
                et,
                batches[i].require_labels("supervised contrast (source)")?,
                target.require_labels("supervised contrast (pseudo-labelled target)")?,
                tau,
            )?,
        };
        if let Some(t) = term {
            total = add_opt(g, total, t)?;
        }
    }
    Ok(total)
}

fn cpa_variant_loss(
    net: &DaNet,
    batches: &[Batch],
    target: &Batch,
    tau: f64,
    kernel: &KernelConfig,
    variant: CpaVariant,
    mode: ForwardMode,
) -> Result<LossResult> {
    check_tau(tau)?;
    check_sources(net, batches, variant.name())?;
    if target.is_empty() {
        return Err(Error::Contract(format!("{}: target batch is empty", variant.name())));
    }
    let mut enc = encode_all(net, batches, Some(target), mode)?;
    let ht = enc.target.expect("target encoded");
    match cpa_on(&mut enc.g, net, &enc.sources, ht, batches, target, tau, kernel, variant)? {
        Some(root) => finish(&enc.g, root, net, &cpa_trainable(net, variant)),
        None => Ok(LossResult::skipped()),
    }
}

/// `sum_i loss_ca(i)`; encoder, adaptors and classifiers are trainable.
pub fn loss_cpa(
    net: &DaNet,
    batches: &[Batch],
    target: &Batch,
    tau: f64,
    kernel: &KernelConfig,
    mode: ForwardMode,
) -> Result<LossResult> {
    cpa_variant_loss(net, batches, target, tau, kernel, CpaVariant::ClassAware, mode)
}

/// Class-agnostic variant: `sum_i mmd2(e_i(source i), e_i(target))`.
pub fn loss_cpa_language(
    net: &DaNet,
    batches: &[Batch],
    target: &Batch,
    kernel: &KernelConfig,
    mode: ForwardMode,
) -> Result<LossResult> {
    cpa_variant_loss(net, batches, target, 1.0, kernel, CpaVariant::LanguageMmd, mode)
}

/// Sample-level variant: `sum_i loss_scl(i)`.
pub fn loss_cpa_scl(
    net: &DaNet,
    batches: &[Batch],
    target: &Batch,
    tau: f64,
    mode: ForwardMode,
) -> Result<LossResult> {
    let kernel = KernelConfig::default();
    cpa_variant_loss(net, batches, target, tau, &kernel, CpaVariant::SupervisedContrastive, mode)
}

/// Supervised contrastive loss over the joint batch `[e_s; e_t]` of L2
/// normalized rows: for each anchor `a` with at least one positive,
/// `-log(sum_{p in pos(a)} exp(s_ap/tau) / sum_{b != a} exp(s_ab/tau))`,
/// averaged over such anchors. Rows with zero norm take no part.
fn scl_on(
    g: &mut Graph,
    es: Var,
    et: Var,
    src_labels: &[usize],
    tgt_labels: &[usize],
    tau: f64,
) -> Result<Option<Var>> {
    let joint_labels: Vec<usize> = src_labels.iter().chain(tgt_labels).copied().collect();
    let stacked = stack_rows(g, es, et)?;
    let keep: Vec<usize> = (0..joint_labels.len())
        .filter(|&r| g.value(stacked).row(r).iter().any(|&v| v != 0.0))
        .collect();
    let labels: Vec<usize> = keep.iter().map(|&r| joint_labels[r]).collect();
    let n = labels.len();
    let anchors: Vec<usize> = (0..n)
        .filter(|&a| (0..n).any(|b| b != a && labels[b] == labels[a]))
        .collect();
    if anchors.is_empty() {
        return Ok(None);
    }
    let e = g.select_rows(stacked, &keep)?;
    let e = g.normalize_rows(e)?;
    let et_n = g.transpose(e);
    let sim = g.matmul(e, et_n)?;
    let sim = g.scale(sim, 1.0 / tau);
    // subtracting the constant 1/tau (the largest possible similarity) keeps exp bounded
    let sim = g.add_const(sim, -1.0 / tau);
    let ex = g.exp(sim);
    let mut pos = Tensor2::zeros(n, n);
    let mut all = Tensor2::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            if a != b {
                all[(a, b)] = 1.0;
                if labels[a] == labels[b] {
                    pos[(a, b)] = 1.0;
                }
            }
        }
    }
    let num = g.mul_const(ex, pos)?;
    let num = g.sum_rows(num);
    let den = g.mul_const(ex, all)?;
    let den = g.sum_rows(den);
    let num = g.select_rows(num, &anchors)?;
    let den = g.select_rows(den, &anchors)?;
    let ln_num = g.log(num);
    let ln_den = g.log(den);
    let diff = g.sub(ln_den, ln_num)?;
    let s = g.sum_all(diff);
    Ok(Some(g.scale(s, 1.0 / anchors.len() as f64)))
}

// [es; et] as one matrix, built from two selection matmuls.
fn stack_rows(g: &mut Graph, es: Var, et: Var) -> Result<Var> {
    let (ns, nt) = (g.shape(es).0, g.shape(et).0);
    let n = ns + nt;
    let mut ps = Tensor2::zeros(n, ns);
    for r in 0..ns {
        ps[(r, r)] = 1.0;
    }
    let mut pt = Tensor2::zeros(n, nt);
    for r in 0..nt {
        pt[(ns + r, r)] = 1.0;
    }
    let ps = g.constant(ps);
    let pt = g.constant(pt);
    let a = g.matmul(ps, es)?;
    let b = g.matmul(pt, et)?;
    g.add(a, b)
}

/// Supervised contrastive loss of branch `i` over source and target adaptor outputs.
pub fn loss_scl(
    net: &DaNet,
    i: usize,
    source: &Batch,
    target: &Batch,
    tau: f64,
    mode: ForwardMode,
) -> Result<LossResult> {
    check_tau(tau)?;
    check_branch(net, i)?;
    let src_labels = source.require_labels("supervised contrast (source)")?;
    let tgt_labels = target.require_labels("supervised contrast (pseudo-labelled target)")?;
    let mut g = Graph::new();
    let xs = g.constant(source.x.clone());
    let hs = net.encode_on(&mut g, xs, sub_mode(mode, i))?;
    let xt = g.constant(target.x.clone());
    let ht = net.encode_on(&mut g, xt, sub_mode(mode, net.num_sources()))?;
    let es = net.branch_on(&mut g, i, hs)?.e;
    let et = net.branch_on(&mut g, i, ht)?.e;
    let trainable = ids(net, |p| p == ParamGroup::Encoder || p == ParamGroup::Adaptor(i));
    match scl_on(&mut g, es, et, src_labels, tgt_labels, tau)? {
        Some(root) => finish(&g, root, net, &trainable),
        None => Ok(LossResult::skipped()),
    }
}

/// Adaptation-step objective `CE + eta * alignment` on a single graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptLoss {
    pub total: LossResult,
    pub ce: f64,
    /// `None` when the alignment term was not evaluated (`eta = 0` or disabled).
    pub alignment: Option<f64>,
    pub alignment_skipped: bool,
}

/// `CE + eta * variant`, with gradients on the encoder, adaptors and
/// classifiers. With `variant = None` or `eta = 0` the alignment term is not
/// evaluated.
#[allow(clippy::too_many_arguments)]
pub fn loss_adapt(
    net: &DaNet,
    batches: &[Batch],
    target: &Batch,
    eta: f64,
    tau: f64,
    kernel: &KernelConfig,
    variant: Option<CpaVariant>,
    mode: ForwardMode,
) -> Result<AdaptLoss> {
    check_sources(net, batches, "adaptation loss")?;
    let variant = variant.filter(|_| eta != 0.0);
    if variant.is_some() {
        check_tau(tau)?;
    }
    let target = variant.map(|_| target);
    let mut enc = encode_all(net, batches, target, mode)?;
    let g = &mut enc.g;
    let ce = ce_on(g, net, &enc.sources, batches)?;
    let ce_value = g.value(ce).item();
    let mut root = ce;
    let mut alignment = None;
    let mut alignment_skipped = false;
    if let (Some(v), Some(t)) = (variant, target) {
        let ht = enc.target.expect("target encoded");
        match cpa_on(g, net, &enc.sources, ht, batches, t, tau, kernel, v)? {
            Some(a) => {
                alignment = Some(g.value(a).item());
                let scaled = g.scale(a, eta);
                root = g.add(root, scaled)?;
            }
            None => {
                alignment = Some(0.0);
                alignment_skipped = true;
            }
        }
    }
    let trainable = ids(net, |p| !p.is_disentangler());
    Ok(AdaptLoss {
        total: finish(g, root, net, &trainable)?,
        ce: ce_value,
        alignment,
        alignment_skipped,
    })
}
