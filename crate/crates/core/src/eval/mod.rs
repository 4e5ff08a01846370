//! Zero-shot target evaluation, the branch-confusion diagnostic, class-wise
//! source/target MMD and embedding dumps.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::dataset::{features_of, DatasetBundle, Sample};
use crate::distance::{mmd2, GaussianStats, KernelConfig};
use crate::error::{Error, Result};
use crate::model::{ensemble_predict, DaNet, EnsembleOutput, ForwardMode};
use crate::netcore::Tensor2;
use crate::rng;

/// Classes with fewer samples than this on either side get no class-wise MMD.
const MIN_MMD_CLASS: usize = 2;

/// Combined target probabilities and the per-source weights behind them.
pub fn predict_target(net: &DaNet, stats: &[GaussianStats], x: &Tensor2) -> Result<EnsembleOutput> {
    ensemble_predict(net, stats, x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `None` for a class that is neither present nor predicted.
    pub per_class_f1: Vec<Option<f64>>,
}

/// Accuracy and macro-F1. A class with no instances and no predictions is
/// left out of the macro average; any other undefined ratio counts as 0.
pub fn classification_metrics(truth: &[usize], predicted: &[usize], k: usize) -> Result<ClassificationMetrics> {
    if truth.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if truth.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "{} labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut tp = vec![0usize; k];
    let mut pred_count = vec![0usize; k];
    let mut true_count = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::Contract(format!("class id outside [0, {k})")));
        }
        true_count[t] += 1;
        pred_count[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let per_class_f1: Vec<Option<f64>> = (0..k)
        .map(|c| match (true_count[c], pred_count[c]) {
            (0, 0) => None,
            (tc, pc) => Some(2.0 * tp[c] as f64 / (tc + pc) as f64),
        })
        .collect();
    let defined: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    Ok(ClassificationMetrics {
        accuracy: tp.iter().sum::<usize>() as f64 / truth.len() as f64,
        macro_f1: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class_f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub label: Option<String>,
    pub target_accuracy: f64,
    pub target_macro_f1: f64,
    pub per_class_f1: Vec<Option<f64>>,
    /// `[i][m]`: accuracy on source `m` when its disentangled features are
    /// classified by branch `i` (own branch on the diagonal).
    pub branch_confusion: Vec<Vec<f64>>,
    /// Diagonal mean minus off-diagonal mean of `branch_confusion`.
    pub confusion_gap: f64,
    /// `[i][k]`: MMD between branch `i`'s adaptor outputs of source `i` and of
    /// the target test set, restricted to class `k`.
    pub classwise_mmd: Vec<Vec<Option<f64>>>,
    /// Mean of the defined class-wise values, per branch.
    pub classwise_mmd_mean: Vec<f64>,
    /// Ensemble weight statistics over the target test set, per source.
    pub weights_summary: Vec<WeightSummary>,
    pub num_target_test: usize,
}

/// `[i][m]` accuracy of source `m` through branch `i`'s classifier.
pub fn branch_confusion(net: &DaNet, sources: &[Vec<Sample>]) -> Result<Vec<Vec<f64>>> {
    let m_total = net.num_sources();
    if sources.len() != m_total {
        return Err(Error::Contract(format!(
            "{} source sets for {m_total} branches",
            sources.len()
        )));
    }
    let mut out = vec![vec![0.0; m_total]; m_total];
    for (m, set) in sources.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Contract(format!("source {m} has no samples to evaluate")));
        }
        let labels: Vec<usize> = set
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::Contract(format!("source {m} sample without label"))))
            .collect::<Result<_>>()?;
        let h = net.encode(&features_of(set)?, ForwardMode::Eval)?;
        let own = net.branch_forward(m, &h)?;
        for (i, row) in out.iter_mut().enumerate() {
            let p = if i == m {
                own.p.clone()
            } else {
                net.cross_branch_forward(m, i, &own.z)?
            };
            let hits = p.argmax_rows().iter().zip(&labels).filter(|(a, b)| a == b).count();
            row[m] = hits as f64 / labels.len() as f64;
        }
    }
    Ok(out)
}

pub fn confusion_gap(confusion: &[Vec<f64>]) -> f64 {
    let m = confusion.len();
    if m < 2 {
        return 0.0;
    }
    let diag: f64 = (0..m).map(|i| confusion[i][i]).sum::<f64>() / m as f64;
    let off: f64 = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| confusion[i][j])
        .sum::<f64>()
        / (m * (m - 1)) as f64;
    diag - off
}

fn rows_of_class(set: &[Sample], k: usize, cap: usize, seed: u64) -> Vec<usize> {
    let idx: Vec<usize> = (0..set.len()).filter(|&r| set[r].label == Some(k)).collect();
    if idx.len() <= cap {
        return idx;
    }
    let mut rng = rng::rng_for(seed, &[k as u64, idx.len() as u64]);
    let mut pick: Vec<usize> = sample_indices(&mut rng, idx.len(), cap).into_iter().map(|i| idx[i]).collect();
    pick.sort_unstable();
    pick
}

/// `[i][k]` class-wise MMD on branch `i`'s adaptor outputs between source `i`
/// and the labelled target set; at most `cap` seeded samples per side.
pub fn classwise_mmd(
    net: &DaNet,
    sources: &[Vec<Sample>],
    target: &[Sample],
    cap: usize,
    seed: u64,
) -> Result<Vec<Vec<Option<f64>>>> {
    let k = net.num_classes();
    let kernel = KernelConfig::MedianHeuristic;
    let ht = net.encode(&features_of(target)?, ForwardMode::Eval)?;
    let mut out = Vec::with_capacity(sources.len());
    for (i, set) in sources.iter().enumerate() {
        let hs = net.encode(&features_of(set)?, ForwardMode::Eval)?;
        let es = net.branch_forward(i, &hs)?.e;
        let et = net.branch_forward(i, &ht)?.e;
        let mut row = Vec::with_capacity(k);
        for c in 0..k {
            let rs = rows_of_class(set, c, cap, rng::derive(seed, &[i as u64, 0]));
            let rt = rows_of_class(target, c, cap, rng::derive(seed, &[i as u64, 1]));
            row.push(if rs.len() >= MIN_MMD_CLASS && rt.len() >= MIN_MMD_CLASS {
                Some(mmd2(&es.select_rows(&rs), &et.select_rows(&rt), &kernel)?)
            } else {
                None
            });
        }
        out.push(row);
    }
    Ok(out)
}

fn mean_defined(row: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = row.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Options of [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub label: Option<String>,
    /// Per-class sample cap for the class-wise MMD.
    pub mmd_cap: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            label: None,
            mmd_cap: 200,
            seed: 0,
        }
    }
}

/// Fills an [`EvalReport`]. `sources` are the labelled source samples used for
/// the branch diagnostics (held-out ones when available).
pub fn evaluate(
    net: &DaNet,
    bundle: &DatasetBundle,
    sources: &[Vec<Sample>],
    stats: &[GaussianStats],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let test = &bundle.target_test;
    if test.is_empty() {
        return Err(Error::Contract("target test set is empty".into()));
    }
    let truth: Vec<usize> = test
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Contract("target test sample without label".into())))
        .collect::<Result<_>>()?;
    let out = predict_target(net, stats, &features_of(test)?)?;
    let metrics = classification_metrics(&truth, &out.probs.argmax_rows(), net.num_classes())?;

    let m = net.num_sources();
    let n = test.len() as f64;
    let weights_summary = (0..m)
        .map(|i| {
            let col: Vec<f64> = (0..test.len()).map(|r| out.weights[(r, i)]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
            WeightSummary { mean, std: var.sqrt() }
        })
        .collect();

    let confusion = branch_confusion(net, sources)?;
    let cw = classwise_mmd(net, sources, test, opts.mmd_cap, opts.seed)?;
    Ok(EvalReport {
        label: opts.label.clone(),
        target_accuracy: metrics.accuracy,
        target_macro_f1: metrics.macro_f1,
        per_class_f1: metrics.per_class_f1,
        confusion_gap: confusion_gap(&confusion),
        branch_confusion: confusion,
        classwise_mmd_mean: cw.iter().map(|r| mean_defined(r)).collect(),
        classwise_mmd: cw,
        weights_summary,
        num_target_test: test.len(),
    })
}

pub fn save_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Integrity(format!("report not serializable: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Embedding dump settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpOptions {
    pub per_domain: usize,
    pub seed: u64,
}

impl Default for DumpOptions {
    fn default() -> Self {
        Self {
            per_domain: 200,
            seed: 0,
        }
    }
}

/// Writes one JSON line per (sample, layer) for a seeded subsample of every
/// source and of the target test set:
/// `{"domain", "split", "index", "label", "pseudo", "layer": "h"|"z"|"e", "branch", "vector"}`.
/// `h` has `branch: null`; `z` and `e` are written for every branch. The
/// target's `pseudo` is the ensemble prediction (requires `stats`).
pub fn dump_embeddings(
    net: &DaNet,
    bundle: &DatasetBundle,
    stats: &[GaussianStats],
    path: impl AsRef<Path>,
    opts: &DumpOptions,
) -> Result<usize> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut lines = 0usize;
    let mut buf = String::new();
    let sets = bundle
        .sources
        .iter()
        .map(|s| (s.as_slice(), "source"))
        .chain(std::iter::once((bundle.target_test.as_slice(), "target_test")));
    for (d, (set, split)) in sets.enumerate() {
        if set.is_empty() {
            continue;
        }
        let take = opts.per_domain.min(set.len());
        let mut rng = rng::rng_for(opts.seed, &[0xE3B, d as u64]);
        let mut idx: Vec<usize> = sample_indices(&mut rng, set.len(), take).into_vec();
        idx.sort_unstable();
        let chosen: Vec<Sample> = idx.iter().map(|&i| set[i].clone()).collect();
        let x = features_of(&chosen)?;
        let h = net.encode(&x, ForwardMode::Eval)?;
        let pseudo = if split == "target_test" {
            Some(predict_target(net, stats, &x)?.probs.argmax_rows())
        } else {
            None
        };
        let mut layers: Vec<(&str, Option<usize>, Tensor2)> = vec![("h", None, h.clone())];
        for i in 0..net.num_sources() {
            let o = net.branch_forward(i, &h)?;
            layers.push(("z", Some(i), o.z));
            layers.push(("e", Some(i), o.e));
        }
        for (r, (&src_idx, sample)) in idx.iter().zip(&chosen).enumerate() {
            for (layer, branch, values) in &layers {
                buf.clear();
                let json_opt = |v: Option<usize>| v.map_or("null".to_string(), |x| x.to_string());
                let _ = write!(
                    buf,
                    "{{\"domain\":{},\"split\":\"{split}\",\"index\":{src_idx},\"label\":{},\"pseudo\":{},\"layer\":\"{layer}\",\"branch\":{},\"vector\":[",
                    sample.domain,
                    json_opt(sample.label),
                    json_opt(pseudo.as_ref().map(|p| p[r])),
                    json_opt(*branch),
                );
                for (j, v) in values.row(r).iter().enumerate() {
                    if j > 0 {
                        buf.push(',');
                    }
                    let _ = write!(buf, "{v:.16e}");
                }
                buf.push_str("]}\n");
                w.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
                lines += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(lines)
}
