//! The shared encoder, the per-source branch networks and the momentum twin
//! used for target pseudo-labels.
//!
//! Parameter ids:
//! - `encoder.{l}.weight|bias` for encoder layer `l`
//! - `branch.{i}.disentangler|adaptor|classifier.weight|bias` for branch `i`

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::{ensemble_weights, mahalanobis_score, GaussianStats};
use crate::error::{Error, Result};
use crate::netcore::{
    forward_dense, softmax_rows, Activation, DenseLayer, Graph, ParamStore, ParamTensor, Tensor2,
    Var,
};
use crate::rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub disentangler_width: usize,
    pub adaptor_width: usize,
    pub num_classes: usize,
    pub num_sources: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            encoder_widths: vec![64, 64],
            disentangler_width: 64,
            adaptor_width: 64,
            num_classes: 4,
            num_sources: 3,
            activation: Activation::Relu,
            dropout: 0.5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.encoder_widths.iter().all(|&w| w > 0);
        if self.input_dim == 0 || !widths_ok || self.disentangler_width == 0 || self.adaptor_width == 0
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.num_sources == 0 {
            return Err(Error::Config("num_sources must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn encoder_output_dim(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(self.input_dim)
    }
}

/// Whether dropout is active. Training passes carry the seed of their mask so
/// that a forward pass is a pure function of its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train { seed: u64 },
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Encoder,
    Disentangler(usize),
    Adaptor(usize),
    Classifier(usize),
}

impl ParamGroup {
    pub fn of(id: &str) -> Option<Self> {
        let mut parts = id.split('.');
        match parts.next()? {
            "encoder" => Some(ParamGroup::Encoder),
            "branch" => {
                let i = parts.next()?.parse().ok()?;
                match parts.next()? {
                    "disentangler" => Some(ParamGroup::Disentangler(i)),
                    "adaptor" => Some(ParamGroup::Adaptor(i)),
                    "classifier" => Some(ParamGroup::Classifier(i)),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    pub fn is_disentangler(self) -> bool {
        matches!(self, ParamGroup::Disentangler(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchNet {
    pub disentangler: DenseLayer,
    pub adaptor: DenseLayer,
    /// No activation; width `K`.
    pub classifier: DenseLayer,
}

impl BranchNet {
    fn layers(&self) -> [&DenseLayer; 3] {
        [&self.disentangler, &self.adaptor, &self.classifier]
    }

    fn layers_mut(&mut self) -> [&mut DenseLayer; 3] {
        [&mut self.disentangler, &mut self.adaptor, &mut self.classifier]
    }
}

/// Plain forward outputs of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub z: Tensor2,
    pub e: Tensor2,
    pub logits: Tensor2,
    pub p: Tensor2,
}

/// Taped forward outputs of one branch (logits, not probabilities).
#[derive(Debug, Clone, Copy)]
pub struct TapedBranch {
    pub z: Var,
    pub e: Var,
    pub logits: Var,
}

/// Tensor counts of a model, per group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub encoder_tensors: usize,
    pub branch_tensors: usize,
    pub num_branches: usize,
    pub total_tensors: usize,
    pub total_scalars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaNet {
    pub config: ModelConfig,
    pub encoder: Vec<DenseLayer>,
    pub branches: Vec<BranchNet>,
}

impl DaNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(config.init_seed, &[0x1217]);
        let mut encoder = Vec::with_capacity(config.encoder_widths.len());
        let mut width = config.input_dim;
        for (l, &w) in config.encoder_widths.iter().enumerate() {
            encoder.push(DenseLayer::new(&format!("encoder.{l}"), width, w, config.activation, &mut rng));
            width = w;
        }
        let branches = (0..config.num_sources)
            .map(|i| BranchNet {
                disentangler: DenseLayer::new(
                    &format!("branch.{i}.disentangler"),
                    width,
                    config.disentangler_width,
                    config.activation,
                    &mut rng,
                ),
                adaptor: DenseLayer::new(
                    &format!("branch.{i}.adaptor"),
                    config.disentangler_width,
                    config.adaptor_width,
                    config.activation,
                    &mut rng,
                ),
                classifier: DenseLayer::new(
                    &format!("branch.{i}.classifier"),
                    config.adaptor_width,
                    config.num_classes,
                    Activation::None,
                    &mut rng,
                ),
            })
            .collect();
        Ok(Self {
            config,
            encoder,
            branches,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.branches.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn branch(&self, i: usize) -> Result<&BranchNet> {
        self.branches.get(i).ok_or_else(|| {
            Error::Contract(format!("branch {i} out of range ({} branches)", self.branches.len()))
        })
    }

    /// Inverted-dropout mask for an `rows x cols` encoder output.
    fn dropout_mask(&self, rows: usize, cols: usize, seed: u64) -> Tensor2 {
        let rate = self.config.dropout;
        let keep = 1.0 / (1.0 - rate);
        let mut rng = ChaCha8Rng::seed_from_u64(rng::derive(seed, &[0xD809]));
        let data = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Tensor2::from_vec(rows, cols, data).expect("mask shape")
    }

    fn uses_dropout(&self, mode: ForwardMode) -> Option<u64> {
        match mode {
            ForwardMode::Train { seed } if self.config.dropout > 0.0 => Some(seed),
            _ => None,
        }
    }

    /// Shared encoder output `h`, with dropout on the final output in training mode.
    pub fn encode(&self, x: &Tensor2, mode: ForwardMode) -> Result<Tensor2> {
        let mut h = x.clone();
        for layer in &self.encoder {
            h = forward_dense(layer, &h)?;
        }
        if let Some(seed) = self.uses_dropout(mode) {
            let mask = self.dropout_mask(h.rows(), h.cols(), seed);
            h = h.zip_map(&mask, |a, b| a * b);
        }
        Ok(h)
    }

    pub fn branch_forward(&self, i: usize, h: &Tensor2) -> Result<BranchOutput> {
        let b = self.branch(i)?;
        let z = forward_dense(&b.disentangler, h)?;
        let e = forward_dense(&b.adaptor, &z)?;
        let logits = forward_dense(&b.classifier, &e)?;
        let p = softmax_rows(&logits);
        Ok(BranchOutput { z, e, logits, p })
    }

    /// Source `i`'s disentangled representation routed through the adaptor
    /// and classifier of branch `m`.
    pub fn cross_branch_forward(&self, i: usize, m: usize, z_i: &Tensor2) -> Result<Tensor2> {
        if i == m {
            return Err(Error::Contract(format!("cross-branch routing needs m != i (both {i})")));
        }
        self.branch(i)?;
        let b = self.branch(m)?;
        let e = forward_dense(&b.adaptor, z_i)?;
        Ok(softmax_rows(&forward_dense(&b.classifier, &e)?))
    }

    /// Eval-mode probabilities of every branch for the same inputs.
    pub fn branch_probabilities(&self, x: &Tensor2) -> Result<(Tensor2, Vec<Tensor2>)> {
        let h = self.encode(x, ForwardMode::Eval)?;
        let ps = (0..self.num_sources())
            .map(|i| Ok(self.branch_forward(i, &h)?.p))
            .collect::<Result<Vec<_>>>()?;
        Ok((h, ps))
    }

    pub fn encode_on(&self, g: &mut Graph, x: Var, mode: ForwardMode) -> Result<Var> {
        let mut h = x;
        for layer in &self.encoder {
            h = layer.forward_on(g, h)?;
        }
        if let Some(seed) = self.uses_dropout(mode) {
            let (r, c) = g.shape(h);
            let mask = self.dropout_mask(r, c, seed);
            h = g.mul_const(h, mask)?;
        }
        Ok(h)
    }

    pub fn branch_on(&self, g: &mut Graph, i: usize, h: Var) -> Result<TapedBranch> {
        let b = self.branch(i)?;
        let z = b.disentangler.forward_on(g, h)?;
        let e = b.adaptor.forward_on(g, z)?;
        let logits = b.classifier.forward_on(g, e)?;
        Ok(TapedBranch { z, e, logits })
    }

    /// Adaptor and classifier of branch `m` applied to `z`; returns `(e, logits)`.
    pub fn head_on(&self, g: &mut Graph, m: usize, z: Var) -> Result<(Var, Var)> {
        let b = self.branch(m)?;
        let e = b.adaptor.forward_on(g, z)?;
        let logits = b.classifier.forward_on(g, e)?;
        Ok((e, logits))
    }

    /// All parameters in a fixed order: encoder layers, then each branch.
    pub fn params(&self) -> Vec<&ParamTensor> {
        let enc = self.encoder.iter().flat_map(|l| l.params());
        let br = self
            .branches
            .iter()
            .flat_map(|b| b.layers().into_iter().flat_map(|l| l.params()));
        enc.chain(br).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let enc = self.encoder.iter_mut().flat_map(|l| l.params_mut());
        let br = self
            .branches
            .iter_mut()
            .flat_map(|b| b.layers_mut().into_iter().flat_map(|l| l.params_mut()));
        enc.chain(br).collect()
    }

    pub fn param_ids(&self) -> Vec<String> {
        self.params().into_iter().map(|p| p.id.clone()).collect()
    }

    /// Ids of every parameter whose group satisfies `pred`.
    pub fn ids_where(&self, pred: impl Fn(ParamGroup) -> bool) -> Vec<String> {
        self.params()
            .into_iter()
            .filter(|p| ParamGroup::of(&p.id).is_some_and(&pred))
            .map(|p| p.id.clone())
            .collect()
    }

    pub fn audit(&self) -> ParamAudit {
        let encoder_tensors = self.encoder.len() * 2;
        let total_tensors = self.params().len();
        ParamAudit {
            encoder_tensors,
            branch_tensors: 6,
            num_branches: self.num_sources(),
            total_tensors,
            total_scalars: self.params().iter().map(|p| p.value.len()).sum(),
        }
    }
}

impl ParamStore for DaNet {
    fn param(&self, id: &str) -> Option<&ParamTensor> {
        self.params().into_iter().find(|p| p.id == id)
    }

    fn param_mut(&mut self, id: &str) -> Option<&mut ParamTensor> {
        self.params_mut().into_iter().find(|p| p.id == id)
    }
}

/// Ensemble prediction of a model: per-row combined probabilities and the
/// per-source weights that produced them (`n x M` each side).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub probs: Tensor2,
    pub weights: Tensor2,
}

/// Weights each branch's prediction by the softmax of the negative
/// Mahalanobis distances of the encoded input to each source.
pub fn ensemble_predict(net: &DaNet, stats: &[GaussianStats], x: &Tensor2) -> Result<EnsembleOutput> {
    let m = net.num_sources();
    if stats.len() != m {
        return Err(Error::State(format!(
            "{} source statistics available for {m} branches; refresh the gaussian statistics first",
            stats.len()
        )));
    }
    let (h, ps) = net.branch_probabilities(x)?;
    let n = x.rows();
    let k = net.num_classes();
    let mut probs = Tensor2::zeros(n, k);
    let mut weights = Tensor2::zeros(n, m);
    for r in 0..n {
        let betas = stats
            .iter()
            .map(|s| mahalanobis_score(h.row(r), s))
            .collect::<Result<Vec<_>>>()?;
        let w = ensemble_weights(&betas);
        for (i, wi) in w.iter().enumerate() {
            weights[(r, i)] = *wi;
            for c in 0..k {
                probs[(r, c)] += wi * ps[i][(r, c)];
            }
        }
    }
    Ok(EnsembleOutput { probs, weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

/// Slowly tracking copy of the live model.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumNet {
    pub net: DaNet,
    pub gamma: f64,
}

impl MomentumNet {
    pub fn from_live(live: &DaNet, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("momentum gamma must lie in [0, 1], got {gamma}")));
        }
        Ok(Self {
            net: live.clone(),
            gamma,
        })
    }

    /// `mom <- gamma * live + (1 - gamma) * mom`, entrywise.
    pub fn momentum_update(&mut self, live: &DaNet) -> Result<()> {
        let g = self.gamma;
        let live_params = live.params();
        let mine = self.net.params_mut();
        if live_params.len() != mine.len() {
            return Err(Error::Integrity(format!(
                "momentum model has {} tensors, live model {}",
                mine.len(),
                live_params.len()
            )));
        }
        for (m, l) in mine.into_iter().zip(live_params) {
            if m.id != l.id || m.shape() != l.shape() {
                return Err(Error::Integrity(format!(
                    "momentum tensor {} {:?} does not mirror live tensor {} {:?}",
                    m.id,
                    m.shape(),
                    l.id,
                    l.shape()
                )));
            }
            for (a, b) in m.value.data_mut().iter_mut().zip(l.value.data()) {
                *a = g * b + (1.0 - g) * *a;
            }
        }
        Ok(())
    }

    /// Ensemble prediction of the momentum model; label = argmax, confidence = max.
    pub fn predict_target(&self, x_t: &Tensor2, stats: &[GaussianStats]) -> Result<PseudoLabels> {
        let out = ensemble_predict(&self.net, stats, x_t)?;
        let labels = out.probs.argmax_rows();
        let confidences = labels
            .iter()
            .enumerate()
            .map(|(r, &c)| out.probs[(r, c)])
            .collect();
        Ok(PseudoLabels {
            labels,
            confidences,
        })
    }
}

/// Free-function form of [`MomentumNet::momentum_update`].
pub fn momentum_update(mom: &mut MomentumNet, live: &DaNet) -> Result<()> {
    mom.momentum_update(live)
}

/// Free-function form of [`MomentumNet::predict_target`].
pub fn momentum_predict_target(
    mom: &MomentumNet,
    x_t: &Tensor2,
    stats: &[GaussianStats],
) -> Result<PseudoLabels> {
    mom.predict_target(x_t, stats)
}
