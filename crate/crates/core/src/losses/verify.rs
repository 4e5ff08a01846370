//! Finite-difference verification of every training loss on a seeded toy model.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{loss_ce, loss_cpa, loss_cpa_language, loss_cpa_scl, loss_fcd_total, LossResult};
use crate::dataset::Batch;
use crate::distance::{AlphaMatrix, KernelConfig};
use crate::error::Result;
use crate::model::{DaNet, ForwardMode, ModelConfig};
use crate::netcore::{grad_check, Activation, GradCheckReport, Tensor2};
use crate::rng;

pub const LOSS_NAMES: [&str; 5] = ["ce", "fcd", "cpa", "cpa_language", "scl"];

#[derive(Debug, Clone)]
pub struct GradSuiteConfig {
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
    /// Hidden-layer activation of the toy model.
    pub activation: Activation,
    /// Perturbs one analytic gradient entry of the named loss (fault injection).
    pub corrupt: Option<String>,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            h: 1e-5,
            tol: 1e-4,
            activation: Activation::Tanh,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

/// Toy fixture: 3 sources, 3 classes, input and hidden widths of at most 8.
pub struct Fixture {
    pub net: DaNet,
    pub sources: Vec<Batch>,
    pub target: Batch,
    pub alpha: AlphaMatrix,
}

pub fn toy_fixture(seed: u64, activation: Activation) -> Result<Fixture> {
    let (m, k, d, per_class) = (3, 3, 6, 4);
    let mut net = DaNet::new(ModelConfig {
        input_dim: d,
        encoder_widths: vec![8],
        disentangler_width: 8,
        adaptor_width: 8,
        num_classes: k,
        num_sources: m,
        activation,
        dropout: 0.5,
        init_seed: seed,
    })?;
    let mut rng = rng::rng_for(seed, &[0x70F]);
    // non-zero biases keep relu pre-activations away from the kink at 0
    for p in net.params_mut() {
        if p.id.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let mut draw = |shift: f64| -> Result<Batch> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let row: Vec<f64> = center
                    .iter()
                    .map(|&v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + shift + 0.5 * z
                    })
                    .collect();
                rows.push(row);
                labels.push(c);
            }
        }
        Ok(Batch::labelled(Tensor2::from_rows(&rows)?, labels))
    };
    let sources = (0..m).map(|i| draw(0.2 * i as f64)).collect::<Result<Vec<_>>>()?;
    let target = draw(0.5)?;
    let mut alpha = AlphaMatrix::constant(m, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                alpha.values[(i, j)] = 0.3 + 0.1 * (i + j) as f64;
            }
        }
    }
    Ok(Fixture {
        net,
        sources,
        target,
        alpha,
    })
}

fn evaluate(name: &str, fx: &Fixture, net: &DaNet, mode: ForwardMode) -> Result<LossResult> {
    let kernel = KernelConfig::MedianHeuristic;
    let tau = 0.5;
    match name {
        "ce" => loss_ce(net, &fx.sources, mode),
        "fcd" => loss_fcd_total(net, &fx.sources, &fx.alpha, mode),
        "cpa" => loss_cpa(net, &fx.sources, &fx.target, tau, &kernel, mode),
        "cpa_language" => loss_cpa_language(net, &fx.sources, &fx.target, &kernel, mode),
        "scl" => loss_cpa_scl(net, &fx.sources, &fx.target, tau, mode),
        other => unreachable!("unknown loss {other}"),
    }
}

/// Runs the central-difference check for each loss in `names`.
pub fn verify_losses(cfg: &GradSuiteConfig, names: &[&'static str]) -> Result<Vec<LossCheck>> {
    let fx = toy_fixture(cfg.seed, cfg.activation)?;
    let mode = ForwardMode::Train {
        seed: rng::derive(cfg.seed, &[0xD0]),
    };
    let mut out = Vec::new();
    for &name in names {
        let corrupt = cfg.corrupt.as_deref() == Some(name);
        let mut net = fx.net.clone();
        let report = grad_check(
            &mut net,
            |n: &DaNet| {
                let r = evaluate(name, &fx, n, mode)?;
                let mut grads = r.grads;
                if corrupt {
                    if let Some(g) = grads.values_mut().next() {
                        let v = &mut g.data_mut()[0];
                        *v = *v * 1.01 + 1e-3;
                    }
                }
                Ok((r.value, grads))
            },
            cfg.h,
            cfg.tol,
        )?;
        out.push(LossCheck { loss: name, report });
    }
    Ok(out)
}

/// Runs the central-difference check for each loss in [`LOSS_NAMES`].
pub fn verify_gradients(cfg: &GradSuiteConfig) -> Result<Vec<LossCheck>> {
    verify_losses(cfg, &LOSS_NAMES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_losses_pass() {
        let checks = verify_gradients(&GradSuiteConfig::default()).unwrap();
        assert_eq!(checks.len(), 5);
        for c in &checks {
            assert!(c.report.entries_checked > 0, "{}", c.loss);
            assert!(c.report.passed, "{}: {:?}", c.loss, c.report);
        }
    }

    // MMD is translation invariant, so with relu a bias feeding an always
    // active unit has an exactly zero gradient that finite differences only
    // resolve to rounding noise; the losses without that symmetry are
    // checked with relu as well.
    #[test]
    fn relu_losses_pass() {
        let cfg = GradSuiteConfig {
            activation: Activation::Relu,
            ..GradSuiteConfig::default()
        };
        for c in verify_losses(&cfg, &["ce", "fcd", "scl"]).unwrap() {
            assert!(c.report.passed, "{}: {:?}", c.loss, c.report);
        }
    }

    #[test]
    fn corruption_is_caught() {
        let cfg = GradSuiteConfig {
            corrupt: Some("cpa".into()),
            ..GradSuiteConfig::default()
        };
        let checks = verify_gradients(&cfg).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.report.passed).map(|c| c.loss).collect();
        assert_eq!(failed, vec!["cpa"]);
    }
}
