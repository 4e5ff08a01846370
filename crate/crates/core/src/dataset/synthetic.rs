use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Affine map `x -> scale * R x + translation` applied to one domain.
///
/// `R` rotates every listed coordinate plane by `rotation_deg`, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    pub rotation_deg: f64,
    pub planes: Vec<[usize; 2]>,
    pub scale: f64,
    /// Empty means no translation; otherwise one entry per dimension.
    pub translation: Vec<f64>,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            planes: vec![[0, 1]],
            scale: 1.0,
            translation: Vec::new(),
        }
    }

    pub fn rotation(deg: f64) -> Self {
        Self {
            rotation_deg: deg,
            ..Self::identity()
        }
    }

    pub fn with_planes(mut self, planes: Vec<[usize; 2]>) -> Self {
        self.planes = planes;
        self
    }

    pub fn with_translation(mut self, translation: Vec<f64>) -> Self {
        self.translation = translation;
        self
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for &[a, b] in &self.planes {
            if a >= dim || b >= dim || a == b {
                return Err(Error::Config(format!(
                    "rotation plane [{a}, {b}] invalid for dimension {dim}"
                )));
            }
        }
        if !self.translation.is_empty() && self.translation.len() != dim {
            return Err(Error::Config(format!(
                "translation has {} entries, dimension is {dim}",
                self.translation.len()
            )));
        }
        if !(self.scale.is_finite() && self.scale != 0.0) {
            return Err(Error::Config(format!("scale must be finite and non-zero, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn apply(&self, x: &mut [f64]) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        for &[a, b] in &self.planes {
            let (xa, xb) = (x[a], x[b]);
            x[a] = c * xa - s * xb;
            x[b] = s * xa + c * xb;
        }
        for v in x.iter_mut() {
            *v *= self.scale;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

/// Parameters of the synthetic multi-domain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_sources: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Euclidean distance between any two class prototypes (exact when `K <= d`).
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// One shift per domain: the sources in order, then the target. Empty
    /// means identity for every domain.
    #[serde(default)]
    pub shifts: Vec<DomainShift>,
    /// Optional per-domain relative class frequencies (same layout as `shifts`).
    #[serde(default)]
    pub class_priors: Option<Vec<Vec<f64>>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.samples_per_class < 4 {
            return Err(Error::Config(format!(
                "samples_per_class must be >= 4, got {}",
                self.samples_per_class
            )));
        }
        if self.num_sources < 2 {
            return Err(Error::Config(format!("num_sources must be >= 2, got {}", self.num_sources)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.class_separation >= 0.0) {
            return Err(Error::Config("noise_sigma and class_separation must be >= 0".into()));
        }
        let domains = self.num_sources + 1;
        if !self.shifts.is_empty() && self.shifts.len() != domains {
            return Err(Error::Config(format!(
                "expected {domains} domain shifts (sources then target), got {}",
                self.shifts.len()
            )));
        }
        for s in &self.shifts {
            s.validate(self.dim)?;
        }
        if let Some(priors) = &self.class_priors {
            if priors.len() != domains {
                return Err(Error::Config(format!("expected {domains} class prior vectors")));
            }
            for p in priors {
                if p.len() != self.num_classes || p.iter().any(|&w| !(w > 0.0)) {
                    return Err(Error::Config(
                        "class priors need one positive weight per class".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn shift(&self, domain: usize) -> DomainShift {
        self.shifts.get(domain).cloned().unwrap_or_default()
    }

    fn class_counts(&self, domain: usize) -> Vec<usize> {
        let k = self.num_classes;
        match &self.class_priors {
            None => vec![self.samples_per_class; k],
            Some(priors) => {
                let p = &priors[domain];
                let total: f64 = p.iter().sum();
                let budget = (k * self.samples_per_class) as f64;
                p.iter()
                    .map(|w| ((budget * w / total).round() as usize).max(2))
                    .collect()
            }
        }
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

// Orthonormal directions via Gram-Schmidt, scaled so prototypes sit
// `separation` apart pairwise. With more classes than dimensions the extra
// prototypes are random directions on the same sphere.
fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::rng_for(spec.seed, &[0x9707]);
    let radius = spec.class_separation / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..spec.num_classes {
        loop {
            let mut v = gaussian_vec(&mut rng, spec.dim);
            if basis.len() < spec.dim {
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
                break;
            }
        }
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * radius).collect())
        .collect()
}

fn draw_domain(
    spec: &SyntheticSpec,
    protos: &[Vec<f64>],
    domain: usize,
    split: u64,
    keep_labels: bool,
) -> Vec<Sample> {
    let shift = spec.shift(domain);
    let mut rng = rng::rng_for(spec.seed, &[0xD0, domain as u64, split]);
    let mut out = Vec::new();
    for (k, &count) in spec.class_counts(domain).iter().enumerate() {
        for _ in 0..count {
            let mut x: Vec<f64> = protos[k]
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + spec.noise_sigma * z
                })
                .collect();
            shift.apply(&mut x);
            out.push(Sample {
                features: x,
                label: keep_labels.then_some(k),
                domain,
            });
        }
    }
    out
}

/// Class-conditional Gaussians around shared prototypes, pushed through a
/// per-domain affine shift. Sources are domains `0..M`, the target is domain
/// `M`; its training split is unlabelled, its test split labelled.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let protos = prototypes(spec);
    let m = spec.num_sources;
    let sources = (0..m).map(|d| draw_domain(spec, &protos, d, 0, true)).collect();
    let bundle = DatasetBundle {
        sources,
        target_train: draw_domain(spec, &protos, m, 1, false),
        target_test: draw_domain(spec, &protos, m, 2, true),
        num_classes: spec.num_classes,
        dim: spec.dim,
        domain_names: (0..m)
            .map(|i| format!("source{i}"))
            .chain(std::iter::once("target".to_string()))
            .collect(),
    };
    bundle.validate()?;
    Ok(bundle)
}

impl SyntheticSpec {
    /// The default benchmark: 3 sources, 4 classes, 8 dimensions, 200 samples
    /// per class and domain. Each source is rotated in its own planes; the
    /// target is rotated further and translated.
    pub fn benchmark(seed: u64) -> Self {
        let src = |deg: f64, a: usize| DomainShift::rotation(deg).with_planes(vec![[a, a + 4], [a + 1, a + 5]]);
        let mut translation = vec![0.0; 8];
        translation[..4].copy_from_slice(&[1.0, -1.0, 0.5, 0.5]);
        Self {
            num_sources: 3,
            num_classes: 4,
            dim: 8,
            samples_per_class: 200,
            class_separation: 4.0,
            noise_sigma: 1.0,
            seed,
            shifts: vec![
                src(10.0, 0),
                src(-15.0, 1),
                src(20.0, 2),
                DomainShift::rotation(35.0)
                    .with_planes(vec![[0, 1], [2, 3], [4, 5]])
                    .with_translation(translation),
            ],
            class_priors: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::features_of;
    use crate::distance::{mmd2, KernelConfig};

    fn class_mmd(a: &[Sample], b: &[Sample], k: usize) -> f64 {
        let pick = |s: &[Sample]| {
            let rows: Vec<Sample> = s.iter().filter(|x| x.label == Some(k)).cloned().collect();
            features_of(&rows).unwrap()
        };
        mmd2(&pick(a), &pick(b), &KernelConfig::MedianHeuristic).unwrap()
    }

    fn max_identity_class_mmd(n: usize, seed: u64) -> f64 {
        let mut s = small_spec();
        s.samples_per_class = n;
        s.seed = seed;
        let b = generate_synthetic(&s).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..4 {
            for i in 0..3 {
                for j in (i + 1)..3 {
                    worst = worst.max(class_mmd(&b.sources[i], &b.sources[j], k));
                }
            }
        }
        worst
    }

    #[test]
    fn identity_shift_domains_match_per_class() {
        let m200 = max_identity_class_mmd(200, 3);
        assert!(m200 < 0.05, "{m200}");
        let mean = |n| (0..3).map(|s| max_identity_class_mmd(n, s)).sum::<f64>() / 3.0;
        let (small, large) = (mean(50), mean(200));
        assert!(large < small, "{small} -> {large}");
    }

    #[test]
    fn benchmark_target_is_shifted() {
        let b = generate_synthetic(&SyntheticSpec::benchmark(0)).unwrap();
        assert_eq!(b.sources.len(), 3);
        assert_eq!(b.target_test.len(), 800);
        let shifted = class_mmd(&b.sources[0], &b.target_test, 0);
        assert!(shifted > 0.1, "{shifted}");
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_sources: 3,
            num_classes: 4,
            dim: 8,
            samples_per_class: 100,
            class_separation: 4.0,
            noise_sigma: 1.0,
            seed: 1,
            shifts: Vec::new(),
            class_priors: None,
        }
    }

    #[test]
    fn counts() {
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(b.sources.len(), 3);
        for set in &b.sources {
            assert_eq!(set.len(), 400);
            for k in 0..4 {
                assert_eq!(set.iter().filter(|s| s.label == Some(k)).count(), 100);
            }
        }
        assert!(b.target_train.iter().all(|s| s.label.is_none() && s.domain == 3));
        assert!(b.target_test.iter().all(|s| s.label.is_some()));
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 2;
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut s = small_spec();
        s.num_classes = 1;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
        let mut s = small_spec();
        s.samples_per_class = 3;
        assert!(generate_synthetic(&s).is_err());
        let mut s = small_spec();
        s.shifts = vec![DomainShift::rotation(10.0).with_planes(vec![[0, 9]]); 4];
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn prototypes_are_equidistant() {
        let p = prototypes(&small_spec());
        for a in 0..4 {
            for b in (a + 1)..4 {
                let d: f64 = p[a].iter().zip(&p[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d - 4.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_is_affine() {
        let s = DomainShift::rotation(90.0).with_translation(vec![1.0, 0.0, 0.0]);
        let mut x = vec![1.0, 0.0, 5.0];
        s.apply(&mut x);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12 && x[2] == 5.0);
    }

    #[test]
    fn class_priors_change_counts() {
        let mut s = small_spec();
        s.class_priors = Some(vec![vec![1.0; 4], vec![1.0; 4], vec![1.0; 4], vec![3.0, 1.0, 1.0, 1.0]]);
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(b.target_test.iter().filter(|x| x.label == Some(0)).count(), 200);
    }
}
