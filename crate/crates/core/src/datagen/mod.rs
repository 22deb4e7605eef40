//! Deterministic synthetic data: a long-tailed ID mixture, an auxiliary
//! outlier pool, held-out OOD test sets and the mini-batch stream.
//!
//! Geometry (all configurable through [`DatasetSpec`]):
//!
//! * ID class `c` is centered at `R·(cos 2πc/k, sin 2πc/k, 0, …, 0)` with
//!   `R = ring_radius_sigmas · id_sigma`, plus isotropic noise `id_sigma`.
//! * Auxiliary outliers: an equal-weight mixture of `aux_components`
//!   Gaussians with means at radius `aux_radius` along random directions and
//!   isotropic noise `aux_sigma`.
//! * Held-out mixture outliers: the same construction with its own
//!   directions, radius `test_radius` and noise `test_sigma`.
//! * Gaussian noise: i.i.d. `N(0, noise_sigma²)` per dimension.
//! * Rademacher noise: each entry is `-1` or `+1` with equal probability.
//! * Blobs: `blob_centers` centers uniform in `[-blob_extent, blob_extent]^d`;
//!   each sample picks a center uniformly and adds noise `blob_sigma`.

mod batches;
mod export;
mod groups;

pub use batches::{sample_batches, BatchStream};
pub use export::{to_csv_string, write_csv};
pub use groups::{designate_head_tail, ClassGroup, HeadTail};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{streams, DenseMatrix, Rng};
use crate::error::{CoclError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub imbalance_ratio: f64,
    pub n_max: usize,
    pub head_pct: f64,
    pub tail_pct: f64,
    pub test_per_class: usize,
    pub aux_size: usize,
    pub test_ood_size: usize,
    pub id_sigma: f64,
    pub ring_radius_sigmas: f64,
    pub aux_components: usize,
    pub aux_radius: f64,
    pub aux_sigma: f64,
    pub test_components: usize,
    pub test_radius: f64,
    pub test_sigma: f64,
    pub noise_sigma: f64,
    pub blob_centers: usize,
    pub blob_extent: f64,
    pub blob_sigma: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 8,
            imbalance_ratio: 100.0,
            n_max: 2000,
            head_pct: 0.4,
            tail_pct: 0.4,
            test_per_class: 100,
            aux_size: 5000,
            test_ood_size: 1000,
            id_sigma: 0.25,
            ring_radius_sigmas: 4.0,
            aux_components: 32,
            aux_radius: 2.5,
            aux_sigma: 1.0,
            test_components: 8,
            test_radius: 1.75,
            test_sigma: 0.25,
            noise_sigma: 1.0,
            blob_centers: 5,
            blob_extent: 2.0,
            blob_sigma: 0.1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CoclError::validation("need at least 2 ID classes"));
        }
        if self.input_dim < 2 {
            return Err(CoclError::validation("input_dim must be at least 2"));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(CoclError::validation("imbalance_ratio must be finite and >= 1"));
        }
        for (name, v) in [("head_pct", self.head_pct), ("tail_pct", self.tail_pct)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoclError::validation(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.head_pct + self.tail_pct > 1.0 + 1e-12 {
            return Err(CoclError::validation("head_pct + tail_pct must not exceed 1"));
        }
        for (name, v) in [
            ("test_per_class", self.test_per_class),
            ("aux_size", self.aux_size),
            ("test_ood_size", self.test_ood_size),
            ("aux_components", self.aux_components),
            ("test_components", self.test_components),
            ("blob_centers", self.blob_centers),
        ] {
            if v == 0 {
                return Err(CoclError::validation(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("id_sigma", self.id_sigma),
            ("aux_sigma", self.aux_sigma),
            ("test_sigma", self.test_sigma),
            ("noise_sigma", self.noise_sigma),
            ("blob_sigma", self.blob_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoclError::validation(format!("{name} must be positive")));
            }
        }
        longtail_counts(self.num_classes, self.n_max, self.imbalance_ratio).map(|_| ())
    }

    pub fn counts(&self) -> Result<Vec<usize>> {
        longtail_counts(self.num_classes, self.n_max, self.imbalance_ratio)
    }

    pub fn ring_radius(&self) -> f64 {
        self.ring_radius_sigmas * self.id_sigma
    }

    /// Center of ID class `c`.
    pub fn class_center(&self, c: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / self.num_classes as f64;
        let mut v = vec![0.0; self.input_dim];
        v[0] = self.ring_radius() * angle.cos();
        v[1] = self.ring_radius() * angle.sin();
        v
    }
}

/// `N_i = round(n_max · ρ^(-i/(k-1)))` for zero-based `i`, largest first.
pub fn longtail_counts(k: usize, n_max: usize, rho: f64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(CoclError::validation("need at least 2 classes"));
    }
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(CoclError::validation(format!("imbalance ratio must be >= 1, got {rho}")));
    }
    let counts: Vec<usize> = (0..k)
        .map(|i| (n_max as f64 * rho.powf(-(i as f64) / (k - 1) as f64)).round() as usize)
        .collect();
    if counts[k - 1] < 1 {
        return Err(CoclError::validation(format!(
            "n_max = {n_max} with ratio {rho} leaves the smallest class empty"
        )));
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    IdTrain,
    IdTest,
    AuxOod,
    TestOod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub inputs: DenseMatrix,
    /// Present exactly for ID splits.
    pub labels: Option<Vec<usize>>,
    pub split: SplitTag,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Held-out OOD test distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    Mixture,
    Gaussian,
    Rademacher,
    Blobs,
}

impl OodKind {
    pub const ALL: [OodKind; 4] = [OodKind::Mixture, OodKind::Gaussian, OodKind::Rademacher, OodKind::Blobs];

    pub fn name(self) -> &'static str {
        match self {
            OodKind::Mixture => "mixture",
            OodKind::Gaussian => "gaussian",
            OodKind::Rademacher => "rademacher",
            OodKind::Blobs => "blobs",
        }
    }
}

impl fmt::Display for OodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OodKind {
    type Err = CoclError;

    fn from_str(s: &str) -> Result<Self> {
        OodKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoclError::validation(format!("unknown OOD kind '{s}'")))
    }
}

fn isotropic(center: &[f64], sigma: f64, rng: &mut Rng, out: &mut Vec<f64>) {
    out.extend(center.iter().map(|&m| m + sigma * rng.normal()));
}

/// Long-tailed training split and balanced test split.
pub fn gen_id_mixture(spec: &DatasetSpec, rng: &mut Rng) -> Result<(SampleSet, SampleSet)> {
    spec.validate()?;
    let counts = spec.counts()?;
    let d = spec.input_dim;
    let centers: Vec<Vec<f64>> = (0..spec.num_classes).map(|c| spec.class_center(c)).collect();
    let mut build = |sizes: &[usize], split| -> Result<SampleSet> {
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(total * d);
        let mut labels = Vec::with_capacity(total);
        for (c, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                isotropic(&centers[c], spec.id_sigma, rng, &mut data);
                labels.push(c);
            }
        }
        Ok(SampleSet {
            inputs: DenseMatrix::new(total, d, data)?,
            labels: Some(labels),
            split,
        })
    };
    let train = build(&counts, SplitTag::IdTrain)?;
    let test = build(&vec![spec.test_per_class; spec.num_classes], SplitTag::IdTest)?;
    Ok((train, test))
}

/// Component means at `radius` along random unit directions.
pub fn mixture_means(components: usize, dim: usize, radius: f64, rng: &mut Rng) -> DenseMatrix {
    let data: Vec<f64> = (0..components)
        .flat_map(|_| rng.unit_vector(dim).into_iter().map(move |v| v * radius))
        .collect();
    DenseMatrix::new(components, dim, data).expect("shape by construction")
}

fn sample_mixture(means: &DenseMatrix, sigma: f64, size: usize, rng: &mut Rng, split: SplitTag) -> Result<SampleSet> {
    let d = means.cols();
    let mut data = Vec::with_capacity(size * d);
    for _ in 0..size {
        let c = rng.index(means.rows());
        isotropic(means.row(c), sigma, rng, &mut data);
    }
    Ok(SampleSet {
        inputs: DenseMatrix::new(size, d, data)?,
        labels: None,
        split,
    })
}

/// Auxiliary training outliers. The first draws from `rng` fix the component
/// means; [`aux_means`] reproduces them from an identically seeded generator.
pub fn gen_aux_ood(spec: &DatasetSpec, rng: &mut Rng, size: usize) -> Result<SampleSet> {
    spec.validate()?;
    let means = aux_means(spec, rng);
    sample_mixture(&means, spec.aux_sigma, size, rng, SplitTag::AuxOod)
}

pub fn aux_means(spec: &DatasetSpec, rng: &mut Rng) -> DenseMatrix {
    mixture_means(spec.aux_components, spec.input_dim, spec.aux_radius, rng)
}

/// Held-out OOD test set of the given kind.
pub fn gen_test_ood(kind: OodKind, spec: &DatasetSpec, size: usize, rng: &mut Rng) -> Result<SampleSet> {
    spec.validate()?;
    let d = spec.input_dim;
    match kind {
        OodKind::Mixture => {
            let means = mixture_means(spec.test_components, d, spec.test_radius, rng);
            sample_mixture(&means, spec.test_sigma, size, rng, SplitTag::TestOod)
        }
        OodKind::Gaussian => {
            let data = (0..size * d).map(|_| spec.noise_sigma * rng.normal()).collect();
            test_set(size, d, data)
        }
        OodKind::Rademacher => {
            let data = (0..size * d).map(|_| rng.sign()).collect();
            test_set(size, d, data)
        }
        OodKind::Blobs => {
            let e = spec.blob_extent;
            let centers = DenseMatrix::from_fn(spec.blob_centers, d, |_, _| rng.uniform_range(-e, e));
            sample_mixture(&centers, spec.blob_sigma, size, rng, SplitTag::TestOod)
        }
    }
}

/// Gaussian, Rademacher or blob noise with the default noise parameters.
pub fn gen_synthetic_ood(kind: OodKind, input_dim: usize, size: usize, rng: &mut Rng) -> Result<SampleSet> {
    if kind == OodKind::Mixture {
        return Err(CoclError::validation("mixture is not a synthetic noise kind"));
    }
    let spec = DatasetSpec {
        input_dim,
        ..DatasetSpec::default()
    };
    gen_test_ood(kind, &spec, size, rng)
}

fn test_set(size: usize, d: usize, data: Vec<f64>) -> Result<SampleSet> {
    Ok(SampleSet {
        inputs: DenseMatrix::new(size, d, data)?,
        labels: None,
        split: SplitTag::TestOod,
    })
}

/// Every split of one seeded benchmark instance.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub spec: DatasetSpec,
    pub counts: Vec<usize>,
    pub groups: HeadTail,
    pub id_train: SampleSet,
    pub id_test: SampleSet,
    pub aux_ood: SampleSet,
    pub test_ood: Vec<(OodKind, SampleSet)>,
}

impl Datasets {
    /// Each split draws from its own stream of `seed`, so adding or resizing
    /// one split leaves the others unchanged.
    pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let counts = spec.counts()?;
        let groups = designate_head_tail(&counts, spec.head_pct, spec.tail_pct)?;
        let (id_train, id_test) = gen_id_mixture(spec, &mut Rng::for_stream(seed, streams::ID_DATA))?;
        let aux_ood = gen_aux_ood(spec, &mut Rng::for_stream(seed, streams::AUX_OOD), spec.aux_size)?;
        let test_ood = OodKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let mut rng = Rng::for_stream(seed, streams::TEST_OOD + i as u64);
                gen_test_ood(kind, spec, spec.test_ood_size, &mut rng).map(|s| (kind, s))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            counts,
            groups,
            id_train,
            id_test,
            aux_ood,
            test_ood,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::sq_dist;

    #[test]
    fn counts_endpoints() {
        assert_eq!(longtail_counts(5, 40, 1.0).unwrap(), vec![40; 5]);
        assert_eq!(longtail_counts(2, 100, 100.0).unwrap(), vec![100, 1]);
        assert!(longtail_counts(10, 10, 100.0).is_err());
        assert!(longtail_counts(1, 10, 1.0).is_err());
        assert!(longtail_counts(3, 10, 0.5).is_err());
    }

    #[test]
    fn counts_k10_frozen() {
        // round(500 · 100^(-i/9)), evaluated independently with mpmath
        let expected = [500, 300, 180, 108, 65, 39, 23, 14, 8, 5];
        assert_eq!(longtail_counts(10, 500, 100.0).unwrap(), expected);
    }

    #[test]
    fn id_train_follows_counts_and_test_is_balanced() {
        let spec = DatasetSpec {
            n_max: 60,
            imbalance_ratio: 10.0,
            num_classes: 4,
            test_per_class: 7,
            ..DatasetSpec::default()
        };
        let (train, test) = gen_id_mixture(&spec, &mut Rng::new(3)).unwrap();
        let counts = spec.counts().unwrap();
        let labels = train.labels.unwrap();
        for (c, &n) in counts.iter().enumerate() {
            assert_eq!(labels.iter().filter(|&&y| y == c).count(), n);
        }
        let tl = test.labels.unwrap();
        assert!((0..4).all(|c| tl.iter().filter(|&&y| y == c).count() == 7));
        assert_eq!(train.split, SplitTag::IdTrain);
    }

    #[test]
    fn class_means_near_centers() {
        let spec = DatasetSpec {
            n_max: 400,
            imbalance_ratio: 4.0,
            num_classes: 3,
            ..DatasetSpec::default()
        };
        let (train, _) = gen_id_mixture(&spec, &mut Rng::new(5)).unwrap();
        let labels = train.labels.as_ref().unwrap();
        for (c, &n) in spec.counts().unwrap().iter().enumerate() {
            let center = spec.class_center(c);
            let bound = 3.0 * spec.id_sigma / (n as f64).sqrt();
            for j in 0..spec.input_dim {
                let mean: f64 = (0..train.len())
                    .filter(|&i| labels[i] == c)
                    .map(|i| train.inputs.get(i, j))
                    .sum::<f64>()
                    / n as f64;
                assert!((mean - center[j]).abs() < bound, "class {c} dim {j}");
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = DatasetSpec::default();
        let a = Datasets::generate(&spec, 11).unwrap();
        let b = Datasets::generate(&spec, 11).unwrap();
        assert_eq!(a.id_train, b.id_train);
        assert_eq!(a.aux_ood, b.aux_ood);
        assert_eq!(a.test_ood, b.test_ood);
        let c = Datasets::generate(&spec, 12).unwrap();
        assert_ne!(a.aux_ood, c.aux_ood);
    }

    #[test]
    fn aux_means_are_far_from_id_centers() {
        let spec = DatasetSpec::default();
        let means = aux_means(&spec, &mut Rng::new(1));
        let bound = 5.0 * spec.id_sigma;
        for m in means.iter_rows() {
            for c in 0..spec.num_classes {
                assert!(sq_dist(m, &spec.class_center(c)).sqrt() > bound);
            }
        }
    }

    #[test]
    fn aux_sample_statistics() {
        // well-separated components so nearest-mean assignment is reliable
        let spec = DatasetSpec {
            aux_sigma: 0.5,
            ..DatasetSpec::default()
        };
        let means = aux_means(&spec, &mut Rng::new(2));
        let set = gen_aux_ood(&spec, &mut Rng::new(2), 20000).unwrap();
        // each sample is assigned to its nearest mean; residual variance should be aux_sigma²
        let d = spec.input_dim;
        let mut resid = 0.0;
        let mut grand = vec![0.0; d];
        for row in set.inputs.iter_rows() {
            let c = (0..means.rows())
                .min_by(|&a, &b| sq_dist(row, means.row(a)).total_cmp(&sq_dist(row, means.row(b))))
                .unwrap();
            resid += sq_dist(row, means.row(c));
            for (g, v) in grand.iter_mut().zip(row) {
                *g += v;
            }
        }
        let var = resid / (set.len() * d) as f64;
        assert!((var / spec.aux_sigma.powi(2) - 1.0).abs() < 0.1, "{var}");
        // grand mean ≈ average of component means
        for j in 0..d {
            let expected: f64 = (0..means.rows()).map(|c| means.get(c, j)).sum::<f64>() / means.rows() as f64;
            let got = grand[j] / set.len() as f64;
            assert!((got - expected).abs() < 0.08, "dim {j}: {got} vs {expected}");
        }
    }

    #[test]
    fn rademacher_entries_are_signs() {
        let set = gen_synthetic_ood(OodKind::Rademacher, 6, 500, &mut Rng::new(4)).unwrap();
        assert!(set.inputs.data().iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(set.labels.is_none());
    }

    #[test]
    fn gaussian_variance() {
        let set = gen_synthetic_ood(OodKind::Gaussian, 4, 10_000, &mut Rng::new(6)).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..set.len()).map(|i| set.inputs.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!((var - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("Blobs".parse::<OodKind>().unwrap(), OodKind::Blobs);
        assert!(matches!("uniform".parse::<OodKind>(), Err(CoclError::Validation(_))));
        assert!(gen_synthetic_ood(OodKind::Mixture, 4, 1, &mut Rng::new(0)).is_err());
    }
}
