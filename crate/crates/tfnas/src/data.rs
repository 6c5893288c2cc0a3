//! Seeded Gaussian-mixture classification data.
//!
//! Deterministic by seed, stratified 80/10/10 into train/val/test. Search
//! runs further split the train portion 80/20 into weight and architecture
//! subsets (also stratified and deterministic).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub class_count: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    pub seed: u64,
}

fn default_center_scale() -> f64 {
    1.0
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Data("class_count must be >= 2".into()));
        }
        if self.input_dim < 1 {
            return Err(Error::Data("input_dim must be >= 1".into()));
        }
        if self.samples_per_class < 10 {
            return Err(Error::Data("samples_per_class must be >= 10".into()));
        }
        if !(self.cluster_spread > 0.0) {
            return Err(Error::Data("cluster_spread must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DataSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("data spec line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DataSpec,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }
}

/// Generate the mixture: per-class centers drawn once, samples clustered
/// around them, then a stratified 80/10/10 split.
pub fn generate(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * spec.center_scale
                })
                .collect()
        })
        .collect();

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z * spec.cluster_spread
                })
                .collect();
            features.push(x);
            labels.push(c);
        }
    }

    // stratified 80/10/10 with a per-class shuffle
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for c in 0..spec.class_count {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        shuffle(&mut idx, &mut rng);
        let n = idx.len();
        let n_train = (n * 8) / 10;
        let n_val = n / 10;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    Ok(Dataset {
        spec: spec.clone(),
        features,
        labels,
        train,
        val,
        test,
    })
}

fn shuffle<R: Rng>(idx: &mut [usize], rng: &mut R) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

/// Split the train portion 80/20 into weight-update and architecture-update
/// subsets: stratified by class, disjoint, deterministic by seed.
pub fn search_split(ds: &Dataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0511_u64);
    let mut weights = Vec::new();
    let mut arch = Vec::new();
    for c in 0..ds.class_count() {
        let mut idx: Vec<usize> = ds
            .train
            .iter()
            .cloned()
            .filter(|&i| ds.labels[i] == c)
            .collect();
        shuffle(&mut idx, &mut rng);
        let n_w = (idx.len() * 8) / 10;
        weights.extend_from_slice(&idx[..n_w]);
        arch.extend_from_slice(&idx[n_w..]);
    }
    weights.sort_unstable();
    arch.sort_unstable();
    (weights, arch)
}

/// Deterministic per-epoch batch order.
pub fn epoch_batches<R: Rng>(indices: &[usize], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    shuffle(&mut order, rng);
    order
        .chunks(batch)
        .filter(|c| c.len() == batch)
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DataSpec {
        DataSpec {
            class_count: 4,
            input_dim: 6,
            samples_per_class: 50,
            cluster_spread: 0.4,
            center_scale: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic_and_stratified() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.features.iter().zip(&b.features) {
            for (u, v) in x.iter().zip(y) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert_eq!(a.train.len(), 160);
        assert_eq!(a.val.len(), 20);
        assert_eq!(a.test.len(), 20);
        for c in 0..4 {
            let n = a.train.iter().filter(|&&i| a.labels[i] == c).count();
            assert_eq!(n, 40);
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let ds = generate(&spec()).unwrap();
        let mut all: Vec<usize> = ds
            .train
            .iter()
            .chain(&ds.val)
            .chain(&ds.test)
            .cloned()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), ds.features.len());
    }

    #[test]
    fn search_split_is_deterministic_disjoint_and_80_20() {
        let ds = generate(&spec()).unwrap();
        let (w1, a1) = search_split(&ds, 5);
        let (w2, a2) = search_split(&ds, 5);
        assert_eq!(w1, w2);
        assert_eq!(a1, a2);
        assert!(w1.iter().all(|i| !a1.contains(i)));
        assert_eq!(w1.len() + a1.len(), ds.train.len());
        assert_eq!(w1.len(), (ds.train.len() * 8) / 10);
        // different seed reshuffles
        let (w3, _) = search_split(&ds, 6);
        assert_ne!(w1, w3);
    }
}
