//! Labeled datasets, Dirichlet label-skew partitioning and label distributions.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::rng::{seeded, SimRng};

/// Dense, row-major feature matrix plus integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        n_features: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(FedError::domain("dataset must contain at least one sample"));
        }
        if n_features == 0 || features.len() != labels.len() * n_features {
            return Err(FedError::domain(format!(
                "feature matrix has {} entries, expected {} x {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if n_classes < 2 {
            return Err(FedError::domain("need at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(FedError::domain(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(FedError::domain("features contain NaN or Inf"));
        }
        Ok(Self {
            features,
            labels,
            n_features,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Copies the given rows into a new dataset with the same class count.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(FedError::domain(format!("sample index {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.n_features, self.n_classes)
    }

    /// Indices of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Reads a CSV with header `f0,..,f{d-1},label`.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let n_cols = headers.len();
        if n_cols < 2 || &headers[n_cols - 1] != "label" {
            return Err(FedError::config(format!(
                "{}: last column must be `label`",
                path.display()
            )));
        }
        for (j, h) in headers.iter().take(n_cols - 1).enumerate() {
            if h != format!("f{j}") {
                return Err(FedError::config(format!(
                    "{}: expected column `f{j}`, found `{h}`",
                    path.display()
                )));
            }
        }
        let d = n_cols - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            for j in 0..d {
                let v: f64 = rec[j].trim().parse().map_err(|_| {
                    FedError::config(format!(
                        "{}: row {}: `{}` is not a number",
                        path.display(),
                        line + 1,
                        &rec[j]
                    ))
                })?;
                features.push(v);
            }
            let label: usize = rec[d].trim().parse().map_err(|_| {
                FedError::config(format!(
                    "{}: row {}: label `{}` is not a non-negative integer",
                    path.display(),
                    line + 1,
                    &rec[d]
                ))
            })?;
            labels.push(label);
        }
        let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
        Dataset::new(features, labels, d, n_classes)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> FedError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => FedError::Io(io),
            _ => unreachable!(),
        }
    } else {
        FedError::config(format!("{}: {e}", path.display()))
    }
}

/// Isotropic Gaussian blobs, one per class, with centroids on a sphere of
/// radius `class_separation`. Samples are laid out class by class.
pub fn generate_synthetic(
    seed: u64,
    n_classes: usize,
    n_features: usize,
    n_per_class: usize,
    class_separation: f64,
) -> Result<Dataset> {
    if n_classes < 2 || n_features < 2 || n_per_class < 10 {
        return Err(FedError::config(format!(
            "synthetic data needs n_classes >= 2, n_features >= 2, n_per_class >= 10 \
             (got {n_classes}, {n_features}, {n_per_class})"
        )));
    }
    if !(class_separation > 0.0 && class_separation.is_finite()) {
        return Err(FedError::config("class_separation must be positive"));
    }
    let mut rng = seeded(seed);
    let centroids: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..n_features)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x *= class_separation / norm);
            v
        })
        .collect();
    let n = n_classes * n_per_class;
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);
    for (c, centroid) in centroids.iter().enumerate() {
        for _ in 0..n_per_class {
            for &mu in centroid {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, n_features, n_classes)
}

/// One client's slice of the training data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub sample_indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
}

/// Splits every class across `k` clients with proportions drawn from
/// `Dirichlet(alpha * 1_k)`, rounding counts by largest remainder. Clients left
/// empty after rounding take one sample from the current largest shard.
pub fn dirichlet_partition(
    dataset: &Dataset,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if k < 2 {
        return Err(FedError::config("K must be at least 2"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::config("dirichlet alpha must be positive"));
    }
    if k > dataset.len() {
        return Err(FedError::config(format!(
            "K = {k} exceeds the number of samples ({})",
            dataset.len()
        )));
    }
    let mut rng = seeded(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FedError::config(e.to_string()))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];

    for mut idx in dataset.indices_by_class() {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let props = dirichlet_draw(&gamma, k, &mut rng);
        let counts = largest_remainder(&props, idx.len());
        let mut start = 0;
        for (client, &count) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&idx[start..start + count]);
            start += count;
        }
    }

    repair_empty(&mut shards);

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut sample_indices)| {
            sample_indices.sort_unstable();
            ClientShard {
                client_id,
                sample_indices,
            }
        })
        .collect())
}

fn dirichlet_draw(gamma: &Gamma<f64>, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed; the limit puts all mass on one client
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Integer counts summing to `total`, proportional to `props`. Leftover units
/// go to the largest fractional parts, ties to the lower index.
pub(crate) fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn repair_empty(shards: &mut [Vec<usize>]) {
    loop {
        let Some(empty) = shards.iter().position(|s| s.is_empty()) else {
            return;
        };
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least two shards");
        let stolen = shards[donor].pop().expect("donor shard is non-empty");
        shards[empty].push(stolen);
    }
}

/// Stratified held-out split. Returns `(train_indices, test_indices)`, both sorted.
pub fn stratified_split(
    dataset: &Dataset,
    test_fraction: f64,
    rng: &mut SimRng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(FedError::config("test_fraction must lie in (0, 1)"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut idx in dataset.indices_by_class() {
        idx.shuffle(rng);
        let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(idx.len().saturating_sub(1));
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    if test.is_empty() {
        return Err(FedError::config("test split is empty; increase test_fraction"));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(FedError::domain("label distribution entries must be finite and >= 0"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FedError::domain(format!("label distribution sums to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Empirical class frequencies of a shard.
pub fn label_distribution(
    dataset: &Dataset,
    shard: &ClientShard,
    n_classes: usize,
) -> Result<LabelDistribution> {
    if shard.is_empty() {
        return Err(FedError::domain(format!(
            "client {} has an empty shard",
            shard.client_id
        )));
    }
    let mut counts = vec![0usize; n_classes];
    for &i in &shard.sample_indices {
        let l = dataset.label(i);
        if l >= n_classes {
            return Err(FedError::domain(format!("label {l} >= n_classes {n_classes}")));
        }
        counts[l] += 1;
    }
    let n = shard.len() as f64;
    Ok(LabelDistribution {
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// How the reference distribution for the diversity score is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageMode {
    /// Unweighted mean over clients.
    #[default]
    ClientUniform,
    /// Mean weighted by each client's sample count.
    SampleWeighted,
}

/// Unweighted element-wise mean of client distributions.
pub fn average_distribution(distributions: &[LabelDistribution]) -> Result<LabelDistribution> {
    let weights = vec![1.0; distributions.len()];
    weighted_average_distribution(distributions, &weights)
}

pub fn weighted_average_distribution(
    distributions: &[LabelDistribution],
    weights: &[f64],
) -> Result<LabelDistribution> {
    let first = distributions
        .first()
        .ok_or_else(|| FedError::domain("cannot average an empty list of distributions"))?;
    if weights.len() != distributions.len() {
        return Err(FedError::domain("one weight per distribution is required"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(FedError::domain("weights must be non-negative with positive sum"));
    }
    let c = first.len();
    let mut out = vec![0.0; c];
    for (d, w) in distributions.iter().zip(weights) {
        if d.len() != c {
            return Err(FedError::domain(format!(
                "distribution lengths differ ({} vs {c})",
                d.len()
            )));
        }
        for (o, p) in out.iter_mut().zip(&d.probs) {
            *o += w * p;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(LabelDistribution { probs: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ld(p: &[f64]) -> LabelDistribution {
        LabelDistribution { probs: p.to_vec() }
    }

    fn shard_of(labels: &[usize], c: usize) -> (Dataset, ClientShard) {
        let ds = Dataset::new(vec![0.0; labels.len() * 2], labels.to_vec(), 2, c).unwrap();
        let shard = ClientShard {
            client_id: 0,
            sample_indices: (0..labels.len()).collect(),
        };
        (ds, shard)
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = generate_synthetic(1, 2, 2, 10, 5.0).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.labels().iter().filter(|&&l| l == 0).count(), 10);
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 10);
        let b = generate_synthetic(1, 2, 2, 10, 5.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_is_separable_by_nearest_centroid() {
        let ds = generate_synthetic(1, 3, 4, 200, 10.0).unwrap();
        // oracle: centroids estimated from the data, then nearest-centroid rule
        let mut cent = vec![vec![0.0; 4]; 3];
        for i in 0..ds.len() {
            for (c, x) in cent[ds.label(i)].iter_mut().zip(ds.row(i)) {
                *c += x / 200.0;
            }
        }
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = ds.row(i);
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let da: f64 = cent[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                        let db: f64 = cent[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == ds.label(i)
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 > 0.95);
    }

    #[test]
    fn synthetic_rejects_bad_dimensions() {
        assert!(matches!(generate_synthetic(1, 1, 2, 10, 1.0), Err(FedError::Config(_))));
        assert!(matches!(generate_synthetic(1, 2, 1, 10, 1.0), Err(FedError::Config(_))));
        assert!(matches!(generate_synthetic(1, 2, 2, 9, 1.0), Err(FedError::Config(_))));
        assert!(matches!(generate_synthetic(1, 2, 2, 10, 0.0), Err(FedError::Config(_))));
    }

    #[test]
    fn huge_alpha_gives_near_uniform_shards() {
        let ds = generate_synthetic(3, 4, 2, 400, 3.0).unwrap();
        let shards = dirichlet_partition(&ds, 4, 1e6, 11).unwrap();
        for s in &shards {
            let p = label_distribution(&ds, s, 4).unwrap();
            let tv: f64 = p.probs.iter().map(|x| (x - 0.25).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.05, "tv {tv}");
        }
    }

    fn mean_max_fraction(alpha: f64, seeds: u64) -> f64 {
        let ds = generate_synthetic(5, 10, 2, 60, 3.0).unwrap();
        let mut acc = 0.0;
        for seed in 0..seeds {
            let shards = dirichlet_partition(&ds, 12, alpha, seed).unwrap();
            let m: f64 = shards
                .iter()
                .map(|s| {
                    let p = label_distribution(&ds, s, 10).unwrap();
                    p.probs.iter().cloned().fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 12.0;
            acc += m;
        }
        acc / seeds as f64
    }

    #[test]
    fn skew_shrinks_with_alpha() {
        let fr: Vec<f64> = [0.1, 1.0, 10.0, 1e6]
            .iter()
            .map(|&a| mean_max_fraction(a, 50))
            .collect();
        assert!(fr[0] > mean_max_fraction(10.0, 50));
        for w in fr.windows(2) {
            assert!(w[0] >= w[1], "{fr:?}");
        }
    }

    #[test]
    fn partition_errors() {
        let ds = generate_synthetic(1, 2, 2, 10, 5.0).unwrap();
        assert!(dirichlet_partition(&ds, 21, 1.0, 0).is_err());
        assert!(dirichlet_partition(&ds, 1, 1.0, 0).is_err());
        assert!(dirichlet_partition(&ds, 2, 0.0, 0).is_err());
    }

    #[test]
    fn tiny_alpha_still_fills_every_shard() {
        let ds = generate_synthetic(1, 2, 2, 10, 5.0).unwrap();
        let shards = dirichlet_partition(&ds, 20, 1e-3, 4).unwrap();
        assert!(shards.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 3), vec![1, 1, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.6, 0.4], 7), vec![4, 3]);
    }

    #[test]
    fn label_distribution_counts() {
        let (ds, s) = shard_of(&[0, 0, 1, 1], 2);
        assert_eq!(label_distribution(&ds, &s, 2).unwrap().probs, vec![0.5, 0.5]);
        let (ds, s) = shard_of(&[2, 2, 2], 3);
        assert_eq!(label_distribution(&ds, &s, 3).unwrap().probs, vec![0.0, 0.0, 1.0]);
        let empty = ClientShard {
            client_id: 3,
            sample_indices: vec![],
        };
        assert!(matches!(label_distribution(&ds, &empty, 3), Err(FedError::Domain(_))));
    }

    #[test]
    fn averages() {
        let avg = average_distribution(&[ld(&[1.0, 0.0]), ld(&[0.0, 1.0])]).unwrap();
        assert_eq!(avg.probs, vec![0.5, 0.5]);
        let p = ld(&[0.2, 0.3, 0.5]);
        assert_eq!(average_distribution(std::slice::from_ref(&p)).unwrap(), p);
        let same = average_distribution(&vec![p.clone(); 5]).unwrap();
        for (a, b) in same.probs.iter().zip(&p.probs) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(average_distribution(&[ld(&[1.0]), ld(&[0.5, 0.5])]).is_err());
        assert!(average_distribution(&[]).is_err());
        let w = weighted_average_distribution(&[ld(&[1.0, 0.0]), ld(&[0.0, 1.0])], &[3.0, 1.0])
            .unwrap();
        assert_eq!(w.probs, vec![0.75, 0.25]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "f0,f1,label\n1.0,2.0,0\n-1.5,0.25,2\n").unwrap();
        let ds = Dataset::from_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.n_classes(), 3);
        assert_eq!(ds.row(1), &[-1.5, 0.25]);
        std::fs::write(&path, "a,b,label\n1,2,0\n").unwrap();
        assert!(matches!(Dataset::from_csv(&path), Err(FedError::Config(_))));
        std::fs::write(&path, "f0,label\n1,x\n").unwrap();
        assert!(matches!(Dataset::from_csv(&path), Err(FedError::Config(_))));
    }

    #[test]
    fn stratified_split_covers_everything() {
        let ds = generate_synthetic(2, 3, 2, 50, 4.0).unwrap();
        let (train, test) = stratified_split(&ds, 0.2, &mut seeded(1)).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.len(), 30);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ds.all_indices());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_is_exact_and_deterministic(
            seed in 0u64..1000,
            k in 2usize..16,
            alpha in 0.01f64..100.0,
        ) {
            let ds = generate_synthetic(seed, 5, 2, 12, 2.0).unwrap();
            let shards = dirichlet_partition(&ds, k, alpha, seed).unwrap();
            prop_assert_eq!(shards.len(), k);
            let mut all: Vec<usize> = shards.iter().flat_map(|s| s.sample_indices.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, ds.all_indices());
            prop_assert!(shards.iter().all(|s| !s.is_empty()));
            prop_assert_eq!(shards, dirichlet_partition(&ds, k, alpha, seed).unwrap());
        }
    }
}
