//! Embedding datasets: file formats, client partitioning, batching and
//! synthetic blobs.

mod format;

pub use format::{
    load_dataset, parse_csv, read_binary, save_dataset, write_binary, DatasetFormat, DATASET_MAGIC, DATASET_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
    pub source_name: String,
}

impl EmbeddingDataset {
    pub fn new(x: Matrix, labels: Option<Vec<usize>>, source_name: impl Into<String>) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::invalid("embeddings contain non-finite values"));
        }
        if let Some(l) = &labels {
            if l.len() != x.rows() {
                return Err(Error::invalid(format!("{} labels for {} rows", l.len(), x.rows())));
            }
        }
        Ok(Self {
            x,
            labels,
            source_name: source_name.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// Number of distinct label values implied by the largest label.
    pub fn label_count(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Checks every label is below `k`.
    pub fn validate_labels(&self, k: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some((i, &bad)) = l.iter().enumerate().find(|(_, &v)| v >= k) {
                return Err(Error::invalid(format!("label {bad} at row {i} is not below K={k}")));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> EmbeddingDataset {
        EmbeddingDataset {
            x: self.x.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            source_name: name.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    /// Two clients with proportions `(5+ρ):(5−ρ)`.
    #[serde(alias = "quantity-skew")]
    Skew,
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iid" => Ok(PartitionMode::Iid),
            "skew" | "quantity-skew" | "non-iid" => Ok(PartitionMode::Skew),
            other => Err(Error::invalid(format!(
                "unknown partition mode `{other}` (expected iid or skew)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub m: usize,
    pub rho: u32,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(m: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::Iid,
            m,
            rho: 0,
            seed,
        }
    }

    pub fn skew(rho: u32, seed: u64) -> Self {
        Self {
            mode: PartitionMode::Skew,
            m: 2,
            rho,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PartitionMode::Iid if self.rho != 0 => Err(Error::invalid("IID partition requires rho = 0")),
            PartitionMode::Iid if self.m == 0 => Err(Error::invalid("need at least one client")),
            PartitionMode::Skew if self.m != 2 => Err(Error::invalid("quantity-skew partition requires m = 2")),
            PartitionMode::Skew if !(1..=4).contains(&self.rho) => {
                Err(Error::invalid("quantity-skew partition requires rho in 1..=4"))
            }
            _ => Ok(()),
        }
    }

    /// Shard sizes for `n` samples.
    pub fn sizes(&self, n: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if self.m > n {
            return Err(Error::invalid(format!(
                "cannot split {n} samples over {} clients",
                self.m
            )));
        }
        Ok(match self.mode {
            PartitionMode::Iid => {
                let (base, rem) = (n / self.m, n % self.m);
                (0..self.m).map(|i| base + usize::from(i < rem)).collect()
            }
            PartitionMode::Skew => {
                let first = n * (5 + self.rho as usize) / 10;
                vec![first, n - first]
            }
        })
    }
}

/// One client's slice of a dataset, with the original row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub indices: Vec<usize>,
    pub data: EmbeddingDataset,
}

/// Shuffles with the spec's seed and splits into consecutive shards.
pub fn partition(ds: &EmbeddingDataset, spec: &PartitionSpec) -> Result<Vec<Shard>> {
    let sizes = spec.sizes(ds.n())?;
    let order = Rng::new(spec.seed).permutation(ds.n());
    let mut start = 0;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let indices = order[start..start + len].to_vec();
            start += len;
            let data = ds.subset(&indices, format!("{}.shard{i}", ds.source_name));
            Shard { indices, data }
        })
        .collect())
}

/// One epoch of shuffled batches; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    rng.permutation(n).chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Endless batch iterator that reshuffles at every epoch boundary.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    pending: std::collections::VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize) -> Self {
        Self {
            n,
            batch_size: batch_size.max(1),
            pending: Default::default(),
        }
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> Vec<usize> {
        if self.pending.is_empty() {
            self.pending.extend(batches(self.n, self.batch_size, rng));
        }
        self.pending.pop_front().unwrap_or_default()
    }
}

/// `k` isotropic Gaussian blobs with balanced sizes (`label = i mod k`).
///
/// Centers sit on scaled coordinate axes when `k ≤ d`, which puts every pair
/// exactly `separation` apart; otherwise they are drawn at random and
/// rejected until all pairs are at least `separation` apart.
pub fn synth_blobs(
    k: usize,
    n: usize,
    d: usize,
    separation: f64,
    noise: f64,
    rng: &mut Rng,
) -> Result<EmbeddingDataset> {
    if k == 0 || d == 0 || k > n {
        return Err(Error::invalid(format!("invalid blob shape k={k}, n={n}, d={d}")));
    }
    let centers = blob_centers(k, d, separation, rng)?;
    let mut x = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        labels.push(c);
        for j in 0..d {
            x[(i, j)] = centers[(c, j)] + noise * rng.normal();
        }
    }
    EmbeddingDataset::new(x, Some(labels), "blobs")
}

fn blob_centers(k: usize, d: usize, separation: f64, rng: &mut Rng) -> Result<Matrix> {
    let mut centers = Matrix::zeros(k, d);
    if k <= d {
        let scale = separation / std::f64::consts::SQRT_2;
        for c in 0..k {
            centers[(c, c)] = scale;
        }
        return Ok(centers);
    }
    let radius = separation * k as f64;
    for c in 0..k {
        let mut placed = false;
        for _ in 0..10_000 {
            for j in 0..d {
                centers[(c, j)] = rng.uniform_range(-radius, radius);
            }
            if (0..c).all(|p| crate::numerics::sq_euclidean(centers.row(c), centers.row(p)).sqrt() >= separation) {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(
                "could not place blob centers at the requested separation",
            ));
        }
    }
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn dummy(n: usize) -> EmbeddingDataset {
        let x = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        EmbeddingDataset::new(x, None, "dummy").unwrap()
    }

    #[test]
    fn iid_sizes() {
        assert_eq!(PartitionSpec::iid(4, 0).sizes(8000).unwrap(), vec![2000; 4]);
        assert_eq!(PartitionSpec::iid(3, 0).sizes(10).unwrap(), vec![4, 3, 3]);
    }

    #[test]
    fn skew_sizes() {
        assert_eq!(PartitionSpec::skew(4, 0).sizes(20000).unwrap(), vec![18000, 2000]);
        assert_eq!(PartitionSpec::skew(2, 0).sizes(20000).unwrap(), vec![14000, 6000]);
        assert_eq!(PartitionSpec::skew(1, 0).sizes(8000).unwrap(), vec![4800, 3200]);
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            PartitionSpec {
                rho: 1,
                ..PartitionSpec::iid(2, 0)
            },
            PartitionSpec {
                m: 3,
                ..PartitionSpec::skew(1, 0)
            },
            PartitionSpec::skew(0, 0),
            PartitionSpec::skew(5, 0),
            PartitionSpec::iid(0, 0),
        ];
        for spec in bad {
            assert!(partition(&dummy(10), &spec).is_err(), "{spec:?}");
        }
        assert!(partition(&dummy(3), &PartitionSpec::iid(4, 0)).is_err());
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let sizes: Vec<usize> = batches(5, 2, &mut Rng::new(1)).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(batches(20000, 200, &mut Rng::new(1)).len(), 100);
        assert_eq!(batches(50, 7, &mut Rng::new(9)), batches(50, 7, &mut Rng::new(9)));
    }

    #[test]
    fn batch_stream_covers_each_epoch() {
        let mut s = BatchStream::new(7, 3);
        let mut rng = Rng::new(2);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(&mut rng)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn noiseless_blobs_sit_on_centers() {
        let ds = synth_blobs(3, 9, 4, 5.0, 0.0, &mut Rng::new(0)).unwrap();
        for i in 0..9 {
            assert_eq!(ds.x.row(i), ds.x.row(i % 3));
        }
        let d01 = crate::numerics::sq_euclidean(ds.x.row(0), ds.x.row(1)).sqrt();
        assert!((d01 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn many_blobs_in_low_dimension_are_separated() {
        let ds = synth_blobs(6, 6, 2, 3.0, 0.0, &mut Rng::new(3)).unwrap();
        for a in 0..6 {
            for b in 0..a {
                assert!(crate::numerics::sq_euclidean(ds.x.row(a), ds.x.row(b)).sqrt() >= 3.0);
            }
        }
    }

    #[test]
    fn blob_labels_are_balanced() {
        let ds = synth_blobs(4, 103, 8, 4.0, 1.0, &mut Rng::new(1)).unwrap();
        let mut hist = [0usize; 4];
        ds.labels.unwrap().iter().for_each(|&l| hist[l] += 1);
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
    }

    /// Nearest-centroid classifier using the true centers.
    #[test]
    fn well_separated_blobs_are_centroid_separable() {
        let (k, d, sep, noise) = (4, 16, 10.0, 1.0);
        let ds = synth_blobs(k, 400, d, sep, noise, &mut Rng::new(7)).unwrap();
        let centers = synth_blobs(k, k, d, sep, 0.0, &mut Rng::new(7)).unwrap().x;
        let labels = ds.labels.as_ref().unwrap();
        let correct =
            ds.x.row_iter()
                .zip(labels)
                .filter(|(row, &l)| {
                    let best = (0..k)
                        .min_by(|&a, &b| {
                            crate::numerics::sq_euclidean(row, centers.row(a))
                                .total_cmp(&crate::numerics::sq_euclidean(row, centers.row(b)))
                        })
                        .unwrap();
                    best == l
                })
                .count();
        assert!(correct as f64 / 400.0 >= 0.99);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn partition_is_a_disjoint_cover(n in 10usize..300, m in 1usize..9, rho in 1u32..5, seed: u64, skew: bool) {
            let spec = if skew { PartitionSpec::skew(rho, seed) } else { PartitionSpec::iid(m, seed) };
            let ds = dummy(n);
            let shards = partition(&ds, &spec).unwrap();
            let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for s in &shards {
                for (row, &i) in s.indices.iter().enumerate() {
                    prop_assert_eq!(s.data.x.row(row), ds.x.row(i));
                }
            }
            prop_assert_eq!(partition(&ds, &spec).unwrap(), shards);
        }
    }
}
