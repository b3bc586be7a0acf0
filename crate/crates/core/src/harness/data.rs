//! Labeled datasets and the synthetic two-task generator.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    IdxFile,
    Synthetic,
}

/// A classification dataset with features scaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// `n x d` feature matrix.
    pub inputs: Array2<f64>,
    /// `n` class indices, each `< class_count`.
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        class_count: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::dim(format!(
                "{} feature rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::validation("class_count", "must be positive"));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::validation(
                "labels",
                format!("label {l} at row {i} is out of range for {class_count} classes"),
            ));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn example(&self, i: usize) -> (ArrayView1<'_, f64>, usize) {
        (self.inputs.row(i), self.labels[i])
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let inputs = self.inputs.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset {
            inputs,
            labels,
            class_count: self.class_count,
            provenance: self.provenance,
        }
    }

    /// Seeded shuffle-and-split; the second dataset holds `fraction` of the
    /// rows (at least one when the input is nonempty, at most n - 1 so the
    /// training side is never empty).
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let held = ((n as f64 * fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1));
        let (hold_idx, train_idx) = order.split_at(held);
        (self.subset(train_idx), self.subset(hold_idx))
    }

    /// Consecutive chunks of at most `chunk_size` rows.
    pub fn chunks(&self, chunk_size: usize) -> Vec<LabeledDataset> {
        let n = self.len();
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk_size).min(n);
            let idx: Vec<usize> = (start..end).collect();
            out.push(self.subset(&idx));
            start = end;
        }
        out
    }
}

/// Two Gaussian-mixture classification tasks with disjoint class means.
///
/// All `2 m` class means are rejection-sampled on a radius-13 shell with
/// pairwise separation of at least six noise standard deviations, so each
/// task is separable with Bayes accuracy well above 0.95 while the two
/// tasks still crowd the same region of feature space and compete for the
/// same hidden features. Features are affinely mapped into `[0, 1]`.
pub fn synthetic_tasks(
    seed: u64,
    n_per_task: usize,
    d: usize,
    m: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if d < m {
        return Err(Error::validation(
            "d",
            format!("feature dimension {d} must be at least the class count {m}"),
        ));
    }
    if m == 0 || n_per_task < m {
        return Err(Error::validation(
            "n_per_task",
            format!("need at least one example per class ({n_per_task} < {m})"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 1.0;
    let radius = 13.0;
    let min_sep = 6.0 * sigma;

    // Rejection-sample all 2m means; deterministic given the seed.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(2 * m);
    let mut attempts = 0;
    while means.len() < 2 * m {
        attempts += 1;
        if attempts > 50_000 {
            return Err(Error::Numerical(
                "failed to place separated class means; raise d or lower m".to_string(),
            ));
        }
        let cand: Vec<f64> = {
            let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| v * radius / norm).collect()
        };
        let ok = means.iter().all(|mu| {
            let dist2: f64 = mu
                .iter()
                .zip(&cand)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist2.sqrt() >= min_sep
        });
        if ok {
            means.push(cand);
        }
    }
    let means_a: Vec<Vec<f64>> = means[..m].to_vec();
    let means_b: Vec<Vec<f64>> = means[m..].to_vec();

    let half_width = radius + 5.0 * sigma;
    let mut sample_task = |task_means: &[Vec<f64>]| -> LabeledDataset {
        let mut inputs = Array2::<f64>::zeros((n_per_task, d));
        let mut labels = Vec::with_capacity(n_per_task);
        for i in 0..n_per_task {
            let class = i % m;
            labels.push(class);
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let raw = task_means[class][j] + sigma * noise;
                inputs[[i, j]] = ((raw + half_width) / (2.0 * half_width)).clamp(0.0, 1.0);
            }
        }
        LabeledDataset {
            inputs,
            labels,
            class_count: m,
            provenance: Provenance::Synthetic,
        }
    };

    let task_a = sample_task(&means_a);
    let task_b = sample_task(&means_b);
    Ok((task_a, task_b))
}
