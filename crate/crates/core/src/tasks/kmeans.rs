//! K-Means with k-means++ seeding and best-of-n restarts.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, RmlError};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tasks::metrics::{clustering_acc, nmi};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iter: 300,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    pub centers: Tensor<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
    /// Index of the winning restart.
    pub restart: usize,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
}

impl ClusteringResult {
    /// Fills `acc` and `nmi` against ground-truth labels.
    pub fn score(&mut self, truth: &[usize]) -> Result<()> {
        self.acc = Some(clustering_acc(&self.assignments, truth)?);
        self.nmi = Some(nmi(&self.assignments, truth)?);
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_centers(x: &Tensor<f64>, k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centers = vec![x.row(rng.below(n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

/// Nearest center of each point (lowest index on ties) and the inertia.
fn assign(x: &Tensor<f64>, centers: &[Vec<f64>], out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, a) in out.iter_mut().enumerate() {
        let row = x.row(i);
        let mut best = (f64::INFINITY, 0);
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(row, center);
            if d < best.0 {
                best = (d, c);
            }
        }
        *a = best.1;
        inertia += best.0;
    }
    inertia
}

/// Moves every center to the mean of its points; empty clusters keep
/// their center.
fn update(x: &Tensor<f64>, assignments: &[usize], centers: &mut [Vec<f64>]) {
    let d = x.cols();
    let mut sums = vec![vec![0.0; d]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for ((c, s), &cnt) in centers.iter_mut().zip(sums).zip(&counts) {
        if cnt > 0 {
            *c = s.into_iter().map(|v| v / cnt as f64).collect();
        }
    }
}

struct Run {
    assignments: Vec<usize>,
    centers: Vec<Vec<f64>>,
    history: Vec<f64>,
}

fn lloyd(x: &Tensor<f64>, k: usize, max_iter: usize, rng: &mut RngStream) -> Run {
    let mut centers = seed_centers(x, k, rng);
    let mut assignments = vec![0; x.rows()];
    let mut history = vec![assign(x, &centers, &mut assignments)];
    let mut next = assignments.clone();
    for _ in 0..max_iter {
        update(x, &assignments, &mut centers);
        let inertia = assign(x, &centers, &mut next);
        history.push(inertia);
        if next == assignments {
            break;
        }
        std::mem::swap(&mut assignments, &mut next);
    }
    Run {
        assignments,
        centers,
        history,
    }
}

/// Clusters the rows of `z`. Each restart draws from its own stream forked
/// from `rng`; the winner is the lowest final inertia, ties going to the
/// earlier restart.
pub fn kmeans<T: Scalar>(z: &Tensor<T>, cfg: &KMeansConfig, rng: &mut RngStream) -> Result<ClusteringResult> {
    if !z.is_matrix() {
        return Err(RmlError::Config("kmeans expects a matrix".into()));
    }
    let x: Tensor<f64> = z.cast();
    let n = x.rows();
    if cfg.k == 0 {
        return Err(RmlError::Config("kmeans needs k >= 1".into()));
    }
    if cfg.k > n {
        return Err(RmlError::Config(format!("k = {} exceeds the {n} points", cfg.k)));
    }
    if cfg.n_init == 0 {
        return Err(RmlError::Config("kmeans needs at least one restart".into()));
    }
    if !x.all_finite() {
        return Err(RmlError::NonFinite("kmeans input".into()));
    }
    let base = rng.next_u64();
    let mut best: Option<(usize, Run)> = None;
    for restart in 0..cfg.n_init {
        let mut stream = RngStream::new(base).fork(restart as u64);
        let run = lloyd(&x, cfg.k, cfg.max_iter, &mut stream);
        let better = match &best {
            None => true,
            Some((_, b)) => run.history.last() < b.history.last(),
        };
        if better {
            best = Some((restart, run));
        }
    }
    let (restart, run) = best.expect("at least one restart");
    let centers = Tensor::new(&[cfg.k, x.cols()], run.centers.concat())?;
    Ok(ClusteringResult {
        inertia: *run.history.last().expect("non-empty history"),
        assignments: run.assignments,
        centers,
        inertia_history: run.history,
        restart,
        acc: None,
        nmi: None,
    })
}
