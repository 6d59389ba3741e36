//! Planted-partition multi-view data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::MultiViewDataset;
use crate::error::{Result, RmlError};
use crate::rng::RngStream;

const MAX_CENTER_ATTEMPTS: usize = 1000;

/// Gaussian blobs observed through several views.
///
/// In every view each class gets its own center; a sample of class `c` is
/// drawn independently per view around that view's center `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub samples: usize,
    pub classes: usize,
    /// Width of every view.
    pub dims: Vec<usize>,
    /// Per-coordinate standard deviation around the centers, one value per
    /// view or a single value for all.
    pub spread: Vec<f64>,
    /// Minimum pairwise distance between the centers of one view.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            samples: 500,
            classes: 5,
            dims: vec![20, 50, 10],
            spread: vec![2.0],
            separation: 6.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn views(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(RmlError::Config("blobs need at least 2 classes".into()));
        }
        if self.samples < self.classes {
            return Err(RmlError::Config(format!(
                "{} samples cannot cover {} classes",
                self.samples, self.classes
            )));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(RmlError::Config("view dimensions must be positive".into()));
        }
        if self.spread.len() != 1 && self.spread.len() != self.dims.len() {
            return Err(RmlError::Config(format!(
                "{} spreads for {} views",
                self.spread.len(),
                self.dims.len()
            )));
        }
        if self.spread.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(RmlError::Config("spread must be non-negative".into()));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(RmlError::Config("separation must be non-negative".into()));
        }
        Ok(())
    }

    fn spread_of(&self, view: usize) -> f64 {
        if self.spread.len() == 1 {
            self.spread[0]
        } else {
            self.spread[view]
        }
    }
}

/// `blobs:n=500,k=5,dims=20/50/10,spread=2,sep=6,seed=1`; every key is
/// optional and `spread` accepts `/`-separated per-view values.
impl FromStr for SynthSpec {
    type Err = RmlError;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.strip_prefix("blobs").ok_or_else(|| {
            RmlError::Config(format!("unknown synthetic preset in '{s}' (expected blobs)"))
        })?;
        let body = body.strip_prefix(':').unwrap_or(body);
        let mut spec = SynthSpec::default();
        let bad = |k: &str, v: &str| RmlError::Config(format!("bad value '{v}' for synth key '{k}'"));
        for pair in body.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| RmlError::Config(format!("synth entry '{pair}' is not key=value")))?;
            match k.trim() {
                "n" => spec.samples = v.parse().map_err(|_| bad(k, v))?,
                "k" => spec.classes = v.parse().map_err(|_| bad(k, v))?,
                "dims" => {
                    spec.dims = v
                        .split('/')
                        .map(|d| d.parse().map_err(|_| bad(k, v)))
                        .collect::<Result<_>>()?
                }
                "spread" => {
                    spec.spread = v
                        .split('/')
                        .map(|d| d.parse().map_err(|_| bad(k, v)))
                        .collect::<Result<_>>()?
                }
                "sep" => spec.separation = v.parse().map_err(|_| bad(k, v))?,
                "seed" => spec.seed = v.parse().map_err(|_| bad(k, v))?,
                other => return Err(RmlError::Config(format!("unknown synth key '{other}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: Vec<String>| v.join("/");
        write!(
            f,
            "blobs:n={},k={},dims={},spread={},sep={},seed={}",
            self.samples,
            self.classes,
            join(self.dims.iter().map(ToString::to_string).collect()),
            join(self.spread.iter().map(ToString::to_string).collect()),
            self.separation,
            self.seed
        )
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Centers on the sphere of radius `separation`, each at least
/// `separation` away from the previous ones.
fn draw_centers(k: usize, dim: usize, separation: f64, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    while centers.len() < k {
        let mut placed = false;
        for _ in 0..MAX_CENTER_ATTEMPTS {
            let g: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let c: Vec<f64> = g.iter().map(|x| x / norm * separation).collect();
            if centers.iter().all(|o| dist(o, &c) >= separation) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(RmlError::Config(format!(
                "could not place {k} centers {separation} apart in dimension {dim} \
                 after {MAX_CENTER_ATTEMPTS} attempts"
            )));
        }
    }
    Ok(centers)
}

/// Generates the dataset. Values are rounded to single precision so the
/// binary manifest encoding round-trips exactly. Labels are balanced:
/// sample `i` belongs to class `i mod k`.
pub fn make_blobs(spec: &SynthSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    let mut views = Vec::with_capacity(spec.views());
    for (m, &dim) in spec.dims.iter().enumerate() {
        let centers = draw_centers(spec.classes, dim, spec.separation, &mut rng)?;
        let spread = spec.spread_of(m);
        let mut data = Vec::with_capacity(spec.samples * dim);
        for &y in &labels {
            for c in &centers[y] {
                data.push((c + spread * rng.normal()) as f32 as f64);
            }
        }
        views.push(Tensor::new(&[spec.samples, dim], data)?);
    }
    MultiViewDataset::new("blobs", views, Some(labels), Some(spec.classes))
}
