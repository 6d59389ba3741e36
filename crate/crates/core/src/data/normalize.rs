use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::MultiViewDataset;
use crate::error::RmlError;

/// Per-feature, per-view input normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    /// Zero mean, unit population standard deviation; constant features map to 0.
    #[default]
    Zscore,
    /// Affine map onto [0, 1]; constant features map to 0.
    Minmax,
}

impl FromStr for Normalization {
    type Err = RmlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "zscore" => Ok(Self::Zscore),
            "minmax" => Ok(Self::Minmax),
            other => Err(RmlError::Config(format!(
                "unknown normalization '{other}' (expected none, zscore or minmax)"
            ))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Zscore => "zscore",
            Self::Minmax => "minmax",
        })
    }
}

fn normalize_view(v: &Tensor<f64>, mode: Normalization) -> Tensor<f64> {
    let (n, d) = (v.rows(), v.cols());
    let mut out = v.clone();
    for j in 0..d {
        let col = (0..n).map(|i| v.get(i, j));
        let (shift, scale) = match mode {
            Normalization::None => return out,
            Normalization::Zscore => {
                let mean = col.clone().sum::<f64>() / n as f64;
                let var = col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            }
            Normalization::Minmax => {
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                (lo, hi - lo)
            }
        };
        for i in 0..n {
            let x = &mut out.data_mut()[i * d + j];
            *x = if scale > 0.0 { (*x - shift) / scale } else { 0.0 };
        }
    }
    out
}

pub fn normalize(dataset: &MultiViewDataset, mode: Normalization) -> MultiViewDataset {
    if mode == Normalization::None {
        return dataset.clone();
    }
    dataset.with_views(
        dataset
            .views()
            .iter()
            .map(|v| normalize_view(v, mode))
            .collect(),
    )
}
