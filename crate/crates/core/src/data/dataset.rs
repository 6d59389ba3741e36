use crate::autodiff::Tensor;
use crate::error::{Result, RmlError};
use crate::scalar::Scalar;

/// `N` samples observed through `V` views of possibly different widths.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub name: String,
    views: Vec<Tensor<f64>>,
    labels: Option<Vec<usize>>,
    classes: Option<usize>,
}

impl MultiViewDataset {
    /// Validates row counts, finiteness and label range.
    pub fn new(
        name: impl Into<String>,
        views: Vec<Tensor<f64>>,
        labels: Option<Vec<usize>>,
        classes: Option<usize>,
    ) -> Result<Self> {
        let Some(first) = views.first() else {
            return Err(RmlError::Data("dataset has no views".into()));
        };
        let n = first.rows();
        for (m, v) in views.iter().enumerate() {
            if !v.is_matrix() {
                return Err(RmlError::Data(format!("view {m} is not a matrix")));
            }
            if v.rows() != n {
                return Err(RmlError::Data(format!(
                    "view {m} has {} rows but view 0 has {n}",
                    v.rows()
                )));
            }
            if let Some(pos) = v.data().iter().position(|x| !x.is_finite()) {
                return Err(RmlError::Data(format!(
                    "non-finite value in view {m} at row {}, col {}",
                    pos / v.cols(),
                    pos % v.cols()
                )));
            }
        }
        let classes = match (&labels, classes) {
            (Some(l), c) => {
                if l.len() != n {
                    return Err(RmlError::Data(format!(
                        "{} labels for {n} samples",
                        l.len()
                    )));
                }
                let c = c.unwrap_or_else(|| l.iter().max().map_or(0, |&m| m + 1));
                if let Some(&bad) = l.iter().find(|&&y| y >= c) {
                    return Err(RmlError::Data(format!("label {bad} outside [0, {c})")));
                }
                Some(c)
            }
            (None, c) => c,
        };
        Ok(Self {
            name: name.into(),
            views,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.views[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.views.iter().map(Tensor::cols).collect()
    }

    pub fn views(&self) -> &[Tensor<f64>] {
        &self.views
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn classes(&self) -> Option<usize> {
        self.classes
    }

    /// Rows `idx` of every view, converted to `T`.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Vec<Tensor<T>> {
        self.views.iter().map(|v| v.select_rows(idx).cast()).collect()
    }

    /// Every view, converted to `T`.
    pub fn full<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.views.iter().map(Tensor::cast).collect()
    }

    /// Subset of samples, labels included.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            views: self.views.iter().map(|v| v.select_rows(idx)).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
        }
    }

    /// Views placed side by side: `N x sum(D_m)`.
    pub fn concatenated(&self) -> Tensor<f64> {
        let n = self.len();
        let width: usize = self.dims().iter().sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for v in &self.views {
                data.extend_from_slice(v.row(i));
            }
        }
        Tensor::new(&[n, width], data).expect("non-empty views")
    }

    pub(crate) fn with_views(&self, views: Vec<Tensor<f64>>) -> Self {
        Self {
            name: self.name.clone(),
            views,
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}
