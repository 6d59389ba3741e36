//! Train/test splitting and symmetric label noise.

use crate::error::{Result, RmlError};
use crate::rng::RngStream;

/// Per-class split: each class contributes `round(fraction * count)` of its
/// samples to the training side. Both index lists are sorted.
pub fn stratified_split(
    labels: &[usize],
    classes: usize,
    fraction: f64,
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(RmlError::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        let slot = by_class
            .get_mut(y)
            .ok_or_else(|| RmlError::Data(format!("label {y} outside 0..{classes}")))?;
        slot.push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        rng.shuffle(&mut members);
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return Err(RmlError::Stratification(format!(
                "class {c} has {} samples and none fall in the training split",
                members.len()
            )));
        }
        train.extend_from_slice(&members[..take]);
        test.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLabelSet {
    pub truth: Vec<usize>,
    pub noisy: Vec<usize>,
    pub rate: f64,
    /// Positions whose label was redrawn, sorted. A redraw may land on the
    /// true label.
    pub corrupted: Vec<usize>,
}

impl NoisyLabelSet {
    /// Fraction of labels that actually differ from the truth.
    pub fn flipped_fraction(&self) -> f64 {
        let flips = self.truth.iter().zip(&self.noisy).filter(|(a, b)| a != b).count();
        flips as f64 / self.truth.len().max(1) as f64
    }
}

/// Redraws exactly `round(rate * N)` labels, chosen uniformly, from all
/// `classes` classes.
pub fn make_symmetric_noise(
    truth: &[usize],
    rate: f64,
    classes: usize,
    rng: &mut RngStream,
) -> Result<NoisyLabelSet> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(RmlError::Config(format!("noise rate {rate} outside [0,1]")));
    }
    if let Some(&bad) = truth.iter().find(|&&y| y >= classes) {
        return Err(RmlError::Data(format!("label {bad} outside 0..{classes}")));
    }
    let count = (rate * truth.len() as f64).round() as usize;
    let mut corrupted = rng.sample_indices(truth.len(), count);
    corrupted.sort_unstable();
    let mut noisy = truth.to_vec();
    for &i in &corrupted {
        noisy[i] = rng.below(classes);
    }
    Ok(NoisyLabelSet {
        truth: truth.to_vec(),
        noisy,
        rate,
        corrupted,
    })
}
