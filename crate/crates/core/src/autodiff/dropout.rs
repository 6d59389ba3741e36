use crate::rng::RngStream;

/// How dropout layers behave during one forward pass.
pub enum DropoutMode<'a> {
    /// Inference: dropout is the identity.
    Off,
    /// Training with fresh draws from the stream.
    Live(&'a mut RngStream),
    /// Training with replayable draws (see [`FrozenMasks`]).
    Frozen(&'a mut FrozenMasks),
}

impl DropoutMode<'_> {
    pub fn is_training(&self) -> bool {
        !matches!(self, DropoutMode::Off)
    }

    /// Keep-mask for `len` elements, or `None` when the layer is the identity.
    pub(crate) fn keep_mask(&mut self, len: usize, rate: f64) -> Option<Vec<bool>> {
        if rate <= 0.0 {
            return None;
        }
        match self {
            DropoutMode::Off => None,
            DropoutMode::Live(rng) => Some(draw_mask(rng, len, rate)),
            DropoutMode::Frozen(frozen) => Some(frozen.next(len, rate)),
        }
    }
}

fn draw_mask(rng: &mut RngStream, len: usize, rate: f64) -> Vec<bool> {
    (0..len).map(|_| rng.uniform() >= rate).collect()
}

/// Dropout masks recorded on first use and replayed after [`rewind`].
///
/// Makes a stochastic forward pass a deterministic function of the
/// parameters, which finite-difference checks need.
///
/// [`rewind`]: FrozenMasks::rewind
#[derive(Debug, Clone)]
pub struct FrozenMasks {
    rng: RngStream,
    masks: Vec<Vec<bool>>,
    cursor: usize,
}

impl FrozenMasks {
    pub fn new(rng: RngStream) -> Self {
        Self {
            rng,
            masks: Vec::new(),
            cursor: 0,
        }
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn recorded(&self) -> usize {
        self.masks.len()
    }

    fn next(&mut self, len: usize, rate: f64) -> Vec<bool> {
        if self.cursor == self.masks.len() {
            let m = draw_mask(&mut self.rng, len, rate);
            self.masks.push(m);
        }
        let m = self.masks[self.cursor].clone();
        assert_eq!(m.len(), len, "frozen dropout replayed with a different layout");
        self.cursor += 1;
        m
    }
}
