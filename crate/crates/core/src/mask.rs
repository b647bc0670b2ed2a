//! Segmentation masks and per-pixel class probability maps.
//!
//! A [`Mask`] stores one class index per pixel, which makes the one-hot
//! invariant (exactly one active channel per pixel) hold by construction.
//! The one-hot view is channel-major: `k * H * W + y * W + x`.

use crate::error::{CrispError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(CrispError::Dimension(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if num_classes < 2 || num_classes > u8::MAX as usize {
            return Err(CrispError::Config(format!(
                "unsupported class count {num_classes}"
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(CrispError::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn background(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_classes,
            labels: vec![0; height * width],
        }
    }

    /// Parses a channel-major one-hot tensor. Every pixel must have exactly
    /// one channel equal to 1 and the rest equal to 0.
    pub fn from_one_hot(num_classes: usize, height: usize, width: usize, one_hot: &[f64]) -> Result<Self> {
        let hw = height * width;
        if one_hot.len() != num_classes * hw {
            return Err(CrispError::Dimension(format!(
                "one-hot tensor of length {} for {num_classes}x{height}x{width}",
                one_hot.len()
            )));
        }
        let mut labels = vec![0u8; hw];
        for (p, label) in labels.iter_mut().enumerate() {
            let mut active = None;
            for k in 0..num_classes {
                match one_hot[k * hw + p] {
                    v if v == 1.0 && active.is_none() => active = Some(k),
                    v if v == 0.0 => {}
                    v => {
                        return Err(CrispError::Input(format!(
                            "pixel {p} channel {k} holds {v}, not a valid one-hot entry"
                        )))
                    }
                }
            }
            *label = active.ok_or_else(|| {
                CrispError::Input(format!("pixel {p} has no active channel"))
            })? as u8;
        }
        Self::new(height, width, num_classes, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let hw = self.num_pixels();
        let mut out = vec![0.0; self.num_classes * hw];
        for (p, &l) in self.labels.iter().enumerate() {
            out[l as usize * hw + p] = 1.0;
        }
        out
    }

    /// Binary foreground plane: every non-background class is foreground.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.num_classes == other.num_classes
    }

    pub fn check_same_shape(&self, other: &Mask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CrispError::Dimension(format!(
                "mask {}x{}x{} vs {}x{}x{}",
                self.num_classes, self.height, self.width, other.num_classes, other.height, other.width
            )))
        }
    }
}

/// Channel-major `K×H×W` probabilities, normalized over `K` at each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(num_classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_classes * height * width {
            return Err(CrispError::Dimension(format!(
                "probability map of length {} for {num_classes}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            num_classes,
            height,
            width,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn prob(&self, k: usize, p: usize) -> f64 {
        self.data[k * self.num_pixels() + p]
    }

    /// Most probable class per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> Mask {
        let hw = self.num_pixels();
        let labels = (0..hw)
            .map(|p| {
                let mut best = 0;
                for k in 1..self.num_classes {
                    if self.prob(k, p) > self.prob(best, p) {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Mask {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            labels,
        }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        Self {
            num_classes: mask.num_classes,
            height: mask.height,
            width: mask.width,
            data: mask.one_hot(),
        }
    }

    pub fn matches(&self, mask: &Mask) -> Result<()> {
        if self.num_classes == mask.num_classes()
            && self.height == mask.height()
            && self.width == mask.width()
        {
            Ok(())
        } else {
            Err(CrispError::Dimension(format!(
                "probability map {}x{}x{} vs mask {}x{}x{}",
                self.num_classes,
                self.height,
                self.width,
                mask.num_classes(),
                mask.height(),
                mask.width()
            )))
        }
    }
}
