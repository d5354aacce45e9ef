//! Mask, tracklet, and 1D span kernels: RLE codec, IoU, Dice, and BCE.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{AudioSegment, ImageMask, Tracklet};

/// Default clamp for [`bce_loss`].
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Row-major bit mask, packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DenseMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl DenseMask {
    pub fn zeros(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        let len = width as usize * height as usize;
        Ok(Self {
            width,
            height,
            words: vec![0; len.div_ceil(64)],
        })
    }

    pub fn from_bits(width: u32, height: u32, bits: &[bool]) -> Result<Self> {
        let mut mask = Self::zeros(width, height)?;
        if bits.len() != mask.len() {
            return Err(Error::invalid(format!(
                "bit vector has length {}, expected {}",
                bits.len(),
                mask.len()
            )));
        }
        for (i, &b) in bits.iter().enumerate() {
            if b {
                mask.set(i, true);
            }
        }
        Ok(mask)
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }
    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, index: usize) -> bool {
        self.words[index / 64] >> (index % 64) & 1 == 1
    }

    pub fn set(&mut self, index: usize, value: bool) {
        let bit = 1u64 << (index % 64);
        if value {
            self.words[index / 64] |= bit;
        } else {
            self.words[index / 64] &= !bit;
        }
    }

    pub fn get_xy(&self, x: u32, y: u32) -> bool {
        self.get(y as usize * self.width as usize + x as usize)
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Foreground pixel count.
    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn complement(&self) -> DenseMask {
        let mut out = self.clone();
        for w in &mut out.words {
            *w = !*w;
        }
        out.clear_tail();
        out
    }

    fn clear_tail(&mut self) {
        let rem = self.len() % 64;
        if rem != 0 {
            let last = self.words.len() - 1;
            self.words[last] &= (1u64 << rem) - 1;
        }
    }

    fn check_same_shape(&self, other: &DenseMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::invalid(format!(
                "mask size mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &DenseMask) -> Result<u64> {
        self.check_same_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum())
    }

    /// Number of pixels where the two masks differ.
    pub fn disagreement_count(&self, other: &DenseMask) -> Result<u64> {
        self.check_same_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum())
    }
}

pub fn rle_decode(mask: &ImageMask) -> DenseMask {
    let mut dense =
        DenseMask::zeros(mask.width(), mask.height()).expect("ImageMask has positive dims");
    let mut pos = 0usize;
    for (i, &run) in mask.rle().iter().enumerate() {
        let run = run as usize;
        if i % 2 == 1 {
            for p in pos..pos + run {
                dense.set(p, true);
            }
        }
        pos += run;
    }
    dense
}

/// Canonical RLE: alternating runs starting with background, a leading zero
/// run only when the first pixel is foreground, and no other zero runs.
pub fn rle_encode(dense: &DenseMask) -> ImageMask {
    let mut runs = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for i in 0..dense.len() {
        let bit = dense.get(i);
        if bit != current {
            runs.push(run);
            run = 0;
            current = bit;
        }
        run += 1;
    }
    runs.push(run);
    ImageMask::new(dense.width(), dense.height(), runs).expect("runs cover every pixel")
}

/// Intersection over union. Two empty masks score 1.0.
pub fn mask_iou(a: &DenseMask, b: &DenseMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// 2|a∩b| / (|a|+|b|). Two empty masks score 1.0.
pub fn dice_coefficient(a: &DenseMask, b: &DenseMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

pub fn dice_loss(a: &DenseMask, b: &DenseMask) -> Result<f64> {
    Ok(1.0 - dice_coefficient(a, b)?)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::invalid(format!(
            "epsilon must lie in (0, 0.5), got {epsilon}"
        )));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy of a hard prediction against gold,
/// with prediction bits clamped to [ε, 1−ε].
///
/// For hard masks an agreeing pixel costs −ln(1−ε) and a disagreeing pixel
/// costs −ln ε, whichever side is the prediction.
pub fn bce_loss(pred: &DenseMask, gold: &DenseMask, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    let disagree = pred.disagreement_count(gold)? as f64;
    let n = pred.len() as f64;
    let agree = n - disagree;
    let agree_cost = -(-epsilon).ln_1p();
    let disagree_cost = -epsilon.ln();
    Ok((agree * agree_cost + disagree * disagree_cost) / n)
}

/// BCE of per-pixel foreground probabilities against a gold mask. The
/// probabilities are clamped to [ε, 1−ε]; gold is taken as-is.
pub fn bce_loss_probs(pred: &[f64], gold: &DenseMask, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    if pred.len() != gold.len() {
        return Err(Error::invalid(format!(
            "probability map has {} pixels, gold has {}",
            pred.len(),
            gold.len()
        )));
    }
    let mut total = 0.0;
    for (i, &p) in pred.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::invalid("probabilities must be finite"));
        }
        let p = p.clamp(epsilon, 1.0 - epsilon);
        total += if gold.get(i) { -p.ln() } else { -(-p).ln_1p() };
    }
    Ok(total / pred.len() as f64)
}

/// Overlap length over covered length.
pub fn span_iou_1d(a: &AudioSegment, b: &AudioSegment) -> f64 {
    let inter = (a.end().min(b.end()) - a.start().max(b.start())).max(0.0);
    let union = a.length() + b.length() - inter;
    // both lengths are positive, so union > 0
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletProfile {
    pub per_frame: BTreeMap<u32, f64>,
    pub mean: f64,
}

/// Per-frame IoU over the union of both tracklets' frames. A frame present
/// in only one tracklet scores 0.
pub fn tracklet_iou_profile(a: &Tracklet, b: &Tracklet) -> Result<TrackletProfile> {
    let mut per_frame = BTreeMap::new();
    for (&frame, mask_a) in a.frames() {
        let iou = match b.frames().get(&frame) {
            Some(mask_b) => mask_iou(&rle_decode(mask_a), &rle_decode(mask_b))?,
            None => 0.0,
        };
        per_frame.insert(frame, iou);
    }
    for &frame in b.frames().keys() {
        per_frame.entry(frame).or_insert(0.0);
    }
    let mean = per_frame.values().sum::<f64>() / per_frame.len() as f64;
    Ok(TrackletProfile { per_frame, mean })
}
