//! Approximate rank pooling: collapse an ordered frame sequence into one dynamic image.
//!
//! Frame `p` (1-based, of `q`) is weighted by `F(p) = Σ_{l=p}^{q} (2l − q) / l`, and the
//! dynamic image is the weighted sum `Σ_p F(p) · V_p`. The weights always sum to `q`.

use crate::error::{Error, Result};
use crate::image::Image;

/// An ordered sequence of equally sized frames belonging to one subject and class.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    frames: Vec<Image>,
    pub subject: String,
    pub label: usize,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, subject: impl Into<String>, label: usize) -> Result<Self> {
        check_frames(&frames)?;
        Ok(Self { frames, subject: subject.into(), label })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Unnormalized dynamic image together with the number of frames it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicImage {
    pub pixels: Image,
    pub frames: usize,
}

fn check_frames(frames: &[Image]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Dataset("frame sequence is empty".into()))?;
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != first.dims()) {
        return Err(Error::Dataset(format!(
            "frame {i} is {:?} (h, w, ch) but frame 0 is {:?}",
            f.dims(),
            first.dims()
        )));
    }
    Ok(())
}

/// Per-frame weights `F(1..=q)`.
pub fn rank_weights(q: usize) -> Result<Vec<f64>> {
    if q == 0 {
        return Err(Error::Config("rank_weights needs at least one frame".into()));
    }
    let qf = q as f64;
    let mut weights = vec![0.0; q];
    let mut suffix = 0.0;
    for l in (1..=q).rev() {
        let lf = l as f64;
        suffix += (2.0 * lf - qf) / lf;
        weights[l - 1] = suffix;
    }
    Ok(weights)
}

pub fn dynamic_image_from_frames(frames: &[Image]) -> Result<DynamicImage> {
    check_frames(frames)?;
    let weights = rank_weights(frames.len())?;
    let first = &frames[0];
    let mut acc = vec![0.0; first.data.len()];
    for (frame, &w) in frames.iter().zip(&weights) {
        for (a, &v) in acc.iter_mut().zip(&frame.data) {
            *a += w * v;
        }
    }
    let pixels = Image::new(first.height, first.width, first.channels, acc)?;
    Ok(DynamicImage { pixels, frames: frames.len() })
}

pub fn dynamic_image(seq: &FrameSequence) -> Result<DynamicImage> {
    dynamic_image_from_frames(&seq.frames)
}

/// Min-max rescales to `[0, 1]`; a constant image maps to 0.5 everywhere.
pub fn normalize_for_display(image: &Image) -> Image {
    let (lo, hi) = image
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if range > 0.0 && range.is_finite() {
        image.data.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; image.data.len()]
    };
    Image { data, ..image.clone() }
}
