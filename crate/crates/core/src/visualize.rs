//! Prediction overlays and attention heatmaps.

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::kernels::resample::{channel_mean, upsample_bilinear};
use crate::metrics::{ChangeMask, ConfusionCounts};
use crate::tensor::Tensor;

pub const TRUE_POSITIVE: Rgb<u8> = Rgb([255, 255, 255]);
pub const TRUE_NEGATIVE: Rgb<u8> = Rgb([0, 0, 0]);
pub const FALSE_NEGATIVE: Rgb<u8> = Rgb([0, 0, 255]);
pub const FALSE_POSITIVE: Rgb<u8> = Rgb([255, 0, 0]);

/// Colours each pixel by its confusion class: white TP, black TN, blue FN,
/// red FP.
pub fn overlay(pred: &ChangeMask, gt: &ChangeMask) -> Result<RgbImage> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "overlay masks differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(RgbImage::from_fn(pred.width() as u32, pred.height() as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        match (pred.get(y, x), gt.get(y, x)) {
            (true, true) => TRUE_POSITIVE,
            (false, false) => TRUE_NEGATIVE,
            (false, true) => FALSE_NEGATIVE,
            (true, false) => FALSE_POSITIVE,
        }
    }))
}

/// Counts the four overlay colours; any other colour is an error.
pub fn overlay_counts(img: &RgbImage) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for (x, y, p) in img.enumerate_pixels() {
        match *p {
            TRUE_POSITIVE => c.tp += 1,
            TRUE_NEGATIVE => c.tn += 1,
            FALSE_NEGATIVE => c.fn_ += 1,
            FALSE_POSITIVE => c.fp += 1,
            other => {
                return Err(Error::Shape(format!("pixel ({x}, {y}) has non-overlay colour {:?}", other.0)))
            }
        }
    }
    Ok(c)
}

/// Channel mean of a `(1, C, h, w)` gate, resized bilinearly to `H×W` and
/// min-max normalised to `[0, 1]`. A constant map becomes 0.5 everywhere.
pub fn heatmap_values(gate: &Tensor, height: usize, width: usize) -> Result<Vec<f64>> {
    let s = gate.shape();
    if s.n != 1 {
        return Err(Error::Shape(format!("heatmap expects one sample, got {s}")));
    }
    if height < s.h || width < s.w {
        return Err(Error::Shape(format!("heatmap target {height}x{width} smaller than {s}")));
    }
    let mean = channel_mean(gate);
    let full = upsample_bilinear(&mean, height, width);
    let data = full.data();
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    Ok(if range > 0.0 && range.is_finite() {
        data.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; data.len()]
    })
}

/// Blue (low) through green to red (high).
pub fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f64| ((1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0), ch(2.0), ch(1.0)])
}

pub fn heatmap(gate: &Tensor, height: usize, width: usize) -> Result<RgbImage> {
    let values = heatmap_values(gate, height, width)?;
    Ok(RgbImage::from_fn(width as u32, height as u32, |x, y| {
        colormap(values[y as usize * width + x as usize])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::confusion;
    use crate::tensor::Shape;

    #[test]
    fn overlay_colours_match_confusion() {
        let gt = ChangeMask::from_fn(6, 5, |y, x| (y + x) % 3 == 0);
        let pred = ChangeMask::from_fn(6, 5, |y, x| (y * x) % 2 == 0);
        let img = overlay(&pred, &gt).unwrap();
        assert_eq!(overlay_counts(&img).unwrap(), confusion(&pred, &gt).unwrap());
    }

    #[test]
    fn heatmap_range_and_degenerate_case() {
        let g = Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, c, y, x| (c + y * x) as f64);
        let v = heatmap_values(&g, 16, 16).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));

        let flat = Tensor::full(Shape::new(1, 3, 4, 4), 0.7);
        let img = heatmap(&flat, 16, 16).unwrap();
        let mid = colormap(0.5);
        assert!(img.pixels().all(|p| *p == mid));
    }

    #[test]
    fn colormap_ends() {
        let (lo, hi) = (colormap(0.0), colormap(1.0));
        assert!(lo[2] > lo[0] && hi[0] > hi[2]);
    }
}
