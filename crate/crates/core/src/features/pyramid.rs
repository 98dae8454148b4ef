use super::{FeatureError, PyramidConfig};
use crate::imaging::GrayImage;

/// Dimensions `floor(dim / scale_factor^level)` of one pyramid level.
pub fn level_dimensions(width: usize, height: usize, cfg: &PyramidConfig, level: usize) -> (usize, usize) {
    let s = cfg.level_scale(level);
    // tolerance absorbs rounding in scale_factor^level for exact divisors
    let w = (width as f64 / s + 1e-9).floor() as usize;
    let h = (height as f64 / s + 1e-9).floor() as usize;
    (w, h)
}

/// Per-output-sample source spans `(first, weights)` of an area-average resampling.
fn area_weights(src_len: usize, dst_len: usize, ratio: f64) -> Vec<(usize, Vec<f64>)> {
    (0..dst_len)
        .map(|o| {
            let start = o as f64 * ratio;
            let end = ((o + 1) as f64 * ratio).min(src_len as f64);
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src_len);
            let weights: Vec<f64> = (first..last)
                .map(|i| {
                    let lo = (i as f64).max(start);
                    let hi = ((i + 1) as f64).min(end);
                    (hi - lo).max(0.0)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            (first, weights.into_iter().map(|w| w / total).collect())
        })
        .collect()
}

/// Area-average downsampling of `img` by `ratio` to exactly `w` x `h` pixels.
pub(crate) fn area_downsample(img: &GrayImage, w: usize, h: usize, ratio: f64) -> GrayImage {
    let cols = area_weights(img.width(), w, ratio);
    let rows = area_weights(img.height(), h, ratio);
    // horizontal pass into f64 buffer, then vertical
    let mut tmp = vec![0.0f64; w * img.height()];
    for y in 0..img.height() {
        let row = &img.data()[y * img.width()..(y + 1) * img.width()];
        for (x, (first, weights)) in cols.iter().enumerate() {
            tmp[y * w + x] = weights
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * row[first + k] as f64)
                .sum();
        }
    }
    let mut out = vec![0u8; w * h];
    for (y, (first, weights)) in rows.iter().enumerate() {
        for x in 0..w {
            let v: f64 = weights
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * tmp[(first + k) * w + x])
                .sum();
            out[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    GrayImage::new(w, h, out).expect("sizes match by construction")
}

/// Builds the image pyramid; level 0 is the input, level `i` is an area average of the
/// input by `scale_factor^i`.
pub fn build_pyramid(image: &GrayImage, cfg: &PyramidConfig) -> Result<Vec<GrayImage>, FeatureError> {
    cfg.validate()?;
    if image.is_empty() {
        return Err(FeatureError::EmptyImage);
    }
    let mut levels = Vec::with_capacity(cfg.n_levels);
    levels.push(image.clone());
    for level in 1..cfg.n_levels {
        let (w, h) = level_dimensions(image.width(), image.height(), cfg, level);
        if w == 0 || h == 0 {
            return Err(FeatureError::ConfigTooDeep {
                level,
                width: image.width(),
                height: image.height(),
            });
        }
        levels.push(area_downsample(image, w, h, cfg.level_scale(level)));
    }
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vga_three_levels() {
        let img = GrayImage::filled(640, 480, 7);
        let p = build_pyramid(&img, &PyramidConfig::default()).unwrap();
        let dims: Vec<_> = p.iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(dims, vec![(640, 480), (320, 240), (160, 120)]);
        assert!(p[2].data().iter().all(|&v| v == 7));
    }

    #[test]
    fn single_level_is_input() {
        let img = GrayImage::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let p = build_pyramid(&img, &PyramidConfig::new(2.0, 1).unwrap()).unwrap();
        assert_eq!(p, vec![img]);
    }

    #[test]
    fn too_deep() {
        let img = GrayImage::filled(4, 4, 0);
        let r = build_pyramid(&img, &PyramidConfig::new(2.0, 4).unwrap());
        assert!(matches!(r, Err(FeatureError::ConfigTooDeep { level: 3, .. })));
    }

    #[test]
    fn averages_blocks() {
        let img = GrayImage::new(4, 2, vec![0, 100, 10, 20, 200, 100, 30, 40]).unwrap();
        let p = build_pyramid(&img, &PyramidConfig::new(2.0, 2).unwrap()).unwrap();
        assert_eq!(p[1].data(), &[100, 25]);
    }

    #[test]
    fn fractional_factor_dimensions() {
        let cfg = PyramidConfig::new(std::f64::consts::SQRT_2, 3).unwrap();
        assert_eq!(level_dimensions(640, 480, &cfg, 2), (320, 240));
        assert_eq!(level_dimensions(640, 480, &cfg, 1), (452, 339));
        let p = build_pyramid(&GrayImage::filled(640, 480, 9), &cfg).unwrap();
        assert!(p[1].data().iter().all(|&v| v == 9));
    }
}
