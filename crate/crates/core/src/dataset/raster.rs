use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::SeededRng;

/// Band-major `bands x height x width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRaster {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureRaster {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if bands == 0 || data.len() != bands * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {bands}x{height}x{width} raster",
                data.len()
            )));
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        bands: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(bands * height * width);
        for b in 0..bands {
            for r in 0..height {
                for c in 0..width {
                    data.push(f(b, r, c));
                }
            }
        }
        Self {
            bands,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.bands, self.height, self.width, |b, r, c| {
            self.get(b, r, self.width - 1 - c)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.bands, self.height, self.width, |b, r, c| {
            self.get(b, self.height - 1 - r, c)
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::CropTooLarge {
                crop_h: top + height,
                crop_w: left + width,
                height: self.height,
                width: self.width,
            });
        }
        Ok(Self::from_fn(self.bands, height, width, |b, r, c| {
            self.get(b, top + r, left + c)
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Random flips and a uniformly placed crop.
    Train,
    /// Centre crop only.
    Eval,
}

/// Concrete augmentation for one raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    pub top: usize,
    pub left: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl AugmentPlan {
    pub fn sample(
        raster: &FeatureRaster,
        crop: (usize, usize),
        mode: AugmentMode,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (crop_h, crop_w) = crop;
        if crop_h > raster.height || crop_w > raster.width || crop_h == 0 || crop_w == 0 {
            return Err(Error::CropTooLarge {
                crop_h,
                crop_w,
                height: raster.height,
                width: raster.width,
            });
        }
        let (slack_h, slack_w) = (raster.height - crop_h, raster.width - crop_w);
        Ok(match mode {
            AugmentMode::Train => Self {
                hflip: rng.random_bool(0.5),
                vflip: rng.random_bool(0.5),
                top: rng.random_range(0..=slack_h),
                left: rng.random_range(0..=slack_w),
                crop_h,
                crop_w,
            },
            AugmentMode::Eval => Self {
                hflip: false,
                vflip: false,
                top: slack_h / 2,
                left: slack_w / 2,
                crop_h,
                crop_w,
            },
        })
    }

    pub fn apply(&self, raster: &FeatureRaster) -> Result<FeatureRaster> {
        let mut out = raster.clone();
        if self.hflip {
            out = out.flip_horizontal();
        }
        if self.vflip {
            out = out.flip_vertical();
        }
        out.crop(self.top, self.left, self.crop_h, self.crop_w)
    }
}

pub fn augment(
    raster: &FeatureRaster,
    rng: &mut SeededRng,
    crop: (usize, usize),
    mode: AugmentMode,
) -> Result<FeatureRaster> {
    AugmentPlan::sample(raster, crop, mode, rng)?.apply(raster)
}

/// Per-band standardisation with the population standard deviation.
///
/// Constant bands become all zeros; their indices are returned.
pub fn zscore_bands(raster: &FeatureRaster) -> (FeatureRaster, Vec<usize>) {
    let mut out = raster.clone();
    let n = raster.height * raster.width;
    let mut constant = Vec::new();
    for b in 0..raster.bands {
        let band = raster.band(b);
        let dst = &mut out.data[b * n..(b + 1) * n];
        let first = band.first().copied().unwrap_or(0.0);
        if band.iter().all(|&v| v == first) {
            warn!("band {b} is constant; z-scored to zeros");
            dst.iter_mut().for_each(|v| *v = 0.0);
            constant.push(b);
            continue;
        }
        let mean = band.iter().sum::<f64>() / n as f64;
        let sd = (band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for (d, v) in dst.iter_mut().zip(band) {
            *d = (v - mean) / sd;
        }
    }
    (out, constant)
}
