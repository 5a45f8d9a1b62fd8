//! Seeded synthetic benchmark with the structure of a species-presence
//! dataset: long-tailed species base rates, habitat archetypes, locations as
//! habitat mixtures, features that are noisy linear images of the mixture,
//! and spatially clustered site coordinates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::spatial::Point;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub species: usize,
    pub feature_dim: usize,
    pub n_locations: usize,
    pub n_habitats: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            species: 62,
            feature_dim: 32,
            n_locations: 600,
            n_habitats: 8,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_habitats == 0 {
            return Err(Error::InvalidConfig("n_habitats must be at least 1".into()));
        }
        if self.species == 0 || self.feature_dim == 0 || self.n_locations == 0 {
            return Err(Error::InvalidConfig(
                "species, feature_dim and n_locations must be positive".into(),
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub ids: Vec<String>,
    pub features: Matrix,
    pub labels: Vec<Vec<f64>>,
    pub coordinates: Vec<Point>,
    /// Habitat mixture weights behind each location.
    pub mixtures: Vec<Vec<f64>>,
}

// Study area roughly the size of Great Britain, in metres.
const AREA_W: f64 = 500_000.0;
const AREA_H: f64 = 900_000.0;
const HOTSPOT_SD: f64 = 2_500.0;

fn normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let root = SeededRng::new(config.seed);
    let mut species_rng = root.fork(0);
    let mut loc_rng = root.fork(1);
    let mut space_rng = root.fork(2);
    let (s, h, d) = (config.species, config.n_habitats, config.feature_dim);

    // long-tailed base rates between ~0.003 and ~0.8
    let base: Vec<f64> = (0..s)
        .map(|_| 10f64.powf(species_rng.random_range(-2.5..-0.1)))
        .collect();
    let prototypes: Vec<Vec<f64>> = (0..h)
        .map(|_| {
            base.iter()
                .map(|b| (b * (1.2 * normal(&mut species_rng)).exp()).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    let mixing: Vec<f64> = (0..d * h).map(|_| normal(&mut species_rng)).collect();
    let offset: Vec<f64> = (0..d).map(|_| normal(&mut species_rng)).collect();

    let mut mixtures = Vec::with_capacity(config.n_locations);
    let mut labels = Vec::with_capacity(config.n_locations);
    let mut features = Vec::with_capacity(config.n_locations * d);
    for _ in 0..config.n_locations {
        let logits: Vec<f64> = (0..h).map(|_| 2.5 * normal(&mut loc_rng)).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let y: Vec<f64> = (0..s)
            .map(|j| {
                w.iter()
                    .zip(&prototypes)
                    .map(|(wk, p)| wk * p[j])
                    .sum::<f64>()
                    .clamp(0.0, 1.0)
            })
            .collect();
        for r in 0..d {
            let clean: f64 = (0..h).map(|k| mixing[r * h + k] * w[k]).sum::<f64>() + offset[r];
            let noise = if config.noise > 0.0 {
                config.noise * normal(&mut loc_rng)
            } else {
                0.0
            };
            features.push(clean + noise);
        }
        mixtures.push(w);
        labels.push(y);
    }

    let n_hotspots = (config.n_locations / 8).max(1);
    let hotspots: Vec<Point> = (0..n_hotspots)
        .map(|_| {
            Point::new(
                space_rng.random_range(0.0..AREA_W),
                space_rng.random_range(0.0..AREA_H),
            )
        })
        .collect();
    let coordinates = (0..config.n_locations)
        .map(|_| {
            if space_rng.random_bool(0.5) {
                let c = hotspots[space_rng.random_range(0..n_hotspots)];
                Point::new(
                    c.x + HOTSPOT_SD * normal(&mut space_rng),
                    c.y + HOTSPOT_SD * normal(&mut space_rng),
                )
            } else {
                Point::new(
                    space_rng.random_range(0.0..AREA_W),
                    space_rng.random_range(0.0..AREA_H),
                )
            }
        })
        .collect();

    Ok(SynthDataset {
        ids: (0..config.n_locations).map(|i| format!("loc{i:05}")).collect(),
        features: Matrix::from_vec(config.n_locations, d, features)?,
        labels,
        coordinates,
        mixtures,
    })
}
