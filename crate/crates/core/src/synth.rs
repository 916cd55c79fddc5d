//! Seeded synthetic multimodal scenes: Voronoi land-cover regions, a per-class spectral
//! signature plus noise in the HSI cube, and a per-class elevation level in the
//! auxiliary cube.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::preprocess::{LabelMap, SceneCube};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub hsi_bands: usize,
    pub aux_bands: usize,
    /// Voronoi cells; cell `i` belongs to class `i % classes`.
    pub regions: usize,
    pub spectral_noise: f64,
    pub aux_noise: f64,
    /// Classes `2j` and `2j + 1` share one spectral signature and differ only in elevation.
    pub collision: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 3,
            hsi_bands: 16,
            aux_bands: 1,
            regions: 12,
            spectral_noise: 0.02,
            aux_noise: 0.02,
            collision: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Four classes in two spectrally identical pairs.
    pub fn collision(seed: u64) -> Self {
        Self {
            classes: 4,
            regions: 16,
            collision: true,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("height", self.height),
            ("width", self.width),
            ("hsi_bands", self.hsi_bands),
            ("aux_bands", self.aux_bands),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::config(
                "classes",
                format!("must be in 2..=65535, got {}", self.classes),
            ));
        }
        if self.regions < self.classes {
            return Err(Error::config(
                "regions",
                format!(
                    "{} regions cannot cover {} classes",
                    self.regions, self.classes
                ),
            ));
        }
        if self.regions > self.height * self.width {
            return Err(Error::config("regions", "more regions than pixels"));
        }
        if !(self.spectral_noise >= 0.0 && self.aux_noise >= 0.0) {
            return Err(Error::config("noise", "noise levels must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub hsi: SceneCube,
    pub aux: SceneCube,
    pub labels: LabelMap,
    /// Noise-free spectrum of each class.
    pub spectral: Vec<Vec<f64>>,
    /// Noise-free auxiliary values of each class.
    pub elevation: Vec<Vec<f64>>,
}

const MIN_SIGNATURE_GAP: f64 = 0.5;

fn signature<R: Rng>(bands: usize, rng: &mut R) -> Vec<f64> {
    let freq = rng.random_range(0.5..2.5);
    let phase = rng.random_range(0.0..1.0);
    let tilt = rng.random_range(-0.15..0.15);
    (0..bands)
        .map(|b| {
            let t = b as f64 / bands as f64;
            0.5 + 0.3 * (std::f64::consts::TAU * (freq * t + phase)).sin() + tilt * (t - 0.5)
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Values are rounded to f32 so the scene survives a raster round trip unchanged.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let distinct = if spec.collision {
        spec.classes.div_ceil(2)
    } else {
        spec.classes
    };
    let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(distinct);
    let mut attempts = 0;
    while signatures.len() < distinct {
        let s = signature(spec.hsi_bands, &mut rng);
        attempts += 1;
        if attempts < 10_000
            && signatures
                .iter()
                .any(|o| distance(o, &s) < MIN_SIGNATURE_GAP)
        {
            continue;
        }
        signatures.push(s);
    }
    let spectral: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| signatures[if spec.collision { c / 2 } else { c }].clone())
        .collect();
    let elevation: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let level = 0.2 + 0.6 * c as f64 / (spec.classes - 1) as f64;
            (0..spec.aux_bands)
                .map(|b| level + 0.05 * b as f64)
                .collect()
        })
        .collect();

    let seeds: Vec<(f64, f64)> = (0..spec.regions)
        .map(|_| {
            (
                rng.random_range(0.0..spec.height as f64),
                rng.random_range(0.0..spec.width as f64),
            )
        })
        .collect();
    let mut raw = Vec::with_capacity(spec.height * spec.width);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = seeds
                .iter()
                .enumerate()
                .map(|(i, &(sy, sx))| (i, (sy - y).powi(2) + (sx - x).powi(2)))
                .fold(
                    (0, f64::INFINITY),
                    |best, cur| if cur.1 < best.1 { cur } else { best },
                )
                .0;
            raw.push((nearest % spec.classes + 1) as u16);
        }
    }
    // cell i holds seed i, so every class owns a region unless a seed is swallowed
    // by a neighbor; force the seed pixel itself to its own class in that case
    for (i, &(sy, sx)) in seeds.iter().enumerate() {
        let idx = (sy as usize) * spec.width + sx as usize;
        raw[idx] = (i % spec.classes + 1) as u16;
    }
    let labels = LabelMap::new(spec.height, spec.width, raw)?;

    let spectral_noise = Normal::new(0.0, spec.spectral_noise)
        .map_err(|e| Error::config("spectral_noise", e.to_string()))?;
    let aux_noise =
        Normal::new(0.0, spec.aux_noise).map_err(|e| Error::config("aux_noise", e.to_string()))?;
    let mut hsi = Vec::with_capacity(labels.raw.len() * spec.hsi_bands);
    let mut aux = Vec::with_capacity(labels.raw.len() * spec.aux_bands);
    for &l in &labels.raw {
        let c = l as usize - 1;
        hsi.extend(
            spectral[c]
                .iter()
                .map(|&v| f32_round(v + spectral_noise.sample(&mut rng))),
        );
        aux.extend(
            elevation[c]
                .iter()
                .map(|&v| f32_round(v + aux_noise.sample(&mut rng))),
        );
    }
    Ok(SynthScene {
        hsi: SceneCube::new(spec.height, spec.width, spec.hsi_bands, hsi)?,
        aux: SceneCube::new(spec.height, spec.width, spec.aux_bands, aux)?,
        labels,
        spectral,
        elevation,
    })
}

/// Overall accuracy of assigning each labeled pixel to the class whose noise-free prototype
/// is nearest, using spectra alone or spectra plus auxiliary bands. Ties go to the lower class.
pub fn nearest_prototype_oa(scene: &SynthScene, with_aux: bool) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for p in scene.labels.labeled() {
        let hsi = scene.hsi.pixel(p.row, p.col);
        let aux = scene.aux.pixel(p.row, p.col);
        let score = |c: usize| {
            let mut d = distance(hsi, &scene.spectral[c]).powi(2);
            if with_aux {
                d += distance(aux, &scene.elevation[c]).powi(2);
            }
            d
        };
        let guess = (0..scene.spectral.len())
            .map(|c| (c, score(c)))
            .fold(
                (0, f64::INFINITY),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            )
            .0;
        correct += usize::from(guess == p.label);
        total += 1;
    }
    correct as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_is_present() {
        for seed in 0..5 {
            let s = generate(&SynthSpec {
                seed,
                ..SynthSpec::default()
            })
            .unwrap();
            for c in 1..=3u16 {
                assert!(s.labels.raw.contains(&c), "seed {seed} lacks class {c}");
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate(&SynthSpec::default()).unwrap();
        let b = generate(&SynthSpec::default()).unwrap();
        assert_eq!(a.hsi, b.hsi);
        assert_eq!(a.labels, b.labels);
        let c = generate(&SynthSpec {
            seed: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_ne!(a.hsi, c.hsi);
    }

    #[test]
    fn collision_pairs_share_spectra() {
        let s = generate(&SynthSpec::collision(3)).unwrap();
        assert_eq!(s.spectral[0], s.spectral[1]);
        assert_eq!(s.spectral[2], s.spectral[3]);
        assert_ne!(s.spectral[0], s.spectral[2]);
        assert_ne!(s.elevation[0], s.elevation[1]);
    }

    #[test]
    fn rejects_too_few_regions() {
        let spec = SynthSpec {
            regions: 2,
            ..SynthSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config { .. })));
    }
}
