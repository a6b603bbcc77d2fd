//! Deterministic synthetic hyperspectral scenes with a planted
//! spectrum-to-attribute relation.
//!
//! Each scene is an elliptical object on a near-zero background. Pixel
//! spectra are convex mixtures of smooth endmembers (shared across a
//! dataset) plus sensor noise. The scene attribute is an affine function
//! of the noiseless mean ROI spectrum at the configured planted bands,
//! so with zero noise it is exactly linearly recoverable — the oracle
//! behind the regression, selection and attribution tests.

use crate::cube::Hypercube;
use crate::segment::Mask;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    BadConfig(String),
}

/// Geometry and spectral layout of generated scenes.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub wavelength_min: f64,
    pub wavelength_max: f64,
    pub endmembers: usize,
    pub noise_sd: f64,
    /// Band indices the attribute is planted on.
    pub planted_bands: Vec<usize>,
    /// Ellipse semi-axis range as a fraction of the half-extent.
    pub ellipse_min_frac: f64,
    pub ellipse_max_frac: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 31,
            wavelength_min: 400.0,
            wavelength_max: 1000.0,
            endmembers: 4,
            noise_sd: 0.004,
            // 480, 700 and 860 nm on the default 20 nm axis
            planted_bands: vec![4, 15, 23],
            ellipse_min_frac: 0.5,
            ellipse_max_frac: 0.8,
        }
    }
}

impl SceneConfig {
    pub fn wavelengths(&self) -> Vec<f64> {
        let step = (self.wavelength_max - self.wavelength_min) / (self.bands as f64 - 1.0);
        (0..self.bands)
            .map(|i| self.wavelength_min + step * i as f64)
            .collect()
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.bands < 8 {
            return Err(SynthError::BadConfig(format!(
                "need at least 8 bands, got {}",
                self.bands
            )));
        }
        if self.noise_sd < 0.0 {
            return Err(SynthError::BadConfig("noise sd must be >= 0".into()));
        }
        if self.endmembers < 2 {
            return Err(SynthError::BadConfig("need at least 2 endmembers".into()));
        }
        if self.planted_bands.is_empty()
            || self.planted_bands.iter().any(|&b| b >= self.bands)
        {
            return Err(SynthError::BadConfig(format!(
                "planted bands {:?} outside 0..{}",
                self.planted_bands, self.bands
            )));
        }
        if !(self.wavelength_max > self.wavelength_min) {
            return Err(SynthError::BadConfig("empty wavelength range".into()));
        }
        if !(0.0 < self.ellipse_min_frac
            && self.ellipse_min_frac <= self.ellipse_max_frac
            && self.ellipse_max_frac < 0.95)
        {
            return Err(SynthError::BadConfig(format!(
                "ellipse fractions [{}, {}] infeasible",
                self.ellipse_min_frac, self.ellipse_max_frac
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(SynthError::BadConfig("scene smaller than 8x8".into()));
        }
        Ok(())
    }
}

/// One generated scene: reflectance cube, ground-truth object mask, and
/// the planted attribute in percent.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub cube: Hypercube,
    pub mask: Mask,
    pub attribute: f64,
}

/// Attribute range the affine calibration maps onto.
const ATTRIBUTE_LO: f64 = 7.0;
const ATTRIBUTE_HI: f64 = 45.0;
const BACKGROUND_LEVEL: f64 = 0.02;

/// splitmix64-style mix for per-scene seed derivation.
fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Shares the endmember basis and attribute calibration across all
/// scenes generated from one master seed.
pub struct SceneGenerator {
    config: SceneConfig,
    master_seed: u64,
    wavelengths: Vec<f64>,
    /// endmember spectra, `endmembers x bands`
    basis: Vec<Vec<f64>>,
    attr_offset: f64,
    attr_scale: f64,
}

impl SceneGenerator {
    pub fn new(config: SceneConfig, master_seed: u64) -> Result<Self, SynthError> {
        config.validate()?;
        let wavelengths = config.wavelengths();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(master_seed, 0));

        // Base shape: low in the blue, rising through the red edge. Keeps
        // the 602-452 nm band difference positive for every mixture.
        let base = |wl: f64| 0.10 + 0.50 / (1.0 + (-(wl - 560.0) / 45.0).exp());
        // Planted signature: a bump at each planted wavelength whose
        // amplitude grows with the endmember's attribute level, giving the
        // calibration below a guaranteed spread.
        let planted_wl: Vec<f64> = config.planted_bands.iter().map(|&b| wavelengths[b]).collect();

        let e = config.endmembers;
        let mut basis = Vec::with_capacity(e);
        for member in 0..e {
            let level = member as f64 / (e as f64 - 1.0);
            let n_bumps = rng.random_range(2..=3);
            let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
                .map(|_| {
                    (
                        rng.random_range(-0.08..0.15),
                        rng.random_range(430.0..980.0),
                        rng.random_range(40.0..120.0),
                    )
                })
                .collect();
            let spectrum: Vec<f64> = wavelengths
                .iter()
                .map(|&wl| {
                    let mut v = base(wl);
                    for &(a, mu, sigma) in &bumps {
                        v += a * (-(wl - mu) * (wl - mu) / (2.0 * sigma * sigma)).exp();
                    }
                    for &pw in &planted_wl {
                        v += 0.22 * level * (-(wl - pw) * (wl - pw) / (2.0 * 30.0 * 30.0)).exp();
                    }
                    v.clamp(0.02, 0.98)
                })
                .collect();
            basis.push(spectrum);
        }

        // calibrate attribute = offset + scale * sum of planted-band values
        // so any convex mixture lands in [ATTRIBUTE_LO, ATTRIBUTE_HI]
        let z: Vec<f64> = basis
            .iter()
            .map(|m| config.planted_bands.iter().map(|&b| m[b]).sum::<f64>())
            .collect();
        let z_min = z.iter().cloned().fold(f64::INFINITY, f64::min);
        let z_max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if z_max - z_min < 1e-6 {
            return Err(SynthError::BadConfig(
                "endmembers carry no spread at the planted bands".into(),
            ));
        }
        let attr_scale = (ATTRIBUTE_HI - ATTRIBUTE_LO) / (z_max - z_min);
        let attr_offset = ATTRIBUTE_LO - attr_scale * z_min;

        Ok(Self {
            config,
            master_seed,
            wavelengths,
            basis,
            attr_offset,
            attr_scale,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    /// Attribute implied by a mean spectrum (the planted affine relation).
    pub fn attribute_of_mean_spectrum(&self, mean: &[f64]) -> f64 {
        let s: f64 = self.config.planted_bands.iter().map(|&b| mean[b]).sum();
        self.attr_offset + self.attr_scale * s
    }

    /// Generate scene `index`; deterministic in (master seed, index).
    pub fn scene(&self, index: usize) -> LabeledScene {
        let cfg = &self.config;
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(self.master_seed, index as u64 + 1));
        let (h, w, bands) = (cfg.height, cfg.width, cfg.bands);
        let e = cfg.endmembers;

        // ellipse geometry
        let a = rng.random_range(cfg.ellipse_min_frac..=cfg.ellipse_max_frac) * w as f64 / 2.0;
        let b = rng.random_range(cfg.ellipse_min_frac..=cfg.ellipse_max_frac) * h as f64 / 2.0;
        let cx = w as f64 / 2.0 + rng.random_range(-0.05..0.05) * w as f64;
        let cy = h as f64 / 2.0 + rng.random_range(-0.05..0.05) * h as f64;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sin_t, cos_t) = theta.sin_cos();

        // base mixture with one dominant endmember
        let dominant = rng.random_range(0..e);
        let dom_weight = rng.random_range(0.60..0.95);
        let mut alpha_base = vec![0.0f64; e];
        let mut rest_sum = 0.0;
        for (i, a) in alpha_base.iter_mut().enumerate() {
            if i != dominant {
                *a = rng.random_range(0.05..1.0);
                rest_sum += *a;
            }
        }
        for (i, a) in alpha_base.iter_mut().enumerate() {
            if i == dominant {
                *a = dom_weight;
            } else {
                *a *= (1.0 - dom_weight) / rest_sum;
            }
        }

        // smooth spatial modulation of the mixture
        let fields: Vec<(f64, f64, f64)> = (0..e)
            .map(|_| {
                (
                    rng.random_range(0.5..1.5),
                    rng.random_range(0.5..1.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();

        let mut bits = vec![false; h * w];
        let mut data = vec![0.0f64; h * w * bands];
        let mut planted_sum = 0.0f64;
        let mut fg_count = 0usize;
        let mut alpha = vec![0.0f64; e];

        for y in 0..h {
            for x in 0..w {
                let px = y * w + x;
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (dx * cos_t + dy * sin_t) / a;
                let v = (-dx * sin_t + dy * cos_t) / b;
                let inside = u * u + v * v <= 1.0;
                bits[px] = inside;
                let out = &mut data[px * bands..(px + 1) * bands];
                if inside {
                    fg_count += 1;
                    let mut total = 0.0;
                    for (i, al) in alpha.iter_mut().enumerate() {
                        let (fu, fv, phase) = fields[i];
                        let m = (std::f64::consts::TAU
                            * (fu * x as f64 / w as f64 + fv * y as f64 / h as f64)
                            + phase)
                            .sin();
                        *al = alpha_base[i] * (1.0 + 0.25 * m);
                        total += *al;
                    }
                    for al in alpha.iter_mut() {
                        *al /= total;
                    }
                    for (bi, slot) in out.iter_mut().enumerate() {
                        let mut val = 0.0;
                        for (al, member) in alpha.iter().zip(&self.basis) {
                            val += al * member[bi];
                        }
                        *slot = val;
                    }
                    for &pb in &cfg.planted_bands {
                        planted_sum += out[pb];
                    }
                } else {
                    out.fill(BACKGROUND_LEVEL);
                }
            }
        }

        // attribute comes from the noiseless foreground mean
        let attribute = if fg_count > 0 {
            self.attr_offset + self.attr_scale * planted_sum / fg_count as f64
        } else {
            ATTRIBUTE_LO
        };

        if cfg.noise_sd > 0.0 {
            for v in data.iter_mut() {
                *v = (*v + cfg.noise_sd * gaussian(&mut rng)).clamp(0.0, 1.0);
            }
        }

        let cube = Hypercube::new(h, w, self.wavelengths.clone(), data)
            .expect("generator builds consistent cubes");
        LabeledScene {
            cube,
            mask: Mask::new(h, w, bits),
            attribute,
        }
    }
}

/// Generate a single scene (scene 0 of the seed's stream).
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<LabeledScene, SynthError> {
    Ok(SceneGenerator::new(config.clone(), seed)?.scene(0))
}

/// Generate `n` scenes with per-scene derived seeds.
pub fn generate_dataset(
    n: usize,
    config: &SceneConfig,
    seed: u64,
) -> Result<Vec<LabeledScene>, SynthError> {
    let generator = SceneGenerator::new(config.clone(), seed)?;
    Ok((0..n).map(|i| generator.scene(i)).collect())
}

/// Synthetic spectra table with independent uniform bands and an affine
/// attribute planted on `planted` band indices; the identification
/// target for selection and attribution tests.
pub fn planted_table(
    n: usize,
    bands: usize,
    planted: &[usize],
    noise_sd: f64,
    seed: u64,
) -> crate::chemometrics::SpectraTable {
    assert!(planted.iter().all(|&p| p < bands), "planted band range");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let coefs = [8.0, -5.0, 6.0, 4.0, -3.0];
    let x = Array2::from_shape_fn((n, bands), |_| rng.random_range(0.0..1.0));
    let y: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|row| {
            let mut v = 12.0;
            for (k, &p) in planted.iter().enumerate() {
                v += coefs[k % coefs.len()] * row[p];
            }
            v + noise_sd * gaussian(&mut rng)
        })
        .collect();
    let ids = (0..n).map(|i| format!("p{i:03}")).collect();
    let wavelengths = (0..bands).map(|i| 400.0 + 10.0 * i as f64).collect();
    crate::chemometrics::SpectraTable::new(ids, x, y, wavelengths)
        .expect("planted table is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemometrics::{fit_plsr, predict_plsr, regression_metrics, SpectraTable};
    use crate::segment::mean_spectrum;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 42).unwrap();
        let b = generate_scene(&cfg, 42).unwrap();
        assert_eq!(a.cube, b.cube);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.attribute, b.attribute);
    }

    #[test]
    fn distinct_seeds_give_distinct_scenes() {
        let cfg = SceneConfig::default();
        let scenes = generate_dataset(6, &cfg, 1).unwrap();
        for i in 0..scenes.len() {
            for j in i + 1..scenes.len() {
                assert_ne!(scenes[i].cube, scenes[j].cube, "scenes {i} and {j}");
            }
        }
        let other = generate_scene(&cfg, 2).unwrap();
        assert_ne!(scenes[0].cube, other.cube);
    }

    #[test]
    fn attribute_in_declared_range_with_spread() {
        let cfg = SceneConfig::default();
        let scenes = generate_dataset(60, &cfg, 3).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &scenes {
            assert!(
                (5.0..=50.0).contains(&s.attribute),
                "attribute {}",
                s.attribute
            );
            lo = lo.min(s.attribute);
            hi = hi.max(s.attribute);
        }
        assert!(hi - lo >= 20.0, "attribute span {}", hi - lo);
    }

    #[test]
    fn foreground_area_within_configured_ellipse_bounds() {
        let cfg = SceneConfig::default();
        let scenes = generate_dataset(10, &cfg, 4).unwrap();
        let half_w = cfg.width as f64 / 2.0;
        let half_h = cfg.height as f64 / 2.0;
        let area_min =
            std::f64::consts::PI * cfg.ellipse_min_frac * half_w * cfg.ellipse_min_frac * half_h;
        let area_max =
            std::f64::consts::PI * cfg.ellipse_max_frac * half_w * cfg.ellipse_max_frac * half_h;
        // one pixel row of slack for boundary discretization
        let slack = cfg.width as f64;
        for s in &scenes {
            let count = s.mask.count() as f64;
            assert!(
                count >= area_min - slack && count <= area_max + slack,
                "area {count} outside [{area_min}, {area_max}] +- {slack}"
            );
        }
    }

    #[test]
    fn background_is_near_zero() {
        let cfg = SceneConfig::default();
        let s = generate_scene(&cfg, 5).unwrap();
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if !s.mask.get(y, x) {
                    for &v in s.cube.spectrum_at(y, x) {
                        assert!(v < 0.06, "background value {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_attribute_recovered_by_plsr() {
        let cfg = SceneConfig {
            noise_sd: 0.0,
            ..SceneConfig::default()
        };
        let scenes = generate_dataset(40, &cfg, 6).unwrap();
        let wavelengths = cfg.wavelengths();
        let mut flat = Vec::new();
        let mut y = Vec::new();
        for s in &scenes {
            let spec = mean_spectrum(&s.cube, &s.mask).unwrap();
            flat.extend_from_slice(&spec.values);
            y.push(s.attribute);
        }
        let x = Array2::from_shape_vec((scenes.len(), cfg.bands), flat).unwrap();
        let ids = (0..scenes.len()).map(|i| format!("s{i}")).collect();
        let table = SpectraTable::new(ids, x.clone(), y.clone(), wavelengths).unwrap();
        let model = fit_plsr(&table, cfg.planted_bands.len()).unwrap();
        let pred = predict_plsr(&model, &x).unwrap();
        let m = regression_metrics(&y, &pred).unwrap();
        assert!(m.r2 >= 0.999, "r2 {}", m.r2);
    }

    #[test]
    fn attribute_matches_planted_affine_relation() {
        let cfg = SceneConfig {
            noise_sd: 0.0,
            ..SceneConfig::default()
        };
        let generator = SceneGenerator::new(cfg.clone(), 7).unwrap();
        for i in 0..5 {
            let s = generator.scene(i);
            let spec = mean_spectrum(&s.cube, &s.mask).unwrap();
            let implied = generator.attribute_of_mean_spectrum(&spec.values);
            assert!(
                (implied - s.attribute).abs() < 1e-9,
                "{implied} vs {}",
                s.attribute
            );
        }
    }

    #[test]
    fn planted_table_is_linearly_identified() {
        let table = planted_table(50, 20, &[2, 9, 17], 0.0, 11);
        // restricted to the planted bands the relation is exactly linear
        let sub = table.subset_bands(&[2, 9, 17]);
        let model = fit_plsr(&sub, 3).unwrap();
        let pred = predict_plsr(&model, &sub.x).unwrap();
        let m = regression_metrics(&sub.y, &pred).unwrap();
        assert!(m.r2 > 0.999999, "r2 {}", m.r2);

        // the full-rank fit on all bands recovers zero weight elsewhere
        let full = fit_plsr(&table, 20).unwrap();
        for (j, c) in full.coefficients.iter().enumerate() {
            if ![2usize, 9, 17].contains(&j) {
                assert!(c.abs() < 1e-6, "band {j} coefficient {c}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = SceneConfig {
            bands: 4,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&bad, 1).is_err());
        let bad = SceneConfig {
            planted_bands: vec![40],
            ..SceneConfig::default()
        };
        assert!(generate_scene(&bad, 1).is_err());
        let bad = SceneConfig {
            ellipse_min_frac: 0.9,
            ellipse_max_frac: 0.5,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&bad, 1).is_err());
    }
}
