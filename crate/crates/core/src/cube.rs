//! Hypercube representation, reflectance calibration, band selection and
//! RGB rendering.
//!
//! A [`Hypercube`] stores reflectance values in (line, sample, band) order,
//! i.e. the spectrum of a pixel is contiguous in memory. Values are `f64`
//! in memory; on-disk persistence (see [`crate::bil`]) is 32-bit float.

use thiserror::Error;

/// Reflectance values above this are clamped during calibration. Specular
/// highlights can push the ratio past 1; values beyond 2 indicate a broken
/// reference pair rather than a bright pixel.
pub const CALIBRATION_CLAMP_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum CubeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("white and dark references are equal at (line {line}, sample {sample}, band {band}); cannot calibrate")]
    ZeroDenominator {
        line: usize,
        sample: usize,
        band: usize,
    },
    #[error("wavelengths must be strictly increasing (band {0} is not)")]
    WavelengthOrder(usize),
    #[error("data length {got} does not match {height}x{width}x{bands}")]
    DataLength {
        got: usize,
        height: usize,
        width: usize,
        bands: usize,
    },
    #[error("wavelength count {got} does not match band count {bands}")]
    WavelengthCount { got: usize, bands: usize },
    #[error("targets {a} nm and {b} nm both resolve to source band {band}")]
    DuplicateBand { a: f64, b: f64, band: usize },
    #[error("no wavelength targets given")]
    EmptyTargets,
    #[error("cube has no bands")]
    EmptyCube,
    #[error("cube covers {lo}-{hi} nm; rendering needs coverage of {need_lo}-{need_hi} nm")]
    RangeTooNarrow {
        lo: f64,
        hi: f64,
        need_lo: f64,
        need_hi: f64,
    },
    #[error("non-finite value at (line {line}, sample {sample}, band {band})")]
    NonFinite {
        line: usize,
        sample: usize,
        band: usize,
    },
}

/// H×W×B reflectance volume with a wavelength axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypercube {
    height: usize,
    width: usize,
    bands: usize,
    wavelengths: Vec<f64>,
    data: Vec<f64>,
}

impl Hypercube {
    /// Build a cube from raw parts, checking the shape invariants.
    pub fn new(
        height: usize,
        width: usize,
        wavelengths: Vec<f64>,
        data: Vec<f64>,
    ) -> Result<Self, CubeError> {
        let bands = wavelengths.len();
        if data.len() != height * width * bands {
            return Err(CubeError::DataLength {
                got: data.len(),
                height,
                width,
                bands,
            });
        }
        for b in 1..bands {
            if wavelengths[b] <= wavelengths[b - 1] {
                return Err(CubeError::WavelengthOrder(b));
            }
        }
        Ok(Self {
            height,
            width,
            bands,
            wavelengths,
            data,
        })
    }

    /// Cube filled with a constant value.
    pub fn constant(
        height: usize,
        width: usize,
        wavelengths: Vec<f64>,
        value: f64,
    ) -> Result<Self, CubeError> {
        let n = height * width * wavelengths.len();
        Self::new(height, width, wavelengths, vec![value; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, line: usize, sample: usize, band: usize) -> usize {
        (line * self.width + sample) * self.bands + band
    }

    #[inline]
    pub fn value(&self, line: usize, sample: usize, band: usize) -> f64 {
        self.data[self.index(line, sample, band)]
    }

    /// Contiguous spectrum of one pixel.
    #[inline]
    pub fn spectrum_at(&self, line: usize, sample: usize) -> &[f64] {
        let start = (line * self.width + sample) * self.bands;
        &self.data[start..start + self.bands]
    }

    /// One band as a dense H×W plane.
    pub fn band_plane(&self, band: usize) -> Vec<f64> {
        assert!(band < self.bands, "band {band} out of range");
        let mut plane = Vec::with_capacity(self.height * self.width);
        for px in 0..self.height * self.width {
            plane.push(self.data[px * self.bands + band]);
        }
        plane
    }

    fn same_geometry(&self, other: &Hypercube) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.bands == other.bands
            && self.wavelengths == other.wavelengths
    }

    /// Error if any value is NaN or infinite.
    pub fn check_finite(&self) -> Result<(), CubeError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                let px = i / self.bands;
                return Err(CubeError::NonFinite {
                    line: px / self.width,
                    sample: px % self.width,
                    band: i % self.bands,
                });
            }
        }
        Ok(())
    }
}

/// 8-bit three-channel image, row-major RGB triplets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "pixel buffer size");
        Self {
            height,
            width,
            pixels,
        }
    }

    #[inline]
    pub fn pixel(&self, line: usize, sample: usize) -> (u8, u8, u8) {
        let i = (line * self.width + sample) * 3;
        (self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }
}

/// How many values were clamped while calibrating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClampStats {
    pub below_zero: usize,
    pub above_max: usize,
}

/// Reflectance calibration against white and dark references:
/// `(raw - dark) / (white - dark)` per voxel, clamped to
/// `[0, CALIBRATION_CLAMP_MAX]`.
pub fn calibrate_reflectance(
    raw: &Hypercube,
    white: &Hypercube,
    dark: &Hypercube,
) -> Result<Hypercube, CubeError> {
    calibrate_reflectance_with_stats(raw, white, dark).map(|(cube, _)| cube)
}

/// Same as [`calibrate_reflectance`] but also reports clamp counts.
pub fn calibrate_reflectance_with_stats(
    raw: &Hypercube,
    white: &Hypercube,
    dark: &Hypercube,
) -> Result<(Hypercube, ClampStats), CubeError> {
    if !raw.same_geometry(white) || !raw.same_geometry(dark) {
        return Err(CubeError::DimensionMismatch(format!(
            "raw {}x{}x{}, white {}x{}x{}, dark {}x{}x{}",
            raw.height, raw.width, raw.bands, white.height, white.width, white.bands, dark.height,
            dark.width, dark.bands
        )));
    }
    let mut stats = ClampStats::default();
    let mut data = Vec::with_capacity(raw.data.len());
    for i in 0..raw.data.len() {
        let denom = white.data[i] - dark.data[i];
        if denom == 0.0 {
            let px = i / raw.bands;
            return Err(CubeError::ZeroDenominator {
                line: px / raw.width,
                sample: px % raw.width,
                band: i % raw.bands,
            });
        }
        let mut v = (raw.data[i] - dark.data[i]) / denom;
        if v < 0.0 {
            v = 0.0;
            stats.below_zero += 1;
        } else if v > CALIBRATION_CLAMP_MAX {
            v = CALIBRATION_CLAMP_MAX;
            stats.above_max += 1;
        }
        data.push(v);
    }
    let cube = Hypercube::new(raw.height, raw.width, raw.wavelengths.clone(), data)?;
    cube.check_finite()?;
    Ok((cube, stats))
}

/// Index of the band whose wavelength is nearest to `target_nm`.
/// Ties break toward the lower index.
pub fn band_index_nearest(cube: &Hypercube, target_nm: f64) -> Result<usize, CubeError> {
    if cube.bands == 0 {
        return Err(CubeError::EmptyCube);
    }
    let mut best = 0usize;
    let mut best_dist = (cube.wavelengths[0] - target_nm).abs();
    for (i, wl) in cube.wavelengths.iter().enumerate().skip(1) {
        let d = (wl - target_nm).abs();
        if d < best_dist {
            best = i;
            best_dist = d;
        }
    }
    Ok(best)
}

/// Sub-cube containing the bands nearest to each target wavelength, in
/// ascending wavelength order. Two targets resolving to the same source
/// band are rejected.
pub fn select_bands(cube: &Hypercube, targets: &[f64]) -> Result<Hypercube, CubeError> {
    if targets.is_empty() {
        return Err(CubeError::EmptyTargets);
    }
    let mut picks: Vec<(usize, f64)> = Vec::with_capacity(targets.len());
    for &t in targets {
        let idx = band_index_nearest(cube, t)?;
        if let Some(&(prev_idx, prev_t)) = picks.iter().find(|(i, _)| *i == idx) {
            debug_assert_eq!(prev_idx, idx);
            return Err(CubeError::DuplicateBand {
                a: prev_t,
                b: t,
                band: idx,
            });
        }
        picks.push((idx, t));
    }
    picks.sort_by(|a, b| a.0.cmp(&b.0));
    let indices: Vec<usize> = picks.iter().map(|(i, _)| *i).collect();
    let wavelengths: Vec<f64> = indices.iter().map(|&i| cube.wavelengths[i]).collect();
    let mut data = Vec::with_capacity(cube.height * cube.width * indices.len());
    for px in 0..cube.height * cube.width {
        let base = px * cube.bands;
        for &i in &indices {
            data.push(cube.data[base + i]);
        }
    }
    Hypercube::new(cube.height, cube.width, wavelengths, data)
}

/// Red, green and blue rendering wavelengths in nm.
pub const RGB_WAVELENGTHS: [f64; 3] = [599.0, 549.0, 449.0];

/// Gamma-corrected RGB rendering from the bands nearest 599/549/449 nm.
/// Each reflectance value is clamped to [0, 1] and mapped to
/// `round(255 * v^(1/gamma))`.
pub fn render_rgb(cube: &Hypercube, gamma: f64) -> Result<RgbImage, CubeError> {
    let lo = *cube.wavelengths.first().ok_or(CubeError::EmptyCube)?;
    let hi = *cube.wavelengths.last().unwrap();
    let need_lo = RGB_WAVELENGTHS[2];
    let need_hi = RGB_WAVELENGTHS[0];
    if lo > need_lo || hi < need_hi {
        return Err(CubeError::RangeTooNarrow {
            lo,
            hi,
            need_lo,
            need_hi,
        });
    }
    let bands = [
        band_index_nearest(cube, RGB_WAVELENGTHS[0])?,
        band_index_nearest(cube, RGB_WAVELENGTHS[1])?,
        band_index_nearest(cube, RGB_WAVELENGTHS[2])?,
    ];
    let inv_gamma = 1.0 / gamma;
    let mut pixels = Vec::with_capacity(cube.height * cube.width * 3);
    for px in 0..cube.height * cube.width {
        let base = px * cube.bands;
        for &b in &bands {
            let v = cube.data[base + b].clamp(0.0, 1.0);
            pixels.push((255.0 * v.powf(inv_gamma)).round() as u8);
        }
    }
    Ok(RgbImage::new(cube.height, cube.width, pixels))
}
