//! Foreground masking from a band difference and ROI spectrum extraction.

use crate::cube::{band_index_nearest, CubeError, Hypercube};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("mask is degenerate: no foreground pixels (threshold {threshold})")]
    DegenerateMask { threshold: f64 },
    #[error("mask {mask_h}x{mask_w} does not match cube {cube_h}x{cube_w}")]
    DimensionMismatch {
        mask_h: usize,
        mask_w: usize,
        cube_h: usize,
        cube_w: usize,
    },
    #[error("spectra have different wavelength axes")]
    AxisMismatch,
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: not a binary PBM (P4) file", path.display())]
    BadPbm { path: PathBuf },
    #[error(transparent)]
    Cube(#[from] CubeError),
}

/// Boolean foreground mask; `true` marks region-of-interest pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask bit count");
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    #[inline]
    pub fn get(&self, line: usize, sample: usize) -> bool {
        self.bits[line * self.width + sample]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check_cube(&self, cube: &Hypercube) -> Result<(), SegmentError> {
        if self.height != cube.height() || self.width != cube.width() {
            return Err(SegmentError::DimensionMismatch {
                mask_h: self.height,
                mask_w: self.width,
                cube_h: cube.height(),
                cube_w: cube.width(),
            });
        }
        Ok(())
    }

    /// Keep only the largest 4-connected foreground component.
    pub fn largest_component(&self) -> Mask {
        let mut label = vec![usize::MAX; self.bits.len()];
        let mut sizes: Vec<usize> = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || label[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0usize;
            stack.push(start);
            label[start] = id;
            while let Some(px) = stack.pop() {
                size += 1;
                let (y, x) = (px / self.width, px % self.width);
                let mut push = |ny: usize, nx: usize| {
                    let np = ny * self.width + nx;
                    if self.bits[np] && label[np] == usize::MAX {
                        label[np] = id;
                        stack.push(np);
                    }
                };
                if y > 0 {
                    push(y - 1, x);
                }
                if y + 1 < self.height {
                    push(y + 1, x);
                }
                if x > 0 {
                    push(y, x - 1);
                }
                if x + 1 < self.width {
                    push(y, x + 1);
                }
            }
            sizes.push(size);
        }
        let Some((best, _)) = sizes.iter().enumerate().max_by_key(|(_, &s)| s) else {
            return self.clone();
        };
        let bits = label.iter().map(|&l| l == best).collect();
        Mask::new(self.height, self.width, bits)
    }
}

/// One reflectance spectrum on an explicit wavelength axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub wavelengths: Vec<f64>,
    pub values: Vec<f64>,
}

impl Spectrum {
    pub fn new(wavelengths: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(wavelengths.len(), values.len(), "spectrum lengths");
        Self {
            wavelengths,
            values,
        }
    }
}

/// Otsu's threshold on a continuous-valued image using a 256-bin histogram.
/// Returns the lower histogram edge of the between-class-variance optimum.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    const BINS: usize = 256;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return min;
    }
    let width = (max - min) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let mut bin = ((v - min) / width) as usize;
        if bin >= BINS {
            bin = BINS - 1;
        }
        hist[bin] += 1;
    }
    let total = values.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum::<f64>()
        / total;
    let mut best_k = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for k in 0..BINS - 1 {
        w0 += hist[k] as f64 / total;
        sum0 += k as f64 * hist[k] as f64 / total;
        if w0 == 0.0 || w0 == 1.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / (1.0 - w0);
        let var = w0 * (1.0 - w0) * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    min + (best_k as f64 + 1.0) * width
}

/// Foreground mask from the difference of the bands nearest `wl_a` and
/// `wl_b`: a pixel is foreground iff `band_a - band_b > threshold`.
/// With `threshold = None` the cut is chosen by Otsu's method on the
/// difference image. An empty result is an error, not a silent mask.
pub fn band_difference_mask(
    cube: &Hypercube,
    wl_a: f64,
    wl_b: f64,
    threshold: Option<f64>,
) -> Result<(Mask, f64), SegmentError> {
    let a = band_index_nearest(cube, wl_a)?;
    let b = band_index_nearest(cube, wl_b)?;
    let n = cube.height() * cube.width();
    let mut diff = Vec::with_capacity(n);
    for px in 0..n {
        let base = px * cube.bands();
        diff.push(cube.data()[base + a] - cube.data()[base + b]);
    }
    let threshold = threshold.unwrap_or_else(|| otsu_threshold(&diff));
    let bits: Vec<bool> = diff.iter().map(|&d| d > threshold).collect();
    let mask = Mask::new(cube.height(), cube.width(), bits);
    if mask.count() == 0 {
        return Err(SegmentError::DegenerateMask { threshold });
    }
    Ok((mask, threshold))
}

/// Zero all background voxels; foreground spectra are untouched.
pub fn apply_mask(cube: &Hypercube, mask: &Mask) -> Result<Hypercube, SegmentError> {
    mask.check_cube(cube)?;
    let bands = cube.bands();
    let mut data = cube.data().to_vec();
    for (px, &keep) in mask.bits.iter().enumerate() {
        if !keep {
            for v in &mut data[px * bands..(px + 1) * bands] {
                *v = 0.0;
            }
        }
    }
    Ok(Hypercube::new(cube.height(), cube.width(), cube.wavelengths().to_vec(), data)?)
}

/// Per-band arithmetic mean over foreground pixels only.
pub fn mean_spectrum(cube: &Hypercube, mask: &Mask) -> Result<Spectrum, SegmentError> {
    mask.check_cube(cube)?;
    let count = mask.count();
    if count == 0 {
        return Err(SegmentError::DegenerateMask { threshold: f64::NAN });
    }
    let bands = cube.bands();
    let mut sums = vec![0.0f64; bands];
    for (px, &keep) in mask.bits.iter().enumerate() {
        if keep {
            let spec = &cube.data()[px * bands..(px + 1) * bands];
            for (s, v) in sums.iter_mut().zip(spec) {
                *s += v;
            }
        }
    }
    for s in &mut sums {
        *s /= count as f64;
    }
    Ok(Spectrum::new(cube.wavelengths().to_vec(), sums))
}

/// Elementwise mean of two spectra on the same axis (two imaging views
/// of one sample).
pub fn average_views(a: &Spectrum, b: &Spectrum) -> Result<Spectrum, SegmentError> {
    if a.wavelengths != b.wavelengths {
        return Err(SegmentError::AxisMismatch);
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    Ok(Spectrum::new(a.wavelengths.clone(), values))
}

/// Write a mask as a binary PBM (P4) bitmap; bit 1 = foreground.
pub fn write_pbm(mask: &Mask, path: &Path) -> Result<(), SegmentError> {
    let mut out = format!("P4\n{} {}\n", mask.width, mask.height).into_bytes();
    for y in 0..mask.height {
        let mut byte = 0u8;
        let mut nbits = 0;
        for x in 0..mask.width {
            byte = (byte << 1) | mask.get(y, x) as u8;
            nbits += 1;
            if nbits == 8 {
                out.push(byte);
                byte = 0;
                nbits = 0;
            }
        }
        if nbits > 0 {
            out.push(byte << (8 - nbits));
        }
    }
    fs::write(path, out).map_err(|source| SegmentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a binary PBM (P4) bitmap written by [`write_pbm`].
pub fn read_pbm(path: &Path) -> Result<Mask, SegmentError> {
    let bytes = fs::read(path).map_err(|source| SegmentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = || SegmentError::BadPbm {
        path: path.to_path_buf(),
    };
    // header: "P4" <ws> width <ws> height <single ws> payload
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Option<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos).as_deref() != Some("P4") {
        return Err(bad());
    }
    let width: usize = token(&mut pos).and_then(|t| t.parse().ok()).ok_or_else(bad)?;
    let height: usize = token(&mut pos).and_then(|t| t.parse().ok()).ok_or_else(bad)?;
    pos += 1; // single whitespace before payload
    let row_bytes = width.div_ceil(8);
    if bytes.len() < pos + row_bytes * height {
        return Err(bad());
    }
    let mut bits = Vec::with_capacity(width * height);
    for y in 0..height {
        let row = &bytes[pos + y * row_bytes..pos + (y + 1) * row_bytes];
        for x in 0..width {
            bits.push(row[x / 8] >> (7 - x % 8) & 1 == 1);
        }
    }
    Ok(Mask::new(height, width, bits))
}

/// Write spectra as CSV: header `id,<wl...>`, one row per sample.
pub fn write_spectra_csv(
    path: &Path,
    wavelengths: &[f64],
    rows: &[(String, Vec<f64>)],
) -> Result<(), SegmentError> {
    let mut text = String::from("id");
    for w in wavelengths {
        text.push(',');
        text.push_str(&format!("{w}"));
    }
    text.push('\n');
    for (id, values) in rows {
        text.push_str(id);
        for v in values {
            text.push(',');
            text.push_str(&format!("{v}"));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| SegmentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::Hypercube;

    /// 4x4 cube with two bands at 452/602 nm; `fg` marks bright pixels.
    fn two_band_cube(fg: &[(usize, usize)]) -> Hypercube {
        let mut data = vec![0.0; 4 * 4 * 2];
        for y in 0..4 {
            for x in 0..4 {
                let base = (y * 4 + x) * 2;
                if fg.contains(&(y, x)) {
                    data[base] = 0.1; // 452 nm
                    data[base + 1] = 0.5; // 602 nm
                } else {
                    data[base] = 0.05;
                    data[base + 1] = 0.05;
                }
            }
        }
        Hypercube::new(4, 4, vec![452.0, 602.0], data).unwrap()
    }

    #[test]
    fn band_difference_selects_exact_foreground() {
        let fg = [(0, 0), (1, 2), (3, 3)];
        let cube = two_band_cube(&fg);
        let (mask, _) = band_difference_mask(&cube, 602.0, 452.0, Some(0.1)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(mask.get(y, x), fg.contains(&(y, x)), "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn threshold_above_max_is_degenerate() {
        let cube = two_band_cube(&[(0, 0)]);
        assert!(matches!(
            band_difference_mask(&cube, 602.0, 452.0, Some(10.0)),
            Err(SegmentError::DegenerateMask { .. })
        ));
    }

    #[test]
    fn negative_threshold_on_uniform_cube_is_all_true() {
        let cube = Hypercube::constant(3, 3, vec![452.0, 602.0], 0.4).unwrap();
        let (mask, _) = band_difference_mask(&cube, 602.0, 452.0, Some(-1.0)).unwrap();
        assert_eq!(mask.count(), 9);
    }

    #[test]
    fn otsu_separates_bimodal_difference() {
        let fg = [(0, 0), (0, 1), (1, 0), (2, 2), (3, 1)];
        let cube = two_band_cube(&fg);
        let (mask, threshold) = band_difference_mask(&cube, 602.0, 452.0, None).unwrap();
        assert!(threshold > 0.0 && threshold < 0.4, "threshold {threshold}");
        assert_eq!(mask.count(), fg.len());
    }

    #[test]
    fn apply_mask_zeroes_background_only() {
        let cube = Hypercube::constant(2, 2, vec![452.0, 602.0], 0.4).unwrap();
        let all = Mask::filled(2, 2, true);
        assert_eq!(apply_mask(&cube, &all).unwrap(), cube);

        let mut bits = vec![false; 4];
        bits[2] = true;
        let one = Mask::new(2, 2, bits);
        let out = apply_mask(&cube, &one).unwrap();
        for px in 0..4 {
            for b in 0..2 {
                let expect = if px == 2 { 0.4 } else { 0.0 };
                assert_eq!(out.data()[px * 2 + b], expect);
            }
        }
    }

    #[test]
    fn checkerboard_mask_halves_mean() {
        let cube = Hypercube::constant(4, 4, vec![500.0], 0.4).unwrap();
        let bits: Vec<bool> = (0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect();
        let mask = Mask::new(4, 4, bits);
        let out = apply_mask(&cube, &mask).unwrap();
        let mean = out.data().iter().sum::<f64>() / out.data().len() as f64;
        assert!((mean - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mask_is_idempotent() {
        let cube = two_band_cube(&[(1, 1), (2, 2)]);
        let (mask, _) = band_difference_mask(&cube, 602.0, 452.0, Some(0.1)).unwrap();
        let once = apply_mask(&cube, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mean_spectrum_uniform_and_symmetric() {
        let cube = Hypercube::constant(3, 3, vec![500.0, 600.0], 0.7).unwrap();
        let mask = Mask::filled(3, 3, true);
        let spec = mean_spectrum(&cube, &mask).unwrap();
        for v in &spec.values {
            assert!((v - 0.7).abs() < 1e-12);
        }

        let mut cube2 = Hypercube::constant(1, 2, vec![500.0], 0.0).unwrap();
        cube2.data_mut()[0] = 0.2;
        cube2.data_mut()[1] = 0.4;
        let spec2 = mean_spectrum(&cube2, &Mask::filled(1, 2, true)).unwrap();
        assert!((spec2.values[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mean_spectrum_matches_brute_force() {
        // 3x3x2 cube with distinct values everywhere
        let data: Vec<f64> = (0..18).map(|i| (i * i % 13) as f64 / 13.0).collect();
        let cube = Hypercube::new(3, 3, vec![500.0, 600.0], data.clone()).unwrap();
        let bits: Vec<bool> = (0..9).map(|i| i % 2 == 0).collect();
        let mask = Mask::new(3, 3, bits.clone());
        let spec = mean_spectrum(&cube, &mask).unwrap();
        for b in 0..2 {
            let mut sum = 0.0;
            let mut n = 0;
            for px in 0..9 {
                if bits[px] {
                    sum += data[px * 2 + b];
                    n += 1;
                }
            }
            assert!((spec.values[b] - sum / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_spectrum_ignores_masked_background() {
        let cube = two_band_cube(&[(0, 1), (2, 3)]);
        let (mask, _) = band_difference_mask(&cube, 602.0, 452.0, Some(0.1)).unwrap();
        let masked = apply_mask(&cube, &mask).unwrap();
        assert_eq!(
            mean_spectrum(&cube, &mask).unwrap(),
            mean_spectrum(&masked, &mask).unwrap()
        );
    }

    #[test]
    fn mean_spectrum_bounded_by_foreground_extremes() {
        let data: Vec<f64> = (0..18).map(|i| (i * 7 % 11) as f64 / 11.0).collect();
        let cube = Hypercube::new(3, 3, vec![500.0, 600.0], data.clone()).unwrap();
        let bits: Vec<bool> = (0..9).map(|i| i % 3 != 1).collect();
        let mask = Mask::new(3, 3, bits.clone());
        let spec = mean_spectrum(&cube, &mask).unwrap();
        for b in 0..2 {
            let fg: Vec<f64> = (0..9).filter(|&px| bits[px]).map(|px| data[px * 2 + b]).collect();
            let lo = fg.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = fg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(spec.values[b] >= lo && spec.values[b] <= hi);
        }
    }

    #[test]
    fn average_views_cases() {
        let a = Spectrum::new(vec![500.0, 600.0], vec![0.2, 0.4]);
        let b = Spectrum::new(vec![500.0, 600.0], vec![0.4, 0.8]);
        assert_eq!(average_views(&a, &a).unwrap(), a);
        let zero = Spectrum::new(vec![500.0, 600.0], vec![0.0, 0.0]);
        let half = average_views(&zero, &b).unwrap();
        assert_eq!(half.values, vec![0.2, 0.4]);
        let avg = average_views(&a, &b).unwrap();
        assert_eq!(avg.values, vec![0.30000000000000004, 0.6000000000000001]);
        let c = Spectrum::new(vec![500.0, 601.0], vec![0.4, 0.8]);
        assert!(matches!(average_views(&a, &c), Err(SegmentError::AxisMismatch)));
    }

    #[test]
    fn pbm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        // 10 wide so rows need padding bits
        let bits: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let mask = Mask::new(3, 10, bits);
        let path = dir.path().join("m.pbm");
        write_pbm(&mask, &path).unwrap();
        assert_eq!(read_pbm(&path).unwrap(), mask);
    }

    #[test]
    fn largest_component_keeps_biggest_blob() {
        let mut bits = vec![false; 25];
        // 2x2 blob at top-left, single pixel at bottom-right
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (4, 4)] {
            bits[y * 5 + x] = true;
        }
        let mask = Mask::new(5, 5, bits);
        let lc = mask.largest_component();
        assert_eq!(lc.count(), 4);
        assert!(!lc.get(4, 4));
    }
}
