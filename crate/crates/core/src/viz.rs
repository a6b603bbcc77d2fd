//! Per-pixel prediction maps, colorization and chart emission.

use crate::chemometrics::{ChemError, PlsrModel};
use crate::cube::{Hypercube, RgbImage};
use crate::segment::Mask;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("color range lo {lo} must be below hi {hi}")]
    BadRange { lo: f64, hi: f64 },
    #[error("chart needs at least one bar")]
    EmptyChart,
    #[error("chart has {labels} labels but {values} values")]
    ChartLengths { labels: usize, values: usize },
    #[error("mask has no foreground pixels")]
    DegenerateMask,
    #[error("mask {mask_h}x{mask_w} does not match cube {cube_h}x{cube_w}")]
    DimensionMismatch {
        mask_h: usize,
        mask_w: usize,
        cube_h: usize,
        cube_w: usize,
    },
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Per-pixel attribute predictions; only foreground pixels carry values.
#[derive(Debug, Clone)]
pub struct AttributeMap {
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl AttributeMap {
    #[inline]
    pub fn get(&self, line: usize, sample: usize) -> Option<f64> {
        let i = line * self.width + sample;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.valid
            .iter()
            .zip(&self.values)
            .filter_map(|(&ok, &v)| ok.then_some(v))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Percentile range over valid values (fractions in [0,1]), the
    /// default colorization range.
    pub fn percentile_range(&self, lo_frac: f64, hi_frac: f64) -> (f64, f64) {
        let mut vals: Vec<f64> = self.valid_values().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |f: f64| {
            let idx = ((vals.len() - 1) as f64 * f).round() as usize;
            vals[idx]
        };
        (pick(lo_frac), pick(hi_frac))
    }
}

/// Push every foreground pixel spectrum through the regression model.
pub fn prediction_map(
    cube: &Hypercube,
    model: &PlsrModel,
    mask: &Mask,
) -> Result<AttributeMap, VizError> {
    if mask.height != cube.height() || mask.width != cube.width() {
        return Err(VizError::DimensionMismatch {
            mask_h: mask.height,
            mask_w: mask.width,
            cube_h: cube.height(),
            cube_w: cube.width(),
        });
    }
    if mask.count() == 0 {
        return Err(VizError::DegenerateMask);
    }
    let mut values = vec![0.0f64; mask.height * mask.width];
    let mut valid = vec![false; mask.height * mask.width];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                let i = y * mask.width + x;
                values[i] = model.predict_one(cube.spectrum_at(y, x))?;
                valid[i] = true;
            }
        }
    }
    Ok(AttributeMap {
        height: mask.height,
        width: mask.width,
        values,
        valid,
    })
}

/// Five-anchor linear ramp: blue, cyan, green, yellow, red.
pub const RAMP_ANCHORS: [(u8, u8, u8); 5] = [
    (0, 0, 255),
    (0, 255, 255),
    (0, 255, 0),
    (255, 255, 0),
    (255, 0, 0),
];

/// Ramp color for a parameter `t` in [0,1].
pub fn ramp_color(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let scaled = t * (RAMP_ANCHORS.len() - 1) as f64;
    let seg = (scaled.floor() as usize).min(RAMP_ANCHORS.len() - 2);
    let frac = scaled - seg as f64;
    let (r0, g0, b0) = RAMP_ANCHORS[seg];
    let (r1, g1, b1) = RAMP_ANCHORS[seg + 1];
    let lerp = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * frac).round() as u8;
    (lerp(r0, r1), lerp(g0, g1), lerp(b0, b1))
}

/// Render a map through the ramp; values clamp to `[lo, hi]` and invalid
/// pixels come out black.
pub fn colorize(map: &AttributeMap, range: (f64, f64)) -> Result<RgbImage, VizError> {
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(VizError::BadRange { lo, hi });
    }
    let mut pixels = Vec::with_capacity(map.height * map.width * 3);
    for y in 0..map.height {
        for x in 0..map.width {
            match map.get(y, x) {
                Some(v) => {
                    let (r, g, b) = ramp_color((v - lo) / (hi - lo));
                    pixels.extend_from_slice(&[r, g, b]);
                }
                None => pixels.extend_from_slice(&[0, 0, 0]),
            }
        }
    }
    Ok(RgbImage::new(map.height, map.width, pixels))
}

/// Binary P6 image, maxval 255.
pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<(), VizError> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    fs::write(path, out).map_err(|source| VizError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a P6 image written by [`write_ppm`].
pub fn read_ppm(path: &Path) -> Result<RgbImage, VizError> {
    let bytes = fs::read(path).map_err(|source| VizError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = || VizError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, "not a P6 file"),
    };
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
    if token(&mut pos).as_deref() != Some("P6") {
        return Err(bad());
    }
    let width: usize = token(&mut pos).and_then(|t| t.parse().ok()).ok_or_else(bad)?;
    let height: usize = token(&mut pos).and_then(|t| t.parse().ok()).ok_or_else(bad)?;
    let maxval: usize = token(&mut pos).and_then(|t| t.parse().ok()).ok_or_else(bad)?;
    if maxval != 255 {
        return Err(bad());
    }
    pos += 1;
    if bytes.len() < pos + width * height * 3 {
        return Err(bad());
    }
    Ok(RgbImage::new(
        height,
        width,
        bytes[pos..pos + width * height * 3].to_vec(),
    ))
}

/// Dump valid map pixels as `row,col,value` CSV.
pub fn write_map_csv(map: &AttributeMap, path: &Path) -> Result<(), VizError> {
    let mut text = String::from("row,col,value\n");
    for y in 0..map.height {
        for x in 0..map.width {
            if let Some(v) = map.get(y, x) {
                text.push_str(&format!("{y},{x},{v}\n"));
            }
        }
    }
    fs::write(path, text).map_err(|source| VizError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const BAR_MAX_LEN: f64 = 480.0;
const BAR_HEIGHT: f64 = 24.0;
const BAR_GAP: f64 = 8.0;
const LABEL_COL: f64 = 150.0;
const MARGIN: f64 = 10.0;

/// Horizontal bar chart as standalone SVG text, bars in the given order.
/// Bar lengths are linear in value with a zero baseline.
pub fn bar_chart_svg(labels: &[String], values: &[f64], path: &Path) -> Result<(), VizError> {
    if labels.is_empty() {
        return Err(VizError::EmptyChart);
    }
    if labels.len() != values.len() {
        return Err(VizError::ChartLengths {
            labels: labels.len(),
            values: values.len(),
        });
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > 0.0 { BAR_MAX_LEN / max } else { 0.0 };
    let n = labels.len() as f64;
    let width = LABEL_COL + BAR_MAX_LEN + 2.0 * MARGIN + 60.0;
    let height = 2.0 * MARGIN + n * BAR_HEIGHT + (n - 1.0) * BAR_GAP;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    );
    for (i, (label, &value)) in labels.iter().zip(values).enumerate() {
        let y = MARGIN + i as f64 * (BAR_HEIGHT + BAR_GAP);
        let len = (value.max(0.0) * scale * 100.0).round() / 100.0;
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"end\" dominant-baseline=\"middle\">{}</text>\n",
            LABEL_COL - 6.0,
            y + BAR_HEIGHT / 2.0,
            label
        ));
        svg.push_str(&format!(
            "  <rect x=\"{LABEL_COL:.2}\" y=\"{y:.2}\" width=\"{len:.2}\" height=\"{BAR_HEIGHT:.2}\" fill=\"#4878a8\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" dominant-baseline=\"middle\">{:.4}</text>\n",
            LABEL_COL + len + 6.0,
            y + BAR_HEIGHT / 2.0,
            value
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|source| VizError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::mean_spectrum;

    fn toy_model(bands: usize) -> PlsrModel {
        PlsrModel {
            wavelengths: (0..bands).map(|i| 400.0 + 20.0 * i as f64).collect(),
            x_mean: vec![0.5; bands],
            y_mean: 25.0,
            coefficients: (0..bands).map(|i| (i as f64 + 1.0) * 0.3).collect(),
            n_lv: 2,
        }
    }

    fn toy_cube() -> Hypercube {
        let wl = vec![400.0, 420.0, 440.0];
        let data: Vec<f64> = (0..4 * 4 * 3).map(|i| (i % 9) as f64 / 10.0).collect();
        Hypercube::new(4, 4, wl, data).unwrap()
    }

    #[test]
    fn uniform_cube_maps_to_y_mean() {
        let model = toy_model(3);
        let cube = Hypercube::constant(3, 3, vec![400.0, 420.0, 440.0], 0.5).unwrap();
        let mask = Mask::filled(3, 3, true);
        let map = prediction_map(&cube, &model, &mask).unwrap();
        for v in map.valid_values() {
            assert!((v - 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_mask_maps_one_pixel() {
        let model = toy_model(3);
        let cube = toy_cube();
        let mut bits = vec![false; 16];
        bits[5] = true;
        let mask = Mask::new(4, 4, bits);
        let map = prediction_map(&cube, &model, &mask).unwrap();
        assert_eq!(map.valid_count(), 1);
        let expect = model.predict_one(cube.spectrum_at(1, 1)).unwrap();
        assert_eq!(map.get(1, 1), Some(expect));
        assert_eq!(map.get(0, 0), None);
    }

    #[test]
    fn map_mean_equals_prediction_of_mean_spectrum() {
        let model = toy_model(3);
        let cube = toy_cube();
        let bits: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        let mask = Mask::new(4, 4, bits);
        let map = prediction_map(&cube, &model, &mask).unwrap();
        let map_mean: f64 =
            map.valid_values().sum::<f64>() / map.valid_count() as f64;
        let spec = mean_spectrum(&cube, &mask).unwrap();
        let expect = model.predict_one(&spec.values).unwrap();
        assert!((map_mean - expect).abs() < 1e-9, "{map_mean} vs {expect}");
    }

    #[test]
    fn map_never_reads_background() {
        let model = toy_model(3);
        let cube = toy_cube();
        let bits: Vec<bool> = (0..16).map(|i| i % 2 == 0).collect();
        let mask = Mask::new(4, 4, bits.clone());
        let map1 = prediction_map(&cube, &model, &mask).unwrap();
        let mut altered = cube.clone();
        for px in 0..16 {
            if !bits[px] {
                for b in 0..3 {
                    altered.data_mut()[px * 3 + b] = 99.0;
                }
            }
        }
        let map2 = prediction_map(&altered, &model, &mask).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(map1.get(y, x), map2.get(y, x));
            }
        }
    }

    #[test]
    fn ramp_anchor_values() {
        assert_eq!(ramp_color(0.0), (0, 0, 255));
        assert_eq!(ramp_color(0.25), (0, 255, 255));
        assert_eq!(ramp_color(0.5), (0, 255, 0));
        assert_eq!(ramp_color(0.75), (255, 255, 0));
        assert_eq!(ramp_color(1.0), (255, 0, 0));
        // clamped outside [0,1]
        assert_eq!(ramp_color(-3.0), (0, 0, 255));
        assert_eq!(ramp_color(7.0), (255, 0, 0));
        // interpolation inside a segment
        assert_eq!(ramp_color(0.125), (0, 128, 255));
    }

    #[test]
    fn ramp_is_monotone_in_parameter() {
        // the ramp walks blue -> red; the red channel never decreases and
        // the blue channel never increases
        let mut prev = ramp_color(0.0);
        for i in 1..=200 {
            let c = ramp_color(i as f64 / 200.0);
            assert!(c.0 >= prev.0, "red decreased at {i}");
            assert!(c.2 <= prev.2, "blue increased at {i}");
            prev = c;
        }
    }

    #[test]
    fn colorize_midpoint_and_clamp() {
        let map = AttributeMap {
            height: 1,
            width: 3,
            values: vec![25.0, 5.0, 400.0],
            valid: vec![true, true, false],
        };
        let img = colorize(&map, (10.0, 40.0)).unwrap();
        assert_eq!(img.pixel(0, 0), (0, 255, 0)); // t = 0.5 -> middle anchor
        assert_eq!(img.pixel(0, 1), (0, 0, 255)); // clamped to lo
        assert_eq!(img.pixel(0, 2), (0, 0, 0)); // invalid -> black
        assert!(matches!(
            colorize(&map, (10.0, 10.0)),
            Err(VizError::BadRange { .. })
        ));
    }

    #[test]
    fn ppm_exact_bytes_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(1, 1, vec![255, 0, 0]);
        let path = dir.path().join("red.ppm");
        write_ppm(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\x00\x00");
        assert_eq!(read_ppm(&path).unwrap(), img);

        let img2 = RgbImage::new(2, 3, (0u8..18).collect());
        let path2 = dir.path().join("six.ppm");
        write_ppm(&img2, &path2).unwrap();
        let back = read_ppm(&path2).unwrap();
        assert_eq!(back.height, 2);
        assert_eq!(back.width, 3);
        assert_eq!(back, img2);
    }

    #[test]
    fn map_csv_lists_valid_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let map = AttributeMap {
            height: 2,
            width: 2,
            values: vec![1.5, 0.0, 0.0, 2.5],
            valid: vec![true, false, false, true],
        };
        let path = dir.path().join("map.csv");
        write_map_csv(&map, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "row,col,value\n0,0,1.5\n1,1,2.5\n");
    }

    #[test]
    fn bar_chart_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.svg");
        bar_chart_svg(&["a".into()], &[3.0], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("<rect").count(), 1);

        let path2 = dir.path().join("two.svg");
        bar_chart_svg(&["a".into(), "b".into()], &[1.0, 2.0], &path2).unwrap();
        let text2 = fs::read_to_string(&path2).unwrap();
        assert!(text2.contains("width=\"240.00\""));
        assert!(text2.contains("width=\"480.00\""));

        let path3 = dir.path().join("eq.svg");
        bar_chart_svg(&["a".into(), "b".into()], &[5.0, 5.0], &path3).unwrap();
        let text3 = fs::read_to_string(&path3).unwrap();
        assert_eq!(text3.matches("width=\"480.00\"").count(), 2);

        assert!(matches!(
            bar_chart_svg(&[], &[], &dir.path().join("no.svg")),
            Err(VizError::EmptyChart)
        ));
    }

    #[test]
    fn chart_and_images_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        let labels = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        let values = [0.4, 1.1, 0.9];
        bar_chart_svg(&labels, &values, &p1).unwrap();
        bar_chart_svg(&labels, &values, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}
