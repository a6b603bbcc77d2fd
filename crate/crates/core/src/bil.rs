//! ENVI-style band-interleaved-by-line persistence.
//!
//! A cube is stored as two files: a plain-text `.hdr` with `key = value`
//! lines and a raw `.bil` with little-endian 32-bit floats in
//! (line, band, sample) order. Unknown header keys are ignored.

use crate::cube::Hypercube;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BilError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: missing header field `{field}`", path.display())]
    MissingField { path: PathBuf, field: &'static str },
    #[error("{}: cannot parse `{field}` value `{value}`", path.display())]
    BadField {
        path: PathBuf,
        field: &'static str,
        value: String,
    },
    #[error("{}: unsupported interleave `{interleave}` (only bil)", path.display())]
    UnsupportedInterleave { path: PathBuf, interleave: String },
    #[error("{}: unsupported data type {data_type} (only 4 = float32)", path.display())]
    UnsupportedDataType { path: PathBuf, data_type: String },
    #[error("{}: header declares {bands} bands but lists {got} wavelengths", path.display())]
    WavelengthMismatch {
        path: PathBuf,
        bands: usize,
        got: usize,
    },
    #[error("{}: payload holds {got} bytes, expected {expected}", path.display())]
    Truncated {
        path: PathBuf,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Cube(#[from] crate::cube::CubeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BilError + '_ {
    move |source| BilError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `scene.hdr` <-> `scene.bil` for either argument order.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Write `cube` as `<path>.bil` payload plus `<path>.hdr` header. The
/// given path's extension is replaced, so both `scene.bil` and
/// `scene.hdr` address the same pair.
pub fn write_bil(cube: &Hypercube, path: &Path) -> Result<(), BilError> {
    let hdr_path = sibling(path, "hdr");
    let bil_path = sibling(path, "bil");

    let mut header = String::new();
    header.push_str(&format!("samples = {}\n", cube.width()));
    header.push_str(&format!("lines = {}\n", cube.height()));
    header.push_str(&format!("bands = {}\n", cube.bands()));
    header.push_str("interleave = bil\n");
    header.push_str("data type = 4\n");
    header.push_str("byte order = 0\n");
    let wl: Vec<String> = cube.wavelengths().iter().map(|w| format!("{w}")).collect();
    header.push_str(&format!("wavelength = {{ {} }}\n", wl.join(", ")));
    fs::write(&hdr_path, header).map_err(io_err(&hdr_path))?;

    let mut payload = Vec::with_capacity(cube.data().len() * 4);
    for line in 0..cube.height() {
        for band in 0..cube.bands() {
            for sample in 0..cube.width() {
                let v = cube.value(line, sample, band) as f32;
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(&bil_path).map_err(io_err(&bil_path))?;
    f.write_all(&payload).map_err(io_err(&bil_path))?;
    Ok(())
}

/// Parse `key = value` header lines; a `{ ... }` value may span lines.
fn parse_header(text: &str) -> Vec<(String, String)> {
    let mut fields = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let Some(eq) = line.find('=') else { continue };
        let key = line[..eq].trim().to_ascii_lowercase();
        let mut value = line[eq + 1..].trim().to_string();
        if value.starts_with('{') && !value.contains('}') {
            for cont in lines.by_ref() {
                value.push(' ');
                value.push_str(cont.trim());
                if cont.contains('}') {
                    break;
                }
            }
        }
        fields.push((key, value));
    }
    fields
}

fn field<'a>(
    fields: &'a [(String, String)],
    name: &'static str,
    path: &Path,
) -> Result<&'a str, BilError> {
    fields
        .iter()
        .find(|(k, _)| k == name)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| BilError::MissingField {
            path: path.to_path_buf(),
            field: name,
        })
}

fn parse_usize(value: &str, name: &'static str, path: &Path) -> Result<usize, BilError> {
    value.parse().map_err(|_| BilError::BadField {
        path: path.to_path_buf(),
        field: name,
        value: value.to_string(),
    })
}

/// Read the `.hdr`/`.bil` pair addressed by `header_path`.
pub fn read_bil(header_path: &Path) -> Result<Hypercube, BilError> {
    let hdr_path = sibling(header_path, "hdr");
    let text = fs::read_to_string(&hdr_path).map_err(io_err(&hdr_path))?;
    let fields = parse_header(&text);

    let samples = parse_usize(field(&fields, "samples", &hdr_path)?, "samples", &hdr_path)?;
    let lines = parse_usize(field(&fields, "lines", &hdr_path)?, "lines", &hdr_path)?;
    let bands = parse_usize(field(&fields, "bands", &hdr_path)?, "bands", &hdr_path)?;
    let interleave = field(&fields, "interleave", &hdr_path)?;
    if !interleave.eq_ignore_ascii_case("bil") {
        return Err(BilError::UnsupportedInterleave {
            path: hdr_path,
            interleave: interleave.to_string(),
        });
    }
    if let Ok(dt) = field(&fields, "data type", &hdr_path) {
        if dt.trim() != "4" {
            return Err(BilError::UnsupportedDataType {
                path: hdr_path,
                data_type: dt.to_string(),
            });
        }
    }
    let wl_raw = field(&fields, "wavelength", &hdr_path)?;
    let wl_list = wl_raw.trim().trim_start_matches('{').trim_end_matches('}');
    let mut wavelengths = Vec::new();
    for part in wl_list.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        wavelengths.push(part.parse::<f64>().map_err(|_| BilError::BadField {
            path: hdr_path.clone(),
            field: "wavelength",
            value: part.to_string(),
        })?);
    }
    if wavelengths.len() != bands {
        return Err(BilError::WavelengthMismatch {
            path: hdr_path,
            bands,
            got: wavelengths.len(),
        });
    }

    let bil_path = sibling(header_path, "bil");
    let payload = fs::read(&bil_path).map_err(io_err(&bil_path))?;
    let expected = lines * samples * bands * 4;
    if payload.len() != expected {
        return Err(BilError::Truncated {
            path: bil_path,
            got: payload.len(),
            expected,
        });
    }

    let mut data = vec![0.0f64; lines * samples * bands];
    let mut off = 0;
    for line in 0..lines {
        for band in 0..bands {
            for sample in 0..samples {
                let bytes = [
                    payload[off],
                    payload[off + 1],
                    payload[off + 2],
                    payload[off + 3],
                ];
                let v = f32::from_le_bytes(bytes) as f64;
                data[(line * samples + sample) * bands + band] = v;
                off += 4;
            }
        }
    }
    Ok(Hypercube::new(lines, samples, wavelengths, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn f32_cube(h: usize, w: usize, wl: Vec<f64>, seed: u32) -> Hypercube {
        // values pre-quantized to f32 so a disk round trip is lossless
        let n = h * w * wl.len();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let q = (i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000;
                (q as f32 / 1000.0f32) as f64
            })
            .collect();
        Hypercube::new(h, w, wl, data).unwrap()
    }

    #[test]
    fn round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let cube = f32_cube(2, 2, vec![400.0, 500.0, 600.0], 7);
        let path = dir.path().join("tiny.bil");
        write_bil(&cube, &path).unwrap();
        let back = read_bil(&dir.path().join("tiny.hdr")).unwrap();
        assert_eq!(cube, back);
    }

    #[test]
    fn payload_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let one = Hypercube::constant(1, 1, vec![500.0], 0.25).unwrap();
        write_bil(&one, &dir.path().join("one.bil")).unwrap();
        assert_eq!(fs::metadata(dir.path().join("one.bil")).unwrap().len(), 4);

        let wl: Vec<f64> = (0..7).map(|i| 400.0 + 50.0 * i as f64).collect();
        let big = Hypercube::constant(64, 64, wl, 0.5).unwrap();
        write_bil(&big, &dir.path().join("big.bil")).unwrap();
        assert_eq!(
            fs::metadata(dir.path().join("big.bil")).unwrap().len(),
            114688
        );
    }

    #[test]
    fn wavelength_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("bad.hdr");
        fs::write(
            &hdr,
            "samples = 1\nlines = 1\nbands = 3\ninterleave = bil\ndata type = 4\nwavelength = { 400, 500 }\n",
        )
        .unwrap();
        fs::write(dir.path().join("bad.bil"), vec![0u8; 12]).unwrap();
        assert!(matches!(
            read_bil(&hdr),
            Err(BilError::WavelengthMismatch { bands: 3, got: 2, .. })
        ));
    }

    #[test]
    fn unsupported_interleave_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("bsq.hdr");
        fs::write(
            &hdr,
            "samples = 1\nlines = 1\nbands = 1\ninterleave = bsq\ndata type = 4\nwavelength = { 400 }\n",
        )
        .unwrap();
        fs::write(dir.path().join("bsq.bil"), vec![0u8; 4]).unwrap();
        assert!(matches!(
            read_bil(&hdr),
            Err(BilError::UnsupportedInterleave { .. })
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cube = f32_cube(2, 3, vec![400.0, 500.0], 1);
        let path = dir.path().join("cut.bil");
        write_bil(&cube, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_bil(&dir.path().join("cut.hdr")),
            Err(BilError::Truncated { .. })
        ));
    }

    #[test]
    fn unknown_keys_ignored_and_multiline_wavelength() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("odd.hdr");
        fs::write(
            &hdr,
            "description = something\nsamples = 2\nlines = 1\nbands = 2\ninterleave = BIL\ndata type = 4\nsensor type = unknown\nwavelength = { 400,\n 500 }\n",
        )
        .unwrap();
        let payload: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(dir.path().join("odd.bil"), payload).unwrap();
        let cube = read_bil(&hdr).unwrap();
        assert_eq!(cube.wavelengths(), &[400.0, 500.0]);
        // BIL stores band-major per line: samples (1,2) band 0, (3,4) band 1
        assert_eq!(cube.value(0, 0, 0), 1.0);
        assert_eq!(cube.value(0, 1, 0), 2.0);
        assert_eq!(cube.value(0, 0, 1), 3.0);
        assert_eq!(cube.value(0, 1, 1), 4.0);
    }
}
