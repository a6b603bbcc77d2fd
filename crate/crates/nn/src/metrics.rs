//! Reconstruction quality metrics over channel-major `[B,H,W]` volumes.
//!
//! Every metric can be restricted to a foreground mask; masked-out voxels
//! never contribute, so background perturbations cannot move the score.

use crate::tensor::MRAE_EPS;
use hyperspec_core::segment::Mask;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction has {rc} values, target has {gt}")]
    ShapeMismatch { rc: usize, gt: usize },
    #[error("volume of {len} values does not tile {h}x{w} pixels")]
    BadGeometry { len: usize, h: usize, w: usize },
    #[error("mask is degenerate: no foreground pixels")]
    DegenerateMask,
    #[error("peak must be positive, got {0}")]
    BadPeak(f64),
}

fn masked_voxels<'a>(
    rc: &'a [f64],
    gt: &'a [f64],
    height: usize,
    width: usize,
    mask: Option<&'a Mask>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a, MetricError> {
    if rc.len() != gt.len() {
        return Err(MetricError::ShapeMismatch {
            rc: rc.len(),
            gt: gt.len(),
        });
    }
    let px = height * width;
    if px == 0 || rc.len() % px != 0 {
        return Err(MetricError::BadGeometry {
            len: rc.len(),
            h: height,
            w: width,
        });
    }
    if let Some(m) = mask {
        if m.height != height || m.width != width {
            return Err(MetricError::BadGeometry {
                len: m.bits().len(),
                h: height,
                w: width,
            });
        }
        if m.count() == 0 {
            return Err(MetricError::DegenerateMask);
        }
    }
    Ok(rc
        .iter()
        .zip(gt)
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m.bits()[i % px]))
        .map(|(_, (&r, &g))| (r, g)))
}

/// Mean relative absolute error: `|rc - gt| / max(gt, eps)` averaged over
/// (masked) voxels.
pub fn mrae(
    rc: &[f64],
    gt: &[f64],
    height: usize,
    width: usize,
    mask: Option<&Mask>,
) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, g) in masked_voxels(rc, gt, height, width, mask)? {
        total += (r - g).abs() / g.max(MRAE_EPS);
        count += 1;
    }
    Ok(total / count as f64)
}

/// Root of the (masked) mean squared error.
pub fn rmse_image(
    rc: &[f64],
    gt: &[f64],
    height: usize,
    width: usize,
    mask: Option<&Mask>,
) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, g) in masked_voxels(rc, gt, height, width, mask)? {
        total += (r - g) * (r - g);
        count += 1;
    }
    Ok((total / count as f64).sqrt())
}

/// Peak signal-to-noise ratio in decibels over (masked) voxels. A zero
/// error yields the `f64::INFINITY` sentinel, never a crash.
pub fn psnr(
    rc: &[f64],
    gt: &[f64],
    height: usize,
    width: usize,
    mask: Option<&Mask>,
    peak: f64,
) -> Result<f64, MetricError> {
    if !(peak > 0.0) {
        return Err(MetricError::BadPeak(peak));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for (r, g) in masked_voxels(rc, gt, height, width, mask)? {
        sq += (r - g) * (r - g);
        count += 1;
    }
    if sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak * count as f64 / sq).log10())
}

/// Mean absolute error over (masked) voxels.
pub fn l1_loss(
    rc: &[f64],
    gt: &[f64],
    height: usize,
    width: usize,
    mask: Option<&Mask>,
) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, g) in masked_voxels(rc, gt, height, width, mask)? {
        total += (r - g).abs();
        count += 1;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(bits: &[bool], h: usize, w: usize) -> Mask {
        Mask::new(h, w, bits.to_vec())
    }

    #[test]
    fn identical_volumes_score_perfectly() {
        let x = vec![0.3, 0.5, 0.7, 0.2];
        assert_eq!(mrae(&x, &x, 2, 2, None).unwrap(), 0.0);
        assert_eq!(rmse_image(&x, &x, 2, 2, None).unwrap(), 0.0);
        assert_eq!(l1_loss(&x, &x, 2, 2, None).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x, 2, 2, None, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn mrae_hand_value() {
        let gt = vec![1.0; 8];
        let rc = vec![1.1; 8];
        let got = mrae(&rc, &gt, 2, 2, None).unwrap();
        assert!((got - 0.1).abs() < 1e-12, "{got}");
    }

    #[test]
    fn constant_offset_values() {
        let gt = vec![0.5; 12];
        let rc = vec![0.5 + 0.2; 12];
        assert!((rmse_image(&rc, &gt, 2, 2, None).unwrap() - 0.2).abs() < 1e-12);
        assert!((l1_loss(&rc, &gt, 2, 2, None).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rmse_matches_brute_force_sum() {
        let gt = [0.1, 0.4, 0.9, 0.2, 0.6, 0.3, 0.8, 0.5];
        let rc = [0.2, 0.3, 0.85, 0.4, 0.55, 0.35, 0.7, 0.45];
        let mut acc = 0.0;
        for i in 0..8 {
            acc += (rc[i] - gt[i]) * (rc[i] - gt[i]);
        }
        let expect = (acc / 8.0).sqrt();
        assert!((rmse_image(&rc, &gt, 2, 2, None).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn psnr_closed_forms() {
        let gt = vec![0.5; 9];
        let rc: Vec<f64> = gt.iter().map(|v| v + 0.03).collect();
        let got = psnr(&rc, &gt, 3, 3, None, 1.0).unwrap();
        let expect = 20.0 * (1.0f64 / 0.03).log10();
        assert!((got - expect).abs() < 1e-9);
        assert!((got - 30.457574905606752).abs() < 1e-9);

        // PSNR = 20 log10(peak) - 20 log10(RMSE) for uniform error
        let rmse = rmse_image(&rc, &gt, 3, 3, None).unwrap();
        let identity = 20.0 * 1.0f64.log10() - 20.0 * rmse.log10();
        assert!((got - identity).abs() < 1e-9);

        assert!(matches!(
            psnr(&rc, &gt, 3, 3, None, 0.0),
            Err(MetricError::BadPeak(_))
        ));
    }

    #[test]
    fn masked_metrics_ignore_background_entirely() {
        let h = 2;
        let w = 3;
        let bands = 2;
        let bits = [true, false, true, false, true, false];
        let mask = mask_from(&bits, h, w);
        let gt: Vec<f64> = (0..h * w * bands).map(|i| 0.2 + 0.05 * i as f64).collect();
        let rc: Vec<f64> = gt.iter().map(|v| v * 1.1).collect();

        let m0 = mrae(&rc, &gt, h, w, Some(&mask)).unwrap();
        let r0 = rmse_image(&rc, &gt, h, w, Some(&mask)).unwrap();
        let p0 = psnr(&rc, &gt, h, w, Some(&mask), 1.0).unwrap();
        let l0 = l1_loss(&rc, &gt, h, w, Some(&mask)).unwrap();

        // scramble every background voxel in both volumes
        let mut rc2 = rc.clone();
        let mut gt2 = gt.clone();
        for band in 0..bands {
            for px in 0..h * w {
                if !bits[px] {
                    rc2[band * h * w + px] = 99.0;
                    gt2[band * h * w + px] = -5.0;
                }
            }
        }
        assert_eq!(mrae(&rc2, &gt2, h, w, Some(&mask)).unwrap(), m0);
        assert_eq!(rmse_image(&rc2, &gt2, h, w, Some(&mask)).unwrap(), r0);
        assert_eq!(psnr(&rc2, &gt2, h, w, Some(&mask), 1.0).unwrap(), p0);
        assert_eq!(l1_loss(&rc2, &gt2, h, w, Some(&mask)).unwrap(), l0);
    }

    #[test]
    fn degenerate_mask_and_shape_errors() {
        let x = vec![0.0; 4];
        let empty = mask_from(&[false; 4], 2, 2);
        assert!(matches!(
            mrae(&x, &x, 2, 2, Some(&empty)),
            Err(MetricError::DegenerateMask)
        ));
        assert!(matches!(
            mrae(&x, &x[..3], 2, 2, None),
            Err(MetricError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            mrae(&x[..3], &x[..3], 2, 2, None),
            Err(MetricError::BadGeometry { .. })
        ));
    }
}
