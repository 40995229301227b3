//! Resampling and intensity normalization.
//!
//! MR volumes are z-scored. CT volumes are clipped to the 0.5/99.5
//! percentiles of their foreground intensities and then standardized with
//! the foreground mean and standard deviation (computed after clipping).
//! Percentiles use linear interpolation between order statistics.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Geometry, LabelVolume, Shape3, Volume, VolumePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Interpolation {
    #[default]
    Linear,
    Bspline3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    pub mr_interpolation: Interpolation,
    pub ct_clip_percentiles: (f64, f64),
    /// Absolute CT foreground threshold; when unset, voxels above the
    /// `foreground_percentile`-th percentile of the volume are foreground.
    pub foreground_threshold: Option<f64>,
    pub foreground_percentile: f64,
    /// Use the pair's label mask (non-background voxels) as CT foreground when present.
    pub foreground_from_labels: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: [0.6; 3],
            mr_interpolation: Interpolation::Linear,
            ct_clip_percentiles: (0.5, 99.5),
            foreground_threshold: None,
            foreground_percentile: 10.0,
            foreground_from_labels: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ct_clip_percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::InvalidConfig(format!(
                "clip percentiles must satisfy 0 <= low < high <= 100, got ({lo}, {hi})"
            )));
        }
        if self
            .target_spacing
            .iter()
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::InvalidConfig(format!(
                "target spacing must be > 0, got {:?}",
                self.target_spacing
            )));
        }
        if !(0.0..=100.0).contains(&self.foreground_percentile) {
            return Err(Error::InvalidConfig(
                "foreground_percentile must lie in [0, 100]".into(),
            ));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of ascending `sorted`.
pub fn percentile(sorted: &[f32], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    let a = sorted[lo] as f64;
    let b = sorted[hi] as f64;
    a + (b - a) * frac
}

fn resampled_shape(shape: Shape3, spacing: [f64; 3], target: [f64; 3]) -> Result<Shape3> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        if !(target[a].is_finite() && target[a] > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "target spacing must be > 0, got {target:?}"
            )));
        }
        let extent = shape[a] as f64 * spacing[a] / target[a];
        out[a] = libm::ceil(extent - 1e-9) as usize;
    }
    if out.contains(&0) {
        return Err(Error::DegenerateOutput);
    }
    Ok(out)
}

/// Continuous source index for output index `i` (grids share their origin).
#[inline]
fn source_coord(i: usize, spacing: f64, target: f64) -> f64 {
    i as f64 * target / spacing
}

fn linear_weights(c: f64, n: usize) -> (usize, usize, f64) {
    let c = c.clamp(0.0, (n - 1) as f64);
    let i0 = libm::floor(c) as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

fn trilinear(data: &[f64], shape: Shape3, c: [f64; 3]) -> f64 {
    let [_, h, w] = shape;
    let (z0, z1, fz) = linear_weights(c[0], shape[0]);
    let (y0, y1, fy) = linear_weights(c[1], shape[1]);
    let (x0, x1, fx) = linear_weights(c[2], shape[2]);
    let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x];
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
    lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz)
}

/// In-place cubic B-spline prefilter of one line (mirror boundaries).
fn bspline_prefilter_line(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let pole = libm::sqrt(3.0) - 2.0;
    let gain = (1.0 - pole) * (1.0 - 1.0 / pole);
    for v in c.iter_mut() {
        *v *= gain;
    }
    // causal initialisation with mirror boundaries
    let horizon = 30;
    let sum = if n > horizon {
        let mut zn = pole;
        let mut sum = c[0];
        for v in c.iter().take(horizon).skip(1) {
            sum += zn * v;
            zn *= pole;
        }
        sum
    } else {
        let mut zn = pole;
        let iz = 1.0 / pole;
        let mut z2n = libm::pow(pole, (n - 1) as f64);
        let mut sum = c[0] + z2n * c[n - 1];
        z2n *= z2n * iz;
        for v in c.iter().take(n - 1).skip(1) {
            sum += (zn + z2n) * v;
            zn *= pole;
            z2n *= iz;
        }
        sum / (1.0 - zn * zn)
    };
    c[0] = sum;
    for k in 1..n {
        c[k] += pole * c[k - 1];
    }
    c[n - 1] = (pole / (pole * pole - 1.0)) * (pole * c[n - 2] + c[n - 1]);
    for k in (0..n - 1).rev() {
        c[k] = pole * (c[k + 1] - c[k]);
    }
}

fn bspline_coefficients(data: &[f64], shape: Shape3) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut c = data.to_vec();
    let mut line = Vec::new();
    for axis in [2usize, 1, 0] {
        let (len, stride) = match axis {
            2 => (w, 1),
            1 => (h, w),
            _ => (d, h * w),
        };
        for z in 0..if axis == 0 { 1 } else { d } {
            for y in 0..if axis == 1 { 1 } else { h } {
                for x in 0..if axis == 2 { 1 } else { w } {
                    let base = (z * h + y) * w + x;
                    line.clear();
                    line.extend((0..len).map(|i| c[base + i * stride]));
                    bspline_prefilter_line(&mut line);
                    for (i, v) in line.iter().enumerate() {
                        c[base + i * stride] = *v;
                    }
                }
            }
        }
    }
    c
}

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn bspline_weights(t: f64) -> [f64; 4] {
    let one = 1.0 - t;
    [
        one * one * one / 6.0,
        (4.0 - 6.0 * t * t + 3.0 * t * t * t) / 6.0,
        (1.0 + 3.0 * t + 3.0 * t * t - 3.0 * t * t * t) / 6.0,
        t * t * t / 6.0,
    ]
}

fn bspline_eval(coef: &[f64], shape: Shape3, c: [f64; 3]) -> f64 {
    let [_, h, w] = shape;
    let mut idx = [[0usize; 4]; 3];
    let mut wts = [[0.0; 4]; 3];
    for a in 0..3 {
        let x = c[a].clamp(0.0, (shape[a] - 1) as f64);
        let f = libm::floor(x);
        wts[a] = bspline_weights(x - f);
        for k in 0..4 {
            idx[a][k] = mirror(f as isize - 1 + k as isize, shape[a]);
        }
    }
    let mut acc = 0.0;
    for (kz, &wz) in wts[0].iter().enumerate() {
        for (ky, &wy) in wts[1].iter().enumerate() {
            let row = (idx[0][kz] * h + idx[1][ky]) * w;
            let mut inner = 0.0;
            for (kx, &wx) in wts[2].iter().enumerate() {
                inner += wx * coef[row + idx[2][kx]];
            }
            acc += wz * wy * inner;
        }
    }
    acc
}

/// Resamples onto `target_spacing` (same origin). The new extent per axis
/// is `ceil(shape * spacing / target)`; samples beyond the last source voxel
/// replicate the edge.
pub fn resample_volume(
    v: &Volume,
    target_spacing: [f64; 3],
    interpolation: Interpolation,
) -> Result<Volume> {
    let shape = v.shape();
    let spacing = v.spacing();
    let out_shape = resampled_shape(shape, spacing, target_spacing)?;
    let src: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let coef = match interpolation {
        Interpolation::Linear => None,
        Interpolation::Bspline3 => Some(bspline_coefficients(&src, shape)),
    };
    let mut out = Vec::with_capacity(voxel_count(out_shape));
    for z in 0..out_shape[0] {
        let cz = source_coord(z, spacing[0], target_spacing[0]);
        for y in 0..out_shape[1] {
            let cy = source_coord(y, spacing[1], target_spacing[1]);
            for x in 0..out_shape[2] {
                let cx = source_coord(x, spacing[2], target_spacing[2]);
                let val = match &coef {
                    None => trilinear(&src, shape, [cz, cy, cx]),
                    Some(c) => bspline_eval(c, shape, [cz, cy, cx]),
                };
                out.push(val as f32);
            }
        }
    }
    Volume::new(
        out,
        out_shape,
        Geometry::new(target_spacing, v.origin())?,
        v.modality(),
    )
}

/// Nearest-neighbour resampling for label grids.
pub fn resample_labels(l: &LabelVolume, target_spacing: [f64; 3]) -> Result<LabelVolume> {
    let shape = l.shape();
    let spacing = l.geometry().spacing;
    let out_shape = resampled_shape(shape, spacing, target_spacing)?;
    let near = |i: usize, a: usize| -> usize {
        let c = source_coord(i, spacing[a], target_spacing[a]);
        (libm::round(c) as usize).min(shape[a] - 1)
    };
    let mut out = Vec::with_capacity(voxel_count(out_shape));
    for z in 0..out_shape[0] {
        let sz = near(z, 0);
        for y in 0..out_shape[1] {
            let sy = near(y, 1);
            for x in 0..out_shape[2] {
                out.push(l.labels()[(sz * shape[1] + sy) * shape[2] + near(x, 2)]);
            }
        }
    }
    LabelVolume::new(
        out,
        out_shape,
        Geometry::new(target_spacing, l.geometry().origin)?,
        l.label_names().clone(),
    )
}

/// Affine intensity statistics recorded by a normalization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
    /// `(p_low, p_high)` clip bounds applied before standardizing, if any.
    pub clip: Option<(f64, f64)>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    let mean = sum / n.max(1) as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64;
    (mean, libm::sqrt(var), n)
}

/// Zero-mean, unit-variance MR normalization.
pub fn zscore_normalize_mr(v: &Volume) -> Result<(Volume, IntensityStats)> {
    let (mean, std, _) = mean_std(v.data().iter().map(|&x| x as f64));
    if !(std > 0.0) {
        return Err(Error::ConstantVolume);
    }
    let out = v
        .data()
        .iter()
        .map(|&x| ((x as f64 - mean) / std) as f32)
        .collect();
    Ok((
        v.with_data(out)?,
        IntensityStats {
            mean,
            std,
            clip: None,
        },
    ))
}

/// Which voxels supply CT normalization statistics.
#[derive(Debug, Clone, Copy)]
pub enum Foreground<'a> {
    /// Non-background voxels of a label grid.
    Mask(&'a LabelVolume),
    /// Voxels strictly above the given percentile of the whole volume.
    AbovePercentile(f64),
    /// Voxels strictly above an absolute intensity.
    AboveValue(f64),
    All,
}

/// Clips to the `(low, high)` percentiles of the foreground intensities,
/// then standardizes with the clipped foreground mean and std.
pub fn normalize_ct(
    v: &Volume,
    foreground: Foreground<'_>,
    percentiles: (f64, f64),
) -> Result<(Volume, IntensityStats)> {
    let data = v.data();
    let fg: Vec<f32> = match foreground {
        Foreground::Mask(m) => {
            if m.shape() != v.shape() {
                return Err(Error::Misaligned(
                    "foreground mask does not match the volume".into(),
                ));
            }
            data.iter()
                .zip(m.labels())
                .filter(|(_, &l)| l != 0)
                .map(|(&x, _)| x)
                .collect()
        }
        Foreground::AbovePercentile(q) => {
            let mut sorted = data.to_vec();
            sorted.sort_unstable_by(f32::total_cmp);
            let t = percentile(&sorted, q);
            data.iter().copied().filter(|&x| x as f64 > t).collect()
        }
        Foreground::AboveValue(t) => data.iter().copied().filter(|&x| x as f64 > t).collect(),
        Foreground::All => data.to_vec(),
    };
    if fg.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let mut sorted = fg;
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = percentile(&sorted, percentiles.0);
    let hi = percentile(&sorted, percentiles.1);
    let clip = |x: f64| x.clamp(lo, hi);
    let (mean, std, _) = mean_std(sorted.iter().map(|&x| clip(x as f64)));
    if !(std > 0.0) {
        return Err(Error::ConstantForeground);
    }
    let out = data
        .iter()
        .map(|&x| ((clip(x as f64) - mean) / std) as f32)
        .collect();
    Ok((
        v.with_data(out)?,
        IntensityStats {
            mean,
            std,
            clip: Some((lo, hi)),
        },
    ))
}

/// Inverse of the standardization step (`x * std + mean`).
pub fn denormalize(v: &Volume, stats: &IntensityStats) -> Result<Volume> {
    v.with_data(
        v.data()
            .iter()
            .map(|&x| (x as f64 * stats.std + stats.mean) as f32)
            .collect(),
    )
}

/// Statistics recorded for one preprocessed pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub source: IntensityStats,
    pub target: IntensityStats,
}

/// Resamples both volumes (labels nearest-neighbour), z-scores the source
/// and CT-normalizes the target.
pub fn preprocess_pair(
    pair: &VolumePair,
    cfg: &PreprocessConfig,
) -> Result<(VolumePair, PairStats)> {
    cfg.validate()?;
    let src = resample_volume(&pair.source, cfg.target_spacing, cfg.mr_interpolation)?;
    let tgt = resample_volume(&pair.target, cfg.target_spacing, Interpolation::Linear)?;
    let labels = pair
        .labels
        .as_ref()
        .map(|l| resample_labels(l, cfg.target_spacing))
        .transpose()?;
    let (src, s_stats) = zscore_normalize_mr(&src)?;
    let fg = match (
        &labels,
        cfg.foreground_from_labels,
        cfg.foreground_threshold,
    ) {
        (Some(l), true, _) => Foreground::Mask(l),
        (_, _, Some(t)) => Foreground::AboveValue(t),
        _ => Foreground::AbovePercentile(cfg.foreground_percentile),
    };
    let (tgt, t_stats) = normalize_ct(&tgt, fg, cfg.ct_clip_percentiles)?;
    Ok((
        VolumePair::new(src, tgt, labels)?,
        PairStats {
            source: s_stats,
            target: t_stats,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    fn vol(data: Vec<f32>, shape: Shape3, spacing: f64) -> Volume {
        Volume::new(data, shape, Geometry::isotropic(spacing), Modality::Ct).unwrap()
    }

    #[test]
    fn identity_resample() {
        let data: Vec<f32> = (0..1000).map(|i| (i % 17) as f32).collect();
        let v = vol(data, [10; 3], 1.0);
        for interp in [Interpolation::Linear, Interpolation::Bspline3] {
            let r = resample_volume(&v, [1.0; 3], interp).unwrap();
            assert_eq!(r.shape(), [10; 3]);
            for (a, b) in r.data().iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-3, "{interp:?}: {a} vs {b}");
            }
        }
        let exact = resample_volume(&v, [1.0; 3], Interpolation::Linear).unwrap();
        assert_eq!(exact.data(), v.data());
    }

    #[test]
    fn shape_formula_and_constants() {
        let v = vol(vec![3.5; 1000], [10; 3], 1.2);
        for interp in [Interpolation::Linear, Interpolation::Bspline3] {
            let r = resample_volume(&v, [0.6; 3], interp).unwrap();
            assert_eq!(r.shape(), [20; 3]);
            assert_eq!(r.spacing(), [0.6; 3]);
            assert!(r.data().iter().all(|&x| (x - 3.5).abs() < 1e-5));
        }
        let odd = vol(vec![0.0; 7 * 7 * 7], [7; 3], 1.0);
        assert_eq!(
            resample_volume(&odd, [0.6, 2.0, 1.0], Interpolation::Linear)
                .unwrap()
                .shape(),
            [12, 4, 7]
        );
    }

    #[test]
    fn ramp_in_ramp_out() {
        let shape = [6, 7, 8];
        let data: Vec<f32> = (0..6 * 7 * 8)
            .map(|i| {
                let (z, y, x) = (i / 56, (i / 8) % 7, i % 8);
                0.5 * z as f32 - 0.25 * y as f32 + x as f32
            })
            .collect();
        let v = vol(data, shape, 1.0);
        let r = resample_volume(&v, [0.5; 3], Interpolation::Linear).unwrap();
        let [d, h, w] = r.shape();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    // inside the source extent the interpolant reproduces the ramp
                    let (cz, cy, cx) = (
                        (z as f32 * 0.5).min(5.0),
                        (y as f32 * 0.5).min(6.0),
                        (x as f32 * 0.5).min(7.0),
                    );
                    let expect = 0.5 * cz - 0.25 * cy + cx;
                    assert!((r.get(z, y, x) - expect).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn zscore_two_point() {
        let v = vol([0.0f32, 2.0].repeat(4), [2, 2, 2], 1.0);
        let (n, stats) = zscore_normalize_mr(&v).unwrap();
        assert_eq!(n.data(), [-1.0f32, 1.0].repeat(4).as_slice());
        assert_eq!((stats.mean, stats.std), (1.0, 1.0));
        assert_eq!(
            zscore_normalize_mr(&vol(vec![4.0; 8], [2, 2, 2], 1.0)).unwrap_err(),
            Error::ConstantVolume
        );
    }

    #[test]
    fn ct_outlier_is_clipped() {
        let mut data: Vec<f32> = (0..1000).map(|i| i as f32).collect();
        data[500] = 1e6;
        let v = vol(data, [10, 10, 10], 1.0);
        let (n, stats) = normalize_ct(&v, Foreground::All, (0.5, 99.5)).unwrap();
        let (_, hi) = stats.clip.unwrap();
        assert!(hi < 1000.0);
        let mapped = n.data()[500] as f64;
        let top = ((hi - stats.mean) / stats.std) as f32;
        assert!((mapped as f32 - top).abs() < 1e-6);
        assert!(n.data().iter().all(|&x| x <= top + 1e-6));
    }

    #[test]
    fn ct_fixed_point() {
        let v = vol([-1.0f32, 1.0].repeat(32), [4, 4, 4], 1.0);
        let (n, _) = normalize_ct(&v, Foreground::All, (0.5, 99.5)).unwrap();
        for (a, b) in n.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ct_guards() {
        let v = vol(vec![1.0; 8], [2, 2, 2], 1.0);
        assert_eq!(
            normalize_ct(&v, Foreground::AboveValue(5.0), (0.5, 99.5)).unwrap_err(),
            Error::EmptyForeground
        );
        assert_eq!(
            normalize_ct(&v, Foreground::All, (0.5, 99.5)).unwrap_err(),
            Error::ConstantForeground
        );
    }

    #[test]
    fn denormalize_constant() {
        let v = vol(vec![0.0; 8], [2, 2, 2], 1.0);
        let s = IntensityStats {
            mean: 5.0,
            std: 2.0,
            clip: None,
        };
        assert!(denormalize(&v, &s)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 5.0));
    }

    #[test]
    fn percentile_linear_convention() {
        let s = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&s, 100.0), 4.0);
        assert_eq!(percentile(&s, 50.0), 2.5);
        assert!((percentile(&s, 10.0) - 1.3).abs() < 1e-12);
    }
}
