//! Intensity metrics (MAE, 3D SSIM) and mask-agreement metrics (Dice,
//! normalized surface distance), plus the silver-standard protocol that
//! scores a synthesized volume by segmenting it and its reference with one
//! frozen model.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::percentile;
use crate::real::Real;
use crate::segnet::SegModel;
use crate::volume::{ensure_aligned, LabelVolume, Shape3, Volume};

/// Mean absolute difference, optionally restricted to non-background voxels of `mask`.
pub fn mae(a: &Volume, b: &Volume, mask: Option<&LabelVolume>) -> Result<f64> {
    ensure_aligned(a.shape(), a.geometry(), b.shape(), b.geometry())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    match mask {
        Some(m) => {
            ensure_aligned(a.shape(), a.geometry(), m.shape(), m.geometry())?;
            for ((x, y), &l) in a.data().iter().zip(b.data()).zip(m.labels()) {
                if l != 0 {
                    sum += (*x as f64 - *y as f64).abs();
                    n += 1;
                }
            }
        }
        None => {
            for (x, y) in a.data().iter().zip(b.data()) {
                sum += (*x as f64 - *y as f64).abs();
            }
            n = a.len();
        }
    }
    if n == 0 {
        return Err(Error::EmptyForeground);
    }
    Ok(sum / n as f64)
}

/// Inclusive prefix sums with a zero border: `(d+1) x (h+1) x (w+1)`.
fn integral(values: impl Iterator<Item = f64>, shape: Shape3) -> Vec<f64> {
    let [d, h, w] = shape;
    let (sh, sw) = (h + 1, w + 1);
    let mut s = vec![0.0; (d + 1) * sh * sw];
    let mut it = values;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = it.next().expect("one value per voxel");
                let i = ((z + 1) * sh + y + 1) * sw + x + 1;
                let p = sh * sw;
                s[i] = v + s[i - 1] + s[i - sw] + s[i - p]
                    - s[i - sw - 1]
                    - s[i - p - 1]
                    - s[i - p - sw]
                    + s[i - p - sw - 1];
            }
        }
    }
    s
}

fn box_sum(s: &[f64], shape: Shape3, lo: [usize; 3], k: [usize; 3]) -> f64 {
    let (sh, sw) = (shape[1] + 1, shape[2] + 1);
    let at = |z: usize, y: usize, x: usize| s[(z * sh + y) * sw + x];
    let [z0, y0, x0] = lo;
    let [z1, y1, x1] = [z0 + k[0], y0 + k[1], x0 + k[2]];
    at(z1, y1, x1) - at(z0, y1, x1) - at(z1, y0, x1) - at(z1, y1, x0)
        + at(z0, y0, x1)
        + at(z0, y1, x0)
        + at(z1, y0, x0)
        - at(z0, y0, x0)
}

/// Mean local SSIM over every fully contained `window³` box (clamped to
/// the volume extent), uniform weights, `C1 = (0.01 R)^2`, `C2 = (0.03 R)^2`.
pub fn ssim3d(a: &Volume, b: &Volume, window: usize, dynamic_range: f64) -> Result<f64> {
    ensure_aligned(a.shape(), a.geometry(), b.shape(), b.geometry())?;
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) || window == 0 {
        return Err(Error::InvalidConfig(
            "ssim needs a positive window and dynamic range".into(),
        ));
    }
    let shape = a.shape();
    let k: [usize; 3] = core::array::from_fn(|i| window.min(shape[i]));
    let n = (k[0] * k[1] * k[2]) as f64;
    let c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
    let c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
    let av = || a.data().iter().map(|&v| v as f64);
    let bv = || b.data().iter().map(|&v| v as f64);
    let sa = integral(av(), shape);
    let sb = integral(bv(), shape);
    let saa = integral(av().map(|v| v * v), shape);
    let sbb = integral(bv().map(|v| v * v), shape);
    let sab = integral(av().zip(bv()).map(|(x, y)| x * y), shape);
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=shape[0] - k[0] {
        for y in 0..=shape[1] - k[1] {
            for x in 0..=shape[2] - k[2] {
                let lo = [z, y, x];
                let ma = box_sum(&sa, shape, lo, k) / n;
                let mb = box_sum(&sb, shape, lo, k) / n;
                let va = (box_sum(&saa, shape, lo, k) / n - ma * ma).max(0.0);
                let vb = (box_sum(&sbb, shape, lo, k) / n - mb * mb).max(0.0);
                let cov = box_sum(&sab, shape, lo, k) / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `p99.5 - p0.5` of a volume, the default SSIM range.
pub fn robust_range(v: &Volume) -> f64 {
    let mut sorted: Vec<f32> = v.data().to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let r = percentile(&sorted, 99.5) - percentile(&sorted, 0.5);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// `2|A∩B| / (|A|+|B|)` for one label; 1 when both are empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u32) -> Result<f64> {
    ensure_aligned(a.shape(), a.geometry(), b.shape(), b.geometry())?;
    Ok(dice_masks(&a.mask(label), &b.mask(label)))
}

pub fn dice_masks(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Mask voxels with at least one face neighbour outside the mask (voxels
/// beyond the grid count as outside).
pub fn surface(mask: &[bool], shape: Shape3) -> Vec<bool> {
    let [d, h, w] = shape;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                out[i] = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1];
            }
        }
    }
    out
}

/// Lower envelope of parabolas `spacing² (p - q)² + f(q)` (Felzenszwalb &
/// Huttenlocher), skipping infinite sites.
fn edt_line(f: &[f64], w2: f64, out: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>) {
    v.clear();
    zb.clear();
    let n = f.len();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + w2 * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * w2 * (q - p) as f64);
                    if s <= *zb.last().expect("paired with v") {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zb[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let dd = p.abs_diff(q);
        *o = w2 * (dd * dd) as f64 + f[q];
    }
}

/// Squared Euclidean distance in mm² from every voxel to the nearest `true`
/// voxel of `sites` (infinite when there is none). `spacing` is `(z, y, x)`.
pub fn squared_distance_transform(sites: &[bool], shape: Shape3, spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut g: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut v = Vec::new();
    let mut zb = Vec::new();
    let longest = d.max(h).max(w);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    // z, then y, then x
    for (axis, len, stride) in [(0usize, d, h * w), (1, h, w), (2, w, 1)] {
        let w2 = spacing[axis] * spacing[axis];
        for base in 0..d * h * w {
            let coord = match axis {
                0 => base / (h * w),
                1 => (base / w) % h,
                _ => base % w,
            };
            if coord != 0 {
                continue;
            }
            for i in 0..len {
                line[i] = g[base + i * stride];
            }
            edt_line(&line[..len], w2, &mut out[..len], &mut v, &mut zb);
            for i in 0..len {
                g[base + i * stride] = out[i];
            }
        }
    }
    g
}

/// Symmetric normalized surface distance at tolerance `tolerance_mm`.
pub fn nsd(a: &LabelVolume, b: &LabelVolume, label: u32, tolerance_mm: f64) -> Result<f64> {
    ensure_aligned(a.shape(), a.geometry(), b.shape(), b.geometry())?;
    if !(tolerance_mm >= 0.0) {
        return Err(Error::InvalidConfig("tolerance must be >= 0".into()));
    }
    Ok(nsd_masks(
        &a.mask(label),
        &b.mask(label),
        a.shape(),
        a.geometry().spacing,
        tolerance_mm,
    ))
}

pub fn nsd_masks(
    a: &[bool],
    b: &[bool],
    shape: Shape3,
    spacing: [f64; 3],
    tolerance_mm: f64,
) -> f64 {
    let sa = surface(a, shape);
    let sb = surface(b, shape);
    let na = sa.iter().filter(|&&s| s).count();
    let nb = sb.iter().filter(|&&s| s).count();
    if na + nb == 0 {
        return 1.0;
    }
    if na == 0 || nb == 0 {
        return 0.0;
    }
    let da = squared_distance_transform(&sa, shape, spacing);
    let db = squared_distance_transform(&sb, shape, spacing);
    let t2 = tolerance_mm * tolerance_mm;
    let a_ok = sa.iter().zip(&db).filter(|(&s, &d)| s && d <= t2).count();
    let b_ok = sb.iter().zip(&da).filter(|(&s, &d)| s && d <= t2).count();
    (a_ok + b_ok) as f64 / (na + nb) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub dice: f64,
    pub nsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub mae: f64,
    pub ssim: f64,
    pub per_label: BTreeMap<u32, LabelScores>,
    pub tolerance_mm: f64,
}

impl MetricsReport {
    pub fn is_finite(&self) -> bool {
        self.mae.is_finite()
            && self.ssim.is_finite()
            && self
                .per_label
                .values()
                .all(|s| s.dice.is_finite() && s.nsd.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: libm::sqrt(var),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelAggregate {
    pub dice: MeanStd,
    pub nsd: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_cases: usize,
    pub mae: MeanStd,
    pub ssim: MeanStd,
    pub per_label: BTreeMap<u32, LabelAggregate>,
    pub tolerance_mm: f64,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let col = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let mut per_label = BTreeMap::new();
    let labels: alloc::collections::BTreeSet<u32> = reports
        .iter()
        .flat_map(|r| r.per_label.keys().copied())
        .collect();
    for l in labels {
        let dice: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.per_label.get(&l).map(|s| s.dice))
            .collect();
        let nsd: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.per_label.get(&l).map(|s| s.nsd))
            .collect();
        per_label.insert(
            l,
            LabelAggregate {
                dice: MeanStd::of(&dice),
                nsd: MeanStd::of(&nsd),
            },
        );
    }
    AggregateReport {
        n_cases: reports.len(),
        mae: MeanStd::of(&col(&|r| r.mae)),
        ssim: MeanStd::of(&col(&|r| r.ssim)),
        per_label,
        tolerance_mm: reports.first().map_or(f64::NAN, |r| r.tolerance_mm),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub tolerance_mm: f64,
    pub ssim_window: usize,
    /// SSIM range; `None` uses the reference volume's `p99.5 - p0.5`.
    pub dynamic_range: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tolerance_mm: 1.2,
            ssim_window: 7,
            dynamic_range: None,
        }
    }
}

/// NSD tolerances used for the two anatomical settings (twice the voxel size).
pub const LUNG_TOLERANCE_MM: f64 = 1.2;
pub const PELVIS_TOLERANCE_MM: f64 = 2.0;

/// Segments both volumes with the same frozen model and scores the
/// synthetic-derived masks against the reference-derived ones.
pub fn silver_standard_eval<T: Real>(
    case_id: &str,
    real_ct: &Volume,
    synth_ct: &Volume,
    segmenter: &SegModel<T>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    ensure_aligned(
        real_ct.shape(),
        real_ct.geometry(),
        synth_ct.shape(),
        synth_ct.geometry(),
    )?;
    let reference = segmenter.segment(real_ct)?;
    let predicted = segmenter.segment(synth_ct)?;
    let mut per_label = BTreeMap::new();
    for label in 1..segmenter.config().out_labels as u32 {
        per_label.insert(
            label,
            LabelScores {
                dice: dice(&predicted, &reference, label)?,
                nsd: nsd(&predicted, &reference, label, opts.tolerance_mm)?,
            },
        );
    }
    let range = opts.dynamic_range.unwrap_or_else(|| robust_range(real_ct));
    Ok(MetricsReport {
        case_id: case_id.into(),
        mae: mae(synth_ct, real_ct, None)?,
        ssim: ssim3d(synth_ct, real_ct, opts.ssim_window, range)?,
        per_label,
        tolerance_mm: opts.tolerance_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Geometry, Modality};

    fn labels(mask: &[bool], shape: Shape3) -> LabelVolume {
        let names = [(1u32, String::from("x"))].into_iter().collect();
        LabelVolume::new(
            mask.iter().map(|&m| m as u32).collect(),
            shape,
            Geometry::isotropic(1.0),
            names,
        )
        .unwrap()
    }

    fn cube(shape: Shape3, lo: [usize; 3], size: usize) -> Vec<bool> {
        let mut m = vec![false; shape.iter().product()];
        for z in lo[0]..lo[0] + size {
            for y in lo[1]..lo[1] + size {
                for x in lo[2]..lo[2] + size {
                    m[(z * shape[1] + y) * shape[2] + x] = true;
                }
            }
        }
        m
    }

    #[test]
    fn dice_cube_shift() {
        let s = [6, 6, 6];
        let a = labels(&cube(s, [2, 2, 1], 2), s);
        let b = labels(&cube(s, [2, 2, 2], 2), s);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let c = labels(&cube(s, [0, 0, 4], 2), s);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        let e = labels(&vec![false; 216], s);
        assert_eq!(dice(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(nsd(&e, &e, 1, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &e, 1, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn nsd_cube_shift() {
        let s = [8, 8, 8];
        let a = labels(&cube(s, [2, 2, 2], 3), s);
        let b = labels(&cube(s, [2, 2, 3], 3), s);
        assert_eq!(nsd(&a, &b, 1, PELVIS_TOLERANCE_MM).unwrap(), 1.0);
        assert!(nsd(&a, &b, 1, 0.5).unwrap() < 1.0);
        assert_eq!(nsd(&a, &a, 1, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn surface_of_solid_cube_is_its_shell() {
        let s = [5, 5, 5];
        let m = cube(s, [1, 1, 1], 3);
        assert_eq!(surface(&m, s).iter().filter(|&&v| v).count(), 26);
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let shape = [8, 8, 8];
        let data: Vec<f32> = (0..512)
            .map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
            .collect();
        let a = Volume::new(data.clone(), shape, Geometry::isotropic(1.0), Modality::Ct).unwrap();
        let b = a.with_data(data.iter().map(|v| -v).collect()).unwrap();
        assert_eq!(ssim3d(&a, &a, 7, 2.0).unwrap(), 1.0);
        assert!(ssim3d(&a, &b, 7, 2.0).unwrap() < 0.0);
    }

    #[test]
    fn mae_offset() {
        let a = Volume::filled([3, 3, 3], 1.0, Geometry::isotropic(1.0), Modality::Ct).unwrap();
        let b = Volume::filled([3, 3, 3], 1.5, Geometry::isotropic(1.0), Modality::Ct).unwrap();
        assert_eq!(mae(&a, &b, None).unwrap(), 0.5);
        assert_eq!(mae(&a, &a, None).unwrap(), 0.0);
        let c = Volume::filled([3, 3, 4], 1.5, Geometry::isotropic(1.0), Modality::Ct).unwrap();
        assert!(matches!(mae(&a, &c, None), Err(Error::Misaligned(_))));
    }

    #[test]
    fn mean_std_population() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
    }
}
