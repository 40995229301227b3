//! Overlapping-window tiling, order-independent blending and training
//! patch sampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{voxel_count, Shape3, VolumePair};

/// Half-open index box `[start, end)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub start: [usize; 3],
    pub end: [usize; 3],
}

impl Window {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.start[a] <= p[a] && p[a] < self.end[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub volume_shape: Shape3,
    pub patch_size: Shape3,
    pub tiling: f64,
    pub windows: Vec<Window>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Per-axis stride before boundary clamping.
    pub fn stride(&self) -> [usize; 3] {
        core::array::from_fn(|a| axis_stride(self.patch_size[a], self.tiling))
    }
}

fn axis_stride(patch: usize, tiling: f64) -> usize {
    (libm::floor(patch as f64 * (1.0 - tiling)) as usize).max(1)
}

fn axis_starts(n: usize, patch: usize, tiling: f64) -> Vec<usize> {
    let stride = axis_stride(patch, tiling);
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|s| s + patch <= n)
        .collect();
    if starts.last() != Some(&(n - patch)) {
        starts.push(n - patch);
    }
    starts
}

pub fn check_patch_fits(shape: Shape3, patch: Shape3) -> Result<()> {
    if (0..3).any(|a| patch[a] == 0 || patch[a] > shape[a]) {
        return Err(Error::PatchTooLarge { patch, shape });
    }
    Ok(())
}

/// Tiles `shape` with `patch`-sized windows overlapping by `tiling`
/// (stride `floor(patch * (1 - tiling))`); the last window on each axis is
/// clamped to the volume boundary.
pub fn tile_volume(shape: Shape3, patch: Shape3, tiling: f64) -> Result<PatchGrid> {
    check_patch_fits(shape, patch)?;
    if !(tiling > 0.0 && tiling < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tiling must lie in (0, 1), got {tiling}"
        )));
    }
    let starts: [Vec<usize>; 3] = core::array::from_fn(|a| axis_starts(shape[a], patch[a], tiling));
    let mut windows = Vec::with_capacity(starts.iter().map(Vec::len).product());
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                let start = [z, y, x];
                windows.push(Window {
                    start,
                    end: core::array::from_fn(|a| start[a] + patch[a]),
                });
            }
        }
    }
    Ok(PatchGrid {
        volume_shape: shape,
        patch_size: patch,
        tiling,
        windows,
    })
}

/// Copies the window's voxels out of a `(z, y, x)` array.
pub fn extract_patch<T: Copy>(
    data: &[T],
    shape: Shape3,
    start: [usize; 3],
    patch: Shape3,
) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(patch));
    for z in start[0]..start[0] + patch[0] {
        for y in start[1]..start[1] + patch[1] {
            let row = (z * shape[1] + y) * shape[2] + start[2];
            out.extend_from_slice(&data[row..row + patch[2]]);
        }
    }
    out
}

/// Gathers, per voxel, every window value covering it, sorted ascending.
/// Returns `(offsets, values)` in CSR form.
fn gather_sorted(
    grid: &PatchGrid,
    outputs: &[impl AsRef<[f32]>],
) -> Result<(Vec<usize>, Vec<f32>)> {
    if outputs.len() != grid.windows.len() {
        return Err(Error::CountMismatch {
            expected: grid.windows.len(),
            got: outputs.len(),
        });
    }
    let pv = voxel_count(grid.patch_size);
    if let Some(bad) = outputs.iter().find(|o| o.as_ref().len() != pv) {
        return Err(Error::ShapeMismatch(format!(
            "patch output has {} voxels, expected {pv}",
            bad.as_ref().len()
        )));
    }
    let shape = grid.volume_shape;
    let n = voxel_count(shape);
    let mut counts = vec![0usize; n + 1];
    for w in &grid.windows {
        for_each_voxel(w, shape, |_, vi| counts[vi + 1] += 1);
    }
    for i in 0..n {
        counts[i + 1] += counts[i];
    }
    let offsets = counts;
    let mut fill = offsets.clone();
    let mut values = vec![0.0f32; offsets[n]];
    for (w, out) in grid.windows.iter().zip(outputs) {
        let out = out.as_ref();
        for_each_voxel(w, shape, |pi, vi| {
            values[fill[vi]] = out[pi];
            fill[vi] += 1;
        });
    }
    for i in 0..n {
        if offsets[i] == offsets[i + 1] {
            return Err(Error::InvalidConfig(format!(
                "voxel {i} is not covered by any window"
            )));
        }
        values[offsets[i]..offsets[i + 1]].sort_unstable_by(f32::total_cmp);
    }
    Ok((offsets, values))
}

fn for_each_voxel(w: &Window, shape: Shape3, mut f: impl FnMut(usize, usize)) {
    let mut pi = 0;
    for z in w.start[0]..w.end[0] {
        for y in w.start[1]..w.end[1] {
            let row = (z * shape[1] + y) * shape[2];
            for x in w.start[2]..w.end[2] {
                f(pi, row + x);
                pi += 1;
            }
        }
    }
}

/// Median of sorted values; even counts take the midpoint of the central pair.
pub(crate) fn sorted_median(v: &[f32]) -> f32 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        ((v[n / 2 - 1] as f64 + v[n / 2] as f64) * 0.5) as f32
    }
}

pub(crate) fn sorted_mean(v: &[f32]) -> f32 {
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32
}

/// Per-voxel median over all covering windows.
pub fn median_blend(grid: &PatchGrid, outputs: &[impl AsRef<[f32]>]) -> Result<Vec<f32>> {
    let (off, vals) = gather_sorted(grid, outputs)?;
    Ok(off
        .windows(2)
        .map(|r| sorted_median(&vals[r[0]..r[1]]))
        .collect())
}

/// Per-voxel arithmetic mean over all covering windows. Values are summed
/// in ascending order so the result does not depend on window order.
pub fn mean_blend(grid: &PatchGrid, outputs: &[impl AsRef<[f32]>]) -> Result<Vec<f32>> {
    let (off, vals) = gather_sorted(grid, outputs)?;
    Ok(off
        .windows(2)
        .map(|r| sorted_mean(&vals[r[0]..r[1]]))
        .collect())
}

/// Aligned crop of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub start: [usize; 3],
    pub source: Vec<f32>,
    pub target: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

/// Draws `n` window starts. The first `ceil(fg_bias * n)` draws (in a
/// shuffled order) are centred, up to a jitter of a quarter patch, on a
/// random labelled voxel, so that voxel sits in the central half of the
/// patch; the rest are uniform over all valid starts. Without labels (or
/// with an empty foreground) every draw is uniform.
pub fn sample_patch_starts(
    shape: Shape3,
    labels: Option<&[u32]>,
    patch: Shape3,
    n: usize,
    seed: u64,
    fg_bias: f64,
) -> Result<Vec<[usize; 3]>> {
    check_patch_fits(shape, patch)?;
    if !(0.0..=1.0).contains(&fg_bias) {
        return Err(Error::InvalidConfig(format!(
            "fg_bias must be in [0, 1], got {fg_bias}"
        )));
    }
    let n_fg = libm::ceil(fg_bias * n as f64 - 1e-9) as usize;
    let mut r = rng::seeded(seed);
    let candidates: Vec<usize> = match labels {
        Some(l) if n_fg > 0 => {
            let strict: Vec<usize> = (0..l.len())
                .filter(|&i| l[i] != 0 && centred_start(i, shape, patch).is_some())
                .collect();
            if strict.is_empty() {
                (0..l.len()).filter(|&i| l[i] != 0).collect()
            } else {
                strict
            }
        }
        _ => Vec::new(),
    };
    let mut starts = Vec::with_capacity(n);
    for i in 0..n {
        if i < n_fg && !candidates.is_empty() {
            let v = candidates[r.random_range(0..candidates.len())];
            let pos = unravel(v, shape);
            let start = core::array::from_fn(|a| {
                let q = (patch[a] / 4) as i64;
                let jitter = if q > 0 { r.random_range(-q..=q) } else { 0 };
                let s = pos[a] as i64 - (patch[a] / 2) as i64 + jitter;
                s.clamp(0, (shape[a] - patch[a]) as i64) as usize
            });
            starts.push(start);
        } else {
            starts.push(core::array::from_fn(|a| {
                r.random_range(0..=shape[a] - patch[a])
            }));
        }
    }
    starts.shuffle(&mut r);
    Ok(starts)
}

fn unravel(i: usize, shape: Shape3) -> [usize; 3] {
    [
        i / (shape[1] * shape[2]),
        (i / shape[2]) % shape[1],
        i % shape[2],
    ]
}

fn centred_start(i: usize, shape: Shape3, patch: Shape3) -> Option<[usize; 3]> {
    let p = unravel(i, shape);
    let mut s = [0; 3];
    for a in 0..3 {
        let half = patch[a] / 2;
        if p[a] < half || p[a] - half + patch[a] > shape[a] {
            return None;
        }
        s[a] = p[a] - half;
    }
    Some(s)
}

/// Aligned patch pairs for translation training; see [`sample_patch_starts`].
pub fn sample_training_patches(
    pair: &VolumePair,
    patch: Shape3,
    n: usize,
    seed: u64,
    fg_bias: f64,
) -> Result<Vec<PatchSample>> {
    let shape = pair.shape();
    let labels = pair.labels.as_ref().map(|l| l.labels());
    let starts = sample_patch_starts(shape, labels, patch, n, seed, fg_bias)?;
    Ok(starts
        .into_iter()
        .map(|start| PatchSample {
            start,
            source: extract_patch(pair.source.data(), shape, start, patch),
            target: extract_patch(pair.target.data(), shape, start, patch),
            labels: labels.map(|l| extract_patch(l, shape, start, patch)),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        let g = tile_volume([64; 3], [32; 3], 0.5).unwrap();
        assert_eq!(g.len(), 27);
        assert_eq!(g.stride(), [16; 3]);
        assert_eq!(tile_volume([32; 3], [32; 3], 0.5).unwrap().len(), 1);
        let g = tile_volume([40; 3], [32; 3], 0.5).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.windows[1].start, [0, 0, 8]);
        assert_eq!(g.windows.last().unwrap().start, [8, 8, 8]);
    }

    #[test]
    fn windows_sorted_and_in_bounds() {
        let g = tile_volume([20, 33, 17], [8, 16, 17], 0.5).unwrap();
        assert!(g.windows.windows(2).all(|w| w[0].start < w[1].start));
        assert!(g
            .windows
            .iter()
            .all(|w| (0..3).all(|a| w.end[a] <= g.volume_shape[a])));
    }

    #[test]
    fn rejects_oversized_patch_and_bad_tiling() {
        assert!(matches!(
            tile_volume([16; 3], [32, 8, 8], 0.5),
            Err(Error::PatchTooLarge { .. })
        ));
        assert!(tile_volume([16; 3], [8; 3], 1.0).is_err());
        assert!(tile_volume([16; 3], [8; 3], 0.0).is_err());
    }

    #[test]
    fn median_is_outlier_robust() {
        // three windows along x covering voxel 2 of a 1x1x5 line
        let grid = PatchGrid {
            volume_shape: [1, 1, 5],
            patch_size: [1, 1, 3],
            tiling: 0.5,
            windows: (0..3)
                .map(|s| Window {
                    start: [0, 0, s],
                    end: [1, 1, s + 3],
                })
                .collect(),
        };
        let outs = [vec![1.0f32; 3], vec![2.0; 3], vec![100.0; 3]];
        let med = median_blend(&grid, &outs).unwrap();
        assert_eq!(med[2], 2.0);
        let mean = mean_blend(&grid, &outs).unwrap();
        assert!((mean[2] - 103.0 / 3.0).abs() < 1e-5);
        assert_eq!(med[0], 1.0);
        assert_eq!(med[1], 1.5);
    }

    #[test]
    fn count_mismatch() {
        let g = tile_volume([8; 3], [4; 3], 0.5).unwrap();
        let outs = vec![vec![0.0f32; 64]; g.len() - 1];
        assert!(matches!(
            median_blend(&g, &outs),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn constant_patches_blend_to_constant() {
        let g = tile_volume([12, 10, 9], [4, 6, 5], 0.5).unwrap();
        let outs = vec![vec![3.25f32; 120]; g.len()];
        assert!(median_blend(&g, &outs).unwrap().iter().all(|&v| v == 3.25));
        assert!(mean_blend(&g, &outs).unwrap().iter().all(|&v| v == 3.25));
    }
}
