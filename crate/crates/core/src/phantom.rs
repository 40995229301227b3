//! Synthetic paired MR/CT volumes with a branching tubular tree, soft-tissue
//! blobs and bone-like shafts. Labels: 0 background, 1 tube, 2 blob, 3 shaft.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::volume::{voxel_count, Geometry, LabelVolume, Modality, Shape3, Volume, VolumePair};

pub const BACKGROUND: u32 = 0;
pub const TUBE: u32 = 1;
pub const BLOB: u32 = 2;
pub const SHAFT: u32 = 3;

/// Minimum edge length; smaller grids cannot hold a branching tree.
pub const MIN_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensity {
    pub mr: f64,
    pub ct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityTable {
    pub background: Intensity,
    pub tube: Intensity,
    pub blob: Intensity,
    pub shaft: Intensity,
}

impl Default for IntensityTable {
    fn default() -> Self {
        IntensityTable {
            background: Intensity { mr: 100.0, ct: 0.0 },
            tube: Intensity {
                mr: 112.0,
                ct: 600.0,
            },
            blob: Intensity {
                mr: 170.0,
                ct: 60.0,
            },
            shaft: Intensity {
                mr: 50.0,
                ct: 1000.0,
            },
        }
    }
}

impl IntensityTable {
    pub fn get(&self, label: u32) -> Intensity {
        match label {
            TUBE => self.tube,
            BLOB => self.blob,
            SHAFT => self.shaft,
            _ => self.background,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: Shape3,
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Number of generations in the tube tree (1 = a single segment).
    pub tree_depth: usize,
    /// Root and minimum tube radius, in voxels.
    pub tube_radius_range: (f64, f64),
    pub n_blobs: usize,
    pub n_shafts: usize,
    pub noise_sigma_mr: f64,
    pub noise_sigma_ct: f64,
    pub intensity_table: IntensityTable,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: [48; 3],
            spacing: [0.6; 3],
            seed: 0,
            tree_depth: 4,
            tube_radius_range: (1.0, 2.5),
            n_blobs: 2,
            n_shafts: 1,
            noise_sigma_mr: 6.0,
            noise_sigma_ct: 15.0,
            intensity_table: IntensityTable::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.size.iter().any(|&s| s < MIN_SIZE) {
            return bad(format!(
                "every dimension must be >= {MIN_SIZE}, got {:?}",
                self.size
            ));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("spacing must be positive, got {:?}", self.spacing));
        }
        if self.tree_depth < 1 {
            return bad("tree_depth must be >= 1".into());
        }
        let (lo, hi) = self.tube_radius_range;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return bad(format!(
                "tube_radius_range must satisfy 1 <= min <= max, got ({lo}, {hi})"
            ));
        }
        if 4.0 * hi >= *self.size.iter().min().unwrap() as f64 {
            return bad("tube radius too large for the grid".into());
        }
        if !(self.noise_sigma_mr >= 0.0 && self.noise_sigma_ct >= 0.0) {
            return bad("noise sigmas must be >= 0".into());
        }
        Ok(())
    }
}

/// One straight tube piece, in voxel coordinates `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub generation: usize,
}

impl Segment {
    pub fn length(&self) -> f64 {
        norm(sub(self.end, self.start))
    }
}

/// Geometry actually drawn into a phantom.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhantomLayout {
    pub segments: Vec<Segment>,
}

pub fn label_names() -> BTreeMap<u32, String> {
    [(TUBE, "tube"), (BLOB, "blob"), (SHAFT, "shaft")]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + d[0] * t, a[1] + d[1] * t, a[2] + d[2] * t]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    libm::sqrt(dot(a, a))
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn random_unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = norm(v);
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Rotates `dir` away from itself by `angle` around a random perpendicular axis.
fn branch_direction(dir: [f64; 3], angle: f64, azimuth: f64) -> [f64; 3] {
    let helper = if libm::fabs(dir[0]) < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = unit(cross(dir, helper));
    let v = cross(dir, u);
    let (sa, ca) = (libm::sin(azimuth), libm::cos(azimuth));
    let perp = [
        u[0] * ca + v[0] * sa,
        u[1] * ca + v[1] * sa,
        u[2] * ca + v[2] * sa,
    ];
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    unit([
        dir[0] * c + perp[0] * s,
        dir[1] * c + perp[1] * s,
        dir[2] * c + perp[2] * s,
    ])
}

struct Canvas {
    labels: Vec<u32>,
    shape: Shape3,
}

impl Canvas {
    fn bbox(&self, lo: [f64; 3], hi: [f64; 3]) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        for a in 0..3 {
            let l = libm::floor(lo[a]).max(0.0) as usize;
            let h = (libm::ceil(hi[a]).max(0.0) as usize).min(self.shape[a] - 1);
            out[a] = (l, h);
        }
        out
    }

    fn paint(&mut self, lo: [f64; 3], hi: [f64; 3], label: u32, inside: impl Fn([f64; 3]) -> bool) {
        let [(z0, z1), (y0, y1), (x0, x1)] = self.bbox(lo, hi);
        let [_, h, w] = self.shape;
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if inside([z as f64, y as f64, x as f64]) {
                        self.labels[(z * h + y) * w + x] = label;
                    }
                }
            }
        }
    }

    /// Flat-ended cylinder around the segment axis.
    fn cylinder(&mut self, a: [f64; 3], b: [f64; 3], r: f64, label: u32) {
        let d = sub(b, a);
        let len2 = dot(d, d);
        let lo = [a[0].min(b[0]) - r, a[1].min(b[1]) - r, a[2].min(b[2]) - r];
        let hi = [a[0].max(b[0]) + r, a[1].max(b[1]) + r, a[2].max(b[2]) + r];
        self.paint(lo, hi, label, |p| {
            let ap = sub(p, a);
            let t = dot(ap, d);
            if t < 0.0 || t > len2 {
                return false;
            }
            let q = sub(ap, [d[0] * t / len2, d[1] * t / len2, d[2] * t / len2]);
            dot(q, q) <= r * r
        });
    }

    fn ellipsoid(&mut self, c: [f64; 3], radii: [f64; 3], label: u32) {
        let lo = sub(c, radii);
        let hi = add_scaled(c, radii, 1.0);
        self.paint(lo, hi, label, |p| {
            let d = sub(p, c);
            (0..3)
                .map(|a| (d[a] / radii[a]) * (d[a] / radii[a]))
                .sum::<f64>()
                <= 1.0
        });
    }
}

fn clamp_into(p: [f64; 3], shape: Shape3, margin: f64) -> [f64; 3] {
    let mut out = p;
    for a in 0..3 {
        out[a] = p[a].clamp(margin, shape[a] as f64 - 1.0 - margin);
    }
    out
}

fn grow_tree(spec: &PhantomSpec, rng: &mut Rng) -> Vec<Segment> {
    let shape = spec.size;
    let (r_min, r_max) = spec.tube_radius_range;
    let min_edge = *shape.iter().min().unwrap() as f64;
    let start = [
        r_max + 1.0,
        shape[1] as f64 / 2.0 + rng.random_range(-0.1..0.1) * shape[1] as f64,
        shape[2] as f64 / 2.0 + rng.random_range(-0.1..0.1) * shape[2] as f64,
    ];
    let dir = unit([
        1.0,
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    ]);
    let root_len = 0.36 * min_edge;
    let mut segments = Vec::new();
    let mut frontier = vec![(start, dir, root_len, r_max, 0usize)];
    while let Some((from, dir, len, r, gen)) = frontier.pop() {
        let margin = r + 1.0;
        let to = clamp_into(add_scaled(from, dir, len), shape, margin);
        let seg = Segment {
            start: from,
            end: to,
            radius: r,
            generation: gen,
        };
        if seg.length() < 1.0 {
            continue;
        }
        segments.push(seg);
        if gen + 1 >= spec.tree_depth {
            continue;
        }
        let heading = unit(sub(to, from));
        let azimuth = rng.random_range(0.0..core::f64::consts::TAU);
        let child_r = (r * 0.78).max(r_min);
        for k in 0..2 {
            let angle = rng.random_range(0.45..0.75);
            let child_dir =
                branch_direction(heading, angle, azimuth + k as f64 * core::f64::consts::PI);
            frontier.push((to, child_dir, len * 0.8, child_r, gen + 1));
        }
    }
    segments
}

/// Generates a phantom and returns the tube layout that was drawn.
pub fn generate_phantom_with_layout(spec: &PhantomSpec) -> Result<(VolumePair, PhantomLayout)> {
    spec.validate()?;
    let shape = spec.size;
    let mut rng = seeded(derive_seed(spec.seed, 0));
    let mut canvas = Canvas {
        labels: vec![BACKGROUND; voxel_count(shape)],
        shape,
    };
    let dims = [shape[0] as f64, shape[1] as f64, shape[2] as f64];
    let min_edge = dims.iter().cloned().fold(f64::INFINITY, f64::min);

    for _ in 0..spec.n_blobs {
        let radii = [
            rng.random_range(0.07..0.13) * min_edge,
            rng.random_range(0.07..0.13) * min_edge,
            rng.random_range(0.07..0.13) * min_edge,
        ];
        let c = [0, 1, 2].map(|a| rng.random_range(radii[a]..dims[a] - radii[a]));
        canvas.ellipsoid(c, radii, BLOB);
    }
    for _ in 0..spec.n_shafts {
        let r = rng.random_range(0.05..0.08) * min_edge;
        let mid = [0, 1, 2].map(|a| rng.random_range(0.25..0.75) * dims[a]);
        let d = random_unit(&mut rng);
        canvas.cylinder(
            add_scaled(mid, d, -2.0 * min_edge),
            add_scaled(mid, d, 2.0 * min_edge),
            r,
            SHAFT,
        );
    }

    let segments = grow_tree(spec, &mut rng);
    for s in &segments {
        canvas.cylinder(s.start, s.end, s.radius, TUBE);
    }
    // Spheres at branch points keep parent and children connected.
    for s in segments
        .iter()
        .filter(|s| s.generation + 1 < spec.tree_depth)
    {
        let r = s.radius;
        canvas.ellipsoid(s.end, [r; 3], TUBE);
    }

    let geometry = Geometry::new(spec.spacing, [0.0; 3])?;
    let labels = canvas.labels;
    let mut mr = Vec::with_capacity(labels.len());
    let mut ct = Vec::with_capacity(labels.len());
    let mut mr_rng = seeded(derive_seed(spec.seed, 1));
    let mut ct_rng = seeded(derive_seed(spec.seed, 2));
    let mr_noise =
        Normal::new(0.0, spec.noise_sigma_mr).map_err(|e| Error::SpecInvalid(format!("{e}")))?;
    let ct_noise =
        Normal::new(0.0, spec.noise_sigma_ct).map_err(|e| Error::SpecInvalid(format!("{e}")))?;
    for &l in &labels {
        let i = spec.intensity_table.get(l);
        mr.push((i.mr + mr_noise.sample(&mut mr_rng)) as f32);
        ct.push((i.ct + ct_noise.sample(&mut ct_rng)) as f32);
    }
    let pair = VolumePair::new(
        Volume::new(mr, shape, geometry, Modality::Mr)?,
        Volume::new(ct, shape, geometry, Modality::Ct)?,
        Some(LabelVolume::new(labels, shape, geometry, label_names())?),
    )?;
    Ok((pair, PhantomLayout { segments }))
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<VolumePair> {
    generate_phantom_with_layout(spec).map(|(p, _)| p)
}

/// Shuffles `items` with `seed` and splits them by `(train, val, test)` fractions.
pub fn split_dataset<T>(
    items: Vec<T>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || libm::fabs(sum - 1.0) > 1e-6 {
        return Err(Error::BadFractions(fractions));
    }
    let n = items.len();
    let n_train = (libm::round(fractions[0] * n as f64) as usize).min(n);
    let n_val = (libm::round(fractions[1] * n as f64) as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take =
        |idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| slots[i].take().unwrap()).collect() };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = PhantomSpec {
            size: [32; 3],
            tube_radius_range: (1.0, 2.0),
            ..Default::default()
        };
        assert_eq!(
            generate_phantom(&spec).unwrap(),
            generate_phantom(&spec).unwrap()
        );
        let other = PhantomSpec {
            seed: 1,
            ..spec.clone()
        };
        assert_ne!(
            generate_phantom(&spec).unwrap(),
            generate_phantom(&other).unwrap()
        );
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            PhantomSpec {
                size: [8, 48, 48],
                ..Default::default()
            },
            PhantomSpec {
                tube_radius_range: (0.5, 2.0),
                ..Default::default()
            },
            PhantomSpec {
                tube_radius_range: (3.0, 2.0),
                ..Default::default()
            },
            PhantomSpec {
                tree_depth: 0,
                ..Default::default()
            },
            PhantomSpec {
                noise_sigma_ct: -1.0,
                ..Default::default()
            },
        ] {
            assert!(
                matches!(generate_phantom(&spec), Err(Error::SpecInvalid(_))),
                "{spec:?}"
            );
        }
    }

    #[test]
    fn split_counts() {
        let (a, b, c) = split_dataset((0..10).collect(), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let mut all: Vec<i32> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(
            split_dataset(vec![1], [0.5, 0.5, 0.5], 0).unwrap_err(),
            Error::BadFractions([0.5; 3])
        );
    }
}
