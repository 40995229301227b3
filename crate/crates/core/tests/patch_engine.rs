use afp_core::patch::*;
use afp_core::phantom::{generate_phantom, PhantomSpec};
use afp_core::rng::seeded;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Gathers every covering window value per voxel, sorts, reduces.
fn oracle(shape: [usize; 3], grid: &PatchGrid, outputs: &[Vec<f32>], median: bool) -> Vec<f32> {
    let p = grid.patch_size;
    let mut out = Vec::new();
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let mut vals: Vec<f32> = grid
                    .windows
                    .iter()
                    .zip(outputs)
                    .filter(|(w, _)| w.contains([z, y, x]))
                    .map(|(w, o)| {
                        let (lz, ly, lx) = (z - w.start[0], y - w.start[1], x - w.start[2]);
                        o[(lz * p[1] + ly) * p[2] + lx]
                    })
                    .collect();
                vals.sort_by(f32::total_cmp);
                let n = vals.len();
                out.push(if median {
                    if n % 2 == 1 {
                        vals[n / 2]
                    } else {
                        ((vals[n / 2 - 1] as f64 + vals[n / 2] as f64) / 2.0) as f32
                    }
                } else {
                    (vals.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32
                });
            }
        }
    }
    out
}

fn random_outputs(grid: &PatchGrid, seed: u64) -> Vec<Vec<f32>> {
    let mut r = seeded(seed);
    let n: usize = grid.patch_size.iter().product();
    grid.windows
        .iter()
        .map(|_| (0..n).map(|_| r.random_range(-5.0f32..5.0)).collect())
        .collect()
}

#[test]
fn blends_match_gather_oracle_on_random_cases() {
    let mut r = seeded(42);
    for case in 0..10u64 {
        let shape: [usize; 3] = std::array::from_fn(|_| r.random_range(6..20));
        let patch: [usize; 3] = std::array::from_fn(|a| r.random_range(2..=shape[a]));
        let grid = tile_volume(shape, patch, 0.5).unwrap();
        let outs = random_outputs(&grid, case);
        assert_eq!(
            median_blend(&grid, &outs).unwrap(),
            oracle(shape, &grid, &outs, true),
            "case {case}"
        );
        assert_eq!(
            mean_blend(&grid, &outs).unwrap(),
            oracle(shape, &grid, &outs, false),
            "case {case}"
        );
    }
}

#[test]
fn median_blend_48_cube_patch_16() {
    let shape = [48; 3];
    let grid = tile_volume(shape, [16; 3], 0.5).unwrap();
    assert_eq!(grid.len(), 125);
    let outs = random_outputs(&grid, 7);
    assert_eq!(
        median_blend(&grid, &outs).unwrap(),
        oracle(shape, &grid, &outs, true)
    );
}

#[test]
fn interior_coverage_matches_overlap() {
    let grid = tile_volume([64; 3], [32; 3], 0.5).unwrap();
    assert_eq!(grid.len(), 27);
    let covering = grid
        .windows
        .iter()
        .filter(|w| w.contains([20, 20, 20]))
        .count();
    assert_eq!(covering, 8);
    let grid = tile_volume([40; 3], [32; 3], 0.5).unwrap();
    assert_eq!(grid.windows[1].start, [0, 0, 8]);
    assert_eq!(tile_volume([12, 9, 5], [12, 9, 5], 0.5).unwrap().len(), 1);
}

#[test]
fn fg_bias_one_always_hits_structure() {
    let pair = generate_phantom(&PhantomSpec {
        size: [32; 3],
        ..Default::default()
    })
    .unwrap();
    let samples = sample_training_patches(&pair, [16; 3], 40, 3, 1.0).unwrap();
    for s in &samples {
        assert!(s.labels.as_ref().unwrap().iter().any(|&l| l != 0));
    }
    assert_eq!(
        samples,
        sample_training_patches(&pair, [16; 3], 40, 3, 1.0).unwrap()
    );
}

#[test]
fn uniform_starts_pass_chi_square() {
    // 10^4 draws over 7 start positions per axis; chi-square on the z axis
    // and on the flattened start index (343 cells).
    let shape = [16; 3];
    let patch = [10; 3];
    let n = 10_000;
    let starts = sample_patch_starts(shape, None, patch, n, 11, 0.0).unwrap();
    let mut axis = [0usize; 7];
    let mut cells = vec![0usize; 343];
    for s in &starts {
        axis[s[0]] += 1;
        cells[(s[0] * 7 + s[1]) * 7 + s[2]] += 1;
    }
    let chi = |counts: &[usize]| {
        let e = n as f64 / counts.len() as f64;
        counts
            .iter()
            .map(|&c| (c as f64 - e).powi(2) / e)
            .sum::<f64>()
    };
    // 99.9% quantiles: chi2(6) = 22.46, chi2(342) ~ 432
    assert!(chi(&axis) < 22.46, "{}", chi(&axis));
    assert!(chi(&cells) < 432.0, "{}", chi(&cells));
}

#[test]
fn permuting_windows_leaves_blends_identical() {
    let shape = [17, 13, 11];
    let grid = tile_volume(shape, [8, 6, 5], 0.5).unwrap();
    let outs = random_outputs(&grid, 5);
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.shuffle(&mut seeded(9));
    let shuffled = PatchGrid {
        windows: order.iter().map(|&i| grid.windows[i]).collect(),
        ..grid.clone()
    };
    let souts: Vec<Vec<f32>> = order.iter().map(|&i| outs[i].clone()).collect();
    assert_eq!(
        median_blend(&grid, &outs).unwrap(),
        median_blend(&shuffled, &souts).unwrap()
    );
    assert_eq!(
        mean_blend(&grid, &outs).unwrap(),
        mean_blend(&shuffled, &souts).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn tile_copy_blend_is_identity(
        d in 1usize..18, h in 1usize..18, w in 1usize..18,
        pd in 1usize..18, ph in 1usize..18, pw in 1usize..18,
        tiling in 0.05f64..0.95, seed in 0u64..1000,
    ) {
        let shape = [d, h, w];
        let patch = [pd.min(d), ph.min(h), pw.min(w)];
        let grid = tile_volume(shape, patch, tiling).unwrap();
        let mut r = seeded(seed);
        let vol: Vec<f32> = (0..d * h * w).map(|_| r.random_range(-100.0f32..100.0)).collect();
        let outs: Vec<Vec<f32>> = grid.windows.iter().map(|wd| extract_patch(&vol, shape, wd.start, patch)).collect();
        prop_assert_eq!(&median_blend(&grid, &outs).unwrap(), &vol);
        // windows sorted, in bounds, covering
        for pair in grid.windows.windows(2) {
            prop_assert!(pair[0].start < pair[1].start);
        }
        for wd in &grid.windows {
            for a in 0..3 {
                prop_assert!(wd.end[a] <= shape[a] && wd.end[a] - wd.start[a] == patch[a]);
            }
        }
    }
}
