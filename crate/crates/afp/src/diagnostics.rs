use afp_core::Volume;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Share of non-DC spectral power at frequencies above a quarter cycle per
/// voxel on at least one axis, i.e. the upper half of the band up to
/// Nyquist where stride-2 upsampling artefacts live. Constant volumes give 0.
pub fn checkerboard_energy(v: &Volume) -> f64 {
    let shape = v.shape();
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let mut buf: Vec<Complex64> = v
        .data()
        .iter()
        .map(|&x| Complex64::new(x as f64 - mean, 0.0))
        .collect();
    fft3(&mut buf, shape);
    let high = |k: usize, n: usize| k.min(n - k) as f64 / n as f64 > 0.25;
    let [d, h, w] = shape;
    let (mut band, mut total) = (0.0, 0.0);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = buf[(z * h + y) * w + x].norm_sqr();
                total += p;
                if high(z, d) || high(y, h) || high(x, w) {
                    band += p;
                }
            }
        }
    }
    if total <= f64::EPSILON * v.len() as f64 {
        0.0
    } else {
        band / total
    }
}

/// Unnormalised forward DFT over all three axes of a `(z, y, x)` array.
pub fn fft3(buf: &mut [Complex64], shape: [usize; 3]) {
    let mut planner = FftPlanner::new();
    let [d, h, w] = shape;
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = shape[axis];
        let fft = planner.plan_fft_forward(n);
        let stride = strides[axis];
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for z in 0..if axis == 0 { 1 } else { d } {
            for y in 0..if axis == 1 { 1 } else { h } {
                for x in 0..if axis == 2 { 1 } else { w } {
                    let base = (z * h + y) * w + x;
                    for (k, c) in line.iter_mut().enumerate() {
                        *c = buf[base + k * stride];
                    }
                    fft.process(&mut line);
                    for (k, c) in line.iter().enumerate() {
                        buf[base + k * stride] = *c;
                    }
                }
            }
        }
    }
}
