//! Image comparison metrics: PSNR and single-scale SSIM.

use crate::img::ImageF;

/// Mean squared error over all channels.
pub fn mse(a: &ImageF, b: &ImageF) -> f64 {
    assert_eq!(a.width, b.width, "mse: width mismatch");
    assert_eq!(a.height, b.height, "mse: height mismatch");
    let n = a.data.len() as f64;
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]:
/// 10 log10(1 / mse), reported as 99 when mse < 1e-10.
pub fn psnr(a: &ImageF, b: &ImageF) -> f64 {
    let e = mse(a, b);
    if e < 1e-10 {
        99.0
    } else {
        10.0 * (1.0 / e).log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur of a single-channel plane (clamped borders).
fn blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let half = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - half).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let mu_a = blur(a, w, h);
    let mu_b = blur(b, w, h);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    let s_aa = blur(&aa, w, h);
    let s_bb = blur(&bb, w, h);
    let s_ab = blur(&ab, w, h);
    let mut total = 0.0;
    for i in 0..a.len() {
        let va = s_aa[i] - mu_a[i] * mu_a[i];
        let vb = s_bb[i] - mu_b[i] * mu_b[i];
        let cov = s_ab[i] - mu_a[i] * mu_b[i];
        let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
        let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
        total += num / den;
    }
    total / a.len() as f64
}

/// Single-scale SSIM with an 11x11 Gaussian window, averaged over rgb.
pub fn ssim(a: &ImageF, b: &ImageF) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height), "ssim: shape mismatch");
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data[i * 3 + ch]).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data[i * 3 + ch]).collect();
        total += ssim_plane(&pa, &pb, w, h);
    }
    total / 3.0
}
