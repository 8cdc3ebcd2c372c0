use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    ensure!(x.shape() == y.shape(), "psnr: shape mismatch {:?} vs {:?}", x.shape(), y.shape());
    ensure!(x.numel() > 0, "psnr: empty images");
    ensure!(peak > 0.0, "psnr: peak must be > 0");
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

const WIN: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Single-channel SSIM map mean over all 8x8 windows (stride 1, uniform
/// weights, dynamic range 1).
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - WIN {
        for j in 0..=w - WIN {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..WIN {
                let row = (i + di) * w + j;
                for k in row..row + WIN {
                    let (p, q) = (a[k], b[k]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            // unbiased window covariances
            let va = (saa - n * ma * ma) / (n - 1.0);
            let vb = (sbb - n * mb * mb) / (n - 1.0);
            let cov = (sab - n * ma * mb) / (n - 1.0);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean local SSIM of `HxW` or `CxHxW` images, averaged over channels.
/// `ssim(x, x)` is exactly 1.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    ensure!(x.shape() == y.shape(), "ssim: shape mismatch {:?} vs {:?}", x.shape(), y.shape());
    let s = x.shape();
    let (c, h, w) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => return Err(crate::Error::contract(format!("ssim: expected HxW or CxHxW, got {:?}", s))),
    };
    ensure!(c > 0 && h >= WIN && w >= WIN, "ssim: image {:?} is smaller than the {WIN}x{WIN} window", s);
    if x.data() == y.data() {
        return Ok(1.0);
    }
    let plane = h * w;
    let sum: f64 = (0..c)
        .map(|k| ssim_plane(&x.data()[k * plane..(k + 1) * plane], &y.data()[k * plane..(k + 1) * plane], h, w))
        .sum();
    Ok(sum / c as f64)
}
