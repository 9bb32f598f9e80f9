//! Reconstruction metrics with peak value 1.0.

use crate::synth::shapes::{Image, IMAGE_SIDE};

/// PSNR reported for identical images (MSE = 0).
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Image, b: &Image) -> f64 {
    let n = a.pixels().len() as f64;
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
}

/// Mean SSIM over all 8×8 windows (stride 1) with uniform weights and
/// unbiased (N−1) variance/covariance estimates.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    let w = SSIM_WINDOW;
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=IMAGE_SIDE - w {
        for c0 in 0..=IMAGE_SIDE - w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    let x = a.at(r, c) as f64;
                    let y = b.at(r, c) as f64;
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (mu_a, mu_b) = (sa / n, sb / n);
            let var_a = (saa - n * mu_a * mu_a) / (n - 1.0);
            let var_b = (sbb - n * mu_b * mu_b) / (n - 1.0);
            let cov = (sab - n * mu_a * mu_b) / (n - 1.0);
            let num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2);
            let den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::shapes::{render, ShapeSpec};

    #[test]
    fn identical_images() {
        let img = render(&ShapeSpec::from_index(5));
        assert_eq!(psnr(&img, &img), PSNR_CAP_DB);
        assert!((ssim(&img, &img) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        // uniform offset 0.1 → MSE 0.01 → 20 dB
        let a = Image::filled(0.2);
        let b = Image::filled(0.3);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-5);
    }

    #[test]
    fn symmetric() {
        let a = render(&ShapeSpec::from_index(1));
        let b = render(&ShapeSpec::from_index(40));
        assert_eq!(psnr(&a, &b), psnr(&b, &a));
        assert!((ssim(&a, &b) - ssim(&b, &a)).abs() < 1e-15);
    }
}
