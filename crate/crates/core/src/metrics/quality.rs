use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Side of the Gaussian SSIM window.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over all elements, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn planes<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::Dimension(format!("image shape {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    Ok((t.numel() / (h * w), h, w))
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5, dynamic range 1),
/// computed per plane and averaged. All leading dimensions are treated as
/// planes, so `[3, H, W]` and `[1, 3, H, W]` give the same value.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (n, h, w) = planes(a)?;
    let g = gaussian_1d();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n {
        let pa: Vec<f64> = a.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect() };
        let mu_a = filter_valid(&pa, h, w, &g);
        let mu_b = filter_valid(&pb, h, w, &g);
        let aa = filter_valid(&prod(&|x, _| x * x), h, w, &g);
        let bb = filter_valid(&prod(&|_, y| y * y), h, w, &g);
        let ab = filter_valid(&prod(&|x, y| x * y), h, w, &g);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: impl Fn(usize) -> f64, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[3, h, w], v)
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(|i| (i % 7) as f64 / 10.0, 4, 4);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = Tensor::new(a.shape(), a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[3, 4, 4]);
        let b = Tensor::<f64>::zeros(&[3, 4, 5]);
        assert!(matches!(psnr(&a, &b, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = img(|i| ((i * 37) % 101) as f64 / 100.0, 16, 13);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constant_images() {
        let a = img(|_| 0.2, 12, 12);
        let b = img(|_| 0.7, 12, 12);
        let c1 = 1e-4;
        let expected = (2.0 * 0.2 * 0.7 + c1) / (0.04 + 0.49 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
        // approximately 0.5284
        assert_eq!((expected * 1e4).round() / 1e4, 0.5284);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = img(|_| 0.0, 10, 20);
        assert!(matches!(ssim(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn window_sums_to_one() {
        assert!((gaussian_1d().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
