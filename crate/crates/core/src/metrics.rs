//! Image quality measures and the interpolation trade-off curve.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet;

/// BT.601 studio-swing luma, `[3,H,W] -> [1,H,W]`; inputs are clamped to
/// `[0, 1]` first.
pub fn rgb_to_y(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(image, "rgb_to_y")?;
    if c != 3 {
        return Err(Error::dim("rgb_to_y", format!("axis 0: expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = image.data();
    let out = (0..plane)
        .map(|i| {
            let (r, g, b) = (clamp01(d[i]), clamp01(d[plane + i]), clamp01(d[2 * plane + i]));
            (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
        })
        .collect();
    Tensor::new(&[1, h, w], out)
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(op, format!("expected [C,H,W], got shape {s:?}"))),
    }
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the inputs are equal.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Valid-mode separable filtering of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, wt)| wt * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, wt)| wt * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two one-channel images `[1,H,W]` with dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (c, h, w) = dims3(a, "ssim")?;
    if c != 1 {
        return Err(Error::dim("ssim", format!("axis 0: expected 1 channel, got {c}")));
    }
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::dim("ssim", format!("image {h}x{w} is smaller than the 11x11 window")));
    }
    let taps = wavelet::gaussian_taps(SSIM_WIN, SSIM_SIGMA)?;
    let (ad, bd) = (a.data(), b.data());
    let aa: Vec<f64> = ad.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bd.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(ad, h, w, &taps);
    let mu_b = filter_valid(bd, h, w, &taps);
    let e_aa = filter_valid(&aa, h, w, &taps);
    let e_bb = filter_valid(&bb, h, w, &taps);
    let e_ab = filter_valid(&ab, h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [c, h, w] => t.reshape(&[1, c, h, w]),
        _ => Ok(t.clone()),
    }
}

/// Mean absolute difference of the one-level Haar LL bands.
pub fn lf_mae(y: &Tensor, y_prime: &Tensor) -> Result<f64> {
    y.ensure_same_shape(y_prime, "lf_mae")?;
    let a = wavelet::t_lf(&as_batch(y)?)?;
    let b = wavelet::t_lf(&as_batch(y_prime)?)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Per-channel standard deviations of the HL, LH and HH bands.
fn high_band_stds(x: &Tensor) -> Result<Vec<f64>> {
    let bands = wavelet::dwt2_haar(&as_batch(x)?)?;
    let (n, c, h, w) = bands.hl.dims4("perceptual_proxy")?;
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * c);
    for band in [&bands.hl, &bands.lh, &bands.hh] {
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|s| band.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter().copied())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            out.push(var.sqrt());
        }
    }
    Ok(out)
}

/// High-frequency statistics proxy for perceptual quality. It is
/// `1 - sum|s_y - s_hat| / (sum s_y + sum s_hat)` over the per-channel
/// standard deviations `s` of the HL, LH and HH Haar bands: 1 when the
/// detail statistics match the reference, lower as they drift. This is a
/// stand-in, not a no-reference quality metric.
pub fn perceptual_proxy(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    y.ensure_same_shape(y_hat, "perceptual_proxy")?;
    let a = high_band_stds(y)?;
    let b = high_band_stds(y_hat)?;
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    let total: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
    if diff == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - diff / (total + 1e-12))
}

/// `alpha * y_o + (1 - alpha) * y_p`.
pub fn interpolate_outputs(y_o: &Tensor, y_p: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract("interpolate_outputs", format!("alpha {alpha} is outside [0, 1]")));
    }
    y_o.zip_map(y_p, |o, p| alpha * o + (1.0 - alpha) * p)
}

/// Y-channel PSNR of an RGB estimate against ground truth, peak 1.
pub fn psnr_y(estimate: &Tensor, truth: &Tensor) -> Result<f64> {
    psnr(&rgb_to_y(estimate)?, &rgb_to_y(truth)?, 1.0)
}

pub fn ssim_y(estimate: &Tensor, truth: &Tensor) -> Result<f64> {
    ssim(&rgb_to_y(estimate)?, &rgb_to_y(truth)?)
}

/// Drops `border` pixels from every side of a `[C,H,W]` image.
pub fn crop_border(image: &Tensor, border: usize) -> Result<Tensor> {
    if border == 0 {
        return Ok(image.clone());
    }
    let (c, h, w) = dims3(image, "crop_border")?;
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::contract("crop_border", format!("border {border} leaves nothing of {h}x{w}")));
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let d = image.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        d[(ch * h + y + border) * w + x + border]
    }))
}

/// One model, or one interpolation of two models, on the trade-off plane.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub label: String,
    pub alpha: Option<f64>,
    pub psnr_db: f64,
    pub perceptual_proxy: f64,
}

/// Set-mean PSNR (Y) and proxy of `alpha * y_o + (1 - alpha) * y_p` for each alpha.
pub fn build_tradeoff_curve(
    y_o_set: &[Tensor],
    y_p_set: &[Tensor],
    gt_set: &[Tensor],
    alphas: &[f64],
) -> Result<Vec<TradeoffPoint>> {
    if y_o_set.len() != y_p_set.len() || y_o_set.len() != gt_set.len() || y_o_set.is_empty() {
        return Err(Error::contract(
            "build_tradeoff_curve",
            format!(
                "image sets are misaligned: {} / {} / {}",
                y_o_set.len(),
                y_p_set.len(),
                gt_set.len()
            ),
        ));
    }
    if alphas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract("build_tradeoff_curve", "alphas must be sorted"));
    }
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut psnr_sum = 0.0;
        let mut proxy_sum = 0.0;
        for ((o, p), gt) in y_o_set.iter().zip(y_p_set).zip(gt_set) {
            let y = interpolate_outputs(o, p, alpha)?;
            psnr_sum += psnr_y(&y, gt)?;
            proxy_sum += perceptual_proxy(&y, gt)?;
        }
        let n = y_o_set.len() as f64;
        out.push(TradeoffPoint {
            label: format!("alpha={alpha}"),
            alpha: Some(alpha),
            psnr_db: psnr_sum / n,
            perceptual_proxy: proxy_sum / n,
        });
    }
    Ok(out)
}

/// CSV text with header `label,alpha,psnr_db,perceptual_proxy`. Floats use
/// the shortest representation that parses back to the same value.
pub fn curve_csv(points: &[TradeoffPoint]) -> String {
    let mut s = String::from("label,alpha,psnr_db,perceptual_proxy\n");
    for p in points {
        let alpha = p.alpha.map(|a| a.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{}", p.label, alpha, p.psnr_db, p.perceptual_proxy).expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn pixel(r: f64, g: f64, b: f64) -> Tensor {
        Tensor::new(&[3, 1, 1], vec![r, g, b]).unwrap()
    }

    #[test]
    fn luma_probes() {
        let y = |r, g, b| rgb_to_y(&pixel(r, g, b)).unwrap().item();
        assert!((y(0.0, 0.0, 0.0) - 16.0 / 255.0).abs() < 1e-12);
        assert!((y(1.0, 1.0, 1.0) - 235.0 / 255.0).abs() < 1e-12);
        assert!((y(0.0, 1.0, 0.0) - 0.56688).abs() < 1e-5);
        assert_eq!(y(-3.0, 2.0, 0.0), y(0.0, 1.0, 0.0));
    }

    #[test]
    fn psnr_cases() {
        let a = random(&[3, 4, 4], 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 1.0);
        assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() < 1e-3);
        let c = a.map(|v| v + 0.1);
        assert!((psnr(&a, &c, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = random(&[1, 16, 16], 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let checker = Tensor::from_fn(&[1, 16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
        let inv = checker.map(|v| 1.0 - v);
        assert!(ssim(&checker, &inv).unwrap() < 0.5);

        let (ma, mb) = (0.2, 0.7);
        let c1 = 0.01f64.powi(2);
        let closed = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let got = ssim(&Tensor::full(&[1, 12, 13], ma), &Tensor::full(&[1, 12, 13], mb)).unwrap();
        assert!((got - closed).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[1, 10, 20]), &Tensor::zeros(&[1, 10, 20])).is_err());
    }

    #[test]
    fn lf_mae_cases() {
        let y = random(&[3, 6, 8], 3);
        assert_eq!(lf_mae(&y, &y).unwrap(), 0.0);
        let shifted = y.map(|v| v + 0.25);
        assert!((lf_mae(&shifted, &y).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn proxy_cases() {
        let y = random(&[3, 16, 16], 4);
        assert_eq!(perceptual_proxy(&y, &y).unwrap(), 1.0);
        let soft = wavelet::gaussian_lowpass(&y.reshape(&[1, 3, 16, 16]).unwrap(), 5, 1.5)
            .unwrap()
            .into_reshaped(&[3, 16, 16])
            .unwrap();
        assert!(perceptual_proxy(&soft, &y).unwrap() < 1.0);
    }

    #[test]
    fn interpolation_endpoints_and_range() {
        let o = random(&[3, 4, 4], 5);
        let p = random(&[3, 4, 4], 6);
        assert_eq!(interpolate_outputs(&o, &p, 1.0).unwrap(), o);
        assert_eq!(interpolate_outputs(&o, &p, 0.0).unwrap(), p);
        let mid = interpolate_outputs(&o, &p, 0.5).unwrap();
        let mean = o.zip_map(&p, |a, b| (a + b) / 2.0).unwrap();
        assert!(mid.max_abs_diff(&mean).unwrap() < 1e-15);
        assert!(interpolate_outputs(&o, &p, 1.5).is_err());
    }

    #[test]
    fn curve_endpoints_match_single_models() {
        let gt: Vec<Tensor> = (0..2).map(|i| random(&[3, 8, 8], 10 + i)).collect();
        let yo: Vec<Tensor> = (0..2).map(|i| random(&[3, 8, 8], 20 + i)).collect();
        let yp: Vec<Tensor> = (0..2).map(|i| random(&[3, 8, 8], 30 + i)).collect();
        let pts = build_tradeoff_curve(&yo, &yp, &gt, &[0.0, 1.0]).unwrap();
        let mean = |set: &[Tensor], f: fn(&Tensor, &Tensor) -> Result<f64>| {
            set.iter().zip(&gt).map(|(a, b)| f(a, b).unwrap()).sum::<f64>() / 2.0
        };
        assert_eq!(pts[0].psnr_db, mean(&yp, psnr_y));
        assert_eq!(pts[1].psnr_db, mean(&yo, psnr_y));
        assert_eq!(pts[1].perceptual_proxy, mean(&yo, perceptual_proxy));
        assert!(build_tradeoff_curve(&yo, &yp[..1], &gt, &[0.0]).is_err());
        let csv = curve_csv(&pts);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("label,alpha,psnr_db,perceptual_proxy\n"));
    }

    #[test]
    fn crop_removes_border() {
        let t = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        assert_eq!(crop_border(&t, 1).unwrap().data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(crop_border(&t, 2).is_err());
    }
}
