//! Orthonormal Haar wavelet transform and the Gaussian low-pass alternative.
//!
//! One level maps every non-overlapping 2×2 block `[[a, b], [c, d]]` to
//!
//! ```text
//! LL = (a + b + c + d) / 2      HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! The transform matrix is orthogonal, so it preserves energy and its inverse
//! is its transpose. The graph uses that fact: the adjoint of the forward
//! transform is the inverse transform and vice versa.
//!
//! Packed form: where a single tensor is more convenient (inside the
//! refinement network, in the autodiff graph) the four bands are stacked along
//! the channel axis in the order `LL, HL, LH, HH`, giving `[N, 4C, H/2, W/2]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four Haar subbands of one decomposition level, each `[N, C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Tensor,
    pub hl: Tensor,
    pub lh: Tensor,
    pub hh: Tensor,
}

impl SubbandSet {
    pub fn energy(&self) -> f64 {
        self.ll.sum_squares() + self.hl.sum_squares() + self.lh.sum_squares() + self.hh.sum_squares()
    }

    /// Stacks the bands along the channel axis as `LL, HL, LH, HH`.
    pub fn pack(&self) -> Result<Tensor> {
        self.check_shapes()?;
        let (n, c, h, w) = self.ll.dims4("SubbandSet::pack")?;
        let plane = c * h * w;
        let mut out = Vec::with_capacity(4 * n * plane);
        for s in 0..n {
            for band in [&self.ll, &self.hl, &self.lh, &self.hh] {
                out.extend_from_slice(&band.data()[s * plane..(s + 1) * plane]);
            }
        }
        Tensor::new(&[n, 4 * c, h, w], out)
    }

    pub fn unpack(packed: &Tensor) -> Result<SubbandSet> {
        let (n, c4, h, w) = packed.dims4("SubbandSet::unpack")?;
        if c4 % 4 != 0 {
            return Err(Error::dim(
                "SubbandSet::unpack",
                format!("axis 1: {c4} channels is not a multiple of 4"),
            ));
        }
        let c = c4 / 4;
        let plane = c * h * w;
        let mut bands: [Vec<f64>; 4] = Default::default();
        for s in 0..n {
            for (b, band) in bands.iter_mut().enumerate() {
                let start = (s * 4 + b) * plane;
                band.extend_from_slice(&packed.data()[start..start + plane]);
            }
        }
        let [ll, hl, lh, hh] = bands.map(|d| Tensor::new(&[n, c, h, w], d));
        Ok(SubbandSet {
            ll: ll?,
            hl: hl?,
            lh: lh?,
            hh: hh?,
        })
    }

    fn check_shapes(&self) -> Result<()> {
        for band in [&self.hl, &self.lh, &self.hh] {
            if band.shape() != self.ll.shape() {
                return Err(Error::dim(
                    "SubbandSet",
                    format!("band shape {:?} differs from LL {:?}", band.shape(), self.ll.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Packed forward transform on raw `[N, C, H, W]` data.
pub(crate) fn haar_forward_packed(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let plane = c * h2 * w2;
    let mut out = vec![0.0; n * 4 * plane];
    for s in 0..n {
        for ch in 0..c {
            let src = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            let base = s * 4 * plane + ch * h2 * w2;
            for i in 0..h2 {
                for j in 0..w2 {
                    let a = src[2 * i * w + 2 * j];
                    let b = src[2 * i * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let d = src[(2 * i + 1) * w + 2 * j + 1];
                    let k = base + i * w2 + j;
                    out[k] = (a + b + cc + d) * 0.5;
                    out[k + plane] = (a - b + cc - d) * 0.5;
                    out[k + 2 * plane] = (a + b - cc - d) * 0.5;
                    out[k + 3 * plane] = (a - b - cc + d) * 0.5;
                }
            }
        }
    }
    out
}

/// Packed inverse transform; `c` is the per-band channel count.
pub(crate) fn haar_inverse_packed(p: &[f64], n: usize, c: usize, h2: usize, w2: usize) -> Vec<f64> {
    let (h, w) = (2 * h2, 2 * w2);
    let plane = c * h2 * w2;
    let mut out = vec![0.0; n * c * h * w];
    for s in 0..n {
        for ch in 0..c {
            let dst = &mut out[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            let base = s * 4 * plane + ch * h2 * w2;
            for i in 0..h2 {
                for j in 0..w2 {
                    let k = base + i * w2 + j;
                    let (ll, hl, lh, hh) = (p[k], p[k + plane], p[k + 2 * plane], p[k + 3 * plane]);
                    dst[2 * i * w + 2 * j] = (ll + hl + lh + hh) * 0.5;
                    dst[2 * i * w + 2 * j + 1] = (ll - hl + lh - hh) * 0.5;
                    dst[(2 * i + 1) * w + 2 * j] = (ll + hl - lh - hh) * 0.5;
                    dst[(2 * i + 1) * w + 2 * j + 1] = (ll - hl - lh + hh) * 0.5;
                }
            }
        }
    }
    out
}

pub(crate) fn check_even(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = t.dims4(op)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            op,
            format!("axes 2,3: spatial size {h}x{w} must be even"),
        ));
    }
    Ok((n, c, h, w))
}

/// Packed one-level transform, `[N, C, H, W] -> [N, 4C, H/2, W/2]`.
pub fn dwt2_haar_packed(image: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = check_even("dwt2_haar", image)?;
    Tensor::new(
        &[n, 4 * c, h / 2, w / 2],
        haar_forward_packed(image.data(), n, c, h, w),
    )
}

/// Inverse of [`dwt2_haar_packed`].
pub fn idwt2_haar_packed(packed: &Tensor) -> Result<Tensor> {
    let (n, c4, h2, w2) = packed.dims4("idwt2_haar")?;
    if c4 % 4 != 0 {
        return Err(Error::dim(
            "idwt2_haar",
            format!("axis 1: {c4} channels is not a multiple of 4"),
        ));
    }
    Tensor::new(
        &[n, c4 / 4, 2 * h2, 2 * w2],
        haar_inverse_packed(packed.data(), n, c4 / 4, h2, w2),
    )
}

pub fn dwt2_haar(image: &Tensor) -> Result<SubbandSet> {
    SubbandSet::unpack(&dwt2_haar_packed(image)?)
}

pub fn idwt2_haar(bands: &SubbandSet) -> Result<Tensor> {
    idwt2_haar_packed(&bands.pack().map_err(|e| match e {
        Error::Dimension { detail, .. } => Error::dim("idwt2_haar", detail),
        other => other,
    })?)
}

/// Low-frequency part of an image: the LL band of one Haar level.
pub fn t_lf(image: &Tensor) -> Result<Tensor> {
    Ok(dwt2_haar(image)?.ll)
}

/// LL band after `levels` successive Haar levels. Each level scales a constant
/// image by 2, so the result carries a factor `2^levels` relative to a block
/// mean.
pub fn ll_multilevel(image: &Tensor, levels: usize) -> Result<Tensor> {
    const OP: &str = "ll_multilevel";
    if levels == 0 {
        return Err(Error::contract(OP, "levels must be at least 1"));
    }
    let (_, _, h, w) = image.dims4(OP)?;
    let f = 1usize << levels;
    if h % f != 0 || w % f != 0 {
        return Err(Error::dim(
            OP,
            format!("axes 2,3: spatial size {h}x{w} not divisible by {f}"),
        ));
    }
    let mut cur = t_lf(image)?;
    for _ in 1..levels {
        cur = t_lf(&cur)?;
    }
    Ok(cur)
}

/// Normalized 1-d Gaussian taps. The 2-d kernel is the outer product of this
/// with itself, which is normalized as well.
pub fn gaussian_taps(ksize: usize, sigma: f64) -> Result<Vec<f64>> {
    const OP: &str = "gaussian_lowpass";
    if ksize.is_multiple_of(2) {
        return Err(Error::contract(OP, format!("kernel size {ksize} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::contract(OP, format!("sigma {sigma} must be positive")));
    }
    let r = (ksize / 2) as f64;
    let raw: Vec<f64> = (0..ksize)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Full 2-d Gaussian kernel, `ksize × ksize`, row-major.
pub fn gaussian_kernel(ksize: usize, sigma: f64) -> Result<Vec<f64>> {
    let t = gaussian_taps(ksize, sigma)?;
    Ok(t.iter().flat_map(|a| t.iter().map(move |b| a * b)).collect())
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable reflect-padded blur along one axis of every `[h, w]` plane.
pub(crate) fn blur_axis(x: &[f64], planes: usize, h: usize, w: usize, taps: &[f64], vertical: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &k) in taps.iter().enumerate() {
                    let off = t as isize - r;
                    acc += k * if vertical {
                        src[reflect(i as isize + off, h) * w + j]
                    } else {
                        src[i * w + reflect(j as isize + off, w)]
                    };
                }
                dst[i * w + j] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`blur_axis`]: scatters each output gradient back through the
/// same reflected taps.
pub(crate) fn blur_axis_adjoint(g: &[f64], planes: usize, h: usize, w: usize, taps: &[f64], vertical: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; g.len()];
    for p in 0..planes {
        let src = &g[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let gv = src[i * w + j];
                for (t, &k) in taps.iter().enumerate() {
                    let off = t as isize - r;
                    let idx = if vertical {
                        reflect(i as isize + off, h) * w + j
                    } else {
                        i * w + reflect(j as isize + off, w)
                    };
                    dst[idx] += k * gv;
                }
            }
        }
    }
    out
}

/// Depthwise Gaussian blur with reflect padding; output has the input's size.
pub fn gaussian_lowpass(image: &Tensor, ksize: usize, sigma: f64) -> Result<Tensor> {
    let taps = gaussian_taps(ksize, sigma)?;
    let (n, c, h, w) = image.dims4("gaussian_lowpass")?;
    let tmp = blur_axis(image.data(), n * c, h, w, &taps, false);
    Tensor::new(image.shape(), blur_axis(&tmp, n * c, h, w, &taps, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_image_has_only_ll() {
        let c = 0.3;
        let b = dwt2_haar(&Tensor::full(&[1, 2, 4, 6], c)).unwrap();
        assert!(b.ll.data().iter().all(|&v| (v - 2.0 * c).abs() < 1e-15));
        for band in [&b.hl, &b.lh, &b.hh] {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_pixel_block_splits_evenly() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = dwt2_haar(&x).unwrap();
        for band in [&b.ll, &b.hl, &b.lh, &b.hh] {
            assert_eq!(band.data(), &[0.5]);
        }
        assert_eq!(b.energy(), 1.0);
    }

    #[test]
    fn inverse_of_constant_and_zero_bands() {
        let c = 0.7;
        let z = Tensor::zeros(&[1, 1, 1, 1]);
        let bands = SubbandSet {
            ll: Tensor::full(&[1, 1, 1, 1], 2.0 * c),
            hl: z.clone(),
            lh: z.clone(),
            hh: z.clone(),
        };
        let img = idwt2_haar(&bands).unwrap();
        assert!(img.data().iter().all(|&v| (v - c).abs() < 1e-15));
        let zero = SubbandSet {
            ll: z.clone(),
            hl: z.clone(),
            lh: z.clone(),
            hh: z,
        };
        assert!(idwt2_haar(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trips_both_directions() {
        let x = random(&[1, 3, 8, 8], 1);
        let back = idwt2_haar(&dwt2_haar(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-12);

        let p = random(&[2, 8, 3, 5], 2);
        let bands = SubbandSet::unpack(&p).unwrap();
        let again = dwt2_haar(&idwt2_haar(&bands).unwrap()).unwrap();
        assert!(again.pack().unwrap().max_abs_diff(&p).unwrap() <= 1e-12);
    }

    #[test]
    fn odd_size_is_rejected() {
        assert!(matches!(
            dwt2_haar(&Tensor::zeros(&[1, 1, 3, 4])),
            Err(Error::Dimension { .. })
        ));
        let mismatched = SubbandSet {
            ll: Tensor::zeros(&[1, 1, 2, 2]),
            hl: Tensor::zeros(&[1, 1, 2, 2]),
            lh: Tensor::zeros(&[1, 1, 2, 3]),
            hh: Tensor::zeros(&[1, 1, 2, 2]),
        };
        assert!(matches!(idwt2_haar(&mismatched), Err(Error::Dimension { .. })));
    }

    #[test]
    fn t_lf_is_half_block_sum() {
        let x = random(&[2, 3, 6, 4], 3);
        let lf = t_lf(&x).unwrap();
        let (n, c, h, w) = (2, 3, 6, 4);
        for s in 0..n {
            for ch in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let at = |y: usize, xx: usize| x.data()[((s * c + ch) * h + y) * w + xx];
                        let sum = at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1);
                        let got = lf.data()[((s * c + ch) * (h / 2) + i) * (w / 2) + j];
                        assert!((got - sum / 2.0).abs() <= 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn t_lf_recovers_pure_ll_image() {
        let l = random(&[1, 2, 3, 3], 4);
        let z = Tensor::zeros(l.shape());
        let img = idwt2_haar(&SubbandSet {
            ll: l.clone(),
            hl: z.clone(),
            lh: z.clone(),
            hh: z,
        })
        .unwrap();
        assert!(t_lf(&img).unwrap().max_abs_diff(&l).unwrap() <= 1e-15);
    }

    #[test]
    fn multilevel_ll_is_scaled_block_mean() {
        let c = 0.25;
        let two = ll_multilevel(&Tensor::full(&[1, 1, 8, 8], c), 2).unwrap();
        assert_eq!(two.shape(), &[1, 1, 2, 2]);
        assert!(two.data().iter().all(|&v| (v - 4.0 * c).abs() < 1e-15));

        let x = random(&[1, 1, 16, 16], 5);
        assert_eq!(ll_multilevel(&x, 1).unwrap(), t_lf(&x).unwrap());
        let ll2 = ll_multilevel(&x, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut sum = 0.0;
                for y in 0..4 {
                    for xx in 0..4 {
                        sum += x.data()[(4 * i + y) * 16 + 4 * j + xx];
                    }
                }
                assert!((ll2.data()[i * 4 + j] - 4.0 * sum / 16.0).abs() <= 1e-12);
            }
        }
        assert!(ll_multilevel(&Tensor::zeros(&[1, 1, 6, 8]), 2).is_err());
    }

    #[test]
    fn gaussian_kernel_normalized_and_preserves_constants() {
        let k = gaussian_kernel(21, 3.0).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let img = Tensor::full(&[1, 3, 12, 9], 0.4);
        let out = gaussian_lowpass(&img, 21, 3.0).unwrap();
        assert!(out.max_abs_diff(&img).unwrap() <= 1e-12);
        assert!(gaussian_taps(4, 1.0).is_err());
        assert!(gaussian_taps(5, 0.0).is_err());
    }

    #[test]
    fn delta_response_is_center_weight() {
        let mut img = Tensor::zeros(&[1, 1, 31, 31]);
        img.data_mut()[15 * 31 + 15] = 1.0;
        let out = gaussian_lowpass(&img, 21, 3.0).unwrap();
        // Direct evaluation of the unnormalized 2-d Gaussian, then normalized.
        let mut total = 0.0;
        for i in -10i32..=10 {
            for j in -10i32..=10 {
                total += (-((i * i + j * j) as f64) / 18.0).exp();
            }
        }
        let center = 1.0 / total;
        assert!((out.data()[15 * 31 + 15] - center).abs() <= 1e-15);
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }
}
