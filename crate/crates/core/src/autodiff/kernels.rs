//! Forward and adjoint kernels behind the differentiable graph operations.
//!
//! Convolution lowers each sample to an im2col matrix and runs one GEMM;
//! samples are processed in order so results are bit-stable.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-d convolution, resolved once from the operand shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn resolve(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        let (n, c, h, w) = input.dims4(OP)?;
        let (o, wc, kh, kw) = weight.dims4(OP)?;
        if stride == 0 {
            return Err(Error::contract(OP, "stride must be at least 1"));
        }
        if wc != c {
            return Err(Error::dim(
                OP,
                format!("axis 1: input has {c} channels, weight expects {wc}"),
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(
                OP,
                format!(
                    "axes 2,3: kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Maps an output position and kernel tap to a source index, or `None`
    /// when it lands in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ki: usize, ox: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        cols[row + oy * g.ow + ox] = match g.source(oy, ki, ox, kj) {
                            Some((y, x)) => plane[y * g.w + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, x)) = g.source(oy, ki, ox, kj) {
                            plane[y * g.w + x] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op` optionally
/// transposes. `a` is m×k after `op`, `b` is k×n after `op`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are exactly m*k, k*n and m*n long and the strides
    // above address only within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let in_per = g.c * g.h * g.w;
    let out_per = g.o * p;
    let mut out = vec![0.0; g.n * out_per];
    let mut cols = vec![0.0; k * p];
    for s in 0..g.n {
        im2col(g, &input[s * in_per..(s + 1) * in_per], &mut cols);
        let dst = &mut out[s * out_per..(s + 1) * out_per];
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b[o]);
            }
        }
        gemm(g.o, k, p, weight, false, &cols, false, 1.0, dst);
    }
    out
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let in_per = g.c * g.h * g.w;
    let out_per = g.o * p;
    let mut gi = need[0].then(|| vec![0.0; g.n * in_per]);
    let mut gw = need[1].then(|| vec![0.0; g.o * k]);
    let mut gb = need[2].then(|| vec![0.0; g.o]);
    let mut cols = vec![0.0; k * p];
    for s in 0..g.n {
        let go = &grad_out[s * out_per..(s + 1) * out_per];
        if let Some(gb) = gb.as_mut() {
            for (o, row) in go.chunks(p).enumerate() {
                gb[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            im2col(g, &input[s * in_per..(s + 1) * in_per], &mut cols);
            gemm(g.o, p, k, go, false, &cols, true, 1.0, gw);
        }
        if let Some(gi) = gi.as_mut() {
            gemm(k, g.o, p, weight, true, go, false, 0.0, &mut cols);
            col2im(g, &cols, &mut gi[s * in_per..(s + 1) * in_per]);
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// 2-d cross-correlation with zero padding, the usual "conv2d" of deep learning.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::resolve(input, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", b.shape(), g.o),
            ));
        }
    }
    let out = conv2d_forward(&g, input.data(), weight.data(), bias.map(Tensor::data));
    Tensor::new(&[g.n, g.o, g.oh, g.ow], out)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub(crate) fn pixel_shuffle_shape(shape: &[usize], r: usize) -> Result<[usize; 4]> {
    let [n, c, h, w] = *shape else {
        return Err(Error::dim("pixel_shuffle", format!("need 4-d input, got {shape:?}")));
    };
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::dim(
            "pixel_shuffle",
            format!("axis 1: {c} channels not divisible by r^2 = {}", r * r),
        ));
    }
    Ok([n, c / (r * r), h * r, w * r])
}

/// Index pairs `(src, dst)` of the depth-to-space permutation.
fn shuffle_indices(shape: &[usize], r: usize) -> impl Iterator<Item = (usize, usize)> {
    let (n, cin, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    (0..n * cin * h * w).map(move |src| {
        let x = src % w;
        let y = (src / w) % h;
        let ch = (src / (w * h)) % cin;
        let s = src / (w * h * cin);
        let (co, sub) = (ch / (r * r), ch % (r * r));
        let (i, j) = (sub / r, sub % r);
        let dst = ((s * c + co) * oh + y * r + i) * ow + x * r + j;
        (src, dst)
    })
}

pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let out_shape = pixel_shuffle_shape(input.shape(), r)?;
    let mut out = vec![0.0; input.len()];
    for (src, dst) in shuffle_indices(input.shape(), r) {
        out[dst] = input.data()[src];
    }
    Tensor::new(&out_shape, out)
}

/// Space-to-depth, the inverse permutation of [`pixel_shuffle`].
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::dim(
            "pixel_unshuffle",
            format!("spatial size {h}x{w} not divisible by {r}"),
        ));
    }
    let in_shape = [n, c * r * r, h / r, w / r];
    let mut out = vec![0.0; input.len()];
    for (src, dst) in shuffle_indices(&in_shape, r) {
        out[src] = input.data()[dst];
    }
    Tensor::new(&in_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4("ref").unwrap();
        let (o, _, kh, kw) = w.dims4("ref").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let xd = x.data();
        let wdat = w.data();
        let mut out = vec![0.0; n * o * oh * ow];
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[oc];
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let y = (oy * stride + i) as isize - pad as isize;
                                    let xx = (ox * stride + j) as isize - pad as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                        continue;
                                    }
                                    acc += wdat[((oc * c + ic) * kh + i) * kw + j]
                                        * xd[((s * c + ic) * h + y as usize) * wd + xx as usize];
                                }
                            }
                        }
                        out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn all_ones_counts_overlap() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 1, 5, 4], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
            let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = conv_reference(&x, &w, &b, stride, pad);
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x1 = random(&[2, 3, 6, 6], &mut rng);
        let x2 = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let mixed = x1.scale(a).add(&x2.scale(b)).unwrap();
        let lhs = conv2d(&mixed, &w, None, 1, 1).unwrap();
        let rhs = conv2d(&x1, &w, None, 1, 1)
            .unwrap()
            .scale(a)
            .add(&conv2d(&x2, &w, None, 1, 1).unwrap().scale(b))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
        let big = Tensor::zeros(&[1, 2, 7, 7]);
        let err = conv2d(&x, &big, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axes 2,3"), "{err}");
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[2], vec![2.0, -1.0]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data()[0], 2.0);
        assert!((y.data()[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn pixel_shuffle_definition() {
        let x = Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_round_trip_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 8, 3, 5], &mut rng);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 6, 10]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let x = Tensor::zeros(&[1, 6, 2, 2]);
        assert!(matches!(pixel_shuffle(&x, 2), Err(Error::Dimension { .. })));
    }
}
