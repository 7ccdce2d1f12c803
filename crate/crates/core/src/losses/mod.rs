//! Training objectives for both stages, the quadratic ADMM penalty and the
//! L1-regularized joint objective used as a baseline.
//!
//! Every loss is built on a [`Graph`] so it can be differentiated; the
//! `*_value` helpers evaluate the same expressions on plain tensors.

pub(crate) mod contextual;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
pub use contextual::CxParams;

/// Weights of the individual loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cx: f64,
    pub lambda_d: f64,
    pub lambda_gen: f64,
    pub lambda_o: f64,
    pub lambda_p: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cx: 0.1,
            lambda_d: 1.0,
            lambda_gen: 0.005,
            lambda_o: 1.0,
            lambda_p: 1.0,
            lambda_r: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_cx", self.lambda_cx),
            ("lambda_d", self.lambda_d),
            ("lambda_gen", self.lambda_gen),
            ("lambda_o", self.lambda_o),
            ("lambda_p", self.lambda_p),
            ("lambda_r", self.lambda_r),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Contextual loss settings. Features are a fixed random linear projection of
/// `patch_size × patch_size × 3` pixel patches taken every `patch_stride`
/// pixels; they stand in for pretrained-network features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CxConfig {
    pub bandwidth_h: f64,
    pub epsilon: f64,
    pub feature_dim: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub feature_seed: u64,
}

impl Default for CxConfig {
    fn default() -> Self {
        CxConfig {
            bandwidth_h: 0.5,
            epsilon: 1e-5,
            feature_dim: 64,
            patch_size: 5,
            patch_stride: 4,
            feature_seed: 0x5eed_cafe,
        }
    }
}

impl CxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_h > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("contextual bandwidth_h and epsilon must be > 0".into()));
        }
        if self.feature_dim == 0 || self.patch_size == 0 || self.patch_stride == 0 {
            return Err(Error::Config("contextual feature_dim, patch_size, patch_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> CxParams {
        CxParams {
            bandwidth: self.bandwidth_h,
            epsilon: self.epsilon,
        }
    }

    /// The fixed projection `[feature_dim, channels, p, p]`, drawn from
    /// `N(0, 1/fan_in)` with `feature_seed`.
    pub fn projection(&self, channels: usize) -> Tensor {
        let p = self.patch_size;
        let fan_in = (channels * p * p) as f64;
        let normal = Normal::new(0.0, fan_in.sqrt().recip()).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(self.feature_seed);
        Tensor::from_fn(&[self.feature_dim, channels, p, p], |_| normal.sample(&mut rng))
    }
}

/// Mean absolute difference. The subgradient at a tie is 0.
pub fn l1_loss(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b).map_err(|_| shape_err("l1_loss", g, a, b))?;
    let ad = g.abs(d);
    Ok(g.mean(ad))
}

fn shape_err(op: &'static str, g: &Graph, a: NodeId, b: NodeId) -> Error {
    Error::dim(
        op,
        format!("shapes {:?} and {:?} differ", g.value(a).shape(), g.value(b).shape()),
    )
}

/// Objective-stage loss: L1 between the stage output and the ground truth.
pub fn loss_objective(g: &mut Graph, y_prime: NodeId, y_hat: NodeId) -> Result<NodeId> {
    l1_loss(g, y_prime, y_hat)
}

/// Contextual loss of a generated batch `y` against a constant target.
pub fn contextual_loss(g: &mut Graph, y: NodeId, y_hat: &Tensor, cfg: &CxConfig) -> Result<NodeId> {
    g.value(y).ensure_same_shape(y_hat, "contextual_loss")?;
    let (_, c, h, w) = y_hat.dims4("contextual_loss")?;
    if h < cfg.patch_size || w < cfg.patch_size {
        return Err(Error::contract(
            "contextual_loss",
            format!("image {h}x{w} smaller than patch {}", cfg.patch_size),
        ));
    }
    let proj = cfg.projection(c);
    let target = kernels::conv2d(y_hat, &proj, None, cfg.patch_stride, 0)?;
    let wnode = g.constant(proj);
    let feats = g.conv2d(y, wnode, None, cfg.patch_stride, 0)?;
    g.contextual(feats, target, cfg.params())
}

/// Generator adversarial loss: BCE of the fake logits against label 1.
pub fn adversarial_gen_loss(g: &mut Graph, fake_logit: NodeId) -> NodeId {
    g.bce_with_logits(fake_logit, 1.0)
}

/// Discriminator loss: BCE(real, 1) + BCE(fake, 0).
pub fn adversarial_disc_loss(g: &mut Graph, real_logit: NodeId, fake_logit: NodeId) -> Result<NodeId> {
    let r = g.bce_with_logits(real_logit, 1.0);
    let f = g.bce_with_logits(fake_logit, 0.0);
    g.add(r, f)
}

/// LL band after `levels` Haar levels, recorded on the graph.
pub fn ll_multilevel_node(g: &mut Graph, x: NodeId, levels: usize) -> Result<NodeId> {
    let mut cur = x;
    for _ in 0..levels {
        let c = g.value(cur).dims4("ll_multilevel")?.1;
        let packed = g.haar_dwt(cur)?;
        cur = g.narrow_channels(packed, 0, c)?;
    }
    Ok(cur)
}

/// The three perceptual terms, unweighted, plus their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct PerceptualTerms {
    pub cx: NodeId,
    pub d: NodeId,
    pub gen: NodeId,
    pub total: NodeId,
}

/// `lambda_cx * CX(y, y_hat) + lambda_d * L1(f(y), f(y_hat)) + lambda_gen * Gen(fake)`
/// where `f` keeps the LL band of `levels` Haar levels.
pub fn loss_perceptual(
    g: &mut Graph,
    y: NodeId,
    y_hat: NodeId,
    fake_logit: NodeId,
    w: &LossWeights,
    cfg: &CxConfig,
    levels: usize,
) -> Result<PerceptualTerms> {
    let target = g.value(y_hat).clone();
    let cx = contextual_loss(g, y, &target, cfg)?;
    let ly = ll_multilevel_node(g, y, levels)?;
    let lt = ll_multilevel_node(g, y_hat, levels)?;
    let d = l1_loss(g, ly, lt)?;
    let gen = adversarial_gen_loss(g, fake_logit);
    let a = g.scale(cx, w.lambda_cx);
    let b = g.scale(d, w.lambda_d);
    let c = g.scale(gen, w.lambda_gen);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(PerceptualTerms { cx, d, gen, total })
}

/// Scaled-form augmented Lagrangian penalty
/// `(rho/2) * sum((lf_p - lf_o + s)^2) / batch`.
pub fn admm_penalty(g: &mut Graph, lf_p: NodeId, lf_o: NodeId, s: NodeId, rho: f64) -> Result<NodeId> {
    if !(rho >= 0.0) {
        return Err(Error::contract("admm_penalty", format!("rho {rho} must be >= 0")));
    }
    let gap = g.sub(lf_p, lf_o).map_err(|_| shape_err("admm_penalty", g, lf_p, lf_o))?;
    let shifted = g.add(gap, s).map_err(|_| shape_err("admm_penalty", g, gap, s))?;
    let sq = g.mul(shifted, shifted)?;
    let total = g.sum(sq);
    let batch = g.value(lf_p).shape().first().copied().unwrap_or(1).max(1);
    Ok(g.scale(total, rho / (2.0 * batch as f64)))
}

/// Which part of an image the stage constraint compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum BandExtractor {
    /// LL band of one Haar level.
    #[default]
    HaarLow,
    /// HL, LH and HH bands of one Haar level, stacked on channels.
    HaarHigh,
    /// Reflect-padded Gaussian blur at full resolution.
    Gaussian { ksize: usize, sigma: f64 },
}

impl BandExtractor {
    pub const GAUSSIAN_ABLATION: BandExtractor = BandExtractor::Gaussian { ksize: 21, sigma: 3.0 };

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match *self {
            BandExtractor::HaarLow | BandExtractor::HaarHigh => {
                let c = g.value(x).dims4("band extractor")?.1;
                let packed = g.haar_dwt(x)?;
                match self {
                    BandExtractor::HaarLow => g.narrow_channels(packed, 0, c),
                    _ => g.narrow_channels(packed, c, 3 * c),
                }
            }
            BandExtractor::Gaussian { ksize, sigma } => g.gaussian_blur(x, ksize, sigma),
        }
    }

    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let n = g.constant(x.clone());
        let out = self.apply(&mut g, n)?;
        Ok(g.value(out).clone())
    }

    /// Shape of the extracted band for an input of `shape`.
    pub fn output_shape(&self, shape: &[usize]) -> Vec<usize> {
        match (*self, shape) {
            (BandExtractor::HaarLow, [n, c, h, w]) => vec![*n, *c, h / 2, w / 2],
            (BandExtractor::HaarHigh, [n, c, h, w]) => vec![*n, 3 * c, h / 2, w / 2],
            _ => shape.to_vec(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            BandExtractor::HaarLow => "dwt",
            BandExtractor::HaarHigh => "dwt-high",
            BandExtractor::Gaussian { .. } => "gaussian",
        }
    }
}

/// Terms of the L1-regularized joint objective.
#[derive(Clone, Copy, Debug)]
pub struct RegularizedTerms {
    pub objective: NodeId,
    pub perceptual: PerceptualTerms,
    pub regularizer: NodeId,
    pub total: NodeId,
}

/// `lambda_o * L_O(y', y_hat) + lambda_p * L_P(y) + lambda_r * mean|T(y) - T(y')|`.
#[allow(clippy::too_many_arguments)]
pub fn regularized_total_loss(
    g: &mut Graph,
    y: NodeId,
    y_prime: NodeId,
    y_hat: NodeId,
    fake_logit: NodeId,
    w: &LossWeights,
    cfg: &CxConfig,
    levels: usize,
    extractor: BandExtractor,
) -> Result<RegularizedTerms> {
    let objective = loss_objective(g, y_prime, y_hat)?;
    let perceptual = loss_perceptual(g, y, y_hat, fake_logit, w, cfg, levels)?;
    let ty = extractor.apply(g, y)?;
    let typ = extractor.apply(g, y_prime)?;
    let regularizer = l1_loss(g, ty, typ)?;
    let a = g.scale(objective, w.lambda_o);
    let b = g.scale(perceptual.total, w.lambda_p);
    let c = g.scale(regularizer, w.lambda_r);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(RegularizedTerms {
        objective,
        perceptual,
        regularizer,
        total,
    })
}

/// Evaluates a graph-built scalar loss on plain tensors.
fn eval_scalar(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.value(out).item())
}

pub fn l1_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    eval_scalar(|g| {
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        l1_loss(g, a, b)
    })
}

pub fn contextual_value(y: &Tensor, y_hat: &Tensor, cfg: &CxConfig) -> Result<f64> {
    eval_scalar(|g| {
        let y = g.constant(y.clone());
        contextual_loss(g, y, y_hat, cfg)
    })
}

pub fn admm_penalty_value(lf_p: &Tensor, lf_o: &Tensor, s: &Tensor, rho: f64) -> Result<f64> {
    eval_scalar(|g| {
        let (p, o, s) = (g.constant(lf_p.clone()), g.constant(lf_o.clone()), g.constant(s.clone()));
        admm_penalty(g, p, o, s, rho)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn l1_basic_cases() {
        let a = random(&[2, 3, 4, 4], 1);
        assert_eq!(l1_value(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((l1_value(&b, &a).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            l1_value(&a, &Tensor::zeros(&[1, 3, 4, 4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn l1_matches_loop() {
        let a = random(&[1, 3, 5, 7], 2);
        let b = random(&[1, 3, 5, 7], 3);
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a.data()[i] - b.data()[i]).abs();
        }
        assert!((l1_value(&a, &b).unwrap() - acc / a.len() as f64).abs() <= 1e-12);
    }

    #[test]
    fn objective_is_l1() {
        let a = random(&[1, 3, 4, 4], 4);
        let b = random(&[1, 3, 4, 4], 5);
        let mut g = Graph::new();
        let (na, nb) = (g.constant(a.clone()), g.constant(b.clone()));
        let lo = loss_objective(&mut g, na, nb).unwrap();
        assert_eq!(g.value(lo).item(), l1_value(&a, &b).unwrap());
    }

    #[test]
    fn adversarial_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 1]));
        let gen = adversarial_gen_loss(&mut g, z);
        assert!((g.value(gen).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let d = adversarial_disc_loss(&mut g, z, z).unwrap();
        assert!((g.value(d).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for logit in [-5.0, -1.0, 0.0, 1.0, 5.0, 20.0, 60.0] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::full(&[1, 1], logit));
            let l = adversarial_gen_loss(&mut g, z);
            let v = g.value(l).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn penalty_cases() {
        let one = |v: f64| Tensor::full(&[1, 1, 1, 1], v);
        assert_eq!(admm_penalty_value(&one(0.3), &one(0.3), &one(0.0), 2.0).unwrap(), 0.0);
        assert!((admm_penalty_value(&one(1.0), &one(0.0), &one(0.5), 2.0).unwrap() - 2.25).abs() < 1e-15);
        assert!(admm_penalty_value(&one(1.0), &one(0.0), &one(0.5), -1.0).is_err());
    }

    #[test]
    fn penalty_quadruples_when_gap_doubles() {
        let p = random(&[2, 3, 4, 4], 6);
        let o = random(&[2, 3, 4, 4], 7);
        let z = Tensor::zeros(p.shape());
        let gap = p.sub(&o).unwrap();
        let p2 = o.add(&gap.scale(2.0)).unwrap();
        let one = admm_penalty_value(&gap, &z, &z, 0.7).unwrap();
        let two = admm_penalty_value(&gap.scale(2.0), &z, &z, 0.7).unwrap();
        assert_eq!(two, 4.0 * one);
        let via = admm_penalty_value(&p2, &o, &z, 0.7).unwrap();
        assert!((via - 4.0 * admm_penalty_value(&p, &o, &z, 0.7).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn band_extractor_shapes() {
        let x = random(&[2, 3, 8, 8], 8);
        for e in [BandExtractor::HaarLow, BandExtractor::HaarHigh, BandExtractor::GAUSSIAN_ABLATION] {
            assert_eq!(e.extract(&x).unwrap().shape(), e.output_shape(x.shape()).as_slice());
        }
        assert_eq!(
            BandExtractor::HaarLow.extract(&x).unwrap(),
            crate::wavelet::t_lf(&x).unwrap()
        );
    }
}
