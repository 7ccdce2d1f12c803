use pdsr::autodiff::{finite_diff_check, finite_diff_check_sampled, Bound, Graph, NodeId, ParameterSet};
use pdsr::losses::{self, BandExtractor, CxConfig, LossWeights};
use pdsr::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn params(entries: &[(&str, Tensor)]) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (name, t) in entries {
        p.insert(*name, t.clone()).unwrap();
    }
    p
}

/// Reduces a node to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn probe(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let r = g.constant(random(g.value(out).shape(), seed));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn check(p: &ParameterSet, f: impl Fn(&mut Graph, &Bound) -> Result<NodeId>) -> f64 {
    finite_diff_check(f, p, STEP).unwrap()
}

#[test]
fn conv2d_with_bias_stride_and_padding() {
    let p = params(&[
        ("x", random(&[2, 2, 5, 6], 1)),
        ("w", random(&[3, 2, 3, 3], 2)),
        ("b", random(&[3], 3)),
    ]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let err = check(&p, |g, b| {
            let out = g.conv2d(b.get("x")?, b.get("w")?, Some(b.get("b")?), stride, pad)?;
            probe(g, out, 9)
        });
        assert!(err < TOL, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn elementwise_ops() {
    let p = params(&[("a", random(&[1, 2, 3, 4], 4)), ("b", random(&[1, 2, 3, 4], 5))]);
    let err = check(&p, |g, b| {
        let (x, y) = (b.get("a")?, b.get("b")?);
        let s = g.add(x, y)?;
        let d = g.sub(s, y)?;
        let m = g.mul(d, y)?;
        let l = g.leaky_relu(m, 0.2)?;
        let k = g.scale(l, -1.5);
        let a = g.abs(k);
        let mean = g.mean(a);
        let other = probe(g, m, 6)?;
        g.add(mean, other)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn structural_ops() {
    let p = params(&[("x", random(&[2, 8, 4, 6], 7))]);
    let err = check(&p, |g, b| {
        let x = b.get("x")?;
        let up = g.pixel_shuffle(x, 2)?;
        let packed = g.haar_dwt(up)?;
        let ll = g.narrow_channels(packed, 0, 2)?;
        let rest = g.narrow_channels(packed, 2, 6)?;
        let both = g.concat_channels(&[rest, ll])?;
        let back = g.haar_idwt(both)?;
        let flat = g.reshape(back, &[2, 2 * 8 * 12])?;
        probe(g, flat, 8)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gaussian_blur_with_reflect_padding() {
    let p = params(&[("x", random(&[1, 2, 7, 9], 10))]);
    let err = check(&p, |g, b| {
        let y = g.gaussian_blur(b.get("x")?, 5, 1.2)?;
        probe(g, y, 11)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn pooling_linear_and_bce() {
    let p = params(&[
        ("x", random(&[3, 4, 2, 3], 12)),
        ("w", random(&[2, 4], 13)),
        ("b", random(&[2], 14)),
    ]);
    for target in [0.0, 1.0] {
        let err = check(&p, |g, b| {
            let pooled = g.global_avg_pool(b.get("x")?)?;
            let z = g.linear(pooled, b.get("w")?, b.get("b")?)?;
            let z = g.scale(z, 4.0);
            Ok(g.bce_with_logits(z, target))
        });
        assert!(err < TOL, "target {target}: {err}");
    }
}

#[test]
fn contextual_loss_adjoint() {
    let cfg = CxConfig {
        feature_dim: 6,
        patch_size: 3,
        patch_stride: 2,
        ..CxConfig::default()
    };
    let target = random(&[2, 3, 8, 8], 15).map(|v| 0.5 + 0.4 * v);
    let p = params(&[("y", random(&[2, 3, 8, 8], 16).map(|v| 0.5 + 0.4 * v))]);
    let err = check(&p, |g, b| losses::contextual_loss(g, b.get("y")?, &target, &cfg));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn perceptual_and_regularized_objectives() {
    let cfg = CxConfig {
        feature_dim: 5,
        patch_size: 3,
        patch_stride: 2,
        ..CxConfig::default()
    };
    let w = LossWeights {
        lambda_r: 0.7,
        ..LossWeights::default()
    };
    let y_hat = random(&[1, 3, 8, 8], 17);
    let p = params(&[
        ("y", random(&[1, 3, 8, 8], 18)),
        ("yp", random(&[1, 3, 8, 8], 19)),
        ("z", random(&[1, 1], 20)),
    ]);
    for extractor in [BandExtractor::HaarLow, BandExtractor::HaarHigh, BandExtractor::GAUSSIAN_ABLATION] {
        let err = finite_diff_check_sampled(
            |g, b| {
                let t = g.constant(y_hat.clone());
                let terms = losses::regularized_total_loss(
                    g,
                    b.get("y")?,
                    b.get("yp")?,
                    t,
                    b.get("z")?,
                    &w,
                    &cfg,
                    1,
                    extractor,
                )?;
                Ok(terms.total)
            },
            &p,
            STEP,
            40,
            21,
        )
        .unwrap();
        assert!(err < 1e-4, "{extractor:?}: {err}");
    }
}

#[test]
fn penalty_gradient_matches_closed_form() {
    let (lp, lo, s) = (random(&[2, 3, 4, 4], 22), random(&[2, 3, 4, 4], 23), random(&[2, 3, 4, 4], 24));
    let rho = 0.3;
    let mut g = Graph::new();
    let np = g.variable(lp.clone());
    let (no, ns) = (g.constant(lo.clone()), g.constant(s.clone()));
    let pen = losses::admm_penalty(&mut g, np, no, ns, rho).unwrap();
    g.backward(pen).unwrap();
    let expected = lp.sub(&lo).unwrap().add(&s).unwrap().scale(rho / 2.0);
    assert!(g.grad(np).unwrap().max_abs_diff(&expected).unwrap() < 1e-12);
}

#[test]
fn check_flags_a_wrong_gradient() {
    // d/dx (x * detach(x)) is reported as x; the true derivative is 2x
    let p = params(&[("x", random(&[2, 3], 25))]);
    let err = check(&p, |g, b| {
        let x = b.get("x")?;
        let frozen = g.detach(x);
        let y = g.mul(x, frozen)?;
        Ok(g.sum(y))
    });
    assert!(err > 0.3, "{err}");
}
