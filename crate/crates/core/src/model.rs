//! The two generator architectures and the discriminator.
//!
//! * upsampler (`forward_go`): conv head, residual blocks, `log2(scale)`
//!   conv + pixel-shuffle ×2 stages, conv tail.
//! * refiner (`forward_gp`): Haar DWT to 12 channels, conv head, residual
//!   blocks, projection back to 12 channels, inverse DWT, plus a global skip
//!   from its input.
//! * discriminator (`forward_disc`): strided conv stack, global average pool,
//!   affine head producing one logit per sample.
//!
//! The second conv of every residual block and the refiner's projection start
//! at zero, so a fresh refiner is exactly the identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, NodeId, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub go_blocks: usize,
    pub gp_blocks: usize,
    pub channels: usize,
    pub scale: usize,
    pub disc_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            go_blocks: 4,
            gp_blocks: 4,
            channels: 32,
            scale: 4,
            disc_channels: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        if self.go_blocks == 0 || self.gp_blocks == 0 {
            return Err(Error::Config("go_blocks and gp_blocks must be >= 1".into()));
        }
        if self.channels < 4 || self.disc_channels < 1 {
            return Err(Error::Config("channels must be >= 4 and disc_channels >= 1".into()));
        }
        Ok(())
    }

    /// Number of ×2 upsampling stages, also the Haar depth of the loss
    /// downsampler.
    pub fn levels(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    /// Closed-form parameter counts `(upsampler, refiner, discriminator)`.
    pub fn param_counts(&self) -> (usize, usize, usize) {
        let conv = |i: usize, o: usize| o * i * 9 + o;
        let c = self.channels;
        let block = 2 * conv(c, c);
        let go = conv(3, c) + self.go_blocks * block + self.levels() * conv(c, 4 * c) + conv(c, 3);
        let gp = conv(12, c) + self.gp_blocks * block + conv(c, 12);
        let d = self.disc_channels;
        let disc = conv(3, d) + conv(d, d) + conv(d, 2 * d) + conv(2 * d, 2 * d) + (2 * d + 1);
        (go, gp, disc)
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, p: &mut ParameterSet, name: &str, cin: usize, cout: usize, zero: bool) -> Result<()> {
        let fan_in = (cin * 9) as f64;
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("finite std");
        let w = if zero {
            Tensor::zeros(&[cout, cin, 3, 3])
        } else {
            Tensor::from_fn(&[cout, cin, 3, 3], |_| normal.sample(&mut self.rng))
        };
        p.insert(format!("{name}.w"), w)?;
        p.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
    }

    fn blocks(&mut self, p: &mut ParameterSet, count: usize, c: usize) -> Result<()> {
        for i in 0..count {
            self.conv(p, &format!("block{i:02}.conv1"), c, c, false)?;
            self.conv(p, &format!("block{i:02}.conv2"), c, c, true)?;
        }
        Ok(())
    }
}

/// Parameters of all three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub go: ParameterSet,
    pub gp: ParameterSet,
    pub disc: ParameterSet,
}

impl Model {
    /// Seeded initialization; each network draws from its own stream.
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let c = config.channels;
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(k);
            Init { rng }
        };

        let mut go = ParameterSet::new();
        let mut init = stream(1);
        init.conv(&mut go, "head", 3, c, false)?;
        init.blocks(&mut go, config.go_blocks, c)?;
        for i in 0..config.levels() {
            init.conv(&mut go, &format!("up{i}"), c, 4 * c, false)?;
        }
        init.conv(&mut go, "tail", c, 3, false)?;

        let mut gp = ParameterSet::new();
        let mut init = stream(2);
        init.conv(&mut gp, "head", 12, c, false)?;
        init.blocks(&mut gp, config.gp_blocks, c)?;
        init.conv(&mut gp, "proj", c, 12, true)?;

        let mut disc = ParameterSet::new();
        let mut init = stream(3);
        let d = config.disc_channels;
        init.conv(&mut disc, "conv0", 3, d, false)?;
        init.conv(&mut disc, "conv1", d, d, false)?;
        init.conv(&mut disc, "conv2", d, 2 * d, false)?;
        init.conv(&mut disc, "conv3", 2 * d, 2 * d, false)?;
        let fc = Normal::new(0.0, (2.0 * d as f64).sqrt().recip()).expect("finite std");
        disc.insert("fc.w", Tensor::from_fn(&[1, 2 * d], |_| fc.sample(&mut init.rng)))?;
        disc.insert("fc.b", Tensor::zeros(&[1]))?;

        Ok(Model { config, go, gp, disc })
    }

    /// Upsampler output for a batch, without recording gradients.
    pub fn upsample(&self, x: &Tensor) -> Result<Tensor> {
        run(&self.go, x, |g, x, b| forward_go(g, x, b, &self.config))
    }

    pub fn refine(&self, y_prime: &Tensor) -> Result<Tensor> {
        run(&self.gp, y_prime, |g, x, b| forward_gp(g, x, b, &self.config))
    }

    pub fn discriminate(&self, y: &Tensor) -> Result<Tensor> {
        run(&self.disc, y, |g, x, b| forward_disc(g, x, b, &self.config))
    }

    /// Both stage outputs `(Y', Y)` of the O-P ordering.
    pub fn super_resolve(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let yp = self.upsample(x)?;
        let y = self.refine(&yp)?;
        Ok((yp, y))
    }
}

fn run(
    params: &ParameterSet,
    x: &Tensor,
    f: impl FnOnce(&mut Graph, NodeId, &Bound) -> Result<NodeId>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let xn = g.constant(x.clone());
    let out = f(&mut g, xn, &bound)?;
    Ok(g.value(out).clone())
}

fn conv(g: &mut Graph, x: NodeId, b: &Bound, name: &str, stride: usize) -> Result<NodeId> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(bias), stride, 1)
}

fn residual_blocks(g: &mut Graph, mut h: NodeId, b: &Bound, count: usize) -> Result<NodeId> {
    for i in 0..count {
        let r = conv(g, h, b, &format!("block{i:02}.conv1"), 1)?;
        let r = g.leaky_relu(r, LEAKY_SLOPE)?;
        let r = conv(g, r, b, &format!("block{i:02}.conv2"), 1)?;
        h = g.add(h, r)?;
    }
    Ok(h)
}

fn expect_rgb(g: &Graph, x: NodeId, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let dims = g.value(x).dims4(op)?;
    if dims.1 != 3 {
        return Err(Error::dim(op, format!("expected 3 channels on axis 1, got {}", dims.1)));
    }
    Ok(dims)
}

/// `[N,3,h,w] -> [N,3,h*scale,w*scale]`.
pub fn forward_go(g: &mut Graph, x: NodeId, b: &Bound, cfg: &ModelConfig) -> Result<NodeId> {
    expect_rgb(g, x, "forward_go")?;
    let mut h = conv(g, x, b, "head", 1)?;
    h = residual_blocks(g, h, b, cfg.go_blocks)?;
    for i in 0..cfg.levels() {
        h = conv(g, h, b, &format!("up{i}"), 1)?;
        h = g.pixel_shuffle(h, 2)?;
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
    }
    conv(g, h, b, "tail", 1)
}

/// `[N,3,H,W] -> [N,3,H,W]`, `H` and `W` even.
pub fn forward_gp(g: &mut Graph, y_prime: NodeId, b: &Bound, cfg: &ModelConfig) -> Result<NodeId> {
    expect_rgb(g, y_prime, "forward_gp")?;
    let bands = g.haar_dwt(y_prime)?;
    let mut h = conv(g, bands, b, "head", 1)?;
    h = residual_blocks(g, h, b, cfg.gp_blocks)?;
    let p = conv(g, h, b, "proj", 1)?;
    let detail = g.haar_idwt(p)?;
    g.add(y_prime, detail)
}

/// `[N,3,H,W] -> [N,1]` raw logits; `H, W >= 16`.
pub fn forward_disc(g: &mut Graph, y: NodeId, b: &Bound, _cfg: &ModelConfig) -> Result<NodeId> {
    let (_, _, h, w) = expect_rgb(g, y, "forward_disc")?;
    if h < 16 || w < 16 {
        return Err(Error::dim("forward_disc", format!("input {h}x{w} is smaller than 16x16")));
    }
    let mut x = y;
    for (i, stride) in [1, 2, 2, 2].into_iter().enumerate() {
        x = conv(g, x, b, &format!("conv{i}"), stride)?;
        x = g.leaky_relu(x, LEAKY_SLOPE)?;
    }
    let pooled = g.global_avg_pool(x)?;
    let (w, bias) = (b.get("fc.w")?, b.get("fc.b")?);
    g.linear(pooled, w, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            go_blocks: 1,
            gp_blocks: 2,
            channels: 4,
            scale: 4,
            disc_channels: 2,
            seed: 3,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn zeroed(p: &ParameterSet) -> ParameterSet {
        let mut out = p.clone();
        for (_, t) in out.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        out
    }

    #[test]
    fn upsampler_shape_and_zero_weights() {
        let mut m = Model::init(small()).unwrap();
        let x = random(&[1, 3, 16, 16], 1);
        assert_eq!(m.upsample(&x).unwrap().shape(), &[1, 3, 64, 64]);
        m.go = zeroed(&m.go);
        assert!(m.upsample(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refiner_is_identity_at_init() {
        let m = Model::init(small()).unwrap();
        let y = random(&[2, 3, 8, 12], 2);
        assert_eq!(m.refine(&y).unwrap(), y);
        assert!(m.refine(&random(&[1, 3, 7, 8], 3)).is_err());
    }

    #[test]
    fn discriminator_contract() {
        let mut m = Model::init(small()).unwrap();
        let y = random(&[3, 3, 16, 20], 4);
        let z = m.discriminate(&y).unwrap();
        assert_eq!(z.shape(), &[3, 1]);
        assert!(z.data().iter().all(|&v| {
            let s = crate::autodiff::sigmoid(v);
            s > 0.0 && s < 1.0
        }));
        assert!(matches!(
            m.discriminate(&random(&[1, 3, 8, 16], 5)),
            Err(Error::Dimension { .. })
        ));
        m.disc = zeroed(&m.disc);
        assert!(m.discriminate(&y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for scale in [2, 4] {
            let cfg = ModelConfig { scale, ..ModelConfig::default() };
            let m = Model::init(cfg).unwrap();
            assert_eq!(cfg.param_counts(), (m.go.numel(), m.gp.numel(), m.disc.numel()));
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(Model::init(small()).unwrap(), Model::init(small()).unwrap());
        let other = Model::init(ModelConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(Model::init(small()).unwrap().go, other.go);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { scale: 3, ..small() }.validate().is_err());
        assert!(ModelConfig { go_blocks: 0, ..small() }.validate().is_err());
        assert!(ModelConfig { channels: 3, ..small() }.validate().is_err());
    }
}
