//! Two-phase training.
//!
//! Phase 1 pretrains both stages jointly with L1. Phase 2 runs either
//! scaled-form ADMM, alternating
//!
//! ```text
//! theta_P <- step on  L_P + (rho/2)|LF_P - LF_O + s|^2     (LF_O fixed)
//! theta_O <- step on  L_O + (rho/2)|LF_P - LF_O + s|^2     (LF_P fixed)
//! s       <- s + LF_P - LF_O                               (per sample)
//! ```
//!
//! or the L1-regularized joint objective as a baseline. Every completed
//! epoch or round can be checkpointed and resumed bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::PatchPair;
use crate::error::{Error, Result};
use crate::losses::{self, BandExtractor, CxConfig, LossWeights};
use crate::metrics;
use crate::model::{self, Model};
use crate::optim::{adam_step, AdamState};
use crate::tensor::Tensor;
use crate::wavelet;

/// Piecewise-constant learning rate: the rate of the last `(unit, lr)` entry
/// whose unit is `<=` the current epoch or round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule(vec![(0, lr)])
    }

    /// `base` multiplied by `factor` after each milestone, where milestones
    /// are fractions of `total` rounded to the nearest unit.
    pub fn decayed(base: f64, factor: f64, fractions: &[f64], total: usize) -> Self {
        let mut out = vec![(0, base)];
        let mut lr = base;
        for f in fractions {
            lr *= factor;
            out.push(((f * total as f64).round() as usize, lr));
        }
        LrSchedule(out)
    }

    pub fn at(&self, unit: usize) -> f64 {
        self.0
            .iter()
            .rfind(|(u, _)| *u <= unit)
            .map(|(_, lr)| *lr)
            .unwrap_or(f64::NAN)
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = self.0.first().is_some_and(|(u, _)| *u == 0)
            && self.0.windows(2).all(|w| w[0].0 < w[1].0)
            && self.0.iter().all(|(_, lr)| *lr > 0.0 && lr.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{name} must start at unit 0, increase strictly and hold positive rates"
            )))
        }
    }
}

/// Which stage comes first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageOrder {
    /// Objective stage upsamples, perceptual stage refines.
    #[default]
    #[serde(rename = "o-p")]
    ObjectiveFirst,
    /// Perceptual stage upsamples, objective stage refines.
    #[serde(rename = "p-o")]
    PerceptualFirst,
}

impl StageOrder {
    pub fn label(self) -> &'static str {
        match self {
            StageOrder::ObjectiveFirst => "o-p",
            StageOrder::PerceptualFirst => "p-o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    pub rho: f64,
    pub inner_epochs_p: usize,
    pub inner_epochs_o: usize,
    pub pretrain_epochs: usize,
    pub admm_rounds: usize,
    pub pretrain_lr: LrSchedule,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub extractor: BandExtractor,
    pub order: StageOrder,
    /// Any loss above this aborts the run.
    pub divergence_limit: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        let (pretrain, rounds) = (50, 30);
        AdmmConfig {
            rho: 1e-4,
            inner_epochs_p: 1,
            inner_epochs_o: 1,
            pretrain_epochs: pretrain,
            admm_rounds: rounds,
            pretrain_lr: LrSchedule::decayed(1e-4, 0.1, &[0.25, 0.5, 0.75], pretrain),
            lr: LrSchedule::decayed(5e-5, 0.125, &[0.1, 0.25, 0.35, 0.5, 0.7], rounds),
            batch_size: 16,
            seed: 0,
            extractor: BandExtractor::HaarLow,
            order: StageOrder::ObjectiveFirst,
            divergence_limit: 1e6,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("rho must be finite and >= 0, got {}", self.rho)));
        }
        if self.inner_epochs_p == 0 || self.inner_epochs_o == 0 {
            return Err(Error::Config("inner epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let BandExtractor::Gaussian { ksize, sigma } = self.extractor {
            wavelet::gaussian_taps(ksize, sigma).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.pretrain_lr.validate("pretrain_lr")?;
        self.lr.validate("lr")
    }
}

/// Everything a trainer needs besides data and model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub admm: AdmmConfig,
    pub weights: LossWeights,
    pub cx: CxConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.admm.validate()?;
        self.weights.validate()?;
        self.cx.validate()
    }
}

/// Scaled dual variable `s`, one tensor per training sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DualState {
    pub entries: BTreeMap<usize, Tensor>,
    pub round: u64,
}

impl DualState {
    /// Zeros shaped like the extracted band of each sample's HR patch.
    pub fn zeros(samples: &[PatchPair], extractor: BandExtractor) -> DualState {
        let entries = samples
            .iter()
            .map(|p| {
                let mut shape = vec![1];
                shape.extend_from_slice(p.hr.shape());
                let band = extractor.output_shape(&shape);
                (p.id, Tensor::zeros(&band[1..]))
            })
            .collect();
        DualState { entries, round: 0 }
    }

    /// `s` for the given samples stacked on a leading batch axis.
    pub fn gather(&self, ids: &[usize]) -> Result<Tensor> {
        let parts = ids
            .iter()
            .map(|id| {
                self.entries
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::State(format!("no dual entry for sample {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        batch_of(&parts)
    }

    /// `s_i += lf_p_i - lf_o_i` for every listed sample. Does not advance the
    /// round counter.
    pub fn accumulate(&mut self, ids: &[usize], lf_p: &Tensor, lf_o: &Tensor) -> Result<()> {
        lf_p.ensure_same_shape(lf_o, "dual_update")?;
        if lf_p.shape().first() != Some(&ids.len()) {
            return Err(Error::State(format!(
                "dual update for {} samples got batch shape {:?}",
                ids.len(),
                lf_p.shape()
            )));
        }
        for (k, id) in ids.iter().enumerate() {
            let (p, o) = (lf_p.batch_item(k)?, lf_o.batch_item(k)?);
            let s = self
                .entries
                .get_mut(id)
                .ok_or_else(|| Error::State(format!("no dual entry for sample {id}")))?;
            if p.shape()[1..] != *s.shape() {
                return Err(Error::State(format!(
                    "dual entry {id} has shape {:?}, update has {:?}",
                    s.shape(),
                    &p.shape()[1..]
                )));
            }
            for ((sv, pv), ov) in s.data_mut().iter_mut().zip(p.data()).zip(o.data()) {
                *sv += pv - ov;
            }
        }
        Ok(())
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.entries.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }
}

/// One full dual step over a set of samples: `s += lf_p - lf_o`, then the
/// round counter advances.
pub fn dual_update(
    dual: &mut DualState,
    lf_p_by_sample: &BTreeMap<usize, Tensor>,
    lf_o_by_sample: &BTreeMap<usize, Tensor>,
) -> Result<()> {
    for (id, p) in lf_p_by_sample {
        let o = lf_o_by_sample
            .get(id)
            .ok_or_else(|| Error::State(format!("no objective band for sample {id}")))?;
        let mut shape = vec![1];
        shape.extend_from_slice(p.shape());
        dual.accumulate(&[*id], &p.reshape(&shape)?, &o.reshape(&shape)?)?;
    }
    dual.round += 1;
    Ok(())
}

/// Adam state for each network, created on first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Optimizers {
    pub nets: BTreeMap<String, AdamState>,
}

impl Optimizers {
    fn get(&mut self, net: Net) -> &mut AdamState {
        self.nets.entry(net.key().to_string()).or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Net {
    Upsampler,
    Refiner,
    Disc,
}

impl Net {
    fn key(self) -> &'static str {
        match self {
            Net::Upsampler => "go",
            Net::Refiner => "gp",
            Net::Disc => "disc",
        }
    }

    fn params(self, m: &mut Model) -> &mut crate::autodiff::ParameterSet {
        match self {
            Net::Upsampler => &mut m.go,
            Net::Refiner => &mut m.gp,
            Net::Disc => &mut m.disc,
        }
    }
}

/// Stacks equally shaped tensors on a new leading axis.
fn batch_of(parts: &[Tensor]) -> Result<Tensor> {
    let lifted = parts
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&lifted)
}

/// A minibatch: sample ids with stacked LR inputs and HR targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub lr: Tensor,
    pub hr: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&PatchPair]) -> Result<Batch> {
        let stack = |f: fn(&PatchPair) -> &Tensor| {
            let parts: Vec<Tensor> = samples.iter().map(|p| f(p).clone()).collect();
            batch_of(&parts)
        };
        Ok(Batch {
            ids: samples.iter().map(|p| p.id).collect(),
            lr: stack(|p| &p.lr)?,
            hr: stack(|p| &p.hr)?,
        })
    }
}

/// Loss values of one optimizer step; terms a step does not compute are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub loss_o: f64,
    pub loss_cx: f64,
    pub loss_d: f64,
    pub loss_gen: f64,
    pub loss_disc: f64,
    pub penalty: f64,
    pub total: f64,
}

fn guard(value: f64, limit: f64, what: &str) -> Result<()> {
    if value.is_finite() && value.abs() <= limit {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} = {value}")))
    }
}

fn stage(g: &mut Graph, net: Net, x: NodeId, b: &crate::autodiff::Bound, m: &Model) -> Result<NodeId> {
    match net {
        Net::Upsampler => model::forward_go(g, x, b, &m.config),
        _ => model::forward_gp(g, x, b, &m.config),
    }
}

fn roles(order: StageOrder) -> (Net, Net) {
    match order {
        StageOrder::ObjectiveFirst => (Net::Refiner, Net::Upsampler),
        StageOrder::PerceptualFirst => (Net::Upsampler, Net::Refiner),
    }
}

/// One discriminator step on real targets against detached generator output.
fn disc_step(m: &mut Model, opt: &mut Optimizers, real: &Tensor, fake: &Tensor, lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let b = m.disc.bind(&mut g);
    let (rn, fnode) = (g.constant(real.clone()), g.constant(fake.clone()));
    let zr = model::forward_disc(&mut g, rn, &b, &m.config)?;
    let zf = model::forward_disc(&mut g, fnode, &b, &m.config)?;
    let loss = losses::adversarial_disc_loss(&mut g, zr, zf)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    adam_step(&mut m.disc, &b.grads(&g), opt.get(Net::Disc), lr)?;
    Ok(value)
}

/// Perceptual-stage update. With `dual = None` the penalty is left out
/// entirely, which is the unconstrained perceptual step.
pub fn admm_step_p(
    batch: &Batch,
    m: &mut Model,
    opt: &mut Optimizers,
    dual: Option<&DualState>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepLosses> {
    let (p_net, _) = roles(cfg.admm.order);
    let extractor = cfg.admm.extractor;
    let mut g = Graph::new();
    let bound = p_net.params(m).bind(&mut g);
    let disc = m.disc.bind_frozen(&mut g);
    let y_hat = g.constant(batch.hr.clone());

    let (y, lf_o) = match cfg.admm.order {
        StageOrder::ObjectiveFirst => {
            let y_prime = m.upsample(&batch.lr)?;
            let lf_o = extractor.extract(&y_prime)?;
            let yp = g.constant(y_prime);
            (stage(&mut g, p_net, yp, &bound, m)?, lf_o)
        }
        StageOrder::PerceptualFirst => {
            let x = g.constant(batch.lr.clone());
            let y = stage(&mut g, p_net, x, &bound, m)?;
            let y_obj = m.refine(g.value(y))?;
            (y, extractor.extract(&y_obj)?)
        }
    };
    let logit = model::forward_disc(&mut g, y, &disc, &m.config)?;
    let terms = losses::loss_perceptual(&mut g, y, y_hat, logit, &cfg.weights, &cfg.cx, m.config.levels())?;
    let mut total = terms.total;
    let mut penalty = 0.0;
    if let Some(dual) = dual {
        let s = g.constant(dual.gather(&batch.ids)?);
        let lf_p = extractor.apply(&mut g, y)?;
        let lf_o = g.constant(lf_o);
        let pen = losses::admm_penalty(&mut g, lf_p, lf_o, s, cfg.admm.rho)?;
        penalty = g.value(pen).item();
        total = g.add(total, pen)?;
    }
    let value = g.value(total).item();
    guard(value, cfg.admm.divergence_limit, "perceptual loss")?;
    g.backward(total)?;
    adam_step(p_net.params(m), &bound.grads(&g), opt.get(p_net), lr)?;

    let fake = g.value(y).clone();
    let loss_disc = disc_step(m, opt, &batch.hr, &fake, lr)?;
    guard(loss_disc, cfg.admm.divergence_limit, "discriminator loss")?;
    Ok(StepLosses {
        loss_cx: g.value(terms.cx).item(),
        loss_d: g.value(terms.d).item(),
        loss_gen: g.value(terms.gen).item(),
        loss_disc,
        penalty,
        total: value,
        ..StepLosses::default()
    })
}

/// Objective-stage update; `dual = None` drops the penalty.
pub fn admm_step_o(
    batch: &Batch,
    m: &mut Model,
    opt: &mut Optimizers,
    dual: Option<&DualState>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepLosses> {
    let (_, o_net) = roles(cfg.admm.order);
    let extractor = cfg.admm.extractor;
    let mut g = Graph::new();
    let bound = o_net.params(m).bind(&mut g);
    let y_hat = g.constant(batch.hr.clone());

    let (y_obj, lf_p) = match cfg.admm.order {
        StageOrder::ObjectiveFirst => {
            let x = g.constant(batch.lr.clone());
            let yp = stage(&mut g, o_net, x, &bound, m)?;
            let y = if dual.is_some() {
                Some(extractor.extract(&m.refine(g.value(yp))?)?)
            } else {
                None
            };
            (yp, y)
        }
        StageOrder::PerceptualFirst => {
            let y_prime = m.upsample(&batch.lr)?;
            let lf_p = extractor.extract(&y_prime)?;
            let yp = g.constant(y_prime);
            (stage(&mut g, o_net, yp, &bound, m)?, Some(lf_p))
        }
    };
    let loss_o = losses::loss_objective(&mut g, y_obj, y_hat)?;
    let mut total = loss_o;
    let mut penalty = 0.0;
    if let (Some(dual), Some(lf_p)) = (dual, lf_p) {
        let s = g.constant(dual.gather(&batch.ids)?);
        let lf_o = extractor.apply(&mut g, y_obj)?;
        let lf_p = g.constant(lf_p);
        let pen = losses::admm_penalty(&mut g, lf_p, lf_o, s, cfg.admm.rho)?;
        penalty = g.value(pen).item();
        total = g.add(total, pen)?;
    }
    let value = g.value(total).item();
    guard(value, cfg.admm.divergence_limit, "objective loss")?;
    g.backward(total)?;
    adam_step(o_net.params(m), &bound.grads(&g), opt.get(o_net), lr)?;
    Ok(StepLosses {
        loss_o: g.value(loss_o).item(),
        penalty,
        total: value,
        ..StepLosses::default()
    })
}

/// Joint step on the L1-regularized objective; gradients cross the stage
/// boundary.
pub fn regularized_step(batch: &Batch, m: &mut Model, opt: &mut Optimizers, cfg: &TrainConfig, lr: f64) -> Result<StepLosses> {
    let mut g = Graph::new();
    let bu = m.go.bind(&mut g);
    let br = m.gp.bind(&mut g);
    let disc = m.disc.bind_frozen(&mut g);
    let x = g.constant(batch.lr.clone());
    let y_hat = g.constant(batch.hr.clone());
    let first = model::forward_go(&mut g, x, &bu, &m.config)?;
    let second = model::forward_gp(&mut g, first, &br, &m.config)?;
    let (y_p, y_o) = match cfg.admm.order {
        StageOrder::ObjectiveFirst => (second, first),
        StageOrder::PerceptualFirst => (first, second),
    };
    let logit = model::forward_disc(&mut g, y_p, &disc, &m.config)?;
    let terms = losses::regularized_total_loss(
        &mut g,
        y_p,
        y_o,
        y_hat,
        logit,
        &cfg.weights,
        &cfg.cx,
        m.config.levels(),
        cfg.admm.extractor,
    )?;
    let value = g.value(terms.total).item();
    guard(value, cfg.admm.divergence_limit, "regularized loss")?;
    g.backward(terms.total)?;
    adam_step(&mut m.go, &bu.grads(&g), opt.get(Net::Upsampler), lr)?;
    adam_step(&mut m.gp, &br.grads(&g), opt.get(Net::Refiner), lr)?;
    let fake = g.value(y_p).clone();
    let loss_disc = disc_step(m, opt, &batch.hr, &fake, lr)?;
    guard(loss_disc, cfg.admm.divergence_limit, "discriminator loss")?;
    Ok(StepLosses {
        loss_o: g.value(terms.objective).item(),
        loss_cx: g.value(terms.perceptual.cx).item(),
        loss_d: g.value(terms.perceptual.d).item(),
        loss_gen: g.value(terms.perceptual.gen).item(),
        loss_disc,
        penalty: g.value(terms.regularizer).item(),
        total: value,
    })
}

/// Joint L1 pretraining step: `L1(Y', Y_hat) + L1(Y, Y_hat)`.
pub fn pretrain_step(batch: &Batch, m: &mut Model, opt: &mut Optimizers, cfg: &TrainConfig, lr: f64) -> Result<StepLosses> {
    let mut g = Graph::new();
    let bu = m.go.bind(&mut g);
    let br = m.gp.bind(&mut g);
    let x = g.constant(batch.lr.clone());
    let y_hat = g.constant(batch.hr.clone());
    let first = model::forward_go(&mut g, x, &bu, &m.config)?;
    let second = model::forward_gp(&mut g, first, &br, &m.config)?;
    let l1 = losses::l1_loss(&mut g, first, y_hat)?;
    let l2 = losses::l1_loss(&mut g, second, y_hat)?;
    let total = g.add(l1, l2)?;
    let value = g.value(total).item();
    guard(value, cfg.admm.divergence_limit, "pretraining loss")?;
    g.backward(total)?;
    adam_step(&mut m.go, &bu.grads(&g), opt.get(Net::Upsampler), lr)?;
    adam_step(&mut m.gp, &br.grads(&g), opt.get(Net::Refiner), lr)?;
    Ok(StepLosses {
        loss_o: g.value(l1).item(),
        total: value,
        ..StepLosses::default()
    })
}

/// One row per phase-2 round; round 0 is the state right after pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub round: usize,
    pub loss_o: f64,
    pub loss_cx: f64,
    pub loss_d: f64,
    pub loss_gen: f64,
    pub penalty: f64,
    pub primal_residual_l1: f64,
    pub dual_norm: f64,
    pub psnr_val: f64,
    pub lf_mae_val: f64,
    pub lf_mae_gaussian_val: Option<f64>,
}

const REPORT_COLUMNS: [&str; 10] = [
    "round",
    "loss_o",
    "loss_cx",
    "loss_d",
    "loss_gen",
    "penalty",
    "primal_residual_l1",
    "dual_norm",
    "psnr_val",
    "lf_mae_val",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub rows: Vec<ReportRow>,
}

impl TrainingReport {
    fn has_gaussian(&self) -> bool {
        self.rows.iter().any(|r| r.lf_mae_gaussian_val.is_some())
    }

    pub fn to_csv(&self) -> String {
        let gauss = self.has_gaussian();
        let mut s = REPORT_COLUMNS.join(",");
        if gauss {
            s.push_str(",lf_mae_gaussian_val");
        }
        s.push('\n');
        for r in &self.rows {
            write!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.loss_o,
                r.loss_cx,
                r.loss_d,
                r.loss_gen,
                r.penalty,
                r.primal_residual_l1,
                r.dual_norm,
                r.psnr_val,
                r.lf_mae_val
            )
            .expect("string write");
            if gauss {
                write!(s, ",{}", r.lf_mae_gaussian_val.unwrap_or(f64::NAN)).expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&ReportRow> {
        self.rows.last()
    }

    fn to_tensor(&self) -> Tensor {
        let rows: Vec<f64> = self
            .rows
            .iter()
            .flat_map(|r| {
                [
                    r.round as f64,
                    r.loss_o,
                    r.loss_cx,
                    r.loss_d,
                    r.loss_gen,
                    r.penalty,
                    r.primal_residual_l1,
                    r.dual_norm,
                    r.psnr_val,
                    r.lf_mae_val,
                    r.lf_mae_gaussian_val.unwrap_or(f64::NAN),
                    f64::from(u8::from(r.lf_mae_gaussian_val.is_some())),
                ]
            })
            .collect();
        Tensor::new(&[self.rows.len(), 12], rows).expect("row width")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [_, 12] => {}
            [0] => return Ok(TrainingReport::default()),
            ref s => return Err(Error::Format(format!("report entry has shape {s:?}"))),
        }
        let rows = t
            .data()
            .chunks_exact(12)
            .map(|c| ReportRow {
                round: c[0] as usize,
                loss_o: c[1],
                loss_cx: c[2],
                loss_d: c[3],
                loss_gen: c[4],
                penalty: c[5],
                primal_residual_l1: c[6],
                dual_norm: c[7],
                psnr_val: c[8],
                lf_mae_val: c[9],
                lf_mae_gaussian_val: (c[11] != 0.0).then_some(c[10]),
            })
            .collect();
        Ok(TrainingReport { rows })
    }
}

/// Phase-2 algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Scaled-form ADMM with the stage constraint.
    PdAdmm,
    /// Joint training on the L1-regularized objective (`lambda_r` from the
    /// loss weights).
    Baseline,
    /// The ADMM alternation without penalty or dual.
    Alternating,
}

impl TrainMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::PdAdmm => "pdadmm",
            TrainMode::Baseline => "baseline",
            TrainMode::Alternating => "alternating",
        }
    }
}

/// Mutable training state; converts to and from [`Checkpoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optim: Optimizers,
    pub dual: Option<DualState>,
    pub rng: ChaCha8Rng,
    /// Completed pretraining epochs plus completed rounds.
    pub progress: u64,
    pub report: TrainingReport,
}

fn phase_rng(seed: u64, phase: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase);
    rng
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        TrainState {
            model,
            optim: Optimizers::default(),
            dual: None,
            rng: phase_rng(cfg.admm.seed, 1),
            progress: 0,
            report: TrainingReport::default(),
        }
    }

    pub fn to_checkpoint(&self, tag: &str) -> Checkpoint {
        let mut extra = BTreeMap::new();
        extra.insert("report".to_string(), self.report.to_tensor());
        Checkpoint {
            tag: tag.to_string(),
            model: self.model.clone(),
            optim: self.optim.nets.clone(),
            dual: self.dual.clone(),
            rng: RngState::capture(&self.rng),
            progress: self.progress,
            extra,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let report = match ckpt.extra.get("report") {
            Some(t) => TrainingReport::from_tensor(t)?,
            None => TrainingReport::default(),
        };
        Ok(TrainState {
            model: ckpt.model,
            optim: Optimizers { nets: ckpt.optim },
            dual: ckpt.dual,
            rng: ckpt.rng.restore(),
            progress: ckpt.progress,
            report,
        })
    }
}

pub fn run_tag(mode: TrainMode, order: StageOrder) -> String {
    format!("{}:{}", mode.label(), order.label())
}

/// Drives a run unit by unit.
pub struct Trainer<'a> {
    train: &'a [PatchPair],
    val: &'a [PatchPair],
    cfg: TrainConfig,
    mode: TrainMode,
    pub state: TrainState,
    checkpoint: Option<PathBuf>,
    stop_after: Option<u64>,
}

/// Result of a finished (or stopped) run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainingReport,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a [PatchPair], val: &'a [PatchPair], model: Model, cfg: TrainConfig, mode: TrainMode) -> Result<Self> {
        cfg.validate()?;
        model.config.validate()?;
        if train.is_empty() {
            return Err(Error::contract("train", "training set is empty"));
        }
        for (i, p) in train.iter().enumerate() {
            if p.id != i {
                return Err(Error::contract("train", "training sample ids must be dense from 0"));
            }
        }
        let state = TrainState::new(model, &cfg);
        Ok(Trainer {
            train,
            val,
            cfg,
            mode,
            state,
            checkpoint: None,
            stop_after: None,
        })
    }

    /// Continues from a saved state instead of a fresh model.
    pub fn resume(mut self, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.tag != self.tag() {
            return Err(Error::State(format!(
                "checkpoint was written by a {} run, not {}",
                ckpt.tag,
                self.tag()
            )));
        }
        self.state = TrainState::from_checkpoint(ckpt)?;
        Ok(self)
    }

    /// Saves the state to `path` after every completed unit.
    pub fn checkpoint_to(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    /// Stops once `units` epochs and rounds in total are complete.
    pub fn stop_after(mut self, units: u64) -> Self {
        self.stop_after = Some(units);
        self
    }

    /// Checkpoint tag: mode and stage order, e.g. `pdadmm:o-p`.
    pub fn tag(&self) -> String {
        run_tag(self.mode, self.cfg.admm.order)
    }

    fn total_units(&self) -> u64 {
        (self.cfg.admm.pretrain_epochs + self.cfg.admm.admm_rounds) as u64
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        let pre = self.cfg.admm.pretrain_epochs as u64;
        loop {
            if self.state.progress == pre && self.state.report.rows.is_empty() {
                self.begin_phase_two()?;
            }
            if self.state.progress >= self.total_units() || self.stop_after.is_some_and(|s| self.state.progress >= s) {
                break;
            }
            let unit = self.state.progress;
            let result = if unit < pre {
                self.pretrain_epoch(unit as usize)
            } else {
                self.round((unit - pre) as usize)
            };
            if let Err(e) = result {
                return Err(self.divergence(e, unit));
            }
            self.state.progress += 1;
            if self.state.progress == pre {
                self.begin_phase_two()?;
            }
            self.save()?;
        }
        Ok(TrainOutcome {
            model: self.state.model.clone(),
            report: self.state.report.clone(),
            state: self.state,
        })
    }

    fn save(&self) -> Result<()> {
        if let Some(path) = &self.checkpoint {
            self.state.to_checkpoint(&self.tag()).save(path)?;
        }
        Ok(())
    }

    fn divergence(&self, e: Error, unit: u64) -> Error {
        let Error::Numeric(detail) = e else { return e };
        let phase = if unit < self.cfg.admm.pretrain_epochs as u64 { "pretrain" } else { "phase-2" };
        let snapshot = self.checkpoint.as_ref().and_then(|p| {
            let path = p.with_extension("diverged.ckpt");
            self.state.to_checkpoint(&self.tag()).save(&path).ok().map(|_| path)
        });
        Error::Divergence {
            phase,
            unit: unit as usize,
            detail,
            snapshot,
        }
    }

    fn epoch_batches(&mut self) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.state.rng);
        order
            .chunks(self.cfg.admm.batch_size)
            .map(|ids| Batch::from_samples(&ids.iter().map(|&i| &self.train[i]).collect::<Vec<_>>()))
            .collect()
    }

    fn pretrain_epoch(&mut self, epoch: usize) -> Result<()> {
        let lr = self.cfg.admm.pretrain_lr.at(epoch);
        let mut sum = 0.0;
        for batch in self.epoch_batches()? {
            let st = &mut self.state;
            sum += pretrain_step(&batch, &mut st.model, &mut st.optim, &self.cfg, lr)?.total;
        }
        log::info!("pretrain epoch {epoch}: mean loss {}", sum / self.train.len().div_ceil(self.cfg.admm.batch_size) as f64);
        Ok(())
    }

    /// Fresh optimizers and generator stream for phase 2, zero dual, and the
    /// round-0 report row.
    fn begin_phase_two(&mut self) -> Result<()> {
        self.state.optim = Optimizers::default();
        self.state.rng = phase_rng(self.cfg.admm.seed, 2);
        self.state.dual = match self.mode {
            TrainMode::PdAdmm => Some(DualState::zeros(self.train, self.cfg.admm.extractor)),
            _ => None,
        };
        let row = self.evaluate(0, false)?;
        self.state.report.rows.push(row);
        Ok(())
    }

    fn round(&mut self, round: usize) -> Result<()> {
        let lr = self.cfg.admm.lr.at(round);
        let a = &self.cfg.admm;
        match self.mode {
            TrainMode::PdAdmm | TrainMode::Alternating => {
                for _ in 0..a.inner_epochs_p {
                    for batch in self.epoch_batches()? {
                        let st = &mut self.state;
                        admm_step_p(&batch, &mut st.model, &mut st.optim, st.dual.as_ref(), &self.cfg, lr)?;
                    }
                }
                for _ in 0..self.cfg.admm.inner_epochs_o {
                    for batch in self.epoch_batches()? {
                        let st = &mut self.state;
                        admm_step_o(&batch, &mut st.model, &mut st.optim, st.dual.as_ref(), &self.cfg, lr)?;
                    }
                }
            }
            TrainMode::Baseline => {
                for _ in 0..a.inner_epochs_p.max(a.inner_epochs_o) {
                    for batch in self.epoch_batches()? {
                        let st = &mut self.state;
                        regularized_step(&batch, &mut st.model, &mut st.optim, &self.cfg, lr)?;
                    }
                }
            }
        }
        let row = self.evaluate(round + 1, true)?;
        log::info!(
            "round {}: loss_o {} penalty {} residual {} psnr_val {}",
            row.round,
            row.loss_o,
            row.penalty,
            row.primal_residual_l1,
            row.psnr_val
        );
        self.state.report.rows.push(row);
        Ok(())
    }

    /// Loss terms over the whole training set with the current parameters,
    /// the dual step (when `update_dual`), and validation metrics.
    fn evaluate(&mut self, round: usize, update_dual: bool) -> Result<ReportRow> {
        let cfg = &self.cfg;
        let m = &self.state.model;
        let extractor = cfg.admm.extractor;
        let mut sums = [0.0f64; 5];
        let mut residual = 0.0;
        let mut residual_count = 0usize;
        let mut new_dual = self.state.dual.clone();
        for ids in (0..self.train.len()).collect::<Vec<_>>().chunks(cfg.admm.batch_size) {
            let batch = Batch::from_samples(&ids.iter().map(|&i| &self.train[i]).collect::<Vec<_>>())?;
            let (first, second) = m.super_resolve(&batch.lr)?;
            let (y_p, y_o) = match cfg.admm.order {
                StageOrder::ObjectiveFirst => (second, first),
                StageOrder::PerceptualFirst => (first, second),
            };
            let mut g = Graph::new();
            let disc = m.disc.bind_frozen(&mut g);
            let (yp, yo, yh) = (g.constant(y_p.clone()), g.constant(y_o.clone()), g.constant(batch.hr.clone()));
            let logit = model::forward_disc(&mut g, yp, &disc, &m.config)?;
            let terms = losses::loss_perceptual(&mut g, yp, yh, logit, &cfg.weights, &cfg.cx, m.config.levels())?;
            let lo = losses::loss_objective(&mut g, yo, yh)?;
            let lf_p = extractor.extract(&y_p)?;
            let lf_o = extractor.extract(&y_o)?;
            let k = ids.len() as f64;
            sums[0] += k * g.value(lo).item();
            sums[1] += k * g.value(terms.cx).item();
            sums[2] += k * g.value(terms.d).item();
            sums[3] += k * g.value(terms.gen).item();
            if let Some(dual) = &self.state.dual {
                let s = dual.gather(ids)?;
                sums[4] += k * losses::admm_penalty_value(&lf_p, &lf_o, &s, cfg.admm.rho)?;
            }
            residual += lf_p.data().iter().zip(lf_o.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            residual_count += lf_p.len();
            if update_dual {
                if let Some(d) = new_dual.as_mut() {
                    d.accumulate(ids, &lf_p, &lf_o)?;
                }
            }
        }
        if update_dual {
            if let Some(d) = new_dual.as_mut() {
                d.round += 1;
            }
            self.state.dual = new_dual;
        }
        for (i, s) in sums.iter().enumerate().take(4) {
            guard(*s, cfg.admm.divergence_limit * self.train.len() as f64, REPORT_COLUMNS[i + 1])?;
        }

        let n = self.train.len() as f64;
        let v = validate(m, self.val, cfg)?;
        Ok(ReportRow {
            round,
            loss_o: sums[0] / n,
            loss_cx: sums[1] / n,
            loss_d: sums[2] / n,
            loss_gen: sums[3] / n,
            penalty: sums[4] / n,
            primal_residual_l1: residual / residual_count as f64,
            dual_norm: self.state.dual.as_ref().map_or(0.0, DualState::norm),
            psnr_val: v.psnr,
            lf_mae_val: v.lf_mae,
            lf_mae_gaussian_val: v.lf_mae_gaussian,
        })
    }
}

/// Validation means over held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    /// Y-channel PSNR of the objective stage output.
    pub psnr: f64,
    /// Haar-LL MAE between the two stage outputs.
    pub lf_mae: f64,
    /// Gaussian low-pass MAE between the stage outputs, for Gaussian runs.
    pub lf_mae_gaussian: Option<f64>,
}

pub fn validate(m: &Model, val: &[PatchPair], cfg: &TrainConfig) -> Result<Validation> {
    if val.is_empty() {
        return Ok(Validation {
            psnr: f64::NAN,
            lf_mae: f64::NAN,
            lf_mae_gaussian: None,
        });
    }
    let gaussian = match cfg.admm.extractor {
        BandExtractor::Gaussian { .. } => Some(cfg.admm.extractor),
        _ => None,
    };
    let (mut psnr, mut lf, mut gl) = (0.0, 0.0, 0.0);
    for pair in val {
        let (c, h, w) = (pair.lr.shape()[0], pair.lr.shape()[1], pair.lr.shape()[2]);
        let x = pair.lr.reshape(&[1, c, h, w])?;
        let (first, second) = m.super_resolve(&x)?;
        let y_o = match cfg.admm.order {
            StageOrder::ObjectiveFirst => &first,
            StageOrder::PerceptualFirst => &second,
        };
        let shape = pair.hr.shape();
        psnr += metrics::psnr_y(&y_o.reshape(shape)?, &pair.hr)?;
        lf += metrics::lf_mae(&second.reshape(shape)?, &first.reshape(shape)?)?;
        if let Some(e) = gaussian {
            let d = e.extract(&second)?.sub(&e.extract(&first)?)?;
            gl += d.data().iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64;
        }
    }
    let n = val.len() as f64;
    Ok(Validation {
        psnr: psnr / n,
        lf_mae: lf / n,
        lf_mae_gaussian: gaussian.map(|_| gl / n),
    })
}

pub fn train_pdadmm(train: &[PatchPair], val: &[PatchPair], model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(train, val, model, cfg.clone(), TrainMode::PdAdmm)?.run()
}

/// Baseline with the given regularization weight.
pub fn train_regularizer_baseline(
    train: &[PatchPair],
    val: &[PatchPair],
    model: Model,
    lambda_r: f64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.weights.lambda_r = lambda_r;
    Trainer::new(train, val, model, cfg, TrainMode::Baseline)?.run()
}

/// Joint two-loss training with no coupling between the stages.
pub fn train_unconstrained(train: &[PatchPair], val: &[PatchPair], model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_regularizer_baseline(train, val, model, 0.0, cfg)
}

/// The ADMM alternation with the penalty and dual step removed.
pub fn train_alternating(train: &[PatchPair], val: &[PatchPair], model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(train, val, model, cfg.clone(), TrainMode::Alternating)?.run()
}

/// A convex term of the toy problem `min f(x) + g(z)  s.t.  x = z`.
pub trait ToyObjective {
    fn dim(&self) -> usize;
    /// `argmin_x f(x) + (rho/2) |x - v|^2`.
    fn prox(&self, v: &[f64], rho: f64) -> Vec<f64>;
}

/// `weight * |x - center|^2`, minimized in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub center: Vec<f64>,
    pub weight: f64,
}

impl ToyObjective for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn prox(&self, v: &[f64], rho: f64) -> Vec<f64> {
        let w2 = 2.0 * self.weight;
        self.center
            .iter()
            .zip(v)
            .map(|(c, v)| (w2 * c + rho * v) / (w2 + rho))
            .collect()
    }
}

/// A smooth term given by its gradient, minimized by gradient descent.
pub struct Smooth<F: Fn(&[f64]) -> Vec<f64>> {
    pub dim: usize,
    pub grad: F,
    /// Lipschitz constant of `grad`.
    pub lipschitz: f64,
    pub inner_steps: usize,
}

impl<F: Fn(&[f64]) -> Vec<f64>> ToyObjective for Smooth<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn prox(&self, v: &[f64], rho: f64) -> Vec<f64> {
        let step = 1.0 / (self.lipschitz + rho);
        let mut x = v.to_vec();
        for _ in 0..self.inner_steps {
            let g = (self.grad)(&x);
            for i in 0..x.len() {
                x[i] -= step * (g[i] + rho * (x[i] - v[i]));
            }
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyResult {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    /// `|x - z|` after each iteration.
    pub primal: Vec<f64>,
    /// `rho |z - z_prev|` after each iteration.
    pub dual: Vec<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Scaled-form ADMM on `min f(x) + g(z)  s.t.  x = z`, starting from
/// `z = argmin g`, `s = 0`. Stops early once both residuals fall below `tol`.
pub fn solve_toy_admm(
    f: &dyn ToyObjective,
    g: &dyn ToyObjective,
    rho: f64,
    iters: usize,
    tol: f64,
) -> Result<ToyResult> {
    if !(rho > 0.0) {
        return Err(Error::contract("solve_toy_admm", "rho must be > 0"));
    }
    if f.dim() != g.dim() {
        return Err(Error::dim("solve_toy_admm", format!("dims {} and {} differ", f.dim(), g.dim())));
    }
    let n = f.dim();
    let zeros = vec![0.0; n];
    let mut z = g.prox(&zeros, 0.0);
    let mut x = zeros.clone();
    let mut s = zeros;
    let (mut primal, mut dual) = (Vec::new(), Vec::new());
    for it in 0..iters {
        let v: Vec<f64> = z.iter().zip(&s).map(|(z, s)| z - s).collect();
        x = f.prox(&v, rho);
        let v: Vec<f64> = x.iter().zip(&s).map(|(x, s)| x + s).collect();
        let z_new = g.prox(&v, rho);
        for i in 0..n {
            s[i] += x[i] - z_new[i];
        }
        let r = dist(&x, &z_new);
        let d = rho * dist(&z_new, &z);
        z = z_new;
        primal.push(r);
        dual.push(d);
        if !(r <= 1e6) || !(d <= 1e6) {
            return Err(Error::Divergence {
                phase: "toy-admm",
                unit: it,
                detail: format!("residual {r}, {d}"),
                snapshot: None,
            });
        }
        if r < tol && d < tol {
            break;
        }
    }
    Ok(ToyResult { x, z, s, primal, dual })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(c: f64) -> Quadratic {
        Quadratic {
            center: vec![c],
            weight: 1.0,
        }
    }

    #[test]
    fn toy_reaches_midpoint() {
        let r = solve_toy_admm(&quad(0.0), &quad(2.0), 1.0, 100, 1e-12).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.z[0] - 1.0).abs() < 1e-6);
        assert!(r.primal.len() <= 100);
    }

    #[test]
    fn toy_presatisfied_constraint() {
        let r = solve_toy_admm(&quad(0.7), &quad(0.7), 3.0, 50, 1e-12).unwrap();
        assert_eq!(r.primal.len(), 1);
        assert_eq!(r.x, vec![0.7]);
        assert_eq!(r.s, vec![0.0]);
    }

    #[test]
    fn toy_smooth_term_matches_quadratic() {
        let smooth = Smooth {
            dim: 1,
            grad: |x: &[f64]| vec![2.0 * (x[0] - 2.0)],
            lipschitz: 2.0,
            inner_steps: 200,
        };
        let r = solve_toy_admm(&quad(0.0), &smooth, 1.0, 200, 1e-10).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn dual_update_accumulates() {
        let mut d = DualState::default();
        d.entries.insert(0, Tensor::zeros(&[1, 2, 2]));
        let gap = Tensor::from_fn(&[1, 2, 2], |i| i as f64 - 1.5);
        let zero = Tensor::zeros(&[1, 2, 2]);
        let mut p = BTreeMap::new();
        let mut o = BTreeMap::new();
        p.insert(0, gap.clone());
        o.insert(0, zero.clone());
        dual_update(&mut d, &p, &o).unwrap();
        assert_eq!(d.entries[&0], gap);
        dual_update(&mut d, &p, &o).unwrap();
        assert_eq!(d.entries[&0], gap.scale(2.0));
        assert_eq!(d.round, 2);
        let before = d.entries[&0].clone();
        dual_update(&mut d, &o, &o).unwrap();
        assert_eq!(d.entries[&0], before);
        o.insert(0, Tensor::zeros(&[1, 4, 4]));
        assert!(matches!(dual_update(&mut d, &p, &o), Err(Error::Dimension { .. } | Error::State(_))));
    }

    #[test]
    fn missing_dual_entry_is_a_state_error() {
        let d = DualState::default();
        assert!(matches!(d.gather(&[3]), Err(Error::State(_))));
    }

    #[test]
    fn schedules() {
        let s = LrSchedule::decayed(5e-5, 0.125, &[0.1, 0.25, 0.35, 0.5, 0.7], 200);
        let units: Vec<usize> = s.0.iter().map(|(u, _)| *u).collect();
        assert_eq!(units, vec![0, 20, 50, 70, 100, 140]);
        assert_eq!(s.at(0), 5e-5);
        assert_eq!(s.at(19), 5e-5);
        assert_eq!(s.at(20), 5e-5 / 8.0);
        assert_eq!(s.at(199), 5e-5 / 8f64.powi(5));
        let p = LrSchedule::decayed(1e-4, 0.1, &[0.25, 0.5, 0.75], 400);
        assert_eq!(p.0.iter().map(|(u, _)| *u).collect::<Vec<_>>(), vec![0, 100, 200, 300]);
        assert!(AdmmConfig::default().validate().is_ok());
    }

    #[test]
    fn report_round_trips_through_tensor() {
        let r = TrainingReport {
            rows: vec![ReportRow {
                round: 3,
                loss_o: 0.1,
                loss_cx: 1.5,
                loss_d: 0.2,
                loss_gen: 0.69,
                penalty: 1e-5,
                primal_residual_l1: 0.01,
                dual_norm: 0.3,
                psnr_val: f64::INFINITY,
                lf_mae_val: 0.02,
                lf_mae_gaussian_val: Some(0.01),
            }],
        };
        assert_eq!(TrainingReport::from_tensor(&r.to_tensor()).unwrap(), r);
        let csv = r.to_csv();
        assert!(csv.starts_with("round,loss_o,loss_cx,loss_d,loss_gen,penalty,primal_residual_l1,dual_norm,psnr_val,lf_mae_val,lf_mae_gaussian_val\n"));
        assert!(csv.contains(",inf,"));
    }
}
