//! DDPM machinery: schedule, forward corruption, loss, ancestral sampling
//! and the trainer.
//!
//! Timesteps are 1-based everywhere (`t ∈ 1..=T`); schedule vectors are
//! stored 0-based, so step `t` lives at index `t - 1`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::{write_checkpoint, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{eps_theta, eps_theta_on, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Reverse-step variances `σ_t²`.
    pub sigma2: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Linear β ramp from `beta_start` to `beta_end` over `steps`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            beta_start + f * (beta_end - beta_start)
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        sigma2: beta.clone(),
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    /// The standard ramp for `T = 1000`, with both endpoints multiplied by
    /// `1000 / T` for shorter chains so the terminal marginal stays close
    /// to `N(0, I)`.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let s = DEFAULT_STEPS as f64 / steps.max(1) as f64;
        make_schedule(steps, BETA_START * s, (BETA_END * s).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("q_sample", x0, eps)?;
    let ab = sched.alpha_bar[sched.check(t)?];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Anything that predicts the noise in `x_t`.
pub trait Denoiser: Sync {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// The trained network as a [`Denoiser`].
pub struct Network<'a> {
    pub params: &'a ParamStore,
    pub config: &'a ModelConfig,
}

impl Denoiser for Network<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        eps_theta(self.params, self.config, x_t, t)
    }
}

/// Knows the clean cloud and returns the exact noise that maps it to the
/// given `x_t` under the closed-form marginal.
pub struct OracleDenoiser<'a> {
    pub x0: &'a Tensor,
    pub schedule: &'a NoiseSchedule,
}

impl Denoiser for OracleDenoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        same_shape("oracle denoiser", x_t, self.x0)?;
        let ab = self.schedule.alpha_bar[self.schedule.check(t)?];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x_t.data().iter().zip(self.x0.data()).map(|(x, x0)| (x - a * x0) / b).collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x0: Tensor,
    pub t: usize,
    pub eps0: Tensor,
}

impl TrainSample {
    /// Uniform `t ∈ 1..=T` and standard normal noise.
    pub fn draw<R: Rng + ?Sized>(x0: &Tensor, steps: usize, rng: &mut R) -> Self {
        let t = rng.random_range(1..=steps);
        TrainSample {
            x0: x0.clone(),
            t,
            eps0: standard_normal(x0.shape(), rng),
        }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("extent product matches")
}

fn squared_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared noise-prediction error over the batch, points and axes
/// (unit weight per timestep).
pub fn ddpm_loss(den: &dyn Denoiser, batch: &[TrainSample], sched: &NoiseSchedule) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (i, s) in batch.iter().enumerate() {
        let x_t = q_sample(&s.x0, s.t, &s.eps0, sched)?;
        let pred = den.predict(&x_t, s.t)?;
        same_shape("ddpm_loss", &pred, &s.eps0)?;
        let e = squared_error(&pred, &s.eps0);
        if !e.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss of batch item {i} (t = {})", s.t),
            });
        }
        total += e;
        count += s.eps0.len();
    }
    Ok(total / count as f64)
}

/// One ancestral step `x_t -> x_{t-1}`. `noise` is ignored at `t = 1`.
pub fn p_sample_step(den: &dyn Denoiser, x_t: &Tensor, t: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    let i = sched.check(t)?;
    same_shape("p_sample_step", x_t, noise)?;
    let eps = den.predict(x_t, t)?;
    same_shape("p_sample_step", x_t, &eps)?;
    let coef = sched.beta[i] / (1.0 - sched.alpha_bar[i]).sqrt();
    let inv = 1.0 / sched.alpha[i].sqrt();
    let sigma = if t > 1 { sched.sigma2[i].sqrt() } else { 0.0 };
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .zip(noise.data())
        .map(|((x, e), z)| inv * (x - coef * e) + sigma * z)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Runs the reverse chain from `x_T` with explicit per-step draws;
/// `draws[t - 1]` is used at step `t`.
pub fn sample_with_draws(den: &dyn Denoiser, x_big_t: &Tensor, sched: &NoiseSchedule, draws: &[Tensor]) -> Result<Tensor> {
    if draws.len() != sched.steps() {
        return Err(Error::invalid(format!("need {} noise draws, got {}", sched.steps(), draws.len())));
    }
    let mut x = x_big_t.clone();
    for t in (1..=sched.steps()).rev() {
        x = p_sample_step(den, &x, t, sched, &draws[t - 1])?;
    }
    Ok(x)
}

/// Draws `x_T ~ N(0, I)` of shape `[n, 3]` and denoises it; deterministic
/// in `seed`.
pub fn sample(den: &dyn Denoiser, n: usize, sched: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal(&[n, 3], &mut rng);
    let zero = Tensor::zeros(&[n, 3]);
    for t in (1..=sched.steps()).rev() {
        let z = if t > 1 { standard_normal(&[n, 3], &mut rng) } else { zero.clone() };
        x = p_sample_step(den, &x, t, sched, &z)?;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                what: format!("sample at step {t}"),
            });
        }
    }
    Ok(x)
}

/// Maps unit-cube coordinates to the `[-1, 1]` diffusion space.
pub fn to_diffusion_space(pc: &PointCloud) -> Tensor {
    pc.coords_tensor().map(|c| 2.0 * c - 1.0)
}

/// Inverse of [`to_diffusion_space`].
pub fn from_diffusion_space(x: &Tensor) -> Result<PointCloud> {
    PointCloud::from_tensor(&x.map(|v| 0.5 * (v + 1.0)))
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Write `<dir>/epoch_<e>.pcdk` every `n` epochs.
    pub checkpoint: Option<(PathBuf, usize)>,
    /// Stored in each checkpoint's trailer.
    pub config_text: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch: 32,
            adam: AdamConfig::default(),
            lr_decay: 0.98,
            decay_every: 100,
            seed: 0,
            checkpoint: None,
            config_text: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ParamStore,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 3;

/// Loss and gradients of one training sample.
fn sample_grads(params: &ParamStore, model: &ModelConfig, sched: &NoiseSchedule, s: &TrainSample) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let x_t = q_sample(&s.x0, s.t, &s.eps0, sched)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let pred = eps_theta_on(&mut tape, &bound, model, &x_t, s.t)?;
    let target = tape.constant(s.eps0.clone());
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.collect(&tape, &mut grads)))
}

fn item_seed(seed: u64, epoch: usize, item: usize) -> u64 {
    seed ^ ((epoch as u64) << 32) ^ (item as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Adam on the noise-prediction loss. `dataset` holds `[N, 3]` clouds in
/// diffusion space. `on_epoch(epoch, loss, params)` runs after every epoch
/// (1-based).
pub fn train(
    dataset: &[Tensor],
    model: &ModelConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    init: ParamStore,
    mut on_epoch: impl FnMut(usize, f64, &ParamStore),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch size and epoch count must be positive"));
    }
    if sched.steps() != model.steps {
        return Err(Error::invalid(format!(
            "schedule has {} steps but the model expects {}",
            sched.steps(),
            model.steps
        )));
    }
    let mut params = init;
    let mut adam = AdamState::new(cfg.adam, &params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut strikes = 0;
    for epoch in 1..=cfg.epochs {
        if cfg.decay_every > 0 && epoch > 1 && (epoch - 1) % cfg.decay_every == 0 {
            adam.config.lr *= cfg.lr_decay;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let mut r = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch, b * cfg.batch + j));
                    let s = TrainSample::draw(&dataset[idx], model.steps, &mut r);
                    sample_grads(&params, model, sched, &s)
                })
                .collect();
            let mut sum: Option<BTreeMap<String, Tensor>> = None;
            for (j, r) in results.into_iter().enumerate() {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("loss of cloud {} in epoch {epoch}", chunk[j]),
                    });
                }
                total += loss;
                seen += 1;
                match sum.as_mut() {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (name, t) in g {
                            let a = acc.get_mut(&name).expect("same parameter set");
                            a.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / chunk.len() as f64;
            grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
            adam.step(&mut params, &grads)?;
        }
        let mean = total / seen as f64;
        losses.push(mean);
        info!("epoch {epoch}: loss {mean:.6}");
        on_epoch(epoch, mean, &params);

        let initial = losses[0];
        if mean > DIVERGENCE_FACTOR * initial {
            strikes += 1;
            warn!("epoch {epoch}: loss {mean:.4} is above 10x the initial {initial:.4}");
            if strikes >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    epoch,
                    loss: mean,
                    initial,
                });
            }
        } else {
            strikes = 0;
        }
        if let Some((dir, every)) = &cfg.checkpoint {
            if *every > 0 && (epoch % every == 0 || epoch == cfg.epochs) {
                let path = dir.join(format!("epoch_{epoch}.pcdk"));
                let file = std::io::BufWriter::new(std::fs::File::create(&path)?);
                write_checkpoint(file, &params, cfg.config_text.as_deref())?;
            }
        }
    }
    Ok(TrainReport { params, losses })
}

/// `epoch,mean_loss` rows with a header.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,mean_loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l:.9}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}
