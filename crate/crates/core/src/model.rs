//! The denoiser `ε_θ(x_t, t)`.
//!
//! Encoder: voxelize the noisy cloud (coordinates plus a timestep
//! embedding), run a small conv3d stack, pick `M` latent points with the
//! time-variant sampler and query the volume at them. Latent stage: two
//! serialized bidirectional SSM stacks under different curve orders, each
//! un-permuted back to the latent order, affinely rescaled and fused by a
//! linear projection. Decoder: voxelize the fused latent features, run a
//! second conv stack and interpolate at the original points. A point-wise
//! branch on the raw coordinates and timestep is added before a small
//! head to three noise components, plus a per-axis skip `x_t ⊙ g(t)` that
//! carries the near-identity map of the noisiest steps.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::curves::{serialize_points, CurveKind};
use crate::error::{Error, Result};
use crate::geometry::{normalize_to_unit_cube, Point};
use crate::spectral::{build_graph, sampler_branch, time_variant_sample_seeded, SamplerBranch};
use crate::ssm::{init_block, mamba_stack, MambaConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Points per cloud.
    pub n_points: usize,
    /// Latent points kept by the encoder.
    pub latent_points: usize,
    /// Latent feature size.
    pub latent_dim: usize,
    /// Blocks per stream.
    pub depth: usize,
    pub curves: (CurveKind, CurveKind),
    /// Quantization bits per axis used for serialization.
    pub curve_bits: u32,
    pub voxel_resolution: usize,
    /// Timesteps at or below `tau` use the frequency-aware sampler.
    pub tau: usize,
    pub zeta: f64,
    /// Neighbours in the spatial graph.
    pub k: usize,
    /// Diffusion steps.
    pub steps: usize,
    /// Channels of the hidden conv layers.
    pub conv_channels: usize,
    pub groups: usize,
    /// Size of the timestep embedding voxelized with the coordinates.
    pub voxel_time_dim: usize,
    pub d_state: usize,
    pub expand: usize,
    pub ssm_conv_width: usize,
    /// Starting point of plain farthest-point sampling.
    pub fps_seed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_points: 2048,
            latent_points: 256,
            latent_dim: 512,
            depth: 8,
            curves: (CurveKind::Z, CurveKind::ZTrans),
            curve_bits: 6,
            voxel_resolution: 16,
            tau: 50,
            zeta: 0.875,
            k: 32,
            steps: 1000,
            conv_channels: 32,
            groups: 8,
            voxel_time_dim: 8,
            d_state: 16,
            expand: 2,
            ssm_conv_width: 4,
            fps_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.latent_points == 0 || self.latent_points > self.n_points {
            return bad(format!("need 1 <= M <= N, got M={} N={}", self.latent_points, self.n_points));
        }
        if self.latent_dim == 0 || !self.latent_dim.is_multiple_of(2) {
            return bad(format!("latent size D must be even and positive, got {}", self.latent_dim));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.voxel_resolution < 2 {
            return bad(format!("voxel resolution must be >= 2, got {}", self.voxel_resolution));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return bad(format!("zeta must lie in [0, 1], got {}", self.zeta));
        }
        if self.k == 0 || self.k >= self.n_points {
            return bad(format!("need 1 <= k < N, got k={} N={}", self.k, self.n_points));
        }
        if self.steps == 0 {
            return bad("T must be at least 1".into());
        }
        if self.groups == 0 || !self.conv_channels.is_multiple_of(self.groups) {
            return bad(format!("{} conv channels not divisible into {} groups", self.conv_channels, self.groups));
        }
        if !self.voxel_time_dim.is_multiple_of(2) {
            return bad(format!("voxel time embedding size must be even, got {}", self.voxel_time_dim));
        }
        if self.curve_bits == 0 || self.curve_bits > crate::curves::MAX_BITS {
            return bad(format!("curve bits must lie in 1..={}, got {}", crate::curves::MAX_BITS, self.curve_bits));
        }
        if self.d_state == 0 || self.expand == 0 || self.ssm_conv_width == 0 {
            return bad("state size, expansion and SSM conv width must be positive".into());
        }
        Ok(())
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.latent_dim,
            expand: self.expand,
            d_state: self.d_state,
            conv_width: self.ssm_conv_width,
            dt_rank: self.latent_dim.div_ceil(16),
        }
    }
}

/// Sinusoidal embedding `[sin(t f_0), .., sin(t f_{h-1}), cos(t f_0), ..]`
/// with `f_i = 10000^{-i/h}` and `h = dim / 2`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn put_conv(p: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.w"), uniform(&[cout, cin, k, k, k], cin * k * k * k, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn put_norm(p: &mut ParamStore, name: &str, c: usize) {
    p.insert(format!("{name}.g"), Tensor::ones(&[c]));
    p.insert(format!("{name}.b"), Tensor::zeros(&[c]));
}

fn put_linear(p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.w"), uniform(&[fan_in, fan_out], fan_in, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Fresh weights for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h) = (cfg.latent_dim, cfg.conv_channels);
    let mut p = ParamStore::new();
    put_linear(&mut p, "time", d, d, &mut rng);
    put_conv(&mut p, "enc.conv0", h, 3 + cfg.voxel_time_dim, 3, &mut rng);
    put_norm(&mut p, "enc.gn0", h);
    put_conv(&mut p, "enc.conv1", h, h, 3, &mut rng);
    put_norm(&mut p, "enc.gn1", h);
    put_conv(&mut p, "enc.conv2", d, h, 1, &mut rng);
    put_linear(&mut p, "enc.pos", 3, d, &mut rng);
    let mc = cfg.mamba();
    for stream in ["s1", "s2"] {
        for i in 0..cfg.depth {
            init_block(&mut p, &format!("{stream}.{i}"), &mc, &mut rng);
        }
    }
    for s in ["1", "2"] {
        p.insert(format!("fuse.g{s}"), Tensor::ones(&[d]));
        p.insert(format!("fuse.d{s}"), Tensor::zeros(&[d]));
    }
    put_linear(&mut p, "fuse.proj", 2 * d, d, &mut rng);
    put_conv(&mut p, "dec.conv0", h, d, 1, &mut rng);
    put_norm(&mut p, "dec.gn0", h);
    put_conv(&mut p, "dec.conv1", h, h, 3, &mut rng);
    put_norm(&mut p, "dec.gn1", h);
    put_conv(&mut p, "dec.conv2", h, h, 3, &mut rng);
    put_linear(&mut p, "dec.point", 3 + cfg.voxel_time_dim, h, &mut rng);
    put_linear(&mut p, "dec.mix", h, h, &mut rng);
    put_linear(&mut p, "dec.head", h, 3, &mut rng);
    put_linear(&mut p, "dec.gain", d, 3, &mut rng);
    Ok(p)
}

/// Latent cloud on a tape: `features` is `[M, D]`.
#[derive(Clone, Debug)]
pub struct LatentCloud {
    pub features: Var,
    pub coords: Vec<Point>,
    /// Indices of the retained points in the input cloud.
    pub indices: Vec<usize>,
    pub frequency_count: usize,
}

const GN_EPS: f64 = 1e-5;

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, padding: usize) -> Result<Var> {
    tape.conv3d(x, p.var(&format!("{name}.w"))?, p.var(&format!("{name}.b"))?, 1, padding)
}

fn norm_swish(tape: &mut Tape, p: &Bound, name: &str, x: Var, groups: usize) -> Result<Var> {
    let y = tape.group_norm(x, groups, p.var(&format!("{name}.g"))?, p.var(&format!("{name}.b"))?, GN_EPS)?;
    Ok(tape.swish(y))
}

/// Learned `[1, D]` timestep embedding.
pub fn time_embedding(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, t: usize) -> Result<Var> {
    let d = cfg.latent_dim;
    let raw = tape.constant(Tensor::new(vec![1, d], timestep_embedding(t, d))?);
    let y = tape.linear(raw, p.var("time.w")?, p.var("time.b")?)?;
    Ok(tape.silu(y))
}

/// `[N, 3 + E]` rows of raw coordinates followed by the timestep sinusoid.
fn point_rows(raw: &[Point], t: usize, dim: usize) -> Result<Tensor> {
    let et = timestep_embedding(t, dim);
    let mut rows = Vec::with_capacity(raw.len() * (3 + dim));
    for q in raw {
        rows.extend_from_slice(q);
        rows.extend_from_slice(&et);
    }
    Tensor::new(vec![raw.len(), 3 + dim], rows)
}

fn cloud_points(x_t: &Tensor, cfg: &ModelConfig) -> Result<Vec<Point>> {
    if x_t.rank() != 2 || x_t.cols() != 3 || x_t.rows() != cfg.n_points {
        return Err(Error::shape("eps_theta input", x_t.shape(), &[cfg.n_points, 3]));
    }
    if !x_t.is_finite() {
        return Err(Error::NonFinite {
            what: "noisy input cloud".into(),
        });
    }
    Ok(x_t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Encoder. `x_t` is `[N, 3]`; `temb` is the `[1, D]` time embedding.
pub fn tf_encode(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, x_t: &Tensor, t: usize, temb: Var) -> Result<LatentCloud> {
    let raw = cloud_points(x_t, cfg)?;
    let unit = normalize_to_unit_cube(&raw);
    let feats = tape.constant(point_rows(&raw, t, cfg.voxel_time_dim)?);
    let vol = tape.voxelize(feats, &unit, cfg.voxel_resolution)?;
    let h = conv(tape, p, "enc.conv0", vol, 1)?;
    let h = norm_swish(tape, p, "enc.gn0", h, cfg.groups)?;
    let h = conv(tape, p, "enc.conv1", h, 1)?;
    let h = norm_swish(tape, p, "enc.gn1", h, cfg.groups)?;
    let volume = conv(tape, p, "enc.conv2", h, 0)?;

    let graph = match sampler_branch(t, cfg.tau) {
        SamplerBranch::Mixed if cfg.zeta > 0.0 => Some(build_graph(&unit, cfg.k, None)?),
        _ => None,
    };
    let sel = time_variant_sample_seeded(&unit, cfg.latent_points, t, cfg.tau, cfg.zeta, graph.as_ref(), cfg.fps_seed)?;
    let coords: Vec<Point> = sel.indices.iter().map(|&i| unit[i]).collect();

    let queried = tape.trilinear_query(volume, &coords)?;
    let m = coords.len();
    let pos_in = tape.constant(Tensor::new(vec![m, 3], coords.iter().flatten().copied().collect())?);
    let pos = tape.linear(pos_in, p.var("enc.pos.w")?, p.var("enc.pos.b")?)?;
    let features = tape.add(queried, pos)?;
    let row = tape.reshape(temb, &[cfg.latent_dim])?;
    let features = tape.add_row(features, row)?;
    Ok(LatentCloud {
        features,
        coords,
        indices: sel.indices,
        frequency_count: sel.frequency_count,
    })
}

/// Runs `latent` through one serialized stream and returns it in the
/// original latent order.
pub fn stream(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, prefix: &str, kind: CurveKind, latent: &LatentCloud, temb: Option<Var>) -> Result<Var> {
    let order = serialize_points(&latent.coords, kind, cfg.curve_bits)?;
    let seq = tape.gather_rows(latent.features, &order.permutation)?;
    let out = mamba_stack(tape, p, prefix, cfg.depth, seq, temb)?;
    tape.gather_rows(out, &order.inverse())
}

/// Two-stream latent processing with affine fusion; returns `[M, D]`.
pub fn dual_stream(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, latent: &LatentCloud, temb: Option<Var>) -> Result<Var> {
    if cfg.curves.0 == cfg.curves.1 {
        warn!("both streams use the {} curve", cfg.curves.0);
    }
    let mut fused = Vec::with_capacity(2);
    for (s, kind) in [("1", cfg.curves.0), ("2", cfg.curves.1)] {
        let z = stream(tape, p, cfg, &format!("s{s}"), kind, latent, temb)?;
        let z = tape.mul_row(z, p.var(&format!("fuse.g{s}"))?)?;
        fused.push(tape.add_row(z, p.var(&format!("fuse.d{s}"))?)?);
    }
    let cat = tape.concat_cols(fused[0], fused[1])?;
    tape.linear(cat, p.var("fuse.proj.w")?, p.var("fuse.proj.b")?)
}

/// Decoder from fused `[M, D]` latent features to `[N, 3]` noise.
/// `raw` are the input points, `t` the timestep and `temb` its `[1, D]`
/// embedding.
pub fn decode(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, fused: Var, latent_coords: &[Point], raw: &[Point], t: usize, temb: Var) -> Result<Var> {
    let shape = tape.shape(fused);
    if shape.len() != 2 || shape[0] != latent_coords.len() {
        return Err(Error::shape("decode", shape, &[latent_coords.len(), cfg.latent_dim]));
    }
    let vol = tape.voxelize(fused, latent_coords, cfg.voxel_resolution)?;
    let h = conv(tape, p, "dec.conv0", vol, 0)?;
    let h = norm_swish(tape, p, "dec.gn0", h, cfg.groups)?;
    let h = conv(tape, p, "dec.conv1", h, 1)?;
    let h = norm_swish(tape, p, "dec.gn1", h, cfg.groups)?;
    let h = conv(tape, p, "dec.conv2", h, 1)?;
    let pf = tape.trilinear_query(h, &normalize_to_unit_cube(raw))?;
    let rows = tape.constant(point_rows(raw, t, cfg.voxel_time_dim)?);
    let pp = tape.linear(rows, p.var("dec.point.w")?, p.var("dec.point.b")?)?;
    let pp = tape.swish(pp);
    let z = tape.add(pf, pp)?;
    let z = tape.linear(z, p.var("dec.mix.w")?, p.var("dec.mix.b")?)?;
    let z = tape.swish(z);
    let head = tape.linear(z, p.var("dec.head.w")?, p.var("dec.head.b")?)?;
    let gain = tape.linear(temb, p.var("dec.gain.w")?, p.var("dec.gain.b")?)?;
    let gain = tape.reshape(gain, &[3])?;
    let x = tape.constant(Tensor::new(vec![raw.len(), 3], raw.iter().flatten().copied().collect())?);
    let skip = tape.mul_row(x, gain)?;
    tape.add(head, skip)
}

/// Full denoiser on an existing tape; returns the `[N, 3]` prediction.
pub fn eps_theta_on(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, x_t: &Tensor, t: usize) -> Result<Var> {
    if t == 0 || t > cfg.steps {
        return Err(Error::invalid(format!("timestep {t} outside 1..={}", cfg.steps)));
    }
    let temb = time_embedding(tape, p, cfg, t)?;
    let latent = tf_encode(tape, p, cfg, x_t, t, temb)?;
    let fused = dual_stream(tape, p, cfg, &latent, Some(temb))?;
    let raw = cloud_points(x_t, cfg)?;
    decode(tape, p, cfg, fused, &latent.coords, &raw, t, temb)
}

/// Forward-only evaluation of `ε_θ(x_t, t)`.
pub fn eps_theta(params: &ParamStore, cfg: &ModelConfig, x_t: &Tensor, t: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let out = eps_theta_on(&mut tape, &bound, cfg, x_t, t)?;
    Ok(tape.value(out).clone())
}
