//! Selective state-space layers.
//!
//! A diagonal continuous system `h' = a h + b x, y = c h` is discretized
//! with a zero-order hold of step `Δ`:
//! `ā = exp(Δa)`, `b̄ = (exp(Δa) - 1) / a · b`, with `b̄ = Δ b` as `a -> 0`.
//! The scan runs `h_t = ā_t h_{t-1} + b̄_t x_t`, `y_t = c_t · h_t` from
//! `h_{-1} = 0`; in the selective variant `Δ`, `b`, `c` vary per position.

use rand::Rng;

use crate::autodiff::kernels::expm1;
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Below this `|a|` the hold uses its `a -> 0` limit.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Continuous parameters of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Diagonal of the state matrix, one entry per state.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// `(ā, s)` with `b̄ = s · b` for one diagonal entry.
#[inline]
pub fn zoh_coefficients(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let em1 = expm1(z);
    let scale = if a.abs() < ZOH_LIMIT { delta } else { em1 / a };
    (1.0 + em1, scale)
}

pub fn zoh_discretize(params: &SsmParams) -> Result<DiscreteSsm> {
    if params.delta.is_nan() || params.delta <= 0.0 {
        return Err(Error::invalid(format!("zoh_discretize: delta must be positive, got {}", params.delta)));
    }
    if params.a.len() != params.b.len() {
        return Err(Error::shape("zoh_discretize", &[params.a.len()], &[params.b.len()]));
    }
    let (a_bar, b_bar) = params
        .a
        .iter()
        .zip(&params.b)
        .map(|(&a, &b)| {
            let (ab, s) = zoh_coefficients(a, params.delta);
            (ab, s * b)
        })
        .unzip();
    Ok(DiscreteSsm { a_bar, b_bar })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Shapes of a scan: `x, Δ: [len, channels]`, `a: [channels, state]`,
/// `b, c: [len, state]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ScanDims {
    len: usize,
    channels: usize,
    state: usize,
}

/// Per-position forward values kept for the reverse pass, laid out
/// `[len, state, channels]` so inner loops run over channels.
struct ScanTrace {
    y: Vec<f64>,
    a_bar: Vec<f64>,
    scale: Vec<f64>,
    h: Vec<f64>,
}

fn scan_dims(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<ScanDims> {
    let bad = |l: &Tensor, r: &Tensor| Err(Error::shape("selective_scan", l.shape(), r.shape()));
    if x.rank() != 2 || delta.shape() != x.shape() {
        return bad(x, delta);
    }
    let (len, channels) = (x.shape()[0], x.shape()[1]);
    if a.rank() != 2 || a.shape()[0] != channels {
        return bad(x, a);
    }
    let state = a.shape()[1];
    if b.shape() != [len, state] {
        return bad(a, b);
    }
    if c.shape() != [len, state] {
        return bad(a, c);
    }
    Ok(ScanDims { len, channels, state })
}

/// `[rows, cols]` -> `[cols, rows]`.
fn transposed(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

/// Per-position inputs. `a`/`inv_a` are state-major `[state, channels]`.
struct StepIn<'a> {
    x: &'a [f64],
    delta: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    a: &'a [f64],
    inv_a: &'a [f64],
}

/// `(ā, s)` for one entry; the branch-free form of [`zoh_coefficients`].
#[inline(always)]
fn hold(a: f64, inv_a: f64, delta: f64) -> (f64, f64) {
    let em1 = expm1(delta * a);
    (1.0 + em1, if a.abs() < ZOH_LIMIT { delta } else { em1 * inv_a })
}

/// One position of the scan: fills `a_bar`/`scale`, advances `h` (all
/// `[state, channels]`) and writes `y_row`.
#[inline(always)]
fn scan_step(r: &StepIn, a_bar: &mut [f64], scale: &mut [f64], h: &mut [f64], y_row: &mut [f64]) {
    let ch = y_row.len();
    let (xs, ds) = (&r.x[..ch], &r.delta[..ch]);
    y_row.fill(0.0);
    for n in 0..r.b.len() {
        let rg = n * ch..(n + 1) * ch;
        let (ab, sc, hn) = (&mut a_bar[rg.clone()], &mut scale[rg.clone()], &mut h[rg.clone()]);
        let (an, ian) = (&r.a[rg.clone()], &r.inv_a[rg]);
        let (bn, cn) = (r.b[n], r.c[n]);
        for e in 0..ch {
            (ab[e], sc[e]) = hold(an[e], ian[e], ds[e]);
            hn[e] = ab[e] * hn[e] + sc[e] * bn * xs[e];
            y_row[e] += cn * hn[e];
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn scan_step_avx2(r: &StepIn, a_bar: &mut [f64], scale: &mut [f64], h: &mut [f64], y_row: &mut [f64]) {
    scan_step(r, a_bar, scale, h, y_row)
}

#[cfg(target_arch = "x86_64")]
fn wide_simd() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

fn scan_forward(x: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64], d: ScanDims, keep: bool) -> ScanTrace {
    let ScanDims { len, channels, state } = d;
    let es = channels * state;
    let mut y = vec![0.0; len * channels];
    let rows = if keep { len } else { 1 };
    let (mut a_bar, mut scale) = (vec![0.0; es * rows], vec![0.0; es * rows]);
    let mut h_all = Vec::with_capacity(if keep { es * len } else { 0 });
    let a_t = transposed(a, channels, state);
    let inv_a: Vec<f64> = a_t.iter().map(|v| 1.0 / v).collect();
    let mut h = vec![0.0; es];
    #[cfg(target_arch = "x86_64")]
    let wide = wide_simd();
    for t in 0..len {
        let o = if keep { t * es } else { 0 };
        let step = StepIn {
            x: &x[t * channels..(t + 1) * channels],
            delta: &delta[t * channels..(t + 1) * channels],
            b: &b[t * state..(t + 1) * state],
            c: &c[t * state..(t + 1) * state],
            a: &a_t,
            inv_a: &inv_a,
        };
        let (ab, sc) = (&mut a_bar[o..o + es], &mut scale[o..o + es]);
        let y_row = &mut y[t * channels..(t + 1) * channels];
        #[cfg(target_arch = "x86_64")]
        if wide {
            // SAFETY: the required CPU features were detected above.
            unsafe { scan_step_avx2(&step, ab, sc, &mut h, y_row) };
        } else {
            scan_step(&step, ab, sc, &mut h, y_row);
        }
        #[cfg(not(target_arch = "x86_64"))]
        scan_step(&step, ab, sc, &mut h, y_row);
        if keep {
            h_all.extend_from_slice(&h);
        }
    }
    ScanTrace { y, a_bar, scale, h: h_all }
}

/// Forward values of one position, all `[state, channels]`.
struct BackIn<'a> {
    gy: &'a [f64],
    a_bar: &'a [f64],
    scale: &'a [f64],
    h: &'a [f64],
    h_prev: &'a [f64],
}

/// Gradient rows of one position plus the running `∂L/∂h` and `∂L/∂a`.
struct BackOut<'a> {
    gx: &'a mut [f64],
    gd: &'a mut [f64],
    gb: &'a mut [f64],
    gc: &'a mut [f64],
    ga: &'a mut [f64],
    dh: &'a mut [f64],
    tmp: &'a mut [f64],
}

/// One reverse step of the scan. `∂ā/∂Δ = aā`, `∂ā/∂a = Δā`, `∂s/∂Δ = ā`,
/// `∂s/∂a = (Δā - s)/a`, the last replaced by its series near `Δa = 0`.
#[inline(always)]
fn scan_back_step(r: &StepIn, f: &BackIn, o: BackOut) {
    let ch = f.gy.len();
    let (xs, ds, gy) = (&r.x[..ch], &r.delta[..ch], &f.gy[..ch]);
    let (gx, gd, tmp) = (&mut o.gx[..ch], &mut o.gd[..ch], &mut o.tmp[..ch]);
    for n in 0..r.b.len() {
        let rg = n * ch..(n + 1) * ch;
        let (an, ian) = (&r.a[rg.clone()], &r.inv_a[rg.clone()]);
        let (ab, st, ht, hp) = (&f.a_bar[rg.clone()], &f.scale[rg.clone()], &f.h[rg.clone()], &f.h_prev[rg.clone()]);
        let (dhn, gan) = (&mut o.dh[rg.clone()], &mut o.ga[rg]);
        let (bn, cn) = (r.b[n], r.c[n]);
        o.gc[n] += crate::autodiff::kernels::dot(gy, ht);
        for e in 0..ch {
            let (ab, st) = (ab[e], st[e]);
            let g = dhn[e] + gy[e] * cn;
            let d_abar = g * hp[e];
            let d_scale = g * bn * xs[e];
            tmp[e] = g * st * xs[e];
            gx[e] += g * st * bn;
            let z = ds[e] * an[e];
            let ds_dd = if an[e].abs() < ZOH_LIMIT { 1.0 } else { ab };
            let series = ds[e] * ds[e] * (0.5 + z / 3.0 + z * z / 8.0);
            let ds_da = if z.abs() < 1e-4 { series } else { (ds[e] * ab - st) * ian[e] };
            gd[e] += d_abar * an[e] * ab + d_scale * ds_dd;
            gan[e] += d_abar * ds[e] * ab + d_scale * ds_da;
            dhn[e] = g * ab;
        }
        o.gb[n] += tmp.iter().sum::<f64>();
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn scan_back_step_avx2(r: &StepIn, f: &BackIn, o: BackOut) {
    scan_back_step(r, f, o)
}

#[allow(clippy::too_many_arguments)]
fn scan_backward(
    g: &[f64],
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    tr: &ScanTrace,
    d: ScanDims,
) -> [Vec<f64>; 5] {
    let ScanDims { len, channels, state } = d;
    let es = channels * state;
    let mut gx = vec![0.0; len * channels];
    let mut gd = vec![0.0; len * channels];
    let mut ga_t = vec![0.0; es];
    let mut gb = vec![0.0; len * state];
    let mut gc = vec![0.0; len * state];
    // ∂L/∂h_t carried backwards through ā
    let mut dh = vec![0.0; es];
    let a_t = transposed(a, channels, state);
    let inv_a: Vec<f64> = a_t.iter().map(|v| 1.0 / v).collect();
    let zeros = vec![0.0; es];
    let mut tmp = vec![0.0; channels];
    #[cfg(target_arch = "x86_64")]
    let wide = wide_simd();
    for t in (0..len).rev() {
        let (o, lc, ls) = (t * es, t * channels..(t + 1) * channels, t * state..(t + 1) * state);
        let step = StepIn {
            x: &x[lc.clone()],
            delta: &delta[lc.clone()],
            b: &b[ls.clone()],
            c: &c[ls.clone()],
            a: &a_t,
            inv_a: &inv_a,
        };
        let fwd = BackIn {
            gy: &g[lc.clone()],
            a_bar: &tr.a_bar[o..o + es],
            scale: &tr.scale[o..o + es],
            h: &tr.h[o..o + es],
            h_prev: if t > 0 { &tr.h[o - es..o] } else { &zeros },
        };
        let out = BackOut {
            gx: &mut gx[lc.clone()],
            gd: &mut gd[lc],
            gb: &mut gb[ls.clone()],
            gc: &mut gc[ls],
            ga: &mut ga_t,
            dh: &mut dh,
            tmp: &mut tmp,
        };
        #[cfg(target_arch = "x86_64")]
        if wide {
            // SAFETY: the required CPU features were detected above.
            unsafe { scan_back_step_avx2(&step, &fwd, out) };
        } else {
            scan_back_step(&step, &fwd, out);
        }
        #[cfg(not(target_arch = "x86_64"))]
        scan_back_step(&step, &fwd, out);
    }
    [gx, gd, transposed(&ga_t, state, channels), gb, gc]
}

/// Runs the recurrence on plain tensors and returns `y: [len, channels]`.
pub fn selective_scan(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, direction: Direction) -> Result<Tensor> {
    let d = scan_dims(x, delta, a, b, c)?;
    if direction == Direction::Backward {
        let rev = |t: &Tensor| reverse_rows(t);
        let y = selective_scan(&rev(x), &rev(delta), a, &rev(b), &rev(c), Direction::Forward)?;
        return Ok(reverse_rows(&y));
    }
    let tr = scan_forward(x.data(), delta.data(), a.data(), b.data(), c.data(), d, false);
    Tensor::new(vec![d.len, d.channels], tr.y)
}

pub fn reverse_rows(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(t.len());
    for row in t.data().chunks(cols).rev() {
        data.extend_from_slice(row);
    }
    Tensor::from_parts(t.shape().to_vec(), data)
}

impl Tape {
    /// Differentiable forward-direction scan.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let d = scan_dims(self.value(x), self.value(delta), self.value(a), self.value(b), self.value(c))?;
        let v = |var: Var| self.value(var).data();
        let mut tr = scan_forward(v(x), v(delta), v(a), v(b), v(c), d, true);
        let value = Tensor::from_parts(vec![d.len, d.channels], std::mem::take(&mut tr.y));
        Ok(self.record(
            &[x, delta, a, b, c],
            value,
            Box::new(move |g, inp, _, needs| {
                let v = |i: usize| inp[i].data();
                let grads = scan_backward(g.data(), v(0), v(1), v(2), v(3), v(4), &tr, d);
                grads
                    .into_iter()
                    .enumerate()
                    .map(|(i, gi)| needs[i].then(|| Tensor::from_parts(inp[i].shape().to_vec(), gi)))
                    .collect()
            }),
        ))
    }
}

/// Shape hyperparameters of a bidirectional block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub expand: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub dt_rank: usize,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        MambaConfig {
            d_model,
            expand: 2,
            d_state: 16,
            conv_width: 4,
            dt_rank: d_model.div_ceil(16),
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }
}

const DIRS: [(&str, Direction); 2] = [("fwd", Direction::Forward), ("bwd", Direction::Backward)];

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Registers the parameters of one block under `prefix`.
pub fn init_block<R: Rng + ?Sized>(params: &mut ParamStore, prefix: &str, cfg: &MambaConfig, rng: &mut R) {
    let (d, e, n, r, w) = (cfg.d_model, cfg.inner(), cfg.d_state, cfg.dt_rank, cfg.conv_width);
    let mut put = |name: &str, t: Tensor| params.insert(format!("{prefix}.{name}"), t);
    put("ln.g", Tensor::ones(&[d]));
    put("ln.b", Tensor::zeros(&[d]));
    put("time.w", uniform_init(&[d, d], d, rng));
    put("time.b", Tensor::zeros(&[d]));
    put("gate.w", uniform_init(&[d, e], d, rng));
    put("gate.b", Tensor::zeros(&[e]));
    put("in.w", uniform_init(&[d, e], d, rng));
    put("in.b", Tensor::zeros(&[e]));
    for (dir, _) in DIRS {
        put(&format!("{dir}.conv.k"), uniform_init(&[e, w], w, rng));
        put(&format!("{dir}.conv.b"), Tensor::zeros(&[e]));
        put(&format!("{dir}.dt_down.w"), uniform_init(&[e, r], e, rng));
        put(&format!("{dir}.dt_up.w"), uniform_init(&[r, e], r, rng));
        // softplus(bias) log-uniform in [1e-3, 1e-1]
        let bias: Vec<f64> = (0..e)
            .map(|_| {
                let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        put(&format!("{dir}.dt.b"), Tensor::vector(bias));
        put(&format!("{dir}.b.w"), uniform_init(&[e, n], e, rng));
        put(&format!("{dir}.c.w"), uniform_init(&[e, n], e, rng));
        let a_log: Vec<f64> = (0..e).flat_map(|_| (0..n).map(|s| ((s + 1) as f64).ln())).collect();
        put(&format!("{dir}.a_log"), Tensor::new(vec![e, n], a_log).unwrap());
    }
    put("out.w", uniform_init(&[e, d], e, rng));
    put("out.b", Tensor::zeros(&[d]));
}

fn scan_branch(tape: &mut Tape, p: &Bound, prefix: &str, u: Var, direction: Direction) -> Result<Var> {
    let dir = match direction {
        Direction::Forward => "fwd",
        Direction::Backward => "bwd",
    };
    let v = |name: &str| p.var(&format!("{prefix}.{dir}.{name}"));
    let seq = match direction {
        Direction::Forward => u,
        Direction::Backward => tape.reverse_rows(u)?,
    };
    let channels_first = tape.transpose(seq)?;
    let conv = tape.conv1d(channels_first, v("conv.k")?, true)?;
    let conv = tape.transpose(conv)?;
    let conv = tape.add_row(conv, v("conv.b")?)?;
    let xs = tape.silu(conv);
    let dt_low = tape.matmul(xs, v("dt_down.w")?)?;
    let dt = tape.matmul(dt_low, v("dt_up.w")?)?;
    let dt = tape.add_row(dt, v("dt.b")?)?;
    let delta = tape.softplus(dt);
    let b = tape.matmul(xs, v("b.w")?)?;
    let c = tape.matmul(xs, v("c.w")?)?;
    let a = tape.exp(v("a_log")?);
    let a = tape.scale(a, -1.0);
    let y = tape.selective_scan(xs, delta, a, b, c)?;
    match direction {
        Direction::Forward => Ok(y),
        Direction::Backward => tape.reverse_rows(y),
    }
}

/// One bidirectional block on a serialized sequence `z_prev: [M, D]`.
///
/// `LN -> (gate = SiLU(Linear), scan = Linear -> causal conv -> SiLU ->
/// forward + backward selective scans) -> gate ⊙ scan -> Linear -> + z_prev`.
/// `time`, when given, is a `[1, D]` embedding projected and added after
/// the layer norm.
pub fn mamba_block(tape: &mut Tape, p: &Bound, prefix: &str, z_prev: Var, time: Option<Var>) -> Result<Var> {
    let v = |name: &str| p.var(&format!("{prefix}.{name}"));
    let shape = tape.shape(z_prev).to_vec();
    let d = tape.shape(v("ln.g")?)[0];
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::shape("mamba_block", &shape, &[shape.first().copied().unwrap_or(0), d]));
    }
    let mut zn = tape.layer_norm(z_prev, v("ln.g")?, v("ln.b")?, 1e-5)?;
    if let Some(t) = time {
        let tp = tape.linear(t, v("time.w")?, v("time.b")?)?;
        let row = tape.reshape(tp, &[d])?;
        zn = tape.add_row(zn, row)?;
    }
    let gate = tape.linear(zn, v("gate.w")?, v("gate.b")?)?;
    let gate = tape.silu(gate);
    let u = tape.linear(zn, v("in.w")?, v("in.b")?)?;
    let yf = scan_branch(tape, p, prefix, u, Direction::Forward)?;
    let yb = scan_branch(tape, p, prefix, u, Direction::Backward)?;
    let both = tape.add(yf, yb)?;
    let gated = tape.mul(gate, both)?;
    let out = tape.linear(gated, v("out.w")?, v("out.b")?)?;
    tape.add(out, z_prev)
}

/// Sequential composition of blocks `{prefix}.0`, `{prefix}.1`, ...
pub fn mamba_stack(tape: &mut Tape, p: &Bound, prefix: &str, depth: usize, z0: Var, time: Option<Var>) -> Result<Var> {
    if depth == 0 {
        return Err(Error::invalid("mamba_stack needs at least one block"));
    }
    let mut z = z0;
    for i in 0..depth {
        z = mamba_block(tape, p, &format!("{prefix}.{i}"), z, time)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zoh_scalar_values() {
        let d = zoh_discretize(&SsmParams {
            a: vec![-1.0],
            b: vec![1.0],
            c: vec![1.0],
            delta: 1.0,
        })
        .unwrap();
        assert!((d.a_bar[0] - (-1f64).exp()).abs() < 1e-15);
        assert!((d.b_bar[0] - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((d.a_bar[0] - 0.3679).abs() < 1e-4);
        assert!((d.b_bar[0] - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn zoh_zero_limit() {
        let d = zoh_discretize(&SsmParams {
            a: vec![0.0, 1e-12],
            b: vec![2.0, 3.0],
            c: vec![0.0, 0.0],
            delta: 0.25,
        })
        .unwrap();
        assert_eq!(d.a_bar[0], 1.0);
        assert_eq!(d.b_bar, vec![0.5, 0.75]);
        assert!(zoh_discretize(&SsmParams { a: vec![-1.0], b: vec![1.0], c: vec![1.0], delta: 0.0 }).is_err());
    }

    #[test]
    fn zoh_is_stable_for_negative_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = -rng.random_range(1e-6..50.0);
            let delta = rng.random_range(1e-6..10.0);
            let (ab, s) = zoh_coefficients(a, delta);
            assert!(ab.abs() < 1.0 && s > 0.0);
        }
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn zero_readout_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, e, n) = (7, 3, 4);
        let x = rand_t(&[l, e], &mut rng);
        let delta = Tensor::full(&[l, e], 0.3);
        let a = Tensor::full(&[e, n], -1.0);
        let b = rand_t(&[l, n], &mut rng);
        let y = selective_scan(&x, &delta, &a, &b, &Tensor::zeros(&[l, n]), Direction::Forward).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_has_no_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (e, n) = (2, 3);
        let x = rand_t(&[1, e], &mut rng);
        let delta = Tensor::full(&[1, e], 0.7);
        let a = Tensor::new(vec![e, n], vec![-1.0, -2.0, -3.0, -0.5, -1.5, -2.5]).unwrap();
        let b = rand_t(&[1, n], &mut rng);
        let c = rand_t(&[1, n], &mut rng);
        let fwd = selective_scan(&x, &delta, &a, &b, &c, Direction::Forward).unwrap();
        let bwd = selective_scan(&x, &delta, &a, &b, &c, Direction::Backward).unwrap();
        assert_eq!(fwd, bwd);
        for ch in 0..e {
            let want: f64 = (0..n)
                .map(|s| {
                    let (_, sc) = zoh_coefficients(a.at2(ch, s), 0.7);
                    c.data()[s] * sc * b.data()[s] * x.data()[ch]
                })
                .sum();
            assert!((fwd.data()[ch] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_scan_is_reversed_forward_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, e, n) = (9, 2, 3);
        let x = rand_t(&[l, e], &mut rng);
        let delta = Tensor::uniform(&[l, e], 0.01, 0.5, &mut rng);
        let a = Tensor::uniform(&[e, n], -3.0, -0.1, &mut rng);
        let b = rand_t(&[l, n], &mut rng);
        let c = rand_t(&[l, n], &mut rng);
        let bwd = selective_scan(&x, &delta, &a, &b, &c, Direction::Backward).unwrap();
        let r = reverse_rows;
        let manual = r(&selective_scan(&r(&x), &r(&delta), &a, &r(&b), &r(&c), Direction::Forward).unwrap());
        assert_eq!(bwd, manual);
    }

    #[test]
    fn zero_out_projection_makes_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MambaConfig::new(8);
        let mut params = ParamStore::new();
        init_block(&mut params, "blk", &cfg, &mut rng);
        params.insert("blk.out.w", Tensor::zeros(&[cfg.inner(), 8]));
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let z = tape.constant(rand_t(&[6, 8], &mut rng));
        let t = tape.constant(rand_t(&[1, 8], &mut rng));
        let out = mamba_block(&mut tape, &p, "blk", z, Some(t)).unwrap();
        assert_eq!(tape.value(out), tape.value(z));
    }

    #[test]
    fn block_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = MambaConfig::new(8);
        let mut params = ParamStore::new();
        init_block(&mut params, "blk", &cfg, &mut rng);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let z = tape.constant(Tensor::zeros(&[4, 6]));
        assert!(matches!(mamba_block(&mut tape, &p, "blk", z, None), Err(Error::Shape { .. })));
    }
}
