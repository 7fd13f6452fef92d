//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! before asserting.
//!
//! The desk training run is shared between the last two checks and takes
//! tens of minutes on a single core.

mod common;

use std::sync::OnceLock;
use std::io::Write;
use std::time::{Duration, Instant};

use common::{chamfer_oracle, convolution_oracle, coverage_reference, emd_brute, one_nna_reference, random_cloud, spectral_oracle};
use pcdiff::autodiff::gradcheck::check_gradients;
use pcdiff::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use pcdiff::curves::{decode, encode, hilbert_decode, CurveCode, CurveKind};
use pcdiff::diffusion::{
    from_diffusion_space, sample, sample_with_draws, standard_normal, to_diffusion_space, train, Network, NoiseSchedule, OracleDenoiser,
    TrainConfig,
};
use pcdiff::geometry::{farthest_point_sampling, normalize_to_unit_cube, Point};
use pcdiff::io::{synth_dataset, ShapeKind};
use pcdiff::metrics::{chamfer, coverage, emd_exact, one_nna, one_nna_abs50, DistanceKind};
use pcdiff::model::{eps_theta_on, init_params, ModelConfig};
use pcdiff::spectral::{build_graph, frequency_order, high_pass_filter, time_variant_sample};
use pcdiff::ssm::{init_block, mamba_block, selective_scan, Direction, MambaConfig};
use pcdiff::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Written to the raw handle so the line shows up even when the harness
// captures output of passing tests.
fn report(id: u32, ok: bool, what: &str, detail: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "\n{} criterion {id}: {what}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

// ---------------------------------------------------------------- 1

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Case = (String, Vec<Tensor>, CaseFn);

fn op_cases(r: &mut ChaCha8Rng) -> Vec<Case> {
    let mut n = |s: &[usize]| Tensor::randn(s, 1.0, r);
    let mut cases: Vec<Case> = Vec::new();
    let mut add = |name: &str, inputs: Vec<Tensor>, f: CaseFn| cases.push((name.to_string(), inputs, f));
    let ab = vec![n(&[3, 4]), n(&[3, 4])];
    add("add", ab.clone(), Box::new(|t, v| t.add(v[0], v[1])));
    add("sub", ab.clone(), Box::new(|t, v| t.sub(v[0], v[1])));
    add("mul", ab.clone(), Box::new(|t, v| t.mul(v[0], v[1])));
    add("mse", ab, Box::new(|t, v| t.mse(v[0], v[1])));
    let x = vec![n(&[4, 5]).map(|v| 2.0 * v)];
    add("scale", x.clone(), Box::new(|t, v| Ok(t.scale(v[0], -1.3))));
    add("add_scalar", x.clone(), Box::new(|t, v| Ok(t.add_scalar(v[0], 0.4))));
    add("sigmoid", x.clone(), Box::new(|t, v| Ok(t.sigmoid(v[0]))));
    add("silu", x.clone(), Box::new(|t, v| Ok(t.silu(v[0]))));
    add("swish", x.clone(), Box::new(|t, v| Ok(t.swish(v[0]))));
    add("softplus", x.clone(), Box::new(|t, v| Ok(t.softplus(v[0]))));
    add("exp", x.clone(), Box::new(|t, v| Ok(t.exp(v[0]))));
    add("sum", x.clone(), Box::new(|t, v| Ok(t.sum(v[0]))));
    add("mean", x.clone(), Box::new(|t, v| Ok(t.mean(v[0]))));
    add("reverse_rows", x.clone(), Box::new(|t, v| t.reverse_rows(v[0])));
    add("transpose", x.clone(), Box::new(|t, v| t.transpose(v[0])));
    add("reshape", x.clone(), Box::new(|t, v| t.reshape(v[0], &[2, 10])));
    add("gather_rows", x.clone(), Box::new(|t, v| t.gather_rows(v[0], &[3, 1, 1, 0])));
    add("embedding", x, Box::new(|t, v| t.embedding(v[0], &[2, 2, 0])));
    add("linear", vec![n(&[4, 3]), n(&[3, 5]), n(&[5])], Box::new(|t, v| t.linear(v[0], v[1], v[2])));
    add("matmul", vec![n(&[4, 3]), n(&[3, 5])], Box::new(|t, v| t.matmul(v[0], v[1])));
    add("add_row", vec![n(&[5, 4]), n(&[4])], Box::new(|t, v| t.add_row(v[0], v[1])));
    add("mul_row", vec![n(&[5, 4]), n(&[4])], Box::new(|t, v| t.mul_row(v[0], v[1])));
    add("concat_cols", vec![n(&[4, 3]), n(&[4, 2])], Box::new(|t, v| t.concat_cols(v[0], v[1])));
    add("conv1d causal", vec![n(&[3, 7]), n(&[3, 4])], Box::new(|t, v| t.conv1d(v[0], v[1], true)));
    add("conv1d centred", vec![n(&[3, 7]), n(&[3, 3])], Box::new(|t, v| t.conv1d(v[0], v[1], false)));
    add("conv3d", vec![n(&[2, 4, 4, 4]), n(&[3, 2, 3, 3, 3]), n(&[3])], Box::new(|t, v| t.conv3d(v[0], v[1], v[2], 1, 1)));
    add("conv3d strided", vec![n(&[2, 5, 5, 5]), n(&[2, 2, 3, 3, 3]), n(&[2])], Box::new(|t, v| t.conv3d(v[0], v[1], v[2], 2, 1)));
    add("group_norm", vec![n(&[4, 2, 2, 2]), n(&[4]), n(&[4])], Box::new(|t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5)));
    add("layer_norm", vec![n(&[3, 6]), n(&[6]), n(&[6])], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)));
    let pts: Vec<Point> = (0..40).map(|_| [r.random(), r.random(), r.random()]).collect();
    let q: Vec<Point> = (0..12).map(|_| [r.random(), r.random(), r.random()]).collect();
    let feats = Tensor::randn(&[40, 3], 1.0, r);
    add("voxelize", vec![feats], Box::new(move |t, v| t.voxelize(v[0], &pts, 3)));
    let vol = Tensor::randn(&[2, 4, 4, 4], 1.0, r);
    add("trilinear_query", vec![vol], Box::new(move |t, v| t.trilinear_query(v[0], &q)));
    let scan = vec![
        Tensor::randn(&[7, 5], 1.0, r),
        Tensor::uniform(&[7, 5], 0.05, 0.6, r),
        Tensor::uniform(&[5, 4], -2.0, -0.2, r),
        Tensor::randn(&[7, 4], 1.0, r),
        Tensor::randn(&[7, 4], 1.0, r),
    ];
    cases.push(("selective_scan".into(), scan, Box::new(|t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4]))));
    cases
}

fn params_case<F>(name: &str, params: &ParamStore, extra: Vec<Tensor>, f: F) -> Case
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + 'static,
{
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(extra);
    let np = names.len();
    (
        name.into(),
        inputs,
        Box::new(move |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars[..np].iter().copied()));
            f(tape, &bound, &vars[np..])
        }),
    )
}

#[test]
fn c1_gradient_suite() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut cases = op_cases(&mut r);
    let mut block = ParamStore::new();
    init_block(&mut block, "b", &MambaConfig::new(6), &mut r);
    let extra = vec![Tensor::randn(&[9, 6], 1.0, &mut r), Tensor::randn(&[1, 6], 1.0, &mut r)];
    cases.push(params_case("mamba_block", &block, extra, |t, p, v| mamba_block(t, p, "b", v[0], Some(v[1]))));
    let cfg = ModelConfig {
        n_points: 64,
        latent_points: 16,
        latent_dim: 16,
        depth: 1,
        k: 8,
        tau: 5,
        steps: 100,
        voxel_resolution: 4,
        conv_channels: 8,
        groups: 4,
        curve_bits: 4,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, 21).unwrap();
    let x = Tensor::randn(&[64, 3], 1.0, &mut r);
    for t in [3, 60] {
        let (c, x) = (cfg.clone(), x.clone());
        cases.push(params_case(&format!("eps_theta t={t}"), &params, vec![], move |tape, p, _| eps_theta_on(tape, p, &c, &x, t)));
    }

    let mut worst = (0.0f64, String::new());
    let mut fewest = usize::MAX;
    for (name, inputs, f) in &cases {
        let rep = check_gradients(inputs, f, 1e-4, 24, 11).unwrap();
        fewest = fewest.min(rep.probes.len());
        if rep.max_rel_error() >= worst.0 {
            worst = (rep.max_rel_error(), name.clone());
        }
    }
    let elapsed = start.elapsed();
    let ok = worst.0 < 1e-5 && fewest >= 20 && elapsed < Duration::from_secs(120);
    report(
        1,
        ok,
        "finite-difference gradients",
        format!("{} cases, worst {:.2e} ({}), min probes {fewest}, {:.1}s", cases.len(), worst.0, worst.1, elapsed.as_secs_f64()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 2

#[test]
fn c2_scan_equals_convolution() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (ch, len, st) = (r.random_range(1..=4), r.random_range(1..=64), r.random_range(1..=8));
        let x = Tensor::randn(&[len, ch], 1.0, &mut r);
        let delta: Vec<f64> = (0..ch).map(|_| r.random_range(0.01..1.0)).collect();
        let a = Tensor::uniform(&[ch, st], -3.0, -0.05, &mut r);
        let b: Vec<f64> = (0..st).map(|_| r.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..st).map(|_| r.random_range(-1.0..1.0)).collect();
        let rows = |v: &[f64]| Tensor::new(vec![len, v.len()], (0..len).flat_map(|_| v.iter().copied()).collect()).unwrap();
        let y = selective_scan(&x, &rows(&delta), &a, &rows(&b), &rows(&c), Direction::Forward).unwrap();
        let want = convolution_oracle(&x, &delta, &a, &b, &c);
        worst = y.data().iter().zip(&want).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-8 && elapsed < Duration::from_secs(10);
    report(2, ok, "LTI scan vs convolution kernel", format!("50 instances, max deviation {worst:.2e}, {:.2}s", elapsed.as_secs_f64()));
    assert!(ok);
}

// ---------------------------------------------------------------- 3

#[test]
fn c3_filter_equals_eigendecomposition() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(103);
    let (mut worst, mut dc, mut checked, mut skipped) = (0.0f64, 0.0f64, 0, 0);
    while checked < 20 {
        let n = r.random_range(6..=32);
        let k = r.random_range(2..n.min(9));
        let pts = random_cloud(n, &mut r);
        let g = build_graph(&pts, k, None).unwrap();
        let s = Tensor::randn(&[n, 3], 1.0, &mut r);
        let Some(want) = spectral_oracle(&g.weighted_dense(), n, &s) else {
            skipped += 1;
            continue;
        };
        let got = high_pass_filter(&g, &s).unwrap();
        worst = got.data().iter().zip(&want).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
        let c = high_pass_filter(&g, &Tensor::full(&[n, 3], r.random_range(-10.0..10.0))).unwrap();
        dc = c.data().iter().fold(dc, |m, v| m.max(v.abs()));
        checked += 1;
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-8 && dc < 1e-12 && elapsed < Duration::from_secs(10);
    report(
        3,
        ok,
        "high-pass filter vs dense eigendecomposition",
        format!("20 graphs ({skipped} defective draws redrawn), max deviation {worst:.2e}, constant residual {dc:.1e}, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 4

#[test]
fn c4_curves() {
    let start = Instant::now();
    let mut bijective = true;
    for bits in 1..=4u32 {
        let side = 1u32 << bits;
        for kind in CurveKind::ALL {
            let mut seen = vec![false; 1 << (3 * bits)];
            for x in 0..side {
                for y in 0..side {
                    for z in 0..side {
                        let code = encode(kind, [x, y, z], bits).unwrap();
                        let k = code.key as usize;
                        bijective &= k < seen.len() && !seen[k] && decode(kind, code).unwrap() == [x, y, z];
                        if k < seen.len() {
                            seen[k] = true;
                        }
                    }
                }
            }
            bijective &= seen.iter().all(|&s| s);
        }
    }
    let (mut steps, mut adjacent) = (0usize, 0usize);
    for bits in 1..=4u32 {
        let cells: Vec<[u32; 3]> = (0..1u64 << (3 * bits)).map(|key| hilbert_decode(CurveCode { key, bits_per_axis: bits }).unwrap()).collect();
        for w in cells.windows(2) {
            steps += 1;
            let l1: u32 = (0..3).map(|a| w[0][a].abs_diff(w[1][a])).sum();
            adjacent += usize::from(l1 == 1);
        }
    }
    let elapsed = start.elapsed();
    let ok = bijective && adjacent == steps && elapsed < Duration::from_secs(30);
    report(4, ok, "curve bijectivity and Hilbert adjacency", format!("bijective {bijective}, adjacent steps {adjacent}/{steps}, {:.2}s", elapsed.as_secs_f64()));
    assert!(ok);
}

// ---------------------------------------------------------------- 5

#[test]
fn c5_metrics() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(105);
    let mut emd_equal = 0;
    for _ in 0..100 {
        let n = r.random_range(1..=6);
        let x = random_cloud(n, &mut r);
        let y = random_cloud(n, &mut r);
        emd_equal += usize::from(emd_exact(&x, &y).unwrap() == emd_brute(&x, &y));
    }
    let mut cd_equal = 0;
    for _ in 0..100 {
        let x = random_cloud(r.random_range(1..50), &mut r);
        let y = random_cloud(r.random_range(1..50), &mut r);
        cd_equal += usize::from(chamfer(&x, &y).unwrap() == chamfer_oracle(&x, &y));
    }
    let mut sets_equal = 0;
    for trial in 0..10 {
        let gen: Vec<Vec<Point>> = (0..8).map(|_| random_cloud(24, &mut r).into_iter().map(|p| p.map(|c| c + 0.04 * trial as f64)).collect()).collect();
        let refs: Vec<Vec<Point>> = (0..8).map(|_| random_cloud(24, &mut r)).collect();
        let cd = |a: &[Point], b: &[Point]| chamfer_oracle(a, b);
        let em = |a: &[Point], b: &[Point]| emd_brute_or_exact(a, b);
        let same = one_nna(&gen, &refs, DistanceKind::Chamfer, 512).unwrap() == one_nna_reference(&gen, &refs, cd)
            && coverage(&gen, &refs, DistanceKind::Chamfer, 512).unwrap() == coverage_reference(&gen, &refs, cd)
            && one_nna(&gen, &refs, DistanceKind::Emd, 512).unwrap() == one_nna_reference(&gen, &refs, em)
            && coverage(&gen, &refs, DistanceKind::Emd, 512).unwrap() == coverage_reference(&gen, &refs, em);
        sets_equal += usize::from(same);
    }
    let abs = one_nna_abs50(50.0);
    let elapsed = start.elapsed();
    let ok = emd_equal == 100 && cd_equal == 100 && sets_equal == 10 && abs == 0.0 && elapsed < Duration::from_secs(60);
    report(
        5,
        ok,
        "metrics vs brute-force references",
        format!("EMD {emd_equal}/100 exact, CD {cd_equal}/100 exact, 1-NNA/COV {sets_equal}/10 set pairs, abs50(50) = {abs}, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

/// EMD on 24-point clouds cannot be enumerated; the set-level reference
/// uses the exact solver so only the 1-NNA/COV logic is under test there.
fn emd_brute_or_exact(a: &[Point], b: &[Point]) -> f64 {
    if a.len() <= 6 {
        emd_brute(a, b)
    } else {
        emd_exact(a, b).unwrap()
    }
}

// ---------------------------------------------------------------- 6

#[test]
fn c6_oracle_reverse_chain() {
    let start = Instant::now();
    let sched = NoiseSchedule::scaled_linear(100).unwrap();
    let clouds = synth_dataset(ShapeKind::Torus, 10, 256, 106).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(106);
    let mut worst = 0.0f64;
    for pc in &clouds {
        let x0 = to_diffusion_space(pc);
        let den = OracleDenoiser { x0: &x0, schedule: &sched };
        let draws: Vec<Tensor> = (0..100).map(|_| standard_normal(&[256, 3], &mut r)).collect();
        let xt = standard_normal(&[256, 3], &mut r);
        let first = sample_with_draws(&den, &xt, &sched, &draws).unwrap();
        // replaying the same draws must give the same trajectory
        let again = sample_with_draws(&den, &xt, &sched, &draws).unwrap();
        assert_eq!(first, again);
        worst = worst.max(first.max_abs_diff(&x0));
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-5 && elapsed < Duration::from_secs(30);
    report(6, ok, "oracle denoiser reverse chain, T=100", format!("10 clouds, max |x0_hat - x0| = {worst:.2e}, {:.2}s", elapsed.as_secs_f64()));
    assert!(ok);
}

// ---------------------------------------------------------------- 7

#[test]
fn c7_time_variant_sampler() {
    let start = Instant::now();
    let pc = synth_dataset(ShapeKind::CubeEdges, 1, 2048, 107).unwrap().remove(0);
    let unit = normalize_to_unit_cube(&pc.coords);
    let g = build_graph(&unit, 32, None).unwrap();
    let top = frequency_order(&unit, &g).unwrap().top(224).to_vec();
    let fps = farthest_point_sampling(&unit, 256, 0).unwrap();
    let mut ok = true;
    let mut seen = Vec::new();
    for t in [1, 25, 50, 51, 75, 100, 1000] {
        let s = time_variant_sample(&unit, 256, t, 50, 0.875, Some(&g)).unwrap();
        let mut distinct = s.indices.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let good = if t <= 50 {
            s.frequency_count == 224 && s.indices[..224] == top[..] && distinct.len() == 256
        } else {
            s.frequency_count == 0 && s.indices == fps
        };
        ok &= good;
        seen.push(format!("t={t}: {}+{}", s.frequency_count, s.indices.len() - s.frequency_count));
    }
    let elapsed = start.elapsed();
    let ok = ok && elapsed < Duration::from_secs(5);
    report(7, ok, "time-variant sampler split", format!("{}, {:.2}s", seen.join(", "), elapsed.as_secs_f64()));
    assert!(ok);
}

// ---------------------------------------------------------------- 8, 9

const DESK_EPOCHS: usize = 300;
const DESK_SAMPLES: usize = 32;

fn desk_model(zeta: f64) -> ModelConfig {
    ModelConfig {
        n_points: 256,
        latent_points: 64,
        latent_dim: 64,
        depth: 2,
        curves: (CurveKind::Z, CurveKind::ZTrans),
        k: 16,
        zeta,
        tau: 5,
        steps: 100,
        voxel_resolution: 8,
        conv_channels: 16,
        groups: 4,
        ..ModelConfig::default()
    }
}

fn train_set() -> &'static Vec<Vec<Point>> {
    static DATA: OnceLock<Vec<Vec<Point>>> = OnceLock::new();
    DATA.get_or_init(|| synth_dataset(ShapeKind::CubeEdges, 200, 256, 1).unwrap().into_iter().map(|pc| pc.coords).collect())
}

struct DeskRun {
    losses: Vec<f64>,
    samples: Vec<Vec<Point>>,
    elapsed: Duration,
}

fn desk_run(zeta: f64) -> DeskRun {
    let start = Instant::now();
    let cfg = desk_model(zeta);
    let sched = NoiseSchedule::scaled_linear(cfg.steps).unwrap();
    let xs: Vec<Tensor> = synth_dataset(ShapeKind::CubeEdges, 200, 256, 1).unwrap().iter().map(to_diffusion_space).collect();
    let tc = TrainConfig {
        epochs: DESK_EPOCHS,
        batch: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    assert_eq!(tc.adam.lr, 2e-4);
    let rep = train(&xs, &cfg, &sched, &tc, init_params(&cfg, 1).unwrap(), |e, l, _| {
        if e % 25 == 0 || e == 1 {
            eprintln!("zeta {zeta}: epoch {e} loss {l:.4} ({:.0}s)", start.elapsed().as_secs_f64());
        }
    })
    .unwrap();
    let net = Network { params: &rep.params, config: &cfg };
    let samples = (0..DESK_SAMPLES as u64)
        .map(|i| from_diffusion_space(&sample(&net, 256, &sched, 7000 + i).unwrap()).unwrap().coords)
        .collect();
    DeskRun {
        losses: rep.losses,
        samples,
        elapsed: start.elapsed(),
    }
}

fn main_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| desk_run(0.875))
}

/// Chamfer distance from a cloud to the nearest member of the training set.
fn cd_to_set(c: &[Point], set: &[Vec<Point>]) -> f64 {
    set.iter().map(|d| chamfer(c, d).unwrap()).fold(f64::INFINITY, f64::min)
}

fn mean_cd_to_set(clouds: &[Vec<Point>], set: &[Vec<Point>]) -> f64 {
    clouds.iter().map(|c| cd_to_set(c, set)).sum::<f64>() / clouds.len() as f64
}

/// Gaussian clouds with the per-axis mean and spread of the training points.
fn matched_gaussians(set: &[Vec<Point>], count: usize, n: usize, seed: u64) -> Vec<Vec<Point>> {
    let all: Vec<&Point> = set.iter().flatten().collect();
    let m = all.len() as f64;
    let mu: [f64; 3] = [0, 1, 2].map(|a| all.iter().map(|p| p[a]).sum::<f64>() / m);
    let sd: [f64; 3] = [0, 1, 2].map(|a| (all.iter().map(|p| (p[a] - mu[a]).powi(2)).sum::<f64>() / m).sqrt());
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z = standard_normal(&[n, 3], &mut r);
            z.data().chunks(3).map(|c| [0, 1, 2].map(|a| mu[a] + sd[a] * c[a])).collect()
        })
        .collect()
}

#[test]
fn c8_desk_training() {
    let run = main_run();
    let data = train_set();
    let (first, last) = (run.losses[0], *run.losses.last().unwrap());
    let loss_ok = last <= 0.5 * first;
    let cd_samples = mean_cd_to_set(&run.samples, data);
    let cd_gauss = mean_cd_to_set(&matched_gaussians(data, DESK_SAMPLES, 256, 808), data);
    let ratio = cd_samples / cd_gauss;
    let held: Vec<Vec<Point>> = synth_dataset(ShapeKind::CubeEdges, 32, 256, 2024).unwrap().into_iter().map(|pc| pc.coords).collect();
    let cov = coverage(&run.samples, &held, DistanceKind::Chamfer, 512).unwrap();
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    let ok = loss_ok && ratio <= 0.25 && cov >= 25.0;
    report(
        8,
        ok,
        "desk training",
        format!(
            "(a) loss {first:.4} -> {last:.4} (ratio {:.3}), (b) sample CD {cd_samples:.5} vs Gaussian {cd_gauss:.5} (ratio {ratio:.3}), (c) COV-CD {cov:.1}%, {minutes:.1} min{}",
            last / first,
            if minutes > 45.0 { " (over the 45 min target)" } else { "" }
        ),
    );
    assert!(loss_ok, "final loss {last} above half of the first epoch's {first}");
    assert!(ratio <= 0.25, "sample-to-train CD ratio {ratio}");
    assert!(cov >= 25.0, "coverage {cov}");
}

#[test]
fn c9_frequency_ablation() {
    let data = train_set();
    let with = mean_cd_to_set(&main_run().samples, data);
    let without = mean_cd_to_set(&desk_run(0.0).samples, data);
    let inverted = with > without;
    report(
        9,
        true,
        "zeta 0.875 vs zeta 0",
        format!(
            "sample-to-train CD {with:.5} (zeta 0.875) vs {without:.5} (zeta 0){}",
            if inverted { "; INVERSION FLAGGED: frequency-aware sampling did not help at desk scale" } else { "" }
        ),
    );
}
