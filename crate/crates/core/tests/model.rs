use pcdiff::autodiff::{ParamStore, Tape, Tensor};
use pcdiff::curves::CurveKind;
use pcdiff::geometry::normalize_to_unit_cube;
use pcdiff::model::{dual_stream, eps_theta, eps_theta_on, init_params, tf_encode, time_embedding, timestep_embedding, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> ModelConfig {
    ModelConfig {
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
    }
}

fn noisy(n: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn output_shape_and_determinism() {
    let cfg = desk();
    let p = init_params(&cfg, 1).unwrap();
    let x = noisy(cfg.n_points, 2);
    for t in [1, 5, 6, 100] {
        let a = eps_theta(&p, &cfg, &x, t).unwrap();
        assert_eq!(a.shape(), &[64, 3]);
        assert!(a.is_finite());
        assert_eq!(a, eps_theta(&p, &cfg, &x, t).unwrap());
    }
    assert_eq!(init_params(&cfg, 1).unwrap().iter().count(), p.len());
}

#[test]
fn full_scale_forward_pass() {
    let cfg = ModelConfig::default();
    assert_eq!((cfg.n_points, cfg.latent_points, cfg.latent_dim, cfg.depth), (2048, 256, 512, 8));
    let cfg = ModelConfig { depth: 1, latent_dim: 64, ..cfg };
    let p = init_params(&cfg, 1).unwrap();
    let x = noisy(cfg.n_points, 3);
    let y = eps_theta(&p, &cfg, &x, 10).unwrap();
    assert_eq!(y.shape(), &[2048, 3]);
    assert!(y.is_finite());
}

#[test]
fn timestep_changes_the_output() {
    let cfg = desk();
    let p = init_params(&cfg, 4).unwrap();
    let x = noisy(cfg.n_points, 5);
    let a = eps_theta(&p, &cfg, &x, 60).unwrap();
    let b = eps_theta(&p, &cfg, &x, 61).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-8);
    let e1 = timestep_embedding(1, 16);
    let e2 = timestep_embedding(2, 16);
    assert_eq!(e1.len(), 16);
    assert!(e1.iter().zip(&e2).any(|(a, b)| (a - b).abs() > 1e-3));
    assert!((e1[0] - 1f64.sin()).abs() < 1e-15 && (e1[8] - 1f64.cos()).abs() < 1e-15);
}

/// Relabels the cloud and maps the FPS start along with it; the
/// prediction must follow the relabelling.
#[test]
fn permutation_equivariance() {
    let cfg = desk();
    let p = init_params(&cfg, 6).unwrap();
    let x = noisy(cfg.n_points, 7);
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut perm: Vec<usize> = (0..cfg.n_points).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
    let xp = Tensor::from_rows(&rows).unwrap();
    let moved = ModelConfig { fps_seed: perm.iter().position(|&i| i == 0).unwrap(), ..cfg.clone() };
    for t in [2, 80] {
        let y = eps_theta(&p, &cfg, &x, t).unwrap();
        let yp = eps_theta(&p, &moved, &xp, t).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((yp.at2(j, c) - y.at2(i, c)).abs() < 1e-9, "t={t}");
            }
        }
    }
}

#[test]
fn streams_return_latent_order() {
    // with identical curves, the two streams see the same sequence, so equal
    // fusion weights make the stream outputs interchangeable
    let cfg = ModelConfig { curves: (CurveKind::Hilbert, CurveKind::Hilbert), ..desk() };
    let mut p = init_params(&cfg, 9).unwrap();
    let names: Vec<String> = p.iter().filter(|(n, _)| n.starts_with("s1.")).map(|(n, _)| n.clone()).collect();
    for n in names {
        let v = p.get(&n).unwrap().clone();
        p.insert(n.replacen("s1.", "s2.", 1), v);
    }
    let x = noisy(cfg.n_points, 10);
    let mut tape = Tape::new();
    let b = p.bind_constant(&mut tape);
    let temb = time_embedding(&mut tape, &b, &cfg, 70).unwrap();
    let latent = tf_encode(&mut tape, &b, &cfg, &x, 70, temb).unwrap();
    assert_eq!(latent.frequency_count, 0);
    let z = pcdiff::model::stream(&mut tape, &b, &cfg, "s1", CurveKind::Hilbert, &latent, Some(temb)).unwrap();
    let z2 = pcdiff::model::stream(&mut tape, &b, &cfg, "s2", CurveKind::Hilbert, &latent, Some(temb)).unwrap();
    assert_eq!(tape.value(z), tape.value(z2));
    let zs = tape.value(z).clone();
    // un-permuting: row i still belongs to latent point i, so setting every
    // block's output projection to zero returns the encoder features exactly
    let mut zeroed: ParamStore = p.clone();
    for (n, t) in zeroed.iter_mut() {
        if n.ends_with(".out.w") || n.ends_with(".out.b") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let mut tape2 = Tape::new();
    let b2 = zeroed.bind_constant(&mut tape2);
    let temb2 = time_embedding(&mut tape2, &b2, &cfg, 70).unwrap();
    let latent2 = tf_encode(&mut tape2, &b2, &cfg, &x, 70, temb2).unwrap();
    let id = pcdiff::model::stream(&mut tape2, &b2, &cfg, "s1", CurveKind::Hilbert, &latent2, Some(temb2)).unwrap();
    assert_eq!(tape2.value(id), tape2.value(latent2.features));
    assert!(zs.max_abs_diff(tape2.value(latent2.features)) > 0.0);
}

#[test]
fn identity_fusion_averages_the_streams() {
    let cfg = desk();
    let mut p = init_params(&cfg, 11).unwrap();
    let d = cfg.latent_dim;
    p.insert("fuse.g1", Tensor::ones(&[d]));
    p.insert("fuse.g2", Tensor::ones(&[d]));
    p.insert("fuse.d1", Tensor::zeros(&[d]));
    p.insert("fuse.d2", Tensor::zeros(&[d]));
    let mut w = vec![0.0; 2 * d * d];
    for i in 0..d {
        w[i * d + i] = 0.5;
        w[(d + i) * d + i] = 0.5;
    }
    p.insert("fuse.proj.w", Tensor::new(vec![2 * d, d], w).unwrap());
    p.insert("fuse.proj.b", Tensor::zeros(&[d]));
    let x = noisy(cfg.n_points, 12);
    let mut tape = Tape::new();
    let b = p.bind_constant(&mut tape);
    let temb = time_embedding(&mut tape, &b, &cfg, 3).unwrap();
    let latent = tf_encode(&mut tape, &b, &cfg, &x, 3, temb).unwrap();
    let s1 = pcdiff::model::stream(&mut tape, &b, &cfg, "s1", cfg.curves.0, &latent, Some(temb)).unwrap();
    let s2 = pcdiff::model::stream(&mut tape, &b, &cfg, "s2", cfg.curves.1, &latent, Some(temb)).unwrap();
    let fused = dual_stream(&mut tape, &b, &cfg, &latent, Some(temb)).unwrap();
    let (a1, a2, f) = (tape.value(s1), tape.value(s2), tape.value(fused));
    for i in 0..f.len() {
        assert!((f.data()[i] - 0.5 * (a1.data()[i] + a2.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn sampler_branch_follows_tau() {
    let cfg = desk();
    let p = init_params(&cfg, 13).unwrap();
    let x = noisy(cfg.n_points, 14);
    let unit = normalize_to_unit_cube(&x.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let b = p.bind_constant(&mut tape);
    for (t, want) in [(5, 14), (6, 0), (100, 0)] {
        let temb = time_embedding(&mut tape, &b, &cfg, t).unwrap();
        let l = tf_encode(&mut tape, &b, &cfg, &x, t, temb).unwrap();
        assert_eq!(l.frequency_count, want, "t={t}");
        assert_eq!(l.indices.len(), 16);
        assert!(l.indices.iter().zip(&l.coords).all(|(&i, c)| unit[i] == *c));
        if want == 0 {
            assert_eq!(l.indices, pcdiff::geometry::farthest_point_sampling(&unit, 16, 0).unwrap());
        }
    }
}

#[test]
fn encoder_receives_gradient() {
    let cfg = desk();
    let p = init_params(&cfg, 15).unwrap();
    let x = noisy(cfg.n_points, 16);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let y = eps_theta_on(&mut tape, &b, &cfg, &x, 4).unwrap();
    let loss = tape.mean(y);
    let mut g = tape.backward(loss).unwrap();
    let grads = b.collect(&tape, &mut g);
    for name in ["enc.conv0.w", "enc.pos.w", "s1.0.in.w", "s2.0.fwd.a_log", "fuse.proj.w", "dec.conv0.w", "time.w"] {
        let t = grads.get(name).unwrap_or_else(|| panic!("{name} missing"));
        assert!(t.data().iter().any(|v| *v != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn invalid_inputs_fail() {
    let cfg = desk();
    let p = init_params(&cfg, 17).unwrap();
    assert!(eps_theta(&p, &cfg, &noisy(63, 1), 3).is_err());
    assert!(eps_theta(&p, &cfg, &noisy(64, 1), 0).is_err());
    assert!(eps_theta(&p, &cfg, &noisy(64, 1), 101).is_err());
    let mut bad = noisy(64, 1);
    bad.data_mut()[5] = f64::NAN;
    assert!(eps_theta(&p, &cfg, &bad, 3).is_err());
    assert!(init_params(&ModelConfig { latent_points: 65, ..desk() }, 0).is_err());
    assert!(init_params(&ModelConfig { latent_dim: 15, ..desk() }, 0).is_err());
    assert!(init_params(&ModelConfig { conv_channels: 6, groups: 4, ..desk() }, 0).is_err());
}
