//! XYZ/PLY files, synthetic shape datasets and the flat run configuration.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::AdamConfig;
use crate::curves::CurveKind;
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::{normalize_to_unit_cube, Point, PointCloud};
use crate::model::ModelConfig;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads `x y z [score]` rows. Blank lines and `#` comments are skipped;
/// the column count must not change within a file.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut coords = Vec::new();
    let mut scores = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|tok| match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(path, line_no, format!("'{tok}' is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 3 && vals.len() != 4 {
            return Err(parse_err(path, line_no, format!("expected 3 or 4 columns, found {}", vals.len())));
        }
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(parse_err(path, line_no, format!("row has {} columns but earlier rows have {w}", vals.len())));
            }
            _ => {}
        }
        coords.push([vals[0], vals[1], vals[2]]);
        if vals.len() == 4 {
            scores.push(vals[3]);
        }
    }
    if coords.is_empty() {
        return Err(parse_err(path, 0, "file contains no points"));
    }
    let mut pc = PointCloud::new(coords)?;
    if width == Some(4) {
        pc.scores = Some(scores);
    }
    Ok(pc)
}

/// Writes one row per point with 12 significant digits, including the
/// score column when present.
pub fn write_xyz(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, p) in pc.coords.iter().enumerate() {
        write!(w, "{:.12e} {:.12e} {:.12e}", p[0], p[1], p[2])?;
        if let Some(s) = &pc.scores {
            write!(w, " {:.12e}", s[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Binary little-endian PLY with float vertices only.
pub fn write_ply(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        pc.len()
    )?;
    for p in &pc.coords {
        for v in p {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    CubeEdges,
    Torus,
    TwoPlanes,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::CubeEdges => "cube_edges",
            ShapeKind::Torus => "torus",
            ShapeKind::TwoPlanes => "two_planes",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sphere" => Ok(ShapeKind::Sphere),
            "cube_edges" | "cube" => Ok(ShapeKind::CubeEdges),
            "torus" => Ok(ShapeKind::Torus),
            "two_planes" | "planes" => Ok(ShapeKind::TwoPlanes),
            other => Err(Error::invalid(format!("unknown shape '{other}'"))),
        }
    }
}

/// Sampler knobs shared by all shapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    /// Share of cube points placed on edges rather than faces.
    pub edge_fraction: f64,
    /// Standard deviation of the off-edge jitter.
    pub edge_noise: f64,
    /// Relative spread of per-cloud sizes (radii, box sides, plane gap).
    pub size_jitter: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams {
            edge_fraction: 0.8,
            edge_noise: 0.01,
            size_jitter: 0.15,
        }
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Point {
    loop {
        let v: Point = [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, spread: f64) -> f64 {
    1.0 + rng.random_range(-spread..=spread)
}

/// Points on the surface of a sphere of jittered radius, before
/// normalization. Returns `(points, radius, center)`.
pub fn raw_sphere<R: Rng + ?Sized>(n: usize, params: &ShapeParams, rng: &mut R) -> (Vec<Point>, f64, Point) {
    let r = jitter(rng, params.size_jitter);
    let c: Point = [0; 3].map(|_| rng.random_range(-0.1..0.1));
    let pts = (0..n)
        .map(|_| {
            let u = unit_vector(rng);
            [0, 1, 2].map(|a| c[a] + r * u[a])
        })
        .collect();
    (pts, r, c)
}

/// Box edges (plus some face points) with jittered side lengths. Returns
/// the points and the box half-extents.
pub fn raw_cube_edges<R: Rng + ?Sized>(n: usize, params: &ShapeParams, rng: &mut R) -> (Vec<Point>, Point) {
    let half: Point = [0; 3].map(|_| 0.5 * jitter(rng, params.size_jitter));
    let noise = Normal::new(0.0, params.edge_noise.max(0.0)).expect("finite std");
    let n_edge = (params.edge_fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
    let perimeter: f64 = 4.0 * (half[0] + half[1] + half[2]) * 2.0;
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let mut p: Point = [0.0; 3];
        if i < n_edge {
            // Pick an axis with probability proportional to its edge length.
            let mut s = rng.random_range(0.0..perimeter / 4.0);
            let mut axis = 0;
            while axis < 2 && s >= 2.0 * half[axis] {
                s -= 2.0 * half[axis];
                axis += 1;
            }
            for a in 0..3 {
                p[a] = if a == axis {
                    rng.random_range(-half[a]..=half[a])
                } else {
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    side * half[a] + noise.sample(rng)
                };
            }
        } else {
            let axis = rng.random_range(0..3);
            for a in 0..3 {
                p[a] = if a == axis {
                    if rng.random_bool(0.5) {
                        half[a]
                    } else {
                        -half[a]
                    }
                } else {
                    rng.random_range(-half[a]..=half[a])
                };
            }
        }
        pts.push(p);
    }
    (pts, half)
}

fn raw_torus<R: Rng + ?Sized>(n: usize, params: &ShapeParams, rng: &mut R) -> Vec<Point> {
    let big = jitter(rng, params.size_jitter);
    let small = 0.3 * jitter(rng, params.size_jitter);
    (0..n)
        .map(|_| {
            let (u, v) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
            let ring = big + small * v.cos();
            [ring * u.cos(), ring * u.sin(), small * v.sin()]
        })
        .collect()
}

fn raw_two_planes<R: Rng + ?Sized>(n: usize, params: &ShapeParams, rng: &mut R) -> Vec<Point> {
    let gap = 0.5 * jitter(rng, params.size_jitter);
    (0..n)
        .map(|i| {
            let z = if i % 2 == 0 { gap } else { -gap };
            [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), z]
        })
        .collect()
}

pub fn synth_cloud<R: Rng + ?Sized>(kind: ShapeKind, n: usize, params: &ShapeParams, rng: &mut R) -> Result<PointCloud> {
    let raw = match kind {
        ShapeKind::Sphere => raw_sphere(n, params, rng).0,
        ShapeKind::CubeEdges => raw_cube_edges(n, params, rng).0,
        ShapeKind::Torus => raw_torus(n, params, rng),
        ShapeKind::TwoPlanes => raw_two_planes(n, params, rng),
    };
    PointCloud::new(normalize_to_unit_cube(&raw))
}

/// `count` normalized clouds of `n` points; deterministic in `seed`.
pub fn synth_dataset(kind: ShapeKind, count: usize, n: usize, seed: u64) -> Result<Vec<PointCloud>> {
    synth_dataset_with(kind, count, n, seed, &ShapeParams::default())
}

pub fn synth_dataset_with(kind: ShapeKind, count: usize, n: usize, seed: u64, params: &ShapeParams) -> Result<Vec<PointCloud>> {
    if count == 0 || n == 0 {
        return Err(Error::invalid("dataset needs at least one cloud of at least one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synth_cloud(kind, n, params, &mut rng)).collect()
}

/// Every knob of a training or sampling run as flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub shape: ShapeKind,
    /// Clouds in the synthetic training set.
    pub count: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub depth: usize,
    pub curves: (CurveKind, CurveKind),
    pub bits: u32,
    pub k: usize,
    pub zeta: f64,
    pub tau: usize,
    pub steps: usize,
    pub resolution: usize,
    pub channels: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            shape: ShapeKind::CubeEdges,
            count: 200,
            n: m.n_points,
            m: m.latent_points,
            d: m.latent_dim,
            depth: m.depth,
            curves: m.curves,
            bits: m.curve_bits,
            k: m.k,
            zeta: m.zeta,
            tau: m.tau,
            steps: m.steps,
            resolution: m.voxel_resolution,
            channels: m.conv_channels,
            batch: 32,
            lr: AdamConfig::default().lr,
            lr_decay: 0.98,
            weight_decay: 0.0,
            epochs: 10_000,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: [&str; 21] = [
    "shape", "count", "N", "M", "D", "depth", "curves", "bits", "k", "zeta", "tau", "T", "L", "channels", "batch", "lr",
    "lr_decay", "weight_decay", "epochs", "checkpoint_every", "seed",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::invalid(format!("bad value '{v}' for {key}")))
}

impl RunConfig {
    /// Parses `key = value` lines (`#` starts a comment). Unknown or
    /// repeated keys are errors; missing keys keep their defaults.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| parse_err(origin, i + 1, msg);
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(err(format!("key '{key}' given twice")));
            }
            seen.push(key);
            c.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "shape" => self.shape = v.parse()?,
            "count" => self.count = num(key, v)?,
            "N" => self.n = num(key, v)?,
            "M" => self.m = num(key, v)?,
            "D" => self.d = num(key, v)?,
            "depth" => self.depth = num(key, v)?,
            "curves" => {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| Error::invalid(format!("curves needs two comma-separated kinds, got '{v}'")))?;
                self.curves = (a.trim().parse()?, b.trim().parse()?);
            }
            "bits" => self.bits = num(key, v)?,
            "k" => self.k = num(key, v)?,
            "zeta" => self.zeta = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "T" => self.steps = num(key, v)?,
            "L" => self.resolution = num(key, v)?,
            "channels" => self.channels = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => {
                return Err(Error::invalid(format!("unknown key '{other}' (accepted: {})", CONFIG_KEYS.join(", "))));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.count == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("count, batch and epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!("need lr > 0 and 0 < lr_decay <= 1, got {} and {}", self.lr, self.lr_decay)));
        }
        Ok(())
    }

    /// Canonical text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("shape", self.shape.name().into());
        put("count", self.count.to_string());
        put("N", self.n.to_string());
        put("M", self.m.to_string());
        put("D", self.d.to_string());
        put("depth", self.depth.to_string());
        put("curves", format!("{},{}", self.curves.0, self.curves.1));
        put("bits", self.bits.to_string());
        put("k", self.k.to_string());
        put("zeta", format!("{:?}", self.zeta));
        put("tau", self.tau.to_string());
        put("T", self.steps.to_string());
        put("L", self.resolution.to_string());
        put("channels", self.channels.to_string());
        put("batch", self.batch.to_string());
        put("lr", format!("{:?}", self.lr));
        put("lr_decay", format!("{:?}", self.lr_decay));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("epochs", self.epochs.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("seed", self.seed.to_string());
        s
    }

    pub fn model(&self) -> ModelConfig {
        let groups = ModelConfig::default().groups.min(self.channels.max(1));
        ModelConfig {
            n_points: self.n,
            latent_points: self.m,
            latent_dim: self.d,
            depth: self.depth,
            curves: self.curves,
            curve_bits: self.bits,
            voxel_resolution: self.resolution,
            tau: self.tau,
            zeta: self.zeta,
            k: self.k,
            steps: self.steps,
            conv_channels: self.channels,
            groups,
            ..ModelConfig::default()
        }
    }

    pub fn train(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            lr_decay: self.lr_decay,
            decay_every: 100,
            seed: self.seed,
            checkpoint: checkpoint_dir.map(|d| (d, self.checkpoint_every)),
            config_text: Some(self.to_text()),
        }
    }
}
