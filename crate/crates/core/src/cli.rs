//! Command-line surface.
//!
//! Exit codes: 0 on success, 2 on bad usage, 1 on runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use crate::autodiff::{read_checkpoint, write_checkpoint};
use crate::curves::{serialize_points, CurveKind};
use crate::diffusion::{from_diffusion_space, sample, to_diffusion_space, train, write_loss_csv, Network, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{normalize_to_unit_cube, Point};
use crate::io::{read_xyz, synth_dataset, write_ply, write_xyz, RunConfig, ShapeKind};
use crate::metrics::{MetricReport, EXACT_EMD_MAX};
use crate::model::init_params;
use crate::spectral::{build_graph, frequency_order};

#[derive(Debug, Parser)]
#[command(name = "pcdiff", version, about = "Point-cloud diffusion toolkit")]
pub struct Cli {
    /// Worker threads for the parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a synthetic shape dataset.
    Train(TrainArgs),
    /// Draw clouds from a trained checkpoint.
    Sample(SampleArgs),
    /// Compare two directories of XYZ clouds.
    Eval(EvalArgs),
    /// Rank points by graph high-pass magnitude.
    Filter(FilterArgs),
    /// Order points along a space-filling curve.
    Serialize(SerializeArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's shape.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long, default_value = "model.pcdk")]
    out: PathBuf,
    /// Per-epoch mean loss as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write binary PLY files.
    #[arg(long)]
    ply: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    gen_dir: PathBuf,
    #[arg(long)]
    ref_dir: PathBuf,
    /// Largest cloud size solved exactly for EMD; bigger ones use the auction.
    #[arg(long, default_value_t = EXACT_EMD_MAX)]
    exact_emd_max: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// Number of highest-scoring points to select.
    #[arg(long)]
    top: usize,
}

#[derive(Debug, Args)]
struct SerializeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "z")]
    order: String,
    #[arg(long, default_value_t = 6)]
    bits: u32,
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Output goes to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not configure {n} threads: {e}");
        }
    }
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a, out),
        Command::Sample(a) => cmd_sample(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Filter(a) => cmd_filter(a, out),
        Command::Serialize(a) => cmd_serialize(a, out),
    }
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = &a.shape {
        cfg.shape = s.parse::<ShapeKind>()?;
    }
    let model = cfg.model();
    let data = synth_dataset(cfg.shape, cfg.count, cfg.n, cfg.seed)?;
    let xs: Vec<_> = data.iter().map(to_diffusion_space).collect();
    let sched = NoiseSchedule::scaled_linear(cfg.steps)?;
    if let Some(d) = &a.checkpoint_dir {
        fs::create_dir_all(d)?;
    }
    let tc = cfg.train(a.checkpoint_dir.clone());
    let init = init_params(&model, cfg.seed)?;
    info!("training {} parameters on {} {} clouds", init.num_scalars(), cfg.count, cfg.shape.name());
    let report = train(&xs, &model, &sched, &tc, init, |e, l, _| info!("epoch {e}: {l:.6}"))?;
    let file = std::io::BufWriter::new(fs::File::create(&a.out)?);
    write_checkpoint(file, &report.params, Some(&cfg.to_text()))?;
    if let Some(p) = &a.loss_csv {
        write_loss_csv(p, &report.losses)?;
    }
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    writeln!(out, "trained {} epochs, final loss {last:.6}, saved {}", report.losses.len(), a.out.display())?;
    Ok(())
}

fn cmd_sample(a: SampleArgs, out: &mut dyn Write) -> Result<()> {
    let (params, text) = read_checkpoint(std::io::BufReader::new(fs::File::open(&a.model)?))?;
    let text = text.ok_or_else(|| Error::Format("checkpoint has no run configuration".into()))?;
    let cfg = RunConfig::parse(&text, &a.model)?;
    let model = cfg.model();
    let sched = NoiseSchedule::scaled_linear(cfg.steps)?;
    fs::create_dir_all(&a.out_dir)?;
    let net = Network {
        params: &params,
        config: &model,
    };
    (0..a.count).into_par_iter().try_for_each(|i| -> Result<()> {
        let x = sample(&net, cfg.n, &sched, a.seed.wrapping_add(i as u64))?;
        let pc = from_diffusion_space(&x)?;
        write_xyz(&pc, &a.out_dir.join(format!("sample_{i:04}.xyz")))?;
        if a.ply {
            write_ply(&pc, &a.out_dir.join(format!("sample_{i:04}.ply")))?;
        }
        Ok(())
    })?;
    writeln!(out, "wrote {} clouds to {}", a.count, a.out_dir.display())?;
    Ok(())
}

fn read_dir_clouds(dir: &Path) -> Result<Vec<Vec<Point>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no .xyz files in {}", dir.display())));
    }
    paths.iter().map(|p| Ok(read_xyz(p)?.coords)).collect()
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let gen = read_dir_clouds(&a.gen_dir)?;
    let refs = read_dir_clouds(&a.ref_dir)?;
    let report = MetricReport::evaluate(&gen, &refs, a.exact_emd_max)?;
    write!(out, "{}", report.to_text())?;
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn cmd_filter(a: FilterArgs, out: &mut dyn Write) -> Result<()> {
    let pc = read_xyz(&a.input)?;
    if a.top > pc.len() {
        return Err(Error::invalid(format!("--top {} exceeds the {} points in the cloud", a.top, pc.len())));
    }
    let unit = normalize_to_unit_cube(&pc.coords);
    let graph = build_graph(&unit, a.k, None)?;
    let freq = frequency_order(&unit, &graph)?;
    let mut chosen = vec![false; pc.len()];
    for &i in freq.top(a.top) {
        chosen[i] = true;
    }
    writeln!(out, "# index score selected")?;
    for (i, s) in freq.scores.iter().enumerate() {
        writeln!(out, "{i} {s:.9e} {}", u8::from(chosen[i]))?;
    }
    Ok(())
}

fn cmd_serialize(a: SerializeArgs, out: &mut dyn Write) -> Result<()> {
    let kind: CurveKind = a.order.parse()?;
    let pc = read_xyz(&a.input)?;
    let unit = normalize_to_unit_cube(&pc.coords);
    let order = serialize_points(&unit, kind, a.bits)?;
    writeln!(out, "# position index code")?;
    for (s, (&i, code)) in order.permutation.iter().zip(&order.codes).enumerate() {
        writeln!(out, "{s} {i} {}", code.key)?;
    }
    Ok(())
}
