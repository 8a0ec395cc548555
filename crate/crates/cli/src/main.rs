use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use dewedge_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use dewedge_core::config::RunConfig;
use dewedge_core::fbp::fbp;
use dewedge_core::fit::{oversized_side, write_loss_csv, FitMode};
use dewedge_core::metrics::{evaluate, MetricsReport};
use dewedge_core::mrc::{read_tilt_series, read_volume, write_tilt_series, write_volume};
use dewedge_core::pipeline::{collect_pairs, refine_tomogram, simulate, train};
use dewedge_core::sim::ParticleSet;
use dewedge_core::subtomo::{split, ExtractConfig};
use dewedge_core::theory::{run_verification, VerifyConfig};
use dewedge_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dewedge", version, about = "Limited-angle tomogram denoising and missing-wedge reconstruction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory relative paths are resolved against.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any configuration field, e.g. `--set fit.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom, particle list and noisy tilt series.
    Simulate,
    /// Split the tilt series into two half-series.
    Split,
    /// Filtered back-projection of the full series and both halves.
    Fbp,
    /// Fit the model on sub-tomogram pairs of the half reconstructions.
    Fit {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<FitMode>,
        /// Save a checkpoint every this many epochs (0: only at the end).
        #[arg(long, default_value_t = 10)]
        checkpoint_every: usize,
    },
    /// Apply the fitted model to both halves and average.
    Refine,
    /// Compare a reconstruction with the phantom.
    Metrics {
        /// Reconstruction to score (default: the refined tomogram).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Report path; `.csv` selects CSV, anything else JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Numerical checks of the loss identities; writes a JSON report.
    Verify {
        /// Optional JSON with verification sizes and trial counts.
        #[arg(long)]
        verify_config: Option<PathBuf>,
        #[arg(long, default_value = "verify.json")]
        output: PathBuf,
    },
    /// Fit and score across cube sizes at a constant voxel budget.
    SweepCubesize {
        /// Comma-separated crop sizes.
        #[arg(long, value_delimiter = ',', default_value = "8,16,24")]
        sizes: Vec<usize>,
        /// Voxels per epoch shared by all sizes (pairs = budget / size^3).
        #[arg(long, default_value_t = 16 * 16 * 16 * 24)]
        budget: usize,
        #[arg(long, default_value = "sweep.csv")]
        output: PathBuf,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn parse_mode(s: &str) -> std::result::Result<FitMode, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown mode {s:?} (deepdewedge, noise2noise_only)"))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{key}`: `{p}` is not inside an object")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*p) {
                return Err(Error::InvalidConfig(format!("unknown configuration key `{key}`")));
            }
            obj.insert((*p).to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*p)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown configuration key `{key}`")))?;
    }
    Ok(())
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut v = serde_json::to_value(&base)?;
    for o in &c.overrides {
        let (k, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not KEY=VALUE")))?;
        let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut v, k, val)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(v)?;
    if let Some(d) = &c.work_dir {
        cfg.paths.work_dir = d.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.paths.work_dir)?;
    let sim = simulate::<f32>(&cfg.phantom, &cfg.tilt, &cfg.noise, cfg.seeds())?;
    write_volume(&sim.phantom, cfg.path(&cfg.paths.phantom))?;
    write_json(&sim.particles, &cfg.path(&cfg.paths.particles))?;
    write_tilt_series(&sim.tilts, cfg.path(&cfg.paths.tilt_series))?;
    info!("simulated {} projections, {} particles", sim.tilts.len(), sim.particles.len());
    Ok(())
}

fn cmd_split(cfg: &RunConfig) -> Result<()> {
    let t = read_tilt_series::<f32>(cfg.path(&cfg.paths.tilt_series))?;
    let (a, b) = split(&t, cfg.split)?;
    write_tilt_series(&a, cfg.path(&cfg.paths.half0))?;
    write_tilt_series(&b, cfg.path(&cfg.paths.half1))?;
    info!("split into {} + {} projections", a.len(), b.len());
    Ok(())
}

fn cmd_fbp(cfg: &RunConfig) -> Result<()> {
    let shape = cfg.phantom.shape;
    for (src, dst) in [
        (&cfg.paths.tilt_series, &cfg.paths.fbp),
        (&cfg.paths.half0, &cfg.paths.fbp0),
        (&cfg.paths.half1, &cfg.paths.fbp1),
    ] {
        let t = read_tilt_series::<f32>(cfg.path(src))?;
        write_volume(&fbp(&t, cfg.filter, shape)?, cfg.path(dst))?;
        info!("reconstructed {}", dst.display());
    }
    Ok(())
}

fn fit_meta(cfg: &RunConfig, res_norm: Option<dewedge_core::NormStats>, epoch: usize) -> CheckpointMeta {
    CheckpointMeta {
        model: cfg.model.clone(),
        fit: cfg.fit.clone(),
        norm: res_norm,
        epoch,
    }
}

fn cmd_fit(cfg: &mut RunConfig, epochs: Option<usize>, mode: Option<FitMode>, every: usize) -> Result<()> {
    if let Some(e) = epochs {
        cfg.fit.epochs = e;
    }
    if let Some(m) = mode {
        cfg.fit.mode = m;
    }
    let seeds = cfg.seeds();
    cfg.fit.seed = seeds.fit;
    let r0 = read_volume::<f32>(cfg.path(&cfg.paths.fbp0))?;
    let r1 = read_volume::<f32>(cfg.path(&cfg.paths.fbp1))?;
    let (pairs, _) = collect_pairs(&[(&r0, &r1)], &cfg.extract, &cfg.fit)?;
    info!("{} sub-tomogram pairs", pairs.len());
    let model_path = cfg.path(&cfg.paths.model);
    let mut history = Vec::new();
    let cfg_ref = &*cfg;
    let res = train(&pairs, &cfg.model, &cfg.fit, seeds.model, |e, loss, m| {
        history.push(loss);
        info!("epoch {e}: loss {loss:.6}");
        if every > 0 && (e + 1) % every == 0 {
            save_checkpoint(m, &fit_meta(cfg_ref, None, e + 1), model_path.with_extension(format!("epoch{}.bin", e + 1)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&res.model, &fit_meta(cfg, Some(res.norm), cfg.fit.epochs), &model_path)?;
    let csv = fs::File::create(cfg.path(&cfg.paths.loss_csv))?;
    write_loss_csv(&res.loss_history, csv)?;
    Ok(())
}

fn cmd_refine(cfg: &RunConfig) -> Result<()> {
    let (model, meta) = load_checkpoint::<f32>(cfg.path(&cfg.paths.model))?;
    let norm = meta
        .norm
        .ok_or_else(|| Error::Format("checkpoint lacks normalization statistics (not a final model)".into()))?;
    let r0 = read_volume::<f32>(cfg.path(&cfg.paths.fbp0))?;
    let r1 = read_volume::<f32>(cfg.path(&cfg.paths.fbp1))?;
    let (_, stats) = collect_pairs(&[(&r0, &r1)], &cfg.extract, &meta.fit)?;
    let out = refine_tomogram(&model, norm, stats[0], &r0, &r1, cfg.refine.cube_size, cfg.refine.overlap)?;
    write_volume(&out, cfg.path(&cfg.paths.refined))?;
    Ok(())
}

fn cmd_metrics(cfg: &RunConfig, input: Option<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let input = input.unwrap_or_else(|| cfg.paths.refined.clone());
    let output = output.unwrap_or_else(|| cfg.paths.metrics.clone());
    let tomo = read_volume::<f32>(cfg.path(&input))?;
    let gt = read_volume::<f32>(cfg.path(&cfg.paths.phantom))?;
    let particles: ParticleSet = serde_json::from_str(&fs::read_to_string(cfg.path(&cfg.paths.particles))?)?;
    let pc = cfg.metrics.particle_cube;
    let report: MetricsReport = evaluate(&tomo, &gt, cfg.fit.alpha_max, (pc > 0).then_some(&particles), pc)?;
    let out = fs::File::create(cfg.path(&output))?;
    if output.extension().is_some_and(|e| e == "csv") {
        report.write_csv(out)
    } else {
        report.write_json(out)
    }
}

fn cmd_verify(cfg: &RunConfig, verify_config: Option<PathBuf>, output: &Path) -> Result<()> {
    let mut vc = match verify_config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => VerifyConfig::default(),
    };
    vc.seed = cfg.seed;
    let report = run_verification(&vc)?;
    write_json(&report, &cfg.path(output))
}

#[derive(Serialize)]
struct SweepRow {
    crop_size: usize,
    extract_size: usize,
    pairs: usize,
    cc: f64,
    cc_in_wedge: f64,
    cc_outside_wedge: f64,
}

fn cmd_sweep(cfg: &RunConfig, sizes: &[usize], budget: usize, output: &Path) -> Result<()> {
    let r0 = read_volume::<f32>(cfg.path(&cfg.paths.fbp0))?;
    let r1 = read_volume::<f32>(cfg.path(&cfg.paths.fbp1))?;
    let gt = read_volume::<f32>(cfg.path(&cfg.paths.phantom))?;
    let seeds = cfg.seeds();
    let mut out = String::from("crop_size,extract_size,pairs,cc,cc_in_wedge,cc_outside_wedge\n");
    let mut rows = Vec::new();
    for &s in sizes {
        let e = oversized_side(s, cfg.model.size_multiple());
        let mut fit = cfg.fit.clone();
        fit.crop_size = s;
        fit.seed = seeds.fit;
        let extract = ExtractConfig {
            cube_size: e,
            overlap: e / 2,
            ..cfg.extract.clone()
        };
        let (mut pairs, stats) = collect_pairs(&[(&r0, &r1)], &extract, &fit)?;
        let want = (budget / (s * s * s)).max(1);
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds.fit ^ s as u64));
        pairs.truncate(want);
        info!("size {s}: {} pairs (wanted {want})", pairs.len());
        let res = train(&pairs, &cfg.model, &fit, seeds.model, |_, _, _| Ok(()))?;
        let refine_cube = e.max(cfg.refine.cube_size);
        let vol = refine_tomogram(&res.model, res.norm, stats[0], &r0, &r1, refine_cube, refine_cube / 2)?;
        let rep = evaluate(&vol, &gt, fit.alpha_max, None, 0)?;
        out.push_str(&format!(
            "{s},{e},{},{},{},{}\n",
            pairs.len(),
            rep.cc,
            rep.cc_in_wedge,
            rep.cc_outside_wedge
        ));
        rows.push(SweepRow {
            crop_size: s,
            extract_size: e,
            pairs: pairs.len(),
            cc: rep.cc,
            cc_in_wedge: rep.cc_in_wedge,
            cc_outside_wedge: rep.cc_outside_wedge,
        });
    }
    let path = cfg.path(output);
    if path.extension().is_some_and(|e| e == "json") {
        write_json(&rows, &path)
    } else {
        fs::write(path, out)?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(Error::InvalidConfig("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Split => cmd_split(&cfg),
        Command::Fbp => cmd_fbp(&cfg),
        Command::Fit {
            epochs,
            mode,
            checkpoint_every,
        } => cmd_fit(&mut cfg, epochs, mode, checkpoint_every),
        Command::Refine => cmd_refine(&cfg),
        Command::Metrics { input, output } => cmd_metrics(&cfg, input, output),
        Command::Verify { verify_config, output } => cmd_verify(&cfg, verify_config, &output),
        Command::SweepCubesize { sizes, budget, output } => cmd_sweep(&cfg, &sizes, budget, &output),
        Command::ShowConfig => {
            println!("{}", cfg.to_json()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
