//! Command-line pipeline: `gen-data` → `train` → `rollout` / `eval` /
//! `export-levelset`.

pub mod config;
pub mod io;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{band_average, energy_time_history, evaluate, EvalSeries};
use crate::integrator::{rollout, Trajectory};
use crate::model::EmulatorField;
use crate::training::{generate_system_dataset, sample_box, train, EpochRecord};

pub use config::RunConfig;
pub use io::{Manifest, ModelCheckpoint};

#[derive(Debug, Parser)]
#[command(name = "dissipative", version, about = "Neural emulators for dissipative chaotic ODEs")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for the command's artifacts.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate ground-truth trajectories and write them as CSV.
    GenData,
    /// Train an emulator on a generated dataset.
    Train {
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Roll out a checkpoint from one initial condition.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        steps: usize,
        /// Comma-separated initial state; sampled from the data box when absent.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        /// Use the bare MLP instead of the projected field.
        #[arg(long)]
        bare: bool,
    },
    /// Long-horizon evaluation against the ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also evaluate the bare MLP of the checkpoint.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n_traj: Option<usize>,
    },
    /// Sample points on the boundary of the learned level set.
    ExportLevelset {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    io::ensure_dir(&cli.out_dir)?;
    match &cli.command {
        Command::GenData => gen_data(&load_config(cli)?, &cli.out_dir),
        Command::Train { data } => cmd_train(&load_config(cli)?, data, &cli.out_dir),
        Command::Rollout {
            checkpoint,
            steps,
            x0,
            bare,
        } => cmd_rollout(cli, checkpoint, *steps, x0.as_deref(), *bare),
        Command::Eval {
            checkpoint,
            ablation,
            steps,
            n_traj,
        } => cmd_eval(cli, checkpoint, *ablation, *steps, *n_traj),
        Command::ExportLevelset { checkpoint, count } => cmd_export_levelset(cli, checkpoint, *count),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

/// Config for commands that start from a checkpoint: the file if given
/// (its system must match), otherwise the checkpoint's own settings.
fn config_for_checkpoint(cli: &Cli, ckpt: &ModelCheckpoint) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(_) => load_config(cli)?,
        None => {
            let t = &ckpt.config;
            let mut cfg = RunConfig::new(t.system.clone());
            cfg.data = t.data.clone();
            cfg.model = t.model.clone();
            cfg.training = t.training.clone();
            if let Some(seed) = cli.seed {
                cfg.override_seed(seed);
            }
            cfg
        }
    };
    if cfg.system != ckpt.config.system {
        return Err(Error::Config(format!(
            "config system {} does not match checkpoint system {}",
            cfg.system.tag(),
            ckpt.config.system.tag()
        )));
    }
    cfg.data.h = ckpt.config.data.h;
    Ok(cfg)
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

pub fn gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let dataset = generate_system_dataset(&cfg.system, &cfg.data)?;
    let mut files = Vec::new();
    for (i, t) in dataset.trajectories.iter().enumerate() {
        let name = io::trajectory_file_name(i);
        io::write_trajectory_csv(&out_dir.join(&name), t)?;
        files.push(name);
    }
    Manifest {
        kind: "dataset".into(),
        system: cfg.system.tag(),
        h: cfg.data.h,
        steps: cfg.data.traj_len,
        seeds: seeds(&[("data", cfg.data.seed)]),
        config_sha256: cfg.hash(),
        files,
    }
    .save(out_dir)?;
    log::info!("wrote {} trajectories to {}", dataset.trajectories.len(), out_dir.display());
    Ok(())
}

fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let header: Vec<String> = [
        "epoch",
        "mean_loss",
        "mean_prediction_loss",
        "level_set_volume",
        "level_c",
        "certificate_failures",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    io::write_table(
        path,
        &header,
        curve.iter().map(|r| {
            vec![
                Some(r.epoch as f64),
                Some(r.mean_loss),
                Some(r.mean_prediction_loss),
                Some(r.volume),
                Some(r.level_c),
                Some(r.certificate_failures as f64),
            ]
        }),
    )
}

pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    let (dataset, manifest) = io::read_dataset(data_dir)?;
    if manifest.system != cfg.system.tag() {
        return Err(Error::Config(format!(
            "dataset system {} does not match config system {}",
            manifest.system,
            cfg.system.tag()
        )));
    }
    let mut tcfg = cfg.training_config();
    tcfg.data.h = manifest.h;
    let trained = match train(&tcfg, &dataset) {
        Ok(t) => t,
        Err(e) => {
            io::write_text(&out_dir.join("TRAINING_FAILED"), &format!("{e}\n"))?;
            return Err(e);
        }
    };
    let ckpt = ModelCheckpoint::new(tcfg, trained.emulator);
    ckpt.save(&out_dir.join(io::CHECKPOINT_FILE))?;
    write_curve(&out_dir.join("loss_curve.csv"), &trained.curve)?;
    Manifest {
        kind: "checkpoint".into(),
        system: cfg.system.tag(),
        h: manifest.h,
        steps: cfg.training.epochs,
        seeds: seeds(&[("data", manifest.seeds.get("data").copied().unwrap_or(0)), ("training", cfg.training.seed)]),
        config_sha256: cfg.hash(),
        files: vec![io::CHECKPOINT_FILE.into(), "loss_curve.csv".into()],
    }
    .save(out_dir)?;
    Ok(())
}

fn cmd_rollout(cli: &Cli, checkpoint: &Path, steps: usize, x0: Option<&[f64]>, bare: bool) -> Result<()> {
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let cfg = config_for_checkpoint(cli, &ckpt)?;
    let em = &ckpt.emulator;
    let x0 = match x0 {
        Some(x) => x.to_vec(),
        None => {
            let b = cfg.data.init_box_for(&cfg.system)?;
            sample_box(&b, &mut ChaCha8Rng::seed_from_u64(cfg.eval.seed))
        }
    };
    crate::error::check_dim(em.dim(), x0.len())?;
    let field = if bare { EmulatorField::Bare(&em.mlp) } else { em.field() };
    let traj = rollout(&field, &x0, cfg.data.h, steps, cfg.eval.blowup_threshold, "rollout")?;
    write_rollout_csv(&cli.out_dir.join("rollout.csv"), &traj, em, 1)?;
    Manifest {
        kind: "rollout".into(),
        system: cfg.system.tag(),
        h: cfg.data.h,
        steps,
        seeds: seeds(&[("eval", cfg.eval.seed), ("training", ckpt.seed)]),
        config_sha256: cfg.hash(),
        files: vec!["rollout.csv".into()],
    }
    .save(&cli.out_dir)?;
    if let Some(k) = traj.truncated_at {
        log::warn!("rollout left the blowup threshold at step {k}");
    }
    Ok(())
}

fn write_rollout_csv(path: &Path, traj: &Trajectory, em: &crate::model::Emulator, stride: usize) -> Result<()> {
    let energy = energy_time_history(traj, &em.lyapunov)?;
    let mut header = vec!["t_s".to_string()];
    header.extend(io::state_header(traj.dim()));
    header.push("V".into());
    io::write_table(
        path,
        &header,
        traj.states().enumerate().step_by(stride.max(1)).map(|(k, s)| {
            std::iter::once(Some(k as f64 * traj.h))
                .chain(s.iter().map(|&v| Some(v)))
                .chain(std::iter::once(Some(energy[k])))
                .collect()
        }),
    )
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, ablation: bool, steps: Option<usize>, n_traj: Option<usize>) -> Result<()> {
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let mut cfg = config_for_checkpoint(cli, &ckpt)?;
    cfg.eval.ablation |= ablation;
    if let Some(s) = steps {
        cfg.eval.steps = s;
    }
    if let Some(n) = n_traj {
        cfg.eval.n_traj = n;
    }
    cfg.eval.validate()?;
    let em = &ckpt.emulator;
    let (report, series) = evaluate(&cfg.system, em, cfg.data.h, &cfg.eval)?;
    let out = &cli.out_dir;
    let mut files = vec!["report.json".to_string()];
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    io::write_text(&out.join("report.json"), &text)?;
    files.extend(write_eval_series(out, &series, em, &cfg)?);
    Manifest {
        kind: "evaluation".into(),
        system: cfg.system.tag(),
        h: cfg.data.h,
        steps: cfg.eval.steps,
        seeds: seeds(&[("eval", cfg.eval.seed), ("training", ckpt.seed)]),
        config_sha256: cfg.hash(),
        files,
    }
    .save(out)?;
    log::info!(
        "unbounded {} of {}; spectrum error {:?}",
        report.model.unbounded,
        cfg.eval.n_traj,
        report.model.spectrum_error
    );
    Ok(())
}

fn write_eval_series(out: &Path, series: &EvalSeries, em: &crate::model::Emulator, cfg: &RunConfig) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let window = cfg.eval.steps + 1 - cfg.eval.discard();
    let df = 1.0 / (window as f64 * cfg.data.h);
    let columns: Vec<(&str, Option<&Vec<f64>>)> = vec![
        ("truth_energy", Some(&series.truth_spectrum)),
        ("model_energy", series.model_spectrum.as_ref()),
        ("ablation_energy", series.ablation_spectrum.as_ref()),
    ];
    let write_spectrum = |name: &str, width: usize| -> Result<()> {
        let cols: Vec<(&str, Vec<f64>)> = columns
            .iter()
            .filter(|(n, s)| s.is_some() || *n == "model_energy")
            .map(|(n, s)| (*n, s.map(|v| band_average(v, width)).unwrap_or_default()))
            .collect();
        let mut header = vec!["frequency_hz".to_string()];
        header.extend(cols.iter().map(|(n, _)| n.to_string()));
        let bins = band_average(&series.truth_spectrum, width).len();
        io::write_table(
            &out.join(name),
            &header,
            (0..bins).map(|k| {
                let f = (k * width) as f64 * df + (width.saturating_sub(1)) as f64 * df / 2.0;
                std::iter::once(Some(f))
                    .chain(cols.iter().map(|(_, v)| v.get(k).copied()))
                    .collect()
            }),
        )
    };
    write_spectrum("spectrum.csv", 1)?;
    files.push("spectrum.csv".into());
    write_spectrum("spectrum_banded.csv", cfg.eval.band_width)?;
    files.push("spectrum_banded.csv".into());

    let stride = cfg.eval.export_stride.max(1);
    let trajs = [
        ("truth", series.truth_trajectory.as_ref()),
        ("model", series.model_trajectory.as_ref()),
        ("ablation", series.ablation_trajectory.as_ref()),
    ];
    let energies: Vec<(&str, Vec<f64>)> = trajs
        .iter()
        .filter_map(|(n, t)| t.map(|t| energy_time_history(t, &em.lyapunov).map(|e| (*n, e))))
        .collect::<Result<_>>()?;
    let len = energies.iter().map(|(_, e)| e.len()).max().unwrap_or(0);
    let mut header = vec!["t_s".to_string()];
    header.extend(energies.iter().map(|(n, _)| format!("V_{n}")));
    io::write_table(
        &out.join("energy_history.csv"),
        &header,
        (0..len).step_by(stride).map(|k| {
            std::iter::once(Some(k as f64 * cfg.data.h))
                .chain(energies.iter().map(|(_, e)| e.get(k).copied()))
                .collect()
        }),
    )?;
    files.push("energy_history.csv".into());
    for (name, t) in trajs {
        if let Some(t) = t {
            let file = format!("trajectory_{name}.csv");
            io::write_timed_trajectory_csv(&out.join(&file), t, stride)?;
            files.push(file);
        }
    }
    let boundary = em.lyapunov.sample_boundary(cfg.eval.boundary_samples, cfg.eval.seed)?;
    write_boundary(&out.join("levelset_boundary.csv"), &boundary, em.dim())?;
    files.push("levelset_boundary.csv".into());
    Ok(files)
}

fn write_boundary(path: &Path, points: &[Vec<f64>], dim: usize) -> Result<()> {
    io::write_table(path, &io::state_header(dim), points.iter().map(|p| p.iter().map(|&v| Some(v)).collect()))
}

fn cmd_export_levelset(cli: &Cli, checkpoint: &Path, count: usize) -> Result<()> {
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let cfg = config_for_checkpoint(cli, &ckpt)?;
    let em = &ckpt.emulator;
    let points = em.lyapunov.sample_boundary(count, cfg.eval.seed)?;
    write_boundary(&cli.out_dir.join("levelset_boundary.csv"), &points, em.dim())?;
    Manifest {
        kind: "levelset".into(),
        system: cfg.system.tag(),
        h: cfg.data.h,
        steps: 0,
        seeds: seeds(&[("eval", cfg.eval.seed), ("training", ckpt.seed)]),
        config_sha256: cfg.hash(),
        files: vec!["levelset_boundary.csv".into()],
    }
    .save(&cli.out_dir)
}
