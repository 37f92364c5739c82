use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sosbf_core::beamformer::{BeamformedFrame, DelayModel};
use sosbf_core::forward_sim::Phantom;
use sosbf_core::metrics::{evaluate_scatterers, write_detail_csv, SweepLabel, SweepRow};
use sosbf_core::pipeline::{self, PipelineConfig};
use sosbf_core::slowness::SlownessMap;
use sosbf_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "sosbf", version, about = "Speed-of-sound adaptive plane-wave beamforming")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory holding all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed from the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the phantom from the configuration.
    Phantom,
    /// Synthesize channel data for every transmitted angle.
    Simulate,
    /// Beamform the compound frame with a global speed of sound or a map.
    Beamform {
        /// Speed-of-sound map CSV; without it the configured global value is used
        /// and the tracking frames are written as well.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Track apparent displacements between the tracking frames.
    Track,
    /// Reconstruct the speed-of-sound map from the displacement files.
    Reconstruct,
    /// Sweep global speeds of sound, score the adaptive map and stored frames.
    Evaluate,
    /// Run every stage in sequence.
    Pipeline,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::Simulate => "simulate",
            Command::Beamform { .. } => "beamform",
            Command::Track => "track",
            Command::Reconstruct => "reconstruct",
            Command::Evaluate => "evaluate",
            Command::Pipeline => "pipeline",
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_phantom(cfg: &PipelineConfig, out: &Path) -> Result<Phantom, Error> {
    Phantom::read_json(&out.join(&cfg.paths.phantom))
}

fn tracking_frame_path(cfg: &PipelineConfig, out: &Path, k: usize, side: char) -> PathBuf {
    out.join(&cfg.paths.frames).join("tracking").join(format!("pair_{k:02}_{side}.frame"))
}

fn map_path(cfg: &PipelineConfig, out: &Path) -> PathBuf {
    out.join(&cfg.paths.maps).join("sos.csv")
}

fn write_config(cfg: &PipelineConfig, out: &Path) -> Result<(), Error> {
    pipeline::ensure_dir(out)?;
    let p = out.join("config.json");
    fs::write(&p, cfg.to_json()).map_err(|e| Error::Io { path: p, source: e })
}

fn run(command: &Command, cfg: &PipelineConfig, out: &Path) -> Result<(), Error> {
    let n_angles = cfg.acquisition.angles.len();
    match command {
        Command::Phantom => {
            write_config(cfg, out)?;
            let phantom = pipeline::make_phantom(cfg)?;
            pipeline::ensure_dir(out)?;
            phantom.write_json(&out.join(&cfg.paths.phantom))?;
            phantom.slowness.write_sos_csv(&out.join("phantom_sos.csv"))
        }
        Command::Simulate => {
            let phantom = read_phantom(cfg, out)?;
            let rfs = pipeline::simulate(cfg, &phantom)?;
            pipeline::write_rf_set(&out.join(&cfg.paths.rf), &rfs)
        }
        Command::Beamform { map } => {
            let rfs = pipeline::read_rf_set(&out.join(&cfg.paths.rf), n_angles)?;
            let frames_dir = out.join(&cfg.paths.frames);
            match map {
                Some(path) => {
                    let sos = SlownessMap::read_sos_csv(path, cfg.recon_grid.clone(), cfg.sigma0())?;
                    let frame = pipeline::compound_pass(cfg, &rfs, &DelayModel::adaptive(sos))?;
                    pipeline::write_frame_set(&frames_dir, "adaptive", &frame, cfg.evaluation.dynamic_range_db)
                }
                None => {
                    let model = DelayModel::Global { slowness: cfg.sigma0() };
                    let frame = pipeline::compound_pass(cfg, &rfs, &model)?;
                    pipeline::write_frame_set(&frames_dir, "global", &frame, cfg.evaluation.dynamic_range_db)?;
                    let pairs = cfg.pairs()?;
                    pipeline::ensure_dir(&frames_dir.join("tracking"))?;
                    for (k, (a, b)) in pipeline::tracking_frames(cfg, &rfs, &pairs)?.iter().enumerate() {
                        a.write(&tracking_frame_path(cfg, out, k, 'a'))?;
                        b.write(&tracking_frame_path(cfg, out, k, 'b'))?;
                    }
                    Ok(())
                }
            }
        }
        Command::Track => {
            let pairs = cfg.pairs()?;
            let frames = (0..pairs.len())
                .map(|k| {
                    Ok((
                        BeamformedFrame::read(&tracking_frame_path(cfg, out, k, 'a'))?,
                        BeamformedFrame::read(&tracking_frame_path(cfg, out, k, 'b'))?,
                    ))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let maps = pipeline::track(cfg, &pairs, &frames)?;
            pipeline::write_displacements(&out.join(&cfg.paths.displacements), &maps)
        }
        Command::Reconstruct => {
            let pairs = cfg.pairs()?;
            let maps = pipeline::read_displacements(&out.join(&cfg.paths.displacements), pairs.len())?;
            let (map, report) = pipeline::reconstruct(cfg, &pairs, &maps)?;
            log::info!("objective {:.4e} after {} iterations", report.objective.total, report.iterations);
            pipeline::write_map(&out.join(&cfg.paths.maps), &map, &report, cfg.evaluation.sos_window)
        }
        Command::Evaluate => {
            let phantom = read_phantom(cfg, out)?;
            let rfs = pipeline::read_rf_set(&out.join(&cfg.paths.rf), n_angles)?;
            let mp = map_path(cfg, out);
            let adaptive = if mp.exists() {
                Some(SlownessMap::read_sos_csv(&mp, cfg.recon_grid.clone(), cfg.sigma0())?)
            } else {
                log::warn!("{} not found, evaluating global speeds of sound only", mp.display());
                None
            };
            let rows = pipeline::evaluate(cfg, &rfs, &phantom, adaptive.as_ref())?;
            let table = pipeline::write_reports(&out.join(&cfg.paths.reports), &rows, &phantom)?;
            score_stored_frames(cfg, out, &phantom)?;
            println!("{table}");
            Ok(())
        }
        Command::Pipeline => {
            write_config(cfg, out)?;
            let result = pipeline::run_pipeline(cfg, out)?;
            println!("{}", result.table);
            Ok(())
        }
    }
}

/// Point-target metrics of the compound frames already on disk.
fn score_stored_frames(cfg: &PipelineConfig, out: &Path, phantom: &Phantom) -> Result<(), Error> {
    let truths: Vec<_> = phantom.scatterers.iter().map(|s| s.position).collect();
    let mut rows = Vec::new();
    for (name, label) in [("global", SweepLabel::Global(1.0 / cfg.sigma0())), ("adaptive", SweepLabel::Adaptive)] {
        let path = out.join(&cfg.paths.frames).join(format!("{name}.frame"));
        if !path.exists() {
            continue;
        }
        let env = sosbf_core::beamformer::envelope(&BeamformedFrame::read(&path)?)?;
        rows.push(SweepRow {
            label,
            reports: evaluate_scatterers(&env, &truths, cfg.evaluation.roi_radius),
        });
    }
    if rows.is_empty() {
        return Ok(());
    }
    write_detail_csv(&out.join(&cfg.paths.reports).join("frames_detail.csv"), &rows)
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error [{}]: --threads must be at least 1", cli.command.stage());
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error [{}]: {e}", cli.command.stage());
            return ExitCode::from(2);
        }
    }

    let start = Instant::now();
    let result = load_config(&cli.common).and_then(|cfg| run(&cli.command, &cfg, &cli.common.out));
    match result {
        Ok(()) => {
            log::info!("{} finished in {:.1} s", cli.command.stage(), start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", cli.command.stage());
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
