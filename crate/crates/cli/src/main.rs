mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use mbsfuse_core::analysis::{
    evaluate, lin_point_polar, mesh_linearization_study, pdf_transform_study, GridSpec, SchemeRun,
};
use mbsfuse_core::fusion::{EpochFrame, SchemeId};
use mbsfuse_core::geom::BsSite;
use mbsfuse_core::sim::{self, stream, study_rng, MeasurementMode};
use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use config::FileConfig;
use output::{ensure_dir, io_err, RunManifest, CSV_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<mbsfuse_core::Error> for CliError {
    fn from(e: mbsfuse_core::Error) -> Self {
        use mbsfuse_core::Error as E;
        if e.is_numerical() || matches!(e, E::EmptySeries | E::NoVisibleBs) {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "mbsfuse", version, about = "Multi-BS 5G positioning: scenarios, fusion schemes and linearization studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gate {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and write its epoch stream.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "noisy")]
        mode: MeasurementMode,
    },
    /// Run fusion schemes over a scenario and write error statistics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "lc-kf,tc-ekf,tc-ekf-r,tc-ukf,tc-ukf-r")]
        schemes: Vec<SchemeId>,
        #[arg(long, default_value = "noisy")]
        mode: MeasurementMode,
        #[arg(long, value_enum, default_value = "on")]
        gate: Gate,
        #[arg(long)]
        out: PathBuf,
        /// Use a recorded epoch stream instead of simulating.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Linearization-error studies.
    Study {
        #[command(subcommand)]
        kind: Study,
    },
}

#[derive(Subcommand)]
enum Study {
    /// Push a Gaussian cloud through the exact and linearized range/azimuth.
    Pdf {
        #[arg(long, allow_hyphen_values = true)]
        dx: f64,
        #[arg(long, allow_hyphen_values = true)]
        dy: f64,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the first-order model error over a grid of UE offsets.
    Mesh {
        #[arg(long, allow_hyphen_values = true)]
        lin_deg: Option<f64>,
        #[arg(long)]
        lin_range: Option<f64>,
        /// `xmin:xmax:step,ymin:ymax:step`
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn schema_note() -> String {
    format!("csv schema version {CSV_SCHEMA_VERSION}")
}

fn manifest(command: &str, out: &Path) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION"),
        csv_schema_version: CSV_SCHEMA_VERSION,
        config_schema_version: config::SCHEMA_VERSION,
        seed: None,
        config: None,
        parameters: json!({}),
        schemes: Vec::new(),
        mode: None,
        gate: None,
        out_dir: out.display().to_string(),
        outputs: Vec::new(),
        failures: Vec::new(),
        wall_clock_s: 0.0,
    }
}

fn snapshot(cfg: &FileConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn cmd_simulate(config: &Path, out: &Path, mode: MeasurementMode) -> Result<(), CliError> {
    let start = Instant::now();
    let file = FileConfig::load(config)?;
    let scenario = sim::simulate(&file.scenario_config()?, mode)?;
    ensure_dir(out)?;
    let frames_path = out.join("frames.jsonl");
    let f = std::fs::File::create(&frames_path).map_err(|e| io_err(&frames_path, e))?;
    stream::write_frames(std::io::BufWriter::new(f), &scenario.frames).map_err(|e| io_err(&frames_path, e))?;
    let sites = output::write_sites(out, &scenario.sites)?;

    let mut m = manifest("simulate", out);
    m.seed = Some(file.seed);
    m.config = Some(snapshot(&file));
    m.mode = Some(mode.name().to_string());
    m.outputs = output::relative(out, &[frames_path, sites]);
    m.wall_clock_s = start.elapsed().as_secs_f64();
    output::write_manifest(out, &m)?;
    println!(
        "{} epochs, {} BSs, {:.0} m driven -> {}",
        scenario.frames.len(),
        scenario.sites.len(),
        scenario.truth.distance_travelled(),
        out.display()
    );
    Ok(())
}

fn sites_from_frames(frames: &[EpochFrame]) -> Vec<BsSite> {
    let mut sites: Vec<BsSite> = frames.iter().flat_map(|f| f.obs.iter().map(|o| o.site)).collect();
    sites.sort_by_key(|s| s.id);
    sites.dedup_by_key(|s| s.id);
    sites
}

fn cmd_run(
    config: &Path,
    schemes: &[SchemeId],
    mode: MeasurementMode,
    gate_on: bool,
    out: &Path,
    frames_path: Option<&Path>,
) -> Result<(), CliError> {
    let start = Instant::now();
    let file = FileConfig::load(config)?;
    let fusion = file.fusion_config()?;
    let (frames, sites) = match frames_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let frames = stream::parse_frames(&text)?;
            let sites = sites_from_frames(&frames);
            (frames, sites)
        }
        None => {
            let sc = sim::simulate(&file.scenario_config()?, mode)?;
            (sc.frames, sc.sites)
        }
    };
    let mut schemes = schemes.to_vec();
    let mut seen = std::collections::HashSet::new();
    schemes.retain(|s| seen.insert(*s));

    let results: Vec<(SchemeId, Result<SchemeRun, mbsfuse_core::Error>)> = schemes
        .par_iter()
        .map(|s| (*s, evaluate(&frames, &fusion, *s, gate_on)))
        .collect();

    ensure_dir(out)?;
    let mut outputs = vec![output::write_sites(out, &sites)?];
    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for (scheme, result) in &results {
        match result {
            Ok(run) => {
                let truth: Vec<(f64, f64)> = frames[frames.len() - run.estimates.len()..]
                    .iter()
                    .map(|f| (f.truth[0], f.truth[1]))
                    .collect();
                outputs.extend(output::write_scheme(&out.join(scheme.name()), run, &truth)?);
                summary.push(output::MetricsRow::new(scheme.name(), &run.metrics));
                println!(
                    "{:<9} rms {:>10.3} m  max {:>10.3} m  <1 m {:>6.2}%  predict-only epochs {}",
                    scheme.name(),
                    run.metrics.rms,
                    run.metrics.max,
                    100.0 * run.metrics.fraction_below(1.0).unwrap_or(0.0),
                    run.predict_only_epochs()
                );
            }
            Err(e) => {
                eprintln!("{}: {e}", scheme.name());
                failures.push(format!("{}: {e}", scheme.name()));
            }
        }
    }
    let metrics_path = out.join("metrics.csv");
    output::write_csv(&metrics_path, &[], summary)?;
    outputs.push(metrics_path);

    let mut m = manifest("run", out);
    m.seed = Some(file.seed);
    m.config = Some(snapshot(&file));
    m.schemes = schemes.iter().map(|s| s.name().to_string()).collect();
    m.mode = Some(match frames_path {
        Some(_) => "frames".to_string(),
        None => mode.name().to_string(),
    });
    m.gate = Some(gate_on);
    m.parameters = json!({ "frames": frames_path.map(|p| p.display().to_string()) });
    m.outputs = output::relative(out, &outputs);
    m.failures = failures.clone();
    m.wall_clock_s = start.elapsed().as_secs_f64();
    output::write_manifest(out, &m)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{} scheme(s) failed: {}", failures.len(), failures.join("; "))))
    }
}

fn study_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => FileConfig::load(p),
        None => {
            let mut cfg = FileConfig::builtin();
            cfg.apply_seed_env()?;
            Ok(cfg)
        }
    }
}

fn cmd_study_pdf(
    dx: f64,
    dy: f64,
    sigma: Option<f64>,
    n: Option<usize>,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    let file = study_config(config)?;
    let st = &file.study;
    let sigma = sigma.unwrap_or(if dx.hypot(dy) < st.pdf_split_m {
        st.pdf_sigma_close_m
    } else {
        st.pdf_sigma_far_m
    });
    let n = n.unwrap_or(st.pdf_samples);
    let (range, angle) = pdf_transform_study((dx, dy), sigma, n, &mut study_rng(file.seed))?;
    ensure_dir(out)?;
    let path = out.join("pdfstudy.csv");
    let header = vec![
        schema_note(),
        format!("pdf transform study: mean offset ({dx}, {dy}) m from the BS, sigma {sigma} m, n {n}, seed {}", file.seed),
        "sample_id: index within its quantity; nonlinear_value: exact 2D range (m) or azimuth (rad); linearized_value: first-order model about the cloud mean; quantity: range | angle".to_string(),
        format!(
            "range variance nonlinear {} linearized {}; angle variance nonlinear {} linearized {}",
            range.nonlinear_variance, range.linearized_variance, angle.nonlinear_variance, angle.linearized_variance
        ),
    ];
    output::write_pdf_study(&path, header, &range, &angle)?;

    let mut m = manifest("study pdf", out);
    m.seed = Some(file.seed);
    m.config = config.map(|_| snapshot(&file));
    m.parameters = json!({ "dx_m": dx, "dy_m": dy, "sigma_m": sigma, "n": n });
    m.outputs = output::relative(out, &[path]);
    m.wall_clock_s = start.elapsed().as_secs_f64();
    output::write_manifest(out, &m)?;
    println!(
        "range var lin/nonlin {:.4}, angle var lin/nonlin {:.4}",
        range.linearized_variance / range.nonlinear_variance,
        angle.linearized_variance / angle.nonlinear_variance
    );
    Ok(())
}

fn cmd_study_mesh(
    lin_deg: Option<f64>,
    lin_range: Option<f64>,
    grid: Option<&str>,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    let file = study_config(config)?;
    let st = &file.study;
    let lin_deg = lin_deg.unwrap_or(st.mesh_lin_deg);
    let lin_range = lin_range.unwrap_or(st.mesh_lin_range_m);
    let grid_text = grid.unwrap_or(&st.mesh_grid);
    let spec: GridSpec = grid_text.parse().map_err(CliError::Usage)?;
    let lin = lin_point_polar(lin_range, lin_deg);
    let mesh = mesh_linearization_study(&spec, lin)?;
    ensure_dir(out)?;
    let path = out.join("mesh.csv");
    let header = vec![
        schema_note(),
        format!("mesh study: linearization at {lin_deg} deg, {lin_range} m = ({}, {}) m; grid {grid_text}", lin.0, lin.1),
        "dx_m, dy_m: UE offset from the BS; range_err_m: |r - r_lin|; angle_err_rad: |theta - theta_lin| with theta on the branch nearest the linearization azimuth".to_string(),
        format!("max angle error {} deg", mesh.max_angle_err().to_degrees()),
    ];
    output::write_mesh(&path, header, &mesh)?;

    let mut m = manifest("study mesh", out);
    m.seed = None;
    m.config = config.map(|_| snapshot(&file));
    m.parameters = json!({ "lin_deg": lin_deg, "lin_range_m": lin_range, "grid": grid_text });
    m.outputs = output::relative(out, &[path]);
    m.wall_clock_s = start.elapsed().as_secs_f64();
    output::write_manifest(out, &m)?;
    println!(
        "{} x {} cells, max angle error {:.1} deg",
        mesh.xs.len(),
        mesh.ys.len(),
        mesh.max_angle_err().to_degrees()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out, mode } => cmd_simulate(&config, &out, mode),
        Command::Run {
            config,
            schemes,
            mode,
            gate,
            out,
            frames,
        } => cmd_run(&config, &schemes, mode, matches!(gate, Gate::On), &out, frames.as_deref()),
        Command::Study { kind } => match kind {
            Study::Pdf {
                dx,
                dy,
                sigma,
                n,
                config,
                out,
            } => cmd_study_pdf(dx, dy, sigma, n, config.as_deref(), &out),
            Study::Mesh {
                lin_deg,
                lin_range,
                grid,
                config,
                out,
            } => cmd_study_mesh(lin_deg, lin_range, grid.as_deref(), config.as_deref(), &out),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mbsfuse: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
