//! Command implementations. Each returns the process exit code on failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use rescreen_core::geometry::{nyquist_gate, MapRecord, RegistrationMap, ScanFrame};
use rescreen_core::project::{output_matrix, run_project, Project, ProjectError, RunReport};
use rescreen_core::raster::{
    load_raster, mix_to_mono, negative_to_positive, save_tiff16, ChannelMix, Encoding, InversionParams, LoadOptions,
    SourceTag,
};
use rescreen_core::registration::{auto_register, coarse_estimate, AutoOptions, CoarseEstimate};
use rescreen_core::screen::{pattern_preset, ProcessId};
use rescreen_core::simulate::{covering_similarity, simulate_plate, PlateSpec, SmoothScene};

/// Exit code for bad arguments or unreadable inputs outside a project.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for a run whose diagnostics crossed a failure threshold.
pub const EXIT_DIAGNOSTICS: i32 = 14;
/// Exit code when the analysed scan is too coarse to resolve the screen.
pub const EXIT_NYQUIST: i32 = 7;
/// Exit code when automatic registration fails.
pub const EXIT_REGISTRATION: i32 = 16;
/// Exit code when the service cannot start.
pub const EXIT_SERVICE: i32 = 17;

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ProjectError> for CliError {
    fn from(e: ProjectError) -> Self {
        Self::new(e.exit_code(), e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_USAGE, e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "rescreen", version, about = "Reconstruct colour from scans of additive screen plates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate screen period and rotation from a scan.
    Analyze(AnalyzeArgs),
    /// Register a project's scan against its screen and store the map.
    Register(RegisterArgs),
    /// Run the full render queue of a project.
    Render(RenderArgs),
    /// Serve the interactive registration API for a project.
    Serve(ServeArgs),
    /// Write a synthetic plate scan and a project over it.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub scan: PathBuf,
    #[arg(long)]
    pub process: ProcessId,
    /// Scan resolution; the file's own when omitted.
    #[arg(long)]
    pub ppi: Option<f64>,
    #[arg(long, value_enum, default_value_t = Source::Negative)]
    pub source: Source,
    /// The file is gamma encoded with this exponent.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Source {
    Negative,
    Positive,
}

impl From<Source> for SourceTag {
    fn from(s: Source) -> Self {
        match s {
            Source::Negative => SourceTag::Negative,
            Source::Positive => SourceTag::PositiveTransparency,
        }
    }
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    pub project: PathBuf,
    /// Ignore registration marks even when the pattern has them.
    #[arg(long)]
    pub no_marks: bool,
    /// Resolution assumed by the spectral seed.
    #[arg(long)]
    pub ppi: Option<f64>,
    /// Write the registration report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub project: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    pub project: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "paget")]
    pub process: ProcessId,
    /// Scan side in pixels.
    #[arg(long, default_value_t = 600)]
    pub size: usize,
    #[arg(long, default_value_t = 2000.0)]
    pub ppi: f64,
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    pub rotation: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Gaussian noise on scanned transmittance.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Scan a contact positive instead of the negative.
    #[arg(long)]
    pub positive: bool,
    /// Print registration-mark strips inside the frame.
    #[arg(long)]
    pub marks: bool,
    /// Leave the project without a map.
    #[arg(long)]
    pub unregistered: bool,
}

pub fn load_options(source: Source, gamma: Option<f64>, ppi: Option<f64>) -> LoadOptions {
    LoadOptions {
        encoding: gamma.map_or(Encoding::Linear16, Encoding::GammaEncoded),
        ppi_override: ppi,
        source_tag: source.into(),
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Analysis {
    pub coarse: CoarseEstimate,
    pub px_per_patch: f64,
    pub nyquist_ok: bool,
}

impl Analysis {
    pub fn to_text(&self) -> String {
        let c = &self.coarse;
        let mut s = String::new();
        let _ = writeln!(s, "period_px     {:.4}", c.period_px);
        let _ = writeln!(s, "rotation_deg  {:.4} (ambiguous by {:.1})", c.rotation_deg, c.ambiguity_deg);
        let _ = writeln!(s, "phase_px      {:.3} {:.3}", c.phase_px[0], c.phase_px[1]);
        let _ = writeln!(s, "confidence    {:.3} (peak ratio {:.2})", c.confidence, c.peak_ratio);
        let _ = writeln!(
            s,
            "px_per_patch  {:.3} {}",
            self.px_per_patch,
            if self.nyquist_ok { "ok" } else { "below the two-pixel limit" }
        );
        let _ = writeln!(s, "\n{:>4} {:>4} {:>10} {:>10} {:>10} {:>8}", "h", "k", "fx", "fy", "amplitude", "phase");
        for p in &c.peaks {
            let _ = writeln!(
                s,
                "{:>4} {:>4} {:>10.5} {:>10.5} {:>10.5} {:>8.3}",
                p.harmonic[0], p.harmonic[1], p.frequency[0], p.frequency[1], p.amplitude, p.phase
            );
        }
        s
    }
}

pub fn analyze(args: &AnalyzeArgs) -> Result<Analysis, CliError> {
    let loaded = load_raster(&args.scan, &load_options(args.source, args.gamma, args.ppi)).map_err(usage)?;
    let mono = mix_to_mono(&loaded.raster, &ChannelMix::default()).map_err(usage)?;
    let positive = if mono.source_tag() == SourceTag::Negative {
        negative_to_positive(&mono, &InversionParams::default()).map_err(usage)?
    } else {
        mono
    };
    let pattern = pattern_preset(args.process).map_err(usage)?;
    let coarse = coarse_estimate(&positive, &pattern, positive.ppi())
        .map_err(|e| CliError::new(EXIT_REGISTRATION, e.to_string()))?;
    let map = RegistrationMap::similarity(ScanFrame::of(&positive), coarse.period_px, coarse.rotation_deg, coarse.phase_px)
        .map_err(|e| CliError::new(EXIT_REGISTRATION, e.to_string()))?;
    let gate = nyquist_gate(&map, &pattern, &positive);
    Ok(Analysis {
        coarse,
        px_per_patch: gate.px_per_patch(),
        nyquist_ok: gate.is_ok(),
    })
}

/// Registers the project and saves the map into it. Returns the report text.
pub fn register(args: &RegisterArgs) -> Result<String, CliError> {
    let mut loaded = Project::load(&args.project)?;
    let prepared = loaded.prepare(&mut RunReport::default())?;
    let pattern = loaded.pattern()?;
    let options = AutoOptions {
        nominal_ppi: args.ppi,
        use_marks: !args.no_marks,
        ..AutoOptions::default()
    };
    let result = auto_register(&prepared.positive, &pattern, &options)
        .map_err(|e| CliError::new(EXIT_REGISTRATION, e.to_string()))?;
    loaded.project.set_map(Some(&result.map));
    loaded.project.save(&args.project)?;
    let text = result.report.to_text();
    if let Some(path) = &args.report {
        std::fs::write(path, &text).map_err(usage)?;
    }
    Ok(text)
}

/// Runs the render queue. Threshold failures still write outputs but exit
/// non-zero.
pub fn render(args: &RenderArgs) -> Result<RunReport, CliError> {
    let loaded = Project::load(&args.project)?;
    let report = run_project(&loaded)?;
    let failures = report.threshold_failures();
    if !failures.is_empty() {
        return Err(CliError::new(EXIT_DIAGNOSTICS, failures.join("; ")));
    }
    Ok(report)
}

/// File names written by `simulate`.
pub const SIM_SCAN: &str = "scan.tif";
pub const SIM_PROJECT: &str = "project.json";
pub const SIM_TRUTH: &str = "truth.json";

pub fn simulate(args: &SimulateArgs) -> Result<RegistrationMap, CliError> {
    let pattern = pattern_preset(args.process).map_err(usage)?;
    if !(args.ppi > 0.0 && args.ppi.is_finite()) || args.size < 16 {
        return Err(usage(format!("bad size {} or ppi {}", args.size, args.ppi)));
    }
    let period = args.ppi / 25.4 * pattern.tile_period_mm();
    let (w, h) = (args.size, args.size);
    let (truth, plate_tiles) = if args.marks {
        // Screen origin and both mark strips inside the frame.
        let margin = 0.05 * w as f64;
        let m = RegistrationMap::similarity(ScanFrame::new(w, h), period, args.rotation, [margin, margin])
            .map_err(usage)?;
        let side = ((w as f64 - 2.0 * margin) / period).floor();
        (m, [side, side])
    } else {
        let m = covering_similarity(w, h, period, args.rotation, [0.37, 0.61]).map_err(usage)?;
        (m, [f64::INFINITY; 2])
    };
    let mut spec = PlateSpec::covering(truth.clone(), w, h, args.ppi);
    spec.plate_tiles = plate_tiles;
    spec.marks = args.marks;
    spec.noise_sigma = args.noise;
    spec.seed = args.seed;
    spec.supersample = 2;
    if args.positive {
        spec.output = SourceTag::PositiveTransparency;
    }
    let plate = simulate_plate(&SmoothScene::random(args.seed, 10.0), &pattern, &spec).map_err(usage)?;

    std::fs::create_dir_all(&args.out).map_err(usage)?;
    save_tiff16(&plate.scan, &args.out.join(SIM_SCAN)).map_err(usage)?;
    let mut project = Project::new(SIM_SCAN, spec.output, args.process);
    if !args.unregistered {
        project.set_map(Some(&truth));
    }
    // Keep the process white inside the display range; the approximate dyes
    // are far from neutral.
    let m = output_matrix(&pattern, project.color.illuminant, project.render.output_space)?;
    let white = m * nalgebra::Vector3::repeat(1.0);
    project.render.exposure = (0.95 / white.max()).min(1.0);
    project.outputs.tiff = Some("render.tif".into());
    project.outputs.png_preview = Some("preview.png".into());
    project.outputs.report = Some("report.txt".into());
    project.save(&args.out.join(SIM_PROJECT))?;
    write_json(&args.out.join(SIM_TRUTH), &MapRecord::from(&truth))?;
    Ok(truth)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(usage)?;
    text.push('\n');
    std::fs::write(path, text).map_err(usage)
}

/// Serves until interrupted.
pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let session = crate::service::Session::open(&args.project).map_err(|e| CliError::new(EXIT_SERVICE, e.to_string()))?;
    let app = crate::service::router(session);
    let addr = format!("{}:{}", args.bind, args.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new(EXIT_SERVICE, e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::new(EXIT_SERVICE, format!("{addr}: {e}")))?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::new(EXIT_SERVICE, e.to_string()))
    })
}

/// Runs a parsed command, printing its result. Returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a).map(|r| {
            if a.json {
                println!("{}", serde_json::to_string_pretty(&r).expect("analysis serializes"));
            } else {
                print!("{}", r.to_text());
            }
            if r.nyquist_ok {
                0
            } else {
                EXIT_NYQUIST
            }
        }),
        Command::Register(a) => register(a).map(|text| {
            print!("{text}");
            0
        }),
        Command::Render(a) => render(a).map(|r| {
            print!("{}", r.to_text());
            0
        }),
        Command::Serve(a) => serve(a).map(|()| 0),
        Command::Simulate(a) => simulate(a).map(|_| {
            println!("wrote {}", a.out.display());
            0
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
