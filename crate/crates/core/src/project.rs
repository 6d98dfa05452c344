//! Project files and the batch processing queue.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorimetry::{dye_to_xyz_matrix, DisplaySpace, DisplayTransform, Illuminant, IlluminantName, Observer};
use crate::geometry::{nyquist_gate, MapRecord, NyquistVerdict, RegistrationMap};
use crate::raster::{
    load_raster, mix_to_mono, negative_to_positive, save_png_preview, save_tiff16, sharpen, ChannelMix,
    InversionParams, LinearRaster, LoadOptions, SourceTag, CLIP_WARNING_FRACTION,
};
use crate::render::{
    collect_patch_grid, demosaic_with, finalize, recover_detail, screen_dye_rgb, simulate_viewing_screen, OutputSpace,
    RenderMode, RenderParams,
};
use crate::screen::{parse_pattern, pattern_preset, ProcessId, ScreenPattern};

pub const PROJECT_VERSION: u32 = 1;
/// Output pixels clamped by the colour transform above this share fail a run.
pub const CLAMP_FAIL_FRACTION: f64 = 0.01;
/// Missing patches above this share fail a run.
pub const MISSING_FAIL_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    /// Monochrome scan, or a colour scan reduced by the channel mix.
    pub mono: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<PathBuf>,
    /// Recorded with the project; the queue does not read it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infrared: Option<PathBuf>,
    pub load: LoadOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Registration {
    Unregistered,
    Registered { map: MapRecord },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpenParams {
    pub radius_px: f64,
    pub amount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ColorSettings {
    pub illuminant: IlluminantName,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Outputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiff: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_preview: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

/// Every parameter of the processing queue. Relative paths resolve
/// against the project file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub version: u32,
    pub inputs: Inputs,
    pub process_id: ProcessId,
    /// Pattern file replacing the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_override: Option<PathBuf>,
    pub registration: Registration,
    #[serde(default)]
    pub channel_mix: ChannelMix,
    #[serde(default)]
    pub inversion: InversionParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharpen: Option<SharpenParams>,
    #[serde(default)]
    pub render: RenderParams,
    #[serde(default)]
    pub color: ColorSettings,
    #[serde(default)]
    pub outputs: Outputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Project,
    Load,
    Mix,
    Sharpen,
    Invert,
    NyquistGate,
    Collect,
    Demosaic,
    RecoverDetail,
    ScreenSimulation,
    Finalize,
    Write,
    Diagnostics,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Project => "project",
            Stage::Load => "load",
            Stage::Mix => "mix",
            Stage::Sharpen => "sharpen",
            Stage::Invert => "invert",
            Stage::NyquistGate => "nyquist_gate",
            Stage::Collect => "collect",
            Stage::Demosaic => "demosaic",
            Stage::RecoverDetail => "recover_detail",
            Stage::ScreenSimulation => "screen_simulation",
            Stage::Finalize => "finalize",
            Stage::Write => "write",
            Stage::Diagnostics => "diagnostics",
        }
    }

    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Project => 2,
            Stage::Load => 3,
            Stage::Mix => 4,
            Stage::Sharpen => 5,
            Stage::Invert => 6,
            Stage::NyquistGate => 7,
            Stage::Collect => 8,
            Stage::Demosaic => 9,
            Stage::RecoverDetail => 10,
            Stage::ScreenSimulation => 11,
            Stage::Finalize => 12,
            Stage::Write => 13,
            Stage::Diagnostics => 14,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("project is not registered")]
    Unregistered,
    #[error("unsupported project version {0} (expected {PROJECT_VERSION})")]
    Version(u32),
    #[error("referenced file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("{stage}: {message}", stage = .stage.name())]
    Stage { stage: Stage, message: String },
}

impl ProjectError {
    pub fn stage(&self) -> Stage {
        match self {
            ProjectError::Stage { stage, .. } => *stage,
            ProjectError::Unregistered | ProjectError::Version(_) | ProjectError::MissingFile(_) => Stage::Project,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ProjectError::Unregistered => 15,
            other => other.stage().exit_code(),
        }
    }
}

fn stage_err(stage: Stage) -> impl FnOnce(&dyn std::fmt::Display) -> ProjectError {
    move |e| ProjectError::Stage {
        stage,
        message: e.to_string(),
    }
}

macro_rules! at {
    ($stage:expr, $e:expr) => {
        $e.map_err(|e| stage_err($stage)(&e))
    };
}

impl Project {
    /// A project over a scan with default parameters and no map.
    pub fn new(mono: impl Into<PathBuf>, source_tag: SourceTag, process_id: ProcessId) -> Self {
        Self {
            version: PROJECT_VERSION,
            inputs: Inputs {
                mono: mono.into(),
                rgb: None,
                infrared: None,
                load: LoadOptions::linear(source_tag),
            },
            process_id,
            pattern_override: None,
            registration: Registration::Unregistered,
            channel_mix: ChannelMix::default(),
            inversion: InversionParams::default(),
            sharpen: None,
            render: RenderParams::default(),
            color: ColorSettings::default(),
            outputs: Outputs::default(),
        }
    }

    /// Canonical text: pretty JSON in declaration order, trailing newline.
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("project serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ProjectError> {
        let p: Project = at!(Stage::Project, serde_json::from_str(text))?;
        if p.version != PROJECT_VERSION {
            return Err(ProjectError::Version(p.version));
        }
        Ok(p)
    }

    /// Reads a project and checks that referenced files exist.
    pub fn load(path: &Path) -> Result<LoadedProject, ProjectError> {
        let text = at!(Stage::Project, std::fs::read_to_string(path))?;
        let project = Self::from_text(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = LoadedProject { project, base };
        for p in loaded.input_paths() {
            if !p.exists() {
                return Err(ProjectError::MissingFile(p));
            }
        }
        if let Registration::Registered { map } = &loaded.project.registration {
            at!(Stage::Project, RegistrationMap::try_from(map))?;
        }
        Ok(loaded)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProjectError> {
        at!(Stage::Write, std::fs::write(path, self.to_text()))
    }

    pub fn map(&self) -> Result<Option<RegistrationMap>, ProjectError> {
        match &self.registration {
            Registration::Unregistered => Ok(None),
            Registration::Registered { map } => Ok(Some(at!(Stage::Project, RegistrationMap::try_from(map))?)),
        }
    }

    pub fn set_map(&mut self, map: Option<&RegistrationMap>) {
        self.registration = match map {
            Some(m) => Registration::Registered { map: MapRecord::from(m) },
            None => Registration::Unregistered,
        };
    }
}

/// A project with the directory its relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedProject {
    pub project: Project,
    pub base: PathBuf,
}

impl LoadedProject {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn input_paths(&self) -> Vec<PathBuf> {
        let i = &self.project.inputs;
        let mut v = vec![self.resolve(&i.mono)];
        v.extend(i.rgb.iter().map(|p| self.resolve(p)));
        v.extend(i.infrared.iter().map(|p| self.resolve(p)));
        v.extend(self.project.pattern_override.iter().map(|p| self.resolve(p)));
        v
    }

    pub fn pattern(&self) -> Result<ScreenPattern, ProjectError> {
        match &self.project.pattern_override {
            Some(p) => {
                let text = at!(Stage::Project, std::fs::read_to_string(self.resolve(p)))?;
                at!(Stage::Project, parse_pattern(&text))
            }
            None => at!(Stage::Project, pattern_preset(self.project.process_id)),
        }
    }

    /// Load, mix, sharpen and invert: the positive the geometry stages use.
    pub fn prepare(&self, report: &mut RunReport) -> Result<Prepared, ProjectError> {
        let p = &self.project;
        let source = p.inputs.rgb.as_ref().unwrap_or(&p.inputs.mono);
        let loaded = at!(Stage::Load, load_raster(&self.resolve(source), &p.inputs.load))?;
        report.stages.push(Stage::Load);
        report.load_clip_fraction = loaded.clipped_fraction;
        report.warnings.extend(loaded.warnings.iter().cloned());
        let mono = at!(Stage::Mix, mix_to_mono(&loaded.raster, &p.channel_mix))?;
        report.stages.push(Stage::Mix);
        let mono = match p.sharpen {
            Some(s) => {
                report.stages.push(Stage::Sharpen);
                sharpen(&mono, s.radius_px, s.amount)
            }
            None => mono,
        };
        let positive = if mono.source_tag() == SourceTag::Negative {
            report.stages.push(Stage::Invert);
            at!(Stage::Invert, negative_to_positive(&mono, &p.inversion))?
        } else {
            mono.clone()
        };
        Ok(Prepared { scan: mono, positive })
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    /// Mono scan before inversion.
    pub scan: LinearRaster,
    pub positive: LinearRaster,
}

/// Process RGB → output space, white normalized by the class area fractions.
pub fn output_matrix(
    pattern: &ScreenPattern,
    illuminant: IlluminantName,
    space: OutputSpace,
) -> Result<Matrix3<f64>, ProjectError> {
    let ill = Illuminant::named(illuminant).ok_or_else(|| ProjectError::Stage {
        stage: Stage::Project,
        message: "custom illuminants need a curve; use d50, d65 or equal_energy".into(),
    })?;
    let obs = Observer::cie1931();
    let m = at!(
        Stage::Finalize,
        dye_to_xyz_matrix(pattern.dyes(), &ill, &obs, pattern.class_area_fractions())
    )?;
    Ok(match space {
        OutputSpace::LinearXyz => m,
        OutputSpace::DisplayRgb => {
            let t = at!(Stage::Finalize, DisplayTransform::new(&DisplaySpace::srgb(), ill.white_xyz(&obs)))?;
            t.xyz_to_rgb_matrix() * m
        }
    })
}

/// What a run did and what it measured.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<Stage>,
    pub load_clip_fraction: f64,
    pub px_per_patch: f64,
    pub unmapped_pixels: usize,
    pub missing_patch_fraction: f64,
    pub clamped_fraction: f64,
    pub grid_size: [usize; 2],
    /// Where the dye spectra come from; flagged when they are fallbacks.
    pub dye_provenance: String,
    pub approximate_dyes: bool,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl RunReport {
    /// Diagnostics that fail a run even though every stage succeeded.
    pub fn threshold_failures(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.load_clip_fraction > CLIP_WARNING_FRACTION {
            v.push(format!("input clipping {:.4}% exceeds {:.1}%", self.load_clip_fraction * 100.0, CLIP_WARNING_FRACTION * 100.0));
        }
        if self.clamped_fraction > CLAMP_FAIL_FRACTION {
            v.push(format!("output clamping {:.3}% exceeds {:.1}%", self.clamped_fraction * 100.0, CLAMP_FAIL_FRACTION * 100.0));
        }
        if self.missing_patch_fraction > MISSING_FAIL_FRACTION {
            v.push(format!(
                "missing patches {:.2}% exceed {:.1}%",
                self.missing_patch_fraction * 100.0,
                MISSING_FAIL_FRACTION * 100.0
            ));
        }
        v
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let names: Vec<&str> = self.stages.iter().map(|st| st.name()).collect();
        let _ = writeln!(s, "stages = {}", names.join(" "));
        let _ = writeln!(s, "px_per_patch = {:.4}", self.px_per_patch);
        let _ = writeln!(s, "grid = {}x{}", self.grid_size[0], self.grid_size[1]);
        let _ = writeln!(s, "unmapped_pixels = {}", self.unmapped_pixels);
        let _ = writeln!(s, "missing_patch_fraction = {:.6}", self.missing_patch_fraction);
        let _ = writeln!(s, "load_clip_fraction = {:.6}", self.load_clip_fraction);
        let _ = writeln!(s, "clamped_fraction = {:.6}", self.clamped_fraction);
        let _ = writeln!(s, "dyes = {}", self.dye_provenance);
        if self.approximate_dyes {
            let _ = writeln!(s, "colour = approximate");
        }
        let _ = writeln!(s, "\n[outputs]");
        for o in &self.outputs {
            let _ = writeln!(s, "{}", o.display());
        }
        let _ = writeln!(s, "\n[warnings]");
        for w in self.warnings.iter().chain(self.threshold_failures().iter()) {
            let _ = writeln!(s, "{w}");
        }
        s
    }
}

/// Runs the whole queue and writes the configured outputs.
pub fn run_project(loaded: &LoadedProject) -> Result<RunReport, ProjectError> {
    let p = &loaded.project;
    let Some(map) = p.map()? else {
        return Err(ProjectError::Unregistered);
    };
    let pattern = loaded.pattern()?;
    at!(Stage::Project, p.render.validate())?;
    let matrix = output_matrix(&pattern, p.color.illuminant, p.render.output_space)?;
    let mut report = RunReport {
        dye_provenance: pattern.dyes().provenance().to_string(),
        approximate_dyes: pattern.dyes().is_approximate(),
        ..RunReport::default()
    };
    let Prepared { positive, .. } = loaded.prepare(&mut report)?;
    if map.frame().width != positive.width() as f64 || map.frame().height != positive.height() as f64 {
        return Err(ProjectError::Stage {
            stage: Stage::NyquistGate,
            message: "map frame does not match the scan size".into(),
        });
    }

    report.stages.push(Stage::NyquistGate);
    match nyquist_gate(&map, &pattern, &positive) {
        NyquistVerdict::Ok(v) => report.px_per_patch = v,
        NyquistVerdict::Reject(v) => {
            return Err(ProjectError::Stage {
                stage: Stage::NyquistGate,
                message: format!("{v:.3} pixels per patch is below 2"),
            })
        }
    }

    let image = if p.render.mode == RenderMode::ScreenSimulation {
        report.stages.push(Stage::ScreenSimulation);
        let dyes = screen_dye_rgb(&matrix, pattern.class_area_fractions());
        let sim = at!(Stage::ScreenSimulation, simulate_viewing_screen(&positive, &map, &pattern, &dyes))?;
        report.unmapped_pixels = sim.unmapped_pixels;
        report.grid_size = [positive.width(), positive.height()];
        report.stages.push(Stage::Finalize);
        let (out, stats) = at!(Stage::Finalize, finalize(&sim.image, &p.render, &Matrix3::identity()))?;
        report.clamped_fraction = stats.clamped_fraction;
        out
    } else {
        report.stages.push(Stage::Collect);
        let grid = at!(Stage::Collect, collect_patch_grid(&positive, &map, &pattern))?;
        report.unmapped_pixels = grid.unmapped_pixels();
        report.missing_patch_fraction = grid.missing_fraction();
        report.grid_size = [grid.width(), grid.height()];
        report.stages.push(Stage::Demosaic);
        let mut rgb = at!(Stage::Demosaic, demosaic_with(&grid, &pattern, p.render.interpolation))?;
        if p.render.mode == RenderMode::DemosaicWithDetail {
            report.stages.push(Stage::RecoverDetail);
            rgb = at!(Stage::RecoverDetail, recover_detail(&rgb, &grid, &positive, &map, &p.render.detail))?;
        }
        report.stages.push(Stage::Finalize);
        let (out, stats) = at!(Stage::Finalize, finalize(&rgb, &p.render, &matrix))?;
        report.clamped_fraction = stats.clamped_fraction;
        out
    };

    report.stages.push(Stage::Write);
    let o = &p.outputs;
    if let Some(t) = &o.tiff {
        let path = loaded.resolve(t);
        at!(Stage::Write, save_tiff16(&image, &path))?;
        report.outputs.push(path);
    }
    if let Some(t) = &o.png_preview {
        let path = loaded.resolve(t);
        at!(Stage::Write, save_png_preview(&image, &path))?;
        report.outputs.push(path);
    }
    if let Some(t) = &o.report {
        let path = loaded.resolve(t);
        report.outputs.push(path.clone());
        at!(Stage::Write, std::fs::write(&path, report.to_text()))?;
    }
    Ok(report)
}
