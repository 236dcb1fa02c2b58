use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tog_core::dataset::{Split, DEFAULT_ALIGNMENT_MIN_IOU};
use tog_core::eval::{ReportFormat, DEFAULT_ANGLE_THRESHOLD, DEFAULT_IOU_THRESHOLD};
use tog_core::pipeline::{
    Mode, TogParams, DEFAULT_AFFORDANCE_THRESHOLD, DEFAULT_MAX_AREA, DEFAULT_MIN_AREA, DEFAULT_N_ROTS, DEFAULT_TAU,
};

pub const DEFAULTS_NOTE: &str = "\
Pipeline defaults: segments kept when 400 < area < 50000 px, subset threshold tau 0.75.
A grasp succeeds when its angle is within 30° of a ground-truth grasp and their IoU exceeds 0.25.";

#[derive(Debug, Parser)]
#[command(
    name = "tog",
    version,
    about = "Task-oriented grasping: dataset tools, pipeline runs and evaluation"
)]
#[command(after_help = DEFAULTS_NOTE)]
pub struct Cli {
    /// Backend configuration (JSON). Without one every model is a noiseless oracle.
    #[arg(long, global = true, env = "TOG_BACKEND_CONFIG", value_name = "FILE")]
    pub backend: Option<PathBuf>,

    /// More diagnostics on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a manifest's invariants and print the findings as JSON.
    #[command(after_help = DEFAULTS_NOTE)]
    Validate {
        manifest: PathBuf,
        /// Fail on warnings too.
        #[arg(long)]
        strict: bool,
    },
    /// Clip every affordance mask to its object mask and save the result.
    #[command(after_help = DEFAULTS_NOTE)]
    RefineAffordances {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Transfer grasps and affordances from reference objects onto scene objects.
    #[command(after_help = DEFAULTS_NOTE)]
    AutoLabel {
        /// Manifest whose scene objects get labelled.
        manifest: PathBuf,
        /// Manifest holding the reference objects (defaults to the input).
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_N_ROTS, value_parser = parse_n_rots)]
        n_rots: usize,
        /// Minimum IoU between the aligned reference and the scene mask.
        #[arg(long, default_value_t = DEFAULT_ALIGNMENT_MIN_IOU, value_parser = unit_interval)]
        min_iou: f64,
    },
    /// Run the pipeline on one scene object and print the chosen grasp as JSON.
    #[command(after_help = DEFAULTS_NOTE)]
    Run {
        manifest: PathBuf,
        #[arg(long)]
        scene_id: u64,
        /// Target object (subcategory id).
        #[arg(long)]
        target: String,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "binary", value_parser = parse_mode)]
        mode: Mode,
        /// Scene image to use instead of the manifest's.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Write the stage images and the stage log here.
        #[arg(long, value_name = "DIR")]
        dump_trace: Option<PathBuf>,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Evaluate a split and write the report.
    #[command(after_help = DEFAULTS_NOTE)]
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Split name or group: category, subcategory, test, all, or one split.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: String,
        #[arg(long, default_value = "binary", value_parser = parse_mode)]
        mode: Mode,
        #[arg(long, default_value = "report")]
        report_dir: PathBuf,
        #[arg(long, default_value = "json", value_parser = parse_format)]
        format: ReportFormat,
        #[arg(long, default_value_t = 1, value_parser = parse_workers)]
        workers: usize,
        /// Grasp IoU must exceed this.
        #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD, value_parser = unit_interval)]
        iou_threshold: f64,
        /// Grasp angle error allowed, in degrees.
        #[arg(long, default_value_t = DEFAULT_ANGLE_THRESHOLD, value_parser = positive)]
        angle_threshold: f64,
        /// Keep each trial's stage log in the report.
        #[arg(long)]
        keep_traces: bool,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Re-emit a saved JSON report, optionally filling in partial-success scores.
    #[command(after_help = DEFAULTS_NOTE)]
    Report {
        report: PathBuf,
        #[arg(long, default_value = "markdown", value_parser = parse_format)]
        format: ReportFormat,
        #[arg(long, default_value = "report")]
        out_dir: PathBuf,
        /// CSV with columns object,task,partial_success.
        #[arg(long)]
        partial: Option<PathBuf>,
    },
    /// Write a generated fixture (images and manifest).
    #[command(after_help = DEFAULTS_NOTE)]
    Synth {
        #[arg(long, value_enum, default_value_t = Preset::Mini)]
        preset: Preset,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Mini,
    Synthetic,
}

#[derive(Debug, Clone, Args)]
pub struct ParamArgs {
    /// Segments must be larger than this (pixels).
    #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
    pub min_area: usize,
    /// Segments must be smaller than this (pixels).
    #[arg(long, default_value_t = DEFAULT_MAX_AREA)]
    pub max_area: usize,
    /// A segment covered above this fraction by a larger one is dropped.
    #[arg(long, default_value_t = DEFAULT_TAU, value_parser = unit_interval)]
    pub tau: f64,
    /// Rotation candidates for affordance alignment.
    #[arg(long, default_value_t = DEFAULT_N_ROTS, value_parser = parse_n_rots)]
    pub n_rots: usize,
    /// Confidence needed for a predicted affordance (standard mode).
    #[arg(long, default_value_t = DEFAULT_AFFORDANCE_THRESHOLD, value_parser = closed_unit_interval)]
    pub affordance_threshold: f64,
    /// Use the whole object when the task region comes out empty.
    #[arg(long)]
    pub region_fallback: bool,
}

impl ParamArgs {
    pub fn to_params(&self) -> Result<TogParams, String> {
        let p = TogParams {
            min_area: self.min_area,
            max_area: self.max_area,
            tau: self.tau,
            n_rots: self.n_rots,
            affordance_threshold: self.affordance_threshold,
            region_fallback: self.region_fallback,
            ..TogParams::default()
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"))
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

fn closed_unit_interval(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<String, String> {
    match Split::select(s) {
        Some(_) => Ok(s.to_string()),
        None => Err(format!("unknown split {s:?}")),
    }
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: tog_core::eval::EvalError| e.to_string())
}

fn count_in(s: &str, lo: usize, hi: usize) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{s:?}: {e}"))?;
    if (lo..=hi).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside {lo}..={hi}"))
    }
}

fn parse_n_rots(s: &str) -> Result<usize, String> {
    count_in(s, 1, 360)
}

fn parse_workers(s: &str) -> Result<usize, String> {
    count_in(s, 1, 256)
}
