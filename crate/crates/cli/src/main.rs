mod args;
mod trace;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{CommandFactory, Parser};
use serde::Deserialize;
use tog_core::backends::{BackendConfig, BackendSet, SceneInput};
use tog_core::dataset::{
    auto_label_dataset, load_dataset, refine_dataset, save_dataset, validate_dataset, Dataset, Severity,
};
use tog_core::eval::{apply_partial_overrides, emit_report, evaluate_split, load_report, EvalConfig};
use tog_core::pipeline::{run_tog, TogRequest};
use tog_core::raster::RgbImage;
use tog_core::synth;

use args::{Cli, Command, Preset};

/// Failure of the requested operation; exits with status 1.
struct Failed(String);

impl<E: std::fmt::Display> From<E> for Failed {
    fn from(e: E) -> Self {
        Failed(e.to_string())
    }
}

fn usage_error(msg: &str) -> ExitCode {
    let mut cmd = Cli::command();
    cmd.error(clap::error::ErrorKind::ValueValidation, msg).print().ok();
    ExitCode::from(2)
}

fn load(path: &Path) -> Result<Dataset, Failed> {
    load_dataset(path).map_err(|e| Failed(format!("{}: {e}", path.display())))
}

fn backends(cli: &Cli, dataset: Arc<Dataset>) -> Result<BackendSet, Failed> {
    let cfg = match &cli.backend {
        Some(path) => BackendConfig::load(path)?,
        None => BackendConfig::default(),
    };
    if cli.verbose > 0 {
        let external = cfg.processes.iter().map(|p| p.command.join(" ")).collect::<Vec<_>>();
        eprintln!("backends: oracle seed {}, external {:?}", cfg.seed, external);
    }
    Ok(BackendSet::from_config(&cfg, dataset)?)
}

/// Writes a line of machine output; a closed pipe is not an error.
fn emit(line: &str) -> Result<(), Failed> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn save(d: &Dataset, out: &Path) -> Result<(), Failed> {
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failed(format!("{}: {e}", dir.display())))?;
    }
    Ok(save_dataset(d, out)?)
}

#[derive(Deserialize)]
struct PartialRow {
    object: String,
    task: String,
    partial_success: f64,
}

fn read_partial(path: &Path) -> Result<BTreeMap<(String, String), f64>, Failed> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Failed(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let row: PartialRow = row.map_err(|e| Failed(format!("{}: {e}", path.display())))?;
        if !(0.0..=1.0).contains(&row.partial_success) {
            return Err(Failed(format!(
                "{}: partial success {} for {}/{} outside [0, 1]",
                path.display(),
                row.partial_success,
                row.object,
                row.task
            )));
        }
        out.insert((row.object, row.task), row.partial_success);
    }
    Ok(out)
}

fn execute(cli: &Cli) -> Result<ExitCode, Failed> {
    match &cli.command {
        Command::Validate { manifest, strict } => {
            let d = load(manifest)?;
            let report = validate_dataset(&d);
            emit(&serde_json::to_string_pretty(&report)?)?;
            for i in &report.issues {
                let level = match i.severity {
                    Severity::Warning => "warning",
                    Severity::Error => "error",
                };
                eprintln!("{level}: {}: {}", i.location, i.message);
            }
            let failed = report.has_errors() || (*strict && !report.is_clean());
            Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::RefineAffordances { manifest, out } => {
            let mut d = load(manifest)?;
            refine_dataset(&mut d)?;
            save(&d, out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::AutoLabel {
            manifest,
            references,
            out,
            n_rots,
            min_iou,
        } => {
            let mut scenes = load(manifest)?;
            let refs = match references {
                Some(p) => load(p)?,
                None => scenes.clone(),
            };
            let failures = auto_label_dataset(&mut scenes, &refs, *n_rots, *min_iou);
            save(&scenes, out)?;
            for (id, e) in &failures {
                eprintln!("annotation {id}: {e}");
            }
            Ok(if failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Run {
            manifest,
            scene_id,
            target,
            task,
            mode,
            image,
            dump_trace,
            params,
        } => {
            let params = match params.to_params() {
                Ok(p) => p,
                Err(e) => return Ok(usage_error(&e)),
            };
            let d = Arc::new(load(manifest)?);
            let scene = d
                .scene(*scene_id)
                .ok_or_else(|| Failed(format!("scene {scene_id} not in {}", manifest.display())))?;
            let path = match image {
                Some(p) => p.clone(),
                None => d.resolve(&scene.image_path),
            };
            let img = RgbImage::load_png(&path).map_err(|e| Failed(format!("{}: {e}", path.display())))?;
            let set = backends(cli, d.clone())?;
            let req = TogRequest {
                scene: SceneInput {
                    scene_id: *scene_id,
                    image: img,
                    path: Some(path),
                },
                target: target.clone(),
                task: task.clone(),
                mode: *mode,
                params,
            };
            let outcome = run_tog(&req, &set, &d);
            let (trace, result) = match &outcome {
                Ok(r) => (&r.trace, Ok(&r.grasp)),
                Err(f) => (&f.trace, Err((f.stage.to_string(), f.error.to_string()))),
            };
            if cli.verbose > 0 {
                for (stage, ms) in &trace.timings {
                    eprintln!("{stage}: {ms:.1} ms");
                }
            }
            if let Some(dir) = dump_trace {
                let files = trace::dump(dir, &req, trace, result.clone()).map_err(Failed)?;
                if cli.verbose > 0 {
                    eprintln!("trace: {} files in {}", files.len(), dir.display());
                }
            }
            match outcome {
                Ok(r) => {
                    emit(&serde_json::to_string(&r.grasp)?)?;
                    Ok(ExitCode::SUCCESS)
                }
                Err(f) => Err(Failed(f.to_string())),
            }
        }
        Command::Eval {
            manifest,
            split,
            mode,
            report_dir,
            format,
            workers,
            iou_threshold,
            angle_threshold,
            keep_traces,
            params,
        } => {
            let params = match params.to_params() {
                Ok(p) => p,
                Err(e) => return Ok(usage_error(&e)),
            };
            let d = Arc::new(load(manifest)?);
            let set = backends(cli, d.clone())?;
            let cfg = EvalConfig {
                params,
                iou_threshold: *iou_threshold,
                angle_threshold: *angle_threshold,
                workers: *workers,
                keep_traces: *keep_traces,
                ..EvalConfig::new(split.clone(), *mode)
            };
            let report = evaluate_split(&d, &set, &cfg)?;
            let files = emit_report(&report, *format, report_dir)?;
            eprintln!(
                "{} split, {} mode: {} trials, TG accuracy {:.3}, grasp accuracy {:.3}",
                report.split, report.mode, report.trials, report.tg_accuracy, report.grasp_accuracy
            );
            if cli.verbose > 0 {
                for f in files {
                    eprintln!("wrote {}", f.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report {
            report,
            format,
            out_dir,
            partial,
        } => {
            let mut r = load_report(report)?;
            if let Some(p) = partial {
                for (object, task) in apply_partial_overrides(&mut r, &read_partial(p)?) {
                    eprintln!("warning: {object}/{task} is not in the report");
                }
            }
            emit_report(&r, *format, out_dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { preset, out } => {
            let spec = match preset {
                Preset::Mini => synth::mini_spec(),
                Preset::Synthetic => synth::synthetic_spec(),
            };
            synth::write_fixture(&spec, out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(Failed(msg)) => {
            eprintln!("tog: {msg}");
            ExitCode::from(1)
        }
    }
}
