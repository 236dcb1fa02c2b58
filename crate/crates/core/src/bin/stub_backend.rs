//! Minimal JSON-lines backend used to exercise the subprocess transport.
//!
//! Usage: `tog-stub-backend [--sleep-ms N] [--mismatch-id] [--exit-after N]`
//!
//! Besides every model op it answers `echo` (returns its args) and `sleep`
//! (`{"ms": N}`). Outputs are fixed shapes, not predictions.

use std::io::{BufRead, Write};
use std::time::Duration;

use serde_json::{json, Value};
use tog_core::backends::protocol::{Hello, ImageArgs, OneShotArgs, Request, Response, ViewArgs};
use tog_core::backends::Kind;
use tog_core::geometry::GraspRect;
use tog_core::maskops::{BinaryMask, MaskWire};

#[derive(Default)]
struct Flags {
    sleep_ms: u64,
    mismatch_id: bool,
    exit_after: Option<usize>,
}

fn parse_flags() -> Result<Flags, String> {
    let mut flags = Flags::default();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        let mut number = |name: &str| -> Result<u64, String> {
            args.next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("{name} needs a number"))
        };
        match a.as_str() {
            "--sleep-ms" => flags.sleep_ms = number("--sleep-ms")?,
            "--exit-after" => flags.exit_after = Some(number("--exit-after")? as usize),
            "--mismatch-id" => flags.mismatch_id = true,
            other => return Err(format!("unknown flag {other}")),
        }
    }
    Ok(flags)
}

fn parse<T: serde::de::DeserializeOwned>(args: Value) -> Result<T, String> {
    serde_json::from_value(args).map_err(|e| format!("bad args: {e}"))
}

fn handle(op: &str, args: Value) -> Result<Option<Value>, String> {
    Ok(Some(match op {
        "hello" => serde_json::to_value(Hello {
            kinds: Kind::ALL.to_vec(),
            concurrent: false,
            labels: Some(vec!["mug".into(), "knife".into()]),
        })
        .expect("hello serializes"),
        "ping" => return Ok(None),
        "echo" => args,
        "sleep" => {
            let ms = args.get("ms").and_then(Value::as_u64).unwrap_or(0);
            std::thread::sleep(Duration::from_millis(ms));
            json!({ "slept": ms })
        }
        "segment" => {
            let a: ImageArgs = parse(args)?;
            let (w, h) = (a.width, a.height);
            let left = BinaryMask::from_fn(w, h, |x, _| x < w / 2);
            let centre = BinaryMask::from_fn(w, h, |x, y| x >= w / 4 && x < 3 * w / 4 && y >= h / 4 && y < 3 * h / 4);
            json!({ "masks": [MaskWire::rle(&left), MaskWire::rle(&centre)] })
        }
        "embed_image" | "embed_pair" => {
            let a: ViewArgs = parse(args)?;
            let [x0, y0, x1, y1] = a.context.bbox;
            json!({ "embedding": [x0, y0, x1 - x0, y1 - y0] })
        }
        "embed_text" => {
            let text = args.get("text").and_then(Value::as_str).unwrap_or_default();
            json!({ "embedding": [text.len() as f64, 1.0, 0.0, 0.0] })
        }
        "classify" => json!({ "labels": ["mug", "knife"], "logits": [1.0, 0.0] }),
        "affordance_oneshot" => {
            let a: OneShotArgs = parse(args)?;
            json!({ "mask": a.reference_region })
        }
        "affordance_segment" => {
            let a: ViewArgs = parse(args)?;
            let n = a.context.side;
            let mask = BinaryMask::from_fn(n, n, |x, _| x < n / 2);
            json!({ "predictions": [{ "label": "grasp", "confidence": 0.9, "mask": MaskWire::bits(&mask) }] })
        }
        "propose_grasps" => {
            let a: ImageArgs = parse(args)?;
            let g = GraspRect::new(a.width as f64 / 2.0, a.height as f64 / 2.0, 40.0, 20.0, 0.0)
                .and_then(|g| g.with_confidence(0.8))
                .map_err(|e| e.to_string())?;
            json!({ "grasps": [g] })
        }
        other => return Err(format!("unknown op {other:?}")),
    }))
}

fn main() {
    let flags = match parse_flags() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("tog-stub-backend: {e}");
            std::process::exit(2);
        }
    };
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    let mut answered = 0usize;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("tog-stub-backend: malformed request: {e}");
                continue;
            }
        };
        if flags.sleep_ms > 0 && req.op != "hello" {
            std::thread::sleep(Duration::from_millis(flags.sleep_ms));
        }
        let id = if flags.mismatch_id && req.op != "hello" {
            req.id + 1000
        } else {
            req.id
        };
        let resp = match handle(&req.op, req.args) {
            Ok(result) => Response::success(id, result),
            Err(e) => Response::failure(id, e),
        };
        let frame = serde_json::to_string(&resp).expect("response serializes");
        if writeln!(stdout, "{frame}").and_then(|_| stdout.flush()).is_err() {
            break;
        }
        answered += 1;
        if flags.exit_after.is_some_and(|n| answered >= n) {
            break;
        }
    }
}
