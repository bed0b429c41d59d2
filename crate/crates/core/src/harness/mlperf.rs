//! MLPerf-v0.5.0-style result log emission and parsing.
//!
//! One line per event:
//!
//! ```text
//! :::MLPv0.5.0 resnet 1553154085.032542229 (run.rs:69) run_start
//! :::MLPv0.5.0 resnet 1553154159.685859919 (run.rs:70) eval_accuracy: {"epoch": 89, "value": 0.75082}
//! ```
//!
//! Timestamps carry exactly nine fractional digits. Wall-clock nanoseconds
//! since the Unix epoch do not fit an f64, so timestamps stay integers end
//! to end; elapsed time is the run_start to run_final difference, the
//! interval benchmark rules measure, inclusive of initialization.

use regex::Regex;
use std::panic::Location;
use std::sync::OnceLock;
use std::time::{SystemTime, UNIX_EPOCH};

pub const LOG_PREFIX: &str = ":::MLPv0.5.0";

/// Every emitted line matches this shape: prefix, model token, seconds with
/// nine fractional digits, a (file:line) source, a tag, an optional value.
pub fn line_grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^:::MLPv0\.5\.0 (\S+) (\d+)\.(\d{9}) \((\S+):(\d+)\) ([A-Za-z_][A-Za-z0-9_]*)(?:: (.*))?$",
        )
        .expect("grammar regex compiles")
    })
}

pub fn wall_clock_ns() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock precedes the epoch")
        .as_nanos()
}

pub fn format_timestamp(ns: u128) -> String {
    format!("{}.{:09}", ns / 1_000_000_000, (ns % 1_000_000_000) as u64)
}

pub fn format_event(
    model: &str,
    timestamp_ns: u128,
    source: &str,
    tag: &str,
    value: Option<&str>,
) -> String {
    let ts = format_timestamp(timestamp_ns);
    match value {
        Some(v) => format!("{LOG_PREFIX} {model} {ts} ({source}) {tag}: {v}"),
        None => format!("{LOG_PREFIX} {model} {ts} ({source}) {tag}"),
    }
}

/// The value payload an accuracy event carries.
pub fn epoch_value(epoch: u64, value: f64) -> String {
    format!("{{\"epoch\": {epoch}, \"value\": {value}}}")
}

/// Collects one run's event lines. Only rank 0 owns one of these; other
/// ranks log nothing.
#[derive(Debug, Default)]
pub struct EventLog {
    model: String,
    pub lines: Vec<String>,
}

impl EventLog {
    pub fn new(model: &str) -> EventLog {
        EventLog {
            model: model.to_string(),
            lines: Vec::new(),
        }
    }

    /// Appends one event stamped with the caller's file and line.
    #[track_caller]
    pub fn event(&mut self, tag: &str, value: Option<String>) {
        let loc = Location::caller();
        let source = format!("{}:{}", loc.file(), loc.line());
        self.lines.push(format_event(
            &self.model,
            wall_clock_ns(),
            &source,
            tag,
            value.as_deref(),
        ));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogSummary {
    /// run_final minus run_start, in seconds.
    pub elapsed_seconds: f64,
    /// eval_accuracy events in emission order: (epoch, value).
    pub accuracy: Vec<(u64, f64)>,
}

impl LogSummary {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracy.last().map(|&(_, v)| v)
    }
}

fn accuracy_value() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"^\{"epoch": (\d+), "value": ([0-9eE+.-]+)\}$"#).expect("regex compiles")
    })
}

/// Reads a run log back. Lines that do not start with the event prefix are
/// ignored, so logs interleaved with other output still parse; a prefixed
/// line that breaks the grammar is an error. Elapsed time spans the first
/// run_start to the last run_final, in exact nanosecond arithmetic.
pub fn parse_log(text: &str) -> Result<LogSummary, String> {
    let mut run_start: Option<u128> = None;
    let mut run_final: Option<u128> = None;
    let mut accuracy = Vec::new();

    for line in text.lines() {
        if !line.starts_with(LOG_PREFIX) {
            continue;
        }
        let caps = line_grammar()
            .captures(line)
            .ok_or_else(|| format!("malformed event line: {line}"))?;
        let secs: u128 = caps[2].parse().map_err(|_| "timestamp overflow")?;
        let frac: u128 = caps[3].parse().map_err(|_| "timestamp overflow")?;
        let ts = secs * 1_000_000_000 + frac;
        let tag = &caps[6];
        match tag {
            "run_start" => {
                if run_start.is_none() {
                    run_start = Some(ts);
                }
            }
            "run_final" => run_final = Some(ts),
            "eval_accuracy" => {
                let v = caps
                    .get(7)
                    .ok_or_else(|| "eval_accuracy without a value".to_string())?;
                let vc = accuracy_value()
                    .captures(v.as_str())
                    .ok_or_else(|| format!("unreadable accuracy value: {}", v.as_str()))?;
                let epoch: u64 = vc[1].parse().map_err(|_| "epoch overflow")?;
                let value: f64 = vc[2].parse().map_err(|_| "bad accuracy number")?;
                accuracy.push((epoch, value));
            }
            _ => {}
        }
    }

    let start = run_start.ok_or("log has no run_start")?;
    let end = run_final.ok_or("log has no run_final")?;
    if end < start {
        return Err("run_final precedes run_start".into());
    }
    Ok(LogSummary {
        elapsed_seconds: (end - start) as f64 / 1e9,
        accuracy,
    })
}
