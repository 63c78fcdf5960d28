//! Line-delimited JSON logging to stderr.

use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde::Serialize;

struct JsonLogger {
    level: LevelFilter,
}

#[derive(Serialize)]
struct Line<'a> {
    level: &'a str,
    target: &'a str,
    message: String,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = Line {
            level: record.level().as_str(),
            target: record.target(),
            message: record.args().to_string(),
        };
        if let Ok(text) = serde_json::to_string(&line) {
            let _ = writeln!(std::io::stderr().lock(), "{text}");
        }
    }

    fn flush(&self) {}
}

/// Installs the logger; the level comes from `SAECOUNT_LOG` (default `info`).
pub fn init() {
    let level = std::env::var("SAECOUNT_LOG")
        .ok()
        .and_then(|v| v.parse::<LevelFilter>().ok())
        .unwrap_or(Level::Info.to_level_filter());
    if log::set_boxed_logger(Box::new(JsonLogger { level })).is_ok() {
        log::set_max_level(level);
    }
}
