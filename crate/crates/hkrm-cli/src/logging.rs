//! Structured logging: one JSON object per line in `--log json`, terse
//! key=value text otherwise. Everything goes to stderr so stdout stays
//! reserved for command output.

use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LogFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy)]
pub struct Logger {
    format: LogFormat,
}

impl Logger {
    pub fn new(format: LogFormat) -> Self {
        Logger { format }
    }

    pub fn event(&self, event: &str, fields: Value) {
        match self.format {
            LogFormat::Json => {
                let mut obj = json!({ "level": "info", "event": event });
                if let (Some(dst), Some(src)) = (obj.as_object_mut(), fields.as_object()) {
                    for (k, v) in src {
                        dst.insert(k.clone(), v.clone());
                    }
                }
                eprintln!("{obj}");
            }
            LogFormat::Text => {
                let mut line = format!("[info] {event}");
                if let Some(map) = fields.as_object() {
                    for (k, v) in map {
                        line.push_str(&format!(" {k}={v}"));
                    }
                }
                eprintln!("{line}");
            }
        }
    }
}
