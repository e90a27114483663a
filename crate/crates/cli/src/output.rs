use std::process::ExitCode;

use serde_json::{json, Value};

/// Version of the `--json` document layout.
pub const SCHEMA_VERSION: u32 = 1;

pub struct Outcome {
    pub code: u8,
    pub text: String,
    pub json: Value,
}

impl Outcome {
    pub fn ok(text: String, json: Value) -> Self {
        Self::with_code(0, text, json)
    }

    pub fn with_code(code: u8, text: String, json: Value) -> Self {
        Outcome { code, text, json }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: anyhow::Error) -> Self {
        Failure { code, error }
    }
}

pub fn emit(command: &str, as_json: bool, result: Result<Outcome, Failure>) -> ExitCode {
    match result {
        Ok(out) => {
            if as_json {
                let mut doc = json!({ "schema_version": SCHEMA_VERSION, "command": command, "exit_code": out.code });
                if let (Value::Object(doc), Value::Object(extra)) = (&mut doc, out.json) {
                    doc.extend(extra);
                }
                println!("{doc}");
            } else {
                println!("{}", out.text);
            }
            ExitCode::from(out.code)
        }
        Err(f) => {
            let message = format!("{:#}", f.error);
            if as_json {
                println!(
                    "{}",
                    json!({
                        "schema_version": SCHEMA_VERSION,
                        "command": command,
                        "exit_code": f.code,
                        "error": message,
                    })
                );
            } else {
                eprintln!("satpatch {command}: {message}");
            }
            ExitCode::from(f.code)
        }
    }
}

/// Left-aligns the first column and right-aligns the rest.
pub fn table<const N: usize>(header: &[[String; N]], rows: &[[String; N]]) -> String {
    let all: Vec<&[String; N]> = header.iter().chain(rows).collect();
    let widths: Vec<usize> = (0..N)
        .map(|c| all.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    all.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c == 0 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}
