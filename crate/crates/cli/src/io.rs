use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use kvcapsule::kvmodel::format::{decode_kvd, encode_kvd, KvTensor};
use kvcapsule::Error;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    /// Classifies a library error raised while handling `path`.
    pub fn at(path: &Path, e: Error) -> Self {
        let classified = CliError::from(e);
        let msg = format!("{}: {}", path.display(), classified.message());
        match classified {
            CliError::Usage(_) => CliError::Usage(msg),
            CliError::Data(_) => CliError::Data(msg),
            CliError::Numeric(_) => CliError::Numeric(msg),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        if e.is_numeric() {
            return CliError::Numeric(msg);
        }
        match e {
            Error::Parameter(_) | Error::UnsupportedPath(_) => CliError::Usage(msg),
            _ => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_kvd(path: &Path) -> CliResult<Vec<KvTensor>> {
    let bytes = read_bytes(path)?;
    decode_kvd(&bytes).map_err(|e| CliError::at(path, e.into()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_kvd(path: &Path, entries: &[KvTensor]) -> CliResult<()> {
    let bytes = encode_kvd(entries).map_err(|e| CliError::at(path, e.into()))?;
    write_bytes(path, &bytes)
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Provenance carried by every report: tool version plus run parameters.
#[derive(Debug, Clone)]
pub struct Meta(Vec<(String, Value)>);

impl Meta {
    pub fn new(command: &str) -> Self {
        Meta(vec![
            ("tool".into(), json!("kvcapsule")),
            ("version".into(), json!(env!("CARGO_PKG_VERSION"))),
            ("command".into(), json!(command)),
        ])
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.0.push((key.into(), serde_json::to_value(value).unwrap_or(Value::Null)));
        self
    }

    pub fn json(&self) -> Value {
        Value::Object(self.0.iter().cloned().collect())
    }

    /// `# key=value` lines for the top of a CSV file.
    pub fn csv_header(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("# {k}={s}\n"),
                other => format!("# {k}={other}\n"),
            })
            .collect()
    }
}

pub fn csv_with_meta(meta: &Meta, body: &str) -> String {
    format!("{}{body}", meta.csv_header())
}

pub fn json_with_meta(meta: &Meta, key: &str, data: impl Serialize) -> CliResult<String> {
    let v = json!({ "meta": meta.json(), key: data });
    serde_json::to_string_pretty(&v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Data(e.to_string()))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
pub fn print_stdout(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}
