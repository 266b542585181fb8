use std::ffi::OsString;
use std::fs;

use serde_json::Value;

use crate::io::{CliError, CliResult};

/// Splices `--config FILE` into plain flags placed right after the
/// subcommand, so explicit flags that follow override them.
pub fn expand(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            let p = it
                .next()
                .ok_or_else(|| CliError::Usage("--config needs a file".into()))?;
            path = Some(p);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.to_string_lossy())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.to_string_lossy())))?;
    let flags = to_flags(&value)?;
    // argv[0] is the program, argv[1] the subcommand.
    let at = rest.len().min(2);
    rest.splice(at..at, flags);
    Ok(rest)
}

fn to_flags(value: &Value) -> CliResult<Vec<OsString>> {
    let Value::Object(map) = value else {
        return Err(CliError::Usage("--config file must hold a JSON object".into()));
    };
    let mut out = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => out.push(flag.into()),
            Value::Array(items) => {
                out.push(flag.into());
                for item in items {
                    out.push(scalar(key, item)?.into());
                }
            }
            other => {
                out.push(flag.into());
                out.push(scalar(key, other)?.into());
            }
        }
    }
    Ok(out)
}

fn scalar(key: &str, v: &Value) -> CliResult<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(CliError::Usage(format!("--config key {key:?}: nested values are not flags"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_from_object() {
        let f = to_flags(&json!({"epochs": 5, "data": ["a", "b"], "mean_policy": "global", "x": null})).unwrap();
        let f: Vec<String> = f.into_iter().map(|s| s.into_string().unwrap()).collect();
        assert_eq!(f, ["--data", "a", "b", "--epochs", "5", "--mean-policy", "global"]);
        assert!(to_flags(&json!([1])).is_err());
        assert!(to_flags(&json!({"a": {"b": 1}})).is_err());
    }

    #[test]
    fn no_config_is_identity() {
        let argv: Vec<OsString> = ["kvcapsule", "memplan", "--n", "10"].iter().map(OsString::from).collect();
        assert_eq!(expand(argv.clone()).unwrap(), argv);
    }
}
