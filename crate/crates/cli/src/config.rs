//! `--config <path>` support: file values become ordinary flags placed
//! before the command-line ones, so explicit flags win.

use std::ffi::OsString;
use std::fs;

use clap::{Command, CommandFactory};

use crate::Cli;

/// Reads `key = value` lines (`#` comments) or a flat JSON object.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(trimmed).map_err(|e| format!("config JSON: {e}"))?;
        return obj
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Bool(b) => b.to_string(),
                    serde_json::Value::Number(n) => n.to_string(),
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|i| i.as_str().map(str::to_string).unwrap_or_else(|| i.to_string()))
                        .collect::<Vec<_>>()
                        .join(","),
                    other => return Err(format!("config key '{k}': unsupported value {other}")),
                };
                Ok((k, v))
            })
            .collect();
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        out.push((k.trim().to_string(), v.trim().trim_matches('"').to_string()));
    }
    Ok(out)
}

fn flag_kind(cmd: &Command, long: &str) -> Option<bool> {
    cmd.get_arguments()
        .find(|a| a.get_long() == Some(long))
        .map(|a| !a.get_action().takes_values())
}

/// Turns config entries into flags for `sub`.
pub fn config_flags(sub: &Command, entries: &[(String, String)]) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (key, value) in entries {
        let long = key.replace('_', "-");
        if long == "config" {
            continue;
        }
        let negated = format!("no-{long}");
        match flag_kind(sub, &long) {
            Some(false) => {
                out.push(format!("--{long}").into());
                out.push(value.into());
            }
            Some(true) => match value.as_str() {
                "true" => out.push(format!("--{long}").into()),
                "false" => {}
                _ => return Err(format!("config key '{key}' is a switch; use true or false")),
            },
            None => match (value.as_str(), flag_kind(sub, &negated)) {
                ("false", Some(true)) => out.push(format!("--{negated}").into()),
                ("true", Some(true)) => {}
                _ => return Err(format!("config key '{key}' is not an option of '{}'", sub.get_name())),
            },
        }
    }
    Ok(out)
}

/// Splices the flags from any `--config` file in `args` in right after the
/// subcommand name.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let Some(sub_pos) = strs.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let root = Cli::command();
    let Some(sub) = root.find_subcommand(&strs[sub_pos]) else { return Ok(args) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let flags = config_flags(sub, &parse_config(&text)?)?;
    let mut out: Vec<OsString> = args[..=sub_pos].to_vec();
    // A leading positional (the generate task) must stay first.
    let mut rest = args[sub_pos + 1..].iter().cloned().peekable();
    if sub.get_positionals().next().is_some() {
        if let Some(first) = rest.peek() {
            if !first.to_string_lossy().starts_with('-') {
                out.push(rest.next().unwrap());
            }
        }
    }
    out.extend(flags);
    out.extend(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_formats_parse() {
        let kv = parse_config("# comment\nd_model = 64\nno_qa=true\n").unwrap();
        assert_eq!(kv, vec![("d_model".into(), "64".into()), ("no_qa".into(), "true".into())]);
        let js = parse_config(r#"{"d_model": 64, "brk_self_attn": false, "k": [2, 3]}"#).unwrap();
        assert!(js.contains(&("k".into(), "2,3".into())));
        assert!(js.contains(&("brk_self_attn".into(), "false".into())));
        assert!(parse_config("oops").is_err());
    }

    #[test]
    fn entries_map_onto_flags() {
        let root = Cli::command();
        let train = root.find_subcommand("train").unwrap();
        let flags = config_flags(
            train,
            &[("d_model".into(), "64".into()), ("brk_self_attn".into(), "false".into()), ("multipass".into(), "true".into())],
        )
        .unwrap();
        let flags: Vec<String> = flags.iter().map(|f| f.to_string_lossy().into_owned()).collect();
        assert_eq!(flags, ["--d-model", "64", "--no-brk-self-attn", "--multipass"]);
        assert!(config_flags(train, &[("bogus".into(), "1".into())]).is_err());
    }
}
