//! `--config FILE` support. The file holds `key = value` lines; `#` starts a
//! comment. Each key is a long flag name of the chosen subcommand or a global
//! flag. Values fill in flags missing from the command line, so flags given
//! explicitly always win. Boolean flags take `true` or `false`. A key may
//! repeat for flags that accept several values.

use clap::{ArgAction, Command};

fn config_path(argv: &[String]) -> Result<Option<String>, String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it
                .next()
                .cloned()
                .map(Some)
                .ok_or_else(|| "--config needs a file".to_string());
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Ok(Some(p.to_string()));
        }
    }
    Ok(None)
}

pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.starts_with('-') {
            return Err(format!("line {}: bad key {k:?}", n + 1));
        }
        out.push((k.to_string(), v.trim_matches('"').to_string()));
    }
    Ok(out)
}

fn given(argv: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    let with_value = format!("--{key}=");
    argv.iter().any(|a| a == &flag || a.starts_with(&with_value))
}

/// Returns `argv` extended with the settings of the config file, if any.
pub fn merge(cmd: &Command, argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&argv)? else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    let entries = parse(&text)?;
    let sub = argv
        .iter()
        .skip(1)
        .find_map(|a| cmd.find_subcommand(a))
        .ok_or_else(|| "a subcommand is required with --config".to_string())?;

    let mut extra = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err(format!("{path}: config files cannot include other config files"));
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| format!("{path}: unknown key {key:?} for {}", sub.get_name()))?;
        if given(&argv, &key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => return Err(format!("{path}: {key} must be true or false")),
            },
            ArgAction::Count => {
                let n: usize = value
                    .parse()
                    .map_err(|_| format!("{path}: {key} must be a count"))?;
                extra.extend(std::iter::repeat_n(format!("--{key}"), n));
            }
            _ => extra.push(format!("--{key}={value}")),
        }
    }
    let mut out = argv;
    match out.iter().position(|a| a == "--") {
        Some(i) => {
            out.splice(i..i, extra);
        }
        None => out.extend(extra),
    }
    Ok(out)
}
