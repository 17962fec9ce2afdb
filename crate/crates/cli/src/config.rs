//! Flat `key = value` configuration files.
//!
//! Each key names a long flag of the subcommand (without the leading
//! dashes). The pairs are spliced into the argument list directly after the
//! subcommand, so flags given on the command line, which come later and
//! override earlier occurrences, take precedence.

use std::ffi::OsString;
use std::path::Path;

const SUBCOMMANDS: [&str; 7] = [
    "simulate",
    "search",
    "mask",
    "train",
    "denoise",
    "eval",
    "estimate-zcd",
];
const GLOBAL_VALUED: [&str; 2] = ["--threads", "--config"];

/// Parses the file contents into `(key, value)` pairs. Blank lines and
/// lines starting with `#` are ignored.
pub(crate) fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected `key = value`", n + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.starts_with('-') || key.contains(char::is_whitespace) {
            return Err(format!("config line {}: invalid key `{key}`", n + 1));
        }
        if key == "config" {
            return Err(format!(
                "config line {}: config files cannot include other config files",
                n + 1
            ));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

fn config_path(argv: &[OsString]) -> Result<Option<OsString>, String> {
    let mut found = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if arg == "--" {
            break;
        }
        if arg == "--config" {
            let value = argv.get(i + 1).ok_or("--config needs a path")?;
            found = Some(value.clone());
            i += 2;
            continue;
        }
        if let Some(v) = arg.strip_prefix("--config=") {
            found = Some(OsString::from(v));
        }
        i += 1;
    }
    Ok(found)
}

fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if GLOBAL_VALUED.contains(&arg.as_ref()) {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&arg.as_ref()) {
            return Some(i);
        }
        if !arg.starts_with('-') {
            return None;
        }
        i += 1;
    }
    None
}

/// Returns `argv` with the pairs of the `--config` file (if any) inserted
/// after the subcommand name.
pub(crate) fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&argv)? else {
        return Ok(argv);
    };
    let Some(at) = subcommand_index(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| format!("cannot read config {}: {e}", Path::new(&path).display()))?;
    let pairs = parse(&text)?;
    let mut out = argv[..=at].to_vec();
    for (k, v) in pairs {
        out.push(format!("--{k}").into());
        out.push(v.into());
    }
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}
