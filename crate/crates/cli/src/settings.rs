//! Effective configuration: command-line flag, else config file, else
//! built-in default. Every value read is remembered so it can be echoed
//! into the artifacts it produced.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every key any subcommand reads from a config file.
pub const KNOWN_KEYS: &[&str] = &[
    "data", "eval", "lambda", "gamma", "lr", "mask_lr", "steps", "batch", "patch", "seed", "lr_halve_at",
    "hidden", "latent", "gate", "epsilon", "tau", "model_out", "model", "tolerance", "inputs", "out",
    "threshold", "order", "baseline", "size", "warmup", "rounds", "gammas",
];

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    effective: Vec<(String, String)>,
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!("{origin}:{}: expected `key = value`", n + 1)));
        };
        let key = k.trim().replace('-', "_");
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::usage(format!("{origin}:{}: unknown key `{key}`", n + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::usage(format!("{origin}:{}: `{key}` set twice", n + 1)));
        }
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                parse_config(&text, &p.display().to_string())?
            }
        };
        Ok(Self {
            file,
            effective: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::usage(format!("config key `{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.effective.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    /// Like [`Settings::get`] for values with no default; echoed as `none`.
    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        let shown = v.as_ref().map_or_else(|| "none".to_string(), T::to_string);
        self.effective.push((key.to_string(), shown));
        Ok(v)
    }

    pub fn effective(&self) -> &[(String, String)] {
        &self.effective
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = Settings {
            file: parse_config("lambda = 0.5\nsteps=7 # short\n\n", "t").unwrap(),
            effective: Vec::new(),
        };
        assert_eq!(s.get("lambda", Some(0.25f32), 1.0).unwrap(), 0.25);
        assert_eq!(s.get("steps", None, 1000usize).unwrap(), 7);
        assert_eq!(s.get("seed", None, 3u64).unwrap(), 3);
        assert_eq!(s.get_opt::<usize>("lr_halve_at", None).unwrap(), None);
        let keys: Vec<_> = s.effective().iter().map(|(k, v)| format!("{k}={v}")).collect();
        assert_eq!(keys, ["lambda=0.25", "steps=7", "seed=3", "lr_halve_at=none"]);
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(parse_config("lamda = 1", "t").is_err());
        assert!(parse_config("steps", "t").is_err());
        assert!(parse_config("steps = 1\nsteps = 2", "t").is_err());
        assert_eq!(parse_config("mask-lr = 0.1", "t").unwrap()["mask_lr"], "0.1");
        let mut s = Settings {
            file: parse_config("steps = many", "t").unwrap(),
            effective: Vec::new(),
        };
        assert!(s.get("steps", None, 1usize).is_err());
    }
}
