//! Flat `key = value` run configuration.
//!
//! File values are loaded first and command-line flags override them. Every
//! value a command reads, defaults included, is recorded so the run can be
//! echoed back as a complete configuration file.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const KNOWN_KEYS: &[&str] = &[
    // data and model
    "data",
    "method",
    "s",
    "lambda",
    "alpha",
    "delta",
    "delta_star",
    "big_m",
    // tuning
    "folds",
    "seed",
    "swaps",
    "pilot_alpha",
    "mc_samples",
    // solver
    "max_sweeps",
    "rel_tol",
    "use_active_sets",
    "active_screen_multiplier",
    // simulation
    "replicates",
    "methods",
    "k",
    "p",
    "n_train",
    "n_test",
    "rho",
    "q",
    "tau",
    "sigma2_beta",
    "mu_lo",
    "mu_hi",
    "mu_override",
    "share_mu",
    "intercept",
    "design",
    "shared",
    "common_card",
    "hetero_max",
    "p_z",
    "s_grid",
    "lambda_grid",
    "alpha_grid",
    "delta_grid",
    "delta_star_grid",
];

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

fn check_key(key: &str) -> Result<()> {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("unknown configuration key '{key}'")))
    }
}

impl Settings {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, format!("expected key = value, got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(Error::parse(origin, i + 1, format!("unknown configuration key '{k}'")));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::parse(origin, i + 1, format!("duplicate key '{k}'")));
            }
        }
        Ok(Self { values, resolved: RefCell::default() })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, p)
            }
        }
    }

    /// Overrides a value from a command-line flag.
    pub fn set(&mut self, key: &str, value: Option<impl Display>) -> Result<()> {
        check_key(key)?;
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
        Ok(())
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    pub fn get<T: FromStr + Display>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get_opt(key)?.unwrap_or_else(|| {
            self.record(key, default.to_string());
            default
        }))
    }

    pub fn get_opt<T: FromStr + Display>(&self, key: &str) -> Result<Option<T>> {
        check_key(key)?;
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => {
                let v: T = raw
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("cannot parse value '{raw}' for key '{key}'")))?;
                self.record(key, raw.clone());
                Ok(Some(v))
            }
        }
    }

    pub fn require<T: FromStr + Display>(&self, key: &str) -> Result<T> {
        self.get_opt(key)?.ok_or_else(|| Error::InvalidConfig(format!("missing required setting '{key}'")))
    }

    pub fn list<T: FromStr + Display>(&self, key: &str, default: Option<Vec<T>>) -> Result<Option<Vec<T>>> {
        check_key(key)?;
        match self.values.get(key) {
            None => {
                if let Some(d) = &default {
                    self.record(key, join(d));
                }
                Ok(default)
            }
            Some(raw) => {
                let v = raw
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>().map_err(|_| Error::InvalidConfig(format!("cannot parse '{s}' in key '{key}'"))))
                    .collect::<Result<Vec<T>>>()?;
                self.record(key, raw.clone());
                Ok(Some(v))
            }
        }
    }

    /// Every value read so far, as a configuration file.
    pub fn echo(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in self.resolved.borrow().iter() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

pub fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut s = Settings::parse("# header\ns = 3  # budget\nlambda=0.5\n\n", Path::new("c.txt")).unwrap();
        s.set("lambda", Some(0.25)).unwrap();
        s.set("alpha", None::<f64>).unwrap();
        assert_eq!(s.get("s", 1usize).unwrap(), 3);
        assert_eq!(s.get("lambda", 0.0).unwrap(), 0.25);
        assert_eq!(s.get("alpha", 0.1).unwrap(), 0.1);
        assert_eq!(s.list::<usize>("s_grid", Some(vec![1, 2])).unwrap(), Some(vec![1, 2]));
        let echo = s.echo();
        assert!(echo.contains("s = 3\n"));
        assert!(echo.contains("alpha = 0.1\n"));
        assert!(echo.contains("s_grid = 1,2\n"));
        // the echo parses back
        let again = Settings::parse(&echo, Path::new("echo")).unwrap();
        assert_eq!(again.get("lambda", 0.0).unwrap(), 0.25);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        match Settings::parse("s = 1\nlamda = 2\n", Path::new("c.txt")) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("lamda"));
            }
            other => panic!("{other:?}"),
        }
        assert!(Settings::parse("s 1\n", Path::new("c")).is_err());
        assert!(Settings::parse("s = 1\ns = 2\n", Path::new("c")).is_err());
        let s = Settings::parse("s = x\n", Path::new("c")).unwrap();
        assert!(s.get("s", 1usize).is_err());
        let mut s = Settings::default();
        assert!(s.set("bogus", Some(1)).is_err());
    }
}
