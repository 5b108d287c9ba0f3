//! Run manifests: what a command was asked to do and what it wrote.
//!
//! The format is flat `key=value` text. `arg.N` holds the command line,
//! `config.KEY` the full configuration snapshot, `checkpoint.N` and
//! `output.N` the artifact paths.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    /// `key=value` lines of the effective configuration.
    pub config: String,
    pub checkpoints: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, seed: u64, config: String) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args,
            seed,
            config,
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# pcn run manifest\n");
        let _ = writeln!(out, "version={}", self.version);
        let _ = writeln!(out, "command={}", self.command);
        let _ = writeln!(out, "seed={}", self.seed);
        for (i, a) in self.args.iter().enumerate() {
            let _ = writeln!(out, "arg.{i}={a}");
        }
        for line in self.config.lines().filter(|l| !l.trim().is_empty()) {
            let _ = writeln!(out, "config.{line}");
        }
        for (i, p) in self.checkpoints.iter().enumerate() {
            let _ = writeln!(out, "checkpoint.{i}={}", p.display());
        }
        for (i, p) in self.outputs.iter().enumerate() {
            let _ = writeln!(out, "output.{i}={}", p.display());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("manifest line {}: expected key=value", n + 1))?;
            match k {
                "version" => m.version = v.to_string(),
                "command" => m.command = v.to_string(),
                "seed" => m.seed = v.parse().with_context(|| format!("manifest line {}: bad seed", n + 1))?,
                _ if k.starts_with("arg.") => m.args.push(v.to_string()),
                _ if k.starts_with("config.") => {
                    let _ = writeln!(m.config, "{}={v}", &k["config.".len()..]);
                }
                _ if k.starts_with("checkpoint.") => m.checkpoints.push(v.into()),
                _ if k.starts_with("output.") => m.outputs.push(v.into()),
                _ => bail!("manifest line {}: unknown key `{k}`", n + 1),
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut m = RunManifest::new("train", vec!["--stages".into(), "1,2".into()], 9, "a=1\nb=2,3\n".into());
        m.checkpoints.push("r/stage1.ckpt".into());
        m.outputs.push("r/loss_stage1.csv".into());
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
        assert!(RunManifest::parse("what=1\n").is_err());
    }
}
