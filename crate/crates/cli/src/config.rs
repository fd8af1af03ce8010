//! Run configuration shared by the flag parser and `run --config`.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gfbsde::model::ProblemFile;
use gfbsde::{Error, Result, DEFAULT_SEED};

pub const SEED_ENV: &str = "GFBSDE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Certify,
    Gexp,
    SolveSde,
    SolveBsde,
    SolveFbsde,
    Compare,
    Duality,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::Gexp => "gexp",
            Command::SolveSde => "solve-sde",
            Command::SolveBsde => "solve-bsde",
            Command::SolveFbsde => "solve-fbsde",
            Command::Compare => "compare",
            Command::Duality => "duality",
        }
    }

    fn default_format(self) -> Format {
        match self {
            Command::Certify | Command::Duality => Format::Json,
            _ => Format::Csv,
        }
    }

    /// Keys beyond the common ones that the command reads.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Command::Certify => &["problem", "cp-formula"],
            Command::Gexp => &["problem", "n-steps", "n-space", "paths", "payoff"],
            Command::SolveSde => &["problem", "n-steps", "n-space", "paths", "y"],
            Command::SolveBsde => &["problem", "n-steps", "n-space", "paths", "y", "slice-every", "cp-formula"],
            Command::SolveFbsde => &[
                "problem",
                "n-steps",
                "n-space",
                "paths",
                "slice-every",
                "backend",
                "tol",
                "max-iter",
                "p-prime",
                "force",
                "trace",
                "cp-formula",
            ],
            Command::Compare => &["n-space", "paths", "theorem", "seeds", "grids", "tol"],
            Command::Duality => &["problem", "n-steps", "n-space", "paths", "tol"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

/// Every option of every command. Options a command does not read are
/// rejected by [`RunConfig::check`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Options {
    /// Problem file (TOML) or `catalog:<name>`.
    #[arg(value_name = "PROBLEM")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    /// Time steps; overrides the problem file's grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    /// Spatial nodes per coordinate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_space: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Monte Carlo paths per control.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// BDG constant `C(p)` as an expression in `p`; overrides the problem file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cp_formula: Option<String>,
    /// Payoff of `B_T` as an expression in `x`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payoff: Option<String>,
    /// Constant `Y` fed to the forward or backward stage.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    /// Write every k-th time slice.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_every: Option<usize>,
    /// `lattice` or `paths`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    /// Distance exponent of the contraction trace.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_prime: Option<f64>,
    /// Solve even when the certificate fails.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub force: bool,
    /// Trace CSV of `solve-fbsde`; defaults to `<output>.trace.csv`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// `41` (terminal functions) or `42` (initial states).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theorem: Option<String>,
    /// Number of battery seeds, counted up from the seed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    /// Comma-separated step counts.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grids: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub command: Command,
    #[serde(flatten)]
    pub options: Options,
}

/// Where the seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Config,
    Environment,
    Default,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| gfbsde::expr::line_col(&text, s.start));
            Error::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        // Paths in a config file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        let o = &mut cfg.options;
        if let Some(p) = &o.problem {
            if !p.starts_with("catalog:") {
                o.problem = Some(base.join(p).to_string_lossy().into_owned());
            }
        }
        o.output = o.output.as_ref().map(|p| base.join(p));
        o.trace = o.trace.as_ref().map(|p| base.join(p));
        Ok(cfg)
    }

    /// Rejects options the command does not read.
    pub fn check(&self) -> Result<()> {
        let allowed = self.command.keys();
        let value = serde_json::to_value(&self.options).expect("options serialize");
        let common = ["seed", "output", "format", "threads"];
        for key in value.as_object().expect("object").keys() {
            if !common.contains(&key.as_str()) && !allowed.contains(&key.as_str()) {
                return Err(Error::Config {
                    key: key.clone(),
                    message: format!("not used by `{}`", self.command.name()),
                });
            }
        }
        Ok(())
    }

    pub fn format(&self) -> Format {
        self.options.format.unwrap_or(self.command.default_format())
    }

    /// Seed from the config, then `GFBSDE_SEED`, then the default.
    pub fn resolve_seed(&self, env: Option<&str>) -> Result<(u64, SeedSource)> {
        if let Some(s) = self.options.seed {
            return Ok((s, SeedSource::Config));
        }
        match env {
            Some(v) => v
                .trim()
                .parse()
                .map(|s| (s, SeedSource::Environment))
                .map_err(|_| Error::Config {
                    key: SEED_ENV.into(),
                    message: format!("`{v}` is not an unsigned integer"),
                }),
            None => Ok((DEFAULT_SEED, SeedSource::Default)),
        }
    }

    /// SHA-256 over the canonical config (without file locations and
    /// thread count), the resolved seed and the problem source.
    pub fn hash(&self, seed: u64, problem_source: &str) -> String {
        let mut canon = self.clone();
        canon.options.problem = None;
        canon.options.output = None;
        canon.options.trace = None;
        canon.options.threads = None;
        canon.options.seed = Some(seed);
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canon).expect("config serializes"));
        h.update(b"\n");
        h.update(problem_source.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A problem and the text it was read from.
pub struct LoadedProblem {
    pub problem: ProblemFile,
    pub source: String,
}

pub fn load_problem(spec: Option<&str>) -> Result<LoadedProblem> {
    let spec = spec.ok_or_else(|| Error::Config {
        key: "problem".into(),
        message: "required for this command".into(),
    })?;
    if let Some(name) = spec.strip_prefix("catalog:") {
        return Ok(LoadedProblem {
            problem: ProblemFile::from_catalog(name)?,
            source: spec.to_string(),
        });
    }
    let path = Path::new(spec);
    let source = std::fs::read_to_string(path).map_err(|e| Error::Config {
        key: "problem".into(),
        message: format!("{spec}: {e}"),
    })?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("problem");
    Ok(LoadedProblem {
        problem: ProblemFile::parse(&source, stem)?,
        source,
    })
}
