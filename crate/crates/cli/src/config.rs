//! Run configuration: a flat key = value file with '#' comments, overridden
//! by MGAFQMC_* environment variables, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub fcidump: PathBuf,
    pub output_dir: PathBuf,
    pub trial_path: Option<PathBuf>,
    pub core: Vec<usize>,
    pub active: Option<Vec<usize>>,
    pub chol_tol: f64,
    pub trial_source: TrialSource,
    pub n_shadows: usize,
    pub dtau: f64,
    pub walkers: usize,
    pub blocks: usize,
    pub steps_per_block: usize,
    pub n_equil: usize,
    pub energy_every: usize,
    pub force_bias_cap: f64,
    pub force_bias_samples: Option<usize>,
    pub estimator: EstimatorMode,
    pub vce: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    Exact,
    Shadows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialSource {
    Fci,
    File,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fcidump: PathBuf::from("system.fcidump"),
            output_dir: PathBuf::from("out"),
            trial_path: None,
            core: Vec::new(),
            active: None,
            chol_tol: 1e-8,
            trial_source: TrialSource::Fci,
            n_shadows: 100_000,
            dtau: 0.01,
            walkers: 128,
            blocks: 150,
            steps_per_block: 10,
            n_equil: 50,
            energy_every: 1,
            force_bias_cap: (2.0f64 / 0.01).sqrt(),
            force_bias_samples: None,
            estimator: EstimatorMode::Exact,
            vce: false,
            seed: 1,
        }
    }
}

fn parse_index_list(s: &str) -> Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad orbital index '{t}'"))
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut kv = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or(format!("line {}: expected key = value", lineno + 1))?;
            kv.insert(key.trim().to_string(), value.trim().to_string());
        }
        // Environment overrides.
        for (key, value) in std::env::vars() {
            if let Some(stripped) = key.strip_prefix("MGAFQMC_") {
                kv.insert(stripped.to_lowercase(), value);
            }
        }
        let mut cfg = RunConfig::default();
        for (key, value) in &kv {
            match key.as_str() {
                "fcidump" => cfg.fcidump = PathBuf::from(value),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "trial" => cfg.trial_path = Some(PathBuf::from(value)),
                "core" => cfg.core = parse_index_list(value)?,
                "active" => cfg.active = Some(parse_index_list(value)?),
                "chol_tol" => cfg.chol_tol = value.parse().map_err(|_| bad(key, value))?,
                "trial_source" => {
                    cfg.trial_source = match value.as_str() {
                        "fci" => TrialSource::Fci,
                        "file" => TrialSource::File,
                        _ => return Err(bad(key, value)),
                    }
                }
                "n_shadows" => cfg.n_shadows = value.parse().map_err(|_| bad(key, value))?,
                "dtau" => cfg.dtau = value.parse().map_err(|_| bad(key, value))?,
                "walkers" => cfg.walkers = value.parse().map_err(|_| bad(key, value))?,
                "blocks" => cfg.blocks = value.parse().map_err(|_| bad(key, value))?,
                "steps_per_block" => {
                    cfg.steps_per_block = value.parse().map_err(|_| bad(key, value))?
                }
                "n_equil" => cfg.n_equil = value.parse().map_err(|_| bad(key, value))?,
                "energy_every" => cfg.energy_every = value.parse().map_err(|_| bad(key, value))?,
                "force_bias_cap" => {
                    cfg.force_bias_cap = value.parse().map_err(|_| bad(key, value))?
                }
                "force_bias_samples" => {
                    cfg.force_bias_samples = Some(value.parse().map_err(|_| bad(key, value))?)
                }
                "estimator" => {
                    cfg.estimator = match value.as_str() {
                        "exact" => EstimatorMode::Exact,
                        "shadows" => EstimatorMode::Shadows,
                        _ => return Err(bad(key, value)),
                    }
                }
                "vce" => {
                    cfg.vce = match value.as_str() {
                        "true" | "1" | "yes" => true,
                        "false" | "0" | "no" => false,
                        _ => return Err(bad(key, value)),
                    }
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key, value))?,
                other => return Err(format!("unknown config key '{other}'")),
            }
        }
        if cfg.walkers == 0 || cfg.blocks == 0 || cfg.steps_per_block == 0 || cfg.n_shadows == 0 {
            return Err("counts must be positive".into());
        }
        Ok(cfg)
    }

    pub fn ham_path(&self) -> PathBuf {
        self.output_dir.join("hamiltonian.bin")
    }

    pub fn full_ham_path(&self) -> PathBuf {
        self.output_dir.join("hamiltonian_full.bin")
    }

    pub fn trial_file(&self) -> PathBuf {
        self.trial_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("trial.txt"))
    }

    pub fn archive_path(&self) -> PathBuf {
        self.output_dir.join("shadows.bin")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("run.ckpt")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.output_dir.join("trace.csv")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.output_dir.join("system.txt")
    }

    pub fn meta_path(&self) -> PathBuf {
        self.output_dir.join("run_meta.txt")
    }

    pub fn rdm_path(&self) -> PathBuf {
        self.output_dir.join("rdm.csv")
    }
}

fn bad(key: &str, value: &str) -> String {
    format!("bad value '{value}' for key '{key}'")
}
