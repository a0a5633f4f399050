use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rwre_core::dipole::{CANCELLATION_MAX_BONDS, CANCELLATION_MAX_N, DIPOLE_DENSE_CAP};
use rwre_core::{Binning, EnvironmentSpec, Family, Lattice};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    GenEnv,
    KernelCompare,
    Spectrum,
    Walk,
    Kappa,
    Dipole,
    Bounds,
}

/// One run, read from TOML. Every field except `family` has a default, and
/// the resolved values are written back into the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub family: Family,
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    #[serde(default = "defaults::half_size")]
    pub half_size: usize,
    /// Sweep for `kernel-compare`.
    #[serde(default = "defaults::half_sizes")]
    pub half_sizes: Vec<usize>,
    /// Kernel grid points per axis. With a constant environment the default
    /// grid sits on lattice sites for `L` divisible by 64, where the discrete
    /// and continuum kernels coincide.
    #[serde(default = "defaults::grid")]
    pub grid: usize,
    /// Macroscopic sample times for the walker experiments.
    #[serde(default = "defaults::times")]
    pub times: Vec<f64>,
    #[serde(default = "defaults::walkers")]
    pub walkers: usize,
    #[serde(default = "defaults::replicas")]
    pub replicas: usize,
    #[serde(default = "defaults::binning")]
    pub binning: Binning,
    /// Environments averaged in `bounds`.
    #[serde(default = "defaults::envs")]
    pub envs: usize,
    /// Random test vectors for the Schwarz check.
    #[serde(default = "defaults::vectors")]
    pub vectors: usize,
    #[serde(default = "defaults::eigenpairs")]
    pub eigenpairs: usize,
    /// Continuum mode cutoff; derived from `eigenpairs` when absent.
    #[serde(default)]
    pub cutoff: Option<usize>,
    /// Neumann truncation order; exact resolvent when absent.
    #[serde(default)]
    pub order: Option<usize>,
    #[serde(default = "defaults::distances")]
    pub distances: Vec<i64>,
    #[serde(default = "defaults::geometric_constant")]
    pub geometric_constant: f64,
    #[serde(default = "defaults::graph_length")]
    pub graph_length: usize,
    #[serde(default = "defaults::graph_bonds")]
    pub graph_bonds: usize,
    #[serde(default)]
    pub write_kernels: bool,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

mod defaults {
    use rwre_core::Binning;

    pub fn dim() -> usize {
        1
    }
    pub fn half_size() -> usize {
        64
    }
    pub fn half_sizes() -> Vec<usize> {
        vec![64, 128, 256]
    }
    pub fn grid() -> usize {
        rwre_core::green::DEFAULT_GRID
    }
    pub fn times() -> Vec<f64> {
        rwre_core::walker::linear_grid(0.002, 0.02, 10)
    }
    pub fn walkers() -> usize {
        10_000
    }
    pub fn replicas() -> usize {
        4
    }
    pub fn binning() -> Binning {
        Binning::Sites
    }
    pub fn envs() -> usize {
        200
    }
    pub fn vectors() -> usize {
        50
    }
    pub fn eigenpairs() -> usize {
        8
    }
    pub fn distances() -> Vec<i64> {
        vec![1, 2, 4, 8, 16, 32]
    }
    pub fn geometric_constant() -> f64 {
        1.0
    }
    pub fn graph_length() -> usize {
        6
    }
    pub fn graph_bonds() -> usize {
        3
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn spec(&self) -> EnvironmentSpec {
        EnvironmentSpec {
            family: self.family,
            dim: self.dim,
            half_size: self.half_size,
            seed: self.seed,
        }
    }

    pub fn continuum_cutoff(&self) -> usize {
        self.cutoff
            .unwrap_or_else(|| (self.eigenpairs as f64).powf(1.0 / self.dim as f64).ceil() as usize + 2)
    }

    /// Checks every precondition the chosen experiment relies on.
    pub fn validate(&self, experiment: Experiment) -> Result<(), CliError> {
        self.spec().validate().map_err(|e| invalid(e.to_string()))?;
        Lattice::new(self.dim, self.half_size).map_err(|e| invalid(e.to_string()))?;
        let dense = |what: &str| {
            let sites = (2 * self.half_size - 1).checked_pow(self.dim as u32).unwrap_or(usize::MAX);
            if sites > DIPOLE_DENSE_CAP {
                Err(invalid(format!("{what} needs at most {DIPOLE_DENSE_CAP} sites, got {sites}")))
            } else {
                Ok(())
            }
        };
        match experiment {
            Experiment::GenEnv => {}
            Experiment::KernelCompare => {
                if self.dim != 1 {
                    return Err(invalid("kernel-compare is one-dimensional"));
                }
                if self.half_sizes.is_empty() || self.half_sizes.contains(&0) {
                    return Err(invalid("half_sizes must be a nonempty list of positive sizes"));
                }
                if self.grid < 2 {
                    return Err(invalid("grid needs at least 2 points"));
                }
            }
            Experiment::Spectrum => {
                if self.eigenpairs == 0 || self.continuum_cutoff() == 0 {
                    return Err(invalid("eigenpairs and cutoff must be positive"));
                }
            }
            Experiment::Walk | Experiment::Kappa => {
                if self.walkers == 0 || self.replicas == 0 {
                    return Err(invalid("walkers and replicas must be positive"));
                }
                if self.times.is_empty()
                    || self.times.iter().any(|t| !(*t > 0.0 && t.is_finite()))
                    || self.times.windows(2).any(|w| w[1] <= w[0])
                {
                    return Err(invalid("times must be positive and strictly increasing"));
                }
                if experiment == Experiment::Kappa && self.times.len() < 5 {
                    return Err(invalid("kappa fits the MSD and needs at least 5 times"));
                }
                if let Binning::Uniform { cells: 0 } = self.binning {
                    return Err(invalid("binning needs at least one cell"));
                }
            }
            Experiment::Dipole => {
                dense("dipole")?;
                if self.distances.iter().any(|r| *r < 0) {
                    return Err(invalid("distances must be >= 0"));
                }
            }
            Experiment::Bounds => {
                dense("bounds")?;
                if self.envs == 0 || self.vectors == 0 {
                    return Err(invalid("envs and vectors must be positive"));
                }
                if !(self.geometric_constant >= 0.0 && self.geometric_constant.is_finite()) {
                    return Err(invalid("geometric_constant must be finite and >= 0"));
                }
                if self.graph_length == 0
                    || self.graph_length > CANCELLATION_MAX_N
                    || self.graph_bonds == 0
                    || self.graph_bonds > CANCELLATION_MAX_BONDS
                {
                    return Err(invalid(format!(
                        "graph_length must be in 1..={CANCELLATION_MAX_N} and graph_bonds in 1..={CANCELLATION_MAX_BONDS}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: RunConfig = toml::from_str("family = { kind = \"constant\", rate = 1.0 }").unwrap();
        assert_eq!(cfg.half_sizes, vec![64, 128, 256]);
        assert_eq!(cfg.times.len(), 10);
        assert!(cfg.validate(Experiment::KernelCompare).is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<RunConfig, _> = toml::from_str("family = { kind = \"constant\", rate = 1.0 }\nwalker = 3");
        assert!(r.is_err());
    }

    #[test]
    fn preconditions() {
        let mut cfg: RunConfig = toml::from_str("family = { kind = \"constant\", rate = 1.0 }\ndim = 2").unwrap();
        assert!(cfg.validate(Experiment::KernelCompare).is_err());
        cfg.half_size = 100;
        assert!(cfg.validate(Experiment::Bounds).is_err());
        cfg.half_size = 4;
        cfg.times = vec![0.1, 0.05];
        assert!(cfg.validate(Experiment::Walk).is_err());
        cfg.family = Family::BoundedPerturbation { mean: 1.0, delta: 0.7 };
        assert!(cfg.validate(Experiment::GenEnv).is_err());
    }
}
