//! Random symmetric environments: one positive rate per unordered bond of
//! `Λ_L`, including the bonds to the absorbing layer.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::lattice::{Lattice, OneForm};
use crate::rng::{fill_words, unit_closed_open, unit_open_closed, ENV_STREAM};

/// Distribution of a single bond rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    /// Every bond equals `rate`.
    Constant { rate: f64 },
    /// Uniform on `[lo, hi)`.
    UniformInterval { lo: f64, hi: f64 },
    /// `w = mean · (1 + α)` with `α` uniform on `[−delta, delta)`.
    BoundedPerturbation { mean: f64, delta: f64 },
    /// `w = cap · U^{1/gamma}`, `U` uniform on `(0, 1]`, so that
    /// `P(w ≤ x) = (x/cap)^gamma`. `E w⁻¹` is finite iff `gamma > 1`.
    HeavyTailNearZero { gamma: f64, cap: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        let ok = |c: bool, msg: &str| if c { Ok(()) } else { Err(domain(msg)) };
        match *self {
            Family::Constant { rate } => ok(rate > 0.0 && rate.is_finite(), "constant rate must be > 0"),
            Family::UniformInterval { lo, hi } => ok(
                lo > 0.0 && lo < hi && hi.is_finite(),
                "uniform interval requires 0 < lo < hi",
            ),
            Family::BoundedPerturbation { mean, delta } => ok(
                mean > 0.0 && mean.is_finite() && (0.0..0.5).contains(&delta),
                "bounded perturbation requires mean > 0 and 0 <= delta < 1/2",
            ),
            Family::HeavyTailNearZero { gamma, cap } => ok(
                gamma > 0.0 && cap > 0.0 && gamma.is_finite() && cap.is_finite(),
                "heavy tail requires gamma > 0 and cap > 0",
            ),
        }
    }

    /// Draws one rate from 64 random bits.
    #[inline]
    pub fn draw(&self, bits: u64) -> f64 {
        match *self {
            Family::Constant { rate } => rate,
            Family::UniformInterval { lo, hi } => lo + (hi - lo) * unit_closed_open(bits),
            Family::BoundedPerturbation { mean, delta } => {
                mean * (1.0 + delta * (2.0 * unit_closed_open(bits) - 1.0))
            }
            Family::HeavyTailNearZero { gamma, cap } => cap * unit_open_closed(bits).powf(1.0 / gamma),
        }
    }

    /// `E w`.
    pub fn mean_rate(&self) -> f64 {
        match *self {
            Family::Constant { rate } => rate,
            Family::UniformInterval { lo, hi } => 0.5 * (lo + hi),
            Family::BoundedPerturbation { mean, .. } => mean,
            Family::HeavyTailNearZero { gamma, cap } => cap * gamma / (gamma + 1.0),
        }
    }

    /// `E w⁻¹`, or `None` when it diverges.
    pub fn mean_inverse_rate(&self) -> Option<f64> {
        match *self {
            Family::Constant { rate } => Some(1.0 / rate),
            Family::UniformInterval { lo, hi } => Some((hi / lo).ln() / (hi - lo)),
            Family::BoundedPerturbation { mean, delta } => Some(if delta == 0.0 {
                1.0 / mean
            } else {
                ((1.0 + delta) / (1.0 - delta)).ln() / (2.0 * delta * mean)
            }),
            Family::HeavyTailNearZero { gamma, cap } => {
                (gamma > 1.0).then(|| gamma / ((gamma - 1.0) * cap))
            }
        }
    }

    /// The effective coefficient in d = 1, `(E w⁻¹)⁻¹`; zero when the
    /// inverse moment diverges.
    pub fn harmonic_mean(&self) -> f64 {
        self.mean_inverse_rate().map_or(0.0, |m| 1.0 / m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub family: Family,
    pub dim: usize,
    pub half_size: usize,
    pub seed: u64,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.dim == 0 || self.half_size == 0 {
            return Err(domain("dimension and half-size must be positive"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_half_size(mut self, half_size: usize) -> Self {
        self.half_size = half_size;
        self
    }
}

/// An immutable assignment of rates to the bonds of `Λ_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    lattice: Lattice,
    rates: Vec<f64>,
    spec: Option<EnvironmentSpec>,
}

const GEN_CHUNK: usize = 1 << 14;

/// Samples independent bond rates. Bond `b` always uses word `b` of the
/// environment stream of `spec.seed`, so the output is a pure function of
/// `spec` regardless of how generation is split across threads.
pub fn sample_environment(spec: &EnvironmentSpec) -> Result<Environment> {
    spec.validate()?;
    let lattice = Lattice::new(spec.dim, spec.half_size)?;
    let mut rates = vec![0.0; lattice.num_bonds()];
    let family = spec.family;
    rates
        .par_chunks_mut(GEN_CHUNK)
        .enumerate()
        .for_each(|(k, chunk)| {
            let mut words = vec![0u64; chunk.len()];
            fill_words(spec.seed, ENV_STREAM, (k * GEN_CHUNK) as u64, &mut words);
            for (slot, bits) in chunk.iter_mut().zip(words) {
                *slot = family.draw(bits);
            }
        });
    Ok(Environment {
        lattice,
        rates,
        spec: Some(*spec),
    })
}

impl Environment {
    /// Wraps explicit rates given in canonical bond order.
    pub fn from_rates(dim: usize, half_size: usize, rates: Vec<f64>) -> Result<Self> {
        let lattice = Lattice::new(dim, half_size)?;
        if rates.len() != lattice.num_bonds() {
            return Err(Error::Shape {
                expected: lattice.num_bonds(),
                actual: rates.len(),
            });
        }
        if let Some(bad) = rates.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(domain(format!("bond rate {bad} is not positive")));
        }
        Ok(Self {
            lattice,
            rates,
            spec: None,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn half_size(&self) -> usize {
        self.lattice.half_size()
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn spec(&self) -> Option<&EnvironmentSpec> {
        self.spec.as_ref()
    }

    fn require_1d(&self) -> Result<()> {
        if self.dim() != 1 {
            return Err(Error::Dimension {
                expected: 1,
                actual: self.dim(),
            });
        }
        Ok(())
    }

    /// `s_x = (1/x) Σ_{z<x} 1/w_z` over the leftmost `x` bonds.
    pub fn partial_sum_s(&self, x: usize) -> Result<f64> {
        self.require_1d()?;
        if x == 0 || x > self.rates.len() {
            return Err(domain(format!(
                "site count {x} outside 1..={}",
                self.rates.len()
            )));
        }
        Ok(self.rates[..x].iter().map(|w| w.recip()).sum::<f64>() / x as f64)
    }

    /// Finite-volume harmonic mean `1 / s_{2L}`.
    pub fn harmonic_kappa(&self) -> Result<f64> {
        Ok(1.0 / self.partial_sum_s(self.rates.len())?)
    }

    /// `α_b = w_b / w̄ − 1`.
    pub fn alpha_field(&self, mean: f64) -> Result<OneForm> {
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(domain("reference rate must be > 0"));
        }
        Ok(OneForm(self.rates.iter().map(|w| w / mean - 1.0).collect()))
    }

    pub fn to_file(&self) -> EnvironmentFile {
        EnvironmentFile {
            version: EnvironmentFile::VERSION,
            dim: self.dim(),
            half_size: self.half_size(),
            family: self.spec.map(|s| s.family),
            seed: self.spec.map(|s| s.seed),
            rates: self.rates.clone(),
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, &self.to_file())?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let file: EnvironmentFile = serde_json::from_reader(input)?;
        file.into_environment()
    }
}

/// Serialized environment: header plus the flat rate array in canonical
/// bond order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentFile {
    pub version: u32,
    pub dim: usize,
    pub half_size: usize,
    pub family: Option<Family>,
    pub seed: Option<u64>,
    pub rates: Vec<f64>,
}

impl EnvironmentFile {
    pub const VERSION: u32 = 1;

    pub fn into_environment(self) -> Result<Environment> {
        if self.version != Self::VERSION {
            return Err(domain(format!("unsupported environment version {}", self.version)));
        }
        let mut env = Environment::from_rates(self.dim, self.half_size, self.rates)?;
        if let (Some(family), Some(seed)) = (self.family, self.seed) {
            env.spec = Some(EnvironmentSpec {
                family,
                dim: self.dim,
                half_size: self.half_size,
                seed,
            });
        }
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, dim: usize, half_size: usize, seed: u64) -> EnvironmentSpec {
        EnvironmentSpec {
            family,
            dim,
            half_size,
            seed,
        }
    }

    #[test]
    fn constant_family() {
        let env = sample_environment(&spec(Family::Constant { rate: 1.0 }, 1, 4, 0)).unwrap();
        assert_eq!(env.rates(), &[1.0; 8]);
    }

    #[test]
    fn bounded_perturbation_support() {
        let env = sample_environment(&spec(
            Family::BoundedPerturbation {
                mean: 1.0,
                delta: 0.4,
            },
            2,
            8,
            7,
        ))
        .unwrap();
        assert!(env.rates().iter().all(|w| (0.6..=1.4).contains(w)));
        let alpha = env.alpha_field(1.0).unwrap();
        assert!(alpha.iter().all(|a| a.abs() <= 0.4));
    }

    #[test]
    fn invalid_parameters_rejected() {
        for family in [
            Family::Constant { rate: 0.0 },
            Family::UniformInterval { lo: 0.0, hi: 1.0 },
            Family::UniformInterval { lo: 2.0, hi: 1.0 },
            Family::BoundedPerturbation { mean: 1.0, delta: 0.5 },
            Family::BoundedPerturbation { mean: -1.0, delta: 0.1 },
            Family::HeavyTailNearZero { gamma: 0.0, cap: 1.0 },
            Family::HeavyTailNearZero { gamma: 1.0, cap: -1.0 },
        ] {
            assert!(matches!(
                sample_environment(&spec(family, 1, 4, 0)),
                Err(Error::Domain(_))
            ));
        }
    }

    #[test]
    fn partial_sums_and_kappa() {
        let env = Environment::from_rates(1, 1, vec![1.0, 0.5]).unwrap();
        assert_eq!(env.partial_sum_s(2).unwrap(), 1.5);
        assert!((env.harmonic_kappa().unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let env = sample_environment(&spec(Family::Constant { rate: 2.0 }, 1, 5, 0)).unwrap();
        for x in 1..=10 {
            assert_eq!(env.partial_sum_s(x).unwrap(), 0.5);
        }
        assert_eq!(env.harmonic_kappa().unwrap(), 2.0);
    }

    #[test]
    fn partial_sum_errors() {
        let env = sample_environment(&spec(Family::Constant { rate: 1.0 }, 2, 2, 0)).unwrap();
        assert!(matches!(env.partial_sum_s(1), Err(Error::Dimension { .. })));
        let env = sample_environment(&spec(Family::Constant { rate: 1.0 }, 1, 2, 0)).unwrap();
        assert!(env.partial_sum_s(0).is_err());
        assert!(env.partial_sum_s(5).is_err());
    }

    #[test]
    fn alpha_field_values() {
        let env = Environment::from_rates(1, 1, vec![1.4, 1.0]).unwrap();
        let alpha = env.alpha_field(1.0).unwrap();
        assert!((alpha[0] - 0.4).abs() < 1e-15);
        assert_eq!(alpha[1], 0.0);
        assert!(env.alpha_field(0.0).is_err());
    }

    #[test]
    fn from_rates_rejects_nonpositive() {
        assert!(Environment::from_rates(1, 1, vec![1.0, 0.0]).is_err());
        assert!(Environment::from_rates(1, 1, vec![1.0]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let env = sample_environment(&spec(
            Family::UniformInterval { lo: 0.5, hi: 1.5 },
            2,
            3,
            5,
        ))
        .unwrap();
        let mut buf = Vec::new();
        env.write_json(&mut buf).unwrap();
        let back = Environment::read_json(&buf[..]).unwrap();
        assert_eq!(back, env);
    }

    #[test]
    fn closed_form_moments() {
        let f = Family::UniformInterval { lo: 0.5, hi: 1.5 };
        assert!((f.mean_inverse_rate().unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!(Family::HeavyTailNearZero { gamma: 0.5, cap: 1.0 }
            .mean_inverse_rate()
            .is_none());
        let f = Family::HeavyTailNearZero { gamma: 3.0, cap: 2.0 };
        assert!((f.mean_inverse_rate().unwrap() - 0.75).abs() < 1e-15);
    }
}
