use std::fmt;
use std::str::FromStr;

use crate::calibration::EnergyProfile;
use crate::error::{Result, SlimError};

/// How the size of the prime set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    /// `|PN| = round(γ·d_ff)`.
    FixedFraction,
    /// Smallest prefix whose cumulative energy reaches the threshold.
    EnergyThreshold,
}

impl SelectionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionRule::FixedFraction => "fixed-fraction",
            SelectionRule::EnergyThreshold => "energy-threshold",
        }
    }
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionRule {
    type Err = SlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fixed-fraction" | "fraction" => Ok(SelectionRule::FixedFraction),
            "energy-threshold" | "energy" => Ok(SelectionRule::EnergyThreshold),
            other => Err(SlimError::config(format!("unknown selection rule {other:?}"))),
        }
    }
}

/// Split of one layer's intermediate neurons into prime and marginal sets,
/// both stored in ascending index order.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronPartition {
    pub layer: usize,
    pub prime: Vec<usize>,
    pub marginal: Vec<usize>,
    /// Fraction of neurons kept prime.
    pub gamma: f64,
    pub rule: SelectionRule,
}

impl NeuronPartition {
    pub fn d_ff(&self) -> usize {
        self.prime.len() + self.marginal.len()
    }

    /// Rebuilds a partition from its prime set, e.g. when reading a manifest.
    pub fn from_prime(layer: usize, mut prime: Vec<usize>, d_ff: usize, rule: SelectionRule) -> Result<Self> {
        prime.sort_unstable();
        if prime.windows(2).any(|w| w[0] == w[1]) || prime.last().is_some_and(|&i| i >= d_ff) {
            return Err(SlimError::input(format!(
                "prime set of layer {layer} is not a subset of 0..{d_ff}"
            )));
        }
        let mut is_prime = vec![false; d_ff];
        for &i in &prime {
            is_prime[i] = true;
        }
        let marginal = (0..d_ff).filter(|&i| !is_prime[i]).collect();
        let gamma = prime.len() as f64 / d_ff as f64;
        Ok(NeuronPartition {
            layer,
            prime,
            marginal,
            gamma,
            rule,
        })
    }
}

/// Ranks neurons by `profile` and keeps the leading ones prime.
///
/// `value` is γ for [`SelectionRule::FixedFraction`] and the energy
/// threshold for [`SelectionRule::EnergyThreshold`]; both lie in `[0, 1]`.
pub fn partition_neurons(
    layer: usize,
    profile: &EnergyProfile,
    value: f64,
    rule: SelectionRule,
) -> Result<NeuronPartition> {
    if profile.is_empty() {
        return Err(SlimError::input("empty neuron profile"));
    }
    if !(0.0..=1.0).contains(&value) {
        return Err(SlimError::config(format!("{rule} value {value} outside [0, 1]")));
    }
    let d_ff = profile.len();
    let n_prime = match rule {
        SelectionRule::FixedFraction => {
            let n = (value * d_ff as f64).round() as usize;
            if value > 0.0 && value < 1.0 {
                n.clamp(1, d_ff.saturating_sub(1).max(1))
            } else {
                n
            }
        }
        SelectionRule::EnergyThreshold if value == 0.0 => 0,
        SelectionRule::EnergyThreshold => profile.prefix_for_energy(value),
    };
    let prime: Vec<usize> = profile.sorted[..n_prime].iter().map(|p| p.0).collect();
    let mut part = NeuronPartition::from_prime(layer, prime, d_ff, rule)?;
    if rule == SelectionRule::FixedFraction {
        part.gamma = value;
    }
    Ok(part)
}
