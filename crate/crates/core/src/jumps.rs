use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finitely supported jump-size law `nu` with `nu({0}) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawJumps", into = "RawJumps")]
pub struct JumpDistribution {
    atoms: Vec<f64>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawJumps {
    atoms: Vec<f64>,
    probs: Vec<f64>,
}

impl TryFrom<RawJumps> for JumpDistribution {
    type Error = Error;
    fn try_from(raw: RawJumps) -> Result<Self> {
        JumpDistribution::new(raw.atoms, raw.probs)
    }
}

impl From<JumpDistribution> for RawJumps {
    fn from(j: JumpDistribution) -> Self {
        RawJumps {
            atoms: j.atoms,
            probs: j.probs,
        }
    }
}

impl JumpDistribution {
    pub fn new(atoms: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidJumps("no atoms".into()));
        }
        if atoms.len() != probs.len() {
            return Err(Error::InvalidJumps(format!(
                "{} atoms but {} probabilities",
                atoms.len(),
                probs.len()
            )));
        }
        for (i, &a) in atoms.iter().enumerate() {
            if !a.is_finite() || a == 0.0 {
                return Err(Error::InvalidJumps(format!("atom {a} must be finite and nonzero")));
            }
            if atoms[..i].contains(&a) {
                return Err(Error::InvalidJumps(format!("duplicate atom {a}")));
            }
        }
        if probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidJumps("probabilities must be positive".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidJumps(format!("probabilities sum to {total}, not 1")));
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            atoms,
            probs,
            cumulative,
        })
    }

    /// Dirac mass at 1: the counting-process case.
    pub fn unit() -> Self {
        Self::new(vec![1.0], vec![1.0]).expect("unit jump law")
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn is_unit(&self) -> bool {
        self.atoms == [1.0]
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(a, p)| a * p).sum()
    }

    pub fn all_positive(&self) -> bool {
        self.atoms.iter().all(|&a| a > 0.0)
    }

    /// Atom index drawn by inversion of one uniform.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.index_for_uniform(u)
    }

    pub fn index_for_uniform(&self, u: f64) -> usize {
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.atoms.len() - 1)
    }

    pub fn index_of(&self, atom: f64) -> Option<usize> {
        self.atoms.iter().position(|&a| (a - atom).abs() <= 1e-12)
    }
}
