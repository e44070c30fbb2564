//! Numerical checks of the bilinear student-teacher results: key-difference
//! covariance, rank-1 minimizers, alignment under isotropic and
//! near-isotropic frames, and penalty-driven orthogonality.
//!
//! Each check is a [`TheoremVerifier`] registered by name in a
//! [`VerifierRegistry`].

mod bilinear;
mod frames;
mod two_key;

pub use bilinear::{
    angle_bound, fit_omega, perturbation_tau, sample_key_difference_covariance, theorem3_audit, theorem3_on,
    verify_lemma3, verify_theorem1, verify_theorem2, verify_theorem3, OmegaBudget, OmegaFit, TightSetup,
};
pub use frames::{check_conditioning, harmonic_frame, random_unit_frame, FramePair, TeacherSpec, MAX_CONDITION, PINV_CUT};
pub use two_key::{minimize_two_key, two_key_ce, verify_theorem4, TwoKeyBudget, TwoKeyProblem, TwoKeyTrace};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Absolute slack when comparing a measurement to its bound, so exact
/// zeros survive rounding.
pub const COMPARISON_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
}

impl Check {
    pub fn new(name: &str, measured: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            measured,
            bound,
        }
    }

    pub fn satisfied(&self) -> bool {
        self.measured <= self.bound + COMPARISON_SLACK
    }

    pub fn margin(&self) -> f64 {
        self.bound - self.measured
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum VerdictStatus {
    Checked,
    NotApplicable { reason: String },
    /// Quantities recorded without a bound to check.
    Recorded,
}

/// Outcome of one verification at one parameter point. The pass/fail
/// state is derived from `checks` whenever it is asked for.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TheoremVerdict {
    pub theorem_id: String,
    pub label: String,
    pub status: VerdictStatus,
    pub checks: Vec<Check>,
    #[serde(default)]
    pub recorded: BTreeMap<String, f64>,
}

impl TheoremVerdict {
    pub fn checked(id: &str, label: String, checks: Vec<Check>) -> Self {
        Self {
            theorem_id: id.to_string(),
            label,
            status: VerdictStatus::Checked,
            checks,
            recorded: BTreeMap::new(),
        }
    }

    pub fn not_applicable(id: &str, label: String, reason: String) -> Self {
        Self {
            status: VerdictStatus::NotApplicable { reason },
            ..Self::checked(id, label, Vec::new())
        }
    }

    pub fn recorded(id: &str, label: String) -> Self {
        Self {
            status: VerdictStatus::Recorded,
            ..Self::checked(id, label, Vec::new())
        }
    }

    pub fn record(&mut self, key: &str, value: f64) {
        self.recorded.insert(key.to_string(), value);
    }

    /// `None` unless the verdict carries checks.
    pub fn bound_satisfied(&self) -> Option<bool> {
        match self.status {
            VerdictStatus::Checked => Some(self.checks.iter().all(Check::satisfied)),
            _ => None,
        }
    }

    /// Smallest `bound − measured` over the checks.
    pub fn margin(&self) -> Option<f64> {
        match self.status {
            VerdictStatus::Checked => self.checks.iter().map(Check::margin).reduce(f64::min),
            _ => None,
        }
    }
}

#[derive(Serialize)]
struct VerdictReport<'a> {
    theorem_id: &'a str,
    label: &'a str,
    status: &'a VerdictStatus,
    checks: &'a [Check],
    recorded: &'a BTreeMap<String, f64>,
    bound_satisfied: Option<bool>,
    margin: Option<f64>,
}

impl Serialize for TheoremVerdict {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VerdictReport {
            theorem_id: &self.theorem_id,
            label: &self.label,
            status: &self.status,
            checks: &self.checks,
            recorded: &self.recorded,
            bound_satisfied: self.bound_satisfied(),
            margin: self.margin(),
        }
        .serialize(s)
    }
}

/// Cut-offs standing in for finite-budget training noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub sine: f64,
    pub rank_ratio: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            sine: 0.05,
            rank_ratio: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    /// Overrides the Monte-Carlo sample count where one is used.
    pub samples: Option<usize>,
    pub seed: u64,
    pub tolerances: Tolerances,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: None,
            seed: 0,
            tolerances: Tolerances::default(),
        }
    }
}

pub trait TheoremVerifier: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    fn verify(&self, opts: &VerifyOptions) -> Result<Vec<TheoremVerdict>>;
}

pub struct Lemma3;
pub struct Theorem1;
pub struct Theorem2;
pub struct Theorem3;
pub struct Theorem4;

impl TheoremVerifier for Lemma3 {
    fn name(&self) -> &'static str {
        "lemma3"
    }

    fn summary(&self) -> &'static str {
        "key-difference covariance against its closed form"
    }

    fn verify(&self, opts: &VerifyOptions) -> Result<Vec<TheoremVerdict>> {
        let n = opts.samples.unwrap_or(1_000_000);
        let random = FramePair::random(6, 9, opts.seed);
        vec![
            (Matrix::identity(4), 0.5, 4),
            (Matrix::identity(4), 0.001, 4),
            (random.y_features, 0.3, 2),
        ]
        .into_par_iter()
        .enumerate()
        .map(|(k, (y, p, m))| verify_lemma3(&y, p, m, n, opts.seed.wrapping_add(k as u64)))
        .collect()
    }
}

impl TheoremVerifier for Theorem1 {
    fn name(&self) -> &'static str {
        "theorem1"
    }

    fn summary(&self) -> &'static str {
        "trained bilinear student recovers the rank-1 teacher"
    }

    fn verify(&self, opts: &VerifyOptions) -> Result<Vec<TheoremVerdict>> {
        let frames = FramePair::random(6, 9, opts.seed);
        let teacher = TeacherSpec::new(&frames, 8.0)?;
        let budget = OmegaBudget {
            seed: opts.seed,
            ..OmegaBudget::default()
        };
        Ok(vec![verify_theorem1(&frames, &teacher, 0.3, 4, &budget, &opts.tolerances)?])
    }
}

impl TheoremVerifier for Theorem2 {
    fn name(&self) -> &'static str {
        "theorem2"
    }

    fn summary(&self) -> &'static str {
        "tight frames give singular vectors on the first features"
    }

    fn verify(&self, opts: &VerifyOptions) -> Result<Vec<TheoremVerdict>> {
        let setup = TightSetup {
            d: 4,
            scale_x: 1.0,
            scale_y: 1.0,
            shared: false,
            seed: opts.seed,
        };
        let budget = OmegaBudget {
            seed: opts.seed,
            ..OmegaBudget::default()
        };
        Ok(vec![verify_theorem2(&setup, 8.0, 0.3, 4, &budget, &opts.tolerances)?])
    }
}

impl TheoremVerifier for Theorem3 {
    fn name(&self) -> &'static str {
        "theorem3"
    }

    fn summary(&self) -> &'static str {
        "angle bound for near-isotropic frames"
    }

    fn verify(&self, opts: &VerifyOptions) -> Result<Vec<TheoremVerdict>> {
        let s = opts.seed;
        Ok(vec![
            verify_theorem3(6, 12, 0.0, 0.0, 1.0, s)?,
            verify_theorem3(6, 12, 0.1, 0.0, 1.0, s)?,
            theorem3_audit(6, 12, 0.05, 1.0, 100, s)?,
        ])
    }
}

impl TheoremVerifier for Theorem4 {
    fn name(&self) -> &'static str {
        "theorem4"
    }

    fn summary(&self) -> &'static str {
        "overlap penalty forces the second key orthogonal"
    }

    fn verify(&self, opts: &VerifyOptions) -> Result<Vec<TheoremVerdict>> {
        let budget = TwoKeyBudget {
            seed: opts.seed,
            ..TwoKeyBudget::default()
        };
        [1e4, 0.0]
            .into_par_iter()
            .map(|lambda| verify_theorem4(3.0, 1.0, 0.9, 0.6, lambda, &budget))
            .collect()
    }
}

/// Verifiers looked up by name.
pub struct VerifierRegistry {
    verifiers: Vec<Box<dyn TheoremVerifier>>,
}

impl Default for VerifierRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Lemma3));
        r.register(Box::new(Theorem1));
        r.register(Box::new(Theorem2));
        r.register(Box::new(Theorem3));
        r.register(Box::new(Theorem4));
        r
    }
}

impl VerifierRegistry {
    pub fn empty() -> Self {
        Self { verifiers: Vec::new() }
    }

    /// Replaces any verifier already registered under the same name.
    pub fn register(&mut self, v: Box<dyn TheoremVerifier>) {
        self.verifiers.retain(|e| e.name() != v.name());
        self.verifiers.push(v);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.verifiers.iter().map(|v| v.name()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn TheoremVerifier> {
        self.verifiers
            .iter()
            .find(|v| v.name() == name)
            .map(|v| v.as_ref())
            .ok_or_else(|| Error::UnknownName {
                kind: "theorem verifier",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    /// Runs the named verifiers (all when `only` is empty) concurrently,
    /// keeping registration order in the output.
    pub fn run(&self, only: &[String], opts: &VerifyOptions) -> Result<Vec<TheoremVerdict>> {
        let selected: Vec<&dyn TheoremVerifier> = if only.is_empty() {
            self.verifiers.iter().map(|v| v.as_ref()).collect()
        } else {
            only.iter().map(|n| self.get(n)).collect::<Result<_>>()?
        };
        let out = selected
            .par_iter()
            .map(|v| v.verify(opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(out.into_iter().flatten().collect())
    }
}

/// Kullback-Leibler divergence between two probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * qi.ln()).sum::<f64>()
}
