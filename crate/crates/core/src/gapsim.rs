//! Discrete-distribution model of the extrapolation loop.
//!
//! The synthetic distribution `S` misses part of the real one `D`. The
//! examples the loop adds are modelled as draws from the residual, the
//! normalized positive part of `D - S`, and the next synthetic distribution
//! is the mixture `p * residual + (1 - p) * S`. Distances are total
//! variation; the residual's unnormalized mass equals `tv(D, S)`.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the total probability mass.
pub const MASS_TOLERANCE: f64 = 1e-12;
/// The simulated loop stops once the gap falls below this.
pub const STOP_TV: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GapError {
    #[error("support and probabilities differ in length ({support} vs {probs})")]
    LengthMismatch { support: usize, probs: usize },
    #[error("probability {index} is {value}; must be finite and >= 0")]
    BadProbability { index: usize, value: f64 },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("distributions are over different supports")]
    SupportMismatch,
    #[error("the distributions are identical; there is no gap to fill")]
    NoGap,
    #[error("mixing ratio {0} is outside [0, 1]")]
    BadRatio(f64),
    #[error("the classifier makes no errors under D")]
    NoErrors,
    #[error("atom {0} is not an (x, y) pair")]
    NotJoint(usize),
    #[error("empty support")]
    Empty,
    #[error("sample count must be positive")]
    NoSamples,
}

/// A point of the example space: either an opaque name or an `(x, y)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Atom {
    Pair { x: String, y: String },
    Name(String),
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Name(s) => f.write_str(s),
            Atom::Pair { x, y } => write!(f, "({x}, {y})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDist")]
pub struct DiscreteDistribution {
    support: Vec<Atom>,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDist {
    support: Vec<Atom>,
    probs: Vec<f64>,
}

impl TryFrom<RawDist> for DiscreteDistribution {
    type Error = GapError;
    fn try_from(r: RawDist) -> Result<Self, GapError> {
        Self::new(r.support, r.probs)
    }
}

impl DiscreteDistribution {
    pub fn new(support: Vec<Atom>, probs: Vec<f64>) -> Result<Self, GapError> {
        if support.len() != probs.len() {
            return Err(GapError::LengthMismatch { support: support.len(), probs: probs.len() });
        }
        if support.is_empty() {
            return Err(GapError::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(GapError::BadProbability { index, value });
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(GapError::NotNormalized(total));
        }
        Ok(Self { support, probs })
    }

    /// Support named `0..n`.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, GapError> {
        Self::new((0..probs.len()).map(|i| Atom::Name(i.to_string())).collect(), probs)
    }

    /// A joint distribution over `xs × ys` from a row-major matrix.
    pub fn joint(xs: &[&str], ys: &[&str], matrix: &[&[f64]]) -> Result<Self, GapError> {
        let mut support = Vec::new();
        let mut probs = Vec::new();
        for (x, row) in xs.iter().zip(matrix) {
            for (y, &p) in ys.iter().zip(row.iter()) {
                support.push(Atom::Pair { x: x.to_string(), y: y.to_string() });
                probs.push(p);
            }
        }
        Self::new(support, probs)
    }

    pub fn support(&self) -> &[Atom] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    fn same_support(&self, other: &Self) -> Result<(), GapError> {
        if self.support != other.support {
            return Err(GapError::SupportMismatch);
        }
        Ok(())
    }

    /// Built from internal arithmetic that preserves the invariants.
    fn derived(&self, probs: Vec<f64>) -> Self {
        Self { support: self.support.clone(), probs }
    }
}

pub fn tv_distance(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64, GapError> {
    p.same_support(q)?;
    Ok(tv_raw(&p.probs, &q.probs))
}

fn tv_raw(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Normalized positive part of `d - s` and its mass.
pub fn residual_distribution(
    d: &DiscreteDistribution,
    s: &DiscreteDistribution,
) -> Result<(DiscreteDistribution, f64), GapError> {
    d.same_support(s)?;
    let pos: Vec<f64> = d.probs.iter().zip(&s.probs).map(|(a, b)| (a - b).max(0.0)).collect();
    let mass: f64 = pos.iter().sum();
    if mass <= 0.0 {
        return Err(GapError::NoGap);
    }
    Ok((d.derived(pos.iter().map(|v| v / mass).collect()), mass))
}

pub fn mix(add: &DiscreteDistribution, s: &DiscreteDistribution, p: f64) -> Result<DiscreteDistribution, GapError> {
    add.same_support(s)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(GapError::BadRatio(p));
    }
    Ok(s.derived(mix_raw(&add.probs, &s.probs, p)))
}

fn mix_raw(add: &[f64], s: &[f64], p: f64) -> Vec<f64> {
    add.iter().zip(s).map(|(a, b)| p * a + (1.0 - p) * b).collect()
}

/// The mixing ratio in [0, 1] that brings `mix(add, s, p)` closest to `d`
/// in total variation, with the distance it achieves. The objective is
/// convex and piecewise linear in p, so its minimum sits at an endpoint or
/// at a point where some coordinate of the mixture crosses `d`; all of
/// those are evaluated. Among equal minima the smallest p wins.
pub fn optimal_mix_ratio(
    d: &DiscreteDistribution,
    s: &DiscreteDistribution,
    add: &DiscreteDistribution,
) -> Result<(f64, f64), GapError> {
    d.same_support(s)?;
    d.same_support(add)?;
    Ok(optimal_raw(&d.probs, &s.probs, &add.probs))
}

fn optimal_raw(d: &[f64], s: &[f64], add: &[f64]) -> (f64, f64) {
    let mut candidates = vec![0.0, 1.0];
    for i in 0..d.len() {
        let slope = add[i] - s[i];
        if slope != 0.0 {
            let p = (d[i] - s[i]) / slope;
            if (0.0..=1.0).contains(&p) {
                candidates.push(p);
            }
        }
    }
    candidates.sort_by(f64::total_cmp);
    let mut best = (0.0, f64::INFINITY);
    for p in candidates {
        let tv = tv_raw(&mix_raw(add, s, p), d);
        if tv < best.1 {
            best = (p, tv);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixPolicy {
    OptimalP,
    FixedP(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRound {
    pub round: usize,
    pub tv: f64,
    /// Ratio used to reach this round's distribution (0 for round 0).
    pub p_used: f64,
    /// Gap as seen by the sample-based estimator, when enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_estimate: Option<f64>,
    pub dist: DiscreteDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTrace {
    pub rounds: Vec<GapRound>,
}

impl GapTrace {
    pub fn tvs(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.tv).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,tv,p_used,tv_estimate\n");
        for r in &self.rounds {
            let est = r.tv_estimate.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.round, r.tv, r.p_used, est));
        }
        out
    }
}

fn pick_p(policy: MixPolicy, d: &[f64], s: &[f64], add: &[f64]) -> Result<f64, GapError> {
    match policy {
        MixPolicy::OptimalP => Ok(optimal_raw(d, s, add).0),
        MixPolicy::FixedP(p) if (0.0..=1.0).contains(&p) => Ok(p),
        MixPolicy::FixedP(p) => Err(GapError::BadRatio(p)),
    }
}

/// Iterates `P <- mix(residual(D, P), P, p)` for up to `rounds` rounds,
/// stopping early once the gap is below [`STOP_TV`].
pub fn simulate_ees_rounds(
    d: &DiscreteDistribution,
    s0: &DiscreteDistribution,
    rounds: usize,
    policy: MixPolicy,
) -> Result<GapTrace, GapError> {
    d.same_support(s0)?;
    if let MixPolicy::FixedP(p) = policy {
        if !(0.0..=1.0).contains(&p) {
            return Err(GapError::BadRatio(p));
        }
    }
    let mut cur = s0.clone();
    let mut trace = vec![GapRound {
        round: 0,
        tv: tv_raw(&d.probs, &cur.probs),
        p_used: 0.0,
        tv_estimate: None,
        dist: cur.clone(),
    }];
    for q in 1..=rounds {
        if trace.last().unwrap().tv < STOP_TV {
            break;
        }
        let (add, _) = residual_distribution(d, &cur)?;
        let p = pick_p(policy, &d.probs, &cur.probs, &add.probs)?;
        cur = cur.derived(mix_raw(&add.probs, &cur.probs, p));
        trace.push(GapRound {
            round: q,
            tv: tv_raw(&d.probs, &cur.probs),
            p_used: p,
            tv_estimate: None,
            dist: cur.clone(),
        });
    }
    Ok(GapTrace { rounds: trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Draws from D, taken once (the gold set).
    pub n_gold: usize,
    /// Draws from the current synthetic distribution each round.
    pub n_synth: usize,
    pub seed: u64,
}

fn empirical(p: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = WeightedIndex::new(p).expect("validated distribution");
    let mut counts = vec![0usize; p.len()];
    for _ in 0..n {
        counts[w.sample(rng)] += 1;
    }
    counts.into_iter().map(|c| c as f64 / n as f64).collect()
}

/// Like [`simulate_ees_rounds`], but the residual and the ratio are worked
/// out from empirical distributions: `n_gold` draws of D and, each round,
/// `n_synth` draws of the current synthetic distribution. The exact gap is
/// still recorded alongside the estimate.
pub fn simulate_ees_rounds_sampled(
    d: &DiscreteDistribution,
    s0: &DiscreteDistribution,
    rounds: usize,
    policy: MixPolicy,
    samples: SampleConfig,
) -> Result<GapTrace, GapError> {
    d.same_support(s0)?;
    if samples.n_gold == 0 || samples.n_synth == 0 {
        return Err(GapError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(samples.seed);
    let d_hat = empirical(&d.probs, samples.n_gold, &mut rng);
    let mut cur = s0.clone();
    let mut s_hat = empirical(&cur.probs, samples.n_synth, &mut rng);
    let mut trace = vec![GapRound {
        round: 0,
        tv: tv_raw(&d.probs, &cur.probs),
        p_used: 0.0,
        tv_estimate: Some(tv_raw(&d_hat, &s_hat)),
        dist: cur.clone(),
    }];
    for q in 1..=rounds {
        let pos: Vec<f64> = d_hat.iter().zip(&s_hat).map(|(a, b)| (a - b).max(0.0)).collect();
        let mass: f64 = pos.iter().sum();
        if mass < STOP_TV {
            break;
        }
        let add: Vec<f64> = pos.iter().map(|v| v / mass).collect();
        let p = pick_p(policy, &d_hat, &s_hat, &add)?;
        cur = cur.derived(mix_raw(&add, &cur.probs, p));
        s_hat = empirical(&cur.probs, samples.n_synth, &mut rng);
        trace.push(GapRound {
            round: q,
            tv: tv_raw(&d.probs, &cur.probs),
            p_used: p,
            tv_estimate: Some(tv_raw(&d_hat, &s_hat)),
            dist: cur.clone(),
        });
    }
    Ok(GapTrace { rounds: trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierGap {
    pub error_mass: f64,
    pub error_dist: DiscreteDistribution,
}

/// Errors of the Bayes classifier for `s` when data comes from `d`.
///
/// For each x the classifier predicts `argmax_y S(y | x)`, breaking ties
/// toward the label that appears first in the support. An x with no mass
/// under S gets the label with the largest S marginal. The error mass is
/// the D-probability of `(x, y)` pairs it gets wrong, and the error
/// distribution is D restricted to them.
pub fn simulate_classifier_gap(s: &DiscreteDistribution, d: &DiscreteDistribution) -> Result<ClassifierGap, GapError> {
    s.same_support(d)?;
    let mut xs: Vec<&str> = Vec::new();
    let mut ys: Vec<&str> = Vec::new();
    let mut cells = Vec::with_capacity(s.len());
    for (i, a) in s.support.iter().enumerate() {
        let Atom::Pair { x, y } = a else { return Err(GapError::NotJoint(i)) };
        let xi = xs.iter().position(|v| v == x).unwrap_or_else(|| {
            xs.push(x);
            xs.len() - 1
        });
        let yi = ys.iter().position(|v| v == y).unwrap_or_else(|| {
            ys.push(y);
            ys.len() - 1
        });
        cells.push((xi, yi));
    }
    let mut table = vec![vec![0.0; ys.len()]; xs.len()];
    let mut prior = vec![0.0; ys.len()];
    for (&(xi, yi), &p) in cells.iter().zip(&s.probs) {
        table[xi][yi] += p;
        prior[yi] += p;
    }
    let argmax = |v: &[f64]| {
        let mut b = 0;
        for i in 1..v.len() {
            if v[i] > v[b] {
                b = i;
            }
        }
        b
    };
    let fallback = argmax(&prior);
    let predict: HashMap<usize, usize> = table
        .iter()
        .enumerate()
        .map(|(xi, row)| (xi, if row.iter().sum::<f64>() > 0.0 { argmax(row) } else { fallback }))
        .collect();
    let wrong: Vec<f64> =
        cells.iter().zip(&d.probs).map(|(&(xi, yi), &p)| if predict[&xi] != yi { p } else { 0.0 }).collect();
    let error_mass: f64 = wrong.iter().sum();
    if error_mass <= 0.0 {
        return Err(GapError::NoErrors);
    }
    Ok(ClassifierGap { error_mass, error_dist: d.derived(wrong.iter().map(|v| v / error_mass).collect()) })
}

/// Scenario file for the command-line simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub support: Vec<Atom>,
    #[serde(rename = "P_D")]
    pub p_d: Vec<f64>,
    #[serde(rename = "P_S0")]
    pub p_s0: Vec<f64>,
    pub rounds: usize,
    pub policy: MixPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<SampleConfig>,
}

impl Scenario {
    pub fn run(&self) -> Result<GapTrace, GapError> {
        let d = DiscreteDistribution::new(self.support.clone(), self.p_d.clone())?;
        let s = DiscreteDistribution::new(self.support.clone(), self.p_s0.clone())?;
        match self.samples {
            None => simulate_ees_rounds(&d, &s, self.rounds, self.policy),
            Some(c) => simulate_ees_rounds_sampled(&d, &s, self.rounds, self.policy, c),
        }
    }
}
