//! Out-of-sample stress test: draw the random coefficients from moment-matched
//! distributions and count scenarios in which the joint constraint fails.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DrgpError, Result};
use crate::gp::AmbiguityKind;
use crate::io::SCHEMA_VERSION;
use crate::matrix::dot;
use crate::reformulate::RobustGP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Distribution {
    Normal,
    Uniform,
    LogNormal,
    Logistic,
    Gamma,
}

impl Distribution {
    pub const ALL: [Distribution; 5] = [
        Distribution::Normal,
        Distribution::Uniform,
        Distribution::LogNormal,
        Distribution::Logistic,
        Distribution::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Distribution::Normal => "normal",
            Distribution::Uniform => "uniform",
            Distribution::LogNormal => "lognormal",
            Distribution::Logistic => "logistic",
            Distribution::Gamma => "gamma",
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = DrgpError;

    fn from_str(s: &str) -> Result<Self> {
        Distribution::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DrgpError::Parse(format!("unknown distribution {s:?}")))
    }
}

/// A distribution with given mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Matched {
    Normal { mean: f64, sd: f64 },
    /// `truncated` is set when `mean − √3·sd < 0` and the lower end was lifted to 0.
    Uniform { lo: f64, hi: f64, truncated: bool },
    LogNormal { mu: f64, sigma: f64 },
    Logistic { location: f64, scale: f64 },
    Gamma { shape: f64, scale: f64 },
}

pub fn moment_match(dist: Distribution, mean: f64, sd: f64) -> Result<Matched> {
    if !(mean > 0.0 && sd > 0.0 && mean.is_finite() && sd.is_finite()) {
        return Err(DrgpError::InvalidModel(format!(
            "moment matching needs positive mean and sd, got ({mean}, {sd})"
        )));
    }
    Ok(match dist {
        Distribution::Normal => Matched::Normal { mean, sd },
        Distribution::Uniform => {
            let half = 3f64.sqrt() * sd;
            let lo = mean - half;
            Matched::Uniform {
                lo: lo.max(0.0),
                hi: mean + half,
                truncated: lo < 0.0,
            }
        }
        Distribution::LogNormal => {
            let s2 = (1.0 + (sd / mean).powi(2)).ln();
            Matched::LogNormal {
                mu: mean.ln() - 0.5 * s2,
                sigma: s2.sqrt(),
            }
        }
        Distribution::Logistic => Matched::Logistic {
            location: mean,
            scale: sd * 3f64.sqrt() / PI,
        },
        Distribution::Gamma => Matched::Gamma {
            shape: (mean / sd).powi(2),
            scale: sd * sd / mean,
        },
    })
}

impl Matched {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Matched::Normal { mean, sd } => Normal::new(mean, sd).expect("validated sd").sample(rng),
            Matched::Uniform { lo, hi, .. } => rng.random_range(lo..=hi),
            Matched::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated sigma").sample(rng),
            Matched::Logistic { location, scale } => {
                // Inverse CDF on the open interval.
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                location + scale * (u / (1.0 - u)).ln()
            }
            Matched::Gamma { shape, scale } => Gamma::new(shape, scale).expect("validated gamma").sample(rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_scenarios: usize,
    pub distributions: Vec<Distribution>,
    pub seed: u64,
    /// Coefficient sd as a fraction of the mean for instances without second moments.
    pub sd_fraction: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 100,
            distributions: Distribution::ALL.to_vec(),
            seed: 0,
            sd_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionResult {
    pub distribution: Distribution,
    pub violated: usize,
    pub violation_rate: f64,
    pub uniform_truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub results: Vec<DistributionResult>,
    pub t_solution: Vec<f64>,
    pub n_scenarios: usize,
    pub seed: u64,
}

impl RobustnessReport {
    pub fn vs(&self, dist: Distribution) -> Option<usize> {
        self.results.iter().find(|r| r.distribution == dist).map(|r| r.violated)
    }

    /// `schema_version,distribution,vs,violation_rate,uniform_truncated` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "schema_version,distribution,vs,violation_rate,uniform_truncated")?;
        for r in &self.results {
            writeln!(
                out,
                "{SCHEMA_VERSION},{},{},{},{}",
                r.distribution.name(),
                r.violated,
                r.violation_rate,
                r.uniform_truncated
            )?;
        }
        Ok(())
    }
}

/// Distribution × solution-variant grid of violated-scenario counts. Every report must
/// cover the same distributions in the same order.
pub fn write_grid_csv<W: Write>(variants: &[(&str, &RobustnessReport)], mut out: W) -> Result<()> {
    let Some((_, first)) = variants.first() else {
        return Err(DrgpError::Config("grid needs at least one solution".into()));
    };
    let dists: Vec<Distribution> = first.results.iter().map(|r| r.distribution).collect();
    for (name, rep) in variants {
        if rep.results.iter().map(|r| r.distribution).ne(dists.iter().copied()) {
            return Err(DrgpError::Config(format!("variant {name} covers different distributions")));
        }
    }
    let names: Vec<&str> = variants.iter().map(|(n, _)| *n).collect();
    writeln!(out, "schema_version,distribution,{}", names.join(","))?;
    for (i, d) in dists.iter().enumerate() {
        let counts: Vec<String> = variants.iter().map(|(_, r)| r.results[i].violated.to_string()).collect();
        writeln!(out, "{SCHEMA_VERSION},{},{}", d.name(), counts.join(","))?;
    }
    Ok(())
}

/// Per-coefficient `(mean, sd)` for every chance-constrained block.
fn coefficient_moments(p: &RobustGP, sd_fraction: f64) -> Vec<Vec<(f64, f64)>> {
    p.constraints
        .iter()
        .map(|b| {
            b.mean_coeffs
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    let sd = match (&p.ambiguity.kind, &b.cov) {
                        (AmbiguityKind::TwoMoment, Some(cov)) if cov[(i, i)] > 0.0 => cov[(i, i)].sqrt(),
                        _ => sd_fraction * m,
                    };
                    (m, sd)
                })
                .collect()
        })
        .collect()
}

/// Counts scenarios in which some chance-constrained posynomial exceeds 1 at `t_solution`.
/// Deterministic rows are not resampled. Every scenario owns an RNG stream derived from
/// `(seed, distribution, scenario index)`, so counts do not depend on the thread count.
pub fn count_violations(p: &RobustGP, t_solution: &[f64], cfg: &ScenarioConfig) -> Result<RobustnessReport> {
    p.validate()?;
    check_len("t_solution", p.n_vars(), t_solution.len())?;
    if cfg.n_scenarios == 0 {
        return Err(DrgpError::Config("n_scenarios must be at least 1".into()));
    }
    if t_solution.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(DrgpError::InvalidModel("t_solution must be positive".into()));
    }
    let r: Vec<f64> = t_solution.iter().map(|t| t.ln()).collect();
    // Monomial values Π_j t_j^{a_ij} per block and term.
    let monomials: Vec<Vec<f64>> = p
        .constraints
        .iter()
        .map(|b| (0..b.n_terms()).map(|i| dot(b.exponents.row(i), &r).exp()).collect())
        .collect();
    let moments = coefficient_moments(p, cfg.sd_fraction);

    let mut results = Vec::with_capacity(cfg.distributions.len());
    for (d_idx, &dist) in cfg.distributions.iter().enumerate() {
        let matched: Vec<Vec<Matched>> = moments
            .iter()
            .map(|blk| blk.iter().map(|&(m, s)| moment_match(dist, m, s)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let truncated = matched
            .iter()
            .flatten()
            .any(|m| matches!(m, Matched::Uniform { truncated: true, .. }));
        let violated = (0..cfg.n_scenarios)
            .into_par_iter()
            .filter(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((d_idx as u64) << 32) | s as u64);
                let mut any = false;
                for (blk, mono) in matched.iter().zip(&monomials) {
                    let value: f64 = blk.iter().zip(mono).map(|(m, v)| m.sample(&mut rng) * v).sum();
                    any |= value > 1.0;
                }
                any
            })
            .count();
        results.push(DistributionResult {
            distribution: dist,
            violated,
            violation_rate: violated as f64 / cfg.n_scenarios as f64,
            uniform_truncated: truncated,
        });
    }
    Ok(RobustnessReport {
        results,
        t_solution: t_solution.to_vec(),
        n_scenarios: cfg.n_scenarios,
        seed: cfg.seed,
    })
}
