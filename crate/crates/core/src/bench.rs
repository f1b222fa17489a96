//! Benchmark instance generators: the open box, the m-dimensional shape problem and
//! max-min SINR power allocation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrgpError, Result};
use crate::gp::{AmbiguityKind, AmbiguityParams, PosynomialBlock};
use crate::matrix::Matrix;
use crate::reformulate::{Coupling, RobustGP};

/// Robustness weights used by every benchmark (`γ1 = γ2 = 2`).
pub const BENCH_GAMMA: f64 = 2.0;

/// Box data: mean and standard deviation of the inverse wall and floor areas.
pub const BOX_WALL_MEAN: f64 = 0.05;
pub const BOX_WALL_SD: f64 = 0.01;
pub const BOX_FLOOR_MEAN: f64 = 0.5;
pub const BOX_FLOOR_SD: f64 = 0.1;

/// Candidate risk levels swept by the box driver.
pub const BOX_EPS_SWEEP: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

/// Ratio bound between any two shape dimensions (`x_i / x_j ≤ 2`).
pub const SHAPE_RATIO_COEFF: f64 = 0.5;
pub const SHAPE_MEAN_RANGE: (f64, f64) = (1.0 / 40.0, 1.0 / 20.0);
pub const SHAPE_COV_RANGE: (f64, f64) = (0.001, 0.01);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrConfig {
    pub p_min: f64,
    pub p_max: f64,
    pub interference_range: (f64, f64),
    pub noise_range: (f64, f64),
    /// Standard deviation of each coefficient as a fraction of its mean.
    pub sd_fraction: f64,
}

impl Default for SinrConfig {
    fn default() -> Self {
        Self {
            p_min: 0.1,
            p_max: 10.0,
            interference_range: (0.01, 0.1),
            noise_range: (0.05, 0.2),
            sd_fraction: 0.2,
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 0.5 {
        Ok(())
    } else {
        Err(DrgpError::InvalidModel(format!("epsilon {eps} outside (0, 0.5]")))
    }
}

fn inverse_volume(m: usize) -> Result<PosynomialBlock> {
    PosynomialBlock::monomial(vec![-1.0; m], 1.0, 0)
}

/// Open-box volume maximisation in `(x1, x2, x3)`: the wall block holds the terms
/// `x2·x3` and `x1·x3`, the floor block `x1·x2`, each scaled by a random inverse area
/// with independent noise per term.
pub fn make_box3d(eps: f64, kind: AmbiguityKind, coupling: Coupling) -> Result<RobustGP> {
    check_eps(eps)?;
    let wall_var = BOX_WALL_SD * BOX_WALL_SD;
    let floor_var = BOX_FLOOR_SD * BOX_FLOOR_SD;
    let wall = PosynomialBlock::new(
        Matrix::from_rows(vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]])?,
        vec![BOX_WALL_MEAN; 2],
        Some(Matrix::diagonal(&[wall_var, wall_var])),
        1,
    )?;
    let floor = PosynomialBlock::new(
        Matrix::from_rows(vec![vec![1.0, 1.0, 0.0]])?,
        vec![BOX_FLOOR_MEAN],
        Some(Matrix::diagonal(&[floor_var])),
        2,
    )?;
    let p = RobustGP {
        objective: inverse_volume(3)?,
        constraints: vec![wall, floor],
        certain: vec![],
        ambiguity: AmbiguityParams::uniform(kind, 2, BENCH_GAMMA, BENCH_GAMMA),
        epsilon: eps,
        coupling,
    };
    p.validate()?;
    Ok(p)
}

/// `n` open-box instances whose coefficient means are scaled by independent factors
/// drawn uniformly from `[1 − spread, 1 + spread]`. Covariances keep their coefficient of
/// variation.
pub fn perturbed_box3d(
    n: usize,
    eps: f64,
    coupling: Coupling,
    spread: f64,
    seed: u64,
) -> Result<Vec<RobustGP>> {
    if !(0.0..1.0).contains(&spread) {
        return Err(DrgpError::Config(format!("spread {spread} outside [0, 1)")));
    }
    let base = make_box3d(eps, AmbiguityKind::TwoMoment, coupling)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut p = base.clone();
            for b in &mut p.constraints {
                for i in 0..b.n_terms() {
                    let f = 1.0 + spread * rng.random_range(-1.0..=1.0);
                    b.mean_coeffs[i] *= f;
                    if let Some(cov) = &mut b.cov {
                        for j in 0..b.mean_coeffs.len() {
                            cov[(i, j)] *= f;
                            cov[(j, i)] *= f;
                        }
                    }
                }
            }
            p.validate()?;
            Ok(p)
        })
        .collect()
}

/// Symmetrises `a` and lifts its diagonal until it is diagonally dominant, which keeps
/// every entry nonnegative and makes the result positive semidefinite.
pub fn symmetrize_psd(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| s[(i, j)]).sum();
        if s[(i, i)] < off {
            s[(i, i)] = off;
        }
    }
    s
}

/// m-dimensional shape problem. The wall block has `m − 1` terms, term `j` (for
/// `j = 2..m`) being `(m − 1)·c_j · Π_{i≠j} x_i`; the floor block is `c_f · Π_{j≥2} x_j`.
/// Pairwise ratio bounds `0.5·x_i/x_j ≤ 1` are certain rows.
pub fn make_multishape(m: usize, eps: f64, kind: AmbiguityKind, coupling: Coupling, seed: u64) -> Result<RobustGP> {
    if m < 3 {
        return Err(DrgpError::InvalidModel(format!("shape dimension {m} < 3")));
    }
    check_eps(eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_mean = |rng: &mut ChaCha8Rng| rng.random_range(SHAPE_MEAN_RANGE.0..=SHAPE_MEAN_RANGE.1);
    let scale = (m - 1) as f64;

    let mut wall_exps = Vec::with_capacity(m - 1);
    let mut wall_mu = Vec::with_capacity(m - 1);
    for j in 1..m {
        let mut row = vec![1.0; m];
        row[j] = 0.0;
        wall_exps.push(row);
        wall_mu.push(scale * draw_mean(&mut rng));
    }
    let floor_mu = draw_mean(&mut rng);
    let mut raw = Matrix::zeros(m - 1, m - 1);
    for i in 0..m - 1 {
        for j in 0..m - 1 {
            raw[(i, j)] = rng.random_range(SHAPE_COV_RANGE.0..=SHAPE_COV_RANGE.1);
        }
    }
    let floor_var = rng.random_range(SHAPE_COV_RANGE.0..=SHAPE_COV_RANGE.1);
    let wall = PosynomialBlock::new(Matrix::from_rows(wall_exps)?, wall_mu, Some(symmetrize_psd(&raw)), 1)?;
    let mut floor_row = vec![1.0; m];
    floor_row[0] = 0.0;
    let floor = PosynomialBlock::new(
        Matrix::from_rows(vec![floor_row])?,
        vec![floor_mu],
        Some(Matrix::diagonal(&[floor_var])),
        2,
    )?;

    let mut certain = Vec::with_capacity(m * (m - 1));
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let mut e = vec![0.0; m];
                e[i] = 1.0;
                e[j] = -1.0;
                certain.push(PosynomialBlock::monomial(e, SHAPE_RATIO_COEFF, 3 + certain.len())?);
            }
        }
    }
    let p = RobustGP {
        objective: inverse_volume(m)?,
        constraints: vec![wall, floor],
        certain,
        ambiguity: AmbiguityParams::uniform(kind, 2, BENCH_GAMMA, BENCH_GAMMA),
        epsilon: eps,
        coupling,
    };
    p.validate()?;
    Ok(p)
}

/// Max-min SINR power allocation over `(p_1..p_K, w)`: minimise `1/w` subject to
/// `Σ_{j≠i} a_ij p_j p_i⁻¹ w + b_i p_i⁻¹ w ≤ 1` for every user `i`, with
/// `p_min ≤ p_i ≤ p_max` as certain rows. `joint` selects one joint chance constraint
/// (dependent coupling) instead of `K` individual ones.
pub fn make_sinr(
    k: usize,
    joint: bool,
    eps: f64,
    kind: AmbiguityKind,
    seed: u64,
    cfg: &SinrConfig,
) -> Result<RobustGP> {
    if k < 2 {
        return Err(DrgpError::InvalidModel(format!("SINR needs at least 2 users, got {k}")));
    }
    check_eps(eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = k + 1;
    let mut blocks = Vec::with_capacity(k);
    for i in 0..k {
        let mut exps = Vec::with_capacity(k);
        let mut mu = Vec::with_capacity(k);
        for j in 0..k {
            let mut e = vec![0.0; m];
            e[i] = -1.0;
            e[k] = 1.0;
            if j != i {
                e[j] += 1.0;
                mu.push(rng.random_range(cfg.interference_range.0..=cfg.interference_range.1));
            } else {
                mu.push(rng.random_range(cfg.noise_range.0..=cfg.noise_range.1));
            }
            exps.push(e);
        }
        let var: Vec<f64> = mu.iter().map(|v| (cfg.sd_fraction * v).powi(2)).collect();
        blocks.push(PosynomialBlock::new(Matrix::from_rows(exps)?, mu, Some(Matrix::diagonal(&var)), i + 1)?);
    }
    let mut certain = Vec::with_capacity(2 * k);
    for i in 0..k {
        let mut up = vec![0.0; m];
        up[i] = 1.0;
        certain.push(PosynomialBlock::monomial(up, 1.0 / cfg.p_max, k + 1 + certain.len())?);
        let mut down = vec![0.0; m];
        down[i] = -1.0;
        certain.push(PosynomialBlock::monomial(down, cfg.p_min, k + 1 + certain.len())?);
    }
    let mut obj = vec![0.0; m];
    obj[k] = -1.0;
    let p = RobustGP {
        objective: PosynomialBlock::monomial(obj, 1.0, 0)?,
        constraints: blocks,
        certain,
        ambiguity: AmbiguityParams::uniform(kind, k, BENCH_GAMMA, BENCH_GAMMA),
        epsilon: eps,
        coupling: if joint {
            Coupling::Dependent
        } else {
            Coupling::Individual
        },
    };
    p.validate()?;
    Ok(p)
}
