//! Posynomial blocks and the two numeric kernels every reformulation is built from.
//!
//! With `r = log t`, a block's mean posynomial becomes `Σ_i μ_i exp(a_i·r)` and its
//! covariance term becomes `sqrt(Σ_il σ_il exp((a_i + a_l)·r + shift))`. Both kernels
//! factor out the largest inner product before exponentiating so that transient ODE
//! states with large `|r|` stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, DrgpError, Result};
use crate::matrix::{dot, norm2, Matrix};

/// Radicand values in `[-RADICAND_CLAMP, 0)` are treated as floating-point round-off.
pub const RADICAND_CLAMP: f64 = 1e-12;

/// Exponent table, coefficient means and (optionally) coefficient covariance of one
/// posynomial: `Σ_i c_i Π_j t_j^{a_ij}` with `E[c] = mean_coeffs`, `Cov[c] = cov`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosynomialBlock {
    pub exponents: Matrix,
    pub mean_coeffs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Matrix>,
    #[serde(default)]
    pub label: usize,
}

impl PosynomialBlock {
    pub fn new(exponents: Matrix, mean_coeffs: Vec<f64>, cov: Option<Matrix>, label: usize) -> Result<Self> {
        let block = Self {
            exponents,
            mean_coeffs,
            cov,
            label,
        };
        block.validate()?;
        Ok(block)
    }

    /// Single deterministic monomial `coeff * Π t_j^{exps_j}`.
    pub fn monomial(exps: Vec<f64>, coeff: f64, label: usize) -> Result<Self> {
        Self::new(Matrix::from_rows(vec![exps])?, vec![coeff], None, label)
    }

    pub fn n_terms(&self) -> usize {
        self.mean_coeffs.len()
    }

    pub fn n_vars(&self) -> usize {
        self.exponents.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let i = self.mean_coeffs.len();
        check_len("block exponent rows", i, self.exponents.rows())?;
        if i == 0 {
            return Err(DrgpError::InvalidModel(format!("block {} has no terms", self.label)));
        }
        check_finite("block exponents", self.exponents.as_slice())?;
        if let Some(bad) = self.mean_coeffs.iter().find(|&&m| !(m > 0.0 && m.is_finite())) {
            return Err(DrgpError::InvalidModel(format!(
                "block {}: mean coefficient {bad} is not strictly positive",
                self.label
            )));
        }
        if let Some(cov) = &self.cov {
            check_len("block covariance rows", i, cov.rows())?;
            check_len("block covariance cols", i, cov.cols())?;
            check_finite("block covariance", cov.as_slice())?;
            if !cov.is_symmetric(1e-12) {
                return Err(DrgpError::InvalidModel(format!(
                    "block {}: covariance is not symmetric",
                    self.label
                )));
            }
            if cov.as_slice().iter().any(|&s| s < 0.0) {
                return Err(DrgpError::InvalidModel(format!(
                    "block {}: covariance has negative entries",
                    self.label
                )));
            }
            let min_eig = min_eigenvalue(cov);
            let scale = cov.as_slice().iter().fold(0.0_f64, |m, s| m.max(s.abs()));
            if min_eig < -1e-10 * scale.max(1e-300) {
                return Err(DrgpError::InvalidModel(format!(
                    "block {}: covariance is not positive semidefinite (min eigenvalue {min_eig:e})",
                    self.label
                )));
            }
        }
        Ok(())
    }

    /// Flattened numeric content, used to compare instance parameters.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.exponents.as_slice());
        out.extend_from_slice(&self.mean_coeffs);
        if let Some(cov) = &self.cov {
            out.extend_from_slice(cov.as_slice());
        }
    }
}

pub(crate) fn min_eigenvalue(m: &Matrix) -> f64 {
    let n = m.rows();
    if n == 0 {
        return 0.0;
    }
    let dm = nalgebra::DMatrix::from_row_slice(n, n, m.as_slice());
    nalgebra::SymmetricEigen::new(dm)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Which moment information the ambiguity set carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AmbiguityKind {
    /// Mean in an ellipsoid of size γ1 and covariance bounded by γ2·Σ.
    TwoMoment,
    /// Known mean and nonnegative support.
    FirstMomentNonneg,
}

impl std::fmt::Display for AmbiguityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AmbiguityKind::TwoMoment => write!(f, "two-moment"),
            AmbiguityKind::FirstMomentNonneg => write!(f, "first-moment-nonneg"),
        }
    }
}

/// Ambiguity-set sizes. Index 0 belongs to the objective block, index `k` to
/// constraint block `k` (1-based, matching `PosynomialBlock::label`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityParams {
    pub kind: AmbiguityKind,
    #[serde(default)]
    pub gamma1: Vec<f64>,
    #[serde(default)]
    pub gamma2: Vec<f64>,
}

impl AmbiguityParams {
    /// Same γ1, γ2 for the objective and all `k` constraint blocks.
    pub fn uniform(kind: AmbiguityKind, k: usize, gamma1: f64, gamma2: f64) -> Self {
        Self {
            kind,
            gamma1: vec![gamma1; k + 1],
            gamma2: vec![gamma2; k + 1],
        }
    }

    pub fn gamma1(&self, block: usize) -> f64 {
        self.gamma1.get(block).copied().unwrap_or(0.0)
    }

    pub fn gamma2(&self, block: usize) -> f64 {
        self.gamma2.get(block).copied().unwrap_or(0.0)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.kind == AmbiguityKind::FirstMomentNonneg {
            return Ok(());
        }
        check_len("gamma1 (objective + constraints)", k + 1, self.gamma1.len())?;
        check_len("gamma2 (objective + constraints)", k + 1, self.gamma2.len())?;
        if self
            .gamma1
            .iter()
            .chain(&self.gamma2)
            .any(|g| !(g.is_finite() && *g >= 0.0))
        {
            return Err(DrgpError::InvalidModel("gamma values must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Inner products `s_i = a_i·r` of one block, shifted by their maximum.
///
/// `weights[i] = exp(s_i - max_s)`, so every weight lies in `(0, 1]`.
#[derive(Debug, Clone)]
pub(crate) struct BlockTerms {
    pub max_s: f64,
    pub weights: Vec<f64>,
}

impl BlockTerms {
    pub fn new(block: &PosynomialBlock, r: &[f64]) -> Self {
        let s: Vec<f64> = (0..block.n_terms()).map(|i| dot(block.exponents.row(i), r)).collect();
        let max_s = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights = s.iter().map(|si| (si - max_s).exp()).collect();
        Self { max_s, weights }
    }

    /// `Σ μ_i exp(s_i)`.
    pub fn logsum(&self, block: &PosynomialBlock) -> f64 {
        self.max_s.exp() * dot(&block.mean_coeffs, &self.weights)
    }

    /// Gradient of `logsum` with respect to `r`, accumulated into `out` times `scale`.
    pub fn add_logsum_grad(&self, block: &PosynomialBlock, scale: f64, out: &mut [f64]) {
        let e = scale * self.max_s.exp();
        for (i, (&w, &mu)) in self.weights.iter().zip(&block.mean_coeffs).enumerate() {
            let c = e * mu * w;
            for (o, &a) in out.iter_mut().zip(block.exponents.row(i)) {
                *o += c * a;
            }
        }
    }

    /// Normalised radicand `Σ σ_il w_i w_l` and the partial sums `Σ_l σ_il w_l`.
    pub fn quad(&self, block: &PosynomialBlock) -> Result<(f64, Vec<f64>)> {
        let cov = block.cov.as_ref().ok_or_else(|| {
            DrgpError::InvalidModel(format!("block {} has no covariance", block.label))
        })?;
        let mut partial = vec![0.0; self.weights.len()];
        cov.mul_vec(&self.weights, &mut partial);
        let q = dot(&self.weights, &partial);
        if q < -RADICAND_CLAMP {
            return Err(DrgpError::NegativeRadicand {
                block: block.label,
                value: q,
            });
        }
        Ok((q.max(0.0), partial))
    }
}

/// Value and first derivatives of the covariance kernel at one point.
#[derive(Debug, Clone)]
pub(crate) struct SqrtQuad {
    /// `sqrt(Σ σ_il exp((a_i + a_l)·r))` (zero shift).
    pub value: f64,
    /// Gradient of `value` with respect to `r`.
    pub grad: Vec<f64>,
}

impl SqrtQuad {
    pub fn new(block: &PosynomialBlock, terms: &BlockTerms) -> Result<Self> {
        let (q, partial) = terms.quad(block)?;
        let m = block.n_vars();
        let mut grad = vec![0.0; m];
        let value = terms.max_s.exp() * q.sqrt();
        if q > 0.0 {
            let scale = terms.max_s.exp() / q.sqrt();
            for (i, (&w, &p)) in terms.weights.iter().zip(&partial).enumerate() {
                let c = scale * w * p;
                if c != 0.0 {
                    for (o, &a) in grad.iter_mut().zip(block.exponents.row(i)) {
                        *o += c * a;
                    }
                }
            }
        }
        Ok(Self { value, grad })
    }
}

fn check_point(block: &PosynomialBlock, r: &[f64]) -> Result<()> {
    check_len("point dimension", block.n_vars(), r.len())?;
    check_finite("evaluation point", r)
}

/// `Σ_i μ_i exp(Σ_j a_ij r_j)`.
pub fn eval_logsum(block: &PosynomialBlock, r: &[f64]) -> Result<f64> {
    check_point(block, r)?;
    let v = BlockTerms::new(block, r).logsum(block);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DrgpError::NonFinite {
            context: format!("logsum of block {}", block.label),
        })
    }
}

/// `sqrt(Σ_i Σ_l σ_il exp(Σ_j (a_ij + a_lj) r_j + shift))`.
pub fn eval_sqrt_quad(block: &PosynomialBlock, r: &[f64], shift: f64) -> Result<f64> {
    check_point(block, r)?;
    check_finite("shift", &[shift])?;
    let terms = BlockTerms::new(block, r);
    let (q, _) = terms.quad(block)?;
    let v = (terms.max_s + 0.5 * shift).exp() * q.sqrt();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DrgpError::NonFinite {
            context: format!("sqrt-quad of block {}", block.label),
        })
    }
}

pub fn grad_logsum(block: &PosynomialBlock, r: &[f64]) -> Result<Vec<f64>> {
    check_point(block, r)?;
    let mut g = vec![0.0; block.n_vars()];
    BlockTerms::new(block, r).add_logsum_grad(block, 1.0, &mut g);
    check_finite("logsum gradient", &g)?;
    Ok(g)
}

/// Gradient with respect to `r` and the derivative with respect to `shift`.
///
/// At a zero radicand the kernel is not differentiable; the zero vector is returned.
pub fn grad_sqrt_quad(block: &PosynomialBlock, r: &[f64], shift: f64) -> Result<(Vec<f64>, f64)> {
    check_point(block, r)?;
    check_finite("shift", &[shift])?;
    let terms = BlockTerms::new(block, r);
    let sq = SqrtQuad::new(block, &terms)?;
    let factor = (0.5 * shift).exp();
    let grad: Vec<f64> = sq.grad.iter().map(|g| g * factor).collect();
    let d_shift = 0.5 * sq.value * factor;
    check_finite("sqrt-quad gradient", &grad)?;
    Ok((grad, d_shift))
}

/// A differentiable scalar function probed by [`finite_diff_check`].
pub trait ScalarField {
    fn value(&self, x: &[f64]) -> Option<f64>;
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>>;
    /// Points where the field is not differentiable; they are skipped.
    fn is_singular(&self, _x: &[f64]) -> bool {
        false
    }
}

/// Adapter turning a pair of closures into a [`ScalarField`].
pub struct FnField<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> ScalarField for FnField<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, x: &[f64]) -> Option<f64> {
        Some((self.value)(x))
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some((self.gradient)(x))
    }
}

/// `r ↦ eval_logsum(block, r)`.
pub struct LogSumField<'a>(pub &'a PosynomialBlock);

impl ScalarField for LogSumField<'_> {
    fn value(&self, x: &[f64]) -> Option<f64> {
        eval_logsum(self.0, x).ok()
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        grad_logsum(self.0, x).ok()
    }
}

/// `(r, shift) ↦ eval_sqrt_quad(block, r, shift)`; the last coordinate is the shift.
pub struct SqrtQuadField<'a>(pub &'a PosynomialBlock);

/// Radicands at or below this level are reported as singular by [`SqrtQuadField`].
pub const SINGULAR_RADICAND: f64 = 1e-8;

impl ScalarField for SqrtQuadField<'_> {
    fn value(&self, x: &[f64]) -> Option<f64> {
        let (r, shift) = x.split_at(x.len() - 1);
        eval_sqrt_quad(self.0, r, shift[0]).ok()
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let (r, shift) = x.split_at(x.len() - 1);
        let (mut g, ds) = grad_sqrt_quad(self.0, r, shift[0]).ok()?;
        g.push(ds);
        Some(g)
    }
    fn is_singular(&self, x: &[f64]) -> bool {
        let (r, shift) = x.split_at(x.len() - 1);
        match eval_sqrt_quad(self.0, r, shift[0]) {
            Ok(v) => v * v <= SINGULAR_RADICAND,
            Err(_) => true,
        }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central-difference gradient with relative step `1e-6 * max(1, |x_j|)`.
pub fn central_difference<F: Fn(&[f64]) -> Option<f64>>(f: F, x: &[f64]) -> Option<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        probe[j] = x[j] + h;
        let fp = f(&probe)?;
        probe[j] = x[j] - h;
        let fm = f(&probe)?;
        probe[j] = x[j];
        out.push((fp - fm) / (2.0 * h));
    }
    Some(out)
}

/// Central-difference Jacobian (rows = components of `f`).
pub fn central_difference_jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64]) -> Matrix {
    let rows = f(x).len();
    let mut jac = Matrix::zeros(rows, x.len());
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        probe[j] = x[j] + h;
        let fp = f(&probe);
        probe[j] = x[j] - h;
        let fm = f(&probe);
        probe[j] = x[j];
        for i in 0..rows {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Max over `points` of `‖grad − grad_fd‖ / max(1, ‖grad_fd‖)`.
///
/// Points flagged singular by the field, or where any evaluation fails, are skipped
/// and counted in the report.
pub fn finite_diff_check<S: ScalarField + ?Sized>(field: &S, points: &[Vec<f64>]) -> FdReport {
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for x in points {
        if field.is_singular(x) {
            report.skipped += 1;
            continue;
        }
        let (Some(analytic), Some(fd)) = (field.gradient(x), central_difference(|p| field.value(p), x)) else {
            report.skipped += 1;
            continue;
        };
        let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let err = norm2(&diff) / norm2(&fd).max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn block(exps: Vec<Vec<f64>>, mu: Vec<f64>, cov: Option<Vec<Vec<f64>>>) -> PosynomialBlock {
        PosynomialBlock::new(
            Matrix::from_rows(exps).unwrap(),
            mu,
            cov.map(|c| Matrix::from_rows(c).unwrap()),
            1,
        )
        .unwrap()
    }

    #[test]
    fn logsum_examples() {
        let b = block(vec![vec![0.0, 0.0]], vec![1.0], None);
        assert_eq!(eval_logsum(&b, &[3.0, -7.0]).unwrap(), 1.0);
        let b = block(vec![vec![1.0]], vec![2.0], None);
        assert_eq!(eval_logsum(&b, &[0.0]).unwrap(), 2.0);
        let b = block(vec![vec![1.0]], vec![1.0], None);
        assert_relative_eq!(eval_logsum(&b, &[2f64.ln()]).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn sqrt_quad_examples() {
        let b = block(vec![vec![0.0]], vec![1.0], Some(vec![vec![1.0]]));
        assert_eq!(eval_sqrt_quad(&b, &[0.0], 0.0).unwrap(), 1.0);
        let b = block(vec![vec![1.0]], vec![1.0], Some(vec![vec![1.0]]));
        assert_relative_eq!(eval_sqrt_quad(&b, &[0.0], 4f64.ln()).unwrap(), 2.0, epsilon = 1e-15);
        let b = block(
            vec![vec![0.0], vec![0.0]],
            vec![1.0, 1.0],
            Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        );
        assert_relative_eq!(eval_sqrt_quad(&b, &[0.0], 0.0).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn gradient_examples() {
        let b = block(vec![vec![0.0]], vec![1.0], None);
        assert_eq!(grad_logsum(&b, &[0.4]).unwrap(), vec![0.0]);
        let b = block(vec![vec![1.0]], vec![3.5], None);
        assert_eq!(grad_logsum(&b, &[0.0]).unwrap(), vec![3.5]);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let b = block(vec![vec![1.0, 2.0]], vec![1.0], None);
        assert!(matches!(eval_logsum(&b, &[1.0]), Err(DrgpError::Dimension { .. })));
        assert!(matches!(eval_logsum(&b, &[f64::NAN, 0.0]), Err(DrgpError::NonFinite { .. })));
        assert!(eval_sqrt_quad(&b, &[0.0, 0.0], 0.0).is_err(), "no covariance");
    }

    #[test]
    fn invalid_blocks_rejected() {
        let e = Matrix::from_rows(vec![vec![1.0]]).unwrap();
        assert!(PosynomialBlock::new(e.clone(), vec![0.0], None, 1).is_err());
        assert!(PosynomialBlock::new(e.clone(), vec![1.0, 2.0], None, 1).is_err());
        let neg = Matrix::from_rows(vec![vec![-1.0]]).unwrap();
        assert!(PosynomialBlock::new(e.clone(), vec![1.0], Some(neg), 1).is_err());
        let e2 = Matrix::from_rows(vec![vec![1.0], vec![0.0]]).unwrap();
        let not_psd = Matrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(PosynomialBlock::new(e2.clone(), vec![1.0, 1.0], Some(not_psd), 1).is_err());
        let asym = Matrix::from_rows(vec![vec![1.0, 0.5], vec![0.4, 1.0]]).unwrap();
        assert!(PosynomialBlock::new(e2, vec![1.0, 1.0], Some(asym), 1).is_err());
    }

    #[test]
    fn radicand_clamp_and_rejection() {
        // Entries chosen so the quadratic form is tiny-negative through a shifted layout.
        let mut b = block(vec![vec![0.0]], vec![1.0], Some(vec![vec![1.0]]));
        b.cov = Some(Matrix::from_rows(vec![vec![-1e-13]]).unwrap());
        assert_eq!(eval_sqrt_quad(&b, &[0.0], 0.0).unwrap(), 0.0);
        b.cov = Some(Matrix::from_rows(vec![vec![-1e-6]]).unwrap());
        assert!(matches!(
            eval_sqrt_quad(&b, &[0.0], 0.0),
            Err(DrgpError::NegativeRadicand { .. })
        ));
    }

    #[test]
    fn max_shift_guard() {
        let b = block(vec![vec![1.0], vec![-1.0]], vec![0.3, 0.7], Some(vec![vec![0.2, 0.1], vec![0.1, 0.3]]));
        for r in [-500.0, 500.0] {
            assert!(eval_logsum(&b, &[r]).unwrap().is_finite());
            assert!(eval_sqrt_quad(&b, &[r], 0.0).unwrap().is_finite());
        }
    }

    #[test]
    fn constant_field_has_zero_fd_error() {
        let field = FnField {
            value: |_: &[f64]| 4.2,
            gradient: |x: &[f64]| vec![0.0; x.len()],
        };
        let pts = vec![vec![0.1, -3.0], vec![10.0, 2.0]];
        let rep = finite_diff_check(&field, &pts);
        assert!(rep.max_rel_error <= 1e-10);
        assert_eq!(rep.checked, 2);
    }

    #[test]
    fn singular_sqrt_quad_points_are_skipped() {
        let b = block(vec![vec![1.0]], vec![1.0], Some(vec![vec![1.0]]));
        // radicand = exp(2r + shift) ≈ 1e-10 at r = 0, shift = ln 1e-10
        let pts = vec![vec![0.0, (1e-10f64).ln()], vec![0.0, 0.0]];
        let rep = finite_diff_check(&SqrtQuadField(&b), &pts);
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.checked, 1);
    }
}
