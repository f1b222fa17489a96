//! Deterministic equivalents of the distributionally robust joint chance-constrained
//! geometric program, in log variables `r = log t`.
//!
//! | ambiguity | coupling | program | variables |
//! |-----------|----------|---------|-----------|
//! | two-moment | independent | convex | `(r, x)`, `x_k = log y_k` |
//! | two-moment | dependent | convex (ε ≤ 0.5) | `(r, y)` |
//! | nonneg support | independent | convex | `(r, x, λ̃, β̃, π̃)` |
//! | nonneg support | dependent | biconvex | `z = (r, λ̃, β̃, π̃)`, `y` |
//!
//! Individual (per-block) chance constraints fix every `y_k = 1 − ε` and yield a convex
//! program in `r` (two-moment) or `(r, λ̃, β̃, π̃)` (nonneg support).
//!
//! Constraints that are not uncertain (`RobustGP::certain`) are appended after the
//! formulation's own rows as `Σ μ_i exp(a_i·r) − 1 ≤ 0`.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, DrgpError, Result};
use crate::gp::{AmbiguityKind, AmbiguityParams, BlockTerms, PosynomialBlock, SqrtQuad};
use crate::matrix::{dot, Matrix};

/// Upper guard on `x_k` in the independent two-moment program (log-odds singularity at 0).
pub const X_GUARD: f64 = -1e-9;
/// Upper guard on `y_k` in the dependent two-moment program.
pub const Y_UPPER_GUARD: f64 = 1.0 - 1e-9;
/// Slack below `1 − ε` for the lower guard on `y_k` in the dependent two-moment program.
pub const Y_LOWER_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coupling {
    /// Row vectors mutually independent: `Π y_k ≥ 1 − ε`.
    Independent,
    /// Arbitrary dependence: `Σ y_k ≥ K − ε`.
    Dependent,
    /// One chance constraint per block, each at level `1 − ε`.
    Individual,
}

impl std::fmt::Display for Coupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coupling::Independent => write!(f, "independent"),
            Coupling::Dependent => write!(f, "dependent"),
            Coupling::Individual => write!(f, "individual"),
        }
    }
}

/// A distributionally robust geometric program with a joint chance constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustGP {
    pub objective: PosynomialBlock,
    pub constraints: Vec<PosynomialBlock>,
    /// Deterministic posynomial constraints `Σ μ_i Π t^{a_i} ≤ 1` outside the chance constraint.
    #[serde(default)]
    pub certain: Vec<PosynomialBlock>,
    pub ambiguity: AmbiguityParams,
    pub epsilon: f64,
    pub coupling: Coupling,
}

impl RobustGP {
    pub fn n_vars(&self) -> usize {
        self.objective.n_vars()
    }

    pub fn n_blocks(&self) -> usize {
        self.constraints.len()
    }

    pub fn term_counts(&self) -> Vec<usize> {
        self.constraints.iter().map(PosynomialBlock::n_terms).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(DrgpError::InvalidModel(format!(
                "epsilon {} outside (0, 0.5]",
                self.epsilon
            )));
        }
        if self.constraints.is_empty() {
            return Err(DrgpError::InvalidModel("at least one chance-constrained block required".into()));
        }
        let m = self.n_vars();
        if m == 0 {
            return Err(DrgpError::InvalidModel("no decision variables".into()));
        }
        for b in std::iter::once(&self.objective)
            .chain(&self.constraints)
            .chain(&self.certain)
        {
            b.validate()?;
            check_len("block variable count", m, b.n_vars())?;
        }
        self.ambiguity.validate(self.n_blocks())
    }

    /// The numeric bundle identifying this instance.
    pub fn theta(&self) -> InstanceParameter {
        let mut values = Vec::new();
        for b in std::iter::once(&self.objective)
            .chain(&self.constraints)
            .chain(&self.certain)
        {
            b.flatten_into(&mut values);
        }
        values.extend_from_slice(&self.ambiguity.gamma1);
        values.extend_from_slice(&self.ambiguity.gamma2);
        values.push(self.epsilon);
        let mut shape = vec![self.n_vars(), self.n_blocks(), self.certain.len()];
        shape.extend(self.term_counts());
        shape.extend(self.certain.iter().map(PosynomialBlock::n_terms));
        InstanceParameter { values, shape }
    }
}

/// Flattened instance data `θ` plus the shape signature it was read with.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceParameter {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl InstanceParameter {
    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values.len() == other.values.len()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        crate::matrix::distance(&self.values, &other.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceName {
    R,
    X,
    Y,
    Lambda,
    Beta,
    Pi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarSlice {
    pub name: SliceName,
    pub offset: usize,
    pub len: usize,
}

impl VarSlice {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Named contiguous slices of the decision vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableLayout {
    slices: Vec<VarSlice>,
    n: usize,
}

impl VariableLayout {
    fn new(parts: &[(SliceName, usize)]) -> Self {
        let mut offset = 0;
        let slices = parts
            .iter()
            .map(|&(name, len)| {
                let s = VarSlice { name, offset, len };
                offset += len;
                s
            })
            .collect();
        Self { slices, n: offset }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn slices(&self) -> &[VarSlice] {
        &self.slices
    }

    pub fn get(&self, name: SliceName) -> Option<Range<usize>> {
        self.slices.iter().find(|s| s.name == name).map(VarSlice::range)
    }

    /// Range of a slice that the formulation is known to contain.
    pub fn slice(&self, name: SliceName) -> Range<usize> {
        self.get(name)
            .unwrap_or_else(|| panic!("layout has no {name:?} slice"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Convexity {
    Convex,
    /// Convex in the `z` slice for fixed `y` and convex in `y` for fixed `z`.
    Biconvex { z: Range<usize>, y: Range<usize> },
}

#[derive(Debug, Clone, PartialEq)]
enum Formulation {
    TwoMomentInd,
    TwoMomentDep,
    /// Two-moment with every `y_k` fixed (individual constraints).
    TwoMomentFixedY(Vec<f64>),
    NsInd,
    NsDep,
    /// Nonneg-support dependent program restricted to fixed `y`.
    NsFixedY(Vec<f64>),
}

/// Objective value and gradient, constraint values and Jacobian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub f: f64,
    pub grad_f: Vec<f64>,
    pub g: Vec<f64>,
    pub jac: Matrix,
    /// True when a domain guard clamped some variable during this evaluation.
    pub guarded: bool,
}

impl Evaluation {
    pub fn zeros(n: usize, n_g: usize) -> Self {
        Self {
            f: 0.0,
            grad_f: vec![0.0; n],
            g: vec![0.0; n_g],
            jac: Matrix::zeros(n_g, n),
            guarded: false,
        }
    }

    /// Multiplies every constraint row (value and Jacobian) by `factor`.
    pub fn scale_rows(&mut self, factor: f64) {
        if factor != 1.0 {
            self.g.iter_mut().for_each(|v| *v *= factor);
            self.jac.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.f.is_finite()
            && self.grad_f.iter().all(|v| v.is_finite())
            && self.g.iter().all(|v| v.is_finite())
            && self.jac.as_slice().iter().all(|v| v.is_finite())
    }
}

/// A compiled deterministic program `min f(z) s.t. g(z) ≤ 0` with analytic first
/// derivatives. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SmoothProgram {
    problem: Arc<RobustGP>,
    form: Formulation,
    layout: VariableLayout,
    n_g: usize,
    convexity: Convexity,
}

fn wrong(builder: &'static str, p: &RobustGP) -> DrgpError {
    DrgpError::WrongFormulation {
        builder,
        kind: p.ambiguity.kind.to_string(),
        coupling: p.coupling.to_string(),
    }
}

/// Independent two-moment program over `(r, x)`, `n_g = 2K + 1`.
pub fn build_two_moment_ind(p: &RobustGP) -> Result<SmoothProgram> {
    p.validate()?;
    if p.ambiguity.kind != AmbiguityKind::TwoMoment || p.coupling != Coupling::Independent {
        return Err(wrong("two_moment_ind", p));
    }
    let (m, k) = (p.n_vars(), p.n_blocks());
    Ok(SmoothProgram::new(
        p,
        Formulation::TwoMomentInd,
        VariableLayout::new(&[(SliceName::R, m), (SliceName::X, k)]),
        2 * k + 1,
        Convexity::Convex,
    ))
}

/// Dependent two-moment program over `(r, y)`, `n_g = 2K + 1`.
pub fn build_two_moment_dep(p: &RobustGP) -> Result<SmoothProgram> {
    p.validate()?;
    if p.ambiguity.kind != AmbiguityKind::TwoMoment || p.coupling != Coupling::Dependent {
        return Err(wrong("two_moment_dep", p));
    }
    let (m, k) = (p.n_vars(), p.n_blocks());
    Ok(SmoothProgram::new(
        p,
        Formulation::TwoMomentDep,
        VariableLayout::new(&[(SliceName::R, m), (SliceName::Y, k)]),
        2 * k + 1,
        Convexity::Convex,
    ))
}

/// Individual two-moment chance constraints: convex program over `r`, `n_g = K`.
pub fn build_two_moment_individual(p: &RobustGP) -> Result<SmoothProgram> {
    p.validate()?;
    if p.ambiguity.kind != AmbiguityKind::TwoMoment || p.coupling != Coupling::Individual {
        return Err(wrong("two_moment_individual", p));
    }
    let (m, k) = (p.n_vars(), p.n_blocks());
    Ok(SmoothProgram::new(
        p,
        Formulation::TwoMomentFixedY(vec![1.0 - p.epsilon; k]),
        VariableLayout::new(&[(SliceName::R, m)]),
        k,
        Convexity::Convex,
    ))
}

/// Independent nonneg-support program over `(r, x, λ̃, β̃, π̃)`, `n_g = 1 + 4K + Σ I_k`.
pub fn build_ns_ind(p: &RobustGP) -> Result<SmoothProgram> {
    p.validate()?;
    if p.ambiguity.kind != AmbiguityKind::FirstMomentNonneg || p.coupling != Coupling::Independent {
        return Err(wrong("ns_ind", p));
    }
    let (m, k) = (p.n_vars(), p.n_blocks());
    let terms: usize = p.term_counts().iter().sum();
    Ok(SmoothProgram::new(
        p,
        Formulation::NsInd,
        VariableLayout::new(&[
            (SliceName::R, m),
            (SliceName::X, k),
            (SliceName::Lambda, k),
            (SliceName::Beta, terms),
            (SliceName::Pi, k),
        ]),
        1 + 4 * k + terms,
        Convexity::Convex,
    ))
}

/// Dependent nonneg-support program: biconvex in `z = (r, λ̃, β̃, π̃)` and `y`,
/// `n_g = 1 + 5K + Σ I_k`.
pub fn build_ns_dep(p: &RobustGP) -> Result<SmoothProgram> {
    p.validate()?;
    if p.ambiguity.kind != AmbiguityKind::FirstMomentNonneg || p.coupling != Coupling::Dependent {
        return Err(wrong("ns_dep", p));
    }
    let (m, k) = (p.n_vars(), p.n_blocks());
    let terms: usize = p.term_counts().iter().sum();
    let layout = VariableLayout::new(&[
        (SliceName::R, m),
        (SliceName::Lambda, k),
        (SliceName::Beta, terms),
        (SliceName::Pi, k),
        (SliceName::Y, k),
    ]);
    let nz = m + 2 * k + terms;
    Ok(SmoothProgram::new(
        p,
        Formulation::NsDep,
        layout,
        1 + 5 * k + terms,
        Convexity::Biconvex {
            z: 0..nz,
            y: nz..nz + k,
        },
    ))
}

/// Individual nonneg-support chance constraints: the dependent program with `y_k = 1 − ε`.
pub fn build_ns_individual(p: &RobustGP) -> Result<SmoothProgram> {
    p.validate()?;
    if p.ambiguity.kind != AmbiguityKind::FirstMomentNonneg || p.coupling != Coupling::Individual {
        return Err(wrong("ns_individual", p));
    }
    Ok(ns_fixed_y(p, vec![1.0 - p.epsilon; p.n_blocks()]))
}

fn ns_fixed_y(p: &RobustGP, y: Vec<f64>) -> SmoothProgram {
    let (m, k) = (p.n_vars(), p.n_blocks());
    let terms: usize = p.term_counts().iter().sum();
    SmoothProgram::new(
        p,
        Formulation::NsFixedY(y),
        VariableLayout::new(&[
            (SliceName::R, m),
            (SliceName::Lambda, k),
            (SliceName::Beta, terms),
            (SliceName::Pi, k),
        ]),
        3 * k + terms,
        Convexity::Convex,
    )
}

/// The builder for an ambiguity kind and coupling.
pub fn builder_for(kind: AmbiguityKind, coupling: Coupling) -> fn(&RobustGP) -> Result<SmoothProgram> {
    match (kind, coupling) {
        (AmbiguityKind::TwoMoment, Coupling::Independent) => build_two_moment_ind,
        (AmbiguityKind::TwoMoment, Coupling::Dependent) => build_two_moment_dep,
        (AmbiguityKind::TwoMoment, Coupling::Individual) => build_two_moment_individual,
        (AmbiguityKind::FirstMomentNonneg, Coupling::Independent) => build_ns_ind,
        (AmbiguityKind::FirstMomentNonneg, Coupling::Dependent) => build_ns_dep,
        (AmbiguityKind::FirstMomentNonneg, Coupling::Individual) => build_ns_individual,
    }
}

/// Picks the builder matching the instance's ambiguity kind and coupling.
pub fn build(p: &RobustGP) -> Result<SmoothProgram> {
    builder_for(p.ambiguity.kind, p.coupling)(p)
}

/// Constraint row `k` of the two-moment programs, split into its pieces.
struct TwoMomentRow {
    value: f64,
    grad_r: Vec<f64>,
    /// Derivative with respect to the coupling variable (`x_k` or `y_k`).
    d_coupling: f64,
}

/// Value of the log-odds factor `exp(φ/2)` and `d exp(φ/2) / d var`.
fn odds_factor_x(x: f64) -> (f64, f64) {
    // φ(x) = x − ln(1 − e^x),  φ'(x) = 1 / (1 − e^x)
    let em1 = -(x.exp_m1()); // 1 − e^x > 0
    let factor = (x.exp() / em1).sqrt();
    (factor, 0.5 * factor / em1)
}

fn odds_factor_y(y: f64) -> (f64, f64) {
    // φ(y) = ln(y / (1 − y)),  φ'(y) = 1 / (y (1 − y))
    let factor = (y / (1.0 - y)).sqrt();
    (factor, 0.5 * factor / (y * (1.0 - y)))
}

/// Odds factor `exp(φ/2)` with the log-odds `φ` continued by its tangent line outside
/// `[lo, hi]`. The continuation keeps the row convex, positive and continuously
/// differentiable past the guard. Returns `(value, derivative, guarded)`.
fn guarded_odds(v: f64, lo: f64, hi: f64, odds: fn(f64) -> (f64, f64)) -> (f64, f64, bool) {
    let edge = if v > hi {
        hi
    } else if v < lo {
        lo
    } else {
        let (o, d) = odds(v);
        return (o, d, false);
    };
    let (o, d) = odds(edge);
    let half_slope = d / o;
    let value = o * (half_slope * (v - edge)).exp();
    (value, value * half_slope, true)
}

impl SmoothProgram {
    fn new(p: &RobustGP, form: Formulation, layout: VariableLayout, n_rows: usize, convexity: Convexity) -> Self {
        Self {
            problem: Arc::new(p.clone()),
            form,
            layout,
            n_g: n_rows + p.certain.len(),
            convexity,
        }
    }

    pub fn problem(&self) -> &RobustGP {
        &self.problem
    }

    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    pub fn n_g(&self) -> usize {
        self.n_g
    }

    pub fn convexity(&self) -> &Convexity {
        &self.convexity
    }

    pub fn theta(&self) -> InstanceParameter {
        self.problem.theta()
    }

    pub fn is_biconvex(&self) -> bool {
        matches!(self.convexity, Convexity::Biconvex { .. })
    }

    /// `y` values held constant by a restricted program, if any.
    pub fn fixed_y(&self) -> Option<&[f64]> {
        match &self.form {
            Formulation::TwoMomentFixedY(y) | Formulation::NsFixedY(y) => Some(y),
            _ => None,
        }
    }

    /// Short identifier of the formulation, used in reports.
    pub fn name(&self) -> &'static str {
        match self.form {
            Formulation::TwoMomentInd => "two-moment/independent",
            Formulation::TwoMomentDep => "two-moment/dependent",
            Formulation::TwoMomentFixedY(_) => "two-moment/fixed-y",
            Formulation::NsInd => "nonneg-support/independent",
            Formulation::NsDep => "nonneg-support/dependent",
            Formulation::NsFixedY(_) => "nonneg-support/fixed-y",
        }
    }

    /// `log t`: the `r` slice of a decision vector.
    pub fn r<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[self.layout.slice(SliceName::R)]
    }

    /// Original-space solution `t = exp(r)`.
    pub fn t_solution(&self, z: &[f64]) -> Vec<f64> {
        self.r(z).iter().map(|v| v.exp()).collect()
    }

    /// The `y_k` implied by a decision vector (`exp(x_k)` for log-transformed programs).
    pub fn y_values(&self, z: &[f64]) -> Vec<f64> {
        match &self.form {
            Formulation::TwoMomentInd | Formulation::NsInd => {
                z[self.layout.slice(SliceName::X)].iter().map(|x| x.exp()).collect()
            }
            Formulation::TwoMomentDep | Formulation::NsDep => z[self.layout.slice(SliceName::Y)].to_vec(),
            Formulation::TwoMomentFixedY(y) | Formulation::NsFixedY(y) => y.clone(),
        }
    }

    pub fn f(&self, z: &[f64]) -> Result<f64> {
        Ok(self.evaluate(z)?.f)
    }

    pub fn grad_f(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(z)?.grad_f)
    }

    pub fn eval_g(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(z)?.g)
    }

    pub fn jac_g(&self, z: &[f64]) -> Result<Matrix> {
        Ok(self.evaluate(z)?.jac)
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<Evaluation> {
        let mut ev = Evaluation::zeros(self.n(), self.n_g);
        self.evaluate_into(z, &mut ev)?;
        Ok(ev)
    }

    /// Evaluates everything at `z`, reusing the buffers in `ev`.
    pub fn evaluate_into(&self, z: &[f64], ev: &mut Evaluation) -> Result<()> {
        check_len("decision vector", self.n(), z.len())?;
        if ev.g.len() != self.n_g || ev.grad_f.len() != self.n() {
            *ev = Evaluation::zeros(self.n(), self.n_g);
        }
        ev.jac.fill(0.0);
        ev.grad_f.iter_mut().for_each(|v| *v = 0.0);
        ev.guarded = false;

        let r_range = self.layout.slice(SliceName::R);
        let r = &z[r_range.clone()];
        self.objective_into(r, ev)?;
        let row = match &self.form {
            Formulation::TwoMomentInd => self.rows_two_moment(z, ev, CouplingVar::X)?,
            Formulation::TwoMomentDep => self.rows_two_moment(z, ev, CouplingVar::Y)?,
            Formulation::TwoMomentFixedY(y) => self.rows_two_moment(z, ev, CouplingVar::Fixed(y))?,
            Formulation::NsInd => self.rows_ns_ind(z, ev),
            Formulation::NsDep => self.rows_ns_dep(z, ev),
            Formulation::NsFixedY(y) => self.rows_ns_fixed(z, y, ev),
        };
        self.certain_rows(r, row, ev);
        if !ev.is_finite() {
            return Err(DrgpError::NonFinite {
                context: format!("{} evaluation", self.name()),
            });
        }
        Ok(())
    }

    fn objective_into(&self, r: &[f64], ev: &mut Evaluation) -> Result<()> {
        let p = &*self.problem;
        let obj = &p.objective;
        let terms = BlockTerms::new(obj, r);
        ev.f = terms.logsum(obj);
        let r_off = self.layout.slice(SliceName::R).start;
        let m = r.len();
        terms.add_logsum_grad(obj, 1.0, &mut ev.grad_f[r_off..r_off + m]);
        let g1 = p.ambiguity.gamma1(0);
        if p.ambiguity.kind == AmbiguityKind::TwoMoment && g1 > 0.0 && obj.cov.is_some() {
            let sq = SqrtQuad::new(obj, &terms)?;
            let c = g1.sqrt();
            ev.f += c * sq.value;
            for (o, gq) in ev.grad_f[r_off..r_off + m].iter_mut().zip(&sq.grad) {
                *o += c * gq;
            }
        }
        Ok(())
    }

    fn two_moment_row(&self, k: usize, r: &[f64], odds: f64, d_odds: f64) -> Result<TwoMomentRow> {
        let p = &*self.problem;
        let block = &p.constraints[k];
        let terms = BlockTerms::new(block, r);
        let mut grad_r = vec![0.0; r.len()];
        terms.add_logsum_grad(block, 1.0, &mut grad_r);
        let mut value = terms.logsum(block) - 1.0;
        let mut d_coupling = 0.0;
        if block.cov.is_some() {
            let sq = SqrtQuad::new(block, &terms)?;
            let s1 = p.ambiguity.gamma1(k + 1).sqrt();
            let s2 = p.ambiguity.gamma2(k + 1).sqrt();
            let coef = s1 + s2 * odds;
            value += coef * sq.value;
            for (o, gq) in grad_r.iter_mut().zip(&sq.grad) {
                *o += coef * gq;
            }
            d_coupling = s2 * sq.value * d_odds;
        }
        Ok(TwoMomentRow {
            value,
            grad_r,
            d_coupling,
        })
    }

    fn rows_two_moment(&self, z: &[f64], ev: &mut Evaluation, var: CouplingVar<'_>) -> Result<usize> {
        let p = &*self.problem;
        let k_blocks = p.n_blocks();
        let r_range = self.layout.slice(SliceName::R);
        let r = &z[r_range.clone()];
        let c_range = match var {
            CouplingVar::X => Some(self.layout.slice(SliceName::X)),
            CouplingVar::Y => Some(self.layout.slice(SliceName::Y)),
            CouplingVar::Fixed(_) => None,
        };
        let (y_lo, y_hi) = (1.0 - p.epsilon - Y_LOWER_SLACK, Y_UPPER_GUARD);
        for k in 0..k_blocks {
            let (odds, d_odds, clamped) = match var {
                CouplingVar::X => guarded_odds(z[c_range.as_ref().unwrap().start + k], f64::NEG_INFINITY, X_GUARD, odds_factor_x),
                CouplingVar::Y => guarded_odds(z[c_range.as_ref().unwrap().start + k], y_lo, y_hi, odds_factor_y),
                CouplingVar::Fixed(y) => {
                    let (o, _) = odds_factor_y(y[k]);
                    (o, 0.0, false)
                }
            };
            ev.guarded |= clamped;
            let row = self.two_moment_row(k, r, odds, d_odds)?;
            ev.g[k] = row.value;
            let jr = ev.jac.row_mut(k);
            jr[r_range.clone()].copy_from_slice(&row.grad_r);
            if let Some(cr) = &c_range {
                jr[cr.start + k] = row.d_coupling;
            }
        }
        let Some(cr) = c_range else {
            return Ok(k_blocks);
        };
        let coupling_row = k_blocks;
        match var {
            CouplingVar::X => {
                // log(1 − ε) − Σ x_k
                let xs = &z[cr.clone()];
                ev.g[coupling_row] = (1.0 - p.epsilon).ln() - xs.iter().sum::<f64>();
                for k in 0..k_blocks {
                    ev.jac[(coupling_row, cr.start + k)] = -1.0;
                    ev.g[coupling_row + 1 + k] = xs[k];
                    ev.jac[(coupling_row + 1 + k, cr.start + k)] = 1.0;
                }
            }
            CouplingVar::Y => {
                // (K − ε) − Σ y_k
                let ys = &z[cr.clone()];
                ev.g[coupling_row] = (k_blocks as f64 - p.epsilon) - ys.iter().sum::<f64>();
                for k in 0..k_blocks {
                    ev.jac[(coupling_row, cr.start + k)] = -1.0;
                    ev.g[coupling_row + 1 + k] = ys[k] - 1.0;
                    ev.jac[(coupling_row + 1 + k, cr.start + k)] = 1.0;
                }
            }
            CouplingVar::Fixed(_) => unreachable!(),
        }
        Ok(2 * k_blocks + 1)
    }

    /// Dual-feasibility rows `a_k + Σ_i exp(−λ̃_k + β̃_ki + ln μ_ki) − 1`, where the
    /// leading term `a_k` and its derivative are supplied by the caller.
    #[allow(clippy::too_many_arguments)]
    fn dual_rows(
        &self,
        z: &[f64],
        ev: &mut Evaluation,
        first_row: usize,
        lead: impl Fn(usize, f64) -> (f64, Option<(usize, f64)>),
    ) {
        let p = &*self.problem;
        let lam = self.layout.slice(SliceName::Lambda);
        let beta = self.layout.slice(SliceName::Beta);
        let mut b_off = beta.start;
        for (k, block) in p.constraints.iter().enumerate() {
            let row = first_row + k;
            let l = z[lam.start + k];
            let (lead_val, lead_grad) = lead(k, l);
            let mut total = lead_val;
            if let Some((col, d)) = lead_grad {
                ev.jac[(row, col)] = d;
            }
            for (i, mu) in block.mean_coeffs.iter().enumerate() {
                let e = (-l + z[b_off + i] + mu.ln()).exp();
                ev.jac[(row, b_off + i)] = e;
                total += e;
            }
            ev.g[row] = total - 1.0;
            ev.jac[(row, lam.start + k)] = -total;
            b_off += block.n_terms();
        }
    }

    /// Rows `[λ̃_k]`, `[λ̃_k − π̃_k]`, `[π̃_k + a_ki·r − β̃_ki]` starting at `first_row`.
    fn dual_linear_rows(&self, z: &[f64], ev: &mut Evaluation, first_row: usize) -> usize {
        let p = &*self.problem;
        let k_blocks = p.n_blocks();
        let r_range = self.layout.slice(SliceName::R);
        let lam = self.layout.slice(SliceName::Lambda);
        let beta = self.layout.slice(SliceName::Beta);
        let pi = self.layout.slice(SliceName::Pi);
        let mut row = first_row;
        for k in 0..k_blocks {
            ev.g[row] = z[lam.start + k];
            ev.jac[(row, lam.start + k)] = 1.0;
            row += 1;
        }
        for k in 0..k_blocks {
            ev.g[row] = z[lam.start + k] - z[pi.start + k];
            ev.jac[(row, lam.start + k)] = 1.0;
            ev.jac[(row, pi.start + k)] = -1.0;
            row += 1;
        }
        let r = &z[r_range.clone()];
        let mut b_off = beta.start;
        for (k, block) in p.constraints.iter().enumerate() {
            for i in 0..block.n_terms() {
                let a = block.exponents.row(i);
                ev.g[row] = z[pi.start + k] + dot(a, r) - z[b_off + i];
                let jr = ev.jac.row_mut(row);
                jr[r_range.clone()].copy_from_slice(a);
                jr[pi.start + k] = 1.0;
                jr[b_off + i] = -1.0;
                row += 1;
            }
            b_off += block.n_terms();
        }
        row
    }

    fn rows_ns_ind(&self, z: &[f64], ev: &mut Evaluation) -> usize {
        let p = &*self.problem;
        let k_blocks = p.n_blocks();
        let xr = self.layout.slice(SliceName::X);
        let xs = &z[xr.clone()];
        ev.g[0] = (1.0 - p.epsilon).ln() - xs.iter().sum::<f64>();
        for k in 0..k_blocks {
            ev.jac[(0, xr.start + k)] = -1.0;
            ev.g[1 + k] = xs[k];
            ev.jac[(1 + k, xr.start + k)] = 1.0;
        }
        let x_start = xr.start;
        self.dual_rows(z, ev, 1 + k_blocks, |k, l| {
            let e = (z[x_start + k] - l).exp();
            (e, Some((x_start + k, e)))
        });
        self.dual_linear_rows(z, ev, 1 + 2 * k_blocks)
    }

    fn rows_ns_dep(&self, z: &[f64], ev: &mut Evaluation) -> usize {
        let p = &*self.problem;
        let k_blocks = p.n_blocks();
        let yr = self.layout.slice(SliceName::Y);
        let ys = &z[yr.clone()];
        ev.g[0] = (k_blocks as f64 - p.epsilon) - ys.iter().sum::<f64>();
        for k in 0..k_blocks {
            ev.jac[(0, yr.start + k)] = -1.0;
            ev.g[1 + k] = -ys[k];
            ev.jac[(1 + k, yr.start + k)] = -1.0;
            ev.g[1 + k_blocks + k] = ys[k] - 1.0;
            ev.jac[(1 + k_blocks + k, yr.start + k)] = 1.0;
        }
        let y_start = yr.start;
        self.dual_rows(z, ev, 1 + 2 * k_blocks, |k, l| {
            let e = (-l).exp();
            (z[y_start + k] * e, Some((y_start + k, e)))
        });
        self.dual_linear_rows(z, ev, 1 + 3 * k_blocks)
    }

    fn rows_ns_fixed(&self, z: &[f64], y: &[f64], ev: &mut Evaluation) -> usize {
        let k_blocks = self.problem.n_blocks();
        self.dual_rows(z, ev, 0, |k, l| (y[k] * (-l).exp(), None));
        self.dual_linear_rows(z, ev, k_blocks)
    }

    fn certain_rows(&self, r: &[f64], first_row: usize, ev: &mut Evaluation) {
        let r_range = self.layout.slice(SliceName::R);
        for (c, block) in self.problem.certain.iter().enumerate() {
            let row = first_row + c;
            let terms = BlockTerms::new(block, r);
            ev.g[row] = terms.logsum(block) - 1.0;
            terms.add_logsum_grad(block, 1.0, &mut ev.jac.row_mut(row)[r_range.clone()]);
        }
    }

    /// Restricts a biconvex program to fixed `y`, giving a convex program in `z`.
    pub fn restrict_y(&self, y: &[f64]) -> Result<SmoothProgram> {
        match self.form {
            Formulation::NsDep => {
                check_len("fixed y", self.problem.n_blocks(), y.len())?;
                Ok(ns_fixed_y(&self.problem, y.to_vec()))
            }
            _ => Err(DrgpError::Convexity("not biconvex")),
        }
    }

    /// Concatenates a `z` slice and a `y` slice into a full decision vector.
    pub fn join(&self, z: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = z.to_vec();
        out.extend_from_slice(y);
        out
    }

    /// A strictly feasible point with the given `r`, built by giving every auxiliary
    /// variable slack.
    ///
    /// Coupling variables sit at `y_k = 1 − ε/(2K)` (joint) and the nonneg-support
    /// duals at `λ̃_k = π̃_k − δ`, `β̃_ki = π̃_k + a_ki·r + δ` with `π̃_k = −δ`, where
    /// `δ` is a fraction of the block's Markov slack `1 − y_k − μ_kᵀ exp(A_k r)`.
    /// Returns `None` when `r` itself leaves no slack in some constraint.
    pub fn slack_point(&self, r: &[f64]) -> Option<Vec<f64>> {
        let p = &*self.problem;
        let k_blocks = p.n_blocks();
        let eps = p.epsilon;
        let mut z = vec![0.0; self.n()];
        z[self.layout.slice(SliceName::R)].copy_from_slice(r);
        let y_joint = 1.0 - eps / (2.0 * k_blocks as f64);
        let y: Vec<f64> = match &self.form {
            Formulation::TwoMomentFixedY(y) | Formulation::NsFixedY(y) => y.clone(),
            _ => vec![y_joint; k_blocks],
        };
        if let Some(xr) = self.layout.get(SliceName::X) {
            for k in 0..k_blocks {
                z[xr.start + k] = y[k].ln();
            }
        }
        if let Some(yr) = self.layout.get(SliceName::Y) {
            z[yr].copy_from_slice(&y);
        }
        if let (Some(lam), Some(beta), Some(pi)) = (
            self.layout.get(SliceName::Lambda),
            self.layout.get(SliceName::Beta),
            self.layout.get(SliceName::Pi),
        ) {
            let mut b_off = beta.start;
            for (k, block) in p.constraints.iter().enumerate() {
                let mean = BlockTerms::new(block, r).logsum(block);
                let slack = 1.0 - y[k] - mean;
                if slack <= 0.0 {
                    return None;
                }
                // e^{δ}·y + e^{3δ}·mean < 1 holds for δ below this bound.
                let delta = (1.0 / (y[k] + mean)).ln() / 4.0;
                z[pi.start + k] = -delta;
                z[lam.start + k] = -2.0 * delta;
                for i in 0..block.n_terms() {
                    z[b_off + i] = -delta + dot(block.exponents.row(i), r) + delta;
                }
                b_off += block.n_terms();
            }
        }
        let g = self.eval_g(&z).ok()?;
        g.iter().all(|&v| v < 0.0).then_some(z)
    }

    /// Default initial state: `r = 0`, coupling variables at `y_k = 1 − ε/(2K)`, and
    /// nonneg-support duals at `λ̃ = π̃ = 0`, `β̃_ki = a_ki·r`.
    pub fn default_start(&self) -> Vec<f64> {
        let p = &*self.problem;
        let k_blocks = p.n_blocks();
        let mut z = vec![0.0; self.n()];
        let y0 = 1.0 - p.epsilon / (2.0 * k_blocks as f64);
        if let Some(xr) = self.layout.get(SliceName::X) {
            z[xr].iter_mut().for_each(|v| *v = y0.ln());
        }
        if let Some(yr) = self.layout.get(SliceName::Y) {
            z[yr].iter_mut().for_each(|v| *v = y0);
        }
        z
    }
}

#[derive(Clone, Copy)]
enum CouplingVar<'a> {
    X,
    Y,
    Fixed(&'a [f64]),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::AmbiguityParams;

    fn blk(exps: Vec<Vec<f64>>, mu: Vec<f64>, cov: Option<Vec<Vec<f64>>>, label: usize) -> PosynomialBlock {
        PosynomialBlock::new(
            Matrix::from_rows(exps).unwrap(),
            mu,
            cov.map(|c| Matrix::from_rows(c).unwrap()),
            label,
        )
        .unwrap()
    }

    /// M = 3, K = 2, I = (2, 2).
    fn toy(kind: AmbiguityKind, coupling: Coupling, eps: f64) -> RobustGP {
        RobustGP {
            objective: blk(vec![vec![-1.0, -1.0, -1.0]], vec![1.0], None, 0),
            constraints: vec![
                blk(
                    vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]],
                    vec![0.05, 0.05],
                    Some(vec![vec![1e-4, 0.0], vec![0.0, 1e-4]]),
                    1,
                ),
                blk(
                    vec![vec![1.0, 1.0, 0.0], vec![0.5, 0.0, 0.0]],
                    vec![0.5, 0.1],
                    Some(vec![vec![1e-2, 1e-3], vec![1e-3, 1e-2]]),
                    2,
                ),
            ],
            certain: vec![],
            ambiguity: AmbiguityParams::uniform(kind, 2, 2.0, 2.0),
            epsilon: eps,
            coupling,
        }
    }

    #[test]
    fn counts_two_moment() {
        let sp = build_two_moment_ind(&toy(AmbiguityKind::TwoMoment, Coupling::Independent, 0.1)).unwrap();
        assert_eq!((sp.n(), sp.n_g()), (5, 5));
        let sp = build_two_moment_dep(&toy(AmbiguityKind::TwoMoment, Coupling::Dependent, 0.1)).unwrap();
        assert_eq!((sp.n(), sp.n_g()), (5, 5));
    }

    #[test]
    fn counts_ns() {
        let sp = build_ns_ind(&toy(AmbiguityKind::FirstMomentNonneg, Coupling::Independent, 0.2)).unwrap();
        assert_eq!((sp.n(), sp.n_g()), (13, 13));
        let sp = build_ns_dep(&toy(AmbiguityKind::FirstMomentNonneg, Coupling::Dependent, 0.2)).unwrap();
        assert_eq!(sp.n_g(), 1 + 5 * 2 + 4);
        assert_eq!(sp.n(), 3 + 2 + 4 + 2 + 2);
        assert!(sp.is_biconvex());
    }

    #[test]
    fn wrong_builder_is_rejected() {
        let p = toy(AmbiguityKind::TwoMoment, Coupling::Independent, 0.1);
        assert!(matches!(build_two_moment_dep(&p), Err(DrgpError::WrongFormulation { .. })));
        assert!(build_ns_ind(&p).is_err());
        assert!(build_ns_dep(&p).is_err());
    }

    #[test]
    fn epsilon_range_enforced() {
        let mut p = toy(AmbiguityKind::TwoMoment, Coupling::Independent, 0.1);
        p.epsilon = 0.6;
        assert!(build(&p).is_err());
        p.epsilon = 0.0;
        assert!(build(&p).is_err());
    }

    #[test]
    fn shift_singularity_blows_up_constraint() {
        let sp = build_two_moment_ind(&toy(AmbiguityKind::TwoMoment, Coupling::Independent, 0.1)).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for x in [-1e-1, -1e-3, -1e-5, -1e-7, -1e-9] {
            let z = [0.0, 0.0, 0.0, x, -0.05];
            let g0 = sp.eval_g(&z).unwrap()[0];
            assert!(g0 > prev);
            prev = g0;
        }
        assert!(prev > 1.0);
        let ev = sp.evaluate(&[0.0, 0.0, 0.0, 1e-12, -0.05]).unwrap();
        assert!(ev.guarded);
    }

    #[test]
    fn dependent_y_singularity() {
        let sp = build_two_moment_dep(&toy(AmbiguityKind::TwoMoment, Coupling::Dependent, 0.2)).unwrap();
        let a = sp.eval_g(&[0.0, 0.0, 0.0, 0.99, 0.9]).unwrap()[0];
        let b = sp.eval_g(&[0.0, 0.0, 0.0, 1.0 - 1e-8, 0.9]).unwrap()[0];
        assert!(b > a && b > 0.5);
    }

    #[test]
    fn dependent_coupling_arithmetic() {
        // ε = 0.2, y = (0.9, 0.9): Σ y = 1.8 = K − ε exactly, so the coupling row is 0.
        let sp = build_two_moment_dep(&toy(AmbiguityKind::TwoMoment, Coupling::Dependent, 0.2)).unwrap();
        let g = sp.eval_g(&[0.0, 0.0, 0.0, 0.9, 0.9]).unwrap();
        assert!(g[2].abs() < 1e-15);
        let g = sp.eval_g(&[0.0, 0.0, 0.0, 0.95, 0.8]).unwrap();
        assert!(g[2] > 0.0, "y_2 < 1 − ε violates the coupling");
    }

    #[test]
    fn ns_dep_all_ones_coupling_feasible() {
        let sp = build_ns_dep(&toy(AmbiguityKind::FirstMomentNonneg, Coupling::Dependent, 0.2)).unwrap();
        let mut z = sp.default_start();
        let yr = sp.layout().slice(SliceName::Y);
        z[yr].iter_mut().for_each(|v| *v = 1.0);
        let g = sp.eval_g(&z).unwrap();
        assert!((g[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn ns_dual_feasibility_boundary() {
        // x = λ̃ = π̃ = 0 and β̃ → −∞: the dual-feasibility row tends to exp(0) − 1 = 0.
        let sp = build_ns_ind(&toy(AmbiguityKind::FirstMomentNonneg, Coupling::Independent, 0.2)).unwrap();
        let mut z = vec![0.0; sp.n()];
        let br = sp.layout().slice(SliceName::Beta);
        z[br].iter_mut().for_each(|v| *v = -700.0);
        let g = sp.eval_g(&z).unwrap();
        assert!(g[3].abs() < 1e-12 && g[4].abs() < 1e-12);
    }

    #[test]
    fn linear_rows_have_unit_jacobian() {
        let sp = build_two_moment_ind(&toy(AmbiguityKind::TwoMoment, Coupling::Independent, 0.1)).unwrap();
        let jac = sp.jac_g(&[0.1, -0.2, 0.3, -0.04, -0.06]).unwrap();
        assert_eq!(jac.row(2), &[0.0, 0.0, 0.0, -1.0, -1.0]);
        assert_eq!(jac.row(3), &[0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(jac.row(4), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn slack_points_are_strictly_feasible() {
        let r = [-2.0, -2.0, -2.0];
        for (kind, coupling) in [
            (AmbiguityKind::TwoMoment, Coupling::Independent),
            (AmbiguityKind::TwoMoment, Coupling::Dependent),
            (AmbiguityKind::TwoMoment, Coupling::Individual),
            (AmbiguityKind::FirstMomentNonneg, Coupling::Independent),
            (AmbiguityKind::FirstMomentNonneg, Coupling::Dependent),
            (AmbiguityKind::FirstMomentNonneg, Coupling::Individual),
        ] {
            let sp = build(&toy(kind, coupling, 0.2)).unwrap();
            let z = sp.slack_point(&r).unwrap_or_else(|| panic!("{}", sp.name()));
            assert!(sp.eval_g(&z).unwrap().iter().all(|&v| v < 0.0), "{}", sp.name());
        }
    }

    #[test]
    fn restriction_matches_full_program_rows() {
        let sp = build_ns_dep(&toy(AmbiguityKind::FirstMomentNonneg, Coupling::Dependent, 0.2)).unwrap();
        let y = [0.93, 0.91];
        let zfix = sp.restrict_y(&y).unwrap();
        let z: Vec<f64> = (0..zfix.n()).map(|i| 0.1 * i as f64 - 0.4).collect();
        let full = sp.join(&z, &y);
        let gf = sp.eval_g(&full).unwrap();
        let gr = zfix.eval_g(&z).unwrap();
        // restricted rows = full rows from the dual-feasibility block onwards
        assert_eq!(&gf[1 + 2 * 2..], &gr[..]);
        assert_eq!(sp.f(&full).unwrap(), zfix.f(&z).unwrap());
    }

    #[test]
    fn theta_is_shape_aware() {
        let a = toy(AmbiguityKind::TwoMoment, Coupling::Independent, 0.1);
        let mut b = a.clone();
        b.constraints[0].mean_coeffs[0] *= 1.1;
        assert!(a.theta().same_shape(&b.theta()));
        assert!(a.theta().distance(&b.theta()) > 0.0);
        assert_eq!(a.theta().distance(&a.theta()), 0.0);
    }
}
