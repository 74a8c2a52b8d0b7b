//! Solvers for the hierarchy `(K̂ + N̂ + Ĝ)|V⟩ = 0`.
//!
//! All schemes leave part of `|V⟩` free (a projection onto the null space of
//! the operator being inverted). By default that part is pinned to the free
//! solution `|V⟩^(0)`; every solver also accepts an explicit seed.

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::cuntz::{build_g, build_k, build_n, OperatorExpr};
use crate::fock::{FockVector, DEFAULT_BUDGET};
use crate::inverse::{left_inverse_g, neumann_op, right_inverse_k, right_inverse_k_plus_g, right_inverse_nq, number_operator};
use crate::model::{IndexSpace, KernelSet};
use crate::op::{flatten, unflatten, Op};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Free,
    Perturb,
    Triangular,
    Closed,
    Rational,
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelResidual {
    pub level: usize,
    pub max_abs: f64,
    pub trusted: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub method: Method,
    #[serde(rename = "V", serialize_with = "fock_json")]
    pub v: FockVector,
    /// Number of expansion terms with a nonzero component at each level.
    pub series_terms_used: Vec<usize>,
    /// Term count predicted from the grading alone, when meaningful.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structural_terms: Option<Vec<usize>>,
    pub residual_per_level: Vec<LevelResidual>,
    /// Highest level of `V` unaffected by the truncation.
    pub trusted_levels: Option<usize>,
    pub arbitrary_choice: String,
    pub orders_used: usize,
    /// Max-norm of each expansion increment on trusted levels.
    pub increments: Vec<f64>,
    pub warnings: Vec<String>,
}

fn fock_json<S: Serializer>(v: &FockVector, s: S) -> std::result::Result<S::Ok, S::Error> {
    v.to_json().serialize(s)
}

impl SolveReport {
    fn new(method: Method, v: FockVector, arbitrary_choice: String) -> Self {
        let l = v.max_level();
        Self {
            method,
            v,
            series_terms_used: vec![0; l + 1],
            structural_terms: None,
            residual_per_level: Vec::new(),
            trusted_levels: Some(l),
            arbitrary_choice,
            orders_used: 0,
            increments: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Largest residual over trusted levels.
    pub fn max_trusted_residual(&self) -> f64 {
        self.residual_per_level.iter().filter(|r| r.trusted).map(|r| r.max_abs).fold(0.0, f64::max)
    }
}

fn check_normalization(v: &mut FockVector) -> Result<()> {
    let v0 = v.level(0)[0];
    if (v0 - 1.0).abs() > 1e-12 {
        return Err(Error::NormalizationError(v0));
    }
    v.level_mut(0)[0] = 1.0;
    Ok(())
}

/// `K̂ + N̂ + Ĝ` as one expression.
pub fn hierarchy_operator(space: &IndexSpace, kernels: &KernelSet) -> Result<OperatorExpr> {
    build_k(kernels).add(&build_g(kernels))?.add(&build_n(space, kernels)?)
}

/// Per-level max-norm of `(K̂ + N̂ + Ĝ)|V⟩`; levels above `L − 2` are untrusted.
pub fn residual(v: &FockVector, space: &IndexSpace, kernels: &KernelSet) -> Result<Vec<LevelResidual>> {
    let op = hierarchy_operator(space, kernels)?;
    let top = Op::from(op.clone()).trusted_top(v.max_level());
    let r = op.apply(v)?;
    Ok((0..=v.max_level())
        .map(|n| LevelResidual { level: n, max_abs: r.level_max_abs(n), trusted: top.is_some_and(|t| n <= t) })
        .collect())
}

/// Solution of `(K̂ + Ĝ)|V⟩ = 0` with `V₀ = 1`: `V_n = h ⊗ V_{n−1}`, `h = −GreenK·G`.
pub fn free_solution(kernels: &KernelSet, max_level: usize) -> Result<FockVector> {
    let green = kernels.green()?;
    let h: Vec<f64> = (green * &kernels.g).iter().map(|x| -x).collect();
    let d = kernels.dim();
    let mut v = FockVector::vacuum(d, max_level);
    for n in 1..=max_level {
        let prev = v.level(n - 1).to_vec();
        let r = prev.len();
        let lev = v.level_mut(n);
        for (x, hx) in h.iter().enumerate() {
            for (j, p) in prev.iter().enumerate() {
                lev[x * r + j] = hx * p;
            }
        }
    }
    Ok(v)
}

/// One-particle free field `h = −GreenK·G`.
pub fn free_field(kernels: &KernelSet) -> Result<DVector<f64>> {
    Ok(-(kernels.green()? * &kernels.g))
}

#[derive(Clone, Debug)]
pub struct PerturbOptions {
    pub order: usize,
    /// Stop once an increment's max-norm on trusted levels drops below this.
    pub tolerance: f64,
    pub symmetrized: bool,
    /// Replaces `|V⟩^(0)`; it is projected with `P_{K+G}` before use.
    pub seed: Option<FockVector>,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        Self { order: 2, tolerance: 0.0, symmetrized: false, seed: None }
    }
}

fn nonzero_levels(v: &FockVector, counts: &mut [usize]) {
    for (n, c) in counts.iter_mut().enumerate() {
        if v.level(n).iter().any(|&x| x != 0.0) {
            *c += 1;
        }
    }
}

fn trusted_max_abs(v: &FockVector, top: Option<usize>) -> f64 {
    top.map(|t| (0..=t).map(|n| v.level_max_abs(n)).fold(0.0, f64::max)).unwrap_or(0.0)
}

/// `V = Σ_{i≤j} (−1)^i [(K̂+Ĝ)_R^{-1} N̂]^i · P_{K+G}|V⟩^(0)`.
pub fn perturbation_series(space: &IndexSpace, kernels: &KernelSet, max_level: usize, opts: &PerturbOptions) -> Result<SolveReport> {
    let d = space.dim();
    let kg = right_inverse_k_plus_g(kernels, max_level, None)?;
    let (seed, choice) = match &opts.seed {
        None => (
            free_solution(kernels, max_level)?,
            "P_{K+G}V = V(0), the free solution (K invertible, so it already lies in the null space)".to_string(),
        ),
        Some(s) => {
            s.same_shape(&FockVector::zeros(d, max_level))?;
            (kg.projector.apply(s)?, "P_{K+G}V = P_{K+G} applied to the supplied seed".to_string())
        }
    };
    let x = Op::product([kg.inverse.clone(), Op::from(build_n(space, kernels)?)]);
    let mut v = seed.clone();
    let mut report_counts = vec![0; max_level + 1];
    nonzero_levels(&seed, &mut report_counts);
    let mut term = seed;
    let mut increments: Vec<f64> = Vec::new();
    let mut orders = 0;
    let mut diverging = None;
    for i in 1..=opts.order {
        let trusted = max_level.checked_sub(2 * i);
        term = x.apply(&term)?.scaled(-1.0);
        let inc = trusted_max_abs(&term, trusted);
        if term.norm() == 0.0 {
            break;
        }
        v.axpy(1.0, &term)?;
        nonzero_levels(&term, &mut report_counts);
        increments.push(inc);
        orders = i;
        let k = increments.len();
        if k >= 4 && increments[k - 1] > increments[k - 2] && increments[k - 2] > increments[k - 3] && increments[k - 3] > increments[k - 4] {
            diverging = Some(i);
            break;
        }
        if inc < opts.tolerance {
            break;
        }
    }
    if opts.symmetrized {
        v = v.symmetrize();
    }
    check_normalization(&mut v)?;
    let mut report = SolveReport::new(Method::Perturb, v, choice);
    report.series_terms_used = report_counts;
    report.orders_used = orders;
    report.trusted_levels = max_level.checked_sub(2 * orders);
    if increments.windows(2).any(|w| w[1] > w[0]) {
        report.warnings.push("series increments grew between consecutive orders".into());
    }
    report.increments = increments;
    report.residual_per_level = residual(&report.v, space, kernels)?;
    if let Some(order) = diverging {
        return Err(Error::SeriesDiverging { order, partial: Box::new(report) });
    }
    Ok(report)
}

/// `Y = N̂_R^{-1}(K̂ + Ĝ)`, raising by at least two.
fn triangular_raising(space: &IndexSpace, kernels: &KernelSet) -> Result<(Op, crate::inverse::InverseBundle)> {
    let nb = right_inverse_nq(space, kernels)?;
    let kg = build_k(kernels).add(&build_g(kernels))?;
    Ok((Op::product([nb.inverse.clone(), Op::from(kg)]), nb))
}

/// `P_N|V⟩^(0)`, the default seed of the lower-triangular expansion.
pub fn projected_free_seed(space: &IndexSpace, kernels: &KernelSet, max_level: usize) -> Result<FockVector> {
    let nb = right_inverse_nq(space, kernels)?;
    nb.projector.apply(&free_solution(kernels, max_level)?)
}

/// `V = Σ_n (−1)^n (N̂_R^{-1}[K̂+Ĝ])^n · seed`, a finite sum.
pub fn lower_triangular_expansion(space: &IndexSpace, kernels: &KernelSet, max_level: usize, seed: Option<FockVector>) -> Result<SolveReport> {
    let (y, _) = triangular_raising(space, kernels)?;
    let (seed, choice) = match seed {
        Some(s) => (s, "P_N V supplied by the caller".to_string()),
        None => (projected_free_seed(space, kernels, max_level)?, "P_N V = P_N V(0)".to_string()),
    };
    let mut v = seed.clone();
    let mut counts = vec![0; max_level + 1];
    nonzero_levels(&seed, &mut counts);
    let mut term = seed;
    let mut n = 0;
    let mut increments = Vec::new();
    loop {
        term = y.apply(&term)?.scaled(-1.0);
        if term.norm() == 0.0 {
            break;
        }
        n += 1;
        increments.push(term.norm());
        nonzero_levels(&term, &mut counts);
        v.axpy(1.0, &term)?;
    }
    check_normalization(&mut v)?;
    let mut report = SolveReport::new(Method::Triangular, v, choice);
    report.series_terms_used = counts;
    report.structural_terms = Some((0..=max_level).map(|m| m / 2 + 1).collect());
    report.orders_used = n;
    report.increments = increments;
    report.residual_per_level = residual(&report.v, space, kernels)?;
    report.trusted_levels = max_level.checked_sub(2);
    Ok(report)
}

/// Which part of `|V⟩^(0)` pins the closed equation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assumption {
    /// `P_N P_{G_L^{-1}K}|V⟩ = P_N P_{G_L^{-1}K}|V⟩^(0)`.
    #[default]
    Projected,
    /// Symmetrized form `P_N Ŝ P_{G_L^{-1}K}|V⟩ = P_N Ŝ P_{G_L^{-1}K}|V⟩^(0)`.
    Symmetrized,
}

/// `Q_G = Ĝ Ĝ_L^{-1}`.
fn range_projector_g(kernels: &KernelSet, chi: Option<&[f64]>) -> Result<Op> {
    Ok(left_inverse_g(kernels, chi)?.projector)
}

/// Materialized max-norm of `K̂_R^{-1} Q_G N̂ P_N` on its trusted levels.
pub fn branching_term_norm(space: &IndexSpace, kernels: &KernelSet, max_level: usize, chi: Option<&[f64]>) -> Result<(f64, Option<usize>)> {
    let kinv = right_inverse_k(kernels)?.inverse;
    let nb = right_inverse_nq(space, kernels)?;
    let op = Op::product([kinv, range_projector_g(kernels, chi)?, nb.operator.clone(), nb.projector.clone()]);
    let top = op.trusted_top(max_level);
    let Some(t) = top else {
        return Ok((0.0, None));
    };
    let b = op.materialize(space.dim(), max_level, DEFAULT_BUDGET)?;
    Ok((b.max_abs_within(0..=t, 0..=max_level), top))
}

/// Solves the projected closed equation for `P_N|V⟩` and rebuilds `|V⟩`.
pub fn closed_equation_solve(space: &IndexSpace, kernels: &KernelSet, max_level: usize, chi: Option<&[f64]>, assumption: Assumption) -> Result<SolveReport> {
    let d = space.dim();
    let v0 = free_solution(kernels, max_level)?;
    if kernels.lambda == 0.0 {
        let mut report = SolveReport::new(Method::Closed, v0, "λ = 0: no interaction, V = V(0)".into());
        report.residual_per_level = residual(&report.v, space, kernels)?;
        return Ok(report);
    }
    let (y, nb) = triangular_raising(space, kernels)?;
    let kb = right_inverse_k(kernels)?;
    let gb = left_inverse_g(kernels, chi)?;
    let q_g = gb.projector.clone();
    let p_n = nb.projector.clone();
    let unfold = neumann_op(y.clone(), max_level);
    // I + K_R^{-1}(G + Q_G N), optionally with Ŝ in front of the correction.
    let mut correction = Op::product([kb.inverse.clone(), Op::plus(gb.operator.clone(), Op::product([q_g, nb.operator.clone()]))]);
    if assumption == Assumption::Symmetrized {
        correction = Op::product([Op::Symmetrizer, correction]);
    }
    let lhs = Op::product([p_n.clone(), Op::plus(Op::identity(d), correction), unfold.clone(), p_n.clone()]);
    // P_{G_L^{-1}K} = I − K_R^{-1}G · G_L^{-1}K.
    let p_gk = Op::minus(
        Op::identity(d),
        Op::product([kb.inverse.clone(), gb.operator.clone(), gb.inverse.clone(), kb.operator.clone()]),
    );
    let mut rhs_op = vec![p_n.clone()];
    if assumption == Assumption::Symmetrized {
        rhs_op.push(Op::Symmetrizer);
    }
    rhs_op.push(p_gk);
    let b = Op::product(rhs_op).apply(&v0)?;

    let top = lhs.trusted_top(max_level).ok_or(Error::SingularClosure { level: 0, nullity: 0 })?;
    let a = lhs.materialize(d, max_level, DEFAULT_BUDGET)?.to_dense();
    let rows = a.offsets_rows(d, top);
    let a_t = a.rows(0, rows).into_owned();
    let b_t = flatten(&b).rows(0, rows).into_owned();
    let u0 = flatten(&v0);
    let svd = a_t.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-12 * smax.max(1.0) * (a_t.nrows().max(a_t.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let nullity = a_t.ncols() - rank;
    let correction = svd
        .solve(&(&b_t - &a_t * &u0), tol)
        .map_err(|e| Error::SingularClosure { level: top, nullity: e.len() })?;
    let u = &u0 + correction;
    let misfit = (&a_t * &u - &b_t).amax();
    if misfit > 1e-9 * b_t.amax().max(1.0) {
        let level = first_bad_level(&(&a_t * &u - &b_t), d, 1e-9 * b_t.amax().max(1.0));
        return Err(Error::SingularClosure { level, nullity });
    }
    let w = p_n.apply(&unflatten(d, max_level, &u))?;
    let mut v = unfold.apply(&w)?;
    if assumption == Assumption::Symmetrized {
        v = v.symmetrize();
    }
    check_normalization(&mut v)?;
    let choice = format!(
        "P_N V solves the closed equation on levels 0..={top} (rank {rank} of {} unknowns); the remaining {nullity} directions are pinned to P_N V(0) by a minimum-norm correction",
        a_t.ncols()
    );
    let mut report = SolveReport::new(Method::Closed, v, choice);
    report.trusted_levels = Some(top.min(max_level.saturating_sub(2)));
    report.residual_per_level = residual(&report.v, space, kernels)?;
    if nullity > 0 {
        report.warnings.push(format!("closed equation leaves {nullity} directions undetermined"));
    }
    Ok(report)
}

trait RowCount {
    fn offsets_rows(&self, d: usize, top: usize) -> usize;
}

impl RowCount for DMatrix<f64> {
    fn offsets_rows(&self, d: usize, top: usize) -> usize {
        crate::fock::entry_count(d, top)
    }
}

fn first_bad_level(r: &DVector<f64>, d: usize, tol: f64) -> usize {
    let mut off = 0;
    let mut n = 0;
    loop {
        let w = d.pow(n as u32);
        if off + w > r.len() {
            return n;
        }
        if r.rows(off, w).amax() > tol {
            return n;
        }
        off += w;
        n += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
pub enum RationalForm {
    /// `(K̂ + Ĝ + λ(I − N̂_loc)^{-1})|V⟩ = 0`.
    #[default]
    #[serde(rename = "plain")]
    Plain,
    /// `(K̂ + Ĝ + λ(I − N̂_loc)^{-1} M̂_loc)|V⟩ = 0` with a diagonal `M̂_loc`.
    #[serde(rename = "weighted")]
    Weighted,
}

#[derive(Clone, Debug, Default)]
pub struct RationalOptions {
    pub form: RationalForm,
    pub symmetrized: bool,
    /// Overrides `M̂_loc` (default: identity, or `Σ_z M(z) n(z)` for the weighted form).
    pub m_loc: Option<OperatorExpr>,
}

/// Operators of the rational scheme at unit coupling.
pub struct RationalParts {
    pub n_loc: Op,
    pub m_loc: Op,
    /// `R` with `(I − N̂_loc)(K̂+Ĝ)·R = I − P₀`.
    pub r: Op,
}

pub fn rational_parts(space: &IndexSpace, kernels: &KernelSet, max_level: usize, opts: &RationalOptions) -> Result<RationalParts> {
    let d = space.dim();
    let unit = kernels.with_lambda(1.0);
    let nb = right_inverse_nq(space, &unit).map_err(|e| Error::SingularRationalForm(e.to_string()))?;
    // ((N_loc)_R^{-1} − I)·Y = I  ⇒  Y = −Σ_j ((N_loc)_R^{-1})^j.
    let y_hat = Op::Sum(vec![(-1.0, Op::Neumann { raising: Box::new(Op::Sum(vec![(-1.0, nb.inverse.clone())])), terms: max_level / 2 + 1 })]);
    let kg = right_inverse_k_plus_g(kernels, max_level, None).map_err(|e| Error::SingularRationalForm(e.to_string()))?;
    let r = Op::product([kg.inverse.clone(), nb.inverse.clone(), y_hat]);
    let m_loc = match (&opts.m_loc, opts.form) {
        (Some(m), _) => Op::from(m.clone()),
        (None, RationalForm::Plain) => Op::identity(d),
        (None, RationalForm::Weighted) => {
            let mut e = OperatorExpr::zero(d);
            for z in 0..space.base_len() {
                e = e.plus(kernels.m_diag[z], &number_operator(space, z))?;
            }
            Op::from(e)
        }
    };
    Ok(RationalParts { n_loc: nb.operator.clone(), m_loc, r })
}

/// `(I − N̂_loc)(K̂ + Ĝ) + λ M̂_loc`.
pub fn rational_operator(kernels: &KernelSet, parts: &RationalParts, lambda: f64) -> Result<Op> {
    let d = kernels.dim();
    let kg = Op::from(build_k(kernels).add(&build_g(kernels))?);
    let unit_minus_n = Op::minus(Op::identity(d), parts.n_loc.clone());
    Ok(Op::Sum(vec![(1.0, Op::product([unit_minus_n, kg])), (lambda, parts.m_loc.clone())]))
}

/// `V = Σ_j (−λ)^j (Ŝ? R M̂_loc)^j |V⟩^(0)`.
pub fn rational_solve(space: &IndexSpace, kernels: &KernelSet, max_level: usize, lambda: f64, opts: &RationalOptions) -> Result<SolveReport> {
    let parts = rational_parts(space, kernels, max_level, opts)?;
    let v0 = free_solution(kernels, max_level)?;
    let mut step = Op::product([parts.r.clone(), parts.m_loc.clone()]);
    if opts.symmetrized {
        step = Op::product([Op::Symmetrizer, step]);
    }
    let mut v = v0.clone();
    let mut counts = vec![0; max_level + 1];
    nonzero_levels(&v0, &mut counts);
    let mut term = v0;
    let mut j = 0;
    let mut increments = Vec::new();
    loop {
        term = step.apply(&term)?.scaled(-lambda);
        if term.norm() == 0.0 || j > max_level {
            break;
        }
        j += 1;
        increments.push(term.norm());
        nonzero_levels(&term, &mut counts);
        v.axpy(1.0, &term)?;
    }
    check_normalization(&mut v)?;
    let choice = if opts.symmetrized {
        "Ŝ P V = V(0), λ-independent".to_string()
    } else {
        "P V = V(0), λ-independent".to_string()
    };
    let mut report = SolveReport::new(Method::Rational, v, choice);
    report.series_terms_used = counts;
    report.orders_used = j;
    report.increments = increments;
    let op = rational_operator(kernels, &parts, lambda)?;
    let top = op.trusted_top(max_level);
    let r = op.apply(&report.v)?;
    report.residual_per_level = (0..=max_level)
        .map(|n| LevelResidual { level: n, max_abs: r.level_max_abs(n), trusted: top.is_some_and(|t| n <= t) })
        .collect();
    report.trusted_levels = top;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelDegree {
    pub level: usize,
    /// Smallest degree whose least-squares fit reproduces every component.
    pub degree: Option<usize>,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DegreeReport {
    pub levels: Vec<LevelDegree>,
    pub condition_number: f64,
    pub conditioning_warning: bool,
}

pub const DEGREE_TOL: f64 = 1e-10;

/// Fits each level component as a polynomial in `λ` over `grid`.
pub fn lambda_degree_check<F>(solve: F, grid: &[f64]) -> Result<DegreeReport>
where
    F: Fn(f64) -> Result<FockVector>,
{
    if grid.len() < 2 {
        return Err(Error::Config("λ grid needs at least two points".into()));
    }
    let sols: Vec<FockVector> = grid.iter().map(|&l| solve(l)).collect::<Result<_>>()?;
    let scale = grid.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let t: Vec<f64> = grid.iter().map(|x| x / scale).collect();
    let max_deg = grid.len() - 2;
    let full = DMatrix::from_fn(grid.len(), max_deg + 1, |i, k| t[i].powi(k as i32));
    let sv = full.clone().svd(false, false).singular_values;
    let condition_number = sv.max() / sv.min();
    let mut levels = Vec::new();
    for n in 0..=sols[0].max_level() {
        let width = sols[0].level(n).len();
        let data = DMatrix::from_fn(grid.len(), width, |i, j| sols[i].level(n)[j]);
        let mag = data.amax().max(1.0);
        let mut found = None;
        let mut last = f64::INFINITY;
        for deg in 0..=max_deg {
            let vand = full.columns(0, deg + 1).into_owned();
            let svd = vand.clone().svd(true, true);
            let coef = svd.solve(&data, 1e-14).map_err(|e| Error::Config(e.to_string()))?;
            let res = (&vand * coef - &data).amax();
            last = res;
            if res < DEGREE_TOL * mag {
                found = Some(deg);
                break;
            }
        }
        levels.push(LevelDegree { level: n, degree: found, residual: last });
    }
    Ok(DegreeReport { levels, condition_number, conditioning_warning: condition_number > 1e12 })
}
