//! Finite index space and model kernels.
//!
//! A label `x̃ = (α, u)` pairs a vector component `α ∈ 1..=A` with a base label
//! `u` (particle type, position and time point folded together). Labels are
//! flattened α-major: `label = (α - 1)·|U| + u`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct IndexSpace {
    components: usize,
    base: Vec<String>,
}

impl IndexSpace {
    pub fn new<S: Into<String>>(components: usize, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        if components < 1 {
            return Err(Error::InvalidComponentCount(components));
        }
        let base: Vec<String> = labels.into_iter().map(Into::into).collect();
        if base.is_empty() {
            return Err(Error::ShapeError("base label list is empty".into()));
        }
        let mut seen = HashSet::new();
        for l in &base {
            if !seen.insert(l.as_str()) {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        Ok(Self { components, base })
    }

    /// Uniform time grid `t0, t1, …` with `components` vector components.
    pub fn time_grid(components: usize, points: usize) -> Result<Self> {
        Self::new(components, (0..points).map(|t| format!("t{t}")))
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn base_len(&self) -> usize {
        self.base.len()
    }

    pub fn base_labels(&self) -> &[String] {
        &self.base
    }

    /// Total label count `d = A·|U|`.
    pub fn dim(&self) -> usize {
        self.components * self.base.len()
    }

    /// `alpha` is 1-based, `u` indexes the base label list.
    pub fn encode(&self, alpha: usize, u: usize) -> usize {
        assert!(alpha >= 1 && alpha <= self.components, "component {alpha} out of range");
        assert!(u < self.base.len(), "base label {u} out of range");
        (alpha - 1) * self.base.len() + u
    }

    pub fn decode(&self, label: usize) -> (usize, usize) {
        assert!(label < self.dim(), "label {label} out of range");
        (label / self.base.len() + 1, label % self.base.len())
    }

    pub fn describe(&self, label: usize) -> String {
        let (alpha, u) = self.decode(label);
        format!("({alpha},{})", self.base[u])
    }
}

/// Convenience wrapper matching the library's operation naming.
pub fn build_index_space<S: Into<String>>(components: usize, labels: impl IntoIterator<Item = S>) -> Result<IndexSpace> {
    IndexSpace::new(components, labels)
}

/// Numerical kernels of one model.
///
/// `k` is `d×d`, `g` has length `d`, `m` is the `|U|×|U|` interaction kernel
/// acting on base labels (components are contracted with the invariant
/// convention `Σ_α`). `green` satisfies `k·green = I` when present.
#[derive(Clone, Debug)]
pub struct KernelSet {
    pub k: DMatrix<f64>,
    pub g: DVector<f64>,
    pub m: DMatrix<f64>,
    pub m_diag: DVector<f64>,
    pub lambda: f64,
    pub q: f64,
    /// Maximum interaction degree; only the cubic family (3) is supported.
    pub degree: u32,
    pub green: Option<DMatrix<f64>>,
}

impl KernelSet {
    /// Assembles a kernel set and computes `M(z) = Σ_y M(z;y)` and, when `K`
    /// is invertible, its Green's function.
    pub fn new(space: &IndexSpace, k: DMatrix<f64>, g: DVector<f64>, m: DMatrix<f64>, lambda: f64, q: f64) -> Result<Self> {
        let d = space.dim();
        let u = space.base_len();
        if k.shape() != (d, d) {
            return Err(Error::ShapeError(format!("K is {:?}, expected ({d}, {d})", k.shape())));
        }
        if g.len() != d {
            return Err(Error::ShapeError(format!("G has length {}, expected {d}", g.len())));
        }
        if m.shape() != (u, u) {
            return Err(Error::ShapeError(format!("M is {:?}, expected ({u}, {u})", m.shape())));
        }
        let m_diag = row_sums(&m);
        let green = green_function(&k);
        Ok(Self {
            k,
            g,
            m,
            m_diag,
            lambda,
            q,
            degree: 3,
            green,
        })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn green(&self) -> Result<&DMatrix<f64>> {
        self.green.as_ref().ok_or(Error::MissingGreen)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn with_q(&self, q: f64) -> Self {
        Self { q, ..self.clone() }
    }

    pub fn with_source(&self, g: DVector<f64>) -> Self {
        Self { g, ..self.clone() }
    }

    /// `O(z) = −2q·M(z;z)/M(z) + q²·Σ_y M(z;y)/M(y)` per base label.
    pub fn deformation_shift(&self) -> Result<DVector<f64>> {
        let u = self.m.nrows();
        for z in 0..u {
            if self.m_diag[z] == 0.0 {
                return Err(Error::SingularInteraction { label: z });
            }
        }
        Ok(DVector::from_fn(u, |z, _| {
            let cross = -2.0 * self.q * self.m[(z, z)] / self.m_diag[z];
            let pair: f64 = (0..u).map(|y| self.m[(z, y)] / self.m_diag[y]).sum();
            cross + self.q * self.q * pair
        }))
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |z, _| m.row(z).iter().sum())
}

fn is_lower_triangular(k: &DMatrix<f64>) -> bool {
    (0..k.nrows()).all(|i| (i + 1..k.ncols()).all(|j| k[(i, j)] == 0.0))
}

/// Exact forward substitution for lower-triangular `K` keeps the structural
/// zeros of a retarded Green's function; other matrices go through LU.
fn green_function(k: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = k.nrows();
    if is_lower_triangular(k) {
        if (0..n).any(|i| k[(i, i)] == 0.0) {
            return None;
        }
        let mut inv = DMatrix::zeros(n, n);
        for col in 0..n {
            for row in col..n {
                let mut acc = if row == col { 1.0 } else { 0.0 };
                for j in col..row {
                    acc -= k[(row, j)] * inv[(j, col)];
                }
                inv[(row, col)] = acc / k[(row, row)];
            }
        }
        Some(inv)
    } else {
        k.clone().try_inverse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// First two rows act as identity on the initial data.
    #[default]
    Retarded,
    /// First two rows are left empty; `K` is singular.
    Free,
}

/// Time-grid oscillator `Φ̈ + ω²Φ + λ·M·Φ³ + G = 0` discretized with
/// retarded second differences.
#[derive(Clone, Debug)]
pub struct OscillatorParams {
    pub omega: f64,
    pub dt: f64,
    pub points: usize,
    pub lambda: f64,
    pub q: f64,
    /// Source vector `G`, one entry per time point. Rows 0 and 1 hold minus
    /// the initial displacements.
    pub forcing: Vec<f64>,
    /// Translation-invariant interaction profile `M(z;y) = lags[|z − y|]`.
    pub lags: Vec<f64>,
    pub boundary: Boundary,
}

impl OscillatorParams {
    pub fn new(omega: f64, dt: f64, points: usize, lambda: f64, q: f64, forcing: Vec<f64>) -> Self {
        Self {
            omega,
            dt,
            points,
            lambda,
            q,
            forcing,
            lags: vec![1.0],
            boundary: Boundary::Retarded,
        }
    }
}

pub fn build_oscillator_model(p: &OscillatorParams) -> Result<(IndexSpace, KernelSet)> {
    if p.points < 3 {
        return Err(Error::GridTooSmall(p.points));
    }
    if !(p.dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {}", p.dt)));
    }
    if p.forcing.len() != p.points {
        return Err(Error::ShapeError(format!(
            "forcing has length {}, expected {}",
            p.forcing.len(),
            p.points
        )));
    }
    let n = p.points;
    let space = IndexSpace::time_grid(1, n)?;
    let inv_dt2 = 1.0 / (p.dt * p.dt);
    let mut k = DMatrix::zeros(n, n);
    if p.boundary == Boundary::Retarded {
        k[(0, 0)] = 1.0;
        k[(1, 1)] = 1.0;
    }
    for t in 2..n {
        k[(t, t)] = inv_dt2 + p.omega * p.omega;
        k[(t, t - 1)] = -2.0 * inv_dt2;
        k[(t, t - 2)] = inv_dt2;
    }
    let m = DMatrix::from_fn(n, n, |z, y| p.lags.get(z.abs_diff(y)).copied().unwrap_or(0.0));
    let g = DVector::from_vec(p.forcing.clone());
    let kernels = KernelSet::new(&space, k, g, m, p.lambda, p.q)?;
    Ok((space, kernels))
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelReport {
    pub dim: usize,
    pub green_residual: Option<f64>,
    pub mdiag_residual: f64,
    pub zero_source_labels: Vec<usize>,
    pub singular_values: Vec<f64>,
    pub near_null_directions: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl KernelReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("labels: {}\n", self.dim));
        match self.green_residual {
            Some(r) => s.push_str(&format!("max |K·GreenK − I|: {r:.3e}\n")),
            None => s.push_str("GreenK: unavailable\n"),
        }
        s.push_str(&format!("max |M(z) − Σ_y M(z;y)|: {:.3e}\n", self.mdiag_residual));
        let smin = self.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        s.push_str(&format!("smallest singular value of K: {smin:.3e}\n"));
        if self.warnings.is_empty() {
            s.push_str("no warnings\n");
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}

const NEAR_NULL_RTOL: f64 = 1e-10;

pub fn validate_kernels(space: &IndexSpace, kernels: &KernelSet) -> Result<KernelReport> {
    let d = space.dim();
    let u = space.base_len();
    if kernels.k.shape() != (d, d) || kernels.g.len() != d || kernels.m.shape() != (u, u) {
        return Err(Error::ShapeError("kernel shapes do not match the index space".into()));
    }
    let mut warnings = Vec::new();
    let green_residual = kernels.green.as_ref().map(|gr| {
        let prod = &kernels.k * gr;
        (prod - DMatrix::<f64>::identity(d, d)).amax()
    });
    if let Some(r) = green_residual {
        if r > 1e-10 {
            warnings.push(format!("K·GreenK deviates from identity by {r:.3e}"));
        }
    } else {
        warnings.push("K is not invertible; no Green's function".into());
    }
    let mdiag_residual = (0..u)
        .map(|z| (kernels.m_diag[z] - kernels.m.row(z).iter().sum::<f64>()).abs())
        .fold(0.0, f64::max);
    if mdiag_residual > 1e-12 {
        warnings.push(format!("M(z) inconsistent with Σ_y M(z;y) by {mdiag_residual:.3e}"));
    }
    let zero_source_labels: Vec<usize> = (0..d).filter(|&i| kernels.g[i] == 0.0).collect();
    for &i in &zero_source_labels {
        warnings.push(format!("left inverse of Ĝ undefined at label {i}"));
    }
    for z in 0..u {
        if kernels.m_diag[z] == 0.0 {
            warnings.push(format!("M(z) vanishes at base label {z}; N̂ has no right inverse"));
        }
    }
    let svd = kernels.k.clone().svd(false, true);
    let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smax = singular_values.iter().cloned().fold(0.0, f64::max);
    let v_t = svd.v_t.expect("requested V^T");
    let mut near_null_directions = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= NEAR_NULL_RTOL * smax.max(1.0) {
            near_null_directions.push(v_t.row(i).iter().copied().collect::<Vec<_>>());
        }
    }
    if !near_null_directions.is_empty() {
        warnings.push(format!("K has {} near-null direction(s)", near_null_directions.len()));
    }
    singular_values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(KernelReport {
        dim: d,
        green_residual,
        mdiag_residual,
        zero_source_labels,
        singular_values,
        near_null_directions,
        warnings,
    })
}
