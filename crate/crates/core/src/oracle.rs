//! Brute-force reference: sample initial data, integrate trajectories, and
//! average products of field values. Also analytic references for the
//! linear case (Gaussian pairings, d'Alembert), marginal projectors and
//! hydrodynamic moments.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::fock::{CorrelationTable, FockVector, DEFAULT_BUDGET};
use crate::model::{IndexSpace, KernelSet};
use crate::op::Op;
use crate::{Error, Result};

/// Field magnitude treated as blow-up.
pub const BLOWUP: f64 = 1e8;

#[derive(Clone, Debug, PartialEq)]
pub enum EnsembleKind {
    Gaussian { mean: Vec<f64>, cov: DMatrix<f64> },
    /// Listed coordinates are fixed; the rest are Gaussian with the given
    /// moments, in coordinate order.
    HybridDelta { pinned: Vec<(usize, f64)>, mean: Vec<f64>, cov: DMatrix<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    pub samples: usize,
    pub seed: u64,
    /// Weights over time shifts `0, 1, …`.
    pub smearing: Option<Vec<f64>>,
}

impl EnsembleSpec {
    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>, samples: usize, seed: u64) -> Self {
        Self { kind: EnsembleKind::Gaussian { mean, cov }, samples, seed, smearing: None }
    }

    /// Every coordinate fixed: all samples coincide.
    pub fn pinned(values: &[f64], samples: usize, seed: u64) -> Self {
        Self {
            kind: EnsembleKind::HybridDelta {
                pinned: values.iter().copied().enumerate().collect(),
                mean: vec![],
                cov: DMatrix::zeros(0, 0),
            },
            samples,
            seed,
            smearing: None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            EnsembleKind::Gaussian { mean, .. } => mean.len(),
            EnsembleKind::HybridDelta { pinned, mean, .. } => pinned.len() + mean.len(),
        }
    }

    /// Full mean and covariance; pinned coordinates have zero variance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match &self.kind {
            EnsembleKind::Gaussian { mean, cov } => {
                check_cov(cov, mean.len())?;
                Ok((DVector::from_column_slice(mean), cov.clone()))
            }
            EnsembleKind::HybridDelta { pinned, mean, cov } => {
                check_cov(cov, mean.len())?;
                let n = self.dim();
                let mut is_pinned = vec![None; n];
                for &(i, v) in pinned {
                    if i >= n || is_pinned[i].is_some() {
                        return Err(Error::Config(format!("pinned coordinate {i} is out of range or repeated")));
                    }
                    is_pinned[i] = Some(v);
                }
                let free: Vec<usize> = (0..n).filter(|&i| is_pinned[i].is_none()).collect();
                let mut mu = DVector::zeros(n);
                let mut c = DMatrix::zeros(n, n);
                for (i, p) in is_pinned.iter().enumerate() {
                    if let Some(v) = p {
                        mu[i] = *v;
                    }
                }
                for (a, &i) in free.iter().enumerate() {
                    mu[i] = mean[a];
                    for (b, &j) in free.iter().enumerate() {
                        c[(i, j)] = cov[(a, b)];
                    }
                }
                Ok((mu, c))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(w) = &self.smearing {
            if w.is_empty() || w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::NotADistribution("smearing weights must be nonnegative and non-empty".into()));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::WeightNotNormalized(s));
            }
        }
        Ok(())
    }

    fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        let (mean, cov) = self.moments()?;
        let n = mean.len();
        // Factor only the Gaussian block so pinned coordinates stay exact.
        let free: Vec<usize> = match &self.kind {
            EnsembleKind::Gaussian { .. } => (0..n).collect(),
            EnsembleKind::HybridDelta { pinned, .. } => (0..n).filter(|i| !pinned.iter().any(|(j, _)| j == i)).collect(),
        };
        let sub = DMatrix::from_fn(free.len(), free.len(), |a, b| cov[(free[a], free[b])]);
        let mut factor = DMatrix::zeros(n, 0);
        if free.is_empty() {
            return Ok(Sampler { mean, factor, seed: self.seed });
        }
        let eig = sub.symmetric_eigen();
        let cols: Vec<usize> = (0..free.len()).filter(|&j| eig.eigenvalues[j] > 0.0).collect();
        factor = DMatrix::zeros(n, cols.len());
        for (a, &i) in free.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                factor[(i, c)] = eig.eigenvectors[(a, j)] * eig.eigenvalues[j].sqrt();
            }
        }
        Ok(Sampler { mean, factor, seed: self.seed })
    }
}

fn check_cov(cov: &DMatrix<f64>, n: usize) -> Result<()> {
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::ShapeError(format!("covariance is {}x{}, expected {n}x{n}", cov.nrows(), cov.ncols())));
    }
    let scale = cov.amax().max(1.0);
    if (cov - cov.transpose()).amax() > 1e-12 * scale {
        return Err(Error::NotADistribution("covariance is not symmetric".into()));
    }
    if n > 0 {
        let min = cov.clone().symmetric_eigen().eigenvalues.min();
        if min < -1e-10 * scale {
            return Err(Error::NotADistribution(format!("covariance has negative eigenvalue {min:e}")));
        }
    }
    Ok(())
}

struct Sampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
    seed: u64,
}

impl Sampler {
    /// Sample `i` uses its own stream of the master seed.
    fn draw(&self, i: usize) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        let z = DVector::from_fn(self.factor.ncols(), |_, _| StandardNormal.sample(&mut rng));
        &self.mean + &self.factor * z
    }
}

/// Sequential solve of the discretized model rows `KΦ + λ M_diag Φ³ + G = 0`
/// for a lower-triangular `K`. The first `boundary_rows` rows get an additive
/// offset `−y_r`, so a pinned zero offset reproduces the model exactly.
#[derive(Clone, Debug)]
pub struct ModelScheme {
    pub space: IndexSpace,
    pub kernels: KernelSet,
    pub boundary_rows: usize,
}

/// Independent anharmonic oscillators `Φ̈ = −ω²Φ − λ|Φ|²Φ + f`, one per site,
/// integrated with velocity Verlet. Coordinates: positions then velocities,
/// each component-major.
#[derive(Clone, Debug)]
pub struct OscillatorDynamics {
    pub omega: f64,
    pub lambda: f64,
    pub dt: f64,
    /// Integration steps between recorded points.
    pub stride: usize,
    pub points: usize,
    pub sites: usize,
    pub components: usize,
    /// Constant force per component.
    pub forcing: Vec<f64>,
}

/// 1-D periodic wave equation `Φ_tt = a²Φ_xx` on `[0, length)`, leapfrog.
/// Coordinates: initial field then initial velocity.
#[derive(Clone, Debug)]
pub struct WaveDynamics {
    pub points: usize,
    pub length: f64,
    pub speed: f64,
    pub cfl: f64,
    pub stride: usize,
    pub records: usize,
}

impl WaveDynamics {
    pub fn dx(&self) -> f64 {
        self.length / self.points as f64
    }

    pub fn dt(&self) -> f64 {
        self.cfl * self.dx() / self.speed
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.records).map(|k| (k * self.stride) as f64 * self.dt()).collect()
    }
}

#[derive(Clone, Debug)]
pub enum Dynamics {
    ModelScheme(ModelScheme),
    Oscillator(OscillatorDynamics),
    Wave(WaveDynamics),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntegratorMeta {
    pub scheme: String,
    pub dt: f64,
    pub steps: usize,
}

/// Recorded field values, `samples × labels`, labels in the codec order of
/// [`Dynamics::index_space`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub samples: usize,
    pub labels: usize,
    pub positions: Vec<f64>,
    pub velocities: Option<Vec<f64>>,
    pub components: usize,
    pub sites: usize,
    pub times: Vec<f64>,
    pub meta: IntegratorMeta,
}

impl TrajectorySet {
    pub fn sample(&self, s: usize) -> &[f64] {
        &self.positions[s * self.labels..(s + 1) * self.labels]
    }

    pub fn velocity(&self, s: usize) -> Option<&[f64]> {
        self.velocities.as_ref().map(|v| &v[s * self.labels..(s + 1) * self.labels])
    }

    pub fn points(&self) -> usize {
        self.times.len()
    }

    /// Label of `(alpha, site, t)`, `alpha` 1-based.
    pub fn label(&self, alpha: usize, site: usize, t: usize) -> usize {
        ((alpha - 1) * self.sites + site) * self.points() + t
    }

    /// `(alpha, site, t)` of a label.
    pub fn split(&self, label: usize) -> (usize, usize, usize) {
        let t = label % self.points();
        let rest = label / self.points();
        (rest / self.sites + 1, rest % self.sites, t)
    }
}

impl Dynamics {
    /// Length of the initial-data vector an ensemble must supply.
    pub fn coordinate_dim(&self) -> usize {
        match self {
            Dynamics::ModelScheme(m) => m.boundary_rows,
            Dynamics::Oscillator(o) => 2 * o.sites * o.components,
            Dynamics::Wave(w) => 2 * w.points,
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Dynamics::ModelScheme(m) => m.kernels.lambda,
            Dynamics::Oscillator(o) => o.lambda,
            Dynamics::Wave(_) => 0.0,
        }
    }

    pub fn index_space(&self) -> Result<IndexSpace> {
        match self {
            Dynamics::ModelScheme(m) => Ok(m.space.clone()),
            Dynamics::Oscillator(o) => site_time_space(o.components, o.sites, o.points),
            Dynamics::Wave(w) => site_time_space(1, w.points, w.records),
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            Dynamics::ModelScheme(m) => {
                let k = &m.kernels.k;
                if m.space.components() != 1 {
                    return Err(Error::UnsupportedDynamics("the sequential model scheme needs a single component".into()));
                }
                if m.kernels.q != 0.0 {
                    return Err(Error::UnsupportedDynamics("the sequential model scheme needs q = 0".into()));
                }
                if m.boundary_rows > k.nrows() {
                    return Err(Error::Config("more boundary rows than labels".into()));
                }
                for i in 0..k.nrows() {
                    if k[(i, i)] == 0.0 || (i + 1..k.ncols()).any(|j| k[(i, j)] != 0.0) {
                        return Err(Error::UnsupportedDynamics("K must be lower triangular with a nonzero diagonal".into()));
                    }
                }
                Ok(())
            }
            Dynamics::Oscillator(o) => {
                if o.forcing.len() != o.components {
                    return Err(Error::ShapeError(format!("forcing has length {}, expected {}", o.forcing.len(), o.components)));
                }
                if o.points == 0 || o.stride == 0 || o.sites == 0 || o.components == 0 || !(o.dt > 0.0) {
                    return Err(Error::Config("oscillator grid, stride, sites, components and dt must be positive".into()));
                }
                Ok(())
            }
            Dynamics::Wave(w) => {
                if w.points < 3 || w.records == 0 || w.stride == 0 || !(w.speed > 0.0) || !(w.cfl > 0.0 && w.cfl <= 1.0) {
                    return Err(Error::Config("wave needs ≥ 3 points, positive speed, records, stride and 0 < cfl ≤ 1".into()));
                }
                Ok(())
            }
        }
    }

    /// Integrates one initial-data vector.
    pub fn run(&self, y: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        if y.len() != self.coordinate_dim() {
            return Err(Error::ShapeError(format!("initial data has length {}, expected {}", y.len(), self.coordinate_dim())));
        }
        let out = match self {
            Dynamics::ModelScheme(m) => (run_model(m, y)?, None),
            Dynamics::Oscillator(o) => {
                let (x, v) = run_oscillator(o, y);
                (x, Some(v))
            }
            Dynamics::Wave(w) => (run_wave(w, y), None),
        };
        if out.0.iter().any(|x| !x.is_finite() || x.abs() > BLOWUP) {
            return Err(Error::TrajectoryDiverged { sample: 0 });
        }
        Ok(out)
    }

    fn meta(&self) -> IntegratorMeta {
        match self {
            Dynamics::ModelScheme(m) => IntegratorMeta { scheme: "model-rows".into(), dt: 0.0, steps: m.kernels.dim() },
            Dynamics::Oscillator(o) => IntegratorMeta { scheme: "velocity-verlet".into(), dt: o.dt, steps: (o.points - 1) * o.stride },
            Dynamics::Wave(w) => IntegratorMeta { scheme: "leapfrog".into(), dt: w.dt(), steps: (w.records - 1) * w.stride },
        }
    }

    fn times(&self) -> Vec<f64> {
        match self {
            Dynamics::ModelScheme(m) => (0..m.space.base_len()).map(|t| t as f64).collect(),
            Dynamics::Oscillator(o) => (0..o.points).map(|k| (k * o.stride) as f64 * o.dt).collect(),
            Dynamics::Wave(w) => w.times(),
        }
    }

    fn layout(&self) -> (usize, usize) {
        match self {
            Dynamics::ModelScheme(_) => (1, 1),
            Dynamics::Oscillator(o) => (o.components, o.sites),
            Dynamics::Wave(w) => (1, w.points),
        }
    }
}

fn site_time_space(components: usize, sites: usize, points: usize) -> Result<IndexSpace> {
    if sites == 1 {
        return IndexSpace::time_grid(components, points);
    }
    IndexSpace::new(components, (0..sites).flat_map(|s| (0..points).map(move |t| format!("s{s}t{t}"))))
}

/// Root of `a·x + b·x³ + c = 0` nearest the linear guess, by Newton.
fn cubic_root(a: f64, b: f64, c: f64) -> Option<f64> {
    let mut x = -c / a;
    if b == 0.0 {
        return Some(x);
    }
    for _ in 0..100 {
        let f = a * x + b * x * x * x + c;
        let df = a + 3.0 * b * x * x;
        if df == 0.0 {
            return None;
        }
        let step = f / df;
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1e-300) {
            return Some(x);
        }
    }
    let f = a * x + b * x * x * x + c;
    (f.abs() <= 1e-12 * c.abs().max(1.0)).then_some(x)
}

fn run_model(m: &ModelScheme, y: &[f64]) -> Result<Vec<f64>> {
    let k = &m.kernels;
    let n = k.dim();
    let mut phi = vec![0.0; n];
    for t in 0..n {
        let mut c = k.g[t];
        for s in 0..t {
            c += k.k[(t, s)] * phi[s];
        }
        if t < m.boundary_rows {
            c -= y[t];
        }
        phi[t] = cubic_root(k.k[(t, t)], k.lambda * k.m_diag[t], c).ok_or(Error::TrajectoryDiverged { sample: 0 })?;
    }
    Ok(phi)
}

fn run_oscillator(o: &OscillatorDynamics, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (a, s, p) = (o.components, o.sites, o.points);
    let n = a * s;
    let mut x = y[..n].to_vec();
    let mut v = y[n..].to_vec();
    let accel = |x: &[f64], out: &mut [f64]| {
        for site in 0..s {
            let r2: f64 = (0..a).map(|al| x[al * s + site].powi(2)).sum();
            for al in 0..a {
                let i = al * s + site;
                out[i] = -o.omega * o.omega * x[i] - o.lambda * r2 * x[i] + o.forcing[al];
            }
        }
    };
    let mut acc = vec![0.0; n];
    accel(&x, &mut acc);
    let mut xs = vec![0.0; n * p];
    let mut vs = vec![0.0; n * p];
    let dt = o.dt;
    for k in 0..p {
        if k > 0 {
            for _ in 0..o.stride {
                for i in 0..n {
                    v[i] += 0.5 * dt * acc[i];
                    x[i] += dt * v[i];
                }
                accel(&x, &mut acc);
                for i in 0..n {
                    v[i] += 0.5 * dt * acc[i];
                }
            }
        }
        for i in 0..n {
            xs[i * p + k] = x[i];
            vs[i * p + k] = v[i];
        }
    }
    (xs, vs)
}

fn run_wave(w: &WaveDynamics, y: &[f64]) -> Vec<f64> {
    let n = w.points;
    let c2 = w.cfl * w.cfl;
    let lap = |u: &[f64], i: usize| u[(i + n - 1) % n] - 2.0 * u[i] + u[(i + 1) % n];
    let mut prev = y[..n].to_vec();
    let vel = &y[n..];
    let dt = w.dt();
    let mut cur: Vec<f64> = (0..n).map(|i| prev[i] + dt * vel[i] + 0.5 * c2 * lap(&prev, i)).collect();
    let mut out = vec![0.0; n * w.records];
    // `prev` holds step 0 and `cur` step 1; `step` indexes `prev`.
    let mut step = 0;
    for k in 0..w.records {
        let target = k * w.stride;
        while step < target {
            let next: Vec<f64> = (0..n).map(|i| 2.0 * cur[i] - prev[i] + c2 * lap(&cur, i)).collect();
            prev = std::mem::replace(&mut cur, next);
            step += 1;
        }
        for i in 0..n {
            out[i * w.records + k] = prev[i];
        }
    }
    out
}

/// Samples the ensemble and integrates every sample. Independent of the
/// rayon worker count.
pub fn simulate(dynamics: &Dynamics, ensemble: &EnsembleSpec) -> Result<TrajectorySet> {
    dynamics.check()?;
    if ensemble.dim() != dynamics.coordinate_dim() {
        return Err(Error::ShapeError(format!(
            "ensemble has {} coordinates, dynamics needs {}",
            ensemble.dim(),
            dynamics.coordinate_dim()
        )));
    }
    let sampler = ensemble.sampler()?;
    let runs: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = (0..ensemble.samples)
        .into_par_iter()
        .map(|i| {
            dynamics.run(sampler.draw(i).as_slice()).map_err(|e| match e {
                Error::TrajectoryDiverged { .. } => Error::TrajectoryDiverged { sample: i },
                e => e,
            })
        })
        .collect();
    let (components, sites) = dynamics.layout();
    let times = dynamics.times();
    let labels = components * sites * times.len();
    let mut positions = Vec::with_capacity(labels * ensemble.samples);
    let mut velocities: Option<Vec<f64>> = None;
    for r in runs {
        let (x, v) = r?;
        positions.extend_from_slice(&x);
        if let Some(v) = v {
            velocities.get_or_insert_with(Vec::new).extend_from_slice(&v);
        }
    }
    Ok(TrajectorySet { samples: ensemble.samples, labels, positions, velocities, components, sites, times, meta: dynamics.meta() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Per-sample values are reduced in fixed-size chunks so the result does not
/// depend on the worker count.
const CHUNK: usize = 1024;

/// Mean and standard error from sums of `x − shift`. For a mean the
/// jackknife error equals `s/√n`.
fn mean_stderr_shifted(n: usize, shift: f64, sum: f64, sumsq: f64) -> Estimate {
    let nf = n as f64;
    let m = sum / nf;
    let var = if n > 1 { ((sumsq - nf * m * m) / (nf - 1.0)).max(0.0) } else { 0.0 };
    Estimate { value: shift + m, stderr: (var / nf).sqrt() }
}

#[cfg(test)]
fn mean_stderr(n: usize, sum: f64, sumsq: f64) -> Estimate {
    mean_stderr_shifted(n, 0.0, sum, sumsq)
}

/// Leave-one-out jackknife error of the sample mean.
pub fn jackknife_stderr(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = values.iter().sum();
    let loo: Vec<f64> = values.iter().map(|x| (total - x) / (n - 1) as f64).collect();
    let m = loo.iter().sum::<f64>() / n as f64;
    ((n - 1) as f64 / n as f64 * loo.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sqrt()
}

/// Per-sample vectors reduced chunk by chunk, relative to sample 0 to avoid
/// cancellation in the variance.
struct Moments {
    samples: usize,
    shift: Vec<f64>,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl Moments {
    fn estimate(&self, j: usize) -> Estimate {
        mean_stderr_shifted(self.samples, self.shift[j], self.sum[j], self.sumsq[j])
    }
}

fn reduce_samples<F>(samples: usize, width: usize, per_sample: F) -> Moments
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let mut shift = vec![0.0; width];
    if samples > 0 {
        per_sample(0, &mut shift);
    }
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = vec![0.0; width];
            let mut q = vec![0.0; width];
            let mut buf = vec![0.0; width];
            for i in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                per_sample(i, &mut buf);
                for j in 0..width {
                    let x = buf[j] - shift[j];
                    s[j] += x;
                    q[j] += x * x;
                }
            }
            (s, q)
        })
        .collect();
    let mut sum = vec![0.0; width];
    let mut sumsq = vec![0.0; width];
    for (cs, cq) in chunks {
        for j in 0..width {
            sum[j] += cs[j];
            sumsq[j] += cq[j];
        }
    }
    Moments { samples, shift, sum, sumsq }
}

/// Nondecreasing words of length `0..=max_order` over `0..labels`, each with
/// the index of its prefix.
fn multisets(labels: usize, max_order: usize) -> Vec<(Vec<usize>, usize)> {
    let mut out = vec![(Vec::new(), 0)];
    let mut start = 0;
    for _ in 0..max_order {
        let end = out.len();
        for p in start..end {
            let lo = out[p].0.last().copied().unwrap_or(0);
            for x in lo..labels {
                let mut w = out[p].0.clone();
                w.push(x);
                out.push((w, p));
            }
        }
        start = end;
    }
    out
}

/// Ensemble averages of field products, keyed by sorted word.
#[derive(Clone, Debug, PartialEq)]
pub struct MtcfTable {
    pub labels: usize,
    pub max_order: usize,
    pub samples: usize,
    pub entries: BTreeMap<Vec<usize>, Estimate>,
}

impl MtcfTable {
    /// Estimate of any word; products commute, so the word is sorted first.
    pub fn get(&self, word: &[usize]) -> Option<Estimate> {
        let mut w = word.to_vec();
        w.sort_unstable();
        self.entries.get(&w).copied()
    }

    /// Values and standard errors as generating vectors up to `max_level`.
    pub fn to_fock(&self, max_level: usize) -> Result<(FockVector, FockVector)> {
        if max_level > self.max_order {
            return Err(Error::LevelOutOfRange { level: max_level, max: self.max_order });
        }
        let d = self.labels;
        let mut v = FockVector::vacuum(d, max_level);
        let mut se = FockVector::zeros(d, max_level);
        for n in 1..=max_level {
            let vals = v.level_mut(n);
            let mut errs = vec![0.0; vals.len()];
            for (idx, slot) in vals.iter_mut().enumerate() {
                let e = self.get(&crate::fock::word_at(d, n, idx)).expect("complete table");
                *slot = e.value;
                errs[idx] = e.stderr;
            }
            se.level_mut(n).copy_from_slice(&errs);
        }
        Ok((v, se))
    }

    /// All orderings of every word, as consumed by
    /// [`crate::fock::assemble_from_correlations`].
    pub fn correlation_table(&self) -> CorrelationTable {
        let (v, _) = self.to_fock(self.max_order).expect("own order");
        let mut t = CorrelationTable::new();
        for n in 0..=self.max_order {
            for (idx, &x) in v.level(n).iter().enumerate() {
                t.insert(crate::fock::word_at(self.labels, n, idx), x);
            }
        }
        t
    }

    /// `word,value,stderr` with labels rendered through `space`.
    pub fn to_csv(&self, space: &IndexSpace) -> String {
        let mut s = String::from("word,value,stderr\n");
        for (w, e) in &self.entries {
            let word: Vec<String> = w.iter().map(|&x| space.describe(x)).collect();
            s.push_str(&format!("\"{}\",{:e},{:e}\n", word.join(" "), e.value, e.stderr));
        }
        s
    }
}

/// Sample means of `Π Φ(x_i)` over all words up to `max_order`, optionally
/// smeared over time shifts with weights `W[w]` (renormalized over the shifts
/// that stay on the grid).
pub fn estimate_mtcf(traj: &TrajectorySet, max_order: usize, smearing: Option<&[f64]>) -> Result<MtcfTable> {
    if traj.samples < 2 {
        return Err(Error::Config("at least two samples are needed for standard errors".into()));
    }
    if let Some(w) = smearing {
        let s: f64 = w.iter().sum();
        if w.iter().any(|&x| x < 0.0) || (s - 1.0).abs() > 1e-12 {
            return Err(Error::WeightNotNormalized(s));
        }
    }
    crate::fock::check_budget(traj.labels, max_order, DEFAULT_BUDGET)?;
    let words = multisets(traj.labels, max_order);
    let width = words.len();
    let min_t: Vec<usize> = words.iter().map(|(w, _)| w.iter().map(|&x| traj.split(x).2).min().unwrap_or(usize::MAX)).collect();
    let mom = reduce_samples(traj.samples, width, |i, out| {
        let x = traj.sample(i);
        match smearing {
            None => products(&words, |l| x[l], out),
            Some(weights) => {
                let mut acc = vec![0.0; width];
                let mut norm = vec![0.0; width];
                let mut prod = vec![0.0; width];
                for (shift, &wt) in weights.iter().enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    products(&words, |l| if traj.split(l).2 >= shift { x[l - shift] } else { 0.0 }, &mut prod);
                    for j in 0..width {
                        if min_t[j] >= shift {
                            acc[j] += wt * prod[j];
                            norm[j] += wt;
                        }
                    }
                }
                for j in 0..width {
                    out[j] = if norm[j] > 0.0 { acc[j] / norm[j] } else { f64::NAN };
                }
            }
        }
    });
    let entries = words
        .iter()
        .enumerate()
        .map(|(j, (w, _))| (w.clone(), mom.estimate(j)))
        .collect();
    Ok(MtcfTable { labels: traj.labels, max_order, samples: traj.samples, entries })
}

fn products(words: &[(Vec<usize>, usize)], x: impl Fn(usize) -> f64, out: &mut [f64]) {
    out[0] = 1.0;
    for j in 1..words.len() {
        let (w, p) = &words[j];
        out[j] = out[*p] * x(*w.last().unwrap());
    }
}

/// `Φ = offset + map·y` for dynamics that are linear in the initial data.
#[derive(Clone, Debug)]
pub struct LinearResponse {
    pub offset: DVector<f64>,
    pub map: DMatrix<f64>,
}

pub fn linear_response(dynamics: &Dynamics) -> Result<LinearResponse> {
    if dynamics.lambda() != 0.0 {
        return Err(Error::UnsupportedDynamics("Gaussian moments need λ = 0".into()));
    }
    dynamics.check()?;
    let n = dynamics.coordinate_dim();
    let offset = DVector::from_vec(dynamics.run(&vec![0.0; n])?.0);
    let cols: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            dynamics.run(&e).map(|(x, _)| DVector::from_vec(x) - &offset)
        })
        .collect::<Result<_>>()?;
    let map = DMatrix::from_columns(&cols);
    Ok(LinearResponse { offset, map })
}

/// Highest order for which pairings are enumerated.
pub const MAX_PAIRING_ORDER: usize = 8;

/// `E[Π (μ_i + X_i)]` for centered Gaussian `X` with covariance `cov`.
fn gaussian_moment(word: &[usize], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let Some((&first, rest)) = word.split_first() else {
        return 1.0;
    };
    let mut total = mean[first] * gaussian_moment(rest, mean, cov);
    for j in 0..rest.len() {
        let c = cov[(first, rest[j])];
        if c != 0.0 {
            let mut others = rest.to_vec();
            others.remove(j);
            total += c * gaussian_moment(&others, mean, cov);
        }
    }
    total
}

/// Exact moments of the linearly propagated Gaussian field, by pairing
/// enumeration, keyed by sorted word.
pub fn gaussian_free_moments(dynamics: &Dynamics, ensemble: &EnsembleSpec, max_order: usize) -> Result<BTreeMap<Vec<usize>, f64>> {
    if max_order > MAX_PAIRING_ORDER {
        return Err(Error::CombinatorialBudget(max_order));
    }
    let lr = linear_response(dynamics)?;
    let (mu, c) = ensemble.moments()?;
    if mu.len() != lr.map.ncols() {
        return Err(Error::ShapeError(format!("ensemble has {} coordinates, dynamics needs {}", mu.len(), lr.map.ncols())));
    }
    let mean = &lr.offset + &lr.map * mu;
    let cov = &lr.map * c * lr.map.transpose();
    Ok(multisets(lr.offset.len(), max_order).into_iter().map(|(w, _)| {
        let v = gaussian_moment(&w, &mean, &cov);
        (w, v)
    }).collect())
}

/// Exact evolution of band-limited periodic initial data: `points × records`.
pub fn dalembert_field(w: &WaveDynamics, phi0: &[f64], vel0: &[f64]) -> DMatrix<f64> {
    let n = w.points;
    let times = w.times();
    let tau = std::f64::consts::TAU;
    let dft = |f: &[f64]| -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &x) in f.iter().enumerate() {
                    let a = -tau * (k * j) as f64 / n as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                (re, im)
            })
            .collect()
    };
    let fh = dft(phi0);
    let gh = dft(vel0);
    DMatrix::from_fn(n, times.len(), |j, ti| {
        let t = times[ti];
        let mut acc = 0.0;
        for k in 0..n {
            let kk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            let kappa = tau * kk / w.length;
            let om = w.speed * kappa.abs();
            let s = if om == 0.0 { t } else { (om * t).sin() / om };
            let (re, im) = (fh[k].0 * (om * t).cos() + gh[k].0 * s, fh[k].1 * (om * t).cos() + gh[k].1 * s);
            let a = tau * (k * j) as f64 / n as f64;
            acc += re * a.cos() - im * a.sin();
        }
        acc / n as f64
    })
}

#[derive(Clone, Debug)]
pub struct WaveAverage {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    /// d'Alembert of the ensemble's sample-mean initial data.
    pub analytic: DMatrix<f64>,
    /// d'Alembert of the nominal mean initial data.
    pub nominal: DMatrix<f64>,
    /// Sample mean of the simulated fields.
    pub simulated: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    /// `max |simulated − analytic|`, integrator error only.
    pub max_diff: f64,
    /// `max |simulated − nominal|`, includes sampling error.
    pub max_diff_nominal: f64,
}

/// Mean wave field two ways: d'Alembert applied to mean initial data, and
/// simulation averaged over the ensemble.
pub fn dalembert_average(w: &WaveDynamics, ensemble: &EnsembleSpec) -> Result<WaveAverage> {
    let dynamics = Dynamics::Wave(w.clone());
    let traj = simulate(&dynamics, ensemble)?;
    let sampler = ensemble.sampler()?;
    let n = w.points;
    let mut y_mean = DVector::zeros(2 * n);
    for i in 0..ensemble.samples {
        y_mean += sampler.draw(i);
    }
    y_mean /= ensemble.samples as f64;
    let analytic = dalembert_field(w, &y_mean.as_slice()[..n], &y_mean.as_slice()[n..]);
    let (mu, _) = ensemble.moments()?;
    let nominal = dalembert_field(w, &mu.as_slice()[..n], &mu.as_slice()[n..]);
    let r = w.records;
    let mom = reduce_samples(traj.samples, n * r, |i, out| out.copy_from_slice(traj.sample(i)));
    let est: Vec<Estimate> = (0..n * r).map(|j| mom.estimate(j)).collect();
    let simulated = DMatrix::from_fn(n, r, |j, k| est[j * r + k].value);
    let stderr = DMatrix::from_fn(n, r, |j, k| est[j * r + k].stderr);
    let max_diff = (&simulated - &analytic).amax();
    let max_diff_nominal = (&simulated - &nominal).amax();
    Ok(WaveAverage {
        times: w.times(),
        x: (0..n).map(|j| j as f64 * w.dx()).collect(),
        analytic,
        nominal,
        simulated,
        stderr,
        max_diff,
        max_diff_nominal,
    })
}

/// Discrete probability distribution over a product of finite coordinates,
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ProbabilityTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(Error::ShapeError(format!("shape {shape:?} does not match {} entries", data.len())));
        }
        if let Some(x) = data.iter().find(|x| !(**x >= 0.0)) {
            return Err(Error::NotADistribution(format!("entry {x} is negative or not a number")));
        }
        let s: f64 = data.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::NotADistribution(format!("entries sum to {s}")));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_keep(f: &ProbabilityTensor, keep: usize) -> Result<()> {
    if keep > f.shape.len() {
        return Err(Error::ShapeError(format!("cannot keep {keep} of {} coordinates", f.shape.len())));
    }
    Ok(())
}

/// Distribution of the first `keep` coordinates.
pub fn marginals(f: &ProbabilityTensor, keep: usize) -> Result<ProbabilityTensor> {
    check_keep(f, keep)?;
    let outer: usize = f.shape[..keep].iter().product();
    let inner: usize = f.shape[keep..].iter().product();
    let data = (0..outer).map(|i| f.data[i * inner..(i + 1) * inner].iter().sum()).collect();
    Ok(ProbabilityTensor { shape: f.shape[..keep].to_vec(), data })
}

/// Projector onto the first `keep` coordinates, full shape: the marginal
/// spread uniformly (divided by the dropped volume) over the dropped ones.
pub fn project(f: &ProbabilityTensor, keep: usize) -> Result<ProbabilityTensor> {
    let m = marginals(f, keep)?;
    let inner: usize = f.shape[keep..].iter().product();
    let data = m.data.iter().flat_map(|&p| std::iter::repeat_n(p / inner as f64, inner)).collect();
    Ok(ProbabilityTensor { shape: f.shape.clone(), data })
}

#[derive(Clone, Debug, Serialize)]
pub struct HydroMoments {
    pub times: Vec<f64>,
    /// `[time][component]`: moment of the empirical velocity field.
    pub route_a: Vec<Vec<Estimate>>,
    /// `[time][component]`: sum over particles of equal-time correlations.
    pub route_b: Vec<Vec<Estimate>>,
}

impl HydroMoments {
    /// Largest `|a − b| / √(se_a² + se_b²)`; differences with zero error
    /// count only if nonzero.
    pub fn max_discrepancy(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (ra, rb) in self.route_a.iter().zip(&self.route_b) {
            for (a, b) in ra.iter().zip(rb) {
                let diff = (a.value - b.value).abs();
                let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
                worst = worst.max(if se > 0.0 { diff / se } else if diff > 0.0 { f64::INFINITY } else { 0.0 });
            }
        }
        worst
    }
}

/// `∫ x^k y^l z^m ρu dx` for particle trajectories: components are spatial
/// directions, sites are particles.
pub fn hydro_moments(traj: &TrajectorySet, k: u32, l: u32, m: u32) -> Result<HydroMoments> {
    if traj.velocities.is_none() {
        return Err(Error::UnsupportedDynamics("hydrodynamic moments need velocities".into()));
    }
    let powers = [k, l, m];
    if powers.iter().enumerate().any(|(i, &p)| p > 0 && i >= traj.components) {
        return Err(Error::Config(format!("only {} spatial components available", traj.components)));
    }
    let a = traj.components;
    let p = traj.points();
    let weight = |x: &[f64], site: usize, t: usize| -> f64 {
        (0..a.min(3)).map(|al| x[traj.label(al + 1, site, t)].powi(powers[al] as i32)).product()
    };
    // Route A: one value per sample, summed over particles.
    let ma = reduce_samples(traj.samples, p * a, |i, out| {
        let x = traj.sample(i);
        let v = traj.velocity(i).unwrap();
        for t in 0..p {
            for al in 0..a {
                out[t * a + al] = (0..traj.sites).map(|s| weight(x, s, t) * v[traj.label(al + 1, s, t)]).sum();
            }
        }
    });
    // Route B: one estimate per particle, then summed.
    let width = p * a * traj.sites;
    let mb = reduce_samples(traj.samples, width, |i, out| {
        let x = traj.sample(i);
        let v = traj.velocity(i).unwrap();
        for t in 0..p {
            for al in 0..a {
                for s in 0..traj.sites {
                    out[(t * a + al) * traj.sites + s] = weight(x, s, t) * v[traj.label(al + 1, s, t)];
                }
            }
        }
    });
    let route_a = (0..p).map(|t| (0..a).map(|al| ma.estimate(t * a + al)).collect()).collect();
    let route_b = (0..p)
        .map(|t| {
            (0..a)
                .map(|al| {
                    let per: Vec<Estimate> = (0..traj.sites)
                        .map(|s| {
                            mb.estimate((t * a + al) * traj.sites + s)
                        })
                        .collect();
                    Estimate { value: per.iter().map(|e| e.value).sum(), stderr: per.iter().map(|e| e.stderr.powi(2)).sum::<f64>().sqrt() }
                })
                .collect()
        })
        .collect();
    Ok(HydroMoments { times: traj.times.clone(), route_a, route_b })
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualStat {
    pub level: usize,
    pub max_abs: f64,
    /// Largest `|r| / se` over entries with nonzero propagated error.
    pub max_ratio: f64,
    pub max_stderr: f64,
    pub entries: usize,
}

/// Hierarchy residual `(K̂ + N̂ + Ĝ)V` of an estimated generating vector,
/// restricted to output entries whose first label is in `rows`, with errors
/// propagated entrywise as `√(Σ (A_ij se_j)²)`.
pub fn hierarchy_residual_stats(
    table: &MtcfTable,
    space: &IndexSpace,
    kernels: &KernelSet,
    max_level: usize,
    rows: &[usize],
) -> Result<Vec<ResidualStat>> {
    let d = space.dim();
    let (v, se) = table.to_fock(max_level)?;
    let op = Op::from(crate::solver::hierarchy_operator(space, kernels)?);
    let top = op.trusted_top(max_level).unwrap_or(0);
    let a = op.materialize(d, max_level, DEFAULT_BUDGET)?;
    let r = a.apply(&v)?;
    let var = a.map_entries(|x| x * x).apply(&FockVector::from_levels(d, se.levels().iter().map(|l| l.iter().map(|x| x * x).collect()).collect())?)?;
    let mut out = Vec::new();
    for n in 1..=top {
        let stride = d.pow(n as u32 - 1);
        let mut stat = ResidualStat { level: n, max_abs: 0.0, max_ratio: 0.0, max_stderr: 0.0, entries: 0 };
        for (idx, &x) in r.level(n).iter().enumerate() {
            if !rows.contains(&(idx / stride)) {
                continue;
            }
            let s = var.level(n)[idx].sqrt();
            stat.entries += 1;
            stat.max_abs = stat.max_abs.max(x.abs());
            stat.max_stderr = stat.max_stderr.max(s);
            if s > 0.0 {
                stat.max_ratio = stat.max_ratio.max(x.abs() / s);
            } else if x.abs() > 1e-12 {
                stat.max_ratio = f64::INFINITY;
            }
        }
        out.push(stat);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_oscillator_model, OscillatorParams};

    fn harmonic(points: usize, stride: usize, dt: f64) -> Dynamics {
        Dynamics::Oscillator(OscillatorDynamics { omega: 1.0, lambda: 0.0, dt, stride, points, sites: 1, components: 1, forcing: vec![0.0] })
    }

    fn stationary(samples: usize, seed: u64) -> EnsembleSpec {
        EnsembleSpec::gaussian(vec![0.0, 0.0], DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.25])), samples, seed)
    }

    #[test]
    fn harmonic_cosine() {
        let (dt, stride) = (0.01, 10);
        let traj = simulate(&harmonic(30, stride, dt), &EnsembleSpec::pinned(&[1.0, 0.0], 1, 0)).unwrap();
        let err = traj.times.iter().enumerate().map(|(k, t)| (traj.sample(0)[k] - t.cos()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");
        let coarse = simulate(&harmonic(30, stride / 2, 2.0 * dt), &EnsembleSpec::pinned(&[1.0, 0.0], 1, 0)).unwrap();
        let err2 = coarse.times.iter().enumerate().map(|(k, t)| (coarse.sample(0)[k] - t.cos()).abs()).fold(0.0, f64::max);
        assert!((err2 / err - 4.0).abs() < 0.5, "{}", err2 / err);
    }

    #[test]
    fn zero_data_stays_zero() {
        let traj = simulate(&harmonic(5, 3, 0.1), &EnsembleSpec::pinned(&[0.0, 0.0], 3, 0)).unwrap();
        assert!(traj.positions.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let dy = Dynamics::Oscillator(OscillatorDynamics { omega: 1.0, lambda: 0.3, dt: 0.05, stride: 2, points: 4, sites: 2, components: 2, forcing: vec![0.1, 0.0] });
        let ens = EnsembleSpec::gaussian(vec![0.0; 8], DMatrix::identity(8, 8) * 0.1, 3000, 7);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| {
            let t = simulate(&dy, &ens).unwrap();
            (t.clone(), estimate_mtcf(&t, 2, None).unwrap())
        });
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| {
            let t = simulate(&dy, &ens).unwrap();
            (t.clone(), estimate_mtcf(&t, 2, None).unwrap())
        });
        assert_eq!(one, four);
        let other = simulate(&dy, &EnsembleSpec { seed: 8, ..ens.clone() }).unwrap();
        assert_ne!(other.positions, one.0.positions);
    }

    #[test]
    fn divergence_reports_sample() {
        let dy = Dynamics::Oscillator(OscillatorDynamics { omega: 1.0, lambda: -50.0, dt: 0.1, stride: 10, points: 20, sites: 1, components: 1, forcing: vec![0.0] });
        let err = simulate(&dy, &EnsembleSpec::pinned(&[2.0, 0.0], 2, 0)).unwrap_err();
        assert!(matches!(err, Error::TrajectoryDiverged { sample: 0 }), "{err}");
    }

    fn model(lambda: f64) -> ModelScheme {
        let mut f = vec![0.0; 5];
        f[0] = -1.0;
        f[1] = -0.95;
        let (space, kernels) = build_oscillator_model(&OscillatorParams::new(1.0, 0.2, 5, lambda, 0.0, f)).unwrap();
        ModelScheme { space, kernels, boundary_rows: 2 }
    }

    #[test]
    fn model_scheme_solves_rows() {
        let m = model(0.1);
        let (phi, _) = Dynamics::ModelScheme(m.clone()).run(&[0.0, 0.0]).unwrap();
        let x = DVector::from_vec(phi);
        let r = &m.kernels.k * &x + x.map(|p| m.kernels.lambda * p * p * p).component_mul(&m.kernels.m_diag) + &m.kernels.g;
        assert!(r.amax() < 1e-13, "{r}");
        let free = model(0.0);
        let (phi0, _) = Dynamics::ModelScheme(free.clone()).run(&[0.0, 0.0]).unwrap();
        let h = crate::solver::free_field(&free.kernels).unwrap();
        assert!((DVector::from_vec(phi0) - h).amax() < 1e-14);
        let bad = ModelScheme { kernels: free.kernels.with_q(0.5), ..free };
        assert!(matches!(simulate(&Dynamics::ModelScheme(bad), &EnsembleSpec::pinned(&[0.0, 0.0], 2, 0)), Err(Error::UnsupportedDynamics(_))));
    }

    #[test]
    fn first_moment_centered() {
        let traj = simulate(&harmonic(6, 20, 0.05), &stationary(4000, 1)).unwrap();
        let t = estimate_mtcf(&traj, 1, None).unwrap();
        for (w, e) in &t.entries {
            if w.len() == 1 {
                assert!(e.value.abs() <= 3.0 * e.stderr, "{w:?} {e:?}");
            }
        }
    }

    #[test]
    fn two_point_matches_linear_propagation() {
        let (sx, sv) = (0.5f64, 0.3f64);
        let ens = EnsembleSpec::gaussian(vec![0.0, 0.0], DMatrix::from_diagonal(&DVector::from_vec(vec![sx * sx, sv * sv])), 20000, 3);
        let dy = harmonic(5, 25, 0.02);
        let traj = simulate(&dy, &ens).unwrap();
        let table = estimate_mtcf(&traj, 2, None).unwrap();
        let exact = gaussian_free_moments(&dy, &ens, 2).unwrap();
        for (w, &v) in exact.iter().filter(|(w, _)| w.len() == 2) {
            let (t1, t2) = (traj.times[w[0]], traj.times[w[1]]);
            let formula = sx * sx * t1.cos() * t2.cos() + sv * sv * t1.sin() * t2.sin();
            assert!((v - formula).abs() < 1e-3, "{w:?}: {v} vs {formula}");
            let e = table.get(w).unwrap();
            assert!((e.value - v).abs() <= 4.0 * e.stderr, "{w:?}: {e:?} vs {v}");
        }
        assert_eq!(table.get(&[3, 1]), table.get(&[1, 3]));
    }

    #[test]
    fn pairing_identities() {
        let dy = harmonic(3, 10, 0.05);
        let ens = stationary(10, 0);
        let mom = gaussian_free_moments(&dy, &ens, 5).unwrap();
        let m2 = mom[&vec![2, 2]];
        assert!((mom[&vec![2, 2, 2, 2]] - 3.0 * m2 * m2).abs() < 1e-15);
        assert!(mom.iter().filter(|(w, _)| w.len() % 2 == 1).all(|(_, &v)| v == 0.0));
        assert!(matches!(gaussian_free_moments(&dy, &ens, 9), Err(Error::CombinatorialBudget(9))));
        let nonlinear = Dynamics::Oscillator(OscillatorDynamics { omega: 1.0, lambda: 0.1, dt: 0.05, stride: 1, points: 2, sites: 1, components: 1, forcing: vec![0.0] });
        assert!(gaussian_free_moments(&nonlinear, &ens, 2).is_err());
    }

    #[test]
    fn jackknife_matches_closed_form() {
        let xs: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let s: f64 = xs.iter().sum();
        let q: f64 = xs.iter().map(|x| x * x).sum();
        assert!((jackknife_stderr(&xs) - mean_stderr(xs.len(), s, q).stderr).abs() < 1e-14);
    }

    #[test]
    fn smeared_matches_unsmeared_when_stationary() {
        let traj = simulate(&harmonic(6, 10, 0.05), &stationary(20000, 5)).unwrap();
        let plain = estimate_mtcf(&traj, 2, None).unwrap();
        let smeared = estimate_mtcf(&traj, 2, Some(&[0.5, 0.25, 0.25])).unwrap();
        for (w, a) in &plain.entries {
            if w.len() == 2 && w.iter().all(|&x| x >= 2) {
                let b = smeared.get(w).unwrap();
                assert!((a.value - b.value).abs() <= 4.0 * (a.stderr + b.stderr), "{w:?}");
            }
        }
        assert!(estimate_mtcf(&traj, 2, Some(&[0.5, 0.6])).is_err());
    }

    fn wave() -> WaveDynamics {
        WaveDynamics { points: 64, length: 2.0, speed: 1.0, cfl: 0.5, stride: 8, records: 5 }
    }

    #[test]
    fn dalembert_sine() {
        let w = wave();
        let pi = std::f64::consts::PI;
        let x: Vec<f64> = (0..64).map(|j| j as f64 * w.dx()).collect();
        let mut mean: Vec<f64> = x.iter().map(|x| (pi * x).sin()).collect();
        mean.extend(vec![0.0; 64]);
        // Smooth fluctuations: random amplitudes of the lowest modes in both fields.
        let modes: Vec<Vec<f64>> = (1..=3)
            .flat_map(|k| {
                let c: Vec<f64> = x.iter().map(|x| (pi * k as f64 * x).cos()).collect();
                let s: Vec<f64> = x.iter().map(|x| (pi * k as f64 * x).sin()).collect();
                let z = vec![0.0; 64];
                [[c.clone(), z.clone()].concat(), [z.clone(), c].concat(), [s.clone(), z.clone()].concat(), [z, s].concat()]
            })
            .collect();
        let b = DMatrix::from_fn(128, modes.len(), |i, j| 0.1 * modes[j][i]);
        let cov = &b * b.transpose();
        let ens = EnsembleSpec::gaussian(mean, (&cov + cov.transpose()) * 0.5, 200, 11);
        let avg = dalembert_average(&w, &ens).unwrap();
        assert!(avg.max_diff <= 1e-3, "{}", avg.max_diff);
        for (k, t) in avg.times.iter().enumerate() {
            for (j, xj) in x.iter().enumerate() {
                let exact = (pi * xj).sin() * (pi * t).cos();
                assert!((avg.nominal[(j, k)] - exact).abs() < 1e-12);
            }
        }
        let zero = EnsembleSpec::gaussian(vec![0.0; 128], DMatrix::identity(128, 128) * 0.01, 10, 1);
        assert_eq!(dalembert_average(&w, &zero).unwrap().nominal.amax(), 0.0);
    }

    #[test]
    fn pinned_wave_points_are_deterministic() {
        let w = WaveDynamics { points: 8, length: 1.0, speed: 1.0, cfl: 0.5, stride: 1, records: 3 };
        let pinned: Vec<(usize, f64)> = (0..8).map(|i| (i, (i as f64 * 0.7).sin())).collect();
        let ens = EnsembleSpec {
            kind: EnsembleKind::HybridDelta { pinned, mean: vec![0.0; 8], cov: DMatrix::identity(8, 8) * 0.04 },
            samples: 4000,
            seed: 2,
            smearing: None,
        };
        let traj = simulate(&Dynamics::Wave(w.clone()), &ens).unwrap();
        let table = estimate_mtcf(&traj, 1, None).unwrap();
        for site in 0..8 {
            let e = table.get(&[site * 3]).unwrap();
            assert_eq!(e.stderr, 0.0);
            assert_eq!(e.value, (site as f64 * 0.7).sin());
        }
        // Velocities are centered, so the mean field follows the pinned data alone.
        let det: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).chain(vec![0.0; 8]).collect();
        let (reference, _) = Dynamics::Wave(w).run(&det).unwrap();
        for l in 0..24 {
            let e = table.get(&[l]).unwrap();
            assert!((e.value - reference[l]).abs() <= 4.0 * e.stderr + 1e-15);
        }
    }

    #[test]
    fn marginal_examples() {
        let u = ProbabilityTensor::new(vec![2, 2], vec![0.25; 4]).unwrap();
        assert_eq!(marginals(&u, 1).unwrap().data(), &[0.5, 0.5]);
        let p = [0.2, 0.8];
        let q = [0.1, 0.6, 0.3];
        let prod = ProbabilityTensor::new(vec![2, 3], p.iter().flat_map(|a| q.iter().map(move |b| a * b)).collect()).unwrap();
        let m = marginals(&prod, 1).unwrap();
        assert!(m.data().iter().zip(p).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(matches!(ProbabilityTensor::new(vec![2], vec![1.5, -0.5]), Err(Error::NotADistribution(_))));
    }

    #[test]
    fn projector_composition_exact() {
        // Dyadic probabilities keep every partial sum exact.
        let raw: Vec<f64> = vec![1.0, 7.0, 3.0, 5.0, 2.0, 4.0, 6.0, 4.0];
        let total: f64 = raw.iter().sum();
        let f = ProbabilityTensor::new(vec![2, 2, 2], raw.iter().map(|x| x / total).collect()).unwrap();
        for m in 0..=3 {
            for n in m..=3 {
                assert_eq!(project(&project(&f, n).unwrap(), m).unwrap(), project(&f, m).unwrap(), "{m} {n}");
            }
        }
    }

    #[test]
    fn hydro_routes() {
        let dy = Dynamics::Oscillator(OscillatorDynamics { omega: 1.0, lambda: 0.0, dt: 0.05, stride: 4, points: 3, sites: 3, components: 3, forcing: vec![0.0; 3] });
        let ens = EnsembleSpec::gaussian(vec![0.1; 18], DMatrix::identity(18, 18) * 0.2, 3000, 4);
        let traj = simulate(&dy, &ens).unwrap();
        let h0 = hydro_moments(&traj, 0, 0, 0).unwrap();
        for t in 0..3 {
            let mut total = 0.0;
            for i in 0..traj.samples {
                total += (0..3).map(|s| traj.velocity(i).unwrap()[traj.label(1, s, t)]).sum::<f64>();
            }
            assert!((h0.route_a[t][0].value - total / traj.samples as f64).abs() < 1e-12);
        }
        let h = hydro_moments(&traj, 1, 2, 0).unwrap();
        assert!(h.max_discrepancy() <= 3.0);
        let single = simulate(&dy, &EnsembleSpec::pinned(&[0.3; 18], 2, 0)).unwrap();
        let hs = hydro_moments(&single, 2, 1, 1).unwrap();
        for (a, b) in hs.route_a.iter().flatten().zip(hs.route_b.iter().flatten()) {
            assert!((a.value - b.value).abs() <= 1e-15 * a.value.abs().max(1.0));
        }
    }

    #[test]
    fn interior_residual_vanishes_per_sample() {
        let m = model(0.05);
        let space = m.space.clone();
        let kernels = m.kernels.clone();
        let ens = EnsembleSpec::gaussian(vec![0.0, 0.0], DMatrix::identity(2, 2) * 0.01, 2000, 9);
        let traj = simulate(&Dynamics::ModelScheme(m), &ens).unwrap();
        let table = estimate_mtcf(&traj, 4, None).unwrap();
        let stats = hierarchy_residual_stats(&table, &space, &kernels, 4, &[2, 3, 4]).unwrap();
        assert_eq!(stats.len(), 2);
        for s in &stats {
            assert!(s.max_ratio <= 4.0, "{s:?}");
            assert!(s.max_abs < 1e-12, "{s:?}");
        }
        let boundary = hierarchy_residual_stats(&table, &space, &kernels, 4, &[0]).unwrap();
        assert!(boundary[0].max_abs > 1e-4);
    }
}
