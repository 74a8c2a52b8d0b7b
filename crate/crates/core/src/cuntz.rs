//! Normal-ordered operator expressions over Cuntz generators.
//!
//! Generators obey `η(x)·η*(y) = δ(x−y)·I` and `η(x)|0⟩ = 0`. Every product
//! of generators reduces to a single normal-ordered word
//! `η*(c1)…η*(cp)·η(a1)…η(as)`, optionally with `|0⟩⟨0|` between the two
//! halves. Kernels are expanded into per-label coefficients, so an expression
//! is a sparse map from words to reals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::fock::{flat_index, FockVector};
use crate::model::{IndexSpace, KernelSet};
use crate::{Error, Result};

/// One normal-ordered word. `vacuum` marks `η*(c)|0⟩⟨0|η(a)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial {
    pub vacuum: bool,
    pub create: Vec<u32>,
    pub annihilate: Vec<u32>,
}

impl Monomial {
    pub fn new(create: Vec<u32>, annihilate: Vec<u32>) -> Self {
        Self { vacuum: false, create, annihilate }
    }

    pub fn vacuum_term(create: Vec<u32>, annihilate: Vec<u32>) -> Self {
        Self { vacuum: true, create, annihilate }
    }

    /// Net grading `|create| − |annihilate|`.
    pub fn grading(&self) -> i64 {
        self.create.len() as i64 - self.annihilate.len() as i64
    }

    /// Product of two words, `None` when it vanishes.
    pub fn compose(&self, other: &Self) -> Option<Self> {
        let s = self.annihilate.len();
        let p = other.create.len();
        let k = s.min(p);
        for i in 0..k {
            if self.annihilate[s - 1 - i] != other.create[i] {
                return None;
            }
        }
        // ⟨0|η*(…) = 0 and η(…)|0⟩ = 0.
        if (self.vacuum && p > s) || (other.vacuum && s > p) {
            return None;
        }
        let vacuum = self.vacuum || other.vacuum;
        if s >= p {
            let mut annihilate = self.annihilate[..s - p].to_vec();
            annihilate.extend_from_slice(&other.annihilate);
            Some(Self { vacuum, create: self.create.clone(), annihilate })
        } else {
            let mut create = self.create.clone();
            create.extend_from_slice(&other.create[s..]);
            Some(Self { vacuum, create, annihilate: other.annihilate.clone() })
        }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            vacuum: self.vacuum,
            create: self.annihilate.iter().rev().copied().collect(),
            annihilate: self.create.iter().rev().copied().collect(),
        }
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self.create.iter().map(|c| format!("η*[{c}]")).collect();
        if self.vacuum {
            parts.push("|0⟩⟨0|".into());
        }
        parts.extend(self.annihilate.iter().map(|a| format!("η[{a}]")));
        if parts.is_empty() {
            parts.push("I".into());
        }
        f.write_str(&parts.join(" "))
    }
}

/// Finite sum of normal-ordered words over `d` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorExpr {
    d: usize,
    terms: BTreeMap<Monomial, f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Triangularity {
    Zero,
    Diagonal,
    Raising(usize),
    Lowering(usize),
    Mixed(BTreeSet<i64>),
}

impl fmt::Display for Triangularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => write!(f, "zero"),
            Self::Diagonal => write!(f, "diagonal"),
            Self::Raising(k) => write!(f, "raising {k}"),
            Self::Lowering(k) => write!(f, "lowering {k}"),
            Self::Mixed(g) => write!(f, "mixed {g:?}"),
        }
    }
}

impl OperatorExpr {
    pub fn zero(d: usize) -> Self {
        Self { d, terms: BTreeMap::new() }
    }

    pub fn identity(d: usize) -> Self {
        Self::from_monomial(d, 1.0, Monomial::new(vec![], vec![]))
    }

    /// `|0⟩⟨0|`.
    pub fn vacuum_projector(d: usize) -> Self {
        Self::from_monomial(d, 1.0, Monomial::vacuum_term(vec![], vec![]))
    }

    pub fn creator(d: usize, i: usize) -> Self {
        Self::from_monomial(d, 1.0, Monomial::new(vec![i as u32], vec![]))
    }

    pub fn annihilator(d: usize, i: usize) -> Self {
        Self::from_monomial(d, 1.0, Monomial::new(vec![], vec![i as u32]))
    }

    /// `Σ_i η*(i)η(i) + |0⟩⟨0|`.
    pub fn unit_decomposition(d: usize) -> Self {
        let mut e = Self::vacuum_projector(d);
        for i in 0..d as u32 {
            e.add_term(1.0, Monomial::new(vec![i], vec![i]));
        }
        e
    }

    pub fn from_monomial(d: usize, coef: f64, m: Monomial) -> Self {
        let mut e = Self::zero(d);
        e.add_term(coef, m);
        e
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn add_term(&mut self, coef: f64, m: Monomial) {
        debug_assert!(m.create.iter().chain(&m.annihilate).all(|&x| (x as usize) < self.d));
        if coef == 0.0 {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(coef);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                *e.get_mut() += coef;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
        }
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.d != other.d {
            return Err(Error::ShapeError(format!("operators act on {} vs {} labels", self.d, other.d)));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = Self::zero(self.d);
        for (m, v) in self.terms() {
            out.add_term(c * v, m.clone());
        }
        out
    }

    pub fn plus(&self, c: f64, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let mut out = self.clone();
        for (m, v) in other.terms() {
            out.add_term(c * v, m.clone());
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.plus(1.0, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.plus(-1.0, other)
    }

    /// Drops coefficients with magnitude at most `tol`.
    pub fn pruned(&self, tol: f64) -> Self {
        Self {
            d: self.d,
            terms: self.terms.iter().filter(|(_, c)| c.abs() > tol).map(|(m, &c)| (m.clone(), c)).collect(),
        }
    }

    /// `self · other`, exact in the untruncated algebra.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let mut out = Self::zero(self.d);
        for (x, cx) in self.terms() {
            for (y, cy) in other.terms() {
                if let Some(m) = x.compose(y) {
                    out.add_term(cx * cy, m);
                }
            }
        }
        Ok(out)
    }

    pub fn adjoint(&self) -> Self {
        Self {
            d: self.d,
            terms: self.terms.iter().map(|(m, &c)| (m.adjoint(), c)).collect(),
        }
    }

    pub fn gradings(&self) -> BTreeSet<i64> {
        self.terms.keys().map(Monomial::grading).collect()
    }

    pub fn classify(&self) -> Triangularity {
        let g = self.gradings();
        match g.len() {
            0 => Triangularity::Zero,
            1 => match *g.iter().next().unwrap() {
                0 => Triangularity::Diagonal,
                k if k > 0 => Triangularity::Raising(k as usize),
                k => Triangularity::Lowering((-k) as usize),
            },
            _ => Triangularity::Mixed(g),
        }
    }

    /// Largest number of levels any summand reads above its output.
    pub fn max_lowering(&self) -> usize {
        self.terms.keys().map(|m| (-m.grading()).max(0) as usize).max().unwrap_or(0)
    }

    /// Largest annihilation word length.
    pub fn max_annihilations(&self) -> usize {
        self.terms.keys().map(|m| m.annihilate.len()).max().unwrap_or(0)
    }

    pub fn apply(&self, v: &FockVector) -> Result<FockVector> {
        if v.d() != self.d {
            return Err(Error::ShapeError(format!("operator on {} labels applied to d={} vector", self.d, v.d())));
        }
        let d = self.d;
        let top = v.max_level();
        let mut out = FockVector::zeros(d, top);
        for (m, coef) in self.terms() {
            let s = m.annihilate.len();
            let p = m.create.len();
            let rev: Vec<usize> = m.annihilate.iter().rev().map(|&x| x as usize).collect();
            let cre: Vec<usize> = m.create.iter().map(|&x| x as usize).collect();
            let a_idx = flat_index(d, &rev);
            let c_idx = flat_index(d, &cre);
            let levels: Vec<usize> = if m.vacuum { vec![s] } else { (s..=top).collect() };
            for n in levels {
                if n > top || n - s + p > top {
                    continue;
                }
                let r = d.pow((n - s) as u32);
                let src = &v.level(n)[a_idx * r..(a_idx + 1) * r];
                if m.vacuum {
                    // ⟨0|η(a) reads the single entry at the reversed word.
                    out.level_mut(p)[c_idx] += coef * src[0];
                    continue;
                }
                let dst = &mut out.level_mut(n - s + p)[c_idx * r..(c_idx + 1) * r];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += coef * x;
                }
            }
        }
        Ok(out)
    }

    /// Block matrix of this expression on levels `0..=max_level`.
    pub fn materialize(&self, max_level: usize, budget: usize) -> Result<crate::op::BlockMatrix> {
        crate::op::BlockMatrix::from_op(&crate::op::Op::from(self.clone()), self.d, max_level, budget)
    }

    /// One summand per line, `coef word`, in canonical order.
    pub fn to_text(&self) -> String {
        if self.terms.is_empty() {
            return "0".into();
        }
        self.terms.iter().map(|(m, c)| format!("{c} {m}")).collect::<Vec<_>>().join("\n")
    }
}

impl fmt::Display for OperatorExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// `K̂ = Σ K(x,y) η*(x)η(y)`.
pub fn build_k(kernels: &KernelSet) -> OperatorExpr {
    let d = kernels.dim();
    let mut e = OperatorExpr::zero(d);
    for x in 0..d {
        for y in 0..d {
            e.add_term(kernels.k[(x, y)], Monomial::new(vec![x as u32], vec![y as u32]));
        }
    }
    e
}

/// `Ĝ = Σ G(x) η*(x)`.
pub fn build_g(kernels: &KernelSet) -> OperatorExpr {
    let d = kernels.dim();
    let mut e = OperatorExpr::zero(d);
    for x in 0..d {
        e.add_term(kernels.g[x], Monomial::new(vec![x as u32], vec![]));
    }
    e
}

/// Order of the three annihilators in each `N̂` summand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AnnihilatorOrder {
    /// Prefactor slot first, then the contracted pair.
    #[default]
    Canonical,
    Reversed,
}

/// `N̂(q) = λ Σ_{α,β,z,y} M(z;y) η*(α,z) :η(α,z)(η(β,z) − q η(β,y))²:`.
pub fn build_n(space: &IndexSpace, kernels: &KernelSet) -> Result<OperatorExpr> {
    build_n_ordered(space, kernels, AnnihilatorOrder::Canonical)
}

pub fn build_n_ordered(space: &IndexSpace, kernels: &KernelSet, order: AnnihilatorOrder) -> Result<OperatorExpr> {
    if kernels.degree != 3 {
        return Err(Error::UnsupportedDegree(kernels.degree));
    }
    let a = space.components();
    let u = space.base_len();
    let lam = kernels.lambda;
    let q = kernels.q;
    let mut e = OperatorExpr::zero(space.dim());
    let mut push = |coef: f64, word: [usize; 4]| {
        let mut ann: Vec<u32> = word[1..].iter().map(|&x| x as u32).collect();
        if order == AnnihilatorOrder::Reversed {
            ann.reverse();
        }
        e.add_term(coef, Monomial::new(vec![word[0] as u32], ann));
    };
    for alpha in 1..=a {
        for z in 0..u {
            let az = space.encode(alpha, z);
            for beta in 1..=a {
                let bz = space.encode(beta, z);
                push(lam * kernels.m_diag[z], [az, az, bz, bz]);
                for y in 0..u {
                    let mzy = kernels.m[(z, y)];
                    if mzy == 0.0 {
                        continue;
                    }
                    let by = space.encode(beta, y);
                    let (lo, hi) = (space.encode(beta, z.min(y)), space.encode(beta, z.max(y)));
                    push(-2.0 * q * lam * mzy, [az, az, lo, hi]);
                    push(q * q * lam * mzy, [az, az, by, by]);
                }
            }
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_oscillator_model, OscillatorParams};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn rand_vec(d: usize, l: usize, seed: u64) -> FockVector {
        let mut v = FockVector::zeros(d, l);
        let mut s = seed;
        for n in 0..=l {
            for x in v.level_mut(n) {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *x = ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
            }
        }
        v
    }

    #[test]
    fn creation_and_annihilation() {
        let v = FockVector::vacuum(3, 2);
        let e1 = OperatorExpr::creator(3, 1).apply(&v).unwrap();
        assert_eq!(e1, FockVector::basis_word(3, 2, &[1]).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                let ej = FockVector::basis_word(3, 2, &[j]).unwrap();
                let out = OperatorExpr::annihilator(3, i).apply(&ej).unwrap();
                let want = if i == j { FockVector::vacuum(3, 2) } else { FockVector::zeros(3, 2) };
                assert_eq!(out, want);
            }
        }
    }

    #[test]
    fn cuntz_relation_exhaustive() {
        for d in 1..=5 {
            for i in 0..d {
                for j in 0..d {
                    let c = OperatorExpr::annihilator(d, i).compose(&OperatorExpr::creator(d, j)).unwrap();
                    if i == j {
                        assert_eq!(c, OperatorExpr::identity(d));
                    } else {
                        assert!(c.is_empty());
                    }
                }
            }
        }
    }

    #[test]
    fn unit_decomposition_is_identity() {
        for d in 1..=4 {
            let v = rand_vec(d, 3, d as u64);
            assert_eq!(OperatorExpr::unit_decomposition(d).apply(&v).unwrap(), v);
        }
    }

    #[test]
    fn vacuum_term_reads_only_its_level() {
        let d = 2;
        let t = OperatorExpr::from_monomial(d, 1.0, Monomial::vacuum_term(vec![0], vec![1]));
        let mut v = FockVector::zeros(d, 3);
        v.level_mut(2).iter_mut().for_each(|x| *x = 1.0);
        v.level_mut(3).iter_mut().for_each(|x| *x = 1.0);
        assert_eq!(t.apply(&v).unwrap().norm(), 0.0);
        let w = FockVector::basis_word(d, 3, &[1]).unwrap();
        assert_eq!(t.apply(&w).unwrap(), FockVector::basis_word(d, 3, &[0]).unwrap());
    }

    #[test]
    fn adjoint_basics() {
        assert_eq!(OperatorExpr::annihilator(3, 2).adjoint(), OperatorExpr::creator(3, 2));
        let e = OperatorExpr::from_monomial(3, 2.5, Monomial::vacuum_term(vec![0, 1], vec![2]));
        assert_eq!(e.adjoint().adjoint(), e);
    }

    #[test]
    fn canonical_text() {
        let mut e = OperatorExpr::zero(3);
        e.add_term(0.5, Monomial::new(vec![0, 1], vec![2]));
        e.add_term(-1.0, Monomial::vacuum_term(vec![], vec![]));
        assert_eq!(e.to_text(), "0.5 η*[0] η*[1] η[2]\n-1 |0⟩⟨0|");
        assert_eq!(OperatorExpr::identity(2).to_text(), "1 I");
    }

    fn model(t: usize, q: f64) -> (IndexSpace, KernelSet) {
        let mut p = OscillatorParams::new(1.0, 0.3, t, 0.7, q, (0..t).map(|i| 1.0 + i as f64).collect());
        p.lags = vec![1.0, 0.3];
        build_oscillator_model(&p).unwrap()
    }

    #[test]
    fn model_operator_gradings() {
        let (s, k) = model(3, 0.4);
        assert_eq!(build_k(&k).classify(), Triangularity::Diagonal);
        assert_eq!(build_g(&k).classify(), Triangularity::Raising(1));
        assert_eq!(build_n(&s, &k).unwrap().classify(), Triangularity::Lowering(2));
    }

    #[test]
    fn scalar_k() {
        let s = IndexSpace::new(1, ["u"]).unwrap();
        let k = KernelSet::new(&s, DMatrix::from_element(1, 1, 2.5), DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0), 0.0, 0.0).unwrap();
        let e = FockVector::basis_word(1, 2, &[0]).unwrap();
        assert_eq!(build_k(&k).apply(&e).unwrap(), e.scaled(2.5));
        let g = build_g(&k).apply(&FockVector::vacuum(1, 2)).unwrap();
        assert_eq!(g, e);
    }

    #[test]
    fn n_on_repeated_word() {
        // A = 3 components over one base label; M(u) = 2.
        let s = IndexSpace::new(3, ["u"]).unwrap();
        let k = KernelSet::new(&s, DMatrix::identity(3, 3), DVector::from_element(3, 1.0), DMatrix::from_element(1, 1, 2.0), 1.0, 0.0).unwrap();
        let n = build_n(&s, &k).unwrap();
        for alpha in 0..3 {
            let w = FockVector::basis_word(3, 3, &[alpha, alpha, alpha]).unwrap();
            let out = n.apply(&w).unwrap();
            assert_eq!(out, FockVector::basis_word(3, 3, &[alpha]).unwrap().scaled(2.0));
        }
        let mixed = FockVector::basis_word(3, 3, &[1, 1, 0]).unwrap();
        assert_eq!(n.apply(&mixed).unwrap(), FockVector::basis_word(3, 3, &[0]).unwrap().scaled(2.0));
    }

    #[test]
    fn unsupported_degree() {
        let (s, mut k) = model(3, 0.0);
        k.degree = 4;
        assert!(matches!(build_n(&s, &k), Err(Error::UnsupportedDegree(4))));
    }

    #[test]
    fn annihilator_order_indifference() {
        // Two components over one base label: d = 2.
        let s = IndexSpace::new(2, ["u"]).unwrap();
        let k = KernelSet::new(&s, DMatrix::identity(2, 2), DVector::from_element(2, 1.0), DMatrix::from_element(1, 1, 1.5), 0.7, 0.6).unwrap();
        let a = build_n_ordered(&s, &k, AnnihilatorOrder::Canonical).unwrap();
        let b = build_n_ordered(&s, &k, AnnihilatorOrder::Reversed).unwrap();
        let v = rand_vec(2, 4, 7);
        let sym = v.symmetrize();
        let diff = a.apply(&sym).unwrap().max_abs_diff(&b.apply(&sym).unwrap(), 4).unwrap();
        assert!(diff <= 1e-12);
        let asym = FockVector::basis_word(2, 4, &[0, 1, 1]).unwrap();
        assert!(a.apply(&asym).unwrap().max_abs_diff(&b.apply(&asym).unwrap(), 4).unwrap() > 0.1);
    }

    #[test]
    fn materialized_blocks_of_g_are_subdiagonal() {
        let (_, k) = model(3, 0.0);
        let g = build_g(&k);
        for n in 0..3 {
            for j in 0..3usize.pow(n as u32) {
                let mut w = FockVector::zeros(3, 3);
                w.level_mut(n)[j] = 1.0;
                let out = g.apply(&w).unwrap();
                for m in 0..=3 {
                    if m != n + 1 {
                        assert_eq!(out.level_norm(m), 0.0);
                    }
                }
            }
        }
    }

    fn arb_expr(d: usize) -> impl Strategy<Value = OperatorExpr> {
        let word = move |max: usize| prop::collection::vec(0..d as u32, 0..=max);
        prop::collection::vec((word(2), word(2), any::<bool>(), -2.0f64..2.0), 1..4).prop_map(move |ts| {
            let mut e = OperatorExpr::zero(d);
            for (c, a, vac, coef) in ts {
                e.add_term(coef, Monomial { vacuum: vac, create: c, annihilate: a });
            }
            e
        })
    }

    fn arb_vec(d: usize, l: usize) -> impl Strategy<Value = FockVector> {
        any::<u64>().prop_map(move |s| rand_vec(d, l, s))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn composition_is_application(a in arb_expr(2), b in arb_expr(2), v in arb_vec(2, 3)) {
            let lhs = a.compose(&b).unwrap().apply(&v).unwrap();
            let rhs = a.apply(&b.apply(&v).unwrap()).unwrap();
            // Output level m of `a` reads `b·v` up to level m + lowering(a).
            prop_assume!(a.max_lowering() <= 3);
            let trusted = 3 - a.max_lowering();
            prop_assert!(lhs.max_abs_diff(&rhs, trusted).unwrap() <= 1e-12);
        }

        #[test]
        fn adjoint_pairing(a in arb_expr(2), u in arb_vec(2, 3), v in arb_vec(2, 3)) {
            let l = a.apply(&u).unwrap().inner(&v).unwrap();
            let r = u.inner(&a.adjoint().apply(&v).unwrap()).unwrap();
            // Both vectors vanish above L, so truncation never enters.
            prop_assert!((l - r).abs() <= 1e-12);
        }

        #[test]
        fn state_positivity(a in arb_expr(3)) {
            let l = 4;
            let aa = a.adjoint().compose(&a).unwrap();
            let val = aa.apply(&FockVector::vacuum(3, l)).unwrap().level(0)[0];
            prop_assert!(val >= -1e-12);
        }

        #[test]
        fn adjoint_involution(a in arb_expr(3)) {
            prop_assert_eq!(a.adjoint().adjoint(), a);
        }
    }
}
