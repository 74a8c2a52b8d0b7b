//! Lazily composed operators and their block-matrix materialization.
//!
//! Inverses such as `(I + K̂_R^{-1}Ĝ)^{-1}` are cheap to apply but expensive to
//! expand symbolically, so solvers build [`Op`] trees and only materialize
//! them into [`BlockMatrix`] form when a linear solve or an exhaustive check
//! needs the matrix.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::cuntz::OperatorExpr;
use crate::fock::{entry_count, FockVector};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub enum Op {
    Expr(OperatorExpr),
    Blocks(BlockMatrix),
    /// `Σ c_i·X_i`.
    Sum(Vec<(f64, Op)>),
    /// `X_1·X_2·…·X_k`; the last factor acts first.
    Product(Vec<Op>),
    /// `Σ_{j<terms} (−R)^j`, the inverse of `I + R` for nilpotent `R`.
    Neumann { raising: Box<Op>, terms: usize },
    Symmetrizer,
}

impl From<OperatorExpr> for Op {
    fn from(e: OperatorExpr) -> Self {
        Op::Expr(e)
    }
}

impl From<BlockMatrix> for Op {
    fn from(b: BlockMatrix) -> Self {
        Op::Blocks(b)
    }
}

impl Op {
    pub fn identity(d: usize) -> Self {
        Op::Expr(OperatorExpr::identity(d))
    }

    pub fn product(factors: impl IntoIterator<Item = Op>) -> Self {
        Op::Product(factors.into_iter().collect())
    }

    /// `a − b`.
    pub fn minus(a: Op, b: Op) -> Self {
        Op::Sum(vec![(1.0, a), (-1.0, b)])
    }

    pub fn plus(a: Op, b: Op) -> Self {
        Op::Sum(vec![(1.0, a), (1.0, b)])
    }

    pub fn apply(&self, v: &FockVector) -> Result<FockVector> {
        match self {
            Op::Expr(e) => e.apply(v),
            Op::Blocks(b) => b.apply(v),
            Op::Sum(parts) => {
                let mut out = FockVector::zeros(v.d(), v.max_level());
                for (c, op) in parts {
                    out.axpy(*c, &op.apply(v)?)?;
                }
                Ok(out)
            }
            Op::Product(factors) => {
                let mut cur = v.clone();
                for f in factors.iter().rev() {
                    cur = f.apply(&cur)?;
                }
                Ok(cur)
            }
            Op::Neumann { raising, terms } => {
                let mut acc = v.clone();
                let mut term = v.clone();
                for _ in 1..*terms {
                    term = raising.apply(&term)?.scaled(-1.0);
                    if term.norm() == 0.0 {
                        break;
                    }
                    acc.axpy(1.0, &term)?;
                }
                Ok(acc)
            }
            Op::Symmetrizer => Ok(v.symmetrize()),
        }
    }

    /// Input levels feeding the given output levels, or `None` when some
    /// intermediate result would be needed above `max_level`.
    pub fn reads(&self, out: &BTreeSet<usize>, max_level: usize) -> Option<BTreeSet<usize>> {
        let through = |gradings: &mut dyn Iterator<Item = i64>| -> Option<BTreeSet<usize>> {
            let gs: Vec<i64> = gradings.collect();
            let mut r = BTreeSet::new();
            for &m in out {
                for &g in &gs {
                    let lvl = m as i64 - g;
                    if lvl < 0 {
                        continue;
                    }
                    if lvl as usize > max_level {
                        return None;
                    }
                    r.insert(lvl as usize);
                }
            }
            Some(r)
        };
        match self {
            Op::Expr(e) => through(&mut e.gradings().into_iter()),
            Op::Blocks(b) => {
                let mut r = BTreeSet::new();
                for &(m, n) in b.blocks.keys() {
                    if out.contains(&m) {
                        r.insert(n);
                    }
                }
                Some(r)
            }
            Op::Sum(parts) => {
                let mut r = BTreeSet::new();
                for (_, p) in parts {
                    r.extend(p.reads(out, max_level)?);
                }
                Some(r)
            }
            Op::Product(factors) => {
                let mut cur = out.clone();
                for f in factors {
                    cur = f.reads(&cur, max_level)?;
                }
                Some(cur)
            }
            Op::Neumann { raising, terms } => {
                let mut acc = out.clone();
                let mut cur = out.clone();
                for _ in 1..*terms {
                    cur = raising.reads(&cur, max_level)?;
                    if cur.is_empty() {
                        break;
                    }
                    acc.extend(cur.iter().copied());
                }
                Some(acc)
            }
            Op::Symmetrizer => Some(out.clone()),
        }
    }

    /// Highest output level `t` such that levels `0..=t` are unaffected by
    /// truncation at `max_level`.
    pub fn trusted_top(&self, max_level: usize) -> Option<usize> {
        let mut top = None;
        for m in 0..=max_level {
            if self.reads(&BTreeSet::from([m]), max_level).is_none() {
                break;
            }
            top = Some(m);
        }
        top
    }

    pub fn materialize(&self, d: usize, max_level: usize, budget: usize) -> Result<BlockMatrix> {
        BlockMatrix::from_op(self, d, max_level, budget)
    }
}

/// `(out level, in level) → d^m × d^n` blocks; absent blocks are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMatrix {
    d: usize,
    max_level: usize,
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl BlockMatrix {
    pub fn zero(d: usize, max_level: usize) -> Self {
        Self { d, max_level, blocks: BTreeMap::new() }
    }

    pub fn identity(d: usize, max_level: usize) -> Self {
        let mut b = Self::zero(d, max_level);
        for n in 0..=max_level {
            let w = d.pow(n as u32);
            b.blocks.insert((n, n), DMatrix::identity(w, w));
        }
        b
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn block(&self, m: usize, n: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(&(m, n))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&(usize, usize), &DMatrix<f64>)> {
        self.blocks.iter()
    }

    /// Entrywise image under `f` (which should map 0 to 0).
    pub fn map_entries(&self, f: impl Fn(f64) -> f64) -> Self {
        let blocks = self.blocks.iter().map(|(k, b)| (*k, b.map(&f))).collect();
        Self { d: self.d, max_level: self.max_level, blocks }
    }

    /// Level pairs carrying an entry larger than `tol`.
    pub fn nonzero_blocks(&self, tol: f64) -> Vec<(usize, usize)> {
        self.blocks.iter().filter(|(_, b)| b.amax() > tol).map(|(k, _)| *k).collect()
    }

    pub fn max_lowering(&self) -> usize {
        self.blocks.keys().map(|&(m, n)| n.saturating_sub(m)).max().unwrap_or(0)
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.values().map(|b| b.amax()).fold(0.0, f64::max)
    }

    /// Largest entry over blocks whose output and input levels are in range.
    pub fn max_abs_within(&self, out_levels: std::ops::RangeInclusive<usize>, in_levels: std::ops::RangeInclusive<usize>) -> f64 {
        self.blocks
            .iter()
            .filter(|((m, n), _)| out_levels.contains(m) && in_levels.contains(n))
            .map(|(_, b)| b.amax())
            .fold(0.0, f64::max)
    }

    pub fn from_op(op: &Op, d: usize, max_level: usize, budget: usize) -> Result<Self> {
        let total = entry_count(d, max_level);
        if total > budget {
            return Err(Error::BudgetExceeded { needed: total, budget });
        }
        let mut out = Self::zero(d, max_level);
        let mut stored = 0usize;
        for n in 0..=max_level {
            let width = d.pow(n as u32);
            let cols: Vec<FockVector> = (0..width)
                .into_par_iter()
                .map(|j| {
                    let mut e = FockVector::zeros(d, max_level);
                    e.level_mut(n)[j] = 1.0;
                    op.apply(&e)
                })
                .collect::<Result<_>>()?;
            for m in 0..=max_level {
                if cols.iter().all(|c| c.level(m).iter().all(|&x| x == 0.0)) {
                    continue;
                }
                let rows = d.pow(m as u32);
                stored = stored.saturating_add(rows * width);
                if stored > budget {
                    return Err(Error::BudgetExceeded { needed: stored, budget });
                }
                let block = DMatrix::from_fn(rows, width, |i, j| cols[j].level(m)[i]);
                out.blocks.insert((m, n), block);
            }
        }
        Ok(out)
    }

    pub fn apply(&self, v: &FockVector) -> Result<FockVector> {
        if v.d() != self.d || v.max_level() != self.max_level {
            return Err(Error::ShapeError("block matrix and vector disagree in shape".into()));
        }
        let mut out = FockVector::zeros(self.d, self.max_level);
        for (&(m, n), b) in &self.blocks {
            let x = nalgebra::DVectorView::from_slice(v.level(n), v.level(n).len());
            let y = b * x;
            for (o, yi) in out.level_mut(m).iter_mut().zip(y.iter()) {
                *o += yi;
            }
        }
        Ok(out)
    }

    /// `self · other`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.d != other.d || self.max_level != other.max_level {
            return Err(Error::ShapeError("block matrices disagree in shape".into()));
        }
        let mut out = Self::zero(self.d, self.max_level);
        for (&(m, k), a) in &self.blocks {
            for (&(k2, n), b) in other.blocks.range((k, 0)..=(k, usize::MAX)) {
                debug_assert_eq!(k, k2);
                let prod = a * b;
                out.blocks
                    .entry((m, n))
                    .and_modify(|acc| *acc += &prod)
                    .or_insert(prod);
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.d != other.d || self.max_level != other.max_level {
            return Err(Error::ShapeError("block matrices disagree in shape".into()));
        }
        let mut out = self.clone();
        for (k, b) in &other.blocks {
            out.blocks.entry(*k).and_modify(|acc| *acc -= b).or_insert_with(|| -b);
        }
        Ok(out)
    }

    /// Offsets of each level inside the flattened vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for n in 0..=self.max_level {
            off.push(off[n] + self.d.pow(n as u32));
        }
        off
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let off = self.offsets();
        let total = off[self.max_level + 1];
        let mut m = DMatrix::zeros(total, total);
        for (&(i, j), b) in &self.blocks {
            m.view_mut((off[i], off[j]), b.shape()).copy_from(b);
        }
        m
    }

    pub fn from_dense(d: usize, max_level: usize, dense: &DMatrix<f64>) -> Self {
        let mut out = Self::zero(d, max_level);
        let off = out.offsets();
        for i in 0..=max_level {
            for j in 0..=max_level {
                let shape = (off[i + 1] - off[i], off[j + 1] - off[j]);
                let b = dense.view((off[i], off[j]), shape).into_owned();
                if b.iter().any(|&x| x != 0.0) {
                    out.blocks.insert((i, j), b);
                }
            }
        }
        out
    }
}

pub fn flatten(v: &FockVector) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_iterator(entry_count(v.d(), v.max_level()), v.levels().iter().flatten().copied())
}

pub fn unflatten(d: usize, max_level: usize, x: &nalgebra::DVector<f64>) -> FockVector {
    let mut v = FockVector::zeros(d, max_level);
    let mut it = x.iter();
    for n in 0..=max_level {
        for e in v.level_mut(n) {
            *e = *it.next().expect("vector length matches the level layout");
        }
    }
    v
}
