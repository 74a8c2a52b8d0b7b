//! Truncated free Fock space.
//!
//! A [`FockVector`] stores one dense tensor per level. Level `n` is a flat
//! row-major array of length `d^n`; slot 1 is the most significant index, so
//! the word `(x1, …, xn)` lives at `x1·d^(n−1) + … + xn`.

use std::collections::{BTreeMap, HashMap};

use serde_json::Value;

use crate::model::IndexSpace;
use crate::{Error, Result};

/// Default cap on `Σ_{n≤L} d^n` stored entries.
pub const DEFAULT_BUDGET: usize = 10_000_000;

/// Entries needed for levels `0..=max_level`, saturating on overflow.
pub fn entry_count(d: usize, max_level: usize) -> usize {
    let mut total = 0usize;
    let mut width = 1usize;
    for _ in 0..=max_level {
        total = total.saturating_add(width);
        width = width.saturating_mul(d);
    }
    total
}

pub fn check_budget(d: usize, max_level: usize, budget: usize) -> Result<()> {
    let needed = entry_count(d, max_level);
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    Ok(())
}

pub fn flat_index(d: usize, word: &[usize]) -> usize {
    word.iter().fold(0, |acc, &x| acc * d + x)
}

pub fn word_at(d: usize, n: usize, mut idx: usize) -> Vec<usize> {
    let mut w = vec![0; n];
    for slot in (0..n).rev() {
        w[slot] = idx % d;
        idx /= d;
    }
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct FockVector {
    d: usize,
    levels: Vec<Vec<f64>>,
}

impl FockVector {
    pub fn zeros(d: usize, max_level: usize) -> Self {
        let mut levels = Vec::with_capacity(max_level + 1);
        let mut width = 1;
        for _ in 0..=max_level {
            levels.push(vec![0.0; width]);
            width *= d;
        }
        Self { d, levels }
    }

    pub fn vacuum(d: usize, max_level: usize) -> Self {
        let mut v = Self::zeros(d, max_level);
        v.levels[0][0] = 1.0;
        v
    }

    /// Basis word `η*(x1)…η*(xn)|0⟩`.
    pub fn basis_word(d: usize, max_level: usize, word: &[usize]) -> Result<Self> {
        if word.len() > max_level {
            return Err(Error::LevelOutOfRange { level: word.len(), max: max_level });
        }
        let mut v = Self::zeros(d, max_level);
        v.levels[word.len()][flat_index(d, word)] = 1.0;
        Ok(v)
    }

    pub fn from_levels(d: usize, levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::ShapeError("a Fock vector needs at least level 0".into()));
        }
        let mut width = 1usize;
        for (n, l) in levels.iter().enumerate() {
            if l.len() != width {
                return Err(Error::ShapeError(format!("level {n} has {} entries, expected {width}", l.len())));
            }
            width = width.saturating_mul(d);
        }
        Ok(Self { d, levels })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Truncation level `L`.
    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, n: usize) -> &[f64] {
        &self.levels[n]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.levels[n]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Vec<f64>> {
        self.levels
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().flatten().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.d != other.d || self.levels.len() != other.levels.len() {
            return Err(Error::ShapeError(format!(
                "vectors differ in shape: (d={}, L={}) vs (d={}, L={})",
                self.d,
                self.max_level(),
                other.d,
                other.max_level()
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.levels.iter_mut().flatten().for_each(|x| *x *= c);
        out
    }

    /// `self += c·other`.
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn level_norm(&self, n: usize) -> f64 {
        self.levels[n].iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn level_max_abs(&self, n: usize) -> f64 {
        self.levels[n].iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.levels.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute entry difference on levels `0..=upto`.
    pub fn max_abs_diff(&self, other: &Self, upto: usize) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self.levels[..=upto.min(self.max_level())]
            .iter()
            .zip(&other.levels)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    /// Copy with levels above `n` zeroed.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        for l in out.levels.iter_mut().skip(n + 1) {
            l.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    /// Same content re-embedded at a different truncation level.
    pub fn resized(&self, max_level: usize) -> Self {
        let mut out = Self::zeros(self.d, max_level);
        for (n, l) in self.levels.iter().enumerate().take(max_level + 1) {
            out.levels[n].copy_from_slice(l);
        }
        out
    }

    pub fn project_level(&self, n: usize) -> Result<Self> {
        if n > self.max_level() {
            return Err(Error::LevelOutOfRange { level: n, max: self.max_level() });
        }
        let mut out = Self::zeros(self.d, self.max_level());
        out.levels[n].copy_from_slice(&self.levels[n]);
        Ok(out)
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    /// Averages every level over all slot permutations.
    pub fn symmetrize(&self) -> Self {
        let d = self.d;
        let mut out = self.clone();
        for (n, level) in out.levels.iter_mut().enumerate().skip(2) {
            // Orbit averages: the n! permutations hit each distinct
            // rearrangement of a multiset equally often.
            let mut sums: HashMap<Vec<usize>, (f64, usize)> = HashMap::new();
            for (i, x) in level.iter().enumerate() {
                let mut key = word_at(d, n, i);
                key.sort_unstable();
                let e = sums.entry(key).or_insert((0.0, 0));
                e.0 += x;
                e.1 += 1;
            }
            for (i, x) in level.iter_mut().enumerate() {
                let mut key = word_at(d, n, i);
                key.sort_unstable();
                let (s, c) = sums[&key];
                *x = s / c as f64;
            }
        }
        out
    }

    pub fn extract_correlation(&self, word: &[usize]) -> Result<f64> {
        if word.len() > self.max_level() {
            return Err(Error::LevelOutOfRange { level: word.len(), max: self.max_level() });
        }
        if let Some(&x) = word.iter().find(|&&x| x >= self.d) {
            return Err(Error::ShapeError(format!("label {x} outside 0..{}", self.d)));
        }
        Ok(self.levels[word.len()][flat_index(self.d, word)])
    }

    pub fn to_json(&self) -> Value {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(n, l)| nest(l, self.d, n))
            .collect::<Vec<_>>();
        serde_json::json!({ "d": self.d, "L": self.max_level(), "levels": levels })
    }

    pub fn to_json_string(&self) -> String {
        self.to_json().to_string()
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let bad = |m: &str| Error::ShapeError(format!("Fock vector JSON: {m}"));
        let d = value.get("d").and_then(Value::as_u64).ok_or_else(|| bad("missing `d`"))? as usize;
        let max_level = value.get("L").and_then(Value::as_u64).ok_or_else(|| bad("missing `L`"))? as usize;
        let raw = value.get("levels").and_then(Value::as_array).ok_or_else(|| bad("missing `levels`"))?;
        if raw.len() != max_level + 1 {
            return Err(bad("level count does not match `L`"));
        }
        let mut levels = Vec::with_capacity(raw.len());
        for (n, l) in raw.iter().enumerate() {
            let mut flat = Vec::new();
            flatten(l, d, n, &mut flat).map_err(|m| bad(&format!("level {n}: {m}")))?;
            levels.push(flat);
        }
        Self::from_levels(d, levels)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json(&serde_json::from_str(s)?)
    }
}

fn nest(flat: &[f64], d: usize, depth: usize) -> Value {
    if depth == 0 {
        return Value::from(flat[0]);
    }
    if depth == 1 {
        return Value::Array(flat.iter().map(|&x| Value::from(x)).collect());
    }
    let chunk = flat.len() / d;
    Value::Array(flat.chunks(chunk.max(1)).map(|c| nest(c, d, depth - 1)).collect())
}

fn flatten(v: &Value, d: usize, depth: usize, out: &mut Vec<f64>) -> std::result::Result<(), String> {
    if depth == 0 {
        out.push(v.as_f64().ok_or("expected a number")?);
        return Ok(());
    }
    let arr = v.as_array().ok_or("expected an array")?;
    if arr.len() != d {
        return Err(format!("array of length {}, expected {d}", arr.len()));
    }
    arr.iter().try_for_each(|x| flatten(x, d, depth - 1, out))
}

pub fn vacuum(space: &IndexSpace, max_level: usize) -> FockVector {
    FockVector::vacuum(space.dim(), max_level)
}

pub fn project_level(v: &FockVector, n: usize) -> Result<FockVector> {
    v.project_level(n)
}

pub fn inner(u: &FockVector, v: &FockVector) -> Result<f64> {
    u.inner(v)
}

pub fn symmetrize(v: &FockVector) -> FockVector {
    v.symmetrize()
}

pub fn extract_correlation(v: &FockVector, word: &[usize]) -> Result<f64> {
    v.extract_correlation(word)
}

/// Word → value map keyed by label sequences.
pub type CorrelationTable = BTreeMap<Vec<usize>, f64>;

#[derive(Clone, Debug)]
pub struct Assembled {
    pub vector: FockVector,
    /// Words of length ≤ L absent from the table (filled with 0).
    pub missing: usize,
    /// Table entries longer than L (ignored).
    pub ignored: usize,
}

pub fn assemble_with_report(table: &CorrelationTable, space: &IndexSpace, max_level: usize) -> Result<Assembled> {
    let d = space.dim();
    if let Some(&v0) = table.get(&Vec::new()) {
        if v0 != 1.0 {
            return Err(Error::NormalizationError(v0));
        }
    }
    let mut vector = FockVector::vacuum(d, max_level);
    let mut covered = vec![0usize; max_level + 1];
    covered[0] = 1;
    let mut ignored = 0;
    for (word, &value) in table {
        if word.is_empty() {
            continue;
        }
        if word.len() > max_level {
            ignored += 1;
            continue;
        }
        if let Some(&x) = word.iter().find(|&&x| x >= d) {
            return Err(Error::ShapeError(format!("label {x} outside 0..{d}")));
        }
        vector.levels[word.len()][flat_index(d, word)] = value;
        covered[word.len()] += 1;
    }
    let missing = (0..=max_level).map(|n| vector.levels[n].len() - covered[n]).sum();
    if missing > 0 {
        log::warn!("{missing} correlation words missing from the table; filled with 0");
    }
    if ignored > 0 {
        log::warn!("{ignored} table words exceed the truncation level and were ignored");
    }
    Ok(Assembled { vector, missing, ignored })
}

pub fn assemble_from_correlations(table: &CorrelationTable, space: &IndexSpace, max_level: usize) -> Result<FockVector> {
    assemble_with_report(table, space, max_level).map(|a| a.vector)
}
