//! Endomorphism-valued differential forms.
//!
//! A form is stored coefficient-first: `Σ_I f_I ⊗ dx^I` with `I` a strictly increasing
//! multi-index encoded as a bitmask over the chart axes (bit `a` is axis `a+1`). All
//! signs come from two rules:
//!
//! * `(f ⊗ dx^I)(g ⊗ dx^J) = (−1)^{|I|·e_g} fg ⊗ dx^I∧dx^J` where `e_g` is the endomorphism
//!   degree of `g`;
//! * `d(f ⊗ dx^I) = (−1)^e Σ_j ∂_j f ⊗ dx_j∧dx^I`.
//!
//! The second makes `d` a graded derivation for the total degree `p + e`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, ExprError, Result};
use crate::expr::{Chart, ScalarExpr, Tape};
use crate::graded::{same_dims, GradedDims, GradedEndo};
use crate::quad::{tensor_grid, QuadSpec};

// ---------------------------------------------------------------------------
// Multi-index helpers

/// Bitmask of a strictly increasing 1-based multi-index.
pub fn mask_from_indices(indices: &[usize]) -> Result<u32> {
    let mut mask = 0u32;
    let mut last = 0usize;
    for &i in indices {
        if i == 0 || i > 32 || i <= last {
            return Err(Error::InvalidInput(format!("multi-index {indices:?} must be strictly increasing in 1..=32")));
        }
        mask |= 1 << (i - 1);
        last = i;
    }
    Ok(mask)
}

/// 1-based indices of a mask, increasing.
pub fn indices_of(mask: u32) -> Vec<usize> {
    (0..32).filter(|b| mask & (1 << b) != 0).map(|b| b + 1).collect()
}

/// Sign of `dx^a ∧ dx^b` relative to the increasing monomial `dx^{a∪b}`; `None` when
/// the index sets overlap.
pub fn merge_sign(a: u32, b: u32) -> Option<f64> {
    if a & b != 0 {
        return None;
    }
    let mut inversions = 0u32;
    let mut rest = b;
    while rest != 0 {
        let j = rest.trailing_zeros();
        inversions += (a >> (j + 1)).count_ones();
        rest &= rest - 1;
    }
    Some(if inversions % 2 == 0 { 1.0 } else { -1.0 })
}

fn parity_sign(n: i64) -> f64 {
    if n.rem_euclid(2) == 0 {
        1.0
    } else {
        -1.0
    }
}

// ---------------------------------------------------------------------------
// Symbolic matrices

/// Square matrix of scalar expressions on the total graded space (row-major).
#[derive(Debug, Clone)]
pub struct ExprMatrix {
    n: usize,
    entries: Vec<ScalarExpr>,
}

impl ExprMatrix {
    pub fn zero(n: usize) -> ExprMatrix {
        ExprMatrix { n, entries: vec![ScalarExpr::zero(); n * n] }
    }

    pub fn identity(n: usize) -> ExprMatrix {
        let mut m = Self::zero(n);
        for i in 0..n {
            m.entries[i * n + i] = ScalarExpr::one();
        }
        m
    }

    pub fn from_f64(mat: &DMatrix<f64>) -> Result<ExprMatrix> {
        let n = mat.nrows();
        let mut m = Self::zero(n);
        for r in 0..n {
            for c in 0..n {
                let v = mat[(r, c)];
                if v != 0.0 {
                    m.entries[r * n + c] = ScalarExpr::from_f64(v)
                        .ok_or_else(|| Error::InvalidInput("non-finite matrix entry".into()))?;
                }
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, c: usize) -> &ScalarExpr {
        &self.entries[r * self.n + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: ScalarExpr) {
        self.entries[r * self.n + c] = v;
    }

    pub fn entries(&self) -> &[ScalarExpr] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(ScalarExpr::is_zero)
    }

    fn map(&self, f: impl Fn(&ScalarExpr) -> ScalarExpr) -> ExprMatrix {
        ExprMatrix { n: self.n, entries: self.entries.iter().map(f).collect() }
    }

    fn zip(&self, other: &ExprMatrix, f: impl Fn(&ScalarExpr, &ScalarExpr) -> ScalarExpr) -> ExprMatrix {
        ExprMatrix { n: self.n, entries: self.entries.iter().zip(&other.entries).map(|(a, b)| f(a, b)).collect() }
    }

    pub fn add(&self, other: &ExprMatrix) -> ExprMatrix {
        self.zip(other, ScalarExpr::add)
    }

    pub fn sub(&self, other: &ExprMatrix) -> ExprMatrix {
        self.zip(other, ScalarExpr::sub)
    }

    pub fn neg(&self) -> ExprMatrix {
        self.map(ScalarExpr::neg)
    }

    pub fn scale(&self, s: &ScalarExpr) -> ExprMatrix {
        self.map(|e| s.mul(e))
    }

    pub fn scale_f64(&self, s: f64) -> ExprMatrix {
        if s == 1.0 {
            return self.clone();
        }
        if s == -1.0 {
            return self.neg();
        }
        let c = ScalarExpr::from_f64(s).unwrap_or_else(ScalarExpr::zero);
        self.scale(&c)
    }

    pub fn matmul(&self, other: &ExprMatrix) -> ExprMatrix {
        let n = self.n;
        let mut out = Self::zero(n);
        for r in 0..n {
            for k in 0..n {
                let a = self.get(r, k);
                if a.is_zero() {
                    continue;
                }
                for c in 0..n {
                    let b = other.get(k, c);
                    if b.is_zero() {
                        continue;
                    }
                    let idx = r * n + c;
                    out.entries[idx] = out.entries[idx].add(&a.mul(b));
                }
            }
        }
        out
    }

    pub fn diff(&self, var: &str) -> ExprMatrix {
        self.map(|e| e.diff(var))
    }

    fn subst_memo(&self, map: &HashMap<String, ScalarExpr>, memo: &mut HashMap<usize, ScalarExpr>) -> ExprMatrix {
        ExprMatrix { n: self.n, entries: self.entries.iter().map(|e| e.subst_memo(map, memo)).collect() }
    }

    /// Exact evaluation of every entry.
    pub fn eval_exact(
        &self,
        point: &HashMap<String, num_rational::BigRational>,
    ) -> Result<Vec<num_rational::BigRational>, ExprError> {
        self.entries.iter().map(|e| e.eval_exact(point)).collect()
    }
}

// ---------------------------------------------------------------------------
// Smooth maps

/// A smooth map between coordinate systems given by component expressions.
#[derive(Debug, Clone)]
pub struct SmoothMap {
    source: Arc<Chart>,
    target: Arc<Chart>,
    components: Vec<ScalarExpr>,
}

impl SmoothMap {
    pub fn new(source: Arc<Chart>, target: Arc<Chart>, components: Vec<ScalarExpr>) -> Result<SmoothMap> {
        if components.len() != target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "map needs {} components, got {}",
                target.dim(),
                components.len()
            )));
        }
        for (i, c) in components.iter().enumerate() {
            if let Some(v) = c.free_vars().into_iter().find(|v| !source.names().contains(v)) {
                return Err(Error::InvalidInput(format!(
                    "component {} uses '{v}', which is not a source coordinate (variable clash)",
                    i + 1
                )));
            }
        }
        Ok(SmoothMap { source, target, components })
    }

    pub fn identity(chart: &Arc<Chart>) -> SmoothMap {
        let comps = chart.names().iter().map(|n| ScalarExpr::var(n)).collect();
        SmoothMap { source: chart.clone(), target: chart.clone(), components: comps }
    }

    pub fn source(&self) -> &Arc<Chart> {
        &self.source
    }

    pub fn target(&self) -> &Arc<Chart> {
        &self.target
    }

    pub fn components(&self) -> &[ScalarExpr] {
        &self.components
    }

    /// Symbolic Jacobian, indexed `[target component][source axis]`.
    pub fn jacobian(&self) -> Vec<Vec<ScalarExpr>> {
        self.components
            .iter()
            .map(|h| self.source.names().iter().map(|u| h.diff(u)).collect())
            .collect()
    }

    /// Precomposition `self ∘ inner`.
    pub fn compose(&self, inner: &SmoothMap) -> Result<SmoothMap> {
        if inner.target.names() != self.source.names() {
            return Err(Error::DimensionMismatch("maps are not composable".into()));
        }
        let map: HashMap<String, ScalarExpr> =
            self.source.names().iter().cloned().zip(inner.components.iter().cloned()).collect();
        let mut memo = HashMap::new();
        let comps = self.components.iter().map(|c| c.subst_memo(&map, &mut memo)).collect();
        Ok(SmoothMap { source: inner.source.clone(), target: self.target.clone(), components: comps })
    }

    /// Compiled evaluator of the components and their Jacobian.
    pub fn compile(&self) -> Result<CompiledMap> {
        let names = self.source.names();
        let mut exprs = self.components.clone();
        for row in self.jacobian() {
            exprs.extend(row);
        }
        let tape = Tape::compile(names, &exprs)?;
        Ok(CompiledMap { tape, m: self.components.len(), k: names.len() })
    }
}

/// Compiled form of a [`SmoothMap`]: values and Jacobian at a point.
#[derive(Debug, Clone)]
pub struct CompiledMap {
    tape: Tape,
    m: usize,
    k: usize,
}

impl CompiledMap {
    /// Writes the image into `x` (length `m`) and the Jacobian row-major into `jac`
    /// (length `m·k`).
    pub fn eval(&self, u: &[f64], scratch: &mut Vec<f64>, x: &mut [f64], jac: &mut [f64]) -> Result<()> {
        let mut out = vec![0.0; self.m * (1 + self.k)];
        self.tape.eval(u, scratch, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::eval_at(u, ExprError::NonFinite));
        }
        x.copy_from_slice(&out[..self.m]);
        jac.copy_from_slice(&out[self.m..]);
        Ok(())
    }

    pub fn target_dim(&self) -> usize {
        self.m
    }

    pub fn source_dim(&self) -> usize {
        self.k
    }
}

// ---------------------------------------------------------------------------
// EndForm

/// Homogeneous form of degree `p` with coefficients in endomorphisms of degree `e`.
#[derive(Debug, Clone)]
pub struct EndForm {
    chart: Arc<Chart>,
    dims: Arc<GradedDims>,
    p: usize,
    e: i32,
    terms: BTreeMap<u32, ExprMatrix>,
}

impl EndForm {
    pub fn zero(chart: &Arc<Chart>, dims: &Arc<GradedDims>, p: usize, e: i32) -> EndForm {
        EndForm { chart: chart.clone(), dims: dims.clone(), p, e, terms: BTreeMap::new() }
    }

    /// The 0-form whose value is the identity endomorphism.
    pub fn identity(chart: &Arc<Chart>, dims: &Arc<GradedDims>) -> EndForm {
        let mut f = Self::zero(chart, dims, 0, 0);
        f.terms.insert(0, ExprMatrix::identity(dims.total()));
        f
    }

    /// Builds from `(mask, matrix)` terms, validating degrees and the block pattern.
    pub fn new(
        chart: &Arc<Chart>,
        dims: &Arc<GradedDims>,
        p: usize,
        e: i32,
        terms: impl IntoIterator<Item = (u32, ExprMatrix)>,
    ) -> Result<EndForm> {
        let mut f = Self::zero(chart, dims, p, e);
        let n = dims.total();
        for (mask, m) in terms {
            if mask.count_ones() as usize != p || (mask >> chart.dim()) != 0 {
                return Err(Error::InvalidInput(format!(
                    "multi-index {:?} is not a {p}-subset of the {} chart axes",
                    indices_of(mask),
                    chart.dim()
                )));
            }
            if m.size() != n {
                return Err(Error::DimensionMismatch(format!("coefficient must be {n}x{n}")));
            }
            for r in 0..n {
                for c in 0..n {
                    if !m.get(r, c).is_zero() && !dims.allowed(e, r, c) {
                        return Err(Error::DegreeMismatch(format!(
                            "entry ({r},{c}) of the dx^{:?} coefficient is outside degree {e}",
                            indices_of(mask)
                        )));
                    }
                }
            }
            f.accumulate(mask, m);
        }
        Ok(f)
    }

    /// Builds from blocks keyed by source degree.
    pub fn from_blocks(
        chart: &Arc<Chart>,
        dims: &Arc<GradedDims>,
        p: usize,
        e: i32,
        terms: impl IntoIterator<Item = (u32, Vec<(i32, Vec<Vec<ScalarExpr>>)>)>,
    ) -> Result<EndForm> {
        let n = dims.total();
        let mut mats = Vec::new();
        for (mask, blocks) in terms {
            let mut m = ExprMatrix::zero(n);
            for (k, rows) in blocks {
                let nr = dims.dim(k + e);
                let nc = dims.dim(k);
                if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
                    return Err(Error::DimensionMismatch(format!(
                        "block from degree {k} must be {nr}x{nc}"
                    )));
                }
                if nr == 0 || nc == 0 {
                    continue;
                }
                let r0 = dims.offset(k + e).unwrap_or(0);
                let c0 = dims.offset(k).unwrap_or(0);
                for (i, row) in rows.into_iter().enumerate() {
                    for (j, v) in row.into_iter().enumerate() {
                        let cur = m.get(r0 + i, c0 + j).add(&v);
                        m.set(r0 + i, c0 + j, cur);
                    }
                }
            }
            mats.push((mask, m));
        }
        Self::new(chart, dims, p, e, mats)
    }

    /// Constant form `a ⊗ dx^mask`.
    pub fn constant(chart: &Arc<Chart>, mask: u32, a: &GradedEndo) -> Result<EndForm> {
        let p = mask.count_ones() as usize;
        Self::new(chart, a.dims(), p, a.degree(), [(mask, ExprMatrix::from_f64(a.matrix())?)])
    }

    fn accumulate(&mut self, mask: u32, m: ExprMatrix) {
        if m.is_zero() {
            return;
        }
        let merged = match self.terms.remove(&mask) {
            Some(old) => old.add(&m),
            None => m,
        };
        if !merged.is_zero() {
            self.terms.insert(mask, merged);
        }
    }

    pub fn chart(&self) -> &Arc<Chart> {
        &self.chart
    }

    pub fn dims(&self) -> &Arc<GradedDims> {
        &self.dims
    }

    pub fn form_degree(&self) -> usize {
        self.p
    }

    pub fn endo_degree(&self) -> i32 {
        self.e
    }

    pub fn terms(&self) -> impl Iterator<Item = (u32, &ExprMatrix)> {
        self.terms.iter().map(|(k, v)| (*k, v))
    }

    pub fn coefficient(&self, mask: u32) -> Option<&ExprMatrix> {
        self.terms.get(&mask)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn check_compatible(&self, other: &EndForm) -> Result<()> {
        same_dims(&self.dims, &other.dims)?;
        if !(Arc::ptr_eq(&self.chart, &other.chart) || self.chart == other.chart) {
            return Err(Error::DimensionMismatch("forms live on different charts".into()));
        }
        Ok(())
    }

    fn check_same_type(&self, other: &EndForm) -> Result<()> {
        self.check_compatible(other)?;
        if self.p != other.p || self.e != other.e {
            return Err(Error::DegreeMismatch(format!(
                "cannot add forms of bidegree ({}, {}) and ({}, {})",
                self.p, self.e, other.p, other.e
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &EndForm) -> Result<EndForm> {
        self.check_same_type(other)?;
        let mut out = self.clone();
        for (mask, m) in &other.terms {
            out.accumulate(*mask, m.clone());
        }
        Ok(out)
    }

    pub fn sub(&self, other: &EndForm) -> Result<EndForm> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> EndForm {
        EndForm { terms: self.terms.iter().map(|(k, v)| (*k, v.neg())).collect(), ..self.clone() }
    }

    pub fn scale(&self, s: f64) -> EndForm {
        let mut out = Self::zero(&self.chart, &self.dims, self.p, self.e);
        for (k, v) in &self.terms {
            out.accumulate(*k, v.scale_f64(s));
        }
        out
    }

    /// Wedge product with the Koszul sign `(−1)^{p·e_B}`.
    pub fn wedge(&self, other: &EndForm) -> Result<EndForm> {
        self.check_compatible(other)?;
        let koszul = parity_sign(self.p as i64 * other.e as i64);
        let mut out = Self::zero(&self.chart, &self.dims, self.p + other.p, self.e + other.e);
        for (ma, a) in &self.terms {
            for (mb, b) in &other.terms {
                if let Some(s) = merge_sign(*ma, *mb) {
                    let prod = a.matmul(b);
                    out.accumulate(ma | mb, prod.scale_f64(s * koszul));
                }
            }
        }
        Ok(out)
    }

    /// Exterior derivative `(−1)^e Σ_j ∂_j f ⊗ dx_j∧dx^I`.
    pub fn ext_d(&self) -> EndForm {
        let sign = parity_sign(i64::from(self.e));
        let mut out = Self::zero(&self.chart, &self.dims, self.p + 1, self.e);
        for (mask, m) in &self.terms {
            for (j, name) in self.chart.names().iter().enumerate() {
                let bit = 1u32 << j;
                if let Some(s) = merge_sign(bit, *mask) {
                    let dm = m.diff(name);
                    if !dm.is_zero() {
                        out.accumulate(mask | bit, dm.scale_f64(s * sign));
                    }
                }
            }
        }
        out
    }

    /// Symbolic pullback along `h`, whose target must be this form's chart.
    pub fn pullback(&self, h: &SmoothMap) -> Result<EndForm> {
        if !(Arc::ptr_eq(h.target(), &self.chart) || **h.target() == *self.chart) {
            return Err(Error::DimensionMismatch("pullback map targets a different chart".into()));
        }
        let jac = h.jacobian();
        let map: HashMap<String, ScalarExpr> =
            self.chart.names().iter().cloned().zip(h.components().iter().cloned()).collect();
        let mut memo = HashMap::new();
        let k = h.source().dim();
        let mut out = Self::zero(h.source(), &self.dims, self.p, self.e);
        for (mask, m) in &self.terms {
            let coeff = m.subst_memo(&map, &mut memo);
            // dh_{i1} ∧ ... ∧ dh_{ip} expanded over source monomials
            let mut wedge: BTreeMap<u32, ScalarExpr> = BTreeMap::from([(0, ScalarExpr::one())]);
            for i in indices_of(*mask) {
                let mut next: BTreeMap<u32, ScalarExpr> = BTreeMap::new();
                for (s, c) in &wedge {
                    for (a, da) in jac[i - 1].iter().enumerate().take(k) {
                        if da.is_zero() {
                            continue;
                        }
                        let bit = 1u32 << a;
                        if let Some(sign) = merge_sign(*s, bit) {
                            let term = c.mul(da);
                            let term = if sign < 0.0 { term.neg() } else { term };
                            let entry = next.entry(s | bit).or_insert_with(ScalarExpr::zero);
                            *entry = entry.add(&term);
                        }
                    }
                }
                wedge = next;
            }
            for (s, c) in wedge {
                if !c.is_zero() {
                    out.accumulate(s, coeff.scale(&c));
                }
            }
        }
        Ok(out)
    }

    /// Decomposes `A = (A/t)∧dt + A^⊥` along the chart axis `t_axis` (0-based).
    pub fn split_t(&self, t_axis: usize) -> Result<(EndForm, EndForm)> {
        if t_axis >= self.chart.dim() {
            return Err(Error::InvalidInput(format!("axis {t_axis} is outside the chart")));
        }
        let bit = 1u32 << t_axis;
        let mut over = Self::zero(&self.chart, &self.dims, self.p.saturating_sub(1), self.e);
        let mut perp = Self::zero(&self.chart, &self.dims, self.p, self.e);
        for (mask, m) in &self.terms {
            if mask & bit != 0 {
                let rest = mask & !bit;
                // dx^mask = sign · dx^rest ∧ dt
                let sign = merge_sign(rest, bit).unwrap_or(1.0);
                over.accumulate(rest, m.scale_f64(sign));
            } else {
                perp.accumulate(*mask, m.clone());
            }
        }
        Ok((over, perp))
    }

    /// Restricts axis `axis` to the constant `value`, dropping the terms containing it.
    /// The result lives on the same chart; the frozen axis simply no longer appears.
    pub fn restrict_axis(&self, axis: usize, value: f64) -> Result<EndForm> {
        let name = self.chart.names()[axis].clone();
        let v = ScalarExpr::from_f64(value).ok_or_else(|| Error::InvalidInput("non-finite axis value".into()))?;
        let map = HashMap::from([(name, v)]);
        let bit = 1u32 << axis;
        let mut memo = HashMap::new();
        let mut out = Self::zero(&self.chart, &self.dims, self.p, self.e);
        for (k, m) in &self.terms {
            if k & bit == 0 {
                out.accumulate(*k, m.subst_memo(&map, &mut memo));
            }
        }
        Ok(out)
    }

    /// Numeric value at a point of the chart, as a cube form over all chart axes.
    pub fn eval_cubeform(&self, point: &[f64]) -> Result<CubeForm> {
        self.compile()?.eval(point)
    }

    pub fn compile(&self) -> Result<CompiledForm> {
        CompiledForm::new(self)
    }
}

/// Differentiates every coefficient with respect to chart axis `axis`.
pub fn diff_coefficients(form: &EndForm, axis: usize) -> Result<EndForm> {
    let name = form.chart().names().get(axis).ok_or_else(|| Error::InvalidInput(format!("axis {axis} is outside the chart")))?;
    EndForm::new(form.chart(), form.dims(), form.form_degree(), form.endo_degree(), form.terms().map(|(k, m)| (k, m.diff(name))))
}

fn max_pointwise(diff: &EndForm, points: &[Vec<f64>]) -> Result<f64> {
    let c = diff.compile()?;
    let mut worst = 0.0f64;
    for x in points {
        worst = worst.max(c.eval(x)?.norm());
    }
    Ok(worst)
}

/// Largest pointwise violation of the contraction/derivative identity
/// `d_w(A/t) = (dA)/t − (−1)^{p+e} ∂_t A^⊥`, where `d_w` is the exterior derivative
/// along the other axes (the `dt` part of `d` dropped). For total degree `p + e = 1`
/// this reads `d_w(A/t) = (dA)/t + ∂_t A^⊥`.
pub fn contraction_d_residual(a: &EndForm, t_axis: usize, points: &[Vec<f64>]) -> Result<f64> {
    let (over, perp) = a.split_t(t_axis)?;
    let lhs = if a.form_degree() == 0 {
        EndForm::zero(a.chart(), a.dims(), 0, a.endo_degree())
    } else {
        over.ext_d().split_t(t_axis)?.1
    };
    let da_over = a.ext_d().split_t(t_axis)?.0;
    let sign = parity_sign(a.form_degree() as i64 + i64::from(a.endo_degree()));
    let rhs = da_over.sub(&diff_coefficients(&perp, t_axis)?.scale(sign))?;
    max_pointwise(&lhs.sub(&rhs)?, points)
}

/// Largest pointwise violation of `(A∧B)/t = A^⊥∧(B/t) + (−1)^{n_B} (A/t)∧B^⊥`,
/// where `n_B` is the total degree of `B`. For odd `n_B` (superconnection components)
/// the second term enters with a minus sign.
pub fn contraction_wedge_residual(a: &EndForm, b: &EndForm, t_axis: usize, points: &[Vec<f64>]) -> Result<f64> {
    let (a_over, a_perp) = a.split_t(t_axis)?;
    let (b_over, b_perp) = b.split_t(t_axis)?;
    let lhs = a.wedge(b)?.split_t(t_axis)?.0;
    let sign = parity_sign(b.form_degree() as i64 + i64::from(b.endo_degree()));
    let rhs = a_perp.wedge(&b_over)?.add(&a_over.wedge(&b_perp)?.scale(sign))?;
    max_pointwise(&lhs.sub(&rhs)?, points)
}

// ---------------------------------------------------------------------------
// Compiled forms

/// An [`EndForm`] compiled for fast repeated numeric evaluation.
#[derive(Debug, Clone)]
pub struct CompiledForm {
    dims: Arc<GradedDims>,
    axes: usize,
    e: i32,
    masks: Vec<u32>,
    /// Per mask, the (row, col) positions that may be nonzero.
    positions: Vec<Vec<(usize, usize)>>,
    tape: Tape,
}

impl CompiledForm {
    pub fn new(form: &EndForm) -> Result<CompiledForm> {
        let mut masks = Vec::new();
        let mut positions = Vec::new();
        let mut exprs = Vec::new();
        let n = form.dims.total();
        for (mask, m) in &form.terms {
            let mut pos = Vec::new();
            for r in 0..n {
                for c in 0..n {
                    let e = m.get(r, c);
                    if !e.is_zero() {
                        pos.push((r, c));
                        exprs.push(e.clone());
                    }
                }
            }
            masks.push(*mask);
            positions.push(pos);
        }
        let tape = Tape::compile(form.chart.names(), &exprs)?;
        Ok(CompiledForm { dims: form.dims.clone(), axes: form.chart.dim(), e: form.e, masks, positions, tape })
    }

    pub fn endo_degree(&self) -> i32 {
        self.e
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn is_zero(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn eval(&self, point: &[f64]) -> Result<CubeForm> {
        let mut scratch = Vec::new();
        self.eval_with(point, &mut scratch)
    }

    pub fn eval_with(&self, point: &[f64], scratch: &mut Vec<f64>) -> Result<CubeForm> {
        let mut vals = vec![0.0; self.tape.num_outputs()];
        self.tape.eval(point, scratch, &mut vals);
        if let Some(bad) = vals.iter().position(|v| !v.is_finite()) {
            let _ = bad;
            return Err(Error::eval_at(point, ExprError::NonFinite));
        }
        let n = self.dims.total();
        let mut out = CubeForm::zero(self.axes, &self.dims, self.e);
        let mut it = vals.into_iter();
        for (mask, pos) in self.masks.iter().zip(&self.positions) {
            let mut m = DMatrix::zeros(n, n);
            for &(r, c) in pos {
                m[(r, c)] = it.next().unwrap_or(0.0);
            }
            out.terms.insert(*mask, GradedEndo::from_matrix_unchecked(&self.dims, self.e, m));
        }
        Ok(out)
    }

    /// Raw coefficient matrices at a point, indexed like [`CompiledForm::masks`].
    pub(crate) fn eval_raw(&self, point: &[f64], scratch: &mut Vec<f64>, vals: &mut Vec<f64>) -> Result<()> {
        vals.resize(self.tape.num_outputs(), 0.0);
        self.tape.eval(point, scratch, vals);
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::eval_at(point, ExprError::NonFinite));
        }
        Ok(())
    }

    pub(crate) fn masks(&self) -> &[u32] {
        &self.masks
    }

    pub(crate) fn positions(&self) -> &[Vec<(usize, usize)>] {
        &self.positions
    }
}

// ---------------------------------------------------------------------------
// CubeForm

/// Numeric form over `k` parameter axes with coefficients of a fixed endomorphism
/// degree. Mixed form degrees are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeForm {
    axes: usize,
    dims: Arc<GradedDims>,
    e: i32,
    terms: BTreeMap<u32, GradedEndo>,
}

impl CubeForm {
    pub fn zero(axes: usize, dims: &Arc<GradedDims>, e: i32) -> CubeForm {
        CubeForm { axes, dims: dims.clone(), e, terms: BTreeMap::new() }
    }

    /// A 0-form with the given value.
    pub fn scalar(axes: usize, value: GradedEndo) -> CubeForm {
        let mut f = Self::zero(axes, value.dims(), value.degree());
        f.terms.insert(0, value);
        f
    }

    pub fn from_terms(
        axes: usize,
        dims: &Arc<GradedDims>,
        e: i32,
        terms: impl IntoIterator<Item = (u32, GradedEndo)>,
    ) -> Result<CubeForm> {
        let mut f = Self::zero(axes, dims, e);
        for (mask, v) in terms {
            if mask >> axes != 0 {
                return Err(Error::InvalidInput(format!("mask {mask:#b} exceeds {axes} axes")));
            }
            same_dims(dims, v.dims())?;
            if v.degree() != e {
                return Err(Error::DegreeMismatch(format!("term of degree {} in a degree {e} form", v.degree())));
            }
            f.add_term(mask, 1.0, &v);
        }
        Ok(f)
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn dims(&self) -> &Arc<GradedDims> {
        &self.dims
    }

    pub fn endo_degree(&self) -> i32 {
        self.e
    }

    pub fn terms(&self) -> impl Iterator<Item = (u32, &GradedEndo)> {
        self.terms.iter().map(|(k, v)| (*k, v))
    }

    pub fn component(&self, mask: u32) -> GradedEndo {
        self.terms.get(&mask).cloned().unwrap_or_else(|| GradedEndo::zero(&self.dims, self.e))
    }

    /// Coefficient of `dw_1∧…∧dw_k`.
    pub fn top(&self) -> GradedEndo {
        self.component(full_mask(self.axes))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.values().all(GradedEndo::is_zero)
    }

    /// Form degrees present with a nonzero coefficient.
    pub fn form_degrees(&self) -> Vec<usize> {
        let mut d: Vec<usize> =
            self.terms.iter().filter(|(_, v)| !v.is_zero()).map(|(k, _)| k.count_ones() as usize).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub(crate) fn add_term(&mut self, mask: u32, a: f64, v: &GradedEndo) {
        match self.terms.get_mut(&mask) {
            Some(cur) => cur.axpy(a, v),
            None => {
                self.terms.insert(mask, v.scale(a));
            }
        }
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &CubeForm) {
        for (mask, v) in &other.terms {
            self.add_term(*mask, a, v);
        }
    }

    pub fn add(&self, other: &CubeForm) -> Result<CubeForm> {
        self.check_same(other)?;
        let mut out = self.clone();
        out.axpy(1.0, other);
        Ok(out)
    }

    pub fn sub(&self, other: &CubeForm) -> Result<CubeForm> {
        self.check_same(other)?;
        let mut out = self.clone();
        out.axpy(-1.0, other);
        Ok(out)
    }

    pub fn scale(&self, a: f64) -> CubeForm {
        CubeForm { terms: self.terms.iter().map(|(k, v)| (*k, v.scale(a))).collect(), ..self.clone() }
    }

    fn check_same(&self, other: &CubeForm) -> Result<()> {
        same_dims(&self.dims, &other.dims)?;
        if self.axes != other.axes || self.e != other.e {
            return Err(Error::DegreeMismatch("cube forms of different shape".into()));
        }
        Ok(())
    }

    /// Largest coefficient norm (0 for the zero form).
    pub fn norm(&self) -> f64 {
        self.terms.values().map(GradedEndo::op_norm).fold(0.0, f64::max)
    }

    /// Keeps only the axes in `0..axes` (terms involving later axes are dropped).
    pub fn truncate_axes(&self, axes: usize) -> CubeForm {
        let keep = full_mask(axes);
        CubeForm {
            axes,
            dims: self.dims.clone(),
            e: self.e,
            terms: self.terms.iter().filter(|(k, _)| **k & !keep == 0).map(|(k, v)| (*k, v.clone())).collect(),
        }
    }
}

pub(crate) fn full_mask(k: usize) -> u32 {
    if k >= 32 {
        u32::MAX
    } else {
        (1u32 << k) - 1
    }
}

/// Product of cube forms: subset merge sign times `(−1)^{|S_a|·e_b}`.
pub fn cube_wedge(a: &CubeForm, b: &CubeForm) -> Result<CubeForm> {
    same_dims(&a.dims, &b.dims)?;
    if a.axes != b.axes {
        return Err(Error::DimensionMismatch(format!("{} axes vs {} axes", a.axes, b.axes)));
    }
    let mut out = CubeForm::zero(a.axes, &a.dims, a.e + b.e);
    let odd_b = b.e.rem_euclid(2) == 1;
    for (ma, va) in &a.terms {
        for (mb, vb) in &b.terms {
            if let Some(mut s) = merge_sign(*ma, *mb) {
                if odd_b && ma.count_ones() % 2 == 1 {
                    s = -s;
                }
                let prod = va.compose(vb)?;
                out.add_term(ma | mb, s, &prod);
            }
        }
    }
    Ok(out)
}

/// Integrates the top component of `field` over `I^k` with the tensor Gauss rule.
///
/// Nodes are evaluated in parallel; the sum is accumulated in node order.
pub fn fiber_integrate<F>(field: F, k: usize, quad: &QuadSpec) -> Result<GradedEndo>
where
    F: Fn(&[f64]) -> Result<CubeForm> + Sync,
{
    quad.validate()?;
    let grid = tensor_grid(&quad.axis_rule(), k);
    let values: Vec<Result<GradedEndo>> = grid
        .par_iter()
        .map(|(pt, _)| {
            let f = field(pt)?;
            if f.axes() != k {
                return Err(Error::DimensionMismatch(format!("field has {} axes, expected {k}", f.axes())));
            }
            Ok(f.top())
        })
        .collect();
    let mut acc: Option<GradedEndo> = None;
    for ((_, w), v) in grid.iter().zip(values) {
        let v = v?;
        match &mut acc {
            None => acc = Some(v.scale(*w)),
            Some(a) => a.axpy(*w, &v),
        }
    }
    acc.ok_or_else(|| Error::Quadrature("empty quadrature grid".into()))
}
