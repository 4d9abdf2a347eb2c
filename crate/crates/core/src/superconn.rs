//! Superconnections `D = d − A_0 − A_1 − … − A_m` and their flatness residuals.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::Chart;
use crate::forms::{CompiledForm, EndForm};
use crate::graded::{GradedDims, GradedEndo};

/// A superconnection on the trivial bundle with fiber `dims` over `chart`.
#[derive(Debug, Clone)]
pub struct Superconnection {
    chart: Arc<Chart>,
    dims: Arc<GradedDims>,
    /// `forms[p]` is `A_p`, for `p = 0..=m`.
    forms: Vec<EndForm>,
}

impl Superconnection {
    /// Builds from components `A_0, A_1, …`; missing components are zero.
    pub fn new(chart: &Arc<Chart>, dims: &Arc<GradedDims>, components: Vec<EndForm>) -> Result<Superconnection> {
        let m = chart.dim();
        let mut forms: Vec<EndForm> = (0..=m).map(|p| EndForm::zero(chart, dims, p, 1 - p as i32)).collect();
        for (p, a) in components.into_iter().enumerate() {
            if a.form_degree() != p || a.endo_degree() != 1 - p as i32 {
                return Err(Error::DegreeMismatch(format!(
                    "A_{p} must have bidegree ({p}, {}), got ({}, {})",
                    1 - p as i32,
                    a.form_degree(),
                    a.endo_degree()
                )));
            }
            if p > m {
                if !a.is_zero() {
                    return Err(Error::InvalidInput(format!("A_{p} exceeds the chart dimension {m}")));
                }
                continue;
            }
            forms[p] = forms[p].add(&a)?;
        }
        Ok(Superconnection { chart: chart.clone(), dims: dims.clone(), forms })
    }

    /// `D = d`.
    pub fn trivial(chart: &Arc<Chart>, dims: &Arc<GradedDims>) -> Superconnection {
        Self::new(chart, dims, Vec::new()).expect("zero components are always valid")
    }

    pub fn chart(&self) -> &Arc<Chart> {
        &self.chart
    }

    pub fn dims(&self) -> &Arc<GradedDims> {
        &self.dims
    }

    /// Largest possible form degree, the chart dimension.
    pub fn max_degree(&self) -> usize {
        self.chart.dim()
    }

    /// `A_p`, zero above the chart dimension.
    pub fn component(&self, p: usize) -> EndForm {
        self.forms
            .get(p)
            .cloned()
            .unwrap_or_else(|| EndForm::zero(&self.chart, &self.dims, p, 1 - p as i32))
    }

    pub fn components(&self) -> &[EndForm] {
        &self.forms
    }

    /// `F_q = dA_q − Σ_{i=0}^{q+1} A_i A_{q+1−i}` for `q = −1..=2m−1` (with `dA_{−1} = 0`).
    pub fn residual_forms(&self) -> Result<Vec<(i32, EndForm)>> {
        let m = self.max_degree() as i32;
        let mut out = Vec::new();
        for q in -1..=(2 * m - 1) {
            let deg = (q + 1) as usize;
            let mut f = if q >= 0 {
                self.component(q as usize).ext_d()
            } else {
                EndForm::zero(&self.chart, &self.dims, 0, 2)
            };
            if deg > self.chart.dim() {
                out.push((q, EndForm::zero(&self.chart, &self.dims, deg, 1 - q)));
                continue;
            }
            for i in 0..=deg {
                let prod = self.component(i).wedge(&self.component(deg - i))?;
                f = f.sub(&prod)?;
            }
            out.push((q, f));
        }
        Ok(out)
    }

    pub fn compile(&self) -> Result<CompiledSuperconnection> {
        let forms = self.forms.iter().map(CompiledForm::new).collect::<Result<Vec<_>>>()?;
        Ok(CompiledSuperconnection { dims: self.dims.clone(), forms })
    }

    /// `A_0` evaluated at a chart point.
    pub fn a0_at(&self, x: &[f64]) -> Result<GradedEndo> {
        Ok(self.forms[0].eval_cubeform(x)?.component(0))
    }
}

/// Numeric evaluators for all components of a superconnection.
#[derive(Debug, Clone)]
pub struct CompiledSuperconnection {
    dims: Arc<GradedDims>,
    forms: Vec<CompiledForm>,
}

impl CompiledSuperconnection {
    pub fn dims(&self) -> &Arc<GradedDims> {
        &self.dims
    }

    /// Compiled `A_p`, or `None` above the chart dimension.
    pub fn form(&self, p: usize) -> Option<&CompiledForm> {
        self.forms.get(p)
    }

    pub fn a0_at(&self, x: &[f64]) -> Result<GradedEndo> {
        Ok(self.forms[0].eval(x)?.component(0))
    }
}

/// Where to sample flatness residuals.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleGrid {
    /// `10^min(m,3)` points: a uniform lattice strictly inside the chart box.
    Default,
    /// Uniform lattice with the given number of points per axis.
    Lattice(Vec<usize>),
    /// Explicit points.
    Points(Vec<Vec<f64>>),
}

impl SampleGrid {
    pub fn points(&self, chart: &Chart) -> Vec<Vec<f64>> {
        let bounds = chart.box_or_default();
        let m = chart.dim();
        let per_axis = match self {
            SampleGrid::Points(p) => return p.clone(),
            SampleGrid::Lattice(n) => n.clone(),
            SampleGrid::Default => default_lattice(m),
        };
        let mut pts = vec![Vec::with_capacity(m)];
        for (axis, (lo, hi)) in bounds.iter().enumerate() {
            let n = per_axis.get(axis).copied().unwrap_or(1).max(1);
            let mut next = Vec::with_capacity(pts.len() * n);
            for p in &pts {
                for i in 0..n {
                    let mut q = p.clone();
                    q.push(lo + (i as f64 + 0.5) * (hi - lo) / n as f64);
                    next.push(q);
                }
            }
            pts = next;
        }
        pts
    }
}

/// Per-axis counts for the default lattice: ten per axis up to three axes, and the
/// same total spread evenly once the chart is larger.
fn default_lattice(m: usize) -> Vec<usize> {
    if m <= 3 {
        vec![10; m]
    } else {
        let n = (1000f64.powf(1.0 / m as f64)).floor().max(2.0) as usize;
        vec![n; m]
    }
}

/// Sup-norm flatness residuals over a sample grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlatnessReport {
    /// `(q, sup_x ‖F_q(x)‖)` for `q = −1..=2m−1`.
    pub per_q: Vec<(i32, f64)>,
    pub overall: f64,
    pub num_points: usize,
    /// Point where the overall maximum is attained.
    pub worst_point: Vec<f64>,
}

impl FlatnessReport {
    pub fn residual(&self, q: i32) -> Option<f64> {
        self.per_q.iter().find(|(k, _)| *k == q).map(|(_, r)| *r)
    }
}

pub fn flatness_residuals(d: &Superconnection, grid: &SampleGrid) -> Result<FlatnessReport> {
    let residuals = d.residual_forms()?;
    let compiled: Vec<(i32, CompiledForm)> = residuals
        .iter()
        .map(|(q, f)| Ok((*q, f.compile()?)))
        .collect::<Result<_>>()?;
    let points = grid.points(d.chart());
    if let Some(bad) = points.iter().find(|p| p.len() != d.chart().dim()) {
        return Err(Error::DimensionMismatch(format!("grid point {bad:?} has the wrong dimension")));
    }
    let per_point: Vec<Result<Vec<f64>>> = points
        .par_iter()
        .map(|x| {
            let mut scratch = Vec::new();
            compiled.iter().map(|(_, f)| Ok(f.eval_with(x, &mut scratch)?.norm())).collect()
        })
        .collect();
    let mut per_q: Vec<(i32, f64)> = compiled.iter().map(|(q, _)| (*q, 0.0)).collect();
    let mut overall = 0.0;
    let mut worst_point = points.first().cloned().unwrap_or_default();
    for (x, r) in points.iter().zip(per_point) {
        for (slot, v) in per_q.iter_mut().zip(r?) {
            slot.1 = slot.1.max(v);
            if v > overall {
                overall = v;
                worst_point = x.clone();
            }
        }
    }
    Ok(FlatnessReport { per_q, overall, num_points: points.len(), worst_point })
}

pub fn is_flat(d: &Superconnection, grid: &SampleGrid, tol: f64) -> Result<bool> {
    Ok(flatness_residuals(d, grid)?.overall <= tol)
}

/// Random points inside the chart box, for symbolic identity checks.
fn probe_points(chart: &Chart, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = chart.box_or_default();
    (0..n)
        .map(|_| bounds.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect())
        .collect()
}

/// Conjugates by a degree-0 gauge `g`: `A'_1 = g⁻¹A_1g − g⁻¹dg`, `A'_p = g⁻¹A_pg`.
pub fn gauge_transform(d: &Superconnection, g: &EndForm, g_inv: &EndForm) -> Result<Superconnection> {
    for (name, f) in [("g", g), ("g_inv", g_inv)] {
        if f.form_degree() != 0 || f.endo_degree() != 0 {
            return Err(Error::DegreeMismatch(format!("{name} must be a 0-form of degree 0")));
        }
    }
    let prod = g.wedge(g_inv)?.compile()?;
    let n = d.dims().total();
    let mut worst: f64 = 0.0;
    for x in probe_points(d.chart(), 16, 0x9a09e) {
        let v = prod.eval(&x)?.component(0);
        let dev = (v.matrix() - nalgebra::DMatrix::<f64>::identity(n, n)).amax();
        worst = worst.max(dev);
    }
    if worst > 1e-10 {
        return Err(Error::InverseCheck(worst));
    }
    let mut forms = Vec::with_capacity(d.components().len());
    for (p, a) in d.components().iter().enumerate() {
        let mut conj = g_inv.wedge(a)?.wedge(g)?;
        if p == 1 {
            conj = conj.sub(&g_inv.wedge(&g.ext_d())?)?;
        }
        forms.push(conj);
    }
    Superconnection::new(d.chart(), d.dims(), forms)
}

/// Inhomogeneous form of fixed total degree, stored by form degree.
#[derive(Debug, Clone)]
struct TotalForm {
    parts: BTreeMap<usize, EndForm>,
}

impl TotalForm {
    fn mul(&self, other: &TotalForm, max_p: usize) -> Result<TotalForm> {
        let mut parts: BTreeMap<usize, EndForm> = BTreeMap::new();
        for (p, a) in &self.parts {
            for (q, b) in &other.parts {
                if p + q > max_p {
                    continue;
                }
                let w = a.wedge(b)?;
                let merged = match parts.remove(&(p + q)) {
                    Some(cur) => cur.add(&w)?,
                    None => w,
                };
                parts.insert(p + q, merged);
            }
        }
        Ok(TotalForm { parts })
    }

    fn add(&self, other: &TotalForm) -> Result<TotalForm> {
        let mut parts = self.parts.clone();
        for (p, b) in &other.parts {
            let merged = match parts.remove(p) {
                Some(cur) => cur.add(b)?,
                None => b.clone(),
            };
            parts.insert(*p, merged);
        }
        Ok(TotalForm { parts })
    }

    fn is_zero(&self) -> bool {
        self.parts.values().all(EndForm::is_zero)
    }
}

/// Gauge transformation by a unipotent `g = 1 + N_1 + N_2 + …`, where `N_p` is a
/// `p`-form of endomorphism degree `−p`. The inverse is the terminating series
/// `Σ_j (−N)^j`, so no inverse needs to be supplied. Conjugation uses
/// `D' = g⁻¹Dg`, i.e. `A' = g⁻¹Ag − g⁻¹dg` on the full inhomogeneous form.
pub fn unipotent_gauge(d: &Superconnection, n_parts: &[EndForm]) -> Result<Superconnection> {
    let chart = d.chart();
    let dims = d.dims();
    let m = chart.dim();
    let mut n = TotalForm { parts: BTreeMap::new() };
    for f in n_parts {
        let p = f.form_degree();
        if p == 0 || f.endo_degree() != -(p as i32) {
            return Err(Error::DegreeMismatch(format!(
                "unipotent gauge part must have bidegree (p, -p) with p >= 1, got ({p}, {})",
                f.endo_degree()
            )));
        }
        n = n.add(&TotalForm { parts: BTreeMap::from([(p, f.clone())]) })?;
    }
    let one = TotalForm { parts: BTreeMap::from([(0, EndForm::identity(chart, dims))]) };
    let g = one.add(&n)?;
    let neg_n = TotalForm { parts: n.parts.iter().map(|(p, f)| (*p, f.neg())).collect() };
    let mut g_inv = one.clone();
    let mut power = one;
    for _ in 0..=m {
        power = power.mul(&neg_n, m)?;
        if power.is_zero() {
            break;
        }
        g_inv = g_inv.add(&power)?;
    }
    let a = TotalForm { parts: d.components().iter().cloned().enumerate().collect() };
    let dg = TotalForm { parts: n.parts.iter().map(|(p, f)| (p + 1, f.ext_d())).filter(|(p, _)| *p <= m).collect() };
    let conj = g_inv.mul(&a, m)?.mul(&g, m)?;
    let correction = g_inv.mul(&dg, m)?;
    let neg_corr = TotalForm { parts: correction.parts.iter().map(|(p, f)| (*p, f.neg())).collect() };
    let out = conj.add(&neg_corr)?;
    let comps = (0..=m)
        .map(|p| out.parts.get(&p).cloned().unwrap_or_else(|| EndForm::zero(chart, dims, p, 1 - p as i32)))
        .collect();
    Superconnection::new(chart, dims, comps)
}

/// Constant-coefficient superconnection from `(mask, value)` data per form degree.
pub fn const_superconnection(
    chart: &Arc<Chart>,
    dims: &Arc<GradedDims>,
    deltas: &BTreeMap<usize, Vec<(u32, GradedEndo)>>,
) -> Result<Superconnection> {
    let m = chart.dim();
    let mut comps: Vec<EndForm> = (0..=m).map(|p| EndForm::zero(chart, dims, p, 1 - p as i32)).collect();
    for (p, terms) in deltas {
        if *p > m {
            return Err(Error::InvalidInput(format!("form degree {p} exceeds chart dimension {m}")));
        }
        for (mask, value) in terms {
            if mask.count_ones() as usize != *p {
                return Err(Error::InvalidInput(format!("mask {mask:#b} is not a {p}-index")));
            }
            if value.degree() != 1 - *p as i32 {
                return Err(Error::DegreeMismatch(format!("A_{p} data must have degree {}", 1 - *p as i32)));
            }
            comps[*p] = comps[*p].add(&EndForm::constant(chart, *mask, value)?)?;
        }
    }
    Superconnection::new(chart, dims, comps)
}
