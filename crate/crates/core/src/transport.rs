//! Parallel transport `Φ` and superconnection transport `Ψ_p` along path families.
//!
//! A family is a map `(w_1, …, w_k, t) ↦ x` into the chart. At a fixed parameter point
//! `w` the transport solves the triangular system
//!
//! ```text
//! ∂_t Ψ_p(t,s) = Σ_{i=0}^{p} (A_{i+1}/t) Ψ_{p−i}(t,s),   Ψ_0(s,s) = I,  Ψ_p(s,s) = 0,
//! ```
//!
//! where `A_{i+1}/t` is the contraction of `A_{i+1}` with the velocity in the last slot,
//! a form of degree `i` on the parameter cube. Products are [`cube_wedge`].

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::{Chart, ScalarExpr};
use crate::forms::{cube_wedge, fiber_integrate, CompiledForm, CompiledMap, CubeForm, SmoothMap};
use crate::graded::{GradedDims, GradedEndo};
use crate::quad::{composite, split_interval, GaussLegendre, QuadSpec};
use crate::superconn::{CompiledSuperconnection, Superconnection};

/// Names of the cube coordinates for `k` parameters: `w1..wk, t`.
pub fn cube_names(k: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=k).map(|i| format!("w{i}")).collect();
    names.push("t".to_string());
    names
}

/// The unit cube chart `I^{k+1}` with coordinates `w1..wk, t`.
pub fn cube_chart(k: usize) -> Arc<Chart> {
    Arc::new(Chart::new(cube_names(k), Some(vec![(0.0, 1.0); k + 1])).expect("cube names are valid"))
}

/// A `k`-parameter family of paths `t ↦ h(w, t)`.
#[derive(Debug, Clone)]
pub struct PathFamily {
    map: SmoothMap,
    k: usize,
    breakpoints: Vec<f64>,
}

impl PathFamily {
    /// Component expressions may use `t` and `w1..wk`.
    pub fn new(target: &Arc<Chart>, k: usize, components: Vec<ScalarExpr>, breakpoints: Vec<f64>) -> Result<PathFamily> {
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) || breakpoints.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidInput("breakpoints must be strictly increasing in (0, 1)".into()));
        }
        let map = SmoothMap::new(cube_chart(k), target.clone(), components)?;
        Ok(PathFamily { map, k, breakpoints })
    }

    /// Parses component strings.
    pub fn parse(target: &Arc<Chart>, k: usize, components: &[&str]) -> Result<PathFamily> {
        let comps = components.iter().map(|c| ScalarExpr::parse(c)).collect::<Result<Vec<_>, _>>()?;
        Self::new(target, k, comps, Vec::new())
    }

    pub fn params(&self) -> usize {
        self.k
    }

    pub fn map(&self) -> &SmoothMap {
        &self.map
    }

    pub fn target(&self) -> &Arc<Chart> {
        self.map.target()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn with_breakpoints(mut self, breakpoints: Vec<f64>) -> Result<PathFamily> {
        let fam = PathFamily::new(self.target(), self.k, self.map.components().to_vec(), breakpoints)?;
        self.breakpoints = fam.breakpoints;
        Ok(self)
    }

    /// The point `h(w, t)`.
    pub fn point(&self, w: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut env: HashMap<String, f64> = HashMap::new();
        for (i, v) in w.iter().enumerate() {
            env.insert(format!("w{}", i + 1), *v);
        }
        env.insert("t".into(), t);
        self.map
            .components()
            .iter()
            .map(|c| c.eval(&env).map_err(|e| Error::eval_at(&[w, &[t]].concat(), e)))
            .collect()
    }

    /// Freezes parameter `axis` (0-based) at `value`; later parameters shift down.
    pub fn restrict(&self, axis: usize, value: f64) -> Result<PathFamily> {
        if axis >= self.k {
            return Err(Error::InvalidInput(format!("family has only {} parameters", self.k)));
        }
        let mut map = HashMap::new();
        map.insert(
            format!("w{}", axis + 1),
            ScalarExpr::from_f64(value).ok_or_else(|| Error::InvalidInput("non-finite value".into()))?,
        );
        for j in (axis + 1)..self.k {
            map.insert(format!("w{}", j + 1), ScalarExpr::var(&format!("w{j}")));
        }
        let comps = self.map.components().iter().map(|c| c.subst(&map)).collect();
        PathFamily::new(self.target(), self.k - 1, comps, self.breakpoints.clone())
    }

    /// `(w, t) ↦ h(w, φ(w, t))` for a reparametrization `φ` in the variables `t, w1..wk`.
    pub fn reparametrize(&self, phi: &ScalarExpr) -> Result<PathFamily> {
        let map = HashMap::from([("t".to_string(), phi.clone())]);
        let comps = self.map.components().iter().map(|c| c.subst(&map)).collect();
        // Breakpoints move under φ; they are only known for w-independent φ, so drop them.
        PathFamily::new(self.target(), self.k, comps, Vec::new())
    }
}

/// Source of the contractions `A_j/t` along a family of paths.
pub trait TransportField: Sync {
    fn params(&self) -> usize;
    fn dims(&self) -> &Arc<GradedDims>;
    /// Times in `(0, 1)` where the integrand may fail to be smooth at parameter `w`.
    fn breakpoints(&self, w: &[f64]) -> Vec<f64>;
    /// `A_j/t` for `j = 1..=max_j` at `(w, t)`, each a cube form over the parameter axes
    /// of form degree `j − 1`. `piece` is the smooth interval of `t` being integrated.
    fn contractions(&self, w: &[f64], t: f64, piece: (f64, f64), max_j: usize) -> Result<Vec<CubeForm>>;
    /// Position in the chart.
    fn point(&self, w: &[f64], t: f64) -> Result<Vec<f64>>;
    /// `A_0` at a chart point.
    fn a0(&self, x: &[f64]) -> Result<GradedEndo>;
    /// `A_1` at a chart point, one endomorphism per chart axis.
    fn a1(&self, x: &[f64]) -> Result<Vec<GradedEndo>>;
}

fn zero_contraction(k: usize, dims: &Arc<GradedDims>, j: usize) -> CubeForm {
    CubeForm::zero(k, dims, 1 - j as i32)
}

fn chart_a1(sc: &CompiledSuperconnection, m: usize, x: &[f64]) -> Result<Vec<GradedEndo>> {
    let dims = sc.dims();
    let mut out = vec![GradedEndo::zero(dims, 0); m];
    if let Some(f) = sc.form(1) {
        let v = f.eval(x)?;
        for (mask, g) in v.terms() {
            out[mask.trailing_zeros() as usize] = g.clone();
        }
    }
    Ok(out)
}

/// Contractions obtained by symbolic pullback along a [`PathFamily`] followed by
/// splitting off `dt`.
#[derive(Debug, Clone)]
pub struct FamilyField {
    fam: PathFamily,
    contractions: Vec<CompiledForm>,
    point_map: CompiledMap,
    sc: CompiledSuperconnection,
    m: usize,
}

impl FamilyField {
    pub fn new(fam: &PathFamily, d: &Superconnection) -> Result<FamilyField> {
        if **fam.target() != **d.chart() {
            return Err(Error::DimensionMismatch("family and superconnection use different charts".into()));
        }
        let k = fam.params();
        let mut contractions = Vec::new();
        for j in 1..=d.max_degree() {
            let pulled = d.component(j).pullback(fam.map())?;
            let (over, _) = pulled.split_t(k)?;
            contractions.push(over.compile()?);
        }
        Ok(FamilyField {
            fam: fam.clone(),
            contractions,
            point_map: fam.map().compile()?,
            sc: d.compile()?,
            m: d.max_degree(),
        })
    }

    pub fn family(&self) -> &PathFamily {
        &self.fam
    }
}

impl TransportField for FamilyField {
    fn params(&self) -> usize {
        self.fam.params()
    }

    fn dims(&self) -> &Arc<GradedDims> {
        self.sc.dims()
    }

    fn breakpoints(&self, _w: &[f64]) -> Vec<f64> {
        self.fam.breakpoints().to_vec()
    }

    fn contractions(&self, w: &[f64], t: f64, _piece: (f64, f64), max_j: usize) -> Result<Vec<CubeForm>> {
        let k = self.params();
        let mut u = w.to_vec();
        u.push(t);
        let mut scratch = Vec::new();
        (1..=max_j)
            .map(|j| match self.contractions.get(j - 1) {
                Some(f) => Ok(f.eval_with(&u, &mut scratch)?.truncate_axes(k)),
                None => Ok(zero_contraction(k, self.dims(), j)),
            })
            .collect()
    }

    fn point(&self, w: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut u = w.to_vec();
        u.push(t);
        let m = self.point_map.target_dim();
        let mut x = vec![0.0; m];
        let mut jac = vec![0.0; m * (self.params() + 1)];
        self.point_map.eval(&u, &mut Vec::new(), &mut x, &mut jac)?;
        Ok(x)
    }

    fn a0(&self, x: &[f64]) -> Result<GradedEndo> {
        self.sc.a0_at(x)
    }

    fn a1(&self, x: &[f64]) -> Result<Vec<GradedEndo>> {
        chart_a1(&self.sc, self.m, x)
    }
}

/// A parametrized point map with derivatives: position, velocity and parameter tangents.
pub trait PointMap: Sync {
    fn params(&self) -> usize;
    fn chart_dim(&self) -> usize;
    fn breakpoints(&self, w: &[f64]) -> Vec<f64>;
    /// Writes `x`, `∂_t x` and `∂_{w_l} x` (row `l` of `tangents`, length `m` each).
    /// `piece` identifies the smooth region of `t` for piecewise maps.
    fn eval(&self, w: &[f64], t: f64, piece: (f64, f64), x: &mut [f64], vel: &mut [f64], tangents: &mut [f64])
        -> Result<()>;
}

/// Contractions computed numerically from a Jacobian: `(A/t)_S = Σ_I a_I · det[I; S, vel]`.
#[derive(Debug, Clone)]
pub struct JacobianField<M> {
    map: M,
    sc: CompiledSuperconnection,
    m: usize,
}

impl<M: PointMap> JacobianField<M> {
    pub fn new(map: M, d: &Superconnection) -> Result<JacobianField<M>> {
        if map.chart_dim() != d.max_degree() {
            return Err(Error::DimensionMismatch("point map and superconnection use different charts".into()));
        }
        Ok(JacobianField { map, sc: d.compile()?, m: d.max_degree() })
    }

    pub fn map(&self) -> &M {
        &self.map
    }
}

/// Determinant of a small square matrix given row-major.
fn small_det(a: &mut [f64], n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        _ => DMatrix::from_row_slice(n, n, a).determinant(),
    }
}

impl<M: PointMap> TransportField for JacobianField<M> {
    fn params(&self) -> usize {
        self.map.params()
    }

    fn dims(&self) -> &Arc<GradedDims> {
        self.sc.dims()
    }

    fn breakpoints(&self, w: &[f64]) -> Vec<f64> {
        self.map.breakpoints(w)
    }

    fn contractions(&self, w: &[f64], t: f64, piece: (f64, f64), max_j: usize) -> Result<Vec<CubeForm>> {
        let k = self.params();
        let m = self.m;
        let mut x = vec![0.0; m];
        let mut vel = vec![0.0; m];
        let mut tan = vec![0.0; k * m];
        self.map.eval(w, t, piece, &mut x, &mut vel, &mut tan)?;
        let dims = self.dims().clone();
        let mut out = Vec::with_capacity(max_j);
        let mut scratch = Vec::new();
        let mut vals = Vec::new();
        let mut minor = Vec::new();
        for j in 1..=max_j {
            let mut cf = zero_contraction(k, &dims, j);
            let form = match self.sc.form(j) {
                Some(f) if j <= m && !f.is_zero() => f,
                _ => {
                    out.push(cf);
                    continue;
                }
            };
            form.eval_raw(&x, &mut scratch, &mut vals)?;
            let n = dims.total();
            // subsets S of the parameter axes with |S| = j - 1
            for s_mask in 0u32..(1u32 << k) {
                if s_mask.count_ones() as usize != j - 1 {
                    continue;
                }
                let cols: Vec<usize> = (0..k).filter(|b| s_mask & (1 << b) != 0).collect();
                let mut acc = DMatrix::<f64>::zeros(n, n);
                let mut any = false;
                let mut offset = 0;
                for (mask, pos) in form.masks().iter().zip(form.positions()) {
                    let rows: Vec<usize> = (0..m).filter(|b| mask & (1 << b) != 0).collect();
                    minor.clear();
                    for &r in &rows {
                        for &c in &cols {
                            minor.push(tan[c * m + r]);
                        }
                        minor.push(vel[r]);
                    }
                    let det = small_det(&mut minor, j);
                    if det != 0.0 {
                        any = true;
                        for (idx, &(r, c)) in pos.iter().enumerate() {
                            acc[(r, c)] += det * vals[offset + idx];
                        }
                    }
                    offset += pos.len();
                }
                if any {
                    let g = GradedEndo::from_matrix_unchecked(&dims, 1 - j as i32, acc);
                    cf = cf.add(&CubeForm::from_terms(k, &dims, 1 - j as i32, [(s_mask, g)])?)?;
                }
            }
            out.push(cf);
        }
        Ok(out)
    }

    fn point(&self, w: &[f64], t: f64) -> Result<Vec<f64>> {
        let m = self.m;
        let k = self.params();
        let (mut x, mut vel, mut tan) = (vec![0.0; m], vec![0.0; m], vec![0.0; k * m]);
        let bps = self.map.breakpoints(w);
        let piece = split_interval(0.0, 1.0, &bps)
            .into_iter()
            .find(|(a, b)| t >= *a && t <= *b)
            .unwrap_or((0.0, 1.0));
        self.map.eval(w, t, piece, &mut x, &mut vel, &mut tan)?;
        Ok(x)
    }

    fn a0(&self, x: &[f64]) -> Result<GradedEndo> {
        self.sc.a0_at(x)
    }

    fn a1(&self, x: &[f64]) -> Result<Vec<GradedEndo>> {
        chart_a1(&self.sc, self.m, x)
    }
}

/// Point map of a [`PathFamily`] with its compiled Jacobian.
#[derive(Debug, Clone)]
pub struct FamilyPointMap {
    compiled: CompiledMap,
    k: usize,
    breakpoints: Vec<f64>,
}

impl FamilyPointMap {
    pub fn new(fam: &PathFamily) -> Result<FamilyPointMap> {
        Ok(FamilyPointMap { compiled: fam.map().compile()?, k: fam.params(), breakpoints: fam.breakpoints().to_vec() })
    }
}

impl PointMap for FamilyPointMap {
    fn params(&self) -> usize {
        self.k
    }

    fn chart_dim(&self) -> usize {
        self.compiled.target_dim()
    }

    fn breakpoints(&self, _w: &[f64]) -> Vec<f64> {
        self.breakpoints.clone()
    }

    fn eval(&self, w: &[f64], t: f64, _piece: (f64, f64), x: &mut [f64], vel: &mut [f64], tangents: &mut [f64]) -> Result<()> {
        let m = self.chart_dim();
        let k = self.k;
        let mut u = w.to_vec();
        u.push(t);
        let mut jac = vec![0.0; m * (k + 1)];
        self.compiled.eval(&u, &mut Vec::new(), x, &mut jac)?;
        for i in 0..m {
            vel[i] = jac[i * (k + 1) + k];
            for l in 0..k {
                tangents[l * m + i] = jac[i * (k + 1) + l];
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Solvers

/// Time pieces between `s` and `t` (in the direction of integration) split at breakpoints.
fn pieces(field: &dyn TransportField, w: &[f64], s: f64, t: f64) -> Vec<(f64, f64)> {
    let bps = field.breakpoints(w);
    let mut p = split_interval(s, t, &bps);
    if t < s {
        p.reverse();
        p.iter_mut().for_each(|iv| *iv = (iv.1, iv.0));
    }
    p
}

fn rhs(c: &[CubeForm], y: &[CubeForm]) -> Result<Vec<CubeForm>> {
    let mut out = Vec::with_capacity(y.len());
    for p in 0..y.len() {
        let mut acc = CubeForm::zero(y[p].axes(), y[p].dims(), y[p].endo_degree());
        for i in 0..=p {
            let term = cube_wedge(&c[i], &y[p - i])?;
            acc.axpy(1.0, &term);
        }
        out.push(acc);
    }
    Ok(out)
}

fn combine(y: &[CubeForm], h: f64, k: &[CubeForm]) -> Vec<CubeForm> {
    y.iter()
        .zip(k)
        .map(|(a, b)| {
            let mut out = a.clone();
            out.axpy(h, b);
            out
        })
        .collect()
}

/// Joint RK4 solve of the triangular system; returns `Ψ_0..Ψ_{p_max}` at `(t, s)`.
///
/// Uses `ceil(steps_per_unit · |t − s|)` steps spread over the smooth pieces, each piece
/// getting at least one step; step endpoints always land on breakpoints.
pub fn solve_psi(field: &dyn TransportField, w: &[f64], s: f64, t: f64, p_max: usize, steps_per_unit: usize) -> Result<Vec<CubeForm>> {
    let k = field.params();
    if w.len() != k {
        return Err(Error::DimensionMismatch(format!("parameter point has {} entries, expected {k}", w.len())));
    }
    if p_max > k {
        return Err(Error::InvalidInput(format!("p_max = {p_max} exceeds the {k} family parameters")));
    }
    if steps_per_unit == 0 {
        return Err(Error::Quadrature("rk4_steps must be at least 1".into()));
    }
    let dims = field.dims().clone();
    let mut y: Vec<CubeForm> = (0..=p_max)
        .map(|p| {
            if p == 0 {
                CubeForm::scalar(k, GradedEndo::identity(&dims))
            } else {
                CubeForm::zero(k, &dims, -(p as i32))
            }
        })
        .collect();
    if s == t {
        return Ok(y);
    }
    let max_j = p_max + 1;
    for (a, b) in pieces(field, w, s, t) {
        let len = (b - a).abs();
        let n = ((steps_per_unit as f64 * len) - 1e-9).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        let piece = if a < b { (a, b) } else { (b, a) };
        let mut c0 = field.contractions(w, a, piece, max_j)?;
        for step in 0..n {
            let t0 = a + h * step as f64;
            let t1 = if step + 1 == n { b } else { a + h * (step + 1) as f64 };
            let cm = field.contractions(w, 0.5 * (t0 + t1), piece, max_j)?;
            let c1 = field.contractions(w, t1, piece, max_j)?;
            let k1 = rhs(&c0, &y)?;
            let k2 = rhs(&cm, &combine(&y, 0.5 * h, &k1))?;
            let k3 = rhs(&cm, &combine(&y, 0.5 * h, &k2))?;
            let k4 = rhs(&c1, &combine(&y, h, &k3))?;
            for p in 0..y.len() {
                y[p].axpy(h / 6.0, &k1[p]);
                y[p].axpy(h / 3.0, &k2[p]);
                y[p].axpy(h / 3.0, &k3[p]);
                y[p].axpy(h / 6.0, &k4[p]);
            }
            c0 = c1;
        }
    }
    Ok(y)
}

/// `Φ(t, s)` by RK4 on any transport field.
pub fn solve_phi(field: &dyn TransportField, w: &[f64], s: f64, t: f64, steps_per_unit: usize) -> Result<GradedEndo> {
    Ok(solve_psi(field, w, s, t, 0, steps_per_unit)?.swap_remove(0).component(0))
}

/// Options for the iterated-integral series.
#[derive(Debug, Clone, Copy)]
pub struct SeriesOptions {
    pub tol: f64,
    /// Gauss nodes per panel.
    pub order: usize,
    /// Panels per unit length of `t` (at least one per smooth piece).
    pub panels_per_unit: usize,
    pub max_terms: usize,
}

impl SeriesOptions {
    pub fn with_tol(tol: f64) -> SeriesOptions {
        SeriesOptions { tol, order: 12, panels_per_unit: 8, max_terms: 60 }
    }
}

/// Result of the series evaluation.
#[derive(Debug, Clone)]
pub struct SeriesResult {
    pub value: GradedEndo,
    pub terms: usize,
    /// The sampled bound `B` on `‖A_1/u‖`.
    pub bound: f64,
}

/// `Φ(t, s) = Σ_k ∫_{t ≥ u_1 ≥ … ≥ u_k ≥ s} A(u_1)⋯A(u_k)` with each multiple integral
/// computed by nested Gauss quadrature (the inner integrals via panel integration
/// matrices). Truncates once `B^k (t−s)^k / k! < tol`.
pub fn series_phi(field: &dyn TransportField, w: &[f64], s: f64, t: f64, opts: &SeriesOptions) -> Result<SeriesResult> {
    let dims = field.dims().clone();
    if t < s {
        return Err(Error::InvalidInput("series requires s <= t".into()));
    }
    let a_at = |u: f64, piece: (f64, f64)| -> Result<GradedEndo> {
        Ok(field.contractions(w, u, piece, 1)?.swap_remove(0).component(0))
    };
    let len = t - s;
    let id = GradedEndo::identity(&dims);
    if len == 0.0 {
        return Ok(SeriesResult { value: id, terms: 1, bound: 0.0 });
    }
    // a-priori bound from 256 samples
    let smooth = pieces(field, w, s, t);
    let mut sup: f64 = 0.0;
    for i in 0..256 {
        let u = s + len * (i as f64 + 0.5) / 256.0;
        let piece = smooth.iter().copied().find(|(a, b)| u >= *a && u <= *b).unwrap_or((s, t));
        sup = sup.max(a_at(u, piece)?.op_norm());
    }
    let bound = 1.05 * sup;
    // panels
    let gl = GaussLegendre::new(opts.order);
    let smat = gl.integration_matrix();
    let mut panels: Vec<(f64, f64, (f64, f64))> = Vec::new();
    for (a, b) in smooth {
        let n = ((opts.panels_per_unit as f64 * (b - a)).ceil() as usize).max(1);
        let h = (b - a) / n as f64;
        for i in 0..n {
            panels.push((a + h * i as f64, h, (a, b)));
        }
    }
    let mut a_nodes: Vec<Vec<GradedEndo>> = Vec::new();
    for (lo, h, piece) in &panels {
        a_nodes.push(gl.nodes.iter().map(|x| a_at(lo + h * x, *piece)).collect::<Result<_>>()?);
    }
    let mut prev: Vec<Vec<GradedEndo>> = panels.iter().map(|_| vec![id.clone(); opts.order]).collect();
    let mut total = id.clone();
    let mut term_bound = 1.0;
    let mut k = 0;
    loop {
        k += 1;
        term_bound *= bound * len / k as f64;
        if term_bound < opts.tol || bound == 0.0 {
            break;
        }
        if k > opts.max_terms {
            return Err(Error::NonConvergence(format!("more than {} series terms needed", opts.max_terms)));
        }
        let mut next = Vec::with_capacity(panels.len());
        let mut carried = GradedEndo::zero(&dims, 0);
        for (pi, (_, h, _)) in panels.iter().enumerate() {
            let integrand: Vec<GradedEndo> = a_nodes[pi]
                .iter()
                .zip(&prev[pi])
                .map(|(a, j)| a.compose(j))
                .collect::<Result<_>>()?;
            let mut vals = Vec::with_capacity(opts.order);
            for row in &smat {
                let mut v = carried.clone();
                for (sij, f) in row.iter().zip(&integrand) {
                    v.axpy(h * sij, f);
                }
                vals.push(v);
            }
            for (wj, f) in gl.weights.iter().zip(&integrand) {
                carried.axpy(h * wj, f);
            }
            next.push(vals);
        }
        total.axpy(1.0, &carried);
        prev = next;
    }
    Ok(SeriesResult { value: total, terms: k, bound })
}

/// Ordered product `Π_{i=1}^{n} (I + A_{γ(t_i)}(γ(t_{i−1}) − γ(t_i)))` over a partition
/// `t = t_0 > t_1 > … > t_n = s` (given in any order).
pub fn product_limit(field: &dyn TransportField, w: &[f64], partition: &[f64]) -> Result<GradedEndo> {
    let mut ts = partition.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let dims = field.dims().clone();
    let mut prod = GradedEndo::identity(&dims);
    let points: Vec<Vec<f64>> = ts.iter().map(|t| field.point(w, *t)).collect::<Result<_>>()?;
    for i in 1..ts.len() {
        let a = field.a1(&points[i])?;
        let mut factor = GradedEndo::identity(&dims);
        for (j, aj) in a.iter().enumerate() {
            factor.axpy(points[i - 1][j] - points[i][j], aj);
        }
        prod = prod.compose(&factor)?;
    }
    Ok(prod)
}

/// `Ψ_p(t, s)` from the recursion `Σ_{q<p} ∫_s^t Φ(t,u)(A_{p−q+1}/u)Ψ_q(u,s) du`.
///
/// The outer integral uses composite Gauss quadrature split at breakpoints; `Φ(t,u)` is
/// computed by a separate RK4 solve per node, and lower `Ψ_q(u,s)` recursively.
pub fn recursive_psi(
    field: &dyn TransportField,
    w: &[f64],
    s: f64,
    t: f64,
    quad: &QuadSpec,
    p: usize,
) -> Result<CubeForm> {
    let mut memo: HashMap<(u64, u64, usize), CubeForm> = HashMap::new();
    recursive_inner(field, w, s, t, quad, p, &mut memo)
}

fn recursive_inner(
    field: &dyn TransportField,
    w: &[f64],
    s: f64,
    t: f64,
    quad: &QuadSpec,
    p: usize,
    memo: &mut HashMap<(u64, u64, usize), CubeForm>,
) -> Result<CubeForm> {
    let key = (s.to_bits(), t.to_bits(), p);
    if let Some(v) = memo.get(&key) {
        return Ok(v.clone());
    }
    let k = field.params();
    let dims = field.dims().clone();
    let out = if p == 0 {
        CubeForm::scalar(k, solve_phi(field, w, s, t, quad.rk4_steps)?)
    } else {
        let mut acc = CubeForm::zero(k, &dims, -(p as i32));
        if t != s {
            let panels = (quad.subdivisions * 4).max(4);
            let order = quad.gauss_order.max(8);
            for (a, b) in pieces(field, w, s, t) {
                let piece = if a < b { (a, b) } else { (b, a) };
                for (u, wt) in composite(a, b, order, panels) {
                    let phi_tu = CubeForm::scalar(k, solve_phi(field, w, u, t, quad.rk4_steps)?);
                    let cs = field.contractions(w, u, piece, p + 1)?;
                    for q in 0..p {
                        let psi_q = recursive_inner(field, w, s, u, quad, q, memo)?;
                        let term = cube_wedge(&cube_wedge(&phi_tu, &cs[p - q])?, &psi_q)?;
                        acc.axpy(wt, &term);
                    }
                }
            }
        }
        acc
    };
    memo.insert(key, out.clone());
    Ok(out)
}

/// `∫_{I^k} Ψ_k(1, 0)` for a field with `k` parameters.
pub fn integrate_field(field: &dyn TransportField, quad: &QuadSpec) -> Result<GradedEndo> {
    let k = field.params();
    fiber_integrate(|w| Ok(solve_psi(field, w, 0.0, 1.0, k, quad.rk4_steps)?.swap_remove(k)), k, quad)
}

// ---------------------------------------------------------------------------
// Family-level operations

pub fn transport_phi(fam: &PathFamily, w: &[f64], s: f64, t: f64, d: &Superconnection, quad: &QuadSpec) -> Result<GradedEndo> {
    solve_phi(&FamilyField::new(fam, d)?, w, s, t, quad.rk4_steps)
}

pub fn phi_series(fam: &PathFamily, w: &[f64], s: f64, t: f64, d: &Superconnection, tol: f64) -> Result<SeriesResult> {
    series_phi(&FamilyField::new(fam, d)?, w, s, t, &SeriesOptions::with_tol(tol))
}

pub fn phi_product_limit(fam: &PathFamily, w: &[f64], s: f64, t: f64, d: &Superconnection, partition: &[f64]) -> Result<GradedEndo> {
    if partition.iter().any(|u| *u < s.min(t) - 1e-15 || *u > s.max(t) + 1e-15) {
        return Err(Error::InvalidInput("partition points must lie in [s, t]".into()));
    }
    let mut pts = partition.to_vec();
    pts.push(s);
    pts.push(t);
    product_limit(&FamilyField::new(fam, d)?, w, &pts)
}

/// Uniform partition of `[s, t]` into `n` pieces.
pub fn uniform_partition(s: f64, t: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| s + (t - s) * i as f64 / n as f64).collect()
}

pub fn transport_psi(
    fam: &PathFamily,
    w: &[f64],
    s: f64,
    t: f64,
    d: &Superconnection,
    quad: &QuadSpec,
    p_max: usize,
) -> Result<Vec<CubeForm>> {
    solve_psi(&FamilyField::new(fam, d)?, w, s, t, p_max, quad.rk4_steps)
}

pub fn psi_recursive(fam: &PathFamily, w: &[f64], s: f64, t: f64, d: &Superconnection, quad: &QuadSpec, p: usize) -> Result<CubeForm> {
    recursive_psi(&FamilyField::new(fam, d)?, w, s, t, quad, p)
}

pub fn integrate_psi(fam: &PathFamily, d: &Superconnection, quad: &QuadSpec) -> Result<GradedEndo> {
    integrate_field(&FamilyField::new(fam, d)?, quad)
}

/// `‖A_0(γ(1))Φ(1,0) − Φ(1,0)A_0(γ(0))‖`.
pub fn chain_map_residual(field: &dyn TransportField, w: &[f64], quad: &QuadSpec) -> Result<f64> {
    let phi = solve_phi(field, w, 0.0, 1.0, quad.rk4_steps)?;
    let a_end = field.a0(&field.point(w, 1.0)?)?;
    let a_start = field.a0(&field.point(w, 0.0)?)?;
    Ok(a_end.compose(&phi)?.sub(&phi.compose(&a_start)?)?.op_norm())
}

pub fn check_chain_map(fam: &PathFamily, w: &[f64], d: &Superconnection, quad: &QuadSpec) -> Result<f64> {
    chain_map_residual(&FamilyField::new(fam, d)?, w, quad)
}

/// Both sides of the integrated homotopy identity for a `q`-parameter family.
#[derive(Debug, Clone)]
pub struct StokesSides {
    /// `A_0 ∫Ψ_q − (−1)^q (∫Ψ_q) A_0`.
    pub lhs: GradedEndo,
    /// `∫_{∂I^q} Ψ_{q−1} = (−1)^{q−1} Σ_i (−1)^i (∫_{w_i=0} Ψ_{q−1} − ∫_{w_i=1} Ψ_{q−1})`.
    ///
    /// The overall `(−1)^{q−1}` comes from the graded exterior derivative, which acts on
    /// `Ψ_{q−1}` (endomorphism degree `1−q`) with that sign before Stokes is applied.
    pub rhs: GradedEndo,
}

impl StokesSides {
    pub fn residual(&self) -> f64 {
        self.lhs.sub(&self.rhs).map(|d| d.op_norm()).unwrap_or(f64::INFINITY)
    }
}

pub fn stokes_sides(fam: &PathFamily, d: &Superconnection, quad: &QuadSpec, q: usize) -> Result<StokesSides> {
    if q == 0 || fam.params() != q {
        return Err(Error::InvalidInput(format!("Stokes check needs q >= 1 and a q-parameter family (q = {q})")));
    }
    let field = FamilyField::new(fam, d)?;
    let mid = vec![0.5; q];
    let x0 = field.point(&mid, 0.0)?;
    let x1 = field.point(&mid, 1.0)?;
    let integral = integrate_field(&field, quad)?;
    let sign = if q % 2 == 0 { 1.0 } else { -1.0 };
    let lhs = field
        .a0(&x1)?
        .compose(&integral)?
        .sub(&integral.compose(&field.a0(&x0)?)?.scale(sign))?;
    let faces: Vec<(usize, f64)> = (0..q).flat_map(|i| [(i, 0.0), (i, 1.0)]).collect();
    let face_vals: Vec<Result<GradedEndo>> = faces
        .par_iter()
        .map(|(i, c)| integrate_psi(&fam.restrict(*i, *c)?, d, quad))
        .collect();
    let mut rhs = GradedEndo::zero(d.dims(), 1 - q as i32);
    for ((i, c), v) in faces.iter().zip(face_vals) {
        let orient = if (i + 1) % 2 == 0 { 1.0 } else { -1.0 };
        let face_sign = if *c == 0.0 { 1.0 } else { -1.0 };
        let graded = if q % 2 == 1 { 1.0 } else { -1.0 };
        rhs.axpy(graded * orient * face_sign, &v?);
    }
    Ok(StokesSides { lhs, rhs })
}

pub fn check_stokes(fam: &PathFamily, d: &Superconnection, quad: &QuadSpec, q: usize) -> Result<f64> {
    Ok(stokes_sides(fam, d, quad, q)?.residual())
}

/// Residual of `Ψ_p(1,0) = Σ_q Ψ_{p−q}(1,u)Ψ_q(u,0)`, maximized over `p ≤ min(k, 2)`.
pub fn factorization_residual(field: &dyn TransportField, w: &[f64], quad: &QuadSpec, u_mid: f64) -> Result<f64> {
    let p_max = field.params().min(2);
    let whole = solve_psi(field, w, 0.0, 1.0, p_max, quad.rk4_steps)?;
    let left = solve_psi(field, w, u_mid, 1.0, p_max, quad.rk4_steps)?;
    let right = solve_psi(field, w, 0.0, u_mid, p_max, quad.rk4_steps)?;
    let mut worst: f64 = 0.0;
    for p in 0..=p_max {
        let mut comp = CubeForm::zero(field.params(), field.dims(), -(p as i32));
        for q in 0..=p {
            comp.axpy(1.0, &cube_wedge(&left[p - q], &right[q])?);
        }
        worst = worst.max(whole[p].sub(&comp)?.norm());
    }
    Ok(worst)
}

pub fn check_factorization(fam: &PathFamily, w: &[f64], d: &Superconnection, quad: &QuadSpec, u_mid: f64) -> Result<f64> {
    if !(u_mid > 0.0 && u_mid <= 1.0) {
        return Err(Error::InvalidInput("u_mid must lie in (0, 1]".into()));
    }
    factorization_residual(&FamilyField::new(fam, d)?, w, quad, u_mid)
}

/// Sample points of the parameter cube used by checks that are not tied to one `w`.
pub fn sample_params(k: usize) -> Vec<Vec<f64>> {
    let levels = [0.21, 0.5, 0.83];
    let mut pts = vec![Vec::new()];
    for _ in 0..k {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                levels.iter().map(move |l| {
                    let mut q = p.clone();
                    q.push(*l);
                    q
                })
            })
            .collect();
    }
    if k > 1 {
        // keep the diagonal and the centre to bound the cost
        pts.retain(|p| p.iter().all(|v| *v == p[0]) || p.iter().filter(|v| **v == 0.5).count() + 1 >= k);
    }
    pts
}

/// Compares `Ψ_p(1,0)` of `fam` and `fam ∘ φ` for an endpoint-fixing `φ(w, t)`.
pub fn check_reparam(fam: &PathFamily, reparam: &ScalarExpr, d: &Superconnection, quad: &QuadSpec) -> Result<f64> {
    let k = fam.params();
    let names = cube_names(k);
    if let Some(v) = reparam.free_vars().into_iter().find(|v| !names.contains(v)) {
        return Err(Error::InvalidInput(format!("reparametrization uses '{v}'")));
    }
    let samples = sample_params(k);
    for w in &samples {
        let mut env: HashMap<String, f64> = names.iter().take(k).cloned().zip(w.iter().copied()).collect();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            env.insert("t".into(), t);
            let v = reparam.eval(&env)?;
            if (i == 0 && v.abs() > 1e-12) || (i == 100 && (v - 1.0).abs() > 1e-12) {
                return Err(Error::NotMonotone(format!("φ must fix 0 and 1 (got φ({t}) = {v} at w = {w:?})")));
            }
            if v <= prev {
                return Err(Error::NotMonotone(format!("φ decreases near t = {t} at w = {w:?}")));
            }
            prev = v;
        }
    }
    let a = FamilyField::new(fam, d)?;
    let b = FamilyField::new(&fam.reparametrize(reparam)?, d)?;
    let mut worst: f64 = 0.0;
    for w in &samples {
        let pa = solve_psi(&a, w, 0.0, 1.0, k, quad.rk4_steps)?;
        let pb = solve_psi(&b, w, 0.0, 1.0, k, quad.rk4_steps)?;
        for (x, y) in pa.iter().zip(&pb) {
            worst = worst.max(x.sub(y)?.norm());
        }
    }
    Ok(worst)
}

/// Finite-difference test of `∂_s Ψ_p(t,s) = −Σ_j Ψ_{p−j}(t,s) A_{j+1}/s` at `t = 1`.
#[derive(Debug, Clone)]
pub struct DsReport {
    /// `(h, residual)` pairs for decreasing `h`.
    pub residuals: Vec<(f64, f64)>,
    /// Observed convergence order from the last two step sizes.
    pub order: f64,
}

pub fn ds_report(field: &dyn TransportField, w: &[f64], quad: &QuadSpec, p: usize, s: f64, hs: &[f64]) -> Result<DsReport> {
    let k = field.params();
    if p > k {
        return Err(Error::InvalidInput(format!("p = {p} exceeds the {k} family parameters")));
    }
    let at_s = solve_psi(field, w, s, 1.0, p, quad.rk4_steps)?;
    let piece = pieces(field, w, s, 1.0).first().copied().unwrap_or((s, 1.0));
    let cs = field.contractions(w, s, piece, p + 1)?;
    let mut rhs = CubeForm::zero(k, field.dims(), -(p as i32));
    for j in 0..=p {
        rhs.axpy(-1.0, &cube_wedge(&at_s[p - j], &cs[j])?);
    }
    let mut residuals = Vec::new();
    for &h in hs {
        let plus = solve_psi(field, w, s + h, 1.0, p, quad.rk4_steps)?;
        let minus = solve_psi(field, w, s - h, 1.0, p, quad.rk4_steps)?;
        let fd = plus[p].sub(&minus[p])?.scale(0.5 / h);
        residuals.push((h, fd.sub(&rhs)?.norm()));
    }
    Ok(DsReport { order: observed_order(&residuals), residuals })
}

/// `log(r_1/r_2)/log(h_1/h_2)` for the last two entries (the convergence order).
pub fn observed_order(residuals: &[(f64, f64)]) -> f64 {
    match residuals {
        [.., (h1, r1), (h2, r2)] if *r1 > 0.0 && *r2 > 0.0 => (r1 / r2).ln() / (h1 / h2).ln(),
        [.., (_, r1), (_, r2)] if *r1 == 0.0 && *r2 == 0.0 => f64::INFINITY,
        _ => f64::NAN,
    }
}

/// Step sizes used by the derivative checks.
pub const DS_STEPS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

pub fn check_ds(fam: &PathFamily, w: &[f64], d: &Superconnection, quad: &QuadSpec, p: usize) -> Result<DsReport> {
    ds_report(&FamilyField::new(fam, d)?, w, quad, p, 0.3, &DS_STEPS)
}

/// `‖Ψ_p(s+h, s) − δ_{p0}·id − h·(A_{p+1}/s)‖` for each `h`: the first-order expansion error.
pub fn infinitesimal_report(field: &dyn TransportField, w: &[f64], quad: &QuadSpec, p: usize, s: f64, hs: &[f64]) -> Result<DsReport> {
    let k = field.params();
    if p > k {
        return Err(Error::InvalidInput(format!("p = {p} exceeds the {k} family parameters")));
    }
    let piece = pieces(field, w, s, 1.0).first().copied().unwrap_or((s, 1.0));
    let c = field.contractions(w, s, piece, p + 1)?.swap_remove(p);
    let mut residuals = Vec::new();
    for &h in hs {
        let mut psi = solve_psi(field, w, s, s + h, p, quad.rk4_steps)?.swap_remove(p);
        if p == 0 {
            psi.axpy(-1.0, &CubeForm::scalar(k, GradedEndo::identity(field.dims())));
        }
        residuals.push((h, psi.sub(&c.scale(h))?.norm()));
    }
    Ok(DsReport { order: observed_order(&residuals), residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{EndForm, ExprMatrix};
    use crate::superconn::const_superconnection;
    use std::collections::BTreeMap;

    fn e(s: &str) -> ScalarExpr {
        ScalarExpr::parse(s).unwrap()
    }

    fn line_chart(m: usize) -> Arc<Chart> {
        Arc::new(Chart::standard(m, None).unwrap())
    }

    fn single(n: usize) -> Arc<GradedDims> {
        GradedDims::shared([(0, n)]).unwrap()
    }

    fn nilpotent_c(d: &Arc<GradedDims>) -> GradedEndo {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = 1.0;
        GradedEndo::from_matrix(d, 0, m).unwrap()
    }

    #[test]
    fn zero_connection_gives_identity() {
        let c = line_chart(1);
        let d = single(2);
        let dd = Superconnection::trivial(&c, &d);
        let fam = PathFamily::parse(&c, 0, &["t"]).unwrap();
        let q = QuadSpec::default();
        let phi = transport_phi(&fam, &[], 0.0, 1.0, &dd, &q).unwrap();
        assert_eq!(phi, GradedEndo::identity(&d));
    }

    #[test]
    fn nilpotent_constant_connection() {
        let c = line_chart(2);
        let d = single(2);
        let cm = nilpotent_c(&d);
        let dd = const_superconnection(&c, &d, &BTreeMap::from([(1, vec![(0b01, cm.clone())])])).unwrap();
        let fam = PathFamily::parse(&c, 0, &["t", "0"]).unwrap();
        let q = QuadSpec { rk4_steps: 2000, ..QuadSpec::default() };
        let phi = transport_phi(&fam, &[], 0.0, 1.0, &dd, &q).unwrap();
        let want = GradedEndo::identity(&d).add(&cm).unwrap();
        assert!(phi.sub(&want).unwrap().op_norm() < 1e-12);
        let series = phi_series(&fam, &[], 0.0, 1.0, &dd, 1e-12).unwrap();
        assert!(series.value.sub(&want).unwrap().op_norm() < 1e-12);
    }

    #[test]
    fn linear_coefficient_gives_half_exponential() {
        let c = line_chart(1);
        let d = single(2);
        let mut m = ExprMatrix::zero(2);
        m.set(0, 0, e("x1"));
        m.set(0, 1, e("2*x1"));
        m.set(1, 1, e("-x1"));
        let a1 = EndForm::new(&c, &d, 1, 0, [(0b1, m)]).unwrap();
        let dd = Superconnection::new(&c, &d, vec![EndForm::zero(&c, &d, 0, 1), a1]).unwrap();
        let fam = PathFamily::parse(&c, 0, &["t"]).unwrap();
        let q = QuadSpec { rk4_steps: 2000, ..QuadSpec::default() };
        let phi = transport_phi(&fam, &[], 0.0, 1.0, &dd, &q).unwrap();
        // exp(C/2) with C = [[1,2],[0,-1]]: diag e^{±1/2}, off-diagonal 2·sinh(1/2)
        let h = 0.5f64;
        let want = DMatrix::from_row_slice(2, 2, &[h.exp(), 2.0 * h.sinh(), 0.0, (-h).exp()]);
        assert!((phi.matrix() - want).norm() < 1e-12);
        let series = phi_series(&fam, &[], 0.0, 1.0, &dd, 1e-13).unwrap();
        assert!((series.value.matrix() - phi.matrix()).norm() < 1e-11);
        assert!(series.value.op_norm() <= (series.bound).exp() * 2f64.sqrt());
        let prod = phi_product_limit(&fam, &[], 0.0, 1.0, &dd, &uniform_partition(0.0, 1.0, 4096)).unwrap();
        assert!((prod.matrix() - phi.matrix()).norm() < 1e-3);
    }

    #[test]
    fn constant_two_form_transport() {
        // A_2 = c·m dx1∧dx2 with A_1 = 0 along h(t, w) = (t, w): Ψ_1(1,0) = c·m·dw.
        let c = line_chart(2);
        let d = GradedDims::shared([(0, 1), (1, 1)]).unwrap();
        let mut mm = DMatrix::zeros(2, 2);
        mm[(0, 1)] = 1.0;
        let m = GradedEndo::from_matrix(&d, -1, mm).unwrap();
        let dd = const_superconnection(&c, &d, &BTreeMap::from([(2, vec![(0b11, m.scale(1.5))])])).unwrap();
        let fam = PathFamily::parse(&c, 1, &["t", "w1"]).unwrap();
        let q = QuadSpec::default();
        let psi = transport_psi(&fam, &[0.4], 0.0, 1.0, &dd, &q, 1).unwrap();
        // pullback: 1.5 m dt∧dw = -1.5 m dw∧dt, so A_2/t = -1.5 m dw
        let got = psi[1].component(0b1);
        assert!((got.matrix() - m.scale(-1.5).matrix()).norm() < 1e-12, "{got:?}");
        let rec = psi_recursive(&fam, &[0.4], 0.0, 1.0, &dd, &q, 1).unwrap();
        assert!(rec.sub(&psi[1]).unwrap().norm() < 1e-12);
        let integ = integrate_psi(&fam, &dd, &q).unwrap();
        assert_eq!(integ.degree(), -1);
        assert!((integ.matrix() - m.scale(-1.5).matrix()).norm() < 1e-12);
    }

    #[test]
    fn family_and_jacobian_fields_agree() {
        let c = line_chart(2);
        let d = GradedDims::shared([(0, 1), (1, 1)]).unwrap();
        let mut a1 = ExprMatrix::zero(2);
        a1.set(0, 0, e("x2"));
        a1.set(1, 1, e("x1*x2"));
        let mut a1b = ExprMatrix::zero(2);
        a1b.set(0, 0, e("sin(x1)"));
        let mut a2 = ExprMatrix::zero(2);
        a2.set(0, 1, e("1 + x1^2"));
        let dd = Superconnection::new(
            &c,
            &d,
            vec![
                EndForm::zero(&c, &d, 0, 1),
                EndForm::new(&c, &d, 1, 0, [(0b01, a1), (0b10, a1b)]).unwrap(),
                EndForm::new(&c, &d, 2, -1, [(0b11, a2)]).unwrap(),
            ],
        )
        .unwrap();
        let fam = PathFamily::parse(&c, 1, &["t + w1*t*(1-t)", "w1^2 - t^2"]).unwrap();
        let sym = FamilyField::new(&fam, &dd).unwrap();
        let jac = JacobianField::new(FamilyPointMap::new(&fam).unwrap(), &dd).unwrap();
        for (w, t) in [(0.3, 0.1), (0.9, 0.77)] {
            let a = sym.contractions(&[w], t, (0.0, 1.0), 2).unwrap();
            let b = jac.contractions(&[w], t, (0.0, 1.0), 2).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(x.sub(y).unwrap().norm() < 1e-12);
            }
        }
    }

    #[test]
    fn restriction_and_reparametrization() {
        let c = line_chart(2);
        let fam = PathFamily::parse(&c, 2, &["t*w1", "w2 + t"]).unwrap();
        let r = fam.restrict(0, 1.0).unwrap();
        assert_eq!(r.params(), 1);
        assert_eq!(r.point(&[0.25], 0.5).unwrap(), vec![0.5, 0.75]);
        let rp = fam.reparametrize(&e("t^2")).unwrap();
        assert_eq!(rp.point(&[1.0, 0.0], 0.5).unwrap(), vec![0.25, 0.25]);
        assert!(PathFamily::new(&c, 0, vec![e("t"), e("t")], vec![0.5, 0.25]).is_err());
    }

    fn stokes_setup(m: usize, q: usize, seed: u64) -> (PathFamily, Superconnection) {
        use crate::catalog::{random_family, unipotent_example};
        let c = Arc::new(Chart::standard(m, Some(vec![(-1.0, 1.0); m])).unwrap());
        let d = unipotent_example(&c, seed).unwrap();
        let start = vec![-0.4; m];
        let end: Vec<f64> = (0..m).map(|i| 0.7 - 0.3 * i as f64).collect();
        (random_family(&c, q, &start, &end, seed + 1).unwrap(), d)
    }

    #[test]
    fn stokes_identity_on_flat_examples() {
        let quad = QuadSpec::default();
        for (m, q) in [(2usize, 1usize), (3, 1), (2, 2), (3, 2)] {
            let (fam, d) = stokes_setup(m, q, 11);
            let sides = stokes_sides(&fam, &d, &quad, q).unwrap();
            assert!(sides.lhs.op_norm() > 1e-4, "m={m} q={q}: degenerate example {}", sides.lhs.op_norm());
            assert!(sides.residual() < 1e-8, "m={m} q={q}: {}", sides.residual());
        }
    }

    #[test]
    fn stokes_detects_non_flat() {
        let c = line_chart(2);
        let d = GradedDims::shared([(0, 1), (1, 1)]).unwrap();
        let mut dm = DMatrix::zeros(2, 2);
        dm[(1, 0)] = 1.0;
        let delta = GradedEndo::from_matrix(&d, 1, dm).unwrap();
        let mut a1 = ExprMatrix::zero(2);
        a1.set(0, 0, e("x2"));
        let dd = Superconnection::new(
            &c,
            &d,
            vec![
                EndForm::constant(&c, 0, &delta).unwrap(),
                EndForm::new(&c, &d, 1, 0, [(0b01, a1)]).unwrap(),
                EndForm::zero(&c, &d, 2, -1),
            ],
        )
        .unwrap();
        let fam = PathFamily::parse(&c, 1, &["t", "w1*t*(1-t)"]).unwrap();
        assert!(check_stokes(&fam, &dd, &QuadSpec::default(), 1).unwrap() > 1e-2);
    }
}
