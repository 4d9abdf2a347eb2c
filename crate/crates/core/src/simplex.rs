//! Piecewise-linear paths through simplices and the integrals `ψ_k(σ)`.
//!
//! Simplex coordinates are `y_1..y_k` on `Δ^k = {1 ≥ y_1 ≥ … ≥ y_k ≥ 0}` with vertices
//! `v_i = (1,…,1,0,…,0)` (`i` ones). For `w ∈ I^{k−1}` the path `θ_w = π_k ∘ λ_w` runs from
//! `v_k` at `t = 0` to `v_0` at `t = 1`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::expr::{Chart, ScalarExpr};
use crate::forms::{CompiledMap, SmoothMap};
use crate::graded::GradedEndo;
use crate::quad::QuadSpec;
use crate::superconn::Superconnection;
use crate::transport::{integrate_field, JacobianField, PointMap};

/// Scalars the PL maps are generic over (`f64` inside quadrature, exact rationals in tests).
pub trait PlScalar: Clone + PartialOrd + Zero + One + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn from_ratio(num: i64, den: i64) -> Self;
    /// Largest integer `j` with `j ≤ self`, for `self ≥ 0`.
    fn floor_usize(&self) -> usize;
}

impl PlScalar for f64 {
    fn from_ratio(num: i64, den: i64) -> f64 {
        num as f64 / den as f64
    }

    fn floor_usize(&self) -> usize {
        self.floor().max(0.0) as usize
    }
}

impl PlScalar for BigRational {
    fn from_ratio(num: i64, den: i64) -> BigRational {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    fn floor_usize(&self) -> usize {
        let f = self.floor().to_integer();
        usize::try_from(f).unwrap_or(0)
    }
}

fn max_of<T: PlScalar>(xs: &[T]) -> T {
    let mut best = xs[0].clone();
    for x in &xs[1..] {
        if *x > best {
            best = x.clone();
        }
    }
    best
}

fn check_unit<T: PlScalar>(x: &[T]) -> Result<()> {
    if x.iter().any(|v| *v < T::zero() || *v > T::one()) {
        return Err(Error::InvalidInput("point must lie in the unit cube".into()));
    }
    Ok(())
}

/// `y_i = max(x_i, …, x_k)`: the retraction `I^k → Δ^k`.
pub fn pi_k<T: PlScalar>(x: &[T]) -> Result<Vec<T>> {
    check_unit(x)?;
    Ok(pi_unchecked(x))
}

fn pi_unchecked<T: PlScalar>(x: &[T]) -> Vec<T> {
    (0..x.len()).map(|i| max_of(&x[i..])).collect()
}

/// `λ_w(t)` for `w ∈ I^{k−1}`: the PL path through `Σ_{i ≤ j} w_i e_i` at `t = 1 − j/k`,
/// with `w_k = 1`.
pub fn lambda_path<T: PlScalar>(w: &[T], t: &T) -> Result<Vec<T>> {
    check_unit(w)?;
    if *t < T::zero() || *t > T::one() {
        return Err(Error::InvalidInput("t must lie in [0, 1]".into()));
    }
    Ok(lambda_unchecked(w, t))
}

fn lambda_unchecked<T: PlScalar>(w: &[T], t: &T) -> Vec<T> {
    let k = w.len() + 1;
    let kk = T::from_ratio(k as i64, 1);
    let x = (T::one() - t.clone()) * kk;
    let j = x.floor_usize().min(k);
    let s = x - T::from_ratio(j as i64, 1);
    let wk = |i: usize| if i < k - 1 { w[i].clone() } else { T::one() };
    let mut out = vec![T::zero(); k];
    for (i, o) in out.iter_mut().enumerate().take(j) {
        *o = wk(i);
    }
    if j < k {
        out[j] = s * wk(j);
    }
    out
}

/// `θ_(k)(w)(t) = π_k(λ_w(t))`.
pub fn theta<T: PlScalar>(k: usize, w: &[T], t: &T) -> Result<Vec<T>> {
    if k == 0 || w.len() + 1 != k {
        return Err(Error::DimensionMismatch(format!("θ_({k}) takes {} parameters, got {}", k.saturating_sub(1), w.len())));
    }
    Ok(pi_unchecked(&lambda_path(w, t)?))
}

/// Vertex `v_i` of `Δ^k`.
pub fn vertex<T: PlScalar>(k: usize, i: usize) -> Vec<T> {
    (0..k).map(|m| if m < i { T::one() } else { T::zero() }).collect()
}

/// Image of `y' ∈ Δ^p` under the affine map `Δ^p → Δ^k` sending `v'_a ↦ v_{js[a]}`
/// (`js` nondecreasing): `y_m = y'_{a(m)}` with `a(m) = min{a : js[a] ≥ m}` and `y'_0 = 1`.
pub fn vertex_map<T: PlScalar>(js: &[usize], k: usize, y: &[T]) -> Vec<T> {
    (1..=k)
        .map(|m| match js.iter().position(|&j| j >= m) {
            Some(0) => T::one(),
            Some(a) => y[a - 1].clone(),
            None => T::zero(),
        })
        .collect()
}

/// Vertex list of the `i`-th face `[v_0, …, v̂_i, …, v_k]`.
pub fn face_vertices(k: usize, i: usize) -> Vec<usize> {
    (0..=k).filter(|&v| v != i).collect()
}

/// Outcome of [`check_face_lemmas`].
#[derive(Debug, Clone, PartialEq)]
pub struct FaceLemmaReport {
    pub cases: usize,
    /// First failing case, if any.
    pub witness: Option<String>,
}

impl FaceLemmaReport {
    pub fn holds(&self) -> bool {
        self.witness.is_none()
    }
}

type Q = BigRational;

fn random_q(rng: &mut ChaCha8Rng) -> Q {
    let den = rng.gen_range(1..=24i64);
    Q::from_ratio(rng.gen_range(0..=den), den)
}

fn fmt_q(v: &[Q]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("({})", parts.join(", "))
}

/// Checks both face lemmas of `θ` exactly on 100 random rational `(w, t)` per face.
pub fn check_face_lemmas(k: usize) -> Result<FaceLemmaReport> {
    check_face_lemmas_with(k, &|x: &[Q]| pi_unchecked(x))
}

/// As [`check_face_lemmas`] with a caller-supplied retraction in place of `π_k`.
pub fn check_face_lemmas_with(k: usize, pi: &dyn Fn(&[Q]) -> Vec<Q>) -> Result<FaceLemmaReport> {
    if !(2..=4).contains(&k) {
        return Err(Error::InvalidInput(format!("face lemmas are checked for 2 <= k <= 4, got {k}")));
    }
    let th = |n: usize, w: &[Q], t: &Q| pi(&lambda_unchecked(w, t)).into_iter().take(n).collect::<Vec<Q>>();
    let mut rng = ChaCha8Rng::seed_from_u64(0xface + k as u64);
    let mut cases = 0;
    let kq = Q::from_ratio(k as i64, 1);
    let one = Q::one();
    for i in 1..k {
        let j = k - i;
        for _ in 0..100 {
            cases += 1;
            let t = random_q(&mut rng);
            // negative face: insert 0 at position i
            let w: Vec<Q> = (0..k - 2).map(|_| random_q(&mut rng)).collect();
            let mut wi = w.clone();
            wi.insert(i - 1, Q::zero());
            let lhs = th(k, &wi, &t);
            // λ is stationary while its coordinate i would move, i.e. on
            // [(k−i)/k, (k−i+1)/k]; ω pauses there.
            let jn = k - i + 1;
            let km1 = Q::from_ratio(k as i64 - 1, 1);
            let lo = Q::from_ratio(jn as i64 - 1, k as i64);
            let hi_n = Q::from_ratio(jn as i64, k as i64);
            let s = if t <= lo {
                kq.clone() * t.clone() / km1.clone()
            } else if t <= hi_n {
                Q::from_ratio(jn as i64 - 1, k as i64 - 1)
            } else {
                (kq.clone() * t.clone() - one.clone()) / km1.clone()
            };
            let inner = th(k - 1, &w, &s);
            let rhs = vertex_map(&face_vertices(k, i), k, &inner);
            if lhs != rhs {
                return Ok(FaceLemmaReport {
                    cases,
                    witness: Some(format!(
                        "negative face i={i}: w={} t={t}: {} != {}",
                        fmt_q(&w),
                        fmt_q(&lhs),
                        fmt_q(&rhs)
                    )),
                });
            }
            // positive face: insert 1 at position i; α ∈ I^{i−1}, β ∈ I^{j−1}
            cases += 1;
            let hi = Q::from_ratio(j as i64, k as i64);
            let alpha: Vec<Q> = (0..i - 1).map(|_| random_q(&mut rng)).collect();
            let beta: Vec<Q> = (0..j - 1).map(|_| random_q(&mut rng)).collect();
            let mut wp = alpha.clone();
            wp.push(one.clone());
            wp.extend(beta.iter().cloned());
            let lhs = th(k, &wp, &t);
            let rhs = if t <= hi {
                let u = kq.clone() * t.clone() / Q::from_ratio(j as i64, 1);
                let back: Vec<usize> = (i..=k).collect();
                vertex_map(&back, k, &th(j, &beta, &u))
            } else {
                let u = (kq.clone() / Q::from_ratio(i as i64, 1)) * (t.clone() - hi.clone());
                let front: Vec<usize> = (0..=i).collect();
                vertex_map(&front, k, &th(i, &alpha, &u))
            };
            if lhs != rhs {
                return Ok(FaceLemmaReport {
                    cases,
                    witness: Some(format!(
                        "positive face i={i}: alpha={} beta={} t={t}: {} != {}",
                        fmt_q(&alpha),
                        fmt_q(&beta),
                        fmt_q(&lhs),
                        fmt_q(&rhs)
                    )),
                });
            }
        }
    }
    Ok(FaceLemmaReport { cases, witness: None })
}

// ---------------------------------------------------------------------------
// Simplices

/// Names `y1..yk`.
pub fn simplex_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("y{i}")).collect()
}

/// A smooth singular simplex `σ: Δ^k → M`.
#[derive(Debug, Clone)]
pub struct Simplex {
    k: usize,
    target: Arc<Chart>,
    components: Vec<ScalarExpr>,
}

/// Affine operations producing new simplices from old ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineOp {
    /// `∂_i σ = σ[v_0, …, v̂_i, …, v_k]`.
    Face(usize),
    /// `f_p σ = σ[v_0, …, v_p]`.
    Front(usize),
    /// `b_q σ = σ[v_{k−q}, …, v_k]`.
    Back(usize),
    /// The vertex `σ(v_i)` as a 0-simplex.
    Vertex(usize),
}

impl Simplex {
    pub fn new(target: &Arc<Chart>, k: usize, components: Vec<ScalarExpr>) -> Result<Simplex> {
        if components.len() != target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "simplex needs {} components, got {}",
                target.dim(),
                components.len()
            )));
        }
        let names: BTreeSet<String> = simplex_names(k).into_iter().collect();
        for c in &components {
            if let Some(v) = c.free_vars().into_iter().find(|v| !names.contains(v)) {
                return Err(Error::InvalidInput(format!("simplex expression uses '{v}'; only y1..y{k} are allowed")));
            }
        }
        let s = Simplex { k, target: target.clone(), components };
        s.check_image()?;
        Ok(s)
    }

    pub fn parse(target: &Arc<Chart>, k: usize, components: &[&str]) -> Result<Simplex> {
        let comps = components.iter().map(|c| ScalarExpr::parse(c)).collect::<Result<Vec<_>, _>>()?;
        Simplex::new(target, k, comps)
    }

    /// The affine simplex with `σ(v_i) = points[i]`:
    /// `x = p_0 + Σ_m y_m (p_m − p_{m−1})`.
    pub fn affine(target: &Arc<Chart>, points: &[Vec<f64>]) -> Result<Simplex> {
        if points.is_empty() {
            return Err(Error::InvalidInput("an affine simplex needs at least one vertex".into()));
        }
        let m = target.dim();
        let c = |v: f64| ScalarExpr::from_f64(v).ok_or_else(|| Error::InvalidInput("non-finite vertex".into()));
        let mut comps = Vec::with_capacity(m);
        for a in 0..m {
            if points.iter().any(|p| p.len() != m) {
                return Err(Error::DimensionMismatch(format!("vertices must have {m} coordinates")));
            }
            let mut e = c(points[0][a])?;
            for i in 1..points.len() {
                let diff = points[i][a] - points[i - 1][a];
                if diff != 0.0 {
                    e = e + c(diff)? * ScalarExpr::var(&format!("y{i}"));
                }
            }
            comps.push(e);
        }
        Simplex::new(target, points.len() - 1, comps)
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn target(&self) -> &Arc<Chart> {
        &self.target
    }

    pub fn components(&self) -> &[ScalarExpr] {
        &self.components
    }

    /// `σ(y)`.
    pub fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        let env: HashMap<String, f64> = simplex_names(self.k).into_iter().zip(y.iter().copied()).collect();
        self.components.iter().map(|c| c.eval(&env).map_err(|e| Error::eval_at(y, e))).collect()
    }

    pub fn vertex_point(&self, i: usize) -> Result<Vec<f64>> {
        self.eval(&vertex::<f64>(self.k, i))
    }

    fn check_image(&self) -> Result<()> {
        let mut samples: Vec<Vec<f64>> = (0..=self.k).map(|i| vertex(self.k, i)).collect();
        samples.push((0..self.k).map(|m| (self.k - m) as f64 / (self.k + 1) as f64).collect());
        for y in samples {
            let x = self.eval(&y)?;
            if !self.target.contains(&x, 1e-9) {
                return Err(Error::InvalidInput(format!("simplex leaves the chart bounds at {x:?}")));
            }
        }
        Ok(())
    }

    /// Precomposition with the affine map `Δ^p → Δ^k` with vertex list `js`.
    pub fn restrict_vertices(&self, js: &[usize]) -> Result<Simplex> {
        if js.is_empty() || js.windows(2).any(|w| w[0] > w[1]) || js.iter().any(|&j| j > self.k) {
            return Err(Error::InvalidInput(format!("invalid vertex list {js:?} for a {}-simplex", self.k)));
        }
        let p = js.len() - 1;
        let new_vars: Vec<ScalarExpr> = simplex_names(p).iter().map(|n| ScalarExpr::var(n)).collect();
        let images: Vec<ScalarExpr> = (1..=self.k)
            .map(|m| match js.iter().position(|&j| j >= m) {
                Some(0) => ScalarExpr::one(),
                Some(a) => new_vars[a - 1].clone(),
                None => ScalarExpr::zero(),
            })
            .collect();
        let map: HashMap<String, ScalarExpr> = simplex_names(self.k).into_iter().zip(images).collect();
        Simplex::new(&self.target, p, self.components.iter().map(|c| c.subst(&map)).collect())
    }

    pub fn face(&self, op: AffineOp) -> Result<Simplex> {
        let k = self.k;
        let check = |i: usize| {
            if i > k {
                Err(Error::InvalidInput(format!("index {i} out of range for a {k}-simplex")))
            } else {
                Ok(())
            }
        };
        match op {
            AffineOp::Face(i) => {
                check(i)?;
                if k == 0 {
                    return Err(Error::InvalidInput("a 0-simplex has no faces".into()));
                }
                self.restrict_vertices(&face_vertices(k, i))
            }
            AffineOp::Front(p) => {
                check(p)?;
                self.restrict_vertices(&(0..=p).collect::<Vec<_>>())
            }
            AffineOp::Back(q) => {
                check(q)?;
                self.restrict_vertices(&((k - q)..=k).collect::<Vec<_>>())
            }
            AffineOp::Vertex(i) => {
                check(i)?;
                self.restrict_vertices(&[i])
            }
        }
    }
}

impl fmt::Display for Simplex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.components.iter().map(|c| c.to_string()).collect();
        write!(f, "Δ^{} → ({})", self.k, parts.join(", "))
    }
}

// ---------------------------------------------------------------------------
// Transport along θ

/// `(w, t) ↦ σ(θ_(k)(w)(t))` with its exact piecewise Jacobian.
#[derive(Debug, Clone)]
pub struct ThetaMap {
    k: usize,
    sigma: CompiledMap,
}

impl ThetaMap {
    pub fn new(sigma: &Simplex) -> Result<ThetaMap> {
        if sigma.k == 0 {
            return Err(Error::InvalidInput("θ needs a simplex of dimension at least 1".into()));
        }
        let src = Arc::new(Chart::new(simplex_names(sigma.k), None)?);
        let map = SmoothMap::new(src, sigma.target.clone(), sigma.components.clone())?;
        Ok(ThetaMap { k: sigma.k, sigma: map.compile()? })
    }

    /// Segment index `j` (so that `t ∈ [1 − (j+1)/k, 1 − j/k]`) of a time inside a piece.
    fn segment(&self, t_mid: f64) -> usize {
        (((1.0 - t_mid) * self.k as f64).floor() as usize).min(self.k - 1)
    }
}

impl PointMap for ThetaMap {
    fn params(&self) -> usize {
        self.k - 1
    }

    fn chart_dim(&self) -> usize {
        self.sigma.target_dim()
    }

    /// Segment ends `j/k` and the interior times where the moving coordinate
    /// `s·w_{j+1}` overtakes a running maximum `max(w_m..w_j)`.
    fn breakpoints(&self, w: &[f64]) -> Vec<f64> {
        let k = self.k;
        let wk = |i: usize| if i < k - 1 { w[i] } else { 1.0 };
        let mut out: Vec<f64> = (1..k).map(|j| j as f64 / k as f64).collect();
        for j in 0..k {
            let moving = wk(j);
            if moving <= 0.0 {
                continue;
            }
            let mut running = f64::NEG_INFINITY;
            for m in (0..j).rev() {
                running = running.max(wk(m));
                let s = running / moving;
                if s > 0.0 && s < 1.0 {
                    out.push(1.0 - (j as f64 + s) / k as f64);
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    fn eval(&self, w: &[f64], t: f64, piece: (f64, f64), x: &mut [f64], vel: &mut [f64], tangents: &mut [f64]) -> Result<()> {
        let k = self.k;
        let m = self.chart_dim();
        let kp = k - 1;
        let mid = 0.5 * (piece.0 + piece.1);
        let j = self.segment(mid);
        let wk = |i: usize| if i < kp { w[i] } else { 1.0 };
        // λ on segment j at time τ; derivative data is constant on the segment.
        let lam = |tau: f64| -> Vec<f64> {
            let s = (1.0 - tau) * k as f64 - j as f64;
            (0..k).map(|i| if i < j { wk(i) } else if i == j { s * wk(j) } else { 0.0 }).collect()
        };
        let at_mid = lam(mid);
        let at_t = lam(t);
        // argmax pattern of the running maxima at the midpoint (first maximum on ties)
        let mut arg = vec![0usize; k];
        for row in 0..k {
            let mut best = row;
            for c in row..k {
                if at_mid[c] > at_mid[best] {
                    best = c;
                }
            }
            arg[row] = best;
        }
        let y: Vec<f64> = arg.iter().map(|&a| at_t[a]).collect();
        // ∂λ/∂t and ∂λ/∂w_l
        let s_t = (1.0 - t) * k as f64 - j as f64;
        let dlam_dt = |i: usize| if i == j { -(k as f64) * wk(j) } else { 0.0 };
        let dlam_dw = |i: usize, l: usize| {
            if i == l && l < j {
                1.0
            } else if i == l && l == j {
                s_t
            } else {
                0.0
            }
        };
        let mut jac = vec![0.0; m * k];
        self.sigma.eval(&y, &mut Vec::new(), x, &mut jac)?;
        for a in 0..m {
            let mut v = 0.0;
            for (r, &ar) in arg.iter().enumerate() {
                v += jac[a * k + r] * dlam_dt(ar);
            }
            vel[a] = v;
            for l in 0..kp {
                let mut tv = 0.0;
                for (r, &ar) in arg.iter().enumerate() {
                    tv += jac[a * k + r] * dlam_dw(ar, l);
                }
                tangents[l * m + a] = tv;
            }
        }
        Ok(())
    }
}

/// Sign `(−1)^{(k−1)(k−2)/2}` relating the integral of the top coefficient of `Ψ_{k−1}`
/// (coefficient-first forms) to the normalization in which `ψ` satisfies the standard
/// twisting-cochain relation.
pub fn orientation_sign(k: usize) -> f64 {
    if k < 2 || ((k - 1) * (k - 2) / 2) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// `ψ_k(σ) = ∫_{I^{k−1}} θ_(k)^*(Pσ)^* Ψ_{k−1}` for `k ≥ 1`, and `ψ_0(v) = A_0(σ(v))`.
pub fn psi_simplex(sigma: &Simplex, d: &Superconnection, quad: &QuadSpec) -> Result<GradedEndo> {
    if **sigma.target() != **d.chart() {
        return Err(Error::DimensionMismatch("simplex and superconnection use different charts".into()));
    }
    if sigma.dim() == 0 {
        return d.a0_at(&sigma.vertex_point(0)?);
    }
    let field = JacobianField::new(ThetaMap::new(sigma)?, d)?;
    Ok(integrate_field(&field, quad)?.scale(orientation_sign(sigma.dim())))
}

/// Both sides of the twisting-cochain relation
/// `Σ_{i=1}^{k−1} (−1)^i ψ_{k−1}(∂_iσ) = Σ_{i=0}^{k} (−1)^i ψ_i(f_iσ) ψ_{k−i}(b_{k−i}σ)`.
#[derive(Debug, Clone)]
pub struct TwistingSides {
    pub lhs: GradedEndo,
    pub rhs: GradedEndo,
}

impl TwistingSides {
    pub fn residual(&self) -> f64 {
        self.lhs.sub(&self.rhs).map(|d| d.op_norm()).unwrap_or(f64::INFINITY)
    }
}

/// Memoizes `ψ` over faces that occur repeatedly.
pub struct PsiTable<'a> {
    d: &'a Superconnection,
    quad: QuadSpec,
    cache: HashMap<(usize, Vec<String>), GradedEndo>,
}

impl<'a> PsiTable<'a> {
    pub fn new(d: &'a Superconnection, quad: &QuadSpec) -> PsiTable<'a> {
        PsiTable { d, quad: *quad, cache: HashMap::new() }
    }

    pub fn psi(&mut self, sigma: &Simplex) -> Result<GradedEndo> {
        let key = (sigma.dim(), sigma.components().iter().map(|c| c.to_string()).collect());
        if let Some(v) = self.cache.get(&key) {
            return Ok(v.clone());
        }
        let v = psi_simplex(sigma, self.d, &self.quad)?;
        self.cache.insert(key, v.clone());
        Ok(v)
    }
}

pub fn twisting_sides(sigma: &Simplex, d: &Superconnection, quad: &QuadSpec) -> Result<TwistingSides> {
    let k = sigma.dim();
    if k == 0 {
        return Err(Error::InvalidInput("the twisting relation needs k >= 1".into()));
    }
    let mut table = PsiTable::new(d, quad);
    let sign = |i: usize| if i % 2 == 0 { 1.0 } else { -1.0 };
    let mut lhs = GradedEndo::zero(d.dims(), 2 - k as i32);
    for i in 1..k {
        lhs.axpy(sign(i), &table.psi(&sigma.face(AffineOp::Face(i))?)?);
    }
    let mut rhs = GradedEndo::zero(d.dims(), 2 - k as i32);
    for i in 0..=k {
        let front = table.psi(&sigma.face(AffineOp::Front(i))?)?;
        let back = table.psi(&sigma.face(AffineOp::Back(k - i))?)?;
        rhs.axpy(sign(i), &front.compose(&back)?);
    }
    Ok(TwistingSides { lhs, rhs })
}

pub fn twisting_residual(sigma: &Simplex, d: &Superconnection, quad: &QuadSpec) -> Result<f64> {
    Ok(twisting_sides(sigma, d, quad)?.residual())
}

/// The A∞ relation for `F_k(α) = ψ_k(α_*)` where `α_*` is the affine simplex through the
/// barycenters `b(σ_0), …, b(σ_k)` of a composable chain of simplex morphisms.
pub fn ainfty_residual(barycenters: &[Vec<f64>], d: &Superconnection, quad: &QuadSpec) -> Result<f64> {
    if barycenters.len() < 2 {
        return Err(Error::InvalidInput("a chain needs at least one morphism".into()));
    }
    let alpha = Simplex::affine(d.chart(), barycenters)?;
    twisting_residual(&alpha, d, quad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64, d: i64) -> Q {
        Q::from_ratio(n, d)
    }

    #[test]
    fn pi_examples() {
        assert_eq!(pi_k(&[0.3, 0.7]).unwrap(), vec![0.7, 0.7]);
        assert_eq!(pi_k(&[0.0, 1.0, 0.0]).unwrap(), vec![1.0, 1.0, 0.0]);
        assert_eq!(pi_k(&[q(3, 4), q(1, 2), q(1, 3)]).unwrap(), vec![q(3, 4), q(1, 2), q(1, 3)]);
        assert!(pi_k(&[1.5]).is_err());
    }

    #[test]
    fn lambda_examples() {
        let w = [q(1, 2)];
        assert_eq!(lambda_path(&w, &Q::zero()).unwrap(), vec![q(1, 2), q(1, 1)]);
        assert_eq!(lambda_path(&w, &q(1, 2)).unwrap(), vec![q(1, 2), q(0, 1)]);
        assert_eq!(lambda_path(&w, &Q::one()).unwrap(), vec![q(0, 1), q(0, 1)]);
        assert_eq!(lambda_path(&w, &q(1, 4)).unwrap(), vec![q(1, 2), q(1, 2)]);
    }

    #[test]
    fn theta_endpoints_and_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 1..=4 {
            for _ in 0..20 {
                let w: Vec<Q> = (0..k - 1).map(|_| random_q(&mut rng)).collect();
                assert_eq!(theta(k, &w, &Q::zero()).unwrap(), vertex::<Q>(k, k));
                assert_eq!(theta(k, &w, &Q::one()).unwrap(), vertex::<Q>(k, 0));
            }
            // vertex parameters pass through v_i exactly when w_i = 1
            for bits in 0u32..(1 << (k - 1)) {
                let w: Vec<Q> = (0..k - 1).map(|i| if bits & (1 << i) != 0 { Q::one() } else { Q::zero() }).collect();
                for i in 1..k {
                    let t = q((k - i) as i64, k as i64);
                    let hit = theta(k, &w, &t).unwrap() == vertex::<Q>(k, i);
                    assert_eq!(hit, bits & (1 << (i - 1)) != 0, "k={k} w={w:?} i={i}");
                }
            }
        }
        // k = 2, w = 1 runs v_2 → v_1 → v_0 along edges
        let w = [Q::one()];
        assert_eq!(theta(2, &w, &q(1, 2)).unwrap(), vertex::<Q>(2, 1));
        assert_eq!(theta(2, &w, &q(1, 4)).unwrap(), vec![q(1, 1), q(1, 2)]);
        assert_eq!(theta(2, &w, &q(3, 4)).unwrap(), vec![q(1, 2), q(0, 1)]);
    }

    #[test]
    fn face_lemmas_hold_exactly() {
        for k in 2..=4 {
            let r = check_face_lemmas(k).unwrap();
            assert!(r.holds(), "{:?}", r.witness);
            assert_eq!(r.cases, 200 * (k - 1));
        }
        assert!(check_face_lemmas(1).is_err());
        assert!(check_face_lemmas(5).is_err());
    }

    #[test]
    fn face_lemmas_catch_a_perturbed_retraction() {
        // off by one: y_i = max(x_{i+1}, …, x_k), with the last coordinate kept
        let broken = |x: &[Q]| -> Vec<Q> {
            let k = x.len();
            (0..k).map(|i| max_of(&x[(i + 1).min(k - 1)..])).collect()
        };
        let r = check_face_lemmas_with(3, &broken).unwrap();
        assert!(!r.holds());
        assert!(r.witness.unwrap().contains("face"));
    }

    #[test]
    fn faces_of_affine_simplices() {
        let c = Arc::new(Chart::standard(2, None).unwrap());
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 2.0], vec![-1.0, 3.0]];
        let s = Simplex::affine(&c, &pts).unwrap();
        for i in 0..4 {
            assert_eq!(s.vertex_point(i).unwrap(), pts[i]);
        }
        let f = s.face(AffineOp::Face(1)).unwrap();
        let want = Simplex::affine(&c, &[pts[0].clone(), pts[2].clone(), pts[3].clone()]).unwrap();
        for y in [[0.3, 0.1], [0.9, 0.9], [0.5, 0.0]] {
            assert_eq!(f.eval(&y).unwrap(), want.eval(&y).unwrap());
        }
        let same = s.face(AffineOp::Front(3)).unwrap();
        assert_eq!(same.to_string(), s.to_string());
        let b0 = s.face(AffineOp::Back(0)).unwrap();
        assert_eq!(b0.dim(), 0);
        assert_eq!(b0.vertex_point(0).unwrap(), pts[3]);
        assert!(s.face(AffineOp::Face(4)).is_err());
    }

    #[test]
    fn simplicial_identities() {
        let c = Arc::new(Chart::standard(2, None).unwrap());
        let s = Simplex::parse(&c, 3, &["y1^2 + y3", "y2*y1 - y3^3"]).unwrap();
        for j in 1..=3 {
            for i in 0..j {
                let a = s.face(AffineOp::Face(j)).unwrap().face(AffineOp::Face(i)).unwrap();
                let b = s.face(AffineOp::Face(i)).unwrap().face(AffineOp::Face(j - 1)).unwrap();
                for y in [[0.8, 0.2], [0.5, 0.5], [1.0, 0.0]] {
                    let (pa, pb) = (a.eval(&y).unwrap(), b.eval(&y).unwrap());
                    assert!(pa.iter().zip(&pb).all(|(u, v)| (u - v).abs() < 1e-15), "i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn theta_breakpoints_make_pieces_linear() {
        let c = Arc::new(Chart::standard(3, None).unwrap());
        let s = Simplex::parse(&c, 3, &["y1", "y2", "y3"]).unwrap();
        let tm = ThetaMap::new(&s).unwrap();
        let w = [0.3, 0.8];
        let bps = tm.breakpoints(&w);
        let mut cuts = vec![0.0];
        cuts.extend(bps.iter().copied());
        cuts.push(1.0);
        let (mut x, mut v, mut tan) = (vec![0.0; 3], vec![0.0; 3], vec![0.0; 6]);
        for win in cuts.windows(2) {
            let (a, b) = (win[0], win[1]);
            for u in [0.1, 0.5, 0.9] {
                let t = a + (b - a) * u;
                tm.eval(&w, t, (a, b), &mut x, &mut v, &mut tan).unwrap();
                let exact = theta(3, &w, &t).unwrap();
                assert!(x.iter().zip(&exact).all(|(p, e)| (p - e).abs() < 1e-14), "t={t}: {x:?} vs {exact:?}");
                let h = 1e-7 * (b - a);
                let fwd = theta(3, &w, &(t + h)).unwrap();
                let bwd = theta(3, &w, &(t - h)).unwrap();
                for i in 0..3 {
                    assert!(((fwd[i] - bwd[i]) / (2.0 * h) - v[i]).abs() < 1e-6);
                }
            }
        }
    }

    fn rich() -> (Arc<Chart>, Superconnection) {
        let c = Arc::new(Chart::standard(3, Some(vec![(-1.0, 1.0); 3])).unwrap());
        let d = crate::catalog::unipotent_example(&c, 11).unwrap();
        (c, d)
    }

    fn corners() -> Vec<Vec<f64>> {
        vec![vec![0.1, -0.2, 0.3], vec![0.6, 0.1, -0.1], vec![0.2, 0.7, 0.2], vec![-0.3, 0.4, 0.6], vec![0.0, -0.5, -0.2]]
    }

    #[test]
    fn edge_integral_is_reversed_transport() {
        use crate::transport::{transport_phi, PathFamily};
        let (c, d) = rich();
        let quad = QuadSpec::default();
        let pts = corners();
        let s = Simplex::affine(&c, &pts[..2]).unwrap();
        let psi1 = psi_simplex(&s, &d, &quad).unwrap();
        // θ runs from v_1 to v_0, so the edge is traversed from pts[1] to pts[0]
        let comps: Vec<String> = (0..3).map(|a| format!("{} + ({})*t", pts[1][a], pts[0][a] - pts[1][a])).collect();
        let refs: Vec<&str> = comps.iter().map(String::as_str).collect();
        let fam = PathFamily::parse(&c, 0, &refs).unwrap();
        let phi = transport_phi(&fam, &[], 0.0, 1.0, &d, &quad).unwrap();
        assert!(psi1.sub(&phi).unwrap().op_norm() < 1e-10);
        // composing with the reversed edge gives the identity
        let rev = Simplex::affine(&c, &[pts[1].clone(), pts[0].clone()]).unwrap();
        let back = psi_simplex(&rev, &d, &quad).unwrap();
        let id = GradedEndo::identity(d.dims());
        assert!(psi1.compose(&back).unwrap().sub(&id).unwrap().op_norm() < 1e-6);
    }

    #[test]
    fn twisting_relation_on_flat_example() {
        let (c, d) = rich();
        let quad = QuadSpec::default();
        let pts = corners();
        for (k, tol) in [(1usize, 1e-8), (2, 1e-6), (3, 1e-3), (4, 1e-3)] {
            let s = Simplex::affine(&c, &pts[..=k]).unwrap();
            let sides = twisting_sides(&s, &d, &quad).unwrap();
            assert!(sides.residual() < tol, "k={k}: {}", sides.residual());
            if k >= 2 {
                assert!(sides.lhs.op_norm() > 1e-2, "k={k}: degenerate");
            }
        }
    }

    #[test]
    fn twisting_relation_detects_non_flat() {
        use crate::forms::{EndForm, ExprMatrix};
        let c = Arc::new(Chart::standard(2, None).unwrap());
        let dims = crate::graded::GradedDims::shared([(0, 1), (1, 1)]).unwrap();
        let mut a2 = ExprMatrix::zero(2);
        a2.set(0, 1, ScalarExpr::parse("1 + x1").unwrap());
        // δA_2 + A_2δ ≠ 0, so the q = 1 flatness equation fails
        let mut delta = ExprMatrix::zero(2);
        delta.set(1, 0, ScalarExpr::one());
        let d = Superconnection::new(
            &c,
            &dims,
            vec![EndForm::new(&c, &dims, 0, 1, [(0, delta)]).unwrap(), EndForm::zero(&c, &dims, 1, 0), EndForm::new(&c, &dims, 2, -1, [(0b11, a2)]).unwrap()],
        )
        .unwrap();
        let s = Simplex::affine(&c, &[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(twisting_residual(&s, &d, &QuadSpec::default()).unwrap() >= 1e-2);
    }

    #[test]
    fn degenerate_simplices_vanish() {
        let (c, d) = rich();
        let p = vec![0.2, 0.1, -0.3];
        let s = Simplex::affine(&c, &[p.clone(), p.clone(), p.clone()]).unwrap();
        assert!(psi_simplex(&s, &d, &QuadSpec::default()).unwrap().op_norm() < 1e-14);
        assert!(ainfty_residual(&[p.clone(), p.clone(), p], &d, &QuadSpec::default()).unwrap() < 1e-10);
    }
}
