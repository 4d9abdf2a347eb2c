//! Ready-made flat superconnections and path families for tests, demos and scenarios.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::expr::{Chart, ScalarExpr};
use crate::forms::{mask_from_indices, EndForm, ExprMatrix};
use crate::graded::{GradedDims, GradedEndo};
use crate::superconn::{const_superconnection, unipotent_gauge, Superconnection};
use crate::transport::PathFamily;

/// The complex `k → k² → k` with `δ = e_1 ⊗ e_0^* + e_3 ⊗ e_2^*`.
pub fn three_term_dims() -> Arc<GradedDims> {
    GradedDims::shared([(0, 1), (1, 2), (2, 1)]).expect("valid dims")
}

pub fn three_term_delta(d: &Arc<GradedDims>) -> GradedEndo {
    let mut m = DMatrix::zeros(4, 4);
    m[(1, 0)] = 1.0;
    m[(3, 2)] = 1.0;
    GradedEndo::from_matrix(d, 1, m).expect("δ has degree 1")
}

fn random_poly(rng: &mut ChaCha8Rng, m: usize, max_deg: u32) -> ScalarExpr {
    let mut acc = ScalarExpr::int(rng.gen_range(-2..=2));
    for _ in 0..2 {
        let c = rng.gen_range(-3i64..=3);
        if c == 0 {
            continue;
        }
        let mut mono = ScalarExpr::ratio(c, 2);
        for a in 0..m {
            let p = rng.gen_range(0..=max_deg);
            if p > 0 {
                mono = mono * ScalarExpr::var(&format!("x{}", a + 1)).powi(p as i32);
            }
        }
        acc = acc + mono;
    }
    acc
}

/// Flat superconnection obtained from the constant differential on the three-term
/// complex by a seeded random unipotent gauge. All `A_p` with `p ≤ min(m, 3)` are
/// generically nonzero. Coordinates are only bounded by `chart`.
pub fn unipotent_example(chart: &Arc<Chart>, seed: u64) -> Result<Superconnection> {
    let m = chart.dim();
    let dims = three_term_dims();
    let base = const_superconnection(chart, &dims, &BTreeMap::from([(0, vec![(0, three_term_delta(&dims))])]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for p in 1..=m.min(2) {
        let mut terms = Vec::new();
        for mask in 1u32..(1 << m) {
            if mask.count_ones() as usize != p {
                continue;
            }
            let mut mat = ExprMatrix::zero(4);
            for r in 0..4 {
                for c in 0..4 {
                    if dims.allowed(-(p as i32), r, c) {
                        mat.set(r, c, random_poly(&mut rng, m, 2));
                    }
                }
            }
            terms.push((mask, mat));
        }
        parts.push(EndForm::new(chart, &dims, p, -(p as i32), terms)?);
    }
    unipotent_gauge(&base, &parts)
}

/// [`unipotent_example`] gauged by the diagonal degree-zero `g = diag(exp(c_i x_{a(i)}))`,
/// which makes `A_0` depend on the point.
pub fn varying_example(chart: &Arc<Chart>, seed: u64) -> Result<Superconnection> {
    let base = unipotent_example(chart, seed)?;
    let dims = base.dims().clone();
    let m = chart.dim();
    let rates = [(1, 2), (-1, 2), (1, 3), (3, 4)];
    let mut g = ExprMatrix::zero(4);
    let mut gi = ExprMatrix::zero(4);
    for (i, (n, d)) in rates.iter().enumerate() {
        let arg = ScalarExpr::ratio(*n, *d) * ScalarExpr::var(&format!("x{}", i % m + 1));
        g.set(i, i, arg.clone().exp());
        gi.set(i, i, (-arg).exp());
    }
    let g = EndForm::new(chart, &dims, 0, 0, [(0, g)])?;
    let gi = EndForm::new(chart, &dims, 0, 0, [(0, gi)])?;
    crate::superconn::gauge_transform(&base, &g, &gi)
}

/// A flat connection on a single graded piece with a nontrivial `A_1`, obtained by a
/// degree-zero gauge of the trivial one by `g = exp(x1)·(1 + x2 N)` with `N² = 0`.
pub fn gauge_example(chart: &Arc<Chart>) -> Result<Superconnection> {
    let dims = GradedDims::shared([(0, 2)])?;
    let x1 = ScalarExpr::var("x1");
    let x2 = if chart.dim() > 1 { ScalarExpr::var("x2") } else { ScalarExpr::zero() };
    let mut g = ExprMatrix::zero(2);
    g.set(0, 0, x1.clone().exp());
    g.set(1, 1, x1.clone().exp());
    g.set(0, 1, x1.clone().exp() * x2.clone());
    let mut gi = ExprMatrix::zero(2);
    gi.set(0, 0, (-x1.clone()).exp());
    gi.set(1, 1, (-x1.clone()).exp());
    gi.set(0, 1, -((-x1).exp() * x2));
    let g = EndForm::new(chart, &dims, 0, 0, [(0, g)])?;
    let gi = EndForm::new(chart, &dims, 0, 0, [(0, gi)])?;
    crate::superconn::gauge_transform(&Superconnection::trivial(chart, &dims), &g, &gi)
}

/// Random polynomial path from `start` to `end` of the given degree (at least 1).
pub fn random_path(chart: &Arc<Chart>, start: &[f64], end: &[f64], degree: u32, seed: u64) -> Result<PathFamily> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = ScalarExpr::var("t");
    let bump = t.clone() * (ScalarExpr::one() - t.clone());
    let comps = start
        .iter()
        .zip(end)
        .map(|(a, b)| {
            let a = ScalarExpr::from_f64(*a).expect("finite");
            let b = ScalarExpr::from_f64(*b).expect("finite");
            let mut c = a.clone() + (b - a) * t.clone();
            for p in 0..degree.saturating_sub(1) {
                let coef = ScalarExpr::ratio(rng.gen_range(-4..=4), 8);
                c = c + coef * bump.clone() * t.clone().powi(p as i32);
            }
            c
        })
        .collect();
    PathFamily::new(chart, 0, comps, Vec::new())
}

/// `k`-parameter family with fixed endpoints through the cube `[lo, hi]^m`:
/// `x_a = lo + (hi−lo)·(t + Σ_l c_{a,l} w_l t(1−t))`-style bumps with seeded coefficients.
pub fn random_family(chart: &Arc<Chart>, k: usize, start: &[f64], end: &[f64], seed: u64) -> Result<PathFamily> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = ScalarExpr::var("t");
    let bump = t.clone() * (ScalarExpr::one() - t.clone());
    let comps = start
        .iter()
        .zip(end)
        .map(|(a, b)| {
            let a = ScalarExpr::from_f64(*a).expect("finite");
            let b = ScalarExpr::from_f64(*b).expect("finite");
            let mut c = a.clone() + (b - a) * t.clone();
            for l in 0..k {
                let w = ScalarExpr::var(&format!("w{}", l + 1));
                let coef = ScalarExpr::ratio(rng.gen_range(-8..=8), 4);
                let coef2 = ScalarExpr::ratio(rng.gen_range(-4..=4), 4);
                c = c + (coef * w.clone() + coef2 * w.clone() * w * t.clone()) * bump.clone();
            }
            if k >= 2 {
                let coef = ScalarExpr::ratio(rng.gen_range(-6..=6), 4);
                c = c + coef * ScalarExpr::var("w1") * ScalarExpr::var("w2") * bump.clone();
            }
            c
        })
        .collect();
    PathFamily::new(chart, k, comps, Vec::new())
}

/// Seeded random polynomial form of bidegree `(p, e)`: each admissible multi-index is
/// kept with probability 0.7 and gets a random polynomial in every allowed block entry.
pub fn random_form(chart: &Arc<Chart>, dims: &Arc<GradedDims>, p: usize, e: i32, seed: u64) -> Result<EndForm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = chart.dim();
    let n = dims.total();
    let mut terms = Vec::new();
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != p || rng.gen_bool(0.3) {
            continue;
        }
        let mut mat = ExprMatrix::zero(n);
        for r in 0..n {
            for c in 0..n {
                if dims.allowed(e, r, c) {
                    let f = random_poly(&mut rng, m, 2);
                    let f = f.subst(&chart_renames(chart));
                    mat.set(r, c, f);
                }
            }
        }
        terms.push((mask, mat));
    }
    EndForm::new(chart, dims, p, e, terms)
}

fn chart_renames(chart: &Arc<Chart>) -> HashMap<String, ScalarExpr> {
    chart.names().iter().enumerate().map(|(a, n)| (format!("x{}", a + 1), ScalarExpr::var(n))).collect()
}

/// Mask helper for callers building forms by 1-based index lists.
pub fn mask(indices: &[usize]) -> u32 {
    mask_from_indices(indices).expect("strictly increasing indices")
}
