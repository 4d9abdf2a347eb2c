//! Quadrature rules: Gauss–Legendre nodes, composite rules and tensor grids on cubes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resolution knobs shared by the transport solvers and the cube integrators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadSpec {
    /// RK4 steps per unit of `t`.
    pub rk4_steps: usize,
    /// Gauss–Legendre order per panel.
    pub gauss_order: usize,
    /// Panels per parameter axis.
    pub subdivisions: usize,
}

impl Default for QuadSpec {
    fn default() -> Self {
        QuadSpec { rk4_steps: 200, gauss_order: 6, subdivisions: 2 }
    }
}

impl QuadSpec {
    pub fn new(rk4_steps: usize, gauss_order: usize, subdivisions: usize) -> Result<QuadSpec> {
        let q = QuadSpec { rk4_steps, gauss_order, subdivisions };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rk4_steps == 0 {
            return Err(Error::Quadrature("rk4_steps must be at least 1".into()));
        }
        if self.gauss_order == 0 || self.gauss_order > 64 {
            return Err(Error::Quadrature("gauss_order must be in 1..=64".into()));
        }
        if self.subdivisions == 0 {
            return Err(Error::Quadrature("subdivisions must be at least 1".into()));
        }
        Ok(())
    }

    /// Composite rule on `[0, 1]` used along each parameter axis.
    pub fn axis_rule(&self) -> Vec<(f64, f64)> {
        composite(0.0, 1.0, self.gauss_order, self.subdivisions)
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> GaussLegendre {
        assert!(n >= 1, "Gauss-Legendre order must be positive");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Tricomi's initial guess followed by Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d.is_finite() {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // map [-1, 1] onto [0, 1]
            nodes[i] = 0.5 * (1.0 - x);
            nodes[n - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Matrix `S` with `S[i][j] = ∫_0^{x_i} L_j(u) du`, where `L_j` is the Lagrange basis
    /// on the nodes. Applying it to nodal values integrates the interpolant.
    pub fn integration_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.nodes.len();
        let bary = barycentric_weights(&self.nodes);
        let mut s = vec![vec![0.0; n]; n];
        for (i, row) in s.iter_mut().enumerate() {
            let xi = self.nodes[i];
            for (xl, wl) in self.nodes.iter().zip(&self.weights) {
                let u = xi * xl;
                let basis = lagrange_basis(&self.nodes, &bary, u);
                for (j, b) in basis.iter().enumerate() {
                    row[j] += xi * wl * b;
                }
            }
        }
        s
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn barycentric_weights(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let prod: f64 = (0..x.len()).filter(|&m| m != j).map(|m| x[j] - x[m]).product();
            1.0 / prod
        })
        .collect()
}

fn lagrange_basis(x: &[f64], bary: &[f64], u: f64) -> Vec<f64> {
    if let Some(j) = x.iter().position(|&xj| xj == u) {
        let mut out = vec![0.0; x.len()];
        out[j] = 1.0;
        return out;
    }
    let terms: Vec<f64> = x.iter().zip(bary).map(|(xj, bj)| bj / (u - xj)).collect();
    let total: f64 = terms.iter().sum();
    terms.into_iter().map(|t| t / total).collect()
}

/// Composite Gauss–Legendre rule on `[a, b]` with `panels` equal panels.
pub fn composite(a: f64, b: f64, order: usize, panels: usize) -> Vec<(f64, f64)> {
    let gl = GaussLegendre::new(order);
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(order * panels);
    for p in 0..panels {
        let lo = a + h * p as f64;
        for (x, w) in gl.nodes.iter().zip(&gl.weights) {
            out.push((lo + h * x, h * w));
        }
    }
    out
}

/// Splits `[a, b]` at the given breakpoints (those strictly inside are used).
pub fn split_interval(a: f64, b: f64, breakpoints: &[f64]) -> Vec<(f64, f64)> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut cuts: Vec<f64> = breakpoints.iter().copied().filter(|&x| x > lo && x < hi).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|x, y| (*x - *y).abs() <= 1e-15);
    let mut pieces = Vec::with_capacity(cuts.len() + 1);
    let mut start = lo;
    for c in cuts {
        if c - start > 1e-15 {
            pieces.push((start, c));
            start = c;
        }
    }
    if hi - start > 1e-15 || pieces.is_empty() {
        pieces.push((start, hi));
    }
    pieces
}

/// Nodes of the tensor-product rule on `I^k`, in lexicographic order (first axis slowest).
pub fn tensor_grid(rule: &[(f64, f64)], k: usize) -> Vec<(Vec<f64>, f64)> {
    let mut out = vec![(Vec::with_capacity(k), 1.0)];
    for _ in 0..k {
        let mut next = Vec::with_capacity(out.len() * rule.len());
        for (pt, w) in &out {
            for (x, wx) in rule {
                let mut p = pt.clone();
                p.push(*x);
                next.push((p, w * wx));
            }
        }
        out = next;
    }
    out
}
