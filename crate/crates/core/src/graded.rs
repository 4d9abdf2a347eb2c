//! Graded vector spaces and degree-homogeneous endomorphisms.
//!
//! A [`GradedEndo`] is stored as one dense matrix on the total space `⊕ V^k`, with the
//! invariant that only entries mapping `V^k` into `V^{k+e}` may be nonzero. Blocks that
//! would land outside the declared support simply do not exist in the dense layout, so
//! `V^k = 0` for undeclared `k` is automatic.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dimensions `n_k` of the graded pieces, listed by increasing degree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GradedDims {
    pieces: Vec<Piece>,
    total: usize,
    degree_of: Vec<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Piece {
    degree: i32,
    dim: usize,
    offset: usize,
}

impl GradedDims {
    /// Builds from `(degree, dimension)` pairs. Zero dimensions are dropped.
    pub fn new(dims: impl IntoIterator<Item = (i32, usize)>) -> Result<GradedDims> {
        let mut map = BTreeMap::new();
        for (k, n) in dims {
            if map.insert(k, n).is_some() {
                return Err(Error::InvalidInput(format!("degree {k} listed twice")));
            }
        }
        let mut pieces = Vec::new();
        let mut offset = 0;
        let mut degree_of = Vec::new();
        for (degree, dim) in map {
            if dim == 0 {
                continue;
            }
            pieces.push(Piece { degree, dim, offset });
            degree_of.extend(std::iter::repeat_n(degree, dim));
            offset += dim;
        }
        Ok(GradedDims { pieces, total: offset, degree_of })
    }

    pub fn shared(dims: impl IntoIterator<Item = (i32, usize)>) -> Result<Arc<GradedDims>> {
        Self::new(dims).map(Arc::new)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn dim(&self, k: i32) -> usize {
        self.piece(k).map_or(0, |p| p.dim)
    }

    pub fn offset(&self, k: i32) -> Option<usize> {
        self.piece(k).map(|p| p.offset)
    }

    fn piece(&self, k: i32) -> Option<&Piece> {
        self.pieces.iter().find(|p| p.degree == k)
    }

    /// `(degree, dimension)` pairs in increasing degree.
    pub fn degrees(&self) -> impl Iterator<Item = (i32, usize)> + '_ {
        self.pieces.iter().map(|p| (p.degree, p.dim))
    }

    /// Degree of the basis vector with the given index in the total space.
    pub fn degree_of_index(&self, i: usize) -> i32 {
        self.degree_of[i]
    }

    /// Whether entry `(row, col)` may be nonzero in an endomorphism of degree `e`.
    pub fn allowed(&self, e: i32, row: usize, col: usize) -> bool {
        self.degree_of[row] == self.degree_of[col] + e
    }
}

/// Checks that two dimension records describe the same graded space.
pub(crate) fn same_dims(a: &Arc<GradedDims>, b: &Arc<GradedDims>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::DimensionMismatch("operands live on different graded spaces".into()))
    }
}

/// A homogeneous endomorphism of degree `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedEndo {
    dims: Arc<GradedDims>,
    degree: i32,
    mat: DMatrix<f64>,
}

impl GradedEndo {
    pub fn zero(dims: &Arc<GradedDims>, degree: i32) -> GradedEndo {
        let n = dims.total();
        GradedEndo { dims: dims.clone(), degree, mat: DMatrix::zeros(n, n) }
    }

    pub fn identity(dims: &Arc<GradedDims>) -> GradedEndo {
        let n = dims.total();
        GradedEndo { dims: dims.clone(), degree: 0, mat: DMatrix::identity(n, n) }
    }

    /// Builds from blocks keyed by source degree `k`, each of shape `n_{k+e} × n_k`.
    pub fn from_blocks(
        dims: &Arc<GradedDims>,
        degree: i32,
        blocks: impl IntoIterator<Item = (i32, DMatrix<f64>)>,
    ) -> Result<GradedEndo> {
        let mut out = Self::zero(dims, degree);
        for (k, b) in blocks {
            let rows = dims.dim(k + degree);
            let cols = dims.dim(k);
            if b.nrows() != rows || b.ncols() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "block from degree {k} must be {rows}x{cols}, got {}x{}",
                    b.nrows(),
                    b.ncols()
                )));
            }
            if rows == 0 || cols == 0 {
                continue;
            }
            let r0 = dims.offset(k + degree).unwrap_or(0);
            let c0 = dims.offset(k).unwrap_or(0);
            out.mat.view_mut((r0, c0), (rows, cols)).copy_from(&b);
        }
        Ok(out)
    }

    /// Wraps a dense matrix, rejecting entries outside the degree pattern.
    pub fn from_matrix(dims: &Arc<GradedDims>, degree: i32, mat: DMatrix<f64>) -> Result<GradedEndo> {
        let n = dims.total();
        if mat.nrows() != n || mat.ncols() != n {
            return Err(Error::DimensionMismatch(format!("expected {n}x{n} matrix")));
        }
        for c in 0..n {
            for r in 0..n {
                if mat[(r, c)] != 0.0 && !dims.allowed(degree, r, c) {
                    return Err(Error::DegreeMismatch(format!(
                        "entry ({r},{c}) is not of degree {degree}"
                    )));
                }
            }
        }
        Ok(GradedEndo { dims: dims.clone(), degree, mat })
    }

    /// Internal constructor for matrices already known to respect the pattern.
    pub(crate) fn from_matrix_unchecked(dims: &Arc<GradedDims>, degree: i32, mat: DMatrix<f64>) -> GradedEndo {
        GradedEndo { dims: dims.clone(), degree, mat }
    }

    pub fn dims(&self) -> &Arc<GradedDims> {
        &self.dims
    }

    pub fn degree(&self) -> i32 {
        self.degree
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    /// The block `V^k → V^{k+e}`.
    pub fn block(&self, k: i32) -> DMatrix<f64> {
        let rows = self.dims.dim(k + self.degree);
        let cols = self.dims.dim(k);
        if rows == 0 || cols == 0 {
            return DMatrix::zeros(rows, cols);
        }
        let r0 = self.dims.offset(k + self.degree).unwrap_or(0);
        let c0 = self.dims.offset(k).unwrap_or(0);
        self.mat.view((r0, c0), (rows, cols)).into_owned()
    }

    /// Blockwise composition `self ∘ other`; no sign is introduced.
    pub fn compose(&self, other: &GradedEndo) -> Result<GradedEndo> {
        same_dims(&self.dims, &other.dims)?;
        Ok(GradedEndo {
            dims: self.dims.clone(),
            degree: self.degree + other.degree,
            mat: &self.mat * &other.mat,
        })
    }

    /// `ab − (−1)^{|a||b|} ba`.
    pub fn super_commutator(&self, other: &GradedEndo) -> Result<GradedEndo> {
        let ab = self.compose(other)?;
        let ba = other.compose(self)?;
        let sign = if (self.degree * other.degree).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        Ok(GradedEndo { mat: ab.mat - ba.mat * sign, ..ab })
    }

    fn check_same(&self, other: &GradedEndo) -> Result<()> {
        same_dims(&self.dims, &other.dims)?;
        if self.degree != other.degree {
            return Err(Error::DegreeMismatch(format!(
                "cannot add degree {} and degree {}",
                self.degree, other.degree
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &GradedEndo) -> Result<GradedEndo> {
        self.check_same(other)?;
        Ok(GradedEndo { mat: &self.mat + &other.mat, ..self.clone() })
    }

    pub fn sub(&self, other: &GradedEndo) -> Result<GradedEndo> {
        self.check_same(other)?;
        Ok(GradedEndo { mat: &self.mat - &other.mat, ..self.clone() })
    }

    pub(crate) fn axpy(&mut self, a: f64, other: &GradedEndo) {
        debug_assert_eq!(self.degree, other.degree);
        self.mat += &other.mat * a;
    }

    pub fn scale(&self, a: f64) -> GradedEndo {
        GradedEndo { mat: &self.mat * a, ..self.clone() }
    }

    /// Frobenius norm of the whole endomorphism.
    pub fn op_norm(&self) -> f64 {
        self.mat.norm()
    }

    pub fn is_zero(&self) -> bool {
        self.mat.iter().all(|v| *v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_term() -> Arc<GradedDims> {
        GradedDims::shared([(0, 1), (1, 1)]).unwrap()
    }

    fn delta(d: &Arc<GradedDims>) -> GradedEndo {
        GradedEndo::from_blocks(d, 1, [(0, DMatrix::from_element(1, 1, 1.0))]).unwrap()
    }

    #[test]
    fn identity_is_neutral() {
        let d = two_term();
        let g = delta(&d);
        assert_eq!(GradedEndo::identity(&d).compose(&g).unwrap(), g);
    }

    #[test]
    fn square_of_delta_vanishes_by_grading() {
        let d = two_term();
        let dd = delta(&d).compose(&delta(&d)).unwrap();
        assert!(dd.is_zero());
        assert_eq!(dd.degree(), 2);
    }

    #[test]
    fn diagonal_times_delta() {
        let d = two_term();
        let h = GradedEndo::from_blocks(
            &d,
            0,
            [(0, DMatrix::from_element(1, 1, 2.0)), (1, DMatrix::from_element(1, 1, 3.0))],
        )
        .unwrap();
        let out = h.compose(&delta(&d)).unwrap();
        assert_eq!(out.block(0)[(0, 0)], 3.0);
        assert_eq!(out.degree(), 1);
    }

    #[test]
    fn commutator_examples() {
        let d = two_term();
        let a = delta(&d);
        let aa = a.super_commutator(&a).unwrap();
        assert_eq!(aa, a.compose(&a).unwrap().scale(2.0));
        let id = GradedEndo::identity(&d);
        assert!(id.super_commutator(&a).unwrap().is_zero());
        let h = GradedEndo::from_blocks(
            &d,
            0,
            [(0, DMatrix::from_element(1, 1, 5.0)), (1, DMatrix::from_element(1, 1, 7.0))],
        )
        .unwrap();
        // block V^0 -> V^1 is delta*h0 - h1*delta
        let c = a.super_commutator(&h).unwrap();
        assert_eq!(c.block(0)[(0, 0)], 5.0 - 7.0);
    }

    #[test]
    fn norms() {
        let d = two_term();
        assert_eq!(GradedEndo::zero(&d, 0).op_norm(), 0.0);
        assert!((GradedEndo::identity(&d).op_norm() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(delta(&d).op_norm(), 1.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let d = two_term();
        assert!(GradedEndo::from_blocks(&d, 1, [(0, DMatrix::zeros(2, 1))]).is_err());
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = 1.0;
        assert!(GradedEndo::from_matrix(&d, 1, m).is_err());
        let other = GradedDims::shared([(0, 2)]).unwrap();
        assert!(GradedEndo::identity(&other).compose(&delta(&d)).is_err());
    }

    fn random_endo(d: &Arc<GradedDims>, e: i32, vals: &[i8]) -> GradedEndo {
        let n = d.total();
        let mut m = DMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                if d.allowed(e, r, c) {
                    m[(r, c)] = f64::from(vals[(r * n + c) % vals.len()]);
                }
            }
        }
        GradedEndo::from_matrix(d, e, m).unwrap()
    }

    proptest! {
        #[test]
        fn compose_is_associative(
            ea in -2i32..=2, eb in -2i32..=2, ec in -2i32..=2,
            va in prop::collection::vec(-5i8..=5, 36),
            vb in prop::collection::vec(-5i8..=5, 36),
            vc in prop::collection::vec(-5i8..=5, 36),
        ) {
            let d = GradedDims::shared([(-1, 1), (0, 2), (1, 2), (2, 1)]).unwrap();
            let (a, b, c) = (random_endo(&d, ea, &va), random_endo(&d, eb, &vb), random_endo(&d, ec, &vc));
            let left = a.compose(&b).unwrap().compose(&c).unwrap();
            let right = a.compose(&b.compose(&c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn commutator_graded_antisymmetry(
            ea in -2i32..=2, eb in -2i32..=2,
            va in prop::collection::vec(-5i8..=5, 36),
            vb in prop::collection::vec(-5i8..=5, 36),
        ) {
            let d = GradedDims::shared([(-1, 1), (0, 2), (1, 2), (2, 1)]).unwrap();
            let (a, b) = (random_endo(&d, ea, &va), random_endo(&d, eb, &vb));
            let ab = a.super_commutator(&b).unwrap();
            let ba = b.super_commutator(&a).unwrap();
            let sign = if (ea * eb) % 2 == 0 { -1.0 } else { 1.0 };
            prop_assert_eq!(ab, ba.scale(sign));
        }
    }
}
