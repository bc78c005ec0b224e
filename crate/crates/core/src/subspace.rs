//! Subspaces of `R^d` held as orthonormal bases, plus the recovery metrics
//! (potential and principal angles) used to score a learned subspace against
//! the hidden one.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MimError, Result};

/// Tolerance of the unit-norm and orthogonality invariants.
pub const ORTHO_TOL: f64 = 1e-10;

/// Residual norm below which Gram-Schmidt treats a vector as already spanned.
pub const DEFAULT_DROP_TOL: f64 = 1e-8;

/// An orthonormal basis of a `k`-dimensional subspace of `R^d`, stored as the
/// columns of a `d x k` matrix. `k = 0` is the zero subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SubspaceRepr", into = "SubspaceRepr")]
pub struct Subspace {
    basis: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct SubspaceRepr {
    ambient_dim: usize,
    basis: Vec<Vec<f64>>,
}

impl From<Subspace> for SubspaceRepr {
    fn from(s: Subspace) -> Self {
        SubspaceRepr {
            ambient_dim: s.ambient_dim(),
            basis: (0..s.dim()).map(|j| s.vector(j)).collect(),
        }
    }
}

impl TryFrom<SubspaceRepr> for Subspace {
    type Error = MimError;

    fn try_from(r: SubspaceRepr) -> Result<Self> {
        for v in &r.basis {
            check_dim(r.ambient_dim, v.len())?;
        }
        let basis = DMatrix::from_fn(r.ambient_dim, r.basis.len(), |i, j| r.basis[j][i]);
        Subspace::from_orthonormal(basis)
    }
}

impl Subspace {
    /// The zero subspace of `R^d`.
    pub fn trivial(ambient_dim: usize) -> Self {
        Subspace {
            basis: DMatrix::zeros(ambient_dim, 0),
        }
    }

    /// Wraps columns that are already orthonormal, checking the invariants.
    pub fn from_orthonormal(basis: DMatrix<f64>) -> Result<Self> {
        let k = basis.ncols();
        if k > basis.nrows() {
            return Err(MimError::Config(format!(
                "{k} basis vectors cannot be independent in dimension {}",
                basis.nrows()
            )));
        }
        let gram = basis.transpose() * &basis;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - target).abs() > ORTHO_TOL {
                    return Err(MimError::Config(format!(
                        "basis is not orthonormal: gram[{i},{j}] = {}",
                        gram[(i, j)]
                    )));
                }
            }
        }
        Ok(Subspace { basis })
    }

    /// Orthonormal basis of the span of arbitrary vectors.
    pub fn span_of(ambient_dim: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let list = DirectionList::new_unnormalized(ambient_dim, vectors)?;
        Ok(orthonormalize(&list, &Subspace::trivial(ambient_dim), DEFAULT_DROP_TOL))
    }

    /// Coordinate axes `e_{i}` for each listed index.
    pub fn coordinate(ambient_dim: usize, axes: &[usize]) -> Result<Self> {
        let vectors: Vec<Vec<f64>> = axes
            .iter()
            .map(|&a| {
                let mut v = vec![0.0; ambient_dim];
                v[a] = 1.0;
                v
            })
            .collect();
        Self::span_of(ambient_dim, &vectors)
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.basis.column(j).iter().copied().collect()
    }

    /// Coordinates `V^T x` of `x` in this basis.
    pub fn coords(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.ambient_dim(), x.len())?;
        Ok((0..self.dim())
            .map(|j| self.basis.column(j).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Orthogonal projection `V V^T x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.coords(x)?;
        let mut out = vec![0.0; self.ambient_dim()];
        for (j, cj) in c.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.basis.column(j).iter()) {
                *o += cj * b;
            }
        }
        Ok(out)
    }

    /// Projection onto the orthogonal complement, `x - V V^T x`.
    pub fn project_complement(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.project(x)?;
        Ok(x.iter().zip(&p).map(|(a, b)| a - b).collect())
    }

    /// Projection matrix `V V^T`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// An orthonormal frame of `V^⊥` (a `d x (d - k)` matrix). Deterministic in
    /// the basis of `V`; the zero subspace yields the identity.
    pub fn complement_frame(&self) -> DMatrix<f64> {
        let d = self.ambient_dim();
        let k = self.dim();
        if k == d {
            return DMatrix::zeros(d, 0);
        }
        if k == 0 {
            return DMatrix::identity(d, d);
        }
        // Householder QR of [V | I]: V has full column rank, so the trailing
        // d - k columns of Q span the complement.
        let mut aug = DMatrix::zeros(d, k + d);
        aug.columns_mut(0, k).copy_from(&self.basis);
        aug.columns_mut(k, d).fill_with_identity();
        let q = aug.qr().q();
        q.columns(k, d - k).into_owned()
    }

    /// The complement `V^⊥` as a subspace.
    pub fn complement(&self) -> Subspace {
        Subspace {
            basis: self.complement_frame(),
        }
    }

    /// True when every basis vector of `self` lies in `other` to within `tol`.
    pub fn is_contained_in(&self, other: &Subspace, tol: f64) -> bool {
        (0..self.dim()).all(|j| {
            let v = self.vector(j);
            other
                .project_complement(&v)
                .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt() <= tol)
                .unwrap_or(false)
        })
    }
}

/// An ordered list of unit vectors, not necessarily orthogonal.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DirectionList {
    pub vectors: Vec<Vec<f64>>,
}

impl DirectionList {
    /// Normalizes each vector; zero vectors are rejected.
    pub fn new_unnormalized(ambient_dim: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let mut out = Vec::with_capacity(vectors.len());
        for v in vectors {
            check_dim(ambient_dim, v.len())?;
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(MimError::Config("cannot normalize a zero vector".into()));
            }
            out.push(v.iter().map(|a| a / n).collect());
        }
        Ok(DirectionList { vectors: out })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Two-pass Gram-Schmidt of `v` against `cols`; `None` if what remains has
/// norm below `tol`.
fn residual(cols: &[DVector<f64>], mut v: DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    for _ in 0..2 {
        for c in cols {
            let proj = c.dot(&v);
            v.axpy(-proj, c, 1.0);
        }
    }
    let n = v.norm();
    if n < tol {
        None
    } else {
        Some(v / n)
    }
}

/// Orthonormal basis of `span(against ∪ list)`. The basis of `against` is kept
/// as the leading columns; list vectors whose residual falls below `tol` add
/// nothing and are dropped.
pub fn orthonormalize(list: &DirectionList, against: &Subspace, tol: f64) -> Subspace {
    let d = against.ambient_dim();
    let mut cols: Vec<DVector<f64>> = (0..against.dim())
        .map(|j| against.basis.column(j).into_owned())
        .collect();
    for v in &list.vectors {
        if cols.len() == d {
            break;
        }
        if let Some(r) = residual(&cols, DVector::from_column_slice(v), tol) {
            cols.push(r);
        }
    }
    let basis = if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    Subspace { basis }
}

/// `Σ_i ‖Π_{V^⊥} w_i‖²` over the basis of `w`: the hidden-subspace mass not yet
/// captured by `v`. Lies in `[0, dim W]`.
pub fn potential(w: &Subspace, v: &Subspace) -> Result<f64> {
    check_dim(w.ambient_dim(), v.ambient_dim())?;
    let mut total = 0.0;
    for j in 0..w.dim() {
        let r = v.project_complement(&w.vector(j))?;
        total += r.iter().map(|a| a * a).sum::<f64>();
    }
    Ok(total)
}

/// Principal angles (radians, nondecreasing) between two subspaces, from the
/// singular values of `A^T B`. When the dimensions differ, the
/// `min(dim A, dim B)` angles of the smaller subspace are returned.
pub fn principal_angles(a: &Subspace, b: &Subspace) -> Result<Vec<f64>> {
    check_dim(a.ambient_dim(), b.ambient_dim())?;
    if a.dim() == 0 || b.dim() == 0 {
        return Err(MimError::Config(
            "principal angles need subspaces of dimension at least 1".into(),
        ));
    }
    let cross = a.basis.transpose() * &b.basis;
    let svd = cross.svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv.into_iter().map(|s| s.clamp(0.0, 1.0).acos()).collect())
}

/// Largest principal angle, in degrees.
pub fn max_angle_degrees(a: &Subspace, b: &Subspace) -> Result<f64> {
    let angles = principal_angles(a, b)?;
    Ok(angles.last().copied().unwrap_or(0.0).to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn project_examples() {
        let v = Subspace::coordinate(3, &[0]).unwrap();
        assert_eq!(v.project(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        let z = Subspace::trivial(3);
        assert_eq!(z.project(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let diag = Subspace::from_orthonormal(DMatrix::from_column_slice(2, 1, &[s, s])).unwrap();
        let p = diag.project(&[1.0, 1.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
        assert!(matches!(
            v.project(&[1.0, 2.0]),
            Err(MimError::DimensionMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn orthonormalize_examples() {
        let dup = DirectionList::new_unnormalized(3, &[e(3, 0), e(3, 0)]).unwrap();
        assert_eq!(orthonormalize(&dup, &Subspace::trivial(3), 1e-8).dim(), 1);

        let two = DirectionList::new_unnormalized(3, &[e(3, 0), e(3, 1)]).unwrap();
        let against = Subspace::coordinate(3, &[0]).unwrap();
        let out = orthonormalize(&two, &against, 1e-8);
        assert_eq!(out.dim(), 2);
        assert_eq!(out.vector(0), e(3, 0));

        // The second vector differs from the first by 1e-12 along e1: after
        // normalization its residual is ~1e-12 * 0.8, far below tol.
        let near = DirectionList {
            vectors: vec![vec![0.6, 0.8], vec![0.6 + 1e-12, 0.8]],
        };
        assert_eq!(orthonormalize(&near, &Subspace::trivial(2), 1e-8).dim(), 1);
    }

    #[test]
    fn complement_frame_completes_basis() {
        let v = Subspace::span_of(4, &[vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0, 1.0]]).unwrap();
        let f = v.complement_frame();
        assert_eq!(f.ncols(), 2);
        let mut all = v.basis().clone().resize_horizontally(4, 0.0);
        all.columns_mut(2, 2).copy_from(&f);
        let gram = all.transpose() * &all;
        assert!((gram - DMatrix::identity(4, 4)).abs().max() < 1e-12);
    }

    #[test]
    fn potential_examples() {
        let w = Subspace::coordinate(3, &[0, 1]).unwrap();
        assert!(potential(&w, &w).unwrap().abs() < 1e-15);
        assert_eq!(potential(&w, &Subspace::trivial(3)).unwrap(), 2.0);
        let v = Subspace::coordinate(3, &[0]).unwrap();
        assert!((potential(&w, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!(potential(&w, &Subspace::trivial(4)).is_err());
    }

    #[test]
    fn principal_angle_examples() {
        let a = Subspace::coordinate(2, &[0]).unwrap();
        assert!(principal_angles(&a, &a).unwrap()[0].abs() < 1e-7);
        let b = Subspace::coordinate(2, &[1]).unwrap();
        assert!((principal_angles(&a, &b).unwrap()[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let t: f64 = 0.3;
        let c = Subspace::span_of(2, &[vec![t.cos(), t.sin()]]).unwrap();
        assert!((principal_angles(&a, &c).unwrap()[0] - 0.3).abs() < 1e-12);
        assert!(principal_angles(&a, &Subspace::coordinate(3, &[0]).unwrap()).is_err());
        assert!(principal_angles(&a, &Subspace::trivial(2)).is_err());
    }

    fn random_subspace() -> impl Strategy<Value = (Subspace, Vec<f64>)> {
        (2usize..7).prop_flat_map(|d| {
            (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 0..d),
                prop::collection::vec(-3.0f64..3.0, d),
            )
                .prop_filter_map("degenerate", move |(vs, x)| {
                    let vs: Vec<Vec<f64>> = vs
                        .into_iter()
                        .filter(|v| v.iter().map(|a| a * a).sum::<f64>() > 1e-3)
                        .collect();
                    Subspace::span_of(d, &vs).ok().map(|s| (s, x))
                })
        })
    }

    proptest! {
        #[test]
        fn projector_is_symmetric_idempotent((v, x) in random_subspace()) {
            let p = v.projector();
            prop_assert!((&p * &p - &p).abs().max() < 1e-8);
            prop_assert!((&p - p.transpose()).abs().max() < 1e-8);
            let xv = v.project(&x).unwrap();
            let xp = v.project_complement(&x).unwrap();
            let dot: f64 = xv.iter().zip(&xp).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() < 1e-8);
            for i in 0..x.len() {
                prop_assert!((xv[i] + xp[i] - x[i]).abs() < 1e-12);
            }
            let again = v.project(&xv).unwrap();
            for i in 0..x.len() {
                prop_assert!((again[i] - xv[i]).abs() < 1e-8);
            }
        }

        #[test]
        fn orthonormalize_keeps_invariants((v, x) in random_subspace()) {
            let list = DirectionList::new_unnormalized(x.len(), &[x.clone()]);
            if let Ok(list) = list {
                let grown = orthonormalize(&list, &v, DEFAULT_DROP_TOL);
                prop_assert!(Subspace::from_orthonormal(grown.basis().clone()).is_ok());
                // Potential shrinks when V grows.
                let w = Subspace::span_of(x.len(), &[x.iter().map(|a| a + 0.5).collect()]).unwrap();
                prop_assert!(potential(&w, &grown).unwrap() <= potential(&w, &v).unwrap() + 1e-10);
            }
        }
    }
}
