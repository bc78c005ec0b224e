//! Normalized (probabilists') Hermite polynomials `h_k = He_k / sqrt(k!)`,
//! multivariate products `H_α(x) = Π_i h_{α_i}(x_i)`, and the algebra the
//! learner needs on expansions in that basis: evaluation, gradients and the
//! Gaussian second-moment matrix of the gradient.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MimError, Result};

/// Default cap on the number of multi-indices in an enumerated basis.
pub const DEFAULT_BASIS_CAP: usize = 200_000;

/// `h_k(t)`, via the normalized form of `He_{k+1} = t He_k - k He_{k-1}`.
pub fn hermite_univariate(k: usize, t: f64) -> f64 {
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = t;
    for j in 1..k {
        let next = (t * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// Writes `h_0(t), ..., h_m(t)` into `out[..=m]`.
pub fn hermite_table(t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() == 1 {
        return;
    }
    out[1] = t;
    for j in 1..out.len() - 1 {
        out[j + 1] = (t * out[j] - (j as f64).sqrt() * out[j - 1]) / ((j + 1) as f64).sqrt();
    }
}

/// Nodes and weights of the `n`-point Gauss-Hermite rule for the standard
/// normal measure (weights sum to 1), by Golub-Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Exponent vector `α`. Ordered graded-lexicographically: by total degree,
/// then by larger leading exponents first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u16>);

impl MultiIndex {
    pub fn new(exponents: Vec<u16>) -> Self {
        MultiIndex(exponents)
    }

    pub fn zero(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    pub fn unit(dim: usize, axis: usize, power: u16) -> Self {
        let mut v = vec![0; dim];
        v[axis] = power;
        MultiIndex(v)
    }

    pub fn exponents(&self) -> &[u16] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn total_degree(&self) -> usize {
        self.0.iter().map(|&a| a as usize).sum()
    }

    fn lowered(&self, axis: usize) -> Option<MultiIndex> {
        (self.0[axis] > 0).then(|| {
            let mut v = self.0.clone();
            v[axis] -= 1;
            MultiIndex(v)
        })
    }
}

impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.total_degree()
            .cmp(&other.total_degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// `C(n + m, m)` saturating in `u128`.
pub fn basis_count(dim: usize, max_degree: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..=max_degree as u128 {
        c = c.saturating_mul(dim as u128 + i) / i;
    }
    c
}

/// All multi-indices over `dim` coordinates with total degree `<= max_degree`,
/// in graded-lexicographic order.
pub fn enumerate_multi_indices(dim: usize, max_degree: usize, cap: usize) -> Result<Vec<MultiIndex>> {
    let count = basis_count(dim, max_degree);
    if count > cap as u128 {
        return Err(MimError::Resource { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut buf = vec![0u16; dim];
    for degree in 0..=max_degree {
        compositions(&mut buf, 0, degree, &mut out);
    }
    Ok(out)
}

fn compositions(buf: &mut [u16], pos: usize, remaining: usize, out: &mut Vec<MultiIndex>) {
    if pos + 1 >= buf.len() {
        if let Some(last) = buf.last_mut() {
            *last = remaining as u16;
            out.push(MultiIndex(buf.to_vec()));
        } else if remaining == 0 {
            out.push(MultiIndex(Vec::new()));
        }
        return;
    }
    for a in (0..=remaining).rev() {
        buf[pos] = a as u16;
        compositions(buf, pos + 1, remaining - a, out);
    }
    buf[pos] = 0;
}

/// A fixed enumerated basis with a compact sparse form of each index, for
/// evaluating every `H_α` at many points.
#[derive(Debug, Clone)]
pub struct HermiteBasis {
    dim: usize,
    max_degree: usize,
    indices: Vec<MultiIndex>,
    sparse: Vec<Vec<(usize, usize)>>,
}

impl HermiteBasis {
    pub fn new(dim: usize, max_degree: usize, cap: usize) -> Result<Self> {
        let indices = enumerate_multi_indices(dim, max_degree, cap)?;
        let sparse = indices
            .iter()
            .map(|a| {
                a.0.iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(i, &e)| (i, e as usize))
                    .collect()
            })
            .collect();
        Ok(HermiteBasis {
            dim,
            max_degree,
            indices,
            sparse,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    /// Evaluates every basis polynomial at `z`. `table` is scratch space of
    /// length `dim * (max_degree + 1)`.
    pub fn eval_all(&self, z: &[f64], table: &mut [f64], out: &mut [f64]) {
        let stride = self.max_degree + 1;
        for (i, &zi) in z.iter().enumerate() {
            hermite_table(zi, &mut table[i * stride..(i + 1) * stride]);
        }
        for (o, s) in out.iter_mut().zip(&self.sparse) {
            *o = s.iter().map(|&(i, e)| table[i * stride + e]).product();
        }
    }

    pub fn table_len(&self) -> usize {
        self.dim * (self.max_degree + 1)
    }

    /// Builds an expansion from coefficients listed in basis order.
    pub fn expansion(&self, coeffs: &[f64]) -> HermiteExpansion {
        let mut p = HermiteExpansion::new(self.dim, self.max_degree);
        for (a, &c) in self.indices.iter().zip(coeffs) {
            if c != 0.0 {
                p.coeffs.insert(a.clone(), c);
            }
        }
        p
    }
}

/// Sparse `Σ_α c_α H_α` over `ambient_dim` coordinates with degree `<= max_degree`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExpansionRepr", into = "ExpansionRepr")]
pub struct HermiteExpansion {
    ambient_dim: usize,
    max_degree: usize,
    coeffs: BTreeMap<MultiIndex, f64>,
}

#[derive(Serialize, Deserialize)]
struct ExpansionRepr {
    ambient_dim: usize,
    max_degree: usize,
    terms: Vec<(MultiIndex, f64)>,
}

impl From<HermiteExpansion> for ExpansionRepr {
    fn from(p: HermiteExpansion) -> Self {
        ExpansionRepr {
            ambient_dim: p.ambient_dim,
            max_degree: p.max_degree,
            terms: p.coeffs.into_iter().collect(),
        }
    }
}

impl TryFrom<ExpansionRepr> for HermiteExpansion {
    type Error = MimError;

    fn try_from(r: ExpansionRepr) -> Result<Self> {
        let mut p = HermiteExpansion::new(r.ambient_dim, r.max_degree);
        for (a, c) in r.terms {
            p.set(a, c)?;
        }
        Ok(p)
    }
}

impl HermiteExpansion {
    pub fn new(ambient_dim: usize, max_degree: usize) -> Self {
        HermiteExpansion {
            ambient_dim,
            max_degree,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn constant(ambient_dim: usize, value: f64) -> Self {
        let mut p = Self::new(ambient_dim, 0);
        p.coeffs.insert(MultiIndex::zero(ambient_dim), value);
        p
    }

    /// Builds from `(exponents, coefficient)` pairs; the max degree is the
    /// largest degree present.
    pub fn from_terms(ambient_dim: usize, terms: &[(Vec<u16>, f64)]) -> Result<Self> {
        let max_degree = terms
            .iter()
            .map(|(a, _)| a.iter().map(|&e| e as usize).sum::<usize>())
            .max()
            .unwrap_or(0);
        let mut p = Self::new(ambient_dim, max_degree);
        for (a, c) in terms {
            p.set(MultiIndex(a.clone()), *c)?;
        }
        Ok(p)
    }

    /// Sets a coefficient; a zero removes the term.
    pub fn set(&mut self, index: MultiIndex, value: f64) -> Result<()> {
        check_dim(self.ambient_dim, index.dim())?;
        if index.total_degree() > self.max_degree {
            return Err(MimError::Config(format!(
                "multi-index of degree {} exceeds max degree {}",
                index.total_degree(),
                self.max_degree
            )));
        }
        if value == 0.0 {
            self.coeffs.remove(&index);
        } else {
            self.coeffs.insert(index, value);
        }
        Ok(())
    }

    pub fn get(&self, index: &MultiIndex) -> f64 {
        self.coeffs.get(index).copied().unwrap_or(0.0)
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> {
        self.coeffs.iter().map(|(a, &c)| (a, c))
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Gaussian L2 norm squared, `Σ c_α²` by orthonormality.
    pub fn norm_sq(&self) -> f64 {
        self.coeffs.values().map(|c| c * c).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for c in self.coeffs.values_mut() {
            *c *= factor;
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.ambient_dim, x.len())?;
        let stride = self.max_degree + 1;
        let mut table = vec![0.0; x.len() * stride];
        for (i, &xi) in x.iter().enumerate() {
            hermite_table(xi, &mut table[i * stride..(i + 1) * stride]);
        }
        Ok(self
            .coeffs
            .iter()
            .map(|(a, c)| {
                c * a
                    .0
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| table[i * stride + e as usize])
                    .product::<f64>()
            })
            .sum())
    }

    /// Component `i` is `∂_i p`, using `h_k' = sqrt(k) h_{k-1}`.
    pub fn gradient(&self) -> Vec<HermiteExpansion> {
        let deg = self.max_degree.saturating_sub(1);
        (0..self.ambient_dim)
            .map(|i| {
                let mut g = HermiteExpansion::new(self.ambient_dim, deg);
                for (a, &c) in &self.coeffs {
                    if let Some(b) = a.lowered(i) {
                        g.coeffs.insert(b, c * (a.0[i] as f64).sqrt());
                    }
                }
                g
            })
            .collect()
    }

    /// `E_{x~N}[∇p ∇p^T]` in closed form. Entry `(i, j)` is the Gaussian inner
    /// product of `∂_i p` and `∂_j p`, i.e. the sum over `β` of
    /// `sqrt((β_i+1)(β_j+1)) c_{β+e_i} c_{β+e_j}`.
    pub fn influence_matrix(&self) -> DMatrix<f64> {
        let d = self.ambient_dim;
        let mut grads: HashMap<MultiIndex, Vec<f64>> = HashMap::new();
        let mut order: Vec<MultiIndex> = Vec::new();
        for (a, &c) in &self.coeffs {
            for i in 0..d {
                if let Some(b) = a.lowered(i) {
                    let entry = grads.entry(b.clone()).or_insert_with(|| {
                        order.push(b);
                        vec![0.0; d]
                    });
                    entry[i] += c * (a.0[i] as f64).sqrt();
                }
            }
        }
        let mut m = DMatrix::zeros(d, d);
        order.sort();
        for b in &order {
            let g = &grads[b];
            for i in 0..d {
                if g[i] == 0.0 {
                    continue;
                }
                for j in 0..d {
                    m[(i, j)] += g[i] * g[j];
                }
            }
        }
        m
    }
}

/// Free-function form of [`HermiteExpansion::gradient`].
pub fn gradient_expansion(p: &HermiteExpansion) -> Vec<HermiteExpansion> {
    p.gradient()
}

/// Free-function form of [`HermiteExpansion::influence_matrix`].
pub fn influence_matrix(p: &HermiteExpansion) -> DMatrix<f64> {
    p.influence_matrix()
}

/// Free-function form of [`HermiteExpansion::eval`].
pub fn eval_expansion(p: &HermiteExpansion, x: &[f64]) -> Result<f64> {
    p.eval(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn univariate_examples() {
        assert_eq!(hermite_univariate(0, 3.7), 1.0);
        assert_eq!(hermite_univariate(1, 2.0), 2.0);
        assert!((hermite_univariate(2, 0.0) + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        // He_3(t) = t^3 - 3t, h_3 = He_3 / sqrt(6).
        let t = 1.3;
        assert!((hermite_univariate(3, t) - (t * t * t - 3.0 * t) / 6f64.sqrt()).abs() < 1e-14);
        let mut tab = [0.0; 6];
        hermite_table(t, &mut tab);
        for (k, v) in tab.iter().enumerate() {
            assert_eq!(*v, hermite_univariate(k, t));
        }
    }

    #[test]
    fn enumeration_counts_and_order() {
        let one = enumerate_multi_indices(1, 2, DEFAULT_BASIS_CAP).unwrap();
        let exps: Vec<Vec<u16>> = one.iter().map(|a| a.0.clone()).collect();
        assert_eq!(exps, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(enumerate_multi_indices(2, 2, DEFAULT_BASIS_CAP).unwrap().len(), 6);
        assert_eq!(enumerate_multi_indices(3, 3, DEFAULT_BASIS_CAP).unwrap().len(), 20);
        let two = enumerate_multi_indices(2, 2, DEFAULT_BASIS_CAP).unwrap();
        let exps: Vec<Vec<u16>> = two.iter().map(|a| a.0.clone()).collect();
        assert_eq!(
            exps,
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
        let mut sorted = two.clone();
        sorted.sort();
        assert_eq!(sorted, two);
        match enumerate_multi_indices(100, 4, 1000) {
            Err(MimError::Resource { count, cap }) => {
                assert_eq!(count, 4_598_126);
                assert_eq!(cap, 1000);
            }
            other => panic!("expected resource error, got {other:?}"),
        }
    }

    #[test]
    fn eval_examples() {
        let c = HermiteExpansion::constant(2, 3.0);
        assert_eq!(c.eval(&[0.4, -7.0]).unwrap(), 3.0);
        let x1 = HermiteExpansion::from_terms(2, &[(vec![1, 0], 1.0)]).unwrap();
        assert_eq!(x1.eval(&[0.5, 9.0]).unwrap(), 0.5);
        let h2 = HermiteExpansion::from_terms(2, &[(vec![2, 0], 1.0)]).unwrap();
        assert!(h2.eval(&[1.0, 0.0]).unwrap().abs() < 1e-15);
        assert!(h2.eval(&[1.0]).is_err());
    }

    #[test]
    fn gradient_examples() {
        let p = HermiteExpansion::from_terms(1, &[(vec![1], 1.0)]).unwrap();
        let g = p.gradient();
        assert_eq!(g[0].get(&MultiIndex::zero(1)), 1.0);

        let p = HermiteExpansion::from_terms(1, &[(vec![2], 1.0)]).unwrap();
        let g = p.gradient();
        assert_eq!(g[0].len(), 1);
        assert!((g[0].get(&MultiIndex::new(vec![1])) - 2f64.sqrt()).abs() < 1e-15);

        let g = HermiteExpansion::constant(3, 2.0).gradient();
        assert!(g.iter().all(|gi| gi.is_empty()));
    }

    #[test]
    fn influence_examples() {
        let p = HermiteExpansion::from_terms(2, &[(vec![2, 0], 1.0)]).unwrap();
        let m = p.influence_matrix();
        assert!((m[(0, 0)] - 2.0).abs() < 1e-15);
        assert_eq!(m[(1, 1)], 0.0);
        assert_eq!(m[(0, 1)], 0.0);

        assert_eq!(HermiteExpansion::constant(3, 1.0).influence_matrix(), DMatrix::zeros(3, 3));

        let (a, b) = (0.7, -1.9);
        let p = HermiteExpansion::from_terms(2, &[(vec![1, 0], a), (vec![0, 1], b)]).unwrap();
        let m = p.influence_matrix();
        let expect = DMatrix::from_row_slice(2, 2, &[a * a, a * b, a * b, b * b]);
        assert!((m - expect).abs().max() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = HermiteBasis::new(3, 4, DEFAULT_BASIS_CAP).unwrap();
        let coeffs: Vec<f64> = (0..basis.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p = basis.expansion(&coeffs);
        let grad = p.gradient();
        let h = 1e-5;
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            for i in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (p.eval(&xp).unwrap() - p.eval(&xm).unwrap()) / (2.0 * h);
                assert!((fd - grad[i].eval(&x).unwrap()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn influence_diagonal_identity_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let basis = HermiteBasis::new(4, 3, DEFAULT_BASIS_CAP).unwrap();
        let coeffs: Vec<f64> = (0..basis.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p = basis.expansion(&coeffs);
        let m = p.influence_matrix();
        let mut trace_expect = 0.0;
        for i in 0..4 {
            let diag: f64 = p.terms().map(|(a, c)| a.exponents()[i] as f64 * c * c).sum();
            assert!((m[(i, i)] - diag).abs() < 1e-12 * diag.max(1.0));
            trace_expect += diag;
        }
        let total: f64 = p.terms().map(|(a, c)| a.total_degree() as f64 * c * c).sum();
        assert!((trace_expect - total).abs() < 1e-12 * total);
        assert!((&m - m.transpose()).abs().max() < 1e-12);
        let eig = SymmetricEigen::new(m);
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-10));
    }

    #[test]
    fn quadrature_orthonormality() {
        let (nodes, weights) = gauss_hermite(40);
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..=10 {
            for j in 0..=10 {
                let ip: f64 = nodes
                    .iter()
                    .zip(&weights)
                    .map(|(&t, &w)| w * hermite_univariate(i, t) * hermite_univariate(j, t))
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((ip - target).abs() < 1e-10, "<h{i},h{j}> = {ip}");
            }
        }
    }

    #[test]
    fn serde_round_trip() {
        let p = HermiteExpansion::from_terms(2, &[(vec![1, 1], 0.25), (vec![0, 2], -1.5)]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: HermiteExpansion = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
