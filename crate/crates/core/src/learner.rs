//! Iterative subspace recovery: estimate relevant directions orthogonal to the
//! current subspace, grow it, and finally fit a piecewise-constant hypothesis
//! on the recovered subspace.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretization::{CubePartition, IntervalId, IntervalPartition};
use crate::error::{check_dim, MimError, Result};
use crate::hermite::{basis_count, HermiteBasis, HermiteExpansion, MultiIndex, DEFAULT_BASIS_CAP};
use crate::subspace::{orthonormalize, potential, DirectionList, Subspace, DEFAULT_DROP_TOL};
use crate::synthetic::{LabeledDataset, MimInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerMode {
    /// Regression-based directions; every returned direction is added.
    Agnostic,
    /// Regression-based directions; only the top one is added per round.
    MimDistribution,
    /// Filtered-covariance directions (degree two only); all are added.
    FastM2,
}

/// What a hypothesis predicts in a cube with too few fit samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFallback {
    /// Empty cubes predict 0.
    Zero,
    /// Sparse cubes borrow the value of the smallest enclosing aligned block
    /// of `2^l` cubes per axis that holds enough samples.
    Coarsen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Regression degree.
    pub m: usize,
    /// Cube width of the direction-finding partition.
    pub eps1: f64,
    /// Label interval width.
    pub eps2: f64,
    /// Label bound `B`; `None` means `1/ε₂²`.
    pub label_bound: Option<f64>,
    pub offset: f64,
    /// Absolute eigenvalue floor; `None` derives one from the noise level.
    pub lambda_floor: Option<f64>,
    /// Relative threshold as a fraction of the top eigenvalue.
    pub lambda_rel: f64,
    /// Multiplier on the estimated top null eigenvalue for the automatic floor.
    pub null_factor: f64,
    /// `T`, the number of outer iterations.
    pub max_iters: usize,
    /// Nominal regression slack; recorded, not used by the projection estimator.
    pub eta: f64,
    /// Minimum samples per cube (raised to the basis size when regressing).
    pub min_cell: usize,
    /// Minimum samples per (cube, interval) pair in the covariance path;
    /// `None` means `5 d'`.
    pub min_pair_samples: Option<usize>,
    pub mode: LearnerMode,
    pub mom_blocks: usize,
    pub seed: u64,
    /// Samples per iteration; `None` splits the data into `T + 1` equal parts.
    pub batch_size: Option<usize>,
    /// Stop growing at this dimension; `None` means `d`.
    pub max_dim: Option<usize>,
    /// Cube width of the final hypothesis; `None` means `ε₁`.
    pub fit_width: Option<f64>,
    pub fit_fallback: CellFallback,
    /// Samples a cube or block needs before its own estimate is used.
    pub min_fit_count: usize,
    /// Restrict degree `m >= 2` regression to this many covariance directions.
    pub sketch_dim: Option<usize>,
    pub basis_cap: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            m: 2,
            eps1: 0.1,
            eps2: 0.1,
            label_bound: None,
            offset: 0.0,
            lambda_floor: None,
            lambda_rel: 0.1,
            null_factor: DEFAULT_NULL_FACTOR,
            max_iters: 11,
            eta: 0.0,
            min_cell: 20,
            min_pair_samples: None,
            mode: LearnerMode::Agnostic,
            mom_blocks: 5,
            seed: 0,
            batch_size: None,
            max_dim: None,
            fit_width: None,
            fit_fallback: CellFallback::Coarsen,
            min_fit_count: 20,
            sketch_dim: None,
            basis_cap: DEFAULT_BASIS_CAP,
        }
    }
}

pub const DEFAULT_NULL_FACTOR: f64 = 2.0;

impl LearnerConfig {
    /// Defaults with `T` set for a `K`-dimensional target: `3K + 5`, or
    /// `K + 1` when one direction is added per round.
    pub fn for_hidden_dim(k: usize, mode: LearnerMode) -> Self {
        let max_iters = match mode {
            LearnerMode::MimDistribution => k + 1,
            _ => 3 * k + 5,
        };
        LearnerConfig {
            mode,
            max_iters,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MimError::Config(msg));
        if self.m == 0 {
            return bad("regression degree m must be at least 1".into());
        }
        if !(self.eps1 > 0.0 && self.eps1 < 1.0) {
            return bad(format!("eps1 must lie in (0, 1), got {}", self.eps1));
        }
        if !(self.eps2 > 0.0) {
            return bad(format!("eps2 must be positive, got {}", self.eps2));
        }
        if let Some(l) = self.lambda_floor {
            if !(l > 0.0) {
                return bad(format!("lambda floor must be positive, got {l}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_rel) {
            return bad(format!("lambda_rel must lie in [0, 1], got {}", self.lambda_rel));
        }
        if !(self.null_factor > 0.0) {
            return bad(format!("null_factor must be positive, got {}", self.null_factor));
        }
        if self.max_iters == 0 {
            return bad("T must be at least 1".into());
        }
        if self.mom_blocks == 0 {
            return bad("mom_blocks must be at least 1".into());
        }
        if self.min_fit_count == 0 {
            return bad("min_fit_count must be at least 1".into());
        }
        if let Some(w) = self.fit_width {
            if !(w > 0.0 && w < 1.0) {
                return bad(format!("fit width must lie in (0, 1), got {w}"));
            }
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be positive".into());
        }
        if self.sketch_dim == Some(0) {
            return bad("sketch dimension must be positive".into());
        }
        Ok(())
    }

    pub fn fit_width(&self) -> f64 {
        self.fit_width.unwrap_or(self.eps1)
    }

    fn interval_partition(&self) -> Result<IntervalPartition> {
        match self.label_bound {
            Some(b) => IntervalPartition::new(self.eps2, b),
            None => IntervalPartition::with_default_bound(self.eps2),
        }
    }
}

/// Empirical Hermite coefficients `mean(values · H_α(z))` for all `|α| <= m`.
/// `z` holds `n` rows of `dim` coordinates.
pub fn project_onto_basis(z: &[f64], dim: usize, values: &[f64], m: usize, cap: usize) -> Result<HermiteExpansion> {
    check_dim(z.len(), dim * values.len())?;
    if values.is_empty() {
        return Err(MimError::Config("cannot regress on zero samples".into()));
    }
    let basis = HermiteBasis::new(dim, m, cap)?;
    let sums = basis_sums(&basis, z, dim, values.iter().copied());
    let n = values.len() as f64;
    Ok(basis.expansion(&sums.into_iter().map(|s| s / n).collect::<Vec<_>>()))
}

fn basis_sums(basis: &HermiteBasis, z: &[f64], dim: usize, values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut table = vec![0.0; basis.table_len()];
    let mut h = vec![0.0; basis.len()];
    let mut acc = vec![0.0; basis.len()];
    for (row, v) in z.chunks(dim.max(1)).zip(values) {
        if v == 0.0 {
            continue;
        }
        basis.eval_all(row, &mut table, &mut h);
        for (a, hv) in acc.iter_mut().zip(&h) {
            *a += v * hv;
        }
    }
    acc
}

/// Degree-`m` projection estimate of `x ↦ Pr[y ∈ I | x]` from the samples of
/// one cube, in the coordinates `z` of a frame of `V^⊥`.
pub fn regress_cell(
    z: &[f64],
    dim: usize,
    ys: &[f64],
    intervals: &IntervalPartition,
    interval: IntervalId,
    m: usize,
) -> Result<HermiteExpansion> {
    let ind: Vec<f64> = ys
        .iter()
        .map(|&y| if intervals.locate(y) == interval { 1.0 } else { 0.0 })
        .collect();
    project_onto_basis(z, dim, &ind, m, DEFAULT_BASIS_CAP)
}

/// Output of one direction-finding call, with the spectral summary the trace
/// keeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    /// Unit vectors in `R^d`, orthogonal to `V`, by descending eigenvalue.
    pub directions: DirectionList,
    /// Spectrum of `Û` in descending order.
    pub eigenvalues: Vec<f64>,
    pub threshold: f64,
    /// Expected top eigenvalue of `Û` when labels carry no further signal.
    pub null_level: f64,
    pub frobenius: f64,
    pub trace: f64,
    /// `v^T Û v` for each returned direction.
    pub rayleigh: Vec<f64>,
    pub cells_used: usize,
    pub cells_skipped: usize,
    pub pairs_used: usize,
    /// Largest trace of a single (cube, interval) influence matrix.
    pub max_pair_trace: f64,
    pub working_dim: usize,
    /// `Û` lifted to `R^d`.
    #[serde(skip)]
    pub matrix: Option<DMatrix<f64>>,
}

impl DirectionReport {
    fn empty(working_dim: usize) -> Self {
        DirectionReport {
            directions: DirectionList::default(),
            eigenvalues: Vec::new(),
            threshold: 0.0,
            null_level: 0.0,
            frobenius: 0.0,
            trace: 0.0,
            rayleigh: Vec::new(),
            cells_used: 0,
            cells_skipped: 0,
            pairs_used: 0,
            max_pair_trace: 0.0,
            working_dim,
            matrix: None,
        }
    }

    /// The eigen-filter cap `4 ‖Û‖_F / λ²`.
    pub fn count_bound(&self) -> f64 {
        if self.threshold > 0.0 {
            4.0 * self.frobenius / (self.threshold * self.threshold)
        } else {
            f64::INFINITY
        }
    }
}

struct Prepared {
    frame: DMatrix<f64>,
    z: Vec<f64>,
    ys: Vec<f64>,
    cells: Vec<(Vec<u32>, Vec<usize>)>,
    n: usize,
}

impl Prepared {
    fn dprime(&self) -> usize {
        self.frame.ncols()
    }

    fn row(&self, i: usize) -> &[f64] {
        let k = self.dprime();
        &self.z[i * k..(i + 1) * k]
    }
}

fn prepare(v: &Subspace, data: &LabeledDataset, config: &LearnerConfig, frame: DMatrix<f64>) -> Result<Prepared> {
    let cubes = CubePartition::new(v.clone(), config.eps1, config.offset)?;
    let vc = data.project_rows(v.basis())?;
    let k = v.dim();
    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        let c = if k == 0 { &[][..] } else { &vc[i * k..(i + 1) * k] };
        if let Some(cube) = cubes.locate_coords(c) {
            groups.entry(cube).or_default().push(i);
        }
    }
    let z = data.project_rows(&frame)?;
    Ok(Prepared {
        frame,
        z,
        ys: data.ys.clone(),
        cells: groups.into_iter().collect(),
        n: data.len(),
    })
}

/// Row offsets and weights mapping coefficients of `H_α` to the Hermite
/// coefficients of `∂_i p`.
struct GradientPlan {
    rows: usize,
    entries: Vec<Vec<(usize, usize, f64)>>,
}

impl GradientPlan {
    fn new(basis: &HermiteBasis) -> Self {
        let position: BTreeMap<&MultiIndex, usize> = basis.indices().iter().enumerate().map(|(i, a)| (a, i)).collect();
        let rows = basis
            .indices()
            .iter()
            .filter(|a| a.total_degree() < basis.max_degree())
            .count();
        let entries = basis
            .indices()
            .iter()
            .map(|a| {
                let e = a.exponents();
                (0..e.len())
                    .filter(|&i| e[i] > 0)
                    .map(|i| {
                        let mut lower = e.to_vec();
                        lower[i] -= 1;
                        (position[&MultiIndex::new(lower)], i, (e[i] as f64).sqrt())
                    })
                    .collect()
            })
            .collect();
        GradientPlan { rows, entries }
    }

    fn influence(&self, coeffs: &[f64], dim: usize) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.rows, dim);
        for (c, ent) in coeffs.iter().zip(&self.entries) {
            if *c == 0.0 {
                continue;
            }
            for &(row, i, w) in ent {
                g[(row, i)] += c * w;
            }
        }
        g.tr_mul(&g)
    }
}

/// `Σ_{k=1}^m C(d'+m-k, m-k)`: the expected `Û_jj` per cell times `N` under
/// labels independent of `x_{V^⊥}`.
fn regression_null_scale(dprime: usize, m: usize) -> f64 {
    (1..=m).map(|k| basis_count(dprime, m - k) as f64).sum()
}

struct CellContribution {
    matrix: DMatrix<f64>,
    weights: Vec<f64>,
    max_trace: f64,
}

fn sum_contributions(parts: Vec<Option<CellContribution>>, dim: usize) -> (DMatrix<f64>, Vec<f64>, usize, usize, f64) {
    let mut total = DMatrix::zeros(dim, dim);
    let mut weights = Vec::new();
    let (mut used, mut skipped, mut max_trace) = (0, 0, 0.0f64);
    for p in parts {
        match p {
            Some(c) => {
                total += c.matrix;
                weights.extend(c.weights);
                max_trace = max_trace.max(c.max_trace);
                used += 1;
            }
            None => skipped += 1,
        }
    }
    (total, weights, used, skipped, max_trace)
}

fn regression_aggregate(p: &Prepared, config: &LearnerConfig) -> Result<(DMatrix<f64>, f64, usize, usize, f64, usize)> {
    let dim = p.dprime();
    let basis = HermiteBasis::new(dim, config.m, config.basis_cap)?;
    let plan = GradientPlan::new(&basis);
    let intervals = config.interval_partition()?;
    let min_cell = config.min_cell.max(basis.len());
    let n_total = p.n as f64;
    let parts: Vec<Option<CellContribution>> = p
        .cells
        .par_iter()
        .map(|(_, rows)| {
            if rows.len() < min_cell {
                return None;
            }
            let n_s = rows.len() as f64;
            let mut by_interval: BTreeMap<IntervalId, (usize, Vec<f64>)> = BTreeMap::new();
            let mut table = vec![0.0; basis.table_len()];
            let mut h = vec![0.0; basis.len()];
            for &r in rows {
                basis.eval_all(p.row(r), &mut table, &mut h);
                let e = by_interval
                    .entry(intervals.locate(p.ys[r]))
                    .or_insert_with(|| (0, vec![0.0; basis.len()]));
                e.0 += 1;
                for (a, hv) in e.1.iter_mut().zip(&h) {
                    *a += hv;
                }
            }
            let mut matrix = DMatrix::zeros(dim, dim);
            let mut weights = Vec::with_capacity(by_interval.len());
            let mut max_trace = 0.0f64;
            for (count, sums) in by_interval.values() {
                let coeffs: Vec<f64> = sums.iter().map(|s| s / n_s).collect();
                let infl = plan.influence(&coeffs, dim);
                max_trace = max_trace.max(infl.trace());
                matrix += infl;
                weights.push(*count as f64 / n_s);
            }
            matrix *= n_s / n_total;
            Some(CellContribution {
                matrix,
                weights,
                max_trace,
            })
        })
        .collect();
    let (total, weights, used, skipped, max_trace) = sum_contributions(parts, dim);
    let pairs = weights.len();
    let null_mean = used as f64 / n_total * regression_null_scale(dim, config.m);
    let null = null_mean * mp_edge(dim, &weights);
    Ok((total, null, used, skipped, max_trace, pairs))
}

/// `(1 + sqrt(d'/n_eff))²`, the Marchenko-Pastur edge for a weighted sum of
/// rank-one noise terms with effective count `(Σa)²/Σa²`.
fn mp_edge(dim: usize, weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|a| a * a).sum();
    if s2 == 0.0 {
        return 1.0;
    }
    let n_eff = s * s / s2;
    (1.0 + (dim as f64 / n_eff).sqrt()).powi(2)
}

fn covariance_aggregate(p: &Prepared, config: &LearnerConfig) -> Result<(DMatrix<f64>, f64, usize, usize, f64, usize)> {
    let dim = p.dprime();
    let intervals = config.interval_partition()?;
    let min_pair = config.min_pair_samples.unwrap_or(5 * dim).max(1);
    let n_total = p.n as f64;
    let parts: Vec<Option<CellContribution>> = p
        .cells
        .par_iter()
        .map(|(_, rows)| {
            if rows.len() < config.min_cell.max(1) {
                return None;
            }
            let n_s = rows.len() as f64;
            let mut by_interval: BTreeMap<IntervalId, (usize, DMatrix<f64>)> = BTreeMap::new();
            for &r in rows {
                let z = DVector::from_column_slice(p.row(r));
                let e = by_interval
                    .entry(intervals.locate(p.ys[r]))
                    .or_insert_with(|| (0, DMatrix::zeros(dim, dim)));
                e.0 += 1;
                e.1.syger(1.0, &z, &z, 1.0);
            }
            let mut matrix = DMatrix::zeros(dim, dim);
            let mut weights = Vec::new();
            let mut max_trace = 0.0f64;
            for (count, mut s) in by_interval.into_values() {
                if count < min_pair {
                    continue;
                }
                s.fill_upper_triangle_with_lower_triangle();
                for i in 0..dim {
                    s[(i, i)] -= count as f64;
                }
                s /= n_s;
                max_trace = max_trace.max(s.trace().abs());
                let eig = SymmetricEigen::new(s);
                let top = (0..dim)
                    .max_by(|&a, &b| eig.eigenvalues[a].abs().total_cmp(&eig.eigenvalues[b].abs()))
                    .expect("nonempty frame");
                let u = eig.eigenvectors.column(top);
                matrix.ger(1.0, &u, &u, 1.0);
                weights.push(1.0);
            }
            if weights.is_empty() {
                return None;
            }
            let scale = n_s / n_total / weights.len() as f64;
            matrix *= scale;
            Some(CellContribution {
                matrix,
                weights: weights.into_iter().map(|w| w * scale).collect(),
                max_trace,
            })
        })
        .collect();
    let (total, weights, used, skipped, max_trace) = sum_contributions(parts, dim);
    let null_mean = weights.iter().sum::<f64>() / dim as f64;
    let null = null_mean * mp_edge(dim, &weights);
    Ok((total, null, used, skipped, max_trace, weights.len()))
}

/// Makes the first coordinate of magnitude above `1e-12` positive.
fn canonical_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|a| a.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
    }
}

fn threshold_directions(
    u_hat: DMatrix<f64>,
    frame: &DMatrix<f64>,
    null_level: f64,
    config: &LearnerConfig,
    mut report: DirectionReport,
) -> DirectionReport {
    let dim = u_hat.nrows();
    let eig = SymmetricEigen::new(u_hat.clone());
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..dim)
        .map(|j| {
            let mut v: Vec<f64> = (frame * eig.eigenvectors.column(j)).iter().copied().collect();
            canonical_sign(&mut v);
            (eig.eigenvalues[j], v)
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| {
            b.1.iter()
                .zip(&a.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let top = pairs.first().map(|p| p.0).unwrap_or(0.0).max(0.0);
    let floor = config
        .lambda_floor
        .unwrap_or(config.null_factor * null_level);
    let lambda = floor.max(config.lambda_rel * top);
    report.eigenvalues = pairs.iter().map(|p| p.0).collect();
    report.frobenius = u_hat.norm();
    report.trace = u_hat.trace();
    report.threshold = lambda;
    report.null_level = null_level;
    let cap = if lambda > 0.0 {
        (4.0 * report.frobenius / (lambda * lambda)).floor() as usize
    } else {
        dim
    };
    let lifted = frame * &u_hat * frame.transpose();
    let chosen: Vec<Vec<f64>> = pairs
        .into_iter()
        .filter(|p| p.0 >= lambda && lambda > 0.0)
        .take(cap)
        .map(|p| p.1)
        .collect();
    report.rayleigh = chosen
        .iter()
        .map(|v| {
            let v = DVector::from_column_slice(v);
            v.dot(&(&lifted * &v))
        })
        .collect();
    report.directions = DirectionList { vectors: chosen };
    report.matrix = Some(lifted);
    report
}

/// Frame of `V^⊥` used for regression; sketched to the top covariance
/// directions when configured and `m >= 2`.
fn working_frame(v: &Subspace, data: &LabeledDataset, config: &LearnerConfig) -> Result<DMatrix<f64>> {
    let full = v.complement_frame();
    match config.sketch_dim {
        Some(r) if config.m >= 2 && r < full.ncols() => {
            let p = prepare(v, data, config, full)?;
            let (agg, ..) = covariance_aggregate(&p, config)?;
            let eig = SymmetricEigen::new(agg);
            let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
            let cols: Vec<DVector<f64>> = order[..r].iter().map(|&j| &p.frame * eig.eigenvectors.column(j)).collect();
            Ok(DMatrix::from_columns(&cols))
        }
        _ => Ok(full),
    }
}

fn check_inputs(v: &Subspace, data: &LabeledDataset, config: &LearnerConfig) -> Result<()> {
    config.validate()?;
    check_dim(data.dim, v.ambient_dim())?;
    if data.is_empty() {
        return Err(MimError::Config("dataset is empty".into()));
    }
    Ok(())
}

/// Relevant directions orthogonal to `v` from degree-`m` regressions of the
/// label-interval indicators in each cube.
pub fn find_direction(v: &Subspace, data: &LabeledDataset, config: &LearnerConfig) -> Result<DirectionReport> {
    check_inputs(v, data, config)?;
    let frame = working_frame(v, data, config)?;
    let dim = frame.ncols();
    if dim == 0 {
        return Ok(DirectionReport::empty(0));
    }
    let p = prepare(v, data, config, frame)?;
    let (u_hat, null, used, skipped, max_trace, pairs) = regression_aggregate(&p, config)?;
    let mut report = DirectionReport::empty(dim);
    report.cells_used = used;
    report.cells_skipped = skipped;
    report.pairs_used = pairs;
    report.max_pair_trace = max_trace;
    if used == 0 {
        return Ok(report);
    }
    Ok(threshold_directions(u_hat, &p.frame, null, config, report))
}

/// Relevant directions orthogonal to `v` from the top eigenvector of each
/// filtered centred second-moment matrix `E[1(y∈I)(zz^T - I) | S]`. Pairs of a
/// cube count equally and each cube is weighted by its mass, so `tr Û <= 1`.
pub fn find_direction_m2(v: &Subspace, data: &LabeledDataset, config: &LearnerConfig) -> Result<DirectionReport> {
    check_inputs(v, data, config)?;
    let frame = v.complement_frame();
    let dim = frame.ncols();
    if dim == 0 {
        return Ok(DirectionReport::empty(0));
    }
    let p = prepare(v, data, config, frame)?;
    let (u_hat, null, used, skipped, max_trace, pairs) = covariance_aggregate(&p, config)?;
    let mut report = DirectionReport::empty(dim);
    report.cells_used = used;
    report.cells_skipped = skipped;
    report.pairs_used = pairs;
    report.max_pair_trace = max_trace;
    if pairs == 0 {
        return Ok(report);
    }
    Ok(threshold_directions(u_hat, &p.frame, null, config, report))
}

/// Median of `min(n, blocks)` contiguous block means.
pub fn median_of_means(values: &[f64], blocks: usize) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let b = blocks.clamp(1, n);
    let mut means: Vec<f64> = (0..b)
        .map(|i| {
            let chunk = &values[i * n / b..(i + 1) * n / b];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    if b % 2 == 1 {
        means[b / 2]
    } else {
        0.5 * (means[b / 2 - 1] + means[b / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellEntry {
    index: Vec<u32>,
    value: f64,
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HypothesisRepr {
    partition: CubePartition,
    fallback: CellFallback,
    min_count: usize,
    mom_blocks: usize,
    levels: Vec<Vec<CellEntry>>,
}

/// Piecewise-constant predictor on the cubes of a subspace. Level 0 holds the
/// cube table; higher levels hold coarser aligned blocks used as fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HypothesisRepr", into = "HypothesisRepr")]
pub struct PiecewiseConstantHypothesis {
    partition: CubePartition,
    fallback: CellFallback,
    min_count: usize,
    mom_blocks: usize,
    levels: Vec<BTreeMap<Vec<u32>, (f64, usize)>>,
}

impl From<PiecewiseConstantHypothesis> for HypothesisRepr {
    fn from(h: PiecewiseConstantHypothesis) -> Self {
        HypothesisRepr {
            partition: h.partition,
            fallback: h.fallback,
            min_count: h.min_count,
            mom_blocks: h.mom_blocks,
            levels: h
                .levels
                .into_iter()
                .map(|l| {
                    l.into_iter()
                        .map(|(index, (value, count))| CellEntry { index, value, count })
                        .collect()
                })
                .collect(),
        }
    }
}

impl TryFrom<HypothesisRepr> for PiecewiseConstantHypothesis {
    type Error = MimError;

    fn try_from(r: HypothesisRepr) -> Result<Self> {
        let k = r.partition.dim();
        let mut levels = Vec::with_capacity(r.levels.len());
        for l in r.levels {
            let mut table = BTreeMap::new();
            for e in l {
                if e.index.len() != k || !e.value.is_finite() {
                    return Err(MimError::Format("cell entry does not match the partition".into()));
                }
                table.insert(e.index, (e.value, e.count));
            }
            levels.push(table);
        }
        if levels.is_empty() {
            return Err(MimError::Format("hypothesis has no cell table".into()));
        }
        Ok(PiecewiseConstantHypothesis {
            partition: r.partition,
            fallback: r.fallback,
            min_count: r.min_count,
            mom_blocks: r.mom_blocks,
            levels,
        })
    }
}

impl PiecewiseConstantHypothesis {
    pub fn subspace(&self) -> &Subspace {
        self.partition.subspace()
    }

    pub fn partition(&self) -> &CubePartition {
        &self.partition
    }

    pub fn fallback(&self) -> CellFallback {
        self.fallback
    }

    /// Value stored for a cube at level 0, if any.
    pub fn cell_value(&self, cube: &[u32]) -> Option<f64> {
        self.levels[0].get(cube).map(|e| e.0)
    }

    pub fn cell_count(&self) -> usize {
        self.levels[0].len()
    }

    pub fn predict_coords(&self, coords: &[f64]) -> f64 {
        let Some(cube) = self.partition.locate_coords(coords) else {
            return 0.0;
        };
        let mut key = cube;
        for (l, table) in self.levels.iter().enumerate() {
            if l > 0 {
                key.iter_mut().for_each(|c| *c >>= 1);
            }
            if let Some(e) = table.get(&key) {
                return e.0;
            }
        }
        0.0
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict_coords(&self.subspace().coords(x)?))
    }

    /// True when `x` falls inside the partitioned box.
    pub fn covers(&self, x: &[f64]) -> Result<bool> {
        Ok(self.partition.locate(x)?.is_some())
    }
}

/// Cube-wise median-of-means fit; cubes without samples predict 0.
pub fn fit_piecewise_constant(
    v: &Subspace,
    data: &LabeledDataset,
    width: f64,
    mom_blocks: usize,
) -> Result<PiecewiseConstantHypothesis> {
    fit_hypothesis(v, data, width, 0.0, mom_blocks, CellFallback::Zero, 1)
}

/// General fit. With [`CellFallback::Coarsen`], cubes holding fewer than
/// `min_count` samples fall back to enclosing blocks of `2^l` cubes per axis.
pub fn fit_hypothesis(
    v: &Subspace,
    data: &LabeledDataset,
    width: f64,
    offset: f64,
    mom_blocks: usize,
    fallback: CellFallback,
    min_count: usize,
) -> Result<PiecewiseConstantHypothesis> {
    check_dim(data.dim, v.ambient_dim())?;
    if mom_blocks == 0 {
        return Err(MimError::Config("mom_blocks must be at least 1".into()));
    }
    let partition = CubePartition::new(v.clone(), width, offset)?;
    let k = v.dim();
    let vc = data.project_rows(v.basis())?;
    let mut fine: Vec<(Vec<u32>, f64)> = Vec::new();
    for i in 0..data.len() {
        let c = if k == 0 { &[][..] } else { &vc[i * k..(i + 1) * k] };
        if let Some(cube) = partition.locate_coords(c) {
            fine.push((cube, data.ys[i]));
        }
    }
    let min_count = match fallback {
        CellFallback::Zero => 1,
        CellFallback::Coarsen => min_count.max(1),
    };
    let top_level = match fallback {
        CellFallback::Zero => 0,
        CellFallback::Coarsen => {
            let mut l = 0;
            while (partition.cells_per_axis() - 1) >> l > 0 {
                l += 1;
            }
            l
        }
    };
    let mut levels = Vec::with_capacity(top_level + 1);
    for l in 0..=top_level {
        let mut groups: BTreeMap<Vec<u32>, Vec<f64>> = BTreeMap::new();
        for (cube, y) in &fine {
            groups.entry(cube.iter().map(|c| c >> l).collect()).or_default().push(*y);
        }
        let need = if l == top_level { 1 } else { min_count };
        let table: BTreeMap<Vec<u32>, (f64, usize)> = groups
            .into_iter()
            .filter(|(_, ys)| ys.len() >= need)
            .map(|(key, ys)| (key, (median_of_means(&ys, mom_blocks), ys.len())))
            .collect();
        levels.push(table);
    }
    Ok(PiecewiseConstantHypothesis {
        partition,
        fallback,
        min_count,
        mom_blocks,
        levels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub mse: f64,
    /// Squared error against the noiseless target, when known.
    pub mse_vs_clean: Option<f64>,
    pub coverage_fraction: f64,
}

const EVAL_CHUNK: usize = 4096;

/// Held-out squared error and coverage. Chunked sums are reduced in a fixed
/// order, so results do not depend on the thread count.
pub fn evaluate(
    h: &PiecewiseConstantHypothesis,
    test: &LabeledDataset,
    ground_truth: Option<&MimInstance>,
) -> Result<EvalMetrics> {
    check_dim(h.subspace().ambient_dim(), test.dim)?;
    if test.is_empty() {
        return Err(MimError::Config("evaluation set is empty".into()));
    }
    if let Some(gt) = ground_truth {
        check_dim(gt.ambient_dim(), test.dim)?;
    }
    let n = test.len();
    let chunks: Vec<(f64, f64, usize)> = (0..n.div_ceil(EVAL_CHUNK))
        .into_par_iter()
        .map(|c| {
            let (mut se, mut sc, mut cov) = (0.0, 0.0, 0usize);
            for i in c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n) {
                let x = test.row(i);
                let coords = h.subspace().coords(x).expect("checked dimension");
                let pred = h.predict_coords(&coords);
                if h.partition.locate_coords(&coords).is_some() {
                    cov += 1;
                }
                se += (test.ys[i] - pred).powi(2);
                if let Some(gt) = ground_truth {
                    sc += (gt.evaluate(x).expect("checked dimension") - pred).powi(2);
                }
            }
            (se, sc, cov)
        })
        .collect();
    let (mut se, mut sc, mut cov) = (0.0, 0.0, 0);
    for (a, b, c) in chunks {
        se += a;
        sc += b;
        cov += c;
    }
    Ok(EvalMetrics {
        n,
        mse: se / n as f64,
        mse_vs_clean: ground_truth.map(|_| sc / n as f64),
        coverage_fraction: cov as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoDirections,
    DimensionCap,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dim_before: usize,
    pub dim_after: usize,
    /// Directions actually added, in `R^d`.
    pub added: Vec<Vec<f64>>,
    pub report: DirectionReport,
    /// Basis of `V_t` after this iteration.
    pub basis: Subspace,
    /// Error of the hypothesis fitted on `V_t`: on the monitor set when one
    /// is given, otherwise on the reserved fit slice.
    pub error: f64,
    pub potential: Option<f64>,
    /// `‖Π_W v‖` for each added direction.
    pub betas: Vec<f64>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub batch_size: usize,
    pub fit_samples: usize,
    pub initial_dim: usize,
    pub initial_error: f64,
    pub initial_potential: Option<f64>,
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
}

impl IterationTrace {
    /// Errors of `h_0, h_1, ...`.
    pub fn errors(&self) -> Vec<f64> {
        std::iter::once(self.initial_error)
            .chain(self.records.iter().map(|r| r.error))
            .collect()
    }

    pub fn potentials(&self) -> Option<Vec<f64>> {
        std::iter::once(self.initial_potential)
            .chain(self.records.iter().map(|r| r.potential))
            .collect()
    }

    pub fn total_added(&self) -> usize {
        self.records.iter().map(|r| r.added.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LearnOptions<'a> {
    pub warm_start: Option<&'a Subspace>,
    pub ground_truth: Option<&'a MimInstance>,
    /// Fixed evaluation set for the per-iteration error.
    pub monitor: Option<&'a LabeledDataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub hypothesis: PiecewiseConstantHypothesis,
    pub trace: IterationTrace,
}

/// [`learn_with`] without warm start or monitor set.
pub fn learn(data: &LabeledDataset, config: &LearnerConfig, ground_truth: Option<&MimInstance>) -> Result<LearnOutcome> {
    learn_with(
        data,
        config,
        LearnOptions {
            ground_truth,
            ..Default::default()
        },
    )
}

/// The outer loop. Iteration `t` uses the `t`-th disjoint batch; the last
/// `N - T·b` samples are reserved for the per-iteration fits, and the final
/// hypothesis is fitted on every sample no iteration consumed.
pub fn learn_with(data: &LabeledDataset, config: &LearnerConfig, opts: LearnOptions<'_>) -> Result<LearnOutcome> {
    config.validate()?;
    let d = data.dim;
    let n = data.len();
    let t_max = config.max_iters;
    let b = config.batch_size.unwrap_or(n / (t_max + 1));
    if b == 0 || t_max.saturating_mul(b) >= n {
        return Err(MimError::Config(format!(
            "{n} samples cannot supply {t_max} batches of {b} plus a fit set"
        )));
    }
    if let Some(w) = opts.warm_start {
        check_dim(d, w.ambient_dim())?;
    }
    if let Some(gt) = opts.ground_truth {
        check_dim(d, gt.ambient_dim())?;
    }
    if let Some(mon) = opts.monitor {
        check_dim(d, mon.dim)?;
    }
    let reserved = data.slice(t_max * b, n);
    let cap = config.max_dim.unwrap_or(d).min(d);
    let fit = |v: &Subspace, fit_data: &LabeledDataset| {
        fit_hypothesis(
            v,
            fit_data,
            config.fit_width(),
            if config.offset < config.fit_width() / 2.0 { config.offset } else { 0.0 },
            config.mom_blocks,
            config.fit_fallback,
            config.min_fit_count,
        )
    };
    let error_of = |v: &Subspace| -> Result<f64> {
        let h = fit(v, &reserved)?;
        let target = opts.monitor.unwrap_or(&reserved);
        Ok(evaluate(&h, target, None)?.mse)
    };
    let pot = |v: &Subspace| opts.ground_truth.map(|gt| potential(&gt.hidden, v)).transpose();

    let mut v = opts.warm_start.cloned().unwrap_or_else(|| Subspace::trivial(d));
    let initial_dim = v.dim();
    let initial_error = error_of(&v)?;
    let initial_potential = pot(&v)?;
    let mut records = Vec::new();
    let mut used = 0;
    let mut stop = StopReason::IterationLimit;
    for t in 0..t_max {
        if v.dim() >= cap {
            stop = StopReason::DimensionCap;
            break;
        }
        let start = Instant::now();
        let batch = data.slice(t * b, (t + 1) * b);
        used = (t + 1) * b;
        let report = match config.mode {
            LearnerMode::FastM2 => find_direction_m2(&v, &batch, config)?,
            _ => find_direction(&v, &batch, config)?,
        };
        let room = cap - v.dim();
        let take = match config.mode {
            LearnerMode::MimDistribution => 1,
            _ => room,
        }
        .min(room);
        let added: Vec<Vec<f64>> = report.directions.vectors.iter().take(take).cloned().collect();
        let next = orthonormalize(&DirectionList { vectors: added.clone() }, &v, DEFAULT_DROP_TOL);
        let betas = match opts.ground_truth {
            Some(gt) => added
                .iter()
                .map(|a| Ok(gt.hidden.coords(a)?.iter().map(|c| c * c).sum::<f64>().sqrt()))
                .collect::<Result<Vec<f64>>>()?,
            None => Vec::new(),
        };
        let no_growth = next.dim() == v.dim();
        let dim_before = v.dim();
        v = next;
        records.push(IterationRecord {
            iteration: t + 1,
            dim_before,
            dim_after: v.dim(),
            added,
            report,
            basis: v.clone(),
            error: error_of(&v)?,
            potential: pot(&v)?,
            betas,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if no_growth {
            stop = StopReason::NoDirections;
            break;
        }
    }
    let fit_data = data.slice(used, n);
    let hypothesis = fit(&v, &fit_data)?;
    Ok(LearnOutcome {
        hypothesis,
        trace: IterationTrace {
            batch_size: b,
            fit_samples: fit_data.len(),
            initial_dim,
            initial_error,
            initial_potential,
            records,
            stop_reason: stop,
        },
    })
}
