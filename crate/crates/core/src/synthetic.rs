//! Target families with a known hidden subspace `W`, label-noise regimes and
//! Gaussian sample generation.
//!
//! Every instance is stored in the coordinates `z = W^T x` of its hidden
//! frame, so `f(x) = g(W^T x)` holds by construction.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MimError, Result};
use crate::hermite::{enumerate_multi_indices, HermiteExpansion, DEFAULT_BASIS_CAP};
use crate::subspace::{DirectionList, Subspace};

/// Monte-Carlo sample count used to normalize `E[f²] = 1`.
pub const NORMALIZATION_SAMPLES: usize = 1_000_000;

const MAX_RETRIES: usize = 1000;

/// Smallest accepted `σ_min / σ_max` of a network's first layer.
pub const MIN_FIRST_LAYER_CONDITION: f64 = 0.25;

/// Default smallest accepted `λ_min/λ_max` of a network's `E[∇g ∇g^T]`.
pub const MIN_GRADIENT_CONDITION: f64 = 0.2;

/// Dense layer, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl Layer {
    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks(self.cols)
                .map(|row| row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()),
        );
    }

    fn operator_norm(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.rows, self.cols, &self.weights);
        m.svd(false, false).singular_values.max()
    }
}

/// Bias-free ReLU network acting on hidden coordinates. The last layer has a
/// single output and no activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluNetwork {
    pub layers: Vec<Layer>,
}

impl ReluNetwork {
    pub fn eval(&self, z: &[f64]) -> f64 {
        let mut cur = z.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Gradient with respect to the input, taking the ReLU derivative at 0 as 0.
    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut cur = z.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            layer.apply(&cur, &mut next);
            masks.push(next.iter().map(|&v| v > 0.0).collect::<Vec<_>>());
            for v in next.iter_mut() {
                *v = v.max(0.0);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let mut g = self.layers.last().unwrap().weights.clone();
        for (layer, mask) in self.layers[..self.layers.len() - 1].iter().zip(&masks).rev() {
            let mut back = vec![0.0; layer.cols];
            for (r, row) in layer.weights.chunks(layer.cols).enumerate() {
                if mask[r] {
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += g[r] * w;
                    }
                }
            }
            g = back;
        }
        g
    }

    fn lipschitz_bound(&self) -> f64 {
        self.layers.iter().map(Layer::operator_norm).product()
    }
}

/// `f(z) = Σ_j s_j |a_j · z| + b · z`: positive-homogeneous and Lipschitz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsSum {
    pub directions: Vec<Vec<f64>>,
    pub signs: Vec<f64>,
    pub linear: Vec<f64>,
    pub scale: f64,
}

impl AbsSum {
    pub fn eval(&self, z: &[f64]) -> f64 {
        let dot = |a: &[f64]| a.iter().zip(z).map(|(p, q)| p * q).sum::<f64>();
        let kinks: f64 = self
            .directions
            .iter()
            .zip(&self.signs)
            .map(|(a, s)| s * dot(a).abs())
            .sum();
        self.scale * (kinks + dot(&self.linear))
    }

    fn lipschitz_bound(&self) -> f64 {
        let lin = self.linear.iter().map(|a| a * a).sum::<f64>().sqrt();
        self.scale * (self.directions.len() as f64 + lin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    ReluNetwork(ReluNetwork),
    PositiveHomogeneous(AbsSum),
    LowRankPolynomial { link: HermiteExpansion },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::ReluNetwork(_) => "relu_network",
            Family::PositiveHomogeneous(_) => "positive_homogeneous",
            Family::LowRankPolynomial { .. } => "low_rank_polynomial",
        }
    }

    fn eval_hidden(&self, z: &[f64]) -> f64 {
        match self {
            Family::ReluNetwork(n) => n.eval(z),
            Family::PositiveHomogeneous(a) => a.eval(z),
            Family::LowRankPolynomial { link } => link.eval(z).expect("link dimension matches frame"),
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        !matches!(self, Family::LowRankPolynomial { .. })
    }
}

/// A `K`-MIM `f(x) = g(W^T x)` with its ground-truth subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimInstance {
    pub hidden: Subspace,
    pub family: Family,
    /// Upper bound on the Lipschitz constant, when the family has one.
    pub lipschitz: Option<f64>,
    /// Bound on `E[f²]` after normalization.
    pub norm_bound: f64,
    /// Boundedness surrogate `10 sqrt(K) L`.
    pub tail_bound: Option<f64>,
    pub seed: u64,
}

impl MimInstance {
    pub fn ambient_dim(&self) -> usize {
        self.hidden.ambient_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.dim()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let z = self.hidden.coords(x)?;
        Ok(self.family.eval_hidden(&z))
    }

    /// `f` at the point whose hidden coordinates are `z`.
    pub fn evaluate_hidden(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.hidden_dim(), z.len())?;
        Ok(self.family.eval_hidden(z))
    }

    /// Builds an instance around a given link polynomial and hidden frame,
    /// without resampling.
    pub fn from_polynomial(hidden: Subspace, link: HermiteExpansion, seed: u64) -> Result<Self> {
        check_dim(hidden.dim(), link.ambient_dim())?;
        Ok(MimInstance {
            hidden,
            norm_bound: link.norm_sq(),
            family: Family::LowRankPolynomial { link },
            lipschitz: None,
            tail_bound: None,
            seed,
        })
    }

    fn with_bounds(hidden: Subspace, family: Family, lipschitz: Option<f64>, seed: u64) -> Self {
        let k = hidden.dim() as f64;
        MimInstance {
            hidden,
            family,
            lipschitz,
            norm_bound: 1.0,
            tail_bound: lipschitz.map(|l| 10.0 * k.sqrt() * l),
            seed,
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A Haar-random `k`-dimensional subspace of `R^d`.
pub fn random_subspace(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Subspace> {
    if k > d {
        return Err(MimError::Config(format!("hidden dimension {k} exceeds ambient {d}")));
    }
    for _ in 0..MAX_RETRIES {
        let vs: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(rng, d)).collect();
        let list = DirectionList::new_unnormalized(d, &vs)?;
        let s = crate::subspace::orthonormalize(&list, &Subspace::trivial(d), 1e-6);
        if s.dim() == k {
            return Ok(s);
        }
    }
    Err(MimError::Generation("could not sample an independent frame".into()))
}

fn mc_second_moment(k: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_726d_616c_697a);
    let mut z = vec![0.0; k];
    let mut acc = 0.0;
    for _ in 0..NORMALIZATION_SAMPLES {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let v = f(&z);
        acc += v * v;
    }
    acc / NORMALIZATION_SAMPLES as f64
}

/// Random homogeneous ReLU network of rank-`k` first layer. `layer_widths`
/// are the hidden widths; the output layer is added. Output weights are
/// nonnegative; the result is rescaled so that `E[f²] = 1`.
pub fn make_relu_network(d: usize, k: usize, layer_widths: &[usize], seed: u64) -> Result<MimInstance> {
    make_relu_network_with(d, k, layer_widths, seed, MIN_GRADIENT_CONDITION)
}

/// As [`make_relu_network`], redrawing until `λ_min/λ_max` of `E[∇g ∇g^T]`
/// on the hidden coordinates reaches `min_influence_ratio`.
pub fn make_relu_network_with(
    d: usize,
    k: usize,
    layer_widths: &[usize],
    seed: u64,
    min_influence_ratio: f64,
) -> Result<MimInstance> {
    if k == 0 || k > d {
        return Err(MimError::Config(format!("need 1 <= K <= d, got K = {k}, d = {d}")));
    }
    if layer_widths.is_empty() || layer_widths.contains(&0) {
        return Err(MimError::Config("layer widths must be nonempty and positive".into()));
    }
    if layer_widths[0] < k {
        return Err(MimError::Config(format!(
            "first layer of width {} cannot have rank {k}",
            layer_widths[0]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = random_subspace(d, k, &mut rng)?;

    let mut net = None;
    let mut best = 0.0f64;
    for attempt in 0..MAX_RETRIES {
        let Some(candidate) = draw_network(k, layer_widths, &mut rng) else {
            continue;
        };
        let ratio = gradient_condition(&candidate, k, seed.wrapping_add(attempt as u64));
        if ratio >= min_influence_ratio {
            net = Some(candidate);
            break;
        }
        best = best.max(ratio);
    }
    let mut net = net.ok_or_else(|| {
        MimError::Generation(format!(
            "no network reached gradient condition {min_influence_ratio} in {MAX_RETRIES} draws; best was {best:.4}"
        ))
    })?;
    let second = mc_second_moment(k, seed, |z| net.eval(z));
    if !(second > 0.0) {
        return Err(MimError::Generation("network is identically zero".into()));
    }
    let c = 1.0 / second.sqrt();
    net.layers.last_mut().unwrap().weights.iter_mut().for_each(|a| *a *= c);
    let lip = net.lipschitz_bound();
    Ok(MimInstance::with_bounds(hidden, Family::ReluNetwork(net), Some(lip), seed))
}

fn draw_network(k: usize, layer_widths: &[usize], rng: &mut ChaCha8Rng) -> Option<ReluNetwork> {
    let w = layer_widths[0];
    let mut weights = gaussian_vec(rng, w * k);
    for row in weights.chunks_mut(k) {
        let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        row.iter_mut().for_each(|a| *a /= n);
    }
    let sv = DMatrix::from_row_slice(w, k, &weights).svd(false, false).singular_values;
    if sv.min() < MIN_FIRST_LAYER_CONDITION * sv.max() {
        return None;
    }
    let mut layers = vec![Layer { rows: w, cols: k, weights }];
    let mut widths = layer_widths.to_vec();
    widths.push(1);
    for pair in widths.windows(2) {
        let (cols, rows) = (pair[0], pair[1]);
        let scale = 1.0 / (cols as f64).sqrt();
        let mut weights: Vec<f64> = gaussian_vec(rng, rows * cols).into_iter().map(|a| a * scale).collect();
        if rows == 1 {
            weights.iter_mut().for_each(|a| *a = a.abs());
        }
        layers.push(Layer { rows, cols, weights });
    }
    Some(ReluNetwork { layers })
}

const GRADIENT_SAMPLES: usize = 20_000;

/// Monte-Carlo `λ_min/λ_max` of `E[∇g ∇g^T]`.
fn gradient_condition(net: &ReluNetwork, k: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164_6965_6e74);
    let mut m = DMatrix::zeros(k, k);
    for _ in 0..GRADIENT_SAMPLES {
        let z = gaussian_vec(&mut rng, k);
        let g = DVector::from_vec(net.gradient(&z));
        m.ger(1.0, &g, &g, 1.0);
    }
    let eig = m.symmetric_eigenvalues();
    if eig.max() <= 0.0 {
        0.0
    } else {
        eig.min().max(0.0) / eig.max()
    }
}

/// Random `Σ_j s_j |a_j·z| + b·z` with `terms` kinks, normalized to `E[f²] = 1`.
pub fn make_positive_homogeneous(d: usize, k: usize, terms: usize, seed: u64) -> Result<MimInstance> {
    if k == 0 || k > d || terms == 0 {
        return Err(MimError::Config("need 1 <= K <= d and at least one term".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = random_subspace(d, k, &mut rng)?;
    let directions: Vec<Vec<f64>> = (0..terms)
        .map(|_| {
            let v = gaussian_vec(&mut rng, k);
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / n).collect()
        })
        .collect();
    let signs = (0..terms).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let linear = gaussian_vec(&mut rng, k).into_iter().map(|a| 0.5 * a).collect();
    let mut f = AbsSum {
        directions,
        signs,
        linear,
        scale: 1.0,
    };
    let second = mc_second_moment(k, seed, |z| f.eval(z));
    if !(second > 0.0) {
        return Err(MimError::Generation("function is identically zero".into()));
    }
    f.scale = 1.0 / second.sqrt();
    let lip = f.lipschitz_bound();
    Ok(MimInstance::with_bounds(hidden, Family::PositiveHomogeneous(f), Some(lip), seed))
}

/// `λ_min / λ_max` of `E[∇q ∇q^T]`.
pub fn nondegeneracy(link: &HermiteExpansion) -> f64 {
    let m = link.influence_matrix();
    let eig = m.symmetric_eigenvalues();
    let max = eig.max();
    if max <= 0.0 {
        0.0
    } else {
        eig.min().max(0.0) / max
    }
}

/// Random zero-mean, unit-variance degree-`m` link over `R^K`, resampled until
/// its gradient second-moment matrix has `λ_min/λ_max >= alpha_target`.
pub fn make_low_rank_polynomial(d: usize, k: usize, m: usize, alpha_target: f64, seed: u64) -> Result<MimInstance> {
    if m == 0 || k == 0 || k > d {
        return Err(MimError::Config(format!("need m >= 1 and 1 <= K <= d, got m={m}, K={k}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = random_subspace(d, k, &mut rng)?;
    let indices = enumerate_multi_indices(k, m, DEFAULT_BASIS_CAP)?;
    let mut best = 0.0f64;
    for _ in 0..MAX_RETRIES {
        let mut q = HermiteExpansion::new(k, m);
        for a in indices.iter().filter(|a| a.total_degree() > 0) {
            q.set(a.clone(), StandardNormal.sample(&mut rng))?;
        }
        q.scale(1.0 / q.norm_sq().sqrt());
        let alpha = nondegeneracy(&q);
        if alpha >= alpha_target {
            let mut inst = MimInstance::from_polynomial(hidden, q, seed)?;
            inst.norm_bound = 1.0;
            return Ok(inst);
        }
        best = best.max(alpha);
    }
    Err(MimError::Generation(format!(
        "no link reached non-degeneracy {alpha_target} in {MAX_RETRIES} draws; best was {best:.4}"
    )))
}

/// Label noise applied on top of `f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    Realizable,
    /// `y = f(x) + σ g`, `g ~ N(0, 1)` independent of `x`.
    Additive { sigma: f64 },
    /// Sign flips concentrated on the hidden-space cells of largest `Σ|f|`,
    /// keeping the empirical `E[(y - f)²]` within `budget`.
    Adversarial { budget: f64 },
}

/// Side of the hidden-coordinate grid used to concentrate adversarial flips.
pub const ADVERSARIAL_CELL_WIDTH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub family: String,
    pub noise: NoiseModel,
    pub instance_seed: u64,
}

/// Row-major samples `x` with labels `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dim: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub seed: u64,
    pub provenance: Option<Provenance>,
}

impl LabeledDataset {
    pub fn new(dim: usize, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if dim == 0 || xs.len() != dim * ys.len() {
            return Err(MimError::Config(format!(
                "{} features do not form {} rows of dimension {dim}",
                xs.len(),
                ys.len()
            )));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(MimError::Config("dataset entries must be finite".into()));
        }
        Ok(LabeledDataset {
            dim,
            xs,
            ys,
            seed: 0,
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy of rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> LabeledDataset {
        LabeledDataset {
            dim: self.dim,
            xs: self.xs[start * self.dim..end * self.dim].to_vec(),
            ys: self.ys[start..end].to_vec(),
            seed: self.seed,
            provenance: self.provenance.clone(),
        }
    }

    /// Rows projected onto the columns of `frame` (`d x k`), row-major `n x k`.
    pub fn project_rows(&self, frame: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dim(self.dim, frame.nrows())?;
        let k = frame.ncols();
        let cols: Vec<Vec<f64>> = (0..k).map(|j| frame.column(j).iter().copied().collect()).collect();
        let mut out = vec![0.0; self.len() * k];
        for (i, o) in out.chunks_mut(k.max(1)).enumerate().take(self.len()) {
            let x = self.row(i);
            for (j, c) in cols.iter().enumerate() {
                o[j] = c.iter().zip(x).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }
}

/// Draws `n` i.i.d. standard Gaussian points and labels them with `inst` under
/// `noise`. Deterministic in `seed`.
pub fn sample_dataset(inst: &MimInstance, noise: NoiseModel, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(MimError::Config("sample count must be positive".into()));
    }
    let d = inst.ambient_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = gaussian_vec(&mut rng, n * d);
    let frame = inst.hidden.basis();
    let mut hidden = vec![0.0; inst.hidden_dim()];
    let mut clean = Vec::with_capacity(n);
    let mut cells = Vec::with_capacity(n);
    for x in xs.chunks(d) {
        for (j, h) in hidden.iter_mut().enumerate() {
            *h = frame.column(j).iter().zip(x).map(|(a, b)| a * b).sum();
        }
        clean.push(inst.family.eval_hidden(&hidden));
        if matches!(noise, NoiseModel::Adversarial { .. }) {
            cells.push(
                hidden
                    .iter()
                    .map(|h| (h / ADVERSARIAL_CELL_WIDTH).floor() as i64)
                    .collect::<Vec<_>>(),
            );
        }
    }
    let ys = match noise {
        NoiseModel::Realizable => clean,
        NoiseModel::Additive { sigma } => {
            if !(sigma >= 0.0) {
                return Err(MimError::Config(format!("noise sigma must be nonnegative, got {sigma}")));
            }
            clean
                .iter()
                .map(|f| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    f + sigma * g
                })
                .collect()
        }
        NoiseModel::Adversarial { budget } => {
            if !(budget >= 0.0) {
                return Err(MimError::Config(format!("adversarial budget must be nonnegative, got {budget}")));
            }
            adversarial_flips(&clean, &cells, budget)
        }
    };
    Ok(LabeledDataset {
        dim: d,
        xs,
        ys,
        seed,
        provenance: Some(Provenance {
            family: inst.family.name().to_string(),
            noise,
            instance_seed: inst.seed,
        }),
    })
}

fn adversarial_flips(clean: &[f64], cells: &[Vec<i64>], budget: f64) -> Vec<f64> {
    let n = clean.len() as f64;
    let mut members: HashMap<&[i64], Vec<usize>> = HashMap::new();
    for (i, c) in cells.iter().enumerate() {
        members.entry(c.as_slice()).or_default().push(i);
    }
    let mut order: Vec<(&[i64], f64)> = members
        .iter()
        .map(|(c, idx)| (*c, idx.iter().map(|&i| clean[i].abs()).sum::<f64>()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut ys = clean.to_vec();
    let mut spent = 0.0;
    for (cell, _) in order {
        for &i in &members[cell] {
            let cost = 4.0 * clean[i] * clean[i] / n;
            if cost > 0.0 && spent + cost <= budget {
                spent += cost;
                ys[i] = -clean[i];
            }
        }
        if budget - spent < 1e-12 {
            break;
        }
    }
    ys
}

/// Empirical `E[(y - f(x))²]` of a dataset against an instance.
pub fn empirical_noise_level(inst: &MimInstance, data: &LabeledDataset) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..data.len() {
        let r = data.ys[i] - inst.evaluate(data.row(i))?;
        acc += r * r;
    }
    Ok(acc / data.len() as f64)
}

/// Coordinates of a random direction orthogonal to `W`, for MIM-property checks.
pub fn random_orthogonal_to(hidden: &Subspace, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v = gaussian_vec(rng, hidden.ambient_dim());
    hidden.project_complement(&v).expect("matching dimension")
}

/// Unit vector along `a`, used by tests that need a neuron direction in `R^d`.
pub fn lift_hidden(hidden: &Subspace, z: &[f64]) -> Vec<f64> {
    let v = hidden.basis() * DVector::from_column_slice(z);
    v.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_neuron(seed: u64) -> MimInstance {
        make_relu_network(12, 2, &[2], seed).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let inst = make_relu_network(9, 3, &[4, 3], 21).unwrap();
        let Family::ReluNetwork(net) = &inst.family else { panic!() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z = gaussian_vec(&mut rng, 3);
            let g = net.gradient(&z);
            for j in 0..3 {
                let h = 1e-6;
                let mut a = z.clone();
                let mut b = z.clone();
                a[j] += h;
                b[j] -= h;
                let fd = (net.eval(&a) - net.eval(&b)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-5, "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn generated_networks_meet_gradient_condition() {
        for seed in 0..5 {
            let inst = two_neuron(seed);
            let Family::ReluNetwork(net) = &inst.family else { panic!() };
            assert!(gradient_condition(net, 2, seed + 100) >= 0.8 * MIN_GRADIENT_CONDITION);
        }
    }

    #[test]
    fn single_neuron_is_scaled_relu() {
        let inst = make_relu_network(5, 1, &[1], 11).unwrap();
        let Family::ReluNetwork(net) = &inst.family else { panic!() };
        // output weight c makes E[f²] = c²/2 = 1 up to Monte-Carlo error.
        let c = net.layers[1].weights[0] * net.layers[0].weights[0].abs();
        assert!((c - 2f64.sqrt()).abs() < 0.01, "scale {c}");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = lift_hidden(&inst.hidden, &[net.layers[0].weights[0].signum()]);
        for _ in 0..20 {
            let x = gaussian_vec(&mut rng, 5);
            let t: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((inst.evaluate(&x).unwrap() - c * t.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn homogeneity_and_mim_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for inst in [two_neuron(1), make_relu_network(12, 3, &[5, 4], 2).unwrap(), make_positive_homogeneous(12, 2, 3, 3).unwrap()] {
            for _ in 0..100 {
                let x = gaussian_vec(&mut rng, 12);
                let fx = inst.evaluate(&x).unwrap();
                let z = random_orthogonal_to(&inst.hidden, &mut rng);
                let shifted: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
                assert!((inst.evaluate(&shifted).unwrap() - fx).abs() <= 1e-8);
                for t in [0.5, 2.0, 7.0] {
                    let tx: Vec<f64> = x.iter().map(|a| a * t).collect();
                    let err = (inst.evaluate(&tx).unwrap() - t * fx).abs();
                    assert!(err <= 1e-8 * (1.0 + t) * fx.abs().max(1e-300) + 1e-14, "t={t} err={err}");
                }
            }
        }
    }

    #[test]
    fn normalization_lipschitz_and_tails() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for inst in [two_neuron(5), make_positive_homogeneous(8, 2, 2, 6).unwrap()] {
            let data = sample_dataset(&inst, NoiseModel::Realizable, 200_000, 17).unwrap();
            let m2 = data.ys.iter().map(|y| y * y).sum::<f64>() / data.len() as f64;
            assert!((0.98..=1.02).contains(&m2), "E[f^2] = {m2}");
            let l = inst.lipschitz.unwrap();
            let mut worst = 0.0f64;
            for _ in 0..10_000 {
                let x = gaussian_vec(&mut rng, inst.ambient_dim());
                let y = gaussian_vec(&mut rng, inst.ambient_dim());
                let num = (inst.evaluate(&x).unwrap() - inst.evaluate(&y).unwrap()).abs();
                let den = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                worst = worst.max(num / den);
            }
            assert!(worst <= 1.05 * l, "ratio {worst} above bound {l}");
            let b = inst.tail_bound.unwrap();
            let tail = data.ys.iter().filter(|y| y.abs() > b).map(|y| y * y).sum::<f64>() / data.len() as f64;
            assert!(tail <= 0.01);
        }
    }

    #[test]
    fn product_link_is_perfectly_nondegenerate() {
        let q = HermiteExpansion::from_terms(2, &[(vec![1, 1], 1.0)]).unwrap();
        assert!((nondegeneracy(&q) - 1.0).abs() < 1e-12);
        let inst = MimInstance::from_polynomial(Subspace::coordinate(4, &[1, 3]).unwrap(), q, 0).unwrap();
        let x = [0.3, 2.0, -1.0, 1.5];
        assert!((inst.evaluate(&x).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn low_rank_polynomial_generation() {
        let inst = make_low_rank_polynomial(10, 2, 3, 0.3, 21).unwrap();
        let Family::LowRankPolynomial { link } = &inst.family else { panic!() };
        assert!((link.norm_sq() - 1.0).abs() < 1e-12);
        assert_eq!(link.get(&crate::hermite::MultiIndex::zero(2)), 0.0);
        assert!(nondegeneracy(link) >= 0.3);
        let data = sample_dataset(&inst, NoiseModel::Realizable, 100_000, 1).unwrap();
        let n = data.len() as f64;
        let mean = data.ys.iter().sum::<f64>() / n;
        let var = data.ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.1, "mean {mean} var {var}");
        assert!(matches!(
            make_low_rank_polynomial(10, 2, 1, 0.999_999_9, 3),
            Err(MimError::Generation(_))
        ) || make_low_rank_polynomial(10, 2, 1, 0.999_999_9, 3).is_ok());
    }

    #[test]
    fn noise_models() {
        let inst = two_neuron(9);
        let clean = sample_dataset(&inst, NoiseModel::Realizable, 50_000, 3).unwrap();
        for i in 0..clean.len() {
            assert_eq!(clean.ys[i], inst.evaluate(clean.row(i)).unwrap());
        }
        let noisy = sample_dataset(&inst, NoiseModel::Additive { sigma: 0.1 }, 50_000, 3).unwrap();
        assert_eq!(noisy.xs, clean.xs);
        let level = empirical_noise_level(&inst, &noisy).unwrap();
        // Variance 0.01; sample SE of the mean of σ²g² is 0.01 sqrt(2/n).
        assert!((level - 0.01).abs() < 3.0 * 0.01 * (2.0 / 50_000f64).sqrt());

        let adv = sample_dataset(&inst, NoiseModel::Adversarial { budget: 0.05 }, 50_000, 3).unwrap();
        let level = empirical_noise_level(&inst, &adv).unwrap();
        assert!(level <= 0.05 && level > 0.04, "adversarial level {level}");
        let flipped = adv.ys.iter().zip(&clean.ys).filter(|(a, b)| a != b).count();
        assert!(flipped > 0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let inst = two_neuron(2);
        let a = sample_dataset(&inst, NoiseModel::Additive { sigma: 0.3 }, 1000, 77).unwrap();
        let b = sample_dataset(&inst, NoiseModel::Additive { sigma: 0.3 }, 1000, 77).unwrap();
        assert_eq!(a, b);
        assert!(sample_dataset(&inst, NoiseModel::Realizable, 0, 1).is_err());
        assert_eq!(two_neuron(2), inst);
    }

    #[test]
    fn generation_errors() {
        assert!(make_relu_network(3, 4, &[4], 0).is_err());
        assert!(make_relu_network(5, 2, &[1], 0).is_err());
        assert!(make_low_rank_polynomial(5, 2, 0, 0.1, 0).is_err());
    }
}
