//! Moment-based hardness estimators: the generative exponent of a link, the
//! relative moment-matching defect of a labeled sample, and the filtered
//! second-moment matrix.
//!
//! Squared norms of conditional means are estimated without the `s²/n` bias of
//! the plug-in estimate; both are reported.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discretization::CubePartition;
use crate::error::{check_dim, MimError, Result};
use crate::hermite::{hermite_table, HermiteBasis, DEFAULT_BASIS_CAP};
use crate::subspace::Subspace;
use crate::synthetic::LabeledDataset;

pub const MIN_BIN_COUNT: usize = 30;
pub const DEFAULT_THRESHOLD: f64 = 0.02;
pub const DEFAULT_WORKING_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub bin_width: f64,
    /// Cube width for conditioning on `x_V`.
    pub cube_width: f64,
    pub threshold: f64,
    pub working_dim: usize,
    pub min_bin_count: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            bin_width: 0.1,
            cube_width: 0.5,
            threshold: DEFAULT_THRESHOLD,
            working_dim: DEFAULT_WORKING_DIM,
            min_bin_count: MIN_BIN_COUNT,
        }
    }
}

impl DiagnosticsConfig {
    fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0) || !(self.threshold >= 0.0) || self.min_bin_count == 0 {
            return Err(MimError::Config(
                "bin width must be positive, threshold nonnegative, bin minimum at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mass-weighted squared norm of group means with its bias correction.
#[derive(Debug, Clone, Copy, Default)]
struct NormEstimate {
    debiased: f64,
    plug_in: f64,
    variance: f64,
}

impl NormEstimate {
    fn value(&self) -> f64 {
        self.debiased.max(0.0).sqrt()
    }

    fn raw(&self) -> f64 {
        self.plug_in.max(0.0).sqrt()
    }

    /// Delta-method SE of the norm, floored at the fourth root of the
    /// estimator variance where the norm is near 0.
    fn se(&self) -> f64 {
        let sd = self.variance.max(0.0).sqrt();
        let v = self.value();
        let floor = sd.sqrt();
        if v > floor {
            sd / (2.0 * v)
        } else {
            floor
        }
    }
}

/// Running sums for one group and one feature.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    /// `(mean, sample variance)`.
    fn stats(&self) -> (f64, f64) {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 {
            ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        (mean, var)
    }
}

fn accumulate(groups: &[Vec<Moments>], total: usize) -> Vec<NormEstimate> {
    let features = groups.first().map_or(0, Vec::len);
    let mut out = vec![NormEstimate::default(); features];
    let total = total as f64;
    for g in groups {
        let nb = g[0].n as f64;
        let p = nb / total;
        for (f, m) in g.iter().enumerate() {
            let (mean, var) = m.stats();
            let e = &mut out[f];
            e.plug_in += p * mean * mean;
            e.debiased += p * (mean * mean - var / nb);
            e.variance += p * p * (4.0 * mean * mean * var / nb + 2.0 * var * var / (nb * nb));
        }
    }
    out
}

/// Merges consecutive bins (in key order) until each holds `min` points;
/// a short remainder joins the previous group. Returns whether anything was
/// merged.
fn merge_small<K: Ord + Clone>(bins: BTreeMap<K, Vec<Moments>>, min: usize) -> (Vec<Vec<Moments>>, bool) {
    let mut out: Vec<Vec<Moments>> = Vec::new();
    let mut pending: Option<Vec<Moments>> = None;
    let mut merged = false;
    for (_, g) in bins {
        let cur = match pending.take() {
            Some(mut p) => {
                merged = true;
                p.iter_mut().zip(&g).for_each(|(a, b)| a.merge(b));
                p
            }
            None => g,
        };
        if cur[0].n >= min {
            out.push(cur);
        } else {
            pending = Some(cur);
        }
    }
    if let Some(p) = pending {
        merged = true;
        match out.last_mut() {
            Some(last) => last.iter_mut().zip(&p).for_each(|(a, b)| a.merge(b)),
            None => out.push(p),
        }
    }
    (out, merged)
}

/// `‖E[h_k(t) | y]‖` over the label law, for `k = 1..=m_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMomentProfile {
    pub degrees: Vec<usize>,
    /// Bias-corrected values.
    pub values: Vec<f64>,
    /// Plug-in values.
    pub raw: Vec<f64>,
    pub se: Vec<f64>,
    pub bin_width: f64,
    pub sample_count: usize,
    pub bins: usize,
    pub warnings: Vec<String>,
}

impl ConditionalMomentProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("degree,value,se,raw\n");
        for i in 0..self.degrees.len() {
            let _ = writeln!(s, "{},{},{},{}", self.degrees[i], self.values[i], self.se[i], self.raw[i]);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerativeExponent {
    Found(usize),
    NotFound,
}

/// Profile of `(t, y)` samples and the smallest degree whose value exceeds
/// `threshold + 3 SE`.
pub fn generative_exponent(
    t: &[f64],
    y: &[f64],
    m_max: usize,
    config: &DiagnosticsConfig,
) -> Result<(GenerativeExponent, ConditionalMomentProfile)> {
    config.validate()?;
    check_dim(t.len(), y.len())?;
    if m_max == 0 {
        return Err(MimError::Config("m_max must be at least 1".into()));
    }
    if t.is_empty() {
        return Err(MimError::Config("no samples".into()));
    }
    let mut bins: BTreeMap<i64, Vec<Moments>> = BTreeMap::new();
    let mut table = vec![0.0; m_max + 1];
    for (&ti, &yi) in t.iter().zip(y) {
        if !ti.is_finite() || !yi.is_finite() {
            return Err(MimError::Config("samples must be finite".into()));
        }
        hermite_table(ti, &mut table);
        let b = bins
            .entry((yi / config.bin_width).floor() as i64)
            .or_insert_with(|| vec![Moments::default(); m_max]);
        for k in 1..=m_max {
            b[k - 1].push(table[k]);
        }
    }
    let (groups, merged) = merge_small(bins, config.min_bin_count);
    let mut warnings = Vec::new();
    if merged {
        warnings.push(format!(
            "label bins with fewer than {} samples were merged into neighbours",
            config.min_bin_count
        ));
    }
    let est = accumulate(&groups, t.len());
    let profile = ConditionalMomentProfile {
        degrees: (1..=m_max).collect(),
        values: est.iter().map(NormEstimate::value).collect(),
        raw: est.iter().map(NormEstimate::raw).collect(),
        se: est.iter().map(NormEstimate::se).collect(),
        bin_width: config.bin_width,
        sample_count: t.len(),
        bins: groups.len(),
        warnings,
    };
    let found = (0..m_max)
        .find(|&i| profile.values[i] > config.threshold + 3.0 * profile.se[i])
        .map_or(GenerativeExponent::NotFound, |i| GenerativeExponent::Found(i + 1));
    Ok((found, profile))
}

/// Samples `t ~ N(0, 1)`, labels `y = link(t)`, and profiles the pair.
pub fn generative_exponent_of_link(
    link: impl Fn(f64) -> f64,
    n: usize,
    seed: u64,
    m_max: usize,
    config: &DiagnosticsConfig,
) -> Result<(GenerativeExponent, ConditionalMomentProfile)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = t.iter().map(|&v| link(v)).collect();
    generative_exponent(&t, &y, m_max, config)
}

/// Named scalar links used by the CLI.
pub fn named_link(name: &str) -> Option<fn(f64) -> f64> {
    Some(match name {
        "identity" => |t| t,
        "square" => |t| t * t,
        "abs" | "absolute" => f64::abs,
        "relu" => |t: f64| t.max(0.0),
        "cubic" => |t| t * t * t + t,
        "sign" => f64::signum,
        "he3" => |t| t * t * t - 3.0 * t,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentDefect {
    /// Bias-corrected defect, clamped at 0.
    pub nu_hat: f64,
    /// Plug-in defect.
    pub raw: f64,
    pub se: f64,
    pub degree: usize,
    pub working_dim: usize,
    pub groups: usize,
    pub sample_count: usize,
    pub warnings: Vec<String>,
}

impl MomentDefect {
    pub fn to_csv(&self) -> String {
        format!(
            "degree,working_dim,nu_hat,se,raw,groups,n\n{},{},{},{},{},{},{}\n",
            self.degree, self.working_dim, self.nu_hat, self.se, self.raw, self.groups, self.sample_count
        )
    }
}

/// Root mass-weighted squared norm of the conditional means of all `H_α` with
/// `1 <= |α| <= m`, over cells of `V` crossed with label bins. `frame` selects
/// the `V^⊥` coordinates; by default the first `working_dim` columns of the
/// canonical complement frame.
pub fn moment_match_defect(
    data: &LabeledDataset,
    v: &Subspace,
    m: usize,
    frame: Option<&DMatrix<f64>>,
    config: &DiagnosticsConfig,
) -> Result<MomentDefect> {
    config.validate()?;
    check_dim(data.dim, v.ambient_dim())?;
    if m == 0 {
        return Err(MimError::Config("degree must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(MimError::Config("dataset is empty".into()));
    }
    let frame = match frame {
        Some(f) => {
            check_dim(data.dim, f.nrows())?;
            f.clone()
        }
        None => {
            let full = v.complement_frame();
            let w = config.working_dim.min(full.ncols());
            full.columns(0, w).into_owned()
        }
    };
    let dim = frame.ncols();
    if dim == 0 {
        return Err(MimError::Config("no coordinates orthogonal to V".into()));
    }
    let basis = HermiteBasis::new(dim, m, DEFAULT_BASIS_CAP)?;
    let features = basis.len() - 1;
    let cubes = CubePartition::new(v.clone(), config.cube_width, 0.0)?;
    let vc = data.project_rows(v.basis())?;
    let z = data.project_rows(&frame)?;
    let k = v.dim();
    let mut table = vec![0.0; basis.table_len()];
    let mut h = vec![0.0; basis.len()];
    let mut cells: BTreeMap<Option<Vec<u32>>, BTreeMap<i64, Vec<Moments>>> = BTreeMap::new();
    for i in 0..data.len() {
        let cube = cubes.locate_coords(&vc[i * k..(i + 1) * k]);
        let bin = (data.ys[i] / config.bin_width).floor() as i64;
        basis.eval_all(&z[i * dim..(i + 1) * dim], &mut table, &mut h);
        let g = cells
            .entry(cube)
            .or_default()
            .entry(bin)
            .or_insert_with(|| vec![Moments::default(); features]);
        for (acc, &val) in g.iter_mut().zip(&h[1..]) {
            acc.push(val);
        }
    }
    let mut groups = Vec::new();
    let mut merged_any = false;
    for (_, bins) in cells {
        let (g, merged) = merge_small(bins, config.min_bin_count);
        merged_any |= merged;
        groups.extend(g);
    }
    let mut warnings = Vec::new();
    if merged_any {
        warnings.push(format!(
            "label bins with fewer than {} samples were merged into neighbours",
            config.min_bin_count
        ));
    }
    if groups.iter().any(|g| g[0].n < config.min_bin_count) {
        warnings.push("some cells hold fewer samples than the bin minimum".into());
    }
    let per_feature = accumulate(&groups, data.len());
    let total = per_feature.iter().fold(NormEstimate::default(), |a, e| NormEstimate {
        debiased: a.debiased + e.debiased,
        plug_in: a.plug_in + e.plug_in,
        variance: a.variance + e.variance,
    });
    Ok(MomentDefect {
        nu_hat: total.value(),
        raw: total.raw(),
        se: total.se(),
        degree: m,
        working_dim: dim,
        groups: groups.len(),
        sample_count: data.len(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredMoment {
    /// `E[T (x_⊥ x_⊥^T - Π_⊥)]` in `R^{d x d}`.
    pub matrix: DMatrix<f64>,
    /// Share of samples with `T = 1`.
    pub active_fraction: f64,
    pub sample_count: usize,
}

impl FilteredMoment {
    /// Frobenius norm expected from sampling noise alone when the matrix is 0
    /// in population: `sqrt(p (d'^2 + d') / n)`.
    pub fn null_frobenius(&self, complement_dim: usize) -> f64 {
        let dp = complement_dim as f64;
        (self.active_fraction * (dp * dp + dp) / self.sample_count as f64).sqrt()
    }

    pub fn to_csv(&self) -> String {
        let d = self.matrix.ncols();
        let mut s = (0..d).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",");
        s.push('\n');
        for i in 0..self.matrix.nrows() {
            let row: Vec<String> = (0..d).map(|j| self.matrix[(i, j)].to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

fn active(data: &LabeledDataset, v: &Subspace, f_on_v: &dyn Fn(&[f64]) -> f64, tau: f64) -> Result<Vec<bool>> {
    if !(tau > 0.0) {
        return Err(MimError::Config(format!("tau must be positive, got {tau}")));
    }
    check_dim(data.dim, v.ambient_dim())?;
    let vc = data.project_rows(v.basis())?;
    let k = v.dim();
    Ok((0..data.len())
        .map(|i| (data.ys[i] - f_on_v(&vc[i * k..(i + 1) * k])).abs() > tau)
        .collect())
}

/// Filtered second moment with `T = 1(|y - f(x_V)| > τ)`; `f_on_v` receives
/// the coordinates of `x_V` in the basis of `v`.
pub fn filtered_second_moment(
    data: &LabeledDataset,
    v: &Subspace,
    f_on_v: &dyn Fn(&[f64]) -> f64,
    tau: f64,
) -> Result<FilteredMoment> {
    if data.is_empty() {
        return Err(MimError::Config("dataset is empty".into()));
    }
    let t = active(data, v, f_on_v, tau)?;
    let frame = v.complement_frame();
    let dp = frame.ncols();
    let z = data.project_rows(&frame)?;
    let mut inner = DMatrix::zeros(dp, dp);
    let mut count = 0usize;
    for (i, &on) in t.iter().enumerate() {
        if !on {
            continue;
        }
        count += 1;
        let zi = nalgebra::DVector::from_column_slice(&z[i * dp..(i + 1) * dp]);
        inner.syger(1.0, &zi, &zi, 1.0);
    }
    inner.fill_upper_triangle_with_lower_triangle();
    for j in 0..dp {
        inner[(j, j)] -= count as f64;
    }
    inner /= data.len() as f64;
    let matrix = &frame * inner * frame.transpose();
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    Ok(FilteredMoment {
        matrix,
        active_fraction: count as f64 / data.len() as f64,
        sample_count: data.len(),
    })
}

/// `(w^T M w, SE)` computed per sample as `T ((w·x_⊥)² - ‖Π_⊥ w‖²)`.
pub fn filtered_quadratic_form(
    data: &LabeledDataset,
    v: &Subspace,
    f_on_v: &dyn Fn(&[f64]) -> f64,
    tau: f64,
    w: &[f64],
) -> Result<(f64, f64)> {
    check_dim(data.dim, w.len())?;
    if data.len() < 2 {
        return Err(MimError::Config("need at least two samples".into()));
    }
    let t = active(data, v, f_on_v, tau)?;
    let wp = v.project_complement(w)?;
    let norm = wp.iter().map(|a| a * a).sum::<f64>();
    let vals: Vec<f64> = (0..data.len())
        .map(|i| {
            if t[i] {
                let p: f64 = data.row(i).iter().zip(&wp).map(|(a, b)| a * b).sum();
                p * p - norm
            } else {
                0.0
            }
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, d: usize, seed: u64, label: impl Fn(&[f64], f64) -> f64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ys = xs
            .chunks(d)
            .map(|x| {
                let g: f64 = StandardNormal.sample(&mut rng);
                label(x, g)
            })
            .collect();
        LabeledDataset::new(d, xs, ys).unwrap()
    }

    #[test]
    fn exponent_examples() {
        let cfg = DiagnosticsConfig::default();
        for (name, expect) in [("identity", 1), ("square", 2), ("abs", 2), ("he3", 1)] {
            let link = named_link(name).unwrap();
            let (m, p) = generative_exponent_of_link(link, 100_000, 3, 4, &cfg).unwrap();
            assert_eq!(m, GenerativeExponent::Found(expect), "{name}: {p:?}");
            assert!(p.values.iter().all(|v| *v >= 0.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (m, p) = generative_exponent(&t, &y, 4, &cfg).unwrap();
        assert_eq!(m, GenerativeExponent::NotFound);
        assert_eq!(p.values.len(), 4);
    }

    #[test]
    fn exponent_is_relabeling_invariant() {
        let cfg = DiagnosticsConfig::default();
        let (a, pa) = generative_exponent_of_link(|t| t, 100_000, 5, 3, &cfg).unwrap();
        let (b, pb) = generative_exponent_of_link(|t| t * t * t + t, 100_000, 5, 3, &cfg).unwrap();
        assert_eq!(a, GenerativeExponent::Found(1));
        assert_eq!(a, b);
        let tol = pa.se[0] + pb.se[0] + cfg.bin_width * cfg.bin_width / 12.0;
        assert!((pa.values[0] - pb.values[0]).abs() <= tol, "{pa:?} {pb:?}");
    }

    #[test]
    fn sparse_bins_are_merged_with_warning() {
        let t = [0.1, -0.3, 0.5, 1.0];
        let y = [0.0, 5.0, 10.0, 20.0];
        let (_, p) = generative_exponent(&t, &y, 2, &DiagnosticsConfig::default()).unwrap();
        assert_eq!(p.bins, 1);
        assert_eq!(p.warnings.len(), 1);
        assert!(generative_exponent(&t, &y[..3], 2, &DiagnosticsConfig::default()).is_err());
    }

    #[test]
    fn defect_examples() {
        let cfg = DiagnosticsConfig::default();
        let indep = gaussian(200_000, 4, 1, |_, g| g);
        let d = moment_match_defect(&indep, &Subspace::trivial(4), 2, None, &cfg).unwrap();
        assert!(d.nu_hat <= 3.0 * d.se, "{d:?}");

        let sq = gaussian(200_000, 4, 2, |x, _| x[1] * x[1]);
        let v = Subspace::coordinate(4, &[0]).unwrap();
        let d = moment_match_defect(&sq, &v, 2, None, &cfg).unwrap();
        assert!(d.nu_hat > 0.5, "{d:?}");
        let d1 = moment_match_defect(&sq, &v, 1, None, &cfg).unwrap();
        assert!(d1.nu_hat < 0.05, "{d1:?}");

        let on_v = gaussian(200_000, 4, 3, |x, _| x[0].abs());
        let d = moment_match_defect(&on_v, &v, 2, None, &cfg).unwrap();
        assert!(d.nu_hat <= 3.0 * d.se + 0.01, "{d:?}");
        assert!(d.to_csv().starts_with("degree,"));
    }

    #[test]
    fn filtered_moment_properties() {
        let v = Subspace::coordinate(5, &[1]).unwrap();
        let data = gaussian(50_000, 5, 4, |x, _| 2.0 * x[0].max(0.0) + x[1]);
        let f = |c: &[f64]| c[0];
        let m = filtered_second_moment(&data, &v, &f, 1.0).unwrap();
        assert!((&m.matrix - m.matrix.transpose()).norm() == 0.0);
        for j in 0..5 {
            assert!(m.matrix[(1, j)].abs() < 1e-12 && m.matrix[(j, 1)].abs() < 1e-12);
        }
        let top = m.matrix.clone().symmetric_eigen();
        let i = top.eigenvalues.imax();
        assert!(top.eigenvectors[(0, i)].abs() > 0.95);
        let (q, se) = filtered_quadratic_form(&data, &v, &f, 1.0, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((q - m.matrix[(0, 0)]).abs() < 1e-9 && q > 3.0 * se);

        let exact = gaussian(20_000, 5, 5, |x, _| x[1].abs());
        let m = filtered_second_moment(&exact, &v, &|c: &[f64]| c[0].abs(), 0.5).unwrap();
        assert_eq!(m.matrix.norm(), 0.0);
        assert!(m.to_csv().lines().count() == 6);
        assert!(filtered_second_moment(&exact, &v, &f, 0.0).is_err());
    }
}
