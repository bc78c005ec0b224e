//! Reproducible experiments: spec -> instances and datasets -> learner ->
//! metrics, with serialized records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{generative_exponent_of_link, DiagnosticsConfig, GenerativeExponent};
use crate::error::{MimError, Result};
use crate::hermite::{gauss_hermite, hermite_univariate, HermiteExpansion};
use crate::io::{canonical_hash, read_dataset, write_dataset, write_json, DatasetHeader, FORMAT_VERSION};
use crate::learner::{evaluate, learn, EvalMetrics, IterationTrace, LearnerConfig, LearnerMode, PiecewiseConstantHypothesis};
use crate::subspace::{orthonormalize, potential, principal_angles, DirectionList, Subspace};
use crate::synthetic::{
    make_low_rank_polynomial, make_positive_homogeneous, make_relu_network_with, sample_dataset, LabeledDataset,
    MimInstance, NoiseModel, MIN_GRADIENT_CONDITION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    ReluNetwork,
    PositiveHomogeneous,
    LowRankPolynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSpec {
    pub family: FamilyKind,
    pub d: usize,
    pub k: usize,
    /// Hidden widths of a ReLU network; empty means one layer of width `k`.
    pub widths: Vec<usize>,
    /// Number of `|a·z|` terms of a positive-homogeneous target.
    pub terms: usize,
    /// Degree of a low-rank polynomial link.
    pub degree: usize,
    /// Required `λ_min/λ_max` of the polynomial's gradient moment matrix.
    pub alpha: f64,
    /// Required `λ_min/λ_max` of a network's gradient moment matrix.
    pub min_gradient_condition: f64,
    pub seed: u64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        InstanceSpec {
            family: FamilyKind::ReluNetwork,
            d: 20,
            k: 2,
            widths: Vec::new(),
            terms: 3,
            degree: 2,
            alpha: 0.2,
            min_gradient_condition: MIN_GRADIENT_CONDITION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub instance: InstanceSpec,
    pub noise: NoiseModel,
    pub learner: LearnerConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Not part of the spec hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            instance: InstanceSpec::default(),
            noise: NoiseModel::Realizable,
            learner: LearnerConfig {
                mode: LearnerMode::FastM2,
                max_iters: 4,
                fit_width: Some(0.01),
                ..Default::default()
            },
            n_train: 200_000,
            n_eval: 100_000,
            repetitions: 1,
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let i = &self.instance;
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(MimError::Config("sample budgets must be positive".into()));
        }
        if self.repetitions == 0 {
            return Err(MimError::Config("repetitions must be at least 1".into()));
        }
        if i.k == 0 || i.k > i.d {
            return Err(MimError::Config(format!("need 1 <= K <= d, got K = {}, d = {}", i.k, i.d)));
        }
        match self.noise {
            NoiseModel::Additive { sigma } if !(sigma >= 0.0) => {
                return Err(MimError::Config("noise sigma must be nonnegative".into()))
            }
            NoiseModel::Adversarial { budget } if !(budget >= 0.0) => {
                return Err(MimError::Config("adversarial budget must be nonnegative".into()))
            }
            _ => {}
        }
        self.learner.validate()
    }

    /// SHA-256 of the canonical spec, output directory excluded.
    pub fn hash(&self) -> Result<String> {
        let mut s = self.clone();
        s.output_dir = None;
        canonical_hash(&s)
    }
}

/// SplitMix64 finalizer over `(base, rep, stream)`.
pub fn derive_seed(base: u64, rep: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(rep.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(stream.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepSeeds {
    pub instance: u64,
    pub train: u64,
    pub eval: u64,
}

impl RepSeeds {
    pub fn for_rep(spec: &ExperimentSpec, rep: usize) -> Self {
        RepSeeds {
            instance: derive_seed(spec.instance.seed, rep as u64, 0),
            train: derive_seed(spec.seed, rep as u64, 1),
            eval: derive_seed(spec.seed, rep as u64, 2),
        }
    }
}

pub fn build_instance(spec: &InstanceSpec, seed: u64) -> Result<MimInstance> {
    match spec.family {
        FamilyKind::ReluNetwork => {
            let widths = if spec.widths.is_empty() { vec![spec.k] } else { spec.widths.clone() };
            make_relu_network_with(spec.d, spec.k, &widths, seed, spec.min_gradient_condition)
        }
        FamilyKind::PositiveHomogeneous => make_positive_homogeneous(spec.d, spec.k, spec.terms, seed),
        FamilyKind::LowRankPolynomial => make_low_rank_polynomial(spec.d, spec.k, spec.degree, spec.alpha, seed),
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedRep {
    pub rep: usize,
    pub seeds: RepSeeds,
    pub instance: MimInstance,
    pub train: LabeledDataset,
    pub eval: LabeledDataset,
}

pub fn generate_repetition(spec: &ExperimentSpec, rep: usize) -> Result<GeneratedRep> {
    let seeds = RepSeeds::for_rep(spec, rep);
    let instance = build_instance(&spec.instance, seeds.instance)?;
    let train = sample_dataset(&instance, spec.noise, spec.n_train, seeds.train)?;
    // Evaluation labels carry the same noise model as training labels.
    let eval = sample_dataset(&instance, spec.noise, spec.n_eval, seeds.eval)?;
    Ok(GeneratedRep {
        rep,
        seeds,
        instance,
        train,
        eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub rep: usize,
    pub seeds: RepSeeds,
    pub eval: EvalMetrics,
    pub recovered_dim: usize,
    pub principal_angles_deg: Option<Vec<f64>>,
    pub max_angle_deg: Option<f64>,
    pub trace: IterationTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub format_version: u32,
    pub spec_hash: String,
    pub version: String,
    pub seed: u64,
    pub spec: ExperimentSpec,
    pub repetitions: Vec<RepetitionRecord>,
}

/// Hypotheses (one per repetition) together with the experiment record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisDocument {
    pub format_version: u32,
    pub spec_hash: String,
    pub hypotheses: Vec<PiecewiseConstantHypothesis>,
    pub record: ExperimentRecord,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub document: HypothesisDocument,
    /// Wall seconds per repetition and iteration.
    pub timings: Vec<Vec<f64>>,
}

fn angles_deg(a: &Subspace, b: &Subspace) -> Option<Vec<f64>> {
    if a.dim() == 0 || b.dim() == 0 {
        return None;
    }
    principal_angles(a, b)
        .ok()
        .map(|v| v.into_iter().map(f64::to_degrees).collect())
}

/// Learns one repetition and scores it on `eval`, against `truth` when known.
pub fn learn_repetition(
    spec: &ExperimentSpec,
    rep: usize,
    seeds: RepSeeds,
    train: &LabeledDataset,
    eval: &LabeledDataset,
    truth: Option<&MimInstance>,
) -> Result<(PiecewiseConstantHypothesis, RepetitionRecord, Vec<f64>)> {
    let out = learn(train, &spec.learner, truth)?;
    let metrics = evaluate(&out.hypothesis, eval, truth)?;
    let v = out.hypothesis.subspace().clone();
    let angles = truth.and_then(|t| angles_deg(&v, &t.hidden));
    let max_angle = truth.map(|t| match &angles {
        Some(a) => a.iter().copied().fold(0.0, f64::max),
        None if t.hidden.dim() == 0 => 0.0,
        None => 90.0,
    });
    let timings = out.trace.records.iter().map(|r| r.wall_seconds).collect();
    let record = RepetitionRecord {
        rep,
        seeds,
        eval: metrics,
        recovered_dim: v.dim(),
        principal_angles_deg: angles,
        max_angle_deg: max_angle,
        trace: out.trace,
    };
    Ok((out.hypothesis, record, timings))
}

fn assemble(spec: &ExperimentSpec, results: Vec<(PiecewiseConstantHypothesis, RepetitionRecord, Vec<f64>)>) -> Result<ExperimentOutcome> {
    let hash = spec.hash()?;
    let mut hypotheses = Vec::new();
    let mut reps = Vec::new();
    let mut timings = Vec::new();
    for (h, r, t) in results {
        hypotheses.push(h);
        reps.push(r);
        timings.push(t);
    }
    let mut stored = spec.clone();
    stored.output_dir = None;
    Ok(ExperimentOutcome {
        document: HypothesisDocument {
            format_version: FORMAT_VERSION,
            spec_hash: hash.clone(),
            hypotheses,
            record: ExperimentRecord {
                format_version: FORMAT_VERSION,
                spec_hash: hash,
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed: spec.seed,
                spec: stored,
                repetitions: reps,
            },
        },
        timings,
    })
}

/// Generates and learns every repetition in parallel; results are collected in
/// repetition order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let results = (0..spec.repetitions)
        .into_par_iter()
        .map(|rep| {
            let g = generate_repetition(spec, rep)?;
            learn_repetition(spec, rep, g.seeds, &g.train, &g.eval, Some(&g.instance))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(spec, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rep: usize,
    pub seeds: RepSeeds,
    pub instance: MimInstance,
    pub train_file: String,
    pub eval_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec_hash: String,
    pub spec: ExperimentSpec,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HYPOTHESIS_FILE: &str = "hypothesis.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Writes `train_r{rep}.mimd`, `eval_r{rep}.mimd` and the manifest into `dir`.
pub fn write_generated(spec: &ExperimentSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let hash = spec.hash()?;
    let reps = (0..spec.repetitions)
        .into_par_iter()
        .map(|rep| generate_repetition(spec, rep))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    for g in reps {
        let train_file = format!("train_r{}.mimd", g.rep);
        let eval_file = format!("eval_r{}.mimd", g.rep);
        write_dataset(&dir.join(&train_file), &g.train, &DatasetHeader::describe(&g.train, "train", Some(&hash)))?;
        write_dataset(&dir.join(&eval_file), &g.eval, &DatasetHeader::describe(&g.eval, "eval", Some(&hash)))?;
        entries.push(ManifestEntry {
            rep: g.rep,
            seeds: g.seeds,
            instance: g.instance,
            train_file,
            eval_file,
        });
    }
    let mut stored = spec.clone();
    stored.output_dir = None;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec_hash: hash,
        spec: stored,
        entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset and checks it belongs to `expected_hash`.
pub fn read_checked(path: &Path, expected_hash: &str, force: bool) -> Result<LabeledDataset> {
    let (h, data) = read_dataset(path)?;
    if !force && h.spec_hash.as_deref() != Some(expected_hash) {
        return Err(MimError::Config(format!(
            "{} was produced by spec {}, expected {expected_hash}",
            path.display(),
            h.spec_hash.as_deref().unwrap_or("<none>")
        )));
    }
    Ok(data)
}

/// Learns every repetition listed in a manifest from its dataset files.
pub fn learn_from_manifest(manifest: &Manifest, dir: &Path, learner: Option<&LearnerConfig>) -> Result<ExperimentOutcome> {
    let mut spec = manifest.spec.clone();
    if let Some(l) = learner {
        spec.learner = l.clone();
    }
    spec.validate()?;
    let results = manifest
        .entries
        .par_iter()
        .map(|e| {
            let train = read_checked(&dir.join(&e.train_file), &manifest.spec_hash, false)?;
            let eval = read_checked(&dir.join(&e.eval_file), &manifest.spec_hash, false)?;
            learn_repetition(&spec, e.rep, e.seeds, &train, &eval, Some(&e.instance))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = assemble(&spec, results)?;
    // Datasets came from the manifest's spec; keep its hash on every output.
    out.document.spec_hash = manifest.spec_hash.clone();
    out.document.record.spec_hash = manifest.spec_hash.clone();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rep: usize,
    pub metrics: EvalMetrics,
    pub principal_angles_deg: Option<Vec<f64>>,
    pub potential: Option<f64>,
}

pub fn eval_report(rep: usize, h: &PiecewiseConstantHypothesis, data: &LabeledDataset, truth: Option<&MimInstance>) -> Result<EvalReport> {
    let metrics = evaluate(h, data, truth)?;
    Ok(EvalReport {
        rep,
        metrics,
        principal_angles_deg: truth.and_then(|t| angles_deg(h.subspace(), &t.hidden)),
        potential: truth.map(|t| potential(&t.hidden, h.subspace())).transpose()?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(spec_hash: &str, reports: &[EvalReport]) -> String {
    let mut s = String::from("spec_hash,rep,n,mse,mse_vs_clean,coverage,max_angle_deg,potential\n");
    for r in reports {
        let max_angle = r
            .principal_angles_deg
            .as_ref()
            .map(|a| a.iter().copied().fold(0.0, f64::max));
        let _ = writeln!(
            s,
            "{spec_hash},{},{},{},{},{},{},{}",
            r.rep,
            r.metrics.n,
            r.metrics.mse,
            opt(r.metrics.mse_vs_clean),
            r.metrics.coverage_fraction,
            opt(max_angle),
            opt(r.potential)
        );
    }
    s
}

/// Long-format iteration trace; row `iteration = 0` describes `V_0`.
pub fn trace_csv(record: &ExperimentRecord) -> String {
    let mut s = String::from(
        "spec_hash,rep,iteration,dim_before,dim_after,added,threshold,null_level,top_eigenvalue,frobenius,cells_used,cells_skipped,pairs_used,error,potential\n",
    );
    for r in &record.repetitions {
        let t = &r.trace;
        let _ = writeln!(
            s,
            "{},{},0,{},{},0,,,,,,,,{},{}",
            record.spec_hash,
            r.rep,
            t.initial_dim,
            t.initial_dim,
            t.initial_error,
            opt(t.initial_potential)
        );
        for it in &t.records {
            let rep = &it.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                record.spec_hash,
                r.rep,
                it.iteration,
                it.dim_before,
                it.dim_after,
                it.added.len(),
                rep.threshold,
                rep.null_level,
                opt(rep.eigenvalues.first().copied()),
                rep.frobenius,
                rep.cells_used,
                rep.cells_skipped,
                rep.pairs_used,
                it.error,
                opt(it.potential)
            );
        }
    }
    s
}

pub fn timing_csv(spec_hash: &str, timings: &[Vec<f64>]) -> String {
    let mut s = String::from("spec_hash,rep,iteration,wall_seconds\n");
    for (rep, ts) in timings.iter().enumerate() {
        for (i, t) in ts.iter().enumerate() {
            let _ = writeln!(s, "{spec_hash},{rep},{},{t}", i + 1);
        }
    }
    s
}

/// Writes `hypothesis.json`, `trace.csv` and `timing.csv` into `dir`.
pub fn write_outcome(out: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(HYPOTHESIS_FILE), &out.document)?;
    std::fs::write(dir.join(TRACE_FILE), trace_csv(&out.document.record))?;
    std::fs::write(dir.join(TIMING_FILE), timing_csv(&out.document.spec_hash, &out.timings))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Fast invariant checks for installation sanity.
pub fn selftest() -> Vec<CheckResult> {
    vec![
        check("hermite_orthonormality", || {
            let (x, w) = gauss_hermite(30);
            let mut worst = 0.0f64;
            for i in 0..=10 {
                for j in 0..=10 {
                    let ip: f64 = x
                        .iter()
                        .zip(&w)
                        .map(|(&t, &wt)| wt * hermite_univariate(i, t) * hermite_univariate(j, t))
                        .sum();
                    worst = worst.max((ip - if i == j { 1.0 } else { 0.0 }).abs());
                }
            }
            Ok((worst <= 1e-10, format!("max deviation {worst:.2e}")))
        }),
        check("influence_diagonal", || {
            let p = HermiteExpansion::from_terms(3, &[(vec![1, 0, 0], 0.5), (vec![1, 2, 0], 0.3), (vec![0, 0, 3], -0.2)])?;
            let m = p.influence_matrix();
            let expect = [0.25 + 0.09, 2.0 * 0.09, 3.0 * 0.04];
            let dev = (0..3).map(|i| (m[(i, i)] - expect[i]).abs()).fold(0.0, f64::max);
            Ok((dev <= 1e-12, format!("max deviation {dev:.2e}")))
        }),
        check("orthonormalize", || {
            let v = Subspace::coordinate(4, &[0])?;
            let list = DirectionList::new_unnormalized(4, &[vec![1.0, 1.0, 0.0, 0.0], vec![2.0, 2.0, 0.0, 0.0]])?;
            let s = orthonormalize(&list, &v, 1e-8);
            let gram = s.basis().transpose() * s.basis();
            let dev = (gram - nalgebra::DMatrix::identity(2, 2)).norm();
            Ok((s.dim() == 2 && dev < 1e-10, format!("dim {} gram deviation {dev:.2e}", s.dim())))
        }),
        check("linear_direction", || {
            let inst = MimInstance::from_polynomial(
                Subspace::coordinate(6, &[2])?,
                HermiteExpansion::from_terms(1, &[(vec![1], 1.0)])?,
                0,
            )?;
            let data = sample_dataset(&inst, NoiseModel::Realizable, 30_000, 1)?;
            let cfg = LearnerConfig {
                m: 1,
                ..Default::default()
            };
            let r = crate::learner::find_direction(&Subspace::trivial(6), &data, &cfg)?;
            let ok = r.directions.len() == 1 && r.directions.vectors[0][2].abs() > 0.99;
            Ok((ok, format!("{} directions", r.directions.len())))
        }),
        check("generative_exponent", || {
            let cfg = DiagnosticsConfig::default();
            let (a, _) = generative_exponent_of_link(|t| t, 20_000, 1, 3, &cfg)?;
            let (b, _) = generative_exponent_of_link(|t| t * t, 20_000, 2, 3, &cfg)?;
            let ok = a == GenerativeExponent::Found(1) && b == GenerativeExponent::Found(2);
            Ok((ok, format!("identity {a:?}, square {b:?}")))
        }),
        check("hypothesis_round_trip", || {
            let inst = crate::synthetic::make_relu_network(5, 1, &[1], 3)?;
            let data = sample_dataset(&inst, NoiseModel::Realizable, 5_000, 2)?;
            let h = crate::learner::fit_piecewise_constant(&inst.hidden, &data, 0.1, 3)?;
            let text = serde_json::to_string(&h)?;
            let back: PiecewiseConstantHypothesis = serde_json::from_str(&text)?;
            Ok((back == h && serde_json::to_string(&back)? == text, "json".into()))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ExperimentSpec {
        ExperimentSpec {
            instance: InstanceSpec {
                d: 8,
                k: 1,
                seed: 4,
                ..Default::default()
            },
            n_train: 40_000,
            n_eval: 10_000,
            repetitions: 2,
            seed: 11,
            learner: LearnerConfig {
                mode: LearnerMode::FastM2,
                max_iters: 2,
                fit_width: Some(0.02),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = small_spec();
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn seeds_differ_across_reps_and_streams() {
        let s = small_spec();
        let a = RepSeeds::for_rep(&s, 0);
        let b = RepSeeds::for_rep(&s, 1);
        assert_ne!(a, b);
        assert_ne!(a.train, a.eval);
    }

    #[test]
    fn validation_errors() {
        let mut s = small_spec();
        s.n_train = 0;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.repetitions = 0;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.instance.k = 9;
        assert!(s.validate().is_err());
    }

    #[test]
    fn generated_files_round_trip_and_learn() {
        let spec = small_spec();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_generated(&spec, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        let direct = run_experiment(&spec).unwrap();
        let from_files = learn_from_manifest(&manifest, dir.path(), None).unwrap();
        assert_eq!(
            crate::io::to_json_string(&direct.document).unwrap(),
            crate::io::to_json_string(&from_files.document).unwrap()
        );
        let r = &direct.document.record.repetitions[0];
        assert!(r.eval.mse < 0.1, "{:?}", r.eval);
        let csv = trace_csv(&direct.document.record);
        assert!(csv.lines().count() >= 3);
        assert!(selftest().iter().all(|c| c.passed), "{:?}", selftest());
    }

    #[test]
    fn zero_hypothesis_scores_unit_mse() {
        let inst = crate::synthetic::make_relu_network(6, 2, &[2], 8).unwrap();
        let data = sample_dataset(&inst, NoiseModel::Realizable, 100_000, 3).unwrap();
        let zeros = LabeledDataset::new(6, data.xs.clone(), vec![0.0; data.len()]).unwrap();
        let h = crate::learner::fit_piecewise_constant(&inst.hidden, &zeros, 0.2, 3).unwrap();
        let r = eval_report(0, &h, &data, Some(&inst)).unwrap();
        assert!((r.metrics.mse - 1.0).abs() < 0.03, "{:?}", r.metrics);
        assert!(r.potential.unwrap() < 1e-12);
    }

    #[test]
    fn mismatched_hash_is_refused() {
        let spec = small_spec();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_generated(&spec, dir.path()).unwrap();
        let p = dir.path().join(&manifest.entries[0].eval_file);
        assert!(read_checked(&p, "deadbeef", false).is_err());
        assert!(read_checked(&p, "deadbeef", true).is_ok());
    }
}
