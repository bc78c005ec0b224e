use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mim_core::diagnostics::{
    filtered_second_moment, generative_exponent, generative_exponent_of_link, moment_match_defect, named_link,
    DiagnosticsConfig,
};
use mim_core::harness::{
    eval_report, learn_from_manifest, metrics_csv, read_checked, run_experiment, selftest, write_generated, write_outcome,
    ExperimentSpec, FamilyKind, HypothesisDocument, Manifest, MANIFEST_FILE,
};
use mim_core::io::{read_dataset, read_json, write_json};
use mim_core::learner::{LearnerConfig, LearnerMode, PiecewiseConstantHypothesis};
use mim_core::subspace::Subspace;
use mim_core::synthetic::{LabeledDataset, NoiseModel};
use mim_core::MimError;

/// Default output directory when `--out` is not given.
const OUT_DIR_ENV: &str = "MIM_OUT_DIR";

#[derive(Parser)]
#[command(name = "mimlearn", version, about = "Multi-index model learning experiments", args_override_self = true)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample train/eval datasets and write a manifest.
    Generate(GenerateArgs),
    /// Run the learner on generated data or directly from a spec.
    Learn(LearnArgs),
    /// Score a hypothesis on a dataset.
    Eval(EvalArgs),
    /// Moment diagnostics.
    Diagnose(DiagnoseArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Relu,
    Homogeneous,
    Polynomial,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Realizable,
    Additive,
    Adversarial,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Agnostic,
    MimDistribution,
    FastM2,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagnoseMode {
    #[value(name = "generative_exponent", alias = "generative-exponent")]
    GenerativeExponent,
    #[value(name = "moment_defect", alias = "moment-defect")]
    MomentDefect,
    #[value(name = "filtered_moment", alias = "filtered-moment")]
    FilteredMoment,
}

#[derive(Args, Default)]
struct InstanceFlags {
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated hidden widths of a ReLU network.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    terms: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    instance_seed: Option<u64>,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl InstanceFlags {
    fn any_set(&self) -> bool {
        self.family.is_some()
            || self.d.is_some()
            || self.k.is_some()
            || self.widths.is_some()
            || self.terms.is_some()
            || self.degree.is_some()
            || self.alpha.is_some()
            || self.instance_seed.is_some()
            || self.noise.is_some()
            || self.sigma.is_some()
            || self.budget.is_some()
            || self.n_train.is_some()
            || self.n_eval.is_some()
            || self.reps.is_some()
            || self.seed.is_some()
    }

    fn apply(&self, spec: &mut ExperimentSpec) -> Result<(), MimError> {
        let i = &mut spec.instance;
        if let Some(f) = self.family {
            i.family = match f {
                FamilyArg::Relu => FamilyKind::ReluNetwork,
                FamilyArg::Homogeneous => FamilyKind::PositiveHomogeneous,
                FamilyArg::Polynomial => FamilyKind::LowRankPolynomial,
            };
        }
        set(&mut i.d, self.d);
        set(&mut i.k, self.k);
        set(&mut i.widths, self.widths.clone());
        set(&mut i.terms, self.terms);
        set(&mut i.degree, self.degree);
        set(&mut i.alpha, self.alpha);
        set(&mut i.seed, self.instance_seed);
        let kind = self.noise.or(match (self.sigma, self.budget) {
            (Some(_), _) => Some(NoiseArg::Additive),
            (None, Some(_)) => Some(NoiseArg::Adversarial),
            _ => None,
        });
        if let Some(kind) = kind {
            spec.noise = match kind {
                NoiseArg::Realizable => NoiseModel::Realizable,
                NoiseArg::Additive => NoiseModel::Additive {
                    sigma: self
                        .sigma
                        .ok_or_else(|| MimError::Config("--noise additive needs --sigma".into()))?,
                },
                NoiseArg::Adversarial => NoiseModel::Adversarial {
                    budget: self
                        .budget
                        .ok_or_else(|| MimError::Config("--noise adversarial needs --budget".into()))?,
                },
            };
        }
        set(&mut spec.n_train, self.n_train);
        set(&mut spec.n_eval, self.n_eval);
        set(&mut spec.repetitions, self.reps);
        set(&mut spec.seed, self.seed);
        Ok(())
    }
}

#[derive(Args, Default)]
struct LearnerFlags {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Moment degree used by the agnostic learner.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    eps1: Option<f64>,
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    fit_width: Option<f64>,
    #[arg(long)]
    lambda_floor: Option<f64>,
    #[arg(long)]
    lambda_rel: Option<f64>,
    #[arg(long)]
    null_factor: Option<f64>,
    #[arg(long)]
    min_cell: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    sketch_dim: Option<usize>,
    #[arg(long)]
    learner_seed: Option<u64>,
}

impl LearnerFlags {
    fn apply(&self, l: &mut LearnerConfig) {
        if let Some(m) = self.mode {
            l.mode = match m {
                ModeArg::Agnostic => LearnerMode::Agnostic,
                ModeArg::MimDistribution => LearnerMode::MimDistribution,
                ModeArg::FastM2 => LearnerMode::FastM2,
            };
        }
        set(&mut l.m, self.m);
        set(&mut l.eps1, self.eps1);
        set(&mut l.eps2, self.eps2);
        set(&mut l.max_iters, self.max_iters);
        set(&mut l.lambda_rel, self.lambda_rel);
        set(&mut l.null_factor, self.null_factor);
        set(&mut l.min_cell, self.min_cell);
        set(&mut l.seed, self.learner_seed);
        if self.fit_width.is_some() {
            l.fit_width = self.fit_width;
        }
        if self.lambda_floor.is_some() {
            l.lambda_floor = self.lambda_floor;
        }
        if self.batch_size.is_some() {
            l.batch_size = self.batch_size;
        }
        if self.sketch_dim.is_some() {
            l.sketch_dim = self.sketch_dim;
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    instance: InstanceFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LearnArgs {
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `generate`; learns from its datasets.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    instance: InstanceFlags,
    #[command(flatten)]
    learner: LearnerFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// `hypothesis.json` written by `learn`.
    #[arg(long)]
    hypothesis: PathBuf,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Repetition whose hypothesis to use; inferred from the manifest when possible.
    #[arg(long)]
    rep: Option<usize>,
    /// Manifest with ground truth; defaults to the one next to the dataset.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Accept files produced under a different spec hash.
    #[arg(long)]
    force: bool,
    /// Metrics CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long, value_enum)]
    mode: DiagnoseMode,
    /// Named link for `generative_exponent`: identity, square, abs, relu, cubic, sign, he3.
    #[arg(long)]
    link: Option<String>,
    /// Dataset file; for `generative_exponent` it must be one-dimensional.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Hypothesis whose subspace (and predictor) conditions the moments.
    #[arg(long)]
    hypothesis: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    rep: usize,
    /// Coordinate axes spanning the conditioning subspace, instead of a hypothesis.
    #[arg(long, value_delimiter = ',')]
    coords: Option<Vec<usize>>,
    #[arg(long, default_value_t = 200_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    m_max: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long)]
    bin_width: Option<f64>,
    #[arg(long)]
    cube_width: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    working_dim: Option<usize>,
    /// Output CSV path; stdout when absent. A JSON with warnings is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Internal(String),
}

impl From<MimError> for CliError {
    fn from(e: MimError) -> Self {
        match e {
            MimError::Generation(_) => CliError::Internal(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("mim_out"))
}

fn load_spec(config: Option<&Path>) -> CliResult<ExperimentSpec> {
    match config {
        Some(p) => read_json(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display()))),
        None => Ok(ExperimentSpec::default()),
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let mut spec = load_spec(a.config.as_deref())?;
    a.instance.apply(&mut spec)?;
    let dir = out_dir(a.out);
    let manifest = write_generated(&spec, &dir)?;
    println!("spec_hash {}", manifest.spec_hash);
    for e in &manifest.entries {
        println!("rep {} train {} eval {}", e.rep, dir.join(&e.train_file).display(), dir.join(&e.eval_file).display());
    }
    Ok(())
}

fn cmd_learn(a: LearnArgs) -> CliResult<()> {
    let outcome = match &a.data {
        Some(data_dir) => {
            if a.instance.any_set() {
                return Err(CliError::Validation(
                    "instance and sample flags cannot be combined with --data".into(),
                ));
            }
            let manifest: Manifest = read_json(&data_dir.join(MANIFEST_FILE))?;
            let mut learner = manifest.spec.learner.clone();
            if let Some(p) = &a.config {
                let v: serde_json::Value = read_json(p)?;
                if let Some(l) = v.get("learner") {
                    learner = serde_json::from_value(l.clone()).map_err(MimError::from)?;
                }
            }
            a.learner.apply(&mut learner);
            learn_from_manifest(&manifest, data_dir, Some(&learner))?
        }
        None => {
            let mut spec = load_spec(a.config.as_deref())?;
            a.instance.apply(&mut spec)?;
            a.learner.apply(&mut spec.learner);
            run_experiment(&spec)?
        }
    };
    let dir = out_dir(a.out);
    write_outcome(&outcome, &dir)?;
    let rec = &outcome.document.record;
    println!("spec_hash {}", rec.spec_hash);
    for r in &rec.repetitions {
        println!(
            "rep {} dim {} mse {:.6} coverage {:.4} max_angle_deg {} iterations {} stop {:?}",
            r.rep,
            r.recovered_dim,
            r.eval.mse,
            r.eval.coverage_fraction,
            r.max_angle_deg.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into()),
            r.trace.records.len(),
            r.trace.stop_reason
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let doc: HypothesisDocument = read_json(&a.hypothesis)?;
    let data = read_checked(&a.data, &doc.spec_hash, a.force)?;
    let manifest_path = a.manifest.clone().or_else(|| {
        let p = a.data.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE);
        p.exists().then_some(p)
    });
    let manifest: Option<Manifest> = manifest_path.as_deref().map(read_json).transpose()?;
    if let Some(m) = &manifest {
        if m.spec_hash != doc.spec_hash && !a.force {
            return Err(CliError::Validation(format!(
                "manifest spec hash {} does not match hypothesis spec hash {}",
                m.spec_hash, doc.spec_hash
            )));
        }
    }
    let file_name = a.data.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    let entry = manifest
        .as_ref()
        .and_then(|m| m.entries.iter().find(|e| e.eval_file == file_name || e.train_file == file_name));
    let rep = a.rep.or(entry.map(|e| e.rep)).unwrap_or(0);
    let h = doc
        .hypotheses
        .get(rep)
        .ok_or_else(|| CliError::Validation(format!("hypothesis file holds no repetition {rep}")))?;
    let truth = manifest
        .as_ref()
        .and_then(|m| m.entries.iter().find(|e| e.rep == rep))
        .map(|e| &e.instance);
    let report = eval_report(rep, h, &data, truth)?;
    let csv = metrics_csv(&doc.spec_hash, &[report]);
    match a.out {
        Some(p) => std::fs::write(p, csv).map_err(MimError::from)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn diag_config(a: &DiagnoseArgs) -> DiagnosticsConfig {
    let mut c = DiagnosticsConfig::default();
    set(&mut c.bin_width, a.bin_width);
    set(&mut c.cube_width, a.cube_width);
    set(&mut c.threshold, a.threshold);
    set(&mut c.working_dim, a.working_dim);
    c
}

fn require_data(a: &DiagnoseArgs) -> CliResult<LabeledDataset> {
    let p = a
        .data
        .as_ref()
        .ok_or_else(|| CliError::Validation("this mode needs --data".into()))?;
    Ok(read_dataset(p)?.1)
}

fn conditioning(a: &DiagnoseArgs, d: usize) -> CliResult<(Subspace, Option<PiecewiseConstantHypothesis>)> {
    if let Some(p) = &a.hypothesis {
        let doc: HypothesisDocument = read_json(p)?;
        let h = doc
            .hypotheses
            .into_iter()
            .nth(a.rep)
            .ok_or_else(|| CliError::Validation(format!("hypothesis file holds no repetition {}", a.rep)))?;
        return Ok((h.subspace().clone(), Some(h)));
    }
    let v = match &a.coords {
        Some(c) => Subspace::coordinate(d, c)?,
        None => Subspace::trivial(d),
    };
    Ok((v, None))
}

fn emit(out: Option<&Path>, csv: &str, json: &serde_json::Value, warnings: &[String]) -> CliResult<()> {
    for w in warnings {
        eprintln!("warning: {w}");
    }
    match out {
        Some(p) => {
            std::fs::write(p, csv).map_err(MimError::from)?;
            write_json(&p.with_extension("json"), json)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> CliResult<()> {
    let cfg = diag_config(&a);
    match a.mode {
        DiagnoseMode::GenerativeExponent => {
            let (m, profile) = match (&a.link, &a.data) {
                (Some(name), None) => {
                    let link = named_link(name).ok_or_else(|| CliError::Validation(format!("unknown link {name:?}")))?;
                    generative_exponent_of_link(link, a.n, a.seed, a.m_max, &cfg)?
                }
                (None, Some(_)) => {
                    let data = require_data(&a)?;
                    if data.dim != 1 {
                        return Err(MimError::DimensionMismatch { expected: 1, found: data.dim }.into());
                    }
                    generative_exponent(&data.xs, &data.ys, a.m_max, &cfg)?
                }
                _ => return Err(CliError::Validation("give exactly one of --link and --data".into())),
            };
            eprintln!("generative exponent: {m:?}");
            let json = serde_json::json!({ "generative_exponent": m, "profile": profile });
            emit(a.out.as_deref(), &profile.to_csv(), &json, &profile.warnings)
        }
        DiagnoseMode::MomentDefect => {
            let data = require_data(&a)?;
            let (v, _) = conditioning(&a, data.dim)?;
            let defect = moment_match_defect(&data, &v, a.m, None, &cfg)?;
            let json = serde_json::to_value(&defect).map_err(MimError::from)?;
            emit(a.out.as_deref(), &defect.to_csv(), &json, &defect.warnings)
        }
        DiagnoseMode::FilteredMoment => {
            let data = require_data(&a)?;
            let (v, h) = conditioning(&a, data.dim)?;
            let f = |z: &[f64]| h.as_ref().map_or(0.0, |h| h.predict_coords(z));
            let fm = filtered_second_moment(&data, &v, &f, a.tau)?;
            let null_level = fm.null_frobenius(data.dim - v.dim());
            let json = serde_json::json!({
                "frobenius": fm.matrix.norm(),
                "null_frobenius": null_level,
                "active_fraction": fm.active_fraction,
                "sample_count": fm.sample_count,
            });
            emit(a.out.as_deref(), &fm.to_csv(), &json, &[])
        }
    }
}

fn cmd_selftest() -> CliResult<()> {
    let results = selftest();
    for c in &results {
        println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if results.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(CliError::Internal("self-test failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Learn(a) => cmd_learn(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Diagnose(a) => cmd_diagnose(a),
        Cmd::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
