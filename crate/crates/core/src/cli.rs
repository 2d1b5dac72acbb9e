//! Batch commands behind the `otreg` binary.
//!
//! Every command computes all of its outputs in memory before touching the
//! file system, and each file is written through a temporary file and a
//! rename, so a failing command leaves no partial outputs behind.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::autodiff::{Backend, Tape, Var};
use crate::corpus::{Corpus, SplitMix64};
use crate::error::{Error, Result};
use crate::gradcheck::{analytic_gradients, compare_with_finite_differences, GradCheckReport};
use crate::io::{encode_emb, encode_matrix, read_matrix, write_atomic};
use crate::loss::{ot_loss_on, sparsity_loss_on, transport_cost_on, DEFAULT_LAMBDA_SPR};
use crate::matrix::Matrix;
use crate::ot::{build_cost, build_cost_on, sinkhorn, sinkhorn_on, SinkhornConfig};
use crate::report::{digest, to_json};
use crate::trainer::{ce_loss_on, load_config, run_two_stage, EvalReport, RunConfig, StepRecord};
use crate::transform::{
    adapter_forward_on, ot_compress, pairwise_distance_map, unique_targets, Adapter,
    AdapterParams, DEFAULT_COMPRESSION_THRESHOLD, DEFAULT_UNIQUENESS_THRESHOLD,
};

#[derive(Debug, Parser)]
#[command(name = "otreg", version, about = "Entropic OT alignment, compression and toy adapter training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the transport problem between two embedding matrices.
    Align(AlignArgs),
    /// Merge adjacent near-duplicate rows and drop pad-like rows.
    Compress(CompressArgs),
    /// Deduplicate transcript rows and append the pad embedding.
    Unique(UniqueArgs),
    /// Generate the synthetic corpus and run both training stages.
    Train(TrainArgs),
    /// Write the pairwise cosine-distance map as PGM or CSV.
    Heatmap(HeatmapArgs),
    /// Finite-difference checks of every loss path.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_SPR)]
    pub lambda_spr: f64,
    /// Use the linear-domain iteration instead of log-sum-exp updates.
    #[arg(long)]
    pub linear: bool,
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Matrix file holding the pad embedding as a single row.
    #[arg(long)]
    pub pad: PathBuf,
    #[arg(long, default_value_t = DEFAULT_COMPRESSION_THRESHOLD)]
    pub merge_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_COMPRESSION_THRESHOLD)]
    pub drop_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UniqueArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub pad: PathBuf,
    #[arg(long, default_value_t = DEFAULT_UNIQUENESS_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated `SOURCExTARGET` row counts.
    #[arg(long, default_value = "2x2,4x3,6x4")]
    pub sizes: String,
    /// Random instances per size.
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the analytic gradient before comparing (exercises the failure path).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Machine-readable summary written by every command.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    /// SHA-256 of each input file, keyed by flag name.
    pub inputs: BTreeMap<String, String>,
    pub config: Value,
    pub results: Value,
    pub warnings: Vec<String>,
}

impl RunReport {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            inputs: BTreeMap::new(),
            config: Value::Null,
            results: Value::Null,
            warnings: Vec::new(),
        }
    }

    fn to_json_line(&self) -> Result<String> {
        Ok(to_json(self)? + "\n")
    }
}

fn json_of<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Contract(format!("report serialization: {e}")))
}

/// Reads a matrix file and records its digest under `flag`.
fn load_input(report: &mut RunReport, flag: &str, path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    report.inputs.insert(flag.to_string(), digest(&bytes));
    let (m, warning) = read_matrix(path)?;
    if let Some(w) = warning {
        report.warnings.push(format!("{}: {w}", path.display()));
    }
    Ok(m)
}

fn load_pad(report: &mut RunReport, path: &Path, dim: usize) -> Result<Vec<f64>> {
    let pad = load_input(report, "pad", path)?;
    if pad.rows() != 1 || pad.cols() != dim {
        return Err(Error::Dimension {
            op: "pad",
            lhs: (1, dim),
            rhs: pad.shape(),
        });
    }
    Ok(pad.row(0).to_vec())
}

/// Output files of one command, written only after every one of them encoded successfully.
#[derive(Default)]
struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn push(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.0.push((path.into(), bytes));
    }

    fn matrix(&mut self, path: &Path, m: &Matrix) -> Result<()> {
        let bytes = encode_matrix(path, m)?;
        self.push(path, bytes);
        Ok(())
    }

    fn commit(self) -> Result<()> {
        for (path, bytes) in self.0 {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_atomic(&path, &bytes)?;
        }
        Ok(())
    }
}

/// Writes the report to `path` when given, otherwise to stdout.
fn emit_report(outputs: &mut Outputs, report: &RunReport, path: Option<&Path>) -> Result<()> {
    let line = report.to_json_line()?;
    match path {
        Some(p) => outputs.push(p, line.into_bytes()),
        None => print!("{line}"),
    }
    Ok(())
}

fn warn_all(report: &RunReport) {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

pub fn cmd_align(args: &AlignArgs) -> Result<()> {
    let mut report = RunReport::new("align");
    let source = load_input(&mut report, "source", &args.source)?;
    let target = load_input(&mut report, "target", &args.target)?;
    let cfg = SinkhornConfig {
        epsilon: args.epsilon,
        max_iterations: args.max_iters,
        tolerance: args.tol,
        log_domain: !args.linear,
    };
    cfg.validate()?;
    if args.lambda_spr < 0.0 {
        return Err(Error::Config(format!("lambda_spr must be nonnegative, got {}", args.lambda_spr)));
    }
    let cost = build_cost(&source, &target)?;
    let plan = sinkhorn(&cost, &cfg)?;
    let loss = crate::loss::ot_loss(&plan, &cost, args.lambda_spr)?;
    if !plan.converged {
        report.warnings.push(format!(
            "sinkhorn stopped after {} iterations with marginal error {:e}",
            plan.iterations_used, plan.marginal_error
        ));
    }
    report.config = json!({
        "epsilon": cfg.epsilon,
        "max_iterations": cfg.max_iterations,
        "tolerance": cfg.tolerance,
        "log_domain": cfg.log_domain,
        "lambda_spr": args.lambda_spr,
    });
    report.results = json!({
        "l_cost": loss.l_cost,
        "l_spr": loss.l_spr,
        "l_ot": loss.l_ot,
        "marginal_error": plan.marginal_error,
        "iterations": plan.iterations_used,
        "converged": plan.converged,
        "source_rows": source.rows(),
        "target_rows": target.rows(),
    });
    let mut out = Outputs::default();
    if let Some(p) = &args.plan_out {
        out.matrix(p, &plan.gamma)?;
    }
    emit_report(&mut out, &report, args.report_out.as_deref())?;
    warn_all(&report);
    out.commit()
}

pub fn cmd_compress(args: &CompressArgs) -> Result<()> {
    let mut report = RunReport::new("compress");
    let input = load_input(&mut report, "input", &args.input)?;
    let pad = load_pad(&mut report, &args.pad, input.cols())?;
    let (compressed, summary) = ot_compress(&input, &pad, args.merge_threshold, args.drop_threshold)?;
    let empty = compressed.rows() == 0;
    if empty && input.rows() > 0 {
        report.warnings.push("every row was dropped as pad; output is empty".into());
    }
    report.config = json!({
        "merge_threshold": args.merge_threshold,
        "drop_threshold": args.drop_threshold,
    });
    report.results = json!({
        "compression": json_of(&summary)?,
        "empty": empty,
    });
    let mut out = Outputs::default();
    out.matrix(&args.out, &compressed)?;
    emit_report(&mut out, &report, args.report_out.as_deref())?;
    warn_all(&report);
    out.commit()
}

pub fn cmd_unique(args: &UniqueArgs) -> Result<()> {
    let mut report = RunReport::new("unique");
    let input = load_input(&mut report, "input", &args.input)?;
    let pad = load_pad(&mut report, &args.pad, input.cols())?;
    let set = unique_targets(&input, &pad, args.threshold)?;
    report.config = json!({ "threshold": args.threshold });
    report.results = json!({
        "input_rows": input.rows(),
        "output_rows": set.len(),
        "sources": json_of(&set.sources)?,
        "pad_row_index": set.pad_row_index,
    });
    let mut out = Outputs::default();
    out.matrix(&args.out, &set.embeddings)?;
    emit_report(&mut out, &report, args.report_out.as_deref())?;
    out.commit()
}

fn param_files(out: &mut Outputs, dir: &Path, params: &AdapterParams) -> Result<()> {
    for (name, m) in ["w1", "b1", "w2", "b2"].into_iter().zip(params.as_slice()) {
        out.push(dir.join(format!("{name}.emb")), encode_emb(m)?);
    }
    Ok(())
}

fn eval_file(out: &mut Outputs, dir: &Path, eval: &EvalReport) -> Result<()> {
    out.push(dir.join("eval.json"), (to_json(eval)? + "\n").into_bytes());
    Ok(())
}

fn config_echo(cfg: &RunConfig) -> Value {
    let map: serde_json::Map<String, Value> = cfg
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), Value::String(v)))
        .collect();
    Value::Object(map)
}

/// Output layout under `--out-dir`:
/// `steps.jsonl`, `stage1/{w1,b1,w2,b2}.emb`, `stage1/eval.json`, the same for
/// `stage2/` when Stage 2 ran, and `report.json`.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut report = RunReport::new("train");
    let bytes = fs::read(&args.config).map_err(|e| Error::io(&args.config, e))?;
    report.inputs.insert("config".into(), digest(&bytes));
    let cfg = load_config(&args.config)?;
    report.config = config_echo(&cfg);

    let corpus = Corpus::generate(&cfg.corpus)?;
    let run = run_two_stage(&corpus, &cfg.train)?;

    let mut out = Outputs::default();
    let mut steps = String::new();
    for record in &run.records {
        steps.push_str(&to_json::<StepRecord>(record)?);
        steps.push('\n');
    }
    out.push(args.out_dir.join("steps.jsonl"), steps.into_bytes());
    let stage1_dir = args.out_dir.join("stage1");
    param_files(&mut out, &stage1_dir, &run.stage1)?;
    eval_file(&mut out, &stage1_dir, &run.stage1_eval)?;
    if let (Some(p), Some(e)) = (&run.stage2, &run.stage2_eval) {
        let dir = args.out_dir.join("stage2");
        param_files(&mut out, &dir, p)?;
        eval_file(&mut out, &dir, e)?;
    }
    let unconverged = run
        .records
        .iter()
        .filter(|r| !r.report.sinkhorn_converged)
        .count();
    if unconverged > 0 {
        report.warnings.push(format!("{unconverged} Stage-2 steps hit the Sinkhorn iteration cap"));
    }
    report.results = json!({
        "steps": run.records.len(),
        "train_samples": corpus.train.len(),
        "eval_samples": corpus.eval.len(),
        "stage1_eval": json_of(&run.stage1_eval)?,
        "stage2_eval": json_of(&run.stage2_eval)?,
        "cold_start_stage2_eval": json_of(&run.cold_stage2_eval)?,
    });
    out.push(args.out_dir.join("report.json"), report.to_json_line()?.into_bytes());
    warn_all(&report);
    out.commit()
}

/// `round(255 * d / 2)` with halves rounded up, clamped to `0..=255`.
pub fn heatmap_pixel(distance: f64) -> u8 {
    (255.0 * distance / 2.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// ASCII PGM (`P2`): width = target rows, height = source rows.
pub fn encode_pgm(distances: &Matrix) -> String {
    let mut s = format!("P2\n{} {}\n255\n", distances.cols(), distances.rows());
    for row in distances.row_iter() {
        let px: Vec<String> = row.iter().map(|&d| heatmap_pixel(d).to_string()).collect();
        s.push_str(&px.join(" "));
        s.push('\n');
    }
    s
}

pub fn cmd_heatmap(args: &HeatmapArgs) -> Result<()> {
    let mut report = RunReport::new("heatmap");
    let source = load_input(&mut report, "source", &args.source)?;
    let target = load_input(&mut report, "target", &args.target)?;
    let distances = pairwise_distance_map(&source, &target)?;
    let bytes = match args.out.extension().and_then(|e| e.to_str()) {
        Some("pgm") => encode_pgm(&distances).into_bytes(),
        Some("csv") => encode_matrix(&args.out, &distances)?,
        _ => return Err(Error::UnsupportedFormat(args.out.clone())),
    };
    let mut out = Outputs::default();
    out.push(&args.out, bytes);
    out.commit()
}

/// Parses `"2x2,4x3"` into `(source_rows, target_rows)` pairs.
pub fn parse_sizes(list: &str) -> Result<Vec<(usize, usize)>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let bad = || Error::Config(format!("size {s:?} is not of the form NxM"));
            let (a, b) = s.trim().split_once('x').ok_or_else(bad)?;
            let a: usize = a.parse().map_err(|_| bad())?;
            let b: usize = b.parse().map_err(|_| bad())?;
            if a == 0 || b == 0 {
                return Err(bad());
            }
            Ok((a, b))
        })
        .collect()
}

/// A small random adapter-to-transport problem for gradient checks.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub stacked: Matrix,
    pub params: AdapterParams,
    pub targets: Matrix,
    pub table: Matrix,
    pub labels: Vec<usize>,
}

const CHECK_INPUT_DIM: usize = 4;
const CHECK_HIDDEN_DIM: usize = 5;
const CHECK_OUTPUT_DIM: usize = 3;
const CHECK_VOCAB: usize = 5;

pub fn random_grad_instance(rng: &mut SplitMix64, source_rows: usize, target_rows: usize) -> GradInstance {
    let mut random = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.next_signed_unit());
    let stacked = random(source_rows, CHECK_INPUT_DIM);
    let mut params = AdapterParams::zeros(CHECK_INPUT_DIM, CHECK_HIDDEN_DIM, CHECK_OUTPUT_DIM);
    params.w1 = random(CHECK_INPUT_DIM, CHECK_HIDDEN_DIM);
    // Positive hidden biases keep most units away from the ReLU kink.
    params.b1 = random(1, CHECK_HIDDEN_DIM).map(|v| 0.5 + 0.25 * v);
    params.w2 = random(CHECK_HIDDEN_DIM, CHECK_OUTPUT_DIM);
    params.b2 = random(1, CHECK_OUTPUT_DIM).map(|v| 0.1 * v);
    let targets = random(target_rows, CHECK_OUTPUT_DIM);
    let table = random(CHECK_VOCAB, CHECK_OUTPUT_DIM);
    let labels = (0..source_rows).map(|_| rng.next_below(CHECK_VOCAB as u64) as usize).collect();
    GradInstance {
        stacked,
        params,
        targets,
        table,
        labels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPath {
    Ce,
    Cost,
    Sparsity,
    Ot,
    Total,
}

impl LossPath {
    pub const ALL: [LossPath; 5] = [Self::Ce, Self::Cost, Self::Sparsity, Self::Ot, Self::Total];
}

/// Settings used when differentiating through Sinkhorn: a fixed iteration
/// count keeps the unrolled map smooth in its inputs.
pub fn gradcheck_sinkhorn() -> SinkhornConfig {
    SinkhornConfig {
        epsilon: 0.5,
        max_iterations: 30,
        tolerance: 0.0,
        log_domain: true,
    }
}

/// Builds the scalar loss `path` for the adapter parameters `p` (w1, b1, w2, b2).
pub fn loss_path_on(
    tape: &mut Tape,
    p: &[Var],
    inst: &GradInstance,
    path: LossPath,
    lambda_ot: f64,
    lambda_spr: f64,
    logit_scale: f64,
) -> Result<Var> {
    let adapter = Adapter {
        w1: p[0],
        b1: p[1],
        w2: p[2],
        b2: p[3],
    };
    let h = tape.constant(inst.stacked.clone());
    let f = adapter_forward_on(tape, &h, &adapter)?;
    let table = tape.constant(inst.table.clone());
    if path == LossPath::Ce {
        return ce_loss_on(tape, &f, &table, &inst.labels, logit_scale);
    }
    let targets = tape.constant(inst.targets.clone());
    let cost = build_cost_on(tape, &f, &targets)?;
    let plan = sinkhorn_on(tape, &cost, &gradcheck_sinkhorn())?;
    match path {
        LossPath::Cost => transport_cost_on(tape, &plan.gamma, &cost),
        LossPath::Sparsity => sparsity_loss_on(tape, &plan.gamma),
        LossPath::Ot => Ok(ot_loss_on(tape, &plan.gamma, &cost, lambda_spr)?.l_ot),
        LossPath::Total => {
            let ot = ot_loss_on(tape, &plan.gamma, &cost, lambda_spr)?.l_ot;
            let ce = ce_loss_on(tape, &f, &table, &inst.labels, logit_scale)?;
            let weighted = tape.scale(&ot, lambda_ot)?;
            tape.add(&ce, &weighted)
        }
        LossPath::Ce => unreachable!(),
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckCase {
    pub source_rows: usize,
    pub target_rows: usize,
    pub trial: usize,
    pub path: LossPath,
    pub max_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub worst_parameter: Option<&'static str>,
    pub worst_entry: Option<usize>,
}

/// Runs every loss path on `trials` random instances per size.
pub fn run_gradchecks(
    sizes: &[(usize, usize)],
    trials: usize,
    seed: u64,
    inject_fault: bool,
) -> Result<Vec<GradCheckCase>> {
    let mut rng = SplitMix64::new(seed);
    let mut cases = Vec::new();
    for &(n_a, n_g) in sizes {
        for trial in 0..trials {
            let inst = random_grad_instance(&mut rng, n_a, n_g);
            let params: Vec<Matrix> = inst.params.as_slice().into_iter().cloned().collect();
            for path in LossPath::ALL {
                let f = |t: &mut Tape, p: &[Var]| {
                    loss_path_on(t, p, &inst, path, 0.3, DEFAULT_LAMBDA_SPR, 20.0)
                };
                let (_, mut grads) = analytic_gradients(&f, &params)?;
                if inject_fault {
                    grads[0].data_mut()[0] += 1.0;
                }
                let r: GradCheckReport = compare_with_finite_differences(&f, &params, &grads, GRADCHECK_STEP)?;
                cases.push(GradCheckCase {
                    source_rows: n_a,
                    target_rows: n_g,
                    trial,
                    path,
                    max_rel_error: r.max_rel_error,
                    analytic: r.analytic,
                    numeric: r.numeric,
                    worst_parameter: r.worst.map(|(i, _)| ["w1", "b1", "w2", "b2"][i]),
                    worst_entry: r.worst.map(|(_, k)| k),
                });
            }
        }
    }
    Ok(cases)
}

/// Returns whether every case passed.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let sizes = parse_sizes(&args.sizes)?;
    if args.trials == 0 || sizes.is_empty() {
        eprintln!("warning: no gradient checks requested; nothing to verify");
        return Ok(true);
    }
    let cases = run_gradchecks(&sizes, args.trials, args.seed, args.inject_fault)?;
    let worst = cases
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one case");
    let failures: Vec<&GradCheckCase> = cases
        .iter()
        .filter(|c| !(c.max_rel_error < GRADCHECK_TOLERANCE))
        .collect();
    let mut report = RunReport::new("gradcheck");
    report.config = json!({
        "sizes": args.sizes,
        "trials": args.trials,
        "seed": args.seed,
        "tolerance": GRADCHECK_TOLERANCE,
    });
    report.results = json!({
        "cases": cases.len(),
        "failures": json_of(&failures)?,
        "worst": json_of(worst)?,
    });
    print!("{}", report.to_json_line()?);
    eprintln!(
        "worst case: {}x{} trial {} path {:?}: relative error {:e} (analytic {:e}, numeric {:e})",
        worst.source_rows,
        worst.target_rows,
        worst.trial,
        worst.path,
        worst.max_rel_error,
        worst.analytic,
        worst.numeric
    );
    for f in &failures {
        eprintln!(
            "FAILED: {}x{} trial {} path {:?} relative error {:e}",
            f.source_rows, f.target_rows, f.trial, f.path, f.max_rel_error
        );
    }
    Ok(failures.is_empty())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let outcome = match &cli.command {
        Command::Align(a) => cmd_align(a).map(|_| true),
        Command::Compress(a) => cmd_compress(a).map(|_| true),
        Command::Unique(a) => cmd_unique(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Heatmap(a) => cmd_heatmap(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    eprintln!("wall time: {:.3} s", started.elapsed().as_secs_f64());
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_anchors() {
        assert_eq!(heatmap_pixel(0.0), 0);
        assert_eq!(heatmap_pixel(1.0), 128);
        assert_eq!(heatmap_pixel(2.0), 255);
    }

    #[test]
    fn pgm_layout() {
        let d = Matrix::from_rows(&[[0.0, 1.0, 2.0]]).unwrap();
        assert_eq!(encode_pgm(&d), "P2\n3 1\n255\n0 128 255\n");
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_sizes("2x2,6x4").unwrap(), vec![(2, 2), (6, 4)]);
        assert!(parse_sizes("2by2").is_err());
        assert!(parse_sizes("0x3").is_err());
    }

    #[test]
    fn small_gradcheck_passes_and_fault_fails() {
        let ok = run_gradchecks(&[(3, 2)], 1, 7, false).unwrap();
        assert!(ok.iter().all(|c| c.max_rel_error < GRADCHECK_TOLERANCE), "{ok:?}");
        let bad = run_gradchecks(&[(3, 2)], 1, 7, true).unwrap();
        assert!(bad.iter().all(|c| c.max_rel_error > GRADCHECK_TOLERANCE));
    }
}
