//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use otreg::autodiff::{Backend, Tape, Var};
use otreg::cli::{cmd_train, encode_pgm, TrainArgs};
use otreg::corpus::{Corpus, SplitMix64};
use otreg::gradcheck::grad_check;
use otreg::io::{read_emb, write_emb};
use otreg::loss::{ot_loss_on, sparsity_loss, transport_cost};
use otreg::matrix::Matrix;
use otreg::ot::{build_cost, build_cost_on, sinkhorn, sinkhorn_on, CostMatrix, SinkhornConfig, TransportPlan};
use otreg::trainer::{ce_loss_on, load_config, run_two_stage};
use otreg::transform::{adapter_forward_on, ot_compress, pairwise_distance_map, Adapter};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn desk_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.next_signed_unit())
}

fn max_marginal_violation(gamma: &Matrix) -> f64 {
    let (n, m) = gamma.shape();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let s: f64 = (0..m).map(|j| gamma.get(i, j)).sum();
        worst = worst.max((s - 1.0 / n as f64).abs());
    }
    for j in 0..m {
        let s: f64 = (0..n).map(|i| gamma.get(i, j)).sum();
        worst = worst.max((s - 1.0 / m as f64).abs());
    }
    worst
}

fn sinkhorn_feasibility() -> Outcome {
    let mut rng = SplitMix64::new(101);
    let start = Instant::now();
    let mut worst_converged: f64 = 0.0;
    let mut worst_unconverged: f64 = 0.0;
    let mut converged = 0;
    for t in 0..100 {
        let n = 1 + rng.next_below(50) as usize;
        let m = 1 + rng.next_below(20) as usize;
        let epsilon = [0.01, 0.1, 1.0][t % 3];
        let cost = CostMatrix::from_matrix(Matrix::from_fn(n, m, |_, _| 2.0 * rng.next_f64())).unwrap();
        let cfg = SinkhornConfig {
            epsilon,
            max_iterations: 100_000,
            tolerance: 1e-8,
            log_domain: true,
        };
        let plan = sinkhorn(&cost, &cfg).unwrap();
        let violation = max_marginal_violation(&plan.gamma);
        if plan.converged {
            converged += 1;
            worst_converged = worst_converged.max(violation);
        } else {
            worst_unconverged = worst_unconverged.max(violation);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_converged <= 1e-8 && elapsed < Duration::from_secs(10),
        format!(
            "{converged}/100 converged, max violation {worst_converged:.3e} (unconverged max {worst_unconverged:.3e}), {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Brute-force minimum of `(1/n) sum_i C[i][p(i)]` over permutations, by recursion.
fn brute_force_assignment(c: &Matrix) -> f64 {
    fn go(c: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n = c.rows();
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, used, acc + c.get(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.rows()], 0.0, &mut best);
    best / c.rows() as f64
}

fn exact_ot_oracle() -> Outcome {
    let mut rng = SplitMix64::new(202);
    let mut worst_gap: f64 = 0.0;
    let mut worst_limit = [0.0f64; 2];
    for _ in 0..50 {
        let n = 1 + rng.next_below(6) as usize;
        let c = Matrix::from_fn(n, n, |_, _| rng.next_f64());
        let cost = CostMatrix::from_matrix(c.clone()).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 0.005,
            max_iterations: 200_000,
            tolerance: 1e-10,
            log_domain: true,
        };
        let plan = sinkhorn(&cost, &cfg).unwrap();
        let value = transport_cost(&plan, &cost).unwrap();
        worst_gap = worst_gap.max((value - brute_force_assignment(&c)).abs());

        for (slot, epsilon) in [100.0, 1000.0].into_iter().enumerate() {
            let cfg = SinkhornConfig {
                epsilon,
                ..SinkhornConfig::default()
            };
            let plan = sinkhorn(&cost, &cfg).unwrap();
            let independent = 1.0 / (n * n) as f64;
            for &g in plan.gamma.data() {
                worst_limit[slot] = worst_limit[slot].max((g - independent).abs());
            }
        }
    }
    outcome(
        worst_gap <= 1e-2 && worst_limit.iter().all(|&d| d <= 1e-4),
        format!(
            "max |<gamma,C> - OPT| {worst_gap:.3e}; max deviation from a x b {:.3e} at epsilon 100, {:.3e} at epsilon 1000",
            worst_limit[0], worst_limit[1]
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let mut rng = SplitMix64::new(303);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let (d_in, d_h, d_l, vocab) = (5, 6, 4, 7);
    let sinkhorn_cfg = SinkhornConfig {
        epsilon: 0.2,
        max_iterations: 40,
        tolerance: 0.0,
        log_domain: true,
    };
    for _ in 0..20 {
        let n_a = 1 + rng.next_below(6) as usize;
        let n_g = 1 + rng.next_below(4) as usize;
        let h = random_matrix(&mut rng, n_a, d_in);
        let targets = random_matrix(&mut rng, n_g, d_l);
        let table = random_matrix(&mut rng, vocab, d_l);
        let labels: Vec<usize> = (0..n_a).map(|_| rng.next_below(vocab as u64) as usize).collect();
        let params = vec![
            random_matrix(&mut rng, d_in, d_h),
            random_matrix(&mut rng, 1, d_h).map(|v| 0.6 + 0.3 * v),
            random_matrix(&mut rng, d_h, d_l),
            random_matrix(&mut rng, 1, d_l).map(|v| 0.1 * v),
        ];
        let f = |t: &mut Tape, p: &[Var]| {
            let adapter = Adapter {
                w1: p[0],
                b1: p[1],
                w2: p[2],
                b2: p[3],
            };
            let hv = t.constant(h.clone());
            let out = adapter_forward_on(t, &hv, &adapter)?;
            let tab = t.constant(table.clone());
            let ce = ce_loss_on(t, &out, &tab, &labels, 20.0)?;
            let tg = t.constant(targets.clone());
            let cost = build_cost_on(t, &out, &tg)?;
            let plan = sinkhorn_on(t, &cost, &sinkhorn_cfg)?;
            let ot = ot_loss_on(t, &plan.gamma, &cost, 0.1)?;
            let weighted = t.scale(&ot.l_ot, 0.3)?;
            t.add(&ce, &weighted)
        };
        let report = grad_check(f, &params, 1e-6).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("max relative error {worst:.3e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn loss_closed_forms() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (n_a, n_g) in [(1, 1), (3, 3), (4, 2), (5, 7)] {
        let one_hot = Matrix::from_fn(n_a, n_g, |i, j| if j == i % n_g { 1.0 / n_a as f64 } else { 0.0 });
        let uniform = Matrix::filled(n_a, n_g, 1.0 / (n_a * n_g) as f64);
        let s_hot = sparsity_loss(&TransportPlan::from_gamma(one_hot)).unwrap();
        let s_uni = sparsity_loss(&TransportPlan::from_gamma(uniform)).unwrap();
        let expected = 1.0 - 1.0 / (n_g as f64).sqrt();
        if s_hot.abs() > 1e-12 || (s_uni - expected).abs() > 1e-12 {
            ok = false;
            notes.push(format!("{n_a}x{n_g}: one-hot {s_hot:e}, uniform {s_uni} vs {expected}"));
        }
    }

    let mut rng = SplitMix64::new(404);
    for _ in 0..50 {
        let n = 1 + rng.next_below(10) as usize;
        let m = 1 + rng.next_below(10) as usize;
        let cost = build_cost(&random_matrix(&mut rng, n, 5), &random_matrix(&mut rng, m, 5)).unwrap();
        let plan = sinkhorn(&cost, &SinkhornConfig::default()).unwrap();
        let l = transport_cost(&plan, &cost).unwrap();
        if !(0.0..=2.0).contains(&l) {
            ok = false;
            notes.push(format!("L_cost {l} outside [0, 2]"));
        }
    }

    let cfg = load_config(&desk_config_path()).unwrap();
    let corpus = Corpus::generate(&cfg.corpus).unwrap();
    let run = run_two_stage(&corpus, &cfg.train).unwrap();
    let mismatched = run
        .records
        .iter()
        .filter(|r| r.report.l_total != r.report.l_ce + cfg.train.lambda_ot * r.report.l_ot)
        .count();
    if mismatched > 0 {
        ok = false;
    }
    notes.push(format!("{} training steps, {mismatched} non-additive", run.records.len()));
    outcome(ok, notes.join("; "))
}

fn compression_semantics() -> Outcome {
    let mut rng = SplitMix64::new(505);
    let mut ok = true;
    let mut notes = Vec::new();
    let letters: Vec<Vec<f64>> = (0..4).map(|_| (0..12).map(|_| rng.next_gaussian()).collect()).collect();
    let pad: Vec<f64> = (0..12).map(|_| rng.next_gaussian()).collect();
    let (h, e, l, o) = (0, 1, 2, 3);

    let spelled = [h, h, e, e, l, l, l, l, o, o];
    let input = Matrix::from_rows(&spelled.iter().map(|&c| letters[c].clone()).collect::<Vec<_>>()).unwrap();
    let (out, _) = ot_compress(&input, &pad, 0.9, 0.9).unwrap();
    let expected = Matrix::from_rows(&[h, e, l, l, o].iter().map(|&c| letters[c].clone()).collect::<Vec<_>>()).unwrap();
    let hello = out.shape() == expected.shape() && out.max_abs_diff(&expected) < 1e-12;
    ok &= hello;
    notes.push(format!("hheelllloo -> {} rows", out.rows()));

    let mut rows = Vec::new();
    for i in 0..9 {
        rows.push(if i % 3 == 1 { pad.iter().map(|v| 2.0 * v).collect() } else { letters[i % 4].clone() });
    }
    let with_pad = Matrix::from_rows(&rows).unwrap();
    let (out, report) = ot_compress(&with_pad, &pad, 0.9, 0.9).unwrap();
    let pad_left = out.row_iter().filter(|r| otreg::autodiff::cosine(r, &pad).unwrap() > 0.9).count();
    ok &= pad_left == 0 && report.dropped_indices.len() == 3;
    notes.push(format!("pad rows left {pad_left}"));

    let mut identity = true;
    for _ in 0..20 {
        let n = 1 + rng.next_below(12) as usize;
        let x = Matrix::from_fn(n, 12, |_, _| rng.next_gaussian());
        let (out, _) = ot_compress(&x, &pad, 0.9999, 0.9999).unwrap();
        identity &= out.shape() == x.shape() && out.max_abs_diff(&x) == 0.0;
    }
    ok &= identity;
    notes.push(format!("near-1 thresholds identity {identity}"));
    outcome(ok, notes.join("; "))
}

fn two_stage_training() -> Outcome {
    let start = Instant::now();
    let cfg = load_config(&desk_config_path()).unwrap();
    let c = &cfg.corpus;
    let shape_ok = c.vocab_size == 30
        && c.d_l == 16
        && c.d_s == 24
        && c.utterance_count == 200
        && cfg.train.k == 2
        && cfg.train.lambda_ot == 0.3;
    let corpus = Corpus::generate(&cfg.corpus).unwrap();
    let run = run_two_stage(&corpus, &cfg.train).unwrap();
    let s1 = run.stage1_eval;
    let s2 = run.stage2_eval.expect("stage 2 ran");
    let elapsed = start.elapsed();
    outcome(
        shape_ok
            && s2.alignment_accuracy >= 0.90
            && s2.mean_transport_cost < s1.mean_transport_cost
            && s2.mean_sparsity_loss < s1.mean_sparsity_loss
            && elapsed < Duration::from_secs(300),
        format!(
            "accuracy {:.4} (pad {:.4}), transport cost {:.5} -> {:.5}, L_spr {:.5} -> {:.5}, {:.1} s",
            s2.alignment_accuracy,
            s2.pad_alignment_accuracy,
            s1.mean_transport_cost,
            s2.mean_transport_cost,
            s1.mean_sparsity_loss,
            s2.mean_sparsity_loss,
            elapsed.as_secs_f64()
        ),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        cmd_train(&TrainArgs {
            config: desk_config_path(),
            out_dir: d.clone(),
        })
        .unwrap();
    }
    let (fa, fb) = (files_under(&dirs[0]), files_under(&dirs[1]));
    let identical = fa == fb
        && fa.iter().all(|f| std::fs::read(dirs[0].join(f)).unwrap() == std::fs::read(dirs[1].join(f)).unwrap());
    let has_params = fa.iter().any(|f| f.ends_with("stage2/w1.emb")) && fa.iter().any(|f| f.ends_with("report.json"));
    outcome(identical && has_params, format!("{} files compared", fa.len()))
}

fn format_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = SplitMix64::new(808);
    let mut mismatches = 0;
    for t in 0..1000 {
        let rows = rng.next_below(9) as usize;
        let cols = rng.next_below(9) as usize;
        let scale = 10f64.powi(rng.next_below(13) as i32 - 6);
        let m = Matrix::from_fn(rows, cols, |_, _| scale * rng.next_gaussian());
        let path = tmp.path().join(format!("m{t}.emb"));
        write_emb(&path, &m).unwrap();
        let back = read_emb(&path).unwrap();
        let expected = m.map(|v| f64::from(v as f32));
        if back.shape() != m.shape() || back.data() != expected.data() {
            mismatches += 1;
        }
    }

    let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
    let targets = Matrix::from_rows(&[[3.0, 0.0], [-2.0, 0.0], [0.0, 5.0]]).unwrap();
    let pgm = encode_pgm(&pairwise_distance_map(&a, &targets).unwrap());
    let anchors_ok = pgm == "P2\n3 1\n255\n0 255 128\n";
    outcome(
        mismatches == 0 && anchors_ok,
        format!("{mismatches} EMB1 mismatches in 1000, heatmap anchors {anchors_ok}"),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("sinkhorn feasibility", sinkhorn_feasibility),
        ("exact OT oracle and large-epsilon limit", exact_ot_oracle),
        ("gradient fidelity through unrolled sinkhorn", gradient_fidelity),
        ("loss closed forms and additivity", loss_closed_forms),
        ("compression semantics", compression_semantics),
        ("two-stage training outcome", two_stage_training),
        ("training determinism", determinism),
        ("format round-trips", format_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let r = check();
        println!(
            "criterion {} {name}: {} ({})",
            i + 1,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
