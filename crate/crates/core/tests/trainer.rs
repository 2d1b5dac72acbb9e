use otreg::corpus::{Corpus, CorpusConfig};
use otreg::error::Error;
use otreg::trainer::{
    evaluate, initial_params, prepare_all, prepare_sample, run_two_stage, stage1_step, stage1_train, stage2_step,
    stage2_train, TrainConfig,
};

fn small_corpus(noise: f64, utterances: usize) -> Corpus {
    Corpus::generate(&CorpusConfig {
        utterance_count: utterances,
        eval_count: 10,
        noise_sigma: noise,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn small_train(k: usize) -> TrainConfig {
    TrainConfig {
        k,
        d_h: 32,
        learning_rate: 0.2,
        lr_min: 0.002,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let corpus = small_corpus(0.05, 5);
    let cfg = TrainConfig {
        stage1_epochs: 0,
        stage2_epochs: 0,
        ..small_train(2)
    };
    let samples = prepare_all(&corpus.train, &corpus.table, &cfg).unwrap();
    let init = initial_params(&corpus, &cfg);
    let (after1, r1) = stage1_train(&samples, init.clone(), &corpus.table, &cfg).unwrap();
    let (after2, r2) = stage2_train(&samples, init.clone(), &corpus.table, &cfg).unwrap();
    assert_eq!(after1, init);
    assert_eq!(after2, init);
    assert!(r1.is_empty() && r2.is_empty());
}

#[test]
fn cross_entropy_decreases_on_single_token_corpus() {
    let corpus = Corpus::generate(&CorpusConfig {
        utterance_count: 50,
        eval_count: 1,
        token_len_range: (1, 1),
        noise_sigma: 0.0,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        stage1_epochs: 1,
        stage2_epochs: 0,
        ..small_train(2)
    };
    let samples = prepare_all(&corpus.train, &corpus.table, &cfg).unwrap();
    let init = initial_params(&corpus, &cfg);
    let mean_ce = |p| {
        samples
            .iter()
            .map(|s| stage1_step(s, p, &corpus.table, &cfg).unwrap().1.l_ce)
            .sum::<f64>()
            / samples.len() as f64
    };
    let (trained, records) = stage1_train(&samples, init.clone(), &corpus.table, &cfg).unwrap();
    assert_eq!(records.len(), 50);
    assert!(mean_ce(&trained) < mean_ce(&init));
}

#[test]
fn training_is_deterministic() {
    let corpus = small_corpus(0.05, 8);
    let cfg = TrainConfig {
        stage1_epochs: 1,
        stage2_epochs: 1,
        ..small_train(2)
    };
    let a = run_two_stage(&corpus, &cfg).unwrap();
    let b = run_two_stage(&corpus, &cfg).unwrap();
    assert_eq!(a.stage2, b.stage2);
    assert_eq!(a.stage2_eval, b.stage2_eval);
    assert_eq!(a.records, b.records);
}

#[test]
fn zero_ot_weight_reduces_to_stage1_gradients() {
    let corpus = small_corpus(0.05, 4);
    let cfg = TrainConfig {
        lambda_ot: 0.0,
        ..small_train(2)
    };
    let params = initial_params(&corpus, &cfg);
    for sample in &corpus.train {
        let s = prepare_sample(sample, &corpus.table, &cfg).unwrap();
        let (g1, _) = stage1_step(&s, &params, &corpus.table, &cfg).unwrap();
        let (g2, report) = stage2_step(&s, &params, &corpus.table, &cfg).unwrap();
        assert_eq!(report.l_total, report.l_ce);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }
}

#[test]
fn step_report_is_additive() {
    let corpus = small_corpus(0.05, 4);
    let cfg = small_train(2);
    let params = initial_params(&corpus, &cfg);
    for sample in &corpus.train {
        let s = prepare_sample(sample, &corpus.table, &cfg).unwrap();
        let (_, r) = stage2_step(&s, &params, &corpus.table, &cfg).unwrap();
        assert_eq!(r.l_total, r.l_ce + cfg.lambda_ot * r.l_ot);
        assert_eq!(r.l_ot, r.l_cost + cfg.lambda_spr * r.l_spr);
    }
}

#[test]
fn oracle_adapter_aligns_perfectly() {
    let corpus = small_corpus(0.0, 1);
    let cfg = small_train(1);
    let eval = prepare_all(&corpus.eval, &corpus.table, &cfg).unwrap();
    let oracle = corpus.oracle_adapter(1).unwrap();
    let report = evaluate(&eval, &oracle, &corpus.table, &cfg).unwrap();
    assert_eq!(report.alignment_accuracy, 1.0, "{report:?}");
    assert_eq!(report.pad_alignment_accuracy, 1.0);
}

#[test]
fn untrained_adapter_is_near_chance() {
    let corpus = small_corpus(0.05, 1);
    let cfg = small_train(2);
    let eval = prepare_all(&corpus.eval, &corpus.table, &cfg).unwrap();
    let report = evaluate(&eval, &initial_params(&corpus, &cfg), &corpus.table, &cfg).unwrap();
    assert!(report.alignment_accuracy < 2.0 * report.chance_accuracy, "{report:?}");
}

#[test]
fn exact_pairs_compress_by_half() {
    let corpus = Corpus::generate(&CorpusConfig {
        utterance_count: 1,
        eval_count: 10,
        repeat_range: (2, 2),
        noise_sigma: 0.0,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = small_train(1);
    let oracle = corpus.oracle_adapter(1).unwrap();
    for sample in &corpus.eval {
        let s = prepare_sample(sample, &corpus.table, &cfg).unwrap();
        let report = evaluate(std::slice::from_ref(&s), &oracle, &corpus.table, &cfg).unwrap();
        let n_a = s.stacked.rows() as f64;
        assert!(report.mean_compression_ratio <= 0.5 + 1.0 / n_a, "{report:?}");
    }
}

#[test]
fn diverging_run_names_the_sample() {
    let corpus = small_corpus(0.05, 3);
    let cfg = TrainConfig {
        learning_rate: 1e200,
        lr_min: 1e199,
        stage2_epochs: 0,
        ..small_train(2)
    };
    match run_two_stage(&corpus, &cfg) {
        Err(Error::Divergence { sample, .. }) => assert!(sample < 3),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn cold_start_comparison_is_reported() {
    let corpus = small_corpus(0.05, 4);
    let cfg = TrainConfig {
        stage1_epochs: 1,
        stage2_epochs: 1,
        compare_cold_start: true,
        ..small_train(2)
    };
    let run = run_two_stage(&corpus, &cfg).unwrap();
    assert!(run.cold_stage2_eval.is_some());
}
