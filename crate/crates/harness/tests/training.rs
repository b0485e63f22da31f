use s4dec::config::{RunConfig, TaskKind, VariantName};
use s4dec::data::{Dataset, TaskData};
use s4dec::eval::{decode, evaluate, evaluate_discrete, max_len, metrics_csv, metrics_json};
use s4dec::longform::{run_longform_experiment, EvalSet, VARIANTS};
use s4dec::{train, Checkpoint, HarnessError};
use s4dec_core::metrics::Metrics;
use s4dec_core::search::{beam_search, greedy, SearchConfig, StepModel};
use s4dec_core::tasks::Vocab;

fn small(variant: VariantName) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.variant = variant;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.d_ffn = 32;
    c.model.state_size = 4;
    c.encoder.hidden = 16;
    c.task.vocab = 5;
    c.task.min_len = 2;
    c.task.max_len = 5;
    c.task.train_size = 10;
    c.task.valid_size = 6;
    c.batch_size = 4;
    c.epochs = 1;
    c
}

#[test]
fn one_epoch_writes_one_checkpoint_and_a_log() {
    let cfg = small(VariantName::S4);
    let data = TaskData::generate(&cfg.task).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let res = train(&cfg, 0, &data, Some(dir.path())).unwrap();
    let ckpts: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("epoch_"))
        .collect();
    assert_eq!(ckpts, vec!["epoch_001.ckpt".to_string()]);
    assert_eq!(res.kept.len(), 1);
    assert_eq!(res.log.len(), 2);
    assert_eq!(res.log[1].step, 3);
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let avg = Checkpoint::load(&dir.path().join("averaged.ckpt")).unwrap();
    assert_eq!(avg, res.averaged);
    assert_eq!(avg.manifest.config_hash, cfg.hash());
}

#[test]
fn only_the_k_best_checkpoints_survive() {
    let mut cfg = small(VariantName::Transformer);
    cfg.epochs = 4;
    cfg.keep_best = 2;
    let data = TaskData::generate(&cfg.task).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let res = train(&cfg, 1, &data, Some(dir.path())).unwrap();
    let on_disk = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("epoch_"))
        .count();
    assert_eq!(on_disk, 2);
    let mut metrics: Vec<f64> = res.log[1..].iter().map(|r| r.metric()).collect();
    metrics.sort_by(|a, b| b.total_cmp(a));
    let kept: Vec<f64> = res.kept.iter().map(|c| c.manifest.metric.unwrap()).collect();
    assert_eq!(kept, metrics[..2].to_vec());
}

#[test]
fn reruns_reproduce_the_log_bit_for_bit() {
    for (variant, kind) in [
        (VariantName::S4, TaskKind::Copy),
        (VariantName::Transformer, TaskKind::Continuous),
    ] {
        let mut cfg = small(variant);
        cfg.task.kind = kind;
        cfg.epochs = 2;
        let data = TaskData::generate(&cfg.task).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train(&cfg, 4, &data, Some(a.path())).unwrap();
        train(&cfg, 4, &data, Some(b.path())).unwrap();
        for f in ["log.jsonl", "averaged.ckpt"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}

#[test]
fn exploding_training_aborts_on_the_loss() {
    let mut cfg = small(VariantName::Transformer);
    cfg.optim.peak_lr = 1e30;
    cfg.optim.warmup = 0;
    cfg.optim.clip_norm = None;
    cfg.epochs = 3;
    let data = TaskData::generate(&cfg.task).unwrap();
    match train(&cfg, 0, &data, None) {
        Err(HarnessError::NonFiniteLoss { loss, .. }) => assert!(!loss.is_finite()),
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
}

#[test]
fn copy_loss_falls_over_the_first_three_epochs() {
    let mut cfg = RunConfig::default();
    cfg.epochs = 3;
    cfg.curve_task = None;
    let data = TaskData::generate(&cfg.task).unwrap();
    let res = train(&cfg, 0, &data, None).unwrap();
    let losses: Vec<f64> = res.log[1..].iter().map(|r| r.train_loss.unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

/// Replays the reference: strongly prefers the next reference token.
struct Teacher {
    reference: Vec<usize>,
    vocab: Vocab,
}

impl StepModel for Teacher {
    type State = usize;
    fn initial_state(&self) -> s4dec_core::error::Result<usize> {
        Ok(0)
    }
    fn step(&self, pos: &mut usize, _token: usize) -> s4dec_core::error::Result<Vec<f64>> {
        let want = self.reference.get(*pos).copied().unwrap_or(self.vocab.eos());
        *pos += 1;
        let mut logits = vec![0.0; self.vocab.size()];
        logits[want] = 20.0;
        Ok(logits)
    }
}

#[test]
fn a_teacher_model_scores_zero_error() {
    let cfg = small(VariantName::S4);
    let data = TaskData::generate(&cfg.task).unwrap();
    let Dataset::Discrete(valid) = &data.valid else {
        unreachable!()
    };
    let vocab = cfg.task.vocab();
    let mut m = Metrics::with_edges(&[2, 4]).unwrap();
    for ex in valid {
        let t = Teacher {
            reference: ex.inner().to_vec(),
            vocab,
        };
        let sc = SearchConfig {
            beam: 3,
            max_len: max_len(ex.source.len()) + 1,
            bos: vocab.bos(),
            eos: vocab.eos(),
        };
        let g = greedy(&t, &sc).unwrap();
        assert_eq!(beam_search(&t, &sc).unwrap().tokens, g.tokens);
        m.record(ex.inner(), &g.tokens);
    }
    assert_eq!(m.error_rate(), 0.0);
    assert_eq!(m.buckets.iter().map(|b| b.tally.sequences).sum::<usize>(), valid.len());
}

#[test]
fn evaluation_is_deterministic_and_writes_tables() {
    let cfg = small(VariantName::Transformer);
    let data = TaskData::generate(&cfg.task).unwrap();
    let res = train(&cfg, 2, &data, None).unwrap();
    let a = evaluate(&res.averaged, &data.valid, 3).unwrap();
    let b = evaluate(&res.averaged, &data.valid, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.metrics.total.sequences, data.valid.len());
    assert_eq!(
        a.metrics.buckets.iter().map(|b| b.tally.sequences).sum::<usize>(),
        data.valid.len()
    );
    let Dataset::Discrete(valid) = &data.valid else {
        unreachable!()
    };
    let direct = evaluate_discrete(&res.model, &res.store, valid, cfg.task.vocab(), 3, &[5, 10, 15]).unwrap();
    assert_eq!(direct.hypotheses, a.hypotheses);

    // beam 1 is greedy decoding
    let prepared = res.model.prepare(&res.store).unwrap();
    let greedy_eval = evaluate(&res.averaged, &data.valid, 1).unwrap();
    for (ex, h) in valid.iter().zip(&greedy_eval.hypotheses) {
        assert_eq!(&decode(&prepared, &ex.source, cfg.task.vocab(), 1).unwrap(), h);
    }

    let json = metrics_json(&a.metrics);
    assert_eq!(json["buckets"].as_array().unwrap().len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    metrics_csv(&p, &a.metrics).unwrap();
    let csv = std::fs::read_to_string(&p).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 1);
    assert!(csv.starts_with("bucket,lo,hi,errors"));

    let mut wrong = data.valid.clone();
    if let Dataset::Discrete(d) = &mut wrong {
        d[0].source[0] = 99;
    }
    assert!(evaluate(&res.averaged, &wrong, 1).is_err());
}

#[test]
fn untrained_models_sit_at_chance() {
    let mut cfg = RunConfig::default();
    cfg.epochs = 0;
    cfg.task.valid_size = 300;
    cfg.curve_task = None;
    let v = cfg.task.vocab as f64;
    let dir = tempfile::tempdir().unwrap();
    let report = run_longform_experiment(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.blocks.len(), 4);
    for variant in VARIANTS {
        for set in [EvalSet::InDistribution, EvalSet::Longform] {
            let e = report.block(0, variant, set).unwrap().error_rate();
            assert!((e - (v - 1.0) / v).abs() < 0.02, "{variant:?} {set:?}: {e}");
        }
    }
    for f in ["report.json", "buckets.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let again = run_longform_experiment(&cfg, None).unwrap();
    assert_eq!(again, report);
}
