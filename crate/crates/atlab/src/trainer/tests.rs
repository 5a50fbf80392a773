use super::*;
use crate::model::ForwardOptions;
use crate::synthdata::make_dataset;
use crate::tensor::rng;

/// A few-second task: short utterances, few samples.
fn micro_task() -> TaskConfig {
    TaskConfig {
        vocab_size: 6,
        num_speakers: 2,
        frame_dim: 4,
        tokens_min: 2,
        tokens_max: 4,
        duration_min: 1,
        duration_max: 2,
        speed_factors: vec![0.9, 1.1],
        noise_sigma_min: 0.01,
        noise_sigma_max: 0.02,
        train_size: 6,
        valid_size: 3,
        test_size: 2,
        master_seed: 7,
    }
}

fn micro_model(task: &TaskConfig) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden_size: 8,
        num_heads: 1,
        ffn_filter_size: 16,
        ffn_kernel_size: 3,
        prenet_bottleneck_size: 2,
        speaker_dim: 4,
        vocab_size: task.vocab_size,
        num_speakers: task.num_speakers,
        frame_dim: task.frame_dim,
        prenet_inference_dropout: false,
        ..ModelConfig::default()
    }
}

fn micro_run() -> RunConfig {
    let task = micro_task();
    let model = micro_model(&task);
    let train = TrainConfig {
        batch_frames: 8,
        total_steps: 6,
        warmup_steps: 3,
        validate_every: 3,
        eval_samples: 2,
        ..TrainConfig::default()
    };
    RunConfig { task, model, train }
}

// ── loss ─────────────────────────────────────────────────────────────────

#[test]
fn stop_targets_mark_only_the_last_frame() {
    assert_eq!(stop_targets(4), vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(stop_targets(1), vec![1.0]);
}

#[test]
fn zero_lambda_ignores_attention_entirely() {
    let task = micro_task();
    let model = Model::new(micro_model(&task), 3).unwrap();
    let dataset = make_dataset(&task).unwrap();
    let sample = &dataset.train[0];
    let opts = ForwardOptions { train: true, seed: 11 };

    let run = |attns_on: bool| {
        let mut tape = Tape::new();
        let out = model
            .forward_teacher_forced(&mut tape, &sample.phonemes, &sample.frames, sample.speaker, opts)
            .unwrap();
        let attns: Vec<TensorId> = if attns_on { out.attns.clone() } else { Vec::new() };
        let parts = total_loss(
            &mut tape,
            out.mel,
            &sample.frames,
            out.stop_logits,
            &stop_targets(sample.s_len()),
            &attns,
            0.0,
            1.0,
            MelLossKind::MeanAbs,
        )
        .unwrap();
        let total = tape.value(parts.total);
        tape.backward(parts.total).unwrap();
        let grads: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|(pid, _)| tape.grad(out.bound[pid.0]).map(|g| g.to_vec()).unwrap_or_default())
            .collect();
        (total, parts.dc, grads)
    };

    let (with, dc_with, grads_with) = run(true);
    let (without, dc_without, grads_without) = run(false);
    assert_eq!(with, without, "lambda = 0 must not read the attention matrices");
    assert_eq!(dc_with, 0.0);
    assert_eq!(dc_without, 0.0);
    assert_eq!(grads_with, grads_without, "lambda = 0 must not add gradient through attention");
}

#[test]
fn perfect_predictions_reach_minus_lambda() {
    let lambda = 0.37;
    let s = 3usize;
    let t = 3usize;
    let mel_true = vec![0.25; s * 2];
    let stop_true = stop_targets(s);

    let mut tape = Tape::new();
    let mel_pred = tape.leaf(Tensor::new(vec![s, 2], mel_true.clone()).unwrap(), false);
    // Saturated logits: sigmoid(40) and sigmoid(-40) are 1 and 0 to
    // far better than the tolerance below.
    let logits: Vec<f64> = stop_true.iter().map(|&y| if y > 0.5 { 40.0 } else { -40.0 }).collect();
    let stop_logits = tape.leaf(Tensor::new(vec![s, 1], logits).unwrap(), false);
    // All mass on the diagonal: in-band for any bandwidth, so r = 1.
    let mut diag = vec![0.0; s * t];
    for i in 0..s {
        diag[i * t + i] = 1.0;
    }
    let attn = tape.leaf(Tensor::new(vec![s, t], diag).unwrap(), false);

    let parts = total_loss(
        &mut tape,
        mel_pred,
        &mel_true,
        stop_logits,
        &stop_true,
        &[attn],
        lambda,
        0.0,
        MelLossKind::MeanAbs,
    )
    .unwrap();
    assert!((tape.value(parts.total) + lambda).abs() < 1e-9);
    assert!((parts.dc + lambda).abs() < 1e-12);
    assert!(parts.mel.abs() < 1e-12);
}

#[test]
fn constraint_gradient_matches_finite_differences_through_softmax() {
    let (s, t) = (4usize, 5usize);
    let lambda = 0.8;
    let bandwidth = 1.0;
    let base: Vec<f64> = (0..s * t).map(|i| 0.3 * ((i * 7 % 11) as f64) - 1.0).collect();
    let mel_true = vec![0.5; s * 2];
    let stop_true = stop_targets(s);

    let eval = |logits: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let logit_id = tape.leaf(Tensor::new(vec![s, t], logits.to_vec()).unwrap(), true);
        let attn = tape.softmax_lastdim(logit_id).unwrap();
        let mel_pred = tape.leaf(Tensor::new(vec![s, 2], mel_true.clone()).unwrap(), false);
        let stop_logits = tape.leaf(Tensor::new(vec![s, 1], vec![0.0; s]).unwrap(), false);
        let parts = total_loss(
            &mut tape,
            mel_pred,
            &mel_true,
            stop_logits,
            &stop_true,
            &[attn],
            lambda,
            bandwidth,
            MelLossKind::MeanAbs,
        )
        .unwrap();
        let value = tape.value(parts.total);
        let grad = if want_grad {
            tape.backward(parts.total).unwrap();
            tape.grad(logit_id).unwrap().to_vec()
        } else {
            Vec::new()
        };
        (value, grad)
    };

    let (_, analytic) = eval(&base, true);
    let h = 1e-5;
    for i in 0..s * t {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        assert!(
            (analytic[i] - numeric).abs() / denom < 1e-4,
            "logit {i}: analytic {} vs numeric {numeric}",
            analytic[i]
        );
    }
}

#[test]
fn non_finite_terms_are_named() {
    let s = 2usize;
    let mel_true = vec![0.0; s * 2];
    let mut tape = Tape::new();
    let mel_pred = tape.leaf(Tensor::new(vec![s, 2], vec![1e308, -1e308, 1e308, -1e308]).unwrap(), false);
    let stop_logits = tape.leaf(Tensor::new(vec![s, 1], vec![0.0; s]).unwrap(), false);
    let err = total_loss(
        &mut tape,
        mel_pred,
        &mel_true,
        stop_logits,
        &stop_targets(s),
        &[],
        0.0,
        0.0,
        MelLossKind::MeanSq,
    )
    .unwrap_err();
    assert!(err.to_string().contains("mel"), "got: {err}");
}

// ── config ───────────────────────────────────────────────────────────────

#[test]
fn bandwidth_resolution() {
    let dataset = make_dataset(&micro_task()).unwrap();
    assert_eq!(resolve_bandwidth(BandwidthSetting::Fixed(2.5), &dataset).unwrap(), 2.5);
    let mean =
        dataset.train.iter().map(|s| s.s_len()).sum::<usize>() as f64 / dataset.train.len() as f64;
    assert_eq!(resolve_bandwidth(BandwidthSetting::Auto, &dataset).unwrap(), (0.1 * mean).ceil());
    assert!(resolve_bandwidth(BandwidthSetting::Fixed(-1.0), &dataset).is_err());
}

#[test]
fn bandwidth_setting_parses() {
    assert_eq!("auto".parse::<BandwidthSetting>().unwrap(), BandwidthSetting::Auto);
    assert_eq!("3.5".parse::<BandwidthSetting>().unwrap(), BandwidthSetting::Fixed(3.5));
    assert!("wide".parse::<BandwidthSetting>().is_err());
}

#[test]
fn run_config_round_trips_through_text() {
    let mut run = micro_run();
    run.train.lambda = 0.02;
    run.train.mel_loss = MelLossKind::MeanSq;
    run.train.bandwidth = BandwidthSetting::Fixed(2.0);
    let parsed = RunConfig::parse(&run.serialize()).unwrap();
    assert_eq!(parsed, run);
}

#[test]
fn run_config_syncs_model_interface_with_task() {
    let text = "[task]\nvocab_size = 9\nnum_speakers = 3\nframe_dim = 6\n";
    let run = RunConfig::parse(text).unwrap();
    assert_eq!(run.model.vocab_size, 9);
    assert_eq!(run.model.num_speakers, 3);
    assert_eq!(run.model.frame_dim, 6);
}

#[test]
fn run_config_rejects_unknown_sections_and_mismatches() {
    assert!(RunConfig::parse("[extra]\nx = 1\n").is_err());
    let err = RunConfig::parse("[model]\nvocab_size = 5\n").unwrap_err();
    assert!(err.to_string().contains("disagrees"), "got: {err}");
}

#[test]
fn apply_flags_maps_switches() {
    let model = micro_model(&micro_task());
    let mut train = TrainConfig::default();
    let (m, l) = apply_flags(&model, &train);
    assert_eq!(m, model);
    assert_eq!(l, train.lambda);

    train.ln = false;
    train.pb = false;
    train.dc = false;
    let (m, l) = apply_flags(&model, &train);
    assert_eq!(m.encoder_input_mode, EncoderInputMode::Baseline);
    assert!(!m.prenet_bottleneck_enabled);
    assert_eq!(l, 0.0);
}

#[test]
fn step_metrics_render_as_json() {
    let m = StepMetrics { step: 3, lr: 0.5, mel_loss: 1.25, stop_loss: 0.5, dc_loss: -0.01, r_valid: None };
    assert_eq!(m.to_json(), "{\"step\":3,\"lr\":0.5,\"mel_loss\":1.25,\"stop_loss\":0.5,\"dc_loss\":-0.01}");
    let with_r = StepMetrics { r_valid: Some(0.75), ..m };
    assert!(with_r.to_json().ends_with(",\"r_valid\":0.75}"));
}

// ── training ─────────────────────────────────────────────────────────────

#[test]
fn training_runs_and_logs_every_step() {
    let run = micro_run();
    let out = train(&run).unwrap();
    assert_eq!(out.metrics.len(), run.train.total_steps);
    for (i, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.step, i + 1);
        assert_eq!(m.lr, noam_lr(run.model.hidden_size, m.step as u64, run.train.warmup_steps as u64).unwrap());
        assert!(m.mel_loss.is_finite() && m.stop_loss.is_finite() && m.dc_loss.is_finite());
        let expect_valid = m.step % run.train.validate_every == 0 || m.step == run.train.total_steps;
        assert_eq!(m.r_valid.is_some(), expect_valid, "step {}", m.step);
        if let Some(r) = m.r_valid {
            assert!((0.0..=1.0).contains(&r));
        }
    }
    assert_eq!(out.checkpoint.adam.step, run.train.total_steps as u64);
    // The stored bandwidth is resolved, never "auto".
    assert!(matches!(out.checkpoint.train.bandwidth, BandwidthSetting::Fixed(_)));
}

#[test]
fn training_is_bit_deterministic() {
    let run = micro_run();
    let a = train(&run).unwrap();
    let b = train(&run).unwrap();
    assert_eq!(a.metrics, b.metrics);
    for ((_, pa), (_, pb)) in a.checkpoint.model.params().iter().zip(b.checkpoint.model.params().iter()) {
        assert_eq!(pa.value.data, pb.value.data, "{}", pa.name);
    }

    let mut other = run.clone();
    other.train.seed = 1;
    let c = train(&other).unwrap();
    assert_ne!(a.metrics, c.metrics, "a different seed must change the run");
}

#[test]
fn training_writes_jsonl_and_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = micro_run();
    run.train.log_path = dir.path().join("train.jsonl").to_string_lossy().into_owned();
    run.train.ckpt_path = dir.path().join("ckpt.bin").to_string_lossy().into_owned();
    let out = train(&run).unwrap();

    let log = std::fs::read_to_string(&run.train.log_path).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), run.train.total_steps);
    assert_eq!(lines[0], out.metrics[0].to_json());

    // Paths are local to the writing run, so checkpoints drop them.
    let loaded = Checkpoint::load(Path::new(&run.train.ckpt_path)).unwrap();
    let expected =
        TrainConfig { ckpt_path: String::new(), log_path: String::new(), ..out.checkpoint.train.clone() };
    assert_eq!(loaded.train, expected);
}

// ── checkpoint ───────────────────────────────────────────────────────────

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let run = micro_run();
    let out = train(&run).unwrap();
    let ckpt = &out.checkpoint;

    let loaded = Checkpoint::from_records(ckpt.to_records()).unwrap();
    assert_eq!(loaded.task, ckpt.task);
    assert_eq!(loaded.train, ckpt.train);
    assert_eq!(loaded.model.config(), ckpt.model.config());
    assert_eq!(loaded.adam.step, ckpt.adam.step);
    for ((_, pa), (_, pb)) in ckpt.model.params().iter().zip(loaded.model.params().iter()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.value.data, pb.value.data, "{}", pa.name);
    }
    assert_eq!(loaded.adam.m, ckpt.adam.m);
    assert_eq!(loaded.adam.v, ckpt.adam.v);

    // The loaded model evaluates identically.
    let dataset = make_dataset(&run.task).unwrap();
    let a = evaluate(ckpt, &dataset, Split::Valid, true, true, None).unwrap();
    let b = evaluate(&loaded, &dataset, Split::Valid, true, true, None).unwrap();
    assert_eq!(a, b);
    let a = evaluate(ckpt, &dataset, Split::Valid, false, true, Some(2)).unwrap();
    let b = evaluate(&loaded, &dataset, Split::Valid, false, true, Some(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_rejects_tampered_records() {
    let run = micro_run();
    let ckpt = train(&run).unwrap().checkpoint;

    let mut missing = ckpt.to_records();
    let idx = missing.iter().position(|r| r.name == "param.mel.w").unwrap();
    missing.remove(idx);
    assert!(Checkpoint::from_records(missing).is_err());

    let mut extra = ckpt.to_records();
    extra.push(Record::scalar("mystery", 1.0));
    assert!(Checkpoint::from_records(extra).is_err());
}

// ── evaluation ───────────────────────────────────────────────────────────

/// Diagonal rate of the uniform attention matrix for one sample.
fn uniform_rate(s_len: usize, t_len: usize, bandwidth: f64) -> f64 {
    let mask = band_mask(s_len, t_len, bandwidth);
    mask.iter().sum::<f64>() / (s_len as f64 * t_len as f64)
}

#[test]
fn untrained_model_scores_near_the_uniform_baseline() {
    let task = micro_task();
    let mut mcfg = micro_model(&task);
    mcfg.dropout_rate = 0.0;
    let model = Model::new(mcfg, 5).unwrap();
    let dataset = make_dataset(&task).unwrap();
    let train_cfg = TrainConfig { bandwidth: BandwidthSetting::Fixed(1.0), ..TrainConfig::default() };
    let adam = AdamState::zeros_like(model.params());
    let ckpt = Checkpoint { model, task, train: train_cfg, adam };

    let report = evaluate(&ckpt, &dataset, Split::Valid, true, true, None).unwrap();
    let expected: f64 = dataset
        .valid
        .iter()
        .map(|s| uniform_rate(s.s_len(), s.t_len(), 1.0))
        .sum::<f64>()
        / dataset.valid.len() as f64;
    assert!(
        (report.mean_r - expected).abs() < 0.15,
        "untrained r {} vs uniform baseline {expected}",
        report.mean_r
    );
}

#[test]
fn evaluation_report_shape_and_bounds() {
    let run = micro_run();
    let out = train(&run).unwrap();
    let dataset = make_dataset(&run.task).unwrap();

    for teacher_forced in [true, false] {
        let report = evaluate(&out.checkpoint, &dataset, Split::Valid, teacher_forced, true, None).unwrap();
        assert_eq!(report.per_sample_r.len(), dataset.valid.len());
        for &r in &report.per_sample_r {
            assert!((0.0..=1.0).contains(&r), "r {r} out of bounds");
        }
        assert!((report.mean_r
            - report.per_sample_r.iter().sum::<f64>() / report.per_sample_r.len() as f64)
            .abs()
            < 1e-12);
        assert!(report.mel_loss.is_finite() && report.mel_loss >= 0.0);
        assert!((0.0..=1.0).contains(&report.stop_accuracy));
        let names: Vec<&str> = report.position_similarity.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["baseline", "learnable_weight", "layer_norm"]);
        for &(_, v) in &report.position_similarity {
            assert!((-1.0..=1.0).contains(&v) && v.is_finite());
        }
    }

    let limited = evaluate(&out.checkpoint, &dataset, Split::Valid, true, true, Some(2)).unwrap();
    assert_eq!(limited.per_sample_r.len(), 2);
}

#[test]
fn mode_similarity_agrees_with_the_model_encoder_input() {
    let task = micro_task();
    let model = Model::new(micro_model(&task), 9).unwrap();
    let phonemes = [0usize, 2, 4, 1];
    let via_eval = mode_position_similarity(&model, &phonemes, EncoderInputMode::LayerNorm).unwrap();
    let (combined, p) = model.encoder_input_matrices(&phonemes).unwrap();
    let d = model.config().hidden_size;
    let direct = position_similarity(&combined, &p, phonemes.len(), d).unwrap();
    assert!((via_eval - direct).abs() < 1e-12, "{via_eval} vs {direct}");
}

#[test]
fn mel_error_and_stop_agreement_score_prefixes() {
    // Prediction two frames, target three: score the overlap only.
    let pred = vec![1.0, 1.0, 2.0, 2.0];
    let target = vec![1.5, 1.5, 2.5, 2.5, 9.0, 9.0];
    assert!((mel_error(&pred, &target, 2, MelLossKind::MeanAbs).unwrap() - 0.5).abs() < 1e-12);
    assert!((mel_error(&pred, &target, 2, MelLossKind::MeanSq).unwrap() - 0.25).abs() < 1e-12);

    // Stop at frame 2 of 3: prediction [false, false, true] is perfect.
    assert_eq!(stop_agreement(&[false, false, true], 3), 1.0);
    // Early stop: [true] against a 3-frame truth scores the single
    // overlapping frame as a miss.
    assert_eq!(stop_agreement(&[true], 3), 0.0);
    // Never stopped, truth 3 frames, 4 predicted: frames 0 and 1 agree
    // (no stop), frame 2 misses the true stop.
    assert!((stop_agreement(&[false, false, false, false], 3) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn max_frames_bounds_the_task() {
    let task = micro_task();
    let m = max_frames_for(&task);
    // Longest utterance: 4 tokens x 2 frames x 1.1 speed, rounded up.
    assert!(m >= 9);
    assert!(m <= MAX_SEQ_LEN);
    let worst = task.tokens_max as f64 * task.duration_max as f64 * 1.1;
    assert!(m as f64 >= worst);
}

// ── ablation ─────────────────────────────────────────────────────────────

#[test]
fn ablation_is_a_pure_function_of_config_and_seeds() {
    let mut run = micro_run();
    run.train.total_steps = 2;
    run.train.warmup_steps = 2;
    run.train.eval_samples = 2;
    let seeds = [3, 4];

    let a = ablate(&run, &seeds, None, 1).unwrap();
    let b = ablate(&run, &seeds, None, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), ARMS.len() * seeds.len());

    let arms: Vec<&str> = a.iter().map(|r| r.arm.as_str()).collect();
    assert_eq!(arms[..2], ["full", "full"]);
    assert_eq!(a[0].seed, 3);
    assert_eq!(a[1].seed, 4);
    for row in &a {
        assert!((0.0..=1.0).contains(&row.r));
        assert!(row.mel_loss.is_finite());
    }
}

#[test]
fn threaded_ablation_matches_sequential() {
    let mut run = micro_run();
    run.train.total_steps = 2;
    run.train.warmup_steps = 2;
    run.train.eval_samples = 1;
    let seeds = [5];
    let sequential = ablate(&run, &seeds, None, 1).unwrap();
    let threaded = ablate(&run, &seeds, None, 3).unwrap();
    assert_eq!(sequential, threaded);
}

#[test]
fn ablation_writes_logs_and_checkpoints_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = micro_run();
    run.train.total_steps = 2;
    run.train.warmup_steps = 2;
    run.train.eval_samples = 1;
    ablate(&run, &[1], Some(dir.path()), 1).unwrap();
    for key in ["full", "no_dc", "no_ln", "no_pb", "no_dc_ln_pb"] {
        assert!(dir.path().join(format!("train_{key}_1.jsonl")).exists(), "{key} log");
        assert!(dir.path().join(format!("ckpt_{key}_1.bin")).exists(), "{key} checkpoint");
    }
}

#[test]
fn ablation_csv_round_trips_fields() {
    let rows = vec![
        AblationRow { arm: "full".into(), seed: 1, r: 0.875, mel_loss: 0.5, stop_acc: 1.0 },
        AblationRow { arm: "-DC".into(), seed: 2, r: 0.25, mel_loss: 0.75, stop_acc: 0.5 },
    ];
    let csv = ablation_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "arm,seed,r,mel_loss,stop_acc");
    assert_eq!(lines.next().unwrap(), "full,1,0.875,0.5,1");
    assert_eq!(lines.next().unwrap(), "-DC,2,0.25,0.75,0.5");
}

#[test]
fn median_and_arm_median() {
    assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    assert!(median(&[]).is_err());

    let rows = vec![
        AblationRow { arm: "full".into(), seed: 1, r: 0.9, mel_loss: 0.0, stop_acc: 0.0 },
        AblationRow { arm: "full".into(), seed: 2, r: 0.7, mel_loss: 0.0, stop_acc: 0.0 },
        AblationRow { arm: "full".into(), seed: 3, r: 0.8, mel_loss: 0.0, stop_acc: 0.0 },
        AblationRow { arm: "-DC".into(), seed: 1, r: 0.2, mel_loss: 0.0, stop_acc: 0.0 },
    ];
    assert_eq!(arm_median_r(&rows, "full").unwrap(), 0.8);
    assert_eq!(arm_median_r(&rows, "-DC").unwrap(), 0.2);
    assert!(arm_median_r(&rows, "-LN").is_err());
}

#[test]
fn threads_env_defaults_to_one() {
    // Only checks the default path: the env var is unset in tests.
    if std::env::var("ATLAB_THREADS").is_err() {
        assert_eq!(threads_from_env(), 1);
    }
}

// ── sample_loss ──────────────────────────────────────────────────────────

#[test]
fn sample_loss_matches_manual_composition() {
    let task = micro_task();
    let model = Model::new(micro_model(&task), 13).unwrap();
    let dataset = make_dataset(&task).unwrap();
    let sample = &dataset.train[1];
    let opts = ForwardOptions { train: false, seed: 0 };

    let mut tape = Tape::new();
    let (_, parts) = sample_loss(&model, &mut tape, sample, opts, 0.01, 1.0, MelLossKind::MeanAbs).unwrap();

    let mut tape2 = Tape::new();
    let out = model
        .forward_teacher_forced(&mut tape2, &sample.phonemes, &sample.frames, sample.speaker, opts)
        .unwrap();
    let manual = total_loss(
        &mut tape2,
        out.mel,
        &sample.frames,
        out.stop_logits,
        &stop_targets(sample.s_len()),
        &out.attns,
        0.01,
        1.0,
        MelLossKind::MeanAbs,
    )
    .unwrap();
    assert_eq!(tape.value(parts.total), tape2.value(manual.total));
}

// ── seed stream sanity ───────────────────────────────────────────────────

#[test]
fn trainer_seed_streams_are_distinct() {
    let labels = [L_INIT, L_BATCH, L_FWD, L_VALID, L_EVAL];
    let mut derived: Vec<u64> = labels.iter().map(|&l| rng::derive(0, &[l])).collect();
    derived.sort_unstable();
    derived.dedup();
    assert_eq!(derived.len(), labels.len());
}
