use ndarray::Array2;
use rand::Rng;
use rstlora::backbone::Positions;
use rstlora::parser_io::{synth_parse, SynthConfig};
use rstlora::tokenizer::content_id;
use rstlora::trainer::{generate, greedy, train, DecodeConfig, Sample, Schedule, TrainConfig};
use rstlora::util::rng_from_seed;
use rstlora::{attach_lora, AttachOptions, Backbone, BackboneConfig, LoraConfig, ModelF32};

fn backbone_config() -> BackboneConfig {
    BackboneConfig {
        positions: Positions::Sinusoidal,
        layers: 1,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 30,
        max_seq_len: 40,
        seed: 3,
        ..BackboneConfig::default()
    }
}

fn model(rank: usize) -> ModelF32 {
    let bb = Backbone::<f32>::build(&backbone_config()).unwrap();
    let lora = LoraConfig {
        rank,
        alpha: 2.0 * rank as f64,
        dropout: 0.1,
        target_layers: vec!["all".into()],
    };
    attach_lora(bb, &lora, true, &AttachOptions::default()).unwrap()
}

/// Copy task: the summary is the document itself.
fn copy_samples(n: usize, seed: u64, d_model: usize) -> Vec<Sample<f32>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(3..=6);
            let doc: Vec<usize> = (0..len).map(|_| content_id(rng.random_range(0..20))).collect();
            let gamma = Array2::from_shape_fn((len, d_model), |(t, _)| if t % 2 == 0 { 1.0 } else { 0.0 });
            Sample {
                doc_id: format!("copy-{i}"),
                summary: doc.clone(),
                doc,
                gamma: Some(gamma),
            }
        })
        .collect()
}

fn train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        warmup_ratio: 0.1,
        weight_decay: 0.0,
        epochs: 1000,
        batch_size: 8,
        early_stopping_patience: 1000,
        seed: 42,
        max_steps: Some(steps),
        ..TrainConfig::default()
    }
}

fn short_decode() -> DecodeConfig {
    DecodeConfig {
        beam_size: 2,
        max_length: 8,
        ..DecodeConfig::default()
    }
}

#[test]
fn planted_nucleus_loss_decreases_over_200_steps() {
    let synth = SynthConfig {
        n_docs: 72,
        n_edu_range: (3, 4),
        tokens_per_edu_range: (2, 3),
        vocab_size: 20,
        seed: 42,
        ..SynthConfig::default()
    };
    let vocab = synth.vocab();
    let samples: Vec<Sample<f32>> = synth_parse(&synth)
        .unwrap()
        .iter()
        .map(|d| Sample {
            doc_id: d.parse.doc_id().to_string(),
            doc: vocab.encode(&d.document_text()).unwrap(),
            summary: vocab.encode(&d.summary_text()).unwrap(),
            gamma: None,
        })
        .collect();
    let bb = Backbone::<f32>::build(&BackboneConfig { layers: 2, ..backbone_config() }).unwrap();
    let lora = LoraConfig {
        rank: 4,
        alpha: 8.0,
        dropout: 0.1,
        target_layers: vec!["all".into()],
    };
    let mut m = attach_lora(bb, &lora, false, &AttachOptions::default()).unwrap();
    let report = train(&mut m, &samples[..64], &samples[64..], &train_config(200), &short_decode()).unwrap();
    assert_eq!(report.steps, 200);
    let head: f64 = report.step_losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = report.step_losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss {head} -> {tail}");
}

#[test]
fn training_is_deterministic_and_leaves_backbone_frozen() {
    let train_set = copy_samples(24, 1, 16);
    let val_set = copy_samples(3, 2, 16);
    let run = || {
        let mut m = model(2);
        let frozen = m.frozen_checksum();
        let before = m.adapter_checksum();
        let report = train(&mut m, &train_set, &val_set, &train_config(12), &short_decode()).unwrap();
        assert_eq!(m.frozen_checksum(), frozen);
        assert_ne!(m.adapter_checksum(), before);
        (report, m.adapter_checksum())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn seed_changes_the_trajectory() {
    let train_set = copy_samples(24, 1, 16);
    let val_set = copy_samples(3, 2, 16);
    let mut a = model(2);
    let mut b = model(2);
    let ra = train(&mut a, &train_set, &val_set, &train_config(6), &short_decode()).unwrap();
    let cfg = TrainConfig { seed: 43, ..train_config(6) };
    let rb = train(&mut b, &train_set, &val_set, &cfg, &short_decode()).unwrap();
    assert_ne!(ra.step_losses, rb.step_losses);
}

#[test]
fn best_checkpoint_is_restored() {
    let train_set = copy_samples(32, 5, 16);
    let val_set = copy_samples(4, 6, 16);
    let cfg = TrainConfig {
        max_steps: None,
        epochs: 4,
        ..train_config(0)
    };
    let mut m = model(2);
    let report = train(&mut m, &train_set, &val_set, &cfg, &short_decode()).unwrap();
    let best = report.epochs.iter().find(|e| e.epoch == report.best_epoch).unwrap();
    assert!(report.epochs.iter().all(|e| e.val_r2_f1 <= best.val_r2_f1));
    let val = rstlora::trainer::validation_r2(&m, &val_set, &short_decode().greedy()).unwrap();
    assert_eq!(val, best.val_r2_f1);
}

#[test]
fn beam_of_one_matches_greedy_and_never_repeats_trigrams() {
    let mut m = model(4);
    let train_set = copy_samples(48, 9, 16);
    let val_set = copy_samples(3, 10, 16);
    train(&mut m, &train_set, &val_set, &train_config(60), &short_decode()).unwrap();
    let decode = DecodeConfig {
        beam_size: 1,
        max_length: 12,
        ..DecodeConfig::default()
    };
    for s in copy_samples(10, 11, 16) {
        let g = greedy(&m, &s.doc, s.gamma.as_ref(), &decode).unwrap();
        let b = generate(&m, &s.doc, s.gamma.as_ref(), &decode).unwrap();
        assert_eq!(g, b);
        let wide = generate(&m, &s.doc, s.gamma.as_ref(), &DecodeConfig { beam_size: 4, ..decode.clone() }).unwrap();
        for out in [&g, &wide] {
            assert!(out.len() <= 12);
            let trigrams: Vec<&[usize]> = out.windows(3).collect();
            for (i, t) in trigrams.iter().enumerate() {
                assert!(!trigrams[i + 1..].contains(t), "repeated trigram in {out:?}");
            }
        }
    }
}

#[test]
fn schedule_at_sampled_steps() {
    let s = Schedule::new(1e-3, 0.2, 100);
    assert_eq!(s.warmup_steps, 20);
    let expect = [(0, 0.0), (10, 5e-4), (20, 1e-3), (60, 5e-4), (100, 0.0)];
    for (step, lr) in expect {
        assert!((s.lr(step) - lr).abs() < 1e-15, "step {step}: {} vs {lr}", s.lr(step));
    }
}
