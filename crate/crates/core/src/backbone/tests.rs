use super::*;
use crate::util::rng_from_seed;

fn tiny(arch: Architecture) -> BackboneConfig {
    BackboneConfig {
        architecture: arch,
        positions: Positions::Learned,
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 20,
        max_seq_len: 16,
        seed: 7,
    }
}

fn lora(targets: &[&str]) -> LoraConfig {
    LoraConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
        target_layers: targets.iter().map(|s| s.to_string()).collect(),
    }
}

fn perturbed(model: &mut AdaptedModel<f64>, seed: u64) {
    let mut rng = rng_from_seed(seed);
    for id in model.backbone.params.trainable_ids().collect::<Vec<_>>() {
        model
            .backbone
            .params
            .get_mut(id)
            .mapv_inplace(|v| v + 0.3 * (rng.random::<f64>() - 0.5));
    }
}

fn sample(model: &AdaptedModel<f64>) -> Example<f64> {
    let doc = [6, 7, 8, 9, 10];
    let summary = [8, 10];
    let g = Array2::from_shape_fn((doc.len(), model.config().d_model), |(i, j)| 0.1 * (i + j % 3) as f64);
    model.backbone.layout(&doc, &summary, Some(&g), true).unwrap()
}

fn check_gradients(model: &mut AdaptedModel<f64>) {
    let ex = sample(model);
    let (_, grads) = model
        .loss_and_grads::<ChaCha8Rng>(&ex.input(), &ex.targets, 1.0, None)
        .unwrap();
    let ids: Vec<ParamId> = model.backbone.params.trainable_ids().collect();
    assert!(!ids.is_empty());
    let h = 1e-6;
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = grads.get(id).unwrap().clone();
        let (rows, cols) = analytic.dim();
        for r in (0..rows).step_by(rows.div_ceil(3).max(1)) {
            for c in (0..cols).step_by(cols.div_ceil(3).max(1)) {
                let orig = model.backbone.params.get(id)[[r, c]];
                model.backbone.params.get_mut(id)[[r, c]] = orig + h;
                let plus = model.loss(&ex.input(), &ex.targets).unwrap();
                model.backbone.params.get_mut(id)[[r, c]] = orig - h;
                let minus = model.loss(&ex.input(), &ex.targets).unwrap();
                model.backbone.params.get_mut(id)[[r, c]] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic[[r, c]];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "{}[{r},{c}]: analytic {a} vs numeric {fd}",
                    model.backbone.params.name(id)
                );
            }
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn param_count_closed_form() {
    for arch in [Architecture::DecoderOnly, Architecture::Seq2seq] {
        let cfg = tiny(arch);
        let bb = Backbone::<f64>::build(&cfg).unwrap();
        assert_eq!(bb.param_count(), cfg.param_count());
    }
}

#[test]
fn reference_trainable_share_below_half_percent() {
    let cfg = BackboneConfig::reference();
    let dims: Vec<(usize, usize)> = (0..cfg.layers).flat_map(|_| [(cfg.d_model, cfg.d_model); 4]).collect();
    let trainable = crate::lora::trainable_param_count(&LoraConfig::default(), &dims).unwrap();
    let share = trainable as f64 / (cfg.param_count() + trainable) as f64;
    assert_eq!(trainable, 65536);
    assert!(share < 0.005, "{share}");
}

#[test]
fn lora_gradients_match_finite_differences() {
    for arch in [Architecture::DecoderOnly, Architecture::Seq2seq] {
        let bb = Backbone::<f64>::build(&tiny(arch)).unwrap();
        let mut model = attach_lora(bb, &lora(&["all"]), true, &AttachOptions::default()).unwrap();
        perturbed(&mut model, 11);
        check_gradients(&mut model);
    }
}

#[test]
fn full_gradients_match_finite_differences() {
    for arch in [Architecture::DecoderOnly, Architecture::Seq2seq] {
        let mut model = Backbone::<f64>::build(&tiny(arch)).unwrap().into_trainable();
        check_gradients(&mut model);
    }
}

#[test]
fn gamma_is_ignored_without_rst_or_with_zero_up() {
    let bb = Backbone::<f64>::build(&tiny(Architecture::DecoderOnly)).unwrap();
    let plain = attach_lora(bb.clone(), &lora(&["qkv"]), false, &AttachOptions::default()).unwrap();
    let rst = attach_lora(bb, &lora(&["qkv"]), true, &AttachOptions::default()).unwrap();
    let ex = sample(&plain);
    let a = plain.logits(&ex.input()).unwrap();
    let b = rst.logits(&ex.input()).unwrap();
    assert_eq!(a, b);
    let mut rst = rst;
    perturbed(&mut rst, 3);
    let with = rst.logits(&ex.input()).unwrap();
    let mut no_gamma = ex.clone();
    no_gamma.gamma = None;
    let without = rst.logits(&no_gamma.input()).unwrap();
    assert!((&with - &without).iter().any(|v| v.abs() > 1e-9));
}

#[test]
fn only_adapters_train() {
    let bb = Backbone::<f64>::build(&tiny(Architecture::DecoderOnly)).unwrap();
    let model = attach_lora(bb, &lora(&["attention"]), true, &AttachOptions::default()).unwrap();
    let expected: usize = model.target_dims().iter().map(|(_, a, b)| 2 * (a + b)).sum();
    assert_eq!(model.trainable_count(), expected);
    assert_eq!(model.gamma_targets.len(), 6);
}

#[test]
fn config_errors() {
    let bb = Backbone::<f64>::build(&tiny(Architecture::DecoderOnly)).unwrap();
    let unknown = attach_lora(bb.clone(), &lora(&["layers.9.attn.q"]), true, &AttachOptions::default());
    assert!(matches!(unknown, Err(Error::Config(_))));
    let opts = AttachOptions {
        gamma_targets: Some(vec!["layers.0.ffn.down".into()]),
        first_layer_only: false,
        seed: 0,
    };
    let wide = attach_lora(bb.clone(), &lora(&["all"]), true, &opts);
    assert!(matches!(wide, Err(Error::Config(_))));
    let big_rank = LoraConfig { rank: 8, ..lora(&["all"]) };
    assert!(matches!(attach_lora(bb, &big_rank, true, &AttachOptions::default()), Err(Error::Config(_))));
    let bad = BackboneConfig { heads: 3, ..tiny(Architecture::DecoderOnly) };
    assert!(matches!(Backbone::<f64>::build(&bad), Err(Error::Config(_))));
}

#[test]
fn containers_round_trip() {
    let bb = Backbone::<f64>::build(&tiny(Architecture::Seq2seq)).unwrap();
    let back = Backbone::<f64>::from_container(&Container::from_bytes(&bb.to_container().to_bytes()).unwrap()).unwrap();
    assert_eq!(back.params.full_checksum(), Backbone::<f64>::from_container(&bb.to_container()).unwrap().params.full_checksum());
    let mut model = attach_lora(bb, &lora(&["all"]), true, &AttachOptions::default()).unwrap();
    perturbed(&mut model, 5);
    let saved = model.adapter_container();
    let mut fresh = attach_lora(back, &lora(&["all"]), true, &AttachOptions::default()).unwrap();
    fresh.load_adapter_container(&saved).unwrap();
    let ex = sample(&model);
    let a = model.logits(&ex.input()).unwrap();
    let b = fresh.logits(&ex.input()).unwrap();
    assert!((&a - &b).iter().all(|v| v.abs() < 1e-5));
}
