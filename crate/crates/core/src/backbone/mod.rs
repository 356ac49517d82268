//! Toy transformer backbone (decoder-only or encoder-decoder) whose linear
//! projections can carry discourse-weighted low-rank adapters.
//!
//! Pre-norm blocks, sinusoidal or learned positions, GELU feed-forward and an
//! output head tied to the token embedding. Every forward pass keeps the
//! activations it needs and has a matching hand-written backward pass.

mod layers;
mod params;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use layers::{Attention, Ctx, FeedForward, LayerNorm, LowRankIds, Projection};
pub use params::{Grads, ParamId, ParamStore};

use crate::container::Container;
use crate::error::{config_err, shape_err, Error, Result};
use crate::lora::{init_down, LoraAdapter, LoraConfig};
use crate::scalar::Scalar;
use crate::tokenizer::{BOS, EOS, SEP};
use crate::util::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Seq2seq,
    #[default]
    DecoderOnly,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Seq2seq => "seq2seq",
            Architecture::DecoderOnly => "decoder_only",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(Architecture::Seq2seq),
            "decoder_only" | "decoder-only" => Ok(Architecture::DecoderOnly),
            other => Err(config_err(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    #[default]
    Sinusoidal,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub positions: Positions,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            architecture: Architecture::DecoderOnly,
            positions: Positions::Sinusoidal,
            layers: 2,
            heads: 4,
            d_model: 32,
            d_ff: 64,
            vocab_size: 256,
            max_seq_len: 96,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// The 4-layer, 256-wide configuration used for parameter accounting.
    pub fn reference() -> Self {
        BackboneConfig {
            architecture: Architecture::DecoderOnly,
            positions: Positions::Learned,
            layers: 4,
            heads: 4,
            d_model: 256,
            d_ff: 1024,
            vocab_size: 50257,
            max_seq_len: 512,
            seed: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(config_err(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(config_err(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count of the backbone (no adapters).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let ln = 2 * d;
        let positions = match self.positions {
            Positions::Learned => self.max_seq_len * d,
            Positions::Sinusoidal => 0,
        };
        let embeddings = self.vocab_size * d + positions;
        match self.architecture {
            Architecture::DecoderOnly => embeddings + self.layers * (attn + ffn + 2 * ln) + ln,
            Architecture::Seq2seq => {
                let enc = self.layers * (attn + ffn + 2 * ln) + ln;
                let dec = self.layers * (2 * attn + ffn + 3 * ln) + ln;
                embeddings + enc + dec
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: LayerNorm,
    self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln2: LayerNorm,
    ffn: FeedForward,
}

struct BlockCache<T> {
    l1: layers::LnCache<T>,
    sa: layers::AttnCache<T>,
    cross: Option<(layers::LnCache<T>, layers::AttnCache<T>)>,
    l2: layers::LnCache<T>,
    ff: layers::FfnCache<T>,
}

impl Block {
    fn projections(&self) -> Vec<&Projection> {
        let mut out: Vec<&Projection> = self.self_attn.projections().into_iter().collect();
        if let Some((_, c)) = &self.cross {
            out.extend(c.projections());
        }
        out.push(&self.ffn.up);
        out.push(&self.ffn.down);
        out
    }

    fn projections_mut(&mut self) -> Vec<&mut Projection> {
        let mut out: Vec<&mut Projection> = self.self_attn.projections_mut().into_iter().collect();
        if let Some((_, c)) = &mut self.cross {
            out.extend(c.projections_mut());
        }
        out.push(&mut self.ffn.up);
        out.push(&mut self.ffn.down);
        out
    }

    fn forward<T: Scalar, R: Rng>(
        &self,
        x: &Array2<T>,
        memory: Option<&Array2<T>>,
        gamma: Option<&Array2<T>>,
        ctx: &mut Ctx<'_, T, R>,
    ) -> (Array2<T>, BlockCache<T>) {
        let (n1, l1) = self.ln1.forward(x, ctx.params);
        let (a, sa) = self.self_attn.forward(&n1, None, gamma, ctx);
        let mut h = x + &a;
        let cross = match (&self.cross, memory) {
            (Some((ln, attn)), Some(mem)) => {
                let (nc, lc) = ln.forward(&h, ctx.params);
                let (c, ca) = attn.forward(&nc, Some(mem), None, ctx);
                h += &c;
                Some((lc, ca))
            }
            _ => None,
        };
        let (n2, l2) = self.ln2.forward(&h, ctx.params);
        let (f, ff) = self.ffn.forward(&n2, gamma, ctx);
        h += &f;
        (h, BlockCache { l1, sa, cross, l2, ff })
    }

    /// Returns `(d_x, d_memory)`.
    fn backward<T: Scalar>(
        &self,
        dy: Array2<T>,
        cache: BlockCache<T>,
        params: &ParamStore<T>,
        scale: T,
        grads: &mut Grads<T>,
    ) -> (Array2<T>, Option<Array2<T>>) {
        let mut dh = dy;
        let d_n2 = self.ffn.backward(&dh, cache.ff, params, scale, grads);
        dh += &self.ln2.backward(&d_n2, cache.l2, params, grads);
        let mut d_mem = None;
        if let (Some((ln, attn)), Some((lc, ca))) = (&self.cross, cache.cross) {
            let (d_nc, dm) = attn.backward(&dh, ca, params, scale, grads);
            dh += &ln.backward(&d_nc, lc, params, grads);
            d_mem = dm;
        }
        let (d_n1, _) = self.self_attn.backward(&dh, cache.sa, params, scale, grads);
        dh += &self.ln1.backward(&d_n1, cache.l1, params, grads);
        (dh, d_mem)
    }
}

/// One forward input. `gamma` rows align with `tokens` for decoder-only
/// models and with `source` for encoder-decoder models.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a, T> {
    pub tokens: &'a [usize],
    pub source: Option<&'a [usize]>,
    pub gamma: Option<&'a Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub params: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: Option<ParamId>,
    sinusoid: Option<Array2<T>>,
    encoder: Vec<Block>,
    enc_norm: Option<LayerNorm>,
    decoder: Vec<Block>,
    final_norm: LayerNorm,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    out_std: f64,
}

impl<T: Scalar> Builder<'_, T> {
    fn normal(&mut self, name: String, shape: (usize, usize), std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Array2::from_shape_simple_fn(shape, || T::from_f64_lossy(dist.sample(rng)));
        self.params.add(name, t, false)
    }

    fn constant(&mut self, name: String, shape: (usize, usize), value: f64) -> ParamId {
        self.params.add(name, Array2::from_elem(shape, T::from_f64_lossy(value)), false)
    }

    fn projection(&mut self, name: String, a: usize, b: usize, output: bool) -> Projection {
        let std = if output { self.out_std / (a as f64).sqrt() } else { 1.0 / (a as f64).sqrt() };
        let weight = self.normal(format!("{name}.weight"), (a, b), std);
        let bias = self.constant(format!("{name}.bias"), (1, b), 0.0);
        Projection {
            name,
            weight,
            bias,
            in_dim: a,
            out_dim: b,
            lora: None,
            gamma_target: false,
        }
    }

    fn layer_norm(&mut self, name: String, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.constant(format!("{name}.gain"), (1, d), 1.0),
            bias: self.constant(format!("{name}.bias"), (1, d), 0.0),
        }
    }

    fn attention(&mut self, prefix: &str, cfg: &BackboneConfig, causal: bool) -> Attention {
        let d = cfg.d_model;
        Attention {
            q: self.projection(format!("{prefix}.q"), d, d, false),
            k: self.projection(format!("{prefix}.k"), d, d, false),
            v: self.projection(format!("{prefix}.v"), d, d, false),
            o: self.projection(format!("{prefix}.o"), d, d, true),
            heads: cfg.heads,
            causal,
        }
    }

    fn block(&mut self, prefix: &str, cfg: &BackboneConfig, causal: bool, cross: bool, self_name: &str) -> Block {
        let ln1 = self.layer_norm(format!("{prefix}.ln1"), cfg.d_model);
        let self_attn = self.attention(&format!("{prefix}.{self_name}"), cfg, causal);
        let cross = cross.then(|| {
            let ln = self.layer_norm(format!("{prefix}.ln_cross"), cfg.d_model);
            let attn = self.attention(&format!("{prefix}.cross_attn"), cfg, false);
            (ln, attn)
        });
        let ln2 = self.layer_norm(format!("{prefix}.ln2"), cfg.d_model);
        let ffn = FeedForward {
            up: self.projection(format!("{prefix}.ffn.up"), cfg.d_model, cfg.d_ff, false),
            down: self.projection(format!("{prefix}.ffn.down"), cfg.d_ff, cfg.d_model, true),
        };
        Block {
            ln1,
            self_attn,
            cross,
            ln2,
            ffn,
        }
    }
}

impl<T: Scalar> Backbone<T> {
    /// Deterministically initialized backbone; every parameter starts frozen.
    pub fn build(config: &BackboneConfig) -> Result<Self> {
        config.check()?;
        let mut params = ParamStore::default();
        let mut b = Builder {
            params: &mut params,
            rng: rng_from_seed(derive_seed(config.seed, 0xB0B0)),
            out_std: 1.0 / (2.0 * config.layers as f64).sqrt(),
        };
        let d = config.d_model;
        let emb_std = 1.0 / (d as f64).sqrt();
        let tok_emb = b.normal("embed.tokens".into(), (config.vocab_size, d), emb_std);
        let (pos_emb, sinusoid) = match config.positions {
            Positions::Learned => (Some(b.normal("embed.positions".into(), (config.max_seq_len, d), emb_std)), None),
            Positions::Sinusoidal => (None, Some(sinusoid_table::<T>(config.max_seq_len, d) * T::from_f64_lossy(emb_std))),
        };
        let (encoder, enc_norm, decoder) = match config.architecture {
            Architecture::DecoderOnly => {
                let dec = (0..config.layers)
                    .map(|l| b.block(&format!("layers.{l}"), config, true, false, "attn"))
                    .collect();
                (Vec::new(), None, dec)
            }
            Architecture::Seq2seq => {
                let enc = (0..config.layers)
                    .map(|l| b.block(&format!("encoder.layers.{l}"), config, false, false, "self_attn"))
                    .collect();
                let enc_norm = b.layer_norm("encoder.final_norm".into(), d);
                let dec = (0..config.layers)
                    .map(|l| b.block(&format!("decoder.layers.{l}"), config, true, true, "self_attn"))
                    .collect();
                (enc, Some(enc_norm), dec)
            }
        };
        let final_norm = b.layer_norm("final_norm".into(), d);
        Ok(Backbone {
            config: config.clone(),
            params,
            tok_emb,
            pos_emb,
            sinusoid,
            encoder,
            enc_norm,
            decoder,
            final_norm,
        })
    }

    pub fn projections(&self) -> impl Iterator<Item = &Projection> {
        self.encoder.iter().chain(&self.decoder).flat_map(Block::projections)
    }

    fn projections_mut(&mut self) -> impl Iterator<Item = &mut Projection> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(Block::projections_mut)
    }

    pub fn projection(&self, name: &str) -> Option<&Projection> {
        self.projections().find(|p| p.name == name)
    }

    pub fn projection_names(&self) -> Vec<String> {
        self.projections().map(|p| p.name.clone()).collect()
    }

    /// Q/K/V projections of the self-attention that sees the document:
    /// encoder self-attention for seq2seq, decoder self-attention otherwise.
    pub fn document_qkv_names(&self) -> Vec<String> {
        let blocks = match self.config.architecture {
            Architecture::Seq2seq => &self.encoder,
            Architecture::DecoderOnly => &self.decoder,
        };
        blocks
            .iter()
            .flat_map(|b| [&b.self_attn.q, &b.self_attn.k, &b.self_attn.v])
            .map(|p| p.name.clone())
            .collect()
    }

    /// Expand target keywords (`attention`, `qkv`, `document_qkv`, `ffn`,
    /// `all`) or validate exact projection names.
    pub fn resolve_targets(&self, targets: &[String]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for t in targets {
            let matched: Vec<String> = match t.as_str() {
                "all" => self.projection_names(),
                "attention" => self
                    .projection_names()
                    .into_iter()
                    .filter(|n| !n.contains(".ffn."))
                    .collect(),
                "qkv" => self
                    .projection_names()
                    .into_iter()
                    .filter(|n| n.ends_with(".q") || n.ends_with(".k") || n.ends_with(".v"))
                    .collect(),
                "document_qkv" => self.document_qkv_names(),
                "ffn" => self
                    .projection_names()
                    .into_iter()
                    .filter(|n| n.contains(".ffn."))
                    .collect(),
                name => {
                    if self.projection(name).is_none() {
                        return Err(config_err(format!("unknown target layer `{name}`")));
                    }
                    vec![name.to_string()]
                }
            };
            for m in matched {
                if !out.contains(&m) {
                    out.push(m);
                }
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Position of the first document token in the γ-carrying stream.
    pub fn doc_offset(&self) -> usize {
        match self.config.architecture {
            Architecture::DecoderOnly => 1,
            Architecture::Seq2seq => 0,
        }
    }

    fn embed(&self, tokens: &[usize]) -> Result<Array2<T>> {
        if tokens.len() > self.config.max_seq_len {
            return Err(shape_err(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let emb = self.params.get(self.tok_emb);
        let pos = match (self.pos_emb, &self.sinusoid) {
            (Some(id), _) => self.params.get(id),
            (None, Some(table)) => table,
            (None, None) => unreachable!("backbone has a position table"),
        };
        let mut x = Array2::zeros((tokens.len(), self.config.d_model));
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.config.vocab_size {
                return Err(shape_err(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
            }
            let mut row = x.row_mut(i);
            row.assign(&emb.row(t));
            row += &pos.row(i);
        }
        Ok(x)
    }

    fn embed_backward(&self, tokens: &[usize], dx: &Array2<T>, grads: &mut Grads<T>) {
        if let Some(g) = grads.slot(self.tok_emb) {
            for (i, &t) in tokens.iter().enumerate() {
                let mut row = g.row_mut(t);
                row += &dx.row(i);
            }
        }
        if let Some(g) = self.pos_emb.and_then(|id| grads.slot(id)) {
            let mut rows = g.slice_mut(s![..tokens.len(), ..]);
            rows += dx;
        }
    }
}

/// Fixed sin/cos position table, `max_len × d`.
pub fn sinusoid_table<T: Scalar>(max_len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((max_len, d), |(pos, c)| {
        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
        let angle = pos as f64 * freq;
        T::from_f64_lossy(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

struct ForwardCache<T> {
    enc: Vec<BlockCache<T>>,
    enc_norm: Option<layers::LnCache<T>>,
    dec: Vec<BlockCache<T>>,
    final_norm: layers::LnCache<T>,
    final_hidden: Array2<T>,
}

/// Options controlling where γ enters the network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AttachOptions {
    /// Projections whose adapter input is modulated; defaults to the
    /// document-side self-attention Q/K/V.
    pub gamma_targets: Option<Vec<String>>,
    /// Only modulate projections of the first block.
    pub first_layer_only: bool,
    /// Seed for the adapter initialization, mixed with the backbone seed.
    pub seed: u64,
}

/// Backbone plus low-rank adapters. Only adapter matrices are trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel<T> {
    pub backbone: Backbone<T>,
    pub lora: LoraConfig,
    pub rst_enabled: bool,
    pub gamma_targets: BTreeSet<String>,
    pub first_layer_only: bool,
}

/// Freeze the backbone and attach zero-initialized adapters.
pub fn attach_lora<T: Scalar>(
    mut backbone: Backbone<T>,
    lora: &LoraConfig,
    rst_enabled: bool,
    options: &AttachOptions,
) -> Result<AdaptedModel<T>> {
    lora.check()?;
    let requested = if lora.target_layers.is_empty() {
        vec!["document_qkv".to_string()]
    } else {
        lora.target_layers.clone()
    };
    let targets = backbone.resolve_targets(&requested)?;
    let gamma_targets: BTreeSet<String> = match &options.gamma_targets {
        Some(list) => backbone.resolve_targets(list)?.into_iter().collect(),
        None => backbone
            .document_qkv_names()
            .into_iter()
            .filter(|n| targets.contains(n))
            .collect(),
    };
    for g in &gamma_targets {
        if !targets.contains(g) {
            return Err(config_err(format!("gamma target `{g}` is not a LoRA target")));
        }
        let p = backbone.projection(g).expect("resolved");
        if p.in_dim != backbone.config.d_model {
            return Err(config_err(format!(
                "gamma target `{g}` has input width {} but gamma is {} wide",
                p.in_dim, backbone.config.d_model
            )));
        }
    }
    for name in &targets {
        let p = backbone.projection(name).expect("resolved");
        lora.check_dims(name, p.in_dim, p.out_dim)?;
    }
    backbone.params.freeze_all();
    let mut rng = rng_from_seed(derive_seed(derive_seed(backbone.config.seed, 0x10A), options.seed));
    let rank = lora.rank;
    let mut pending = Vec::new();
    for p in backbone.projections() {
        if targets.contains(&p.name) {
            pending.push((p.name.clone(), p.in_dim, p.out_dim));
        }
    }
    let mut ids = Vec::new();
    for (name, a, b) in pending {
        let down = backbone.params.add(format!("{name}.lora_down"), init_down::<T, _>(a, rank, &mut rng), true);
        let up = backbone.params.add(format!("{name}.lora_up"), Array2::zeros((rank, b)), true);
        ids.push((name, LowRankIds { down, up }));
    }
    for p in backbone.projections_mut() {
        if let Some((_, lr)) = ids.iter().find(|(n, _)| *n == p.name) {
            p.lora = Some(lr.clone());
            p.gamma_target = gamma_targets.contains(&p.name);
        }
    }
    let mut cfg = lora.clone();
    cfg.target_layers = targets;
    Ok(AdaptedModel {
        backbone,
        lora: cfg,
        rst_enabled,
        gamma_targets,
        first_layer_only: options.first_layer_only,
    })
}

/// Positions (in the decoder stream) and token ids to predict.
pub type Targets = Vec<(usize, usize)>;

/// Token streams for one document/summary pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub tokens: Vec<usize>,
    pub source: Option<Vec<usize>>,
    pub gamma: Option<Array2<T>>,
    pub targets: Targets,
}

impl<T: Scalar> Example<T> {
    pub fn input(&self) -> SeqInput<'_, T> {
        SeqInput {
            tokens: &self.tokens,
            source: self.source.as_deref(),
            gamma: self.gamma.as_ref(),
        }
    }
}

impl<T: Scalar> Backbone<T> {
    /// Lay out a document (and optional summary) for this architecture.
    ///
    /// Decoder-only: `<bos> doc <sep> summary`; targets predict the summary
    /// followed by `<eos>`. Encoder-decoder: the document is the source and
    /// the decoder reads `<bos> summary`. `doc_gamma` is `doc_len × d_model`
    /// and is placed at the document rows; all other rows are zero.
    pub fn layout(&self, doc: &[usize], summary: &[usize], doc_gamma: Option<&Array2<T>>, with_targets: bool) -> Result<Example<T>> {
        if let Some(g) = doc_gamma {
            if g.dim() != (doc.len(), self.config.d_model) {
                return Err(shape_err(format!(
                    "document gamma {:?} does not match ({}, {})",
                    g.dim(),
                    doc.len(),
                    self.config.d_model
                )));
            }
        }
        let summary_targets = |start: usize| -> Targets {
            summary
                .iter()
                .copied()
                .chain(std::iter::once(EOS))
                .enumerate()
                .map(|(i, t)| (start + i, t))
                .collect()
        };
        let ex = match self.config.architecture {
            Architecture::DecoderOnly => {
                let mut tokens = Vec::with_capacity(doc.len() + summary.len() + 2);
                tokens.push(BOS);
                tokens.extend_from_slice(doc);
                tokens.push(SEP);
                tokens.extend_from_slice(summary);
                let needed = tokens.len() + usize::from(with_targets);
                if needed > self.config.max_seq_len {
                    return Err(shape_err(format!(
                        "document + summary need {needed} positions, max_seq_len is {}",
                        self.config.max_seq_len
                    )));
                }
                let gamma = doc_gamma.map(|g| {
                    let mut full = Array2::zeros((tokens.len(), self.config.d_model));
                    full.slice_mut(s![1..1 + doc.len(), ..]).assign(g);
                    full
                });
                let targets = if with_targets { summary_targets(doc.len() + 1) } else { Vec::new() };
                Example {
                    tokens,
                    source: None,
                    gamma,
                    targets,
                }
            }
            Architecture::Seq2seq => {
                if doc.len() > self.config.max_seq_len || summary.len() + 1 > self.config.max_seq_len {
                    return Err(shape_err(format!(
                        "document ({}) or summary ({}) exceeds max_seq_len {}",
                        doc.len(),
                        summary.len() + 1,
                        self.config.max_seq_len
                    )));
                }
                let mut tokens = Vec::with_capacity(summary.len() + 1);
                tokens.push(BOS);
                tokens.extend_from_slice(summary);
                let targets = if with_targets { summary_targets(0) } else { Vec::new() };
                Example {
                    tokens,
                    source: Some(doc.to_vec()),
                    gamma: doc_gamma.cloned(),
                    targets,
                }
            }
        };
        Ok(ex)
    }
}

impl<T: Scalar> AdaptedModel<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn trainable_count(&self) -> usize {
        self.backbone.params.trainable_count()
    }

    pub fn total_count(&self) -> usize {
        self.backbone.params.count()
    }

    pub fn frozen_checksum(&self) -> String {
        self.backbone.params.frozen_checksum()
    }

    pub fn adapter_checksum(&self) -> String {
        let p = &self.backbone.params;
        p.checksum_of(p.trainable_ids())
    }

    /// `(name, A, B)` of every adapted projection.
    pub fn target_dims(&self) -> Vec<(String, usize, usize)> {
        self.backbone
            .projections()
            .filter(|p| p.lora.is_some())
            .map(|p| (p.name.clone(), p.in_dim, p.out_dim))
            .collect()
    }

    /// Materialize one adapter as a standalone [`LoraAdapter`].
    pub fn adapter(&self, name: &str) -> Option<LoraAdapter<T>> {
        let p = self.backbone.projection(name)?;
        let lr = p.lora.as_ref()?;
        let params = &self.backbone.params;
        Some(LoraAdapter {
            base_weight: params.get(p.weight).clone(),
            w_down: params.get(lr.down).clone(),
            w_up: params.get(lr.up).clone(),
            config: self.lora.clone(),
        })
    }

    fn lora_scale(&self) -> T {
        T::from_f64_lossy(self.lora.scale())
    }

    fn check_gamma(&self, input: &SeqInput<'_, T>) -> Result<()> {
        if let Some(g) = input.gamma {
            let rows = match self.backbone.config.architecture {
                Architecture::DecoderOnly => input.tokens.len(),
                Architecture::Seq2seq => input.source.map(<[usize]>::len).unwrap_or(0),
            };
            if g.dim() != (rows, self.backbone.config.d_model) {
                return Err(shape_err(format!(
                    "gamma shape {:?} does not match stream shape ({rows}, {})",
                    g.dim(),
                    self.backbone.config.d_model
                )));
            }
            if g.iter().any(|v| !(*v >= T::zero())) {
                return Err(Error::Contract("gamma entries must be non-negative".into()));
            }
        }
        if self.backbone.config.architecture == Architecture::Seq2seq && input.source.is_none() {
            return Err(shape_err("encoder-decoder model needs a source sequence"));
        }
        Ok(())
    }

    fn run<R: Rng>(&self, input: &SeqInput<'_, T>, rng: Option<&mut R>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_gamma(input)?;
        let bb = &self.backbone;
        let gamma = if self.rst_enabled { input.gamma } else { None };
        let mut ctx = Ctx {
            params: &bb.params,
            lora_scale: self.lora_scale(),
            dropout: self.lora.dropout,
            rng,
        };
        let gamma_at = |layer: usize| if self.first_layer_only && layer > 0 { None } else { gamma };
        let mut enc_caches = Vec::new();
        let mut enc_norm_cache = None;
        let (memory, dec_gamma) = match bb.config.architecture {
            Architecture::Seq2seq => {
                let source = input.source.expect("checked");
                let mut h = bb.embed(source)?;
                for (l, block) in bb.encoder.iter().enumerate() {
                    let (out, c) = block.forward(&h, None, gamma_at(l), &mut ctx);
                    h = out;
                    enc_caches.push(c);
                }
                let norm = bb.enc_norm.as_ref().expect("seq2seq has an encoder norm");
                let (m, c) = norm.forward(&h, &bb.params);
                enc_norm_cache = Some(c);
                (Some(m), false)
            }
            Architecture::DecoderOnly => (None, true),
        };
        let mut h = bb.embed(input.tokens)?;
        let mut dec_caches = Vec::with_capacity(bb.decoder.len());
        for (l, block) in bb.decoder.iter().enumerate() {
            let g = if dec_gamma { gamma_at(l) } else { None };
            let (out, c) = block.forward(&h, memory.as_ref(), g, &mut ctx);
            h = out;
            dec_caches.push(c);
        }
        let (hf, fc) = bb.final_norm.forward(&h, &bb.params);
        let logits = hf.dot(&bb.params.get(bb.tok_emb).t());
        Ok((
            logits,
            ForwardCache {
                enc: enc_caches,
                enc_norm: enc_norm_cache,
                dec: dec_caches,
                final_norm: fc,
                final_hidden: hf,
            },
        ))
    }

    /// Eval-mode logits for every position of the decoder stream.
    pub fn logits(&self, input: &SeqInput<'_, T>) -> Result<Array2<T>> {
        self.run::<ChaCha8Rng>(input, None).map(|(l, _)| l)
    }

    /// Summed cross-entropy over `targets` and its gradient scaled by
    /// `grad_scale`. Dropout is active when `rng` is given.
    pub fn loss_and_grads<R: Rng>(
        &self,
        input: &SeqInput<'_, T>,
        targets: &[(usize, usize)],
        grad_scale: T,
        rng: Option<&mut R>,
    ) -> Result<(T, Grads<T>)> {
        let (logits, cache) = self.run(input, rng)?;
        let (loss, dlogits) = cross_entropy(&logits, targets, grad_scale)?;
        let mut grads = Grads::for_store(&self.backbone.params);
        self.backward(input, dlogits, cache, &mut grads);
        Ok((loss, grads))
    }

    /// Summed cross-entropy over `targets` without gradients.
    pub fn loss(&self, input: &SeqInput<'_, T>, targets: &[(usize, usize)]) -> Result<T> {
        let logits = self.logits(input)?;
        cross_entropy(&logits, targets, T::one()).map(|(l, _)| l)
    }

    fn backward(&self, input: &SeqInput<'_, T>, dlogits: Array2<T>, cache: ForwardCache<T>, grads: &mut Grads<T>) {
        let bb = &self.backbone;
        let params = &bb.params;
        let scale = self.lora_scale();
        let emb = params.get(bb.tok_emb);
        if let Some(g) = grads.slot(bb.tok_emb) {
            g.scaled_add(T::one(), &dlogits.t().dot(&cache.final_hidden));
        }
        let d_hf = dlogits.dot(emb);
        let mut dh = bb.final_norm.backward(&d_hf, cache.final_norm, params, grads);
        let mut d_memory: Option<Array2<T>> = None;
        for (block, c) in bb.decoder.iter().zip(cache.dec).rev() {
            let (dx, dm) = block.backward(dh, c, params, scale, grads);
            dh = dx;
            if let Some(dm) = dm {
                match &mut d_memory {
                    Some(acc) => *acc += &dm,
                    None => d_memory = Some(dm),
                }
            }
        }
        bb.embed_backward(input.tokens, &dh, grads);
        if let (Some(dm), Some(norm), Some(nc)) = (d_memory, bb.enc_norm.as_ref(), cache.enc_norm) {
            let mut de = norm.backward(&dm, nc, params, grads);
            for (block, c) in bb.encoder.iter().zip(cache.enc).rev() {
                de = block.backward(de, c, params, scale, grads).0;
            }
            bb.embed_backward(input.source.expect("seq2seq source"), &de, grads);
        }
    }

    /// Save adapter matrices (and the LoRA config) to a checkpoint container.
    pub fn adapter_container(&self) -> Container {
        let mut c = Container::new(
            "lora-adapter",
            serde_json::json!({
                "config": self.lora,
                "layers": self.lora.target_layers,
                "backbone": self.backbone.config,
                "rst_enabled": self.rst_enabled,
                "gamma_targets": self.gamma_targets,
            }),
        );
        for p in self.backbone.projections() {
            if let Some(lr) = &p.lora {
                c.push(format!("{}.base", p.name), self.backbone.params.get(p.weight));
                c.push(format!("{}.down", p.name), self.backbone.params.get(lr.down));
                c.push(format!("{}.up", p.name), self.backbone.params.get(lr.up));
            }
        }
        c
    }

    /// Load adapter matrices saved by [`AdaptedModel::adapter_container`].
    pub fn load_adapter_container(&mut self, c: &Container) -> Result<()> {
        let mut updates = Vec::new();
        for p in self.backbone.projections() {
            if let Some(lr) = &p.lora {
                for (suffix, id) in [("down", lr.down), ("up", lr.up)] {
                    let name = format!("{}.{suffix}", p.name);
                    let t = c.get::<T>(&name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
                    if t.dim() != self.backbone.params.get(id).dim() {
                        return Err(Error::Format(format!("tensor `{name}` has the wrong shape")));
                    }
                    updates.push((id, t));
                }
            }
        }
        for (id, t) in updates {
            *self.backbone.params.get_mut(id) = t;
        }
        Ok(())
    }

    /// Copy of every trainable tensor, for in-memory checkpoints.
    pub fn snapshot(&self) -> Vec<(ParamId, Array2<T>)> {
        let p = &self.backbone.params;
        p.trainable_ids().map(|i| (i, p.get(i).clone())).collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Array2<T>)]) {
        for (id, t) in snapshot {
            *self.backbone.params.get_mut(*id) = t.clone();
        }
    }
}

impl<T: Scalar> Backbone<T> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new("backbone", serde_json::json!({ "config": self.config }));
        for (name, t, _) in self.params.iter() {
            c.push(name, t);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "backbone" {
            return Err(Error::Format(format!("expected a backbone container, found `{}`", c.kind)));
        }
        let config: BackboneConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Format(format!("backbone config: {e}")))?;
        let mut bb = Backbone::build(&config)?;
        for id in bb.params.ids().collect::<Vec<_>>() {
            let name = bb.params.name(id).to_string();
            let t = c.get::<T>(&name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.dim() != bb.params.get(id).dim() {
                return Err(Error::Format(format!("tensor `{name}` has the wrong shape")));
            }
            *bb.params.get_mut(id) = t;
        }
        Ok(bb)
    }

    /// Unadapted model view: every parameter trainable, no adapters.
    pub fn into_trainable(mut self) -> AdaptedModel<T> {
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.set_trainable(id, true);
        }
        AdaptedModel {
            backbone: self,
            lora: LoraConfig {
                dropout: 0.0,
                ..LoraConfig::default()
            },
            rst_enabled: false,
            gamma_targets: BTreeSet::new(),
            first_layer_only: false,
        }
    }
}

/// Summed token cross-entropy and `grad_scale · ∂loss/∂logits`.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[(usize, usize)], grad_scale: T) -> Result<(T, Array2<T>)> {
    let mut dlogits = Array2::zeros(logits.dim());
    let mut total = T::zero();
    for &(pos, tok) in targets {
        if pos >= logits.nrows() || tok >= logits.ncols() {
            return Err(shape_err(format!("target ({pos}, {tok}) outside logits {:?}", logits.dim())));
        }
        let row = logits.row(pos);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[tok];
        let mut drow = dlogits.row_mut(pos);
        for (d, &v) in drow.iter_mut().zip(row.iter()) {
            *d += (v - log_z).exp() * grad_scale;
        }
        drow[tok] -= grad_scale;
    }
    Ok((total, dlogits))
}

/// Row-wise log-softmax of the last row.
pub fn last_log_probs<T: Scalar>(logits: &Array2<T>) -> Vec<T> {
    let row = logits.index_axis(Axis(0), logits.nrows() - 1);
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let log_z = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - log_z).collect()
}

#[cfg(test)]
mod tests;
