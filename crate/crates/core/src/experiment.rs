//! End-to-end experiment runner: corpus, optional backbone warm start, one
//! adapter fine-tuning run per (rank, condition, seed), test decoding and a
//! consolidated comparison table.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ablation::{gamma_pattern, mask_gamma, mask_parse, MaskSpec, PatternKind};
use crate::backbone::{attach_lora, AttachOptions, Backbone, BackboneConfig};
use crate::distribution::{make_variant_with, MergeOptions, Variant};
use crate::error::{config_err, Error, Result};
use crate::gamma::{project_gamma_with, ChannelLayout, GammaMatrix};
use crate::lora::LoraConfig;
use crate::metrics::{evaluate_corpus, EvalReport};
use crate::parser_io::{load_corpus, synth_parse, SynthConfig, SynthDoc};
use crate::scalar::{Precision, Scalar};
use crate::tokenizer::{Vocab, STOP};
use crate::trainer::{generate, train, DecodeConfig, Sample, TrainConfig, TrainReport};
use crate::util::{derive_seed, sha256_hex};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// What the adapters see as γ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    /// Plain LoRA, no γ.
    Vanilla,
    Variant(Variant),
    Pattern(PatternKind),
    /// Parse masked before building the variant (or γ masked directly).
    Mask { fraction: f64, variant: Variant, direct: bool },
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Vanilla => f.write_str("vanilla"),
            Condition::Variant(v) => write!(f, "{v}"),
            Condition::Pattern(p) => write!(f, "{p}"),
            Condition::Mask { fraction, variant, direct } => {
                let prefix = if *direct { "gmask" } else { "mask" };
                if *variant == Variant::ProbWithLabels {
                    write!(f, "{prefix}:{fraction}")
                } else {
                    write!(f, "{prefix}:{fraction}@{variant}")
                }
            }
        }
    }
}

impl FromStr for Condition {
    type Err = Error;
    /// `vanilla`, a variant tag (`p_w`, ...), a pattern (`even`, `odd`,
    /// `random`), or `mask:<f>[@variant]` / `gmask:<f>[@variant]`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "vanilla" {
            return Ok(Condition::Vanilla);
        }
        if let Ok(v) = s.parse::<Variant>() {
            return Ok(Condition::Variant(v));
        }
        if let Ok(p) = s.parse::<PatternKind>() {
            return Ok(Condition::Pattern(p));
        }
        let (direct, rest) = if let Some(r) = s.strip_prefix("mask:") {
            (false, r)
        } else if let Some(r) = s.strip_prefix("gmask:") {
            (true, r)
        } else {
            return Err(config_err(format!("unknown condition `{s}`")));
        };
        let (frac, variant) = match rest.split_once('@') {
            Some((f, v)) => (f, v.parse()?),
            None => (rest, Variant::ProbWithLabels),
        };
        let fraction: f64 = frac
            .parse()
            .map_err(|_| config_err(format!("bad mask fraction in `{s}`")))?;
        MaskSpec { fraction, seed: 0 }.check()?;
        Ok(Condition::Mask {
            fraction,
            variant,
            direct,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Load `parses.jsonl` + `corpus.jsonl` from here instead of synthesizing.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train: 200,
            val: 50,
            test: 50,
            dir: None,
            synth: SynthConfig::default(),
        }
    }
}

/// Full-parameter warm start of the backbone on a separate synthetic corpus
/// before it is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub docs: usize,
    pub val_docs: usize,
    /// Share of warm-start documents whose target is the whole document
    /// rather than its summary. Copying is learned far faster than skipping
    /// EDUs, and it bootstraps the latter.
    pub copy_fraction: f64,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            docs: 3000,
            val_docs: 20,
            copy_fraction: 1.0,
            train: TrainConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                epochs: 4,
                batch_size: 8,
                early_stopping_patience: 30,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeSettings {
    pub include_diagonal: bool,
    pub binarize_after_merge: bool,
}

impl MergeSettings {
    pub fn options<T: Scalar>(&self) -> MergeOptions<T> {
        MergeOptions {
            include_diagonal: self.include_diagonal,
            binarize_after_merge: self.binarize_after_merge,
            threshold: T::from_f64_lossy(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub precision: Precision,
    pub conditions: Vec<String>,
    pub seeds: Vec<u64>,
    /// Rank sweep; empty means the single rank in `lora`.
    pub ranks: Vec<usize>,
    pub layout: ChannelLayout,
    pub corpus: CorpusConfig,
    pub backbone: BackboneConfig,
    pub pretrain: Option<PretrainConfig>,
    pub merge: MergeSettings,
    pub lora: LoraConfig,
    pub attach: AttachOptions,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            precision: Precision::F32,
            conditions: vec!["p_w".into()],
            seeds: vec![1],
            ranks: Vec::new(),
            layout: ChannelLayout::Tile,
            corpus: CorpusConfig::default(),
            backbone: BackboneConfig::default(),
            pretrain: None,
            merge: MergeSettings::default(),
            lora: LoraConfig::default(),
            attach: AttachOptions::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(format!("experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => config_err(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn parsed_conditions(&self) -> Result<Vec<Condition>> {
        if self.conditions.is_empty() {
            return Err(config_err("no conditions listed"));
        }
        self.conditions.iter().map(|c| c.parse()).collect()
    }

    pub fn rank_list(&self) -> Vec<usize> {
        if self.ranks.is_empty() {
            vec![self.lora.rank]
        } else {
            self.ranks.clone()
        }
    }

    pub fn check(&self) -> Result<()> {
        self.parsed_conditions()?;
        if self.seeds.is_empty() {
            return Err(config_err("no seeds listed"));
        }
        let c = &self.corpus;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return Err(config_err("corpus splits must all be non-empty"));
        }
        if let Some(dir) = &c.dir {
            if !dir.exists() {
                return Err(config_err(format!("corpus directory {} does not exist", dir.display())));
            }
        }
        self.backbone.check()?;
        self.train.check()?;
        self.decode.check()?;
        for r in self.rank_list() {
            LoraConfig { rank: r, ..self.lora.clone() }.check()?;
        }
        Ok(())
    }
}

/// Token ids for a synthetic document and its reference.
pub struct EncodedDoc<'a> {
    pub doc: &'a SynthDoc,
    pub doc_ids: Vec<usize>,
    pub summary_ids: Vec<usize>,
}

pub fn encode_docs<'a>(docs: &'a [SynthDoc], vocab: &Vocab) -> Result<Vec<EncodedDoc<'a>>> {
    docs.iter()
        .map(|d| {
            let enc = |toks: &[String]| {
                toks.iter()
                    .map(|t| vocab.id(t).ok_or_else(|| Error::Data(format!("token `{t}` not in vocabulary"))))
                    .collect::<Result<Vec<_>>>()
            };
            Ok(EncodedDoc {
                doc: d,
                doc_ids: enc(&d.document)?,
                summary_ids: enc(&d.summary)?,
            })
        })
        .collect()
}

/// Document-aligned γ rows (`doc_len × d_model`) for one condition, or
/// `None` for plain LoRA.
pub fn condition_gamma<T: Scalar>(
    condition: &Condition,
    doc: &SynthDoc,
    doc_index: usize,
    seed: u64,
    d_model: usize,
    merge: &MergeSettings,
    layout: ChannelLayout,
) -> Result<Option<Array2<T>>> {
    let parse = doc.parse.map(|v| T::from_f64_lossy(*v));
    let seg = &parse.segmentation;
    let len = seg.token_count;
    let from_variant = |parse: &crate::parser_io::ParseOutput<T>, v: Variant| -> Result<GammaMatrix<T>> {
        let dist = make_variant_with(parse, v, &merge.options())?;
        project_gamma_with(&dist, seg, len, d_model, 0, layout)
    };
    let mask_seed = derive_seed(seed, 0x4D41_534B ^ doc_index as u64);
    let gamma = match *condition {
        Condition::Vanilla => return Ok(None),
        Condition::Variant(v) => from_variant(&parse, v)?,
        Condition::Pattern(kind) => gamma_pattern(kind, len, d_model, derive_seed(seed, doc_index as u64))?,
        Condition::Mask {
            fraction,
            variant,
            direct,
        } => {
            let spec = MaskSpec {
                fraction,
                seed: mask_seed,
            };
            if direct {
                mask_gamma(&from_variant(&parse, variant)?, &spec)?
            } else {
                from_variant(&mask_parse(&parse, &spec)?, variant)?
            }
        }
    };
    Ok(Some(gamma.values))
}

fn samples<T: Scalar>(
    docs: &[EncodedDoc<'_>],
    offset: usize,
    condition: &Condition,
    seed: u64,
    config: &ExperimentConfig,
) -> Result<Vec<Sample<T>>> {
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(Sample {
                doc_id: d.doc.parse.doc_id().to_string(),
                doc: d.doc_ids.clone(),
                summary: d.summary_ids.clone(),
                gamma: condition_gamma(
                    condition,
                    d.doc,
                    offset + i,
                    seed,
                    config.backbone.d_model,
                    &config.merge,
                    config.layout,
                )?,
            })
        })
        .collect()
}

/// Render tokens as text with one sentence per line (split after `.`).
pub fn sentence_text(vocab: &Vocab, ids: &[usize]) -> String {
    let mut out = String::new();
    for &id in ids {
        if id < 4 {
            continue;
        }
        if !out.is_empty() && !out.ends_with('\n') {
            out.push(' ');
        }
        out.push_str(vocab.token(id));
        if id == STOP {
            out.push('\n');
        }
    }
    out.trim_end().to_string()
}

/// Corpus split into train / val / test.
pub struct Splits {
    pub vocab: Vocab,
    pub docs: Vec<SynthDoc>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn load_splits(config: &CorpusConfig) -> Result<Splits> {
    let needed = config.train + config.val + config.test;
    let (docs, vocab) = match &config.dir {
        Some(dir) => {
            let docs = load_corpus(dir)?;
            let mut words: Vec<String> = docs.iter().flat_map(|d| d.document.iter().cloned()).collect();
            words.sort();
            words.dedup();
            (docs, Vocab::with_content(words))
        }
        None => {
            let synth = SynthConfig {
                n_docs: needed,
                ..config.synth.clone()
            };
            (synth_parse(&synth)?, synth.vocab())
        }
    };
    if docs.len() < needed {
        return Err(Error::Data(format!("corpus has {} documents, splits need {needed}", docs.len())));
    }
    Ok(Splits {
        vocab,
        docs,
        train: config.train,
        val: config.val,
        test: config.test,
    })
}

/// Warm-start a backbone with full-parameter training and no γ.
pub fn pretrain_backbone<T: Scalar>(config: &ExperimentConfig, pre: &PretrainConfig) -> Result<(Backbone<T>, TrainReport)> {
    let synth = SynthConfig {
        n_docs: pre.docs + pre.val_docs,
        seed: derive_seed(config.corpus.synth.seed, 0x9E7A),
        ..config.corpus.synth.clone()
    };
    let docs = synth_parse(&synth)?;
    let vocab = synth.vocab();
    let enc = encode_docs(&docs, &vocab)?;
    let mut all = samples::<T>(&enc, 0, &Condition::Vanilla, 0, config)?;
    // Spread copy targets evenly so both splits see the same mix.
    let f = pre.copy_fraction.clamp(0.0, 1.0);
    for (i, s) in all.iter_mut().enumerate() {
        if ((i + 1) as f64 * f).floor() > (i as f64 * f).floor() {
            s.summary = s.doc.clone();
        }
    }
    let (tr, va) = all.split_at(pre.docs);
    let mut model = Backbone::<T>::build(&config.backbone)?.into_trainable();
    let report = train(&mut model, tr, va, &pre.train, &config.decode)?;
    Ok((model.backbone, report))
}

/// Per-subrun outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRun {
    pub rank: usize,
    pub condition: String,
    pub seed: u64,
    pub dir: String,
    pub ok: bool,
    pub error: Option<String>,
    /// Process exit code the failure maps to; 0 on success.
    pub exit_code: i32,
    pub best_epoch: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub rouge_lsum: f64,
}

impl SubRun {
    fn pending(rank: usize, condition: &str, seed: u64, dir: String) -> Self {
        SubRun {
            rank,
            condition: condition.to_string(),
            seed,
            dir,
            ok: false,
            error: None,
            exit_code: 0,
            best_epoch: 0,
            rouge1: 0.0,
            rouge2: 0.0,
            rouge_l: 0.0,
            rouge_lsum: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub rank: usize,
    pub condition: String,
    pub runs: usize,
    pub rouge1: MeanSd,
    pub rouge2: MeanSd,
    pub rouge_l: MeanSd,
    pub rouge_lsum: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// One row per (rank, condition) in configuration order; failed
    /// sub-runs are excluded.
    pub fn from_runs(runs: &[SubRun], ranks: &[usize], conditions: &[String]) -> Self {
        let mut rows = Vec::new();
        for &rank in ranks {
            for cond in conditions {
                let mut ok: Vec<&SubRun> = runs
                    .iter()
                    .filter(|r| r.ok && r.rank == rank && &r.condition == cond)
                    .collect();
                if ok.is_empty() {
                    continue;
                }
                ok.sort_by_key(|r| r.seed);
                let col = |f: fn(&SubRun) -> f64| MeanSd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
                rows.push(ComparisonRow {
                    rank,
                    condition: cond.clone(),
                    runs: ok.len(),
                    rouge1: col(|r| r.rouge1),
                    rouge2: col(|r| r.rouge2),
                    rouge_l: col(|r| r.rouge_l),
                    rouge_lsum: col(|r| r.rouge_lsum),
                });
            }
        }
        Comparison { rows }
    }

    pub fn row(&self, rank: usize, condition: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.rank == rank && r.condition == condition)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "rank,condition,runs,rouge1_mean,rouge1_sd,rouge2_mean,rouge2_sd,rougeL_mean,rougeL_sd,rougeLsum_mean,rougeLsum_sd\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.rank,
                r.condition,
                r.runs,
                r.rouge1.mean,
                r.rouge1.sd,
                r.rouge2.mean,
                r.rouge2.sd,
                r.rouge_l.mean,
                r.rouge_l.sd,
                r.rouge_lsum.mean,
                r.rouge_lsum.sd
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    /// Relative path → SHA-256 of every file written in the directory.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Collects files written into one run directory and finishes with a
/// manifest that hashes all of them.
pub struct RunDir {
    root: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir {
            root,
            outputs: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes.as_ref()).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes.as_ref()));
        Ok(path)
    }

    /// Write a table as `<stem>.csv` plus its `<stem>.json` twin.
    pub fn write_table(&mut self, stem: &str, csv: &str, json: &str) -> Result<()> {
        self.write(&format!("{stem}.csv"), csv)?;
        self.write(&format!("{stem}.json"), json)?;
        Ok(())
    }

    /// Record a file written by a nested run directory.
    pub fn adopt(&mut self, rel: &str, hash: String) {
        self.outputs.insert(rel.to_string(), hash);
    }

    pub fn finish(self, command: &str, config: serde_json::Value, seed: Option<u64>, inputs: Vec<String>) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs,
            outputs: self.outputs,
            tool_version: TOOL_VERSION.to_string(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Check that every output listed in a manifest exists with the recorded hash.
pub fn verify_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    for (rel, hash) in &manifest.outputs {
        let p = dir.join(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if &sha256_hex(&bytes) != hash {
            return Err(Error::Data(format!("hash mismatch for {rel}")));
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub runs: Vec<SubRun>,
    pub comparison: Comparison,
    pub pretrain: Option<TrainReport>,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> Vec<&SubRun> {
        self.runs.iter().filter(|r| !r.ok).collect()
    }

    /// Test Rouge-2 F1 of each seed for one condition, ordered by seed.
    pub fn per_seed_r2(&self, rank: usize, condition: &str) -> Vec<(u64, f64)> {
        let mut v: Vec<(u64, f64)> = self
            .runs
            .iter()
            .filter(|r| r.ok && r.rank == rank && r.condition == condition)
            .map(|r| (r.seed, r.rouge2))
            .collect();
        v.sort_by_key(|x| x.0);
        v
    }
}

struct SubRunOutput {
    report: EvalReport,
    best_epoch: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_one<T: Scalar>(
    config: &ExperimentConfig,
    splits: &Splits,
    encoded: &[EncodedDoc<'_>],
    backbone: &Backbone<T>,
    rank: usize,
    condition: &Condition,
    seed: u64,
    run: &mut RunDir,
) -> Result<SubRunOutput> {
    let lora = LoraConfig {
        rank,
        ..config.lora.clone()
    };
    let rst = !matches!(condition, Condition::Vanilla);
    let attach = AttachOptions {
        seed,
        ..config.attach.clone()
    };
    let mut model = attach_lora(backbone.clone(), &lora, rst, &attach)?;
    let frozen_before = model.frozen_checksum();
    let (tr, rest) = encoded.split_at(splits.train);
    let (va, te) = rest.split_at(splits.val);
    let te = &te[..splits.test];
    let train_set = samples::<T>(tr, 0, condition, seed, config)?;
    let val_set = samples::<T>(va, splits.train, condition, seed, config)?;
    let test_set = samples::<T>(te, splits.train + splits.val, condition, seed, config)?;
    let tc = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let report = train(&mut model, &train_set, &val_set, &tc, &config.decode)?;
    if model.frozen_checksum() != frozen_before {
        return Err(Error::Contract("backbone weights changed during adapter training".into()));
    }
    let mut pairs = Vec::with_capacity(test_set.len());
    let mut predictions = String::new();
    for s in &test_set {
        let out = generate(&model, &s.doc, s.gamma.as_ref(), &config.decode)?;
        let cand = sentence_text(&splits.vocab, &out);
        let reference = sentence_text(&splits.vocab, &s.summary);
        predictions.push_str(&serde_json::json!({"doc_id": s.doc_id, "candidate": cand, "reference": reference}).to_string());
        predictions.push('\n');
        pairs.push((cand, reference));
    }
    let eval = evaluate_corpus(&pairs)?;
    let files = [
        ("metrics.csv".to_string(), report.to_csv()),
        ("metrics.json".to_string(), serde_json::to_string_pretty(&report.epochs).expect("log serializes")),
        ("train_report.json".to_string(), serde_json::to_string_pretty(&report).expect("report serializes")),
        ("eval_report.json".to_string(), serde_json::to_string_pretty(&eval).expect("eval serializes")),
        ("predictions.jsonl".to_string(), predictions),
    ];
    for (rel, text) in &files {
        run.write(rel, text)?;
    }
    run.write("adapter.rstl", model.adapter_container().to_bytes())?;
    Ok(SubRunOutput {
        report: eval,
        best_epoch: report.best_epoch,
    })
}

fn sub_run_config(config: &ExperimentConfig, rank: usize, condition: &str, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "rank": rank,
        "condition": condition,
        "lora": LoraConfig { rank, ..config.lora.clone() },
        "train": TrainConfig { seed, ..config.train.clone() },
        "decode": config.decode,
    })
}

fn fill(sub: &mut SubRun, result: Result<SubRunOutput>) {
    match result {
        Ok(out) => {
            let m = out.report.mean_f1;
            sub.ok = true;
            sub.best_epoch = out.best_epoch;
            sub.rouge1 = m.rouge1;
            sub.rouge2 = m.rouge2;
            sub.rouge_l = m.rouge_l;
            sub.rouge_lsum = m.rouge_lsum;
        }
        Err(e) => {
            sub.exit_code = e.exit_code();
            sub.error = Some(e.to_string());
        }
    }
}

fn check_vocab(config: &ExperimentConfig, splits: &Splits) -> Result<()> {
    if splits.vocab.len() > config.backbone.vocab_size {
        return Err(config_err(format!(
            "backbone vocab_size {} is smaller than the corpus vocabulary {}",
            config.backbone.vocab_size,
            splits.vocab.len()
        )));
    }
    Ok(())
}

/// Load a saved backbone, or build one (warm-starting it when configured).
pub fn prepare_backbone<T: Scalar>(
    config: &ExperimentConfig,
    saved: Option<&Path>,
) -> Result<(Backbone<T>, Option<TrainReport>)> {
    if let Some(path) = saved {
        let bb = Backbone::<T>::from_container(&crate::container::Container::load(path)?)?;
        if bb.config != config.backbone {
            return Err(config_err(format!("backbone in {} does not match the configured backbone", path.display())));
        }
        return Ok((bb, None));
    }
    match &config.pretrain {
        Some(pre) => {
            let (bb, rep) = pretrain_backbone::<T>(config, pre)?;
            Ok((bb, Some(rep)))
        }
        None => Ok((Backbone::<T>::build(&config.backbone)?, None)),
    }
}

fn write_backbone<T: Scalar>(root: &mut RunDir, backbone: &Backbone<T>, pretrain: &Option<TrainReport>) -> Result<()> {
    root.write("backbone.rstl", backbone.to_container().to_bytes())?;
    if let Some(rep) = pretrain {
        root.write("pretrain_metrics.csv", rep.to_csv())?;
        root.write("pretrain_metrics.json", serde_json::to_string_pretty(&rep.epochs).expect("log serializes"))?;
    }
    Ok(())
}

/// Train and evaluate one condition under one seed, writing everything into
/// a single run directory.
pub fn run_single<T: Scalar>(
    config: &ExperimentConfig,
    condition: &str,
    seed: u64,
    backbone: Option<&Path>,
    out_dir: &Path,
) -> Result<SubRun> {
    let cond: Condition = condition.parse()?;
    let splits = load_splits(&config.corpus)?;
    check_vocab(config, &splits)?;
    let encoded = encode_docs(&splits.docs, &splits.vocab)?;
    let mut root = RunDir::create(out_dir)?;
    root.write("config.toml", config.to_toml())?;
    let (bb, pretrain) = prepare_backbone::<T>(config, backbone)?;
    write_backbone(&mut root, &bb, &pretrain)?;
    let rank = config.lora.rank;
    let mut sub = SubRun::pending(rank, condition, seed, ".".into());
    fill(&mut sub, run_one(config, &splits, &encoded, &bb, rank, &cond, seed, &mut root));
    root.write("report.json", serde_json::to_string_pretty(&sub).expect("run serializes"))?;
    let inputs = config.corpus.dir.iter().map(|d| d.display().to_string()).collect();
    root.finish("train", sub_run_config(config, rank, condition, seed), Some(seed), inputs)?;
    Ok(sub)
}

/// Run every (rank, condition, seed) combination and write the comparison
/// table. Sub-run failures are recorded and do not stop the others.
pub fn run_experiment<T: Scalar>(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    run_experiment_with::<T>(config, None, out_dir)
}

/// [`run_experiment`] reusing a saved backbone instead of building one.
pub fn run_experiment_with<T: Scalar>(
    config: &ExperimentConfig,
    backbone: Option<&Path>,
    out_dir: &Path,
) -> Result<ExperimentOutcome> {
    config.check()?;
    let conditions = config.parsed_conditions()?;
    let splits = load_splits(&config.corpus)?;
    check_vocab(config, &splits)?;
    let encoded = encode_docs(&splits.docs, &splits.vocab)?;
    let mut root = RunDir::create(out_dir)?;
    root.write("config.toml", config.to_toml())?;
    let (backbone, pretrain) = prepare_backbone::<T>(config, backbone)?;
    write_backbone(&mut root, &backbone, &pretrain)?;
    let ranks = config.rank_list();
    let mut runs = Vec::new();
    for &rank in &ranks {
        for (cond, name) in conditions.iter().zip(&config.conditions) {
            for &seed in &config.seeds {
                let rel = format!("runs/r{rank}/{}/seed{seed}", name.replace([':', '@'], "_"));
                let mut sub = SubRun::pending(rank, name, seed, rel.clone());
                let mut run = RunDir::create(out_dir.join(&rel))?;
                let result = run_one(config, &splits, &encoded, &backbone, rank, cond, seed, &mut run);
                fill(&mut sub, result);
                run.write("report.json", serde_json::to_string_pretty(&sub).expect("run serializes"))?;
                let manifest = run.finish("train", sub_run_config(config, rank, name, seed), Some(seed), vec![])?;
                for (f, h) in manifest.outputs {
                    root.adopt(&format!("{rel}/{f}"), h);
                }
                root.adopt(&format!("{rel}/{MANIFEST_FILE}"), sha256_hex(&fs::read(out_dir.join(&rel).join(MANIFEST_FILE)).map_err(|e| Error::io(out_dir.join(&rel), e))?));
                runs.push(sub);
            }
        }
    }
    let comparison = Comparison::from_runs(&runs, &ranks, &config.conditions);
    root.write_table("comparison", &comparison.to_csv(), &comparison.to_json())?;
    let runs_csv = runs_csv(&runs);
    root.write_table("runs", &runs_csv, &serde_json::to_string_pretty(&runs).expect("runs serialize"))?;
    let inputs = config
        .corpus
        .dir
        .iter()
        .map(|d| d.display().to_string())
        .collect();
    root.finish(
        "experiment",
        serde_json::to_value(config).expect("config serializes"),
        None,
        inputs,
    )?;
    Ok(ExperimentOutcome {
        runs,
        comparison,
        pretrain,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(config_err(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub candidate: String,
    pub reference: String,
}

/// Decode one split with a saved backbone and adapter checkpoint. γ is
/// rebuilt exactly as during training for the given condition and seed.
pub fn generate_split<T: Scalar>(
    config: &ExperimentConfig,
    condition: &str,
    seed: u64,
    backbone: &Path,
    adapter: &Path,
    split: Split,
) -> Result<Vec<Prediction>> {
    let cond: Condition = condition.parse()?;
    let splits = load_splits(&config.corpus)?;
    check_vocab(config, &splits)?;
    let encoded = encode_docs(&splits.docs, &splits.vocab)?;
    let (bb, _) = prepare_backbone::<T>(config, Some(backbone))?;
    let attach = AttachOptions {
        seed,
        ..config.attach.clone()
    };
    let mut model = attach_lora(bb, &config.lora, !matches!(cond, Condition::Vanilla), &attach)?;
    model.load_adapter_container(&crate::container::Container::load(adapter)?)?;
    let (start, len) = match split {
        Split::Train => (0, splits.train),
        Split::Val => (splits.train, splits.val),
        Split::Test => (splits.train + splits.val, splits.test),
    };
    let set = samples::<T>(&encoded[start..start + len], start, &cond, seed, config)?;
    set.iter()
        .map(|s| {
            let out = generate(&model, &s.doc, s.gamma.as_ref(), &config.decode)?;
            Ok(Prediction {
                doc_id: s.doc_id.clone(),
                candidate: sentence_text(&splits.vocab, &out),
                reference: sentence_text(&splits.vocab, &s.summary),
            })
        })
        .collect()
}

fn runs_csv(runs: &[SubRun]) -> String {
    let mut out = String::from("rank,condition,seed,ok,exit_code,best_epoch,rouge1,rouge2,rougeL,rougeLsum,error\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.rank,
            r.condition,
            r.seed,
            r.ok,
            r.exit_code,
            r.best_epoch,
            r.rouge1,
            r.rouge2,
            r.rouge_l,
            r.rouge_lsum,
            r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_names_round_trip() {
        for s in ["vanilla", "p_w", "b_wo", "even", "random", "mask:0.2", "mask:0.4@b_w", "gmask:0.8"] {
            assert_eq!(s.parse::<Condition>().unwrap().to_string(), s);
        }
        assert!("mask:1.5".parse::<Condition>().is_err());
        assert!("diag".parse::<Condition>().is_err());
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.sd, 1.0);
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
    }

    #[test]
    fn sentences_split_after_stop() {
        let v = Vocab::synthetic(5);
        let ids = vec![6, 7, STOP, 8, STOP];
        assert_eq!(sentence_text(&v, &ids), "w0 w1 .\nw2 .");
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("conditions = [\"p_w\", \"random\"]\nseeds = [1, 2, 3]\n").unwrap();
        assert_eq!(partial.seeds, vec![1, 2, 3]);
        assert!(ExperimentConfig::from_toml("seeds = \"x\"").is_err());
    }
}
