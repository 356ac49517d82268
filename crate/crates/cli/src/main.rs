//! `rstlora` command line: data synthesis, distributions, γ files, training,
//! decoding, evaluation, ablations and experiment sweeps.
//!
//! Every command writes into `--out-dir` and finishes with one
//! `manifest.json` hashing what it wrote. Exit codes: 0 ok, 2 config,
//! 3 data, 4 divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rstlora::ablation::{gamma_pattern, mask_gamma, mask_parse, MaskSpec, PatternKind};
use rstlora::distribution::make_variant_with;
use rstlora::experiment::{
    generate_split, run_experiment_with, run_single, ExperimentConfig, ExperimentOutcome, RunDir, Split,
};
use rstlora::gamma::{load_gamma, project_gamma_with, write_gamma};
use rstlora::metrics::{evaluate_corpus, run_external_metric, EvalReport};
use rstlora::parser_io::{load_parses, save_corpus, synth_parse, validate, write_parses, SynthConfig};
use rstlora::util::sha256_hex;
use rstlora::{ChannelLayout, Error, MergeOptions, ParseOutput, Precision, Result, Variant};

#[derive(Parser)]
#[command(name = "rstlora", version, about = "Discourse-weighted LoRA for summarization")]
struct Cli {
    /// Seed for the command; overrides the config where one applies.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision for training and decoding (32 or 64).
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-nucleus corpus (parses.jsonl + corpus.jsonl).
    Synth(SynthArgs),
    /// Check parse files against the tensor invariants.
    Validate {
        #[arg(long)]
        parse_file: PathBuf,
    },
    /// Build EDU distributions for every document of a parse file.
    Build(BuildArgs),
    /// Project one distribution variant to a token-level γ file.
    Gamma(GammaArgs),
    /// Train and evaluate one condition under one seed.
    Train(TrainArgs),
    /// Decode a split with a saved backbone and adapter.
    Generate(GenerateArgs),
    /// Score candidates against references.
    Eval(EvalArgs),
    /// Control γ patterns and parse masking.
    Ablate(AblateArgs),
    /// Run an experiment across LoRA ranks.
    Sweep(SweepArgs),
    /// Run every condition × seed of an experiment config.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment config whose `[corpus.synth]` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    docs: Option<usize>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    merge_include_diagonal: bool,
    #[arg(long)]
    binarize_after_merge: bool,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

impl MergeArgs {
    fn options(&self) -> MergeOptions<f64> {
        MergeOptions {
            include_diagonal: self.merge_include_diagonal,
            binarize_after_merge: self.binarize_after_merge,
            threshold: self.threshold,
        }
    }
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    parse_file: PathBuf,
    /// Variant tag; all four when omitted.
    #[arg(long)]
    variant: Option<Variant>,
    #[command(flatten)]
    merge: MergeArgs,
}

#[derive(Args)]
struct GammaArgs {
    #[arg(long)]
    parse_file: PathBuf,
    #[arg(long, default_value = "p_w")]
    variant: Variant,
    /// Document to project; required when the file holds several.
    #[arg(long)]
    doc_id: Option<String>,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    /// Defaults to the document length plus the offset.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    doc_offset: usize,
    #[arg(long, default_value = "tile")]
    layout: ChannelLayout,
    #[arg(long, default_value = "gamma.rstg")]
    out: PathBuf,
    #[command(flatten)]
    merge: MergeArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Condition: a variant, vanilla, even/odd/random or mask:F[@variant].
    #[arg(long, default_value = "p_w")]
    variant: String,
    /// Reuse a saved backbone instead of building one.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "p_w")]
    variant: String,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct EvalArgs {
    /// One candidate per line: a JSON string, or plain text for one sentence.
    #[arg(long)]
    cands: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// External metric command; receives the two files and prints
    /// a `{name: number}` JSON object.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    external: Vec<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// Fixed γ pattern instead of masking.
    #[arg(long, conflicts_with = "mask")]
    kind: Option<PatternKind>,
    /// Fraction of off-diagonal parse cells to replace. Document i of a
    /// parse file is masked under a seed derived from --seed and i.
    #[arg(long)]
    mask: Option<f64>,
    #[arg(long)]
    parse_file: Option<PathBuf>,
    /// Mask this γ file directly instead of a parse file.
    #[arg(long)]
    gamma_file: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    ranks: Vec<usize>,
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    backbone: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Validate { parse_file } => validate_cmd(out, parse_file),
        Command::Build(a) => build(out, a),
        Command::Gamma(a) => gamma(out, a),
        Command::Train(a) => train(cli, a),
        Command::Generate(a) => generate_cmd(cli, a),
        Command::Eval(a) => eval(out, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Sweep(a) => {
            let mut cfg = load_config(cli, &a.config)?;
            cfg.ranks = a.ranks.clone();
            experiment(&cfg, a.backbone.as_deref(), out)
        }
        Command::Experiment(a) => {
            let cfg = load_config(cli, &a.config)?;
            experiment(&cfg, a.backbone.as_deref(), out)
        }
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes")
}

/// Hash a file written by library code and record it in the manifest.
fn adopt_file(run: &mut RunDir, rel: &str) -> Result<()> {
    let path = run.path().join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    run.adopt(rel, sha256_hex(&bytes));
    Ok(())
}

fn rel_name(path: &Path) -> Result<String> {
    if path.is_absolute() || path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Config(format!(
            "output `{}` must be a relative path inside --out-dir",
            path.display()
        )));
    }
    Ok(path.to_string_lossy().into_owned())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<u8> {
    let mut synth = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.corpus.synth,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.docs {
        synth.n_docs = n;
    }
    if let Some(seed) = cli.seed {
        synth.seed = seed;
    }
    let docs = synth_parse(&synth)?;
    let mut run = RunDir::create(&cli.out_dir)?;
    save_corpus(run.path(), &docs)?;
    adopt_file(&mut run, "parses.jsonl")?;
    adopt_file(&mut run, "corpus.jsonl")?;
    run.finish("synth", serde_json::to_value(&synth).expect("config serializes"), Some(synth.seed), vec![])?;
    println!("wrote {} documents to {}", docs.len(), cli.out_dir.display());
    Ok(0)
}

fn validate_cmd(out: &Path, parse_file: &Path) -> Result<u8> {
    let parses = load_parses(parse_file)?;
    let mut csv = String::from("doc_id,ok,violations\n");
    let mut rows = Vec::new();
    let mut bad = 0;
    for p in &parses {
        let report = validate(p);
        if !report.is_empty() {
            bad += 1;
        }
        let joined = report.violations.join("; ");
        csv.push_str(&format!("{},{},{}\n", p.doc_id(), report.is_empty(), joined.replace(',', " ")));
        rows.push(json!({"doc_id": p.doc_id(), "ok": report.is_empty(), "violations": report.violations}));
    }
    let mut run = RunDir::create(out)?;
    run.write_table("validation", &csv, &to_json(&rows))?;
    run.finish("validate", json!({}), None, vec![parse_file.display().to_string()])?;
    println!("{} of {} documents valid", parses.len() - bad, parses.len());
    Ok(if bad == 0 { 0 } else { 3 })
}

fn variants(choice: Option<Variant>) -> Vec<Variant> {
    choice.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v])
}

fn build(out: &Path, a: &BuildArgs) -> Result<u8> {
    let parses = load_parses(&a.parse_file)?;
    let options = a.merge.options();
    let mut lines = String::new();
    for p in &parses {
        for v in variants(a.variant) {
            let dist = make_variant_with(p, v, &options)?;
            let mut rec = dist.to_json();
            rec["doc_id"] = json!(p.doc_id());
            lines.push_str(&rec.to_string());
            lines.push('\n');
        }
    }
    let mut run = RunDir::create(out)?;
    run.write("distributions.jsonl", lines)?;
    let cfg = json!({
        "variants": variants(a.variant).iter().map(|v| v.tag()).collect::<Vec<_>>(),
        "merge_include_diagonal": options.include_diagonal,
        "binarize_after_merge": options.binarize_after_merge,
        "threshold": options.threshold,
    });
    run.finish("build", cfg, None, vec![a.parse_file.display().to_string()])?;
    Ok(0)
}

fn pick<'a>(parses: &'a [ParseOutput<f64>], doc_id: Option<&str>) -> Result<&'a ParseOutput<f64>> {
    match (doc_id, parses) {
        (Some(id), _) => parses
            .iter()
            .find(|p| p.doc_id() == id)
            .ok_or_else(|| Error::Data(format!("no document `{id}` in parse file"))),
        (None, [only]) => Ok(only),
        (None, []) => Err(Error::Data("parse file is empty".into())),
        (None, _) => Err(Error::Config("parse file holds several documents; pass --doc-id".into())),
    }
}

fn gamma(out: &Path, a: &GammaArgs) -> Result<u8> {
    let parses = load_parses(&a.parse_file)?;
    let parse = pick(&parses, a.doc_id.as_deref())?;
    let dist = make_variant_with(parse, a.variant, &a.merge.options())?;
    let seg = &parse.segmentation;
    let seq_len = a.seq_len.unwrap_or(a.doc_offset + seg.token_count);
    let g = project_gamma_with(&dist, seg, seq_len, a.d_model, a.doc_offset, a.layout)?;
    let mut bytes = Vec::new();
    write_gamma(&mut bytes, &g).expect("writing to memory");
    let mut run = RunDir::create(out)?;
    run.write(&rel_name(&a.out)?, bytes)?;
    let cfg = json!({
        "doc_id": parse.doc_id(),
        "variant": a.variant.tag(),
        "seq_len": seq_len,
        "d_model": a.d_model,
        "doc_offset": a.doc_offset,
        "layout": a.layout,
    });
    run.finish("gamma", cfg, None, vec![a.parse_file.display().to_string()])?;
    Ok(0)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<u8> {
    let cfg = load_config(cli, &a.config)?;
    let seed = cli.seed.unwrap_or(cfg.seeds[0]);
    let sub = match cfg.precision {
        Precision::F32 => run_single::<f32>(&cfg, &a.variant, seed, a.backbone.as_deref(), &cli.out_dir)?,
        Precision::F64 => run_single::<f64>(&cfg, &a.variant, seed, a.backbone.as_deref(), &cli.out_dir)?,
    };
    if !sub.ok {
        eprintln!("error: {}", sub.error.as_deref().unwrap_or("training failed"));
        return Ok(sub.exit_code.clamp(1, 255) as u8);
    }
    println!(
        "{} seed {}: best epoch {}, test R1 {:.4} R2 {:.4} RL {:.4} RLsum {:.4}",
        sub.condition, sub.seed, sub.best_epoch, sub.rouge1, sub.rouge2, sub.rouge_l, sub.rouge_lsum
    );
    Ok(0)
}

fn generate_cmd(cli: &Cli, a: &GenerateArgs) -> Result<u8> {
    let cfg = load_config(cli, &a.config)?;
    let seed = cli.seed.unwrap_or(cfg.seeds[0]);
    let preds = match cfg.precision {
        Precision::F32 => generate_split::<f32>(&cfg, &a.variant, seed, &a.backbone, &a.adapter, a.split)?,
        Precision::F64 => generate_split::<f64>(&cfg, &a.variant, seed, &a.backbone, &a.adapter, a.split)?,
    };
    let mut all = String::new();
    let mut cands = String::new();
    let mut refs = String::new();
    for p in &preds {
        all.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        all.push('\n');
        cands.push_str(&json!(p.candidate).to_string());
        cands.push('\n');
        refs.push_str(&json!(p.reference).to_string());
        refs.push('\n');
    }
    let mut run = RunDir::create(&cli.out_dir)?;
    run.write("predictions.jsonl", all)?;
    run.write("cands.jsonl", cands)?;
    run.write("refs.jsonl", refs)?;
    let inputs = vec![a.backbone.display().to_string(), a.adapter.display().to_string()];
    run.finish("generate", json!({"condition": a.variant, "decode": cfg.decode}), Some(seed), inputs)?;
    Ok(0)
}

fn read_texts(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            if line.trim_start().starts_with('"') {
                serde_json::from_str::<String>(line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            } else {
                Ok(line.to_string())
            }
        })
        .collect()
}

fn eval(out: &Path, a: &EvalArgs) -> Result<u8> {
    let cands = read_texts(&a.cands)?;
    let refs = read_texts(&a.refs)?;
    if cands.len() != refs.len() {
        return Err(Error::Data(format!("{} candidates but {} references", cands.len(), refs.len())));
    }
    let pairs: Vec<(String, String)> = cands.into_iter().zip(refs).collect();
    let mut report: EvalReport = evaluate_corpus(&pairs)?;
    if !a.external.is_empty() {
        report.external = run_external_metric(&a.external, &a.cands, &a.refs)?;
    }
    let mut csv = String::from("doc,rouge1_f1,rouge2_f1,rougeL_f1,rougeLsum_f1\n");
    for (i, d) in report.documents.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6}\n",
            d.rouge1.f1, d.rouge2.f1, d.rouge_l.f1, d.rouge_lsum.f1
        ));
    }
    let rel = rel_name(&a.out)?;
    let stem = rel.strip_suffix(".json").unwrap_or(&rel).to_string();
    let mut run = RunDir::create(out)?;
    run.write(&format!("{stem}.json"), to_json(&report))?;
    run.write(&format!("{stem}.csv"), csv)?;
    let inputs = vec![a.cands.display().to_string(), a.refs.display().to_string()];
    run.finish("eval", json!({"external": a.external}), None, inputs)?;
    let m = report.mean_f1;
    println!(
        "{} documents: R1 {:.4} R2 {:.4} RL {:.4} RLsum {:.4}",
        report.doc_count, m.rouge1, m.rouge2, m.rouge_l, m.rouge_lsum
    );
    Ok(0)
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<u8> {
    let seed = cli.seed.unwrap_or(0);
    let mut run = RunDir::create(&cli.out_dir)?;
    let (cfg, inputs) = match (a.kind, a.mask) {
        (Some(kind), _) => {
            let g = gamma_pattern::<f32>(kind, a.seq_len, a.d_model, seed)?;
            let mut bytes = Vec::new();
            write_gamma(&mut bytes, &g).expect("writing to memory");
            let name = a.out.clone().unwrap_or_else(|| format!("{kind}.rstg").into());
            run.write(&rel_name(&name)?, bytes)?;
            (json!({"kind": kind, "seq_len": a.seq_len, "d_model": a.d_model}), vec![])
        }
        (None, Some(fraction)) => {
            let spec = MaskSpec { fraction, seed };
            spec.check()?;
            match (&a.gamma_file, &a.parse_file) {
                (Some(gpath), _) => {
                    let g = load_gamma::<f32>(gpath)?;
                    let mut bytes = Vec::new();
                    write_gamma(&mut bytes, &mask_gamma(&g, &spec)?).expect("writing to memory");
                    let name = a.out.clone().unwrap_or_else(|| "masked.rstg".into());
                    run.write(&rel_name(&name)?, bytes)?;
                    (json!({"mask": fraction, "target": "gamma"}), vec![gpath.display().to_string()])
                }
                (None, Some(ppath)) => {
                    let parses = load_parses(ppath)?;
                    // Each document gets its own stream so masks do not depend on file order.
                    let masked = parses
                        .iter()
                        .enumerate()
                        .map(|(i, p)| {
                            let doc_spec = MaskSpec {
                                fraction,
                                seed: rstlora::util::derive_seed(seed, i as u64),
                            };
                            mask_parse(p, &doc_spec)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut bytes = Vec::new();
                    write_parses(&mut bytes, &masked).expect("writing to memory");
                    let name = a.out.clone().unwrap_or_else(|| "masked.jsonl".into());
                    run.write(&rel_name(&name)?, bytes)?;
                    (json!({"mask": fraction, "target": "parse"}), vec![ppath.display().to_string()])
                }
                (None, None) => return Err(Error::Config("--mask needs --parse-file or --gamma-file".into())),
            }
        }
        (None, None) => return Err(Error::Config("ablate needs --kind or --mask".into())),
    };
    run.finish("ablate", cfg, Some(seed), inputs)?;
    Ok(0)
}

fn experiment(cfg: &ExperimentConfig, backbone: Option<&Path>, out: &Path) -> Result<u8> {
    let outcome: ExperimentOutcome = match cfg.precision {
        Precision::F32 => run_experiment_with::<f32>(cfg, backbone, out)?,
        Precision::F64 => run_experiment_with::<f64>(cfg, backbone, out)?,
    };
    print!("{}", outcome.comparison.to_csv());
    let failures = outcome.failures();
    for f in &failures {
        eprintln!("sub-run {} failed: {}", f.dir, f.error.as_deref().unwrap_or("unknown error"));
    }
    Ok(failures.iter().map(|f| f.exit_code.clamp(1, 255) as u8).max().unwrap_or(0))
}
