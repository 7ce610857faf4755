//! Command implementations behind the binary.
//!
//! Training commands write into `--out`:
//!
//! ```text
//! <phase>.ckpt        final weights of the phase
//! <phase>.state       resumable state after the last finished epoch
//! <phase>.jsonl       one log line per epoch
//! <phase>.config.json effective configuration
//! ```
//!
//! with `<phase>` one of `pretrain`, `backbone`, `train`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use super::{
    append_log, init_joint, predict, pretrain, read_log, restore_best, train_backbone, train_joint, Checkpoint, EpochLog, Group,
    Model, Phase, PhaseState, PipelineError, Snapshot, TrainConfig,
};
use crate::data::{
    load_dataset, read_image, read_textbook, synth_dataset, synth_textbook, tokenize, write_dataset, write_manifest, Dataset,
    Manifest, Partition, Sample, SynthSpec,
};
use crate::decoder::Vocabulary;
use crate::metrics::{evaluate, TagScores};
use crate::tensor::no_grad;
use crate::vision::{extract_region, heatmap, ImageTensor};

#[derive(Debug, Parser)]
#[command(name = "asgk", version, about = "Report generation guided by internal and external auxiliary signals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with its manifest.
    Synth(SynthArgs),
    /// Phase one: sentence autoencoding over the textbook.
    Pretrain(PretrainArgs),
    /// Phase two: global and region backbones with focal-loss tag heads.
    TrainBackbone(BackboneArgs),
    /// Phase three: joint training.
    Train(TrainArgs),
    /// Greedy reports and tag scores for a dataset split.
    Generate(GenerateArgs),
    /// Score candidate reports and tag scores.
    Evaluate(EvaluateArgs),
    /// Heat-map region of one image.
    ExtractRegion(ExtractArgs),
    /// Tag graph of one image.
    InspectGraph(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON object of flat configuration keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// One configuration key, `KEY=VALUE`; the value is read as JSON when it
    /// parses, else as a string. Applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Start from the reduced 5/10/10-epoch profile instead of the defaults.
    #[arg(long)]
    pub desk: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub tags: Option<usize>,
    #[arg(long)]
    pub abnormal_rate: Option<f64>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; its training reports join the vocabulary.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Defaults to `<data>/textbook.txt`.
    #[arg(long, value_name = "PATH")]
    pub textbook: Option<PathBuf>,
    /// Continue from `<out>/pretrain.state`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BackboneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub textbook: Option<PathBuf>,
    /// Plain BCE instead of the focal loss on the three branches.
    #[arg(long)]
    pub no_focal: bool,
    /// Extract the training regions once, when the region branch joins.
    #[arg(long)]
    pub freeze_heatmap: bool,
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub textbook: Option<PathBuf>,
    /// Phase-one checkpoint; required unless `--no-external`.
    #[arg(long, value_name = "PATH")]
    pub pretrained: Option<PathBuf>,
    /// Phase-two checkpoint.
    #[arg(long, value_name = "PATH")]
    pub backbone: Option<PathBuf>,
    /// Feed the graph encoder `f_g` and skip the region branch.
    #[arg(long)]
    pub no_internal: bool,
    /// Start graph encoder and decoder from scratch.
    #[arg(long)]
    pub no_external: bool,
    #[arg(long)]
    pub no_focal: bool,
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated sample ids; every id must exist in the split.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// TSV `id<TAB>report`.
    #[arg(long, value_name = "PATH")]
    pub candidates: PathBuf,
    /// TSV `id<TAB>report[<TAB>report…]`.
    #[arg(long, value_name = "PATH")]
    pub references: PathBuf,
    /// TSV with header `id<TAB>tag…` and one probability row per id.
    #[arg(long, value_name = "PATH", requires = "labels")]
    pub tag_scores: Option<PathBuf>,
    /// TSV like `--tag-scores` with 0/1 entries.
    #[arg(long, value_name = "PATH", requires = "tag_scores")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Checkpoint holding the visual group; without one an untrained network
    /// is built from the configuration and seed.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub node_threshold: f64,
    #[arg(long, default_value_t = 0.3)]
    pub edge_threshold: f64,
}

pub fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Pretrain(a) => cmd_pretrain(&a).map(|_| ()),
        Command::TrainBackbone(a) => cmd_train_backbone(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::ExtractRegion(a) => cmd_extract_region(&a).map(|v| println!("{v}")),
        Command::InspectGraph(a) => cmd_inspect_graph(&a).map(|v| println!("{v}")),
    }
}

// ---- shared plumbing ---------------------------------------------------------

fn overrides(common: &Common) -> Result<Map<String, Value>, PipelineError> {
    let mut map = Map::new();
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        map.insert(k.trim().to_string(), value);
    }
    if let Some(seed) = common.seed {
        map.insert("seed".into(), json!(seed));
    }
    Ok(map)
}

fn resolve(common: &Common, flags: &[(&str, Value)]) -> Result<TrainConfig, PipelineError> {
    let base = if common.desk { TrainConfig::desk() } else { TrainConfig::default() };
    resolve_over(base, common, flags)
}

fn resolve_over(base: TrainConfig, common: &Common, flags: &[(&str, Value)]) -> Result<TrainConfig, PipelineError> {
    let mut map = overrides(common)?;
    for (k, v) in flags {
        map.insert((*k).to_string(), v.clone());
    }
    TrainConfig::resolve_over(base, common.config.as_deref(), &map)
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    Ok(Checkpoint::load(path)?)
}

/// Model from a checkpoint, with `--config`/`--set`/`--seed` applied on top of
/// the stored configuration.
fn model_from(path: &Path, common: &Common) -> Result<(Model, Snapshot), PipelineError> {
    let ckpt = load_checkpoint(path)?;
    let snap = Snapshot::of(&ckpt)?;
    let cfg = resolve_over(snap.config.clone(), common, &[])?;
    Ok((Model::from_checkpoint_with(&ckpt, &cfg)?, snap))
}

fn require_groups(snap: &Snapshot, path: &Path, groups: &[Group]) -> Result<(), PipelineError> {
    let missing: Vec<&str> = groups.iter().filter(|g| !snap.groups.contains(g)).map(|g| g.label()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Input(format!("{} lacks the {} parameters", path.display(), missing.join(", "))))
    }
}

fn textbook_for(data: &Path, explicit: Option<&Path>) -> Result<Vec<String>, PipelineError> {
    let path = explicit.map_or_else(|| data.join("textbook.txt"), Path::to_path_buf);
    Ok(read_textbook(&path)?)
}

/// File names of one phase under `out`.
struct PhaseFiles {
    ckpt: PathBuf,
    state: PathBuf,
    log: PathBuf,
    config: PathBuf,
}

impl PhaseFiles {
    fn new(out: &Path, stem: &str) -> Self {
        Self {
            ckpt: out.join(format!("{stem}.ckpt")),
            state: out.join(format!("{stem}.state")),
            log: out.join(format!("{stem}.jsonl")),
            config: out.join(format!("{stem}.config.json")),
        }
    }

    /// Fresh or resumed phase state. A fresh start clears the old log; a
    /// resume drops log lines past the saved state.
    fn begin(&self, model: &mut Model, phase: Phase, resume: bool) -> Result<PhaseState, PipelineError> {
        if !resume {
            if self.log.exists() {
                fs::remove_file(&self.log).map_err(|e| PipelineError::io(&self.log, e))?;
            }
            return Ok(PhaseState::new(phase));
        }
        if !self.state.exists() {
            return Err(PipelineError::Input(format!("nothing to resume: {} does not exist", self.state.display())));
        }
        let ckpt = load_checkpoint(&self.state)?;
        let snap = Snapshot::of(&ckpt)?;
        if snap.phase != phase {
            return Err(PipelineError::Input(format!("{} holds a {:?} state", self.state.display(), snap.phase)));
        }
        if snap.vocab != model.vocab {
            return Err(PipelineError::Input("resumed state was built over a different vocabulary".into()));
        }
        let state = PhaseState::resume(&ckpt, model)?;
        let kept: Vec<EpochLog> = if self.log.exists() {
            read_log(&self.log)?.into_iter().filter(|l| l.epoch < state.epochs_done).collect()
        } else {
            Vec::new()
        };
        let mut text = String::new();
        for l in &kept {
            text.push_str(&serde_json::to_string(l).expect("log line"));
            text.push('\n');
        }
        write(&self.log, &text)?;
        Ok(state)
    }

    fn hook<'a>(&'a self, groups: &'a [Group]) -> impl FnMut(&Model, &PhaseState, &EpochLog) -> Result<(), PipelineError> + 'a {
        move |model, state, log| {
            append_log(&self.log, log)?;
            state.checkpoint(model, groups).save(&self.state)?;
            eprintln!("{}", serde_json::to_string(log).expect("log line"));
            Ok(())
        }
    }
}

// ---- commands ----------------------------------------------------------------

/// Writes the dataset and returns its manifest.
pub fn cmd_synth(args: &SynthArgs) -> Result<Manifest, PipelineError> {
    let mut merged = match serde_json::to_value(SynthSpec::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("spec serialises to an object"),
    };
    if let Some(path) = &args.common.config {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(m) = serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        else {
            return Err(PipelineError::Config(format!("{}: expected a JSON object", path.display())));
        };
        merged.extend(m);
    }
    merged.extend(overrides(&args.common)?);
    let flags = [
        ("n_samples", args.n.map(|v| json!(v))),
        ("n_tags", args.tags.map(|v| json!(v))),
        ("abnormal_rate", args.abnormal_rate.map(|v| json!(v))),
        ("image_size", args.image_size.map(|v| json!(v))),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            merged.insert(k.into(), v);
        }
    }
    let spec: SynthSpec = serde_json::from_value(Value::Object(merged)).map_err(|e| PipelineError::Config(e.to_string()))?;
    let ds = synth_dataset(&spec)?;
    let book = synth_textbook(&spec);
    ensure_dir(&args.common.out)?;
    write_dataset(&args.common.out, &ds, &book)?;
    let manifest = Manifest::new(&spec, &ds, &book);
    write_manifest(&args.common.out, &manifest)?;
    println!(
        "{} samples ({} train, {} val, {} test), {} tags -> {}",
        ds.samples.len(),
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len(),
        ds.n_tags(),
        args.common.out.display()
    );
    Ok(manifest)
}

fn load_data(data: &Path, cfg: &TrainConfig) -> Result<Dataset, PipelineError> {
    Ok(load_dataset(data, cfg.seed)?)
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<PathBuf, PipelineError> {
    let cfg = resolve(&args.common, &[])?;
    let ds = load_data(&args.data, &cfg)?;
    let book = textbook_for(&args.data, args.textbook.as_deref())?;
    if book.is_empty() {
        return Err(PipelineError::Input("textbook has no sentences".into()));
    }
    ensure_dir(&args.common.out)?;
    let files = PhaseFiles::new(&args.common.out, "pretrain");
    write(&files.config, &pretty(&cfg))?;
    let groups = [Group::Gru, Group::Graph, Group::Decoder];
    let mut model = Model::for_dataset(&cfg, &ds, &book)?;
    let mut state = files.begin(&mut model, Phase::Pretrain, args.resume)?;
    pretrain(&mut model, &book, &mut state, &mut files.hook(&groups))?;
    model.checkpoint(Phase::Pretrain, state.epochs_done, &groups).save(&files.ckpt)?;
    println!("{}", files.ckpt.display());
    Ok(files.ckpt)
}

pub fn cmd_train_backbone(args: &BackboneArgs) -> Result<PathBuf, PipelineError> {
    let mut flags = Vec::new();
    if args.no_focal {
        flags.push(("use_focal", json!(false)));
    }
    if args.freeze_heatmap {
        flags.push(("freeze_heatmap", json!(true)));
    }
    let cfg = resolve(&args.common, &flags)?;
    let ds = load_data(&args.data, &cfg)?;
    let book = textbook_for(&args.data, args.textbook.as_deref())?;
    ensure_dir(&args.common.out)?;
    let files = PhaseFiles::new(&args.common.out, "backbone");
    write(&files.config, &pretty(&cfg))?;
    let groups = [Group::Visual];
    let mut model = Model::for_dataset(&cfg, &ds, &book)?;
    let mut state = files.begin(&mut model, Phase::Backbone, args.resume)?;
    train_backbone(&mut model, &ds, &mut state, &mut files.hook(&groups))?;
    restore_best(&mut model, &state)?;
    model.checkpoint(Phase::Backbone, state.epochs_done, &groups).save(&files.ckpt)?;
    println!("{}", files.ckpt.display());
    Ok(files.ckpt)
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf, PipelineError> {
    let mut flags = Vec::new();
    for (on, key) in [(args.no_internal, "use_internal"), (args.no_external, "use_external"), (args.no_focal, "use_focal")] {
        if on {
            flags.push((key, json!(false)));
        }
    }
    let cfg = resolve(&args.common, &flags)?;
    let ds = load_data(&args.data, &cfg)?;
    let book = textbook_for(&args.data, args.textbook.as_deref())?;
    let pretrained = args.pretrained.as_deref().map(load_checkpoint).transpose()?;
    let backbone = args.backbone.as_deref().map(load_checkpoint).transpose()?;
    ensure_dir(&args.common.out)?;
    let files = PhaseFiles::new(&args.common.out, "train");
    write(&files.config, &pretty(&cfg))?;
    let groups = Group::ALL;
    let mut model = init_joint(&cfg, &ds, &book, pretrained.as_ref(), backbone.as_ref())?;
    let mut state = files.begin(&mut model, Phase::Train, args.resume)?;
    train_joint(&mut model, &ds, &mut state, &mut files.hook(&groups))?;
    model.checkpoint(Phase::Train, state.epochs_done, &groups).save(&files.ckpt)?;
    println!("{}", files.ckpt.display());
    Ok(files.ckpt)
}

fn partition_samples<'a>(ds: &'a Dataset, split: &str) -> Result<Vec<&'a Sample>, PipelineError> {
    Ok(match split {
        "train" => ds.part(Partition::Train).collect(),
        "val" => ds.part(Partition::Val).collect(),
        "test" => ds.part(Partition::Test).collect(),
        "all" => ds.samples.iter().collect(),
        other => return Err(PipelineError::Config(format!("unknown split {other:?} (expected train, val, test or all)"))),
    })
}

fn clean(text: &str) -> String {
    text.replace(['\t', '\n', '\r'], " ")
}

fn tag_table(names: &[String], ids: &[String], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = format!("id\t{}\n", names.iter().map(|n| clean(n)).collect::<Vec<_>>().join("\t"));
    for (id, row) in ids.iter().zip(rows) {
        let _ = writeln!(out, "{id}\t{}", row.join("\t"));
    }
    out
}

/// Writes `reports.tsv`, `references.tsv`, `tag_scores.tsv` and `labels.tsv`
/// under `--out`; returns the path of the reports file.
pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf, PipelineError> {
    let (model, snap) = model_from(&args.checkpoint, &args.common)?;
    require_groups(&snap, &args.checkpoint, &[Group::Visual, Group::Graph, Group::Decoder])?;
    let ds = load_data(&args.data, &model.config)?;
    let mut samples = partition_samples(&ds, &args.split)?;
    if !args.ids.is_empty() {
        let present: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        let missing: Vec<String> = args.ids.iter().filter(|id| !present.contains(id.as_str())).cloned().collect();
        if !missing.is_empty() {
            return Err(PipelineError::Input(format!("ids not in the {} split: {}", args.split, missing.join(", "))));
        }
        let wanted: BTreeSet<&str> = args.ids.iter().map(String::as_str).collect();
        samples.retain(|s| wanted.contains(s.id.as_str()));
    }
    if model.tag_names.len() != ds.n_tags() {
        return Err(PipelineError::Input(format!("dataset has {} tags, checkpoint {}", ds.n_tags(), model.tag_names.len())));
    }
    let preds = predict(&model, samples.iter().copied())?;
    ensure_dir(&args.common.out)?;
    write(&args.common.out.join("generate.config.json"), &pretty(&model.config))?;
    let mut reports = String::new();
    let mut refs = String::new();
    for ((id, r), s) in preds.ids.iter().zip(&preds.reports).zip(&samples) {
        let _ = writeln!(reports, "{id}\t{}", clean(r));
        let _ = writeln!(refs, "{id}\t{}", clean(&s.report));
    }
    let path = args.common.out.join("reports.tsv");
    write(&path, &reports)?;
    write(&args.common.out.join("references.tsv"), &refs)?;
    let scores = tag_table(&ds.tag_names, &preds.ids, preds.tag_scores.iter().map(|r| r.iter().map(|p| p.to_string()).collect()));
    write(&args.common.out.join("tag_scores.tsv"), &scores)?;
    let labels = tag_table(
        &ds.tag_names,
        &preds.ids,
        samples.iter().map(|s| s.tags.iter().map(|&t| u8::from(t).to_string()).collect()),
    );
    write(&args.common.out.join("labels.tsv"), &labels)?;
    println!("{} reports -> {}", preds.ids.len(), path.display());
    Ok(path)
}

/// `id → columns` of a TSV file; duplicate ids are an input error.
fn read_tsv(path: &Path, header: bool) -> Result<(Vec<String>, BTreeMap<String, Vec<String>>), PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head = if header {
        let h = lines.next().ok_or_else(|| PipelineError::Input(format!("{}: empty file", path.display())))?;
        h.split('\t').skip(1).map(String::from).collect()
    } else {
        Vec::new()
    };
    let mut rows = BTreeMap::new();
    for line in lines {
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().to_string();
        if rows.insert(id.clone(), cols.map(String::from).collect()).is_some() {
            return Err(PipelineError::Input(format!("{}: duplicate id {id}", path.display())));
        }
    }
    Ok((head, rows))
}

fn align(expected: &BTreeMap<String, Vec<String>>, got: &BTreeMap<String, Vec<String>>) -> Result<(), PipelineError> {
    let missing: Vec<String> = expected.keys().filter(|k| !got.contains_key(*k)).cloned().collect();
    let unexpected: Vec<String> = got.keys().filter(|k| !expected.contains_key(*k)).cloned().collect();
    if missing.is_empty() && unexpected.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Alignment { missing, unexpected })
    }
}

fn numeric_rows(path: &Path, rows: &BTreeMap<String, Vec<String>>, width: usize) -> Result<BTreeMap<String, Vec<f64>>, PipelineError> {
    rows.iter()
        .map(|(id, cols)| {
            if cols.len() != width {
                return Err(PipelineError::Input(format!("{}: row {id} has {} values, expected {width}", path.display(), cols.len())));
            }
            let vals = cols
                .iter()
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PipelineError::Input(format!("{}: row {id}: {e}", path.display())))?;
            Ok((id.clone(), vals))
        })
        .collect()
}

/// Writes `eval.json` and `eval.txt` under `--out`; returns the JSON value.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Value, PipelineError> {
    let (_, refs) = read_tsv(&args.references, false)?;
    let (_, cands) = read_tsv(&args.candidates, false)?;
    align(&refs, &cands)?;
    let ids: Vec<&String> = refs.keys().collect();
    let candidates: Vec<Vec<String>> = ids.iter().map(|id| tokenize(&cands[*id].join(" "))).collect();
    let references: Vec<Vec<Vec<String>>> = ids.iter().map(|id| refs[*id].iter().map(|r| tokenize(r)).collect()).collect();
    let tags = match (&args.tag_scores, &args.labels) {
        (Some(sp), Some(lp)) => {
            let (names, scores) = read_tsv(sp, true)?;
            let (label_names, labels) = read_tsv(lp, true)?;
            if names != label_names {
                return Err(PipelineError::Input("tag-score and label headers differ".into()));
            }
            align(&refs, &scores)?;
            align(&refs, &labels)?;
            let scores = numeric_rows(sp, &scores, names.len())?;
            let labels = numeric_rows(lp, &labels, names.len())?;
            let s: Vec<Vec<f64>> = ids.iter().map(|id| scores[*id].clone()).collect();
            let l: Vec<Vec<bool>> = ids.iter().map(|id| labels[*id].iter().map(|&v| v > 0.5).collect()).collect();
            Some((names, s, l))
        }
        _ => None,
    };
    let report = evaluate(
        &candidates,
        &references,
        tags.as_ref().map(|(names, scores, labels)| TagScores { names, scores, labels }),
    )?;
    ensure_dir(&args.common.out)?;
    let value = serde_json::to_value(&report).expect("report serialises");
    write(&args.common.out.join("eval.json"), &pretty(&value))?;
    let table = report.table();
    write(&args.common.out.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(value)
}

fn load_image_for(path: &Path, size: usize) -> Result<(ImageTensor, ImageTensor), PipelineError> {
    let original = read_image(path)?;
    let resized = original.resized(size, size)?;
    Ok((original, resized))
}

/// Region JSON: `bbox` in pixels of the input image as `[r0, c0, r1, c1]`
/// inclusive, `mask_rle` as `[start, length]` runs over the row-major heat
/// grid, `fallback`, plus the grid bbox and size. Also written to
/// `<out>/region.json`.
pub fn cmd_extract_region(args: &ExtractArgs) -> Result<Value, PipelineError> {
    let tau: Vec<(&str, Value)> = args.tau.map(|t| ("tau", json!(t))).into_iter().collect();
    let model = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let snap = Snapshot::of(&ckpt)?;
            require_groups(&snap, path, &[Group::Visual])?;
            let cfg = resolve_over(snap.config.clone(), &args.common, &tau)?;
            Model::from_checkpoint_with(&ckpt, &cfg)?
        }
        None => {
            let cfg = resolve(&args.common, &tau)?;
            Model::new(&cfg, Vocabulary::build(std::iter::empty::<&[String]>(), 1))?
        }
    };
    let (original, image) = load_image_for(&args.image, model.config.image_size)?;
    let region = no_grad(|| -> Result<_, PipelineError> {
        let (f_c, _) = model.visual.global.forward(&model.store, &image)?;
        Ok(extract_region(&heatmap(&f_c)?, &model.visual.config.region))
    })?;
    let (r0, c0, r1, c1) = region.bbox;
    let (h, w) = (original.height(), original.width());
    let px = |cell: usize, size: usize, cells: usize| cell * size / cells;
    let bbox = [
        px(r0, h, region.rows),
        px(c0, w, region.cols),
        px(r1 + 1, h, region.rows) - 1,
        px(c1 + 1, w, region.cols) - 1,
    ];
    let value = json!({
        "bbox": bbox,
        "mask_rle": region.mask_rle().iter().map(|&(s, n)| [s, n]).collect::<Vec<_>>(),
        "fallback": region.fallback,
        "area": region.area,
        "grid": [region.rows, region.cols],
        "grid_bbox": [r0, c0, r1, c1],
        "tau": model.config.tau,
    });
    ensure_dir(&args.common.out)?;
    write(&args.common.out.join("region.json"), &pretty(&value))?;
    Ok(value)
}

/// Tag graph JSON with nodes above `--node-threshold` and edges above
/// `--edge-threshold`. Also written to `<out>/graph.json`.
pub fn cmd_inspect_graph(args: &InspectArgs) -> Result<Value, PipelineError> {
    let (model, snap) = model_from(&args.checkpoint, &args.common)?;
    require_groups(&snap, &args.checkpoint, &[Group::Visual, Group::Graph])?;
    let (_, image) = load_image_for(&args.image, model.config.image_size)?;
    let graph = no_grad(|| model.tag_graph(&image, model.config.use_internal))?.1;
    let probs = graph.node_probs.to_vec();
    let n = probs.len();
    let tags: Vec<Value> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > args.node_threshold)
        .map(|(i, &p)| json!({"name": model.tag_names[i], "prob": p}))
        .collect();
    let edges: Vec<Value> = graph
        .edges
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > args.edge_threshold)
        .map(|(k, &w)| json!([k / n, k % n, w]))
        .collect();
    let value = json!({ "tags": tags, "edges": edges });
    ensure_dir(&args.common.out)?;
    write(&args.common.out.join("graph.json"), &pretty(&value))?;
    Ok(value)
}
