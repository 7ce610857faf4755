use std::collections::{BTreeMap, BTreeSet};

use super::{Checkpoint, CheckpointError, EpochLog, Group, Model, Phase, PipelineError, Record, Snapshot, TrainConfig};
use crate::data::{tokenize, Dataset, Partition, Sample};
use crate::decoder::TokenSequence;
use crate::graph::{focal_loss, tag_bce};
use crate::metrics::{evaluate, mean_defined, per_tag_auc, EvalReport, TagScores};
use crate::tensor::{backward, no_grad, Adam, AdamConfig, Gradients, SeededRng, Tensor};
use crate::vision::{BranchProbs, Region, RegionSource};

/// Called after every epoch, e.g. to append the log line and write a
/// resumable checkpoint.
pub type EpochHook<'a> = &'a mut dyn FnMut(&Model, &PhaseState, &EpochLog) -> Result<(), PipelineError>;

/// Resumable progress of one phase.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub phase: Phase,
    pub epochs_done: usize,
    pub optimizers: BTreeMap<String, Adam>,
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best: Vec<Record>,
    /// Regions for the training split, fixed once the region branch joins
    /// under `freeze_heatmap`.
    pub frozen_regions: Option<Vec<Region>>,
}

const BEST: &str = "best/";

impl PhaseState {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            epochs_done: 0,
            optimizers: BTreeMap::new(),
            best_score: None,
            best_epoch: None,
            best: Vec::new(),
            frozen_regions: None,
        }
    }

    fn optimizer(&mut self, name: &str, lr: f64) -> &mut Adam {
        let opt = self
            .optimizers
            .entry(name.to_string())
            .or_insert_with(|| Adam::new(AdamConfig::with_lr(lr)));
        opt.set_lr(lr);
        opt
    }

    /// Current weights of `groups`, optimizer moments and selection state.
    pub fn checkpoint(&self, model: &Model, groups: &[Group]) -> Checkpoint {
        let mut records = model.records(groups, "");
        let names: Vec<&str> = model.store.iter().map(|(n, _)| n).collect();
        let mut steps = BTreeMap::new();
        for (opt_name, opt) in &self.optimizers {
            steps.insert(opt_name.clone(), opt.step_count());
            for (slot, m, v) in opt.moments() {
                for (kind, vals) in [("m", m), ("v", v)] {
                    records.push(Record {
                        name: format!("opt/{opt_name}/{kind}/{}", names[slot]),
                        dims: vec![vals.len()],
                        values: vals.clone(),
                    });
                }
            }
        }
        records.extend(self.best.iter().cloned());
        let snapshot = Snapshot {
            optimizer_steps: steps,
            best_score: self.best_score,
            best_epoch: self.best_epoch,
            frozen_regions: self.frozen_regions.clone(),
            ..model.snapshot(self.phase, self.epochs_done, groups)
        };
        Checkpoint {
            records,
            snapshot: serde_json::to_value(snapshot).expect("snapshot serialises"),
        }
    }

    /// Restores weights and state written by [`PhaseState::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, model: &mut Model) -> Result<Self, PipelineError> {
        let snap = Snapshot::of(ckpt)?;
        model.load_groups(ckpt, &snap.groups)?;
        let slots: BTreeMap<&str, usize> = model.store.iter().enumerate().map(|(i, (n, _))| (n, i)).collect();
        let mut optimizers = BTreeMap::new();
        for (opt_name, &step) in &snap.optimizer_steps {
            let prefix = format!("opt/{opt_name}/m/");
            let mut moments = Vec::new();
            for r in ckpt.records.iter().filter(|r| r.name.starts_with(&prefix)) {
                let param = &r.name[prefix.len()..];
                let slot = *slots
                    .get(param)
                    .ok_or_else(|| CheckpointError::Mismatch(format!("optimizer state for unknown parameter {param}")))?;
                let v = ckpt
                    .get(&format!("opt/{opt_name}/v/{param}"))
                    .ok_or_else(|| CheckpointError::Mismatch(format!("{param}: second moment missing")))?;
                moments.push((slot, r.values.clone(), v.values.clone()));
            }
            let mut opt = Adam::new(AdamConfig::default());
            opt.restore(step, model.store.len(), moments);
            optimizers.insert(opt_name.clone(), opt);
        }
        Ok(Self {
            phase: snap.phase,
            epochs_done: snap.epochs_done,
            optimizers,
            best_score: snap.best_score,
            best_epoch: snap.best_epoch,
            best: ckpt.records.iter().filter(|r| r.name.starts_with(BEST)).cloned().collect(),
            frozen_regions: snap.frozen_regions,
        })
    }
}

/// Batches of indices into `0..n`; a pure function of seed, phase and epoch.
fn batches(n: usize, size: usize, seed: u64, phase: Phase, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::derive(seed ^ phase.salt(), epoch as u64).shuffle(&mut order);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Running sums of named loss components.
#[derive(Default)]
struct Tally {
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl Tally {
    fn add(&mut self, parts: &[(&str, f64)]) {
        for (k, v) in parts {
            *self.sums.entry((*k).to_string()).or_default() += v;
        }
        self.count += 1;
    }

    fn means(&self) -> BTreeMap<String, f64> {
        self.sums.iter().map(|(k, v)| (k.clone(), v / self.count.max(1) as f64)).collect()
    }
}

fn moved_groups(model: &Model, grads: &Gradients, into: &mut BTreeSet<Group>) {
    for name in model.store.touched(grads) {
        if let Some(g) = Group::of(&name) {
            into.insert(g);
        }
    }
}

/// Sum of the per-branch tag losses: focal, or BCE with `use_focal` off.
pub fn branch_loss(probs: &BranchProbs, y: &[f64], cfg: &TrainConfig) -> Result<Tensor, PipelineError> {
    let one = |p: &Tensor| if cfg.use_focal { focal_loss(p, y, &cfg.focal()) } else { tag_bce(p, y) };
    let mut total = one(&probs.global)?;
    for p in probs.region.iter().chain(&probs.fusion) {
        total = total.add(&one(p)?)?;
    }
    Ok(total)
}

fn encode_all(model: &Model, sentences: impl Iterator<Item = String>) -> Result<Vec<TokenSequence>, PipelineError> {
    sentences
        .map(|s| tokenize(&s))
        .filter(|t| !t.is_empty())
        .map(|t| Ok(TokenSequence::encode(&model.vocab, &t, model.config.max_len)?))
        .collect()
}

/// Phase one: sentence autoencoding through GRU → graph encoder → decoder.
pub fn pretrain(model: &mut Model, textbook: &[String], state: &mut PhaseState, hook: EpochHook<'_>) -> Result<Vec<EpochLog>, PipelineError> {
    let seqs = encode_all(model, textbook.iter().cloned())?;
    if seqs.is_empty() {
        return Err(PipelineError::Input("textbook has no sentences".into()));
    }
    let cfg = model.config.clone();
    let trained = [Group::Gru, Group::Graph, Group::Decoder];
    let mut logs = Vec::new();
    for epoch in state.epochs_done..cfg.pretrain_epochs {
        let mut tally = Tally::default();
        let mut moved = BTreeSet::new();
        for batch in batches(seqs.len(), cfg.batch_size, cfg.seed, Phase::Pretrain, epoch) {
            let mut grads = Gradients::default();
            for &i in &batch {
                let seq = &seqs[i];
                let signal = model.sentence_signal(seq)?;
                let graph = model.graph.forward(&model.store, &signal)?;
                let lm = model.decoder.sequence_loss(&model.store, seq, &graph)?;
                tally.add(&[("lm", lm.item())]);
                grads.accumulate(backward(&lm.scale(1.0 / batch.len() as f64)?)?);
            }
            moved_groups(model, &grads, &mut moved);
            state
                .optimizer("text", cfg.pretrain_lr)
                .step_where(&mut model.store, &grads, |n| Group::of(n).is_some_and(|g| trained.contains(&g)));
        }
        state.epochs_done = epoch + 1;
        let log = EpochLog {
            epoch,
            phase: Phase::Pretrain,
            losses: tally.means(),
            val: BTreeMap::new(),
            lr: BTreeMap::from([("text".to_string(), cfg.pretrain_lr)]),
            moved: moved.iter().map(|g| g.label().to_string()).collect(),
        };
        hook(model, state, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Mean AUC of `probs` rows against the samples' labels, 0.5 when no tag
/// has both classes.
fn mean_auc(probs: &[Vec<f64>], samples: &[&Sample]) -> f64 {
    let labels: Vec<Vec<bool>> = samples.iter().map(|s| s.tags.clone()).collect();
    let n_tags = labels.first().map_or(0, Vec::len);
    mean_defined(&per_tag_auc(probs, &labels, n_tags)).unwrap_or(0.5)
}

/// Phase two: global and region backbones with focal (or BCE) tag heads.
/// The visual weights with the best validation AUC are kept.
pub fn train_backbone(model: &mut Model, ds: &Dataset, state: &mut PhaseState, hook: EpochHook<'_>) -> Result<Vec<EpochLog>, PipelineError> {
    let cfg = model.config.clone();
    let train: Vec<&Sample> = ds.part(Partition::Train).collect();
    let val: Vec<&Sample> = ds.part(Partition::Val).collect();
    if train.is_empty() {
        return Err(PipelineError::Input("empty training split".into()));
    }
    let mut logs = Vec::new();
    for epoch in state.epochs_done..cfg.backbone_epochs {
        let with_region = epoch >= cfg.global_warmup_epochs;
        if with_region && cfg.freeze_heatmap && state.frozen_regions.is_none() {
            let regions = train
                .iter()
                .map(|s| model.visual.locate(&model.store, &s.image))
                .collect::<Result<Vec<_>, _>>()?;
            state.frozen_regions = Some(regions);
        }
        let lr = cfg.backbone_lr_at(epoch);
        let mut tally = Tally::default();
        let mut moved = BTreeSet::new();
        for batch in batches(train.len(), cfg.batch_size, cfg.seed, Phase::Backbone, epoch) {
            let mut grads = Gradients::default();
            for &i in &batch {
                let s = train[i];
                let source = match (&state.frozen_regions, with_region) {
                    (_, false) => RegionSource::None,
                    (Some(r), true) => RegionSource::Fixed(&r[i]),
                    (None, true) => RegionSource::Live,
                };
                let vf = model.visual.forward(&model.store, &s.image, source)?;
                let loss = branch_loss(&vf.probs, &s.labels(), &cfg)?;
                tally.add(&[("branch", loss.item())]);
                grads.accumulate(backward(&loss.scale(1.0 / batch.len() as f64)?)?);
            }
            moved_groups(model, &grads, &mut moved);
            state
                .optimizer("visual", lr)
                .step_where(&mut model.store, &grads, |n| Group::of(n) == Some(Group::Visual));
        }
        let (fused, global) = no_grad(|| -> Result<_, PipelineError> {
            let mut fused = Vec::new();
            let mut global = Vec::new();
            for s in &val {
                let source = if with_region { RegionSource::Live } else { RegionSource::None };
                let vf = model.visual.forward(&model.store, &s.image, source)?;
                global.push(vf.probs.global.to_vec());
                fused.push(vf.probs.fusion.as_ref().unwrap_or(&vf.probs.global).to_vec());
            }
            Ok((fused, global))
        })?;
        let mut val_metrics = BTreeMap::new();
        if !val.is_empty() {
            let score = mean_auc(&fused, &val);
            val_metrics.insert("auc".to_string(), score);
            val_metrics.insert("auc_global".to_string(), mean_auc(&global, &val));
            if state.best_score.is_none_or(|b| score > b) {
                state.best_score = Some(score);
                state.best_epoch = Some(epoch);
                state.best = model.records(&[Group::Visual], BEST);
            }
        }
        state.epochs_done = epoch + 1;
        let log = EpochLog {
            epoch,
            phase: Phase::Backbone,
            losses: tally.means(),
            val: val_metrics,
            lr: BTreeMap::from([("visual".to_string(), lr)]),
            moved: moved.iter().map(|g| g.label().to_string()).collect(),
        };
        hook(model, state, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Loads the best-validation visual weights selected during phase two, when
/// `select_best` is on.
pub fn restore_best(model: &mut Model, state: &PhaseState) -> Result<(), PipelineError> {
    if !model.config.select_best || state.best.is_empty() {
        return Ok(());
    }
    let ckpt = Checkpoint {
        records: state.best.clone(),
        snapshot: serde_json::Value::Null,
    };
    model.load_prefixed(&ckpt, &[Group::Visual], BEST)?;
    Ok(())
}

/// Builds the phase-three model: visual weights from the backbone
/// checkpoint, graph and decoder from the pretraining checkpoint when the
/// external signal is enabled.
pub fn init_joint(cfg: &TrainConfig, ds: &Dataset, textbook: &[String], pretrained: Option<&Checkpoint>, backbone: Option<&Checkpoint>) -> Result<Model, PipelineError> {
    let mut model = Model::for_dataset(cfg, ds, textbook)?;
    if let Some(b) = backbone {
        model.load_groups(b, &[Group::Visual])?;
    }
    if cfg.use_external {
        let p = pretrained.ok_or_else(|| PipelineError::Config("use_external needs a pretraining checkpoint".into()))?;
        if Snapshot::of(p)?.vocab != model.vocab {
            return Err(CheckpointError::Mismatch("pretraining vocabulary differs from this dataset's".into()).into());
        }
        model.load_groups(p, &[Group::Graph, Group::Decoder])?;
    }
    if cfg.cooccurrence_prior {
        let labels: Vec<Vec<f64>> = ds.part(Partition::Train).map(Sample::labels).collect();
        model.graph.set_prior_edges_from_cooccurrence(&mut model.store, &labels)?;
    }
    Ok(model)
}

/// Phase three: joint training of every component.
pub fn train_joint(model: &mut Model, ds: &Dataset, state: &mut PhaseState, hook: EpochHook<'_>) -> Result<Vec<EpochLog>, PipelineError> {
    let cfg = model.config.clone();
    let train: Vec<&Sample> = ds.part(Partition::Train).collect();
    let val: Vec<&Sample> = ds.part(Partition::Val).collect();
    if train.is_empty() {
        return Err(PipelineError::Input("empty training split".into()));
    }
    let seqs = encode_all(model, train.iter().map(|s| s.report.clone()))?;
    if seqs.len() != train.len() {
        return Err(PipelineError::Input("a training report is empty".into()));
    }
    let val_seqs = encode_all(model, val.iter().map(|s| s.report.clone()))?;
    let mut logs = Vec::new();
    for epoch in state.epochs_done..cfg.train_epochs {
        let mut tally = Tally::default();
        let mut moved = BTreeSet::new();
        for batch in batches(train.len(), cfg.batch_size, cfg.seed, Phase::Train, epoch) {
            let mut grads = Gradients::default();
            for &i in &batch {
                let s = train[i];
                let y = s.labels();
                let (vf, graph) = model.tag_graph(&s.image, cfg.use_internal)?;
                let lm = model.decoder.sequence_loss(&model.store, &seqs[i], &graph)?;
                let tag = tag_bce(&graph.tag_probs, &y)?;
                let branch = branch_loss(&vf.probs, &y, &cfg)?;
                let total = lm
                    .scale(cfg.lm_weight)?
                    .add(&tag.scale(cfg.tag_weight)?)?
                    .add(&branch.scale(cfg.branch_weight)?)?;
                tally.add(&[("lm", lm.item()), ("tag", tag.item()), ("branch", branch.item()), ("total", total.item())]);
                grads.accumulate(backward(&total.scale(1.0 / batch.len() as f64)?)?);
            }
            moved_groups(model, &grads, &mut moved);
            state
                .optimizer("visual", cfg.visual_lr)
                .step_where(&mut model.store, &grads, |n| Group::of(n) == Some(Group::Visual));
            state
                .optimizer("text", cfg.text_lr)
                .step_where(&mut model.store, &grads, |n| matches!(Group::of(n), Some(Group::Graph | Group::Decoder)));
        }
        let mut val_metrics = BTreeMap::new();
        if !val.is_empty() {
            let (lm, probs) = no_grad(|| -> Result<_, PipelineError> {
                let mut lm = 0.0;
                let mut probs = Vec::new();
                for (s, seq) in val.iter().zip(&val_seqs) {
                    let (_, graph) = model.tag_graph(&s.image, cfg.use_internal)?;
                    lm += model.decoder.sequence_loss(&model.store, seq, &graph)?.item();
                    probs.push(graph.tag_probs.to_vec());
                }
                Ok((lm / val.len() as f64, probs))
            })?;
            val_metrics.insert("lm".to_string(), lm);
            val_metrics.insert("auc".to_string(), mean_auc(&probs, &val));
        }
        state.epochs_done = epoch + 1;
        let log = EpochLog {
            epoch,
            phase: Phase::Train,
            losses: tally.means(),
            val: val_metrics,
            lr: BTreeMap::from([("visual".to_string(), cfg.visual_lr), ("text".to_string(), cfg.text_lr)]),
            moved: moved.iter().map(|g| g.label().to_string()).collect(),
        };
        hook(model, state, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Generated reports and graph tag probabilities, in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub reports: Vec<String>,
    pub tag_scores: Vec<Vec<f64>>,
}

pub fn predict<'a>(model: &Model, samples: impl IntoIterator<Item = &'a Sample>) -> Result<Predictions, PipelineError> {
    let mut out = Predictions {
        ids: Vec::new(),
        reports: Vec::new(),
        tag_scores: Vec::new(),
    };
    for s in samples {
        let (report, graph) = model.describe(&s.image)?;
        out.ids.push(s.id.clone());
        out.reports.push(report);
        out.tag_scores.push(graph.tag_probs.to_vec());
    }
    Ok(out)
}

/// Generates for one split and scores the result against its references.
pub fn evaluate_split(model: &Model, ds: &Dataset, part: Partition) -> Result<(Predictions, EvalReport), PipelineError> {
    let samples: Vec<&Sample> = ds.part(part).collect();
    let preds = predict(model, samples.iter().copied())?;
    let candidates: Vec<Vec<String>> = preds.reports.iter().map(|r| tokenize(r)).collect();
    let references: Vec<Vec<Vec<String>>> = samples.iter().map(|s| vec![tokenize(&s.report)]).collect();
    let labels: Vec<Vec<bool>> = samples.iter().map(|s| s.tags.clone()).collect();
    let report = evaluate(
        &candidates,
        &references,
        Some(TagScores {
            names: &ds.tag_names,
            scores: &preds.tag_scores,
            labels: &labels,
        }),
    )?;
    Ok((preds, report))
}

/// Everything produced by an in-memory run of the three phases.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub pretrained: Option<Checkpoint>,
    pub backbone: Checkpoint,
    pub logs: Vec<EpochLog>,
}

fn no_hook() -> impl FnMut(&Model, &PhaseState, &EpochLog) -> Result<(), PipelineError> {
    |_, _, _| Ok(())
}

/// Phase one in memory; returns its checkpoint and logs.
pub fn run_pretrain(cfg: &TrainConfig, ds: &Dataset, textbook: &[String]) -> Result<(Checkpoint, Vec<EpochLog>), PipelineError> {
    let mut model = Model::for_dataset(cfg, ds, textbook)?;
    let mut state = PhaseState::new(Phase::Pretrain);
    let logs = pretrain(&mut model, textbook, &mut state, &mut no_hook())?;
    Ok((model.checkpoint(Phase::Pretrain, state.epochs_done, &[Group::Gru, Group::Graph, Group::Decoder]), logs))
}

/// Phase two in memory; the checkpoint holds the selected visual weights.
pub fn run_backbone(cfg: &TrainConfig, ds: &Dataset, textbook: &[String]) -> Result<(Checkpoint, Vec<EpochLog>), PipelineError> {
    let mut model = Model::for_dataset(cfg, ds, textbook)?;
    let mut state = PhaseState::new(Phase::Backbone);
    let logs = train_backbone(&mut model, ds, &mut state, &mut no_hook())?;
    restore_best(&mut model, &state)?;
    Ok((model.checkpoint(Phase::Backbone, state.epochs_done, &[Group::Visual]), logs))
}

/// Phase three in memory from the two earlier checkpoints.
pub fn run_joint(cfg: &TrainConfig, ds: &Dataset, textbook: &[String], pretrained: Option<&Checkpoint>, backbone: Option<&Checkpoint>) -> Result<(Model, Vec<EpochLog>), PipelineError> {
    let mut model = init_joint(cfg, ds, textbook, pretrained, backbone)?;
    let mut state = PhaseState::new(Phase::Train);
    let logs = train_joint(&mut model, ds, &mut state, &mut no_hook())?;
    Ok((model, logs))
}

/// All three phases in memory. Pretraining is skipped without the external
/// signal.
pub fn run_all(cfg: &TrainConfig, ds: &Dataset, textbook: &[String]) -> Result<RunOutcome, PipelineError> {
    let mut logs = Vec::new();
    let pretrained = if cfg.use_external {
        let (c, l) = run_pretrain(cfg, ds, textbook)?;
        logs.extend(l);
        Some(c)
    } else {
        None
    };
    let (backbone, l) = run_backbone(cfg, ds, textbook)?;
    logs.extend(l);
    let (model, l) = run_joint(cfg, ds, textbook, pretrained.as_ref(), Some(&backbone))?;
    logs.extend(l);
    Ok(RunOutcome {
        model,
        pretrained,
        backbone,
        logs,
    })
}
