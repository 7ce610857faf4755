use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, CheckpointError, Phase, PipelineError, Record, TrainConfig};
use crate::data::{detokenize, tokenize, Dataset, Partition};
use crate::decoder::{Decoder, ExternalEncoder, TokenSequence, Vocabulary};
use crate::graph::{GraphEncoder, TagGraph};
use crate::tensor::{no_grad, ParamStore, SeededRng, Tensor};
use crate::vision::{ImageTensor, Region, RegionSource, VisualForward, VisualModel};

/// Parameter groups, identified by name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Visual,
    Gru,
    Graph,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Visual, Group::Gru, Group::Graph, Group::Decoder];

    pub fn prefix(self) -> &'static str {
        match self {
            Self::Visual => "vis.",
            Self::Gru => "ext.",
            Self::Graph => "graph.",
            Self::Decoder => "dec.",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Visual => "visual",
            Self::Gru => "gru",
            Self::Graph => "graph",
            Self::Decoder => "decoder",
        }
    }
}

/// JSON trailer of every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub phase: Phase,
    /// Epochs completed in `phase`.
    pub epochs_done: usize,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub groups: Vec<Group>,
    #[serde(default)]
    pub optimizer_steps: BTreeMap<String, u64>,
    #[serde(default)]
    pub best_score: Option<f64>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub frozen_regions: Option<Vec<Region>>,
    #[serde(default)]
    pub tag_names: Vec<String>,
}

impl Snapshot {
    pub fn of(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        serde_json::from_value(ckpt.snapshot.clone()).map_err(|e| CheckpointError::Snapshot(e.to_string()))
    }
}

/// Vocabulary over the training reports and the textbook together.
pub fn build_vocabulary(ds: &Dataset, textbook: &[String], min_freq: usize) -> Vocabulary {
    let sentences: Vec<Vec<String>> = ds
        .part(Partition::Train)
        .map(|s| tokenize(&s.report))
        .chain(textbook.iter().map(|s| tokenize(s)))
        .collect();
    Vocabulary::build(sentences.iter().map(Vec::as_slice), min_freq)
}

/// Every trainable component in one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub visual: VisualModel,
    pub graph: GraphEncoder,
    pub decoder: Decoder,
    pub external: ExternalEncoder,
    pub tag_names: Vec<String>,
}

impl Model {
    pub fn new(config: &TrainConfig, vocab: Vocabulary) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::derive(config.seed, 0x1417);
        let visual = VisualModel::new(&mut store, &mut rng, config.visual());
        let graph = GraphEncoder::new(&mut store, &mut rng, "graph", config.graph())?;
        let decoder = Decoder::new(&mut store, &mut rng, "dec", config.decoder(vocab.len()))?;
        let external = ExternalEncoder::new(&mut store, &mut rng, "ext", config.d_model, config.graph().input_dim);
        Ok(Self {
            config: config.clone(),
            vocab,
            store,
            visual,
            graph,
            decoder,
            external,
            tag_names: (0..config.n_tags).map(|i| format!("tag{i}")).collect(),
        })
    }

    /// Fresh model for `ds`: vocabulary over its training reports and the
    /// textbook, tag names from the dataset.
    pub fn for_dataset(config: &TrainConfig, ds: &Dataset, textbook: &[String]) -> Result<Self, PipelineError> {
        if ds.n_tags() != config.n_tags {
            return Err(PipelineError::Config(format!(
                "dataset has {} tags but n_tags is {}",
                ds.n_tags(),
                config.n_tags
            )));
        }
        if ds.image_size() != config.image_size {
            return Err(PipelineError::Config(format!(
                "dataset images are {0}×{0} but image_size is {1}",
                ds.image_size(),
                config.image_size
            )));
        }
        let mut model = Self::new(config, build_vocabulary(ds, textbook, config.vocab_min_freq))?;
        model.tag_names = ds.tag_names.clone();
        Ok(model)
    }

    /// Rebuilds the model described by a checkpoint's snapshot and loads its
    /// parameter groups.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PipelineError> {
        let snap = Snapshot::of(ckpt)?;
        Self::from_checkpoint_with(ckpt, &snap.config)
    }

    /// As [`Model::from_checkpoint`], but built from `config`; shape
    /// disagreements with the stored tensors are reported by name.
    pub fn from_checkpoint_with(ckpt: &Checkpoint, config: &TrainConfig) -> Result<Self, PipelineError> {
        let snap = Snapshot::of(ckpt)?;
        let mut model = Self::new(config, snap.vocab.clone())?;
        if snap.tag_names.len() == config.n_tags {
            model.tag_names = snap.tag_names;
        }
        model.load_groups(ckpt, &snap.groups)?;
        Ok(model)
    }

    pub fn encode_report(&self, report: &str) -> Result<TokenSequence, PipelineError> {
        Ok(TokenSequence::encode(&self.vocab, &tokenize(report), self.config.max_len)?)
    }

    pub fn visual_forward(&self, image: &ImageTensor, internal: bool) -> Result<VisualForward, PipelineError> {
        let source = if internal { RegionSource::Live } else { RegionSource::None };
        Ok(self.visual.forward(&self.store, image, source)?)
    }

    pub fn tag_graph(&self, image: &ImageTensor, internal: bool) -> Result<(VisualForward, TagGraph), PipelineError> {
        let vf = self.visual_forward(image, internal)?;
        let graph = self.graph.forward(&self.store, vf.graph_input())?;
        Ok((vf, graph))
    }

    /// Greedy report and graph tag probabilities for one image.
    pub fn describe(&self, image: &ImageTensor) -> Result<(String, TagGraph), PipelineError> {
        no_grad(|| {
            let (_, graph) = self.tag_graph(image, self.config.use_internal)?;
            let seq = self.decoder.generate(&self.store, &graph, &self.config.generation())?;
            Ok((detokenize(&self.vocab.decode(&seq.ids)), graph))
        })
    }

    /// Final GRU state over the decoder embeddings of `seq`'s content.
    pub fn sentence_signal(&self, seq: &TokenSequence) -> Result<Tensor, PipelineError> {
        Ok(self.external.encode(&self.store, self.decoder.token_embed, seq.content())?)
    }

    pub fn records(&self, groups: &[Group], prefix: &str) -> Vec<Record> {
        self.store
            .iter()
            .filter(|(name, _)| Group::of(name).is_some_and(|g| groups.contains(&g)))
            .map(|(name, t)| Record {
                name: format!("{prefix}{name}"),
                dims: t.dims().to_vec(),
                values: t.to_vec(),
            })
            .collect()
    }

    /// Copies every parameter of `groups` from `ckpt` records named
    /// `prefix + name`. Missing records and shape disagreements are collected
    /// and reported together.
    pub fn load_prefixed(&mut self, ckpt: &Checkpoint, groups: &[Group], prefix: &str) -> Result<(), CheckpointError> {
        let by_name: BTreeMap<&str, &Record> = ckpt.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for (name, t) in self.store.iter() {
            if !Group::of(name).is_some_and(|g| groups.contains(&g)) {
                continue;
            }
            match by_name.get(format!("{prefix}{name}").as_str()) {
                None => problems.push(format!("{name}: missing")),
                Some(r) if r.dims != t.dims() => {
                    problems.push(format!("{name}: checkpoint {:?} vs model {:?}", r.dims, t.dims()))
                }
                Some(r) => updates.push((name.to_string(), r)),
            }
        }
        if !problems.is_empty() {
            return Err(CheckpointError::Mismatch(problems.join("; ")));
        }
        for (name, r) in updates {
            self.store
                .set(&name, &r.dims, &r.values)
                .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load_groups(&mut self, ckpt: &Checkpoint, groups: &[Group]) -> Result<(), CheckpointError> {
        self.load_prefixed(ckpt, groups, "")
    }

    pub fn snapshot(&self, phase: Phase, epochs_done: usize, groups: &[Group]) -> Snapshot {
        Snapshot {
            phase,
            epochs_done,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            groups: groups.to_vec(),
            optimizer_steps: BTreeMap::new(),
            best_score: None,
            best_epoch: None,
            frozen_regions: None,
            tag_names: self.tag_names.clone(),
        }
    }

    /// Weights-only checkpoint of `groups`.
    pub fn checkpoint(&self, phase: Phase, epochs_done: usize, groups: &[Group]) -> Checkpoint {
        Checkpoint {
            records: self.records(groups, ""),
            snapshot: serde_json::to_value(self.snapshot(phase, epochs_done, groups)).expect("snapshot serialises"),
        }
    }
}
