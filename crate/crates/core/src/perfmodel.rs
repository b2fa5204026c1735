//! AST-structured speedup model.
//!
//! Statement vectors pass through a frontend (a pre-trained or freshly
//! initialized encoder, or the baseline embedding stack). Each loop runs
//! an LSTM over its children in program order, every child embedding
//! concatenated with the loop's descriptor; a virtual root does the same
//! over the root loops. A dense head maps the root state to `r` and the
//! prediction is `softplus(r) + 0.01`.
//!
//! A minibatch is evaluated level by level: all loops of the same height
//! across the batch share one batched LSTM run.

use std::cmp::Reverse;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use tensornet::dense::{sigmoid, softplus};
use tensornet::{mape_loss, mse_loss, Activation, Adam, BatchTrace, Checkpoint, LstmCell, Mlp, MlpCache, NumArray, ParamId, ParameterStore};

use crate::autoencoder::{Encoder, EncoderArch, EncoderCache, ModelError, PretrainMeta, Result, ENCODER_PREFIX};
use crate::datagen::{subsample_fraction, LabeledSample};
use crate::featurize::{featurize_program, FeatureConfig, ProgramTree, TreeNode};
use crate::loop_ir::Program;

pub const ROOT_DESCRIPTOR: [f64; 2] = [0.0, -0.25];
pub const OUTPUT_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frontend {
    Baseline,
    EncoderPretrained,
    EncoderRandom,
}

impl Frontend {
    pub const ALL: [Frontend; 3] = [Frontend::Baseline, Frontend::EncoderPretrained, Frontend::EncoderRandom];

    pub fn name(self) -> &'static str {
        match self {
            Frontend::Baseline => "baseline",
            Frontend::EncoderPretrained => "encoder_pretrained",
            Frontend::EncoderRandom => "encoder_random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub frontend: Frontend,
    pub encoder: EncoderArch,
    pub lstm_hidden: usize,
    pub head_hidden: Vec<usize>,
    pub features: FeatureConfig,
}

impl ModelArch {
    pub fn baseline(features: &FeatureConfig, embedding_dim: usize) -> Self {
        Self {
            frontend: Frontend::Baseline,
            encoder: EncoderArch::comp_embed(embedding_dim),
            lstm_hidden: embedding_dim,
            head_hidden: vec![64],
            features: features.clone(),
        }
    }

    pub fn with_encoder(features: &FeatureConfig, encoder: &EncoderArch, pretrained: bool) -> Self {
        Self {
            frontend: if pretrained {
                Frontend::EncoderPretrained
            } else {
                Frontend::EncoderRandom
            },
            encoder: encoder.clone(),
            lstm_hidden: encoder.embedding_dim,
            head_hidden: vec![64],
            features: features.clone(),
        }
    }
}

#[derive(Clone, Debug)]
enum Child {
    Leaf(usize),
    Loop(usize),
}

#[derive(Clone, Debug)]
struct LoopRec {
    descriptor: [f64; 2],
    children: Vec<Child>,
    height: usize,
}

/// A program tree flattened for batched evaluation: loops in post-order
/// with the virtual root last, and the leaf vectors as matrix rows.
#[derive(Clone, Debug)]
pub struct TreeSample {
    loops: Vec<LoopRec>,
    pub leaves: NumArray,
}

impl TreeSample {
    pub fn from_tree(tree: &ProgramTree, dim: usize) -> Result<Self> {
        fn walk(node: &TreeNode, loops: &mut Vec<LoopRec>, leaves: &mut Vec<f64>, n_leaves: &mut usize) -> Child {
            match node {
                TreeNode::Leaf { vector, .. } => {
                    leaves.extend_from_slice(vector.as_slice());
                    *n_leaves += 1;
                    Child::Leaf(*n_leaves - 1)
                }
                TreeNode::Loop { descriptor, children } => {
                    let kids: Vec<Child> = children.iter().map(|c| walk(c, loops, leaves, n_leaves)).collect();
                    let height = 1 + kids
                        .iter()
                        .map(|c| match c {
                            Child::Loop(i) => loops[*i].height,
                            Child::Leaf(_) => 0,
                        })
                        .max()
                        .unwrap_or(0);
                    loops.push(LoopRec {
                        descriptor: *descriptor,
                        children: kids,
                        height,
                    });
                    Child::Loop(loops.len() - 1)
                }
            }
        }
        let mut loops = Vec::new();
        let mut leaves = Vec::new();
        let mut n_leaves = 0;
        let roots: Vec<Child> = tree.roots.iter().map(|r| walk(r, &mut loops, &mut leaves, &mut n_leaves)).collect();
        if leaves.len() != n_leaves * dim {
            return Err(ModelError::Contract(format!("leaf vectors must have length {dim}")));
        }
        let height = 1 + loops.iter().map(|l| l.height).max().unwrap_or(0);
        loops.push(LoopRec {
            descriptor: ROOT_DESCRIPTOR,
            children: roots,
            height,
        });
        Ok(Self {
            loops,
            leaves: NumArray::matrix(n_leaves, dim, leaves)?,
        })
    }

    pub fn featurize(program: &Program, seq: &crate::transform::TransformationSequence, fcfg: &FeatureConfig) -> Result<Self> {
        let tree = featurize_program(program, seq, fcfg)?;
        Self::from_tree(&tree, fcfg.total_dim())
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.rows()
    }
}

#[derive(Clone, Debug)]
pub struct PerfModel {
    pub arch: ModelArch,
    pub encoder: Encoder,
    pub lstm: LstmCell,
    pub head: Mlp,
    placeholder: ParamId,
}

struct Level {
    order: Vec<usize>,
    trace: BatchTrace,
}

/// Forward state of one minibatch.
pub struct TreeCache {
    children: Vec<Vec<GChild>>,
    roots: Vec<usize>,
    levels: Vec<Level>,
    empty: Vec<usize>,
    head: MlpCache,
    raw: Vec<f64>,
    pub predictions: Vec<f64>,
    n_leaves: usize,
}

#[derive(Clone, Copy, Debug)]
enum GChild {
    Leaf(usize),
    Loop(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mape,
    Mse,
}

impl PerfModel {
    pub fn new(store: &mut ParameterStore, arch: &ModelArch, seed: u64) -> Result<Self> {
        if arch.lstm_hidden != arch.encoder.embedding_dim {
            return Err(ModelError::Contract(format!(
                "lstm hidden size {} must equal the embedding dim {} (loop and statement embeddings share the recurrence)",
                arch.lstm_hidden, arch.encoder.embedding_dim
            )));
        }
        let expect = match arch.frontend {
            Frontend::Baseline => crate::autoencoder::EncoderVariant::CompEmbed,
            _ => arch.encoder.variant,
        };
        if arch.encoder.variant != expect {
            return Err(ModelError::Contract("the baseline frontend uses the comp_embed stack".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(store, &arch.encoder, &arch.features, &mut rng)?;
        let emb = arch.encoder.embedding_dim;
        let lstm = LstmCell::new(store, "lstm", emb + 2, arch.lstm_hidden, &mut rng)?;
        let widths: Vec<usize> = std::iter::once(arch.lstm_hidden)
            .chain(arch.head_hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let head = Mlp::new(store, "head", &widths, Activation::Tanh, Activation::Identity, &mut rng)?;
        let placeholder = store.add_constant("loop.empty", &[arch.lstm_hidden], 0.0)?;
        Ok(Self {
            arch: arch.clone(),
            encoder,
            lstm,
            head,
            placeholder,
        })
    }

    /// Builds a model whose encoder weights come from a pre-training
    /// checkpoint. The checkpoint must match `arch` exactly.
    pub fn from_pretrained(arch: &ModelArch, ck: &Checkpoint, seed: u64) -> Result<(Self, ParameterStore)> {
        let meta = PretrainMeta::parse(&ck.meta)?;
        if meta.features != arch.features {
            return Err(ModelError::Incompatible(format!(
                "feature config differs (checkpoint total_dim {}, model total_dim {})",
                meta.total_dim,
                arch.features.total_dim()
            )));
        }
        if meta.encoder != arch.encoder {
            return Err(ModelError::Incompatible(format!(
                "encoder arch differs (checkpoint {:?}/{}, model {:?}/{})",
                meta.encoder.variant, meta.encoder.embedding_dim, arch.encoder.variant, arch.encoder.embedding_dim
            )));
        }
        let mut store = ParameterStore::new();
        let model = Self::new(&mut store, arch, seed)?;
        ck.restore_into(&mut store, ENCODER_PREFIX)
            .map_err(|e| ModelError::Incompatible(e.to_string()))?;
        Ok((model, store))
    }

    pub fn meta(&self) -> serde_json::Value {
        json!({
            "kind": "perfmodel",
            "arch": self.arch,
            "total_dim": self.arch.features.total_dim(),
        })
    }

    pub fn checkpoint(&self, store: &ParameterStore) -> Checkpoint {
        Checkpoint::from_store(store, "", self.meta())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParameterStore)> {
        let kind = ck.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
        if kind != "perfmodel" {
            return Err(ModelError::Incompatible(format!("expected a perfmodel checkpoint, found `{kind}`")));
        }
        let arch: ModelArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| ModelError::Incompatible(format!("checkpoint arch: {e}")))?;
        let total = ck.meta["total_dim"].as_u64().unwrap_or(0) as usize;
        if total != arch.features.total_dim() {
            return Err(ModelError::Incompatible(format!(
                "total_dim {total} does not match the stored feature config ({})",
                arch.features.total_dim()
            )));
        }
        let mut store = ParameterStore::new();
        let model = Self::new(&mut store, &arch, 0)?;
        ck.restore_into(&mut store, "")
            .map_err(|e| ModelError::Incompatible(e.to_string()))?;
        Ok((model, store))
    }

    fn stack_leaves(&self, batch: &[&TreeSample]) -> Result<NumArray> {
        let dim = self.encoder.input_dim();
        let total: usize = batch.iter().map(|s| s.n_leaves()).sum();
        let mut data = Vec::with_capacity(total * dim);
        for s in batch {
            if s.leaves.cols() != dim {
                return Err(ModelError::Contract(format!(
                    "leaf vectors have length {}, model expects {dim}",
                    s.leaves.cols()
                )));
            }
            data.extend_from_slice(s.leaves.data());
        }
        Ok(NumArray::matrix(total, dim, data)?)
    }

    /// Frontend embeddings of every leaf in the batch, stacked in order.
    pub fn embed(&self, store: &ParameterStore, batch: &[&TreeSample]) -> Result<(NumArray, EncoderCache)> {
        let x = self.stack_leaves(batch)?;
        let cache = self.encoder.forward(store, &x)?;
        Ok((cache.output().clone(), cache))
    }

    /// Per-sample leaf embeddings, for caching while the frontend is frozen.
    pub fn embed_each(&self, store: &ParameterStore, samples: &[&TreeSample]) -> Result<Vec<NumArray>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(512) {
            let (e, _) = self.embed(store, chunk)?;
            let mut at = 0;
            for s in chunk {
                let n = s.n_leaves();
                let c = e.cols();
                out.push(NumArray::matrix(n, c, e.data()[at * c..(at + n) * c].to_vec())?);
                at += n;
            }
        }
        Ok(out)
    }

    /// Runs the loop recursion and the head given stacked leaf embeddings.
    pub fn forward_tree(&self, store: &ParameterStore, batch: &[&TreeSample], emb: &NumArray) -> Result<TreeCache> {
        let e = self.arch.encoder.embedding_dim;
        let hid = self.arch.lstm_hidden;
        let mut children: Vec<Vec<GChild>> = Vec::new();
        let mut descriptors: Vec<[f64; 2]> = Vec::new();
        let mut heights: Vec<usize> = Vec::new();
        let mut roots = Vec::with_capacity(batch.len());
        let mut leaf_at = 0;
        for s in batch {
            let node_at = children.len();
            for l in &s.loops {
                children.push(
                    l.children
                        .iter()
                        .map(|c| match *c {
                            Child::Leaf(i) => GChild::Leaf(leaf_at + i),
                            Child::Loop(i) => GChild::Loop(node_at + i),
                        })
                        .collect(),
                );
                descriptors.push(l.descriptor);
                heights.push(l.height);
            }
            roots.push(children.len() - 1);
            leaf_at += s.n_leaves();
        }
        if emb.rows() != leaf_at || emb.cols() != e {
            return Err(ModelError::Contract(format!(
                "expected {leaf_at} embeddings of width {e}, got {:?}",
                emb.shape()
            )));
        }
        let n_nodes = children.len();
        let mut node_h = NumArray::zeros(&[n_nodes, hid]);
        let max_height = heights.iter().copied().max().unwrap_or(0);
        let mut by_height: Vec<Vec<usize>> = vec![Vec::new(); max_height + 1];
        for (n, &h) in heights.iter().enumerate() {
            by_height[h].push(n);
        }
        let mut levels = Vec::new();
        let mut empty = Vec::new();
        let placeholder = store.value(self.placeholder).data();
        for nodes in by_height.iter().skip(1) {
            let mut order: Vec<usize> = Vec::with_capacity(nodes.len());
            for &n in nodes {
                if children[n].is_empty() {
                    node_h.row_mut(n).copy_from_slice(placeholder);
                    empty.push(n);
                } else {
                    order.push(n);
                }
            }
            if order.is_empty() {
                continue;
            }
            order.sort_by_key(|&n| Reverse(children[n].len()));
            let steps = children[order[0]].len();
            let mut inputs = Vec::with_capacity(steps);
            for t in 0..steps {
                let active = order.iter().take_while(|&&n| children[n].len() > t).count();
                let mut x = NumArray::zeros(&[active, e + 2]);
                for (r, &n) in order[..active].iter().enumerate() {
                    let row = x.row_mut(r);
                    match children[n][t] {
                        GChild::Leaf(i) => row[..e].copy_from_slice(emb.row(i)),
                        GChild::Loop(c) => row[..e].copy_from_slice(node_h.row(c)),
                    }
                    row[e..].copy_from_slice(&descriptors[n]);
                }
                inputs.push(x);
            }
            let trace = self.lstm.forward_batch(store, &inputs)?;
            let fin = trace.final_hidden();
            for (r, &n) in order.iter().enumerate() {
                node_h.row_mut(n).copy_from_slice(fin.row(r));
            }
            levels.push(Level { order, trace });
        }
        let mut head_in = NumArray::zeros(&[batch.len(), hid]);
        for (i, &r) in roots.iter().enumerate() {
            head_in.row_mut(i).copy_from_slice(node_h.row(r));
        }
        let head = self.head.forward(store, &head_in)?;
        let raw: Vec<f64> = head.output().data().to_vec();
        let predictions = raw.iter().map(|&r| softplus(r) + OUTPUT_FLOOR).collect();
        Ok(TreeCache {
            children,
            roots,
            levels,
            empty,
            head,
            raw,
            predictions,
            n_leaves: leaf_at,
        })
    }

    /// Backpropagates prediction gradients through head and recursion;
    /// returns the gradient of the stacked leaf embeddings.
    pub fn backward_tree(&self, store: &mut ParameterStore, cache: &TreeCache, dpred: &[f64]) -> Result<NumArray> {
        let e = self.arch.encoder.embedding_dim;
        let hid = self.arch.lstm_hidden;
        let draw: Vec<f64> = dpred.iter().zip(&cache.raw).map(|(d, &r)| d * sigmoid(r)).collect();
        let draw = NumArray::matrix(draw.len(), 1, draw)?;
        let dhead = self
            .head
            .backward(store, &cache.head, &draw, true)?
            .expect("input gradient requested");
        let mut node_dh = NumArray::zeros(&[cache.children.len(), hid]);
        for (i, &r) in cache.roots.iter().enumerate() {
            node_dh.row_mut(r).copy_from_slice(dhead.row(i));
        }
        let mut demb = NumArray::zeros(&[cache.n_leaves, e]);
        for level in cache.levels.iter().rev() {
            let mut dfin = NumArray::zeros(&[level.order.len(), hid]);
            for (r, &n) in level.order.iter().enumerate() {
                dfin.row_mut(r).copy_from_slice(node_dh.row(n));
            }
            let dxs = self.lstm.backward_batch(store, &level.trace, &dfin);
            for (t, dx) in dxs.iter().enumerate() {
                for r in 0..dx.rows() {
                    let n = level.order[r];
                    let g = &dx.row(r)[..e];
                    let dst = match cache.children[n][t] {
                        GChild::Leaf(i) => demb.row_mut(i),
                        GChild::Loop(c) => node_dh.row_mut(c),
                    };
                    for (d, v) in dst.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
        }
        if !cache.empty.is_empty() && !store.get(self.placeholder).frozen {
            let mut acc = vec![0.0; hid];
            for &n in &cache.empty {
                for (a, v) in acc.iter_mut().zip(node_dh.row(n)) {
                    *a += v;
                }
            }
            let g = store.get_mut(self.placeholder).grad.data_mut();
            for (d, v) in g.iter_mut().zip(&acc) {
                *d += v;
            }
        }
        Ok(demb)
    }

    pub fn predict_batch(&self, store: &ParameterStore, batch: &[&TreeSample]) -> Result<Vec<f64>> {
        let (emb, _) = self.embed(store, batch)?;
        Ok(self.forward_tree(store, batch, &emb)?.predictions)
    }

    pub fn predict(&self, store: &ParameterStore, sample: &TreeSample) -> Result<f64> {
        Ok(self.predict_batch(store, &[sample])?[0])
    }

    /// Loss of a batch against `targets`; with `with_grad` also
    /// accumulates gradients of every non-frozen parameter.
    pub fn batch_loss(
        &self,
        store: &mut ParameterStore,
        batch: &[&TreeSample],
        targets: &[f64],
        kind: LossKind,
        with_grad: bool,
    ) -> Result<f64> {
        let (emb, enc_cache) = self.embed(store, batch)?;
        let cache = self.forward_tree(store, batch, &emb)?;
        let (loss, g) = match kind {
            LossKind::Mape => mape_loss(&cache.predictions, targets)?,
            LossKind::Mse => mse_loss(&cache.predictions, targets)?,
        };
        if with_grad {
            let demb = self.backward_tree(store, &cache, &g)?;
            if !self.encoder_frozen(store) {
                self.encoder.backward(store, &enc_cache, &demb)?;
            }
        }
        Ok(loss)
    }

    pub fn encoder_frozen(&self, store: &ParameterStore) -> bool {
        store.group(ENCODER_PREFIX).all(|p| p.frozen)
    }
}

/// A featurized labeled sample.
#[derive(Clone, Debug)]
pub struct Example {
    pub tree: TreeSample,
    pub target: f64,
}

pub fn featurize_samples(programs: &[Program], samples: &[LabeledSample], fcfg: &FeatureConfig) -> Result<Vec<Example>> {
    let index: std::collections::HashMap<&str, &Program> = programs.iter().map(|p| (p.id.as_str(), p)).collect();
    samples
        .iter()
        .map(|s| {
            let p = index
                .get(s.program_id.as_str())
                .ok_or_else(|| ModelError::Contract(format!("unknown program `{}`", s.program_id)))?;
            Ok(Example {
                tree: TreeSample::featurize(p, &s.sequence, fcfg)?,
                target: s.speedup,
            })
        })
        .collect()
}

/// Mean absolute percentage error, in percent.
pub fn evaluate(model: &PerfModel, store: &ParameterStore, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(ModelError::Contract("cannot evaluate on an empty set".into()));
    }
    let mut total = 0.0;
    for chunk in examples.chunks(256) {
        let refs: Vec<&TreeSample> = chunk.iter().map(|e| &e.tree).collect();
        let preds = model.predict_batch(store, &refs)?;
        for (p, ex) in preds.iter().zip(chunk) {
            total += (ex.target - p).abs() / ex.target;
        }
    }
    Ok(100.0 * total / examples.len() as f64)
}

fn evaluate_cached(model: &PerfModel, store: &ParameterStore, examples: &[Example], emb: &[NumArray]) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, embs) in examples.chunks(256).zip(emb.chunks(256)) {
        let refs: Vec<&TreeSample> = chunk.iter().map(|e| &e.tree).collect();
        let stacked = vstack(embs)?;
        let preds = model.forward_tree(store, &refs, &stacked)?.predictions;
        for (p, ex) in preds.iter().zip(chunk) {
            total += (ex.target - p).abs() / ex.target;
        }
    }
    Ok(100.0 * total / examples.len() as f64)
}

fn vstack(parts: &[impl std::borrow::Borrow<NumArray>]) -> Result<NumArray> {
    let cols = parts.first().map(|p| p.borrow().cols()).unwrap_or(0);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        data.extend_from_slice(p.borrow().data());
        rows += p.borrow().rows();
    }
    Ok(NumArray::matrix(rows, cols, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub encoder_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            batch_size: 32,
            max_epochs: 60,
            patience: 5,
            encoder_lr_scale: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(ModelError::Contract("patience, batch size and max epochs must be positive".into()));
        }
        if !(self.encoder_lr_scale > 0.0 && self.encoder_lr_scale <= 1.0) {
            return Err(ModelError::Contract("encoder_lr_scale must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: u8,
    pub train_mape: f64,
    pub valid_mape: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_valid_mape: f64,
    /// Epoch at whose end the encoder was unfrozen.
    pub unfreeze_epoch: Option<usize>,
}

/// Tracks the validation streak that drives unfreezing and stopping.
#[derive(Clone, Debug)]
pub struct PhaseController {
    pub patience: usize,
    pub two_phase: bool,
    pub phase: u8,
    pub best: f64,
    pub streak: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseEvent {
    Improved,
    Continue,
    Unfreeze,
    Stop,
}

impl PhaseController {
    pub fn new(patience: usize, two_phase: bool) -> Self {
        Self {
            patience,
            two_phase,
            phase: 1,
            best: f64::INFINITY,
            streak: 0,
        }
    }

    /// Consumes one epoch's validation score.
    pub fn observe(&mut self, valid: f64) -> PhaseEvent {
        if valid < self.best {
            self.best = valid;
            self.streak = 0;
            return PhaseEvent::Improved;
        }
        self.streak += 1;
        if self.streak < self.patience {
            return PhaseEvent::Continue;
        }
        self.streak = 0;
        if self.two_phase && self.phase == 1 {
            self.phase = 2;
            PhaseEvent::Unfreeze
        } else {
            PhaseEvent::Stop
        }
    }
}

/// Trains with MAPE loss. A pre-trained encoder starts frozen and is
/// unfrozen at `encoder_lr_scale` once validation MAPE stalls for
/// `patience` epochs; other frontends train as one phase. The store ends
/// up holding the best-validation weights.
pub fn train(
    model: &PerfModel,
    store: &mut ParameterStore,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow, &ParameterStore),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(ModelError::Contract("training and validation sets must be nonempty".into()));
    }
    let two_phase = model.arch.frontend == Frontend::EncoderPretrained;
    store.set_frozen(ENCODER_PREFIX, two_phase);
    store.set_lr_scale(ENCODER_PREFIX, 1.0);
    let mut ctl = PhaseController::new(cfg.patience, two_phase);
    let adam = Adam::new(cfg.base_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut unfreeze_epoch = None;
    let mut log = Vec::new();
    let refs_all: Vec<&TreeSample> = train_set.iter().map(|e| &e.tree).collect();
    let valid_refs: Vec<&TreeSample> = valid_set.iter().map(|e| &e.tree).collect();
    // frozen encoder: embeddings never change, compute them once
    let mut cached: Option<(Vec<NumArray>, Vec<NumArray>)> = None;
    for epoch in 1..=cfg.max_epochs {
        let frozen = model.encoder_frozen(store);
        if frozen && cached.is_none() {
            cached = Some((model.embed_each(store, &refs_all)?, model.embed_each(store, &valid_refs)?));
        }
        if !frozen {
            cached = None;
        }
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TreeSample> = chunk.iter().map(|&i| refs_all[i]).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| train_set[i].target).collect();
            store.zero_grads();
            let loss = match &cached {
                Some((train_emb, _)) => {
                    let parts: Vec<&NumArray> = chunk.iter().map(|&i| &train_emb[i]).collect();
                    let emb = vstack(&parts)?;
                    let cache = model.forward_tree(store, &batch, &emb)?;
                    let (loss, g) = mape_loss(&cache.predictions, &targets)?;
                    model.backward_tree(store, &cache, &g)?;
                    loss
                }
                None => model.batch_loss(store, &batch, &targets, LossKind::Mape, true)?,
            };
            sum += loss * chunk.len() as f64;
            adam.step(store);
        }
        let train_mape = 100.0 * sum / train_set.len() as f64;
        let valid_mape = match &cached {
            Some((_, valid_emb)) => evaluate_cached(model, store, valid_set, valid_emb)?,
            None => evaluate(model, store, valid_set)?,
        };
        let row = EpochRow {
            epoch,
            phase: ctl.phase,
            train_mape,
            valid_mape,
        };
        on_epoch(&row, store);
        log.push(row);
        match ctl.observe(valid_mape) {
            PhaseEvent::Improved => {
                best_epoch = epoch;
                best.copy_values_from(store, "")?;
            }
            PhaseEvent::Continue => {}
            PhaseEvent::Unfreeze => {
                store.set_frozen(ENCODER_PREFIX, false);
                store.set_lr_scale(ENCODER_PREFIX, cfg.encoder_lr_scale);
                unfreeze_epoch = Some(epoch);
            }
            PhaseEvent::Stop => break,
        }
    }
    store.copy_values_from(&best, "")?;
    Ok(TrainOutcome {
        best_valid_mape: ctl.best,
        log,
        best_epoch,
        unfreeze_epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub frontends: Vec<Frontend>,
    pub train: TrainConfig,
    /// When set, epochs are raised so every run sees about this many
    /// training samples: `clamp(budget / n, min_epochs, train.max_epochs)`.
    pub sample_budget: Option<usize>,
    pub min_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.025, 0.05, 0.1, 0.2, 0.5, 1.0],
            seeds: vec![0, 1, 2],
            frontends: Frontend::ALL.to_vec(),
            train: TrainConfig::default(),
            sample_budget: None,
            min_epochs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn epochs_for(&self, n_train: usize) -> usize {
        match self.sample_budget {
            Some(b) => (b / n_train.max(1)).clamp(self.min_epochs, self.train.max_epochs),
            None => self.train.max_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub variant: String,
    pub fraction: f64,
    pub seed: u64,
    pub test_mape: f64,
}

/// Inputs shared by every run of the data-efficiency experiment.
pub struct ExperimentData<'a> {
    pub train: &'a [Example],
    pub valid: &'a [Example],
    pub test: &'a [Example],
    pub features: &'a FeatureConfig,
    pub embedding_dim: usize,
    /// Required when the pre-trained frontend is requested.
    pub pretrained: Option<&'a Checkpoint>,
}

/// Trains one model for a (frontend, fraction, seed) cell and returns it
/// with its store and training outcome.
pub fn train_cell(
    data: &ExperimentData<'_>,
    frontend: Frontend,
    fraction: f64,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<(PerfModel, ParameterStore, TrainOutcome)> {
    let subset = subsample_fraction(data.train, fraction, seed);
    if subset.is_empty() {
        return Err(ModelError::Contract(format!("fraction {fraction} leaves no training samples")));
    }
    let (model, mut store) = build_model(data, frontend, seed)?;
    let tc = TrainConfig {
        max_epochs: cfg.epochs_for(subset.len()),
        seed,
        ..cfg.train.clone()
    };
    let outcome = train(&model, &mut store, &subset, data.valid, &tc, |_, _| {})?;
    Ok((model, store, outcome))
}

pub fn build_model(data: &ExperimentData<'_>, frontend: Frontend, seed: u64) -> Result<(PerfModel, ParameterStore)> {
    let model_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(11);
    match frontend {
        Frontend::Baseline => {
            let arch = ModelArch::baseline(data.features, data.embedding_dim);
            let mut store = ParameterStore::new();
            let m = PerfModel::new(&mut store, &arch, model_seed)?;
            Ok((m, store))
        }
        Frontend::EncoderRandom | Frontend::EncoderPretrained => {
            let ck = data.pretrained.ok_or_else(|| {
                ModelError::Contract("encoder frontends need a pre-training checkpoint for their architecture".into())
            })?;
            let meta = PretrainMeta::parse(&ck.meta)?;
            let arch = ModelArch::with_encoder(data.features, &meta.encoder, frontend == Frontend::EncoderPretrained);
            if frontend == Frontend::EncoderPretrained {
                PerfModel::from_pretrained(&arch, ck, model_seed)
            } else {
                let mut store = ParameterStore::new();
                let m = PerfModel::new(&mut store, &arch, model_seed)?;
                Ok((m, store))
            }
        }
    }
}

/// Trains every (frontend, fraction, seed) cell and records test MAPE.
pub fn data_efficiency_experiment(
    data: &ExperimentData<'_>,
    cfg: &ExperimentConfig,
    mut on_row: impl FnMut(&ExperimentRow),
) -> Result<Vec<ExperimentRow>> {
    let mut rows = Vec::new();
    for &fraction in &cfg.fractions {
        for &seed in &cfg.seeds {
            for &frontend in &cfg.frontends {
                let (model, store, _) = train_cell(data, frontend, fraction, seed, cfg)?;
                let row = ExperimentRow {
                    variant: frontend.name().to_string(),
                    fraction,
                    seed,
                    test_mape: evaluate(&model, &store, data.test)?,
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Mean and spread (max - min) of test MAPE per (variant, fraction).
pub fn cell_summary(rows: &[ExperimentRow]) -> Vec<(String, f64, f64, f64)> {
    let mut keys: Vec<(String, u64)> = Vec::new();
    for r in rows {
        let k = (r.variant.clone(), r.fraction.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(v, f)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == v && r.fraction.to_bits() == f)
                .map(|r| r.test_mape)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
            (v, f64::from_bits(f), mean, spread)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controller_unfreezes_exactly_at_patience() {
        let mut c = PhaseController::new(3, true);
        let seq = [5.0, 4.0, 4.5, 4.2, 4.1];
        let events: Vec<PhaseEvent> = seq.iter().map(|&v| c.observe(v)).collect();
        assert_eq!(
            events,
            vec![PhaseEvent::Improved, PhaseEvent::Improved, PhaseEvent::Continue, PhaseEvent::Continue, PhaseEvent::Unfreeze]
        );
        assert_eq!(c.phase, 2);
        for _ in 0..2 {
            assert_eq!(c.observe(9.0), PhaseEvent::Continue);
        }
        assert_eq!(c.observe(9.0), PhaseEvent::Stop);
    }

    #[test]
    fn single_phase_controller_stops() {
        let mut c = PhaseController::new(2, false);
        assert_eq!(c.observe(1.0), PhaseEvent::Improved);
        assert_eq!(c.observe(1.0), PhaseEvent::Continue);
        assert_eq!(c.observe(2.0), PhaseEvent::Stop);
        assert_eq!(c.phase, 1);
    }

    #[test]
    fn epochs_scale_with_budget() {
        let cfg = ExperimentConfig {
            sample_budget: Some(10_000),
            min_epochs: 4,
            train: TrainConfig {
                max_epochs: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        assert_eq!(cfg.epochs_for(100), 50);
        assert_eq!(cfg.epochs_for(1000), 10);
        assert_eq!(cfg.epochs_for(100_000), 4);
    }
}
