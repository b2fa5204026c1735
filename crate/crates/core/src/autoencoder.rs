//! Statement encoders and the reconstruction autoencoder used for
//! pre-training.
//!
//! The segmented encoder slices a computation vector into its segments,
//! runs a small dense layer per segment (one layer shared by all access
//! blocks) and feeds the concatenation through a dense trunk. The two
//! comparison variants are plain dense stacks over the whole vector.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use tensornet::{mse_loss, Activation, Adam, Checkpoint, Dense, DenseCache, Mlp, MlpCache, NetError, NumArray, ParameterStore};

use crate::featurize::{FeatureConfig, FeatureError, SegmentLayout, VectorDataset};

pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Segmented,
    PlainMlp,
    CompEmbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentWidths {
    pub domain: usize,
    pub access: usize,
    pub ops: usize,
    pub sched: usize,
    pub tags: usize,
}

impl Default for SegmentWidths {
    fn default() -> Self {
        Self {
            domain: 32,
            access: 16,
            ops: 32,
            sched: 32,
            tags: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub variant: EncoderVariant,
    pub segments: SegmentWidths,
    /// Hidden widths between the input (or segment concatenation) and the
    /// embedding.
    pub trunk: Vec<usize>,
    pub embedding_dim: usize,
}

impl EncoderArch {
    pub fn segmented(embedding_dim: usize) -> Self {
        Self {
            variant: EncoderVariant::Segmented,
            segments: SegmentWidths::default(),
            trunk: vec![512, 512],
            embedding_dim,
        }
    }

    pub fn plain_mlp(embedding_dim: usize) -> Self {
        Self {
            variant: EncoderVariant::PlainMlp,
            trunk: vec![512, 512],
            ..Self::segmented(embedding_dim)
        }
    }

    /// The computation-embedding stack of the baseline performance model.
    pub fn comp_embed(embedding_dim: usize) -> Self {
        Self {
            variant: EncoderVariant::CompEmbed,
            trunk: vec![512, 256],
            ..Self::segmented(embedding_dim)
        }
    }

    pub fn for_variant(variant: EncoderVariant, embedding_dim: usize) -> Self {
        match variant {
            EncoderVariant::Segmented => Self::segmented(embedding_dim),
            EncoderVariant::PlainMlp => Self::plain_mlp(embedding_dim),
            EncoderVariant::CompEmbed => Self::comp_embed(embedding_dim),
        }
    }
}

#[derive(Clone, Debug)]
struct SegmentNets {
    domain: Dense,
    access: Dense,
    ops: Dense,
    sched: Dense,
    tags: Dense,
}

#[derive(Clone, Debug)]
enum EncoderBody {
    Segmented { nets: SegmentNets, trunk: Mlp },
    Stack(Mlp),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub arch: EncoderArch,
    layout: SegmentLayout,
    n_access: usize,
    block: usize,
    input_dim: usize,
    body: EncoderBody,
}

#[derive(Clone, Debug)]
struct SegmentCache {
    inputs: [NumArray; 5],
    caches: [DenseCache; 5],
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    segments: Option<SegmentCache>,
    trunk: MlpCache,
}

impl EncoderCache {
    pub fn output(&self) -> &NumArray {
        self.trunk.output()
    }
}

const HIDDEN: Activation = Activation::Tanh;

impl Encoder {
    /// Parameters are registered under `enc.`.
    pub fn new(store: &mut ParameterStore, arch: &EncoderArch, fcfg: &FeatureConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if arch.embedding_dim == 0 || arch.trunk.contains(&0) {
            return Err(ModelError::Contract("encoder widths must be positive".into()));
        }
        let layout = fcfg.layout();
        let n_access = fcfg.max_accesses;
        let block = fcfg.access_block();
        let input_dim = layout.total();
        let body = match arch.variant {
            EncoderVariant::Segmented => {
                let w = &arch.segments;
                let nets = SegmentNets {
                    domain: Dense::new(store, "enc.seg.domain", layout.domain.len(), w.domain, HIDDEN, rng)?,
                    access: Dense::new(store, "enc.seg.access", block, w.access, HIDDEN, rng)?,
                    ops: Dense::new(store, "enc.seg.ops", layout.ops.len(), w.ops, HIDDEN, rng)?,
                    sched: Dense::new(store, "enc.seg.sched", layout.sched.len(), w.sched, HIDDEN, rng)?,
                    tags: Dense::new(store, "enc.seg.tags", layout.tags.len(), w.tags, HIDDEN, rng)?,
                };
                // the access-count scalar joins the concatenation directly
                let concat = w.domain + n_access * w.access + 1 + w.ops + w.sched + w.tags;
                let widths: Vec<usize> = std::iter::once(concat)
                    .chain(arch.trunk.iter().copied())
                    .chain(std::iter::once(arch.embedding_dim))
                    .collect();
                let trunk = Mlp::new(store, "enc.trunk", &widths, HIDDEN, Activation::Tanh, rng)?;
                EncoderBody::Segmented { nets, trunk }
            }
            EncoderVariant::PlainMlp | EncoderVariant::CompEmbed => {
                let widths: Vec<usize> = std::iter::once(input_dim)
                    .chain(arch.trunk.iter().copied())
                    .chain(std::iter::once(arch.embedding_dim))
                    .collect();
                EncoderBody::Stack(Mlp::new(store, "enc.stack", &widths, HIDDEN, Activation::Tanh, rng)?)
            }
        };
        Ok(Self {
            arch: arch.clone(),
            layout,
            n_access,
            block,
            input_dim,
            body,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    fn check(&self, x: &NumArray) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim {
            return Err(ModelError::Contract(format!(
                "encoder expects vectors of length {}, got shape {:?}",
                self.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// `x` is `[batch, total_dim]`.
    pub fn forward(&self, store: &ParameterStore, x: &NumArray) -> Result<EncoderCache> {
        self.check(x)?;
        match &self.body {
            EncoderBody::Stack(mlp) => Ok(EncoderCache {
                segments: None,
                trunk: mlp.forward(store, x)?,
            }),
            EncoderBody::Segmented { nets, trunk } => {
                let l = &self.layout;
                let b = x.rows();
                let acc_all = x.columns(l.access.start, self.n_access * self.block);
                let inputs = [
                    x.columns(l.domain.start, l.domain.len()),
                    acc_all.reshape(&[b * self.n_access, self.block])?,
                    x.columns(l.ops.start, l.ops.len()),
                    x.columns(l.sched.start, l.sched.len()),
                    x.columns(l.tags.start, l.tags.len()),
                ];
                let layers = [&nets.domain, &nets.access, &nets.ops, &nets.sched, &nets.tags];
                let caches: Vec<DenseCache> = layers
                    .iter()
                    .zip(&inputs)
                    .map(|(d, i)| d.forward(store, i))
                    .collect::<std::result::Result<_, _>>()?;
                let access_out = caches[1].out.clone().reshape(&[b, self.n_access * nets.access.outputs])?;
                let count = x.columns(l.access.end - 1, 1);
                let concat = NumArray::hcat(&[&caches[0].out, &access_out, &count, &caches[2].out, &caches[3].out, &caches[4].out])?;
                let trunk_cache = trunk.forward(store, &concat)?;
                let caches: [DenseCache; 5] = caches.try_into().expect("five segments");
                Ok(EncoderCache {
                    segments: Some(SegmentCache { inputs, caches }),
                    trunk: trunk_cache,
                })
            }
        }
    }

    pub fn infer(&self, store: &ParameterStore, x: &NumArray) -> Result<NumArray> {
        Ok(self.forward(store, x)?.output().clone())
    }

    /// Accumulates parameter gradients for `dy` (`[batch, embedding_dim]`).
    pub fn backward(&self, store: &mut ParameterStore, cache: &EncoderCache, dy: &NumArray) -> Result<()> {
        match &self.body {
            EncoderBody::Stack(mlp) => {
                mlp.backward(store, &cache.trunk, dy, false)?;
            }
            EncoderBody::Segmented { nets, trunk } => {
                let seg = cache.segments.as_ref().expect("segmented cache");
                let Some(dcat) = trunk.backward(store, &cache.trunk, dy, true)? else {
                    return Ok(());
                };
                let b = dcat.rows();
                let w = &self.arch.segments;
                let mut at = 0;
                let mut take = |n: usize| {
                    let part = dcat.columns(at, n);
                    at += n;
                    part
                };
                let d_domain = take(w.domain);
                let d_access = take(self.n_access * w.access).reshape(&[b * self.n_access, w.access])?;
                let _count = take(1);
                let d_ops = take(w.ops);
                let d_sched = take(w.sched);
                let d_tags = take(w.tags);
                let layers = [&nets.domain, &nets.access, &nets.ops, &nets.sched, &nets.tags];
                let grads = [d_domain, d_access, d_ops, d_sched, d_tags];
                for i in 0..5 {
                    layers[i].backward(store, &seg.inputs[i], &seg.caches[i], &grads[i], false)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub hidden: Vec<usize>,
}

impl Default for DecoderArch {
    fn default() -> Self {
        Self { hidden: vec![512, 512] }
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Mlp,
    pub decoder_arch: DecoderArch,
    pub features: FeatureConfig,
}

pub struct AutoencoderCache {
    enc: EncoderCache,
    dec: MlpCache,
}

impl AutoencoderCache {
    pub fn reconstruction(&self) -> &NumArray {
        self.dec.output()
    }

    pub fn embedding(&self) -> &NumArray {
        self.enc.output()
    }
}

impl Autoencoder {
    pub fn new(
        store: &mut ParameterStore,
        arch: &EncoderArch,
        decoder_arch: &DecoderArch,
        fcfg: &FeatureConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(store, arch, fcfg, &mut rng)?;
        let widths: Vec<usize> = std::iter::once(arch.embedding_dim)
            .chain(decoder_arch.hidden.iter().copied())
            .chain(std::iter::once(fcfg.total_dim()))
            .collect();
        let decoder = Mlp::new(store, "dec.mlp", &widths, HIDDEN, Activation::Identity, &mut rng)?;
        Ok(Self {
            encoder,
            decoder,
            decoder_arch: decoder_arch.clone(),
            features: fcfg.clone(),
        })
    }

    pub fn encode(&self, store: &ParameterStore, x: &NumArray) -> Result<NumArray> {
        self.encoder.infer(store, x)
    }

    pub fn decode(&self, store: &ParameterStore, e: &NumArray) -> Result<NumArray> {
        if e.shape().len() != 2 || e.cols() != self.encoder.output_dim() {
            return Err(ModelError::Contract(format!(
                "decoder expects embeddings of length {}, got shape {:?}",
                self.encoder.output_dim(),
                e.shape()
            )));
        }
        Ok(self.decoder.infer(store, e)?)
    }

    pub fn forward(&self, store: &ParameterStore, x: &NumArray) -> Result<AutoencoderCache> {
        let enc = self.encoder.forward(store, x)?;
        let dec = self.decoder.forward(store, enc.output())?;
        Ok(AutoencoderCache { enc, dec })
    }

    /// Reconstruction MSE of a batch; with `with_grad` also accumulates
    /// gradients.
    pub fn loss(&self, store: &mut ParameterStore, x: &NumArray, with_grad: bool) -> Result<f64> {
        let cache = self.forward(store, x)?;
        let (loss, g) = mse_loss(cache.reconstruction().data(), x.data())?;
        if with_grad {
            let dy = NumArray::matrix(x.rows(), x.cols(), g)?;
            if let Some(de) = self.decoder.backward(store, &cache.dec, &dy, true)? {
                self.encoder.backward(store, &cache.enc, &de)?;
            }
        }
        Ok(loss)
    }

    pub fn meta(&self) -> serde_json::Value {
        json!({
            "kind": "autoencoder",
            "encoder": self.encoder.arch,
            "decoder": self.decoder_arch,
            "features": self.features,
            "total_dim": self.features.total_dim(),
        })
    }

    /// Rebuilds the autoencoder described by a checkpoint and loads its
    /// weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParameterStore)> {
        let meta = PretrainMeta::parse(&ck.meta)?;
        let mut store = ParameterStore::new();
        let ae = Self::new(&mut store, &meta.encoder, &meta.decoder, &meta.features, 0)?;
        ck.restore_into(&mut store, "")
            .map_err(|e| ModelError::Incompatible(e.to_string()))?;
        Ok((ae, store))
    }
}

/// Metadata stored with a pre-training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMeta {
    pub kind: String,
    pub encoder: EncoderArch,
    pub decoder: DecoderArch,
    pub features: FeatureConfig,
    pub total_dim: usize,
}

impl PretrainMeta {
    pub fn parse(v: &serde_json::Value) -> Result<Self> {
        let meta: Self = serde_json::from_value(v.clone())
            .map_err(|e| ModelError::Incompatible(format!("checkpoint metadata: {e}")))?;
        if meta.kind != "autoencoder" {
            return Err(ModelError::Incompatible(format!("expected an autoencoder checkpoint, found `{}`", meta.kind)));
        }
        if meta.total_dim != meta.features.total_dim() {
            return Err(ModelError::Incompatible(format!(
                "total_dim {} does not match the stored feature config ({})",
                meta.total_dim,
                meta.features.total_dim()
            )));
        }
        Ok(meta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
    /// Fraction of programs held out for checkpoint selection.
    pub valid_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 128,
            lr: 1e-3,
            lr_decay: 0.5,
            seed: 0,
            valid_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub valid_mse: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: Autoencoder,
    /// Holds the best-validation weights.
    pub store: ParameterStore,
    pub log: Vec<MseRow>,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
}

impl PretrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, "", self.model.meta())
    }
}

/// Row indices of the training and validation parts, split by program.
pub fn split_by_program(ds: &VectorDataset, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in &ds.records {
        if seen.insert(r.program_id.as_str()) {
            ids.push(r.program_id.as_str());
        }
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n_valid = ((ids.len() as f64 * valid_fraction).round() as usize).clamp(usize::from(ids.len() > 1), ids.len().saturating_sub(1));
    let valid: HashSet<&str> = ids[..n_valid].iter().copied().collect();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, r) in ds.records.iter().enumerate() {
        if valid.contains(r.program_id.as_str()) {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    (tr, va)
}

/// Rows of `ds` at `idx` as one matrix.
pub fn gather(ds: &VectorDataset, idx: &[usize]) -> NumArray {
    let dim = ds.total_dim();
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        data.extend_from_slice(ds.records[i].vector.as_slice());
    }
    NumArray::matrix(idx.len(), dim, data).expect("rows have total_dim entries")
}

fn mean_mse(ae: &Autoencoder, store: &mut ParameterStore, x: &NumArray, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..x.rows()).step_by(batch) {
        let n = batch.min(x.rows() - start);
        let part = rows(x, start, n);
        total += ae.loss(store, &part, false)? * n as f64;
    }
    Ok(total / x.rows().max(1) as f64)
}

fn rows(x: &NumArray, start: usize, n: usize) -> NumArray {
    let c = x.cols();
    NumArray::matrix(n, c, x.data()[start * c..(start + n) * c].to_vec()).expect("slice of matrix")
}

/// Trains encoder and decoder on reconstruction MSE and keeps the weights
/// of the epoch with the lowest validation MSE.
pub fn pretrain(
    ds: &VectorDataset,
    arch: &EncoderArch,
    decoder: &DecoderArch,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&MseRow),
) -> Result<PretrainOutcome> {
    if ds.records.is_empty() {
        return Err(ModelError::Contract("pre-training dataset is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(ModelError::Contract("epochs and batch size must be positive".into()));
    }
    let dim = ds.total_dim();
    if let Some((i, r)) = ds.records.iter().enumerate().find(|(_, r)| r.vector.as_slice().len() != dim) {
        return Err(ModelError::Contract(format!(
            "record {i} has length {}, but the dataset's total_dim is {dim}",
            r.vector.as_slice().len()
        )));
    }
    if !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
        return Err(ModelError::Contract("lr_decay must lie in (0, 1]".into()));
    }
    let mut store = ParameterStore::new();
    let model = Autoencoder::new(&mut store, arch, decoder, &ds.config, cfg.seed)?;
    let (train_idx, valid_idx) = split_by_program(ds, cfg.valid_fraction, cfg.seed);
    let train = gather(ds, &train_idx);
    let valid = gather(ds, &valid_idx);
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut best = store.clone();
    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        adam.lr = cfg.lr * cfg.lr_decay.powi(epoch as i32 - 1);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                data.extend_from_slice(train.row(i));
            }
            let x = NumArray::matrix(chunk.len(), dim, data)?;
            store.zero_grads();
            sum += model.loss(&mut store, &x, true)? * chunk.len() as f64;
            adam.step(&mut store);
        }
        let train_mse = sum / train.rows() as f64;
        let valid_mse = if valid.rows() > 0 {
            mean_mse(&model, &mut store, &valid, 1024)?
        } else {
            train_mse
        };
        let row = MseRow {
            epoch,
            train_mse,
            valid_mse,
        };
        on_epoch(&row);
        log.push(row);
        if valid_mse < best_valid {
            best_valid = valid_mse;
            best_epoch = epoch;
            best.copy_values_from(&store, "")?;
        }
    }
    Ok(PretrainOutcome {
        model,
        store: best,
        log,
        best_epoch,
        best_valid_mse: best_valid,
    })
}

/// Mean reconstruction MSE over a set of rows.
pub fn reconstruction_mse(ae: &Autoencoder, store: &ParameterStore, x: &NumArray) -> Result<f64> {
    let mut scratch = store.clone();
    mean_mse(ae, &mut scratch, x, 1024)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensornet::{grad_check, GradCheckOptions};

    fn random_vectors(n: usize, dim: usize, seed: u64) -> NumArray {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NumArray::matrix(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_widths_for_all_variants() {
        let fcfg = FeatureConfig::default();
        for v in [EncoderVariant::Segmented, EncoderVariant::PlainMlp, EncoderVariant::CompEmbed] {
            let mut store = ParameterStore::new();
            let ae = Autoencoder::new(&mut store, &EncoderArch::for_variant(v, 128), &DecoderArch::default(), &fcfg, 1).unwrap();
            let x = NumArray::zeros(&[2, 307]);
            let e = ae.encode(&store, &x).unwrap();
            assert_eq!(e.shape(), &[2, 128]);
            assert!(e.all_finite());
            let r = ae.decode(&store, &e).unwrap();
            assert_eq!(r.shape(), &[2, 307]);
            assert!(ae.encode(&store, &NumArray::zeros(&[1, 306])).is_err());
        }
        // a 350-wide bottleneck is also accepted
        let mut store = ParameterStore::new();
        let ae = Autoencoder::new(&mut store, &EncoderArch::segmented(350), &DecoderArch::default(), &fcfg, 1).unwrap();
        assert_eq!(ae.encode(&store, &NumArray::zeros(&[1, 307])).unwrap().cols(), 350);
    }

    #[test]
    fn tag_change_changes_embedding() {
        let fcfg = FeatureConfig::default();
        let mut store = ParameterStore::new();
        let ae = Autoencoder::new(&mut store, &EncoderArch::segmented(128), &DecoderArch::default(), &fcfg, 2).unwrap();
        let mut x = random_vectors(1, 307, 5);
        let a = ae.encode(&store, &x).unwrap();
        x.data_mut()[fcfg.layout().tags.start] += 0.5;
        let b = ae.encode(&store, &x).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encode_decode_gradients() {
        let fcfg = FeatureConfig::default();
        for v in [EncoderVariant::Segmented, EncoderVariant::PlainMlp] {
            let mut store = ParameterStore::new();
            let ae = Autoencoder::new(&mut store, &EncoderArch::for_variant(v, 16), &DecoderArch { hidden: vec![24] }, &fcfg, 3).unwrap();
            let x = random_vectors(1, 307, 7);
            let report = grad_check(&mut store, |s, g| ae.loss(s, &x, g).unwrap(), GradCheckOptions::default());
            assert!(report.passed(), "{v:?}: {report:?}");
        }
    }
}
