//! Training loops and checkpoints.
//!
//! * Pre-training: `2n` patches through the FPN, `N = n·m` gathered
//!   representation pairs, projection, InfoNCE, Adam.
//! * Probing: a linear or non-linear voxel-wise head on a frozen (or
//!   trainable) backbone, trained with voxel-wise cross-entropy.
//! * Fine-tuning: non-linear head with the backbone frozen for a while and
//!   then unfrozen with a geometric learning-rate ramp.
//!
//! Every batch is a pure function of `(seed, step)`, so a run resumed from
//! a checkpoint replays the uninterrupted run exactly, whatever the number
//! of sampler workers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::EVAL_WINDOW;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::loss::{info_nce, DEFAULT_TEMPERATURE};
use crate::model::{
    fpn_forward, gather_representation, head_forward, init_backbone, init_head, init_projector, project,
    representation_dim, FpnConfig, HeadKind, ParamVars, Params,
};
use crate::phantom::ManifestEntry;
use crate::rng::{self, stream};
use crate::sampler::{assemble_batch, grid_to_xyz, sample_labeled_patch, PatchSpec, PretrainBatch, SampleSource};
use crate::tensor::{AdamConfig, AdamState, Element, Graph, Tensor, Var};
use crate::volume::{preprocess, read_labels, read_volume, BodyMask, LabelGrid, PreprocessConfig, Volume};

// ---- configuration ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Vec<String> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            vec![]
        } else {
            vec![format!("loss.temperature must be > 0, got {}", self.temperature)]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub total_batches: u64,
    /// Volumes per batch (`n`).
    pub volumes_per_batch: usize,
    pub patch: PatchSpec,
    pub adam: AdamConfig,
    pub checkpoint_every: u64,
    pub validation_every: u64,
    /// Volumes at the end of the manifest held out for the validation loss.
    pub validation_volumes: usize,
    /// Fixed validation batches drawn once from the held-out volumes.
    pub validation_batches: usize,
    /// Sampler threads; 0 or 1 samples on the training thread.
    pub workers: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            total_batches: 2000,
            volumes_per_batch: 4,
            patch: PatchSpec::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            validation_every: 50,
            validation_volumes: 10,
            validation_batches: 4,
            workers: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.volumes_per_batch == 0 {
            errs.push("pretrain.volumes_per_batch must be >= 1".into());
        }
        if !(self.adam.lr > 0.0) {
            errs.push(format!("pretrain.adam.lr must be > 0, got {}", self.adam.lr));
        }
        if self.checkpoint_every == 0 || self.validation_every == 0 {
            errs.push("pretrain.checkpoint_every and pretrain.validation_every must be >= 1".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub mode: HeadKind,
    pub total_batches: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Including background.
    pub num_classes: usize,
    pub window: [f32; 2],
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mode: HeadKind::Linear,
            total_batches: 1000,
            batch_size: 4,
            lr: 3e-4,
            num_classes: 4,
            window: EVAL_WINDOW,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 || self.num_classes < 2 {
            errs.push("probe.batch_size must be >= 1 and probe.num_classes >= 2".into());
        }
        if !(self.lr > 0.0) {
            errs.push(format!("probe.lr must be > 0, got {}", self.lr));
        }
        if !(self.window[0] < self.window[1]) {
            errs.push(format!("probe.window must satisfy lo < hi, got {:?}", self.window));
        }
        errs
    }
}

/// Backbone frozen for `freeze_batches`, then a geometric ramp from
/// `backbone_lr_start` to `backbone_lr_end` over `ramp_batches`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSchedule {
    pub freeze_batches: u64,
    pub ramp_batches: u64,
    pub backbone_lr_start: f64,
    pub backbone_lr_end: f64,
    pub head_lr: f64,
}

impl FinetuneSchedule {
    /// The full-length protocol (45k-batch runs).
    pub fn full_length() -> Self {
        FinetuneSchedule {
            freeze_batches: 15000,
            ramp_batches: 1200,
            backbone_lr_start: 3e-5,
            backbone_lr_end: 3e-4,
            head_lr: 3e-4,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.ramp_batches == 0 {
            errs.push("finetune.ramp_batches must be >= 1".into());
        }
        if !(self.backbone_lr_start > 0.0 && self.backbone_lr_start < self.backbone_lr_end) {
            errs.push("finetune.backbone_lr_start must be > 0 and < backbone_lr_end".into());
        }
        if !(self.head_lr > 0.0) {
            errs.push("finetune.head_lr must be > 0".into());
        }
        errs
    }
}

impl Default for FinetuneSchedule {
    /// The full-length protocol scaled to a 1000-batch run.
    fn default() -> Self {
        FinetuneSchedule {
            freeze_batches: 333,
            ramp_batches: 27,
            ..Self::full_length()
        }
    }
}

/// Backbone learning rate at batch `t`.
pub fn backbone_lr(t: u64, s: &FinetuneSchedule) -> f64 {
    if t < s.freeze_batches {
        return 0.0;
    }
    let delta = t - s.freeze_batches;
    if delta == 0 {
        s.backbone_lr_start
    } else if delta >= s.ramp_batches {
        s.backbone_lr_end
    } else {
        let frac = delta as f64 / s.ramp_batches as f64;
        s.backbone_lr_start * (s.backbone_lr_end / s.backbone_lr_start).powf(frac)
    }
}

// ---- data ----

/// A preprocessed volume ready for sampling.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub volume: Volume,
    pub mask: BodyMask,
    pub labels: Option<LabelGrid>,
}

impl Sample {
    pub fn prepare(
        name: impl Into<String>,
        volume: &Volume,
        labels: Option<&LabelGrid>,
        config: &PreprocessConfig,
        patch: &PatchSpec,
    ) -> Result<Self> {
        let p = preprocess(volume, labels, config, patch.extents)?;
        Ok(Sample {
            name: name.into(),
            volume: p.volume,
            mask: p.mask,
            labels: p.labels,
        })
    }
}

pub fn load_samples(
    entries: &[ManifestEntry],
    config: &PreprocessConfig,
    patch: &PatchSpec,
    require_labels: bool,
) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            let volume = read_volume(&e.volume_path)?;
            let labels = match (&e.labels_path, require_labels) {
                (Some(p), _) => Some(read_labels(p)?),
                (None, true) => {
                    return Err(Error::Data(format!("{} has no labels", e.volume_path.display())));
                }
                (None, false) => None,
            };
            let name = e
                .volume_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Sample::prepare(name, &volume, labels.as_ref(), config, patch)
        })
        .collect()
}

// ---- checkpoints ----

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VXCKPT1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Probe,
    Finetune,
}

/// Training stream position: batches are derived from `(seed, step)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamGroup {
    pub name: String,
    pub config: AdamConfig,
    pub step: u64,
    pub params: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadInfo {
    pub kind: HeadKind,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub rng: RngState,
    pub representation_dim: usize,
    pub adam: Vec<AdamGroup>,
    pub head: Option<HeadInfo>,
}

/// Parameters, optimizer moments (`adam.m.<name>`, `adam.v.<name>`) and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: CheckpointMeta,
    pub tensors: Params,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    /// Bundles `params` and the moments of each named optimizer group.
    pub fn new(
        kind: CheckpointKind,
        step: u64,
        config: &RunConfig,
        params: &Params,
        optimizers: &[(&str, &AdamState)],
        head: Option<HeadInfo>,
    ) -> Self {
        let mut tensors = params.clone();
        let mut groups = Vec::new();
        for (name, adam) in optimizers {
            for (p, m) in &adam.first_moment {
                tensors.insert(format!("{ADAM_M}{p}"), m.clone());
            }
            for (p, v) in &adam.second_moment {
                tensors.insert(format!("{ADAM_V}{p}"), v.clone());
            }
            groups.push(AdamGroup {
                name: name.to_string(),
                config: adam.config,
                step: adam.step,
                params: adam.first_moment.keys().cloned().collect(),
            });
        }
        Checkpoint {
            step,
            meta: CheckpointMeta {
                kind,
                config: config.clone(),
                rng: RngState {
                    seed: config.seed,
                    step,
                },
                representation_dim: representation_dim(&config.model),
                adam: groups,
                head,
            },
            tensors,
        }
    }

    /// Model parameters (optimizer moments excluded).
    pub fn params(&self) -> Params {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn params_with_prefix(&self, prefixes: &[&str]) -> Params {
        self.tensors
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn backbone(&self) -> Params {
        self.params_with_prefix(&["encoder.", "decoder."])
    }

    pub fn head(&self) -> Params {
        self.params_with_prefix(&["head."])
    }

    pub fn adam_state(&self, group: &str) -> Result<AdamState> {
        let g = self
            .meta
            .adam
            .iter()
            .find(|g| g.name == group)
            .ok_or_else(|| Error::Data(format!("checkpoint has no optimizer group '{group}'")))?;
        let mut state = AdamState::new(g.config);
        state.step = g.step;
        for p in &g.params {
            let get = |prefix: &str| {
                self.tensors
                    .get(&format!("{prefix}{p}"))
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer moment {prefix}{p}")))
            };
            state.first_moment.insert(p.clone(), get(ADAM_M)?);
            state.second_moment.insert(p.clone(), get(ADAM_V)?);
        }
        Ok(state)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let ndim = u8::try_from(t.ndim()).map_err(|_| Error::contract(format!("tensor {name} has too many axes")))?;
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                at as u64,
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let step = u64::from_le_bytes(r.take(8, "step")?.try_into().unwrap());
        let meta_len = r.u32("metadata length")? as usize;
        let at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::format(at as u64, format!("metadata: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Params::new();
        for _ in 0..count {
            let at = r.pos;
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("extent")? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::format(r.pos as u64, "tensor too large"))?, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.contains_key(&name) {
                return Err(Error::format(at as u64, format!("duplicate tensor name '{name}'")));
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { step, meta, tensors })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

// ---- metrics ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub loss: f64,
    pub per_term: f64,
}

struct JsonLines(Option<BufWriter<fs::File>>, PathBuf);

impl JsonLines {
    fn open(dir: Option<&Path>, name: &str, append: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(JsonLines(None, PathBuf::new()));
        };
        let path = dir.join(name);
        let f = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(JsonLines(Some(BufWriter::new(f)), path))
    }

    fn write<S: Serialize>(&mut self, record: &S) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n").map_err(|e| Error::io(&self.1, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| Error::io(&self.1, e))?;
        }
        Ok(())
    }
}

fn create_dir(dir: Option<&Path>) -> Result<()> {
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

fn grad_norm_summary(grads: &IndexMap<String, Tensor>) -> String {
    let total: f64 = grads.values().map(|g| g.sq_norm()).sum();
    let mut parts = vec![format!("total={:.4e}", total.sqrt())];
    parts.extend(grads.iter().map(|(n, g)| format!("{n}={:.4e}", g.sq_norm().sqrt())));
    parts.join(", ")
}

/// Gradients of every trainable bound parameter; unreached ones are zero.
fn collect_grads(g: &Graph<f32>, vars: &ParamVars, loss: Var) -> Result<IndexMap<String, Tensor>> {
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .filter(|(_, &v)| g.requires_grad(v))
        .map(|(n, &v)| {
            let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()));
            (n.clone(), t)
        })
        .collect())
}

// ---- pre-training ----

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub step: u64,
    /// Backbone and projector parameters.
    pub params: Params,
    pub adam: AdamState,
}

impl PretrainState {
    pub fn init(run: &RunConfig) -> Result<Self> {
        let mut rng = rng::derive(run.seed, &[stream::INIT]);
        let mut params = init_backbone(&run.model, &mut rng)?;
        params.extend(init_projector(&run.model, &mut rng));
        Ok(PretrainState {
            step: 0,
            params,
            adam: AdamState::new(run.pretrain.adam),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Pretrain {
            return Err(Error::Data(format!("expected a pre-training checkpoint, got {:?}", ckpt.meta.kind)));
        }
        let adam = if ckpt.meta.adam.is_empty() {
            AdamState::new(ckpt.meta.config.pretrain.adam)
        } else {
            ckpt.adam_state("model")?
        };
        Ok(PretrainState {
            step: ckpt.step,
            params: ckpt.params(),
            adam,
        })
    }

    pub fn checkpoint(&self, run: &RunConfig) -> Checkpoint {
        Checkpoint::new(CheckpointKind::Pretrain, self.step, run, &self.params, &[("model", &self.adam)], None)
    }
}

/// InfoNCE of a batch under already-bound parameters.
pub fn contrastive_loss<T: Element>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    model: &FpnConfig,
    patches: Var,
    pairs: &[crate::sampler::PairIndex],
    tau: f64,
) -> Result<Var> {
    let maps = fpn_forward(g, vars, model, patches)?;
    let view = |k: usize| pairs.iter().map(|p| (p.patch[k], p.local[k])).collect::<Vec<_>>();
    let h1 = gather_representation(g, &maps, model, &view(0))?;
    let h2 = gather_representation(g, &maps, model, &view(1))?;
    let z1 = project(g, vars, h1)?;
    let z2 = project(g, vars, h2)?;
    info_nce(g, z1, z2, tau)
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn pretrain_step(state: &mut PretrainState, batch: &PretrainBatch, run: &RunConfig) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let vars = ParamVars::new(&mut g, &state.params, true);
    let x = g.constant(batch.patches.clone());
    let loss = contrastive_loss(&mut g, &vars, &run.model, x, &batch.pairs, run.loss.temperature)?;
    let value = g.value(loss).item() as f64;
    let grads = collect_grads(&g, &vars, loss)?;
    if !value.is_finite() || grads.values().any(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss: value,
            grad_norms: grad_norm_summary(&grads),
        });
    }
    state.adam.step(&mut state.params, &grads, run.pretrain.adam.lr)?;
    state.step += 1;
    Ok(value)
}

/// Mean InfoNCE over `batches` without touching the parameters.
pub fn evaluate_contrastive(params: &Params, run: &RunConfig, batches: &[PretrainBatch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let mut g = Graph::<f32>::new();
        let vars = ParamVars::new(&mut g, params, false);
        let x = g.constant(b.patches.clone());
        let loss = contrastive_loss(&mut g, &vars, &run.model, x, &b.pairs, run.loss.temperature)?;
        total += g.value(loss).item() as f64;
    }
    Ok(total / batches.len().max(1) as f64)
}

fn batch_from_stream(run: &RunConfig, samples: &[Sample], n: usize, rng: &mut impl Rng) -> Result<PretrainBatch> {
    if samples.len() < n {
        return Err(Error::Data(format!(
            "{} training volumes for {n} volumes per batch",
            samples.len()
        )));
    }
    let picks: Vec<usize> = index::sample(rng, samples.len(), n).into_vec();
    let sources: Vec<SampleSource<'_>> = picks
        .iter()
        .map(|&i| SampleSource {
            volume: &samples[i].volume,
            mask: &samples[i].mask,
            seed: rng.random(),
        })
        .collect();
    assemble_batch(&sources, &run.pretrain.patch, &run.sampler, &run.augment)
}

/// The pre-training batch of `step`: a pure function of `(seed, step)`.
pub fn pretrain_batch(run: &RunConfig, samples: &[Sample], step: u64) -> Result<PretrainBatch> {
    let n = run.pretrain.volumes_per_batch;
    batch_from_stream(run, samples, n, &mut rng::derive(run.seed, &[stream::PRETRAIN_BATCH, step]))
}

/// Fixed validation batches of up to `volumes_per_batch` held-out volumes each.
pub fn validation_batches(run: &RunConfig, held_out: &[Sample]) -> Result<Vec<PretrainBatch>> {
    let n = run.pretrain.volumes_per_batch.min(held_out.len());
    (0..run.pretrain.validation_batches)
        .map(|i| batch_from_stream(run, held_out, n, &mut rng::derive(run.seed, &[stream::VALIDATION, i as u64])))
        .collect()
}

/// Splits off the last `validation_volumes` samples for validation.
pub fn split_validation(samples: Vec<Sample>, run: &RunConfig) -> (Vec<Sample>, Vec<Sample>) {
    let mut train = samples;
    let k = run.pretrain.validation_volumes.min(train.len());
    let held_out = train.split_off(train.len() - k);
    (train, held_out)
}

/// Produces the batches of steps `start..end` in order, sampling on
/// `workers` threads when more than one is requested.
pub fn for_each_batch(
    run: &RunConfig,
    samples: &[Sample],
    start: u64,
    end: u64,
    mut f: impl FnMut(u64, PretrainBatch) -> Result<()>,
) -> Result<()> {
    let workers = run.pretrain.workers as u64;
    if workers <= 1 {
        for t in start..end {
            f(t, pretrain_batch(run, samples, t)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|s| {
        let (tx, rx) = sync_channel::<(u64, Result<PretrainBatch>)>(2 * workers as usize);
        for w in 0..workers {
            let tx = tx.clone();
            s.spawn(move || {
                let mut t = start + w;
                while t < end {
                    if tx.send((t, pretrain_batch(run, samples, t))).is_err() {
                        break;
                    }
                    t += workers;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut next = start;
        for (t, b) in rx.iter() {
            pending.insert(t, b);
            while let Some(b) = pending.remove(&next) {
                f(next, b?)?;
                next += 1;
            }
        }
        Ok(())
    })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    pub validation: Vec<ValidationRecord>,
}

/// Runs pre-training up to `pretrain.total_batches`, starting from `resume`
/// when given. With an output directory, writes `metrics.jsonl`,
/// `validation.jsonl`, periodic `ckpt_XXXXXX.vxckpt` files and `final.vxckpt`.
pub fn pretrain(
    run: &RunConfig,
    train: &[Sample],
    held_out: &[Sample],
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    run.check()?;
    create_dir(out_dir)?;
    let mut state = match resume {
        Some(c) => PretrainState::from_checkpoint(c)?,
        None => PretrainState::init(run)?,
    };
    let resumed = resume.is_some();
    let mut metrics = JsonLines::open(out_dir, "metrics.jsonl", resumed)?;
    let mut val_log = JsonLines::open(out_dir, "validation.jsonl", resumed)?;
    let val_batches = if held_out.is_empty() {
        Vec::new()
    } else {
        validation_batches(run, held_out)?
    };
    let pairs_per_batch =
        val_batches.iter().map(|b| b.pairs.len()).sum::<usize>() as f64 / val_batches.len().max(1) as f64;
    let mut validation = Vec::new();
    let mut validate = |state: &PretrainState, val_log: &mut JsonLines| -> Result<()> {
        if val_batches.is_empty() {
            return Ok(());
        }
        let loss = evaluate_contrastive(&state.params, run, &val_batches)?;
        let rec = ValidationRecord {
            step: state.step,
            loss,
            per_term: loss / (2.0 * pairs_per_batch),
        };
        val_log.write(&rec)?;
        validation.push(rec);
        Ok(())
    };
    let save = |state: &PretrainState, name: String| -> Result<()> {
        if let Some(d) = out_dir {
            save_checkpoint(&d.join(name), &state.checkpoint(run))?;
        }
        Ok(())
    };
    if !resumed {
        validate(&state, &mut val_log)?;
    }
    let total = run.pretrain.total_batches;
    let mut losses = Vec::new();
    let started = Instant::now();
    for_each_batch(run, train, state.step, total, |t, batch| {
        debug_assert_eq!(t, state.step);
        let loss = pretrain_step(&mut state, &batch, run)?;
        losses.push(loss);
        metrics.write(&StepMetrics {
            step: t,
            loss,
            lr_backbone: run.pretrain.adam.lr,
            lr_head: run.pretrain.adam.lr,
            wall_ms: started.elapsed().as_millis() as u64,
        })?;
        if state.step % run.pretrain.validation_every == 0 {
            validate(&state, &mut val_log)?;
        }
        if state.step % run.pretrain.checkpoint_every == 0 && state.step < total {
            save(&state, format!("ckpt_{:06}.vxckpt", state.step))?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    val_log.flush()?;
    save(&state, "final.vxckpt".into())?;
    Ok(PretrainOutcome {
        checkpoint: state.checkpoint(run),
        losses,
        validation,
    })
}

// ---- supervised heads ----

/// A labeled batch: patches `[B, 1, X, Y, Z]` and one class id per voxel in
/// the same (z-fastest) order.
pub fn probe_batch(run: &RunConfig, samples: &[Sample], step: u64) -> Result<(Tensor, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::Data("no labeled volumes".into()));
    }
    let mut rng = rng::derive(run.seed, &[stream::PROBE_BATCH, step]);
    let spec = &run.pretrain.patch;
    let per = spec.voxels();
    let b = run.probe.batch_size;
    let mut data = vec![0.0f32; b * per];
    let mut labels = vec![0usize; b * per];
    for i in 0..b {
        let s = &samples[rng.random_range(0..samples.len())];
        let gt = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} has no labels", s.name)))?;
        let mut patch = sample_labeled_patch(&s.volume, &s.mask, gt, spec, &mut rng)?;
        if run.probe.window != EVAL_WINDOW {
            let raw = crate::sampler::extract_patch(&s.volume, patch.origin, spec.extents);
            for (o, &v) in patch.image.data_mut().iter_mut().zip(raw.data()) {
                *o = crate::augment::window_rescale(v, run.probe.window);
            }
        }
        grid_to_xyz(&patch.image, &mut data[i * per..(i + 1) * per]);
        let [dx, dy, dz] = spec.extents;
        for (j, &c) in patch.labels.data().iter().enumerate() {
            let (x, y, z) = (j % dx, (j / dx) % dy, j / (dx * dy));
            labels[i * per + (x * dy + y) * dz + z] = c as usize;
        }
    }
    let [x, y, z] = spec.extents;
    Ok((Tensor::new(vec![b, 1, x, y, z], data)?, labels))
}

/// Backbone plus head, ready for inference.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub model: FpnConfig,
    pub head: HeadInfo,
    pub backbone: Params,
    pub head_params: Params,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let head = ckpt
            .meta
            .head
            .ok_or_else(|| Error::Data("checkpoint carries no segmentation head".into()))?;
        Ok(Predictor {
            model: ckpt.meta.config.model.clone(),
            head,
            backbone: ckpt.backbone(),
            head_params: ckpt.head(),
        })
    }

    /// Logits `[B, K, X, Y, Z]` for windowed patches `[B, 1, X, Y, Z]`.
    pub fn logits(&self, patches: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let mut vars = ParamVars::new(&mut g, &self.backbone, false);
        vars.bind(&mut g, &self.head_params, false);
        let x = g.constant(patches.clone());
        let maps = fpn_forward(&mut g, &vars, &self.model, x)?;
        let out = head_forward(self.head.kind, &mut g, &vars, &self.model, &maps)?;
        Ok(g.value(out).clone())
    }
}

/// Trains a head on `samples`; `backbone_lr(t) == 0` keeps the backbone
/// frozen at step `t` (bound as constants, so it gets no gradient).
fn train_head(
    backbone_ckpt: &Checkpoint,
    run: &RunConfig,
    samples: &[Sample],
    kind: HeadKind,
    ckpt_kind: CheckpointKind,
    backbone_lr: impl Fn(u64) -> f64,
    head_lr: f64,
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    run.check()?;
    create_dir(out_dir)?;
    let model = backbone_ckpt.meta.config.model.clone();
    model.check_extents(run.pretrain.patch.extents)?;
    let mut run = run.clone();
    run.model = model.clone();
    let mut backbone = backbone_ckpt.backbone();
    if backbone.is_empty() {
        return Err(Error::Data("backbone checkpoint holds no encoder/decoder parameters".into()));
    }
    let num_classes = run.probe.num_classes;
    let mut head = init_head::<f32>(kind, &model, num_classes, &mut rng::derive(run.seed, &[stream::INIT, 1]));
    let mut head_adam = AdamState::new(AdamConfig { lr: head_lr, ..run.pretrain.adam });
    let mut backbone_adam = AdamState::new(AdamConfig { lr: 0.0, ..run.pretrain.adam });
    let mut metrics = JsonLines::open(out_dir, "metrics.jsonl", false)?;
    let started = Instant::now();
    for t in 0..run.probe.total_batches {
        let (patches, labels) = probe_batch(&run, samples, t)?;
        let lr_b = backbone_lr(t);
        let train_backbone = lr_b > 0.0;
        let mut g = Graph::<f32>::new();
        let mut vars = ParamVars::new(&mut g, &backbone, train_backbone);
        vars.bind(&mut g, &head, true);
        let x = g.constant(patches);
        let maps = fpn_forward(&mut g, &vars, &model, x)?;
        let logits = head_forward(kind, &mut g, &vars, &model, &maps)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let value = g.value(loss).item() as f64;
        let mut grads = collect_grads(&g, &vars, loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: t,
                loss: value,
                grad_norms: grad_norm_summary(&grads),
            });
        }
        let head_grads: IndexMap<String, Tensor> = head
            .keys()
            .map(|n| (n.clone(), grads.swap_remove(n).expect("head is trainable")))
            .collect();
        head_adam.step(&mut head, &head_grads, head_lr)?;
        if train_backbone {
            backbone_adam.step(&mut backbone, &grads, lr_b)?;
        }
        metrics.write(&StepMetrics {
            step: t,
            loss: value,
            lr_backbone: lr_b,
            lr_head: head_lr,
            wall_ms: started.elapsed().as_millis() as u64,
        })?;
    }
    metrics.flush()?;
    let mut params = backbone;
    params.extend(head);
    let info = HeadInfo { kind, num_classes };
    let mut optimizers = vec![("head", &head_adam)];
    if backbone_adam.step > 0 {
        optimizers.push(("backbone", &backbone_adam));
    }
    let ckpt = Checkpoint::new(ckpt_kind, run.probe.total_batches, &run, &params, &optimizers, Some(info));
    if let Some(d) = out_dir {
        save_checkpoint(&d.join("final.vxckpt"), &ckpt)?;
    }
    Ok(ckpt)
}

/// Linear or non-linear probe (per `run.probe.mode`). With `frozen`, the
/// backbone parameters are never updated.
pub fn train_probe(
    backbone_ckpt: &Checkpoint,
    run: &RunConfig,
    samples: &[Sample],
    frozen: bool,
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    let lr = run.probe.lr;
    train_head(
        backbone_ckpt,
        run,
        samples,
        run.probe.mode,
        CheckpointKind::Probe,
        |_| if frozen { 0.0 } else { lr },
        lr,
        out_dir,
    )
}

/// Non-linear head with the freeze-then-ramp backbone schedule.
pub fn finetune(
    backbone_ckpt: &Checkpoint,
    run: &RunConfig,
    samples: &[Sample],
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    let schedule = run.finetune;
    train_head(
        backbone_ckpt,
        run,
        samples,
        HeadKind::Nonlinear,
        CheckpointKind::Finetune,
        |t| backbone_lr(t, &schedule),
        schedule.head_lr,
        out_dir,
    )
}
