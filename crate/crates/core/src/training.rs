//! Joint training over all slots: run configuration, the adaptive-moment
//! optimizer, the epoch loop with best-dev checkpointing, persistence, and
//! the finite-difference gradient harness.
//!
//! Determinism contract: a fixed seed in 64-bit precision yields identical
//! parameter trajectories and loss curves across runs on one machine. All
//! randomness flows through seeded generators; no wall-clock or thread
//! nondeterminism touches the math.

use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_examples, default_aliases, make_batches, Corpus, TurnExample, Warning, WarningSink};
use crate::encoder::{EmbeddingConfig, Vocab};
use crate::error::{DstError, Result};
use crate::evaluation::evaluate_examples;
use crate::model::{Model, model_param_shapes};
use crate::ontology::{Ontology, SlotPolicy};
use crate::params::ParamStore;
use crate::tape::{Real, Tape};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Numeric width of the training run. 64-bit is the reproducibility mode;
/// 32-bit halves memory and is the deployment default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    Bits32,
    Bits64,
}

impl TryFrom<u32> for Precision {
    type Error = String;
    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::Bits32),
            64 => Ok(Precision::Bits64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::Bits32 => 32,
            Precision::Bits64 => 64,
        }
    }
}

/// Batch loss reduction. Sum matches the loss definition (losses add over
/// turns and slots); mean only rescales the effective learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    Sum,
    Mean,
}

fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    24
}
fn default_max_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    3
}
fn default_seed() -> u64 {
    17
}
fn default_slot_policy() -> SlotPolicy {
    SlotPolicy::Hybrid
}
fn default_act_attention() -> bool {
    true
}
fn default_context_cap() -> usize {
    512
}
fn default_max_len() -> usize {
    10
}
fn default_precision() -> Precision {
    Precision::Bits32
}
fn default_clip_norm() -> f64 {
    5.0
}
fn default_loss_reduction() -> LossReduction {
    LossReduction::Sum
}

/// Everything a training run needs, loadable from TOML. Field defaults
/// reproduce the published optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Hard cap on optimizer steps; None trains to max_epochs / patience.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_slot_policy")]
    pub slot_policy: SlotPolicy,
    #[serde(default = "default_act_attention")]
    pub act_attention: bool,
    #[serde(default = "default_context_cap")]
    pub context_cap: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_loss_reduction")]
    pub loss_reduction: LossReduction,
    #[serde(default = "EmbeddingConfig::full_scale")]
    pub embedding: EmbeddingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config must deserialize from defaults")
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| DstError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DstError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DstError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.max_len == 0 {
            return Err(DstError::Config(
                "batch_size, max_epochs, and max_len must be positive".to_string(),
            ));
        }
        if self.max_steps == Some(0) {
            return Err(DstError::Config("max_steps must be positive".to_string()));
        }
        if self.context_cap == 0 {
            return Err(DstError::Config("context_cap must be positive".to_string()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(DstError::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        self.embedding.validate()
    }
}

/// Adaptive-moment optimizer with bias correction. State tensors appear
/// lazily per parameter name on first step.
#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    pub learning_rate: f64,
    step: usize,
    m: IndexMap<String, ArrayD<F>>,
    v: IndexMap<String, ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Applies one update in place. `grads` must hold one tensor per
    /// parameter, shaped to match.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &IndexMap<String, ArrayD<F>>) {
        self.step += 1;
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let eps = F::from_f64(ADAM_EPSILON);
        let corr1 = F::from_f64(1.0 - ADAM_BETA1.powi(self.step as i32));
        let corr2 = F::from_f64(1.0 - ADAM_BETA2.powi(self.step as i32));
        let lr = F::from_f64(self.learning_rate);
        let one = F::one();
        for (name, value) in params.values.iter_mut() {
            let g = &grads[name];
            assert_eq!(g.shape(), value.shape(), "gradient shape mismatch for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *m = m.mapv(|x| x * b1) + g.mapv(|x| x * (one - b1));
            *v = v.mapv(|x| x * b2) + g.mapv(|x| x * x * (one - b2));
            let update = m
                .mapv(|x| x / corr1)
                .into_iter()
                .zip(v.iter().map(|&x| x / corr2))
                .map(|(mh, vh)| lr * mh / (vh.sqrt() + eps))
                .collect::<Vec<F>>();
            let update = ArrayD::from_shape_vec(value.raw_dim(), update)
                .expect("update shape follows the parameter shape");
            *value = &*value - &update;
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(
    grads: &mut IndexMap<String, ArrayD<F>>,
    max_norm: f64,
) -> f64 {
    let mut sum_sq = 0.0f64;
    for g in grads.values() {
        sum_sq += g.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>();
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// One line of the per-epoch metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    /// Mean per-example loss over the epoch, regardless of batch reduction.
    pub train_loss: f64,
    pub dev_joint: f64,
    pub dev_slot: f64,
}

pub fn write_metrics_jsonl(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = Vec::new();
    for record in metrics {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| DstError::Config(format!("metrics serialization: {e}")))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| DstError::io(path, e))
}

pub const CHECKPOINT_MAGIC: &str = "#dst-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One parameter tensor in 64-bit storage. Values serialize through the
/// shortest-round-trip float form, so persistence is bit exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A complete trained state: parameters, configuration, vocabulary, act
/// inventory, and the ontology hash that guards against silent slot-order
/// corruption.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub ontology_hash: String,
    pub act_inventory: Vec<String>,
    pub epoch: usize,
    pub step: usize,
    pub dev_joint: f64,
    pub dev_slot: f64,
    pub vocab: Vocab,
    pub params: IndexMap<String, ParamTensor>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn from_model<F: Real>(
        model: &Model<F>,
        config: &RunConfig,
        ontology_hash: String,
        act_inventory: Vec<String>,
        epoch: usize,
        step: usize,
        dev_joint: f64,
        dev_slot: f64,
    ) -> Checkpoint {
        let params = model
            .params
            .values
            .iter()
            .map(|(name, value)| {
                (
                    name.clone(),
                    ParamTensor {
                        shape: value.shape().to_vec(),
                        data: value.iter().map(|&x| x.to_f64()).collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            config: config.clone(),
            ontology_hash,
            act_inventory,
            epoch,
            step,
            dev_joint,
            dev_slot,
            vocab: model.vocab.clone(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = serde_json::to_string(self)
            .map_err(|e| DstError::Checkpoint(format!("serialization: {e}")))?;
        let mut file = std::fs::File::create(path).map_err(|e| DstError::io(path, e))?;
        write!(file, "{CHECKPOINT_MAGIC}\n#version {CHECKPOINT_VERSION}\n{payload}\n")
            .map_err(|e| DstError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        let mut lines = text.splitn(3, '\n');
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(DstError::Checkpoint(format!(
                "{} is not a checkpoint file (missing {CHECKPOINT_MAGIC} header)",
                path.display()
            )));
        }
        let version_line = lines.next().unwrap_or("");
        let version: u32 = version_line
            .strip_prefix("#version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| {
                DstError::Checkpoint(format!("malformed version line {version_line:?}"))
            })?;
        if version != CHECKPOINT_VERSION {
            return Err(DstError::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let payload = lines.next().unwrap_or("");
        serde_json::from_str(payload)
            .map_err(|e| DstError::Checkpoint(format!("corrupt checkpoint payload: {e}")))
    }

    /// Re-partitions a freshly loaded ontology with this run's policy and
    /// verifies it hashes to the training-time value.
    pub fn partitioned_ontology(&self, ontology: &Ontology) -> Result<Ontology> {
        let mut partitioned = ontology.clone();
        partitioned.partition_slots(self.config.slot_policy)?;
        if partitioned.content_hash() != self.ontology_hash {
            return Err(DstError::Checkpoint(format!(
                "ontology hash mismatch: checkpoint was trained against {} but the \
                 provided ontology hashes to {}",
                self.ontology_hash,
                partitioned.content_hash()
            )));
        }
        Ok(partitioned)
    }

    /// Rebuilds the model. `ontology` must already be partitioned with this
    /// run's policy (see partitioned_ontology).
    pub fn to_model<F: Real>(&self, ontology: &Ontology) -> Result<Model<F>> {
        if ontology.content_hash() != self.ontology_hash {
            return Err(DstError::Checkpoint(format!(
                "ontology hash mismatch: checkpoint was trained against {} but the \
                 provided ontology hashes to {}",
                self.ontology_hash,
                ontology.content_hash()
            )));
        }
        let mut values: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        for (name, tensor) in &self.params {
            let array =
                ArrayD::from_shape_vec(tensor.shape.as_slice(), tensor.data.clone()).map_err(
                    |e| DstError::Checkpoint(format!("tensor {name} is corrupt: {e}")),
                )?;
            values.insert(name.clone(), array);
        }
        let expected = model_param_shapes(
            &self.config.embedding,
            &self.vocab,
            ontology.slot_count(),
            self.config.act_attention,
        );
        for (name, shape) in &expected {
            match values.get(name) {
                Some(v) if v.shape() == shape.as_slice() => {}
                Some(v) => {
                    return Err(DstError::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        v.shape()
                    )));
                }
                None => {
                    return Err(DstError::Checkpoint(format!("missing tensor {name}")));
                }
            }
        }
        if values.len() != expected.len() {
            return Err(DstError::Checkpoint(format!(
                "checkpoint has {} tensors, expected {}",
                values.len(),
                expected.len()
            )));
        }
        let store = ParamStore { values };
        Ok(Model {
            cfg: self.config.embedding.clone(),
            act_attention: self.config.act_attention,
            vocab: self.vocab.clone(),
            exact_dim: ontology.slot_count(),
            params: store.map_precision(),
        })
    }
}

/// Result of a training run: the best-dev checkpoint, the per-epoch metrics
/// log, and all ingestion warnings.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub warnings: Vec<Warning>,
}

/// Trains at the configured precision and returns the best-dev checkpoint.
pub fn train(
    config: &RunConfig,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    ontology: &Ontology,
) -> Result<TrainOutcome> {
    match config.precision {
        Precision::Bits32 => train_typed::<f32>(config, train_corpus, dev_corpus, ontology),
        Precision::Bits64 => train_typed::<f64>(config, train_corpus, dev_corpus, ontology),
    }
}

fn train_typed<F: Real>(
    config: &RunConfig,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    ontology: &Ontology,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut ontology = ontology.clone();
    ontology.partition_slots(config.slot_policy)?;
    let ontology_hash = ontology.content_hash();
    let mut sink = WarningSink::new();
    let train_examples = build_examples(train_corpus, &ontology, config.context_cap, &mut sink)?;
    let dev_examples = build_examples(dev_corpus, &ontology, config.context_cap, &mut sink)?;
    if train_examples.is_empty() {
        return Err(DstError::Corpus("no training examples".to_string()));
    }
    let inventory = &train_corpus.act_inventory;
    let aliases = default_aliases();
    let vocab = Vocab::build(train_corpus, &ontology);
    let mut model: Model<F> = Model::init(
        config.embedding.clone(),
        config.act_attention,
        vocab,
        &ontology,
        config.seed,
    )?;
    let mut optimizer: Adam<F> = Adam::new(config.learning_rate);
    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<(Checkpoint, usize)> = None;
    let mut step = 0usize;
    let mut out_of_steps = false;

    for epoch in 1..=config.max_epochs {
        let batches = make_batches(
            &train_examples,
            config.batch_size,
            config.seed.wrapping_add(epoch as u64),
        );
        let mut epoch_loss_sum = 0.0f64;
        for batch in &batches {
            let tape: Tape<F> = Tape::new();
            let vars = model.place(&tape);
            let refs: Vec<&TurnExample> =
                batch.indices.iter().map(|&i| &train_examples[i]).collect();
            let loss = {
                let enc = model.encoder(&tape, &vars);
                let sum = model.batch_loss(&tape, &enc, &vars, &refs, &ontology, inventory)?;
                match config.loss_reduction {
                    LossReduction::Sum => sum,
                    LossReduction::Mean => {
                        tape.scale(sum, F::from_f64(1.0 / refs.len() as f64))
                    }
                }
            };
            let loss_value = tape.scalar_value(loss).to_f64();
            if !loss_value.is_finite() {
                return Err(DstError::Diverged(format!(
                    "loss {loss_value} at epoch {epoch} step {step}"
                )));
            }
            epoch_loss_sum += match config.loss_reduction {
                LossReduction::Sum => loss_value,
                LossReduction::Mean => loss_value * refs.len() as f64,
            };
            let grads = tape.backward(loss);
            let mut grad_map: IndexMap<String, ArrayD<F>> = model
                .params
                .values
                .iter()
                .map(|(name, value)| {
                    (
                        name.clone(),
                        grads.get_or_zeros(vars[name], value.shape()),
                    )
                })
                .collect();
            clip_global_norm(&mut grad_map, config.clip_norm);
            optimizer.step(&mut model.params, &grad_map);
            step += 1;
            if config.max_steps.is_some_and(|max| step >= max) {
                out_of_steps = true;
                break;
            }
        }
        let (dev, _) = evaluate_examples(
            &model,
            &dev_examples,
            &ontology,
            inventory,
            config.max_len,
            &aliases,
        )?;
        metrics.push(EpochMetrics {
            epoch,
            step,
            train_loss: epoch_loss_sum / train_examples.len() as f64,
            dev_joint: dev.joint,
            dev_slot: dev.slot,
        });
        let improved = best
            .as_ref()
            .is_none_or(|(ckpt, _)| dev.joint > ckpt.dev_joint);
        if improved {
            let checkpoint = Checkpoint::from_model(
                &model,
                config,
                ontology_hash.clone(),
                inventory.clone(),
                epoch,
                step,
                dev.joint,
                dev.slot,
            );
            best = Some((checkpoint, epoch));
        } else if best
            .as_ref()
            .is_some_and(|(_, best_epoch)| epoch - best_epoch >= config.patience)
        {
            break;
        }
        if out_of_steps {
            break;
        }
    }
    let (checkpoint, _) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        warnings: sink.warnings().to_vec(),
    })
}

/// Per-tensor worst relative error between analytic and central-difference
/// gradients.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub instances: usize,
}

/// Checks analytic gradients of the full turn loss against central finite
/// differences at sampled coordinates of every parameter tensor.
///
/// Each coordinate is probed at `eps`, then at eps/10 and eps/100, keeping
/// the smallest error: a rectifier kink straddled by the widest probe
/// vanishes under a tighter one, while a genuine gradient bug stays O(1) at
/// every width.
pub fn gradient_check(
    model: &Model<f64>,
    examples: &[TurnExample],
    ontology: &Ontology,
    inventory: &[String],
    eps: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if examples.is_empty() {
        return Err(DstError::Model("gradient_check: no examples".to_string()));
    }
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: IndexMap<String, f64> =
        model.params.values.keys().map(|k| (k.clone(), 0.0)).collect();

    let loss_of = |m: &Model<f64>, ex: &TurnExample| -> Result<f64> {
        let tape: Tape<f64> = Tape::new();
        let vars = m.place(&tape);
        let enc = m.encoder(&tape, &vars);
        let fwd = m.forward_example(&enc, &vars, ex, ontology, inventory)?;
        Ok(tape.scalar_value(m.example_loss(&tape, &fwd, ex)?))
    };

    for example in examples {
        // analytic pass
        let tape: Tape<f64> = Tape::new();
        let vars = model.place(&tape);
        let analytic = {
            let enc = model.encoder(&tape, &vars);
            let fwd = model.forward_example(&enc, &vars, example, ontology, inventory)?;
            let loss = model.example_loss(&tape, &fwd, example)?;
            tape.backward(loss)
        };
        for (name, value) in &model.params.values {
            let grad = analytic.get_or_zeros(vars[name], value.shape());
            let len = value.len();
            for _ in 0..coords_per_tensor.min(len) {
                let flat = rng.random_range(0..len);
                let an = grad.as_slice().expect("standard layout")[flat];
                let mut best_err = f64::INFINITY;
                for probe_eps in [eps, eps / 10.0, eps / 100.0] {
                    let original = probe.params.values[name].as_slice().unwrap()[flat];
                    probe.params.values[name].as_slice_mut().unwrap()[flat] =
                        original + probe_eps;
                    let plus = loss_of(&probe, example)?;
                    probe.params.values[name].as_slice_mut().unwrap()[flat] =
                        original - probe_eps;
                    let minus = loss_of(&probe, example)?;
                    probe.params.values[name].as_slice_mut().unwrap()[flat] = original;
                    let fd = (plus - minus) / (2.0 * probe_eps);
                    let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
                    best_err = best_err.min(err);
                }
                let entry = worst.get_mut(name).unwrap();
                *entry = entry.max(best_err);
            }
        }
    }
    let entries: Vec<GradCheckEntry> = worst
        .into_iter()
        .map(|(name, max_rel_err)| GradCheckEntry { name, max_rel_err })
        .collect();
    let max_rel_err = entries.iter().fold(0.0f64, |a, e| a.max(e.max_rel_err));
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        instances: examples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_dialogues, LoadOptions};
    use crate::encoder::ProviderKind;
    use ndarray::arr1;
    use tempfile::tempdir;

    fn small_embedding() -> EmbeddingConfig {
        EmbeddingConfig {
            word_dim: 6,
            char_dim: 6,
            char_emb_dim: 4,
            role_dim: 4,
            provider: ProviderKind::TrainableLookup,
        }
    }

    fn cambridge() -> (Corpus, Ontology) {
        let mut sink = WarningSink::new();
        let ontology = Ontology::load("fixtures/cambridge/ontology.json".as_ref()).unwrap();
        let corpus = load_dialogues(
            "fixtures/cambridge/dialogues.json".as_ref(),
            &ontology,
            &LoadOptions::default(),
            &mut sink,
        )
        .unwrap();
        (corpus, ontology)
    }

    fn tiny_config() -> RunConfig {
        RunConfig {
            learning_rate: 0.003,
            batch_size: 2,
            max_epochs: 2,
            precision: Precision::Bits64,
            embedding: small_embedding(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_reproduce_published_settings() {
        let config = RunConfig::default();
        assert_eq!(config.learning_rate, 0.001);
        assert_eq!(config.batch_size, 24);
        assert_eq!(config.embedding.word_dim, 512);
        assert_eq!(config.embedding.char_dim, 100);
        assert_eq!(config.embedding.role_dim, 128);
        assert_eq!(config.slot_policy, SlotPolicy::Hybrid);
        assert!(config.act_attention);
        config.validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = tiny_config();
        let text = config.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(config, back);
        // partial files fill from defaults
        let partial = RunConfig::from_toml_str("learning_rate = 0.01\nprecision = 64\n").unwrap();
        assert_eq!(partial.learning_rate, 0.01);
        assert_eq!(partial.precision, Precision::Bits64);
        assert_eq!(partial.batch_size, 24);
        // unknown keys and bad values are rejected
        assert!(RunConfig::from_toml_str("not_a_field = 1\n").is_err());
        assert!(RunConfig::from_toml_str("precision = 16\n").is_err());
        assert!(RunConfig::from_toml_str("learning_rate = -1.0\n").is_err());
    }

    #[test]
    fn adam_matches_hand_computed_first_step() {
        let mut params: ParamStore<f64> = ParamStore {
            values: IndexMap::new(),
        };
        params
            .values
            .insert("w".to_string(), arr1(&[1.0, -2.0, 0.5]).into_dyn());
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), arr1(&[0.3, -0.1, 0.0]).into_dyn());
        let mut optimizer: Adam<f64> = Adam::new(0.01);
        optimizer.step(&mut params, &grads);
        // first step: mhat = g, vhat = g^2, update = lr * g / (|g| + eps)
        for (i, &g) in [0.3, -0.1, 0.0].iter().enumerate() {
            let expected = [1.0, -2.0, 0.5][i] - 0.01 * g / (f64::abs(g) + ADAM_EPSILON);
            let got = params.values["w"].as_slice().unwrap()[i];
            assert!((got - expected).abs() < 1e-10, "coord {i}: {got} vs {expected}");
        }
    }

    #[test]
    fn adam_second_step_applies_bias_correction() {
        let mut params: ParamStore<f64> = ParamStore {
            values: IndexMap::new(),
        };
        params.values.insert("w".to_string(), arr1(&[0.0]).into_dyn());
        let g1 = 0.4f64;
        let g2 = -0.2f64;
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), arr1(&[g1]).into_dyn());
        let mut optimizer: Adam<f64> = Adam::new(0.05);
        optimizer.step(&mut params, &grads);
        grads.insert("w".to_string(), arr1(&[g2]).into_dyn());
        optimizer.step(&mut params, &grads);
        // replay the update rule by hand
        let (b1, b2, eps, lr) = (ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, 0.05);
        let mut x = 0.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
        }
        let got = params.values["w"].as_slice().unwrap()[0];
        assert!((got - x).abs() < 1e-10);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        grads.insert("a".to_string(), arr1(&[3.0, 0.0]).into_dyn());
        grads.insert("b".to_string(), arr1(&[4.0]).into_dyn());
        let norm = clip_global_norm(&mut grads, 2.5);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = grads
            .values()
            .flat_map(|g| g.iter().map(|&x| x * x))
            .sum::<f64>()
            .sqrt();
        assert!((clipped - 2.5).abs() < 1e-12);
        // below the threshold nothing changes
        let mut small: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        small.insert("a".to_string(), arr1(&[0.3]).into_dyn());
        clip_global_norm(&mut small, 2.5);
        assert_eq!(small["a"].as_slice().unwrap()[0], 0.3);
    }

    #[test]
    fn training_runs_and_logs_metrics_per_epoch() {
        let (corpus, ontology) = cambridge();
        let outcome = train(&tiny_config(), &corpus, &corpus, &ontology).unwrap();
        assert_eq!(outcome.metrics.len(), 2);
        for (i, record) in outcome.metrics.iter().enumerate() {
            assert_eq!(record.epoch, i + 1);
            assert!(record.train_loss.is_finite());
            assert!((0.0..=1.0).contains(&record.dev_joint));
            assert!(record.dev_slot >= record.dev_joint);
        }
        // the retained checkpoint carries the best dev joint over epochs
        let best = outcome
            .metrics
            .iter()
            .map(|m| m.dev_joint)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(outcome.checkpoint.dev_joint, best);
        assert_eq!(outcome.checkpoint.act_inventory, corpus.act_inventory);
    }

    #[test]
    fn identical_seeds_produce_identical_loss_curves() {
        let (corpus, ontology) = cambridge();
        let config = tiny_config();
        let a = train(&config, &corpus, &corpus, &ontology).unwrap();
        let b = train(&config, &corpus, &corpus, &ontology).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        let mut other = config.clone();
        other.seed += 1;
        let c = train(&other, &corpus, &corpus, &ontology).unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn max_steps_halts_mid_epoch() {
        let (corpus, ontology) = cambridge();
        let config = RunConfig {
            max_steps: Some(1),
            max_epochs: 5,
            ..tiny_config()
        };
        let outcome = train(&config, &corpus, &corpus, &ontology).unwrap();
        assert_eq!(outcome.metrics.len(), 1);
        assert_eq!(outcome.metrics[0].step, 1);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (corpus, ontology) = cambridge();
        let outcome = train(&tiny_config(), &corpus, &corpus, &ontology).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        outcome.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(outcome.checkpoint.params, loaded.params);
        assert_eq!(outcome.checkpoint.ontology_hash, loaded.ontology_hash);
        // probe forward outputs are bit identical
        let partitioned = loaded.partitioned_ontology(&ontology).unwrap();
        let model_a: Model<f64> = outcome.checkpoint.to_model(&partitioned).unwrap();
        let model_b: Model<f64> = loaded.to_model(&partitioned).unwrap();
        let mut sink = WarningSink::new();
        let examples = build_examples(&corpus, &partitioned, 512, &mut sink).unwrap();
        for ex in &examples {
            let p_a = crate::evaluation::predict_turn(
                &model_a,
                ex,
                &partitioned,
                &corpus.act_inventory,
                10,
            )
            .unwrap();
            let p_b = crate::evaluation::predict_turn(
                &model_b,
                ex,
                &partitioned,
                &corpus.act_inventory,
                10,
            )
            .unwrap();
            assert_eq!(p_a, p_b);
        }
    }

    #[test]
    fn checkpoint_guards_reject_bad_loads() {
        let (corpus, ontology) = cambridge();
        let outcome = train(&tiny_config(), &corpus, &corpus, &ontology).unwrap();
        let dir = tempdir().unwrap();
        // wrong magic
        let not_ckpt = dir.path().join("not.ckpt");
        std::fs::write(&not_ckpt, "hello\n").unwrap();
        assert!(matches!(
            Checkpoint::load(&not_ckpt),
            Err(DstError::Checkpoint(_))
        ));
        // unsupported version
        let v2 = dir.path().join("v2.ckpt");
        std::fs::write(&v2, format!("{CHECKPOINT_MAGIC}\n#version 2\n{{}}\n")).unwrap();
        let err = Checkpoint::load(&v2).unwrap_err();
        assert!(err.to_string().contains("unsupported checkpoint version 2"));
        // corrupt payload
        let corrupt = dir.path().join("corrupt.ckpt");
        std::fs::write(
            &corrupt,
            format!("{CHECKPOINT_MAGIC}\n#version 1\nnot json\n"),
        )
        .unwrap();
        assert!(Checkpoint::load(&corrupt).is_err());
        // ontology hash mismatch: drop a slot and re-partition
        let mut other = ontology.clone();
        let dropped = other.slots.last().unwrap().clone();
        other.slots.retain(|k| k != &dropped);
        other.values.shift_remove(&dropped);
        other.partition_slots(SlotPolicy::Hybrid).unwrap();
        assert!(outcome.checkpoint.partitioned_ontology(&other).is_err());
        let err = outcome
            .checkpoint
            .to_model::<f64>(&other)
            .unwrap_err();
        assert!(err.to_string().contains("hash mismatch"));
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let (corpus, ontology) = cambridge();
        let config = RunConfig {
            learning_rate: f64::MAX / 1e3,
            max_epochs: 3,
            ..tiny_config()
        };
        match train(&config, &corpus, &corpus, &ontology) {
            Err(DstError::Diverged(msg)) => assert!(msg.contains("epoch")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gradient_check_passes_on_small_model() {
        let (corpus, ontology) = cambridge();
        let mut sink = WarningSink::new();
        let examples = build_examples(&corpus, &ontology, 512, &mut sink).unwrap();
        let model: Model<f64> = Model::init(
            small_embedding(),
            true,
            Vocab::build(&corpus, &ontology),
            &ontology,
            23,
        )
        .unwrap();
        let report = gradient_check(
            &model,
            &examples[..2],
            &ontology,
            &corpus.act_inventory,
            1e-3,
            2,
            99,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max relative error {}",
            report.max_rel_err
        );
        assert_eq!(report.entries.len(), model.params.values.len());
    }

    #[test]
    fn metrics_log_writes_one_json_line_per_epoch() {
        let records = vec![
            EpochMetrics {
                epoch: 1,
                step: 4,
                train_loss: 12.5,
                dev_joint: 0.25,
                dev_slot: 0.5,
            },
            EpochMetrics {
                epoch: 2,
                step: 8,
                train_loss: 9.0,
                dev_joint: 0.5,
                dev_slot: 0.75,
            },
        ];
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_metrics_jsonl(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let parsed: EpochMetrics = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(parsed, records[1]);
    }
}

