//! Turn-level prediction, joint and slot goal accuracy, ablation comparison,
//! and act-attention export.
//!
//! A turn prediction is total: every ontology slot receives exactly one value
//! string regardless of parameter values. Metrics canonicalize both sides
//! with the shared alias map before comparing, so raw span extractions and
//! canonical gold values meet on equal footing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::attention;
use crate::corpus::TurnExample;
use crate::encoder::Flavor;
use crate::error::{DstError, Result};
use crate::heads::decode_span;
use crate::model::{Model, SlotOutputs};
use crate::ontology::{Ontology, OptionSet, SlotKey};
use crate::tape::{Real, Tape};
use crate::text::{canonicalize_value, detokenize, AliasMap, DONT_CARE_VALUE, NONE_VALUE};
use crate::training::{train, Checkpoint, RunConfig, TrainOutcome};

/// Predicted dialogue state: one value string per ontology slot.
pub type DialogueState = BTreeMap<SlotKey, String>;

fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Option string at the argmax of the value distribution.
pub fn decode_categorical<F: Real>(p_v: &[F], options: &OptionSet) -> String {
    assert_eq!(
        p_v.len(),
        options.options.len(),
        "value distribution does not match the option set"
    );
    options.options[argmax(p_v)].clone()
}

/// Span-type argmax, then the extracted text for SPAN or the reserved value
/// for NONE / DONT_CARE.
pub fn decode_noncategorical<F: Real>(
    p_type: &[F],
    p_start: &[F],
    p_end: &[F],
    context: &[String],
    max_len: usize,
) -> String {
    match argmax(p_type) {
        0 => {
            let (s, e) = decode_span(p_start, p_end, max_len);
            detokenize(&context[s..=e])
        }
        1 => NONE_VALUE.to_string(),
        _ => DONT_CARE_VALUE.to_string(),
    }
}

/// Predicts the full state at one turn. Total over slots by construction.
pub fn predict_turn<F: Real>(
    model: &Model<F>,
    example: &TurnExample,
    ontology: &Ontology,
    inventory: &[String],
    max_len: usize,
) -> Result<DialogueState> {
    let tape = Tape::new();
    let vars = model.place(&tape);
    let enc = model.encoder(&tape, &vars);
    let forward = model.forward_example(&enc, &vars, example, ontology, inventory)?;
    let mut state = DialogueState::new();
    for slot in &forward.slots {
        let value = match &slot.outputs {
            SlotOutputs::Categorical { p_v } => {
                let options = ontology.option_set(&slot.key)?;
                decode_categorical(&tape.vec_value(*p_v), &options)
            }
            SlotOutputs::NonCategorical {
                p_type,
                p_start,
                p_end,
            } => decode_noncategorical(
                &tape.vec_value(*p_type),
                &tape.vec_value(*p_start),
                &tape.vec_value(*p_end),
                &example.context,
                max_len,
            ),
        };
        state.insert(slot.key.clone(), value);
    }
    Ok(state)
}

fn check_aligned(predictions: &[DialogueState], golds: &[DialogueState]) -> Result<()> {
    if predictions.len() != golds.len() {
        return Err(DstError::Evaluation(format!(
            "misaligned lists: {} predictions vs {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    for (i, (p, g)) in predictions.iter().zip(golds).enumerate() {
        if p.len() != g.len() || !p.keys().eq(g.keys()) {
            return Err(DstError::Evaluation(format!(
                "turn {i}: prediction and gold cover different slots"
            )));
        }
    }
    Ok(())
}

fn values_match(predicted: &str, gold: &str, aliases: &AliasMap) -> bool {
    canonicalize_value(predicted, aliases) == canonicalize_value(gold, aliases)
}

/// Fraction of turns whose slots all match. Empty input is vacuously 1.0.
pub fn joint_goal_accuracy(
    predictions: &[DialogueState],
    golds: &[DialogueState],
    aliases: &AliasMap,
) -> Result<f64> {
    check_aligned(predictions, golds)?;
    if predictions.is_empty() {
        return Ok(1.0);
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| {
            p.iter()
                .all(|(key, value)| values_match(value, &g[key], aliases))
        })
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Fraction of (turn, slot) cells that match. Empty input is vacuously 1.0.
pub fn slot_goal_accuracy(
    predictions: &[DialogueState],
    golds: &[DialogueState],
    aliases: &AliasMap,
) -> Result<f64> {
    check_aligned(predictions, golds)?;
    let mut cells = 0usize;
    let mut correct = 0usize;
    for (p, g) in predictions.iter().zip(golds) {
        for (key, value) in p {
            cells += 1;
            if values_match(value, &g[key], aliases) {
                correct += 1;
            }
        }
    }
    if cells == 0 {
        return Ok(1.0);
    }
    Ok(correct as f64 / cells as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub joint: f64,
    pub slot: f64,
    pub n_turns: usize,
}

impl Metrics {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| DstError::Evaluation(format!("metrics serialization: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| DstError::io(path, e))
    }
}

/// One line of the prediction dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub slot: String,
    pub predicted: String,
    pub gold: String,
}

pub fn write_predictions_jsonl(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| DstError::Evaluation(format!("prediction serialization: {e}")))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| DstError::io(path, e))
}

/// Predicts every example and scores it against the gold states.
pub fn evaluate_examples<F: Real>(
    model: &Model<F>,
    examples: &[TurnExample],
    ontology: &Ontology,
    inventory: &[String],
    max_len: usize,
    aliases: &AliasMap,
) -> Result<(Metrics, Vec<PredictionRecord>)> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    let mut records = Vec::new();
    for example in examples {
        let predicted = predict_turn(model, example, ontology, inventory, max_len)?;
        for (key, value) in &predicted {
            records.push(PredictionRecord {
                dialogue_id: example.dialogue_id.clone(),
                turn: example.turn,
                slot: key.to_string(),
                predicted: value.clone(),
                gold: example.gold_state[key].clone(),
            });
        }
        predictions.push(predicted);
        golds.push(example.gold_state.clone());
    }
    let metrics = Metrics {
        joint: joint_goal_accuracy(&predictions, &golds, aliases)?,
        slot: slot_goal_accuracy(&predictions, &golds, aliases)?,
        n_turns: examples.len(),
    };
    Ok((metrics, records))
}

/// Act-attention weights for a simulated act sequence: one distribution over
/// acts per slot, stored act-major (rows are acts, columns are slots, each
/// column sums to 1).
#[derive(Clone, Debug)]
pub struct AttentionExport {
    pub acts: Vec<String>,
    pub slots: Vec<String>,
    pub weights: Array2<f64>,
}

impl AttentionExport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("act");
        for slot in &self.slots {
            out.push('\t');
            out.push_str(slot);
        }
        out.push('\n');
        for (i, act) in self.acts.iter().enumerate() {
            out.push_str(act);
            for m in 0..self.slots.len() {
                out.push('\t');
                out.push_str(&format!("{:.6}", self.weights[[i, m]]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| DstError::io(path, e))?;
        file.write_all(self.to_tsv().as_bytes())
            .map_err(|e| DstError::io(path, e))
    }
}

/// Computes α2 over a simulated act sequence for every slot. There is no
/// dialogue context in this mode, so the act-attention query falls back to
/// the slot query q^d+q^s in place of the context summary Q^c it would
/// otherwise be.
pub fn export_attention<F: Real>(
    model: &Model<F>,
    act_names: &[String],
    ontology: &Ontology,
    inventory: &[String],
) -> Result<AttentionExport> {
    if act_names.is_empty() {
        return Err(DstError::Evaluation(
            "export_attention: empty act sequence".to_string(),
        ));
    }
    if !model.act_attention {
        return Err(DstError::Evaluation(
            "export_attention: model was trained without act attention".to_string(),
        ));
    }
    for name in act_names {
        if !inventory.iter().any(|a| a == name) {
            return Err(DstError::Evaluation(format!(
                "export_attention: act {name:?} not in the inventory"
            )));
        }
    }
    let tape = Tape::new();
    let vars = model.place(&tape);
    let enc = model.encoder(&tape, &vars);
    let rows: Vec<_> = act_names
        .iter()
        .map(|name| enc.phrase_vec(name, Flavor::Context))
        .collect();
    let w_act = tape.stack_rows(&rows);
    let mask = vec![1u8; act_names.len()];
    let mut weights = Array2::<f64>::zeros((act_names.len(), ontology.slot_count()));
    for (m, key) in ontology.slots.iter().enumerate() {
        let query = enc.embed_slot_query(key).query;
        let (alpha, empty) = attention(&tape, w_act, query, vars["attn.k2"], &mask);
        debug_assert!(!empty);
        for (i, v) in tape.vec_value(alpha).into_iter().enumerate() {
            weights[[i, m]] = v.to_f64();
        }
    }
    Ok(AttentionExport {
        acts: act_names.to_vec(),
        slots: ontology.slots.iter().map(|k| k.to_string()).collect(),
        weights,
    })
}

/// Side-by-side result of an act-attention ablation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub dev_joint_with: f64,
    pub dev_joint_without: f64,
    pub joint_delta: f64,
    pub dev_slot_with: f64,
    pub dev_slot_without: f64,
    pub slot_delta: f64,
}

/// Trains the act-aware and act-ablated configurations and reports the
/// dev-accuracy deltas. The two configs must differ only in `act_attention`.
pub fn ablation_run(
    with_acts: &RunConfig,
    without_acts: &RunConfig,
    train_corpus: &crate::corpus::Corpus,
    dev_corpus: &crate::corpus::Corpus,
    ontology: &Ontology,
) -> Result<(AblationReport, TrainOutcome, TrainOutcome)> {
    if !with_acts.act_attention || without_acts.act_attention {
        return Err(DstError::Config(
            "ablation_run: expected one act-aware and one act-ablated config".to_string(),
        ));
    }
    let mut normalized = without_acts.clone();
    normalized.act_attention = true;
    if normalized != *with_acts {
        return Err(DstError::Config(
            "ablation_run: configs differ beyond act_attention".to_string(),
        ));
    }
    let with_run = train(with_acts, train_corpus, dev_corpus, ontology)?;
    let without_run = train(without_acts, train_corpus, dev_corpus, ontology)?;
    let report = AblationReport {
        dev_joint_with: with_run.checkpoint.dev_joint,
        dev_joint_without: without_run.checkpoint.dev_joint,
        joint_delta: without_run.checkpoint.dev_joint - with_run.checkpoint.dev_joint,
        dev_slot_with: with_run.checkpoint.dev_slot,
        dev_slot_without: without_run.checkpoint.dev_slot,
        slot_delta: without_run.checkpoint.dev_slot - with_run.checkpoint.dev_slot,
    };
    Ok((report, with_run, without_run))
}

/// Rebuilds a model from a checkpoint and scores a dataset, guarding the
/// ontology hash.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    examples: &[TurnExample],
    ontology: &Ontology,
    inventory: &[String],
    aliases: &AliasMap,
) -> Result<(Metrics, Vec<PredictionRecord>)> {
    let model: Model<f64> = checkpoint.to_model(ontology)?;
    evaluate_examples(
        &model,
        examples,
        ontology,
        inventory,
        checkpoint.config.max_len,
        aliases,
    )
}

/// Per-slot accuracy breakdown from a prediction dump, grouped by slot key.
pub fn per_slot_accuracy(
    records: &[PredictionRecord],
    aliases: &AliasMap,
) -> IndexMap<String, f64> {
    let mut totals: IndexMap<String, (usize, usize)> = IndexMap::new();
    for record in records {
        let entry = totals.entry(record.slot.clone()).or_insert((0, 0));
        entry.1 += 1;
        if values_match(&record.predicted, &record.gold, aliases) {
            entry.0 += 1;
        }
    }
    totals
        .into_iter()
        .map(|(slot, (correct, total))| (slot, correct as f64 / total as f64))
        .collect()
}
