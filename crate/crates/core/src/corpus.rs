//! Dialogue ingestion and supervision: per-turn contexts, act sequences,
//! exact-match features, and labels for both head families.
//!
//! All functions here are pure per-dialogue transforms; anything lossy or
//! surprising (dropped dialogues, unmatched gold values, truncated spans)
//! goes through the [`WarningSink`] rather than failing the run.

use crate::error::{DstError, Result};
use crate::ontology::{Ontology, SlotKey, SlotKind};
use crate::text::{canonicalize_value, tokenize, AliasMap, DONT_CARE_VALUE, NONE_VALUE};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

pub const DIALOGUE_SCHEMA_VERSION: u32 = 1;

/// Shipped value-alias table applied to gold values at ingestion.
pub fn default_aliases() -> AliasMap {
    serde_json::from_str(include_str!("../data/aliases.json"))
        .expect("bundled alias table is valid")
}

/// Speaker of a context token.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Role {
    Sys,
    User,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    /// Tokenized system utterance; empty at turn 1 when the user opens.
    pub system: Vec<String>,
    pub user: Vec<String>,
    pub system_acts: Vec<String>,
    /// Cumulative gold state with canonicalized values.
    pub gold_state: BTreeMap<SlotKey, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Turns where a slot set non-"none" at t-1 vanishes at t, violating the
    /// cumulative-state convention.
    pub fn cumulative_violations(&self) -> Vec<(usize, SlotKey)> {
        let mut bad = Vec::new();
        for t in 1..self.turns.len() {
            for (key, value) in &self.turns[t - 1].gold_state {
                if value != NONE_VALUE && !self.turns[t].gold_state.contains_key(key) {
                    bad.push((t + 1, key.clone()));
                }
            }
        }
        bad
    }
}

/// Loaded dialogue file: the act inventory plus all surviving dialogues.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub act_inventory: Vec<String>,
    pub dialogues: Vec<Dialogue>,
}

/// One flattened act occurrence: the act name and the 1-based turn it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActRef {
    pub name: String,
    pub turn: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum SpanType {
    Span,
    None,
    DontCare,
}

/// Supervision for one slot at one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Categorical {
        /// Index into the slot's OptionSet.
        value_index: usize,
    },
    NonCategorical {
        span_type: SpanType,
        /// Inclusive token bounds; present exactly when span_type is Span.
        span: Option<(usize, usize)>,
    },
}

/// One training/evaluation instance: everything the model sees for turn t.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnExample {
    pub dialogue_id: String,
    /// 1-based turn index.
    pub turn: usize,
    pub context: Vec<String>,
    pub roles: Vec<Role>,
    pub acts: Vec<ActRef>,
    pub labels: BTreeMap<SlotKey, Label>,
    /// Gold state for scoring, canonicalized, one entry per ontology slot.
    pub gold_state: BTreeMap<SlotKey, String>,
}

/// Line-delimited warning record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Warning {
    pub kind: String,
    pub dialogue_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    pub message: String,
}

/// Collects warnings during ingestion and label derivation.
#[derive(Default, Debug)]
pub struct WarningSink {
    pub warnings: Vec<Warning>,
}

impl WarningSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        kind: &str,
        dialogue_id: &str,
        turn: Option<usize>,
        slot: Option<&SlotKey>,
        message: String,
    ) {
        log::warn!("{kind} [{dialogue_id}]: {message}");
        self.warnings.push(Warning {
            kind: kind.to_string(),
            dialogue_id: dialogue_id.to_string(),
            turn,
            slot: slot.map(|s| s.to_string()),
            message,
        });
    }

    pub fn warnings(&self) -> &[Warning] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.warnings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.warnings.is_empty()
    }

    /// Appends all records to a JSON-lines file.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| DstError::io(path, e))?;
        for w in &self.warnings {
            let line = serde_json::to_string(w)
                .map_err(|e| DstError::Format(format!("warning record: {e}")))?;
            writeln!(file, "{line}").map_err(|e| DstError::io(path, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Strip domain qualifiers from act names ("Train-Request" stays "Request").
    pub strip_act_domains: bool,
    pub aliases: AliasMap,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            strip_act_domains: true,
            aliases: default_aliases(),
        }
    }
}

// ── on-disk schema ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DialogueFile {
    schema_version: u32,
    acts: Vec<String>,
    dialogues: Vec<DialogueRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    turns: Vec<TurnRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TurnRecord {
    #[serde(default)]
    system: String,
    user: String,
    #[serde(default)]
    system_acts: Vec<String>,
    #[serde(default)]
    state: BTreeMap<String, String>,
}

/// Loads a dialogue file, tokenizing utterances and canonicalizing gold values.
///
/// Dialogues touching domains absent from the ontology are dropped with a
/// warning. Act names outside the file's inventory are a hard error.
pub fn load_dialogues(
    path: &Path,
    ontology: &Ontology,
    options: &LoadOptions,
    sink: &mut WarningSink,
) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    dialogues_from_json(&text, ontology, options, sink)
}

pub fn dialogues_from_json(
    text: &str,
    ontology: &Ontology,
    options: &LoadOptions,
    sink: &mut WarningSink,
) -> Result<Corpus> {
    let file: DialogueFile = serde_json::from_str(text)
        .map_err(|e| DstError::Format(format!("dialogue file: {e}")))?;
    if file.schema_version != DIALOGUE_SCHEMA_VERSION {
        return Err(DstError::Format(format!(
            "dialogue schema_version {} unsupported (expected {})",
            file.schema_version, DIALOGUE_SCHEMA_VERSION
        )));
    }
    let mut dialogues = Vec::with_capacity(file.dialogues.len());
    'dialogues: for record in file.dialogues {
        let mut turns = Vec::with_capacity(record.turns.len());
        for (ti, turn) in record.turns.iter().enumerate() {
            let mut acts = Vec::with_capacity(turn.system_acts.len());
            for raw in &turn.system_acts {
                let name = normalize_act(raw, options.strip_act_domains);
                if !file.acts.iter().any(|a| a == &name) {
                    return Err(DstError::Corpus(format!(
                        "dialogue {}: act {raw:?} not in the file's act inventory",
                        record.id
                    )));
                }
                acts.push(name);
            }
            let mut gold_state = BTreeMap::new();
            for (raw_key, raw_value) in &turn.state {
                let key = SlotKey::parse(raw_key)?;
                if !ontology.domains.contains(&key.domain) {
                    sink.push(
                        "unsupported_domain",
                        &record.id,
                        Some(ti + 1),
                        Some(&key),
                        format!("domain {:?} not in ontology; dialogue dropped", key.domain),
                    );
                    continue 'dialogues;
                }
                if ontology.slot_index(&key).is_none() {
                    sink.push(
                        "unknown_slot",
                        &record.id,
                        Some(ti + 1),
                        Some(&key),
                        format!("slot {key} not in ontology; entry ignored"),
                    );
                    continue;
                }
                gold_state.insert(key, canonicalize_value(raw_value, &options.aliases));
            }
            turns.push(Turn {
                system: tokenize(&turn.system),
                user: tokenize(&turn.user),
                system_acts: acts,
                gold_state,
            });
        }
        let dialogue = Dialogue {
            id: record.id,
            turns,
        };
        for (turn, slot) in dialogue.cumulative_violations() {
            sink.push(
                "non_cumulative_state",
                &dialogue.id,
                Some(turn),
                Some(&slot),
                "slot value disappeared from the gold state".to_string(),
            );
        }
        dialogues.push(dialogue);
    }
    Ok(Corpus {
        act_inventory: file.acts,
        dialogues,
    })
}

fn normalize_act(raw: &str, strip_domain: bool) -> String {
    if strip_domain {
        if let Some((_, name)) = raw.split_once('-') {
            return name.to_string();
        }
    }
    raw.to_string()
}

/// Concatenated tokens of u_1^sys, u_1^usr, ..., u_t^sys, u_t^usr with per-token
/// speaker roles. `t` is 1-based.
pub fn build_context(dialogue: &Dialogue, t: usize) -> Result<(Vec<String>, Vec<Role>)> {
    check_turn_index(dialogue, t)?;
    let mut tokens = Vec::new();
    let mut roles = Vec::new();
    for turn in &dialogue.turns[..t] {
        tokens.extend(turn.system.iter().cloned());
        roles.extend(std::iter::repeat_n(Role::Sys, turn.system.len()));
        tokens.extend(turn.user.iter().cloned());
        roles.extend(std::iter::repeat_n(Role::User, turn.user.len()));
    }
    Ok((tokens, roles))
}

/// Flattened system-act names of turns 1..=t, each tagged with its turn.
pub fn build_act_sequence(dialogue: &Dialogue, t: usize) -> Result<Vec<ActRef>> {
    check_turn_index(dialogue, t)?;
    let mut acts = Vec::new();
    for (i, turn) in dialogue.turns[..t].iter().enumerate() {
        for name in &turn.system_acts {
            acts.push(ActRef {
                name: name.clone(),
                turn: i + 1,
            });
        }
    }
    Ok(acts)
}

fn check_turn_index(dialogue: &Dialogue, t: usize) -> Result<()> {
    if t == 0 || t > dialogue.turns.len() {
        return Err(DstError::Corpus(format!(
            "turn index {t} out of range for dialogue {} with {} turns",
            dialogue.id,
            dialogue.turns.len()
        )));
    }
    Ok(())
}

fn is_punct_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric() && c != '_')
}

/// All windows of `context` whose non-punctuation tokens equal the tokenized
/// value, bounded by non-punctuation tokens. Inclusive (start, end) pairs in
/// ascending start order.
pub fn value_occurrences(context: &[String], value: &str) -> Vec<(usize, usize)> {
    let target = tokenize(value);
    if target.is_empty() {
        return Vec::new();
    }
    let mut found = Vec::new();
    for start in 0..context.len() {
        if is_punct_token(&context[start]) || context[start] != target[0] {
            continue;
        }
        let mut ti = 1;
        let mut pos = start;
        let mut matched = true;
        while ti < target.len() {
            pos += 1;
            while pos < context.len() && is_punct_token(&context[pos]) {
                pos += 1;
            }
            if pos >= context.len() || context[pos] != target[ti] {
                matched = false;
                break;
            }
            ti += 1;
        }
        if matched {
            found.push((start, pos));
        }
    }
    found
}

/// Token bounds of the LAST occurrence of `value` in the context; the most
/// recent mention reflects the current goal. `value` must be canonical.
pub fn find_value_span(context: &[String], value: &str) -> Option<(usize, usize)> {
    value_occurrences(context, value).into_iter().next_back()
}

/// Binary matrix |context| × M: entry (i, m) = 1 iff token i falls inside an
/// occurrence of any listed value of slot m.
pub fn exact_match_features(context: &[String], ontology: &Ontology) -> Array2<u8> {
    let mut features = Array2::<u8>::zeros((context.len(), ontology.slot_count()));
    for (m, key) in ontology.slots.iter().enumerate() {
        for value in &ontology.values[key] {
            for (start, end) in value_occurrences(context, value) {
                for i in start..=end {
                    features[[i, m]] = 1;
                }
            }
        }
    }
    features
}

/// Labels for every ontology slot at turn t, derived from the cumulative gold
/// state and, for span slots, the turn's context.
pub fn derive_labels(
    dialogue: &Dialogue,
    t: usize,
    ontology: &Ontology,
    sink: &mut WarningSink,
) -> Result<BTreeMap<SlotKey, Label>> {
    check_turn_index(dialogue, t)?;
    let (context, _) = build_context(dialogue, t)?;
    let gold = &dialogue.turns[t - 1].gold_state;
    let mut labels = BTreeMap::new();
    for key in &ontology.slots {
        let value = gold
            .get(key)
            .map(String::as_str)
            .unwrap_or(NONE_VALUE);
        let label = match ontology.kind(key)? {
            SlotKind::Categorical => {
                let options = ontology.option_set(key)?;
                let value_index = match options.index_of(value) {
                    Some(i) => i,
                    None => {
                        sink.push(
                            "ontology_mismatch",
                            &dialogue.id,
                            Some(t),
                            Some(key),
                            format!("gold value {value:?} not in option set; labeled none"),
                        );
                        options.none_index()
                    }
                };
                Label::Categorical { value_index }
            }
            SlotKind::NonCategorical => match value {
                NONE_VALUE => Label::NonCategorical {
                    span_type: SpanType::None,
                    span: None,
                },
                DONT_CARE_VALUE => Label::NonCategorical {
                    span_type: SpanType::DontCare,
                    span: None,
                },
                _ => match find_value_span(&context, value) {
                    Some(span) => Label::NonCategorical {
                        span_type: SpanType::Span,
                        span: Some(span),
                    },
                    None => {
                        sink.push(
                            "span_not_found",
                            &dialogue.id,
                            Some(t),
                            Some(key),
                            format!("gold value {value:?} absent from context; labeled none"),
                        );
                        Label::NonCategorical {
                            span_type: SpanType::None,
                            span: None,
                        }
                    }
                },
            },
        };
        labels.insert(key.clone(), label);
    }
    Ok(labels)
}

/// Builds one example per (dialogue, turn), truncating contexts to the most
/// recent `context_cap` tokens. Span labels cut off by truncation are
/// relabeled NONE with a warning.
pub fn build_examples(
    corpus: &Corpus,
    ontology: &Ontology,
    context_cap: usize,
    sink: &mut WarningSink,
) -> Result<Vec<TurnExample>> {
    let mut examples = Vec::new();
    for dialogue in &corpus.dialogues {
        for t in 1..=dialogue.turns.len() {
            let (context, roles) = build_context(dialogue, t)?;
            let mut labels = derive_labels(dialogue, t, ontology, sink)?;
            let offset = context.len().saturating_sub(context_cap);
            let (context, roles) = if offset > 0 {
                (context[offset..].to_vec(), roles[offset..].to_vec())
            } else {
                (context, roles)
            };
            if offset > 0 {
                for (key, label) in labels.iter_mut() {
                    let Label::NonCategorical {
                        span_type: SpanType::Span,
                        span: Some((start, end)),
                    } = label
                    else {
                        continue;
                    };
                    if *start < offset {
                        sink.push(
                            "span_truncated",
                            &dialogue.id,
                            Some(t),
                            Some(key),
                            "gold span fell outside the context cap; labeled none".to_string(),
                        );
                        *label = Label::NonCategorical {
                            span_type: SpanType::None,
                            span: None,
                        };
                    } else {
                        *label = Label::NonCategorical {
                            span_type: SpanType::Span,
                            span: Some((*start - offset, *end - offset)),
                        };
                    }
                }
            }
            let mut gold_state = BTreeMap::new();
            for key in &ontology.slots {
                let value = dialogue.turns[t - 1]
                    .gold_state
                    .get(key)
                    .cloned()
                    .unwrap_or_else(|| NONE_VALUE.to_string());
                gold_state.insert(key.clone(), value);
            }
            examples.push(TurnExample {
                dialogue_id: dialogue.id.clone(),
                turn: t,
                context,
                roles,
                acts: build_act_sequence(dialogue, t)?,
                labels,
                gold_state,
            });
        }
    }
    Ok(examples)
}

/// One training batch: example indices plus padding masks (1 = real position).
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// batch × max context length in the batch.
    pub context_mask: Array2<u8>,
    /// batch × max act count in the batch.
    pub act_mask: Array2<u8>,
}

/// Deterministically shuffles examples by seed and chunks them into batches.
/// Every example appears exactly once.
pub fn make_batches(examples: &[TurnExample], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let max_ctx = chunk
                .iter()
                .map(|&i| examples[i].context.len())
                .max()
                .unwrap_or(0);
            let max_act = chunk
                .iter()
                .map(|&i| examples[i].acts.len())
                .max()
                .unwrap_or(0);
            let mut context_mask = Array2::<u8>::zeros((chunk.len(), max_ctx));
            let mut act_mask = Array2::<u8>::zeros((chunk.len(), max_act));
            for (row, &i) in chunk.iter().enumerate() {
                for c in 0..examples[i].context.len() {
                    context_mask[[row, c]] = 1;
                }
                for a in 0..examples[i].acts.len() {
                    act_mask[[row, a]] = 1;
                }
            }
            Batch {
                indices: chunk.to_vec(),
                context_mask,
                act_mask,
            }
        })
        .collect()
}

// ── raw-corpus conversion ────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ConvertOptions {
    /// Strip domain qualifiers from act names at conversion time, so the
    /// written inventory matches what [`LoadOptions`] produces on load.
    pub strip_act_domains: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            strip_act_domains: true,
        }
    }
}

/// Canonical dialogues produced by [`convert_multiwoz`], ready to serialize.
///
/// Every split taken from the same raw file shares one act inventory, so a
/// model trained on one split can score the others.
#[derive(Clone, Debug)]
pub struct ConvertedCorpus {
    acts: Vec<String>,
    records: Vec<DialogueRecord>,
}

impl ConvertedCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Removes and returns the dialogues whose ids appear in `ids`, keeping
    /// the shared act inventory on both sides. Order is preserved.
    pub fn take(&mut self, ids: &std::collections::BTreeSet<String>) -> ConvertedCorpus {
        let (taken, kept) = std::mem::take(&mut self.records)
            .into_iter()
            .partition(|r| ids.contains(&r.id));
        self.records = kept;
        ConvertedCorpus {
            acts: self.acts.clone(),
            records: taken,
        }
    }

    pub fn to_json(&self) -> String {
        let file = DialogueFile {
            schema_version: DIALOGUE_SCHEMA_VERSION,
            acts: self.acts.clone(),
            dialogues: self.records.clone(),
        };
        serde_json::to_string_pretty(&file).expect("dialogue file serialization cannot fail")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| DstError::io(path, e))
    }
}

/// Converts a raw MultiWOZ 2.1 `data.json` into the canonical dialogue schema.
///
/// Raw logs alternate user and system utterances starting with the user. The
/// belief state annotated on each system response becomes the gold state of
/// the turn that response closes; the acts of the system utterance that opens
/// a turn become that turn's `system_acts`. Book-section slots get a "book "
/// prefix; empty and "not mentioned" values are omitted. Dialogues with
/// structural problems are dropped through the sink, never silently.
pub fn convert_multiwoz(
    raw_json: &str,
    options: &ConvertOptions,
    sink: &mut WarningSink,
) -> Result<ConvertedCorpus> {
    let raw: serde_json::Value = serde_json::from_str(raw_json)
        .map_err(|e| DstError::Format(format!("raw corpus: {e}")))?;
    let Some(entries) = raw.as_object() else {
        return Err(DstError::Format(
            "raw corpus: top level must be an object keyed by dialogue id".to_string(),
        ));
    };
    let mut inventory = std::collections::BTreeSet::new();
    let mut records = Vec::with_capacity(entries.len());
    'dialogues: for (id, entry) in entries {
        let Some(log) = entry.get("log").and_then(|l| l.as_array()) else {
            sink.push("malformed_dialogue", id, None, None, "no log array".to_string());
            continue;
        };
        if log.is_empty() {
            sink.push("malformed_dialogue", id, None, None, "empty log".to_string());
            continue;
        }
        if log.len() % 2 == 1 {
            sink.push(
                "odd_log_length",
                id,
                None,
                None,
                "log ends on a user utterance; the unpaired entry is dropped".to_string(),
            );
        }
        let mut turns = Vec::with_capacity(log.len() / 2);
        let mut saw_acts = false;
        for t in 0..log.len() / 2 {
            let turn_no = t + 1;
            let user = match log[2 * t].get("text").and_then(|v| v.as_str()) {
                Some(text) => text.to_string(),
                None => {
                    sink.push(
                        "malformed_dialogue",
                        id,
                        Some(turn_no),
                        None,
                        "user entry has no text; dialogue dropped".to_string(),
                    );
                    continue 'dialogues;
                }
            };
            let (system, system_acts) = if t == 0 {
                (String::new(), Vec::new())
            } else {
                let prev_reply = &log[2 * t - 1];
                let system = prev_reply
                    .get("text")
                    .and_then(|v| v.as_str())
                    .unwrap_or_default()
                    .to_string();
                let (acts, annotated) = raw_acts(prev_reply, options.strip_act_domains);
                saw_acts |= annotated;
                (system, acts)
            };
            // the closing reply's acts open no later turn but still count
            // as annotation coverage
            let (_, annotated) = raw_acts(&log[2 * t + 1], options.strip_act_domains);
            saw_acts |= annotated;
            let state = raw_state(log[2 * t + 1].get("metadata"), id, turn_no, sink);
            for act in &system_acts {
                inventory.insert(act.clone());
            }
            turns.push(TurnRecord {
                system,
                user,
                system_acts,
                state,
            });
        }
        if !saw_acts {
            sink.push(
                "missing_acts",
                id,
                None,
                None,
                "no system turn carries a dialogue-act annotation".to_string(),
            );
        }
        records.push(DialogueRecord {
            id: id.clone(),
            turns,
        });
    }
    Ok(ConvertedCorpus {
        acts: inventory.into_iter().collect(),
        records,
    })
}

/// Act names of one raw log entry, deduplicated in file order, plus whether
/// the entry carried an annotation object at all.
fn raw_acts(entry: &serde_json::Value, strip_domain: bool) -> (Vec<String>, bool) {
    let Some(annotation) = entry.get("dialog_act").and_then(|a| a.as_object()) else {
        return (Vec::new(), false);
    };
    let mut acts = Vec::with_capacity(annotation.len());
    for name in annotation.keys() {
        let name = normalize_act(name, strip_domain);
        if !acts.contains(&name) {
            acts.push(name);
        }
    }
    (acts, true)
}

/// Flattens a raw belief-state annotation into "domain-slot" → value entries.
fn raw_state(
    metadata: Option<&serde_json::Value>,
    id: &str,
    turn: usize,
    sink: &mut WarningSink,
) -> BTreeMap<String, String> {
    let mut state = BTreeMap::new();
    let Some(domains) = metadata.and_then(|m| m.as_object()) else {
        return state;
    };
    for (domain, sections) in domains {
        for (section, prefix) in [("semi", ""), ("book", "book ")] {
            let Some(slots) = sections.get(section).and_then(|s| s.as_object()) else {
                continue;
            };
            for (slot, value) in slots {
                if slot == "booked" {
                    continue;
                }
                let Some(value) = value.as_str() else {
                    sink.push(
                        "non_string_value",
                        id,
                        Some(turn),
                        None,
                        format!("{domain}-{prefix}{slot} holds a non-string value; skipped"),
                    );
                    continue;
                };
                if value.is_empty() || value == "not mentioned" {
                    continue;
                }
                state.insert(
                    format!(
                        "{}-{}{}",
                        domain.to_lowercase(),
                        prefix,
                        slot.to_lowercase()
                    ),
                    value.to_string(),
                );
            }
        }
    }
    state
}

// ── prepared-example cache ───────────────────────────────────────────

pub const EXAMPLES_SCHEMA_VERSION: u32 = 1;

/// Cached [`TurnExample`]s with enough provenance to refuse a stale read.
#[derive(Serialize, Deserialize)]
struct ExamplesFile {
    schema_version: u32,
    ontology_hash: String,
    act_inventory: Vec<String>,
    examples: Vec<TurnExample>,
}

/// Writes prepared examples, recording the partitioned ontology's hash.
pub fn save_examples(
    path: &Path,
    examples: &[TurnExample],
    ontology: &Ontology,
    act_inventory: &[String],
) -> Result<()> {
    let file = ExamplesFile {
        schema_version: EXAMPLES_SCHEMA_VERSION,
        ontology_hash: ontology.content_hash(),
        act_inventory: act_inventory.to_vec(),
        examples: examples.to_vec(),
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| DstError::Format(format!("examples file: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| DstError::io(path, e))
}

/// Reads prepared examples, rejecting a file built against a different
/// ontology or partition.
pub fn load_examples(path: &Path, ontology: &Ontology) -> Result<(Vec<TurnExample>, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    let file: ExamplesFile =
        serde_json::from_str(&text).map_err(|e| DstError::Format(format!("examples file: {e}")))?;
    if file.schema_version != EXAMPLES_SCHEMA_VERSION {
        return Err(DstError::Format(format!(
            "examples schema_version {} unsupported (expected {})",
            file.schema_version, EXAMPLES_SCHEMA_VERSION
        )));
    }
    if file.ontology_hash != ontology.content_hash() {
        return Err(DstError::Corpus(format!(
            "examples were prepared against ontology {} but the provided ontology hashes to {}",
            file.ontology_hash,
            ontology.content_hash()
        )));
    }
    Ok((file.examples, file.act_inventory))
}

/// Detects whether a JSON file is a prepared-examples cache rather than a
/// canonical dialogue file, without deserializing the whole payload.
pub fn is_examples_file(text: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(text)
        .ok()
        .and_then(|v| v.get("examples").map(|e| e.is_array()))
        .unwrap_or(false)
}
