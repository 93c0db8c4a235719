//! Domain ontology: slots, value lists, categorical / non-categorical
//! partition, and per-slot option sets.
//!
//! The ontology is immutable after load. Value order is preserved from the
//! file because option indices are a stable contract shared by labels,
//! checkpoints and predictions.

use crate::error::{DstError, Result};
use crate::text::{canonicalize_value, looks_numeric_or_time, AliasMap, DONT_CARE_VALUE, NONE_VALUE};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

pub const ONTOLOGY_SCHEMA_VERSION: u32 = 1;

/// Slot names treated as number/time slots under [`SlotPolicy::Hybrid`].
pub const HYBRID_NON_CATEGORICAL_NAMES: &[&str] = &[
    "leaveat",
    "arriveby",
    "book time",
    "book people",
    "book stay",
    "stars",
];

/// Fraction of a slot's values that must parse as numbers or clock times for
/// the statistical hybrid fallback to mark it non-categorical.
pub const HYBRID_NUMERIC_FRACTION: f64 = 0.9;

/// A (domain, slot) pair. Serialized as "domain-slot".
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct SlotKey {
    pub domain: String,
    pub slot: String,
}

impl SlotKey {
    /// The domain must not contain '-', or the serialized form is ambiguous.
    pub fn new(domain: impl Into<String>, slot: impl Into<String>) -> Self {
        SlotKey {
            domain: domain.into(),
            slot: slot.into(),
        }
    }

    /// Parses "domain-slot"; the domain is everything before the first '-'.
    pub fn parse(key: &str) -> Result<Self> {
        let Some((domain, slot)) = key.split_once('-') else {
            return Err(DstError::Ontology(format!(
                "slot key {key:?} is not of the form \"domain-slot\""
            )));
        };
        if domain.is_empty() || slot.is_empty() {
            return Err(DstError::Ontology(format!(
                "slot key {key:?} has an empty domain or slot name"
            )));
        }
        Ok(SlotKey::new(domain, slot))
    }
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.domain, self.slot)
    }
}

impl From<SlotKey> for String {
    fn from(key: SlotKey) -> String {
        key.to_string()
    }
}

impl TryFrom<String> for SlotKey {
    type Error = DstError;

    fn try_from(raw: String) -> Result<SlotKey> {
        SlotKey::parse(&raw)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum SlotKind {
    Categorical,
    NonCategorical,
}

/// How slots are split into categorical and non-categorical.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotPolicy {
    AllCategorical,
    AllNonCategorical,
    Hybrid,
}

impl fmt::Display for SlotPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SlotPolicy::AllCategorical => "all_categorical",
            SlotPolicy::AllNonCategorical => "all_non_categorical",
            SlotPolicy::Hybrid => "hybrid",
        };
        f.write_str(s)
    }
}

/// The candidate answers for one slot.
///
/// Categorical: the value list followed by "none", "dont_care" (length N+2).
/// Non-categorical: exactly ["span", "none", "dont_care"].
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OptionSet {
    pub slot: SlotKey,
    pub kind: SlotKind,
    pub options: Vec<String>,
}

impl OptionSet {
    /// Index of an option string, if present.
    pub fn index_of(&self, option: &str) -> Option<usize> {
        self.options.iter().position(|o| o == option)
    }

    pub fn none_index(&self) -> usize {
        self.options.len() - 2
    }

    pub fn dont_care_index(&self) -> usize {
        self.options.len() - 1
    }
}

/// On-disk ontology document.
#[derive(Serialize, Deserialize)]
struct OntologyFile {
    schema_version: u32,
    values: IndexMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    non_categorical: BTreeSet<String>,
}

#[derive(Clone, PartialEq, Debug)]
pub struct Ontology {
    /// Domain names in first-appearance order.
    pub domains: Vec<String>,
    /// Slot keys in file order. This order defines slot indices everywhere.
    pub slots: Vec<SlotKey>,
    /// Canonicalized value lists in file order, keyed in file order.
    pub values: IndexMap<SlotKey, Vec<String>>,
    /// Partition in effect; set by [`Ontology::partition_slots`]. Fresh loads
    /// carry the hybrid partition.
    pub partition: IndexMap<SlotKey, SlotKind>,
    /// Policy the current partition was derived from.
    pub policy: SlotPolicy,
    /// Slots the file pins as non-categorical under the hybrid policy.
    /// Entries are "domain-slot" keys or bare slot names.
    pub non_categorical_overrides: BTreeSet<String>,
}

impl Ontology {
    /// Loads and validates an ontology file, applying the hybrid partition.
    pub fn load(path: &Path) -> Result<Ontology> {
        let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Ontology> {
        let file: OntologyFile = serde_json::from_str(text)
            .map_err(|e| DstError::Format(format!("ontology file: {e}")))?;
        if file.schema_version != ONTOLOGY_SCHEMA_VERSION {
            return Err(DstError::Format(format!(
                "ontology schema_version {} unsupported (expected {})",
                file.schema_version, ONTOLOGY_SCHEMA_VERSION
            )));
        }
        let aliases = AliasMap::new();
        let mut domains: Vec<String> = Vec::new();
        let mut slots: Vec<SlotKey> = Vec::new();
        let mut values: IndexMap<SlotKey, Vec<String>> = IndexMap::new();
        for (raw_key, raw_values) in &file.values {
            let key = SlotKey::parse(raw_key)?;
            if values.contains_key(&key) {
                return Err(DstError::Ontology(format!("duplicate slot key {key}")));
            }
            if !domains.contains(&key.domain) {
                domains.push(key.domain.clone());
            }
            let mut canon: Vec<String> = Vec::with_capacity(raw_values.len());
            for raw in raw_values {
                let v = canonicalize_value(raw, &aliases);
                if v == NONE_VALUE || v == DONT_CARE_VALUE {
                    return Err(DstError::Ontology(format!(
                        "slot {key} lists reserved value {raw:?}"
                    )));
                }
                if canon.contains(&v) {
                    return Err(DstError::Ontology(format!(
                        "slot {key} lists duplicate value {v:?}"
                    )));
                }
                canon.push(v);
            }
            slots.push(key.clone());
            values.insert(key, canon);
        }
        if slots.is_empty() {
            return Err(DstError::Ontology("ontology declares no slots".to_string()));
        }
        let mut ontology = Ontology {
            domains,
            slots,
            values,
            partition: IndexMap::new(),
            policy: SlotPolicy::Hybrid,
            non_categorical_overrides: file.non_categorical,
        };
        ontology.partition_slots(SlotPolicy::Hybrid)?;
        Ok(ontology)
    }

    /// Serializes back to the file format. Round-trips with [`Ontology::from_json`].
    pub fn to_json(&self) -> String {
        let file = OntologyFile {
            schema_version: ONTOLOGY_SCHEMA_VERSION,
            values: self
                .values
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            non_categorical: self.non_categorical_overrides.clone(),
        };
        serde_json::to_string_pretty(&file).expect("ontology serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| DstError::io(path, e))
    }

    /// Number of (domain, slot) pairs.
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Position of a slot in the global slot order.
    pub fn slot_index(&self, key: &SlotKey) -> Option<usize> {
        self.slots.iter().position(|k| k == key)
    }

    fn hybrid_kind(&self, key: &SlotKey, vals: &[String]) -> SlotKind {
        let overridden = self.non_categorical_overrides.contains(&key.to_string())
            || self.non_categorical_overrides.contains(&key.slot);
        if overridden || HYBRID_NON_CATEGORICAL_NAMES.contains(&key.slot.as_str()) {
            return SlotKind::NonCategorical;
        }
        if vals.is_empty() {
            // a slot without a value list cannot be classified
            return SlotKind::NonCategorical;
        }
        let numeric = vals.iter().filter(|v| looks_numeric_or_time(v)).count();
        if (numeric as f64) / (vals.len() as f64) >= HYBRID_NUMERIC_FRACTION {
            SlotKind::NonCategorical
        } else {
            SlotKind::Categorical
        }
    }

    /// Recomputes the partition map under `policy`.
    ///
    /// Fails only when the policy would make a slot with an empty value list
    /// categorical, which the categorical head cannot represent.
    pub fn partition_slots(&mut self, policy: SlotPolicy) -> Result<()> {
        let mut partition = IndexMap::with_capacity(self.slots.len());
        for key in &self.slots {
            let vals = &self.values[key];
            let kind = match policy {
                SlotPolicy::AllCategorical => {
                    if vals.is_empty() {
                        return Err(DstError::Ontology(format!(
                            "slot {key} has no values; cannot be categorical"
                        )));
                    }
                    SlotKind::Categorical
                }
                SlotPolicy::AllNonCategorical => SlotKind::NonCategorical,
                SlotPolicy::Hybrid => self.hybrid_kind(key, vals),
            };
            partition.insert(key.clone(), kind);
        }
        self.partition = partition;
        self.policy = policy;
        Ok(())
    }

    pub fn kind(&self, key: &SlotKey) -> Result<SlotKind> {
        self.partition
            .get(key)
            .copied()
            .ok_or_else(|| DstError::Ontology(format!("unknown slot {key}")))
    }

    /// Builds the option set for one slot under the current partition.
    pub fn option_set(&self, key: &SlotKey) -> Result<OptionSet> {
        let kind = self.kind(key)?;
        let options = match kind {
            SlotKind::Categorical => {
                let mut opts = self.values[key].clone();
                opts.push(NONE_VALUE.to_string());
                opts.push(DONT_CARE_VALUE.to_string());
                opts
            }
            SlotKind::NonCategorical => vec![
                "span".to_string(),
                NONE_VALUE.to_string(),
                DONT_CARE_VALUE.to_string(),
            ],
        };
        Ok(OptionSet {
            slot: key.clone(),
            kind,
            options,
        })
    }

    /// SHA-256 of the serialized ontology plus the active partition.
    ///
    /// Checkpoints embed this hash; a mismatch means slot or option indices
    /// would no longer line up with the stored parameters.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        hasher.update(b"\npartition:");
        for (key, kind) in &self.partition {
            hasher.update(key.to_string().as_bytes());
            hasher.update(match kind {
                SlotKind::Categorical => b"=c;".as_slice(),
                SlotKind::NonCategorical => b"=n;".as_slice(),
            });
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every distinct canonical value string, used for exact-match features.
    pub fn all_values(&self) -> BTreeSet<&str> {
        self.values
            .values()
            .flat_map(|vs| vs.iter().map(String::as_str))
            .collect()
    }
}
