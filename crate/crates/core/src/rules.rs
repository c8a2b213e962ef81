//! Relation removability table.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a dependent relates to its governor with respect to deletion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationClass {
    /// Deleting the dependent leaves a grammatical sentence.
    Removable,
    /// Deleting the dependent breaks the sentence.
    Unremovable,
    /// Coordinated conjunct; grouped under a dummy node.
    Conjunct,
}

impl fmt::Display for RelationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationClass::Removable => "removable",
            RelationClass::Unremovable => "unremovable",
            RelationClass::Conjunct => "conjunct",
        })
    }
}

impl FromStr for RelationClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "removable" => Ok(RelationClass::Removable),
            "unremovable" => Ok(RelationClass::Unremovable),
            "conjunct" => Ok(RelationClass::Conjunct),
            other => Err(format!("unknown relation class {other:?}")),
        }
    }
}

const REMOVABLE: &[&str] = &[
    "amod",
    "advmod",
    "appos",
    "acl",
    "relcl",
    "acl:relcl",
    "advcl",
    "prep",
    "obl",
    "nmod",
    "nummod",
    "npadvmod",
    "parataxis",
    "vocative",
    "discourse",
    "dislocated",
];

const UNREMOVABLE: &[&str] = &[
    "nsubj",
    "nsubjpass",
    "nsubj:pass",
    "csubj",
    "obj",
    "dobj",
    "iobj",
    "pobj",
    "ccomp",
    "xcomp",
    "aux",
    "auxpass",
    "aux:pass",
    "cop",
    "det",
    "case",
    "mark",
    "neg",
    "compound",
    "fixed",
    "flat",
    "goeswith",
    "expl",
    "poss",
    "prt",
    "agent",
    "punct",
];

/// Maps dependency labels to a [`RelationClass`]. Lookup is total: labels
/// without an entry resolve to `default_class`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovabilityRuleTable {
    entries: BTreeMap<String, RelationClass>,
    default_class: RelationClass,
}

impl Default for RemovabilityRuleTable {
    /// Ships both spaCy-style and UD v2 labels. Unknown relations are
    /// unremovable so they merge upward.
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        for l in REMOVABLE {
            entries.insert(l.to_string(), RelationClass::Removable);
        }
        for l in UNREMOVABLE {
            entries.insert(l.to_string(), RelationClass::Unremovable);
        }
        entries.insert("conj".to_string(), RelationClass::Conjunct);
        RemovabilityRuleTable {
            entries,
            default_class: RelationClass::Unremovable,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuleFileError {
    #[error("line {line}: expected `label = class`")]
    Syntax { line: usize },
    #[error("line {line}: {message}")]
    BadClass { line: usize, message: String },
    #[error("missing required `default = ...` entry")]
    MissingDefault,
    #[error("`conj` must map to conjunct")]
    ConjNotConjunct,
}

impl RemovabilityRuleTable {
    pub fn new(default_class: RelationClass) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("conj".to_string(), RelationClass::Conjunct);
        RemovabilityRuleTable {
            entries,
            default_class,
        }
    }

    pub fn with(mut self, label: &str, class: RelationClass) -> Self {
        self.insert(label, class);
        self
    }

    pub fn insert(&mut self, label: &str, class: RelationClass) {
        self.entries.insert(label.to_ascii_lowercase(), class);
    }

    pub fn default_class(&self) -> RelationClass {
        self.default_class
    }

    /// Resolves a label. Matching is case-insensitive and falls back to the
    /// universal part of a subtyped label (`nmod:poss` -> `nmod`) before the
    /// default.
    pub fn classify(&self, deprel: &str) -> RelationClass {
        let label = deprel.to_ascii_lowercase();
        if let Some(c) = self.entries.get(&label) {
            return *c;
        }
        if let Some((base, _)) = label.split_once(':') {
            if let Some(c) = self.entries.get(base) {
                return *c;
            }
        }
        self.default_class
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, RelationClass)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Parses the `label = class` rule file format. `#` starts a comment and a
    /// `default = ...` line is mandatory.
    pub fn parse(src: &str) -> Result<Self, RuleFileError> {
        let mut entries = BTreeMap::new();
        let mut default_class = None;
        for (i, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(RuleFileError::Syntax { line: i + 1 })?;
            let key = k.trim().to_ascii_lowercase();
            if key.is_empty() {
                return Err(RuleFileError::Syntax { line: i + 1 });
            }
            let class = v
                .parse::<RelationClass>()
                .map_err(|message| RuleFileError::BadClass {
                    line: i + 1,
                    message,
                })?;
            if key == "default" {
                default_class = Some(class);
            } else {
                entries.insert(key, class);
            }
        }
        let default_class = default_class.ok_or(RuleFileError::MissingDefault)?;
        match entries.get("conj") {
            None => {
                entries.insert("conj".to_string(), RelationClass::Conjunct);
            }
            Some(RelationClass::Conjunct) => {}
            Some(_) => return Err(RuleFileError::ConjNotConjunct),
        }
        Ok(RemovabilityRuleTable {
            entries,
            default_class,
        })
    }

    /// Inverse of [`RemovabilityRuleTable::parse`].
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# deprel = removable|unremovable|conjunct\n");
        out.push_str(&format!("default = {}\n", self.default_class));
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
