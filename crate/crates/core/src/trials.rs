use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    /// Attack direction: push target scores down, nontarget scores up.
    pub fn k(self) -> f64 {
        match self {
            Label::Target => -1.0,
            Label::Nontarget => 1.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            other => Err(Error::arg(format!("unknown trial label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrialKey {
    pub enroll: String,
    pub test: String,
    pub label: Label,
}

/// `enroll_id test_id target|nontarget`, one trial per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialList {
    pub trials: Vec<TrialKey>,
}

impl TrialList {
    pub fn new(trials: Vec<TrialKey>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &trials {
            if !seen.insert((&t.enroll, &t.test, t.label)) {
                return Err(Error::arg(format!("duplicate trial {} {} {}", t.enroll, t.test, t.label)));
            }
        }
        Ok(TrialList { trials })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::arg(format!("trial line {} needs 3 fields: {line:?}", n + 1)));
            }
            trials.push(TrialKey {
                enroll: parts[0].to_string(),
                test: parts[1].to_string(),
                label: parts[2].parse()?,
            });
        }
        Self::new(trials)
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Every utterance id referenced, sorted.
    pub fn utterance_ids(&self) -> BTreeSet<&str> {
        self.trials
            .iter()
            .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
            .collect()
    }
}

impl fmt::Display for TrialList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.trials {
            writeln!(f, "{} {} {}", t.enroll, t.test, t.label)?;
        }
        Ok(())
    }
}
