use std::collections::BTreeMap;

use crate::audio::{FeatureKind, FeatureMatrix, PhaseMatrix};
use crate::error::{Error, Result};

/// Features of one utterance, one matrix per feature kind. LPMS keeps its
/// phase so perturbed spectra can be turned back into audio.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Utterance {
    pub speaker: Option<String>,
    pub mfcc: Option<FeatureMatrix>,
    pub lpms: Option<FeatureMatrix>,
    pub phase: Option<PhaseMatrix>,
}

impl Utterance {
    pub fn features(&self, kind: FeatureKind) -> Option<&FeatureMatrix> {
        match kind {
            FeatureKind::Mfcc => self.mfcc.as_ref(),
            FeatureKind::Lpms => self.lpms.as_ref(),
        }
    }

    pub fn set_features(&mut self, feat: FeatureMatrix) {
        match feat.kind {
            FeatureKind::Mfcc => self.mfcc = Some(feat),
            FeatureKind::Lpms => self.lpms = Some(feat),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    pub utterances: BTreeMap<String, Utterance>,
}

impl FeatureStore {
    pub fn get(&self, id: &str) -> Result<&Utterance> {
        self.utterances
            .get(id)
            .ok_or_else(|| Error::arg(format!("utterance {id:?} is not in the feature store")))
    }

    pub fn features(&self, id: &str, kind: FeatureKind) -> Result<&FeatureMatrix> {
        self.get(id)?
            .features(kind)
            .ok_or_else(|| Error::arg(format!("utterance {id:?} has no {kind} features")))
    }

    pub fn phase(&self, id: &str) -> Result<&PhaseMatrix> {
        self.get(id)?
            .phase
            .as_ref()
            .ok_or_else(|| Error::arg(format!("utterance {id:?} has no stored phase")))
    }

    pub fn insert(&mut self, id: impl Into<String>, utt: Utterance) {
        self.utterances.insert(id.into(), utt);
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}
