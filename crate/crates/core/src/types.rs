//! Shared domain types: identities, cross-modal samples, the dataset
//! container, and structural validation.

use serde::{Deserialize, Serialize};

use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Face,
    Voice,
}

impl Modality {
    pub fn opposite(self) -> Modality {
        match self {
            Modality::Face => Modality::Voice,
            Modality::Voice => Modality::Face,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Face => "face",
            Modality::Voice => "voice",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One person. Difficulty flags and the binary attribute are planted ground
/// truth carried at identity level; samples only reference the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub id: usize,
    pub split: Split,
    pub is_hard: bool,
    pub is_personalized: bool,
    /// Binary attribute recoverable from both modalities (gender analog).
    pub attribute: u8,
    pub latent: Vec<f64>,
    /// Equals `latent` unless the identity is personalized, in which case it
    /// is an independent draw (voice unrelated to face by construction).
    pub voice_latent: Vec<f64>,
}

/// One observation in one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub identity_id: usize,
    pub modality: Modality,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub identities: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub seed: u64,
    /// Present when the dataset came out of the generator; hand-written
    /// fixtures may omit it.
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub header: DatasetHeader,
    pub identities: Vec<Identity>,
    pub face_samples: Vec<Sample>,
    pub voice_samples: Vec<Sample>,
}

pub const RULE_IDS_DENSE_UNIQUE: &str = "identity ids are dense and unique";
pub const RULE_SPLIT_OVERLAP: &str = "splits partition identities with no overlap";
pub const RULE_OWNS_FACE: &str = "identity owns >= 1 face sample";
pub const RULE_OWNS_VOICE: &str = "identity owns >= 1 voice sample";
pub const RULE_VOICE_LATENT_TIED: &str =
    "non-personalized identity has voice_latent == latent";
pub const RULE_SAMPLE_IDENTITY_EXISTS: &str = "sample references an existing identity";
pub const RULE_FEATURE_SHAPE: &str = "sample has exactly obs_dim finite features";
pub const RULE_LATENT_SHAPE: &str = "identity latents have latent_dim finite entries";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub detail: String,
    pub identity: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, rule: &str, identity: Option<usize>, detail: String) {
        self.violations.push(Violation {
            rule: rule.to_string(),
            detail,
            identity,
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "dataset ok");
        }
        for v in &self.violations {
            writeln!(f, "violated [{}]: {}", v.rule, v.detail)?;
        }
        Ok(())
    }
}

/// Structural validation. Never aborts: every broken invariant is reported.
pub fn validate_dataset(ds: &SyntheticDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let m = ds.header.identities;

    // id density / uniqueness and split overlap
    let mut by_id: Vec<Vec<&Identity>> = vec![Vec::new(); m];
    let mut out_of_range = false;
    for ident in &ds.identities {
        if ident.id < m {
            by_id[ident.id].push(ident);
        } else {
            out_of_range = true;
            report.push(
                RULE_IDS_DENSE_UNIQUE,
                Some(ident.id),
                format!("identity id {} outside [0, {})", ident.id, m),
            );
        }
    }
    if !out_of_range && ds.identities.len() != m {
        report.push(
            RULE_IDS_DENSE_UNIQUE,
            None,
            format!("expected {} identity records, found {}", m, ds.identities.len()),
        );
    }
    for (id, records) in by_id.iter().enumerate() {
        match records.len() {
            0 => report.push(
                RULE_IDS_DENSE_UNIQUE,
                Some(id),
                format!("identity id {id} missing"),
            ),
            1 => {}
            _ => {
                let mut splits: Vec<Split> = records.iter().map(|r| r.split).collect();
                splits.sort();
                splits.dedup();
                if splits.len() > 1 {
                    let names: Vec<&str> = splits.iter().map(|s| s.as_str()).collect();
                    report.push(
                        RULE_SPLIT_OVERLAP,
                        Some(id),
                        format!("identity {} assigned to splits {}", id, names.join(" and ")),
                    );
                } else {
                    report.push(
                        RULE_IDS_DENSE_UNIQUE,
                        Some(id),
                        format!("identity id {} appears {} times", id, records.len()),
                    );
                }
            }
        }
    }

    // latent invariants
    for ident in &ds.identities {
        let l = ds.header.latent_dim;
        let shape_ok = ident.latent.len() == l
            && ident.voice_latent.len() == l
            && ident.latent.iter().all(|x| x.is_finite())
            && ident.voice_latent.iter().all(|x| x.is_finite());
        if !shape_ok {
            report.push(
                RULE_LATENT_SHAPE,
                Some(ident.id),
                format!("identity {} latent vectors malformed", ident.id),
            );
            continue;
        }
        if !ident.is_personalized && ident.latent != ident.voice_latent {
            report.push(
                RULE_VOICE_LATENT_TIED,
                Some(ident.id),
                format!("identity {} is not personalized but voice_latent differs", ident.id),
            );
        }
    }

    // sample ownership and shapes
    let mut face_counts = vec![0usize; m];
    let mut voice_counts = vec![0usize; m];
    for (samples, counts, kind) in [
        (&ds.face_samples, &mut face_counts, "face"),
        (&ds.voice_samples, &mut voice_counts, "voice"),
    ] {
        for s in samples.iter() {
            if s.identity_id >= m || by_id.get(s.identity_id).is_none_or(|r| r.is_empty()) {
                report.push(
                    RULE_SAMPLE_IDENTITY_EXISTS,
                    Some(s.identity_id),
                    format!("{} sample references unknown identity {}", kind, s.identity_id),
                );
            } else {
                counts[s.identity_id] += 1;
            }
            if s.features.len() != ds.header.obs_dim
                || s.features.iter().any(|x| !x.is_finite())
            {
                report.push(
                    RULE_FEATURE_SHAPE,
                    Some(s.identity_id),
                    format!(
                        "{} sample of identity {} has {} features (want {} finite)",
                        kind,
                        s.identity_id,
                        s.features.len(),
                        ds.header.obs_dim
                    ),
                );
            }
        }
    }
    for (id, records) in by_id.iter().enumerate() {
        if records.is_empty() {
            continue;
        }
        if face_counts[id] == 0 {
            report.push(
                RULE_OWNS_FACE,
                Some(id),
                format!("identity {id} owns no face sample"),
            );
        }
        if voice_counts[id] == 0 {
            report.push(
                RULE_OWNS_VOICE,
                Some(id),
                format!("identity {id} owns no voice sample"),
            );
        }
    }

    report
}

/// Lookup structure built once per dataset: per-identity sample pools and
/// per-split identity lists, all in deterministic (ascending id) order.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub face_by_identity: Vec<Vec<usize>>,
    pub voice_by_identity: Vec<Vec<usize>>,
    pub train_identities: Vec<usize>,
    pub validation_identities: Vec<usize>,
    pub test_identities: Vec<usize>,
}

impl DatasetIndex {
    pub fn build(ds: &SyntheticDataset) -> DatasetIndex {
        let m = ds.header.identities;
        let mut face_by_identity = vec![Vec::new(); m];
        for (i, s) in ds.face_samples.iter().enumerate() {
            face_by_identity[s.identity_id].push(i);
        }
        let mut voice_by_identity = vec![Vec::new(); m];
        for (i, s) in ds.voice_samples.iter().enumerate() {
            voice_by_identity[s.identity_id].push(i);
        }
        let mut train_identities = Vec::new();
        let mut validation_identities = Vec::new();
        let mut test_identities = Vec::new();
        for ident in &ds.identities {
            match ident.split {
                Split::Train => train_identities.push(ident.id),
                Split::Validation => validation_identities.push(ident.id),
                Split::Test => test_identities.push(ident.id),
            }
        }
        train_identities.sort_unstable();
        validation_identities.sort_unstable();
        test_identities.sort_unstable();
        DatasetIndex {
            face_by_identity,
            voice_by_identity,
            train_identities,
            validation_identities,
            test_identities,
        }
    }

    pub fn split_identities(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_identities,
            Split::Validation => &self.validation_identities,
            Split::Test => &self.test_identities,
        }
    }
}
