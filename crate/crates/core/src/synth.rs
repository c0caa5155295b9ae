//! Synthetic cross-modal dataset generator.
//!
//! Each identity draws a latent vector; two fixed random projections map
//! latents to face and voice observations with per-identity Gaussian noise.
//! Hard identities get a larger noise scale (difficult but learnable);
//! personalized identities get an independent voice latent (voice unrelated
//! to face, unlearnable by construction). The binary attribute is the sign
//! of the first latent coordinate, so it is recoverable from both modalities
//! for non-personalized identities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::types::{DatasetHeader, Identity, Modality, Sample, Split, SyntheticDataset};

/// Split proportions: train 924 : validation 112 : test 189.
const SPLIT_WEIGHTS: [(Split, u64); 3] = [
    (Split::Train, 924),
    (Split::Validation, 112),
    (Split::Test, 189),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub identities: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub samples_per_identity: usize,
    pub noise_easy: f64,
    pub noise_hard: f64,
    pub frac_hard: f64,
    pub frac_personalized: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 200,
            latent_dim: 16,
            obs_dim: 64,
            samples_per_identity: 20,
            noise_easy: 0.15,
            noise_hard: 0.6,
            frac_hard: 0.2,
            frac_personalized: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("split {0:?} would hold zero identities (m = {1})")]
    EmptySplit(Split, usize),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.identities == 0 || self.latent_dim == 0 || self.obs_dim == 0 {
            return bad("identities, latent_dim and obs_dim must be >= 1".into());
        }
        if self.samples_per_identity == 0 {
            return bad("samples_per_identity must be >= 1".into());
        }
        if !(self.noise_easy > 0.0) || !(self.noise_hard > self.noise_easy) {
            return bad(format!(
                "need noise_hard > noise_easy > 0, got {} and {}",
                self.noise_hard, self.noise_easy
            ));
        }
        for (name, v) in [("frac_hard", self.frac_hard), ("frac_personalized", self.frac_personalized)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        if self.frac_hard + self.frac_personalized > 1.0 {
            return bad(format!(
                "frac_hard + frac_personalized must be <= 1, got {}",
                self.frac_hard + self.frac_personalized
            ));
        }
        Ok(())
    }
}

use crate::reweight::floor_count;

/// Split sizes by largest remainder over the 924:112:189 proportions.
pub fn split_counts(m: usize) -> [(Split, usize); 3] {
    let total: u64 = SPLIT_WEIGHTS.iter().map(|(_, w)| w).sum();
    let mut counts = [(Split::Train, 0usize); 3];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(3);
    let mut assigned = 0usize;
    for (i, (split, w)) in SPLIT_WEIGHTS.iter().enumerate() {
        let exact = m as f64 * *w as f64 / total as f64;
        let base = exact.floor() as usize;
        counts[i] = (*split, base);
        remainders.push((i, exact - base as f64));
        assigned += base;
    }
    // hand out the leftover identities to the largest remainders;
    // ties resolved by split order (train, validation, test)
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut leftover = m - assigned;
    for (i, _) in remainders {
        if leftover == 0 {
            break;
        }
        counts[i].1 += 1;
        leftover -= 1;
    }
    counts
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticDataset, SynthError> {
    config.validate()?;
    let m = config.identities;
    let l = config.latent_dim;
    let d = config.obs_dim;

    let counts = split_counts(m);
    for (split, count) in counts {
        if count == 0 {
            return Err(SynthError::EmptySplit(split, m));
        }
    }

    let root = Rng::new(config.seed);

    // fixed projections, one per modality, drawn once per dataset;
    // entries scaled so observation coordinates have roughly unit variance
    let mut proj_rng = root.stream("projections");
    let scale = 1.0 / (l as f64).sqrt();
    let mut draw_projection = || {
        let mut p = vec![0.0; d * l];
        proj_rng.fill_normal(&mut p);
        for x in &mut p {
            *x *= scale;
        }
        p
    };
    let proj_face = draw_projection();
    let proj_voice = draw_projection();
    let project = |proj: &[f64], z: &[f64]| -> Vec<f64> {
        proj.chunks_exact(l).map(|row| crate::mat::dot(row, z)).collect()
    };

    // difficulty flags: exact floor counts land on shuffled identities,
    // remainders stay easy
    let n_hard = floor_count(config.frac_hard, m);
    let n_pers = floor_count(config.frac_personalized, m);
    let mut flag_order: Vec<usize> = (0..m).collect();
    root.stream("flags").shuffle(&mut flag_order);
    let mut is_hard = vec![false; m];
    let mut is_personalized = vec![false; m];
    for &id in &flag_order[..n_hard] {
        is_hard[id] = true;
    }
    for &id in &flag_order[n_hard..n_hard + n_pers] {
        is_personalized[id] = true;
    }

    // split assignment
    let mut split_order: Vec<usize> = (0..m).collect();
    root.stream("splits").shuffle(&mut split_order);
    let mut split_of = vec![Split::Train; m];
    let mut cursor = 0usize;
    for (split, count) in counts {
        for &id in &split_order[cursor..cursor + count] {
            split_of[id] = split;
        }
        cursor += count;
    }

    let mut latent_rng = root.stream("latents");
    let mut noise_rng = root.stream("noise");

    let mut identities = Vec::with_capacity(m);
    let mut face_samples = Vec::with_capacity(m * config.samples_per_identity);
    let mut voice_samples = Vec::with_capacity(m * config.samples_per_identity);

    for id in 0..m {
        let mut latent = vec![0.0; l];
        latent_rng.fill_normal(&mut latent);
        let voice_latent = if is_personalized[id] {
            let mut vl = vec![0.0; l];
            latent_rng.fill_normal(&mut vl);
            vl
        } else {
            latent.clone()
        };
        let attribute = u8::from(latent[0] >= 0.0);
        let sigma = if is_hard[id] { config.noise_hard } else { config.noise_easy };

        let face_mean = project(&proj_face, &latent);
        let voice_mean = project(&proj_voice, &voice_latent);
        for _ in 0..config.samples_per_identity {
            let mut f = face_mean.clone();
            for x in &mut f {
                *x += sigma * noise_rng.next_normal();
            }
            face_samples.push(Sample {
                identity_id: id,
                modality: Modality::Face,
                features: f,
            });
            let mut v = voice_mean.clone();
            for x in &mut v {
                *x += sigma * noise_rng.next_normal();
            }
            voice_samples.push(Sample {
                identity_id: id,
                modality: Modality::Voice,
                features: v,
            });
        }

        identities.push(Identity {
            id,
            split: split_of[id],
            is_hard: is_hard[id],
            is_personalized: is_personalized[id],
            attribute,
            latent,
            voice_latent,
        });
    }

    Ok(SyntheticDataset {
        header: DatasetHeader {
            identities: m,
            latent_dim: l,
            obs_dim: d,
            seed: config.seed,
            synth: Some(*config),
        },
        identities,
        face_samples,
        voice_samples,
    })
}
