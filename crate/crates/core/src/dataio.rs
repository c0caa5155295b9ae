//! Dataset file formats.
//!
//! Binary format (`VFDS0001` magic), all integers and floats little-endian:
//!
//! ```text
//! magic           8 bytes  "VFDS0001"
//! m, latent_dim, obs_dim, seed            4 x u64
//! has_synth       u8
//!   if 1: samples_per_identity u64,
//!         noise_easy, noise_hard, frac_hard, frac_personalized  4 x f64
//! identity records, m x:
//!   id u64, split u8 (0/1/2), is_hard u8, is_personalized u8, attribute u8,
//!   latent f64 x latent_dim, voice_latent f64 x latent_dim
//! face_count u64;  face samples:  identity_id u64, features f64 x obs_dim
//! voice_count u64; voice samples: identity_id u64, features f64 x obs_dim
//! ```
//!
//! A text manifest variant (one comma-separated record per line) is accepted
//! for hand-written fixtures; `read_dataset` dispatches on the magic bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::synth::SynthConfig;
use crate::types::{DatasetHeader, Identity, Modality, Sample, Split, SyntheticDataset};

pub const DATASET_MAGIC: &[u8; 8] = b"VFDS0001";

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a dataset file")]
    BadMagic,
    #[error("malformed dataset file: {0}")]
    Malformed(String),
    #[error("manifest line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for &v in vs {
        put_f64(w, v)?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64, DataIoError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn get_f64(r: &mut impl Read) -> Result<f64, DataIoError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn get_u8(r: &mut impl Read) -> Result<u8, DataIoError> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, DataIoError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(get_f64(r)?);
    }
    Ok(out)
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Validation => 1,
        Split::Test => 2,
    }
}

fn split_from_code(c: u8) -> Result<Split, DataIoError> {
    match c {
        0 => Ok(Split::Train),
        1 => Ok(Split::Validation),
        2 => Ok(Split::Test),
        _ => Err(DataIoError::Malformed(format!("split code {c}"))),
    }
}

pub fn write_dataset(path: &Path, ds: &SyntheticDataset) -> Result<(), DataIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    put_u64(&mut w, ds.header.identities as u64)?;
    put_u64(&mut w, ds.header.latent_dim as u64)?;
    put_u64(&mut w, ds.header.obs_dim as u64)?;
    put_u64(&mut w, ds.header.seed)?;
    match &ds.header.synth {
        Some(cfg) => {
            w.write_all(&[1])?;
            put_u64(&mut w, cfg.samples_per_identity as u64)?;
            put_f64(&mut w, cfg.noise_easy)?;
            put_f64(&mut w, cfg.noise_hard)?;
            put_f64(&mut w, cfg.frac_hard)?;
            put_f64(&mut w, cfg.frac_personalized)?;
        }
        None => w.write_all(&[0])?,
    }
    for ident in &ds.identities {
        put_u64(&mut w, ident.id as u64)?;
        w.write_all(&[
            split_code(ident.split),
            ident.is_hard as u8,
            ident.is_personalized as u8,
            ident.attribute,
        ])?;
        put_f64s(&mut w, &ident.latent)?;
        put_f64s(&mut w, &ident.voice_latent)?;
    }
    for samples in [&ds.face_samples, &ds.voice_samples] {
        put_u64(&mut w, samples.len() as u64)?;
        for s in samples.iter() {
            put_u64(&mut w, s.identity_id as u64)?;
            put_f64s(&mut w, &s.features)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<SyntheticDataset, DataIoError> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 8];
    let got = file.read(&mut magic)?;
    if got >= 4 && &magic[..4] == b"VFDS" {
        if &magic != DATASET_MAGIC {
            return Err(DataIoError::Malformed(
                "unsupported dataset format version".into(),
            ));
        }
        read_binary(BufReader::new(file))
    } else {
        // text manifest; reopen from the start
        let file = File::open(path)?;
        read_manifest(BufReader::new(file))
    }
}

fn read_binary(mut r: impl Read) -> Result<SyntheticDataset, DataIoError> {
    let m = get_u64(&mut r)? as usize;
    let latent_dim = get_u64(&mut r)? as usize;
    let obs_dim = get_u64(&mut r)? as usize;
    let seed = get_u64(&mut r)?;
    // sanity caps so a truncated / corrupt header fails fast
    if m > 100_000_000 || latent_dim > 1_000_000 || obs_dim > 1_000_000 {
        return Err(DataIoError::Malformed("implausible header dimensions".into()));
    }
    let synth = match get_u8(&mut r)? {
        0 => None,
        1 => {
            let samples_per_identity = get_u64(&mut r)? as usize;
            let noise_easy = get_f64(&mut r)?;
            let noise_hard = get_f64(&mut r)?;
            let frac_hard = get_f64(&mut r)?;
            let frac_personalized = get_f64(&mut r)?;
            Some(SynthConfig {
                identities: m,
                latent_dim,
                obs_dim,
                samples_per_identity,
                noise_easy,
                noise_hard,
                frac_hard,
                frac_personalized,
                seed,
            })
        }
        c => return Err(DataIoError::Malformed(format!("synth flag {c}"))),
    };
    let mut identities = Vec::with_capacity(m);
    for _ in 0..m {
        let id = get_u64(&mut r)? as usize;
        let split = split_from_code(get_u8(&mut r)?)?;
        let is_hard = get_u8(&mut r)? != 0;
        let is_personalized = get_u8(&mut r)? != 0;
        let attribute = get_u8(&mut r)?;
        let latent = get_f64s(&mut r, latent_dim)?;
        let voice_latent = get_f64s(&mut r, latent_dim)?;
        identities.push(Identity {
            id,
            split,
            is_hard,
            is_personalized,
            attribute,
            latent,
            voice_latent,
        });
    }
    let mut pools = Vec::with_capacity(2);
    for modality in [Modality::Face, Modality::Voice] {
        let count = get_u64(&mut r)? as usize;
        if count > 1_000_000_000 {
            return Err(DataIoError::Malformed("implausible sample count".into()));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let identity_id = get_u64(&mut r)? as usize;
            let features = get_f64s(&mut r, obs_dim)?;
            samples.push(Sample {
                identity_id,
                modality,
                features,
            });
        }
        pools.push(samples);
    }
    let voice_samples = pools.pop().unwrap();
    let face_samples = pools.pop().unwrap();
    Ok(SyntheticDataset {
        header: DatasetHeader {
            identities: m,
            latent_dim,
            obs_dim,
            seed,
            synth,
        },
        identities,
        face_samples,
        voice_samples,
    })
}

/// Text manifest, one record per line:
///
/// ```text
/// header,<m>,<latent_dim>,<obs_dim>,<seed>
/// identity,<id>,<split>,<hard 0|1>,<personalized 0|1>,<attribute 0|1>,<latent...>,<voice_latent...>
/// face,<identity_id>,<features...>
/// voice,<identity_id>,<features...>
/// ```
///
/// Blank lines and `#` comments are skipped. The header line must come first.
pub fn read_manifest(r: impl BufRead) -> Result<SyntheticDataset, DataIoError> {
    let mut header: Option<DatasetHeader> = None;
    let mut identities = Vec::new();
    let mut face_samples = Vec::new();
    let mut voice_samples = Vec::new();

    for (lineno, line) in r.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |msg: String| DataIoError::ManifestParse { line: lineno, msg };
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| DataIoError::ManifestParse {
                    line: lineno,
                    msg: format!("bad integer {s:?}"),
                })
        };
        let parse_f64 = |s: &str| {
            s.parse::<f64>().map_err(|_| DataIoError::ManifestParse {
                line: lineno,
                msg: format!("bad float {s:?}"),
            })
        };
        match fields[0] {
            "header" => {
                if fields.len() != 5 {
                    return Err(err("header wants 4 fields: m,latent_dim,obs_dim,seed".into()));
                }
                header = Some(DatasetHeader {
                    identities: parse_usize(fields[1])?,
                    latent_dim: parse_usize(fields[2])?,
                    obs_dim: parse_usize(fields[3])?,
                    seed: fields[4].parse::<u64>().map_err(|_| DataIoError::ManifestParse {
                        line: lineno,
                        msg: format!("bad seed {:?}", fields[4]),
                    })?,
                    synth: None,
                });
            }
            "identity" => {
                let h = header
                    .as_ref()
                    .ok_or_else(|| err("identity record before header".into()))?;
                let want = 6 + 2 * h.latent_dim;
                if fields.len() != want {
                    return Err(err(format!(
                        "identity record wants {} fields, got {}",
                        want,
                        fields.len()
                    )));
                }
                let split = Split::parse(fields[2])
                    .ok_or_else(|| err(format!("bad split {:?}", fields[2])))?;
                let mut latent = Vec::with_capacity(h.latent_dim);
                let mut voice_latent = Vec::with_capacity(h.latent_dim);
                for i in 0..h.latent_dim {
                    latent.push(parse_f64(fields[6 + i])?);
                }
                for i in 0..h.latent_dim {
                    voice_latent.push(parse_f64(fields[6 + h.latent_dim + i])?);
                }
                identities.push(Identity {
                    id: parse_usize(fields[1])?,
                    split,
                    is_hard: fields[3] == "1",
                    is_personalized: fields[4] == "1",
                    attribute: if fields[5] == "1" { 1 } else { 0 },
                    latent,
                    voice_latent,
                });
            }
            kind @ ("face" | "voice") => {
                let h = header
                    .as_ref()
                    .ok_or_else(|| err("sample record before header".into()))?;
                let want = 2 + h.obs_dim;
                if fields.len() != want {
                    return Err(err(format!(
                        "{} record wants {} fields, got {}",
                        kind,
                        want,
                        fields.len()
                    )));
                }
                let mut features = Vec::with_capacity(h.obs_dim);
                for i in 0..h.obs_dim {
                    features.push(parse_f64(fields[2 + i])?);
                }
                let sample = Sample {
                    identity_id: parse_usize(fields[1])?,
                    modality: if kind == "face" { Modality::Face } else { Modality::Voice },
                    features,
                };
                if kind == "face" {
                    face_samples.push(sample);
                } else {
                    voice_samples.push(sample);
                }
            }
            other => return Err(err(format!("unknown record type {other:?}"))),
        }
    }

    let header = header.ok_or(DataIoError::Malformed("manifest has no header line".into()))?;
    Ok(SyntheticDataset {
        header,
        identities,
        face_samples,
        voice_samples,
    })
}

/// Writes the text manifest form (mainly for producing fixtures and for
/// eyeballing small datasets). Floats use shortest round-trip formatting.
pub fn write_manifest(path: &Path, ds: &SyntheticDataset) -> Result<(), DataIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "header,{},{},{},{}",
        ds.header.identities, ds.header.latent_dim, ds.header.obs_dim, ds.header.seed
    )?;
    let join = |xs: &[f64]| {
        xs.iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    for ident in &ds.identities {
        writeln!(
            w,
            "identity,{},{},{},{},{},{},{}",
            ident.id,
            ident.split.as_str(),
            ident.is_hard as u8,
            ident.is_personalized as u8,
            ident.attribute,
            join(&ident.latent),
            join(&ident.voice_latent)
        )?;
    }
    for (kind, samples) in [("face", &ds.face_samples), ("voice", &ds.voice_samples)] {
        for s in samples.iter() {
            writeln!(w, "{},{},{}", kind, s.identity_id, join(&s.features))?;
        }
    }
    w.flush()?;
    Ok(())
}
