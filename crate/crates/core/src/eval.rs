//! Evaluation protocols: 1:N matching, verification (ROC AUC) and retrieval
//! (mAP), each in both query directions (voice-to-face and face-to-voice)
//! and with unrestricted or attribute-matched galleries.
//!
//! Embeddings for a split are computed once into a [`SplitEmbeddings`] table;
//! query generation is deterministic given an rng stream, and scoring is
//! data-parallel over queries with fixed-order reduction.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{forward, EncoderError, EncoderParams, EncoderSide};
use crate::mat::{dot, norm, Mat};
use crate::par::{map_collect, ExecPolicy};
use crate::rng::Rng;
use crate::types::{DatasetIndex, Split, SyntheticDataset};

pub const CURVE_MIN_N: usize = 2;
pub const CURVE_MAX_N: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("zero-norm embedding: cosine similarity undefined")]
    ZeroNormEmbedding,
    #[error("split {0:?} has too few identities for this protocol: {1}")]
    InsufficientIdentities(Split, String),
    #[error("verification needs at least one pair of each class")]
    EmptyVerificationClass,
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// voice probe, face gallery
    VoiceToFace,
    /// face probe, voice gallery
    FaceToVoice,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::VoiceToFace, Direction::FaceToVoice];

    pub fn short(self) -> &'static str {
        match self {
            Direction::VoiceToFace => "vf",
            Direction::FaceToVoice => "fv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Restriction {
    Unrestricted,
    AttributeMatched,
}

impl Restriction {
    pub const ALL: [Restriction; 2] = [Restriction::Unrestricted, Restriction::AttributeMatched];

    pub fn short(self) -> &'static str {
        match self {
            Restriction::Unrestricted => "u",
            Restriction::AttributeMatched => "g",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub queries_per_probe: usize,
    pub max_queries_per_cell: usize,
    pub similarity: Similarity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            queries_per_probe: 20,
            max_queries_per_cell: 50_000,
            similarity: Similarity::Cosine,
        }
    }
}

/// Cosine similarity in [-1, 1]; errors on zero-norm inputs.
pub fn score(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroNormEmbedding);
    }
    Ok(dot(a, b) / (na * nb))
}

fn similarity(sim: Similarity, a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    match sim {
        Similarity::Cosine => score(a, b),
        Similarity::Dot => Ok(dot(a, b)),
    }
}

/// Embeddings of every sample of one split, rows in dataset sample order.
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    pub split: Split,
    pub face: Mat,
    /// identity id owning each face row
    pub face_owner: Vec<usize>,
    pub voice: Mat,
    pub voice_owner: Vec<usize>,
    /// attribute per identity id (full dataset table)
    pub attribute: Vec<u8>,
}

impl SplitEmbeddings {
    pub fn rows(&self, modality_face: bool) -> (&Mat, &[usize]) {
        if modality_face {
            (&self.face, &self.face_owner)
        } else {
            (&self.voice, &self.voice_owner)
        }
    }
}

/// Runs both encoders over every sample of `split`. Forward passes are pure,
/// so rows can be computed in parallel and land in input order.
pub fn embed_split(
    params: &EncoderParams,
    ds: &SyntheticDataset,
    split: Split,
    policy: ExecPolicy,
) -> Result<SplitEmbeddings, EvalError> {
    let index = DatasetIndex::build(ds);
    let ids = index.split_identities(split);
    let in_split = {
        let mut mask = vec![false; ds.header.identities];
        for &id in ids {
            mask[id] = true;
        }
        mask
    };
    let embed_dim = params.dims().embed_dim;

    let embed = |samples: &[crate::types::Sample], side: EncoderSide| -> Result<(Mat, Vec<usize>), EvalError> {
        let rows: Vec<usize> = (0..samples.len())
            .filter(|&i| in_split[samples[i].identity_id])
            .collect();
        let owners: Vec<usize> = rows.iter().map(|&i| samples[i].identity_id).collect();
        const CHUNK: usize = 256;
        let chunks: Vec<&[usize]> = rows.chunks(CHUNK).collect();
        let blocks: Vec<Result<Mat, EvalError>> = map_collect(policy, &chunks, |chunk| {
            let mut batch = Mat::zeros(chunk.len(), ds.header.obs_dim);
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).copy_from_slice(&samples[i].features);
            }
            let (emb, _) = forward(params, &batch, side)?;
            Ok(emb)
        });
        let mut out = Mat::zeros(rows.len(), embed_dim);
        let mut cursor = 0;
        for block in blocks {
            let block = block?;
            for r in 0..block.rows() {
                out.row_mut(cursor).copy_from_slice(block.row(r));
                cursor += 1;
            }
        }
        Ok((out, owners))
    };

    let (face, face_owner) = embed(&ds.face_samples, EncoderSide::Face)?;
    let (voice, voice_owner) = embed(&ds.voice_samples, EncoderSide::Voice)?;
    let attribute = {
        let mut a = vec![0u8; ds.header.identities];
        for ident in &ds.identities {
            if ident.id < a.len() {
                a[ident.id] = ident.attribute;
            }
        }
        a
    };
    Ok(SplitEmbeddings {
        split,
        face,
        face_owner,
        voice,
        voice_owner,
        attribute,
    })
}

/// 1:N matching query over table rows: probe row in one modality, gallery
/// rows in the other with exactly one positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchQuery {
    pub probe_row: usize,
    pub gallery_rows: Vec<usize>,
    pub positive_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationPair {
    pub probe_row: usize,
    pub gallery_row: usize,
    pub same_identity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalQuery {
    pub probe_row: usize,
    /// gallery is the full opposite-modality split (restricted: attribute
    /// matched), positives marked per row
    pub gallery_rows: Vec<usize>,
    pub positive_mask: Vec<bool>,
}

struct GalleryPools {
    /// per split identity: gallery (opposite modality) row indices
    rows_by_identity: Vec<(usize, Vec<usize>)>,
}

fn gallery_pools(table: &SplitEmbeddings, direction: Direction) -> GalleryPools {
    let gallery_owner = match direction {
        Direction::VoiceToFace => &table.face_owner,
        Direction::FaceToVoice => &table.voice_owner,
    };
    let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for (row, &id) in gallery_owner.iter().enumerate() {
        by_id.entry(id).or_default().push(row);
    }
    GalleryPools {
        rows_by_identity: by_id.into_iter().collect(),
    }
}

fn probe_rows(table: &SplitEmbeddings, direction: Direction) -> &[usize] {
    match direction {
        Direction::VoiceToFace => &table.voice_owner,
        Direction::FaceToVoice => &table.face_owner,
    }
}

/// Deterministic 1:N matching queries: for each probe sample, up to
/// `queries_per_probe` galleries of n-1 distinct distractor identities plus
/// one positive, positive position randomized. Returns None when the split
/// cannot support the restriction (fewer than n-1 same-attribute distractor
/// identities for some probe).
pub fn generate_match_queries(
    table: &SplitEmbeddings,
    direction: Direction,
    restriction: Restriction,
    n: usize,
    config: &EvalConfig,
    rng: &mut Rng,
) -> Result<Option<Vec<MatchQuery>>, EvalError> {
    assert!(n >= 2, "matching needs a gallery of at least 2");
    let pools = gallery_pools(table, direction);
    let probe_owner = probe_rows(table, direction);
    if pools.rows_by_identity.len() < 2 {
        return Err(EvalError::InsufficientIdentities(
            table.split,
            "matching needs >= 2 identities".into(),
        ));
    }
    // distractor identity candidates per probe identity
    let candidates = |probe_id: usize| -> Vec<usize> {
        pools
            .rows_by_identity
            .iter()
            .enumerate()
            .filter(|(_, (id, _))| {
                *id != probe_id
                    && (restriction == Restriction::Unrestricted
                        || table.attribute[*id] == table.attribute[probe_id])
            })
            .map(|(pos, _)| pos)
            .collect()
    };
    let pool_pos_of_id: std::collections::BTreeMap<usize, usize> = pools
        .rows_by_identity
        .iter()
        .enumerate()
        .map(|(pos, (id, _))| (*id, pos))
        .collect();

    let mut queries = Vec::new();
    'outer: for (probe_row, &probe_id) in probe_owner.iter().enumerate() {
        let cands = candidates(probe_id);
        if cands.len() < n - 1 {
            return Ok(None);
        }
        let positive_pool = &pools.rows_by_identity[pool_pos_of_id[&probe_id]].1;
        for _ in 0..config.queries_per_probe {
            if queries.len() >= config.max_queries_per_cell {
                break 'outer;
            }
            let chosen = rng.sample_distinct(cands.len(), n - 1);
            let mut gallery_rows = Vec::with_capacity(n);
            for c in chosen {
                let pool = &pools.rows_by_identity[cands[c]].1;
                gallery_rows.push(pool[rng.next_below(pool.len() as u64) as usize]);
            }
            let positive_row = positive_pool[rng.next_below(positive_pool.len() as u64) as usize];
            let positive_pos = rng.next_below(n as u64) as usize;
            gallery_rows.insert(positive_pos, positive_row);
            queries.push(MatchQuery {
                probe_row,
                gallery_rows,
                positive_pos,
            });
        }
    }
    Ok(Some(queries))
}

/// Verification pairs: alternating positive / negative pairs per probe.
pub fn generate_verification_pairs(
    table: &SplitEmbeddings,
    direction: Direction,
    restriction: Restriction,
    config: &EvalConfig,
    rng: &mut Rng,
) -> Result<Option<Vec<VerificationPair>>, EvalError> {
    let pools = gallery_pools(table, direction);
    let probe_owner = probe_rows(table, direction);
    let pool_pos_of_id: std::collections::BTreeMap<usize, usize> = pools
        .rows_by_identity
        .iter()
        .enumerate()
        .map(|(pos, (id, _))| (*id, pos))
        .collect();
    let mut pairs = Vec::new();
    'outer: for (probe_row, &probe_id) in probe_owner.iter().enumerate() {
        let negatives: Vec<usize> = pools
            .rows_by_identity
            .iter()
            .enumerate()
            .filter(|(_, (id, _))| {
                *id != probe_id
                    && (restriction == Restriction::Unrestricted
                        || table.attribute[*id] == table.attribute[probe_id])
            })
            .map(|(pos, _)| pos)
            .collect();
        if negatives.is_empty() {
            return Ok(None);
        }
        let positive_pool = &pools.rows_by_identity[pool_pos_of_id[&probe_id]].1;
        for q in 0..config.queries_per_probe {
            if pairs.len() >= config.max_queries_per_cell {
                break 'outer;
            }
            if q % 2 == 0 {
                let row = positive_pool[rng.next_below(positive_pool.len() as u64) as usize];
                pairs.push(VerificationPair {
                    probe_row,
                    gallery_row: row,
                    same_identity: true,
                });
            } else {
                let neg_id = negatives[rng.next_below(negatives.len() as u64) as usize];
                let pool = &pools.rows_by_identity[neg_id].1;
                let row = pool[rng.next_below(pool.len() as u64) as usize];
                pairs.push(VerificationPair {
                    probe_row,
                    gallery_row: row,
                    same_identity: false,
                });
            }
        }
    }
    if !pairs.iter().any(|p| p.same_identity) || !pairs.iter().any(|p| !p.same_identity) {
        return Err(EvalError::EmptyVerificationClass);
    }
    Ok(Some(pairs))
}

/// Retrieval queries: gallery = every opposite-modality sample of the split
/// (attribute-matched under restriction), positives = the probe identity's
/// samples. One query per probe sample, capped per cell.
pub fn generate_retrieval_queries(
    table: &SplitEmbeddings,
    direction: Direction,
    restriction: Restriction,
    config: &EvalConfig,
) -> Result<Option<Vec<RetrievalQuery>>, EvalError> {
    let probe_owner = probe_rows(table, direction);
    let gallery_owner = match direction {
        Direction::VoiceToFace => &table.face_owner,
        Direction::FaceToVoice => &table.voice_owner,
    };
    let mut queries = Vec::new();
    for (probe_row, &probe_id) in probe_owner.iter().enumerate() {
        if queries.len() >= config.max_queries_per_cell {
            break;
        }
        let mut gallery_rows = Vec::new();
        let mut positive_mask = Vec::new();
        let mut negatives = 0usize;
        for (row, &id) in gallery_owner.iter().enumerate() {
            if restriction == Restriction::AttributeMatched
                && table.attribute[id] != table.attribute[probe_id]
            {
                continue;
            }
            gallery_rows.push(row);
            positive_mask.push(id == probe_id);
            if id != probe_id {
                negatives += 1;
            }
        }
        if negatives == 0 {
            return Ok(None);
        }
        queries.push(RetrievalQuery {
            probe_row,
            gallery_rows,
            positive_mask,
        });
    }
    Ok(Some(queries))
}

/// True when the positive attains the strictly highest score; any tie with a
/// distractor counts as incorrect.
pub fn match_correct(scores: &[f64], positive_pos: usize) -> bool {
    let pos = scores[positive_pos];
    scores
        .iter()
        .enumerate()
        .all(|(i, &s)| i == positive_pos || s < pos)
}

/// Rank-statistic AUC: concordant pairs plus half ties over pos x neg.
pub fn auc_from_scores(positive: &[f64], negative: &[f64]) -> Result<f64, EvalError> {
    if positive.is_empty() || negative.is_empty() {
        return Err(EvalError::EmptyVerificationClass);
    }
    let mut concordant = 0.0;
    for &p in positive {
        for &n in negative {
            if p > n {
                concordant += 1.0;
            } else if p == n {
                concordant += 0.5;
            }
        }
    }
    Ok(concordant / (positive.len() as f64 * negative.len() as f64))
}

/// Average precision of one ranking: gallery sorted by descending score,
/// ties broken by gallery order, AP = mean over positives of precision at
/// each positive's 1-based rank.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::MalformedQuery(
            "scores and positive mask lengths differ".into(),
        ));
    }
    let total_positive = positive.iter().filter(|&&p| p).count();
    if total_positive == 0 {
        return Err(EvalError::MalformedQuery("retrieval query has no positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if positive[idx] {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / total_positive as f64)
}

fn query_tables<'t>(table: &'t SplitEmbeddings, direction: Direction) -> (&'t Mat, &'t Mat) {
    match direction {
        Direction::VoiceToFace => (&table.voice, &table.face),
        Direction::FaceToVoice => (&table.face, &table.voice),
    }
}

/// Fraction of matching queries answered correctly.
pub fn match_accuracy(
    table: &SplitEmbeddings,
    direction: Direction,
    queries: &[MatchQuery],
    config: &EvalConfig,
    policy: ExecPolicy,
) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::MalformedQuery("empty query list".into()));
    }
    let (probe_mat, gallery_mat) = query_tables(table, direction);
    let results: Vec<Result<bool, EvalError>> = map_collect(policy, queries, |q| {
        let probe = probe_mat.row(q.probe_row);
        let mut scores = Vec::with_capacity(q.gallery_rows.len());
        for &g in &q.gallery_rows {
            scores.push(similarity(config.similarity, probe, gallery_mat.row(g))?);
        }
        Ok(match_correct(&scores, q.positive_pos))
    });
    let mut correct = 0usize;
    for r in results {
        if r? {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

pub fn verification_auc(
    table: &SplitEmbeddings,
    direction: Direction,
    pairs: &[VerificationPair],
    config: &EvalConfig,
    policy: ExecPolicy,
) -> Result<f64, EvalError> {
    let (probe_mat, gallery_mat) = query_tables(table, direction);
    let scored: Vec<Result<(f64, bool), EvalError>> = map_collect(policy, pairs, |p| {
        let s = similarity(
            config.similarity,
            probe_mat.row(p.probe_row),
            gallery_mat.row(p.gallery_row),
        )?;
        Ok((s, p.same_identity))
    });
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for r in scored {
        let (s, same) = r?;
        if same {
            positive.push(s);
        } else {
            negative.push(s);
        }
    }
    auc_from_scores(&positive, &negative)
}

pub fn retrieval_map(
    table: &SplitEmbeddings,
    direction: Direction,
    queries: &[RetrievalQuery],
    config: &EvalConfig,
    policy: ExecPolicy,
) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::MalformedQuery("empty query list".into()));
    }
    let (probe_mat, gallery_mat) = query_tables(table, direction);
    let aps: Vec<Result<f64, EvalError>> = map_collect(policy, queries, |q| {
        let probe = probe_mat.row(q.probe_row);
        let mut scores = Vec::with_capacity(q.gallery_rows.len());
        for &g in &q.gallery_rows {
            scores.push(similarity(config.similarity, probe, gallery_mat.row(g))?);
        }
        average_precision(&scores, &q.positive_mask)
    });
    let mut sum = 0.0;
    for ap in aps {
        sum += ap?;
    }
    Ok(sum / queries.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingCell {
    pub direction: Direction,
    pub restriction: Restriction,
    pub n: usize,
    /// absent when the split cannot support the restriction at this n
    pub accuracy: Option<f64>,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationCell {
    pub direction: Direction,
    pub restriction: Restriction,
    pub auc: Option<f64>,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCell {
    pub direction: Direction,
    pub restriction: Restriction,
    pub map: Option<f64>,
    pub queries: usize,
}

/// Full report grid: the three tasks by direction and restriction, with the
/// 1:N matching curve spanning n = 2..=10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub matching: Vec<MatchingCell>,
    pub verification: Vec<VerificationCell>,
    pub retrieval: Vec<RetrievalCell>,
}

impl MetricsReport {
    pub fn matching_cell(&self, direction: Direction, restriction: Restriction, n: usize) -> Option<&MatchingCell> {
        self.matching
            .iter()
            .find(|c| c.direction == direction && c.restriction == restriction && c.n == n)
    }

    /// The 1:N curve for one direction/restriction as (n, accuracy) points,
    /// skipping unsupported cells.
    pub fn curve(&self, direction: Direction, restriction: Restriction) -> Vec<(usize, f64)> {
        self.matching
            .iter()
            .filter(|c| c.direction == direction && c.restriction == restriction)
            .filter_map(|c| c.accuracy.map(|a| (c.n, a)))
            .collect()
    }
}

/// Evaluates the full protocol grid on a precomputed embedding table.
/// Query generation consumes dedicated rng substreams per cell, so cells are
/// independent of evaluation order.
pub fn evaluate_table(
    table: &SplitEmbeddings,
    config: &EvalConfig,
    rng: &Rng,
    policy: ExecPolicy,
) -> Result<MetricsReport, EvalError> {
    let mut matching = Vec::new();
    let mut verification = Vec::new();
    let mut retrieval = Vec::new();
    for direction in Direction::ALL {
        for restriction in Restriction::ALL {
            let cell_label = format!("{}-{}", direction.short(), restriction.short());
            for n in CURVE_MIN_N..=CURVE_MAX_N {
                let mut cell_rng = rng.stream(&format!("match-{cell_label}-{n}"));
                match generate_match_queries(table, direction, restriction, n, config, &mut cell_rng)? {
                    Some(queries) => {
                        let acc = match_accuracy(table, direction, &queries, config, policy)?;
                        matching.push(MatchingCell {
                            direction,
                            restriction,
                            n,
                            accuracy: Some(acc),
                            queries: queries.len(),
                        });
                    }
                    None => matching.push(MatchingCell {
                        direction,
                        restriction,
                        n,
                        accuracy: None,
                        queries: 0,
                    }),
                }
            }
            let mut verif_rng = rng.stream(&format!("verif-{cell_label}"));
            match generate_verification_pairs(table, direction, restriction, config, &mut verif_rng)? {
                Some(pairs) => {
                    let auc = verification_auc(table, direction, &pairs, config, policy)?;
                    verification.push(VerificationCell {
                        direction,
                        restriction,
                        auc: Some(auc),
                        pairs: pairs.len(),
                    });
                }
                None => verification.push(VerificationCell {
                    direction,
                    restriction,
                    auc: None,
                    pairs: 0,
                }),
            }
            match generate_retrieval_queries(table, direction, restriction, config)? {
                Some(queries) => {
                    let map = retrieval_map(table, direction, &queries, config, policy)?;
                    retrieval.push(RetrievalCell {
                        direction,
                        restriction,
                        map: Some(map),
                        queries: queries.len(),
                    });
                }
                None => retrieval.push(RetrievalCell {
                    direction,
                    restriction,
                    map: None,
                    queries: 0,
                }),
            }
        }
    }
    Ok(MetricsReport {
        split: table.split,
        matching,
        verification,
        retrieval,
    })
}

/// Embed a split and evaluate the full grid.
pub fn evaluate_all(
    params: &EncoderParams,
    ds: &SyntheticDataset,
    split: Split,
    config: &EvalConfig,
    rng: &Rng,
    policy: ExecPolicy,
) -> Result<MetricsReport, EvalError> {
    let table = embed_split(params, ds, split, policy)?;
    evaluate_table(&table, config, rng, policy)
}

/// The model-selection metric used during training: unrestricted 1:2
/// voice-to-face matching accuracy.
pub fn quick_match_accuracy(
    table: &SplitEmbeddings,
    config: &EvalConfig,
    rng: &Rng,
    policy: ExecPolicy,
) -> Result<f64, EvalError> {
    let mut cell_rng = rng.stream("match-vf-u-2");
    let queries = generate_match_queries(
        table,
        Direction::VoiceToFace,
        Restriction::Unrestricted,
        2,
        config,
        &mut cell_rng,
    )?
    .ok_or_else(|| {
        EvalError::InsufficientIdentities(table.split, "1:2 matching unsupported".into())
    })?;
    match_accuracy(table, Direction::VoiceToFace, &queries, config, policy)
}

/// Two-column CSV (n, acc) per direction/restriction, one file per cell:
/// `curve_vf_u.csv`, `curve_vf_g.csv`, `curve_fv_u.csv`, `curve_fv_g.csv`.
pub fn write_curve_csvs(report: &MetricsReport, dir: &Path) -> Result<Vec<std::path::PathBuf>, EvalError> {
    let mut written = Vec::new();
    for direction in Direction::ALL {
        for restriction in Restriction::ALL {
            let path = dir.join(format!("curve_{}_{}.csv", direction.short(), restriction.short()));
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(w, "n,acc")?;
            for (n, acc) in report.curve(direction, restriction) {
                writeln!(w, "{n},{acc}")?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Embedding table export: one `identity,modality,e0..e{D-1}` row per sample
/// of the split, faces first, dataset sample order, shortest round-trip
/// float formatting.
pub fn export_embeddings(table: &SplitEmbeddings, path: &Path) -> Result<usize, EvalError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut rows = 0usize;
    for (mat, owners, name) in [
        (&table.face, &table.face_owner, "face"),
        (&table.voice, &table.voice_owner, "voice"),
    ] {
        for (row, &id) in owners.iter().enumerate() {
            let coords: Vec<String> = mat.row(row).iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{},{},{}", id, name, coords.join(","))?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}
