//! Cross-modal retrieval: a CCA-space embedding index over one modality,
//! cosine-distance ranking for queries from the other, and the R@k /
//! median-rank evaluation harness.
//!
//! Queries are an exhaustive linear scan (the candidate counts here are at
//! most a few tens of thousands); ties are broken by ascending snippet id so
//! rankings are deterministic.

use crate::datagen::{MultiViewDataset, Split, View};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::trainer::{split_features, Checkpoint};

pub const INDEX_MAGIC: &[u8; 4] = b"DCIX";
pub const INDEX_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// Sheet-image view (view X).
    Image,
    /// Spectrogram view (view Y).
    Audio,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Audio => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Modality> {
        match tag {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Audio),
            t => Err(Error::Format(format!("unknown modality tag {t}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s {
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            other => Err(Error::Range(format!("unknown modality '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Audio => "audio",
        }
    }

    pub fn view(self) -> View {
        match self {
            Modality::Image => View::X,
            Modality::Audio => View::Y,
        }
    }

    pub fn opposite(self) -> Modality {
        match self {
            Modality::Image => Modality::Audio,
            Modality::Audio => Modality::Image,
        }
    }
}

/// Retrieval direction: which modality queries which.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AudioToSheet,
    SheetToAudio,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::AudioToSheet => "audio-to-sheet",
            Direction::SheetToAudio => "sheet-to-audio",
        }
    }

    /// The indexed (target) modality.
    pub fn target(self) -> Modality {
        match self {
            Direction::AudioToSheet => Modality::Image,
            Direction::SheetToAudio => Modality::Audio,
        }
    }
}

/// `1 − a·b / (|a||b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine_distance lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let d = 1.0 - dot / (na.sqrt() * nb.sqrt());
    Ok(d.clamp(0.0, 2.0))
}

/// One indexed snippet: CCA-space embedding plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetRecord {
    pub snippet_id: u64,
    pub piece_id: u64,
    pub position: u64,
    pub embedding: Vec<f64>,
}

/// Immutable store of CCA-projected embeddings of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetIndex {
    pub records: Vec<SnippetRecord>,
    pub h: usize,
    pub modality: Modality,
}

impl SnippetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    // ── DCIX file format ────────────────────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.put_bytes(INDEX_MAGIC);
        w.put_u16(INDEX_VERSION);
        w.put_u32(self.records.len() as u32);
        w.put_u32(self.h as u32);
        w.put_u8(self.modality.tag());
        for rec in &self.records {
            w.put_u64(rec.snippet_id);
            w.put_u64(rec.piece_id);
            w.put_u64(rec.position);
            w.put_f64_slice(&rec.embedding);
        }
        w.put_trailing_crc();
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SnippetIndex> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(INDEX_MAGIC, "index")?;
        r.expect_version(INDEX_VERSION, "index")?;
        let m = r.take_u32()? as usize;
        let h = r.take_u32()? as usize;
        let modality = Modality::from_tag(r.take_u8()?)?;
        let mut records = Vec::with_capacity(m);
        for _ in 0..m {
            records.push(SnippetRecord {
                snippet_id: r.take_u64()?,
                piece_id: r.take_u64()?,
                position: r.take_u64()?,
                embedding: r.take_f64_vec(h)?,
            });
        }
        r.check_trailing_crc()?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after index", r.remaining())));
        }
        Ok(SnippetIndex { records, h, modality })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<SnippetIndex> {
        let bytes = std::fs::read(path)?;
        SnippetIndex::from_bytes(&bytes)
    }
}

/// Embeds the chosen modality of `split` (first `limit` snippets, index
/// order) through the checkpoint's matching encoder and CCA projection.
pub fn build_index(
    ckpt: &Checkpoint,
    ds: &MultiViewDataset,
    split: Split,
    modality: Modality,
    limit: Option<usize>,
) -> Result<SnippetIndex> {
    let mut indices = ds.split_indices(split);
    if let Some(l) = limit {
        indices.truncate(l);
    }
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let embeddings = embed(ckpt, ds, &indices, modality)?;
    let records = indices
        .iter()
        .enumerate()
        .map(|(i, &sample)| {
            let meta = ds.meta(sample);
            SnippetRecord {
                snippet_id: i as u64,
                piece_id: meta.piece_id,
                position: meta.position,
                embedding: embeddings.row(i).to_vec(),
            }
        })
        .collect();
    Ok(SnippetIndex { records, h: ckpt.cca.components(), modality })
}

/// Eval-mode forward + CCA projection of one modality over chosen samples.
pub fn embed(
    ckpt: &Checkpoint,
    ds: &MultiViewDataset,
    indices: &[usize],
    modality: Modality,
) -> Result<crate::numerics::Matrix> {
    match modality {
        Modality::Image => {
            let feats = split_features(&ckpt.encoder_x, ds, indices, View::X)?;
            ckpt.cca.project_x(&feats)
        }
        Modality::Audio => {
            let feats = split_features(&ckpt.encoder_y, ds, indices, View::Y)?;
            ckpt.cca.project_y(&feats)
        }
    }
}

/// A ranked retrieval result: top-k snippet ids by ascending cosine distance,
/// ties broken by snippet id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_id: u64,
    /// `(snippet_id, distance)` pairs, distance non-decreasing.
    pub ranked: Vec<(u64, f64)>,
    /// 1-based rank of the ground-truth snippet, when known.
    pub rank_of_target: Option<usize>,
}

fn distances_to(index: &SnippetIndex, q: &[f64]) -> Result<Vec<(f64, u64)>> {
    if q.len() != index.h {
        return Err(Error::Dimension(format!(
            "query has {} dims, index stores {}",
            q.len(),
            index.h
        )));
    }
    index
        .records
        .iter()
        .map(|rec| Ok((cosine_distance(q, &rec.embedding)?, rec.snippet_id)))
        .collect()
}

/// Top-k retrieval by cosine distance.
pub fn query(index: &SnippetIndex, q: &[f64], k: usize) -> Result<RankingResult> {
    query_with_target(index, 0, q, k, None)
}

/// Top-k retrieval that also reports the full-scan rank of `target_id`.
pub fn query_with_target(
    index: &SnippetIndex,
    query_id: u64,
    q: &[f64],
    k: usize,
    target_id: Option<u64>,
) -> Result<RankingResult> {
    if k > index.len() {
        return Err(Error::Bounds(format!(
            "k = {k} exceeds index size {}",
            index.len()
        )));
    }
    let mut dists = distances_to(index, q)?;
    dists.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1))
    });
    let rank_of_target = match target_id {
        Some(t) => Some(
            dists
                .iter()
                .position(|&(_, id)| id == t)
                .map(|p| p + 1)
                .ok_or_else(|| Error::Bounds(format!("target id {t} not in index")))?,
        ),
        None => None,
    };
    let ranked = dists.into_iter().take(k).map(|(d, id)| (id, d)).collect();
    Ok(RankingResult { query_id, ranked, rank_of_target })
}

/// `100 · |{r ≤ k}| / |ranks|`. Ranks are 1-based.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    assert!(!ranks.is_empty(), "recall_at_k on empty ranks");
    debug_assert!(ranks.iter().all(|&r| r >= 1));
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    100.0 * hits as f64 / ranks.len() as f64
}

/// Lower median of 1-based ranks: element ⌈n/2⌉ of the sorted list. Integral
/// by construction.
pub fn median_rank(ranks: &[usize]) -> usize {
    assert!(!ranks.is_empty(), "median_rank on empty ranks");
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    sorted[sorted.len().div_ceil(2) - 1]
}

/// Relaxed metrics counting same-piece snippets within a position tolerance
/// as hits (near-duplicate diagnostic).
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedMetrics {
    pub tolerance: u64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub median_rank: usize,
    /// Candidate count (index size).
    pub m: usize,
    /// Set when `limit` exceeded the split size and was clipped.
    pub clipped: bool,
    pub relaxed: Option<RelaxedMetrics>,
}

impl RetrievalReport {
    /// Machine-parsable `key=value` line, fixed field order.
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "direction={} r_at_1={:.2} r_at_5={:.2} r_at_10={:.2} mr={} m={}",
            self.direction.name(),
            self.r_at_1,
            self.r_at_5,
            self.r_at_10,
            self.median_rank,
            self.m
        );
        if let Some(rel) = &self.relaxed {
            line.push_str(&format!(
                " relaxed_tol={} relaxed_r_at_1={:.2} relaxed_r_at_5={:.2} relaxed_r_at_10={:.2}",
                rel.tolerance, rel.r_at_1, rel.r_at_5, rel.r_at_10
            ));
        }
        line
    }
}

/// Runs one retrieval direction: indexes the target modality over the first
/// `limit` snippets of `split`, queries each corresponding source snippet,
/// and scores the exact-pair ranks. With `relaxed_tol`, additionally counts
/// any same-piece snippet within ±tolerance positions as a hit.
pub fn evaluate_retrieval(
    ckpt: &Checkpoint,
    ds: &MultiViewDataset,
    split: Split,
    direction: Direction,
    limit: usize,
    relaxed_tol: Option<u64>,
) -> Result<RetrievalReport> {
    let split_size = ds.split_indices(split).len();
    if split_size < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: split_size });
    }
    let clipped = limit > split_size;
    let m = limit.min(split_size);

    let target_modality = direction.target();
    let index = build_index(ckpt, ds, split, target_modality, Some(m))?;

    let query_indices: Vec<usize> = ds.split_indices(split).into_iter().take(m).collect();
    let queries = embed(ckpt, ds, &query_indices, target_modality.opposite())?;

    let mut ranks = Vec::with_capacity(m);
    let mut relaxed_ranks = Vec::with_capacity(if relaxed_tol.is_some() { m } else { 0 });
    for (qi, &sample_idx) in query_indices.iter().enumerate() {
        let q = queries.row(qi);
        let mut dists = distances_to(&index, q)?;
        dists.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1))
        });
        let rank = dists
            .iter()
            .position(|&(_, id)| id == qi as u64)
            .expect("target snippet is indexed by construction")
            + 1;
        ranks.push(rank);

        if let Some(tol) = relaxed_tol {
            let target_meta = ds.meta(sample_idx);
            let best = dists
                .iter()
                .position(|&(_, id)| {
                    let rec = &index.records[id as usize];
                    rec.piece_id == target_meta.piece_id
                        && rec.position.abs_diff(target_meta.position) <= tol
                })
                .expect("the exact pair always qualifies")
                + 1;
            relaxed_ranks.push(best);
        }
    }

    let relaxed = relaxed_tol.map(|tolerance| RelaxedMetrics {
        tolerance,
        r_at_1: recall_at_k(&relaxed_ranks, 1),
        r_at_5: recall_at_k(&relaxed_ranks, 5),
        r_at_10: recall_at_k(&relaxed_ranks, 10),
    });

    Ok(RetrievalReport {
        direction,
        r_at_1: recall_at_k(&ranks, 1),
        r_at_5: recall_at_k(&ranks, 5),
        r_at_10: recall_at_k(&ranks, 10),
        median_rank: median_rank(&ranks),
        m,
        clipped,
        relaxed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_index(m: usize, h: usize, seed: u64) -> SnippetIndex {
        let mut rng = Rng::new(seed);
        let records = (0..m)
            .map(|i| SnippetRecord {
                snippet_id: i as u64,
                piece_id: (i / 10) as u64,
                position: (i % 10) as u64,
                embedding: (0..h).map(|_| rng.normal()).collect(),
            })
            .collect();
        SnippetIndex { records, h, modality: Modality::Image }
    }

    #[test]
    fn cosine_hand_cases() {
        assert!(cosine_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn query_stored_embedding_ranks_first() {
        let index = random_index(50, 4, 1);
        let q = index.records[17].embedding.clone();
        let res = query(&index, &q, 5).unwrap();
        assert_eq!(res.ranked[0].0, 17);
        assert!(res.ranked[0].1 < 1e-12);
    }

    #[test]
    fn query_single_record() {
        let index = random_index(1, 4, 2);
        let res = query(&index, &[1.0, 0.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(res.ranked[0].0, 0);
    }

    #[test]
    fn query_k_bounds() {
        let index = random_index(10, 4, 3);
        assert!(matches!(
            query(&index, &[1.0, 0.0, 0.0, 0.0], 11),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn query_matches_brute_force_oracle() {
        // Independent oracle: own cosine, repeated arg-min selection.
        let index = random_index(200, 6, 4);
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let q: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let res = query(&index, &q, 200).unwrap();

            let oracle_dist = |rec: &SnippetRecord| -> f64 {
                let dot: f64 = q.iter().zip(&rec.embedding).map(|(a, b)| a * b).sum();
                let na: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = rec.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
                (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
            };
            let mut remaining: Vec<(f64, u64)> = index
                .records
                .iter()
                .map(|r| (oracle_dist(r), r.snippet_id))
                .collect();
            let mut oracle_order = Vec::new();
            while !remaining.is_empty() {
                let mut best = 0;
                for i in 1..remaining.len() {
                    let (d, id) = remaining[i];
                    let (bd, bid) = remaining[best];
                    if d < bd || (d == bd && id < bid) {
                        best = i;
                    }
                }
                oracle_order.push(remaining.swap_remove(best).1);
            }
            let got: Vec<u64> = res.ranked.iter().map(|&(id, _)| id).collect();
            assert_eq!(got, oracle_order);
        }
    }

    #[test]
    fn ranking_invariant_under_query_scaling() {
        let index = random_index(100, 5, 6);
        let mut rng = Rng::new(7);
        let q: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let base = query(&index, &q, 100).unwrap();
        for scale in [0.01, 3.0, 1e6] {
            let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
            let res = query(&index, &scaled, 100).unwrap();
            let a: Vec<u64> = base.ranked.iter().map(|&(id, _)| id).collect();
            let b: Vec<u64> = res.ranked.iter().map(|&(id, _)| id).collect();
            assert_eq!(a, b, "ordering changed under scale {scale}");
        }
    }

    #[test]
    fn rank_of_target_full_scan() {
        let index = random_index(30, 4, 8);
        let q = index.records[3].embedding.clone();
        let res = query_with_target(&index, 9, &q, 1, Some(3)).unwrap();
        assert_eq!(res.query_id, 9);
        assert_eq!(res.rank_of_target, Some(1));
        assert!(matches!(
            query_with_target(&index, 0, &q, 1, Some(999)),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn recall_hand_cases() {
        let r = recall_at_k(&[1, 3, 20], 5);
        assert!((r - 66.66666666666667).abs() < 1e-10);
        assert_eq!(recall_at_k(&[1, 1, 1], 1), 100.0);
        assert_eq!(recall_at_k(&[2, 3], 1), 0.0);
    }

    #[test]
    fn median_rank_lower_convention() {
        assert_eq!(median_rank(&[1, 2, 3]), 2);
        assert_eq!(median_rank(&[1, 1, 1, 9]), 1);
        assert_eq!(median_rank(&[5]), 5);
        assert_eq!(median_rank(&[4, 2]), 2);
    }

    #[test]
    fn index_round_trip_and_corruption() {
        let index = random_index(25, 4, 9);
        let bytes = index.to_bytes();
        let back = SnippetIndex::from_bytes(&bytes).unwrap();
        assert_eq!(index, back);
        assert_eq!(bytes, back.to_bytes());

        let mut bad = bytes.clone();
        bad[10] ^= 0xff;
        assert!(matches!(SnippetIndex::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            SnippetIndex::from_bytes(&bytes[..20]),
            Err(Error::Format(_))
        ));
    }
}
