//! Retrieval metrics: CMC rank-k accuracy and mean average precision.
//!
//! Gallery entries sharing both identity and camera with the query are
//! excluded from its ranking, following the Market-1501 protocol.

use std::io::Write;

use crate::error::{contract_err, shape_err, Result};
use crate::losses::euclidean;
use crate::par;
use crate::tensor::Tensor;

/// Identity and camera of one embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tag {
    pub identity: u32,
    pub camera: u32,
}

/// `[Q, G]` Euclidean distances between the rows of `q: [Q, D]` and
/// `g: [G, D]`.
pub fn pairwise_distances(q: &Tensor, g: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || g.rank() != 2 || q.dims()[1] != g.dims()[1] {
        return Err(shape_err!("distances between {:?} and {:?}", q.dims(), g.dims()));
    }
    let (nq, ng, d) = (q.dims()[0], g.dims()[0], q.dims()[1]);
    let rows = par::map_indices(nq, |i| {
        let qi = &q.data()[i * d..(i + 1) * d];
        (0..ng)
            .map(|j| euclidean(qi, &g.data()[j * d..(j + 1) * d]))
            .collect::<Vec<_>>()
    });
    Tensor::new(vec![nq, ng], rows.concat())
}

/// Per-query result of ranking the gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    /// Zero-based rank of the first correct match among valid entries.
    pub first_hit: usize,
    pub average_precision: f64,
}

/// Metrics over a query set.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    /// `(k, CMC@k)` for each requested rank.
    pub cmc: Vec<(usize, f64)>,
    pub map: f64,
    pub evaluated: usize,
    /// Queries without any valid positive after exclusion.
    pub skipped: usize,
}

impl RetrievalReport {
    pub fn cmc_at(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v)
    }

    /// Tab-separated `k<TAB>cmc` rows followed by a `mAP<TAB>value` line.
    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "k\tcmc")?;
        for (k, v) in &self.cmc {
            writeln!(out, "{k}\t{v}")?;
        }
        writeln!(out, "mAP\t{}", self.map)
    }
}

/// Ranks the gallery for one query row of `dist` and scores it.
///
/// Ties in distance are broken by gallery index. Returns `None` when no valid
/// positive exists.
pub fn score_query(dist: &[f64], query: Tag, gallery: &[Tag]) -> Option<QueryResult> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery[j].identity == query.identity && gallery[j].camera == query.camera))
        .collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = None;
    for (rank, &j) in order.iter().enumerate() {
        if gallery[j].identity == query.identity {
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
            first_hit.get_or_insert(rank);
        }
    }
    first_hit.map(|first_hit| QueryResult {
        first_hit,
        average_precision: precision_sum / hits as f64,
    })
}

/// CMC at each `k` in `ranks` and mAP for a query/gallery split.
pub fn evaluate(
    query: &Tensor,
    query_tags: &[Tag],
    gallery: &Tensor,
    gallery_tags: &[Tag],
    ranks: &[usize],
) -> Result<RetrievalReport> {
    if query.dims()[0] != query_tags.len() || gallery.dims()[0] != gallery_tags.len() {
        return Err(contract_err!(
            "{} query tags for {:?}, {} gallery tags for {:?}",
            query_tags.len(),
            query.dims(),
            gallery_tags.len(),
            gallery.dims()
        ));
    }
    let dist = pairwise_distances(query, gallery)?;
    evaluate_distances(&dist, query_tags, gallery_tags, ranks)
}

/// As [`evaluate`], from a precomputed `[Q, G]` distance matrix.
pub fn evaluate_distances(
    dist: &Tensor,
    query_tags: &[Tag],
    gallery_tags: &[Tag],
    ranks: &[usize],
) -> Result<RetrievalReport> {
    if dist.dims() != [query_tags.len(), gallery_tags.len()] {
        return Err(shape_err!(
            "distance matrix {:?} for {} queries and {} gallery entries",
            dist.dims(),
            query_tags.len(),
            gallery_tags.len()
        ));
    }
    if ranks.contains(&0) {
        return Err(contract_err!("CMC ranks are 1-based"));
    }
    let ng = gallery_tags.len();
    let results = par::map_indices(query_tags.len(), |i| {
        score_query(&dist.data()[i * ng..(i + 1) * ng], query_tags[i], gallery_tags)
    });
    let valid: Vec<&QueryResult> = results.iter().flatten().collect();
    let skipped = results.len() - valid.len();
    if skipped > 0 {
        log::warn!("{skipped} queries have no valid gallery match and were skipped");
    }
    if valid.is_empty() {
        return Err(contract_err!("no query has a valid gallery match"));
    }
    let n = valid.len() as f64;
    let cmc = ranks
        .iter()
        .map(|&k| (k, valid.iter().filter(|r| r.first_hit < k).count() as f64 / n))
        .collect();
    let map = valid.iter().map(|r| r.average_precision).sum::<f64>() / n;
    Ok(RetrievalReport {
        cmc,
        map,
        evaluated: valid.len(),
        skipped,
    })
}
