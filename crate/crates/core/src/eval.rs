//! Retrieval metrics and the online latency probe.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::data::{Group, QueryRecord};
use crate::error::{Error, Result};
use crate::fusion::VideoIndex;
use crate::nn::fusion_invocations;
use crate::similarity::{score_matrix, score_query, ScoreMatrix};

/// `1 + #{better} + #{other ties}`: the ground truth ranks after every
/// competitor with an equal score.
pub fn rank_of<T: Scalar>(scores: &[T], gt: usize) -> usize {
    let s = scores[gt];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (j != gt && x == s))
        .count()
}

pub fn ranks<T: Scalar>(scores: &Tensor<T>, gt: &[usize]) -> Result<Vec<usize>> {
    if gt.len() != scores.rows() {
        return Err(Error::shape(
            "ranks",
            format!("{} queries but {} ground-truth entries", scores.rows(), gt.len()),
        ));
    }
    gt.iter()
        .enumerate()
        .map(|(i, &g)| {
            if g >= scores.cols() {
                Err(Error::invalid(format!("ground truth column {g} out of range")))
            } else {
                Ok(rank_of(scores.row(i), g))
            }
        })
        .collect()
}

pub fn recall_at_k<T: Scalar>(scores: &Tensor<T>, gt: &[usize], k: usize) -> Result<f64> {
    let r = ranks(scores, gt)?;
    if r.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    Ok(r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64)
}

/// Recalls as fractions; `sumr` on the 0-300 scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub sumr: f64,
    pub queries: usize,
}

impl Summary {
    pub fn from_recalls(r1: f64, r5: f64, r10: f64, queries: usize) -> Self {
        Self {
            r1,
            r5,
            r10,
            sumr: 100.0 * (r1 + r5 + r10),
            queries,
        }
    }

    fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::invalid("no queries"));
        }
        let n = ranks.len() as f64;
        let at = |k: usize| ranks.iter().filter(|&&x| x <= k).count() as f64 / n;
        Ok(Self::from_recalls(at(1), at(5), at(10), ranks.len()))
    }
}

pub fn summary_metrics<T: Scalar>(scores: &Tensor<T>, gt: &[usize]) -> Result<Summary> {
    Summary::from_ranks(&ranks(scores, gt)?)
}

pub const UNKNOWN_GROUP: &str = "unknown";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedReport {
    pub overall: Summary,
    pub per_group: BTreeMap<String, Summary>,
    /// Groups listed in `Group::ALL` that had no queries.
    pub omitted: Vec<String>,
}

/// Per-group metrics over each group's queries, ranked against the full
/// gallery. Untagged queries form the `unknown` group.
pub fn grouped_eval<T: Scalar>(scores: &Tensor<T>, gt: &[usize], groups: &[Option<Group>]) -> Result<GroupedReport> {
    let r = ranks(scores, gt)?;
    if groups.len() != r.len() {
        return Err(Error::shape("grouped_eval", "one group tag per query required"));
    }
    let overall = Summary::from_ranks(&r)?;
    let mut by: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (rank, g) in r.iter().zip(groups) {
        let key = g.map_or(UNKNOWN_GROUP, Group::as_str).to_string();
        by.entry(key).or_default().push(*rank);
    }
    let mut per_group = BTreeMap::new();
    for (k, v) in &by {
        per_group.insert(k.clone(), Summary::from_ranks(v)?);
    }
    let omitted: Vec<String> = Group::ALL
        .iter()
        .map(|g| g.as_str().to_string())
        .filter(|g| !by.contains_key(g))
        .collect();
    for g in &omitted {
        log::info!("group {g} has no queries; omitted");
    }
    Ok(GroupedReport {
        overall,
        per_group,
        omitted,
    })
}

/// Mean R@1 over several evaluation runs.
pub fn mean_r1(runs: &[Summary]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::invalid("mR1 needs at least one run"));
    }
    Ok(runs.iter().map(|s| s.r1).sum::<f64>() / runs.len() as f64)
}

/// Ground-truth column of every query in `matrix`.
pub fn ground_truth(matrix: &ScoreMatrix, queries: &[QueryRecord]) -> Result<Vec<usize>> {
    let col: HashMap<&str, usize> = matrix
        .item_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (id.as_str(), j))
        .collect();
    queries
        .iter()
        .map(|q| {
            col.get(q.ground_truth_item.as_str()).copied().ok_or_else(|| {
                Error::invalid(format!(
                    "query {}: ground-truth item {} is not in the gallery",
                    q.query_id, q.ground_truth_item
                ))
            })
        })
        .collect()
}

/// Video-to-text metrics: each video ranks the queries, and its rank is
/// the best rank among its own queries. Videos without queries are
/// skipped.
pub fn video_to_text<T: Scalar>(scores: &Tensor<T>, gt: &[usize]) -> Result<Summary> {
    let st = scores.transpose();
    let mut positives: Vec<Vec<usize>> = vec![Vec::new(); st.rows()];
    for (q, &v) in gt.iter().enumerate() {
        positives
            .get_mut(v)
            .ok_or_else(|| Error::invalid(format!("ground truth column {v} out of range")))?
            .push(q);
    }
    let ranks: Vec<usize> = positives
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty())
        .map(|(v, p)| p.iter().map(|&q| rank_of(st.row(v), q)).min().unwrap_or(usize::MAX))
        .collect();
    Summary::from_ranks(&ranks)
}

/// Index search over the given queries.
pub fn evaluate(index: &VideoIndex, queries: &[QueryRecord], lambda: f64) -> Result<GroupedReport> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let sm = score_matrix(index, queries, lambda)?;
    let gt = ground_truth(&sm, queries)?;
    let groups: Vec<Option<Group>> = queries.iter().map(|q| q.group).collect();
    grouped_eval(&sm.values, &gt, &groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub repetitions: usize,
    pub gallery: usize,
    pub fusion_calls: u64,
}

/// Time scoring one query against the whole index. Each repetition
/// scores every query once; a sample is that repetition's time per
/// query.
pub fn latency_probe(index: &VideoIndex, queries: &[QueryRecord], repetitions: usize, lambda: f64) -> Result<LatencyStats> {
    if repetitions == 0 {
        return Err(Error::invalid("latency probe needs at least one repetition"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let before = fusion_invocations();
    let mut samples = Vec::with_capacity(repetitions);
    let mut sink = 0.0f32;
    for _ in 0..repetitions {
        let start = Instant::now();
        for q in queries {
            let s = score_query(index, &q.embedding, lambda)?;
            sink += s.first().copied().unwrap_or(0.0);
        }
        samples.push(start.elapsed().as_secs_f64() * 1e3 / queries.len() as f64);
    }
    std::hint::black_box(sink);
    let fusion_calls = fusion_invocations() - before;
    if fusion_calls != 0 {
        return Err(Error::invalid(format!(
            "{fusion_calls} fusion-network calls during query scoring"
        )));
    }
    let mean_ms = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    let median_ms = if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    };
    Ok(LatencyStats {
        median_ms,
        mean_ms,
        repetitions,
        gallery: index.len(),
        fusion_calls,
    })
}
