//! Video-query scoring.
//!
//! Plain-value functions serve offline indexes and evaluation; the graph
//! variants in [`batch_scores`] score a training batch with gradients.

use crate::autodiff::{dot, logsumexp_slice, Graph, Scalar, Tensor, Var, ZERO_NORM};
use crate::data::QueryRecord;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, IndexEntry, VideoIndex};

pub const DEFAULT_LAMBDA: f64 = 20.0;

fn norm<T: Scalar>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

/// Cosine similarity; a zero-norm input scores 0.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = norm(a);
    let nb = norm(b);
    if na.to_f64_lossy() <= ZERO_NORM || nb.to_f64_lossy() <= ZERO_NORM {
        log::debug!("cosine with a zero-norm vector scored 0");
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

pub fn global_similarity<T: Scalar>(mean: &[T], t: &[T]) -> Result<T> {
    if mean.len() != t.len() {
        return Err(Error::shape(
            "global_similarity",
            format!("video dim {} vs query dim {}", mean.len(), t.len()),
        ));
    }
    Ok(cosine(mean, t))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("sharpness must be positive, got {lambda}")))
    }
}

/// `(1/lambda) ln((1/m) sum_i exp(lambda cos(v_i, t)))`, which lies
/// between the mean and the max token cosine.
pub fn local_similarity<T: Scalar>(tokens: &Tensor<T>, t: &[T], lambda: f64) -> Result<T> {
    check_lambda(lambda)?;
    if tokens.cols() != t.len() {
        return Err(Error::shape(
            "local_similarity",
            format!("token dim {} vs query dim {}", tokens.cols(), t.len()),
        ));
    }
    let l = T::of(lambda);
    let scaled: Vec<T> = (0..tokens.rows()).map(|i| l * cosine(tokens.row(i), t)).collect();
    let m = T::of(tokens.rows() as f64);
    Ok((logsumexp_slice(&scaled) - m.ln()) / l)
}

/// Average of the global and local scores.
pub fn combined_similarity<T: Scalar>(tokens: &Tensor<T>, mean: &[T], t: &[T], lambda: f64) -> Result<T> {
    let g = global_similarity(mean, t)?;
    let l = local_similarity(tokens, t, lambda)?;
    Ok((g + l) * T::of(0.5))
}

/// Score of a late-fusion entry: averaged cosines of the audio-visual
/// mean and the pooled raw speech tokens.
pub fn late_fusion_similarity<T: Scalar>(va_mean: &[T], speech_pool: &[T], t: &[T]) -> Result<T> {
    let a = global_similarity(va_mean, t)?;
    let b = global_similarity(speech_pool, t)?;
    Ok((a + b) * T::of(0.5))
}

/// Queries x videos scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub values: Tensor<f32>,
    pub query_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

/// Score of one index entry against query `t` under the index mode.
pub fn score_entry(mode: FusionMode, entry: &IndexEntry, t: &[f32], lambda: f64) -> Result<f32> {
    match mode {
        FusionMode::Holistic => {
            let h = entry
                .holistic
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("entry {} lacks a holistic vector", entry.item_id)))?;
            global_similarity(h, t)
        }
        FusionMode::LateFusion => {
            let sp = entry
                .speech_pool
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("entry {} lacks a speech pool", entry.item_id)))?;
            late_fusion_similarity(&entry.mean, sp, t)
        }
        _ => combined_similarity(&entry.tokens, &entry.mean, t, lambda),
    }
}

/// Scores of query `t` against every index entry.
pub fn score_query(index: &VideoIndex, t: &[f32], lambda: f64) -> Result<Vec<f32>> {
    if let Some(d) = index.dim() {
        if d != t.len() {
            return Err(Error::shape(
                "score_matrix",
                format!("query dim {} vs index dim {d}", t.len()),
            ));
        }
    }
    index
        .entries
        .iter()
        .map(|e| score_entry(index.mode, e, t, lambda))
        .collect()
}

/// Score every query against the offline index. Only stored vectors are
/// touched: no fusion network runs here.
pub fn score_matrix(index: &VideoIndex, queries: &[QueryRecord], lambda: f64) -> Result<ScoreMatrix> {
    check_lambda(lambda)?;
    if queries.is_empty() || index.is_empty() {
        return Err(Error::invalid("score matrix needs at least one query and one video"));
    }
    let mut data = Vec::with_capacity(queries.len() * index.len());
    for q in queries {
        data.extend(score_query(index, &q.embedding, lambda)?);
    }
    Ok(ScoreMatrix {
        values: Tensor::new(queries.len(), index.len(), data)?,
        query_ids: queries.iter().map(|q| q.query_id.clone()).collect(),
        item_ids: index.entries.iter().map(|e| e.item_id.clone()).collect(),
    })
}

/// Per-video graph nodes consumed by [`batch_scores`].
#[derive(Clone, Copy, Debug)]
pub enum VideoVars {
    /// Fused tokens `m x d` and their mean `1 x d`.
    Combined { tokens: Var, mean: Var },
    /// Single holistic vector `1 x d`.
    Holistic(Var),
    /// Audio-visual mean `1 x d` and raw speech pool `1 x d`.
    Late { va_mean: Var, speech_pool: Var },
}

/// Score every query row of `queries` (`B_t x d`) against every video,
/// giving `B_t x B_v`.
pub fn batch_scores<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    videos: &[VideoVars],
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    if videos.is_empty() {
        return Err(Error::invalid("no videos to score"));
    }
    let tn = g.normalize_rows(queries);
    let half = T::of(0.5);
    let mut cols = Vec::with_capacity(videos.len());
    for v in videos {
        let col = match *v {
            VideoVars::Combined { tokens, mean } => {
                let vn = g.normalize_rows(tokens);
                let cos = g.matmul_t(tn, vn)?;
                let scaled = g.scale(cos, T::of(lambda));
                let lse = g.logsumexp_rows(scaled);
                let m = g.shape(tokens).0 as f64;
                let shifted = g.add_const(lse, T::of(-m.ln()));
                let local = g.scale(shifted, T::of(1.0 / lambda));
                let mn = g.normalize_rows(mean);
                let global = g.matmul_t(tn, mn)?;
                let s = g.add(global, local)?;
                g.scale(s, half)
            }
            VideoVars::Holistic(h) => {
                let hn = g.normalize_rows(h);
                g.matmul_t(tn, hn)?
            }
            VideoVars::Late { va_mean, speech_pool } => {
                let an = g.normalize_rows(va_mean);
                let sn = g.normalize_rows(speech_pool);
                let a = g.matmul_t(tn, an)?;
                let b = g.matmul_t(tn, sn)?;
                let s = g.add(a, b)?;
                g.scale(s, half)
            }
        };
        cols.push(col);
    }
    g.concat_cols(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Tokens whose cosine with `e0` equals each requested value.
    fn tokens_with_cosines(cos: &[f64]) -> Tensor<f64> {
        Tensor::from_fn(cos.len(), 2, |r, c| {
            if c == 0 {
                cos[r]
            } else {
                (1.0 - cos[r] * cos[r]).max(0.0).sqrt()
            }
        })
    }

    #[test]
    fn global_examples() {
        let v = [0.3f64, -1.2, 2.0];
        assert!((global_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(global_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((global_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(global_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn local_examples() {
        let t = [1.0, 0.0];
        let equal = tokens_with_cosines(&[0.4, 0.4, 0.4]);
        for lambda in [0.5, 1.0, 20.0, 300.0] {
            assert!((local_similarity(&equal, &t, lambda).unwrap() - 0.4).abs() < 1e-12);
        }
        let mixed = tokens_with_cosines(&[0.0, 1.0]);
        assert!((local_similarity(&mixed, &t, 1000.0).unwrap() - 1.0).abs() < 1e-2);
        let direct = ((1.0 + 1f64.exp()) / 2.0).ln();
        let s = local_similarity(&mixed, &t, 1.0).unwrap();
        assert!((s - direct).abs() < 1e-12);
        assert!((s - 0.62011).abs() < 1e-5);
        assert!(local_similarity(&mixed, &t, 0.0).is_err());
    }

    #[test]
    fn combined_averages() {
        let t = [1.0, 0.0];
        let tok = Tensor::<f64>::new(2, 2, vec![2.0, 0.0, 5.0, 0.0]).unwrap();
        let s = combined_similarity(&tok, &[3.5, 0.0], &t, 20.0).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_scores_match_pairwise() {
        let mut g = Graph::<f64>::new();
        let q = Tensor::new(3, 2, vec![1.0, 0.2, -0.4, 0.9, 0.3, 0.3]).unwrap();
        let toks = [
            Tensor::new(2, 2, vec![0.5, 0.1, -0.3, 0.8]).unwrap(),
            Tensor::new(3, 2, vec![1.0, 1.0, 0.2, -0.7, 0.0, 0.4]).unwrap(),
        ];
        let qv = g.constant(q.clone());
        let mut videos = Vec::new();
        for t in &toks {
            let tv = g.constant(t.clone());
            let mean = g.mean_rows(tv);
            videos.push(VideoVars::Combined { tokens: tv, mean });
        }
        let h = g.constant(Tensor::row_vector(vec![0.4, -0.6]).unwrap());
        videos.push(VideoVars::Holistic(h));
        let s = batch_scores(&mut g, qv, &videos, 20.0).unwrap();
        let sv = g.value(s).clone();
        assert_eq!(sv.shape(), (3, 3));
        for i in 0..3 {
            for (j, t) in toks.iter().enumerate() {
                let mean: Vec<f64> = (0..2)
                    .map(|c| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / t.rows() as f64)
                    .collect();
                let expect = combined_similarity(t, &mean, q.row(i), 20.0).unwrap();
                assert!((sv.get(i, j) - expect).abs() < 1e-12);
            }
            assert!((sv.get(i, 2) - cosine(q.row(i), &[0.4, -0.6])).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn local_between_mean_and_max(
            cos in prop::collection::vec(-1.0f64..1.0, 1..12),
            lambda in 0.1f64..60.0,
        ) {
            let tok = tokens_with_cosines(&cos);
            let s = local_similarity(&tok, &[1.0, 0.0], lambda).unwrap();
            let mean = cos.iter().sum::<f64>() / cos.len() as f64;
            let max = cos.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(s >= mean - 1e-9 && s <= max + 1e-9);
        }

        #[test]
        fn local_is_monotone(
            cos in prop::collection::vec(-1.0f64..0.9, 2..8),
            k in 0usize..8,
            bump in 0.0f64..0.1,
        ) {
            let k = k % cos.len();
            let mut up = cos.clone();
            up[k] += bump;
            let t = [1.0, 0.0];
            let a = local_similarity(&tokens_with_cosines(&cos), &t, 20.0).unwrap();
            let b = local_similarity(&tokens_with_cosines(&up), &t, 20.0).unwrap();
            prop_assert!(b >= a - 1e-12);
        }

        #[test]
        fn combined_is_bounded(
            data in prop::collection::vec(-3.0f64..3.0, 12),
            t in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let tok = Tensor::new(4, 3, data).unwrap();
            let mean: Vec<f64> = (0..3).map(|c| (0..4).map(|r| tok.get(r, c)).sum::<f64>() / 4.0).collect();
            let s = combined_similarity(&tok, &mean, &t, 20.0).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
    }
}
