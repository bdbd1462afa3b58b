//! Retrieval and alignment objectives.
//!
//! Affinity matrices are `B x B` with videos on rows and audios on
//! columns. Teacher affinities enter graphs as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, pearson_stats, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Degeneracy threshold on the standard deviation of a softmaxed row.
pub const PEARSON_EPS: f64 = 1e-8;
pub const DEFAULT_ALIGN_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignKind {
    SoftAlbef,
    HardAlbef,
    Filtered,
    Mse,
    Huber,
    None,
}

impl AlignKind {
    pub fn needs_teacher(self) -> bool {
        matches!(self, Self::SoftAlbef | Self::Filtered | Self::Mse | Self::Huber)
    }
}

impl std::str::FromStr for AlignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "soft_albef" => Self::SoftAlbef,
            "hard_albef" => Self::HardAlbef,
            "filtered" | "filtered_albef" => Self::Filtered,
            "mse" => Self::Mse,
            "huber" => Self::Huber,
            "none" => Self::None,
            _ => return Err(Error::invalid(format!("unknown align kind {s}"))),
        })
    }
}

/// `M0[i,j] = video_i . audio_j`.
pub fn affinity_from_teacher<T: Scalar>(video: &[&[T]], audio: &[&[T]]) -> Result<Tensor<T>> {
    if video.len() != audio.len() || video.is_empty() {
        return Err(Error::shape(
            "affinity_from_teacher",
            format!("{} video vs {} audio vectors", video.len(), audio.len()),
        ));
    }
    let b = video.len();
    let mut out = Tensor::zeros(b, b);
    for (i, v) in video.iter().enumerate() {
        for (j, a) in audio.iter().enumerate() {
            if v.len() != a.len() {
                return Err(Error::shape("affinity_from_teacher", "teacher dims differ"));
            }
            out.set(i, j, dot(v, a));
        }
    }
    Ok(out)
}

/// `M1 = V A^T` for row-stacked pooled (already normalized) embeddings.
pub fn student_affinity<T: Scalar>(g: &mut Graph<T>, v_means: Var, a_means: Var) -> Result<Var> {
    g.matmul_t(v_means, a_means)
}

/// `1 - corr(p, q)`; 0 when either input is constant.
pub fn pearson_row_distance<T: Scalar>(p: &[T], q: &[T], eps: T) -> Result<T> {
    if p.len() != q.len() || p.len() < 2 {
        return Err(Error::shape(
            "pearson_row_distance",
            format!("lengths {} and {}", p.len(), q.len()),
        ));
    }
    Ok(pearson_stats(p, q, eps).map_or(T::zero(), |s| T::one() - s.corr))
}

fn check_square<T: Scalar>(g: &Graph<T>, op: &'static str, m: Var) -> Result<usize> {
    let (r, c) = g.shape(m);
    if r != c {
        return Err(Error::shape(op, format!("{r}x{c} is not square")));
    }
    Ok(r)
}

fn check_pair<T: Scalar>(g: &Graph<T>, op: &'static str, m0: Var, m1: Var) -> Result<usize> {
    let b = check_square(g, op, m0)?;
    if g.shape(m1) != (b, b) {
        return Err(Error::shape(
            op,
            format!("teacher {b}x{b} vs student {:?}", g.shape(m1)),
        ));
    }
    Ok(b)
}

/// Row and column softmaxes of `m`, both laid out row-wise.
fn row_col_softmax<T: Scalar>(g: &mut Graph<T>, m: Var) -> (Var, Var) {
    let rows = g.softmax_rows(m);
    let mt = g.transpose(m);
    let cols = g.softmax_rows(mt);
    (rows, cols)
}

/// Mean Pearson distance between softmaxed rows plus the same over
/// softmaxed columns.
pub fn soft_albef_loss<T: Scalar>(g: &mut Graph<T>, m0: Var, m1: Var) -> Result<Var> {
    check_pair(g, "soft_albef_loss", m0, m1)?;
    let (p0r, p0c) = row_col_softmax(g, m0);
    let (p1r, p1c) = row_col_softmax(g, m1);
    let eps = T::of(PEARSON_EPS);
    let dr = g.pearson_rows(p0r, p1r, eps)?;
    let dc = g.pearson_rows(p0c, p1c, eps)?;
    let row = g.mean(dr);
    let col = g.mean(dc);
    g.add(row, col)
}

/// `-mean_i log softmax(logits)[i,i]`.
fn diagonal_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let b = g.shape(logits).0;
    let ls = g.log_softmax_rows(logits);
    let eye = g.constant(Tensor::identity(b));
    let diag = g.mul(ls, eye)?;
    let s = g.sum(diag);
    Ok(g.scale(s, T::of(-1.0 / b as f64)))
}

/// Symmetric cross-entropy: half the row-wise plus half the column-wise
/// diagonal cross-entropy of `logits`.
fn symmetric_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let row = diagonal_cross_entropy(g, logits)?;
    let lt = g.transpose(logits);
    let col = diagonal_cross_entropy(g, lt)?;
    let s = g.add(row, col)?;
    Ok(g.scale(s, T::of(0.5)))
}

/// Identity-target alignment on `M1 / temperature`.
pub fn hard_albef_loss<T: Scalar>(g: &mut Graph<T>, m1: Var, temperature: f64) -> Result<Var> {
    let b = check_square(g, "hard_albef_loss", m1)?;
    if b < 2 {
        return Err(Error::invalid("hard_albef_loss needs a batch of at least 2"));
    }
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let logits = g.scale(m1, T::of(1.0 / temperature));
    symmetric_cross_entropy(g, logits)
}

/// Indices kept when the lowest `1 - keep_ratio` fraction of teacher
/// diagonal scores is dropped. Ties drop the lowest index first; the
/// result is in ascending index order.
pub fn filter_keep_indices<T: Scalar>(diag: &[T], keep_ratio: f64) -> Result<Vec<usize>> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!("keep_ratio {keep_ratio} outside (0, 1]")));
    }
    let b = diag.len();
    let keep = ((keep_ratio * b as f64).ceil() as usize).min(b);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| {
        diag[i]
            .partial_cmp(&diag[j])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept = order.split_off(b - keep);
    kept.sort_unstable();
    Ok(kept)
}

/// Hard alignment over the rows and columns whose teacher diagonal
/// survives filtering. `None` when fewer than two remain.
pub fn filtered_albef_loss<T: Scalar>(
    g: &mut Graph<T>,
    m1: Var,
    m0: &Tensor<T>,
    keep_ratio: f64,
    temperature: f64,
) -> Result<Option<Var>> {
    let b = check_square(g, "filtered_albef_loss", m1)?;
    if m0.shape() != (b, b) {
        return Err(Error::shape("filtered_albef_loss", "teacher and student sizes differ"));
    }
    let diag: Vec<T> = (0..b).map(|i| m0.get(i, i)).collect();
    let kept = filter_keep_indices(&diag, keep_ratio)?;
    if kept.len() < 2 {
        log::debug!("filtered alignment skipped: {} of {b} rows kept", kept.len());
        return Ok(None);
    }
    let rows = g.select_rows(m1, &kept)?;
    let rt = g.transpose(rows);
    let sub_t = g.select_rows(rt, &kept)?;
    let sub = g.transpose(sub_t);
    hard_albef_loss(g, sub, temperature).map(Some)
}

fn softmax_penalty<T: Scalar>(
    g: &mut Graph<T>,
    m0: Var,
    m1: Var,
    penalty: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let (p0r, p0c) = row_col_softmax(g, m0);
    let (p1r, p1c) = row_col_softmax(g, m1);
    let dr = g.sub(p1r, p0r)?;
    let dc = g.sub(p1c, p0c)?;
    let er = penalty(g, dr)?;
    let ec = penalty(g, dc)?;
    let row = g.mean(er);
    let col = g.mean(ec);
    g.add(row, col)
}

/// Mean squared difference of softmaxed rows plus that of columns.
pub fn mse_align_loss<T: Scalar>(g: &mut Graph<T>, m0: Var, m1: Var) -> Result<Var> {
    check_pair(g, "mse_align_loss", m0, m1)?;
    softmax_penalty(g, m0, m1, |g, d| g.mul(d, d))
}

/// As [`mse_align_loss`] with an elementwise Huber penalty.
pub fn huber_align_loss<T: Scalar>(g: &mut Graph<T>, m0: Var, m1: Var, delta: f64) -> Result<Var> {
    check_pair(g, "huber_align_loss", m0, m1)?;
    if delta <= 0.0 {
        return Err(Error::invalid("huber delta must be positive"));
    }
    softmax_penalty(g, m0, m1, |g, d| Ok(g.huber(d, T::of(delta))))
}

/// Symmetric InfoNCE over a square score matrix with positives on the
/// diagonal: logits are `(s - margin I) * exp(logit_scale)`.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    logit_scale: Var,
    margin: f64,
) -> Result<Var> {
    let b = check_square(g, "contrastive_loss", scores)?;
    let shifted = if margin != 0.0 {
        let m = g.constant(Tensor::identity(b).map(|x| x * T::of(margin)));
        g.sub(scores, m)?
    } else {
        scores
    };
    let scale = g.exp(logit_scale);
    let logits = g.mul_scalar(shifted, scale)?;
    symmetric_cross_entropy(g, logits)
}

/// Initial logit scale, `ln(1 / 0.07)`.
pub fn initial_logit_scale() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Upper clamp applied to the logit scale after every update.
pub fn max_logit_scale() -> f64 {
    100.0f64.ln()
}

/// The two terms are combined with unit weights.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, contrastive: Var, alignment: Option<Var>) -> Result<Var> {
    match alignment {
        Some(a) => g.add(contrastive, a),
        None => Ok(contrastive),
    }
}
