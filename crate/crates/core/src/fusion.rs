//! End-to-end video representation and the offline video index.
//!
//! Visual tokens `v` (m x d) are combined with an audio branch (resampled
//! audio tokens fed through gated fusion, giving `a_hat`) and a speech
//! branch (speech tokens fed through a separate gated fusion, giving
//! `s_hat`). [`FusionMode`] selects the combination rule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::data::{container, Dataset, Record, ResolvedItem};
use crate::error::{Error, Result};
use crate::losses::initial_logit_scale;
use crate::nn::{AttentionPool, BlockConfig, Bound, GatedFusion, Init, ParamSet, Resampler};
use crate::similarity::VideoVars;

/// Audio weight relative to the visual weight in the two-branch
/// combination `0.95 v + 0.05 a_hat`, applied as `v + (0.05/0.95) a_hat`.
pub const AUDIO_RATIO: f64 = 0.05 / 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Save,
    Avigate,
    AvigatePlus,
    VisionOnly,
    NoAudio,
    LateFusion,
    LearnableWeights,
    Holistic,
}

impl FusionMode {
    pub const ALL: [FusionMode; 8] = [
        Self::Save,
        Self::Avigate,
        Self::AvigatePlus,
        Self::VisionOnly,
        Self::NoAudio,
        Self::LateFusion,
        Self::LearnableWeights,
        Self::Holistic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Save => "save",
            Self::Avigate => "avigate",
            Self::AvigatePlus => "avigate_plus",
            Self::VisionOnly => "vision_only",
            Self::NoAudio => "no_audio",
            Self::LateFusion => "late_fusion",
            Self::LearnableWeights => "learnable_weights",
            Self::Holistic => "holistic",
        }
    }

    pub fn uses_audio(self) -> bool {
        !matches!(self, Self::VisionOnly | Self::NoAudio)
    }

    pub fn uses_speech_fusion(self) -> bool {
        matches!(self, Self::Save | Self::NoAudio | Self::LearnableWeights | Self::Holistic)
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion mode {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub resampler_layers: usize,
    pub fusion_layers: usize,
    /// Resampler output length; matches the frame count `m`.
    pub num_queries: usize,
    /// Longest audio token sequence the resampler accepts.
    pub max_audio_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 4,
            ff_mult: 4,
            resampler_layers: 1,
            fusion_layers: 2,
            num_queries: 12,
            max_audio_len: 64,
            init_seed: 0,
        }
    }
}

/// All trainable parameters and the layer layout over them.
#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    resampler: Resampler,
    audio_fusion: GatedFusion,
    speech_fusion: GatedFusion,
    pool: AttentionPool,
    logit_scale: crate::nn::ParamId,
    alpha: crate::nn::ParamId,
    beta: crate::nn::ParamId,
}

/// Graph nodes produced for one item.
#[derive(Clone, Copy, Debug)]
pub struct ItemVars {
    pub video: VideoVars,
    /// Fused token set: the combined tokens, the save-mode tokens under
    /// the holistic pool, or `v + a_hat` for late fusion.
    pub tokens: Var,
    /// Normalized mean of the visual tokens, `1 x d`.
    pub v_pooled: Var,
    /// Normalized mean of the resampled, pre-fusion audio tokens.
    pub a_pooled: Option<Var>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.dim < 2 {
            return Err(Error::invalid("model dim must be at least 2"));
        }
        let mut ps = ParamSet::new();
        let mut init = Init::new(config.init_seed);
        let cfg = BlockConfig {
            dim: config.dim,
            heads: config.heads,
            ff_mult: config.ff_mult,
        };
        let resampler = Resampler::new(
            &mut ps,
            &mut init,
            "resampler",
            &cfg,
            config.resampler_layers,
            config.num_queries,
            config.max_audio_len,
        )?;
        let audio_fusion = GatedFusion::new(&mut ps, &mut init, "audio_fusion", &cfg, config.fusion_layers)?;
        let speech_fusion = GatedFusion::new(&mut ps, &mut init, "speech_fusion", &cfg, config.fusion_layers)?;
        let pool = AttentionPool::new(&mut ps, &mut init, "holistic", config.dim);
        let logit_scale = ps.add("logit_scale", Tensor::scalar(T::of(initial_logit_scale())));
        let alpha = ps.add("alpha", Tensor::scalar(T::one()));
        let beta = ps.add("beta", Tensor::scalar(T::zero()));
        Ok(Self {
            config,
            params: ps,
            resampler,
            audio_fusion,
            speech_fusion,
            pool,
            logit_scale,
            alpha,
            beta,
        })
    }

    /// Same layout with externally supplied values, e.g. from a checkpoint.
    pub fn with_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in model.params.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::invalid(format!(
                    "parameter {got_name} {:?} does not match {name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            params: self.params.cast(),
            resampler: self.resampler.clone(),
            audio_fusion: self.audio_fusion.clone(),
            speech_fusion: self.speech_fusion.clone(),
            pool: self.pool,
            logit_scale: self.logit_scale,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn logit_scale_id(&self) -> crate::nn::ParamId {
        self.logit_scale
    }

    pub fn gate_ids(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        (self.audio_fusion.gate, self.speech_fusion.gate)
    }

    pub fn mixing_ids(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        (self.alpha, self.beta)
    }

    fn check_item(&self, item: &ResolvedItem) -> Result<()> {
        let d = self.config.dim;
        for (what, t) in [("visual", &item.visual), ("audio", &item.audio), ("speech", &item.speech)] {
            if t.cols() != d {
                return Err(Error::shape(
                    "forward_video",
                    format!("{what} tokens have dim {} but the model has {d}", t.cols()),
                ));
            }
        }
        Ok(())
    }

    /// Build the representation of one item inside `g`. `want_pooled`
    /// adds the pre-fusion pooled embeddings used for alignment.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        item: &ResolvedItem,
        mode: FusionMode,
        want_pooled: bool,
    ) -> Result<ItemVars> {
        self.check_item(item)?;
        let v = g.constant(item.visual.cast());
        let resampled = if mode.uses_audio() || want_pooled {
            let a = g.constant(item.audio.cast());
            Some(self.resampler.forward(g, p, a)?)
        } else {
            None
        };
        let v_pooled = if want_pooled {
            let m = g.mean_rows(v);
            Some(g.normalize_rows(m))
        } else {
            None
        };
        let a_pooled = match (want_pooled, resampled) {
            (true, Some(r)) => {
                let m = g.mean_rows(r);
                Some(g.normalize_rows(m))
            }
            _ => None,
        };
        let a_hat = match resampled {
            Some(r) if mode.uses_audio() => Some(self.audio_fusion.forward(g, p, v, r)?),
            _ => None,
        };
        let s_hat = if mode.uses_speech_fusion() {
            let s = g.constant(item.speech.cast());
            Some(self.speech_fusion.forward(g, p, v, s)?)
        } else {
            None
        };
        let weights = (mode == FusionMode::LearnableWeights).then(|| (p.var(self.alpha), p.var(self.beta)));
        let tokens = combine_tokens(g, mode, v, a_hat, s_hat, weights)?;
        let video = match mode {
            FusionMode::Holistic => VideoVars::Holistic(self.pool.forward(g, p, tokens)?),
            FusionMode::LateFusion => {
                let va_mean = g.mean_rows(tokens);
                let s = g.constant(item.speech.cast());
                let speech_pool = g.mean_rows(s);
                VideoVars::Late { va_mean, speech_pool }
            }
            _ => combined(g, tokens),
        };
        Ok(ItemVars {
            video,
            tokens,
            v_pooled: match v_pooled {
                Some(x) => x,
                None => {
                    let m = g.mean_rows(v);
                    g.normalize_rows(m)
                }
            },
            a_pooled,
        })
    }

    /// Fused tokens and their mean. Late fusion has no single fused
    /// token set and is rejected.
    pub fn forward_video(&self, item: &ResolvedItem, mode: FusionMode) -> Result<(Tensor<T>, Vec<T>)> {
        if mode == FusionMode::LateFusion {
            return Err(Error::invalid(
                "late_fusion is scored from separate branches; use an index entry instead",
            ));
        }
        let mode = if mode == FusionMode::Holistic { FusionMode::Save } else { mode };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        match self.forward_graph(&mut g, &p, item, mode, false)?.video {
            VideoVars::Combined { tokens, mean } => {
                Ok((g.value(tokens).clone(), g.value(mean).data().to_vec()))
            }
            _ => unreachable!("combined modes only"),
        }
    }

    /// Normalized means of the visual tokens and of the resampled audio
    /// tokens, before any fusion.
    pub fn pre_fusion_pooled(&self, item: &ResolvedItem) -> Result<(Vec<T>, Vec<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let vars = self.forward_graph(&mut g, &p, item, FusionMode::VisionOnly, true)?;
        let a = vars.a_pooled.expect("pooled audio");
        Ok((g.value(vars.v_pooled).data().to_vec(), g.value(a).data().to_vec()))
    }

    /// Attention-weighted single vector over fused tokens.
    pub fn holistic_aggregate(&self, tokens: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let t = g.constant(tokens.clone());
        let h = self.pool.forward(&mut g, &p, t)?;
        Ok(g.value(h).data().to_vec())
    }

    /// Everything the online scorer needs for one item.
    pub fn index_entry(&self, item_id: &str, item: &ResolvedItem, mode: FusionMode) -> Result<IndexEntry> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let vars = self.forward_graph(&mut g, &p, item, mode, false)?;
        let vec32 = |v: Var| -> Vec<f32> {
            g.value(v).data().iter().map(|x| x.to_f64_lossy() as f32).collect()
        };
        let (mean, holistic, speech_pool) = match vars.video {
            VideoVars::Combined { mean, .. } => (vec32(mean), None, None),
            VideoVars::Holistic(h) => {
                let t = g.value(vars.tokens);
                let mean = (0..t.cols())
                    .map(|c| {
                        let s = (0..t.rows()).fold(T::zero(), |a, r| a + t.get(r, c));
                        (s / T::of(t.rows() as f64)).to_f64_lossy() as f32
                    })
                    .collect();
                (mean, Some(vec32(h)), None)
            }
            VideoVars::Late { va_mean, speech_pool } => (vec32(va_mean), None, Some(vec32(speech_pool))),
        };
        Ok(IndexEntry {
            item_id: item_id.to_string(),
            tokens: g.value(vars.tokens).cast(),
            mean,
            holistic,
            speech_pool,
        })
    }

    /// One [`index_entry`](Self::index_entry) per item of `dataset`.
    pub fn precompute_index(&self, dataset: &Dataset, mode: FusionMode) -> Result<VideoIndex> {
        let entries = dataset
            .items
            .iter()
            .map(|it| {
                let r = crate::data::resolve_missing(it, &dataset.dims);
                self.index_entry(&it.item_id, &r, mode)
            })
            .collect::<Result<_>>()?;
        Ok(VideoIndex { mode, entries })
    }
}

fn branch(x: Option<Var>, what: &str) -> Result<Var> {
    x.ok_or_else(|| Error::invalid(format!("{what} branch output required")))
}

/// Token combination rule of each mode, given the branch outputs it
/// needs. `weights` holds the `(alpha, beta)` scalars for learnable
/// weights.
pub fn combine_tokens<T: Scalar>(
    g: &mut Graph<T>,
    mode: FusionMode,
    v: Var,
    a_hat: Option<Var>,
    s_hat: Option<Var>,
    weights: Option<(Var, Var)>,
) -> Result<Var> {
    match mode {
        FusionMode::VisionOnly => Ok(v),
        FusionMode::Save | FusionMode::Holistic => {
            let sum = g.add(branch(a_hat, "audio")?, branch(s_hat, "speech")?)?;
            let half = g.scale(sum, T::of(0.5));
            g.add(v, half)
        }
        FusionMode::Avigate | FusionMode::AvigatePlus => {
            let a = g.scale(branch(a_hat, "audio")?, T::of(AUDIO_RATIO));
            g.add(v, a)
        }
        FusionMode::NoAudio => g.add(v, branch(s_hat, "speech")?),
        FusionMode::LateFusion => g.add(v, branch(a_hat, "audio")?),
        FusionMode::LearnableWeights => {
            let (alpha, beta) =
                weights.ok_or_else(|| Error::invalid("learnable weights need alpha and beta"))?;
            let ab = g.add(alpha, beta)?;
            let neg = g.scale(ab, T::of(-1.0));
            let rest = g.add_const(neg, T::one());
            let wv = g.mul_scalar(v, alpha)?;
            let wa = g.mul_scalar(branch(a_hat, "audio")?, beta)?;
            let ws = g.mul_scalar(branch(s_hat, "speech")?, rest)?;
            let t = g.add(wv, wa)?;
            g.add(t, ws)
        }
    }
}

fn combined<T: Scalar>(g: &mut Graph<T>, tokens: Var) -> VideoVars {
    let mean = g.mean_rows(tokens);
    VideoVars::Combined { tokens, mean }
}

/// Offline representation of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub item_id: String,
    pub tokens: Tensor<f32>,
    pub mean: Vec<f32>,
    pub holistic: Option<Vec<f32>>,
    pub speech_pool: Option<Vec<f32>>,
}

/// Precomputed gallery scored at query time without running any fusion
/// network.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoIndex {
    pub mode: FusionMode,
    pub entries: Vec<IndexEntry>,
}

const MODE_PREFIX: &str = "meta/mode/";

impl VideoIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.mean.len())
    }

    pub fn to_records(&self) -> Result<Vec<Record>> {
        let mut out = vec![Record::vector(format!("{MODE_PREFIX}{}", self.mode), vec![0.0])?];
        for e in &self.entries {
            let id = &e.item_id;
            out.push(Record::tokens(format!("index/{id}/tokens"), e.tokens.clone()));
            out.push(Record::vector(format!("index/{id}/mean"), e.mean.clone())?);
            if let Some(h) = &e.holistic {
                out.push(Record::vector(format!("index/{id}/holistic"), h.clone())?);
            }
            if let Some(s) = &e.speech_pool {
                out.push(Record::vector(format!("index/{id}/speech_pool"), s.clone())?);
            }
        }
        Ok(out)
    }

    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut iter = records.into_iter();
        let head = iter.next().ok_or_else(|| Error::InvalidDataset("empty index".into()))?;
        let mode: FusionMode = head
            .name
            .strip_prefix(MODE_PREFIX)
            .ok_or_else(|| Error::InvalidDataset("index lacks a mode record".into()))?
            .parse()?;
        let mut entries: Vec<IndexEntry> = Vec::new();
        for r in iter {
            let rest = r
                .name
                .strip_prefix("index/")
                .ok_or_else(|| Error::InvalidDataset(format!("unexpected record {}", r.name)))?;
            let (id, field) = rest
                .rsplit_once('/')
                .ok_or_else(|| Error::InvalidDataset(format!("unexpected record {}", r.name)))?;
            if field == "tokens" {
                entries.push(IndexEntry {
                    item_id: id.to_string(),
                    tokens: r.tensor,
                    mean: Vec::new(),
                    holistic: None,
                    speech_pool: None,
                });
                continue;
            }
            let e = entries
                .last_mut()
                .filter(|e| e.item_id == id)
                .ok_or_else(|| Error::CorruptRecord(r.name.clone()))?;
            let v = r.tensor.into_data();
            match field {
                "mean" => e.mean = v,
                "holistic" => e.holistic = Some(v),
                "speech_pool" => e.speech_pool = Some(v),
                _ => return Err(Error::InvalidDataset(format!("unexpected record {}", r.name))),
            }
        }
        if let Some(e) = entries.iter().find(|e| e.mean.len() != e.tokens.cols()) {
            return Err(Error::CorruptRecord(format!("index/{}/mean", e.item_id)));
        }
        Ok(Self { mode, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_container(path, &self.to_records()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_records(container::read_container(path)?)
    }
}
