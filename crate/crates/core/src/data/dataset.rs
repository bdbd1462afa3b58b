//! Items, queries, manifest and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` and `tensors.sve`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{self, Record, RecordKind};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.sve";

pub type TokenMatrix = Tensor<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Visual,
    Sound,
    Speech,
    SoundSpeech,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Visual, Group::Sound, Group::Speech, Group::SoundSpeech];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Visual => "visual",
            Group::Sound => "sound",
            Group::Speech => "speech",
            Group::SoundSpeech => "sound_speech",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord {
    pub item_id: String,
    pub visual_tokens: TokenMatrix,
    pub audio_tokens: Option<TokenMatrix>,
    pub speech_tokens: Option<TokenMatrix>,
    pub teacher_video: Option<Vec<f32>>,
    pub teacher_audio: Option<Vec<f32>>,
    pub group: Option<Group>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    pub embedding: Vec<f32>,
    pub ground_truth_item: String,
    pub group: Option<Group>,
}

/// Shape constants shared by every item in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub dim: usize,
    pub teacher_dim: usize,
    pub m: usize,
    pub n_s: usize,
    pub l_a0: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            dim: 16,
            teacher_dim: 16,
            m: 12,
            n_s: 32,
            l_a0: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Group>,
    #[serde(default)]
    pub audio: bool,
    #[serde(default)]
    pub speech: bool,
    #[serde(default)]
    pub teacher_video: bool,
    #[serde(default)]
    pub teacher_audio: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub id: String,
    pub item: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Group>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub teacher_dim: usize,
    pub m: usize,
    pub n_s: usize,
    pub l_a0: usize,
    #[serde(default)]
    pub items: Vec<ItemEntry>,
    #[serde(default)]
    pub queries: Vec<QueryEntry>,
    #[serde(default)]
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn dims(&self) -> Dims {
        Dims {
            dim: self.dim,
            teacher_dim: self.teacher_dim,
            m: self.m,
            n_s: self.n_s,
            l_a0: self.l_a0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub items: Vec<ItemRecord>,
    pub queries: Vec<QueryRecord>,
    /// Split tag (`train`, `val`, `test`, ...) to item ids.
    pub splits: BTreeMap<String, Vec<String>>,
}

fn tensor_name(item: &str, field: &str) -> String {
    format!("item/{item}/{field}")
}

fn query_name(query: &str) -> String {
    format!("query/{query}")
}

fn check_tokens(item: &str, what: &str, t: &TokenMatrix, rows: Option<usize>, dim: usize) -> Result<()> {
    if t.cols() != dim {
        return Err(Error::InvalidDataset(format!(
            "item {item}: {what} has dim {} but manifest dim is {dim}",
            t.cols()
        )));
    }
    if let Some(r) = rows {
        if t.rows() != r {
            return Err(Error::InvalidDataset(format!(
                "item {item}: {what} has {} rows, expected {r}",
                t.rows()
            )));
        }
    }
    if !t.is_finite() {
        return Err(Error::InvalidDataset(format!("item {item}: {what} has non-finite values")));
    }
    Ok(())
}

fn check_vector(owner: &str, what: &str, v: &[f32], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::InvalidDataset(format!(
            "{owner}: {what} has dim {} but expected {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidDataset(format!("{owner}: {what} has non-finite values")));
    }
    Ok(())
}

/// Scale to unit L2 norm, accumulating in f64.
fn l2_normalize(owner: &str, v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidDataset(format!("{owner}: zero teacher vector")));
    }
    // Already unit length up to f32 rounding: leave the bits alone so that
    // write/read round trips stay exact.
    if (norm - 1.0).abs() <= 1e-6 {
        return Ok(());
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(())
}

impl Dataset {
    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            items: Vec::new(),
            queries: Vec::new(),
            splits: BTreeMap::new(),
        }
    }

    /// Check every type invariant. Errors name the offending item or query.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.m < 1 || d.dim < 2 {
            return Err(Error::InvalidDataset(format!(
                "need m >= 1 and dim >= 2, got m={} dim={}",
                d.m, d.dim
            )));
        }
        let mut ids = HashSet::new();
        for it in &self.items {
            let id = it.item_id.as_str();
            if !ids.insert(id) {
                return Err(Error::InvalidDataset(format!("duplicate item {id}")));
            }
            check_tokens(id, "visual_tokens", &it.visual_tokens, Some(d.m), d.dim)?;
            if let Some(a) = &it.audio_tokens {
                check_tokens(id, "audio_tokens", a, None, d.dim)?;
            }
            if let Some(s) = &it.speech_tokens {
                check_tokens(id, "speech_tokens", s, None, d.dim)?;
                if s.rows() > d.n_s {
                    return Err(Error::InvalidDataset(format!(
                        "item {id}: {} speech tokens exceed n_s={}",
                        s.rows(),
                        d.n_s
                    )));
                }
            }
            let owner = format!("item {id}");
            if let Some(t) = &it.teacher_video {
                check_vector(&owner, "teacher_video", t, d.teacher_dim)?;
            }
            if let Some(t) = &it.teacher_audio {
                check_vector(&owner, "teacher_audio", t, d.teacher_dim)?;
            }
        }
        let mut qids = HashSet::new();
        for q in &self.queries {
            if !qids.insert(q.query_id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate query {}", q.query_id)));
            }
            check_vector(&format!("query {}", q.query_id), "embedding", &q.embedding, d.dim)?;
            if !ids.contains(q.ground_truth_item.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "query {}: unknown ground-truth item {}",
                    q.query_id, q.ground_truth_item
                )));
            }
        }
        for (split, members) in &self.splits {
            for m in members {
                if !ids.contains(m.as_str()) {
                    return Err(Error::InvalidDataset(format!("split {split}: unknown item {m}")));
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let d = self.dims;
        Manifest {
            dim: d.dim,
            teacher_dim: d.teacher_dim,
            m: d.m,
            n_s: d.n_s,
            l_a0: d.l_a0,
            items: self
                .items
                .iter()
                .map(|it| ItemEntry {
                    id: it.item_id.clone(),
                    group: it.group,
                    audio: it.audio_tokens.is_some(),
                    speech: it.speech_tokens.is_some(),
                    teacher_video: it.teacher_video.is_some(),
                    teacher_audio: it.teacher_audio.is_some(),
                })
                .collect(),
            queries: self
                .queries
                .iter()
                .map(|q| QueryEntry {
                    id: q.query_id.clone(),
                    item: q.ground_truth_item.clone(),
                    group: q.group,
                })
                .collect(),
            splits: self.splits.clone(),
        }
    }

    fn records(&self) -> Result<Vec<Record>> {
        let mut out = Vec::new();
        for it in &self.items {
            let id = &it.item_id;
            out.push(Record::tokens(tensor_name(id, "visual"), it.visual_tokens.clone()));
            if let Some(a) = &it.audio_tokens {
                out.push(Record::tokens(tensor_name(id, "audio"), a.clone()));
            }
            if let Some(s) = &it.speech_tokens {
                out.push(Record::tokens(tensor_name(id, "speech"), s.clone()));
            }
            if let Some(t) = &it.teacher_video {
                out.push(Record::vector(tensor_name(id, "teacher_video"), t.clone())?);
            }
            if let Some(t) = &it.teacher_audio {
                out.push(Record::vector(tensor_name(id, "teacher_audio"), t.clone())?);
            }
        }
        for q in &self.queries {
            out.push(Record::vector(query_name(&q.query_id), q.embedding.clone())?);
        }
        Ok(out)
    }

    /// Item indices of a split, in listed order. Unknown split names yield an
    /// empty list.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        let pos: HashMap<&str, usize> = self
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id.as_str(), i))
            .collect();
        self.splits
            .get(split)
            .map(|ids| ids.iter().filter_map(|id| pos.get(id.as_str()).copied()).collect())
            .unwrap_or_default()
    }

    /// Subset with only the given items and the queries pointing at them.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let items: Vec<ItemRecord> = indices.iter().map(|&i| self.items[i].clone()).collect();
        let keep: HashSet<&str> = items.iter().map(|it| it.item_id.as_str()).collect();
        let queries = self
            .queries
            .iter()
            .filter(|q| keep.contains(q.ground_truth_item.as_str()))
            .cloned()
            .collect();
        Dataset {
            dims: self.dims,
            items,
            queries,
            splits: BTreeMap::new(),
        }
    }

    /// Subset for a named split.
    pub fn split(&self, name: &str) -> Dataset {
        self.subset(&self.split_indices(name))
    }

    pub fn item_position(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|it| it.item_id == id)
    }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest())?;
    fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    container::write_container(&dir.join(TENSOR_FILE), &dataset.records()?)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let records = container::read_container(&dir.join(TENSOR_FILE))?;
    from_parts(manifest, records)
}

/// Assemble a dataset from a manifest and decoded container records.
pub fn from_parts(manifest: Manifest, records: Vec<Record>) -> Result<Dataset> {
    let mut by_name: HashMap<String, Record> = HashMap::with_capacity(records.len());
    for r in records {
        let name = r.name.clone();
        if by_name.insert(name.clone(), r).is_some() {
            return Err(Error::InvalidDataset(format!("duplicate record {name}")));
        }
    }
    let mut take = |name: String, kind: RecordKind| -> Result<Tensor<f32>> {
        let r = by_name
            .remove(&name)
            .ok_or_else(|| Error::InvalidDataset(format!("manifest lists {name} but container lacks it")))?;
        if r.kind != kind {
            return Err(Error::InvalidDataset(format!("record {name} has the wrong kind")));
        }
        Ok(r.tensor)
    };
    let vector = |t: Tensor<f32>, name: &str| -> Result<Vec<f32>> {
        if t.rows() != 1 {
            return Err(Error::InvalidDataset(format!("record {name} is not a vector")));
        }
        Ok(t.into_data())
    };

    let mut items = Vec::with_capacity(manifest.items.len());
    for e in &manifest.items {
        let id = &e.id;
        let visual_tokens = take(tensor_name(id, "visual"), RecordKind::Tokens)?;
        let audio_tokens = e
            .audio
            .then(|| take(tensor_name(id, "audio"), RecordKind::Tokens))
            .transpose()?;
        let speech_tokens = e
            .speech
            .then(|| take(tensor_name(id, "speech"), RecordKind::Tokens))
            .transpose()?;
        let mut teacher = |flag: bool, field: &str| -> Result<Option<Vec<f32>>> {
            if !flag {
                return Ok(None);
            }
            let name = tensor_name(id, field);
            let mut v = vector(take(name.clone(), RecordKind::Vector)?, &name)?;
            check_vector(&format!("item {id}"), field, &v, manifest.teacher_dim)?;
            l2_normalize(&format!("item {id}"), &mut v)?;
            Ok(Some(v))
        };
        let teacher_video = teacher(e.teacher_video, "teacher_video")?;
        let teacher_audio = teacher(e.teacher_audio, "teacher_audio")?;
        items.push(ItemRecord {
            item_id: id.clone(),
            visual_tokens,
            audio_tokens,
            speech_tokens,
            teacher_video,
            teacher_audio,
            group: e.group,
        });
    }
    let mut queries = Vec::with_capacity(manifest.queries.len());
    for q in &manifest.queries {
        let name = query_name(&q.id);
        let embedding = vector(take(name.clone(), RecordKind::Vector)?, &name)?;
        queries.push(QueryRecord {
            query_id: q.id.clone(),
            embedding,
            ground_truth_item: q.item.clone(),
            group: q.group,
        });
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(Error::InvalidDataset(format!(
            "container record {extra} is not listed in the manifest"
        )));
    }
    let ds = Dataset {
        dims: manifest.dims(),
        items,
        queries,
        splits: manifest.splits,
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-modality tokens with absent branches zero-filled.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedItem {
    pub visual: TokenMatrix,
    pub audio: TokenMatrix,
    pub speech: TokenMatrix,
    pub has_audio: bool,
    pub has_speech: bool,
}

impl ResolvedItem {
    /// Back to a record with every modality present.
    pub fn to_record(&self, base: &ItemRecord) -> ItemRecord {
        ItemRecord {
            audio_tokens: Some(self.audio.clone()),
            speech_tokens: Some(self.speech.clone()),
            visual_tokens: self.visual.clone(),
            ..base.clone()
        }
    }
}

/// Replace absent audio with `l_a0` zero tokens and absent speech with
/// `n_s` zero tokens.
pub fn resolve_missing(item: &ItemRecord, dims: &Dims) -> ResolvedItem {
    let d = item.visual_tokens.cols();
    ResolvedItem {
        visual: item.visual_tokens.clone(),
        audio: item
            .audio_tokens
            .clone()
            .unwrap_or_else(|| Tensor::zeros(dims.l_a0.max(1), d)),
        speech: item
            .speech_tokens
            .clone()
            .unwrap_or_else(|| Tensor::zeros(dims.n_s.max(1), d)),
        has_audio: item.audio_tokens.is_some(),
        has_speech: item.speech_tokens.is_some(),
    }
}
