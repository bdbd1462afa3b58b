//! Synthetic multimodal embedding datasets with a known latent structure.
//!
//! Every item carries three latents of size `k`: visual `z_vis`, audio
//! `z_aud` and speech `z_sp`. Two maps into the query space render them:
//! `A` (`d x k`) for what is seen or heard and `S` (`d x k`) for what is
//! said.
//! - visual tokens: `A (z_vis + frame jitter) + noise`
//! - speech tokens: start token, `S (z_sp + jitter) + noise` per token,
//!   end token; the speech space coincides with the query space
//! - audio tokens: `R (A (z_aud + jitter) + noise)` with a fixed random
//!   rotation `R`
//!
//! Matched audio uses `z_aud = sqrt(w) z_vis + sqrt(1-w) xi`; a fraction
//! `rho` of items instead get an independent `z_aud`. Queries sum the
//! rendered latents named by the item's group. Teacher vectors are
//! noisy images of `z_vis` and `z_aud` under a separate map into the
//! teacher space.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{container, Dataset, Dims, Group, ItemRecord, QueryRecord, Record};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_items: usize,
    pub dim: usize,
    pub teacher_dim: usize,
    pub latent_dim: usize,
    pub m: usize,
    pub audio_len: usize,
    pub n_s: usize,
    pub min_speech_len: usize,
    /// Proportions of `visual`, `sound`, `speech`, `sound_speech`.
    pub group_mix: [f64; 4],
    pub rho: f64,
    pub missing_audio: f64,
    pub missing_speech: f64,
    /// Share of `z_vis` in a matched `z_aud`.
    pub audio_visual_corr: f64,
    pub frame_jitter: f64,
    pub visual_noise: f64,
    pub audio_noise: f64,
    pub speech_noise: f64,
    pub query_noise: f64,
    pub teacher_noise: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Intended training batch size; only used for a size warning.
    pub batch_hint: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 512,
            dim: 16,
            teacher_dim: 16,
            latent_dim: 8,
            m: 12,
            audio_len: 12,
            n_s: 32,
            min_speech_len: 4,
            group_mix: [0.2, 0.3, 0.4, 0.1],
            rho: 0.0,
            missing_audio: 0.0,
            missing_speech: 0.0,
            audio_visual_corr: 0.2,
            frame_jitter: 0.5,
            visual_noise: 0.3,
            audio_noise: 0.3,
            speech_noise: 0.3,
            query_noise: 0.3,
            teacher_noise: 0.2,
            train_fraction: 0.625,
            val_fraction: 0.125,
            batch_hint: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.group_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.group_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!("group proportions must sum to 1, got {sum}")));
        }
        for (name, f) in [
            ("rho", self.rho),
            ("missing_audio", self.missing_audio),
            ("missing_speech", self.missing_speech),
            ("audio_visual_corr", self.audio_visual_corr),
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {f}")));
            }
        }
        if self.train_fraction + self.val_fraction > 1.0 + 1e-12 {
            return Err(Error::invalid("train and val fractions exceed 1"));
        }
        if self.n_items < 1 || self.m < 1 || self.dim < 2 || self.latent_dim < 1 || self.audio_len < 1 {
            return Err(Error::invalid("n_items, m, latent_dim, audio_len >= 1 and dim >= 2 required"));
        }
        if self.n_s < self.min_speech_len + 2 || self.min_speech_len < 1 {
            return Err(Error::invalid("n_s must fit start, end and at least min_speech_len >= 1 tokens"));
        }
        for (name, s) in [
            ("frame_jitter", self.frame_jitter),
            ("visual_noise", self.visual_noise),
            ("audio_noise", self.audio_noise),
            ("speech_noise", self.speech_noise),
            ("query_noise", self.query_noise),
            ("teacher_noise", self.teacher_noise),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite non-negative scale")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            dim: self.dim,
            teacher_dim: self.teacher_dim,
            m: self.m,
            n_s: self.n_s,
            l_a0: self.audio_len,
        }
    }
}

/// Latents of one item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemLatent {
    pub vis: Vec<f64>,
    pub aud: Vec<f64>,
    pub sp: Vec<f64>,
}

/// Which latent components a query is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentMask {
    pub vis: bool,
    pub aud: bool,
    pub sp: bool,
}

impl LatentMask {
    pub fn for_group(g: Group) -> Self {
        match g {
            Group::Visual => Self { vis: true, aud: false, sp: false },
            Group::Sound => Self { vis: false, aud: true, sp: false },
            Group::Speech => Self { vis: false, aud: false, sp: true },
            Group::SoundSpeech => Self { vis: false, aud: true, sp: true },
        }
    }
}

/// Noise-free latent description of a query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryLatent {
    pub mask: LatentMask,
    pub latent: ItemLatent,
}

/// Debug channel: generator latents for every item and query.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub items: Vec<ItemLatent>,
    pub queries: Vec<QueryLatent>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Latent relevance: negative squared distance over the masked parts.
pub fn relevance(q: &QueryLatent, item: &ItemLatent) -> f64 {
    let mut d = 0.0;
    if q.mask.vis {
        d += sq_dist(&q.latent.vis, &item.vis);
    }
    if q.mask.aud {
        d += sq_dist(&q.latent.aud, &item.aud);
    }
    if q.mask.sp {
        d += sq_dist(&q.latent.sp, &item.sp);
    }
    -d
}

/// Item indices in decreasing relevance, ties in index order.
pub fn oracle_ranking(q: &QueryLatent, items: &[ItemLatent]) -> Result<Vec<usize>> {
    if items.is_empty() {
        return Err(Error::invalid("no item latents"));
    }
    let rel: Vec<f64> = items.iter().map(|it| relevance(q, it)).collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| rel[b].total_cmp(&rel[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Pessimistic oracle rank of item `gt` for query `q`.
pub fn oracle_rank(q: &QueryLatent, items: &[ItemLatent], gt: usize) -> Result<usize> {
    if gt >= items.len() {
        return Err(Error::invalid("no latent for the ground-truth item"));
    }
    let rel: Vec<f64> = items.iter().map(|it| relevance(q, it)).collect();
    Ok(crate::eval::rank_of(&rel, gt))
}

fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream, index))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v = gaussian(rng, d);
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_fn(d, d, |r, c| cols[c][r])
}

fn apply(m: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add_noise(rng: &mut ChaCha8Rng, x: &mut [f64], std: f64) {
    for v in x.iter_mut() {
        *v += std * rng.sample::<f64, _>(StandardNormal);
    }
}

fn normalized(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in &mut x {
            *v /= n;
        }
    }
    x
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Integer counts per category with the largest remainders rounded up so
/// that they sum to `n`.
fn exact_counts(props: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// `round(fraction * n)` item indices drawn by a seeded permutation.
fn exact_subset(seed: u64, stream: u64, n: usize, fraction: f64) -> Vec<bool> {
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, stream, 0));
    let mut flags = vec![false; n];
    for &i in &order[..k] {
        flags[i] = true;
    }
    flags
}

const STREAM_WORLD: u64 = 1;
const STREAM_GROUPS: u64 = 2;
const STREAM_MISMATCH: u64 = 3;
const STREAM_NO_AUDIO: u64 = 4;
const STREAM_NO_SPEECH: u64 = 5;
const STREAM_SPLITS: u64 = 6;
const STREAM_LATENT: u64 = 7;
const STREAM_RENDER: u64 = 8;
const STREAM_QUERY: u64 = 9;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Modality {
    Visual,
    Audio,
    Speech,
}

/// Fixed maps shared by every item of a generated dataset.
#[derive(Clone, Debug)]
pub struct World {
    pub config: SynthConfig,
    pub semantic: Tensor<f64>,
    pub speech_map: Tensor<f64>,
    pub rotation: Tensor<f64>,
    pub teacher_map: Tensor<f64>,
    pub speech_start: Vec<f64>,
    pub speech_end: Vec<f64>,
}

impl World {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, STREAM_WORLD, 0);
        let k = config.latent_dim;
        let scale = 1.0 / (k as f64).sqrt();
        let semantic = gaussian_matrix(&mut rng, config.dim, k, scale);
        let speech_map = gaussian_matrix(&mut rng, config.dim, k, scale);
        let rotation = random_rotation(&mut rng, config.dim);
        let teacher_map = gaussian_matrix(&mut rng, config.teacher_dim, k, scale);
        let speech_start = gaussian(&mut rng, config.dim);
        let speech_end = gaussian(&mut rng, config.dim);
        Ok(Self {
            config: config.clone(),
            semantic,
            speech_map,
            rotation,
            teacher_map,
            speech_start,
            speech_end,
        })
    }

    /// Draw latents for item `index`; `mismatched` makes `z_aud`
    /// independent of `z_vis`.
    pub fn draw_latent(&self, index: usize, mismatched: bool) -> ItemLatent {
        let k = self.config.latent_dim;
        let mut rng = rng_for(self.config.seed, STREAM_LATENT, index as u64);
        let vis = gaussian(&mut rng, k);
        let sp = gaussian(&mut rng, k);
        let xi = gaussian(&mut rng, k);
        let aud = if mismatched {
            xi
        } else {
            let w = self.config.audio_visual_corr;
            vis.iter().zip(&xi).map(|(v, x)| w.sqrt() * v + (1.0 - w).sqrt() * x).collect()
        };
        ItemLatent { vis, aud, sp }
    }

    fn render_tokens(&self, rng: &mut ChaCha8Rng, z: &[f64], rows: usize, noise: f64, kind: Modality) -> Tensor<f32> {
        let c = &self.config;
        let map = if kind == Modality::Speech { &self.speech_map } else { &self.semantic };
        let mut data = Vec::with_capacity(rows * c.dim);
        for _ in 0..rows {
            let mut zz = z.to_vec();
            add_noise(rng, &mut zz, c.frame_jitter);
            let mut x = apply(map, &zz);
            add_noise(rng, &mut x, noise);
            if kind == Modality::Audio {
                x = apply(&self.rotation, &x);
            }
            data.extend(to_f32(&x));
        }
        Tensor::new(rows, c.dim, data).expect("rows >= 1")
    }

    /// Token sets and teacher vectors for one item; missing modalities
    /// are dropped afterwards by the caller.
    pub fn render_item(&self, id: &str, latent: &ItemLatent, rng: &mut ChaCha8Rng) -> ItemRecord {
        let c = &self.config;
        let visual_tokens = self.render_tokens(rng, &latent.vis, c.m, c.visual_noise, Modality::Visual);
        let audio_tokens = self.render_tokens(rng, &latent.aud, c.audio_len, c.audio_noise, Modality::Audio);
        let words = rng.random_range(c.min_speech_len..=c.n_s - 2);
        let body = self.render_tokens(rng, &latent.sp, words, c.speech_noise, Modality::Speech);
        let mut speech = to_f32(&self.speech_start);
        speech.extend_from_slice(body.data());
        speech.extend(to_f32(&self.speech_end));
        let speech_tokens = Tensor::new(words + 2, c.dim, speech).expect("rows >= 3");
        let teacher = |rng: &mut ChaCha8Rng, z: &[f64]| {
            let mut t = apply(&self.teacher_map, z);
            add_noise(rng, &mut t, c.teacher_noise);
            to_f32(&normalized(t))
        };
        let teacher_video = teacher(rng, &latent.vis);
        let teacher_audio = teacher(rng, &latent.aud);
        ItemRecord {
            item_id: id.to_string(),
            visual_tokens,
            audio_tokens: Some(audio_tokens),
            speech_tokens: Some(speech_tokens),
            teacher_video: Some(teacher_video),
            teacher_audio: Some(teacher_audio),
            group: None,
        }
    }

    /// Query embedding for `latent` under `group`, before noise draws from
    /// `rng`.
    pub fn render_query(&self, latent: &ItemLatent, group: Group, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mask = LatentMask::for_group(group);
        let mut q = vec![0.0; self.config.dim];
        for (on, z, map) in [
            (mask.vis, &latent.vis, &self.semantic),
            (mask.aud, &latent.aud, &self.semantic),
            (mask.sp, &latent.sp, &self.speech_map),
        ] {
            if on {
                let part = normalized(apply(map, z));
                for (a, b) in q.iter_mut().zip(part) {
                    *a += b;
                }
            }
        }
        let mut q = normalized(q);
        add_noise(rng, &mut q, self.config.query_noise / (self.config.dim as f64).sqrt());
        to_f32(&q)
    }
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    Ok(generate_with_latents(config)?.0)
}

pub fn generate_with_latents(config: &SynthConfig) -> Result<(Dataset, Latents)> {
    let world = World::new(config)?;
    let n = config.n_items;
    if config.batch_hint > 0 && n < 2 * config.batch_hint {
        log::warn!("{n} items is fewer than twice the intended batch size {}", config.batch_hint);
    }
    let counts = exact_counts(&config.group_mix, n);
    let mut groups: Vec<Group> = Group::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&g, &c)| std::iter::repeat_n(g, c))
        .collect();
    groups.shuffle(&mut rng_for(config.seed, STREAM_GROUPS, 0));
    let mismatched = exact_subset(config.seed, STREAM_MISMATCH, n, config.rho);
    let no_audio = exact_subset(config.seed, STREAM_NO_AUDIO, n, config.missing_audio);
    let no_speech = exact_subset(config.seed, STREAM_NO_SPEECH, n, config.missing_speech);

    let width = n.saturating_sub(1).to_string().len();
    let mut ds = Dataset::empty(config.dims());
    let mut latents = Latents {
        items: Vec::with_capacity(n),
        queries: Vec::with_capacity(n),
    };
    for i in 0..n {
        let id = format!("v{i:0width$}");
        let latent = world.draw_latent(i, mismatched[i]);
        let mut item = world.render_item(&id, &latent, &mut rng_for(config.seed, STREAM_RENDER, i as u64));
        item.group = Some(groups[i]);
        if no_audio[i] {
            item.audio_tokens = None;
            item.teacher_audio = None;
        }
        if no_speech[i] {
            item.speech_tokens = None;
        }
        let embedding = world.render_query(&latent, groups[i], &mut rng_for(config.seed, STREAM_QUERY, i as u64));
        ds.queries.push(QueryRecord {
            query_id: format!("q{i:0width$}"),
            embedding,
            ground_truth_item: id,
            group: Some(groups[i]),
        });
        ds.items.push(item);
        latents.queries.push(QueryLatent {
            mask: LatentMask::for_group(groups[i]),
            latent: latent.clone(),
        });
        latents.items.push(latent);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(config.seed, STREAM_SPLITS, 0));
    let n_train = ((config.train_fraction * n as f64).round() as usize).min(n);
    let n_val = ((config.val_fraction * n as f64).round() as usize).min(n - n_train);
    let mut splits = BTreeMap::new();
    for (name, range) in [
        ("train", 0..n_train),
        ("val", n_train..n_train + n_val),
        ("test", n_train + n_val..n),
    ] {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        splits.insert(name.to_string(), idx.into_iter().map(|i| ds.items[i].item_id.clone()).collect());
    }
    ds.splits = splits;
    ds.validate()?;
    Ok((ds, latents))
}

const MASK_NAMES: [&str; 3] = ["vis", "aud", "sp"];

impl Latents {
    pub fn to_records(&self, dataset: &Dataset) -> Result<Vec<Record>> {
        if dataset.items.len() != self.items.len() || dataset.queries.len() != self.queries.len() {
            return Err(Error::invalid("latents do not match the dataset"));
        }
        let mut out = Vec::new();
        for (it, lat) in dataset.items.iter().zip(&self.items) {
            for (name, z) in MASK_NAMES.iter().zip([&lat.vis, &lat.aud, &lat.sp]) {
                out.push(Record::vector(format!("latent/{}/{name}", it.item_id), to_f32(z))?);
            }
        }
        for (q, lat) in dataset.queries.iter().zip(&self.queries) {
            let mask = [lat.mask.vis, lat.mask.aud, lat.mask.sp].map(|b| if b { 1.0 } else { 0.0 });
            out.push(Record::vector(format!("qmask/{}", q.query_id), mask.to_vec())?);
        }
        Ok(out)
    }

    /// Rebuild latents for `dataset` from a sidecar container. Query
    /// latents reuse their ground-truth item's latents.
    pub fn from_records(dataset: &Dataset, records: Vec<Record>) -> Result<Self> {
        let mut by: BTreeMap<String, Vec<f64>> = records
            .into_iter()
            .map(|r| (r.name, r.tensor.data().iter().map(|&x| f64::from(x)).collect()))
            .collect();
        let mut take = |name: String| by.remove(&name).ok_or_else(|| Error::invalid(format!("latents absent: {name}")));
        let mut items = Vec::with_capacity(dataset.items.len());
        for it in &dataset.items {
            let id = &it.item_id;
            items.push(ItemLatent {
                vis: take(format!("latent/{id}/vis"))?,
                aud: take(format!("latent/{id}/aud"))?,
                sp: take(format!("latent/{id}/sp"))?,
            });
        }
        let mut queries = Vec::with_capacity(dataset.queries.len());
        for q in &dataset.queries {
            let m = take(format!("qmask/{}", q.query_id))?;
            if m.len() != 3 {
                return Err(Error::CorruptRecord(format!("qmask/{}", q.query_id)));
            }
            let gt = dataset
                .item_position(&q.ground_truth_item)
                .ok_or_else(|| Error::invalid(format!("unknown item {}", q.ground_truth_item)))?;
            queries.push(QueryLatent {
                mask: LatentMask {
                    vis: m[0] != 0.0,
                    aud: m[1] != 0.0,
                    sp: m[2] != 0.0,
                },
                latent: items[gt].clone(),
            });
        }
        Ok(Self { items, queries })
    }

    pub fn write(&self, dataset: &Dataset, path: &Path) -> Result<()> {
        container::write_container(path, &self.to_records(dataset)?)
    }

    pub fn read(dataset: &Dataset, path: &Path) -> Result<Self> {
        Self::from_records(dataset, container::read_container(path)?)
    }
}
