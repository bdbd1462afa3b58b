//! Optimization loop: Adam with cosine decay, global-norm clipping,
//! per-epoch checkpoints and validation-based selection.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::data::{batch_iter, container, resolve_missing, BatchMode, Dataset, Record};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::fusion::{FusionMode, FusionModel, ModelConfig};
use crate::losses::{
    affinity_from_teacher, contrastive_loss, filtered_albef_loss, hard_albef_loss, huber_align_loss,
    max_logit_scale, mse_align_loss, soft_albef_loss, student_affinity, total_loss, AlignKind,
    DEFAULT_ALIGN_TEMPERATURE, DEFAULT_HUBER_DELTA,
};
use crate::nn::ParamSet;
use crate::similarity::{batch_scores, DEFAULT_LAMBDA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the fusion modules.
    pub lr: f64,
    /// Encoder learning rate; kept for config parity, encoders are frozen.
    pub backbone_lr: Option<f64>,
    pub lambda: f64,
    /// Initial contrastive temperature; the logit scale starts at `ln(1/tau)`.
    pub tau: f64,
    pub margin: f64,
    pub align_kind: AlignKind,
    pub align_temperature: f64,
    pub keep_ratio: f64,
    pub huber_delta: f64,
    pub mode: FusionMode,
    pub seed: u64,
    /// Validation R@1 is logged every this many steps when a val split is given.
    pub eval_every: Option<usize>,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            lr: 1e-4,
            backbone_lr: None,
            lambda: DEFAULT_LAMBDA,
            tau: 0.07,
            margin: 0.0,
            align_kind: AlignKind::SoftAlbef,
            align_temperature: DEFAULT_ALIGN_TEMPERATURE,
            keep_ratio: 0.5,
            huber_delta: DEFAULT_HUBER_DELTA,
            mode: FusionMode::Save,
            seed: 0,
            eval_every: None,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        let lr_ok = |x: f64| x > 0.0 && x.is_finite();
        if !lr_ok(self.lr) || self.backbone_lr.is_some_and(|x| !lr_ok(x)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.tau > 0.0) || !(self.lambda > 0.0) || !(self.align_temperature > 0.0) {
            return Err(Error::invalid("tau, lambda and align_temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.keep_ratio) {
            return Err(Error::invalid("keep_ratio must lie in [0, 1]"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::invalid("eval_every must be positive"));
        }
        Ok(())
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// left untouched, moments included. A non-finite gradient aborts the
/// step before anything changes.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam_step", "one gradient slot and moment per parameter required"));
    }
    if !(lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adam_step", format!("gradient shape for {}", params.name(id))));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let tensors = params.tensors_mut();
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &gi), mi), vi) in tensors[i].data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gf = gi.to_f64_lossy();
            let mf = b1 * mi.to_f64_lossy() + (1.0 - b1) * gf;
            let vf = b2 * vi.to_f64_lossy() + (1.0 - b2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + state.eps);
            *p = T::of(p.to_f64_lossy() - update);
        }
    }
    Ok(())
}

/// `base_lr * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond schedule length {total_steps}")));
    }
    let x = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + x.cos()))
}

/// Scale all gradients so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x.to_f64_lossy().powi(2))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let f = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * f;
            }
        }
    }
    norm
}

/// One training log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub contrastive: f64,
    pub alignment: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_r1: Option<f64>,
}

/// Loss graph of one batch.
pub struct StepGraph<T> {
    pub graph: Graph<T>,
    pub params: crate::nn::Bound,
    pub contrastive: Var,
    pub alignment: Option<Var>,
    pub total: Var,
}

/// Forward one batch of `(item index, query index)` pairs of `data`.
pub fn build_step<T: Scalar>(
    model: &FusionModel<T>,
    data: &Dataset,
    batch: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<StepGraph<T>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    // Plain avigate is the baseline without audio-visual alignment;
    // avigate_plus is the same network trained with it.
    let align = cfg.mode.uses_audio() && cfg.mode != FusionMode::Avigate && cfg.align_kind != AlignKind::None;
    let mut videos = Vec::with_capacity(batch.len());
    let mut v_pooled = Vec::new();
    let mut a_pooled = Vec::new();
    let mut teach_v: Vec<Vec<T>> = Vec::new();
    let mut teach_a: Vec<Vec<T>> = Vec::new();
    for &(ii, _) in batch {
        let item = &data.items[ii];
        let resolved = resolve_missing(item, &data.dims);
        let vars = model.forward_graph(&mut g, &p, &resolved, cfg.mode, align)?;
        videos.push(vars.video);
        // Alignment rows need real audio and, for teacher-driven kinds,
        // both teacher vectors.
        let teacher = match (&item.teacher_video, &item.teacher_audio) {
            (Some(tv), Some(ta)) => Some((tv, ta)),
            _ => None,
        };
        if align && resolved.has_audio && (teacher.is_some() || !cfg.align_kind.needs_teacher()) {
            v_pooled.push(vars.v_pooled);
            a_pooled.push(vars.a_pooled.expect("pooled audio requested"));
            if let Some((tv, ta)) = teacher {
                teach_v.push(tv.iter().map(|&x| T::of(f64::from(x))).collect());
                teach_a.push(ta.iter().map(|&x| T::of(f64::from(x))).collect());
            }
        }
    }
    let d = data.dims.dim;
    let q: Vec<T> = batch
        .iter()
        .flat_map(|&(_, qi)| data.queries[qi].embedding.iter().map(|&x| T::of(f64::from(x))))
        .collect();
    let qv = g.constant(Tensor::new(batch.len(), d, q)?);
    let scores = batch_scores(&mut g, qv, &videos, cfg.lambda)?;
    let scale = p.var(model.logit_scale_id());
    let contrastive = contrastive_loss(&mut g, scores, scale, cfg.margin)?;

    let alignment = if v_pooled.len() >= 2 {
        let vs = g.concat_rows(&v_pooled)?;
        let as_ = g.concat_rows(&a_pooled)?;
        let m1 = student_affinity(&mut g, vs, as_)?;
        let m0 = || -> Result<Tensor<T>> {
            let tv: Vec<&[T]> = teach_v.iter().map(Vec::as_slice).collect();
            let ta: Vec<&[T]> = teach_a.iter().map(Vec::as_slice).collect();
            affinity_from_teacher(&tv, &ta)
        };
        match cfg.align_kind {
            AlignKind::SoftAlbef => {
                let m0v = g.constant(m0()?);
                Some(soft_albef_loss(&mut g, m0v, m1)?)
            }
            AlignKind::HardAlbef => Some(hard_albef_loss(&mut g, m1, cfg.align_temperature)?),
            AlignKind::Filtered => filtered_albef_loss(&mut g, m1, &m0()?, cfg.keep_ratio, cfg.align_temperature)?,
            AlignKind::Mse => {
                let m0v = g.constant(m0()?);
                Some(mse_align_loss(&mut g, m0v, m1)?)
            }
            AlignKind::Huber => {
                let m0v = g.constant(m0()?);
                Some(huber_align_loss(&mut g, m0v, m1, cfg.huber_delta)?)
            }
            AlignKind::None => None,
        }
    } else {
        None
    };
    let total = total_loss(&mut g, contrastive, alignment)?;
    Ok(StepGraph {
        graph: g,
        params: p,
        contrastive,
        alignment,
        total,
    })
}

/// `(item, query)` training pairs: each item with at least one query is
/// paired with one of them, rotating through them by epoch.
fn training_pairs(data: &Dataset, epoch: usize) -> Vec<(usize, usize)> {
    let mut by_item: Vec<Vec<usize>> = vec![Vec::new(); data.items.len()];
    for (qi, q) in data.queries.iter().enumerate() {
        if let Some(ii) = data.item_position(&q.ground_truth_item) {
            by_item[ii].push(qi);
        }
    }
    by_item
        .iter()
        .enumerate()
        .filter(|(_, qs)| !qs.is_empty())
        .map(|(ii, qs)| (ii, qs[epoch % qs.len()]))
        .collect()
}

/// Parameters and optimizer state after an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: usize,
    pub model: ModelConfig,
    pub mode: FusionMode,
    pub params: ParamSet<f32>,
    pub opt: OptState<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    epoch: usize,
    step: usize,
    mode: FusionMode,
    model: ModelConfig,
    opt_step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn to_model(&self) -> Result<FusionModel<f32>> {
        FusionModel::with_params(self.model.clone(), self.params.clone())
    }

    /// Parameters under `param/<name>`, moments under `adam_m/<name>` and
    /// `adam_v/<name>`, metadata in a JSON sidecar next to the container.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut records = Vec::with_capacity(3 * self.params.len());
        for (prefix, tensors) in [
            ("param", self.params.iter().map(|(_, t)| t).collect::<Vec<_>>()),
            ("adam_m", self.opt.m.iter().collect()),
            ("adam_v", self.opt.v.iter().collect()),
        ] {
            for ((name, _), t) in self.params.iter().zip(tensors) {
                records.push(Record::tokens(format!("{prefix}/{name}"), t.clone()));
            }
        }
        container::write_container(path, &records)?;
        let meta = CheckpointMeta {
            epoch: self.epoch,
            step: self.step,
            mode: self.mode,
            model: self.model.clone(),
            opt_step: self.opt.step,
            beta1: self.opt.beta1,
            beta2: self.opt.beta2,
            eps: self.opt.eps,
        };
        let mut json = serde_json::to_string_pretty(&meta)?;
        json.push('\n');
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let mut records: std::collections::BTreeMap<String, Tensor<f32>> = container::read_container(path)?
            .into_iter()
            .map(|r| (r.name, r.tensor))
            .collect();
        let layout = FusionModel::<f32>::new(meta.model.clone())?;
        let mut params = ParamSet::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, want) in layout.params.iter() {
            let mut take = |prefix: &str| -> Result<Tensor<f32>> {
                let key = format!("{prefix}/{name}");
                let t = records
                    .remove(&key)
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks {key}")))?;
                if t.shape() != want.shape() {
                    return Err(Error::CorruptRecord(key));
                }
                Ok(t)
            };
            params.add(name, take("param")?);
            m.push(take("adam_m")?);
            v.push(take("adam_v")?);
        }
        if let Some(extra) = records.keys().next() {
            return Err(Error::invalid(format!("unexpected checkpoint record {extra}")));
        }
        Ok(Self {
            epoch: meta.epoch,
            step: meta.step,
            model: meta.model,
            mode: meta.mode,
            params,
            opt: OptState {
                m,
                v,
                step: meta.opt_step,
                beta1: meta.beta1,
                beta2: meta.beta2,
                eps: meta.eps,
            },
        })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: FusionModel<f32>,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<Checkpoint>,
}

pub const LOG_FILE: &str = "train_log.jsonl";

pub fn checkpoint_file(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

fn write_log(dir: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    fs::File::create(dir.join(LOG_FILE))?.write_all(&out)?;
    Ok(())
}

/// Validation R@1 of a model; `None` when `val` has no queries or items.
pub fn val_r1(model: &FusionModel<f32>, val: &Dataset, mode: FusionMode, lambda: f64) -> Result<Option<f64>> {
    if val.items.is_empty() || val.queries.is_empty() {
        return Ok(None);
    }
    let index = model.precompute_index(val, mode)?;
    Ok(Some(evaluate(&index, &val.queries, lambda)?.overall.r1))
}

/// Train `model` on `train`. With `out_dir`, every epoch's checkpoint
/// and the log are written there; a non-finite loss aborts after writing
/// the log so far, leaving earlier checkpoints in place.
pub fn train(
    mut model: FusionModel<f32>,
    cfg: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if let Some(lr) = cfg.backbone_lr {
        log::debug!("backbone lr {lr} ignored: encoders are frozen");
    }
    if train.dims.dim != model.config.dim {
        return Err(Error::shape(
            "train",
            format!("dataset dim {} but model dim {}", train.dims.dim, model.config.dim),
        ));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let ls = model.logit_scale_id();
    model.params.get_mut(ls).data_mut()[0] = (1.0 / cfg.tau).ln().min(max_logit_scale()) as f32;

    let steps_per_epoch = training_pairs(train, 0).len() / cfg.batch_size;
    let total_steps = steps_per_epoch * cfg.epochs;
    if total_steps == 0 {
        return Err(Error::invalid(format!(
            "batch size {} leaves no full batch in {} training items",
            cfg.batch_size,
            training_pairs(train, 0).len()
        )));
    }
    let mut opt = OptState::new(&model.params);
    let mut log = Vec::with_capacity(total_steps);
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let pairs = training_pairs(train, epoch);
        for batch in batch_iter(&pairs, cfg.batch_size, cfg.seed, epoch, true, BatchMode::Train)? {
            let lr = cosine_lr(step, total_steps, cfg.lr)?;
            let mut sg = build_step(&model, train, &batch, cfg)?;
            let value = |v: Var| f64::from(sg.graph.value(v).item());
            let contrastive = value(sg.contrastive);
            let alignment = sg.alignment.map_or(0.0, value);
            let total = value(sg.total);
            if !total.is_finite() {
                log::error!("non-finite loss at step {step}; stopping");
                if let Some(dir) = out_dir {
                    write_log(dir, &log)?;
                }
                return Err(Error::NonFiniteLoss { step });
            }
            let mut grads = sg.graph.backward(sg.total)?;
            let mut g: Vec<Option<Tensor<f32>>> = sg.params.vars().iter().map(|&v| grads.take(v)).collect();
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut g, c);
            }
            adam_step(&mut model.params, &g, &mut opt, lr)?;
            let x = &mut model.params.get_mut(ls).data_mut()[0];
            *x = x.min(max_logit_scale() as f32);
            step += 1;
            let val_r1 = match (cfg.eval_every, val) {
                (Some(n), Some(v)) if step % n == 0 => val_r1(&model, v, cfg.mode, cfg.lambda)?,
                _ => None,
            };
            log::debug!("step {step} lr {lr:.3e} contrastive {contrastive:.4} alignment {alignment:.4}");
            log.push(StepLog {
                epoch,
                step,
                lr,
                contrastive,
                alignment,
                total,
                val_r1,
            });
        }
        let ckpt = Checkpoint {
            epoch,
            step,
            model: model.config.clone(),
            mode: cfg.mode,
            params: model.params.clone(),
            opt: opt.clone(),
        };
        if let Some(dir) = out_dir {
            ckpt.write(&dir.join(checkpoint_file(epoch)))?;
            write_log(dir, &log)?;
        }
        checkpoints.push(ckpt);
    }
    Ok(TrainOutput {
        model,
        log,
        checkpoints,
    })
}

/// Index of the checkpoint with the best validation R@1, earliest on
/// ties. Without validation queries the last checkpoint is returned.
pub fn select_checkpoint(checkpoints: &[Checkpoint], val: &Dataset, lambda: f64) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints to select from"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in checkpoints.iter().enumerate() {
        let Some(r1) = val_r1(&c.to_model()?, val, c.mode, lambda)? else {
            log::warn!("empty validation split; keeping the last checkpoint");
            return Ok(checkpoints.len() - 1);
        };
        log::info!("epoch {} val R@1 {r1:.4}", c.epoch);
        if best.is_none_or(|(_, b)| r1 > b) {
            best = Some((i, r1));
        }
    }
    Ok(best.expect("non-empty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthConfig};

    fn ps(values: &[f32]) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.add("w", Tensor::new(1, values.len(), values.to_vec()).unwrap());
        p
    }

    #[test]
    fn adam_first_step() {
        let mut p = ps(&[0.0]);
        let mut st = OptState::new(&p);
        adam_step(&mut p, &[Some(Tensor::scalar(0.5))], &mut st, 0.01).unwrap();
        assert!((p.get(p.ids().next().unwrap()).item() + 0.01).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_and_missing_gradient() {
        let mut p = ps(&[0.3, -0.2]);
        let before = p.clone();
        let mut st = OptState::new(&p);
        adam_step(&mut p, &[Some(Tensor::zeros(1, 2))], &mut st, 0.1).unwrap();
        adam_step(&mut p, &[None], &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_rejects_nan_naming_parameter() {
        let mut p = ps(&[1.0, 2.0]);
        let before = p.clone();
        let mut st = OptState::new(&p);
        let g = Tensor::new(1, 2, vec![0.1, f32::NAN]).unwrap();
        let err = adam_step(&mut p, &[Some(g)], &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 0.2).unwrap(), 0.2);
        assert!(cosine_lr(10, 10, 0.2).unwrap().abs() < 1e-15);
        assert!((cosine_lr(5, 10, 0.2).unwrap() - 0.1).abs() < 1e-12);
        assert!(cosine_lr(0, 0, 0.2).is_err());
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn clipping_scales_to_limit() {
        let mut g = vec![Some(Tensor::new(1, 2, vec![3.0f32, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let t = g[0].as_ref().unwrap();
        assert!((t.get(0, 0) - 0.6).abs() < 1e-6 && (t.get(0, 1) - 0.8).abs() < 1e-6);
        let mut small = vec![Some(Tensor::new(1, 1, vec![0.5f32]).unwrap())];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().item(), 0.5);
    }

    fn tiny_data(seed: u64) -> Dataset {
        generate(&SynthConfig {
            n_items: 48,
            m: 4,
            audio_len: 4,
            n_s: 8,
            min_speech_len: 2,
            train_fraction: 1.0,
            val_fraction: 0.0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_model(seed: u64) -> FusionModel<f32> {
        FusionModel::new(ModelConfig {
            num_queries: 4,
            fusion_layers: 1,
            init_seed: seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 3e-3,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        let mut wins = 0;
        for seed in 0..3 {
            let data = tiny_data(seed);
            let cfg = TrainConfig {
                epochs: 9,
                ..tiny_cfg(seed)
            };
            let out = train(tiny_model(seed), &cfg, &data, None, None).unwrap();
            assert!(out.log.len() >= 50);
            // Same batch evaluated before and after 50 steps.
            let pairs = training_pairs(&data, 0);
            let batch = &pairs[..8];
            let first = build_step(&tiny_model(seed), &data, batch, &cfg).unwrap();
            let mut after = tiny_model(seed);
            after.params = out.checkpoints.last().unwrap().params.clone();
            let last = build_step(&after, &data, batch, &cfg).unwrap();
            if last.graph.value(last.total).item() < first.graph.value(first.total).item() {
                wins += 1;
            }
        }
        assert!(wins >= 2, "loss fell in {wins} of 3 seeds");
    }

    #[test]
    fn zero_variance_teacher_matches_no_alignment() {
        let mut data = tiny_data(1);
        let flat = {
            let mut v = vec![0.0f32; data.dims.teacher_dim];
            v[0] = 1.0;
            v
        };
        for it in &mut data.items {
            it.teacher_video = Some(flat.clone());
            it.teacher_audio = Some(flat.clone());
        }
        let soft = train(tiny_model(1), &tiny_cfg(1), &data, None, None).unwrap();
        let none_cfg = TrainConfig {
            align_kind: AlignKind::None,
            ..tiny_cfg(1)
        };
        let none = train(tiny_model(1), &none_cfg, &data, None, None).unwrap();
        let c = |o: &TrainOutput| o.log.iter().map(|r| r.contrastive).collect::<Vec<_>>();
        assert_eq!(c(&soft), c(&none));
        assert!(soft.log.iter().all(|r| r.alignment == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(2);
        let a = train(tiny_model(2), &tiny_cfg(2), &data, None, None).unwrap();
        let b = train(tiny_model(2), &tiny_cfg(2), &data, None, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoints, b.checkpoints);
    }

    #[test]
    fn speech_stack_sees_only_contrastive_gradient() {
        let data = tiny_data(3);
        let model = tiny_model(3);
        let pairs = training_pairs(&data, 0);
        let sg = build_step(&model, &data, &pairs[..8], &tiny_cfg(3)).unwrap();
        let align = sg.alignment.expect("alignment term present");
        let mut speech = 0;
        for (id, (name, _)) in model.params.ids().zip(model.params.iter()) {
            let v = sg.params.var(id);
            if name.starts_with("speech_fusion") {
                speech += 1;
                assert!(!sg.graph.depends_on(align, v), "{name} reached by alignment");
                assert!(sg.graph.depends_on(sg.contrastive, v), "{name} unreached by contrastive");
            }
            if name.starts_with("resampler") {
                assert!(sg.graph.depends_on(align, v), "{name} unreached by alignment");
            }
        }
        assert!(speech > 0);
    }

    #[test]
    fn vision_only_has_no_alignment_term() {
        let data = tiny_data(4);
        let cfg = TrainConfig {
            mode: FusionMode::VisionOnly,
            ..tiny_cfg(4)
        };
        let out = train(tiny_model(4), &cfg, &data, None, None).unwrap();
        assert!(out.log.iter().all(|r| r.alignment == 0.0));
        assert!(out.log.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn alignment_applies_to_avigate_plus_only() {
        let data = tiny_data(4);
        let run = |mode| {
            let cfg = TrainConfig { mode, ..tiny_cfg(4) };
            train(tiny_model(4), &cfg, &data, None, None).unwrap().log
        };
        assert!(run(FusionMode::Avigate).iter().all(|r| r.alignment == 0.0));
        assert!(run(FusionMode::AvigatePlus).iter().any(|r| r.alignment != 0.0));
    }

    #[test]
    fn checkpoint_files_round_trip() {
        let data = tiny_data(5);
        let dir = tempfile::tempdir().unwrap();
        let out = train(tiny_model(5), &tiny_cfg(5), &data, None, Some(dir.path())).unwrap();
        let back = Checkpoint::read(&dir.path().join(checkpoint_file(0))).unwrap();
        assert_eq!(back, out.checkpoints[0]);
        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), out.log.len());
    }

    #[test]
    fn selection_prefers_best_then_earliest() {
        let data = tiny_data(6);
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_cfg(6)
        };
        let out = train(tiny_model(6), &cfg, &data, None, None).unwrap();
        let single = &out.checkpoints[..1];
        assert_eq!(select_checkpoint(single, &data, DEFAULT_LAMBDA).unwrap(), 0);
        let same = vec![out.checkpoints[0].clone(), out.checkpoints[0].clone()];
        assert_eq!(select_checkpoint(&same, &data, DEFAULT_LAMBDA).unwrap(), 0);
        let r: Vec<f64> = out
            .checkpoints
            .iter()
            .map(|c| val_r1(&c.to_model().unwrap(), &data, c.mode, DEFAULT_LAMBDA).unwrap().unwrap())
            .collect();
        let want = if r[1] > r[0] { 1 } else { 0 };
        assert_eq!(select_checkpoint(&out.checkpoints, &data, DEFAULT_LAMBDA).unwrap(), want);
        let empty = Dataset::empty(data.dims);
        assert_eq!(select_checkpoint(&out.checkpoints, &empty, DEFAULT_LAMBDA).unwrap(), 1);
    }
}
