//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tribranch_core::autodiff::{finite_difference_report, Graph, Tensor, Var};
use tribranch_core::data::{read_dataset, resolve_missing, write_dataset, Dataset, QueryRecord};
use tribranch_core::eval::{evaluate, latency_probe, summary_metrics};
use tribranch_core::fusion::{FusionMode, FusionModel, ModelConfig, VideoIndex};
use tribranch_core::losses::{contrastive_loss, initial_logit_scale, huber_align_loss, mse_align_loss, soft_albef_loss, AlignKind};
use tribranch_core::nn::{AttentionPool, BlockConfig, Bound, CrossAttentionBlock, GatedFusion, Init, ParamSet, Resampler};
use tribranch_core::similarity::{combined_similarity, score_query, DEFAULT_LAMBDA};
use tribranch_core::synthgen::{generate, SynthConfig};
use tribranch_core::trainer::{select_checkpoint, train, TrainConfig};
use tribranch_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| std * r.sample::<f64, _>(StandardNormal))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.1}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------- gradients

/// Max relative error of `sum(forward(params, data) * r)` over parameters
/// and data.
fn fd_module(
    ps: &ParamSet<f64>,
    data: Vec<Tensor<f64>>,
    forward: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
    weights: Tensor<f64>,
) -> f64 {
    let np = ps.len();
    let mut inputs: Vec<Tensor<f64>> = ps.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(data);
    inputs.push(weights);
    let n = inputs.len();
    finite_difference_report(
        |g, v| {
            let bound = Bound::from_vars(v[..np].to_vec());
            let out = forward(g, &bound, &v[np..n - 1])?;
            let w = g.mul(out, v[n - 1])?;
            Ok(g.sum(w))
        },
        &inputs,
        1e-5,
    )
    .expect("finite differences")
    .max_rel_error
}

fn fd_loss(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    finite_difference_report(f, &inputs, 1e-5).expect("finite differences").max_rel_error
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let cfg = BlockConfig { dim: 8, heads: 2, ff_mult: 2 };
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for inst in 0..10u64 {
        let mut r = rng(1000 + inst);
        let mut init = Init::new(inst);

        let mut ps = ParamSet::new();
        let block = CrossAttentionBlock::new(&mut ps, &mut init, "b", cfg.dim, cfg.heads, cfg.ff_mult).unwrap();
        let e = fd_module(
            &ps,
            vec![randn(&mut r, 3, 8, 1.0), randn(&mut r, 5, 8, 1.0)],
            |g, p, d| block.forward(g, p, d[0], d[1]),
            randn(&mut r, 3, 8, 1.0),
        );
        record("cross_attention_block", e);

        let mut ps = ParamSet::new();
        let fusion = GatedFusion::new(&mut ps, &mut init, "f", &cfg, 2).unwrap();
        // A nonzero gate so that every stack weight has a gradient.
        ps.get_mut(fusion.gate).data_mut()[0] = r.random_range(0.2..0.9);
        let e = fd_module(
            &ps,
            vec![randn(&mut r, 4, 8, 1.0), randn(&mut r, 6, 8, 1.0)],
            |g, p, d| fusion.forward(g, p, d[0], d[1]),
            randn(&mut r, 4, 8, 1.0),
        );
        record("gated_fusion", e);

        let mut ps = ParamSet::new();
        let res = Resampler::new(&mut ps, &mut init, "r", &cfg, 1, 4, 10).unwrap();
        let e = fd_module(
            &ps,
            vec![randn(&mut r, 7, 8, 1.0)],
            |g, p, d| res.forward(g, p, d[0]),
            randn(&mut r, 4, 8, 1.0),
        );
        record("resample", e);

        let mut ps = ParamSet::new();
        let pool = AttentionPool::new(&mut ps, &mut init, "h", 8);
        let e = fd_module(
            &ps,
            vec![randn(&mut r, 5, 8, 1.0)],
            |g, p, d| pool.forward(g, p, d[0]),
            randn(&mut r, 1, 8, 1.0),
        );
        record("holistic_aggregate", e);

        let b = 5;
        // Cosine-sized scores and a logit scale up to its initial value;
        // wider logit gaps saturate the softmax and leave coordinates whose
        // gradient is below central-difference roundoff.
        let scores = randn(&mut r, b, b, 0.25);
        let scale = Tensor::scalar(r.random_range(0.5..initial_logit_scale()));
        record(
            "contrastive_loss",
            fd_loss(vec![scores, scale], |g, v| contrastive_loss(g, v[0], v[1], 0.1)),
        );

        let m0 = randn(&mut r, b, b, 1.0);
        let m1 = randn(&mut r, b, b, 1.0);
        let soft = fd_loss(vec![m1.clone()], |g, v| {
            let c = g.constant(m0.clone());
            soft_albef_loss(g, c, v[0])
        });
        record("soft_albef_loss", soft);
        let mse = fd_loss(vec![m1.clone()], |g, v| {
            let c = g.constant(m0.clone());
            mse_align_loss(g, c, v[0])
        });
        record("mse_align_loss", mse);
        let huber = fd_loss(vec![m1.clone()], |g, v| {
            let c = g.constant(m0.clone());
            huber_align_loss(g, c, v[0], 0.05)
        });
        record("huber_align_loss", huber);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|(_, e)| *e < 1e-4) && secs < 120.0;
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome {
        pass,
        detail: format!("max relative error {}; {secs:.1} s", parts.join(", ")),
    }
}

// ------------------------------------------------------------ zero gates

fn random_items(n: usize, seed: u64) -> Dataset {
    generate(&SynthConfig {
        n_items: n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn zero_gate_identity() -> Outcome {
    let data = random_items(100, 77);
    let model = FusionModel::<f32>::new(ModelConfig::default()).unwrap();
    let lambda = DEFAULT_LAMBDA;
    let base = model.precompute_index(&data, FusionMode::VisionOnly).unwrap();
    let mut mismatches = Vec::new();
    let queries: Vec<&QueryRecord> = data.queries.iter().take(20).collect();
    for mode in [FusionMode::Save, FusionMode::AvigatePlus, FusionMode::LearnableWeights] {
        let idx = model.precompute_index(&data, mode).unwrap();
        let mut bad = 0;
        for q in &queries {
            let a = score_query(&base, &q.embedding, lambda).unwrap();
            let b = score_query(&idx, &q.embedding, lambda).unwrap();
            bad += a.iter().zip(&b).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        }
        mismatches.push((mode, bad));
    }
    let pass = mismatches.iter().all(|(_, b)| *b == 0);
    let parts: Vec<String> = mismatches.iter().map(|(m, b)| format!("{m} {b}")).collect();
    Outcome {
        pass,
        detail: format!("non-identical scores over 100 items x 20 queries: {}", parts.join(", ")),
    }
}

// ------------------------------------------------------ Pearson alignment

fn eval_soft(m0: &Tensor<f64>, m1: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(m0.clone());
    let b = g.constant(m1.clone());
    let l = soft_albef_loss(&mut g, a, b).unwrap();
    g.value(l).item()
}

fn soft_alignment_oracle() -> Outcome {
    let id = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let swap = Tensor::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let anti = eval_soft(&id, &swap);
    let mut self_max = 0.0f64;
    let mut shift_max = 0.0f64;
    let mut r = rng(5);
    for _ in 0..100 {
        let b = r.random_range(2..8);
        let m = randn(&mut r, b, b, 1.0);
        self_max = self_max.max(eval_soft(&m, &m).abs());
        let m0 = randn(&mut r, b, b, 1.0);
        let c: f64 = r.random_range(-3.0..3.0);
        let shifted = m.map(|x| x + c);
        shift_max = shift_max.max((eval_soft(&m0, &m) - eval_soft(&m0, &shifted)).abs());
    }
    let pass = (anti - 4.0).abs() <= 1e-6 && self_max <= 1e-9 && shift_max <= 1e-9;
    Outcome {
        pass,
        detail: format!("anti-diagonal {anti:.9}; self max {self_max:.1e}; shift max {shift_max:.1e}"),
    }
}

// ------------------------------------------------------------ metrics

/// Rank by sorting: ties put the ground truth after its equals.
fn sorted_rank(row: &[f64], gt: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap()
            .then_with(|| (a == gt).cmp(&(b == gt)))
    });
    order.iter().position(|&i| i == gt).unwrap() + 1
}

fn metric_oracle() -> Outcome {
    let mut r = rng(9);
    let mut bad = 0;
    let mut tie_rows = 0;
    for trial in 0..100 {
        let coarse = trial % 2 == 0;
        let n = 50;
        let scores = Tensor::from_fn(n, n, |_, _| {
            if coarse {
                f64::from(r.random_range(0..6u8)) / 10.0
            } else {
                r.random::<f64>()
            }
        });
        let gt: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let ranks: Vec<usize> = (0..n).map(|q| sorted_rank(scores.row(q), gt[q])).collect();
        tie_rows += (0..n)
            .filter(|&q| scores.row(q).iter().enumerate().any(|(j, &x)| j != gt[q] && x == scores.get(q, gt[q])))
            .count();
        let count = |k: usize| ranks.iter().filter(|&&x| x <= k).count();
        let (c1, c5, c10) = (count(1), count(5), count(10));
        let s = summary_metrics(&scores, &gt).unwrap();
        let nf = n as f64;
        let same = s.r1 == c1 as f64 / nf
            && s.r5 == c5 as f64 / nf
            && s.r10 == c10 as f64 / nf
            && (s.sumr - 100.0 * (c1 + c5 + c10) as f64 / nf).abs() < 1e-9;
        if !same {
            bad += 1;
        }
    }
    Outcome {
        pass: bad == 0,
        detail: format!("{bad} of 100 matrices disagree; {tie_rows} query rows with ties at the ground truth"),
    }
}

// ------------------------------------------------------------ training runs

const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, PartialEq)]
struct RunKey {
    seed: u64,
    rho: f64,
    mode: FusionMode,
    align: AlignKind,
    keep: f64,
}

fn train_config(seed: u64, mode: FusionMode, align: AlignKind, keep: f64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 8,
        lr: 1e-2,
        seed,
        mode,
        align_kind: align,
        keep_ratio: keep,
        ..TrainConfig::default()
    }
}

fn model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        init_seed: seed,
        ..ModelConfig::default()
    }
}

/// Train on the train split, select by val R@1, report test SumR.
fn test_sumr(k: RunKey) -> f64 {
    let data = generate(&SynthConfig {
        seed: k.seed,
        rho: k.rho,
        ..SynthConfig::default()
    })
    .unwrap();
    let (tr, va, te) = (data.split("train"), data.split("val"), data.split("test"));
    let cfg = train_config(k.seed, k.mode, k.align, k.keep);
    let model = FusionModel::new(model_config(k.seed)).unwrap();
    let out = train(model, &cfg, &tr, Some(&va), None).unwrap();
    let best = select_checkpoint(&out.checkpoints, &va, cfg.lambda).unwrap();
    let model = out.checkpoints[best].to_model().unwrap();
    let index = model.precompute_index(&te, k.mode).unwrap();
    evaluate(&index, &te.queries, cfg.lambda).unwrap().overall.sumr
}

#[derive(Default)]
struct Runs {
    cache: Vec<(RunKey, f64)>,
}

impl Runs {
    fn sumr(&mut self, k: RunKey) -> f64 {
        if let Some((_, v)) = self.cache.iter().find(|(c, _)| *c == k) {
            return *v;
        }
        let v = test_sumr(k);
        self.cache.push((k, v));
        v
    }

    fn seeds(&mut self, rho: f64, mode: FusionMode, align: AlignKind, keep: f64) -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&seed| self.sumr(RunKey { seed, rho, mode, align, keep }))
            .collect()
    }
}

fn speech_branch_benefit(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let save = runs.seeds(0.0, FusionMode::Save, AlignKind::SoftAlbef, 0.5);
    let avp = runs.seeds(0.0, FusionMode::AvigatePlus, AlignKind::SoftAlbef, 0.5);
    let vis = runs.seeds(0.0, FusionMode::VisionOnly, AlignKind::SoftAlbef, 0.5);
    let secs = start.elapsed().as_secs_f64();
    let pass = mean(&save) > mean(&avp) && mean(&save) > mean(&vis) && secs < 600.0;
    Outcome {
        pass,
        detail: format!(
            "mean test SumR save {:.1} {}, avigate_plus {:.1} {}, vision_only {:.1} {}; {secs:.0} s",
            mean(&save),
            fmt(&save),
            mean(&avp),
            fmt(&avp),
            mean(&vis),
            fmt(&vis)
        ),
    }
}

fn soft_vs_hard(runs: &mut Runs) -> Outcome {
    let rho = 0.5;
    let soft = runs.seeds(rho, FusionMode::Save, AlignKind::SoftAlbef, 0.5);
    let hard = runs.seeds(rho, FusionMode::Save, AlignKind::HardAlbef, 0.5);
    let wins = soft.iter().zip(&hard).filter(|(s, h)| s >= h).count();
    let limit = mean(&soft) + sample_sd(&soft);
    let mut pass = wins >= 2;
    let mut filtered = Vec::new();
    for keep in [0.25, 0.5, 0.75, 1.0] {
        let f = mean(&runs.seeds(rho, FusionMode::Save, AlignKind::Filtered, keep));
        pass &= f <= limit;
        filtered.push(format!("{keep}: {f:.1}"));
    }
    Outcome {
        pass,
        detail: format!(
            "soft {} vs hard {}, soft >= hard in {wins}/3; filtered means {{{}}} vs soft mean + sd {limit:.1}",
            fmt(&soft),
            fmt(&hard),
            filtered.join(", ")
        ),
    }
}

fn alignment_helps(runs: &mut Runs) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for rho in [0.0, 0.2] {
        let soft = runs.seeds(rho, FusionMode::Save, AlignKind::SoftAlbef, 0.5);
        let none = runs.seeds(rho, FusionMode::Save, AlignKind::None, 0.5);
        let wins = soft.iter().zip(&none).filter(|(s, n)| s > n).count();
        pass &= wins >= 2;
        parts.push(format!("rho {rho}: soft {} vs none {}, {wins}/3", fmt(&soft), fmt(&none)));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

// ------------------------------------------------------------ efficiency

fn truncated(index: &VideoIndex, n: usize) -> VideoIndex {
    VideoIndex {
        mode: index.mode,
        entries: index.entries[..n].to_vec(),
    }
}

/// Median per-query milliseconds over several alternating rounds.
fn per_query_ms(indices: &[&VideoIndex], queries: &[QueryRecord]) -> Result<(Vec<f64>, u64)> {
    let rounds = 11;
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); indices.len()];
    let mut calls = 0;
    for _ in 0..rounds {
        for (i, idx) in indices.iter().enumerate() {
            let s = latency_probe(idx, queries, 5, DEFAULT_LAMBDA)?;
            calls += s.fusion_calls;
            samples[i].push(s.median_ms);
        }
    }
    let med = samples
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    Ok((med, calls))
}

fn efficiency_contract() -> Outcome {
    let data = generate(&SynthConfig {
        n_items: 2000,
        seed: 42,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = FusionModel::<f32>::new(ModelConfig::default()).unwrap();
    let save = model.precompute_index(&data, FusionMode::Save).unwrap();
    let avigate = model.precompute_index(&data, FusionMode::Avigate).unwrap();
    let save_1k = truncated(&save, 1000);
    let avigate_1k = truncated(&avigate, 1000);
    let queries: Vec<QueryRecord> = data.queries[..40].to_vec();
    let probed = per_query_ms(&[&save_1k, &save, &avigate_1k, &avigate], &queries);
    let (ms, calls) = match probed {
        Ok(x) => x,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("latency probe failed: {e}"),
            }
        }
    };
    let scaling = ms[1] / ms[0];
    let modes = ms[1] / ms[3];
    let pass = calls == 0 && (2.0 / 3.0..=6.0).contains(&scaling) && (modes - 1.0).abs() <= 0.10;
    Outcome {
        pass,
        detail: format!(
            "fusion calls {calls}; save per query {:.3} ms at 1k, {:.3} ms at 2k (x{scaling:.2}); avigate {:.3} ms at 2k, save/avigate {modes:.3}",
            ms[0], ms[1], ms[3]
        ),
    }
}

// ------------------------------------------------------------ determinism

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism_and_io() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&SynthConfig {
        n_items: 96,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let tr = data.split("train");
    let cfg = TrainConfig {
        epochs: 2,
        ..train_config(4, FusionMode::Save, AlignKind::SoftAlbef, 0.5)
    };
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = train(FusionModel::new(model_config(4)).unwrap(), &cfg, &tr, None, Some(&dir)).unwrap();
        outs.push((dir_bytes(&dir), out.log));
    }
    let files = outs[0].0.len();
    let same_train = outs[0] == outs[1] && files > 0;

    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    write_dataset(&data, &d1).unwrap();
    let back = read_dataset(&d1).unwrap();
    write_dataset(&back, &d2).unwrap();
    let same_data = back == data && dir_bytes(&d1) == dir_bytes(&d2);
    Outcome {
        pass: same_train && same_data,
        detail: format!(
            "two runs identical over {files} files and logs: {same_train}; dataset round trip bit-exact: {same_data}"
        ),
    }
}

// ------------------------------------------------------------ missing data

fn missing_modality_robustness() -> Outcome {
    let data = generate(&SynthConfig {
        missing_audio: 0.5,
        missing_speech: 0.85,
        seed: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let (tr, va, te) = (data.split("train"), data.split("val"), data.split("test"));
    let cfg = train_config(6, FusionMode::Save, AlignKind::SoftAlbef, 0.5);
    let run = || -> Result<(f64, FusionModel<f32>)> {
        let out = train(FusionModel::new(model_config(6))?, &cfg, &tr, Some(&va), None)?;
        let best = select_checkpoint(&out.checkpoints, &va, cfg.lambda)?;
        let model = out.checkpoints[best].to_model()?;
        let index = model.precompute_index(&te, FusionMode::Save)?;
        Ok((evaluate(&index, &te.queries, cfg.lambda)?.overall.sumr, model))
    };
    let (sumr, model) = match run() {
        Ok(x) => x,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("training or evaluation failed: {e}"),
            }
        }
    };

    // Vision-only scores of items lacking both audio and speech: equal to
    // scoring the raw visual tokens, and unchanged when the zero-filled
    // branches are replaced by arbitrary tokens.
    let bare: Vec<usize> = (0..data.items.len())
        .filter(|&i| data.items[i].audio_tokens.is_none() && data.items[i].speech_tokens.is_none())
        .collect();
    let mut r = rng(60);
    let mut changed = 0;
    let queries = &data.queries[..10];
    for &i in &bare {
        let item = &data.items[i];
        let resolved = resolve_missing(item, &data.dims);
        let mut noisy = resolved.clone();
        noisy.audio = randn(&mut r, noisy.audio.rows(), noisy.audio.cols(), 1.0).cast();
        noisy.speech = randn(&mut r, noisy.speech.rows(), noisy.speech.cols(), 1.0).cast();
        let a = model.index_entry(&item.item_id, &resolved, FusionMode::VisionOnly).unwrap();
        let b = model.index_entry(&item.item_id, &noisy, FusionMode::VisionOnly).unwrap();
        let v = &item.visual_tokens;
        let raw_mean = {
            let mut g = Graph::<f32>::new();
            let t = g.constant(v.clone());
            let m = g.mean_rows(t);
            g.value(m).data().to_vec()
        };
        for q in queries {
            let sa = combined_similarity(&a.tokens, &a.mean, &q.embedding, DEFAULT_LAMBDA).unwrap();
            let sb = combined_similarity(&b.tokens, &b.mean, &q.embedding, DEFAULT_LAMBDA).unwrap();
            let raw = combined_similarity(v, &raw_mean, &q.embedding, DEFAULT_LAMBDA).unwrap();
            if sa.to_bits() != sb.to_bits() || sa.to_bits() != raw.to_bits() {
                changed += 1;
            }
        }
    }
    Outcome {
        pass: changed == 0 && !bare.is_empty() && sumr.is_finite(),
        detail: format!(
            "trained and evaluated with 50% audio and 85% speech missing (test SumR {sumr:.1}); {} fully bare items, {changed} changed vision-only scores",
            bare.len()
        ),
    }
}

fn main() -> ExitCode {
    let total = Instant::now();
    let mut runs = Runs::default();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    // Timing first, before the training runs heat the machine.
    results.push((8, "efficiency contract", efficiency_contract()));
    results.push((1, "gradient integrity", gradient_integrity()));
    results.push((2, "zero-gate identity", zero_gate_identity()));
    results.push((3, "soft alignment oracle", soft_alignment_oracle()));
    results.push((4, "metric oracle", metric_oracle()));
    results.push((5, "speech-branch benefit", speech_branch_benefit(&mut runs)));
    results.push((6, "soft vs hard alignment", soft_vs_hard(&mut runs)));
    results.push((7, "alignment helps", alignment_helps(&mut runs)));
    results.push((9, "determinism and IO", determinism_and_io()));
    results.push((10, "missing-modality robustness", missing_modality_robustness()));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {n:>2} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "{} passed, {failed} failed in {:.0} s",
        results.len() - failed,
        total.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
