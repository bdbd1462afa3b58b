use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use tribranch_core::data::{read_dataset, write_dataset, Dataset, Group, MANIFEST_FILE};
use tribranch_core::eval::{ground_truth, grouped_eval, mean_r1, video_to_text, Summary};
use tribranch_core::fusion::{FusionMode, FusionModel, ModelConfig};
use tribranch_core::losses::AlignKind;
use tribranch_core::similarity::{score_matrix, score_query};
use tribranch_core::synthgen::{generate_with_latents, SynthConfig};
use tribranch_core::trainer::{select_checkpoint, train, Checkpoint, TrainConfig};
use tribranch_core::Error as CoreError;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NAN: u8 = 4;
const EXIT_DIM: u8 = 5;
const EXIT_UNKNOWN_QUERY: u8 = 6;

const LATENT_FILE: &str = "latents.sve";
const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Parser)]
#[command(name = "tribranch", version, about = "Speech-aware video embedding: synthetic data, training and retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    T2v,
    V2t,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Also write the generator latents next to the dataset.
        #[arg(long)]
        latents: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset's train split and keep the best checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        mode: Option<FusionMode>,
        #[arg(long)]
        align_kind: Option<AlignKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrieval metrics of a checkpoint on one or more datasets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; repeat to report mR1 over several.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Split to evaluate; falls back to all items when absent.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        mode: Option<FusionMode>,
        #[arg(long)]
        groups: bool,
        #[arg(long, value_enum, default_value = "t2v")]
        direction: Direction,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Top-k items for one query.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Restrict the gallery to a split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        mode: Option<FusionMode>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Summarize a dataset directory or a checkpoint.
    Inspect { path: PathBuf },
}

/// Error carrying its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        error: error.into(),
    }
}

fn code_for(e: &CoreError) -> u8 {
    match e {
        CoreError::NonFiniteLoss { .. } | CoreError::NonFiniteGradient(_) => EXIT_NAN,
        CoreError::Shape { .. } => EXIT_DIM,
        CoreError::InvalidArgument(_) => EXIT_CONFIG,
        _ => EXIT_IO,
    }
}

fn core(e: CoreError) -> Failure {
    fail(code_for(&e), e)
}

trait CoreContext<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> CoreContext<T> for tribranch_core::Result<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| {
            let code = code_for(&e);
            fail(code, anyhow!(e).context(what()))
        })
    }
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    synth: SynthConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    model: toml::Table,
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(|e| fail(EXIT_IO, e))?;
    toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(|e| fail(EXIT_CONFIG, e))
}

/// Model settings from `[model]`, with `dim` and `num_queries` taken from
/// the dataset when not set explicitly.
fn model_config(table: &toml::Table, data: &Dataset) -> CliResult<ModelConfig> {
    let mut t = table.clone();
    t.entry("dim").or_insert(toml::Value::Integer(data.dims.dim as i64));
    t.entry("num_queries").or_insert(toml::Value::Integer(data.dims.m as i64));
    let cfg: ModelConfig = toml::Value::Table(t)
        .try_into()
        .context("parsing [model]")
        .map_err(|e| fail(EXIT_CONFIG, e))?;
    if cfg.dim != data.dims.dim {
        return Err(fail(
            EXIT_DIM,
            anyhow!("model dim {} does not match dataset dim {}", cfg.dim, data.dims.dim),
        ));
    }
    Ok(cfg)
}

/// Refuse to reuse a non-empty directory unless forced.
fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    let occupied = dir.exists() && (dir.is_file() || fs::read_dir(dir).map_or(true, |mut d| d.next().is_some()));
    if occupied && !force {
        return Err(fail(
            EXIT_IO,
            anyhow!("refusing to overwrite {} (use --force)", dir.display()),
        ));
    }
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(|e| fail(EXIT_IO, e))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn coverage(data: &Dataset) -> (f64, f64) {
    let n = data.items.len().max(1) as f64;
    let audio = data.items.iter().filter(|i| i.audio_tokens.is_some()).count() as f64 / n;
    let speech = data.items.iter().filter(|i| i.speech_tokens.is_some()).count() as f64 / n;
    (round6(audio), round6(speech))
}

fn dataset_summary(data: &Dataset) -> Value {
    let mut groups = Map::new();
    for g in Group::ALL {
        let c = data.queries.iter().filter(|q| q.group == Some(g)).count();
        groups.insert(g.as_str().to_string(), json!(c));
    }
    let untagged = data.queries.iter().filter(|q| q.group.is_none()).count();
    if untagged > 0 {
        groups.insert("unknown".into(), json!(untagged));
    }
    let (audio, speech) = coverage(data);
    let splits: BTreeMap<&str, usize> = data.splits.iter().map(|(k, v)| (k.as_str(), v.len())).collect();
    json!({
        "dim": data.dims.dim,
        "teacher_dim": data.dims.teacher_dim,
        "m": data.dims.m,
        "n_s": data.dims.n_s,
        "l_a0": data.dims.l_a0,
        "items": data.items.len(),
        "queries": data.queries.len(),
        "query_groups": groups,
        "splits": splits,
        "audio_coverage": audio,
        "speech_coverage": speech,
        "missing_audio": round6(1.0 - audio),
        "missing_speech": round6(1.0 - speech),
    })
}

fn read_data(dir: &Path) -> CliResult<Dataset> {
    read_dataset(dir).ctx(|| format!("reading dataset {}", dir.display()))
}

fn cmd_gen(config: Option<&Path>, out: &Path, force: bool, latents: bool, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = load_config(config)?.synth;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (data, lat) = generate_with_latents(&cfg).map_err(|e| fail(EXIT_CONFIG, e))?;
    prepare_out_dir(out, force)?;
    write_dataset(&data, out).ctx(|| format!("writing {}", out.display()))?;
    if latents {
        lat.write(&data, &out.join(LATENT_FILE)).ctx(|| "writing latents".into())?;
    }
    print_json(&dataset_summary(&data));
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    force: bool,
    overrides: TrainOverrides,
) -> CliResult<()> {
    let file = load_config(config)?;
    let mut cfg = file.train;
    overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| fail(EXIT_CONFIG, e))?;
    let data = read_data(data_dir)?;
    let model_cfg = model_config(&file.model, &data)?;
    let has_split = |name: &str| data.splits.get(name).is_some_and(|s| !s.is_empty());
    let train_set = if has_split("train") {
        data.split("train")
    } else {
        log::warn!("no train split; training on all items");
        data.subset(&(0..data.items.len()).collect::<Vec<_>>())
    };
    let val = has_split("val").then(|| data.split("val"));
    prepare_out_dir(out, force)?;
    let model = FusionModel::new(model_cfg).map_err(|e| fail(EXIT_CONFIG, e))?;
    let output = train(model, &cfg, &train_set, val.as_ref(), Some(out)).ctx(|| "training".into())?;
    let best = match &val {
        Some(v) => select_checkpoint(&output.checkpoints, v, cfg.lambda).ctx(|| "selecting checkpoint".into())?,
        None => {
            log::warn!("no val split; keeping the last checkpoint");
            output.checkpoints.len() - 1
        }
    };
    let ckpt = &output.checkpoints[best];
    ckpt.write(&out.join(BEST_CHECKPOINT)).ctx(|| "writing best checkpoint".into())?;
    let last = output.log.last();
    print_json(&json!({
        "steps": output.log.len(),
        "best_epoch": ckpt.epoch,
        "final_total": last.map(|r| r.total),
        "final_contrastive": last.map(|r| r.contrastive),
        "final_alignment": last.map(|r| r.alignment),
        "checkpoint": out.join(BEST_CHECKPOINT),
    }));
    Ok(())
}

struct TrainOverrides {
    mode: Option<FusionMode>,
    align_kind: Option<AlignKind>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(self, cfg: &mut TrainConfig) {
        if let Some(x) = self.mode {
            cfg.mode = x;
        }
        if let Some(x) = self.align_kind {
            cfg.align_kind = x;
        }
        if let Some(x) = self.epochs {
            cfg.epochs = x;
        }
        if let Some(x) = self.batch_size {
            cfg.batch_size = x;
        }
        if let Some(x) = self.lr {
            cfg.lr = x;
        }
        if let Some(x) = self.seed {
            cfg.seed = x;
        }
    }
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, FusionModel<f32>)> {
    let ckpt = Checkpoint::read(path).map_err(|e| fail(EXIT_IO, anyhow!(e).context(format!("reading checkpoint {}", path.display()))))?;
    let model = ckpt.to_model().map_err(|e| fail(EXIT_IO, e))?;
    Ok((ckpt, model))
}

fn check_dims(model: &FusionModel<f32>, data: &Dataset) -> CliResult<()> {
    if model.config.dim != data.dims.dim {
        return Err(fail(
            EXIT_DIM,
            anyhow!("checkpoint dim {} does not match dataset dim {}", model.config.dim, data.dims.dim),
        ));
    }
    Ok(())
}

fn eval_split(data: &Dataset, split: &str) -> Dataset {
    if data.splits.get(split).is_some_and(|s| !s.is_empty()) {
        data.split(split)
    } else {
        log::info!("split {split} absent; using all items");
        data.subset(&(0..data.items.len()).collect::<Vec<_>>())
    }
}

fn summary_json(s: &Summary) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("r1".into(), json!(100.0 * s.r1));
    m.insert("r5".into(), json!(100.0 * s.r5));
    m.insert("r10".into(), json!(100.0 * s.r10));
    m.insert("sumr".into(), json!(s.sumr));
    m.insert("queries".into(), json!(s.queries));
    m
}

struct EvalArgs<'a> {
    split: &'a str,
    mode: Option<FusionMode>,
    groups: bool,
    direction: Direction,
    lambda: f64,
}

fn eval_one(model: &FusionModel<f32>, mode: FusionMode, dir: &Path, a: &EvalArgs) -> CliResult<(Summary, Map<String, Value>)> {
    let data = read_data(dir)?;
    check_dims(model, &data)?;
    let set = eval_split(&data, a.split);
    if set.queries.is_empty() {
        return Err(fail(EXIT_IO, anyhow!("{} has no queries to evaluate", dir.display())));
    }
    let index = model.precompute_index(&set, mode).ctx(|| "building index".into())?;
    let sm = score_matrix(&index, &set.queries, a.lambda).ctx(|| "scoring".into())?;
    let gt = ground_truth(&sm, &set.queries).map_err(core)?;
    let (overall, per_group) = match a.direction {
        Direction::T2v => {
            let groups: Vec<Option<Group>> = set.queries.iter().map(|q| q.group).collect();
            let report = grouped_eval(&sm.values, &gt, &groups).map_err(core)?;
            (report.overall, a.groups.then_some(report.per_group))
        }
        Direction::V2t => {
            if a.groups {
                log::warn!("--groups applies to text-to-video only");
            }
            (video_to_text(&sm.values, &gt).map_err(core)?, None)
        }
    };
    let mut obj = summary_json(&overall);
    obj.insert("mr1".into(), json!(100.0 * overall.r1));
    if let Some(pg) = per_group {
        let blocks: Map<String, Value> = pg.iter().map(|(k, s)| (k.clone(), Value::Object(summary_json(s)))).collect();
        obj.insert("per_group".into(), Value::Object(blocks));
    }
    obj.insert("mode".into(), json!(mode.as_str()));
    obj.insert("direction".into(), json!(if matches!(a.direction, Direction::T2v) { "t2v" } else { "v2t" }));
    Ok((overall, obj))
}

fn csv_rows(prefix: &str, obj: &Map<String, Value>, rows: &mut Vec<(String, String)>) {
    for (k, v) in obj {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(inner) => csv_rows(&key, inner, rows),
            Value::String(s) => rows.push((key, s.clone())),
            other => rows.push((key, other.to_string())),
        }
    }
}

fn cmd_eval(checkpoint: &Path, data: &[PathBuf], format: Format, a: EvalArgs) -> CliResult<()> {
    let (ckpt, model) = load_checkpoint(checkpoint)?;
    let mode = a.mode.unwrap_or(ckpt.mode);
    let mut runs = Vec::with_capacity(data.len());
    let mut summaries = Vec::with_capacity(data.len());
    for dir in data {
        let (s, obj) = eval_one(&model, mode, dir, &a)?;
        summaries.push(s);
        runs.push(obj);
    }
    let out = if runs.len() == 1 {
        runs.pop().expect("one run")
    } else {
        let mut m = Map::new();
        m.insert(
            "mr1".into(),
            json!(100.0 * mean_r1(&summaries).map_err(core)?),
        );
        m.insert("runs".into(), Value::Array(runs.into_iter().map(Value::Object).collect()));
        m
    };
    match format {
        Format::Json => print_json(&Value::Object(out)),
        Format::Csv => {
            let mut rows = Vec::new();
            match out.get("runs") {
                Some(Value::Array(list)) => {
                    for (i, r) in list.iter().enumerate() {
                        if let Value::Object(o) = r {
                            csv_rows(&format!("run{i}"), o, &mut rows);
                        }
                    }
                    rows.push(("mr1".into(), out["mr1"].to_string()));
                }
                _ => csv_rows("", &out, &mut rows),
            }
            println!("metric,value");
            for (k, v) in rows {
                println!("{k},{v}");
            }
        }
    }
    Ok(())
}

struct ScoreArgs<'a> {
    query: &'a str,
    k: usize,
    split: Option<&'a str>,
    mode: Option<FusionMode>,
    lambda: f64,
}

fn cmd_score(checkpoint: &Path, data_dir: &Path, a: ScoreArgs) -> CliResult<()> {
    let (ckpt, model) = load_checkpoint(checkpoint)?;
    let data = read_data(data_dir)?;
    check_dims(&model, &data)?;
    let query = data
        .queries
        .iter()
        .find(|q| q.query_id == a.query)
        .cloned()
        .ok_or_else(|| fail(EXIT_UNKNOWN_QUERY, anyhow!("unknown query id {}", a.query)))?;
    let gallery = match a.split {
        Some(s) => eval_split(&data, s),
        None => data.subset(&(0..data.items.len()).collect::<Vec<_>>()),
    };
    let mode = a.mode.unwrap_or(ckpt.mode);
    let index = model.precompute_index(&gallery, mode).ctx(|| "building index".into())?;
    let scores = score_query(&index, &query.embedding, a.lambda).map_err(core)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| {
        scores[y]
            .total_cmp(&scores[x])
            .then_with(|| index.entries[x].item_id.cmp(&index.entries[y].item_id))
    });
    let top: Vec<Value> = order
        .iter()
        .take(a.k)
        .enumerate()
        .map(|(r, &i)| json!({"rank": r + 1, "item": index.entries[i].item_id, "score": scores[i]}))
        .collect();
    print_json(&json!({
        "query": query.query_id,
        "ground_truth": query.ground_truth_item,
        "mode": mode.as_str(),
        "results": top,
    }));
    Ok(())
}

fn cmd_inspect(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        if !path.join(MANIFEST_FILE).exists() {
            return Err(fail(EXIT_IO, anyhow!("{} holds no dataset", path.display())));
        }
        print_json(&dataset_summary(&read_data(path)?));
        return Ok(());
    }
    let (ckpt, model) = load_checkpoint(path)?;
    let scalar = |id| f64::from(model.params.get(id).item());
    let (ga, gs) = model.gate_ids();
    let (alpha, beta) = model.mixing_ids();
    let mut out = json!({
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "mode": ckpt.mode.as_str(),
        "model": ckpt.model,
        "parameters": model.params.scalar_count(),
        "gate_audio": round6(scalar(ga).tanh()),
        "gate_speech": round6(scalar(gs).tanh()),
        "logit_scale": round6(scalar(model.logit_scale_id())),
    });
    if ckpt.mode == FusionMode::LearnableWeights {
        out["alpha"] = json!(round6(scalar(alpha)));
        out["beta"] = json!(round6(scalar(beta)));
    }
    print_json(&out);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let lambda = |l: Option<f64>| l.unwrap_or(tribranch_core::similarity::DEFAULT_LAMBDA);
    match cli.command {
        Command::Gen {
            config,
            out,
            force,
            latents,
            seed,
        } => cmd_gen(config.as_deref(), &out, force, latents, seed),
        Command::Train {
            config,
            data,
            out,
            force,
            mode,
            align_kind,
            epochs,
            batch_size,
            lr,
            seed,
        } => cmd_train(
            config.as_deref(),
            &data,
            &out,
            force,
            TrainOverrides {
                mode,
                align_kind,
                epochs,
                batch_size,
                lr,
                seed,
            },
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
            mode,
            groups,
            direction,
            format,
            lambda: l,
        } => cmd_eval(
            &checkpoint,
            &data,
            format,
            EvalArgs {
                split: &split,
                mode,
                groups,
                direction,
                lambda: lambda(l),
            },
        ),
        Command::Score {
            checkpoint,
            data,
            query,
            k,
            split,
            mode,
            lambda: l,
        } => cmd_score(
            &checkpoint,
            &data,
            ScoreArgs {
                query: &query,
                k,
                split: split.as_deref(),
                mode,
                lambda: lambda(l),
            },
        ),
        Command::Inspect { path } => cmd_inspect(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
