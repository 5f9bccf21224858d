//! Run configuration and the five pipeline commands behind the CLI.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{concept_oracle_ranking, epoch_batches, read_features, synthesize, write_synthetic, Dataset, SyntheticFiles, SyntheticSpec};
use crate::encoders::{QueryTokens, VideoFeatures, Vocab};
use crate::error::{Error, Result};
use crate::eval::{
    compute_report, enumerate_proposals, gt_segment, oracle_ranking, rank_segments, EvalReport, QueryRanking,
    SpanScore, DEFAULT_NS, DEFAULT_THETAS,
};
use crate::exec::Exec;
use crate::loss::{batch_loss, batch_loss_on, train_step, LossConfig, Pair};
use crate::model::{attention_dump, check_params, init_params, AttentionDump, ModelConfig, ModelDims};
use crate::optim::Adam;
use crate::tensor::{finite_diff_check, read_checkpoint, write_checkpoint, Fault, GradCheckReport, Init, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs: usize,
    /// Seeds parameter init and batch order.
    pub seed: u64,
    /// Worker threads for batch similarity and eval (0 = all cores).
    pub threads: usize,
    /// Force the sequential executor.
    pub sequential: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { lr: 1e-5, epochs: 10, seed: 0, threads: 0, sequential: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub recall_at: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
    pub span_score: SpanScore,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { recall_at: DEFAULT_NS.to_vec(), iou_thresholds: DEFAULT_THETAS.to_vec(), span_score: SpanScore::default() }
    }
}

/// Size of the instance the gradient check runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSettings {
    pub hidden: usize,
    pub word_embed: usize,
    pub pe_dim: usize,
    pub feature_dim: usize,
    /// Visual FC width override, needed when `pe_mode` is `none`.
    pub visual_out: Option<usize>,
    pub vocab: usize,
    pub frames: usize,
    pub words: usize,
    pub videos: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            hidden: 16,
            word_embed: 8,
            pe_dim: 4,
            feature_dim: 6,
            visual_out: None,
            vocab: 7,
            frames: 4,
            words: 3,
            videos: 3,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 11,
        }
    }
}

/// File locations. Unset manifest and vocabulary paths fall back to `data_dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Optional pre-trained embedding table in checkpoint format.
    pub embeddings: Option<PathBuf>,
}

impl Paths {
    fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.train_manifest.clone().unwrap_or_else(|| self.data_dir().join("train.json"))
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.test_manifest.clone().unwrap_or_else(|| self.data_dir().join("test.json"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| self.data_dir().join("vocab.txt"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| PathBuf::from("run/model.lgan"))
    }

    pub fn report(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| PathBuf::from("run/report.json"))
    }

    pub fn log(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| PathBuf::from("run/train.jsonl"))
    }

    pub fn synthetic(&self) -> SyntheticFiles {
        SyntheticFiles::in_dir(&self.data_dir())
    }
}

/// Everything a run needs. Unknown keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub gradcheck: GradcheckSettings,
    pub synth: SyntheticSpec,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.loss.margin >= 0.0) || self.loss.top_k_negatives == 0 || self.loss.batch_videos < 2 {
            return Err(Error::Config("need margin >= 0, top_k_negatives >= 1 and batch_videos >= 2".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.train.lr)));
        }
        if self.eval.recall_at.is_empty() || self.eval.iou_thresholds.is_empty() {
            return Err(Error::Config("eval grid is empty".into()));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.train.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    /// SHA-256 of the settings that determine results; paths and thread counts are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.train.threads = 0;
        c.train.sequential = false;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Model config with the vocabulary size taken from the vocabulary file.
    pub fn model_for_vocab(&self, vocab: &Vocab) -> ModelConfig {
        let mut m = self.model.clone();
        m.dims.vocab = vocab.len();
        m
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthOutcome {
    pub files: SyntheticFiles,
    pub train_videos: usize,
    pub test_videos: usize,
    /// Nearest-concept oracle on the test split, when verification was requested.
    pub oracle: Option<EvalReport>,
}

/// Minimum oracle R@1 at IoU 0.5 for a generated set to pass `--verify`.
pub const ORACLE_PASS: f64 = 0.95;

pub fn cmd_synth(cfg: &RunConfig, verify: bool) -> Result<SynthOutcome> {
    let data = synthesize(&cfg.synth)?;
    let files = write_synthetic(&data, &cfg.synth, &cfg.paths.data_dir())?;
    let oracle = if verify {
        let concepts = read_features(&files.concepts)?;
        let test = Dataset::load(&files.test_manifest)?;
        let rankings = test
            .manifest
            .queries
            .iter()
            .map(|q| concept_oracle_ranking(test.video(&q.video_id)?, q, &concepts, &test.scheme(&q.video_id)?))
            .collect::<Result<Vec<_>>>()?;
        Some(compute_report(&rankings, &cfg.eval.recall_at, &cfg.eval.iou_thresholds))
    } else {
        None
    };
    Ok(SynthOutcome { files, train_videos: data.train.len(), test_videos: data.test.len(), oracle })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Step { epoch: usize, step: u64, loss: f64, active_hinges: usize, lr: f64, wall_ms: u64 },
    Epoch { epoch: usize, mean_loss: f64, steps: usize },
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    /// Mean batch loss of each epoch run by this invocation.
    pub epoch_losses: Vec<f64>,
    pub epochs_done: usize,
    pub steps: u64,
}

/// Path of the optimizer state stored next to a checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

const EPOCHS_KEY: &str = "train.epochs_done";

fn save_state(ckpt: &Path, params: &ParamStore, adam: &Adam, epochs_done: usize) -> Result<()> {
    ensure_parent(ckpt)?;
    write_checkpoint(ckpt, params)?;
    let mut state = adam.to_store();
    state.insert(EPOCHS_KEY, Tensor::new(vec![1], vec![epochs_done as f64])?)?;
    write_checkpoint(optimizer_path(ckpt), &state)
}

fn load_state(ckpt: &Path) -> Result<(ParamStore, Adam, usize)> {
    let params = read_checkpoint(ckpt)?;
    let state = read_checkpoint(optimizer_path(ckpt))?;
    let adam = Adam::from_store(&state)?;
    let done = state
        .get(EPOCHS_KEY)
        .map(|t| t.data()[0] as usize)
        .ok_or_else(|| Error::Data(format!("optimizer state lacks {EPOCHS_KEY}")))?;
    Ok((params, adam, done))
}

/// Trains for `train.epochs` epochs, writing the checkpoint after each one.
///
/// With `resume`, parameters, optimizer moments and the epoch counter are restored from the
/// checkpoint and training continues where it stopped.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = Vocab::load(cfg.paths.vocab())?;
    let model = cfg.model_for_vocab(&vocab);
    model.validate()?;
    let data = Dataset::load(cfg.paths.train_manifest())?;
    data.check_against(vocab.len(), usize::MAX, model.dims.feature_dim)?;
    let ckpt = cfg.paths.checkpoint();
    let log_path = cfg.paths.log();
    ensure_parent(&log_path)?;

    let (mut params, mut adam, start) = if resume && ckpt.exists() {
        let (p, mut a, done) = load_state(&ckpt)?;
        check_params(&model, &p)?;
        a.lr = cfg.train.lr;
        (p, a, done)
    } else {
        let mut p = init_params(&model, cfg.train.seed);
        if let Some(e) = &cfg.paths.embeddings {
            p.load_embedding(e)?;
        }
        (p, Adam::new(cfg.train.lr), 0)
    };
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut emit = |rec: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(rec)? + "\n";
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))
    };

    if start == 0 {
        save_state(&ckpt, &params, &adam, 0)?;
    }
    let exec = cfg.exec();
    let clock = Instant::now();
    let mut epoch_losses = Vec::new();
    for epoch in start..cfg.train.epochs {
        let batches = epoch_batches(&data.manifest, cfg.loss.batch_videos, cfg.train.seed, epoch as u64)?;
        let mut total = 0.0;
        for batch in &batches {
            let pairs: Vec<Pair> = batch
                .iter()
                .map(|&qi| {
                    let q = &data.manifest.queries[qi];
                    Ok((data.video(&q.video_id)?, q))
                })
                .collect::<Result<_>>()?;
            let mut loss_cfg = cfg.loss.clone();
            loss_cfg.top_k_negatives = loss_cfg.top_k_negatives.min(pairs.len() - 1);
            let out = exec.install(cfg.train.threads, || train_step(&mut params, &mut adam, &model, &loss_cfg, &pairs, exec))?;
            total += out.loss;
            emit(&LogRecord::Step {
                epoch,
                step: adam.steps_taken(),
                loss: out.loss,
                active_hinges: out.active_hinges,
                lr: adam.lr,
                wall_ms: clock.elapsed().as_millis() as u64,
            })?;
        }
        let mean = total / batches.len().max(1) as f64;
        emit(&LogRecord::Epoch { epoch, mean_loss: mean, steps: batches.len() })?;
        epoch_losses.push(mean);
        save_state(&ckpt, &params, &adam, epoch + 1)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        epoch_losses,
        epochs_done: cfg.train.epochs.max(start),
        steps: adam.steps_taken(),
    })
}

/// Ranks every query of a dataset with the given parameters.
pub fn rank_dataset(
    params: &ParamStore,
    model: &ModelConfig,
    data: &Dataset,
    score: SpanScore,
    exec: Exec,
) -> Result<Vec<QueryRanking>> {
    exec.map(&data.manifest.queries, |q| {
        let video = data.video(&q.video_id)?;
        let ranked = rank_segments(params, model, video, q, &data.scheme(&q.video_id)?, score)?;
        Ok(QueryRanking { query_id: q.query_id.clone(), gt: gt_segment(q)?, ranked })
    })
    .into_iter()
    .collect()
}

/// Rankings where every query's proposals are ordered by their true IoU.
pub fn oracle_rankings(data: &Dataset) -> Result<Vec<QueryRanking>> {
    data.manifest
        .queries
        .iter()
        .map(|q| {
            let video = data.video(&q.video_id)?;
            let spans = enumerate_proposals(&data.scheme(&q.video_id)?, video.frames())?.spans;
            let gt = gt_segment(q)?;
            Ok(QueryRanking { query_id: q.query_id.clone(), ranked: oracle_ranking(&spans, &gt), gt })
        })
        .collect()
}

/// Evaluates the checkpoint on the test manifest and writes the report.
///
/// With `oracle`, proposals are ranked by their true IoU and no checkpoint is read.
pub fn cmd_eval(cfg: &RunConfig, oracle: bool) -> Result<EvalReport> {
    cfg.validate()?;
    let data = Dataset::load(cfg.paths.test_manifest())?;
    let (rankings, ckpt_hash) = if oracle {
        (oracle_rankings(&data)?, "oracle".to_string())
    } else {
        let ckpt = cfg.paths.checkpoint();
        let bytes = std::fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let params = ParamStore::from_bytes(&bytes)?;
        let vocab = Vocab::load(cfg.paths.vocab())?;
        let model = cfg.model_for_vocab(&vocab);
        check_params(&model, &params)?;
        data.check_against(vocab.len(), usize::MAX, model.dims.feature_dim)?;
        let exec = cfg.exec();
        let r = exec.install(cfg.train.threads, || rank_dataset(&params, &model, &data, cfg.eval.span_score, exec))?;
        (r, sha256_hex(&bytes))
    };
    let mut report = compute_report(&rankings, &cfg.eval.recall_at, &cfg.eval.iou_thresholds);
    report.config_hash = cfg.hash();
    report.checkpoint_hash = ckpt_hash;
    write_json(&cfg.paths.report(), &report)?;
    Ok(report)
}

/// A random batch sized by the gradcheck settings, with the model config it runs under.
pub fn gradcheck_instance(cfg: &RunConfig) -> (ModelConfig, LossConfig, Vec<VideoFeatures>, Vec<QueryTokens>) {
    let g = &cfg.gradcheck;
    let model = ModelConfig {
        dims: ModelDims {
            vocab: g.vocab,
            word_embed: g.word_embed,
            hidden: g.hidden,
            pe_dim: g.pe_dim,
            feature_dim: g.feature_dim,
            visual_out: g.visual_out,
        },
        ..cfg.model.clone()
    };
    let mut init = Init::new(g.seed);
    let videos: Vec<VideoFeatures> = (0..g.videos)
        .map(|i| {
            VideoFeatures::new(format!("gc_v{i}"), init.uniform(vec![g.frames, g.feature_dim], 1), 1.0).expect("finite")
        })
        .collect();
    let queries = (0..g.videos)
        .map(|i| {
            let picks = init.uniform(vec![g.words], 1);
            let tokens = picks.data().iter().map(|u| (((u + 1.0) / 2.0 * g.vocab as f64) as usize).min(g.vocab - 1)).collect();
            QueryTokens { query_id: format!("gc_q{i}"), video_id: format!("gc_v{i}"), tokens, raw_text: None, gt_span: None }
        })
        .collect();
    let loss = LossConfig { top_k_negatives: cfg.loss.top_k_negatives.min(g.videos.saturating_sub(1).max(1)), ..cfg.loss.clone() };
    (model, loss, videos, queries)
}

/// Central-difference check of every parameter's gradient through the full batch loss.
pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<Fault>) -> Result<GradCheckReport> {
    if cfg.gradcheck.videos < 2 || cfg.gradcheck.frames == 0 || cfg.gradcheck.words == 0 || cfg.gradcheck.vocab == 0 {
        return Err(Error::Config("gradcheck needs at least 2 videos and a non-empty instance".into()));
    }
    let (model, loss, videos, queries) = gradcheck_instance(cfg);
    model.validate()?;
    let pairs: Vec<Pair> = videos.iter().zip(&queries).collect();
    let params = init_params(&model, cfg.gradcheck.seed);
    finite_diff_check(
        |p| Ok(batch_loss(p, &model, &loss, &pairs)?.loss),
        |p| Ok(batch_loss_on(Tape::with_fault(fault), p, &model, &loss, &pairs)?.grads),
        &params,
        cfg.gradcheck.step,
        cfg.gradcheck.tolerance,
    )
}

/// Attention matrices of one test query under the checkpoint.
pub fn cmd_attention(cfg: &RunConfig, query_id: &str, manifest: Option<&Path>) -> Result<AttentionDump> {
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.test_manifest());
    let data = Dataset::load(&path)?;
    let q = data
        .manifest
        .queries
        .iter()
        .find(|q| q.query_id == query_id)
        .ok_or_else(|| Error::Data(format!("query {query_id} not in {}", path.display())))?;
    let vocab = Vocab::load(cfg.paths.vocab())?;
    let model = cfg.model_for_vocab(&vocab);
    let params = read_checkpoint(cfg.paths.checkpoint())?;
    check_params(&model, &params)?;
    attention_dump(&params, &model, data.video(&q.video_id)?, q)
}

/// Per-parameter rows for printing a gradcheck table.
pub fn gradcheck_table(report: &GradCheckReport) -> String {
    let mut rows: BTreeMap<&str, String> = BTreeMap::new();
    for p in &report.params {
        rows.insert(
            &p.name,
            format!("{:<18} {:>8} {:>12.3e} {:>12.3e}  {}", p.name, p.entries, p.max_rel_err, p.max_abs_err, if p.passed { "ok" } else { "FAIL" }),
        );
    }
    let mut out = format!("{:<18} {:>8} {:>12} {:>12}\n", "parameter", "entries", "max rel", "max abs");
    for r in rows.values() {
        out.push_str(r);
        out.push('\n');
    }
    out
}
