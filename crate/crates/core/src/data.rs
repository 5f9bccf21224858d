//! Feature files, dataset manifests, epoch batching and the synthetic concept dataset.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{QueryTokens, VideoFeatures, Vocab};
use crate::error::{Error, Result};
use crate::eval::{enumerate_proposals, ProposalScheme, QueryRanking, SchemeKind, sort_scored};
use crate::loss::SegmentSpan;
use crate::tensor::{Reader, Tensor};

const FEATURE_MAGIC: &[u8; 4] = b"LGFV";
const FEATURE_VERSION: u32 = 1;

/// Encodes an `N x D` matrix as little-endian `f32` with a 16-byte header.
pub fn features_to_bytes(features: &Tensor) -> Result<Vec<u8>> {
    let (n, d) = features.dims2()?;
    let mut out = Vec::with_capacity(16 + 4 * n * d);
    out.extend_from_slice(FEATURE_MAGIC);
    for x in [FEATURE_VERSION, n as u32, d as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a feature file. Non-finite values are reported with their row.
pub fn features_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != FEATURE_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected LGFV"));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        r.pos -= 4;
        return Err(r.err(&format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    if n == 0 || d == 0 {
        return Err(r.err(&format!("empty feature matrix {n} x {d}")));
    }
    let need = n * d * 4;
    let have = bytes.len() - r.pos;
    if have < need {
        return Err(r.err(&format!("header declares {n} x {d} values but payload holds {} bytes", have)));
    }
    if have > need {
        r.pos += need;
        return Err(r.err("trailing bytes after payload"));
    }
    let data: Vec<f64> = r
        .take(need)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!("non-finite feature value in row {}", i / d)));
    }
    Tensor::new(vec![n, d], data)
}

pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, features_to_bytes(features)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: String,
    /// Per-video unit count for unit-span schemes; the scheme's count applies when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub scheme: ProposalScheme,
    pub videos: Vec<VideoEntry>,
    pub queries: Vec<QueryTokens>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Checks id uniqueness, query-to-video references and ground truth outside training.
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(v.video_id.as_str()) {
                return Err(Error::Data(format!("duplicate video id {}", v.video_id)));
            }
        }
        let mut qids = HashSet::new();
        for q in &self.queries {
            if !qids.insert(q.query_id.as_str()) {
                return Err(Error::Data(format!("duplicate query id {}", q.query_id)));
            }
            if !ids.contains(q.video_id.as_str()) {
                return Err(Error::Data(format!("query {} references unknown video {}", q.query_id, q.video_id)));
            }
            if self.split != Split::Train && q.gt_span.is_none() {
                return Err(Error::Data(format!("query {} has no ground-truth span", q.query_id)));
            }
        }
        Ok(())
    }
}

/// A manifest with every feature file loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub videos: Vec<VideoFeatures>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = DatasetManifest::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Dataset::from_manifest(manifest, &base)
    }

    pub fn from_manifest(manifest: DatasetManifest, base: &Path) -> Result<Self> {
        manifest.validate()?;
        let videos = manifest
            .videos
            .iter()
            .map(|entry| {
                let p = resolve(base, &entry.feature_path);
                let features = read_features(&p)?;
                let n = features.rows();
                let spf = scheme_for(&manifest.scheme, entry).seconds_per_frame(n);
                VideoFeatures::new(entry.video_id.clone(), features, spf)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::from_parts(manifest, videos))
    }

    /// Builds a dataset from already loaded features, in manifest video order.
    pub fn from_parts(manifest: DatasetManifest, videos: Vec<VideoFeatures>) -> Self {
        let index = videos.iter().enumerate().map(|(i, v)| (v.video_id.clone(), i)).collect();
        Dataset { manifest, videos, index }
    }

    pub fn video(&self, id: &str) -> Result<&VideoFeatures> {
        self.index
            .get(id)
            .map(|&i| &self.videos[i])
            .ok_or_else(|| Error::Data(format!("unknown video {id}")))
    }

    /// Proposal scheme with this video's unit count applied.
    pub fn scheme(&self, video_id: &str) -> Result<ProposalScheme> {
        let i = *self
            .index
            .get(video_id)
            .ok_or_else(|| Error::Data(format!("unknown video {video_id}")))?;
        Ok(scheme_for(&self.manifest.scheme, &self.manifest.videos[i]))
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.cols())
    }

    /// Checks every query against the vocabulary size and the feature width.
    pub fn check_against(&self, vocab: usize, max_len: usize, feature_dim: usize) -> Result<()> {
        for q in &self.manifest.queries {
            q.validate(vocab, max_len)?;
        }
        if let Some(v) = self.videos.iter().find(|v| v.features.cols() != feature_dim) {
            return Err(Error::Data(format!(
                "video {} has feature width {}, model expects {feature_dim}",
                v.video_id,
                v.features.cols()
            )));
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn scheme_for(scheme: &ProposalScheme, entry: &VideoEntry) -> ProposalScheme {
    match (&scheme.kind, entry.unit_count) {
        (SchemeKind::UnitSpans { .. }, Some(u)) => ProposalScheme::unit_spans(u, scheme.seconds_per_unit),
        _ => scheme.clone(),
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Query indices for one epoch, grouped into batches of distinct videos.
///
/// Videos are shuffled with a seed derived from `(seed, epoch)` and each contributes one of
/// its queries. A batch size larger than the video count is reduced to it; the final short
/// batch is dropped.
pub fn epoch_batches(manifest: &DatasetManifest, batch_videos: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let mut by_video: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, q) in manifest.queries.iter().enumerate() {
        let s = *slot.entry(q.video_id.as_str()).or_insert_with(|| {
            by_video.push((q.video_id.as_str(), Vec::new()));
            by_video.len() - 1
        });
        by_video[s].1.push(i);
    }
    if by_video.len() < 2 {
        return Err(Error::Contract(format!(
            "training needs at least 2 videos with queries, found {}",
            by_video.len()
        )));
    }
    if batch_videos < 2 {
        return Err(Error::Config(format!("batch_videos must be at least 2, got {batch_videos}")));
    }
    let b = batch_videos.min(by_video.len());
    let mut rng = epoch_rng(seed, epoch);
    by_video.shuffle(&mut rng);
    let picks: Vec<usize> = by_video.iter().map(|(_, qs)| qs[rng.random_range(0..qs.len())]).collect();
    Ok(picks.chunks_exact(b).map(<[usize]>::to_vec).collect())
}

/// Parameters of the synthetic concept dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub concept_count: usize,
    /// At least `concept_count`; ids past the concepts are unused filler tokens.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_video: usize,
    pub unit_count: usize,
    pub seconds_per_unit: f64,
    pub words_per_query: usize,
    /// The last `background_concepts` concepts only ever fill frames outside the ground truth
    /// and never appear in queries. With zero, outside frames use any concept absent from the query.
    pub background_concepts: usize,
    /// Ground-truth length is drawn from `1..=max_gt_units`.
    pub max_gt_units: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            concept_count: 8,
            vocab_size: 8,
            feature_dim: 16,
            frames_per_video: 12,
            unit_count: 6,
            seconds_per_unit: 5.0,
            words_per_query: 1,
            background_concepts: 2,
            max_gt_units: 1,
            train_videos: 200,
            test_videos: 50,
            noise_sigma: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn frames_per_unit(&self) -> usize {
        self.frames_per_video / self.unit_count.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.concept_count == 0 || self.feature_dim == 0 {
            return bad("concept_count and feature_dim must be positive".into());
        }
        if self.vocab_size < self.concept_count {
            return bad(format!("vocab_size {} below concept_count {}", self.vocab_size, self.concept_count));
        }
        if self.unit_count == 0 || !self.frames_per_video.is_multiple_of(self.unit_count) {
            return bad(format!(
                "frames_per_video {} must be a positive multiple of unit_count {}",
                self.frames_per_video, self.unit_count
            ));
        }
        if self.max_gt_units == 0 || self.max_gt_units > self.unit_count {
            return bad(format!("max_gt_units must lie in 1..={}", self.unit_count));
        }
        if self.background_concepts >= self.concept_count {
            return bad("background_concepts must leave at least one query concept".into());
        }
        let queryable = self.concept_count - self.background_concepts;
        if self.words_per_query == 0 || self.words_per_query > queryable {
            return bad(format!("words_per_query must lie in 1..={queryable}"));
        }
        if self.words_per_query > self.frames_per_unit() {
            return bad("a ground-truth unit must hold at least one frame per query word".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.seconds_per_unit > 0.0) {
            return bad("noise_sigma must be non-negative and seconds_per_unit positive".into());
        }
        if self.train_videos < 2 {
            return bad("train_videos must be at least 2".into());
        }
        Ok(())
    }

    pub fn scheme(&self) -> ProposalScheme {
        ProposalScheme::unit_spans(self.unit_count, self.seconds_per_unit)
    }
}

/// One generated video with its hidden labels.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub features: VideoFeatures,
    pub frame_concepts: Vec<usize>,
    pub query: QueryTokens,
    /// Ground truth as `[start_unit, end_unit)`.
    pub gt_units: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub concepts: Tensor,
    pub vocab: Vocab,
    pub train: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

/// Unit-norm concept vectors; orthonormal whenever `count <= dim`.
fn concept_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if rows.len() < dim {
            for r in &rows {
                let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_rows(&rows).expect("rectangular")
}

fn synth_video(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    concepts: &Tensor,
    video_id: String,
) -> Result<SyntheticVideo> {
    let fpu = spec.frames_per_unit();
    let n = spec.frames_per_video;
    let len = rng.random_range(1..=spec.max_gt_units);
    let start = rng.random_range(0..=spec.unit_count - len);
    let queryable = spec.concept_count - spec.background_concepts;
    let mut pool: Vec<usize> = (0..queryable).collect();
    pool.shuffle(rng);
    let words = pool[..spec.words_per_query].to_vec();
    let others: Vec<usize> = if spec.background_concepts > 0 {
        (queryable..spec.concept_count).collect()
    } else if pool.len() > words.len() {
        pool[words.len()..].to_vec()
    } else {
        pool.clone()
    };

    let mut frame_concepts = vec![0; n];
    for u in 0..spec.unit_count {
        let frames = u * fpu..(u + 1) * fpu;
        if (start..start + len).contains(&u) {
            continue;
        }
        let c = others[rng.random_range(0..others.len())];
        frame_concepts[frames].fill(c);
    }
    // The ground-truth frames hold the query concepts in order, as near-equal runs.
    let gt_frames = len * fpu;
    let first = start * fpu;
    for k in 0..gt_frames {
        frame_concepts[first + k] = words[k * words.len() / gt_frames];
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * spec.feature_dim);
    for &c in &frame_concepts {
        for &x in concepts.row(c) {
            let eps = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(x + eps);
        }
    }
    let features = Tensor::new(vec![n, spec.feature_dim], data)?;
    let spf = spec.seconds_per_unit / fpu as f64;
    let query = QueryTokens {
        query_id: format!("{video_id}_q0"),
        video_id: video_id.clone(),
        tokens: words.clone(),
        raw_text: Some(words.iter().map(|w| format!("concept_{w}")).collect::<Vec<_>>().join(" ")),
        gt_span: Some((start as f64 * spec.seconds_per_unit, (start + len) as f64 * spec.seconds_per_unit)),
    };
    Ok(SyntheticVideo {
        features: VideoFeatures::new(video_id, features, spf)?,
        frame_concepts,
        query,
        gt_units: (start, start + len),
    })
}

/// Generates the full dataset in memory. Identical specs give identical data.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let concepts = concept_vectors(&mut rng, spec.concept_count, spec.feature_dim);
    let tokens = (0..spec.vocab_size)
        .map(|i| if i < spec.concept_count { format!("concept_{i}") } else { format!("filler_{i}") })
        .collect();
    let vocab = Vocab::new(tokens)?;
    let mut split = |prefix: &str, count: usize| {
        (0..count)
            .map(|i| synth_video(spec, &mut rng, &concepts, format!("{prefix}_{i:04}")))
            .collect::<Result<Vec<_>>>()
    };
    let train = split("train", spec.train_videos)?;
    let test = split("test", spec.test_videos)?;
    Ok(SyntheticData { concepts, vocab, train, test })
}

/// Paths written by [`write_synthetic`].
#[derive(Clone, Debug, Serialize)]
pub struct SyntheticFiles {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub vocab: PathBuf,
    pub concepts: PathBuf,
}

impl SyntheticFiles {
    pub fn in_dir(dir: &Path) -> Self {
        SyntheticFiles {
            train_manifest: dir.join("train.json"),
            test_manifest: dir.join("test.json"),
            vocab: dir.join("vocab.txt"),
            concepts: dir.join("concepts.lgfv"),
        }
    }
}

pub fn manifest_for(spec: &SyntheticSpec, split: Split, videos: &[SyntheticVideo]) -> DatasetManifest {
    let name = match split {
        Split::Train => "synthetic-train",
        Split::Val => "synthetic-val",
        Split::Test => "synthetic-test",
    };
    DatasetManifest {
        name: name.into(),
        split,
        scheme: spec.scheme(),
        videos: videos
            .iter()
            .map(|v| VideoEntry {
                video_id: v.features.video_id.clone(),
                feature_path: format!("features/{}.lgfv", v.features.video_id),
                unit_count: None,
            })
            .collect(),
        queries: videos.iter().map(|v| v.query.clone()).collect(),
    }
}

/// Writes manifests, vocabulary, concept matrix and feature files under `dir`.
pub fn write_synthetic(data: &SyntheticData, spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticFiles> {
    let files = SyntheticFiles::in_dir(dir);
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    for v in data.train.iter().chain(&data.test) {
        write_features(feat_dir.join(format!("{}.lgfv", v.features.video_id)), &v.features.features)?;
    }
    manifest_for(spec, Split::Train, &data.train).save(&files.train_manifest)?;
    manifest_for(spec, Split::Test, &data.test).save(&files.test_manifest)?;
    data.vocab.save(&files.vocab)?;
    write_features(&files.concepts, &data.concepts)?;
    Ok(files)
}

/// Index of the concept closest to `x` in Euclidean distance.
pub fn nearest_concept(concepts: &Tensor, x: &[f64]) -> usize {
    let dist = |c: usize| concepts.row(c).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..concepts.rows())
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
        .expect("at least one concept")
}

/// Ranks proposals by decoding each frame to its nearest concept.
///
/// A frame matches when its concept is one of the query's. A span scores minus the number
/// of non-matching frames inside it plus matching frames outside it.
pub fn concept_oracle_ranking(
    video: &VideoFeatures,
    query: &QueryTokens,
    concepts: &Tensor,
    scheme: &ProposalScheme,
) -> Result<QueryRanking> {
    let wanted: HashSet<usize> = query.tokens.iter().copied().collect();
    let matches: Vec<bool> = (0..video.frames())
        .map(|k| wanted.contains(&nearest_concept(concepts, video.features.row(k))))
        .collect();
    let total = matches.iter().filter(|&&m| m).count();
    let spans = enumerate_proposals(scheme, video.frames())?.spans;
    let scored: Vec<(SegmentSpan, f64)> = spans
        .iter()
        .map(|s| {
            let inside = matches[s.start_idx..s.end_idx].iter().filter(|&&m| m).count();
            let miss_in = s.len() - inside;
            let miss_out = total - inside;
            (*s, -((miss_in + miss_out) as f64))
        })
        .collect();
    Ok(QueryRanking {
        query_id: query.query_id.clone(),
        gt: crate::eval::gt_segment(query)?,
        ranked: sort_scored(scored),
    })
}
