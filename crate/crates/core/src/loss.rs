//! LSE-pooled similarity, the bidirectional triplet objective with top-K hard
//! negatives, and the optimizer step that trains on it.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_frames, encode_words, QueryTokens, VideoFeatures};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward_encoded, lse_over_span, ModelConfig};
use crate::optim::Adam;
use crate::tensor::{dot, norm, ParamStore, Tape, Tensor, Var, COSINE_EPS};

/// Contiguous frame range `[start_idx, end_idx)` with its extent in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub start_idx: usize,
    pub end_idx: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

impl SegmentSpan {
    pub fn new(start_idx: usize, end_idx: usize, seconds_per_frame: f64) -> Self {
        SegmentSpan {
            start_idx,
            end_idx,
            start_sec: start_idx as f64 * seconds_per_frame,
            end_sec: end_idx as f64 * seconds_per_frame,
        }
    }

    /// Span whose seconds equal its frame indices.
    pub fn frames(start_idx: usize, end_idx: usize) -> Self {
        Self::new(start_idx, end_idx, 1.0)
    }

    pub fn len(&self) -> usize {
        self.end_idx - self.start_idx
    }

    pub fn is_empty(&self) -> bool {
        self.end_idx <= self.start_idx
    }

    pub fn duration(&self) -> f64 {
        self.end_sec - self.start_sec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub top_k_negatives: usize,
    pub batch_videos: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.7, top_k_negatives: 15, batch_videos: 32 }
    }
}

/// `(1/λ) ln Σ exp(λ r_k)`, evaluated with max subtraction.
pub fn lse_pool(r: &[f64], lambda: f64) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::Contract("LSE pooling over an empty span".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Contract(format!("LSE sharpness must be positive, got {lambda}")));
    }
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = r.iter().map(|&v| (lambda * (v - m)).exp()).sum();
    Ok(m + s.ln() / lambda)
}

/// Cosine between each refined frame `v_k` and its sentence representation `l_k`.
pub fn frame_cosines(v_final: &Tensor, l: &Tensor) -> Result<Vec<f64>> {
    if v_final.shape() != l.shape() {
        return Err(Error::dim(format!("frames {:?} vs sentence reps {:?}", v_final.shape(), l.shape())));
    }
    Ok((0..v_final.rows())
        .map(|k| {
            let (a, b) = (v_final.row(k), l.row(k));
            dot(a, b) / (norm(a) * norm(b) + COSINE_EPS)
        })
        .collect())
}

/// LSE-pooled relevance of a segment to the query.
pub fn lse_similarity(v_final: &Tensor, l: &Tensor, span: SegmentSpan, lambda: f64) -> Result<f64> {
    if span.is_empty() {
        return Err(Error::Contract("empty segment".into()));
    }
    if span.end_idx > v_final.rows() {
        return Err(Error::Contract(format!(
            "segment {}..{} outside {} frames",
            span.start_idx,
            span.end_idx,
            v_final.rows()
        )));
    }
    let r = frame_cosines(v_final, l)?;
    lse_pool(&r[span.start_idx..span.end_idx], lambda)
}

/// `max(0, margin - sim_pos + sim_neg)`.
pub fn triplet_loss(sim_pos: f64, sim_neg: f64, margin: f64) -> f64 {
    (margin - sim_pos + sim_neg).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// Keep the video, swap in another item's query.
    ReplaceQuery,
    /// Keep the query, swap in another item's video.
    ReplaceVideo,
}

/// One triplet term. Pairs are `(video index, query index)` into the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Hinge {
    pub anchor: usize,
    pub negative: usize,
    pub direction: Direction,
}

impl Hinge {
    pub fn positive_pair(&self) -> (usize, usize) {
        (self.anchor, self.anchor)
    }

    pub fn negative_pair(&self) -> (usize, usize) {
        match self.direction {
            Direction::ReplaceQuery => (self.anchor, self.negative),
            Direction::ReplaceVideo => (self.negative, self.anchor),
        }
    }
}

/// For every anchor and direction, the `k` highest-similarity negatives; ties go to the lower index.
///
/// `sims[v][q]` is the similarity of batch video `v` with batch query `q`.
#[allow(clippy::needless_range_loop)]
pub fn mine_hard_negatives(sims: &[Vec<f64>], k: usize) -> Vec<Hinge> {
    let b = sims.len();
    let mut out = Vec::with_capacity(2 * b * k.min(b.saturating_sub(1)));
    for anchor in 0..b {
        for direction in [Direction::ReplaceQuery, Direction::ReplaceVideo] {
            let score = |n: usize| match direction {
                Direction::ReplaceQuery => sims[anchor][n],
                Direction::ReplaceVideo => sims[n][anchor],
            };
            let mut cands: Vec<usize> = (0..b).filter(|&n| n != anchor).collect();
            cands.sort_by(|&x, &y| score(y).total_cmp(&score(x)).then(x.cmp(&y)));
            out.extend(cands.into_iter().take(k).map(|negative| Hinge { anchor, negative, direction }));
        }
    }
    out
}

/// One training example: a video with its positive query.
pub type Pair<'a> = (&'a VideoFeatures, &'a QueryTokens);

fn check_batch(batch: &[Pair], loss_cfg: &LossConfig) -> Result<()> {
    let ids: HashSet<&str> = batch.iter().map(|(v, _)| v.video_id.as_str()).collect();
    if ids.len() != batch.len() {
        return Err(Error::Contract("batch videos must be pairwise distinct".into()));
    }
    if batch.len() < 2 {
        return Err(Error::Contract(format!("batch needs at least 2 videos, got {}", batch.len())));
    }
    if loss_cfg.top_k_negatives == 0 || loss_cfg.top_k_negatives >= batch.len() {
        return Err(Error::Contract(format!(
            "top_k_negatives ({}) must be in 1..{}",
            loss_cfg.top_k_negatives,
            batch.len()
        )));
    }
    Ok(())
}

/// Summary of a batch objective evaluation.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub hinges: Vec<Hinge>,
    /// Hinge terms with a strictly positive value.
    pub active: usize,
    pub sims: Vec<Vec<f64>>,
    pub grads: BTreeMap<String, Vec<f64>>,
}

fn hinge_totals(sims: &[Vec<f64>], hinges: &[Hinge], margin: f64) -> (f64, usize) {
    let mut loss = 0.0;
    let mut active = 0;
    for h in hinges {
        let (pv, pq) = h.positive_pair();
        let (nv, nq) = h.negative_pair();
        let t = triplet_loss(sims[pv][pq], sims[nv][nq], margin);
        if t > 0.0 {
            active += 1;
        }
        loss += t;
    }
    (loss, active)
}

/// The batch objective as a single recorded graph: every video and query is
/// encoded once, all pairs are scored, hinge terms are summed and differentiated.
pub fn batch_loss(
    params: &ParamStore,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    batch: &[Pair],
) -> Result<BatchLoss> {
    batch_loss_on(Tape::new(), params, cfg, loss_cfg, batch)
}

/// [`batch_loss`] on a caller-provided tape (used to inject backward faults).
pub fn batch_loss_on(
    mut tape: Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    batch: &[Pair],
) -> Result<BatchLoss> {
    check_batch(batch, loss_cfg)?;
    let vars = params.to_tape(&mut tape);
    let videos: Vec<Var> = batch
        .iter()
        .map(|(v, _)| encode_frames(&mut tape, &vars, cfg, v))
        .collect::<Result<_>>()?;
    let queries: Vec<Var> = batch
        .iter()
        .map(|(_, q)| encode_words(&mut tape, &vars, cfg, q))
        .collect::<Result<_>>()?;
    let b = batch.len();
    let mut pair_vars = vec![Vec::with_capacity(b); b];
    for (vi, row) in pair_vars.iter_mut().enumerate() {
        for &w in &queries {
            let fwd = forward_encoded(&mut tape, &vars, cfg, videos[vi], w)?;
            let n = batch[vi].0.frames();
            row.push(lse_over_span(&mut tape, fwd.frame_sims, SegmentSpan::frames(0, n), cfg.lambda)?);
        }
    }
    let sims: Vec<Vec<f64>> =
        pair_vars.iter().map(|row| row.iter().map(|&s| tape.value(s).item()).collect()).collect();
    let hinges = mine_hard_negatives(&sims, loss_cfg.top_k_negatives);
    let mut terms = Vec::with_capacity(hinges.len());
    for h in &hinges {
        let (pv, pq) = h.positive_pair();
        let (nv, nq) = h.negative_pair();
        let diff = tape.sub(pair_vars[nv][nq], pair_vars[pv][pq])?;
        let shifted = tape.add_scalar(diff, loss_cfg.margin);
        terms.push(tape.relu(shifted));
    }
    let stacked = tape.stack_rows(&terms)?;
    let total = tape.sum(stacked);
    let loss = tape.value(total).item();
    if !loss.is_finite() {
        return Err(nan_error(batch, loss));
    }
    tape.backward(total)?;
    let grads = collect_grads(&tape, &vars, params);
    let (_, active) = hinge_totals(&sims, &hinges, loss_cfg.margin);
    Ok(BatchLoss { loss, hinges, active, sims, grads })
}

fn collect_grads(tape: &Tape, vars: &BTreeMap<String, Var>, params: &ParamStore) -> BTreeMap<String, Vec<f64>> {
    params
        .iter()
        .map(|(name, t)| {
            let g = tape.grad(vars[name]).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
            (name.to_owned(), g)
        })
        .collect()
}

fn nan_error(batch: &[Pair], value: f64) -> Error {
    let ids: Vec<String> = batch.iter().map(|(v, q)| format!("{}/{}", v.video_id, q.query_id)).collect();
    Error::Numeric(format!("loss is {value}; batch pairs: {}", ids.join(", ")))
}

// Scores video `vi` against the queries in `cols`; returns the tape, parameter
// handles and one similarity node per requested query.
fn score_row(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[Pair],
    vi: usize,
    cols: &[usize],
) -> Result<(Tape, BTreeMap<String, Var>, Vec<Var>)> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let video = batch[vi].0;
    let v0 = encode_frames(&mut tape, &vars, cfg, video)?;
    let mut out = Vec::with_capacity(cols.len());
    for &qi in cols {
        let w = encode_words(&mut tape, &vars, cfg, batch[qi].1)?;
        let fwd = forward_encoded(&mut tape, &vars, cfg, v0, w)?;
        out.push(lse_over_span(&mut tape, fwd.frame_sims, SegmentSpan::frames(0, video.frames()), cfg.lambda)?);
    }
    Ok((tape, vars, out))
}

/// Whole-video similarity for every (video, query) combination in the batch.
pub fn similarity_matrix(params: &ParamStore, cfg: &ModelConfig, batch: &[Pair], exec: Exec) -> Result<Vec<Vec<f64>>> {
    let cols: Vec<usize> = (0..batch.len()).collect();
    exec.map_range(batch.len(), |vi| {
        let (tape, _, sims) = score_row(params, cfg, batch, vi, &cols)?;
        Ok(sims.iter().map(|&s| tape.value(s).item()).collect())
    })
    .into_iter()
    .collect()
}

/// Same objective and gradient as [`batch_loss`], computed per video row so rows can run in parallel.
///
/// The loss gradient is `Σ c[v][q] ∇sim(v, q)`, where `c` counts how often a pair
/// appears as the negative of an active hinge minus how often it appears as the positive.
/// Row gradients are summed in row order, so the result does not depend on scheduling.
pub fn batch_gradient(
    params: &ParamStore,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    batch: &[Pair],
    exec: Exec,
) -> Result<BatchLoss> {
    check_batch(batch, loss_cfg)?;
    let b = batch.len();
    let cols: Vec<usize> = (0..b).collect();
    let rows: Vec<(Tape, BTreeMap<String, Var>, Vec<Var>)> = exec
        .map_range(b, |vi| score_row(params, cfg, batch, vi, &cols))
        .into_iter()
        .collect::<Result<_>>()?;
    let sims: Vec<Vec<f64>> = rows
        .iter()
        .map(|(tape, _, nodes)| nodes.iter().map(|&s| tape.value(s).item()).collect())
        .collect();
    let hinges = mine_hard_negatives(&sims, loss_cfg.top_k_negatives);
    let (loss, active) = hinge_totals(&sims, &hinges, loss_cfg.margin);
    if !loss.is_finite() {
        return Err(nan_error(batch, loss));
    }
    let mut coeff = vec![vec![0.0f64; b]; b];
    for h in &hinges {
        let (pv, pq) = h.positive_pair();
        let (nv, nq) = h.negative_pair();
        if triplet_loss(sims[pv][pq], sims[nv][nq], loss_cfg.margin) > 0.0 {
            coeff[nv][nq] += 1.0;
            coeff[pv][pq] -= 1.0;
        }
    }
    let work: Vec<_> = rows.into_iter().zip(&coeff).collect();
    let row_grads: Vec<Option<BTreeMap<String, Vec<f64>>>> = exec
        .map_owned(work, |((mut tape, vars, nodes), c)| {
            let mut acc: Option<Var> = None;
            for (q, &node) in nodes.iter().enumerate() {
                if c[q] == 0.0 {
                    continue;
                }
                let term = tape.scale(node, c[q]);
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            match acc {
                None => Ok(None),
                Some(total) => {
                    tape.backward(total)?;
                    Ok(Some(collect_grads(&tape, &vars, params)))
                }
            }
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut grads: BTreeMap<String, Vec<f64>> =
        params.iter().map(|(n, t)| (n.to_owned(), vec![0.0; t.numel()])).collect();
    for row in row_grads.into_iter().flatten() {
        for (name, g) in row {
            let dst = grads.get_mut(&name).expect("known parameter");
            dst.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
        }
    }
    Ok(BatchLoss { loss, hinges, active, sims, grads })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub active_hinges: usize,
}

/// One Adam update on every trainable tensor using the batch gradient.
pub fn train_step(
    params: &mut ParamStore,
    optimizer: &mut Adam,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    batch: &[Pair],
    exec: Exec,
) -> Result<StepOutcome> {
    let out = batch_gradient(params, cfg, loss_cfg, batch, exec)?;
    if out.grads.values().flatten().any(|g| !g.is_finite()) {
        return Err(nan_error(batch, f64::NAN));
    }
    optimizer.step(params, &out.grads);
    Ok(StepOutcome { loss: out.loss, active_hinges: out.active })
}
