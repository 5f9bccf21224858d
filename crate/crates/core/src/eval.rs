//! Candidate segments, ranking, and the Recall@N / mIoU protocol.

use serde::{Deserialize, Serialize};

use crate::encoders::{QueryTokens, VideoFeatures};
use crate::error::{Error, Result};
use crate::loss::{lse_pool, SegmentSpan};
use crate::model::{frame_relevance, ModelConfig};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeKind {
    /// Every contiguous run of equal-length units.
    UnitSpans { unit_count: usize },
    /// Back-to-back windows of each size, in frames.
    FixedWindows { window_sizes: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalScheme {
    #[serde(flatten)]
    pub kind: SchemeKind,
    /// Seconds per unit (unit spans) or per frame (fixed windows).
    pub seconds_per_unit: f64,
}

impl ProposalScheme {
    pub fn unit_spans(unit_count: usize, seconds_per_unit: f64) -> Self {
        ProposalScheme { kind: SchemeKind::UnitSpans { unit_count }, seconds_per_unit }
    }

    pub fn fixed_windows(window_sizes: Vec<usize>, seconds_per_frame: f64) -> Self {
        ProposalScheme { kind: SchemeKind::FixedWindows { window_sizes }, seconds_per_unit: seconds_per_frame }
    }

    /// Seconds covered by one frame of an `n_frames` video.
    pub fn seconds_per_frame(&self, n_frames: usize) -> f64 {
        match &self.kind {
            SchemeKind::UnitSpans { unit_count } => self.seconds_per_unit * *unit_count as f64 / n_frames as f64,
            SchemeKind::FixedWindows { .. } => self.seconds_per_unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match &self.kind {
            SchemeKind::UnitSpans { unit_count } => *unit_count > 0,
            SchemeKind::FixedWindows { window_sizes } => !window_sizes.is_empty() && !window_sizes.contains(&0),
        };
        if !ok || !(self.seconds_per_unit > 0.0) {
            return Err(Error::Config(format!("invalid proposal scheme {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposals {
    pub spans: Vec<SegmentSpan>,
    /// Set when the video was shorter than every window and a single clipped window was used.
    pub clipped: bool,
}

/// Candidate segments of an `n_frames` video, in a fixed order.
///
/// Unit spans are listed by start unit, then by length. Windows are listed by
/// size in the order given, then by start; the last window of each size is clipped.
pub fn enumerate_proposals(scheme: &ProposalScheme, n_frames: usize) -> Result<Proposals> {
    if n_frames == 0 {
        return Err(Error::Contract("video has no frames".into()));
    }
    match &scheme.kind {
        SchemeKind::UnitSpans { unit_count } => {
            let u = *unit_count;
            if u == 0 || n_frames < u {
                return Err(Error::Contract(format!("{n_frames} frames cannot form {u} units")));
            }
            let bound = |k: usize| k * n_frames / u;
            let mut spans = Vec::with_capacity(u * (u + 1) / 2);
            for s in 0..u {
                for e in s + 1..=u {
                    spans.push(SegmentSpan {
                        start_idx: bound(s),
                        end_idx: bound(e),
                        start_sec: s as f64 * scheme.seconds_per_unit,
                        end_sec: e as f64 * scheme.seconds_per_unit,
                    });
                }
            }
            Ok(Proposals { spans, clipped: false })
        }
        SchemeKind::FixedWindows { window_sizes } => {
            let spf = scheme.seconds_per_unit;
            if window_sizes.iter().all(|&w| w > n_frames) {
                return Ok(Proposals { spans: vec![SegmentSpan::new(0, n_frames, spf)], clipped: true });
            }
            let mut spans = Vec::new();
            for &w in window_sizes {
                let mut start = 0;
                while start < n_frames {
                    spans.push(SegmentSpan::new(start, (start + w).min(n_frames), spf));
                    start += w;
                }
            }
            Ok(Proposals { spans, clipped: false })
        }
    }
}

/// Intersection over union of two spans, measured in seconds.
pub fn temporal_iou(a: &SegmentSpan, b: &SegmentSpan) -> f64 {
    let inter = (a.end_sec.min(b.end_sec) - a.start_sec.max(b.start_sec)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// How a proposal's frame relevances are pooled into a ranking score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanScore {
    /// Plain LSE pooling. A span never scores below any span it contains.
    Lse,
    /// LSE pooling minus `ln(K)/λ`, i.e. `(1/λ) ln mean exp(λ r)`; comparable across span lengths.
    #[default]
    LengthNormalized,
}

impl SpanScore {
    pub fn score(self, r: &[f64], lambda: f64) -> Result<f64> {
        let s = lse_pool(r, lambda)?;
        Ok(match self {
            SpanScore::Lse => s,
            SpanScore::LengthNormalized => s - (r.len() as f64).ln() / lambda,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredSegment {
    pub span: SegmentSpan,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Sorts by score, best first; ties go to the earlier start, then the shorter span.
pub fn sort_scored(mut items: Vec<(SegmentSpan, f64)>) -> Vec<ScoredSegment> {
    items.sort_by(|(a, sa), (b, sb)| {
        sb.total_cmp(sa).then(a.start_idx.cmp(&b.start_idx)).then(a.len().cmp(&b.len()))
    });
    items
        .into_iter()
        .enumerate()
        .map(|(i, (span, score))| ScoredSegment { span, score, rank: i + 1 })
        .collect()
}

/// Ranks proposals given per-frame relevance values.
pub fn rank_spans(relevance: &[f64], spans: &[SegmentSpan], lambda: f64, score: SpanScore) -> Result<Vec<ScoredSegment>> {
    let scored = spans
        .iter()
        .map(|s| {
            if s.end_idx > relevance.len() || s.is_empty() {
                return Err(Error::Contract(format!("span {}..{} outside video", s.start_idx, s.end_idx)));
            }
            Ok((*s, score.score(&relevance[s.start_idx..s.end_idx], lambda)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_scored(scored))
}

/// Runs the model on one pair and ranks the scheme's proposals.
pub fn rank_segments(
    params: &ParamStore,
    cfg: &ModelConfig,
    video: &VideoFeatures,
    query: &QueryTokens,
    scheme: &ProposalScheme,
    score: SpanScore,
) -> Result<Vec<ScoredSegment>> {
    let r = frame_relevance(params, cfg, video, query)?;
    let proposals = enumerate_proposals(scheme, video.frames())?;
    rank_spans(&r, &proposals.spans, cfg.lambda, score)
}

/// A query's ranked proposals together with its ground truth.
#[derive(Clone, Debug)]
pub struct QueryRanking {
    pub query_id: String,
    pub gt: SegmentSpan,
    pub ranked: Vec<ScoredSegment>,
}

/// Ground-truth span of a query, or a data error naming it.
pub fn gt_segment(query: &QueryTokens) -> Result<SegmentSpan> {
    let (s, e) = query
        .gt_span
        .ok_or_else(|| Error::Data(format!("query {} has no ground-truth span", query.query_id)))?;
    Ok(SegmentSpan { start_idx: 0, end_idx: 0, start_sec: s, end_sec: e })
}

/// The best ranking possible: proposals ordered by true IoU.
pub fn oracle_ranking(spans: &[SegmentSpan], gt: &SegmentSpan) -> Vec<ScoredSegment> {
    sort_scored(spans.iter().map(|s| (*s, temporal_iou(s, gt))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub n: usize,
    pub theta: f64,
    pub recall: f64,
    pub upper_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCell {
    pub theta: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub query_count: usize,
    pub grid: Vec<GridCell>,
    pub miou: f64,
    /// Expected R@1 at each θ for a uniformly random top proposal.
    pub random_r1: Vec<BaselineCell>,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub checkpoint_hash: String,
}

impl EvalReport {
    pub fn cell(&self, n: usize, theta: f64) -> Option<&GridCell> {
        self.grid.iter().find(|c| c.n == n && (c.theta - theta).abs() < 1e-12)
    }

    pub fn recall(&self, n: usize, theta: f64) -> Option<f64> {
        self.cell(n, theta).map(|c| c.recall)
    }

    pub fn random_recall(&self, theta: f64) -> Option<f64> {
        self.random_r1.iter().find(|c| (c.theta - theta).abs() < 1e-12).map(|c| c.recall)
    }

    /// Table layout: one row per metric kind, one column per (θ, N).
    pub fn render_table(&self) -> String {
        let mut thetas: Vec<f64> = self.grid.iter().map(|c| c.theta).collect();
        thetas.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        thetas.sort_by(f64::total_cmp);
        thetas.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let mut ns: Vec<usize> = self.grid.iter().map(|c| c.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let mut out = String::new();
        out.push_str(&format!("{:<12}", ""));
        for t in &thetas {
            for n in &ns {
                out.push_str(&format!("{:>9}", format!("R@{n}/{t}")));
            }
        }
        out.push('\n');
        for (label, pick) in [("model", 0), ("upper bound", 1)] {
            out.push_str(&format!("{label:<12}"));
            for &t in &thetas {
                for &n in &ns {
                    let c = self.cell(n, t).expect("full grid");
                    let v = if pick == 0 { c.recall } else { c.upper_bound };
                    out.push_str(&format!("{:>9.2}", 100.0 * v));
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("mIoU {:.2}   queries {}\n", 100.0 * self.miou, self.query_count));
        for c in &self.random_r1 {
            out.push_str(&format!("random R@1/{} {:.2}\n", c.theta, 100.0 * c.recall));
        }
        out
    }
}

fn hit(ranked: &[ScoredSegment], gt: &SegmentSpan, n: usize, theta: f64) -> bool {
    ranked.iter().take(n).any(|s| temporal_iou(&s.span, gt) >= theta)
}

/// Recall@N at IoU θ for every (N, θ), mean IoU of the top proposal, and the oracle upper bound.
pub fn compute_report(rankings: &[QueryRanking], ns: &[usize], thetas: &[f64]) -> EvalReport {
    let q = rankings.len();
    let mut grid = Vec::with_capacity(ns.len() * thetas.len());
    let oracles: Vec<Vec<ScoredSegment>> = rankings
        .iter()
        .map(|r| oracle_ranking(&r.ranked.iter().map(|s| s.span).collect::<Vec<_>>(), &r.gt))
        .collect();
    for &theta in thetas {
        for &n in ns {
            let hits = rankings.iter().filter(|r| hit(&r.ranked, &r.gt, n, theta)).count();
            let ub = rankings.iter().zip(&oracles).filter(|(r, o)| hit(o, &r.gt, n, theta)).count();
            grid.push(GridCell {
                n,
                theta,
                recall: ratio(hits, q),
                upper_bound: ratio(ub, q),
            });
        }
    }
    let miou_sum: f64 = rankings
        .iter()
        .map(|r| r.ranked.first().map_or(0.0, |s| temporal_iou(&s.span, &r.gt)))
        .sum();
    EvalReport {
        query_count: q,
        grid,
        miou: if q == 0 { 0.0 } else { miou_sum / q as f64 },
        random_r1: thetas.iter().map(|&theta| BaselineCell { theta, recall: random_baseline(rankings, theta) }).collect(),
        config_hash: String::new(),
        checkpoint_hash: String::new(),
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Expected R@1 at θ when the top proposal is drawn uniformly at random.
pub fn random_baseline(rankings: &[QueryRanking], theta: f64) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let total: f64 = rankings
        .iter()
        .map(|r| {
            let good = r.ranked.iter().filter(|s| temporal_iou(&s.span, &r.gt) >= theta).count();
            good as f64 / r.ranked.len() as f64
        })
        .sum();
    total / rankings.len() as f64
}

pub const DEFAULT_NS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_THETAS: [f64; 3] = [0.3, 0.5, 0.7];
