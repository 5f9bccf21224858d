//! Full model assembly: parameters, the pair forward pass, and pooled similarity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_frames, encode_words, QueryTokens, VideoFeatures};
use crate::error::{Error, Result};
use crate::fbw::{fbw, FbwVars};
use crate::loss::SegmentSpan;
use crate::tensor::{Init, ParamStore, Tape, Tensor, Var};
use crate::wcvg::{run_wcvg, StepVars, WcvgVars};

/// What gets appended to the visual FC output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    /// Sinusoidal positional encoding of width `pe_dim`.
    #[default]
    Pe,
    /// Two temporal endpoint features.
    Tef,
    /// Nothing.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub vocab: usize,
    pub word_embed: usize,
    /// Word representation width; frames must end up this wide too.
    pub hidden: usize,
    pub pe_dim: usize,
    pub feature_dim: usize,
    /// Visual FC output width. Defaults to `hidden` minus the position block width.
    pub visual_out: Option<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { vocab: 10_000, word_embed: 300, hidden: 512, pe_dim: 64, feature_dim: 4096, visual_out: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub pe_mode: PeMode,
    /// The constant `M` of the positional encoding.
    pub pe_base: f64,
    /// Message-passing iterations; zero gives the frame-by-word-only model.
    pub iterations: usize,
    /// LSE pooling sharpness.
    pub lambda: f64,
    /// Share the update projection across iterations.
    pub tied_iterations: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: ModelDims::default(),
            pe_mode: PeMode::Pe,
            pe_base: 10_000.0,
            iterations: 3,
            lambda: 6.0,
            tied_iterations: true,
        }
    }
}

impl ModelConfig {
    pub fn position_width(&self) -> usize {
        match self.pe_mode {
            PeMode::Pe => self.dims.pe_dim,
            PeMode::Tef => 2,
            PeMode::None => 0,
        }
    }

    pub fn visual_out(&self) -> usize {
        self.dims.visual_out.unwrap_or_else(|| {
            let block = match self.pe_mode {
                PeMode::Tef => 2,
                // Without a position block the FC keeps its usual width, so the
                // frame rows come out narrower than the words unless overridden.
                PeMode::Pe | PeMode::None => self.dims.pe_dim,
            };
            self.dims.hidden.saturating_sub(block)
        })
    }

    /// Width of encoded frame rows.
    pub fn frame_width(&self) -> usize {
        self.visual_out() + self.position_width()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.vocab == 0 || d.word_embed == 0 || d.hidden == 0 || d.feature_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.pe_mode == PeMode::Pe && (d.pe_dim == 0 || !d.pe_dim.is_multiple_of(2)) {
            return Err(Error::Config(format!("pe_dim must be a positive even number, got {}", d.pe_dim)));
        }
        if self.visual_out() == 0 {
            return Err(Error::Config("visual FC output width is zero".into()));
        }
        if !(self.lambda > 0.0) || !(self.pe_base > 0.0) {
            return Err(Error::Config("lambda and pe_base must be positive".into()));
        }
        Ok(())
    }

    fn update_weight_names(&self) -> Vec<(String, String)> {
        if self.tied_iterations || self.iterations <= 1 {
            vec![("wcvg.w2".into(), "wcvg.b2".into())]
        } else {
            (0..self.iterations).map(|t| (format!("wcvg.w2.{t}"), format!("wcvg.b2.{t}"))).collect()
        }
    }
}

/// Seeded initialization of every trainable tensor.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let d = &cfg.dims;
    let (e, h) = (d.word_embed, d.hidden);
    let mut init = Init::new(seed);
    let mut p = ParamStore::new(seed);
    let mut add = |name: &str, shape: Vec<usize>, fan_in: usize, init: &mut Init| {
        p.insert(name, init.uniform(shape, fan_in)).expect("unique names");
    };
    // A lookup is a one-hot product, so the table's fan-in is one.
    add("embedding", vec![d.vocab, e], 1, &mut init);
    for g in ["z", "r", "h"] {
        add(&format!("gru.w_{g}"), vec![e, h], e, &mut init);
        add(&format!("gru.u_{g}"), vec![h, h], h, &mut init);
        add(&format!("gru.b_{g}"), vec![1, h], h, &mut init);
    }
    let vo = cfg.visual_out();
    add("visual_fc.weight", vec![d.feature_dim, vo], d.feature_dim, &mut init);
    add("visual_fc.bias", vec![1, vo], d.feature_dim, &mut init);
    add("wcvg.w1", vec![2 * h, h], 2 * h, &mut init);
    add("wcvg.b1", vec![1, h], 2 * h, &mut init);
    for (w, b) in cfg.update_weight_names() {
        add(&w, vec![2 * h, h], 2 * h, &mut init);
        add(&b, vec![1, h], 2 * h, &mut init);
    }
    p
}

/// Checks that a loaded store has exactly the tensors `cfg` expects.
pub fn check_params(cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    let want = init_params(cfg, 0);
    for (name, t) in want.iter() {
        match params.get(name) {
            Some(got) if got.shape() == t.shape() => {}
            Some(got) => {
                return Err(Error::Data(format!(
                    "parameter {name}: checkpoint shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Data(format!("checkpoint is missing parameter {name}"))),
        }
    }
    if params.len() != want.len() {
        return Err(Error::Data("checkpoint has parameters the config does not use".into()));
    }
    Ok(())
}

/// Every intermediate of one video-query forward pass.
#[derive(Clone, Debug)]
pub struct PairForward {
    pub v0: Var,
    pub w: Var,
    pub fbw: FbwVars,
    pub steps: Vec<StepVars>,
    pub v_final: Var,
    /// `N x 1`: cosine between each refined frame and its frame-specific sentence representation.
    pub frame_sims: Var,
}

fn wcvg_vars(cfg: &ModelConfig, vars: &BTreeMap<String, Var>) -> WcvgVars {
    WcvgVars {
        w1: vars["wcvg.w1"],
        b1: vars["wcvg.b1"],
        w2: cfg.update_weight_names().iter().map(|(w, b)| (vars[w], vars[b])).collect(),
    }
}

/// Encoders, frame-by-word attention, graph refinement and per-frame relevance.
pub fn forward_pair(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    video: &VideoFeatures,
    query: &QueryTokens,
) -> Result<PairForward> {
    let v0 = encode_frames(tape, vars, cfg, video)?;
    let w = encode_words(tape, vars, cfg, query)?;
    forward_encoded(tape, vars, cfg, v0, w)
}

/// [`forward_pair`] starting from already-encoded frames `v0` and words `w`.
pub fn forward_encoded(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    v0: Var,
    w: Var,
) -> Result<PairForward> {
    let fbw = fbw(tape, v0, w)?;
    let (v_final, steps) = run_wcvg(tape, v0, w, fbw.f, &wcvg_vars(cfg, vars), cfg.iterations)?;
    let frame_sims = tape.row_cosine(v_final, fbw.l)?;
    Ok(PairForward { v0, w, fbw, steps, v_final, frame_sims })
}

/// LSE-pooled relevance of `span` given per-frame cosines on the tape.
pub fn lse_over_span(tape: &mut Tape, frame_sims: Var, span: SegmentSpan, lambda: f64) -> Result<Var> {
    let rows = tape.rows(frame_sims, span.start_idx, span.end_idx)?;
    tape.log_sum_exp(rows, lambda)
}

/// Whole-video similarity of a pair, recorded on the tape.
pub fn pair_similarity(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    video: &VideoFeatures,
    query: &QueryTokens,
) -> Result<Var> {
    let fwd = forward_pair(tape, vars, cfg, video, query)?;
    let n = video.frames();
    lse_over_span(tape, fwd.frame_sims, SegmentSpan::frames(0, n), cfg.lambda)
}

/// Per-frame relevance values for a pair, evaluated on a scratch tape.
pub fn frame_relevance(
    params: &ParamStore,
    cfg: &ModelConfig,
    video: &VideoFeatures,
    query: &QueryTokens,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let fwd = forward_pair(&mut tape, &vars, cfg, video, query)?;
    Ok(tape.value(fwd.frame_sims).data().to_vec())
}

/// Whole-video similarity value (no gradient).
pub fn video_query_similarity(
    params: &ParamStore,
    cfg: &ModelConfig,
    video: &VideoFeatures,
    query: &QueryTokens,
) -> Result<f64> {
    let r = frame_relevance(params, cfg, video, query)?;
    crate::loss::lse_pool(&r, cfg.lambda)
}

/// Raw attention values of one pair, for external visualization.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionDump {
    pub video_id: String,
    pub query_id: String,
    pub fbw: BTreeMap<String, Matrix>,
    /// Keys `iter_0` .. `iter_{T-1}`, each holding `s` and `a`.
    pub wcvg: BTreeMap<String, BTreeMap<String, Matrix>>,
    pub frame_relevance: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Matrix {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for Matrix {
    fn from(t: &Tensor) -> Self {
        Matrix { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
}

pub fn attention_dump(
    params: &ParamStore,
    cfg: &ModelConfig,
    video: &VideoFeatures,
    query: &QueryTokens,
) -> Result<AttentionDump> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let fwd = forward_pair(&mut tape, &vars, cfg, video, query)?;
    let fbw = BTreeMap::from([
        ("s".to_string(), tape.value(fwd.fbw.s).into()),
        ("a_word".to_string(), tape.value(fwd.fbw.a_word).into()),
        ("a_frame".to_string(), tape.value(fwd.fbw.a_frame).into()),
    ]);
    let wcvg = fwd
        .steps
        .iter()
        .enumerate()
        .map(|(t, st)| {
            let block = BTreeMap::from([
                ("s".to_string(), tape.value(st.s).into()),
                ("a".to_string(), tape.value(st.a).into()),
            ]);
            (format!("iter_{t}"), block)
        })
        .collect();
    Ok(AttentionDump {
        video_id: video.video_id.clone(),
        query_id: query.query_id.clone(),
        fbw,
        wcvg,
        frame_relevance: tape.value(fwd.frame_sims).data().to_vec(),
    })
}
