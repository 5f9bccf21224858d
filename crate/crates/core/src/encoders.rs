//! Word encoder (embedding + GRU) and frame encoder (FC + ReLU + position block).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PeMode};
use crate::tensor::{Tape, Tensor, Var};

/// One natural-language query: token ids plus its source video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryTokens {
    pub query_id: String,
    pub video_id: String,
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    /// Ground-truth `(start_sec, end_sec)`; only needed for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_span: Option<(f64, f64)>,
}

impl QueryTokens {
    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > max_len {
            return Err(Error::Data(format!(
                "query {}: length {} outside 1..={max_len}",
                self.query_id,
                self.tokens.len()
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Data(format!(
                "query {}: token {t} outside vocabulary of {vocab}",
                self.query_id
            )));
        }
        if let Some((s, e)) = self.gt_span {
            if !(0.0 <= s && s < e) {
                return Err(Error::Data(format!("query {}: bad gt span ({s}, {e})", self.query_id)));
            }
        }
        Ok(())
    }
}

/// Per-frame feature matrix of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    /// `N x D_v`.
    pub features: Tensor,
    pub frame_positions: Vec<usize>,
    /// Duration of one frame chunk in seconds.
    pub seconds_per_unit: f64,
}

impl VideoFeatures {
    pub fn new(video_id: impl Into<String>, features: Tensor, seconds_per_unit: f64) -> Result<Self> {
        let video_id = video_id.into();
        let (n, _) = features.dims2()?;
        if let Some(i) = features.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "video {video_id}: non-finite feature in row {}",
                i / features.cols()
            )));
        }
        if !(seconds_per_unit > 0.0) {
            return Err(Error::Data(format!("video {video_id}: seconds_per_unit must be positive")));
        }
        Ok(VideoFeatures { video_id, features, frame_positions: (0..n).collect(), seconds_per_unit })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Sinusoidal position code: even `i` gives `sin(pos / M^(i/d))`, odd `i` gives `cos(pos / M^(i/d))`.
pub fn positional_encoding(pos: usize, d: usize, base: f64) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let angle = pos as f64 / base.powf(i as f64 / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Frame `i` of `n` as `(i/n, (i+1)/n)`.
pub fn temporal_endpoint_features(i: usize, n: usize) -> [f64; 2] {
    [i as f64 / n as f64, (i + 1) as f64 / n as f64]
}

/// Non-trainable position block appended to the visual FC output, `N x width`.
pub fn position_block(cfg: &ModelConfig, positions: &[usize]) -> Option<Tensor> {
    let n = positions.len();
    let rows: Vec<Vec<f64>> = match cfg.pe_mode {
        PeMode::None => return None,
        PeMode::Pe => positions
            .iter()
            .map(|&p| positional_encoding(p, cfg.dims.pe_dim, cfg.pe_base))
            .collect(),
        PeMode::Tef => (0..n).map(|i| temporal_endpoint_features(i, n).to_vec()).collect(),
    };
    Some(Tensor::from_rows(&rows).expect("rectangular"))
}

/// GRU over the embedded tokens; row `j` of the result is the hidden state after token `j`.
pub fn encode_words(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    query: &QueryTokens,
) -> Result<Var> {
    let h0 = tape.constant(Tensor::zeros(vec![1, cfg.dims.hidden]));
    encode_words_from(tape, vars, query, h0)
}

/// [`encode_words`] with an explicit initial hidden state `[1, H]`.
pub fn encode_words_from(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    query: &QueryTokens,
    h0: Var,
) -> Result<Var> {
    let vocab = tape.shape(vars["embedding"])[0];
    if query.tokens.is_empty() {
        return Err(Error::Data(format!("query {}: no tokens", query.query_id)));
    }
    if let Some(&t) = query.tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!(
            "query {}: token {t} outside vocabulary of {vocab}",
            query.query_id
        )));
    }
    let x = tape.gather(vars["embedding"], &query.tokens)?;
    let xz = tape.matmul(x, vars["gru.w_z"])?;
    let xr = tape.matmul(x, vars["gru.w_r"])?;
    let xh = tape.matmul(x, vars["gru.w_h"])?;
    let mut h = h0;
    let mut states = Vec::with_capacity(query.tokens.len());
    for t in 0..query.tokens.len() {
        let z = gate(tape, xz, t, h, vars["gru.u_z"], vars["gru.b_z"])?;
        let z = tape.sigmoid(z);
        let r = gate(tape, xr, t, h, vars["gru.u_r"], vars["gru.b_r"])?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let cand = gate(tape, xh, t, rh, vars["gru.u_h"], vars["gru.b_h"])?;
        let cand = tape.tanh(cand);
        let neg_z = tape.scale(z, -1.0);
        let keep = tape.add_scalar(neg_z, 1.0);
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, cand)?;
        h = tape.add(kept, fresh)?;
        states.push(h);
    }
    tape.stack_rows(&states)
}

// x_t W + h U + b for one time step, with x W precomputed for every step.
fn gate(tape: &mut Tape, xw: Var, t: usize, h: Var, u: Var, b: Var) -> Result<Var> {
    let xt = tape.rows(xw, t, t + 1)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xt, hu)?;
    tape.add(s, b)
}

/// `concat(ReLU(features W + b), position block)` per frame. The position block is a constant.
pub fn encode_frames(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    video: &VideoFeatures,
) -> Result<Var> {
    let width = video.features.cols();
    if width != cfg.dims.feature_dim {
        return Err(Error::Data(format!(
            "video {}: feature width {width}, model expects {}",
            video.video_id, cfg.dims.feature_dim
        )));
    }
    let x = tape.constant(video.features.clone());
    let fc = tape.matmul(x, vars["visual_fc.weight"])?;
    let fc = tape.add(fc, vars["visual_fc.bias"])?;
    let act = tape.relu(fc);
    match position_block(cfg, &video.frame_positions) {
        None => Ok(act),
        Some(block) => {
            let pe = tape.constant(block);
            tape.concat_last(act, pe)
        }
    }
}

/// Token vocabulary; line number in the file is the token id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::new(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace tokenization; unknown words are a data error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Data(format!("unknown token {w:?}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelDims};
    use crate::tensor::{finite_diff_check, ParamStore};

    fn small_cfg(pe_mode: PeMode) -> ModelConfig {
        ModelConfig {
            dims: ModelDims { vocab: 7, word_embed: 5, hidden: 8, pe_dim: 4, feature_dim: 6, visual_out: None },
            pe_mode,
            ..ModelConfig::default()
        }
    }

    fn query(tokens: &[usize]) -> QueryTokens {
        QueryTokens {
            query_id: "q".into(),
            video_id: "v".into(),
            tokens: tokens.to_vec(),
            raw_text: None,
            gt_span: None,
        }
    }

    fn zero_gru(p: &mut ParamStore) {
        for (name, t) in p.iter_mut() {
            if name.starts_with("gru.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn pe_at_origin_alternates() {
        let pe = positional_encoding(0, 8, 10_000.0);
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pe_first_entry_is_sin_pos() {
        for d in [2, 8, 64] {
            assert!((positional_encoding(1, d, 10_000.0)[0] - 0.84147098).abs() < 1e-8);
        }
    }

    #[test]
    fn pe_matches_independent_transcription() {
        // Separate transcription: angle rate as exp(-ln(M) * i / d).
        let got = positional_encoding(7, 64, 10_000.0);
        for (i, &v) in got.iter().enumerate() {
            let rate = (-(10_000f64).ln() * i as f64 / 64.0).exp();
            let want = if i & 1 == 1 { (7.0 * rate).cos() } else { (7.0 * rate).sin() };
            assert!((v - want).abs() < 1e-12, "i={i}: {v} vs {want}");
        }
    }

    #[test]
    fn pe_bounded_and_distinct() {
        let rows: Vec<Vec<f64>> = (0..10_000).map(|p| positional_encoding(p, 64, 10_000.0)).collect();
        assert!(rows.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        let mut keys: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 10_000);
    }

    #[test]
    fn tef_examples() {
        let [a, b] = temporal_endpoint_features(0, 6);
        assert_eq!(a, 0.0);
        assert!((b - 0.16667).abs() < 1e-5);
        let [a, b] = temporal_endpoint_features(5, 6);
        assert!((a - 0.83333).abs() < 1e-5);
        assert_eq!(b, 1.0);
        assert_eq!(temporal_endpoint_features(0, 1), [0.0, 1.0]);
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let cfg = small_cfg(PeMode::Pe);
        let mut p = init_params(&cfg, 1);
        zero_gru(&mut p);
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let w = encode_words(&mut tape, &vars, &cfg, &query(&[3])).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gru_halves_initial_state() {
        let cfg = small_cfg(PeMode::Pe);
        let mut p = init_params(&cfg, 1);
        zero_gru(&mut p);
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let c: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let h0 = tape.constant(Tensor::new(vec![1, 8], c.clone()).unwrap());
        let w = encode_words_from(&mut tape, &vars, &query(&[2]), h0).unwrap();
        let want: Vec<f64> = c.iter().map(|v| 0.5 * v).collect();
        assert_eq!(tape.value(w).data(), &want[..]);
    }

    #[test]
    fn out_of_vocab_names_query() {
        let cfg = small_cfg(PeMode::Pe);
        let p = init_params(&cfg, 1);
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let mut q = query(&[1, 9]);
        q.query_id = "query-42".into();
        let err = encode_words(&mut tape, &vars, &cfg, &q).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("query-42")), "{err}");
    }

    #[test]
    fn no_padding_leakage() {
        let cfg = small_cfg(PeMode::Pe);
        let p = init_params(&cfg, 5);
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let short = encode_words(&mut tape, &vars, &cfg, &query(&[1, 4])).unwrap();
        let long = encode_words(&mut tape, &vars, &cfg, &query(&[1, 4, 6, 0])).unwrap();
        let a = tape.value(short).data().to_vec();
        assert_eq!(&tape.value(long).data()[..a.len()], &a[..]);
    }

    #[test]
    fn word_encoder_shape_at_full_width() {
        let mut cfg = ModelConfig::default();
        cfg.dims.vocab = 10;
        let p = init_params(&cfg, 3);
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let w = encode_words(&mut tape, &vars, &cfg, &query(&[1, 2, 3])).unwrap();
        assert_eq!(tape.shape(w), &[3, 512]);
    }

    fn words_objective(p: &ParamStore, cfg: &ModelConfig) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let w = encode_words(&mut tape, &vars, cfg, &query(&[1, 4, 1]))?;
        let t = tape.tanh(w);
        let sq = tape.mul(t, w)?;
        let loss = tape.sum(sq);
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect();
        Ok((tape.value(loss).item(), grads))
    }

    #[test]
    fn word_encoder_gradients_match_fd() {
        let cfg = small_cfg(PeMode::Pe);
        let p = init_params(&cfg, 11);
        let r = finite_diff_check(
            |p| words_objective(p, &cfg).map(|r| r.0),
            |p| words_objective(p, &cfg).map(|r| r.1),
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        let gru_and_embed: Vec<_> = r
            .params
            .iter()
            .filter(|c| c.name.starts_with("gru.") || c.name == "embedding")
            .collect();
        assert_eq!(gru_and_embed.len(), 10);
        assert!(gru_and_embed.iter().all(|c| c.passed), "{r:#?}");
    }

    fn video(n: usize, width: usize, seed: u64) -> VideoFeatures {
        let t = crate::tensor::Init::new(seed).uniform(vec![n, width], 1);
        VideoFeatures::new("v", t, 1.0).unwrap()
    }

    #[test]
    fn zero_fc_leaves_only_position_block() {
        let cfg = small_cfg(PeMode::Pe);
        let mut p = init_params(&cfg, 1);
        p.get_mut("visual_fc.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.get_mut("visual_fc.bias").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let v = encode_frames(&mut tape, &vars, &cfg, &video(3, 6, 2)).unwrap();
        let out = tape.value(v);
        assert_eq!(out.shape(), &[3, 8]);
        for i in 0..3 {
            assert!(out.row(i)[..4].iter().all(|&x| x == 0.0));
            assert_eq!(&out.row(i)[4..], &positional_encoding(i, 4, 10_000.0)[..]);
        }
    }

    #[test]
    fn single_frame_gets_origin_code() {
        let cfg = small_cfg(PeMode::Pe);
        let p = init_params(&cfg, 1);
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let v = encode_frames(&mut tape, &vars, &cfg, &video(1, 6, 2)).unwrap();
        assert_eq!(tape.shape(v), &[1, 8]);
        assert_eq!(&tape.value(v).data()[4..], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn tef_mode_widths() {
        let cfg = small_cfg(PeMode::Tef);
        let p = init_params(&cfg, 1);
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let v = encode_frames(&mut tape, &vars, &cfg, &video(4, 6, 2)).unwrap();
        assert_eq!(tape.shape(v), &[4, 8]);
        assert_eq!(&tape.value(v).row(3)[6..], &[0.75, 1.0]);
    }

    #[test]
    fn feature_width_mismatch_is_data_error() {
        let cfg = small_cfg(PeMode::Pe);
        let p = init_params(&cfg, 1);
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let err = encode_frames(&mut tape, &vars, &cfg, &video(2, 5, 2)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    fn frames_objective(p: &ParamStore, cfg: &ModelConfig, v: &VideoFeatures) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape);
        let out = encode_frames(&mut tape, &vars, cfg, v)?;
        let t = tape.tanh(out);
        let sq = tape.mul(t, out)?;
        let loss = tape.sum(sq);
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect();
        Ok((tape.value(loss).item(), grads))
    }

    #[test]
    fn frame_encoder_gradients_match_fd() {
        let cfg = small_cfg(PeMode::Pe);
        let p = init_params(&cfg, 4);
        let v = video(5, 6, 9);
        let r = finite_diff_check(
            |p| frames_objective(p, &cfg, &v).map(|r| r.0),
            |p| frames_objective(p, &cfg, &v).map(|r| r.1),
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn encoders_are_pure() {
        let cfg = small_cfg(PeMode::Pe);
        let p = init_params(&cfg, 4);
        let v = video(3, 6, 1);
        let run = || {
            let mut tape = Tape::new();
            let vars = p.to_tape(&mut tape);
            let a = encode_frames(&mut tape, &vars, &cfg, &v).unwrap();
            let b = encode_words(&mut tape, &vars, &cfg, &query(&[0, 6])).unwrap();
            (tape.value(a).clone(), tape.value(b).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn vocab_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::new(vec!["a".into(), "dog".into(), "runs".into()]).unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.encode("a dog runs").unwrap(), vec![0, 1, 2]);
        assert!(back.encode("cat").is_err());
        assert!(Vocab::new(vec!["x".into(), "x".into()]).is_err());
    }
}
