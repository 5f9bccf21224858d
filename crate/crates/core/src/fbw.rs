//! Frame-by-word interaction: the similarity matrix between frames and words,
//! attention in both directions, and the two attended summaries.

use crate::error::Result;
use crate::tensor::{Axis, Tape, Var};

/// Tape handles for one frame-by-word pass.
#[derive(Clone, Copy, Debug)]
pub struct FbwVars {
    /// `N x Q` cosine similarities.
    pub s: Var,
    /// `N x Q`, rows sum to one (attention over words for each frame).
    pub a_word: Var,
    /// `N x Q`, columns sum to one (attention over frames for each word).
    pub a_frame: Var,
    /// `N x H` frame-specific sentence representations.
    pub l: Var,
    /// `Q x H` word-specific video representations.
    pub f: Var,
}

/// `s[i][j] = cos(v_i, w_j)`. Frame and word widths must match.
pub fn fbw_similarity(tape: &mut Tape, v: Var, w: Var) -> Result<Var> {
    tape.cosine(v, w)
}

/// Softmax of `s` over words, then `l_i = sum_j a_ij w_j`. Returns `(a_word, l)`.
pub fn frame_specific_sentence(tape: &mut Tape, s: Var, w: Var) -> Result<(Var, Var)> {
    let a = tape.softmax(s, Axis::Rows)?;
    let l = tape.matmul(a, w)?;
    Ok((a, l))
}

/// Softmax of `s` over frames, then `f_j = sum_i a'_ij v_i`. Returns `(a_frame, f)`.
pub fn word_specific_video(tape: &mut Tape, s: Var, v: Var) -> Result<(Var, Var)> {
    let a = tape.softmax(s, Axis::Cols)?;
    let at = tape.transpose(a)?;
    let f = tape.matmul(at, v)?;
    Ok((a, f))
}

pub fn fbw(tape: &mut Tape, v: Var, w: Var) -> Result<FbwVars> {
    let s = fbw_similarity(tape, v, w)?;
    let (a_word, l) = frame_specific_sentence(tape, s, w)?;
    let (a_frame, f) = word_specific_video(tape, s, v)?;
    Ok(FbwVars { s, a_word, a_frame, l, f })
}
