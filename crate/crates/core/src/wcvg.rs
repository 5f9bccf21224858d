//! Word-conditioned visual graph: frames are refined by messages from
//! visual-semantic word nodes over a fixed number of iterations.

use crate::error::Result;
use crate::tensor::{Axis, Tape, Var};

/// Projection weights for the graph. `w2` holds one entry per iteration, or a single shared entry.
#[derive(Clone, Debug)]
pub struct WcvgVars {
    /// `2H x H`
    pub w1: Var,
    /// `1 x H`
    pub b1: Var,
    pub w2: Vec<(Var, Var)>,
}

impl WcvgVars {
    fn update_weights(&self, iteration: usize) -> (Var, Var) {
        self.w2[iteration.min(self.w2.len() - 1)]
    }
}

/// One message-passing iteration.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// `N x Q` cosine between current frames and visual-semantic nodes.
    pub s: Var,
    /// `N x Q` row-softmax of `s`.
    pub a: Var,
    /// `N x H` updated frames.
    pub v: Var,
}

/// `w'_j = ReLU(concat(w_j, f_j) W1 + b1)`.
pub fn build_visual_semantic_nodes(tape: &mut Tape, w: Var, f: Var, w1: Var, b1: Var) -> Result<Var> {
    let cat = tape.concat_last(w, f)?;
    let proj = tape.matmul(cat, w1)?;
    let proj = tape.add(proj, b1)?;
    Ok(tape.relu(proj))
}

/// `v_i^t = concat(v_i^{t-1}, sum_j a_ij w'_j) W2 + b2`, with `a` the row-softmax of `cos(v^{t-1}, w')`.
pub fn message_passing_step(tape: &mut Tape, v_prev: Var, w_prime: Var, w2: Var, b2: Var) -> Result<StepVars> {
    let s = tape.cosine(v_prev, w_prime)?;
    let a = tape.softmax(s, Axis::Rows)?;
    let msg = tape.matmul(a, w_prime)?;
    let cat = tape.concat_last(v_prev, msg)?;
    let next = tape.matmul(cat, w2)?;
    let v = tape.add(next, b2)?;
    Ok(StepVars { s, a, v })
}

/// Builds the word nodes once, then runs `iterations` update steps. Zero iterations returns `v0`.
pub fn run_wcvg(
    tape: &mut Tape,
    v0: Var,
    w: Var,
    f: Var,
    params: &WcvgVars,
    iterations: usize,
) -> Result<(Var, Vec<StepVars>)> {
    if iterations == 0 {
        return Ok((v0, Vec::new()));
    }
    let w_prime = build_visual_semantic_nodes(tape, w, f, params.w1, params.b1)?;
    let mut v = v0;
    let mut trace = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let (w2, b2) = params.update_weights(t);
        let step = message_passing_step(tape, v, w_prime, w2, b2)?;
        v = step.v;
        trace.push(step);
    }
    Ok((v, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tensor};

    const H: usize = 3;

    fn identity_left(h: usize) -> Tensor {
        // [I; 0]: picks the first h inputs of a 2h-wide row.
        let mut t = Tensor::zeros(vec![2 * h, h]);
        for i in 0..h {
            t.data_mut()[i * h + i] = 1.0;
        }
        t
    }

    fn vars(tape: &mut Tape, seed: u64) -> WcvgVars {
        let w1 = tape.param(Init::new(seed).uniform(vec![2 * H, H], 2 * H));
        let b1 = tape.param(Init::new(seed + 1).uniform(vec![1, H], 2 * H));
        let w2 = tape.param(Init::new(seed + 2).uniform(vec![2 * H, H], 2 * H));
        let b2 = tape.param(Init::new(seed + 3).uniform(vec![1, H], 2 * H));
        WcvgVars { w1, b1, w2: vec![(w2, b2)] }
    }

    #[test]
    fn zero_projection_gives_zero_nodes() {
        let mut tape = Tape::new();
        let w = tape.constant(Init::new(1).uniform(vec![2, H], 1));
        let f = tape.constant(Init::new(2).uniform(vec![2, H], 1));
        let w1 = tape.constant(Tensor::zeros(vec![2 * H, H]));
        let b1 = tape.constant(Tensor::zeros(vec![1, H]));
        let out = build_visual_semantic_nodes(&mut tape, w, f, w1, b1).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_projection_passes_nonnegative_words() {
        let mut tape = Tape::new();
        let wt = Tensor::from_rows(&[vec![0.5, 0.0, 2.0], vec![1.0, 3.0, 0.25]]).unwrap();
        let w = tape.constant(wt.clone());
        let f = tape.constant(Init::new(2).uniform(vec![2, H], 1));
        let w1 = tape.constant(identity_left(H));
        let b1 = tape.constant(Tensor::zeros(vec![1, H]));
        let out = build_visual_semantic_nodes(&mut tape, w, f, w1, b1).unwrap();
        assert_eq!(tape.value(out), &wt);
    }

    #[test]
    fn identity_update_is_passthrough() {
        let mut tape = Tape::new();
        let vt = Init::new(5).uniform(vec![4, H], 1);
        let v = tape.constant(vt.clone());
        let wp = tape.constant(Init::new(6).uniform(vec![2, H], 1));
        let w2 = tape.constant(identity_left(H));
        let b2 = tape.constant(Tensor::zeros(vec![1, H]));
        let step = message_passing_step(&mut tape, v, wp, w2, b2).unwrap();
        assert_eq!(tape.value(step.v), &vt);
    }

    #[test]
    fn single_word_message_is_that_node() {
        let mut tape = Tape::new();
        let v = tape.constant(Init::new(5).uniform(vec![3, H], 1));
        let wpt = Tensor::from_rows(&[vec![0.2, 0.9, 0.4]]).unwrap();
        let wp = tape.constant(wpt.clone());
        // [0; I] selects the message half.
        let mut sel = Tensor::zeros(vec![2 * H, H]);
        for i in 0..H {
            sel.data_mut()[(H + i) * H + i] = 1.0;
        }
        let w2 = tape.constant(sel);
        let b2 = tape.constant(Tensor::zeros(vec![1, H]));
        let step = message_passing_step(&mut tape, v, wp, w2, b2).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(step.v).row(i), wpt.row(0));
        }
    }

    #[test]
    fn step_matches_loop_oracle() {
        let vt = Init::new(31).uniform(vec![3, H], 1);
        let wpt = Init::new(32).uniform(vec![2, H], 1);
        let w2t = Init::new(33).uniform(vec![2 * H, H], 1);
        let b2t = Init::new(34).uniform(vec![1, H], 1);
        let mut tape = Tape::new();
        let v = tape.constant(vt.clone());
        let wp = tape.constant(wpt.clone());
        let w2 = tape.constant(w2t.clone());
        let b2 = tape.constant(b2t.clone());
        let step = message_passing_step(&mut tape, v, wp, w2, b2).unwrap();

        for i in 0..3 {
            let vi = vt.row(i);
            let cos: Vec<f64> = (0..2)
                .map(|j| {
                    let wj = wpt.row(j);
                    let d: f64 = vi.iter().zip(wj).map(|(a, b)| a * b).sum();
                    let n1: f64 = vi.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let n2: f64 = wj.iter().map(|a| a * a).sum::<f64>().sqrt();
                    d / (n1 * n2 + 1e-8)
                })
                .collect();
            let z = cos[0].exp() + cos[1].exp();
            let a = [cos[0].exp() / z, cos[1].exp() / z];
            let msg: Vec<f64> = (0..H).map(|p| a[0] * wpt.get(0, p) + a[1] * wpt.get(1, p)).collect();
            let cat: Vec<f64> = vi.iter().chain(&msg).copied().collect();
            for c in 0..H {
                let want: f64 = (0..2 * H).map(|k| cat[k] * w2t.get(k, c)).sum::<f64>() + b2t.get(0, c);
                assert!((tape.value(step.v).get(i, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let mut tape = Tape::new();
        let p = vars(&mut tape, 1);
        let v0 = tape.constant(Init::new(5).uniform(vec![4, H], 1));
        let w = tape.constant(Init::new(6).uniform(vec![2, H], 1));
        let f = tape.constant(Init::new(7).uniform(vec![2, H], 1));
        let (out, trace) = run_wcvg(&mut tape, v0, w, f, &p, 0).unwrap();
        assert_eq!(out, v0);
        assert!(trace.is_empty());
    }

    #[test]
    fn one_iteration_equals_manual_step() {
        let mut tape = Tape::new();
        let p = vars(&mut tape, 1);
        let v0 = tape.constant(Init::new(5).uniform(vec![4, H], 1));
        let w = tape.constant(Init::new(6).uniform(vec![2, H], 1));
        let f = tape.constant(Init::new(7).uniform(vec![2, H], 1));
        let (out, _) = run_wcvg(&mut tape, v0, w, f, &p, 1).unwrap();
        let wp = build_visual_semantic_nodes(&mut tape, w, f, p.w1, p.b1).unwrap();
        let (w2, b2) = p.w2[0];
        let manual = message_passing_step(&mut tape, v0, wp, w2, b2).unwrap();
        let a: Vec<u64> = tape.value(out).data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = tape.value(manual.v).data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_normalized_every_iteration() {
        for seed in 0..20 {
            let mut tape = Tape::new();
            let p = vars(&mut tape, seed);
            let v0 = tape.constant(Init::new(seed + 50).uniform(vec![5, H], 1));
            let w = tape.constant(Init::new(seed + 60).uniform(vec![3, H], 1));
            let f = tape.constant(Init::new(seed + 70).uniform(vec![3, H], 1));
            let (out, trace) = run_wcvg(&mut tape, v0, w, f, &p, 3).unwrap();
            assert_eq!(trace.len(), 3);
            assert_eq!(tape.shape(out), &[5, H]);
            for step in &trace {
                let a = tape.value(step.a);
                for i in 0..5 {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
