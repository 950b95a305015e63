//! Transformer pieces the block leaves unchanged: causal self-attention,
//! the SwiGLU feed-forward transform, and the next-token loss.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId};
use crate::tensor::Real;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Shared SwiGLU weights: `w_gate, w_up: d x d_hidden`, `w_down: d_hidden x d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnWeights {
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
    pub norm_gain: Var,
}

impl FfnWeights {
    /// Returns `(d, d_hidden)` after checking the three matrices agree.
    pub fn dims<T: Real>(&self, tape: &Tape<T>) -> Result<(usize, usize)> {
        let g = tape.shape(self.w_gate);
        let u = tape.shape(self.w_up);
        let dn = tape.shape(self.w_down);
        let n = tape.shape(self.norm_gain);
        match (g, u, dn, n) {
            ([d, h], [d2, h2], [h3, d3], [d4]) if d == d2 && d == d3 && d == d4 && h == h2 && h == h3 => {
                Ok((*d, *h))
            }
            _ => Err(Error::shape("ffn weights", g, dn)),
        }
    }
}

/// Per-head query/key/value/output projections, `d x d` each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub norm_gain: Var,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
    pub norm_gain: ParamId,
}

impl FfnParams {
    pub fn bind(&self, vars: &BoundParams) -> FfnWeights {
        FfnWeights {
            w_gate: vars.var(self.w_gate),
            w_up: vars.var(self.w_up),
            w_down: vars.var(self.w_down),
            norm_gain: vars.var(self.norm_gain),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm_gain: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn bind(&self, vars: &BoundParams) -> AttentionWeights {
        AttentionWeights {
            wq: vars.var(self.wq),
            wk: vars.var(self.wk),
            wv: vars.var(self.wv),
            wo: vars.var(self.wo),
            norm_gain: vars.var(self.norm_gain),
            heads: self.heads,
        }
    }
}

/// `H = x + Attention(norm(x))` over `[B, T, d]` with a causal mask.
pub fn attention_block<T: Real>(tape: &mut Tape<T>, x: Var, w: &AttentionWeights, eps: T) -> Result<Var> {
    match *tape.shape(x) {
        [_, t, _] if t > 0 => {}
        [_, _, _] => return Err(Error::contract("attention over an empty sequence")),
        _ => return Err(Error::shape("attention_block", tape.shape(x), &[])),
    }
    let xn = tape.rms_norm(x, w.norm_gain, eps)?;
    let q = tape.matmul(xn, w.wq)?;
    let k = tape.matmul(xn, w.wk)?;
    let v = tape.matmul(xn, w.wv)?;
    let a = tape.causal_attention(q, k, v, w.heads)?;
    let o = tape.matmul(a, w.wo)?;
    tape.add(x, o)
}

/// The non-residual part of the SwiGLU transform applied to an already
/// normalized input: `w_down(silu(w_gate hn) * w_up hn)`.
pub fn ffn_branch<T: Real>(tape: &mut Tape<T>, hn: Var, w: &FfnWeights) -> Result<Var> {
    let gate = tape.matmul(hn, w.w_gate)?;
    let up = tape.matmul(hn, w.w_up)?;
    let act = tape.silu(gate);
    let mixed = tape.mul(act, up)?;
    tape.matmul(mixed, w.w_down)
}

/// `F(h) = h + w_down(silu(w_gate norm(h)) * w_up norm(h))`.
pub fn ffn_forward<T: Real>(tape: &mut Tape<T>, h: Var, w: &FfnWeights, eps: T) -> Result<Var> {
    let hn = tape.rms_norm(h, w.norm_gain, eps)?;
    let branch = ffn_branch(tape, hn, w)?;
    tape.add(h, branch)
}

/// Next-token cross entropy: position `t` of each sequence predicts token
/// `t + 1`; the final position has no target.
pub fn lm_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if tokens.len() != batch * seq || tape.value(logits).rows() != batch * seq {
        return Err(Error::shape("lm_loss", tape.shape(logits), &[batch, seq]));
    }
    let targets: Vec<Option<usize>> = (0..batch * seq)
        .map(|i| (i % seq + 1 < seq).then(|| tokens[i + 1]))
        .collect();
    tape.cross_entropy(logits, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, FD_STEP};
    use crate::rng::{normal_tensor, Rng};
    use crate::tensor::Tensor;

    fn attn_vars(tape: &mut Tape<f64>, rng: &mut Rng, d: usize, heads: usize, std: f64) -> AttentionWeights {
        let mut m = || tape.leaf(normal_tensor(rng, &[d, d], std));
        let (wq, wk, wv, wo) = (m(), m(), m(), m());
        let norm_gain = tape.leaf(Tensor::full(&[d], 1.0));
        AttentionWeights {
            wq,
            wk,
            wv,
            wo,
            norm_gain,
            heads,
        }
    }

    #[test]
    fn zero_attention_is_identity() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::<f64>::new();
        let w = attn_vars(&mut tape, &mut rng, 4, 2, 0.0);
        let xt = normal_tensor(&mut rng, &[2, 3, 4], 1.0);
        let x = tape.leaf(xt.clone());
        let h = attention_block(&mut tape, x, &w, 1e-5).unwrap();
        assert_eq!(tape.value(h), &xt);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::<f64>::inference();
        let w = attn_vars(&mut tape, &mut rng, 4, 2, 0.5);
        let x = tape.leaf(normal_tensor(&mut rng, &[1, 1, 4], 1.0));
        let h = attention_block(&mut tape, x, &w, 1e-5).unwrap();
        let xn = tape.rms_norm(x, w.norm_gain, 1e-5).unwrap();
        let v = tape.matmul(xn, w.wv).unwrap();
        let o = tape.matmul(v, w.wo).unwrap();
        let expect = tape.add(x, o).unwrap();
        let (a, b) = (tape.value(h).data(), tape.value(expect).data());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_block_gradient() {
        let mut rng = Rng::new(3);
        let d = 4;
        let mut inputs = vec![normal_tensor(&mut rng, &[2, 3, d], 1.0)];
        for _ in 0..4 {
            inputs.push(normal_tensor(&mut rng, &[d, d], 0.5));
        }
        inputs.push(normal_tensor(&mut rng, &[d], 1.0));
        let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
            let w = AttentionWeights {
                wq: v[1],
                wk: v[2],
                wv: v[3],
                wo: v[4],
                norm_gain: v[5],
                heads: 2,
            };
            let h = attention_block(tape, v[0], &w, 1e-5)?;
            let r = tape.constant(normal_tensor(&mut Rng::new(99), &[2, 3, d], 1.0));
            let p = tape.mul(h, r)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_tokens() {
        let mut rng = Rng::new(4);
        let xt = normal_tensor::<f64>(&mut rng, &[1, 5, 4], 1.0);
        let mut xt2 = xt.clone();
        for v in &mut xt2.data_mut()[3 * 4..] {
            *v += 1.0;
        }
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::<f64>::inference();
            let w = attn_vars(&mut tape, &mut Rng::new(5), 4, 2, 0.5);
            let x = tape.constant(input.clone());
            let h = attention_block(&mut tape, x, &w, 1e-5).unwrap();
            tape.value(h).clone()
        };
        let (a, b) = (run(&xt), run(&xt2));
        assert_eq!(&a.data()[..12], &b.data()[..12]);
        assert_ne!(&a.data()[12..], &b.data()[12..]);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut tape = Tape::<f64>::inference();
        let mut rng = Rng::new(6);
        let w = attn_vars(&mut tape, &mut rng, 4, 2, 0.5);
        let x = tape.constant(Tensor::zeros(&[4]));
        assert!(attention_block(&mut tape, x, &w, 1e-5).is_err());
    }

    fn ffn_vars(tape: &mut Tape<f64>, g: &[f64], u: &[f64], dn: &[f64], d: usize, hid: usize) -> FfnWeights {
        FfnWeights {
            w_gate: tape.leaf(Tensor::from_f64(&[d, hid], g).unwrap()),
            w_up: tape.leaf(Tensor::from_f64(&[d, hid], u).unwrap()),
            w_down: tape.leaf(Tensor::from_f64(&[hid, d], dn).unwrap()),
            norm_gain: tape.leaf(Tensor::full(&[d], 1.0)),
        }
    }

    #[test]
    fn ffn_hand_computed_two_by_two() {
        let mut tape = Tape::<f64>::inference();
        let w = ffn_vars(&mut tape, &[1., 0., 0., 1.], &[2., 0., 0., 1.], &[1., 1., 0., 1.], 2, 2);
        let h = tape.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let y = ffn_forward(&mut tape, h, &w, 1e-5).unwrap();

        let silu = |x: f64| x / (1.0 + (-x).exp());
        let r = 1.0 / (2.5f64 + 1e-5).sqrt();
        let (n0, n1) = (r, 2.0 * r);
        let a0 = silu(n0) * (2.0 * n0);
        let a1 = silu(n1) * n1;
        let expect = [1.0 + a0, 2.0 + a0 + a1];
        for (got, want) in tape.value(y).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn ffn_with_zero_down_projection_is_identity() {
        let mut rng = Rng::new(7);
        let mut tape = Tape::<f64>::inference();
        let g = normal_tensor::<f64>(&mut rng, &[3, 6], 1.0);
        let u = normal_tensor::<f64>(&mut rng, &[3, 6], 1.0);
        let w = ffn_vars(&mut tape, g.data(), u.data(), &[0.0; 18], 3, 6);
        let ht = normal_tensor(&mut rng, &[2, 2, 3], 1.0);
        let h = tape.constant(ht.clone());
        let y = ffn_forward(&mut tape, h, &w, 1e-5).unwrap();
        assert_eq!(tape.value(y), &ht);
    }

    #[test]
    fn ffn_gradient() {
        let mut rng = Rng::new(8);
        let inputs = [
            normal_tensor(&mut rng, &[2, 2, 4], 1.0),
            normal_tensor(&mut rng, &[4, 8], 0.5),
            normal_tensor(&mut rng, &[4, 8], 0.5),
            normal_tensor(&mut rng, &[8, 4], 0.5),
            normal_tensor(&mut rng, &[4], 1.0),
        ];
        let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
            let w = FfnWeights {
                w_gate: v[1],
                w_up: v[2],
                w_down: v[3],
                norm_gain: v[4],
            };
            let y = ffn_forward(tape, v[0], &w, 1e-5)?;
            let r = tape.constant(normal_tensor(&mut Rng::new(98), &[2, 2, 4], 1.0));
            let p = tape.mul(y, r)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn lm_loss_reference_values() {
        let mut tape = Tape::<f64>::inference();
        let logits = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let l = lm_loss(&mut tape, logits, &[0, 1, 2], 1, 3).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut confident = Tensor::<f64>::zeros(&[1, 3, 4]);
        confident.data_mut()[1] = 50.0; // position 0 predicts token 1
        confident.data_mut()[4 + 2] = 50.0; // position 1 predicts token 2
        let logits = tape.constant(confident);
        let l = lm_loss(&mut tape, logits, &[0, 1, 2], 1, 3).unwrap();
        assert!(tape.value(l).item() < 1e-20);

        let logits = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(lm_loss(&mut tape, logits, &[0, 7, 2], 1, 3).is_err());
    }

    #[test]
    fn lm_loss_gradient() {
        let mut rng = Rng::new(9);
        let inputs = [normal_tensor(&mut rng, &[2, 3, 5], 1.0)];
        let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
            lm_loss(tape, v[0], &[1, 4, 0, 2, 2, 3], 2, 3)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
