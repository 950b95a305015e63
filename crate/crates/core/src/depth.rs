//! Recursive application of the full shared FFN with a learned per-token
//! loop count.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ffn_forward, FfnWeights};
use crate::rng::{gumbel_noise, Rng};
use crate::tensor::Real;

/// Per-token loop statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopDecision {
    pub max_loops: usize,
    /// `[tokens * L_max]`, each row on the simplex.
    pub probs: Vec<f64>,
    /// `argmax(p) + 1`, ties to the smaller count.
    pub hard: Vec<usize>,
    /// `sum_l l * p_l`.
    pub expected: Vec<f64>,
    pub tau: f64,
}

impl LoopDecision {
    pub fn tokens(&self) -> usize {
        self.hard.len()
    }

    /// Zero-based state index for each token.
    pub fn choice(&self) -> Vec<usize> {
        self.hard.iter().map(|&l| l - 1).collect()
    }
}

pub struct LoopPrediction {
    /// Loop probabilities `[tokens, L_max]`.
    pub p: Var,
    pub decision: LoopDecision,
}

/// `p = softmax((h w_loop + g) / tau)` with Gumbel noise `g` drawn from
/// `noise` when given, and no noise otherwise.
pub fn predict_loops<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    w_loop: Var,
    tau: f64,
    noise: Option<&mut Rng>,
) -> Result<LoopPrediction> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let l = match *tape.shape(w_loop) {
        [_, l] if l >= 1 => l,
        _ => return Err(Error::shape("predict_loops", tape.shape(w_loop), &[])),
    };
    let logits = tape.matmul(h, w_loop)?;
    let tokens = tape.value(logits).rows();
    let mut z = tape.reshape(logits, &[tokens, l])?;
    if let Some(rng) = noise {
        let g = tape.constant(gumbel_noise(rng, &[tokens, l]));
        z = tape.add(z, g)?;
    }
    let scaled = tape.scale(z, T::from_f64(1.0 / tau));
    let p = tape.softmax(scaled, 1)?;

    let probs = tape.value(p).to_f64_vec();
    let mut hard = Vec::with_capacity(tokens);
    let mut expected = Vec::with_capacity(tokens);
    for row in probs.chunks(l) {
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        hard.push(best + 1);
        expected.push(row.iter().enumerate().map(|(i, &x)| (i + 1) as f64 * x).sum());
    }
    Ok(LoopPrediction {
        p,
        decision: LoopDecision {
            max_loops: l,
            probs,
            hard,
            expected,
            tau,
        },
    })
}

/// `[H^(1), ..., H^(L)]` with `H^(l) = F(H^(l-1))`.
pub fn recurse<T: Real>(tape: &mut Tape<T>, h0: Var, w: &FfnWeights, max_loops: usize, eps: T) -> Result<Vec<Var>> {
    if max_loops == 0 {
        return Err(Error::contract("max_loops must be at least 1"));
    }
    let mut states = Vec::with_capacity(max_loops);
    let mut cur = h0;
    for _ in 0..max_loops {
        cur = ffn_forward(tape, cur, w, eps)?;
        states.push(cur);
    }
    Ok(states)
}

/// Straight-through aggregation: the forward value is `H^(l_hat)` row by
/// row, the gradient is that of `sum_l p_l H^(l)`. With `soft` the forward
/// value is the soft sum as well.
pub fn depth_forward_train<T: Real>(
    tape: &mut Tape<T>,
    states: &[Var],
    p: Var,
    decision: &LoopDecision,
    soft: bool,
) -> Result<Var> {
    if soft {
        tape.mix_states(p, states, None)
    } else {
        tape.mix_states(p, states, Some(&decision.choice()))
    }
}

pub struct DepthInferOutput {
    pub y: Var,
    /// FFN applications per token; equals `hard` by construction.
    pub applications: Vec<usize>,
}

/// Applies `F` to each token exactly `hard[t]` times. Tokens that have
/// reached their count drop out of the batch for later iterations.
pub fn depth_forward_infer<T: Real>(
    tape: &mut Tape<T>,
    h0: Var,
    w: &FfnWeights,
    hard: &[usize],
    eps: T,
) -> Result<DepthInferOutput> {
    let shape = tape.shape(h0).to_vec();
    let d = *shape.last().expect("non-empty shape");
    let tokens = tape.value(h0).rows();
    if hard.len() != tokens || hard.contains(&0) {
        return Err(Error::contract("every token needs a loop count of at least 1"));
    }
    let mut cur = tape.reshape(h0, &[tokens, d])?;
    let mut applications = vec![0; tokens];
    let mut step = 0;
    loop {
        let rows: Vec<usize> = (0..tokens).filter(|&t| hard[t] > step).collect();
        if rows.is_empty() {
            break;
        }
        let x = tape.gather_rows(cur, &rows)?;
        let fx = ffn_forward(tape, x, w, eps)?;
        cur = tape.scatter_rows(cur, fx, &rows)?;
        for &r in &rows {
            applications[r] += 1;
        }
        step += 1;
    }
    let y = tape.reshape(cur, &shape)?;
    Ok(DepthInferOutput { y, applications })
}

/// Exponential annealing of the Gumbel-Softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub tau_init: f64,
    pub tau_min: f64,
    /// Fraction of training after which `tau_min` is held.
    pub decay_frac: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau_init: 5.0,
            tau_min: 0.1,
            decay_frac: 0.8,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0) {
            return Err(Error::config("tau_min", "must be positive"));
        }
        if !(self.tau_init >= self.tau_min) {
            return Err(Error::config("tau_init", "must be at least tau_min"));
        }
        if !(self.decay_frac > 0.0 && self.decay_frac <= 1.0) {
            return Err(Error::config("tau_decay_frac", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `max(tau_min, tau_init * (tau_min / tau_init)^(step / (f * total)))`,
/// exactly `tau_min` from `f * total` on.
pub fn temperature_at(s: &TemperatureSchedule, step: u64, total_steps: u64) -> f64 {
    if step == 0 {
        return s.tau_init;
    }
    let horizon = s.decay_frac * total_steps as f64;
    let t = step as f64;
    if t >= horizon {
        return s.tau_min;
    }
    (s.tau_init * (s.tau_min / s.tau_init).powf(t / horizon)).max(s.tau_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, FD_STEP};
    use crate::rng::normal_tensor;
    use crate::tensor::Tensor;

    fn ffn(tape: &mut Tape<f64>, rng: &mut Rng, d: usize, hid: usize, down: f64) -> FfnWeights {
        FfnWeights {
            w_gate: tape.leaf(normal_tensor(rng, &[d, hid], 0.7)),
            w_up: tape.leaf(normal_tensor(rng, &[d, hid], 0.7)),
            w_down: tape.leaf(normal_tensor(rng, &[hid, d], down)),
            norm_gain: tape.leaf(normal_tensor(rng, &[d], 1.0)),
        }
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let mut tape = Tape::<f64>::inference();
        let h = tape.constant(Tensor::full(&[1, 2, 3], 1.0));
        let w = tape.constant(Tensor::zeros(&[3, 4]));
        let pred = predict_loops(&mut tape, h, w, 0.1, None).unwrap();
        let d = &pred.decision;
        assert_eq!(d.probs, vec![0.25; 8]);
        assert_eq!(d.expected, vec![2.5, 2.5]);
        assert_eq!(d.hard, vec![1, 1]);
    }

    #[test]
    fn saturated_logits_pick_the_deepest_count() {
        let mut tape = Tape::<f64>::inference();
        let h = tape.constant(Tensor::full(&[1, 1, 2], 1.0));
        let w = tape.constant(Tensor::from_f64(&[2, 4], &[0., 0., 0., 5., 0., 0., 0., 5.]).unwrap());
        let pred = predict_loops(&mut tape, h, w, 0.1, None).unwrap();
        assert_eq!(pred.decision.hard, vec![4]);
        assert!((pred.decision.expected[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_prediction_is_consistent_and_on_simplex() {
        let mut rng = Rng::new(20);
        let mut tape = Tape::<f64>::inference();
        let h = tape.constant(normal_tensor(&mut rng, &[3, 5, 4], 1.0));
        let w = tape.constant(normal_tensor(&mut rng, &[4, 4], 1.0));
        let pred = predict_loops(&mut tape, h, w, 2.0, Some(&mut Rng::new(42))).unwrap();
        let again = predict_loops(&mut tape, h, w, 2.0, Some(&mut Rng::new(42))).unwrap();
        let d = &pred.decision;
        assert_eq!(d, &again.decision);
        for (t, row) in d.probs.chunks(4).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let e = row[0] + 2.0 * row[1] + 3.0 * row[2] + 4.0 * row[3];
            assert!((d.expected[t] - e).abs() < 1e-12);
            assert!((1.0..=4.0).contains(&d.expected[t]));
            let argmax = (0..4).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(d.hard[t], argmax + 1);
        }
        assert!(predict_loops(&mut tape, h, w, 0.0, None).is_err());
        assert!(predict_loops(&mut tape, h, w, -1.0, None).is_err());
    }

    #[test]
    fn recursion_examples() {
        let mut rng = Rng::new(21);
        let mut tape = Tape::<f64>::inference();
        let h0 = tape.constant(normal_tensor(&mut rng, &[2, 2, 4], 1.0));

        let fixed = ffn(&mut tape, &mut rng, 4, 8, 0.0);
        for s in recurse(&mut tape, h0, &fixed, 3, 1e-5).unwrap() {
            assert_eq!(tape.value(s), tape.value(h0));
        }

        let w = ffn(&mut tape, &mut rng, 4, 8, 0.5);
        let one = recurse(&mut tape, h0, &w, 1, 1e-5).unwrap();
        let f1 = ffn_forward(&mut tape, h0, &w, 1e-5).unwrap();
        assert_eq!(tape.value(one[0]), tape.value(f1));

        let three = recurse(&mut tape, h0, &w, 3, 1e-5).unwrap();
        let f2 = ffn_forward(&mut tape, f1, &w, 1e-5).unwrap();
        let f3 = ffn_forward(&mut tape, f2, &w, 1e-5).unwrap();
        assert_eq!(tape.value(three[2]), tape.value(f3));
        assert!(recurse(&mut tape, h0, &w, 0, 1e-5).is_err());
    }

    #[test]
    fn hard_forward_selects_state_and_soft_mode_passes_gradcheck() {
        let mut rng = Rng::new(22);
        let mut tape = Tape::<f64>::new();
        let w = ffn(&mut tape, &mut rng, 4, 8, 0.5);
        let h0 = tape.leaf(normal_tensor(&mut rng, &[2, 3, 4], 1.0));
        let w_loop = tape.leaf(normal_tensor(&mut rng, &[4, 3], 1.0));
        let pred = predict_loops(&mut tape, h0, w_loop, 1.0, Some(&mut rng)).unwrap();
        let states = recurse(&mut tape, h0, &w, 3, 1e-5).unwrap();
        let y = depth_forward_train(&mut tape, &states, pred.p, &pred.decision, false).unwrap();
        for (t, &l) in pred.decision.hard.iter().enumerate() {
            assert_eq!(tape.value(y).row(t), tape.value(states[l - 1]).row(t));
        }

        let inputs = [
            normal_tensor(&mut rng, &[1, 3, 4], 1.0),
            normal_tensor(&mut rng, &[4, 8], 0.7),
            normal_tensor(&mut rng, &[4, 8], 0.7),
            normal_tensor(&mut rng, &[8, 4], 0.5),
            normal_tensor(&mut rng, &[4], 1.0),
            normal_tensor(&mut rng, &[4, 3], 1.0),
        ];
        let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
            let w = FfnWeights {
                w_gate: v[1],
                w_up: v[2],
                w_down: v[3],
                norm_gain: v[4],
            };
            let pred = predict_loops(tape, v[0], v[5], 0.7, Some(&mut Rng::new(5)))?;
            let states = recurse(tape, v[0], &w, 3, 1e-5)?;
            let y = depth_forward_train(tape, &states, pred.p, &pred.decision, true)?;
            let r = tape.constant(normal_tensor(&mut Rng::new(75), &[3, 4], 1.0));
            let y = tape.reshape(y, &[3, 4])?;
            let p = tape.mul(y, r)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn early_exit_counts_and_cross_mode_equality() {
        let mut rng = Rng::new(23);
        let mut tape = Tape::<f64>::inference();
        let w = ffn(&mut tape, &mut rng, 4, 8, 0.5);
        let h0 = tape.constant(normal_tensor(&mut rng, &[2, 3, 4], 1.0));
        let hard = [1, 3, 2, 4, 1, 3];
        let out = depth_forward_infer(&mut tape, h0, &w, &hard, 1e-5).unwrap();
        assert_eq!(out.applications, hard);
        let states = recurse(&mut tape, h0, &w, 4, 1e-5).unwrap();
        for (t, &l) in hard.iter().enumerate() {
            assert_eq!(tape.value(out.y).row(t), tape.value(states[l - 1]).row(t));
        }
    }

    #[test]
    fn early_exit_is_independent_of_batch_composition() {
        let mut rng = Rng::new(24);
        let mut tape = Tape::<f64>::inference();
        let w = ffn(&mut tape, &mut rng, 4, 8, 0.5);
        let all = normal_tensor::<f64>(&mut rng, &[4, 4], 1.0);
        let h0 = tape.constant(all.clone());
        let mixed = depth_forward_infer(&mut tape, h0, &w, &[1, 3, 1, 3], 1e-5).unwrap();
        for t in [0, 2] {
            let alone = tape.constant(Tensor::new(&[1, 4], all.row(t).to_vec()).unwrap());
            let single = depth_forward_infer(&mut tape, alone, &w, &[1], 1e-5).unwrap();
            assert_eq!(tape.value(mixed.y).row(t), tape.value(single.y).data());
        }
        assert_eq!(mixed.applications, vec![1, 3, 1, 3]);
    }

    #[test]
    fn temperature_schedule_examples() {
        let s = TemperatureSchedule::default();
        assert_eq!(temperature_at(&s, 0, 1000), 5.0);
        assert_eq!(temperature_at(&s, 800, 1000), 0.1);
        assert_eq!(temperature_at(&s, 1000, 1000), 0.1);
        assert!((temperature_at(&s, 400, 1000) - 0.5f64.sqrt()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for t in 0..=1000 {
            let tau = temperature_at(&s, t, 1000);
            assert!(tau <= prev && tau >= 0.1);
            prev = tau;
        }
        assert!(TemperatureSchedule { tau_min: 0.0, ..s }.validate().is_err());
        assert!(TemperatureSchedule { decay_frac: 1.5, ..s }.validate().is_err());
    }
}
