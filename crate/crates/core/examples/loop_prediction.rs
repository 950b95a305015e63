//! Gumbel-Softmax loop prediction, the temperature schedule, and the
//! straight-through depth aggregation.
//!
//! cargo run --example loop_prediction

use versatile_ffn::depth::{depth_forward_train, predict_loops, recurse, temperature_at, TemperatureSchedule};
use versatile_ffn::nn::FfnWeights;
use versatile_ffn::rng::normal_tensor;
use versatile_ffn::{Rng, Tape, Tensor};

fn main() -> versatile_ffn::Result<()> {
    let schedule = TemperatureSchedule::default();
    let total = 2000;
    for step in [0, 200, 800, 1600, 1999] {
        println!("step {step:>4}: tau = {:.4}", temperature_at(&schedule, step, total));
    }

    let (d, hidden, max_loops) = (8, 16, 4);
    let mut rng = Rng::new(3);
    let mut tape = Tape::<f64>::new();
    let w = FfnWeights {
        w_gate: tape.leaf(normal_tensor(&mut rng, &[d, hidden], 0.3)),
        w_up: tape.leaf(normal_tensor(&mut rng, &[d, hidden], 0.3)),
        w_down: tape.leaf(normal_tensor(&mut rng, &[hidden, d], 0.3)),
        norm_gain: tape.leaf(Tensor::full(&[d], 1.0)),
    };
    let w_loop = tape.leaf(normal_tensor(&mut rng, &[d, max_loops], 1.0));
    let h = tape.leaf(normal_tensor(&mut rng, &[5, d], 1.0));

    for tau in [5.0, 1.0, 0.1] {
        let mut noise = Rng::new(11);
        let pred = predict_loops(&mut tape, h, w_loop, tau, Some(&mut noise))?;
        let probs: Vec<String> = pred
            .decision
            .probs
            .chunks(max_loops)
            .map(|row| format!("{row:.2?}"))
            .collect();
        println!("tau {tau}: loops {:?}, E[L] {:.2?}", pred.decision.hard, pred.decision.expected);
        println!("  p = {}", probs.join(" "));
    }

    // Forward copies the chosen state; backward sees the soft mixture.
    let pred = predict_loops(&mut tape, h, w_loop, 1.0, Some(&mut Rng::new(12)))?;
    let states = recurse(&mut tape, h, &w, max_loops, 1e-5)?;
    let y = depth_forward_train(&mut tape, &states, pred.p, &pred.decision, false)?;
    let loss = tape.sum(y);
    let grads = tape.backward(loss)?;
    let g = grads.get(w_loop).expect("loop head gradient");
    println!("loop head gradient norm {:.4}", g.sq_norm().sqrt());
    Ok(())
}
