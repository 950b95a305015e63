//! Finite-difference check of a full soft-mode layer, every parameter.
//!
//! cargo run --release --example gradient_check

use versatile_ffn::gradcheck::{self, FD_STEP};
use versatile_ffn::layer::{layer_forward_train, BlockSettings, VersatileLayer};
use versatile_ffn::nn::{AttentionWeights, FfnWeights};
use versatile_ffn::rng::normal_tensor;
use versatile_ffn::width::build_expert_views;
use versatile_ffn::{Rng, Tensor};

fn main() -> versatile_ffn::Result<()> {
    let (d, hidden, n, max_loops) = (4, 8, 2, 2);
    let mut rng = Rng::new(1);
    let shapes: [&[usize]; 12] = [
        &[1, 3, d],
        &[d, d],
        &[d, d],
        &[d, d],
        &[d, d],
        &[d],
        &[d, hidden],
        &[d, hidden],
        &[hidden, d],
        &[d],
        &[d, n],
        &[d, max_loops],
    ];
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| normal_tensor(&mut rng, s, 0.6)).collect();
    let views = build_expert_views(hidden, hidden / n, n)?;
    let settings = BlockSettings {
        top_k: 1,
        max_loops,
        shared_expert: false,
        norm_eps: 1e-5,
    };
    let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
        let layer = VersatileLayer {
            attention: AttentionWeights { wq: v[1], wk: v[2], wv: v[3], wo: v[4], norm_gain: v[5], heads: 2 },
            ffn: FfnWeights { w_gate: v[6], w_up: v[7], w_down: v[8], norm_gain: v[9] },
            router: v[10],
            loop_head: v[11],
            views: views.clone(),
        };
        // The noise generator is rebuilt on every call so each evaluation
        // sees the same Gumbel sample.
        let out = layer_forward_train(tape, v[0], &layer, &settings, 1.0, &mut Rng::new(9), true)?;
        let s = tape.sum(out.y);
        tape.add(s, out.aux)
    })?;
    println!(
        "{} entries checked, max relative error {:.2e} (input {}, entry {}: analytic {:.6}, numeric {:.6})",
        report.checked, report.max_rel_error, report.worst.0, report.worst.1, report.worst.2, report.worst.3
    );
    Ok(())
}
