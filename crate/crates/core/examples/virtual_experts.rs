//! Virtual experts as overlapping slices of one FFN, with top-K routing.
//!
//! cargo run --example virtual_experts

use versatile_ffn::nn::{ffn_forward, FfnWeights};
use versatile_ffn::rng::normal_tensor;
use versatile_ffn::width::{build_expert_views, compute_stride, load_balance_loss, views_disjoint, width_forward};
use versatile_ffn::{Rng, Tape, Tensor};

fn main() -> versatile_ffn::Result<()> {
    let (d, hidden, n, k) = (8, 32, 4, 2);
    for d_expert in [8, 12] {
        let views = build_expert_views(hidden, d_expert, n)?;
        let stride = compute_stride(hidden, d_expert, n)?;
        let ranges: Vec<_> = views.iter().map(|v| v.range()).collect();
        println!(
            "d_expert {d_expert}: stride {stride}, ranges {ranges:?}, disjoint {}",
            views_disjoint(&views)
        );
    }

    let mut rng = Rng::new(7);
    let mut tape = Tape::<f64>::inference();
    let w = FfnWeights {
        w_gate: tape.constant(normal_tensor(&mut rng, &[d, hidden], 0.3)),
        w_up: tape.constant(normal_tensor(&mut rng, &[d, hidden], 0.3)),
        w_down: tape.constant(normal_tensor(&mut rng, &[hidden, d], 0.3)),
        norm_gain: tape.constant(Tensor::full(&[d], 1.0)),
    };
    let router = tape.constant(normal_tensor(&mut rng, &[d, n], 1.0));
    let h = tape.constant(normal_tensor(&mut rng, &[1, 6, d], 1.0));
    let views = build_expert_views(hidden, 8, n)?;

    let out = width_forward(&mut tape, h, &w, &views, router, k, 1e-5, None, false)?;
    for (t, (sel, weights)) in out.outcome.selected.iter().zip(&out.outcome.weights).enumerate() {
        println!("token {t}: experts {sel:?} with gates {weights:.3?}");
    }
    println!("expert loads {:?}", out.outcome.counts());
    println!("balance loss {:.4} (1.0 is perfectly uniform)", load_balance_loss(&out.outcome));
    println!("expert branch evaluations {}, FFN FLOPs {}", out.expert_evals, out.ffn_flops);

    // The dense FFN for comparison: same weights, whole hidden dimension.
    let dense = ffn_forward(&mut tape, h, &w, 1e-5)?;
    let gap: f64 = tape
        .value(out.y)
        .data()
        .iter()
        .zip(tape.value(dense).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max |width - dense| = {gap:.4}");
    Ok(())
}
