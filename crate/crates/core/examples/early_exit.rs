//! Inference with discrete early exit and width pruning, and the runtime
//! FLOPs estimate against the counted FLOPs.
//!
//! cargo run --release --example early_exit

use versatile_ffn::accounting::{arch_spec, collect_runtime_stats, ffn_flops_dense, ffn_flops_moe, traced_flops_per_token, versatile_runtime_flops};
use versatile_ffn::layer::{InferOptions, LambdaSource};
use versatile_ffn::model::{model_forward, ForwardMode, Model, ModelConfig};
use versatile_ffn::{Rng, Tape};

fn main() -> versatile_ffn::Result<()> {
    let config = ModelConfig {
        d_model: 32,
        d_hidden: 64,
        n_layers: 3,
        n_experts: 4,
        d_expert: 16,
        max_seq: 16,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::new(config.clone(), 4)?;
    let mut rng = Rng::new(8);
    let tokens: Vec<usize> = (0..2 * 16).map(|_| rng.below(config.vocab)).collect();

    for (name, opts) in [
        ("hard lambda", InferOptions::default()),
        ("soft lambda", InferOptions { lambda_source: LambdaSource::Soft, lambda_threshold: 0.05, ..InferOptions::default() }),
    ] {
        let mut tape = Tape::inference();
        let vars = model.params.bind(&mut tape);
        let out = model_forward(&mut tape, &model, &vars, &tokens, 2, 16, ForwardMode::Infer(opts))?;
        println!("== {name}");
        for (i, t) in out.traces.iter().enumerate() {
            println!(
                "layer {i}: mean loops {:.2}, width pruned for {} of {} tokens, {} expert evaluations",
                t.mean_loops(),
                t.pruned,
                t.tokens(),
                t.expert_evals
            );
        }
        let (n_mean, p_frac) = collect_runtime_stats(&out.traces, config.max_loops)?;
        let spec = arch_spec(&config);
        let formula = 1e6 * versatile_runtime_flops(ffn_flops_dense(&spec), ffn_flops_moe(&spec), n_mean, p_frac, config.max_loops)?;
        println!(
            "n_mean {n_mean:.3}, p_frac {p_frac:.3}: formula {formula:.0} vs counted {:.0} FFN FLOPs per token",
            traced_flops_per_token(&out.traces)
        );
    }
    Ok(())
}
