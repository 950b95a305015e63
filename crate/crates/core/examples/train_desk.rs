//! Short training run on the synthetic easy/hard corpus, then an
//! inference-mode evaluation.
//!
//! cargo run --release --example train_desk -- [steps]

use versatile_ffn::commands::load_dataset;
use versatile_ffn::config::RunConfig;
use versatile_ffn::eval::evaluate;
use versatile_ffn::train::Trainer;

fn main() -> versatile_ffn::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.toml");
    let mut cfg = RunConfig::load(path.as_ref())?;
    cfg.steps = steps;
    let data = load_dataset(&cfg)?;

    let mut trainer = Trainer::<f64>::new(cfg.model(), cfg.train())?;
    println!("{} parameters", trainer.model.params.numel());
    while !trainer.is_done() {
        let batch = trainer.next_batch(&data.train);
        let m = trainer.train_step(&batch)?;
        if m.step % 50 == 0 || trainer.is_done() {
            println!(
                "step {:>5}  loss {:.3}  lr {:.2e}  tau {:.3}  E[L] {:.2?}  lambda {:.2?}",
                m.step, m.loss, m.lr, m.tau, m.mean_expected_loops, m.mean_lambda
            );
        }
    }

    let report = evaluate(&trainer.model, &data.eval, data.eval_labels.as_deref(), &cfg.eval_options())?;
    println!("eval loss {:.3} over {} tokens", report.loss, report.tokens);
    println!("mean loops per layer {:.3?}", report.mean_loops);
    println!("n_mean {:.3}, p_frac {:.3}", report.n_mean, report.p_frac);
    println!("expert load {:.3?}", report.expert_load);
    if let Some(rho) = report.spearman {
        println!("rank correlation between difficulty label and loops: {rho:.3}");
    }
    Ok(())
}
