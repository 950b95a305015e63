//! Parameter and FFN FLOPs budgets for the bundled architecture configs.
//!
//! cargo run --example budget_table

use std::path::Path;

use versatile_ffn::accounting::{render_table, versatile_runtime_flops, ffn_flops_dense, ffn_flops_moe};
use versatile_ffn::commands::cmd_account;
use versatile_ffn::config::RunConfig;

fn main() -> versatile_ffn::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["budget_354m.toml", "budget_720m.toml", "desk.toml"] {
        let cfg = RunConfig::load(&dir.join(name))?;
        println!("== {name}");
        print!("{}", render_table(&cmd_account(&cfg, None)?));
        println!();
    }

    // Runtime cost for a hypothetical loop profile: on average 3.2 loops,
    // with 70% of (token, layer) pairs exiting before the maximum.
    let spec = RunConfig::load(&dir.join("budget_354m.toml"))?.arch();
    let (base, moe) = (ffn_flops_dense(&spec), ffn_flops_moe(&spec));
    let flops = versatile_runtime_flops(base, moe, 3.2, 0.7, spec.max_loops)?;
    println!("n_mean 3.2, p_frac 0.7 -> {flops:.2}M FFN FLOPs per token");
    Ok(())
}
