//! Interrupt a run, save a checkpoint, resume it, and compare against the
//! uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use versatile_ffn::checkpoint::Checkpoint;
use versatile_ffn::commands::load_dataset;
use versatile_ffn::config::RunConfig;
use versatile_ffn::train::Trainer;

fn main() -> versatile_ffn::Result<()> {
    let mut cfg = RunConfig::from_toml(
        "d_model = 32\nd_hidden = 64\nn_layers = 1\nn_heads = 2\nmax_seq = 16\nn_experts = 4\n\
         d_expert = 16\nsteps = 40\nseq = 16\nsynth_bytes = 20000",
    )?;
    cfg.seed = 5;
    let data = load_dataset(&cfg)?;

    let mut full = Trainer::<f64>::new(cfg.model(), cfg.train())?;
    let mut reference = Vec::new();
    while !full.is_done() {
        let b = full.next_batch(&data.train);
        reference.push(full.train_step(&b)?);
    }

    let mut first = Trainer::<f64>::new(cfg.model(), cfg.train())?;
    while first.step() < 25 {
        let b = first.next_batch(&data.train);
        first.train_step(&b)?;
    }
    let path = std::env::temp_dir().join("vffn-example.ckpt");
    first.checkpoint().save(&path)?;
    println!("saved step {} to {} ({} bytes)", first.step(), path.display(), std::fs::metadata(&path)?.len());

    let ckpt = Checkpoint::<f64>::load(&path)?;
    let mut resumed = Trainer::resume(cfg.model(), cfg.train(), &ckpt)?;
    let mut identical = true;
    while !resumed.is_done() {
        let b = resumed.next_batch(&data.train);
        let m = resumed.train_step(&b)?;
        identical &= m == reference[m.step as usize];
    }
    println!("resumed steps 25..40 identical to the uninterrupted run: {identical}");

    // A single flipped byte is caught by the checksum.
    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    match Checkpoint::<f64>::from_bytes(&bytes) {
        Err(e) => println!("corrupted copy rejected: {e}"),
        Ok(_) => println!("corrupted copy loaded"),
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
