//! Learning curve of one run: retrieval metrics every 20 steps.
//!
//! `cargo run --release --example recipe -- seed=1 lambdas=0`

use hbfp::config::RunConfig;
use hbfp::pipeline::{evaluate_model, load_or_generate, Trainer};

fn main() -> hbfp::Result<()> {
    let mut cfg = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| hbfp::Error::Config(format!("expected key=value, got {arg}")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let ds = load_or_generate(&cfg)?;
    let start = std::time::Instant::now();
    let mut trainer = Trainer::new(&cfg, &ds)?;
    let total = cfg.total_steps();
    while trainer.steps_done() < total {
        let recs = trainer.run(20.min(total - trainer.steps_done()))?;
        let r = evaluate_model(&trainer.model, &ds, &cfg.eval_ranks)?;
        println!(
            "step {} loss {:.4} cmc1 {:.3} map {:.3} t {:.1}s",
            trainer.steps_done(),
            recs.last().map_or(f64::NAN, |r| r.loss.total),
            r.cmc_at(1).unwrap_or(f64::NAN),
            r.map,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
