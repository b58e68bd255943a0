//! Multi-seed comparison of task-aware pruning against the general-only
//! baseline on synthetic task pairs.
//!
//! Usage: `cargo run --release -p taskprune --example trend [seeds] [channels] [steps] [lr]`

use std::time::Instant;

use taskprune::evaluation::DEFAULT_ALPHA_GRID;
use taskprune::prelude::*;
use taskprune::synthetic::PairShape;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let seeds = arg(0, 10.0) as u64;
    let channels = arg(1, 32.0) as usize;
    let steps = arg(2, 600.0) as usize;
    let lr = arg(3, 0.2);
    let hidden = arg(4, 64.0) as usize;
    let start = Instant::now();
    let (mut wins, mut fluent) = (0, 0);
    for seed in 0..seeds {
        let pair = taskprune::synthetic::generate_task_pair_with(seed, 0.5, channels, &PairShape::default())?;
        let init = pair.planted_model(&[hidden, hidden], Nonlinearity::Relu, seed)?;
        let cfg = TrainConfig { steps, lr, batch_size: 64, train_embedding: false, seed };
        let (model, rep) = taskprune::train::train_model(&init, &pair.combined_train(), &cfg)?;
        let opts = CompareOptions { seed, ..CompareOptions::default() };
        let table = compare_methods(
            &pair,
            &model,
            &SparsitySpec::unstructured(0.5, Scope::Layer)?,
            &DEFAULT_ALPHA_GRID,
            &opts,
        )?;
        let dense = table.row("dense").unwrap();
        let base = table.row("wanda").unwrap();
        let ta = table.selected();
        let degr = (ta.perplexity_general - base.perplexity_general) / base.perplexity_general;
        wins += (ta.task_loss <= base.task_loss) as u32;
        fluent += (degr <= 0.10) as u32;
        println!(
            "seed {seed}: train {:.3} dense task {:.3} wanda task {:.3} ta task {:.3} (a={}) | ppl_g dense {:.2} wanda {:.2} ta {:.2} degr {:+.3}",
            rep.final_loss, dense.task_loss, base.task_loss, ta.task_loss, table.selected_alpha,
            dense.perplexity_general, base.perplexity_general, ta.perplexity_general, degr
        );
    }
    println!("task wins {wins}/{seeds}, fluency kept {fluent}/{seeds}, {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
