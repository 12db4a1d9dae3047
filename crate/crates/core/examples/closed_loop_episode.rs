//! Runs one closed-loop episode of a bundled scenario with both planners.
//!
//! Usage: `closed_loop_episode [merge|overtake|crossing|FILE] [seed] [csv dir]`

use std::path::PathBuf;

use mpcc_warmstart::bench::{episode_csv, load_scenario};
use mpcc_warmstart::sim::{config_hash, run_episode, PlannerConfig, PlannerVariant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base = load_scenario(args.first().map_or("crossing", String::as_str))?;
    let seed = args
        .get(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(base.seed);
    let csv_dir = args.get(2).map(PathBuf::from);
    let scn = base.sample(seed);
    let planners =
        [PlannerVariant::Baseline, PlannerVariant::LearningAided].map(PlannerConfig::new);
    let hash = config_hash(&base, &planners);

    for planner in &planners {
        let ep = run_episode(&scn, planner)?;
        let fallbacks = ep.steps.iter().filter(|s| s.fallback).count();
        let cost: f64 = ep.steps.iter().map(|s| s.cost).sum::<f64>() / ep.steps.len().max(1) as f64;
        println!(
            "{:<15} {:?} after {} steps ({:.1} s), mean cost {:.1}, {} fallbacks",
            planner.variant.name(),
            ep.outcome,
            ep.steps.len(),
            ep.steps.last().map_or(0.0, |s| s.t_s),
            cost,
            fallbacks
        );
        for s in ep.steps.iter().filter(|s| s.fallback).take(5) {
            println!(
                "    t {:.1}: {} -> shifted previous plan",
                s.t_s,
                s.status.name()
            );
        }
        if let Some(dir) = &csv_dir {
            std::fs::create_dir_all(dir)?;
            let f = dir.join(format!("{}_{}.csv", scn.name, planner.variant.name()));
            std::fs::write(&f, episode_csv(&ep, &hash))?;
            println!("    wrote {}", f.display());
        }
    }
    Ok(())
}
