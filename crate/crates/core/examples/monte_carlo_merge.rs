//! Paired Monte Carlo comparison of the two planners on the bundled merge.
//!
//! Usage: `monte_carlo_merge [runs] [seed]` (defaults 10 and 7).

use mpcc_warmstart::bench::load_scenario;
use mpcc_warmstart::sim::{monte_carlo, PlannerConfig, PlannerVariant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let runs: usize = args.first().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let seed: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let base = load_scenario("merge")?;
    let planners =
        [PlannerVariant::Baseline, PlannerVariant::LearningAided].map(PlannerConfig::new);
    let mc = monte_carlo(&base, runs, seed, &planners)?;

    print!("{}", mc.table.to_csv());
    println!();
    for row in &mc.table.rows {
        println!(
            "{:<15} success {:5.1}%  aborted {:5.1}%  collision {:5.1}%  converged {:5.1}%  avg cost {:9.2}  solve {:.1} ± {:.1} ms",
            row.variant,
            row.merge_success_pct,
            row.merge_aborted_pct,
            row.collision_pct,
            row.converged_pct,
            row.avg_cost,
            row.avg_solve_time_ms,
            row.std_solve_time_ms
        );
    }
    for (p, eps) in planners.iter().zip(&mc.episodes) {
        let outcomes: Vec<String> = eps.iter().map(|e| format!("{:?}", e.outcome)).collect();
        println!("{}: {}", p.variant.name(), outcomes.join(" "));
    }
    Ok(())
}
