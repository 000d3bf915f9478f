//! Flies the oracle over sampled configurations and prints summary statistics.

use gazebc::data::Outcome;
use gazebc::oracle::{run_demonstration, OracleParams};
use gazebc::world::{sample_configurations, SimSettings, WorldConfig};
use std::time::Instant;

fn main() {
    let count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let world = WorldConfig::default_world();
    let configs = sample_configurations(&world, count, 0).expect("enough pairs");
    let sim = SimSettings::default();
    let params = OracleParams::default();
    let start = Instant::now();
    let (mut ok, mut steps, mut collided, mut turning, mut total) = (0, 0, 0, 0usize, 0usize);
    let mut patterns = [0usize; 4];
    let mut failures = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        let t = run_demonstration(c, &world, i as u64, &params, &sim).expect("finite dynamics");
        if t.outcome == Outcome::Success {
            ok += 1;
            steps += t.steps.len();
        } else {
            failures.push((i, *c));
        }
        if t.steps.iter().any(|s| s.collision) {
            collided += 1;
        }
        for s in &t.steps {
            patterns[s.pattern as usize] += 1;
            total += 1;
            if s.action[3].abs() > 0.1 {
                turning += 1;
            }
        }
    }
    println!("success {ok}/{count}  mean steps (success) {:.1}", steps as f64 / ok.max(1) as f64);
    println!("trajectories with a collision: {collided}");
    println!("samples {total}, turning fraction {:.3}", turning as f64 / total as f64);
    println!("patterns [leading, target, saccade, obstacle] = {patterns:?}");
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    for f in failures {
        println!("failed {f:?}");
    }
}
