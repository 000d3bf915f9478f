use gazebc::data::Dataset;
use gazebc::oracle::{run_demonstration, OracleParams};
use gazebc::policy::{train, PolicyConfig, TrainConfig};
use gazebc::world::{sample_configurations, SimSettings, WorldConfig};

#[test]
fn single_trajectory_is_memorised() {
    let world = WorldConfig::default_world();
    let cfg = sample_configurations(&world, 1, 0).unwrap()[0];
    let mut t = run_demonstration(&cfg, &world, 0, &OracleParams::default(), &SimSettings::default()).unwrap();
    t.steps.truncate(50);
    let pc = PolicyConfig::default();
    let data = Dataset::from_trajectories([&t], pc.width, pc.height, pc.hog).unwrap();
    let tc = TrainConfig { epochs: 200, ..Default::default() };
    let (_, logs) = train(pc, &data, &tc, |_| {}).unwrap();
    assert_eq!(logs.len(), 200);
    assert!(logs.iter().all(|l| l.batches == 1));
    let first = logs.iter().find(|l| l.bc_loss < 1e-3);
    assert!(first.is_some(), "final L_BC {}", logs[199].bc_loss);
    assert!(logs[0].bc_loss > 10.0 * logs[199].bc_loss);
}
