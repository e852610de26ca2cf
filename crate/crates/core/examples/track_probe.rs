// Scratch probe: circle-tracking error distribution in lockstep mode.
use std::collections::HashMap;
use std::time::Duration;

use edge_mpc_core::controller::ControllerConfig;
use edge_mpc_core::lockstep::run_lockstep;
use edge_mpc_core::mission::{Phase, TrajectoryKind, TrajectorySpec};
use edge_mpc_core::plant::PlantConfig;
use edge_mpc_core::MpcConfig64;
use nalgebra::Vector3;

fn main() {
    let rate = 20.0;
    let duration = 100.0;
    let spec = TrajectorySpec {
        kind: TrajectoryKind::Circle,
        radius: 2.0,
        angular_rate: std::f64::consts::TAU / 100.0,
        center: Vector3::new(-2.0, 0.0, 1.0),
        altitude_rate: 0.0,
        duration,
    };
    let ctrl = ControllerConfig {
        rate,
        mpc: MpcConfig64 { dt: 1.0 / rate, ..MpcConfig64::default() },
        mission: spec,
        tolerance: 0.4,
        hover_dwell_s: 2.0,
        endpoint: "127.0.0.1:0".into(),
    };
    let art = run_lockstep(PlantConfig::default(), ctrl, Duration::ZERO, duration, true).unwrap();
    println!(
        "timed_out={} final_phase={:?} sim_s={:.1} wall={:?} cmds={} samples={}",
        art.timed_out,
        art.controller.final_phase,
        art.sim_duration_s,
        art.wall,
        art.controller.commands.len(),
        art.plant.trajectory.len()
    );

    let by_cycle: HashMap<u64, _> =
        art.controller.commands.iter().map(|c| (c.cycle, c)).collect();
    let tracking_start = art
        .controller
        .commands
        .iter()
        .find(|c| c.phase == Phase::Tracking || c.phase == Phase::Done)
        .map(|c| c.t_s)
        .unwrap_or(f64::MAX);
    println!("tracking starts at t={tracking_start:.2}s");

    let mut errors: Vec<(f64, f64)> = Vec::new();
    for row in &art.plant.trajectory {
        let Some(seq) = row.applied_cmd_seq else { continue };
        let cmd = by_cycle[&seq];
        if cmd.phase == Phase::Tracking || cmd.phase == Phase::Done {
            let err = (row.state.p - cmd.reference).norm();
            errors.push((row.t_s, err));
        }
    }
    let mut sorted: Vec<f64> = errors.iter().map(|e| e.1).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let pct = |p: f64| sorted[(p * (n - 1) as f64) as usize];
    println!(
        "tracking samples={} median={:.3} p90={:.3} p99={:.3} max={:.3}",
        n,
        pct(0.5),
        pct(0.9),
        pct(0.99),
        sorted[n - 1]
    );
    let over_04 = sorted.iter().filter(|e| **e > 0.4).count();
    println!("fraction over 0.4m: {:.4}", over_04 as f64 / n as f64);
    // where do the worst errors happen?
    let mut worst: Vec<&(f64, f64)> = errors.iter().collect();
    worst.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (t, e) in worst.iter().take(8) {
        println!("  worst at t={t:.2}s err={e:.3}");
    }
    // waypoint completion pace
    println!("done at waypoint index end; mission duration nominal {duration}s, sim {:.1}s", art.sim_duration_s);
}
