use std::time::Instant;

use vibcorr::bath::BathParams;
use vibcorr::heom::{Integrator, PropagatorConfig, Propagator};
use vibcorr::model::{adiabatize, build_system, thermal_state, DriveField, VibronicParams};

fn main() {
    let p = VibronicParams::default();
    let bath = BathParams::default();
    let ops = build_system(&p).unwrap();
    let rho = thermal_state(&p, &adiabatize(&ops.h_s).unwrap()).unwrap();
    let t_end: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1000.0);
    let mut results = Vec::new();
    for (integrator, dt) in [
        (Integrator::LawsonRk4, 0.05),
        (Integrator::LawsonRk4, 0.025),
        (Integrator::Rk4, 0.05),
        (Integrator::Rk4, 0.025),
    ] {
        let cfg = PropagatorConfig { dt, integrator, record_stride: (1.0 / dt) as usize, ..PropagatorConfig::default() };
        let mut prop = Propagator::new(&ops, &bath, DriveField::from_params(&p), &cfg).unwrap();
        let mut s = prop.initial_state(&rho, 0.0).unwrap();
        let start = Instant::now();
        let mut pe = Vec::new();
        prop.propagate_with(&mut s, t_end, |_, st| pe.push(st.physical().excited_population())).unwrap();
        let secs = start.elapsed().as_secs_f64();
        println!("{integrator:?} dt={dt}: {:.2} s per ps, final Pe {:.10e}", secs / (t_end / 1000.0), pe.last().unwrap());
        results.push(pe);
    }
    let rel = |a: &Vec<f64>, b: &Vec<f64>| {
        let m = b.iter().cloned().fold(0.0, f64::max);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / m
    };
    println!("lawson halving rel diff {:.3e}", rel(&results[0], &results[1]));
    println!("rk4 halving rel diff {:.3e}", rel(&results[2], &results[3]));
    println!("lawson vs rk4 fine {:.3e}", rel(&results[1], &results[3]));
}
