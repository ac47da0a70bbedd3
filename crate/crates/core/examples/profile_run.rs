use std::time::Instant;

use vibcorr::bath::BathParams;
use vibcorr::heom::{PropagatorConfig, Propagator};
use vibcorr::model::{adiabatize, build_system, thermal_state, DriveField, VibronicParams};

fn main() {
    let t_end: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(200.0);
    let p = VibronicParams::default();
    let ops = build_system(&p).unwrap();
    let rho = thermal_state(&p, &adiabatize(&ops.h_s).unwrap()).unwrap();
    let mut prop = Propagator::new(&ops, &BathParams::default(), DriveField::from_params(&p), &PropagatorConfig::default()).unwrap();
    let mut s = prop.initial_state(&rho, 0.0).unwrap();
    let start = Instant::now();
    prop.propagate_with(&mut s, t_end, |_, _| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("tiny {}", tiny_count(&s));
    println!("{:.2} s per ps; Pe {:.15e}", secs * 1000.0 / t_end, s.physical().excited_population());
}

#[allow(dead_code)]
fn tiny_count(s: &vibcorr::heom::AdoHierarchy) -> usize {
    s.as_slice().iter().filter(|z| (z.re != 0.0 && z.re.abs() < 1e-300) || (z.im != 0.0 && z.im.abs() < 1e-300)).count()
}
