//! Default-model walk through detection, steady state and regression.

use std::time::Instant;

use vibcorr::correlations::*;
use vibcorr::*;

fn main() -> vibcorr::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let eta = args.first().copied().unwrap_or(5.0);
    let t_end = args.get(1).copied().unwrap_or(10.0);
    let params = VibronicParams::default();
    let bath = BathParams { eta, ..BathParams::default() };
    let basis = if std::env::var("ADIABATIC").is_ok() { PhononBasis::Adiabatic } else { PhononBasis::Diabatic };
    let sim = Simulator::with_phonon_basis(params.clone(), bath, PropagatorConfig::default(), basis)?;
    let clock = Instant::now();
    let snaps: Vec<f64> = (1..=(t_end * 2.0) as usize).map(|i| i as f64 * 0.5).collect();
    let run = sim.time_run(t_end, &snaps)?;
    println!("time run {:?}; trace err {:e} herm {:e}", clock.elapsed(), run.max_trace_error, run.max_hermiticity_error);
    let rule = ReferenceRule::for_model(&params);
    let mut refs = Vec::new();
    for d in Detector::ALL {
        let tr = run.detection(d);
        for i in (0..tr.len()).step_by(250) {
            print!("{:.2}:{:.5} ", tr.grid[i], tr.values[i]);
        }
        println!();
        let ss = steady_state_time(&tr, &rule);
        let r = normalization_reference(&tr, eta, &rule);
        println!("{d}: t_ss {ss:?} reference {r:?}");
        refs.push(r.map(|r| r.value).unwrap_or(f64::NAN));
    }
    let cross = run.coincidence(Detector::Photon, Detector::Phonon);
    let cross2 = run.coincidence(Detector::Phonon, Detector::Photon);
    let worst = cross.values.iter().zip(&cross2.values).map(|(a, b)| (a - b).abs() / a.abs().max(1e-300)).fold(0.0, f64::max);
    println!("cross symmetry worst rel {worst:e}");
    let anchor_t = args.get(2).copied().unwrap_or(5.0);
    let Some(anchor) = run.snapshot_at(anchor_t) else { return Ok(()) };
    for first in Detector::ALL {
        let reg = sim.regress(anchor, first, 4.0)?;
        for second in Detector::ALL {
            let g = reg.g2(second, refs[first as usize], refs[second as usize]);
            let cls = classify_bunching(&g, rule.average_ps)?;
            let spec = spectrum(&g)?;
            let peak = spec.peak_near(500.0, 50.0);
            let n = g.len();
            let small: f64 = g.values[..30].iter().sum::<f64>() / 30.0;
            let plateau: f64 = g.values[n - 1000..].iter().sum::<f64>() / 1000.0;
            println!("{first}->{second}: g(0) {:.5} {cls:?} peak {peak:?} small-tau mean {small:.5} plateau {plateau:.5}", g.values[0]);
            for i in (0..n).step_by(100) {
                print!("{:.3} ", g.values[i]);
            }
            println!();
        }
    }
    println!("total {:?}", clock.elapsed());
    Ok(())
}
