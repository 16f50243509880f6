use nalgebra::Vector3;
use shuttlekit::filter::{discretize, AnalogChain};
use shuttlekit::synth::*;
use shuttlekit::trajectory::{generate_trajectory, TransportProfile};
use shuttlekit::trap::*;

fn main() {
    let model = make_toy_trap(7, 280e-6, 200e-6, 2e5, 100.0).unwrap();
    let omega = 2.0 * std::f64::consts::PI * 230e3;
    let plan = generate_trajectory(280e-6, 12.8e-6, 80e-9, TransportProfile::Poly5)
        .unwrap()
        .with_start(Vector3::new(3.0 * 280e-6, 0.0, 0.0))
        .with_axial_frequency(omega);
    let spec = discretize(&AnalogChain::paper_default(), 80e-9).unwrap();
    let offsets = MicromotionOffsets::zero(model.n_electrodes());
    let cases = [
        ("tie0 damp0", 0.0, 0.0),
        ("tie0 damp1", 0.0, 1.0),
        ("tie1e-3 damp0", 1e-3, 0.0),
        ("tie1e-3 damp1", 1e-3, 1.0),
    ];
    for (name, tie, damp) in cases {
        let config = SynthesisConfig {
            tie_weight: tie,
            slew_damping: damp,
            smoothing_passes: 2,
            ..SynthesisConfig::default()
        };
        match synthesize(&model, &plan, &spec, &offsets, &config) {
            Err(e) => println!("{name}: error {e}"),
            Ok(ramp) => {
                let cycle = ramp.cycle_source();
                let umax = cycle.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
                // Deviation of achieved ideal path from the smooth static path.
                let diag = verify_ramp(&ramp, &model, &plan).unwrap();
                println!(
                    "{name}: pos={:.2e} omg={:.2e} nonconv={} max|src|={:.2}",
                    diag.max_position_error,
                    diag.max_axial_freq_rel_error,
                    diag.non_converged_steps,
                    umax
                );
            }
        }
    }
}
