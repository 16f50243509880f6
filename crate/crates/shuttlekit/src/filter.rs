//! Discrete model of the dc-electrode low-pass electronics.
//!
//! The filter is the strictly causal rational recursion
//!
//! `sum_{n=0}^{na} a_n U_{i-n} = sum_{n=1}^{nb} b_n S_{i-n}`
//!
//! between source voltages `S` (at the waveform generator) and electrode
//! voltages `U` (behind the filters). `b_0` is identically zero, so the
//! output lags the input by one sample. The module provides the forward
//! recursion, its exact algebraic inverse (pre-compensation), and the
//! reachable electrode-voltage interval given a source slew limit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One first-order RC low-pass stage.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RcStage {
    /// Resistance in ohm.
    pub resistance: f64,
    /// Capacitance in farad.
    pub capacitance: f64,
}

/// The analog filter chain: a cascade of buffered first-order RC stages plus
/// the pole formed by the last stage's resistor and the trap capacitance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalogChain {
    pub stages: Vec<RcStage>,
    /// Trap capacitance in farad; forms an extra pole with the last stage's
    /// resistance.
    pub trap_capacitance: f64,
}

impl AnalogChain {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(invalid("analog chain needs at least one RC stage"));
        }
        for s in &self.stages {
            if !(s.resistance > 0.0) || !(s.capacitance > 0.0) {
                return Err(invalid("RC stage values must be positive"));
            }
        }
        if self.trap_capacitance < 0.0 {
            return Err(invalid("trap capacitance must be nonnegative"));
        }
        Ok(())
    }

    /// Pole time constants in seconds.
    pub fn time_constants(&self) -> Vec<f64> {
        let mut taus: Vec<f64> = self
            .stages
            .iter()
            .map(|s| s.resistance * s.capacitance)
            .collect();
        if self.trap_capacitance > 0.0 {
            let r_last = self.stages.last().unwrap().resistance;
            taus.push(r_last * self.trap_capacitance);
        }
        taus
    }

    /// Continuous-time magnitude response at frequency `f` in Hz.
    pub fn magnitude(&self, f: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f;
        self.time_constants()
            .iter()
            .map(|tau| 1.0 / (1.0 + (w * tau).powi(2)).sqrt())
            .product()
    }

    /// Composite -3 dB frequency of the cascade, by bisection.
    pub fn cutoff_frequency(&self) -> f64 {
        let target = std::f64::consts::FRAC_1_SQRT_2;
        let (mut lo, mut hi) = (1e-3f64, 1e12f64);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if self.magnitude(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    }

    /// The stand-in configuration for the experiment's unpublished filter:
    /// three equal pre-stages plus a trap-capacitance pole one octave higher,
    /// fitted so the composite cutoff is 63.2 kHz.
    pub fn paper_default() -> AnalogChain {
        let r = 10e3;
        // Composite cutoff is proportional to 1/tau; one bisection on tau.
        let chain_for = |tau: f64| AnalogChain {
            stages: vec![
                RcStage {
                    resistance: r,
                    capacitance: tau / r,
                };
                3
            ],
            trap_capacitance: 0.5 * tau / r,
        };
        let (mut lo, mut hi) = (1e-9f64, 1.0f64);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if chain_for(mid).cutoff_frequency() > 63.2e3 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        chain_for((lo * hi).sqrt())
    }
}

/// Discrete filter coefficients with sample period `dt`.
///
/// `a` holds `a_0..a_na` (normalized to `a_0 = 1`), `b` holds `b_0..b_nb`
/// with `b_0 = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSpec {
    a: Vec<f64>,
    b: Vec<f64>,
    pub dt: f64,
}

impl FilterSpec {
    pub fn new(a: Vec<f64>, b: Vec<f64>, dt: f64) -> Result<FilterSpec> {
        if a.is_empty() || b.len() < 2 {
            return Err(invalid("filter orders must be at least 1"));
        }
        if a[0] == 0.0 {
            return Err(invalid("a_0 must be nonzero"));
        }
        if b[0] != 0.0 {
            return Err(invalid("b_0 must be identically zero (strictly causal filter)"));
        }
        if b[1] == 0.0 {
            return Err(invalid("b_1 must be nonzero (invertible one-step recursion)"));
        }
        let spec = FilterSpec { a, b, dt };
        let (sa, sb) = (spec.a.iter().sum::<f64>(), spec.b.iter().sum::<f64>());
        if (sb / sa - 1.0).abs() > 1e-9 {
            return Err(invalid(format!(
                "static gain {} deviates from unity by more than 1e-9",
                sb / sa
            )));
        }
        Ok(spec)
    }

    pub fn feedback_order(&self) -> usize {
        self.a.len() - 1
    }

    pub fn feedforward_order(&self) -> usize {
        self.b.len() - 1
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Steady-state source value that holds the electrodes at `u`.
    pub fn steady_input(&self, u: f64) -> f64 {
        u * self.a.iter().sum::<f64>() / self.b.iter().sum::<f64>()
    }

    /// Short fingerprint of the coefficients, for ramp manifests.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.a.iter().chain(self.b.iter()).chain([&self.dt]) {
            h.update(v.to_le_bytes());
        }
        hex_prefix(&h.finalize(), 6)
    }

    /// Magnitude (dB) and phase (degrees) of the discrete transfer function
    /// at frequency `f` in Hz.
    pub fn bode(&self, f: f64) -> Result<BodePoint> {
        let nyquist = 0.5 / self.dt;
        if !(f > 0.0) || f >= nyquist {
            return Err(invalid(format!(
                "frequency {f} Hz outside (0, {nyquist} Hz)"
            )));
        }
        let theta = 2.0 * std::f64::consts::PI * f * self.dt;
        let eval = |coeffs: &[f64]| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &c) in coeffs.iter().enumerate() {
                re += c * (theta * n as f64).cos();
                im -= c * (theta * n as f64).sin();
            }
            (re, im)
        };
        let (br, bi) = eval(&self.b);
        let (ar, ai) = eval(&self.a);
        let den = ar * ar + ai * ai;
        let re = (br * ar + bi * ai) / den;
        let im = (bi * ar - br * ai) / den;
        let mag = (re * re + im * im).sqrt();
        Ok(BodePoint {
            frequency: f,
            magnitude_db: 20.0 * mag.log10(),
            phase_deg: im.atan2(re).to_degrees(),
        })
    }

    /// Electrode-voltage resolution floor of the plain-f64 forward
    /// recursion at a given voltage scale.
    ///
    /// The forward sum carries a deterministic rounding bias that the slow
    /// pole integrates up to ~`bias * a_0 / sum(a)`; target increments below
    /// this cannot be distinguished from that drift, and chasing them with
    /// the stiff inverse (gain `a_0/b_1`) seeds growing Nyquist modes.
    pub fn resolution_deadband(&self, voltage_scale: f64) -> f64 {
        let coeff_mass: f64 = self.a.iter().chain(self.b.iter()).map(|c| c.abs()).sum();
        let stiffness = (self.a[0] / self.a.iter().sum::<f64>()).abs();
        2.0 * f64::EPSILON * coeff_mass * stiffness * voltage_scale.abs().max(1.0)
    }

    /// Discrete -3 dB frequency by bisection on the magnitude response.
    pub fn cutoff_frequency(&self) -> f64 {
        let (mut lo, mut hi) = (1e-3, 0.5 / self.dt * (1.0 - 1e-9));
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if self.bode(mid).map(|b| b.magnitude_db).unwrap_or(-1e9) > -3.010_299_956_639_812 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BodePoint {
    pub frequency: f64,
    pub magnitude_db: f64,
    pub phase_deg: f64,
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Convolve two polynomial coefficient lists.
fn conv(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            out[i + j] += pi * qj;
        }
    }
    out
}

/// Map the analog chain to discrete coefficients.
///
/// Poles are mapped by the bilinear transform; the numerator is the
/// one-sample-delayed binomial `K z^-1 (1 + z^-1)^(n-1)` with `K` fixed by
/// unity static gain. This keeps the recursion strictly causal (`b_0 = 0`,
/// as the electronics behave) and places all numerator zeros at z = -1, so
/// the inverse recursion has no growing modes.
pub fn discretize(chain: &AnalogChain, dt: f64) -> Result<FilterSpec> {
    chain.validate()?;
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    let taus = chain.time_constants();
    let n = taus.len();

    let mut a = vec![1.0];
    for tau in &taus {
        let g = 2.0 * tau / dt;
        a = conv(&a, &[1.0 + g, 1.0 - g]);
    }

    let mut binom = vec![1.0];
    for _ in 0..n - 1 {
        binom = conv(&binom, &[1.0, 1.0]);
    }
    let sum_a: f64 = a.iter().sum();
    let k = sum_a / 2f64.powi(n as i32 - 1);
    let mut b = vec![0.0];
    b.extend(binom.iter().map(|c| k * c));

    // Normalize a_0 = 1 and pin the static gain exactly.
    let a0 = a[0];
    for v in &mut a {
        *v /= a0;
    }
    for v in &mut b {
        *v /= a0;
    }
    let gain = a.iter().sum::<f64>() / b.iter().sum::<f64>();
    for v in &mut b {
        *v *= gain;
    }

    FilterSpec::new(a, b, dt)
}

/// Rolling filter history.
///
/// `src[0]` is the most recent committed source sample, `el[0]` the most
/// recent committed electrode sample. In the forward discipline
/// ([`FilterState::step`]) both lists advance together; in the synthesis
/// discipline the next source sample is still free and
/// [`FilterState::reachable`] / [`FilterState::source_for_target`] quantify
/// what the next electrode sample can be.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    src: Vec<f64>,
    el: Vec<f64>,
}

impl FilterState {
    /// All histories zero.
    pub fn zero(spec: &FilterSpec) -> FilterState {
        FilterState {
            src: vec![0.0; spec.feedforward_order()],
            el: vec![0.0; spec.feedback_order()],
        }
    }

    /// Steady state holding the electrodes at `u`.
    pub fn steady(spec: &FilterSpec, u: f64) -> FilterState {
        FilterState {
            src: vec![spec.steady_input(u); spec.feedforward_order()],
            el: vec![u; spec.feedback_order()],
        }
    }

    pub fn from_histories(spec: &FilterSpec, src: Vec<f64>, el: Vec<f64>) -> Result<FilterState> {
        if src.len() != spec.feedforward_order() || el.len() != spec.feedback_order() {
            return Err(invalid("history lengths must equal the filter orders"));
        }
        Ok(FilterState { src, el })
    }

    pub fn last_source(&self) -> f64 {
        self.src[0]
    }

    pub fn last_electrode(&self) -> f64 {
        self.el[0]
    }

    /// The electrode sample already determined by the committed histories
    /// (the output is one step behind the input).
    pub fn next_output(&self, spec: &FilterSpec) -> f64 {
        let mut acc = 0.0;
        for (n, &bn) in spec.b.iter().enumerate().skip(1) {
            acc += bn * self.src[n - 1];
        }
        for (n, &an) in spec.a.iter().enumerate().skip(1) {
            acc -= an * self.el[n - 1];
        }
        acc / spec.a[0]
    }

    /// Forward discipline: commit the next source sample, returning the
    /// electrode sample it cannot influence.
    pub fn step(&mut self, spec: &FilterSpec, source: f64) -> f64 {
        let u = self.next_output(spec);
        self.push(source, u);
        u
    }

    fn push(&mut self, source: f64, electrode: f64) {
        self.src.rotate_right(1);
        self.src[0] = source;
        self.el.rotate_right(1);
        self.el[0] = electrode;
    }

    /// Synthesis discipline: electrode voltage at the *next* sample if the
    /// next source sample repeats the last committed one.
    pub fn held_output(&self, spec: &FilterSpec) -> f64 {
        let (hi, lo) = self.held_output_dd(spec);
        hi + lo
    }

    /// Held output in double-double precision. The inverse step multiplies
    /// the distance to the held output by `a_0/b_1` (~2.6e5 for the paper
    /// chain), so plain-f64 rounding of this sum would seed the inverse
    /// recursion's marginally stable Nyquist modes, which grow ~ i^2 along
    /// a ramp.
    fn held_output_dd(&self, spec: &FilterSpec) -> (f64, f64) {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        let mut terms = Vec::with_capacity(spec.a.len() + spec.b.len());
        terms.push(two_prod(spec.b[1], self.src[0]));
        for (n, &bn) in spec.b.iter().enumerate().skip(2) {
            terms.push(two_prod(bn, self.src[n - 2]));
        }
        for (n, &an) in spec.a.iter().enumerate().skip(1) {
            terms.push(two_prod(-an, self.el[n - 1]));
        }
        for (p, e) in terms {
            let (s, carry) = two_sum(sum, p);
            sum = s;
            comp += carry + e;
        }
        // a_0 is normalized to 1 at construction; divide defensively anyway.
        let hi = sum + comp;
        let lo = (sum - hi) + comp;
        (hi / spec.a[0], lo / spec.a[0])
    }

    /// Synthesis discipline: electrode voltage at the *next* sample if the
    /// next source sample is `x` (the histories shift by one underneath).
    ///
    /// Formulated incrementally around [`FilterState::held_output`]: the
    /// forward recursion attenuates by `b_1/a_0` (about 4e-6 at the
    /// experiment's rates), so the naive rearrangement of the recursion
    /// loses ~8 digits to cancellation when inverted.
    pub fn output_for_candidate(&self, spec: &FilterSpec, x: f64) -> f64 {
        self.held_output(spec) + spec.b[1] / spec.a[0] * (x - self.src[0])
    }

    /// Synthesis discipline: the source sample required so that the next
    /// electrode sample equals `u`.
    ///
    /// Increments below the f64 resolution of the forward recursion are
    /// snapped to a held source. Without the deadband, one-ulp noise in the
    /// held output (amplified by `a_0/b_1`) seeds the inverse recursion's
    /// marginally stable Nyquist modes, which grow polynomially along a
    /// ramp; with it, a settled target holds the source exactly.
    pub fn source_for_target(&self, spec: &FilterSpec, u: f64) -> f64 {
        let (held_hi, held_lo) = self.held_output_dd(spec);
        let du = (u - held_hi) - held_lo;
        let scale = self
            .src
            .iter()
            .chain(self.el.iter())
            .fold(u.abs(), |m, v| m.max(v.abs()));
        if du.abs() <= spec.resolution_deadband(scale) {
            self.src[0]
        } else {
            (spec.a[0] / spec.b[1]).mul_add(du, self.src[0])
        }
    }

    /// Synthesis discipline: commit the chosen (source, electrode) pair.
    pub fn commit(&mut self, source: f64, electrode: f64) {
        self.push(source, electrode);
    }

    /// Synthesis discipline: commit the next source sample and pair it with
    /// the electrode value the forward recursion actually produces.
    ///
    /// This evaluates the same expression as [`FilterState::step`] on the
    /// same history floats, so a later [`apply_forward`] replay of the
    /// committed source sequence reproduces the committed electrode
    /// sequence bit for bit.
    pub fn commit_forward(&mut self, spec: &FilterSpec, source: f64) -> f64 {
        self.src.rotate_right(1);
        self.src[0] = source;
        let u = self.next_output(spec);
        self.el.rotate_right(1);
        self.el[0] = u;
        u
    }
}

/// Absolute roundoff bound of the one-step inverse recursion at a given
/// voltage scale: the summed coefficient magnitudes set the size of the
/// intermediate terms, and dividing by `b_1` amplifies their rounding. For
/// the 4-pole 63.2 kHz chain at 80 ns the factor is ~3e6 ulps, so this, not
/// 1e-12 V, limits how exactly a boundary voltage can be back-solved from an
/// f64 interval bound.
pub fn inverse_roundoff_bound(spec: &FilterSpec, voltage_scale: f64) -> f64 {
    let coeff_mass: f64 = spec.a.iter().chain(spec.b.iter()).map(|c| c.abs()).sum();
    coeff_mass / spec.b[1].abs() * f64::EPSILON * voltage_scale.abs().max(1.0)
}

/// Range of the next possible electrode voltage given the source slew limit
/// `d_source`, shifted by `-offset` (micromotion-compensation adjustment).
pub fn reachable_interval(
    spec: &FilterSpec,
    state: &FilterState,
    d_source: f64,
    offset: f64,
) -> Result<(f64, f64)> {
    if !(d_source >= 0.0) {
        return Err(invalid("source slew limit must be nonnegative"));
    }
    let base = state.last_source();
    let u1 = state.output_for_candidate(spec, base - d_source);
    let u2 = state.output_for_candidate(spec, base + d_source);
    Ok((u1.min(u2) - offset, u1.max(u2) - offset))
}

/// Run the filter forward over a source sequence from `init`.
pub fn apply_forward(spec: &FilterSpec, source: &[f64], init: &FilterState) -> Vec<f64> {
    let mut state = init.clone();
    source.iter().map(|&s| state.step(spec, s)).collect()
}

/// Exact algebraic inverse of [`apply_forward`]: the source sequence whose
/// filtered output reproduces `target`.
///
/// `target[0]` must be the free-evolution output of `init` (for example
/// `init = FilterState::steady(spec, target[0])`); the first source sample
/// influences `target[1]`. The last returned sample is a hold value chosen
/// as if the target continued at its final voltage.
pub fn precompensate(spec: &FilterSpec, target: &[f64], init: &FilterState) -> Vec<f64> {
    let n = target.len();
    if n == 0 {
        return Vec::new();
    }
    // Shift into the synthesis phase: target[0] is already committed.
    let mut el = vec![target[0]];
    el.extend_from_slice(&init.el[..init.el.len() - 1]);
    let mut state = FilterState {
        src: init.src.clone(),
        el,
    };
    let mut source = Vec::with_capacity(n);
    for i in 1..=n {
        // Virtual continuation: the hold sample keeps the final voltage.
        let u = target[i.min(n - 1)];
        let x = state.source_for_target(spec, u);
        // Committing the forward-consistent electrode value keeps the walk
        // anchored to what a replay will compute, so one-step roundoff does
        // not accumulate through the recursion's stiff dc mode.
        state.commit_forward(spec, x);
        source.push(x);
    }
    source
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn paper_spec() -> FilterSpec {
        discretize(&AnalogChain::paper_default(), 80e-9).unwrap()
    }

    #[test]
    fn paper_chain_composite_cutoff_is_63_2_khz() {
        let chain = AnalogChain::paper_default();
        assert_relative_eq!(chain.cutoff_frequency(), 63.2e3, max_relative = 1e-6);
        assert_eq!(chain.time_constants().len(), 4);
    }

    #[test]
    fn four_poles_give_order_four() {
        let spec = paper_spec();
        assert_eq!(spec.feedback_order(), 4);
        assert_eq!(spec.feedforward_order(), 4);
        assert_eq!(spec.b()[0], 0.0);
        assert!(spec.b()[1] != 0.0);
    }

    #[test]
    fn discrete_cutoff_tracks_continuous_chain() {
        let chain = AnalogChain::paper_default();
        let spec = discretize(&chain, 80e-9).unwrap();
        let fc_cont = chain.cutoff_frequency();
        let fc_disc = spec.cutoff_frequency();
        assert!(
            (fc_disc / fc_cont - 1.0).abs() < 0.02,
            "discrete cutoff {fc_disc} vs continuous {fc_cont}"
        );
    }

    #[test]
    fn single_stage_magnitude_at_cutoff() {
        // 2*pi*R*C = 1/(63.2 kHz) => analog cutoff at 63.2 kHz.
        let rc = 1.0 / (2.0 * std::f64::consts::PI * 63.2e3);
        let chain = AnalogChain {
            stages: vec![RcStage {
                resistance: 1e4,
                capacitance: rc / 1e4,
            }],
            trap_capacitance: 0.0,
        };
        let spec = discretize(&chain, 80e-9).unwrap();
        assert_eq!(spec.feedback_order(), 1);
        let mag = 10f64.powf(spec.bode(63.2e3).unwrap().magnitude_db / 20.0);
        assert!(
            (mag / std::f64::consts::FRAC_1_SQRT_2 - 1.0).abs() < 0.01,
            "expected |G| ~ 1/sqrt(2), got {mag}"
        );
    }

    #[test]
    fn bode_dc_limit_and_monotonicity() {
        let spec = paper_spec();
        let low = spec.bode(0.5).unwrap();
        assert!(low.magnitude_db.abs() < 1e-3);
        assert!(low.phase_deg.abs() < 0.1);
        let mut prev = f64::INFINITY;
        for k in 1..200 {
            let f = 10f64.powf(1.0 + 5.0 * k as f64 / 200.0);
            let m = spec.bode(f).unwrap().magnitude_db;
            assert!(m <= prev + 1e-9, "magnitude must decrease, {m} after {prev}");
            prev = m;
        }
        let fc = spec.cutoff_frequency();
        assert!((spec.bode(fc).unwrap().magnitude_db + 3.01).abs() < 0.1);
        assert!(spec.bode(0.0).is_err());
        assert!(spec.bode(0.5 / spec.dt).is_err());
    }

    #[test]
    fn zero_history_zero_input_stays_zero() {
        let spec = paper_spec();
        let out = apply_forward(&spec, &[0.0; 32], &FilterState::zero(&spec));
        assert!(out.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn dc_gain_passes_constant() {
        let spec = paper_spec();
        let init = FilterState::steady(&spec, 2.5);
        let out = apply_forward(&spec, &[spec.steady_input(2.5); 64], &init);
        for u in out {
            assert_relative_eq!(u, 2.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn unit_step_appears_one_sample_late_with_weight_b1() {
        // Recursion unrolled by hand: with all-zero history and S = 1 from
        // sample 0, U_0 = 0 and U_1 = b_1 / a_0.
        let spec = paper_spec();
        let out = apply_forward(&spec, &[1.0; 8], &FilterState::zero(&spec));
        assert_eq!(out[0], 0.0);
        assert_relative_eq!(out[1], spec.b()[1] / spec.a()[0], epsilon = 1e-15);
    }

    #[test]
    fn output_is_one_step_behind_input() {
        let spec = paper_spec();
        let init = FilterState::steady(&spec, 1.0);
        let mut s1 = vec![1.0; 20];
        let mut s2 = s1.clone();
        s2[7] += 0.5;
        let o1 = apply_forward(&spec, &s1, &init);
        let o2 = apply_forward(&spec, &s2, &init);
        assert_eq!(o1[7], o2[7], "sample 7 must not react to its own input");
        assert!((o1[8] - o2[8]).abs() > 0.0);
        s1[19] += 1.0;
        let o3 = apply_forward(&spec, &s1, &init);
        assert_eq!(o3[..19], o1[..19]);
    }

    #[test]
    fn precompensate_constant_from_steady_is_constant() {
        let spec = paper_spec();
        let init = FilterState::steady(&spec, -1.2);
        let src = precompensate(&spec, &[-1.2; 40], &init);
        // Source samples carry the one-step inverse roundoff (the stiff
        // chain amplifies one ulp of electrode voltage by a_0/b_1); the
        // electrodes they produce sit at -1.2 V to machine precision.
        for s in &src {
            assert_relative_eq!(*s, -1.2, epsilon = 1e-12);
        }
        // The replayed electrodes carry only the forward recursion's own
        // slow-pole rounding drift (a few 1e-12 V at this scale).
        let out = apply_forward(&spec, &src, &init);
        for u in out {
            assert_relative_eq!(u, -1.2, epsilon = 1e-10);
        }
    }

    #[test]
    fn forward_after_inverse_reproduces_smooth_ramp() {
        use rand::{Rng, SeedableRng};
        let spec = paper_spec();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        // Smooth random ramp: low-order Fourier content only. The exact
        // inverse of a relative-degree-4 low-pass amplifies content at the
        // Nyquist rate without bound, so rough targets are out of scope.
        let n = 160;
        let mut target = vec![0.0; n];
        let base: f64 = rng.gen_range(-2.0..2.0);
        for h in 1..6 {
            let amp: f64 = rng.gen_range(-1.0..1.0);
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for (i, t) in target.iter_mut().enumerate() {
                *t += amp * (std::f64::consts::TAU * h as f64 * i as f64 / n as f64 + ph).sin();
            }
        }
        for t in &mut target {
            *t += base;
        }
        let t0 = target[0];
        let init = FilterState::steady(&spec, t0);
        let src = precompensate(&spec, &target, &init);
        let out = apply_forward(&spec, &src, &init);
        for (u, t) in out.iter().zip(&target) {
            assert!((u - t).abs() < 1e-9, "roundtrip error {}", (u - t).abs());
        }
    }

    #[test]
    fn step_target_needs_source_overshoot() {
        let spec = paper_spec();
        let init = FilterState::steady(&spec, 0.0);
        let mut target = vec![0.0; 24];
        for t in target.iter_mut().skip(1) {
            *t = 1.0;
        }
        let src = precompensate(&spec, &target, &init);
        let max_src = src.iter().cloned().fold(f64::MIN, f64::max);
        let max_u = target.iter().cloned().fold(f64::MIN, f64::max);
        assert!(
            max_src > max_u,
            "inverting a low-pass must overshoot: {max_src} <= {max_u}"
        );
    }

    #[test]
    fn reachable_interval_shapes() {
        let spec = paper_spec();

        // Degenerate slew: the interval collapses onto the free evolution.
        let state = FilterState::steady(&spec, 0.7);
        let (lo, hi) = reachable_interval(&spec, &state, 0.0, 0.0).unwrap();
        assert_eq!(lo, hi);
        assert_relative_eq!(lo, 0.7, epsilon = 1e-12);

        // All-zero history: interval is +/- (b_1/a_0) * d_source.
        let zero = FilterState::zero(&spec);
        let d = 0.35;
        let (lo, hi) = reachable_interval(&spec, &zero, d, 0.0).unwrap();
        let expect = spec.b()[1] / spec.a()[0] * d;
        assert_relative_eq!(hi, expect, epsilon = 1e-15);
        assert_relative_eq!(lo, -expect, epsilon = 1e-15);

        // A positive offset shifts both bounds down by exactly that amount.
        let (lo2, hi2) = reachable_interval(&spec, &zero, d, 0.1).unwrap();
        assert_relative_eq!(lo2, lo - 0.1, epsilon = 1e-15);
        assert_relative_eq!(hi2, hi - 0.1, epsilon = 1e-15);
    }

    #[test]
    fn boundary_output_back_solves_to_exact_slew() {
        use rand::{Rng, SeedableRng};
        // Mild chain (single pole): the back-solve recovers the slew limit
        // to well below 1e-12 V. For the stiff 4-pole chain the same
        // algebra holds but one ulp of the f64 interval bound is worth
        // a_0/b_1 ~ 2.6e5 ulps of source voltage, so the achievable bound
        // is inverse_roundoff_bound instead.
        let rc = 1.0 / (2.0 * std::f64::consts::PI * 63.2e3);
        let mild = discretize(
            &AnalogChain {
                stages: vec![RcStage {
                    resistance: 1e4,
                    capacitance: rc / 1e4,
                }],
                trap_capacitance: 0.0,
            },
            80e-9,
        )
        .unwrap();
        let stiff = paper_spec();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            for spec in [&mild, &stiff] {
                let na = spec.feedback_order();
                let nb = spec.feedforward_order();
                let src: Vec<f64> = (0..nb).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let el: Vec<f64> = (0..na).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let state = FilterState::from_histories(spec, src, el).unwrap();
                let d: f64 = rng.gen_range(0.01..1.0);
                let (lo, hi) = reachable_interval(spec, &state, d, 0.0).unwrap();
                let tol = 1e-12f64.max(inverse_roundoff_bound(spec, lo.abs().max(hi.abs())));
                for u in [lo, hi] {
                    let x = state.source_for_target(spec, u);
                    assert!(
                        ((x - state.last_source()).abs() - d).abs() < tol,
                        "boundary voltage should need |dS| = d within {tol}"
                    );
                }
            }
        }
    }
}
