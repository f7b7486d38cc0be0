//! Cartesian magnetization dynamics: the first-order split Bloch step and a
//! brute-force isochromat simulator that the configuration-state engines are
//! checked against.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::Result;
use crate::seqmodel::{SequenceParams, TissueParams};
use crate::GAMMA_RAD_PER_UT_MS;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mag3 {
    pub mx: f64,
    pub my: f64,
    pub mz: f64,
}

impl Mag3 {
    pub const fn new(mx: f64, my: f64, mz: f64) -> Self {
        Self { mx, my, mz }
    }

    pub fn norm(&self) -> f64 {
        (self.mx * self.mx + self.my * self.my + self.mz * self.mz).sqrt()
    }

    pub fn transverse(&self) -> Complex64 {
        Complex64::new(self.mx, self.my)
    }

    fn rotate_transverse(&mut self, phasor: Complex64) {
        let t = self.transverse() * phasor;
        self.mx = t.re;
        self.my = t.im;
    }
}

/// One discretized time step: rotation, relaxation and recovery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOperators {
    pub rotation: Mat3,
    /// `(e^{-Δt/T2}, e^{-Δt/T2}, e^{-Δt/T1})`
    pub relax_diag: [f64; 3],
    /// `(I - D) M0`
    pub recovery: [f64; 3],
}

impl StepOperators {
    /// Operators for a step of `dt_ms` towards equilibrium `(0, 0, m0z)`.
    pub fn new(rotation: Mat3, dt_ms: f64, t1_ms: f64, t2_ms: f64, m0z: f64) -> Self {
        let e1 = (-dt_ms / t1_ms).exp();
        let e2 = (-dt_ms / t2_ms).exp();
        Self { rotation, relax_diag: [e2, e2, e1], recovery: [0.0, 0.0, (1.0 - e1) * m0z] }
    }

    /// Free relaxation (no RF, no gradient).
    pub fn relaxation(dt_ms: f64, t1_ms: f64, t2_ms: f64) -> Self {
        Self::new(IDENTITY, dt_ms, t1_ms, t2_ms, 1.0)
    }
}

/// Exponential of the skew generator
/// `γΔt [[0, g, -b1·By], [-g, 0, b1·Bx], [b1·By, -b1·Bx, 0]]`,
/// evaluated in closed form by Rodrigues' formula. Field amplitudes in µT.
pub fn build_rotation(b1_plus: f64, bx_ut: f64, by_ut: f64, gz_times_z_ut: f64, dt_ms: f64) -> Mat3 {
    let s = -GAMMA_RAD_PER_UT_MS * dt_ms;
    let w = [s * b1_plus * bx_ut, s * b1_plus * by_ut, s * gz_times_z_ut];
    rotation_from_vector(w)
}

/// Rotation by `|w|` about `w / |w|`.
pub(crate) fn rotation_from_vector(w: [f64; 3]) -> Mat3 {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if theta == 0.0 {
        return IDENTITY;
    }
    let k = [w[0] / theta, w[1] / theta, w[2] / theta];
    let (sin, cos) = theta.sin_cos();
    let c = 1.0 - cos;
    [
        [cos + c * k[0] * k[0], c * k[0] * k[1] - sin * k[2], c * k[0] * k[2] + sin * k[1]],
        [c * k[1] * k[0] + sin * k[2], cos + c * k[1] * k[1], c * k[1] * k[2] - sin * k[0]],
        [c * k[2] * k[0] - sin * k[1], c * k[2] * k[1] + sin * k[0], cos + c * k[2] * k[2]],
    ]
}

#[inline]
pub fn mat_vec(r: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// `R (D ∘ m) + (I - D) M0`.
#[inline]
pub fn bloch_step(m: Mag3, ops: &StepOperators) -> Mag3 {
    let d = ops.relax_diag;
    let v = mat_vec(&ops.rotation, [d[0] * m.mx, d[1] * m.my, d[2] * m.mz]);
    Mag3::new(v[0] + ops.recovery[0], v[1] + ops.recovery[1], v[2] + ops.recovery[2])
}

/// Per-TR observables of an isochromat run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IsochromatTrace {
    /// Σ over sub-slices of the isochromat-mean `Mx + i My` at TE.
    pub signal: Vec<Complex64>,
    /// Sub-slice mean of the isochromat-mean `Mz` at TE.
    pub mz_echo: Vec<f64>,
}

/// Brute-force signal from `n_iso` isochromats per sub-slice, spread
/// uniformly over `spoiler_cycles_per_tr` dephasing cycles per TR.
pub fn simulate_isochromats(
    tissue: &TissueParams,
    seq: &SequenceParams,
    n_iso: usize,
    spoiler_cycles_per_tr: u32,
) -> Result<Vec<Complex64>> {
    Ok(simulate_isochromats_traced(tissue, seq, n_iso, spoiler_cycles_per_tr)?.signal)
}

pub fn simulate_isochromats_traced(
    tissue: &TissueParams,
    seq: &SequenceParams,
    n_iso: usize,
    spoiler_cycles_per_tr: u32,
) -> Result<IsochromatTrace> {
    tissue.validate()?;
    seq.validate()?;
    if n_iso == 0 {
        return Err(crate::Error::InvalidConfig("n_iso must be at least 1".into()));
    }
    let per_slice: Vec<(Vec<Complex64>, Vec<f64>)> = seq
        .slice
        .z_positions_mm
        .par_iter()
        .map(|&z| simulate_sub_slice(tissue, seq, n_iso, spoiler_cycles_per_tr, z))
        .collect();
    let n = seq.n_tr;
    let mut trace = IsochromatTrace { signal: vec![Complex64::new(0.0, 0.0); n], mz_echo: vec![0.0; n] };
    for (sig, mz) in &per_slice {
        for i in 0..n {
            trace.signal[i] += sig[i];
            trace.mz_echo[i] += mz[i];
        }
    }
    let inv = 1.0 / per_slice.len() as f64;
    trace.mz_echo.iter_mut().for_each(|v| *v *= inv);
    Ok(trace)
}

fn simulate_sub_slice(
    tissue: &TissueParams,
    seq: &SequenceParams,
    n_iso: usize,
    cycles: u32,
    z_mm: f64,
) -> (Vec<Complex64>, Vec<f64>) {
    let t1 = tissue.t1 * 1e3;
    let t2 = tissue.t2 * 1e3;
    let rf = &seq.rf;
    let dt = rf.dt_ms();
    let half = 0.5 * rf.duration_ms;
    let mut iso = vec![Mag3::new(tissue.m0[0], tissue.m0[1], tissue.m0[2]); n_iso];

    let relax_all = |iso: &mut [Mag3], dur: f64| {
        if dur > 0.0 {
            let ops = StepOperators::relaxation(dur, t1, t2);
            iso.iter_mut().for_each(|m| *m = bloch_step(*m, &ops));
        }
    };

    if seq.inversion {
        // perfect 180° about x
        iso.iter_mut().for_each(|m| {
            m.my = -m.my;
            m.mz = -m.mz;
        });
        relax_all(&mut iso, seq.ti_ms - half);
    }

    let spoil: Vec<Complex64> = (0..n_iso)
        .map(|i| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f64::from(cycles) * i as f64 / n_iso as f64))
        .collect();
    let rewind = Complex64::from_polar(1.0, rf.refocus_phase(z_mm));
    let mut signal = Vec::with_capacity(seq.n_tr);
    let mut mz_echo = Vec::with_capacity(seq.n_tr);

    for n in 0..seq.n_tr {
        let alpha = seq.flip_deg[n].to_radians();
        for s in 0..rf.n_rf {
            let b = rf.samples[s] * alpha;
            let rot = build_rotation(tissue.b1_plus, b.re, b.im, rf.gradient_mt_per_m[s] * z_mm, dt);
            let ops = StepOperators::new(rot, dt, t1, t2, 1.0);
            iso.iter_mut().for_each(|m| *m = bloch_step(*m, &ops));
        }
        iso.iter_mut().for_each(|m| m.rotate_transverse(rewind));
        relax_all(&mut iso, seq.te_ms[n] - half);

        signal.push(Complex64::new(
            compensated_mean(iso.iter().map(|m| m.mx)),
            compensated_mean(iso.iter().map(|m| m.my)),
        ));
        mz_echo.push(compensated_mean(iso.iter().map(|m| m.mz)));

        relax_all(&mut iso, seq.tr_ms[n] - seq.te_ms[n] - half);
        iso.iter_mut().zip(&spoil).for_each(|(m, p)| m.rotate_transverse(*p));
    }
    (signal, mz_echo)
}

/// Neumaier-compensated mean.
pub(crate) fn compensated_mean<I: ExactSizeIterator<Item = f64>>(values: I) -> f64 {
    let n = values.len();
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    (sum + comp) / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{RfPulse, SliceGrid};
    use nalgebra::{Matrix3, Rotation3, Vector3};
    use proptest::prelude::*;

    fn apply(r: &Mat3, v: [f64; 3]) -> [f64; 3] {
        mat_vec(r, v)
    }

    fn orthogonality_error(r: &Mat3) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn zero_field_is_identity() {
        assert_eq!(build_rotation(1.0, 0.0, 0.0, 0.0, 0.1), IDENTITY);
    }

    #[test]
    fn quarter_turn_about_x_field() {
        let dt = 0.2;
        let bx = std::f64::consts::FRAC_PI_2 / (GAMMA_RAD_PER_UT_MS * dt);
        let v = apply(&build_rotation(1.0, bx, 0.0, 0.0, dt), [0.0, 0.0, 1.0]);
        assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v[2].abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn quarter_turn_from_gradient() {
        let dt = 0.05;
        let g = std::f64::consts::FRAC_PI_2 / (GAMMA_RAD_PER_UT_MS * dt);
        let v = apply(&build_rotation(1.0, 0.0, 0.0, g, dt), [1.0, 0.0, 0.0]);
        assert!(v[0].abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12 && v[2].abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn recovery_from_saturation() {
        let ops = StepOperators::new(IDENTITY, 900.0, 900.0, 90.0, 1.0);
        let m = bloch_step(Mag3::default(), &ops);
        assert!((m.mz - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((m.mz - 0.63212).abs() < 1e-5);
        let eq = bloch_step(Mag3::new(0.0, 0.0, 1.0), &ops);
        assert_eq!(eq, Mag3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn zero_step_is_pure_rotation() {
        let r = rotation_from_vector([0.3, -0.2, 1.1]);
        let ops = StepOperators::new(r, 0.0, 1000.0, 100.0, 1.0);
        assert_eq!(ops.relax_diag, [1.0; 3]);
        assert_eq!(ops.recovery, [0.0; 3]);
        let m = bloch_step(Mag3::new(0.1, 0.2, 0.3), &ops);
        let v = apply(&r, [0.1, 0.2, 0.3]);
        assert_eq!([m.mx, m.my, m.mz], v);
    }

    fn single_slice_hard(flips: Vec<f64>, tr: f64, te: f64, dur: f64) -> SequenceParams {
        SequenceParams::constant_timing(flips, tr, te, RfPulse::hard(dur), SliceGrid::single())
    }

    #[test]
    fn zero_flips_give_zero_signal() {
        let seq = single_slice_hard(vec![0.0; 20], 10.0, 5.0, 0.5);
        let s = simulate_isochromats(&TissueParams::new(1.0, 0.1), &seq, 64, 1).unwrap();
        assert!(s.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn single_pulse_fid() {
        let (tr, te, dur) = (20.0, 1.0, 1e-4);
        let seq = single_slice_hard(vec![90.0], tr, te, dur);
        let tissue = TissueParams::new(1.0, 0.08);
        let s = simulate_isochromats(&tissue, &seq, 64, 1).unwrap();
        let expected = (-te / 80.0_f64).exp();
        assert!((s[0].norm() - expected).abs() < 1e-6, "{} vs {expected}", s[0].norm());
    }

    #[test]
    fn inversion_recovery_probe() {
        let (ti, te, dur) = (300.0, 2.0, 1e-3);
        let seq = single_slice_hard(vec![0.0; 2], 10.0, te, dur).with_inversion(ti);
        let tissue = TissueParams::new(0.8, 0.08);
        let tr = simulate_isochromats_traced(&tissue, &seq, 8, 1).unwrap();
        let t = ti + te;
        let expected = 1.0 - 2.0 * (-t / 800.0_f64).exp();
        assert!((tr.mz_echo[0] - expected).abs() < 1e-9, "{} vs {expected}", tr.mz_echo[0]);
    }

    #[test]
    fn ensemble_size_convergence() {
        // Oracle is exact once the ensemble resolves every dephasing order.
        let rf = RfPulse::gaussian(0.568, 16, 2.0, 5.0);
        let grid = SliceGrid::new(5.0, 4, 3.0).unwrap();
        let flips: Vec<f64> = (0..120).map(|n| 10.0 + 50.0 * ((n as f64) / 30.0).sin().abs()).collect();
        let seq = SequenceParams::constant_timing(flips, 7.38, 3.73, rf, grid);
        let tissue = TissueParams::new(0.8, 0.08);
        let a = simulate_isochromats(&tissue, &seq, 512, 1).unwrap();
        let b = simulate_isochromats(&tissue, &seq, 1024, 1).unwrap();
        assert!(crate::nrmse(&b, &a) < 1e-3);
    }

    #[test]
    fn compensated_mean_beats_naive() {
        let vals = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_mean(vals.iter().copied()), 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn rotation_is_orthogonal(b1 in 0.5f64..1.5, bx in -200.0f64..200.0, by in -200.0f64..200.0, g in -500.0f64..500.0, dt in 1e-4f64..0.5) {
            let r = build_rotation(b1, bx, by, g, dt);
            prop_assert!(orthogonality_error(&r) < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn rotation_matches_reference_exponential(bx in -50.0f64..50.0, by in -50.0f64..50.0, g in -50.0f64..50.0, dt in 1e-3f64..0.2) {
            let r = build_rotation(1.0, bx, by, g, dt);
            let gd = GAMMA_RAD_PER_UT_MS * dt;
            let a = Matrix3::new(0.0, gd * g, -gd * by, -gd * g, 0.0, gd * bx, gd * by, -gd * bx, 0.0);
            // the generator is skew-symmetric, so its exponential is a rotation
            let axis = Vector3::new(a[(2, 1)], a[(0, 2)], a[(1, 0)]);
            let reference = Rotation3::from_scaled_axis(axis);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((r[i][j] - reference[(i, j)]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn relaxation_never_grows_norm(mx in -1.0f64..1.0, my in -1.0f64..1.0, mz in -1.0f64..1.0,
                                      dt in 0.0f64..500.0, t1 in 50.0f64..5000.0, ratio in 0.01f64..1.0,
                                      w in prop::array::uniform3(-3.0f64..3.0)) {
            let m = Mag3::new(mx, my, mz);
            prop_assume!(m.norm() <= 1.0);
            let ops = StepOperators::new(rotation_from_vector(w), dt, t1, t1 * ratio, 1.0);
            prop_assert!(bloch_step(m, &ops).norm() <= 1.0 + 1e-9);
        }
    }
}
