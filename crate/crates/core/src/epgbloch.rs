//! EPG-Bloch: the split Bloch step lifted into configuration space by the
//! similarity transform `S`, so that a finite-duration, slice-selective RF
//! pulse is simulated sub-step by sub-step on every dephasing order.

use num_complex::{Complex, Complex64};
use rayon::prelude::*;

use crate::autodiff::{cmul_const, decay, Real, RelaxTimes};
use crate::blochcore::{build_rotation, Mat3};
use crate::dict::{match_signal, Dictionary, MatchResult};
use crate::epg::{self, grad_shift, relax_factors, relax_recover, sum_slices, EpgState};
use crate::error::{Error, Result};
use crate::seqmodel::{SequenceParams, TissueParams};

/// `S`, mapping `(Mx, My, Mz)` to `(F+, F-, Z)`.
pub fn s_matrix() -> [[Complex64; 3]; 3] {
    let (o, z, i) = (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), Complex64::i());
    [[o, i, z], [o, -i, z], [z, z, o]]
}

pub fn s_inverse() -> [[Complex64; 3]; 3] {
    let (h, z, i) = (Complex64::new(0.5, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.5));
    [[h, h, z], [-i, i, z], [z, z, Complex64::new(1.0, 0.0)]]
}

fn mat_mul(a: &[[Complex64; 3]; 3], b: &[[Complex64; 3]; 3]) -> [[Complex64; 3]; 3] {
    let mut out = [[Complex64::new(0.0, 0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Configuration-space form of one Bloch step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftedStep {
    /// `S · R · D · S⁻¹`
    pub mix: [[Complex64; 3]; 3],
    /// `S · (I - D) M0`, added at `k = 0` only.
    pub recover: [Complex64; 3],
}

impl LiftedStep {
    pub fn apply(&self, state: &mut EpgState<f64>) {
        for k in 0..state.n_k() {
            let [a, b, c] = crate::epg::apply3(&self.mix, [state.f_plus[k], state.f_minus[k], state.z[k]]);
            state.f_plus[k] = a;
            state.f_minus[k] = b;
            state.z[k] = c;
        }
        state.f_plus[0] += self.recover[0];
        state.f_minus[0] += self.recover[1];
        state.z[0] += self.recover[2];
    }
}

pub fn lift_operator(rotation: &Mat3, relax_diag: [f64; 3], recovery: [f64; 3]) -> Result<LiftedStep> {
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
            dev = dev.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    if dev > 1e-6 {
        return Err(Error::NonOrthogonal(dev));
    }
    let mut a = [[Complex64::new(0.0, 0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = Complex64::new(rotation[i][j] * relax_diag[j], 0.0);
        }
    }
    let s = s_matrix();
    let mix = mat_mul(&mat_mul(&s, &a), &s_inverse());
    let recover = [0, 1, 2].map(|i| (0..3).map(|k| s[i][k] * recovery[k]).sum());
    Ok(LiftedStep { mix, recover })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpgBlochConfig {
    /// Configuration states tracked per sub-slice.
    pub n_k: usize,
    /// Simulate only one half of a mirror-symmetric slice and fold the other
    /// half in by conjugation. Used only when the pulse and grid allow it.
    pub exploit_symmetry: bool,
}

impl Default for EpgBlochConfig {
    fn default() -> Self {
        Self { n_k: 20, exploit_symmetry: true }
    }
}

impl EpgBlochConfig {
    pub fn with_n_k(n_k: usize) -> Self {
        Self { n_k, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_k < 2 {
            return Err(Error::InvalidConfig(format!("n_k must be at least 2, got {}", self.n_k)));
        }
        Ok(())
    }
}

pub fn simulate_epg_bloch(tissue: &TissueParams, seq: &SequenceParams, cfg: &EpgBlochConfig) -> Result<Vec<Complex64>> {
    simulate_epg_bloch_with(RelaxTimes::plain(tissue), tissue, seq, cfg)
}

/// Whether the response at `-z` is the complex conjugate of that at `+z`:
/// RF along the y axis only, a symmetric grid, and no initial `My`.
fn mirror_symmetric(tissue: &TissueParams, seq: &SequenceParams) -> bool {
    let z = &seq.slice.z_positions_mm;
    let n = z.len();
    let tol = 1e-12 * seq.slice.slice_thickness_mm * seq.slice.fov_factor;
    tissue.m0[1] == 0.0
        && seq.rf.samples.iter().all(|s| s.re == 0.0)
        && (0..n).all(|j| (z[j] + z[n - 1 - j]).abs() <= tol)
}

pub fn simulate_epg_bloch_with<T: Real>(
    relax: RelaxTimes<T>,
    tissue: &TissueParams,
    seq: &SequenceParams,
    cfg: &EpgBlochConfig,
) -> Result<Vec<Complex<T>>> {
    tissue.validate()?;
    seq.validate()?;
    cfg.validate()?;
    let z = &seq.slice.z_positions_mm;
    let n_z = z.len();
    if cfg.exploit_symmetry && n_z > 1 && mirror_symmetric(tissue, seq) {
        let half = n_z / 2;
        let per_slice: Vec<Vec<Complex<T>>> =
            z[half..].par_iter().map(|&zj| bloch_sub_slice(relax, tissue, seq, cfg.n_k, zj)).collect();
        let mut folded = Vec::with_capacity(per_slice.len());
        for (i, s) in per_slice.into_iter().enumerate() {
            let centre = n_z % 2 == 1 && i == 0;
            folded.push(if centre {
                s
            } else {
                s.into_iter().map(|v| Complex::new(v.re.scale(2.0), T::zero())).collect()
            });
        }
        return Ok(sum_slices(folded, seq.n_tr));
    }
    let per_slice: Vec<Vec<Complex<T>>> =
        z.par_iter().map(|&zj| bloch_sub_slice(relax, tissue, seq, cfg.n_k, zj)).collect();
    Ok(sum_slices(per_slice, seq.n_tr))
}

#[inline]
fn mul_i<T: Real>(v: Complex<T>) -> Complex<T> {
    Complex::new(-v.im, v.re)
}

/// Relax, then rotate by `r`, on every state: `S R D S⁻¹` in factored form.
#[inline]
fn lifted_substep<T: Real>(state: &mut EpgState<T>, r: &Mat3, e1: T, e2: T) {
    let half_e2 = e2.scale(0.5);
    for k in 0..state.n_k() {
        let fp = state.f_plus[k];
        let fm = state.f_minus[k];
        let x = (fp + fm) * half_e2;
        let y = -mul_i(fp - fm) * half_e2;
        let zz = state.z[k] * e1;
        let rx = |row: &[f64; 3]| {
            Complex::new(
                x.re.scale(row[0]) + y.re.scale(row[1]) + zz.re.scale(row[2]),
                x.im.scale(row[0]) + y.im.scale(row[1]) + zz.im.scale(row[2]),
            )
        };
        let xn = rx(&r[0]);
        let yn = rx(&r[1]);
        let iy = mul_i(yn);
        state.f_plus[k] = xn + iy;
        state.f_minus[k] = xn - iy;
        state.z[k] = rx(&r[2]);
    }
    state.z[0].re = state.z[0].re + (T::one() - e1);
}

fn bloch_sub_slice<T: Real>(
    relax: RelaxTimes<T>,
    tissue: &TissueParams,
    seq: &SequenceParams,
    n_k: usize,
    z_mm: f64,
) -> Vec<Complex<T>> {
    let rf = &seq.rf;
    let dt = rf.dt_ms();
    let half = 0.5 * rf.duration_ms;
    let e1 = decay(dt, relax.t1_ms);
    let e2 = decay(dt, relax.t2_ms);
    let rewind = Complex64::from_polar(1.0, rf.refocus_phase(z_mm));
    let rewind_conj = rewind.conj();
    let mut state = EpgState::<T>::from_magnetization(n_k, tissue.m0);
    if seq.inversion {
        epg::invert(&mut state);
        relax_recover(&mut state, seq.ti_ms - half, relax.t1_ms, relax.t2_ms, 1.0);
    }
    let mut rotations = vec![[[0.0; 3]; 3]; rf.n_rf];
    let mut out = Vec::with_capacity(seq.n_tr);
    let mut prev_alpha = f64::NAN;
    for n in 0..seq.n_tr {
        let alpha = seq.flip_deg[n].to_radians();
        if alpha != prev_alpha {
            for (s, r) in rotations.iter_mut().enumerate() {
                let b = rf.samples[s] * alpha;
                *r = build_rotation(tissue.b1_plus, b.re, b.im, rf.gradient_mt_per_m[s] * z_mm, dt);
            }
            prev_alpha = alpha;
        }
        for r in &rotations {
            lifted_substep(&mut state, r, e1, e2);
        }
        for k in 0..n_k {
            state.f_plus[k] = cmul_const(rewind, state.f_plus[k]);
            state.f_minus[k] = cmul_const(rewind_conj, state.f_minus[k]);
        }
        let to_echo = seq.te_ms[n] - half;
        relax_factors(&mut state, decay(to_echo, relax.t1_ms), decay(to_echo, relax.t2_ms), 1.0);
        out.push(state.f_plus[0]);
        let to_end = seq.tr_ms[n] - seq.te_ms[n] - half;
        relax_factors(&mut state, decay(to_end, relax.t1_ms), decay(to_end, relax.t2_ms), 1.0);
        grad_shift(&mut state);
    }
    out
}

/// Match one measured voxel signal against a dictionary.
pub fn fit_dictionary_voxel(signal: &[Complex64], dict: &Dictionary) -> Result<MatchResult> {
    match_signal(signal, dict)
}
