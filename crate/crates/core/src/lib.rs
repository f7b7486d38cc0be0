//! Transient-state gradient-spoiled MR signal simulation.
//!
//! Three signal engines share one sequence description: an isochromat Bloch
//! simulator ([`blochcore`]), conventional EPG with a small-tip slice profile
//! ([`epg`]) and EPG-Bloch, which sub-steps the RF pulse inside configuration
//! space ([`epgbloch`]). On top of them sit forward-mode tissue derivatives
//! ([`autodiff`]), dictionary matching ([`dict`]), GRU surrogate inference
//! ([`surrogate`]) and CRLB flip-train design ([`seqopt`]).

pub mod autodiff;
pub(crate) mod binio;
pub mod blochcore;
pub mod csvio;
pub mod dict;
pub mod epg;
pub mod epgbloch;
pub mod error;
pub mod seqmodel;
pub mod seqopt;
mod spline;
pub mod surrogate;

pub use autodiff::{finite_diff_grad, simulate_with_grad, Dual2, EpgModel, SignalWithGrad};
pub use blochcore::{simulate_isochromats, IsochromatTrace};
pub use dict::{build_grid, generate_dictionary, match_signal, Dictionary, Engine, MatchResult, ParamGrid};
pub use epg::{simulate_epg_conventional, EpgState};
pub use epgbloch::{simulate_epg_bloch, EpgBlochConfig};
pub use error::{Error, ErrorCategory, Result};
pub use num_complex::Complex64;
pub use seqmodel::{
    FlipTrainKind, FlipTrainSpec, RfPulse, RfShape, SequenceParams, SliceGrid, TimingMode, TissueParams, TrainingSetup,
};
pub use seqopt::{crlb_trace, optimize_de, CrlbObjective, DeConfig, DeResult, FisherInfo, ObjectiveEngine};
pub use surrogate::{GruNetwork, SurrogateInput};

/// Proton gyromagnetic ratio in rad/(µT·ms).
pub const GAMMA_RAD_PER_UT_MS: f64 = 2.0 * std::f64::consts::PI * 42.577478e-3;
/// Proton gyromagnetic ratio over 2π in kHz/mT.
pub const GAMMA_BAR_KHZ_PER_MT: f64 = 42.577478;

/// `‖test - reference‖ / ‖reference‖`; zero for two zero signals.
pub fn nrmse(reference: &[Complex64], test: &[Complex64]) -> f64 {
    assert_eq!(reference.len(), test.len(), "nrmse needs equal lengths");
    let num: f64 = reference.iter().zip(test).map(|(a, b)| (a - b).norm_sqr()).sum();
    let den: f64 = reference.iter().map(|a| a.norm_sqr()).sum();
    if den > 0.0 {
        (num / den).sqrt()
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}
