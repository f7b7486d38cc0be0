//! Shared fixtures for the benchmarks.

use epgforge::seqmodel::generate_flip_train;
use epgforge::surrogate::SurrogateInput;
use epgforge::{FlipTrainKind, FlipTrainSpec, RfPulse, SequenceParams, SliceGrid, TissueParams};

/// 480-TR inversion-prepared acquisition with a 0.568 ms Gaussian pulse in
/// 16 sub-steps and 32 sub-slices.
pub fn acquisition(n_tr: usize) -> SequenceParams {
    let flips = generate_flip_train(&FlipTrainSpec::new(FlipTrainKind::Spline5, n_tr, vec![15.0, 60.0, 35.0, 70.0, 25.0], 0))
        .expect("valid train");
    SequenceParams::constant_timing(flips, 7.38, 3.73, RfPulse::gaussian(0.568, 16, 2.0, 5.0), SliceGrid::new(5.0, 32, 3.0).expect("grid"))
        .with_inversion(7.74)
}

pub fn tissue() -> TissueParams {
    TissueParams::new(0.8, 0.08)
}

pub fn surrogate_inputs(seq: &SequenceParams, n: usize) -> Vec<SurrogateInput> {
    (0..n)
        .map(|i| {
            let t1 = 0.2 + 0.03 * i as f64;
            SurrogateInput::new(&TissueParams::new(t1, t1 * 0.1), seq)
        })
        .collect()
}
