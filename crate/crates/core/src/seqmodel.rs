//! Tissue and sequence parameterizations, the RF pulse model, flip-angle
//! train generators and the simulation cost model.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::ClampedCubicSpline;
use crate::{GAMMA_BAR_KHZ_PER_MT, GAMMA_RAD_PER_UT_MS};

/// Per-voxel tissue parameters. Relaxation times are in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueParams {
    pub t1: f64,
    pub t2: f64,
    pub b1_plus: f64,
    /// Initial magnetization; `[0, 0, 1]` (equilibrium) or `[0, 0, -1]`.
    pub m0: [f64; 3],
}

impl TissueParams {
    pub fn new(t1: f64, t2: f64) -> Self {
        Self { t1, t2, b1_plus: 1.0, m0: [0.0, 0.0, 1.0] }
    }

    pub fn with_b1(mut self, b1_plus: f64) -> Self {
        self.b1_plus = b1_plus;
        self
    }

    pub fn with_m0(mut self, m0: [f64; 3]) -> Self {
        self.m0 = m0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0 && self.t1.is_finite()) || !(self.t2 > 0.0 && self.t2.is_finite()) {
            return Err(Error::InvalidTissue(format!(
                "relaxation times must be positive (T1 = {}, T2 = {})",
                self.t1, self.t2
            )));
        }
        if !(self.b1_plus > 0.0 && self.b1_plus.is_finite()) {
            return Err(Error::InvalidTissue(format!("B1+ must be positive, got {}", self.b1_plus)));
        }
        let norm = self.m0.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidTissue(format!("|M0| must be 1, got {norm}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RfShape {
    Gaussian,
    Hard,
}

/// Discretized slice-selective RF pulse.
///
/// `samples` hold the normalized complex field `B̄xy(t_n)` in µT per radian
/// of nominal flip angle, so that `i γ Σ samples · Δt = 1`. The field that
/// produces a nominal flip `α` is `α · samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfPulse {
    pub shape: RfShape,
    pub duration_ms: f64,
    pub n_rf: usize,
    pub time_bandwidth: f64,
    pub samples: Vec<Complex64>,
    pub gradient_mt_per_m: Vec<f64>,
    pub refocus_area_frac: f64,
}

impl RfPulse {
    /// Gaussian envelope truncated at ±2.5σ, slice-select gradient from the
    /// time-bandwidth product and the slice thickness.
    pub fn gaussian(duration_ms: f64, n_rf: usize, time_bandwidth: f64, thickness_mm: f64) -> Self {
        let dt = duration_ms / n_rf as f64;
        let sigma = duration_ms / 5.0;
        let center = 0.5 * duration_ms;
        let env: Vec<f64> = (0..n_rf)
            .map(|n| {
                let t = (n as f64 + 0.5) * dt - center;
                (-0.5 * (t / sigma).powi(2)).exp()
            })
            .collect();
        let bandwidth_khz = time_bandwidth / duration_ms;
        let g = bandwidth_khz / (GAMMA_BAR_KHZ_PER_MT * thickness_mm * 1e-3);
        Self {
            shape: RfShape::Gaussian,
            duration_ms,
            n_rf,
            time_bandwidth,
            samples: normalized_samples(&env, dt),
            gradient_mt_per_m: vec![g; n_rf],
            refocus_area_frac: 0.5,
        }
    }

    /// Rectangular pulse: one sub-step, no slice gradient.
    pub fn hard(duration_ms: f64) -> Self {
        Self {
            shape: RfShape::Hard,
            duration_ms,
            n_rf: 1,
            time_bandwidth: 0.0,
            samples: normalized_samples(&[1.0], duration_ms),
            gradient_mt_per_m: vec![0.0],
            refocus_area_frac: 0.5,
        }
    }

    pub fn dt_ms(&self) -> f64 {
        self.duration_ms / self.n_rf as f64
    }

    /// Slice-select gradient area in mT/m · ms.
    pub fn gradient_area(&self) -> f64 {
        let dt = self.dt_ms();
        self.gradient_mt_per_m.iter().map(|g| g * dt).sum()
    }

    /// Phase `ψ(z)` applied as `M+ ← M+ e^{iψ}` by the refocusing lobe.
    pub fn refocus_phase(&self, z_mm: f64) -> f64 {
        GAMMA_RAD_PER_UT_MS * self.refocus_area_frac * self.gradient_area() * z_mm
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rf == 0 {
            return Err(Error::InvalidSequence("RF pulse needs at least one sub-step".into()));
        }
        if !(self.duration_ms > 0.0) {
            return Err(Error::InvalidSequence("RF duration must be positive".into()));
        }
        if self.samples.len() != self.n_rf || self.gradient_mt_per_m.len() != self.n_rf {
            return Err(Error::InvalidSequence("RF sample arrays must have n_rf entries".into()));
        }
        let area: Complex64 = self.samples.iter().sum::<Complex64>() * self.dt_ms();
        let norm = Complex64::i() * GAMMA_RAD_PER_UT_MS * area;
        if (norm - 1.0).norm() > 1e-9 {
            return Err(Error::InvalidSequence(format!("RF pulse is not normalized ({norm})")));
        }
        Ok(())
    }
}

fn normalized_samples(envelope: &[f64], dt: f64) -> Vec<Complex64> {
    let total: f64 = envelope.iter().sum::<f64>() * dt;
    // i γ ∫ B dt = 1  =>  B points along -y.
    envelope
        .iter()
        .map(|e| Complex64::new(0.0, -e / (GAMMA_RAD_PER_UT_MS * total)))
        .collect()
}

/// Uniform sub-slice positions across `fov_factor` slice thicknesses.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGrid {
    pub slice_thickness_mm: f64,
    pub n_z: usize,
    pub fov_factor: f64,
    pub z_positions_mm: Vec<f64>,
}

impl SliceGrid {
    pub fn new(slice_thickness_mm: f64, n_z: usize, fov_factor: f64) -> Result<Self> {
        if n_z == 0 {
            return Err(Error::InvalidSequence("slice grid needs n_z >= 1".into()));
        }
        if !(slice_thickness_mm > 0.0) || !(fov_factor > 0.0) {
            return Err(Error::InvalidSequence("slice thickness and FOV factor must be positive".into()));
        }
        let span = fov_factor * slice_thickness_mm;
        let step = span / n_z as f64;
        let z_positions_mm = (0..n_z).map(|j| -0.5 * span + (j as f64 + 0.5) * step).collect();
        Ok(Self { slice_thickness_mm, n_z, fov_factor, z_positions_mm })
    }

    /// Grid whose single sub-slice sits at the isocenter.
    pub fn single() -> Self {
        Self::new(5.0, 1, 1.0).expect("valid grid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipTrainKind {
    Spline5,
    Spline11,
    SinSquared5,
    SplineNoise11,
    PieceConstant5,
    Explicit,
}

impl FlipTrainKind {
    /// The five randomized families used for training data.
    pub const RANDOM: [FlipTrainKind; 5] = [
        FlipTrainKind::Spline5,
        FlipTrainKind::Spline11,
        FlipTrainKind::SinSquared5,
        FlipTrainKind::SplineNoise11,
        FlipTrainKind::PieceConstant5,
    ];

    /// Number of control amplitudes.
    pub fn control_points(self) -> usize {
        match self {
            FlipTrainKind::Spline5 | FlipTrainKind::SinSquared5 | FlipTrainKind::PieceConstant5 => 5,
            FlipTrainKind::Spline11 | FlipTrainKind::SplineNoise11 => 11,
            FlipTrainKind::Explicit => 0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FlipTrainKind::Spline5 => 0,
            FlipTrainKind::Spline11 => 1,
            FlipTrainKind::SinSquared5 => 2,
            FlipTrainKind::SplineNoise11 => 3,
            FlipTrainKind::PieceConstant5 => 4,
            FlipTrainKind::Explicit => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => FlipTrainKind::Spline5,
            1 => FlipTrainKind::Spline11,
            2 => FlipTrainKind::SinSquared5,
            3 => FlipTrainKind::SplineNoise11,
            4 => FlipTrainKind::PieceConstant5,
            5 => FlipTrainKind::Explicit,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FlipTrainKind::Spline5 => "spline5",
            FlipTrainKind::Spline11 => "spline11",
            FlipTrainKind::SinSquared5 => "sinsquared5",
            FlipTrainKind::SplineNoise11 => "splinenoise11",
            FlipTrainKind::PieceConstant5 => "piececonstant5",
            FlipTrainKind::Explicit => "explicit",
        }
    }
}

impl fmt::Display for FlipTrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlipTrainKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        [FlipTrainKind::Explicit]
            .into_iter()
            .chain(FlipTrainKind::RANDOM)
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown flip train kind {s:?}")))
    }
}

/// Upper clip applied to generated trains, in degrees.
pub const TRAIN_MAX_DEG: f64 = 120.0;
/// Minimum segment length of piecewise-constant trains.
pub const PIECE_MIN_LEN: usize = 20;
/// Standard deviation of the additive noise in `SplineNoise11`, degrees.
pub const SPLINE_NOISE_SIGMA_DEG: f64 = 3.162_277_660_168_379_5; // sqrt(10)

#[derive(Debug, Clone, PartialEq)]
pub struct FlipTrainSpec {
    pub kind: FlipTrainKind,
    pub n_tr: usize,
    pub control_deg: Vec<f64>,
    pub seed: u64,
    pub explicit_deg: Vec<f64>,
}

impl FlipTrainSpec {
    pub fn new(kind: FlipTrainKind, n_tr: usize, control_deg: Vec<f64>, seed: u64) -> Self {
        Self { kind, n_tr, control_deg, seed, explicit_deg: Vec::new() }
    }

    pub fn explicit(train_deg: Vec<f64>) -> Self {
        Self {
            kind: FlipTrainKind::Explicit,
            n_tr: train_deg.len(),
            control_deg: Vec::new(),
            seed: 0,
            explicit_deg: train_deg,
        }
    }

    /// Draws control amplitudes uniformly from `[0, 120]` degrees.
    pub fn sample<R: Rng>(kind: FlipTrainKind, n_tr: usize, rng: &mut R) -> Self {
        let control = (0..kind.control_points()).map(|_| rng.random_range(0.0..=TRAIN_MAX_DEG)).collect();
        Self::new(kind, n_tr, control, rng.random())
    }
}

/// Generate the per-TR flip angles (degrees) described by `spec`.
pub fn generate_flip_train(spec: &FlipTrainSpec) -> Result<Vec<f64>> {
    let n = spec.n_tr;
    let m = spec.kind.control_points();
    if spec.kind == FlipTrainKind::Explicit {
        if spec.explicit_deg.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: spec.explicit_deg.len() });
        }
        if spec.explicit_deg.iter().any(|a| !(0.0..=180.0).contains(a)) {
            return Err(Error::InvalidSequence("explicit flip angles must lie in [0, 180]".into()));
        }
        return Ok(spec.explicit_deg.clone());
    }
    if spec.control_deg.len() != m {
        return Err(Error::LengthMismatch { expected: m, got: spec.control_deg.len() });
    }
    if spec.control_deg.iter().any(|a| !(0.0..=TRAIN_MAX_DEG).contains(a)) {
        return Err(Error::InvalidConfig("control amplitudes must lie in [0, 120]".into()));
    }
    let mut train = match spec.kind {
        FlipTrainKind::Spline5 | FlipTrainKind::Spline11 => spline_train(n, &spec.control_deg)?,
        FlipTrainKind::SplineNoise11 => {
            let mut t = spline_train(n, &spec.control_deg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let noise = Normal::new(0.0, SPLINE_NOISE_SIGMA_DEG).expect("finite sigma");
            for a in t.iter_mut() {
                *a += noise.sample(&mut rng);
            }
            t
        }
        FlipTrainKind::SinSquared5 => sin_squared_train(n, &spec.control_deg)?,
        FlipTrainKind::PieceConstant5 => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            piece_constant_train(n, &spec.control_deg, &mut rng)?
        }
        FlipTrainKind::Explicit => unreachable!(),
    };
    for a in train.iter_mut() {
        *a = a.clamp(0.0, TRAIN_MAX_DEG);
    }
    Ok(train)
}

/// Spline through `(0, 0)` and `(⌊i·N/m⌋, θ_i)`, zero slope at both ends,
/// sampled at `n = 1..=N` (array slot `n - 1`).
pub(crate) fn spline_train(n_tr: usize, control: &[f64]) -> Result<Vec<f64>> {
    let m = control.len();
    if n_tr < m {
        return Err(Error::InfeasibleTrain(format!("n_tr = {n_tr} is smaller than {m} control points")));
    }
    let mut xs = Vec::with_capacity(m + 1);
    let mut ys = Vec::with_capacity(m + 1);
    xs.push(0.0);
    ys.push(0.0);
    for (i, &theta) in control.iter().enumerate() {
        xs.push(((i + 1) * n_tr / m) as f64);
        ys.push(theta);
    }
    let spline = ClampedCubicSpline::new(&xs, &ys, 0.0, 0.0)?;
    Ok((1..=n_tr).map(|n| spline.eval(n as f64)).collect())
}

fn sin_squared_train(n_tr: usize, control: &[f64]) -> Result<Vec<f64>> {
    let m = control.len();
    let lobe = n_tr / m;
    if lobe == 0 {
        return Err(Error::InfeasibleTrain(format!("n_tr = {n_tr} is smaller than {m} lobes")));
    }
    let period = n_tr as f64 / m as f64;
    Ok((1..=n_tr)
        .map(|n| {
            let which = ((n - 1) / lobe).min(m - 1);
            let phase = ((n - 1) % lobe) as f64;
            control[which] * (PI * phase / period).sin().powi(2)
        })
        .collect())
}

fn piece_constant_train<R: Rng>(n_tr: usize, control: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let m = control.len();
    if n_tr < m * PIECE_MIN_LEN {
        return Err(Error::InfeasibleTrain(format!(
            "n_tr = {n_tr} cannot hold {m} segments of at least {PIECE_MIN_LEN}"
        )));
    }
    // Boundaries k_1 < ... < k_{m-1} with every gap (including to 0 and N)
    // at least PIECE_MIN_LEN: shift sorted draws from the slack range.
    let slack = n_tr - m * PIECE_MIN_LEN;
    let mut offsets: Vec<usize> = (0..m - 1).map(|_| rng.random_range(0..=slack)).collect();
    offsets.sort_unstable();
    let bounds: Vec<usize> = std::iter::once(0)
        .chain(offsets.iter().enumerate().map(|(i, o)| (i + 1) * PIECE_MIN_LEN + o))
        .chain(std::iter::once(n_tr))
        .collect();
    let mut out = Vec::with_capacity(n_tr);
    for (seg, w) in bounds.windows(2).enumerate() {
        out.extend(std::iter::repeat_n(control[seg], w[1] - w[0]));
    }
    Ok(out)
}

/// Full description of a gradient-spoiled sequence. Times in milliseconds,
/// flip angles in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceParams {
    pub n_tr: usize,
    pub flip_deg: Vec<f64>,
    pub tr_ms: Vec<f64>,
    pub te_ms: Vec<f64>,
    /// Perfect instantaneous 180° before the first excitation.
    pub inversion: bool,
    /// Inversion to centre of the first pulse.
    pub ti_ms: f64,
    pub rf: RfPulse,
    pub slice: SliceGrid,
    /// Family the flip train was drawn from, when known.
    pub flip_kind: FlipTrainKind,
}

impl SequenceParams {
    pub fn constant_timing(flip_deg: Vec<f64>, tr_ms: f64, te_ms: f64, rf: RfPulse, slice: SliceGrid) -> Self {
        let n_tr = flip_deg.len();
        Self {
            n_tr,
            flip_deg,
            tr_ms: vec![tr_ms; n_tr],
            te_ms: vec![te_ms; n_tr],
            inversion: false,
            ti_ms: 0.0,
            rf,
            slice,
            flip_kind: FlipTrainKind::Explicit,
        }
    }

    pub fn with_inversion(mut self, ti_ms: f64) -> Self {
        self.inversion = true;
        self.ti_ms = ti_ms;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_tr;
        if n == 0 {
            return Err(Error::InvalidSequence("sequence needs at least one TR".into()));
        }
        for (name, len) in [("flip_deg", self.flip_deg.len()), ("tr_ms", self.tr_ms.len()), ("te_ms", self.te_ms.len())] {
            if len != n {
                return Err(Error::InvalidSequence(format!("{name} has {len} entries, expected {n}")));
            }
        }
        self.rf.validate()?;
        let half = 0.5 * self.rf.duration_ms;
        for i in 0..n {
            let (a, tr, te) = (self.flip_deg[i], self.tr_ms[i], self.te_ms[i]);
            if !(0.0..=180.0).contains(&a) {
                return Err(Error::InvalidSequence(format!("flip angle {a} at TR {i} outside [0, 180]")));
            }
            if !(te > 0.0 && te < tr) {
                return Err(Error::InvalidSequence(format!("TE {te} must lie in (0, TR = {tr}) at TR {i}")));
            }
            if te < half || tr - te < half {
                return Err(Error::InvalidSequence(format!(
                    "readout at TE {te} overlaps the {} ms pulse at TR {i}",
                    self.rf.duration_ms
                )));
            }
        }
        if self.inversion && self.ti_ms < half {
            return Err(Error::InvalidSequence(format!("TI {} is shorter than half the pulse", self.ti_ms)));
        }
        Ok(())
    }
}

/// Timing-sampling mode for training sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingMode {
    ConstTiming,
    VaryingTiming,
}

/// Fixed acquisition settings shared by every training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSetup {
    pub n_tr: usize,
    pub rf: RfPulse,
    pub slice: SliceGrid,
    pub tr_range_ms: (f64, f64),
    pub te_frac_range: (f64, f64),
}

impl Default for TrainingSetup {
    fn default() -> Self {
        Self::with_length(1120)
    }
}

impl TrainingSetup {
    pub fn with_length(n_tr: usize) -> Self {
        Self {
            n_tr,
            rf: RfPulse::gaussian(1.0, 16, 2.0, 3.0),
            slice: SliceGrid::new(3.0, 32, 3.0).expect("valid grid"),
            tr_range_ms: (5.0, 20.0),
            te_frac_range: (0.3, 0.7),
        }
    }
}

/// Draw one random training sequence, with the flip-train family chosen
/// uniformly among the five randomized kinds.
pub fn sample_training_sequence(setup: &TrainingSetup, rng_seed: u64, mode: TimingMode) -> Result<SequenceParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let kind = FlipTrainKind::RANDOM[rng.random_range(0..FlipTrainKind::RANDOM.len())];
    sample_training_sequence_of_kind(setup, kind, &mut rng, mode)
}

pub(crate) fn sample_training_sequence_of_kind<R: Rng>(
    setup: &TrainingSetup,
    kind: FlipTrainKind,
    rng: &mut R,
    mode: TimingMode,
) -> Result<SequenceParams> {
    let n = setup.n_tr;
    let spec = FlipTrainSpec::sample(kind, n, rng);
    let flip_deg = generate_flip_train(&spec)?;
    let (tr_lo, tr_hi) = setup.tr_range_ms;
    let (f_lo, f_hi) = setup.te_frac_range;
    let draw = |rng: &mut R| {
        let tr = rng.random_range(tr_lo..=tr_hi);
        let te = tr * rng.random_range(f_lo..=f_hi);
        (tr, te)
    };
    let (tr_ms, te_ms): (Vec<f64>, Vec<f64>) = match mode {
        TimingMode::ConstTiming => {
            let (tr, te) = draw(rng);
            (vec![tr; n], vec![te; n])
        }
        TimingMode::VaryingTiming => (0..n).map(|_| draw(rng)).unzip(),
    };
    let inversion = rng.random_bool(0.5);
    let seq = SequenceParams {
        n_tr: n,
        flip_deg,
        tr_ms,
        te_ms,
        inversion,
        ti_ms: 0.5 * setup.rf.duration_ms,
        rf: setup.rf.clone(),
        slice: setup.slice.clone(),
        flip_kind: kind,
    };
    seq.validate()?;
    Ok(seq)
}

/// Number of lifted configuration-state updates one EPG-Bloch voxel needs.
pub fn estimate_cost(n_tr: u64, n_z: u64, n_k: u64, n_rf: u64) -> u64 {
    n_tr * n_z * n_k * n_rf
}

// --- configuration files ---------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn expand(&self, n: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            OneOrMany::One(v) => Ok(vec![*v; n]),
            OneOrMany::Many(v) if v.len() == n => Ok(v.clone()),
            OneOrMany::Many(v) => Err(Error::InvalidConfig(format!("{name} has {} entries, expected {n}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfConfig {
    #[serde(default = "default_shape")]
    pub shape: RfShape,
    #[serde(default = "default_duration")]
    pub duration_ms: f64,
    #[serde(default = "default_n_rf")]
    pub n_rf: usize,
    #[serde(default = "default_tbw")]
    pub time_bandwidth: f64,
    #[serde(default = "default_refocus")]
    pub refocus_area_frac: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceConfig {
    #[serde(default = "default_thickness")]
    pub thickness_mm: f64,
    #[serde(default = "default_n_z")]
    pub n_z: usize,
    #[serde(default = "default_fov")]
    pub fov_factor: f64,
}

fn default_shape() -> RfShape {
    RfShape::Gaussian
}
fn default_duration() -> f64 {
    0.568
}
fn default_n_rf() -> usize {
    16
}
fn default_tbw() -> f64 {
    2.0
}
fn default_refocus() -> f64 {
    0.5
}
fn default_thickness() -> f64 {
    5.0
}
fn default_n_z() -> usize {
    32
}
fn default_fov() -> f64 {
    3.0
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            shape: default_shape(),
            duration_ms: default_duration(),
            n_rf: default_n_rf(),
            time_bandwidth: default_tbw(),
            refocus_area_frac: default_refocus(),
        }
    }
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self { thickness_mm: default_thickness(), n_z: default_n_z(), fov_factor: default_fov() }
    }
}

/// Sequence description as read from a TOML (`key = value`) file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub n_tr: usize,
    pub tr_ms: OneOrMany,
    pub te_ms: OneOrMany,
    #[serde(default = "default_kind")]
    pub flip_kind: FlipTrainKind,
    #[serde(default)]
    pub control_deg: Vec<f64>,
    #[serde(default)]
    pub explicit_deg: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub inversion: bool,
    #[serde(default)]
    pub ti_ms: Option<f64>,
    #[serde(default)]
    pub rf: RfConfig,
    #[serde(default)]
    pub slice: SliceConfig,
}

fn default_kind() -> FlipTrainKind {
    FlipTrainKind::Explicit
}

impl SequenceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_sequence(&self) -> Result<SequenceParams> {
        let n = self.n_tr;
        let spec = if self.flip_kind == FlipTrainKind::Explicit {
            FlipTrainSpec::explicit(self.explicit_deg.clone())
        } else if self.control_deg.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            FlipTrainSpec::sample(self.flip_kind, n, &mut rng)
        } else {
            FlipTrainSpec::new(self.flip_kind, n, self.control_deg.clone(), self.seed)
        };
        if spec.n_tr != n {
            return Err(Error::LengthMismatch { expected: n, got: spec.n_tr });
        }
        let flip_deg = generate_flip_train(&spec)?;
        let slice = SliceGrid::new(self.slice.thickness_mm, self.slice.n_z, self.slice.fov_factor)?;
        if self.rf.n_rf == 0 {
            return Err(Error::InvalidConfig("rf.n_rf must be at least 1".into()));
        }
        let mut rf = match self.rf.shape {
            RfShape::Gaussian => RfPulse::gaussian(self.rf.duration_ms, self.rf.n_rf, self.rf.time_bandwidth, self.slice.thickness_mm),
            RfShape::Hard => RfPulse::hard(self.rf.duration_ms),
        };
        rf.refocus_area_frac = self.rf.refocus_area_frac;
        let seq = SequenceParams {
            n_tr: n,
            flip_deg,
            tr_ms: self.tr_ms.expand(n, "tr_ms")?,
            te_ms: self.te_ms.expand(n, "te_ms")?,
            inversion: self.inversion,
            ti_ms: self.ti_ms.unwrap_or(0.5 * rf.duration_ms),
            rf,
            slice,
            flip_kind: self.flip_kind,
        };
        seq.validate()?;
        Ok(seq)
    }
}

/// Read and validate a sequence description file.
pub fn load_sequence(path: &Path) -> Result<SequenceParams> {
    SequenceConfig::load(path)?.to_sequence()
}

/// Single-column CSV with header `alpha_deg`.
pub fn write_flip_train_csv<W: Write>(mut out: W, train_deg: &[f64]) -> Result<()> {
    writeln!(out, "alpha_deg")?;
    for a in train_deg {
        writeln!(out, "{}", crate::csvio::fmt9(*a))?;
    }
    Ok(())
}
