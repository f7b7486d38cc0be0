//! Cramér-Rao flip-train design: Fisher information from signal derivatives,
//! a weighted CRLB-trace objective over Spline11 trains, and a differential
//! evolution optimizer.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{simulate_with_grad, EpgModel, SignalWithGrad};
use crate::epgbloch::EpgBlochConfig;
use crate::error::{Error, Result};
use crate::seqmodel::{spline_train, RfPulse, SequenceParams, SliceGrid, TissueParams};
use crate::surrogate::{gru_forward_batch, GruNetwork, SurrogateInput};

/// Parameters per tissue: T1, T2 and a proton-density scale.
pub const PARAMS_PER_TISSUE: usize = 3;
pub const SPLINE11_POINTS: usize = 11;

/// Block-diagonal Fisher information, one `block_size` block per tissue.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
    pub block_size: usize,
    pub noise_sigma: f64,
}

impl FisherInfo {
    pub fn n_blocks(&self) -> usize {
        self.matrix.nrows() / self.block_size
    }

    pub fn block(&self, b: usize) -> DMatrix<f64> {
        let o = b * self.block_size;
        self.matrix.view((o, o), (self.block_size, self.block_size)).into_owned()
    }

    /// Diagonal of the inverse, block by block. Fails on a singular block.
    pub fn crlb_diagonal(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.matrix.nrows());
        for b in 0..self.n_blocks() {
            out.extend(inverse_diagonal(&self.block(b))?);
        }
        Ok(out)
    }
}

/// Relative eigenvalue floor below which a Jacobi-scaled block is singular.
const SINGULAR_RCOND: f64 = 1e-13;

fn inverse_diagonal(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    let d: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Numeric("singular Fisher information".into()));
    }
    // unit-diagonal scaling so the conditioning test is scale free
    let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (d[i] * d[j]).sqrt());
    let eig = SymmetricEigen::new(scaled.clone());
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lo > SINGULAR_RCOND * n as f64) {
        return Err(Error::Numeric("singular Fisher information".into()));
    }
    let chol = scaled.cholesky().ok_or_else(|| Error::Numeric("singular Fisher information".into()))?;
    let inv = chol.inverse();
    Ok((0..n).map(|i| inv[(i, i)] / d[i]).collect())
}

/// `I_jk = (1/σ²) Re Σ_n ∂_j s_n conj(∂_k s_n)` for a single block of
/// derivative columns.
pub fn fisher_from_jacobian(columns: &[Vec<Complex64>], noise_sigma: f64) -> Result<FisherInfo> {
    check_sigma(noise_sigma)?;
    let p = columns.len();
    if p == 0 {
        return Err(Error::InvalidConfig("no parameters".into()));
    }
    let block = jacobian_block(columns, noise_sigma)?;
    Ok(FisherInfo { matrix: block, block_size: p, noise_sigma })
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("noise sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn jacobian_block(columns: &[Vec<Complex64>], sigma: f64) -> Result<DMatrix<f64>> {
    let p = columns.len();
    let n = columns[0].len();
    if let Some(bad) = columns.iter().find(|c| c.len() != n) {
        return Err(Error::LengthMismatch { expected: n, got: bad.len() });
    }
    let inv_var = 1.0 / (sigma * sigma);
    let mut m = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let v: f64 = columns[j].iter().zip(&columns[k]).map(|(a, b)| (a * b.conj()).re).sum();
            m[(j, k)] = v * inv_var;
            m[(k, j)] = v * inv_var;
        }
    }
    Ok(m)
}

/// Scales turning `(∂/∂log T1, ∂/∂log T2, s)` into `(∂/∂T1, ∂/∂T2, ∂/∂PD)`
/// with T in milliseconds.
pub fn tissue_param_scales(tissue: &TissueParams) -> [f64; 3] {
    [1.0 / (tissue.t1 * 1e3), 1.0 / (tissue.t2 * 1e3), 1.0]
}

/// Fisher information over `(T1, T2, PD)` for each tissue. `param_scales`
/// multiplies the log-T1 derivative, the log-T2 derivative and the signal
/// (the PD derivative at unit PD).
pub fn fisher_matrix(grads: &[SignalWithGrad], param_scales: &[[f64; 3]], noise_sigma: f64) -> Result<FisherInfo> {
    check_sigma(noise_sigma)?;
    if grads.is_empty() {
        return Err(Error::InvalidConfig("no target tissues".into()));
    }
    if grads.len() != param_scales.len() {
        return Err(Error::LengthMismatch { expected: grads.len(), got: param_scales.len() });
    }
    let p = PARAMS_PER_TISSUE * grads.len();
    let mut m = DMatrix::zeros(p, p);
    for (b, (g, sc)) in grads.iter().zip(param_scales).enumerate() {
        let cols: Vec<Vec<Complex64>> = [&g.ds_dlogt1, &g.ds_dlogt2, &g.s]
            .iter()
            .zip(sc)
            .map(|(c, &k)| c.iter().map(|v| v * k).collect())
            .collect();
        let blk = jacobian_block(&cols, noise_sigma)?;
        m.view_mut((b * 3, b * 3), (3, 3)).copy_from(&blk);
    }
    Ok(FisherInfo { matrix: m, block_size: PARAMS_PER_TISSUE, noise_sigma })
}

/// Signal engine used inside the objective.
#[derive(Debug, Clone, Copy)]
pub enum ObjectiveEngine<'a> {
    EpgBloch(EpgBlochConfig),
    Gru(&'a GruNetwork),
}

/// Weighted CRLB trace over a fixed-timing sequence whose flip train is a
/// Spline11 curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CrlbObjective {
    pub tissues: Vec<TissueParams>,
    /// `PARAMS_PER_TISSUE` weights per tissue, flattened.
    pub weights: Vec<f64>,
    pub te_ms: f64,
    pub tr_ms: f64,
    pub n_tr: usize,
    pub inversion: bool,
    pub ti_ms: f64,
    pub max_flip_deg: f64,
    pub noise_sigma: f64,
    pub rf: RfPulse,
    pub slice: SliceGrid,
}

impl CrlbObjective {
    /// Relative-variance weights `(1/T1², 1/T2², 0)` with PD as a nuisance.
    pub fn relative_weights(tissues: &[TissueParams]) -> Vec<f64> {
        tissues
            .iter()
            .flat_map(|t| {
                let s = tissue_param_scales(t);
                [s[0] * s[0], s[1] * s[1], 0.0]
            })
            .collect()
    }

    /// Fixed timing with relative weights and unit noise; the inversion, if
    /// any, is placed right after the excitation pulse's centre.
    pub fn new(
        tissues: Vec<TissueParams>,
        te_ms: f64,
        tr_ms: f64,
        n_tr: usize,
        inversion: bool,
        max_flip_deg: f64,
        rf: RfPulse,
        slice: SliceGrid,
    ) -> Self {
        let weights = Self::relative_weights(&tissues);
        let ti_ms = rf.duration_ms / 2.0;
        Self { tissues, weights, te_ms, tr_ms, n_tr, inversion, ti_ms, max_flip_deg, noise_sigma: 1.0, rf, slice }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tissues.is_empty() {
            return Err(Error::InvalidConfig("at least one target tissue is required".into()));
        }
        for t in &self.tissues {
            t.validate()?;
        }
        if self.weights.len() != PARAMS_PER_TISSUE * self.tissues.len() {
            return Err(Error::LengthMismatch { expected: PARAMS_PER_TISSUE * self.tissues.len(), got: self.weights.len() });
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::InvalidConfig("weights must be non-negative and not all zero".into()));
        }
        if !(self.max_flip_deg > 0.0) {
            return Err(Error::InvalidConfig("max flip must be positive".into()));
        }
        check_sigma(self.noise_sigma)?;
        self.sequence(&[0.0; SPLINE11_POINTS])?.validate()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, self.max_flip_deg); SPLINE11_POINTS]
    }

    /// Spline11 train, clipped to `[0, max_flip]` against spline overshoot.
    pub fn flip_train(&self, control_deg: &[f64]) -> Result<Vec<f64>> {
        if control_deg.len() != SPLINE11_POINTS {
            return Err(Error::LengthMismatch { expected: SPLINE11_POINTS, got: control_deg.len() });
        }
        if let Some(v) = control_deg.iter().find(|v| !(**v >= 0.0 && **v <= self.max_flip_deg)) {
            return Err(Error::InvalidConfig(format!("control point {v} outside [0, {}]", self.max_flip_deg)));
        }
        Ok(spline_train(self.n_tr, control_deg)?.into_iter().map(|a| a.clamp(0.0, self.max_flip_deg)).collect())
    }

    pub fn sequence(&self, control_deg: &[f64]) -> Result<SequenceParams> {
        let mut seq = SequenceParams::constant_timing(
            self.flip_train(control_deg)?,
            self.tr_ms,
            self.te_ms,
            self.rf.clone(),
            self.slice.clone(),
        );
        if self.inversion {
            seq = seq.with_inversion(self.ti_ms);
        }
        Ok(seq)
    }

    /// Objective from precomputed per-tissue derivatives; `+∞` if singular.
    pub fn value_from_grads(&self, grads: &[SignalWithGrad]) -> Result<f64> {
        let scales: Vec<[f64; 3]> = self.tissues.iter().map(tissue_param_scales).collect();
        let fim = fisher_matrix(grads, &scales, self.noise_sigma)?;
        Ok(match fim.crlb_diagonal() {
            Ok(diag) => diag.iter().zip(&self.weights).map(|(c, w)| c * w).sum(),
            Err(Error::Numeric(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        })
    }
}

/// `Σ_p w_p [FIM⁻¹]_pp` for one control vector.
pub fn crlb_trace(obj: &CrlbObjective, control_deg: &[f64], engine: ObjectiveEngine<'_>) -> Result<f64> {
    Ok(crlb_trace_batch(obj, &[control_deg.to_vec()], engine)?[0])
}

/// Objective values for a whole population. The surrogate engine evaluates
/// every (candidate, tissue) pair in one batched pass.
pub fn crlb_trace_batch(obj: &CrlbObjective, controls: &[Vec<f64>], engine: ObjectiveEngine<'_>) -> Result<Vec<f64>> {
    let nt = obj.tissues.len();
    let seqs: Vec<SequenceParams> = controls.iter().map(|c| obj.sequence(c)).collect::<Result<_>>()?;
    let grads: Vec<SignalWithGrad> = match engine {
        ObjectiveEngine::EpgBloch(cfg) => (0..seqs.len() * nt)
            .into_par_iter()
            .map(|i| simulate_with_grad(&obj.tissues[i % nt], &seqs[i / nt], &cfg, EpgModel::Bloch))
            .collect::<Result<_>>()?,
        ObjectiveEngine::Gru(net) => {
            if !matches!(net.n_out, 3 | 6) {
                return Err(Error::ShapeMismatch("the objective needs a network with derivative outputs".into()));
            }
            let inputs: Vec<SurrogateInput> =
                (0..seqs.len() * nt).map(|i| SurrogateInput::new(&obj.tissues[i % nt], &seqs[i / nt])).collect();
            gru_forward_batch(net, &inputs)?
        }
    };
    grads.chunks(nt).map(|g| obj.value_from_grads(g)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeConfig {
    /// Population multiplier: there are `population × dimension` candidates.
    pub population: usize,
    pub max_generations: usize,
    pub rel_tol: f64,
    pub mutation: f64,
    pub crossover: f64,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self { population: 10, max_generations: 1000, rel_tol: 0.002, mutation: 0.8, crossover: 0.9, seed: 0 }
    }
}

impl DeConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if dim == 0 {
            return Err(Error::InvalidConfig("empty search space".into()));
        }
        if self.population * dim < 4 {
            return Err(Error::InvalidConfig("differential evolution needs at least 4 candidates".into()));
        }
        if self.max_generations == 0 {
            return Err(Error::InvalidConfig("max_generations must be at least 1".into()));
        }
        if !(self.rel_tol >= 0.0) || !(self.mutation > 0.0 && self.mutation <= 2.0) || !(0.0..=1.0).contains(&self.crossover) {
            return Err(Error::InvalidConfig("bad tolerance, mutation or crossover constant".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Best objective so far, starting with the initial population.
    pub history: Vec<f64>,
    pub generations: usize,
    pub converged: bool,
    pub evaluations: usize,
}

/// DE/rand/1/bin over a box with Latin-hypercube initialisation, clipping of
/// mutants to the bounds and deferred (whole-generation) selection.
/// `eval` maps a batch of candidates to objective values.
pub fn differential_evolution<F>(mut eval: F, bounds: &[(f64, f64)], cfg: &DeConfig) -> Result<DeResult>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    let dim = bounds.len();
    cfg.validate(dim)?;
    if bounds.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::InvalidConfig("bounds must be finite with lo <= hi".into()));
    }
    let np = cfg.population * dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut pop: Vec<Vec<f64>> = vec![vec![0.0; dim]; np];
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..np).collect();
        for i in (1..np).rev() {
            strata.swap(i, rng.random_range(0..=i));
        }
        for (i, s) in strata.into_iter().enumerate() {
            let u = (s as f64 + rng.random::<f64>()) / np as f64;
            pop[i][d] = lo + u * (hi - lo);
        }
    }
    let mut energy = checked_eval(&mut eval, &pop)?;
    let mut evaluations = np;
    let argmin = |e: &[f64]| (0..e.len()).fold(0, |b, i| if e[i] < e[b] { i } else { b });
    let mut best = argmin(&energy);
    let mut history = vec![energy[best]];
    let mut converged = has_converged(&energy, cfg.rel_tol);
    let mut generations = 0;

    while !converged && generations < cfg.max_generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let mut pick = || loop {
                    let r = rng.random_range(0..np);
                    if r != i {
                        break r;
                    }
                };
                let r0 = pick();
                let r1 = loop {
                    let r = pick();
                    if r != r0 {
                        break r;
                    }
                };
                let r2 = loop {
                    let r = pick();
                    if r != r0 && r != r1 {
                        break r;
                    }
                };
                let j_rand = rng.random_range(0..dim);
                (0..dim)
                    .map(|j| {
                        if j == j_rand || rng.random::<f64>() < cfg.crossover {
                            let v = pop[r0][j] + cfg.mutation * (pop[r1][j] - pop[r2][j]);
                            v.clamp(bounds[j].0, bounds[j].1)
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let trial_energy = checked_eval(&mut eval, &trials)?;
        evaluations += np;
        for (i, (t, e)) in trials.into_iter().zip(trial_energy).enumerate() {
            if e <= energy[i] {
                pop[i] = t;
                energy[i] = e;
            }
        }
        best = argmin(&energy);
        history.push(energy[best]);
        generations += 1;
        converged = has_converged(&energy, cfg.rel_tol);
    }
    Ok(DeResult { best: pop[best].clone(), best_value: energy[best], history, generations, converged, evaluations })
}

fn checked_eval<F>(eval: &mut F, batch: &[Vec<f64>]) -> Result<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    let e = eval(batch)?;
    if e.len() != batch.len() {
        return Err(Error::LengthMismatch { expected: batch.len(), got: e.len() });
    }
    if e.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("objective returned NaN".into()));
    }
    Ok(e)
}

/// Population spread test: `std(E) <= rel_tol · |mean(E)|`.
fn has_converged(energy: &[f64], rel_tol: f64) -> bool {
    if energy.iter().any(|e| !e.is_finite()) {
        return false;
    }
    let n = energy.len() as f64;
    let mean = energy.iter().sum::<f64>() / n;
    let var = energy.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() <= rel_tol * mean.abs()
}

/// Optimize the Spline11 control points of `obj`.
pub fn optimize_de(obj: &CrlbObjective, de_cfg: &DeConfig, engine: ObjectiveEngine<'_>) -> Result<DeResult> {
    obj.validate()?;
    differential_evolution(|batch| crlb_trace_batch(obj, batch, engine), &obj.bounds(), de_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_objective(n_tr: usize) -> CrlbObjective {
        CrlbObjective::new(
            vec![TissueParams::new(0.9, 0.085), TissueParams::new(0.5, 0.065)],
            4.9,
            8.7,
            n_tr,
            true,
            90.0,
            RfPulse::gaussian(1.0, 4, 2.0, 3.0),
            SliceGrid::new(3.0, 4, 3.0).unwrap(),
        )
    }

    fn engine() -> ObjectiveEngine<'static> {
        ObjectiveEngine::EpgBloch(EpgBlochConfig::with_n_k(10))
    }

    #[test]
    fn linear_model_crlb() {
        let g: Vec<Complex64> = (0..50).map(|n| Complex64::new((n as f64 * 0.3).sin(), 0.2 * n as f64 / 50.0)).collect();
        let sigma = 0.37;
        let fim = fisher_from_jacobian(&[g.clone()], sigma).unwrap();
        let crlb = fim.crlb_diagonal().unwrap()[0];
        let expected = sigma * sigma / g.iter().map(|v| v.norm_sqr()).sum::<f64>();
        assert!((crlb - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn fim_bilinearity_and_zero() {
        let mut sg = SignalWithGrad::zeros(20);
        for n in 0..20 {
            let t = n as f64;
            sg.s[n] = Complex64::new(t.cos(), 0.3 * t.sin());
            sg.ds_dlogt1[n] = Complex64::new(0.1 * t, -0.2);
            sg.ds_dlogt2[n] = Complex64::new((0.7 * t).sin(), t.cos());
        }
        let sc = [[1.0, 1.0, 1.0]];
        let f1 = fisher_matrix(&[sg.clone()], &sc, 1.0).unwrap();
        let f2 = fisher_matrix(&[sg.clone()], &[[3.0, 3.0, 3.0]], 1.0).unwrap();
        assert!((&f2.matrix - &f1.matrix * 9.0).abs().max() < 1e-9);
        let c1 = f1.crlb_diagonal().unwrap();
        let c2 = f2.crlb_diagonal().unwrap();
        for (a, b) in c1.iter().zip(&c2) {
            assert!((a / 9.0 - b).abs() < 1e-9 * a);
        }
        let zero = fisher_matrix(&[SignalWithGrad::zeros(20)], &sc, 1.0).unwrap();
        assert!(zero.matrix.iter().all(|v| *v == 0.0));
        assert!(zero.crlb_diagonal().is_err());
        assert!(fisher_matrix(&[sg], &sc, 0.0).is_err());
    }

    #[test]
    fn zero_train_is_infinite() {
        let obj = small_objective(40);
        assert_eq!(crlb_trace(&obj, &[0.0; 11], engine()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn more_excitation_more_information() {
        let mut obj = small_objective(120);
        obj.tissues.truncate(1);
        obj.weights = CrlbObjective::relative_weights(&obj.tissues);
        let c30 = crlb_trace(&obj, &[30.0; 11], engine()).unwrap();
        let c5 = crlb_trace(&obj, &[5.0; 11], engine()).unwrap();
        assert!(c30 < c5, "{c30} vs {c5}");
    }

    #[test]
    fn tissue_order_does_not_matter() {
        let obj = small_objective(60);
        let mut swapped = obj.clone();
        swapped.tissues.reverse();
        swapped.weights = CrlbObjective::relative_weights(&swapped.tissues);
        let c: Vec<f64> = (0..11).map(|i| 10.0 + 6.0 * i as f64).collect();
        let a = crlb_trace(&obj, &c, engine()).unwrap();
        let b = crlb_trace(&swapped, &c, engine()).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn crlb_never_grows_with_extra_trs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tissue = [TissueParams::new(0.9, 0.085)];
        let scales = [tissue_param_scales(&tissue[0])];
        let cfg = EpgBlochConfig::with_n_k(10);
        let rf = RfPulse::gaussian(1.0, 4, 2.0, 3.0);
        let slice = SliceGrid::new(3.0, 4, 3.0).unwrap();
        for _ in 0..10 {
            let base: Vec<f64> = (0..40).map(|_| rng.random_range(5.0..80.0)).collect();
            let mut ext = base.clone();
            ext.extend((0..rng.random_range(1..20)).map(|_| rng.random_range(5.0..80.0)));
            let diag = |train: Vec<f64>| {
                let seq = SequenceParams::constant_timing(train, 8.7, 4.9, rf.clone(), slice.clone()).with_inversion(0.5);
                let g = simulate_with_grad(&tissue[0], &seq, &cfg, EpgModel::Bloch).unwrap();
                fisher_matrix(&[g], &scales, 1.0).unwrap().crlb_diagonal().unwrap()
            };
            let (a, b) = (diag(base), diag(ext));
            for (x, y) in a.iter().zip(&b) {
                assert!(y <= &(x * (1.0 + 1e-9)), "{y} > {x}");
            }
        }
    }

    #[test]
    fn fim_is_symmetric_psd() {
        let obj = small_objective(50);
        let seq = obj.sequence(&[45.0; 11]).unwrap();
        let grads: Vec<SignalWithGrad> = obj
            .tissues
            .iter()
            .map(|t| simulate_with_grad(t, &seq, &EpgBlochConfig::with_n_k(10), EpgModel::Bloch).unwrap())
            .collect();
        let scales: Vec<[f64; 3]> = obj.tissues.iter().map(tissue_param_scales).collect();
        let fim = fisher_matrix(&grads, &scales, 1.0).unwrap();
        assert!((&fim.matrix - fim.matrix.transpose()).abs().max() < 1e-12 * fim.matrix.abs().max());
        let eig = SymmetricEigen::new(fim.matrix.clone());
        assert!(eig.eigenvalues.iter().all(|v| *v >= -1e-10));
        // off-block entries stay zero
        assert_eq!(fim.matrix[(0, 3)], 0.0);
    }

    #[test]
    fn sphere_converges() {
        let cfg = DeConfig { max_generations: 200, rel_tol: 0.0, seed: 11, ..DeConfig::default() };
        let res = differential_evolution(
            |b| Ok(b.iter().map(|x| x.iter().map(|v| v * v).sum()).collect()),
            &[(-5.0, 5.0), (-5.0, 5.0)],
            &cfg,
        )
        .unwrap();
        assert!(res.best_value < 1e-6, "{}", res.best_value);
        assert!(res.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn de_rejects_bad_config() {
        let bad = DeConfig { population: 1, ..DeConfig::default() };
        assert!(differential_evolution(|b| Ok(vec![0.0; b.len()]), &[(0.0, 1.0)], &bad).is_err());
        assert!(differential_evolution(|b| Ok(vec![0.0; b.len()]), &[(1.0, 0.0)], &DeConfig::default()).is_err());
    }

    #[test]
    fn de_is_deterministic() {
        let f = |b: &[Vec<f64>]| Ok(b.iter().map(|x| (x[0] - 0.3).powi(2) + (x[1] * 3.0).sin().abs()).collect());
        let cfg = DeConfig { max_generations: 30, seed: 5, ..DeConfig::default() };
        let a = differential_evolution(f, &[(-1.0, 1.0); 2], &cfg).unwrap();
        let b = differential_evolution(f, &[(-1.0, 1.0); 2], &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn de_respects_bounds_and_elitism(seed in any::<u64>(), lo in -3.0f64..0.0, width in 0.1f64..4.0) {
            let bounds = vec![(lo, lo + width); 3];
            let mut outside = 0usize;
            let cfg = DeConfig { population: 5, max_generations: 25, seed, ..DeConfig::default() };
            let res = differential_evolution(
                |b| {
                    outside += b.iter().flatten().filter(|v| **v < lo || **v > lo + width).count();
                    Ok(b.iter().map(|x| x.iter().map(|v| (v - 0.5).powi(2)).sum()).collect())
                },
                &bounds,
                &cfg,
            )
            .unwrap();
            prop_assert_eq!(outside, 0);
            prop_assert!(res.history.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(res.history.len(), res.generations + 1);
        }
    }
}
