//! Parameter grids, dictionary generation and persistence, and matched-filter
//! search.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio::{LeReader, LeWriter};
use crate::epg::simulate_epg_conventional;
use crate::epgbloch::{simulate_epg_bloch, EpgBlochConfig};
use crate::error::{Error, Result};
use crate::seqmodel::{SequenceParams, TissueParams};
use crate::surrogate::{gru_signal, GruNetwork};

pub const DICT_MAGIC: [u8; 4] = *b"EPGD";
pub const DICT_VERSION: u32 = 1;

/// Signal engine used to fill a dictionary or evaluate an objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Epg,
    EpgBloch,
    Gru,
}

impl std::str::FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epg" => Ok(Engine::Epg),
            "epgbloch" => Ok(Engine::EpgBloch),
            "gru" => Ok(Engine::Gru),
            _ => Err(Error::InvalidConfig(format!("unknown engine {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrid {
    pub t1_values: Vec<f64>,
    pub t2_values: Vec<f64>,
    pub b1_values: Vec<f64>,
    /// `(i_t1, i_t2, i_b1)` with `t2 <= t1`, in lexicographic order.
    pub feasible: Vec<(u32, u32, u32)>,
}

impl ParamGrid {
    pub fn len(&self) -> usize {
        self.feasible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feasible.is_empty()
    }

    pub fn tissue(&self, atom: usize) -> TissueParams {
        let (i, j, b) = self.feasible[atom];
        TissueParams::new(self.t1_values[i as usize], self.t2_values[j as usize]).with_b1(self.b1_values[b as usize])
    }
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut v: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    v[0] = lo;
    v[n - 1] = hi;
    v
}

fn lin_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn check_axis(name: &str, lo: f64, hi: f64, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig(format!("{name} grid needs at least one value")));
    }
    if !(lo > 0.0 && lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} range must be positive")));
    }
    if n > 1 && !(hi > lo) {
        return Err(Error::InvalidConfig(format!("{name} range must be increasing")));
    }
    Ok(())
}

/// Log-spaced T1 and T2 (seconds), linear B1+, infeasible `t2 > t1` removed.
pub fn build_grid(
    t1_range: (f64, f64),
    n_t1: usize,
    t2_range: (f64, f64),
    n_t2: usize,
    b1_range: (f64, f64),
    n_b1: usize,
) -> Result<ParamGrid> {
    check_axis("T1", t1_range.0, t1_range.1, n_t1)?;
    check_axis("T2", t2_range.0, t2_range.1, n_t2)?;
    check_axis("B1", b1_range.0, b1_range.1, n_b1)?;
    let t1_values = log_space(t1_range.0, t1_range.1, n_t1);
    let t2_values = log_space(t2_range.0, t2_range.1, n_t2);
    let b1_values = lin_space(b1_range.0, b1_range.1, n_b1);
    let mut feasible = Vec::new();
    for (i, t1) in t1_values.iter().enumerate() {
        for (j, t2) in t2_values.iter().enumerate() {
            if t2 <= t1 {
                feasible.extend((0..n_b1).map(|b| (i as u32, j as u32, b as u32)));
            }
        }
    }
    if feasible.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(ParamGrid { t1_values, t2_values, b1_values, feasible })
}

/// Canonical hash of everything that determines a simulated signal.
pub fn sequence_fingerprint(seq: &SequenceParams) -> u64 {
    let mut h = Sha256::new();
    h.update((seq.n_tr as u64).to_le_bytes());
    for arr in [&seq.flip_deg, &seq.tr_ms, &seq.te_ms] {
        arr.iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    h.update([u8::from(seq.inversion)]);
    h.update(seq.ti_ms.to_le_bytes());
    h.update(seq.rf.duration_ms.to_le_bytes());
    h.update((seq.rf.n_rf as u64).to_le_bytes());
    seq.rf.samples.iter().for_each(|s| {
        h.update(s.re.to_le_bytes());
        h.update(s.im.to_le_bytes());
    });
    seq.rf.gradient_mt_per_m.iter().for_each(|g| h.update(g.to_le_bytes()));
    h.update(seq.rf.refocus_area_frac.to_le_bytes());
    seq.slice.z_positions_mm.iter().for_each(|z| h.update(z.to_le_bytes()));
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub grid: ParamGrid,
    pub n_tr: usize,
    /// Row-major `[n_atoms × n_tr]`, each row of unit L2 norm.
    pub atoms: Vec<Complex64>,
    /// L2 norm of each atom before normalization.
    pub norms: Vec<f64>,
    pub seq_fingerprint: u64,
}

impl Dictionary {
    pub fn n_atoms(&self) -> usize {
        self.norms.len()
    }

    pub fn atom(&self, i: usize) -> &[Complex64] {
        &self.atoms[i * self.n_tr..(i + 1) * self.n_tr]
    }

    pub fn matches_sequence(&self, seq: &SequenceParams) -> bool {
        self.seq_fingerprint == sequence_fingerprint(seq)
    }

    /// Build from unnormalized signals, one per feasible grid entry.
    pub fn from_signals(grid: ParamGrid, signals: Vec<Vec<Complex64>>, seq_fingerprint: u64) -> Result<Self> {
        if signals.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), got: signals.len() });
        }
        let n_tr = signals.first().map_or(0, Vec::len);
        let mut atoms = Vec::with_capacity(n_tr * signals.len());
        let mut norms = Vec::with_capacity(signals.len());
        for s in signals {
            if s.len() != n_tr {
                return Err(Error::LengthMismatch { expected: n_tr, got: s.len() });
            }
            let norm = l2_norm(&s);
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::ZeroSignal);
            }
            atoms.extend(s.iter().map(|v| v / norm));
            norms.push(norm);
        }
        Ok(Self { grid, n_tr, atoms, norms, seq_fingerprint })
    }
}

pub(crate) fn l2_norm(v: &[Complex64]) -> f64 {
    v.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt()
}

/// One atom per feasible grid entry, in grid order.
pub fn generate_dictionary(
    grid: &ParamGrid,
    seq: &SequenceParams,
    cfg: &EpgBlochConfig,
    engine: Engine,
    weights: Option<&GruNetwork>,
) -> Result<Dictionary> {
    if engine == Engine::Gru && weights.is_none() {
        return Err(Error::MissingWeights);
    }
    seq.validate()?;
    cfg.validate()?;
    let signals: Vec<Vec<Complex64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let t = grid.tissue(i);
            match engine {
                Engine::Epg => simulate_epg_conventional(&t, seq, cfg.n_k),
                Engine::EpgBloch => simulate_epg_bloch(&t, seq, cfg),
                Engine::Gru => gru_signal(weights.expect("checked"), &t, seq),
            }
        })
        .collect::<Result<_>>()?;
    Dictionary::from_signals(grid.clone(), signals, sequence_fingerprint(seq))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub index: usize,
    pub t1: f64,
    pub t2: f64,
    pub b1: f64,
    /// Scale such that `pd · (unnormalized atom)` is the least-squares fit.
    pub pd: Complex64,
    pub correlation: f64,
}

/// Matched filter: the atom maximizing `|⟨atom, signal⟩|`, lowest index on ties.
pub fn match_signal(signal: &[Complex64], dict: &Dictionary) -> Result<MatchResult> {
    if dict.n_atoms() == 0 {
        return Err(Error::EmptyDictionary);
    }
    if signal.len() != dict.n_tr {
        return Err(Error::LengthMismatch { expected: dict.n_tr, got: signal.len() });
    }
    let s_norm = l2_norm(signal);
    if !(s_norm > 0.0) {
        return Err(Error::ZeroSignal);
    }
    let mut best = 0usize;
    let mut best_ip = Complex64::new(0.0, 0.0);
    let mut best_mag = -1.0;
    for i in 0..dict.n_atoms() {
        let ip: Complex64 = dict.atom(i).iter().zip(signal).map(|(a, s)| a.conj() * s).sum();
        let mag = ip.norm_sqr();
        if mag > best_mag {
            best = i;
            best_ip = ip;
            best_mag = mag;
        }
    }
    let (i, j, b) = dict.grid.feasible[best];
    Ok(MatchResult {
        index: best,
        t1: dict.grid.t1_values[i as usize],
        t2: dict.grid.t2_values[j as usize],
        b1: dict.grid.b1_values[b as usize],
        pd: best_ip / dict.norms[best],
        correlation: best_ip.norm() / s_norm,
    })
}

/// Matches many signals in parallel; output order follows input order.
pub fn match_signals(signals: &[Vec<Complex64>], dict: &Dictionary) -> Result<Vec<MatchResult>> {
    signals.par_iter().map(|s| match_signal(s, dict)).collect()
}

pub fn write_dictionary<W: Write>(out: W, dict: &Dictionary) -> Result<()> {
    let mut w = LeWriter::new(out);
    let g = &dict.grid;
    w.bytes(&DICT_MAGIC)?;
    w.u32(DICT_VERSION)?;
    w.u64(dict.n_atoms() as u64)?;
    w.u32(dict.n_tr as u32)?;
    w.u32(g.t1_values.len() as u32)?;
    w.u32(g.t2_values.len() as u32)?;
    w.u32(g.b1_values.len() as u32)?;
    w.f64s(&g.t1_values)?;
    w.f64s(&g.t2_values)?;
    w.f64s(&g.b1_values)?;
    w.u64(dict.seq_fingerprint)?;
    for (a, &(i, j, b)) in g.feasible.iter().enumerate() {
        w.u32(i)?;
        w.u32(j)?;
        w.u32(b)?;
        w.f64(dict.norms[a])?;
        for v in dict.atom(a) {
            w.f32(v.re as f32)?;
            w.f32(v.im as f32)?;
        }
    }
    w.into_inner().flush()?;
    Ok(())
}

/// Atoms come back at single precision and are not renormalized, so a load
/// followed by a save reproduces the file byte for byte.
pub fn read_dictionary<R: Read>(input: R) -> Result<Dictionary> {
    let mut r = LeReader::new(input);
    r.magic(DICT_MAGIC)?;
    let version = r.u32()?;
    if version != DICT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_atoms = r.u64()? as usize;
    let n_tr = r.u32()? as usize;
    let (n_t1, n_t2, n_b1) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let t1_values = r.f64s(n_t1)?;
    let t2_values = r.f64s(n_t2)?;
    let b1_values = r.f64s(n_b1)?;
    let seq_fingerprint = r.u64()?;
    if n_atoms == 0 {
        return Err(Error::EmptyDictionary);
    }
    let mut feasible = Vec::with_capacity(n_atoms);
    let mut norms = Vec::with_capacity(n_atoms);
    let mut atoms = Vec::with_capacity(n_atoms.saturating_mul(n_tr).min(1 << 28));
    for _ in 0..n_atoms {
        let (i, j, b) = (r.u32()?, r.u32()?, r.u32()?);
        if i as usize >= n_t1 || j as usize >= n_t2 || b as usize >= n_b1 {
            return Err(Error::Format(format!("atom index ({i}, {j}, {b}) outside the grid")));
        }
        feasible.push((i, j, b));
        norms.push(r.f64()?);
        for _ in 0..n_tr {
            let re = r.f32()?;
            let im = r.f32()?;
            atoms.push(Complex64::new(f64::from(re), f64::from(im)));
        }
    }
    r.finish()?;
    let grid = ParamGrid { t1_values, t2_values, b1_values, feasible };
    Ok(Dictionary { grid, n_tr, atoms, norms, seq_fingerprint })
}

pub fn save_dictionary(dict: &Dictionary, path: &Path) -> Result<()> {
    write_dictionary(BufWriter::new(File::create(path)?), dict)
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    read_dictionary(BufReader::new(File::open(path)?))
}
