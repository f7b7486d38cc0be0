//! Stacked-GRU surrogate: inference, the `GRUW` weight format, the `EPGT`
//! training-set format and accuracy evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::{Complex, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{simulate_with_grad, EpgModel, SignalWithGrad};
use crate::binio::{LeReader, LeWriter};
use crate::epgbloch::EpgBlochConfig;
use crate::error::{Error, Result};
use crate::seqmodel::{
    sample_training_sequence_of_kind, FlipTrainKind, SequenceParams, TimingMode, TissueParams, TrainingSetup,
};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"GRUW";
pub const WEIGHTS_VERSION: u32 = 1;
/// `h' = (1 - z) h + z h̃`, one bias per gate, reset applied before `U_h`.
pub const GRU_CONVENTION: u8 = 1;
pub const DATASET_MAGIC: [u8; 4] = *b"EPGT";
pub const DATASET_VERSION: u32 = 1;

pub const STANDARD_LAYERS: usize = 3;
pub const STANDARD_HIDDEN: usize = 32;
pub const STANDARD_INPUTS: usize = 5;
/// Trainable-parameter figure quoted for the reference architecture.
pub const REFERENCE_PARAMETER_COUNT: usize = 16_643;
pub const SUPPORTED_OUTPUTS: [usize; 4] = [1, 2, 3, 6];

/// Weights of one GRU layer, matrices row-major `[hidden × fan_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerWeights {
    pub input: usize,
    pub hidden: usize,
    pub w_z: Vec<f32>,
    pub w_r: Vec<f32>,
    pub w_h: Vec<f32>,
    pub u_z: Vec<f32>,
    pub u_r: Vec<f32>,
    pub u_h: Vec<f32>,
    pub b_z: Vec<f32>,
    pub b_r: Vec<f32>,
    pub b_h: Vec<f32>,
}

impl GruLayerWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let wi = vec![0.0; hidden * input];
        let wh = vec![0.0; hidden * hidden];
        let b = vec![0.0; hidden];
        Self {
            input,
            hidden,
            w_z: wi.clone(),
            w_r: wi.clone(),
            w_h: wi,
            u_z: wh.clone(),
            u_r: wh.clone(),
            u_h: wh,
            b_z: b.clone(),
            b_r: b.clone(),
            b_h: b,
        }
    }

    pub fn random<R: Rng>(input: usize, hidden: usize, scale: f32, rng: &mut R) -> Self {
        let mut l = Self::zeros(input, hidden);
        for t in l.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
        l
    }

    fn tensors(&self) -> [&Vec<f32>; 9] {
        [&self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f32>; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    fn check_shapes(&self) -> Result<()> {
        let (i, h) = (self.input, self.hidden);
        let expected = [h * i, h * i, h * i, h * h, h * h, h * h, h, h, h];
        for (t, e) in self.tensors().iter().zip(expected) {
            if t.len() != e {
                return Err(Error::ShapeMismatch(format!("GRU tensor has {} entries, expected {e}", t.len())));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Affine input scaling `x' = x · scale + offset` and output scaling of the
/// derivative channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScaling {
    /// For `(log T1 [s], log T2 [s], TR [ms], TE [ms], flip [deg])`.
    pub in_scale: [f64; 5],
    pub in_offset: [f64; 5],
    /// Multiplies the `d/d log T1` and `d/d log T2` output channels.
    pub deriv_scale: [f64; 2],
}

impl Default for InputScaling {
    fn default() -> Self {
        Self {
            in_scale: [1.0, 1.0, 0.1, 0.1, std::f64::consts::PI / 180.0],
            in_offset: [0.0; 5],
            deriv_scale: [1.0; 2],
        }
    }
}

impl InputScaling {
    fn to_array(self) -> [f64; 12] {
        let mut a = [0.0; 12];
        a[..5].copy_from_slice(&self.in_scale);
        a[5..10].copy_from_slice(&self.in_offset);
        a[10..].copy_from_slice(&self.deriv_scale);
        a
    }

    fn from_array(a: &[f64]) -> Self {
        let mut s = Self::default();
        s.in_scale.copy_from_slice(&a[..5]);
        s.in_offset.copy_from_slice(&a[5..10]);
        s.deriv_scale.copy_from_slice(&a[10..12]);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruNetwork {
    pub n_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub layers: Vec<GruLayerWeights>,
    /// `[n_layers·hidden × 3]`, maps M0 to the initial hidden states.
    pub init_w: Vec<f32>,
    pub init_b: Vec<f32>,
    /// `[n_out × hidden]`
    pub out_w: Vec<f32>,
    pub out_b: Vec<f32>,
    pub scaling: InputScaling,
}

impl GruNetwork {
    pub fn zeros(n_layers: usize, n_in: usize, hidden: usize, n_out: usize) -> Self {
        let layers = (0..n_layers).map(|l| GruLayerWeights::zeros(if l == 0 { n_in } else { hidden }, hidden)).collect();
        Self {
            n_in,
            hidden,
            n_out,
            layers,
            init_w: vec![0.0; n_layers * hidden * 3],
            init_b: vec![0.0; n_layers * hidden],
            out_w: vec![0.0; n_out * hidden],
            out_b: vec![0.0; n_out],
            scaling: InputScaling::default(),
        }
    }

    /// The three-layer, 32-unit architecture.
    pub fn standard(n_out: usize) -> Self {
        Self::zeros(STANDARD_LAYERS, STANDARD_INPUTS, STANDARD_HIDDEN, n_out)
    }

    pub fn random(n_layers: usize, n_in: usize, hidden: usize, n_out: usize, scale: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(n_layers, n_in, hidden, n_out);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            *layer = GruLayerWeights::random(if l == 0 { n_in } else { hidden }, hidden, scale, &mut rng);
        }
        for t in [&mut net.init_w, &mut net.init_b, &mut net.out_w, &mut net.out_b] {
            t.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
        net
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let fan_in = if l == 0 { self.n_in } else { self.hidden };
            if layer.input != fan_in || layer.hidden != self.hidden {
                return Err(Error::ShapeMismatch(format!("layer {l} has shape {}×{}", layer.hidden, layer.input)));
            }
            layer.check_shapes()?;
        }
        let nl = self.n_layers();
        let expect = [
            (self.init_w.len(), nl * self.hidden * 3, "init weight"),
            (self.init_b.len(), nl * self.hidden, "init bias"),
            (self.out_w.len(), self.n_out * self.hidden, "output weight"),
            (self.out_b.len(), self.n_out, "output bias"),
        ];
        for (got, want, name) in expect {
            if got != want {
                return Err(Error::ShapeMismatch(format!("{name} has {got} entries, expected {want}")));
            }
        }
        Ok(())
    }
}

pub fn count_parameters(net: &GruNetwork) -> usize {
    net.layers.iter().map(GruLayerWeights::n_params).sum::<usize>()
        + net.init_w.len()
        + net.init_b.len()
        + net.out_w.len()
        + net.out_b.len()
}

/// Dot product with a fixed eight-lane accumulation order.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// One GRU update:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ∘ h) + b_h)`, `h' = (1 - z) ∘ h + z ∘ h̃`.
pub fn gru_cell(x: &[f32], h: &[f32], w: &GruLayerWeights) -> Result<Vec<f32>> {
    if x.len() != w.input || h.len() != w.hidden {
        return Err(Error::ShapeMismatch(format!(
            "cell expects input {} and hidden {}, got {} and {}",
            w.input,
            w.hidden,
            x.len(),
            h.len()
        )));
    }
    w.check_shapes()?;
    let mut out = vec![0.0; w.hidden];
    let mut scratch = vec![0.0; w.hidden];
    cell_into(x, h, w, &mut scratch, &mut out);
    Ok(out)
}

fn cell_into(x: &[f32], h: &[f32], w: &GruLayerWeights, rh: &mut [f32], out: &mut [f32]) {
    let (ni, nh) = (w.input, w.hidden);
    for i in 0..nh {
        let r = sigmoid(dot(&w.w_r[i * ni..(i + 1) * ni], x) + dot(&w.u_r[i * nh..(i + 1) * nh], h) + w.b_r[i]);
        rh[i] = r * h[i];
    }
    for i in 0..nh {
        let z = sigmoid(dot(&w.w_z[i * ni..(i + 1) * ni], x) + dot(&w.u_z[i * nh..(i + 1) * nh], h) + w.b_z[i]);
        let cand = (dot(&w.w_h[i * ni..(i + 1) * ni], x) + dot(&w.u_h[i * nh..(i + 1) * nh], rh) + w.b_h[i]).tanh();
        out[i] = (1.0 - z) * h[i] + z * cand;
    }
}

/// Network inputs for one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateInput {
    /// `(ln T1, ln T2)` with T in seconds.
    pub theta: (f64, f64),
    /// Per TR `(tr_ms, te_ms, flip_deg)`.
    pub beta_seq: Vec<(f64, f64, f64)>,
    pub m0: [f64; 3],
}

impl SurrogateInput {
    /// An inversion pulse is presented to the network as `M0 = (0, 0, -1)`.
    pub fn new(tissue: &TissueParams, seq: &SequenceParams) -> Self {
        let m0 = if seq.inversion { [0.0, 0.0, -1.0] } else { tissue.m0 };
        Self {
            theta: (tissue.t1.ln(), tissue.t2.ln()),
            beta_seq: (0..seq.n_tr).map(|n| (seq.tr_ms[n], seq.te_ms[n], seq.flip_deg[n])).collect(),
            m0,
        }
    }

    pub fn n_tr(&self) -> usize {
        self.beta_seq.len()
    }

    /// True when every input lies inside the ranges the surrogate is trained on.
    pub fn in_training_range(&self) -> bool {
        let (l1, l2) = self.theta;
        let within = |v: f64, lo: f64, hi: f64| v >= lo - 1e-12 && v <= hi + 1e-12;
        within(l1, 0.1f64.ln(), 5.0f64.ln())
            && within(l2, 0.01f64.ln(), 2.0f64.ln())
            && l2 <= l1 + 1e-12
            && self.beta_seq.iter().all(|&(tr, te, a)| {
                within(tr, 5.0, 20.0) && within(te / tr, 0.3, 0.7) && within(a, 0.0, 120.0)
            })
    }

    fn scaled(&self, s: &InputScaling, n: usize) -> [f32; 5] {
        let (tr, te, a) = self.beta_seq[n];
        let raw = [self.theta.0, self.theta.1, tr, te, a];
        let mut x = [0.0f32; 5];
        for i in 0..5 {
            x[i] = (raw[i] * s.in_scale[i] + s.in_offset[i]) as f32;
        }
        x
    }
}

fn check_forward(net: &GruNetwork) -> Result<()> {
    net.validate()?;
    if net.n_in != STANDARD_INPUTS {
        return Err(Error::ShapeMismatch(format!("network takes {} inputs, expected 5", net.n_in)));
    }
    if !SUPPORTED_OUTPUTS.contains(&net.n_out) {
        return Err(Error::ShapeMismatch(format!("unsupported output width {}", net.n_out)));
    }
    Ok(())
}

/// Raw output channels, `[n_tr][n_out]`.
pub fn gru_forward_raw(net: &GruNetwork, input: &SurrogateInput) -> Result<Vec<Vec<f32>>> {
    check_forward(net)?;
    Ok(forward_batch_raw(net, std::slice::from_ref(input)).pop().expect("one sample"))
}

/// Lockstep evaluation of equally long inputs. Every dot product is taken in
/// the same order as in the single-sample path.
fn forward_batch_raw(net: &GruNetwork, inputs: &[SurrogateInput]) -> Vec<Vec<Vec<f32>>> {
    let nh = net.hidden;
    let nl = net.n_layers();
    let b = inputs.len();
    let n_tr = inputs.first().map_or(0, SurrogateInput::n_tr);
    // h[sample][layer]
    let mut h: Vec<Vec<Vec<f32>>> = inputs
        .iter()
        .map(|inp| {
            let m0 = inp.m0.map(|v| v as f32);
            (0..nl)
                .map(|l| {
                    (0..nh)
                        .map(|i| {
                            let row = l * nh + i;
                            dot(&net.init_w[row * 3..row * 3 + 3], &m0) + net.init_b[row]
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut next = vec![0.0f32; nh];
    let mut scratch = vec![0.0f32; nh];
    let zero_top = vec![0.0f32; nh];
    let mut out = vec![Vec::with_capacity(n_tr); b];
    for n in 0..n_tr {
        for l in 0..nl {
            for s in 0..b {
                let x_owned;
                let x: &[f32] = if l == 0 {
                    x_owned = inputs[s].scaled(&net.scaling, n);
                    &x_owned
                } else {
                    &h[s][l - 1]
                };
                cell_into(x, &h[s][l], &net.layers[l], &mut scratch, &mut next);
                h[s][l].copy_from_slice(&next);
            }
        }
        for s in 0..b {
            let top = if nl == 0 { &zero_top } else { &h[s][nl - 1] };
            let y: Vec<f32> =
                (0..net.n_out).map(|o| dot(&net.out_w[o * nh..(o + 1) * nh], top) + net.out_b[o]).collect();
            out[s].push(y);
        }
    }
    out
}

fn decode_outputs(net: &GruNetwork, raw: &[Vec<f32>]) -> SignalWithGrad {
    let c = |re: f32, im: f32| Complex64::new(f64::from(re), f64::from(im));
    let [g1, g2] = net.scaling.deriv_scale;
    let mut sg = SignalWithGrad::zeros(raw.len());
    for (n, y) in raw.iter().enumerate() {
        match net.n_out {
            1 => sg.s[n] = c(y[0], 0.0),
            2 => sg.s[n] = c(y[0], y[1]),
            3 => {
                sg.s[n] = c(y[0], 0.0);
                sg.ds_dlogt1[n] = c(y[1], 0.0) * g1;
                sg.ds_dlogt2[n] = c(y[2], 0.0) * g2;
            }
            _ => {
                sg.s[n] = c(y[0], y[1]);
                sg.ds_dlogt1[n] = c(y[2], y[3]) * g1;
                sg.ds_dlogt2[n] = c(y[4], y[5]) * g2;
            }
        }
    }
    sg
}

/// Signal and log-parameter derivatives predicted by the network. Channels
/// the network does not produce are returned as zero.
pub fn gru_forward(net: &GruNetwork, input: &SurrogateInput) -> Result<SignalWithGrad> {
    Ok(decode_outputs(net, &gru_forward_raw(net, input)?))
}

/// Batched inference over inputs of equal length, parallel across chunks.
pub fn gru_forward_batch(net: &GruNetwork, inputs: &[SurrogateInput]) -> Result<Vec<SignalWithGrad>> {
    check_forward(net)?;
    if let Some(first) = inputs.first() {
        if let Some(bad) = inputs.iter().find(|i| i.n_tr() != first.n_tr()) {
            return Err(Error::LengthMismatch { expected: first.n_tr(), got: bad.n_tr() });
        }
    }
    const CHUNK: usize = 16;
    let chunks: Vec<Vec<SignalWithGrad>> = inputs
        .par_chunks(CHUNK)
        .map(|c| forward_batch_raw(net, c).iter().map(|r| decode_outputs(net, r)).collect())
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

pub fn gru_signal(net: &GruNetwork, tissue: &TissueParams, seq: &SequenceParams) -> Result<Vec<Complex64>> {
    Ok(gru_forward(net, &SurrogateInput::new(tissue, seq))?.s)
}

fn check_architecture(n_layers: usize, hidden: usize, n_in: usize, n_out: usize) -> Result<()> {
    if n_layers != STANDARD_LAYERS || hidden != STANDARD_HIDDEN || n_in != STANDARD_INPUTS {
        return Err(Error::ShapeMismatch(format!(
            "weight files hold {STANDARD_LAYERS} layers × {STANDARD_HIDDEN} units with {STANDARD_INPUTS} inputs, \
             got {n_layers} × {hidden} with {n_in}"
        )));
    }
    if !SUPPORTED_OUTPUTS.contains(&n_out) {
        return Err(Error::ShapeMismatch(format!("unsupported output width {n_out}")));
    }
    Ok(())
}

pub fn write_weights<W: Write>(out: W, net: &GruNetwork) -> Result<()> {
    net.validate()?;
    check_architecture(net.n_layers(), net.hidden, net.n_in, net.n_out)?;
    let mut w = LeWriter::new(out);
    w.bytes(&WEIGHTS_MAGIC)?;
    w.u32(WEIGHTS_VERSION)?;
    w.u8(GRU_CONVENTION)?;
    w.u32(net.n_layers() as u32)?;
    w.u32(net.hidden as u32)?;
    w.u32(net.n_in as u32)?;
    w.u32(net.n_out as u32)?;
    w.f64s(&net.scaling.to_array())?;
    for layer in &net.layers {
        for t in layer.tensors() {
            w.f32s(t)?;
        }
    }
    w.f32s(&net.init_w)?;
    w.f32s(&net.init_b)?;
    w.f32s(&net.out_w)?;
    w.f32s(&net.out_b)?;
    w.into_inner().flush()?;
    Ok(())
}

pub fn read_weights<R: Read>(input: R) -> Result<GruNetwork> {
    let mut r = LeReader::new(input);
    r.magic(WEIGHTS_MAGIC)?;
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let convention = r.u8()?;
    if convention != GRU_CONVENTION {
        return Err(Error::Format(format!("GRU convention {convention} is not supported (expected {GRU_CONVENTION})")));
    }
    let n_layers = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let n_in = r.u32()? as usize;
    let n_out = r.u32()? as usize;
    check_architecture(n_layers, hidden, n_in, n_out)?;
    let scaling = InputScaling::from_array(&r.f64s(12)?);
    let mut net = GruNetwork::zeros(n_layers, n_in, hidden, n_out);
    net.scaling = scaling;
    for layer in net.layers.iter_mut() {
        for t in layer.tensors_mut() {
            *t = r.f32s(t.len())?;
        }
    }
    net.init_w = r.f32s(net.init_w.len())?;
    net.init_b = r.f32s(net.init_b.len())?;
    net.out_w = r.f32s(net.out_w.len())?;
    net.out_b = r.f32s(net.out_b.len())?;
    r.finish()?;
    Ok(net)
}

pub fn save_weights(net: &GruNetwork, path: &Path) -> Result<()> {
    write_weights(BufWriter::new(File::create(path)?), net)
}

pub fn load_weights(path: &Path) -> Result<GruNetwork> {
    read_weights(BufReader::new(File::open(path)?))
}

// --- training data ----------------------------------------------------------

/// One simulated training example, stored at single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub kind: FlipTrainKind,
    pub inversion: bool,
    /// Seconds.
    pub t1: f64,
    pub t2: f64,
    pub tr_ms: Vec<f32>,
    pub te_ms: Vec<f32>,
    pub flip_deg: Vec<f32>,
    pub signal: Vec<Complex<f32>>,
    pub ds_dlogt1: Vec<Complex<f32>>,
    pub ds_dlogt2: Vec<Complex<f32>>,
}

impl TrainingRecord {
    pub fn n_tr(&self) -> usize {
        self.tr_ms.len()
    }

    pub fn surrogate_input(&self) -> SurrogateInput {
        SurrogateInput {
            theta: (self.t1.ln(), self.t2.ln()),
            beta_seq: (0..self.n_tr())
                .map(|n| (f64::from(self.tr_ms[n]), f64::from(self.te_ms[n]), f64::from(self.flip_deg[n])))
                .collect(),
            m0: if self.inversion { [0.0, 0.0, -1.0] } else { [0.0, 0.0, 1.0] },
        }
    }

    pub fn reference(&self) -> SignalWithGrad {
        let up = |v: &[Complex<f32>]| v.iter().map(|c| Complex64::new(f64::from(c.re), f64::from(c.im))).collect();
        SignalWithGrad { s: up(&self.signal), ds_dlogt1: up(&self.ds_dlogt1), ds_dlogt2: up(&self.ds_dlogt2) }
    }

    fn from_simulation(kind: FlipTrainKind, tissue: &TissueParams, seq: &SequenceParams, sg: &SignalWithGrad) -> Self {
        let down = |v: &[f64]| v.iter().map(|x| *x as f32).collect();
        let downc = |v: &[Complex64]| v.iter().map(|c| Complex::new(c.re as f32, c.im as f32)).collect();
        Self {
            kind,
            inversion: seq.inversion,
            t1: tissue.t1,
            t2: tissue.t2,
            tr_ms: down(&seq.tr_ms),
            te_ms: down(&seq.te_ms),
            flip_deg: down(&seq.flip_deg),
            signal: downc(&sg.s),
            ds_dlogt1: downc(&sg.ds_dlogt1),
            ds_dlogt2: downc(&sg.ds_dlogt2),
        }
    }
}

pub struct DatasetWriter<W: Write> {
    w: LeWriter<W>,
    n_tr: usize,
    remaining: u64,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(out: W, n_records: u64, n_tr: usize) -> Result<Self> {
        let mut w = LeWriter::new(out);
        w.bytes(&DATASET_MAGIC)?;
        w.u32(DATASET_VERSION)?;
        w.u64(n_records)?;
        w.u32(n_tr as u32)?;
        Ok(Self { w, n_tr, remaining: n_records })
    }

    pub fn push(&mut self, rec: &TrainingRecord) -> Result<()> {
        if self.remaining == 0 {
            return Err(Error::Format("more records than declared in the header".into()));
        }
        let arrays = [rec.tr_ms.len(), rec.te_ms.len(), rec.flip_deg.len(), rec.signal.len(), rec.ds_dlogt1.len(), rec.ds_dlogt2.len()];
        if let Some(&bad) = arrays.iter().find(|&&l| l != self.n_tr) {
            return Err(Error::LengthMismatch { expected: self.n_tr, got: bad });
        }
        self.w.u8(rec.kind.code())?;
        self.w.u8(u8::from(rec.inversion))?;
        self.w.f64(rec.t1)?;
        self.w.f64(rec.t2)?;
        self.w.f32s(&rec.tr_ms)?;
        self.w.f32s(&rec.te_ms)?;
        self.w.f32s(&rec.flip_deg)?;
        for arr in [&rec.signal, &rec.ds_dlogt1, &rec.ds_dlogt2] {
            for c in arr.iter() {
                self.w.f32(c.re)?;
                self.w.f32(c.im)?;
            }
        }
        self.remaining -= 1;
        Ok(())
    }

    pub fn finish(self) -> Result<W> {
        if self.remaining != 0 {
            return Err(Error::Format(format!("{} declared records were never written", self.remaining)));
        }
        let mut inner = self.w.into_inner();
        inner.flush()?;
        Ok(inner)
    }
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<TrainingRecord>> {
    let mut r = LeReader::new(input);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = r.u64()?;
    let n_tr = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20) as usize);
    for _ in 0..n {
        let code = r.u8()?;
        let kind = FlipTrainKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown train kind {code}")))?;
        let inversion = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("inversion flag {v}"))),
        };
        let t1 = r.f64()?;
        let t2 = r.f64()?;
        let tr_ms = r.f32s(n_tr)?;
        let te_ms = r.f32s(n_tr)?;
        let flip_deg = r.f32s(n_tr)?;
        let mut complex = || -> Result<Vec<Complex<f32>>> {
            (0..n_tr).map(|_| Ok(Complex::new(r.f32()?, r.f32()?))).collect()
        };
        let signal = complex()?;
        let ds_dlogt1 = complex()?;
        let ds_dlogt2 = complex()?;
        out.push(TrainingRecord { kind, inversion, t1, t2, tr_ms, te_ms, flip_deg, signal, ds_dlogt1, ds_dlogt2 });
    }
    r.finish()?;
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<TrainingRecord>> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportOptions {
    pub setup: TrainingSetup,
    pub cfg: EpgBlochConfig,
    /// Records simulated per parallel batch before being written out.
    pub batch: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self { setup: TrainingSetup::default(), cfg: EpgBlochConfig::default(), batch: 64 }
    }
}

/// Log-uniform draw of `(T1, T2)` in seconds with `T1 >= T2`.
pub fn sample_training_tissue<R: Rng>(rng: &mut R) -> TissueParams {
    let (a1, b1) = (0.1f64.ln(), 5.0f64.ln());
    let (a2, b2) = (0.01f64.ln(), 2.0f64.ln());
    loop {
        let t1 = rng.random_range(a1..=b1).exp();
        let t2 = rng.random_range(a2..=b2).exp();
        if t1 >= t2 {
            return TissueParams::new(t1, t2);
        }
    }
}

/// Record `index` of the export stream with the given seed. Kinds cycle
/// through the five families so every family gets an equal share.
pub fn training_record(seed: u64, index: u64, opts: &ExportOptions) -> Result<TrainingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let kind = FlipTrainKind::RANDOM[(index % FlipTrainKind::RANDOM.len() as u64) as usize];
    let tissue = sample_training_tissue(&mut rng);
    let mode = if rng.random_bool(0.5) { TimingMode::ConstTiming } else { TimingMode::VaryingTiming };
    let seq = sample_training_sequence_of_kind(&opts.setup, kind, &mut rng, mode)?;
    let sg = simulate_with_grad(&tissue, &seq, &opts.cfg, EpgModel::Bloch)?;
    Ok(TrainingRecord::from_simulation(kind, &tissue, &seq, &sg))
}

pub fn export_training_set_to<W: Write>(out: W, n_signals: u64, seed: u64, opts: &ExportOptions) -> Result<W> {
    if n_signals == 0 {
        return Err(Error::InvalidConfig("n_signals must be at least 1".into()));
    }
    let mut w = DatasetWriter::new(out, n_signals, opts.setup.n_tr)?;
    let batch = opts.batch.max(1) as u64;
    let mut start = 0;
    while start < n_signals {
        let end = (start + batch).min(n_signals);
        let recs: Vec<TrainingRecord> =
            (start..end).into_par_iter().map(|i| training_record(seed, i, opts)).collect::<Result<_>>()?;
        recs.iter().try_for_each(|r| w.push(r))?;
        start = end;
    }
    w.finish()
}

pub fn export_training_set(n_signals: u64, seed: u64, out_path: &Path, opts: &ExportOptions) -> Result<()> {
    export_training_set_to(BufWriter::new(File::create(out_path)?), n_signals, seed, opts)?;
    Ok(())
}

// --- evaluation ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct KindNrmse {
    pub kind: FlipTrainKind,
    pub n_records: usize,
    pub signal: f64,
    /// Absent when the network emits no derivative channels.
    pub d_logt1: Option<f64>,
    pub d_logt2: Option<f64>,
}

#[derive(Default)]
struct Acc {
    n: usize,
    err: [f64; 3],
    refp: [f64; 3],
}

/// Per-kind NRMSE, normalized by the RMS of the reference over all records of
/// that kind. Only the components the network produces are compared.
pub fn nrmse_table(records: &[TrainingRecord], predictions: &[SignalWithGrad], n_out: usize) -> Result<Vec<KindNrmse>> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("dataset has no records".into()));
    }
    if records.len() != predictions.len() {
        return Err(Error::LengthMismatch { expected: records.len(), got: predictions.len() });
    }
    let real_only = matches!(n_out, 1 | 3);
    let has_deriv = matches!(n_out, 3 | 6);
    let mut by_kind: BTreeMap<u8, Acc> = BTreeMap::new();
    for (rec, pred) in records.iter().zip(predictions) {
        let reference = rec.reference();
        let acc = by_kind.entry(rec.kind.code()).or_default();
        acc.n += 1;
        let lanes = [(&reference.s, &pred.s), (&reference.ds_dlogt1, &pred.ds_dlogt1), (&reference.ds_dlogt2, &pred.ds_dlogt2)];
        for (c, (r, p)) in lanes.iter().enumerate() {
            if r.len() != p.len() {
                return Err(Error::LengthMismatch { expected: r.len(), got: p.len() });
            }
            for (a, b) in r.iter().zip(p.iter()) {
                if real_only {
                    acc.err[c] += (a.re - b.re).powi(2);
                    acc.refp[c] += a.re * a.re;
                } else {
                    acc.err[c] += (a - b).norm_sqr();
                    acc.refp[c] += a.norm_sqr();
                }
            }
        }
    }
    let ratio = |e: f64, r: f64| if r > 0.0 { (e / r).sqrt() } else if e == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(by_kind
        .into_iter()
        .map(|(code, a)| KindNrmse {
            kind: FlipTrainKind::from_code(code).expect("valid code"),
            n_records: a.n,
            signal: ratio(a.err[0], a.refp[0]),
            d_logt1: has_deriv.then(|| ratio(a.err[1], a.refp[1])),
            d_logt2: has_deriv.then(|| ratio(a.err[2], a.refp[2])),
        })
        .collect())
}

pub fn evaluate_records(net: &GruNetwork, records: &[TrainingRecord]) -> Result<Vec<KindNrmse>> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("dataset has no records".into()));
    }
    // group equal lengths for batching; all records in a file share n_tr
    let inputs: Vec<SurrogateInput> = records.iter().map(TrainingRecord::surrogate_input).collect();
    let preds = gru_forward_batch(net, &inputs)?;
    nrmse_table(records, &preds, net.n_out)
}

pub fn evaluate_nrmse(net: &GruNetwork, dataset_path: &Path) -> Result<Vec<KindNrmse>> {
    evaluate_records(net, &load_dataset(dataset_path)?)
}
