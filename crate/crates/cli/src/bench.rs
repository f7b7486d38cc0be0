use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use epgforge::csvio::fmt9;
use epgforge::seqmodel::sample_training_sequence;
use epgforge::surrogate::{gru_forward_batch, load_weights, SurrogateInput};
use epgforge::{simulate_with_grad, EpgBlochConfig, EpgModel, GruNetwork, TimingMode, TissueParams, TrainingSetup};
use rayon::prelude::*;

use crate::report::RunReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchEngine {
    Gru,
    Epgbloch,
    All,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchEngine::All)]
    engine: BenchEngine,
    #[arg(long, value_delimiter = ',', default_value = "100,400,1600,6400")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    n_tr: usize,
    #[arg(long, default_value_t = 20)]
    n_k: usize,
    /// Trained weights; random weights of the same shape otherwise (the cost
    /// of inference does not depend on the values).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timing table CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Deterministic spread of tissues over the training range.
fn bench_tissue(i: usize) -> TissueParams {
    let u = (i as f64 * 0.618_033_988_749_895).fract();
    let v = (i as f64 * 0.414_213_562_373_095).fract();
    let t1 = 0.1 * 50f64.powf(u);
    TissueParams::new(t1, t1 * (0.02 + 0.5 * v))
}

struct Row {
    engine: &'static str,
    batch: usize,
    seconds: f64,
}

pub fn cmd_bench(a: BenchArgs) -> anyhow::Result<RunReport> {
    let mut report = RunReport::new("bench");
    if a.batch_sizes.is_empty() || a.batch_sizes.contains(&0) {
        return Err(epgforge::Error::InvalidConfig("batch sizes must be positive".into()).into());
    }
    let seq = sample_training_sequence(&TrainingSetup::with_length(a.n_tr), a.seed, TimingMode::ConstTiming)?;
    let net = match &a.weights {
        Some(p) => {
            report.input(p)?;
            load_weights(p)?
        }
        None => GruNetwork::random(3, 5, 32, 6, 0.3, a.seed),
    };
    let cfg = EpgBlochConfig::with_n_k(a.n_k);
    let mut rows = Vec::new();
    for &batch in &a.batch_sizes {
        let tissues: Vec<TissueParams> = (0..batch).map(bench_tissue).collect();
        if matches!(a.engine, BenchEngine::Gru | BenchEngine::All) {
            let inputs: Vec<SurrogateInput> = tissues.iter().map(|t| SurrogateInput::new(t, &seq)).collect();
            let t = Instant::now();
            let out = gru_forward_batch(&net, &inputs)?;
            rows.push(Row { engine: "gru", batch, seconds: t.elapsed().as_secs_f64() });
            drop(out);
        }
        if matches!(a.engine, BenchEngine::Epgbloch | BenchEngine::All) {
            let t = Instant::now();
            let out: Vec<_> = tissues
                .par_iter()
                .map(|tissue| simulate_with_grad(tissue, &seq, &cfg, EpgModel::Bloch))
                .collect::<epgforge::Result<_>>()?;
            rows.push(Row { engine: "epgbloch", batch, seconds: t.elapsed().as_secs_f64() });
            drop(out);
        }
    }
    if let Some(path) = &a.out {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "engine,batch,wall_ms,signals_per_s")?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", r.engine, r.batch, fmt9(r.seconds * 1e3), fmt9(r.batch as f64 / r.seconds))?;
        }
        w.flush()?;
        report.output(path);
    }
    for r in &rows {
        report.metric(&format!("{}_{}_ms", r.engine, r.batch), r.seconds * 1e3);
    }
    let lo = *a.batch_sizes.iter().min().expect("non-empty");
    let hi = *a.batch_sizes.iter().max().expect("non-empty");
    let time = |engine: &str, b: usize| rows.iter().find(|r| r.engine == engine && r.batch == b).map(|r| r.seconds);
    for engine in ["gru", "epgbloch"] {
        if let (Some(t_lo), Some(t_hi)) = (time(engine, lo), time(engine, hi)) {
            if hi > lo {
                let ratio = t_hi / t_lo;
                let ideal = hi as f64 / lo as f64;
                report.metric(&format!("{engine}_scaling_ratio"), ratio);
                // within a factor of ~1.6 of the ideal in either direction
                report.metric(&format!("{engine}_near_linear"), ratio >= 0.625 * ideal && ratio <= 1.4 * ideal);
            }
        }
    }
    if let (Some(g), Some(e)) = (time("gru", hi), time("epgbloch", hi)) {
        report.metric("gru_speedup", e / g);
    }
    report.metric("n_tr", a.n_tr);
    Ok(report)
}
