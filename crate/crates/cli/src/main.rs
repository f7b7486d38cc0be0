use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use epgforge::csvio::{fmt9, read_signal_csv, write_signal_csv};
use epgforge::dict::{load_dictionary, match_signals, save_dictionary};
use epgforge::seqmodel::{load_sequence, write_flip_train_csv};
use epgforge::seqopt::crlb_trace_batch;
use epgforge::surrogate::{self, export_training_set, load_weights, ExportOptions};
use epgforge::{
    build_grid, generate_dictionary, nrmse, optimize_de, simulate_epg_bloch, simulate_epg_conventional,
    simulate_isochromats, simulate_with_grad, Complex64, CrlbObjective, DeConfig, EpgBlochConfig, EpgModel,
    ErrorCategory, GruNetwork, ObjectiveEngine, RfPulse, SignalWithGrad, SliceGrid, TissueParams, TrainingSetup,
};

mod bench;
mod report;

use report::RunReport;

#[derive(Parser)]
#[command(name = "epgforge", version, about = "Transient-state MR signal simulation, dictionaries and sequence design")]
struct Cli {
    /// Worker threads for batch work (falls back to EPGFORGE_THREADS, then all cores).
    #[arg(long, global = true, env = "EPGFORGE_THREADS")]
    threads: Option<usize>,
    /// Also write the JSON run report to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one signal.
    Simulate(SimulateArgs),
    /// Run two engines on one configuration and report their difference.
    Compare(CompareArgs),
    /// Generate a dictionary over a (T1, T2, B1) grid.
    Dictgen(DictgenArgs),
    /// Match signals against a dictionary.
    Match(MatchArgs),
    /// Export a surrogate training set.
    TrainData(TrainDataArgs),
    /// Per-train-kind NRMSE of a surrogate on a training set.
    EvalSurrogate(EvalArgs),
    /// Optimize a Spline11 flip train for the CRLB objective.
    Optimize(OptimizeArgs),
    /// Time the engines over a range of batch sizes.
    Bench(bench::BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Model {
    Bloch,
    Epg,
    Epgbloch,
    Gru,
}

#[derive(Args, Clone)]
struct EngineOpts {
    /// Configuration states kept by the EPG engines.
    #[arg(long, default_value_t = 20)]
    n_k: usize,
    /// Isochromats per sub-slice for the Bloch oracle.
    #[arg(long, default_value_t = 512)]
    n_iso: usize,
    /// Spoiler dephasing cycles per TR for the Bloch oracle.
    #[arg(long, default_value_t = 1)]
    spoiler_cycles: u32,
    /// Simulate the full slice even when it is mirror symmetric.
    #[arg(long)]
    no_symmetry: bool,
    /// GRU weight file (required by the gru engine).
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl EngineOpts {
    fn cfg(&self) -> EpgBlochConfig {
        EpgBlochConfig { n_k: self.n_k, exploit_symmetry: !self.no_symmetry }
    }

    fn network(&self, report: &mut RunReport) -> anyhow::Result<Option<GruNetwork>> {
        match &self.weights {
            Some(p) => {
                report.input(p)?;
                Ok(Some(load_weights(p)?))
            }
            None => Ok(None),
        }
    }
}

#[derive(Args, Clone)]
struct TissueOpts {
    /// T1 in milliseconds.
    #[arg(long)]
    t1: f64,
    /// T2 in milliseconds.
    #[arg(long)]
    t2: f64,
    #[arg(long, default_value_t = 1.0)]
    b1: f64,
}

impl TissueOpts {
    fn tissue(&self) -> TissueParams {
        TissueParams::new(self.t1 * 1e-3, self.t2 * 1e-3).with_b1(self.b1)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Sequence description (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value_t = Model::Epgbloch)]
    model: Model,
    #[command(flatten)]
    tissue: TissueOpts,
    #[command(flatten)]
    engine: EngineOpts,
    /// Also write d/dlog T1 and d/dlog T2 columns.
    #[arg(long)]
    grad: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    a: Model,
    /// Reference engine.
    #[arg(long, value_enum)]
    b: Model,
    #[command(flatten)]
    tissue: TissueOpts,
    #[command(flatten)]
    engine: EngineOpts,
    /// Per-TR comparison CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DictgenArgs {
    #[arg(long)]
    config: PathBuf,
    /// `lo:hi:n` in milliseconds, log spaced.
    #[arg(long, default_value = "100:5000:100")]
    t1: String,
    #[arg(long, default_value = "10:2000:100")]
    t2: String,
    /// `lo:hi:n`, linearly spaced.
    #[arg(long, default_value = "1:1:1")]
    b1: String,
    #[arg(long, default_value = "epgbloch")]
    engine: String,
    #[command(flatten)]
    engine_opts: EngineOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    dict: PathBuf,
    /// Signal CSV files (`tr_index,re,im`).
    #[arg(long = "signal", required = true)]
    signals: Vec<PathBuf>,
    /// Refuse to match if the dictionary was built for another sequence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDataArgs {
    #[arg(long, default_value_t = 30_000)]
    n_signals: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1120)]
    n_tr: usize,
    /// RF sub-steps.
    #[arg(long, default_value_t = 16)]
    n_rf: usize,
    /// Sub-slices across the slice profile.
    #[arg(long, default_value_t = 32)]
    n_z: usize,
    #[arg(long, default_value_t = 20)]
    n_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    /// `t1,t2;t1,t2` in milliseconds.
    #[arg(long, default_value = "900,85;500,65")]
    tissues: String,
    #[arg(long, default_value_t = 4.9)]
    te: f64,
    #[arg(long, default_value_t = 8.7)]
    tr: f64,
    #[arg(long, default_value_t = 336)]
    ntr: usize,
    /// Omit the initial inversion pulse.
    #[arg(long)]
    no_inversion: bool,
    #[arg(long, default_value_t = 90.0)]
    maxflip: f64,
    /// Population multiplier (candidates = pop × 11).
    #[arg(long, default_value_t = 10)]
    pop: usize,
    #[arg(long, default_value_t = 1000)]
    maxgen: usize,
    #[arg(long, default_value_t = 0.002)]
    tol: f64,
    #[arg(long, default_value = "epgbloch")]
    engine: String,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Per-tissue `w_t1,w_t2,w_pd` separated by `;` (default: 1/T1², 1/T2², 0).
    #[arg(long)]
    crlb_weights: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    rf_duration: f64,
    #[arg(long, default_value_t = 8)]
    n_rf: usize,
    #[arg(long, default_value_t = 8)]
    n_z: usize,
    #[arg(long, default_value_t = 12)]
    n_k: usize,
    #[arg(long, default_value_t = 3.0)]
    thickness: f64,
    /// Output directory for `flip_train.csv`, `control.csv` and `history.csv`.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<epgforge::Error>() {
            return match err.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Numeric => 3,
                ErrorCategory::Format => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(epgforge::Error::InvalidConfig("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    let report = match cli.command {
        Command::Simulate(a) => cmd_simulate(a)?,
        Command::Compare(a) => cmd_compare(a)?,
        Command::Dictgen(a) => cmd_dictgen(a)?,
        Command::Match(a) => cmd_match(a)?,
        Command::TrainData(a) => cmd_train_data(a)?,
        Command::EvalSurrogate(a) => cmd_eval(a)?,
        Command::Optimize(a) => cmd_optimize(a)?,
        Command::Bench(a) => bench::cmd_bench(a)?,
    }
    .finish();
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = cli.report {
        std::fs::write(p, json + "\n")?;
    }
    Ok(())
}

fn check_finite(values: &[Complex64], what: &str) -> anyhow::Result<()> {
    if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(epgforge::Error::Numeric(format!("{what} contains NaN or infinity")).into());
    }
    Ok(())
}

fn simulate_model(
    model: Model,
    tissue: &TissueParams,
    seq: &epgforge::SequenceParams,
    opts: &EngineOpts,
    net: Option<&GruNetwork>,
) -> anyhow::Result<Vec<Complex64>> {
    let s = match model {
        Model::Bloch => simulate_isochromats(tissue, seq, opts.n_iso, opts.spoiler_cycles)?,
        Model::Epg => simulate_epg_conventional(tissue, seq, opts.n_k)?,
        Model::Epgbloch => simulate_epg_bloch(tissue, seq, &opts.cfg())?,
        Model::Gru => surrogate::gru_signal(net.ok_or(epgforge::Error::MissingWeights)?, tissue, seq)?,
    };
    check_finite(&s, "signal")?;
    Ok(s)
}

fn cmd_simulate(a: SimulateArgs) -> anyhow::Result<RunReport> {
    let mut report = RunReport::new("simulate");
    report.input(&a.config)?;
    let seq = load_sequence(&a.config)?;
    let tissue = a.tissue.tissue();
    let net = a.engine.network(&mut report)?;
    let out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let s = if a.grad {
        let g = match a.model {
            Model::Epg => simulate_with_grad(&tissue, &seq, &a.engine.cfg(), EpgModel::Conventional)?,
            Model::Epgbloch => simulate_with_grad(&tissue, &seq, &a.engine.cfg(), EpgModel::Bloch)?,
            Model::Gru => surrogate::gru_forward(
                net.as_ref().ok_or(epgforge::Error::MissingWeights)?,
                &surrogate::SurrogateInput::new(&tissue, &seq),
            )?,
            Model::Bloch => {
                return Err(epgforge::Error::InvalidConfig("the bloch engine does not provide derivatives".into()).into())
            }
        };
        check_finite(&g.s, "signal")?;
        check_finite(&g.ds_dlogt1, "derivative")?;
        check_finite(&g.ds_dlogt2, "derivative")?;
        write_grad_csv(out, &g)?;
        g.s
    } else {
        let s = simulate_model(a.model, &tissue, &seq, &a.engine, net.as_ref())?;
        write_signal_csv(out, &s)?;
        s
    };
    report.output(&a.out);
    report.metric("n_tr", s.len());
    report.metric("max_abs", s.iter().map(|v| v.norm()).fold(0.0, f64::max));
    Ok(report)
}

fn write_grad_csv<W: Write>(mut out: W, g: &SignalWithGrad) -> anyhow::Result<()> {
    writeln!(out, "tr_index,re,im,dlogt1_re,dlogt1_im,dlogt2_re,dlogt2_im")?;
    for n in 0..g.len() {
        writeln!(
            out,
            "{n},{},{},{},{},{},{}",
            fmt9(g.s[n].re),
            fmt9(g.s[n].im),
            fmt9(g.ds_dlogt1[n].re),
            fmt9(g.ds_dlogt1[n].im),
            fmt9(g.ds_dlogt2[n].re),
            fmt9(g.ds_dlogt2[n].im)
        )?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> anyhow::Result<RunReport> {
    let mut report = RunReport::new("compare");
    report.input(&a.config)?;
    let seq = load_sequence(&a.config)?;
    let tissue = a.tissue.tissue();
    let net = a.engine.network(&mut report)?;
    let sa = simulate_model(a.a, &tissue, &seq, &a.engine, net.as_ref())?;
    let sb = simulate_model(a.b, &tissue, &seq, &a.engine, net.as_ref())?;
    let err = nrmse(&sb, &sa);
    if let Some(path) = &a.out {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "tr_index,a_re,a_im,b_re,b_im,abs_diff")?;
        for (n, (x, y)) in sa.iter().zip(&sb).enumerate() {
            writeln!(w, "{n},{},{},{},{},{}", fmt9(x.re), fmt9(x.im), fmt9(y.re), fmt9(y.im), fmt9((x - y).norm()))?;
        }
        w.flush()?;
        report.output(path);
    }
    report.metric("engine_a", format!("{:?}", a.a).to_lowercase());
    report.metric("engine_b", format!("{:?}", a.b).to_lowercase());
    report.metric("nrmse", err);
    Ok(report)
}

/// `lo:hi:n`
fn parse_axis(text: &str) -> anyhow::Result<(f64, f64, usize)> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(epgforge::Error::InvalidConfig(format!("axis {text:?} is not lo:hi:n")).into());
    }
    let f = |s: &str| f64::from_str(s.trim()).map_err(|_| epgforge::Error::InvalidConfig(format!("bad number {s:?}")));
    let n = usize::from_str(parts[2].trim()).map_err(|_| epgforge::Error::InvalidConfig(format!("bad count {:?}", parts[2])))?;
    Ok((f(parts[0])?, f(parts[1])?, n))
}

fn cmd_dictgen(a: DictgenArgs) -> anyhow::Result<RunReport> {
    let mut report = RunReport::new("dictgen");
    report.input(&a.config)?;
    let seq = load_sequence(&a.config)?;
    let (t1a, t1b, n1) = parse_axis(&a.t1)?;
    let (t2a, t2b, n2) = parse_axis(&a.t2)?;
    let (ba, bb, nb) = parse_axis(&a.b1)?;
    let grid = build_grid((t1a * 1e-3, t1b * 1e-3), n1, (t2a * 1e-3, t2b * 1e-3), n2, (ba, bb), nb)?;
    let engine: epgforge::Engine = a.engine.parse()?;
    let net = a.engine_opts.network(&mut report)?;
    let dict = generate_dictionary(&grid, &seq, &a.engine_opts.cfg(), engine, net.as_ref())?;
    check_finite(&dict.atoms, "dictionary")?;
    save_dictionary(&dict, &a.out)?;
    report.output(&a.out);
    report.metric("n_atoms", dict.n_atoms());
    report.metric("n_tr", dict.n_tr);
    report.metric("seq_fingerprint", format!("{:016x}", dict.seq_fingerprint));
    Ok(report)
}

fn cmd_match(a: MatchArgs) -> anyhow::Result<RunReport> {
    let mut report = RunReport::new("match");
    report.input(&a.dict)?;
    let dict = load_dictionary(&a.dict)?;
    if let Some(cfg) = &a.config {
        report.input(cfg)?;
        let seq = load_sequence(cfg)?;
        if !dict.matches_sequence(&seq) {
            bail!(epgforge::Error::InvalidConfig("dictionary was generated for a different sequence".into()));
        }
    }
    let mut signals = Vec::with_capacity(a.signals.len());
    for p in &a.signals {
        report.input(p)?;
        signals.push(read_signal_csv(BufReader::new(File::open(p)?)).with_context(|| format!("reading {}", p.display()))?);
    }
    let results = match_signals(&signals, &dict)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    writeln!(w, "signal,atom,t1_ms,t2_ms,b1,pd_re,pd_im,pd_abs,correlation")?;
    for (p, r) in a.signals.iter().zip(&results) {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            p.display(),
            r.index,
            fmt9(r.t1 * 1e3),
            fmt9(r.t2 * 1e3),
            fmt9(r.b1),
            fmt9(r.pd.re),
            fmt9(r.pd.im),
            fmt9(r.pd.norm()),
            fmt9(r.correlation)
        )?;
    }
    w.flush()?;
    report.output(&a.out);
    report.metric("n_signals", results.len());
    report.metric("min_correlation", results.iter().map(|r| r.correlation).fold(f64::INFINITY, f64::min));
    Ok(report)
}

fn cmd_train_data(a: TrainDataArgs) -> anyhow::Result<RunReport> {
    let mut report = RunReport::new("train-data");
    let mut setup = TrainingSetup::with_length(a.n_tr);
    setup.rf = RfPulse::gaussian(setup.rf.duration_ms, a.n_rf, setup.rf.time_bandwidth, setup.slice.slice_thickness_mm);
    setup.slice = SliceGrid::new(setup.slice.slice_thickness_mm, a.n_z, setup.slice.fov_factor)?;
    let opts = ExportOptions { setup, cfg: EpgBlochConfig::with_n_k(a.n_k), ..ExportOptions::default() };
    export_training_set(a.n_signals, a.seed, &a.out, &opts)?;
    report.output(&a.out);
    report.metric("n_signals", a.n_signals);
    report.metric("n_tr", a.n_tr);
    report.metric("seed", a.seed);
    Ok(report)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<RunReport> {
    let mut report = RunReport::new("eval-surrogate");
    report.input(&a.weights)?;
    report.input(&a.data)?;
    let net = load_weights(&a.weights)?;
    let rows = surrogate::evaluate_nrmse(&net, &a.data)?;
    let opt = |v: Option<f64>| v.map(fmt9).unwrap_or_default();
    if let Some(path) = &a.out {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "kind,n_records,nrmse_signal,nrmse_dlogt1,nrmse_dlogt2")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{}", r.kind, r.n_records, fmt9(r.signal), opt(r.d_logt1), opt(r.d_logt2))?;
        }
        w.flush()?;
        report.output(path);
    }
    for r in &rows {
        report.metric(&format!("nrmse_signal_{}", r.kind), r.signal);
        if let (Some(d1), Some(d2)) = (r.d_logt1, r.d_logt2) {
            report.metric(&format!("nrmse_dlogt1_{}", r.kind), d1);
            report.metric(&format!("nrmse_dlogt2_{}", r.kind), d2);
        }
    }
    Ok(report)
}

fn parse_pairs(text: &str, width: usize, what: &str) -> anyhow::Result<Vec<Vec<f64>>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|chunk| {
            let v: Vec<f64> = chunk
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| epgforge::Error::InvalidConfig(format!("bad {what} entry {chunk:?}")))?;
            if v.len() != width {
                return Err(anyhow!(epgforge::Error::InvalidConfig(format!("{what} entry {chunk:?} needs {width} values"))));
            }
            Ok(v)
        })
        .collect()
}

fn cmd_optimize(a: OptimizeArgs) -> anyhow::Result<RunReport> {
    let mut report = RunReport::new("optimize");
    let tissues: Vec<TissueParams> =
        parse_pairs(&a.tissues, 2, "tissue")?.iter().map(|v| TissueParams::new(v[0] * 1e-3, v[1] * 1e-3)).collect();
    if tissues.is_empty() {
        bail!(epgforge::Error::InvalidConfig("no tissues given".into()));
    }
    let rf = RfPulse::gaussian(a.rf_duration, a.n_rf, 2.0, a.thickness);
    let slice = SliceGrid::new(a.thickness, a.n_z, 3.0)?;
    let mut obj = CrlbObjective::new(tissues, a.te, a.tr, a.ntr, !a.no_inversion, a.maxflip, rf, slice);
    if let Some(w) = &a.crlb_weights {
        obj.weights = parse_pairs(w, 3, "weight")?.concat();
    }
    let net = match &a.weights {
        Some(p) => {
            report.input(p)?;
            Some(load_weights(p)?)
        }
        None => None,
    };
    let engine = match a.engine.to_ascii_lowercase().as_str() {
        "epgbloch" => ObjectiveEngine::EpgBloch(EpgBlochConfig::with_n_k(a.n_k)),
        "gru" => ObjectiveEngine::Gru(net.as_ref().ok_or(epgforge::Error::MissingWeights)?),
        other => bail!(epgforge::Error::InvalidConfig(format!("unknown engine {other:?}"))),
    };
    let de = DeConfig { population: a.pop, max_generations: a.maxgen, rel_tol: a.tol, seed: a.seed, ..DeConfig::default() };
    let res = optimize_de(&obj, &de, engine)?;
    let flat = crlb_trace_batch(&obj, &[vec![60.0; 11]], engine)?[0];

    std::fs::create_dir_all(&a.out)?;
    let train_path = a.out.join("flip_train.csv");
    write_flip_train_csv(BufWriter::new(File::create(&train_path)?), &obj.flip_train(&res.best)?)?;
    let control_path = a.out.join("control.csv");
    write_column(&control_path, "control_deg", &res.best)?;
    let history_path = a.out.join("history.csv");
    let mut w = BufWriter::new(File::create(&history_path)?);
    writeln!(w, "generation,best_objective")?;
    for (g, v) in res.history.iter().enumerate() {
        writeln!(w, "{g},{}", fmt9(*v))?;
    }
    w.flush()?;
    for p in [&train_path, &control_path, &history_path] {
        report.output(p);
    }
    report.metric("best_objective", res.best_value);
    report.metric("flat60_objective", flat);
    report.metric("generations", res.generations);
    report.metric("converged", res.converged);
    report.metric("evaluations", res.evaluations);
    Ok(report)
}

fn write_column(path: &Path, header: &str, values: &[f64]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for v in values {
        writeln!(w, "{}", fmt9(*v))?;
    }
    w.flush()?;
    Ok(())
}
