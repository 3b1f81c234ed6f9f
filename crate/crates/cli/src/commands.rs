//! Subcommand definitions and their runners.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use barrenlab::gram::{gram_f, ms_covariance, theorem_a_bound, variance_bound_bits};
use barrenlab::modcore::{primes_in_range, BitIndex, PrimeField};
use barrenlab::nn::{
    probe_variance_capped, random_prime_with_bits, train, write_probe_csv, write_trace_csv,
    Activation, ArchSpec, OptimizerKind, TrainConfig, DEFAULT_PROBE_CAP,
};
use barrenlab::numeric::linear_fit;
use barrenlab::spectral::{
    centering_constant, dft_naive, harmonic_sum, make_target, spectral_l1, HarmonicSign, KindName,
    TargetKind, TargetTable,
};
use barrenlab::sqdim::{modular_bit_report, write_sqdim_csv, SqDimRow};
use barrenlab::waves::{
    discrepancy_sweep, q_norm_squared, sin_ratio_integral, write_discrepancy_csv, PeriodicWave,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::svg::{emit_svg, FigureSpec};

pub const OUT_ENV: &str = "BARRENLAB_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<barrenlab::Error> for CliError {
    fn from(e: barrenlab::Error) -> Self {
        use barrenlab::Error as E;
        match e {
            E::NotPrime(_)
            | E::InvalidResidue { .. }
            | E::BitOutOfRange { .. }
            | E::SizeLimit { .. }
            | E::Config(_) => Self::Config(e.to_string()),
            other => Self::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

impl From<crate::svg::SvgError> for CliError {
    fn from(e: crate::svg::SvgError) -> Self {
        Self::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "barrenlab", version, about = "Gradient-signal experiments for modular and periodic targets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// DFT of one target table.
    #[command(args_override_self = true)]
    Spectrum(TargetArgs),
    /// Gram statistic f(y) and its second moment by both routes.
    #[command(args_override_self = true)]
    Gram(TargetArgs),
    /// Mean-square covariance of the multiplication class against fitted curves.
    #[command(args_override_self = true)]
    Mscov(MscovArgs),
    /// Second-moment bounds and harmonic sums over a prime range.
    #[command(args_override_self = true)]
    Bounds(BoundsArgs),
    /// Star discrepancy of a Kronecker orbit against the ETK bound.
    #[command(args_override_self = true)]
    Discrepancy(DiscrepancyArgs),
    /// Q-kernel norms and sin-ratio integrals for periodic waves.
    #[command(args_override_self = true)]
    Waves(WavesArgs),
    /// SQ-dimension reports for last-bit modular classes.
    #[command(args_override_self = true)]
    Sqdim(SqdimArgs),
    /// Gradient-variance probe at initialization.
    #[command(args_override_self = true)]
    Probe(ProbeArgs),
    /// Train one network and record its trace.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Run the whole desk-scale suite and write a manifest.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory; BARRENLAB_OUT takes precedence.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

impl OutArgs {
    pub fn resolve(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TargetArgs {
    #[arg(long, default_value_t = 101)]
    pub p: u64,
    /// rawmul | bit | standardized | centered
    #[arg(long, default_value = "bit")]
    pub kind: KindName,
    /// Bit index for the bit kinds (default 1).
    #[arg(long)]
    pub r: Option<u32>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct MscovArgs {
    #[arg(long, default_value_t = 3)]
    pub pmin: u64,
    #[arg(long, default_value_t = 500)]
    pub pmax: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct BoundsArgs {
    #[arg(long, default_value_t = 31)]
    pub pmin: u64,
    #[arg(long, default_value_t = 503)]
    pub pmax: u64,
    #[arg(long, default_value_t = 1)]
    pub r: u32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct DiscrepancyArgs {
    #[arg(long, default_value_t = 0.618_033_988_749_894_8)]
    pub x: f64,
    #[arg(long, default_value_t = 0.414_213_562_373_095_1)]
    pub y: f64,
    /// Smallest orbit length, as a power of two.
    #[arg(long, default_value_t = 6)]
    pub nmin_exp: u32,
    #[arg(long, default_value_t = 12)]
    pub nmax_exp: u32,
    /// ETK frequency height.
    #[arg(long, default_value_t = 16)]
    pub h: u32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WaveName {
    Sawtooth,
    Square,
}

#[derive(Args, Debug, Clone)]
pub struct WavesArgs {
    #[arg(long, value_enum, default_value = "sawtooth")]
    pub wave: WaveName,
    #[arg(long, default_value_t = 4)]
    pub amin_exp: u32,
    #[arg(long, default_value_t = 10)]
    pub amax_exp: u32,
    /// Largest sin-ratio order, as a power of two.
    #[arg(long, default_value_t = 10)]
    pub rmax_exp: u32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SqdimArgs {
    #[arg(long, default_value_t = 5)]
    pub pmin: u64,
    #[arg(long, default_value_t = 101)]
    pub pmax: u64,
    #[arg(long, default_value_t = 1)]
    pub r: u32,
    /// Largest class solved exactly.
    #[arg(long, default_value_t = 64)]
    pub limit: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ProbeArgs {
    #[arg(long, default_value_t = 300)]
    pub pmin: u64,
    #[arg(long, default_value_t = 1000)]
    pub pmax: u64,
    #[arg(long, default_value_t = 1)]
    pub r: u32,
    #[arg(long, default_value_t = 20)]
    pub inits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "128,128")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value = "sigmoid")]
    pub activation: Activation,
    #[arg(long, default_value_t = DEFAULT_PROBE_CAP)]
    pub cap: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskName {
    Waves,
    Bits,
    Allbits,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "waves")]
    pub task: TaskName,
    /// Multiplier range for the wave task.
    #[arg(long, default_value_t = 1 << 20)]
    pub big_a: u64,
    /// Modulus for the bit tasks; drawn from --bits when absent.
    #[arg(long)]
    pub p: Option<u64>,
    #[arg(long, default_value_t = 20)]
    pub bits: u32,
    #[arg(long, default_value_t = 1)]
    pub r: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixes the multiplier instead of drawing it.
    #[arg(long)]
    pub a: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    /// Shrink every experiment to a smoke-test size.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// What a command produced.
pub struct Outcome {
    pub summary: String,
    pub files: Vec<PathBuf>,
}

struct Sink<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Sink<'a> {
    fn new(dir: &'a Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir,
            files: Vec::new(),
        })
    }

    fn write<F>(&mut self, name: &str, body: F) -> CliResult<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.files.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> CliResult<()> {
        self.write(name, |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(header)?;
            for row in rows {
                c.write_record(row.iter().map(|v| v.to_string()))?;
            }
            c.flush()
        })
    }

    fn svg(&mut self, name: &str, spec: &FigureSpec) -> CliResult<()> {
        let path = self.dir.join(name);
        emit_svg(spec, &path)?;
        self.files.push(path);
        Ok(())
    }

    fn finish(self, summary: String) -> Outcome {
        Outcome {
            summary,
            files: self.files,
        }
    }
}

fn prime_range(pmin: u64, pmax: u64) -> CliResult<Vec<u64>> {
    if pmin > pmax {
        return Err(CliError::Config(format!("pmin {pmin} exceeds pmax {pmax}")));
    }
    let primes: Vec<u64> = primes_in_range(pmin.max(3), pmax);
    if primes.is_empty() {
        return Err(CliError::Config(format!("no odd primes in [{pmin}, {pmax}]")));
    }
    Ok(primes)
}

fn column(rows: &[Vec<f64>], x: usize, y: usize) -> Vec<(f64, f64)> {
    rows.iter().map(|r| (r[x], r[y])).collect()
}

fn target(args: &TargetArgs) -> CliResult<TargetTable> {
    let field = PrimeField::new(args.p)?;
    let r = match args.kind {
        KindName::BitR | KindName::CenteredBitR => Some(args.r.unwrap_or(1)),
        _ => args.r,
    };
    Ok(make_target(field, args.kind, r)?)
}

fn kind_tag(kind: &TargetKind) -> String {
    match kind {
        TargetKind::RawMul => "rawmul".into(),
        TargetKind::Standardized => "standardized".into(),
        TargetKind::BitR(r) => format!("bit{}", r.get()),
        TargetKind::CenteredBitR(r) => format!("centered{}", r.get()),
        TargetKind::Custom => "custom".into(),
    }
}

pub fn spectrum(args: &TargetArgs) -> CliResult<Outcome> {
    let table = target(args)?;
    let dir = args.out.resolve();
    let mut sink = Sink::new(&dir)?;
    let stem = format!("spectrum_p{}_{}", args.p, kind_tag(&table.kind));
    let spec = dft_naive(&table);
    sink.write(&format!("{stem}.csv"), |w| spec.write_csv(w))?;
    let pts = spec
        .coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| (i as f64, c.norm()))
        .collect();
    sink.svg(
        &format!("{stem}.svg"),
        &FigureSpec::new(format!("|DFT| for p={}", args.p), "frequency", "modulus").series("|t^(i)|", pts),
    )?;
    let l1 = spectral_l1(&spec, true);
    Ok(sink.finish(format!("spectrum p={} {}: l1 without zero = {l1:.6}", args.p, kind_tag(&table.kind))))
}

pub fn gram(args: &TargetArgs) -> CliResult<Outcome> {
    let table = target(args)?;
    let rep = gram_f(&table)?;
    let dir = args.out.resolve();
    let mut sink = Sink::new(&dir)?;
    let stem = format!("gram_p{}_{}", args.p, kind_tag(&table.kind));
    sink.write(&format!("{stem}.csv"), |w| rep.write_csv(w))?;
    sink.write(&format!("{stem}_summary.json"), |w| rep.write_summary(w))?;
    let pts = (1..args.p).map(|y| (y as f64, rep.f(y))).collect();
    sink.svg(
        &format!("{stem}.svg"),
        &FigureSpec::new(format!("Gram statistic for p={}", args.p), "y", "f(y)").series("f(y)", pts),
    )?;
    Ok(sink.finish(format!(
        "gram p={} {}: E[f^2] = {:.6e} (spectral {:.6e}, gap {:.1e})",
        args.p,
        kind_tag(&table.kind),
        rep.second_moment_f,
        rep.second_moment_spectral,
        rep.moment_gap()
    )))
}

pub fn mscov(args: &MscovArgs) -> CliResult<Outcome> {
    let primes = prime_range(args.pmin, args.pmax)?;
    let rows: Vec<Vec<f64>> = primes
        .iter()
        .map(|&p| {
            let v = ms_covariance(PrimeField::new(p).expect("prime"));
            let pf = p as f64;
            let curve = |l: f64| 0.015 * pf.powi(3) * l.powf(0.42);
            vec![pf, v, curve(pf.ln()), curve(pf.log2()), v / (pf.powi(3) * pf.ln().powi(2))]
        })
        .collect();
    let dir = args.out.resolve();
    let mut sink = Sink::new(&dir)?;
    sink.csv("mscov.csv", &["p", "ms_cov", "fit_ln", "fit_log2", "ratio_p3_ln2"], &rows)?;
    sink.svg(
        "mscov.svg",
        &FigureSpec::new("Mean-square covariance", "p", "E[Cov^2]")
            .log_x()
            .log_y()
            .series("exact", column(&rows, 0, 1))
            .series("0.015 p^3 (ln p)^0.42", column(&rows, 0, 2))
            .series("0.015 p^3 (log2 p)^0.42", column(&rows, 0, 3)),
    )?;
    let c = rows.iter().map(|r| r[4]).fold(0.0, f64::max);
    Ok(sink.finish(format!(
        "mscov: {} primes in [{}, {}], max ratio to p^3 ln^2 p = {c:.5}",
        primes.len(),
        args.pmin,
        args.pmax
    )))
}

pub fn bounds(args: &BoundsArgs) -> CliResult<Outcome> {
    let primes = prime_range(args.pmin, args.pmax)?;
    let mut rows = Vec::with_capacity(primes.len());
    for &p in &primes {
        let field = PrimeField::new(p)?;
        let r = BitIndex::new(field, args.r)?;
        let table = TargetTable::new(field, TargetKind::CenteredBitR(r));
        let exact = gram_f(&table)?.second_moment_f;
        let bound = theorem_a_bound(&table, centering_constant(field, r))?;
        let pf = p as f64;
        let plogp = pf * pf.ln();
        rows.push(vec![
            pf,
            exact,
            bound,
            variance_bound_bits(field, r),
            harmonic_sum(field, HarmonicSign::Plus, 1) / plogp,
            harmonic_sum(field, HarmonicSign::Minus, 1) / plogp,
        ]);
    }
    let dir = args.out.resolve();
    let mut sink = Sink::new(&dir)?;
    let stem = format!("bounds_r{}", args.r);
    sink.csv(
        &format!("{stem}.csv"),
        &["p", "exact", "bound", "bit_constant", "harmonic_plus_ratio", "harmonic_minus_ratio"],
        &rows,
    )?;
    sink.svg(
        &format!("{stem}.svg"),
        &FigureSpec::new(format!("Centered bit {} second moment", args.r), "p", "E[f^2]")
            .log_x()
            .log_y()
            .series("exact", column(&rows, 0, 1))
            .series("bound", column(&rows, 0, 2)),
    )?;
    sink.svg(
        &format!("{stem}_constant.svg"),
        &FigureSpec::new("Empirical bit constant", "p", "E[f^2] p / (r^2 (log2 p + 1 - r)^2)")
            .series("constant", column(&rows, 0, 3)),
    )?;
    let worst = rows.iter().map(|r| r[1] / r[2]).fold(0.0, f64::max);
    let c = rows.iter().map(|r| r[3]).fold(0.0, f64::max);
    Ok(sink.finish(format!(
        "bounds r={}: {} primes, max exact/bound = {worst:.4}, max bit constant = {c:.4}",
        args.r,
        primes.len()
    )))
}

pub fn discrepancy(args: &DiscrepancyArgs) -> CliResult<Outcome> {
    if args.nmin_exp > args.nmax_exp {
        return Err(CliError::Config("nmin-exp exceeds nmax-exp".into()));
    }
    let ns: Vec<usize> = (args.nmin_exp..=args.nmax_exp)
        .map(|k| 1usize.checked_shl(k).unwrap_or(usize::MAX))
        .collect();
    let rows = discrepancy_sweep(args.x, args.y, &ns, args.h)?;
    let dir = args.out.resolve();
    let mut sink = Sink::new(&dir)?;
    sink.write("discrepancy.csv", |w| write_discrepancy_csv(&rows, w))?;
    sink.svg(
        "discrepancy.svg",
        &FigureSpec::new("Kronecker orbit discrepancy", "N", "D*")
            .log_x()
            .log_y()
            .series("exact D*", rows.iter().map(|r| (r.n as f64, r.dstar)).collect())
            .series(format!("ETK bound, H={}", args.h), rows.iter().map(|r| (r.n as f64, r.etk_bound)).collect()),
    )?;
    let last = rows.last().expect("nonempty sweep");
    Ok(sink.finish(format!(
        "discrepancy: N={} D*={:.5} ETK={:.5}",
        last.n, last.dstar, last.etk_bound
    )))
}

pub fn waves(args: &WavesArgs) -> CliResult<Outcome> {
    if args.amin_exp > args.amax_exp || args.amax_exp > 16 {
        return Err(CliError::Config("need amin-exp <= amax-exp <= 16".into()));
    }
    if args.rmax_exp > 30 {
        return Err(CliError::Config("rmax-exp must be at most 30".into()));
    }
    let psi = match args.wave {
        WaveName::Sawtooth => PeriodicWave::CenteredSawtooth,
        WaveName::Square => PeriodicWave::Square,
    };
    let bv2 = psi.bv_norm().powi(2);
    let q_rows: Vec<Vec<f64>> = (args.amin_exp..=args.amax_exp)
        .map(|k| {
            let a = 1u64 << k;
            let af = a as f64;
            let q2 = q_norm_squared(&psi, a);
            let ratio = q2.sqrt() / (af.sqrt() * (af.ln() + 1.0).powf(2.5));
            vec![af, q2, q2.sqrt(), ratio, ratio / bv2]
        })
        .collect();
    let omegas = [1.0, 10.0, 100.0];
    let s_rows: Vec<Vec<f64>> = omegas
        .iter()
        .flat_map(|&w| {
            (0..=args.rmax_exp).map(move |k| {
                let r = 1u64 << k;
                let v = sin_ratio_integral(w, r);
                vec![w, r as f64, v, v / (1.0 + (r as f64).ln())]
            })
        })
        .collect();
    let dir = args.out.resolve();
    let mut sink = Sink::new(&dir)?;
    sink.csv("waves_qnorm.csv", &["A", "q_norm_sq", "q_norm", "ratio", "ratio_over_bv2"], &q_rows)?;
    sink.csv("waves_sin_ratio.csv", &["omega", "r", "integral", "ratio"], &s_rows)?;
    sink.svg(
        "waves_qnorm.svg",
        &FigureSpec::new("Q-kernel norm", "A", "||Q|| / (A^1/2 (ln A + 1)^5/2)")
            .log_x()
            .series("ratio", column(&q_rows, 0, 3)),
    )?;
    let mut fig = FigureSpec::new("Sin-ratio integral", "r", "integral / (1 + ln r)").log_x();
    for &w in &omegas {
        let pts = s_rows.iter().filter(|r| r[0] == w).map(|r| (r[1], r[3])).collect();
        fig = fig.series(format!("omega={w}"), pts);
    }
    sink.svg("waves_sin_ratio.svg", &fig)?;
    let c = q_rows.iter().map(|r| r[4]).fold(0.0, f64::max);
    Ok(sink.finish(format!("waves: fitted ergodic constant {c:.5} over {} values of A", q_rows.len())))
}

pub fn sqdim(args: &SqdimArgs) -> CliResult<Outcome> {
    let primes = prime_range(args.pmin.max(5), args.pmax)?;
    let mut rows = Vec::with_capacity(primes.len());
    for &p in &primes {
        let field = PrimeField::new(p)?;
        let r = BitIndex::new(field, args.r)?;
        rows.push(SqDimRow {
            p: Some(p),
            r: Some(args.r),
            report: modular_bit_report(field, r, args.limit),
        });
    }
    let dir = args.out.resolve();
    let mut sink = Sink::new(&dir)?;
    let stem = format!("sqdim_r{}", args.r);
    sink.write(&format!("{stem}.csv"), |w| write_sqdim_csv(&rows, w))?;
    let series = |f: &dyn Fn(&SqDimRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter()
            .filter_map(|row| f(row).map(|v| (row.p.unwrap() as f64, v)))
            .collect()
    };
    let mut fig = FigureSpec::new(format!("SQ dimension, bit {}", args.r), "p", "dimension")
        .series("Turán bound", series(&|r| Some(r.report.turan_lower)))
        .series("greedy", series(&|r| Some(r.report.greedy_lower as f64)));
    let exact = series(&|r| r.report.exact_dim.map(|d| d as f64));
    if !exact.is_empty() {
        fig = fig.series("exact", exact);
    }
    sink.svg(&format!("{stem}.svg"), &fig)?;
    let solved = rows.iter().filter(|r| r.report.exact_dim.is_some()).count();
    Ok(sink.finish(format!(
        "sqdim r={}: {} primes, {solved} solved exactly",
        args.r,
        rows.len()
    )))
}

pub fn probe(args: &ProbeArgs) -> CliResult<Outcome> {
    let primes = prime_range(args.pmin, args.pmax)?;
    if args.hidden.is_empty() || args.hidden.contains(&0) {
        return Err(CliError::Config("hidden widths must be positive".into()));
    }
    let arch = ArchSpec {
        hidden: args.hidden.clone(),
        activation: args.activation,
    };
    let mut reports = Vec::with_capacity(primes.len());
    for &p in &primes {
        let field = PrimeField::new(p)?;
        let r = BitIndex::new(field, args.r)?;
        reports.push(probe_variance_capped(field, r, &arch, args.inits, args.seed, args.cap)?);
    }
    let dir = args.out.resolve();
    let mut sink = Sink::new(&dir)?;
    let stem = format!("probe_r{}", args.r);
    sink.write(&format!("{stem}.csv"), |w| write_probe_csv(&reports, w))?;
    let pts = |f: fn(&barrenlab::nn::ProbeReport) -> f64| -> Vec<(f64, f64)> {
        reports.iter().map(|r| (r.p as f64, f(r))).collect()
    };
    sink.svg(
        &format!("{stem}_sqrt.svg"),
        &FigureSpec::new("Gradient probe", "p", "E[v/g] sqrt(p)").series("ratio_sqrt", pts(|r| r.ratio_sqrt)),
    )?;
    sink.svg(
        &format!("{stem}_lin.svg"),
        &FigureSpec::new("Gradient probe", "p", "E[v/g] p").series("ratio_lin", pts(|r| r.ratio_lin)),
    )?;
    let xs: Vec<f64> = reports.iter().map(|r| r.p as f64).collect();
    let ys: Vec<f64> = reports.iter().map(|r| r.ratio_sqrt).collect();
    let trend = if xs.len() > 1 { linear_fit(&xs, &ys).0 } else { 0.0 };
    Ok(sink.finish(format!(
        "probe r={}: {} primes, ratio_sqrt trend {trend:.3e} per unit p",
        args.r,
        reports.len()
    )))
}

pub fn train_cmd(args: &TrainArgs) -> CliResult<Outcome> {
    let mut cfg = match args.task {
        TaskName::Waves => TrainConfig::waves(args.big_a, args.seed),
        TaskName::Bits | TaskName::Allbits => {
            let p = match args.p {
                Some(p) => PrimeField::new(p)?.modulus(),
                None => random_prime_with_bits(args.bits, args.seed)?,
            };
            if matches!(args.task, TaskName::Bits) {
                TrainConfig::bits(p, args.r, args.seed)
            } else {
                TrainConfig::all_bits(p, args.seed)
            }
        }
    };
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.samples {
        cfg.samples = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.optimizer {
        cfg.optimizer = v;
    }
    if let Some(v) = &args.hidden {
        cfg.hidden = v.clone();
    }
    if let Some(v) = args.activation {
        cfg.activation = v;
    }
    if let Some(v) = args.train_fraction {
        cfg.train_fraction = v;
    }
    cfg.a = args.a;
    cfg.validate()?;
    let trace = train(&cfg)?;
    let dir = args.out.resolve();
    let mut sink = Sink::new(&dir)?;
    let stem = match &cfg.task {
        barrenlab::nn::Task::WaveRegression { big_a } => format!("train_waves_A{big_a}_s{}", cfg.seed),
        barrenlab::nn::Task::BitClassification { p, r } => format!("train_bits_p{p}_r{r}_s{}", cfg.seed),
        barrenlab::nn::Task::AllBitsClassification { p } => format!("train_allbits_p{p}_s{}", cfg.seed),
    };
    sink.write(&format!("{stem}.csv"), |w| write_trace_csv(&trace, w))?;
    let losses = trace
        .records
        .iter()
        .map(|r| (r.epoch as f64, r.loss))
        .collect();
    let mut fig = FigureSpec::new("Training loss", "epoch", "loss").series("train loss", losses);
    let accs: Vec<(f64, f64)> = trace
        .records
        .iter()
        .filter_map(|r| r.acc.map(|a| (r.epoch as f64, a)))
        .collect();
    if !accs.is_empty() {
        fig = fig.series("test accuracy", accs);
    }
    sink.svg(&format!("{stem}.svg"), &fig)?;
    let acc = trace
        .final_acc()
        .map(|a| format!(", test accuracy {a:.4}"))
        .unwrap_or_default();
    Ok(sink.finish(format!(
        "train {stem}: a={}, final loss {:.5}{acc}",
        trace.a, trace.final_loss
    )))
}

/// One manifest row: output file, the claim it checks, and the command.
struct ManifestEntry {
    file: PathBuf,
    claim: &'static str,
    command: &'static str,
}

pub fn sweep(args: &SweepArgs) -> CliResult<Outcome> {
    let dir = args.out.resolve();
    let out = OutArgs { out_dir: dir.clone() };
    let q = args.quick;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut push = |outcome: Outcome, claim: &'static str, command: &'static str| {
        println!("{}", outcome.summary);
        for file in outcome.files {
            entries.push(ManifestEntry { file, claim, command });
        }
    };
    let bit = |p| TargetArgs {
        p,
        kind: KindName::BitR,
        r: Some(1),
        out: out.clone(),
    };
    push(spectrum(&bit(101))?, "last-bit spectrum closed form", "spectrum");
    push(gram(&bit(101))?, "direct and spectral second moments agree", "gram");
    push(
        mscov(&MscovArgs {
            pmin: 3,
            pmax: if q { 60 } else { 500 },
            out: out.clone(),
        })?,
        "mean-square covariance grows like p^3 log^2 p",
        "mscov",
    );
    for r in 1..=3 {
        push(
            bounds(&BoundsArgs {
                pmin: 31,
                pmax: if q { 67 } else { 503 },
                r,
                out: out.clone(),
            })?,
            "spectral bound dominates the exact second moment",
            "bounds",
        );
    }
    push(
        discrepancy(&DiscrepancyArgs {
            x: 0.618_033_988_749_894_8,
            y: 0.414_213_562_373_095_1,
            nmin_exp: 6,
            nmax_exp: if q { 8 } else { 12 },
            h: 16,
            out: out.clone(),
        })?,
        "ETK bound dominates the star discrepancy",
        "discrepancy",
    );
    push(
        waves(&WavesArgs {
            wave: WaveName::Sawtooth,
            amin_exp: 4,
            amax_exp: if q { 6 } else { 10 },
            rmax_exp: if q { 4 } else { 10 },
            out: out.clone(),
        })?,
        "Q-kernel norm and sin-ratio growth",
        "waves",
    );
    push(
        sqdim(&SqdimArgs {
            pmin: 5,
            pmax: if q { 31 } else { 101 },
            r: 1,
            limit: 64,
            out: out.clone(),
        })?,
        "Turán lower bound on SQ dimension",
        "sqdim",
    );
    push(
        probe(&ProbeArgs {
            pmin: 300,
            pmax: if q { 320 } else { 1000 },
            r: 1,
            inits: if q { 2 } else { 20 },
            seed: args.seed,
            hidden: vec![128, 128],
            activation: Activation::Sigmoid,
            cap: DEFAULT_PROBE_CAP,
            out: out.clone(),
        })?,
        "gradient variance ratio decays with p",
        "probe",
    );
    let train_args = |task, big_a, seed| TrainArgs {
        task,
        big_a,
        p: None,
        bits: 20,
        r: 1,
        seed,
        a: None,
        epochs: q.then_some(3),
        samples: None,
        batch_size: None,
        lr: None,
        optimizer: None,
        hidden: None,
        activation: None,
        train_fraction: None,
        out: out.clone(),
    };
    let seeds = if q { 1 } else { 5 };
    for s in 0..seeds {
        let seed = args.seed + s;
        push(
            train_cmd(&train_args(TaskName::Waves, 1 << 20, seed))?,
            "high-frequency waves stall at MSE 1/12",
            "train --task waves",
        );
        push(
            train_cmd(&train_args(TaskName::Waves, 2, seed))?,
            "low-frequency waves are learnable",
            "train --task waves --big-a 2",
        );
    }
    push(
        train_cmd(&train_args(TaskName::Bits, 0, args.seed))?,
        "modular last bit stays at chance accuracy",
        "train --task bits",
    );

    let mut sink = Sink::new(&dir)?;
    let n = entries.len();
    sink.write("manifest.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["output", "claim", "command"])?;
        for e in &entries {
            let name = e.file.strip_prefix(&dir).unwrap_or(&e.file);
            c.write_record([name.to_string_lossy().as_ref(), e.claim, e.command])?;
        }
        c.flush()
    })?;
    Ok(sink.finish(format!("sweep: {n} outputs listed in {}", dir.join("manifest.csv").display())))
}

pub fn dispatch(cli: &Cli) -> CliResult<Outcome> {
    match &cli.command {
        Command::Spectrum(a) => spectrum(a),
        Command::Gram(a) => gram(a),
        Command::Mscov(a) => mscov(a),
        Command::Bounds(a) => bounds(a),
        Command::Discrepancy(a) => discrepancy(a),
        Command::Waves(a) => waves(a),
        Command::Sqdim(a) => sqdim(a),
        Command::Probe(a) => probe(a),
        Command::Train(a) => train_cmd(a),
        Command::Sweep(a) => sweep(a),
    }
}
