//! `qrx`: drive the randomness-expansion pipeline from parameter files to
//! certificates, rate curves, simulated transcripts, and extracted bits.
//!
//! Exit codes are a stable contract: 0 success (and protocol accept),
//! 2 protocol abort, 3 nonpositive net rate, 4 configuration error,
//! 5 numerical failure.

mod config;
mod files;
mod pipeline;

use clap::{Parser, Subcommand};
use qrx_core::completeness::{calibrate_delta, epsilon_com_total, thresholds};
use qrx_core::device::{find_working_point, mzm_output, MzmConfig};
use qrx_core::extract::{extract, finalize_output, seed_length, ToeplitzSeed};
use qrx_core::fixtures::{ScoreRow, ScoreTable, FIXTURE_VERSION};
use qrx_core::model::honest_score_distribution;
use qrx_core::sim::{BitSource, PrngBits};
use qrx_core::bits::Bits;
use qrx_core::CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

use config::{resolve, resolve_workers, Overrides, RunConfig};
use files::{
    decode_key, decode_raw, encode_key, encode_raw, fmt_f64, sha256_hex, write_atomic,
    write_json, Csv,
};
use pipeline::{
    obtain_certificate, rate_document, rate_point, simulate_parallel, thread_pool,
    transcript_summary, RateDocument,
};

/// ChaCha stream reserved for the extractor seed; simulation blocks use
/// streams `2 * block_index` and `2 * block_index + 1`, which stay far
/// below this for any feasible round count.
const EXTRACTOR_STREAM: u64 = u64::MAX;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("protocol abort")]
    Abort,
    #[error("nonpositive rate")]
    NonpositiveRate,
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Abort => 2,
            CliError::NonpositiveRate => 3,
            CliError::Config(_) => 4,
            CliError::Numerical(_) => 5,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        match err {
            CoreError::Params(msg) => CliError::Config(msg),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "qrx",
    version,
    about = "Self-testing quantum randomness expansion: rates, certificates, \
             simulated runs, extraction, and device curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Entropy rate of one parameter point (certificate solved or cached).
    Rate {
        /// JSON configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Write the full rate document here (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a one-row CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Rate across the configured parameter grids, one CSV row per point.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-point rate documents (optional).
        #[arg(long)]
        points_dir: Option<PathBuf>,
        /// Worker threads (default: QRX_WORKERS or the core count).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Simulate a protocol run and apply the count test.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Write the packed raw transcript here.
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Write the transcript summary here (JSON).
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Full protocol: simulate (or ingest), test, and on accept extract.
    Certify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Write the final output K = Z || S here.
        #[arg(long)]
        key: PathBuf,
        /// Write the run summary here (JSON).
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Ingest this raw transcript instead of simulating.
        #[arg(long)]
        raw_in: Option<PathBuf>,
        /// Also write the raw transcript here (simulated runs only).
        #[arg(long)]
        raw_out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Hash an existing raw transcript down to a chosen length.
    Extract {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Raw transcript file to hash.
        #[arg(long)]
        raw: PathBuf,
        /// Output bit count.
        #[arg(long)]
        out_len: usize,
        /// Write the final output K = Z || S here.
        #[arg(long)]
        key: PathBuf,
    },
    /// Modulator transfer curves and working points per push-push ratio.
    Device {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Write (ratio, phi1, intensity, phase) curves here (CSV).
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Write the per-ratio working-point summary here (CSV).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Calibrate count-test tolerances and emit a reference score table.
    CalibrateDelta {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Write the calibrated score table here (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if err.use_stderr() {
                // Usage problems are configuration errors, not clap's
                // conventional exit 2 (which this contract gives to aborts).
                let _ = err.print();
                return ExitCode::from(4);
            }
            // --help and --version land here.
            let _ = err.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match err {
                // The abort and nonpositive-rate outcomes already printed
                // their verdicts; they are statuses, not failures.
                CliError::Abort | CliError::NonpositiveRate => {}
                ref other => eprintln!("qrx: {other}"),
            }
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Rate { config, overrides, out, csv } => {
            let config = resolve(config.as_deref(), overrides)?;
            cmd_rate(&config, out.as_deref(), csv.as_deref())
        }
        Command::Sweep { config, overrides, out, points_dir, workers } => {
            let config = resolve(config.as_deref(), overrides)?;
            cmd_sweep(&config, &out, points_dir.as_deref(), resolve_workers(workers)?)
        }
        Command::Simulate { config, overrides, raw, summary, workers } => {
            let config = resolve(config.as_deref(), overrides)?;
            cmd_simulate(&config, raw.as_deref(), summary.as_deref(), resolve_workers(workers)?)
        }
        Command::Certify { config, overrides, key, summary, raw_in, raw_out, workers } => {
            let config = resolve(config.as_deref(), overrides)?;
            cmd_certify(
                &config,
                &key,
                summary.as_deref(),
                raw_in.as_deref(),
                raw_out.as_deref(),
                resolve_workers(workers)?,
            )
        }
        Command::Extract { config, overrides, raw, out_len, key } => {
            let config = resolve(config.as_deref(), overrides)?;
            cmd_extract(&config, &raw, out_len, &key)
        }
        Command::Device { config, overrides, curves, summary } => {
            let config = resolve(config.as_deref(), overrides)?;
            cmd_device(&config, curves.as_deref(), summary.as_deref())
        }
        Command::CalibrateDelta { config, overrides, out } => {
            let config = resolve(config.as_deref(), overrides)?;
            cmd_calibrate_delta(&config, out.as_deref())
        }
    }
}

const SWEEP_HEADER: [&str; 10] = [
    "eta", "amplitude", "gamma", "n_rounds", "beta", "h", "r_net", "ell_out", "ell_in",
    "nonpositive",
];

fn sweep_row(doc: &RateDocument) -> Vec<String> {
    let nonpositive = doc.report.nonpositive_entropy || doc.report.r_net <= 0.0;
    vec![
        fmt_f64(doc.params.eta),
        fmt_f64(doc.params.amplitude),
        fmt_f64(doc.params.gamma),
        fmt_f64(doc.params.n_rounds),
        fmt_f64(doc.report.beta),
        fmt_f64(doc.report.h),
        fmt_f64(doc.report.r_net),
        fmt_f64(doc.report.ell_out),
        fmt_f64(doc.report.ell_in),
        (nonpositive as u8).to_string(),
    ]
}

fn cmd_rate(
    config: &RunConfig,
    out: Option<&std::path::Path>,
    csv: Option<&std::path::Path>,
) -> Result<(), CliError> {
    let doc = rate_document(config)?;
    let r = &doc.report;
    println!(
        "eta {}  amplitude {}  gamma {}  n {}",
        fmt_f64(doc.params.eta),
        fmt_f64(doc.params.amplitude),
        fmt_f64(doc.params.gamma),
        fmt_f64(doc.params.n_rounds)
    );
    println!(
        "h {}  beta {}  ell_out {}  ell_in {}  r_net {}",
        fmt_f64(r.h),
        fmt_f64(r.beta),
        fmt_f64(r.ell_out),
        fmt_f64(r.ell_in),
        fmt_f64(r.r_net)
    );
    if let Some(path) = out {
        write_json(path, &doc)?;
    }
    if let Some(path) = csv {
        let mut table = Csv::new(&SWEEP_HEADER);
        table.row(&sweep_row(&doc));
        table.write(path)?;
    }
    if doc.report.nonpositive_entropy || doc.report.r_net <= 0.0 {
        println!("verdict: no net expansion at this point");
        return Err(CliError::NonpositiveRate);
    }
    println!("verdict: expanding");
    Ok(())
}

fn cmd_sweep(
    config: &RunConfig,
    out: &std::path::Path,
    points_dir: Option<&std::path::Path>,
    workers: usize,
) -> Result<(), CliError> {
    use rayon::prelude::*;
    let points = config.sweep.points(&config.params);
    let pool = thread_pool(workers)?;
    let documents: Vec<RateDocument> = pool.install(|| {
        points
            .par_iter()
            .map(|params| {
                let point_config = RunConfig { params: params.clone(), ..config.clone() };
                let doc = rate_document(&point_config)?;
                if let Some(dir) = points_dir {
                    let name = format!("point-{}.json", certificate_file_stem(params));
                    write_json(&dir.join(name), &doc)?;
                }
                Ok(doc)
            })
            .collect::<Result<_, CliError>>()
    })?;

    let mut table = Csv::new(&SWEEP_HEADER);
    for doc in &documents {
        table.row(&sweep_row(doc));
    }
    table.write(out)?;
    println!("{} points -> {}", documents.len(), out.display());
    Ok(())
}

/// Stable per-point file stem: the full parameter digest, which unlike the
/// certificate key distinguishes every axis of the sweep.
fn certificate_file_stem(params: &qrx_core::ProtocolParams) -> String {
    params.digest()[..16].to_string()
}

fn cmd_simulate(
    config: &RunConfig,
    raw: Option<&std::path::Path>,
    summary: Option<&std::path::Path>,
    workers: usize,
) -> Result<(), CliError> {
    let (omega, delta) = config.reference_scores()?;
    let pool = thread_pool(workers)?;
    let transcript = simulate_parallel(config, &omega, &delta, &pool)?;
    let doc = transcript_summary(&omega, &delta, &transcript);
    if let Some(path) = summary {
        write_json(path, &doc)?;
    }
    if let Some(path) = raw {
        write_atomic(path, &encode_raw(&transcript.raw_bits))?;
    }
    println!(
        "{} rounds, {} raw bits, {} seed bits consumed",
        fmt_f64(config.params.n_rounds),
        transcript.raw_bits.len(),
        transcript.bits_consumed
    );
    if transcript.accepted {
        println!("verdict: accept");
        Ok(())
    } else {
        println!("verdict: abort (a score count exceeded its threshold)");
        Err(CliError::Abort)
    }
}

/// Extractor seed bits for this run seed. Drawn from a stream disjoint
/// from every simulation substream so ingesting an externally produced
/// transcript cannot correlate the seed with the raw data.
fn extractor_seed(run_seed: u64, bits: usize) -> ToeplitzSeed {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(EXTRACTOR_STREAM);
    let mut source = PrngBits::new(rng);
    ToeplitzSeed::new(Bits::from_fn(bits, |_| {
        source.next_bit().expect("PRNG bit stream never runs dry")
    }))
}

#[derive(Debug, Serialize)]
struct CertifySummary {
    transcript: pipeline::TranscriptSummary,
    certificate_level: usize,
    certificate_key: String,
    ell: usize,
    seed_bits: usize,
    key_bits: usize,
    key_sha256: String,
}

fn cmd_certify(
    config: &RunConfig,
    key_path: &std::path::Path,
    summary: Option<&std::path::Path>,
    raw_in: Option<&std::path::Path>,
    raw_out: Option<&std::path::Path>,
    workers: usize,
) -> Result<(), CliError> {
    let (omega, delta) = config.reference_scores()?;

    let transcript = match raw_in {
        Some(path) => {
            if raw_out.is_some() {
                return Err(CliError::Config(
                    "--raw-out only applies to simulated runs".into(),
                ));
            }
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            ingest_raw(config, &omega, &delta, decode_raw(&bytes)?)?
        }
        None => {
            let pool = thread_pool(workers)?;
            simulate_parallel(config, &omega, &delta, &pool)?
        }
    };

    if let Some(path) = raw_out {
        write_atomic(path, &encode_raw(&transcript.raw_bits))?;
    }
    let doc = transcript_summary(&omega, &delta, &transcript);

    if !transcript.accepted {
        if let Some(path) = summary {
            write_json(path, &doc)?;
        }
        println!("verdict: abort (a score count exceeded its threshold); no output produced");
        return Err(CliError::Abort);
    }

    let cert = obtain_certificate(config)?;
    let report = rate_point(&config.params, &cert, &omega, &delta)?;
    let ell = report.ell_out;
    if report.nonpositive_entropy || ell < 1.0 {
        if let Some(path) = summary {
            write_json(path, &doc)?;
        }
        println!("verdict: accepted, but no extractable bits at this budget");
        return Err(CliError::NonpositiveRate);
    }
    let ell = ell as usize;

    let seed_bits = seed_length(transcript.raw_bits.len(), ell);
    let seed = extractor_seed(config.seed, seed_bits);
    let z = extract(&transcript.raw_bits, &seed, ell)?;
    let k = finalize_output(&z, &seed);
    let encoded = encode_key(&z, &seed);
    write_atomic(key_path, &encoded)?;
    verify_key_file(key_path, &z)?;

    let full = CertifySummary {
        transcript: doc,
        certificate_level: cert.level,
        certificate_key: cert.params_hash.clone(),
        ell,
        seed_bits,
        key_bits: k.len(),
        key_sha256: sha256_hex(&encoded),
    };
    if let Some(path) = summary {
        write_json(path, &full)?;
    }
    println!(
        "verdict: accept; K = Z || S with {} + {} bits -> {}",
        ell,
        seed_bits,
        key_path.display()
    );
    Ok(())
}

/// Wraps an external raw transcript in a run result by re-deriving the
/// score counts from the packed rounds and applying the count test.
fn ingest_raw(
    config: &RunConfig,
    omega: &[f64],
    delta: &[f64],
    raw_bits: Bits,
) -> Result<qrx_core::sim::RunTranscript, CliError> {
    use qrx_core::model::{expected_y, raw_score};
    use qrx_core::scores::ScoreDistribution;
    use qrx_core::sim::unpack_rounds;
    let params = &config.params;
    let layout = params.layout();
    let m_max = params.m_x().max(params.m_p());
    let rounds = unpack_rounds(&raw_bits, m_max)?;
    if rounds.len() as f64 != params.n_rounds {
        return Err(CliError::Config(format!(
            "raw transcript has {} rounds, parameters say {}",
            rounds.len(),
            params.n_rounds
        )));
    }
    let mut counts = vec![0u64; layout.len()];
    for (i, &(t, x, y, b)) in rounds.iter().enumerate() {
        let expected = if t { expected_y(x as usize) } else { true };
        let m = if y { params.m_p() } else { params.m_x() };
        if y != expected || (!t && x != 0) || b.unsigned_abs() as usize > m {
            return Err(CliError::Config(format!(
                "round {i}: fields (t={t}, x={x}, y={y}, b={b}) violate the protocol"
            )));
        }
        if t {
            let (basis, signed) = raw_score(x as usize, b);
            counts[layout.category_of(basis, signed)] += 1;
        }
    }
    let freq = ScoreDistribution::from_counts(&layout, &counts, params.n_rounds, params.gamma);
    let accepted =
        qrx_core::completeness::accept_test(&freq, params.n_rounds, params.gamma, omega, delta);
    Ok(qrx_core::sim::RunTranscript {
        params: params.clone(),
        deviation: config.deviation,
        seed: config.seed,
        counts,
        freq,
        accepted,
        raw_bits,
        records: None,
        bits_consumed: 0,
    })
}

/// Reads the key file back and checks the extracted half against the
/// in-memory value, so a successful exit vouches for the artifact on disk.
fn verify_key_file(path: &std::path::Path, z: &Bits) -> Result<(), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let (z_disk, _) = decode_key(&bytes)?;
    if &z_disk != z {
        return Err(CliError::Numerical(format!(
            "{}: written key does not round-trip",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_extract(
    config: &RunConfig,
    raw_path: &std::path::Path,
    out_len: usize,
    key_path: &std::path::Path,
) -> Result<(), CliError> {
    if out_len == 0 {
        return Err(CliError::Config("--out-len must be positive".into()));
    }
    let bytes = std::fs::read(raw_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", raw_path.display())))?;
    let raw = decode_raw(&bytes)?;
    let seed = extractor_seed(config.seed, seed_length(raw.len(), out_len));
    let z = extract(&raw, &seed, out_len)?;
    write_atomic(key_path, &encode_key(&z, &seed))?;
    println!(
        "{} raw bits -> {} output bits (+ {} seed bits) -> {}",
        raw.len(),
        out_len,
        seed.len(),
        key_path.display()
    );
    Ok(())
}

/// Drive-phase sample count per ratio curve.
const CURVE_POINTS: usize = 1200;

fn cmd_device(
    config: &RunConfig,
    curves: Option<&std::path::Path>,
    summary: Option<&std::path::Path>,
) -> Result<(), CliError> {
    let span = config.target_phase_span;
    let mut curve_table = Csv::new(&["ratio", "phi1", "intensity", "phase"]);
    let mut summary_table = Csv::new(&[
        "ratio",
        "phi1_start",
        "phi1_end",
        "bias",
        "intensity",
        "insertion_loss",
        "ripple",
    ]);
    let mut best: Option<(f64, f64)> = None;

    for &ratio in &config.device_ratios {
        let cfg = MzmConfig { ratio, ..config.mzm };
        let wp = find_working_point(&cfg, span)?;
        // Curves are traced at the ratio's own optimized bias so the rows
        // show the modulator as it would actually be operated.
        let traced = MzmConfig { bias: wp.bias, ..cfg };
        let phi_max = if cfg.loss_slope > 0.0 {
            (1.0 / cfg.loss_slope).min(2.0 * std::f64::consts::PI)
        } else {
            2.0 * std::f64::consts::PI
        };
        let mut prev_phase: Option<f64> = None;
        for i in 0..=CURVE_POINTS {
            let phi1 = phi_max * i as f64 / CURVE_POINTS as f64;
            let (intensity, raw_phase) = mzm_output(phi1, &traced)?;
            // Unwrap by nearest branch so the phase column plots as one
            // continuous curve.
            let phase = match prev_phase {
                Some(p) => {
                    let tau = 2.0 * std::f64::consts::PI;
                    raw_phase + ((p - raw_phase) / tau).round() * tau
                }
                None => raw_phase,
            };
            prev_phase = Some(phase);
            curve_table.row(&[
                fmt_f64(ratio),
                fmt_f64(phi1),
                fmt_f64(intensity),
                fmt_f64(phase),
            ]);
        }
        summary_table.row(&[
            fmt_f64(ratio),
            fmt_f64(wp.phi1_start),
            fmt_f64(wp.phi1_end),
            fmt_f64(wp.bias),
            fmt_f64(wp.intensity),
            fmt_f64(1.0 - wp.intensity),
            fmt_f64(wp.ripple),
        ]);
        if best.map_or(true, |(_, intensity)| wp.intensity > intensity) {
            best = Some((ratio, wp.intensity));
        }
        println!(
            "ratio {}: drive [{:.4}, {:.4}], bias {:.4}, intensity {:.4}, ripple {:.4}",
            fmt_f64(ratio),
            wp.phi1_start,
            wp.phi1_end,
            wp.bias,
            wp.intensity,
            wp.ripple
        );
    }

    if let Some((ratio, intensity)) = best {
        println!(
            "lowest insertion loss at ratio {} ({:.2}% loss at the working points)",
            fmt_f64(ratio),
            (1.0 - intensity) * 100.0
        );
    }
    if let Some(path) = curves {
        curve_table.write(path)?;
    }
    if let Some(path) = summary {
        summary_table.write(path)?;
    }
    Ok(())
}

fn cmd_calibrate_delta(
    config: &RunConfig,
    out: Option<&std::path::Path>,
) -> Result<(), CliError> {
    let params = &config.params;
    let layout = params.layout();
    let omega = honest_score_distribution(params);
    let delta = calibrate_delta(
        params.n_rounds,
        params.gamma,
        &omega,
        params.eps_completeness,
        params.delta_allocation,
    )?;
    let limits = thresholds(params.n_rounds, params.gamma, &omega, &delta);
    let achieved = epsilon_com_total(params.n_rounds, params.gamma, &omega, &delta);

    println!("category        omega         delta         threshold");
    for (((label, &w), &d), &k) in
        layout.labels().iter().zip(&omega).zip(&delta).zip(&limits)
    {
        println!("{label:<14}  {w:<12.6}  {d:<12.3e}  {k}");
    }
    println!(
        "honest abort bound {:.3e} (budget {:.3e})",
        achieved, params.eps_completeness
    );

    if let Some(path) = out {
        let table = ScoreTable {
            version: FIXTURE_VERSION,
            rows: layout
                .labels()
                .iter()
                .zip(&omega)
                .zip(&delta)
                .map(|((label, &w), &d)| ScoreRow {
                    category: label.clone(),
                    omega: w,
                    delta: d,
                })
                .collect(),
        };
        write_json(path, &table)?;
        println!("score table -> {}", path.display());
    }
    Ok(())
}
