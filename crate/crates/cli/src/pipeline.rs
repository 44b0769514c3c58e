//! Shared machinery behind the subcommands: the certificate cache, the
//! rate computation for one parameter point, and the block-parallel
//! simulation driver.

use qrx_core::completeness::thresholds;
use qrx_core::model::honest_score_distribution;
use qrx_core::moment::{build_moment_problem, solve_pguess, DualCertificate};
use qrx_core::rate::{optimize_beta, ErrorBudget, RateReport};
use qrx_core::scores::ScoreDistribution;
use qrx_core::sim::{
    block_partition, merge_blocks, simulate_block, DeviationModel, RunTranscript,
};
use qrx_core::ProtocolParams;
use serde::Serialize;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::files::{sha256_hex, write_json};
use crate::CliError;

/// Parameter set reduced to the fields a certificate actually depends on:
/// the moment problem is built from the state ensemble, the binning, and
/// the relaxation level, and the solve targets the honest statistics,
/// which add the detection efficiency. Round count, test probability, and
/// the error budget do not enter, so sweeps over them reuse one solve.
fn certificate_params(params: &ProtocolParams) -> ProtocolParams {
    ProtocolParams {
        eta: params.eta,
        amplitude: params.amplitude,
        bins_x: params.bins_x,
        bins_p: params.bins_p,
        bin_half_range: params.bin_half_range,
        layout: params.layout,
        relaxation_level: params.relaxation_level,
        ..ProtocolParams::default()
    }
}

pub fn certificate_cache_key(params: &ProtocolParams) -> String {
    certificate_params(params).digest()
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("cert-{key}.json"))
}

/// Loads the certificate for `params` from the cache or solves the
/// relaxation at the model's honest statistics and stores the result.
/// Concurrent solvers may race on the same key; the write is atomic and
/// the solver deterministic, so the race is benign.
pub fn obtain_certificate(config: &RunConfig) -> Result<DualCertificate, CliError> {
    let solve_at = certificate_params(&config.params);
    let key = certificate_cache_key(&config.params);
    let path = cache_path(&config.cache_dir(), &key);

    if config.cache {
        if let Ok(text) = std::fs::read_to_string(&path) {
            let cert: DualCertificate = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if cert.params_hash == key && cert.level == solve_at.relaxation_level {
                return Ok(cert);
            }
            return Err(CliError::Config(format!(
                "{}: cached certificate does not match its key",
                path.display()
            )));
        }
    }

    let omega = honest_score_distribution(&solve_at);
    let problem = build_moment_problem(&solve_at, solve_at.relaxation_level, 2)?;
    let bound = solve_pguess(&problem, &omega, &config.solver.to_options(), None)?;
    if config.cache {
        write_json(&path, &bound.certificate)?;
    }
    Ok(bound.certificate)
}

/// Rate analysis of one parameter point with an already-obtained
/// certificate and reference statistics.
pub fn rate_point(
    params: &ProtocolParams,
    cert: &DualCertificate,
    omega: &[f64],
    delta: &[f64],
) -> Result<RateReport, CliError> {
    let budget = ErrorBudget::from_params(params)?;
    let layout = params.layout();
    let dist = ScoreDistribution { categories: layout.labels().to_vec(), freq: omega.to_vec() };
    let (_, report) = optimize_beta(params, &budget, cert, &dist, delta)?;
    Ok(report)
}

/// The `rate` document written to disk.
#[derive(Debug, Serialize)]
pub struct RateDocument {
    pub params: ProtocolParams,
    pub certificate_level: usize,
    pub certificate_key: String,
    pub omega: Vec<f64>,
    pub delta: Vec<f64>,
    pub report: RateReport,
}

pub fn rate_document(config: &RunConfig) -> Result<RateDocument, CliError> {
    let (omega, delta) = config.reference_scores()?;
    let cert = obtain_certificate(config)?;
    let report = rate_point(&config.params, &cert, &omega, &delta)?;
    Ok(RateDocument {
        params: config.params.clone(),
        certificate_level: cert.level,
        certificate_key: cert.params_hash.clone(),
        omega,
        delta,
        report,
    })
}

/// Simulates a run with the blocks dispatched to the given thread pool.
/// The block structure is fixed by `block_rounds`, so the transcript is
/// bit-identical for every worker count.
pub fn simulate_parallel(
    config: &RunConfig,
    omega: &[f64],
    delta: &[f64],
    pool: &rayon::ThreadPool,
) -> Result<RunTranscript, CliError> {
    use rayon::prelude::*;
    let params = &config.params;
    let layout = params.layout();
    if omega.len() != layout.len() || delta.len() != layout.len() {
        return Err(CliError::Config(format!(
            "score table has {} categories, the layout {}",
            omega.len(),
            layout.len()
        )));
    }
    let n = params.n_rounds as u64;
    let sizes = block_partition(n, config.block_rounds);
    let blocks = pool.install(|| {
        sizes
            .par_iter()
            .enumerate()
            .map(|(i, &rounds)| {
                simulate_block(params, config.deviation, config.seed, i as u64, rounds, false)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(merge_blocks(params, config.deviation, config.seed, omega, delta, blocks)?)
}

/// Transcript summary written by `simulate` and `certify`.
#[derive(Debug, Serialize)]
pub struct TranscriptSummary {
    pub params: ProtocolParams,
    pub deviation: DeviationModel,
    pub seed: u64,
    pub accepted: bool,
    pub counts: Vec<u64>,
    pub thresholds: Vec<u64>,
    pub freq: ScoreDistribution,
    pub omega: Vec<f64>,
    pub delta: Vec<f64>,
    pub raw_bits: usize,
    pub raw_sha256: String,
    pub seed_bits_consumed: u64,
}

pub fn transcript_summary(
    omega: &[f64],
    delta: &[f64],
    transcript: &RunTranscript,
) -> TranscriptSummary {
    TranscriptSummary {
        params: transcript.params.clone(),
        deviation: transcript.deviation,
        seed: transcript.seed,
        accepted: transcript.accepted,
        counts: transcript.counts.clone(),
        thresholds: thresholds(
            transcript.params.n_rounds,
            transcript.params.gamma,
            omega,
            delta,
        ),
        freq: transcript.freq.clone(),
        omega: omega.to_vec(),
        delta: delta.to_vec(),
        raw_bits: transcript.raw_bits.len(),
        raw_sha256: sha256_hex(&transcript.raw_bits.to_bytes()),
        seed_bits_consumed: transcript.bits_consumed,
    }
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))
}
