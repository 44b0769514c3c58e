//! Monte Carlo execution of protocol runs.
//!
//! A run consumes seed bits through an arithmetic decoder (so the input
//! entropy drawn per round matches the accounting in [`crate::rate`]),
//! samples homodyne outcomes from the honest model or a configured
//! deviation, accumulates score counts, packs the raw round string, and
//! applies the count test. Rounds are processed in fixed-size blocks, each
//! keyed to its own deterministic random substream, so a run can be
//! reproduced bit for bit regardless of how the blocks are scheduled
//! across threads.

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::Bits;
use crate::completeness::accept_test;
use crate::error::CoreError;
use crate::model::{
    bin_probabilities_for_mean, expected_y, lo_phase, position_to_signed_bin, raw_score,
    signed_bin_position, STATE_PHASES,
};
use crate::params::ProtocolParams;
use crate::scores::{ScoreDistribution, ScoreLabel};

/// A stream of fresh uniform bits with consumption accounting.
///
/// The decoder pulls bits one at a time; `consumed` must count every bit
/// handed out, including the bits used to prime the decoder register.
pub trait BitSource {
    /// Next bit, or [`CoreError::Exhausted`] when the stream runs dry.
    fn next_bit(&mut self) -> Result<bool, CoreError>;
    fn consumed(&self) -> u64;
}

/// Reads an existing bit string front to back.
pub struct BitsSource<'a> {
    bits: &'a Bits,
    pos: usize,
}

impl<'a> BitsSource<'a> {
    pub fn new(bits: &'a Bits) -> Self {
        BitsSource { bits, pos: 0 }
    }
}

impl BitSource for BitsSource<'_> {
    fn next_bit(&mut self) -> Result<bool, CoreError> {
        if self.pos >= self.bits.len() {
            return Err(CoreError::Exhausted(format!(
                "seed string ended after {} bits",
                self.pos
            )));
        }
        let bit = self.bits.get(self.pos);
        self.pos += 1;
        Ok(bit)
    }

    fn consumed(&self) -> u64 {
        self.pos as u64
    }
}

/// Simulation stand-in for the trusted seed: bits drawn from a counter
/// based generator, never exhausted.
pub struct PrngBits {
    rng: ChaCha8Rng,
    word: u64,
    avail: u32,
    consumed: u64,
}

impl PrngBits {
    pub fn new(rng: ChaCha8Rng) -> Self {
        PrngBits { rng, word: 0, avail: 0, consumed: 0 }
    }
}

impl BitSource for PrngBits {
    fn next_bit(&mut self) -> Result<bool, CoreError> {
        if self.avail == 0 {
            self.word = self.rng.next_u64();
            self.avail = 64;
        }
        let bit = self.word & 1 == 1;
        self.word >>= 1;
        self.avail -= 1;
        self.consumed += 1;
        Ok(bit)
    }

    fn consumed(&self) -> u64 {
        self.consumed
    }
}

const CODE_BITS: u32 = 32;
const CODE_TOTAL: u64 = 1 << CODE_BITS;
const CODE_HALF: u64 = CODE_TOTAL / 2;
const CODE_QUARTER: u64 = CODE_TOTAL / 4;

/// Arithmetic decoder over a 32-bit integer interval.
///
/// Treats the incoming bit stream as the binary expansion of a uniform
/// number in [0, 1) and peels off symbols of any distribution quantized to
/// `2^32` frequency units. Bit consumption then tracks the entropy of the
/// decoded sequence to within a few bits per stream, which is what makes
/// the seed-length accounting of the simulation meaningful: uniform bits
/// in, biased round inputs out, no entropy lost to rejection.
pub struct IntervalDecoder<S: BitSource> {
    source: S,
    low: u64,
    high: u64,
    code: u64,
}

impl<S: BitSource> IntervalDecoder<S> {
    pub fn new(mut source: S) -> Result<Self, CoreError> {
        let mut code = 0u64;
        for _ in 0..CODE_BITS {
            code = (code << 1) | source.next_bit()? as u64;
        }
        Ok(IntervalDecoder { source, low: 0, high: CODE_TOTAL - 1, code })
    }

    /// Decodes one symbol against a cumulative frequency table: `cum[0] = 0`,
    /// strictly increasing, `cum[last] = 2^32`; symbol `s` owns
    /// `[cum[s], cum[s+1])`.
    pub fn decode(&mut self, cum: &[u64]) -> Result<usize, CoreError> {
        let range = self.high - self.low + 1;
        let offset = self.code - self.low;
        let target =
            (((offset + 1) as u128 * CODE_TOTAL as u128 - 1) / range as u128) as u64;
        let symbol = cum.partition_point(|&c| c <= target) - 1;
        self.high = self.low
            + ((range as u128 * cum[symbol + 1] as u128) / CODE_TOTAL as u128) as u64
            - 1;
        self.low += ((range as u128 * cum[symbol] as u128) / CODE_TOTAL as u128) as u64;
        loop {
            if self.high < CODE_HALF {
                // Keep the interval anchored; shift below.
            } else if self.low >= CODE_HALF {
                self.low -= CODE_HALF;
                self.high -= CODE_HALF;
                self.code -= CODE_HALF;
            } else if self.low >= CODE_QUARTER && self.high < CODE_HALF + CODE_QUARTER {
                self.low -= CODE_QUARTER;
                self.high -= CODE_QUARTER;
                self.code -= CODE_QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.code = (self.code << 1) | self.source.next_bit()? as u64;
        }
        Ok(symbol)
    }

    pub fn bits_consumed(&self) -> u64 {
        self.source.consumed()
    }
}

/// Cumulative frequency table for the per-round input symbol: generation
/// with weight `1 - gamma`, then the four test settings with weight
/// `gamma / 4` each. Quantized to `2^32` with every symbol kept nonzero.
pub fn input_cum_table(gamma: f64) -> [u64; 6] {
    assert!(gamma > 0.0 && gamma < 1.0, "gamma {gamma} outside (0, 1)");
    let quarter = ((gamma / 4.0) * CODE_TOTAL as f64).round().max(1.0) as u64;
    let quarter = quarter.min((CODE_TOTAL - 1) / 4);
    let generation = CODE_TOTAL - 4 * quarter;
    [
        0,
        generation,
        generation + quarter,
        generation + 2 * quarter,
        generation + 3 * quarter,
        CODE_TOTAL,
    ]
}

/// Draws per-round inputs `(t, x, y)` from a bit source.
///
/// Generation rounds fix `(x, y) = (0, 1)`; test rounds draw `x` uniformly
/// and set `y` to the basis that state is tested in.
pub struct InputSampler<S: BitSource> {
    decoder: IntervalDecoder<S>,
    cum: [u64; 6],
}

impl<S: BitSource> InputSampler<S> {
    pub fn new(gamma: f64, source: S) -> Result<Self, CoreError> {
        Ok(InputSampler { decoder: IntervalDecoder::new(source)?, cum: input_cum_table(gamma) })
    }

    pub fn next_round(&mut self) -> Result<(bool, u8, bool), CoreError> {
        let symbol = self.decoder.decode(&self.cum)?;
        Ok(if symbol == 0 {
            (false, 0, true)
        } else {
            let x = (symbol - 1) as u8;
            (true, x, expected_y(x as usize))
        })
    }

    pub fn bits_consumed(&self) -> u64 {
        self.decoder.bits_consumed()
    }
}

/// Collects `n` rounds of inputs and the number of seed bits they cost.
pub fn sample_inputs<S: BitSource>(
    n: u64,
    gamma: f64,
    source: S,
) -> Result<(Vec<(bool, u8, bool)>, u64), CoreError> {
    let mut sampler = InputSampler::new(gamma, source)?;
    let mut rounds = Vec::with_capacity(n as usize);
    for _ in 0..n {
        rounds.push(sampler.next_round()?);
    }
    Ok((rounds, sampler.bits_consumed()))
}

/// How the simulated devices depart from the calibrated model.
///
/// Each variant perturbs the physical parameters the honest outcome
/// distribution is computed from; `FixedOutcome` replaces the detector
/// with one that always reports the same signed bin (clamped to the
/// outermost bin of whichever basis is measured).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviationModel {
    Honest,
    /// Additive shift of the detection efficiency, clamped to [0, 1].
    EfficiencyShift(f64),
    /// Additive shift of the signal amplitude, clamped to nonnegative.
    AmplitudeShift(f64),
    /// Radians added to the local oscillator phase in both bases.
    PhaseMisalignment(f64),
    /// Detector stuck on one signed bin.
    FixedOutcome(i32),
}

impl Default for DeviationModel {
    fn default() -> Self {
        DeviationModel::Honest
    }
}

impl DeviationModel {
    pub fn validate(&self) -> Result<(), CoreError> {
        match *self {
            DeviationModel::FixedOutcome(0) => {
                Err(CoreError::Params("fixed outcome bin 0 does not exist".into()))
            }
            DeviationModel::EfficiencyShift(d)
            | DeviationModel::AmplitudeShift(d)
            | DeviationModel::PhaseMisalignment(d)
                if !d.is_finite() =>
            {
                Err(CoreError::Params(format!("deviation magnitude {d} is not finite")))
            }
            _ => Ok(()),
        }
    }
}

/// Quadrature mean seen by the deviated detector for state `x` at the
/// oscillator phase of basis `y`.
fn deviated_mean(params: &ProtocolParams, deviation: DeviationModel, x: usize, y: bool) -> f64 {
    let (eta, amp, theta) = match deviation {
        DeviationModel::Honest | DeviationModel::FixedOutcome(_) => {
            (params.eta, params.amplitude, lo_phase(y))
        }
        DeviationModel::EfficiencyShift(d) => {
            ((params.eta + d).clamp(0.0, 1.0), params.amplitude, lo_phase(y))
        }
        DeviationModel::AmplitudeShift(d) => {
            (params.eta, (params.amplitude + d).max(0.0), lo_phase(y))
        }
        DeviationModel::PhaseMisalignment(d) => (params.eta, params.amplitude, lo_phase(y) + d),
    };
    let alpha = Complex64::from_polar(amp, STATE_PHASES[x]);
    2.0 * eta.sqrt() * (alpha * Complex64::from_polar(1.0, -theta)).re
}

/// Outcome distribution over bin positions `0..2m` for state `x` measured
/// in basis `y` under the given deviation.
pub fn deviated_probabilities(
    params: &ProtocolParams,
    deviation: DeviationModel,
    x: usize,
    y: bool,
) -> Vec<f64> {
    let m = if y { params.m_p() } else { params.m_x() };
    if let DeviationModel::FixedOutcome(bin) = deviation {
        let clamped = bin.clamp(-(m as i32), m as i32);
        let mut probs = vec![0.0; 2 * m];
        probs[signed_bin_position(clamped, m)] = 1.0;
        return probs;
    }
    bin_probabilities_for_mean(deviated_mean(params, deviation, x, y), m, params.bin_half_range)
}

/// Expected score distribution of a device running the given deviation,
/// conditioned on a test round. Matches
/// [`crate::model::honest_score_distribution`] when the deviation is
/// [`DeviationModel::Honest`].
pub fn deviated_score_distribution(params: &ProtocolParams, deviation: DeviationModel) -> Vec<f64> {
    let layout = params.layout();
    let mut dist = vec![0.0; layout.len()];
    for x in 0..4 {
        let y = expected_y(x);
        let m = if y { params.m_p() } else { params.m_x() };
        let probs = deviated_probabilities(params, deviation, x, y);
        for (pos, &p) in probs.iter().enumerate() {
            let (basis, signed) = raw_score(x, position_to_signed_bin(pos, m));
            dist[layout.category_of(basis, signed)] += 0.25 * p;
        }
    }
    dist
}

/// Width of the packed signed-bin field: enough bits for positions
/// `0..2m_max`.
pub fn bin_field_width(m_max: usize) -> usize {
    assert!(m_max >= 1);
    (usize::BITS - (2 * m_max - 1).leading_zeros()) as usize
}

/// Packed bits per round: signed bin, then `t`, `x`, `y`.
pub fn round_width(m_max: usize) -> usize {
    bin_field_width(m_max) + 4
}

fn push_field(bits: &mut Bits, value: u64, width: usize) {
    for i in (0..width).rev() {
        bits.push((value >> i) & 1 == 1);
    }
}

/// Appends one round to the raw string. Fields are fixed width, most
/// significant bit first: bin position in `bin_field_width(m_max)` bits,
/// `t` in one, `x` in two, `y` in one. Both bases share the widest bin
/// field so every round occupies `round_width(m_max)` bits.
pub fn pack_round(bits: &mut Bits, m_max: usize, t: bool, x: u8, y: bool, b: i32) {
    push_field(bits, signed_bin_position(b, m_max) as u64, bin_field_width(m_max));
    bits.push(t);
    push_field(bits, x as u64, 2);
    bits.push(y);
}

/// Inverse of [`pack_round`] over a whole raw string; returns
/// `(t, x, y, b)` per round.
pub fn unpack_rounds(bits: &Bits, m_max: usize) -> Result<Vec<(bool, u8, bool, i32)>, CoreError> {
    let width = round_width(m_max);
    if bits.len() % width != 0 {
        return Err(CoreError::Params(format!(
            "raw string length {} is not a multiple of the round width {width}",
            bits.len()
        )));
    }
    let bin_width = bin_field_width(m_max);
    let mut rounds = Vec::with_capacity(bits.len() / width);
    let mut pos = 0;
    while pos < bits.len() {
        let mut field = |w: usize| {
            let mut v = 0u64;
            for _ in 0..w {
                v = (v << 1) | bits.get(pos) as u64;
                pos += 1;
            }
            v
        };
        let bin_pos = field(bin_width) as usize;
        if bin_pos >= 2 * m_max {
            return Err(CoreError::Params(format!(
                "bin code {bin_pos} out of range for {} bins",
                2 * m_max
            )));
        }
        let t = field(1) == 1;
        let x = field(2) as u8;
        let y = field(1) == 1;
        rounds.push((t, x, y, position_to_signed_bin(bin_pos, m_max)));
    }
    Ok(rounds)
}

/// One simulated round, retained only when
/// [`SimOptions::keep_records`] is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub t: bool,
    pub x: u8,
    pub y: bool,
    pub b: i32,
    pub score: ScoreLabel,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Keep per-round records; costs memory proportional to the run.
    pub keep_records: bool,
    /// Rounds per block. Fixed independently of scheduling so results do
    /// not depend on how many workers execute the blocks.
    pub block_rounds: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { keep_records: false, block_rounds: 25_000_000 }
    }
}

/// Outcome of one simulated block of rounds.
#[derive(Debug, Clone)]
pub struct BlockResult {
    pub block_index: u64,
    pub rounds: u64,
    /// Test-round score counts in layout order.
    pub counts: Vec<u64>,
    pub raw_bits: Bits,
    pub records: Option<Vec<RoundRecord>>,
    pub bits_consumed: u64,
}

/// Full result of a simulated run.
#[derive(Debug, Clone)]
pub struct RunTranscript {
    pub params: ProtocolParams,
    pub deviation: DeviationModel,
    pub seed: u64,
    /// Test-round score counts in layout order.
    pub counts: Vec<u64>,
    pub freq: ScoreDistribution,
    pub accepted: bool,
    pub raw_bits: Bits,
    pub records: Option<Vec<RoundRecord>>,
    pub bits_consumed: u64,
}

/// Rounds per block for a run of `n` rounds: full blocks of
/// `block_rounds`, then one remainder block.
pub fn block_partition(n: u64, block_rounds: u64) -> Vec<u64> {
    assert!(block_rounds >= 1);
    let mut sizes = vec![block_rounds; (n / block_rounds) as usize];
    if n % block_rounds != 0 {
        sizes.push(n % block_rounds);
    }
    sizes
}

/// Cumulative outcome tables for each input symbol: index 0 is the
/// generation round setting `(x, y) = (0, 1)`, index `1 + x` the test
/// setting for state `x`. The last entry of each table is forced to 1 so
/// inverse transform sampling cannot fall off the end.
fn outcome_tables(params: &ProtocolParams, deviation: DeviationModel) -> Vec<Vec<f64>> {
    let mut tables = Vec::with_capacity(5);
    let settings =
        std::iter::once((0usize, true)).chain((0..4).map(|x| (x, expected_y(x))));
    for (x, y) in settings {
        let probs = deviated_probabilities(params, deviation, x, y);
        let mut cum = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in probs {
            acc += p;
            cum.push(acc);
        }
        *cum.last_mut().expect("at least two bins") = 1.0;
        tables.push(cum);
    }
    tables
}

/// Runs one block of rounds.
///
/// Every block derives two dedicated substreams from the run seed: stream
/// `2 * block_index` feeds the input sampler, stream `2 * block_index + 1`
/// the outcome draws. Block results are therefore a function of `(seed,
/// block_index, rounds)` alone.
pub fn simulate_block(
    params: &ProtocolParams,
    deviation: DeviationModel,
    seed: u64,
    block_index: u64,
    rounds: u64,
    keep_records: bool,
) -> Result<BlockResult, CoreError> {
    let layout = params.layout();
    let m_x = params.m_x();
    let m_p = params.m_p();
    let m_max = m_x.max(m_p);
    let tables = outcome_tables(params, deviation);

    let mut input_rng = ChaCha8Rng::seed_from_u64(seed);
    input_rng.set_stream(2 * block_index);
    let mut outcome_rng = ChaCha8Rng::seed_from_u64(seed);
    outcome_rng.set_stream(2 * block_index + 1);

    let mut sampler = InputSampler::new(params.gamma, PrngBits::new(input_rng))?;
    let mut counts = vec![0u64; layout.len()];
    let mut raw_bits = Bits::new();
    let mut records = keep_records.then(|| Vec::with_capacity(rounds as usize));

    for _ in 0..rounds {
        let (t, x, y) = sampler.next_round()?;
        let table = &tables[if t { 1 + x as usize } else { 0 }];
        let u: f64 = outcome_rng.random();
        let pos = table.partition_point(|&c| c <= u).min(table.len() - 1);
        let m = if y { m_p } else { m_x };
        let b = position_to_signed_bin(pos, m);

        let score = if t {
            let (basis, signed) = raw_score(x as usize, b);
            let idx = layout.category_of(basis, signed);
            counts[idx] += 1;
            if records.is_some() {
                layout.labels()[idx].clone()
            } else {
                ScoreLabel::Bot
            }
        } else {
            ScoreLabel::Bot
        };
        pack_round(&mut raw_bits, m_max, t, x, y, b);
        if let Some(recs) = records.as_mut() {
            recs.push(RoundRecord { t, x, y, b, score });
        }
    }

    Ok(BlockResult {
        block_index,
        rounds,
        counts,
        raw_bits,
        records,
        bits_consumed: sampler.bits_consumed(),
    })
}

/// Combines block results (any order) into the run transcript and applies
/// the count test against the reference distribution `omega` with
/// tolerances `delta`.
pub fn merge_blocks(
    params: &ProtocolParams,
    deviation: DeviationModel,
    seed: u64,
    omega: &[f64],
    delta: &[f64],
    mut blocks: Vec<BlockResult>,
) -> Result<RunTranscript, CoreError> {
    let layout = params.layout();
    blocks.sort_by_key(|b| b.block_index);
    for (i, block) in blocks.iter().enumerate() {
        if block.block_index != i as u64 {
            return Err(CoreError::Params(format!(
                "block indices must cover 0..{} exactly, found {}",
                blocks.len(),
                block.block_index
            )));
        }
    }
    let total_rounds: u64 = blocks.iter().map(|b| b.rounds).sum();
    if total_rounds as f64 != params.n_rounds {
        return Err(CoreError::Params(format!(
            "blocks cover {total_rounds} rounds, parameters say {}",
            params.n_rounds
        )));
    }

    let mut counts = vec![0u64; layout.len()];
    let mut raw_bits = Bits::new();
    let mut records = blocks
        .iter()
        .all(|b| b.records.is_some())
        .then(|| Vec::with_capacity(total_rounds as usize));
    let mut bits_consumed = 0u64;
    for block in &blocks {
        for (acc, &c) in counts.iter_mut().zip(&block.counts) {
            *acc += c;
        }
        raw_bits.extend(&block.raw_bits);
        if let (Some(all), Some(part)) = (records.as_mut(), block.records.as_ref()) {
            all.extend(part.iter().cloned());
        }
        bits_consumed += block.bits_consumed;
    }

    let freq = ScoreDistribution::from_counts(&layout, &counts, params.n_rounds, params.gamma);
    let accepted = accept_test(&freq, params.n_rounds, params.gamma, omega, delta);
    Ok(RunTranscript {
        params: params.clone(),
        deviation,
        seed,
        counts,
        freq,
        accepted,
        raw_bits,
        records,
        bits_consumed,
    })
}

/// Simulates a full run sequentially. The block structure is the same one
/// a parallel driver would use, so the transcript is identical whether
/// blocks run on one thread or many.
pub fn simulate_run(
    params: &ProtocolParams,
    deviation: DeviationModel,
    seed: u64,
    omega: &[f64],
    delta: &[f64],
    options: &SimOptions,
) -> Result<RunTranscript, CoreError> {
    params.validate()?;
    deviation.validate()?;
    let layout = params.layout();
    if omega.len() != layout.len() || delta.len() != layout.len() {
        return Err(CoreError::Params(format!(
            "omega has {} and delta {} entries for {} score categories",
            omega.len(),
            delta.len(),
            layout.len()
        )));
    }
    let n = params.n_rounds as u64;
    let blocks = block_partition(n, options.block_rounds)
        .into_iter()
        .enumerate()
        .map(|(i, rounds)| {
            simulate_block(params, deviation, seed, i as u64, rounds, options.keep_records)
        })
        .collect::<Result<Vec<_>, _>>()?;
    merge_blocks(params, deviation, seed, omega, delta, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completeness::calibrate_delta;
    use crate::model::honest_score_distribution;
    use crate::rate::input_entropy;

    fn small_params(n: f64, gamma: f64) -> ProtocolParams {
        ProtocolParams { n_rounds: n, gamma, ..ProtocolParams::default() }
    }

    fn prng_source(seed: u64) -> PrngBits {
        PrngBits::new(ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn dyadic_input_distribution_costs_two_bits_per_round() {
        // At gamma = 1/2 every cumulative boundary is dyadic, so the decoder
        // spends exactly 1 bit on a generation round and 3 on a test round:
        // 2 per round on average, plus the 32 register priming bits.
        let n = 1_000_000u64;
        let (_, consumed) = sample_inputs(n, 0.5, prng_source(7)).unwrap();
        let per_round = consumed as f64 / n as f64;
        assert!(
            (per_round - 2.0).abs() < 0.01,
            "dyadic case should cost 2 bits per round, got {per_round}"
        );
    }

    #[test]
    fn seed_consumption_tracks_the_input_entropy() {
        // Mean over independent streams; a single stream fluctuates by a few
        // parts in a thousand. The decoder may overshoot the entropy by the
        // register priming plus rounding, covered by the upper margin.
        let n = 100_000u64;
        let gamma = 0.12;
        let seeds = 20;
        let mut total = 0u64;
        for seed in 0..seeds {
            let (_, consumed) = sample_inputs(n, gamma, prng_source(seed)).unwrap();
            total += consumed;
        }
        let mean = total as f64 / (seeds * n) as f64;
        let h = input_entropy(gamma);
        assert!(
            mean >= h - 0.006 && mean <= h + 3.0 / n as f64 + 0.01,
            "per-round seed cost {mean} strays from the input entropy {h}"
        );
    }

    #[test]
    fn input_frequencies_match_the_design() {
        let n = 100_000u64;
        let gamma = 0.12;
        let (rounds, _) = sample_inputs(n, gamma, prng_source(3)).unwrap();
        let tests = rounds.iter().filter(|r| r.0).count() as f64;
        let sigma_t = (n as f64 * gamma * (1.0 - gamma)).sqrt();
        assert!(
            (tests - n as f64 * gamma).abs() <= 5.0 * sigma_t,
            "test fraction {} vs gamma {gamma}",
            tests / n as f64
        );
        for x in 0..4u8 {
            let count = rounds.iter().filter(|r| r.0 && r.1 == x).count() as f64;
            let sigma = (tests * 0.25 * 0.75).sqrt();
            assert!(
                (count - tests * 0.25).abs() <= 5.0 * sigma,
                "setting {x} drawn {count} times out of {tests} tests"
            );
        }
        for &(t, x, y) in &rounds {
            if t {
                assert_eq!(y, expected_y(x as usize));
            } else {
                assert_eq!((x, y), (0, true));
            }
        }
    }

    #[test]
    fn exhausted_seed_string_is_an_error() {
        let short = Bits::zeros(40);
        let err = sample_inputs(100, 0.5, BitsSource::new(&short)).unwrap_err();
        assert!(matches!(err, CoreError::Exhausted(_)), "got {err:?}");
    }

    #[test]
    fn decoder_inverts_known_dyadic_stream() {
        // gamma = 1/2 table boundaries are exact powers of two, so symbol
        // identities follow directly from the leading bits: a leading 0 is a
        // generation round, a leading 1 selects a test setting from the next
        // two bits.
        let mut bools = vec![false, true, false, false, true, true, true, true, false, true];
        bools.extend(std::iter::repeat(false).take(64));
        let bits = Bits::from_bools(&bools);
        let mut sampler = InputSampler::new(0.5, BitsSource::new(&bits)).unwrap();
        let expected = [
            (false, 0, true),
            (true, 0, false),
            (true, 3, true),
            (true, 1, false),
            (false, 0, true),
        ];
        for want in expected {
            assert_eq!(sampler.next_round().unwrap(), want);
        }
    }

    #[test]
    fn packed_round_layout_is_frozen() {
        let mut bits = Bits::new();
        pack_round(&mut bits, 3, false, 0, true, 1);
        // Fields: bin position 011, t 0, x 00, y 1.
        let expected = Bits::from_bools(&[false, true, true, false, false, false, true]);
        assert_eq!(bits, expected);
        assert_eq!(round_width(3), 7);
        assert_eq!(bin_field_width(1), 1);
        assert_eq!(bin_field_width(2), 2);
        assert_eq!(bin_field_width(3), 3);
        assert_eq!(bin_field_width(4), 3);
    }

    #[test]
    fn packing_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &m_max in &[1usize, 3, 5] {
            let mut rounds = Vec::new();
            let mut bits = Bits::new();
            for _ in 0..200 {
                let t: bool = rng.random();
                let x: u8 = if t { rng.random_range(0..4) } else { 0 };
                let y = if t { expected_y(x as usize) } else { true };
                let mag = rng.random_range(1..=m_max as i32);
                let b = if rng.random() { mag } else { -mag };
                pack_round(&mut bits, m_max, t, x, y, b);
                rounds.push((t, x, y, b));
            }
            assert_eq!(unpack_rounds(&bits, m_max).unwrap(), rounds);
        }
    }

    #[test]
    fn unpack_rejects_malformed_strings() {
        let bits = Bits::zeros(10);
        assert!(unpack_rounds(&bits, 3).is_err(), "length not a round multiple");
        // Bin code 7 exceeds the six valid positions of m_max = 3.
        let mut bits = Bits::new();
        push_field(&mut bits, 0b111_0_00_1, 7);
        assert!(unpack_rounds(&bits, 3).is_err(), "bin code out of range");
    }

    #[test]
    fn runs_are_reproducible_and_block_structure_is_fixed() {
        let params = small_params(5_000.0, 0.12);
        let omega = honest_score_distribution(&params);
        let delta = vec![0.05; omega.len()];
        let opts = SimOptions { keep_records: false, block_rounds: 1_000 };
        let a = simulate_run(&params, DeviationModel::Honest, 9, &omega, &delta, &opts).unwrap();
        let b = simulate_run(&params, DeviationModel::Honest, 9, &omega, &delta, &opts).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.raw_bits, b.raw_bits);
        assert_eq!(a.bits_consumed, b.bits_consumed);
        assert_eq!(a.accepted, b.accepted);

        let c = simulate_run(&params, DeviationModel::Honest, 10, &omega, &delta, &opts).unwrap();
        assert_ne!(a.raw_bits, c.raw_bits, "different seeds must differ");

        let with_records =
            SimOptions { keep_records: true, block_rounds: 1_000 };
        let d =
            simulate_run(&params, DeviationModel::Honest, 9, &omega, &delta, &with_records)
                .unwrap();
        assert_eq!(a.counts, d.counts);
        assert_eq!(a.raw_bits, d.raw_bits);
        let records = d.records.unwrap();
        assert_eq!(records.len(), 5_000);
        for r in &records {
            if r.t {
                assert_eq!(r.y, expected_y(r.x as usize));
                assert_ne!(r.score, ScoreLabel::Bot);
            } else {
                assert_eq!((r.x, r.y), (0, true));
                assert_eq!(r.score, ScoreLabel::Bot);
            }
            assert!(r.b != 0 && r.b.unsigned_abs() as usize <= 3);
        }
        assert_eq!(d.raw_bits.len(), 5_000 * round_width(3));
    }

    #[test]
    fn merge_rejects_gaps_and_wrong_totals() {
        let params = small_params(2_000.0, 0.12);
        let omega = honest_score_distribution(&params);
        let delta = vec![0.05; omega.len()];
        let b0 = simulate_block(&params, DeviationModel::Honest, 1, 0, 1_000, false).unwrap();
        let b2 = simulate_block(&params, DeviationModel::Honest, 1, 2, 1_000, false).unwrap();
        let err =
            merge_blocks(&params, DeviationModel::Honest, 1, &omega, &delta, vec![b0.clone(), b2])
                .unwrap_err();
        assert!(matches!(err, CoreError::Params(_)));
        let err = merge_blocks(&params, DeviationModel::Honest, 1, &omega, &delta, vec![b0])
            .unwrap_err();
        assert!(matches!(err, CoreError::Params(_)));
    }

    #[test]
    fn honest_scores_follow_the_model_distribution() {
        let params = small_params(1_000_000.0, 0.12);
        let omega = honest_score_distribution(&params);
        let delta =
            calibrate_delta(params.n_rounds, params.gamma, &omega, 1e-3, params.delta_allocation)
                .unwrap();
        let t = simulate_run(
            &params,
            DeviationModel::Honest,
            42,
            &omega,
            &delta,
            &SimOptions { keep_records: false, block_rounds: 250_000 },
        )
        .unwrap();
        assert!(t.accepted, "honest run rejected: {:?}", t.freq);
        let n_gamma = params.n_rounds * params.gamma;
        for (i, (&count, &w)) in t.counts.iter().zip(&omega).enumerate() {
            let p = params.gamma * w;
            let sigma = (params.n_rounds * p * (1.0 - p)).sqrt();
            assert!(
                (count as f64 - n_gamma * w).abs() <= 5.0 * sigma,
                "category {i}: count {count} vs expected {}",
                n_gamma * w
            );
        }
        let total: u64 = t.counts.iter().sum();
        let sigma_t = (params.n_rounds * params.gamma * (1.0 - params.gamma)).sqrt();
        assert!((total as f64 - n_gamma).abs() <= 5.0 * sigma_t);
        assert_eq!(t.raw_bits.len(), 1_000_000 * round_width(3));
    }

    #[test]
    fn deviation_distributions_are_normalized() {
        let params = ProtocolParams::default();
        let deviations = [
            DeviationModel::Honest,
            DeviationModel::EfficiencyShift(-0.2),
            DeviationModel::EfficiencyShift(0.4),
            DeviationModel::AmplitudeShift(0.05),
            DeviationModel::PhaseMisalignment(0.3),
            DeviationModel::FixedOutcome(2),
            DeviationModel::FixedOutcome(-7),
        ];
        for dev in deviations {
            for x in 0..4 {
                for y in [false, true] {
                    let probs = deviated_probabilities(&params, dev, x, y);
                    assert_eq!(probs.len(), if y { params.bins_p } else { params.bins_x });
                    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(probs.iter().all(|&p| p >= 0.0));
                }
            }
            let dist = deviated_score_distribution(&params, dev);
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            deviated_score_distribution(&params, DeviationModel::Honest),
            honest_score_distribution(&params)
        );
        assert!(DeviationModel::FixedOutcome(0).validate().is_err());
        assert!(DeviationModel::AmplitudeShift(f64::NAN).validate().is_err());
    }

    #[test]
    fn stuck_detector_fails_the_count_test() {
        let params = small_params(100_000.0, 0.12);
        let omega = honest_score_distribution(&params);
        let delta =
            calibrate_delta(params.n_rounds, params.gamma, &omega, 1e-3, params.delta_allocation)
                .unwrap();
        let t = simulate_run(
            &params,
            DeviationModel::FixedOutcome(1),
            11,
            &omega,
            &delta,
            &SimOptions::default(),
        )
        .unwrap();
        assert!(!t.accepted, "stuck detector must be rejected");
    }

    #[test]
    fn amplitude_drift_fails_while_honest_passes() {
        let params = small_params(1_000_000.0, 0.12);
        let omega = honest_score_distribution(&params);
        let delta =
            calibrate_delta(params.n_rounds, params.gamma, &omega, 1e-3, params.delta_allocation)
                .unwrap();
        let deviation = DeviationModel::AmplitudeShift(0.08);

        // The drifted distribution must overshoot some tolerance by a wide
        // statistical margin, otherwise this test would hinge on luck.
        let drifted = deviated_score_distribution(&params, deviation);
        let n_gamma = params.n_rounds * params.gamma;
        let overshoot = drifted
            .iter()
            .zip(omega.iter().zip(&delta))
            .map(|(&d, (&w, &dl))| {
                let sigma_f = (d * (1.0 - d) / n_gamma).sqrt();
                (d - (w + dl)) / sigma_f
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(overshoot > 5.0, "deviation too weak to detect: {overshoot} sigma");

        let opts = SimOptions { keep_records: false, block_rounds: 250_000 };
        let honest =
            simulate_run(&params, DeviationModel::Honest, 21, &omega, &delta, &opts).unwrap();
        let drifted_run = simulate_run(&params, deviation, 21, &omega, &delta, &opts).unwrap();
        assert!(honest.accepted);
        assert!(!drifted_run.accepted);
    }

    #[test]
    fn serialized_deviation_forms_are_stable() {
        let json = serde_json::to_string(&DeviationModel::EfficiencyShift(-0.1)).unwrap();
        assert_eq!(json, r#"{"efficiency_shift":-0.1}"#);
        let back: DeviationModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, DeviationModel::EfficiencyShift(-0.1));
        let honest: DeviationModel = serde_json::from_str(r#""honest""#).unwrap();
        assert_eq!(honest, DeviationModel::Honest);
    }
}
