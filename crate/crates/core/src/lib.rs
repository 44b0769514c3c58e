//! Measurement-device-independent randomness expansion, end to end.
//!
//! The pipeline this crate implements:
//!
//! 1. **Source model** ([`model`]): four phase-modulated coherent states
//!    measured by an untrusted homodyne detector whose outcomes are binned
//!    into score categories. Produces the honest score distribution and the
//!    Gram matrix of the states, the only physical data the security
//!    analysis consumes.
//! 2. **Test calibration** ([`completeness`]): per-category tolerances
//!    sized so an honest device passes the protocol's count test with the
//!    requested completeness error.
//! 3. **Guessing-probability bound** ([`moment`]): a moment-matrix
//!    relaxation of the adversary's optimization, solved with [`qrx_sdp`],
//!    yielding an affine certificate `P_guess <= alpha + lambda . omega`
//!    valid for every score vector.
//! 4. **Entropy accounting** ([`rate`]): the certificate's min-tradeoff
//!    affine bound fed through entropy accumulation, giving extractable bits
//!    and the net expansion rate after subtracting the input entropy.
//! 5. **Protocol run** ([`sim`]): block-parallel simulation of honest and
//!    deviating devices, producing the packed raw transcript.
//! 6. **Extraction** ([`extract`]): Toeplitz two-universal hashing of the
//!    raw transcript into the final output.
//!
//! [`oracle`] holds independent cross-checks (explicit finite-dimensional
//! measurement strategies) used by the test suites, and [`fixtures`] the
//! serialization of parameter sets shipped with the repository.

pub mod bits;
pub mod completeness;
pub mod device;
pub mod error;
pub mod extract;
pub mod fixtures;
pub mod model;
pub mod moment;
pub mod oracle;
pub mod params;
pub mod rate;
pub mod scores;
pub mod sim;

pub use error::CoreError;
pub use params::ProtocolParams;
