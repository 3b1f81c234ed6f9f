use thiserror::Error;

/// Errors raised by the laboratory's numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("modulus {0} is not an odd prime in [3, 2^61)")]
    NotPrime(u64),

    #[error("residue {residue} has no inverse modulo {modulus}")]
    InvalidResidue { residue: u64, modulus: u64 },

    #[error("bit index {r} out of range for p = {modulus} (need 1 <= r and 2^(r-1) < p)")]
    BitOutOfRange { r: u32, modulus: u64 },

    #[error("closed form has a pole at frequency 0")]
    ZeroFrequency,

    #[error("target convention violated: {0}")]
    ConventionViolation(String),

    #[error("hypothesis not satisfied: {0}")]
    HypothesisViolation(String),

    #[error("size limit exceeded: {what} = {got} > {limit}")]
    SizeLimit {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
