//! Arithmetic in the prime field Z_p and binary-digit helpers.
//!
//! Residues are plain `u64` values in `0..p`; the field only carries the
//! modulus. Products go through a 128-bit intermediate so every modulus
//! below 2^61 is handled without overflow.

use crate::error::{Error, Result};

/// Largest accepted modulus (exclusive).
pub const MAX_MODULUS: u64 = 1 << 61;

/// The ring Z_p for an odd prime p.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PrimeField {
    p: u64,
}

impl PrimeField {
    pub fn new(p: u64) -> Result<Self> {
        if !(3..MAX_MODULUS).contains(&p) || !is_prime(p) {
            return Err(Error::NotPrime(p));
        }
        Ok(Self { p })
    }

    #[inline]
    pub fn modulus(&self) -> u64 {
        self.p
    }

    /// `p` as a `usize`, for table lengths.
    #[inline]
    pub fn size(&self) -> usize {
        self.p as usize
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        mul_mod(*self, a, b)
    }

    pub fn inv(&self, a: u64) -> Result<u64> {
        inv_mod(*self, a)
    }

    /// Number of binary digits of p, i.e. the largest valid bit index.
    pub fn bit_length(&self) -> u32 {
        64 - self.p.leading_zeros()
    }

    pub fn bit_index(&self, r: u32) -> Result<BitIndex> {
        BitIndex::new(*self, r)
    }

    /// All valid bit indices `1..=bit_length`.
    pub fn bit_indices(&self) -> impl Iterator<Item = BitIndex> + '_ {
        (1..=self.bit_length()).map(BitIndex)
    }
}

/// 1-based binary digit position, counted from the least-significant end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitIndex(u32);

impl BitIndex {
    /// Validates `1 <= r` and `2^(r-1) < p`.
    pub fn new(field: PrimeField, r: u32) -> Result<Self> {
        let out = Error::BitOutOfRange {
            r,
            modulus: field.modulus(),
        };
        if r == 0 || r > 62 {
            return Err(out);
        }
        if (1u64 << (r - 1)) >= field.modulus() {
            return Err(out);
        }
        Ok(Self(r))
    }

    #[inline]
    pub fn get(self) -> u32 {
        self.0
    }

    /// 2^(r-1).
    #[inline]
    pub fn weight(self) -> u64 {
        1u64 << (self.0 - 1)
    }
}

#[inline]
pub fn mul_mod(field: PrimeField, a: u64, b: u64) -> u64 {
    debug_assert!(a < field.p && b < field.p);
    ((a as u128 * b as u128) % field.p as u128) as u64
}

/// Multiplicative inverse via the extended Euclidean algorithm.
pub fn inv_mod(field: PrimeField, a: u64) -> Result<u64> {
    let p = field.p;
    if a == 0 || a >= p {
        return Err(Error::InvalidResidue {
            residue: a,
            modulus: p,
        });
    }
    let (mut old_r, mut r) = (a as i128, p as i128);
    let (mut old_s, mut s) = (1i128, 0i128);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
    }
    debug_assert_eq!(old_r, 1);
    Ok(old_s.rem_euclid(p as i128) as u64)
}

/// The r-th least-significant binary digit of `x`.
#[inline]
pub fn bit_r(x: u64, r: BitIndex) -> u64 {
    (x >> (r.0 - 1)) & 1
}

/// `p mod 2^(r-1)`: the number formed by the last r-1 binary digits of p.
#[inline]
pub fn p_tail(field: PrimeField, r: BitIndex) -> u64 {
    field.p & (r.weight() - 1)
}

/// `inv[x] = x⁻¹ mod p` for `x ∈ 1..p`, with `inv[0] = 0`. O(p).
pub fn inverse_table(field: PrimeField) -> Vec<u64> {
    let p = field.p;
    let mut inv = vec![0u64; p as usize];
    inv[1] = 1;
    // inv[i] = -(p / i) · inv[p mod i]
    for i in 2..p {
        inv[i as usize] = (p - (p / i) * inv[(p % i) as usize] % p) % p;
    }
    inv
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = ((acc as u128 * base as u128) % m as u128) as u64;
        }
        base = ((base as u128 * base as u128) % m as u128) as u64;
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin, exact for every `n < 2^64`.
pub fn is_prime(n: u64) -> bool {
    const WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &w in &WITNESSES {
        if n.is_multiple_of(w) {
            return n == w;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &WITNESSES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = ((x as u128 * x as u128) % n as u128) as u64;
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// All primes in `[lo, hi]`, ascending.
pub fn primes_in_range(lo: u64, hi: u64) -> Vec<u64> {
    if hi < lo || hi < 2 {
        return Vec::new();
    }
    let lo = lo.max(2);
    // Segmented sieve would be overkill for the ranges used here.
    if hi <= 50_000_000 {
        let n = hi as usize;
        let mut composite = vec![false; n + 1];
        let mut i = 2;
        while i * i <= n {
            if !composite[i] {
                let mut j = i * i;
                while j <= n {
                    composite[j] = true;
                    j += i;
                }
            }
            i += 1;
        }
        (lo as usize..=n)
            .filter(|&k| !composite[k])
            .map(|k| k as u64)
            .collect()
    } else {
        (lo..=hi).filter(|&k| is_prime(k)).collect()
    }
}
