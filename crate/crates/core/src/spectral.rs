//! Target tables on Z_p and their discrete Fourier transforms.
//!
//! The transform follows the convention `t̂(y) = Σ_x ω^{-yx} t(x)` with
//! `ω = e^{2πi/p}`. Every built-in table has `t(0) = 0`.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::modcore::{bit_r, p_tail, BitIndex, PrimeField};
use crate::numeric::{ksum, KahanSum};

/// Which function a [`TargetTable`] holds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetKind {
    /// `x - p/2` on Z_p^*.
    RawMul,
    /// `(-1)^{[x]_r}` on Z_p^*.
    BitR(BitIndex),
    /// `(x - p/2) / sqrt(p²/12 - p/6)` on Z_p^*.
    Standardized,
    /// `(-1)^{[x]_r} + c_r`, mean zero on Z_p^*.
    CenteredBitR(BitIndex),
    Custom,
}

/// Kind selector without the bit index, for parsing user input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindName {
    RawMul,
    BitR,
    Standardized,
    CenteredBitR,
}

impl std::str::FromStr for KindName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "rawmul" | "raw" => Ok(Self::RawMul),
            "bitr" | "bit" => Ok(Self::BitR),
            "standardized" | "std" => Ok(Self::Standardized),
            "centeredbitr" | "centered" => Ok(Self::CenteredBitR),
            other => Err(Error::Config(format!("unknown target kind `{other}`"))),
        }
    }
}

/// A real function on Z_p stored as `values[x] = t(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetTable {
    pub field: PrimeField,
    pub values: Vec<f64>,
    pub kind: TargetKind,
}

/// `Σ_{x ∈ Z_p^*} (-1)^{[x]_r}` in closed form.
pub fn bit_sum_closed_form(field: PrimeField, r: BitIndex) -> i64 {
    let p = field.modulus();
    let top = bit_r(p, r) as i64;
    let sign = if top == 1 { -1 } else { 1 };
    -1 + sign * p_tail(field, r) as i64 + (r.weight() as i64) * top
}

/// Mean of `t_r` over Z_p^*.
pub fn bit_mean(field: PrimeField, r: BitIndex) -> f64 {
    bit_sum_closed_form(field, r) as f64 / (field.modulus() - 1) as f64
}

/// The shift `c_r` that centers `t_r` on Z_p^*.
pub fn centering_constant(field: PrimeField, r: BitIndex) -> f64 {
    -bit_mean(field, r)
}

/// Standard deviation of `x ↦ x` under the uniform law on Z_p^*.
pub fn multiplication_std(field: PrimeField) -> f64 {
    let p = field.modulus() as f64;
    (p * p / 12.0 - p / 6.0).sqrt()
}

impl TargetTable {
    pub fn new(field: PrimeField, kind: TargetKind) -> Self {
        let p = field.modulus();
        let half = p as f64 / 2.0;
        let value = |x: u64| -> f64 {
            match kind {
                TargetKind::RawMul => x as f64 - half,
                TargetKind::Standardized => (x as f64 - half) / multiplication_std(field),
                TargetKind::BitR(r) => bit_sign(x, r),
                TargetKind::CenteredBitR(r) => bit_sign(x, r) + centering_constant(field, r),
                TargetKind::Custom => 0.0,
            }
        };
        let mut values: Vec<f64> = (0..p).map(value).collect();
        values[0] = 0.0;
        Self {
            field,
            values,
            kind,
        }
    }

    /// A user-supplied table. `values[0]` is kept as given.
    pub fn custom(field: PrimeField, values: Vec<f64>) -> Result<Self> {
        if values.len() != field.size() {
            return Err(Error::Validation(format!(
                "table length {} does not match p = {}",
                values.len(),
                field.modulus()
            )));
        }
        Ok(Self {
            field,
            values,
            kind: TargetKind::Custom,
        })
    }

    /// The identity table `t(x) = x` on all of Z_p.
    pub fn linear(field: PrimeField) -> Self {
        Self {
            field,
            values: (0..field.modulus()).map(|x| x as f64).collect(),
            kind: TargetKind::Custom,
        }
    }

    /// Mean over Z_p^*.
    pub fn mean_nonzero(&self) -> f64 {
        ksum(self.values[1..].iter().copied()) / (self.values.len() - 1) as f64
    }

    /// `Σ_{x ∈ Z_p^*} t(x)²`.
    pub fn sum_sq_nonzero(&self) -> f64 {
        ksum(self.values[1..].iter().map(|v| v * v))
    }

    /// `t - c·[x ≠ 0]`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut values = self.values.clone();
        for v in values.iter_mut().skip(1) {
            *v -= c;
        }
        Self {
            field: self.field,
            values,
            kind: TargetKind::Custom,
        }
    }
}

#[inline]
fn bit_sign(x: u64, r: BitIndex) -> f64 {
    if bit_r(x, r) == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Build a table from a kind name and an optional bit index.
pub fn make_target(field: PrimeField, kind: KindName, r: Option<u32>) -> Result<TargetTable> {
    let bit = |r: Option<u32>| -> Result<BitIndex> {
        let r = r.ok_or_else(|| Error::Config("bit kinds need a bit index r".into()))?;
        BitIndex::new(field, r)
    };
    let kind = match kind {
        KindName::RawMul | KindName::Standardized if r.is_some() => {
            return Err(Error::Config(format!("{kind:?} takes no bit index")));
        }
        KindName::RawMul => TargetKind::RawMul,
        KindName::Standardized => TargetKind::Standardized,
        KindName::BitR => TargetKind::BitR(bit(r)?),
        KindName::CenteredBitR => TargetKind::CenteredBitR(bit(r)?),
    };
    Ok(TargetTable::new(field, kind))
}

/// Precomputed `ω^{-k} = e^{-2πik/p}` for `k ∈ 0..p`.
#[derive(Clone, Debug)]
pub struct Twiddles {
    table: Vec<Complex64>,
}

impl Twiddles {
    pub fn new(field: PrimeField) -> Self {
        let p = field.modulus();
        let table = (0..p)
            .map(|k| {
                let theta = -2.0 * PI * k as f64 / p as f64;
                Complex64::new(theta.cos(), theta.sin())
            })
            .collect();
        Self { table }
    }

    /// `ω^{-k}` for any integer exponent, reduced mod p first.
    #[inline]
    pub fn neg_pow(&self, k: i64) -> Complex64 {
        let p = self.table.len() as i64;
        self.table[k.rem_euclid(p) as usize]
    }
}

/// Complex DFT coefficients `coeffs[y] = t̂(y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub field: PrimeField,
    pub coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "re", "im", "abs"])?;
        for (i, c) in self.coeffs.iter().enumerate() {
            w.write_record([
                i.to_string(),
                c.re.to_string(),
                c.im.to_string(),
                c.norm().to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Naive O(p²) transform of an arbitrary length-p vector.
pub fn dft_values(field: PrimeField, values: &[f64]) -> Vec<Complex64> {
    let p = field.size();
    assert_eq!(values.len(), p);
    let tw = Twiddles::new(field);
    (0..p)
        .into_par_iter()
        .map(|y| {
            let mut re = KahanSum::new();
            let mut im = KahanSum::new();
            let mut idx = 0usize; // y·x mod p
            for &v in values {
                let w = tw.table[idx];
                re.add(w.re * v);
                im.add(w.im * v);
                idx += y;
                if idx >= p {
                    idx -= p;
                }
            }
            Complex64::new(re.value(), im.value())
        })
        .collect()
}

pub fn dft_naive(table: &TargetTable) -> Spectrum {
    Spectrum {
        field: table.field,
        coeffs: dft_values(table.field, &table.values),
    }
}

/// Closed form of `t̂_r(i)` for the bit table `t_r`.
pub fn dft_bit_closed_form(field: PrimeField, r: BitIndex, i: u64) -> Complex64 {
    let p = field.modulus() as i64;
    let top = bit_r(field.modulus(), r) as i64;
    let sign = if top == 1 { -1.0 } else { 1.0 };
    let tail = p_tail(field, r) as i64;
    let i = (i as i64).rem_euclid(p);
    if i == 0 {
        return Complex64::new(bit_sum_closed_form(field, r) as f64, 0.0);
    }
    let tw = Twiddles::new(field);
    let one = Complex64::new(1.0, 0.0);
    let w_i = tw.neg_pow(i);
    let w_block = tw.neg_pow(r.weight() as i64 * i);
    let w_head = tw.neg_pow((p - tail) * i);
    let w_full = tw.neg_pow(p * i);
    let blocks = (one - sign * w_head) / (one + w_block) * ((one - w_block) / (one - w_i));
    let tail_part = sign * (w_head - w_full) / (one - w_i);
    -one + blocks + tail_part
}

/// Closed form of the DFT of `t(x) = x` at a nonzero frequency.
///
/// With `w = ω^{-i}` and `w^p = 1`, `Σ_{x<p} x w^x = -p / (1 - w)`; the
/// `w/(1-w)²` term of the derivative expansion cancels against the boundary.
pub fn dft_linear_closed_form(field: PrimeField, i: u64) -> Result<Complex64> {
    let p = field.modulus();
    if i.is_multiple_of(p) {
        return Err(Error::ZeroFrequency);
    }
    let w = Twiddles::new(field).neg_pow((i % p) as i64);
    Ok(-(p as f64) / (Complex64::new(1.0, 0.0) - w))
}

/// Sign selector for [`harmonic_sum`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HarmonicSign {
    Plus,
    Minus,
}

/// `Σ_k 1/|1 ± ω^{rk}|`; the `k = 0` pole is skipped for the minus sign.
pub fn harmonic_sum(field: PrimeField, sign: HarmonicSign, r: u64) -> f64 {
    let p = field.modulus();
    let r = r % p;
    assert!(r != 0, "r must lie in Z_p^*");
    let start = match sign {
        HarmonicSign::Plus => 0,
        HarmonicSign::Minus => 1,
    };
    let s = match sign {
        HarmonicSign::Plus => 1.0,
        HarmonicSign::Minus => -1.0,
    };
    let mut acc = KahanSum::new();
    let mut m = (start * r) % p;
    for _ in start..p {
        let theta = 2.0 * PI * m as f64 / p as f64;
        let (sn, cs) = theta.sin_cos();
        acc.add(1.0 / (1.0 + s * cs).hypot(s * sn));
        m += r;
        if m >= p {
            m -= p;
        }
    }
    acc.value()
}

/// `Σ |t̂(i)|` over Z_p^* (or all of Z_p).
pub fn spectral_l1(spectrum: &Spectrum, exclude_zero: bool) -> f64 {
    let skip = usize::from(exclude_zero);
    ksum(spectrum.coeffs.iter().skip(skip).map(|c| c.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modcore::primes_in_range;
    use proptest::prelude::*;

    fn field(p: u64) -> PrimeField {
        PrimeField::new(p).unwrap()
    }

    /// Direct complex sum with no twiddle table, used as an independent oracle.
    fn brute_dft(values: &[f64], y: usize) -> Complex64 {
        let p = values.len() as f64;
        values
            .iter()
            .enumerate()
            .map(|(x, v)| Complex64::from_polar(*v, -2.0 * PI * ((x * y) as f64) / p))
            .sum()
    }

    #[test]
    fn make_target_examples() {
        let f5 = field(5);
        let t = make_target(f5, KindName::BitR, Some(1)).unwrap();
        assert_eq!(t.values, vec![0.0, -1.0, 1.0, -1.0, 1.0]);
        let t = make_target(f5, KindName::RawMul, None).unwrap();
        assert_eq!(t.values, vec![0.0, -1.5, -0.5, 0.5, 1.5]);
        let t = make_target(f5, KindName::Standardized, None).unwrap();
        assert!(t.mean_nonzero().abs() < 1e-12);
    }

    #[test]
    fn make_target_rejects_bad_bits() {
        let f13 = field(13);
        assert_eq!(
            make_target(f13, KindName::BitR, Some(5)),
            Err(Error::BitOutOfRange { r: 5, modulus: 13 })
        );
        assert!(matches!(
            make_target(f13, KindName::CenteredBitR, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_target(f13, KindName::RawMul, Some(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn built_in_kind_invariants() {
        for p in primes_in_range(3, 503) {
            let f = field(p);
            let std = TargetTable::new(f, TargetKind::Standardized);
            assert_eq!(std.values[0], 0.0);
            assert!(std.mean_nonzero().abs() < 1e-12, "p={p}");
            let var = std.sum_sq_nonzero() / (p - 1) as f64;
            assert!((var - 1.0).abs() < 1e-9, "p={p} var={var}");
            for r in f.bit_indices() {
                let bit = TargetTable::new(f, TargetKind::BitR(r));
                assert_eq!(bit.values[0], 0.0);
                assert!(bit.values[1..].iter().all(|v| *v == 1.0 || *v == -1.0));
                let centered = TargetTable::new(f, TargetKind::CenteredBitR(r));
                assert!(centered.mean_nonzero().abs() < 1e-12, "p={p} r={}", r.get());
                assert_eq!(centered.values[0], 0.0);
            }
        }
    }

    #[test]
    fn bit_sum_matches_enumeration() {
        for p in primes_in_range(3, 700) {
            let f = field(p);
            for r in f.bit_indices() {
                let brute: i64 = (1..p).map(|x| 1 - 2 * bit_r(x, r) as i64).sum();
                assert_eq!(bit_sum_closed_form(f, r), brute, "p={p} r={}", r.get());
            }
        }
        // p = 13, r = 3: -1 + 4·1 + (-1)·1
        let f13 = field(13);
        assert_eq!(bit_sum_closed_form(f13, BitIndex::new(f13, 3).unwrap()), 2);
    }

    #[test]
    fn dft_naive_examples() {
        let f5 = field(5);
        let s = dft_naive(&TargetTable::new(f5, TargetKind::BitR(BitIndex::new(f5, 1).unwrap())));
        assert!(s.coeffs[0].norm() < 1e-12);
        let s = dft_naive(&TargetTable::new(f5, TargetKind::RawMul));
        assert!(s.coeffs[0].norm() < 1e-12);
        let ones = TargetTable::custom(f5, vec![1.0; 5]).unwrap();
        let s = dft_naive(&ones);
        assert!((s.coeffs[0] - Complex64::new(5.0, 0.0)).norm() < 1e-12);
        assert!(s.coeffs[1..].iter().all(|c| c.norm() < 1e-12));
    }

    #[test]
    fn dft_naive_matches_brute_oracle() {
        let f = field(31);
        let t = TargetTable::new(f, TargetKind::Standardized);
        let s = dft_naive(&t);
        for y in 0..31 {
            assert!((s.coeffs[y] - brute_dft(&t.values, y)).norm() < 1e-10);
        }
    }

    #[test]
    fn bit_closed_form_examples() {
        let f13 = field(13);
        let r3 = BitIndex::new(f13, 3).unwrap();
        let z = dft_bit_closed_form(f13, r3, 0);
        assert_eq!(z, Complex64::new(2.0, 0.0));
        let brute: f64 = (1..13).map(|x| 1.0 - 2.0 * bit_r(x, r3) as f64).sum();
        assert_eq!(z.re, brute);
        let f7 = field(7);
        assert_eq!(dft_bit_closed_form(f7, BitIndex::new(f7, 1).unwrap(), 0).re, 0.0);
    }

    #[test]
    fn bit_closed_form_matches_naive_small_primes() {
        for p in primes_in_range(3, 97) {
            let f = field(p);
            for r in f.bit_indices() {
                let t = TargetTable::new(f, TargetKind::BitR(r));
                for i in 0..p {
                    let oracle = brute_dft(&t.values, i as usize);
                    let cf = dft_bit_closed_form(f, r, i);
                    assert!((cf - oracle).norm() < 1e-9 * p as f64, "p={p} r={} i={i}", r.get());
                }
            }
        }
    }

    #[test]
    fn linear_closed_form_examples() {
        assert_eq!(dft_linear_closed_form(field(7), 0), Err(Error::ZeroFrequency));
        let f3 = field(3);
        let oracle: Complex64 = (0..3)
            .map(|x| Complex64::from_polar(x as f64, -2.0 * PI * x as f64 / 3.0))
            .sum();
        let cf = dft_linear_closed_form(f3, 1).unwrap();
        assert!((cf.norm() - oracle.norm()).abs() < 1e-12);
        assert!((cf - oracle).norm() < 1e-12);
        let f5 = field(5);
        let oracle: Complex64 = (0..5)
            .map(|x| Complex64::from_polar(x as f64, -2.0 * PI * (2 * x) as f64 / 5.0))
            .sum();
        assert!((dft_linear_closed_form(f5, 2).unwrap() - oracle).norm() < 1e-10);
    }

    #[test]
    fn harmonic_sum_examples() {
        let f3 = field(3);
        assert!((harmonic_sum(f3, HarmonicSign::Plus, 1) - 2.5).abs() < 1e-12);
        let minus = harmonic_sum(f3, HarmonicSign::Minus, 1);
        assert!((minus - 2.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn harmonic_sum_invariant_under_reindexing() {
        for p in primes_in_range(3, 101) {
            let f = field(p);
            for sign in [HarmonicSign::Plus, HarmonicSign::Minus] {
                let base = harmonic_sum(f, sign, 1);
                for r in 1..p {
                    let v = harmonic_sum(f, sign, r);
                    assert!((v - base).abs() < 1e-9 * base, "p={p} r={r}");
                }
            }
        }
    }

    #[test]
    fn spectral_l1_examples() {
        let f7 = field(7);
        let constant = Spectrum {
            field: f7,
            coeffs: std::iter::once(Complex64::new(7.0, 0.0))
                .chain(std::iter::repeat_n(Complex64::new(0.0, 0.0), 6))
                .collect(),
        };
        assert_eq!(spectral_l1(&constant, true), 0.0);
        assert_eq!(spectral_l1(&constant, false), 7.0);
        let zeros = TargetTable::custom(f7, vec![0.0; 7]).unwrap();
        assert_eq!(spectral_l1(&dft_naive(&zeros), true), 0.0);
        let f101 = field(101);
        let r1 = BitIndex::new(f101, 1).unwrap();
        let l1 = spectral_l1(&dft_naive(&TargetTable::new(f101, TargetKind::BitR(r1))), true);
        let scale = 101.0 * 1.0 * (101f64.log2() + 1.0 - 1.0);
        assert!(l1 / scale < 10.0, "ratio {}", l1 / scale);
    }

    #[test]
    fn spectrum_csv_layout() {
        let f3 = field(3);
        let s = dft_naive(&TargetTable::custom(f3, vec![1.0, 1.0, 1.0]).unwrap());
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("index,re,im,abs"));
        assert!(lines.next().unwrap().starts_with("0,3,"));
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn parseval_and_dc(idx in 0usize..60, vals in proptest::collection::vec(-5.0f64..5.0, 600)) {
            let primes = primes_in_range(3, 300);
            let f = field(primes[idx % primes.len()]);
            let values: Vec<f64> = vals[..f.size()].to_vec();
            let t = TargetTable::custom(f, values.clone()).unwrap();
            let s = dft_naive(&t);
            let lhs = ksum(s.coeffs.iter().map(|c| c.norm_sqr()));
            let rhs = f.modulus() as f64 * ksum(values.iter().map(|v| v * v));
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1e-300));
            let dc = ksum(values.iter().copied());
            prop_assert!((s.coeffs[0].re - dc).abs() < 1e-9 && s.coeffs[0].im.abs() < 1e-9);
        }
    }
}
