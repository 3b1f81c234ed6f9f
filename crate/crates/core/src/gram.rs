//! The Gram statistic `f(y) = (1/(p-1)) Σ_{x ∈ Z_p^*} t(x) t(y·x)` and the
//! quantities built from it.
//!
//! Inner products between the shifted hypotheses `h_a(x) = t(a·x)` come in
//! two scalings. `bb_quantity` uses the unnormalized `⟨u, v⟩ = Σ_x u(x)v(x)`;
//! [`GramReport::bb_normalized`] uses `E_X[u(X)v(X)]` over Z_p^*, which is the
//! scaling the SQ-dimension bound consumes. They differ by `(p-1)²`.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::modcore::{inverse_table, BitIndex, PrimeField};
use crate::numeric::{ksum, KahanSum};
use crate::spectral::{
    centering_constant, dft_values, multiplication_std, spectral_l1, Spectrum, TargetKind,
    TargetTable,
};

/// Moments and bounds of the Gram statistic of one target table.
#[derive(Clone, Debug)]
pub struct GramReport {
    pub field: PrimeField,
    /// `f_values[y - 1] = f(y)` for `y ∈ 1..p`.
    pub f_values: Vec<f64>,
    pub mean_f: f64,
    /// `E_Y[f(Y)²]` from the `f` values.
    pub second_moment_f: f64,
    /// `E_Y[f(Y)²]` from the multiplicative convolution of `t̂` with `t`.
    pub second_moment_spectral: f64,
    /// `Σ_{a ≠ b} ⟨h_a, h_b⟩²` with unnormalized inner products.
    pub bb_quantity: f64,
    /// Young-convolution bound on `E[f²]`; present when `t` has mean zero.
    pub theorem_a_bound: Option<f64>,
}

impl GramReport {
    /// `f(y)` for `y ∈ Z_p^*`.
    pub fn f(&self, y: u64) -> f64 {
        self.f_values[(y - 1) as usize]
    }

    /// `Σ_{a ≠ b} E_X[h_a(X) h_b(X)]²` over the uniform law on Z_p^*.
    pub fn bb_normalized(&self) -> f64 {
        let n = (self.field.modulus() - 1) as f64;
        self.bb_quantity / (n * n)
    }

    /// Relative gap between the direct and spectral second moments.
    pub fn moment_gap(&self) -> f64 {
        let a = self.second_moment_f;
        let b = self.second_moment_spectral;
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["y", "f_value"])?;
        for (i, v) in self.f_values.iter().enumerate() {
            w.write_record([(i + 1).to_string(), v.to_string()])?;
        }
        w.flush()
    }

    /// Summary block for the sidecar file.
    pub fn write_summary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let bound = match self.theorem_a_bound {
            Some(b) => b.to_string(),
            None => "null".to_string(),
        };
        writeln!(out, "{{")?;
        writeln!(out, "  \"p\": {},", self.field.modulus())?;
        writeln!(out, "  \"mean_f\": {},", self.mean_f)?;
        writeln!(out, "  \"second_moment_f\": {},", self.second_moment_f)?;
        writeln!(
            out,
            "  \"second_moment_spectral\": {},",
            self.second_moment_spectral
        )?;
        writeln!(out, "  \"bb_quantity\": {},", self.bb_quantity)?;
        writeln!(out, "  \"bb_normalized\": {},", self.bb_normalized())?;
        writeln!(out, "  \"theorem_a_bound\": {bound}")?;
        writeln!(out, "}}")
    }
}

/// `f(y)` for every `y ∈ Z_p^*`, O(p²).
pub fn gram_values(table: &TargetTable) -> Vec<f64> {
    let p = table.field.size();
    let t = &table.values;
    let norm = (p - 1) as f64;
    (1..p)
        .into_par_iter()
        .map(|y| {
            let mut acc = KahanSum::new();
            let mut idx = y; // y·x mod p at x = 1
            for &tx in &t[1..] {
                acc.add(tx * t[idx]);
                idx += y;
                if idx >= p {
                    idx -= p;
                }
            }
            acc.value() / norm
        })
        .collect()
}

/// `‖Φt‖²` through the transform: `(1/p)(t̂(0)⁴ + Σ_{a≠0} |Σ_{s≠0} t̂(a/s) t(s)|²)`.
///
/// Requires `t(0) = 0`; the `t̂(0)⁴` term vanishes when `t` sums to zero.
pub fn phi_t_norm_sq_spectral(table: &TargetTable, spectrum: &Spectrum) -> f64 {
    let field = table.field;
    let p = field.modulus();
    let inv = inverse_table(field);
    let t = &table.values;
    let th = &spectrum.coeffs;
    let rows: Vec<f64> = (1..p)
        .into_par_iter()
        .map(|a| {
            let mut re = KahanSum::new();
            let mut im = KahanSum::new();
            for s in 1..p {
                let k = ((a as u128 * inv[s as usize] as u128) % p as u128) as usize;
                let c: Complex64 = th[k] * t[s as usize];
                re.add(c.re);
                im.add(c.im);
            }
            Complex64::new(re.value(), im.value()).norm_sqr()
        })
        .collect();
    let dc = th[0].norm_sqr();
    (dc * dc + ksum(rows)) / p as f64
}

/// The shift `c` for which `t - c·[x ≠ 0]` is the natural first part of `t`.
pub fn natural_split_constant(table: &TargetTable) -> f64 {
    let p = table.field.modulus() as f64;
    match table.kind {
        TargetKind::RawMul => -p / 2.0,
        TargetKind::Standardized => -p / 2.0 / multiplication_std(table.field),
        TargetKind::CenteredBitR(r) => centering_constant(table.field, r),
        TargetKind::BitR(_) | TargetKind::Custom => 0.0,
    }
}

fn check_zero_at_origin(table: &TargetTable) -> Result<()> {
    if table.values[0] != 0.0 {
        return Err(Error::ConventionViolation(format!(
            "t(0) = {} but the Gram statistic assumes t(0) = 0",
            table.values[0]
        )));
    }
    Ok(())
}

fn has_zero_mean(table: &TargetTable) -> bool {
    let sum = ksum(table.values[1..].iter().copied());
    let scale = ksum(table.values[1..].iter().map(|v| v.abs())).max(1.0);
    sum.abs() <= 1e-9 * scale
}

/// Gram statistic, both second-moment routes, BB quantity and (when `t` has
/// mean zero) the Young-convolution bound with the natural split.
pub fn gram_f(table: &TargetTable) -> Result<GramReport> {
    check_zero_at_origin(table)?;
    let field = table.field;
    let n = (field.modulus() - 1) as f64;
    let f_values = gram_values(table);
    let mean_f = ksum(f_values.iter().copied()) / n;
    let second_moment_f = ksum(f_values.iter().map(|v| v * v)) / n;

    let spectrum = Spectrum {
        field,
        coeffs: dft_values(field, &table.values),
    };
    let second_moment_spectral = phi_t_norm_sq_spectral(table, &spectrum) / (n * n * n);

    // (p-1) rows a, each contributing Σ_{b ≠ a} ((p-1) f(b/a))².
    let off_diag = ksum(f_values[1..].iter().map(|v| v * v));
    let bb_quantity = n * n * n * off_diag;

    let theorem_a_bound = if has_zero_mean(table) {
        Some(theorem_a_bound(table, natural_split_constant(table))?)
    } else {
        None
    };

    Ok(GramReport {
        field,
        f_values,
        mean_f,
        second_moment_f,
        second_moment_spectral,
        bb_quantity,
        theorem_a_bound,
    })
}

/// `(1/(p(p-1)³)) (Σ_{x≠0} |t̂¹(x)|)² Σ_{x≠0} t(x)²` with `t¹ = t - c·[x ≠ 0]`.
pub fn theorem_a_bound(table: &TargetTable, split_constant: f64) -> Result<f64> {
    check_zero_at_origin(table)?;
    if !has_zero_mean(table) {
        return Err(Error::HypothesisViolation(format!(
            "Σ_{{x≠0}} t(x) = {} is not zero",
            ksum(table.values[1..].iter().copied())
        )));
    }
    let field = table.field;
    let p = field.modulus() as f64;
    let first = table.shifted(split_constant);
    let spectrum = Spectrum {
        field,
        coeffs: dft_values(field, &first.values),
    };
    let l1 = spectral_l1(&spectrum, true);
    Ok(l1 * l1 * table.sum_sq_nonzero() / (p * (p - 1.0).powi(3)))
}

/// `E_{A,B ~ Z_p^*} (Cov_{X ~ Z_p^*}[A·X, B·X])²`.
///
/// `Cov[a·X, b·X] = E_X[h_a(X) h_b(X)] = f(b/a)` for `t(x) = (x - p/2)[x≠0]`,
/// so the average over `(a, b)` is the second moment of `f`.
pub fn ms_covariance(field: PrimeField) -> f64 {
    let table = TargetTable::new(field, TargetKind::RawMul);
    let f = gram_values(&table);
    ksum(f.iter().map(|v| v * v)) / (field.modulus() - 1) as f64
}

/// Both sides of the Boas-Bellman inequality for `h_1..h_m` and `g`.
pub fn boas_bellman_rhs(vectors: &[Vec<f64>], g: &[f64]) -> (f64, f64) {
    let dot = |u: &[f64], v: &[f64]| ksum(u.iter().zip(v).map(|(a, b)| a * b));
    for v in vectors {
        assert_eq!(v.len(), g.len(), "vectors must share one length");
    }
    let lhs = ksum(vectors.iter().map(|h| dot(h, g).powi(2)));
    let max_norm = vectors
        .iter()
        .map(|h| dot(h, h))
        .fold(0.0f64, f64::max);
    let mut cross = KahanSum::new();
    for (i, hi) in vectors.iter().enumerate() {
        for (j, hj) in vectors.iter().enumerate() {
            if i != j {
                cross.add(dot(hi, hj).powi(2));
            }
        }
    }
    let rhs = dot(g, g) * (max_norm + cross.value().sqrt());
    (lhs, rhs)
}

/// `E[f̃_r²]` for the centered bit table.
pub fn centered_bit_second_moment(field: PrimeField, r: BitIndex) -> f64 {
    let table = TargetTable::new(field, TargetKind::CenteredBitR(r));
    let f = gram_values(&table);
    ksum(f.iter().map(|v| v * v)) / (field.modulus() - 1) as f64
}

/// Empirical constant `E[f̃_r²] · p / (r² (log₂ p + 1 - r)²)`.
pub fn variance_bound_bits(field: PrimeField, r: BitIndex) -> f64 {
    let p = field.modulus() as f64;
    let rr = r.get() as f64;
    let scale = rr * rr * (p.log2() + 1.0 - rr).powi(2);
    centered_bit_second_moment(field, r) * p / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modcore::primes_in_range;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(p: u64) -> PrimeField {
        PrimeField::new(p).unwrap()
    }

    /// Literal double loop with `%`, no incremental indexing.
    fn brute_f(t: &[f64], y: usize) -> f64 {
        let p = t.len();
        (1..p).map(|x| t[x] * t[(y * x) % p]).sum::<f64>() / (p - 1) as f64
    }

    #[test]
    fn gram_f_bit_example() {
        let f5 = field(5);
        let t = TargetTable::new(f5, TargetKind::BitR(BitIndex::new(f5, 1).unwrap()));
        let rep = gram_f(&t).unwrap();
        assert_eq!(rep.f_values, vec![1.0, 0.0, 0.0, -1.0]);
        for y in 1..5 {
            assert_eq!(rep.f(y as u64), brute_f(&t.values, y));
        }
        assert_eq!(rep.mean_f, 0.0);
        assert!((rep.second_moment_f - 0.5).abs() < 1e-15);
        assert!(rep.moment_gap() < 1e-9);
    }

    #[test]
    fn f_at_one_is_second_moment_of_t() {
        for kind in [TargetKind::RawMul, TargetKind::Standardized] {
            let f = field(101);
            let t = TargetTable::new(f, kind);
            let rep = gram_f(&t).unwrap();
            assert!((rep.f(1) - t.sum_sq_nonzero() / 100.0).abs() < 1e-9);
            assert!(rep.mean_f.abs() < 1e-12);
        }
    }

    #[test]
    fn convention_violation() {
        let f5 = field(5);
        let t = TargetTable::custom(f5, vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(gram_f(&t), Err(Error::ConventionViolation(_))));
    }

    #[test]
    fn spectral_route_matches_direct_with_nonzero_mean() {
        // BitR with r > 1 has a nonzero mean, exercising the t̂(0)⁴ term.
        for p in [13u64, 31, 67, 101] {
            let f = field(p);
            for r in f.bit_indices() {
                let rep = gram_f(&TargetTable::new(f, TargetKind::BitR(r))).unwrap();
                assert!(rep.moment_gap() < 1e-9, "p={p} r={} gap={}", r.get(), rep.moment_gap());
            }
        }
    }

    #[test]
    fn sum_of_squares_identity() {
        // Σ_{a,b} ⟨h_a, h_b⟩² = (p-1)⁴ E[f²], with h_a built explicitly.
        for p in [5u64, 13, 31, 61, 101] {
            let f = field(p);
            for kind in [TargetKind::RawMul, TargetKind::BitR(BitIndex::new(f, 2).unwrap())] {
                let t = TargetTable::new(f, kind);
                let pu = p as usize;
                let h: Vec<Vec<f64>> = (1..pu)
                    .map(|a| (0..pu).map(|x| t.values[(a * x) % pu]).collect())
                    .collect();
                let mut total = 0.0;
                for ha in &h {
                    for hb in &h {
                        let ip: f64 = ha.iter().zip(hb).map(|(u, v)| u * v).sum();
                        total += ip * ip;
                    }
                }
                let rep = gram_f(&t).unwrap();
                let n = (p - 1) as f64;
                let via_f = n.powi(4) * rep.second_moment_f;
                assert!((total - via_f).abs() <= 1e-9 * via_f, "p={p}");
                let diag = n * t.sum_sq_nonzero().powi(2);
                assert!((rep.bb_quantity - (total - diag)).abs() <= 1e-8 * total);
            }
        }
    }

    #[test]
    fn theorem_a_examples() {
        let f13 = field(13);
        let r2 = BitIndex::new(f13, 2).unwrap();
        let t = TargetTable::new(f13, TargetKind::CenteredBitR(r2));
        let bound = theorem_a_bound(&t, centering_constant(f13, r2)).unwrap();
        let brute: f64 = (1..13).map(|y| brute_f(&t.values, y).powi(2)).sum::<f64>() / 12.0;
        assert!(bound >= brute, "bound {bound} < exact {brute}");

        let zeros = TargetTable::custom(f13, vec![0.0; 13]).unwrap();
        assert_eq!(theorem_a_bound(&zeros, 0.0).unwrap(), 0.0);

        let f101 = field(101);
        let t = TargetTable::new(f101, TargetKind::Standardized);
        let c = natural_split_constant(&t);
        let bound = theorem_a_bound(&t, c).unwrap();
        let brute: f64 = (1..101).map(|y| brute_f(&t.values, y).powi(2)).sum::<f64>() / 100.0;
        assert!(bound >= brute);
    }

    #[test]
    fn theorem_a_rejects_nonzero_mean() {
        let f13 = field(13);
        let t = TargetTable::new(f13, TargetKind::BitR(BitIndex::new(f13, 3).unwrap()));
        assert!(matches!(
            theorem_a_bound(&t, 0.0),
            Err(Error::HypothesisViolation(_))
        ));
        assert!(gram_f(&t).unwrap().theorem_a_bound.is_none());
    }

    #[test]
    fn theorem_a_is_independent_of_split() {
        let f = field(61);
        let t = TargetTable::new(f, TargetKind::RawMul);
        let rep = gram_f(&t).unwrap();
        for c in [-30.5, 0.0, 4.0] {
            assert!(theorem_a_bound(&t, c).unwrap() >= rep.second_moment_f);
        }
    }

    fn brute_ms_cov(p: usize) -> f64 {
        let n = (p - 1) as f64;
        let mut acc = 0.0;
        for a in 1..p {
            for b in 1..p {
                let xs: Vec<(f64, f64)> =
                    (1..p).map(|x| (((a * x) % p) as f64, ((b * x) % p) as f64)).collect();
                let ma = xs.iter().map(|v| v.0).sum::<f64>() / n;
                let mb = xs.iter().map(|v| v.1).sum::<f64>() / n;
                let cov = xs.iter().map(|v| (v.0 - ma) * (v.1 - mb)).sum::<f64>() / n;
                acc += cov * cov;
            }
        }
        acc / (n * n)
    }

    #[test]
    fn ms_covariance_matches_triple_loop() {
        for p in [3usize, 5, 7, 13, 31] {
            let got = ms_covariance(field(p as u64));
            let want = brute_ms_cov(p);
            assert!((got - want).abs() <= 1e-10 * want, "p={p}: {got} vs {want}");
        }
    }

    #[test]
    fn ms_covariance_diagonal_term() {
        // a = b: Cov = Var = p²/12 - p/6; p = 5 gives 1.25, squared 1.5625.
        let f5 = field(5);
        let rep = gram_f(&TargetTable::new(f5, TargetKind::RawMul)).unwrap();
        assert!((rep.f(1) - 1.25).abs() < 1e-12);
        assert!((rep.f(1).powi(2) - 1.5625).abs() < 1e-12);
    }

    #[test]
    fn ms_covariance_scaling_bounded() {
        let ratios: Vec<f64> = primes_in_range(11, 500)
            .into_iter()
            .map(|p| {
                let pf = p as f64;
                ms_covariance(field(p)) / (pf.powi(3) * pf.ln().powi(2))
            })
            .collect();
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(max < 1.0, "max ratio {max}");
    }

    #[test]
    fn boas_bellman_examples() {
        let e = |i: usize| -> Vec<f64> { (0..4).map(|j| f64::from(u8::from(i == j))).collect() };
        let g = vec![1.0, 2.0, -1.0, 0.5];
        let (lhs, rhs) = boas_bellman_rhs(&[e(0), e(1), e(2)], &g);
        let g2: f64 = g.iter().map(|v| v * v).sum();
        assert!((rhs - g2).abs() < 1e-12);
        assert!(lhs <= g2);
        let (lhs, rhs) = boas_bellman_rhs(std::slice::from_ref(&g), &g);
        assert!((lhs - g2 * g2).abs() < 1e-12);
        assert!(lhs <= rhs + 1e-12);
    }

    #[test]
    fn boas_bellman_random_families() {
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hs: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let g: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (lhs, rhs) = boas_bellman_rhs(&hs, &g);
            assert!(lhs <= rhs * (1.0 + 1e-12), "seed {seed}");
        }
    }

    #[test]
    fn variance_bound_bits_examples() {
        let f13 = field(13);
        let v = variance_bound_bits(f13, BitIndex::new(f13, 1).unwrap());
        assert!(v.is_finite() && v > 0.0);
        assert!(BitIndex::new(f13, 5).is_err());
    }

    #[test]
    fn centered_bits_have_zero_mean_f() {
        for p in primes_in_range(3, 251) {
            let f = field(p);
            for r in f.bit_indices() {
                let rep = gram_f(&TargetTable::new(f, TargetKind::CenteredBitR(r))).unwrap();
                assert!(rep.mean_f.abs() < 1e-10, "p={p} r={}", r.get());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn mean_f_is_squared_mean(idx in 0usize..40, vals in proptest::collection::vec(-3.0f64..3.0, 200)) {
            let primes = primes_in_range(3, 180);
            let f = field(primes[idx % primes.len()]);
            let mut values = vals[..f.size()].to_vec();
            values[0] = 0.0;
            let t = TargetTable::custom(f, values).unwrap();
            let rep = gram_f(&t).unwrap();
            let m = t.mean_nonzero();
            prop_assert!((rep.mean_f - m * m).abs() < 1e-10);
            prop_assert!(rep.second_moment_f + 1e-12 >= rep.mean_f * rep.mean_f);
            prop_assert!(rep.moment_gap() < 1e-9);
        }
    }
}
