//! Statistical-query dimension: exact for small classes, a greedy witness,
//! and the Turán-type lower bound from the Boas-Bellman quantity.

use std::io::Write;

use crate::error::{Error, Result};
use crate::modcore::{mul_mod, BitIndex, PrimeField};
use crate::numeric::ksum;
use crate::spectral::{TargetKind, TargetTable};

/// Default cap on the class size for the exact solver.
pub const DEFAULT_EXACT_LIMIT: usize = 64;

/// Slack on `|M_ij| <= 1/d` for rounding in the correlations.
const THRESHOLD_EPS: f64 = 1e-12;

/// Finite class of real functions on a finite weighted domain.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisClass {
    pub domain_size: usize,
    pub functions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl HypothesisClass {
    /// `weights = None` means uniform.
    pub fn new(functions: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> Result<Self> {
        let domain_size = functions.first().map_or(0, |f| f.len());
        if functions.iter().any(|f| f.len() != domain_size) {
            return Err(Error::Validation("functions have different lengths".into()));
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != domain_size || w.iter().any(|&v| v < 0.0) {
                    return Err(Error::Validation("bad weight vector".into()));
                }
                let total = ksum(w.iter().copied());
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Validation(format!("weights sum to {total}")));
                }
                w
            }
            None => vec![1.0 / domain_size.max(1) as f64; domain_size],
        };
        Ok(Self {
            domain_size,
            functions,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn is_boolean(&self) -> bool {
        self.functions
            .iter()
            .all(|f| f.iter().all(|&v| v == 1.0 || v == -1.0))
    }

    /// All `2^n` characters `χ_S(x) = Π_{i∈S} x_i` on `{-1,1}^n`.
    pub fn parity(n: u32) -> Self {
        let size = 1usize << n;
        let sign = |x: usize, s: usize| if (x & s).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
        let functions = (0..size)
            .map(|s| (0..size).map(|x| sign(x, s)).collect())
            .collect();
        Self::new(functions, None).expect("parity class is well formed")
    }

    /// `{x ↦ t(a·x) : a ∈ Z_p^*}` on Z_p^* with the uniform law.
    pub fn modular(table: &TargetTable) -> Self {
        let field = table.field;
        let p = field.modulus();
        let functions = (1..p)
            .map(|a| {
                (1..p)
                    .map(|x| table.values[mul_mod(field, a, x) as usize])
                    .collect()
            })
            .collect();
        Self::new(functions, None).expect("modular class is well formed")
    }

    /// The ±1 class of the r-th bit.
    pub fn modular_bit(field: PrimeField, r: BitIndex) -> Self {
        Self::modular(&TargetTable::new(field, TargetKind::BitR(r)))
    }
}

/// `M[i][j] = Σ_x w(x) f_i(x) f_j(x)`.
#[allow(clippy::needless_range_loop)]
pub fn correlation_matrix(class: &HypothesisClass) -> Vec<Vec<f64>> {
    let m = class.len();
    let mut out = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let fi = &class.functions[i];
            let fj = &class.functions[j];
            let v = ksum((0..class.domain_size).map(|x| class.weights[x] * fi[x] * fj[x]));
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

/// `Σ_{i≠j} M[i][j]²`.
pub fn bb_from_matrix(m: &[Vec<f64>]) -> f64 {
    ksum(m.iter().enumerate().flat_map(|(i, row)| {
        row.iter()
            .enumerate()
            .filter(move |&(j, _)| j != i)
            .map(|(_, v)| v * v)
    }))
}

/// `min(m^{2/3} / (2^{1/3} bb^{1/3}), m^{1/2})`.
pub fn turan_lower_bound(m: usize, bb: f64) -> f64 {
    assert!(m >= 1 && bb >= 0.0);
    let mf = m as f64;
    let root = mf.sqrt();
    if bb == 0.0 {
        return root;
    }
    (mf.powf(2.0 / 3.0) / (2f64.cbrt() * bb.cbrt())).min(root)
}

fn start_d(m: usize, corr: &[Vec<f64>]) -> usize {
    let mut min_off = f64::INFINITY;
    for (i, row) in corr.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                min_off = min_off.min(v.abs());
            }
        }
    }
    if min_off <= THRESHOLD_EPS {
        m
    } else {
        m.min((1.0 / min_off).ceil() as usize)
    }
}

fn threshold_adjacency(corr: &[Vec<f64>], d: usize) -> Vec<Vec<bool>> {
    let thr = 1.0 / d as f64 + THRESHOLD_EPS;
    corr.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, v)| i != j && v.abs() <= thr)
                .collect()
        })
        .collect()
}

/// Largest `d` with `d` functions pairwise `|corr| <= 1/d`, by exhaustive
/// clique search on each threshold graph.
pub fn sq_dim_exact(class: &HypothesisClass, limit: usize) -> Result<usize> {
    let m = class.len();
    let cap = limit.min(64);
    if m > cap {
        return Err(Error::SizeLimit {
            what: "class size for exact SQ-dim",
            got: m,
            limit: cap,
        });
    }
    if m == 0 {
        return Ok(0);
    }
    let corr = correlation_matrix(class);
    Ok(sq_dim_exact_from_matrix(&corr))
}

pub fn sq_dim_exact_from_matrix(corr: &[Vec<f64>]) -> usize {
    let m = corr.len();
    for d in (2..=start_d(m, corr)).rev() {
        let adj = threshold_adjacency(corr, d);
        let masks: Vec<u64> = adj
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0u64, |acc, (j, &e)| if e { acc | 1 << j } else { acc })
            })
            .collect();
        if has_clique(&masks, d) {
            return d;
        }
    }
    1
}

/// Whether the graph on `masks.len() <= 64` vertices has a clique of size `k`.
fn has_clique(masks: &[u64], k: usize) -> bool {
    let all = if masks.len() == 64 {
        u64::MAX
    } else {
        (1u64 << masks.len()) - 1
    };
    let mut best = 0;
    expand(masks, all, 0, &mut best, k);
    best >= k
}

/// Greedy sequential colouring of `cand`; returns vertices in colour order
/// with their colour numbers (1-based).
fn colour_order(masks: &[u64], mut cand: u64) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(cand.count_ones() as usize);
    let mut colour = 0;
    while cand != 0 {
        colour += 1;
        let mut avail = cand;
        while avail != 0 {
            let v = avail.trailing_zeros() as usize;
            avail &= !(1u64 << v);
            avail &= !masks[v];
            cand &= !(1u64 << v);
            out.push((v, colour));
        }
    }
    out
}

fn expand(masks: &[u64], mut cand: u64, size: usize, best: &mut usize, target: usize) {
    let order = colour_order(masks, cand);
    for &(v, colour) in order.iter().rev() {
        if size + colour <= *best || *best >= target {
            return;
        }
        let next = cand & masks[v];
        if next == 0 {
            *best = (*best).max(size + 1);
        } else {
            expand(masks, next, size + 1, best, target);
        }
        cand &= !(1u64 << v);
    }
}

/// Largest `d` for which a degree-ordered greedy pass finds `d` pairwise
/// `1/d`-correlated functions. Any size; a witness, so never above the exact value.
pub fn greedy_lower_from_matrix(corr: &[Vec<f64>]) -> usize {
    let m = corr.len();
    if m == 0 {
        return 0;
    }
    for d in (2..=start_d(m, corr)).rev() {
        let adj = threshold_adjacency(corr, d);
        let mut order: Vec<usize> = (0..m).collect();
        let deg: Vec<usize> = adj.iter().map(|r| r.iter().filter(|&&e| e).count()).collect();
        if deg.iter().filter(|&&x| x + 1 >= d).count() < d {
            continue;
        }
        order.sort_by(|&a, &b| deg[b].cmp(&deg[a]).then(a.cmp(&b)));
        let mut chosen: Vec<usize> = Vec::new();
        for &v in &order {
            if chosen.iter().all(|&u| adj[u][v]) {
                chosen.push(v);
                if chosen.len() >= d {
                    return d;
                }
            }
        }
    }
    1
}

/// Summary of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct SqDimReport {
    pub m: usize,
    pub exact_dim: Option<usize>,
    pub greedy_lower: usize,
    pub turan_lower: f64,
    /// `Σ_{h₁≠h₂} E_D[h₁h₂]²`.
    pub bb: f64,
    /// Bit classes with r > 1 are unbalanced and the bound is weak there.
    pub unbalanced: bool,
}

/// Correlations, BB, the Turán bound, the greedy witness and, when `m <= limit`,
/// the exact dimension.
pub fn sq_dim_report(class: &HypothesisClass, limit: usize) -> SqDimReport {
    let corr = correlation_matrix(class);
    let m = class.len();
    let bb = bb_from_matrix(&corr);
    let exact_dim = if m <= limit.min(64) && m > 0 {
        Some(sq_dim_exact_from_matrix(&corr))
    } else {
        None
    };
    SqDimReport {
        m,
        exact_dim,
        greedy_lower: greedy_lower_from_matrix(&corr),
        turan_lower: turan_lower_bound(m.max(1), bb),
        bb,
        unbalanced: false,
    }
}

/// Report for the r-th bit class over Z_p^*.
pub fn modular_bit_report(field: PrimeField, r: BitIndex, limit: usize) -> SqDimReport {
    let mut rep = sq_dim_report(&HypothesisClass::modular_bit(field, r), limit);
    rep.unbalanced = r.get() > 1;
    rep
}

/// Turán bound for the r-th bit class without building the class.
///
/// `E[h_a h_b] = f(b/a)`, so `BB = (p-1) Σ_{y≠1} f(y)²`.
pub fn modular_bit_turan(field: PrimeField, r: BitIndex) -> (f64, f64) {
    let rep = crate::gram::gram_f(&TargetTable::new(field, TargetKind::BitR(r)))
        .expect("bit tables vanish at 0");
    let bb = rep.bb_normalized();
    (bb, turan_lower_bound((field.modulus() - 1) as usize, bb))
}

/// One CSV row: `p,r,m,bb,turan_lower,greedy_lower,exact_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SqDimRow {
    pub p: Option<u64>,
    pub r: Option<u32>,
    pub report: SqDimReport,
}

pub fn write_sqdim_csv<W: Write>(rows: &[SqDimRow], out: W) -> std::io::Result<()> {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "r", "m", "bb", "turan_lower", "greedy_lower", "exact_dim"])?;
    for row in rows {
        let rep = &row.report;
        w.write_record([
            opt(row.p.map(|v| v.to_string())),
            opt(row.r.map(|v| v.to_string())),
            rep.m.to_string(),
            rep.bb.to_string(),
            rep.turan_lower.to_string(),
            rep.greedy_lower.to_string(),
            opt(rep.exact_dim.map(|v| v.to_string())),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gram::gram_f;
    use crate::modcore::primes_in_range;
    use proptest::prelude::*;

    fn field(p: u64) -> PrimeField {
        PrimeField::new(p).unwrap()
    }

    /// Exhaustive subset search for tiny classes.
    fn brute_sq_dim(corr: &[Vec<f64>]) -> usize {
        let m = corr.len();
        let mut best = 1;
        for mask in 1u32..(1 << m) {
            let idx: Vec<usize> = (0..m).filter(|&i| mask >> i & 1 == 1).collect();
            let d = idx.len();
            if d <= best {
                continue;
            }
            let ok = idx.iter().all(|&i| {
                idx.iter()
                    .all(|&j| i == j || corr[i][j].abs() <= 1.0 / d as f64 + THRESHOLD_EPS)
            });
            if ok {
                best = d;
            }
        }
        best
    }

    #[test]
    fn parity_correlations_are_identity() {
        let c = HypothesisClass::parity(3);
        assert_eq!(c.len(), 8);
        let m = correlation_matrix(&c);
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
        for n in 1..=4 {
            assert_eq!(sq_dim_exact(&HypothesisClass::parity(n), 64).unwrap(), 1 << n);
        }
    }

    #[test]
    fn single_and_duplicate_functions() {
        let c = HypothesisClass::new(vec![vec![1.0, -1.0, 1.0]], None).unwrap();
        let m = correlation_matrix(&c);
        assert!((m[0][0] - 1.0).abs() < 1e-15);
        assert_eq!(sq_dim_exact(&c, 64).unwrap(), 1);
        let c = HypothesisClass::new(vec![vec![1.0, -1.0]; 2], None).unwrap();
        assert_eq!(sq_dim_exact(&c, 64).unwrap(), 1);
    }

    #[test]
    fn modular_correlations_match_gram() {
        let f5 = field(5);
        let r1 = BitIndex::new(f5, 1).unwrap();
        let t = TargetTable::new(f5, TargetKind::BitR(r1));
        let rep = gram_f(&t).unwrap();
        let m = correlation_matrix(&HypothesisClass::modular(&t));
        for a in 1..5u64 {
            for b in 1..5u64 {
                let y = mul_mod(f5, b, f5.inv(a).unwrap());
                assert!((m[a as usize - 1][b as usize - 1] - rep.f(y)).abs() < 1e-15);
            }
        }
        let bb = bb_from_matrix(&m);
        assert!((bb - rep.bb_normalized()).abs() < 1e-12);
        assert!((modular_bit_turan(f5, r1).0 - bb).abs() < 1e-12);
    }

    #[test]
    fn turan_examples() {
        assert_eq!(turan_lower_bound(16, 0.0), 4.0);
        assert_eq!(turan_lower_bound(1, 0.0), 1.0);
        let f31 = field(31);
        let r1 = BitIndex::new(f31, 1).unwrap();
        let rep = modular_bit_report(f31, r1, 64);
        let exact = rep.exact_dim.unwrap();
        assert!(rep.turan_lower <= exact as f64 + 1.0);
        assert!(rep.greedy_lower <= exact);
        assert!(!rep.unbalanced);
        assert!(modular_bit_report(f31, BitIndex::new(f31, 3).unwrap(), 64).unbalanced);
    }

    #[test]
    fn exact_matches_subset_enumeration() {
        use rand::{Rng, SeedableRng};
        for seed in 0..60u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(2..12);
            let n = rng.gen_range(4..24);
            let fs: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect())
                .collect();
            let c = HypothesisClass::new(fs, None).unwrap();
            let corr = correlation_matrix(&c);
            assert_eq!(sq_dim_exact(&c, 64).unwrap(), brute_sq_dim(&corr), "seed {seed}");
        }
    }

    #[test]
    fn size_limit() {
        let fs = vec![vec![1.0]; 65];
        let c = HypothesisClass::new(fs, None).unwrap();
        assert!(matches!(sq_dim_exact(&c, 64), Err(Error::SizeLimit { .. })));
        assert!(matches!(
            sq_dim_exact(&HypothesisClass::parity(3), 4),
            Err(Error::SizeLimit { .. })
        ));
        assert!(sq_dim_report(&c, 64).exact_dim.is_none());
    }

    #[test]
    fn bad_weights_rejected() {
        assert!(HypothesisClass::new(vec![vec![1.0, 1.0]], Some(vec![0.5, 0.6])).is_err());
        assert!(HypothesisClass::new(vec![vec![1.0], vec![1.0, 1.0]], None).is_err());
    }

    #[test]
    fn csv_layout() {
        let rep = sq_dim_report(&HypothesisClass::parity(2), 64);
        let rows = vec![SqDimRow {
            p: None,
            r: None,
            report: rep,
        }];
        let mut buf = Vec::new();
        write_sqdim_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "p,r,m,bb,turan_lower,greedy_lower,exact_dim\n,,4,0,2,4,4\n");
    }

    #[test]
    fn modular_classes_satisfy_turan() {
        for p in primes_in_range(5, 41) {
            let f = field(p);
            for r in f.bit_indices() {
                let rep = modular_bit_report(f, r, 64);
                let exact = rep.exact_dim.unwrap();
                assert!(rep.turan_lower <= exact as f64 + 1.0, "p={p} r={}", r.get());
                assert!(rep.greedy_lower <= exact);
            }
        }
    }

    fn boolean_class() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..14, 3usize..20).prop_flat_map(|(m, n)| {
            proptest::collection::vec(
                proptest::collection::vec(prop_oneof![Just(1.0), Just(-1.0)], n),
                m,
            )
        })
    }

    proptest! {
        #[test]
        fn turan_and_greedy_respect_exact(fs in boolean_class()) {
            let c = HypothesisClass::new(fs, None).unwrap();
            let rep = sq_dim_report(&c, 64);
            let exact = rep.exact_dim.unwrap();
            prop_assert!(rep.turan_lower <= exact as f64 + 1.0);
            prop_assert!(rep.greedy_lower <= exact);
        }

        #[test]
        fn exact_is_monotone_under_extension(fs in boolean_class(), extra in proptest::collection::vec(prop_oneof![Just(1.0), Just(-1.0)], 20)) {
            let n = fs[0].len();
            let base = HypothesisClass::new(fs.clone(), None).unwrap();
            let mut bigger = fs;
            bigger.push(extra[..n].to_vec());
            let bigger = HypothesisClass::new(bigger, None).unwrap();
            prop_assert!(sq_dim_exact(&bigger, 64).unwrap() >= sq_dim_exact(&base, 64).unwrap());
        }
    }
}
