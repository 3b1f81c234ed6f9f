//! 1-periodic targets `h_a(x) = ψ(a·x)`, their inner products on [0, 1],
//! Kronecker orbits on the 2-torus and discrepancy bounds.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{ksum, KahanSum};

/// Largest point count accepted by [`star_discrepancy_2d`].
pub const MAX_DISCREPANCY_POINTS: usize = 5000;

/// ETK constant for s = 2.
pub const ETK_C2: f64 = 2.25;

/// A zero-mean 1-periodic function of bounded variation.
#[derive(Clone, Debug, PartialEq)]
pub enum PeriodicWave {
    /// `{x} - 1/2`.
    CenteredSawtooth,
    /// `+1` on `[0, 1/2)`, `-1` on `[1/2, 1)`.
    Square,
    /// Linear interpolation of `2^k` uniform samples, wrapping at 1.
    Custom(Vec<f64>),
}

impl PeriodicWave {
    pub fn custom(samples: Vec<f64>) -> Result<Self> {
        let n = samples.len();
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Validation(format!(
                "custom wave needs 2^k >= 2 samples, got {n}"
            )));
        }
        let mean = ksum(samples.iter().copied()) / n as f64;
        if mean.abs() > 1e-6 {
            return Err(Error::Validation(format!("custom wave has mean {mean}")));
        }
        Ok(Self::Custom(samples))
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let u = x - x.floor();
        match self {
            Self::CenteredSawtooth => u - 0.5,
            Self::Square => {
                if u < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            Self::Custom(s) => {
                let n = s.len();
                let pos = u * n as f64;
                let i = (pos as usize).min(n - 1);
                let w = pos - i as f64;
                s[i] * (1.0 - w) + s[(i + 1) % n] * w
            }
        }
    }

    /// Total variation over one period, wrap-around jump included.
    pub fn bv_norm(&self) -> f64 {
        match self {
            Self::CenteredSawtooth => 2.0,
            Self::Square => 4.0,
            Self::Custom(s) => {
                let n = s.len();
                ksum((0..n).map(|i| (s[(i + 1) % n] - s[i]).abs()))
            }
        }
    }

    /// Points of `[0, 1)` where ψ may fail to be linear, ascending.
    fn breakpoints(&self) -> Vec<f64> {
        match self {
            Self::CenteredSawtooth => vec![0.0],
            Self::Square => vec![0.0, 0.5],
            Self::Custom(s) => (0..s.len()).map(|j| j as f64 / s.len() as f64).collect(),
        }
    }
}

/// Breakpoints of `ψ(a·x)` inside `(0, 1)`, ascending.
fn scaled_breakpoints(base: &[f64], a: u64) -> impl Iterator<Item = f64> + '_ {
    let af = a as f64;
    (0..a).flat_map(move |j| base.iter().map(move |u| (j as f64 + u) / af))
        .filter(|&x| x > 0.0 && x < 1.0)
}

/// `∫₀¹ ψ(a·x) ψ(b·x) dx`.
///
/// ψ is piecewise linear, so the integrand is a quadratic between the merged
/// breakpoints of `ψ(a·)` and `ψ(b·)`; two-point Gauss on each piece is exact.
pub fn wave_inner(psi: &PeriodicWave, a: u64, b: u64) -> f64 {
    const G: f64 = 0.288_675_134_594_812_9; // 1/(2√3)
    let base = psi.breakpoints();
    let mut left = scaled_breakpoints(&base, a).peekable();
    let mut right = scaled_breakpoints(&base, b).peekable();
    let (af, bf) = (a as f64, b as f64);
    let mut acc = KahanSum::new();
    let mut lo = 0.0;
    loop {
        let hi = match (left.peek(), right.peek()) {
            (Some(&l), Some(&r)) => {
                if l <= r {
                    left.next();
                    l
                } else {
                    right.next();
                    r
                }
            }
            (Some(&l), None) => {
                left.next();
                l
            }
            (None, Some(&r)) => {
                right.next();
                r
            }
            (None, None) => 1.0,
        };
        let w = hi - lo;
        if w > 0.0 {
            let mid = 0.5 * (lo + hi);
            let (x1, x2) = (mid - G * w, mid + G * w);
            let v = psi.eval(af * x1) * psi.eval(bf * x1) + psi.eval(af * x2) * psi.eval(bf * x2);
            acc.add(0.5 * w * v);
        }
        if hi >= 1.0 {
            break;
        }
        lo = hi;
    }
    acc.value()
}

/// Composite midpoint rule with `m` nodes.
pub fn wave_inner_midpoint(psi: &PeriodicWave, a: u64, b: u64, m: usize) -> f64 {
    let h = 1.0 / m as f64;
    let (af, bf) = (a as f64, b as f64);
    h * ksum((0..m).map(|k| {
        let x = (k as f64 + 0.5) * h;
        psi.eval(af * x) * psi.eval(bf * x)
    }))
}

/// Midpoint rule at the default resolution of 64 nodes per oscillation.
pub fn wave_inner_midpoint_default(psi: &PeriodicWave, a: u64, b: u64) -> f64 {
    wave_inner_midpoint(psi, a, b, 64 * a.max(b).max(1) as usize)
}

/// `Σ_{a,b ∈ 0..A} ⟨h_a, h_b⟩² = ‖Q‖²` with `Q(x,y) = Σ_a ψ(ax)ψ(ay)`.
pub fn q_norm_squared(psi: &PeriodicWave, big_a: u64) -> f64 {
    assert!(big_a >= 1, "A must be at least 1");
    let rows: Vec<f64> = (0..big_a)
        .into_par_iter()
        .map(|a| {
            let mut row = KahanSum::new();
            row.add(wave_inner(psi, a, a).powi(2));
            for b in a + 1..big_a {
                row.add(2.0 * wave_inner(psi, a, b).powi(2));
            }
            row.value()
        })
        .collect();
    ksum(rows)
}

/// Monte Carlo estimate of `‖Q‖²` and its standard error.
pub fn q_norm_squared_mc(psi: &PeriodicWave, big_a: u64, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = KahanSum::new();
    let mut sum_sq = KahanSum::new();
    for _ in 0..samples {
        let x: f64 = rng.gen();
        let y: f64 = rng.gen();
        let q: f64 = (0..big_a)
            .map(|a| psi.eval(a as f64 * x) * psi.eval(a as f64 * y))
            .sum();
        let q2 = q * q;
        sum.add(q2);
        sum_sq.add(q2 * q2);
    }
    let n = samples as f64;
    let mean = sum.value() / n;
    let var = (sum_sq.value() / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    Kronecker { x: f64, y: f64 },
    Random { seed: u64 },
    Explicit,
}

/// Finite point set in `[0, 1)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet2D {
    pub points: Vec<(f64, f64)>,
    pub origin: Origin,
}

impl PointSet2D {
    pub fn explicit(points: Vec<(f64, f64)>) -> Result<Self> {
        for &(x, y) in &points {
            if !(0.0..1.0).contains(&x) || !(0.0..1.0).contains(&y) {
                return Err(Error::Validation(format!("point ({x}, {y}) outside [0,1)^2")));
            }
        }
        Ok(Self {
            points,
            origin: Origin::Explicit,
        })
    }

    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
        Self {
            points,
            origin: Origin::Random { seed },
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y"])?;
        for (x, y) in &self.points {
            w.write_record([x.to_string(), y.to_string()])?;
        }
        w.flush()
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let mut points = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Validation(e.to_string()))?;
            if rec.len() != 2 {
                return Err(Error::Validation(format!("expected 2 columns, got {}", rec.len())));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("bad coordinate {s:?}: {e}")))
            };
            points.push((parse(&rec[0])?, parse(&rec[1])?));
        }
        Self::explicit(points)
    }
}

fn frac(v: f64) -> f64 {
    let f = v - v.floor();
    if f >= 1.0 {
        0.0
    } else {
        f
    }
}

/// `({i·x}, {i·y})` for `i = 0..n`.
pub fn kronecker_orbit(x: f64, y: f64, n: usize) -> PointSet2D {
    let points = (0..n)
        .map(|i| {
            let k = i as f64;
            (frac(k * x), frac(k * y))
        })
        .collect();
    PointSet2D {
        points,
        origin: Origin::Kronecker { x, y },
    }
}

/// Exact star discrepancy over anchored boxes `[0,u₁) × [0,u₂)`.
///
/// The supremum is attained in the limit at grid corners: just above a
/// point coordinate (closed counts) or at a coordinate/1 from below (open
/// counts). One sweep over x with per-y counters gives O(N²).
pub fn star_discrepancy_2d(set: &PointSet2D) -> Result<f64> {
    let n = set.len();
    if n > MAX_DISCREPANCY_POINTS {
        return Err(Error::SizeLimit {
            what: "discrepancy points",
            got: n,
            limit: MAX_DISCREPANCY_POINTS,
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let nf = n as f64;
    let mut ys: Vec<f64> = set.points.iter().map(|p| p.1).collect();
    ys.push(1.0);
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut pts: Vec<(f64, usize)> = set
        .points
        .iter()
        .map(|&(x, y)| (x, ys.partition_point(|&v| v < y)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut cnt = vec![0usize; ys.len()];
    let mut best = 0.0f64;
    let mut i = 0;
    loop {
        let u1 = if i < n { pts[i].0 } else { 1.0 };
        let mut open = 0usize;
        for (j, &u2) in ys.iter().enumerate() {
            best = best.max(u1 * u2 - open as f64 / nf);
            open += cnt[j];
        }
        if i >= n {
            break;
        }
        while i < n && pts[i].0 == u1 {
            cnt[pts[i].1] += 1;
            i += 1;
        }
        let mut closed = 0usize;
        for (j, &u2) in ys.iter().enumerate() {
            closed += cnt[j];
            best = best.max(closed as f64 / nf - u1 * u2);
        }
    }
    Ok(best)
}

/// Erdős-Turán-Koksma right-hand side for s = 2:
/// `C₂ (1/H + Σ_{0<‖h‖∞≤H} |N⁻¹ Σ_l e^{2πi h·x_l}| / r(h))`.
pub fn etk_bound(set: &PointSet2D, h: u32) -> f64 {
    assert!(h >= 1, "H must be at least 1");
    let n = set.len();
    if n == 0 {
        return ETK_C2 / h as f64;
    }
    let hh = h as i64;
    let ex: Vec<Complex64> = set
        .points
        .iter()
        .map(|p| Complex64::from_polar(1.0, 2.0 * PI * p.0))
        .collect();
    let ey: Vec<Complex64> = set
        .points
        .iter()
        .map(|p| Complex64::from_polar(1.0, 2.0 * PI * p.1))
        .collect();
    // h and -h give conjugate sums; keep h1 > 0, or h1 = 0 with h2 > 0.
    let rows: Vec<f64> = (0..=hh)
        .into_par_iter()
        .map(|h1| {
            let base: Vec<Complex64> = ex.iter().map(|e| e.powi(h1 as i32)).collect();
            let r1 = h1.max(1) as f64;
            let mut row = KahanSum::new();
            let lo = if h1 == 0 { 1 } else { -hh };
            for h2 in lo..=hh {
                let mut s = Complex64::new(0.0, 0.0);
                for (b, e) in base.iter().zip(&ey) {
                    s += b * e.powi(h2 as i32);
                }
                let r = r1 * h2.unsigned_abs().max(1) as f64;
                row.add(2.0 * s.norm() / n as f64 / r);
            }
            row.value()
        })
        .collect();
    ETK_C2 * (1.0 / h as f64 + ksum(rows))
}

/// Orbit average of `ψ(x)ψ(y)` against `3‖ψ‖²_BV · D*`.
pub fn koksma_hlawka_gap(psi: &PeriodicWave, x: f64, y: f64, n: usize) -> Result<(f64, f64)> {
    let orbit = kronecker_orbit(x, y, n);
    let empirical =
        (ksum(orbit.points.iter().map(|&(u, v)| psi.eval(u) * psi.eval(v))) / n as f64).abs();
    let bound = 3.0 * psi.bv_norm().powi(2) * star_discrepancy_2d(&orbit)?;
    Ok((empirical, bound))
}

/// One row of an orbit discrepancy sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscrepancyRow {
    pub n: usize,
    pub dstar: f64,
    pub etk_bound: f64,
}

pub fn discrepancy_sweep(x: f64, y: f64, ns: &[usize], h: u32) -> Result<Vec<DiscrepancyRow>> {
    ns.iter()
        .map(|&n| {
            let set = kronecker_orbit(x, y, n);
            Ok(DiscrepancyRow {
                n,
                dstar: star_discrepancy_2d(&set)?,
                etk_bound: etk_bound(&set, h),
            })
        })
        .collect()
}

pub fn write_discrepancy_csv<W: Write>(rows: &[DiscrepancyRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["N", "dstar", "etk_bound"])?;
    for r in rows {
        w.write_record([r.n.to_string(), r.dstar.to_string(), r.etk_bound.to_string()])?;
    }
    w.flush()
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let v = f(c - h * XGK[i]) + f(c + h * XGK[i]);
        k += WGK[i] * v;
        if i % 2 == 1 {
            g += WG[i / 2] * v;
        }
    }
    (k * h, (k - g).abs() * h)
}

/// Adaptive Gauss-Kronrod (7/15) with bisection.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (k, err) = gk15(f, a, b);
        if err <= tol.max(1e-15 * k.abs()) || depth == 0 {
            return k;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth - 1) + rec(f, m, b, 0.5 * tol, depth - 1)
    }
    rec(f, a, b, tol, 40)
}

/// `∫_{-1}^{1} |sin(rωx)| / |sin(ωx)| dx`.
///
/// The integrand is even and smooth between consecutive zeros of
/// `sin(rωx)`, so [0, 1] is split there and each piece integrated
/// adaptively. Near a zero `kπ/ω` of the denominator both sines are
/// evaluated at the offset from it, which keeps the limit `r` exact.
pub fn sin_ratio_integral(omega: f64, r: u64) -> f64 {
    assert!(omega >= 1.0 && r >= 1);
    let rf = r as f64;
    let half_period = PI / omega;
    let integrand = move |x: f64| {
        let e = x - (x / half_period).round() * half_period;
        let d = (omega * e).sin();
        if d == 0.0 {
            rf
        } else {
            ((rf * omega * e).sin() / d).abs()
        }
    };
    let step = PI / (rf * omega);
    let pieces = (1.0 / step).floor() as u64;
    let mut acc = KahanSum::new();
    let mut lo = 0.0;
    for k in 1..=pieces + 1 {
        let hi = (k as f64 * step).min(1.0);
        if hi > lo {
            acc.add(integrate_adaptive(&integrand, lo, hi, 1e-12 * (hi - lo).max(1e-3)));
        }
        lo = hi;
    }
    2.0 * acc.value()
}
