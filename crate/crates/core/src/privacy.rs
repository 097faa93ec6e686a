//! Executable checks of the masking guarantees: the distinguishing game
//! against uniform box masks, and non-identifiability of a weight matrix
//! from a single public sketch.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::QMatrix;
use crate::masking::MaskBase;
use crate::ring::RingMatrix;
use crate::stats::bernoulli_stderr;

fn l1(e1: &[f64], e2: &[f64]) -> f64 {
    e1.iter().zip(e2).map(|(a, b)| (a - b).abs()).sum()
}

/// Upper bound on the success probability of any adversary telling `e1`
/// from `e2` behind a uniform mask of width `lambda`:
/// `1/2 + 1/2 min(|e1 - e2|_1 / lambda, 1)`.
pub fn tv_bound(e1: &[f64], e2: &[f64], lambda: f64) -> f64 {
    0.5 + 0.5 * (l1(e1, e2) / lambda).min(1.0)
}

/// Exact total variation between the two shifted boxes:
/// `1 - prod max(1 - |d_i| / lambda, 0)`.
pub fn tv_product(e1: &[f64], e2: &[f64], lambda: f64) -> f64 {
    1.0 - e1.iter().zip(e2).map(|(a, b)| (1.0 - (a - b).abs() / lambda).max(0.0)).product::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameConfig {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub lambda: f64,
    pub trials: u64,
    pub seed: u64,
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda <= 0.0 || self.trials == 0 {
            return Err(Error::BadConfig(format!("lambda {} and trials {} must be positive", self.lambda, self.trials)));
        }
        if self.e1.len() != self.e2.len() || self.e1.is_empty() {
            return Err(Error::LengthMismatch { expected: self.e1.len(), found: self.e2.len() });
        }
        Ok(())
    }

    pub fn norm_ratio(&self) -> f64 {
        l1(&self.e1, &self.e2) / self.lambda
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub norm_ratio: f64,
    pub trials: u64,
    pub empirical: f64,
    pub bound: f64,
    /// Exact optimal success, `1/2 + TV / 2`.
    pub optimal: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// Play the game `trials` times against the Bayes-optimal adversary: it
/// picks the candidate whose mask box contains the observation and flips a
/// coin when both do.
pub fn run_distinguishing_game(cfg: &GameConfig) -> Result<BoundReport> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let half = cfg.lambda / 2.0;
    let inside = |obs: &[f64], e: &[f64]| obs.iter().zip(e).all(|(o, c)| (o - c).abs() <= half);
    let mut obs = vec![0.0; cfg.e1.len()];
    let mut wins = 0u64;
    for _ in 0..cfg.trials {
        let b: bool = rng.random();
        let secret = if b { &cfg.e2 } else { &cfg.e1 };
        for (o, s) in obs.iter_mut().zip(secret) {
            *o = s + rng.random_range(-half..half);
        }
        let guess = match (inside(&obs, &cfg.e1), inside(&obs, &cfg.e2)) {
            (true, false) => false,
            (false, true) => true,
            _ => rng.random(),
        };
        if guess == b {
            wins += 1;
        }
    }
    let empirical = wins as f64 / cfg.trials as f64;
    let stderr = bernoulli_stderr(empirical, cfg.trials);
    let bound = tv_bound(&cfg.e1, &cfg.e2, cfg.lambda);
    Ok(BoundReport {
        norm_ratio: cfg.norm_ratio(),
        trials: cfg.trials,
        empirical,
        bound,
        optimal: 0.5 + 0.5 * tv_product(&cfg.e1, &cfg.e2, cfg.lambda),
        stderr,
        pass: empirical <= bound + 3.0 * stderr,
    })
}

/// Sweep `|d|_1 / lambda` over `ratios` in `dims` dimensions, spreading the
/// offset evenly across coordinates.
pub fn game_grid(ratios: &[f64], dims: usize, lambda: f64, trials: u64, seed: u64) -> Result<Vec<BoundReport>> {
    ratios
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            run_distinguishing_game(&GameConfig {
                e1: vec![0.0; dims],
                e2: vec![r * lambda / dims as f64; dims],
                lambda,
                trials,
                seed: seed.wrapping_add(i as u64),
            })
        })
        .collect()
}

pub fn grid_csv(reports: &[BoundReport]) -> String {
    let mut out = String::from("norm_ratio,bound,empirical,stderr,pass\n");
    for r in reports {
        out.push_str(&format!("{},{:.6},{:.6},{:.6},{}\n", r.norm_ratio, r.bound, r.empirical, r.stderr, r.pass));
    }
    out
}

/// Total variation between the two box densities by midpoint integration
/// on `grid` cells per axis. Dimensions above 3 are refused.
pub fn tv_exact_small(e1: &[f64], e2: &[f64], lambda: f64, grid: usize) -> Result<f64> {
    let n = e1.len();
    if n != e2.len() {
        return Err(Error::LengthMismatch { expected: n, found: e2.len() });
    }
    if n > 3 {
        return Err(Error::DimTooLarge(n));
    }
    if n == 0 || grid == 0 || lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::EmptyInput);
    }
    let half = lambda / 2.0;
    let lo: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| a.min(*b) - half).collect();
    let step: Vec<f64> = e1.iter().zip(e2).zip(&lo).map(|((a, b), l)| (a.max(*b) + half - l) / grid as f64).collect();
    let cell: f64 = step.iter().product();
    let density = 1.0 / lambda.powi(n as i32);
    let mut idx = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let x: Vec<f64> = (0..n).map(|i| lo[i] + (idx[i] as f64 + 0.5) * step[i]).collect();
        let p1 = if x.iter().zip(e1).all(|(x, c)| (x - c).abs() < half) { density } else { 0.0 };
        let p2 = if x.iter().zip(e2).all(|(x, c)| (x - c).abs() < half) { density } else { 0.0 };
        total += (p1 - p2).abs() * cell;
        // Odometer over the grid.
        let mut i = 0;
        loop {
            if i == n {
                return Ok(0.5 * total);
            }
            idx[i] += 1;
            if idx[i] < grid {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// The real-valued pool `M_pub W` the ring pool is a residue of, computed
/// exactly from the encoded values (scale `2f`).
pub fn real_pool(m_pub: &RingMatrix, w: &RingMatrix) -> QMatrix {
    let signed = |m: &RingMatrix| -> Vec<BigInt> { m.data().iter().map(|&v| BigInt::from(m.params().to_signed(v))).collect() };
    let (a, b) = (signed(m_pub), signed(w));
    let (n, k, cols) = (m_pub.rows(), m_pub.cols(), w.cols());
    let den = BigInt::one() << (u32::from(m_pub.params().f()) + u32::from(w.params().f()));
    QMatrix::from_fn(n, cols, |r, c| {
        let num = (0..k).fold(BigInt::zero(), |acc, i| acc + &a[r * k + i] * &b[i * cols + c]);
        BigRational::new(num, den.clone())
    })
}

/// Whether `real` (at scale `2f`) reduces to `ring` modulo `2^k`.
pub fn pool_congruent(real: &QMatrix, ring: &RingMatrix) -> bool {
    let p = ring.params();
    let scale = BigInt::one() << (2 * u32::from(p.f()));
    let modulus = BigInt::one() << u32::from(p.k());
    if (real.rows(), real.cols()) != ring.shape() {
        return false;
    }
    (0..real.rows()).all(|r| {
        (0..real.cols()).all(|c| {
            let v = real.get(r, c) * BigRational::from_integer(scale.clone());
            if !v.is_integer() {
                return false;
            }
            let mut res = v.to_integer() % &modulus;
            if res < BigInt::zero() {
                res += &modulus;
            }
            res == BigInt::from(ring.get(r, c))
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub m: usize,
    pub d: usize,
    pub rank: usize,
    pub kernel_dim: usize,
    /// `kernel_dim >= d - m > 0`.
    pub nontrivial: bool,
}

/// Rank and right kernel of a public base over the rationals.
pub fn kernel_analysis(m_pub: &RingMatrix) -> (KernelReport, Vec<Vec<BigRational>>) {
    let q = QMatrix::from_ring(m_pub);
    let kernel = q.kernel_basis();
    let (m, d) = m_pub.shape();
    let rank = d - kernel.len();
    let report = KernelReport { m, d, rank, kernel_dim: kernel.len(), nontrivial: m < d && kernel.len() >= d - m };
    (report, kernel)
}

/// Integer numerators over one shared positive denominator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaledMatrix {
    rows: usize,
    cols: usize,
    num: Vec<BigInt>,
    den: BigInt,
}

impl ScaledMatrix {
    fn from_q(q: &QMatrix) -> Self {
        let (rows, cols) = (q.rows(), q.cols());
        let mut den = BigInt::one();
        for r in 0..rows {
            for c in 0..cols {
                den = num::integer::lcm(den, q.get(r, c).denom().clone());
            }
        }
        let mut num = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = q.get(r, c);
                num.push(v.numer() * (&den / v.denom()));
            }
        }
        ScaledMatrix { rows, cols, num, den }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn to_q(&self) -> QMatrix {
        QMatrix::from_fn(self.rows, self.cols, |r, c| BigRational::new(self.num[r * self.cols + c].clone(), self.den.clone()))
    }

    fn num_product(&self, other: &ScaledMatrix) -> Vec<BigInt> {
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![BigInt::zero(); n * m];
        for r in 0..n {
            for i in 0..k {
                let a = &self.num[r * k + i];
                if a.is_zero() {
                    continue;
                }
                for c in 0..m {
                    out[r * m + c] += a * &other.num[i * m + c];
                }
            }
        }
        out
    }
}

/// Everything consistent with one sketch: `{W' : M_pub W' = R}` is
/// `W0 + {Z : every column of Z in ker M_pub}`.
#[derive(Debug, Clone)]
pub struct SolutionSpace {
    base: ScaledMatrix,
    pool: ScaledMatrix,
    rank: usize,
    /// Kernel vectors scaled to integers; vector `j` over `w0.den / pool.den`
    /// is the basis vector with free coordinate `j` equal to one.
    kernel: Vec<Vec<BigInt>>,
    /// Particular solution with free variables at zero.
    w0: ScaledMatrix,
}

impl SolutionSpace {
    pub fn new(m_pub: &QMatrix, r_pub: &QMatrix) -> Result<Self> {
        if m_pub.rows() != r_pub.rows() {
            return Err(Error::shape(format!("base has {} rows, pool {}", m_pub.rows(), r_pub.rows())));
        }
        let base = ScaledMatrix::from_q(m_pub);
        let pool = ScaledMatrix::from_q(r_pub);
        let (d, cols) = (base.cols, pool.cols);
        // base.num * Y = pool.num * base.den with W = Y / pool.den.
        let aug = QMatrix::from_fn(base.rows, d + cols, |r, c| {
            BigRational::from_integer(if c < d {
                base.num[r * d + c].clone()
            } else {
                &pool.num[r * cols + c - d] * &base.den
            })
        });
        let ech = aug.echelon();
        if ech.pivots.iter().any(|&p| p >= d) {
            return Err(Error::Unexpected("pool is not in the range of the base".into()));
        }
        let free: Vec<usize> = (0..d).filter(|c| !ech.pivots.contains(c)).collect();
        let kernel = free
            .iter()
            .map(|&j| {
                let mut v = vec![BigInt::zero(); d];
                v[j] = ech.scale.clone();
                for (i, &p) in ech.pivots.iter().enumerate() {
                    v[p] = -&ech.rows[i][j];
                }
                v
            })
            .collect();
        let mut x = vec![BigInt::zero(); d * cols];
        for (i, &p) in ech.pivots.iter().enumerate() {
            for c in 0..cols {
                x[p * cols + c] = ech.rows[i][d + c].clone();
            }
        }
        let w0 = ScaledMatrix { rows: d, cols, num: x, den: &ech.scale * &pool.den };
        Ok(SolutionSpace { rank: ech.pivots.len(), base, pool, kernel, w0 })
    }

    pub fn from_base(base: &MaskBase, w: &RingMatrix) -> Result<Self> {
        let real = real_pool(base.m_pub(), w);
        if !pool_congruent(&real, base.r_pub()) {
            return Err(Error::Unexpected(format!("pool of {} does not match the weights", base.op())));
        }
        Self::new(&QMatrix::from_ring(base.m_pub()), &real)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel.len()
    }

    pub fn particular(&self) -> &ScaledMatrix {
        &self.w0
    }

    /// `|M_pub W' - R|_inf`, exact up to the final conversion to `f64`.
    pub fn residual(&self, w: &ScaledMatrix) -> f64 {
        let prod = self.base.num_product(w);
        let den = &self.base.den * &w.den;
        let worst = prod
            .iter()
            .zip(&self.pool.num)
            .map(|(p, r)| (p * &self.pool.den - r * &den).abs())
            .max()
            .unwrap_or_default();
        if worst.is_zero() {
            return 0.0;
        }
        BigRational::new(worst, den * &self.pool.den).to_f64().unwrap_or(f64::INFINITY)
    }
}

/// `count` distinct weight matrices `W0 + Z`, each column of `Z` a random
/// small integer combination of kernel basis vectors and `Z != 0`.
pub fn enumerate_consistent_weights(space: &SolutionSpace, count: usize, seed: u64) -> Result<Vec<ScaledMatrix>> {
    if space.kernel.is_empty() {
        return Err(Error::TrivialKernel);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (d, cols) = space.w0.shape();
    let mut used: Vec<Vec<i64>> = Vec::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let coeffs: Vec<i64> = (0..cols * space.kernel.len()).map(|_| rng.random_range(-3..=3)).collect();
        if coeffs.iter().all(|&c| c == 0) || used.contains(&coeffs) {
            continue;
        }
        let mut num = space.w0.num.clone();
        for c in 0..cols {
            for (j, v) in space.kernel.iter().enumerate() {
                let k = coeffs[c * space.kernel.len() + j];
                if k == 0 {
                    continue;
                }
                let k = BigInt::from(k) * &space.pool.den;
                for r in 0..d {
                    num[r * cols + c] += &v[r] * &k;
                }
            }
        }
        used.push(coeffs);
        out.push(ScaledMatrix { rows: d, cols, num, den: space.w0.den.clone() });
    }
    Ok(out)
}

/// One sketch of `W`: a base and its exact real pool.
#[derive(Debug, Clone)]
pub struct Sketch {
    pub m_pub: RingMatrix,
    pub pool: QMatrix,
}

impl Sketch {
    pub fn of(m_pub: RingMatrix, w: &RingMatrix) -> Self {
        let pool = real_pool(&m_pub, w);
        Sketch { m_pub, pool }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackingReport {
    pub sketches: usize,
    pub d: usize,
    pub stacked_rank: usize,
    pub recovered: bool,
    /// Largest deviation from the true weights when the system is solvable.
    pub max_error: Option<f64>,
}

/// Stack several sketches of the same `W` and try to solve for it. With a
/// full-rank stack `W` falls out exactly, which is what issuing at most one
/// base per weight matrix prevents.
pub fn stacking_attack_demo(sketches: &[Sketch], w_true: &RingMatrix) -> Result<StackingReport> {
    let first = sketches.first().ok_or(Error::EmptyInput)?;
    let mut m = QMatrix::from_ring(&first.m_pub);
    let mut r = first.pool.clone();
    for s in &sketches[1..] {
        m = m.vstack(&QMatrix::from_ring(&s.m_pub));
        r = r.vstack(&s.pool);
    }
    let d = m.cols();
    let stacked_rank = m.rank();
    let truth = QMatrix::from_ring(w_true);
    let (recovered, max_error) = if stacked_rank == d {
        let w = m.solve(&r).ok_or_else(|| Error::Unexpected("stacked system inconsistent".into()))?;
        let err = w.sub(&truth).max_abs();
        (err <= 1e-6, Some(err))
    } else {
        (false, None)
    };
    Ok(StackingReport { sketches: sketches.len(), d, stacked_rank, recovered, max_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::QuantParams;

    #[test]
    fn bound_examples() {
        assert_eq!(tv_bound(&[1.0, 2.0], &[1.0, 2.0], 3.0), 0.5);
        assert_eq!(tv_bound(&[0.0], &[5.0], 4.0), 1.0);
        assert!((tv_bound(&[0.0], &[1.0], 10.0) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn game_edge_cases() {
        let same = run_distinguishing_game(&GameConfig {
            e1: vec![0.3, 0.3],
            e2: vec![0.3, 0.3],
            lambda: 1.0,
            trials: 100_000,
            seed: 1,
        })
        .unwrap();
        assert!((same.empirical - 0.5).abs() <= 3.0 * same.stderr.max(bernoulli_stderr(0.5, 100_000)));
        let apart = run_distinguishing_game(&GameConfig {
            e1: vec![0.0, 0.0],
            e2: vec![0.0, 1.5],
            lambda: 1.0,
            trials: 10_000,
            seed: 2,
        })
        .unwrap();
        assert_eq!(apart.empirical, 1.0);
        assert!(apart.pass);
    }

    #[test]
    fn tv_integration_matches_closed_forms() {
        assert_eq!(tv_exact_small(&[0.0], &[0.0], 2.0, 100).unwrap(), 0.0);
        let t = tv_exact_small(&[0.0], &[1.0], 2.0, 300).unwrap();
        assert!((t - 0.5).abs() < 1e-9, "{t}");
        let t = tv_exact_small(&[0.0, 0.0], &[1.0, 1.0], 2.0, 300).unwrap();
        assert!((t - 0.75).abs() < 1e-9, "{t}");
        assert!(tv_bound(&[0.0, 0.0], &[1.0, 1.0], 2.0) * 2.0 - 1.0 >= t);
        let t = tv_exact_small(&[0.0, 0.1, 0.2], &[0.3, -0.2, 0.25], 1.0, 120).unwrap();
        assert!((t - tv_product(&[0.0, 0.1, 0.2], &[0.3, -0.2, 0.25], 1.0)).abs() < 0.02, "{t}");
        assert!(matches!(tv_exact_small(&[0.0; 4], &[0.0; 4], 1.0, 4), Err(Error::DimTooLarge(4))));
    }

    fn int(rows: usize, cols: usize, v: &[i64]) -> RingMatrix {
        let p = QuantParams::integer(64).unwrap();
        RingMatrix::new(rows, cols, v.iter().map(|&x| p.from_signed(x)).collect(), p).unwrap()
    }

    #[test]
    fn canonical_base_kernel() {
        let (rep, ker) = kernel_analysis(&int(2, 3, &[1, 0, 0, 0, 1, 0]));
        assert_eq!((rep.rank, rep.kernel_dim), (2, 1));
        assert!(rep.nontrivial);
        let e3: Vec<BigRational> = [0, 0, 1].iter().map(|&x| BigRational::from_integer(x.into())).collect();
        assert_eq!(ker, vec![e3]);
        let (zero, _) = kernel_analysis(&int(2, 3, &[0; 6]));
        assert_eq!((zero.rank, zero.kernel_dim), (0, 3));
    }

    #[test]
    fn canonical_base_weights_differ_only_in_last_row() {
        let m = int(2, 3, &[1, 0, 0, 0, 1, 0]);
        let w = int(3, 3, &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
        let s = Sketch::of(m.clone(), &w);
        let space = SolutionSpace::new(&QMatrix::from_ring(&m), &s.pool).unwrap();
        assert_eq!((space.rank(), space.kernel_dim()), (2, 1));
        let ws = enumerate_consistent_weights(&space, 5, 3).unwrap();
        let truth = QMatrix::from_ring(&w);
        for w2 in &ws {
            assert_eq!(space.residual(w2), 0.0);
            assert_ne!(w2, space.particular());
            let diff = w2.to_q().sub(&truth);
            for r in 0..2 {
                for c in 0..3 {
                    assert!(diff.get(r, c).is_zero());
                }
            }
        }
    }

    #[test]
    fn full_rank_base_has_no_kernel_to_enumerate() {
        let m = int(2, 2, &[1, 0, 0, 1]);
        let space = SolutionSpace::new(&QMatrix::from_ring(&m), &QMatrix::from_i64(2, 1, &[3, 4])).unwrap();
        assert!(matches!(enumerate_consistent_weights(&space, 1, 0), Err(Error::TrivialKernel)));
    }

    #[test]
    fn stacking_small_examples() {
        let w = int(4, 2, &[1, -2, 3, 4, -5, 6, 7, 8]);
        let a = int(2, 4, &[1, 2, 3, 4, 0, 1, 0, 1]);
        let b = int(2, 4, &[5, 0, 1, 0, 2, 0, 0, 7]);
        let one = stacking_attack_demo(&[Sketch::of(a.clone(), &w)], &w).unwrap();
        assert!(!one.recovered);
        let same = stacking_attack_demo(&[Sketch::of(a.clone(), &w), Sketch::of(a.clone(), &w)], &w).unwrap();
        assert_eq!(same.stacked_rank, 2);
        assert!(!same.recovered);
        let two = stacking_attack_demo(&[Sketch::of(a, &w), Sketch::of(b, &w)], &w).unwrap();
        assert_eq!(two.stacked_rank, 4);
        assert!(two.recovered);
        assert_eq!(two.max_error, Some(0.0));
    }

    #[test]
    fn pool_congruence_detects_tampering() {
        let p = QuantParams::default();
        let key = crate::prg::PrgKey::from_u64(3);
        let m = key.uniform_matrix(crate::prg::Label::Session { session: 1 }, 2, 4, p);
        let w = RingMatrix::quantize(&[vec![0.5, -1.0], vec![0.25, 2.0], vec![-0.75, 0.0], vec![1.5, 0.125]], p).unwrap();
        let real = real_pool(&m, &w);
        let ring = m.matmul(&w).unwrap();
        assert!(pool_congruent(&real, &ring));
        let mut data = ring.into_data();
        data[0] ^= 1;
        assert!(!pool_congruent(&real, &RingMatrix::new(2, 2, data, p).unwrap()));
    }
}
