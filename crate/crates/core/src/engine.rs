//! Test orchestration: statistic, bootstrap law, critical values, p-values and
//! the two-step / analytic decisions.
//!
//! A single set of bootstrap draws is generated per run and shared by both
//! approaches and by every row of the all-ranks sweep.

use serde::{Deserialize, Serialize};

use crate::bootstrap::{self, BootstrapDraws, BootstrapScheme};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{phi, projected_phi, svd, tail_blocks, SvdResult};
use crate::rank::{
    kp_normalize, null_score_covariance, sequential_rank, threshold_rank, KpStep, RankEstimate,
};
use crate::regression::{fit_first_stage, FirstStageFit};

pub const DEFAULT_SEED: u64 = 12345;

/// Guards floor(B·level) and p-value comparisons against representation error
/// in levels such as `1 − 0.05 + 0.005`.
const LEVEL_EPS: f64 = 1e-9;

/// Covariance fed to the sequential Kleibergen–Paap step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KpVariance {
    /// Normalized rk statistic with a scheme-matched covariance of the
    /// null-restricted scores.
    NullScores,
    /// Unnormalized statistic on `Π̂` with the covariance of the bootstrap draws.
    Bootstrap,
}

/// Which `n` scales the statistic, the draws and the default threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleScale {
    /// Row count of the loaded table, including rows lost to lags or missing
    /// values.
    Table,
    /// Rows used in the regression.
    Estimation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    /// Hypothesized rank; `None` means `k − 1`.
    pub rank: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    /// Threshold for the analytic rank estimate; `None` means `n^{-1/4}`.
    pub kappa_n: Option<f64>,
    pub num_boot: usize,
    pub scheme: BootstrapScheme,
    pub seed: u64,
    /// Also run the analytic approach.
    pub analytic: bool,
    /// Test every `r = 0, …, k − 1`.
    pub allrank: bool,
    pub kp_variance: KpVariance,
    pub scale: SampleScale,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            rank: None,
            alpha: 0.05,
            beta: 0.005,
            kappa_n: None,
            num_boot: 1000,
            scheme: BootstrapScheme::Wild,
            seed: DEFAULT_SEED,
            analytic: false,
            allrank: false,
            kp_variance: KpVariance::NullScores,
            scale: SampleScale::Table,
        }
    }
}

impl TestConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < self.alpha) {
            return Err(Error::InvalidInput(format!(
                "beta = {} must lie in (0, alpha = {})",
                self.beta, self.alpha
            )));
        }
        if self.num_boot == 0 {
            return Err(Error::InvalidInput("number of bootstrap draws must be positive".into()));
        }
        if let Some(kappa) = self.kappa_n {
            if !(kappa > 0.0 && kappa.is_finite()) {
                return Err(Error::InvalidInput(format!("kappa_n = {kappa} must be positive")));
            }
        }
        if let Some(r) = self.rank {
            if r >= k {
                return Err(Error::InvalidRank { rank: r, limit: k });
            }
        }
        Ok(())
    }

    pub fn hypothesized_rank(&self, k: usize) -> usize {
        self.rank.unwrap_or(k.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepResult {
    pub rank_estimate: usize,
    pub first_step_rejected: bool,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub critical_value: Option<f64>,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticResult {
    pub rank_estimate: usize,
    pub kappa_n: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub critical_value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub rank: usize,
    pub statistic: f64,
    pub two_step: TwoStepResult,
    pub analytic: Option<AnalyticResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub n: usize,
    pub n_scale: usize,
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub num_boot: usize,
    pub seed: u64,
    pub scheme: BootstrapScheme,
    pub kp_variance: KpVariance,
    pub singular_values: Vec<f64>,
    /// Sequential KP tests behind the two-step rank estimate.
    pub kp_trail: Vec<KpStep>,
    pub allrank: bool,
    /// One entry per tested rank, ascending.
    pub results: Vec<RankResult>,
    pub warnings: Vec<String>,
}

impl TestReport {
    /// The result for the hypothesized rank (the last row under `allrank`).
    pub fn primary(&self) -> &RankResult {
        self.results.last().expect("at least one tested rank")
    }
}

/// `n φ(Π̂)`.
pub fn statistic(fit: &FirstStageFit, n: usize, r: usize) -> Result<f64> {
    Ok(n as f64 * phi(&fit.pi_hat, r)?)
}

/// `Σ_{j=r−r̂+1}^{k−r̂} σⱼ²(P̂₂ᵀ M*_b Q̂₂)` for every draw, in draw order.
pub fn bootstrap_law(draws: &BootstrapDraws, fit_svd: &SvdResult, r: usize, r_hat: usize) -> Result<Vec<f64>> {
    if r_hat > r {
        return Err(Error::InvalidState(format!(
            "rank estimate {r_hat} exceeds hypothesized rank {r}"
        )));
    }
    let (p2, q2) = tail_blocks(fit_svd, r_hat)?;
    draws
        .m_star
        .iter()
        .map(|m| projected_phi(&p2, m, &q2, r, r_hat))
        .collect()
}

/// The `⌊B·level⌋`-th smallest value of `law` (the minimum when that index
/// is 0).
pub fn critical_value(law: &[f64], level: f64) -> f64 {
    assert!(!law.is_empty(), "empty bootstrap law");
    let mut sorted = law.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let index = ((b as f64 * level + LEVEL_EPS).floor() as usize).min(b);
    sorted[index.saturating_sub(1)]
}

/// Share of draws at least as large as `observed`.
pub fn p_value(law: &[f64], observed: f64) -> f64 {
    assert!(!law.is_empty(), "empty bootstrap law");
    law.iter().filter(|&&v| v >= observed).count() as f64 / law.len() as f64
}

fn below(p: f64, level: f64) -> bool {
    p < level - LEVEL_EPS
}

/// Everything that does not depend on the hypothesized rank: the fit, its
/// SVD, the bootstrap draws and the two-step rank estimate.
#[derive(Debug, Clone)]
pub struct TestContext {
    cfg: TestConfig,
    fit: FirstStageFit,
    fit_svd: SvdResult,
    draws: BootstrapDraws,
    sequential: RankEstimate,
    n: usize,
    n_scale: usize,
    kappa_n: f64,
    warnings: Vec<String>,
}

impl TestContext {
    pub fn prepare(d: &Dataset, cfg: &TestConfig) -> Result<Self> {
        let (m, k) = (d.m(), d.k());
        if m < k {
            return Err(Error::Data(format!(
                "{m} instruments for {k} endogenous variables: the first-stage matrix has rank at most {m}"
            )));
        }
        cfg.validate(k)?;
        cfg.scheme.validate(d)?;

        let mut warnings = Vec::new();
        if cfg.num_boot < 1000 {
            warnings.push(format!(
                "{} bootstrap draws; at least 1000 are recommended",
                cfg.num_boot
            ));
        }

        let n = d.n();
        let n_scale = match cfg.scale {
            SampleScale::Table => d.table_rows.max(n),
            SampleScale::Estimation => n,
        };
        let fit = fit_first_stage(d)?;
        let fit_svd = svd(&fit.pi_hat)?;
        let draws = bootstrap::run(&fit, d, cfg.scheme, cfg.num_boot, cfg.seed, n_scale)?;

        let (sequential, dropped) = match cfg.kp_variance {
            KpVariance::NullScores => {
                let omega = null_score_covariance(&fit, d, cfg.scheme, n_scale)?;
                let (theta, transform) = kp_normalize(&fit)?;
                let omega_theta = &transform * omega * transform.transpose();
                sequential_rank(&theta, &omega_theta, n_scale, cfg.beta)?
            }
            KpVariance::Bootstrap => sequential_rank(&fit.pi_hat, &draws.omega_hat, n_scale, cfg.beta)?,
        };
        if dropped > 0 {
            warnings.push(format!(
                "KP variance is near-singular; {dropped} direction(s) dropped by the pseudo-inverse"
            ));
        }

        let kappa_n = cfg.kappa_n.unwrap_or_else(|| (n_scale as f64).powf(-0.25));

        Ok(Self {
            cfg: cfg.clone(),
            fit,
            fit_svd,
            draws,
            sequential,
            n,
            n_scale,
            kappa_n,
            warnings,
        })
    }

    pub fn fit(&self) -> &FirstStageFit {
        &self.fit
    }

    pub fn draws(&self) -> &BootstrapDraws {
        &self.draws
    }

    pub fn fit_svd(&self) -> &SvdResult {
        &self.fit_svd
    }

    pub fn sequential_estimate(&self) -> &RankEstimate {
        &self.sequential
    }

    pub fn n_scale(&self) -> usize {
        self.n_scale
    }

    pub fn kappa_n(&self) -> f64 {
        self.kappa_n
    }

    pub fn statistic(&self, r: usize) -> Result<f64> {
        statistic(&self.fit, self.n_scale, r)
    }

    pub fn two_step(&self, r: usize) -> Result<TwoStepResult> {
        let r_hat = self.sequential.value;
        if r_hat > r {
            return Ok(TwoStepResult {
                rank_estimate: r_hat,
                first_step_rejected: true,
                statistic: None,
                p_value: None,
                critical_value: None,
                reject: true,
            });
        }
        let stat = self.statistic(r)?;
        let law = bootstrap_law(&self.draws, &self.fit_svd, r, r_hat)?;
        let level = 1.0 - self.cfg.alpha + self.cfg.beta;
        let p = p_value(&law, stat);
        Ok(TwoStepResult {
            rank_estimate: r_hat,
            first_step_rejected: false,
            statistic: Some(stat),
            p_value: Some(p),
            critical_value: Some(critical_value(&law, level)),
            reject: below(p, self.cfg.alpha - self.cfg.beta),
        })
    }

    pub fn analytic(&self, r: usize) -> Result<(AnalyticResult, Option<String>)> {
        let k = self.fit_svd.cols();
        let r_hat = threshold_rank(&self.fit_svd.sigma, self.kappa_n, r).value;
        let stat = self.statistic(r)?;
        let mut warning = None;
        let law = if r_hat >= k {
            warning = Some("analytic rank estimate equals k; bootstrap law is identically zero".to_string());
            vec![0.0; self.draws.len()]
        } else {
            bootstrap_law(&self.draws, &self.fit_svd, r, r_hat)?
        };
        let p = p_value(&law, stat);
        Ok((
            AnalyticResult {
                rank_estimate: r_hat,
                kappa_n: self.kappa_n,
                statistic: stat,
                p_value: p,
                critical_value: critical_value(&law, 1.0 - self.cfg.alpha),
                reject: below(p, self.cfg.alpha),
            },
            warning,
        ))
    }

    pub fn rank_result(&self, r: usize) -> Result<(RankResult, Option<String>)> {
        let two_step = self.two_step(r)?;
        let (analytic, warning) = if self.cfg.analytic {
            let (a, w) = self.analytic(r)?;
            (Some(a), w)
        } else {
            (None, None)
        };
        Ok((
            RankResult {
                rank: r,
                statistic: self.statistic(r)?,
                two_step,
                analytic,
            },
            warning,
        ))
    }

    pub fn report(&self) -> Result<TestReport> {
        let k = self.fit_svd.cols();
        let ranks: Vec<usize> = if self.cfg.allrank {
            (0..k).collect()
        } else {
            vec![self.cfg.hypothesized_rank(k)]
        };
        let mut warnings = self.warnings.clone();
        let mut results = Vec::with_capacity(ranks.len());
        for r in ranks {
            let (row, warning) = self.rank_result(r)?;
            warnings.extend(warning);
            results.push(row);
        }
        Ok(TestReport {
            n: self.n,
            n_scale: self.n_scale,
            m: self.fit_svd.rows(),
            k,
            alpha: self.cfg.alpha,
            beta: self.cfg.beta,
            num_boot: self.cfg.num_boot,
            seed: self.cfg.seed,
            scheme: self.cfg.scheme,
            kp_variance: self.cfg.kp_variance,
            singular_values: self.fit_svd.sigma.clone(),
            kp_trail: self.sequential.trail.clone(),
            allrank: self.cfg.allrank,
            results,
            warnings,
        })
    }
}

pub fn run_two_step(d: &Dataset, cfg: &TestConfig) -> Result<TwoStepResult> {
    let ctx = TestContext::prepare(d, cfg)?;
    ctx.two_step(cfg.hypothesized_rank(d.k()))
}

pub fn run_analytic(d: &Dataset, cfg: &TestConfig) -> Result<AnalyticResult> {
    let ctx = TestContext::prepare(d, cfg)?;
    ctx.analytic(cfg.hypothesized_rank(d.k())).map(|(a, _)| a)
}

pub fn run_allrank(d: &Dataset, cfg: &TestConfig) -> Result<Vec<RankResult>> {
    let cfg = TestConfig {
        allrank: true,
        ..cfg.clone()
    };
    Ok(TestContext::prepare(d, &cfg)?.report()?.results)
}

pub fn run_test(d: &Dataset, cfg: &TestConfig) -> Result<TestReport> {
    TestContext::prepare(d, cfg)?.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{singular_values, Matrix};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn critical_value_examples() {
        let law: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(critical_value(&law, 0.95), 95.0);
        let law: Vec<f64> = (1..=1000).rev().map(f64::from).collect();
        assert_eq!(critical_value(&law, 1.0 - 0.05 + 0.005), 955.0);
        assert_eq!(critical_value(&[3.5; 17], 0.9), 3.5);
        assert_eq!(critical_value(&[2.0, 1.0], 0.2), 1.0);
    }

    #[test]
    fn p_value_examples() {
        let law = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(p_value(&law, 0.5), 1.0);
        assert_eq!(p_value(&law, 4.5), 0.0);
        assert_eq!(p_value(&law, 3.0), 0.5);
    }

    #[test]
    fn p_value_at_boundary_does_not_reject() {
        assert!(!below(0.045, 0.05 - 0.005));
        assert!(below(0.044, 0.05 - 0.005));
        assert!(!below(0.05, 0.05));
    }

    proptest! {
        #[test]
        fn critical_value_matches_naive_sort(law in prop::collection::vec(0.0f64..100.0, 1..300), level in 0.01f64..0.99) {
            let mut sorted = law.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let j = (law.len() as f64 * level + LEVEL_EPS).floor() as usize;
            let naive = if j == 0 { sorted[0] } else { sorted[j - 1] };
            prop_assert_eq!(critical_value(&law, level), naive);
        }

        #[test]
        fn critical_value_monotone_in_level(law in prop::collection::vec(0.0f64..10.0, 1..200), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(critical_value(&law, lo) <= critical_value(&law, hi));
        }

        #[test]
        fn decision_duality(law in prop::collection::vec(0.0f64..10.0, 50..400), stat in 0.0f64..12.0) {
            let (alpha, beta) = (0.05, 0.005);
            let level = 1.0 - alpha + beta;
            let cv = critical_value(&law, level);
            let p = p_value(&law, stat);
            let b = law.len() as f64;
            if below(p, alpha - beta) {
                prop_assert!(stat > cv);
            }
            if stat > cv {
                // at most B − ⌊B·level⌋ draws reach the statistic
                prop_assert!(p * b <= b - (b * level + LEVEL_EPS).floor() + 1e-9);
            } else {
                prop_assert!(!below(p, alpha - beta));
            }
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn design(n: usize, pi: &Matrix, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k) = pi.shape();
        let z = random(n, m, &mut rng);
        let x = &z * pi + random(n, k, &mut rng);
        Dataset::new(x, z, Matrix::from_element(n, 1, 1.0)).unwrap()
    }

    #[test]
    fn zero_draws_give_zero_law() {
        let draws = BootstrapDraws::from_draws(vec![Matrix::zeros(3, 2); 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = svd(&random(3, 2, &mut rng)).unwrap();
        assert_eq!(bootstrap_law(&draws, &s, 1, 0).unwrap(), vec![0.0; 4]);
        assert!(bootstrap_law(&draws, &s, 0, 1).is_err());
    }

    #[test]
    fn law_single_term_is_smallest_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = svd(&random(4, 2, &mut rng)).unwrap();
        let m = random(4, 2, &mut rng);
        let draws = BootstrapDraws::from_draws(vec![m.clone()]);
        let law = bootstrap_law(&draws, &s, 1, 1).unwrap();
        let (p2, q2) = tail_blocks(&s, 1).unwrap();
        let sv = singular_values(&(p2.transpose() * &m * &q2));
        assert_abs_diff_eq!(law[0], sv.last().unwrap().powi(2), epsilon = 1e-12);
    }

    #[test]
    fn law_matches_naive_recomputation() {
        let d = design(60, &Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 0.0, 0.0, 0.0]), 9);
        let cfg = TestConfig {
            num_boot: 5,
            ..TestConfig::default()
        };
        let ctx = TestContext::prepare(&d, &cfg).unwrap();
        let law = bootstrap_law(ctx.draws(), ctx.fit_svd(), 1, 1).unwrap();
        for (b, m) in ctx.draws().m_star.iter().enumerate() {
            // naive: recompute the SVD of Π̂ each time and slice by hand
            let s = svd(&ctx.fit().pi_hat).unwrap();
            let p2 = s.p.columns(1, 2).into_owned();
            let q2 = s.q.columns(1, 1).into_owned();
            let c = p2.transpose() * m * q2;
            let naive: f64 = c.iter().map(|v| v * v).sum();
            assert_abs_diff_eq!(law[b], naive, epsilon = 1e-12 * (1.0 + naive));
        }
    }

    #[test]
    fn statistic_zero_for_low_rank() {
        let d = design(40, &Matrix::zeros(3, 2), 2);
        let fit = fit_first_stage(&d).unwrap();
        let mut exact = fit.clone();
        exact.pi_hat = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 0.5, 1.0]);
        assert!(statistic(&exact, 40, 1).unwrap() < 1e-20);
    }

    #[test]
    fn config_validation() {
        let bad = TestConfig {
            beta: 0.06,
            ..TestConfig::default()
        };
        assert!(bad.validate(2).is_err());
        let bad = TestConfig {
            rank: Some(2),
            ..TestConfig::default()
        };
        assert!(matches!(bad.validate(2), Err(Error::InvalidRank { rank: 2, limit: 2 })));
        assert!(TestConfig::default().validate(2).is_ok());
        assert_eq!(TestConfig::default().hypothesized_rank(3), 2);
    }

    #[test]
    fn strong_signal_rejects_in_first_step() {
        let pi = Matrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let d = design(200, &pi, 4);
        let cfg = TestConfig {
            num_boot: 200,
            ..TestConfig::default()
        };
        let res = run_two_step(&d, &cfg).unwrap();
        assert!(res.first_step_rejected);
        assert_eq!(res.rank_estimate, 2);
        assert!(res.reject);
        assert!(res.p_value.is_none() && res.statistic.is_none());
    }

    #[test]
    fn analytic_zero_matrix_uses_full_window() {
        let d = design(100, &Matrix::zeros(3, 2), 5);
        let cfg = TestConfig {
            num_boot: 100,
            kappa_n: Some(1e-12),
            analytic: true,
            rank: Some(0),
            ..TestConfig::default()
        };
        let ctx = TestContext::prepare(&d, &cfg).unwrap();
        let (a, _) = ctx.analytic(0).unwrap();
        assert_eq!(a.rank_estimate, 0);
        let law = bootstrap_law(ctx.draws(), ctx.fit_svd(), 0, 0).unwrap();
        for (v, m) in law.iter().zip(&ctx.draws().m_star) {
            assert_abs_diff_eq!(*v, phi(m, 0).unwrap(), epsilon = 1e-10 * (1.0 + v));
        }
    }

    #[test]
    fn allrank_rows_are_monotone_and_deterministic() {
        let d = design(80, &Matrix::from_row_slice(3, 2, &[0.5, 0.0, 0.0, 0.1, 0.0, 0.0]), 6);
        let cfg = TestConfig {
            num_boot: 200,
            analytic: true,
            ..TestConfig::default()
        };
        let rows = run_allrank(&d, &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].statistic >= rows[1].statistic);
        let again = run_allrank(&d, &cfg).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn fewer_instruments_than_regressors_is_rejected() {
        let d = design(50, &Matrix::zeros(1, 2), 7);
        assert!(run_test(&d, &TestConfig::default()).is_err());
    }
}
