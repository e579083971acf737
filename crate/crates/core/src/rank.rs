//! Rank estimators: singular-value thresholding and sequential Kleibergen–Paap
//! rk testing.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::bootstrap::BootstrapScheme;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{kron, sym_inv_sqrt, sym_pinv, sym_sqrt, svd, tail_blocks, vec_cols, Matrix};
use crate::regression::FirstStageFit;

/// Relative eigenvalue cutoff for the pseudo-inverse of the KP variance.
pub const PINV_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMethod {
    Threshold,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpStep {
    pub rank: usize,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub value: usize,
    pub method: RankMethod,
    pub trail: Vec<KpStep>,
}

/// Largest `j ≤ r` with `σⱼ ≥ κₙ`, or 0 when there is none.
pub fn threshold_rank(sigma: &[f64], kappa_n: f64, r: usize) -> RankEstimate {
    let value = (1..=r.min(sigma.len()))
        .rev()
        .find(|&j| sigma[j - 1] >= kappa_n)
        .unwrap_or(0);
    RankEstimate {
        value,
        method: RankMethod::Threshold,
        trail: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpStatistic {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Directions dropped by the pseudo-inverse.
    pub dropped: usize,
}

pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if df == 0 || x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    dist.sf(x).clamp(0.0, 1.0)
}

/// rk statistic for `H₀: rank = q` from a matrix estimate `a` (m×k, m ≥ k) and
/// the covariance `omega` of `√n vec(a)`:
/// `n · vec(λ)ᵀ (Tᵀ Ω T)⁺ vec(λ)` with `λ = P₂ᵀ a Q₂` and `T = Q₂ ⊗ P₂`.
pub fn kp_statistic(a: &Matrix, omega: &Matrix, q: usize, n: usize) -> Result<KpStatistic> {
    let (m, k) = a.shape();
    if q >= k {
        return Err(Error::InvalidRank { rank: q, limit: k });
    }
    if omega.shape() != (m * k, m * k) {
        return Err(Error::InvalidInput(format!(
            "covariance is {}x{}, expected {}x{}",
            omega.nrows(),
            omega.ncols(),
            m * k,
            m * k
        )));
    }
    let s = svd(a)?;
    let (p2, q2) = tail_blocks(&s, q)?;
    let lambda = vec_cols(&(p2.transpose() * a * &q2));
    let df = (m - q) * (k - q);

    let t = kron(&q2, &p2);
    let v = t.transpose() * omega * &t;
    let (v_inv, dropped) = sym_pinv(&v, PINV_TOL);

    let lambda_norm = lambda.norm();
    if lambda_norm == 0.0 {
        return Ok(KpStatistic {
            statistic: 0.0,
            df,
            p_value: 1.0,
            dropped,
        });
    }
    if dropped == df {
        return Err(Error::DegenerateVariance(format!(
            "projected covariance for rank {q} is numerically zero"
        )));
    }
    let statistic = (n as f64 * lambda.dot(&(&v_inv * &lambda))).max(0.0);
    Ok(KpStatistic {
        statistic,
        df,
        p_value: chi2_sf(statistic, df),
        dropped,
    })
}

/// Tests `q = 0, 1, …` at level `beta` and returns the first accepted `q`, or
/// `k` when every test rejects.
pub fn sequential_rank(a: &Matrix, omega: &Matrix, n: usize, beta: f64) -> Result<(RankEstimate, usize)> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidInput(format!("beta = {beta} must lie in (0, 1)")));
    }
    let k = a.ncols();
    let mut trail = Vec::new();
    let mut dropped = 0;
    let mut value = k;
    for q in 0..k {
        let kp = kp_statistic(a, omega, q, n)?;
        dropped = dropped.max(kp.dropped);
        trail.push(KpStep {
            rank: q,
            statistic: kp.statistic,
            df: kp.df,
            p_value: kp.p_value,
        });
        if kp.p_value >= beta {
            value = q;
            break;
        }
    }
    Ok((
        RankEstimate {
            value,
            method: RankMethod::Sequential,
            trail,
        },
        dropped,
    ))
}

/// Normalized matrix `Ĝ^{1/2} Π̂ F̂^{1/2}` with `Ĝ = Z̃ᵀZ̃/n` and
/// `F̂ = (X̃ᵀX̃/n)⁻¹`, together with the Kronecker factor `F̂^{1/2} ⊗ Ĝ^{1/2}`
/// that maps `vec(Π̂)` to `vec(Θ̂)`.
pub fn kp_normalize(fit: &FirstStageFit) -> Result<(Matrix, Matrix)> {
    let n = fit.partialled.z_tilde.nrows() as f64;
    let zt = &fit.partialled.z_tilde;
    let xt = &fit.partialled.x_tilde;
    let g_half = sym_sqrt(&(zt.transpose() * zt / n));
    let f_half = sym_inv_sqrt(&(xt.transpose() * xt / n), "endogenous variables after partialling out controls")?;
    let theta = &g_half * &fit.pi_hat * &f_half;
    Ok((theta, kron(&f_half, &g_half)))
}

/// Covariance of `√n vec(Π̂)` built from the null-restricted scores
/// `sᵢ = x̃ᵢ ⊗ z̃ᵢ` (first-stage residuals under `Π = 0`), matched to the
/// bootstrap scheme: heteroskedasticity-robust for wild, summed within clusters
/// for cluster, and a Bartlett kernel with bandwidth equal to the block length
/// for block.
pub fn null_score_covariance(
    fit: &FirstStageFit,
    d: &Dataset,
    scheme: BootstrapScheme,
    n_scale: usize,
) -> Result<Matrix> {
    let zt = &fit.partialled.z_tilde;
    let xt = &fit.partialled.x_tilde;
    let (n, m) = zt.shape();
    let k = xt.ncols();
    let dim = m * k;

    let scores = Matrix::from_fn(n, dim, |i, c| xt[(i, c / m)] * zt[(i, c % m)]);

    let meat = match scheme {
        BootstrapScheme::Wild => scores.transpose() * &scores,
        BootstrapScheme::Cluster => {
            let (index, groups) = d
                .cluster_index()
                .ok_or_else(|| Error::InvalidInput("cluster bootstrap requires cluster ids".into()))?;
            let mut sums = Matrix::zeros(groups, dim);
            for (i, &g) in index.iter().enumerate() {
                let mut row = sums.row_mut(g);
                row += scores.row(i);
            }
            sums.transpose() * sums
        }
        BootstrapScheme::Block { length } => {
            let mut meat = scores.transpose() * &scores;
            for lag in 1..length.min(n) {
                let weight = 1.0 - lag as f64 / length as f64;
                let lead = scores.rows(lag, n - lag);
                let trail = scores.rows(0, n - lag);
                let gamma = lead.transpose() * trail;
                meat += (&gamma + gamma.transpose()) * weight;
            }
            meat
        }
    };

    let a_inv = (zt.transpose() * zt)
        .try_inverse()
        .ok_or_else(|| Error::Collinear {
            what: "instruments after partialling out controls".into(),
            condition: f64::INFINITY,
        })?;
    let bread = kron(&Matrix::identity(k, k), &a_inv);
    Ok(&bread * meat * bread.transpose() * n_scale as f64)
}
