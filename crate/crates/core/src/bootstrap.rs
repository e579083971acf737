//! Residual bootstrap of the first stage.
//!
//! Each draw `b` uses its own ChaCha stream (`seed`, stream `b`), so a draw
//! does not depend on the order in which draws are generated. Draws are
//! generated in parallel and collected in index order.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{vec_cols, Matrix};
use crate::regression::FirstStageFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BootstrapScheme {
    /// `û*ᵢ = ηᵢ ûᵢ`, `ηᵢ ~ N(0, 1)` per row.
    Wild,
    /// One Rademacher weight per cluster.
    Cluster,
    /// Moving-block resample of residual rows, non-circular.
    Block { length: usize },
}

impl BootstrapScheme {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Wild => "wild",
            Self::Cluster => "cluster",
            Self::Block { .. } => "block",
        }
    }

    pub fn validate(&self, d: &Dataset) -> Result<()> {
        match *self {
            Self::Wild => Ok(()),
            Self::Cluster => match d.cluster_index() {
                Some((_, g)) if g >= 2 => Ok(()),
                Some((_, g)) => Err(Error::Data(format!(
                    "cluster bootstrap needs at least 2 clusters, found {g}"
                ))),
                None => Err(Error::InvalidInput("cluster bootstrap requires cluster ids".into())),
            },
            Self::Block { length } => {
                if length == 0 || length > d.n() {
                    return Err(Error::InvalidInput(format!(
                        "block length {length} must be between 1 and n = {}",
                        d.n()
                    )));
                }
                if !d.has_contiguous_time() {
                    return Err(Error::Data(
                        "block bootstrap requires a contiguous time index".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// How one bootstrap draw rearranges the residuals.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// Row `i` is multiplied by `weights[i]` (all columns alike).
    Weights(Vec<f64>),
    /// Row `i` of the output is residual row `rows[i]`.
    Rows(Vec<usize>),
}

impl Perturbation {
    pub fn draw<R: Rng + ?Sized>(
        scheme: BootstrapScheme,
        n: usize,
        clusters: Option<(&[usize], usize)>,
        rng: &mut R,
    ) -> Result<Self> {
        match scheme {
            BootstrapScheme::Wild => Ok(Self::Weights(
                (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            )),
            BootstrapScheme::Cluster => {
                let (index, groups) = clusters.ok_or_else(|| {
                    Error::InvalidInput("cluster bootstrap requires cluster ids".into())
                })?;
                let signs: Vec<f64> = (0..groups)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                Ok(Self::Weights(index.iter().map(|&g| signs[g]).collect()))
            }
            BootstrapScheme::Block { length } => {
                if length == 0 || length > n {
                    return Err(Error::InvalidInput(format!(
                        "block length {length} must be between 1 and n = {n}"
                    )));
                }
                let blocks = n.div_ceil(length);
                let mut rows = Vec::with_capacity(blocks * length);
                for _ in 0..blocks {
                    let start = rng.random_range(0..=n - length);
                    rows.extend(start..start + length);
                }
                rows.truncate(n);
                Ok(Self::Rows(rows))
            }
        }
    }

    pub fn apply(&self, residuals: &Matrix) -> Matrix {
        match self {
            Self::Weights(w) => {
                let mut out = residuals.clone();
                for (mut row, &eta) in out.row_iter_mut().zip(w) {
                    row *= eta;
                }
                out
            }
            Self::Rows(rows) => residuals.select_rows(rows.iter()),
        }
    }
}

pub fn perturb_residuals<R: Rng + ?Sized>(
    residuals: &Matrix,
    scheme: BootstrapScheme,
    clusters: Option<(&[usize], usize)>,
    rng: &mut R,
) -> Result<Matrix> {
    let p = Perturbation::draw(scheme, residuals.nrows(), clusters, rng)?;
    Ok(p.apply(residuals))
}

/// RNG for draw `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `√n (Π̂* − Π̂)` given already perturbed residuals.
pub fn scaled_shift(fit: &FirstStageFit, perturbed: &Matrix, n_scale: usize) -> Matrix {
    fit.coefficient_shift(perturbed) * (n_scale as f64).sqrt()
}

/// One bootstrap draw `M* = √n (Π̂* − Π̂)`.
pub fn draw<R: Rng + ?Sized>(
    fit: &FirstStageFit,
    d: &Dataset,
    scheme: BootstrapScheme,
    rng: &mut R,
    n_scale: usize,
) -> Result<Matrix> {
    let clusters = d.cluster_index();
    let perturbed = perturb_residuals(
        &fit.residuals,
        scheme,
        clusters.as_ref().map(|(i, g)| (i.as_slice(), *g)),
        rng,
    )?;
    Ok(scaled_shift(fit, &perturbed, n_scale))
}

#[derive(Debug, Clone)]
pub struct BootstrapDraws {
    pub m_star: Vec<Matrix>,
    /// Sample covariance of `vec(M*)` (column-major), `(mk)×(mk)`.
    pub omega_hat: Matrix,
}

impl BootstrapDraws {
    pub fn from_draws(m_star: Vec<Matrix>) -> Self {
        let omega_hat = sample_covariance(&m_star);
        Self { m_star, omega_hat }
    }

    pub fn len(&self) -> usize {
        self.m_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_star.is_empty()
    }
}

/// Sample covariance (divisor `B − 1`, or 1 when `B = 1`) of flattened matrices.
pub fn sample_covariance(draws: &[Matrix]) -> Matrix {
    let dim = draws.first().map_or(0, |m| m.len());
    let b = draws.len();
    if b == 0 {
        return Matrix::zeros(dim, dim);
    }
    let vecs: Vec<DVector<f64>> = draws.iter().map(vec_cols).collect();
    let mean = vecs.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / b as f64;
    let mut cov = Matrix::zeros(dim, dim);
    for v in &vecs {
        let c = v - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (b.max(2) - 1) as f64;
    // exact symmetry
    for i in 0..dim {
        for j in 0..i {
            let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    cov
}

/// Generates `b` draws under `scheme`, reproducibly from `seed`.
pub fn run(
    fit: &FirstStageFit,
    d: &Dataset,
    scheme: BootstrapScheme,
    b: usize,
    seed: u64,
    n_scale: usize,
) -> Result<BootstrapDraws> {
    run_with(d, scheme, b, seed, |p| scaled_shift(fit, &p.apply(&fit.residuals), n_scale))
}

/// Shared driver: draws a perturbation per index and maps it through `f`.
pub(crate) fn run_with<F>(
    d: &Dataset,
    scheme: BootstrapScheme,
    b: usize,
    seed: u64,
    f: F,
) -> Result<BootstrapDraws>
where
    F: Fn(&Perturbation) -> Matrix + Sync,
{
    if b == 0 {
        return Err(Error::InvalidInput("number of bootstrap draws must be positive".into()));
    }
    scheme.validate(d)?;
    let clusters = d.cluster_index();
    let clusters = clusters.as_ref().map(|(i, g)| (i.as_slice(), *g));
    let n = d.n();
    let m_star = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            Perturbation::draw(scheme, n, clusters, &mut rng).map(|p| f(&p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapDraws::from_draws(m_star))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::regression::fit_first_stage;
    use nalgebra::SymmetricEigen;

    fn synthetic(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |r, c| Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        let z = g(n, 3);
        let mut w = Matrix::from_element(n, 2, 1.0);
        w.set_column(1, &g(n, 1).column(0));
        let x = &z * g(3, 2) + &w * g(2, 2) + g(n, 2);
        Dataset::new(x, z, w).unwrap()
    }

    fn long_form(d: &Dataset, fit: &FirstStageFit, perturbed: &Matrix) -> Matrix {
        let mut boot = d.clone();
        boot.x = &fit.fitted + perturbed;
        let refit = fit_first_stage(&boot).unwrap();
        (refit.pi_hat - &fit.pi_hat) * (d.n() as f64).sqrt()
    }

    #[test]
    fn unit_weights_leave_residuals_unchanged() {
        let d = synthetic(20, 1);
        let fit = fit_first_stage(&d).unwrap();
        let p = Perturbation::Weights(vec![1.0; 20]);
        assert_eq!(p.apply(&fit.residuals), fit.residuals);
        assert!(max_abs(&scaled_shift(&fit, &p.apply(&fit.residuals), 20)) <= 1e-10);
        let neg = Perturbation::Weights(vec![-1.0; 20]);
        assert!(max_abs(&scaled_shift(&fit, &neg.apply(&fit.residuals), 20)) <= 1e-10);
    }

    #[test]
    fn cluster_signs_negate_whole_clusters() {
        let resid = Matrix::from_fn(7, 2, |i, j| (i * 2 + j) as f64 + 1.0);
        let index = [0, 0, 0, 1, 1, 1, 1];
        let mut rng = stream_rng(3, 0);
        for _ in 0..20 {
            let p = Perturbation::draw(BootstrapScheme::Cluster, 7, Some((&index, 2)), &mut rng).unwrap();
            let Perturbation::Weights(w) = &p else { panic!() };
            assert!(w[..3].iter().all(|&v| v == w[0]));
            assert!(w[3..].iter().all(|&v| v == w[3]));
            assert!(w.iter().all(|&v| v == 1.0 || v == -1.0));
        }
        let forced = Perturbation::Weights(index.iter().map(|&g| if g == 0 { 1.0 } else { -1.0 }).collect());
        let out = forced.apply(&resid);
        for i in 0..7 {
            let sign = if i < 3 { 1.0 } else { -1.0 };
            assert_eq!(out.row(i), resid.row(i) * sign);
        }
    }

    #[test]
    fn cluster_scheme_needs_ids() {
        let mut rng = stream_rng(0, 0);
        assert!(Perturbation::draw(BootstrapScheme::Cluster, 5, None, &mut rng).is_err());
        let d = synthetic(10, 2);
        assert!(BootstrapScheme::Cluster.validate(&d).is_err());
        assert!(BootstrapScheme::Block { length: 11 }.validate(&d).is_err());
    }

    #[test]
    fn full_length_block_is_identity() {
        let resid = Matrix::from_fn(6, 2, |i, j| (i + 10 * j) as f64);
        let mut rng = stream_rng(9, 0);
        for _ in 0..50 {
            let p = Perturbation::draw(BootstrapScheme::Block { length: 6 }, 6, None, &mut rng).unwrap();
            assert_eq!(p, Perturbation::Rows((0..6).collect()));
            assert_eq!(p.apply(&resid), resid);
        }
    }

    #[test]
    fn block_rows_are_contiguous_runs() {
        let mut rng = stream_rng(4, 1);
        for _ in 0..100 {
            let Perturbation::Rows(rows) =
                Perturbation::draw(BootstrapScheme::Block { length: 3 }, 10, None, &mut rng).unwrap()
            else {
                panic!()
            };
            assert_eq!(rows.len(), 10);
            for chunk in rows.chunks(3) {
                assert!(chunk[0] <= 7);
                assert!(chunk.windows(2).all(|w| w[1] == w[0] + 1));
            }
        }
    }

    #[test]
    fn shortcut_matches_long_form() {
        let d = synthetic(50, 7);
        let fit = fit_first_stage(&d).unwrap();
        let ids: Vec<String> = (0..50).map(|i| format!("g{}", i % 6)).collect();
        let dc = d.clone().with_clusters(ids).unwrap();
        for (scheme, data) in [
            (BootstrapScheme::Wild, &d),
            (BootstrapScheme::Cluster, &dc),
            (BootstrapScheme::Block { length: 4 }, &d),
        ] {
            for b in 0..5 {
                let mut rng = stream_rng(11, b);
                let shortcut = draw(&fit, data, scheme, &mut rng, 50).unwrap();
                let mut rng = stream_rng(11, b);
                let c = data.cluster_index();
                let pert = perturb_residuals(
                    &fit.residuals,
                    scheme,
                    c.as_ref().map(|(i, g)| (i.as_slice(), *g)),
                    &mut rng,
                )
                .unwrap();
                let long = long_form(data, &fit, &pert);
                assert!(max_abs(&(shortcut - long)) <= 1e-10, "{scheme:?}");
            }
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let d = synthetic(30, 5);
        let fit = fit_first_stage(&d).unwrap();
        let a = run(&fit, &d, BootstrapScheme::Wild, 64, 42, 30).unwrap();
        let b = run(&fit, &d, BootstrapScheme::Wild, 64, 42, 30).unwrap();
        assert_eq!(a.m_star, b.m_star);
        assert_eq!(a.omega_hat, b.omega_hat);
        let c = run(&fit, &d, BootstrapScheme::Wild, 64, 43, 30).unwrap();
        assert_ne!(a.m_star, c.m_star);
        // a draw does not depend on how many others were generated
        let short = run(&fit, &d, BootstrapScheme::Wild, 10, 42, 30).unwrap();
        assert_eq!(&a.m_star[..10], &short.m_star[..]);
    }

    #[test]
    fn omega_is_symmetric_psd() {
        let d = synthetic(40, 6);
        let fit = fit_first_stage(&d).unwrap();
        let draws = run(&fit, &d, BootstrapScheme::Block { length: 3 }, 200, 1, 40).unwrap();
        let om = &draws.omega_hat;
        assert_eq!(om.shape(), (6, 6));
        assert!(max_abs(&(om - om.transpose())) <= 1e-12);
        let eig = SymmetricEigen::new(om.clone());
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-10));
    }

    #[test]
    fn degenerate_draws_give_zero_omega() {
        let zeros = vec![Matrix::zeros(3, 2), Matrix::zeros(3, 2)];
        let draws = BootstrapDraws::from_draws(zeros);
        assert_eq!(draws.len(), 2);
        assert_eq!(draws.omega_hat, Matrix::zeros(6, 6));
    }

    #[test]
    fn cluster_weights_follow_rows_within_cluster() {
        // permuting rows inside a cluster permutes the perturbed rows identically
        let index = [0usize, 1, 0, 1, 0, 1];
        let permuted_index = [0usize, 1, 0, 1, 0, 1];
        let perm = [4usize, 1, 0, 5, 2, 3];
        let resid = Matrix::from_fn(6, 2, |i, j| (i as f64 + 1.0) * if j == 0 { 1.0 } else { -0.5 });
        let resid_perm = resid.select_rows(perm.iter());
        let a = perturb_residuals(&resid, BootstrapScheme::Cluster, Some((&index, 2)), &mut stream_rng(5, 2)).unwrap();
        let b = perturb_residuals(&resid_perm, BootstrapScheme::Cluster, Some((&permuted_index, 2)), &mut stream_rng(5, 2)).unwrap();
        assert_eq!(a.select_rows(perm.iter()), b);
    }
}
