//! First-stage OLS with the controls partialled out.
//!
//! The `n×n` annihilator is never formed on the estimation path: `M_W Y` is
//! computed as `Y − Q_W Q_Wᵀ Y` from a thin QR of the controls.

use nalgebra::linalg::QR;
use nalgebra::Dyn;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{singular_values, Matrix};

const RANK_TOL: f64 = 1e-10;

fn check_condition(a: &Matrix, what: &str) -> Result<()> {
    let s = singular_values(a);
    let (Some(&max), Some(&min)) = (s.first(), s.last()) else {
        return Ok(());
    };
    if !(min > RANK_TOL * max) {
        return Err(Error::Collinear {
            what: what.to_string(),
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    Ok(())
}

/// Thin QR of a full-column-rank block, used for projections and solves.
#[derive(Debug, Clone)]
struct Projector {
    q: Matrix,
    r: Matrix,
}

impl Projector {
    fn new(a: &Matrix, what: &str) -> Result<Option<Self>> {
        if a.ncols() == 0 {
            return Ok(None);
        }
        check_condition(a, what)?;
        let qr: QR<f64, Dyn, Dyn> = a.clone().qr();
        Ok(Some(Self { q: qr.q(), r: qr.r() }))
    }

    /// `(AᵀA)⁻¹ Aᵀ Y`
    fn coefficients(&self, y: &Matrix) -> Matrix {
        let qty = self.q.transpose() * y;
        self.r
            .solve_upper_triangular(&qty)
            .expect("triangular factor of a full-rank block is invertible")
    }

    /// `Y − A (AᵀA)⁻¹ Aᵀ Y`
    fn residualize(&self, y: &Matrix) -> Matrix {
        y - &self.q * (self.q.transpose() * y)
    }
}

/// `I − W(WᵀW)⁻¹Wᵀ`, materialized. Meant for small `n`.
pub fn annihilator(w: &Matrix) -> Result<Matrix> {
    let n = w.nrows();
    match Projector::new(w, "controls")? {
        None => Ok(Matrix::identity(n, n)),
        Some(p) => Ok(Matrix::identity(n, n) - &p.q * p.q.transpose()),
    }
}

/// Quantities of the partialled regression reused by the bootstrap and the
/// rank estimators.
#[derive(Debug, Clone)]
pub struct Partialled {
    /// `M_W Z`, n×m.
    pub z_tilde: Matrix,
    /// `M_W X`, n×k. These are the first-stage residuals under `Π = 0`.
    pub x_tilde: Matrix,
    /// `(Zᵀ M_W Z)⁻¹ Zᵀ M_W`, m×n.
    pub solver: Matrix,
}

#[derive(Debug, Clone)]
pub struct FirstStageFit {
    pub pi_hat: Matrix,
    pub gamma_hat: Matrix,
    pub residuals: Matrix,
    pub fitted: Matrix,
    pub partialled: Partialled,
}

impl FirstStageFit {
    /// `Π̂* − Π̂` for perturbed residuals `û*`. Z and W are held fixed, so the
    /// fitted part of `X*` is reproduced exactly and only `û*` contributes.
    pub fn coefficient_shift(&self, perturbed: &Matrix) -> Matrix {
        &self.partialled.solver * perturbed
    }
}

pub fn fit_first_stage(d: &Dataset) -> Result<FirstStageFit> {
    let controls = Projector::new(&d.w, "controls")?;
    let partial = |y: &Matrix| match &controls {
        Some(p) => p.residualize(y),
        None => y.clone(),
    };
    let z_tilde = partial(&d.z);
    let x_tilde = partial(&d.x);

    let instruments = Projector::new(&z_tilde, "instruments after partialling out controls")?
        .expect("at least one instrument");
    let pi_hat = instruments.coefficients(&x_tilde);
    let solver = instruments
        .r
        .solve_upper_triangular(&instruments.q.transpose())
        .expect("full-rank triangular factor");

    let remainder = &d.x - &d.z * &pi_hat;
    let gamma_hat = match &controls {
        Some(p) => p.coefficients(&remainder),
        None => Matrix::zeros(0, d.k()),
    };
    let fitted = &d.z * &pi_hat + &d.w * &gamma_hat;
    let residuals = &d.x - &fitted;

    Ok(FirstStageFit {
        pi_hat,
        gamma_hat,
        residuals,
        fitted,
        partialled: Partialled {
            z_tilde,
            x_tilde,
            solver,
        },
    })
}
