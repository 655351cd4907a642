//! The iterated error-state Kalman update shared by the LiDAR and both visual
//! stages.
//!
//! Each iteration linearizes the measurement model at the current iterate
//! `x̌`, forms `P = 𝓗⁻¹ Σ 𝓗⁻ᵀ` from the propagated covariance `Σ`, and takes
//! the step
//!
//! ```text
//! K  = (HᵀR⁻¹H + P⁻¹)⁻¹ HᵀR⁻¹
//! δ  = −K ž − (I − KH) 𝓗⁻¹ (x̌ ⊟ x̂)
//! x̌ ← x̌ ⊞ δ
//! ```
//!
//! Measurement models hand back their contribution already reduced to normal
//! equations ([`NormalEquations`]), so the stacked `H` is never materialized.
//! With `S = HᵀR⁻¹H + P⁻¹` the step above is `δ = −S⁻¹(HᵀR⁻¹ž + P⁻¹𝓗⁻¹e)`
//! and the posterior covariance `(I − KH)P` is `S⁻¹`.

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{tangent_projection, ErrorState, FullState, StateMatrix, StateWithCov, STATE_DIM};

/// Information contributed by a batch of residual blocks:
/// `HᵀR⁻¹H`, `HᵀR⁻¹ž` and `žᵀR⁻¹ž`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub information: StateMatrix,
    pub gradient: ErrorState,
    pub chi2: f64,
    pub rows: usize,
    pub terms: usize,
}

impl Default for NormalEquations {
    fn default() -> Self {
        Self {
            information: StateMatrix::zeros(),
            gradient: ErrorState::zeros(),
            chi2: 0.0,
            rows: 0,
            terms: 0,
        }
    }
}

impl NormalEquations {
    /// Adds one residual block linearized as `0 ≈ ž + Hδ + n`, `n ~ N(0, R)`.
    ///
    /// Returns `false` (and adds nothing) when `R` is not positive definite.
    pub fn add_block<const D: usize>(
        &mut self,
        h: &SMatrix<f64, D, STATE_DIM>,
        z: &SVector<f64, D>,
        r: &SMatrix<f64, D, D>,
    ) -> bool {
        let Some(chol) = r.cholesky() else {
            return false;
        };
        let r_inv_h = chol.solve(h);
        let r_inv_z = chol.solve(z);
        self.information += h.transpose() * r_inv_h;
        self.gradient += h.transpose() * r_inv_z;
        self.chi2 += z.dot(&r_inv_z);
        self.rows += D;
        self.terms += 1;
        true
    }

    /// Scalar residual with variance `var` and Jacobian row `h`.
    pub fn add_scalar(&mut self, h: &SMatrix<f64, 1, STATE_DIM>, z: f64, var: f64) -> bool {
        if var <= 0.0 || !var.is_finite() {
            return false;
        }
        let w = 1.0 / var;
        // Rows are usually sparse (point-to-plane rows touch six columns).
        let mut nz = [0usize; STATE_DIM];
        let mut n = 0;
        for (i, v) in h.iter().enumerate() {
            if *v != 0.0 {
                nz[n] = i;
                n += 1;
            }
        }
        for &i in &nz[..n] {
            let hi = h[i] * w;
            for &j in &nz[..n] {
                self.information[(i, j)] += hi * h[j];
            }
            self.gradient[i] += hi * z;
        }
        self.chi2 += z * z * w;
        self.rows += 1;
        self.terms += 1;
        true
    }

    pub fn merge(mut self, other: &NormalEquations) -> Self {
        self.information += other.information;
        self.gradient += other.gradient;
        self.chi2 += other.chi2;
        self.rows += other.rows;
        self.terms += other.terms;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsikfConfig {
    pub max_iterations: usize,
    /// Convergence threshold on `‖δ‖`.
    pub epsilon: f64,
    /// Step halvings tried when a step increases the MAP cost.
    pub max_halvings: usize,
}

impl Default for EsikfConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            epsilon: 1e-6,
            max_halvings: 4,
        }
    }
}

/// Diagnostics of one iterated update.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UpdateReport {
    pub iterations: usize,
    pub converged: bool,
    /// No usable residual terms; the returned state is the start point.
    pub no_terms: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub terms: usize,
    pub halvings: usize,
    pub regularized: bool,
    /// The full (undamped) first step, for Gauss–Newton comparisons.
    #[serde(skip)]
    pub first_step: Option<ErrorState>,
}

/// Inverse of an SPD matrix by Cholesky, with the `1e-9·I` fallback.
fn spd_inverse(m: &StateMatrix, regularized: &mut bool) -> Result<StateMatrix> {
    if let Some(c) = m.cholesky() {
        return Ok(c.inverse());
    }
    let mut reg = 1e-9;
    for _ in 0..6 {
        let shifted = m + StateMatrix::identity() * reg;
        if let Some(c) = shifted.cholesky() {
            log::warn!("normal matrix not positive definite; regularized with {reg:e}·I");
            *regularized = true;
            return Ok(c.inverse());
        }
        reg *= 100.0;
    }
    Err(Error::NotPositiveDefinite)
}

/// MAP cost `‖x ⊟ x̂‖²_Σ + žᵀR⁻¹ž` for an evaluated linearization.
fn map_cost(x: &FullState, prior: &FullState, prior_info: &StateMatrix, ne: &NormalEquations) -> f64 {
    let e = x.boxminus(prior);
    e.dot(&(prior_info * e)) + ne.chi2
}

/// Runs the iterated update from linearization point `start` against the
/// prior `(prior.x, prior.cov)`.
///
/// `linearize` returns the normal equations of all valid residual terms at
/// the given state; it is called again after every step.
pub fn iterated_update<F>(
    prior: &StateWithCov,
    start: &FullState,
    config: &EsikfConfig,
    mut linearize: F,
) -> Result<(StateWithCov, UpdateReport)>
where
    F: FnMut(&FullState) -> NormalEquations,
{
    let mut report = UpdateReport::default();
    let prior_info = spd_inverse(&prior.cov, &mut report.regularized)?;
    let mut x = *start;
    let mut ne = linearize(&x);
    if ne.terms == 0 {
        report.no_terms = true;
        return Ok((StateWithCov::new(x, prior.cov, prior.t), report));
    }
    let mut cost = map_cost(&x, &prior.x, &prior_info, &ne);
    report.initial_cost = cost;

    for _ in 0..config.max_iterations.max(1) {
        report.iterations += 1;
        let e = x.boxminus(&prior.x);
        let proj = tangent_projection(&x, &prior.x);
        // P⁻¹ = 𝓗ᵀΣ⁻¹𝓗 and P⁻¹𝓗⁻¹e = 𝓗ᵀΣ⁻¹e for P = 𝓗⁻¹Σ𝓗⁻ᵀ.
        let p_inv = proj.transpose() * prior_info * proj;
        let s = ne.information + p_inv;
        let s_inv = spd_inverse(&s, &mut report.regularized)?;
        let step = -(s_inv * (ne.gradient + proj.transpose() * (prior_info * e)));
        if report.first_step.is_none() {
            report.first_step = Some(step);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for h in 0..=config.max_halvings {
            let candidate = x.boxplus(&(step * alpha));
            let cand_ne = linearize(&candidate);
            let cand_cost = map_cost(&candidate, &prior.x, &prior_info, &cand_ne);
            if cand_ne.terms > 0 && cand_cost <= cost * (1.0 + 1e-12) + 1e-12 {
                accepted = Some((candidate, cand_ne, cand_cost));
                break;
            }
            if h < config.max_halvings {
                report.halvings += 1;
                alpha *= 0.5;
            }
        }
        let Some((candidate, cand_ne, cand_cost)) = accepted else {
            // No descent direction left at this association.
            report.converged = step.norm() < config.epsilon;
            break;
        };
        x = candidate;
        ne = cand_ne;
        cost = cand_cost;
        if step.norm() * alpha < config.epsilon {
            report.converged = true;
            break;
        }
    }

    // Posterior (I − KH)P = S⁻¹ at the final linearization.
    let proj = tangent_projection(&x, &prior.x);
    let s = ne.information + proj.transpose() * prior_info * proj;
    let mut post = StateWithCov::new(x, spd_inverse(&s, &mut report.regularized)?, prior.t);
    post.symmetrize();
    report.final_cost = cost;
    report.terms = ne.terms;
    Ok((post, report))
}

/// Kalman gain in information form, `(HᵀR⁻¹H + P⁻¹)⁻¹HᵀR⁻¹`.
pub fn gain_information_form(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r_inv = r.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.inverse();
    let p_inv = p.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.inverse();
    let ht_rinv = h.transpose() * r_inv;
    let s = &ht_rinv * h + p_inv;
    let s_inv = s.cholesky().ok_or(Error::NotPositiveDefinite)?.inverse();
    Ok(s_inv * ht_rinv)
}

/// Kalman gain in covariance form, `PHᵀ(HPHᵀ + R)⁻¹`.
pub fn gain_covariance_form(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pht = p * h.transpose();
    let innov = h * &pht + r;
    let innov_inv = innov.cholesky().ok_or(Error::NotPositiveDefinite)?.inverse();
    Ok(pht * innov_inv)
}
