//! Robust (Huber-type) estimating equations for the linkage-corrected
//! mixed model, the star-REBLUP area predictor, sandwich covariances and a
//! conditional MSE estimator.
//!
//! Three coupled equation blocks are solved: bounded-influence GLS for the
//! fixed effects on standardized residuals `r* = U^-1/2 (y* - X* beta)`,
//! per-cell Fellner equations for the random effects with the penalty term
//! applied cell by cell (so the non-robust limit recovers the corrected
//! BLUP cell sums exactly), and trace-matched variance component equations
//! with the Huber second-moment constant. The solver alternates IRLS passes
//! for beta and the effects with one damped Newton step for the variance
//! components per outer iteration.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::data::{AreaAggregates, AreaPrediction, LinkedSample};
use crate::error::Error;
use crate::lmm::{cell_sigma, invert_spd};
use crate::normal::huber_psi_sq_moment;
use crate::Result;

/// Tuning for the robust fit.
#[derive(Debug, Clone)]
pub struct RobustConfig {
    /// Huber tuning constant.
    pub c: f64,
    pub max_iter: usize,
    /// Scaled sup-norm tolerance for the three equation blocks.
    pub tol: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            c: 1.345,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Huber influence function `psi(u) = u min(1, c/|u|)`.
pub fn huber_psi(u: f64, c: f64) -> f64 {
    if u.abs() <= c {
        u
    } else {
        c * u.signum()
    }
}

/// Derivative of the Huber influence function: the band indicator.
pub fn huber_psi_prime(u: f64, c: f64) -> f64 {
    if u.abs() < c {
        1.0
    } else {
        0.0
    }
}

/// IRLS weight `psi(u)/u`, with the analytic limit 1 at zero residuals.
pub fn psi_weight(u: f64, c: f64) -> f64 {
    if u.abs() < 1e-10 {
        1.0
    } else {
        huber_psi(u, c) / u
    }
}

/// A converged robust fit.
#[derive(Debug, Clone)]
pub struct RobustFit {
    pub beta: DVector<f64>,
    /// Predicted area effects (sums of per-cell solves).
    pub u: Vec<f64>,
    /// Per-cell random effect solves, aligned with the sample cells.
    pub u_cells: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    pub c: f64,
    /// `E[psi_c(R)^2]` for standard normal `R`.
    pub k_const: f64,
    /// Per-cell linkage variance diagonals at the fitted beta.
    pub v_diag: Vec<DVector<f64>>,
    /// Scaled sup-norms of the three equation blocks at the solution.
    pub eq_norms: [f64; 3],
    pub converged: bool,
    pub iterations: usize,
    pub boundary: bool,
}

/// Per-cell working state at fixed `(beta, delta)`.
struct RobustWork {
    /// Full cell covariance inverse.
    sigma_inv: Vec<DMatrix<f64>>,
    /// Diagonal of the cell covariance (the standardizing matrix U).
    u_diag: Vec<DVector<f64>>,
    /// Diagonal of `Sigma_seA = sigma2_e I + V`.
    s_diag: Vec<DVector<f64>>,
}

impl RobustWork {
    fn build(
        sample: &LinkedSample,
        sigma2_u: f64,
        sigma2_e: f64,
        v: &[DVector<f64>],
    ) -> Result<Self> {
        let mut sigma_inv = Vec::with_capacity(sample.cells.len());
        let mut u_diag = Vec::with_capacity(sample.cells.len());
        let mut s_diag = Vec::with_capacity(sample.cells.len());
        for (k, cell) in sample.cells.iter().enumerate() {
            let n = cell.n_sample();
            let sig = cell_sigma(n, sigma2_u, sigma2_e, &v[k]);
            u_diag.push(sig.diagonal());
            s_diag.push(v[k].map(|vj| sigma2_e + vj));
            sigma_inv.push(invert_spd(&sig, "cell covariance")?);
        }
        Ok(Self {
            sigma_inv,
            u_diag,
            s_diag,
        })
    }
}

fn cell_residual(sample: &LinkedSample, cell_idx: usize, beta: &DVector<f64>) -> DVector<f64> {
    let cell = &sample.cells[cell_idx];
    sample.cell_y_star(cell) - sample.cell_x_star(cell) * beta
}

/// One full IRLS solve of the fixed-effect equation at fixed covariance.
fn solve_beta(
    sample: &LinkedSample,
    work: &RobustWork,
    beta0: &DVector<f64>,
    c: f64,
) -> Result<DVector<f64>> {
    let p = sample.p();
    let mut beta = beta0.clone();
    for _ in 0..100 {
        let mut m = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for (k, cell) in sample.cells.iter().enumerate() {
            let xs = sample.cell_x_star(cell);
            let ys = sample.cell_y_star(cell);
            let r = &ys - &xs * &beta;
            let mut w1 = DVector::zeros(cell.n_sample());
            for j in 0..cell.n_sample() {
                w1[j] = psi_weight(r[j] / work.u_diag[k][j].sqrt(), c);
            }
            // X*' S^-1 W1 X*, with W1 commuting through the diagonal U.
            let six = &work.sigma_inv[k] * &xs;
            let mut xw = xs.clone();
            let mut yw = ys.clone();
            for j in 0..cell.n_sample() {
                for col in 0..p {
                    xw[(j, col)] *= w1[j];
                }
                yw[j] *= w1[j];
            }
            m += six.transpose() * &xw;
            rhs += six.transpose() * &yw;
        }
        let new = m
            .lu()
            .solve(&rhs)
            .ok_or(Error::Singular { what: "robust GLS system" })?;
        let change = (&new - &beta).amax() / (1.0 + beta.amax());
        beta = new;
        if change < 1e-12 {
            break;
        }
    }
    Ok(beta)
}

/// Solve the single-cell Fellner equation for its scalar random effect.
fn solve_cell_u(r: &DVector<f64>, s_diag: &DVector<f64>, sigma2_u: f64, c: f64) -> f64 {
    if sigma2_u <= 0.0 {
        return 0.0;
    }
    let sigma_u = sigma2_u.sqrt();
    let mut u = 0.0;
    for _ in 0..200 {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..r.len() {
            let s = s_diag[j];
            let t = (r[j] - u) / s.sqrt();
            let w2 = psi_weight(t, c);
            num += w2 * r[j] / s;
            den += w2 / s;
        }
        let w3 = psi_weight(u / sigma_u, c);
        den += w3 / sigma2_u;
        let new = num / den;
        if (new - u).abs() < 1e-12 * (1.0 + u.abs()) {
            return new;
        }
        u = new;
    }
    u
}

/// Value of the variance component equation block at `(beta, delta)`:
/// for each component, the psi-quadratic form minus its trace match.
fn delta_equation(
    sample: &LinkedSample,
    sigma2_u: f64,
    sigma2_e: f64,
    v: &[DVector<f64>],
    beta: &DVector<f64>,
    c: f64,
    k_const: f64,
) -> Result<(Vector2<f64>, Vector2<f64>)> {
    let mut f_u = 0.0;
    let mut f_e = 0.0;
    let mut trace_u = 0.0;
    let mut trace_e = 0.0;
    for (k, cell) in sample.cells.iter().enumerate() {
        let n = cell.n_sample();
        let sig = cell_sigma(n, sigma2_u, sigma2_e, &v[k]);
        let si = invert_spd(&sig, "cell covariance")?;
        let r = cell_residual(sample, k, beta);
        let mut q = DVector::zeros(n);
        for j in 0..n {
            let ujj = sig[(j, j)];
            q[j] = ujj.sqrt() * huber_psi(r[j] / ujj.sqrt(), c);
        }
        let siq = &si * &q;
        let one_siq: f64 = siq.sum();
        let si1 = si.column_sum(); // row sums of symmetric inverse
        f_u += one_siq * one_siq - k_const * si1.sum();
        f_e += siq.dot(&siq) - k_const * si.trace();
        trace_u += k_const * si1.sum();
        trace_e += k_const * si.trace();
    }
    Ok((Vector2::new(f_u, f_e), Vector2::new(trace_u, trace_e)))
}

/// One Gauss-Seidel sweep over the variance component equations; each
/// component is solved by bracketed bisection of its own equation with the
/// other held fixed.
///
/// The equations decay to zero from below as a component grows without
/// bound (both the psi-quadratic and the trace side vanish), which makes a
/// Newton step unreliable far from the root: it happily walks toward the
/// degenerate root at infinity. A sign-change bracket cannot.
fn delta_sweep(
    sample: &LinkedSample,
    sigma2_u: f64,
    sigma2_e: f64,
    v: &[DVector<f64>],
    beta: &DVector<f64>,
    c: f64,
    k_const: f64,
) -> Result<(f64, f64)> {
    let new_e = solve_delta_component(sample, 1, sigma2_u, sigma2_e, v, beta, c, k_const)?;
    let new_u = solve_delta_component(sample, 0, sigma2_u, new_e, v, beta, c, k_const)?;
    Ok((new_u, new_e))
}

fn solve_delta_component(
    sample: &LinkedSample,
    comp: usize,
    sigma2_u: f64,
    sigma2_e: f64,
    v: &[DVector<f64>],
    beta: &DVector<f64>,
    c: f64,
    k_const: f64,
) -> Result<f64> {
    let floor = if comp == 0 { 0.0 } else { 1e-8 };
    let eval = |x: f64| -> Result<f64> {
        let (su, se) = if comp == 0 {
            (x, sigma2_e)
        } else {
            (sigma2_u, x)
        };
        let (f, _) = delta_equation(sample, su, se, v, beta, c, k_const)?;
        Ok(f[comp])
    };

    let x0 = (if comp == 0 { sigma2_u } else { sigma2_e }).max(floor);
    let f0 = eval(x0)?;
    if f0 == 0.0 {
        return Ok(x0);
    }

    // Bracket a sign change: positive equation means the component is too
    // small, negative too large (or already past the decaying tail).
    let (mut lo, mut hi);
    if f0 > 0.0 {
        lo = x0;
        hi = x0.max(1e-6) * 2.0;
        let mut found = false;
        for _ in 0..80 {
            if eval(hi)? <= 0.0 {
                found = true;
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        if !found {
            return Ok(x0);
        }
    } else {
        hi = x0;
        lo = (x0 * 0.5).max(floor);
        loop {
            if eval(lo)? >= 0.0 {
                break;
            }
            if lo <= floor {
                // Boundary pin: the equation points outward everywhere.
                return Ok(floor);
            }
            hi = lo;
            lo = if lo * 0.5 > floor + 1e-12 { lo * 0.5 } else { floor };
        }
    }

    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + hi) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fit the robust linkage-corrected mixed model.
pub fn fit_reblup_star(sample: &LinkedSample, config: &RobustConfig) -> Result<RobustFit> {
    fit_reblup_star_with_init(sample, config, None)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Outlier-resistant starting values: Huber M-regression with a MAD scale
/// for beta and the residual variance, and the between-area spread of the
/// area median residuals for the effect variance. Starting here keeps the
/// joint equations out of the contaminated fixed point that a non-robust
/// initialization can fall into under gross outliers.
fn robust_init(sample: &LinkedSample, c: f64) -> Result<(DVector<f64>, f64, f64)> {
    let p = sample.p();
    let xtx = sample.x_star.transpose() * &sample.x_star;
    let rhs = sample.x_star.transpose() * &sample.y_star;
    let mut beta = invert_spd(&xtx, "OLS normal equations")? * rhs;

    let mut scale = 1.0;
    for _ in 0..30 {
        let resid = &sample.y_star - &sample.x_star * &beta;
        let mut abs: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
        scale = (median(&mut abs) / 0.6745).max(1e-6);
        let mut m = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        for j in 0..sample.n() {
            let w = psi_weight(resid[j] / scale, c);
            let row = sample.x_star.row(j);
            for a in 0..p {
                for bb in 0..p {
                    m[(a, bb)] += w * row[a] * row[bb];
                }
                b[a] += w * row[a] * sample.y_star[j];
            }
        }
        let new = m
            .lu()
            .solve(&b)
            .ok_or(Error::Singular { what: "robust init system" })?;
        let change = (&new - &beta).amax() / (1.0 + beta.amax());
        beta = new;
        if change < 1e-10 {
            break;
        }
    }

    let sigma2_e = (scale * scale).max(1e-8);
    // Between-area spread of area median residuals, noise corrected.
    let resid = &sample.y_star - &sample.x_star * &beta;
    let d = sample.n_areas();
    let mut medians = Vec::with_capacity(d);
    let mut avg_ni = 0.0;
    for list in &sample.area_cells {
        let mut vals: Vec<f64> = list
            .iter()
            .flat_map(|&k| sample.cells[k].rows.iter().map(|&r| resid[r]))
            .collect();
        avg_ni += vals.len() as f64;
        medians.push(median(&mut vals));
    }
    avg_ni /= d as f64;
    let mean_med = medians.iter().sum::<f64>() / d as f64;
    let var_med = if d > 1 {
        medians.iter().map(|m| (m - mean_med).powi(2)).sum::<f64>() / (d as f64 - 1.0)
    } else {
        0.0
    };
    // Median of n values carries roughly (pi/2) sigma^2 / n sampling noise.
    let sigma2_u = (var_med - 1.571 * sigma2_e / avg_ni).max(0.0);
    Ok((beta, sigma2_u, sigma2_e))
}

/// As [`fit_reblup_star`], but starting from supplied `(beta, sigma2_u,
/// sigma2_e)` values, typically a previously computed non-robust fit.
pub fn fit_reblup_star_with_init(
    sample: &LinkedSample,
    config: &RobustConfig,
    init: Option<(&DVector<f64>, f64, f64)>,
) -> Result<RobustFit> {
    if config.c <= 0.0 {
        return Err(Error::InvalidInput("Huber constant must be positive".into()));
    }
    let k_const = huber_psi_sq_moment(config.c);

    let (mut beta, mut sigma2_u, mut sigma2_e) = match init {
        Some((b, su, se)) => (b.clone(), su, se),
        None => robust_init(sample, config.c)?,
    };
    sigma2_u = sigma2_u.max(0.0);
    sigma2_e = sigma2_e.max(1e-8);

    let mut v = sample.linkage_variances(&(&sample.x * &beta));
    let mut u_cells = vec![0.0; sample.cells.len()];
    let mut eq_norms = [f64::INFINITY; 3];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=config.max_iter {
        iterations = iter;
        let work = RobustWork::build(sample, sigma2_u, sigma2_e, &v)?;
        beta = solve_beta(sample, &work, &beta, config.c)?;
        v = sample.linkage_variances(&(&sample.x * &beta));
        let work = RobustWork::build(sample, sigma2_u, sigma2_e, &v)?;

        for (k, _) in sample.cells.iter().enumerate() {
            let r = cell_residual(sample, k, &beta);
            u_cells[k] = solve_cell_u(&r, &work.s_diag[k], sigma2_u, config.c);
        }

        let (nu, ne) = delta_sweep(
            sample, sigma2_u, sigma2_e, &v, &beta, config.c, k_const,
        )?;
        sigma2_u = nu;
        sigma2_e = ne;

        // Certificates at the common post-update state.
        let work = RobustWork::build(sample, sigma2_u, sigma2_e, &v)?;
        eq_norms = equation_norms(
            sample, &work, &beta, &u_cells, sigma2_u, sigma2_e, &v, config.c, k_const,
        )?;
        if eq_norms.iter().all(|&x| x < config.tol) {
            converged = true;
            break;
        }
    }

    if !converged {
        return Err(Error::NonConvergence {
            what: "robust estimating equations",
            iterations,
            norms: eq_norms.to_vec(),
        });
    }

    // Final refresh so beta, the effects and the certificates are all
    // evaluated at the final variance components.
    {
        let work = RobustWork::build(sample, sigma2_u, sigma2_e, &v)?;
        beta = solve_beta(sample, &work, &beta, config.c)?;
        v = sample.linkage_variances(&(&sample.x * &beta));
        let work = RobustWork::build(sample, sigma2_u, sigma2_e, &v)?;
        for (k, _) in sample.cells.iter().enumerate() {
            let r = cell_residual(sample, k, &beta);
            u_cells[k] = solve_cell_u(&r, &work.s_diag[k], sigma2_u, config.c);
        }
        eq_norms = equation_norms(
            sample, &work, &beta, &u_cells, sigma2_u, sigma2_e, &v, config.c, k_const,
        )?;
    }

    let mut u = vec![0.0; sample.n_areas()];
    for (k, cell) in sample.cells.iter().enumerate() {
        u[cell.area] += u_cells[k];
    }
    Ok(RobustFit {
        beta,
        u,
        u_cells,
        sigma2_u,
        sigma2_e,
        c: config.c,
        k_const,
        v_diag: v,
        eq_norms,
        converged,
        iterations,
        boundary: sigma2_u == 0.0,
    })
}

/// Scaled sup-norms of the three estimating equation blocks.
#[allow(clippy::too_many_arguments)]
fn equation_norms(
    sample: &LinkedSample,
    work: &RobustWork,
    beta: &DVector<f64>,
    u_cells: &[f64],
    sigma2_u: f64,
    sigma2_e: f64,
    v: &[DVector<f64>],
    c: f64,
    k_const: f64,
) -> Result<[f64; 3]> {
    let p = sample.p();
    // Fixed effects block.
    let mut eq1 = DVector::zeros(p);
    for (k, cell) in sample.cells.iter().enumerate() {
        let xs = sample.cell_x_star(cell);
        let r = cell_residual(sample, k, beta);
        let mut q = DVector::zeros(cell.n_sample());
        for j in 0..cell.n_sample() {
            let su = work.u_diag[k][j].sqrt();
            q[j] = su * huber_psi(r[j] / su, c);
        }
        eq1 += xs.transpose() * (&work.sigma_inv[k] * q);
    }
    let n1 = eq1.amax() / (1.0 + beta.amax());

    // Random effect block, cell by cell; with sigma2_u pinned at zero the
    // effects are identically zero and the block is exempt.
    let mut n2 = 0.0f64;
    let sigma_u = sigma2_u.max(1e-300).sqrt();
    for (k, _) in sample.cells.iter().enumerate() {
        if sigma2_u <= 0.0 {
            break;
        }
        let r = cell_residual(sample, k, beta);
        let u = u_cells[k];
        let mut g = 0.0;
        for j in 0..r.len() {
            let s = work.s_diag[k][j];
            g += huber_psi((r[j] - u) / s.sqrt(), c) / s.sqrt();
        }
        if sigma2_u > 0.0 {
            g -= huber_psi(u / sigma_u, c) / sigma_u;
        }
        let scale = 1.0 + u_cells.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        n2 = n2.max(g.abs() / scale);
    }

    // Variance component block, relative to its trace side. A component
    // pinned at its bound with the equation pointing outward is a boundary
    // solution and is exempt.
    let (f3, tr3) = delta_equation(sample, sigma2_u, sigma2_e, v, beta, c, k_const)?;
    let pinned_u = sigma2_u <= 0.0 && f3[0] < 0.0;
    let pinned_e = sigma2_e <= 1e-8 && f3[1] < 0.0;
    let n3u = if pinned_u {
        0.0
    } else {
        f3[0].abs() / tr3[0].max(1e-300)
    };
    let n3e = if pinned_e {
        0.0
    } else {
        f3[1].abs() / tr3[1].max(1e-300)
    };
    let n3 = n3u.max(n3e);

    Ok([n1, n2, n3])
}

/// Robust EBLUP of the area means using the corrected non-sampled design
/// means and the robust area effects.
pub fn predict_means_reblup_star(
    fit: &RobustFit,
    sample: &LinkedSample,
    aggregates: &[AreaAggregates],
) -> Result<Vec<AreaPrediction>> {
    if aggregates.len() != sample.n_areas() {
        return Err(Error::DimensionMismatch {
            what: "area aggregates",
            expected: sample.n_areas(),
            got: aggregates.len(),
        });
    }
    Ok(aggregates
        .iter()
        .enumerate()
        .map(|(i, agg)| {
            let remainder = agg.n_pop - agg.n_sample as f64;
            let synthetic = agg.xbar_nonsampled_star.dot(&fit.beta) + fit.u[i];
            let point =
                (agg.n_sample as f64 * agg.ybar_sample_star + remainder * synthetic) / agg.n_pop;
            AreaPrediction {
                area_id: sample.area_ids[i].clone(),
                point,
                mse: None,
                components: None,
            }
        })
        .collect())
}

/// Sandwich covariance of the stacked `(beta, u_1..u_D)` solution.
#[derive(Debug, Clone)]
pub struct SandwichCov {
    /// `(p + D) x (p + D)`, beta block first, symmetrized and projected to
    /// the PSD cone.
    pub cov: DMatrix<f64>,
    /// Smallest eigenvalue before projection.
    pub min_eigenvalue: f64,
    /// Maximum asymmetry `|M - M'|` before symmetrization.
    pub max_asymmetry: f64,
    pub clamped: bool,
}

/// Assemble the sandwich covariance from the equation Jacobian (with band
/// indicator matrices) and pooled psi cross-moment meat blocks.
pub fn sandwich_cov(fit: &RobustFit, sample: &LinkedSample) -> Result<SandwichCov> {
    let p = sample.p();
    let d = sample.n_areas();
    let dim = p + d;
    let c = fit.c;
    let work = RobustWork::build(sample, fit.sigma2_u, fit.sigma2_e, &fit.v_diag)?;

    let mut bread: DMatrix<f64> = DMatrix::zeros(dim, dim);
    let mut meat: DMatrix<f64> = DMatrix::zeros(dim, dim);

    // Pooled psi moments over the whole sample.
    let n = sample.n() as f64;
    let scale = 1.0 / (n - p as f64);
    let mut kappa_r = 0.0;
    let mut kappa_t = 0.0;
    let mut kappa_rt = 0.0;
    let sigma_u = fit.sigma2_u.max(1e-300).sqrt();
    for (k, cell) in sample.cells.iter().enumerate() {
        let r = cell_residual(sample, k, &fit.beta);
        for j in 0..cell.n_sample() {
            let ru = r[j] / work.u_diag[k][j].sqrt();
            let t = (r[j] - fit.u[cell.area]) / work.s_diag[k][j].sqrt();
            kappa_r += huber_psi(ru, c).powi(2);
            kappa_t += huber_psi(t, c).powi(2);
            kappa_rt += huber_psi(ru, c) * huber_psi(t, c);
        }
    }
    kappa_r *= scale;
    kappa_t *= scale;
    kappa_rt *= scale;

    for (k, cell) in sample.cells.iter().enumerate() {
        let xs = sample.cell_x_star(cell);
        let si = &work.sigma_inv[k];
        let r = cell_residual(sample, k, &fit.beta);
        let nq = cell.n_sample();
        let area_col = p + cell.area;

        // Band indicators at the fit.
        let mut rind = DVector::zeros(nq);
        let mut tind = DVector::zeros(nq);
        for j in 0..nq {
            let ru = r[j] / work.u_diag[k][j].sqrt();
            let t = (r[j] - fit.u[cell.area]) / work.s_diag[k][j].sqrt();
            rind[j] = huber_psi_prime(ru, c);
            tind[j] = huber_psi_prime(t, c);
        }
        let cind = if fit.sigma2_u > 0.0 {
            huber_psi_prime(fit.u[cell.area] / sigma_u, c)
        } else {
            0.0
        };

        // Bread: beta-beta block -X*' Sigma^-1 R* X*.
        let mut xr = xs.clone();
        for j in 0..nq {
            for col in 0..p {
                xr[(j, col)] *= rind[j];
            }
        }
        let block_bb = xs.transpose() * (si * &xr);
        for a in 0..p {
            for b in 0..p {
                bread[(a, b)] -= block_bb[(a, b)];
            }
        }

        // Bread: u rows. dH_u/du = -(1' diag(T*/s) 1 + C*/sigma2_u),
        // dH_u/dbeta = -1' diag(T*/s) X*.
        let mut tu = 0.0;
        let mut tb: DVector<f64> = DVector::zeros(p);
        for j in 0..nq {
            let w = tind[j] / work.s_diag[k][j];
            tu += w;
            for col in 0..p {
                tb[col] += w * xs[(j, col)];
            }
        }
        bread[(area_col, area_col)] -= tu;
        if fit.sigma2_u > 0.0 {
            bread[(area_col, area_col)] -= cind / fit.sigma2_u;
        }
        for col in 0..p {
            bread[(area_col, col)] -= tb[col];
        }

        // Meat structural blocks.
        let six = si * &xs;
        let mut usix = six.clone(); // Sigma^-1 U Sigma^-1 X* via diagonal U
        for j in 0..nq {
            let u_jj = work.u_diag[k][j];
            for col in 0..p {
                usix[(j, col)] = 0.0;
                for l in 0..nq {
                    usix[(j, col)] += si[(j, l)] * work.u_diag[k][l] * six[(l, col)];
                }
            }
            let _ = u_jj;
        }
        let block_meat_bb = xs.transpose() * &usix;
        for a in 0..p {
            for b in 0..p {
                meat[(a, b)] += kappa_r * block_meat_bb[(a, b)];
            }
        }

        // u-u: Z' S^-1 Z = sum 1/s_j.
        let zz: f64 = (0..nq).map(|j| 1.0 / work.s_diag[k][j]).sum();
        meat[(area_col, area_col)] += kappa_t * zz;

        // cross: X*' Sigma^-1 U^1/2 S^-1/2 Z per cell.
        let mut cross: DVector<f64> = DVector::zeros(p);
        for j in 0..nq {
            let w = work.u_diag[k][j].sqrt() / work.s_diag[k][j].sqrt();
            for col in 0..p {
                cross[col] += six[(j, col)] * w;
            }
        }
        for col in 0..p {
            meat[(col, area_col)] += kappa_rt * cross[col];
            meat[(area_col, col)] += kappa_rt * cross[col];
        }
    }

    let bread_inv = bread
        .clone()
        .try_inverse()
        .unwrap_or_else(|| bread.clone().pseudo_inverse(1e-12).unwrap());
    let raw: DMatrix<f64> = &bread_inv * &meat * bread_inv.transpose();
    let max_asymmetry = (&raw - raw.transpose()).abs().max();
    let sym = (&raw + raw.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let min_eigenvalue = eig.eigenvalues.min();
    let clamped = min_eigenvalue < 0.0;
    let cov = if clamped {
        let mut rebuilt = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let ev = eig.eigenvalues[j].max(0.0);
            let v = eig.eigenvectors.column(j);
            rebuilt += v * v.transpose() * ev;
        }
        rebuilt
    } else {
        sym
    };
    Ok(SandwichCov {
        cov,
        min_eigenvalue,
        max_asymmetry,
        clamped,
    })
}

/// Sandwich covariance of the variance component estimates: finite
/// difference Jacobian of the component equations as bread, empirical
/// cross-products of per-cell equation contributions as meat.
pub fn v_delta_robust(fit: &RobustFit, sample: &LinkedSample) -> Result<Matrix2<f64>> {
    let c = fit.c;
    let k_const = fit.k_const;
    let v = &fit.v_diag;

    let cell_contrib = |s2u: f64, s2e: f64| -> Result<Vec<Vector2<f64>>> {
        let mut out = Vec::with_capacity(sample.cells.len());
        for (k, cell) in sample.cells.iter().enumerate() {
            let n = cell.n_sample();
            let sig = cell_sigma(n, s2u, s2e, &v[k]);
            let si = invert_spd(&sig, "cell covariance")?;
            let r = cell_residual(sample, k, &fit.beta);
            let mut q = DVector::zeros(n);
            for j in 0..n {
                let ujj = sig[(j, j)];
                q[j] = ujj.sqrt() * huber_psi(r[j] / ujj.sqrt(), c);
            }
            let siq = &si * &q;
            let one_siq: f64 = siq.sum();
            let si1 = si.column_sum();
            out.push(Vector2::new(
                one_siq * one_siq - k_const * si1.sum(),
                siq.dot(&siq) - k_const * si.trace(),
            ));
        }
        Ok(out)
    };

    let total = |s2u: f64, s2e: f64| -> Result<Vector2<f64>> {
        Ok(cell_contrib(s2u, s2e)?
            .into_iter()
            .fold(Vector2::zeros(), |a, b| a + b))
    };

    let h_u = 1e-5 * (1.0 + fit.sigma2_u.abs());
    let h_e = 1e-5 * (1.0 + fit.sigma2_e.abs());
    let mut jac = Matrix2::zeros();
    let up = total(fit.sigma2_u + h_u, fit.sigma2_e)?;
    let um = total((fit.sigma2_u - h_u).max(0.0), fit.sigma2_e)?;
    jac.set_column(0, &((up - um) / (h_u + fit.sigma2_u.min(h_u))));
    let ep = total(fit.sigma2_u, fit.sigma2_e + h_e)?;
    let em = total(fit.sigma2_u, fit.sigma2_e - h_e)?;
    jac.set_column(1, &((ep - em) / (2.0 * h_e)));

    let contribs = cell_contrib(fit.sigma2_u, fit.sigma2_e)?;
    let mut meat = Matrix2::zeros();
    for phi in contribs {
        meat += phi * phi.transpose();
    }
    let jinv = jac.try_inverse().unwrap_or_else(Matrix2::zeros);
    let raw = jinv * meat * jinv.transpose();
    let sym = (raw + raw.transpose()) * 0.5;
    // Project to PSD.
    let eig = sym.symmetric_eigen();
    let mut out = Matrix2::zeros();
    for j in 0..2 {
        let ev = eig.eigenvalues[j].max(0.0);
        let vct = eig.eigenvectors.column(j);
        out += vct * vct.transpose() * ev;
    }
    Ok(out)
}

/// Conditional MSE decomposition for the star-REBLUP.
#[derive(Debug, Clone)]
pub struct RobustMse {
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub bias2: f64,
    pub total: f64,
    /// True when a component was clamped up to zero.
    pub clamped: bool,
}

/// Conditional MSE estimator `h1 + h2 + h3 + bias^2` for every area.
pub fn mse_reblup_star(
    fit: &RobustFit,
    sample: &LinkedSample,
    aggregates: &[AreaAggregates],
) -> Result<Vec<RobustMse>> {
    let p = sample.p();
    let d = sample.n_areas();
    let sandwich = sandwich_cov(fit, sample)?;
    let v_delta = v_delta_robust(fit, sample)?;
    let work = RobustWork::build(sample, fit.sigma2_u, fit.sigma2_e, &fit.v_diag)?;

    // Pooled squared residuals for h2.
    let mut pooled = 0.0;
    for (k, cell) in sample.cells.iter().enumerate() {
        let r = cell_residual(sample, k, &fit.beta);
        for j in 0..cell.n_sample() {
            pooled += (r[j] - fit.u[cell.area]).powi(2);
        }
    }
    let n = sample.n() as f64;

    let bias = pseudolinear_bias(fit, sample, aggregates, &work)?;

    let mut out = Vec::with_capacity(d);
    for (i, agg) in aggregates.iter().enumerate() {
        let fpc = (1.0 - agg.n_sample as f64 / agg.n_pop).powi(2);
        let remainder = agg.n_pop - agg.n_sample as f64;

        // h1: quadratic form of (xbar*_r | e_i) in the sandwich covariance.
        let mut sel = DVector::zeros(p + d);
        for col in 0..p {
            sel[col] = agg.xbar_nonsampled_star[col];
        }
        sel[p + i] = 1.0;
        let mut h1 = fpc * (sel.transpose() * &sandwich.cov * &sel)[(0, 0)];

        // h2: pooled residual variance of the non-sampled mean.
        let mut h2 = if remainder > 0.0 {
            fpc * pooled / (remainder * (n - 1.0))
        } else {
            0.0
        };

        // h3: variance component uncertainty through the per-cell solve
        // operators.
        let mut h3 = 0.0;
        if remainder > 0.0 {
            let zfrac = (remainder / agg.n_pop).powi(2);
            for &k in &sample.area_cells[i] {
                let omega = cell_omega(fit, sample, &work, k, &v_delta)?;
                h3 += zfrac * omega;
            }
        }

        let mut clamped = false;
        for hx in [&mut h1, &mut h2, &mut h3] {
            if *hx < 0.0 {
                if *hx < -1e-10 {
                    clamped = true;
                }
                *hx = 0.0;
            }
        }
        let bias2 = bias[i] * bias[i];
        out.push(RobustMse {
            h1,
            h2,
            h3,
            bias2,
            total: h1 + h2 + h3 + bias2,
            clamped,
        });
    }
    Ok(out)
}

/// `sum_{k,g} V(delta)_{kg} dB_k M dB_g'` for one cell, with
/// `M = u_i^2 11' + diag(s)` and `dB` the finite-difference derivatives of
/// the per-cell solve operator in the variance components.
fn cell_omega(
    fit: &RobustFit,
    sample: &LinkedSample,
    work: &RobustWork,
    cell_idx: usize,
    v_delta: &Matrix2<f64>,
) -> Result<f64> {
    let cell = &sample.cells[cell_idx];
    let nq = cell.n_sample();
    let r = cell_residual(sample, cell_idx, &fit.beta);
    let u_area = fit.u[cell.area];
    let c = fit.c;
    let vk = &fit.v_diag[cell_idx];

    // B row for given variance components, with the robust weights
    // re-evaluated at the perturbed standardization.
    let b_row = |s2u: f64, s2e: f64| -> DVector<f64> {
        if s2u <= 0.0 {
            return DVector::zeros(nq);
        }
        let sigma_u = s2u.sqrt();
        let mut den = psi_weight(u_area / sigma_u, c) / s2u;
        let mut row = DVector::zeros(nq);
        for j in 0..nq {
            let s = s2e + vk[j];
            let t = (r[j] - u_area) / s.sqrt();
            let w2 = psi_weight(t, c);
            row[j] = w2 / s;
            den += w2 / s;
        }
        row / den
    };

    let h_u = 1e-5 * (1.0 + fit.sigma2_u.abs());
    let h_e = 1e-5 * (1.0 + fit.sigma2_e.abs());
    let db_u = (b_row(fit.sigma2_u + h_u, fit.sigma2_e)
        - b_row((fit.sigma2_u - h_u).max(0.0), fit.sigma2_e))
        / (h_u + fit.sigma2_u.min(h_u));
    let db_e =
        (b_row(fit.sigma2_u, fit.sigma2_e + h_e) - b_row(fit.sigma2_u, fit.sigma2_e - h_e))
            / (2.0 * h_e);

    // M = u^2 11' + diag(s).
    let m_quad = |a: &DVector<f64>, b: &DVector<f64>| -> f64 {
        let sa: f64 = a.sum();
        let sb: f64 = b.sum();
        let mut diag = 0.0;
        for j in 0..nq {
            diag += a[j] * work.s_diag[cell_idx][j] * b[j];
        }
        u_area * u_area * sa * sb + diag
    };

    Ok(v_delta[(0, 0)] * m_quad(&db_u, &db_u)
        + v_delta[(1, 1)] * m_quad(&db_e, &db_e)
        + v_delta[(0, 1)] * (m_quad(&db_u, &db_e) + m_quad(&db_e, &db_u)))
}

/// Squared-bias input: pseudolinear weights of the predictor applied to the
/// fitted conditional means, against the area census mean of those means.
fn pseudolinear_bias(
    fit: &RobustFit,
    sample: &LinkedSample,
    aggregates: &[AreaAggregates],
    work: &RobustWork,
) -> Result<Vec<f64>> {
    let p = sample.p();
    let n = sample.n();
    let d = sample.n_areas();
    let c = fit.c;

    // beta as a linear map of y: A = (sum X*'S^-1 W1 X*)^-1 X*'S^-1 W1 at
    // the converged weights.
    let mut m = DMatrix::zeros(p, p);
    let mut xw_all = DMatrix::zeros(p, n);
    for (k, cell) in sample.cells.iter().enumerate() {
        let xs = sample.cell_x_star(cell);
        let r = cell_residual(sample, k, &fit.beta);
        let si = &work.sigma_inv[k];
        let six = si * &xs;
        let mut w1 = DVector::zeros(cell.n_sample());
        for j in 0..cell.n_sample() {
            w1[j] = psi_weight(r[j] / work.u_diag[k][j].sqrt(), c);
        }
        let mut xw = xs.clone();
        for j in 0..cell.n_sample() {
            for col in 0..p {
                xw[(j, col)] *= w1[j];
            }
        }
        m += six.transpose() * &xw;
        // columns of X*' W1 Sigma^-1 land on this cell's sample positions
        let wsix = six.transpose(); // p x nq, equals X*' Sigma^-1
        for (local, &row) in cell.rows.iter().enumerate() {
            for a in 0..p {
                let mut acc = 0.0;
                for l in 0..cell.n_sample() {
                    acc += wsix[(a, l)] * 0.0; // placeholder, replaced below
                }
                let _ = acc;
                // X*' Sigma^-1 W1: scale the local column by w1.
                xw_all[(a, row)] += wsix[(a, local)] * w1[local];
            }
        }
    }
    let amat = m
        .lu()
        .solve(&xw_all)
        .ok_or(Error::Singular { what: "pseudolinear beta map" })?; // p x n

    // u_i as a linear map of y at converged weights:
    // u_i row = sum_q B_q (E_q - X*_q A).
    let mut urows: DMatrix<f64> = DMatrix::zeros(d, n);
    for (k, cell) in sample.cells.iter().enumerate() {
        if fit.sigma2_u <= 0.0 {
            break;
        }
        let nq = cell.n_sample();
        let r = cell_residual(sample, k, &fit.beta);
        let sigma_u = fit.sigma2_u.sqrt();
        let mut den = psi_weight(u_cell_weight_ref(fit, k) / sigma_u, c) / fit.sigma2_u;
        let mut brow = DVector::zeros(nq);
        for j in 0..nq {
            let s = work.s_diag[k][j];
            let t = (r[j] - fit.u_cells[k]) / s.sqrt();
            let w2 = psi_weight(t, c);
            brow[j] = w2 / s;
            den += w2 / s;
        }
        brow /= den;
        // E_q part.
        for (local, &row) in cell.rows.iter().enumerate() {
            urows[(cell.area, row)] += brow[local];
        }
        // -B_q X*_q A part.
        let xs = sample.cell_x_star(cell);
        let bx = xs.transpose() * &brow; // p-vector
        for col in 0..n {
            let mut acc = 0.0;
            for a in 0..p {
                acc += bx[a] * amat[(a, col)];
            }
            urows[(cell.area, col)] -= acc;
        }
    }

    // Conditional means mu_j = x*_j' beta + u_area(j) for sampled units.
    let mut mu = DVector::zeros(n);
    for cell in &sample.cells {
        for &row in &cell.rows {
            let mut acc = fit.u[cell.area];
            for a in 0..p {
                acc += sample.x_star[(row, a)] * fit.beta[a];
            }
            mu[row] = acc;
        }
    }

    let mut bias = vec![0.0; d];
    for (i, agg) in aggregates.iter().enumerate() {
        let n_i = agg.n_sample as f64;
        let n_pop = agg.n_pop;
        let remainder = n_pop - n_i;
        // w_i' = N^-1 [ 1_si' + (N-n)(xbar*_r' A + u_i row) ].
        let mut w = DVector::zeros(n);
        for &k in &sample.area_cells[i] {
            for &row in &sample.cells[k].rows {
                w[row] += 1.0;
            }
        }
        if remainder > 0.0 {
            for col in 0..n {
                let mut acc = 0.0;
                for a in 0..p {
                    acc += agg.xbar_nonsampled_star[a] * amat[(a, col)];
                }
                acc += urows[(i, col)];
                w[col] += remainder * acc;
            }
        }
        w /= n_pop;
        // Census mean of the conditional means over the area.
        let census = agg.xbar_pop.dot(&fit.beta) + fit.u[i];
        bias[i] = w.dot(&mu) - census;
    }
    Ok(bias)
}

fn u_cell_weight_ref(fit: &RobustFit, k: usize) -> f64 {
    fit.u_cells[k]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{area_aggregates, Cell};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn huber_psi_examples() {
        assert_relative_eq!(huber_psi(0.5, 1.345), 0.5);
        assert_relative_eq!(huber_psi(-3.0, 1.345), -1.345);
        assert_relative_eq!(huber_psi_prime(0.5, 1.345), 1.0);
        assert_relative_eq!(huber_psi_prime(-3.0, 1.345), 0.0);
        assert_relative_eq!(psi_weight(0.0, 1.345), 1.0);
        assert_relative_eq!(psi_weight(2.69, 1.345), 0.5);
    }

    proptest! {
        #[test]
        fn huber_psi_is_odd_and_bounded(u in -100.0f64..100.0, c in 0.1f64..10.0) {
            prop_assert!((huber_psi(-u, c) + huber_psi(u, c)).abs() < 1e-12);
            prop_assert!(huber_psi(u, c).abs() <= c + 1e-12);
        }
    }

    /// Honest fixture: per (area, block) cell a population of `n_pop`
    /// units is generated, linked through an actual ELE permutation draw,
    /// and the first `ni/2` units of each cell are the sample.
    fn two_block_sample(lambda: f64, seed: u64, d: usize, ni: usize) -> LinkedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_pop = 20usize;
        let per_cell = ni / 2;
        let n = d * ni;
        let mut y = DVector::zeros(n);
        let mut x = DMatrix::zeros(n, 2);
        let mut cells = Vec::new();
        let mut row = 0usize;
        for i in 0..d {
            let u = 1.3 * ((i as f64 + 1.0) * 1.7).sin();
            for block in 0..2usize {
                let mut x_pop = Vec::with_capacity(n_pop);
                let mut y_pop = Vec::with_capacity(n_pop);
                for _ in 0..n_pop {
                    let xv = 1.0 + 3.0 * rng.gen::<f64>();
                    let e: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
                    x_pop.push(xv);
                    y_pop.push(8.0 + 2.0 * xv + u + e);
                }
                let draw = crate::linkage::sample_ele_permutation(n_pop, lambda, &mut rng);
                let xbar = x_pop.iter().sum::<f64>() / n_pop as f64;
                let mut rows = Vec::with_capacity(per_cell);
                for j in 0..per_cell {
                    x[(row, 0)] = 1.0;
                    x[(row, 1)] = x_pop[j];
                    y[row] = y_pop[draw.perm[j]];
                    rows.push(row);
                    row += 1;
                }
                cells.push(Cell {
                    area: i,
                    block,
                    lambda,
                    var_lambda: None,
                    n_pop,
                    xbar_pop: DVector::from_row_slice(&[1.0, xbar]),
                    rows,
                });
            }
        }
        LinkedSample::new(
            (0..d).map(|i| format!("a{i}")).collect(),
            vec!["b0".into(), "b1".into()],
            y,
            x,
            cells,
        )
        .unwrap()
    }

    #[test]
    fn infinite_tuning_recovers_blup_cell_sums() {
        // With c effectively infinite the per-cell Fellner solves reduce to
        // the corrected BLUP formula at the same parameters.
        let sample = two_block_sample(0.85, 3, 4, 8);
        let config = RobustConfig {
            c: 1e6,
            ..Default::default()
        };
        let fit = fit_reblup_star(&sample, &config).unwrap();
        assert!(fit.converged);

        let v = &fit.v_diag;
        let mut want = vec![0.0; sample.n_areas()];
        for (k, cell) in sample.cells.iter().enumerate() {
            let sig = cell_sigma(cell.n_sample(), fit.sigma2_u, fit.sigma2_e, &v[k]);
            let si = invert_spd(&sig, "t").unwrap();
            let r = cell_residual(&sample, k, &fit.beta);
            let si1 = si.column_sum();
            want[cell.area] += fit.sigma2_u * si1.dot(&r);
        }
        for (a, b) in fit.u.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn infinite_tuning_solves_ml_equations() {
        // At c -> infinity equation (30) is the ML score; verify with a
        // dense brute-force evaluation at the fit.
        let sample = two_block_sample(1.0, 11, 4, 8);
        let config = RobustConfig {
            c: 1e6,
            ..Default::default()
        };
        let fit = fit_reblup_star(&sample, &config).unwrap();
        // ML score: r' S^-1 dS S^-1 r - tr(S^-1 dS) over cells, at the fit.
        let mut score_u = 0.0;
        let mut score_e = 0.0;
        for (k, cell) in sample.cells.iter().enumerate() {
            let sig = cell_sigma(cell.n_sample(), fit.sigma2_u, fit.sigma2_e, &fit.v_diag[k]);
            let si = invert_spd(&sig, "t").unwrap();
            let r = cell_residual(&sample, k, &fit.beta);
            let sir = &si * &r;
            let one_sir: f64 = sir.sum();
            let si1 = si.column_sum();
            score_u += one_sir * one_sir - si1.sum();
            score_e += sir.dot(&sir) - si.trace();
        }
        assert!(score_u.abs() < 1e-3, "sigma2_u ML score {score_u}");
        assert!(score_e.abs() < 1e-3, "sigma2_e ML score {score_e}");
    }

    #[test]
    fn delta_equation_balances_at_truth() {
        // On a large honestly-linked instance the relative imbalance of the
        // variance component equations at the generating parameters should
        // be small; the fixture has sigma2_u from the sine pattern of
        // amplitude 1.3 (variance about 0.85) and unit sigma2_e.
        let sample = two_block_sample(0.8, 101, 60, 10);
        let beta = DVector::from_row_slice(&[8.0, 2.0]);
        let v = sample.linkage_variances(&(&sample.x * &beta));
        let s2u = 1.3f64 * 1.3 * 0.5; // variance of a*sin over the pattern
        for (c, label) in [(1.345, "huber"), (1e6, "ml")] {
            let kc = huber_psi_sq_moment(c);
            let (f, tr) = delta_equation(&sample, s2u, 1.0, &v, &beta, c, kc).unwrap();
            let rel_u = f[0] / tr[0];
            let rel_e = f[1] / tr[1];
            eprintln!("{label}: rel imbalance u={rel_u:+.3} e={rel_e:+.3}");
            assert!(rel_u.abs() < 0.35, "{label} u imbalance {rel_u}");
            assert!(rel_e.abs() < 0.35, "{label} e imbalance {rel_e}");
        }
    }

    #[test]
    fn bounded_influence_under_growing_contamination() {
        let sample = two_block_sample(0.9, 17, 4, 8);
        let config = RobustConfig::default();
        let base = fit_reblup_star(&sample, &config).unwrap();

        let contaminate = |mult: f64| {
            let mut s = sample.clone();
            s.y_star[0] += mult * config.c;
            fit_reblup_star(&s, &config).unwrap()
        };
        let f10 = contaminate(10.0);
        let f100 = contaminate(100.0);
        // Once clipped, growing the outlier does not move the fit.
        assert_relative_eq!((&f10.beta - &f100.beta).amax(), 0.0, epsilon = 1e-6);
        assert_relative_eq!(f10.sigma2_e, f100.sigma2_e, max_relative = 1e-6);
        // And the robust fit stays near the clean one.
        assert!((&f10.beta - &base.beta).amax() < 0.5);
    }

    #[test]
    fn sandwich_is_symmetric_and_psd() {
        let sample = two_block_sample(0.8, 23, 5, 8);
        let fit = fit_reblup_star(&sample, &RobustConfig::default()).unwrap();
        let sw = sandwich_cov(&fit, &sample).unwrap();
        assert!((&sw.cov - sw.cov.transpose()).abs().max() < 1e-12);
        assert!(sw.min_eigenvalue > -1e-10);
    }

    #[test]
    fn meat_blocks_match_direct_summation() {
        // Independent oracle: rebuild the meat by stacking dense matrices
        // over the whole sample instead of accumulating per cell.
        let sample = two_block_sample(0.75, 29, 2, 6);
        let fit = fit_reblup_star(&sample, &RobustConfig::default()).unwrap();
        let p = sample.p();
        let d = sample.n_areas();
        let work = RobustWork::build(&sample, fit.sigma2_u, fit.sigma2_e, &fit.v_diag).unwrap();

        let n = sample.n() as f64;
        let mut kr = 0.0;
        let mut kt = 0.0;
        let mut krt = 0.0;
        for (k, cell) in sample.cells.iter().enumerate() {
            let r = cell_residual(&sample, k, &fit.beta);
            for j in 0..cell.n_sample() {
                let ru = r[j] / work.u_diag[k][j].sqrt();
                let t = (r[j] - fit.u[cell.area]) / work.s_diag[k][j].sqrt();
                kr += huber_psi(ru, fit.c).powi(2);
                kt += huber_psi(t, fit.c).powi(2);
                krt += huber_psi(ru, fit.c) * huber_psi(t, fit.c);
            }
        }
        let scale = 1.0 / (n - p as f64);
        kr *= scale;
        kt *= scale;
        krt *= scale;

        let mut meat = DMatrix::zeros(p + d, p + d);
        for (k, cell) in sample.cells.iter().enumerate() {
            let xs = sample.cell_x_star(cell);
            let nq = cell.n_sample();
            let sig = cell_sigma(nq, fit.sigma2_u, fit.sigma2_e, &fit.v_diag[k]);
            let si = invert_spd(&sig, "t").unwrap();
            let u_mat = DMatrix::from_diagonal(&work.u_diag[k]);
            let s_half_inv =
                DMatrix::from_diagonal(&work.s_diag[k].map(|s| 1.0 / s.sqrt()));
            let u_half = DMatrix::from_diagonal(&work.u_diag[k].map(|s| s.sqrt()));
            let ones = DVector::from_element(nq, 1.0);

            let bb = xs.transpose() * &si * &u_mat * &si * &xs * kr;
            for a in 0..p {
                for b in 0..p {
                    meat[(a, b)] += bb[(a, b)];
                }
            }
            let s_inv = DMatrix::from_diagonal(&work.s_diag[k].map(|s| 1.0 / s));
            let zz = (ones.transpose() * &s_inv * &ones)[(0, 0)] * kt;
            meat[(p + cell.area, p + cell.area)] += zz;
            let cross = xs.transpose() * &si * &u_half * &s_half_inv * &ones * krt;
            for a in 0..p {
                meat[(a, p + cell.area)] += cross[a];
                meat[(p + cell.area, a)] += cross[a];
            }
        }

        // Rebuild through the production path: bread^-1 cancellation check
        // is indirect, so compare the raw meat by reconstructing it from
        // the sandwich parts is not possible; instead recompute through the
        // same entry point with a copied implementation is avoided. This
        // oracle asserts on the internal accumulation by reflection:
        let sw = sandwich_cov(&fit, &sample).unwrap();
        // bread * cov * bread' should equal the oracle meat after
        // symmetrization (PSD clamp permitting).
        let mut bread = DMatrix::zeros(p + d, p + d);
        for (k, cell) in sample.cells.iter().enumerate() {
            let xs = sample.cell_x_star(cell);
            let nq = cell.n_sample();
            let sig = cell_sigma(nq, fit.sigma2_u, fit.sigma2_e, &fit.v_diag[k]);
            let si = invert_spd(&sig, "t").unwrap();
            let r = cell_residual(&sample, k, &fit.beta);
            let mut rind = DMatrix::zeros(nq, nq);
            let mut tind = DMatrix::zeros(nq, nq);
            for j in 0..nq {
                rind[(j, j)] = huber_psi_prime(r[j] / work.u_diag[k][j].sqrt(), fit.c);
                tind[(j, j)] =
                    huber_psi_prime((r[j] - fit.u[cell.area]) / work.s_diag[k][j].sqrt(), fit.c);
            }
            let bb = xs.transpose() * &si * &rind * &xs;
            for a in 0..p {
                for b in 0..p {
                    bread[(a, b)] -= bb[(a, b)];
                }
            }
            let s_inv = DMatrix::from_diagonal(&work.s_diag[k].map(|s| 1.0 / s));
            let ones = DVector::from_element(nq, 1.0);
            let tu = (ones.transpose() * &tind * &s_inv * &ones)[(0, 0)];
            bread[(p + cell.area, p + cell.area)] -= tu;
            let cind = huber_psi_prime(fit.u[cell.area] / fit.sigma2_u.sqrt(), fit.c);
            bread[(p + cell.area, p + cell.area)] -= cind / fit.sigma2_u;
            let tb = xs.transpose() * &tind * &s_inv * &ones;
            for a in 0..p {
                bread[(p + cell.area, a)] -= tb[a];
            }
        }
        let recovered = &bread * &sw.cov * bread.transpose();
        let sym_meat = (&meat + meat.transpose()) * 0.5;
        assert_relative_eq!(
            (recovered - sym_meat).abs().max(),
            0.0,
            epsilon = 1e-7
        );
    }

    #[test]
    fn census_bias_is_zero() {
        // sample = population: every pseudolinear weight collapses to the
        // census mean weight.
        let mut sample = two_block_sample(0.8, 31, 3, 8);
        for cell in sample.cells.iter_mut() {
            cell.n_pop = cell.rows.len();
        }
        let sample = LinkedSample::new(
            sample.area_ids.clone(),
            sample.block_ids.clone(),
            sample.y_star.clone(),
            sample.x.clone(),
            sample.cells.clone(),
        )
        .unwrap();
        // Census => population means are the sampled means.
        let mut cells = sample.cells.clone();
        for c in cells.iter_mut() {
            let xs = sample.cell_x(c);
            let mut mean = DVector::zeros(sample.p());
            for j in 0..xs.nrows() {
                mean += xs.row(j).transpose();
            }
            c.xbar_pop = mean / xs.nrows() as f64;
        }
        let sample = LinkedSample::new(
            sample.area_ids.clone(),
            sample.block_ids.clone(),
            sample.y_star.clone(),
            sample.x.clone(),
            cells,
        )
        .unwrap();
        let fit = fit_reblup_star(&sample, &RobustConfig::default()).unwrap();
        let aggs = area_aggregates(&sample);
        let work = RobustWork::build(&sample, fit.sigma2_u, fit.sigma2_e, &fit.v_diag).unwrap();
        let bias = pseudolinear_bias(&fit, &sample, &aggs, &work).unwrap();
        for b in bias {
            assert!(b.abs() < 1e-8, "census bias {b}");
        }
    }

    #[test]
    fn mse_components_nonnegative_and_dominate_bias() {
        let sample = two_block_sample(0.7, 37, 5, 8);
        let fit = fit_reblup_star(&sample, &RobustConfig::default()).unwrap();
        let aggs = area_aggregates(&sample);
        let mse = mse_reblup_star(&fit, &sample, &aggs).unwrap();
        for m in &mse {
            assert!(m.h1 >= 0.0 && m.h2 >= 0.0 && m.h3 >= 0.0 && m.bias2 >= 0.0);
            assert!(m.total >= m.bias2);
        }
    }

    #[test]
    fn v_delta_scale_equivariance() {
        let sample = two_block_sample(0.85, 41, 4, 10);
        let config = RobustConfig::default();
        let fit = fit_reblup_star(&sample, &config).unwrap();
        let vd = v_delta_robust(&fit, &sample).unwrap();

        let kscale = 1.7;
        let mut scaled = sample.clone();
        scaled.y_star *= kscale;
        let fit_k = fit_reblup_star(&scaled, &config).unwrap();
        let vd_k = v_delta_robust(&fit_k, &scaled).unwrap();
        // Variances scale as k^2, so their covariance scales as k^4.
        assert_relative_eq!(
            vd_k[(1, 1)],
            kscale.powi(4) * vd[(1, 1)],
            max_relative = 2e-2
        );
    }

    #[test]
    fn equation_norms_certified_small() {
        let sample = two_block_sample(0.8, 43, 4, 8);
        let fit = fit_reblup_star(&sample, &RobustConfig::default()).unwrap();
        for norm in fit.eq_norms {
            assert!(norm < 1e-6, "equation norm {norm}");
        }
    }
}
