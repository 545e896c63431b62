//! Linkage-corrected linear M-quantile regression and the star-MQ area
//! predictor.
//!
//! For each order `tau` the regression solves tilted Huber normal
//! equations against the corrected design, with a per-unit variance
//! `Upsilon = sigma_tau^2 + v` that folds the linkage noise into the
//! standardization. Unit-level M-quantile coefficients are read off by
//! inverting the (monotonized) fitted index over the grid, corrected for
//! the attenuation that wrong links induce, and averaged into an area
//! coefficient at which the regression is refit for prediction.

use nalgebra::{DMatrix, DVector};

use crate::data::{AreaAggregates, AreaPrediction, LinkedSample};
use crate::error::Error;
use crate::robust::{huber_psi, huber_psi_prime, RobustConfig};
use crate::Result;

/// Tilted influence function `psi_tau(u) = 2 psi(u) (tau 1{u>0} + (1-tau) 1{u<=0})`.
pub fn psi_tau(u: f64, tau: f64, c: f64) -> f64 {
    let tilt = if u > 0.0 { tau } else { 1.0 - tau };
    2.0 * tilt * huber_psi(u, c)
}

/// Derivative of the tilted influence function in `u`.
pub fn psi_tau_prime(u: f64, tau: f64, c: f64) -> f64 {
    let tilt = if u > 0.0 { tau } else { 1.0 - tau };
    2.0 * tilt * huber_psi_prime(u, c)
}

fn psi_tau_weight(u: f64, tau: f64, c: f64) -> f64 {
    if u.abs() < 1e-10 {
        // psi_tau is linear through the origin with slope 2*tilt; at the
        // kink use the symmetric limit.
        1.0
    } else {
        psi_tau(u, tau, c) / u
    }
}

/// One fitted M-quantile regression: coefficients and the residual scale.
#[derive(Debug, Clone)]
pub struct MqFit {
    pub tau: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub converged: bool,
    /// Sup-norm of the corrected normal equations at the solution, scaled
    /// by `1 + |beta|_inf`.
    pub eq_norm: f64,
}

fn fit_mq_tau_impl(sample: &LinkedSample, tau: f64, config: &RobustConfig) -> Result<MqFit> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::InvalidInput(format!("tau {tau} outside (0, 1)")));
    }
    let n = sample.n();
    let p = sample.p();
    let c = config.c;

    // OLS start with a MAD residual scale.
    let xtx = sample.x_star.transpose() * &sample.x_star;
    let rhs = sample.x_star.transpose() * &sample.y_star;
    let mut beta = crate::lmm::invert_spd(&xtx, "OLS normal equations")? * rhs;
    let resid = &sample.y_star - &sample.x_star * &beta;
    let mut abs: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mad = if n % 2 == 1 {
        abs[n / 2]
    } else {
        0.5 * (abs[n / 2 - 1] + abs[n / 2])
    };
    let mut sigma2 = (mad / 0.6745).powi(2).max(1e-12);

    let mut converged = false;
    let mut eq_norm = f64::INFINITY;
    for _ in 0..config.max_iter {
        // Upsilon from the current beta and scale.
        let v = sample.linkage_variances(&(&sample.x * &beta));
        let mut upsilon = DVector::zeros(n);
        for (k, cell) in sample.cells.iter().enumerate() {
            for (local, &r) in cell.rows.iter().enumerate() {
                upsilon[r] = sigma2 + v[k][local];
            }
        }

        let resid = &sample.y_star - &sample.x_star * &beta;
        let mut m = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        let mut wsum = 0.0;
        let mut wrss = 0.0;
        for j in 0..n {
            let t = resid[j] / upsilon[j].sqrt();
            let w = psi_tau_weight(t, tau, c) / upsilon[j];
            let row = sample.x_star.row(j);
            for a in 0..p {
                for bb in 0..p {
                    m[(a, bb)] += w * row[a] * row[bb];
                }
                b[a] += w * row[a] * sample.y_star[j];
            }
            let w_bare = psi_tau_weight(t, tau, c);
            wsum += w_bare;
            wrss += w_bare * resid[j] * resid[j];
        }
        let beta_new = m
            .lu()
            .solve(&b)
            .ok_or(Error::Singular { what: "M-quantile system" })?;
        let sigma2_new = (wrss / wsum).max(1e-12);

        let change = ((&beta_new - &beta).amax() / (1.0 + beta.amax()))
            .max((sigma2_new - sigma2).abs() / (1.0 + sigma2));
        beta = beta_new;
        sigma2 = sigma2_new;

        // Corrected normal equation residual at the new state.
        let resid = &sample.y_star - &sample.x_star * &beta;
        let mut eq: DVector<f64> = DVector::zeros(p);
        for j in 0..n {
            let t = resid[j] / upsilon[j].sqrt();
            let s = psi_tau(t, tau, c) / upsilon[j].sqrt();
            for a in 0..p {
                eq[a] += sample.x_star[(j, a)] * s;
            }
        }
        eq_norm = eq.amax() / (1.0 + beta.amax());
        if change < 1e-9 && eq_norm < 5e-7 {
            converged = true;
            break;
        }
    }

    Ok(MqFit {
        tau,
        beta,
        sigma2,
        converged,
        eq_norm,
    })
}

/// Fit one M-quantile regression; non-convergence is an error.
pub fn fit_mq_tau(sample: &LinkedSample, tau: f64, config: &RobustConfig) -> Result<MqFit> {
    let fit = fit_mq_tau_impl(sample, tau, config)?;
    if !fit.converged {
        return Err(Error::NonConvergence {
            what: "M-quantile IRWLS",
            iterations: config.max_iter,
            norms: vec![fit.eq_norm],
        });
    }
    Ok(fit)
}

/// Independent fits over a grid of orders.
#[derive(Debug, Clone)]
pub struct MqGridFit {
    pub fits: Vec<MqFit>,
}

impl MqGridFit {
    pub fn taus(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.tau).collect()
    }
}

/// The default grid: 0.02 to 0.98 in steps of 0.02.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=49).map(|k| k as f64 * 0.02).collect()
}

/// Fit the regression on every grid order. Orders whose IRWLS stalls keep
/// their last iterate with `converged = false`.
pub fn fit_mq_grid(
    sample: &LinkedSample,
    taus: &[f64],
    config: &RobustConfig,
) -> Result<MqGridFit> {
    let mut sorted = taus.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(Error::InvalidInput("tau grid needs at least two points".into()));
    }
    let mut fits = Vec::with_capacity(sorted.len());
    for &tau in &sorted {
        fits.push(fit_mq_tau_impl(sample, tau, config)?);
    }
    if !fits.iter().any(|f| f.converged) {
        return Err(Error::NonConvergence {
            what: "M-quantile grid",
            iterations: config.max_iter,
            norms: vec![],
        });
    }
    Ok(MqGridFit { fits })
}

/// How the bias correction spreads the attenuated coefficient mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientCorrection {
    /// Replace the within-cell average coefficient by one half.
    Half,
    /// Use the observed within-cell average of the raw coefficients.
    CellMean,
}

/// Raw and corrected unit-level coefficients with the per-area averages.
#[derive(Debug, Clone)]
pub struct MqCoefficients {
    /// Raw linked-data coefficient per sample row.
    pub tau_raw: Vec<f64>,
    /// Bias-corrected coefficient per sample row.
    pub tau_corrected: Vec<f64>,
    /// Rows whose response fell outside the fitted envelope.
    pub clamped: Vec<bool>,
    /// Per-area averages of the corrected coefficients.
    pub area_tau: Vec<f64>,
}

/// Pool-adjacent-violators for a nondecreasing sequence.
fn isotonic_nondecreasing(vals: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(vals.len());
    for &v in vals {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            blocks.pop();
            let c = c1 + c2;
            blocks.push(((m1 * c1 as f64 + m2 * c2 as f64) / c as f64, c));
        }
    }
    let mut out = Vec::with_capacity(vals.len());
    for (m, c) in blocks {
        out.extend(std::iter::repeat(m).take(c));
    }
    out
}

/// Invert a monotone fitted-index curve at `y` by linear interpolation,
/// clamping outside the envelope.
fn invert_monotone(taus: &[f64], q: &[f64], y: f64) -> (f64, bool) {
    let k = q.len();
    if y <= q[0] {
        return (taus[0], y < q[0]);
    }
    if y >= q[k - 1] {
        return (taus[k - 1], y > q[k - 1]);
    }
    let mut idx = 1;
    while q[idx] < y {
        idx += 1;
    }
    let (q0, q1) = (q[idx - 1], q[idx]);
    if q1 > q0 {
        (
            taus[idx - 1] + (y - q0) / (q1 - q0) * (taus[idx] - taus[idx - 1]),
            false,
        )
    } else {
        (0.5 * (taus[idx - 1] + taus[idx]), false)
    }
}

/// Correct one raw coefficient for linkage attenuation.
pub fn correct_coefficient(
    tau_raw: f64,
    lambda: f64,
    gamma: f64,
    n_pop: usize,
    cell_mean_raw: f64,
    mode: CoefficientCorrection,
) -> f64 {
    let center = match mode {
        CoefficientCorrection::Half => 0.5,
        CoefficientCorrection::CellMean => cell_mean_raw,
    };
    (lambda - gamma) * tau_raw + gamma * n_pop as f64 * center
}

/// Unit-level M-quantile coefficients from the grid: solve
/// `y* = x' beta_tau` per unit through the monotonized fitted index, then
/// correct for linkage attenuation and average within areas.
pub fn mq_coefficients(
    sample: &LinkedSample,
    grid: &MqGridFit,
    mode: CoefficientCorrection,
) -> Result<MqCoefficients> {
    let usable: Vec<&MqFit> = grid.fits.iter().filter(|f| f.converged).collect();
    if usable.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two converged grid orders".into(),
        ));
    }
    let taus: Vec<f64> = usable.iter().map(|f| f.tau).collect();
    let n = sample.n();
    let mut tau_raw = vec![0.0; n];
    let mut clamped = vec![false; n];

    for cell in &sample.cells {
        for &row in &cell.rows {
            let x = sample.x.row(row);
            let q: Vec<f64> = usable
                .iter()
                .map(|f| {
                    let mut acc = 0.0;
                    for a in 0..sample.p() {
                        acc += x[a] * f.beta[a];
                    }
                    acc
                })
                .collect();
            let q_mono = isotonic_nondecreasing(&q);
            let (t, cl) = invert_monotone(&taus, &q_mono, sample.y_star[row]);
            tau_raw[row] = t;
            clamped[row] = cl;
        }
    }

    let mut tau_corrected = vec![0.0; n];
    for cell in &sample.cells {
        let mean_raw =
            cell.rows.iter().map(|&r| tau_raw[r]).sum::<f64>() / cell.n_sample() as f64;
        let lambda = cell.effective_lambda();
        let gamma = cell.gamma();
        for &row in &cell.rows {
            tau_corrected[row] =
                correct_coefficient(tau_raw[row], lambda, gamma, cell.n_pop, mean_raw, mode);
        }
    }

    let mut area_tau = vec![0.0; sample.n_areas()];
    for (i, list) in sample.area_cells.iter().enumerate() {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for &k in list {
            for &row in &sample.cells[k].rows {
                acc += tau_corrected[row];
                cnt += 1;
            }
        }
        if cnt == 0 {
            return Err(Error::EmptyArea {
                area: sample.area_ids[i].clone(),
            });
        }
        area_tau[i] = acc / cnt as f64;
    }

    Ok(MqCoefficients {
        tau_raw,
        tau_corrected,
        clamped,
        area_tau,
    })
}

/// Per-area regression refits at the area coefficients.
#[derive(Debug, Clone)]
pub struct MqAreaFits {
    pub fits: Vec<MqFit>,
    /// Areas whose refit stalled and fell back to the nearest converged
    /// grid order.
    pub fallback: Vec<bool>,
}

/// Refit the regression at every area coefficient; a stalled refit falls
/// back to the nearest converged grid order.
pub fn fit_mq_areas(
    sample: &LinkedSample,
    coefficients: &MqCoefficients,
    grid: &MqGridFit,
    config: &RobustConfig,
) -> Result<MqAreaFits> {
    let mut fits = Vec::with_capacity(coefficients.area_tau.len());
    let mut fallback = vec![false; coefficients.area_tau.len()];
    for (i, &tau) in coefficients.area_tau.iter().enumerate() {
        let fit = fit_mq_tau_impl(sample, tau, config)?;
        if fit.converged {
            fits.push(fit);
            continue;
        }
        fallback[i] = true;
        let nearest = grid
            .fits
            .iter()
            .filter(|f| f.converged)
            .min_by(|a, b| {
                (a.tau - tau)
                    .abs()
                    .partial_cmp(&(b.tau - tau).abs())
                    .unwrap()
            })
            .ok_or(Error::NonConvergence {
                what: "M-quantile area refit",
                iterations: config.max_iter,
                norms: vec![],
            })?;
        fits.push(nearest.clone());
    }
    Ok(MqAreaFits { fits, fallback })
}

/// The star-MQ predictor:
/// `N^-1 { n ybar* + (N - n) xbar*_r' beta_{tau_i} }`.
pub fn predict_means_mq_star(
    sample: &LinkedSample,
    area_fits: &MqAreaFits,
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
            let synthetic = agg.xbar_nonsampled_star.dot(&area_fits.fits[i].beta);
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

/// Linearization MSE decomposition for the star-MQ predictor.
#[derive(Debug, Clone)]
pub struct MqMse {
    pub variance: f64,
    pub bias2: f64,
    pub v_tau: f64,
    pub total: f64,
    pub clamped: bool,
}

struct AreaUpsilon {
    upsilon: DVector<f64>,
}

fn area_upsilon(sample: &LinkedSample, fit: &MqFit) -> AreaUpsilon {
    let v = sample.linkage_variances(&(&sample.x * &fit.beta));
    let mut upsilon = DVector::zeros(sample.n());
    for (k, cell) in sample.cells.iter().enumerate() {
        for (local, &r) in cell.rows.iter().enumerate() {
            upsilon[r] = fit.sigma2 + v[k][local];
        }
    }
    AreaUpsilon { upsilon }
}

/// Linearization MSE of the star-MQ predictor: sandwich variance of the
/// coefficient fit, pooled residual variance, pseudolinear bias, and the
/// area-coefficient uncertainty term.
pub fn mse_mq_star(
    sample: &LinkedSample,
    coefficients: &MqCoefficients,
    area_fits: &MqAreaFits,
    aggregates: &[AreaAggregates],
    config: &RobustConfig,
) -> Result<Vec<MqMse>> {
    let n = sample.n();
    let p = sample.p();
    let c = config.c;
    let d = sample.n_areas();

    // Pooled squared residuals, each area against its own refit.
    let mut pooled = 0.0;
    for (h, list) in sample.area_cells.iter().enumerate() {
        let beta_h = &area_fits.fits[h].beta;
        for &k in list {
            for &row in &sample.cells[k].rows {
                let mut fitv = 0.0;
                for a in 0..p {
                    fitv += sample.x_star[(row, a)] * beta_h[a];
                }
                pooled += (sample.y_star[row] - fitv).powi(2);
            }
        }
    }

    // Conditional mean of each sampled unit under its own area's fit.
    let mut mu = DVector::zeros(n);
    for (h, list) in sample.area_cells.iter().enumerate() {
        let beta_h = &area_fits.fits[h].beta;
        for &k in list {
            for &row in &sample.cells[k].rows {
                let mut acc = 0.0;
                for a in 0..p {
                    acc += sample.x_star[(row, a)] * beta_h[a];
                }
                mu[row] = acc;
            }
        }
    }

    let mut out = Vec::with_capacity(d);
    for (i, agg) in aggregates.iter().enumerate() {
        let fit = &area_fits.fits[i];
        let tau = fit.tau;
        let ups = area_upsilon(sample, fit);
        let fpc = (1.0 - agg.n_sample as f64 / agg.n_pop).powi(2);
        let remainder = agg.n_pop - agg.n_sample as f64;

        // Global matrices at this area's order.
        let resid = &sample.y_star - &sample.x_star * &fit.beta;
        let mut h_w: DMatrix<f64> = DMatrix::zeros(p, p); // X*' U^-1/2 W U^-1/2 X*
        let mut h_psi: DMatrix<f64> = DMatrix::zeros(p, p); // with diag(psi')
        let mut meat: DMatrix<f64> = DMatrix::zeros(p, p); // with diag(psi^2)
        let mut dh: DMatrix<f64> = DMatrix::zeros(p, p); // with diag(dW/dtau)
        let mut dl: DVector<f64> = DVector::zeros(p);
        for j in 0..n {
            let su = ups.upsilon[j].sqrt();
            let t = resid[j] / su;
            let w = psi_tau_weight(t, tau, c) / ups.upsilon[j];
            let wp = psi_tau_prime(t, tau, c) / ups.upsilon[j];
            let w2 = psi_tau(t, tau, c).powi(2) / ups.upsilon[j];
            // dW/dtau = 2 |psi(t)| / t elementwise (sign through t).
            let dwdtau = if t.abs() < 1e-10 {
                0.0
            } else {
                2.0 * huber_psi(t, c).abs() / t / ups.upsilon[j]
            };
            let row = sample.x_star.row(j);
            for a in 0..p {
                for bb in 0..p {
                    h_w[(a, bb)] += w * row[a] * row[bb];
                    h_psi[(a, bb)] += wp * row[a] * row[bb];
                    meat[(a, bb)] += w2 * row[a] * row[bb];
                    dh[(a, bb)] += dwdtau * row[a] * row[bb];
                }
                dl[a] += dwdtau * row[a] * sample.y_star[j];
            }
        }

        let hpsi_inv = h_psi
            .clone()
            .try_inverse()
            .unwrap_or_else(|| h_psi.clone().pseudo_inverse(1e-12).unwrap());
        let vbeta: DMatrix<f64> =
            &hpsi_inv * &meat * hpsi_inv.transpose() * (n as f64 / (n as f64 - p as f64));

        let mut variance = fpc
            * ((agg.xbar_nonsampled_star.transpose() * &vbeta * &agg.xbar_nonsampled_star)
                [(0, 0)]
                + if remainder > 0.0 {
                    pooled / (remainder * (n as f64 - 1.0))
                } else {
                    0.0
                });

        // Pseudolinear bias: weights that reproduce the predictor, applied
        // to the fitted means, against the census mean.
        let h_w_inv = h_w
            .clone()
            .try_inverse()
            .unwrap_or_else(|| h_w.clone().pseudo_inverse(1e-12).unwrap());
        let mut w_vec = DVector::zeros(n);
        for &k in &sample.area_cells[i] {
            for &row in &sample.cells[k].rows {
                w_vec[row] += 1.0;
            }
        }
        for &k in &sample.area_cells[i] {
            let cell = &sample.cells[k];
            // Cell remainder total of the corrected design.
            let mut cell_remainder: DVector<f64> = &cell.xbar_pop * cell.n_pop as f64;
            for &row in &cell.rows {
                cell_remainder -= sample.x_star.row(row).transpose();
            }
            let target: DVector<f64> = &h_w_inv * cell_remainder;
            for j in 0..n {
                let su = ups.upsilon[j].sqrt();
                let t = resid[j] / su;
                let w = psi_tau_weight(t, tau, c) / ups.upsilon[j];
                let mut acc = 0.0;
                for a in 0..p {
                    acc += sample.x_star[(j, a)] * target[a];
                }
                w_vec[j] += w * acc;
            }
        }
        // w'mu - N^-1 sum_U mu, both terms over N.
        let census = agg.xbar_pop.dot(&fit.beta) * agg.n_pop;
        let bias = (w_vec.dot(&mu) - census) / agg.n_pop;
        let bias2 = bias * bias;

        // Area coefficient uncertainty.
        let mut v2 = 0.0;
        {
            let mut cnt = 0usize;
            for &k in &sample.area_cells[i] {
                for &row in &sample.cells[k].rows {
                    v2 += (coefficients.tau_corrected[row] - coefficients.area_tau[i]).powi(2);
                    cnt += 1;
                }
            }
            v2 /= cnt as f64;
        }
        let g_vec: DVector<f64> = &hpsi_inv * (&dl - &dh * &fit.beta);
        let mut v_tau = 0.0;
        for &k in &sample.area_cells[i] {
            let cell = &sample.cells[k];
            let proj = cell.xbar_pop.dot(&g_vec);
            v_tau += proj * proj * v2;
        }

        let mut clamped = false;
        for comp in [&mut variance, &mut v_tau] {
            if *comp < 0.0 {
                if *comp < -1e-10 {
                    clamped = true;
                }
                *comp = 0.0;
            }
        }
        out.push(MqMse {
            variance,
            bias2,
            v_tau,
            total: variance + bias2 + v_tau,
            clamped,
        });
    }
    Ok(out)
}
