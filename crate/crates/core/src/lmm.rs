//! Linkage-corrected linear mixed model with a random area intercept.
//!
//! The model for the linked sample of cell (i, q) is
//! `y* = X* beta + 1 u_i + e*` with `Var(y*) = Sigma_iq =
//! sigma2_u 11' + sigma2_e I + V_iq`, where `V_iq` is the diagonal
//! linkage-variance approximation driven by the fitted values. Fitting
//! alternates GLS for `beta`, a rebuild of `V` from the current fitted
//! values, and one Fisher scoring step on the restricted (pseudo-REML)
//! likelihood for the variance components, which treats the `Sigma_iq`
//! blocks as known within each step.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::data::{AreaAggregates, AreaPrediction, LinkedSample};
use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone)]
pub struct LmmOptions {
    pub max_iter: usize,
    /// Scaled sup-norm tolerance on parameter changes.
    pub tol: f64,
}

impl Default for LmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// Which area-effect predictor feeds the EBLUP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EblupVariant {
    /// Residuals against the corrected design `X*`.
    Star,
    /// Lambda-damped residuals against the uncorrected design.
    StarStar,
}

/// A fitted linkage-corrected mixed model.
#[derive(Debug, Clone)]
pub struct MixedFit {
    pub beta: DVector<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    /// Predicted area effects from corrected residuals.
    pub u_star: Vec<f64>,
    /// Predicted area effects from lambda-damped uncorrected residuals.
    pub u_starstar: Vec<f64>,
    /// Per-cell linkage variance diagonals at the fitted beta.
    pub v_diag: Vec<DVector<f64>>,
    /// Expected information of the variance components.
    pub info: Matrix2<f64>,
    /// Covariance of the variance component estimates (inverse information).
    pub v_delta: Matrix2<f64>,
    /// GLS information `sum X*' Sigma^-1 X*` at convergence.
    pub gls_info: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the REML score at the solution.
    pub score_norm: f64,
    /// Sup-norm of the GLS normal equation residual at the solution.
    pub gls_residual_norm: f64,
    /// True when sigma2_u was projected to the boundary.
    pub boundary: bool,
    /// True when a pseudo-inverse replaced a singular information matrix.
    pub pseudo_inverse_used: bool,
}

impl MixedFit {
    /// Reassemble the covariance block of one cell from its parts.
    pub fn cell_sigma(&self, sample: &LinkedSample, cell_idx: usize) -> DMatrix<f64> {
        cell_sigma(
            sample.cells[cell_idx].n_sample(),
            self.sigma2_u,
            self.sigma2_e,
            &self.v_diag[cell_idx],
        )
    }
}

/// `sigma2_u 11' + diag(sigma2_e + v_j)` for one cell.
pub(crate) fn cell_sigma(
    n: usize,
    sigma2_u: f64,
    sigma2_e: f64,
    v: &DVector<f64>,
) -> DMatrix<f64> {
    let mut s = DMatrix::from_element(n, n, sigma2_u);
    for j in 0..n {
        s[(j, j)] += sigma2_e + v[j];
    }
    s
}

pub(crate) fn invert_spd(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.clone().try_inverse())
        .ok_or(Error::Singular { what })
}

/// Per-cell working quantities at fixed `(delta, v)`.
pub(crate) struct CellWork {
    /// `Sigma^-1` per cell.
    pub sigma_inv: Vec<DMatrix<f64>>,
    /// `Sigma^-1 1` per cell.
    pub si1: Vec<DVector<f64>>,
    /// `Sigma^-1 X*` per cell.
    pub six: Vec<DMatrix<f64>>,
}

impl CellWork {
    pub fn build(
        sample: &LinkedSample,
        sigma2_u: f64,
        sigma2_e: f64,
        v: &[DVector<f64>],
    ) -> Result<Self> {
        let mut sigma_inv = Vec::with_capacity(sample.cells.len());
        let mut si1 = Vec::with_capacity(sample.cells.len());
        let mut six = Vec::with_capacity(sample.cells.len());
        for (k, cell) in sample.cells.iter().enumerate() {
            let s = cell_sigma(cell.n_sample(), sigma2_u, sigma2_e, &v[k]);
            let inv = invert_spd(&s, "cell covariance")?;
            si1.push(&inv * DVector::from_element(cell.n_sample(), 1.0));
            six.push(&inv * sample.cell_x_star(cell));
            sigma_inv.push(inv);
        }
        Ok(Self {
            sigma_inv,
            si1,
            six,
        })
    }

    /// GLS estimate of beta and the information `sum X*' Sigma^-1 X*`.
    pub fn gls_beta(&self, sample: &LinkedSample) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = sample.p();
        let mut g = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for (k, cell) in sample.cells.iter().enumerate() {
            let xs = sample.cell_x_star(cell);
            let ys = sample.cell_y_star(cell);
            g += xs.transpose() * &self.six[k];
            rhs += self.six[k].transpose() * ys;
        }
        let ginv = invert_spd(&g, "GLS information")?;
        Ok((&ginv * rhs, g))
    }
}

fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let g = x.transpose() * x;
    let rhs = x.transpose() * y;
    Ok(&invert_spd(&g, "OLS normal equations")? * rhs)
}

/// ANOVA-type moment starting values from one-way residual sums of squares.
fn anova_init(sample: &LinkedSample, resid: &DVector<f64>) -> (f64, f64) {
    let n = sample.n() as f64;
    let d = sample.n_areas();
    let mut area_rows: Vec<Vec<usize>> = vec![Vec::new(); d];
    for cell in &sample.cells {
        area_rows[cell.area].extend_from_slice(&cell.rows);
    }
    let grand = resid.sum() / n;
    let mut ssw = 0.0;
    let mut ssb = 0.0;
    let mut sum_ni2 = 0.0;
    for rows in &area_rows {
        let ni = rows.len() as f64;
        let mean = rows.iter().map(|&r| resid[r]).sum::<f64>() / ni;
        ssw += rows.iter().map(|&r| (resid[r] - mean).powi(2)).sum::<f64>();
        ssb += ni * (mean - grand).powi(2);
        sum_ni2 += ni * ni;
    }
    let sigma2_e = if n as usize > d {
        (ssw / (n - d as f64)).max(1e-8)
    } else {
        resid.iter().map(|r| r * r).sum::<f64>() / n
    };
    let sigma2_u = if d > 1 {
        let n_eff = (n - sum_ni2 / n) / (d as f64 - 1.0);
        ((ssb / (d as f64 - 1.0) - sigma2_e) / n_eff).max(0.0)
    } else {
        0.0
    };
    (sigma2_u, sigma2_e)
}

struct RemlDerivatives {
    score: Vector2<f64>,
    info: Matrix2<f64>,
}

/// REML score and expected information for `(sigma2_u, sigma2_e)` with the
/// linkage variances held fixed, evaluated at the GLS beta for the same
/// covariance.
fn reml_score_info(
    sample: &LinkedSample,
    work: &CellWork,
    ginv: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> RemlDerivatives {
    let p = sample.p();
    let mut tr_si_j = 0.0; // sum tr(Sigma^-1 J)
    let mut tr_si = 0.0; // sum tr(Sigma^-1)
    let mut quad_u = 0.0; // sum (1' Sigma^-1 r)^2
    let mut quad_e = 0.0; // sum ||Sigma^-1 r||^2
    let mut m_u = DMatrix::zeros(p, p);
    let mut m_e = DMatrix::zeros(p, p);
    let mut n_uu = DMatrix::zeros(p, p);
    let mut n_ue = DMatrix::zeros(p, p);
    let mut n_ee = DMatrix::zeros(p, p);
    let mut tr_aa_uu = 0.0;
    let mut tr_aa_ue = 0.0;
    let mut tr_aa_ee = 0.0;

    for (k, cell) in sample.cells.iter().enumerate() {
        let si = &work.sigma_inv[k];
        let si1 = &work.si1[k];
        let six = &work.six[k];
        let xs = sample.cell_x_star(cell);
        let ys = sample.cell_y_star(cell);
        let r = ys - &xs * beta;

        let a = si1.sum(); // 1' Sigma^-1 1
        tr_si_j += a;
        tr_si += si.trace();

        let sir = si * &r;
        let one_sir = si1.dot(&r);
        quad_u += one_sir * one_sir;
        quad_e += sir.dot(&sir);

        let xs1 = xs.transpose() * si1; // X*' Sigma^-1 1
        m_u += &xs1 * xs1.transpose();
        m_e += six.transpose() * six;

        let w = six.transpose() * si1; // X*' Sigma^-2 1
        n_uu += (&xs1 * xs1.transpose()) * a;
        n_ue += &xs1 * w.transpose();
        n_ee += six.transpose() * (si * six);

        tr_aa_uu += a * a;
        tr_aa_ue += si1.dot(si1);
        tr_aa_ee += si.iter().map(|e| e * e).sum::<f64>();
    }

    let tr_p = |tr_a: f64, m: &DMatrix<f64>| tr_a - (ginv * m).trace();
    let score_u = -0.5 * (tr_p(tr_si_j, &m_u) - quad_u);
    let score_e = -0.5 * (tr_p(tr_si, &m_e) - quad_e);

    // tr(P Sigma_l P Sigma_k) with the cross terms through the projection.
    let n_eu = n_ue.transpose();
    let tr_pp = |tr_aa: f64, n_lk: &DMatrix<f64>, n_kl: &DMatrix<f64>, m_l: &DMatrix<f64>, m_k: &DMatrix<f64>| {
        tr_aa - (ginv * n_lk).trace() - (ginv * n_kl).trace()
            + (ginv * m_l * ginv * m_k).trace()
    };
    let i_uu = 0.5 * tr_pp(tr_aa_uu, &n_uu, &n_uu, &m_u, &m_u);
    let i_ue = 0.5 * tr_pp(tr_aa_ue, &n_ue, &n_eu, &m_u, &m_e);
    let i_ee = 0.5 * tr_pp(tr_aa_ee, &n_ee, &n_ee, &m_e, &m_e);

    RemlDerivatives {
        score: Vector2::new(score_u, score_e),
        info: Matrix2::new(i_uu, i_ue, i_ue, i_ee),
    }
}

/// REML score at `(s2u, s2e)` with the GLS beta profiled out.
fn reml_score_for(
    sample: &LinkedSample,
    v: &[DVector<f64>],
    s2u: f64,
    s2e: f64,
) -> Result<Vector2<f64>> {
    let work = CellWork::build(sample, s2u, s2e, v)?;
    let (beta, g) = work.gls_beta(sample)?;
    let ginv = invert_spd(&g, "GLS information")?;
    Ok(reml_score_info(sample, &work, &ginv, &beta).score)
}

/// Bracketed bisection on one score component with the other fixed; the
/// restricted likelihood decays with vanishing score as a component grows,
/// so the bracket expands right from a positive score and shrinks toward
/// the floor from a negative one.
fn solve_score_component(
    sample: &LinkedSample,
    v: &[DVector<f64>],
    comp: usize,
    s2u: f64,
    s2e: f64,
) -> Result<f64> {
    let floor = if comp == 0 { 0.0 } else { 1e-8 };
    let eval = |x: f64| -> Result<f64> {
        let (u, e) = if comp == 0 { (x, s2e) } else { (s2u, x) };
        Ok(reml_score_for(sample, v, u, e)?[comp])
    };
    let x0 = (if comp == 0 { s2u } else { s2e }).max(floor);
    let f0 = eval(x0)?;
    if f0 == 0.0 {
        return Ok(x0);
    }
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

fn invert_info(info: &Matrix2<f64>) -> (Matrix2<f64>, bool) {
    if let Some(inv) = info.try_inverse() {
        if inv.iter().all(|x| x.is_finite()) && inv[(0, 0)] >= 0.0 && inv[(1, 1)] >= 0.0 {
            return (inv, false);
        }
    }
    // Pseudo-inverse through the symmetric eigendecomposition.
    let eig = info.symmetric_eigen();
    let tol = 1e-12 * eig.eigenvalues.amax().max(1.0);
    let mut out = Matrix2::zeros();
    for j in 0..2 {
        let ev = eig.eigenvalues[j];
        if ev.abs() > tol {
            let v = eig.eigenvectors.column(j);
            out += (v * v.transpose()) / ev;
        }
    }
    (out, true)
}

/// Fit the linkage-corrected mixed model by alternating GLS for beta, a
/// rebuild of the linkage variances, and Fisher scoring for the variance
/// components.
pub fn fit_lmm_linked(sample: &LinkedSample, opts: &LmmOptions) -> Result<MixedFit> {
    let n = sample.n();
    let p = sample.p();
    if n <= p {
        return Err(Error::InvalidInput(format!(
            "need more observations ({n}) than covariates ({p})"
        )));
    }

    let mut beta = ols(&sample.x_star, &sample.y_star)?;
    let resid0 = &sample.y_star - &sample.x_star * &beta;
    let (mut sigma2_u, mut sigma2_e) = anova_init(sample, &resid0);

    let mut converged = false;
    let mut iterations = 0;
    let mut score_norm = f64::INFINITY;
    let mut boundary = false;
    let mut last_change = f64::INFINITY;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let f = &sample.x * &beta;
        let v = sample.linkage_variances(&f);
        let work = CellWork::build(sample, sigma2_u, sigma2_e, &v)?;
        let (beta_new, g) = work.gls_beta(sample)?;
        let ginv = invert_spd(&g, "GLS information")?;
        let deriv = reml_score_info(sample, &work, &ginv, &beta_new);
        score_norm = deriv.score.amax();

        let (info_inv, _) = invert_info(&deriv.info);
        let step = info_inv * deriv.score;
        let mut new_u = (sigma2_u + step[0]).max(0.0);
        let mut new_e = (sigma2_e + step[1]).max(1e-8);
        // Fall back to coordinate-wise bracketed root finds when the
        // scoring step stalls (singular information or non-finite step).
        let stalled = !new_u.is_finite()
            || !new_e.is_finite()
            || reml_score_for(sample, &v, new_u, new_e)?.amax() >= deriv.score.amax();
        if stalled {
            new_e = solve_score_component(sample, &v, 1, sigma2_u, sigma2_e)?;
            new_u = solve_score_component(sample, &v, 0, sigma2_u, new_e)?;
        }
        // Components pinned at their bound with an outward-pointing score
        // are boundary solutions; their score need not vanish there.
        let floor_u = new_u <= 0.0;
        let floor_e = new_e <= 1e-8;
        boundary = floor_u || floor_e;

        let change = |old: f64, new: f64| (new - old).abs() / (1.0 + old.abs());
        last_change = (0..p)
            .map(|j| change(beta[j], beta_new[j]))
            .fold(0.0f64, f64::max)
            .max(change(sigma2_u, new_u))
            .max(change(sigma2_e, new_e));

        beta = beta_new;
        sigma2_u = new_u;
        sigma2_e = new_e;

        let score_ok = (floor_u || deriv.score[0].abs() < 5e-6)
            && (floor_e || deriv.score[1].abs() < 5e-6);
        if last_change < opts.tol && score_ok {
            converged = true;
            break;
        }
    }

    if !converged {
        return Err(Error::NonConvergence {
            what: "pseudo-REML fit",
            iterations,
            norms: vec![last_change, score_norm],
        });
    }

    // Final refresh so every reported quantity is evaluated at the same
    // (beta, delta, V) state.
    let f = &sample.x * &beta;
    let v = sample.linkage_variances(&f);
    let work = CellWork::build(sample, sigma2_u, sigma2_e, &v)?;
    let (beta_fin, g) = work.gls_beta(sample)?;
    beta = beta_fin;
    let ginv = invert_spd(&g, "GLS information")?;
    let deriv = reml_score_info(sample, &work, &ginv, &beta);
    let (v_delta, pseudo) = invert_info(&deriv.info);

    // GLS normal equation residual at the solution.
    let mut eq = DVector::zeros(p);
    for (k, cell) in sample.cells.iter().enumerate() {
        let r = sample.cell_y_star(cell) - sample.cell_x_star(cell) * &beta;
        eq += work.six[k].transpose() * r;
    }

    let mut fit = MixedFit {
        beta,
        sigma2_u,
        sigma2_e,
        u_star: Vec::new(),
        u_starstar: Vec::new(),
        v_diag: v,
        info: deriv.info,
        v_delta,
        gls_info: g,
        converged,
        iterations,
        score_norm: deriv.score.amax(),
        gls_residual_norm: eq.amax(),
        boundary,
        pseudo_inverse_used: pseudo,
    };
    fit.u_star = predict_area_effects_star(&fit, sample)?;
    fit.u_starstar = predict_area_effects_starstar(&fit, sample)?;
    Ok(fit)
}

/// Area effect predictor from corrected residuals:
/// `u*_i = sum_q sigma2_u 1' Sigma^-1 (y* - X* beta)`.
pub fn predict_area_effects_star(fit: &MixedFit, sample: &LinkedSample) -> Result<Vec<f64>> {
    let work = CellWork::build(sample, fit.sigma2_u, fit.sigma2_e, &fit.v_diag)?;
    let mut u = vec![0.0; sample.n_areas()];
    for (k, cell) in sample.cells.iter().enumerate() {
        let r = sample.cell_y_star(cell) - sample.cell_x_star(cell) * &fit.beta;
        u[cell.area] += fit.sigma2_u * work.si1[k].dot(&r);
    }
    Ok(u)
}

/// Modified area effect predictor
/// `u**_i = sum_q lambda_q sigma2_u 1' Sigma^-1 (y* - X beta)`, which damps
/// the unstable part of the corrected residual instead of unbiasing it.
pub fn predict_area_effects_starstar(fit: &MixedFit, sample: &LinkedSample) -> Result<Vec<f64>> {
    let work = CellWork::build(sample, fit.sigma2_u, fit.sigma2_e, &fit.v_diag)?;
    let mut u = vec![0.0; sample.n_areas()];
    for (k, cell) in sample.cells.iter().enumerate() {
        let r = sample.cell_y_star(cell) - sample.cell_x(cell) * &fit.beta;
        u[cell.area] += cell.effective_lambda() * fit.sigma2_u * work.si1[k].dot(&r);
    }
    Ok(u)
}

/// EBLUP of the area means:
/// `N^-1 { n ybar* + (N - n) (xbar*_r' beta + u) }`.
pub fn predict_means_eblup(
    fit: &MixedFit,
    sample: &LinkedSample,
    aggregates: &[AreaAggregates],
    variant: EblupVariant,
) -> Result<Vec<AreaPrediction>> {
    if aggregates.len() != sample.n_areas() {
        return Err(Error::DimensionMismatch {
            what: "area aggregates",
            expected: sample.n_areas(),
            got: aggregates.len(),
        });
    }
    let u = match variant {
        EblupVariant::Star => &fit.u_star,
        EblupVariant::StarStar => &fit.u_starstar,
    };
    Ok(aggregates
        .iter()
        .enumerate()
        .map(|(i, agg)| {
            let remainder = agg.n_pop - agg.n_sample as f64;
            let synthetic = agg.xbar_nonsampled_star.dot(&fit.beta) + u[i];
            let point = (agg.n_sample as f64 * agg.ybar_sample_star + remainder * synthetic)
                / agg.n_pop;
            AreaPrediction {
                area_id: sample.area_ids[i].clone(),
                point,
                mse: None,
                components: None,
            }
        })
        .collect())
}

/// Prasad–Rao style MSE decomposition for one EBLUP variant.
#[derive(Debug, Clone)]
pub struct EblupMse {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: Option<f64>,
    pub total: f64,
}

fn mse_eblup_impl(
    fit: &MixedFit,
    sample: &LinkedSample,
    aggregates: &[AreaAggregates],
    variant: EblupVariant,
) -> Result<Vec<EblupMse>> {
    let work = CellWork::build(sample, fit.sigma2_u, fit.sigma2_e, &fit.v_diag)?;
    let ginv = invert_spd(&fit.gls_info, "GLS information")?;
    let s2u = fit.sigma2_u;
    let p = sample.p();

    let mut out = Vec::with_capacity(sample.n_areas());
    for (i, agg) in aggregates.iter().enumerate() {
        let lam = |k: usize| match variant {
            EblupVariant::Star => 1.0,
            EblupVariant::StarStar => sample.cells[k].effective_lambda(),
        };

        // g1: z' [Sigma_u - shrinkage] z with the variant's lambda weights.
        let mut sum_a_lam = 0.0;
        let mut sum_a_lam2 = 0.0;
        let mut c_vec = DVector::zeros(p);
        for &k in &sample.area_cells[i] {
            let a = work.si1[k].sum();
            sum_a_lam += lam(k) * a;
            sum_a_lam2 += lam(k) * lam(k) * a;
            let xs = sample.cell_x_star(&sample.cells[k]);
            c_vec += (xs.transpose() * &work.si1[k]) * lam(k);
        }
        let g1 = match variant {
            EblupVariant::Star => s2u - s2u * s2u * sum_a_lam,
            // Exact variance of the damped predictor; reduces to the star
            // form when every lambda is one.
            EblupVariant::StarStar => s2u * (1.0 + s2u * sum_a_lam2 - 2.0 * s2u * sum_a_lam),
        };

        // g2: C (sum X*' Sigma^-1 X*)^-1 C' with C = xbar_i' - z' Su sum Z'S^-1X*.
        let c = agg.xbar_pop.clone() - c_vec * s2u;
        let g2 = (c.transpose() * &ginv * &c)[(0, 0)];

        // g3: tr( grad_b Sigma grad_b' V(delta) ) over the area's cells.
        let mut a_mat: Matrix2<f64> = Matrix2::zeros();
        for &k in &sample.area_cells[i] {
            let cell = &sample.cells[k];
            let si = &work.sigma_inv[k];
            let si1 = &work.si1[k];
            let a = si1.sum();
            let l = lam(k);
            // d(l s2u 1'S^-1)/d s2u and /d s2e.
            let db_u = si1 * (l * (1.0 - s2u * a));
            let db_e = (si * si1) * (-l * s2u);
            let sigma = cell_sigma(cell.n_sample(), s2u, fit.sigma2_e, &fit.v_diag[k]);
            let su = &sigma * &db_u;
            let se = &sigma * &db_e;
            a_mat[(0, 0)] += db_u.dot(&su);
            a_mat[(0, 1)] += db_u.dot(&se);
            a_mat[(1, 0)] += db_e.dot(&su);
            a_mat[(1, 1)] += db_e.dot(&se);
        }
        let g3 = (a_mat * fit.v_delta).trace();

        let fpc = (1.0 - agg.n_sample as f64 / agg.n_pop).powi(2);
        out.push(EblupMse {
            g1,
            g2,
            g3,
            g4: None,
            total: fpc * (g1 + g2 + 2.0 * g3),
        });
    }
    Ok(out)
}

/// MSE estimator for the star-EBLUP: `(1 - n/N)^2 (g1* + g2* + 2 g3*)`.
pub fn mse_eblup_star(
    fit: &MixedFit,
    sample: &LinkedSample,
    aggregates: &[AreaAggregates],
) -> Result<Vec<EblupMse>> {
    mse_eblup_impl(fit, sample, aggregates, EblupVariant::Star)
}

/// MSE estimator for the star-star-EBLUP, with the lambda factors carried
/// through the shrinkage, regression and derivative terms.
pub fn mse_eblup_starstar(
    fit: &MixedFit,
    sample: &LinkedSample,
    aggregates: &[AreaAggregates],
) -> Result<Vec<EblupMse>> {
    mse_eblup_impl(fit, sample, aggregates, EblupVariant::StarStar)
}

/// Analytic derivative of the predictor row `b' = sigma2_u 1' Sigma^-1` of
/// one cell with respect to its block lambda, holding `(beta, delta)` fixed.
/// Lambda enters only through the linkage variance diagonal.
pub(crate) fn db_dlambda_cell(
    sample: &LinkedSample,
    fit: &MixedFit,
    work: &CellWork,
    f: &DVector<f64>,
    moments: &[(f64, f64)],
    cell_idx: usize,
) -> DVector<f64> {
    let cell = &sample.cells[cell_idx];
    let lambda = cell.effective_lambda();
    let (fbar, fbar2) = moments[cell.block];
    let spread = (fbar2 - fbar * fbar).max(0.0);
    let dv = DVector::from_iterator(
        cell.rows.len(),
        cell.rows
            .iter()
            .map(|&r| (1.0 - 2.0 * lambda) * (f[r] - fbar).powi(2) - spread),
    );
    let si = &work.sigma_inv[cell_idx];
    let si1 = &work.si1[cell_idx];
    // d(s2u 1'S^-1)/d lambda = -s2u 1'S^-1 diag(dv) S^-1.
    let scaled = DVector::from_iterator(si1.len(), si1.iter().zip(dv.iter()).map(|(a, d)| a * d));
    (si.transpose() * scaled) * (-fit.sigma2_u)
}

/// Extra MSE term from estimated correct-linkage probabilities:
/// `g4_i = sum_{q in i} Vhat(lambda_q) (db'/dlambda) Sigma (db'/dlambda)'`.
/// Returns `None` when no block carries an audit variance.
pub fn mse_g4_lambda(fit: &MixedFit, sample: &LinkedSample) -> Result<Option<Vec<f64>>> {
    if sample.cells.iter().all(|c| c.var_lambda.is_none()) {
        return Ok(None);
    }
    let work = CellWork::build(sample, fit.sigma2_u, fit.sigma2_e, &fit.v_diag)?;
    let f = &sample.x * &fit.beta;
    let moments = sample.block_moments(&f);
    let mut g4 = vec![0.0; sample.n_areas()];
    for (k, cell) in sample.cells.iter().enumerate() {
        let var = cell.var_lambda.unwrap_or(0.0);
        if var == 0.0 || cell.n_pop < 2 {
            continue;
        }
        let db = db_dlambda_cell(sample, fit, &work, &f, &moments, k);
        let sigma = cell_sigma(cell.n_sample(), fit.sigma2_u, fit.sigma2_e, &fit.v_diag[k]);
        g4[cell.area] += var * (db.transpose() * sigma * &db)[(0, 0)];
    }
    Ok(Some(g4))
}

/// Fold the lambda-uncertainty term into the braces of the MSE totals.
pub fn add_lambda_uncertainty(
    mse: &mut [EblupMse],
    g4: &[f64],
    aggregates: &[AreaAggregates],
) {
    for ((m, &g), agg) in mse.iter_mut().zip(g4.iter()).zip(aggregates.iter()) {
        let fpc = (1.0 - agg.n_sample as f64 / agg.n_pop).powi(2);
        m.g4 = Some(g);
        m.total += fpc * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{area_aggregates, Cell};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// One block per area, lambda = 1: the plain nested-error layout.
    pub(crate) fn single_block_sample(
        d: usize,
        ni: usize,
        n_pop: usize,
        sigma2_u: f64,
        sigma2_e: f64,
        seed: u64,
    ) -> LinkedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d * ni;
        let mut y = DVector::zeros(n);
        let mut x = DMatrix::zeros(n, 2);
        let mut cells = Vec::new();
        for i in 0..d {
            // Deterministic area effects keep the fixture away from the
            // sigma2_u = 0 boundary.
            let u = sigma2_u.sqrt() * 1.5 * ((i as f64 + 1.0) * 2.399963).sin();
            let mut xsum = 0.0;
            for j in 0..ni {
                let r = i * ni + j;
                let xv: f64 = 1.0 + 2.0 * rng.gen::<f64>();
                let e = rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma2_e.sqrt();
                x[(r, 0)] = 1.0;
                x[(r, 1)] = xv;
                y[r] = 10.0 + 3.0 * xv + u + e;
                xsum += xv;
            }
            // Population mean: sampled part plus a synthetic remainder.
            let xbar = (xsum + (n_pop - ni) as f64 * 2.0) / n_pop as f64;
            cells.push(Cell {
                area: i,
                block: 0,
                lambda: 1.0,
                var_lambda: None,
                n_pop,
                xbar_pop: DVector::from_row_slice(&[1.0, xbar]),
                rows: (i * ni..i * ni + ni).collect(),
            });
        }
        LinkedSample::new(
            (0..d).map(|i| format!("a{i}")).collect(),
            vec!["b0".into()],
            y,
            x,
            cells,
        )
        .unwrap()
    }

    /// Brute-force restricted log-likelihood for the nested-error model
    /// using full dense matrices; independent of the per-cell code path.
    /// Linkage variances enter as known diagonal offsets per cell.
    fn brute_reml_loglik_v(
        sample: &LinkedSample,
        s2u: f64,
        s2e: f64,
        v: &[DVector<f64>],
    ) -> f64 {
        let n = sample.n();
        let mut sigma = DMatrix::zeros(n, n);
        for (k, cell) in sample.cells.iter().enumerate() {
            for &r in &cell.rows {
                for &s in &cell.rows {
                    sigma[(r, s)] += s2u;
                }
                sigma[(r, r)] += s2e;
            }
            for (local, &r) in cell.rows.iter().enumerate() {
                sigma[(r, r)] += v[k][local];
            }
        }
        let si = sigma.clone().try_inverse().unwrap();
        let x = &sample.x_star;
        let g = x.transpose() * &si * x;
        let beta = g.clone().try_inverse().unwrap() * x.transpose() * &si * &sample.y_star;
        let r = &sample.y_star - x * beta;
        let quad = (r.transpose() * &si * &r)[(0, 0)];
        let ld_sigma = sigma.determinant().ln();
        let ld_g = g.determinant().ln();
        -0.5 * (ld_sigma + ld_g + quad)
    }

    fn brute_reml_loglik(sample: &LinkedSample, s2u: f64, s2e: f64) -> f64 {
        let v: Vec<DVector<f64>> = sample
            .cells
            .iter()
            .map(|c| DVector::zeros(c.n_sample()))
            .collect();
        brute_reml_loglik_v(sample, s2u, s2e, &v)
    }

    #[test]
    fn reml_score_matches_brute_force_gradient() {
        // Pseudo-REML score with linkage variances held fixed, against a
        // central finite difference of the dense restricted likelihood.
        let base = single_block_sample(3, 6, 30, 1.0, 2.0, 19);
        let mut cells = base.cells.clone();
        for c in cells.iter_mut() {
            c.lambda = 0.8;
        }
        let sample = LinkedSample::new(
            base.area_ids.clone(),
            base.block_ids.clone(),
            base.y_star.clone(),
            base.x.clone(),
            cells,
        )
        .unwrap();
        let beta = DVector::from_row_slice(&[10.0, 3.0]);
        let v = sample.linkage_variances(&(&sample.x * &beta));
        for (s2u, s2e) in [(1.5, 1.2), (0.7, 2.5)] {
            let work = CellWork::build(&sample, s2u, s2e, &v).unwrap();
            let (beta_gls, g) = work.gls_beta(&sample).unwrap();
            let ginv = invert_spd(&g, "t").unwrap();
            let deriv = reml_score_info(&sample, &work, &ginv, &beta_gls);
            let h = 1e-6;
            let fd_u = (brute_reml_loglik_v(&sample, s2u + h, s2e, &v)
                - brute_reml_loglik_v(&sample, s2u - h, s2e, &v))
                / (2.0 * h);
            let fd_e = (brute_reml_loglik_v(&sample, s2u, s2e + h, &v)
                - brute_reml_loglik_v(&sample, s2u, s2e - h, &v))
                / (2.0 * h);
            assert_relative_eq!(deriv.score[0], fd_u, max_relative = 1e-4, epsilon = 1e-7);
            assert_relative_eq!(deriv.score[1], fd_e, max_relative = 1e-4, epsilon = 1e-7);
        }
    }

    #[test]
    fn reml_matches_brute_force_maximum() {
        let sample = single_block_sample(2, 5, 40, 2.0, 1.5, 7);
        let fit = fit_lmm_linked(&sample, &LmmOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.boundary || fit.score_norm < 1e-5);

        // The fitted components must maximize the brute-force restricted
        // likelihood: a local grid around the fit cannot do better.
        let base = brute_reml_loglik(&sample, fit.sigma2_u, fit.sigma2_e);
        for du in [-1e-3, 1e-3] {
            for de in [-1e-3, 1e-3] {
                let ll = brute_reml_loglik(
                    &sample,
                    (fit.sigma2_u + du).max(0.0),
                    fit.sigma2_e + de,
                );
                assert!(ll <= base + 1e-9, "{ll} > {base}");
            }
        }
    }

    #[test]
    fn gls_reduces_to_ols_without_area_variance() {
        let sample = single_block_sample(3, 6, 30, 1.0, 2.0, 3);
        let v: Vec<DVector<f64>> = sample
            .cells
            .iter()
            .map(|c| DVector::zeros(c.n_sample()))
            .collect();
        let work = CellWork::build(&sample, 0.0, 2.0, &v).unwrap();
        let (beta_gls, _) = work.gls_beta(&sample).unwrap();
        let beta_ols = ols(&sample.x_star, &sample.y_star).unwrap();
        assert_relative_eq!((beta_gls - beta_ols).amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_residuals_give_zero_effects() {
        let sample = single_block_sample(2, 5, 20, 1.0, 1.0, 11);
        let mut fit = fit_lmm_linked(&sample, &LmmOptions::default()).unwrap();
        // Force y* = X* beta and re-predict.
        let mut forced = sample.clone();
        forced.y_star = &forced.x_star * &fit.beta;
        fit.v_diag = forced.linkage_variances(&(&forced.x * &fit.beta));
        let u = predict_area_effects_star(&fit, &forced).unwrap();
        assert!(u.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn residual_identity_between_corrected_and_naive_forms() {
        // Corrected residual equals the naive residual plus the leverage
        // correction (1-lambda) N/(N-1) (X - 1 xbar') beta, cellwise.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.gen::<f64>() * 4.0 });
        let y = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 10.0);
        let xbar = DVector::from_row_slice(&[1.0, 2.2]);
        let cells = vec![
            Cell {
                area: 0,
                block: 0,
                lambda: 0.65,
                var_lambda: None,
                n_pop: 9,
                xbar_pop: xbar.clone(),
                rows: (0..3).collect(),
            },
            Cell {
                area: 0,
                block: 1,
                lambda: 0.8,
                var_lambda: None,
                n_pop: 7,
                xbar_pop: DVector::from_row_slice(&[1.0, 1.7]),
                rows: (3..6).collect(),
            },
        ];
        let sample = LinkedSample::new(
            vec!["a0".into()],
            vec!["b0".into(), "b1".into()],
            y,
            x,
            cells,
        )
        .unwrap();
        let beta = DVector::from_row_slice(&[2.0, 1.3]);
        for cell in &sample.cells {
            let xs = sample.cell_x(cell);
            let xss = sample.cell_x_star(cell);
            let ys = sample.cell_y_star(cell);
            let corrected = &ys - &xss * &beta;
            let naive = &ys - &xs * &beta;
            let nn = cell.n_pop as f64;
            let mut centered = xs.clone();
            for j in 0..centered.nrows() {
                for k in 0..centered.ncols() {
                    centered[(j, k)] -= cell.xbar_pop[k];
                }
            }
            let correction = centered * &beta * ((1.0 - cell.lambda) * nn / (nn - 1.0));
            assert_relative_eq!(
                (corrected - naive - correction).amax(),
                0.0,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn scaling_equivariance() {
        let sample = single_block_sample(4, 6, 30, 2.0, 3.0, 5);
        let fit = fit_lmm_linked(&sample, &LmmOptions::default()).unwrap();
        let k = 2.5;
        let mut scaled = sample.clone();
        scaled.y_star *= k;
        let fit_k = fit_lmm_linked(&scaled, &LmmOptions::default()).unwrap();
        assert_relative_eq!(fit_k.beta[1], k * fit.beta[1], epsilon = 1e-5);
        assert_relative_eq!(fit_k.sigma2_e, k * k * fit.sigma2_e, epsilon = 1e-3);
        assert_relative_eq!(fit_k.sigma2_u, k * k * fit.sigma2_u, epsilon = 1e-3);

        let aggs = area_aggregates(&sample);
        let aggs_k = area_aggregates(&scaled);
        let p = predict_means_eblup(&fit, &sample, &aggs, EblupVariant::Star).unwrap();
        let pk = predict_means_eblup(&fit_k, &scaled, &aggs_k, EblupVariant::Star).unwrap();
        for (a, b) in p.iter().zip(pk.iter()) {
            assert_relative_eq!(b.point, k * a.point, epsilon = 1e-4);
        }
        let m = mse_eblup_star(&fit, &sample, &aggs).unwrap();
        let mk = mse_eblup_star(&fit_k, &scaled, &aggs_k).unwrap();
        for (a, b) in m.iter().zip(mk.iter()) {
            assert_relative_eq!(b.total, k * k * a.total, max_relative = 1e-3);
        }
    }

    #[test]
    fn starstar_equals_star_at_perfect_linkage() {
        let sample = single_block_sample(3, 5, 25, 1.5, 2.0, 13);
        let fit = fit_lmm_linked(&sample, &LmmOptions::default()).unwrap();
        for (a, b) in fit.u_star.iter().zip(fit.u_starstar.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
        let aggs = area_aggregates(&sample);
        let ms = mse_eblup_star(&fit, &sample, &aggs).unwrap();
        let mss = mse_eblup_starstar(&fit, &sample, &aggs).unwrap();
        for (a, b) in ms.iter().zip(mss.iter()) {
            assert_relative_eq!(a.g1, b.g1, epsilon = 1e-10);
            assert_relative_eq!(a.g2, b.g2, epsilon = 1e-10);
            assert_relative_eq!(a.g3, b.g3, epsilon = 1e-10);
        }
    }

    #[test]
    fn census_area_prediction_is_the_sample_mean() {
        let sample = single_block_sample(2, 5, 5, 1.0, 1.0, 17);
        let fit = fit_lmm_linked(&sample, &LmmOptions::default()).unwrap();
        let aggs = area_aggregates(&sample);
        let p = predict_means_eblup(&fit, &sample, &aggs, EblupVariant::Star).unwrap();
        for (pred, agg) in p.iter().zip(aggs.iter()) {
            assert_relative_eq!(pred.point, agg.ybar_sample_star, epsilon = 1e-12);
        }
    }

    #[test]
    fn lambda_gradient_matches_finite_differences() {
        // Random multi-block instance; FD recomputes b(lambda) with beta
        // and delta frozen.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for trial in 0..20 {
            let n = 8;
            let lambda = 0.3 + 0.6 * rng.gen::<f64>();
            let x = DMatrix::from_fn(n, 2, |_, c| {
                if c == 0 {
                    1.0
                } else {
                    1.0 + 4.0 * rng.gen::<f64>()
                }
            });
            let y = DVector::from_fn(n, |j, _| 5.0 + 2.0 * x[(j, 1)] + rng.gen::<f64>());
            let cells = vec![Cell {
                area: 0,
                block: 0,
                lambda,
                var_lambda: Some(0.01),
                n_pop: 20,
                xbar_pop: DVector::from_row_slice(&[1.0, 3.0]),
                rows: (0..n).collect(),
            }];
            let sample = LinkedSample::new(
                vec!["a".into()],
                vec!["b".into()],
                y,
                x,
                cells,
            )
            .unwrap();
            let beta = DVector::from_row_slice(&[5.0 + rng.gen::<f64>(), 2.0]);
            let s2u = 0.5 + rng.gen::<f64>();
            let s2e = 0.5 + rng.gen::<f64>();
            let f = &sample.x * &beta;
            let moments = sample.block_moments(&f);

            let b_of_lambda = |lam: f64| -> DVector<f64> {
                let mut s = sample.clone();
                s.cells[0].lambda = lam;
                let v = s.linkage_variances(&f);
                let work = CellWork::build(&s, s2u, s2e, &v).unwrap();
                work.si1[0].clone() * s2u
            };

            let v = sample.linkage_variances(&f);
            let work = CellWork::build(&sample, s2u, s2e, &v).unwrap();
            let fit = MixedFit {
                beta: beta.clone(),
                sigma2_u: s2u,
                sigma2_e: s2e,
                u_star: vec![],
                u_starstar: vec![],
                v_diag: v,
                info: Matrix2::identity(),
                v_delta: Matrix2::identity(),
                gls_info: DMatrix::identity(2, 2),
                converged: true,
                iterations: 0,
                score_norm: 0.0,
                gls_residual_norm: 0.0,
                boundary: false,
                pseudo_inverse_used: false,
            };
            let analytic = db_dlambda_cell(&sample, &fit, &work, &f, &moments, 0);
            let h = 1e-5;
            let fd = (b_of_lambda(lambda + h) - b_of_lambda(lambda - h)) / (2.0 * h);
            let rel = (&analytic - &fd).amax() / analytic.amax().max(1e-12);
            assert!(rel < 1e-4, "trial {trial}: relative error {rel}");
        }
    }

    #[test]
    fn g4_zero_without_audit_variance_and_nonnegative_with() {
        let base = single_block_sample(2, 6, 30, 1.0, 2.0, 19);
        let mut cells = base.cells.clone();
        for c in cells.iter_mut() {
            c.lambda = 0.8;
        }
        let sample = LinkedSample::new(
            base.area_ids.clone(),
            base.block_ids.clone(),
            base.y_star.clone(),
            base.x.clone(),
            cells,
        )
        .unwrap();
        let beta = DVector::from_row_slice(&[10.0, 3.0]);
        let v = sample.linkage_variances(&(&sample.x * &beta));
        let fit = MixedFit {
            beta,
            sigma2_u: 1.0,
            sigma2_e: 2.0,
            u_star: vec![],
            u_starstar: vec![],
            v_diag: v,
            info: Matrix2::identity(),
            v_delta: Matrix2::identity(),
            gls_info: DMatrix::identity(2, 2),
            converged: true,
            iterations: 0,
            score_norm: 0.0,
            gls_residual_norm: 0.0,
            boundary: false,
            pseudo_inverse_used: false,
        };
        assert!(mse_g4_lambda(&fit, &sample).unwrap().is_none());

        let mut with_var = sample.clone();
        for c in with_var.cells.iter_mut() {
            c.var_lambda = Some(0.0064);
        }
        let g4 = mse_g4_lambda(&fit, &with_var).unwrap().unwrap();
        assert!(g4.iter().all(|&g| g >= 0.0));
        assert!(g4.iter().any(|&g| g > 0.0));

        let mut zero_var = sample.clone();
        for c in zero_var.cells.iter_mut() {
            c.var_lambda = Some(0.0);
        }
        let g4z = mse_g4_lambda(&fit, &zero_var).unwrap().unwrap();
        assert!(g4z.iter().all(|&g| g == 0.0));
    }
}
