//! Synthetic populations, linkage simulation, sampling and the seeded
//! Monte Carlo harness.
//!
//! Replicates are fully determined by `(base_seed, replicate, stage)`
//! stream keys, so serial and parallel runs produce identical reports.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    area_aggregates_with, AreaAggregates, CellAggregate, Cell, LinkedSample,
};
use crate::error::Error;
use crate::lmm::{self, EblupVariant, LmmOptions};
use crate::mquantile::{self, CoefficientCorrection};
use crate::robust::{self, RobustConfig};
use crate::Result;

/// Model-based generating scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scenario {
    /// No real outliers: `u ~ N(0,3)`, `e ~ N(0,6)`.
    Clean,
    /// Real outliers on top: four areas with `u ~ N(0,20)` and a 3%
    /// contamination `e ~ N(0,150)`.
    Outlier,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_matches(|c| c == '(' || c == ')') {
            "0,0" | "clean" => Ok(Scenario::Clean),
            "e,u" | "outlier" => Ok(Scenario::Outlier),
            other => Err(Error::InvalidInput(format!("unknown scenario '{other}'"))),
        }
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The seven estimators of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    Eblup,
    EblupStar,
    EblupStarStar,
    Reblup,
    ReblupStar,
    Mq,
    MqStar,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::Eblup,
        Estimator::EblupStar,
        Estimator::EblupStarStar,
        Estimator::Reblup,
        Estimator::ReblupStar,
        Estimator::Mq,
        Estimator::MqStar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Eblup => "eblup",
            Estimator::EblupStar => "eblup-star",
            Estimator::EblupStarStar => "eblup-starstar",
            Estimator::Reblup => "reblup",
            Estimator::ReblupStar => "reblup-star",
            Estimator::Mq => "mq",
            Estimator::MqStar => "mq-star",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| Error::InvalidInput(format!("unknown estimator '{s}'")))
    }
}

impl<'de> Deserialize<'de> for Estimator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_areas() -> usize {
    40
}
fn default_area_size() -> usize {
    100
}
fn default_sample_size() -> usize {
    5
}
fn default_lambdas() -> Vec<f64> {
    vec![1.0, 0.9, 0.6, 0.4]
}
fn default_units_per_block() -> usize {
    25
}
fn default_replicates() -> usize {
    200
}
fn default_huber_c() -> f64 {
    1.345
}
fn default_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}
fn default_mse() -> bool {
    true
}

/// Declarative configuration of one model-based experiment.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    #[serde(default = "default_areas")]
    pub areas: usize,
    #[serde(default = "default_area_size")]
    pub area_size: usize,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_units_per_block")]
    pub units_per_block: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub base_seed: u64,
    #[serde(default = "default_huber_c")]
    pub huber_c: f64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    /// Compute the MSE estimators alongside the points.
    #[serde(default = "default_mse")]
    pub mse: bool,
    #[serde(default)]
    pub dump_scatter: bool,
    #[serde(default)]
    pub dump_replicates: bool,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.areas == 0 || self.area_size == 0 || self.replicates == 0 {
            return Err(Error::InvalidInput(
                "areas, area_size and replicates must be positive".into(),
            ));
        }
        if self.sample_size > self.area_size {
            return Err(Error::InvalidInput(format!(
                "sample_size {} exceeds area_size {}",
                self.sample_size, self.area_size
            )));
        }
        let blocks = self.area_size.div_ceil(self.units_per_block);
        if self.lambdas.len() != blocks {
            return Err(Error::InvalidInput(format!(
                "{} lambdas supplied but the block layout has {} blocks",
                self.lambdas.len(),
                blocks
            )));
        }
        if self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidInput("lambdas must lie in [0, 1]".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidInput("no estimators requested".into()));
        }
        Ok(())
    }
}

/// A complete register: true responses, linked responses and the
/// area-by-block layout.
#[derive(Debug, Clone)]
pub struct PopulationFrame {
    pub area_ids: Vec<String>,
    pub block_ids: Vec<String>,
    /// Per-unit area index.
    pub unit_area: Vec<usize>,
    /// Per-unit block index.
    pub unit_block: Vec<usize>,
    /// Covariates without the intercept column.
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub y_star: Vec<f64>,
    pub mislinked: Vec<bool>,
}

impl PopulationFrame {
    pub fn n_units(&self) -> usize {
        self.y.len()
    }

    /// Unit indices grouped by (area, block) cell.
    pub fn cell_units(&self) -> Vec<Vec<Vec<usize>>> {
        let mut cells =
            vec![vec![Vec::new(); self.block_ids.len()]; self.area_ids.len()];
        for j in 0..self.n_units() {
            cells[self.unit_area[j]][self.unit_block[j]].push(j);
        }
        cells
    }

    /// Design row (with intercept) of one unit.
    fn design_row(&self, j: usize) -> DVector<f64> {
        let k = self.x.ncols();
        let mut row = DVector::zeros(k + 1);
        row[0] = 1.0;
        for a in 0..k {
            row[a + 1] = self.x[(j, a)];
        }
        row
    }

    /// True area means of `y` (equal to those of `y*`, since linkage
    /// permutes within cells).
    pub fn area_means(&self) -> Vec<f64> {
        let mut sums = vec![(0.0, 0usize); self.area_ids.len()];
        for j in 0..self.n_units() {
            sums[self.unit_area[j]].0 += self.y[j];
            sums[self.unit_area[j]].1 += 1;
        }
        sums.into_iter().map(|(s, c)| s / c as f64).collect()
    }

    /// Population cell aggregates for the prediction stage.
    pub fn cell_aggregates(&self) -> Vec<CellAggregate> {
        let cells = self.cell_units();
        let mut out = Vec::new();
        for (i, blocks) in cells.iter().enumerate() {
            for (q, units) in blocks.iter().enumerate() {
                if units.is_empty() {
                    continue;
                }
                let mut xbar = DVector::zeros(self.x.ncols() + 1);
                for &j in units {
                    xbar += self.design_row(j);
                }
                xbar /= units.len() as f64;
                out.push(CellAggregate {
                    area: i,
                    block: q,
                    n_pop: units.len(),
                    xbar_pop: xbar,
                });
            }
        }
        out
    }

    /// Scatter dump of the linked pairs: one row per unit.
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("area_id,block_id,x,y,y_star,mislinked\n");
        for j in 0..self.n_units() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.area_ids[self.unit_area[j]],
                self.block_ids[self.unit_block[j]],
                self.x[(j, 0)],
                self.y[j],
                self.y_star[j],
                self.mislinked[j] as u8
            ));
        }
        out
    }
}

/// Stream keyed by `(base_seed, replicate, stage)`.
pub fn stream(base_seed: u64, replicate: u64, stage: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&base_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&replicate.to_le_bytes());
    seed[16..24].copy_from_slice(&stage.to_le_bytes());
    seed[24..32].copy_from_slice(&0xA5A5_5A5A_u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Generate one synthetic register: `y = 100 + 5x + u_i + e` with
/// lognormal covariates and blocks assigned by random partition of each
/// area into chunks of `units_per_block`.
pub fn generate_population<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> PopulationFrame {
    let d = config.areas;
    let n_i = config.area_size;
    let n = d * n_i;
    let blocks = config.lambdas.len();
    let lognormal = LogNormal::new(1.0, 0.5).expect("valid lognormal parameters");

    let mut unit_area = Vec::with_capacity(n);
    let mut unit_block = vec![0usize; n];
    let mut x = DMatrix::zeros(n, 1);
    let mut y = Vec::with_capacity(n);

    for i in 0..d {
        // Area effect: the outlier scenario inflates areas 37 and above.
        let u_sd = match config.scenario {
            Scenario::Clean => 3.0f64.sqrt(),
            Scenario::Outlier => {
                if i >= 36 {
                    20.0f64.sqrt()
                } else {
                    3.0f64.sqrt()
                }
            }
        };
        let u: f64 = rng.sample::<f64, _>(StandardNormal) * u_sd;
        for j in 0..n_i {
            let r = i * n_i + j;
            let xv = lognormal.sample(rng);
            let e_sd = match config.scenario {
                Scenario::Clean => 6.0f64.sqrt(),
                Scenario::Outlier => {
                    if rng.gen::<f64>() < 0.97 {
                        6.0f64.sqrt()
                    } else {
                        150.0f64.sqrt()
                    }
                }
            };
            let e: f64 = rng.sample::<f64, _>(StandardNormal) * e_sd;
            unit_area.push(i);
            x[(r, 0)] = xv;
            y.push(100.0 + 5.0 * xv + u + e);
        }
        // Random block assignment in chunks.
        let mut order: Vec<usize> = (0..n_i).collect();
        for k in (1..n_i).rev() {
            let l = rng.gen_range(0..=k);
            order.swap(k, l);
        }
        for (pos, &local) in order.iter().enumerate() {
            unit_block[i * n_i + local] = (pos / config.units_per_block).min(blocks - 1);
        }
    }

    let y_star = y.clone();
    PopulationFrame {
        area_ids: (0..d).map(|i| format!("area{:02}", i + 1)).collect(),
        block_ids: (0..blocks).map(|q| format!("block{}", q + 1)).collect(),
        unit_area,
        unit_block,
        x,
        y,
        y_star,
        mislinked: vec![false; n],
    }
}

/// Overwrite `y*` with an ELE permutation draw in every cell.
pub fn apply_linkage<R: Rng + ?Sized>(
    pop: &mut PopulationFrame,
    lambdas: &[f64],
    rng: &mut R,
) {
    let cells = pop.cell_units();
    for blocks in &cells {
        for (q, units) in blocks.iter().enumerate() {
            if units.is_empty() {
                continue;
            }
            let lambda = lambdas[q];
            let draw = crate::linkage::sample_ele_permutation(units.len(), lambda, rng);
            for (slot, &unit) in units.iter().enumerate() {
                let src = units[draw.perm[slot]];
                pop.y_star[unit] = pop.y[src];
                pop.mislinked[unit] = src != unit;
            }
        }
    }
}

/// SRSWOR of `take` indices out of `from`, in ascending order.
fn srswor<R: Rng + ?Sized>(from: &[usize], take: usize, rng: &mut R) -> Vec<usize> {
    let mut pool = from.to_vec();
    let n = pool.len();
    for k in 0..take {
        let l = rng.gen_range(k..n);
        pool.swap(k, l);
    }
    let mut out = pool[..take].to_vec();
    out.sort_unstable();
    out
}

/// Draw a within-area SRSWOR sample and assemble the linked sample with
/// its cell metadata and population aggregates.
pub fn draw_sample<R: Rng + ?Sized>(
    pop: &PopulationFrame,
    sizes: &[usize],
    lambdas: &[f64],
    rng: &mut R,
) -> Result<(LinkedSample, Vec<AreaAggregates>)> {
    let d = pop.area_ids.len();
    if sizes.len() != d {
        return Err(Error::DimensionMismatch {
            what: "per-area sample sizes",
            expected: d,
            got: sizes.len(),
        });
    }
    let cells_pop = pop.cell_units();
    let mut area_units: Vec<Vec<usize>> = vec![Vec::new(); d];
    for j in 0..pop.n_units() {
        area_units[pop.unit_area[j]].push(j);
    }

    let p = pop.x.ncols() + 1;
    let mut rows_y = Vec::new();
    let mut rows_x = Vec::new();
    let mut cells = Vec::new();
    for i in 0..d {
        let chosen = srswor(&area_units[i], sizes[i].min(area_units[i].len()), rng);
        // Group the chosen units by block, preserving order.
        let mut by_block: Vec<Vec<usize>> = vec![Vec::new(); pop.block_ids.len()];
        for &j in &chosen {
            by_block[pop.unit_block[j]].push(j);
        }
        for (q, units) in by_block.iter().enumerate() {
            if units.is_empty() {
                continue;
            }
            let pop_units = &cells_pop[i][q];
            let mut xbar = DVector::zeros(p);
            for &j in pop_units {
                xbar += pop.design_row(j);
            }
            xbar /= pop_units.len() as f64;
            let mut rows = Vec::with_capacity(units.len());
            for &j in units {
                rows.push(rows_y.len());
                rows_y.push(pop.y_star[j]);
                rows_x.push(pop.design_row(j));
            }
            cells.push(Cell {
                area: i,
                block: q,
                lambda: lambdas[q],
                var_lambda: None,
                n_pop: pop_units.len(),
                xbar_pop: xbar,
                rows,
            });
        }
    }

    let n = rows_y.len();
    let mut x = DMatrix::zeros(n, p);
    for (r, row) in rows_x.iter().enumerate() {
        x.row_mut(r).copy_from(&row.transpose());
    }
    let sample = LinkedSample::new(
        pop.area_ids.clone(),
        pop.block_ids.clone(),
        DVector::from_vec(rows_y),
        x,
        cells,
    )?;
    let aggregates = area_aggregates_with(&sample, &pop.cell_aggregates())?;
    Ok((sample, aggregates))
}

/// Everything recorded from one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub truth: Vec<f64>,
    /// Per requested estimator: point predictions per area.
    pub points: Vec<Vec<f64>>,
    /// Per requested estimator: MSE estimates per area (when enabled).
    pub mses: Vec<Option<Vec<f64>>>,
    pub certificates: Certificates,
}

/// Convergence and conditioning certificates of one replicate.
#[derive(Debug, Clone, Default)]
pub struct Certificates {
    pub max_reml_score: f64,
    pub max_gls_residual_scaled: f64,
    pub max_robust_eq: f64,
    pub max_mq_eq: f64,
    pub min_sandwich_eig: f64,
    pub max_sandwich_asymmetry: f64,
    pub min_info_eig: f64,
    pub boundary_fits: usize,
}

impl Certificates {
    fn new() -> Self {
        Self {
            min_sandwich_eig: f64::INFINITY,
            min_info_eig: f64::INFINITY,
            ..Default::default()
        }
    }

    fn merge(&mut self, other: &Certificates) {
        self.max_reml_score = self.max_reml_score.max(other.max_reml_score);
        self.max_gls_residual_scaled = self
            .max_gls_residual_scaled
            .max(other.max_gls_residual_scaled);
        self.max_robust_eq = self.max_robust_eq.max(other.max_robust_eq);
        self.max_mq_eq = self.max_mq_eq.max(other.max_mq_eq);
        self.min_sandwich_eig = self.min_sandwich_eig.min(other.min_sandwich_eig);
        self.max_sandwich_asymmetry = self
            .max_sandwich_asymmetry
            .max(other.max_sandwich_asymmetry);
        self.min_info_eig = self.min_info_eig.min(other.min_info_eig);
        self.boundary_fits += other.boundary_fits;
    }
}

/// Run every requested estimator on one drawn sample.
pub fn estimate_all(
    sample: &LinkedSample,
    aggregates: &[AreaAggregates],
    estimators: &[Estimator],
    huber_c: f64,
    with_mse: bool,
) -> Result<(Vec<Vec<f64>>, Vec<Option<Vec<f64>>>, Certificates)> {
    let mut certs = Certificates::new();
    let classical = sample.collapse_to_areas();
    let classical_aggs: Vec<AreaAggregates> = aggregates
        .iter()
        .map(|a| AreaAggregates {
            xbar_nonsampled_star: a.xbar_nonsampled.clone(),
            ..a.clone()
        })
        .collect();

    let lmm_opts = LmmOptions::default();
    let rob_cfg = RobustConfig {
        c: huber_c,
        ..Default::default()
    };

    // Shared fits across estimator variants.
    let needs_lmm_star = estimators
        .iter()
        .any(|e| matches!(e, Estimator::EblupStar | Estimator::EblupStarStar));
    let lmm_star = if needs_lmm_star {
        Some(lmm::fit_lmm_linked(sample, &lmm_opts)?)
    } else {
        None
    };
    let lmm_classical = if estimators.contains(&Estimator::Eblup) {
        Some(lmm::fit_lmm_linked(&classical, &lmm_opts)?)
    } else {
        None
    };

    let mut points = Vec::with_capacity(estimators.len());
    let mut mses = Vec::with_capacity(estimators.len());

    for est in estimators {
        let (pts, mse) = match est {
            Estimator::Eblup | Estimator::EblupStar | Estimator::EblupStarStar => {
                let (fit, smp, aggs, variant) = match est {
                    Estimator::Eblup => (
                        lmm_classical.as_ref().unwrap(),
                        &classical,
                        classical_aggs.as_slice(),
                        EblupVariant::Star,
                    ),
                    Estimator::EblupStar => {
                        (lmm_star.as_ref().unwrap(), sample, aggregates, EblupVariant::Star)
                    }
                    _ => (
                        lmm_star.as_ref().unwrap(),
                        sample,
                        aggregates,
                        EblupVariant::StarStar,
                    ),
                };
                certs.max_reml_score = certs.max_reml_score.max(if fit.boundary {
                    0.0
                } else {
                    fit.score_norm
                });
                certs.max_gls_residual_scaled = certs
                    .max_gls_residual_scaled
                    .max(fit.gls_residual_norm / (1.0 + fit.beta.amax()));
                if fit.boundary {
                    certs.boundary_fits += 1;
                }
                let info_sym = (fit.info + fit.info.transpose()) * 0.5;
                let min_eig = info_sym.symmetric_eigen().eigenvalues.min();
                certs.min_info_eig = certs.min_info_eig.min(min_eig);

                let preds = lmm::predict_means_eblup(fit, smp, aggs, variant)?;
                let mse = if with_mse {
                    let parts = match variant {
                        EblupVariant::Star => lmm::mse_eblup_star(fit, smp, aggs)?,
                        EblupVariant::StarStar => lmm::mse_eblup_starstar(fit, smp, aggs)?,
                    };
                    Some(parts.into_iter().map(|m| m.total).collect())
                } else {
                    None
                };
                (preds.into_iter().map(|p| p.point).collect(), mse)
            }
            Estimator::Reblup | Estimator::ReblupStar => {
                let (smp, aggs) = match est {
                    Estimator::Reblup => (&classical, classical_aggs.as_slice()),
                    _ => (sample, aggregates),
                };
                let fit = robust::fit_reblup_star(smp, &rob_cfg)?;
                certs.max_robust_eq = certs
                    .max_robust_eq
                    .max(fit.eq_norms.iter().fold(0.0f64, |a, &b| a.max(b)));
                if fit.boundary {
                    certs.boundary_fits += 1;
                }
                let preds = robust::predict_means_reblup_star(&fit, smp, aggs)?;
                let mse = if with_mse {
                    let sw = robust::sandwich_cov(&fit, smp)?;
                    certs.min_sandwich_eig = certs.min_sandwich_eig.min(sw.min_eigenvalue);
                    certs.max_sandwich_asymmetry =
                        certs.max_sandwich_asymmetry.max(sw.max_asymmetry);
                    let parts = robust::mse_reblup_star(&fit, smp, aggs)?;
                    Some(parts.into_iter().map(|m| m.total).collect())
                } else {
                    None
                };
                (preds.into_iter().map(|p| p.point).collect(), mse)
            }
            Estimator::Mq | Estimator::MqStar => {
                let (smp, aggs) = match est {
                    Estimator::Mq => (&classical, classical_aggs.as_slice()),
                    _ => (sample, aggregates),
                };
                let grid =
                    mquantile::fit_mq_grid(smp, &mquantile::default_tau_grid(), &rob_cfg)?;
                let coefs =
                    mquantile::mq_coefficients(smp, &grid, CoefficientCorrection::Half)?;
                let area_fits = mquantile::fit_mq_areas(smp, &coefs, &grid, &rob_cfg)?;
                for f in &area_fits.fits {
                    certs.max_mq_eq = certs.max_mq_eq.max(f.eq_norm);
                }
                let preds = mquantile::predict_means_mq_star(smp, &area_fits, aggs)?;
                let mse = if with_mse {
                    let parts =
                        mquantile::mse_mq_star(smp, &coefs, &area_fits, aggs, &rob_cfg)?;
                    Some(parts.into_iter().map(|m| m.total).collect())
                } else {
                    None
                };
                (preds.into_iter().map(|p| p.point).collect(), mse)
            }
        };
        points.push(pts);
        mses.push(mse);
    }
    Ok((points, mses, certs))
}

fn run_replicate(config: &ScenarioConfig, rep: u64) -> Result<ReplicateResult> {
    let mut rng_pop = stream(config.base_seed, rep, 0);
    let mut pop = generate_population(config, &mut rng_pop);
    let mut rng_link = stream(config.base_seed, rep, 1);
    apply_linkage(&mut pop, &config.lambdas, &mut rng_link);
    let mut rng_sample = stream(config.base_seed, rep, 2);
    let sizes = vec![config.sample_size; config.areas];
    let (sample, aggregates) = draw_sample(&pop, &sizes, &config.lambdas, &mut rng_sample)?;
    let truth = pop.area_means();
    let (points, mses, certificates) = estimate_all(
        &sample,
        &aggregates,
        &config.estimators,
        config.huber_c,
        config.mse,
    )?;
    Ok(ReplicateResult {
        truth,
        points,
        mses,
        certificates,
    })
}

/// One line of the point-estimation summary.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorRow {
    pub estimator: String,
    pub median_relbias_pct: f64,
    pub median_rrmse_pct: f64,
    /// 100 x MSE ratio against the EBLUP baseline, median across areas.
    pub eff: Option<f64>,
}

/// One line of the MSE-estimator summary.
#[derive(Debug, Clone, Serialize)]
pub struct MseRow {
    pub estimator: String,
    pub median_relbias_pct: f64,
    pub median_rrmse_pct: f64,
}

/// Aggregated Monte Carlo report.
#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub estimators: Vec<Estimator>,
    pub rows: Vec<EstimatorRow>,
    pub mse_rows: Vec<MseRow>,
    pub replicates_run: usize,
    pub failures: usize,
    /// One line per failed replicate: index and error.
    pub failure_log: Vec<String>,
    pub certificates: Certificates,
    /// Scatter dump of the first replicate's population, when requested.
    pub scatter: Option<String>,
    /// Per-replicate point dump, when requested.
    pub replicate_dump: Option<String>,
}

impl SimulationReport {
    pub fn table1_csv(&self) -> String {
        let mut out = String::from("estimator,median_relbias_pct,median_rrmse_pct,eff\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.estimator,
                row.median_relbias_pct,
                row.median_rrmse_pct,
                row.eff.map_or(String::new(), |e| e.to_string())
            ));
        }
        out
    }

    pub fn table2_csv(&self) -> String {
        let mut out = String::from("estimator,median_relbias_pct,median_rrmse_pct\n");
        for row in &self.mse_rows {
            out.push_str(&format!(
                "{},{},{}\n",
                row.estimator, row.median_relbias_pct, row.median_rrmse_pct
            ));
        }
        out
    }

    pub fn row(&self, est: Estimator) -> Option<&EstimatorRow> {
        self.rows.iter().find(|r| r.estimator == est.name())
    }

    pub fn mse_row(&self, est: Estimator) -> Option<&MseRow> {
        self.mse_rows.iter().find(|r| r.estimator == est.name())
    }
}

pub(crate) fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregate replicate results into the report tables.
pub fn metrics(
    estimators: &[Estimator],
    results: &[ReplicateResult],
) -> Result<SimulationReport> {
    let r = results.len();
    if r < 2 {
        return Err(Error::InvalidInput(
            "need at least two replicates to aggregate".into(),
        ));
    }
    let d = results[0].truth.len();
    let baseline = estimators.iter().position(|e| *e == Estimator::Eblup);

    // Per estimator and area: mean error, mean squared error, mean truth.
    let mut rows = Vec::with_capacity(estimators.len());
    let mut mse_rows = Vec::new();
    let mut area_mse = vec![vec![0.0; d]; estimators.len()];
    let mut mean_truth = vec![0.0; d];
    for res in results {
        for i in 0..d {
            mean_truth[i] += res.truth[i] / r as f64;
        }
    }
    for (e_idx, est) in estimators.iter().enumerate() {
        let mut relbias = Vec::with_capacity(d);
        let mut rrmse = Vec::with_capacity(d);
        for i in 0..d {
            let mut mean_err = 0.0;
            let mut mean_sq = 0.0;
            for res in results {
                let err = res.points[e_idx][i] - res.truth[i];
                mean_err += err / r as f64;
                mean_sq += err * err / r as f64;
            }
            area_mse[e_idx][i] = mean_sq;
            relbias.push(100.0 * mean_err / mean_truth[i]);
            rrmse.push(100.0 * mean_sq.sqrt() / mean_truth[i]);
        }
        rows.push(EstimatorRow {
            estimator: est.name().to_string(),
            median_relbias_pct: median_of(relbias),
            median_rrmse_pct: median_of(rrmse),
            eff: None,
        });
    }
    if let Some(b) = baseline {
        for e_idx in 0..estimators.len() {
            let ratios: Vec<f64> = (0..d)
                .map(|i| 100.0 * area_mse[e_idx][i] / area_mse[b][i])
                .collect();
            rows[e_idx].eff = Some(median_of(ratios));
        }
    }

    // Root-MSE estimator diagnostics against the empirical root MSE.
    for (e_idx, est) in estimators.iter().enumerate() {
        if results.iter().any(|res| res.mses[e_idx].is_none()) {
            continue;
        }
        let mut relbias = Vec::with_capacity(d);
        let mut rrmse = Vec::with_capacity(d);
        for i in 0..d {
            let emp_rmse = area_mse[e_idx][i].sqrt();
            let mut mean_est = 0.0;
            let mut mean_sq_dev = 0.0;
            for res in results {
                let est_rmse = res.mses[e_idx].as_ref().unwrap()[i].max(0.0).sqrt();
                mean_est += est_rmse / r as f64;
                mean_sq_dev += (est_rmse - emp_rmse).powi(2) / r as f64;
            }
            relbias.push(100.0 * (mean_est - emp_rmse) / emp_rmse);
            rrmse.push(100.0 * mean_sq_dev.sqrt() / emp_rmse);
        }
        mse_rows.push(MseRow {
            estimator: est.name().to_string(),
            median_relbias_pct: median_of(relbias),
            median_rrmse_pct: median_of(rrmse),
        });
    }

    let mut certs = Certificates::new();
    for res in results {
        certs.merge(&res.certificates);
    }
    Ok(SimulationReport {
        estimators: estimators.to_vec(),
        rows,
        mse_rows,
        replicates_run: r,
        failures: 0,
        failure_log: Vec::new(),
        certificates: certs,
        scatter: None,
        replicate_dump: None,
    })
}

/// Run the full model-based experiment: replicates execute in parallel
/// with per-replicate seed streams and are aggregated in replicate order.
pub fn run_monte_carlo(config: &ScenarioConfig) -> Result<SimulationReport> {
    config.validate()?;
    let outcomes: Vec<Result<ReplicateResult>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|rep| run_replicate(config, rep))
        .collect();

    let mut results = Vec::with_capacity(outcomes.len());
    let mut failures = 0usize;
    let mut failure_log = Vec::new();
    for (rep, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(res) => results.push(res),
            Err(e) => {
                failures += 1;
                failure_log.push(format!("replicate {rep}: {e}"));
            }
        }
    }
    let max_failures = (0.02 * config.replicates as f64).floor() as usize;
    if failures > max_failures {
        for line in &failure_log {
            eprintln!("{line}");
        }
        return Err(Error::TooManyFailures {
            failures,
            replicates: config.replicates,
            max_pct: 2.0,
        });
    }

    let mut report = metrics(&config.estimators, &results)?;
    report.failures = failures;
    report.failure_log = failure_log;
    if config.dump_scatter {
        let mut rng_pop = stream(config.base_seed, 0, 0);
        let mut pop = generate_population(config, &mut rng_pop);
        let mut rng_link = stream(config.base_seed, 0, 1);
        apply_linkage(&mut pop, &config.lambdas, &mut rng_link);
        report.scatter = Some(pop.scatter_csv());
    }
    if config.dump_replicates {
        let mut dump = String::from("replicate,estimator,area_id,point,truth,mse_estimate\n");
        for (rep, res) in results.iter().enumerate() {
            for (e_idx, est) in config.estimators.iter().enumerate() {
                for i in 0..res.truth.len() {
                    dump.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        rep,
                        est.name(),
                        i + 1,
                        res.points[e_idx][i],
                        res.truth[i],
                        res.mses[e_idx]
                            .as_ref()
                            .map_or(String::new(), |m| m[i].to_string())
                    ));
                }
            }
        }
        report.replicate_dump = Some(dump);
    }
    Ok(report)
}

/// Design-based facility: repeated sampling from a fixed linked
/// population with proportional allocation and a minimum area take.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub total_sample_size: usize,
    #[serde(default = "default_min_area_sample")]
    pub min_area_sample: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub base_seed: u64,
    #[serde(default = "default_huber_c")]
    pub huber_c: f64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_mse")]
    pub mse: bool,
    /// Correct-linkage probability per block, aligned with the block ids.
    pub lambdas: Vec<f64>,
}

fn default_min_area_sample() -> usize {
    5
}

/// Proportional allocation with a floor.
pub fn proportional_allocation(
    area_sizes: &[usize],
    total: usize,
    min_take: usize,
) -> Vec<usize> {
    let pop: usize = area_sizes.iter().sum();
    area_sizes
        .iter()
        .map(|&n_i| {
            let share = (total as f64 * n_i as f64 / pop as f64).round() as usize;
            share.max(min_take).min(n_i)
        })
        .collect()
}

/// Repeated sampling + estimation on a fixed population whose `y*` is
/// already linked. Truths stay fixed across replicates.
pub fn run_design_based(
    pop: &PopulationFrame,
    config: &DesignConfig,
) -> Result<SimulationReport> {
    if config.lambdas.len() != pop.block_ids.len() {
        return Err(Error::InvalidInput(format!(
            "{} lambdas supplied for {} blocks",
            config.lambdas.len(),
            pop.block_ids.len()
        )));
    }
    let mut area_sizes = vec![0usize; pop.area_ids.len()];
    for j in 0..pop.n_units() {
        area_sizes[pop.unit_area[j]] += 1;
    }
    let sizes = proportional_allocation(&area_sizes, config.total_sample_size, config.min_area_sample);
    let truth = pop.area_means();

    let outcomes: Vec<Result<ReplicateResult>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(config.base_seed, rep, 2);
            let (sample, aggregates) = draw_sample(pop, &sizes, &config.lambdas, &mut rng)?;
            let (points, mses, certificates) = estimate_all(
                &sample,
                &aggregates,
                &config.estimators,
                config.huber_c,
                config.mse,
            )?;
            Ok(ReplicateResult {
                truth: truth.clone(),
                points,
                mses,
                certificates,
            })
        })
        .collect();

    let mut results = Vec::with_capacity(outcomes.len());
    let mut failures = 0usize;
    let mut failure_log = Vec::new();
    for (rep, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(res) => results.push(res),
            Err(e) => {
                failures += 1;
                failure_log.push(format!("replicate {rep}: {e}"));
            }
        }
    }
    let max_failures = (0.02 * config.replicates as f64).floor() as usize;
    if failures > max_failures {
        for line in &failure_log {
            eprintln!("{line}");
        }
        return Err(Error::TooManyFailures {
            failures,
            replicates: config.replicates,
            max_pct: 2.0,
        });
    }
    let mut report = metrics(&config.estimators, &results)?;
    report.failures = failures;
    report.failure_log = failure_log;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_config() -> ScenarioConfig {
        ScenarioConfig {
            scenario: Scenario::Clean,
            areas: 6,
            area_size: 20,
            sample_size: 4,
            lambdas: vec![1.0, 0.8],
            units_per_block: 10,
            replicates: 3,
            base_seed: 42,
            huber_c: 1.345,
            estimators: vec![Estimator::Eblup, Estimator::EblupStar],
            mse: false,
            dump_scatter: false,
            dump_replicates: false,
        }
    }

    #[test]
    fn lognormal_population_mean_matches_moment_formula() {
        // E[y] = 100 + 5 exp(1 + 0.125) = 115.40.
        let expect = 100.0 + 5.0 * (1.0f64 + 0.125).exp();
        let mut rng = stream(7, 0, 0);
        let lognormal = LogNormal::new(1.0, 0.5).unwrap();
        let draws = 1_000_000usize;
        let mean: f64 = (0..draws)
            .map(|_| 100.0 + 5.0 * lognormal.sample(&mut rng))
            .sum::<f64>()
            / draws as f64;
        // Var(5x) = 25 (e^0.25 - 1) e^2.25.
        let var = 25.0 * ((0.25f64).exp() - 1.0) * (2.25f64).exp();
        let se = (var / draws as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");
        assert_relative_eq!(expect, 115.4009, epsilon = 1e-3);

        let config = ScenarioConfig {
            areas: 40,
            area_size: 100,
            ..small_config()
        };
        let config = ScenarioConfig {
            lambdas: vec![1.0, 0.9, 0.6, 0.4],
            units_per_block: 25,
            ..config
        };
        let pop = generate_population(&config, &mut stream(11, 0, 0));
        let mean_y: f64 = pop.y.iter().sum::<f64>() / pop.n_units() as f64;
        assert!((mean_y - expect).abs() < 1.0, "population mean {mean_y}");
    }

    #[test]
    fn block_layout_counts() {
        let config = ScenarioConfig {
            areas: 40,
            area_size: 100,
            lambdas: vec![1.0, 0.9, 0.6, 0.4],
            units_per_block: 25,
            ..small_config()
        };
        let pop = generate_population(&config, &mut stream(3, 0, 0));
        let cells = pop.cell_units();
        for blocks in &cells {
            for units in blocks {
                assert_eq!(units.len(), 25);
            }
        }
    }

    #[test]
    fn area_effect_variance_near_three() {
        let config = ScenarioConfig {
            areas: 40,
            area_size: 100,
            lambdas: vec![1.0, 0.9, 0.6, 0.4],
            units_per_block: 25,
            ..small_config()
        };
        // Average across seeds the between-area variance of area mean
        // residuals from the true regression surface.
        let mut acc = 0.0;
        let seeds = 40;
        for s in 0..seeds {
            let pop = generate_population(&config, &mut stream(100 + s, 0, 0));
            let mut means = vec![0.0; config.areas];
            let mut counts = vec![0usize; config.areas];
            for j in 0..pop.n_units() {
                means[pop.unit_area[j]] += pop.y[j] - 100.0 - 5.0 * pop.x[(j, 0)];
                counts[pop.unit_area[j]] += 1;
            }
            for i in 0..config.areas {
                means[i] /= counts[i] as f64;
            }
            let grand = means.iter().sum::<f64>() / config.areas as f64;
            let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
                / (config.areas as f64 - 1.0);
            // Remove the within-area noise share 6/100.
            acc += var - 0.06;
        }
        let mean_var = acc / seeds as f64;
        assert!((mean_var - 3.0).abs() < 0.4, "u variance {mean_var}");
    }

    #[test]
    fn linkage_preserves_cell_sums_and_rates() {
        let config = ScenarioConfig {
            areas: 40,
            area_size: 100,
            lambdas: vec![1.0, 0.9, 0.6, 0.4],
            units_per_block: 25,
            ..small_config()
        };
        let mut pop = generate_population(&config, &mut stream(5, 0, 0));
        apply_linkage(&mut pop, &config.lambdas, &mut stream(5, 0, 1));

        let cells = pop.cell_units();
        for blocks in &cells {
            for (q, units) in blocks.iter().enumerate() {
                let sum_y: f64 = units.iter().map(|&j| pop.y[j]).sum();
                let sum_star: f64 = units.iter().map(|&j| pop.y_star[j]).sum();
                assert_relative_eq!(sum_y, sum_star, epsilon = 1e-9);
                if config.lambdas[q] == 1.0 {
                    for &j in units {
                        assert_eq!(pop.y[j], pop.y_star[j]);
                        assert!(!pop.mislinked[j]);
                    }
                }
            }
        }
        // Overall mislink rate near (0 + .1 + .4 + .6)/4 = 27.5%.
        let rate = pop.mislinked.iter().filter(|&&m| m).count() as f64
            / pop.n_units() as f64;
        assert!((rate - 0.275).abs() < 0.02, "mislink rate {rate}");
    }

    #[test]
    fn srswor_census_and_uniform_inclusion() {
        let config = small_config();
        let pop = generate_population(&config, &mut stream(9, 0, 0));
        // Census: drawing everything returns every unit.
        let sizes = vec![config.area_size; config.areas];
        let (sample, _) =
            draw_sample(&pop, &sizes, &config.lambdas, &mut stream(9, 0, 2)).unwrap();
        assert_eq!(sample.n(), pop.n_units());

        // Uniform inclusion over repeated draws of one unit from twenty.
        let units: Vec<usize> = (0..20).collect();
        let draws = 100_000;
        let mut hits = vec![0usize; 20];
        let mut rng = stream(13, 0, 2);
        for _ in 0..draws {
            for j in srswor(&units, 1, &mut rng) {
                hits[j] += 1;
            }
        }
        let p = 1.0 / 20.0;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for h in hits {
            let rate = h as f64 / draws as f64;
            assert!((rate - p).abs() < 4.0 * se, "inclusion rate {rate}");
        }
    }

    #[test]
    fn metrics_hand_examples() {
        let ests = vec![Estimator::Eblup, Estimator::EblupStar];
        // Two replicates, one area: EBLUP errors +1, -1, truth 100; the
        // star estimator is exactly the truth.
        let results = vec![
            ReplicateResult {
                truth: vec![100.0],
                points: vec![vec![101.0], vec![100.0]],
                mses: vec![None, None],
                certificates: Certificates::new(),
            },
            ReplicateResult {
                truth: vec![100.0],
                points: vec![vec![99.0], vec![100.0]],
                mses: vec![None, None],
                certificates: Certificates::new(),
            },
        ];
        let report = metrics(&ests, &results).unwrap();
        let base = report.row(Estimator::Eblup).unwrap();
        assert_relative_eq!(base.median_relbias_pct, 0.0, epsilon = 1e-12);
        assert_relative_eq!(base.median_rrmse_pct, 1.0, epsilon = 1e-12);
        assert_relative_eq!(base.eff.unwrap(), 100.0);
        let star = report.row(Estimator::EblupStar).unwrap();
        assert_relative_eq!(star.median_rrmse_pct, 0.0);
        assert_relative_eq!(star.eff.unwrap(), 0.0);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let config = small_config();
        let r1 = run_monte_carlo(&config).unwrap();
        let r2 = run_monte_carlo(&config).unwrap();
        assert_eq!(r1.table1_csv(), r2.table1_csv());
        assert_eq!(r1.failures, 0);
    }

    #[test]
    fn proportional_allocation_respects_floor() {
        let sizes = vec![2000, 1000, 100, 30];
        let alloc = proportional_allocation(&sizes, 300, 5);
        assert_eq!(alloc[0], 192);
        assert_eq!(alloc[1], 96);
        assert_eq!(alloc[2], 10);
        assert_eq!(alloc[3], 5);
    }
}
