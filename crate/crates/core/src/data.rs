//! Sample and population structures shared by all estimators.
//!
//! The unit of organisation is the (area, block) *cell*: linkage errors act
//! within cells, so every fit decomposes into per-cell blocks. A
//! [`LinkedSample`] carries the observed linked responses, the sampled
//! covariate rows, the linkage-corrected design built from them, and the
//! cell structure with its paradata.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::linkage;
use crate::Result;

/// One (area, block) cell of the sample with its population metadata.
#[derive(Debug, Clone)]
pub struct Cell {
    /// Index into [`LinkedSample::area_ids`].
    pub area: usize,
    /// Index into [`LinkedSample::block_ids`].
    pub block: usize,
    /// Correct-linkage probability for the block.
    pub lambda: f64,
    /// Variance of an estimated lambda, when available.
    pub var_lambda: Option<f64>,
    /// Population size of the cell (`N_iq`).
    pub n_pop: usize,
    /// Population column means of the cell design matrix.
    pub xbar_pop: DVector<f64>,
    /// Row indices of this cell's sampled units.
    pub rows: Vec<usize>,
}

impl Cell {
    pub fn n_sample(&self) -> usize {
        self.rows.len()
    }

    pub fn gamma(&self) -> f64 {
        linkage::gamma_or_degenerate(self.effective_lambda(), self.n_pop)
    }

    /// Lambda with the single-unit cell convention applied.
    pub fn effective_lambda(&self) -> f64 {
        if self.n_pop < 2 {
            1.0
        } else {
            self.lambda
        }
    }
}

/// The observed linked sample plus everything the estimators need about the
/// population cells it came from.
#[derive(Debug, Clone)]
pub struct LinkedSample {
    pub area_ids: Vec<String>,
    pub block_ids: Vec<String>,
    /// Linked responses for the sampled units.
    pub y_star: DVector<f64>,
    /// Sampled covariate rows (uncorrected).
    pub x: DMatrix<f64>,
    /// Linkage-corrected design rows, aligned with `x`.
    pub x_star: DMatrix<f64>,
    pub cells: Vec<Cell>,
    /// Cell indices grouped by area.
    pub area_cells: Vec<Vec<usize>>,
}

impl LinkedSample {
    /// Assemble a sample, building the corrected design and the per-area
    /// cell index. Cells must partition the sample rows and every area must
    /// be sampled.
    pub fn new(
        area_ids: Vec<String>,
        block_ids: Vec<String>,
        y_star: DVector<f64>,
        x: DMatrix<f64>,
        cells: Vec<Cell>,
    ) -> Result<Self> {
        let n = y_star.len();
        if x.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "LinkedSample design rows",
                expected: n,
                got: x.nrows(),
            });
        }
        let mut seen = vec![false; n];
        for cell in &cells {
            if !(0.0..=1.0).contains(&cell.lambda) {
                return Err(Error::InvalidInput(format!(
                    "lambda {} outside [0, 1] for block {}",
                    cell.lambda, block_ids[cell.block]
                )));
            }
            if cell.rows.len() > cell.n_pop {
                return Err(Error::InvalidInput(format!(
                    "cell ({}, {}) has {} sampled units but N_iq = {}",
                    area_ids[cell.area],
                    block_ids[cell.block],
                    cell.rows.len(),
                    cell.n_pop
                )));
            }
            for &r in &cell.rows {
                if r >= n || seen[r] {
                    return Err(Error::InvalidInput(format!(
                        "cell row index {r} out of range or duplicated"
                    )));
                }
                seen[r] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidInput(
                "cells do not cover every sample row".into(),
            ));
        }

        let mut x_star = x.clone();
        for cell in &cells {
            let xs = gather_rows(&x, &cell.rows);
            let corrected = linkage::corrected_design(
                &xs,
                &cell.xbar_pop,
                cell.effective_lambda(),
                cell.n_pop.max(1),
            )?;
            for (local, &r) in cell.rows.iter().enumerate() {
                x_star.row_mut(r).copy_from(&corrected.row(local));
            }
        }

        let mut area_cells = vec![Vec::new(); area_ids.len()];
        for (k, cell) in cells.iter().enumerate() {
            area_cells[cell.area].push(k);
        }
        for (i, list) in area_cells.iter().enumerate() {
            let sampled: usize = list.iter().map(|&k| cells[k].rows.len()).sum();
            if sampled == 0 {
                return Err(Error::EmptyArea {
                    area: area_ids[i].clone(),
                });
            }
        }

        Ok(Self {
            area_ids,
            block_ids,
            y_star,
            x,
            x_star,
            cells,
            area_cells,
        })
    }

    pub fn n(&self) -> usize {
        self.y_star.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn cell_y_star(&self, cell: &Cell) -> DVector<f64> {
        DVector::from_iterator(cell.rows.len(), cell.rows.iter().map(|&r| self.y_star[r]))
    }

    pub fn cell_x(&self, cell: &Cell) -> DMatrix<f64> {
        gather_rows(&self.x, &cell.rows)
    }

    pub fn cell_x_star(&self, cell: &Cell) -> DMatrix<f64> {
        gather_rows(&self.x_star, &cell.rows)
    }

    /// Pooled block-level mean and mean square of a per-unit vector
    /// (typically fitted values), indexed by block. Pooling runs across all
    /// areas within a block, which is what stabilises the moments when cell
    /// samples are tiny.
    pub fn block_moments(&self, f: &DVector<f64>) -> Vec<(f64, f64)> {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); self.block_ids.len()];
        for cell in &self.cells {
            let acc = &mut sums[cell.block];
            for &r in &cell.rows {
                acc.0 += f[r];
                acc.1 += f[r] * f[r];
                acc.2 += 1;
            }
        }
        sums.into_iter()
            .map(|(s, s2, c)| {
                if c == 0 {
                    (0.0, 0.0)
                } else {
                    (s / c as f64, s2 / c as f64)
                }
            })
            .collect()
    }

    /// Per-cell diagonals of the linkage-error variance approximation for
    /// fitted values `f`, using the pooled block moments.
    pub fn linkage_variances(&self, f: &DVector<f64>) -> Vec<DVector<f64>> {
        let moments = self.block_moments(f);
        self.cells
            .iter()
            .map(|cell| {
                let (fbar, fbar2) = moments[cell.block];
                let f_cell =
                    DVector::from_iterator(cell.rows.len(), cell.rows.iter().map(|&r| f[r]));
                linkage::linkage_variance_diag(&f_cell, fbar, fbar2, cell.effective_lambda())
                    .expect("pooled block moments are internally consistent")
            })
            .collect()
    }

    /// Classical view of the sample: one cell per area with perfect
    /// linkage, so the corrected design equals the observed design and
    /// every linkage adjustment vanishes. The uncorrected estimators run on
    /// this view through the same code paths as the corrected ones.
    pub fn collapse_to_areas(&self) -> LinkedSample {
        let mut cells = Vec::with_capacity(self.n_areas());
        for (i, list) in self.area_cells.iter().enumerate() {
            let mut rows = Vec::new();
            let mut n_pop = 0usize;
            let mut xbar = DVector::zeros(self.p());
            for &k in list {
                let c = &self.cells[k];
                rows.extend_from_slice(&c.rows);
                n_pop += c.n_pop;
                xbar += &c.xbar_pop * c.n_pop as f64;
            }
            rows.sort_unstable();
            xbar /= n_pop as f64;
            cells.push(Cell {
                area: i,
                block: 0,
                lambda: 1.0,
                var_lambda: None,
                n_pop,
                xbar_pop: xbar,
                rows,
            });
        }
        LinkedSample::new(
            self.area_ids.clone(),
            vec!["all".to_string()],
            self.y_star.clone(),
            self.x.clone(),
            cells,
        )
        .expect("collapsing a valid sample cannot fail")
    }
}

pub(crate) fn gather_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (local, &r) in rows.iter().enumerate() {
        out.row_mut(local).copy_from(&m.row(r));
    }
    out
}

/// Population-side description of one (area, block) cell, covering cells
/// with no sampled units as well.
#[derive(Debug, Clone)]
pub struct CellAggregate {
    pub area: usize,
    pub block: usize,
    pub n_pop: usize,
    /// Population column means of the cell design matrix.
    pub xbar_pop: DVector<f64>,
}

/// Per-area population aggregates needed by the mean predictors.
#[derive(Debug, Clone)]
pub struct AreaAggregates {
    pub n_pop: f64,
    pub n_sample: usize,
    /// Population mean of the design over all area units.
    pub xbar_pop: DVector<f64>,
    /// Mean of the uncorrected design over the non-sampled units.
    pub xbar_nonsampled: DVector<f64>,
    /// Mean of the corrected design over the non-sampled units.
    pub xbar_nonsampled_star: DVector<f64>,
    /// Sample mean of the linked responses.
    pub ybar_sample_star: f64,
}

/// Compute the per-area aggregates from a sample whose cells describe the
/// whole population of each area (no fully non-sampled cells).
///
/// Cell totals of the corrected design equal those of the true design
/// (the expected permutation has unit row sums), so the corrected
/// non-sampled mean is the population total minus the corrected sample
/// total.
pub fn area_aggregates(sample: &LinkedSample) -> Vec<AreaAggregates> {
    let cells: Vec<CellAggregate> = sample
        .cells
        .iter()
        .map(|c| CellAggregate {
            area: c.area,
            block: c.block,
            n_pop: c.n_pop,
            xbar_pop: c.xbar_pop.clone(),
        })
        .collect();
    area_aggregates_with(sample, &cells).expect("sample cells are consistent")
}

/// Per-area aggregates with an explicit population cell list, which must
/// cover every cell of every area including those without sampled units.
pub fn area_aggregates_with(
    sample: &LinkedSample,
    population_cells: &[CellAggregate],
) -> Result<Vec<AreaAggregates>> {
    let p = sample.p();
    let d = sample.n_areas();
    let mut n_pop = vec![0.0f64; d];
    let mut pop_total = vec![DVector::zeros(p); d];
    for cell in population_cells {
        if cell.area >= d {
            return Err(Error::InvalidInput(format!(
                "population cell area index {} out of range",
                cell.area
            )));
        }
        if cell.xbar_pop.len() != p {
            return Err(Error::DimensionMismatch {
                what: "population cell means",
                expected: p,
                got: cell.xbar_pop.len(),
            });
        }
        n_pop[cell.area] += cell.n_pop as f64;
        pop_total[cell.area] += &cell.xbar_pop * cell.n_pop as f64;
    }

    let mut out = Vec::with_capacity(d);
    for (i, list) in sample.area_cells.iter().enumerate() {
        let mut n_s = 0usize;
        let mut s_total = DVector::zeros(p);
        let mut s_total_star = DVector::zeros(p);
        let mut y_total = 0.0f64;
        for &k in list {
            let cell = &sample.cells[k];
            n_s += cell.rows.len();
            for &r in &cell.rows {
                s_total += &sample.x.row(r).transpose();
                s_total_star += &sample.x_star.row(r).transpose();
                y_total += sample.y_star[r];
            }
        }
        if n_pop[i] < n_s as f64 {
            return Err(Error::InvalidInput(format!(
                "area {}: population size {} below sample size {}",
                sample.area_ids[i], n_pop[i], n_s
            )));
        }
        let remainder = n_pop[i] - n_s as f64;
        let (xbar_r, xbar_r_star) = if remainder > 0.0 {
            (
                (&pop_total[i] - &s_total) / remainder,
                (&pop_total[i] - &s_total_star) / remainder,
            )
        } else {
            (DVector::zeros(p), DVector::zeros(p))
        };
        out.push(AreaAggregates {
            n_pop: n_pop[i],
            n_sample: n_s,
            xbar_pop: &pop_total[i] / n_pop[i],
            xbar_nonsampled: xbar_r,
            xbar_nonsampled_star: xbar_r_star,
            ybar_sample_star: y_total / n_s as f64,
        });
    }
    Ok(out)
}

/// MSE decomposition attached to an area prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionComponents {
    Eblup {
        g1: f64,
        g2: f64,
        g3: f64,
        g4: Option<f64>,
    },
    Robust {
        h1: f64,
        h2: f64,
        h3: f64,
        bias2: f64,
    },
    MQuantile {
        variance: f64,
        bias2: f64,
        v_tau: f64,
    },
}

/// A point prediction for one area mean, optionally with its MSE estimate.
#[derive(Debug, Clone)]
pub struct AreaPrediction {
    pub area_id: String,
    pub point: f64,
    pub mse: Option<f64>,
    pub components: Option<PredictionComponents>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_sample() -> LinkedSample {
        // Two areas, one block, two cells of N_iq = 4 with two sampled
        // units each.
        let y = DVector::from_row_slice(&[10.0, 12.0, 20.0, 22.0]);
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 4.0, 1.0, 1.0, 1.0, 3.0]);
        let cells = vec![
            Cell {
                area: 0,
                block: 0,
                lambda: 0.7,
                var_lambda: None,
                n_pop: 4,
                xbar_pop: DVector::from_row_slice(&[1.0, 5.0]),
                rows: vec![0, 1],
            },
            Cell {
                area: 1,
                block: 0,
                lambda: 0.7,
                var_lambda: None,
                n_pop: 4,
                xbar_pop: DVector::from_row_slice(&[1.0, 2.0]),
                rows: vec![2, 3],
            },
        ];
        LinkedSample::new(
            vec!["a1".into(), "a2".into()],
            vec!["b1".into()],
            y,
            x,
            cells,
        )
        .unwrap()
    }

    #[test]
    fn corrected_design_rows_match_cellwise_computation() {
        let s = toy_sample();
        // First cell is the hand example from the linkage tests.
        assert_relative_eq!(s.x_star[(0, 1)], 3.2, epsilon = 1e-12);
        assert_relative_eq!(s.x_star[(1, 1)], 4.4, epsilon = 1e-12);
        assert_relative_eq!(s.x_star[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn aggregates_respect_total_preservation() {
        let s = toy_sample();
        let agg = area_aggregates(&s);
        assert_eq!(agg.len(), 2);
        assert_relative_eq!(agg[0].n_pop, 4.0);
        assert_relative_eq!(agg[0].ybar_sample_star, 11.0);
        // Population mean of x2 in area 1 is 5.0; corrected sample rows sum
        // to 3.2 + 4.4, so the corrected remainder mean must balance.
        let want = (4.0 * 5.0 - (3.2 + 4.4)) / 2.0;
        assert_relative_eq!(agg[0].xbar_nonsampled_star[1], want, epsilon = 1e-12);
        // Intercept column stays exactly 1 everywhere.
        assert_relative_eq!(agg[0].xbar_nonsampled_star[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn collapse_produces_single_perfect_cell_per_area() {
        let s = toy_sample();
        let c = s.collapse_to_areas();
        assert_eq!(c.cells.len(), 2);
        assert!(c.cells.iter().all(|cell| cell.lambda == 1.0));
        assert_relative_eq!((&c.x_star - &c.x).abs().max(), 0.0);
        assert_eq!(c.cells[0].n_pop, 4);
    }

    #[test]
    fn block_moments_pool_across_areas() {
        let s = toy_sample();
        let f = DVector::from_row_slice(&[1.0, 2.0, 3.0, 6.0]);
        let m = s.block_moments(&f);
        assert_eq!(m.len(), 1);
        assert_relative_eq!(m[0].0, 3.0);
        assert_relative_eq!(m[0].1, 12.5);
    }

    #[test]
    fn rejects_unsampled_area() {
        let y = DVector::from_row_slice(&[1.0]);
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        let cells = vec![Cell {
            area: 0,
            block: 0,
            lambda: 1.0,
            var_lambda: None,
            n_pop: 3,
            xbar_pop: DVector::from_row_slice(&[1.0]),
            rows: vec![0],
        }];
        let r = LinkedSample::new(
            vec!["a1".into(), "a2".into()],
            vec!["b".into()],
            y,
            x,
            cells,
        );
        assert!(matches!(r, Err(Error::EmptyArea { .. })));
    }
}
