//! Panel dataset: observations, numerical-model covariates, the smoke
//! indicator, region blocking and per-site identifiability screening.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::spatial::SiteSet;

/// `C = 1[delta_hat > tau]`, strict inequality.
pub fn smoke_indicator(delta_hat: &DMatrix<f64>, tau: f64) -> DMatrix<u8> {
    delta_hat.map(|d| u8::from(d > tau))
}

/// Per-site, per-day observations and model covariates. Rows are sites,
/// columns are days `1..=T` (column `t - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    pub sites: SiteSet,
    /// Observed PM2.5; NaN where missing.
    pub y: DMatrix<f64>,
    /// No-fire model run.
    pub theta_hat: DMatrix<f64>,
    /// Fire-minus-no-fire model difference, clamped at 0.
    pub delta_hat: DMatrix<f64>,
    pub c: DMatrix<u8>,
    pub missing: DMatrix<bool>,
    pub tau: f64,
    /// Number of negative model differences clamped to 0.
    pub clamped_negative: usize,
    /// Number of cells whose covariates were interpolated because the panel
    /// row was absent.
    pub filled_covariates: usize,
}

impl PanelDataset {
    /// Build a dataset with `C` derived from `delta_hat` and `tau`. Entries of
    /// `y` that are not finite are treated as missing.
    pub fn new(
        sites: SiteSet,
        y: DMatrix<f64>,
        theta_hat: DMatrix<f64>,
        delta_hat: DMatrix<f64>,
        tau: f64,
    ) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::Parameter(format!("threshold tau must be finite, got {tau}")));
        }
        let mut delta_hat = delta_hat;
        let mut clamped = 0;
        for v in delta_hat.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        if clamped > 0 {
            info!("clamped {clamped} negative delta_hat values to 0");
        }
        let c = smoke_indicator(&delta_hat, tau);
        let mut data = Self::with_indicator(sites, y, theta_hat, delta_hat, c)?;
        data.tau = tau;
        data.clamped_negative = clamped;
        Ok(data)
    }

    /// Build a dataset with an explicit indicator matrix (tau recorded as NaN).
    pub fn with_indicator(
        sites: SiteSet,
        y: DMatrix<f64>,
        theta_hat: DMatrix<f64>,
        delta_hat: DMatrix<f64>,
        c: DMatrix<u8>,
    ) -> Result<Self> {
        let n = sites.len();
        let shape = y.shape();
        if shape.0 != n {
            return Err(Error::Validation(format!("y has {} rows for {} sites", shape.0, n)));
        }
        if shape.1 == 0 {
            return Err(Error::Validation("panel has no days".into()));
        }
        for (name, m) in [("theta_hat", &theta_hat), ("delta_hat", &delta_hat)] {
            if m.shape() != shape {
                return Err(Error::Validation(format!("{name} shape {:?} != y shape {shape:?}", m.shape())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be complete and finite")));
            }
        }
        if c.shape() != shape {
            return Err(Error::Validation(format!("indicator shape {:?} != y shape {shape:?}", c.shape())));
        }
        if c.iter().any(|&v| v > 1) {
            return Err(Error::Validation("smoke indicator must be 0 or 1".into()));
        }
        let missing = y.map(|v| !v.is_finite());
        let y = y.map(|v| if v.is_finite() { v } else { f64::NAN });
        Ok(Self {
            sites,
            y,
            theta_hat,
            delta_hat,
            c,
            missing,
            tau: f64::NAN,
            clamped_negative: 0,
            filled_covariates: 0,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_days(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Non-missing site-days with `C = 1`; zero leaves the smoke bias
    /// fields without information from the data.
    pub fn observed_smoke_days(&self) -> usize {
        self.c.iter().zip(self.missing.iter()).filter(|&(&c, &m)| c == 1 && !m).count()
    }

    /// Recompute the indicator at a new threshold.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::Parameter(format!("threshold tau must be finite, got {tau}")));
        }
        let mut out = self.clone();
        out.c = smoke_indicator(&self.delta_hat, tau);
        out.tau = tau;
        Ok(out)
    }

    /// Restrict to a subset of sites (re-projected about the subset centroid).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let rows = |m: &DMatrix<f64>| m.select_rows(indices.iter());
        let mut out = Self::with_indicator(
            self.sites.subset(indices)?,
            rows(&self.y),
            rows(&self.theta_hat),
            rows(&self.delta_hat),
            self.c.select_rows(indices.iter()),
        )?;
        out.tau = self.tau;
        Ok(out)
    }

    /// Restrict to a contiguous range of days.
    pub fn day_range(&self, start: usize, len: usize) -> Result<Self> {
        let cols = |m: &DMatrix<f64>| m.columns(start, len).into_owned();
        let mut out = Self::with_indicator(
            self.sites.clone(),
            cols(&self.y),
            cols(&self.theta_hat),
            cols(&self.delta_hat),
            self.c.columns(start, len).into_owned(),
        )?;
        out.tau = self.tau;
        Ok(out)
    }

    /// Per-site design matrix `(1, theta_hat, C, C delta_hat)` over the
    /// non-missing days, with the matching observations and day indices.
    pub fn site_design(&self, site: usize) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
        let days: Vec<usize> = (0..self.n_days()).filter(|&t| !self.missing[(site, t)]).collect();
        let x = DMatrix::from_fn(days.len(), 4, |r, k| {
            let t = days[r];
            let c = f64::from(self.c[(site, t)]);
            match k {
                0 => 1.0,
                1 => self.theta_hat[(site, t)],
                2 => c,
                _ => c * self.delta_hat[(site, t)],
            }
        });
        let y = DVector::from_iterator(days.len(), days.iter().map(|&t| self.y[(site, t)]));
        (x, y, days)
    }
}

/// Dataset restricted to one region's sites.
#[derive(Clone, Debug)]
pub struct RegionBlock {
    pub region: String,
    /// Indices of the block's sites in the parent dataset.
    pub site_indices: Vec<usize>,
    pub data: PanelDataset,
}

/// Split by region label (blocks ordered by label).
pub fn partition_regions(data: &PanelDataset) -> Result<Vec<RegionBlock>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.sites.sites().iter().enumerate() {
        let region = s
            .region
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("site {} has no region label", s.id)))?;
        groups.entry(region.clone()).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(region, idx)| {
            Ok(RegionBlock {
                data: data.subset(&idx)?,
                region,
                site_indices: idx,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScreenStatus {
    Ok,
    /// The per-site design `(1, theta_hat, C, C delta_hat)` is rank deficient.
    Degenerate,
    /// Fewer than four non-missing days.
    InsufficientData,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub status: ScreenStatus,
    /// Ratio of extreme singular values of the column-normalized design;
    /// infinite when a column is identically zero.
    pub condition_number: f64,
    pub rank: usize,
    pub n_obs: usize,
}

impl ScreenReport {
    pub fn is_ok(&self) -> bool {
        self.status == ScreenStatus::Ok
    }
}

/// Relative singular-value cutoff below which a design is called rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Numerical rank and condition number of a design matrix, after scaling
/// columns to unit norm. Zero columns count as rank-deficient directions.
pub fn design_rank(x: &DMatrix<f64>) -> (usize, f64) {
    let p = x.ncols();
    let mut scaled = x.clone();
    let mut zero_cols = 0;
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        } else {
            zero_cols += 1;
        }
    }
    if zero_cols == p || x.nrows() == 0 {
        return (0, f64::INFINITY);
    }
    let sv = scaled.svd(false, false).singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax).count();
    let smin = if sv.len() < p { 0.0 } else { sv.min() };
    let cond = if rank < p { f64::INFINITY } else { smax / smin };
    (rank, cond)
}

/// Flag sites whose mean-model bias terms are not identified from that
/// site's own data.
pub fn collinearity_screen(data: &PanelDataset, site: usize) -> ScreenReport {
    let (x, _, days) = data.site_design(site);
    let n_obs = days.len();
    if n_obs < 4 {
        return ScreenReport {
            status: ScreenStatus::InsufficientData,
            condition_number: f64::INFINITY,
            rank: 0,
            n_obs,
        };
    }
    let (rank, condition_number) = design_rank(&x);
    ScreenReport {
        status: if rank == 4 { ScreenStatus::Ok } else { ScreenStatus::Degenerate },
        condition_number,
        rank,
        n_obs,
    }
}

/// Options for [`load_panel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadConfig {
    pub tau: f64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self { tau: 1.0 }
    }
}

/// Load and validate `sites.csv` and `panel.csv`.
///
/// Days are the dense range `1..=T` with `T` the largest day present. A
/// (site, day) without a panel row is masked missing; its covariates are
/// interpolated linearly in time from the nearest present days of the same
/// site, and the number of such cells is recorded.
pub fn load_panel(sites_path: &Path, panel_path: &Path, config: &LoadConfig) -> Result<PanelDataset> {
    let records = io::read_sites(sites_path)?;
    let sites = SiteSet::from_records(records).map_err(|e| Error::Load {
        path: sites_path.display().to_string(),
        message: e.to_string(),
    })?;
    let rows = io::read_panel_rows(panel_path)?;
    let pp = panel_path.display().to_string();
    if rows.is_empty() {
        return Err(Error::Load {
            path: pp,
            message: "panel has no rows".into(),
        });
    }
    let index: HashMap<&str, usize> = sites.ids().enumerate().map(|(i, id)| (id, i)).collect();
    let n = sites.len();
    let t_max = rows.iter().map(|r| r.day).max().unwrap_or(0);
    let mut y = DMatrix::from_element(n, t_max, f64::NAN);
    let mut th = DMatrix::from_element(n, t_max, f64::NAN);
    let mut dh = DMatrix::from_element(n, t_max, f64::NAN);
    let mut present = DMatrix::from_element(n, t_max, false);
    for r in &rows {
        let i = *index.get(r.site_id.as_str()).ok_or_else(|| Error::Load {
            path: pp.clone(),
            message: format!("row {}: unknown site_id {}", r.line, r.site_id),
        })?;
        let t = r.day - 1;
        if present[(i, t)] {
            return Err(Error::Load {
                path: pp.clone(),
                message: format!("row {}: duplicate key (site_id={}, day={})", r.line, r.site_id, r.day),
            });
        }
        present[(i, t)] = true;
        y[(i, t)] = r.y.unwrap_or(f64::NAN);
        th[(i, t)] = r.theta_hat;
        dh[(i, t)] = r.delta_hat;
    }
    let mut filled = 0;
    for i in 0..n {
        let have: Vec<usize> = (0..t_max).filter(|&t| present[(i, t)]).collect();
        if have.is_empty() {
            return Err(Error::Load {
                path: pp.clone(),
                message: format!("site {} has no panel rows", sites.get(i).id),
            });
        }
        for t in 0..t_max {
            if present[(i, t)] {
                continue;
            }
            filled += 1;
            let next = have.partition_point(|&d| d < t);
            let (lo, hi) = (next.checked_sub(1).map(|k| have[k]), have.get(next).copied());
            for m in [&mut th, &mut dh] {
                m[(i, t)] = match (lo, hi) {
                    (Some(a), Some(b)) => {
                        let w = (t - a) as f64 / (b - a) as f64;
                        (1.0 - w) * m[(i, a)] + w * m[(i, b)]
                    }
                    (Some(a), None) => m[(i, a)],
                    (None, Some(b)) => m[(i, b)],
                    (None, None) => unreachable!("site has at least one row"),
                };
            }
        }
    }
    if filled > 0 {
        warn!("{filled} (site, day) rows absent from {pp}: y masked, covariates interpolated");
    }
    let mut data = PanelDataset::new(sites, y, th, dh, config.tau)?;
    data.filled_covariates = filled;
    Ok(data)
}

/// Write a dataset back out as `sites.csv` + `panel.csv`.
pub fn write_panel(dir: &Path, data: &PanelDataset) -> Result<()> {
    io::write_sites(&dir.join("sites.csv"), &data.sites.records())?;
    let mut rows = Vec::with_capacity(data.n_sites() * data.n_days());
    for (i, s) in data.sites.sites().iter().enumerate() {
        for t in 0..data.n_days() {
            let y = if data.missing[(i, t)] {
                "NA".to_string()
            } else {
                io::fmt_g9(data.y[(i, t)])
            };
            rows.push(format!(
                "{},{},{},{},{}",
                s.id,
                t + 1,
                y,
                io::fmt_g9(data.theta_hat[(i, t)]),
                io::fmt_g9(data.delta_hat[(i, t)])
            ));
        }
    }
    io::write_rows(&dir.join("panel.csv"), "site_id,day,y,theta_hat,delta_hat", rows)
}
