//! Convergence and model-fit diagnostics.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::gibbs::{PosteriorSamples, SCALAR_PARAMS};
use crate::io::{fmt_g9, write_rows};
use crate::ols::solve_ols;
use crate::spatial::{default_bin_edges, obs_covariance_unchecked, variogram_with, CovarianceParams, Variogram};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    pub ess: f64,
    pub n: usize,
    /// The chain has zero variance; `ess` is reported as `n`.
    pub constant: bool,
}

/// Effective sample size `N / (1 + 2 Σ rho_k)` with Geyer's initial positive
/// sequence truncation, clipped to `(0, N]`.
pub fn ess(chain: &[f64]) -> Result<Ess> {
    let n = chain.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!("ESS needs at least 10 draws, got {n}")));
    }
    if chain.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("ESS input contains non-finite values".into()));
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = chain.iter().map(|v| v - mean).collect();
    let autocov = |k: usize| -> f64 {
        centered[..n - k]
            .iter()
            .zip(&centered[k..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    let c0 = autocov(0);
    if !(c0 > f64::EPSILON * mean.abs().max(1.0).powi(2)) {
        return Ok(Ess {
            ess: n as f64,
            n,
            constant: true,
        });
    }
    // tau = -1 + 2 Σ_m (rho_{2m} + rho_{2m+1}) while the pair sums stay positive.
    let mut tau = -1.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = (autocov(2 * m) + autocov(2 * m + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    let ess = (n as f64 / tau.max(f64::MIN_POSITIVE)).min(n as f64);
    Ok(Ess { ess, n, constant: false })
}

/// Sample autocorrelation of a day-ordered series for lags `0..=max_lag`.
/// Non-finite values are missing and skipped pairwise. Also returns the
/// number of usable pairs at each lag.
pub fn acf(series: &[f64], max_lag: usize) -> (Vec<f64>, Vec<usize>) {
    let present: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
    let n = present.len();
    if n == 0 {
        return (vec![], vec![]);
    }
    let mean = present.iter().sum::<f64>() / n as f64;
    let c0 = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let mut out = Vec::with_capacity(max_lag + 1);
    let mut pairs = Vec::with_capacity(max_lag + 1);
    for k in 0..=max_lag.min(series.len().saturating_sub(1)) {
        let mut s = 0.0;
        let mut count = 0;
        for t in 0..series.len() - k {
            let (a, b) = (series[t], series[t + k]);
            if a.is_finite() && b.is_finite() {
                s += (a - mean) * (b - mean);
                count += 1;
            }
        }
        out.push(if c0 > 0.0 { s / n as f64 / c0 } else if k == 0 { 1.0 } else { 0.0 });
        pairs.push(count);
    }
    (out, pairs)
}

/// Residuals of the per-site regression of Y on `(1, theta_hat, C, C delta_hat)`,
/// dropping design columns that are identically zero. NaN on missing days.
pub fn site_residuals(data: &PanelDataset, site: usize) -> Option<Vec<f64>> {
    let (x, y, days) = data.site_design(site);
    let cols: Vec<usize> = (0..4).filter(|&k| x.column(k).norm() > 0.0).collect();
    if days.len() <= cols.len() {
        return None;
    }
    let xs = x.select_columns(&cols);
    let (coef, _) = solve_ols(&xs, &y)?;
    let fitted = &xs * coef;
    let mut out = vec![f64::NAN; data.n_days()];
    for (r, &t) in days.iter().enumerate() {
        out[t] = y[r] - fitted[r];
    }
    Some(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualAcf {
    pub max_lag: usize,
    pub site_ids: Vec<String>,
    pub per_site: Vec<Vec<f64>>,
    /// Per-site ACFs averaged with weights equal to the usable pair counts.
    pub pooled: Vec<f64>,
}

pub fn residual_acf(data: &PanelDataset, max_lag: usize) -> Result<ResidualAcf> {
    let mut lag = max_lag;
    if data.n_days() < max_lag + 2 {
        lag = data.n_days().saturating_sub(2);
        warn!("residual ACF: only {} days, max lag shortened to {lag}", data.n_days());
    }
    let mut site_ids = Vec::new();
    let mut per_site = Vec::new();
    let mut num = vec![0.0; lag + 1];
    let mut den = vec![0.0; lag + 1];
    for i in 0..data.n_sites() {
        let Some(res) = site_residuals(data, i) else {
            warn!("residual ACF: site {} has too few observations", data.sites.get(i).id);
            continue;
        };
        let usable = res.iter().filter(|v| v.is_finite()).count();
        let site_lag = lag.min(usable.saturating_sub(2));
        let (r, pairs) = acf(&res, site_lag);
        for k in 0..r.len() {
            num[k] += pairs[k] as f64 * r[k];
            den[k] += pairs[k] as f64;
        }
        site_ids.push(data.sites.get(i).id.clone());
        per_site.push(r);
    }
    if per_site.is_empty() {
        return Err(Error::InsufficientData("no site supports a residual regression".into()));
    }
    let pooled = num.iter().zip(&den).map(|(a, b)| if *b > 0.0 { a / b } else { f64::NAN }).collect();
    Ok(ResidualAcf {
        max_lag: lag,
        site_ids,
        per_site,
        pooled,
    })
}

/// Smoke-flag pair group of a variogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlagGroup {
    G00,
    G01,
    G11,
}

impl FlagGroup {
    pub const ALL: [FlagGroup; 3] = [FlagGroup::G00, FlagGroup::G01, FlagGroup::G11];

    pub fn label(self) -> &'static str {
        match self {
            FlagGroup::G00 => "00",
            FlagGroup::G01 => "01",
            FlagGroup::G11 => "11",
        }
    }

    fn flags(self) -> (u8, u8) {
        match self {
            FlagGroup::G00 => (0, 0),
            FlagGroup::G01 => (0, 1),
            FlagGroup::G11 => (1, 1),
        }
    }

    fn contains(self, a: u8, b: u8) -> bool {
        let (x, y) = self.flags();
        (a, b) == (x, y) || (b, a) == (x, y)
    }

    /// Semivariance implied by the observation covariance for a pair with
    /// these flags at distance `h > 0`.
    pub fn model_semivariance(self, h: f64, p: &CovarianceParams) -> f64 {
        let (a, b) = self.flags();
        let va = obs_covariance_unchecked(0.0, a, a, p, true);
        let vb = obs_covariance_unchecked(0.0, b, b, p, true);
        0.5 * (va + vb) - obs_covariance_unchecked(h, a, b, p, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GofGroup {
    pub group: FlagGroup,
    pub empirical: Variogram,
    /// Model semivariance at each bin center.
    pub fitted: Vec<f64>,
}

/// Empirical variograms of a residual field split by the smoke flags of each
/// pair on each day, next to the model-implied curves. Groups without pairs
/// are omitted with a warning.
pub fn variogram_gof(
    residuals: &DMatrix<f64>,
    c: &DMatrix<u8>,
    dist: &DMatrix<f64>,
    params: &CovarianceParams,
    n_bins: usize,
) -> Result<Vec<GofGroup>> {
    if residuals.shape() != c.shape() {
        return Err(Error::Validation("residual field and smoke indicator differ in shape".into()));
    }
    let edges = default_bin_edges(dist, n_bins)?;
    let mut out = Vec::new();
    for group in FlagGroup::ALL {
        let vg = variogram_with(residuals, dist, &edges, |i, j, t| group.contains(c[(i, t)], c[(j, t)]));
        if vg.total_pairs() == 0 {
            warn!("variogram GoF: no site pairs in flag group {}", group.label());
            continue;
        }
        let fitted = vg.bin_centers.iter().map(|&h| group.model_semivariance(h, params)).collect();
        out.push(GofGroup {
            group,
            empirical: vg,
            fitted,
        });
    }
    Ok(out)
}

/// Observation covariance between two distinct sites for the three flag
/// combinations, on a distance grid. Rows are `(h, c00, c01, c11)`.
pub fn covariance_curves(params: &CovarianceParams, h_grid: &[f64]) -> Result<Vec<[f64; 4]>> {
    params.validate()?;
    Ok(h_grid
        .iter()
        .map(|&h| {
            [
                h,
                obs_covariance_unchecked(h, 0, 0, params, false),
                obs_covariance_unchecked(h, 0, 1, params, false),
                obs_covariance_unchecked(h, 1, 1, params, false),
            ]
        })
        .collect())
}

/// One row of `ess.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssRow {
    pub target: String,
    pub site_id: Option<String>,
    pub ess: f64,
    pub n_draws: usize,
    pub flag: String,
}

/// ESS of every scalar parameter and of the per-site causal effect,
/// computed on the kept (thinned) draws.
pub fn ess_table(samples: &PosteriorSamples) -> Result<Vec<EssRow>> {
    let mut rows = Vec::new();
    let mut push = |target: &str, site: Option<&str>, chain: Vec<f64>| -> Result<()> {
        let e = ess(&chain)?;
        rows.push(EssRow {
            target: target.to_string(),
            site_id: site.map(str::to_string),
            ess: e.ess,
            n_draws: e.n,
            flag: if e.constant { "kept-draws;constant-chain".into() } else { "kept-draws".into() },
        });
        Ok(())
    };
    for p in SCALAR_PARAMS {
        push(p, None, samples.scalar(p))?;
    }
    for (i, id) in samples.site_ids.iter().enumerate() {
        push("delta_effect", Some(id), samples.site_trace("delta_effect", i))?;
    }
    Ok(rows)
}

pub fn write_ess(path: &Path, rows: &[EssRow]) -> Result<()> {
    write_rows(
        path,
        "target,site_id,ess,n_draws,flag",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{}",
                r.target,
                r.site_id.as_deref().unwrap_or(""),
                fmt_g9(r.ess),
                r.n_draws,
                r.flag
            )
        }),
    )
}

pub fn acf_rows(region: &str, acf: &ResidualAcf) -> Vec<String> {
    let mut rows = Vec::new();
    for (id, r) in acf.site_ids.iter().zip(&acf.per_site) {
        for (k, v) in r.iter().enumerate() {
            rows.push(format!("{region},{id},{k},{}", fmt_g9(*v)));
        }
    }
    for (k, v) in acf.pooled.iter().enumerate() {
        rows.push(format!("{region},pooled,{k},{}", fmt_g9(*v)));
    }
    rows
}

pub const ACF_HEADER: &str = "region,site_id,lag,acf";

pub fn gof_rows(groups: &[GofGroup]) -> Vec<String> {
    let mut rows = Vec::new();
    for g in groups {
        let vg = &g.empirical;
        for k in 0..vg.n_bins() {
            if vg.bin_counts[k] == 0 {
                continue;
            }
            rows.push(format!(
                "{},{},{},{},{}",
                g.group.label(),
                fmt_g9(vg.bin_centers[k]),
                fmt_g9(vg.semivariances[k]),
                fmt_g9(g.fitted[k]),
                vg.bin_counts[k]
            ));
        }
    }
    rows
}

pub const GOF_HEADER: &str = "group,bin_center_km,empirical,fitted,count";

pub fn write_covariance_curves(path: &Path, curves: &[[f64; 4]]) -> Result<()> {
    write_rows(
        path,
        "h_km,c00,c01,c11",
        curves
            .iter()
            .map(|r| format!("{},{},{},{}", fmt_g9(r[0]), fmt_g9(r[1]), fmt_g9(r[2]), fmt_g9(r[3]))),
    )
}

/// `trace.csv` for the selected scalar parameters and per-site quantities
/// (`param` or `param@site_id`).
pub fn write_trace(path: &Path, samples: &PosteriorSamples, selection: &[String]) -> Result<()> {
    let mut rows = Vec::new();
    for sel in selection {
        let (param, site) = match sel.split_once('@') {
            Some((p, s)) => (p, Some(s)),
            None => (sel.as_str(), None),
        };
        match site {
            None => {
                if PosteriorSamples::scalar_index(param).is_none() {
                    return Err(Error::Validation(format!("unknown trace parameter `{param}`")));
                }
                for (d, v) in samples.draws.iter().zip(samples.scalar(param)) {
                    rows.push(format!("{},{},,{}", d.iter, param, fmt_g9(v)));
                }
            }
            Some(id) => {
                let i = samples
                    .site_ids
                    .iter()
                    .position(|s| s == id)
                    .ok_or_else(|| Error::Validation(format!("unknown site `{id}` in trace selection")))?;
                if samples.draws.first().and_then(|d| d.site_field(param)).is_none() {
                    return Err(Error::Validation(format!("unknown per-site parameter `{param}`")));
                }
                for (d, v) in samples.draws.iter().zip(samples.site_trace(param, i)) {
                    rows.push(format!("{},{},{},{}", d.iter, param, id, fmt_g9(v)));
                }
            }
        }
    }
    write_rows(path, "iter,param,site_id,value", rows)
}

/// Residual field `Y - B0 - C B1` at posterior-mean bias fields; NaN where
/// Y is missing.
pub fn mean_model_residuals(data: &PanelDataset, fields: [&DVector<f64>; 4]) -> DMatrix<f64> {
    let [a0, b0, a1, b1] = fields;
    DMatrix::from_fn(data.n_sites(), data.n_days(), |i, t| {
        let c = f64::from(data.c[(i, t)]);
        data.y[(i, t)] - a0[i] - b0[i] * data.theta_hat[(i, t)] - c * (a1[i] + b1[i] * data.delta_hat[(i, t)])
    })
}
