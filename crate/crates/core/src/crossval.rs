//! Site-level k-fold cross-validation and smoke-threshold selection.

use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::gibbs::{estimate_ranges, run_chain, ChainConfig, PosteriorSamples};
use crate::io::{fmt_g9, write_rows};
use crate::linalg::SpdFactor;
use crate::rng::{stream, Variable};
use crate::spatial::{cross_distances, distance_matrix_xy};

/// Thresholds tabulated by default.
pub const DEFAULT_TAU_GRID: [f64; 5] = [0.0, 0.1, 1.0, 5.0, 10.0];

/// Normal quantile for a 95% interval.
pub const Z95: f64 = 1.96;

/// Split `0..n` into `k` folds after a seeded shuffle. The first `n % k`
/// folds get one extra member.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("cannot split {n} sites into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Variable::Folds, n as u64, k as u64));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mad: f64,
    /// Sample sd of the predictions.
    pub sd: f64,
    pub coverage: f64,
    pub n: usize,
}

/// Metrics with 95% normal prediction intervals.
pub fn cv_metrics(pred: &[f64], pred_sd: &[f64], obs: &[f64]) -> Result<CvMetrics> {
    cv_metrics_with(pred, pred_sd, obs, Z95)
}

/// Metrics with intervals `pred ± z * pred_sd`.
pub fn cv_metrics_with(pred: &[f64], pred_sd: &[f64], obs: &[f64], z: f64) -> Result<CvMetrics> {
    if pred.len() != obs.len() || pred_sd.len() != obs.len() {
        return Err(Error::Validation(format!(
            "metric inputs differ in length: {} predictions, {} sds, {} observations",
            pred.len(),
            pred_sd.len(),
            obs.len()
        )));
    }
    if obs.is_empty() {
        return Err(Error::InsufficientData("no held-out observations".into()));
    }
    let n = obs.len() as f64;
    let mse = pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum::<f64>() / n;
    let mad = pred.iter().zip(obs).map(|(p, o)| (p - o).abs()).sum::<f64>() / n;
    let pm = pred.iter().sum::<f64>() / n;
    let sd = if obs.len() > 1 {
        (pred.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let covered = (0..obs.len())
        .filter(|&i| (obs[i] - pred[i]).abs() <= z * pred_sd[i])
        .count();
    Ok(CvMetrics {
        mse,
        rmse: mse.sqrt(),
        mad,
        sd,
        coverage: covered as f64 / n,
        n: obs.len(),
    })
}

/// Predictive means and sds at held-out sites (site × day).
#[derive(Clone, Debug)]
pub struct HeldOutPrediction {
    pub mean: DMatrix<f64>,
    pub sd: DMatrix<f64>,
}

/// Posterior predictive of `Y` at held-out sites from a chain fitted on the
/// training sites. Bias fields are predicted by conditioning their Gaussian
/// process prior on the training posterior means; the error process by
/// conditioning on the training posterior means of `U` and `W` day by day.
/// The variance adds the conditional error-process variance, the nugget and
/// the bias-field Kriging variances.
pub fn predict_held_out(
    samples: &PosteriorSamples,
    train: &PanelDataset,
    train_xy: &[(f64, f64)],
    test: &PanelDataset,
    test_xy: &[(f64, f64)],
) -> Result<HeldOutPrediction> {
    let (n_tr, m) = train.y.shape();
    let n_te = test.n_sites();
    if samples.is_empty() {
        return Err(Error::InsufficientData("no kept draws to predict from".into()));
    }
    let d_tr = distance_matrix_xy(train_xy);
    let d_x = cross_distances(test_xy, train_xy);
    let r = SpdFactor::new(d_tr.map(|h| (-h / samples.phi1).exp()), "training C(phi1)")?;
    let k = SpdFactor::new(d_tr.map(|h| (-h / samples.phi2).exp()), "training C(phi2)")?;
    let r_x = d_x.map(|h| (-h / samples.phi1).exp());
    let k_x = d_x.map(|h| (-h / samples.phi2).exp());
    // Gains: test × train.
    let r_gain = &r_x * &r.inverse;
    let k_gain = &k_x * &k.inverse;

    let names = ["alpha0", "beta0", "alpha1", "beta1"];
    let mu_names = ["mu_alpha0", "mu_beta0", "mu_alpha1", "mu_beta1"];
    let var_names = ["sig_alpha0_sq", "sig_beta0_sq", "sig_alpha1_sq", "sig_beta1_sq"];
    let mut train_fields = Vec::with_capacity(4);
    let mut test_fields = Vec::with_capacity(4);
    let mut test_vars = Vec::with_capacity(4);
    for j in 0..4 {
        let (f, _) = samples.site_summary(names[j]);
        let mu = samples.scalar_mean(mu_names[j]);
        let var = samples.scalar_mean(var_names[j]);
        let pred = &k_gain * f.add_scalar(-mu);
        let reduction = DVector::from_fn(n_te, |i, _| k_gain.row(i).dot(&k_x.row(i)));
        test_fields.push(pred.add_scalar(mu));
        test_vars.push(reduction.map(|q| var * (1.0 - q).max(0.0)));
        train_fields.push(f);
    }
    let r_reduction = DVector::from_fn(n_te, |i, _| (1.0 - r_gain.row(i).dot(&r_x.row(i))).max(0.0));

    let l = &samples.latents;
    let u_bar = DMatrix::from_fn(n_tr, m, |i, t| {
        l.theta_mean[(i, t)] - train_fields[0][i] - train_fields[1][i] * train.theta_hat[(i, t)]
    });
    let w_bar = DMatrix::from_fn(n_tr, m, |i, t| {
        l.delta_mean[(i, t)] - train_fields[2][i] - train_fields[3][i] * train.delta_hat[(i, t)]
    });
    let u_x = &r_gain * u_bar;
    let w_x = &r_gain * w_bar;

    let s11 = samples.scalar_mean("sigma1_sq");
    let s12 = samples.scalar_mean("sigma12");
    let s22 = samples.scalar_mean("sigma2_sq");
    let nugget = samples.scalar_mean("sigma_sq");
    let mut mean = DMatrix::zeros(n_te, m);
    let mut sd = DMatrix::zeros(n_te, m);
    for i in 0..n_te {
        for t in 0..m {
            let c = f64::from(test.c[(i, t)]);
            let th = test.theta_hat[(i, t)];
            let dh = test.delta_hat[(i, t)];
            let theta = test_fields[0][i] + test_fields[1][i] * th + u_x[(i, t)];
            let delta = test_fields[2][i] + test_fields[3][i] * dh + w_x[(i, t)];
            mean[(i, t)] = theta + c * delta;
            let var = r_reduction[i] * (s11 + 2.0 * c * s12 + c * s22)
                + nugget
                + test_vars[0][i]
                + th * th * test_vars[1][i]
                + c * (test_vars[2][i] + dh * dh * test_vars[3][i]);
            sd[(i, t)] = var.max(0.0).sqrt();
        }
    }
    Ok(HeldOutPrediction { mean, sd })
}

/// Settings for threshold selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub tau_grid: Vec<f64>,
    pub seed: u64,
    /// Chain used for every fold fit.
    pub chain: ChainConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            seed: 0,
            chain: ChainConfig::short(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub tau: f64,
    /// `None` for the pooled row.
    pub fold: Option<usize>,
    pub metrics: CvMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub rows: Vec<CvRow>,
    pub recommended_tau: f64,
    pub notes: Vec<String>,
}

impl CvTable {
    pub fn pooled(&self) -> impl Iterator<Item = &CvRow> {
        self.rows.iter().filter(|r| r.fold.is_none())
    }
}

struct FoldResult {
    tau_index: usize,
    fold: usize,
    pred: Vec<f64>,
    sd: Vec<f64>,
    obs: Vec<f64>,
}

/// For each threshold: rebuild the smoke indicator, fit each fold's
/// training sites, predict the held-out sites and tabulate the metrics per
/// fold and pooled over folds. Ranges are estimated once per threshold on
/// all sites unless fixed in the chain config.
pub fn tau_selection(data: &PanelDataset, cfg: &CvConfig) -> Result<CvTable> {
    if cfg.tau_grid.is_empty() {
        return Err(Error::Parameter("threshold grid is empty".into()));
    }
    if cfg.tau_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Parameter("threshold grid has a non-finite value".into()));
    }
    cfg.chain.validate()?;
    let folds = kfold_split(data.n_sites(), cfg.folds, cfg.seed)?;
    let xy = data.sites.coords_km();
    let datasets = cfg
        .tau_grid
        .iter()
        .map(|&tau| data.with_tau(tau))
        .collect::<Result<Vec<_>>>()?;
    let chains: Vec<ChainConfig> = datasets
        .iter()
        .map(|d| {
            let mut c = cfg.chain.clone();
            c.checkpoint = None;
            c.latent_draws = None;
            if c.phi1.is_none() || c.phi2.is_none() {
                let est = estimate_ranges(d);
                c.phi1 = c.phi1.or(Some(est.phi1));
                c.phi2 = c.phi2.or(Some(est.phi2));
            }
            c
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|a| (0..folds.len()).map(move |f| (a, f)))
        .collect();
    let results: Vec<std::result::Result<FoldResult, String>> = jobs
        .par_iter()
        .map(|&(a, f)| {
            let tau = cfg.tau_grid[a];
            let held = &folds[f];
            let train_idx: Vec<usize> = (0..data.n_sites()).filter(|i| !held.contains(i)).collect();
            let run = || -> Result<FoldResult> {
                let d = &datasets[a];
                let train = d.subset(&train_idx)?;
                let test = d.subset(held)?;
                if train.observed_smoke_days() == 0 && test.observed_smoke_days() > 0 {
                    return Err(Error::InsufficientData(format!(
                        "training sites have no smoke days but held-out sites have {}",
                        test.observed_smoke_days()
                    )));
                }
                let samples = run_chain(&train, &chains[a])?;
                let tr_xy: Vec<_> = train_idx.iter().map(|&i| xy[i]).collect();
                let te_xy: Vec<_> = held.iter().map(|&i| xy[i]).collect();
                let p = predict_held_out(&samples, &train, &tr_xy, &test, &te_xy)?;
                let mut out = FoldResult {
                    tau_index: a,
                    fold: f,
                    pred: Vec::new(),
                    sd: Vec::new(),
                    obs: Vec::new(),
                };
                for i in 0..test.n_sites() {
                    for t in 0..test.n_days() {
                        if !test.missing[(i, t)] {
                            out.pred.push(p.mean[(i, t)]);
                            out.sd.push(p.sd[(i, t)]);
                            out.obs.push(test.y[(i, t)]);
                        }
                    }
                }
                info!("cv tau {tau} fold {} done", f + 1);
                Ok(out)
            };
            run().map_err(|e| format!("tau {tau} fold {}: skipped ({e})", f + 1))
        })
        .collect();

    let mut notes = Vec::new();
    let mut by_tau: Vec<Vec<FoldResult>> = (0..datasets.len()).map(|_| Vec::new()).collect();
    for r in results {
        match r {
            Ok(fr) => by_tau[fr.tau_index].push(fr),
            Err(msg) => {
                warn!("{msg}");
                notes.push(msg);
            }
        }
    }
    // Pooled metrics over fewer folds are not comparable; such thresholds are
    // recommended only if no threshold has every fold.
    let complete: Vec<bool> = by_tau.iter().map(|f| f.len() == folds.len()).collect();
    let any_complete = complete.iter().any(|&c| c);
    let mut rows = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for (a, frs) in by_tau.iter_mut().enumerate() {
        let tau = cfg.tau_grid[a];
        frs.sort_by_key(|f| f.fold);
        let (mut p, mut s, mut o) = (Vec::new(), Vec::new(), Vec::new());
        for fr in frs.iter() {
            if fr.obs.is_empty() {
                continue;
            }
            rows.push(CvRow {
                tau,
                fold: Some(fr.fold + 1),
                metrics: cv_metrics(&fr.pred, &fr.sd, &fr.obs)?,
            });
            p.extend_from_slice(&fr.pred);
            s.extend_from_slice(&fr.sd);
            o.extend_from_slice(&fr.obs);
        }
        if o.is_empty() {
            notes.push(format!("tau {tau}: no fold produced predictions"));
            continue;
        }
        let pooled = cv_metrics(&p, &s, &o)?;
        if any_complete && !complete[a] {
            notes.push(format!(
                "tau {tau}: {} of {} folds predicted; not considered for the recommendation",
                frs.len(),
                folds.len()
            ));
            rows.push(CvRow {
                tau,
                fold: None,
                metrics: pooled,
            });
            continue;
        }
        let better = match best {
            None => true,
            Some((bt, bm)) => pooled.mse < bm || (pooled.mse == bm && tau < bt),
        };
        if better {
            best = Some((tau, pooled.mse));
        }
        rows.push(CvRow {
            tau,
            fold: None,
            metrics: pooled,
        });
    }
    let recommended_tau = best
        .map(|b| b.0)
        .ok_or_else(|| Error::InsufficientData("every cross-validation fold failed".into()))?;
    Ok(CvTable {
        rows,
        recommended_tau,
        notes,
    })
}

/// `cv.csv`: `tau,fold,mse,rmse,mad,sd,coverage`; pooled rows have fold `pooled`.
pub fn write_cv(path: &Path, table: &CvTable) -> Result<()> {
    let rows = table.rows.iter().map(|r| {
        let m = &r.metrics;
        format!(
            "{},{},{},{},{},{},{}",
            fmt_g9(r.tau),
            r.fold.map_or_else(|| "pooled".to_string(), |f| f.to_string()),
            fmt_g9(m.mse),
            fmt_g9(m.rmse),
            fmt_g9(m.mad),
            fmt_g9(m.sd),
            fmt_g9(m.coverage)
        )
    });
    write_rows(path, "tau,fold,mse,rmse,mad,sd,coverage", rows)
}
