//! Posterior causal effect, ordinary Kriging of posterior summaries to grid
//! centroids, credible intervals and percent-of-total summaries.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::PosteriorSamples;
use crate::io::{fmt_g9, write_rows};
use crate::linalg::SpdFactor;
use crate::spatial::{cross_distances, distance_matrix_xy, empirical_variogram, fit_range, FitStatus};

/// Minimum number of draws for an empirical interval.
pub const MIN_INTERVAL_DRAWS: usize = 20;

/// `T^{-1} Σ_t C_t(s) delta_t(s)` for one draw of the site × day delta field.
pub fn effect_draw(c: &DMatrix<u8>, delta: &DMatrix<f64>) -> DVector<f64> {
    let m = delta.ncols().max(1) as f64;
    DVector::from_fn(delta.nrows(), |i, _| {
        (0..delta.ncols())
            .filter(|&t| c[(i, t)] == 1)
            .map(|t| delta[(i, t)])
            .sum::<f64>()
            / m
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalEffectPosterior {
    pub site_ids: Vec<String>,
    /// One vector per kept draw.
    pub draws: Vec<DVector<f64>>,
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
    pub theta_bar_mean: DVector<f64>,
    pub theta_bar_sd: DVector<f64>,
}

impl CausalEffectPosterior {
    /// Summaries of per-draw effects.
    pub fn from_draws(site_ids: Vec<String>, draws: Vec<DVector<f64>>, theta_bar: &[DVector<f64>]) -> Self {
        let (mean, sd) = summarize(&draws, site_ids.len());
        let (theta_bar_mean, theta_bar_sd) = summarize(theta_bar, site_ids.len());
        Self {
            site_ids,
            draws,
            mean,
            sd,
            theta_bar_mean,
            theta_bar_sd,
        }
    }

    /// Equal-tailed interval per site.
    pub fn intervals(&self, level: f64) -> Vec<(f64, f64)> {
        (0..self.site_ids.len())
            .map(|i| {
                let v: Vec<f64> = self.draws.iter().map(|d| d[i]).collect();
                credible_interval(&v, level)
            })
            .collect()
    }
}

fn summarize(draws: &[DVector<f64>], n: usize) -> (DVector<f64>, DVector<f64>) {
    let k = draws.len();
    if k == 0 {
        return (DVector::zeros(n), DVector::zeros(n));
    }
    let mean = draws.iter().fold(DVector::zeros(n), |acc, d| acc + d) / k as f64;
    let sd = if k > 1 {
        let ss = draws.iter().fold(DVector::zeros(n), |acc: DVector<f64>, d| {
            let e = d - &mean;
            acc + e.component_mul(&e)
        });
        (ss / (k - 1) as f64).map(f64::sqrt)
    } else {
        DVector::zeros(n)
    };
    (mean, sd)
}

/// Causal effect posterior from a chain's kept draws. The chain records
/// the effect of every kept state, so the mean over draws equals
/// `T^{-1} Σ_t C_t(s) mean(delta_t(s))`.
pub fn causal_effect(samples: &PosteriorSamples) -> CausalEffectPosterior {
    let draws = samples.draws.iter().map(|d| d.delta_effect.clone()).collect();
    let theta: Vec<DVector<f64>> = samples.draws.iter().map(|d| d.theta_bar.clone()).collect();
    CausalEffectPosterior::from_draws(samples.site_ids.clone(), draws, &theta)
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed interval at `level`. With fewer than
/// [`MIN_INTERVAL_DRAWS`] draws the range of the draws is returned instead.
pub fn credible_interval(draws: &[f64], level: f64) -> (f64, f64) {
    if draws.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut v = draws.to_vec();
    v.sort_by(f64::total_cmp);
    if v.len() < MIN_INTERVAL_DRAWS {
        warn!(
            "only {} draws for a credible interval; reporting min/max",
            v.len()
        );
        return (v[0], v[v.len() - 1]);
    }
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail))
}

/// `effect.csv`: `site_id,delta_mean,delta_sd,lo95,hi95`.
pub fn write_effect(path: &Path, effect: &CausalEffectPosterior) -> Result<()> {
    let ci = effect.intervals(0.95);
    let rows = effect.site_ids.iter().enumerate().map(|(i, id)| {
        format!(
            "{},{},{},{},{}",
            id,
            fmt_g9(effect.mean[i]),
            fmt_g9(effect.sd[i]),
            fmt_g9(ci[i].0),
            fmt_g9(ci[i].1)
        )
    });
    write_rows(path, "site_id,delta_mean,delta_sd,lo95,hi95", rows)
}

/// Exponential covariance `sill exp(-h / range)` plus `nugget` at `h = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrigingKernel {
    pub sill: f64,
    pub range: f64,
    pub nugget: f64,
}

impl KrigingKernel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sill > 0.0 && self.range > 0.0 && self.nugget >= 0.0) || !self.sill.is_finite() || !self.range.is_finite() {
            return Err(Error::Parameter(format!(
                "Kriging kernel needs sill > 0, range > 0, nugget >= 0; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Covariance of the smooth part at lag `h`.
    pub fn cov(&self, h: f64) -> f64 {
        self.sill * (-h / self.range).exp()
    }
}

/// What to do with source sites that share a location.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicatePolicy {
    /// Replace coincident sites by one site carrying their mean value.
    #[default]
    Average,
    Error,
}

/// Sites closer than this are treated as coincident (km).
pub const COINCIDENT_KM: f64 = 1e-9;

/// Ordinary Kriging weights for a fixed geometry and kernel. Predictions
/// are linear in the source values, so one weight matrix serves every field
/// and every posterior draw that shares the kernel.
#[derive(Clone, Debug)]
pub struct Kriging {
    /// targets × original sources; rows sum to one.
    pub weights: DMatrix<f64>,
    /// Kriging sd per target.
    pub sd: DVector<f64>,
    /// Weights of the generalized least-squares mean; sum to one.
    pub mean_weights: DVector<f64>,
}

impl Kriging {
    pub fn new(
        sources: &[(f64, f64)],
        targets: &[(f64, f64)],
        kernel: KrigingKernel,
        policy: DuplicatePolicy,
    ) -> Result<Self> {
        kernel.validate()?;
        if sources.is_empty() {
            return Err(Error::InsufficientData("Kriging needs at least one source site".into()));
        }
        // Group coincident sources.
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut reps: Vec<(f64, f64)> = Vec::new();
        for (i, &p) in sources.iter().enumerate() {
            let hit = reps
                .iter()
                .position(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() < COINCIDENT_KM);
            match hit {
                Some(g) => {
                    if policy == DuplicatePolicy::Error {
                        return Err(Error::Validation(format!(
                            "source sites {} and {i} share a location",
                            groups[g][0]
                        )));
                    }
                    groups[g].push(i);
                }
                None => {
                    groups.push(vec![i]);
                    reps.push(p);
                }
            }
        }
        let g = reps.len();
        let d = distance_matrix_xy(&reps);
        let cmat = DMatrix::from_fn(g, g, |a, b| kernel.cov(d[(a, b)]) + if a == b { kernel.nugget } else { 0.0 });
        let f = SpdFactor::new(cmat, "Kriging covariance")?;
        let ci = &f.inverse;
        let ci_one = ci.column_sum();
        let one_ci_one = ci_one.sum();
        let mean_w = &ci_one / one_ci_one;

        let cross = cross_distances(targets, &reps);
        let rows: Vec<(DVector<f64>, f64)> = (0..targets.len())
            .into_par_iter()
            .map(|k| {
                let c0 = DVector::from_fn(g, |a, _| kernel.cov(cross[(k, a)]));
                let ci_c0 = ci * &c0;
                let gap = 1.0 - ci_one.dot(&c0);
                let w = &ci_c0 + &ci_one * (gap / one_ci_one);
                let var = kernel.sill - c0.dot(&ci_c0) + gap * gap / one_ci_one;
                (w, var.max(0.0).sqrt())
            })
            .collect();

        let expand = |w: &DVector<f64>| {
            let mut full = DVector::zeros(sources.len());
            for (a, members) in groups.iter().enumerate() {
                for &i in members {
                    full[i] = w[a] / members.len() as f64;
                }
            }
            full
        };
        let mut weights = DMatrix::zeros(targets.len(), sources.len());
        let mut sd = DVector::zeros(targets.len());
        for (k, (w, s)) in rows.iter().enumerate() {
            weights.set_row(k, &expand(w).transpose());
            sd[k] = *s;
        }
        Ok(Self {
            weights,
            sd,
            mean_weights: expand(&mean_w),
        })
    }

    pub fn predict(&self, values: &DVector<f64>) -> DVector<f64> {
        &self.weights * values
    }

    /// Generalized least-squares estimate of the constant mean.
    pub fn global_mean(&self, values: &DVector<f64>) -> f64 {
        self.mean_weights.dot(values)
    }
}

/// Ordinary Kriging predictions and Kriging sd at `targets`.
pub fn krige(
    values: &DVector<f64>,
    sources: &[(f64, f64)],
    targets: &[(f64, f64)],
    kernel: KrigingKernel,
    policy: DuplicatePolicy,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if values.len() != sources.len() {
        return Err(Error::Validation(format!(
            "{} values for {} source sites",
            values.len(),
            sources.len()
        )));
    }
    let k = Kriging::new(sources, targets, kernel, policy)?;
    Ok((k.predict(values), k.sd))
}

/// Kernel for a field from the variogram of its site values. When the
/// variogram carries no usable structure the sample variance and a third of
/// the largest distance are used.
pub fn kernel_for_field(values: &DVector<f64>, sources: &[(f64, f64)], nugget: f64) -> KrigingKernel {
    let d = distance_matrix_xy(sources);
    let n = values.len();
    let mean = values.mean();
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let fallback_range = if d.max() > 0.0 { d.max() / 3.0 } else { 1.0 };
    let field = DMatrix::from_column_slice(n, 1, values.as_slice());
    let fit = empirical_variogram(&field, &d, crate::spatial::DEFAULT_VARIOGRAM_BINS).and_then(|vg| fit_range(&vg));
    let (sill, range) = match fit {
        Ok(f) if f.status != FitStatus::Degenerate && f.sill > 0.0 => (f.sill, f.range),
        _ => (var, fallback_range),
    };
    // A flat field still needs a positive sill for the system to be solvable.
    let sill = if sill > 0.0 { sill } else { var.max(1e-12) };
    KrigingKernel { sill, range, nugget }
}

/// One Kriged field over grid cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceField {
    pub field: String,
    pub kernel: KrigingKernel,
    /// Kriged posterior mean.
    pub mean: Vec<f64>,
    /// Kriged posterior sd, clamped at zero.
    pub sd: Vec<f64>,
    /// Kriging sd of the mean surface.
    pub kriging_sd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrigedSurface {
    pub cell_ids: Vec<String>,
    pub fields: Vec<SurfaceField>,
}

impl KrigedSurface {
    pub fn field(&self, name: &str) -> Option<&SurfaceField> {
        self.fields.iter().find(|f| f.field == name)
    }
}

/// Fields written to `surface.csv`, paired with the chain's site quantity.
pub const SURFACE_FIELDS: [(&str, &str); 6] = [
    ("delta", "delta_effect"),
    ("alpha0", "alpha0"),
    ("beta0", "beta0"),
    ("alpha1", "alpha1"),
    ("beta1", "beta1"),
    ("theta_bar", "theta_bar"),
];

/// Krige every posterior summary field to the targets. Bias fields and the
/// effect use a zero nugget; `theta_bar` uses `mean(sigma^2) / T`, the
/// measurement noise left in a time average.
pub fn krige_posterior(
    samples: &PosteriorSamples,
    sources: &[(f64, f64)],
    cell_ids: Vec<String>,
    targets: &[(f64, f64)],
    policy: DuplicatePolicy,
) -> Result<KrigedSurface> {
    let theta_nugget = samples.scalar_mean("sigma_sq") / samples.n_days.max(1) as f64;
    let fields = SURFACE_FIELDS
        .par_iter()
        .map(|&(label, name)| {
            let (mean, sd) = samples.site_summary(name);
            let nugget = if label == "theta_bar" { theta_nugget } else { 0.0 };
            let kernel = kernel_for_field(&mean, sources, nugget);
            let k = Kriging::new(sources, targets, kernel, policy)?;
            Ok(SurfaceField {
                field: label.to_string(),
                kernel,
                mean: k.predict(&mean).iter().copied().collect(),
                sd: k.predict(&sd).iter().map(|v| v.max(0.0)).collect(),
                kriging_sd: k.sd.iter().copied().collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KrigedSurface { cell_ids, fields })
}

/// Per-draw effect surfaces at the targets, using the effect field's kernel.
pub fn effect_surface_draws(
    samples: &PosteriorSamples,
    sources: &[(f64, f64)],
    targets: &[(f64, f64)],
    kernel: KrigingKernel,
    policy: DuplicatePolicy,
) -> Result<Vec<DVector<f64>>> {
    let k = Kriging::new(sources, targets, kernel, policy)?;
    Ok(samples.draws.iter().map(|d| k.predict(&d.delta_effect)).collect())
}

/// `surface.csv`: `cell_id,field,mean,sd`.
pub fn surface_rows(surface: &KrigedSurface) -> Vec<String> {
    let mut rows = Vec::new();
    for (k, id) in surface.cell_ids.iter().enumerate() {
        for f in &surface.fields {
            rows.push(format!("{},{},{},{}", id, f.field, fmt_g9(f.mean[k]), fmt_g9(f.sd[k])));
        }
    }
    rows
}

pub const SURFACE_HEADER: &str = "cell_id,field,mean,sd";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentFlag {
    Ok,
    NegativeEffect,
    /// `theta_bar + delta <= 0`; the percent is not defined.
    NonpositiveTotal,
    /// Outside [-100, 100] before clamping.
    Clamped,
}

impl PercentFlag {
    pub fn label(self) -> &'static str {
        match self {
            PercentFlag::Ok => "ok",
            PercentFlag::NegativeEffect => "negative_effect",
            PercentFlag::NonpositiveTotal => "nonpositive_total",
            PercentFlag::Clamped => "clamped",
        }
    }
}

/// `100 delta / (theta_bar + delta)` clamped to [-100, 100].
pub fn percent_of_total(delta: &[f64], theta_bar: &[f64]) -> Vec<(f64, PercentFlag)> {
    delta
        .iter()
        .zip(theta_bar)
        .map(|(&d, &th)| {
            let total = th + d;
            if !(total > 0.0) {
                return (f64::NAN, PercentFlag::NonpositiveTotal);
            }
            let p = 100.0 * d / total;
            if !(-100.0..=100.0).contains(&p) {
                (p.clamp(-100.0, 100.0), PercentFlag::Clamped)
            } else if d < 0.0 {
                (p, PercentFlag::NegativeEffect)
            } else {
                (p, PercentFlag::Ok)
            }
        })
        .collect()
}

/// `percent.csv`: `cell_id,percent,flag`.
pub fn percent_rows(surface: &KrigedSurface) -> Vec<String> {
    let (Some(d), Some(th)) = (surface.field("delta"), surface.field("theta_bar")) else {
        return Vec::new();
    };
    percent_of_total(&d.mean, &th.mean)
        .into_iter()
        .zip(&surface.cell_ids)
        .map(|((p, flag), id)| format!("{},{},{}", id, fmt_g9(p), flag.label()))
        .collect()
}

pub const PERCENT_HEADER: &str = "cell_id,percent,flag";
