//! Empirical range parameters, fixed before sampling.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::ols::{ols_mean_recovery, reduced_ols};
use crate::spatial::{distance_matrix, empirical_variogram, fit_range, FitStatus, VariogramFit, DEFAULT_VARIOGRAM_BINS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeEstimate {
    pub phi1: f64,
    pub phi2: f64,
    pub fit1: Option<VariogramFit>,
    pub fit2: Option<VariogramFit>,
    /// Sites whose OLS design passed the screen.
    pub n_screened: usize,
    pub notes: Vec<String>,
}

/// `phi1` from the variogram of per-site OLS residuals pooled over days,
/// `phi2` from the variogram of the per-site OLS `beta0` estimates. Sites
/// that fail the collinearity screen contribute through the reduced design
/// that drops the unidentified smoke columns.
pub fn estimate_ranges(data: &PanelDataset) -> RangeEstimate {
    let dist = distance_matrix(&data.sites);
    let fallback = if dist.max() > 0.0 { dist.max() / 3.0 } else { 1.0 };
    let mut notes = Vec::new();
    let mut ok_sites = Vec::new();
    let mut resid_rows = Vec::new();
    let mut beta0 = Vec::new();
    let mut n_screened = 0;
    for i in 0..data.n_sites() {
        if let Ok(fit) = ols_mean_recovery(data, i) {
            n_screened += 1;
            ok_sites.push(i);
            beta0.push(fit.beta0());
            resid_rows.push(fit.residuals);
        } else if let Some((b0, resid)) = reduced_ols(data, i) {
            ok_sites.push(i);
            beta0.push(b0);
            resid_rows.push(resid);
        }
    }
    if n_screened < ok_sites.len() {
        notes.push(format!(
            "{} of {} sites fitted with the reduced design (smoke columns not identified)",
            ok_sites.len() - n_screened,
            ok_sites.len()
        ));
    }
    let n_ok = ok_sites.len();
    let sub = DMatrix::from_fn(n_ok, n_ok, |a, b| dist[(ok_sites[a], ok_sites[b])]);

    let mut pick = |name: &str, field: Option<DMatrix<f64>>| -> (f64, Option<VariogramFit>) {
        let Some(field) = field else {
            let msg = format!("{name}: fewer than 3 sites have an identifiable design; using max distance / 3 = {fallback:.3} km");
            warn!("{msg}");
            notes.push(msg);
            return (fallback, None);
        };
        let fit = empirical_variogram(&field, &sub, DEFAULT_VARIOGRAM_BINS).and_then(|vg| fit_range(&vg));
        match fit {
            Ok(f) if f.status == FitStatus::Ok || f.status == FitStatus::RangeAtUpperBound => {
                if f.status == FitStatus::RangeAtUpperBound {
                    let msg = format!("{name}: range at upper bound {:.3} km", f.range);
                    warn!("{msg}");
                    notes.push(msg);
                }
                (f.range, Some(f))
            }
            Ok(f) if f.status == FitStatus::RangeAtLowerBound => {
                let msg = format!("{name}: no spatial structure, range at lower bound {:.3} km", f.range);
                warn!("{msg}");
                notes.push(msg);
                (f.range, Some(f))
            }
            Ok(f) => {
                let msg = format!("{name}: degenerate variogram; using max distance / 3 = {fallback:.3} km");
                warn!("{msg}");
                notes.push(msg);
                (fallback, Some(f))
            }
            Err(e) => {
                let msg = format!("{name}: variogram fit failed ({e}); using max distance / 3 = {fallback:.3} km");
                warn!("{msg}");
                notes.push(msg);
                (fallback, None)
            }
        }
    };

    let enough = n_ok >= 3;
    let resid = enough.then(|| DMatrix::from_fn(n_ok, data.n_days(), |a, t| resid_rows[a][t]));
    let (phi1, fit1) = pick("phi1", resid);
    let b0 = enough.then(|| DMatrix::from_fn(n_ok, 1, |a, _| beta0[a]));
    let (phi2, fit2) = pick("phi2", b0);
    RangeEstimate {
        phi1,
        phi2,
        fit1,
        fit2,
        n_screened,
        notes,
    }
}
