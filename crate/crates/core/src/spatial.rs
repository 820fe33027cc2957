//! Site geometry, exponential correlation, the observation covariance under
//! the fire/no-fire indicator, and empirical variogram estimation and fitting.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_VARIOGRAM_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub region: Option<String>,
    /// Planar coordinates in km about the set's projection origin.
    pub x_km: f64,
    pub y_km: f64,
}

/// Point locations with region labels. Coordinates are projected to a planar
/// km frame (equirectangular about the set centroid) at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSet {
    sites: Vec<Site>,
    /// (lon, lat) in degrees of the projection origin.
    origin: (f64, f64),
}

/// A site as read from a file, before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteRecord {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub region: Option<String>,
}

/// Equirectangular projection of `(lon, lat)` about `origin`, in km.
pub fn project(origin: (f64, f64), lon: f64, lat: f64) -> (f64, f64) {
    let (lon0, lat0) = origin;
    let x = EARTH_RADIUS_KM * (lon - lon0).to_radians() * lat0.to_radians().cos();
    let y = EARTH_RADIUS_KM * (lat - lat0).to_radians();
    (x, y)
}

/// Inverse of [`project`].
pub fn unproject(origin: (f64, f64), x_km: f64, y_km: f64) -> (f64, f64) {
    let (lon0, lat0) = origin;
    let lat = lat0 + (y_km / EARTH_RADIUS_KM).to_degrees();
    let lon = lon0 + (x_km / (EARTH_RADIUS_KM * lat0.to_radians().cos())).to_degrees();
    (lon, lat)
}

impl SiteSet {
    /// Build from geographic records, projecting about their centroid.
    pub fn from_records(records: Vec<SiteRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("site set must contain at least one site".into()));
        }
        for r in &records {
            if !r.lon.is_finite() || !r.lat.is_finite() {
                return Err(Error::Validation(format!("site {}: non-finite coordinates", r.id)));
            }
        }
        let n = records.len() as f64;
        let origin = (
            records.iter().map(|r| r.lon).sum::<f64>() / n,
            records.iter().map(|r| r.lat).sum::<f64>() / n,
        );
        Self::with_origin(records, origin)
    }

    /// Build from geographic records projected about a given origin.
    pub fn with_origin(records: Vec<SiteRecord>, origin: (f64, f64)) -> Result<Self> {
        let sites = records
            .into_iter()
            .map(|r| {
                let (x_km, y_km) = project(origin, r.lon, r.lat);
                Site {
                    id: r.id,
                    lon: r.lon,
                    lat: r.lat,
                    region: r.region,
                    x_km,
                    y_km,
                }
            })
            .collect();
        let set = Self { sites, origin };
        set.validate()?;
        Ok(set)
    }

    /// Build directly from planar km coordinates; geographic coordinates are
    /// recovered by inverting the projection about `origin`.
    pub fn from_planar(
        ids: Vec<String>,
        xy_km: &[(f64, f64)],
        regions: Vec<Option<String>>,
        origin: (f64, f64),
    ) -> Result<Self> {
        if ids.len() != xy_km.len() || ids.len() != regions.len() {
            return Err(Error::Validation("site id, coordinate and region lengths differ".into()));
        }
        let sites = ids
            .into_iter()
            .zip(xy_km)
            .zip(regions)
            .map(|((id, &(x_km, y_km)), region)| {
                let (lon, lat) = unproject(origin, x_km, y_km);
                Site {
                    id,
                    lon,
                    lat,
                    region,
                    x_km,
                    y_km,
                }
            })
            .collect();
        let set = Self { sites, origin };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Validation("site set must contain at least one site".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.sites {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate site_id {}", s.id)));
            }
            if ![s.lon, s.lat, s.x_km, s.y_km].iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("site {}: non-finite coordinates", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn get(&self, i: usize) -> &Site {
        &self.sites[i]
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.sites.iter().map(|s| s.id.as_str())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.id == id)
    }

    pub fn coords_km(&self) -> Vec<(f64, f64)> {
        self.sites.iter().map(|s| (s.x_km, s.y_km)).collect()
    }

    /// Project an arbitrary location into this set's planar frame.
    pub fn project(&self, lon: f64, lat: f64) -> (f64, f64) {
        project(self.origin, lon, lat)
    }

    pub fn records(&self) -> Vec<SiteRecord> {
        self.sites
            .iter()
            .map(|s| SiteRecord {
                id: s.id.clone(),
                lon: s.lon,
                lat: s.lat,
                region: s.region.clone(),
            })
            .collect()
    }

    /// Subset by index, re-projected about the subset centroid.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = self.records();
        Self::from_records(indices.iter().map(|&i| records[i].clone()).collect())
    }
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Pairwise planar distances (km).
pub fn distance_matrix(sites: &SiteSet) -> DMatrix<f64> {
    distance_matrix_xy(&sites.coords_km())
}

pub fn distance_matrix_xy(xy: &[(f64, f64)]) -> DMatrix<f64> {
    let n = xy.len();
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { euclid(xy[i], xy[j]) })
}

/// Distances from each target to each source (targets × sources).
pub fn cross_distances(targets: &[(f64, f64)], sources: &[(f64, f64)]) -> DMatrix<f64> {
    DMatrix::from_fn(targets.len(), sources.len(), |i, j| euclid(targets[i], sources[j]))
}

/// Elementwise `exp(-h / phi)`.
pub fn exp_correlation(dist: &DMatrix<f64>, phi: f64) -> Result<DMatrix<f64>> {
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(Error::Parameter(format!("range phi must be positive and finite, got {phi}")));
    }
    Ok(dist.map(|h| (-h / phi).exp()))
}

/// Covariance parameters of the bivariate error process plus nugget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub gamma: f64,
    pub phi1: f64,
    /// Measurement-error (nugget) variance.
    pub sigma_sq: f64,
}

impl CovarianceParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma1_sq > 0.0
            && self.sigma2_sq >= 0.0
            && self.gamma.abs() <= 1.0
            && self.phi1 > 0.0
            && self.sigma_sq >= 0.0
            && [self.sigma1_sq, self.sigma2_sq, self.gamma, self.phi1, self.sigma_sq]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid covariance parameters {self:?}")))
        }
    }

    pub fn sigma12(&self) -> f64 {
        self.gamma * (self.sigma1_sq * self.sigma2_sq).sqrt()
    }
}

/// `Cov[Y_t(s), Y_t(s')]` for smoke flags `c`, `c_prime` at distance `h`.
/// The nugget enters only when both arguments are the same observation
/// (`same_site`), not merely co-located.
pub fn obs_covariance(h: f64, c: u8, c_prime: u8, params: &CovarianceParams, same_site: bool) -> Result<f64> {
    if c > 1 || c_prime > 1 {
        return Err(Error::Validation(format!("smoke flags must be 0 or 1, got ({c}, {c_prime})")));
    }
    if !(h >= 0.0) {
        return Err(Error::Parameter(format!("distance must be nonnegative, got {h}")));
    }
    params.validate()?;
    Ok(obs_covariance_unchecked(h, c, c_prime, params, same_site))
}

/// [`obs_covariance`] without argument validation, for inner loops.
pub fn obs_covariance_unchecked(h: f64, c: u8, c_prime: u8, p: &CovarianceParams, same_site: bool) -> f64 {
    let s1 = p.sigma1_sq.sqrt();
    let s2 = p.sigma2_sq.sqrt();
    let scale = match (c, c_prime) {
        (0, 0) => p.sigma1_sq,
        (1, 1) => p.sigma1_sq + 2.0 * s1 * s2 * p.gamma + p.sigma2_sq,
        _ => p.sigma1_sq * (1.0 + (s2 / s1) * p.gamma),
    };
    let nugget = if same_site { p.sigma_sq } else { 0.0 };
    scale * (-h / p.phi1).exp() + nugget
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variogram {
    pub bin_edges: Vec<f64>,
    /// Mean pair distance in each bin (midpoint for empty bins).
    pub bin_centers: Vec<f64>,
    pub semivariances: Vec<f64>,
    pub bin_counts: Vec<u64>,
}

impl Variogram {
    pub fn n_bins(&self) -> usize {
        self.bin_centers.len()
    }

    pub fn is_empty_bin(&self, k: usize) -> bool {
        self.bin_counts[k] == 0
    }

    pub fn nonempty_bins(&self) -> usize {
        self.bin_counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn total_pairs(&self) -> u64 {
        self.bin_counts.iter().sum()
    }
}

/// Equal-width bin edges on `[0, max_dist / 2]`.
pub fn default_bin_edges(dist: &DMatrix<f64>, n_bins: usize) -> Result<Vec<f64>> {
    if n_bins == 0 {
        return Err(Error::Parameter("variogram needs at least one bin".into()));
    }
    let max = dist.max();
    if !(max > 0.0) {
        return Err(Error::InsufficientData("all sites are co-located; no positive lags".into()));
    }
    let width = 0.5 * max / n_bins as f64;
    Ok((0..=n_bins).map(|k| k as f64 * width).collect())
}

/// Accumulate classical (Matheron) semivariances over all site pairs `i < j`
/// and all days for which `include(i, j, t)` holds and both values are
/// finite. Non-finite entries of `field` mark missing observations.
pub fn variogram_with<F>(field: &DMatrix<f64>, dist: &DMatrix<f64>, edges: &[f64], include: F) -> Variogram
where
    F: Fn(usize, usize, usize) -> bool,
{
    let n_bins = edges.len() - 1;
    let top = edges[n_bins];
    let width = top / n_bins as f64;
    let mut sq = vec![0.0; n_bins];
    let mut hsum = vec![0.0; n_bins];
    let mut counts = vec![0u64; n_bins];
    let (n, days) = field.shape();
    for i in 0..n {
        for j in (i + 1)..n {
            let h = dist[(i, j)];
            if h > top {
                continue;
            }
            let k = ((h / width) as usize).min(n_bins - 1);
            for t in 0..days {
                let (a, b) = (field[(i, t)], field[(j, t)]);
                if !a.is_finite() || !b.is_finite() || !include(i, j, t) {
                    continue;
                }
                sq[k] += (a - b).powi(2);
                hsum[k] += h;
                counts[k] += 1;
            }
        }
    }
    let bin_centers = (0..n_bins)
        .map(|k| {
            if counts[k] > 0 {
                hsum[k] / counts[k] as f64
            } else {
                0.5 * (edges[k] + edges[k + 1])
            }
        })
        .collect();
    let semivariances = (0..n_bins)
        .map(|k| if counts[k] > 0 { 0.5 * sq[k] / counts[k] as f64 } else { 0.0 })
        .collect();
    Variogram {
        bin_edges: edges.to_vec(),
        bin_centers,
        semivariances,
        bin_counts: counts,
    }
}

/// Empirical variogram of a site × day field, pairs pooled over days.
pub fn empirical_variogram(field: &DMatrix<f64>, dist: &DMatrix<f64>, n_bins: usize) -> Result<Variogram> {
    if field.nrows() != dist.nrows() || dist.nrows() != dist.ncols() {
        return Err(Error::Validation(format!(
            "field has {} sites but distance matrix is {}x{}",
            field.nrows(),
            dist.nrows(),
            dist.ncols()
        )));
    }
    if field.nrows() < 2 {
        return Err(Error::InsufficientData("variogram needs at least two sites".into()));
    }
    let edges = default_bin_edges(dist, n_bins)?;
    let vg = variogram_with(field, dist, &edges, |_, _, _| true);
    if vg.total_pairs() == 0 {
        return Err(Error::InsufficientData(
            "empty variogram: no site pairs share a non-missing day".into(),
        ));
    }
    Ok(vg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Ok,
    /// The range hit its lower bound: no resolvable spatial structure.
    RangeAtLowerBound,
    RangeAtUpperBound,
    /// All semivariances are zero.
    Degenerate,
}

/// Fitted exponential variogram `nugget + sill (1 - exp(-h / range))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub sill: f64,
    pub range: f64,
    pub nugget: f64,
    pub status: FitStatus,
    pub range_bounds: (f64, f64),
}

impl VariogramFit {
    pub fn eval(&self, h: f64) -> f64 {
        self.nugget + self.sill * (1.0 - (-h / self.range).exp())
    }
}

/// Relative rise over the observed lag range below which a fit is treated
/// as lacking spatial structure.
const MIN_STRUCTURED_RISE: f64 = 0.05;

struct Points {
    h: Vec<f64>,
    g: Vec<f64>,
    w: Vec<f64>,
}

impl Points {
    /// Best nonnegative (nugget, sill) for a fixed range and its weighted SSE.
    fn profile(&self, range: f64) -> (f64, f64, f64) {
        let f: Vec<f64> = self.h.iter().map(|h| 1.0 - (-h / range).exp()).collect();
        let (mut sw, mut sf, mut sff, mut sg, mut sfg) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..f.len() {
            let w = self.w[k];
            sw += w;
            sf += w * f[k];
            sff += w * f[k] * f[k];
            sg += w * self.g[k];
            sfg += w * f[k] * self.g[k];
        }
        let sse = |nug: f64, sill: f64| -> f64 {
            (0..f.len())
                .map(|k| self.w[k] * (self.g[k] - nug - sill * f[k]).powi(2))
                .sum()
        };
        let mut candidates = Vec::with_capacity(3);
        let det = sw * sff - sf * sf;
        if det > 1e-12 * sw * sff.max(f64::MIN_POSITIVE) {
            let nug = (sff * sg - sf * sfg) / det;
            let sill = (sw * sfg - sf * sg) / det;
            if nug >= 0.0 && sill >= 0.0 {
                candidates.push((nug, sill));
            }
        }
        if sff > 0.0 {
            candidates.push((0.0, (sfg / sff).max(0.0)));
        }
        candidates.push(((sg / sw).max(0.0), 0.0));
        candidates
            .into_iter()
            .map(|(n, s)| (n, s, sse(n, s)))
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .expect("at least one candidate")
    }
}

/// Weighted (by pair count) least-squares fit of an exponential variogram
/// with the range bounded to `[min lag / 10, 10 * max lag]`.
pub fn fit_range(vg: &Variogram) -> Result<VariogramFit> {
    let idx: Vec<usize> = (0..vg.n_bins()).filter(|&k| vg.bin_counts[k] > 0).collect();
    if idx.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "variogram fit needs at least 3 non-empty bins, got {}",
            idx.len()
        )));
    }
    let pts = Points {
        h: idx.iter().map(|&k| vg.bin_centers[k]).collect(),
        g: idx.iter().map(|&k| vg.semivariances[k]).collect(),
        w: idx.iter().map(|&k| vg.bin_counts[k] as f64).collect(),
    };
    let h_max = pts.h.iter().cloned().fold(0.0, f64::max);
    let h_min_pos = pts.h.iter().cloned().filter(|&h| h > 0.0).fold(f64::INFINITY, f64::min);
    if !h_min_pos.is_finite() {
        return Err(Error::InsufficientData("no positive lags in variogram".into()));
    }
    let lo = h_min_pos / 10.0;
    let hi = 10.0 * h_max;

    if pts.g.iter().all(|&g| g.abs() <= f64::EPSILON) {
        return Ok(VariogramFit {
            sill: 0.0,
            range: lo,
            nugget: 0.0,
            status: FitStatus::Degenerate,
            range_bounds: (lo, hi),
        });
    }

    // Coarse log-grid scan of the profiled objective, then golden-section refinement.
    let (llo, lhi) = (lo.ln(), hi.ln());
    let grid = 400;
    let at = |k: usize| llo + (lhi - llo) * k as f64 / grid as f64;
    let obj = |lr: f64| pts.profile(lr.exp()).2;
    let (mut best_k, mut best) = (0, f64::INFINITY);
    for k in 0..=grid {
        let v = obj(at(k));
        if v < best {
            best = v;
            best_k = k;
        }
    }
    let (mut a, mut b) = (at(best_k.saturating_sub(1)), at((best_k + 1).min(grid)));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (obj(x1), obj(x2));
    for _ in 0..200 {
        if (b - a).abs() < 1e-13 {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = obj(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = obj(x2);
        }
    }
    let mut lr = 0.5 * (a + b);
    if best < obj(lr) {
        lr = at(best_k);
    }
    let range = lr.exp().clamp(lo, hi);
    let (nugget, sill, _) = pts.profile(range);

    let rise = sill * ((-h_min_pos / range).exp() - (-h_max / range).exp());
    let total = nugget + sill;
    if total <= 0.0 || rise < MIN_STRUCTURED_RISE * total {
        let (nugget, sill, _) = pts.profile(lo);
        return Ok(VariogramFit {
            sill,
            range: lo,
            nugget,
            status: FitStatus::RangeAtLowerBound,
            range_bounds: (lo, hi),
        });
    }
    let status = if range <= lo * (1.0 + 1e-9) {
        FitStatus::RangeAtLowerBound
    } else if range >= hi * (1.0 - 1e-9) {
        FitStatus::RangeAtUpperBound
    } else {
        FitStatus::Ok
    };
    Ok(VariogramFit {
        sill,
        range,
        nugget,
        status,
        range_bounds: (lo, hi),
    })
}
