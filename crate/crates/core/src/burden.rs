//! Excess respiratory hospitalizations from county-level causal exposure.
//!
//! `R_ac = r0_a n_c share_ac (exp(r_a Δ_c) - 1)` with `r_a = ln(RR_a) / increment`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::credible_interval;
use crate::io::{fmt_g9, write_rows, GridCell};

/// Relative rate of one age group per `increment` μg/m³.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeGroupRate {
    pub label: String,
    pub relative_rate: f64,
}

/// Age groups and their relative rates. Baseline incidences come from a
/// separate file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgeRateConfig {
    /// Exposure increment (μg/m³) the relative rates refer to.
    pub increment: f64,
    pub groups: Vec<AgeGroupRate>,
}

impl Default for AgeRateConfig {
    fn default() -> Self {
        let g = |label: &str, rr: f64| AgeGroupRate {
            label: label.to_string(),
            relative_rate: rr,
        };
        Self {
            increment: 10.0,
            groups: vec![g("0-1", 1.045), g("2-17", 1.027), g("18-54", 1.024), g("55+", 1.030)],
        }
    }
}

impl AgeRateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.increment > 0.0) || !self.increment.is_finite() {
            return Err(Error::Parameter(format!("exposure increment must be positive, got {}", self.increment)));
        }
        if self.groups.is_empty() {
            return Err(Error::Parameter("no age groups configured".into()));
        }
        for g in &self.groups {
            if !(g.relative_rate > 0.0) || !g.relative_rate.is_finite() {
                return Err(Error::Parameter(format!(
                    "relative rate of age group {} must be positive, got {}",
                    g.label, g.relative_rate
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeRate {
    pub label: String,
    pub relative_rate: f64,
    /// Baseline hospitalizations per person per period.
    pub baseline: f64,
}

impl AgeRate {
    /// Log-rate per μg/m³.
    pub fn slope(&self, increment: f64) -> f64 {
        self.relative_rate.ln() / increment
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeRateTable {
    pub increment: f64,
    pub groups: Vec<AgeRate>,
}

impl AgeRateTable {
    /// Join the configured rates with baseline incidences keyed by label.
    pub fn new(config: &AgeRateConfig, baselines: &BTreeMap<String, f64>) -> Result<Self> {
        config.validate()?;
        let mut groups = Vec::with_capacity(config.groups.len());
        for g in &config.groups {
            let r0 = *baselines
                .get(&g.label)
                .ok_or_else(|| Error::Validation(format!("no baseline rate for age group {}", g.label)))?;
            if !(r0 >= 0.0) || !r0.is_finite() {
                return Err(Error::Validation(format!("baseline rate of age group {} must be >= 0, got {r0}", g.label)));
            }
            groups.push(AgeRate {
                label: g.label.clone(),
                relative_rate: g.relative_rate,
                baseline: r0,
            });
        }
        Ok(Self {
            increment: config.increment,
            groups,
        })
    }
}

/// Excess cases in a population of `n` with baseline rate `r0`.
pub fn burden(r0: f64, n: f64, relative_rate: f64, increment: f64, delta: f64) -> f64 {
    r0 * n * ((relative_rate.ln() / increment * delta).exp_m1())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountyRecord {
    pub fips: String,
    pub population: f64,
    /// Population share of each configured age group.
    pub shares: Vec<f64>,
    /// Indices of member grid cells.
    pub cells: Vec<usize>,
    pub region: Option<String>,
}

/// Shares must sum to one within this tolerance.
pub const SHARE_TOL: f64 = 1e-9;

/// Read `counties.csv`: `fips,population,share_g1,...,share_gK`.
pub fn read_counties(path: &Path, n_groups: usize) -> Result<Vec<CountyRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let expected: Vec<String> = ["fips".to_string(), "population".to_string()]
        .into_iter()
        .chain((1..=n_groups).map(|g| format!("share_g{g}")))
        .collect();
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let load = |msg: String| Error::Load {
        path: path.display().to_string(),
        message: msg,
    };
    if header != expected {
        return Err(load(format!(
            "expected header `{}`, found `{}`",
            expected.join(","),
            header.join(",")
        )));
    }
    let mut out: Vec<CountyRecord> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec.len() != expected.len() {
            return Err(load(format!("row {line}: expected {} fields, found {}", expected.len(), rec.len())));
        }
        let num = |col: usize| -> Result<f64> {
            rec[col]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| load(format!("row {line}: column {}: cannot parse `{}`", expected[col], &rec[col])))
        };
        let population = num(1)?;
        if population < 0.0 {
            return Err(load(format!("row {line}: negative population")));
        }
        let shares = (2..expected.len()).map(num).collect::<Result<Vec<_>>>()?;
        let total: f64 = shares.iter().sum();
        if shares.iter().any(|&s| s < 0.0) || (total - 1.0).abs() > SHARE_TOL {
            return Err(load(format!("row {line}: age shares must be >= 0 and sum to 1, got sum {total}")));
        }
        if out.iter().any(|c| c.fips == rec[0]) {
            return Err(load(format!("row {line}: duplicate key fips {}", &rec[0])));
        }
        out.push(CountyRecord {
            fips: rec[0].to_string(),
            population,
            shares,
            cells: Vec::new(),
            region: None,
        });
    }
    Ok(out)
}

/// Read `baseline_rates.csv`: `age_group,r0`.
pub fn read_baseline_rates(path: &Path) -> Result<BTreeMap<String, f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let load = |msg: String| Error::Load {
        path: path.display().to_string(),
        message: msg,
    };
    if header != ["age_group", "r0"] {
        return Err(load(format!("expected header `age_group,r0`, found `{}`", header.join(","))));
    }
    let mut out = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() != 2 {
            return Err(load(format!("row {line}: expected 2 fields, found {}", rec.len())));
        }
        let r0: f64 = rec[1]
            .parse()
            .map_err(|_| load(format!("row {line}: column r0: cannot parse `{}`", &rec[1])))?;
        if out.insert(rec[0].to_string(), r0).is_some() {
            return Err(load(format!("row {line}: duplicate key age_group {}", &rec[0])));
        }
    }
    Ok(out)
}

/// Attach grid cells (and their region) to counties by FIPS code.
pub fn assign_cells(counties: &mut [CountyRecord], cells: &[GridCell]) {
    let index: HashMap<String, usize> = counties.iter().enumerate().map(|(k, c)| (c.fips.clone(), k)).collect();
    for c in counties.iter_mut() {
        c.cells.clear();
    }
    for (i, cell) in cells.iter().enumerate() {
        if let Some(&k) = index.get(cell.county_fips.as_str()) {
            counties[k].cells.push(i);
            if counties[k].region.is_none() {
                counties[k].region = cell.region.clone();
            }
        }
    }
}

/// Equal-weight mean of the member cells' values. Counties with no cells
/// give `None`.
pub fn county_exposure(cell_values: &[f64], counties: &[CountyRecord]) -> Vec<Option<f64>> {
    counties
        .iter()
        .map(|c| {
            if c.cells.is_empty() {
                warn!("county {} has no grid cells; excluded", c.fips);
                None
            } else {
                Some(c.cells.iter().map(|&i| cell_values[i]).sum::<f64>() / c.cells.len() as f64)
            }
        })
        .collect()
}

/// Mean and equal-tailed 95% interval of the burden over exposure draws.
pub fn burden_ci(delta_draws: &[f64], rate: &AgeRate, increment: f64, population: f64) -> (f64, f64, f64) {
    let v: Vec<f64> = delta_draws
        .iter()
        .map(|&d| burden(rate.baseline, population, rate.relative_rate, increment, d))
        .collect();
    summarize(&v)
}

fn summarize(v: &[f64]) -> (f64, f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let (lo, hi) = credible_interval(v, 0.95);
    (mean, lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurdenRow {
    /// County FIPS, `REGION:<name>` or `NATIONAL`.
    pub key: String,
    pub age_group: String,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Burden draws per county and age group.
#[derive(Clone, Debug, PartialEq)]
pub struct BurdenDraws {
    pub fips: Vec<String>,
    pub regions: Vec<Option<String>>,
    pub groups: Vec<String>,
    /// `[county][group][draw]`.
    pub draws: Vec<Vec<Vec<f64>>>,
}

/// Evaluate the burden for every county, age group and exposure draw.
/// `cell_draws[d][i]` is the effect at cell `i` in draw `d`.
pub fn burden_draws(cell_draws: &[Vec<f64>], counties: &[CountyRecord], table: &AgeRateTable) -> Result<BurdenDraws> {
    if cell_draws.is_empty() {
        return Err(Error::InsufficientData("no exposure draws".into()));
    }
    let per_draw: Vec<Vec<Option<f64>>> = cell_draws.iter().map(|v| county_exposure_quiet(v, counties)).collect();
    let kept: Vec<usize> = (0..counties.len())
        .filter(|&k| {
            let ok = !counties[k].cells.is_empty();
            if !ok {
                warn!("county {} has no grid cells; excluded", counties[k].fips);
            }
            ok
        })
        .collect();
    let draws = kept
        .par_iter()
        .map(|&k| {
            let c = &counties[k];
            table
                .groups
                .iter()
                .enumerate()
                .map(|(a, g)| {
                    let n = c.population * c.shares[a];
                    per_draw
                        .iter()
                        .map(|d| burden(g.baseline, n, g.relative_rate, table.increment, d[k].expect("county has cells")))
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(BurdenDraws {
        fips: kept.iter().map(|&k| counties[k].fips.clone()).collect(),
        regions: kept.iter().map(|&k| counties[k].region.clone()).collect(),
        groups: table.groups.iter().map(|g| g.label.clone()).collect(),
        draws,
    })
}

fn county_exposure_quiet(cell_values: &[f64], counties: &[CountyRecord]) -> Vec<Option<f64>> {
    counties
        .iter()
        .map(|c| {
            (!c.cells.is_empty()).then(|| c.cells.iter().map(|&i| cell_values[i]).sum::<f64>() / c.cells.len() as f64)
        })
        .collect()
}

/// Which counties an aggregate row covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AggregateBy {
    Region(String),
    National,
}

/// Sum per-draw burdens over the selected counties for each age group.
pub fn aggregate(b: &BurdenDraws, by: &AggregateBy) -> Vec<Vec<f64>> {
    let members: Vec<usize> = (0..b.fips.len())
        .filter(|&k| match by {
            AggregateBy::National => true,
            AggregateBy::Region(r) => b.regions[k].as_deref() == Some(r.as_str()),
        })
        .collect();
    let n_draws = b.draws.first().and_then(|c| c.first()).map_or(0, Vec::len);
    (0..b.groups.len())
        .map(|a| {
            (0..n_draws)
                .map(|d| members.iter().map(|&k| b.draws[k][a][d]).sum())
                .collect()
        })
        .collect()
}

/// County rows, then one block per region, then the national totals.
pub fn burden_table(b: &BurdenDraws) -> Vec<BurdenRow> {
    let mut rows = Vec::new();
    for (k, fips) in b.fips.iter().enumerate() {
        for (a, g) in b.groups.iter().enumerate() {
            let (mean, lo95, hi95) = summarize(&b.draws[k][a]);
            rows.push(BurdenRow {
                key: fips.clone(),
                age_group: g.clone(),
                mean,
                lo95,
                hi95,
            });
        }
    }
    let regions: std::collections::BTreeSet<&String> = b.regions.iter().flatten().collect();
    let mut push_agg = |key: String, by: AggregateBy| {
        for (a, draws) in aggregate(b, &by).iter().enumerate() {
            if draws.is_empty() {
                continue;
            }
            let (mean, lo95, hi95) = summarize(draws);
            rows.push(BurdenRow {
                key: key.clone(),
                age_group: b.groups[a].clone(),
                mean,
                lo95,
                hi95,
            });
        }
    };
    for r in regions {
        push_agg(format!("REGION:{r}"), AggregateBy::Region(r.clone()));
    }
    push_agg("NATIONAL".to_string(), AggregateBy::National);
    rows
}

/// `burden.csv`: `fips,age_group,mean,lo95,hi95`. The bounds are posterior
/// credible limits.
pub fn write_burden(path: &Path, rows: &[BurdenRow]) -> Result<()> {
    write_rows(
        path,
        "fips,age_group,mean,lo95,hi95",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{}",
                r.key,
                r.age_group,
                fmt_g9(r.mean),
                fmt_g9(r.lo95),
                fmt_g9(r.hi95)
            )
        }),
    )
}
