//! Subcommand implementations. Each writes its artifacts under the output
//! directory and records them for the manifest.

use std::collections::BTreeSet;
use std::path::PathBuf;

use log::{info, warn};
use smokecausal_core::burden::{
    assign_cells, burden_draws, burden_table, read_baseline_rates, read_counties, write_burden, AgeRateTable,
};
use smokecausal_core::crossval::{tau_selection, write_cv, CvConfig};
use smokecausal_core::data::{load_panel, write_panel, LoadConfig, PanelDataset, RegionBlock};
use smokecausal_core::diagnostics::{
    acf_rows, covariance_curves, ess_table, gof_rows, mean_model_residuals, residual_acf, variogram_gof,
    write_covariance_curves, write_ess, write_trace, ACF_HEADER, GOF_HEADER,
};
use smokecausal_core::gibbs::{write_latent_summary, write_samples, PosteriorSamples};
use smokecausal_core::inference::{
    causal_effect, percent_rows, surface_rows, write_effect, PERCENT_HEADER, SURFACE_HEADER,
};
use smokecausal_core::io::{fmt_g9, read_grid, read_json, write_grid, write_json, write_rows, GridCell};
use smokecausal_core::pipeline::{
    assemble_cell_draws, blocking_sensitivity, cell_regions, fit_blocks, predict_block, region_blocks, RegionPrediction,
};
use smokecausal_core::rng::mix64;
use smokecausal_core::spatial::{distance_matrix, CovarianceParams};
use smokecausal_core::synth::{layout_grid, layout_sites, simulate_panel, Truth};
use smokecausal_core::{Error, Result};

use crate::config::{required, Effective};
use crate::manifest::Recorder;

type Blocks = Vec<(Vec<String>, RegionBlock)>;

fn load(eff: &Effective) -> Result<PanelDataset> {
    let sites = required(&eff.sites, "--sites")?;
    let panel = required(&eff.panel, "--panel")?;
    load_panel(sites, panel, &LoadConfig { tau: eff.config.tau })
}

fn blocks(eff: &Effective, data: &PanelDataset) -> Result<Blocks> {
    region_blocks(data, &eff.config.merge_regions)
}

fn region_dir(eff: &Effective, region: &str) -> PathBuf {
    eff.out.join(region)
}

fn posterior_path(eff: &Effective, region: &str) -> PathBuf {
    region_dir(eff, region).join("posterior.json")
}

fn load_posteriors(eff: &Effective, blocks: &Blocks) -> Result<Vec<PosteriorSamples>> {
    blocks
        .iter()
        .map(|(_, b)| {
            let p = posterior_path(eff, &b.region);
            if !p.is_file() {
                return Err(Error::Validation(format!(
                    "no fitted posterior for region {} at {}; run `fit` with the same --out first",
                    b.region,
                    p.display()
                )));
            }
            let s: PosteriorSamples = read_json(&p)?;
            if s.site_ids != b.data.sites.ids().map(str::to_string).collect::<Vec<_>>() {
                return Err(Error::Validation(format!(
                    "posterior at {} was fitted on different sites",
                    p.display()
                )));
            }
            Ok(s)
        })
        .collect()
}

pub fn simulate(eff: &Effective, rec: &mut Recorder) -> Result<()> {
    let cfg = &eff.config.simulate;
    let seed = eff.config.seed;
    let mut params = cfg.params;
    params.tau = eff.config.tau;
    let sites = layout_sites(&cfg.regions, cfg.origin, seed)?;
    let sim = simulate_panel(&sites, &params, &cfg.simulation, seed)?;
    write_panel(&eff.out, &sim.data)?;
    rec.add(eff.out.join("sites.csv"));
    rec.add(eff.out.join("panel.csv"));
    let truth = eff.out.join("truth.json");
    write_json(&truth, &Truth::from_simulation(&sim, seed))?;
    rec.add(truth);

    let cells = layout_grid(&cfg.regions, cfg.origin, cfg.cell_km, cfg.cells_per_county)?;
    let grid = eff.out.join("grid.csv");
    write_grid(&grid, &cells)?;
    rec.add(grid);

    let groups = &eff.config.age_rates.groups;
    if cfg.age_shares.len() != groups.len() || cfg.baseline_rates.len() != groups.len() {
        return Err(Error::Parameter(format!(
            "simulate: {} age groups configured but {} shares and {} baseline rates",
            groups.len(),
            cfg.age_shares.len(),
            cfg.baseline_rates.len()
        )));
    }
    let fips: BTreeSet<&str> = cells.iter().map(|c| c.county_fips.as_str()).collect();
    let share_cols: Vec<String> = (1..=groups.len()).map(|g| format!("share_g{g}")).collect();
    let shares: Vec<String> = cfg.age_shares.iter().map(|s| fmt_g9(*s)).collect();
    let rows = fips.iter().enumerate().map(|(k, f)| {
        let pop = 20_000 + mix64(seed ^ mix64(k as u64 + 1)) % 480_000;
        format!("{f},{pop},{}", shares.join(","))
    });
    let counties = eff.out.join("counties.csv");
    write_rows(&counties, &format!("fips,population,{}", share_cols.join(",")), rows)?;
    rec.add(counties);
    let rates = eff.out.join("baseline_rates.csv");
    write_rows(
        &rates,
        "age_group,r0",
        groups
            .iter()
            .zip(&cfg.baseline_rates)
            .map(|(g, r)| format!("{},{}", g.label, fmt_g9(*r))),
    )?;
    rec.add(rates);
    info!(
        "simulated {} sites over {} days, {} grid cells",
        sim.data.n_sites(),
        sim.data.n_days(),
        cells.len()
    );
    Ok(())
}

pub fn fit(eff: &Effective, rec: &mut Recorder) -> Result<()> {
    let data = load(eff)?;
    let blocks = blocks(eff, &data)?;
    let mut chain = eff.config.chain.clone();
    if chain.checkpoint.is_none() {
        chain.checkpoint = Some(eff.out.join("checkpoint.json"));
    }
    let fits = fit_blocks(&blocks, &chain);
    let mut first_err = None;
    let mut effect_rows = Vec::new();
    for ((_, block), fit) in blocks.iter().zip(fits) {
        let mut samples = match fit {
            Ok(s) => s,
            Err(e) => {
                warn!("region {} failed: {e}", block.region);
                if let Error::Chain {
                    checkpoint: Some(p), ..
                } = &e
                {
                    rec.add(p.clone());
                }
                first_err.get_or_insert(e);
                continue;
            }
        };
        // Keep the stored posterior independent of where it was written.
        samples.config.checkpoint = None;
        samples.config.latent_draws = None;
        let dir = region_dir(eff, &block.region);
        let out = |name: &str| dir.join(name);
        write_samples(&out("samples.csv"), &samples)?;
        rec.add(out("samples.csv"));
        let effect = causal_effect(&samples);
        write_effect(&out("effect.csv"), &effect)?;
        rec.add(out("effect.csv"));
        write_ess(&out("ess.csv"), &ess_table(&samples)?)?;
        rec.add(out("ess.csv"));
        write_latent_summary(&out("latent_summary.csv"), &samples)?;
        rec.add(out("latent_summary.csv"));
        write_json(&out("posterior.json"), &samples)?;
        rec.add(out("posterior.json"));
        let text = std::fs::read_to_string(out("effect.csv")).map_err(|e| Error::io(out("effect.csv").display().to_string(), e))?;
        effect_rows.extend(text.lines().skip(1).map(str::to_string));
    }
    let merged = eff.out.join("effect.csv");
    write_rows(&merged, "site_id,delta_mean,delta_sd,lo95,hi95", effect_rows)?;
    rec.add(merged);
    first_err.map_or(Ok(()), Err)
}

pub fn diagnose(eff: &Effective, rec: &mut Recorder) -> Result<()> {
    let data = load(eff)?;
    let blocks = blocks(eff, &data)?;
    let posts = load_posteriors(eff, &blocks)?;
    let cfg = &eff.config;
    let mut acf_all = Vec::new();
    for ((_, block), s) in blocks.iter().zip(&posts) {
        let dir = region_dir(eff, &block.region);
        write_ess(&dir.join("ess.csv"), &ess_table(s)?)?;
        rec.add(dir.join("ess.csv"));

        let acf = residual_acf(&block.data, cfg.acf_max_lag)?;
        let rows = acf_rows(&block.region, &acf);
        write_rows(&dir.join("acf.csv"), ACF_HEADER, &rows)?;
        rec.add(dir.join("acf.csv"));
        acf_all.extend(rows);

        let params = CovarianceParams {
            sigma1_sq: s.scalar_mean("sigma1_sq"),
            sigma2_sq: s.scalar_mean("sigma2_sq"),
            gamma: s.scalar_mean("gamma").clamp(-1.0, 1.0),
            phi1: s.phi1,
            sigma_sq: s.scalar_mean("sigma_sq"),
        };
        let fields: Vec<_> = ["alpha0", "beta0", "alpha1", "beta1"]
            .iter()
            .map(|n| s.site_summary(n).0)
            .collect();
        let resid = mean_model_residuals(&block.data, [&fields[0], &fields[1], &fields[2], &fields[3]]);
        let dist = distance_matrix(&block.data.sites);
        match variogram_gof(&resid, &block.data.c, &dist, &params, cfg.gof_bins) {
            Ok(groups) => {
                write_rows(&dir.join("variogram_gof.csv"), GOF_HEADER, gof_rows(&groups))?;
                rec.add(dir.join("variogram_gof.csv"));
            }
            Err(e) => warn!("region {}: variogram goodness of fit skipped ({e})", block.region),
        }
        let h_max = 3.0 * s.phi1;
        let grid: Vec<f64> = (0..=60).map(|k| h_max * k as f64 / 60.0).collect();
        write_covariance_curves(&dir.join("covariance_curves.csv"), &covariance_curves(&params, &grid)?)?;
        rec.add(dir.join("covariance_curves.csv"));

        let sel: Vec<String> = cfg
            .trace
            .iter()
            .filter(|t| match t.split_once('@') {
                Some((_, site)) => s.site_ids.iter().any(|id| id == site),
                None => true,
            })
            .cloned()
            .collect();
        write_trace(&dir.join("trace.csv"), s, &sel)?;
        rec.add(dir.join("trace.csv"));
    }
    write_rows(&eff.out.join("acf.csv"), ACF_HEADER, acf_all)?;
    rec.add(eff.out.join("acf.csv"));
    Ok(())
}

fn read_cells(eff: &Effective) -> Result<Vec<GridCell>> {
    read_grid(required(&eff.grid, "--grid")?)
}

fn predictions(eff: &Effective, data: &PanelDataset, blocks: &Blocks, cells: &[GridCell]) -> Result<Vec<RegionPrediction>> {
    let posts = load_posteriors(eff, blocks)?;
    let regions = cell_regions(cells, data)?;
    blocks
        .iter()
        .zip(&posts)
        .map(|((members, b), s)| predict_block(b, members, s, cells, &regions, eff.config.duplicate_policy))
        .collect()
}

pub fn predict(eff: &Effective, rec: &mut Recorder) -> Result<()> {
    let data = load(eff)?;
    let cells = read_cells(eff)?;
    let blocks = blocks(eff, &data)?;
    let preds = predictions(eff, &data, &blocks, &cells)?;
    let (mut surf, mut pct) = (Vec::new(), Vec::new());
    for p in &preds {
        let dir = region_dir(eff, &p.region);
        let s = surface_rows(&p.surface);
        let q = percent_rows(&p.surface);
        write_rows(&dir.join("surface.csv"), SURFACE_HEADER, &s)?;
        write_rows(&dir.join("percent.csv"), PERCENT_HEADER, &q)?;
        rec.add(dir.join("surface.csv"));
        rec.add(dir.join("percent.csv"));
        surf.extend(s);
        pct.extend(q);
    }
    write_rows(&eff.out.join("surface.csv"), SURFACE_HEADER, surf)?;
    write_rows(&eff.out.join("percent.csv"), PERCENT_HEADER, pct)?;
    rec.add(eff.out.join("surface.csv"));
    rec.add(eff.out.join("percent.csv"));
    Ok(())
}

pub fn burden(eff: &Effective, rec: &mut Recorder) -> Result<()> {
    let counties_path = required(&eff.counties, "--counties")?;
    let rates_path = required(&eff.rates, "--rates")?;
    let data = load(eff)?;
    let cells = read_cells(eff)?;
    let table = AgeRateTable::new(&eff.config.age_rates, &read_baseline_rates(rates_path)?)?;
    let mut counties = read_counties(counties_path, table.groups.len())?;
    let blocks = blocks(eff, &data)?;
    let preds = predictions(eff, &data, &blocks, &cells)?;
    let draws = assemble_cell_draws(&preds, cells.len())?;
    assign_cells(&mut counties, &cells);
    let b = burden_draws(&draws, &counties, &table)?;
    let path = eff.out.join("burden.csv");
    write_burden(&path, &burden_table(&b))?;
    rec.add(path);
    Ok(())
}

pub fn cv(eff: &Effective, rec: &mut Recorder) -> Result<()> {
    let data = load(eff)?;
    let blocks = blocks(eff, &data)?;
    let mut summary = serde_json::Map::new();
    for (_, b) in &blocks {
        let cfg = CvConfig {
            folds: eff.config.cv.folds,
            tau_grid: eff.config.cv.tau_grid.clone(),
            seed: eff.config.seed,
            chain: eff.config.cv.chain.clone(),
        };
        let table = tau_selection(&b.data, &cfg)?;
        let path = region_dir(eff, &b.region).join("cv.csv");
        write_cv(&path, &table)?;
        rec.add(path);
        summary.insert(
            b.region.clone(),
            serde_json::json!({ "recommended_tau": table.recommended_tau, "notes": table.notes }),
        );
    }
    let path = eff.out.join("cv_summary.json");
    write_json(&path, &summary)?;
    rec.add(path);
    Ok(())
}

pub fn blocking(eff: &Effective, rec: &mut Recorder) -> Result<()> {
    let pair = &eff.config.merge_regions;
    if pair.len() != 2 {
        return Err(Error::Validation(format!(
            "blocking needs exactly two regions in --merge-regions, got {}",
            pair.len()
        )));
    }
    let data = load(eff)?;
    let cells = read_cells(eff)?;
    let cmp = blocking_sensitivity(&data, &cells, &pair[0], &pair[1], &eff.config.chain, eff.config.duplicate_policy)?;
    let path = eff.out.join("blocking.csv");
    write_rows(
        &path,
        "cell_id,joint,separate,diff",
        cmp.rows.iter().map(|r| {
            format!(
                "{},{},{},{}",
                r.cell_id,
                fmt_g9(r.joint),
                fmt_g9(r.separate),
                fmt_g9(r.joint - r.separate)
            )
        }),
    )?;
    rec.add(path);
    let summary = eff.out.join("blocking_summary.json");
    write_json(
        &summary,
        &serde_json::json!({
            "regions": cmp.regions,
            "n_cells": cmp.rows.len(),
            "max_abs_diff": cmp.max_abs_diff,
            "correlation": cmp.correlation,
        }),
    )?;
    rec.add(summary);
    Ok(())
}

pub fn end_to_end(eff: &Effective, rec: &mut Recorder) -> Result<()> {
    // Check every input before the expensive fit.
    for (v, flag) in [
        (&eff.sites, "--sites"),
        (&eff.panel, "--panel"),
        (&eff.grid, "--grid"),
        (&eff.counties, "--counties"),
        (&eff.rates, "--rates"),
    ] {
        required(v, flag)?;
    }
    fit(eff, rec)?;
    diagnose(eff, rec)?;
    predict(eff, rec)?;
    burden(eff, rec)
}
