//! Region-level orchestration: blocking, per-region fits, prediction to grid
//! cells and the joint-versus-separate blocking comparison.

use std::collections::BTreeSet;

use log::info;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition_regions, PanelDataset, RegionBlock};
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, ChainConfig, PosteriorSamples};
use crate::inference::{effect_surface_draws, krige_posterior, DuplicatePolicy, KrigedSurface};
use crate::io::GridCell;

/// Label of a block formed by merging regions.
pub fn merged_label(members: &[String]) -> String {
    members.join("+")
}

/// Blocks by region label, with the regions in `merge` (if any) fitted as
/// one block. Blocks keep the parent's site order.
pub fn region_blocks(data: &PanelDataset, merge: &[String]) -> Result<Vec<(Vec<String>, RegionBlock)>> {
    let blocks = partition_regions(data)?;
    let labels: BTreeSet<&str> = blocks.iter().map(|b| b.region.as_str()).collect();
    let unique: BTreeSet<&str> = merge.iter().map(String::as_str).collect();
    if unique.len() != merge.len() {
        return Err(Error::Validation(format!("region listed twice in merge list {}", merge.join(","))));
    }
    for m in merge {
        if !labels.contains(m.as_str()) {
            return Err(Error::Validation(format!("merge region `{m}` not present in the sites")));
        }
    }
    let mut out = Vec::new();
    if merge.len() >= 2 {
        let mut idx: Vec<usize> = blocks
            .iter()
            .filter(|b| unique.contains(b.region.as_str()))
            .flat_map(|b| b.site_indices.iter().copied())
            .collect();
        idx.sort_unstable();
        let mut members: Vec<String> = merge.to_vec();
        members.sort();
        out.push((
            members.clone(),
            RegionBlock {
                region: merged_label(&members),
                data: data.subset(&idx)?,
                site_indices: idx,
            },
        ));
    }
    for b in blocks {
        if merge.len() >= 2 && unique.contains(b.region.as_str()) {
            continue;
        }
        out.push((vec![b.region.clone()], b));
    }
    out.sort_by(|a, b| a.1.region.cmp(&b.1.region));
    Ok(out)
}

/// Region of every grid cell. Cells without a label take the region of
/// the nearest site.
pub fn cell_regions(cells: &[GridCell], data: &PanelDataset) -> Result<Vec<String>> {
    let xy = data.sites.coords_km();
    cells
        .iter()
        .map(|c| match &c.region {
            Some(r) => Ok(r.clone()),
            None => {
                let p = data.sites.project(c.lon, c.lat);
                let nearest = xy
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let da = (a.1 .0 - p.0).powi(2) + (a.1 .1 - p.1).powi(2);
                        let db = (b.1 .0 - p.0).powi(2) + (b.1 .1 - p.1).powi(2);
                        da.total_cmp(&db)
                    })
                    .map(|(i, _)| i)
                    .ok_or_else(|| Error::InsufficientData("no sites".into()))?;
                data.sites.get(nearest)
                    .region
                    .clone()
                    .ok_or_else(|| Error::Validation(format!("cell {} has no region and its nearest site has none", c.cell_id)))
            }
        })
        .collect()
}

/// Fit every block; blocks run in parallel.
pub fn fit_blocks(blocks: &[(Vec<String>, RegionBlock)], cfg: &ChainConfig) -> Vec<Result<PosteriorSamples>> {
    blocks
        .par_iter()
        .map(|(_, b)| {
            info!("fitting region {} ({} sites)", b.region, b.data.n_sites());
            let mut c = cfg.clone();
            if let Some(p) = &cfg.checkpoint {
                c.checkpoint = Some(p.with_file_name(format!("checkpoint_{}.json", b.region)));
            }
            run_chain(&b.data, &c)
        })
        .collect()
}

/// Kriged surfaces and per-draw effect surfaces of one fitted block.
#[derive(Clone, Debug)]
pub struct RegionPrediction {
    pub region: String,
    /// Indices into the full cell list.
    pub cell_indices: Vec<usize>,
    pub surface: KrigedSurface,
    /// Effect at the block's cells, one vector per kept draw.
    pub effect_draws: Vec<DVector<f64>>,
}

/// Predict a fitted block at its grid cells.
pub fn predict_block(
    block: &RegionBlock,
    members: &[String],
    samples: &PosteriorSamples,
    cells: &[GridCell],
    regions_of_cells: &[String],
    policy: DuplicatePolicy,
) -> Result<RegionPrediction> {
    let cell_indices: Vec<usize> = (0..cells.len())
        .filter(|&k| members.iter().any(|m| *m == regions_of_cells[k]))
        .collect();
    let sources = block.data.sites.coords_km();
    let targets: Vec<(f64, f64)> = cell_indices
        .iter()
        .map(|&k| block.data.sites.project(cells[k].lon, cells[k].lat))
        .collect();
    let ids = cell_indices.iter().map(|&k| cells[k].cell_id.clone()).collect();
    let surface = krige_posterior(samples, &sources, ids, &targets, policy)?;
    let kernel = surface.field("delta").expect("effect field is always Kriged").kernel;
    let effect_draws = effect_surface_draws(samples, &sources, &targets, kernel, policy)?;
    Ok(RegionPrediction {
        region: block.region.clone(),
        cell_indices,
        surface,
        effect_draws,
    })
}

/// Per-cell effect draws over all cells (`[draw][cell]`). Cells not covered
/// by any prediction are zero. Blocks must share a draw count.
pub fn assemble_cell_draws(preds: &[RegionPrediction], n_cells: usize) -> Result<Vec<Vec<f64>>> {
    let n_draws = preds.first().map_or(0, |p| p.effect_draws.len());
    if preds.iter().any(|p| p.effect_draws.len() != n_draws) {
        return Err(Error::Validation("regions differ in their number of kept draws".into()));
    }
    let mut out = vec![vec![0.0; n_cells]; n_draws];
    for p in preds {
        for (d, draw) in p.effect_draws.iter().enumerate() {
            for (a, &k) in p.cell_indices.iter().enumerate() {
                out[d][k] = draw[a];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockingRow {
    pub cell_id: String,
    pub joint: f64,
    pub separate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockingComparison {
    pub regions: [String; 2],
    pub rows: Vec<BlockingRow>,
    pub max_abs_diff: f64,
    /// Pearson correlation of the two effect surfaces.
    pub correlation: f64,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Fit regions `a` and `b` jointly and separately and compare the Kriged
/// effect surfaces over the cells of both regions.
pub fn blocking_sensitivity(
    data: &PanelDataset,
    cells: &[GridCell],
    a: &str,
    b: &str,
    cfg: &ChainConfig,
    policy: DuplicatePolicy,
) -> Result<BlockingComparison> {
    if a == b {
        return Err(Error::Validation(format!("blocking comparison needs two distinct regions, got `{a}` twice")));
    }
    let pair = vec![a.to_string(), b.to_string()];
    let joint_blocks: Vec<_> = region_blocks(data, &pair)?
        .into_iter()
        .filter(|(m, _)| m.len() == 2)
        .collect();
    let separate_blocks: Vec<_> = region_blocks(data, &[])?
        .into_iter()
        .filter(|(m, _)| pair.contains(&m[0]))
        .collect();
    let regions_of_cells = cell_regions(cells, data)?;

    let mut all = joint_blocks;
    all.extend(separate_blocks);
    let fits = fit_blocks(&all, cfg);
    let mut preds = Vec::with_capacity(all.len());
    for ((members, block), fit) in all.iter().zip(fits) {
        preds.push(predict_block(block, members, &fit?, cells, &regions_of_cells, policy)?);
    }
    let joint = &preds[0];
    let mut separate = vec![f64::NAN; cells.len()];
    for p in &preds[1..] {
        let mean = &p.surface.field("delta").expect("effect field").mean;
        for (a, &k) in p.cell_indices.iter().enumerate() {
            separate[k] = mean[a];
        }
    }
    let jm = &joint.surface.field("delta").expect("effect field").mean;
    let rows: Vec<BlockingRow> = joint
        .cell_indices
        .iter()
        .enumerate()
        .map(|(a, &k)| BlockingRow {
            cell_id: cells[k].cell_id.clone(),
            joint: jm[a],
            separate: separate[k],
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Validation(format!("no grid cells in regions {a} and {b}")));
    }
    let j: Vec<f64> = rows.iter().map(|r| r.joint).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.separate).collect();
    let max_abs_diff = j.iter().zip(&s).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(BlockingComparison {
        regions: [a.to_string(), b.to_string()],
        correlation: pearson(&j, &s),
        max_abs_diff,
        rows,
    })
}
