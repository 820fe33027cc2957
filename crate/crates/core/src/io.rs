//! CSV readers and writers for the on-disk formats.
//!
//! Floats are written with 9 significant digits through [`fmt_g9`] so that
//! artifacts are byte-stable across reruns.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::SiteRecord;

/// Format like C's `%.9g`.
pub fn fmt_g9(x: f64) -> String {
    fmt_sig(x, 9)
}

pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "NA".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mant, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let mant = trim_zeros(mant);
        format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn check_header(rdr: &mut csv::Reader<File>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::Load {
            path: path.display().to_string(),
            message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn load_err(path: &Path, line: usize, message: impl std::fmt::Display) -> Error {
    Error::Load {
        path: path.display().to_string(),
        message: format!("row {line}: {message}"),
    }
}

fn parse_f64(path: &Path, line: usize, column: &str, raw: &str) -> Result<f64> {
    raw.parse::<f64>()
        .map_err(|_| load_err(path, line, format!("column {column}: cannot parse `{raw}` as a number")))
}

/// Read `sites.csv`: `site_id,lon,lat,region`.
pub fn read_sites(path: &Path) -> Result<Vec<SiteRecord>> {
    let mut rdr = open_csv(path)?;
    check_header(&mut rdr, path, &["site_id", "lon", "lat", "region"])?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec.len() != 4 {
            return Err(load_err(path, line, format!("expected 4 fields, found {}", rec.len())));
        }
        let lon = parse_f64(path, line, "lon", &rec[1])?;
        let lat = parse_f64(path, line, "lat", &rec[2])?;
        if !lon.is_finite() || !lat.is_finite() {
            return Err(load_err(path, line, "non-finite coordinates"));
        }
        let region = match rec[3].trim() {
            "" | "NA" => None,
            r => Some(r.to_string()),
        };
        out.push(SiteRecord {
            id: rec[0].to_string(),
            lon,
            lat,
            region,
        });
    }
    if out.is_empty() {
        return Err(load_err(path, 1, "no sites"));
    }
    Ok(out)
}

/// One row of `panel.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelRow {
    pub line: usize,
    pub site_id: String,
    pub day: usize,
    pub y: Option<f64>,
    pub theta_hat: f64,
    pub delta_hat: f64,
}

/// Read `panel.csv`: `site_id,day,y,theta_hat,delta_hat`, with `y` possibly `NA`.
pub fn read_panel_rows(path: &Path) -> Result<Vec<PanelRow>> {
    let mut rdr = open_csv(path)?;
    check_header(&mut rdr, path, &["site_id", "day", "y", "theta_hat", "delta_hat"])?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec.len() != 5 {
            return Err(load_err(path, line, format!("expected 5 fields, found {}", rec.len())));
        }
        let day: usize = rec[1]
            .parse()
            .map_err(|_| load_err(path, line, format!("day `{}` is not a positive integer", &rec[1])))?;
        if day < 1 {
            return Err(load_err(path, line, "day must be >= 1"));
        }
        let y = match &rec[2] {
            "NA" | "" => None,
            raw => {
                let v = parse_f64(path, line, "y", raw)?;
                if !v.is_finite() {
                    return Err(load_err(path, line, "non-finite y (use NA for missing)"));
                }
                Some(v)
            }
        };
        let theta_hat = parse_f64(path, line, "theta_hat", &rec[3])?;
        let delta_hat = parse_f64(path, line, "delta_hat", &rec[4])?;
        if !theta_hat.is_finite() {
            return Err(load_err(path, line, "non-finite theta_hat"));
        }
        if !delta_hat.is_finite() {
            return Err(load_err(path, line, "non-finite delta_hat"));
        }
        out.push(PanelRow {
            line,
            site_id: rec[0].to_string(),
            day,
            y,
            theta_hat,
            delta_hat,
        });
    }
    Ok(out)
}

/// A prediction target from `grid.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub cell_id: String,
    pub lon: f64,
    pub lat: f64,
    pub region: Option<String>,
    pub county_fips: String,
}

/// Read `grid.csv`: `cell_id,lon,lat,region,county_fips`.
pub fn read_grid(path: &Path) -> Result<Vec<GridCell>> {
    let mut rdr = open_csv(path)?;
    check_header(&mut rdr, path, &["cell_id", "lon", "lat", "region", "county_fips"])?;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec.len() != 5 {
            return Err(load_err(path, line, format!("expected 5 fields, found {}", rec.len())));
        }
        if !seen.insert(rec[0].to_string()) {
            return Err(load_err(path, line, format!("duplicate key cell_id {}", &rec[0])));
        }
        let lon = parse_f64(path, line, "lon", &rec[1])?;
        let lat = parse_f64(path, line, "lat", &rec[2])?;
        if !lon.is_finite() || !lat.is_finite() {
            return Err(load_err(path, line, "non-finite coordinates"));
        }
        out.push(GridCell {
            cell_id: rec[0].to_string(),
            lon,
            lat,
            region: match rec[3].trim() {
                "" | "NA" => None,
                r => Some(r.to_string()),
            },
            county_fips: rec[4].to_string(),
        });
    }
    Ok(out)
}

pub fn write_sites(path: &Path, sites: &[SiteRecord]) -> Result<()> {
    let mut w = create(path)?;
    let p = path.display().to_string();
    let res: std::io::Result<()> = (|| {
        writeln!(w, "site_id,lon,lat,region")?;
        for s in sites {
            writeln!(
                w,
                "{},{},{},{}",
                s.id,
                fmt_g9(s.lon),
                fmt_g9(s.lat),
                s.region.as_deref().unwrap_or("")
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(p, e))
}

pub fn write_grid(path: &Path, cells: &[GridCell]) -> Result<()> {
    let mut w = create(path)?;
    let p = path.display().to_string();
    let res: std::io::Result<()> = (|| {
        writeln!(w, "cell_id,lon,lat,region,county_fips")?;
        for c in cells {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.cell_id,
                fmt_g9(c.lon),
                fmt_g9(c.lat),
                c.region.as_deref().unwrap_or(""),
                c.county_fips
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(p, e))
}

/// Write a table of already-formatted rows under `header`.
pub fn write_rows<I, R>(path: &Path, header: &str, rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<str>,
{
    let mut w = create(path)?;
    let p = path.display().to_string();
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{header}")?;
        for r in rows {
            writeln!(w, "{}", r.as_ref())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(p, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
