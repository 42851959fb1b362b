//! Posterior summaries as long-format CSV and per-taxon ESRI ASCII rasters.
//!
//! Raster orientation: the header's `xllcorner`/`yllcorner` give the
//! southwest corner of the data grid. Rows are written north first, as the
//! format requires, so data cell `(x, y)` is value `x` of file row
//! `ny − 1 − y`; the southwest cell is the first value of the last row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimator::{CellTaxonSummary, PosteriorSummary};
use crate::grid::GridSpec;
use crate::model::TaxonRegistry;

/// Which statistic of a [`PosteriorSummary`] a raster shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryField {
    Mean,
    Sd,
    Q025,
    Q975,
}

impl SummaryField {
    pub const ALL: [SummaryField; 4] = [Self::Mean, Self::Sd, Self::Q025, Self::Q975];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Sd => "sd",
            Self::Q025 => "q025",
            Self::Q975 => "q975",
        }
    }

    pub fn get(self, s: &CellTaxonSummary) -> f64 {
        match self {
            Self::Mean => s.mean,
            Self::Sd => s.sd,
            Self::Q025 => s.q025,
            Self::Q975 => s.q975,
        }
    }
}

pub const NODATA: f64 = -9999.0;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Columns `x,y,taxon,mean,sd,q025,q975`, one row per cell and taxon.
pub fn write_summary_csv(summary: &PosteriorSummary, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "x,y,taxon,mean,sd,q025,q975").map_err(io)?;
    let p = summary.taxa.len();
    for cell in 0..summary.grid.n_data_cells() {
        let (x, y) = summary.grid.data_coords(cell);
        for q in 0..p {
            let s = summary.get(cell, q);
            writeln!(
                w,
                "{x},{y},{},{},{},{},{}",
                summary.taxa.name(q),
                s.mean,
                s.sd,
                s.q025,
                s.q975
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_summary_csv(path: &Path, grid: &GridSpec, taxa: &TaxonRegistry) -> Result<PosteriorSummary> {
    let parse = |line: u64, m: String| Error::Parse {
        path: path.into(),
        line,
        message: m,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| parse(0, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["x", "y", "taxon", "mean", "sd", "q025", "q975"] {
        return Err(parse(1, "unexpected header".into()));
    }
    let p = taxa.len();
    let mut stats: Vec<Option<CellTaxonSummary>> = vec![None; grid.n_data_cells() * p];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|e| parse(line, format!("column {}: {e}", header[i])))
        };
        let x: usize = rec[0].parse().map_err(|e| parse(line, format!("x: {e}")))?;
        let y: usize = rec[1].parse().map_err(|e| parse(line, format!("y: {e}")))?;
        let cell = grid
            .data_index(x, y)
            .ok_or_else(|| parse(line, format!("cell ({x}, {y}) outside the grid")))?;
        let q = taxa
            .index_of(&rec[2])
            .ok_or_else(|| parse(line, format!("unknown taxon {:?}", &rec[2])))?;
        let slot = &mut stats[cell * p + q];
        if slot.is_some() {
            return Err(parse(line, "duplicate row".into()));
        }
        *slot = Some(CellTaxonSummary {
            mean: num(3)?,
            sd: num(4)?,
            q025: num(5)?,
            q975: num(6)?,
        });
    }
    let stats = stats
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::invalid(format!("{}: summary is missing rows", path.display())))?;
    Ok(PosteriorSummary {
        grid: grid.clone(),
        taxa: taxa.clone(),
        stats,
    })
}

/// Writes one taxon's field as an ESRI ASCII grid.
pub fn write_raster(summary: &PosteriorSummary, taxon: usize, field: SummaryField, path: &Path) -> Result<()> {
    let g = &summary.grid;
    let values: Vec<f64> = (0..g.n_data_cells())
        .map(|c| field.get(summary.get(c, taxon)))
        .collect();
    write_raster_values(g, &values, path)
}

/// Writes data-space values (southwest-origin, row-major) as an ESRI ASCII
/// grid. Non-finite values become `NODATA_value`.
pub fn write_raster_values(g: &GridSpec, values: &[f64], path: &Path) -> Result<()> {
    if values.len() != g.n_data_cells() {
        return Err(Error::invalid("raster values do not match the grid"));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "ncols {}\nnrows {}\nxllcorner {}\nyllcorner {}\ncellsize {}\nNODATA_value {}",
        g.nx, g.ny, g.origin_x, g.origin_y, g.cell_size, NODATA
    )
    .map_err(io)?;
    for row in (0..g.ny).rev() {
        let line: Vec<String> = (0..g.nx)
            .map(|x| {
                let v = values[row * g.nx + x];
                if v.is_finite() { v.to_string() } else { NODATA.to_string() }
            })
            .collect();
        writeln!(w, "{}", line.join(" ")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads an ESRI ASCII grid back into data-space order.
pub fn read_raster(path: &Path) -> Result<(GridSpec, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, m: String| Error::Parse {
        path: path.into(),
        line: line as u64 + 1,
        message: m,
    };
    if lines.len() < 6 {
        return Err(parse(lines.len(), "missing header lines".into()));
    }
    let mut head = [0.0; 6];
    for (i, key) in ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value"]
        .iter()
        .enumerate()
    {
        let mut it = lines[i].split_whitespace();
        if !it.next().is_some_and(|k| k.eq_ignore_ascii_case(key)) {
            return Err(parse(i, format!("expected {key}")));
        }
        head[i] = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse(i, format!("bad value for {key}")))?;
    }
    let (nx, ny) = (head[0] as usize, head[1] as usize);
    let mut grid = GridSpec::new(nx, ny, 0)?;
    grid.origin_x = head[2];
    grid.origin_y = head[3];
    grid.cell_size = head[4];
    let nodata = head[5];
    if lines.len() != 6 + ny {
        return Err(parse(lines.len(), format!("expected {ny} data rows")));
    }
    let mut values = vec![0.0; nx * ny];
    for (r, line) in lines[6..].iter().enumerate() {
        let row = ny - 1 - r;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse(6 + r, e.to_string()))?;
        if vals.len() != nx {
            return Err(parse(6 + r, format!("expected {nx} values, found {}", vals.len())));
        }
        for (x, v) in vals.into_iter().enumerate() {
            values[row * nx + x] = if v == nodata { f64::NAN } else { v };
        }
    }
    Ok((grid, values))
}
