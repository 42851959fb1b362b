//! Delimited text inputs: gridded cell counts and township records.
//!
//! * cell counts: header `cell_x,cell_y,<taxon>...`, one row per cell,
//!   coordinates counted from the southwest corner of the extent before row
//!   masking (rows in masked rows are skipped);
//! * township trees: header `township_id,taxon`, one row per tree;
//! * township overlaps: header `township_id,cell_x,cell_y,area`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, InputCell, TownshipOverlap};
use log::{info, warn};
use crate::model::{CellCounts, TaxonRegistry, Township};

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(file))
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

fn records(path: &Path) -> Result<(Vec<String>, Vec<(u64, csv::StringRecord)>)> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        rows.push((line, rec));
    }
    Ok((header, rows))
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| parse_error(path, line, format!("column {name}: {raw:?}: {e}")))
}

/// Data index of an input cell; `None` for a masked row.
fn cell_index(path: &Path, line: u64, grid: &GridSpec, x: &str, y: &str) -> Result<Option<usize>> {
    let x: usize = field(path, line, "cell_x", x)?;
    let y: usize = field(path, line, "cell_y", y)?;
    match grid.locate_input(x, y) {
        InputCell::Data(c) => Ok(Some(c)),
        InputCell::Masked => Ok(None),
        InputCell::Outside => Err(parse_error(
            path,
            line,
            format!(
                "cell ({x}, {y}) outside the {}x{} grid",
                grid.nx,
                grid.masked_rows_south + grid.ny + grid.masked_rows_north
            ),
        )),
    }
}

/// Reads gridded counts. Taxon columns must be known to `taxa` when given;
/// otherwise the header defines the registry.
pub fn read_cell_counts(
    path: &Path,
    grid: &GridSpec,
    taxa: Option<&TaxonRegistry>,
) -> Result<(TaxonRegistry, CellCounts)> {
    let (header, rows) = records(path)?;
    if header.len() < 3 || header[0] != "cell_x" || header[1] != "cell_y" {
        return Err(parse_error(
            path,
            1,
            "header must be cell_x,cell_y followed by one column per taxon",
        ));
    }
    let columns = &header[2..];
    let registry = match taxa {
        Some(t) => {
            if let Some(unknown) = columns.iter().find(|c| t.index_of(c).is_none()) {
                return Err(parse_error(path, 1, format!("unknown taxon {unknown:?}")));
            }
            t.clone()
        }
        None => TaxonRegistry::new(columns.to_vec()).map_err(|e| parse_error(path, 1, e.to_string()))?,
    };
    let index: Vec<usize> = columns.iter().map(|c| registry.index_of(c).unwrap()).collect();
    if let Some(dup) = columns.iter().enumerate().find(|(i, c)| columns[..*i].contains(c)) {
        return Err(parse_error(path, 1, format!("duplicate taxon column {:?}", dup.1)));
    }
    let mut seen = BTreeMap::new();
    let mut cells = Vec::with_capacity(rows.len());
    let mut masked = 0;
    for (line, rec) in rows {
        let Some(cell) = cell_index(path, line, grid, &rec[0], &rec[1])? else {
            masked += 1;
            continue;
        };
        if let Some(first) = seen.insert(cell, line) {
            let (x, y) = grid.input_coords(cell);
            return Err(parse_error(
                path,
                line,
                format!("duplicate cell ({x}, {y}), first given on line {first}"),
            ));
        }
        let mut y = vec![0u32; registry.len()];
        for (j, raw) in rec.iter().skip(2).enumerate() {
            let v: i64 = field(path, line, &columns[j], raw)?;
            if v < 0 {
                return Err(Error::invalid(format!(
                    "{}:{line}: negative count {v} for taxon {}",
                    path.display(),
                    columns[j]
                )));
            }
            y[index[j]] = u32::try_from(v)
                .map_err(|_| parse_error(path, line, format!("count {v} too large")))?;
        }
        cells.push((cell, y));
    }
    if masked > 0 {
        info!("{}: skipped {masked} cells in masked rows", path.display());
    }
    let counts = CellCounts::new(cells, registry.len())?;
    Ok((registry, counts))
}

/// Reads and joins township trees and overlaps. Overlaps for townships
/// without trees are ignored.
pub fn read_townships(
    trees_path: &Path,
    overlaps_path: &Path,
    grid: &GridSpec,
    taxa: &TaxonRegistry,
) -> Result<Vec<Township>> {
    let (header, rows) = records(trees_path)?;
    if header != ["township_id", "taxon"] {
        return Err(parse_error(trees_path, 1, "header must be township_id,taxon"));
    }
    let mut trees: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (line, rec) in rows {
        let q = taxa
            .index_of(&rec[1])
            .ok_or_else(|| parse_error(trees_path, line, format!("unknown taxon {:?}", &rec[1])))?;
        if rec[0].is_empty() {
            return Err(parse_error(trees_path, line, "empty township id"));
        }
        trees.entry(rec[0].to_string()).or_default().push(q);
    }

    let (header, rows) = records(overlaps_path)?;
    if header != ["township_id", "cell_x", "cell_y", "area"] {
        return Err(parse_error(
            overlaps_path,
            1,
            "header must be township_id,cell_x,cell_y,area",
        ));
    }
    let mut raw: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for (line, rec) in rows {
        let cell = cell_index(overlaps_path, line, grid, &rec[1], &rec[2])?;
        let area: f64 = field(overlaps_path, line, "area", &rec[3])?;
        if !area.is_finite() || area < 0.0 {
            return Err(parse_error(overlaps_path, line, format!("invalid area {area}")));
        }
        let entries = raw.entry(rec[0].to_string()).or_default();
        // masked rows keep the township known but contribute no overlap
        if let Some(cell) = cell {
            entries.push((cell, area));
        }
    }

    let mut out = Vec::with_capacity(trees.len());
    for (id, t) in trees {
        let entries = raw.get(&id).ok_or_else(|| {
            Error::invalid(format!(
                "township {id:?} has trees in {} but no overlap entries in {}",
                trees_path.display(),
                overlaps_path.display()
            ))
        })?;
        if entries.is_empty() {
            warn!("township {id:?} lies entirely in masked rows; its {} trees are dropped", t.len());
            continue;
        }
        out.push(Township {
            overlap: TownshipOverlap::normalize(id, entries, grid.n_data_cells())?,
            trees: t,
        });
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_cell_counts(path: &Path, grid: &GridSpec, taxa: &TaxonRegistry, counts: &CellCounts) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(w, "cell_x,cell_y").map_err(io)?;
    for n in taxa.names() {
        write!(w, ",{n}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (cell, y) in &counts.cells {
        let (x, yy) = grid.input_coords(*cell);
        write!(w, "{x},{yy}").map_err(io)?;
        for v in y {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes township trees and overlap weights (as areas) in the reader's
/// formats.
pub fn write_townships(
    trees_path: &Path,
    overlaps_path: &Path,
    grid: &GridSpec,
    taxa: &TaxonRegistry,
    townships: &[Township],
) -> Result<()> {
    let mut w = create(trees_path)?;
    let io = |e| Error::io(trees_path, e);
    writeln!(w, "township_id,taxon").map_err(io)?;
    for t in townships {
        for &q in &t.trees {
            writeln!(w, "{},{}", t.id(), taxa.name(q)).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;

    let mut w = create(overlaps_path)?;
    let io = |e| Error::io(overlaps_path, e);
    writeln!(w, "township_id,cell_x,cell_y,area").map_err(io)?;
    for t in townships {
        for &(cell, weight) in &t.overlap.entries {
            let (x, y) = grid.input_coords(cell);
            writeln!(w, "{},{x},{y},{weight}", t.id()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn counts_examples() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(2, 2, 0).unwrap();
        let p = write(&dir, "a.csv", "cell_x,cell_y,oak,pine\n0,0,3,1\n");
        let (taxa, c) = read_cell_counts(&p, &g, None).unwrap();
        assert_eq!(taxa.names(), ["oak", "pine"]);
        assert_eq!(c.get(0).unwrap(), [3, 1]);
        assert_eq!(c.total_trees(), 4);

        let p = write(&dir, "b.csv", "cell_x,cell_y,oak,pine\n");
        assert!(read_cell_counts(&p, &g, None).unwrap().1.cells.is_empty());

        let p = write(&dir, "c.csv", "cell_x,cell_y,oak\n1,0,2\n1,0,3\n");
        let e = read_cell_counts(&p, &g, None).unwrap_err().to_string();
        assert!(e.contains("(1, 0)") && e.contains(":3:"), "{e}");

        let p = write(&dir, "d.csv", "cell_x,cell_y,oak\n0,0,x\n");
        assert!(matches!(read_cell_counts(&p, &g, None), Err(Error::Parse { line: 2, .. })));

        let p = write(&dir, "e.csv", "cell_x,cell_y,oak\n0,0,-1\n");
        assert!(matches!(read_cell_counts(&p, &g, None), Err(Error::InvalidArgument(_))));

        let p = write(&dir, "f.csv", "cell_x,cell_y,elm\n0,0,1\n");
        let known = TaxonRegistry::new(vec!["oak".into()]).unwrap();
        assert!(read_cell_counts(&p, &g, Some(&known)).is_err());
    }

    #[test]
    fn masked_rows_are_skipped_and_coordinates_shifted() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec { masked_rows_south: 1, masked_rows_north: 1, ..GridSpec::new(2, 2, 0).unwrap() };
        let p = write(&dir, "a.csv", "cell_x,cell_y,oak\n0,0,9\n1,1,2\n0,2,4\n1,3,7\n");
        let (taxa, c) = read_cell_counts(&p, &g, None).unwrap();
        assert_eq!(c.cells, vec![(1, vec![2]), (2, vec![4])]);
        let p = write(&dir, "b.csv", "cell_x,cell_y,oak\n0,4,1\n");
        assert!(read_cell_counts(&p, &g, None).is_err());

        let out = dir.path().join("round.csv");
        write_cell_counts(&out, &g, &taxa, &c).unwrap();
        assert_eq!(read_cell_counts(&out, &g, None).unwrap().1, c);

        let trees = write(&dir, "t.csv", "township_id,taxon\nA,oak\nB,oak\n");
        let ov = write(&dir, "o.csv", "township_id,cell_x,cell_y,area\nA,0,0,3\nA,0,1,1\nB,1,3,2\n");
        let ts = read_townships(&trees, &ov, &g, &taxa).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].overlap.entries, vec![(0, 1.0)]);
    }

    #[test]
    fn townships_examples() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(4, 4, 0).unwrap();
        let taxa = TaxonRegistry::new(vec!["oak".into(), "pine".into()]).unwrap();
        let trees = write(&dir, "t.csv", "township_id,taxon\nA,oak\nB,pine\nB,oak\n");
        let ov = write(
            &dir,
            "o.csv",
            "township_id,cell_x,cell_y,area\nA,1,1,5\nB,0,0,1\nB,1,0,1\nB,0,1,1\nB,1,1,1\n",
        );
        let ts = read_townships(&trees, &ov, &g, &taxa).unwrap();
        assert_eq!(ts[0].overlap.entries, vec![(5, 1.0)]);
        assert_eq!(ts[1].trees, vec![1, 0]);
        assert!(ts[1].overlap.entries.iter().all(|e| e.1 == 0.25));

        let orphan = write(&dir, "t2.csv", "township_id,taxon\nC,oak\n");
        assert!(matches!(read_townships(&orphan, &ov, &g, &taxa), Err(Error::InvalidArgument(_))));
        let zero = write(&dir, "o2.csv", "township_id,cell_x,cell_y,area\nA,0,0,0\n");
        let one = write(&dir, "t3.csv", "township_id,taxon\nA,oak\n");
        assert!(matches!(read_townships(&one, &zero, &g, &taxa), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(3, 2, 1).unwrap();
        let taxa = TaxonRegistry::numbered(3);
        let counts = CellCounts::new(vec![(0, vec![1, 2, 3]), (5, vec![0, 0, 7])], 3).unwrap();
        let p = dir.path().join("c.csv");
        write_cell_counts(&p, &g, &taxa, &counts).unwrap();
        assert_eq!(read_cell_counts(&p, &g, Some(&taxa)).unwrap().1, counts);

        let ts = vec![Township {
            overlap: TownshipOverlap::normalize("T1", &[(0, 1.0), (4, 3.0)], 6).unwrap(),
            trees: vec![2, 0],
        }];
        let (a, b) = (dir.path().join("t.csv"), dir.path().join("o.csv"));
        write_townships(&a, &b, &g, &taxa, &ts).unwrap();
        assert_eq!(read_townships(&a, &b, &g, &taxa).unwrap(), ts);
    }
}
