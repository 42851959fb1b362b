//! Lattice geometry: the modelled grid, its neighbourhood graphs and the
//! township-to-cell overlap weights.
//!
//! Cells are indexed row-major from the southwest corner. Two index spaces
//! exist: the *data* space covers the `nx × ny` observed grid, the *model*
//! space additionally includes a ring of `buffer` prediction-only cells on
//! every side. Everything stored in files uses data-space indices, except
//! that input tables count rows over the extent before row masking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular lattice with an optional buffer ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub buffer: usize,
    /// Edge length of one cell, metadata only.
    pub cell_size: f64,
    /// Coordinates of the southwest corner of the data grid, metadata only.
    pub origin_x: f64,
    pub origin_y: f64,
    /// Input rows dropped south of the data grid.
    #[serde(default)]
    pub masked_rows_south: usize,
    /// Input rows dropped north of the data grid.
    #[serde(default)]
    pub masked_rows_north: usize,
}

/// Where a cell of an input table lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputCell {
    Data(usize),
    /// Inside the input extent but in a masked row.
    Masked,
    Outside,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, buffer: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {nx}x{ny}"
            )));
        }
        Ok(GridSpec {
            nx,
            ny,
            buffer,
            cell_size: 8000.0,
            origin_x: 0.0,
            origin_y: 0.0,
            masked_rows_south: 0,
            masked_rows_north: 0,
        })
    }

    /// Number of columns including the buffer.
    pub fn width(&self) -> usize {
        self.nx + 2 * self.buffer
    }

    /// Number of rows including the buffer.
    pub fn height(&self) -> usize {
        self.ny + 2 * self.buffer
    }

    /// Total number of modelled cells `m`.
    pub fn n_cells(&self) -> usize {
        self.width() * self.height()
    }

    /// Number of cells in the data grid.
    pub fn n_data_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn model_index(&self, col: usize, row: usize) -> usize {
        row * self.width() + col
    }

    pub fn model_coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.width(), idx / self.width())
    }

    /// Data-space index of the cell at data coordinates `(x, y)`.
    pub fn data_index(&self, x: usize, y: usize) -> Option<usize> {
        (x < self.nx && y < self.ny).then(|| y * self.nx + x)
    }

    pub fn data_coords(&self, data_idx: usize) -> (usize, usize) {
        (data_idx % self.nx, data_idx / self.nx)
    }

    /// Locates input-table coordinates, whose rows include the masked ones.
    pub fn locate_input(&self, x: usize, y: usize) -> InputCell {
        let rows = self.masked_rows_south + self.ny + self.masked_rows_north;
        if x >= self.nx || y >= rows {
            return InputCell::Outside;
        }
        match y.checked_sub(self.masked_rows_south) {
            Some(row) if row < self.ny => InputCell::Data(row * self.nx + x),
            _ => InputCell::Masked,
        }
    }

    /// Input-table coordinates of a data cell.
    pub fn input_coords(&self, data_idx: usize) -> (usize, usize) {
        let (x, y) = self.data_coords(data_idx);
        (x, y + self.masked_rows_south)
    }

    /// Maps a data-space index into the model space.
    pub fn data_to_model(&self, data_idx: usize) -> usize {
        let (x, y) = self.data_coords(data_idx);
        self.model_index(x + self.buffer, y + self.buffer)
    }

    /// Inverse of [`GridSpec::data_to_model`]; `None` for buffer cells.
    pub fn model_to_data(&self, idx: usize) -> Option<usize> {
        let (col, row) = self.model_coords(idx);
        let x = col.checked_sub(self.buffer)?;
        let y = row.checked_sub(self.buffer)?;
        self.data_index(x, y)
    }

    /// Model indices of the data cells, in data-space order.
    pub fn data_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_data_cells()).map(|d| self.data_to_model(d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborOrder {
    /// Four cardinal neighbours.
    Cardinal,
    /// Cardinal, diagonal and second-order cardinal neighbours.
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeighborClass {
    Cardinal,
    Diagonal,
    SecondOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub cell: usize,
    pub class: NeighborClass,
}

/// Symmetric lattice neighbourhood over model-space cells.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub order: NeighborOrder,
    adjacency: Vec<Vec<Neighbor>>,
}

const CARDINAL: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const DIAGONAL: [(i64, i64); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];
const SECOND: [(i64, i64); 4] = [(2, 0), (-2, 0), (0, 2), (0, -2)];

impl NeighborGraph {
    pub fn build(grid: &GridSpec, order: NeighborOrder) -> Self {
        let (w, h) = (grid.width() as i64, grid.height() as i64);
        let mut offsets: Vec<((i64, i64), NeighborClass)> = CARDINAL
            .iter()
            .map(|&o| (o, NeighborClass::Cardinal))
            .collect();
        if order == NeighborOrder::Extended {
            offsets.extend(DIAGONAL.iter().map(|&o| (o, NeighborClass::Diagonal)));
            offsets.extend(SECOND.iter().map(|&o| (o, NeighborClass::SecondOrder)));
        }
        let adjacency = (0..grid.n_cells())
            .map(|idx| {
                let (c, r) = grid.model_coords(idx);
                let mut nb: Vec<Neighbor> = offsets
                    .iter()
                    .filter_map(|&((dx, dy), class)| {
                        let (nc, nr) = (c as i64 + dx, r as i64 + dy);
                        (nc >= 0 && nc < w && nr >= 0 && nr < h).then(|| Neighbor {
                            cell: grid.model_index(nc as usize, nr as usize),
                            class,
                        })
                    })
                    .collect();
                nb.sort_by_key(|n| n.cell);
                nb
            })
            .collect();
        NeighborGraph { order, adjacency }
    }

    pub fn n_cells(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, cell: usize) -> &[Neighbor] {
        &self.adjacency[cell]
    }

    pub fn degree(&self, cell: usize, class: NeighborClass) -> usize {
        self.adjacency[cell]
            .iter()
            .filter(|n| n.class == class)
            .count()
    }

    /// Whether the cardinal graph is connected (always true for a full lattice,
    /// kept as a check for callers handed arbitrary graphs).
    pub fn is_connected(&self) -> bool {
        let n = self.n_cells();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for nb in &self.adjacency[i] {
                if nb.class == NeighborClass::Cardinal && !seen[nb.cell] {
                    seen[nb.cell] = true;
                    count += 1;
                    stack.push(nb.cell);
                }
            }
        }
        count == n
    }
}

/// Fill-reducing elimination order for a lattice matrix whose stencil reaches
/// `reach` cells in each direction: geometric nested dissection with
/// separators `reach` cells thick.
pub fn nested_dissection_order(grid: &GridSpec, reach: usize) -> Vec<usize> {
    let reach = reach.max(1);
    let mut order = Vec::with_capacity(grid.n_cells());
    dissect(grid, reach, 0, grid.width(), 0, grid.height(), &mut order);
    order
}

fn dissect(
    grid: &GridSpec,
    reach: usize,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    out: &mut Vec<usize>,
) {
    let (w, h) = (x1 - x0, y1 - y0);
    if w == 0 || h == 0 {
        return;
    }
    if w * h <= 16 || (w <= 2 * reach && h <= 2 * reach) {
        for r in y0..y1 {
            for c in x0..x1 {
                out.push(grid.model_index(c, r));
            }
        }
        return;
    }
    if w >= h && w > reach {
        let mid = x0 + (w - reach) / 2;
        dissect(grid, reach, x0, mid, y0, y1, out);
        dissect(grid, reach, mid + reach, x1, y0, y1, out);
        dissect_leaf(grid, mid, mid + reach, y0, y1, out);
    } else {
        let mid = y0 + (h - reach) / 2;
        dissect(grid, reach, x0, x1, y0, mid, out);
        dissect(grid, reach, x0, x1, mid + reach, y1, out);
        dissect_leaf(grid, x0, x1, mid, mid + reach, out);
    }
}

fn dissect_leaf(grid: &GridSpec, x0: usize, x1: usize, y0: usize, y1: usize, out: &mut Vec<usize>) {
    for r in y0..y1 {
        for c in x0..x1 {
            out.push(grid.model_index(c, r));
        }
    }
}

/// Normalised overlap weights between one township and the data-grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TownshipOverlap {
    pub township_id: String,
    /// `(data-space cell index, weight)`, weights summing to one.
    pub entries: Vec<(usize, f64)>,
}

impl TownshipOverlap {
    /// Normalises raw `(cell, area)` pairs into overlap weights, dropping
    /// zero-area entries and merging repeated cells.
    pub fn normalize(
        township_id: impl Into<String>,
        raw: &[(usize, f64)],
        n_data_cells: usize,
    ) -> Result<Self> {
        let township_id = township_id.into();
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for &(cell, area) in raw {
            if cell >= n_data_cells {
                return Err(Error::invalid(format!(
                    "township {township_id}: cell {cell} outside the grid ({n_data_cells} cells)"
                )));
            }
            if !area.is_finite() || area < 0.0 {
                return Err(Error::invalid(format!(
                    "township {township_id}: invalid overlap area {area} for cell {cell}"
                )));
            }
            if area == 0.0 {
                continue;
            }
            match merged.iter_mut().find(|(c, _)| *c == cell) {
                Some(e) => e.1 += area,
                None => merged.push((cell, area)),
            }
        }
        let total: f64 = merged.iter().map(|e| e.1).sum();
        if merged.is_empty() || total <= 0.0 {
            return Err(Error::invalid(format!(
                "township {township_id}: total overlap area is zero"
            )));
        }
        merged.sort_by_key(|e| e.0);
        for e in &mut merged {
            e.1 /= total;
        }
        Ok(TownshipOverlap {
            township_id,
            entries: merged,
        })
    }

    pub fn weight(&self, cell: usize) -> f64 {
        self.entries
            .iter()
            .find(|e| e.0 == cell)
            .map_or(0.0, |e| e.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(GridSpec::new(1, 1, 0).unwrap().n_cells(), 1);
        assert_eq!(GridSpec::new(2, 2, 0).unwrap().n_cells(), 4);
        assert_eq!(GridSpec::new(146, 180, 6).unwrap().n_cells(), 30336);
        assert!(GridSpec::new(0, 3, 0).is_err());
        assert!(GridSpec::new(3, 0, 1).is_err());
    }

    #[test]
    fn masked_rows_shift_input_coordinates() {
        let g = GridSpec { masked_rows_south: 2, masked_rows_north: 1, ..GridSpec::new(3, 4, 0).unwrap() };
        assert_eq!(g.locate_input(0, 1), InputCell::Masked);
        assert_eq!(g.locate_input(1, 2), InputCell::Data(1));
        assert_eq!(g.locate_input(2, 5), InputCell::Data(11));
        assert_eq!(g.locate_input(0, 6), InputCell::Masked);
        assert_eq!(g.locate_input(0, 7), InputCell::Outside);
        assert_eq!(g.locate_input(3, 3), InputCell::Outside);
        for d in 0..g.n_data_cells() {
            let (x, y) = g.input_coords(d);
            assert_eq!(g.locate_input(x, y), InputCell::Data(d));
        }
    }

    #[test]
    fn single_cell_has_no_neighbors() {
        let g = GridSpec::new(1, 1, 0).unwrap();
        let ng = NeighborGraph::build(&g, NeighborOrder::Extended);
        assert!(ng.neighbors(0).is_empty());
    }

    #[test]
    fn two_by_two_cardinal() {
        let g = GridSpec::new(2, 2, 0).unwrap();
        let ng = NeighborGraph::build(&g, NeighborOrder::Cardinal);
        for i in 0..4 {
            assert_eq!(ng.degree(i, NeighborClass::Cardinal), 2);
        }
    }

    #[test]
    fn stencil_clipping() {
        let g = GridSpec::new(3, 3, 0).unwrap();
        let card = NeighborGraph::build(&g, NeighborOrder::Cardinal);
        assert_eq!(card.neighbors(4).len(), 4);
        let ext = NeighborGraph::build(&g, NeighborOrder::Extended);
        assert_eq!(ext.degree(4, NeighborClass::Cardinal), 4);
        assert_eq!(ext.degree(4, NeighborClass::Diagonal), 4);
        assert_eq!(ext.degree(4, NeighborClass::SecondOrder), 0);

        let g5 = GridSpec::new(5, 5, 0).unwrap();
        let ext5 = NeighborGraph::build(&g5, NeighborOrder::Extended);
        let centre = g5.model_index(2, 2);
        for class in [
            NeighborClass::Cardinal,
            NeighborClass::Diagonal,
            NeighborClass::SecondOrder,
        ] {
            assert_eq!(ext5.degree(centre, class), 4);
        }
    }

    #[test]
    fn corner_and_edge_degrees() {
        let g = GridSpec::new(4, 3, 0).unwrap();
        let ng = NeighborGraph::build(&g, NeighborOrder::Cardinal);
        assert_eq!(ng.degree(g.model_index(0, 0), NeighborClass::Cardinal), 2);
        assert_eq!(ng.degree(g.model_index(1, 0), NeighborClass::Cardinal), 3);
        assert_eq!(ng.degree(g.model_index(1, 1), NeighborClass::Cardinal), 4);
        assert!(ng.is_connected());
    }

    #[test]
    fn data_model_index_mapping() {
        let g = GridSpec::new(3, 2, 2).unwrap();
        assert_eq!(g.width(), 7);
        let m = g.data_to_model(g.data_index(1, 1).unwrap());
        assert_eq!(g.model_coords(m), (3, 3));
        assert_eq!(g.model_to_data(m), g.data_index(1, 1));
        assert_eq!(g.model_to_data(0), None);
        assert_eq!(g.data_cells().count(), 6);
    }

    #[test]
    fn township_normalization() {
        let t = TownshipOverlap::normalize("a", &[(7, 2.0), (8, 2.0)], 16).unwrap();
        assert_eq!(t.entries, vec![(7, 0.5), (8, 0.5)]);
        let t = TownshipOverlap::normalize("b", &[(3, 1.0)], 16).unwrap();
        assert_eq!(t.entries, vec![(3, 1.0)]);
        let t = TownshipOverlap::normalize("c", &[(1, 1.0), (2, 3.0), (5, 0.0)], 16).unwrap();
        assert_eq!(t.entries, vec![(1, 0.25), (2, 0.75)]);
        assert!(TownshipOverlap::normalize("d", &[(1, 0.0)], 16).is_err());
        assert!(TownshipOverlap::normalize("e", &[(16, 1.0)], 16).is_err());
        assert!(TownshipOverlap::normalize("f", &[], 16).is_err());
    }

    #[test]
    fn nested_dissection_is_permutation() {
        for (nx, ny, b, reach) in [(1, 1, 0, 1), (7, 3, 1, 2), (20, 20, 0, 1), (13, 9, 6, 2)] {
            let g = GridSpec::new(nx, ny, b).unwrap();
            let mut ord = nested_dissection_order(&g, reach);
            ord.sort_unstable();
            assert_eq!(ord, (0..g.n_cells()).collect::<Vec<_>>());
        }
    }

    proptest! {
        #[test]
        fn graph_symmetric_and_handshake(nx in 1usize..8, ny in 1usize..8, b in 0usize..3, ext in any::<bool>()) {
            let g = GridSpec::new(nx, ny, b).unwrap();
            let order = if ext { NeighborOrder::Extended } else { NeighborOrder::Cardinal };
            let ng = NeighborGraph::build(&g, order);
            let mut card_deg = 0;
            for i in 0..g.n_cells() {
                for nb in ng.neighbors(i) {
                    let back = ng.neighbors(nb.cell).iter().find(|x| x.cell == i);
                    prop_assert_eq!(back.map(|x| x.class), Some(nb.class));
                }
                for class in [NeighborClass::Cardinal, NeighborClass::Diagonal, NeighborClass::SecondOrder] {
                    prop_assert!(ng.degree(i, class) <= 4);
                }
                card_deg += ng.degree(i, NeighborClass::Cardinal);
            }
            let (w, h) = (g.width(), g.height());
            let n_edges = h * (w - 1) + w * (h - 1);
            prop_assert_eq!(card_deg, 2 * n_edges);
        }

        #[test]
        fn buffered_interior_matches_unbuffered(nx in 1usize..7, ny in 1usize..7, b in 1usize..3) {
            let plain = GridSpec::new(nx, ny, 0).unwrap();
            let buffered = GridSpec::new(nx, ny, b).unwrap();
            let gp = NeighborGraph::build(&plain, NeighborOrder::Extended);
            let gb = NeighborGraph::build(&buffered, NeighborOrder::Extended);
            for d in 0..plain.n_data_cells() {
                let mut expect: Vec<(usize, NeighborClass)> = gp.neighbors(plain.data_to_model(d))
                    .iter().map(|n| (plain.model_to_data(n.cell).unwrap(), n.class)).collect();
                let mut got: Vec<(usize, NeighborClass)> = gb.neighbors(buffered.data_to_model(d))
                    .iter().filter_map(|n| buffered.model_to_data(n.cell).map(|c| (c, n.class))).collect();
                expect.sort_by_key(|e| e.0);
                got.sort_by_key(|e| e.0);
                prop_assert_eq!(expect, got);
            }
        }
    }
}
