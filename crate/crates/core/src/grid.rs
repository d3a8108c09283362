//! Structured rectilinear cell-centered grids with interior-facet topology.
//!
//! Only interior facets are stored: with homogeneous Neumann boundary
//! conditions, boundary facets carry no flux and are omitted entirely.

use crate::error::Error;

/// Coordinate axis of a facet normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// An interior facet between two cells.
///
/// The unit normal points from `cell_plus` to `cell_minus`, and the jump
/// convention is `[v] = v_plus - v_minus`.
#[derive(Debug, Clone, Copy)]
pub struct InteriorFacet {
    pub cell_plus: usize,
    pub cell_minus: usize,
    /// Facet area in m^2.
    pub area: f64,
    /// Distance between the adjacent cell centers in m.
    pub center_distance: f64,
    pub axis: Axis,
}

/// Uniform rectilinear cell-centered grid.
#[derive(Debug, Clone)]
pub struct StructuredGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    pub cell_volume: f64,
    facets: Vec<InteriorFacet>,
}

impl StructuredGrid {
    pub fn num_cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn facets(&self) -> &[InteriorFacet] {
        &self.facets
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        (
            self.lx / self.nx as f64,
            self.ly / self.ny as f64,
            self.lz / self.nz as f64,
        )
    }

    /// Linear index of cell (i, j, k); i is fastest.
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        (k * self.ny + j) * self.nx + i
    }

    /// Cell center coordinates in m.
    pub fn cell_center(&self, idx: usize) -> (f64, f64, f64) {
        let (hx, hy, hz) = self.spacing();
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        (
            (i as f64 + 0.5) * hx,
            (j as f64 + 0.5) * hy,
            (k as f64 + 0.5) * hz,
        )
    }
}

/// Builds a uniform grid.
///
/// Facet ordering is deterministic: x-axis facets first, then y, then z,
/// each in lexicographic (k, j, i) order. Assembly relies on this for
/// bit-reproducible sums.
pub fn build_grid(
    nx: usize,
    ny: usize,
    nz: usize,
    lx: f64,
    ly: f64,
    lz: f64,
) -> Result<StructuredGrid, Error> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::InvalidArgument(
            "grid cell counts must be at least 1".into(),
        ));
    }
    if !(lx > 0.0 && ly > 0.0 && lz > 0.0) {
        return Err(Error::InvalidArgument(
            "grid extents must be positive".into(),
        ));
    }
    let hx = lx / nx as f64;
    let hy = ly / ny as f64;
    let hz = lz / nz as f64;
    let mut grid = StructuredGrid {
        nx,
        ny,
        nz,
        lx,
        ly,
        lz,
        cell_volume: hx * hy * hz,
        facets: Vec::new(),
    };

    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx - 1 {
                grid.facets.push(InteriorFacet {
                    cell_plus: grid.cell_index(i, j, k),
                    cell_minus: grid.cell_index(i + 1, j, k),
                    area: hy * hz,
                    center_distance: hx,
                    axis: Axis::X,
                });
            }
        }
    }
    for k in 0..nz {
        for j in 0..ny - 1 {
            for i in 0..nx {
                grid.facets.push(InteriorFacet {
                    cell_plus: grid.cell_index(i, j, k),
                    cell_minus: grid.cell_index(i, j + 1, k),
                    area: hx * hz,
                    center_distance: hy,
                    axis: Axis::Y,
                });
            }
        }
    }
    for k in 0..nz - 1 {
        for j in 0..ny {
            for i in 0..nx {
                // cell_plus is the lower cell; the normal points upward.
                grid.facets.push(InteriorFacet {
                    cell_plus: grid.cell_index(i, j, k),
                    cell_minus: grid.cell_index(i, j, k + 1),
                    area: hx * hy,
                    center_distance: hz,
                    axis: Axis::Z,
                });
            }
        }
    }
    Ok(grid)
}

/// Harmonic average `2ab/(a+b)`, with the convention that it is 0 when
/// either argument is 0 (an impermeable side blocks the flux).
pub fn harmonic_average(a: f64, b: f64) -> Result<f64, Error> {
    if a < 0.0 || b < 0.0 {
        return Err(Error::InvalidArgument(
            "harmonic average requires nonnegative arguments".into(),
        ));
    }
    Ok(harmonic_average_unchecked(a, b))
}

/// Same as [`harmonic_average`] without the sign check, for assembly loops
/// over fields already validated at model construction.
#[inline]
pub fn harmonic_average_unchecked(a: f64, b: f64) -> f64 {
    let s = a + b;
    if s == 0.0 {
        0.0
    } else {
        2.0 * a * b / s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cells_single_facet() {
        let g = build_grid(2, 1, 1, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(g.facets().len(), 1);
        let f = g.facets()[0];
        assert_eq!(f.area, 1.0);
        assert_eq!(f.center_distance, 1.0);
        assert_eq!((f.cell_plus, f.cell_minus), (0, 1));
    }

    #[test]
    fn facet_count_formula() {
        // §4.1.1-style 20x20 mesh on 50x50 m.
        let g = build_grid(20, 20, 1, 50.0, 50.0, 1.0).unwrap();
        assert_eq!(g.facets().len(), 2 * 19 * 20);

        let g = build_grid(4, 3, 5, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(g.facets().len(), 3 * 3 * 5 + 4 * 2 * 5 + 4 * 3 * 4);
    }

    #[test]
    fn single_cell_no_facets() {
        let g = build_grid(1, 1, 1, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(g.facets().len(), 0);
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(build_grid(0, 1, 1, 1.0, 1.0, 1.0).is_err());
        assert!(build_grid(1, 1, 1, -1.0, 1.0, 1.0).is_err());
        assert!(build_grid(1, 1, 1, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn facets_reference_distinct_valid_cells() {
        let g = build_grid(5, 4, 3, 2.0, 3.0, 4.0).unwrap();
        for f in g.facets() {
            assert!(f.cell_plus < g.num_cells());
            assert!(f.cell_minus < g.num_cells());
            assert_ne!(f.cell_plus, f.cell_minus);
            assert!(f.area > 0.0);
            assert!(f.center_distance > 0.0);
        }
    }

    #[test]
    fn harmonic_average_values() {
        assert_eq!(harmonic_average(2.0, 2.0).unwrap(), 2.0);
        assert_eq!(harmonic_average(1.0, 3.0).unwrap(), 1.5);
        assert_eq!(harmonic_average(0.0, 5.0).unwrap(), 0.0);
        assert!(harmonic_average(-1.0, 5.0).is_err());
    }

    #[test]
    fn harmonic_average_bounds_and_symmetry() {
        let pairs = [(0.5, 3.0), (1e-12, 1.0), (7.0, 7.0), (2.0, 9.0)];
        for &(a, b) in &pairs {
            let h = harmonic_average(a, b).unwrap();
            assert!(h >= a.min(b) && h <= a.max(b));
            assert_eq!(h, harmonic_average(b, a).unwrap());
        }
    }

    #[test]
    fn axis_permutation_isomorphic() {
        let a = build_grid(3, 4, 5, 1.0, 2.0, 3.0).unwrap();
        let b = build_grid(5, 3, 4, 3.0, 1.0, 2.0).unwrap();
        let key = |g: &StructuredGrid| {
            let mut v: Vec<(u64, u64)> = g
                .facets()
                .iter()
                .map(|f| (f.area.to_bits(), f.center_distance.to_bits()))
                .collect();
            v.sort();
            v
        };
        assert_eq!(key(&a), key(&b));
    }
}
