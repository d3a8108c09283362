//! Sparse approximation of the temperature-space Schur complement.
//!
//! The operator acts on a temperature increment: per-cell thermal
//! accumulation, upwinded advection driven by the current pressure field,
//! harmonic-average conduction, heater diagonals, and production-well
//! diagonals. Coefficients are evaluated at the current Newton iterate.

use crate::discretization::{ReservoirModel, SourceKind, State};
use crate::error::{Error, Result};
use crate::grid::{harmonic_average_unchecked, Axis};
use crate::props::rel_perm;
use crate::sparse::csr::CsrMatrix;

pub fn assemble_schur_approx(model: &ReservoirModel, state: &State) -> Result<CsrMatrix> {
    let n = model.grid.num_cells();
    if state.num_cells() != n {
        return Err(Error::DimensionMismatch(
            "state size must match the grid".into(),
        ));
    }
    let props = &model.props;
    let (c_vw, c_vo) = (props.c_v_water, props.c_v_oil);
    let v_dt = model.grid.cell_volume / model.dt;

    struct Cell {
        rho_w: f64,
        rho_o: f64,
        mu_w: f64,
        mu_o: f64,
        k_rw: f64,
        k_ro: f64,
        k_t: f64,
    }
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        let s = state.s_o[i].clamp(0.0, 1.0);
        let (k_ro, k_rw, _) = rel_perm(state.s_o[i]);
        let wrap = |e: Error| Error::Assembly {
            cell: i,
            detail: e.to_string(),
        };
        cells.push(Cell {
            rho_w: props.water_density(state.p[i], state.t[i]).map_err(wrap)?.value,
            rho_o: props.oil_density(state.p[i], state.t[i]).map_err(wrap)?.value,
            mu_w: props.water_viscosity(state.t[i]).map_err(wrap)?.value,
            mu_o: props.oil_viscosity(state.t[i]).map_err(wrap)?.value,
            k_rw,
            k_ro,
            k_t: props.thermal_conductivity(model.phi[i], s).map_err(wrap)?,
        });
    }

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();

    // thermal accumulation
    for i in 0..n {
        let c = &cells[i];
        let s = state.s_o[i];
        let phi = model.phi[i];
        let acc = v_dt
            * (phi * (c_vo * s * c.rho_o + c_vw * (1.0 - s) * c.rho_w)
                + (1.0 - phi) * props.rho_rock * props.c_v_rock);
        triplets.push((i, i, acc));
    }

    // upwinded advection and conduction
    for facet in model.grid.facets() {
        let (ip, im) = (facet.cell_plus, facet.cell_minus);
        let perm = match facet.axis {
            Axis::X => &model.perm_x,
            Axis::Y => &model.perm_y,
            Axis::Z => &model.perm_z,
        };
        let k_harm = harmonic_average_unchecked(perm[ip], perm[im]);
        let ka = k_harm * facet.area;
        let g_n = match facet.axis {
            Axis::Z => model.gravity,
            _ => 0.0,
        };
        let dp_d = (state.p[ip] - state.p[im]) / facet.center_distance;
        let (cp, cm) = (&cells[ip], &cells[im]);

        let phase = |c_v: f64,
                         rho: (f64, f64),
                         mu: (f64, f64),
                         k_r: (f64, f64),
                         tri: &mut Vec<(usize, usize, f64)>| {
            let theta = dp_d - 0.5 * (rho.0 + rho.1) * g_n;
            let (up, rho_u, mu_u, kr_u) = if theta >= 0.0 {
                (ip, rho.0, mu.0, k_r.0)
            } else {
                (im, rho.1, mu.1, k_r.1)
            };
            let coef = ka * c_v * kr_u * rho_u / mu_u * theta;
            if coef != 0.0 {
                tri.push((ip, up, coef));
                tri.push((im, up, -coef));
            }
        };
        phase(
            c_vw,
            (cp.rho_w, cm.rho_w),
            (cp.mu_w, cm.mu_w),
            (cp.k_rw, cm.k_rw),
            &mut triplets,
        );
        phase(
            c_vo,
            (cp.rho_o, cm.rho_o),
            (cp.mu_o, cm.mu_o),
            (cp.k_ro, cm.k_ro),
            &mut triplets,
        );

        let h = harmonic_average_unchecked(cp.k_t, cm.k_t) * facet.area / facet.center_distance;
        triplets.push((ip, ip, h));
        triplets.push((ip, im, -h));
        triplets.push((im, im, h));
        triplets.push((im, ip, -h));
    }

    // heater and production diagonals (injection excluded)
    for src in &model.sources {
        for &(i, w) in &src.cells {
            let c = &cells[i];
            match src.kind {
                SourceKind::Heater { u, .. } => triplets.push((i, i, u * w)),
                SourceKind::ProducerConstRate { rate } => {
                    let lam_w = c.k_rw / c.mu_w;
                    let lam_o = c.k_ro / c.mu_o;
                    let lam_t = lam_w + lam_o;
                    if lam_t > 0.0 {
                        let q_mass = rate / lam_t
                            * (c_vw * lam_w * c.rho_w + c_vo * lam_o * c.rho_o);
                        triplets.push((i, i, q_mass * w));
                    }
                }
                SourceKind::ProducerBhp { p_bhp, well_index } => {
                    let drawdown = (state.p[i] - p_bhp).max(0.0);
                    let q = well_index
                        * drawdown
                        * (c_vw * c.k_rw / c.mu_w * c.rho_w + c_vo * c.k_ro / c.mu_o * c.rho_o);
                    triplets.push((i, i, q * w));
                }
                SourceKind::InjectorConstRate { .. } => {}
            }
        }
    }

    CsrMatrix::from_triplets(n, n, &triplets)
}
