//! Residual and analytic Jacobian assembly for the fully implicit scheme.
//!
//! The upwind side of every facet is frozen during differentiation: the
//! true derivative is discontinuous across an upwind switch, and treating
//! the direction as constant is the standard linearization.

use crate::discretization::{BlockSystem, ReservoirModel, ResidualVector, State, SourceKind};
use crate::error::{Error, Result};
use crate::grid::{harmonic_average_unchecked, Axis, InteriorFacet};
use crate::props::{rel_perm, PropEval, PropertyConfig};
use crate::sparse::csr::CsrMatrix;

/// Everything the facet and source terms need about one cell's fluids.
#[derive(Debug, Clone, Copy)]
struct CellProps {
    rho_w: PropEval,
    rho_o: PropEval,
    mu_w: PropEval,
    mu_o: PropEval,
    k_rw: f64,
    k_ro: f64,
    dkrw_ds: f64,
    dkro_ds: f64,
    k_t: f64,
    dkt_ds: f64,
}

fn eval_cell(props: &PropertyConfig, phi: f64, p: f64, t: f64, s_o: f64) -> Result<CellProps> {
    let s = s_o.clamp(0.0, 1.0);
    let (k_ro, k_rw, clamped) = rel_perm(s_o);
    let (dkro_ds, dkrw_ds) = if clamped { (0.0, 0.0) } else { (1.0, -1.0) };
    let c = CellProps {
        rho_w: props.water_density(p, t)?,
        rho_o: props.oil_density(p, t)?,
        mu_w: props.water_viscosity(t)?,
        mu_o: props.oil_viscosity(t)?,
        k_rw,
        k_ro,
        dkrw_ds,
        dkro_ds,
        k_t: props.thermal_conductivity(phi, s)?,
        dkt_ds: if clamped {
            0.0
        } else {
            props.thermal_conductivity_ds(phi)
        },
    };
    Ok(c)
}

fn check_finite(cell: usize, c: &CellProps) -> Result<()> {
    let vals = [
        c.rho_w.value,
        c.rho_o.value,
        c.mu_w.value,
        c.mu_o.value,
        c.k_t,
    ];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Assembly {
            cell,
            detail: "non-finite property evaluation".into(),
        });
    }
    Ok(())
}

/// Gravity component of the driving force for a facet. The z-facet normal
/// points from the lower cell (plus) to the upper cell (minus); hydrostatic
/// equilibrium `[p] = {rho} g d` must zero the driving force, so the
/// component is `+g` on z-facets and 0 elsewhere.
fn facet_gravity(gravity: f64, axis: Axis) -> f64 {
    match axis {
        Axis::Z => gravity,
        _ => 0.0,
    }
}

/// Side selected by the sign of the driving force; ties take plus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpwindSide {
    Plus,
    Minus,
}

/// Upwind rule: plus iff `[p]/d - {rho} g_n >= 0`.
pub fn upwind_side(
    facet: &InteriorFacet,
    p: &[f64],
    rho_avg: f64,
    gravity: f64,
) -> UpwindSide {
    let g_n = facet_gravity(gravity, facet.axis);
    let theta = (p[facet.cell_plus] - p[facet.cell_minus]) / facet.center_distance - rho_avg * g_n;
    if theta >= 0.0 {
        UpwindSide::Plus
    } else {
        UpwindSide::Minus
    }
}

/// One phase's contribution at one facet, with the partials needed for the
/// frozen-upwind Jacobian.
struct PhaseFacetFlux {
    /// Mass flux out of the plus cell (kg/s).
    flux: f64,
    /// Advected energy flux out of the plus cell (J/s).
    eflux: f64,
    /// d(flux)/d{p,T,S} at (plus, minus).
    d_plus: [f64; 3],
    d_minus: [f64; 3],
    /// d(eflux)/d{p,T,S} at (plus, minus).
    de_plus: [f64; 3],
    de_minus: [f64; 3],
}

#[allow(clippy::too_many_arguments)]
fn phase_facet_flux(
    facet: &InteriorFacet,
    k_harm: f64,
    c_v: f64,
    g_n: f64,
    state: &State,
    rho: (&PropEval, &PropEval),
    mu: (&PropEval, &PropEval),
    k_r: (f64, f64),
    dkr_ds: (f64, f64),
) -> PhaseFacetFlux {
    let (ip, im) = (facet.cell_plus, facet.cell_minus);
    let d = facet.center_distance;
    let ka = k_harm * facet.area;
    let rho_bar = 0.5 * (rho.0.value + rho.1.value);
    let theta = (state.p[ip] - state.p[im]) / d - rho_bar * g_n;

    let (up_is_plus, rho_u, mu_u, kr_u, dkr_u, t_u) = if theta >= 0.0 {
        (true, rho.0, mu.0, k_r.0, dkr_ds.0, state.t[ip])
    } else {
        (false, rho.1, mu.1, k_r.1, dkr_ds.1, state.t[im])
    };
    let mob = rho_u.value * kr_u / mu_u.value;
    let hmob = c_v * mob; // advected energy mobility, times T^up below
    let flux = ka * mob * theta;
    let eflux = ka * hmob * t_u * theta;

    // driving-force partials
    let dth_dp_plus = 1.0 / d - 0.5 * rho.0.d_dp * g_n;
    let dth_dp_minus = -1.0 / d - 0.5 * rho.1.d_dp * g_n;
    let dth_dt_plus = -0.5 * rho.0.d_dt * g_n;
    let dth_dt_minus = -0.5 * rho.1.d_dt * g_n;

    // mobility partials at the upwind cell
    let dmob_dp = rho_u.d_dp * kr_u / mu_u.value;
    let dmob_dt = kr_u * (rho_u.d_dt * mu_u.value - rho_u.value * mu_u.d_dt)
        / (mu_u.value * mu_u.value);
    let dmob_ds = dkr_u * rho_u.value / mu_u.value;

    let sel = |plus_side: bool| if plus_side == up_is_plus { 1.0 } else { 0.0 };

    let d_side = |plus_side: bool| {
        let (dth_dp, dth_dt) = if plus_side {
            (dth_dp_plus, dth_dt_plus)
        } else {
            (dth_dp_minus, dth_dt_minus)
        };
        let s = sel(plus_side);
        [
            ka * (s * dmob_dp * theta + mob * dth_dp),
            ka * (s * dmob_dt * theta + mob * dth_dt),
            ka * s * dmob_ds * theta,
        ]
    };
    let de_side = |plus_side: bool| {
        let (dth_dp, dth_dt) = if plus_side {
            (dth_dp_plus, dth_dt_plus)
        } else {
            (dth_dp_minus, dth_dt_minus)
        };
        let s = sel(plus_side);
        [
            ka * c_v * (s * dmob_dp * t_u * theta + mob * t_u * dth_dp),
            ka * c_v * (s * (dmob_dt * t_u + mob) * theta + mob * t_u * dth_dt),
            ka * c_v * s * dmob_ds * t_u * theta,
        ]
    };

    PhaseFacetFlux {
        flux,
        eflux,
        d_plus: d_side(true),
        d_minus: d_side(false),
        de_plus: de_side(true),
        de_minus: de_side(false),
    }
}

/// Raw per-equation Jacobian triplets: `(cell_row, 3*cell_col + unknown,
/// value)` with unknown offsets p=0, T=1, S=2.
type RawTriplets = Vec<(usize, usize, f64)>;

struct RawAssembly {
    residual: ResidualVector,
    jac: Option<(RawTriplets, RawTriplets, RawTriplets)>,
}

fn assemble_raw(
    model: &ReservoirModel,
    state: &State,
    prev: &State,
    want_jacobian: bool,
) -> Result<RawAssembly> {
    let n = model.grid.num_cells();
    if state.num_cells() != n || prev.num_cells() != n {
        return Err(Error::DimensionMismatch(
            "state size must match the grid".into(),
        ));
    }
    let props = &model.props;
    let (c_vw, c_vo) = (props.c_v_water, props.c_v_oil);
    let v_dt = model.grid.cell_volume / model.dt;

    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        let c = eval_cell(props, model.phi[i], state.p[i], state.t[i], state.s_o[i])
            .map_err(|e| Error::Assembly {
                cell: i,
                detail: e.to_string(),
            })?;
        check_finite(i, &c)?;
        cells.push(c);
    }

    let mut f_w = vec![0.0; n];
    let mut f_e = vec![0.0; n];
    let mut f_o = vec![0.0; n];
    let mut jw: RawTriplets = Vec::new();
    let mut je: RawTriplets = Vec::new();
    let mut jo: RawTriplets = Vec::new();

    // accumulation: ((.)^{n+1} - (.)^n) V / dt
    for i in 0..n {
        let phi = model.phi[i];
        let c = &cells[i];
        let (s, t) = (state.s_o[i], state.t[i]);
        let sw = 1.0 - s;

        let prev_c = eval_cell(props, phi, prev.p[i], prev.t[i], prev.s_o[i])
            .map_err(|e| Error::Assembly {
                cell: i,
                detail: e.to_string(),
            })?;
        let (ps, pt) = (prev.s_o[i], prev.t[i]);

        f_w[i] += phi * v_dt * (c.rho_w.value * sw - prev_c.rho_w.value * (1.0 - ps));
        f_o[i] += phi * v_dt * (c.rho_o.value * s - prev_c.rho_o.value * ps);
        let rock = (1.0 - phi) * props.rho_rock * props.c_v_rock;
        // identical expression shape for both time levels so that an
        // unchanged state cancels exactly
        let energy = |rw: f64, ro: f64, s: f64, t: f64| {
            (phi * (c_vw * rw * (1.0 - s) + c_vo * ro * s) + rock) * t
        };
        f_e[i] += v_dt
            * (energy(c.rho_w.value, c.rho_o.value, s, t)
                - energy(prev_c.rho_w.value, prev_c.rho_o.value, ps, pt));

        if want_jacobian {
            let col = 3 * i;
            jw.push((i, col, phi * v_dt * sw * c.rho_w.d_dp));
            jw.push((i, col + 1, phi * v_dt * sw * c.rho_w.d_dt));
            jw.push((i, col + 2, -phi * v_dt * c.rho_w.value));

            jo.push((i, col, phi * v_dt * s * c.rho_o.d_dp));
            jo.push((i, col + 1, phi * v_dt * s * c.rho_o.d_dt));
            jo.push((i, col + 2, phi * v_dt * c.rho_o.value));

            je.push((
                i,
                col,
                phi * v_dt * t * (c_vw * sw * c.rho_w.d_dp + c_vo * s * c.rho_o.d_dp),
            ));
            je.push((
                i,
                col + 1,
                v_dt
                    * (phi
                        * (c_vw * sw * (c.rho_w.value + t * c.rho_w.d_dt)
                            + c_vo * s * (c.rho_o.value + t * c.rho_o.d_dt))
                        + rock),
            ));
            je.push((
                i,
                col + 2,
                phi * v_dt * t * (c_vo * c.rho_o.value - c_vw * c.rho_w.value),
            ));
        }
    }

    // facet fluxes
    for facet in model.grid.facets() {
        let (ip, im) = (facet.cell_plus, facet.cell_minus);
        let perm = match facet.axis {
            Axis::X => &model.perm_x,
            Axis::Y => &model.perm_y,
            Axis::Z => &model.perm_z,
        };
        let k_harm = harmonic_average_unchecked(perm[ip], perm[im]);
        let g_n = facet_gravity(model.gravity, facet.axis);
        let (cp, cm) = (&cells[ip], &cells[im]);

        let water = phase_facet_flux(
            facet,
            k_harm,
            c_vw,
            g_n,
            state,
            (&cp.rho_w, &cm.rho_w),
            (&cp.mu_w, &cm.mu_w),
            (cp.k_rw, cm.k_rw),
            (cp.dkrw_ds, cm.dkrw_ds),
        );
        let oil = phase_facet_flux(
            facet,
            k_harm,
            c_vo,
            g_n,
            state,
            (&cp.rho_o, &cm.rho_o),
            (&cp.mu_o, &cm.mu_o),
            (cp.k_ro, cm.k_ro),
            (cp.dkro_ds, cm.dkro_ds),
        );

        f_w[ip] += water.flux;
        f_w[im] -= water.flux;
        f_o[ip] += oil.flux;
        f_o[im] -= oil.flux;
        f_e[ip] += water.eflux + oil.eflux;
        f_e[im] -= water.eflux + oil.eflux;

        // conduction: {{k_T}} A [T]/d
        let kt_harm = harmonic_average_unchecked(cp.k_t, cm.k_t);
        let ad = facet.area / facet.center_distance;
        let cond = kt_harm * ad * (state.t[ip] - state.t[im]);
        f_e[ip] += cond;
        f_e[im] -= cond;

        if want_jacobian {
            let push_pm = |tri: &mut RawTriplets, cell_col: usize, d: &[f64; 3]| {
                for (u, &v) in d.iter().enumerate() {
                    if v != 0.0 {
                        tri.push((ip, 3 * cell_col + u, v));
                        tri.push((im, 3 * cell_col + u, -v));
                    }
                }
            };
            push_pm(&mut jw, ip, &water.d_plus);
            push_pm(&mut jw, im, &water.d_minus);
            push_pm(&mut jo, ip, &oil.d_plus);
            push_pm(&mut jo, im, &oil.d_minus);
            let e_plus: [f64; 3] = std::array::from_fn(|u| water.de_plus[u] + oil.de_plus[u]);
            let e_minus: [f64; 3] = std::array::from_fn(|u| water.de_minus[u] + oil.de_minus[u]);
            push_pm(&mut je, ip, &e_plus);
            push_pm(&mut je, im, &e_minus);

            // conduction partials
            let denom = (cp.k_t + cm.k_t) * (cp.k_t + cm.k_t);
            let (dh_dkp, dh_dkm) = if denom == 0.0 {
                (0.0, 0.0)
            } else {
                (
                    2.0 * cm.k_t * cm.k_t / denom,
                    2.0 * cp.k_t * cp.k_t / denom,
                )
            };
            let dtj = ad * (state.t[ip] - state.t[im]);
            let cond_d = [
                (ip, 1, kt_harm * ad),
                (im, 1, -kt_harm * ad),
                (ip, 2, dh_dkp * cp.dkt_ds * dtj),
                (im, 2, dh_dkm * cm.dkt_ds * dtj),
            ];
            for &(cell, u, v) in &cond_d {
                if v != 0.0 {
                    je.push((ip, 3 * cell + u, v));
                    je.push((im, 3 * cell + u, -v));
                }
            }
        }
    }

    // sources: residual convention is F = accumulation + flux - f
    for src in &model.sources {
        for &(i, w) in &src.cells {
            let c = &cells[i];
            let (p_i, t_i) = (state.p[i], state.t[i]);
            match src.kind {
                SourceKind::InjectorConstRate { rate, t_inj } => {
                    let rho = props.water_density(p_i, t_inj).map_err(|e| Error::Assembly {
                        cell: i,
                        detail: e.to_string(),
                    })?;
                    f_w[i] -= rate * rho.value * w;
                    f_e[i] -= rate * rho.value * c_vw * t_inj * w;
                    if want_jacobian {
                        jw.push((i, 3 * i, -rate * rho.d_dp * w));
                        je.push((i, 3 * i, -rate * rho.d_dp * c_vw * t_inj * w));
                    }
                }
                SourceKind::ProducerConstRate { rate } => {
                    let lam_w = c.k_rw / c.mu_w.value;
                    let lam_o = c.k_ro / c.mu_o.value;
                    let lam_t = lam_w + lam_o;
                    if lam_t <= 0.0 {
                        return Err(Error::Assembly {
                            cell: i,
                            detail: "producer cell has zero total mobility".into(),
                        });
                    }
                    let frac_w = lam_w / lam_t;
                    let frac_o = lam_o / lam_t;
                    f_w[i] += rate * frac_w * c.rho_w.value * w;
                    f_o[i] += rate * frac_o * c.rho_o.value * w;
                    f_e[i] += rate
                        * (c_vw * frac_w * c.rho_w.value + c_vo * frac_o * c.rho_o.value)
                        * t_i
                        * w;
                    if want_jacobian {
                        let dlw_dt = -c.k_rw * c.mu_w.d_dt / (c.mu_w.value * c.mu_w.value);
                        let dlo_dt = -c.k_ro * c.mu_o.d_dt / (c.mu_o.value * c.mu_o.value);
                        let dlw_ds = c.dkrw_ds / c.mu_w.value;
                        let dlo_ds = c.dkro_ds / c.mu_o.value;
                        let dfw = |dlw: f64, dlo: f64| (dlw * lam_o - lam_w * dlo) / (lam_t * lam_t);
                        let dfw_dt = dfw(dlw_dt, dlo_dt);
                        let dfw_ds = dfw(dlw_ds, dlo_ds);
                        // frac_o = 1 - frac_w
                        let col = 3 * i;
                        jw.push((i, col, rate * frac_w * c.rho_w.d_dp * w));
                        jw.push((
                            i,
                            col + 1,
                            rate * (dfw_dt * c.rho_w.value + frac_w * c.rho_w.d_dt) * w,
                        ));
                        jw.push((i, col + 2, rate * dfw_ds * c.rho_w.value * w));

                        jo.push((i, col, rate * frac_o * c.rho_o.d_dp * w));
                        jo.push((
                            i,
                            col + 1,
                            rate * (-dfw_dt * c.rho_o.value + frac_o * c.rho_o.d_dt) * w,
                        ));
                        jo.push((i, col + 2, rate * -dfw_ds * c.rho_o.value * w));

                        let mix = c_vw * frac_w * c.rho_w.value + c_vo * frac_o * c.rho_o.value;
                        let dmix_dp = c_vw * frac_w * c.rho_w.d_dp + c_vo * frac_o * c.rho_o.d_dp;
                        let dmix_dt = c_vw * (dfw_dt * c.rho_w.value + frac_w * c.rho_w.d_dt)
                            + c_vo * (-dfw_dt * c.rho_o.value + frac_o * c.rho_o.d_dt);
                        let dmix_ds =
                            c_vw * dfw_ds * c.rho_w.value - c_vo * dfw_ds * c.rho_o.value;
                        je.push((i, col, rate * dmix_dp * t_i * w));
                        je.push((i, col + 1, rate * (dmix_dt * t_i + mix) * w));
                        je.push((i, col + 2, rate * dmix_ds * t_i * w));
                    }
                }
                SourceKind::ProducerBhp { p_bhp, well_index } => {
                    let drawdown = (p_i - p_bhp).max(0.0);
                    let ddraw = if p_i > p_bhp { 1.0 } else { 0.0 };
                    let lam_w = c.k_rw / c.mu_w.value;
                    let lam_o = c.k_ro / c.mu_o.value;
                    let qw = well_index * lam_w * drawdown;
                    let qo = well_index * lam_o * drawdown;
                    f_w[i] += qw * c.rho_w.value * w;
                    f_o[i] += qo * c.rho_o.value * w;
                    f_e[i] += (c_vw * qw * c.rho_w.value + c_vo * qo * c.rho_o.value) * t_i * w;
                    if want_jacobian {
                        let col = 3 * i;
                        let dlw_dt = -c.k_rw * c.mu_w.d_dt / (c.mu_w.value * c.mu_w.value);
                        let dlo_dt = -c.k_ro * c.mu_o.d_dt / (c.mu_o.value * c.mu_o.value);
                        let dlw_ds = c.dkrw_ds / c.mu_w.value;
                        let dlo_ds = c.dkro_ds / c.mu_o.value;

                        jw.push((
                            i,
                            col,
                            well_index * lam_w * (ddraw * c.rho_w.value + drawdown * c.rho_w.d_dp)
                                * w,
                        ));
                        jw.push((
                            i,
                            col + 1,
                            well_index
                                * drawdown
                                * (dlw_dt * c.rho_w.value + lam_w * c.rho_w.d_dt)
                                * w,
                        ));
                        jw.push((i, col + 2, well_index * drawdown * dlw_ds * c.rho_w.value * w));

                        jo.push((
                            i,
                            col,
                            well_index * lam_o * (ddraw * c.rho_o.value + drawdown * c.rho_o.d_dp)
                                * w,
                        ));
                        jo.push((
                            i,
                            col + 1,
                            well_index
                                * drawdown
                                * (dlo_dt * c.rho_o.value + lam_o * c.rho_o.d_dt)
                                * w,
                        ));
                        jo.push((i, col + 2, well_index * drawdown * dlo_ds * c.rho_o.value * w));

                        let mix = c_vw * lam_w * c.rho_w.value + c_vo * lam_o * c.rho_o.value;
                        let dmix_dp = c_vw * lam_w * c.rho_w.d_dp + c_vo * lam_o * c.rho_o.d_dp;
                        let dmix_dt = c_vw * (dlw_dt * c.rho_w.value + lam_w * c.rho_w.d_dt)
                            + c_vo * (dlo_dt * c.rho_o.value + lam_o * c.rho_o.d_dt);
                        let dmix_ds =
                            c_vw * dlw_ds * c.rho_w.value + c_vo * dlo_ds * c.rho_o.value;
                        je.push((
                            i,
                            col,
                            well_index * (ddraw * mix + drawdown * dmix_dp) * t_i * w,
                        ));
                        je.push((
                            i,
                            col + 1,
                            well_index * drawdown * (dmix_dt * t_i + mix) * w,
                        ));
                        je.push((i, col + 2, well_index * drawdown * dmix_ds * t_i * w));
                    }
                }
                SourceKind::Heater { u, t_heater } => {
                    f_e[i] -= u * (t_heater - t_i) * w;
                    if want_jacobian {
                        je.push((i, 3 * i + 1, u * w));
                    }
                }
            }
        }
    }

    Ok(RawAssembly {
        residual: ResidualVector { f_w, f_e, f_o },
        jac: if want_jacobian { Some((jw, je, jo)) } else { None },
    })
}

/// Raw per-equation residuals (before weighting and row scaling).
pub fn assemble_residual(
    model: &ReservoirModel,
    state: &State,
    prev: &State,
) -> Result<ResidualVector> {
    Ok(assemble_raw(model, state, prev, false)?.residual)
}

/// The weighted, scaled residual in cell-interleaved ordering: row `3i` is
/// the pressure equation `c_vw F_w + c_vo F_o`, row `3i+1` the energy
/// equation, row `3i+2` the oil equation, with the row factors of
/// [`crate::discretization::Scaling`].
pub fn weighted_residual(model: &ReservoirModel, raw: &ResidualVector) -> Vec<f64> {
    let (sp, se, so) = model.scaling.row_factors();
    let (c_vw, c_vo) = (model.props.c_v_water, model.props.c_v_oil);
    let n = raw.f_w.len();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        out[3 * i] = sp * (c_vw * raw.f_w[i] + c_vo * raw.f_o[i]);
        out[3 * i + 1] = se * raw.f_e[i];
        out[3 * i + 2] = so * raw.f_o[i];
    }
    out
}

/// Per-equation 2-norms of the weighted residual: (pressure, energy, oil).
pub fn residual_row_norms(model: &ReservoirModel, raw: &ResidualVector) -> (f64, f64, f64) {
    let v = weighted_residual(model, raw);
    let n = raw.f_w.len();
    let mut sums = [0.0f64; 3];
    for i in 0..n {
        for e in 0..3 {
            sums[e] += v[3 * i + e] * v[3 * i + e];
        }
    }
    (sums[0].sqrt(), sums[1].sqrt(), sums[2].sqrt())
}

/// Analytic Jacobian of the weighted, scaled residual, cell-interleaved.
pub fn assemble_jacobian(
    model: &ReservoirModel,
    state: &State,
    prev: &State,
) -> Result<BlockSystem> {
    let out = assemble_raw(model, state, prev, true)?;
    let (jw, je, jo) = out.jac.expect("jacobian requested");
    let n = model.grid.num_cells();
    let (sp, se, so) = model.scaling.row_factors();
    let (c_vw, c_vo) = (model.props.c_v_water, model.props.c_v_oil);

    let mut triplets = Vec::with_capacity(jw.len() + je.len() + 2 * jo.len());
    for &(cell, col, v) in &jw {
        triplets.push((3 * cell, col, sp * c_vw * v));
    }
    for &(cell, col, v) in &je {
        triplets.push((3 * cell + 1, col, se * v));
    }
    for &(cell, col, v) in &jo {
        triplets.push((3 * cell, col, sp * c_vo * v));
        triplets.push((3 * cell + 2, col, so * v));
    }
    let matrix = CsrMatrix::from_triplets(3 * n, 3 * n, &triplets)?;
    Ok(BlockSystem { matrix, n_cells: n })
}
