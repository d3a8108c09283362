//! Fluid and rock property correlations with analytic first derivatives.
//!
//! All public entry points work in SI units; the correlations that are
//! defined in field units (degF, degC, cp, MPa) convert internally at the
//! boundary and convert back.

use crate::error::{Error, Result};

/// A property value together with its partial derivatives in p and T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropEval {
    pub value: f64,
    pub d_dp: f64,
    pub d_dt: f64,
}

impl PropEval {
    pub fn constant(value: f64) -> Self {
        PropEval {
            value,
            d_dp: 0.0,
            d_dt: 0.0,
        }
    }
}

/// Rock and fluid property parameters.
#[derive(Debug, Clone)]
pub struct PropertyConfig {
    /// Specific heats, J/(K kg).
    pub c_v_oil: f64,
    pub c_v_water: f64,
    pub c_v_rock: f64,
    /// Rock density, kg/m^3.
    pub rho_rock: f64,
    /// Thermal conductivities, W/(m K).
    pub k_t_oil: f64,
    pub k_t_water: f64,
    pub k_t_rock: f64,
    /// Water viscosity correlation coefficients (input degF, output cp).
    pub visc_a: f64,
    pub visc_b: f64,
    pub visc_c: f64,
    /// Water density coefficients (Kell-type rational polynomial in degC,
    /// exponential pressure factor in MPa).
    pub kell_e: [f64; 7],
    pub kell_e7: f64,
    pub kell_c_w: f64,
    /// Oil density: exponential correlation around a reference point.
    pub oil_rho_ref: f64,
    pub oil_c_compress: f64,
    pub oil_beta_expand: f64,
    pub oil_p_ref: f64,
    pub oil_t_ref_rho: f64,
    /// Oil viscosity: Arrhenius-type two-parameter correlation.
    pub oil_mu_ref: f64,
    pub oil_b_visc: f64,
    pub oil_t_ref_mu: f64,
    /// Multiplier applied to both oil compressibility and thermal
    /// expansivity; used to sweep the pressure-temperature cross-coupling
    /// strength.
    pub coupling_factor: f64,
}

impl Default for PropertyConfig {
    fn default() -> Self {
        PropertyConfig {
            c_v_oil: 2093.4,
            c_v_water: 4181.3,
            c_v_rock: 920.0,
            rho_rock: 2650.0,
            k_t_oil: 0.15,
            k_t_water: 0.6005638,
            k_t_rock: 1.7295772056,
            visc_a: 2.1850,
            visc_b: 0.04012,
            visc_c: 5.1547e-6,
            kell_e: [
                999.83952,
                16.955176,
                -7.987e-3,
                -46.170461e-6,
                105.56302e-9,
                -280.54353e-12,
                16.87985e-3,
            ],
            kell_e7: 10.2,
            kell_c_w: 3.98854e-4,
            oil_rho_ref: 999.83952,
            oil_c_compress: 5e-10,
            oil_beta_expand: 5e-4,
            oil_p_ref: 101_325.0,
            oil_t_ref_rho: 288.706,
            oil_mu_ref: 1.0,
            oil_b_visc: 9000.0,
            oil_t_ref_mu: 288.706,
            coupling_factor: 1.0,
        }
    }
}

impl PropertyConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("c_v_oil", self.c_v_oil),
            ("c_v_water", self.c_v_water),
            ("c_v_rock", self.c_v_rock),
            ("rho_rock", self.rho_rock),
            ("k_t_oil", self.k_t_oil),
            ("k_t_water", self.k_t_water),
            ("k_t_rock", self.k_t_rock),
            ("oil_rho_ref", self.oil_rho_ref),
            ("oil_mu_ref", self.oil_mu_ref),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.coupling_factor < 1.0 {
            return Err(Error::InvalidArgument(
                "coupling_factor must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Water viscosity in Pa s as a function of temperature in K.
    pub fn water_viscosity(&self, t: f64) -> Result<PropEval> {
        if !(273.0..=500.0).contains(&t) {
            return Err(Error::OutOfRange {
                quantity: "water viscosity temperature (K)",
                value: t,
            });
        }
        let t_f = (t - 273.15) * 1.8 + 32.0;
        let denom = -1.0 + self.visc_b * t_f + self.visc_c * t_f * t_f;
        let mu_cp = self.visc_a / denom;
        // chain rule through the K -> degF conversion
        let d_denom_dt = (self.visc_b + 2.0 * self.visc_c * t_f) * 1.8;
        let d_mu_cp_dt = -self.visc_a * d_denom_dt / (denom * denom);
        Ok(PropEval {
            value: mu_cp * 1e-3,
            d_dp: 0.0,
            d_dt: d_mu_cp_dt * 1e-3,
        })
    }

    /// Water density in kg/m^3 as a function of pressure in Pa and
    /// temperature in K.
    pub fn water_density(&self, p: f64, t: f64) -> Result<PropEval> {
        let t_c = t - 273.15;
        if t_c < 0.0 {
            return Err(Error::OutOfRange {
                quantity: "water density temperature (degC)",
                value: t_c,
            });
        }
        if !(p > 0.0) {
            return Err(Error::OutOfRange {
                quantity: "water density pressure (Pa)",
                value: p,
            });
        }
        let e = &self.kell_e;
        let num = e[0] + t_c * (e[1] + t_c * (e[2] + t_c * (e[3] + t_c * (e[4] + t_c * e[5]))));
        let d_num = e[1]
            + t_c * (2.0 * e[2] + t_c * (3.0 * e[3] + t_c * (4.0 * e[4] + t_c * 5.0 * e[5])));
        let den = 1.0 + e[6] * t_c;
        let p_mpa = p * 1e-6;
        let expf = (self.kell_c_w * (p_mpa - self.kell_e7)).exp();
        let value = num / den * expf;
        Ok(PropEval {
            value,
            d_dp: value * self.kell_c_w * 1e-6,
            d_dt: (d_num * den - num * e[6]) / (den * den) * expf,
        })
    }

    /// Oil viscosity in Pa s as a function of temperature in K.
    pub fn oil_viscosity(&self, t: f64) -> Result<PropEval> {
        if !(t > 0.0) {
            return Err(Error::OutOfRange {
                quantity: "oil viscosity temperature (K)",
                value: t,
            });
        }
        let value = self.oil_mu_ref * (self.oil_b_visc * (1.0 / t - 1.0 / self.oil_t_ref_mu)).exp();
        Ok(PropEval {
            value,
            d_dp: 0.0,
            d_dt: -value * self.oil_b_visc / (t * t),
        })
    }

    /// Oil density in kg/m^3; both the compressibility and the thermal
    /// expansivity are multiplied by the configured coupling factor.
    pub fn oil_density(&self, p: f64, t: f64) -> Result<PropEval> {
        if !(p > 0.0 && t > 0.0) {
            return Err(Error::OutOfRange {
                quantity: "oil density input",
                value: if p > 0.0 { t } else { p },
            });
        }
        let f = self.coupling_factor;
        let c = f * self.oil_c_compress;
        let beta = f * self.oil_beta_expand;
        let value =
            self.oil_rho_ref * (c * (p - self.oil_p_ref) - beta * (t - self.oil_t_ref_rho)).exp();
        Ok(PropEval {
            value,
            d_dp: c * value,
            d_dt: -beta * value,
        })
    }

    /// Mixture thermal conductivity in W/(m K).
    pub fn thermal_conductivity(&self, phi: f64, s_o: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&phi) || !(0.0..=1.0).contains(&s_o) {
            return Err(Error::InvalidArgument(
                "thermal_conductivity requires phi and S_o in [0, 1]".into(),
            ));
        }
        Ok((1.0 - phi) * self.k_t_rock
            + phi * (s_o * self.k_t_oil + (1.0 - s_o) * self.k_t_water))
    }

    /// Sensitivity of the mixture conductivity to oil saturation.
    pub fn thermal_conductivity_ds(&self, phi: f64) -> f64 {
        phi * (self.k_t_oil - self.k_t_water)
    }
}

/// Relative permeabilities `(k_ro, k_rw)`; linear in saturation.
///
/// Saturations slightly outside [0, 1] (transient Newton iterates) are
/// clamped for evaluation only; the unknown vector itself is not touched.
/// Returns whether clamping occurred.
pub fn rel_perm(s_o: f64) -> (f64, f64, bool) {
    let clamped = !(0.0..=1.0).contains(&s_o);
    let s = s_o.clamp(0.0, 1.0);
    (s, 1.0 - s, clamped)
}
