//! Angle-of-arrival estimation from the pooled spatial correlation matrix and
//! per-angle matched spatial filtering of the CSI tensor.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::channel::CsiTensor;
use crate::error::{Error, Result};
use crate::geometry::{steering_vector, AnglePair, UpaGeometry};
use crate::subspace::{
    deep_minima, estimate_model_order_above, estimate_noise_power, herm_eig, newton_minimum_search,
    noise_floor, Objective, SearchAxis, SearchConfig,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoaEstimate {
    pub angle: AnglePair,
    /// MUSIC null-spectrum value `f_a` at the estimate.
    pub spectrum_value: f64,
    /// Position in the ascending-spectrum order.
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct AoaResult {
    pub estimates: Vec<AoaEstimate>,
    pub model_order: usize,
    pub noise_power: f64,
    pub eigenvalues: DVector<f64>,
}

/// `R_x = Σ_{n,m} ĥ_{n,m} ĥ_{n,m}ᴴ / (M_s N_c)`.
pub fn correlation_matrix(csi: &CsiTensor) -> DMatrix<Complex64> {
    let snaps = csi.data.ncols().max(1) as f64;
    let mut r = &csi.data * csi.data.adjoint();
    r.unscale_mut(snaps);
    r
}

/// Default angle search: azimuth over `(-π, π]`, elevation over the lower
/// hemisphere `[π/2, π]` (targets below a BS array lying in the x-y plane).
pub fn default_aoa_search() -> SearchConfig {
    SearchConfig {
        axes: vec![SearchAxis::periodic(-PI, PI), SearchAxis::new(PI / 2.0, PI)],
        grid_points: 64,
        max_iterations: 50,
        tolerance: 1e-5,
    }
}

/// MUSIC null spectrum over `p = [azimuth, elevation]`,
/// `f_a(p) = ‖a(p)‖² - ‖U_Sᴴ a(p)‖²`, with analytic derivatives.
pub struct AoaMusic {
    geom: UpaGeometry,
    basis_adjoint: DMatrix<Complex64>,
}

impl AoaMusic {
    pub fn new(geom: UpaGeometry, signal_basis: &DMatrix<Complex64>) -> Result<Self> {
        if signal_basis.nrows() != geom.num_elements() {
            return Err(Error::DimensionMismatch {
                what: "signal basis rows",
                expected: geom.num_elements(),
                actual: signal_basis.nrows(),
            });
        }
        Ok(Self {
            geom,
            basis_adjoint: signal_basis.adjoint(),
        })
    }

    /// Steering vector and its first and second derivatives in
    /// `[a, a_φ, a_θ, a_φφ, a_θθ, a_φθ]` order.
    fn steering_with_derivatives(&self, phi: f64, theta: f64) -> [DVector<Complex64>; 6] {
        let k = self.geom.phase_scale();
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        // Direction cosines u = sinθ cosφ, v = sinθ sinφ and their derivatives.
        let (u_p, u_t) = (-st * sp, ct * cp);
        let (v_p, v_t) = (st * cp, ct * sp);
        let (u_pp, u_tt, u_pt) = (-st * cp, -st * cp, -ct * sp);
        let (v_pp, v_tt, v_pt) = (-st * sp, -st * sp, ct * cp);
        let (u, v) = (st * cp, st * sp);

        let n = self.geom.num_elements();
        let mut out: [DVector<Complex64>; 6] = std::array::from_fn(|_| DVector::zeros(n));
        let j = Complex64::new(0.0, 1.0);
        let mut idx = 0;
        for p in 0..self.geom.rows {
            for q in 0..self.geom.cols {
                let (pf, qf) = (p as f64, q as f64);
                let psi = -k * (pf * u + qf * v);
                let a = Complex64::from_polar(1.0, psi);
                let dp = -k * (pf * u_p + qf * v_p);
                let dt = -k * (pf * u_t + qf * v_t);
                let dpp = -k * (pf * u_pp + qf * v_pp);
                let dtt = -k * (pf * u_tt + qf * v_tt);
                let dpt = -k * (pf * u_pt + qf * v_pt);
                out[0][idx] = a;
                out[1][idx] = j * dp * a;
                out[2][idx] = j * dt * a;
                out[3][idx] = (j * dpp - dp * dp) * a;
                out[4][idx] = (j * dtt - dt * dt) * a;
                out[5][idx] = (j * dpt - dp * dt) * a;
                idx += 1;
            }
        }
        out
    }
}

impl Objective for AoaMusic {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, p: &[f64]) -> f64 {
        let angle = AnglePair {
            azimuth: p[0],
            elevation: p[1],
        };
        let a = steering_vector(&self.geom, &angle);
        let b = &self.basis_adjoint * &a;
        a.norm_squared() - b.norm_squared()
    }

    fn derivatives(&self, p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.steering_with_derivatives(p[0], p[1]);
        let b: Vec<DVector<Complex64>> = d.iter().map(|x| &self.basis_adjoint * x).collect();
        // ‖a‖² is constant, so only -‖b‖² contributes.
        let g_p = -2.0 * b[1].dotc(&b[0]).re;
        let g_t = -2.0 * b[2].dotc(&b[0]).re;
        let h_pp = -2.0 * (b[3].dotc(&b[0]).re + b[1].norm_squared());
        let h_tt = -2.0 * (b[4].dotc(&b[0]).re + b[2].norm_squared());
        let h_pt = -2.0 * (b[5].dotc(&b[0]).re + b[1].dotc(&b[2]).re);
        (
            DVector::from_vec(vec![g_p, g_t]),
            DMatrix::from_row_slice(2, 2, &[h_pp, h_pt, h_pt, h_tt]),
        )
    }
}

/// Eigendecomposes `R_x`, picks the model order from the eigen-gaps and
/// minimises the MUSIC null spectrum. Angles come back in ascending spectrum
/// order; a zero model order yields an empty list.
///
/// With `snapshots` set, eigenvalues must also clear the white-noise floor
/// for that many snapshots, with the noise level taken as the mean of the
/// lower half of the spectrum.
pub fn estimate_aoas(
    r: &DMatrix<Complex64>,
    geom: &UpaGeometry,
    cfg: &SearchConfig,
    eps: f64,
    snapshots: Option<usize>,
) -> Result<AoaResult> {
    geom.validate()?;
    if r.nrows() != geom.num_elements() {
        return Err(Error::DimensionMismatch {
            what: "correlation matrix",
            expected: geom.num_elements(),
            actual: r.nrows(),
        });
    }
    let eig = herm_eig(r)?;
    let values = eig.values.as_slice();
    let floor = match snapshots {
        Some(k) => {
            let lower = &values[values.len() / 2..];
            let level = lower.iter().sum::<f64>() / lower.len() as f64;
            noise_floor(level.max(0.0), values.len(), k, eps)
        }
        None => f64::NEG_INFINITY,
    };
    let order = estimate_model_order_above(values, eps, floor)?;
    if order >= eig.dim() {
        return Err(Error::EmptyNoiseSubspace {
            order,
            dim: eig.dim(),
        });
    }
    let noise_power = estimate_noise_power(values, order)?;
    let mut estimates = Vec::new();
    if order > 0 {
        let obj = AoaMusic::new(*geom, &eig.signal_basis(order))?;
        let minima = deep_minima(newton_minimum_search(&obj, cfg, order)?, eig.dim() as f64);
        for (index, m) in minima.into_iter().enumerate() {
            estimates.push(AoaEstimate {
                angle: AnglePair::new(m.point[0], m.point[1])?,
                spectrum_value: m.value,
                index,
            });
        }
    }
    Ok(AoaResult {
        estimates,
        model_order: order,
        noise_power,
        eigenvalues: eig.values,
    })
}

/// Matched receive beamformer `a(p)/√(PQ)`.
pub fn make_spatial_filter(angle: &AnglePair, geom: &UpaGeometry) -> DVector<Complex64> {
    let a = steering_vector(geom, angle);
    let n = (a.len() as f64).sqrt();
    a.unscale(n)
}

/// Beam-domain CSI `[H]_{n,m} = wᴴ ĥ_{n,m}` as an `N_c × M_s` matrix.
pub fn apply_spatial_filter(csi: &CsiTensor, w: &DVector<Complex64>) -> Result<DMatrix<Complex64>> {
    if w.len() != csi.antennas() {
        return Err(Error::DimensionMismatch {
            what: "spatial filter",
            expected: csi.antennas(),
            actual: w.len(),
        });
    }
    let row = w.adjoint() * &csi.data;
    Ok(DMatrix::from_fn(
        csi.subcarriers(),
        csi.packets(),
        |n, m| row[csi.column_index(n, m)],
    ))
}
