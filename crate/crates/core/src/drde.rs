//! Decoupled range and Doppler estimation: Doppler-plus-CFO (DPO) from the
//! packet-domain correlation, the Kalman CSI enhancer that suppresses
//! per-packet timing offsets, and range from the subcarrier-domain correlation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::channel::OfdmConfig;
use crate::error::{Error, Result};
use crate::geometry::SPEED_OF_LIGHT;
use crate::subspace::{
    deep_minima, estimate_model_order, estimate_model_order_above, estimate_noise_power, herm_eig,
    newton_minimum_search, noise_floor, EigenPair, LinearPhaseMusic, SearchAxis, SearchConfig,
};

/// Phase rates of the range steering vector, `-2π n Δf / c` per metre.
pub fn range_rates(ofdm: &OfdmConfig) -> Vec<f64> {
    (0..ofdm.subcarriers)
        .map(|n| -2.0 * PI * n as f64 * ofdm.subcarrier_spacing / SPEED_OF_LIGHT)
        .collect()
}

/// Phase rates of the Doppler steering vector, `2π m T` per hertz.
pub fn doppler_rates(ofdm: &OfdmConfig) -> Vec<f64> {
    let t = ofdm.packet_interval();
    (0..ofdm.packets).map(|m| 2.0 * PI * m as f64 * t).collect()
}

/// `a_r(r)[n] = exp(-j 2π n Δf r / c)`.
pub fn range_steering(range: f64, ofdm: &OfdmConfig) -> DVector<Complex64> {
    let rates = range_rates(ofdm);
    DVector::from_iterator(
        rates.len(),
        rates.iter().map(|k| Complex64::from_polar(1.0, k * range)),
    )
}

/// `a_f(f)[m] = exp(j 2π m T f)`.
pub fn doppler_steering(freq: f64, ofdm: &OfdmConfig) -> DVector<Complex64> {
    let rates = doppler_rates(ofdm);
    DVector::from_iterator(
        rates.len(),
        rates.iter().map(|k| Complex64::from_polar(1.0, k * freq)),
    )
}

/// Unambiguous range `c / Δf`.
pub fn max_unambiguous_range(ofdm: &OfdmConfig) -> f64 {
    SPEED_OF_LIGHT / ofdm.subcarrier_spacing
}

/// Doppler search over one period `(-1/(2T), 1/(2T)]`, 0.1 Hz tolerance.
pub fn default_doppler_search(ofdm: &OfdmConfig) -> SearchConfig {
    let half = 0.5 / ofdm.packet_interval();
    SearchConfig {
        axes: vec![SearchAxis::periodic(-half, half)],
        grid_points: 4 * ofdm.packets,
        max_iterations: 50,
        tolerance: 0.1,
    }
}

/// Range search over one period `(0, c/Δf]`, 1 mm tolerance. The grid is 16
/// points per range resolution cell so that paths a fraction of a cell apart
/// still get separate seeds.
pub fn default_range_search(ofdm: &OfdmConfig) -> SearchConfig {
    SearchConfig {
        axes: vec![SearchAxis::periodic(0.0, max_unambiguous_range(ofdm))],
        grid_points: 16 * ofdm.subcarriers,
        max_iterations: 50,
        tolerance: 1e-3,
    }
}

fn check_shape(h: &DMatrix<Complex64>, ofdm: &OfdmConfig) -> Result<()> {
    if h.nrows() != ofdm.subcarriers {
        return Err(Error::DimensionMismatch {
            what: "beam CSI rows",
            expected: ofdm.subcarriers,
            actual: h.nrows(),
        });
    }
    if h.ncols() != ofdm.packets {
        return Err(Error::DimensionMismatch {
            what: "beam CSI columns",
            expected: ofdm.packets,
            actual: h.ncols(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoEstimate {
    /// Doppler plus residual CFO, Hz.
    pub value: f64,
    pub aoa_index: usize,
    pub doppler_index: usize,
    /// `exp(j 2π T f̂)`.
    pub transfer_factor: Complex64,
}

#[derive(Debug, Clone)]
pub struct DpoResult {
    pub estimates: Vec<DpoEstimate>,
    pub model_order: usize,
    pub noise_power: f64,
    pub eigenvalues: DVector<f64>,
}

/// `R_{X,f} = (1/N_c) Σ_n row_nᵀ row_n*`, an `M_s × M_s` matrix.
pub fn doppler_correlation(h: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let ht = h.transpose();
    let mut r = &ht * ht.adjoint();
    r.unscale_mut(h.nrows().max(1) as f64);
    r
}

/// DPO estimation on one beam's CSI. With `noise_power` set, eigenvalues
/// must also clear the white-noise floor of `R_{X,f}`.
pub fn estimate_dpo(
    h: &DMatrix<Complex64>,
    ofdm: &OfdmConfig,
    cfg: &SearchConfig,
    eps: f64,
    noise_power: Option<f64>,
    aoa_index: usize,
) -> Result<DpoResult> {
    check_shape(h, ofdm)?;
    let eig = herm_eig(&doppler_correlation(h))?;
    let values = eig.values.as_slice();
    let floor = noise_power.map_or(f64::NEG_INFINITY, |p| {
        noise_floor(p, ofdm.packets, ofdm.subcarriers, eps)
    });
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
        let obj = LinearPhaseMusic::new(doppler_rates(ofdm), eig.signal_basis(order))?;
        let t = ofdm.packet_interval();
        let minima = deep_minima(
            newton_minimum_search(&obj, cfg, order)?,
            ofdm.packets as f64,
        );
        for (doppler_index, m) in minima.into_iter().enumerate() {
            let value = m.point[0];
            estimates.push(DpoEstimate {
                value,
                aoa_index,
                doppler_index,
                transfer_factor: Complex64::from_polar(1.0, 2.0 * PI * t * value),
            });
        }
    }
    Ok(DpoResult {
        estimates,
        model_order: order,
        noise_power,
        eigenvalues: eig.values,
    })
}

/// One Kalman update, forward or backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfState {
    pub prior_variance: f64,
    pub posterior_variance: f64,
    pub gain: Complex64,
    pub observation_variance: f64,
}

#[derive(Debug, Clone)]
pub struct KfOutput {
    pub filtered: DVector<Complex64>,
    /// Variance after the final backward update.
    pub enhanced_variance: f64,
    pub initial_variance: f64,
    /// Forward updates (packets 1..M) followed by backward updates
    /// (packets M-2 down to 0).
    pub steps: Vec<KfState>,
}

/// Initial variance `p_{w,0} = (1/M) Σ_p |h_p A^{-p} - h_0|²`.
pub fn kf_initial_variance(h: &[Complex64], transfer: Complex64) -> f64 {
    let inv = transfer.inv();
    let mut rot = Complex64::new(1.0, 0.0);
    let mut acc = 0.0;
    for z in h {
        acc += (z * rot - h[0]).norm_sqr();
        rot *= inv;
    }
    acc / h.len() as f64
}

/// Kalman CSI enhancer over one packet-domain sequence: forward pass with
/// transfer factor `A`, then backward pass with `A⁻¹`.
pub fn kf_enhance(h: &[Complex64], transfer: Complex64, noise_power: f64) -> Result<KfOutput> {
    if h.is_empty() {
        return Err(Error::TooShort {
            what: "KF input",
            min: 1,
            len: 0,
        });
    }
    kf_enhance_from(h, transfer, noise_power, kf_initial_variance(h, transfer))
}

/// [`kf_enhance`] with an explicit initial variance.
pub fn kf_enhance_from(
    h: &[Complex64],
    transfer: Complex64,
    noise_power: f64,
    initial_variance: f64,
) -> Result<KfOutput> {
    if h.is_empty() {
        return Err(Error::TooShort {
            what: "KF input",
            min: 1,
            len: 0,
        });
    }
    if !(noise_power >= 0.0) || !(initial_variance >= 0.0) {
        return Err(Error::InvalidConfig(
            "KF variances must be non-negative".into(),
        ));
    }
    if !transfer.re.is_finite() || !transfer.im.is_finite() || (transfer.norm() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidConfig(format!(
            "KF transfer factor must have unit modulus, got {transfer}"
        )));
    }
    let m = h.len();
    let mut out = DVector::from_column_slice(h);
    let mut p = initial_variance;
    let mut steps = Vec::with_capacity(2 * m.saturating_sub(1));

    let mut update = |prior: Complex64, obs: Complex64, a: Complex64, p: &mut f64| -> Complex64 {
        let prior_var = (a * *p * a.conj()).re;
        let denom = prior_var + noise_power;
        let gain = if denom > 0.0 {
            Complex64::new(prior_var, 0.0).conj() / denom
        } else {
            Complex64::new(1.0, 0.0)
        };
        let post = (Complex64::new(1.0, 0.0) - gain) * prior_var;
        *p = post.re;
        steps.push(KfState {
            prior_variance: prior_var,
            posterior_variance: *p,
            gain,
            observation_variance: noise_power,
        });
        // `prior + K (obs - prior)` rearranged so that K = 1 returns the
        // observation and a zero innovation returns the prior, both exactly.
        obs - (Complex64::new(1.0, 0.0) - gain) * (obs - prior)
    };

    for k in 1..m {
        let prior = transfer * out[k - 1];
        out[k] = update(prior, h[k], transfer, &mut p);
    }
    let inv = transfer.inv();
    for k in (1..m).rev() {
        let prior = inv * out[k];
        out[k - 1] = update(prior, h[k - 1], inv, &mut p);
    }
    Ok(KfOutput {
        filtered: out,
        enhanced_variance: p,
        initial_variance,
        steps,
    })
}

#[derive(Debug, Clone)]
pub struct EnhancedCsi {
    pub data: DMatrix<Complex64>,
    /// Mean over subcarriers of the final KF variance.
    pub enhanced_variance: f64,
    /// Mean `|h - h̄|²` between input and output, the interference plus
    /// noise the filter removed.
    pub residual_power: f64,
}

impl EnhancedCsi {
    /// Interference-plus-noise power left in the output: the removed power
    /// scaled by the filter's variance reduction `σ̂_NK² / σ̂_N²`.
    pub fn remaining_interference(&self, noise_power: f64) -> f64 {
        if noise_power > 0.0 {
            self.residual_power * self.enhanced_variance / noise_power
        } else {
            self.enhanced_variance
        }
    }
}

/// Row-wise [`kf_enhance`] over a beam's `N_c × M_s` CSI.
pub fn enhance_csi_matrix(
    h: &DMatrix<Complex64>,
    transfer: Complex64,
    noise_power: f64,
) -> Result<EnhancedCsi> {
    use rayon::prelude::*;
    let rows: Vec<KfOutput> = (0..h.nrows())
        .into_par_iter()
        .map(|n| {
            let row: Vec<Complex64> = h.row(n).iter().copied().collect();
            kf_enhance(&row, transfer, noise_power)
        })
        .collect::<Result<_>>()?;
    let enhanced_variance =
        rows.iter().map(|o| o.enhanced_variance).sum::<f64>() / rows.len().max(1) as f64;
    let data = DMatrix::from_fn(h.nrows(), h.ncols(), |n, m| rows[n].filtered[m]);
    let residual_power = (h - &data).norm_squared() / h.len().max(1) as f64;
    Ok(EnhancedCsi {
        data,
        enhanced_variance,
        residual_power,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeEstimate {
    /// Aggregate range, m.
    pub value: f64,
    pub aoa_index: usize,
    pub doppler_index: usize,
    pub range_index: usize,
}

#[derive(Debug, Clone)]
pub struct RangeResult {
    pub estimates: Vec<RangeEstimate>,
    pub model_order: usize,
    /// Non-trivial eigenvalues of `R_{X,r}`, at most `min(N_c, M_s)` of them.
    pub eigenvalues: DVector<f64>,
}

/// Leading eigenpairs of `R_{X,r} = H Hᴴ / M_s`. When `M_s < N_c` the rank is
/// at most `M_s` and the eigenpairs come from the `M_s × M_s` Gram matrix
/// `Hᴴ H / M_s`, mapped back through `u = H v / √(M_s λ)`.
pub fn range_eigen(h: &DMatrix<Complex64>) -> Result<EigenPair> {
    let m = h.ncols().max(1) as f64;
    if h.nrows() <= h.ncols() {
        let mut r = h * h.adjoint();
        r.unscale_mut(m);
        return herm_eig(&r);
    }
    let mut g = h.adjoint() * h;
    g.unscale_mut(m);
    let eig = herm_eig(&g)?;
    let mut vectors = DMatrix::zeros(h.nrows(), eig.dim());
    for (k, &lambda) in eig.values.iter().enumerate() {
        if lambda > 0.0 {
            let u = (h * eig.vectors.column(k)).unscale((m * lambda).sqrt());
            vectors.set_column(k, &u);
        }
    }
    Ok(EigenPair {
        values: eig.values,
        vectors,
    })
}

/// Range estimation on a (possibly enhanced) beam CSI matrix. With
/// `noise_power` set, eigenvalues must also clear the white-noise floor of
/// `R_{X,r}` at that per-entry variance.
pub fn estimate_ranges(
    h: &DMatrix<Complex64>,
    ofdm: &OfdmConfig,
    cfg: &SearchConfig,
    eps: f64,
    noise_power: Option<f64>,
    aoa_index: usize,
    doppler_index: usize,
) -> Result<RangeResult> {
    check_shape(h, ofdm)?;
    let eig = range_eigen(h)?;
    let values = eig.values.as_slice();
    let floor = noise_power.map_or(f64::NEG_INFINITY, |p| {
        noise_floor(p, ofdm.subcarriers, ofdm.packets, eps)
    });
    let order = estimate_model_order_above(values, eps, floor)?;
    if order >= ofdm.subcarriers {
        return Err(Error::EmptyNoiseSubspace {
            order,
            dim: ofdm.subcarriers,
        });
    }
    let mut estimates = Vec::new();
    if order > 0 {
        let obj = LinearPhaseMusic::new(range_rates(ofdm), eig.signal_basis(order))?;
        let minima = deep_minima(
            newton_minimum_search(&obj, cfg, order)?,
            ofdm.subcarriers as f64,
        );
        for (range_index, m) in minima.into_iter().enumerate() {
            estimates.push(RangeEstimate {
                value: m.point[0],
                aoa_index,
                doppler_index,
                range_index,
            });
        }
    }
    Ok(RangeResult {
        estimates,
        model_order: order,
        eigenvalues: eig.values,
    })
}

/// Noise-subspace residuals `(‖U_{rN}ᴴ a_r(r)‖, ‖U_{fN}ᴴ a_f(f)‖)` of a beam
/// CSI matrix, with subspace orders from the eigen-gap rule.
pub fn verify_decoupling(
    h: &DMatrix<Complex64>,
    ofdm: &OfdmConfig,
    range: f64,
    doppler: f64,
) -> Result<(f64, f64)> {
    check_shape(h, ofdm)?;
    let mut rr = h * h.adjoint();
    rr.unscale_mut(ofdm.packets as f64);
    let residual = |r: &DMatrix<Complex64>, a: DVector<Complex64>| -> Result<f64> {
        let eig = herm_eig(r)?;
        let order = estimate_model_order(eig.values.as_slice(), 1.0)?;
        Ok((eig.noise_basis(order).adjoint() * a).norm())
    };
    Ok((
        residual(&rr, range_steering(range, ofdm))?,
        residual(&doppler_correlation(h), doppler_steering(doppler, ofdm))?,
    ))
}
