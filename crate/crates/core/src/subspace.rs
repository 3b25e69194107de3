//! Subspace machinery shared by the angle, Doppler and range estimators:
//! Hermitian eigendecomposition, eigen-gap model order, noise power, and a
//! grid-seeded Newton search for spectrum minima.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Eigenvalues in descending order with their eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: DVector<f64>,
    pub vectors: DMatrix<Complex64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Leading `order` eigenvectors.
    pub fn signal_basis(&self, order: usize) -> DMatrix<Complex64> {
        self.vectors.columns(0, order).into_owned()
    }

    /// Eigenvectors `order..dim`.
    pub fn noise_basis(&self, order: usize) -> DMatrix<Complex64> {
        self.vectors.columns(order, self.dim() - order).into_owned()
    }
}

/// Eigendecomposition of a Hermitian matrix. The input is symmetrized first;
/// eigenvalues come out descending (ties keep solver order) and each
/// eigenvector is rotated so its largest-magnitude entry is real positive.
pub fn herm_eig(r: &DMatrix<Complex64>) -> Result<EigenPair> {
    if !r.is_square() {
        return Err(Error::DimensionMismatch {
            what: "Hermitian matrix columns",
            expected: r.nrows(),
            actual: r.ncols(),
        });
    }
    if r.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("Hermitian matrix"));
    }
    let sym = (r + r.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(sym);

    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut best = 0;
        for i in 1..n {
            if col[i].norm() > col[best].norm() {
                best = i;
            }
        }
        let pivot = col[best];
        let rot = if pivot.norm() > 0.0 {
            pivot.conj() / pivot.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        vectors.set_column(dst, &(col * rot));
    }
    Ok(EigenPair { values, vectors })
}

/// Eigen-gap model order.
///
/// With gaps `g_i = v_i - v_{i+1}` (1-based, `i = 1..N-1`) and `ḡ` the mean of
/// `g_k` for `k = ⌊(N-1)/2⌋ ..= N-1`, returns the largest `i` with
/// `g_i > (1 + eps) ḡ`, or 0 if none. Gaps below `1e-10 * |v_1|` are treated
/// as round-off.
pub fn estimate_model_order(values: &[f64], eps: f64) -> Result<usize> {
    estimate_model_order_above(values, eps, f64::NEG_INFINITY)
}

/// [`estimate_model_order`] restricted to `i` with `v_i > floor`, so that
/// gaps inside the noise bulk never count as signal.
pub fn estimate_model_order_above(values: &[f64], eps: f64, floor: f64) -> Result<usize> {
    let n = values.len();
    if n < 4 {
        return Err(Error::TooShort {
            what: "eigenvalue vector",
            min: 4,
            len: n,
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigenvalues"));
    }
    let gaps: Vec<f64> = values.windows(2).map(|w| w[0] - w[1]).collect();
    let start = (n - 1) / 2;
    let tail = &gaps[start - 1..];
    let mean = tail.iter().sum::<f64>() / (n - start) as f64;
    let threshold = (1.0 + eps) * mean;
    let roundoff = ROUNDOFF_GAP * values[0].abs();
    Ok(gaps
        .iter()
        .enumerate()
        .filter(|&(i, &g)| g > threshold && g > roundoff && values[i] > floor)
        .map(|(i, _)| i + 1)
        .max()
        .unwrap_or(0))
}

/// Upper edge of the eigenvalue spread of `X Xᴴ / K` when `X` is
/// `dim × snapshots` white noise of variance `noise_power`:
/// `σ² (1 + √(dim / K))²`.
pub fn noise_eigen_edge(noise_power: f64, dim: usize, snapshots: usize) -> f64 {
    noise_power * (1.0 + (dim as f64 / snapshots.max(1) as f64).sqrt()).powi(2)
}

/// Eigenvalue floor `(1 + eps)` times [`noise_eigen_edge`].
pub fn noise_floor(noise_power: f64, dim: usize, snapshots: usize, eps: f64) -> f64 {
    (1.0 + eps) * noise_eigen_edge(noise_power, dim, snapshots)
}

/// Besides the deepest, a MUSIC minimum is kept only if its null spectrum is
/// at most this fraction of `‖a‖²`; shallower minima are sidelobe dips.
pub const MAX_NULL_FRACTION: f64 = 0.5;

/// Keeps the first (deepest) minimum and any other at most
/// [`MAX_NULL_FRACTION`] `* steering_norm_sqr`.
pub fn deep_minima(minima: Vec<Minimum>, steering_norm_sqr: f64) -> Vec<Minimum> {
    let depth = MAX_NULL_FRACTION * steering_norm_sqr;
    minima
        .into_iter()
        .enumerate()
        .filter(|(i, m)| *i == 0 || m.value <= depth)
        .map(|(_, m)| m)
        .collect()
}

const ROUNDOFF_GAP: f64 = 1e-10;

/// Default eigen-gap margin.
pub const MODEL_ORDER_EPS: f64 = 1.0;

/// Noise power as the mean of the eigenvalues past the signal subspace.
pub fn estimate_noise_power(values: &[f64], signal_order: usize) -> Result<f64> {
    if signal_order >= values.len() {
        return Err(Error::EmptyNoiseSubspace {
            order: signal_order,
            dim: values.len(),
        });
    }
    let tail = &values[signal_order..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// One search dimension. Periodic axes wrap; a Newton step leaving a
/// non-periodic axis is rejected.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchAxis {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub periodic: bool,
}

impl SearchAxis {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            periodic: false,
        }
    }

    pub fn periodic(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            periodic: true,
        }
    }

    fn grid(&self, points: usize) -> Vec<f64> {
        if self.periodic {
            let step = (self.hi - self.lo) / points as f64;
            // Periodic grids cover (lo, hi] so the seam point is not duplicated.
            (1..=points).map(|i| self.lo + step * i as f64).collect()
        } else {
            let step = (self.hi - self.lo) / (points - 1) as f64;
            (0..points).map(|i| self.lo + step * i as f64).collect()
        }
    }

    fn wrap(&self, x: f64) -> f64 {
        if !self.periodic {
            return x;
        }
        let span = self.hi - self.lo;
        let mut y = (x - self.lo).rem_euclid(span) + self.lo;
        if y <= self.lo {
            y += span;
        }
        y
    }

    fn contains(&self, x: f64) -> bool {
        self.periodic || (x >= self.lo && x <= self.hi)
    }

    fn distance(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if self.periodic {
            d.min((self.hi - self.lo) - d)
        } else {
            d
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchConfig {
    pub axes: Vec<SearchAxis>,
    /// Grid points per axis.
    pub grid_points: usize,
    pub max_iterations: usize,
    /// Newton step-norm convergence threshold, in axis units.
    pub tolerance: f64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::InvalidConfig(
                "search needs at least one axis".into(),
            ));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidConfig(
                "grid_points must be at least 2".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(
                "search tolerance must be positive".into(),
            ));
        }
        for a in &self.axes {
            if !(a.hi > a.lo) || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "bad search axis [{}, {}]",
                    a.lo, a.hi
                )));
            }
        }
        Ok(())
    }

    fn grid_step(&self, axis: usize) -> f64 {
        let a = &self.axes[axis];
        if a.periodic {
            (a.hi - a.lo) / self.grid_points as f64
        } else {
            (a.hi - a.lo) / (self.grid_points - 1) as f64
        }
    }
}

/// A smooth function with analytic gradient and Hessian.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, p: &[f64]) -> f64;
    fn derivatives(&self, p: &[f64]) -> (DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub seed: Vec<f64>,
    pub seed_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a singular Hessian, an uphill step or a step outside the
    /// domain stopped the iteration early.
    pub fell_back: bool,
}

/// Grid-seeded Newton minimisation.
///
/// Evaluates `1/f` on the grid, takes the `n_peaks` largest strict local
/// maxima (axis neighbours only; boundary points eligible; periodic axes
/// wrap) as seeds and runs `p ← p - H⁻¹∇f` from each until the Newton step
/// norm is at most `tolerance` or `max_iterations` is reached. Steps are
/// capped at two grid cells and halved until `f` decreases, so no result is
/// worse than its seed. Results closer than half a grid step are merged;
/// output is sorted by ascending `f`.
pub fn newton_minimum_search<O: Objective>(
    obj: &O,
    cfg: &SearchConfig,
    n_peaks: usize,
) -> Result<Vec<Minimum>> {
    cfg.validate()?;
    let dim = cfg.axes.len();
    if obj.dim() != dim {
        return Err(Error::DimensionMismatch {
            what: "search axes",
            expected: obj.dim(),
            actual: dim,
        });
    }
    if n_peaks == 0 {
        return Ok(Vec::new());
    }

    let grids: Vec<Vec<f64>> = cfg.axes.iter().map(|a| a.grid(cfg.grid_points)).collect();
    let n = cfg.grid_points;
    let total = n.pow(dim as u32);
    let unravel = |mut idx: usize| -> Vec<usize> {
        let mut out = vec![0; dim];
        for d in (0..dim).rev() {
            out[d] = idx % n;
            idx /= n;
        }
        out
    };
    let ravel = |ix: &[usize]| ix.iter().fold(0, |acc, &i| acc * n + i);
    let point_at =
        |ix: &[usize]| -> Vec<f64> { ix.iter().enumerate().map(|(d, &i)| grids[d][i]).collect() };

    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|i| obj.value(&point_at(&unravel(i))))
        .collect();

    // Strict local minima of f are strict local maxima of 1/f.
    let mut seeds: Vec<usize> = (0..total)
        .filter(|&i| {
            let ix = unravel(i);
            let v = values[i];
            if !v.is_finite() {
                return false;
            }
            for d in 0..dim {
                for step in [-1isize, 1] {
                    let j = ix[d] as isize + step;
                    let j = if cfg.axes[d].periodic {
                        j.rem_euclid(n as isize) as usize
                    } else if j < 0 || j >= n as isize {
                        continue;
                    } else {
                        j as usize
                    };
                    let mut nb = ix.clone();
                    nb[d] = j;
                    if !(v < values[ravel(&nb)]) {
                        return false;
                    }
                }
            }
            true
        })
        .collect();
    if seeds.is_empty() {
        return Err(Error::NoLocalMaxima);
    }
    seeds.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    seeds.truncate(n_peaks);

    let mut minima: Vec<Minimum> = seeds
        .par_iter()
        .map(|&s| refine(obj, cfg, point_at(&unravel(s)), values[s]))
        .collect();

    minima.sort_by(|a, b| a.value.total_cmp(&b.value));
    let mut merged: Vec<Minimum> = Vec::with_capacity(minima.len());
    for m in minima {
        let dup = merged.iter().any(|k| {
            (0..dim).all(|d| cfg.axes[d].distance(k.point[d], m.point[d]) < 0.5 * cfg.grid_step(d))
        });
        if !dup {
            merged.push(m);
        }
    }
    Ok(merged)
}

fn refine<O: Objective>(obj: &O, cfg: &SearchConfig, seed: Vec<f64>, seed_value: f64) -> Minimum {
    let dim = seed.len();
    let mut p = seed.clone();
    let mut fp = seed_value;
    let mut iterations = 0;
    let mut converged = false;
    let mut fell_back = false;
    let max_step: Vec<f64> = (0..dim)
        .map(|d| MAX_STEP_CELLS * cfg.grid_step(d))
        .collect();

    while iterations < cfg.max_iterations {
        iterations += 1;
        let (grad, hess) = obj.derivatives(&p);
        let step = if dim == 1 {
            let h = hess[(0, 0)];
            (h != 0.0 && h.is_finite()).then(|| DVector::from_element(1, grad[0] / h))
        } else {
            hess.lu().solve(&grad)
        };
        let Some(mut step) = step.filter(|s| s.iter().all(|x| x.is_finite())) else {
            fell_back = true;
            break;
        };
        let newton_norm = step.norm();
        if newton_norm <= cfg.tolerance {
            let candidate = offset(cfg, &p, &step, 1.0);
            if in_domain(cfg, &candidate) {
                let fc = obj.value(&candidate);
                if fc <= fp {
                    p = candidate;
                    fp = fc;
                }
            }
            converged = true;
            break;
        }
        // Away from a convex basin the Newton direction can point uphill;
        // reverse it so the line search below always descends.
        if grad.dot(&step) < 0.0 {
            step = -step;
        }
        let clamp = (0..dim)
            .map(|d| max_step[d] / step[d].abs())
            .fold(1.0, f64::min);
        let mut scale = clamp;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = offset(cfg, &p, &step, scale);
            if in_domain(cfg, &candidate) {
                let fc = obj.value(&candidate);
                if fc < fp {
                    p = candidate;
                    fp = fc;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            fell_back = true;
            break;
        }
    }

    Minimum {
        point: p,
        value: fp,
        seed,
        seed_value,
        iterations,
        converged,
        fell_back,
    }
}

/// Longest step per iteration, in grid cells.
const MAX_STEP_CELLS: f64 = 2.0;
const MAX_HALVINGS: usize = 40;

fn offset(cfg: &SearchConfig, p: &[f64], step: &DVector<f64>, scale: f64) -> Vec<f64> {
    (0..p.len())
        .map(|d| cfg.axes[d].wrap(p[d] - scale * step[d]))
        .collect()
}

fn in_domain(cfg: &SearchConfig, p: &[f64]) -> bool {
    (0..p.len()).all(|d| cfg.axes[d].contains(p[d]))
}

/// MUSIC null spectrum for steering vectors with linear phase,
/// `a_i(x) = exp(j κ_i x)`:
/// `f(x) = a(x)ᴴ (I - U_S U_Sᴴ) a(x)`, the squared norm of the projection of
/// `a(x)` onto the noise subspace.
#[derive(Debug, Clone)]
pub struct LinearPhaseMusic {
    rates: Vec<f64>,
    signal_basis: DMatrix<Complex64>,
    basis_adjoint: DMatrix<Complex64>,
}

impl LinearPhaseMusic {
    pub fn new(rates: Vec<f64>, signal_basis: DMatrix<Complex64>) -> Result<Self> {
        if signal_basis.nrows() != rates.len() {
            return Err(Error::DimensionMismatch {
                what: "signal basis rows",
                expected: rates.len(),
                actual: signal_basis.nrows(),
            });
        }
        let basis_adjoint = signal_basis.adjoint();
        Ok(Self {
            rates,
            signal_basis,
            basis_adjoint,
        })
    }

    pub fn steering(&self, x: f64) -> DVector<Complex64> {
        DVector::from_iterator(
            self.rates.len(),
            self.rates.iter().map(|k| Complex64::from_polar(1.0, k * x)),
        )
    }

    pub fn signal_basis(&self) -> &DMatrix<Complex64> {
        &self.signal_basis
    }
}

impl Objective for LinearPhaseMusic {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, p: &[f64]) -> f64 {
        let a = self.steering(p[0]);
        let b = &self.basis_adjoint * &a;
        a.norm_squared() - b.norm_squared()
    }

    fn derivatives(&self, p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let a = self.steering(p[0]);
        let j = Complex64::new(0.0, 1.0);
        let da =
            DVector::from_iterator(a.len(), a.iter().zip(&self.rates).map(|(z, k)| j * *k * z));
        let d2a = DVector::from_iterator(
            a.len(),
            a.iter().zip(&self.rates).map(|(z, k)| -(k * k) * z),
        );
        let b = &self.basis_adjoint * &a;
        let db = &self.basis_adjoint * &da;
        let d2b = &self.basis_adjoint * &d2a;
        // With unit-modulus entries, Re(a'ᴴa) = 0 and a''ᴴa = -‖a'‖², so only
        // the signal-subspace terms survive.
        let grad = -2.0 * db.dotc(&b).re;
        let hess = -2.0 * (d2b.dotc(&b).re + db.norm_squared());
        (
            DVector::from_element(1, grad),
            DMatrix::from_element(1, 1, hess),
        )
    }
}
