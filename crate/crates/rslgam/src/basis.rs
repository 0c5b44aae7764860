//! B-spline bases on equidistant clamped knots.
//!
//! Univariate bases use the Cox–de Boor recursion; derivatives come from the
//! analytic recurrence
//!
//! ```text
//! B'_{i,k}(t) = k * ( B_{i,k-1}(t) / (u_{i+k} - u_i)
//!                   - B_{i+1,k-1}(t) / (u_{i+k+1} - u_{i+1}) )
//! ```
//!
//! so that the derivative of a spline is the derivative basis times the same
//! coefficient vector. The spatio-temporal basis is a row-wise tensor product
//! of three univariate bases (longitude, latitude, time).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum BasisError {
    #[error("invalid knot span: lo ({lo}) must be strictly less than hi ({hi})")]
    InvalidSpan { lo: f64, hi: f64 },
    #[error("spline degree must be at least 1, got {0}")]
    InvalidDegree(usize),
    #[error("requested {requested} basis functions, but degree {degree} needs at least {min}")]
    TooFewBasisFunctions {
        requested: usize,
        degree: usize,
        min: usize,
    },
    #[error("point {value} lies outside the knot span [{lo}, {hi}] (no extrapolation)")]
    OutOfSpan { value: f64, lo: f64, hi: f64 },
    #[error("coordinate lists must have equal lengths: {lons} lons, {lats} lats, {times} times")]
    LengthMismatch {
        lons: usize,
        lats: usize,
        times: usize,
    },
}

/// Equidistant interior knots on `[lo, hi]` with clamped (repeated) boundary
/// knots, so the spline is well defined on the closed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    lo: f64,
    hi: f64,
    n_interior: usize,
    degree: usize,
}

impl KnotGrid {
    /// `n_interior` may be zero, which degenerates to a single Bernstein
    /// segment on `[lo, hi]`.
    pub fn new(lo: f64, hi: f64, n_interior: usize, degree: usize) -> Result<Self, BasisError> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(BasisError::InvalidSpan { lo, hi });
        }
        if degree < 1 {
            return Err(BasisError::InvalidDegree(degree));
        }
        Ok(Self {
            lo,
            hi,
            n_interior,
            degree,
        })
    }

    /// Cubic grid with a target basis-function count (`n_basis >= 4`).
    pub fn cubic(lo: f64, hi: f64, n_basis: usize) -> Result<Self, BasisError> {
        Self::with_basis_count(lo, hi, n_basis, 3)
    }

    /// Quadratic grid with a target basis-function count (`n_basis >= 3`).
    pub fn quadratic(lo: f64, hi: f64, n_basis: usize) -> Result<Self, BasisError> {
        Self::with_basis_count(lo, hi, n_basis, 2)
    }

    pub fn with_basis_count(
        lo: f64,
        hi: f64,
        n_basis: usize,
        degree: usize,
    ) -> Result<Self, BasisError> {
        if n_basis < degree + 1 {
            return Err(BasisError::TooFewBasisFunctions {
                requested: n_basis,
                degree,
                min: degree + 1,
            });
        }
        Self::new(lo, hi, n_basis - degree - 1, degree)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn n_basis(&self) -> usize {
        self.n_interior + self.degree + 1
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t <= self.hi
    }

    /// Full clamped knot vector of length `n_basis + degree + 1`.
    pub fn knots(&self) -> Vec<f64> {
        let mut knots = Vec::with_capacity(self.n_basis() + self.degree + 1);
        let step = (self.hi - self.lo) / (self.n_interior as f64 + 1.0);
        for _ in 0..=self.degree {
            knots.push(self.lo);
        }
        for i in 1..=self.n_interior {
            knots.push(self.lo + step * i as f64);
        }
        for _ in 0..=self.degree {
            knots.push(self.hi);
        }
        knots
    }

    /// Greville abscissae: coefficients equal to these points reproduce the
    /// identity function, which pins down the linear-precision property.
    pub fn greville_abscissae(&self) -> Vec<f64> {
        let knots = self.knots();
        (0..self.n_basis())
            .map(|i| knots[i + 1..i + 1 + self.degree].iter().sum::<f64>() / self.degree as f64)
            .collect()
    }

    /// Index `s` with `knots[s] <= t < knots[s+1]`; `t == hi` maps to the last
    /// non-empty interval.
    fn find_span(&self, t: f64) -> Result<usize, BasisError> {
        if !self.contains(t) || !t.is_finite() {
            return Err(BasisError::OutOfSpan {
                value: t,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let n_intervals = self.n_interior + 1;
        let step = (self.hi - self.lo) / n_intervals as f64;
        let mut k = ((t - self.lo) / step) as usize;
        if k >= n_intervals {
            k = n_intervals - 1;
        }
        // Float division may land one interval off near a knot; realign.
        let knots = self.knots();
        let mut span = self.degree + k;
        while span > self.degree && t < knots[span] {
            span -= 1;
        }
        while span + 1 < knots.len() - self.degree - 1 && t >= knots[span + 1] {
            span += 1;
        }
        Ok(span)
    }

    /// Values of the `degree + 1` basis functions that can be non-zero at `t`,
    /// returned with the index of the first one.
    fn nonzero_values(&self, t: f64) -> Result<(usize, Vec<f64>), BasisError> {
        let span = self.find_span(t)?;
        let knots = self.knots();
        Ok((
            span - self.degree,
            cox_de_boor(t, span, self.degree, &knots),
        ))
    }

    /// Same support layout as [`nonzero_values`](Self::nonzero_values) but for
    /// first derivatives.
    fn nonzero_derivatives(&self, t: f64) -> Result<(usize, Vec<f64>), BasisError> {
        let span = self.find_span(t)?;
        let knots = self.knots();
        let k = self.degree;
        // Non-zero (degree-1) basis functions at t: indices span-k+1 ..= span.
        let lower = if k >= 1 {
            cox_de_boor(t, span, k - 1, &knots)
        } else {
            vec![1.0]
        };
        let lower_at = |i: isize| -> f64 {
            let first = span as isize - (k as isize - 1);
            let off = i - first;
            if off < 0 || off >= lower.len() as isize {
                0.0
            } else {
                lower[off as usize]
            }
        };
        let mut out = vec![0.0; k + 1];
        for (r, slot) in out.iter_mut().enumerate() {
            let i = span - k + r;
            let denom_left = knots[i + k] - knots[i];
            let denom_right = knots[i + k + 1] - knots[i + 1];
            let left = if denom_left > 0.0 {
                lower_at(i as isize) / denom_left
            } else {
                0.0
            };
            let right = if denom_right > 0.0 {
                lower_at(i as isize + 1) / denom_right
            } else {
                0.0
            };
            *slot = k as f64 * (left - right);
        }
        Ok((span - k, out))
    }
}

/// Cox–de Boor recursion for the non-vanishing basis values at `t` in knot
/// interval `span`. Returns `degree + 1` values for indices
/// `span - degree ..= span`.
fn cox_de_boor(t: f64, span: usize, degree: usize, knots: &[f64]) -> Vec<f64> {
    let mut vals = vec![0.0; degree + 1];
    vals[0] = 1.0;
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = vals[r] / (right[r + 1] + left[j - r]);
            vals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        vals[j] = saved;
    }
    vals
}

/// What an evaluated basis matrix represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Regional,
    RegionalDerivative,
    LocalTensor,
    LocalTensorTimeDerivative,
}

/// Dense `n_points x n_basis` evaluation of a spline basis (or its time
/// derivative) at a list of points.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub kind: BasisKind,
}

impl BasisMatrix {
    pub fn n_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.values.ncols()
    }
}

/// Evaluate the univariate basis at each time point.
pub fn bspline_basis(times: &[f64], grid: &KnotGrid) -> Result<BasisMatrix, BasisError> {
    let mut values = DMatrix::zeros(times.len(), grid.n_basis());
    for (row, &t) in times.iter().enumerate() {
        let (first, vals) = grid.nonzero_values(t)?;
        for (off, v) in vals.iter().enumerate() {
            values[(row, first + off)] = *v;
        }
    }
    Ok(BasisMatrix {
        values,
        kind: BasisKind::Regional,
    })
}

/// Evaluate first derivatives of the univariate basis, so that
/// `derivative_basis * beta` is the time derivative of `basis * beta`.
pub fn bspline_derivative_basis(times: &[f64], grid: &KnotGrid) -> Result<BasisMatrix, BasisError> {
    if grid.degree() < 1 {
        return Err(BasisError::InvalidDegree(grid.degree()));
    }
    let mut values = DMatrix::zeros(times.len(), grid.n_basis());
    for (row, &t) in times.iter().enumerate() {
        let (first, vals) = grid.nonzero_derivatives(t)?;
        for (off, v) in vals.iter().enumerate() {
            values[(row, first + off)] = *v;
        }
    }
    Ok(BasisMatrix {
        values,
        kind: BasisKind::RegionalDerivative,
    })
}

/// Knot grids for the three tensor factors of the local field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorGrids {
    pub lon: KnotGrid,
    pub lat: KnotGrid,
    pub time: KnotGrid,
}

impl TensorGrids {
    pub fn n_basis(&self) -> usize {
        self.lon.n_basis() * self.lat.n_basis() * self.time.n_basis()
    }
}

/// Row-wise tensor-product basis: row i is
/// `kron(b_lon(lon_i), b_lat(lat_i), b_time(t_i))`.
pub fn tensor_basis(
    lons: &[f64],
    lats: &[f64],
    times: &[f64],
    grids: &TensorGrids,
) -> Result<BasisMatrix, BasisError> {
    tensor_impl(lons, lats, times, grids, false)
}

/// Tensor basis with the time factor replaced by its derivative basis, used
/// for rates of change of the local field.
pub fn tensor_time_derivative_basis(
    lons: &[f64],
    lats: &[f64],
    times: &[f64],
    grids: &TensorGrids,
) -> Result<BasisMatrix, BasisError> {
    tensor_impl(lons, lats, times, grids, true)
}

fn tensor_impl(
    lons: &[f64],
    lats: &[f64],
    times: &[f64],
    grids: &TensorGrids,
    time_derivative: bool,
) -> Result<BasisMatrix, BasisError> {
    if lons.len() != lats.len() || lons.len() != times.len() {
        return Err(BasisError::LengthMismatch {
            lons: lons.len(),
            lats: lats.len(),
            times: times.len(),
        });
    }
    let (n_lat, n_time) = (grids.lat.n_basis(), grids.time.n_basis());
    let mut values = DMatrix::zeros(lons.len(), grids.n_basis());
    for row in 0..lons.len() {
        let (lon_first, lon_vals) = grids.lon.nonzero_values(lons[row])?;
        let (lat_first, lat_vals) = grids.lat.nonzero_values(lats[row])?;
        let (time_first, time_vals) = if time_derivative {
            grids.time.nonzero_derivatives(times[row])?
        } else {
            grids.time.nonzero_values(times[row])?
        };
        for (a, &bu) in lon_vals.iter().enumerate() {
            for (b, &bv) in lat_vals.iter().enumerate() {
                let base = ((lon_first + a) * n_lat + (lat_first + b)) * n_time + time_first;
                for (c, &bw) in time_vals.iter().enumerate() {
                    values[(row, base + c)] = bu * bv * bw;
                }
            }
        }
    }
    Ok(BasisMatrix {
        values,
        kind: if time_derivative {
            BasisKind::LocalTensorTimeDerivative
        } else {
            BasisKind::LocalTensor
        },
    })
}
