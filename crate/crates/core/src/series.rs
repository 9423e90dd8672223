//! Temporal aggregation and forecast/residual layouts.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};
use crate::structures::{Structure, Tew};

/// Result of [`aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated<T> {
    pub values: Vec<T>,
    /// Observations in the incomplete trailing block that were dropped.
    pub dropped: usize,
}

/// Non-overlapping temporal aggregation of order `k`.
pub fn aggregate<T: Real>(series: &[T], k: usize, tew: Tew) -> Result<Aggregated<T>> {
    if k == 0 {
        return Err(Error::AggregationOrder("order must be positive".into()));
    }
    let w = tew.block_weights::<T>(k);
    let values = series
        .chunks_exact(k)
        .map(|block| block.iter().zip(&w).fold(T::zero(), |s, (x, w)| s + *x * *w))
        .collect();
    Ok(Aggregated {
        values,
        dropped: series.len() % k,
    })
}

/// `n × q` forecast matrix, one row per series, columns ordered by level
/// (most aggregated first) and by time within each level.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet<T: Real> {
    values: DMatrix<T>,
    orders: Vec<usize>,
    horizon: usize,
}

impl<T: Real> ForecastSet<T> {
    /// Wraps a matrix laid out for `structure`; the horizon is inferred.
    pub fn new(values: DMatrix<T>, structure: &Structure<T>) -> Result<Self> {
        let (n, q) = values.shape();
        if n != structure.n() {
            return Err(Error::dim("forecast rows (series)", structure.n(), n));
        }
        let kt = structure.kt();
        if q == 0 || q % kt != 0 {
            return Err(Error::dim("forecast columns", format!("a positive multiple of {kt}"), q));
        }
        Ok(Self {
            values,
            orders: structure.te().orders().to_vec(),
            horizon: q / kt,
        })
    }

    /// Builds a forecast set from per-period vectors.
    pub fn from_periods(periods: &[DVector<T>], structure: &Structure<T>) -> Result<Self> {
        if periods.is_empty() {
            return Err(Error::Empty { what: "forecast".into() });
        }
        let h = periods.len();
        let mut fs = Self {
            values: DMatrix::zeros(structure.n(), h * structure.kt()),
            orders: structure.te().orders().to_vec(),
            horizon: h,
        };
        for (i, p) in periods.iter().enumerate() {
            fs.set_period(i, p.as_slice())?;
        }
        Ok(fs)
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<T> {
        self.values
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn m(&self) -> usize {
        self.orders[0]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    fn kt(&self) -> usize {
        self.orders.iter().map(|k| self.m() / k).sum()
    }

    /// Column of value `j` of level `k` in period `h`, and the per-period offset.
    fn column_map(&self) -> Vec<(usize, usize)> {
        // (per-period offset, first column of level block)
        let h = self.horizon;
        let mut off = 0;
        self.orders
            .iter()
            .map(|&k| {
                let w = self.m() / k;
                let entry = (off, off * h);
                off += w;
                entry
            })
            .collect()
    }

    /// Per-period vector of step `h` (series-major, levels within series).
    pub fn period(&self, h: usize) -> DVector<T> {
        let kt = self.kt();
        let mut out = DVector::zeros(self.n() * kt);
        for (lvl, &(off, start)) in self.column_map().iter().enumerate() {
            let w = self.m() / self.orders[lvl];
            for i in 0..self.n() {
                for j in 0..w {
                    out[i * kt + off + j] = self.values[(i, start + h * w + j)];
                }
            }
        }
        out
    }

    pub fn periods(&self) -> Vec<DVector<T>> {
        (0..self.horizon).map(|h| self.period(h)).collect()
    }

    pub fn set_period(&mut self, h: usize, x: &[T]) -> Result<()> {
        let kt = self.kt();
        if x.len() != self.n() * kt {
            return Err(Error::dim("period vector", self.n() * kt, x.len()));
        }
        for (lvl, (off, start)) in self.column_map().into_iter().enumerate() {
            let w = self.m() / self.orders[lvl];
            for i in 0..self.n() {
                for j in 0..w {
                    self.values[(i, start + h * w + j)] = x[i * kt + off + j];
                }
            }
        }
        Ok(())
    }

    /// Splits the columns by aggregation order.
    pub fn to_level_blocks(&self) -> BTreeMap<usize, DMatrix<T>> {
        let h = self.horizon;
        self.column_map()
            .into_iter()
            .zip(&self.orders)
            .map(|((_, start), &k)| {
                let w = h * self.m() / k;
                (k, self.values.columns(start, w).into_owned())
            })
            .collect()
    }

    /// Inverse of [`to_level_blocks`](Self::to_level_blocks); `m` is the largest key.
    pub fn from_level_blocks(blocks: &BTreeMap<usize, DMatrix<T>>) -> Result<Self> {
        let (&m, top) = blocks.iter().next_back().ok_or(Error::Empty {
            what: "level blocks".into(),
        })?;
        if !blocks.contains_key(&1) {
            return Err(Error::AggregationOrder("level blocks must include order 1".into()));
        }
        if let Some(k) = blocks.keys().find(|&&k| k == 0 || m % k != 0) {
            return Err(Error::AggregationOrder(format!("{k} does not divide {m}")));
        }
        let n = top.nrows();
        let h = top.ncols();
        if h == 0 {
            return Err(Error::Empty { what: "level blocks".into() });
        }
        let orders: Vec<usize> = blocks.keys().rev().copied().collect();
        let q: usize = orders.iter().map(|k| h * m / k).sum();
        let mut values = DMatrix::zeros(n, q);
        let mut start = 0;
        for &k in &orders {
            let b = &blocks[&k];
            let w = h * m / k;
            if b.nrows() != n || b.ncols() != w {
                return Err(Error::dim(
                    format!("level block k{k}"),
                    format!("{n}x{w}"),
                    format!("{}x{}", b.nrows(), b.ncols()),
                ));
            }
            values.columns_mut(start, w).copy_from(b);
            start += w;
        }
        Ok(Self {
            values,
            orders,
            horizon: h,
        })
    }

    /// Column header names `k<order>_<j>` (1-based `j`).
    pub fn column_names(&self) -> Vec<String> {
        self.orders
            .iter()
            .flat_map(|&k| (1..=self.horizon * self.m() / k).map(move |j| format!("k{k}_{j}")))
            .collect()
    }
}

/// Whether residuals are in-sample fit errors or out-of-sample errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualKind {
    #[default]
    InSample,
    Validation,
}

/// Residual matrix with one row per period and one column per per-period variable.
#[derive(Debug, Clone)]
pub struct ResidualSet<T: Real> {
    values: DMatrix<T>,
    kind: ResidualKind,
    excluded: usize,
}

impl<T: Real> ResidualSet<T> {
    /// Rows containing a non-finite value are dropped; their count is kept.
    pub fn new(values: DMatrix<T>, kind: ResidualKind) -> Self {
        let keep: Vec<usize> = (0..values.nrows())
            .filter(|&r| values.row(r).iter().all(|v| v.is_finite()))
            .collect();
        let excluded = values.nrows() - keep.len();
        let values = if excluded == 0 {
            values
        } else {
            DMatrix::from_fn(keep.len(), values.ncols(), |i, j| values[(keep[i], j)])
        };
        Self { values, kind, excluded }
    }

    /// Residuals in forecast layout (`n × N·kt`), one period per row after conversion.
    pub fn from_forecast_layout(values: DMatrix<T>, structure: &Structure<T>, kind: ResidualKind) -> Result<Self> {
        let fs = ForecastSet::new(values, structure)?;
        let d = structure.dim();
        let rows = fs.horizon();
        let mut out = DMatrix::zeros(rows, d);
        for h in 0..rows {
            out.row_mut(h).copy_from(&fs.period(h).transpose());
        }
        Ok(Self::new(out, kind))
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn kind(&self) -> ResidualKind {
        self.kind
    }

    /// Rows dropped because of non-finite entries.
    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// Keeps only the listed columns.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self {
            values: DMatrix::from_fn(self.rows(), cols.len(), |i, j| self.values[(i, cols[j])]),
            kind: self.kind,
            excluded: self.excluded,
        }
    }

    /// Mean of each column.
    pub fn column_means(&self) -> DVector<T> {
        let t = lit::<T>(self.rows() as f64);
        DVector::from_fn(self.cols(), |j, _| self.values.column(j).sum() / t)
    }
}
