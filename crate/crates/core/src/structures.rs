//! Cross-sectional, temporal and cross-temporal constraint descriptions.
//!
//! All three frameworks share one per-period representation. A
//! cross-sectional structure is treated as cross-temporal with a single
//! temporal level (`m = 1`) and a temporal one as cross-temporal with a single
//! series. The per-period vector has length `n * kt` with `kt = Σ_k m/k` and
//! is laid out series-major, levels from the most aggregated to `k = 1`
//! within each series.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, rref};
use crate::scalar::{lit, to_f64, Real};

/// How high-frequency values are combined into a temporal aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tew {
    #[default]
    Sum,
    Avg,
    First,
    Last,
}

impl Tew {
    /// Weights of one aggregation block of length `k`.
    pub fn block_weights<T: Real>(self, k: usize) -> Vec<T> {
        let mut w = vec![T::zero(); k];
        match self {
            Tew::Sum => w.iter_mut().for_each(|v| *v = T::one()),
            Tew::Avg => {
                let v = T::one() / lit::<T>(k as f64);
                w.iter_mut().for_each(|x| *x = v);
            }
            Tew::First => w[0] = T::one(),
            Tew::Last => w[k - 1] = T::one(),
        }
        w
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tew::Sum => "sum",
            Tew::Avg => "avg",
            Tew::First => "first",
            Tew::Last => "last",
        }
    }
}

impl FromStr for Tew {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Tew::Sum),
            "avg" => Ok(Tew::Avg),
            "first" => Ok(Tew::First),
            "last" => Ok(Tew::Last),
            _ => Err(Error::Options(format!("unknown tew `{s}` (expected sum, avg, first or last)"))),
        }
    }
}

impl fmt::Display for Tew {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which constraints a structure carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Cs,
    Te,
    Ct,
}

impl Framework {
    pub fn as_str(self) -> &'static str {
        match self {
            Framework::Cs => "cs",
            Framework::Te => "te",
            Framework::Ct => "ct",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Framework::Cs => "Cross-sectional",
            Framework::Te => "Temporal",
            Framework::Ct => "Cross-temporal",
        }
    }
}

impl FromStr for Framework {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cs" => Ok(Framework::Cs),
            "te" => Ok(Framework::Te),
            "ct" => Ok(Framework::Ct),
            _ => Err(Error::Options(format!("unknown framework `{s}` (expected cs, te or ct)"))),
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Upper series expressed as linear combinations of bottom series.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionalStructure<T: Real> {
    agg_mat: DMatrix<T>,
    cons_mat: DMatrix<T>,
    labels: Vec<String>,
    source_columns: Vec<usize>,
}

fn default_labels(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("y{i}")).collect()
}

impl<T: Real> CrossSectionalStructure<T> {
    /// Builds the structure from an `n_u × n_b` aggregation matrix.
    pub fn from_agg(agg_mat: DMatrix<T>, labels: Option<Vec<String>>) -> Result<Self> {
        let (nu, nb) = agg_mat.shape();
        if nu == 0 || nb == 0 {
            return Err(Error::Empty {
                what: "aggregation matrix".into(),
            });
        }
        if agg_mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "aggregation matrix".into(),
            });
        }
        let n = nu + nb;
        let labels = check_labels(labels, n)?;
        let mut cons_mat = DMatrix::<T>::zeros(nu, n);
        for i in 0..nu {
            cons_mat[(i, i)] = T::one();
            for j in 0..nb {
                cons_mat[(i, nu + j)] = -agg_mat[(i, j)];
            }
        }
        Ok(Self {
            agg_mat,
            cons_mat,
            labels,
            source_columns: (0..n).collect(),
        })
    }

    /// Recovers an aggregation matrix from a zero-constraint matrix.
    ///
    /// Pivot columns of the reduced row echelon form become upper series and
    /// the remaining columns bottom series. The structure is stored in
    /// `[upper; bottom]` order; [`source_columns`](Self::source_columns) maps
    /// each stored series back to its input column.
    pub fn from_cons(cons_mat: &DMatrix<T>, labels: Option<Vec<String>>) -> Result<Self> {
        let (rows, cols) = cons_mat.shape();
        if rows == 0 || cols == 0 {
            return Err(Error::Empty {
                what: "constraint matrix".into(),
            });
        }
        if cons_mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "constraint matrix".into(),
            });
        }
        let labels = check_labels(labels, cols)?;
        let r = rref(cons_mat, 1e-10);
        if r.rank() < rows || r.rank() == cols {
            return Err(Error::RankDeficient {
                rank: r.rank(),
                rows,
                cols,
            });
        }
        let upper = r.pivots.clone();
        let bottom = r.free_columns();
        let mut agg = DMatrix::<T>::zeros(upper.len(), bottom.len());
        for i in 0..upper.len() {
            for (j, &c) in bottom.iter().enumerate() {
                let v = r.reduced[(i, c)];
                agg[(i, j)] = if v == T::zero() { T::zero() } else { -v };
            }
        }
        let order: Vec<usize> = upper.iter().chain(bottom.iter()).copied().collect();
        let labels = order.iter().map(|&c| labels[c].clone()).collect();
        let mut out = Self::from_agg(agg, Some(labels))?;
        out.source_columns = order;
        Ok(out)
    }

    /// One series and no constraints; the cross-sectional part of a purely
    /// temporal structure.
    pub(crate) fn single(label: Option<String>) -> Self {
        Self {
            agg_mat: DMatrix::zeros(0, 1),
            cons_mat: DMatrix::zeros(0, 1),
            labels: vec![label.unwrap_or_else(|| "y1".into())],
            source_columns: vec![0],
        }
    }

    pub fn agg_mat(&self) -> &DMatrix<T> {
        &self.agg_mat
    }

    pub fn cons_mat(&self) -> &DMatrix<T> {
        &self.cons_mat
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Input column of each stored series (identity unless built from a
    /// permuted constraint matrix).
    pub fn source_columns(&self) -> &[usize] {
        &self.source_columns
    }

    pub fn n(&self) -> usize {
        self.agg_mat.nrows() + self.agg_mat.ncols()
    }

    pub fn n_upper(&self) -> usize {
        self.agg_mat.nrows()
    }

    pub fn n_bottom(&self) -> usize {
        self.agg_mat.ncols()
    }

    /// `[A; I]`.
    pub fn summing_matrix(&self) -> DMatrix<T> {
        let (nu, nb) = self.agg_mat.shape();
        let mut s = DMatrix::<T>::zeros(nu + nb, nb);
        s.view_mut((0, 0), (nu, nb)).copy_from(&self.agg_mat);
        s.view_mut((nu, 0), (nb, nb)).fill_with_identity();
        s
    }

    /// Bottom series (0-based bottom indices) with a non-zero weight in upper row `i`.
    pub fn support(&self, i: usize) -> Vec<usize> {
        (0..self.n_bottom()).filter(|&j| self.agg_mat[(i, j)] != T::zero()).collect()
    }

    /// Nesting depth of each upper row: 0 for rows whose support is not
    /// contained in any other row's support, otherwise one more than the
    /// deepest strict superset.
    pub fn upper_depths(&self) -> Vec<usize> {
        let nu = self.n_upper();
        let supports: Vec<Vec<usize>> = (0..nu).map(|i| self.support(i)).collect();
        let mut order: Vec<usize> = (0..nu).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(supports[i].len()));
        let mut depth = vec![0usize; nu];
        for (pos, &i) in order.iter().enumerate() {
            for &j in &order[..pos] {
                let strict = supports[j].len() > supports[i].len()
                    && supports[i].iter().all(|b| supports[j].binary_search(b).is_ok());
                if strict {
                    depth[i] = depth[i].max(depth[j] + 1);
                }
            }
        }
        depth
    }
}

fn check_labels(labels: Option<Vec<String>>, n: usize) -> Result<Vec<String>> {
    match labels {
        None => Ok(default_labels(n)),
        Some(l) if l.len() == n => Ok(l),
        Some(l) => Err(Error::dim("series labels", n, l.len())),
    }
}

/// Temporal hierarchy over one top-level period of `m` high-frequency steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalStructure<T: Real> {
    m: usize,
    orders: Vec<usize>,
    tew: Tew,
    agg_mat: DMatrix<T>,
    cons_mat: DMatrix<T>,
}

/// Aggregation-order input: a maximum order or an explicit set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AggOrder {
    Max(usize),
    List(Vec<usize>),
}

impl FromStr for AggOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        let parse = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::AggregationOrder(format!("`{p}` is not a positive integer")))
        };
        match parts.as_slice() {
            [] => Err(Error::AggregationOrder("empty".into())),
            [one] => Ok(AggOrder::Max(parse(one)?)),
            many => Ok(AggOrder::List(many.iter().map(|p| parse(p)).collect::<Result<_>>()?)),
        }
    }
}

impl<T: Real> TemporalStructure<T> {
    pub fn new(agg_order: &AggOrder, tew: Tew) -> Result<Self> {
        let orders = match agg_order {
            AggOrder::Max(m) => {
                if *m < 2 {
                    return Err(Error::AggregationOrder(format!("maximum order must be at least 2, got {m}")));
                }
                (1..=*m).rev().filter(|k| m % k == 0).collect::<Vec<_>>()
            }
            AggOrder::List(list) => {
                let m = list.iter().copied().max().unwrap_or(0);
                if m < 2 {
                    return Err(Error::AggregationOrder(format!("maximum order must be at least 2, got {m}")));
                }
                if let Some(k) = list.iter().find(|&&k| k == 0 || m % k != 0) {
                    return Err(Error::AggregationOrder(format!("{k} does not divide {m}")));
                }
                let mut k: Vec<usize> = list.clone();
                k.push(1);
                k.sort_unstable_by(|a, b| b.cmp(a));
                k.dedup();
                k
            }
        };
        Ok(Self::from_orders(orders, tew))
    }

    /// Single level `m = 1`; the temporal part of a cross-sectional structure.
    pub(crate) fn single() -> Self {
        Self::from_orders(vec![1], Tew::Sum)
    }

    fn from_orders(orders: Vec<usize>, tew: Tew) -> Self {
        let m = orders[0];
        let rows: usize = orders.iter().filter(|&&k| k > 1).map(|k| m / k).sum();
        let mut agg = DMatrix::<T>::zeros(rows, m);
        let mut r = 0;
        for &k in orders.iter().filter(|&&k| k > 1) {
            let w = tew.block_weights::<T>(k);
            for j in 0..m / k {
                for (t, wt) in w.iter().enumerate() {
                    agg[(r, j * k + t)] = *wt;
                }
                r += 1;
            }
        }
        let mut cons = DMatrix::<T>::zeros(rows, rows + m);
        for i in 0..rows {
            cons[(i, i)] = T::one();
            for j in 0..m {
                cons[(i, rows + j)] = -agg[(i, j)];
            }
        }
        Self {
            m,
            orders,
            tew,
            agg_mat: agg,
            cons_mat: cons,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Aggregation orders, descending.
    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn p(&self) -> usize {
        self.orders.len()
    }

    pub fn tew(&self) -> Tew {
        self.tew
    }

    pub fn agg_mat(&self) -> &DMatrix<T> {
        &self.agg_mat
    }

    pub fn cons_mat(&self) -> &DMatrix<T> {
        &self.cons_mat
    }

    /// Values per top-level period across all levels, `Σ_k m/k`.
    pub fn kt(&self) -> usize {
        self.orders.iter().map(|k| self.m / k).sum()
    }

    /// Position of the first level-`k` value inside one period.
    pub fn offset(&self, k: usize) -> Option<usize> {
        let mut off = 0;
        for &o in &self.orders {
            if o == k {
                return Some(off);
            }
            off += self.m / o;
        }
        None
    }

    /// `[A_te; I_m]`.
    pub fn summing_matrix(&self) -> DMatrix<T> {
        let r = self.agg_mat.nrows();
        let mut s = DMatrix::<T>::zeros(r + self.m, self.m);
        s.view_mut((0, 0), (r, self.m)).copy_from(&self.agg_mat);
        s.view_mut((r, 0), (self.m, self.m)).fill_with_identity();
        s
    }

    /// Order and within-level index of each position of a period.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.orders
            .iter()
            .flat_map(|&k| (0..self.m / k).map(move |j| (k, j)))
            .collect()
    }
}

/// Zero-constraint system of one period: `x = S b` for the free
/// (bottom, high-frequency) variables `b`, equivalently `C x = 0`.
#[derive(Debug, Clone)]
pub struct LinearConstraints<T: Real> {
    /// Per-period indices of the free variables, ascending, in column order of `s`.
    pub free: Vec<usize>,
    /// Remaining indices, ascending, in row order of `c`.
    pub bound: Vec<usize>,
    /// `d × free.len()` summing matrix.
    pub s: DMatrix<T>,
    /// `bound.len() × d` constraint matrix of full row rank.
    pub c: DMatrix<T>,
}

impl<T: Real> LinearConstraints<T> {
    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    /// `max_i |(C x)_i|`.
    pub fn residual_inf(&self, x: &[T]) -> T {
        let mut worst = T::zero();
        for r in 0..self.c.nrows() {
            let mut s = T::zero();
            for (j, v) in x.iter().enumerate() {
                let c = self.c[(r, j)];
                if c != T::zero() {
                    s += c * *v;
                }
            }
            worst = worst.max(s.abs());
        }
        worst
    }
}

/// A validated cs, te or ct structure.
#[derive(Debug, Clone)]
pub struct Structure<T: Real> {
    framework: Framework,
    cs: CrossSectionalStructure<T>,
    te: TemporalStructure<T>,
    constraints: LinearConstraints<T>,
}

impl<T: Real> Structure<T> {
    pub fn cross_sectional(cs: CrossSectionalStructure<T>) -> Self {
        Self::assemble(Framework::Cs, cs, TemporalStructure::single())
    }

    pub fn temporal(te: TemporalStructure<T>) -> Self {
        Self::assemble(Framework::Te, CrossSectionalStructure::single(None), te)
    }

    pub fn cross_temporal(cs: CrossSectionalStructure<T>, te: TemporalStructure<T>) -> Self {
        Self::assemble(Framework::Ct, cs, te)
    }

    fn assemble(framework: Framework, cs: CrossSectionalStructure<T>, te: TemporalStructure<T>) -> Self {
        let s = kron(&cs.summing_matrix(), &te.summing_matrix());
        let (n, kt, m, nu) = (cs.n(), te.kt(), te.m(), cs.n_upper());
        let low = kt - m;
        let free: Vec<usize> = (nu..n).flat_map(|i| (0..m).map(move |t| i * kt + low + t)).collect();
        let mut is_free = vec![false; n * kt];
        free.iter().for_each(|&f| is_free[f] = true);
        let bound: Vec<usize> = (0..n * kt).filter(|&v| !is_free[v]).collect();
        let mut c = DMatrix::<T>::zeros(bound.len(), n * kt);
        for (r, &v) in bound.iter().enumerate() {
            c[(r, v)] = T::one();
            for (col, &f) in free.iter().enumerate() {
                let a = s[(v, col)];
                if a != T::zero() {
                    c[(r, f)] = -a;
                }
            }
        }
        Self {
            framework,
            cs,
            te,
            constraints: LinearConstraints { free, bound, s, c },
        }
    }

    pub fn framework(&self) -> Framework {
        self.framework
    }

    pub fn cs(&self) -> &CrossSectionalStructure<T> {
        &self.cs
    }

    pub fn te(&self) -> &TemporalStructure<T> {
        &self.te
    }

    pub fn constraints(&self) -> &LinearConstraints<T> {
        &self.constraints
    }

    /// Constraint matrix over one period.
    pub fn cons_mat(&self) -> &DMatrix<T> {
        &self.constraints.c
    }

    /// Summing matrix over one period.
    pub fn summing_matrix(&self) -> &DMatrix<T> {
        &self.constraints.s
    }

    pub fn n(&self) -> usize {
        self.cs.n()
    }

    pub fn m(&self) -> usize {
        self.te.m()
    }

    pub fn kt(&self) -> usize {
        self.te.kt()
    }

    /// Variables per period, `n * kt`.
    pub fn dim(&self) -> usize {
        self.cs.n() * self.te.kt()
    }

    pub fn n_free(&self) -> usize {
        self.constraints.free.len()
    }

    /// Per-period index of value `j` of level `k` for series `series`.
    pub fn index(&self, series: usize, k: usize, j: usize) -> Result<usize> {
        if series >= self.n() {
            return Err(Error::dim("series index", format!("< {}", self.n()), series));
        }
        let off = self
            .te
            .offset(k)
            .ok_or_else(|| Error::AggregationOrder(format!("order {k} is not in {:?}", self.te.orders())))?;
        if j >= self.m() / k {
            return Err(Error::dim(format!("position at order {k}"), format!("< {}", self.m() / k), j));
        }
        Ok(series * self.kt() + off + j)
    }

    /// Series, order and position of a per-period index.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let kt = self.kt();
        let (series, mut r) = (index / kt, index % kt);
        for &k in self.te.orders() {
            let w = self.m() / k;
            if r < w {
                return (series, k, r);
            }
            r -= w;
        }
        unreachable!("index within period")
    }

    /// Human-readable name of a per-period index, e.g. `y2_k4_1` (1-based position).
    pub fn label(&self, index: usize) -> String {
        let (i, k, j) = self.locate(index);
        let name = &self.cs.labels()[i];
        match self.framework {
            Framework::Cs => name.clone(),
            _ => format!("{name}_k{k}_{}", j + 1),
        }
    }

    /// Serializable description `{labels, agg_mat, orders, tew}`.
    pub fn describe(&self) -> StructureDescription {
        let with_cs = self.framework != Framework::Te;
        let with_te = self.framework != Framework::Cs;
        StructureDescription {
            labels: Some(self.cs.labels().to_vec()),
            agg_mat: with_cs.then(|| {
                let a = self.cs.agg_mat();
                (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| to_f64(a[(i, j)])).collect()).collect()
            }),
            orders: with_te.then(|| self.te.orders().to_vec()),
            tew: with_te.then_some(self.te.tew()),
        }
    }

    pub fn from_description(desc: &StructureDescription) -> Result<Self> {
        let cs = match &desc.agg_mat {
            Some(rows) => {
                let nu = rows.len();
                let nb = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != nb) {
                    return Err(Error::Options("agg_mat rows have different lengths".into()));
                }
                let a = DMatrix::from_fn(nu, nb, |i, j| lit::<T>(rows[i][j]));
                Some(CrossSectionalStructure::from_agg(a, desc.labels.clone())?)
            }
            None => None,
        };
        let te = match &desc.orders {
            Some(o) => Some(TemporalStructure::new(&AggOrder::List(o.clone()), desc.tew.unwrap_or_default())?),
            None => None,
        };
        match (cs, te) {
            (Some(cs), Some(te)) => Ok(Self::cross_temporal(cs, te)),
            (Some(cs), None) => Ok(Self::cross_sectional(cs)),
            (None, Some(te)) => {
                let label = desc.labels.as_ref().and_then(|l| l.first().cloned());
                Ok(Self::assemble(Framework::Te, CrossSectionalStructure::single(label), te))
            }
            (None, None) => Err(Error::Options("structure description needs agg_mat and/or orders".into())),
        }
    }
}

/// JSON form of a structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureDescription {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agg_mat: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orders: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tew: Option<Tew>,
}

pub fn build_cs_from_agg<T: Real>(agg_mat: DMatrix<T>, labels: Option<Vec<String>>) -> Result<CrossSectionalStructure<T>> {
    CrossSectionalStructure::from_agg(agg_mat, labels)
}

pub fn build_cs_from_cons<T: Real>(cons_mat: &DMatrix<T>) -> Result<CrossSectionalStructure<T>> {
    CrossSectionalStructure::from_cons(cons_mat, None)
}

pub fn build_te<T: Real>(agg_order: &AggOrder, tew: Tew) -> Result<TemporalStructure<T>> {
    TemporalStructure::new(agg_order, tew)
}

pub fn build_ct<T: Real>(cs: CrossSectionalStructure<T>, te: TemporalStructure<T>) -> Structure<T> {
    Structure::cross_temporal(cs, te)
}
