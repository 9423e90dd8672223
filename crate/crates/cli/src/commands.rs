//! Subcommand implementations. Each one loads its inputs, calls the library
//! and writes the outputs; no numerical work happens here.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use coherent::covariance::CovarianceMatrix;
use coherent::lcc::LccOptions;
use coherent::ml::{FitOptions, FittedReconciler, Learner, TrainingTable, Tuning};
use coherent::probabilistic::{reconcile_gaussian, reconcile_samples, BaseCovariance, SampleForecast};
use coherent::structures::StructureDescription;
use coherent::{
    AggOrder, Approach, Bound, CrossSectionalStructure, Estimator, ForecastSet, Framework, LsReconciler, NonNegative,
    ReconciliationOptions, ResidualKind, ResidualSet, Structure, TemporalStructure, Tew,
};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::diagnostics::Diagnostics;
use crate::io::{read_matrix, read_table, write_matrix, write_text};
use crate::options::{grids, index_list, key_values, parse, parse_opt, Merged};
use crate::{CliError, Method, RunOptions};

type Res<T> = Result<T, CliError>;

fn core_err(ctx: impl std::fmt::Display) -> impl FnOnce(coherent::Error) -> CliError {
    move |e| CliError::from_core(&ctx.to_string(), e)
}

fn flag_file(flag: &str, path: &Path) -> String {
    format!("--{flag} {}", path.display())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, why: &str) -> Res<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::validation(format!("--{flag} is required {why}")))
}

/// Structure plus the map from stored series order to input row order
/// (they differ when the structure comes from a permuted constraint matrix).
pub struct Setup {
    pub structure: Structure<f64>,
    source: Vec<usize>,
}

impl Setup {
    pub fn build(framework: Framework, o: &RunOptions) -> Res<Self> {
        let labels: Option<Vec<String>> = o
            .labels
            .as_ref()
            .map(|l| l.split(',').map(|s| s.trim().to_string()).collect());
        let cs = match framework {
            Framework::Te => None,
            _ => Some(match (&o.agg_mat, &o.cons_mat) {
                (Some(p), None) => {
                    CrossSectionalStructure::from_agg(read_matrix(p, "--agg-mat")?, labels.clone()).map_err(core_err(flag_file("agg-mat", p)))?
                }
                (None, Some(p)) => CrossSectionalStructure::from_cons(&read_matrix(p, "--cons-mat")?, labels.clone())
                    .map_err(core_err(flag_file("cons-mat", p)))?,
                (Some(_), Some(_)) => return Err(CliError::validation("--agg-mat and --cons-mat are mutually exclusive")),
                (None, None) => {
                    return Err(CliError::validation(format!(
                        "the {} framework needs --agg-mat or --cons-mat",
                        framework.as_str()
                    )))
                }
            }),
        };
        let te = match framework {
            Framework::Cs => None,
            _ => {
                let order = o.agg_order.as_ref().ok_or_else(|| {
                    CliError::validation(format!("--agg-order is required for the {} framework", framework.as_str()))
                })?;
                let order: AggOrder = parse(order, "agg-order")?;
                let tew: Tew = parse_opt(&o.tew, "tew", Tew::Sum)?;
                Some(TemporalStructure::new(&order, tew).map_err(core_err("--agg-order"))?)
            }
        };
        let structure = match (cs, te) {
            (Some(cs), None) => Structure::cross_sectional(cs),
            (Some(cs), Some(te)) => Structure::cross_temporal(cs, te),
            (None, Some(te)) => {
                let desc = StructureDescription {
                    labels: labels.map(|l| l.into_iter().take(1).collect()),
                    agg_mat: None,
                    orders: Some(te.orders().to_vec()),
                    tew: Some(te.tew()),
                };
                Structure::from_description(&desc).map_err(core_err("--labels"))?
            }
            (None, None) => unreachable!(),
        };
        let source = structure.cs().source_columns().to_vec();
        Ok(Self { structure, source })
    }

    fn permuted(&self) -> bool {
        self.source.iter().enumerate().any(|(i, &s)| i != s)
    }

    /// Stored position of input series `input` (0-based).
    fn stored_series(&self, input: usize) -> Option<usize> {
        self.source.iter().position(|&s| s == input)
    }

    /// Rows in input series order to stored order.
    fn rows_in(&self, m: DMatrix<f64>) -> DMatrix<f64> {
        if !self.permuted() || m.nrows() != self.source.len() {
            return m;
        }
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(self.source[i], j)])
    }

    fn rows_out(&self, m: DMatrix<f64>) -> DMatrix<f64> {
        if !self.permuted() {
            return m;
        }
        let mut out = m.clone();
        for (i, &s) in self.source.iter().enumerate() {
            out.row_mut(s).copy_from(&m.row(i));
        }
        out
    }

    /// Input per-period index of each stored per-period index.
    fn period_map(&self) -> Vec<usize> {
        let kt = self.structure.kt();
        (0..self.structure.dim()).map(|i| self.source[i / kt] * kt + i % kt).collect()
    }

    /// Per-period columns (blocks of `d`) in input order to stored order.
    fn columns_in(&self, m: DMatrix<f64>) -> DMatrix<f64> {
        if !self.permuted() {
            return m;
        }
        let map = self.period_map();
        let d = map.len();
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, (j / d) * d + map[j % d])])
    }

    fn columns_out(&self, m: DMatrix<f64>) -> DMatrix<f64> {
        if !self.permuted() {
            return m;
        }
        let map = self.period_map();
        let d = map.len();
        let mut out = m.clone();
        for j in 0..m.ncols() {
            out.column_mut((j / d) * d + map[j % d]).copy_from(&m.column(j));
        }
        out
    }

    fn square_in(&self, m: DMatrix<f64>) -> DMatrix<f64> {
        self.columns_in(self.columns_in(m).transpose()).transpose()
    }

    fn square_out(&self, m: DMatrix<f64>) -> DMatrix<f64> {
        self.columns_out(self.columns_out(m).transpose()).transpose()
    }

    fn forecast(&self, path: &Path, flag: &str) -> Res<ForecastSet<f64>> {
        let values = self.rows_in(read_matrix(path, &format!("--{flag}"))?);
        ForecastSet::new(values, &self.structure).map_err(core_err(flag_file(flag, path)))
    }

    /// Per-period indices named in a CSV of (series, k, j) columns, as far as
    /// the framework uses them, followed by `extra` value columns.
    fn indexed_rows(&self, path: &Path, flag: &str, extra: usize) -> Res<Vec<(usize, Vec<f64>)>> {
        let fw = self.structure.framework();
        let (has_series, has_time) = (fw != Framework::Te, fw != Framework::Cs);
        let cols = has_series as usize + 2 * has_time as usize + extra;
        let t = read_table(path, &format!("--{flag}"))?;
        if t.values.ncols() != cols {
            return Err(CliError::validation(format!(
                "{}: expected {cols} columns ({}), found {}",
                flag_file(flag, path),
                [
                    has_series.then_some("series"),
                    has_time.then_some("k, j"),
                    (extra > 0).then_some("lower, upper")
                ]
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
                .join(", "),
                t.values.ncols()
            )));
        }
        let int = |v: f64, r: usize, what: &str| -> Res<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::validation(format!(
                    "{}: row {}: {what} must be a positive integer, found {v}",
                    flag_file(flag, path),
                    r + 1
                )))
            }
        };
        let mut out = Vec::with_capacity(t.values.nrows());
        for r in 0..t.values.nrows() {
            let mut c = 0;
            let series = if has_series {
                let s = int(t.values[(r, 0)], r, "series")?;
                c += 1;
                self.stored_series(s - 1).ok_or_else(|| {
                    CliError::validation(format!(
                        "{}: row {}: series {s} exceeds the {} series",
                        flag_file(flag, path),
                        r + 1,
                        self.structure.n()
                    ))
                })?
            } else {
                0
            };
            let (k, j) = if has_time {
                c += 2;
                (int(t.values[(r, c - 2)], r, "k")?, int(t.values[(r, c - 1)], r, "j")? - 1)
            } else {
                (1, 0)
            };
            let idx = self
                .structure
                .index(series, k, j)
                .map_err(core_err(format!("{}: row {}", flag_file(flag, path), r + 1)))?;
            out.push((idx, (c..cols).map(|i| t.values[(r, i)]).collect()));
        }
        Ok(out)
    }
}

fn residuals(setup: &Setup, o: &RunOptions) -> Res<Option<ResidualSet<f64>>> {
    match &o.res {
        None => Ok(None),
        Some(p) => {
            let values = setup.rows_in(read_matrix(p, "--res")?);
            ResidualSet::from_forecast_layout(values, &setup.structure, ResidualKind::InSample)
                .map(Some)
                .map_err(core_err(flag_file("res", p)))
        }
    }
}

fn estimator(tag: &str, flag: &str, res: Option<&ResidualSet<f64>>) -> Res<Estimator> {
    let e: Estimator = tag.parse().map_err(core_err(format!("--{flag}")))?;
    if e.requires_residuals() && res.is_none() {
        return Err(CliError::validation(format!("--{flag} {tag} requires residuals: pass --res")));
    }
    Ok(e)
}

fn covariance_for(setup: &Setup, o: &RunOptions, res: Option<&ResidualSet<f64>>, diag: &mut Diagnostics) -> Res<CovarianceMatrix<f64>> {
    let tag = o.comb.as_deref().unwrap_or("ols");
    let e = estimator(tag, "comb", res)?;
    let cov = coherent::estimate_covariance(e, &setup.structure, res, o.mse.unwrap_or(true)).map_err(core_err("--comb"))?;
    diag.estimator = Some(e.as_str().to_string());
    diag.shrink_lambda = cov.shrink_lambdas.clone();
    diag.psd_repair = cov.repair;
    Ok(cov)
}

fn ls_options(setup: &Setup, o: &RunOptions) -> Res<ReconciliationOptions<f64>> {
    let mut opts = ReconciliationOptions::with_approach(parse_opt(&o.approach, "approach", Approach::Proj)?);
    opts.nn = parse_opt(&o.nn, "nn", NonNegative::None)?;
    if let Some(p) = &o.immutable {
        opts.immutable = setup.indexed_rows(p, "immutable", 0)?.into_iter().map(|(i, _)| i).collect();
    }
    if let Some(p) = &o.bounds {
        opts.bounds = setup
            .indexed_rows(p, "bounds", 2)?
            .into_iter()
            .map(|(index, v)| Bound {
                index,
                lower: v[0],
                upper: v[1],
            })
            .collect();
    }
    Ok(opts)
}

fn weights(o: &RunOptions, normalize: bool) -> Res<coherent::WeightVector<f64>> {
    let p = required(&o.weights, "weights", "for top-down and middle-out")?;
    let w = read_matrix(p, "--weights")?;
    let flat: Vec<f64> = (0..w.nrows()).flat_map(|i| w.row(i).iter().copied().collect::<Vec<_>>()).collect();
    Ok(coherent::WeightVector::new(flat, normalize))
}

fn learner_options(o: &RunOptions) -> Res<FitOptions> {
    let mut learner: Learner = parse_opt(&o.learner, "learner", Learner::forest())?;
    for (k, v) in key_values(&o.params, "params")? {
        learner.set(&k, v).map_err(core_err("--params"))?;
    }
    let tuning = if o.tune.is_empty() {
        None
    } else {
        let mut t = Tuning::new(grids(&o.tune)?);
        if let Some(f) = o.folds {
            t.folds = f;
        }
        Some(t)
    };
    let defaults = FitOptions::default();
    Ok(FitOptions {
        learner,
        mode: parse_opt(&o.features, "features", defaults.mode)?,
        tuning,
        seed: o.seed.unwrap_or(defaults.seed),
        min_rows: o.min_rows.unwrap_or(defaults.min_rows),
    })
}

fn train(setup: &Setup, o: &RunOptions) -> Res<FittedReconciler> {
    let hat_path = required(&o.hat, "hat", "to fit models (or pass --fit)")?;
    let obs_path = required(&o.obs, "obs", "to fit models (or pass --fit)")?;
    let hat = setup.forecast(hat_path, "hat")?;
    let obs = read_matrix(obs_path, "--obs")?;
    let table = TrainingTable::from_layout(&hat, &obs, &setup.structure).map_err(core_err(flag_file("obs", obs_path)))?;
    let opts = learner_options(o)?;
    coherent::fit(&table, &setup.structure, &opts).map_err(core_err("--hat/--obs"))
}

fn save_model(path: &Path, flag: &str, fitted: &FittedReconciler) -> Res<()> {
    write_text(path, flag, &fitted.to_json()?)
}

fn coherence(diag: &mut Diagnostics, structure: &Structure<f64>, x: &DVector<f64>) {
    let r = structure.cons_mat() * x;
    diag.add_residual(r.iter().copied());
}

fn period_header(setup: &Setup, periods: usize) -> Vec<String> {
    let d = setup.structure.dim();
    let map = setup.period_map();
    let mut labels = vec![String::new(); d];
    for (stored, &input) in map.iter().enumerate() {
        labels[input] = setup.structure.label(stored);
    }
    (0..periods)
        .flat_map(|h| labels.iter().map(move |l| if periods > 1 { format!("h{}_{l}", h + 1) } else { l.clone() }))
        .collect()
}

struct Timer {
    start: Instant,
    marks: BTreeMap<String, f64>,
}

impl Timer {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            marks: BTreeMap::new(),
        }
    }

    fn mark(&mut self, stage: &str) {
        let now = Instant::now();
        self.marks.insert(stage.to_string(), (now - self.start).as_secs_f64() * 1e3);
        self.start = now;
    }
}

fn needs_ct(framework: Framework, method: Method) -> Res<()> {
    if framework != Framework::Ct {
        return Err(CliError::validation(format!(
            "method `{}` needs the ct framework, not {}",
            method.as_str(),
            framework.as_str()
        )));
    }
    Ok(())
}

pub fn reconcile(framework: Framework, method: Method, merged: &Merged, config: Option<&Path>) -> Res<()> {
    let o = &merged.options;
    let out = required(&o.out, "out", "for reconcile")?.to_path_buf();
    let mut timer = Timer::new();
    let setup = Setup::build(framework, o)?;
    let s = &setup.structure;
    let mut diag = Diagnostics {
        framework: framework.as_str().into(),
        framework_title: framework.title().into(),
        method: method.as_str().into(),
        nn: "none".into(),
        options: merged.values.clone(),
        option_sources: merged.sources.clone(),
        config_file: config.map(|p| p.display().to_string()),
        ..Default::default()
    };
    for (name, p) in [
        ("agg-mat", &o.agg_mat),
        ("cons-mat", &o.cons_mat),
        ("base", &o.base),
        ("res", &o.res),
        ("weights", &o.weights),
        ("samples", &o.samples),
        ("hat", &o.hat),
        ("obs", &o.obs),
        ("immutable", &o.immutable),
        ("bounds", &o.bounds),
        ("alt-bottom", &o.alt_bottom),
        ("sigma", &o.sigma),
        ("fit", &o.fit),
    ] {
        if let Some(p) = p {
            diag.inputs.insert(name.into(), p.display().to_string());
        }
    }
    let header = o.header.unwrap_or(false);
    let base_path = || required(&o.base, "base", &format!("for method {}", method.as_str()));
    let sntz = o.sntz.unwrap_or(false);
    let round = o.round.unwrap_or(false);

    // (output matrix in input order, header)
    let (matrix, names): (DMatrix<f64>, Vec<String>) = match method {
        Method::Bu | Method::Td | Method::Mo => {
            let bp = base_path()?;
            let base = read_matrix(bp, "--base")?;
            timer.mark("load");
            let f = match method {
                Method::Bu => {
                    if sntz {
                        diag.nn = "sntz".into();
                    }
                    coherent::bottom_up(&base, s, sntz, round).map_err(core_err(flag_file("base", bp)))?
                }
                Method::Td => {
                    let w = weights(o, o.normalize.unwrap_or(false))?;
                    coherent::top_down(&base, s, &w).map_err(core_err(flag_file("base", bp)))?
                }
                _ => {
                    let ids = index_list(
                        o.id_rows.as_deref().ok_or_else(|| CliError::validation("--id-rows is required for middle-out"))?,
                        "id-rows",
                    )?;
                    let ids = ids
                        .into_iter()
                        .map(|i| {
                            setup
                                .stored_series(i)
                                .ok_or_else(|| CliError::validation(format!("--id-rows: series {} exceeds the {} series", i + 1, s.n())))
                        })
                        .collect::<Res<Vec<_>>>()?;
                    let w = weights(o, o.normalize.unwrap_or(false))?;
                    coherent::middle_out(&base, s, &w, &ids, o.order.unwrap_or(s.m())).map_err(core_err(flag_file("base", bp)))?
                }
            };
            timer.mark("reconcile");
            finish_forecast(&setup, &f, &mut diag)
        }
        Method::Rec | Method::Lcc => {
            let bp = base_path()?;
            let base = setup.forecast(bp, "base")?;
            let res = residuals(&setup, o)?;
            diag.residual_rows_excluded = res.as_ref().map(|r| r.excluded());
            let cov = covariance_for(&setup, o, res.as_ref(), &mut diag)?;
            timer.mark("load");
            let f = if method == Method::Rec {
                let opts = ls_options(&setup, o)?;
                diag.approach = Some(opts.approach.as_str().into());
                diag.nn = opts.nn.as_str().into();
                let out = coherent::reconcile_ls(&base, s, &cov, &opts).map_err(core_err("rec"))?;
                diag.ls_report = Some(out.report);
                out.forecast
            } else {
                let levels = match &o.levels {
                    None => None,
                    Some(text) => Some(
                        text.split(';')
                            .map(|g| {
                                index_list(g, "levels")?
                                    .into_iter()
                                    .map(|i| {
                                        setup.stored_series(i).ok_or_else(|| {
                                            CliError::validation(format!("--levels: series {} exceeds the {} series", i + 1, s.n()))
                                        })
                                    })
                                    .collect::<Res<Vec<_>>>()
                            })
                            .collect::<Res<Vec<_>>>()?,
                    ),
                };
                let alt_bottom = match &o.alt_bottom {
                    Some(p) => Some(read_matrix(p, "--alt-bottom")?),
                    None => None,
                };
                let opts = LccOptions {
                    ccc: o.ccc.unwrap_or(false),
                    const_mode: parse_opt(&o.const_mode, "const-mode", Default::default())?,
                    alt_bottom,
                    levels,
                };
                let out = coherent::reconcile_lcc(&base, s, &cov, &opts).map_err(core_err("lcc"))?;
                diag.lcc_components = out.components.iter().map(|c| c.label.clone()).collect();
                out.forecast
            };
            timer.mark("reconcile");
            finish_forecast(&setup, &f, &mut diag)
        }
        Method::Tcs | Method::Cst | Method::Iter => {
            needs_ct(framework, method)?;
            let bp = base_path()?;
            let base = setup.forecast(bp, "base")?;
            let res = residuals(&setup, o)?;
            diag.residual_rows_excluded = res.as_ref().map(|r| r.excluded());
            let est = coherent::StepEstimators {
                cs: estimator(o.comb_cs.as_deref().unwrap_or("ols"), "comb-cs", res.as_ref())?,
                te: estimator(o.comb_te.as_deref().unwrap_or("ols"), "comb-te", res.as_ref())?,
                mse: o.mse.unwrap_or(true),
            };
            diag.estimator = Some(format!("cs={}, te={}", est.cs, est.te));
            timer.mark("load");
            let f = if method == Method::Iter {
                let order = parse_opt(&o.step_type, "type", coherent::StepOrder::Tcs)?;
                let norm = parse_opt(&o.norm, "norm", coherent::Norm::Inf)?;
                let (f, rep) = coherent::iterative(&base, s, res.as_ref(), &est, o.itmax.unwrap_or(100), o.tol.unwrap_or(1e-5), order, norm)
                    .map_err(core_err("iter"))?;
                if o.verbose.unwrap_or(false) {
                    eprintln!("iteration 0: {:e}", rep.initial);
                    for (i, v) in rep.trace.iter().enumerate() {
                        eprintln!("iteration {}: {v:e}", i + 1);
                    }
                }
                diag.iteration = Some(rep);
                f
            } else {
                let order = if method == Method::Tcs { coherent::StepOrder::Tcs } else { coherent::StepOrder::Cst };
                let avg = parse_opt(&o.avg, "avg", coherent::Averaging::Ka)?;
                coherent::two_step(&base, s, res.as_ref(), &est, order, avg).map_err(core_err(method.as_str()))?
            };
            timer.mark("reconcile");
            finish_forecast(&setup, &f, &mut diag)
        }
        Method::Rml => {
            let bp = base_path()?;
            let base = setup.forecast(bp, "base")?;
            let fitted = match &o.fit {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", flag_file("fit", p))))?;
                    FittedReconciler::from_json(&text).map_err(core_err(flag_file("fit", p)))?
                }
                None => train(&setup, o)?,
            };
            if let Some(p) = &o.save_model {
                save_model(p, "--save-model", &fitted)?;
            }
            timer.mark("fit");
            diag.approach = Some(fitted.learner.tag().into());
            if sntz {
                diag.nn = "sntz".into();
            }
            if fitted.targets.iter().any(|t| !t.params.is_empty()) {
                diag.tuned = Some(fitted.targets.iter().map(|t| t.params.clone()).collect());
            }
            let f = coherent::reconcile_ml(&base, &fitted, s, sntz, round).map_err(core_err(flag_file("base", bp)))?;
            timer.mark("reconcile");
            finish_forecast(&setup, &f, &mut diag)
        }
        Method::Mvn => {
            let bp = base_path()?;
            let base = setup.forecast(bp, "base")?;
            let res = residuals(&setup, o)?;
            diag.residual_rows_excluded = res.as_ref().map(|r| r.excluded());
            let cov = covariance_for(&setup, o, res.as_ref(), &mut diag)?;
            let sigma = match (&o.sigma, o.comb_base.as_deref()) {
                (Some(p), _) => {
                    let m = read_matrix(p, "--sigma")?;
                    let d = s.dim();
                    if m.shape() != (d, d) {
                        return Err(CliError::validation(format!("{}: expected {d} × {d}, found {} × {}", flag_file("sigma", p), m.nrows(), m.ncols())));
                    }
                    Some(setup.square_in(m))
                }
                (None, None | Some("comb")) => None,
                (None, Some(tag)) => {
                    let e = estimator(tag, "comb-base", res.as_ref())?;
                    Some(coherent::estimate_covariance(e, s, res.as_ref(), o.mse.unwrap_or(true)).map_err(core_err("--comb-base"))?.omega)
                }
            };
            let approach: Approach = parse_opt(&o.approach, "approach", Approach::Proj)?;
            diag.approach = Some(approach.as_str().into());
            let reduce = o.reduce_form.unwrap_or(false);
            timer.mark("load");
            let base_cov = match &sigma {
                Some(m) => BaseCovariance::Matrix(m),
                None => BaseCovariance::Comb,
            };
            let periods = base.periods();
            let mut means = Vec::with_capacity(periods.len());
            let mut cov_out = None;
            for mu in &periods {
                let g = reconcile_gaussian(mu, base_cov, s, &cov.omega, approach, reduce).map_err(core_err("mvn"))?;
                if g.clip.is_some() {
                    diag.eigen_clip = g.clip;
                }
                means.push(g.forecast.mean);
                cov_out.get_or_insert(g.forecast.cov);
            }
            timer.mark("reconcile");
            let cov_out = cov_out.expect("at least one period");
            if let Some(p) = &o.out_cov {
                let (c, names) = if reduce {
                    (cov_out, bottom_names(s))
                } else {
                    (setup.square_out(cov_out), period_header(&setup, 1))
                };
                write_matrix(p, &c, header.then_some(names.as_slice()))?;
                diag.inputs.insert("out-cov".into(), p.display().to_string());
            }
            if reduce {
                let m = s.m();
                let nb = s.cs().n_bottom();
                for b in &means {
                    coherence(&mut diag, s, &(s.summing_matrix() * b));
                }
                diag.periods = means.len();
                let values = DMatrix::from_fn(nb, m * means.len(), |r, c| means[c / m][r * m + c % m]);
                let names = (1..=m * means.len()).map(|j| format!("k1_{j}")).collect();
                (values, names)
            } else {
                let f = ForecastSet::from_periods(&means, s)?;
                finish_forecast(&setup, &f, &mut diag)
            }
        }
        Method::Smp => {
            let sp = required(&o.samples, "samples", "for method smp")?;
            let draws = setup.columns_in(read_matrix(sp, "--samples")?);
            let res = residuals(&setup, o)?;
            diag.residual_rows_excluded = res.as_ref().map(|r| r.excluded());
            let cov = covariance_for(&setup, o, res.as_ref(), &mut diag)?;
            let opts = ls_options(&setup, o)?;
            diag.approach = Some(opts.approach.as_str().into());
            diag.nn = opts.nn.as_str().into();
            let rec = LsReconciler::new(s, &cov.omega, opts).map_err(core_err("smp"))?;
            timer.mark("load");
            let out = reconcile_samples(&SampleForecast::new(draws), s, |f| rec.reconcile(f).map(|(x, _)| x))
                .map_err(core_err(flag_file("samples", sp)))?;
            timer.mark("reconcile");
            let d = s.dim();
            let periods = out.draws.ncols() / d;
            for i in 0..out.len() {
                for h in 0..periods {
                    let x = DVector::from_fn(d, |j, _| out.draws[(i, h * d + j)]);
                    coherence(&mut diag, s, &x);
                }
            }
            diag.periods = periods;
            (setup.columns_out(out.draws), period_header(&setup, periods))
        }
    };
    write_matrix(&out, &matrix, header.then_some(names.as_slice()))?;
    timer.mark("write");
    if o.timings.unwrap_or(false) {
        diag.timings_ms = Some(timer.marks);
    }
    let diag_path = o.diagnostics.clone().unwrap_or_else(|| {
        let mut p = out.into_os_string();
        p.push(".json");
        PathBuf::from(p)
    });
    write_text(&diag_path, "--diagnostics", &diag.to_json())
}

fn bottom_names(s: &Structure<f64>) -> Vec<String> {
    let nu = s.cs().n_upper();
    (0..s.n_free())
        .map(|f| {
            let (b, j) = (f / s.m(), f % s.m());
            let label = &s.cs().labels()[nu + b];
            if s.framework() == Framework::Cs {
                label.clone()
            } else {
                format!("{label}_k1_{}", j + 1)
            }
        })
        .collect()
}

fn finish_forecast(setup: &Setup, f: &ForecastSet<f64>, diag: &mut Diagnostics) -> (DMatrix<f64>, Vec<String>) {
    for x in f.periods() {
        coherence(diag, &setup.structure, &x);
    }
    diag.periods = f.horizon();
    (setup.rows_out(f.values().clone()), f.column_names())
}

pub fn fit_models(framework: Framework, merged: &Merged) -> Res<()> {
    let o = &merged.options;
    let setup = Setup::build(framework, o)?;
    let fitted = train(&setup, o)?;
    let (path, flag) = match (&o.save_model, &o.out) {
        (Some(p), _) => (p, "--save-model"),
        (None, Some(p)) => (p, "--out"),
        (None, None) => return Err(CliError::validation("--save-model (or --out) is required for fit")),
    };
    save_model(path, flag, &fitted)
}

pub fn covariance(framework: Framework, merged: &Merged) -> Res<()> {
    let o = &merged.options;
    let out = required(&o.out, "out", "for cov")?;
    let setup = Setup::build(framework, o)?;
    let res = residuals(&setup, o)?;
    let mut diag = Diagnostics::default();
    let cov = covariance_for(&setup, o, res.as_ref(), &mut diag)?;
    let names = period_header(&setup, 1);
    write_matrix(out, &setup.square_out(cov.omega), o.header.unwrap_or(false).then_some(names.as_slice()))?;
    if !diag.shrink_lambda.is_empty() {
        let l: Vec<String> = diag.shrink_lambda.iter().map(|v| crate::io::format_number(*v)).collect();
        println!("shrinkage: {}", l.join(","));
    }
    Ok(())
}

pub fn describe(framework: Framework, merged: &Merged) -> Res<()> {
    let o = &merged.options;
    let setup = Setup::build(framework, o)?;
    let s = &setup.structure;
    let desc = s.describe();
    let value = json!({
        "framework": framework.as_str(),
        "title": framework.title(),
        "series": s.n(),
        "upper": s.cs().n_upper(),
        "bottom": s.cs().n_bottom(),
        "m": s.m(),
        "kt": s.kt(),
        "per_period": s.dim(),
        "free": s.n_free(),
        "constraints": s.cons_mat().nrows(),
        "input_rows": setup.source.iter().map(|i| i + 1).collect::<Vec<_>>(),
        "structure": desc,
    });
    let text = serde_json::to_string_pretty(&value).expect("json") + "\n";
    match &o.out {
        Some(p) => write_text(p, "--out", &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn lcmat(cons_mat: &Path, out: Option<&Path>) -> Res<()> {
    let c = read_matrix(cons_mat, "--cons-mat")?;
    let cs = CrossSectionalStructure::from_cons(&c, None).map_err(core_err(flag_file("cons-mat", cons_mat)))?;
    let nu = cs.n_upper();
    let cols: Vec<String> = cs.source_columns().iter().map(|c| (c + 1).to_string()).collect();
    println!("upper columns: {}", cols[..nu].join(","));
    println!("bottom columns: {}", cols[nu..].join(","));
    match out {
        Some(p) => write_matrix(p, cs.agg_mat(), None),
        None => {
            let a = cs.agg_mat();
            for i in 0..a.nrows() {
                let row: Vec<String> = a.row(i).iter().map(|v| crate::io::format_number(*v)).collect();
                println!("{}", row.join(","));
            }
            Ok(())
        }
    }
}
