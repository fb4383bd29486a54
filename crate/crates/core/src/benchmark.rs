//! Monte Carlo experiments: named studies reproducing the simulation tables
//! at desk scale, and custom truth/estimator combinations.
//!
//! Each replication draws one dataset from a seeded substream and evaluates
//! every estimator of a cell on it, so estimators are compared on common
//! random numbers. Results are merged by replication index and do not
//! depend on the number of worker threads.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{
    default_variogram_bins, empirical_variogram_aniso, fit_mle_collection, fit_variogram_wls, kriging_theta,
    select_by_criterion, InfoCriterion, DEFAULT_KRIGING_WINDOW,
};
use crate::error::{Error, Result};
use crate::lattice::{build_model_collection, LatticeSpec, ModelCollection};
use crate::params::{ConstraintSpec, ThetaField};
use crate::risk::{loss_torus, monte_carlo_cells, oracle_and_ratio, PlaneLossEvaluator, RiskEstimate, RiskRow};
use crate::select::{slope_select_plane, slope_select_torus, SelectionPath};
use crate::simulate::{
    derive_seed, make_theta_phi, sample_torus_gmrf, AnisotropySpec, CorrelationFamily, CorrelationModel,
    FieldObservations, PlaneSampler,
};
use crate::spectral::DEFAULT_GRID_RESOLUTION;

/// Named experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Torus, `θ^{0.015}`, slope heuristic under eigenvalue caps `ρ`.
    Table1,
    /// Torus, `θ^φ` for four `φ`, slope heuristic against AIC and BIC.
    Table2,
    /// Plane window, exponential/circular/spherical truths against kriging.
    Table3,
    /// Plane window, Matérn smoothness sweep against kriging with `κ`
    /// estimated.
    Table4,
    /// Plane window, Matérn `κ = 0.05` truth, kriging under four variogram
    /// families.
    Table5,
    /// Plane window, anisotropic Matérn truths, anisotropic selection.
    Table6,
    Custom,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Table1 => "table1",
            Experiment::Table2 => "table2",
            Experiment::Table3 => "table3",
            Experiment::Table4 => "table4",
            Experiment::Table5 => "table5",
            Experiment::Table6 => "table6",
            Experiment::Custom => "custom",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::InvalidParameter(format!("unknown experiment '{s}'")))
    }
}

/// Truth of a custom experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthSpec {
    /// The `θ^φ` test matrix on a torus.
    ThetaPhi { phi: f64 },
    /// Explicit torus parameter in the `ThetaField` JSON layout.
    Theta { theta: serde_json::Value },
    /// Stationary field on a plane window.
    Field {
        model: CorrelationModel,
        #[serde(default)]
        aniso: Option<AnisotropySpec>,
    },
}

impl TruthSpec {
    /// Draws `n` replications on `lattice`; returns the data and the truth
    /// in a form suitable for a sidecar file.
    pub fn simulate(&self, lattice: &LatticeSpec, n: usize, seed: u64) -> Result<(FieldObservations, serde_json::Value)> {
        match self {
            TruthSpec::Field { model, aniso } => {
                if lattice.toroidal {
                    return Err(Error::PlaneRequired("correlation-model truths live on plane windows"));
                }
                let data = PlaneSampler::new(model, lattice, aniso.as_ref())?.sample(n, seed)?;
                Ok((data, json!({"kind": "field", "model": model, "aniso": aniso})))
            }
            TruthSpec::ThetaPhi { .. } | TruthSpec::Theta { .. } => {
                let theta = self.torus_theta(lattice)?;
                let data = sample_torus_gmrf(&theta, n, seed)?;
                Ok((data, json!({"kind": "theta", "theta": theta.to_json()})))
            }
        }
    }

    /// The torus parameter of a GMRF truth.
    pub fn torus_theta(&self, lattice: &LatticeSpec) -> Result<ThetaField> {
        if !lattice.toroidal {
            return Err(Error::TorusRequired("GMRF truths are defined on tori"));
        }
        let theta = match self {
            TruthSpec::ThetaPhi { phi } => make_theta_phi(*phi, lattice)?,
            TruthSpec::Theta { theta } => ThetaField::from_json(theta)?,
            TruthSpec::Field { .. } => return Err(Error::InvalidParameter("not a GMRF truth".into())),
        };
        if (theta.lattice.p1, theta.lattice.p2) != (lattice.p1, lattice.p2) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", lattice.p1, lattice.p2),
                got: format!("{}x{}", theta.lattice.p1, theta.lattice.p2),
            });
        }
        Ok(theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub p1: usize,
    pub p2: usize,
    #[serde(default)]
    pub toroidal: bool,
}

impl LatticeConfig {
    pub fn spec(&self) -> Result<LatticeSpec> {
        LatticeSpec::new(self.p1, self.p2, self.toroidal)
    }
}

/// Benchmark configuration; named experiments fill unset fields with the
/// desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Replications per dataset.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Side of the square lattice of a named experiment.
    #[serde(default)]
    pub p: Option<usize>,
    /// Lattice of a custom experiment.
    #[serde(default)]
    pub lattice: Option<LatticeConfig>,
    #[serde(default)]
    pub collection_max_dim: Option<usize>,
    /// Custom experiments: any of `cls-slope`, `aic`, `bic`, `variogram`.
    #[serde(default)]
    pub estimators: Vec<String>,
    #[serde(default)]
    pub truth: Option<TruthSpec>,
    /// Overrides the `φ` values of table2.
    #[serde(default)]
    pub phis: Option<Vec<f64>>,
    /// Overrides the `κ` values of table4 and table6.
    #[serde(default)]
    pub kappas: Option<Vec<f64>>,
    /// Overrides the anisotropy ratios of table6.
    #[serde(default)]
    pub ratios: Option<Vec<f64>>,
    #[serde(default = "default_grid")]
    pub grid_resolution: usize,
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn default_reps() -> usize {
    200
}

fn default_seed() -> u64 {
    1
}

fn default_n() -> usize {
    1
}

fn default_grid() -> usize {
    DEFAULT_GRID_RESOLUTION
}

impl ExperimentConfig {
    pub fn named(experiment: Experiment) -> Self {
        Self {
            experiment,
            reps: default_reps(),
            seed: default_seed(),
            n: default_n(),
            p: None,
            lattice: None,
            collection_max_dim: None,
            estimators: Vec::new(),
            truth: None,
            phis: None,
            kappas: None,
            ratios: None,
            grid_resolution: default_grid(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(Error::InvalidParameter(format!("reps must be at least 2, got {}", self.reps)));
        }
        if self.n < 1 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        if self.grid_resolution < 8 {
            return Err(Error::InvalidParameter("grid_resolution must be at least 8".into()));
        }
        if self.experiment == Experiment::Custom && (self.truth.is_none() || self.lattice.is_none()) {
            return Err(Error::InvalidParameter("custom experiments need a truth and a lattice".into()));
        }
        if self.experiment == Experiment::Custom && self.estimators.is_empty() {
            return Err(Error::InvalidParameter("custom experiments need at least one estimator".into()));
        }
        Ok(())
    }

    fn side(&self, default: usize) -> usize {
        self.p.unwrap_or(default)
    }
}

/// Rows of the risk table, provenance and the selection path of the first
/// replication of every slope-heuristic cell.
#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub rows: Vec<RiskRow>,
    pub provenance: serde_json::Value,
    pub paths: Vec<(String, SelectionPath)>,
}

impl BenchmarkResult {
    pub fn row(&self, estimator: &str, param: &str) -> Option<&RiskRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.param == param)
    }
}

/// Seed of replication `r`.
fn rep_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, r as u64)
}

fn log_fail<T>(what: &str, r: usize, v: Result<T>) -> Option<T> {
    match v {
        Ok(x) => Some(x),
        Err(e) => {
            log::warn!("replication {r}: {what} failed: {e}");
            None
        }
    }
}

struct TorusCell {
    /// Per cap: selected risk and per-model risks.
    capped: Vec<(RiskEstimate, Vec<RiskEstimate>)>,
    aic: Option<RiskEstimate>,
    bic: Option<RiskEstimate>,
}

fn torus_cell(
    truth: &ThetaField,
    collection: &ModelCollection,
    n: usize,
    reps: usize,
    seed: u64,
    caps: &[Option<f64>],
    with_mle: bool,
) -> Result<TorusCell> {
    let k = collection.len();
    let constraints: Vec<ConstraintSpec> = caps
        .iter()
        .map(|&rho| ConstraintSpec::new(rho, 0.0))
        .collect::<Result<_>>()?;
    let width = caps.len() * (k + 1) + if with_mle { 2 } else { 0 };
    let cells = monte_carlo_cells(reps, width, |r| {
        let mut out = vec![None; width];
        let Some(data) = log_fail("sampling", r, sample_torus_gmrf(truth, n, rep_seed(seed, r))) else {
            return out;
        };
        let loss = |t: &ThetaField| loss_torus(t, truth, truth).ok();
        for (c, constraint) in constraints.iter().enumerate() {
            if let Some(rep) = log_fail("slope heuristic", r, slope_select_torus(&data, collection, true, constraint)) {
                let base = c * (k + 1);
                out[base] = loss(&rep.final_fit.theta);
                for (m, f) in rep.fits.iter().enumerate() {
                    out[base + 1 + m] = loss(&f.theta);
                }
            }
        }
        if with_mle {
            if let Some(fits) = log_fail("likelihood fits", r, fit_mle_collection(&data, collection, true)) {
                let base = caps.len() * (k + 1);
                for (j, crit) in [InfoCriterion::Aic, InfoCriterion::Bic].into_iter().enumerate() {
                    if let Ok(s) = select_by_criterion(&fits, crit, &data.lattice) {
                        out[base + j] = loss(&fits[s].theta);
                    }
                }
            }
        }
        out
    })?;
    let mut it = cells.into_iter();
    let mut capped = Vec::new();
    for _ in caps {
        let sel = it.next().expect("cell");
        let per: Vec<RiskEstimate> = it.by_ref().take(k).collect();
        capped.push((sel, per));
    }
    let (aic, bic) = if with_mle { (it.next(), it.next()) } else { (None, None) };
    Ok(TorusCell { capped, aic, bic })
}

#[derive(Debug, Clone, Copy)]
struct KrigingSpec {
    family: CorrelationFamily,
    fix_kappa: Option<f64>,
    window: usize,
}

struct PlaneCell {
    cls: Option<(RiskEstimate, RiskEstimate, Vec<RiskEstimate>)>,
    kriging: Vec<RiskEstimate>,
}

#[allow(clippy::too_many_arguments)]
fn plane_cell(
    model: &CorrelationModel,
    aniso: Option<&AnisotropySpec>,
    lattice: &LatticeSpec,
    collection: Option<&ModelCollection>,
    iso: bool,
    kriging: &[KrigingSpec],
    cfg: &ExperimentConfig,
) -> Result<PlaneCell> {
    let sampler = PlaneSampler::new(model, lattice, aniso)?;
    let evaluator = PlaneLossEvaluator::new(model, lattice, aniso)?;
    let k = collection.map_or(0, |c| c.len());
    let cls_width = if collection.is_some() { k + 2 } else { 0 };
    let width = cls_width + kriging.len();
    let (max_lag, n_bins) = default_variogram_bins(lattice);
    let cells = monte_carlo_cells(cfg.reps, width, |r| {
        let mut out = vec![None; width];
        let Some(data) = log_fail("sampling", r, sampler.sample(cfg.n, rep_seed(cfg.seed, r))) else {
            return out;
        };
        let loss = |t: &ThetaField| evaluator.loss(t).ok();
        if let Some(col) = collection {
            if let Some(rep) = log_fail("slope heuristic", r, slope_select_plane(&data, col, iso, cfg.grid_resolution)) {
                out[0] = loss(&rep.final_fit.theta);
                out[1] = loss(&rep.fits[rep.selected].theta);
                for (m, f) in rep.fits.iter().enumerate() {
                    out[2 + m] = loss(&f.theta);
                }
            }
        }
        if !kriging.is_empty() {
            let bins = log_fail("variogram", r, empirical_variogram_aniso(&data, max_lag, n_bins, aniso));
            for (j, spec) in kriging.iter().enumerate() {
                let Some(bins) = bins.as_ref() else { continue };
                let theta = fit_variogram_wls(bins, spec.family, spec.fix_kappa)
                    .and_then(|fit| kriging_theta(&fit, lattice, spec.window, aniso));
                out[cls_width + j] = log_fail("kriging", r, theta).and_then(|t| loss(&t));
            }
        }
        out
    })?;
    let mut it = cells.into_iter();
    let cls = collection.map(|_| {
        let fin = it.next().expect("cell");
        let common = it.next().expect("cell");
        let per: Vec<RiskEstimate> = it.by_ref().take(k).collect();
        (fin, common, per)
    });
    Ok(PlaneCell {
        cls,
        kriging: it.collect(),
    })
}

/// Ratio row: `selected / oracle`, with the selected risk's interval
/// scaled by the oracle risk.
fn ratio_row(experiment: &str, param: &str, selected: &RiskEstimate, per_model: &[RiskEstimate]) -> Result<RiskRow> {
    let (oracle, ratio) = oracle_and_ratio(per_model, selected)?;
    let om = per_model[oracle].mean;
    Ok(RiskRow {
        experiment: experiment.into(),
        estimator: "ratio".into(),
        param: param.into(),
        risk_mean: ratio,
        ci95: if om > 0.0 { selected.ci95_halfwidth / om } else { f64::INFINITY },
        reps: selected.reps,
        failures: selected.failures,
    })
}

fn fmt_param(name: &str, v: f64) -> String {
    format!("{name}={v}")
}

fn kriging_window_for_kappa(kappa: f64) -> usize {
    // the near-singular smooth cases need smaller neighborhoods
    if kappa >= 4.0 {
        3
    } else if kappa >= 2.0 {
        7
    } else {
        DEFAULT_KRIGING_WINDOW
    }
}

fn slope_path_torus(truth: &ThetaField, collection: &ModelCollection, n: usize, seed: u64, rho: Option<f64>) -> Result<SelectionPath> {
    let data = sample_torus_gmrf(truth, n, rep_seed(seed, 0))?;
    Ok(slope_select_torus(&data, collection, true, &ConstraintSpec::new(rho, 0.0)?)?.path)
}

fn slope_path_plane(
    model: &CorrelationModel,
    aniso: Option<&AnisotropySpec>,
    lattice: &LatticeSpec,
    collection: &ModelCollection,
    iso: bool,
    cfg: &ExperimentConfig,
) -> Result<SelectionPath> {
    let data: FieldObservations = PlaneSampler::new(model, lattice, aniso)?.sample(cfg.n, rep_seed(cfg.seed, 0))?;
    Ok(slope_select_plane(&data, collection, iso, cfg.grid_resolution)?.path)
}

/// Runs an experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let name = cfg.experiment.name();
    let mut rows = Vec::new();
    let mut paths = Vec::new();
    match cfg.experiment {
        Experiment::Table1 => {
            let l = LatticeSpec::torus(cfg.side(20), cfg.side(20))?;
            let truth = make_theta_phi(0.015, &l)?;
            let col = build_model_collection(&l, cfg.collection_max_dim.unwrap_or(21), true)?;
            let caps = [Some(2.0), Some(4.0), Some(8.0), None];
            let cell = torus_cell(&truth, &col, cfg.n, cfg.reps, cfg.seed, &caps, false)?;
            for (cap, (sel, per)) in caps.iter().zip(&cell.capped) {
                let param = cap.map_or("rho=inf".to_string(), |r| fmt_param("rho", r));
                rows.push(RiskRow::new(name, "cls-slope", &param, sel));
                rows.push(ratio_row(name, &param, sel, per)?);
            }
            paths.push(("rho=inf".into(), slope_path_torus(&truth, &col, cfg.n, cfg.seed, None)?));
        }
        Experiment::Table2 => {
            let l = LatticeSpec::torus(cfg.side(20), cfg.side(20))?;
            let col = build_model_collection(&l, cfg.collection_max_dim.unwrap_or(21), true)?;
            let phis = cfg.phis.clone().unwrap_or_else(|| vec![0.0, 0.0125, 0.015, 0.0175]);
            for phi in phis {
                let truth = make_theta_phi(phi, &l)?;
                let cell = torus_cell(&truth, &col, cfg.n, cfg.reps, cfg.seed, &[None], true)?;
                let param = fmt_param("phi", phi);
                let (sel, per) = &cell.capped[0];
                rows.push(RiskRow::new(name, "aic", &param, cell.aic.as_ref().expect("mle cells")));
                rows.push(RiskRow::new(name, "bic", &param, cell.bic.as_ref().expect("mle cells")));
                rows.push(RiskRow::new(name, "cls-slope", &param, sel));
                rows.push(ratio_row(name, &param, sel, per)?);
                paths.push((param, slope_path_torus(&truth, &col, cfg.n, cfg.seed, None)?));
            }
        }
        Experiment::Table3 => {
            let l = LatticeSpec::plane(cfg.side(20), cfg.side(20))?;
            let col = build_model_collection(&l, cfg.collection_max_dim.unwrap_or(18), true)?;
            for family in [CorrelationFamily::Exponential, CorrelationFamily::Circular, CorrelationFamily::Spherical] {
                let model = CorrelationModel::with_family(family, 3.0);
                let spec = KrigingSpec {
                    family,
                    fix_kappa: None,
                    window: DEFAULT_KRIGING_WINDOW,
                };
                let cell = plane_cell(&model, None, &l, Some(&col), true, &[spec], cfg)?;
                push_plane_rows(&mut rows, name, family.name(), &cell)?;
                paths.push((family.name().into(), slope_path_plane(&model, None, &l, &col, true, cfg)?));
            }
        }
        Experiment::Table4 => {
            let l = LatticeSpec::plane(cfg.side(30), cfg.side(30))?;
            let col = build_model_collection(&l, cfg.collection_max_dim.unwrap_or(18), true)?;
            for kappa in cfg.kappas.clone().unwrap_or_else(default_kappas) {
                let model = CorrelationModel::matern(3.0, kappa);
                let spec = KrigingSpec {
                    family: CorrelationFamily::Matern,
                    fix_kappa: None,
                    window: kriging_window_for_kappa(kappa),
                };
                let cell = plane_cell(&model, None, &l, Some(&col), true, &[spec], cfg)?;
                let param = fmt_param("kappa", kappa);
                push_plane_rows(&mut rows, name, &param, &cell)?;
                paths.push((param, slope_path_plane(&model, None, &l, &col, true, cfg)?));
            }
        }
        Experiment::Table5 => {
            let l = LatticeSpec::plane(cfg.side(30), cfg.side(30))?;
            let model = CorrelationModel::matern(3.0, 0.05);
            let families = [
                CorrelationFamily::Exponential,
                CorrelationFamily::Circular,
                CorrelationFamily::Spherical,
                CorrelationFamily::Matern,
            ];
            let specs: Vec<KrigingSpec> = families
                .iter()
                .map(|&family| KrigingSpec {
                    family,
                    fix_kappa: None,
                    window: DEFAULT_KRIGING_WINDOW,
                })
                .collect();
            let cell = plane_cell(&model, None, &l, None, true, &specs, cfg)?;
            for (family, risk) in families.iter().zip(&cell.kriging) {
                rows.push(RiskRow::new(name, "variogram", family.name(), risk));
            }
        }
        Experiment::Table6 => {
            let l = LatticeSpec::plane(cfg.side(30), cfg.side(30))?;
            let col = build_model_collection(&l, cfg.collection_max_dim.unwrap_or(28), false)?;
            for ratio in cfg.ratios.clone().unwrap_or_else(|| vec![2.0, 5.0]) {
                let aniso = AnisotropySpec::new(ratio, 0.0)?;
                for kappa in cfg.kappas.clone().unwrap_or_else(default_kappas) {
                    let model = CorrelationModel::matern(3.0, kappa);
                    let spec = KrigingSpec {
                        family: CorrelationFamily::Matern,
                        fix_kappa: None,
                        window: kriging_window_for_kappa(kappa),
                    };
                    let cell = plane_cell(&model, Some(&aniso), &l, Some(&col), false, &[spec], cfg)?;
                    let param = format!("ratio={ratio},kappa={kappa}");
                    push_plane_rows(&mut rows, name, &param, &cell)?;
                }
            }
        }
        Experiment::Custom => run_custom(cfg, &mut rows, &mut paths)?,
    }
    let provenance = json!({
        "experiment": name,
        "seed": cfg.seed,
        "reps": cfg.reps,
        "n": cfg.n,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "failures": rows.iter().map(|r| json!({"estimator": r.estimator, "param": r.param, "failures": r.failures})).collect::<Vec<_>>(),
    });
    Ok(BenchmarkResult { rows, provenance, paths })
}

fn default_kappas() -> Vec<f64> {
    vec![0.05, 0.25, 0.5, 1.0, 2.0, 4.0]
}

fn push_plane_rows(rows: &mut Vec<RiskRow>, name: &str, param: &str, cell: &PlaneCell) -> Result<()> {
    for risk in &cell.kriging {
        rows.push(RiskRow::new(name, "variogram", param, risk));
    }
    if let Some((fin, common, per)) = &cell.cls {
        rows.push(RiskRow::new(name, "cls-slope", param, fin));
        rows.push(ratio_row(name, param, common, per)?);
    }
    Ok(())
}

fn run_custom(cfg: &ExperimentConfig, rows: &mut Vec<RiskRow>, paths: &mut Vec<(String, SelectionPath)>) -> Result<()> {
    let name = "custom";
    let l = cfg.lattice.expect("validated").spec()?;
    let want = |e: &str| cfg.estimators.iter().any(|s| s == e);
    for e in &cfg.estimators {
        if !["cls-slope", "aic", "bic", "variogram"].contains(&e.as_str()) {
            return Err(Error::InvalidParameter(format!("unknown estimator '{e}'")));
        }
    }
    match cfg.truth.as_ref().expect("validated") {
        TruthSpec::Field { model, aniso } => {
            if l.toroidal {
                return Err(Error::PlaneRequired("correlation-model truths live on plane windows"));
            }
            if want("aic") || want("bic") {
                return Err(Error::TorusRequired("likelihood baselines"));
            }
            let iso = aniso.is_none();
            let col = build_model_collection(&l, cfg.collection_max_dim.unwrap_or(if iso { 18 } else { 28 }), iso)?;
            let specs: Vec<KrigingSpec> = if want("variogram") {
                vec![KrigingSpec {
                    family: model.family,
                    fix_kappa: None,
                    window: if model.family == CorrelationFamily::Matern {
                        kriging_window_for_kappa(model.kappa)
                    } else {
                        DEFAULT_KRIGING_WINDOW
                    },
                }]
            } else {
                Vec::new()
            };
            let with_cls = want("cls-slope");
            let cell = plane_cell(model, aniso.as_ref(), &l, with_cls.then_some(&col), iso, &specs, cfg)?;
            push_plane_rows(rows, name, model.family.name(), &cell)?;
            if with_cls {
                paths.push((model.family.name().into(), slope_path_plane(model, aniso.as_ref(), &l, &col, iso, cfg)?));
            }
        }
        truth => {
            if want("variogram") {
                return Err(Error::PlaneRequired("variogram baseline"));
            }
            let theta = truth.torus_theta(&l)?;
            let col = build_model_collection(&l, cfg.collection_max_dim.unwrap_or(21), true)?;
            let with_mle = want("aic") || want("bic");
            let cell = torus_cell(&theta, &col, cfg.n, cfg.reps, cfg.seed, &[None], with_mle)?;
            if want("aic") {
                rows.push(RiskRow::new(name, "aic", "truth", cell.aic.as_ref().expect("mle")));
            }
            if want("bic") {
                rows.push(RiskRow::new(name, "bic", "truth", cell.bic.as_ref().expect("mle")));
            }
            if want("cls-slope") {
                let (sel, per) = &cell.capped[0];
                rows.push(RiskRow::new(name, "cls-slope", "truth", sel));
                rows.push(ratio_row(name, "truth", sel, per)?);
                paths.push(("truth".into(), slope_path_torus(&theta, &col, cfg.n, cfg.seed, None)?));
            }
        }
    }
    Ok(())
}
