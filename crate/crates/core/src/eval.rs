//! Metrics, the global-mean baseline, repeated cold-start experiments and ablations.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cacdr::{self, CacdrModel};
use crate::config::TrainConfig;
use crate::data::{apply_cold_start, make_split, ColdStartViews, DomainPair, RatingMatrix, SplitPlan};
use crate::error::{Error, Result};
use crate::lfacdr::{self, LfacdrModel};
use crate::numerics::Mask;
use crate::seed::{derive_seed, streams};
use crate::train::TrainViews;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cacdr,
    Lfacdr,
    Baseline,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Cacdr => "cacdr",
            Method::Lfacdr => "lfacdr",
            Method::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cacdr" => Ok(Method::Cacdr),
            "lfacdr" => Ok(Method::Lfacdr),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (cacdr, lfacdr, baseline)"
            ))),
        }
    }
}

/// Which training stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub init: bool,
    pub coupled: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        init: true,
        coupled: true,
    };
    pub const WITHOUT_COUPLED: Variant = Variant {
        init: true,
        coupled: false,
    };
    pub const WITHOUT_INIT: Variant = Variant {
        init: false,
        coupled: true,
    };
    pub const UNTRAINED: Variant = Variant {
        init: false,
        coupled: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.init, self.coupled) {
            (true, true) => "full",
            (true, false) => "without-coupled",
            (false, true) => "without-init",
            (false, false) => "untrained",
        }
    }
}

/// `(sqrt(mean d²), mean |d|)` over the masked cells.
pub fn rmse_mae(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>, mask: &Mask) -> Result<(f64, f64)> {
    if pred.dim() != truth.dim() || pred.dim() != mask.dim() {
        return Err(Error::shape(
            "rmse_mae",
            format!("{:?}", truth.dim()),
            format!("pred {:?} / mask {:?}", pred.dim(), mask.dim()),
        ));
    }
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
    Zip::from(&pred).and(&truth).and(mask).for_each(|&p, &t, &m| {
        if m {
            let d = p - t;
            sq += d * d;
            abs += d.abs();
            n += 1;
        }
    });
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(((sq / n as f64).sqrt(), abs / n as f64))
}

/// Predicts the mean observed training rating everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMean {
    pub value: f64,
}

impl GlobalMean {
    pub fn predict(&self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_elem((rows, cols), self.value)
    }
}

pub fn baseline_global_mean(train: &RatingMatrix) -> Result<GlobalMean> {
    train
        .mean_rating()
        .map(|value| GlobalMean { value })
        .ok_or_else(|| Error::Data("baseline needs at least one training rating".into()))
}

/// Protocol settings of a repeated cold-start experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub train: TrainConfig,
    pub repeats: usize,
    /// Fraction of shared entities used for training.
    pub split_ratio: f64,
    /// Base seed for splits and models.
    pub seed: u64,
    /// Worker threads for repeats; results do not depend on it.
    #[serde(skip)]
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn new(method: Method, train: TrainConfig) -> Self {
        Self {
            method,
            train,
            repeats: 10,
            split_ratio: 0.8,
            seed: 0,
            jobs: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.method != Method::Baseline {
            self.train.validate()?;
        }
        Ok(())
    }

    /// Model configuration for one repeat, with its own seed.
    pub fn repeat_config(&self, repeat: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(derive_seed(self.seed, streams::REPEAT_MODEL), repeat as u64),
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub rmse: f64,
    pub mae: f64,
    /// Held-out ratings scored in this repeat.
    pub test_ratings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub variant: String,
    pub repeats: Vec<RepeatResult>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    /// Fully resolved configuration that produced the report.
    pub config: serde_json::Value,
    /// Excluded from serialization so that reruns produce identical bytes.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_repeats(
        method: Method,
        variant: Variant,
        repeats: Vec<RepeatResult>,
        config: serde_json::Value,
    ) -> Self {
        let rmse: Vec<f64> = repeats.iter().map(|r| r.rmse).collect();
        let mae: Vec<f64> = repeats.iter().map(|r| r.mae).collect();
        let (rmse_mean, rmse_std) = mean_std(&rmse);
        let (mae_mean, mae_std) = mean_std(&mae);
        Self {
            method,
            variant: variant.label().to_string(),
            repeats,
            rmse_mean,
            rmse_std,
            mae_mean,
            mae_std,
            config,
            wall_clock_seconds: 0.0,
        }
    }

    /// Aligned text table: one row per repeat followed by mean and std.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .repeats
            .iter()
            .map(|r| {
                vec![
                    r.repeat.to_string(),
                    format!("{:.6}", r.rmse),
                    format!("{:.6}", r.mae),
                    r.test_ratings.to_string(),
                ]
            })
            .collect();
        rows.push(vec![
            "mean".into(),
            format!("{:.6}", self.rmse_mean),
            format!("{:.6}", self.mae_mean),
            String::new(),
        ]);
        rows.push(vec![
            "std".into(),
            format!("{:.6}", self.rmse_std),
            format!("{:.6}", self.mae_std),
            String::new(),
        ]);
        format!(
            "{} ({})\n{}",
            self.method,
            self.variant,
            render_table(&["repeat", "RMSE", "MAE", "ratings"], &rows)
        )
    }
}

/// Columns padded to equal width and joined with ` | `.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = vec![line(headers.to_vec())];
    out.push(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-|-"));
    for row in rows {
        out.push(line(row.iter().map(String::as_str).collect()));
    }
    out.join("\n") + "\n"
}

/// A trained model of either method.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Cacdr(CacdrModel),
    Lfacdr(LfacdrModel),
}

impl TrainedModel {
    pub fn predict_cold_start(&self, source_rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self {
            TrainedModel::Cacdr(m) => m.predict_cold_start(source_rows),
            TrainedModel::Lfacdr(m) => m.predict_cold_start(source_rows),
        }
    }
}

/// Held-out data of one split, ready for scoring.
struct TestSet {
    source_rows: Array2<f64>,
    truth: Array2<f64>,
    mask: Mask,
}

impl TestSet {
    fn score(&self, pred: &Array2<f64>, repeat: usize) -> Result<RepeatResult> {
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: "cold-start predictions".into(),
            });
        }
        let (rmse, mae) = rmse_mae(pred.view(), self.truth.view(), &self.mask)?;
        Ok(RepeatResult {
            repeat,
            rmse,
            mae,
            test_ratings: self.mask.iter().filter(|&&m| m).count(),
        })
    }

    fn score_model(&self, model: &TrainedModel, repeat: usize) -> Result<RepeatResult> {
        self.score(&model.predict_cold_start(self.source_rows.view())?, repeat)
    }
}

fn test_set(pair: &DomainPair, plan: &SplitPlan, views: &ColdStartViews) -> TestSet {
    let axis = pair.shared_axis;
    let held_out = views.test.rows(axis, &plan.test);
    TestSet {
        source_rows: pair.source.rows(axis, &plan.test).values,
        truth: held_out.values,
        mask: held_out.mask,
    }
}

/// Scores an already trained model on the held-out entities of split
/// `(seed, repeat)`, the same split [`run_experiment`] would draw.
pub fn score_model(
    model: &TrainedModel,
    pair: &DomainPair,
    split_ratio: f64,
    seed: u64,
    repeat: usize,
) -> Result<RepeatResult> {
    let plan = make_split(pair.shared_count(), split_ratio, seed, repeat)?;
    let views = apply_cold_start(pair, &plan)?;
    test_set(pair, &plan, &views).score_model(model, repeat)
}

/// Results of one repeat for each requested variant, plus the full model.
struct RepeatOutcome {
    results: Vec<RepeatResult>,
    full_model: Option<TrainedModel>,
}

fn init_model(method: Method, views: &TrainViews<'_>, config: &TrainConfig, run_init: bool) -> Result<TrainedModel> {
    Ok(match method {
        Method::Cacdr => {
            let mut model = CacdrModel::for_views(config, views)?;
            if run_init {
                cacdr::init_model(&mut model, views, config)?;
            }
            TrainedModel::Cacdr(model)
        }
        Method::Lfacdr => {
            let mut model = LfacdrModel::for_views(config, views)?;
            if run_init {
                lfacdr::init_model(&mut model, views, config)?;
            }
            TrainedModel::Lfacdr(model)
        }
        Method::Baseline => unreachable!("baseline has no model"),
    })
}

fn couple(model: &mut TrainedModel, views: &TrainViews<'_>, config: &TrainConfig) -> Result<()> {
    match model {
        TrainedModel::Cacdr(m) => cacdr::coupled_stage(m, views, config).map(|_| ()),
        TrainedModel::Lfacdr(m) => lfacdr::coupled_stage(m, views, config).map(|_| ()),
    }
}

fn run_repeat(
    spec: &ExperimentConfig,
    pair: &DomainPair,
    variants: &[Variant],
    repeat: usize,
) -> Result<RepeatOutcome> {
    let plan = make_split(pair.shared_count(), spec.split_ratio, spec.seed, repeat)?;
    let views = apply_cold_start(pair, &plan)?;
    let axis = pair.shared_axis;
    let test = test_set(pair, &plan, &views);

    if spec.method == Method::Baseline {
        let baseline = baseline_global_mean(&views.train)?;
        let pred = baseline.predict(test.truth.nrows(), test.truth.ncols());
        let result = test.score(&pred, repeat)?;
        return Ok(RepeatOutcome {
            results: vec![result; variants.len()],
            full_model: None,
        });
    }

    let config = spec.repeat_config(repeat);
    let train_views = TrainViews::new(&pair.source, &views.train, axis, &plan.train)?;
    let mut scored: Vec<(Variant, RepeatResult)> = Vec::new();
    let mut full_model = None;
    for run_init in [true, false] {
        let wanted: Vec<Variant> = variants.iter().copied().filter(|v| v.init == run_init).collect();
        if wanted.is_empty() {
            continue;
        }
        let mut model = init_model(spec.method, &train_views, &config, run_init)?;
        if wanted.iter().any(|v| !v.coupled) {
            let r = test.score_model(&model, repeat)?;
            scored.push((Variant { init: run_init, coupled: false }, r));
        }
        if wanted.iter().any(|v| v.coupled) {
            couple(&mut model, &train_views, &config)?;
            let r = test.score_model(&model, repeat)?;
            scored.push((Variant { init: run_init, coupled: true }, r));
            if run_init {
                full_model = Some(model);
            }
        }
    }
    let results = variants
        .iter()
        .map(|v| scored.iter().find(|(s, _)| s == v).expect("every variant scored").1)
        .collect();
    Ok(RepeatOutcome { results, full_model })
}

/// Runs every repeat (in parallel when `jobs > 1`) and returns one report
/// per variant plus the full model of repeat 0 when one was trained.
pub fn run_variants(
    spec: &ExperimentConfig,
    pair: &DomainPair,
    variants: &[Variant],
) -> Result<(Vec<EvalReport>, Option<TrainedModel>)> {
    spec.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    let started = Instant::now();
    let run = |r: usize| run_repeat(spec, pair, variants, r);
    let outcomes: Vec<RepeatOutcome> = if spec.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..spec.repeats).into_par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        (0..spec.repeats).map(run).collect::<Result<Vec<_>>>()?
    };
    let elapsed = started.elapsed().as_secs_f64();
    log::info!(
        "{} x{} repeats finished in {elapsed:.1}s",
        spec.method,
        spec.repeats
    );
    let echo = serde_json::to_value(spec)?;
    let mut full_model = None;
    let mut per_variant: Vec<Vec<RepeatResult>> = vec![Vec::new(); variants.len()];
    for (r, outcome) in outcomes.into_iter().enumerate() {
        for (slot, result) in per_variant.iter_mut().zip(outcome.results) {
            slot.push(result);
        }
        if r == 0 {
            full_model = outcome.full_model;
        }
    }
    let reports = variants
        .iter()
        .zip(per_variant)
        .map(|(v, results)| {
            let mut report = EvalReport::from_repeats(spec.method, *v, results, echo.clone());
            report.wall_clock_seconds = elapsed;
            report
        })
        .collect();
    Ok((reports, full_model))
}

/// Full pipeline (both stages) over `spec.repeats` splits.
pub fn run_experiment(spec: &ExperimentConfig, pair: &DomainPair) -> Result<EvalReport> {
    let (mut reports, _) = run_variants(spec, pair, &[Variant::FULL])?;
    Ok(reports.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "grid", content = "dims")]
pub enum AblationGrid {
    /// With and without the coupled stage.
    Coupled,
    /// With and without the initialization stage.
    Init,
    /// Full pipeline at each latent width.
    Latent(Vec<usize>),
}

impl AblationGrid {
    /// Latent widths swept by default.
    pub const DEFAULT_DIMS: [usize; 5] = [8, 32, 64, 128, 256];

    pub fn validate(&self) -> Result<()> {
        if let AblationGrid::Latent(dims) = self {
            if dims.is_empty() {
                return Err(Error::Config("latent grid needs at least one dimension".into()));
            }
            if dims.contains(&0) {
                return Err(Error::Config("latent dimensions must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// One labelled report per grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub grid: AblationGrid,
    pub method: Method,
    pub cells: Vec<(String, EvalReport)>,
}

impl AblationResult {
    pub fn report(&self, label: &str) -> Option<&EvalReport> {
        self.cells.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }

    /// Toggle grids: rows are metrics, columns are `without` / `with`.
    /// Latent grid: one row per dimension with RMSE and MAE columns.
    pub fn to_table(&self) -> String {
        let title = format!("{} ablation ({})\n", self.method, self.grid_name());
        match &self.grid {
            AblationGrid::Latent(_) => {
                let rows: Vec<Vec<String>> = self
                    .cells
                    .iter()
                    .map(|(label, r)| {
                        vec![
                            label.clone(),
                            format!("{:.6}", r.rmse_mean),
                            format!("{:.6}", r.mae_mean),
                        ]
                    })
                    .collect();
                title + &render_table(&["latent dim", "RMSE", "MAE"], &rows)
            }
            _ => {
                let metric = |name: &str, f: fn(&EvalReport) -> f64| {
                    std::iter::once(name.to_string())
                        .chain(self.cells.iter().map(|(_, r)| format!("{:.6}", f(r))))
                        .collect::<Vec<_>>()
                };
                let rows = vec![metric("RMSE", |r| r.rmse_mean), metric("MAE", |r| r.mae_mean)];
                let mut headers = vec!["metric"];
                headers.extend(self.cells.iter().map(|(l, _)| l.as_str()));
                title + &render_table(&headers, &rows)
            }
        }
    }

    fn grid_name(&self) -> &'static str {
        match self.grid {
            AblationGrid::Coupled => "coupled",
            AblationGrid::Init => "init",
            AblationGrid::Latent(_) => "latent",
        }
    }
}

/// Runs every cell of `grid` with the protocol of `spec`.
pub fn run_ablation(grid: &AblationGrid, spec: &ExperimentConfig, pair: &DomainPair) -> Result<AblationResult> {
    grid.validate()?;
    let toggle = |without: Variant| -> Result<Vec<(String, EvalReport)>> {
        let (reports, _) = run_variants(spec, pair, &[without, Variant::FULL])?;
        Ok(["without", "with"].iter().map(|l| l.to_string()).zip(reports).collect())
    };
    let cells = match grid {
        AblationGrid::Coupled => toggle(Variant::WITHOUT_COUPLED)?,
        AblationGrid::Init => toggle(Variant::WITHOUT_INIT)?,
        AblationGrid::Latent(dims) => dims
            .iter()
            .map(|&k| {
                let cell = ExperimentConfig {
                    train: spec.train.clone().with_latent_dim(k),
                    ..spec.clone()
                };
                Ok((format!("k={k}"), run_experiment(&cell, pair)?))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(AblationResult {
        grid: grid.clone(),
        method: spec.method,
        cells,
    })
}
