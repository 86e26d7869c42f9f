//! Config sweeps repeated over seeds, with mean and spread per variant.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use p2d_core::model::Mode;
use p2d_core::scene::Episode;

use crate::config::ExperimentConfig;
use crate::data::{generate_split, noiseless, Split};
use crate::error::{Result, RunError};
use crate::eval::{evaluate, EvalReport};
use crate::train::{train, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// The four module combinations.
    Modes,
    /// Number of previous frames, for the baseline and the full model.
    Frames,
    /// Prediction-loss gradients into the encoder on and off.
    Backbone,
    /// Prediction loss weight.
    Lambda,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Modes, Suite::Frames, Suite::Backbone, Suite::Lambda];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Modes => "modes",
            Suite::Frames => "frames",
            Suite::Backbone => "backbone",
            Suite::Lambda => "lambda",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| RunError::Config(format!("unknown suite `{s}` (expected modes, frames, backbone or lambda)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

fn variant(label: impl Into<String>, config: ExperimentConfig) -> Variant {
    Variant {
        label: label.into(),
        config,
    }
}

/// The configurations a suite sweeps over, derived from `base`.
pub fn suite_variants(base: &ExperimentConfig, suite: Suite) -> Vec<Variant> {
    match suite {
        Suite::Modes => Mode::ALL
            .into_iter()
            .map(|mode| {
                let mut c = base.clone();
                c.mode = mode;
                variant(mode.name(), c)
            })
            .collect(),
        Suite::Frames => {
            // Every variant reads the newest frames of the same 3-previous-frame episodes.
            let mut scene = base.scene.clone();
            scene.n_prev = scene.n_prev.max(3);
            let rows = [(Mode::BaselineConcat, 0), (Mode::BaselineConcat, 1), (Mode::BaselineConcat, 2), (Mode::BaselineConcat, 3), (Mode::P2d, 2), (Mode::P2d, 3)];
            rows.into_iter()
                .map(|(mode, n_prev)| {
                    let mut c = base.clone();
                    c.scene = scene.clone();
                    c.mode = mode;
                    c.model.n_prev = n_prev;
                    variant(format!("{}/n_prev={n_prev}", mode.name()), c)
                })
                .collect()
        }
        Suite::Backbone => [false, true]
            .into_iter()
            .map(|stop| {
                let mut c = base.clone();
                c.mode = Mode::P2d;
                c.train.stop_gradient_prediction = stop;
                variant(if stop { "stop_gradient" } else { "supervised" }, c)
            })
            .collect(),
        Suite::Lambda => [0.1, 0.3, 0.5]
            .into_iter()
            .map(|lambda| {
                let mut c = base.clone();
                c.mode = Mode::P2d;
                c.train.lambda_p = lambda;
                variant(format!("lambda_p={lambda}"), c)
            })
            .collect(),
    }
}

/// One trained and evaluated (variant, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub final_loss: f64,
    pub report: EvalReport,
    /// The same model on noise-free, dropout-free episodes.
    pub noiseless: Option<EvalReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub runs: usize,
    pub map: Stat,
    pub mate: Stat,
    pub mave: Stat,
    pub maoe: Stat,
    pub moving_map: Stat,
    pub moving_mate: Stat,
    pub moving_mave: Stat,
    /// Present when the variant decodes its prediction head.
    pub prediction_only_map: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Option<Suite>,
    pub runs: Vec<RunResult>,
    pub rows: Vec<AggregateRow>,
}

/// Groups runs by variant, keeping first-seen order.
pub fn aggregate(runs: &[RunResult]) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let group: Vec<&RunResult> = runs.iter().filter(|r| r.variant == name).collect();
            let stat = |f: &dyn Fn(&EvalReport) -> f64| Stat::of(&group.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
            let pred: Vec<f64> = group
                .iter()
                .filter_map(|r| r.report.prediction_only.as_ref().map(|p| p.map))
                .collect();
            AggregateRow {
                variant: name.to_string(),
                runs: group.len(),
                map: stat(&|r| r.all.map),
                mate: stat(&|r| r.all.mate),
                mave: stat(&|r| r.all.mave),
                maoe: stat(&|r| r.all.maoe),
                moving_map: stat(&|r| r.moving.map),
                moving_mate: stat(&|r| r.moving.mate),
                moving_mave: stat(&|r| r.moving.mave),
                prediction_only_map: (!pred.is_empty()).then(|| Stat::of(&pred)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub seeds: Vec<u64>,
    /// Also evaluate every model on noise-free copies of the eval episodes.
    pub noiseless_eval: bool,
}

/// Train/eval/noiseless episode sets, generated once per distinct scene.
type DataSets = (Vec<Episode>, Vec<Episode>, Option<Vec<Episode>>);

/// Trains and evaluates every variant under every seed. `on_run` sees each
/// result with its trained model as soon as it is available.
pub fn run_variants(
    variants: &[Variant],
    options: &SweepOptions,
    mut on_run: impl FnMut(&RunResult, &TrainOutcome, &ExperimentConfig) -> Result<()>,
) -> Result<Vec<RunResult>> {
    if options.seeds.is_empty() {
        return Err(RunError::Config("at least one seed is required".into()));
    }
    let mut cache: BTreeMap<String, DataSets> = BTreeMap::new();
    let mut results = Vec::with_capacity(variants.len() * options.seeds.len());
    for v in variants {
        v.config.validate()?;
        let key = serde_json::to_string(&(&v.config.scene, &v.config.train.data_seed, &v.config.train.train_episodes, &v.config.eval.data_seed, &v.config.eval.eval_episodes))?;
        if !cache.contains_key(&key) {
            let c = &v.config;
            let train_eps = generate_split(&c.scene, c.train.data_seed, Split::Train, c.train.train_episodes)?;
            let eval_eps = generate_split(&c.scene, c.eval.data_seed, Split::Eval, c.eval.eval_episodes)?;
            let clean = if options.noiseless_eval {
                Some(generate_split(&noiseless(&c.scene), c.eval.data_seed, Split::Eval, c.eval.eval_episodes)?)
            } else {
                None
            };
            cache.insert(key.clone(), (train_eps, eval_eps, clean));
        }
        let (train_eps, eval_eps, clean) = &cache[&key];
        for &seed in &options.seeds {
            let mut config = v.config.clone();
            config.train.seed = seed;
            let outcome = train(&config, train_eps, |_| {})?;
            let report = evaluate(&outcome.model, eval_eps, &config.eval)?;
            let noiseless = match clean {
                Some(eps) => Some(evaluate(&outcome.model, eps, &config.eval)?),
                None => None,
            };
            let result = RunResult {
                variant: v.label.clone(),
                seed,
                config_hash: config.hash(),
                final_loss: outcome.log.last().map_or(f64::NAN, |s| s.loss.total),
                report,
                noiseless,
            };
            on_run(&result, &outcome, &config)?;
            results.push(result);
        }
    }
    Ok(results)
}

pub fn run_ablation_suite(base: &ExperimentConfig, suite: Suite, options: &SweepOptions) -> Result<AblationTable> {
    let runs = run_variants(&suite_variants(base, suite), options, |_, _, _| Ok(()))?;
    Ok(AblationTable {
        suite: Some(suite),
        rows: aggregate(&runs),
        runs,
    })
}
