//! The full temporal detector and its ablation variants.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{relative_transform, warp_var, BEVFeature, FrameTag};
use crate::encoder::{self, encode_var, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::GridSpec;
use crate::head::{self, head_var, HeadConfig, HeadVars, PredictionOutput, DETECTION_NAMESPACE, PREDICTION_NAMESPACE};
use crate::losses::{build_targets, loss_vars, LossReport, LossVars, TargetMaps};
use crate::params::{ParamStore, ParamVars};
use crate::pqca::{self, pqca_var, PqcaConfig, SoftmaxScope};
use crate::query::{self, class_agnostic_heatmap, embed_var, top_k_indices, QueryMask};
use crate::scalar::Scalar;
use crate::scene::{EgoPose, Episode, SceneConfig, NUISANCE_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Prediction head, prediction-guided queries, attention, detection.
    P2d,
    /// All aligned features concatenated into the detection head.
    BaselineConcat,
    /// Prediction head whose output is concatenated with the features.
    P2dNoPfa,
    /// Attention with queries from a first-stage head over all frames.
    BaselinePlusPfa,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::BaselineConcat, Mode::P2dNoPfa, Mode::BaselinePlusPfa, Mode::P2d];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::P2d => "p2d",
            Mode::BaselineConcat => "baseline_concat",
            Mode::P2dNoPfa => "p2d_no_pfa",
            Mode::BaselinePlusPfa => "baseline_plus_pfa",
        }
    }

    /// Whether a head forecasts the current frame from previous frames only.
    pub fn has_prediction_head(&self) -> bool {
        matches!(self, Mode::P2d | Mode::P2dNoPfa)
    }

    pub fn has_first_stage(&self) -> bool {
        !matches!(self, Mode::BaselineConcat)
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self, Mode::P2d | Mode::BaselinePlusPfa)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub num_classes: usize,
    pub n_prev: usize,
    /// `C_f`, which is also the query width `C_q`.
    pub feature_channels: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: usize,
    /// Number of queries.
    pub k: usize,
    pub heads: usize,
    pub points: usize,
    pub softmax: SoftmaxScope,
    pub heatmap_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            num_classes: 2,
            n_prev: 2,
            feature_channels: 64,
            encoder_hidden: vec![32, 64, 64],
            head_hidden: 64,
            k: 128,
            heads: 4,
            points: 4,
            softmax: SoftmaxScope::Joint,
            heatmap_bias: head::HEATMAP_PRIOR_BIAS,
        }
    }
}

impl ModelConfig {
    /// Matches grid, class count and history length to a scene config.
    pub fn for_scene(scene: &SceneConfig) -> Self {
        Self {
            grid: scene.grid.clone(),
            num_classes: scene.num_classes,
            n_prev: scene.n_prev,
            ..Self::default()
        }
    }

    pub fn frames(&self) -> usize {
        self.n_prev + 1
    }

    pub fn in_channels(&self) -> usize {
        self.num_classes + NUISANCE_CHANNELS
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        self.grid.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if mode.has_prediction_head() && self.n_prev < 2 {
            return Err(Error::Config(format!(
                "mode {mode} needs at least two previous frames, got {}",
                self.n_prev
            )));
        }
        if self.k == 0 || self.k > self.grid.num_cells() {
            return Err(Error::QueryCount {
                k: self.k,
                cells: self.grid.num_cells(),
            });
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head width must be positive".into()));
        }
        self.encoder_config().validate()?;
        if mode.uses_attention() {
            self.pqca_config().validate()?;
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.in_channels(),
            occupancy_channels: self.num_classes,
            hidden: self.encoder_hidden.clone(),
            out_channels: self.feature_channels,
        }
    }

    fn head(&self, in_channels: usize) -> HeadConfig {
        HeadConfig {
            in_channels,
            hidden: self.head_hidden,
            num_classes: self.num_classes,
            heatmap_bias: self.heatmap_bias,
        }
    }

    pub fn first_stage_config(&self, mode: Mode) -> Option<HeadConfig> {
        let c = self.feature_channels;
        match mode {
            Mode::P2d | Mode::P2dNoPfa => Some(self.head(self.n_prev * c)),
            Mode::BaselinePlusPfa => Some(self.head(self.frames() * c)),
            Mode::BaselineConcat => None,
        }
    }

    pub fn detection_config(&self, mode: Mode) -> HeadConfig {
        let c = self.feature_channels;
        match mode {
            Mode::P2d | Mode::BaselinePlusPfa => self.head(2 * c),
            Mode::BaselineConcat => self.head(self.frames() * c),
            Mode::P2dNoPfa => self.head(self.num_classes + head::REGRESSION_CHANNELS + self.frames() * c),
        }
    }

    pub fn pqca_config(&self) -> PqcaConfig {
        PqcaConfig {
            channels: self.feature_channels,
            heads: self.heads,
            points: self.points,
            levels: self.frames(),
            softmax: self.softmax,
        }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample<F> {
    /// Oldest first, current last.
    pub observations: Vec<Array3<F>>,
    pub poses: Vec<EgoPose>,
    pub targets: TargetMaps<F>,
}

impl<F: Scalar> Sample<F> {
    /// The newest `frames` frames of an episode, targets from the current
    /// frame's ground truth.
    pub fn from_episode(episode: &Episode, frames: usize) -> Result<Self> {
        if frames == 0 || frames > episode.frames.len() {
            return Err(Error::InsufficientFrames {
                required: frames,
                actual: episode.frames.len(),
            });
        }
        let ep = episode.newest(frames);
        Ok(Self {
            observations: ep.frames.iter().map(|f| f.observation.mapv(|v| F::of(v as f64))).collect(),
            poses: ep.poses(),
            targets: build_targets(&ep.current().objects, &episode.grid, episode.num_classes),
        })
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Aligned features, oldest first.
    pub features: Vec<Var>,
    /// Prediction head (or the first-stage head of `baseline_plus_pfa`).
    pub first_stage: Option<HeadVars>,
    /// Selected cells in rank order.
    pub query_indices: Option<Vec<usize>>,
    pub detection: HeadVars,
}

#[derive(Debug, Clone)]
pub struct ModelOutput<F> {
    pub features: Vec<BEVFeature<F>>,
    pub first_stage: Option<PredictionOutput<F>>,
    pub query_mask: Option<QueryMask<F>>,
    pub detection: PredictionOutput<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub mode: Mode,
    pub params: ParamStore<F>,
}

/// Gradient of each parameter, by name.
pub type ParamGrads<F> = BTreeMap<String, ArrayD<F>>;

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate(mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init(&config.encoder_config(), &mut params, &mut rng);
        if let Some(first) = config.first_stage_config(mode) {
            head::init(PREDICTION_NAMESPACE, &first, &mut params, &mut rng);
        }
        if mode.uses_attention() {
            query::init(
                config.num_classes + head::REGRESSION_CHANNELS,
                config.feature_channels,
                &mut params,
                &mut rng,
            );
            pqca::init(&config.pqca_config(), &mut params, &mut rng);
        }
        head::init(DETECTION_NAMESPACE, &config.detection_config(mode), &mut params, &mut rng);
        Ok(Self { config, mode, params })
    }

    /// Rebuilds a model around existing parameters, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, mode: Mode, params: ParamStore<F>) -> Result<Self> {
        let template = Model::<F>::new(config, mode, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    context: "parameter tensor",
                    expected: t.shape().to_vec(),
                    actual: got.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config: template.config,
            mode,
            params,
        })
    }

    fn check_inputs(&self, observations: &[Array3<F>], poses: &[EgoPose]) -> Result<()> {
        let frames = self.config.frames();
        if observations.len() != frames || poses.len() != frames {
            return Err(Error::InsufficientFrames {
                required: frames,
                actual: observations.len().min(poses.len()),
            });
        }
        let (nx, ny) = self.config.grid.shape();
        let c = self.config.in_channels();
        for obs in observations {
            if obs.dim() != (nx, ny, c) {
                let (a, b, d) = obs.dim();
                return Err(Error::Shape {
                    context: "observation",
                    expected: vec![nx, ny, c],
                    actual: vec![a, b, d],
                });
            }
        }
        Ok(())
    }

    /// Encodes every frame and warps the previous ones to the last pose.
    pub fn features_var(&self, g: &mut Graph<F>, pv: &ParamVars, observations: &[Array3<F>], poses: &[EgoPose]) -> Vec<Var> {
        let enc = self.config.encoder_config();
        let last = poses.len() - 1;
        observations
            .iter()
            .zip(poses)
            .enumerate()
            .map(|(t, (obs, pose))| {
                let x = encode_var(g, pv, &enc, obs);
                if t == last {
                    x
                } else {
                    warp_var(g, x, &relative_transform(pose, &poses[last]), &self.config.grid)
                }
            })
            .collect()
    }

    /// Top-k selection on the first-stage heatmaps followed by attention.
    fn aggregate_var(&self, g: &mut Graph<F>, pv: &ParamVars, first: HeadVars, features: &[Var]) -> (Var, Vec<usize>) {
        let heat: Array3<F> = g.value(first.heatmap).clone().into_dimensionality().expect("rank 3");
        let indices = top_k_indices(&class_agnostic_heatmap(&heat), self.config.k).expect("k validated");
        let stacked = first.stacked(g);
        let queries = embed_var(g, pv, stacked, indices.clone());
        let positions: Vec<(usize, usize)> = indices.iter().map(|&idx| self.config.grid.unflatten(idx)).collect();
        let agg = pqca_var(g, pv, &self.config.pqca_config(), features, queries, &positions);
        (agg, indices)
    }

    /// Records the whole forward pass. With `stop_gradient` the features
    /// feeding the first-stage head are detached, so nothing that flows back
    /// through that head reaches the encoder.
    pub fn forward_var(
        &self,
        g: &mut Graph<F>,
        pv: &ParamVars,
        observations: &[Array3<F>],
        poses: &[EgoPose],
        stop_gradient: bool,
    ) -> ForwardVars {
        let features = self.features_var(g, pv, observations, poses);
        let current = *features.last().expect("at least one frame");
        let first_stage_inputs = |g: &mut Graph<F>, vars: &[Var]| -> Var {
            let vars: Vec<Var> = if stop_gradient {
                vars.iter().map(|&v| g.detach(v)).collect()
            } else {
                vars.to_vec()
            };
            g.concat(&vars, 2)
        };
        let n_prev = self.config.n_prev;
        let (first_stage, query_indices, detection) = match self.mode {
            Mode::BaselineConcat => {
                let x = g.concat(&features, 2);
                (None, None, head_var(g, pv, DETECTION_NAMESPACE, x))
            }
            Mode::P2dNoPfa => {
                let x = first_stage_inputs(g, &features[..n_prev]);
                let pred = head_var(g, pv, PREDICTION_NAMESPACE, x);
                let mut parts = vec![pred.stacked(g)];
                parts.extend(&features);
                let x = g.concat(&parts, 2);
                (Some(pred), None, head_var(g, pv, DETECTION_NAMESPACE, x))
            }
            Mode::P2d | Mode::BaselinePlusPfa => {
                let history = if self.mode == Mode::P2d { &features[..n_prev] } else { &features[..] };
                let x = first_stage_inputs(g, history);
                let first = head_var(g, pv, PREDICTION_NAMESPACE, x);
                let (agg, indices) = self.aggregate_var(g, pv, first, &features);
                let x = g.concat(&[agg, current], 2);
                (Some(first), Some(indices), head_var(g, pv, DETECTION_NAMESPACE, x))
            }
        };
        ForwardVars {
            features,
            first_stage,
            query_indices,
            detection,
        }
    }

    pub fn forward(&self, observations: &[Array3<F>], poses: &[EgoPose]) -> Result<ModelOutput<F>> {
        self.check_inputs(observations, poses)?;
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let fv = self.forward_var(&mut g, &pv, observations, poses, false);
        let features = fv
            .features
            .iter()
            .enumerate()
            .map(|(t, &v)| BEVFeature {
                data: g.value(v).clone().into_dimensionality().expect("rank 3"),
                timestep: t,
                frame_tag: FrameTag::AlignedToCurrent,
            })
            .collect();
        let first_stage = fv.first_stage.map(|h| h.read(&g));
        let query_mask = match (&fv.query_indices, &first_stage) {
            (Some(indices), Some(first)) => Some(QueryMask::from_indices(
                self.config.grid.shape(),
                indices,
                &class_agnostic_heatmap(&first.heatmaps),
            )),
            _ => None,
        };
        Ok(ModelOutput {
            features,
            first_stage,
            query_mask,
            detection: fv.detection.read(&g),
        })
    }

    /// Runs only the prediction head: previous observations are encoded and
    /// aligned to `current_pose`; the current observation is never used.
    pub fn predict_only(
        &self,
        prev_observations: &[Array3<F>],
        prev_poses: &[EgoPose],
        current_pose: &EgoPose,
    ) -> Result<PredictionOutput<F>> {
        if !self.mode.has_prediction_head() {
            return Err(Error::Config(format!("mode {} has no prediction head", self.mode)));
        }
        let n_prev = self.config.n_prev;
        if prev_observations.len() != n_prev || prev_poses.len() != n_prev {
            return Err(Error::InsufficientFrames {
                required: n_prev,
                actual: prev_observations.len().min(prev_poses.len()),
            });
        }
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let enc = self.config.encoder_config();
        let feats: Vec<Var> = prev_observations
            .iter()
            .zip(prev_poses)
            .map(|(obs, pose)| {
                let x = encode_var(&mut g, &pv, &enc, obs);
                warp_var(&mut g, x, &relative_transform(pose, current_pose), &self.config.grid)
            })
            .collect();
        let x = g.concat(&feats, 2);
        Ok(head_var(&mut g, &pv, PREDICTION_NAMESPACE, x).read(&g))
    }

    /// Records forward pass and loss on `g`.
    pub fn loss_var(
        &self,
        g: &mut Graph<F>,
        pv: &ParamVars,
        sample: &Sample<F>,
        lambda_p: f64,
        stop_gradient: bool,
    ) -> (ForwardVars, LossVars) {
        let fv = self.forward_var(g, pv, &sample.observations, &sample.poses, stop_gradient);
        let first = fv.first_stage.map(|h| (h.heatmap, h.regression));
        let lv = loss_vars(
            g,
            (fv.detection.heatmap, fv.detection.regression),
            first,
            &sample.targets,
            lambda_p,
        );
        (fv, lv)
    }

    /// Loss and gradients of the total loss with respect to every parameter.
    pub fn loss_and_grads(&self, sample: &Sample<F>, lambda_p: f64, stop_gradient: bool) -> Result<(LossReport, ParamGrads<F>)> {
        let step = self.training_step(sample, lambda_p, stop_gradient, false)?;
        Ok((step.report, step.grads))
    }

    /// Loss, gradients of the total loss and, when `probe` is set and the
    /// mode has a first stage, the gradient probe of `L_pred` alone taken
    /// from the same graph.
    pub fn training_step(
        &self,
        sample: &Sample<F>,
        lambda_p: f64,
        stop_gradient: bool,
        probe: bool,
    ) -> Result<StepResult<F>> {
        self.check_inputs(&sample.observations, &sample.poses)?;
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, true);
        let (_, lv) = self.loss_var(&mut g, &pv, sample, lambda_p, stop_gradient);
        let probe = match (probe, lv.pred_cls, lv.pred_reg) {
            (true, Some(cls), Some(reg)) => {
                let pred = g.add(cls, reg);
                Some(probe_from(&collect_grads(&g, &pv, g.backward(pred))))
            }
            _ => None,
        };
        let grads = collect_grads(&g, &pv, g.backward(lv.total));
        Ok(StepResult {
            report: lv.report(&g),
            grads,
            probe,
        })
    }

    /// Gradients of the first-stage loss alone, `L_pred`, with respect to
    /// every parameter.
    pub fn prediction_loss_grads(&self, sample: &Sample<F>, stop_gradient: bool) -> Result<ParamGrads<F>> {
        self.check_inputs(&sample.observations, &sample.poses)?;
        if !self.mode.has_first_stage() {
            return Err(Error::Config(format!("mode {} has no prediction loss", self.mode)));
        }
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, true);
        let (_, lv) = self.loss_var(&mut g, &pv, sample, 1.0, stop_gradient);
        let cls = lv.pred_cls.expect("first stage present");
        let reg = lv.pred_reg.expect("first stage present");
        let pred = g.add(cls, reg);
        Ok(collect_grads(&g, &pv, g.backward(pred)))
    }

    /// Largest absolute gradient of `L_pred` over the encoder parameters.
    pub fn prediction_gradient_probe(&self, sample: &Sample<F>, stop_gradient: bool) -> Result<GradientProbe> {
        Ok(probe_from(&self.prediction_loss_grads(sample, stop_gradient)?))
    }
}

fn collect_grads<F: Scalar>(g: &Graph<F>, pv: &ParamVars, mut grads: crate::graph::Gradients<F>) -> ParamGrads<F> {
    pv.iter()
        .map(|(name, &v)| {
            let grad = grads
                .take(v)
                .unwrap_or_else(|| ArrayD::zeros(g.value(v).raw_dim()));
            (name.clone(), grad)
        })
        .collect()
}

fn probe_from<F: Scalar>(grads: &ParamGrads<F>) -> GradientProbe {
    let max_abs = |prefix: &str| {
        grads
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .flat_map(|(_, g)| g.iter().map(|v| v.as_f64().abs()))
            .fold(0.0f64, f64::max)
    };
    GradientProbe {
        encoder: max_abs(&format!("{}.", encoder::NAMESPACE)),
        prediction_head: max_abs(&format!("{PREDICTION_NAMESPACE}.")),
    }
}

#[derive(Debug, Clone)]
pub struct StepResult<F> {
    pub report: LossReport,
    pub grads: ParamGrads<F>,
    pub probe: Option<GradientProbe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientProbe {
    pub encoder: f64,
    pub prediction_head: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_episode;

    fn tiny(n_prev: usize) -> ModelConfig {
        ModelConfig {
            grid: GridSpec::centered(12, 12, 1.0),
            n_prev,
            feature_channels: 8,
            encoder_hidden: vec![6],
            head_hidden: 6,
            k: 10,
            heads: 2,
            points: 2,
            ..ModelConfig::default()
        }
    }

    fn sample(config: &ModelConfig, seed: u64) -> Sample<f64> {
        let scene = SceneConfig {
            grid: config.grid.clone(),
            n_prev: config.n_prev.max(2),
            object_count: [2, 3],
            ..SceneConfig::default()
        };
        let ep = generate_episode(&scene, seed).unwrap();
        Sample::from_episode(&ep, config.frames()).unwrap()
    }

    #[test]
    fn every_mode_runs_and_widths_follow_the_mode() {
        let config = tiny(2);
        assert_eq!(config.detection_config(Mode::P2d).in_channels, 16);
        assert_eq!(config.detection_config(Mode::BaselineConcat).in_channels, 24);
        assert_eq!(config.detection_config(Mode::P2dNoPfa).in_channels, 34);
        for mode in Mode::ALL {
            let model = Model::<f64>::new(config.clone(), mode, 1).unwrap();
            let s = sample(&config, 3);
            let out = model.forward(&s.observations, &s.poses).unwrap();
            assert_eq!(out.detection.heatmaps.dim(), (12, 12, 2));
            assert_eq!(out.first_stage.is_some(), mode.has_first_stage());
            assert_eq!(out.query_mask.as_ref().map(|m| m.count()), mode.uses_attention().then_some(10));
            let (report, grads) = model.loss_and_grads(&s, 0.5, false).unwrap();
            assert!(report.total.is_finite() && report.total > 0.0);
            assert_eq!(grads.len(), model.params.len());
            assert_eq!(mode.name().parse::<Mode>().unwrap(), mode);
        }
    }

    #[test]
    fn prediction_heads_need_two_previous_frames() {
        assert!(Model::<f32>::new(tiny(1), Mode::P2d, 0).is_err());
        assert!(Model::<f32>::new(tiny(1), Mode::P2dNoPfa, 0).is_err());
        assert!(Model::<f32>::new(tiny(0), Mode::BaselineConcat, 0).is_ok());
        let config = tiny(0);
        let model = Model::<f64>::new(config.clone(), Mode::BaselineConcat, 0).unwrap();
        let s = sample(&config, 1);
        assert_eq!(s.observations.len(), 1);
        assert!(model.forward(&s.observations, &s.poses).is_ok());
    }

    #[test]
    fn namespaces_are_disjoint() {
        let model = Model::<f32>::new(tiny(2), Mode::P2d, 0).unwrap();
        let ns = model.params.namespaces();
        for expected in ["encoder", "pred_head", "det_head", "query_embed", "pqca"] {
            assert!(ns.iter().any(|n| n == expected), "{expected} missing from {ns:?}");
        }
        let pred: Vec<_> = model.params.names_in("pred_head").collect();
        assert!(pred.iter().all(|n| !n.starts_with("det_head")));
    }

    #[test]
    fn stop_gradient_blocks_the_encoder_only() {
        let config = tiny(2);
        let model = Model::<f64>::new(config.clone(), Mode::P2d, 4).unwrap();
        let s = sample(&config, 5);
        let open = model.prediction_gradient_probe(&s, false).unwrap();
        let closed = model.prediction_gradient_probe(&s, true).unwrap();
        assert!(open.encoder > 0.0);
        assert_eq!(closed.encoder, 0.0);
        assert!(closed.prediction_head > 0.0);
        assert_eq!(open.prediction_head, closed.prediction_head);
    }

    #[test]
    fn predict_only_ignores_the_current_frame() {
        let config = tiny(2);
        let model = Model::<f64>::new(config.clone(), Mode::P2d, 6).unwrap();
        let s = sample(&config, 7);
        let p = model.predict_only(&s.observations[..2], &s.poses[..2], &s.poses[2]).unwrap();
        let full = model.forward(&s.observations, &s.poses).unwrap();
        assert_eq!(Some(p.clone()), full.first_stage);
        let mut changed = s.observations.clone();
        changed[2].fill(5.0);
        let again = model.forward(&changed, &s.poses).unwrap();
        assert_eq!(again.first_stage, Some(p));
        assert_ne!(again.detection, full.detection);
    }

    #[test]
    fn from_params_validates_shapes() {
        let config = tiny(2);
        let model = Model::<f32>::new(config.clone(), Mode::P2d, 0).unwrap();
        let rebuilt = Model::from_params(config.clone(), Mode::P2d, model.params.clone()).unwrap();
        assert_eq!(rebuilt, model);
        assert!(Model::from_params(config, Mode::BaselineConcat, model.params).is_err());
    }
}
