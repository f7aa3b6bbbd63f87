//! Encoder-decoder refinement network over a crop.
//!
//! Level 0 is the full crop. Each further encoder stage samples a subset of the
//! previous level by farthest point sampling and pools features from its `k_attn`
//! nearest finer points. The decoder walks back up, interpolating coarse features
//! onto the finer level and concatenating the encoder skip features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{centroid, fps_from, geometric_start, interpolation_weights, knn_table};
use super::layer::{pt_layer_forward, AttentionMode, Bound, Linear, Neighborhood, ParamStore, PtLayerParams};
use super::NetError;
use crate::autodiff::{sigmoid, Graph, RowMix, Tensor, Var};
use crate::spatial::SpatialIndex;

pub const INPUT_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Fraction of the previous level's points kept by this stage.
    pub ratio: f64,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub stages: Vec<StageConfig>,
    pub k_attn: usize,
    pub attention: AttentionMode,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stages: vec![StageConfig { ratio: 1.0, width: 32 }, StageConfig { ratio: 0.25, width: 64 }],
            k_attn: 16,
            attention: AttentionMode::Vector,
            seed: 0,
            learning_rate: 1e-2,
            momentum: 0.9,
            steps: 300,
        }
    }
}

impl NetworkConfig {
    /// Every violated constraint as `(field, problem)`.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.stages.is_empty() {
            out.push(("network.stages".into(), "at least one stage required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.ratio > 0.0 && s.ratio <= 1.0) {
                out.push((format!("network.stages[{i}].ratio"), format!("{} not in (0, 1]", s.ratio)));
            }
            if s.width == 0 {
                out.push((format!("network.stages[{i}].width"), "must be >= 1".into()));
            }
        }
        if self.stages.first().is_some_and(|s| s.ratio != 1.0) {
            out.push(("network.stages[0].ratio".into(), "first stage must keep every point (1.0)".into()));
        }
        if self.k_attn == 0 {
            out.push(("network.k_attn".into(), "must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push(("network.learning_rate".into(), format!("{} must be a positive real", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(("network.momentum".into(), format!("{} not in [0, 1)", self.momentum)));
        }
        out
    }

    pub fn validate(&self) -> Result<(), NetError> {
        match self.problems().into_iter().next() {
            None => Ok(()),
            Some((field, msg)) => Err(NetError::InvalidConfig(format!("{field}: {msg}"))),
        }
    }
}

/// Geometry of one point level.
#[derive(Debug, Clone)]
pub struct Level {
    pub points: Vec<[f64; 3]>,
    pub neighborhood: Neighborhood,
    /// Mean pooling from the previous (finer) level; absent for level 0.
    pub pool: Option<RowMix>,
    /// Interpolation from the next (coarser) level; absent for the coarsest.
    pub up: Option<RowMix>,
}

/// Everything about a crop the forward pass needs that does not depend on parameters.
#[derive(Debug, Clone)]
pub struct CropGeometry {
    pub levels: Vec<Level>,
    /// `n × 4`: centered coordinates and the initial-mask flag.
    pub input: Tensor,
}

impl CropGeometry {
    pub fn build(points: &[[f64; 3]], init_flags: &[bool], cfg: &NetworkConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        if points.is_empty() {
            return Err(NetError::EmptyCrop);
        }
        if points.len() != init_flags.len() {
            return Err(NetError::ShapeMismatch(format!(
                "{} points but {} init flags",
                points.len(),
                init_flags.len()
            )));
        }
        let c = centroid(points);
        let mut input = Vec::with_capacity(points.len() * INPUT_CHANNELS);
        for (p, &f) in points.iter().zip(init_flags) {
            input.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2], if f { 1.0 } else { 0.0 }]);
        }
        let input = Tensor::new(points.len(), INPUT_CHANNELS, input);

        let mut levels: Vec<Level> = Vec::with_capacity(cfg.stages.len());
        for (i, stage) in cfg.stages.iter().enumerate() {
            let (pts, pool) = if i == 0 {
                (points.to_vec(), None)
            } else {
                let prev = &levels[i - 1].points;
                let m = ((prev.len() as f64 * stage.ratio).round() as usize).clamp(1, prev.len());
                let pts: Vec<[f64; 3]> = if m == prev.len() {
                    prev.clone()
                } else {
                    fps_from(prev, m, geometric_start(prev)).into_iter().map(|j| prev[j]).collect()
                };
                let kp = cfg.k_attn.min(prev.len());
                let table = knn_table(&SpatialIndex::build(prev.clone()), &pts, kp);
                let pool = RowMix::weighted(kp, table, vec![1.0 / kp as f64; pts.len() * kp]);
                (pts, Some(pool))
            };
            let k = cfg.k_attn.min(pts.len());
            let neighborhood = Neighborhood::build(&pts, k)?;
            levels.push(Level { points: pts, neighborhood, pool, up: None });
        }
        for i in 0..levels.len().saturating_sub(1) {
            let up = interpolation_weights(&levels[i + 1].points, &levels[i].points);
            levels[i].up = Some(up);
        }
        Ok(Self { levels, input })
    }

    pub fn len(&self) -> usize {
        self.input.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    /// Level 0: embedding of the input channels; later levels: projection before pooling.
    proj: Linear,
    attn: PtLayerParams,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    fuse: Linear,
    attn: PtLayerParams,
}

/// Parameters plus the layer layout that indexes them.
#[derive(Debug, Clone)]
pub struct RefineNet {
    cfg: NetworkConfig,
    store: ParamStore,
    encoder: Vec<EncoderStage>,
    bottleneck: Linear,
    /// `decoder[i]` produces level `i` from level `i + 1`.
    decoder: Vec<DecoderStage>,
    head_hidden: Linear,
    head_out: Linear,
}

impl RefineNet {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: &NetworkConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let widths: Vec<usize> = cfg.stages.iter().map(|s| s.width).collect();
        let mut encoder = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let c_in = if i == 0 { INPUT_CHANNELS } else { widths[i - 1] };
            let proj = Linear::init(&mut store, &format!("enc{i}.proj"), c_in, w, true, &mut rng);
            let attn = PtLayerParams::init(&mut store, &format!("enc{i}.pt"), w, w, &mut rng);
            encoder.push(EncoderStage { proj, attn });
        }
        let last = *widths.last().expect("validated non-empty");
        let bottleneck = Linear::init(&mut store, "bottleneck", last, last, true, &mut rng);
        let mut decoder = Vec::new();
        for i in 0..widths.len() - 1 {
            let fuse =
                Linear::init(&mut store, &format!("dec{i}.fuse"), widths[i + 1] + widths[i], widths[i], true, &mut rng);
            let attn = PtLayerParams::init(&mut store, &format!("dec{i}.pt"), widths[i], widths[i], &mut rng);
            decoder.push(DecoderStage { fuse, attn });
        }
        let head_hidden = Linear::init(&mut store, "head.0", widths[0], widths[0], true, &mut rng);
        let head_out = Linear::init(&mut store, "head.1", widths[0], 1, true, &mut rng);
        let mut net = Self { cfg: cfg.clone(), store, encoder, bottleneck, decoder, head_hidden, head_out };
        // Start from checkpoint precision so an untrained model also round-trips exactly.
        net.round_to_f32();
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn block(
        &self,
        g: &mut Graph,
        p: &Bound,
        attn: &PtLayerParams,
        nb: &Neighborhood,
        x: Var,
    ) -> Result<Var, NetError> {
        let y = pt_layer_forward(g, p, attn, nb, x, self.cfg.attention)?.out;
        let y = g.add(x, y);
        Ok(g.relu(y))
    }

    /// Records the forward pass on `g`; returns the `n × 1` logits.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, geom: &CropGeometry) -> Result<Var, NetError> {
        if geom.levels.len() != self.encoder.len() {
            return Err(NetError::ShapeMismatch(format!(
                "geometry has {} levels, network has {} stages",
                geom.levels.len(),
                self.encoder.len()
            )));
        }
        let mut x = g.constant(geom.input.clone());
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (stage, level) in self.encoder.iter().zip(&geom.levels) {
            let h = stage.proj.forward(g, p, x);
            let h = g.relu(h);
            let h = match &level.pool {
                Some(pool) => g.mix(h, pool.clone()),
                None => h,
            };
            x = self.block(g, p, &stage.attn, &level.neighborhood, h)?;
            skips.push(x);
        }
        let h = self.bottleneck.forward(g, p, x);
        x = g.relu(h);
        for i in (0..self.decoder.len()).rev() {
            let stage = &self.decoder[i];
            let level = &geom.levels[i];
            let up = g.mix(x, level.up.clone().expect("non-coarsest level has interpolation"));
            let cat = g.concat_cols(up, skips[i]);
            let h = stage.fuse.forward(g, p, cat);
            let h = g.relu(h);
            x = self.block(g, p, &stage.attn, &level.neighborhood, h)?;
        }
        let h = self.head_hidden.forward(g, p, x);
        let h = g.relu(h);
        Ok(self.head_out.forward(g, p, h))
    }

    pub fn logits(&self, geom: &CropGeometry) -> Result<Vec<f64>, NetError> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward_graph(&mut g, &p, geom)?;
        let logits = g.value(out).data().to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteOutput);
        }
        Ok(logits)
    }

    pub fn probabilities(&self, geom: &CropGeometry) -> Result<Vec<f64>, NetError> {
        Ok(self.logits(geom)?.into_iter().map(sigmoid).collect())
    }

    /// Rounds every parameter to the nearest f32, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for t in self.store.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
