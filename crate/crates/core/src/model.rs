//! End-to-end classifier: tiny 3D-conv backbone, optional dual-branch
//! attention with adaptive fusion, classification head, and an optional
//! projection head producing unit-norm embeddings for the contrastive
//! losses.

use std::str::FromStr;

use crate::freq::{FreqBranch, FreqState};
use crate::fusion::{FusionGate, FusionWeights};
use crate::graph::{EngineError, Graph, NodeId, Result};
use crate::init;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::temporal::{TemporalBranch, TemporalState};
use crate::tensor::{Tensor, VideoBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    /// Stacked strided 3D convolutions with tanh nonlinearities.
    Tiny3dConv,
    /// Pass-through stub; attention branches see the raw input.
    Identity,
}

impl FromStr for Backbone {
    type Err = EngineError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny3dconv" => Ok(Backbone::Tiny3dConv),
            "identity" => Ok(Backbone::Identity),
            other => Err(EngineError::InvalidConfig(format!("unknown backbone '{other}'"))),
        }
    }
}

impl Backbone {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backbone::Tiny3dConv => "tiny3dconv",
            Backbone::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub time_steps: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels per backbone stage; each stage halves H and W.
    pub stage_channels: Vec<usize>,
    /// Temporal stride applied at every backbone stage.
    pub temporal_stride: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub dam_enabled: bool,
    pub freq_enabled: bool,
    pub temporal_enabled: bool,
    /// Controls whether the projection head exists (and with it the
    /// contrastive side of the objective).
    pub dsm_enabled: bool,
    /// Fusion weight normalization via two-logit softmax instead of
    /// renormalized sigmoids.
    pub fusion_softmax: bool,
    /// Fitting-stage variance per sample instead of per frame.
    pub freq_variance_per_sample: bool,
    /// Fixed adversarial budget of the frequency branch.
    pub epsilon_adv: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::Tiny3dConv,
            time_steps: 8,
            in_channels: 1,
            height: 32,
            width: 32,
            stage_channels: vec![4, 8],
            temporal_stride: 1,
            num_classes: 4,
            embed_dim: 16,
            dam_enabled: true,
            freq_enabled: true,
            temporal_enabled: true,
            dsm_enabled: true,
            fusion_softmax: false,
            freq_variance_per_sample: false,
            epsilon_adv: 0.03,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(EngineError::InvalidConfig("need at least two classes".into()));
        }
        if self.time_steps < 1 || self.height < 1 || self.width < 1 || self.in_channels < 1 {
            return Err(EngineError::InvalidConfig("input extents must be positive".into()));
        }
        if self.dsm_enabled && self.embed_dim < 2 {
            return Err(EngineError::InvalidConfig("embedding dimension must be at least 2".into()));
        }
        if self.dam_enabled && !self.freq_enabled && !self.temporal_enabled {
            return Err(EngineError::InvalidConfig(
                "attention module enabled but both branches disabled".into(),
            ));
        }
        if self.backbone == Backbone::Tiny3dConv {
            if self.stage_channels.is_empty() {
                return Err(EngineError::InvalidConfig("backbone needs at least one stage".into()));
            }
            if self.temporal_stride == 0 {
                return Err(EngineError::InvalidConfig("temporal stride must be positive".into()));
            }
            let (t, _, h, w) = self.feature_dims()?;
            if t < 1 || h < 1 || w < 1 {
                return Err(EngineError::InvalidConfig(format!(
                    "backbone collapses the input to {t}x{h}x{w}"
                )));
            }
        }
        Ok(())
    }

    /// Feature geometry after the backbone: `(T', C', H', W')`.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize, usize)> {
        match self.backbone {
            Backbone::Identity => {
                Ok((self.time_steps, self.in_channels, self.height, self.width))
            }
            Backbone::Tiny3dConv => {
                let ext = |n: usize, stride: usize| -> Result<usize> {
                    let padded = n + 2;
                    if padded < 3 {
                        return Err(EngineError::InvalidConfig(format!(
                            "extent {n} too small for the 3x3x3 kernel"
                        )));
                    }
                    Ok((padded - 3) / stride + 1)
                };
                let (mut t, mut h, mut w) = (self.time_steps, self.height, self.width);
                for _ in &self.stage_channels {
                    t = ext(t, self.temporal_stride)?;
                    h = ext(h, 2)?;
                    w = ext(w, 2)?;
                }
                Ok((t, *self.stage_channels.last().unwrap(), h, w))
            }
        }
    }
}

/// The four ablation settings: baseline, attention only, loss scaling only,
/// and the full stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationSetting {
    A,
    B,
    C,
    D,
}

impl FromStr for AblationSetting {
    type Err = EngineError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(AblationSetting::A),
            "b" | "B" => Ok(AblationSetting::B),
            "c" | "C" => Ok(AblationSetting::C),
            "d" | "D" => Ok(AblationSetting::D),
            other => Err(EngineError::InvalidConfig(format!("unknown ablation setting '{other}'"))),
        }
    }
}

impl AblationSetting {
    pub fn all() -> [AblationSetting; 4] {
        [AblationSetting::A, AblationSetting::B, AblationSetting::C, AblationSetting::D]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationSetting::A => "a",
            AblationSetting::B => "b",
            AblationSetting::C => "c",
            AblationSetting::D => "d",
        }
    }

    pub fn attention_on(&self) -> bool {
        matches!(self, AblationSetting::B | AblationSetting::D)
    }

    pub fn scaling_on(&self) -> bool {
        matches!(self, AblationSetting::C | AblationSetting::D)
    }

    /// Applies the setting's module toggles to a base configuration.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.dam_enabled = self.attention_on();
        cfg.freq_enabled = self.attention_on();
        cfg.temporal_enabled = self.attention_on();
        cfg.dsm_enabled = self.scaling_on();
        cfg
    }
}

#[derive(Debug)]
pub struct DamState {
    pub freq: Option<FreqState>,
    pub temporal: Option<TemporalState>,
    pub weights: Option<FusionWeights>,
}

#[derive(Debug)]
pub struct ModelForward {
    pub logits: NodeId,
    /// Unit-norm projection embeddings; present iff the projection head
    /// exists.
    pub embeddings: Option<NodeId>,
    pub backbone_features: NodeId,
    pub fused_features: NodeId,
    pub dam: Option<DamState>,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    freq: Option<FreqBranch<T>>,
    temporal: Option<TemporalBranch>,
    fusion: Option<FusionGate>,
    feat_dims: (usize, usize, usize, usize),
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let feat_dims = cfg.feature_dims()?;
        let (_, c, h, w) = feat_dims;
        let freq = if cfg.dam_enabled && cfg.freq_enabled {
            let mut b = FreqBranch::new("dam.freq", c, h, w);
            b.epsilon_adv = cfg.epsilon_adv;
            b.variance_per_frame = !cfg.freq_variance_per_sample;
            Some(b)
        } else {
            None
        };
        let temporal = if cfg.dam_enabled && cfg.temporal_enabled {
            Some(TemporalBranch::new("dam.temporal", c))
        } else {
            None
        };
        let fusion = if freq.is_some() && temporal.is_some() {
            let mut f = FusionGate::new("dam.fusion", c);
            f.softmax_weights = cfg.fusion_softmax;
            Some(f)
        } else {
            None
        };
        Ok(Model { cfg, freq, temporal, fusion, feat_dims })
    }

    pub fn feature_dims(&self) -> (usize, usize, usize, usize) {
        self.feat_dims
    }

    /// Registers every learnable tensor. Initial values depend only on
    /// `(seed, name)`, so settings that share a submodule share its
    /// initialization.
    pub fn register(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        if self.cfg.backbone == Backbone::Tiny3dConv {
            let mut c_in = self.cfg.in_channels;
            for (i, &c_out) in self.cfg.stage_channels.iter().enumerate() {
                let wname = format!("backbone.stage{i}.w");
                let mut rng = init::rng_for(seed, &wname);
                let fan_in = (c_in * 27) as f64;
                store.register(
                    &wname,
                    init::normal_tensor(&mut rng, &[c_out, c_in, 3, 3, 3], (1.0 / fan_in).sqrt()),
                )?;
                store.register(&format!("backbone.stage{i}.b"), Tensor::zeros(&[c_out]))?;
                c_in = c_out;
            }
        }
        if let Some(freq) = &self.freq {
            freq.register(store, seed)?;
        }
        if let Some(temporal) = &self.temporal {
            temporal.register(store, seed)?;
        }
        if let Some(fusion) = &self.fusion {
            fusion.register(store)?;
        }
        let in_dim = self.head_input_dim();
        let mut rng = init::rng_for(seed, "head.cls.w");
        store.register("head.cls.w", init::normal_tensor(&mut rng, &[in_dim, self.cfg.num_classes], 0.02))?;
        store.register("head.cls.b", Tensor::zeros(&[self.cfg.num_classes]))?;
        if self.cfg.dsm_enabled {
            let mut rng = init::rng_for(seed, "head.proj.w");
            store.register(
                "head.proj.w",
                init::normal_tensor(&mut rng, &[in_dim, self.cfg.embed_dim], (1.0 / in_dim as f64).sqrt()),
            )?;
            store.register("head.proj.b", Tensor::zeros(&[self.cfg.embed_dim]))?;
        }
        Ok(())
    }

    pub fn init_store(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        self.register(&mut store, seed)?;
        Ok(store)
    }

    fn finite_check(&self, g: &Graph<T>, node: NodeId, stage: &str) -> Result<()> {
        if !g.value(node).all_finite() {
            return Err(EngineError::NonFinite(stage.to_string()));
        }
        Ok(())
    }

    pub fn backbone_forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        match self.cfg.backbone {
            Backbone::Identity => Ok(x),
            Backbone::Tiny3dConv => {
                let ts = self.cfg.temporal_stride;
                let mut cur = x;
                for i in 0..self.cfg.stage_channels.len() {
                    let w = g.param(store, &format!("backbone.stage{i}.w"))?;
                    let b = g.param(store, &format!("backbone.stage{i}.b"))?;
                    let conv = g.conv3d(cur, w, Some(b), [ts, 2, 2], [1, 1, 1])?;
                    cur = g.tanh(conv);
                    self.finite_check(g, cur, &format!("backbone.stage{i}"))?;
                }
                Ok(cur)
            }
        }
    }

    fn dam_forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: NodeId,
    ) -> Result<(NodeId, DamState)> {
        let freq_out = match &self.freq {
            Some(branch) => {
                let (x_s, state) = branch.forward(g, store, feats)?;
                self.finite_check(g, x_s, "dam.freq")?;
                Some((x_s, state))
            }
            None => None,
        };
        let temporal_out = match &self.temporal {
            Some(branch) => {
                let (x_t, state) = branch.forward(g, store, feats)?;
                self.finite_check(g, x_t, "dam.temporal")?;
                Some((x_t, state))
            }
            None => None,
        };
        match (freq_out, temporal_out) {
            (Some((x_s, fs)), Some((x_t, ts))) => {
                let fusion = self.fusion.as_ref().expect("both branches imply fusion");
                let (fused, weights) = fusion.fuse(g, store, x_t, x_s)?;
                self.finite_check(g, fused, "dam.fusion")?;
                Ok((fused, DamState { freq: Some(fs), temporal: Some(ts), weights: Some(weights) }))
            }
            (Some((x_s, fs)), None) => {
                Ok((x_s, DamState { freq: Some(fs), temporal: None, weights: None }))
            }
            (None, Some((x_t, ts))) => {
                Ok((x_t, DamState { freq: None, temporal: Some(ts), weights: None }))
            }
            (None, None) => unreachable!("dam_forward called with both branches disabled"),
        }
    }

    /// Head input: spatial mean per frame and channel, flattened to
    /// `[B, T' * C']` and standardized per sample. Keeping the temporal axis
    /// preserves per-sample dynamics that plain channel pooling would
    /// average away; the standardization removes the common-mode component
    /// that would otherwise make every sample's descriptor point the same
    /// way and push all embedding similarities into the saturated band.
    fn pooled_descriptor(&self, g: &mut Graph<T>, fused: NodeId) -> Result<NodeId> {
        let shape = g.shape(fused).to_vec();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let pooled = g.mean(fused, &[3, 4])?;
        let flat = g.reshape(pooled, &[b, t * c])?;
        let mu = g.mean(flat, &[1])?;
        let mu_b = g.expand(mu, &[b, t * c], &[0])?;
        let centered = g.sub(flat, mu_b)?;
        let var = g.variance(flat, &[1])?;
        let var_eps = g.add_const(var, T::from_f64(1e-6));
        let log_v = g.log(var_eps);
        let neg_half = g.scale(log_v, T::from_f64(-0.5));
        let inv_std = g.exp(neg_half);
        let inv_std_b = g.expand(inv_std, &[b, t * c], &[0])?;
        g.mul(centered, inv_std_b)
    }

    /// Width of the flattened head descriptor.
    pub fn head_input_dim(&self) -> usize {
        let (t, c, _, _) = self.feat_dims;
        t * c
    }

    fn heads_forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fused: NodeId,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let b_dim = g.shape(fused)[0];
        let pooled = self.pooled_descriptor(g, fused)?;

        let wc = g.param(store, "head.cls.w")?;
        let raw_logits = g.matmul(pooled, wc)?;
        let bc = g.param(store, "head.cls.b")?;
        let bc_b = g.expand(bc, &[b_dim, self.cfg.num_classes], &[1])?;
        let logits = g.add(raw_logits, bc_b)?;
        self.finite_check(g, logits, "head.cls")?;

        let embeddings = if self.cfg.dsm_enabled {
            let wp = g.param(store, "head.proj.w")?;
            let raw = g.matmul(pooled, wp)?;
            let bp = g.param(store, "head.proj.b")?;
            let bp_b = g.expand(bp, &[b_dim, self.cfg.embed_dim], &[1])?;
            let e = g.add(raw, bp_b)?;
            let norms = g.l2_norm(e, &[1])?;
            let norms_eps = g.add_const(norms, T::from_f64(1e-12));
            let norms_b = g.expand(norms_eps, &[b_dim, self.cfg.embed_dim], &[0])?;
            let z = g.div(e, norms_b)?;
            self.finite_check(g, z, "head.proj")?;
            Some(z)
        } else {
            None
        };
        Ok((logits, embeddings))
    }

    /// Full forward pass. Every stage is checked for non-finite activations
    /// and reported by name.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: &VideoBatch<T>,
    ) -> Result<ModelForward> {
        let (_, t, c, h, w) = x.dims();
        if (t, c, h, w)
            != (self.cfg.time_steps, self.cfg.in_channels, self.cfg.height, self.cfg.width)
        {
            return Err(EngineError::ShapeMismatch {
                op: "model_forward",
                details: format!(
                    "input {:?} vs configured [_, {}, {}, {}, {}]",
                    x.tensor().shape(),
                    self.cfg.time_steps,
                    self.cfg.in_channels,
                    self.cfg.height,
                    self.cfg.width
                ),
            });
        }
        let xn = g.input(x.tensor().clone(), false);
        let feats = self.backbone_forward(g, store, xn)?;
        let (fused, dam) = if self.cfg.dam_enabled {
            let (fused, state) = self.dam_forward(g, store, feats)?;
            (fused, Some(state))
        } else {
            (feats, None)
        };
        let (logits, embeddings) = self.heads_forward(g, store, fused)?;
        Ok(ModelForward { logits, embeddings, backbone_features: feats, fused_features: fused, dam })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{rng_for, uniform01};

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            time_steps: 4,
            in_channels: 1,
            height: 8,
            width: 8,
            stage_channels: vec![2, 3],
            embed_dim: 4,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    fn rand_batch(seed: u64, cfg: &ModelConfig, b: usize) -> VideoBatch<f64> {
        let mut rng = rng_for(seed, "model-test");
        let shape = [b, cfg.time_steps, cfg.in_channels, cfg.height, cfg.width];
        let n: usize = shape.iter().product();
        VideoBatch::new(Tensor::from_vec(
            &shape,
            (0..n).map(|_| 2.0 * uniform01(&mut rng) - 1.0).collect(),
        ))
    }

    #[test]
    fn feature_geometry_matches_the_conv_arithmetic() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.feature_dims().unwrap(), (8, 8, 8, 8));
        let cfg2 = ModelConfig { temporal_stride: 2, ..ModelConfig::default() };
        assert_eq!(cfg2.feature_dims().unwrap(), (2, 8, 8, 8));
    }

    #[test]
    fn ablation_settings_toggle_the_right_modules() {
        let base = toy_cfg();
        let a = AblationSetting::A.apply(&base);
        assert!(!a.dam_enabled && !a.dsm_enabled);
        let b = AblationSetting::B.apply(&base);
        assert!(b.dam_enabled && !b.dsm_enabled);
        let c = AblationSetting::C.apply(&base);
        assert!(!c.dam_enabled && c.dsm_enabled);
        let d = AblationSetting::D.apply(&base);
        assert!(d.dam_enabled && d.dsm_enabled);
        // settings a and b differ exactly in the attention flags
        let mut b_without = b.clone();
        b_without.dam_enabled = false;
        b_without.freq_enabled = false;
        b_without.temporal_enabled = false;
        assert_eq!(a, b_without);
        assert_eq!("b".parse::<AblationSetting>().unwrap(), AblationSetting::B);
        assert!("x".parse::<AblationSetting>().is_err());
    }

    #[test]
    fn enabled_module_with_no_branches_is_rejected() {
        let cfg = ModelConfig {
            dam_enabled: true,
            freq_enabled: false,
            temporal_enabled: false,
            ..toy_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parameter_counts_are_ordered_across_settings() {
        let base = toy_cfg();
        let count = |setting: AblationSetting| -> usize {
            let cfg = setting.apply(&base);
            let model = Model::<f64>::new(cfg).unwrap();
            model.init_store(1).unwrap().scalar_count()
        };
        let (a, b, c, d) = (
            count(AblationSetting::A),
            count(AblationSetting::B),
            count(AblationSetting::C),
            count(AblationSetting::D),
        );
        assert!(a < b && b < d, "a {a} b {b} d {d}");
        // the loss-scaling setting adds exactly the projection head
        let in_dim = Model::<f64>::new(base.clone()).unwrap().head_input_dim();
        assert_eq!(c, a + in_dim * base.embed_dim + base.embed_dim);
    }

    #[test]
    fn shared_names_share_initialization_across_settings() {
        let base = toy_cfg();
        let store_a = Model::<f64>::new(AblationSetting::A.apply(&base))
            .unwrap()
            .init_store(42)
            .unwrap();
        let store_d = Model::<f64>::new(AblationSetting::D.apply(&base))
            .unwrap()
            .init_store(42)
            .unwrap();
        for name in store_a.names() {
            let a = store_a.get(&name).unwrap();
            let d = store_d.get(&name).unwrap();
            assert_eq!(a.value.shape(), d.value.shape(), "{name}");
            for (x, y) in a.value.data().iter().zip(d.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn disabled_module_output_equals_pure_backbone_with_heads() {
        let base = toy_cfg();
        let cfg_a = AblationSetting::A.apply(&base);
        let model = Model::<f64>::new(cfg_a).unwrap();
        let store = model.init_store(7).unwrap();
        let x = rand_batch(1, &base, 2);

        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &x).unwrap();
        assert!(out.dam.is_none());
        assert!(out.embeddings.is_none());
        // fused features are literally the backbone features
        assert_eq!(
            g.value(out.fused_features).data(),
            g.value(out.backbone_features).data()
        );
    }

    #[test]
    fn zeroed_attention_reduces_to_scaled_backbone_features() {
        let base = toy_cfg();
        let model = Model::<f64>::new(AblationSetting::D.apply(&base)).unwrap();
        let mut store = model.init_store(3).unwrap();
        for name in ["dam.freq.attn_v", "dam.temporal.attn_v"] {
            for v in store.get_mut(name).unwrap().value.data_mut() {
                *v = 0.0;
            }
        }
        let x = rand_batch(2, &base, 2);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &x).unwrap();
        // both branches emit 1.5x, and fusion is convex: fused = 1.5 * feats
        let feats = g.value(out.backbone_features).data();
        for (f, &b) in g.value(out.fused_features).data().iter().zip(feats) {
            assert!((f - 1.5 * b).abs() < 1e-12);
        }
        // and the logits equal the head applied to the scaled features
        let mut g2 = Graph::new();
        let xn = g2.input(g.value(out.backbone_features).clone(), false);
        let scaled = g2.scale(xn, 1.5);
        let (logits2, _) = model.heads_forward(&mut g2, &store, scaled).unwrap();
        for (a, b) in g.value(out.logits).data().iter().zip(g2.value(logits2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic_across_runs() {
        let base = toy_cfg();
        let model = Model::<f64>::new(AblationSetting::D.apply(&base)).unwrap();
        let store = model.init_store(9).unwrap();
        let x = rand_batch(5, &base, 3);
        let run = || {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &store, &x).unwrap();
            g.value(out.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embeddings_are_unit_norm_and_logits_finite() {
        let base = toy_cfg();
        let model = Model::<f64>::new(AblationSetting::D.apply(&base)).unwrap();
        let store = model.init_store(11).unwrap();
        let x = rand_batch(6, &base, 4);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &x).unwrap();
        assert!(g.value(out.logits).all_finite());
        let z = g.value(out.embeddings.unwrap());
        let d = base.embed_dim;
        for i in 0..4 {
            let norm: f64 = z.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let model = Model::<f64>::new(toy_cfg()).unwrap();
        let store = model.init_store(1).unwrap();
        let bad = VideoBatch::new(Tensor::zeros(&[1, 3, 1, 8, 8]));
        let mut g = Graph::new();
        let err = model.forward(&mut g, &store, &bad).unwrap_err();
        assert!(err.to_string().contains("model_forward"));
    }

    #[test]
    fn non_finite_activations_name_the_stage() {
        let base = toy_cfg();
        let model = Model::<f64>::new(AblationSetting::A.apply(&base)).unwrap();
        let mut store = model.init_store(1).unwrap();
        store.get_mut("backbone.stage0.w").unwrap().value.data_mut()[0] = f64::NAN;
        let x = rand_batch(3, &base, 1);
        let mut g = Graph::new();
        let err = model.forward(&mut g, &store, &x).unwrap_err();
        assert!(err.to_string().contains("backbone.stage0"), "{err}");
    }

    #[test]
    fn tiny_model_total_gradient_matches_finite_differences() {
        // small but complete: backbone + both branches + both heads
        let cfg = ModelConfig {
            time_steps: 3,
            in_channels: 1,
            height: 4,
            width: 4,
            stage_channels: vec![2],
            embed_dim: 3,
            num_classes: 2,
            ..ModelConfig::default()
        };
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let mut store = model.init_store(5).unwrap();
        // check at a well-conditioned point: the near-identity init leaves
        // some gradient paths below the finite-difference noise floor
        for (name, p) in store.iter_mut() {
            let mut rng = init::rng_for(77, name);
            for v in p.value.data_mut() {
                *v = 0.4 * crate::init::standard_normal(&mut rng);
            }
        }
        let x = rand_batch(8, &cfg, 3);
        let labels = vec![0usize, 1, 0];
        // differentiable weights so the finite-difference oracle sees the
        // same function the tape differentiates; a tamer temperature keeps
        // the loss magnitude small enough for clean differencing
        let dsm = crate::loss::DsmConfig {
            differentiable_weights: true,
            tau: 0.5,
            eta: 0.4,
            ..Default::default()
        };
        let state = crate::loss::ScalingState::initial(&dsm);

        let report = crate::graph::grad_check(&store, 1e-4, |g, s| {
            let out = model.forward(g, s, &x)?;
            let ce = crate::loss::cross_entropy(g, out.logits, &labels)?;
            let (ib_dsc, _) =
                crate::loss::ib_dsc_loss(g, out.embeddings.unwrap(), &labels, &dsm)?;
            crate::loss::total_loss_node(g, ce, ib_dsc, &state)
        })
        .unwrap();
        assert!(report.all_pass(), "{report}");
    }
}
