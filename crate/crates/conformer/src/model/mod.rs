//! The grounding model: joint video-text encoder, content-conditioned query
//! generation over learnable regions, per-frame decoding, and prediction
//! heads for boxes, confidences, and temporal boundaries.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry;
use crate::nn::{
    self, join, mhca, mhsa, mlp, temporal_attention, AttentionParams, BackboneConfig,
    LayerNormParams, LinearParams, MlpParams, ParamBlock, TemporalBlockParams,
};
use crate::synth::{Mode, VideoSample};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// Queries are RoI features of learnable regions (the content path).
    ContentConditioned,
    /// Queries are free learnable embeddings (the ablation path).
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiSource {
    /// Align over the fused visual tokens, so queries see video and text.
    Fused,
    /// Align over the pre-fusion patch tokens (the literal formula).
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalMode {
    None,
    Factorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// One self-attention sequence over all visual tokens plus the text.
    Concat,
    /// Visual tokens cross-attend into self-encoded text.
    CrossAttention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Queries (and learnable regions) per frame.
    pub queries: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    /// RoI-align bins per side.
    pub roi_bins: usize,
    pub query_mode: QueryMode,
    pub roi_source: RoiSource,
    pub temporal_mode: TemporalMode,
    pub fusion_mode: FusionMode,
    pub mode: Mode,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub lambda_kl: f64,
    pub lambda_entity: f64,
    pub tau: f64,
    /// Entity-aware contrastive loss on/off.
    pub ecl: bool,
    pub patch: usize,
    pub frame_side: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            queries: 16,
            max_frames: 16,
            max_tokens: 8,
            roi_bins: 2,
            query_mode: QueryMode::ContentConditioned,
            roi_source: RoiSource::Fused,
            temporal_mode: TemporalMode::Factorized,
            fusion_mode: FusionMode::Concat,
            mode: Mode::Trimmed,
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            lambda_kl: 5.0,
            lambda_entity: 1.0,
            tau: 0.07,
            ecl: true,
            patch: 8,
            frame_side: 48,
            vocab_size: crate::synth::VOCAB.len(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.width,
            self.heads,
            self.enc_layers,
            self.dec_layers,
            self.queries,
            self.max_frames,
            self.max_tokens,
            self.roi_bins,
            self.patch,
            self.frame_side,
            self.vocab_size,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("all size parameters must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.lambda_giou < 0.0
            || self.lambda_l1 < 0.0
            || self.lambda_kl < 0.0
            || self.lambda_entity < 0.0
            || self.tau <= 0.0
        {
            return Err(Error::Config("loss weights must be non-negative, tau positive".into()));
        }
        self.backbone().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            patch: self.patch,
            frame_side: self.frame_side,
            vocab_size: self.vocab_size,
            width: self.width,
            max_tokens: self.max_tokens,
            max_frames: self.max_frames,
        }
    }

    /// Flat key=value document stored next to checkpoints.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("width", self.width.to_string());
        kv("heads", self.heads.to_string());
        kv("enc_layers", self.enc_layers.to_string());
        kv("dec_layers", self.dec_layers.to_string());
        kv("queries", self.queries.to_string());
        kv("max_frames", self.max_frames.to_string());
        kv("max_tokens", self.max_tokens.to_string());
        kv("roi_bins", self.roi_bins.to_string());
        kv(
            "query_mode",
            match self.query_mode {
                QueryMode::ContentConditioned => "content_conditioned".into(),
                QueryMode::Learnable => "learnable".into(),
            },
        );
        kv(
            "roi_source",
            match self.roi_source {
                RoiSource::Fused => "fused".into(),
                RoiSource::Raw => "raw".into(),
            },
        );
        kv(
            "temporal_mode",
            match self.temporal_mode {
                TemporalMode::None => "none".into(),
                TemporalMode::Factorized => "factorized".into(),
            },
        );
        kv(
            "fusion_mode",
            match self.fusion_mode {
                FusionMode::Concat => "concat".into(),
                FusionMode::CrossAttention => "cross_attention".into(),
            },
        );
        kv("mode", self.mode.as_str().into());
        kv("lambda_giou", self.lambda_giou.to_string());
        kv("lambda_l1", self.lambda_l1.to_string());
        kv("lambda_kl", self.lambda_kl.to_string());
        kv("lambda_entity", self.lambda_entity.to_string());
        kv("tau", self.tau.to_string());
        kv("ecl", self.ecl.to_string());
        kv("patch", self.patch.to_string());
        kv("frame_side", self.frame_side.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        s
    }

    pub fn from_kv(doc: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (lineno, line) in doc.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {} has no '='", lineno + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k).cloned().ok_or_else(|| Error::Format(format!("config missing key {k:?}")))
        };
        let usize_of = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::Format(format!("config key {k}: {e}")))
        };
        let f64_of = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|e| Error::Format(format!("config key {k}: {e}")))
        };
        let cfg = ModelConfig {
            width: usize_of("width")?,
            heads: usize_of("heads")?,
            enc_layers: usize_of("enc_layers")?,
            dec_layers: usize_of("dec_layers")?,
            queries: usize_of("queries")?,
            max_frames: usize_of("max_frames")?,
            max_tokens: usize_of("max_tokens")?,
            roi_bins: usize_of("roi_bins")?,
            query_mode: match get("query_mode")?.as_str() {
                "content_conditioned" => QueryMode::ContentConditioned,
                "learnable" => QueryMode::Learnable,
                other => return Err(Error::Format(format!("unknown query_mode {other:?}"))),
            },
            roi_source: match get("roi_source")?.as_str() {
                "fused" => RoiSource::Fused,
                "raw" => RoiSource::Raw,
                other => return Err(Error::Format(format!("unknown roi_source {other:?}"))),
            },
            temporal_mode: match get("temporal_mode")?.as_str() {
                "none" => TemporalMode::None,
                "factorized" => TemporalMode::Factorized,
                other => return Err(Error::Format(format!("unknown temporal_mode {other:?}"))),
            },
            fusion_mode: match get("fusion_mode")?.as_str() {
                "concat" => FusionMode::Concat,
                "cross_attention" => FusionMode::CrossAttention,
                other => return Err(Error::Format(format!("unknown fusion_mode {other:?}"))),
            },
            mode: Mode::parse(&get("mode")?)?,
            lambda_giou: f64_of("lambda_giou")?,
            lambda_l1: f64_of("lambda_l1")?,
            lambda_kl: f64_of("lambda_kl")?,
            lambda_entity: f64_of("lambda_entity")?,
            tau: f64_of("tau")?,
            ecl: get("ecl")? == "true",
            patch: usize_of("patch")?,
            frame_side: usize_of("frame_side")?,
            vocab_size: usize_of("vocab_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone)]
pub struct EncoderLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

impl EncoderLayerParams {
    fn init(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> Self {
        EncoderLayerParams {
            ln1: LayerNormParams::init(width),
            attn: AttentionParams::init(rng, width, heads),
            ln2: LayerNormParams::init(width),
            mlp: MlpParams::init(rng, &[width, width * 2, width]),
        }
    }
}

impl ParamBlock for EncoderLayerParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.for_each(&join(prefix, "ln1"), f);
        self.attn.for_each(&join(prefix, "attn"), f);
        self.ln2.for_each(&join(prefix, "ln2"), f);
        self.mlp.for_each(&join(prefix, "mlp"), f);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.for_each_mut(&join(prefix, "ln1"), f);
        self.attn.for_each_mut(&join(prefix, "attn"), f);
        self.ln2.for_each_mut(&join(prefix, "ln2"), f);
        self.mlp.for_each_mut(&join(prefix, "mlp"), f);
    }
}

#[derive(Clone)]
pub struct CrossLayerParams {
    pub text_ln1: LayerNormParams,
    pub text_attn: AttentionParams,
    pub text_ln2: LayerNormParams,
    pub text_mlp: MlpParams,
    pub vis_ln1: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub vis_ln2: LayerNormParams,
    pub vis_mlp: MlpParams,
}

impl CrossLayerParams {
    fn init(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> Self {
        CrossLayerParams {
            text_ln1: LayerNormParams::init(width),
            text_attn: AttentionParams::init(rng, width, heads),
            text_ln2: LayerNormParams::init(width),
            text_mlp: MlpParams::init(rng, &[width, width * 2, width]),
            vis_ln1: LayerNormParams::init(width),
            cross_attn: AttentionParams::init(rng, width, heads),
            vis_ln2: LayerNormParams::init(width),
            vis_mlp: MlpParams::init(rng, &[width, width * 2, width]),
        }
    }
}

impl ParamBlock for CrossLayerParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.text_ln1.for_each(&join(prefix, "text_ln1"), f);
        self.text_attn.for_each(&join(prefix, "text_attn"), f);
        self.text_ln2.for_each(&join(prefix, "text_ln2"), f);
        self.text_mlp.for_each(&join(prefix, "text_mlp"), f);
        self.vis_ln1.for_each(&join(prefix, "vis_ln1"), f);
        self.cross_attn.for_each(&join(prefix, "cross_attn"), f);
        self.vis_ln2.for_each(&join(prefix, "vis_ln2"), f);
        self.vis_mlp.for_each(&join(prefix, "vis_mlp"), f);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.text_ln1.for_each_mut(&join(prefix, "text_ln1"), f);
        self.text_attn.for_each_mut(&join(prefix, "text_attn"), f);
        self.text_ln2.for_each_mut(&join(prefix, "text_ln2"), f);
        self.text_mlp.for_each_mut(&join(prefix, "text_mlp"), f);
        self.vis_ln1.for_each_mut(&join(prefix, "vis_ln1"), f);
        self.cross_attn.for_each_mut(&join(prefix, "cross_attn"), f);
        self.vis_ln2.for_each_mut(&join(prefix, "vis_ln2"), f);
        self.vis_mlp.for_each_mut(&join(prefix, "vis_mlp"), f);
    }
}

#[derive(Clone)]
pub enum EncoderStack {
    Concat(Vec<EncoderLayerParams>),
    Cross(Vec<CrossLayerParams>),
}

impl ParamBlock for EncoderStack {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            EncoderStack::Concat(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    l.for_each(&join(prefix, &i.to_string()), f);
                }
            }
            EncoderStack::Cross(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    l.for_each(&join(prefix, &i.to_string()), f);
                }
            }
        }
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            EncoderStack::Concat(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    l.for_each_mut(&join(prefix, &i.to_string()), f);
                }
            }
            EncoderStack::Cross(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    l.for_each_mut(&join(prefix, &i.to_string()), f);
                }
            }
        }
    }
}

#[derive(Clone)]
pub struct DecoderLayerParams {
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln3: LayerNormParams,
    pub mlp: MlpParams,
}

impl DecoderLayerParams {
    fn init(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> Self {
        DecoderLayerParams {
            ln1: LayerNormParams::init(width),
            self_attn: AttentionParams::init(rng, width, heads),
            ln2: LayerNormParams::init(width),
            cross_attn: AttentionParams::init(rng, width, heads),
            ln3: LayerNormParams::init(width),
            mlp: MlpParams::init(rng, &[width, width * 2, width]),
        }
    }
}

impl ParamBlock for DecoderLayerParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.for_each(&join(prefix, "ln1"), f);
        self.self_attn.for_each(&join(prefix, "self_attn"), f);
        self.ln2.for_each(&join(prefix, "ln2"), f);
        self.cross_attn.for_each(&join(prefix, "cross_attn"), f);
        self.ln3.for_each(&join(prefix, "ln3"), f);
        self.mlp.for_each(&join(prefix, "mlp"), f);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.for_each_mut(&join(prefix, "ln1"), f);
        self.self_attn.for_each_mut(&join(prefix, "self_attn"), f);
        self.ln2.for_each_mut(&join(prefix, "ln2"), f);
        self.cross_attn.for_each_mut(&join(prefix, "cross_attn"), f);
        self.ln3.for_each_mut(&join(prefix, "ln3"), f);
        self.mlp.for_each_mut(&join(prefix, "mlp"), f);
    }
}

/// Query source: learnable regions feeding RoI features, or free embeddings.
#[derive(Clone)]
pub enum QueryGenParams {
    Content {
        /// [N, 4] raw parameters; sigmoid realizes valid (cx, cy, w, h).
        regions: Tensor,
        /// bins*bins*width -> width projection of flattened RoI features.
        proj: LinearParams,
    },
    Learnable {
        queries: Tensor,
    },
}

impl ParamBlock for QueryGenParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            QueryGenParams::Content { regions, proj } => {
                f(&join(prefix, "regions"), regions);
                proj.for_each(&join(prefix, "proj"), f);
            }
            QueryGenParams::Learnable { queries } => f(&join(prefix, "queries"), queries),
        }
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            QueryGenParams::Content { regions, proj } => {
                f(&join(prefix, "regions"), regions);
                proj.for_each_mut(&join(prefix, "proj"), f);
            }
            QueryGenParams::Learnable { queries } => f(&join(prefix, "queries"), queries),
        }
    }
}

fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Initial regions: a ceil(sqrt(N)) grid of box centers with matching size,
/// stored in pre-sigmoid space.
fn init_regions(n: usize) -> Tensor {
    let g = (n as f64).sqrt().ceil() as usize;
    let size = 1.0 / g as f64;
    let mut data = Vec::with_capacity(n * 4);
    for i in 0..n {
        let (gy, gx) = (i / g, i % g);
        let cx = (gx as f64 + 0.5) / g as f64;
        let cy = (gy as f64 + 0.5) / g as f64;
        for v in [cx, cy, size, size] {
            data.push(inverse_sigmoid(v));
        }
    }
    Tensor::from_vec(vec![n, 4], data)
}

#[derive(Clone)]
pub struct ModelParams {
    pub patch_proj: LinearParams,
    pub token_table: Tensor,
    pub encoder: EncoderStack,
    pub temporal: Vec<TemporalBlockParams>,
    pub query_gen: QueryGenParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub dec_ln: LayerNormParams,
    pub box_head: MlpParams,
    pub conf_head: LinearParams,
    pub time_head: LinearParams,
    pub entity_proj: LinearParams,
}

impl ParamBlock for ModelParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_proj.for_each(&join(prefix, "patch_proj"), f);
        f(&join(prefix, "token_table"), &self.token_table);
        self.encoder.for_each(&join(prefix, "encoder"), f);
        for (i, t) in self.temporal.iter().enumerate() {
            t.for_each(&join(prefix, &format!("temporal.{i}")), f);
        }
        self.query_gen.for_each(&join(prefix, "query_gen"), f);
        for (i, d) in self.decoder.iter().enumerate() {
            d.for_each(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.dec_ln.for_each(&join(prefix, "dec_ln"), f);
        self.box_head.for_each(&join(prefix, "box_head"), f);
        self.conf_head.for_each(&join(prefix, "conf_head"), f);
        self.time_head.for_each(&join(prefix, "time_head"), f);
        self.entity_proj.for_each(&join(prefix, "entity_proj"), f);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_proj.for_each_mut(&join(prefix, "patch_proj"), f);
        f(&join(prefix, "token_table"), &mut self.token_table);
        self.encoder.for_each_mut(&join(prefix, "encoder"), f);
        for (i, t) in self.temporal.iter_mut().enumerate() {
            t.for_each_mut(&join(prefix, &format!("temporal.{i}")), f);
        }
        self.query_gen.for_each_mut(&join(prefix, "query_gen"), f);
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.for_each_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.dec_ln.for_each_mut(&join(prefix, "dec_ln"), f);
        self.box_head.for_each_mut(&join(prefix, "box_head"), f);
        self.conf_head.for_each_mut(&join(prefix, "conf_head"), f);
        self.time_head.for_each_mut(&join(prefix, "time_head"), f);
        self.entity_proj.for_each_mut(&join(prefix, "entity_proj"), f);
    }
}

/// Encoder output plus the pre-fusion tokens for the raw RoI source.
pub struct EncodeOutput {
    /// [t * tokens_per_frame, width] fused visual tokens, frame-major.
    pub visual: Tensor,
    /// [tokens, width] fused text.
    pub text: Tensor,
    /// [t * tokens_per_frame, width] pre-fusion patch tokens.
    pub raw_visual: Tensor,
    pub t: usize,
    pub tokens_per_frame: usize,
}

/// Per-frame model outputs retained for the losses.
pub struct Predictions {
    /// Per frame: [N, 4] sigmoid-bounded cxcywh boxes.
    pub boxes: Vec<Tensor>,
    /// Per frame: [N] confidences in (0, 1).
    pub confidence: Vec<Tensor>,
    /// Per frame: [N] pre-sigmoid confidence logits.
    pub conf_logits: Vec<Tensor>,
    /// [T, 2] start/end logits, one row per frame.
    pub temporal_logits: Tensor,
    /// Per frame: [N, width] decoder outputs.
    pub decoder_features: Vec<Tensor>,
    /// [tokens, width] fused text features.
    pub fused_text: Tensor,
}

impl Predictions {
    pub fn frames(&self) -> usize {
        self.boxes.len()
    }

    pub fn queries(&self) -> usize {
        self.boxes[0].shape()[0]
    }

    /// Index of the most confident query on a frame (first wins ties).
    pub fn best_query(&self, frame: usize) -> usize {
        argmax(self.confidence[frame].data())
    }

    /// Box of query `q` on `frame` as a plain value.
    pub fn box_at(&self, frame: usize, q: usize) -> crate::geometry::BoundingBox {
        let d = self.boxes[frame].data();
        crate::geometry::BoundingBox {
            cx: d[q * 4],
            cy: d[q * 4 + 1],
            w: d[q * 4 + 2],
            h: d[q * 4 + 3],
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Plain-data parameter snapshot; `Send`/`Sync` for parallel evaluation.
#[derive(Clone)]
pub struct ModelSnapshot {
    pub cfg: ModelConfig,
    pub tensors: Vec<(String, Vec<usize>, Arc<Vec<f64>>)>,
}

pub struct GroundingModel {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl GroundingModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = cfg.backbone();
        let c = cfg.width;
        let encoder = match cfg.fusion_mode {
            FusionMode::Concat => EncoderStack::Concat(
                (0..cfg.enc_layers)
                    .map(|_| EncoderLayerParams::init(&mut rng, c, cfg.heads))
                    .collect(),
            ),
            FusionMode::CrossAttention => EncoderStack::Cross(
                (0..cfg.enc_layers)
                    .map(|_| CrossLayerParams::init(&mut rng, c, cfg.heads))
                    .collect(),
            ),
        };
        let temporal = match cfg.temporal_mode {
            TemporalMode::None => vec![],
            TemporalMode::Factorized => (0..cfg.enc_layers)
                .map(|_| TemporalBlockParams::init(&mut rng, c, cfg.heads))
                .collect(),
        };
        let query_gen = match cfg.query_mode {
            QueryMode::ContentConditioned => QueryGenParams::Content {
                regions: init_regions(cfg.queries),
                proj: LinearParams::init(&mut rng, cfg.roi_bins * cfg.roi_bins * c, c),
            },
            QueryMode::Learnable => QueryGenParams::Learnable {
                queries: nn::xavier(&mut rng, cfg.queries, c),
            },
        };
        let params = ModelParams {
            patch_proj: LinearParams::init(&mut rng, bb.patch_dim(), c),
            token_table: nn::xavier(&mut rng, cfg.vocab_size, c),
            encoder,
            temporal,
            query_gen,
            decoder: (0..cfg.dec_layers)
                .map(|_| DecoderLayerParams::init(&mut rng, c, cfg.heads))
                .collect(),
            dec_ln: LayerNormParams::init(c),
            box_head: MlpParams::init_zero_last(&mut rng, &[c, c, c, 4]),
            conf_head: LinearParams::zeros(c, 1),
            time_head: LinearParams::zeros(c, 2),
            entity_proj: LinearParams::init(&mut rng, c, c),
        };
        Ok(GroundingModel { cfg, params })
    }

    /// A copy whose parameters are gradient-tracked leaves of `tape`.
    pub fn bind(&self, tape: &Tape) -> GroundingModel {
        let mut bound = GroundingModel { cfg: self.cfg.clone(), params: self.params.clone() };
        bound.params.for_each_mut("", &mut |_, t| *t = tape.leaf(t, true));
        bound
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.params.for_each("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.params.for_each("", &mut |_, t| n += t.numel());
        n
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        let mut tensors = Vec::new();
        self.params.for_each("", &mut |name, t| {
            tensors.push((name.to_string(), t.shape().to_vec(), t.data_arc()));
        });
        ModelSnapshot { cfg: self.cfg.clone(), tensors }
    }

    pub fn from_snapshot(snap: &ModelSnapshot) -> Result<Self> {
        let mut model = GroundingModel::new(snap.cfg.clone(), 0)?;
        let map: HashMap<&str, &(String, Vec<usize>, Arc<Vec<f64>>)> =
            snap.tensors.iter().map(|e| (e.0.as_str(), e)).collect();
        let mut missing = Vec::new();
        model.params.for_each_mut("", &mut |name, t| match map.get(name) {
            Some((_, shape, data)) if shape == &t.shape().to_vec() => {
                *t = Tensor::from_arc(shape.clone(), Arc::clone(data));
            }
            Some((_, shape, _)) => missing.push(format!(
                "{name}: shape {shape:?} does not match expected {:?}",
                t.shape()
            )),
            None => missing.push(format!("{name}: absent from snapshot")),
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!("snapshot mismatch: {}", missing.join("; "))));
        }
        if map.len() != model.named_parameters().len() {
            return Err(Error::Format("snapshot carries extra tensors".into()));
        }
        Ok(model)
    }

    /// Realized (cx, cy, w, h) per learnable region; None in learnable mode.
    pub fn realized_regions(&self) -> Option<Tensor> {
        match &self.params.query_gen {
            QueryGenParams::Content { regions, .. } => Some(regions.sigmoid()),
            QueryGenParams::Learnable { .. } => None,
        }
    }

    /// Fuse a [t, 3, side, side] frame stack and the token ids into visual
    /// and text features. Visual tokens carry 2-d spatial plus frame-index
    /// positional terms; the text is shared once across the sequence.
    pub fn encode(&self, frames: &Tensor, tokens: &[u32]) -> Result<EncodeOutput> {
        let bb = self.cfg.backbone();
        let t = frames.shape()[0];
        if t == 0 || t > self.cfg.max_frames {
            return Err(Error::Config(format!(
                "{t} frames outside supported range 1..={}",
                self.cfg.max_frames
            )));
        }
        if frames.shape()[1..] != [3, bb.frame_side, bb.frame_side] {
            return Err(Error::Config(format!(
                "frame stack shape {:?} does not match configured {}x{} frames",
                frames.shape(),
                bb.frame_side,
                bb.frame_side
            )));
        }
        let s = bb.tokens_per_frame();
        let c = self.cfg.width;
        let frame_pos = nn::pos_1d(self.cfg.max_frames, c);

        let mut per_frame = Vec::with_capacity(t);
        for f in 0..t {
            let frame = frames.slice_rows(f, 1).reshape(vec![3, bb.frame_side, bb.frame_side]);
            let tokens_f = nn::patch_embed(&frame, &self.params.patch_proj, &bb)
                .add(&frame_pos.slice_rows(f, 1).reshape(vec![c]));
            per_frame.push(tokens_f);
        }
        let refs: Vec<&Tensor> = per_frame.iter().collect();
        let raw_visual = Tensor::concat_rows(&refs);
        let text_in = nn::token_embed(tokens, &self.params.token_table, &bb)?;
        let l = tokens.len();

        let (visual, text) = match &self.params.encoder {
            EncoderStack::Concat(layers) => {
                let mut x = Tensor::concat_rows(&[&raw_visual, &text_in]);
                for (i, layer) in layers.iter().enumerate() {
                    x = x.add(&mhsa(&layer.ln1.apply(&x), &layer.attn, None));
                    x = x.add(&mlp(&layer.ln2.apply(&x), &layer.mlp));
                    if let Some(tp) = self.params.temporal.get(i) {
                        let xv = temporal_attention(&x.slice_rows(0, t * s), t, s, tp);
                        let xy = x.slice_rows(t * s, l);
                        x = Tensor::concat_rows(&[&xv, &xy]);
                    }
                }
                (x.slice_rows(0, t * s), x.slice_rows(t * s, l))
            }
            EncoderStack::Cross(layers) => {
                let mut u = raw_visual.clone();
                let mut y = text_in.clone();
                for (i, layer) in layers.iter().enumerate() {
                    y = y.add(&mhsa(&layer.text_ln1.apply(&y), &layer.text_attn, None));
                    y = y.add(&mlp(&layer.text_ln2.apply(&y), &layer.text_mlp));
                    u = u.add(&mhca(&layer.vis_ln1.apply(&u), &y, &layer.cross_attn));
                    u = u.add(&mlp(&layer.vis_ln2.apply(&u), &layer.vis_mlp));
                    if let Some(tp) = self.params.temporal.get(i) {
                        u = temporal_attention(&u, t, s, tp);
                    }
                }
                (u, y)
            }
        };
        Ok(EncodeOutput { visual, text, raw_visual, t, tokens_per_frame: s })
    }

    /// Queries for one frame: RoI features of the realized regions over the
    /// selected grid, projected to model width - or the free embeddings.
    pub fn generate_queries(&self, enc: &EncodeOutput, frame: usize) -> Tensor {
        match &self.params.query_gen {
            QueryGenParams::Learnable { queries } => queries.clone(),
            QueryGenParams::Content { regions, proj } => {
                let s = enc.tokens_per_frame;
                let gs = (s as f64).sqrt() as usize;
                let c = self.cfg.width;
                let source = match self.cfg.roi_source {
                    RoiSource::Fused => &enc.visual,
                    RoiSource::Raw => &enc.raw_visual,
                };
                let grid = source.slice_rows(frame * s, s).reshape(vec![gs, gs, c]);
                let realized = regions.sigmoid();
                let n = self.cfg.queries;
                let g = self.cfg.roi_bins;
                let mut rows = Vec::with_capacity(n);
                for i in 0..n {
                    let roi = realized.slice_rows(i, 1).reshape(vec![4]);
                    rows.push(geometry::roi_align(&grid, &roi, g).reshape(vec![1, g * g * c]));
                }
                let refs: Vec<&Tensor> = rows.iter().collect();
                proj.apply(&Tensor::concat_rows(&refs))
            }
        }
    }

    /// Decoder translation for one frame: self-attention over the queries,
    /// cross-attention into the frame's visual tokens plus the text, an MLP,
    /// all pre-norm residual, then a final layer norm.
    pub fn decode(&self, enc: &EncodeOutput, frame: usize, queries: &Tensor) -> Tensor {
        let s = enc.tokens_per_frame;
        let frame_tokens = enc.visual.slice_rows(frame * s, s);
        let ctx = Tensor::concat_rows(&[&frame_tokens, &enc.text]);
        let mut q = queries.clone();
        for layer in &self.decoder_layers() {
            q = q.add(&mhsa(&layer.ln1.apply(&q), &layer.self_attn, None));
            q = q.add(&mhca(&layer.ln2.apply(&q), &ctx, &layer.cross_attn));
            q = q.add(&mlp(&layer.ln3.apply(&q), &layer.mlp));
        }
        self.params.dec_ln.apply(&q)
    }

    fn decoder_layers(&self) -> Vec<&DecoderLayerParams> {
        self.params.decoder.iter().collect()
    }

    /// Heads over decoder features: sigmoid boxes, per-query confidence, and
    /// the 2 temporal logits of the frame's most confident query.
    pub fn predict_heads(&self, features: &Tensor) -> FrameHeads {
        let boxes = self.params.box_head.apply(features).sigmoid();
        let n = features.shape()[0];
        let conf_logits = self.params.conf_head.apply(features).reshape(vec![n]);
        let confidence = conf_logits.sigmoid();
        let best = argmax(confidence.data());
        let temporal = self.params.time_head.apply(&features.slice_rows(best, 1));
        FrameHeads { boxes, conf_logits, confidence, temporal_logits: temporal, best }
    }

    /// Full forward pass over one sample.
    pub fn forward(&self, sample: &VideoSample) -> Result<Predictions> {
        if sample.side != self.cfg.frame_side {
            return Err(Error::Config(format!(
                "sample frames are {}px, model expects {}px",
                sample.side, self.cfg.frame_side
            )));
        }
        let enc = self.encode(&sample.frames_tensor(), &sample.tokens)?;
        let mut boxes = Vec::with_capacity(enc.t);
        let mut confidence = Vec::with_capacity(enc.t);
        let mut conf_logits = Vec::with_capacity(enc.t);
        let mut decoder_features = Vec::with_capacity(enc.t);
        let mut temporal_rows = Vec::with_capacity(enc.t);
        for f in 0..enc.t {
            let queries = self.generate_queries(&enc, f);
            let features = self.decode(&enc, f, &queries);
            let heads = self.predict_heads(&features);
            boxes.push(heads.boxes);
            confidence.push(heads.confidence);
            conf_logits.push(heads.conf_logits);
            temporal_rows.push(heads.temporal_logits);
            decoder_features.push(features);
        }
        let refs: Vec<&Tensor> = temporal_rows.iter().collect();
        Ok(Predictions {
            boxes,
            confidence,
            conf_logits,
            temporal_logits: Tensor::concat_rows(&refs),
            decoder_features,
            fused_text: enc.text,
        })
    }
}

pub struct FrameHeads {
    pub boxes: Tensor,
    pub conf_logits: Tensor,
    pub confidence: Tensor,
    pub temporal_logits: Tensor,
    pub best: usize,
}
