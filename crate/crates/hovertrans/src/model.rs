//! End-to-end network assembly: stem, four stages, pooled linear head,
//! ablation variants, loss, and checkpoint serialization.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::embed::TokenGeometry;
use crate::error::{Error, Result};
use crate::hover::{hover_stage_traced, init_stage, StageParams};
use crate::nn::{conv_stem, init_bias, init_stem, init_weight, StemParams};

mod checkpoint;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainState};

/// Which branches the HoVer blocks carry. `ModelP` keeps only the two
/// patch-token main branches; `ModelPV` additionally keeps the vertical
/// strip branch; `ModelPH` the horizontal one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    ModelP,
    ModelPV,
    ModelPH,
}

impl Variant {
    pub fn with_h(self) -> bool {
        matches!(self, Variant::Full | Variant::ModelPH)
    }

    pub fn with_v(self) -> bool {
        matches!(self, Variant::Full | Variant::ModelPV)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "model_p" => Ok(Variant::ModelP),
            "model_p_v" => Ok(Variant::ModelPV),
            "model_p_h" => Ok(Variant::ModelPH),
            other => Err(Error::Validation(format!("unknown variant {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ModelP => "model_p",
            Variant::ModelPV => "model_p_v",
            Variant::ModelPH => "model_p_h",
        }
    }
}

/// Every architecture hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_side: usize,
    /// Patch side, in pixels of the stage input map.
    pub p: usize,
    /// Strip thickness, in pixels of the stage input map.
    pub hv: usize,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub num_classes: usize,
    pub variant: Variant,
    /// Whether learned positional tables are added at stage entry.
    pub positional: bool,
    /// Whether stage 4 pools like the others (the stage-uniform reading);
    /// disable for inputs whose final map is too small to halve.
    pub final_pool: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_side: 256,
            p: 2,
            hv: 2,
            stage_channels: vec![4, 8, 16, 32],
            stage_depths: vec![2, 4, 4, 2],
            stage_heads: vec![2, 4, 8, 16],
            num_classes: 2,
            variant: Variant::Full,
            positional: true,
            final_pool: true,
        }
    }
}

impl ModelConfig {
    /// Smallest geometry that exercises all four stages: 32px input,
    /// single-pixel tokens, no final pool (the last map is 1x1).
    pub fn tiny() -> Self {
        Self {
            input_side: 32,
            p: 1,
            hv: 1,
            stage_channels: vec![2, 4, 8, 16],
            stage_depths: vec![1, 1, 1, 1],
            stage_heads: vec![2, 4, 8, 16],
            final_pool: false,
            ..Self::default()
        }
    }

    /// Map side entering stage `s` (0-based): the stem divides by 4, each
    /// earlier stage by 2.
    pub fn stage_side(&self, s: usize) -> usize {
        (self.input_side / 4) >> s
    }

    /// Token embedding dim of stage `s`: `p^2 * C_s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.p * self.p * self.stage_channels[s]
    }

    pub fn stage_geometry(&self, s: usize) -> TokenGeometry {
        TokenGeometry {
            side: self.stage_side(s),
            channels: self.stage_channels[s],
            p: self.p,
            hv: self.hv,
        }
    }

    /// Channels of the head input map (after the stage-4 Conv block).
    pub fn head_channels(&self) -> usize {
        2 * self.stage_channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.stage_channels.len() != 4 {
            return fail("stage_channels", format!("expected 4 stages, got {}", self.stage_channels.len()));
        }
        if self.stage_depths.len() != 4 {
            return fail("stage_depths", format!("expected 4 stages, got {}", self.stage_depths.len()));
        }
        if self.stage_heads.len() != 4 {
            return fail("stage_heads", format!("expected 4 stages, got {}", self.stage_heads.len()));
        }
        if self.input_side == 0 || self.input_side % 32 != 0 {
            return fail("input_side", format!("{} is not divisible by 32", self.input_side));
        }
        for s in 0..3 {
            if self.stage_channels[s + 1] != 2 * self.stage_channels[s] {
                return fail(
                    "stage_channels",
                    format!("channels must double stage to stage, got {:?}", self.stage_channels),
                );
            }
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return fail("stage_depths", format!("every stage needs depth >= 1, got {:?}", self.stage_depths));
        }
        if self.num_classes < 2 {
            return fail("num_classes", format!("{} must be >= 2", self.num_classes));
        }
        for s in 0..4 {
            let dim = self.stage_dim(s);
            let heads = self.stage_heads[s];
            if heads == 0 || dim % heads != 0 {
                return fail(
                    "stage_heads",
                    format!("stage {s}: embed dim {dim} not divisible by {heads} heads"),
                );
            }
            self.stage_geometry(s)
                .validate()
                .map_err(|e| Error::Config(format!("stage {s}: {e}")))?;
        }
        if self.final_pool && self.stage_side(3) % 2 != 0 {
            return fail(
                "final_pool",
                format!("stage-4 map side {} cannot be halved", self.stage_side(3)),
            );
        }
        Ok(())
    }
}

/// The assembled network: parameter store plus the handle structs that
/// give the graph builders access to it.
#[derive(Debug, Clone)]
pub struct HoverTransNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    stem: StemParams,
    stages: Vec<StageParams>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Node handles from one forward pass, for loss attachment and
/// interpretability taps.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: NodeId,
    pub stem_out: NodeId,
    /// Per-stage output map (post pool).
    pub stage_outputs: Vec<NodeId>,
    /// Per-stage Conv-block output (pre pool) — the heatmap evidence tap.
    pub stage_conv_outputs: Vec<NodeId>,
}

/// Deterministically initializes a network. Initial values are keyed by
/// `(seed, parameter name)`, so two builds with one seed are bit-identical
/// and ablation variants share the values of every surviving parameter.
pub fn build_model(config: &ModelConfig, seed_value: u64) -> Result<HoverTransNet> {
    config.validate()?;
    let mut store = ParamStore::new();
    let stem = init_stem(&mut store, seed_value, "stem", config.stage_channels[0]);
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        stages.push(init_stage(
            &mut store,
            seed_value,
            &format!("stage{}", s + 1),
            config.stage_geometry(s),
            config.stage_dim(s),
            config.stage_heads[s],
            config.stage_depths[s],
            config.variant.with_h(),
            config.variant.with_v(),
            config.positional,
        )?);
    }
    let head_w = init_weight(
        &mut store,
        seed_value,
        "head.w",
        &[config.head_channels(), config.num_classes],
    );
    let head_b = init_bias(&mut store, "head.b", config.num_classes);
    Ok(HoverTransNet {
        config: config.clone(),
        store,
        stem,
        stages,
        head_w,
        head_b,
    })
}

impl HoverTransNet {
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Builds the forward graph for a standardized `(B, side, side, 3)`
    /// batch and returns the trace handles.
    pub fn forward_graph(&self, g: &mut Graph, batch: &Array4<f64>) -> Result<ForwardTrace> {
        let (b, h, w, c) = batch.dim();
        if h != self.config.input_side || w != self.config.input_side || c != 3 {
            return Err(Error::Shape(format!(
                "expected ({b}, {side}, {side}, 3) input, got ({b}, {h}, {w}, {c})",
                side = self.config.input_side
            )));
        }
        let input = g.constant(batch.clone().into_dyn());
        let stem_out = conv_stem(g, &self.store, input, &self.stem)?;
        let mut x = stem_out;
        let mut stage_outputs = Vec::with_capacity(4);
        let mut stage_conv_outputs = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            let pool = s < 3 || self.config.final_pool;
            let (out, conv_out) = hover_stage_traced(g, &self.store, x, stage, pool)?;
            stage_outputs.push(out);
            stage_conv_outputs.push(conv_out);
            x = out;
        }
        let pooled = g.global_avg_pool(x);
        let w = g.param(&self.store, self.head_w);
        let b = g.param(&self.store, self.head_b);
        let logits = g.linear(pooled, w, b);
        Ok(ForwardTrace { logits, stem_out, stage_outputs, stage_conv_outputs })
    }

    /// Convenience forward returning the logits as an array.
    pub fn forward(&self, batch: &Array4<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let trace = self.forward_graph(&mut g, batch)?;
        let logits = g.value(trace.logits);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Runtime("non-finite logits".into()));
        }
        Ok(logits
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }

    /// Softmax probability of the malignant class per sample.
    pub fn predict_malignant(&self, batch: &Array4<f64>) -> Result<Vec<f64>> {
        let logits = self.forward(batch)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| softmax_row(row.as_slice().unwrap())[1])
            .collect())
    }
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean softmax cross-entropy over the batch, attached to the graph.
pub fn loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let [b, k] = shape[..] else {
        return Err(Error::Shape(format!("logits must be (B, K), got {shape:?}")));
    };
    if labels.len() != b {
        return Err(Error::Validation(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
    }
    Ok(g.cross_entropy(logits, labels))
}

/// Host-side loss for validation passes (no gradient).
pub fn loss_value(net: &HoverTransNet, batch: &Array4<f64>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let trace = net.forward_graph(&mut g, batch)?;
    let l = loss(&mut g, trace.logits, labels)?;
    Ok(g.value(l)[[0]])
}

/// Vertical flip of a standardized input batch (rows reversed). Test- and
/// audit-side helper for the anisotropy checks.
pub fn flip_batch_vertical(batch: &Array4<f64>) -> Array4<f64> {
    let (b, h, w, c) = batch.dim();
    let mut out = Array4::<f64>::zeros((b, h, w, c));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(bi, y, x, ch)] = batch[(bi, h - 1 - y, x, ch)];
                }
            }
        }
    }
    out
}
