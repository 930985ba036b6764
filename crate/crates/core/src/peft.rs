//! Tuning strategies over the frozen toy backbone.
//!
//! Embedded prompts (EPT) stack learnable rows onto each head's `KᵀQ` score
//! matrix before the column softmax and drop them afterwards, which rescales
//! every attention column by its own factor `c ∈ (0,1)`. The baselines (VPT,
//! VP, LoRA, Adapter, Bias, Linear, Partial-1, MLP-3, Full) share the same
//! parameter layout so trainable masks and counts are directly comparable.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::vit::{self, BackboneConfig, Head, HeadKind, LayerVars};

pub const PROMPT_INIT_STD: f64 = 0.02;
pub const PROMPT_PREFIX: &str = "prompts.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingWay {
    Add,
    Multiply,
    PureCat,
    MultiCat,
}

impl EmbeddingWay {
    pub const ALL: [EmbeddingWay; 4] = [
        EmbeddingWay::Add,
        EmbeddingWay::Multiply,
        EmbeddingWay::PureCat,
        EmbeddingWay::MultiCat,
    ];

    pub fn is_cat(self) -> bool {
        matches!(self, EmbeddingWay::PureCat | EmbeddingWay::MultiCat)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingWay::Add => "add",
            EmbeddingWay::Multiply => "multiply",
            EmbeddingWay::PureCat => "pure_cat",
            EmbeddingWay::MultiCat => "multi_cat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Shallow,
    Deep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthOrdering {
    /// Depth `k` prompts the last `k` layers.
    TopToBottom,
    /// Depth `k` prompts the first `k` layers.
    BottomToTop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EptConfig {
    /// Prompt rows `d_p` per head.
    pub prompt_length: usize,
    pub embedding_way: EmbeddingWay,
    pub mode: PromptMode,
    /// Number of prompted layers for deep mode; `None` prompts every layer.
    pub depth: Option<usize>,
    pub ordering: DepthOrdering,
    /// Explicit 1-based layer indices; overrides `depth` and `ordering`.
    pub layers: Option<Vec<usize>>,
    pub prompt_grad: bool,
}

impl Default for EptConfig {
    fn default() -> Self {
        Self {
            prompt_length: 4,
            embedding_way: EmbeddingWay::PureCat,
            mode: PromptMode::Deep,
            depth: None,
            ordering: DepthOrdering::BottomToTop,
            layers: None,
            prompt_grad: true,
        }
    }
}

impl EptConfig {
    /// Zero-based indices of prompted layers, ascending.
    pub fn prompted_layers(&self, num_layers: usize) -> Result<Vec<usize>> {
        if let Some(layers) = &self.layers {
            if layers.is_empty() {
                return Err(Error::config("method.layers", "empty depth spec"));
            }
            let mut sorted = layers.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != layers.len() {
                return Err(Error::config("method.layers", "duplicate layer index"));
            }
            if let Some(&bad) = sorted.iter().find(|&&l| l == 0 || l > num_layers) {
                return Err(Error::config(
                    "method.layers",
                    format!("layer {bad} outside 1..={num_layers}"),
                ));
            }
            if self.mode == PromptMode::Shallow && sorted != [1] {
                return Err(Error::config("method.layers", "shallow mode prompts only layer 1"));
            }
            return Ok(sorted.into_iter().map(|l| l - 1).collect());
        }
        if num_layers == 0 {
            return Err(Error::Contract("empty depth spec: backbone has no layers".into()));
        }
        match self.mode {
            PromptMode::Shallow => Ok(vec![0]),
            PromptMode::Deep => {
                let k = self.depth.unwrap_or(num_layers);
                if k == 0 || k > num_layers {
                    return Err(Error::config(
                        "method.depth",
                        format!("depth {k} outside 1..={num_layers}"),
                    ));
                }
                Ok(match self.ordering {
                    DepthOrdering::BottomToTop => (0..k).collect(),
                    DepthOrdering::TopToBottom => (num_layers - k..num_layers).collect(),
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VptConfig {
    /// Prompt columns `n_p` per prompted layer.
    pub prompt_length: usize,
    pub mode: PromptMode,
    pub prompt_grad: bool,
}

impl Default for VptConfig {
    fn default() -> Self {
        Self {
            prompt_length: 4,
            mode: PromptMode::Deep,
            prompt_grad: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpConfig {
    pub prompt_grad: bool,
}

impl Default for VpConfig {
    fn default() -> Self {
        Self { prompt_grad: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Bottleneck width is `embed_dim / reduction`.
    pub reduction: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { reduction: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag")]
#[derive(Default)]
pub enum PeftMethod {
    #[serde(rename = "EPT")]
    Ept(EptConfig),
    #[serde(rename = "VPT")]
    Vpt(VptConfig),
    #[serde(rename = "VP")]
    Vp(VpConfig),
    #[serde(rename = "LoRA")]
    Lora(LoraConfig),
    Adapter(AdapterConfig),
    Bias,
    #[default]
    Linear,
    Partial1,
    #[serde(rename = "MLP3")]
    Mlp3,
    Full,
}


impl PeftMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            PeftMethod::Ept(_) => "EPT",
            PeftMethod::Vpt(_) => "VPT",
            PeftMethod::Vp(_) => "VP",
            PeftMethod::Lora(_) => "LoRA",
            PeftMethod::Adapter(_) => "Adapter",
            PeftMethod::Bias => "Bias",
            PeftMethod::Linear => "Linear",
            PeftMethod::Partial1 => "Partial1",
            PeftMethod::Mlp3 => "MLP3",
            PeftMethod::Full => "Full",
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        match self {
            PeftMethod::Mlp3 => HeadKind::Mlp3,
            _ => HeadKind::Linear,
        }
    }

    fn prompt_grad(&self) -> bool {
        match self {
            PeftMethod::Ept(c) => c.prompt_grad,
            PeftMethod::Vpt(c) => c.prompt_grad,
            PeftMethod::Vp(c) => c.prompt_grad,
            _ => false,
        }
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        param_layout(cfg, self).map(|_| ())
    }
}

pub fn ept_prompt_name(layer: usize, head: usize) -> String {
    format!("prompts.ept.{layer}.{head}")
}

pub fn vpt_prompt_name(layer: usize) -> String {
    format!("prompts.vpt.{layer}")
}

pub const VP_PROMPT_NAME: &str = "prompts.vp";

/// Bottleneck width for an adapter, or a config error when `d / r < 1`.
pub fn adapter_hidden(cfg: &BackboneConfig, reduction: usize) -> Result<usize> {
    if reduction == 0 || cfg.embed_dim / reduction < 1 {
        return Err(Error::config(
            "method.reduction",
            format!("embed_dim {} / reduction {reduction} < 1", cfg.embed_dim),
        ));
    }
    Ok(cfg.embed_dim / reduction)
}

/// LoRA factor shapes for `W_q` and `W_v` of every layer.
pub fn lora_shapes(cfg: &BackboneConfig, rank: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let d = cfg.embed_dim;
    if rank == 0 || rank > d {
        return Err(Error::config("method.rank", format!("rank {rank} outside 1..={d}")));
    }
    let mut out = Vec::new();
    for i in 0..cfg.num_layers {
        let p = vit::layer_prefix(i);
        for m in ["q", "v"] {
            out.push((format!("{p}.attn.{m}.lora_a"), vec![rank, d]));
            out.push((format!("{p}.attn.{m}.lora_b"), vec![d, rank]));
        }
    }
    Ok(out)
}

/// Full parameter layout (backbone, head and method-specific tensors).
pub fn param_layout(cfg: &BackboneConfig, method: &PeftMethod) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let (d, n) = (cfg.embed_dim, cfg.num_tokens());
    let mut out = vit::backbone_shapes(cfg);
    out.extend(vit::head_shapes(cfg, method.head_kind()));
    match method {
        PeftMethod::Ept(c) => {
            if c.prompt_length == 0 {
                return Err(Error::config("method.prompt_length", "EPT needs at least one prompt row"));
            }
            for l in c.prompted_layers(cfg.num_layers)? {
                for h in 0..cfg.num_heads {
                    out.push((ept_prompt_name(l, h), vec![c.prompt_length, n]));
                }
            }
        }
        PeftMethod::Vpt(c) => {
            if c.prompt_length > 0 {
                let layers = match c.mode {
                    PromptMode::Shallow => cfg.num_layers.min(1),
                    PromptMode::Deep => cfg.num_layers,
                };
                for l in 0..layers {
                    out.push((vpt_prompt_name(l), vec![d, c.prompt_length]));
                }
            }
        }
        PeftMethod::Vp(_) => out.push((VP_PROMPT_NAME.to_string(), vec![d, n])),
        PeftMethod::Lora(c) => out.extend(lora_shapes(cfg, c.rank)?),
        PeftMethod::Adapter(c) => {
            let hid = adapter_hidden(cfg, c.reduction)?;
            for i in 0..cfg.num_layers {
                let p = vit::layer_prefix(i);
                out.push((format!("{p}.adapter.down.weight"), vec![hid, d]));
                out.push((format!("{p}.adapter.down.bias"), vec![hid, 1]));
                out.push((format!("{p}.adapter.up.weight"), vec![d, hid]));
                out.push((format!("{p}.adapter.up.bias"), vec![d, 1]));
            }
        }
        PeftMethod::Bias | PeftMethod::Linear | PeftMethod::Partial1 | PeftMethod::Mlp3 | PeftMethod::Full => {}
    }
    Ok(out)
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// Which parameters a method updates.
pub fn select_trainable(cfg: &BackboneConfig, method: &PeftMethod) -> Result<BTreeSet<String>> {
    let layout = param_layout(cfg, method)?;
    let last_layer = cfg.num_layers.checked_sub(1).map(|i| format!("{}.", vit::layer_prefix(i)));
    let keep = |name: &str| -> bool {
        if is_head(name) {
            return true;
        }
        match method {
            PeftMethod::Full => true,
            PeftMethod::Linear | PeftMethod::Mlp3 => false,
            PeftMethod::Partial1 => last_layer.as_deref().is_some_and(|p| name.starts_with(p)),
            PeftMethod::Bias => name.ends_with(".bias"),
            PeftMethod::Lora(_) => name.contains(".lora_"),
            PeftMethod::Adapter(_) => name.contains(".adapter."),
            PeftMethod::Ept(_) | PeftMethod::Vpt(_) | PeftMethod::Vp(_) => {
                method.prompt_grad() && name.starts_with(PROMPT_PREFIX)
            }
        }
    };
    Ok(layout.into_iter().map(|(n, _)| n).filter(|n| keep(n)).collect())
}

/// Number of trainable scalars under `method`.
pub fn count_trainable(cfg: &BackboneConfig, method: &PeftMethod) -> Result<usize> {
    let trainable = select_trainable(cfg, method)?;
    Ok(param_layout(cfg, method)?
        .into_iter()
        .filter(|(n, _)| trainable.contains(n))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Number of trainable prompt scalars under `method`.
pub fn count_prompt_params(cfg: &BackboneConfig, method: &PeftMethod) -> Result<usize> {
    let trainable = select_trainable(cfg, method)?;
    Ok(param_layout(cfg, method)?
        .into_iter()
        .filter(|(n, _)| trainable.contains(n) && n.starts_with(PROMPT_PREFIX))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// EPT rows for a relative prompt length: the relative axis counts VPT-sized
/// prompts (`d` scalars each) and an EPT row costs `n - 1` scalars, so
/// `d_p = round(L · d / (n - 1))`, never below one row. At `d = 768` and 196
/// patches a relative length of 1 maps to 4 rows.
pub fn relative_to_ept_rows(relative: usize, embed_dim: usize, num_patches: usize) -> usize {
    let rows = (relative as f64 * embed_dim as f64 / num_patches as f64).round() as usize;
    rows.max(1)
}

/// Method-specific initialization; backbone and head tensors use [`vit::init_tensor`].
fn init_method_tensor<R: Rng + ?Sized>(
    name: &str,
    shape: &[usize],
    method: &PeftMethod,
    rng: &mut R,
) -> Tensor {
    if name.starts_with(PROMPT_PREFIX) {
        let mean = match method {
            PeftMethod::Ept(c) if c.embedding_way == EmbeddingWay::Multiply => 1.0,
            _ => 0.0,
        };
        return Tensor::randn(shape, mean, PROMPT_INIT_STD, rng);
    }
    if name.ends_with(".lora_b") || name.contains(".adapter.up.") || name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    if name.ends_with(".lora_a") {
        let fan_in = shape[1] as f64;
        return Tensor::randn(shape, 0.0, 1.0 / fan_in.sqrt(), rng);
    }
    vit::init_tensor(name, shape, rng)
}

/// Backbone weights standing in for a pretrained encoder.
pub fn pretrained_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    Ok(vit::init_params(&vit::backbone_shapes(cfg), &mut stream(seed, "backbone")))
}

/// Per-head `c_j` observed while running a prompted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingObservation {
    pub layer: usize,
    pub head: usize,
    pub factors: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    /// Final CLS feature (the head input).
    pub cls: Var,
    pub per_layer_cls: Vec<Var>,
    /// Token sequence width inside each layer.
    pub layer_widths: Vec<usize>,
    pub scaling: Vec<ScalingObservation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub method: PeftMethod,
    pub params: ParamStore,
    pub trainable: BTreeSet<String>,
}

impl Model {
    /// Backbone from `backbone` (shared across methods), head and method
    /// tensors drawn from `method_seed`.
    pub fn new(cfg: &BackboneConfig, method: &PeftMethod, backbone: &ParamStore, method_seed: u64) -> Result<Self> {
        let layout = param_layout(cfg, method)?;
        let mut rng = stream(method_seed, "method-init");
        let mut params = ParamStore::new();
        for (name, shape) in &layout {
            if name.starts_with("embed.") || (name.starts_with("layers.") && !is_injected(name)) {
                let t = backbone.get(name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Load(format!(
                        "backbone tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                params.insert(name.clone(), t.clone());
            } else {
                params.insert(name.clone(), init_method_tensor(name, shape, method, &mut rng));
            }
        }
        Self::from_params(cfg, method, params)
    }

    /// Model with freshly drawn backbone and method tensors.
    pub fn random(cfg: &BackboneConfig, method: &PeftMethod, seed: u64) -> Result<Self> {
        let backbone = pretrained_backbone(cfg, seed)?;
        Self::new(cfg, method, &backbone, seed)
    }

    pub fn from_params(cfg: &BackboneConfig, method: &PeftMethod, params: ParamStore) -> Result<Self> {
        let layout = param_layout(cfg, method)?;
        if layout.len() != params.len() {
            return Err(Error::Load(format!(
                "expected {} tensors for {}, found {}",
                layout.len(),
                method.tag(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let t = params.get(name).map_err(|_| Error::Load(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            backbone: cfg.clone(),
            method: method.clone(),
            trainable: select_trainable(cfg, method)?,
            params,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound::bind(g, &self.params, &self.trainable)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable
            .iter()
            .filter_map(|n| self.params.get(n).ok())
            .map(Tensor::numel)
            .sum()
    }

    fn layer_vars(&self, g: &mut Graph, b: &Bound, i: usize) -> Result<LayerVars> {
        let mut lw = LayerVars::bind(b, &self.backbone, i)?;
        if let PeftMethod::Lora(_) = self.method {
            let p = vit::layer_prefix(i);
            lw.wq = lora_merge(g, b, lw.wq, &format!("{p}.attn.q"))?;
            lw.wv = lora_merge(g, b, lw.wv, &format!("{p}.attn.v"))?;
        }
        Ok(lw)
    }

    /// Forward one image through the tuned model using parameters bound in `b`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: &Tensor, record_scaling: bool) -> Result<ModelOutput> {
        let cfg = &self.backbone;
        let mut x = vit::tokens(g, b, image, cfg)?;
        if let PeftMethod::Vp(_) = self.method {
            let p = b.get(VP_PROMPT_NAME)?;
            x = g.add(x, p)?;
        }

        let prompted: BTreeSet<usize> = match &self.method {
            PeftMethod::Ept(c) => c.prompted_layers(cfg.num_layers)?.into_iter().collect(),
            _ => BTreeSet::new(),
        };
        let (vpt_len, vpt_mode) = match &self.method {
            PeftMethod::Vpt(c) => (c.prompt_length, c.mode),
            _ => (0, PromptMode::Shallow),
        };

        let n = cfg.num_tokens();
        let mut cls_index = 0;
        let mut per_layer_cls = Vec::with_capacity(cfg.num_layers);
        let mut layer_widths = Vec::with_capacity(cfg.num_layers);
        let mut scaling = Vec::new();

        for i in 0..cfg.num_layers {
            let lw = self.layer_vars(g, b, i)?;

            if vpt_len > 0 {
                match vpt_mode {
                    PromptMode::Shallow if i == 0 => {
                        let p = b.get(&vpt_prompt_name(0))?;
                        x = g.hstack(&[p, x])?;
                        cls_index = vpt_len;
                    }
                    PromptMode::Shallow => {}
                    PromptMode::Deep => {
                        if i > 0 {
                            x = g.slice_cols(x, vpt_len, n)?;
                        }
                        let p = b.get(&vpt_prompt_name(i))?;
                        x = g.hstack(&[p, x])?;
                        cls_index = vpt_len;
                    }
                }
            }
            layer_widths.push(g.value(x).cols());

            x = if let (true, PeftMethod::Ept(c)) = (prompted.contains(&i), &self.method) {
                let way = c.embedding_way;
                let mut observations = Vec::new();
                let mut scores = |g: &mut Graph, h: usize, ktq: Var| -> Result<Var> {
                    let prompt = b.get(&ept_prompt_name(i, h))?;
                    if record_scaling && way.is_cat() {
                        let ep = EmbeddedPrompt::new(g.value(prompt).clone(), way);
                        observations.push(ScalingObservation {
                            layer: i,
                            head: h,
                            factors: measure_scaling_factors(g.value(ktq), &ep)?,
                        });
                    }
                    prompted_scores(g, ktq, prompt, way)
                };
                let y = vit::transformer_layer(g, x, &lw, cfg, &mut scores)?;
                scaling.extend(observations);
                y
            } else {
                vit::transformer_layer(g, x, &lw, cfg, &mut vit::plain_scores)?
            };

            if let PeftMethod::Adapter(_) = self.method {
                x = adapter_block(g, b, x, i)?;
            }
            per_layer_cls.push(vit::cls_column(g, x, cls_index)?);
        }

        let cls = vit::cls_column(g, x, cls_index)?;
        let head = Head::bind(b, self.method.head_kind())?;
        let logits = head.apply(g, cls)?;
        Ok(ModelOutput {
            logits,
            cls,
            per_layer_cls,
            layer_widths,
            scaling,
        })
    }
}

fn is_injected(name: &str) -> bool {
    name.contains(".lora_") || name.contains(".adapter.")
}

/// `W + B·A` for the LoRA factors stored under `prefix`.
fn lora_merge(g: &mut Graph, b: &Bound, w: Var, prefix: &str) -> Result<Var> {
    let a = b.get(&format!("{prefix}.lora_a"))?;
    let bm = b.get(&format!("{prefix}.lora_b"))?;
    let delta = g.matmul(bm, a)?;
    g.add(w, delta)
}

/// Effective LoRA weight computed on plain tensors.
pub fn lora_effective_weight(w: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    w.add(&b.matmul(a)?)
}

/// `x + W_up ReLU(W_down x + b_down) + b_up`.
fn adapter_block(g: &mut Graph, b: &Bound, x: Var, layer: usize) -> Result<Var> {
    let p = format!("{}.adapter", vit::layer_prefix(layer));
    let h = g.matmul(b.get(&format!("{p}.down.weight"))?, x)?;
    let h = g.add_column(h, b.get(&format!("{p}.down.bias"))?)?;
    let h = g.relu(h)?;
    let o = g.matmul(b.get(&format!("{p}.up.weight"))?, h)?;
    let o = g.add_column(o, b.get(&format!("{p}.up.bias"))?)?;
    g.add(x, o)
}

/// An embedded prompt block `P_E ∈ ℝ^{d_p×n}` and the way it meets `KᵀQ`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedPrompt {
    pub values: Tensor,
    pub way: EmbeddingWay,
}

impl EmbeddedPrompt {
    pub fn new(values: Tensor, way: EmbeddingWay) -> Self {
        Self { values, way }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }
}

/// Row indices that repeat a `d_p`-row block to cover `n` rows.
fn tile_indices(d_p: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i % d_p).collect()
}

fn check_prompt_shape(g: &Graph, ktq: Var, prompt: Var) -> Result<(usize, usize)> {
    let (r, c) = g.value(ktq).dims2()?;
    let (pr, pc) = g.value(prompt).dims2()?;
    if pc != c {
        return Err(Error::Contract(format!(
            "prompt has {pc} columns but KᵀQ has {c}"
        )));
    }
    if pr == 0 {
        return Err(Error::Contract("prompt has no rows".into()));
    }
    Ok((r, pr))
}

/// The matrix handed to the column softmax for a given embedding way.
pub fn embedding_way_graph(g: &mut Graph, ktq: Var, prompt: Var, way: EmbeddingWay) -> Result<Var> {
    let (n_rows, d_p) = check_prompt_shape(g, ktq, prompt)?;
    match way {
        EmbeddingWay::Add => {
            let tiled = g.gather_rows(prompt, tile_indices(d_p, n_rows))?;
            g.add(ktq, tiled)
        }
        EmbeddingWay::Multiply => {
            let tiled = g.gather_rows(prompt, tile_indices(d_p, n_rows))?;
            g.mul(ktq, tiled)
        }
        EmbeddingWay::PureCat => g.vstack(&[prompt, ktq]),
        EmbeddingWay::MultiCat => {
            let alpha = g.column_range(ktq)?;
            let scaled = g.mul_row(prompt, alpha)?;
            g.vstack(&[scaled, ktq])
        }
    }
}

/// Attention weights for one head under an embedded prompt. Cat ways drop the
/// prompt rows after the softmax, so the output keeps the `n × n` shape.
pub fn prompted_scores(g: &mut Graph, ktq: Var, prompt: Var, way: EmbeddingWay) -> Result<Var> {
    let (n_rows, d_p) = check_prompt_shape(g, ktq, prompt)?;
    let m = embedding_way_graph(g, ktq, prompt, way)?;
    let s = g.softmax_columns(m)?;
    if way.is_cat() {
        g.slice_rows(s, d_p, n_rows)
    } else {
        Ok(s)
    }
}

pub fn embedding_way_transform(ktq: &Tensor, p: &EmbeddedPrompt) -> Result<Tensor> {
    let mut g = Graph::new();
    let k = g.constant(ktq.clone());
    let pv = g.constant(p.values.clone());
    let m = embedding_way_graph(&mut g, k, pv, p.way)?;
    Ok(g.value(m).clone())
}

pub fn prompted_softmax(ktq: &Tensor, p: &EmbeddedPrompt) -> Result<Tensor> {
    let mut g = Graph::new();
    let k = g.constant(ktq.clone());
    let pv = g.constant(p.values.clone());
    let s = prompted_scores(&mut g, k, pv, p.way)?;
    Ok(g.value(s).clone())
}

/// `α_j = max_i m_ij − min_i m_ij`.
pub fn scaling_vector_alpha(ktq: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = ktq.dims2()?;
    Ok((0..c)
        .map(|j| {
            let col = (0..r).map(|i| ktq.get(i, j));
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .collect())
}

/// Retained softmax mass per column, `c_j = Σe^u / (Σe^u + Σe^{p'})`, where
/// `p'` is the prompt block after the embedding-way transform.
pub fn measure_scaling_factors(ktq: &Tensor, p: &EmbeddedPrompt) -> Result<Vec<f64>> {
    if !p.way.is_cat() {
        return Err(Error::Contract(format!(
            "scaling factors need a concatenating way, got {}",
            p.way.as_str()
        )));
    }
    let m = embedding_way_transform(ktq, p)?;
    let (rows, cols) = m.dims2()?;
    let d_p = p.rows();
    Ok((0..cols)
        .map(|j| {
            let max = (0..rows).map(|i| m.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let prompt_mass: f64 = (0..d_p).map(|i| (m.get(i, j) - max).exp()).sum();
            let kept: f64 = (d_p..rows).map(|i| (m.get(i, j) - max).exp()).sum();
            kept / (kept + prompt_mass)
        })
        .collect())
}
