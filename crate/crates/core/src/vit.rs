//! Toy vision transformer with a frozen-capable parameter layout.
//!
//! Token sequences are `d × n` matrices whose columns are patches; column 0 is
//! the CLS token. A layer computes `A = X + Att(X)` then `A + MLP(A)`, with
//! optional pre-norms in front of both sub-blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    pub num_classes: usize,
    /// Pre-norms before attention and MLP. Off reproduces the bare layer algebra.
    pub layer_norm: bool,
    /// Output projection after head concatenation.
    pub output_projection: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_side: 4,
            channels: 1,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 2,
            mlp_hidden_dim: 64,
            num_classes: 2,
            layer_norm: true,
            output_projection: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("patch_side", self.patch_side),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_hidden_dim", self.mlp_hidden_dim),
            ("num_classes", self.num_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("backbone.{field}"), "must be positive"));
            }
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::config(
                "backbone.patch_side",
                format!("{} does not divide image_side {}", self.patch_side, self.image_side),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "backbone.num_heads",
                format!("{} does not divide embed_dim {}", self.num_heads, self.embed_dim),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_side / self.patch_side).pow(2)
    }

    /// Token count including CLS.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }
}

pub fn layer_prefix(i: usize) -> String {
    format!("layers.{i}")
}

/// Shapes of the embedding and transformer layers (no head).
pub fn backbone_shapes(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let (d, m, n) = (cfg.embed_dim, cfg.mlp_hidden_dim, cfg.num_tokens());
    let mut out = vec![
        ("embed.patch.weight".to_string(), vec![d, cfg.patch_dim()]),
        ("embed.patch.bias".to_string(), vec![d, 1]),
        ("embed.cls".to_string(), vec![d, 1]),
        ("embed.pos".to_string(), vec![d, n]),
    ];
    for i in 0..cfg.num_layers {
        let p = layer_prefix(i);
        if cfg.layer_norm {
            out.push((format!("{p}.norm1.weight"), vec![d, 1]));
            out.push((format!("{p}.norm1.bias"), vec![d, 1]));
            out.push((format!("{p}.norm2.weight"), vec![d, 1]));
            out.push((format!("{p}.norm2.bias"), vec![d, 1]));
        }
        out.push((format!("{p}.attn.q.weight"), vec![d, d]));
        out.push((format!("{p}.attn.k.weight"), vec![d, d]));
        out.push((format!("{p}.attn.v.weight"), vec![d, d]));
        if cfg.output_projection {
            out.push((format!("{p}.attn.out.weight"), vec![d, d]));
        }
        out.push((format!("{p}.mlp.fc1.weight"), vec![m, d]));
        out.push((format!("{p}.mlp.fc1.bias"), vec![m, 1]));
        out.push((format!("{p}.mlp.fc2.weight"), vec![d, m]));
        out.push((format!("{p}.mlp.fc2.bias"), vec![d, 1]));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    /// Three-layer ReLU MLP with hidden width `embed_dim`.
    Mlp3,
}

pub fn head_shapes(cfg: &BackboneConfig, kind: HeadKind) -> Vec<(String, Vec<usize>)> {
    let (d, c) = (cfg.embed_dim, cfg.num_classes);
    match kind {
        HeadKind::Linear => vec![
            ("head.weight".to_string(), vec![c, d]),
            ("head.bias".to_string(), vec![c, 1]),
        ],
        HeadKind::Mlp3 => vec![
            ("head.fc1.weight".to_string(), vec![d, d]),
            ("head.fc1.bias".to_string(), vec![d, 1]),
            ("head.fc2.weight".to_string(), vec![d, d]),
            ("head.fc2.bias".to_string(), vec![d, 1]),
            ("head.fc3.weight".to_string(), vec![c, d]),
            ("head.fc3.bias".to_string(), vec![c, 1]),
        ],
    }
}

/// Random initialization keyed on the parameter name.
pub fn init_tensor<R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor {
    if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") {
        return Tensor::ones(shape);
    }
    if name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    if name == "embed.cls" || name == "embed.pos" {
        return Tensor::randn(shape, 0.0, 0.02, rng);
    }
    if name == "head.weight" {
        return Tensor::randn(shape, 0.0, 0.02, rng);
    }
    // Fan-in scaled Gaussian for every remaining weight matrix.
    let fan_in = shape.get(1).copied().unwrap_or(1).max(1) as f64;
    let std = if name.contains(".mlp.fc1.") || name.starts_with("head.fc") {
        (2.0 / fan_in).sqrt()
    } else {
        1.0 / fan_in.sqrt()
    };
    Tensor::randn(shape, 0.0, std, rng)
}

pub fn init_params<R: Rng + ?Sized>(shapes: &[(String, Vec<usize>)], rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.insert(name.clone(), init_tensor(name, shape, rng));
    }
    store
}

/// Flattens non-overlapping patches into the columns of a `patch_dim × patches`
/// matrix. Patches are visited row-major; within a patch the order is
/// (channel, row, column).
pub fn patchify(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let expected = [cfg.channels, cfg.image_side, cfg.image_side];
    if image.shape() != expected {
        return Err(Error::Ingestion(format!(
            "image shape {:?} does not match configured {:?}",
            image.shape(),
            expected
        )));
    }
    let (s, p) = (cfg.image_side, cfg.patch_side);
    let grid = s / p;
    let patches = grid * grid;
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; pd * patches];
    for gy in 0..grid {
        for gx in 0..grid {
            let col = gy * grid + gx;
            let mut row = 0;
            for ch in 0..cfg.channels {
                for py in 0..p {
                    for px in 0..p {
                        let (y, x) = (gy * p + py, gx * p + px);
                        out[row * patches + col] = image.data()[(ch * s + y) * s + x];
                        row += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![pd, patches], out)
}

/// Linear patch embedding, CLS prepended at column 0, positional embedding added.
pub fn embed(g: &mut Graph, b: &Bound, patches: Var) -> Result<Var> {
    let w = b.get("embed.patch.weight")?;
    let bias = b.get("embed.patch.bias")?;
    let projected = g.matmul(w, patches)?;
    let projected = g.add_column(projected, bias)?;
    let cls = b.get("embed.cls")?;
    let tokens = g.hstack(&[cls, projected])?;
    let pos = b.get("embed.pos")?;
    g.add(tokens, pos)
}

/// Image to token sequence `X⁰`.
pub fn tokens(g: &mut Graph, b: &Bound, image: &Tensor, cfg: &BackboneConfig) -> Result<Var> {
    let patches = patchify(image, cfg)?;
    let patches = g.constant(patches);
    embed(g, b, patches)
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub norm1: Option<(Var, Var)>,
    pub norm2: Option<(Var, Var)>,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Option<Var>,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl LayerVars {
    pub fn bind(b: &Bound, cfg: &BackboneConfig, i: usize) -> Result<Self> {
        let p = layer_prefix(i);
        let norm = |k: &str| -> Result<Option<(Var, Var)>> {
            if cfg.layer_norm {
                Ok(Some((b.get(&format!("{p}.{k}.weight"))?, b.get(&format!("{p}.{k}.bias"))?)))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            norm1: norm("norm1")?,
            norm2: norm("norm2")?,
            wq: b.get(&format!("{p}.attn.q.weight"))?,
            wk: b.get(&format!("{p}.attn.k.weight"))?,
            wv: b.get(&format!("{p}.attn.v.weight"))?,
            wo: if cfg.output_projection {
                Some(b.get(&format!("{p}.attn.out.weight"))?)
            } else {
                None
            },
            fc1_w: b.get(&format!("{p}.mlp.fc1.weight"))?,
            fc1_b: b.get(&format!("{p}.mlp.fc1.bias"))?,
            fc2_w: b.get(&format!("{p}.mlp.fc2.weight"))?,
            fc2_b: b.get(&format!("{p}.mlp.fc2.bias"))?,
        })
    }
}

/// Turns the `n × n` score matrix `K_hᵀQ_h` of one head into attention weights.
pub type ScoreFn<'a> = dyn FnMut(&mut Graph, usize, Var) -> Result<Var> + 'a;

pub fn plain_scores(g: &mut Graph, _head: usize, ktq: Var) -> Result<Var> {
    g.softmax_columns(ktq)
}

/// `Q = W_q X`, `K = W_k X / √(d/h)`, `V = W_v X`.
pub fn project_qkv(g: &mut Graph, x: Var, w: &LayerVars, cfg: &BackboneConfig) -> Result<(Var, Var, Var)> {
    let q = g.matmul(w.wq, x)?;
    let k = g.matmul(w.wk, x)?;
    let k = g.scale(k, 1.0 / (cfg.head_dim() as f64).sqrt())?;
    let v = g.matmul(w.wv, x)?;
    Ok((q, k, v))
}

/// Per head `V_h · scores(K_hᵀ Q_h)`; heads are stacked back along rows.
pub fn attention(
    g: &mut Graph,
    x: Var,
    w: &LayerVars,
    cfg: &BackboneConfig,
    scores: &mut ScoreFn<'_>,
) -> Result<Var> {
    let (q, k, v) = project_qkv(g, x, w, cfg)?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_rows(q, h * dh, dh)?,
                g.slice_rows(k, h * dh, dh)?,
                g.slice_rows(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let ktq = g.matmul(kt, qh)?;
        let weights = scores(g, h, ktq)?;
        heads.push(g.matmul(vh, weights)?);
    }
    let out = if heads.len() == 1 { heads[0] } else { g.vstack(&heads)? };
    match w.wo {
        Some(wo) => g.matmul(wo, out),
        None => Ok(out),
    }
}

/// `W_2 ReLU(W_1 X + b_1) + b_2`, column by column (residual excluded).
pub fn mlp(g: &mut Graph, x: Var, w: &LayerVars) -> Result<Var> {
    let h = g.matmul(w.fc1_w, x)?;
    let h = g.add_column(h, w.fc1_b)?;
    let h = g.relu(h)?;
    let o = g.matmul(w.fc2_w, h)?;
    g.add_column(o, w.fc2_b)
}

fn maybe_norm(g: &mut Graph, x: Var, norm: Option<(Var, Var)>) -> Result<Var> {
    match norm {
        Some((gamma, beta)) => g.layer_norm_columns(x, gamma, beta, LAYER_NORM_EPS),
        None => Ok(x),
    }
}

pub fn transformer_layer(
    g: &mut Graph,
    x: Var,
    w: &LayerVars,
    cfg: &BackboneConfig,
    scores: &mut ScoreFn<'_>,
) -> Result<Var> {
    let normed = maybe_norm(g, x, w.norm1)?;
    let att = attention(g, normed, w, cfg, scores)?;
    let a = g.add(att, x)?;
    let normed = maybe_norm(g, a, w.norm2)?;
    let m = mlp(g, normed, w)?;
    g.add(a, m)
}

#[derive(Clone, Debug)]
pub enum Head {
    Linear { w: Var, b: Var },
    Mlp3 { layers: [(Var, Var); 3] },
}

impl Head {
    pub fn bind(b: &Bound, kind: HeadKind) -> Result<Self> {
        Ok(match kind {
            HeadKind::Linear => Head::Linear {
                w: b.get("head.weight")?,
                b: b.get("head.bias")?,
            },
            HeadKind::Mlp3 => {
                let pair = |i: usize| -> Result<(Var, Var)> {
                    Ok((b.get(&format!("head.fc{i}.weight"))?, b.get(&format!("head.fc{i}.bias"))?))
                };
                Head::Mlp3 {
                    layers: [pair(1)?, pair(2)?, pair(3)?],
                }
            }
        })
    }

    pub fn apply(&self, g: &mut Graph, cls: Var) -> Result<Var> {
        match self {
            Head::Linear { w, b } => {
                let z = g.matmul(*w, cls)?;
                g.add_column(z, *b)
            }
            Head::Mlp3 { layers } => {
                let mut h = cls;
                for (i, (w, b)) in layers.iter().enumerate() {
                    h = g.matmul(*w, h)?;
                    h = g.add_column(h, *b)?;
                    if i < 2 {
                        h = g.relu(h)?;
                    }
                }
                Ok(h)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// CLS column after each layer (empty when there are no layers).
    pub per_layer_cls: Vec<Var>,
    /// Final CLS feature fed to the head.
    pub cls: Var,
    pub logits: Var,
}

pub fn cls_column(g: &mut Graph, x: Var, index: usize) -> Result<Var> {
    g.slice_cols(x, index, 1)
}

/// Plain sequential forward `τᴺ ∘ … ∘ τ¹`, then the head on the CLS column.
pub fn forward_backbone(
    g: &mut Graph,
    x0: Var,
    layers: &[LayerVars],
    cfg: &BackboneConfig,
    head: &Head,
) -> Result<BackboneOutput> {
    let mut x = x0;
    let mut per_layer_cls = Vec::with_capacity(layers.len());
    for w in layers {
        x = transformer_layer(g, x, w, cfg, &mut plain_scores)?;
        per_layer_cls.push(cls_column(g, x, 0)?);
    }
    let cls = cls_column(g, x, 0)?;
    let logits = head.apply(g, cls)?;
    Ok(BackboneOutput {
        per_layer_cls,
        cls,
        logits,
    })
}
