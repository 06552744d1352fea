//! Micro diffusion transformer predicting flow-matching velocities.
//!
//! Pipeline: patchify the image into tokens, embed them, prepend one class
//! token, add a sinusoidal time embedding to every token, run pre-norm
//! transformer blocks, then project the image tokens back to pixels.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_forward, AttentionCache, AttentionLayerWeights, LayerRoute, PerturbMethod,
    PerturbSpec,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{layernorm, matmul, Tensor, LAYERNORM_EPS};

/// Class conditioning: `Some(class)` or `None` for the null (unconditional)
/// token.
pub type Cond = Option<usize>;

/// Parses `"null"`/`"none"` or a class index.
pub fn parse_cond(s: &str) -> Result<Cond> {
    match s.trim() {
        "null" | "none" | "NULL" => Ok(None),
        v => v
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("bad condition `{s}`"))),
    }
}

pub fn format_cond(c: Cond) -> String {
    c.map_or_else(|| "null".to_string(), |c| c.to_string())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub layers: usize,
    pub heads_per_layer: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub class_count: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch: 2,
            layers: 4,
            heads_per_layer: 4,
            model_dim: 64,
            head_dim: 16,
            mlp_ratio: 4,
            class_count: 4,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.channels != 1 {
            return bad("only single-channel images are supported");
        }
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad("image_size must be a positive multiple of patch");
        }
        if self.layers == 0 || self.heads_per_layer == 0 || self.head_dim == 0 {
            return bad("layers, heads_per_layer and head_dim must be positive");
        }
        if self.model_dim != self.heads_per_layer * self.head_dim {
            return bad("model_dim must equal heads_per_layer * head_dim");
        }
        if !self.model_dim.is_multiple_of(2) || self.mlp_ratio == 0 || self.class_count == 0 {
            return bad("model_dim must be even; mlp_ratio and class_count positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Image tokens (excluding the class token).
    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn mlp_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }

    /// Row of the class embedding table used for the null condition.
    pub fn null_class(&self) -> usize {
        self.class_count
    }

    pub fn head_count(&self) -> usize {
        self.layers * self.heads_per_layer
    }

    pub fn all_heads(&self) -> Vec<crate::HeadId> {
        (0..self.layers)
            .flat_map(|l| (0..self.heads_per_layer).map(move |h| crate::HeadId::new(l, h)))
            .collect()
    }

    pub fn class_row(&self, cond: Cond) -> Result<usize> {
        match cond {
            None => Ok(self.null_class()),
            Some(c) if c < self.class_count => Ok(c),
            Some(c) => Err(Error::InvalidClass(c)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub attn: AttentionLayerWeights,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// All trainable parameters of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct DitWeights {
    pub config: DitConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    /// `(class_count + 1) × d`; the last row is the null class.
    pub class_emb: Tensor,
    pub time_w1: Tensor,
    pub time_b1: Tensor,
    pub time_w2: Tensor,
    pub time_b2: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub const INIT_STD: f64 = 0.02;

impl DitWeights {
    /// Seeded initialization: projections and embeddings `N(0, 0.02²)`,
    /// biases zero, layernorm gains one, output projection zero.
    pub fn init(config: &DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut w = Self::zeros(config);
        w.visit_mut(|name, t| {
            if is_gain(name) {
                t.data_mut().fill(1.0);
            } else if is_random_init(name) {
                for v in t.data_mut() {
                    *v = INIT_STD * rng.normal();
                }
            }
        });
        Ok(w)
    }

    /// Same as [`init`](Self::init) but with a random (non-zero) output
    /// projection, so gradients reach every parameter from the first step.
    pub fn init_dense_output(config: &DitConfig, seed: u64) -> Result<Self> {
        let mut w = Self::init(config, seed)?;
        let mut rng = Rng::new(seed ^ 0x5EED_0F0F);
        for v in w.out_w.data_mut() {
            *v = INIT_STD * rng.normal();
        }
        Ok(w)
    }

    /// Weights of the right shapes, every value zero.
    pub fn zeros(c: &DitConfig) -> Self {
        let d = c.model_dim;
        let vec = |n| Tensor::zeros(&[n]);
        let mat = |r, k| Tensor::zeros(&[r, k]);
        let blocks = (0..c.layers)
            .map(|_| Block {
                ln1_g: vec(d),
                ln1_b: vec(d),
                attn: AttentionLayerWeights {
                    wq: (0..c.heads_per_layer).map(|_| mat(d, c.head_dim)).collect(),
                    wk: (0..c.heads_per_layer).map(|_| mat(d, c.head_dim)).collect(),
                    wv: (0..c.heads_per_layer).map(|_| mat(d, c.head_dim)).collect(),
                    wo: mat(c.heads_per_layer * c.head_dim, d),
                },
                ln2_g: vec(d),
                ln2_b: vec(d),
                mlp_w1: mat(d, c.mlp_dim()),
                mlp_b1: vec(c.mlp_dim()),
                mlp_w2: mat(c.mlp_dim(), d),
                mlp_b2: vec(d),
            })
            .collect();
        Self {
            config: c.clone(),
            patch_w: mat(c.patch_dim(), d),
            patch_b: vec(d),
            pos: mat(c.image_tokens(), d),
            class_emb: mat(c.class_count + 1, d),
            time_w1: mat(d, d),
            time_b1: vec(d),
            time_w2: mat(d, d),
            time_b2: vec(d),
            blocks,
            lnf_g: vec(d),
            lnf_b: vec(d),
            out_w: mat(d, c.patch_dim()),
            out_b: vec(c.patch_dim()),
        }
    }

    /// Named parameters in canonical (checkpoint) order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("pos".into(), &self.pos),
            ("class_emb".into(), &self.class_emb),
            ("time_w1".into(), &self.time_w1),
            ("time_b1".into(), &self.time_b1),
            ("time_w2".into(), &self.time_w2),
            ("time_b2".into(), &self.time_b2),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.ln1_g"), &b.ln1_g));
            out.push((format!("blocks.{l}.ln1_b"), &b.ln1_b));
            for (name, ws) in [("wq", &b.attn.wq), ("wk", &b.attn.wk), ("wv", &b.attn.wv)] {
                for (h, w) in ws.iter().enumerate() {
                    out.push((format!("blocks.{l}.attn.{name}.{h}"), w));
                }
            }
            out.push((format!("blocks.{l}.attn.wo"), &b.attn.wo));
            out.push((format!("blocks.{l}.ln2_g"), &b.ln2_g));
            out.push((format!("blocks.{l}.ln2_b"), &b.ln2_b));
            out.push((format!("blocks.{l}.mlp_w1"), &b.mlp_w1));
            out.push((format!("blocks.{l}.mlp_b1"), &b.mlp_b1));
            out.push((format!("blocks.{l}.mlp_w2"), &b.mlp_w2));
            out.push((format!("blocks.{l}.mlp_b2"), &b.mlp_b2));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    /// Visits parameters mutably in the same order as [`params`](Self::params).
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("patch_w", &mut self.patch_w);
        f("patch_b", &mut self.patch_b);
        f("pos", &mut self.pos);
        f("class_emb", &mut self.class_emb);
        f("time_w1", &mut self.time_w1);
        f("time_b1", &mut self.time_b1);
        f("time_w2", &mut self.time_w2);
        f("time_b2", &mut self.time_b2);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{l}.ln1_g"), &mut b.ln1_g);
            f(&format!("blocks.{l}.ln1_b"), &mut b.ln1_b);
            for (name, ws) in [
                ("wq", &mut b.attn.wq),
                ("wk", &mut b.attn.wk),
                ("wv", &mut b.attn.wv),
            ] {
                for (h, w) in ws.iter_mut().enumerate() {
                    f(&format!("blocks.{l}.attn.{name}.{h}"), w);
                }
            }
            f(&format!("blocks.{l}.attn.wo"), &mut b.attn.wo);
            f(&format!("blocks.{l}.ln2_g"), &mut b.ln2_g);
            f(&format!("blocks.{l}.ln2_b"), &mut b.ln2_b);
            f(&format!("blocks.{l}.mlp_w1"), &mut b.mlp_w1);
            f(&format!("blocks.{l}.mlp_b1"), &mut b.mlp_b1);
            f(&format!("blocks.{l}.mlp_w2"), &mut b.mlp_w2);
            f(&format!("blocks.{l}.mlp_b2"), &mut b.mlp_b2);
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        f("out_w", &mut self.out_w);
        f("out_b", &mut self.out_b);
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every parameter shape against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::zeros(&self.config);
        for ((name, a), (_, b)) in self.params().iter().zip(reference.params()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with("_g")
}

fn is_random_init(name: &str) -> bool {
    matches!(name, "patch_w" | "pos" | "class_emb" | "time_w1" | "time_w2")
        || name.contains(".attn.w")
        || name.ends_with("mlp_w1")
        || name.ends_with("mlp_w2")
}

/// Coarse parameter groups, used to spread gradient probes.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("patch_") {
        "patch_embed"
    } else if name == "pos" {
        "pos_embed"
    } else if name == "class_emb" {
        "class_embed"
    } else if name.starts_with("time_") {
        "time_mlp"
    } else if name.contains("attn.wo") {
        "attn_out"
    } else if name.contains("attn.") {
        "attn_qkv"
    } else if name.contains("mlp_") {
        "mlp"
    } else if name.contains("ln") {
        "layernorm"
    } else {
        "out_proj"
    }
}

/// `[S×S]` image to `[(S/p)² × p²]` tokens; patches in row-major order, and
/// pixels within a patch in row-major order.
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    let size = img.rows();
    if img.shape() != [size, size] || patch == 0 || !size.is_multiple_of(patch) {
        return Err(Error::Shape(format!(
            "patchify: image {:?} with patch {patch}",
            img.shape()
        )));
    }
    let grid = size / patch;
    let mut out = Tensor::zeros(&[grid * grid, patch * patch]);
    for i in 0..size {
        for j in 0..size {
            let token = (i / patch) * grid + j / patch;
            let slot = (i % patch) * patch + j % patch;
            out.set(token, slot, img.get(i, j));
        }
    }
    Ok(out)
}

pub fn unpatchify(tokens: &Tensor, patch: usize) -> Result<Tensor> {
    let grid = (tokens.rows() as f64).sqrt() as usize;
    if tokens.shape() != [grid * grid, patch * patch] {
        return Err(Error::Shape(format!(
            "unpatchify: tokens {:?} with patch {patch}",
            tokens.shape()
        )));
    }
    let size = grid * patch;
    let mut out = Tensor::zeros(&[size, size]);
    for i in 0..size {
        for j in 0..size {
            let token = (i / patch) * grid + j / patch;
            let slot = (i % patch) * patch + j % patch;
            out.set(i, j, tokens.get(token, slot));
        }
    }
    Ok(out)
}

/// `[cos(1000 t f_i)..., sin(1000 t f_i)...]` with `f_i = 10000^(-i/half)`.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU; returns `(value, tanh term)`.
#[inline]
pub(crate) fn gelu(x: f64) -> (f64, f64) {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    (0.5 * x * (1.0 + th), th)
}

#[inline]
pub(crate) fn gelu_grad(x: f64, th: f64) -> f64 {
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Whole-layer perturbation, the reference route for head-level specs that
/// span complete layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPerturbation {
    pub layers: Vec<usize>,
    pub method: PerturbMethod,
    pub u: f64,
    pub tau: f64,
}

/// How the perturbed branch of a forward pass is routed.
#[derive(Clone, Copy, Debug)]
pub enum Perturbation<'a> {
    Heads(&'a PerturbSpec),
    Layers(&'a LayerPerturbation),
}

impl Perturbation<'_> {
    pub fn is_active(&self) -> bool {
        match self {
            Perturbation::Heads(s) => s.is_active(),
            Perturbation::Layers(l) => l.method != PerturbMethod::None && !l.layers.is_empty(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub(crate) struct BlockCache {
    pub x_in: Tensor,
    pub h1: Tensor,
    pub attn: AttentionCache,
    pub x_mid: Tensor,
    pub h2: Tensor,
    pub m_pre: Tensor,
    pub m_tanh: Tensor,
    pub m_act: Tensor,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct ForwardCache {
    pub patches: Tensor,
    pub class_row: usize,
    pub time_feat: Vec<f64>,
    pub time_pre: Vec<f64>,
    pub time_act: Vec<f64>,
    pub blocks: Vec<BlockCache>,
    pub x_final: Tensor,
    pub hf: Tensor,
}

/// Velocity prediction for `x_t` at time `t`, with `spec` applied inside
/// attention.
pub fn dit_forward(
    weights: &DitWeights,
    x_t: &Tensor,
    t: f64,
    cond: Cond,
    spec: &PerturbSpec,
) -> Result<Tensor> {
    forward_routed(weights, x_t, t, cond, Perturbation::Heads(spec))
}

pub fn forward_routed(
    weights: &DitWeights,
    x_t: &Tensor,
    t: f64,
    cond: Cond,
    route: Perturbation<'_>,
) -> Result<Tensor> {
    forward_impl(weights, x_t, t, cond, route, None)
}

pub(crate) fn forward_impl(
    w: &DitWeights,
    x_t: &Tensor,
    t: f64,
    cond: Cond,
    route: Perturbation<'_>,
    mut cache: Option<&mut ForwardCache>,
) -> Result<Tensor> {
    let c = &w.config;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    if x_t.shape() != [c.image_size, c.image_size] {
        return Err(Error::Shape(format!(
            "input image {:?}, model expects {}x{}",
            x_t.shape(),
            c.image_size,
            c.image_size
        )));
    }
    let class_row = c.class_row(cond)?;
    if let Perturbation::Heads(spec) = route {
        spec.check_range(c.layers, c.heads_per_layer)?;
    }
    let d = c.model_dim;

    // time embedding
    let feat = time_features(t, d);
    let feat_t = Tensor::new(&[1, d], feat.clone())?;
    let mut pre = matmul(&feat_t, &w.time_w1)?;
    pre.add_row_vector(w.time_b1.data());
    let act = pre.map(|x| x * sigmoid(x));
    let mut temb = matmul(&act, &w.time_w2)?;
    temb.add_row_vector(w.time_b2.data());

    // token sequence
    let patches = patchify(x_t, c.patch)?;
    let mut img = matmul(&patches, &w.patch_w)?;
    img.add_row_vector(w.patch_b.data());
    img.add_assign(&w.pos);
    let cls = Tensor::new(&[1, d], w.class_emb.row(class_row).to_vec())?;
    let mut x = Tensor::vconcat(&[cls, img])?;
    x.add_row_vector(temb.data());

    if let Some(fc) = cache.as_deref_mut() {
        fc.patches = patches;
        fc.class_row = class_row;
        fc.time_feat = feat;
        fc.time_pre = pre.into_data();
        fc.time_act = act.into_data();
        fc.blocks.clear();
    }

    let none = PerturbSpec::none();
    for (l, b) in w.blocks.iter().enumerate() {
        let layer_route = match route {
            Perturbation::Heads(spec) => LayerRoute::Heads(spec),
            Perturbation::Layers(lp) if lp.layers.contains(&l) => LayerRoute::WholeLayer {
                method: lp.method,
                u: lp.u,
                tau: lp.tau,
            },
            Perturbation::Layers(_) => LayerRoute::Heads(&none),
        };
        let mut bc = cache.as_ref().map(|_| BlockCache::default());

        let h1 = layernorm(&x, &b.ln1_g, &b.ln1_b, LAYERNORM_EPS)?;
        let att = attention_forward(
            &h1,
            &h1,
            &h1,
            &b.attn,
            l,
            layer_route,
            bc.as_mut().map(|bc| &mut bc.attn),
        )?;
        let mut x_mid = x.clone();
        x_mid.add_assign(&att);

        let h2 = layernorm(&x_mid, &b.ln2_g, &b.ln2_b, LAYERNORM_EPS)?;
        let mut m_pre = matmul(&h2, &b.mlp_w1)?;
        m_pre.add_row_vector(b.mlp_b1.data());
        let mut m_act = m_pre.clone();
        let mut m_tanh = bc.as_ref().map(|_| m_pre.clone());
        for (i, v) in m_act.data_mut().iter_mut().enumerate() {
            let (g, th) = gelu(*v);
            *v = g;
            if let Some(mt) = m_tanh.as_mut() {
                mt.data_mut()[i] = th;
            }
        }
        let mut m_out = matmul(&m_act, &b.mlp_w2)?;
        m_out.add_row_vector(b.mlp_b2.data());
        let mut x_next = x_mid.clone();
        x_next.add_assign(&m_out);

        if let (Some(fc), Some(mut bc)) = (cache.as_deref_mut(), bc) {
            bc.x_in = x;
            bc.h1 = h1;
            bc.x_mid = x_mid;
            bc.h2 = h2;
            bc.m_pre = m_pre;
            bc.m_tanh = m_tanh.expect("allocated with cache");
            bc.m_act = m_act;
            fc.blocks.push(bc);
        }
        x = x_next;
    }

    let hf = layernorm(&x, &w.lnf_g, &w.lnf_b, LAYERNORM_EPS)?;
    let img_tokens = hf.row_slice(1, c.image_tokens());
    let mut out = matmul(&img_tokens, &w.out_w)?;
    out.add_row_vector(w.out_b.data());
    if let Some(fc) = cache {
        fc.x_final = x;
        fc.hf = hf;
    }
    unpatchify(&out, c.patch)
}
