//! Vision transformer encoder with multi-level taps, the DINO-style
//! projection head, and the flat named parameter store shared by student
//! and teacher.

use std::sync::Arc;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{softmax_rows, Graph, Mat, Var};
use crate::config::RunConfig;
use crate::depth_head::{self, DecoderIndices};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;
const NORMALIZE_EPS: f64 = 1e-12;
/// Per-channel input standardization (ImageNet statistics).
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];
const INIT_STD: f64 = 0.02;

/// Flat, ordered list of named parameter matrices.
///
/// Ordering is fixed by [`layout`] for a given config, which is what lets
/// the teacher pair its shadow copies with student entries by index.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    names: Vec<String>,
    values: Vec<Arc<Mat>>,
}

impl NetworkParams {
    pub fn new(names: Vec<String>, values: Vec<Mat>) -> Self {
        assert_eq!(names.len(), values.len());
        Self {
            names,
            values: values.into_iter().map(Arc::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn shared(&self, i: usize) -> &Arc<Mat> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Mat {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &*self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Errors unless names and shapes match `layout` exactly.
    pub fn check_layout(&self, layout: &[ParamSpec]) -> Result<()> {
        if self.len() != layout.len() {
            return Err(Error::ShapeMismatch {
                name: "<parameter count>".into(),
                expected: (layout.len(), 1),
                found: (self.len(), 1),
            });
        }
        for (spec, (name, v)) in layout.iter().zip(self.iter()) {
            if spec.name != name || spec.shape != v.dim() {
                return Err(Error::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape,
                    found: v.dim(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    TruncNormal(f64),
    /// `N(0, 2 / fan_in)`.
    He { fan_in: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
    /// Excluded from weight decay (biases and normalization affines).
    pub no_decay: bool,
}

impl ParamSpec {
    pub(crate) fn bias(name: impl Into<String>, shape: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            shape,
            init: Init::Zeros,
            no_decay: true,
        }
    }

    pub(crate) fn norm_scale(name: impl Into<String>, shape: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            shape,
            init: Init::Ones,
            no_decay: true,
        }
    }

    pub(crate) fn weight(name: impl Into<String>, shape: (usize, usize), init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
            no_decay: false,
        }
    }
}

/// Canonical parameter list: backbone, projection head, then depth decoder.
pub fn layout(cfg: &RunConfig) -> Vec<ParamSpec> {
    let b = &cfg.backbone;
    let d = b.embed_dim;
    let p = b.patch_size;
    let grid = cfg.clip.crop_size / p;
    let tokens = grid * grid + 1;
    let hidden = d * b.mlp_ratio;
    let tn = Init::TruncNormal(INIT_STD);
    let mut specs = vec![
        ParamSpec::weight("patch_embed.weight", (3 * p * p, d), tn),
        ParamSpec::bias("patch_embed.bias", (1, d)),
        ParamSpec::weight("cls_token", (1, d), tn),
        ParamSpec::weight("pos_embed", (tokens, d), tn),
    ];
    for i in 0..b.depth {
        let pre = format!("blocks.{i}");
        specs.extend([
            ParamSpec::norm_scale(format!("{pre}.norm1.weight"), (1, d)),
            ParamSpec::bias(format!("{pre}.norm1.bias"), (1, d)),
            ParamSpec::weight(format!("{pre}.attn.qkv.weight"), (d, 3 * d), tn),
            ParamSpec::bias(format!("{pre}.attn.qkv.bias"), (1, 3 * d)),
            ParamSpec::weight(format!("{pre}.attn.proj.weight"), (d, d), tn),
            ParamSpec::bias(format!("{pre}.attn.proj.bias"), (1, d)),
            ParamSpec::norm_scale(format!("{pre}.norm2.weight"), (1, d)),
            ParamSpec::bias(format!("{pre}.norm2.bias"), (1, d)),
            ParamSpec::weight(format!("{pre}.mlp.fc1.weight"), (d, hidden), tn),
            ParamSpec::bias(format!("{pre}.mlp.fc1.bias"), (1, hidden)),
            ParamSpec::weight(format!("{pre}.mlp.fc2.weight"), (hidden, d), tn),
            ParamSpec::bias(format!("{pre}.mlp.fc2.bias"), (1, d)),
        ]);
    }
    specs.extend([
        ParamSpec::norm_scale("norm.weight", (1, d)),
        ParamSpec::bias("norm.bias", (1, d)),
        ParamSpec::weight("head.mlp.0.weight", (d, b.head_hidden), tn),
        ParamSpec::bias("head.mlp.0.bias", (1, b.head_hidden)),
        ParamSpec::weight("head.mlp.1.weight", (b.head_hidden, b.head_hidden), tn),
        ParamSpec::bias("head.mlp.1.bias", (1, b.head_hidden)),
        ParamSpec::weight("head.mlp.2.weight", (b.head_hidden, b.bottleneck_dim), tn),
        ParamSpec::bias("head.mlp.2.bias", (1, b.bottleneck_dim)),
        ParamSpec::weight("head.last_layer.weight", (b.bottleneck_dim, b.out_dim), tn),
    ]);
    specs.extend(depth_head::layout(d));
    specs
}

pub fn init_from_layout(specs: &[ParamSpec], rng: &mut impl Rng) -> NetworkParams {
    let mut names = Vec::with_capacity(specs.len());
    let mut values = Vec::with_capacity(specs.len());
    for spec in specs {
        let v = match spec.init {
            Init::Zeros => Mat::zeros(spec.shape),
            Init::Ones => Mat::ones(spec.shape),
            Init::TruncNormal(std) => {
                let n = Normal::new(0.0, std).expect("valid std");
                Mat::from_shape_simple_fn(spec.shape, || loop {
                    let x: f64 = n.sample(rng);
                    if x.abs() <= 2.0 * std {
                        break x;
                    }
                })
            }
            Init::He { fan_in } => {
                let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                Mat::from_shape_simple_fn(spec.shape, || n.sample(rng))
            }
        };
        names.push(spec.name.clone());
        values.push(v);
    }
    NetworkParams::new(names, values)
}

/// Truncated-normal transformer weights, He-initialized decoder.
pub fn init_params(cfg: &RunConfig, rng: &mut impl Rng) -> NetworkParams {
    init_from_layout(&layout(cfg), rng)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Taps {
    pub middle: bool,
    pub attention: bool,
    pub patches: bool,
}

impl Taps {
    pub const NONE: Taps = Taps {
        middle: false,
        attention: false,
        patches: false,
    };
    pub const ALL: Taps = Taps {
        middle: true,
        attention: true,
        patches: true,
    };
}

/// Final-block attention read-outs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTaps {
    /// `N × S`: CLS-query attention over patch keys, re-normalized with the
    /// CLS key excluded. Every row sums to one.
    pub maps: Mat,
    /// `N × S`: patch columns of the CLS-query attention when the CLS key
    /// takes part in the softmax (rows sum to less than one).
    pub patch_mass: Mat,
    /// Per head, `S × D_h` slice of the query projection of patch tokens.
    pub queries: Vec<Mat>,
}

/// Graph handles produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub cls: Var,
    pub z: Var,
    pub f: Var,
    /// `S × D` output of the tap block (patch rows only).
    pub middle: Option<Var>,
    /// `S × D` final normalized patch embeddings.
    pub patches: Option<Var>,
    pub attention: Option<AttentionTaps>,
}

/// Plain-value view of every tap.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelFeatures {
    pub cls: Vec<f64>,
    pub z: Vec<f64>,
    pub f: Vec<f64>,
    pub middle: Option<Mat>,
    pub patches: Option<Mat>,
    pub attention: Option<AttentionTaps>,
}

#[derive(Debug, Clone)]
struct BlockIndices {
    norm1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    norm2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

/// Architecture plus resolved parameter slots.
#[derive(Debug, Clone)]
pub struct Network {
    embed_dim: usize,
    heads: usize,
    patch_size: usize,
    crop_size: usize,
    tap_layer: usize,
    specs: Vec<ParamSpec>,
    patch_embed: (usize, usize),
    cls_token: usize,
    pos_embed: usize,
    blocks: Vec<BlockIndices>,
    norm: (usize, usize),
    head: [(usize, usize); 3],
    last_layer: usize,
    decoder: DecoderIndices,
}

impl Network {
    pub fn new(cfg: &RunConfig) -> Self {
        let specs = layout(cfg);
        let at = |name: &str| {
            specs
                .iter()
                .position(|s| s.name == name)
                .unwrap_or_else(|| panic!("layout has no `{name}`"))
        };
        let pair = |pre: &str| (at(&format!("{pre}.weight")), at(&format!("{pre}.bias")));
        let blocks = (0..cfg.backbone.depth)
            .map(|i| BlockIndices {
                norm1: pair(&format!("blocks.{i}.norm1")),
                qkv: pair(&format!("blocks.{i}.attn.qkv")),
                proj: pair(&format!("blocks.{i}.attn.proj")),
                norm2: pair(&format!("blocks.{i}.norm2")),
                fc1: pair(&format!("blocks.{i}.mlp.fc1")),
                fc2: pair(&format!("blocks.{i}.mlp.fc2")),
            })
            .collect();
        let decoder = DecoderIndices::resolve(&specs);
        Self {
            embed_dim: cfg.backbone.embed_dim,
            heads: cfg.backbone.heads,
            patch_size: cfg.backbone.patch_size,
            crop_size: cfg.clip.crop_size,
            tap_layer: cfg.proto.tap_layer_mid,
            patch_embed: pair("patch_embed"),
            cls_token: at("cls_token"),
            pos_embed: at("pos_embed"),
            blocks,
            norm: pair("norm"),
            head: [pair("head.mlp.0"), pair("head.mlp.1"), pair("head.mlp.2")],
            last_layer: at("head.last_layer.weight"),
            decoder,
            specs,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn crop_size(&self) -> usize {
        self.crop_size
    }

    /// Side of the patch grid.
    pub fn grid(&self) -> usize {
        self.crop_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn decoder(&self) -> &DecoderIndices {
        &self.decoder
    }

    /// Flattens an `H × W × 3` image in `[0, 1]` into `S × (3·p·p)`
    /// raster-ordered, channel-standardized patches.
    pub fn patchify(&self, image: &Array3<f64>) -> Result<Mat> {
        let (h, w, c) = image.dim();
        let p = self.patch_size;
        if c != 3 || h % p != 0 || w % p != 0 {
            return Err(Error::IndivisibleDims { height: h, width: w, patch: p });
        }
        if h != self.crop_size || w != self.crop_size {
            return Err(Error::ShapeMismatch {
                name: "input image".into(),
                expected: (self.crop_size, self.crop_size),
                found: (h, w),
            });
        }
        let (gh, gw) = (h / p, w / p);
        let mut out = Mat::zeros((gh * gw, 3 * p * p));
        for py in 0..gh {
            for px in 0..gw {
                let mut row = out.row_mut(py * gw + px);
                let mut k = 0;
                for ch in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            row[k] = (image[[py * p + dy, px * p + dx, ch]] - PIXEL_MEAN[ch]) / PIXEL_STD[ch];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn linear(&self, g: &mut Graph, params: &NetworkParams, x: Var, (w, b): (usize, usize)) -> Var {
        let wv = g.param(w, params.shared(w));
        let bv = g.param(b, params.shared(b));
        let y = g.matmul(x, wv);
        g.add_row(y, bv)
    }

    fn layer_norm(&self, g: &mut Graph, params: &NetworkParams, x: Var, (w, b): (usize, usize)) -> Var {
        let wv = g.param(w, params.shared(w));
        let bv = g.param(b, params.shared(b));
        g.layer_norm_rows(x, wv, bv, LN_EPS)
    }

    /// Encodes one image onto `g`. Taps never alter `z` or `f`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        params: &NetworkParams,
        image: &Array3<f64>,
        taps: Taps,
    ) -> Result<EncodedVars> {
        let patches = self.patchify(image)?;
        let patches = g.constant(patches);
        self.encode_patches(g, params, patches, taps)
    }

    /// Encoder body from already-flattened patches (`S × 3p²`).
    pub fn encode_patches(
        &self,
        g: &mut Graph,
        params: &NetworkParams,
        patches: Var,
        taps: Taps,
    ) -> Result<EncodedVars> {
        let s_tokens = g.value(patches).nrows();
        let pos = params.value(self.pos_embed);
        if pos.nrows() != s_tokens + 1 {
            return Err(Error::ShapeMismatch {
                name: "pos_embed".into(),
                expected: (s_tokens + 1, self.embed_dim),
                found: pos.dim(),
            });
        }
        let tokens = self.linear(g, params, patches, self.patch_embed);
        let cls = g.param(self.cls_token, params.shared(self.cls_token));
        let seq = g.concat_rows(&[cls, tokens]);
        let pos = g.param(self.pos_embed, params.shared(self.pos_embed));
        let mut x = g.add(seq, pos);

        let last = self.blocks.len() - 1;
        let mut middle = None;
        let mut attention = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let want_attn = taps.attention && i == last;
            let (out, attn) = self.block(g, params, x, block, want_attn);
            x = out;
            if want_attn {
                attention = attn;
            }
            if taps.middle && i + 1 == self.tap_layer {
                middle = Some(g.slice_rows(x, 1, s_tokens + 1));
            }
        }
        let x = self.layer_norm(g, params, x, self.norm);
        let cls = g.slice_rows(x, 0, 1);
        let patches_out = taps.patches.then(|| g.slice_rows(x, 1, s_tokens + 1));
        let (z, f) = self.project_graph(g, params, cls);
        Ok(EncodedVars {
            cls,
            z,
            f,
            middle,
            patches: patches_out,
            attention,
        })
    }

    fn block(
        &self,
        g: &mut Graph,
        params: &NetworkParams,
        x: Var,
        idx: &BlockIndices,
        want_attn: bool,
    ) -> (Var, Option<AttentionTaps>) {
        let d = self.embed_dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let h = self.layer_norm(g, params, x, idx.norm1);
        let qkv = self.linear(g, params, h, idx.qkv);
        let mut heads = Vec::with_capacity(self.heads);
        let mut taps = want_attn.then(|| AttentionTaps {
            maps: Mat::zeros((self.heads, g.value(x).nrows() - 1)),
            patch_mass: Mat::zeros((self.heads, g.value(x).nrows() - 1)),
            queries: Vec::with_capacity(self.heads),
        });
        for n in 0..self.heads {
            let q = g.slice_cols(qkv, n * dh, (n + 1) * dh);
            let k = g.slice_cols(qkv, d + n * dh, d + (n + 1) * dh);
            let v = g.slice_cols(qkv, 2 * d + n * dh, 2 * d + (n + 1) * dh);
            let logits = g.matmul_nt(q, k);
            let logits = g.scale(logits, scale);
            let probs = g.softmax_rows(logits);
            if let Some(t) = taps.as_mut() {
                let lv = g.value(logits);
                let cls_to_patches = lv.slice(s![0..1, 1..]).to_owned();
                t.maps.row_mut(n).assign(&softmax_rows(&cls_to_patches).row(0));
                t.patch_mass.row_mut(n).assign(&g.value(probs).slice(s![0, 1..]));
                t.queries.push(g.value(q).slice(s![1.., ..]).to_owned());
            }
            heads.push(g.matmul(probs, v));
        }
        let o = g.concat_cols(&heads);
        let o = self.linear(g, params, o, idx.proj);
        let x = g.add(x, o);
        let h = self.layer_norm(g, params, x, idx.norm2);
        let h = self.linear(g, params, h, idx.fc1);
        let h = g.gelu(h);
        let h = self.linear(g, params, h, idx.fc2);
        (g.add(x, h), taps)
    }

    /// Projection head: three-layer MLP to the bottleneck `z`, then a
    /// weight-normalized linear layer on `z/‖z‖` giving the logits `f`.
    pub fn project_graph(&self, g: &mut Graph, params: &NetworkParams, cls: Var) -> (Var, Var) {
        let h = self.linear(g, params, cls, self.head[0]);
        let h = g.gelu(h);
        let h = self.linear(g, params, h, self.head[1]);
        let h = g.gelu(h);
        let z = self.linear(g, params, h, self.head[2]);
        let zn = g.l2_normalize_rows(z, NORMALIZE_EPS);
        let v = g.param(self.last_layer, params.shared(self.last_layer));
        let vn = g.l2_normalize_cols(v, NORMALIZE_EPS);
        let f = g.matmul(zn, vn);
        (z, f)
    }

    /// Value-only projection of a CLS embedding.
    pub fn project(&self, params: &NetworkParams, cls: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::no_grad();
        let c = g.constant(Array2::from_shape_vec((1, cls.len()), cls.to_vec()).expect("row"));
        let (z, f) = self.project_graph(&mut g, params, c);
        (g.value(z).iter().copied().collect(), g.value(f).iter().copied().collect())
    }

    /// Value-only encoding of a batch of images.
    pub fn encode(&self, params: &NetworkParams, images: &[Array3<f64>], taps: Taps) -> Result<Vec<MultiLevelFeatures>> {
        images
            .iter()
            .map(|image| {
                let mut g = Graph::no_grad();
                let vars = self.encode_graph(&mut g, params, image, taps)?;
                Ok(features_from_vars(&g, vars))
            })
            .collect()
    }
}

pub fn features_from_vars(g: &Graph, vars: EncodedVars) -> MultiLevelFeatures {
    let row = |v: Var| g.value(v).iter().copied().collect::<Vec<f64>>();
    MultiLevelFeatures {
        cls: row(vars.cls),
        z: row(vars.z),
        f: row(vars.f),
        middle: vars.middle.map(|v| g.value(v).clone()),
        patches: vars.patches.map(|v| g.value(v).clone()),
        attention: vars.attention,
    }
}
