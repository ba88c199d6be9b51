//! Lightweight progressive-upsampling depth decoder.
//!
//! A 3×3 conv lifts the tap features to 256 channels, four stride-2
//! transposed convs double the resolution while narrowing channels
//! 256 → 128 → 64 → 32 → 16, and a final 3×3 conv plus sigmoid yields one
//! depth value per pixel. Every conv stage is followed by group norm and
//! GELU.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::vit::{init_from_layout, Init, NetworkParams, ParamSpec};

pub const STEM_CHANNELS: usize = 256;
pub const UP_CHANNELS: [usize; 4] = [128, 64, 32, 16];
const GN_EPS: f64 = 1e-5;

/// Output grows by 2 per stage.
pub const UPSAMPLE: usize = 1 << UP_CHANNELS.len();

pub fn groups_for(channels: usize) -> usize {
    channels.min(8)
}

pub fn layout(c_in: usize) -> Vec<ParamSpec> {
    let mut specs = vec![
        ParamSpec::weight("depth.conv0.weight", (STEM_CHANNELS, c_in * 9), Init::He { fan_in: c_in * 9 }),
        ParamSpec::bias("depth.conv0.bias", (STEM_CHANNELS, 1)),
        ParamSpec::norm_scale("depth.gn0.weight", (STEM_CHANNELS, 1)),
        ParamSpec::bias("depth.gn0.bias", (STEM_CHANNELS, 1)),
    ];
    let mut prev = STEM_CHANNELS;
    for (i, &c) in UP_CHANNELS.iter().enumerate() {
        let s = i + 1;
        // Fan-in follows the PyTorch convention for transposed convs
        // (second weight axis times kernel area).
        specs.extend([
            ParamSpec::weight(format!("depth.up{s}.weight"), (c * 9, prev), Init::He { fan_in: c * 9 }),
            ParamSpec::bias(format!("depth.up{s}.bias"), (c, 1)),
            ParamSpec::norm_scale(format!("depth.gn{s}.weight"), (c, 1)),
            ParamSpec::bias(format!("depth.gn{s}.bias"), (c, 1)),
        ]);
        prev = c;
    }
    specs.extend([
        ParamSpec::weight("depth.out.weight", (1, prev * 9), Init::He { fan_in: prev * 9 }),
        ParamSpec::bias("depth.out.bias", (1, 1)),
    ]);
    specs
}

/// Standalone decoder parameters.
pub fn init_decoder(c_in: usize, rng: &mut impl Rng) -> NetworkParams {
    init_from_layout(&layout(c_in), rng)
}

#[derive(Debug, Clone)]
struct Stage {
    weight: usize,
    bias: usize,
    gn_weight: usize,
    gn_bias: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderIndices {
    stem: Stage,
    ups: Vec<Stage>,
    out: (usize, usize),
}

impl DecoderIndices {
    pub fn resolve(specs: &[ParamSpec]) -> Self {
        let at = |name: String| {
            specs
                .iter()
                .position(|s| s.name == name)
                .unwrap_or_else(|| panic!("layout has no `{name}`"))
        };
        let stage = |conv: &str, gn: &str| Stage {
            weight: at(format!("depth.{conv}.weight")),
            bias: at(format!("depth.{conv}.bias")),
            gn_weight: at(format!("depth.{gn}.weight")),
            gn_bias: at(format!("depth.{gn}.bias")),
        };
        Self {
            stem: stage("conv0", "gn0"),
            ups: (1..=UP_CHANNELS.len())
                .map(|s| stage(&format!("up{s}"), &format!("gn{s}")))
                .collect(),
            out: (at("depth.out.weight".into()), at("depth.out.bias".into())),
        }
    }

    pub fn input_channels(&self, params: &NetworkParams) -> usize {
        params.value(self.stem.weight).ncols() / 9
    }
}

/// `D̂`: one map in `(0, 1)` at `16×` the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPrediction {
    pub depth: Array2<f64>,
}

/// Decodes a channel-first `C_in × (h·w)` feature map onto `g`, returning
/// a `1 × (16h·16w)` raster-ordered prediction.
pub fn decode_depth_graph(
    g: &mut Graph,
    params: &NetworkParams,
    idx: &DecoderIndices,
    m: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let expected = idx.input_channels(params);
    let found = g.value(m).nrows();
    if found != expected {
        return Err(Error::ChannelMismatch { expected, found });
    }
    let p = |g: &mut Graph, i: usize| g.param(i, params.shared(i));

    let (wt, b) = (p(g, idx.stem.weight), p(g, idx.stem.bias));
    let x = g.conv3x3(m, h, w, wt, b);
    let (gw, gb) = (p(g, idx.stem.gn_weight), p(g, idx.stem.gn_bias));
    let x = g.group_norm(x, groups_for(STEM_CHANNELS), gw, gb, GN_EPS);
    let mut x = g.gelu(x);
    let (mut hh, mut ww) = (h, w);
    for (stage, &c) in idx.ups.iter().zip(UP_CHANNELS.iter()) {
        let (wt, b) = (p(g, stage.weight), p(g, stage.bias));
        let y = g.conv_transpose3x3_s2(x, hh, ww, wt, b);
        hh *= 2;
        ww *= 2;
        let (gw, gb) = (p(g, stage.gn_weight), p(g, stage.gn_bias));
        let y = g.group_norm(y, groups_for(c), gw, gb, GN_EPS);
        x = g.gelu(y);
    }
    let (wt, b) = (p(g, idx.out.0), p(g, idx.out.1));
    let y = g.conv3x3(x, hh, ww, wt, b);
    Ok(g.sigmoid(y))
}

/// Value-only decode of a `C_in × h × w` map given as `C_in × (h·w)`.
pub fn decode_depth(
    params: &NetworkParams,
    idx: &DecoderIndices,
    m: &Mat,
    h: usize,
    w: usize,
) -> Result<DepthPrediction> {
    if m.ncols() != h * w {
        return Err(Error::Invalid(format!(
            "decoder input has {} positions, expected {h}x{w}",
            m.ncols()
        )));
    }
    let mut g = Graph::no_grad();
    let mv = g.constant(m.clone());
    let out = decode_depth_graph(&mut g, params, idx, mv, h, w)?;
    let depth = g
        .value(out)
        .clone()
        .into_shape_with_order((h * UPSAMPLE, w * UPSAMPLE))
        .expect("decoder output is 1 × (H·W)");
    Ok(DepthPrediction { depth })
}
