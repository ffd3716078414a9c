//! Layer-graph representation of CNN backbones.
//!
//! A [`LayerGraph`] is a linear chain of [`LayerNode`]s plus two pieces of
//! structure: *atomic spans*, ranges that a truncation cut must not split
//! (residual units, the stem), and *block boundaries*, the coarse stage
//! partition used by block-level search. Cut positions are 1-based layer
//! indices; cutting at `k` keeps layers `1..=k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a layer computes. Parameter and MAC accounting dispatch on this.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Norm,
    Activation,
    Pool,
    Linear,
    /// Nearest-neighbour upsampling; `kernel` holds the scale factor.
    Upsample,
    /// Channel concatenation with the output of `skip_from`.
    Concat,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LayerKind::Conv => "conv",
            LayerKind::Norm => "norm",
            LayerKind::Activation => "activation",
            LayerKind::Pool => "pool",
            LayerKind::Linear => "linear",
            LayerKind::Upsample => "upsample",
            LayerKind::Concat => "concat",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// One layer in the chain.
///
/// Layers normally consume the previous layer's output. Three optional
/// cross-links bend that rule: `input_from` reroutes the input to an earlier
/// layer (projection branches), `add_from` sums an earlier output into the
/// input (residual joins), and `skip_from` concatenates an earlier output
/// along channels (decoder skips).
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel size for conv/pool, scale for upsample, `None` otherwise.
    #[serde(default)]
    pub kernel: Option<(usize, usize)>,
    #[serde(default = "one_pair")]
    pub stride: (usize, usize),
    #[serde(default)]
    pub padding: (usize, usize),
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub pool_kind: Option<PoolKind>,
    /// Output resolution. Filled in by [`LayerGraph::infer_spatial`].
    #[serde(default)]
    pub spatial: Option<(usize, usize)>,
    /// For `Concat` nodes: 1-based index of the layer providing the lateral input.
    #[serde(default)]
    pub skip_from: Option<usize>,
    /// Take input from this 1-based layer instead of the chain predecessor.
    #[serde(default)]
    pub input_from: Option<usize>,
    /// Add this 1-based layer's output to the input before applying the op.
    #[serde(default)]
    pub add_from: Option<usize>,
}

fn one_pair() -> (usize, usize) {
    (1, 1)
}

fn one() -> usize {
    1
}

impl LayerNode {
    /// Trainable parameter count of this layer alone.
    pub fn params(&self) -> u64 {
        let (inc, outc) = (self.in_channels as u64, self.out_channels as u64);
        match self.kind {
            LayerKind::Conv => {
                let (kh, kw) = self.kernel.unwrap_or((1, 1));
                let w = outc * (inc / self.groups as u64) * kh as u64 * kw as u64;
                w + if self.bias { outc } else { 0 }
            }
            LayerKind::Linear => outc * inc + if self.bias { outc } else { 0 },
            LayerKind::Norm => 2 * outc,
            _ => 0,
        }
    }

    /// Multiply-accumulate count of this layer alone. Needs `spatial`.
    ///
    /// Convs and linears count exact multiply-adds; everything else is
    /// charged one MAC per output element.
    pub fn macs(&self) -> Result<u64> {
        let (h, w) = self.spatial.ok_or_else(|| Error::MissingSpatial {
            layer: self.name.clone(),
        })?;
        let out_elems = (h * w * self.out_channels) as u64;
        let (inc, outc) = (self.in_channels as u64, self.out_channels as u64);
        Ok(match self.kind {
            LayerKind::Conv => {
                let (kh, kw) = self.kernel.unwrap_or((1, 1));
                let per_out = (inc / self.groups as u64) * kh as u64 * kw as u64;
                (h * w) as u64 * outc * per_out + if self.bias { out_elems } else { 0 }
            }
            LayerKind::Linear => {
                (h * w) as u64 * outc * inc + if self.bias { out_elems } else { 0 }
            }
            _ => out_elems,
        })
    }
}

/// Replacement task head: global average pooling followed by a linear
/// classifier, optionally with one hidden layer.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct HeadSpec {
    pub classes: usize,
    /// Hidden width of a two-layer MLP head; `None` means a single linear map.
    pub hidden: Option<usize>,
}

impl HeadSpec {
    pub fn linear(classes: usize) -> Self {
        HeadSpec {
            classes,
            hidden: None,
        }
    }

    /// Parameters of the head when attached to `in_channels` pooled features.
    pub fn params(&self, in_channels: usize) -> u64 {
        let (inc, c) = (in_channels as u64, self.classes as u64);
        match self.hidden {
            Some(h) => {
                let h = h as u64;
                inc * h + h + h * c + c
            }
            None => inc * c + c,
        }
    }

    /// MACs of the head: the pooling pass plus the linear map(s).
    pub fn macs(&self, in_channels: usize, spatial: (usize, usize)) -> u64 {
        let pool = (in_channels * spatial.0 * spatial.1) as u64;
        pool + self.params(in_channels)
    }
}

/// A valid cut position with enough context to reason about the prefix model.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TruncationPoint {
    /// 1-based layer index; the cut keeps layers `1..=index`.
    pub index: usize,
    /// Name of the last kept layer.
    pub layer: String,
    /// 1-based ordinal of the block containing `index`.
    pub block: usize,
    pub out_channels: usize,
    pub spatial: Option<(usize, usize)>,
    /// Backbone parameters of layers `1..=index` (head excluded).
    pub cum_params: u64,
    /// Backbone MACs of layers `1..=index`; `None` if spatial data is missing.
    pub cum_macs: Option<u64>,
}

/// Linear chain of layers with atomic spans and block boundaries.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LayerGraph {
    pub name: String,
    /// Input shape as (channels, height, width).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerNode>,
    /// Atomic `(start, end)` ranges, 1-based inclusive. A cut at `k` is
    /// invalid when `start <= k < end` for any span.
    pub spans: Vec<(usize, usize)>,
    /// Block end indices, ascending; the last entry equals `layers.len()`.
    pub blocks: Vec<usize>,
}

impl LayerGraph {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Structural checks: span and block bounds, channel chaining, concat wiring.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let len = self.layers.len();
        for &(s, e) in &self.spans {
            if s == 0 || e > len || s > e {
                return Err(Error::BadSpan { start: s, end: e, len });
            }
        }
        if self.blocks.is_empty() || *self.blocks.last().unwrap() != len {
            return Err(Error::Config(format!(
                "block boundaries {:?} must end at layer {len}",
                self.blocks
            )));
        }
        if self.blocks.windows(2).any(|w| w[0] >= w[1]) || self.blocks[0] == 0 {
            return Err(Error::Config(format!(
                "block boundaries {:?} must be strictly ascending and positive",
                self.blocks
            )));
        }
        let mut carry = self.input.0;
        for (i, node) in self.layers.iter().enumerate() {
            for (label, link) in [
                ("skip_from", node.skip_from),
                ("input_from", node.input_from),
                ("add_from", node.add_from),
            ] {
                if let Some(src) = link {
                    if src == 0 || src > i {
                        return Err(Error::InvalidLayer {
                            layer: node.name.clone(),
                            reason: format!("{label} {src} must reference an earlier layer"),
                        });
                    }
                }
            }
            let mut incoming = match node.input_from {
                Some(src) => self.layers[src - 1].out_channels,
                None => carry,
            };
            if let Some(src) = node.add_from {
                let added = self.layers[src - 1].out_channels;
                if added != incoming {
                    return Err(Error::InvalidLayer {
                        layer: node.name.clone(),
                        reason: format!("add_from provides {added} channels, input has {incoming}"),
                    });
                }
            }
            if node.kind == LayerKind::Concat {
                let src = node.skip_from.ok_or_else(|| Error::InvalidLayer {
                    layer: node.name.clone(),
                    reason: "concat layer without skip_from".into(),
                })?;
                incoming += self.layers[src - 1].out_channels;
            }
            let expect = incoming;
            if node.in_channels != expect {
                return Err(Error::InvalidLayer {
                    layer: node.name.clone(),
                    reason: format!(
                        "in_channels {} does not match incoming {}",
                        node.in_channels, expect
                    ),
                });
            }
            if node.groups == 0
                || node.in_channels % node.groups != 0
                || node.out_channels % node.groups != 0
            {
                return Err(Error::InvalidLayer {
                    layer: node.name.clone(),
                    reason: format!(
                        "groups {} must divide in {} and out {}",
                        node.groups, node.in_channels, node.out_channels
                    ),
                });
            }
            carry = node.out_channels;
        }
        Ok(())
    }

    /// Walk the chain and fill in every layer's output resolution.
    pub fn infer_spatial(&mut self) -> Result<()> {
        let (mut h, mut w) = (self.input.1, self.input.2);
        let mut resolved: Vec<(usize, usize)> = Vec::with_capacity(self.layers.len());
        for node in &self.layers {
            if let Some(src) = node.input_from {
                let sp = resolved[src - 1];
                h = sp.0;
                w = sp.1;
            }
            let out = match node.kind {
                LayerKind::Conv | LayerKind::Pool => {
                    let (kh, kw) = node.kernel.unwrap_or((1, 1));
                    let (sh, sw) = node.stride;
                    let (ph, pw) = node.padding;
                    if h + 2 * ph < kh || w + 2 * pw < kw {
                        return Err(Error::InvalidLayer {
                            layer: node.name.clone(),
                            reason: format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
                        });
                    }
                    ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1)
                }
                LayerKind::Upsample => {
                    let (sh, sw) = node.kernel.unwrap_or((2, 2));
                    (h * sh, w * sw)
                }
                LayerKind::Linear => (1, 1),
                LayerKind::Concat => {
                    let src = node.skip_from.unwrap_or(0);
                    if let Some(lateral) = resolved.get(src.wrapping_sub(1)) {
                        if *lateral != (h, w) {
                            return Err(Error::InvalidLayer {
                                layer: node.name.clone(),
                                reason: format!(
                                    "lateral input is {}x{} but main path is {h}x{w}",
                                    lateral.0, lateral.1
                                ),
                            });
                        }
                    }
                    (h, w)
                }
                _ => (h, w),
            };
            resolved.push(out);
            h = out.0;
            w = out.1;
        }
        for (node, sp) in self.layers.iter_mut().zip(resolved) {
            node.spatial = Some(sp);
        }
        Ok(())
    }

    /// 1-based ordinal of the block containing layer `index`.
    pub fn block_of(&self, index: usize) -> usize {
        self.blocks.iter().position(|&end| index <= end).map(|p| p + 1).unwrap_or(self.blocks.len())
    }

    /// True when a cut after layer `index` splits no atomic span.
    pub fn is_valid_cutoff(&self, index: usize) -> bool {
        index >= 1
            && index <= self.layers.len()
            && !self.spans.iter().any(|&(s, e)| s <= index && index < e)
    }

    /// All valid cut positions, shallow to deep, with cumulative complexity.
    pub fn enumerate_truncation_points(&self) -> Vec<TruncationPoint> {
        let mut points = Vec::new();
        let mut cum_params = 0u64;
        let mut cum_macs = Some(0u64);
        for (i, node) in self.layers.iter().enumerate() {
            let index = i + 1;
            cum_params += node.params();
            cum_macs = match (cum_macs, node.macs()) {
                (Some(acc), Ok(m)) => Some(acc + m),
                _ => None,
            };
            if self.is_valid_cutoff(index) {
                points.push(TruncationPoint {
                    index,
                    layer: node.name.clone(),
                    block: self.block_of(index),
                    out_channels: node.out_channels,
                    spatial: node.spatial,
                    cum_params,
                    cum_macs,
                });
            }
        }
        points
    }

    /// Parameters of layers `1..=cutoff` plus an optional task head.
    pub fn count_params(&self, cutoff: usize, head: Option<&HeadSpec>) -> Result<u64> {
        self.check_cutoff(cutoff)?;
        let backbone: u64 = self.layers[..cutoff].iter().map(LayerNode::params).sum();
        let head_params = match head {
            Some(h) => h.params(self.layers[cutoff - 1].out_channels),
            None => 0,
        };
        Ok(backbone + head_params)
    }

    /// MACs of layers `1..=cutoff` plus an optional task head.
    pub fn count_macs(&self, cutoff: usize, head: Option<&HeadSpec>) -> Result<u64> {
        self.check_cutoff(cutoff)?;
        let mut total = 0u64;
        for node in &self.layers[..cutoff] {
            total += node.macs()?;
        }
        if let Some(h) = head {
            let last = &self.layers[cutoff - 1];
            let spatial = last.spatial.ok_or_else(|| Error::MissingSpatial {
                layer: last.name.clone(),
            })?;
            total += h.macs(last.out_channels, spatial);
        }
        Ok(total)
    }

    fn check_cutoff(&self, cutoff: usize) -> Result<()> {
        if cutoff == 0 || cutoff > self.layers.len() {
            return Err(Error::InvalidCutoff {
                cutoff,
                len: self.layers.len(),
            });
        }
        Ok(())
    }

    /// Keep layers `1..=cutoff`, dropping spans and blocks that fall beyond.
    ///
    /// Fails if the cut would split an atomic span.
    pub fn truncate(&self, cutoff: usize) -> Result<LayerGraph> {
        self.check_cutoff(cutoff)?;
        if let Some(&(s, e)) = self.spans.iter().find(|&&(s, e)| s <= cutoff && cutoff < e) {
            return Err(Error::CutoffInsideSpan {
                cutoff,
                start: s,
                end: e,
            });
        }
        let mut blocks: Vec<usize> = self.blocks.iter().copied().filter(|&b| b < cutoff).collect();
        blocks.push(cutoff);
        Ok(LayerGraph {
            name: format!("{}@{}", self.name, cutoff),
            input: self.input,
            layers: self.layers[..cutoff].to_vec(),
            spans: self.spans.iter().copied().filter(|&(_, e)| e <= cutoff).collect(),
            blocks,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<LayerGraph> {
        let g: LayerGraph = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<LayerGraph> {
        LayerGraph::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Incremental construction of a [`LayerGraph`] with channel bookkeeping.
pub struct GraphBuilder {
    name: String,
    input: (usize, usize, usize),
    layers: Vec<LayerNode>,
    spans: Vec<(usize, usize)>,
    blocks: Vec<usize>,
    carry: usize,
    span_start: Option<usize>,
}

impl GraphBuilder {
    pub fn new(name: &str, input: (usize, usize, usize)) -> Self {
        GraphBuilder {
            name: name.to_string(),
            input,
            layers: Vec::new(),
            spans: Vec::new(),
            blocks: Vec::new(),
            carry: input.0,
            span_start: None,
        }
    }

    fn push(&mut self, node: LayerNode) -> &mut Self {
        self.carry = node.out_channels;
        self.layers.push(node);
        self
    }

    fn blank(&self, name: &str, kind: LayerKind, inc: usize, out: usize) -> LayerNode {
        LayerNode {
            name: name.into(),
            kind,
            in_channels: inc,
            out_channels: out,
            kernel: None,
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
            bias: false,
            pool_kind: None,
            spatial: None,
            skip_from: None,
            input_from: None,
            add_from: None,
        }
    }

    pub fn conv(&mut self, name: &str, out: usize, k: usize, s: usize, p: usize, bias: bool) -> &mut Self {
        let mut n = self.blank(name, LayerKind::Conv, self.carry, out);
        n.kernel = Some((k, k));
        n.stride = (s, s);
        n.padding = (p, p);
        n.bias = bias;
        self.push(n)
    }

    /// Conv that takes its input from 1-based layer `from` instead of the chain.
    pub fn conv_from(
        &mut self,
        name: &str,
        from: usize,
        out: usize,
        k: usize,
        s: usize,
        p: usize,
        bias: bool,
    ) -> &mut Self {
        let inc = self.layers[from - 1].out_channels;
        let mut n = self.blank(name, LayerKind::Conv, inc, out);
        n.kernel = Some((k, k));
        n.stride = (s, s);
        n.padding = (p, p);
        n.bias = bias;
        n.input_from = Some(from);
        self.push(n)
    }

    pub fn grouped_conv(
        &mut self,
        name: &str,
        out: usize,
        k: usize,
        s: usize,
        p: usize,
        groups: usize,
        bias: bool,
    ) -> &mut Self {
        self.conv(name, out, k, s, p, bias);
        self.layers.last_mut().unwrap().groups = groups;
        self
    }

    pub fn norm(&mut self, name: &str) -> &mut Self {
        let n = self.blank(name, LayerKind::Norm, self.carry, self.carry);
        self.push(n)
    }

    pub fn act(&mut self, name: &str) -> &mut Self {
        let n = self.blank(name, LayerKind::Activation, self.carry, self.carry);
        self.push(n)
    }

    /// Activation applied to `chain input + output of layer add_from`.
    pub fn act_add(&mut self, name: &str, add_from: usize) -> &mut Self {
        let mut n = self.blank(name, LayerKind::Activation, self.carry, self.carry);
        n.add_from = Some(add_from);
        self.push(n)
    }

    pub fn pool(&mut self, name: &str, k: usize, s: usize, p: usize) -> &mut Self {
        let mut n = self.blank(name, LayerKind::Pool, self.carry, self.carry);
        n.kernel = Some((k, k));
        n.stride = (s, s);
        n.padding = (p, p);
        n.pool_kind = Some(PoolKind::Max);
        self.push(n)
    }

    pub fn avgpool(&mut self, name: &str, k: usize, s: usize, p: usize) -> &mut Self {
        self.pool(name, k, s, p);
        self.layers.last_mut().unwrap().pool_kind = Some(PoolKind::Avg);
        self
    }

    pub fn linear(&mut self, name: &str, out: usize, bias: bool) -> &mut Self {
        let mut n = self.blank(name, LayerKind::Linear, self.carry, out);
        n.bias = bias;
        self.push(n)
    }

    pub fn upsample(&mut self, name: &str, scale: usize) -> &mut Self {
        let mut n = self.blank(name, LayerKind::Upsample, self.carry, self.carry);
        n.kernel = Some((scale, scale));
        self.push(n)
    }

    /// Concatenate the current path with the output of 1-based layer `skip_from`.
    pub fn concat(&mut self, name: &str, skip_from: usize) -> &mut Self {
        let lateral = self.layers[skip_from - 1].out_channels;
        let inc = self.carry + lateral;
        let mut n = self.blank(name, LayerKind::Concat, inc, inc);
        n.skip_from = Some(skip_from);
        self.push(n)
    }

    /// Index of the most recently added layer (1-based).
    pub fn here(&self) -> usize {
        self.layers.len()
    }

    /// Open an atomic span at the next layer to be added.
    pub fn begin_span(&mut self) -> &mut Self {
        self.span_start = Some(self.layers.len() + 1);
        self
    }

    /// Close the open span at the most recently added layer.
    pub fn end_span(&mut self) -> &mut Self {
        if let Some(s) = self.span_start.take() {
            self.spans.push((s, self.layers.len()));
        }
        self
    }

    /// Mark a block boundary after the most recently added layer.
    pub fn end_block(&mut self) -> &mut Self {
        self.blocks.push(self.layers.len());
        self
    }

    pub fn build(mut self) -> Result<LayerGraph> {
        if self.blocks.last() != Some(&self.layers.len()) {
            self.blocks.push(self.layers.len());
        }
        let mut g = LayerGraph {
            name: self.name,
            input: self.input,
            layers: self.layers,
            spans: self.spans,
            blocks: self.blocks,
        };
        g.validate()?;
        g.infer_spatial()?;
        Ok(g)
    }
}
