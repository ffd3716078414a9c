//! Model surgery for the four transfer strategies.
//!
//! Each builder takes a pretrained backbone graph and returns a
//! [`ModelPlan`]: the (possibly modified) graph, a [`FreezePlan`] with
//! per-layer learning-rate scales, the head to attach, and how much of the
//! graph keeps its pretrained weights.
//!
//! * `ftl`  finetunes the whole backbone.
//! * `ttl`  truncates at a cutoff and finetunes the rest.
//! * `lwft` keeps the full backbone but trains only the top `k` layers,
//!   the head at full rate and the remaining `k - 1` at a tenth.
//! * `tf`   keeps depth but halves the width of every layer above the
//!   cutoff; the halved part cannot reuse pretrained weights and is
//!   reinitialized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HeadSpec, LayerGraph, LayerKind};

pub use crate::graph::TruncationPoint;

/// Relative learning rate for each backbone layer plus the head.
/// A scale of zero freezes the layer.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FreezePlan {
    pub layer_scale: Vec<f64>,
    pub head_scale: f64,
}

impl FreezePlan {
    /// Everything trainable at the base rate.
    pub fn all(len: usize) -> Self {
        FreezePlan {
            layer_scale: vec![1.0; len],
            head_scale: 1.0,
        }
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        self.layer_scale[layer] == 0.0
    }

    pub fn frozen_layers(&self) -> usize {
        self.layer_scale.iter().filter(|&&s| s == 0.0).count()
    }
}

/// Output of a strategy builder.
#[derive(Clone, Debug)]
pub struct ModelPlan {
    pub graph: LayerGraph,
    pub freeze: FreezePlan,
    /// Head to attach on top of the backbone; `None` when the graph carries
    /// its own head (encoder-decoder models).
    pub head: Option<HeadSpec>,
    /// Layers `1..=fresh_above` keep pretrained weights; anything beyond is
    /// freshly initialized. Equal to the graph length except under `tf`.
    pub fresh_above: usize,
}

impl ModelPlan {
    pub fn params(&self) -> Result<u64> {
        self.graph.count_params(self.graph.len(), self.head.as_ref())
    }

    pub fn macs(&self) -> Result<u64> {
        self.graph.count_macs(self.graph.len(), self.head.as_ref())
    }
}

/// Which transfer strategy to apply.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ftl,
    Ttl,
    Lwft,
    Tf,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Ftl => "ftl",
            Strategy::Ttl => "ttl",
            Strategy::Lwft => "lwft",
            Strategy::Tf => "tf",
        };
        f.write_str(s)
    }
}

/// Declarative strategy description, as found in experiment configs.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Truncation boundary for `ttl` and `tf` (1-based layer index).
    #[serde(default)]
    pub cutoff: Option<usize>,
    /// Number of top layers to finetune for `lwft`, head included.
    #[serde(default)]
    pub unfreeze: Option<usize>,
    pub head: HeadSpec,
}

impl StrategyConfig {
    pub fn build(&self, graph: &LayerGraph) -> Result<ModelPlan> {
        match self.strategy {
            Strategy::Ftl => build_ftl(graph, self.head.clone()),
            Strategy::Ttl => {
                let cutoff = self.cutoff.ok_or_else(|| {
                    Error::Config("ttl requires a cutoff".into())
                })?;
                build_ttl(graph, cutoff, self.head.clone())
            }
            Strategy::Tf => {
                let cutoff = self.cutoff.ok_or_else(|| {
                    Error::Config("tf requires a cutoff".into())
                })?;
                build_tf(graph, cutoff, self.head.clone())
            }
            Strategy::Lwft => {
                let k = self.unfreeze.ok_or_else(|| {
                    Error::Config("lwft requires an unfreeze count".into())
                })?;
                build_lwft(graph, k, self.head.clone())
            }
        }
    }
}

/// Full transfer learning: reuse and finetune the whole backbone.
pub fn build_ftl(graph: &LayerGraph, head: HeadSpec) -> Result<ModelPlan> {
    graph.validate()?;
    Ok(ModelPlan {
        graph: graph.clone(),
        freeze: FreezePlan::all(graph.len()),
        head: Some(head),
        fresh_above: graph.len(),
    })
}

/// Truncated transfer learning: keep layers `1..=cutoff`, finetune all.
pub fn build_ttl(graph: &LayerGraph, cutoff: usize, head: HeadSpec) -> Result<ModelPlan> {
    let truncated = graph.truncate(cutoff)?;
    Ok(ModelPlan {
        freeze: FreezePlan::all(truncated.len()),
        graph: truncated,
        head: Some(head),
        fresh_above: cutoff,
    })
}

/// True for layers that own weights and therefore anchor a finetuning group.
fn weighted(kind: LayerKind) -> bool {
    matches!(kind, LayerKind::Conv | LayerKind::Linear)
}

/// Finetuning groups for layer-wise transfer, shallow to deep.
///
/// A residual unit (atomic span) is one group; outside spans, each conv or
/// linear layer anchors a group together with the parameter-free layers
/// that follow it. Returned ranges are 1-based inclusive.
pub fn lwft_groups(graph: &LayerGraph) -> Vec<(usize, usize)> {
    let len = graph.len();
    let mut span_at = vec![None; len + 1];
    let mut spans: Vec<(usize, usize)> = graph.spans.clone();
    spans.sort_unstable();
    for &(s, e) in &spans {
        span_at[s] = Some(e);
    }
    let mut groups = Vec::new();
    let mut i = 1;
    while i <= len {
        if let Some(e) = span_at[i] {
            groups.push((i, e));
            i = e + 1;
            continue;
        }
        let start = i;
        let mut seen_weighted = weighted(graph.layers[i - 1].kind);
        let mut j = i;
        while j + 1 <= len && span_at[j + 1].is_none() {
            let next_weighted = weighted(graph.layers[j].kind);
            if next_weighted && seen_weighted {
                break;
            }
            seen_weighted |= next_weighted;
            j += 1;
        }
        groups.push((start, j));
        i = j + 1;
    }
    groups
}

/// Layer-wise finetuning: train the head at the base rate and the top
/// `k - 1` backbone groups at a tenth of it; freeze the rest.
pub fn build_lwft(graph: &LayerGraph, k: usize, head: HeadSpec) -> Result<ModelPlan> {
    graph.validate()?;
    if k == 0 {
        return Err(Error::Config("lwft unfreeze count must be at least 1".into()));
    }
    let groups = lwft_groups(graph);
    if k > groups.len() + 1 {
        return Err(Error::Config(format!(
            "lwft unfreeze count {k} exceeds the {} finetunable layers (head included)",
            groups.len() + 1
        )));
    }
    let mut freeze = FreezePlan {
        layer_scale: vec![0.0; graph.len()],
        head_scale: 1.0,
    };
    for &(s, e) in groups.iter().rev().take(k - 1) {
        for scale in &mut freeze.layer_scale[s - 1..e] {
            *scale = 0.1;
        }
    }
    Ok(ModelPlan {
        graph: graph.clone(),
        freeze,
        head: Some(head),
        fresh_above: graph.len(),
    })
}

/// Channel fusion: keep the full depth but halve the width of every layer
/// strictly above `cutoff`. The boundary layer keeps its unhalved input.
/// Halved layers cannot reuse pretrained weights, so `fresh_above = cutoff`.
pub fn build_tf(graph: &LayerGraph, cutoff: usize, head: HeadSpec) -> Result<ModelPlan> {
    graph.validate()?;
    if cutoff == 0 || cutoff > graph.len() {
        return Err(Error::InvalidCutoff {
            cutoff,
            len: graph.len(),
        });
    }
    if !graph.is_valid_cutoff(cutoff) {
        let (s, e) = graph
            .spans
            .iter()
            .copied()
            .find(|&(s, e)| s <= cutoff && cutoff < e)
            .unwrap();
        return Err(Error::CutoffInsideSpan {
            cutoff,
            start: s,
            end: e,
        });
    }
    let mut g = graph.clone();
    g.name = format!("{}-tf@{cutoff}", graph.name);
    for i in cutoff..g.len() {
        // Recompute the input from the (possibly already halved) producer.
        let chain_in = match g.layers[i].input_from {
            Some(src) => g.layers[src - 1].out_channels,
            None => g.layers[i - 1].out_channels,
        };
        let node = &g.layers[i];
        let mut inc = chain_in;
        if node.kind == LayerKind::Concat {
            inc += g.layers[node.skip_from.unwrap() - 1].out_channels;
        }
        let out = if weighted(node.kind) {
            (node.out_channels / 2).max(1)
        } else {
            inc
        };
        if node.groups > 1 && (inc % node.groups != 0 || out % node.groups != 0) {
            return Err(Error::UnsplittableGroups {
                layer: node.name.clone(),
                channels: node.out_channels,
                groups: node.groups,
            });
        }
        if let Some(src) = node.add_from {
            let added = g.layers[src - 1].out_channels;
            if added != inc {
                return Err(Error::InvalidLayer {
                    layer: node.name.clone(),
                    reason: format!(
                        "halving above layer {cutoff} breaks the residual join \
                         ({added} channels meet {inc}); cut at a projection-unit boundary"
                    ),
                });
            }
        }
        let node = &mut g.layers[i];
        node.in_channels = inc;
        node.out_channels = out;
    }
    g.validate()?;
    Ok(ModelPlan {
        freeze: FreezePlan::all(g.len()),
        graph: g,
        head: Some(head),
        fresh_above: cutoff,
    })
}

/// Symmetric truncation of an encoder-decoder graph.
///
/// Keeps encoder layers `1..=cutoff`, drops every decoder block whose skip
/// tap lies at or above the cutoff, and rewires the first surviving decoder
/// block to consume the cutoff output. The head (everything after the last
/// decoder block) is always kept, so the output resolution is preserved;
/// mismatched skips surface as validation errors.
pub fn truncate_encoder_decoder(graph: &LayerGraph, cutoff: usize) -> Result<LayerGraph> {
    graph.validate()?;
    let first_up = graph
        .layers
        .iter()
        .position(|n| n.kind == LayerKind::Upsample)
        .ok_or_else(|| Error::NotEncoderDecoder {
            reason: "graph has no upsampling layers".into(),
        })?
        + 1;
    let enc_end = first_up - 1;
    if cutoff > enc_end {
        return Err(Error::NotEncoderDecoder {
            reason: format!("cutoff {cutoff} lies beyond the encoder (ends at {enc_end})"),
        });
    }
    if !graph.is_valid_cutoff(cutoff) {
        // Surfaces the same span or bounds error a plain truncation would.
        graph.truncate(cutoff)?;
    }

    // Decoder blocks are the block segments after the encoder; trailing
    // segments without an upsample form the head.
    let mut keep = vec![false; graph.len() + 1];
    for k in 1..=cutoff {
        keep[k] = true;
    }
    let mut seg_start = enc_end + 1;
    for &seg_end in graph.blocks.iter().filter(|&&b| b > enc_end) {
        let seg = &graph.layers[seg_start - 1..seg_end];
        let has_up = seg.iter().any(|n| n.kind == LayerKind::Upsample);
        let skip = seg.iter().find_map(|n| n.skip_from);
        let kept = !has_up || match skip {
            Some(src) => src < cutoff,
            None => true,
        };
        if kept {
            for k in seg_start..=seg_end {
                keep[k] = true;
            }
        }
        seg_start = seg_end + 1;
    }

    let mut remap = vec![0usize; graph.len() + 1];
    let mut layers = Vec::new();
    for (i, node) in graph.layers.iter().enumerate() {
        let old = i + 1;
        if !keep[old] {
            continue;
        }
        let mut n = node.clone();
        for link in [&mut n.skip_from, &mut n.input_from, &mut n.add_from] {
            if let Some(src) = *link {
                if !keep[src] {
                    return Err(Error::NotEncoderDecoder {
                        reason: format!(
                            "layer `{}` references dropped layer {src}",
                            node.name
                        ),
                    });
                }
                *link = Some(remap[src]);
            }
        }
        layers.push(n);
        remap[old] = layers.len();
    }

    let blocks: Vec<usize> = {
        let mut b: Vec<usize> = graph
            .blocks
            .iter()
            .filter(|&&end| keep[end] && remap[end] > 0)
            .map(|&end| remap[end])
            .collect();
        if !b.iter().any(|&x| x == remap[cutoff]) {
            b.push(remap[cutoff]);
            b.sort_unstable();
        }
        if b.last() != Some(&layers.len()) {
            b.push(layers.len());
        }
        b
    };
    let spans = graph
        .spans
        .iter()
        .filter(|&&(s, e)| keep[s] && keep[e])
        .map(|&(s, e)| (remap[s], remap[e]))
        .collect();

    let mut g = LayerGraph {
        name: format!("{}@{cutoff}", graph.name),
        input: graph.input,
        layers,
        spans,
        blocks,
    };
    fix_chain_channels(&mut g)?;
    g.validate()?;
    g.infer_spatial()?;
    Ok(g)
}

/// Recompute channel bookkeeping along the chain after structural edits.
/// Parameter-free layers follow their input width; weighted layers keep
/// their declared output width.
fn fix_chain_channels(g: &mut LayerGraph) -> Result<()> {
    let mut carry = g.input.0;
    for i in 0..g.layers.len() {
        let chain_in = match g.layers[i].input_from {
            Some(src) => g.layers[src - 1].out_channels,
            None => carry,
        };
        let mut inc = chain_in;
        if g.layers[i].kind == LayerKind::Concat {
            inc += g.layers[g.layers[i].skip_from.unwrap() - 1].out_channels;
        }
        let node = &mut g.layers[i];
        node.in_channels = inc;
        if !weighted(node.kind) {
            node.out_channels = inc;
        }
        carry = node.out_channels;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::zoo;

    fn head2() -> HeadSpec {
        HeadSpec::linear(2)
    }

    #[test]
    fn ftl_keeps_everything_trainable() {
        let g = zoo::resnet50((3, 224, 224)).unwrap();
        let plan = build_ftl(&g, head2()).unwrap();
        assert_eq!(plan.graph.len(), 156);
        assert_eq!(plan.freeze.frozen_layers(), 0);
        assert_eq!(plan.params().unwrap(), 23_512_130);
        assert_eq!(plan.fresh_above, 156);
    }

    #[test]
    fn ttl_truncates_and_counts() {
        let g = zoo::resnet50((3, 224, 224)).unwrap();
        let plan = build_ttl(&g, 127, head2()).unwrap();
        assert_eq!(plan.graph.len(), 127);
        assert_eq!(plan.params().unwrap(), 8_545_346);
        assert_eq!(plan.freeze.frozen_layers(), 0);
        assert!(build_ttl(&g, 30, head2()).is_err());
    }

    #[test]
    fn tf_halves_above_the_cutoff() {
        let g = zoo::resnet50((3, 224, 224)).unwrap();
        let plan = build_tf(&g, 127, head2()).unwrap();
        assert_eq!(plan.graph.len(), 156);
        assert_eq!(plan.params().unwrap(), 12_947_522);
        let macs = plan.macs().unwrap();
        let expect = 3.56e9;
        assert!(
            (macs as f64 - expect).abs() <= 0.02 * expect,
            "tf MACs {macs}"
        );
        assert_eq!(plan.fresh_above, 127);
        assert_eq!(plan.graph.layers.last().unwrap().out_channels, 1024);
    }

    #[test]
    fn tf_boundary_semantics_on_a_plain_chain() {
        let mut b = GraphBuilder::new("toy", (3, 8, 8));
        b.conv("a", 8, 3, 1, 1, false);
        b.conv("b", 16, 3, 1, 1, false);
        b.conv("c", 16, 3, 1, 1, false);
        let g = b.build().unwrap();
        let plan = build_tf(&g, 1, head2()).unwrap();
        let l = &plan.graph.layers;
        assert_eq!((l[0].in_channels, l[0].out_channels), (3, 8));
        assert_eq!((l[1].in_channels, l[1].out_channels), (8, 8));
        assert_eq!((l[2].in_channels, l[2].out_channels), (8, 8));
    }

    #[test]
    fn tf_at_full_depth_changes_nothing() {
        let g = zoo::resnet50((3, 224, 224)).unwrap();
        let plan = build_tf(&g, g.len(), head2()).unwrap();
        for (a, b) in plan.graph.layers.iter().zip(&g.layers) {
            assert_eq!(a.in_channels, b.in_channels);
            assert_eq!(a.out_channels, b.out_channels);
        }
    }

    #[test]
    fn tf_rejects_identity_join_boundaries() {
        // In ResNet-34 the unit after the stem has an identity skip, so the
        // halved unit cannot rejoin the unhalved stem output.
        let g = zoo::resnet34((3, 224, 224)).unwrap();
        let err = build_tf(&g, 4, head2()).unwrap_err();
        assert!(err.to_string().contains("residual join"), "{err}");
    }

    #[test]
    fn tf_rejects_unsplittable_groups() {
        let mut b = GraphBuilder::new("grouped", (3, 8, 8));
        b.conv("a", 6, 3, 1, 1, false);
        b.grouped_conv("b", 9, 3, 1, 0, 3, false);
        let g = b.build().unwrap();
        match build_tf(&g, 1, head2()) {
            Err(Error::UnsplittableGroups { layer, .. }) => assert_eq!(layer, "b"),
            other => panic!("expected UnsplittableGroups, got {other:?}"),
        }
    }

    #[test]
    fn lwft_groups_count_units_as_single_layers() {
        let g = zoo::resnet50((3, 224, 224)).unwrap();
        let groups = lwft_groups(&g);
        // Stem span plus 16 bottleneck units.
        assert_eq!(groups.len(), 17);
        let g = zoo::micro((1, 32, 32), &zoo::MICRO_WIDTHS).unwrap();
        assert_eq!(lwft_groups(&g).len(), 5);
    }

    #[test]
    fn lwft_scales_follow_the_tenth_rule() {
        let g = zoo::micro((1, 32, 32), &zoo::MICRO_WIDTHS).unwrap();
        let plan = build_lwft(&g, 1, head2()).unwrap();
        assert_eq!(plan.freeze.head_scale, 1.0);
        assert_eq!(plan.freeze.frozen_layers(), g.len());

        let plan = build_lwft(&g, 3, head2()).unwrap();
        // Top two units train at a tenth of the base rate.
        let groups = lwft_groups(&g);
        let (s4, e4) = groups[4];
        let (s3, e3) = groups[3];
        for i in s3..=e3 {
            assert_eq!(plan.freeze.layer_scale[i - 1], 0.1);
        }
        for i in s4..=e4 {
            assert_eq!(plan.freeze.layer_scale[i - 1], 0.1);
        }
        assert_eq!(plan.freeze.frozen_layers(), g.len() - (e4 - s4 + 1) - (e3 - s3 + 1));

        assert!(build_lwft(&g, 7, head2()).is_err());
        assert!(build_lwft(&g, 0, head2()).is_err());
    }

    #[test]
    fn unet_truncation_mirrors_blocks() {
        let g = zoo::resnet34_unet((3, 224, 224), 1).unwrap();
        // Keep two encoder stages: cutoff at the end of layer2.
        let t = truncate_encoder_decoder(&g, 48).unwrap();
        assert_eq!(t.count_params(t.len(), None).unwrap(), 1_548_945);
        assert_eq!(t.layers.last().unwrap().spatial, Some((224, 224)));

        // One encoder stage.
        let t = truncate_encoder_decoder(&g, 22).unwrap();
        assert_eq!(t.layers.last().unwrap().spatial, Some((224, 224)));

        // Three encoder stages.
        let t = truncate_encoder_decoder(&g, 86).unwrap();
        assert_eq!(t.layers.last().unwrap().spatial, Some((224, 224)));
        assert!(t.count_params(t.len(), None).unwrap() < 24_436_369);
    }

    #[test]
    fn unet_truncation_rejects_bad_cutoffs() {
        let g = zoo::resnet34_unet((3, 224, 224), 1).unwrap();
        assert!(truncate_encoder_decoder(&g, 23).is_err());
        assert!(truncate_encoder_decoder(&g, 120).is_err());
        let plain = zoo::resnet34((3, 224, 224)).unwrap();
        assert!(matches!(
            truncate_encoder_decoder(&plain, 22),
            Err(Error::NotEncoderDecoder { .. })
        ));
    }

    #[test]
    fn strategy_config_dispatch() {
        let g = zoo::micro((1, 32, 32), &zoo::MICRO_WIDTHS).unwrap();
        let cfg = StrategyConfig {
            strategy: Strategy::Ttl,
            cutoff: Some(9),
            unfreeze: None,
            head: head2(),
        };
        assert_eq!(cfg.build(&g).unwrap().graph.len(), 9);
        let cfg = StrategyConfig {
            strategy: Strategy::Ttl,
            cutoff: None,
            unfreeze: None,
            head: head2(),
        };
        assert!(cfg.build(&g).is_err());
    }
}
