//! Stock backbone graphs: ResNet-18/34/50, a small trainable residual
//! backbone for synthetic experiments, and a ResNet-34 U-Net for
//! encoder-decoder surgery.
//!
//! ResNets follow the torchvision layout: a 7x7/2 stem with 3x3/2 max
//! pooling, then four stages of residual units. The stride-2 conv of
//! bottleneck units sits on the 3x3. The stem and every residual unit are
//! atomic spans, so ResNet-34 and ResNet-50 both expose 17 truncation
//! points and ResNet-18 exposes 9. Classifier heads are not part of the
//! graphs; attach one via [`HeadSpec`](crate::graph::HeadSpec).

use crate::error::Result;
use crate::graph::{GraphBuilder, LayerGraph};

fn basic_unit(b: &mut GraphBuilder, prefix: &str, out: usize, stride: usize, proj: bool) {
    let entry = b.here();
    b.begin_span();
    b.conv(&format!("{prefix}.conv1"), out, 3, stride, 1, false);
    b.norm(&format!("{prefix}.bn1"));
    b.act(&format!("{prefix}.relu1"));
    b.conv(&format!("{prefix}.conv2"), out, 3, 1, 1, false);
    b.norm(&format!("{prefix}.bn2"));
    if proj {
        let main = b.here();
        b.conv_from(&format!("{prefix}.proj"), entry, out, 1, stride, 0, false);
        b.norm(&format!("{prefix}.proj_bn"));
        b.act_add(&format!("{prefix}.relu2"), main);
    } else {
        b.act_add(&format!("{prefix}.relu2"), entry);
    }
    b.end_span();
}

fn bottleneck_unit(b: &mut GraphBuilder, prefix: &str, mid: usize, out: usize, stride: usize, proj: bool) {
    let entry = b.here();
    b.begin_span();
    b.conv(&format!("{prefix}.conv1"), mid, 1, 1, 0, false);
    b.norm(&format!("{prefix}.bn1"));
    b.act(&format!("{prefix}.relu1"));
    b.conv(&format!("{prefix}.conv2"), mid, 3, stride, 1, false);
    b.norm(&format!("{prefix}.bn2"));
    b.act(&format!("{prefix}.relu2"));
    b.conv(&format!("{prefix}.conv3"), out, 1, 1, 0, false);
    b.norm(&format!("{prefix}.bn3"));
    if proj {
        let main = b.here();
        b.conv_from(&format!("{prefix}.proj"), entry, out, 1, stride, 0, false);
        b.norm(&format!("{prefix}.proj_bn"));
        b.act_add(&format!("{prefix}.relu3"), main);
    } else {
        b.act_add(&format!("{prefix}.relu3"), entry);
    }
    b.end_span();
}

fn stem(b: &mut GraphBuilder, width: usize) {
    b.begin_span();
    b.conv("conv1", width, 7, 2, 3, false);
    b.norm("bn1");
    b.act("relu");
    b.pool("maxpool", 3, 2, 1);
    b.end_span();
}

fn resnet_basic(name: &str, input: (usize, usize, usize), units: [usize; 4]) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new(name, input);
    stem(&mut b, 64);
    let widths = [64usize, 128, 256, 512];
    for (stage, (&n, &w)) in units.iter().zip(&widths).enumerate() {
        for u in 0..n {
            let stride = if stage > 0 && u == 0 { 2 } else { 1 };
            let proj = u == 0 && stage > 0;
            basic_unit(&mut b, &format!("layer{}.{}", stage + 1, u), w, stride, proj);
        }
        b.end_block();
    }
    b.build()
}

/// ResNet-18 feature extractor (9 truncation points).
pub fn resnet18(input: (usize, usize, usize)) -> Result<LayerGraph> {
    resnet_basic("resnet18", input, [2, 2, 2, 2])
}

/// ResNet-34 feature extractor (17 truncation points).
pub fn resnet34(input: (usize, usize, usize)) -> Result<LayerGraph> {
    resnet_basic("resnet34", input, [3, 4, 6, 3])
}

/// ResNet-50 feature extractor (17 truncation points).
pub fn resnet50(input: (usize, usize, usize)) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new("resnet50", input);
    stem(&mut b, 64);
    let stages: [(usize, usize, usize); 4] =
        [(3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048)];
    for (stage, &(n, mid, out)) in stages.iter().enumerate() {
        for u in 0..n {
            let stride = if stage > 0 && u == 0 { 2 } else { 1 };
            // The first unit of every stage projects: stage 1 widens
            // channels, later stages also stride.
            let proj = u == 0;
            bottleneck_unit(&mut b, &format!("layer{}.{}", stage + 1, u), mid, out, stride, proj);
        }
        b.end_block();
    }
    b.build()
}

/// Small residual backbone that trains in seconds on one core.
///
/// One 3x3 stem conv, then one basic unit per stage at the given widths with
/// stride 2 between stages. Five truncation points: the stem and each unit.
pub fn micro(input: (usize, usize, usize), widths: &[usize; 4]) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new("micro", input);
    b.begin_span();
    b.conv("conv1", widths[0], 3, 1, 1, false);
    b.norm("bn1");
    b.act("relu");
    b.end_span();
    for (stage, &w) in widths.iter().enumerate() {
        let stride = if stage > 0 { 2 } else { 1 };
        let proj = stage > 0;
        basic_unit(&mut b, &format!("layer{}.0", stage + 1), w, stride, proj);
        b.end_block();
    }
    b.build()
}

/// Default widths for [`micro`], sized to stay well under a million params.
pub const MICRO_WIDTHS: [usize; 4] = [8, 16, 32, 64];

fn decoder_block(
    b: &mut GraphBuilder,
    prefix: &str,
    skip: Option<usize>,
    out: usize,
) {
    b.upsample(&format!("{prefix}.up"), 2);
    if let Some(src) = skip {
        b.concat(&format!("{prefix}.cat"), src);
    }
    b.conv(&format!("{prefix}.conv1"), out, 3, 1, 1, false);
    b.norm(&format!("{prefix}.bn1"));
    b.act(&format!("{prefix}.relu1"));
    b.conv(&format!("{prefix}.conv2"), out, 3, 1, 1, false);
    b.norm(&format!("{prefix}.bn2"));
    b.act(&format!("{prefix}.relu2"));
}

/// U-Net with a ResNet-34 encoder and a five-block decoder.
///
/// Skip taps sit at the stem activation and the first three stage outputs;
/// decoder widths are 256/128/64/32/16 and the head is a 3x3 conv to
/// `classes` channels at full input resolution. Encoder blocks and their
/// mirror decoder blocks share block ordinals so symmetric truncation can
/// pair them up.
pub fn resnet34_unet(input: (usize, usize, usize), classes: usize) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new("resnet34-unet", input);
    stem(&mut b, 64);
    let taps_stem = 3; // relu after bn1, before max pooling
    let widths = [64usize, 128, 256, 512];
    let units = [3usize, 4, 6, 3];
    let mut taps = Vec::new();
    for (stage, (&n, &w)) in units.iter().zip(&widths).enumerate() {
        for u in 0..n {
            let stride = if stage > 0 && u == 0 { 2 } else { 1 };
            let proj = u == 0 && stage > 0;
            basic_unit(&mut b, &format!("layer{}.{}", stage + 1, u), w, stride, proj);
        }
        taps.push(b.here());
        b.end_block();
    }
    let dec_widths = [256usize, 128, 64, 32, 16];
    let skips = [Some(taps[2]), Some(taps[1]), Some(taps[0]), Some(taps_stem), None];
    for (i, (&w, &skip)) in dec_widths.iter().zip(&skips).enumerate() {
        decoder_block(&mut b, &format!("decoder{}", i + 1), skip, w);
        b.end_block();
    }
    b.conv("head", classes, 3, 1, 1, true);
    b.build()
}

/// Tiny U-Net over the [`micro`] encoder, for fast encoder-decoder tests.
pub fn micro_unet(input: (usize, usize, usize), widths: &[usize; 4], classes: usize) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new("micro-unet", input);
    b.begin_span();
    b.conv("conv1", widths[0], 3, 1, 1, false);
    b.norm("bn1");
    b.act("relu");
    b.end_span();
    let mut taps = Vec::new();
    for (stage, &w) in widths.iter().enumerate() {
        let stride = if stage > 0 { 2 } else { 1 };
        basic_unit(&mut b, &format!("layer{}.0", stage + 1), w, stride, stage > 0);
        taps.push(b.here());
        b.end_block();
    }
    let dec_widths = [widths[2], widths[1], widths[0]];
    let skips = [Some(taps[2]), Some(taps[1]), Some(taps[0])];
    for (i, (&w, &skip)) in dec_widths.iter().zip(&skips).enumerate() {
        decoder_block(&mut b, &format!("decoder{}", i + 1), skip, w);
        b.end_block();
    }
    b.conv("head", classes, 3, 1, 1, true);
    b.build()
}

/// Look up a builder by name for config files and the CLI.
pub fn by_name(name: &str, input: (usize, usize, usize)) -> Result<LayerGraph> {
    match name {
        "resnet18" => resnet18(input),
        "resnet34" => resnet34(input),
        "resnet50" => resnet50(input),
        "micro" => micro(input, &MICRO_WIDTHS),
        "resnet34-unet" => resnet34_unet(input, 1),
        "micro-unet" => micro_unet(input, &MICRO_WIDTHS, 1),
        other => Err(crate::error::Error::Config(format!(
            "unknown backbone `{other}`; expected one of resnet18, resnet34, resnet50, micro, resnet34-unet, micro-unet"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::HeadSpec;

    fn close(actual: u64, expected: f64, tol: f64) -> bool {
        (actual as f64 - expected).abs() <= tol * expected
    }

    #[test]
    fn resnet50_has_17_truncation_points() {
        let g = resnet50((3, 224, 224)).unwrap();
        assert_eq!(g.len(), 156);
        let pts = g.enumerate_truncation_points();
        assert_eq!(pts.len(), 17);
        assert_eq!(pts[0].index, 4);
        assert_eq!(g.blocks, vec![33, 71, 127, 156]);
    }

    #[test]
    fn resnet34_and_18_point_counts() {
        let g = resnet34((3, 224, 224)).unwrap();
        assert_eq!(g.len(), 106);
        assert_eq!(g.enumerate_truncation_points().len(), 17);
        let g = resnet18((3, 224, 224)).unwrap();
        assert_eq!(g.enumerate_truncation_points().len(), 9);
    }

    #[test]
    fn resnet_backbone_params_match_reference() {
        let g = resnet50((3, 224, 224)).unwrap();
        assert_eq!(g.count_params(g.len(), None).unwrap(), 23_508_032);
        let g = resnet34((3, 224, 224)).unwrap();
        assert_eq!(g.count_params(g.len(), None).unwrap(), 21_284_672);
        let g = resnet18((3, 224, 224)).unwrap();
        assert_eq!(g.count_params(g.len(), None).unwrap(), 11_176_512);
    }

    #[test]
    fn resnet50_binary_classifier_complexity() {
        let g = resnet50((3, 224, 224)).unwrap();
        let head = HeadSpec::linear(2);
        assert_eq!(g.count_params(g.len(), Some(&head)).unwrap(), 23_512_130);
        let macs = g.count_macs(g.len(), Some(&head)).unwrap();
        assert!(close(macs, 4.12e9, 0.02), "full-model MACs {macs}");
        // Truncated at the third block boundary.
        assert_eq!(g.count_params(127, Some(&head)).unwrap(), 8_545_346);
        let macs = g.count_macs(127, Some(&head)).unwrap();
        assert!(close(macs, 3.31e9, 0.02), "block-3 MACs {macs}");
    }

    #[test]
    fn micro_is_small_and_has_five_points() {
        let g = micro((1, 32, 32), &MICRO_WIDTHS).unwrap();
        let pts = g.enumerate_truncation_points();
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[0].index, 3);
        let params = g.count_params(g.len(), Some(&HeadSpec::linear(2))).unwrap();
        assert!(params < 1_000_000, "micro backbone has {params} params");
    }

    #[test]
    fn unet_matches_reference_complexity() {
        let g = resnet34_unet((3, 224, 224), 1).unwrap();
        assert_eq!(g.count_params(g.len(), None).unwrap(), 24_436_369);
        let macs = g.count_macs(g.len(), None).unwrap();
        assert!(close(macs, 5.93e9, 0.03), "unet MACs {macs}");
        // Segmentation output keeps the input resolution.
        assert_eq!(g.layers.last().unwrap().spatial, Some((224, 224)));
    }

    #[test]
    fn micro_unet_builds_and_keeps_resolution() {
        let g = micro_unet((1, 32, 32), &MICRO_WIDTHS, 1).unwrap();
        assert_eq!(g.layers.last().unwrap().spatial, Some((32, 32)));
        g.validate().unwrap();
    }
}
