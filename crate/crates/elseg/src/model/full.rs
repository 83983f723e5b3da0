//! Full-scale segmentation network: a 50-layer bottleneck residual encoder at
//! output stride 16, atrous spatial pyramid pooling, and a decoder that fuses
//! stride-4 low-level features before upsampling to the input resolution.
//!
//! Channel normalization is carried as per-channel affine layers (the folded,
//! inference form), which is also the shape pretrained weight containers are
//! expected to provide. Training this network is a GPU-scale undertaking and
//! is outside the desk-scale test suite; the desk substrate is the tiny
//! model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, GraphBuilder};

/// Architecture identity recorded in checkpoints.
pub const ARCH_DESCRIPTOR: &str =
    "residual50-os16-aspp(1,6,12,18,pool)-decoder(lowlevel48)-foldednorm";

/// conv -> affine -> (optional relu)
fn conv_block(
    b: &mut GraphBuilder,
    input: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    relu: bool,
) -> usize {
    let c = b.conv(input, cin, cout, kernel, stride, pad, dilation);
    let a = b.affine(c, cout);
    if relu {
        b.relu(a)
    } else {
        a
    }
}

/// Standard bottleneck: 1x1 down, 3x3 (strided/dilated), 1x1 up, residual add.
fn bottleneck(
    b: &mut GraphBuilder,
    input: usize,
    cin: usize,
    cmid: usize,
    stride: usize,
    dilation: usize,
) -> usize {
    let cout = cmid * 4;
    let y = conv_block(b, input, cin, cmid, 1, 1, 0, 1, true);
    let y = conv_block(b, y, cmid, cmid, 3, stride, dilation, dilation, true);
    let y = conv_block(b, y, cmid, cout, 1, 1, 0, 1, false);
    let shortcut = if stride != 1 || cin != cout {
        conv_block(b, input, cin, cout, 1, stride, 0, 1, false)
    } else {
        input
    };
    let sum = b.add(y, shortcut);
    b.relu(sum)
}

fn stage(
    b: &mut GraphBuilder,
    mut x: usize,
    cin: usize,
    cmid: usize,
    blocks: usize,
    stride: usize,
    dilation: usize,
) -> usize {
    x = bottleneck(b, x, cin, cmid, stride, dilation);
    for _ in 1..blocks {
        x = bottleneck(b, x, cmid * 4, cmid, 1, dilation);
    }
    x
}

pub(crate) fn build(num_classes: usize, seed: u64) -> Graph {
    let mut b = GraphBuilder::new(ChaCha8Rng::seed_from_u64(seed));
    let x = b.input();

    // stem: stride 4
    let stem = conv_block(&mut b, x, 3, 64, 7, 2, 3, 1, true);
    let pooled = b.maxpool(stem, 3, 2, 1);

    // residual stages; the last keeps stride 16 via dilation 2
    let s1 = stage(&mut b, pooled, 64, 64, 3, 1, 1); // stride 4, 256 ch
    let s2 = stage(&mut b, s1, 256, 128, 4, 2, 1); // stride 8, 512 ch
    let s3 = stage(&mut b, s2, 512, 256, 6, 2, 1); // stride 16, 1024 ch
    let s4 = stage(&mut b, s3, 1024, 512, 3, 1, 2); // stride 16, 2048 ch

    // atrous spatial pyramid pooling
    let a0 = conv_block(&mut b, s4, 2048, 256, 1, 1, 0, 1, true);
    let a1 = conv_block(&mut b, s4, 2048, 256, 3, 1, 6, 6, true);
    let a2 = conv_block(&mut b, s4, 2048, 256, 3, 1, 12, 12, true);
    let a3 = conv_block(&mut b, s4, 2048, 256, 3, 1, 18, 18, true);
    let gp = b.global_pool(s4);
    let gp = conv_block(&mut b, gp, 2048, 256, 1, 1, 0, 1, true);
    let gp = b.upsample_to(gp, s4);
    let aspp = b.concat(vec![a0, a1, a2, a3, gp]);
    let aspp = conv_block(&mut b, aspp, 1280, 256, 1, 1, 0, 1, true);

    // decoder: fuse stride-4 low-level features
    let low = conv_block(&mut b, s1, 256, 48, 1, 1, 0, 1, true);
    let up = b.upsample_to(aspp, low);
    let fused = b.concat(vec![up, low]);
    let d = conv_block(&mut b, fused, 304, 256, 3, 1, 1, 1, true);
    let d = conv_block(&mut b, d, 256, 256, 3, 1, 1, 1, true);
    let head = b.conv(d, 256, num_classes, 1, 1, 0, 1);
    let out = b.upsample_to(head, x);

    b.finish(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn parameter_count_matches_a_50_layer_encoder() {
        let g = build(5, 0);
        let n = g.param_len();
        // ResNet50 alone is ~25.6M; ASPP + decoder add ~16M
        assert!(n > 30_000_000 && n < 60_000_000, "parameter count {n}");
    }

    #[test]
    fn logits_match_input_resolution_at_crop_size() {
        let g = build(5, 0);
        let x = Array4::<f64>::zeros((1, 3, 224, 224));
        let y = g.forward_eval(&x.view());
        assert_eq!(y.dim(), (1, 5, 224, 224));
        assert!(y.iter().all(|v| v.is_finite()));
    }
}
