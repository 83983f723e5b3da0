//! Tiny encoder-decoder for desk-scale CPU training.
//!
//! Three stride-2 conv blocks (widths 16/32/64), one extra 3x3 block at the
//! bottleneck, then a bilinear decoder with a single skip connection from the
//! first block. Roughly 80k parameters; trains on 64x64 crops in seconds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, GraphBuilder};

pub(crate) fn build(num_classes: usize, seed: u64) -> Graph {
    let mut b = GraphBuilder::new(ChaCha8Rng::seed_from_u64(seed));
    let x = b.input();

    let c1 = b.conv(x, 3, 16, 3, 2, 1, 1);
    let a1 = b.relu(c1); // stride 2, 16 channels
    let c2 = b.conv(a1, 16, 32, 3, 2, 1, 1);
    let a2 = b.relu(c2); // stride 4
    let c3 = b.conv(a2, 32, 64, 3, 2, 1, 1);
    let a3 = b.relu(c3); // stride 8
    let c4 = b.conv(a3, 64, 64, 3, 1, 1, 1);
    let a4 = b.relu(c4);

    let up1 = b.upsample_to(a4, a1);
    let cat = b.concat(vec![up1, a1]); // 64 + 16 channels
    let c5 = b.conv(cat, 80, 24, 3, 1, 1, 1);
    let d1 = b.relu(c5);
    let up2 = b.upsample_to(d1, x);
    let head = b.conv(up2, 24, num_classes, 3, 1, 1, 1);

    b.finish(head)
}
