//! The dense upscaled detector: a stem, four dense blocks joined by max
//! pooling, a top-down pathway of 2x upsampling summed with 1x1 lateral
//! projections, and four convolutional multibox heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::HeadOutput;
use crate::graph::{Graph, NodeId};
use crate::tensor::{dim_err, Mode, PoolKind, Result as TensorResult, Tensor, BN_EPS, BN_MOMENTUM};

pub const HEADS: usize = 4;
/// Stem stride 4, then three 2x pools.
pub const DEEPEST_STRIDE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid model configuration: {}", .violations.join("; "))]
pub struct ConfigError {
    pub violations: Vec<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DunetConfig {
    pub input_size: usize,
    pub stem_filters: usize,
    pub block_layers: Vec<usize>,
    pub growth_rate: usize,
    pub bottleneck_filters: usize,
    pub lateral_channels: usize,
    pub anchors_per_cell: usize,
    pub num_classes: usize,
    pub head_count: usize,
    /// When false, each head reads its own lateral projection with no
    /// upsampled context from deeper levels (ablation).
    #[serde(default = "default_true")]
    pub top_down: bool,
}

impl DunetConfig {
    /// Full-size network: 320 input, blocks of 5/7/7/7 layers, growth 32, 64-wide bottlenecks.
    pub fn paper(num_classes: usize) -> Self {
        Self {
            input_size: 320,
            stem_filters: 64,
            block_layers: vec![5, 7, 7, 7],
            growth_rate: 32,
            bottleneck_filters: 64,
            lateral_channels: 128,
            anchors_per_cell: 4,
            num_classes,
            head_count: HEADS,
            top_down: true,
        }
    }

    /// Scaled-down variant that trains on one CPU core.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            input_size: 64,
            stem_filters: 16,
            block_layers: vec![2, 3, 3, 3],
            growth_rate: 8,
            bottleneck_filters: 32,
            lateral_channels: 32,
            anchors_per_cell: 4,
            num_classes,
            head_count: HEADS,
            top_down: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        if self.input_size == 0 || self.input_size % DEEPEST_STRIDE != 0 {
            v.push(format!("input_size {} must be a positive multiple of {DEEPEST_STRIDE}", self.input_size));
        }
        if self.block_layers.len() != HEADS {
            v.push(format!("block_layers must have {HEADS} entries, got {}", self.block_layers.len()));
        }
        if self.block_layers.iter().any(|&l| l == 0) {
            v.push("every block_layers entry must be >= 1".into());
        }
        for (name, value) in [
            ("growth_rate", self.growth_rate),
            ("stem_filters", self.stem_filters),
            ("bottleneck_filters", self.bottleneck_filters),
            ("lateral_channels", self.lateral_channels),
            ("num_classes", self.num_classes),
        ] {
            if value == 0 {
                v.push(format!("{name} must be >= 1"));
            }
        }
        if !(1..=6).contains(&self.anchors_per_cell) {
            v.push(format!("anchors_per_cell must be in 1..=6, got {}", self.anchors_per_cell));
        }
        if self.head_count != HEADS {
            v.push(format!("head_count is fixed at {HEADS}, got {}", self.head_count));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations: v })
        }
    }

    /// Prediction grid side per head, finest first.
    pub fn grid_sizes(&self) -> Vec<usize> {
        (0..HEADS).map(|i| self.input_size / (4 << i)).collect()
    }

    pub fn total_anchors(&self) -> usize {
        self.grid_sizes().iter().map(|g| g * g * self.anchors_per_cell).sum()
    }

    /// Output channel count of each dense block.
    pub fn block_output_channels(&self) -> Vec<usize> {
        let mut c = self.stem_filters;
        self.block_layers
            .iter()
            .map(|&l| {
                c += l * self.growth_rate;
                c
            })
            .collect()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// He-uniform weights, zero bias. A conv feeding batch norm gets a fixed
    /// zero bias since the normalization cancels any learned one.
    fn conv(&mut self, graph: &mut Graph, name: &str, filters: usize, channels: usize, k: usize, learn_bias: bool) -> (NodeId, NodeId) {
        let fan_in = (channels * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[filters, channels, k, k], |_| rng.gen_range(-bound..bound));
        let bias_name = format!("{name}.bias");
        let bias = if learn_bias {
            graph.param(&bias_name, Tensor::zeros(&[filters]))
        } else {
            graph.buffer(&bias_name, Tensor::zeros(&[filters]))
        };
        (graph.param(&format!("{name}.weight"), w), bias)
    }
}

fn bn(graph: &mut Graph, name: &str, x: NodeId, channels: usize) -> NodeId {
    let scale = graph.param(&format!("{name}.scale"), Tensor::full(&[channels], 1.0));
    let shift = graph.param(&format!("{name}.shift"), Tensor::zeros(&[channels]));
    let mean = graph.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]));
    let var = graph.buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
    graph.batchnorm(x, scale, shift, mean, var, BN_EPS, BN_MOMENTUM)
}

/// BN -> ReLU -> conv. Every such conv output reaches a later batch norm.
fn bn_relu_conv(
    graph: &mut Graph,
    init: &mut Init,
    name: &str,
    x: NodeId,
    channels: usize,
    filters: usize,
    k: usize,
) -> NodeId {
    let n = bn(graph, &format!("{name}.bn"), x, channels);
    let r = graph.relu(n);
    let (w, b) = init.conv(graph, &format!("{name}.conv"), filters, channels, k, false);
    graph.conv2d(r, w, b, 1, k / 2)
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub output: NodeId,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Each layer is BN-ReLU-conv1x1(bottleneck)-BN-ReLU-conv3x3(growth) over the
/// channel concatenation of the block input and every earlier layer output.
#[allow(clippy::too_many_arguments)]
pub fn dense_block(
    graph: &mut Graph,
    rng: &mut ChaCha8Rng,
    name: &str,
    input: NodeId,
    in_channels: usize,
    layers: usize,
    growth: usize,
    bottleneck: usize,
) -> DenseBlock {
    let mut init = Init { rng: rng.clone() };
    let mut features = vec![input];
    let mut channels = in_channels;
    for l in 0..layers {
        let x = if features.len() == 1 { features[0] } else { graph.concat(&features) };
        let prefix = format!("{name}.layer{}", l + 1);
        let b = bn_relu_conv(graph, &mut init, &format!("{prefix}.reduce"), x, channels, bottleneck, 1);
        let y = bn_relu_conv(graph, &mut init, &format!("{prefix}.grow"), b, bottleneck, growth, 3);
        features.push(y);
        channels += growth;
    }
    *rng = init.rng;
    DenseBlock { output: graph.concat(&features), in_channels, out_channels: channels }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub scores: NodeId,
    pub offsets: NodeId,
    pub grid: usize,
}

/// A built network: the graph plus the handles needed to drive it.
#[derive(Clone, Debug)]
pub struct Dunet {
    pub cfg: DunetConfig,
    pub graph: Graph,
    pub image: NodeId,
    pub blocks: Vec<DenseBlock>,
    /// Pyramid maps fed to the heads, finest first.
    pub merged: Vec<NodeId>,
    pub heads: Vec<HeadNodes>,
}

pub fn build_dunet(cfg: &DunetConfig, seed: u64) -> Result<Dunet, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = Graph::new();
    let image = graph.input("image", false);

    let mut init = Init { rng: rng.clone() };
    let x = bn(&mut graph, "stem.bn_in", image, 3);
    let (w, b) = init.conv(&mut graph, "stem.conv", cfg.stem_filters, 3, 3, false);
    let x = graph.conv2d(x, w, b, 2, 1);
    let x = bn(&mut graph, "stem.bn", x, cfg.stem_filters);
    let x = graph.relu(x);
    let mut x = graph.pool(x, PoolKind::Avg, 2, 2);
    rng = init.rng;

    let mut blocks = Vec::with_capacity(HEADS);
    let mut channels = cfg.stem_filters;
    for (i, &layers) in cfg.block_layers.iter().enumerate() {
        if i > 0 {
            x = graph.pool(x, PoolKind::Max, 2, 2);
        }
        let block = dense_block(
            &mut graph,
            &mut rng,
            &format!("block{}", i + 1),
            x,
            channels,
            layers,
            cfg.growth_rate,
            cfg.bottleneck_filters,
        );
        channels = block.out_channels;
        x = block.output;
        blocks.push(block);
    }

    let mut init = Init { rng };
    let lat = cfg.lateral_channels;
    // Without the top-down pathway the heads read the dense-block outputs.
    let (merged, widths): (Vec<NodeId>, Vec<usize>) = if cfg.top_down {
        let laterals: Vec<NodeId> = blocks
            .iter()
            .enumerate()
            .map(|(i, blk)| {
                bn_relu_conv(&mut graph, &mut init, &format!("lateral{}", i + 1), blk.output, blk.out_channels, lat, 1)
            })
            .collect();
        let mut merged = vec![laterals[HEADS - 1]; HEADS];
        for i in (0..HEADS - 1).rev() {
            let up = graph.upsample2(merged[i + 1]);
            merged[i] = graph.add(laterals[i], up);
        }
        (merged, vec![lat; HEADS])
    } else {
        blocks.iter().map(|b| (b.output, b.out_channels)).unzip()
    };

    let depth = cfg.num_classes + 1;
    let a = cfg.anchors_per_cell;
    let grids = cfg.grid_sizes();
    let heads = merged
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let name = format!("head{}", i + 1);
            let lat = widths[i];
            let n = bn(&mut graph, &format!("{name}.bn"), m, lat);
            let r = graph.relu(n);
            let (cw, cb) = init.conv(&mut graph, &format!("{name}.cls"), a * depth, lat, 3, true);
            let (bw, bb) = init.conv(&mut graph, &format!("{name}.box"), a * 4, lat, 3, true);
            HeadNodes { scores: graph.conv2d(r, cw, cb, 1, 1), offsets: graph.conv2d(r, bw, bb, 1, 1), grid: grids[i] }
        })
        .collect();

    Ok(Dunet { cfg: cfg.clone(), graph, image, blocks, merged, heads })
}

impl Dunet {
    pub fn head_nodes(&self) -> Vec<NodeId> {
        self.heads.iter().flat_map(|h| [h.scores, h.offsets]).collect()
    }

    pub fn count_parameters(&self) -> usize {
        self.graph.count_parameters()
    }

    fn check_batch(&self, images: &Tensor) -> TensorResult<()> {
        let (_, c, h, w) = images.dims4("forward")?;
        let s = self.cfg.input_size;
        if (c, h, w) != (3, s, s) {
            return dim_err("forward", format!("expected [N,3,{s},{s}] image batch, got {:?}", images.shape()));
        }
        Ok(())
    }

    /// Runs the network on one image and returns the per-head raw outputs.
    pub fn forward_detect(&mut self, image: &Tensor, mode: Mode) -> TensorResult<Vec<HeadOutput>> {
        self.check_batch(image)?;
        if image.shape()[0] != 1 {
            return dim_err("forward_detect", "expects a single image (axis 0 == 1)");
        }
        self.graph.set_input(self.image, image.clone())?;
        let outs = self.head_nodes();
        self.graph.forward(&outs, mode)?;
        Ok(self
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| HeadOutput {
                head: i,
                scores: self.graph.value(h.scores).expect("evaluated").clone(),
                offsets: self.graph.value(h.offsets).expect("evaluated").clone(),
            })
            .collect())
    }

    /// Sets the image batch input without evaluating anything.
    pub fn set_images(&mut self, images: Tensor) -> TensorResult<()> {
        self.check_batch(&images)?;
        self.graph.set_input(self.image, images)
    }
}

/// Converts 8-bit RGB pixels (row-major HWC) into a `[1, 3, H, W]` tensor in `[-1, 1]`.
pub fn image_tensor(rgb: &[u8], width: usize, height: usize) -> Tensor {
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![1, 3, height, width], data).expect("rgb buffer size")
}
