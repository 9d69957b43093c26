//! Network building blocks: ResNet-style residual units, the interleaved
//! up-sampling block of the FCRN decoder, and the input transforms (Sobel
//! edges, semantic masking, semantic edges).

use crate::core::{ImageTensor, SemanticLabelMap};
use crate::nn::{
    init_batch_norm, init_he_conv, BnParams, ConvGeometry, Graph, NodeId, ParamId, ParamSet,
};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlocksError {
    #[error("skip residual unit requires in == out channels and stride 1, got {in_channels}→{out_channels} stride {stride}")]
    InvalidSkip { in_channels: usize, out_channels: usize, stride: usize },
    #[error("channel count must be positive")]
    ZeroChannels,
    #[error("dimension mismatch: {context}: {a} vs {b}")]
    DimMismatch { context: &'static str, a: String, b: String },
    #[error("class index {index} out of range for {channels} channels")]
    ClassOutOfRange { index: usize, channels: usize },
}

/// Spatial/channel shape of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TensorSpec {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "TensorSpec must be positive");
        Self { height, width, channels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    /// Identity shortcut; preserves the data stream.
    Skip,
    /// Convolutional shortcut; may change channels and stride the stream.
    Projection,
}

/// Bottleneck residual unit: 1×1 (stride) → 3×3 → 1×1 expansion, batch norm
/// after every convolution, additive shortcut, ReLU at the output.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub kind: ResidualKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    conv1: ParamId,
    bn1: BnParams,
    conv2: ParamId,
    bn2: BnParams,
    conv3: ParamId,
    bn3: BnParams,
    shortcut: Option<(ParamId, BnParams)>,
}

impl ResidualUnit {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        kind: ResidualKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Result<Self, BlocksError> {
        if in_channels == 0 || out_channels == 0 {
            return Err(BlocksError::ZeroChannels);
        }
        if kind == ResidualKind::Skip && (in_channels != out_channels || stride != 1) {
            return Err(BlocksError::InvalidSkip { in_channels, out_channels, stride });
        }
        let mid = (out_channels / 4).max(1);
        let conv1 = init_he_conv(params, rng, &format!("{name}.conv1"), mid, in_channels, (1, 1));
        let bn1 = init_batch_norm(params, &format!("{name}.bn1"), mid);
        let conv2 = init_he_conv(params, rng, &format!("{name}.conv2"), mid, mid, (3, 3));
        let bn2 = init_batch_norm(params, &format!("{name}.bn2"), mid);
        let conv3 = init_he_conv(params, rng, &format!("{name}.conv3"), out_channels, mid, (1, 1));
        let bn3 = init_batch_norm(params, &format!("{name}.bn3"), out_channels);
        let shortcut = match kind {
            ResidualKind::Skip => None,
            ResidualKind::Projection => {
                let w = init_he_conv(
                    params,
                    rng,
                    &format!("{name}.shortcut"),
                    out_channels,
                    in_channels,
                    (1, 1),
                );
                let bn = init_batch_norm(params, &format!("{name}.shortcut_bn"), out_channels);
                Some((w, bn))
            }
        };
        Ok(Self { kind, in_channels, out_channels, stride, conv1, bn1, conv2, bn2, conv3, bn3, shortcut })
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let geo1 = ConvGeometry {
            kernel: (1, 1),
            stride: (self.stride, self.stride),
            pad: (0, 0, 0, 0),
        };
        let h = g.conv2d(x, self.conv1, None, geo1);
        let h = g.batch_norm(h, self.bn1);
        let h = g.relu(h);
        let h = g.conv2d(h, self.conv2, None, ConvGeometry::same((3, 3)));
        let h = g.batch_norm(h, self.bn2);
        let h = g.relu(h);
        let h = g.conv2d(h, self.conv3, None, ConvGeometry::strided(1, 1));
        let main = g.batch_norm(h, self.bn3);
        let short = match self.shortcut {
            None => x,
            Some((w, bn)) => {
                let s = g.conv2d(x, w, None, geo1);
                g.batch_norm(s, bn)
            }
        };
        let sum = g.add(main, short);
        g.relu(sum)
    }

    pub fn out_spec(&self, input: TensorSpec) -> TensorSpec {
        TensorSpec::new(
            input.height.div_ceil(self.stride),
            input.width.div_ceil(self.stride),
            self.out_channels,
        )
    }
}

/// Kernel sizes of the four interleaved convolutions, matched to their
/// sub-pixel offsets (0,0), (0,1), (1,0), (1,1).
const INTERLEAVE_KERNELS: [(usize, usize); 4] = [(3, 3), (3, 2), (2, 3), (2, 2)];

/// Up-sampling block: two branches of four interleaved convolutions (one
/// branch acting as the skip), doubling the spatial dimensions.
#[derive(Debug, Clone)]
pub struct UpSamplingBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    branch_a: [ParamId; 4],
    bn_a: BnParams,
    conv_a2: ParamId,
    bn_a2: BnParams,
    branch_b: [ParamId; 4],
    bn_b: BnParams,
}

impl UpSamplingBlock {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self, BlocksError> {
        if in_channels == 0 || out_channels == 0 {
            return Err(BlocksError::ZeroChannels);
        }
        let make_branch = |params: &mut ParamSet, rng: &mut ChaCha20Rng, tag: &str| {
            INTERLEAVE_KERNELS
                .iter()
                .enumerate()
                .map(|(i, kernel)| {
                    init_he_conv(
                        params,
                        rng,
                        &format!("{name}.{tag}{i}"),
                        out_channels,
                        in_channels,
                        *kernel,
                    )
                })
                .collect::<Vec<_>>()
                .try_into()
                .expect("exactly four kernels")
        };
        let branch_a = make_branch(params, rng, "a");
        let bn_a = init_batch_norm(params, &format!("{name}.bn_a"), out_channels);
        let conv_a2 =
            init_he_conv(params, rng, &format!("{name}.a_conv"), out_channels, out_channels, (3, 3));
        let bn_a2 = init_batch_norm(params, &format!("{name}.bn_a2"), out_channels);
        let branch_b = make_branch(params, rng, "b");
        let bn_b = init_batch_norm(params, &format!("{name}.bn_b"), out_channels);
        Ok(Self { in_channels, out_channels, branch_a, bn_a, conv_a2, bn_a2, branch_b, bn_b })
    }

    fn interleaved(&self, g: &mut Graph, x: NodeId, branch: &[ParamId; 4]) -> NodeId {
        let parts = [
            g.conv2d(x, branch[0], None, ConvGeometry::same(INTERLEAVE_KERNELS[0])),
            g.conv2d(x, branch[1], None, ConvGeometry::same(INTERLEAVE_KERNELS[1])),
            g.conv2d(x, branch[2], None, ConvGeometry::same(INTERLEAVE_KERNELS[2])),
            g.conv2d(x, branch[3], None, ConvGeometry::same(INTERLEAVE_KERNELS[3])),
        ];
        g.interleave2(parts)
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let a = self.interleaved(g, x, &self.branch_a);
        let a = g.batch_norm(a, self.bn_a);
        let a = g.relu(a);
        let a = g.conv2d(a, self.conv_a2, None, ConvGeometry::same((3, 3)));
        let a = g.batch_norm(a, self.bn_a2);
        let b = self.interleaved(g, x, &self.branch_b);
        let b = g.batch_norm(b, self.bn_b);
        let sum = g.add(a, b);
        g.relu(sum)
    }

    pub fn out_spec(&self, input: TensorSpec) -> TensorSpec {
        TensorSpec::new(input.height * 2, input.width * 2, self.out_channels)
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Per-channel Sobel gradient magnitude with replicate border padding,
/// summed over the three color channels. Nonnegative everywhere.
pub fn sobel_edges(img: &ImageTensor) -> Array2<f64> {
    let (h, w, _) = img.data.dim();
    let mut out = Array2::zeros((h, w));
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for (kr, row) in SOBEL_X.iter().enumerate() {
                    for (kc, &wx) in row.iter().enumerate() {
                        let rr = clamp(r as isize + kr as isize - 1, h);
                        let cc = clamp(c as isize + kc as isize - 1, w);
                        let v = img.data[[rr, cc, ch]];
                        gx += wx * v;
                        gy += SOBEL_Y[kr][kc] * v;
                    }
                }
                out[[r, c]] += (gx * gx + gy * gy).sqrt();
            }
        }
    }
    out
}

/// Keeps image pixels where the given class channel is active, zeroing the
/// rest.
pub fn semantic_mask(
    img: &ImageTensor,
    m: &SemanticLabelMap,
    class_index: usize,
) -> Result<ImageTensor, BlocksError> {
    if (img.height(), img.width()) != (m.height(), m.width()) {
        return Err(BlocksError::DimMismatch {
            context: "semantic_mask",
            a: format!("{}x{}", img.height(), img.width()),
            b: format!("{}x{}", m.height(), m.width()),
        });
    }
    if class_index >= m.channels() {
        return Err(BlocksError::ClassOutOfRange { index: class_index, channels: m.channels() });
    }
    let mut data = img.data.clone();
    for r in 0..img.height() {
        for c in 0..img.width() {
            let keep = m.data[[r, c, class_index]];
            for k in 0..3 {
                data[[r, c, k]] *= keep;
            }
        }
    }
    Ok(ImageTensor { data })
}

/// Multiplies each semantic channel by the edge map: channel `c` of the
/// output is `edges ⊙ m_c`.
pub fn semantic_edges(
    edges: &Array2<f64>,
    m: &SemanticLabelMap,
) -> Result<Array3<f64>, BlocksError> {
    if edges.dim() != (m.height(), m.width()) {
        return Err(BlocksError::DimMismatch {
            context: "semantic_edges",
            a: format!("{:?}", edges.dim()),
            b: format!("{}x{}", m.height(), m.width()),
        });
    }
    let (h, w, n) = m.data.dim();
    let mut out = Array3::zeros((h, w, n));
    for r in 0..h {
        for c in 0..w {
            let e = edges[[r, c]];
            if e != 0.0 {
                for k in 0..n {
                    out[[r, c, k]] = e * m.data[[r, c, k]];
                }
            }
        }
    }
    Ok(out)
}
