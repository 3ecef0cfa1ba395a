//! Network building blocks: residual stages, strided down-pooling, transposed
//! up-sampling with skip concatenation, deep-supervision heads and the
//! convolutional cross-attention that fuses a prior stream into a primary one.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamKind, ParamStore};
use crate::tensor::{Graph, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
pub const ATTENTION_REDUCTION: usize = 4;
pub const SPATIAL_GATE_KERNEL: usize = 7;
pub const NUM_CLASSES: usize = 3;

/// Channel widths and pooling of one resolution stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels_in: usize,
    pub channels_out: usize,
    /// Per-axis (z, y, x) stride of the down-pool that follows; each 1 or 2.
    pub pool: [usize; 3],
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::Config(format!("stage channels must be positive: {self:?}")));
        }
        if self.pool.iter().any(|&p| p != 1 && p != 2) {
            return Err(Error::Config(format!(
                "pool strides must be 1 or 2, got {:?}",
                self.pool
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossAttentionSpec {
    pub channels: usize,
    pub reduction: usize,
}

impl CrossAttentionSpec {
    pub fn new(channels: usize) -> Self {
        CrossAttentionSpec {
            channels,
            reduction: ATTENTION_REDUCTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "cross-attention channels ({}) must be a positive multiple of the reduction ({})",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }
}

fn channels_of(g: &Graph, x: Var) -> usize {
    g.shape(x).get(1).copied().unwrap_or(0)
}

/// Convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = store.register(
            format!("{name}.weight"),
            &[cout, cin, kernel[0], kernel[1], kernel[2]],
            ParamKind::ConvWeight { fan_in },
        );
        let bias = store.register(format!("{name}.bias"), &[cout], ParamKind::Bias);
        Conv {
            weight,
            bias,
            stride,
            pad: kernel.map(|k| k / 2),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.conv3d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// conv -> instance norm -> leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    conv: Conv,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvNormAct {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: [usize; 3]) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, [3; 3], stride);
        let gamma = store.register(format!("{name}.norm.gamma"), &[cout], ParamKind::NormScale);
        let beta = store.register(format!("{name}.norm.beta"), &[cout], ParamKind::NormShift);
        ConvNormAct { conv, gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, p, x)?;
        let h = g.instance_norm(h, p.var(self.gamma), p.var(self.beta), NORM_EPS)?;
        g.leaky_relu(h, LEAKY_SLOPE)
    }
}

/// Two conv-norm-activation layers with an identity or 1x1x1-projected skip.
#[derive(Clone, Debug)]
pub struct ResidualStage {
    pub spec: StageSpec,
    first: ConvNormAct,
    second: ConvNormAct,
    projection: Option<Conv>,
}

impl ResidualStage {
    pub fn new(store: &mut ParamStore, name: &str, spec: StageSpec) -> Self {
        let (cin, cout) = (spec.channels_in, spec.channels_out);
        ResidualStage {
            spec,
            first: ConvNormAct::new(store, &format!("{name}.layer1"), cin, cout, [1; 3]),
            second: ConvNormAct::new(store, &format!("{name}.layer2"), cout, cout, [1; 3]),
            projection: (cin != cout).then(|| Conv::new(store, &format!("{name}.proj"), cin, cout, [1; 3], [1; 3])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let c = channels_of(g, x);
        if c != self.spec.channels_in {
            return Err(Error::shape(format!(
                "residual stage expects {} input channels, got {c}",
                self.spec.channels_in
            )));
        }
        let h = self.first.forward(g, p, x)?;
        let h = self.second.forward(g, p, h)?;
        let skip = match &self.projection {
            Some(proj) => proj.forward(g, p, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

/// Strided conv -> norm -> activation that halves the axes with stride 2.
#[derive(Clone, Debug)]
pub struct DownPool {
    pub stride: [usize; 3],
    layer: ConvNormAct,
}

impl DownPool {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: [usize; 3]) -> Self {
        DownPool {
            stride,
            layer: ConvNormAct::new(store, name, cin, cout, stride),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 {
            return Err(Error::shape(format!("down_pool expects a 5-d tensor, got {shape:?}")));
        }
        for a in 0..3 {
            if shape[2 + a] % self.stride[a] != 0 {
                return Err(Error::shape(format!(
                    "down_pool: spatial dims {:?} are not divisible by stride {:?}; pad the input",
                    &shape[2..],
                    self.stride
                )));
            }
        }
        self.layer.forward(g, p, x)
    }
}

/// Transposed conv, concat with the encoder skip, then a residual stage.
#[derive(Clone, Debug)]
pub struct UpSample {
    weight: ParamId,
    bias: ParamId,
    stride: [usize; 3],
    stage: ResidualStage,
}

impl UpSample {
    /// Upsample from `cin` to `cout` channels; the skip carries `cout` channels.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: [usize; 3]) -> Self {
        let weight = store.register(
            format!("{name}.up.weight"),
            &[cin, cout, stride[0], stride[1], stride[2]],
            ParamKind::ConvWeight {
                fan_in: cin * stride.iter().product::<usize>(),
            },
        );
        let bias = store.register(format!("{name}.up.bias"), &[cout], ParamKind::Bias);
        let stage = ResidualStage::new(
            store,
            &format!("{name}.stage"),
            StageSpec {
                channels_in: 2 * cout,
                channels_out: cout,
                pool: [1; 3],
            },
        );
        UpSample {
            weight,
            bias,
            stride,
            stage,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var, skip: Var) -> Result<Var> {
        let up = g.conv3d_transposed(x, p.var(self.weight), Some(p.var(self.bias)), self.stride)?;
        if g.shape(up)[2..] != g.shape(skip)[2..] {
            return Err(Error::shape(format!(
                "up_sample: upsampled spatial shape {:?} does not match skip {:?}",
                &g.shape(up)[2..],
                &g.shape(skip)[2..]
            )));
        }
        let cat = g.concat_channels(&[up, skip])?;
        self.stage.forward(g, p, cat)
    }
}

/// 1x1x1 convolution to class logits.
#[derive(Clone, Debug)]
pub struct SupervisionHead {
    conv: Conv,
}

impl SupervisionHead {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize) -> Self {
        SupervisionHead {
            conv: Conv::new(store, name, cin, NUM_CLASSES, [1; 3], [1; 3]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        self.conv.forward(g, p, x)
    }
}

/// Convolutional cross-attention fusing `f_pre` into `f_mid`.
///
/// A channel gate is computed from the pooled concatenation of both streams
/// and applied to `f_pre`; a spatial gate from the channel-mean and
/// channel-max maps of the gated prior then weights it voxelwise before it is
/// added to `f_mid`. With `f_pre == 0` the block returns `f_mid` unchanged.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub spec: CrossAttentionSpec,
    squeeze: Conv,
    excite: Conv,
    spatial: Conv,
}

/// Intermediate values of one cross-attention pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    pub channel_gate: Var,
    pub spatial_gate: Var,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, spec: CrossAttentionSpec) -> Self {
        let c = spec.channels;
        let hidden = c / spec.reduction;
        CrossAttention {
            spec,
            squeeze: Conv::new(store, &format!("{name}.squeeze"), 2 * c, hidden, [1; 3], [1; 3]),
            excite: Conv::new(store, &format!("{name}.excite"), hidden, c, [1; 3], [1; 3]),
            spatial: Conv::new(
                store,
                &format!("{name}.spatial"),
                2,
                1,
                [SPATIAL_GATE_KERNEL; 3],
                [1; 3],
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, f_mid: Var, f_pre: Var) -> Result<Var> {
        Ok(self.trace(g, p, f_mid, f_pre)?.output)
    }

    pub fn trace(&self, g: &mut Graph, p: &Binding, f_mid: Var, f_pre: Var) -> Result<AttentionTrace> {
        if g.shape(f_mid) != g.shape(f_pre) {
            return Err(Error::shape(format!(
                "cross_attention: f_mid {:?} and f_pre {:?} differ in shape",
                g.shape(f_mid),
                g.shape(f_pre)
            )));
        }
        if channels_of(g, f_mid) != self.spec.channels {
            return Err(Error::shape(format!(
                "cross_attention expects {} channels, got {}",
                self.spec.channels,
                channels_of(g, f_mid)
            )));
        }
        let both = g.concat_channels(&[f_mid, f_pre])?;
        let pooled = g.spatial_mean(both)?;
        let hidden = self.squeeze.forward(g, p, pooled)?;
        let hidden = g.leaky_relu(hidden, LEAKY_SLOPE)?;
        let logits = self.excite.forward(g, p, hidden)?;
        let channel_gate = g.sigmoid(logits);
        let gated = g.mul(f_pre, channel_gate)?;

        let avg = g.channel_mean(gated)?;
        let max = g.channel_max(gated)?;
        let maps = g.concat_channels(&[avg, max])?;
        let logits = self.spatial.forward(g, p, maps)?;
        let spatial_gate = g.sigmoid(logits);
        let weighted = g.mul(gated, spatial_gate)?;
        let output = g.add(f_mid, weighted)?;
        Ok(AttentionTrace {
            output,
            channel_gate,
            spatial_gate,
        })
    }
}
