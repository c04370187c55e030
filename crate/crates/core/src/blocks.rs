//! Attention blocks (SE, HAC, non-local, channel-wise non-local) and the
//! ResNet bottleneck residual block.
//!
//! Every block reads its weights from a [`ParamStore`] under a dotted prefix,
//! so the same functions serve standalone tests and the full backbone.
//!
//! Channel-wise blocks (SE, HAC, C-NL) compute a per-channel gate in (0, 1)
//! from globally pooled features and rescale the input with it. The
//! non-local block mixes all spatial positions through a softmax similarity
//! and adds the result back through a zero-initialized projection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ParamStore, Session};
use crate::tensor::{Element, Result, Tensor, TensorError, Var};

/// Bias that saturates a sigmoid to exactly 1.0 in both f32 and f64.
pub const UNIT_GATE_BIAS: f64 = 40.0;
pub const DEFAULT_REDUCTION: usize = 16;
/// Weight bound of the projection feeding a between-block sigmoid gate.
pub const GATE_INIT_BOUND: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Se,
    Hac,
    Nl,
    Cnl,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [Self::Se, Self::Hac, Self::Nl, Self::Cnl];

    pub fn is_channel_wise(self) -> bool {
        !matches!(self, Self::Nl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Se => "se",
            Self::Hac => "hac",
            Self::Nl => "nl",
            Self::Cnl => "cnl",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown attention kind {0:?} (expected se, hac, nl or cnl)")]
pub struct UnknownKind(pub String);

impl FromStr for AttentionKind {
    type Err = UnknownKind;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "se" => Ok(Self::Se),
            "hac" => Ok(Self::Hac),
            "nl" => Ok(Self::Nl),
            "cnl" | "c-nl" => Ok(Self::Cnl),
            _ => Err(UnknownKind(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub kind: AttentionKind,
    /// Channel reduction ratio of the channel-wise kinds.
    pub reduction: usize,
    /// Inner width of the non-local block as `num/den` of the input channels.
    pub inner_ratio: (usize, usize),
    /// Divide similarity scores by √d before the softmax.
    pub scaled_similarity: bool,
}

impl AttentionSpec {
    pub fn new(kind: AttentionKind) -> Self {
        Self {
            kind,
            reduction: DEFAULT_REDUCTION,
            inner_ratio: (1, 2),
            scaled_similarity: false,
        }
    }

    pub fn with_reduction(mut self, r: usize) -> Self {
        self.reduction = r;
        self
    }

    /// Width of the reduced embedding for `channels` input channels.
    pub fn inner_channels(&self, channels: usize) -> Result<usize> {
        let bad = |detail: String| TensorError::Invalid {
            op: "attention_spec",
            detail,
        };
        match self.kind {
            AttentionKind::Nl => {
                let (num, den) = self.inner_ratio;
                if num == 0 || den == 0 || (channels * num) % den != 0 {
                    return Err(bad(format!(
                        "{channels} channels × {num}/{den} is not an integral inner width"
                    )));
                }
                Ok(channels * num / den)
            }
            _ => {
                if self.reduction == 0 || channels % self.reduction != 0 || channels < self.reduction {
                    return Err(bad(format!(
                        "{channels} channels not divisible by reduction {}",
                        self.reduction
                    )));
                }
                Ok(channels / self.reduction)
            }
        }
    }
}

/// Create the parameters of an attention block for `channels` input channels.
pub fn init_attention<T: Element, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: &AttentionSpec,
    channels: usize,
    rng: &mut R,
) -> Result<()> {
    let d = spec.inner_channels(channels)?;
    match spec.kind {
        AttentionKind::Se => {
            store.init_linear(&format!("{prefix}.fc1"), channels, d, rng);
            store.init_linear(&format!("{prefix}.fc2"), d, channels, rng);
        }
        AttentionKind::Hac => {
            store.init_linear(&format!("{prefix}.fc1"), channels, d, rng);
            init_gate_projection(store, &format!("{prefix}.fc2"), d, channels, rng);
        }
        AttentionKind::Cnl => {
            for branch in ["query", "key", "value"] {
                store.init_linear(&format!("{prefix}.{branch}"), channels, d, rng);
            }
            init_gate_projection(store, &format!("{prefix}.out"), d, channels, rng);
        }
        AttentionKind::Nl => {
            for branch in ["theta", "phi", "g"] {
                store.init_conv(&format!("{prefix}.{branch}.weight"), d, channels, 1, rng);
                store.insert(format!("{prefix}.{branch}.bias"), Tensor::zeros(&[d]));
            }
            store.insert(format!("{prefix}.z.weight"), Tensor::zeros(&[channels, d, 1, 1]));
            store.insert(format!("{prefix}.z.bias"), Tensor::zeros(&[channels]));
        }
    }
    Ok(())
}

/// Gates that sit on the full inter-block tensor start near a uniform 0.5:
/// with ±1/√fan_in weights some channels would start almost switched off.
fn init_gate_projection<T: Element, R: Rng>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert(
        format!("{prefix}.weight"),
        Tensor::rand_uniform(&[fan_in, fan_out], -GATE_INIT_BOUND, GATE_INIT_BOUND, rng),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

/// Make a channel-wise block's gate exactly 1 (or a non-local block's residual
/// exactly 0) so that the block is the identity.
pub fn force_identity<T: Element>(store: &mut ParamStore<T>, prefix: &str, kind: AttentionKind) {
    let (w, b, bias) = match kind {
        AttentionKind::Se | AttentionKind::Hac => ("fc2.weight", "fc2.bias", UNIT_GATE_BIAS),
        AttentionKind::Cnl => ("out.weight", "out.bias", UNIT_GATE_BIAS),
        AttentionKind::Nl => ("z.weight", "z.bias", 0.0),
    };
    if let Some(t) = store.get_mut(&format!("{prefix}.{w}")) {
        t.data_mut().iter_mut().for_each(|v| *v = T::ZERO);
    }
    if let Some(t) = store.get_mut(&format!("{prefix}.{b}")) {
        t.data_mut().iter_mut().for_each(|v| *v = T::of(bias));
    }
}

fn expect_nchw(s: &Session<'_, impl Element>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *s.graph.shape(x) {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref other => Err(TensorError::Dimension {
            op,
            detail: format!("expected B×C×H×W, got {other:?}"),
        }),
    }
}

/// Pooled `[B×C]` descriptor of a `[B×C×H×W]` tensor.
fn pooled<T: Element>(s: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let [b, c, _, _] = expect_nchw(s, x, "global_avg_pool")?;
    let p = s.graph.global_avg_pool(x)?;
    s.graph.reshape(p, &[b, c])
}

fn apply_gate<T: Element>(s: &mut Session<'_, T>, x: Var, gate: Var) -> Result<Var> {
    let [b, c, _, _] = expect_nchw(s, x, "gate")?;
    let gate = s.graph.reshape(gate, &[b, c, 1, 1])?;
    s.graph.mul(x, gate)
}

/// The squeeze-excitation gate `sigmoid(W2·relu(W1·GAP(x)))`, shape `[B×C]`.
pub fn excitation_gate<T: Element>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let p = pooled(s, x)?;
    let h = s.linear(&format!("{prefix}.fc1"), p)?;
    let h = s.graph.relu(h)?;
    let h = s.linear(&format!("{prefix}.fc2"), h)?;
    s.graph.sigmoid(h)
}

/// Squeeze-and-excitation applied to a residual branch output.
pub fn se_forward<T: Element>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gate = excitation_gate(s, prefix, x)?;
    apply_gate(s, x, gate)
}

/// Channel gate placed between residual blocks. Shares the SE gate kernel;
/// only the placement in the network differs.
pub fn hac_forward<T: Element>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gate = excitation_gate(s, prefix, x)?;
    apply_gate(s, x, gate)
}

/// Embedded-Gaussian non-local block: `x + z(softmax(θ(x)·φ(x)ᵀ)·g(x))`.
pub fn nl_forward<T: Element>(
    s: &mut Session<'_, T>,
    prefix: &str,
    spec: &AttentionSpec,
    x: Var,
) -> Result<Var> {
    let [b, c, h, w] = expect_nchw(s, x, "nl")?;
    let d = spec.inner_channels(c)?;
    let n = h * w;
    let theta = s.conv1x1_bias(&format!("{prefix}.theta"), x)?;
    let phi = s.conv1x1_bias(&format!("{prefix}.phi"), x)?;
    let g = s.conv1x1_bias(&format!("{prefix}.g"), x)?;
    let theta = s.graph.reshape(theta, &[b, d, n])?;
    let q = s.graph.transpose_last2(theta)?; // B×N×d
    let k_t = s.graph.reshape(phi, &[b, d, n])?; // B×d×N
    let mut scores = s.graph.bmm(q, k_t)?; // B×N×N
    if spec.scaled_similarity {
        scores = s.graph.scale(scores, 1.0 / (d as f64).sqrt())?;
    }
    let f = s.graph.softmax(scores)?;
    let g = s.graph.reshape(g, &[b, d, n])?;
    let v = s.graph.transpose_last2(g)?; // B×N×d
    let y = s.graph.bmm(f, v)?; // B×N×d
    let y = s.graph.transpose_last2(y)?;
    let y = s.graph.reshape(y, &[b, d, h, w])?;
    let z = s.conv1x1_bias(&format!("{prefix}.z"), y)?;
    s.graph.add(x, z)
}

/// Channel-wise non-local block.
///
/// The input is pooled to a `[B×C]` descriptor first. Query, key and value
/// are linear projections of that descriptor to `C/r` channels; a
/// `(C/r)×(C/r)` softmax similarity between query and key channels
/// aggregates the value channels, and a final projection back to `C`
/// channels followed by a sigmoid gates the input.
pub fn cnl_forward<T: Element>(
    s: &mut Session<'_, T>,
    prefix: &str,
    spec: &AttentionSpec,
    x: Var,
) -> Result<Var> {
    let [b, c, _, _] = expect_nchw(s, x, "cnl")?;
    let d = spec.inner_channels(c)?;
    let p = pooled(s, x)?;
    let q = s.linear(&format!("{prefix}.query"), p)?;
    let k = s.linear(&format!("{prefix}.key"), p)?;
    let v = s.linear(&format!("{prefix}.value"), p)?;
    let q = s.graph.reshape(q, &[b, d, 1])?;
    let k = s.graph.reshape(k, &[b, 1, d])?;
    let mut scores = s.graph.bmm(q, k)?; // B×d×d
    if spec.scaled_similarity {
        scores = s.graph.scale(scores, 1.0 / (d as f64).sqrt())?;
    }
    let f = s.graph.softmax(scores)?;
    let v = s.graph.reshape(v, &[b, d, 1])?;
    let y = s.graph.bmm(f, v)?;
    let y = s.graph.reshape(y, &[b, d])?;
    let gate = s.linear(&format!("{prefix}.out"), y)?;
    let gate = s.graph.sigmoid(gate)?;
    apply_gate(s, x, gate)
}

/// Dispatch for blocks placed between residual blocks. SE is accepted too:
/// on a tensor with no enclosing residual branch it acts as a plain gate.
pub fn attention_forward<T: Element>(
    s: &mut Session<'_, T>,
    prefix: &str,
    spec: &AttentionSpec,
    x: Var,
) -> Result<Var> {
    match spec.kind {
        AttentionKind::Se => se_forward(s, prefix, x),
        AttentionKind::Hac => hac_forward(s, prefix, x),
        AttentionKind::Nl => nl_forward(s, prefix, spec, x),
        AttentionKind::Cnl => cnl_forward(s, prefix, spec, x),
    }
}

/// Layout of one bottleneck residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub in_channels: usize,
    pub planes: usize,
    pub stride: usize,
    /// 1×1 conv + BN on the skip path.
    pub downsample: bool,
    /// Squeeze-excitation gate on the residual branch.
    pub se: Option<AttentionSpec>,
}

impl BottleneckSpec {
    pub const EXPANSION: usize = 4;

    pub fn out_channels(&self) -> usize {
        self.planes * Self::EXPANSION
    }
}

pub fn init_bottleneck<T: Element, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: &BottleneckSpec,
    rng: &mut R,
) -> Result<()> {
    let (cin, p, cout) = (spec.in_channels, spec.planes, spec.out_channels());
    store.init_conv(&format!("{prefix}.conv1.weight"), p, cin, 1, rng);
    store.init_bn(&format!("{prefix}.bn1"), p);
    store.init_conv(&format!("{prefix}.conv2.weight"), p, p, 3, rng);
    store.init_bn(&format!("{prefix}.bn2"), p);
    store.init_conv(&format!("{prefix}.conv3.weight"), cout, p, 1, rng);
    store.init_bn(&format!("{prefix}.bn3"), cout);
    if spec.downsample {
        store.init_conv(&format!("{prefix}.downsample.conv.weight"), cout, cin, 1, rng);
        store.init_bn(&format!("{prefix}.downsample.bn"), cout);
    }
    if let Some(se) = &spec.se {
        init_attention(store, &format!("{prefix}.se"), se, cout, rng)?;
    }
    Ok(())
}

/// `relu(skip(x) + branch(x))` with the optional SE gate on `branch(x)`.
pub fn bottleneck_forward<T: Element>(
    s: &mut Session<'_, T>,
    prefix: &str,
    spec: &BottleneckSpec,
    x: Var,
) -> Result<Var> {
    let h = s.conv(&format!("{prefix}.conv1.weight"), x, 1, 0)?;
    let h = s.bn(&format!("{prefix}.bn1"), h)?;
    let h = s.graph.relu(h)?;
    let h = s.conv(&format!("{prefix}.conv2.weight"), h, spec.stride, 1)?;
    let h = s.bn(&format!("{prefix}.bn2"), h)?;
    let h = s.graph.relu(h)?;
    let h = s.conv(&format!("{prefix}.conv3.weight"), h, 1, 0)?;
    let mut branch = s.bn(&format!("{prefix}.bn3"), h)?;
    if spec.se.is_some() {
        branch = se_forward(s, &format!("{prefix}.se"), branch)?;
    }
    let skip = if spec.downsample {
        let k = s.conv(&format!("{prefix}.downsample.conv.weight"), x, spec.stride, 0)?;
        s.bn(&format!("{prefix}.downsample.bn"), k)?
    } else {
        x
    };
    if s.graph.shape(skip) != s.graph.shape(branch) {
        return Err(TensorError::Dimension {
            op: "bottleneck",
            detail: format!(
                "skip {:?} vs branch {:?}",
                s.graph.shape(skip),
                s.graph.shape(branch)
            ),
        });
    }
    let y = s.graph.add(branch, skip)?;
    s.graph.relu(y)
}
