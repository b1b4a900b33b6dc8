//! Model zoo: architecture specs, seeded initialization, the softmax
//! probability head, cross-entropy, and the portable checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use crate::attack::{AttackEval, AttackTarget};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Probability floor applied before any logarithm of a softmax output.
pub const PROB_FLOOR: Real = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 4] = b"DPAT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        same_pad: bool,
    },
    Pool,
    Relu,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

/// A validated layer stack with a fixed input shape and class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    kind: ArchKind,
    pub input_shape: [usize; 3], // channels, height, width
    pub classes: usize,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ArchKind {
    SmallCnn,
    Mlp { hidden: usize },
}

impl ArchSpec {
    /// Reference CNN: conv 3x3 same -> relu -> pool, twice, then dense + softmax.
    pub fn small_cnn(channels: usize, height: usize, width: usize, classes: usize) -> Result<Self> {
        let layers = vec![
            Layer::Conv {
                in_ch: channels,
                out_ch: 8,
                kernel: 3,
                same_pad: true,
            },
            Layer::Relu,
            Layer::Pool,
            Layer::Conv {
                in_ch: 8,
                out_ch: 16,
                kernel: 3,
                same_pad: true,
            },
            Layer::Relu,
            Layer::Pool,
            Layer::Dense {
                inputs: 16 * (height / 4) * (width / 4),
                outputs: classes,
            },
            Layer::Softmax,
        ];
        let arch = ArchSpec {
            kind: ArchKind::SmallCnn,
            input_shape: [channels, height, width],
            classes,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Single-hidden-layer perceptron over flattened pixels.
    pub fn mlp(
        channels: usize,
        height: usize,
        width: usize,
        hidden: usize,
        classes: usize,
    ) -> Result<Self> {
        let flat = channels * height * width;
        let layers = vec![
            Layer::Dense {
                inputs: flat,
                outputs: hidden,
            },
            Layer::Relu,
            Layer::Dense {
                inputs: hidden,
                outputs: classes,
            },
            Layer::Softmax,
        ];
        let arch = ArchSpec {
            kind: ArchKind::Mlp { hidden },
            input_shape: [channels, height, width],
            classes,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Stable id encoding family, input shape and class count;
    /// `from_arch_id` inverts it.
    pub fn arch_id(&self) -> String {
        let [c, h, w] = self.input_shape;
        match &self.kind {
            ArchKind::SmallCnn => format!("smallcnn:{c}x{h}x{w}:{}", self.classes),
            ArchKind::Mlp { hidden } => format!("mlp:{c}x{h}x{w}:{hidden}:{}", self.classes),
        }
    }

    pub fn from_arch_id(id: &str) -> Result<Self> {
        let bad = || Error::UnknownArch(id.to_string());
        let parts: Vec<&str> = id.split(':').collect();
        let dims = |s: &str| -> Result<[usize; 3]> {
            let d: Vec<usize> = s.split('x').filter_map(|p| p.parse().ok()).collect();
            if d.len() == 3 {
                Ok([d[0], d[1], d[2]])
            } else {
                Err(bad())
            }
        };
        match parts.as_slice() {
            ["smallcnn", shape, classes] => {
                let [c, h, w] = dims(shape)?;
                let classes = classes.parse().map_err(|_| bad())?;
                ArchSpec::small_cnn(c, h, w, classes)
            }
            ["mlp", shape, hidden, classes] => {
                let [c, h, w] = dims(shape)?;
                let hidden = hidden.parse().map_err(|_| bad())?;
                let classes = classes.parse().map_err(|_| bad())?;
                ArchSpec::mlp(c, h, w, hidden, classes)
            }
            _ => Err(bad()),
        }
    }

    /// Check the layer shapes chain and that the stack ends in softmax over
    /// the class count. The error names the first inconsistent layer.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        let [c, mut h, mut w] = self.input_shape;
        let mut ch = c;
        let mut flat: Option<usize> = None; // set once spatial structure is consumed
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| {
                Err(Error::Contract(format!(
                    "layer {} ({layer:?}): {msg}",
                    i + 1
                )))
            };
            match layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    same_pad,
                } => {
                    if flat.is_some() {
                        return fail("conv after dense".into());
                    }
                    if *in_ch != ch {
                        return fail(format!("expects {in_ch} channels, gets {ch}"));
                    }
                    if *same_pad {
                        if kernel % 2 == 0 {
                            return fail("same padding needs odd kernel".into());
                        }
                    } else {
                        if h < *kernel || w < *kernel {
                            return fail(format!("kernel {kernel} larger than {h}x{w}"));
                        }
                        h = h - kernel + 1;
                        w = w - kernel + 1;
                    }
                    ch = *out_ch;
                }
                Layer::Pool => {
                    if flat.is_some() {
                        return fail("pool after dense".into());
                    }
                    if h % 2 != 0 || w % 2 != 0 {
                        return fail(format!("pool needs even spatial dims, got {h}x{w}"));
                    }
                    h /= 2;
                    w /= 2;
                }
                Layer::Relu => {}
                Layer::Dense { inputs, outputs } => {
                    let have = flat.unwrap_or(ch * h * w);
                    if *inputs != have {
                        return fail(format!("expects {inputs} inputs, gets {have}"));
                    }
                    flat = Some(*outputs);
                }
                Layer::Softmax => {
                    let have = flat.unwrap_or(ch * h * w);
                    if i + 1 != self.layers.len() {
                        return fail("softmax must be the last layer".into());
                    }
                    if have != self.classes {
                        return fail(format!(
                            "softmax over {have} values but {} classes declared",
                            self.classes
                        ));
                    }
                }
            }
        }
        match self.layers.last() {
            Some(Layer::Softmax) => Ok(()),
            _ => Err(Error::Contract("last layer must be softmax".into())),
        }
    }

    /// Canonical (name, shape) list of the trainable tensors.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv_idx = 0;
        let mut dense_idx = 0;
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    conv_idx += 1;
                    out.push((
                        format!("conv{conv_idx}.weight"),
                        vec![*out_ch, *in_ch, *kernel, *kernel],
                    ));
                    out.push((format!("conv{conv_idx}.bias"), vec![*out_ch]));
                }
                Layer::Dense { inputs, outputs } => {
                    dense_idx += 1;
                    out.push((format!("dense{dense_idx}.weight"), vec![*outputs, *inputs]));
                    out.push((format!("dense{dense_idx}.bias"), vec![*outputs]));
                }
                _ => {}
            }
        }
        out
    }

    /// Names of the dense-layer tensors (the warmup phase trains only these).
    pub fn dense_param_names(&self) -> Vec<String> {
        self.param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("dense"))
            .collect()
    }
}

/// Ordered, named collection of parameter tensors for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch_id: String,
    pub entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Deterministic seeded initialization: weights uniform in
/// +-sqrt(6/(fan_in+fan_out)), biases zero.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let root = Rng::new(seed);
    let mut entries = Vec::new();
    for (idx, (name, shape)) in arch.param_shapes().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let (fan_in, fan_out) = match shape.len() {
                4 => {
                    let rf = shape[2] * shape[3];
                    (shape[1] * rf, shape[0] * rf)
                }
                2 => (shape[1], shape[0]),
                _ => (n, n),
            };
            let bound = (6.0 / (fan_in + fan_out) as Real).sqrt();
            let mut rng = root.fork(&[idx as u64]);
            Tensor::from_parts(shape, (0..n).map(|_| rng.uniform(-bound, bound)).collect())
        };
        entries.push((name, tensor));
    }
    Ok(ModelParams {
        arch_id: arch.arch_id(),
        entries,
    })
}

/// Node taps produced when a classifier branch is appended to a graph.
#[derive(Debug, Clone)]
pub struct BranchTaps {
    pub logits: NodeId,
    pub probs: NodeId,
    /// Per-example cross-entropy `[batch]`.
    pub ce_vec: NodeId,
    pub ce_mean: NodeId,
    pub ce_sum: NodeId,
    /// Raw conv-layer outputs (pre-activation), used by Grad-CAM.
    pub conv_outputs: Vec<NodeId>,
}

/// Declare parameter leaves in canonical order; reused by every branch of a graph.
pub fn declare_param_nodes(g: &mut Graph, arch: &ArchSpec) -> Vec<NodeId> {
    arch.param_shapes()
        .into_iter()
        .map(|(name, shape)| g.param(&name, shape))
        .collect()
}

/// Append the full classifier computation for one input batch, sharing the
/// given parameter nodes. `onehot` carries the labels for the cross-entropy
/// chain (bind all-zeros when only probabilities are needed).
pub fn classifier_branch(
    g: &mut Graph,
    arch: &ArchSpec,
    batch: usize,
    x: NodeId,
    onehot: NodeId,
    params: &[NodeId],
) -> Result<BranchTaps> {
    let mut cur = x;
    let mut pidx = 0;
    let mut flattened = false;
    let mut logits = x;
    let mut conv_outputs = Vec::new();
    for layer in &arch.layers {
        match layer {
            Layer::Conv { same_pad, .. } => {
                let w = params[pidx];
                let b = params[pidx + 1];
                pidx += 2;
                let c = g.conv2d(cur, w, *same_pad)?;
                cur = g.add(c, b)?;
                conv_outputs.push(cur);
            }
            Layer::Pool => {
                cur = g.max_pool2(cur)?;
            }
            Layer::Relu => {
                cur = g.relu(cur);
            }
            Layer::Dense { inputs, outputs } => {
                if !flattened {
                    cur = g.reshape(cur, vec![batch, *inputs])?;
                    flattened = true;
                }
                let w = params[pidx];
                let b = params[pidx + 1];
                pidx += 2;
                let m = g.matmul(cur, w, false, true)?;
                cur = g.add(m, b)?;
                let _ = outputs;
            }
            Layer::Softmax => {
                logits = cur;
                cur = g.softmax(cur)?;
            }
        }
    }
    let probs = cur;

    // Per-example cross-entropy, composed from primitives:
    // clamp(p) = relu(p - floor) + floor, ce = -(onehot . log(clamp(p)))
    let neg_floor = g.scalar_const(-PROB_FLOOR);
    let floor = g.scalar_const(PROB_FLOOR);
    let shifted = g.add(probs, neg_floor)?;
    let lifted = g.relu(shifted);
    let clamped = g.add(lifted, floor)?;
    let logp = g.log(clamped);
    let picked = g.mul(logp, onehot)?;
    let ones = g.constant(Tensor::full(&[arch.classes, 1], 1.0));
    let rows = g.matmul(picked, ones, false, false)?;
    let rows = g.reshape(rows, vec![batch])?;
    let neg_one = g.scalar_const(-1.0);
    let ce_vec = g.mul(rows, neg_one)?;
    let ce_mean = g.mean(ce_vec);
    let ce_sum = g.sum(ce_vec);

    Ok(BranchTaps {
        logits,
        probs,
        ce_vec,
        ce_mean,
        ce_sum,
        conv_outputs,
    })
}

/// A self-contained single-branch classifier graph for inference and attacks.
pub struct ClassifierGraph {
    pub graph: Graph,
    pub taps: BranchTaps,
    pub batch: usize,
    pub classes: usize,
}

impl ClassifierGraph {
    pub fn build(arch: &ArchSpec, batch: usize) -> Result<Self> {
        let [c, h, w] = arch.input_shape;
        let mut g = Graph::new();
        let x = g.input("x", vec![batch, c, h, w]);
        let onehot = g.input("onehot", vec![batch, arch.classes]);
        let params = declare_param_nodes(&mut g, arch);
        let taps = classifier_branch(&mut g, arch, batch, x, onehot, &params)?;
        g.set_output(taps.ce_sum);
        Ok(ClassifierGraph {
            graph: g,
            taps,
            batch,
            classes: arch.classes,
        })
    }

    pub fn forward(
        &mut self,
        params: &ModelParams,
        x: &Tensor,
        labels: Option<&[usize]>,
    ) -> Result<()> {
        let hot = match labels {
            Some(y) => one_hot(y, self.classes)?,
            None => Tensor::zeros(&[self.batch, self.classes]),
        };
        self.graph
            .forward(&[x.clone(), hot], &params.tensors())
            .map(|_| ())
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::from_parts(vec![labels.len(), classes], data))
}

const PREDICT_CHUNK: usize = 64;

/// Class probabilities `[batch, classes]`; evaluates in fixed-size chunks so
/// arbitrarily large batches stay memory-bounded.
pub fn predict_proba(arch: &ArchSpec, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let n = x.batch_len()?;
    let [c, h, w] = arch.input_shape;
    if x.shape() != [n, c, h, w] {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match architecture input [{n}, {c}, {h}, {w}]",
            x.shape()
        )));
    }
    let stride = x.example_stride();
    let mut out = Vec::with_capacity(n * arch.classes);
    let mut start = 0;
    while start < n {
        let m = PREDICT_CHUNK.min(n - start);
        let chunk = Tensor::from_parts(
            vec![m, c, h, w],
            x.data()[start * stride..(start + m) * stride].to_vec(),
        );
        let mut cg = ClassifierGraph::build(arch, m)?;
        cg.forward(params, &chunk, None)?;
        out.extend_from_slice(cg.graph.value(cg.taps.probs)?.data());
        start += m;
    }
    Ok(Tensor::from_parts(vec![n, arch.classes], out))
}

pub fn predict_labels(arch: &ArchSpec, params: &ModelParams, x: &Tensor) -> Result<Vec<usize>> {
    predict_proba(arch, params, x)?.argmax_rows()
}

/// Per-example cross-entropy of given probability rows against labels,
/// with the batch mean. Probabilities are floored at `PROB_FLOOR`.
pub fn cross_entropy(prob: &Tensor, labels: &[usize]) -> Result<(Vec<Real>, Real)> {
    if prob.rank() != 2 || prob.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "prob shape {:?} vs {} labels",
            prob.shape(),
            labels.len()
        )));
    }
    let classes = prob.shape()[1];
    let mut losses = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let p = prob.data()[i * classes + y].max(PROB_FLOOR);
        losses.push(-p.ln());
    }
    let mean = losses.iter().sum::<Real>() / losses.len().max(1) as Real;
    Ok((losses, mean))
}

/// Classifier view over borrowed architecture and parameters; implements the
/// gradient interface attacks consume.
pub struct Classifier<'a> {
    pub arch: &'a ArchSpec,
    pub params: &'a ModelParams,
}

impl AttackTarget for Classifier<'_> {
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<AttackEval> {
        let m = x.batch_len()?;
        let mut cg = ClassifierGraph::build(self.arch, m)?;
        cg.forward(self.params, x, Some(labels))?;
        let per_example = cg.graph.value(cg.taps.ce_vec)?.data().to_vec();
        // Seeding at the per-example sum makes each row of the input gradient
        // the gradient of that example's own loss.
        let (grads, _) = cg
            .graph
            .backward_from(cg.taps.ce_sum, &Tensor::scalar(1.0), &[])?;
        Ok(AttackEval {
            per_example_loss: per_example,
            input_grad: grads.inputs[0].clone(),
        })
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        predict_labels(self.arch, self.params, x)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format (bit-exact):
//   magic "DPAT" | version u32 LE | arch_id (u32 LE length + UTF-8)
//   | tensor count u32 LE | per tensor: name (u32 LE length + UTF-8),
//     rank u32 LE, dims u32 LE each, payload f32 LE row-major.
// ---------------------------------------------------------------------------

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_str(&mut buf, &params.arch_id);
    buf.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for (name, tensor) in &params.entries {
        write_str(&mut buf, name);
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Truncated(format!(
                "{what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Truncated(format!("{what}: invalid UTF-8")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &raw, pos: 0 };

    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let arch_id = cur.string("arch id")?;
    let count = cur.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for t in 0..count {
        let name = cur.string(&format!("tensor {t} name"))?;
        let rank = cur.u32(&format!("tensor '{name}' rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32(&format!("tensor '{name}' dims"))? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = cur.take(n * 4, &format!("tensor '{name}' payload"))?;
        let data: Vec<Real> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as Real)
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }

    let arch = ArchSpec::from_arch_id(&arch_id)?;
    let expected = arch.param_shapes();
    if expected.len() != entries.len() {
        return Err(Error::Shape(format!(
            "arch '{arch_id}' declares {} tensors, checkpoint has {}",
            expected.len(),
            entries.len()
        )));
    }
    for ((ename, eshape), (name, tensor)) in expected.iter().zip(&entries) {
        if ename != name || eshape.as_slice() != tensor.shape() {
            return Err(Error::Shape(format!(
                "checkpoint tensor '{name}' {:?} does not match declared '{ename}' {eshape:?}",
                tensor.shape()
            )));
        }
    }
    Ok(ModelParams { arch_id, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchSpec {
        ArchSpec::small_cnn(1, 32, 32, 3).unwrap()
    }

    #[test]
    fn build_model_is_deterministic() {
        let arch = small_arch();
        let a = build_model(&arch, 11).unwrap();
        let b = build_model(&arch, 11).unwrap();
        assert_eq!(a, b);
        let c = build_model(&arch, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dense_shapes_follow_contract() {
        let arch = ArchSpec::mlp(1, 2, 2, 3, 3).unwrap();
        let shapes = arch.param_shapes();
        // dense 4->3 stores weight [3,4] and bias [3]
        assert_eq!(shapes[0], ("dense1.weight".into(), vec![3, 4]));
        assert_eq!(shapes[1], ("dense1.bias".into(), vec![3]));
    }

    #[test]
    fn small_cnn_shape_chain() {
        let arch = small_arch();
        assert!(arch.validate().is_ok());
        let shapes = arch.param_shapes();
        let expect: Vec<(String, Vec<usize>)> = vec![
            ("conv1.weight".into(), vec![8, 1, 3, 3]),
            ("conv1.bias".into(), vec![8]),
            ("conv2.weight".into(), vec![16, 8, 3, 3]),
            ("conv2.bias".into(), vec![16]),
            ("dense1.weight".into(), vec![3, 1024]),
            ("dense1.bias".into(), vec![3]),
        ];
        assert_eq!(shapes, expect);
    }

    #[test]
    fn invalid_arch_names_first_bad_layer() {
        let arch = ArchSpec {
            kind: ArchKind::SmallCnn,
            input_shape: [1, 8, 8],
            classes: 3,
            layers: vec![
                Layer::Conv {
                    in_ch: 2, // wrong: input has 1 channel
                    out_ch: 4,
                    kernel: 3,
                    same_pad: true,
                },
                Layer::Softmax,
            ],
        };
        let msg = arch.validate().unwrap_err().to_string();
        assert!(msg.contains("layer 1"), "got: {msg}");
    }

    #[test]
    fn arch_id_roundtrip() {
        for arch in [small_arch(), ArchSpec::mlp(1, 8, 8, 16, 4).unwrap()] {
            let id = arch.arch_id();
            let back = ArchSpec::from_arch_id(&id).unwrap();
            assert_eq!(arch, back);
        }
        assert!(matches!(
            ArchSpec::from_arch_id("resnet34:3x224x224:7"),
            Err(Error::UnknownArch(_))
        ));
    }

    #[test]
    fn predict_proba_rows_sum_to_one() {
        let arch = ArchSpec::mlp(1, 4, 4, 8, 3).unwrap();
        let params = build_model(&arch, 5).unwrap();
        let mut rng = crate::rng::Rng::new(2);
        let x = Tensor::from_parts(
            vec![7, 1, 4, 4],
            (0..7 * 16).map(|_| rng.next_real()).collect(),
        );
        let p = predict_proba(&arch, &params, &x).unwrap();
        for i in 0..7 {
            let s: Real = p.example(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(p.example(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let arch = ArchSpec::mlp(1, 2, 2, 4, 3).unwrap();
        let mut params = build_model(&arch, 1).unwrap();
        for (_, t) in params.entries.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let x = Tensor::full(&[2, 1, 2, 2], 0.7);
        let p = predict_proba(&arch, &params, &x).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let prob = Tensor::new(vec![1, 3], vec![1.0 / 3.0; 3]).unwrap();
        let (losses, mean) = cross_entropy(&prob, &[1]).unwrap();
        assert!((losses[0] - (3.0 as Real).ln()).abs() < 1e-12);
        assert!((mean - (3.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let prob = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let (losses, _) = cross_entropy(&prob, &[1]).unwrap();
        assert!(losses[0].is_finite());
        assert!(losses[0] > 0.0);
        // perfect prediction -> ~0 loss
        let (l2, _) = cross_entropy(&prob, &[0]).unwrap();
        assert!(l2[0].abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let prob = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            cross_entropy(&prob, &[2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_nonnegative_on_random_rows() {
        let mut rng = crate::rng::Rng::new(13);
        for _ in 0..200 {
            let raw: Vec<Real> = (0..4).map(|_| rng.next_real() + 1e-6).collect();
            let s: Real = raw.iter().sum();
            let row: Vec<Real> = raw.iter().map(|v| v / s).collect();
            let prob = Tensor::new(vec![1, 4], row).unwrap();
            let (l, _) = cross_entropy(&prob, &[rng.below(4)]).unwrap();
            assert!(l[0] >= 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_format() {
        let dir = std::env::temp_dir().join("advlab_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.dpat");

        let arch = ArchSpec::mlp(1, 2, 2, 3, 2).unwrap();
        let params = build_model(&arch, 42).unwrap();
        save_checkpoint(&params, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"DPAT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);

        // Identical params serialize to identical bytes.
        let path2 = dir.join("m2.dpat");
        save_checkpoint(&params, &path2).unwrap();
        assert_eq!(bytes, std::fs::read(&path2).unwrap());

        // One quantization cycle later the roundtrip is exact.
        let loaded = load_checkpoint(&path).unwrap();
        save_checkpoint(&loaded, &path2).unwrap();
        let again = load_checkpoint(&path2).unwrap();
        assert_eq!(loaded, again);
        for ((_, a), (_, b)) in params.entries.iter().zip(&loaded.entries) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_bad_magic_and_truncation() {
        let dir = std::env::temp_dir().join("advlab_ckpt_err_test");
        std::fs::create_dir_all(&dir).unwrap();

        let bad = dir.join("bad.dpat");
        std::fs::write(&bad, b"NOPE0000").unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::BadMagic)));

        let arch = ArchSpec::mlp(1, 2, 2, 3, 2).unwrap();
        let params = build_model(&arch, 1).unwrap();
        let full = dir.join("full.dpat");
        save_checkpoint(&params, &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.join("cut.dpat");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Truncated(_))));

        std::fs::remove_dir_all(&dir).ok();
    }
}
