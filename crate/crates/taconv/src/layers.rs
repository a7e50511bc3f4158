//! TAConv layers, residual blocks, network assembly, weight transfer and
//! checkpoint IO.
//!
//! A TAConv layer owns one set of basis weights `w[out][in][n_basis]` shared
//! by every branch, plus trainable branch coefficients `beta[B]`. The forward
//! pass synthesizes a kernel per branch from the branch's transformed basis,
//! convolves, scales by `beta[b]` and takes the per-pixel maximum. A fresh
//! layer has `beta = [1, 0, ..., 0]`, so inactive branches contribute zeros
//! and, after the relu that always follows, the layer is exactly the
//! standard convolution with the branch-0 kernels.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{eval_basis, make_grid, project_kernel, synthesize_kernel, BasisSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::transforms::{build_transform_bank, BasisBank, TransformKind, TransformSpec};
use crate::util::{f64_le_bytes, sha256_hex};

const CHECKPOINT_MAGIC: &[u8; 5] = b"TACV1";

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvConfig {
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TAConvConfig {
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub n_basis: usize,
    pub sigma: f64,
    /// Specs for branches 1..B-1; branch 0 is always the identity.
    pub branches: Vec<TransformSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResBlockConfig {
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TAResBlockConfig {
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub n_basis: usize,
    pub sigma: f64,
    pub branches: Vec<TransformSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerConfig {
    Conv(ConvConfig),
    TaConv(TAConvConfig),
    ResBlock(ResBlockConfig),
    TaResBlock(TAResBlockConfig),
}

/// Whole-network description; sufficient to rebuild banks bit-for-bit.
/// The head is always global average pooling followed by a linear layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub n_classes: usize,
    pub layers: Vec<LayerConfig>,
}

/// Identity card carried by a model: a display name and, for TAConv
/// variants, the transform kind built into the network (drives the
/// seen/unseen flags in robustness reports).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelMeta {
    pub name: String,
    pub taconv: Option<TransformKind>,
}

/// Reference desk architecture: four convolutional layers, relu after each,
/// global average pooling and a linear head. With `taconv` set, the first
/// layer becomes a TAConv with a complete basis and four transformed
/// branches (geometric intensity ramp).
pub fn desk_network(
    input_channels: usize,
    n_classes: usize,
    taconv: Option<TransformKind>,
    seed: u64,
) -> NetworkConfig {
    let first = match taconv {
        None => LayerConfig::Conv(ConvConfig { out_ch: 12, k: 5, stride: 1, pad: 2 }),
        Some(kind) => LayerConfig::TaConv(TAConvConfig {
            out_ch: 12,
            k: 5,
            stride: 1,
            pad: 2,
            n_basis: 25,
            sigma: 1.5,
            branches: crate::transforms::default_branch_specs(kind, 4, derive_seed(seed, "bank")),
        }),
    };
    NetworkConfig {
        input_channels,
        n_classes,
        layers: vec![
            first,
            LayerConfig::Conv(ConvConfig { out_ch: 16, k: 3, stride: 2, pad: 1 }),
            LayerConfig::Conv(ConvConfig { out_ch: 24, k: 3, stride: 2, pad: 1 }),
            LayerConfig::Conv(ConvConfig { out_ch: 24, k: 3, stride: 1, pad: 1 }),
        ],
    }
}

// ---------------------------------------------------------------------------
// Runtime layers

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor, // [O,C,k,k]
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct TAConvLayer {
    pub w: Tensor,    // [O,C,n_basis]
    pub beta: Tensor, // [B]
    pub bank: Arc<BasisBank>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Tensor, // [O,C,k,k], stride applies here
    pub conv2: Tensor, // [O,O,k,k]
    pub skip: Option<Tensor>, // [O,C,1,1] when channels or stride change
    pub stride: usize,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct TAResBlock {
    pub w1: Tensor,   // [O,C,n_basis]
    pub w2: Tensor,   // [O,O,n_basis]
    pub beta: Tensor, // [B], shared by both convs
    pub bank: Arc<BasisBank>,
    pub skip: Option<Tensor>, // plain 1x1, copied verbatim on transfer
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    TaConv(TAConvLayer),
    ResBlock(ResBlock),
    TaResBlock(TAResBlock),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub meta: ModelMeta,
    pub layers: Vec<Layer>,
    pub head_weight: Tensor, // [C_last, n_classes]
    pub head_bias: Tensor,   // [n_classes]
}

/// Node ids of one forward pass, aligned with [`Model::params`] order.
pub struct ForwardPass {
    pub logits: NodeId,
    pub param_ids: Vec<NodeId>,
}

fn he_kernel(out_ch: usize, in_ch: usize, k: usize, rng: &mut impl rand::Rng) -> Tensor {
    let std = (2.0 / (in_ch * k * k) as f64).sqrt();
    Tensor::randn(vec![out_ch, in_ch, k, k], std, rng).with_grad()
}

/// Basis weights obtained by projecting He-initialized kernels onto the
/// branch-0 basis; with a complete basis a fresh TAConv therefore computes
/// the same function as a fresh standard conv drawn from the same seed.
fn projected_init(
    out_ch: usize,
    in_ch: usize,
    bank: &BasisBank,
    rng: &mut impl rand::Rng,
) -> Result<Tensor> {
    let k = bank.k;
    let kernels = he_kernel(out_ch, in_ch, k, rng);
    let stack = bank.branch_stack(0);
    let mut w = Vec::with_capacity(out_ch * in_ch * bank.n_basis);
    for oc in 0..out_ch * in_ch {
        let slice = &kernels.data[oc * k * k..(oc + 1) * k * k];
        w.extend(project_kernel(&stack, slice)?);
    }
    Ok(Tensor::new(vec![out_ch, in_ch, bank.n_basis], w)?.with_grad())
}

fn fresh_beta(branches: usize) -> Tensor {
    let mut beta = vec![0.0; branches];
    beta[0] = 1.0;
    Tensor::new(vec![branches], beta).unwrap().with_grad()
}

fn build_bank(k: usize, sigma: f64, n_basis: usize, branches: &[TransformSpec]) -> Result<Arc<BasisBank>> {
    let spec = BasisSpec::with_count(k, sigma, n_basis)?;
    let base = eval_basis(&spec, &make_grid(k)?)?;
    Ok(Arc::new(build_transform_bank(&base, branches)?))
}

impl Model {
    /// Assemble a model from its configuration, with seeded initialization.
    pub fn new(config: NetworkConfig, meta: ModelMeta, seed: u64) -> Result<Self> {
        if config.layers.is_empty() {
            return Err(Error::Usage("network needs at least one layer".into()));
        }
        let mut rng = rng_from(derive_seed(seed, "init"));
        let mut in_ch = config.input_channels;
        let mut layers = Vec::with_capacity(config.layers.len());
        for lc in &config.layers {
            let layer = match lc {
                LayerConfig::Conv(c) => {
                    let l = Layer::Conv(ConvLayer {
                        kernel: he_kernel(c.out_ch, in_ch, c.k, &mut rng),
                        stride: c.stride,
                        pad: c.pad,
                    });
                    in_ch = c.out_ch;
                    l
                }
                LayerConfig::TaConv(c) => {
                    let bank = build_bank(c.k, c.sigma, c.n_basis, &c.branches)?;
                    let w = projected_init(c.out_ch, in_ch, &bank, &mut rng)?;
                    let l = Layer::TaConv(TAConvLayer {
                        w,
                        beta: fresh_beta(bank.branches()),
                        bank,
                        stride: c.stride,
                        pad: c.pad,
                    });
                    in_ch = c.out_ch;
                    l
                }
                LayerConfig::ResBlock(c) => {
                    let conv1 = he_kernel(c.out_ch, in_ch, c.k, &mut rng);
                    let conv2 = he_kernel(c.out_ch, c.out_ch, c.k, &mut rng);
                    let skip = (in_ch != c.out_ch || c.stride != 1)
                        .then(|| he_kernel(c.out_ch, in_ch, 1, &mut rng));
                    let l = Layer::ResBlock(ResBlock { conv1, conv2, skip, stride: c.stride, k: c.k });
                    in_ch = c.out_ch;
                    l
                }
                LayerConfig::TaResBlock(c) => {
                    let bank = build_bank(c.k, c.sigma, c.n_basis, &c.branches)?;
                    let w1 = projected_init(c.out_ch, in_ch, &bank, &mut rng)?;
                    let w2 = projected_init(c.out_ch, c.out_ch, &bank, &mut rng)?;
                    let skip = (in_ch != c.out_ch || c.stride != 1)
                        .then(|| he_kernel(c.out_ch, in_ch, 1, &mut rng));
                    let l = Layer::TaResBlock(TAResBlock {
                        w1,
                        w2,
                        beta: fresh_beta(bank.branches()),
                        bank,
                        skip,
                        stride: c.stride,
                    });
                    in_ch = c.out_ch;
                    l
                }
            };
            layers.push(layer);
        }
        let head_weight = Tensor::randn(
            vec![in_ch, config.n_classes],
            (1.0 / in_ch as f64).sqrt(),
            &mut rng,
        )
        .with_grad();
        let head_bias = Tensor::zeros(vec![config.n_classes]).with_grad();
        Ok(Model { config, meta, layers, head_weight, head_bias })
    }

    /// Trainable tensors in a fixed, documented order: per layer its kernels
    /// (and beta), then the head weight and bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(l) => out.push(&l.kernel),
                Layer::TaConv(l) => {
                    out.push(&l.w);
                    out.push(&l.beta);
                }
                Layer::ResBlock(l) => {
                    out.push(&l.conv1);
                    out.push(&l.conv2);
                    if let Some(s) = &l.skip {
                        out.push(s);
                    }
                }
                Layer::TaResBlock(l) => {
                    out.push(&l.w1);
                    out.push(&l.w2);
                    out.push(&l.beta);
                    if let Some(s) = &l.skip {
                        out.push(s);
                    }
                }
            }
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(l) => out.push(&mut l.kernel),
                Layer::TaConv(l) => {
                    out.push(&mut l.w);
                    out.push(&mut l.beta);
                }
                Layer::ResBlock(l) => {
                    out.push(&mut l.conv1);
                    out.push(&mut l.conv2);
                    if let Some(s) = &mut l.skip {
                        out.push(s);
                    }
                }
                Layer::TaResBlock(l) => {
                    out.push(&mut l.w1);
                    out.push(&mut l.w2);
                    out.push(&mut l.beta);
                    if let Some(s) = &mut l.skip {
                        out.push(s);
                    }
                }
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// SHA-256 over the little-endian parameter payload in `params` order.
    pub fn param_hash(&self) -> String {
        let mut bytes = Vec::new();
        for p in self.params() {
            bytes.extend(f64_le_bytes(&p.data));
        }
        sha256_hex(&bytes)
    }

    /// Record the whole network on `tape`. Input must be `[N,C,H,W]` in
    /// `[0,1]`; a fixed normalization to `[-1,1]` is the first op (bias-free
    /// convs otherwise see only nonnegative inputs, which makes dead relus
    /// unrecoverable).
    pub fn forward(&self, tape: &mut Tape, input: NodeId) -> Result<ForwardPass> {
        let mut param_ids = Vec::new();
        let mut x = tape.affine(input, 2.0, -1.0)?;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(l) => {
                    let k = tape.leaf(&l.kernel)?;
                    param_ids.push(k);
                    let y = tape.conv2d(x, k, l.stride, l.pad)?;
                    tape.relu(y)?
                }
                Layer::TaConv(l) => {
                    // No trailing relu: with beta = [1, 0, ...] the max over
                    // the zero branches is exactly relu of the branch-0
                    // convolution, so the fresh layer matches conv+relu
                    // bit-for-bit while the zero-branch ties keep routing
                    // gradient to the beta coefficients. A relu after the max
                    // would gate those very pixels (subgradient 0 at 0) and
                    // freeze every inactive branch forever.
                    let w = tape.leaf(&l.w)?;
                    let beta = tape.leaf(&l.beta)?;
                    param_ids.push(w);
                    param_ids.push(beta);
                    taconv_forward(tape, l, x, w, beta)?
                }
                Layer::ResBlock(l) => {
                    let c1 = tape.leaf(&l.conv1)?;
                    let c2 = tape.leaf(&l.conv2)?;
                    param_ids.push(c1);
                    param_ids.push(c2);
                    let skip = match &l.skip {
                        Some(s) => {
                            let sid = tape.leaf(s)?;
                            param_ids.push(sid);
                            Some(sid)
                        }
                        None => None,
                    };
                    resblock_forward(tape, l, x, c1, c2, skip)?
                }
                Layer::TaResBlock(l) => {
                    let w1 = tape.leaf(&l.w1)?;
                    let w2 = tape.leaf(&l.w2)?;
                    let beta = tape.leaf(&l.beta)?;
                    param_ids.push(w1);
                    param_ids.push(w2);
                    param_ids.push(beta);
                    let skip = match &l.skip {
                        Some(s) => {
                            let sid = tape.leaf(s)?;
                            param_ids.push(sid);
                            Some(sid)
                        }
                        None => None,
                    };
                    taresblock_forward(tape, l, x, w1, w2, beta, skip)?
                }
            };
        }
        let pooled = tape.global_avg_pool(x)?;
        let hw = tape.leaf(&self.head_weight)?;
        let hb = tape.leaf(&self.head_bias)?;
        param_ids.push(hw);
        param_ids.push(hb);
        let logits = tape.linear(pooled, hw, hb)?;
        Ok(ForwardPass { logits, param_ids })
    }

    /// Accumulate tape gradients back into the model parameters.
    pub fn apply_grads(&mut self, tape: &Tape, pass: &ForwardPass) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != pass.param_ids.len() {
            return Err(Error::Usage("forward pass does not match model parameters".into()));
        }
        for (p, &id) in params.iter_mut().zip(&pass.param_ids) {
            match tape.grad(id) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.accumulate_grad(&vec![0.0; p.numel()])?,
            }
        }
        Ok(())
    }

    /// Plain inference: logits for a batch, no gradient bookkeeping.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.shape.clone(), images.data.clone())?;
        let pass = self.forward(&mut tape, x)?;
        Ok(tape.tensor(pass.logits))
    }

    /// Argmax predictions for a batch `[N,C,H,W]`.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        let n = logits.shape[0];
        let k = logits.shape[1];
        Ok((0..n)
            .map(|i| {
                let row = &logits.data[i * k..(i + 1) * k];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap()
            })
            .collect())
    }
}

/// Eq.-5-style forward for one TAConv layer: per branch, synthesize kernels
/// from the shared weights against that branch's basis, convolve, scale by
/// `beta[b]`, then take the per-pixel max across branches.
pub fn taconv_forward(
    tape: &mut Tape,
    layer: &TAConvLayer,
    input: NodeId,
    w: NodeId,
    beta: NodeId,
) -> Result<NodeId> {
    let bank = &layer.bank;
    let mut branches = Vec::with_capacity(bank.branches());
    for b in 0..bank.branches() {
        let kernel = tape.synth_kernel(w, bank.branch_arc(b), bank.n_basis, bank.k)?;
        let conv = tape.conv2d(input, kernel, layer.stride, layer.pad)?;
        branches.push(tape.scale_index(conv, beta, b)?);
    }
    tape.branch_max(&branches)
}

/// Standard residual block `f + G(f)` with `G = relu(conv2(relu(conv1(f))))`.
/// The relu is the last op inside `G`, so `G >= 0`.
pub fn resblock_forward(
    tape: &mut Tape,
    layer: &ResBlock,
    input: NodeId,
    conv1: NodeId,
    conv2: NodeId,
    skip: Option<NodeId>,
) -> Result<NodeId> {
    let pad = layer.k / 2;
    let h1 = tape.conv2d(input, conv1, layer.stride, pad)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.conv2d(h1, conv2, 1, pad)?;
    let g = tape.relu(h2)?;
    let skip_out = match skip {
        Some(s) => tape.conv2d(input, s, layer.stride, 0)?,
        None => input,
    };
    tape.add(skip_out, g)
}

/// Eq.-14-style residual block: `G` is computed per branch with that
/// branch's transformed kernels throughout, scaled by the shared `beta[b]`,
/// max-combined, then added to the skip path.
///
/// The per-branch `G` intentionally ends *without* the final relu that the
/// standard block applies: the max against the zero branches supplies it at
/// initialization (`max(G_0, 0, ...) == relu(G_0)` exactly), and because
/// `G_0` can be negative, the zero branches keep winning ties and the shared
/// beta coefficients receive gradient.
pub fn taresblock_forward(
    tape: &mut Tape,
    layer: &TAResBlock,
    input: NodeId,
    w1: NodeId,
    w2: NodeId,
    beta: NodeId,
    skip: Option<NodeId>,
) -> Result<NodeId> {
    let bank = &layer.bank;
    let pad = bank.k / 2;
    let mut branches = Vec::with_capacity(bank.branches());
    for b in 0..bank.branches() {
        let k1 = tape.synth_kernel(w1, bank.branch_arc(b), bank.n_basis, bank.k)?;
        let k2 = tape.synth_kernel(w2, bank.branch_arc(b), bank.n_basis, bank.k)?;
        let h1 = tape.conv2d(input, k1, layer.stride, pad)?;
        let h1 = tape.relu(h1)?;
        let g = tape.conv2d(h1, k2, 1, pad)?;
        branches.push(tape.scale_index(g, beta, b)?);
    }
    let m = tape.branch_max(&branches)?;
    let skip_out = match skip {
        Some(s) => tape.conv2d(input, s, layer.stride, 0)?,
        None => input,
    };
    tape.add(skip_out, m)
}

// ---------------------------------------------------------------------------
// Weight transfer

/// Initialize a TAConv network from a trained standard network so that the
/// two compute the same function: branch coefficients reset to
/// `[1, 0, ..., 0]`, kernels of matching size projected onto the branch-0
/// basis, 1x1 convolutions copied verbatim.
pub fn weight_transfer(standard: &Model, target: &mut Model) -> Result<()> {
    if standard.config.layers.len() != target.config.layers.len()
        || standard.config.input_channels != target.config.input_channels
        || standard.config.n_classes != target.config.n_classes
    {
        return Err(Error::Usage("weight transfer: architectures do not correspond".into()));
    }
    for (i, (src, dst)) in standard.layers.iter().zip(target.layers.iter_mut()).enumerate() {
        match (src, dst) {
            (Layer::Conv(s), Layer::Conv(d)) => {
                if s.kernel.shape != d.kernel.shape {
                    return Err(Error::Usage(format!("layer {}: kernel shapes differ", i)));
                }
                d.kernel.data = s.kernel.data.clone();
            }
            (Layer::Conv(s), Layer::TaConv(d)) => {
                d.w = project_onto_bank(&s.kernel, &d.bank, i)?;
                d.beta = fresh_beta(d.bank.branches());
            }
            (Layer::ResBlock(s), Layer::ResBlock(d)) => {
                if s.conv1.shape != d.conv1.shape || s.conv2.shape != d.conv2.shape {
                    return Err(Error::Usage(format!("layer {}: block shapes differ", i)));
                }
                d.conv1.data = s.conv1.data.clone();
                d.conv2.data = s.conv2.data.clone();
                transfer_skip(&s.skip, &mut d.skip, i)?;
            }
            (Layer::ResBlock(s), Layer::TaResBlock(d)) => {
                d.w1 = project_onto_bank(&s.conv1, &d.bank, i)?;
                d.w2 = project_onto_bank(&s.conv2, &d.bank, i)?;
                d.beta = fresh_beta(d.bank.branches());
                transfer_skip(&s.skip, &mut d.skip, i)?;
            }
            _ => {
                return Err(Error::Usage(format!(
                    "layer {}: unsupported source/target pairing for transfer",
                    i
                )));
            }
        }
    }
    if standard.head_weight.shape != target.head_weight.shape {
        return Err(Error::Usage("weight transfer: head shapes differ".into()));
    }
    target.head_weight.data = standard.head_weight.data.clone();
    target.head_bias.data = standard.head_bias.data.clone();
    Ok(())
}

fn transfer_skip(src: &Option<Tensor>, dst: &mut Option<Tensor>, layer: usize) -> Result<()> {
    match (src, dst) {
        (None, None) => Ok(()),
        (Some(s), Some(d)) => {
            if s.shape != d.shape {
                return Err(Error::Usage(format!("layer {}: skip shapes differ", layer)));
            }
            d.data = s.data.clone();
            Ok(())
        }
        _ => Err(Error::Usage(format!("layer {}: skip presence differs", layer))),
    }
}

fn project_onto_bank(kernel: &Tensor, bank: &BasisBank, layer: usize) -> Result<Tensor> {
    let k = bank.k;
    if kernel.shape.len() != 4 || kernel.shape[2] != k || kernel.shape[3] != k {
        return Err(Error::Usage(format!(
            "layer {}: kernel {:?} does not match bank size {}",
            layer, kernel.shape, k
        )));
    }
    let (o, c) = (kernel.shape[0], kernel.shape[1]);
    let stack = bank.branch_stack(0);
    let kk = k * k;
    let mut w = Vec::with_capacity(o * c * bank.n_basis);
    for oc in 0..o * c {
        let slice = &kernel.data[oc * kk..(oc + 1) * kk];
        let coeffs = project_kernel(&stack, slice)?;
        let rec = synthesize_kernel(&coeffs, &stack)?;
        let err: f64 = rec
            .iter()
            .zip(slice)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
        if err > 1e-8 * (1.0 + norm) {
            return Err(Error::Numerical(format!(
                "layer {}: basis cannot represent the kernel (residual {:.3e}); \
                 transfer needs a complete basis",
                layer, err
            )));
        }
        w.extend(coeffs);
    }
    Ok(Tensor::new(vec![o, c, bank.n_basis], w)?.with_grad())
}

// ---------------------------------------------------------------------------
// Checkpoint IO

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetworkConfig,
    meta: ModelMeta,
}

impl Model {
    /// Versioned binary container: magic bytes, little-endian shape table,
    /// raw f64 parameter payload, then the network/bank description as
    /// canonical JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let params = self.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in &params {
            out.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for p in &params {
            out.extend(f64_le_bytes(&p.data));
        }
        let header = CheckpointHeader { config: self.config.clone(), meta: self.meta.clone() };
        let json = crate::util::canonical_json(&header)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Data(format!(
                    "checkpoint truncated at offset {} (wanted {} bytes)",
                    *pos, n
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 5)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Data(format!(
                "bad checkpoint magic at offset 0: {:?}",
                &magic
            )));
        }
        let read_u64 = |pos: &mut usize| -> Result<u64> {
            let b = take(pos, 8)?;
            Ok(u64::from_le_bytes(b.try_into().unwrap()))
        };
        let n_tensors = read_u64(&mut pos)? as usize;
        let mut shapes = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let rank = read_u64(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut pos)? as usize);
            }
            shapes.push(shape);
        }
        let mut payloads: Vec<Vec<f64>> = Vec::with_capacity(n_tensors);
        for shape in &shapes {
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            payloads.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
        }
        let json_len = read_u64(&mut pos)? as usize;
        let json = take(&mut pos, json_len)?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        let mut model = Model::new(header.config, header.meta, 0)?;
        {
            let mut params = model.params_mut();
            if params.len() != n_tensors {
                return Err(Error::Data(format!(
                    "checkpoint has {} tensors, model expects {}",
                    n_tensors,
                    params.len()
                )));
            }
            for ((p, shape), data) in params.iter_mut().zip(shapes).zip(payloads) {
                if p.shape != shape {
                    return Err(Error::Data(format!(
                        "checkpoint tensor shape {:?} does not match model {:?}",
                        shape, p.shape
                    )));
                }
                p.data = data;
            }
        }
        Ok(model)
    }
}
