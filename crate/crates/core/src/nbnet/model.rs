use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BlockKind, BlockSpec, NetworkSpec};
use crate::checkpoint::Checkpoint;
use crate::data::FaceImage;
use crate::extractor::Template;
use crate::nn::ops::concat_channels;
use crate::nn::{
    count_params, Activation, BatchNorm2d, BnCache, Conv2d, Conv2dCache, ConvTranspose2d, DeconvCache, Init, Mode,
    Parameterized, Real,
};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "nbnet";

/// Convolution (or de-convolution) followed by batch-norm; the ReLU is applied by the block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvOp<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub spec: BlockSpec,
    pub dconv: ConvTranspose2d<T>,
    pub dconv_bn: BatchNorm2d<T>,
    pub convops: Vec<ConvOp<T>>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    dconv: DeconvCache<T>,
    dconv_bn: BnCache<T>,
    x_dconv: Array4<T>,
    convops: Vec<(Conv2dCache<T>, BnCache<T>, Array4<T>)>,
}

/// Intermediate tensors of one block, in concatenation order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockActivation<T> {
    pub x_dconv: Array4<T>,
    pub x_convops: Vec<Array4<T>>,
    pub concatenated: Array4<T>,
}

fn relu<T: Real>(x: &Array4<T>) -> Array4<T> {
    Activation::Relu.apply(x)
}

/// ReLU backward from the output alone: `y > 0` exactly where `x > 0`.
fn relu_back<T: Real>(y: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
    Activation::Relu.backward(y, y, gy)
}

fn split_channels<T: Real>(g: &Array4<T>, widths: &[usize]) -> Vec<Array4<T>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let part = g.slice(s![.., start..start + w, .., ..]).to_owned();
            start += w;
            part
        })
        .collect()
}

impl<T: Real> Block<T> {
    fn new<R: Rng + ?Sized>(spec: &BlockSpec, in_ch: usize, bias: bool, affine: bool, init: Init, rng: &mut R) -> Self {
        let half = spec.dconv_channels();
        let dconv = ConvTranspose2d::new(
            in_ch,
            half,
            spec.dconv_kernel,
            spec.dconv_stride,
            spec.dconv_pad,
            spec.dconv_output_pad,
            bias,
            init,
            rng,
        );
        let convops = spec
            .convop_input_channels()
            .into_iter()
            .map(|c_in| ConvOp {
                conv: Conv2d::new(
                    c_in,
                    spec.convop_channels,
                    spec.convop_kernel,
                    1,
                    spec.convop_kernel / 2,
                    bias,
                    init,
                    rng,
                ),
                bn: BatchNorm2d::new(spec.convop_channels, affine),
            })
            .collect();
        Self { spec: spec.clone(), dconv, dconv_bn: BatchNorm2d::new(half, affine), convops }
    }

    pub fn in_channels(&self) -> usize {
        self.dconv.in_channels()
    }

    /// Input widths of the ConvOPs as built.
    pub fn convop_input_channels(&self) -> Vec<usize> {
        self.convops.iter().map(|op| op.conv.in_channels()).collect()
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, BlockCache<T>)> {
        let c = x.dim().1;
        if c != self.in_channels() {
            return Err(Error::Shape { expected: format!("{} input channels", self.in_channels()), actual: format!("{c}") });
        }
        let (d, dconv) = self.dconv.forward(x);
        let (d, dconv_bn) = self.dconv_bn.forward(&d, mode);
        let x_dconv = relu(&d);
        let mut outs: Vec<Array4<T>> = Vec::with_capacity(self.convops.len());
        let mut convops = Vec::with_capacity(self.convops.len());
        for (p, op) in self.convops.iter().enumerate() {
            let input = match self.spec.kind {
                BlockKind::NbA if p > 0 => outs[p - 1].clone(),
                BlockKind::NbB if p > 0 => {
                    let mut parts = vec![&x_dconv];
                    parts.extend(outs.iter());
                    concat_channels(&parts)
                }
                _ => x_dconv.clone(),
            };
            let (y, cc) = op.conv.forward(&input);
            let (y, bc) = op.bn.forward(&y, mode);
            let y = relu(&y);
            outs.push(y.clone());
            convops.push((cc, bc, y));
        }
        let out = if outs.is_empty() {
            x_dconv.clone()
        } else {
            let mut parts = vec![&x_dconv];
            parts.extend(outs.iter());
            concat_channels(&parts)
        };
        Ok((out, BlockCache { dconv, dconv_bn, x_dconv, convops }))
    }

    pub fn activation(cache: &BlockCache<T>, out: &Array4<T>) -> BlockActivation<T> {
        BlockActivation {
            x_dconv: cache.x_dconv.clone(),
            x_convops: cache.convops.iter().map(|(_, _, y)| y.clone()).collect(),
            concatenated: out.clone(),
        }
    }

    pub fn backward(&self, cache: &BlockCache<T>, gy: &Array4<T>, mut grad: Option<&mut Self>) -> Array4<T> {
        let half = self.spec.dconv_channels();
        let mut widths = vec![half];
        widths.extend(std::iter::repeat(self.spec.convop_channels).take(self.convops.len()));
        let mut g = split_channels(gy, &widths);
        for p in (0..self.convops.len()).rev() {
            let (cc, bc, y) = &cache.convops[p];
            let op = &self.convops[p];
            let gop = grad.as_deref_mut().map(|b| &mut b.convops[p]);
            let gz = relu_back(y, &g[p + 1]);
            let (gbn, gconv) = match gop {
                Some(o) => (Some(&mut o.bn), Some(&mut o.conv)),
                None => (None, None),
            };
            let gz = op.bn.backward(bc, &gz, gbn);
            let gin = op.conv.backward(cc, &gz, gconv);
            match self.spec.kind {
                BlockKind::NbA => g[p] += &gin,
                BlockKind::NbB => {
                    let mut w = vec![half];
                    w.extend(std::iter::repeat(self.spec.convop_channels).take(p));
                    for (i, part) in split_channels(&gin, &w).into_iter().enumerate() {
                        g[i] += &part;
                    }
                }
                BlockKind::Plain => unreachable!("plain blocks have no ConvOPs"),
            }
        }
        let gz = relu_back(&cache.x_dconv, &g[0]);
        let (gbn, gdconv) = match grad {
            Some(b) => (Some(&mut b.dconv_bn), Some(&mut b.dconv)),
            None => (None, None),
        };
        let gz = self.dconv_bn.backward(&cache.dconv_bn, &gz, gbn);
        self.dconv.backward(&cache.dconv, &gz, gdconv)
    }

    pub fn absorb(&mut self, cache: &BlockCache<T>) {
        self.dconv_bn.absorb(&cache.dconv_bn);
        for (op, (_, bc, _)) in self.convops.iter_mut().zip(&cache.convops) {
            op.bn.absorb(bc);
        }
    }
}

impl<T: Real> Parameterized<T> for Block<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&[T])) {
        self.dconv.visit_params(f);
        self.dconv_bn.visit_params(f);
        for op in &self.convops {
            op.conv.visit_params(f);
            op.bn.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.dconv.visit_params_mut(f);
        self.dconv_bn.visit_params_mut(f);
        for op in &mut self.convops {
            op.conv.visit_params_mut(f);
            op.bn.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&[T])) {
        self.dconv_bn.visit_buffers(f);
        self.convops.iter().for_each(|op| op.bn.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.dconv_bn.visit_buffers_mut(f);
        self.convops.iter_mut().for_each(|op| op.bn.visit_buffers_mut(f));
    }
}

/// Runs one block and exposes its intermediate tensors.
pub fn block_forward<T: Real>(block: &Block<T>, input: &Array4<T>, mode: Mode) -> Result<BlockActivation<T>> {
    let (out, cache) = block.forward(input, mode)?;
    Ok(Block::activation(&cache, &out))
}

/// The map `g: template -> image`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionModel<T> {
    pub spec: NetworkSpec,
    pub blocks: Vec<Block<T>>,
    /// Bottom ConvOP; its activation is tanh.
    pub final_conv: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    final_conv: Conv2dCache<T>,
    output: Array4<T>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: NetworkSpec,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Instantiates `spec` with weights drawn from `init` and batch-norm at unit scale, zero shift.
pub fn build_network<T: Real, R: Rng + ?Sized>(spec: &NetworkSpec, init: Init, rng: &mut R) -> Result<ReconstructionModel<T>> {
    spec.validate()?;
    let mut in_ch = spec.input_dim;
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for b in &spec.blocks {
        blocks.push(Block::new(b, in_ch, spec.conv_bias, spec.bn_affine, init, rng));
        in_ch = b.out_channels;
    }
    let final_conv =
        Conv2d::new(in_ch, spec.out_channels, spec.final_kernel, 1, spec.final_kernel / 2, spec.conv_bias, init, rng);
    Ok(ReconstructionModel { spec: spec.clone(), blocks, final_conv })
}

/// Trainable parameters: weights, biases and batch-norm scale/shift; running statistics excluded.
pub fn count_parameters<T: Real>(model: &ReconstructionModel<T>) -> usize {
    count_params(model)
}

impl<T: Real> ReconstructionModel<T> {
    /// A zero-initialised model, ready to receive checkpointed weights.
    pub fn zeroed(spec: &NetworkSpec) -> Result<Self> {
        build_network(spec, Init::Normal { std: 0.0 }, &mut rand::rngs::mock::StepRng::new(0, 1))
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_size(&self) -> usize {
        self.spec.output_size()
    }

    /// Forward pass from templates of shape `(n, input_dim)`.
    pub fn forward(&self, templates: ArrayView2<T>, mode: Mode) -> Result<(Array4<T>, ModelCache<T>)> {
        let (n, d) = templates.dim();
        if d != self.spec.input_dim {
            return Err(Error::Shape { expected: format!("template dimension {}", self.spec.input_dim), actual: format!("{d}") });
        }
        let x = templates.as_standard_layout().to_owned().into_shape_with_order((n, d, 1, 1)).expect("reshape");
        self.forward_tensor(&x, mode)
    }

    pub fn forward_tensor(&self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, ModelCache<T>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&cur, mode)?;
            caches.push(c);
            cur = y;
        }
        let (y, final_conv) = self.final_conv.forward(&cur);
        let out = y.mapv(T::tanh);
        Ok((out.clone(), ModelCache { blocks: caches, final_conv, output: out }))
    }

    /// Inference-mode images for a batch of templates.
    pub fn infer(&self, templates: ArrayView2<T>) -> Result<Array4<T>> {
        Ok(self.forward(templates, Mode::Eval)?.0)
    }

    /// Backpropagates `gy` (gradient w.r.t. the output image) and returns the template gradient
    /// in `(n, input_dim, 1, 1)` layout.
    pub fn backward(&self, cache: &ModelCache<T>, gy: &Array4<T>, mut grad: Option<&mut Self>) -> Array4<T> {
        let gz = ndarray::Zip::from(gy).and(&cache.output).map_collect(|&g, &o| g * (T::one() - o * o));
        let mut g = self.final_conv.backward(&cache.final_conv, &gz, grad.as_deref_mut().map(|m| &mut m.final_conv));
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            g = block.backward(bc, &g, grad.as_deref_mut().map(|m| &mut m.blocks[i]));
        }
        g
    }

    /// Folds batch-norm statistics from a training-mode forward pass into the running averages.
    pub fn absorb(&mut self, cache: &ModelCache<T>) {
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.absorb(c);
        }
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value, tensors: &[Vec<T>]) -> Checkpoint {
        let meta = serde_json::to_value(CheckpointMeta { spec: self.spec.clone(), extra }).expect("meta serializes");
        Checkpoint::build(CHECKPOINT_KIND, meta, self, tensors)
    }

    /// Rebuilds a model from a checkpoint that embeds its spec.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, serde_json::Value, Vec<Vec<T>>)> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = ck.meta()?;
        let mut model = Self::zeroed(&meta.spec)?;
        let extra = ck.restore(&mut model)?;
        Ok((model, meta.extra, extra))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(serde_json::Value::Null, &[]).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::read(path)?)?.0)
    }
}

impl ReconstructionModel<f32> {
    /// Reconstructs one face image from a template.
    pub fn reconstruct(&self, template: &Template) -> Result<FaceImage> {
        let d = template.vector.len();
        let row = Array2::from_shape_vec((1, d), template.vector.clone()).expect("row vector");
        let img = self.infer(row.view())?;
        let pixels = img.index_axis_move(Axis(0), 0).mapv(|v| v.clamp(-1.0, 1.0));
        FaceImage::new(pixels, template.subject_id.clone(), template.sample_id.clone())
    }
}

impl<T: Real> Parameterized<T> for ReconstructionModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&[T])) {
        self.blocks.iter().for_each(|b| b.visit_params(f));
        self.final_conv.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.final_conv.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&[T])) {
        self.blocks.iter().for_each(|b| b.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.blocks.iter_mut().for_each(|b| b.visit_buffers_mut(f));
    }
}

/// Reconstructs one face image from a template.
pub fn reconstruct(model: &ReconstructionModel<f32>, template: &Template) -> Result<FaceImage> {
    model.reconstruct(template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbnet::{canonical_spec, desk_spec, Arch, LossKind};
    use crate::nn::gradcheck::{central_difference, relative_error};
    use crate::nn::{flatten_params, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(arch: Arch) -> NetworkSpec {
        let kind = arch.block_kind();
        let block = |c: usize, k: usize, pad: usize| BlockSpec {
            kind,
            out_channels: c,
            dconv_kernel: k,
            dconv_stride: 2,
            dconv_pad: pad,
            dconv_output_pad: 0,
            convop_channels: 2,
            convop_count: if kind == BlockKind::Plain { 0 } else { c / 4 },
            convop_kernel: 3,
        };
        NetworkSpec {
            arch,
            input_dim: 3,
            blocks: vec![block(8, 3, 0), block(4, 4, 1)],
            final_kernel: 3,
            out_channels: 2,
            conv_bias: true,
            bn_affine: true,
            loss_kind: LossKind::Pixel,
        }
    }

    #[test]
    fn canonical_dcnn_parameter_count() {
        let m = ReconstructionModel::<f32>::zeroed(&canonical_spec(Arch::Dcnn)).unwrap();
        assert_eq!(count_parameters(&m), 4_432_304);
    }

    #[test]
    fn nb_block_wiring() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for arch in [Arch::NbnetA, Arch::NbnetB] {
            let spec = desk_spec(arch, 16);
            let m: ReconstructionModel<f64> = build_network(&spec, Init::Normal { std: 0.02 }, &mut rng).unwrap();
            let x = Array4::from_shape_fn((2, 16, 1, 1), |(i, j, _, _)| (i + j) as f64 * 0.1);
            let act = block_forward(&m.blocks[0], &x, Mode::Train).unwrap();
            assert_eq!(act.x_dconv.dim(), (2, 32, 4, 4));
            assert_eq!(act.x_convops.len(), 8);
            assert_eq!(act.concatenated.dim().1, 32 + 8 * 4);
            assert_eq!(act.concatenated.slice(s![.., ..32, .., ..]), act.x_dconv);
            assert_eq!(act.concatenated.slice(s![.., 36..40, .., ..]), act.x_convops[1]);
            let expected: Vec<usize> = match arch {
                Arch::NbnetA => vec![32, 4, 4, 4, 4, 4, 4, 4],
                _ => (0..8).map(|p| 32 + 4 * p).collect(),
            };
            assert_eq!(m.blocks[0].convop_input_channels(), expected);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for arch in Arch::ALL {
            let spec = tiny_spec(arch);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let model: ReconstructionModel<f64> = build_network(&spec, Init::Normal { std: 0.3 }, &mut rng).unwrap();
            let t = Array2::from_shape_fn((3, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7).sin());
            let target = Array4::from_shape_fn((3, 2, 6, 6), |(a, b, c, d)| ((a + 2 * b + 3 * c + d) as f64 * 0.3).cos() * 0.5);
            let loss = |m: &ReconstructionModel<f64>| {
                let (y, _) = m.forward(t.view(), Mode::Train).unwrap();
                (&y - &target).mapv(|v| v * v).sum() * 0.5
            };
            let (y, cache) = model.forward(t.view(), Mode::Train).unwrap();
            let mut grad = zeros_like(&model);
            model.backward(&cache, &(&y - &target), Some(&mut grad));
            let analytic = flatten_params(&grad);
            let mut flat = flatten_params(&model);
            let n = flat.len();
            for probe in 0..25 {
                let idx = (probe * 7919) % n;
                let numeric = central_difference(&mut flat, idx, 1e-5, |p| {
                    let mut m = model.clone();
                    let mut it = p.iter();
                    m.visit_params_mut(&mut |s| s.iter_mut().for_each(|v| *v = *it.next().unwrap()));
                    loss(&m)
                });
                let err = relative_error(analytic[idx], numeric);
                assert!(err < 1e-5 || (analytic[idx] - numeric).abs() < 1e-9, "{arch:?} param {idx}: {} vs {numeric}", analytic[idx]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m: ReconstructionModel<f32> = build_network(&desk_spec(Arch::NbnetB, 8), Init::Normal { std: 0.02 }, &mut rng).unwrap();
        let t = Array2::from_shape_fn((4, 8), |(i, j)| (i as f32 - j as f32) * 0.1);
        let (_, cache) = m.forward(t.view(), Mode::Train).unwrap();
        m.absorb(&cache);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = ReconstructionModel::<f32>::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.infer(t.view()).unwrap(), m.infer(t.view()).unwrap());
    }

    #[test]
    fn outputs_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m: ReconstructionModel<f32> = build_network(&desk_spec(Arch::Dcnn, 8), Init::Normal { std: 0.5 }, &mut rng).unwrap();
        let t = Array2::from_shape_fn((2, 8), |(i, _)| if i == 0 { 0.0 } else { 30.0 });
        let y = m.infer(t.view()).unwrap();
        assert_eq!(y.dim(), (2, 3, 32, 32));
        assert!(y.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        assert!(m.forward(Array2::zeros((1, 7)).view(), Mode::Eval).is_err());
    }
}
