use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutoencoderConfig, LatentTap};
use crate::error::{Error, Result};
use crate::tensor::{
    self, bilinear_upsample, bilinear_upsample_backward, conv2d_forward, relu, relu_backward,
    sigmoid, sigmoid_backward, ConvSpec, Scalar, Tensor,
};

const UPSAMPLE_FACTOR: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv<T> {
    fn zeros(c_in: usize, c_out: usize, spec: ConvSpec) -> Self {
        let k = spec.kernel_size;
        Self {
            weight: Tensor::zeros([c_out, c_in, k, k]),
            bias: Tensor::zeros([c_out]),
            spec,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.weight, self.bias.data(), &self.spec)
    }

    /// Returns the input gradient (if requested) and this layer's parameter gradients.
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        input: &Tensor<T>,
        need_input: bool,
        grads: &mut Conv<T>,
    ) -> Result<Option<Tensor<T>>> {
        let (gi, gw, gb) =
            tensor::conv::conv2d_backward_inner(grad_out, input, &self.weight, &self.spec, need_input)?;
        grads.weight = gw;
        grads.bias = Tensor::new([gb.len()], gb)?;
        Ok(gi)
    }
}

/// `y = x + relu(conv2(relu(conv1(x))))`; identity when both convolutions are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
}

struct BlockCache<T> {
    input: Tensor<T>,
    a1: Tensor<T>,
    h1: Tensor<T>,
    a2: Tensor<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn zeros(channels: usize, k: usize) -> Self {
        Self {
            conv1: Conv::zeros(channels, channels, ConvSpec::padded(k)),
            conv2: Conv::zeros(channels, channels, ConvSpec::padded(k)),
        }
    }

    fn forward(&self, x: Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let a1 = self.conv1.forward(&x)?;
        let h1 = relu(&a1);
        let a2 = self.conv2.forward(&h1)?;
        let y = x.add(&relu(&a2))?;
        Ok((y, BlockCache { input: x, a1, h1, a2 }))
    }

    fn backward(&self, g: Tensor<T>, cache: &BlockCache<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let g_a2 = relu_backward(&g, &cache.a2)?;
        let g_h1 = self
            .conv2
            .backward(&g_a2, &cache.h1, true, &mut grads.conv2)?
            .expect("input grad");
        let g_a1 = relu_backward(&g_h1, &cache.a1)?;
        let g_branch = self
            .conv1
            .backward(&g_a1, &cache.input, true, &mut grads.conv1)?
            .expect("input grad");
        g.add(&g_branch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage<T> {
    /// Stride-2 padded convolution.
    pub down: Conv<T>,
    pub blocks: Vec<ResidualBlock<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage<T> {
    /// Padded convolution applied after the 2x bilinear upsample.
    pub conv: Conv<T>,
    pub blocks: Vec<ResidualBlock<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel<T> {
    pub config: AutoencoderConfig,
    pub encoder: Vec<EncoderStage<T>>,
    /// Ordered from the latent outwards.
    pub decoder: Vec<DecoderStage<T>>,
    /// Final padded convolution to the input channels, followed by a sigmoid.
    pub head: Conv<T>,
}

struct ConvCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

struct StageCache<T> {
    conv: ConvCache<T>,
    blocks: Vec<BlockCache<T>>,
}

/// Intermediates recorded by a forward pass for the backward pass.
pub struct Trace<T> {
    encoder: Vec<StageCache<T>>,
    decoder: Vec<StageCache<T>>,
    head_input: Tensor<T>,
    pub output: Tensor<T>,
}

/// Builds a model with He-uniform weights and zero biases, deterministic in `seed`.
pub fn build_model<T: Scalar>(config: &AutoencoderConfig, seed: u64) -> Result<AutoencoderModel<T>> {
    let mut model = AutoencoderModel::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.weights_mut() {
        let shape = p.shape();
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in p.data_mut() {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
    }
    Ok(model)
}

impl<T: Scalar> AutoencoderModel<T> {
    /// A model whose weights and biases are all zero.
    pub fn zeros(config: &AutoencoderConfig) -> Result<Self> {
        let config = config.resolve()?;
        let k = config.kernel_size;
        let r = config.residual_blocks_per_stage;
        let encoder = (0..config.depth)
            .map(|s| {
                let cin = if s == 0 { config.input_shape.0 } else { config.stage_channels(s - 1) };
                let cout = config.stage_channels(s);
                EncoderStage {
                    down: Conv::zeros(cin, cout, ConvSpec::strided(k, 2)),
                    blocks: (0..r).map(|_| ResidualBlock::zeros(cout, k)).collect(),
                }
            })
            .collect();
        let decoder = (0..config.depth)
            .rev()
            .map(|s| {
                let cout = config.decoder_out_channels(s);
                DecoderStage {
                    conv: Conv::zeros(config.stage_channels(s), cout, ConvSpec::padded(k)),
                    blocks: (0..r).map(|_| ResidualBlock::zeros(cout, k)).collect(),
                }
            })
            .collect();
        let head = Conv::zeros(config.base_channels, config.input_shape.0, ConvSpec::padded(k));
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
        })
    }

    /// Same architecture with every parameter set to zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for p in out.parameters_mut() {
            p.data_mut().fill(T::zero());
        }
        out
    }

    fn convs(&self) -> Vec<(String, &Conv<T>)> {
        fn push_blocks<'a, T>(out: &mut Vec<(String, &'a Conv<T>)>, prefix: &str, blocks: &'a [ResidualBlock<T>]) {
            for (b, block) in blocks.iter().enumerate() {
                out.push((format!("{prefix}.block{b}.conv1"), &block.conv1));
                out.push((format!("{prefix}.block{b}.conv2"), &block.conv2));
            }
        }
        let mut out = Vec::new();
        for (s, stage) in self.encoder.iter().enumerate() {
            out.push((format!("encoder{s}.down"), &stage.down));
            push_blocks(&mut out, &format!("encoder{s}"), &stage.blocks);
        }
        for (s, stage) in self.decoder.iter().enumerate() {
            out.push((format!("decoder{s}.conv"), &stage.conv));
            push_blocks(&mut out, &format!("decoder{s}"), &stage.blocks);
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv<T>> {
        let mut out = Vec::new();
        for stage in &mut self.encoder {
            out.push(&mut stage.down);
            for block in &mut stage.blocks {
                out.push(&mut block.conv1);
                out.push(&mut block.conv2);
            }
        }
        for stage in &mut self.decoder {
            out.push(&mut stage.conv);
            for block in &mut stage.blocks {
                out.push(&mut block.conv1);
                out.push(&mut block.conv2);
            }
        }
        out.push(&mut self.head);
        out
    }

    /// Named parameters in a fixed order (weight then bias per convolution).
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.convs()
            .into_iter()
            .flat_map(|(name, conv)| {
                [
                    (format!("{name}.weight"), &conv.weight),
                    (format!("{name}.bias"), &conv.bias),
                ]
            })
            .collect()
    }

    /// Parameters in the same order as [`Self::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs_mut()
            .into_iter()
            .flat_map(|conv| [&mut conv.weight, &mut conv.bias])
            .collect()
    }

    fn weights_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs_mut().into_iter().map(|c| &mut c.weight).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }

    /// Adds `other`'s parameters into `self` elementwise.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        let theirs: Vec<&Tensor<T>> = other.parameters().into_iter().map(|(_, p)| p).collect();
        let mine = self.parameters_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Shape("accumulate: different architectures".into()));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for p in self.parameters_mut() {
            p.scale(factor);
        }
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.config.input_shape;
        if image.shape() != [c, h, w] {
            return Err(Error::Shape(format!(
                "model expects input {:?}, got {:?}",
                [c, h, w],
                image.shape()
            )));
        }
        Ok(())
    }

    /// Bottleneck representation, shaped as [`super::infer_latent_shape`].
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image)?;
        let mut x = image.clone();
        let last = self.encoder.len() - 1;
        for (s, stage) in self.encoder.iter().enumerate() {
            let pre = stage.down.forward(&x)?;
            let tap_here = s == last && self.config.latent_tap == LatentTap::PreActivation;
            if tap_here && stage.blocks.is_empty() {
                return Ok(pre);
            }
            x = relu(&pre);
            let n = stage.blocks.len();
            for (b, block) in stage.blocks.iter().enumerate() {
                if tap_here && b + 1 == n {
                    let a1 = block.conv1.forward(&x)?;
                    let a2 = block.conv2.forward(&relu(&a1))?;
                    return x.add(&a2);
                }
                x = block.forward(x)?.0;
            }
        }
        Ok(x)
    }

    /// Reconstruction of `image`, values in `[0, 1]`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(image)?.output)
    }

    pub fn forward_trace(&self, image: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(image)?;
        let mut x = image.clone();
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let pre = stage.down.forward(&x)?;
            let out = relu(&pre);
            let conv = ConvCache { input: std::mem::replace(&mut x, out), pre };
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, cache) = block.forward(x)?;
                blocks.push(cache);
                x = y;
            }
            encoder.push(StageCache { conv, blocks });
        }
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for stage in &self.decoder {
            let up = bilinear_upsample(&x, UPSAMPLE_FACTOR)?;
            let pre = stage.conv.forward(&up)?;
            x = relu(&pre);
            let conv = ConvCache { input: up, pre };
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, cache) = block.forward(x)?;
                blocks.push(cache);
                x = y;
            }
            decoder.push(StageCache { conv, blocks });
        }
        let output = sigmoid(&self.head.forward(&x)?);
        Ok(Trace {
            encoder,
            decoder,
            head_input: x,
            output,
        })
    }

    /// Parameter gradients of a scalar loss given `d loss / d output`.
    pub fn backward(&self, trace: &Trace<T>, grad_output: &Tensor<T>) -> Result<AutoencoderModel<T>> {
        let mut grads = self.zeros_like();
        let g_pre = sigmoid_backward(grad_output, &trace.output)?;
        let mut g = self
            .head
            .backward(&g_pre, &trace.head_input, true, &mut grads.head)?
            .expect("input grad");

        for (s, stage) in self.decoder.iter().enumerate().rev() {
            let cache = &trace.decoder[s];
            let gstage = &mut grads.decoder[s];
            for (b, block) in stage.blocks.iter().enumerate().rev() {
                g = block.backward(g, &cache.blocks[b], &mut gstage.blocks[b])?;
            }
            let g_pre = relu_backward(&g, &cache.conv.pre)?;
            let g_up = stage
                .conv
                .backward(&g_pre, &cache.conv.input, true, &mut gstage.conv)?
                .expect("input grad");
            g = bilinear_upsample_backward(&g_up, UPSAMPLE_FACTOR)?;
        }

        for (s, stage) in self.encoder.iter().enumerate().rev() {
            let cache = &trace.encoder[s];
            let gstage = &mut grads.encoder[s];
            for (b, block) in stage.blocks.iter().enumerate().rev() {
                g = block.backward(g, &cache.blocks[b], &mut gstage.blocks[b])?;
            }
            let g_pre = relu_backward(&g, &cache.conv.pre)?;
            match stage.down.backward(&g_pre, &cache.conv.input, s > 0, &mut gstage.down)? {
                Some(gi) => g = gi,
                None => break,
            }
        }
        Ok(grads)
    }

    /// MSE reconstruction loss of one sample and its parameter gradients.
    pub fn loss_and_grads(&self, image: &Tensor<T>) -> Result<(T, AutoencoderModel<T>)> {
        let trace = self.forward_trace(image)?;
        let loss = tensor::mse_loss(&trace.output, image)?;
        let g = tensor::mse_loss_grad(&trace.output, image)?;
        Ok((loss, self.backward(&trace, &g)?))
    }

    pub fn cast<U: Scalar>(&self) -> AutoencoderModel<U> {
        let conv = |c: &Conv<T>| Conv {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            spec: c.spec,
        };
        let blocks = |bs: &[ResidualBlock<T>]| {
            bs.iter()
                .map(|b| ResidualBlock {
                    conv1: conv(&b.conv1),
                    conv2: conv(&b.conv2),
                })
                .collect()
        };
        AutoencoderModel {
            config: self.config.clone(),
            encoder: self
                .encoder
                .iter()
                .map(|s| EncoderStage {
                    down: conv(&s.down),
                    blocks: blocks(&s.blocks),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|s| DecoderStage {
                    conv: conv(&s.conv),
                    blocks: blocks(&s.blocks),
                })
                .collect(),
            head: conv(&self.head),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::infer_latent_shape;

    fn small() -> AutoencoderConfig {
        AutoencoderConfig::new((1, 16, 16), 2, 2)
    }

    #[test]
    fn layer_counts_follow_config() {
        let m: AutoencoderModel<f32> = build_model(&AutoencoderConfig::new((1, 32, 32), 2, 4), 0).unwrap();
        assert_eq!(m.encoder.len(), 2);
        assert!(m.encoder.iter().all(|s| s.down.spec.stride == 2));
        assert_eq!(m.encoder.iter().map(|s| s.blocks.len()).sum::<usize>(), 4);
        assert_eq!(m.decoder.len(), 2);
    }

    #[test]
    fn same_seed_same_weights() {
        let a: AutoencoderModel<f32> = build_model(&small(), 11).unwrap();
        let b: AutoencoderModel<f32> = build_model(&small(), 11).unwrap();
        let c: AutoencoderModel<f32> = build_model(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [small(), AutoencoderConfig::new((3, 32, 64), 3, 4)] {
            let m: AutoencoderModel<f32> = build_model(&cfg, 1).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn shapes_round_trip() {
        let m: AutoencoderModel<f32> = build_model(&small(), 3).unwrap();
        let x = Tensor::full([1, 16, 16], 0.5f32);
        let (c, h, w) = infer_latent_shape(&m.config).unwrap();
        assert_eq!(m.encode(&x).unwrap().shape(), &[c, h, w]);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_model_has_zero_latent() {
        let m = AutoencoderModel::<f64>::zeros(&small()).unwrap();
        let x = Tensor::full([1, 16, 16], 0.3);
        assert!(m.encode(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let block = ResidualBlock::<f64>::zeros(3, 3);
        let x = Tensor::from_fn([3, 5, 5], |i| (i as f64 * 0.37).sin());
        let (y, _) = block.forward(x.clone()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn pre_activation_tap_differs_only_at_the_end() {
        let mut cfg = small();
        let post: AutoencoderModel<f64> = build_model(&cfg, 5).unwrap();
        cfg.latent_tap = LatentTap::PreActivation;
        let mut pre = post.clone();
        pre.config = cfg;
        let x = Tensor::from_fn([1, 16, 16], |i| (i % 7) as f64 / 7.0);
        let a = post.encode(&x).unwrap();
        let b = pre.encode(&x).unwrap();
        assert_eq!(a.shape(), b.shape());
        // post = x + relu(a2) and pre = x + a2, so post >= pre everywhere.
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p >= q));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m: AutoencoderModel<f32> = build_model(&small(), 0).unwrap();
        let x = Tensor::zeros([1, 8, 8]);
        assert!(matches!(m.encode(&x), Err(Error::Shape(_))));
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn untrained_loss_is_positive() {
        let m: AutoencoderModel<f32> = build_model(&small(), 0).unwrap();
        let x = Tensor::from_fn([1, 16, 16], |i| ((i * 31) % 17) as f32 / 17.0);
        let (loss, _) = m.loss_and_grads(&x).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }
}
