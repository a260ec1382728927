//! Composite network blocks: double-conv block, squeeze-and-excitation,
//! atrous spatial pyramid pooling, and the encoder/decoder building blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2dLayer, DenseLayer, Parameter, VisitParams, BN_EPS};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Element;

/// Largest divisor of `channels` not exceeding `ratio`; keeps the
/// squeeze-and-excitation bottleneck valid when width multipliers shrink a
/// block below the configured reduction ratio.
pub fn clamp_se_ratio(channels: usize, ratio: usize) -> usize {
    (1..=ratio.min(channels))
        .rev()
        .find(|r| channels.is_multiple_of(*r))
        .unwrap_or(1)
}

/// Channel attention: gates each channel by a scalar in (0,1) computed from
/// globally pooled features through a two-layer bottleneck.
#[derive(Debug, Clone)]
pub struct SqueezeExcite<T: Element> {
    pub reduce: DenseLayer<T>,
    pub expand: DenseLayer<T>,
    pub channels: usize,
    pub ratio: usize,
}

impl<T: Element> SqueezeExcite<T> {
    pub fn new<R: Rng>(name: &str, channels: usize, ratio: usize, rng: &mut R) -> Result<SqueezeExcite<T>> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::shape(format!(
                "squeeze_excite: {channels} channels not divisible by ratio {ratio}"
            )));
        }
        let hidden = channels / ratio;
        Ok(SqueezeExcite {
            reduce: DenseLayer::new(&format!("{name}.reduce"), channels, hidden, rng),
            expand: DenseLayer::new(&format!("{name}.expand"), hidden, channels, rng),
            channels,
            ratio,
        })
    }

    /// Per-channel gate, shape `(N,C,1,1)`, values in (0,1).
    pub fn gate(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(x)?;
        let h = self.reduce.forward(tape, pooled)?;
        let h = tape.relu(h)?;
        let h = self.expand.forward(tape, h)?;
        tape.sigmoid(h)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.c != self.channels {
            return Err(Error::shape(format!(
                "squeeze_excite: expected {} channels, got {}",
                self.channels, s.c
            )));
        }
        let gate = self.gate(tape, x)?;
        let gate = tape.broadcast_spatial(gate, s.h, s.w)?;
        tape.mul(x, gate)
    }
}

impl<T: Element> VisitParams<T> for SqueezeExcite<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.reduce.visit_params(f);
        self.expand.visit_params(f);
    }
}

/// Two 3x3 convolutions, each normalized and activated, optionally followed
/// by squeeze-and-excitation. Spatial size is preserved.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Element> {
    pub conv1: Conv2dLayer<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2dLayer<T>,
    pub bn2: BatchNorm2d<T>,
    pub se: Option<SqueezeExcite<T>>,
}

impl<T: Element> ConvBlock<T> {
    pub fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        se_ratio: Option<usize>,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Result<ConvBlock<T>> {
        let se = match se_ratio {
            Some(r) => Some(SqueezeExcite::new(&format!("{name}.se"), c_out, r, rng)?),
            None => None,
        };
        Ok(ConvBlock {
            conv1: Conv2dLayer::new(&format!("{name}.conv1"), c_in, c_out, 3, 1, 1, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), c_out, BN_EPS, bn_momentum),
            conv2: Conv2dLayer::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), c_out, BN_EPS, bn_momentum),
            se,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.weight.value.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.out_channels()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv1.forward(tape, x)?;
        let y = self.bn1.forward(tape, y, mode)?;
        let y = tape.relu(y)?;
        let y = self.conv2.forward(tape, y)?;
        let y = self.bn2.forward(tape, y, mode)?;
        let y = tape.relu(y)?;
        match &self.se {
            Some(se) => se.forward(tape, y),
            None => Ok(y),
        }
    }
}

impl<T: Element> VisitParams<T> for ConvBlock<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some(se) = &mut self.se {
            se.visit_params(f);
        }
    }
}

pub const ASPP_RATES: [usize; 3] = [6, 12, 18];

/// Atrous spatial pyramid pooling: a 1x1 branch, three dilated 3x3 branches,
/// and a global-pooling branch, concatenated and projected back to
/// `out_channels`. Every conv is followed by batch norm and ReLU; spatial
/// size is preserved for any input size >= 1.
#[derive(Debug, Clone)]
pub struct Aspp<T: Element> {
    pub branches: Vec<(Conv2dLayer<T>, BatchNorm2d<T>)>, // 1x1 then dilated
    pub pool_conv: Conv2dLayer<T>,
    pub pool_bn: BatchNorm2d<T>,
    pub project: Conv2dLayer<T>,
    pub project_bn: BatchNorm2d<T>,
    pub rates: [usize; 3],
}

impl<T: Element> Aspp<T> {
    pub fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        rates: [usize; 3],
        bn_momentum: f64,
        rng: &mut R,
    ) -> Result<Aspp<T>> {
        if !(rates[0] < rates[1] && rates[1] < rates[2]) {
            return Err(Error::Config(format!("aspp: rates must be increasing, got {rates:?}")));
        }
        let mut branches = Vec::new();
        branches.push((
            Conv2dLayer::new(&format!("{name}.b0.conv"), c_in, c_out, 1, 1, 0, 1, rng),
            BatchNorm2d::new(&format!("{name}.b0.bn"), c_out, BN_EPS, bn_momentum),
        ));
        for (i, &d) in rates.iter().enumerate() {
            branches.push((
                Conv2dLayer::new(&format!("{name}.b{}.conv", i + 1), c_in, c_out, 3, 1, d, d, rng),
                BatchNorm2d::new(&format!("{name}.b{}.bn", i + 1), c_out, BN_EPS, bn_momentum),
            ));
        }
        Ok(Aspp {
            branches,
            pool_conv: Conv2dLayer::new(&format!("{name}.pool.conv"), c_in, c_out, 1, 1, 0, 1, rng),
            pool_bn: BatchNorm2d::new(&format!("{name}.pool.bn"), c_out, BN_EPS, bn_momentum),
            project: Conv2dLayer::new(&format!("{name}.proj.conv"), c_out * 5, c_out, 1, 1, 0, 1, rng),
            project_bn: BatchNorm2d::new(&format!("{name}.proj.bn"), c_out, BN_EPS, bn_momentum),
            rates,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.project.out_channels()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.value(x).shape();
        let mut outs = Vec::with_capacity(5);
        for (conv, bn) in self.branches.iter_mut() {
            let y = conv.forward(tape, x)?;
            let y = bn.forward(tape, y, mode)?;
            outs.push(tape.relu(y)?);
        }
        let pooled = tape.global_avg_pool(x)?;
        let y = self.pool_conv.forward(tape, pooled)?;
        let y = self.pool_bn.forward(tape, y, mode)?;
        let y = tape.relu(y)?;
        outs.push(tape.broadcast_spatial(y, s.h, s.w)?);
        let cat = tape.concat_channels(&outs)?;
        let y = self.project.forward(tape, cat)?;
        let y = self.project_bn.forward(tape, y, mode)?;
        tape.relu(y)
    }
}

impl<T: Element> VisitParams<T> for Aspp<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for (conv, bn) in self.branches.iter_mut() {
            conv.visit_params(f);
            bn.visit_params(f);
        }
        self.pool_conv.visit_params(f);
        self.pool_bn.visit_params(f);
        self.project.visit_params(f);
        self.project_bn.visit_params(f);
    }
}

/// Conv block followed by 2x2 max pooling; returns the pre-pool features as
/// the skip connection.
#[derive(Debug, Clone)]
pub struct EncoderBlock<T: Element> {
    pub block: ConvBlock<T>,
}

impl<T: Element> EncoderBlock<T> {
    pub fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        se_ratio: Option<usize>,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Result<EncoderBlock<T>> {
        Ok(EncoderBlock {
            block: ConvBlock::new(name, c_in, c_out, se_ratio, bn_momentum, rng)?,
        })
    }

    /// Returns `(skip, downsampled)`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let skip = self.block.forward(tape, x, mode)?;
        let down = tape.maxpool2x2(skip)?;
        Ok((skip, down))
    }
}

impl<T: Element> VisitParams<T> for EncoderBlock<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.block.visit_params(f);
    }
}

/// Bilinear 2x upsampling, concatenation with one or more skip tensors, then
/// a conv block.
#[derive(Debug, Clone)]
pub struct DecoderBlock<T: Element> {
    pub block: ConvBlock<T>,
}

impl<T: Element> DecoderBlock<T> {
    /// `c_in` is the channel count after concatenation (upsampled input plus
    /// all skips).
    pub fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        se_ratio: Option<usize>,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Result<DecoderBlock<T>> {
        Ok(DecoderBlock {
            block: ConvBlock::new(name, c_in, c_out, se_ratio, bn_momentum, rng)?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, skips: &[Var], mode: Mode) -> Result<Var> {
        if skips.is_empty() {
            return Err(Error::shape("decoder_block: at least one skip connection required"));
        }
        let s = tape.value(x).shape();
        for &skip in skips {
            let ss = tape.value(skip).shape();
            if ss.h != 2 * s.h || ss.w != 2 * s.w || ss.n != s.n {
                return Err(Error::shape(format!(
                    "decoder_block: skip {ss} does not match 2x upsampled input {s}"
                )));
            }
        }
        let up = tape.upsample2x(x)?;
        let mut parts = vec![up];
        parts.extend_from_slice(skips);
        let cat = tape.concat_channels(&parts)?;
        let cs = tape.value(cat).shape();
        if cs.c != self.block.in_channels() {
            return Err(Error::shape(format!(
                "decoder_block: concatenated {} channels but block expects {}",
                cs.c,
                self.block.in_channels()
            )));
        }
        self.block.forward(tape, cat, mode)
    }
}

impl<T: Element> VisitParams<T> for DecoderBlock<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.block.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{self, ConvGeom};
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_params<T: Element, M: VisitParams<T>>(m: &mut M) {
        m.visit_params(&mut |p| {
            if p.trainable {
                p.value = Tensor::zeros(p.value.shape());
            }
        });
    }

    #[test]
    fn se_ratio_clamp_picks_largest_divisor() {
        assert_eq!(clamp_se_ratio(64, 8), 8);
        assert_eq!(clamp_se_ratio(4, 8), 4);
        assert_eq!(clamp_se_ratio(12, 8), 6);
        assert_eq!(clamp_se_ratio(7, 8), 7);
        assert_eq!(clamp_se_ratio(5, 4), 1);
    }

    #[test]
    fn se_rejects_indivisible_channels() {
        let mut r = rng(0);
        assert!(SqueezeExcite::<f32>::new("se", 6, 4, &mut r).is_err());
        assert!(SqueezeExcite::<f32>::new("se", 8, 4, &mut r).is_ok());
    }

    #[test]
    fn se_saturated_gate_passes_input_through() {
        let mut r = rng(1);
        let mut se = SqueezeExcite::<f64>::new("se", 4, 2, &mut r).unwrap();
        // drive the expand bias to +50: gate = sigmoid(~50) ~ 1
        se.expand.bias.value = Tensor::full(Shape::new(1, 4, 1, 1), 50.0);
        let x = Tensor::rand_uniform(Shape::new(1, 4, 3, 3), -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = se.forward(&mut tape, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn se_zero_logits_halve_the_input() {
        let mut r = rng(2);
        let mut se = SqueezeExcite::<f64>::new("se", 4, 2, &mut r).unwrap();
        se.expand.weight.value = Tensor::zeros(se.expand.weight.value.shape());
        se.expand.bias.value = Tensor::zeros(se.expand.bias.value.shape());
        let x = Tensor::rand_uniform(Shape::new(2, 4, 3, 3), -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = se.forward(&mut tape, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(&x.map(|v| v * 0.5)) < 1e-12);
    }

    #[test]
    fn se_gate_matches_scalar_oracle_and_shrinks() {
        let mut r = rng(3);
        let se = SqueezeExcite::<f64>::new("se", 6, 3, &mut r).unwrap();
        let x = Tensor::rand_uniform(Shape::new(1, 6, 4, 4), -2.0, 2.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = se.forward(&mut tape, xv).unwrap();
        let out = tape.value(y);

        // oracle: gap -> dense -> relu -> dense -> sigmoid, all scalar loops
        let pooled = kernels::global_avg_pool_forward(&x);
        let h = kernels::dense_forward(&pooled, &se.reduce.weight.value, &se.reduce.bias.value);
        let h = h.map(|v| v.max(0.0));
        let logits = kernels::dense_forward(&h, &se.expand.weight.value, &se.expand.bias.value);
        let gate = logits.map(kernels::sigmoid_scalar);

        for c in 0..6 {
            let g = gate.at(0, c, 0, 0);
            assert!(g > 0.0 && g < 1.0);
            for yy in 0..4 {
                for xx in 0..4 {
                    let expect = x.at(0, c, yy, xx) * g;
                    let got = out.at(0, c, yy, xx);
                    assert!((got - expect).abs() < 1e-12);
                    // never flips sign, never grows
                    assert!(got.abs() <= x.at(0, c, yy, xx).abs() + 1e-15);
                    assert!(got * x.at(0, c, yy, xx) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn conv_block_zero_weights_give_zero_output() {
        let mut r = rng(4);
        let mut block = ConvBlock::<f32>::new("cb", 3, 8, Some(8), 0.9, &mut r).unwrap();
        zero_params(&mut block);
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::rand_uniform(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut r))
            .unwrap();
        let y = block.forward(&mut tape, x, Mode::Train).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_block_output_shape() {
        let mut r = rng(5);
        let mut block = ConvBlock::<f32>::new("cb", 3, 64, Some(8), 0.9, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 32, 32))).unwrap();
        let y = block.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 64, 32, 32));
    }

    #[test]
    fn conv_block_matches_primitive_composition() {
        let mut r = rng(6);
        let mut block = ConvBlock::<f64>::new("cb", 2, 4, Some(2), 0.9, &mut r).unwrap();
        let x = Tensor::rand_uniform(Shape::new(2, 2, 5, 5), -1.0, 1.0, &mut r);

        // oracle path: the same primitives, called directly in sequence
        let geom = ConvGeom { stride: 1, padding: 1, dilation: 1 };
        let mut rm1 = vec![0.0; 4];
        let mut rv1 = vec![1.0; 4];
        let c1 = kernels::conv2d_forward(&x, &block.conv1.weight.value, &block.conv1.bias.value, geom);
        let (b1, _) = kernels::batchnorm_forward(
            &c1, &block.bn1.gamma.value, &block.bn1.beta.value, &mut rm1, &mut rv1, true, BN_EPS, 0.9,
        );
        let a1 = b1.map(|v| v.max(0.0));
        let mut rm2 = vec![0.0; 4];
        let mut rv2 = vec![1.0; 4];
        let c2 = kernels::conv2d_forward(&a1, &block.conv2.weight.value, &block.conv2.bias.value, geom);
        let (b2, _) = kernels::batchnorm_forward(
            &c2, &block.bn2.gamma.value, &block.bn2.beta.value, &mut rm2, &mut rv2, true, BN_EPS, 0.9,
        );
        let a2 = b2.map(|v| v.max(0.0));
        let se = block.se.as_ref().unwrap();
        let pooled = kernels::global_avg_pool_forward(&a2);
        let h = kernels::dense_forward(&pooled, &se.reduce.weight.value, &se.reduce.bias.value)
            .map(|v| v.max(0.0));
        let gate = kernels::dense_forward(&h, &se.expand.weight.value, &se.expand.bias.value)
            .map(kernels::sigmoid_scalar);
        let mut expect = a2.clone();
        {
            let s = expect.shape();
            let buf = expect.data_mut();
            for n in 0..s.n {
                for c in 0..s.c {
                    let g = gate.at(n, c, 0, 0);
                    for i in 0..s.h * s.w {
                        buf[(n * s.c + c) * s.h * s.w + i] *= g;
                    }
                }
            }
        }

        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let y = block.forward(&mut tape, xv, Mode::Train).unwrap();
        assert!(tape.value(y).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn aspp_preserves_spatial_dims() {
        let mut r = rng(7);
        for size in [8usize, 9, 17] {
            let mut aspp = Aspp::<f32>::new("aspp", 3, 4, ASPP_RATES, 0.9, &mut r).unwrap();
            let mut tape = Tape::new();
            let x = tape
                .constant(Tensor::rand_uniform(Shape::new(1, 3, size, size), -1.0, 1.0, &mut r))
                .unwrap();
            let y = aspp.forward(&mut tape, x, Mode::Train).unwrap();
            assert_eq!(tape.value(y).shape(), Shape::new(1, 4, size, size));
        }
    }

    #[test]
    fn aspp_constant_input_gives_spatially_constant_output() {
        let mut r = rng(8);
        let mut aspp = Aspp::<f64>::new("aspp", 2, 3, ASPP_RATES, 0.9, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 2, 6, 6), 0.7)).unwrap();
        let y = aspp.forward(&mut tape, x, Mode::Train).unwrap();
        let out = tape.value(y);
        for c in 0..3 {
            let v0 = out.at(0, c, 0, 0);
            for yy in 0..6 {
                for xx in 0..6 {
                    assert!((out.at(0, c, yy, xx) - v0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn aspp_dilated_branch_matches_conv_oracle() {
        let mut r = rng(9);
        let aspp = Aspp::<f64>::new("aspp", 2, 3, ASPP_RATES, 0.9, &mut r).unwrap();
        assert_eq!(aspp.rates, [6, 12, 18]);
        let x = Tensor::rand_uniform(Shape::new(1, 2, 9, 9), -1.0, 1.0, &mut r);
        // branch k uses 3x3 convs with padding == dilation
        for (k, &d) in aspp.rates.iter().enumerate() {
            let (conv, _) = &aspp.branches[k + 1];
            assert_eq!(conv.dilation, d);
            assert_eq!(conv.padding, d);
            let got = kernels::conv2d_forward(
                &x,
                &conv.weight.value,
                &conv.bias.value,
                ConvGeom { stride: 1, padding: d, dilation: d },
            );
            // direct nested-loop oracle with stride-d taps
            let ws = conv.weight.value.shape();
            for co in 0..ws.n {
                for oy in 0..9 {
                    for ox in 0..9 {
                        let mut acc = conv.bias.value.at(0, co, 0, 0);
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = oy as isize + (ky * d) as isize - d as isize;
                                    let ix = ox as isize + (kx * d) as isize - d as isize;
                                    if (0..9).contains(&iy) && (0..9).contains(&ix) {
                                        acc += x.at(0, ci, iy as usize, ix as usize)
                                            * conv.weight.value.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        assert!((got.at(0, co, oy, ox) - acc).abs() < 1e-11);
                    }
                }
            }
        }
    }

    #[test]
    fn encoder_block_shapes_and_pool_identity() {
        let mut r = rng(10);
        let mut enc = EncoderBlock::<f32>::new("enc", 3, 32, Some(8), 0.9, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::rand_uniform(Shape::new(1, 3, 64, 64), 0.0, 1.0, &mut r))
            .unwrap();
        let (skip, down) = enc.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(skip).shape(), Shape::new(1, 32, 64, 64));
        assert_eq!(tape.value(down).shape(), Shape::new(1, 32, 32, 32));
        let (pooled, _) = kernels::maxpool2x2_forward(tape.value(skip));
        assert_eq!(pooled.data(), tape.value(down).data());
    }

    #[test]
    fn four_chained_encoders_shape_recursion() {
        let mut r = rng(11);
        let widths = [4usize, 8, 16, 32];
        let mut blocks: Vec<EncoderBlock<f32>> = Vec::new();
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(EncoderBlock::new(&format!("e{i}"), c_in, w, None, 0.9, &mut r).unwrap());
            c_in = w;
        }
        let mut tape = Tape::new();
        let mut x = tape.constant(Tensor::zeros(Shape::new(1, 3, 256, 256))).unwrap();
        let mut skip_sizes = Vec::new();
        for b in blocks.iter_mut() {
            let (skip, down) = b.forward(&mut tape, x, Mode::Train).unwrap();
            skip_sizes.push(tape.value(skip).shape().h);
            x = down;
        }
        assert_eq!(skip_sizes, vec![256, 128, 64, 32]);
        assert_eq!(tape.value(x).shape().h, 16);
    }

    #[test]
    fn decoder_block_shapes_and_channel_bookkeeping() {
        let mut r = rng(12);
        // x 1x64x16x16 with one 64-channel skip at 32x32, width 32
        let mut dec = DecoderBlock::<f32>::new("dec", 128, 32, Some(8), 0.9, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 64, 16, 16))).unwrap();
        let skip = tape.constant(Tensor::zeros(Shape::new(1, 64, 32, 32))).unwrap();
        let y = dec.forward(&mut tape, x, &[skip], Mode::Train).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 32, 32, 32));

        // empty skip list is rejected
        assert!(dec.forward(&mut tape, x, &[], Mode::Train).is_err());

        // two skips of 64 and 32 channels with 128-channel input: 224 total
        let mut dec2 = DecoderBlock::<f32>::new("dec2", 224, 16, Some(8), 0.9, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 128, 8, 8))).unwrap();
        let s1 = tape.constant(Tensor::zeros(Shape::new(1, 64, 16, 16))).unwrap();
        let s2 = tape.constant(Tensor::zeros(Shape::new(1, 32, 16, 16))).unwrap();
        let y = dec2.forward(&mut tape, x, &[s1, s2], Mode::Train).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 16, 16, 16));

        // mismatched skip resolution is rejected
        let bad = tape.constant(Tensor::zeros(Shape::new(1, 64, 8, 8))).unwrap();
        assert!(dec2.forward(&mut tape, x, &[bad], Mode::Train).is_err());
    }

    #[test]
    fn encoder_then_decoder_restores_spatial_dims() {
        let mut r = rng(13);
        let mut enc = EncoderBlock::<f32>::new("e", 3, 8, Some(4), 0.9, &mut r).unwrap();
        let mut dec = DecoderBlock::<f32>::new("d", 16, 8, Some(4), 0.9, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::rand_uniform(Shape::new(1, 3, 24, 40), 0.0, 1.0, &mut r))
            .unwrap();
        let (skip, down) = enc.forward(&mut tape, x, Mode::Train).unwrap();
        let y = dec.forward(&mut tape, down, &[skip], Mode::Train).unwrap();
        let s = tape.value(y).shape();
        assert_eq!((s.h, s.w), (24, 40));
    }
}
