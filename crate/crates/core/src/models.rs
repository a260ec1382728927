//! Full segmentation architectures: the stacked dual-encoder/dual-decoder
//! DoubleU-Net and the plain U-Net baseline.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{clamp_se_ratio, Aspp, ConvBlock, DecoderBlock, EncoderBlock, ASPP_RATES};
use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, Parameter, VisitParams};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Element;

/// VGG-19 stage widths (convolutions per stage are 2, 2, 4, 4, 4).
pub const VGG19_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
pub const VGG19_CONVS_PER_STAGE: [usize; 5] = [2, 2, 4, 4, 4];

/// Architecture hyperparameters. All widths scale with `width_multiplier`
/// so desk-scale tests can shrink the network uniformly.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub width_multiplier: f64,
    pub encoder2_widths: [usize; 4],
    pub decoder_widths: [usize; 4],
    pub aspp_out: usize,
    pub se_ratio: usize,
    pub use_pretrained_encoder1: bool,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (256, 256),
            width_multiplier: 1.0,
            encoder2_widths: [32, 64, 128, 256],
            decoder_widths: [256, 128, 64, 32],
            aspp_out: 64,
            se_ratio: 8,
            use_pretrained_encoder1: false,
            bn_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn with_width_multiplier(multiplier: f64) -> ModelConfig {
        ModelConfig {
            width_multiplier: multiplier,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by 16 (four pooling stages)"
            )));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::Config(format!(
                "width_multiplier {} must be in (0, 1]",
                self.width_multiplier
            )));
        }
        if self.se_ratio == 0 {
            return Err(Error::Config("se_ratio must be positive".into()));
        }
        for &w in self.encoder2_widths.iter().chain(self.decoder_widths.iter()) {
            if w == 0 {
                return Err(Error::Config("widths must be positive".into()));
            }
        }
        if self.aspp_out == 0 {
            return Err(Error::Config("aspp_out must be positive".into()));
        }
        Ok(())
    }

    /// Applies the width multiplier, never collapsing a width below 1.
    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_multiplier).round() as usize).max(1)
    }

    fn se(&self, channels: usize) -> Option<usize> {
        Some(clamp_se_ratio(channels, self.se_ratio))
    }
}

/// Which architecture a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    DoubleUNet,
    UNet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::DoubleUNet => "doubleunet",
            ModelKind::UNet => "unet",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "doubleunet" => Ok(ModelKind::DoubleUNet),
            "unet" => Ok(ModelKind::UNet),
            other => Err(Error::Config(format!(
                "unknown model '{other}', expected one of: doubleunet, unet"
            ))),
        }
    }
}

/// Result of a segmentation forward pass. `masks` holds every supervised
/// sigmoid head in network order; the last entry is the primary prediction.
pub struct SegOutput {
    pub masks: Vec<Var>,
    pub combined: Var,
    /// Input handed to the second network (original image gated by the
    /// first mask); present only for the stacked architecture.
    pub gated: Option<Var>,
}

impl SegOutput {
    pub fn primary(&self) -> Var {
        *self.masks.last().expect("at least one mask head")
    }
}

/// Common surface the trainer uses for both architectures.
pub trait SegModel<T: Element>: VisitParams<T> {
    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<SegOutput>;
    fn kind(&self) -> ModelKind;
    fn config(&self) -> &ModelConfig;
}

/// 16-convolution, 5-stage VGG-19 feature extractor (plain conv + ReLU, no
/// batch norm, so converted pretrained weights drop in unchanged). Skip taps
/// are the pre-pool stage outputs of stages 1-4; the bottleneck is the
/// stage-5 output at 1/16 resolution.
#[derive(Debug, Clone)]
pub struct Vgg19Encoder<T: Element> {
    stages: Vec<Vec<Conv2dLayer<T>>>,
}

impl<T: Element> Vgg19Encoder<T> {
    pub fn new<R: Rng>(name: &str, widths: [usize; 5], rng: &mut R) -> Vgg19Encoder<T> {
        let mut stages = Vec::with_capacity(5);
        let mut c_in = 3;
        for (s, (&w, &count)) in widths.iter().zip(VGG19_CONVS_PER_STAGE.iter()).enumerate() {
            let mut convs = Vec::with_capacity(count);
            for i in 0..count {
                convs.push(Conv2dLayer::new(
                    &format!("{name}.s{}.c{}", s + 1, i + 1),
                    c_in,
                    w,
                    3,
                    1,
                    1,
                    1,
                    rng,
                ));
                c_in = w;
            }
            stages.push(convs);
        }
        Vgg19Encoder { stages }
    }

    pub fn stage_widths(&self) -> [usize; 5] {
        let mut w = [0; 5];
        for (i, s) in self.stages.iter().enumerate() {
            w[i] = s.last().unwrap().out_channels();
        }
        w
    }

    /// Returns `(bottleneck, [skip_full, skip_half, skip_quarter, skip_eighth])`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, [Var; 4])> {
        let s = tape.value(x).shape();
        if s.c != self.stages[0][0].weight.value.shape().c {
            return Err(Error::shape(format!(
                "vgg19: expected {} input channels, got {}",
                self.stages[0][0].weight.value.shape().c,
                s.c
            )));
        }
        if !s.h.is_multiple_of(16) || !s.w.is_multiple_of(16) {
            return Err(Error::shape(format!(
                "vgg19: spatial dims {}x{} must be divisible by 16",
                s.h, s.w
            )));
        }
        let mut cur = x;
        let mut skips = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            for conv in stage {
                cur = conv.forward(tape, cur)?;
                cur = tape.relu(cur)?;
            }
            if i < 4 {
                skips.push(cur);
                cur = tape.maxpool2x2(cur)?;
            }
        }
        Ok((cur, [skips[0], skips[1], skips[2], skips[3]]))
    }
}

impl<T: Element> VisitParams<T> for Vgg19Encoder<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for stage in self.stages.iter_mut() {
            for conv in stage.iter_mut() {
                conv.visit_params(f);
            }
        }
    }
}

/// Two stacked U-Nets. The first uses the VGG-19 encoder; its sigmoid mask
/// multiplicatively gates the input image before the second, from-scratch
/// network. The second decoder concatenates skips from both encoders. The
/// emitted `combined` tensor concatenates both masks channel-wise.
pub struct DoubleUNet<T: Element> {
    config: ModelConfig,
    encoder1: Vgg19Encoder<T>,
    aspp1: Aspp<T>,
    decoder1: Vec<DecoderBlock<T>>,
    head1: Conv2dLayer<T>,
    encoder2: Vec<EncoderBlock<T>>,
    aspp2: Aspp<T>,
    decoder2: Vec<DecoderBlock<T>>,
    head2: Conv2dLayer<T>,
}

impl<T: Element> DoubleUNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<DoubleUNet<T>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let vgg: Vec<usize> = VGG19_WIDTHS.iter().map(|&w| c.scaled(w)).collect();
        let enc2: Vec<usize> = c.encoder2_widths.iter().map(|&w| c.scaled(w)).collect();
        let dec: Vec<usize> = c.decoder_widths.iter().map(|&w| c.scaled(w)).collect();
        let aspp_out = c.scaled(c.aspp_out);

        let encoder1 = Vgg19Encoder::new("net1.enc", [vgg[0], vgg[1], vgg[2], vgg[3], vgg[4]], &mut rng);
        let aspp1 = Aspp::new("net1.aspp", vgg[4], aspp_out, ASPP_RATES, c.bn_momentum, &mut rng)?;

        // decoder 1 consumes skips from encoder 1 only, deepest first
        let mut decoder1 = Vec::with_capacity(4);
        let mut c_up = aspp_out;
        for i in 0..4 {
            let skip_c = vgg[3 - i];
            decoder1.push(DecoderBlock::new(
                &format!("net1.dec.b{}", i + 1),
                c_up + skip_c,
                dec[i],
                c.se(dec[i]),
                c.bn_momentum,
                &mut rng,
            )?);
            c_up = dec[i];
        }
        let head1 = Conv2dLayer::new("net1.head", c_up, 1, 1, 1, 0, 1, &mut rng);

        let mut encoder2 = Vec::with_capacity(4);
        let mut c_in = 3;
        for (i, &w) in enc2.iter().enumerate() {
            encoder2.push(EncoderBlock::new(
                &format!("net2.enc.b{}", i + 1),
                c_in,
                w,
                c.se(w),
                c.bn_momentum,
                &mut rng,
            )?);
            c_in = w;
        }
        let aspp2 = Aspp::new("net2.aspp", enc2[3], aspp_out, ASPP_RATES, c.bn_momentum, &mut rng)?;

        // decoder 2 consumes skips from both encoders at each resolution
        let mut decoder2 = Vec::with_capacity(4);
        let mut c_up = aspp_out;
        for i in 0..4 {
            let skip_c = vgg[3 - i] + enc2[3 - i];
            decoder2.push(DecoderBlock::new(
                &format!("net2.dec.b{}", i + 1),
                c_up + skip_c,
                dec[i],
                c.se(dec[i]),
                c.bn_momentum,
                &mut rng,
            )?);
            c_up = dec[i];
        }
        let head2 = Conv2dLayer::new("net2.head", c_up, 1, 1, 1, 0, 1, &mut rng);

        Ok(DoubleUNet {
            config,
            encoder1,
            aspp1,
            decoder1,
            head1,
            encoder2,
            aspp2,
            decoder2,
            head2,
        })
    }

    pub fn encoder1(&self) -> &Vgg19Encoder<T> {
        &self.encoder1
    }

    /// Imports converted VGG-19 weights into the first encoder. The file
    /// must carry exactly the 32 `net1.enc.s{stage}.c{conv}.{weight,bias}`
    /// tensors at this model's widths.
    pub fn load_encoder1_weights(&mut self, path: &std::path::Path) -> Result<()> {
        crate::weights::load_weights(&mut self.encoder1, path)?;
        self.config.use_pretrained_encoder1 = true;
        Ok(())
    }

    /// Bias parameter of the first mask head; tests use it to force the gate
    /// open.
    pub fn head1_bias_mut(&mut self) -> &mut Parameter<T> {
        &mut self.head1.bias
    }
}

impl<T: Element> SegModel<T> for DoubleUNet<T> {
    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<SegOutput> {
        let (b1, skips1) = self.encoder1.forward(tape, x)?;
        let mut cur = self.aspp1.forward(tape, b1, mode)?;
        for (i, block) in self.decoder1.iter_mut().enumerate() {
            cur = block.forward(tape, cur, &[skips1[3 - i]], mode)?;
        }
        let logits1 = self.head1.forward(tape, cur)?;
        let out1 = tape.sigmoid(logits1)?;

        let gated = tape.mul(x, out1)?;

        let mut skips2 = Vec::with_capacity(4);
        let mut down = gated;
        for block in self.encoder2.iter_mut() {
            let (skip, d) = block.forward(tape, down, mode)?;
            skips2.push(skip);
            down = d;
        }
        let mut cur = self.aspp2.forward(tape, down, mode)?;
        for (i, block) in self.decoder2.iter_mut().enumerate() {
            cur = block.forward(tape, cur, &[skips1[3 - i], skips2[3 - i]], mode)?;
        }
        let logits2 = self.head2.forward(tape, cur)?;
        let out2 = tape.sigmoid(logits2)?;

        let combined = tape.concat_channels(&[out1, out2])?;
        Ok(SegOutput {
            masks: vec![out1, out2],
            combined,
            gated: Some(gated),
        })
    }

    fn kind(&self) -> ModelKind {
        ModelKind::DoubleUNet
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl<T: Element> VisitParams<T> for DoubleUNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.encoder1.visit_params(f);
        self.aspp1.visit_params(f);
        for b in self.decoder1.iter_mut() {
            b.visit_params(f);
        }
        self.head1.visit_params(f);
        for b in self.encoder2.iter_mut() {
            b.visit_params(f);
        }
        self.aspp2.visit_params(f);
        for b in self.decoder2.iter_mut() {
            b.visit_params(f);
        }
        self.head2.visit_params(f);
    }
}

/// Plain four-down/four-up encoder-decoder baseline with single-encoder
/// skips and no attention or pyramid pooling. Encoder widths come from
/// `encoder2_widths`, the bottleneck doubles the deepest width, and the
/// decoder mirrors with `decoder_widths`.
pub struct UNet<T: Element> {
    config: ModelConfig,
    encoder: Vec<EncoderBlock<T>>,
    bottleneck: ConvBlock<T>,
    decoder: Vec<DecoderBlock<T>>,
    head: Conv2dLayer<T>,
}

impl<T: Element> UNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<UNet<T>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let enc: Vec<usize> = c.encoder2_widths.iter().map(|&w| c.scaled(w)).collect();
        let dec: Vec<usize> = c.decoder_widths.iter().map(|&w| c.scaled(w)).collect();
        let bneck_c = enc[3] * 2;

        let mut encoder = Vec::with_capacity(4);
        let mut c_in = 3;
        for (i, &w) in enc.iter().enumerate() {
            encoder.push(EncoderBlock::new(
                &format!("enc.b{}", i + 1),
                c_in,
                w,
                None,
                c.bn_momentum,
                &mut rng,
            )?);
            c_in = w;
        }
        let bottleneck = ConvBlock::new("bottleneck", enc[3], bneck_c, None, c.bn_momentum, &mut rng)?;
        let mut decoder = Vec::with_capacity(4);
        let mut c_up = bneck_c;
        for i in 0..4 {
            let skip_c = enc[3 - i];
            decoder.push(DecoderBlock::new(
                &format!("dec.b{}", i + 1),
                c_up + skip_c,
                dec[i],
                None,
                c.bn_momentum,
                &mut rng,
            )?);
            c_up = dec[i];
        }
        let head = Conv2dLayer::new("head", c_up, 1, 1, 1, 0, 1, &mut rng);
        Ok(UNet {
            config,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }
}

impl<T: Element> SegModel<T> for UNet<T> {
    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<SegOutput> {
        let mut skips = Vec::with_capacity(4);
        let mut cur = x;
        for block in self.encoder.iter_mut() {
            let (skip, down) = block.forward(tape, cur, mode)?;
            skips.push(skip);
            cur = down;
        }
        cur = self.bottleneck.forward(tape, cur, mode)?;
        for (i, block) in self.decoder.iter_mut().enumerate() {
            cur = block.forward(tape, cur, &[skips[3 - i]], mode)?;
        }
        let logits = self.head.forward(tape, cur)?;
        let out = tape.sigmoid(logits)?;
        Ok(SegOutput {
            masks: vec![out],
            combined: out,
            gated: None,
        })
    }

    fn kind(&self) -> ModelKind {
        ModelKind::UNet
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl<T: Element> VisitParams<T> for UNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for b in self.encoder.iter_mut() {
            b.visit_params(f);
        }
        self.bottleneck.visit_params(f);
        for b in self.decoder.iter_mut() {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }
}

/// Builds the requested architecture.
pub fn build_model<T: Element>(
    kind: ModelKind,
    config: ModelConfig,
    seed: u64,
) -> Result<Box<dyn SegModel<T>>> {
    Ok(match kind {
        ModelKind::DoubleUNet => Box::new(DoubleUNet::new(config, seed)?),
        ModelKind::UNet => Box::new(UNet::new(config, seed)?),
    })
}
