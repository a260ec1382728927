//! The standard f64 gradient-check suite over every differentiable
//! primitive and composite block. One report per operation, aggregating the
//! worst relative error across seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{clamp_se_ratio, Aspp, ConvBlock, DecoderBlock, EncoderBlock, SqueezeExcite, ASPP_RATES};
use crate::error::Result;
use crate::gradcheck::{check_fn, check_model, GradCheckReport, DEFAULT_H, DEFAULT_TOL};
use crate::layers::BN_EPS;
use crate::tape::Mode;
use crate::tensor::{Shape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1))
}

fn uniform(shape: Shape, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, r)
}

/// Values bounded away from zero so relu has no kink within `10*h` of any
/// coordinate.
fn away_from_zero(shape: Shape, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| {
            let mag = r.gen_range(0.2..1.2);
            if r.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Each 2x2 window gets four well-separated levels, so the argmax is stable
/// under the finite-difference step.
fn pool_safe(shape: Shape, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    let s = shape;
    let buf = t.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            for wy in 0..s.h / 2 {
                for wx in 0..s.w / 2 {
                    let mut levels = [0.1, 0.35, 0.6, 0.85];
                    for i in (1..4).rev() {
                        let j = r.gen_range(0..=i);
                        levels.swap(i, j);
                    }
                    for (k, &(dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let idx = s.index(n, c, 2 * wy + dy, 2 * wx + dx);
                        buf[idx] = levels[k] + r.gen_range(-0.05..0.05);
                    }
                }
            }
        }
    }
    t
}

fn random_binary(shape: Shape, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(shape, data)
}

fn merge(name: &str, reports: Vec<GradCheckReport>) -> GradCheckReport {
    let mut out = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        tol: reports.first().map(|r| r.tol).unwrap_or(DEFAULT_TOL),
        coords: 0,
    };
    for r in reports {
        out.max_rel_err = out.max_rel_err.max(r.max_rel_err);
        out.coords += r.coords;
    }
    out
}

type Entry = (&'static str, fn(u64) -> Result<GradCheckReport>);

fn check_conv(seed: u64, stride: usize, padding: usize, dilation: usize) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, ci, co) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
    let (h, w) = (r.gen_range(5..8), r.gen_range(5..8));
    let input = uniform(Shape::new(n, ci, h, w), -1.0, 1.0, &mut r);
    let weight = uniform(Shape::new(co, ci, 3, 3), -1.0, 1.0, &mut r);
    let bias = uniform(Shape::new(1, co, 1, 1), -0.5, 0.5, &mut r);
    check_fn(
        "conv2d",
        &[input, weight, bias],
        move |tape, v| tape.conv2d(v[0], v[1], v[2], stride, padding, dilation),
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

fn op_conv(seed: u64) -> Result<GradCheckReport> {
    check_conv(seed, 1, 1, 1)
}

fn op_conv_dilated(seed: u64) -> Result<GradCheckReport> {
    check_conv(seed, 1, 2, 2)
}

fn op_conv_strided(seed: u64) -> Result<GradCheckReport> {
    check_conv(seed, 2, 1, 1)
}

fn op_maxpool(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = Shape::new(1, r.gen_range(1..3), 2 * r.gen_range(2..4), 2 * r.gen_range(2..4));
    let input = pool_safe(shape, &mut r);
    check_fn("maxpool2x2", &[input], |tape, v| tape.maxpool2x2(v[0]), DEFAULT_H, DEFAULT_TOL)
}

fn op_upsample(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let input = uniform(
        Shape::new(1, r.gen_range(1..3), r.gen_range(2..5), r.gen_range(2..5)),
        -1.0,
        1.0,
        &mut r,
    );
    check_fn("bilinear_upsample2x", &[input], |tape, v| tape.upsample2x(v[0]), DEFAULT_H, DEFAULT_TOL)
}

fn op_broadcast_spatial(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(2..6), r.gen_range(2..6));
    let input = uniform(Shape::new(2, r.gen_range(1..4), 1, 1), -1.0, 1.0, &mut r);
    check_fn(
        "broadcast_spatial",
        &[input],
        move |tape, v| tape.broadcast_spatial(v[0], h, w),
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

fn op_relu(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let input = away_from_zero(Shape::new(1, 2, 4, 4), &mut r);
    check_fn("relu", &[input], |tape, v| tape.relu(v[0]), DEFAULT_H, 1e-6)
}

fn op_sigmoid(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let input = uniform(Shape::new(1, 2, 4, 4), -3.0, 3.0, &mut r);
    check_fn("sigmoid", &[input], |tape, v| tape.sigmoid(v[0]), DEFAULT_H, DEFAULT_TOL)
}

fn op_batchnorm(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let c = r.gen_range(1..4);
    let input = uniform(Shape::new(2, c, 4, 4), -2.0, 2.0, &mut r);
    let gamma = uniform(Shape::new(1, c, 1, 1), 0.5, 1.5, &mut r);
    let beta = uniform(Shape::new(1, c, 1, 1), -0.5, 0.5, &mut r);
    let mut running_mean = vec![0.0f64; c];
    let mut running_var = vec![1.0f64; c];
    check_fn(
        "batchnorm2d",
        &[input, gamma, beta],
        move |tape, v| {
            tape.batchnorm(
                v[0],
                v[1],
                v[2],
                &mut running_mean,
                &mut running_var,
                Mode::Train,
                BN_EPS,
                0.9,
            )
        },
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

fn op_gap(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let input = uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut r);
    check_fn("global_avg_pool", &[input], |tape, v| tape.global_avg_pool(v[0]), DEFAULT_H, DEFAULT_TOL)
}

fn op_dense(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, ci, co) = (r.gen_range(1..3), r.gen_range(2..5), r.gen_range(1..4));
    let input = uniform(Shape::new(n, ci, 1, 1), -1.0, 1.0, &mut r);
    let weight = uniform(Shape::new(co, ci, 1, 1), -1.0, 1.0, &mut r);
    let bias = uniform(Shape::new(1, co, 1, 1), -0.5, 0.5, &mut r);
    check_fn("dense", &[input, weight, bias], |tape, v| tape.dense(v[0], v[1], v[2]), DEFAULT_H, DEFAULT_TOL)
}

fn op_mul(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = Shape::new(1, 2, 3, 3);
    let a = uniform(shape, -1.0, 1.0, &mut r);
    let b = uniform(shape, -1.0, 1.0, &mut r);
    check_fn("elementwise_mul", &[a, b], |tape, v| tape.mul(v[0], v[1]), DEFAULT_H, DEFAULT_TOL)
}

fn op_mul_broadcast(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let a = uniform(Shape::new(1, 3, 3, 3), -1.0, 1.0, &mut r);
    let b = uniform(Shape::new(1, 1, 3, 3), -1.0, 1.0, &mut r);
    check_fn("elementwise_mul_broadcast", &[a, b], |tape, v| tape.mul(v[0], v[1]), DEFAULT_H, DEFAULT_TOL)
}

fn op_add(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = Shape::new(2, 2, 3, 3);
    let a = uniform(shape, -1.0, 1.0, &mut r);
    let b = uniform(shape, -1.0, 1.0, &mut r);
    check_fn("elementwise_add", &[a, b], |tape, v| tape.add(v[0], v[1]), DEFAULT_H, DEFAULT_TOL)
}

fn op_add_broadcast(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let a = uniform(Shape::new(1, 3, 3, 3), -1.0, 1.0, &mut r);
    let b = uniform(Shape::new(1, 1, 3, 3), -1.0, 1.0, &mut r);
    check_fn("elementwise_add_broadcast", &[a, b], |tape, v| tape.add(v[0], v[1]), DEFAULT_H, DEFAULT_TOL)
}

fn op_concat(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let a = uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut r);
    let b = uniform(Shape::new(1, 1, 3, 3), -1.0, 1.0, &mut r);
    let c = uniform(Shape::new(1, 3, 3, 3), -1.0, 1.0, &mut r);
    check_fn(
        "concat_channels",
        &[a, b, c],
        |tape, v| tape.concat_channels(v),
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

fn op_sum(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let a = uniform(Shape::new(1, 2, 3, 4), -1.0, 1.0, &mut r);
    check_fn("sum", &[a], |tape, v| tape.sum(v[0]), DEFAULT_H, DEFAULT_TOL)
}

fn op_bce(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = Shape::new(1, 1, 4, 4);
    let pred = uniform(shape, 0.1, 0.9, &mut r);
    let target = random_binary(shape, &mut r);
    check_fn("bce_loss", &[pred], move |tape, v| tape.bce_loss(v[0], &target), DEFAULT_H, DEFAULT_TOL)
}

fn op_dice(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = Shape::new(1, 1, 4, 4);
    let pred = uniform(shape, 0.05, 0.95, &mut r);
    let target = random_binary(shape, &mut r);
    check_fn(
        "dice_loss",
        &[pred],
        move |tape, v| tape.dice_loss(v[0], &target, 1.0),
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

fn block_conv_block(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (ci, co) = (r.gen_range(2..4), r.gen_range(2..5));
    let ratio = clamp_se_ratio(co, 8);
    let mut block = ConvBlock::<f64>::new("cb", ci, co, Some(ratio), 0.9, &mut r)?;
    let x = uniform(Shape::new(1, ci, 8, 8), -1.0, 1.0, &mut r);
    check_model(
        "conv_block",
        &mut block,
        &[x],
        |m, tape, v| m.forward(tape, v[0], Mode::Train),
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

fn block_squeeze_excite(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let c = [4usize, 6, 8][r.gen_range(0..3)];
    let ratio = clamp_se_ratio(c, 4);
    let mut se = SqueezeExcite::<f64>::new("se", c, ratio, &mut r)?;
    let x = uniform(Shape::new(1, c, 8, 8), -1.0, 1.0, &mut r);
    check_model(
        "squeeze_excite",
        &mut se,
        &[x],
        |m, tape, v| m.forward(tape, v[0]),
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

fn block_aspp(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (ci, co) = (r.gen_range(2..3), r.gen_range(2..3));
    let mut aspp = Aspp::<f64>::new("aspp", ci, co, ASPP_RATES, 0.9, &mut r)?;
    let x = uniform(Shape::new(1, ci, 8, 8), -1.0, 1.0, &mut r);
    check_model(
        "aspp",
        &mut aspp,
        &[x],
        |m, tape, v| m.forward(tape, v[0], Mode::Train),
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

fn block_encoder(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (ci, co) = (2, r.gen_range(2..4));
    let ratio = clamp_se_ratio(co, 8);
    let mut block = EncoderBlock::<f64>::new("enc", ci, co, Some(ratio), 0.9, &mut r)?;
    let x = pool_safe(Shape::new(1, ci, 8, 8), &mut r);
    check_model(
        "encoder_block",
        &mut block,
        &[x],
        |m, tape, v| {
            let (skip, down) = m.forward(tape, v[0], Mode::Train)?;
            // pool halves the spatial size; lift it back and join both
            // outputs so gradients flow through skip and down paths
            let up = tape.upsample2x(down)?;
            tape.add(skip, up)
        },
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

fn block_decoder(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (cx, cs, co) = (2, r.gen_range(1..3), r.gen_range(2..4));
    let ratio = clamp_se_ratio(co, 8);
    let mut block = DecoderBlock::<f64>::new("dec", cx + cs, co, Some(ratio), 0.9, &mut r)?;
    let x = uniform(Shape::new(1, cx, 4, 4), -1.0, 1.0, &mut r);
    let skip = uniform(Shape::new(1, cs, 8, 8), -1.0, 1.0, &mut r);
    check_model(
        "decoder_block",
        &mut block,
        &[x, skip],
        |m, tape, v| m.forward(tape, v[0], &[v[1]], Mode::Train),
        DEFAULT_H,
        DEFAULT_TOL,
    )
}

/// Every checked operation, in display order.
pub fn suite_entries() -> Vec<Entry> {
    vec![
        ("conv2d", op_conv),
        ("conv2d_dilated", op_conv_dilated),
        ("conv2d_strided", op_conv_strided),
        ("maxpool2x2", op_maxpool),
        ("bilinear_upsample2x", op_upsample),
        ("broadcast_spatial", op_broadcast_spatial),
        ("relu", op_relu),
        ("sigmoid", op_sigmoid),
        ("batchnorm2d", op_batchnorm),
        ("global_avg_pool", op_gap),
        ("dense", op_dense),
        ("elementwise_mul", op_mul),
        ("elementwise_mul_broadcast", op_mul_broadcast),
        ("elementwise_add", op_add),
        ("elementwise_add_broadcast", op_add_broadcast),
        ("concat_channels", op_concat),
        ("sum", op_sum),
        ("bce_loss", op_bce),
        ("dice_loss", op_dice),
        ("conv_block", block_conv_block),
        ("squeeze_excite", block_squeeze_excite),
        ("aspp", block_aspp),
        ("encoder_block", block_encoder),
        ("decoder_block", block_decoder),
    ]
}

/// Runs every entry over `seeds` seeds; one aggregated report per op.
pub fn run_standard_suite(seeds: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (name, f) in suite_entries() {
        let mut reports = Vec::with_capacity(seeds as usize);
        for seed in 0..seeds {
            reports.push(f(seed)?);
        }
        out.push(merge(name, reports));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_two_seeds() {
        for report in run_standard_suite(2).unwrap() {
            assert!(
                report.passed(),
                "{}: max rel err {} over {} coords",
                report.name,
                report.max_rel_err,
                report.coords
            );
        }
    }
}
