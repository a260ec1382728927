//! Central finite-difference verification of analytic gradients.
//!
//! Non-scalar outputs are reduced to a scalar by a fixed random projection
//! `loss = sum(out * R)`, so every output coordinate influences the check
//! with a distinct weight.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::VisitParams;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub coords: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

/// Relative error with a floor so near-zero gradient pairs compare on an
/// absolute scale.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn projection(shape: Shape) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70_72_6f_6a);
    Tensor::rand_uniform(shape, 0.5, 1.5, &mut rng)
}

fn project_and_eval<F>(
    forward: &mut F,
    tensors: &[Tensor<f64>],
    proj: &mut Option<Tensor<f64>>,
    want_grads: bool,
) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let out = forward(&mut tape, &vars)?;
    if proj.is_none() {
        *proj = Some(projection(tape.value(out).shape()));
    }
    let r = tape.constant(proj.as_ref().unwrap().clone())?;
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted)?;
    let value = tape.value(loss).data()[0];
    let grads = if want_grads {
        tape.backward(loss)?;
        vars.iter()
            .map(|&v| tape.grad(v).cloned().expect("leaf grads are populated"))
            .collect()
    } else {
        Vec::new()
    };
    Ok((value, grads))
}

/// Checks gradients of `forward` with respect to every coordinate of every
/// tensor in `tensors`.
pub fn check_fn<F>(
    name: &str,
    tensors: &[Tensor<f64>],
    mut forward: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut proj = None;
    let (_, analytic) = project_and_eval(&mut forward, tensors, &mut proj, true)?;

    let mut work: Vec<Tensor<f64>> = tensors.to_vec();
    let mut max_err = 0.0f64;
    let mut coords = 0;
    for j in 0..work.len() {
        for i in 0..work[j].numel() {
            let orig = work[j].data()[i];
            work[j].data_mut()[i] = orig + h;
            let (plus, _) = project_and_eval(&mut forward, &work, &mut proj, false)?;
            work[j].data_mut()[i] = orig - h;
            let (minus, _) = project_and_eval(&mut forward, &work, &mut proj, false)?;
            work[j].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[j].data()[i], numeric));
            coords += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        tol,
        coords,
    })
}

fn poke<M: VisitParams<f64>>(model: &mut M, target: usize, coord: usize, delta: f64) {
    let mut idx = 0;
    model.visit_params(&mut |p| {
        if p.trainable {
            if idx == target {
                p.value.data_mut()[coord] += delta;
            }
            idx += 1;
        }
    });
}

/// Checks gradients of a parameterized model with respect to all trainable
/// parameters and all provided input tensors.
pub fn check_model<M, F>(
    name: &str,
    model: &mut M,
    inputs: &[Tensor<f64>],
    mut forward: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    M: VisitParams<f64>,
    F: FnMut(&mut M, &mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut proj: Option<Tensor<f64>> = None;

    type Eval = (f64, Vec<(String, Tensor<f64>)>, Vec<Tensor<f64>>);
    let mut eval = |model: &mut M,
                    inputs: &[Tensor<f64>],
                    proj: &mut Option<Tensor<f64>>,
                    want: bool|
     -> Result<Eval> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let out = forward(model, &mut tape, &vars)?;
        if proj.is_none() {
            *proj = Some(projection(tape.value(out).shape()));
        }
        let r = tape.constant(proj.as_ref().unwrap().clone())?;
        let weighted = tape.mul(out, r)?;
        let loss = tape.sum(weighted)?;
        let value = tape.value(loss).data()[0];
        if !want {
            return Ok((value, Vec::new(), Vec::new()));
        }
        tape.backward(loss)?;
        let input_grads = vars
            .iter()
            .map(|&v| tape.grad(v).cloned().expect("leaf grads are populated"))
            .collect();
        Ok((value, tape.named_grads(), input_grads))
    };

    let (_, named, input_grads) = eval(model, inputs, &mut proj, true)?;

    // trainable parameter names/lengths in visit order
    let mut meta: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |p| {
        if p.trainable {
            meta.push((p.name.clone(), p.value.numel()));
        }
    });

    let mut max_err = 0.0f64;
    let mut coords = 0;
    for (j, (pname, len)) in meta.iter().enumerate() {
        let analytic = named
            .iter()
            .find(|(n, _)| n == pname)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| panic!("no gradient recorded for {pname}"));
        for i in 0..*len {
            poke(model, j, i, h);
            let (plus, _, _) = eval(model, inputs, &mut proj, false)?;
            poke(model, j, i, -2.0 * h);
            let (minus, _, _) = eval(model, inputs, &mut proj, false)?;
            poke(model, j, i, h);
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic.data()[i], numeric));
            coords += 1;
        }
    }

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for j in 0..work.len() {
        for i in 0..work[j].numel() {
            let orig = work[j].data()[i];
            work[j].data_mut()[i] = orig + h;
            let (plus, _, _) = eval(model, &work, &mut proj, false)?;
            work[j].data_mut()[i] = orig - h;
            let (minus, _, _) = eval(model, &work, &mut proj, false)?;
            work[j].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(input_grads[j].data()[i], numeric));
            coords += 1;
        }
    }

    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        tol,
        coords,
    })
}
