//! The standard finite-difference gradient suite: every differentiable
//! operation, each loss, the loss combination, and a whole small model.
//!
//! Each case builds a scalar by contracting the op's output with a fixed
//! random weighting, so every output element contributes a distinct amount.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Bag, Instance, PATCHES_PER_SLICE, PATCH_PIXELS};
use crate::milnet::{attention_pool_on_tape, BoundModel, MilConfig, MilModel};
use crate::numcore::gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport};
use crate::numcore::tape::ConvGeometry;
use crate::numcore::{BoundLayer, LayerKind, LayerParams, Tape, Tensor, Var};
use crate::ssl::{absolute_loss_on_tape, relative_loss_on_tape, BoundHead, SslHead, SslTask};
use crate::train::bag_loss_on_tape;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("shape matches data").with_grad()
}

/// `Σ r ⊙ x` for a weighting `r` drawn from `seed`.
fn contract(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let mut r = random(&shape, 1.0, &mut rng);
    r.set_requires_grad(false);
    let r = tape.constant(r);
    let prod = tape.mul(x, r)?;
    Ok(tape.sum(prod))
}

fn fc(in_features: usize, out_features: usize) -> LayerKind {
    LayerKind::FullyConnected {
        in_features,
        out_features,
    }
}

fn op_cases(options: GradCheckOptions) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = Vec::new();
    let mut case = |name: &'static str,
                    inputs: Vec<Tensor<f64>>,
                    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = check_gradients(&inputs, options, build)?;
        out.push(CaseReport { name, report });
        Ok(())
    };

    let conv_inputs = |rng: &mut ChaCha8Rng| {
        vec_of([
            random(&[2, 2, 7, 7], 1.0, rng),
            random(&[3, 2, 3, 3], 0.5, rng),
            random(&[3], 0.5, rng),
        ])
    };
    case("conv2d", conv_inputs(&mut rng), &|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry { stride: 1, padding: 0 })?;
        contract(t, y, 1)
    })?;
    case("conv2d (stride 2, padding 1)", conv_inputs(&mut rng), &|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry { stride: 2, padding: 1 })?;
        contract(t, y, 2)
    })?;
    case("maxpool2d", vec_of([random(&[2, 3, 6, 6], 1.0, &mut rng)]), &|t, v| {
        let y = t.max_pool2d(v[0], 2, 2)?;
        contract(t, y, 3)
    })?;
    case(
        "fully_connected",
        vec_of([
            random(&[4, 5], 1.0, &mut rng),
            random(&[3, 5], 0.5, &mut rng),
            random(&[3], 0.5, &mut rng),
        ]),
        &|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            contract(t, y, 4)
        },
    )?;
    case(
        "matmul",
        vec_of([random(&[3, 4], 1.0, &mut rng), random(&[4, 2], 1.0, &mut rng)]),
        &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            contract(t, y, 5)
        },
    )?;
    case("relu", vec_of([random(&[4, 6], 1.0, &mut rng)]), &|t, v| {
        let y = t.relu(v[0]);
        contract(t, y, 6)
    })?;
    case("tanh", vec_of([random(&[4, 6], 2.0, &mut rng)]), &|t, v| {
        let y = t.tanh(v[0]);
        contract(t, y, 7)
    })?;
    case("sigmoid", vec_of([random(&[4, 6], 3.0, &mut rng)]), &|t, v| {
        let y = t.sigmoid(v[0]);
        contract(t, y, 8)
    })?;
    case("softmax", vec_of([random(&[3, 7], 2.0, &mut rng)]), &|t, v| {
        let y = t.softmax_rows(v[0])?;
        contract(t, y, 9)
    })?;

    let (k, m, l) = (5, 6, 4);
    let mut cls = LayerParams::<f64>::init(fc(m, 1), &mut rng);
    if let Some(w) = cls.weight.as_mut() {
        w.set_requires_grad(false);
    }
    case(
        "attention pooling",
        vec_of([
            random(&[k, m], 1.0, &mut rng),
            random(&[l, m], 0.7, &mut rng),
            random(&[1, l], 0.7, &mut rng),
        ]),
        &|t, v| {
            let classifier = cls.bind(t);
            let bound = BoundModel {
                extractor: Vec::new(),
                attention_v: v[1],
                attention_w: v[2],
                classifier,
                ssl_head: None,
            };
            let (z, a) = attention_pool_on_tape(t, &bound, v[0])?;
            let sz = contract(t, z, 10)?;
            let sa = contract(t, a, 11)?;
            t.add(sz, sa)
        },
    )?;
    case(
        "MIL binary cross-entropy (positive)",
        vec_of([random(&[1, 1], 3.0, &mut rng)]),
        &|t, v| t.bce_with_logits_mean(v[0], &[1]),
    )?;
    case(
        "MIL binary cross-entropy (negative)",
        vec_of([random(&[1, 1], 3.0, &mut rng)]),
        &|t, v| t.bce_with_logits_mean(v[0], &[0]),
    )?;

    // pretext losses over two complete slices of a 24-instance feature matrix
    let m = 5;
    let slices: [[usize; PATCHES_PER_SLICE]; 2] = [core::array::from_fn(|i| 23 - i), core::array::from_fn(|i| i)];
    for task in [SslTask::Relative, SslTask::Absolute] {
        let head = SslHead::<f64>::new(task, m, 6, &mut rng);
        let mut inputs = vec_of([random(&[24, m], 1.0, &mut rng)]);
        inputs.extend(head.params().cloned());
        let name = match task {
            SslTask::Relative => "relative-location cross-entropy",
            _ => "absolute-location cross-entropy",
        };
        case(name, inputs, &|t, v| {
            let bound = BoundHead {
                task,
                hidden: bound_fc(head.hidden.kind, v[1], v[2]),
                output: bound_fc(head.output.kind, v[3], v[4]),
            };
            match task {
                SslTask::Relative => relative_loss_on_tape(t, &bound, v[0], &slices),
                _ => absolute_loss_on_tape(t, &bound, v[0], &slices),
            }
        })?;
    }
    case(
        "loss combination",
        vec_of([random(&[1], 1.0, &mut rng), random(&[1], 3.0, &mut rng)]),
        &|t, v| crate::ssl::total_loss_on_tape(t, v[0], v[1], 0.3),
    )?;
    Ok(out)
}

fn vec_of<const N: usize>(items: [Tensor<f64>; N]) -> Vec<Tensor<f64>> {
    items.into_iter().collect()
}

fn bound_fc(kind: LayerKind, weight: Var, bias: Var) -> BoundLayer {
    BoundLayer {
        kind,
        weight: Some(weight),
        bias: Some(bias),
    }
}

/// A small bag with one complete slice plus two loose patches.
fn probe_bag(rng: &mut ChaCha8Rng) -> Bag {
    let instances = (0..PATCHES_PER_SLICE + 2)
        .map(|i| Instance {
            pixels: (0..PATCH_PIXELS).map(|_| rng.random_range(0.0f32..1.0)).collect(),
            slice_index: (i / PATCHES_PER_SLICE) as u32,
            grid_position: (i % PATCHES_PER_SLICE) as u8,
            metadata_valid: true,
        })
        .collect();
    Bag {
        id: "gradcheck".into(),
        label: 1,
        instances,
        is_virtual: false,
    }
}

/// Finite differences over every parameter of a small model, through the
/// full per-bag training loss.
pub fn check_model(task: SslTask, options: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let config = MilConfig::reduced();
    let mut model = MilModel::<f64>::new(config, task, 6, &mut rng)?;
    // non-zero biases so that no ReLU sits exactly at its kink
    for p in model.params_mut() {
        if p.shape().len() == 1 {
            p.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    // sharper attention than at initialisation, so that V and w carry
    // gradients well above finite-difference rounding
    for p in [&mut model.attention_v, &mut model.attention_w] {
        p.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    }
    let bag = probe_bag(&mut rng);
    let loss_of = |model: &MilModel<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let step = bag_loss_on_tape(&mut tape, &bound, &bag, 0.3)?;
        Ok(tape.scalar(step.total))
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let step = bag_loss_on_tape(&mut tape, &bound, &bag, 0.3)?;
    tape.backward(step.total)?;
    model.absorb_grads(&tape, &bound);
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad().unwrap_or(&[]).to_vec())
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = model.clone();
    for (i, grad) in analytic.iter().enumerate() {
        let numel = grad.len();
        let stride = match options.max_elements_per_input {
            Some(limit) if limit > 0 && numel > limit => numel.div_ceil(limit),
            _ => 1,
        };
        for j in (0..numel).step_by(stride) {
            let original = work.params()[i].data()[j];
            work.params_mut()[i].data_mut()[j] = original + options.step;
            let plus = loss_of(&work)?;
            work.params_mut()[i].data_mut()[j] = original - options.step;
            let minus = loss_of(&work)?;
            work.params_mut()[i].data_mut()[j] = original;
            let err = relative_error(grad[j], (plus - minus) / (2.0 * options.step));
            report.elements_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Runs every case and returns one report per case.
pub fn standard_suite() -> Result<Vec<CaseReport>> {
    let options = GradCheckOptions::default();
    let mut out = op_cases(options)?;
    let sampled = GradCheckOptions {
        max_elements_per_input: Some(40),
        ..options
    };
    out.push(CaseReport {
        name: "model end-to-end (relative pretext)",
        report: check_model(SslTask::Relative, sampled)?,
    });
    out.push(CaseReport {
        name: "model end-to-end (absolute pretext)",
        report: check_model(SslTask::Absolute, sampled)?,
    });
    Ok(out)
}
