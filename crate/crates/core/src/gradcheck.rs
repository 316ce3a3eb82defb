//! Central finite-difference checks of every differentiable operation.
//!
//! Each check projects the operation's output onto fixed random weights to get a scalar,
//! then compares reverse-mode gradients with `(f(x + h) − f(x − h)) / 2h` for every input
//! element. The error of one check is `max |a − n| / max(max |a|, max |n|, 1e-8)` over each
//! checked input, maximized across inputs. Where the two one-sided differences of an
//! element disagree the step is shrunk, so a perturbation straddling a ReLU kink is not
//! mistaken for a wrong gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Attrs, Op, Tape, Var};
use crate::error::Result;
use crate::field::{field_stack, NormalizedPoint};
use crate::model::{
    direction_loss, heatmap_loss, total_loss, Batch, DirectionPathwayConfig, GazeNet, HeatmapPathwayConfig,
    ModelConfig, NetworkSpec, TrainConfig,
};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Times the step is divided by 10 when the one-sided differences at an element disagree,
/// which happens when the perturbation crosses a kink such as a ReLU at zero.
const KINK_RETRIES: usize = 2;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub seed: u64,
    /// Perturb the analytic gradient of the named check, to prove the harness can fail.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            seed: 7,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// An input to a checked function; only `checked` inputs are differentiated.
pub struct CheckInput {
    pub value: Tensor,
    pub checked: bool,
}

impl CheckInput {
    pub fn checked(value: Tensor) -> Self {
        CheckInput { value, checked: true }
    }

    pub fn fixed(value: Tensor) -> Self {
        CheckInput { value, checked: false }
    }
}

fn evaluate(inputs: &[Tensor], checked: &[bool], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, weights: &Tensor, grads: bool) -> Result<(f64, Tape, Vec<Var>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(checked)
        .map(|(t, &c)| if grads && c { tape.leaf(t.clone().with_requires_grad(true)) } else { tape.constant(t.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    let value = tape.value(loss).item();
    if grads {
        tape.backward(loss)?;
    }
    Ok((value, tape, vars))
}

/// Compare analytic and numeric gradients of `f` at `inputs`.
pub fn check_function(
    name: &str,
    inputs: Vec<CheckInput>,
    tolerance: f64,
    options: &GradcheckOptions,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let checked: Vec<bool> = inputs.iter().map(|i| i.checked).collect();
    let mut values: Vec<Tensor> = inputs.into_iter().map(|i| i.value).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed);

    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let weights = Tensor::uniform(probe, 0.5, 1.5, &mut rng);

    let (base, tape, vars) = evaluate(&values, &checked, f, &weights, true)?;
    let mut worst = 0.0f64;
    for i in 0..values.len() {
        if !checked[i] {
            continue;
        }
        let mut analytic = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; values[i].len()]);
        if options.corrupt.as_deref() == Some(name) {
            let largest = analytic.iter().fold(1.0, |m: f64, v| m.max(v.abs()));
            analytic[0] += 0.1 * largest;
        }
        let mut numeric = vec![0.0; values[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = values[i].values()[j];
            let mut step = options.step;
            for attempt in 0..=KINK_RETRIES {
                values[i].values_mut()[j] = orig + step;
                let (plus, _, _) = evaluate(&values, &checked, f, &weights, false)?;
                values[i].values_mut()[j] = orig - step;
                let (minus, _, _) = evaluate(&values, &checked, f, &weights, false)?;
                *slot = (plus - minus) / (2.0 * step);
                let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
                if attempt == KINK_RETRIES || (fwd - bwd).abs() <= 0.01 * fwd.abs().max(bwd.abs()) + 1e-6 {
                    break;
                }
                step /= 10.0;
            }
            values[i].values_mut()[j] = orig;
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(1e-8, f64::max);
        worst = worst.max(diff / scale);
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, values).expect("shape")
}

fn attrs(pairs: &[(&str, f64)]) -> Attrs {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Inputs and attributes exercising one built-in kind.
fn op_case(kind: &str, rng: &mut ChaCha8Rng) -> (Vec<CheckInput>, Attrs) {
    let mut n = |shape: &[usize]| CheckInput::checked(Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng));
    match kind {
        "matmul" => (vec![n(&[3, 4]), n(&[4, 2])], Attrs::new()),
        "bias_add" => (vec![n(&[2, 3, 2, 2]), n(&[3])], Attrs::new()),
        "conv2d" => (vec![n(&[2, 2, 6, 6]), n(&[3, 2, 3, 3])], attrs(&[("stride", 2.0), ("pad", 1.0)])),
        "upsample_nearest" => (vec![n(&[1, 2, 2, 3])], attrs(&[("factor", 2.0)])),
        "concat" => (vec![n(&[2, 1, 2, 2]), n(&[2, 2, 2, 2])], Attrs::new()),
        "add" | "mul" => (vec![n(&[2, 3]), n(&[2, 3])], Attrs::new()),
        "scale" => (vec![n(&[2, 3])], attrs(&[("factor", -1.7)])),
        "global_avg_pool" => (vec![n(&[2, 3, 2, 2])], Attrs::new()),
        "flatten" => (vec![n(&[2, 3, 2])], Attrs::new()),
        "l2_normalize" => (vec![n(&[3, 2])], Attrs::new()),
        "sigmoid" | "mean" | "sum" => (vec![n(&[2, 3])], Attrs::new()),
        "relu" | "clamp_zero" => (vec![CheckInput::checked(away_from_zero(rng, vec![2, 3]))], Attrs::new()),
        "pow" => (
            vec![CheckInput::checked(Tensor::uniform(vec![2, 3], 0.5, 1.5, rng))],
            attrs(&[("exponent", 2.5)]),
        ),
        "bce" => (
            vec![
                CheckInput::checked(Tensor::uniform(vec![2, 4], 0.1, 0.9, rng)),
                CheckInput::fixed(Tensor::uniform(vec![2, 4], 0.0, 1.0, rng)),
            ],
            Attrs::new(),
        ),
        "cosine_loss" => (vec![n(&[3, 2]), CheckInput::fixed(away_from_zero(rng, vec![3, 2]))], Attrs::new()),
        other => panic!("no gradient case for `{other}`"),
    }
}

fn tiny_spec() -> NetworkSpec {
    let model = ModelConfig {
        direction: DirectionPathwayConfig {
            crop_resolution: 8,
            conv_channels: [2, 3, 3],
            conv_strides: [2, 1, 1],
            position_width: 4,
            fusion_width: 4,
        },
        heatmap: HeatmapPathwayConfig { channels: vec![2, 3] },
    };
    let train = TrainConfig {
        scene_resolution: 8,
        heatmap_resolution: 8,
        ..TrainConfig::default()
    };
    NetworkSpec::new(&model, &train).expect("tiny network is valid")
}

fn tiny_batch(rng: &mut ChaCha8Rng, n: usize) -> Batch {
    let heads: Vec<NormalizedPoint> = (0..n)
        .map(|_| NormalizedPoint {
            x: rng.gen_range(0.2..0.8),
            y: rng.gen_range(0.2..0.8),
        })
        .collect();
    let dirs: Vec<f64> = (0..n)
        .flat_map(|_| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            [a.cos(), a.sin()]
        })
        .collect();
    Batch {
        crops: Tensor::uniform(vec![n, 3, 8, 8], 0.0, 1.0, rng),
        scenes: Tensor::uniform(vec![n, 3, 8, 8], 0.0, 1.0, rng),
        positions: Tensor::new(vec![n, 2], heads.iter().flat_map(|h| [h.x, h.y]).collect()).expect("shape"),
        heads,
        directions: Tensor::new(vec![n, 2], dirs).expect("shape"),
        targets: Some(Tensor::uniform(vec![n, 1, 8, 8], 0.0, 0.2, rng)),
    }
}

/// Every built-in kind, the gaze field, the direction pathway and the whole network.
pub fn run_suite(options: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut results = Vec::new();
    for kind in Op::DIFFERENTIABLE {
        let (inputs, attrs) = op_case(kind, &mut rng);
        let f = |tape: &mut Tape, vars: &[Var]| tape.op_forward(kind, vars, &attrs);
        results.push(check_function(kind, inputs, TOLERANCE, options, &f)?);
    }

    let heads: Vec<NormalizedPoint> = (0..3)
        .map(|_| NormalizedPoint {
            x: rng.gen_range(0.0..1.0),
            y: rng.gen_range(0.0..1.0),
        })
        .collect();
    let dirs = CheckInput::checked(away_from_zero(&mut rng, vec![3, 2]));
    let f = |tape: &mut Tape, vars: &[Var]| field_stack(tape, vars[0], &heads, 6, 5, &[5.0, 2.0, 1.0]);
    results.push(check_function("gaze_field", vec![dirs], TOLERANCE, options, &f)?);

    let mut net = GazeNet::new(tiny_spec(), options.seed)?;
    // zero biases put dead units exactly on the ReLU kink
    let biases: Vec<_> = net.params.iter().filter(|(_, n, _)| n.ends_with(".bias")).map(|(id, _, _)| id).collect();
    for id in biases {
        let shape = net.params.get(id).shape().to_vec();
        *net.params.get_mut(id) = Tensor::uniform(shape, -0.3, 0.3, &mut rng);
    }
    let batch = tiny_batch(&mut rng, 2);
    let direction_ids = net.direction_params();
    let inputs = direction_ids
        .iter()
        .map(|id| CheckInput::checked(net.params.get(*id).clone()))
        .collect();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let mut all = net.params.bind(tape, |_| false);
        for (id, v) in direction_ids.iter().zip(vars) {
            all[id.0] = *v;
        }
        let crops = tape.constant(batch.crops.clone());
        let positions = tape.constant(batch.positions.clone());
        net.direction_forward(tape, &all, crops, positions)
    };
    results.push(check_function("direction_pathway", inputs, TOLERANCE, options, &f)?);

    let inputs = net.params.iter().map(|(_, _, t)| CheckInput::checked(t.clone())).collect();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let out = net.forward(tape, vars, &batch)?;
        let td = tape.constant(batch.directions.clone());
        let th = tape.constant(batch.targets.clone().expect("targets"));
        let ld = direction_loss(tape, td, out.direction)?;
        let lh = heatmap_loss(tape, th, out.heatmap)?;
        total_loss(tape, ld, lh, 0.5, true)
    };
    results.push(check_function("end_to_end", inputs, END_TO_END_TOLERANCE, options, &f)?);
    Ok(results)
}
