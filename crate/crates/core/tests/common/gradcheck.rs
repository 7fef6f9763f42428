//! Central finite-difference oracle for every tape op kind.

use jiehua_core::tensor::{Conv2dSpec, Rng, Tape, Tensor, Var};

pub const STEP: f32 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub enum OpKind {
    Conv2d,
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    LeakyRelu,
    Silu,
    Tanh,
    Sigmoid,
    LogClamped,
    Reshape,
    Concat,
    Avgpool2,
    Upsample2,
    GroupNorm,
    Sum,
    Mean,
    Mse,
    L1,
}

pub const ALL_OPS: [OpKind; 21] = [
    OpKind::Conv2d,
    OpKind::Matmul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::Relu,
    OpKind::LeakyRelu,
    OpKind::Silu,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::LogClamped,
    OpKind::Reshape,
    OpKind::Concat,
    OpKind::Avgpool2,
    OpKind::Upsample2,
    OpKind::GroupNorm,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Mse,
    OpKind::L1,
];

/// Values in [-1, 1] kept at least `gap` away from zero (kinked ops).
fn away_from_zero(shape: &[usize], gap: f32, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.uniform_range(-1.0, 1.0);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

struct Case {
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&Tape, &[Var]) -> Var>,
}

fn case(kind: OpKind, rng: &mut Rng) -> Case {
    let u = |shape: &[usize], rng: &mut Rng| Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng);
    let dim = |rng: &mut Rng, lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
    match kind {
        OpKind::Conv2d => {
            let (n, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = [1, 3][rng.below(2)];
            let stride = dim(rng, 1, 2);
            let pad = if k == 3 { rng.below(2) } else { 0 };
            let h = dim(rng, 3, 6);
            let bias = rng.bernoulli(0.5);
            let mut inputs = vec![u(&[n, ci, h, h], rng), u(&[co, ci, k, k], rng)];
            if bias {
                inputs.push(u(&[co], rng));
            }
            Case {
                inputs,
                build: Box::new(move |t, v| {
                    t.conv2d(&v[0], &v[1], v.get(2), Conv2dSpec::new(stride, pad))
                        .unwrap()
                }),
            }
        }
        OpKind::Matmul => {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
            Case {
                inputs: vec![u(&[m, k], rng), u(&[k, n], rng)],
                build: Box::new(|t, v| t.matmul(&v[0], &v[1]).unwrap()),
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (n, c, h) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let other: Vec<usize> = match rng.below(3) {
                0 => vec![n, c, h, h],
                1 => vec![n, c, 1, 1],
                _ => vec![h],
            };
            Case {
                inputs: vec![u(&[n, c, h, h], rng), u(&other, rng)],
                build: Box::new(move |t, v| match kind {
                    OpKind::Add => t.add(&v[0], &v[1]).unwrap(),
                    OpKind::Sub => t.sub(&v[1], &v[0]).unwrap(),
                    _ => t.mul(&v[0], &v[1]).unwrap(),
                }),
            }
        }
        OpKind::Scale => {
            let s = rng.uniform_range(-2.0, 2.0);
            Case {
                inputs: vec![u(&[dim(rng, 1, 6)], rng)],
                build: Box::new(move |t, v| t.scale(&v[0], s).unwrap()),
            }
        }
        OpKind::Relu | OpKind::LeakyRelu | OpKind::Silu | OpKind::Tanh | OpKind::Sigmoid => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
            Case {
                inputs: vec![away_from_zero(&shape, 20.0 * STEP, rng).map(|v| 2.0 * v)],
                build: Box::new(move |t, v| match kind {
                    OpKind::Relu => t.relu(&v[0]).unwrap(),
                    OpKind::LeakyRelu => t.leaky_relu(&v[0], 0.2).unwrap(),
                    OpKind::Silu => t.silu(&v[0]).unwrap(),
                    OpKind::Tanh => t.tanh(&v[0]).unwrap(),
                    _ => t.sigmoid(&v[0]).unwrap(),
                }),
            }
        }
        OpKind::LogClamped => Case {
            inputs: vec![Tensor::uniform([dim(rng, 1, 6)], 0.2, 1.5, rng)],
            build: Box::new(|t, v| t.log_clamped(&v[0], 1e-7).unwrap()),
        },
        OpKind::Reshape => {
            let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
            Case {
                inputs: vec![u(&[a, b], rng)],
                build: Box::new(move |t, v| t.reshape(&v[0], &[b, a]).unwrap()),
            }
        }
        OpKind::Concat => {
            let (n, h) = (dim(rng, 1, 2), dim(rng, 1, 3));
            let (c1, c2) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let axis = rng.below(2);
            let (s1, s2) = if axis == 1 {
                ([n, c1, h, h], [n, c2, h, h])
            } else {
                ([c1, n, h, h], [c2, n, h, h])
            };
            Case {
                inputs: vec![u(&s1, rng), u(&s2, rng)],
                build: Box::new(move |t, v| t.concat(&[&v[0], &v[1]], axis).unwrap()),
            }
        }
        OpKind::Avgpool2 | OpKind::Upsample2 => {
            let (n, c, h) = (dim(rng, 1, 2), dim(rng, 1, 3), 2 * dim(rng, 1, 3));
            Case {
                inputs: vec![u(&[n, c, h, h], rng)],
                build: Box::new(move |t, v| match kind {
                    OpKind::Avgpool2 => t.avgpool2(&v[0]).unwrap(),
                    _ => t.upsample2(&v[0]).unwrap(),
                }),
            }
        }
        OpKind::GroupNorm => {
            let groups = dim(rng, 1, 2);
            let c = groups * dim(rng, 1, 2);
            let (n, h) = (dim(rng, 1, 2), dim(rng, 2, 3));
            Case {
                inputs: vec![u(&[n, c, h, h], rng), u(&[c], rng), u(&[c], rng)],
                build: Box::new(move |t, v| {
                    t.group_norm(&v[0], groups, &v[1], &v[2], 1e-5).unwrap()
                }),
            }
        }
        OpKind::Sum | OpKind::Mean => Case {
            inputs: vec![u(&[dim(rng, 1, 3), dim(rng, 1, 4)], rng)],
            build: Box::new(move |t, v| match kind {
                OpKind::Sum => t.sum(&v[0]).unwrap(),
                _ => t.mean(&v[0]).unwrap(),
            }),
        },
        OpKind::Mse | OpKind::L1 => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
            let a = u(&shape, rng);
            let gap = away_from_zero(&shape, 20.0 * STEP, rng);
            let b = Tensor::new(
                shape.to_vec(),
                a.data()
                    .iter()
                    .zip(gap.data())
                    .map(|(x, d)| x + d)
                    .collect(),
            )
            .unwrap();
            Case {
                inputs: vec![a, b],
                build: Box::new(move |t, v| match kind {
                    OpKind::Mse => t.mse(&v[0], &v[1]).unwrap(),
                    _ => t.l1(&v[0], &v[1]).unwrap(),
                }),
            }
        }
    }
}

fn projected(output: &Tensor, weights: &[f32]) -> f64 {
    output
        .data()
        .iter()
        .zip(weights)
        .map(|(&o, &w)| o as f64 * w as f64)
        .sum()
}

/// Relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over
/// every input of one random instance of `kind`.
pub fn relative_error(kind: OpKind, rng: &mut Rng) -> f64 {
    let Case { inputs, build } = case(kind, rng);

    let probe_shape = {
        let t = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().cloned().map(|x| t.constant(x)).collect();
        build(&t, &vars).shape().to_vec()
    };
    let weights = Tensor::uniform(probe_shape.clone(), -1.0, 1.0, rng);

    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().cloned().map(|x| tape.leaf(x)).collect();
    let out = build(&tape, &leaves);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(&out, &w).unwrap();
    let loss = tape.sum(&prod).unwrap();
    let grads = tape.backward(&loss, &mut []).unwrap();

    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).expect("leaf gradient").to_vec();
        for j in 0..inputs[i].numel() {
            let eval = |delta: f32| {
                let mut perturbed = inputs.clone();
                perturbed[i].data_mut()[j] += delta;
                let t = Tape::no_grad();
                let vars: Vec<Var> = perturbed.into_iter().map(|x| t.constant(x)).collect();
                projected(build(&t, &vars).value(), weights.data())
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP as f64);
            let a = analytic[j] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let scale = a2.sqrt().max(n2.sqrt());
    if scale < 1e-9 {
        0.0
    } else {
        diff2.sqrt() / scale
    }
}
