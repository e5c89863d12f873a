use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4rec_core::tensor::{Tape, Tensor, Var};

pub const H: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Max relative error between the tape gradient and central differences of
/// `sum(w * f(inputs))` for fixed random weights `w`.
pub fn check<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>], want_grad: bool| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(out).to_vec();
        let w = random(&shape, -1.0, 1.0, &mut rng);
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.reduce_sum(prod);
        let value = tape.value(loss).item();
        let grads = want_grad.then(|| {
            let g = tape.backward(loss).unwrap();
            vars.iter()
                .map(|&v| g.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let analytic = eval(inputs, true).1.unwrap();
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + H;
            let up = eval(&xs, false).0;
            xs[i].data_mut()[j] = orig - H;
            let down = eval(&xs, false).0;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

use s4rec_core::augment::AugmentConfig;
use s4rec_core::dataio::PreparedDataset;
use s4rec_core::encoder::EncoderConfig;
use s4rec_core::intent::{DetachedTargets, IntentConfig};
use s4rec_core::objectives::{AblationMode, LossReport, LossWeights};
use s4rec_core::pipeline::{assemble, augment_context, training_sequences, S4Rec, TaskTimes, TrainBatch};

pub struct ToyProblem {
    pub model: S4Rec<f64>,
    pub batch: TrainBatch,
    pub weights: LossWeights,
}

/// Four users over 20 items with d = 8 and K = 4, every loss term active.
pub fn toy_problem() -> ToyProblem {
    let seqs = vec![
        vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
        vec![11, 12, 13, 14, 15, 16],
        vec![2, 4, 6, 8, 10, 12],
        vec![20, 19, 18, 17, 16, 15],
    ];
    let ds = PreparedDataset::from_id_sequences(seqs, 20, 0.2).unwrap();
    let enc = EncoderConfig {
        dim: 8,
        max_len: 6,
        num_blocks: 2,
        num_heads: 2,
        dropout: 0.1,
        ..EncoderConfig::default()
    };
    let intent = IntentConfig {
        k: 4,
        ..IntentConfig::default()
    };
    let mut model = S4Rec::<f64>::new(enc, intent, 20, 13).unwrap();
    // larger weights than the default initialiser so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for id in model.params.ids().collect::<Vec<_>>() {
        let t = model.params.get_mut(id);
        if t.shape().len() == 2 {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
    }
    model.bank.renormalise(&mut model.params);
    let train = training_sequences(&ds);
    let refs: Vec<_> = train.iter().collect();
    let ctx = augment_context(&ds, 6, &train).unwrap();
    let menu = AugmentConfig::default().ops();
    let batch = assemble(&refs, 6, Some((&menu, &ctx)), &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let weights = LossWeights {
        alpha: 1.0,
        beta1: 1.0,
        beta2: 1.0,
        lambda: 0.5,
        tau1: 0.5,
        tau2: 0.5,
        tau3: 1.0,
    };
    ToyProblem { model, batch, weights }
}

fn toy_loss(p: &ToyProblem, targets: &mut DetachedTargets, grad: bool) -> (LossReport, Option<Vec<Tensor<f64>>>) {
    let mut tape = if grad { Tape::new() } else { Tape::inference() };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut times = TaskTimes::default();
    let (loss, report) = p
        .model
        .forward(
            &mut tape,
            &p.batch,
            &p.weights,
            AblationMode::Full,
            true,
            &mut rng,
            targets,
            &mut times,
        )
        .unwrap();
    let grads = grad.then(|| {
        let g = tape.backward(loss).unwrap();
        p.model
            .params
            .iter()
            .map(|(id, _, t)| g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    });
    (report, grads)
}

/// Max relative error over every parameter of the full model; the detached
/// targets are recorded once and replayed for the perturbed evaluations.
///
/// Below the reversal layer the tape follows `-lambda` times the adversary
/// loss rather than its true derivative, so the finite-difference objective
/// for those parameters is `total - (1 + lambda) * l_adv`.
pub fn full_model_error() -> (f64, usize) {
    let mut p = toy_problem();
    let mut targets = DetachedTargets::recording();
    let analytic = toy_loss(&p, &mut targets, true).1.unwrap();
    let targets = targets.into_replay();
    let ids: Vec<_> = p.model.params.ids().collect();
    let adversary = p.model.adversary.param_ids();
    let lambda = p.weights.lambda;
    let objective = |r: LossReport, above_reversal: bool| {
        if above_reversal {
            r.total
        } else {
            r.total - (1.0 + lambda) * r.l_adv
        }
    };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..p.model.params.get(id).len() {
            let orig = p.model.params.get(id).data()[j];
            p.model.params.get_mut(id).data_mut()[j] = orig + H;
            let up = objective(toy_loss(&p, &mut targets.clone(), false).0, adversary.contains(&id));
            p.model.params.get_mut(id).data_mut()[j] = orig - H;
            let down = objective(toy_loss(&p, &mut targets.clone(), false).0, adversary.contains(&id));
            p.model.params.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[i].data()[j], (up - down) / (2.0 * H)));
            count += 1;
        }
    }
    (worst, count)
}

pub type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Graph,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// One small graph per differentiable kernel.
pub fn kernel_cases() -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut r;
    let mut u = |shape: &[usize], lo: f64, hi: f64| random(shape, lo, hi, r);
    vec![
        case("matmul", vec![u(&[3, 4], -1.0, 1.0), u(&[4, 5], -1.0, 1.0)], |t, v| {
            t.matmul(v[0], v[1]).unwrap()
        }),
        case(
            "matmul_nt",
            vec![u(&[3, 4], -1.0, 1.0), u(&[5, 4], -1.0, 1.0)],
            |t, v| t.matmul_nt(v[0], v[1]).unwrap(),
        ),
        case("add", vec![u(&[3, 4], -1.0, 1.0), u(&[3, 4], -1.0, 1.0)], |t, v| {
            t.add(v[0], v[1]).unwrap()
        }),
        case("mul", vec![u(&[3, 4], -1.0, 1.0), u(&[3, 4], -1.0, 1.0)], |t, v| {
            t.mul(v[0], v[1]).unwrap()
        }),
        case("scale", vec![u(&[3, 4], -1.0, 1.0)], |t, v| t.scale(v[0], -1.7)),
        case("add_bias", vec![u(&[3, 4], -1.0, 1.0), u(&[4], -1.0, 1.0)], |t, v| {
            t.add_bias(v[0], v[1]).unwrap()
        }),
        case("embedding_gather", vec![u(&[5, 3], -1.0, 1.0)], |t, v| {
            t.embedding_gather(v[0], &[4, 0, 4, 2]).unwrap()
        }),
        case("slice_rows", vec![u(&[4, 3], -1.0, 1.0)], |t, v| {
            t.slice_rows(v[0], 1, 3).unwrap()
        }),
        case(
            "concat_rows",
            vec![u(&[2, 3], -1.0, 1.0), u(&[1, 3], -1.0, 1.0)],
            |t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap(),
        ),
        case("reshape", vec![u(&[4, 3], -1.0, 1.0)], |t, v| {
            t.reshape(v[0], &[2, 6]).unwrap()
        }),
        case("softmax", vec![u(&[3, 5], -2.0, 2.0)], |t, v| t.softmax(v[0])),
        case("log_softmax", vec![u(&[3, 5], -2.0, 2.0)], |t, v| t.log_softmax(v[0])),
        case(
            "layernorm",
            vec![u(&[3, 6], -2.0, 2.0), u(&[6], 0.5, 1.5), u(&[6], -0.5, 0.5)],
            |t, v| t.layernorm(v[0], v[1], v[2], 1e-12).unwrap(),
        ),
        case("gelu", vec![u(&[3, 5], -3.0, 3.0)], |t, v| t.gelu(v[0])),
        // kept away from the kink at zero
        case("relu", vec![u(&[3, 2], 0.1, 1.0), u(&[3, 2], -1.0, -0.1)], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]]).unwrap();
            t.relu(c)
        }),
        case("dropout", vec![u(&[4, 6], -1.0, 1.0)], |t, v| {
            t.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(5))
        }),
        case(
            "causal_masked_attention",
            vec![u(&[8, 4], -1.0, 1.0), u(&[8, 4], -1.0, 1.0), u(&[8, 4], -1.0, 1.0)],
            |t, v| {
                let valid = [false, true, true, true, false, false, true, true];
                t.causal_masked_attention(v[0], v[1], v[2], 2, 4, 2, &valid).unwrap()
            },
        ),
        case("l2_normalize", vec![u(&[3, 4], -1.0, 1.0)], |t, v| t.l2_normalize(v[0])),
        case("log", vec![u(&[3, 4], 0.2, 2.0)], |t, v| t.log(v[0])),
        case("exp", vec![u(&[3, 4], -1.0, 1.0)], |t, v| t.exp(v[0])),
        case("reduce_sum", vec![u(&[3, 4], -1.0, 1.0)], |t, v| t.reduce_sum(v[0])),
        case("reduce_mean", vec![u(&[3, 4], -1.0, 1.0)], |t, v| t.reduce_mean(v[0])),
        case("sum_last_axis", vec![u(&[3, 4], -1.0, 1.0)], |t, v| {
            t.sum_last_axis(v[0])
        }),
        case("pick", vec![u(&[3, 4], -1.0, 1.0)], |t, v| {
            t.pick(v[0], &[3, 0, 2]).unwrap()
        }),
        case("identity", vec![u(&[3, 4], -1.0, 1.0)], |t, v| t.identity(v[0])),
        // gradient reversal is not a derivative by design; it is checked
        // exactly against -lambda times the identity gradient instead
    ]
}

/// Random compositions of the kernels over a small pool of values.
pub fn random_graph(t: &mut Tape<f64>, v: &[Var], seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = vec![v[0], v[1]];
    let (w, b, g) = (v[2], v[3], v[4]);
    for _ in 0..r.random_range(3..9) {
        let x = pool[r.random_range(0..pool.len())];
        let y = pool[r.random_range(0..pool.len())];
        let out = match r.random_range(0..11) {
            0 => t.add(x, y).unwrap(),
            1 => t.mul(x, y).unwrap(),
            2 => t.matmul(x, w).unwrap(),
            3 => t.add_bias(x, b).unwrap(),
            4 => t.gelu(x),
            5 => t.softmax(x),
            6 => t.log_softmax(x),
            7 => t.l2_normalize(x),
            8 => t.layernorm(x, g, b, 1e-5).unwrap(),
            9 => {
                let s = t.scale(x, 0.5);
                t.exp(s)
            }
            _ => {
                let rows = t.matmul_nt(x, y).unwrap();
                let p = t.softmax(rows);
                t.matmul(p, x).unwrap()
            }
        };
        pool.push(out);
    }
    *pool.last().unwrap()
}

pub fn random_graph_inputs(seed: u64) -> Vec<Tensor<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
    vec![
        random(&[3, 4], -1.0, 1.0, &mut r),
        random(&[3, 4], -1.0, 1.0, &mut r),
        random(&[4, 4], -0.7, 0.7, &mut r),
        random(&[4], -0.5, 0.5, &mut r),
        random(&[4], 0.5, 1.5, &mut r),
    ]
}

/// Worst relative error per kernel.
pub fn kernel_errors() -> Vec<(&'static str, f64)> {
    kernel_cases()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c.name, check(&c.inputs, i as u64, c.f)))
        .collect()
}

pub fn random_graph_error(count: u64) -> f64 {
    (0..count)
        .map(|seed| check(&random_graph_inputs(seed), seed, |t, v| random_graph(t, v, seed)))
        .fold(0.0, f64::max)
}
