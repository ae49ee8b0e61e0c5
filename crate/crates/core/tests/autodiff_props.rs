use proptest::prelude::*;
use qfix::autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

type Build = fn(&mut Graph, &[Var]) -> Var;

struct Case {
    shapes: &'static [&'static [usize]],
    build: Build,
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", Case { shapes: &[&[2, 3], &[3, 2]], build: |g, x| g.matmul(x[0], x[1]).unwrap() }),
        ("batched_vecmat", Case { shapes: &[&[2, 3], &[2, 6]], build: |g, x| g.batched_vecmat(x[0], x[1]).unwrap() }),
        ("add", Case { shapes: &[&[2, 3], &[2, 3]], build: |g, x| g.add(x[0], x[1]).unwrap() }),
        ("add_broadcast", Case { shapes: &[&[2, 3], &[3]], build: |g, x| g.add(x[0], x[1]).unwrap() }),
        ("sub", Case { shapes: &[&[2, 3], &[2, 3]], build: |g, x| g.sub(x[0], x[1]).unwrap() }),
        ("mul", Case { shapes: &[&[2, 3], &[2, 3]], build: |g, x| g.mul(x[0], x[1]).unwrap() }),
        ("mul_broadcast", Case { shapes: &[&[3], &[2, 3]], build: |g, x| g.mul(x[0], x[1]).unwrap() }),
        ("relu", Case { shapes: &[&[2, 3]], build: |g, x| g.relu(x[0]) }),
        ("abs", Case { shapes: &[&[2, 3]], build: |g, x| g.abs(x[0]) }),
        ("sum", Case { shapes: &[&[2, 3]], build: |g, x| g.sum(x[0]) }),
        ("mean", Case { shapes: &[&[2, 3]], build: |g, x| g.mean(x[0]) }),
        ("sum_last_dim", Case { shapes: &[&[2, 3]], build: |g, x| g.sum_last_dim(x[0]) }),
        ("max_last_dim", Case { shapes: &[&[3, 4]], build: |g, x| g.max_last_dim(x[0]).unwrap() }),
        ("gather_last_dim", Case { shapes: &[&[3, 4]], build: |g, x| g.gather_last_dim(x[0], &[2, 0, 3]).unwrap() }),
        ("mse", Case { shapes: &[&[2, 3], &[2, 3]], build: |g, x| g.mse(x[0], x[1]).unwrap() }),
        ("concat", Case { shapes: &[&[2, 1], &[2, 3]], build: |g, x| g.concat(&[x[0], x[1]]).unwrap() }),
        ("scale", Case { shapes: &[&[2, 3]], build: |g, x| g.scale(x[0], -1.7) }),
        ("add_scalar", Case { shapes: &[&[2, 3]], build: |g, x| g.add_scalar(x[0], 0.4) }),
        ("reshape", Case { shapes: &[&[2, 3]], build: |g, x| g.reshape(x[0], &[3, 2]).unwrap() }),
    ]
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// `Σ c ⊙ op(inputs)`, with inputs as variables or constants.
fn loss(case: &Case, inputs: &[Tensor], coeff: &[f64], grad: bool) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if grad { g.variable(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = (case.build)(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let c = g.constant(Tensor::new(shape, coeff[..g.value(out).len()].to_vec()).unwrap());
    let weighted = g.mul(out, c).unwrap();
    let root = g.sum(weighted);
    (g, vars, root)
}

/// Largest relative error between analytic and central-difference
/// gradients, or `None` when the point sits too close to a kink.
fn fd_error(case: &Case, seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    let coeff: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (g, vars, root) = loss(case, &inputs, &coeff, true);
    if g.kink_margin() < 1e-3 {
        return None;
    }
    let grads = g.backward(root).unwrap();
    let eval = |ins: &[Tensor]| {
        let (g, _, root) = loss(case, ins, &coeff, false);
        g.value(root).item()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt_or_zero(&g, *v);
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        }
    }
    Some(worst)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>()) {
        for (name, case) in cases() {
            if let Some(err) = fd_error(&case, seed) {
                prop_assert!(err < REL_TOL, "{name}: relative error {err:e}");
            }
        }
    }

    #[test]
    fn stop_gradient_is_identity_with_zero_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[3, 4]);
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let s = g.stop_gradient(v);
        prop_assert_eq!(g.value(s), &x);
        // x + sg(x)² : only the first term reaches x
        let sq = g.mul(s, s).unwrap();
        let y = g.add(v, sq).unwrap();
        let root = g.sum(y);
        let grads = g.backward(root).unwrap();
        prop_assert!(grads.wrt_or_zero(&g, v).data().iter().all(|&d| d == 1.0));
        prop_assert!(grads.wrt(s).map_or(true, |t| t.data().iter().all(|&d| d == 0.0)) || !g.requires_grad(s));
    }

    #[test]
    fn tape_is_deterministic(seed in any::<u64>()) {
        for (_, case) in cases() {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
                let coeff: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (g, vars, root) = loss(&case, &inputs, &coeff, true);
                let grads = g.backward(root).unwrap();
                let gs: Vec<Vec<u64>> = vars
                    .iter()
                    .map(|v| grads.wrt_or_zero(&g, *v).data().iter().map(|x| x.to_bits()).collect())
                    .collect();
                (g.value(root).item().to_bits(), gs)
            };
            prop_assert_eq!(run(), run());
        }
    }
}
