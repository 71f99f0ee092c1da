use collafuse::autograd::Graph;
use collafuse::rng::{normal_vec, seeded};
use collafuse::tensor::{Tensor, TensorError};
use collafuse::Var;
use proptest::prelude::*;

type T = Tensor<f64>;

const H: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between tape gradients and central differences
/// over every element of every leaf.
fn max_grad_error(leaves: &[T], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let forward = |ls: &[T]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ls.iter().map(|l| g.leaf(l)).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (mut g, vars, out) = forward(leaves);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap().to_vec();
        for j in 0..leaf.numel() {
            let mut probe = leaves.to_vec();
            probe[i].data_mut()[j] += H;
            let (g1, _, o1) = forward(&probe);
            probe[i].data_mut()[j] -= 2.0 * H;
            let (g2, _, o2) = forward(&probe);
            let numeric = (g1.value(o1).item().unwrap() - g2.value(o2).item().unwrap()) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

fn leaf(shape: &[usize], seed: u64) -> T {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut seeded(seed), n).iter().map(|v| 0.5 * v).collect())
        .unwrap()
        .with_grad()
}

#[derive(Debug, Clone)]
enum Step {
    Add,
    Sub,
    Mul,
    MulScalar,
    Scale(f64),
    Square,
    Silu,
    MatMul,
    AddRow,
    ConcatMatMul,
    ReshapeRoundtrip,
}

#[derive(Debug, Clone)]
enum Head {
    Sum,
    Mse,
    Weighted(Vec<f64>),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Add),
        Just(Step::Sub),
        Just(Step::Mul),
        Just(Step::MulScalar),
        (-2.0..2.0f64).prop_map(Step::Scale),
        Just(Step::Square),
        Just(Step::Silu),
        Just(Step::MatMul),
        Just(Step::AddRow),
        Just(Step::ConcatMatMul),
        Just(Step::ReshapeRoundtrip),
    ]
}

fn head() -> impl Strategy<Value = Head> {
    prop_oneof![Just(Head::Sum), Just(Head::Mse), prop::collection::vec(0.1..2.0f64, 2).prop_map(Head::Weighted)]
}

// Leaves: x[2,3], y[2,3], s[], w[3,3], b[3], c[2,2], w2[5,3], target[2,3].
fn composite_leaves(seed: u64) -> Vec<T> {
    let shapes: [&[usize]; 8] = [&[2, 3], &[2, 3], &[], &[3, 3], &[3], &[2, 2], &[5, 3], &[2, 3]];
    shapes.iter().enumerate().map(|(i, s)| leaf(s, seed * 31 + i as u64)).collect()
}

fn composite(g: &mut Graph<f64>, v: &[Var], steps: &[Step], head: &Head) -> Var {
    let mut cur = v[0];
    for s in steps {
        cur = match s {
            Step::Add => g.add(cur, v[1]).unwrap(),
            Step::Sub => g.sub(v[1], cur).unwrap(),
            Step::Mul => g.mul(cur, v[1]).unwrap(),
            Step::MulScalar => g.mul(v[2], cur).unwrap(),
            Step::Scale(f) => g.scale(cur, *f),
            Step::Square => g.square(cur),
            Step::Silu => g.silu(cur),
            Step::MatMul => g.matmul(cur, v[3]).unwrap(),
            Step::AddRow => g.add_row(cur, v[4]).unwrap(),
            Step::ConcatMatMul => {
                let wide = g.concat_cols(cur, v[5]).unwrap();
                g.matmul(wide, v[6]).unwrap()
            }
            Step::ReshapeRoundtrip => {
                let flat = g.reshape(cur, &[3, 2]).unwrap();
                g.reshape(flat, &[2, 3]).unwrap()
            }
        };
    }
    match head {
        Head::Sum => g.sum(cur),
        Head::Mse => g.mse_loss(cur, v[7]).unwrap(),
        Head::Weighted(w) => g.weighted_mse(cur, v[7], w).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_composite_graphs_match_finite_differences(
        seed in 0u64..1_000_000,
        steps in prop::collection::vec(step(), 1..8),
        head in head(),
    ) {
        let leaves = composite_leaves(seed);
        let err = max_grad_error(&leaves, |g, v| composite(g, v, &steps, &head));
        prop_assert!(err < 1e-4, "relative error {err:e} for {steps:?} / {head:?}");
    }
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let leaves = vec![leaf(&[4, 3], 1), leaf(&[3, 8], 2), leaf(&[8], 3), leaf(&[8, 2], 4), leaf(&[2], 5), leaf(&[4, 2], 6)];
    let err = max_grad_error(&leaves, |g, v| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let h = g.add_row(h, v[2]).unwrap();
        let h = g.silu(h);
        let o = g.matmul(h, v[3]).unwrap();
        let o = g.add_row(o, v[4]).unwrap();
        g.mse_loss(o, v[5]).unwrap()
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn conv_pathway_matches_finite_differences() {
    // 32 + 54 + 3 + 3 + 48 scalars.
    let leaves = vec![leaf(&[1, 2, 4, 4], 7), leaf(&[3, 2, 3, 3], 8), leaf(&[3], 9), leaf(&[1, 3], 10), leaf(&[1, 3, 4, 4], 11)];
    let err = max_grad_error(&leaves, |g, v| {
        let h = g.conv2d(v[0], v[1], v[2]).unwrap();
        let h = g.silu(h);
        let p = g.avg_pool2(h).unwrap();
        let u = g.upsample2(p).unwrap();
        let u = g.add_channel(u, v[3]).unwrap();
        let r = g.add(u, h).unwrap();
        g.weighted_mse(r, v[4], &[0.7]).unwrap()
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn mse_gradient_is_two_residual_over_n() {
    let pred = Tensor::from_slice(vec![2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap().with_grad();
    let target = Tensor::from_slice(vec![2, 2], &[0.0, 1.0, 0.5, -1.0]).unwrap();
    let mut g = Graph::new();
    let (p, t) = (g.leaf(&pred), g.leaf(&target));
    let l = g.mse_loss(p, t).unwrap();
    g.backward(l).unwrap();
    let expected: Vec<f64> = pred.data().iter().zip(target.data()).map(|(a, b)| 2.0 * (a - b) / 4.0).collect();
    assert_eq!(g.grad(p).unwrap(), expected.as_slice());
}

#[test]
fn second_backward_is_rejected() {
    let x = Tensor::from_slice(vec![3], &[1.0, 2.0, 3.0]).unwrap().with_grad();
    let mut g = Graph::new();
    let v = g.leaf(&x);
    let s = g.sum(v);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::GraphConsumed)));
}

#[test]
fn identical_sequences_are_bit_identical() {
    let run = || {
        let leaves = composite_leaves(42);
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|l| g.leaf(l)).collect();
        let out = composite(&mut g, &vars, &[Step::MatMul, Step::Silu, Step::ConcatMatMul, Step::Square], &Head::Mse);
        g.backward(out).unwrap();
        (g.value(out).data().to_vec(), vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
