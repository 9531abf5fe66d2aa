use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{finite_difference_oracle, max_relative_error};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn eval1(g: &Graph<f64>, b: &Bindings<'_, f64>, n: NodeRef) -> Tensor<f64> {
    g.eval(b, &[n]).unwrap()[n].clone()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type Build = dyn Fn(&mut Graph<f64>, &[NodeRef]) -> Result<NodeRef>;

/// Reduces `build`'s output to a scalar with fixed random weights, then
/// compares `grad` against central differences for every input. Returns the
/// worst relative error.
fn gradient_gap(build: &Build, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> f64 {
    let scalarize = |g: &mut Graph<f64>, out: NodeRef, weights: &Tensor<f64>| -> NodeRef {
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        g.sum(prod).unwrap()
    };

    let mut probe = Graph::new();
    let nodes: Vec<NodeRef> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| probe.input(&format!("x{i}"), x.shape()))
        .collect();
    let out = build(&mut probe, &nodes).unwrap();
    let weights = random(rng, probe.shape(out));

    let mut g = Graph::new();
    let nodes: Vec<NodeRef> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| g.input(&format!("x{i}"), x.shape()))
        .collect();
    let out = build(&mut g, &nodes).unwrap();
    let y = scalarize(&mut g, out, &weights);
    let grads = g.grad(y, &nodes).unwrap();

    let mut b = Bindings::new();
    for (i, x) in inputs.iter().enumerate() {
        b.bind(format!("x{i}"), x);
    }
    let values = g.eval(&b, &grads).unwrap();

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_difference_oracle(
            |xp: &Tensor<f64>| {
                let mut b = b.clone();
                b.bind_owned(format!("x{i}"), xp.clone());
                Ok(g.eval(&b, &[y])?[y].item()?)
            },
            x,
            1e-5,
        )
        .unwrap();
        worst = worst.max(max_relative_error(
            values[grads[i]].data(),
            numeric.data(),
            1e-9,
        ));
    }
    worst
}

// ---- eval ----

#[test]
fn eval_elementwise_add() {
    let mut g = Graph::new();
    let x = g.input("x", &[2]);
    let y = g.input("y", &[2]);
    let s = g.add(x, y).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("x", t(&[2], &[1., 2.])).bind_owned("y", t(&[2], &[3., 4.]));
    assert_eq!(eval1(&g, &b, s).data(), &[4., 6.]);
}

#[test]
fn eval_identity_and_square() {
    let mut g = Graph::new();
    let x = g.input("x", &[1, 1]);
    let mut b = Bindings::new();
    b.bind_owned("x", t(&[1, 1], &[5.]));
    assert_eq!(eval1(&g, &b, x), t(&[1, 1], &[5.]));

    let mut g = Graph::new();
    let x = g.input("x", &[]);
    let sq = g.mul(x, x).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("x", Tensor::scalar(3.0));
    assert_eq!(eval1(&g, &b, sq).item().unwrap(), 9.0);
}

#[test]
fn eval_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2]);
    let y = g.neg(x).unwrap();
    let b = Bindings::new();
    assert!(matches!(g.eval(&b, &[y]), Err(Error::MissingBinding(n)) if n == "x"));

    let mut b = Bindings::new();
    b.bind_owned("x", t(&[3], &[1., 2., 3.]));
    assert!(matches!(g.eval(&b, &[y]), Err(Error::Shape(_))));

    let z = g.div(x, x).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("x", t(&[2], &[0., 1.]));
    assert!(matches!(g.eval(&b, &[z]), Err(Error::NonFinite { op: "div", .. })));
}

#[test]
fn eval_overflow_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[]);
    let y = g.mul(x, x).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("x", Tensor::scalar(1e200));
    assert!(matches!(g.eval(&b, &[y]), Err(Error::NonFinite { .. })));
}

#[test]
fn foreign_nodes_are_rejected() {
    let mut g1 = Graph::<f64>::new();
    let mut g2 = Graph::<f64>::new();
    let x = g1.input("x", &[]);
    assert!(matches!(g2.neg(x), Err(Error::ForeignNode)));
}

#[test]
fn eval_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = random(&mut rng, &[4, 6]);
    let w = random(&mut rng, &[3, 4, 3]);
    let mut g = Graph::new();
    let en = g.input("e", &[4, 6]);
    let wn = g.input("w", &[3, 4, 3]);
    let c = g.conv_bank(en, wn).unwrap();
    let r = g.relu(c).unwrap();
    let m = g.max_over_time(r).unwrap();
    let mut b = Bindings::new();
    b.bind("e", &e).bind("w", &w);
    let a = eval1(&g, &b, m);
    let c = eval1(&g, &b, m);
    let bits = |x: &Tensor<f64>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&c));
}

// ---- grad ----

#[test]
fn grad_of_square() {
    let mut g = Graph::new();
    let x = g.input("x", &[]);
    let y = g.mul(x, x).unwrap();
    let dx = g.grad(y, &[x]).unwrap()[0];
    let mut b = Bindings::new();
    b.bind_owned("x", Tensor::scalar(3.0));
    assert_eq!(eval1(&g, &b, dx).item().unwrap(), 6.0);
}

#[test]
fn second_derivative_of_cube() {
    let mut g = Graph::new();
    let x = g.input("x", &[]);
    let xx = g.mul(x, x).unwrap();
    let y = g.mul(xx, x).unwrap();
    let dx = g.grad(y, &[x]).unwrap()[0];
    let ddx = g.grad(dx, &[x]).unwrap()[0];
    let mut b = Bindings::new();
    b.bind_owned("x", Tensor::scalar(2.0));
    assert_eq!(eval1(&g, &b, dx).item().unwrap(), 12.0);
    assert_eq!(eval1(&g, &b, ddx).item().unwrap(), 12.0);
}

#[test]
fn grad_of_bilinear() {
    let mut g = Graph::new();
    let x = g.input("x", &[]);
    let y = g.input("y", &[]);
    let f = g.mul(x, y).unwrap();
    let d = g.grad(f, &[x, y]).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("x", Tensor::scalar(2.0)).bind_owned("y", Tensor::scalar(5.0));
    let v = g.eval(&b, &d).unwrap();
    assert_eq!(v[d[0]].item().unwrap(), 5.0);
    assert_eq!(v[d[1]].item().unwrap(), 2.0);
}

#[test]
fn grad_requires_scalar_objective() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2]);
    let y = g.neg(x).unwrap();
    assert!(matches!(g.grad(y, &[x]), Err(Error::NonScalarObjective(_))));
}

#[test]
fn unreachable_target_gets_exact_zeros() {
    let mut g = Graph::new();
    let x = g.input("x", &[]);
    let z = g.input("z", &[2, 3]);
    let y = g.mul(x, x).unwrap();
    let dz = g.grad(y, &[z]).unwrap()[0];
    assert_eq!(g.shape(dz), &[2, 3]);
    let mut b = Bindings::new();
    b.bind_owned("x", Tensor::scalar(3.0));
    assert_eq!(eval1(&g, &b, dz), Tensor::zeros(&[2, 3]));
}

#[test]
fn target_distribution_is_not_differentiable() {
    let mut g = Graph::<f64>::new();
    let z = g.input("z", &[2]);
    let tdist = g.input("t", &[2]);
    let (loss, _) = g.softmax_cross_entropy(z, tdist).unwrap();
    assert!(matches!(
        g.grad(loss, &[tdist]),
        Err(Error::NoDerivative { op: "softmax_cross_entropy", input: 1 })
    ));
}

// ---- primitives ----

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.input("a", &[2, 2]);
    let x = g.input("x", &[2, 1]);
    let p = g.matmul(a, x).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("a", t(&[2, 2], &[1., 0., 0., 1.])).bind_owned("x", t(&[2, 1], &[1., 2.]));
    assert_eq!(eval1(&g, &b, p).data(), &[1., 2.]);
    b.bind_owned("a", t(&[2, 2], &[1., 2., 3., 4.])).bind_owned("x", t(&[2, 1], &[5., 6.]));
    assert_eq!(eval1(&g, &b, p), t(&[2, 1], &[17., 39.]));

    let c = g.input("c", &[3, 1]);
    assert!(matches!(g.matmul(a, c), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4]);
    let x = random(&mut rng, &[4, 1]);
    let build: &Build = &|g, n| g.matmul(n[0], n[1]);
    assert!(gradient_gap(build, &[a, x], &mut rng) < 1e-7);
}

#[test]
fn conv1d_wide_examples() {
    let mut g = Graph::new();
    let e = g.input("e", &[1, 3]);
    let w = g.input("w", &[1, 2]);
    let bias = g.input("b", &[]);
    let y = g.conv1d_wide(e, w, bias).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("e", t(&[1, 3], &[1., 2., 3.]))
        .bind_owned("w", t(&[1, 2], &[1., 1.]))
        .bind_owned("b", Tensor::scalar(0.0));
    assert_eq!(eval1(&g, &b, y).data(), &[1., 3., 5., 3.]);

    b.bind_owned("w", t(&[1, 2], &[0., 0.])).bind_owned("b", Tensor::scalar(7.0));
    assert_eq!(eval1(&g, &b, y).data(), &[7.; 4]);

    let empty = g.input("empty", &[1, 0]);
    assert!(matches!(g.conv1d_wide(empty, w, bias), Err(Error::EmptySentence)));
}

#[test]
fn conv1d_wide_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let e = random(&mut rng, &[3, 5]);
    let w = random(&mut rng, &[3, 3]);
    let bias = random(&mut rng, &[]);
    let build: &Build = &|g, n| g.conv1d_wide(n[0], n[1], n[2]);
    assert!(gradient_gap(build, &[e, w, bias], &mut rng) < 1e-7);
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.input("x", &[3]);
    let y = g.relu(x).unwrap();
    let s = g.sum(y).unwrap();
    let d = g.grad(s, &[x]).unwrap()[0];
    let mut b = Bindings::new();
    b.bind_owned("x", t(&[3], &[-1., 0., 2.]));
    assert_eq!(eval1(&g, &b, y).data(), &[0., 0., 2.]);
    assert_eq!(eval1(&g, &b, d).data(), &[0., 0., 1.]);
    b.bind_owned("x", t(&[3], &[0.5, 1., 2.]));
    assert_eq!(eval1(&g, &b, y).data(), &[0.5, 1., 2.]);
}

#[test]
fn max_over_time_examples() {
    let mut g = Graph::new();
    let x = g.input("x", &[4]);
    let m = g.max_over_time(x).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("x", t(&[4], &[1., 3., 5., 3.]));
    assert_eq!(eval1(&g, &b, m).item().unwrap(), 5.0);

    let mut g = Graph::new();
    let x = g.input("x", &[2]);
    let m = g.max_over_time(x).unwrap();
    let d = g.grad(m, &[x]).unwrap()[0];
    let mut b = Bindings::new();
    b.bind_owned("x", t(&[2], &[2., 2.]));
    assert_eq!(eval1(&g, &b, m).item().unwrap(), 2.0);
    assert_eq!(eval1(&g, &b, d).data(), &[1., 0.]);

    let mut g = Graph::new();
    let x = g.input("x", &[1]);
    let m = g.max_over_time(x).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("x", t(&[1], &[9.]));
    assert_eq!(eval1(&g, &b, m).item().unwrap(), 9.0);

    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[0]);
    assert!(g.max_over_time(x).is_err());
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut g = Graph::new();
    let z = g.input("z", &[2]);
    let target = g.constant(t(&[2], &[1., 0.]));
    let (loss, probs) = g.softmax_cross_entropy(z, target).unwrap();
    let dz = g.grad(loss, &[z]).unwrap()[0];
    let mut b = Bindings::new();
    b.bind_owned("z", t(&[2], &[0., 0.]));
    let v = g.eval(&b, &[loss, probs, dz]).unwrap();
    assert!((v[loss].item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(v[probs].data(), &[0.5, 0.5]);
    assert_eq!(v[dz].data(), &[-0.5, 0.5]);

    b.bind_owned("z", t(&[2], &[1000., 0.]));
    let v = g.eval(&b, &[loss, probs]).unwrap();
    assert!(v[loss].item().unwrap().abs() < 1e-12);
    assert!(v[probs].all_finite());

    let one = g.input("one", &[1]);
    assert!(g.softmax_cross_entropy(one, one).is_err());
}

#[test]
fn l2_norm_eps_examples() {
    let mut g = Graph::new();
    let v = g.input("v", &[2]);
    let n0 = g.l2_norm_eps(v, 0.0).unwrap();
    let d0 = g.grad(n0, &[v]).unwrap()[0];
    let n1 = g.l2_norm_eps(v, 1e-12).unwrap();
    let d1 = g.grad(n1, &[v]).unwrap()[0];
    let mut b = Bindings::new();
    b.bind_owned("v", t(&[2], &[3., 4.]));
    assert_eq!(eval1(&g, &b, n0).item().unwrap(), 5.0);
    let d = eval1(&g, &b, d0);
    assert!((d.data()[0] - 0.6).abs() < 1e-15 && (d.data()[1] - 0.8).abs() < 1e-15);

    b.bind_owned("v", t(&[2], &[0., 0.]));
    assert!((eval1(&g, &b, n1).item().unwrap() - 1e-6).abs() < 1e-18);
    assert_eq!(eval1(&g, &b, d1).data(), &[0., 0.]);
    assert!(g.l2_norm_eps(v, -1.0).is_err());
}

#[test]
fn gather_rows_examples() {
    let mut g = Graph::new();
    let table = g.input("table", &[2, 2]);
    let e = g.gather_rows(table, &[1, 0]).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("table", t(&[2, 2], &[1., 0., 0., 1.]));
    // columns (row 1, row 0) = ([0,1], [1,0])
    assert_eq!(eval1(&g, &b, e), t(&[2, 2], &[0., 1., 1., 0.]));

    let twice = g.gather_rows(table, &[0, 0]).unwrap();
    let s = g.sum(twice).unwrap();
    let d = g.grad(s, &[table]).unwrap()[0];
    b.bind_owned("table", t(&[2, 2], &[1., 2., 3., 4.]));
    assert_eq!(eval1(&g, &b, twice), t(&[2, 2], &[1., 1., 2., 2.]));
    assert_eq!(eval1(&g, &b, d), t(&[2, 2], &[2., 2., 0., 0.]));

    assert!(matches!(g.gather_rows(table, &[]), Err(Error::EmptySentence)));
    assert!(matches!(g.gather_rows(table, &[2]), Err(Error::IdOutOfRange { id: 2, rows: 2 })));
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = g.input("a", &[1]);
    let c = g.input("c", &[2]);
    let cat = g.concat(&[a, c]).unwrap();
    let s = g.sum(cat).unwrap();
    let d = g.grad(s, &[a, c]).unwrap();
    let single = g.concat(&[c]).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("a", t(&[1], &[1.])).bind_owned("c", t(&[2], &[2., 3.]));
    let v = g.eval(&b, &[cat, single, d[0], d[1]]).unwrap();
    assert_eq!(v[cat].data(), &[1., 2., 3.]);
    assert_eq!(v[single].data(), &[2., 3.]);
    assert_eq!(v[d[0]].data(), &[1.]);
    assert_eq!(v[d[1]].data(), &[1., 1.]);
    assert!(g.concat(&[]).is_err());
}

#[test]
fn scale_mask_examples() {
    let mut g = Graph::new();
    let x = g.input("x", &[2]);
    let id = g.scale_mask(x, Tensor::ones(&[2]), 1.0).unwrap();
    let zero = g.scale_mask(x, Tensor::zeros(&[2]), 3.0).unwrap();
    let y = g.scale_mask(x, t(&[2], &[1., 0.]), 2.0).unwrap();
    let mut b = Bindings::new();
    b.bind_owned("x", t(&[2], &[2., 4.]));
    let v = g.eval(&b, &[id, zero, y]).unwrap();
    assert_eq!(v[id].data(), &[2., 4.]);
    assert_eq!(v[zero].data(), &[0., 0.]);
    assert_eq!(v[y].data(), &[4., 0.]);
    assert!(g.scale_mask(x, Tensor::ones(&[3]), 1.0).is_err());
    assert!(g.scale_mask(x, t(&[2], &[0.5, 1.]), 1.0).is_err());
}

// ---- properties ----

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

/// Every primitive, on random double-precision instances, agrees with
/// central differences.
#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = Vec::new();
    for trial in 0..100 {
        let (p, q, r) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
        let (m, n, f, w) = (dims(&mut rng), dims(&mut rng), dims(&mut rng), dims(&mut rng));
        let c = rng.gen_range(2..=8);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..p)).collect();
        let mask = Tensor::new(
            vec![q],
            (0..q).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let target = {
            let mut v = vec![0.0; c];
            v[rng.gen_range(0..c)] = 1.0;
            Tensor::vector(v)
        };
        let positive = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s).map(|v| v.abs() + 0.5);

        let cases: Vec<(&str, Box<Build>, Vec<Tensor<f64>>)> = vec![
            ("add", Box::new(|g, n| g.add(n[0], n[1])), vec![random(&mut rng, &[p, q]), random(&mut rng, &[p, q])]),
            ("sub", Box::new(|g, n| g.sub(n[0], n[1])), vec![random(&mut rng, &[q]), random(&mut rng, &[q])]),
            ("mul", Box::new(|g, n| g.mul(n[0], n[1])), vec![random(&mut rng, &[p, q]), random(&mut rng, &[p, q])]),
            ("div", Box::new(|g, n| g.div(n[0], n[1])), vec![random(&mut rng, &[q]), positive(&mut rng, &[q])]),
            ("neg", Box::new(|g, n| g.neg(n[0])), vec![random(&mut rng, &[q])]),
            ("scale", Box::new(|g, n| g.scale(n[0], -1.7)), vec![random(&mut rng, &[q])]),
            ("sum", Box::new(|g, n| g.sum(n[0])), vec![random(&mut rng, &[p, q])]),
            ("broadcast", Box::new(move |g, n| g.broadcast(n[0], &[p, q])), vec![random(&mut rng, &[])]),
            ("sum_cols", Box::new(|g, n| g.sum_cols(n[0])), vec![random(&mut rng, &[p, q])]),
            ("repeat_cols", Box::new(move |g, n| g.repeat_cols(n[0], r)), vec![random(&mut rng, &[p])]),
            ("matmul", Box::new(|g, n| g.matmul(n[0], n[1])), vec![random(&mut rng, &[p, q]), random(&mut rng, &[q, r])]),
            ("transpose", Box::new(|g, n| g.transpose(n[0])), vec![random(&mut rng, &[p, q])]),
            ("reshape", Box::new(move |g, n| g.reshape(n[0], &[q, p])), vec![random(&mut rng, &[p, q])]),
            ("relu", Box::new(|g, n| g.relu(n[0])), vec![random(&mut rng, &[p, q])]),
            ("max_over_time", Box::new(|g, n| g.max_over_time(n[0])), vec![random(&mut rng, &[p, q])]),
            ("conv_bank", Box::new(|g, n| g.conv_bank(n[0], n[1])), vec![random(&mut rng, &[m, n]), random(&mut rng, &[f, m, w])]),
            ("conv_grad_weight", Box::new(move |g, x| g.conv_grad_weight(x[0], x[1], w)), vec![random(&mut rng, &[m, n]), random(&mut rng, &[f, n + w - 1])]),
            ("conv_grad_input", Box::new(|g, n| g.conv_grad_input(n[0], n[1])), vec![random(&mut rng, &[f, n + w - 1]), random(&mut rng, &[f, m, w])]),
            ("gather_rows", Box::new(move |g, x| g.gather_rows(x[0], &ids)), vec![random(&mut rng, &[p, m])]),
            ("softmax", Box::new(|g, n| g.softmax(n[0])), vec![random(&mut rng, &[c])]),
            ("log_softmax", Box::new(|g, n| g.log_softmax(n[0])), vec![random(&mut rng, &[c])]),
            (
                "softmax_cross_entropy",
                Box::new(move |g, n| {
                    let tnode = g.constant(target.clone());
                    Ok(g.softmax_cross_entropy(n[0], tnode)?.0)
                }),
                vec![random(&mut rng, &[c])],
            ),
            ("l2_norm_eps", Box::new(|g, n| g.l2_norm_eps(n[0], 1e-12)), vec![random(&mut rng, &[p, q])]),
            ("concat", Box::new(|g, n| g.concat(&[n[0], n[1]])), vec![random(&mut rng, &[p]), random(&mut rng, &[q])]),
            ("slice", Box::new(move |g, n| g.slice(n[0], 1, q - 1)), vec![random(&mut rng, &[q])]),
            ("place", Box::new(move |g, n| g.place(n[0], 1, q + 2)), vec![random(&mut rng, &[q])]),
            ("scale_mask", Box::new(move |g, n| g.scale_mask(n[0], mask.clone(), 2.5)), vec![random(&mut rng, &[q])]),
        ];
        for (name, build, inputs) in cases {
            let gap = gradient_gap(build.as_ref(), &inputs, &mut rng);
            assert!(gap < 1e-6, "trial {trial}: {name} relative error {gap:e}");
            worst.push(gap);
        }
    }
}

/// Second derivatives of a cubic polynomial, compared against central
/// differences of the first-order gradient.
#[test]
fn second_order_polynomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x0 = random(&mut rng, &[4]);
        let coeff = random(&mut rng, &[4]);
        let mut g = Graph::new();
        let x = g.input("x", &[4]);
        let c = g.constant(coeff.clone());
        let xx = g.mul(x, x).unwrap();
        let xxx = g.mul(xx, x).unwrap();
        let cx = g.mul(c, xxx).unwrap();
        let f = g.sum(cx).unwrap();
        let f2 = g.mul(f, f).unwrap();
        let dx = g.grad(f2, &[x]).unwrap()[0];
        // d/dx <dx, v> is a Hessian-vector product
        let v = g.constant(random(&mut rng, &[4]));
        let dv = g.mul(dx, v).unwrap();
        let dv = g.sum(dv).unwrap();
        let hv = g.grad(dv, &[x]).unwrap()[0];

        let mut b = Bindings::new();
        b.bind("x", &x0);
        let analytic = eval1(&g, &b, hv);
        let numeric = finite_difference_oracle(
            |xp: &Tensor<f64>| {
                let mut b = Bindings::new();
                b.bind("x", xp);
                Ok(g.eval(&b, &[dv])?[dv].item()?)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(analytic.data(), numeric.data(), 1e-9) < 1e-5);
    }
}

/// Gradient of `||dL/dh||` for a tiny conv network, compared against
/// central differences of the penalty itself.
#[test]
fn second_order_gradient_norm_on_tiny_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let e0 = random(&mut rng, &[3, 5]);
        let w0 = random(&mut rng, &[4, 3, 2]);
        let out0 = random(&mut rng, &[2, 4]);
        let mut g = Graph::new();
        let e = g.input("e", &[3, 5]);
        let w = g.input("w", &[4, 3, 2]);
        let o = g.input("o", &[2, 4]);
        let conv = g.conv_bank(e, w).unwrap();
        let act = g.relu(conv).unwrap();
        let h = g.max_over_time(act).unwrap();
        let hc = g.reshape(h, &[4, 1]).unwrap();
        let logits = g.matmul(o, hc).unwrap();
        let logits = g.reshape(logits, &[2]).unwrap();
        let target = g.constant(t(&[2], &[0., 1.]));
        let (loss, _) = g.softmax_cross_entropy(logits, target).unwrap();
        let dh = g.grad(loss, &[h]).unwrap()[0];
        let pen = g.l2_norm_eps(dh, 1e-12).unwrap();
        let grads = g.grad(pen, &[e, w, o]).unwrap();

        let mut b = Bindings::new();
        b.bind("e", &e0).bind("w", &w0).bind("o", &out0);
        let values = g.eval(&b, &grads).unwrap();
        for (name, x0, gnode) in [("e", &e0, grads[0]), ("w", &w0, grads[1]), ("o", &out0, grads[2])] {
            let numeric = finite_difference_oracle(
                |xp: &Tensor<f64>| {
                    let mut b = b.clone();
                    b.bind(name, xp);
                    Ok(g.eval(&b, &[pen])?[pen].item()?)
                },
                x0,
                1e-5,
            )
            .unwrap();
            let gap = max_relative_error(values[gnode].data(), numeric.data(), 1e-9);
            assert!(gap < 1e-5, "{name}: {gap:e}");
        }
    }
}

#[test]
fn softmax_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let c = rng.gen_range(2..10);
        let z = random(&mut rng, &[c]).map(|v| v * 50.0);
        let mut g = Graph::new();
        let zn = g.input("z", &[c]);
        let p = g.softmax(zn).unwrap();
        let mut b = Bindings::new();
        b.bind("z", &z);
        let probs = eval1(&g, &b, p);
        assert!((probs.sum() - 1.0).abs() < 1e-12);
        assert!(probs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear(a in -3.0f64..3.0, c in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&mut rng, &[5]);
        let mut g = Graph::new();
        let x = g.input("x", &[5]);
        let f = { let s = g.mul(x, x).unwrap(); let s = g.relu(s).unwrap(); g.sum(s).unwrap() };
        let h = { let p = g.softmax(x).unwrap(); g.l2_norm_eps(p, 1e-12).unwrap() };
        let af = g.scale(f, a).unwrap();
        let ch = g.scale(h, c).unwrap();
        let combo = g.add(af, ch).unwrap();
        let d = g.grad(combo, &[x]).unwrap()[0];
        let df = g.grad(f, &[x]).unwrap()[0];
        let dh = g.grad(h, &[x]).unwrap()[0];
        let mut b = Bindings::new();
        b.bind("x", &x0);
        let v = g.eval(&b, &[d, df, dh]).unwrap();
        for i in 0..5 {
            let expect = a * v[df].data()[i] + c * v[dh].data()[i];
            prop_assert!((v[d].data()[i] - expect).abs() < 1e-12);
        }
    }
}
