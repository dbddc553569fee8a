//! Check reverse-mode gradients against central finite differences.
//!
//! Every differentiable primitive is exercised through a scalar
//! objective; the worst relative error per operation is printed.
//!
//!     cargo run --release -p lfrc-lab --example gradient_check

use lfrc_lab::lfrc::{self, MetricKind, DEFAULT_EPS_NORM};
use lfrc_lab::rng::SplitMix64;
use lfrc_lab::tensor::{finite_difference_grad_scaled, rel_err_normwise, Graph, Tensor, Var};

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn check(label: &str, x: &Tensor<f64>, build: &dyn Fn(&mut Graph<f64>, Var) -> Var) {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = build(&mut g, xv);
    g.backward(loss).unwrap();
    let analytic = g.grad(xv);

    let numeric = finite_difference_grad_scaled(
        &mut |probe: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(probe.clone(), false);
            let loss = build(&mut g, xv);
            Ok(g.value(loss).item()?)
        },
        x,
        1e-6,
    )
    .unwrap();

    println!("{label:<24} rel err {:.3e}", rel_err_normwise(&analytic, &numeric));
}

fn main() {
    let mut rng = SplitMix64::new(42);

    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    check("matmul", &a, &|g, xv| {
        let bv = g.constant(b.clone());
        let m = g.matmul(xv, bv).unwrap();
        g.sum_all(m)
    });

    let x = random(&[1, 2, 6, 6], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    check("conv2d (input)", &x, &|g, xv| {
        let kv = g.constant(k.clone());
        let c = g.conv2d(xv, kv, 1, 1).unwrap();
        g.sum_all(c)
    });
    check("conv2d (kernel)", &k, &|g, kv| {
        let xv = g.constant(x.clone());
        let c = g.conv2d(xv, kv, 2, 1).unwrap();
        g.sum_all(c)
    });

    let logits = random(&[4, 3], &mut rng);
    check("cross-entropy", &logits, &|g, xv| {
        g.softmax_cross_entropy(xv, &[0, 2, 1, 0]).unwrap()
    });
    check("margin loss", &logits, &|g, xv| {
        g.cw_margin(xv, &[1, 0, 2, 1]).unwrap()
    });

    let feats = random(&[4, 6], &mut rng);
    let nat = random(&[4, 6], &mut rng);
    for metric in [MetricKind::Exp, MetricKind::L1, MetricKind::L2] {
        check(&format!("consistency loss ({})", metric.name()), &feats, &|g, xv| {
            let nf = g.constant(nat.clone());
            let m_nat = lfrc::similarity_from_features(g, nf, DEFAULT_EPS_NORM).unwrap();
            let m_adv = lfrc::similarity_from_features(g, xv, DEFAULT_EPS_NORM).unwrap();
            lfrc::lfrc_loss(g, m_nat, m_adv, metric).unwrap()
        });
    }
}
