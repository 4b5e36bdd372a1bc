use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ufo_tensor::gradcheck::{check_params, op_suite, CheckConfig, CheckReport};
use ufo_tensor::nn::{Conv2d, Linear};
use ufo_tensor::{DenseArray, Graph, ParamStore};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_array(shape: &[usize], r: &mut ChaCha8Rng) -> DenseArray<f64> {
    DenseArray::uniform(shape, -1.0, 1.0, r)
}

fn assert_ok(name: &str, r: CheckReport) {
    assert!(r.passed(), "{name}: {} of {} probes failed, {:?}", r.failures, r.checked, r.worst);
}

#[test]
fn every_primitive_matches_finite_differences() {
    let cfg = CheckConfig { directions: 2, ..CheckConfig::default() };
    let reports = op_suite(&cfg, 7).unwrap();
    assert!(reports.len() >= 30);
    for (name, r) in reports {
        assert_ok(&name, r);
    }
}

#[test]
fn random_conv_net_matches_finite_differences() {
    let mut r = rng(99);
    let mut store = ParamStore::<f64>::new();
    let c1 = Conv2d::new(&mut store, "c1", 3, 4, 3, 1, 1, &mut r).unwrap();
    let c2 = Conv2d::new(&mut store, "c2", 4, 4, 3, 2, 1, &mut r).unwrap();
    let fc = Linear::new(&mut store, "fc", 4, 2, true, &mut r).unwrap();
    for p in store.iter_mut() {
        // Nonzero biases so their gradients are exercised away from init.
        let n = p.value.len();
        if p.name.ends_with("bias") {
            p.value = DenseArray::from_fn(p.value.shape(), |i| 0.1 * (i as f64 - n as f64 / 2.0));
        }
    }
    let x = rand_array(&[1, 3, 6, 6], &mut r);
    let report = check_params(&mut store, &CheckConfig { directions: 3, ..Default::default() }, &mut r, |g, s| {
        let h = c1.forward(g, s, g.constant(x.clone()))?.tanh()?;
        let h = c2.forward(g, s, h)?.elu()?;
        let pooled = h.mean(3, false)?.mean(2, false)?;
        let y = fc.forward(g, s, pooled)?;
        y.square()?.sum_all()
    })
    .unwrap();
    assert_ok("conv net", report);
}

#[test]
fn documented_gradient_examples() {
    let g = Graph::<f64>::new();
    let x = g.leaf(DenseArray::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let grads = g.gradients(x.mul(x).unwrap().sum_all().unwrap()).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    let g = Graph::<f64>::new();
    let x = g.leaf(DenseArray::zeros(&[1]));
    let grads = g.gradients(x.sigmoid().unwrap().sum_all().unwrap()).unwrap();
    assert!((grads.get(x).unwrap().item() - 0.25).abs() < 1e-15);
}
