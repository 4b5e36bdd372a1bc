//! Central finite-difference checks of reverse-mode gradients (f64 only).

use rand::{Rng, SeedableRng};

use crate::array::DenseArray;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Coordinates probed per input; `None` probes all of them.
    pub max_entries: Option<usize>,
    /// Random directional derivatives compared in addition.
    pub directions: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4, abs_floor: 1e-7, max_entries: None, directions: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Description of the worst failing probe.
    pub worst: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures == 0
    }

    fn record(&mut self, cfg: &CheckConfig, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        let ok = abs <= cfg.abs_floor || rel < cfg.rel_tol;
        self.max_abs_err = self.max_abs_err.max(abs);
        if abs > cfg.abs_floor {
            self.max_rel_err = self.max_rel_err.max(rel);
        }
        if !ok {
            self.failures += 1;
            if self.worst.is_none() {
                self.worst = Some(format!("{}: analytic {analytic:e}, numeric {numeric:e}", what()));
            }
        }
    }
}

fn probe_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Checks `f` with respect to explicit inputs, treated as graph leaves.
pub fn check_inputs(
    inputs: &[DenseArray<f64>],
    cfg: &CheckConfig,
    rng: &mut impl Rng,
    f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
) -> Result<CheckReport> {
    let eval = |xs: &[DenseArray<f64>]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.gradients(loss)?;
    let analytic: Vec<DenseArray<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| DenseArray::zeros(x.shape())))
        .collect();
    let mut report = CheckReport::default();
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        for i in probe_indices(xs[k].len(), cfg.max_entries) {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + cfg.step;
            let fp = eval(&xs)?;
            xs[k].data_mut()[i] = orig - cfg.step;
            let fm = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            report.record(cfg, analytic[k].data()[i], numeric, || format!("input {k}[{i}]"));
        }
    }
    for d in 0..cfg.directions {
        let dirs: Vec<DenseArray<f64>> = xs.iter().map(|x| DenseArray::uniform(x.shape(), -1.0, 1.0, rng)).collect();
        let shifted = |s: f64| -> Vec<DenseArray<f64>> {
            xs.iter().zip(&dirs).map(|(x, u)| x.zip_map(u, |a, b| a + s * b)).collect()
        };
        let numeric = (eval(&shifted(cfg.step))? - eval(&shifted(-cfg.step))?) / (2.0 * cfg.step);
        let a: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(g, u)| g.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        report.record(cfg, a, numeric, || format!("direction {d}"));
    }
    Ok(report)
}

/// Checks `f` with respect to every parameter in `store`. Gradients in the
/// store are overwritten.
pub fn check_params(
    store: &mut ParamStore<f64>,
    cfg: &CheckConfig,
    rng: &mut impl Rng,
    f: impl for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Result<Var<'g, f64>>,
) -> Result<CheckReport> {
    store.zero_grad();
    {
        let g = Graph::new();
        let loss = f(&g, store)?;
        g.backward(loss, store)?;
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::inference();
        Ok(f(&g, s)?.item())
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let analytic: Vec<DenseArray<f64>> = ids.iter().map(|&id| store.get(id).grad.clone()).collect();
    let mut report = CheckReport::default();
    for (k, &id) in ids.iter().enumerate() {
        for i in probe_indices(store.get(id).value.len(), cfg.max_entries) {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + cfg.step;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - cfg.step;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let name = &store.get(id).name;
            report.record(cfg, analytic[k].data()[i], numeric, || format!("{name}[{i}]"));
        }
    }
    let originals: Vec<DenseArray<f64>> = ids.iter().map(|&id| store.get(id).value.clone()).collect();
    for d in 0..cfg.directions {
        let dirs: Vec<DenseArray<f64>> =
            originals.iter().map(|x| DenseArray::uniform(x.shape(), -1.0, 1.0, rng)).collect();
        let at = |s: f64, store: &mut ParamStore<f64>| -> Result<f64> {
            for ((&id, x), u) in ids.iter().zip(&originals).zip(&dirs) {
                store.get_mut(id).value = x.zip_map(u, |a, b| a + s * b);
            }
            eval(store)
        };
        let fp = at(cfg.step, store)?;
        let fm = at(-cfg.step, store)?;
        for (&id, x) in ids.iter().zip(&originals) {
            store.get_mut(id).value = x.clone();
        }
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let a: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(g, u)| g.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        report.record(cfg, a, numeric, || format!("direction {d}"));
    }
    store.zero_grad();
    Ok(report)
}

/// Named report of one check.
pub type NamedReport = (String, CheckReport);

fn probe_sum<'g>(y: Var<'g, f64>) -> Result<Var<'g, f64>> {
    // Distinct upstream gradient per output coordinate.
    let w = DenseArray::from_fn(&y.shape(), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
    y.mul_const(&w)?.sum_all()
}

type OpFn = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>>;

/// Finite-difference checks of every differentiable primitive on random
/// inputs drawn from `[-1, 1]`.
pub fn op_suite(cfg: &CheckConfig, seed: u64) -> Result<Vec<NamedReport>> {
    use crate::ops::shape::concat;
    use crate::ops::ConvSpec;
    let c2 = [[0.3, 1.7], [2.0, 0.5], [3.6, 2.2], [-0.4, 1.0]];
    let c3 = [[0.3, 1.7, 0.2], [2.0, 0.5, 1.9], [1.5, 1.5, 2.5]];
    let mask = DenseArray::from_f64(&[2, 4], &[1., 0., 1., 1., 0., 1., 0., 0.])?;
    let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        ("add", vec![vec![2, 3], vec![3]], Box::new(|_, v| probe_sum(v[0].add(v[1])?))),
        ("sub", vec![vec![2, 1, 3], vec![4, 1]], Box::new(|_, v| probe_sum(v[0].sub(v[1])?))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|_, v| probe_sum(v[0].mul(v[1])?))),
        ("div", vec![vec![2, 3], vec![1, 3]], Box::new(|_, v| probe_sum(v[0].div(v[1].add_scalar(2.5)?)?))),
        ("neg", vec![vec![4]], Box::new(|_, v| probe_sum(v[0].neg()?))),
        ("scalar", vec![vec![5]], Box::new(|_, v| probe_sum(v[0].mul_scalar(-1.7)?.add_scalar(0.3)?))),
        ("relu", vec![vec![3, 4]], Box::new(|_, v| probe_sum(v[0].relu()?))),
        ("elu", vec![vec![3, 4]], Box::new(|_, v| probe_sum(v[0].elu()?))),
        ("sigmoid", vec![vec![3, 4]], Box::new(|_, v| probe_sum(v[0].sigmoid()?))),
        ("exp", vec![vec![3, 4]], Box::new(|_, v| probe_sum(v[0].exp()?))),
        ("tanh", vec![vec![3, 4]], Box::new(|_, v| probe_sum(v[0].tanh()?))),
        ("abs", vec![vec![3, 4]], Box::new(|_, v| probe_sum(v[0].abs()?))),
        ("square", vec![vec![3, 4]], Box::new(|_, v| probe_sum(v[0].square()?))),
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], Box::new(|_, v| probe_sum(v[0].matmul(v[1])?))),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], Box::new(|_, v| probe_sum(v[0].matmul(v[1])?))),
        ("permute", vec![vec![2, 3, 4]], Box::new(|_, v| probe_sum(v[0].permute(&[2, 0, 1])?))),
        ("transpose", vec![vec![2, 3, 4]], Box::new(|_, v| probe_sum(v[0].transpose()?))),
        ("concat", vec![vec![2, 3], vec![2, 2]], Box::new(|_, v| probe_sum(concat(&[v[0], v[1]], 1)?))),
        ("sum-n", vec![vec![2, 3], vec![2, 3], vec![2, 3]], Box::new(|_, v| probe_sum(crate::ops::sum_n(v)?))),
        ("slice", vec![vec![3, 5]], Box::new(|_, v| probe_sum(v[0].slice(1, 1, 4)?))),
        ("reshape", vec![vec![3, 4]], Box::new(|_, v| probe_sum(v[0].reshape(&[2, 6])?))),
        ("broadcast", vec![vec![3, 1]], Box::new(|_, v| probe_sum(v[0].broadcast_to(&[2, 3, 4])?))),
        ("index-select", vec![vec![4, 3]], Box::new(|_, v| probe_sum(v[0].index_select(0, &[3, 0, 3])?))),
        ("upsample", vec![vec![2, 2, 3]], Box::new(|_, v| probe_sum(v[0].upsample_nearest2d(2)?))),
        ("sum", vec![vec![2, 3, 4]], Box::new(|_, v| probe_sum(v[0].sum(1, false)?))),
        ("mean", vec![vec![2, 3, 4]], Box::new(|_, v| probe_sum(v[0].mean(2, true)?))),
        ("max", vec![vec![3, 5]], Box::new(|_, v| probe_sum(v[0].max_axis(1, None)?.0))),
        ("softmax", vec![vec![3, 4]], Box::new(|_, v| probe_sum(v[0].softmax(1)?))),
        ("masked-softmax", vec![vec![2, 4]], Box::new(move |_, v| probe_sum(v[0].masked_softmax(1, &mask)?))),
        ("layer-norm", vec![vec![3, 6]], Box::new(|_, v| probe_sum(v[0].layer_norm(1e-5)?))),
        ("cosine", vec![vec![3, 4], vec![3, 4]], Box::new(|_, v| probe_sum(v[0].cosine_similarity(v[1], 1, 1e-9)?))),
        (
            "conv2d",
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            Box::new(|_, v| probe_sum(v[0].conv2d(v[1], Some(v[2]), 2, 1)?)),
        ),
        (
            "conv3d",
            vec![vec![1, 2, 3, 4, 4], vec![2, 2, 3, 3, 3], vec![2]],
            Box::new(|_, v| probe_sum(v[0].conv3d(v[1], Some(v[2]), ConvSpec::cube(3, 1, 1))?)),
        ),
        (
            "transpose-conv3d",
            vec![vec![1, 2, 2, 2, 3], vec![2, 3, 3, 3, 3], vec![3]],
            Box::new(|_, v| probe_sum(v[0].conv_transpose3d(v[1], Some(v[2]), ConvSpec::cube(3, 2, 1), [1, 1, 0])?)),
        ),
        ("bilinear", vec![vec![2, 3, 4]], Box::new(move |_, v| probe_sum(v[0].bilinear_sample(&c2)?.0))),
        ("trilinear", vec![vec![2, 3, 3, 4]], Box::new(move |_, v| probe_sum(v[0].trilinear_sample(&c3)?.0))),
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, shapes, f) in cases {
        let inputs: Vec<_> = shapes.iter().map(|s| DenseArray::uniform(s, -1.0, 1.0, &mut rng)).collect();
        out.push((name.to_string(), check_inputs(&inputs, cfg, &mut rng, f)?));
    }
    Ok(out)
}
