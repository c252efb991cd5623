//! Central-difference gradient checking in `f64`.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the backward rules it checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::network::{Bound, ForwardCtx, Network};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    /// Name of the tensor holding the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Relative error with a small floor so entries that are zero analytically
/// and numerically do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Check `d f / d inputs` for a scalar-valued function of named tensors.
pub fn check_fn<F>(f: F, inputs: &[(String, Tensor<f64>)], eps: f64) -> Result<GradCheck>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| graph.leaf(t.clone())).collect();
    let out = f(&graph, &vars)?;
    let analytic = graph.backward(out, &vars)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let o = f(&g, &vs)?;
        Ok(g.value(o).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    for (i, (name, _)) in inputs.iter().enumerate() {
        for j in 0..values[i].len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + eps;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - eps;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let e = rel_err(analytic[i].data()[j], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{j}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Check a whole network against a fixed random projection of its output:
/// `loss = Σ output ⊙ probe`. Gradients are checked for the input batch and
/// every trainable parameter. Dropout masks are reproduced by reseeding.
pub fn check_network(
    net: &Network,
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    training: bool,
    seed: u64,
    eps: f64,
) -> Result<GradCheck> {
    let out_shape = {
        let g = Graph::no_grad();
        let bound = Bound::bind(&g, store);
        let x = g.constant(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = ForwardCtx::new(training, &mut rng);
        let y = net.forward(&g, store, &bound, x, &mut ctx)?;
        g.shape(y)
    };
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let probe = Tensor::<f64>::randn(&out_shape, 1.0, &mut probe_rng);

    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![("input".to_string(), input.clone())];
    inputs.extend(store.params().map(|(n, t)| (n.to_string(), t.clone())));

    check_fn(
        |g, vars| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = ForwardCtx::new(training, &mut rng);
            let y = net.forward(g, store, &bound, vars[0], &mut ctx)?;
            let p = g.constant(probe.clone());
            Ok(g.sum(g.mul(y, p)))
        },
        &inputs,
        eps,
    )
}

/// One single-layer (or single-block) network per layer kind, with a small
/// random input, for gradient checking. The flag says whether to run in
/// training mode.
pub fn layer_cases() -> Vec<(String, Network, Tensor<f64>, bool)> {
    use super::network::{Init, LayerSpec as L, Stage};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = |rng: &mut ChaCha8Rng, c: usize, h: usize| Tensor::<f64>::randn(&[2, c, h, h], 1.0, rng);
    let single = |name: &str, input: Vec<usize>, layers: Vec<L>| Network {
        name: name.into(),
        input,
        stages: layers.into_iter().map(Stage::Layer).collect(),
    };
    let conv = |i, o, k, s, p| L::Conv2d { in_ch: i, out_ch: o, kernel: k, stride: s, pad: p, bias: true, init: Init::He };
    vec![
        ("conv2d_3x3".into(), single("conv", vec![2, 5, 5], vec![conv(2, 3, 3, 1, 1)]), img(&mut rng, 2, 5), false),
        ("conv2d_strided".into(), single("convs", vec![2, 6, 6], vec![conv(2, 2, 3, 2, 1)]), img(&mut rng, 2, 6), false),
        ("conv2d_1x1".into(), single("conv1", vec![3, 4, 4], vec![conv(3, 2, 1, 1, 0)]), img(&mut rng, 3, 4), false),
        (
            "transposed_conv2d".into(),
            single(
                "tconv",
                vec![2, 3, 3],
                vec![L::TransposedConv2d { in_ch: 2, out_ch: 2, kernel: 4, stride: 2, pad: 1, bias: true, init: Init::He }],
            ),
            img(&mut rng, 2, 3),
            false,
        ),
        (
            "dense".into(),
            single("dense", vec![5], vec![L::Dense { in_units: 5, out_units: 3, init: Init::Xavier }]),
            Tensor::randn(&[3, 5], 1.0, &mut rng),
            false,
        ),
        ("batch_norm_train".into(), single("bn", vec![3, 3, 3], vec![L::BatchNorm { channels: 3 }]), img(&mut rng, 3, 3), true),
        ("batch_norm_infer".into(), single("bni", vec![3, 3, 3], vec![L::BatchNorm { channels: 3 }]), img(&mut rng, 3, 3), false),
        (
            "batch_norm_dense".into(),
            single("bnd", vec![4], vec![L::BatchNorm { channels: 4 }]),
            Tensor::randn(&[5, 4], 1.0, &mut rng),
            true,
        ),
        ("relu".into(), single("relu", vec![2, 3, 3], vec![L::Relu]), img(&mut rng, 2, 3), false),
        ("leaky_relu".into(), single("lrelu", vec![2, 3, 3], vec![L::LeakyRelu { slope: 0.2 }]), img(&mut rng, 2, 3), false),
        ("tanh".into(), single("tanh", vec![2, 3, 3], vec![L::Tanh]), img(&mut rng, 2, 3), false),
        ("sigmoid".into(), single("sigmoid", vec![2, 3, 3], vec![L::Sigmoid]), img(&mut rng, 2, 3), false),
        ("dropout".into(), single("dropout", vec![2, 3, 3], vec![L::Dropout { rate: 0.3 }]), img(&mut rng, 2, 3), true),
        ("avg_pool".into(), single("pool", vec![2, 4, 4], vec![L::AvgPool { kernel: 2 }]), img(&mut rng, 2, 4), false),
        ("global_avg_pool".into(), single("gap", vec![2, 3, 3], vec![L::GlobalAvgPool]), img(&mut rng, 2, 3), false),
        ("reshape".into(), single("reshape", vec![2, 2, 2], vec![L::Reshape { shape: vec![8] }]), img(&mut rng, 2, 2), false),
        (
            "dense_block_concat".into(),
            Network {
                name: "block".into(),
                input: vec![2, 4, 4],
                stages: vec![Stage::DenseBlock {
                    layers: vec![
                        vec![L::BatchNorm { channels: 2 }, L::Relu, conv(2, 2, 3, 1, 1)],
                        vec![L::BatchNorm { channels: 4 }, L::Relu, conv(4, 2, 1, 1, 0)],
                    ],
                }],
            },
            img(&mut rng, 2, 4),
            true,
        ),
    ]
}

/// Gradient-check every case in [`layer_cases`]. BN parameters are
/// perturbed away from their identity initialization first so that the
/// check is not degenerate.
pub fn check_all_layers(eps: f64) -> Result<Vec<(String, GradCheck)>> {
    let mut out = Vec::new();
    for (i, (name, net, input, training)) in layer_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mut store: ParamStore<f64> = net.init_params(&mut rng)?;
        let perturbed: Vec<(String, Tensor<f64>)> = store
            .params()
            .map(|(n, t)| {
                let noise = Tensor::<f64>::randn(t.shape(), 0.3, &mut rng);
                (n.to_string(), t.zip(&noise, |a, b| a + b))
            })
            .collect();
        for (n, t) in perturbed {
            *store.param_mut(&n) = t;
        }
        let report = check_network(&net, &store, &input, training, 7 + i as u64, eps)?;
        out.push((name, report));
    }
    Ok(out)
}
