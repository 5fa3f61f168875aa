#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rfscope::autograd::{Padding, Params, Window};
use rfscope::netspec::{build_graph, ArchSpec, InitPolicy, Layer, LayerOp, WeightSource};
use rfscope::autograd::{Mode, NetGraph};
use rfscope::Tensor4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| StandardNormal.sample(rng))
}

#[derive(Debug, Clone, Copy)]
pub struct GenOpts {
    pub max_layers: usize,
    /// Only convolutions (and residual blocks of convolutions).
    pub conv_only: bool,
    /// Kernel extents drawn from 1..=max_kernel.
    pub max_kernel: usize,
    /// Append `gap` + `fc` when the net stays spatial.
    pub head: bool,
    pub bias: bool,
}

impl Default for GenOpts {
    fn default() -> Self {
        GenOpts { max_layers: 4, conv_only: false, max_kernel: 4, head: true, bias: true }
    }
}

fn window(rng: &mut ChaCha8Rng, h: usize, w: usize, max_k: usize, pool: bool) -> Option<Window> {
    let kernel = [rng.random_range(1..=max_k), rng.random_range(1..=max_k)];
    let stride = [rng.random_range(1..=2), rng.random_range(1..=2)];
    let pad = |rng: &mut ChaCha8Rng, k: usize| if pool { rng.random_range(0..k) } else { rng.random_range(0..=k / 2 + 1) };
    let padding = Padding { top: pad(rng, kernel[0]), bottom: pad(rng, kernel[0]), left: pad(rng, kernel[1]), right: pad(rng, kernel[1]) };
    let win = Window { kernel, stride, padding };
    win.out_hw(h, w).filter(|&(oh, ow)| oh >= 1 && ow >= 1).map(|_| win)
}

/// A random, valid spec; shapes are tracked through `ArchSpec::topology`.
pub fn random_spec(rng: &mut ChaCha8Rng, opts: GenOpts) -> ArchSpec {
    let c0 = rng.random_range(1..=3);
    let input = [c0, rng.random_range(5..=9), rng.random_range(5..=9)];
    let mut spec = ArchSpec { name: "random".into(), input, layers: Vec::new() };
    let n_layers = rng.random_range(1..=opts.max_layers);
    let mut attempts = 0;
    while spec.layers.len() < n_layers && attempts < 200 {
        attempts += 1;
        let topo = spec.topology().expect("generated spec stays valid");
        let [c, h, w] = topo.nodes()[topo.output()].out;
        let choice = if opts.conv_only { rng.random_range(0..2) * 6 } else { rng.random_range(0..7) };
        let op = match choice {
            0 => window(rng, h, w, opts.max_kernel, false).map(|win| LayerOp::Conv {
                window: win,
                out_ch: rng.random_range(1..=3),
                bias: opts.bias && rng.random::<bool>(),
            }),
            1 => window(rng, h, w, opts.max_kernel, true).map(LayerOp::MaxPool),
            2 => window(rng, h, w, opts.max_kernel, true).map(LayerOp::AvgPool),
            3 => Some(LayerOp::Relu),
            4 => Some(LayerOp::BatchNorm),
            5 => Some(LayerOp::Relu),
            _ => {
                let s = rng.random_range(1..=2);
                let ch = rng.random_range(1..=3);
                let main = vec![Layer { op: LayerOp::Conv { window: Window::square(3, s, 1), out_ch: ch, bias: false }, name: None }];
                let shortcut = if s == 1 && ch == c {
                    Vec::new()
                } else {
                    vec![Layer { op: LayerOp::Conv { window: Window::square(1, s, 0), out_ch: ch, bias: false }, name: None }]
                };
                Some(LayerOp::ResBlock { main, shortcut })
            }
        };
        let Some(op) = op else { continue };
        spec.layers.push(Layer { op, name: None });
        if spec.topology().is_err() {
            spec.layers.pop();
        }
    }
    if opts.head && !opts.conv_only {
        spec.layers.push(Layer { op: LayerOp::Gap, name: None });
        spec.layers.push(Layer { op: LayerOp::Fc { out: rng.random_range(1..=3) }, name: None });
    }
    spec
}

/// He init plus non-trivial batch-norm statistics and biases.
pub fn random_graph(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> NetGraph {
    let mut g = build_graph(spec, WeightSource::Init(InitPolicy::He { seed: rng.random() })).unwrap();
    for p in g.params_mut() {
        match p {
            Params::BatchNorm(bn) => {
                for c in 0..bn.gamma.len() {
                    bn.gamma[c] = rng.random_range(0.5..1.5);
                    bn.beta[c] = rng.random_range(-0.3..0.3);
                    bn.running_mean[c] = rng.random_range(-0.3..0.3);
                    bn.running_var[c] = rng.random_range(0.5..2.0);
                }
            }
            Params::Conv { bias: Some(b), .. } => b.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3)),
            Params::Linear { bias, .. } => bias.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3)),
            _ => {}
        }
    }
    g
}

const H: f64 = 1e-5;

fn objective(g: &NetGraph, x: &Tensor4, r: &Tensor4, mode: Mode) -> f64 {
    let acts = g.forward(x, mode).unwrap();
    acts.output().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Largest relative error over the input and every parameter gradient.
///
/// Components far below the gradient's own scale are compared against a
/// floor of 1e-3 of the largest analytic entry, so rounding noise on
/// near-zero entries does not dominate.
pub fn max_rel_error(g: &mut NetGraph, x: &Tensor4, mode: Mode, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let out_shape = g.forward(x, mode).unwrap().output().shape();
    let r = normal_tensor(&mut rng, [out_shape.n, out_shape.c, out_shape.h, out_shape.w]);
    let acts = g.forward(x, mode).unwrap();
    let grads = g.backward(&acts, vec![(g.topology().output(), r.clone())], true).unwrap();

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += H;
        xm.data_mut()[i] -= H;
        let fd = (objective(g, &xp, &r, mode) - objective(g, &xm, &r, mode)) / (2.0 * H);
        pairs.push((grads.input.data()[i], fd));
    }
    let analytic: Vec<Vec<f64>> = grads.param_slices().iter().map(|s| s.to_vec()).collect();
    let lens: Vec<usize> = g.param_slots().iter().map(|s| s.values.len()).collect();
    assert_eq!(analytic.len(), lens.len(), "gradient slices align with parameter slots");
    for (si, &len) in lens.iter().enumerate() {
        assert_eq!(analytic[si].len(), len);
        for j in 0..len {
            let orig = g.param_slots()[si].values[j];
            g.param_slots()[si].values[j] = orig + H;
            let fp = objective(g, x, &r, mode);
            g.param_slots()[si].values[j] = orig - H;
            let fm = objective(g, x, &r, mode);
            g.param_slots()[si].values[j] = orig;
            pairs.push((analytic[si][j], (fp - fm) / (2.0 * H)));
        }
    }
    let scale = pairs.iter().fold(0.0f64, |m, (a, _)| m.max(a.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    pairs.iter().map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}
