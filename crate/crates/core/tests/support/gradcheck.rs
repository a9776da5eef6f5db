use rand::Rng as _;
use ssa_core::masking::{LayerMask, MaskSet};
use ssa_core::nn::{cross_entropy_softmax, LayerSpec, Network};
use ssa_core::rng::{stream, Purpose};
use ssa_core::Tensor;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, Purpose::Data, 42);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Linear functional `sum(logits * r)`; its logit gradient is `r`.
pub fn probe_loss(r: &Tensor) -> impl Fn(&Tensor) -> (f64, Tensor) + '_ {
    move |logits: &Tensor| {
        let v = logits.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        (v, r.clone())
    }
}

pub fn ce_loss(labels: &[usize]) -> impl Fn(&Tensor) -> (f64, Tensor) + '_ {
    move |logits: &Tensor| cross_entropy_softmax(logits, labels).unwrap()
}

/// Max relative error between backprop and central differences over every
/// parameter entry.
pub fn max_error(net: &mut Network, x: &Tensor, loss: &dyn Fn(&Tensor) -> (f64, Tensor)) -> f64 {
    let logits = net.forward(x, None).unwrap();
    let (_, g) = loss(&logits);
    let grads = net.backward(&g).unwrap();
    let analytic: Vec<Tensor> = grads.tensors().into_iter().cloned().collect();
    let mut worst: f64 = 0.0;
    for (p, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = net.params()[p].data()[j];
            net.params_mut()[p].data_mut()[j] = orig + H;
            let plus = loss(&net.infer(x, None).unwrap()).0;
            net.params_mut()[p].data_mut()[j] = orig - H;
            let minus = loss(&net.infer(x, None).unwrap()).0;
            net.params_mut()[p].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            worst = worst.max(rel_err(a.data()[j], numeric));
        }
    }
    worst
}

pub fn dense(input: usize, output: usize) -> LayerSpec {
    LayerSpec::Dense {
        input,
        output,
        bias: true,
    }
}

pub fn conv(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
    }
}

/// Conv, ReLU, Flatten and Dense layers under cross-entropy.
pub fn composed_stack_error() -> f64 {
    let specs = [
        conv(1, 3, 3, 2, 1),
        LayerSpec::Relu,
        conv(3, 2, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        dense(2 * 4 * 4, 5),
        LayerSpec::Relu,
        dense(5, 3),
    ];
    let mut net = Network::new(&[1, 7, 7], &specs, &mut stream(5, Purpose::Init, 0)).unwrap();
    let x = random_tensor(&[3, 1, 7, 7], 9);
    max_error(&mut net, &x, &ce_loss(&[0, 2, 1]))
}

/// Dense layers under a mask sparse enough for the compressed kernels.
/// Pruned weight entries are skipped; every other parameter is checked.
pub fn sparse_masked_error() -> f64 {
    let specs = [dense(60, 20), LayerSpec::Relu, dense(20, 3)];
    let mut net = Network::new(&[60], &specs, &mut stream(6, Purpose::Init, 0)).unwrap();
    let mut rng = stream(6, Purpose::Mask, 0);
    let masks = MaskSet {
        layers: net
            .weight_shapes()
            .into_iter()
            .zip([0.04, 0.3])
            .map(|((name, shape), p)| {
                let n = shape.iter().product();
                let bits = (0..n).map(|_| rng.random_bool(p) as u8).collect();
                LayerMask::new(name, shape, bits).unwrap()
            })
            .collect(),
    };
    let x = random_tensor(&[5, 60], 14);
    let labels = [2, 0, 1, 1, 0];
    let loss = |net: &Network| {
        cross_entropy_softmax(&net.infer_masked(&x, &masks).unwrap(), &labels)
            .unwrap()
            .0
    };

    let logits = net.forward_masked(&x, &masks).unwrap();
    let (_, g) = cross_entropy_softmax(&logits, &labels).unwrap();
    let grads = net.backward(&g).unwrap();
    let analytic: Vec<Tensor> = grads.tensors().into_iter().cloned().collect();
    // Parameter order is weight, bias per layer.
    let mask_of = |p: usize| p.is_multiple_of(2).then(|| &masks.layers[p / 2]);

    let mut worst: f64 = 0.0;
    for (p, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            if mask_of(p).is_some_and(|m| m.bits[j] == 0) {
                continue;
            }
            let orig = net.params()[p].data()[j];
            net.params_mut()[p].data_mut()[j] = orig + H;
            let plus = loss(&net);
            net.params_mut()[p].data_mut()[j] = orig - H;
            let minus = loss(&net);
            net.params_mut()[p].data_mut()[j] = orig;
            worst = worst.max(rel_err(a.data()[j], (plus - minus) / (2.0 * H)));
        }
    }
    worst
}
