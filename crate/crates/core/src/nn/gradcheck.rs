//! Central finite-difference gradient checks.

use super::network::Network;
use crate::error::Result;
use crate::image::HyperImage;
use crate::rng::Rng;

/// Denominator floor for relative errors: gradients smaller than this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (tensor, index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn record(&mut self, tensor: usize, index: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((tensor, index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

/// Indices to probe in a tensor of length `n`: all of them, or an evenly
/// spread subset of `limit`.
pub fn probe_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        (0..limit).map(|i| i * n / limit).collect()
    }
}

/// Check parameter and input gradients of `net` for the scalar
/// `<net(inputs), R>` with a seeded random projection `R`.
pub fn check_network(
    net: &Network,
    inputs: &[&HyperImage],
    seed: u64,
    eps: f64,
    per_tensor_limit: usize,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let (out, tape) = net.forward(inputs)?;
    let proj = HyperImage::from_fn(out.bands(), out.rows(), out.cols(), |_, _, _| rng.normal());
    let grads = net.backward(&tape, &proj)?;
    let loss = |n: &Network, ins: &[&HyperImage]| -> Result<f64> { n.predict(ins)?.dot(&proj) };

    let mut report = GradCheckReport::default();
    let mut probe = net.clone();
    for t in 0..net.params.tensors.len() {
        for i in probe_indices(net.params.tensors[t].len(), per_tensor_limit) {
            let orig = probe.params.tensors[t].data[i];
            probe.params.tensors[t].data[i] = orig + eps;
            let plus = loss(&probe, inputs)?;
            probe.params.tensors[t].data[i] = orig - eps;
            let minus = loss(&probe, inputs)?;
            probe.params.tensors[t].data[i] = orig;
            report.record(t, i, grads.params[t][i], (plus - minus) / (2.0 * eps));
        }
    }
    let base = net.params.tensors.len();
    for (k, input) in inputs.iter().enumerate() {
        for i in probe_indices(input.shape().len(), per_tensor_limit) {
            let mut shifted: Vec<HyperImage> = inputs.iter().map(|x| (*x).clone()).collect();
            shifted[k].data_mut()[i] += eps;
            let plus = loss(net, &shifted.iter().collect::<Vec<_>>())?;
            shifted[k].data_mut()[i] -= 2.0 * eps;
            let minus = loss(net, &shifted.iter().collect::<Vec<_>>())?;
            report.record(base + k, i, grads.inputs[k].data()[i], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::{LayerKind, NetBuilder};

    fn single_layer(layer: LayerKind, in_shape: (usize, usize, usize)) -> (Network, HyperImage) {
        let mut b = NetBuilder::new(layer.name(), 1);
        let x = b.input(0);
        let y = b.push(layer, &[x]);
        let spec = b.finish(y);
        let mut rng = Rng::new(17);
        let net = Network::init(spec, &mut rng);
        let input = HyperImage::from_fn(in_shape.0, in_shape.1, in_shape.2, |_, _, _| rng.normal());
        (net, input)
    }

    #[test]
    fn every_unary_layer_kind() {
        let cases = [
            (LayerKind::Conv { in_ch: 2, out_ch: 3 }, (2, 5, 4)),
            (LayerKind::DownConv { in_ch: 2, out_ch: 3, factor: 2 }, (2, 6, 4)),
            (LayerKind::UpConv { in_ch: 2, out_ch: 3, factor: 2 }, (2, 3, 2)),
            (LayerKind::LeakyRelu { slope: 0.2 }, (2, 3, 3)),
            (LayerKind::Relu, (2, 3, 3)),
            (LayerKind::Sigmoid, (2, 3, 3)),
        ];
        for (layer, shape) in cases {
            let (net, input) = single_layer(layer, shape);
            let r = check_network(&net, &[&input], 3, 1e-5, usize::MAX).unwrap();
            assert!(r.passes(1e-4), "{}: {:?}", layer.name(), r);
        }
    }

    #[test]
    fn binary_layer_kinds() {
        for layer in [LayerKind::Concat, LayerKind::SkipAdd] {
            let mut b = NetBuilder::new("bin", 2);
            let (x, y) = (b.input(0), b.input(1));
            let z = b.push(layer, &[x, y]);
            let c = b.conv(z, if layer == LayerKind::Concat { 4 } else { 2 }, 2);
            let spec = b.finish(c);
            let mut rng = Rng::new(5);
            let net = Network::init(spec, &mut rng);
            let a = HyperImage::from_fn(2, 3, 3, |_, _, _| rng.normal());
            let bb = HyperImage::from_fn(2, 3, 3, |_, _, _| rng.normal());
            let r = check_network(&net, &[&a, &bb], 4, 1e-5, usize::MAX).unwrap();
            assert!(r.passes(1e-4), "{}: {:?}", layer.name(), r);
        }
    }
}
