//! Directed acyclic networks over multiband feature maps.
//!
//! Values are numbered: the first `inputs` ids are the network inputs and
//! node `i` produces value `inputs + i`. Every tensor is a
//! [`HyperImage`] whose bands are feature channels.

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom, TAPS};
use super::params::{NetParams, ParamGrads, ParamTensor};
use crate::error::{Error, Result};
use crate::image::HyperImage;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// 3×3 convolution, stride 1.
    Conv { in_ch: usize, out_ch: usize },
    /// 3×3 convolution with stride `factor`.
    DownConv { in_ch: usize, out_ch: usize, factor: usize },
    /// Transposed 3×3 convolution enlarging by `factor`.
    UpConv { in_ch: usize, out_ch: usize, factor: usize },
    LeakyRelu { slope: f64 },
    Relu,
    Sigmoid,
    /// Channel concatenation of two inputs.
    Concat,
    /// Elementwise sum of two inputs.
    SkipAdd,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::DownConv { .. } => "down_conv",
            LayerKind::UpConv { .. } => "up_conv",
            LayerKind::LeakyRelu { .. } => "leaky_relu",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Concat => "concat",
            LayerKind::SkipAdd => "skip_add",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Concat | LayerKind::SkipAdd => 2,
            _ => 1,
        }
    }

    fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::DownConv { .. } | LayerKind::UpConv { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub layer: LayerKind,
    pub inputs: Vec<usize>,
    /// Index of the weight tensor; the bias follows it.
    pub param: Option<usize>,
}

/// Layer list of a network; parameters live separately in [`NetParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: String,
    pub inputs: usize,
    pub nodes: Vec<Node>,
    pub output: usize,
}

/// Incremental builder returning value ids.
#[derive(Debug)]
pub struct NetBuilder {
    spec: NetSpec,
    params: usize,
}

impl NetBuilder {
    pub fn new(name: impl Into<String>, inputs: usize) -> Self {
        Self {
            spec: NetSpec {
                name: name.into(),
                inputs,
                nodes: Vec::new(),
                output: 0,
            },
            params: 0,
        }
    }

    pub fn input(&self, i: usize) -> usize {
        assert!(i < self.spec.inputs);
        i
    }

    pub fn push(&mut self, layer: LayerKind, inputs: &[usize]) -> usize {
        assert_eq!(inputs.len(), layer.arity(), "{} arity", layer.name());
        let param = layer.has_params().then(|| {
            let p = self.params;
            self.params += 2;
            p
        });
        self.spec.nodes.push(Node {
            layer,
            inputs: inputs.to_vec(),
            param,
        });
        self.spec.inputs + self.spec.nodes.len() - 1
    }

    pub fn conv(&mut self, x: usize, in_ch: usize, out_ch: usize) -> usize {
        self.push(LayerKind::Conv { in_ch, out_ch }, &[x])
    }
    pub fn down(&mut self, x: usize, in_ch: usize, out_ch: usize, factor: usize) -> usize {
        self.push(LayerKind::DownConv { in_ch, out_ch, factor }, &[x])
    }
    pub fn up(&mut self, x: usize, in_ch: usize, out_ch: usize, factor: usize) -> usize {
        self.push(LayerKind::UpConv { in_ch, out_ch, factor }, &[x])
    }
    pub fn leaky(&mut self, x: usize, slope: f64) -> usize {
        self.push(LayerKind::LeakyRelu { slope }, &[x])
    }
    pub fn relu(&mut self, x: usize) -> usize {
        self.push(LayerKind::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: usize) -> usize {
        self.push(LayerKind::Sigmoid, &[x])
    }
    pub fn concat(&mut self, a: usize, b: usize) -> usize {
        self.push(LayerKind::Concat, &[a, b])
    }
    pub fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(LayerKind::SkipAdd, &[a, b])
    }

    pub fn finish(mut self, output: usize) -> NetSpec {
        self.spec.output = output;
        self.spec
    }
}

/// Weight tensor shape for a parameterized layer.
fn weight_shape(layer: &LayerKind) -> Option<(Vec<usize>, usize, usize)> {
    match *layer {
        LayerKind::Conv { in_ch, out_ch } | LayerKind::DownConv { in_ch, out_ch, .. } => {
            Some((vec![out_ch, in_ch, 3, 3], in_ch * TAPS, out_ch))
        }
        // Shared layout with the strided convolution it transposes.
        LayerKind::UpConv { in_ch, out_ch, .. } => Some((vec![in_ch, out_ch, 3, 3], in_ch * TAPS, out_ch)),
        _ => None,
    }
}

impl NetSpec {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for node in &self.nodes {
            if let Some((w, _, bias)) = weight_shape(&node.layer) {
                shapes.push(w);
                shapes.push(vec![bias]);
            }
        }
        shapes
    }

    /// Fan-in scaled uniform initialization: every weight and bias drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_params(&self, rng: &mut Rng) -> NetParams {
        let mut tensors = Vec::new();
        for node in &self.nodes {
            if let Some((w, fan_in, bias)) = weight_shape(&node.layer) {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = w.iter().product();
                let wd = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
                let bd = (0..bias).map(|_| rng.uniform_range(-bound, bound)).collect();
                tensors.push(ParamTensor::new(w, wd));
                tensors.push(ParamTensor::new(vec![bias], bd));
            }
        }
        NetParams::new(tensors)
    }

    /// He-uniform weights for leaky-ReLU activations with negative slope
    /// `slope`, zero biases.
    pub fn init_he(&self, slope: f64, rng: &mut Rng) -> NetParams {
        let mut tensors = Vec::new();
        for node in &self.nodes {
            if let Some((w, fan_in, bias)) = weight_shape(&node.layer) {
                let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
                let n: usize = w.iter().product();
                let wd = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
                tensors.push(ParamTensor::new(w, wd));
                tensors.push(ParamTensor::new(vec![bias], vec![0.0; bias]));
            }
        }
        NetParams::new(tensors)
    }

    pub fn zero_params(&self) -> NetParams {
        NetParams::new(
            self.param_shapes()
                .into_iter()
                .map(|s| {
                    let n = s.iter().product();
                    ParamTensor::new(s, vec![0.0; n])
                })
                .collect(),
        )
    }

    /// Output shape (bands, rows, cols) for given input shapes, validating
    /// every layer on the way.
    pub fn output_shape(&self, inputs: &[(usize, usize, usize)]) -> Result<(usize, usize, usize)> {
        let mut shapes = inputs.to_vec();
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<_> = node.inputs.iter().map(|&v| shapes[v]).collect();
            shapes.push(layer_shape(i, &node.layer, &ins)?);
        }
        Ok(shapes[self.output])
    }
}

fn layer_err(layer: usize, kind: &LayerKind, message: String) -> Error {
    Error::Layer {
        layer,
        kind: kind.name(),
        message,
    }
}

fn layer_shape(idx: usize, layer: &LayerKind, ins: &[(usize, usize, usize)]) -> Result<(usize, usize, usize)> {
    let (c, h, w) = ins[0];
    let expect_ch = |want: usize| {
        if c != want {
            Err(layer_err(idx, layer, format!("expected {want} input channels, got {c}")))
        } else {
            Ok(())
        }
    };
    match *layer {
        LayerKind::Conv { in_ch, out_ch } => {
            expect_ch(in_ch)?;
            Ok((out_ch, h, w))
        }
        LayerKind::DownConv { in_ch, out_ch, factor } => {
            expect_ch(in_ch)?;
            Ok((out_ch, kernels::strided_dim(h, factor), kernels::strided_dim(w, factor)))
        }
        LayerKind::UpConv { in_ch, out_ch, factor } => {
            expect_ch(in_ch)?;
            Ok((out_ch, h * factor, w * factor))
        }
        LayerKind::LeakyRelu { .. } | LayerKind::Relu | LayerKind::Sigmoid => Ok((c, h, w)),
        LayerKind::Concat | LayerKind::SkipAdd => {
            let (c2, h2, w2) = ins[1];
            if (h, w) != (h2, w2) {
                return Err(layer_err(idx, layer, format!("spatial mismatch {h}x{w} vs {h2}x{w2}")));
            }
            if matches!(layer, LayerKind::SkipAdd) {
                if c != c2 {
                    return Err(layer_err(idx, layer, format!("channel mismatch {c} vs {c2}")));
                }
                Ok((c, h, w))
            } else {
                Ok((c + c2, h, w))
            }
        }
    }
}

/// A network spec with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetSpec,
    pub params: NetParams,
}

/// Forward activations needed for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<HyperImage>,
    version: u64,
    name: String,
}

impl Tape {
    pub fn output(&self, spec: &NetSpec) -> &HyperImage {
        &self.values[spec.output]
    }
}

/// Gradients of a scalar with respect to the parameters and to each input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamGrads,
    pub inputs: Vec<HyperImage>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Network {
    pub fn new(spec: NetSpec, params: NetParams) -> Result<Self> {
        let shapes = spec.param_shapes();
        if shapes.len() != params.tensors.len() {
            return Err(Error::shape(
                format!("{} parameter tensors", spec.name),
                shapes.len(),
                params.tensors.len(),
            ));
        }
        for (i, (s, t)) in shapes.iter().zip(&params.tensors).enumerate() {
            if *s != t.shape {
                return Err(Error::shape(format!("{} tensor {i}", spec.name), format!("{s:?}"), format!("{:?}", t.shape)));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn init(spec: NetSpec, rng: &mut Rng) -> Self {
        let params = spec.init_params(rng);
        Self { spec, params }
    }

    /// Zero the weights and bias of the layer producing the output, so the
    /// network starts as the constant zero map. No-op if that layer has no
    /// parameters.
    pub fn zero_output_layer(&mut self) {
        let Some(node) = self.spec.output.checked_sub(self.spec.inputs) else {
            return;
        };
        if let Some(p) = self.spec.nodes[node].param {
            for t in &mut self.params.tensors[p..p + 2] {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
            self.params.touch();
        }
    }

    pub fn forward(&self, inputs: &[&HyperImage]) -> Result<(HyperImage, Tape)> {
        if inputs.len() != self.spec.inputs {
            return Err(Error::shape(format!("{} inputs", self.spec.name), self.spec.inputs, inputs.len()));
        }
        let mut values: Vec<HyperImage> = inputs.iter().map(|x| (*x).clone()).collect();
        for (i, node) in self.spec.nodes.iter().enumerate() {
            let ins: Vec<&HyperImage> = node.inputs.iter().map(|&v| &values[v]).collect();
            let out = self.forward_node(i, node, &ins)?;
            values.push(out);
        }
        let out = values[self.spec.output].clone();
        Ok((
            out,
            Tape {
                values,
                version: self.params.version(),
                name: self.spec.name.clone(),
            },
        ))
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, inputs: &[&HyperImage]) -> Result<HyperImage> {
        Ok(self.forward(inputs)?.0)
    }

    fn forward_node(&self, idx: usize, node: &Node, ins: &[&HyperImage]) -> Result<HyperImage> {
        let dims: Vec<_> = ins.iter().map(|x| (x.bands(), x.rows(), x.cols())).collect();
        let (oc, oh, ow) = layer_shape(idx, &node.layer, &dims)?;
        let x = ins[0];
        let data = match node.layer {
            LayerKind::Conv { in_ch, out_ch } => {
                let p = node.param.unwrap();
                let g = ConvGeom::strided(in_ch, out_ch, x.rows(), x.cols(), 1);
                kernels::conv_forward(&g, x.data(), &self.params.tensors[p].data, &self.params.tensors[p + 1].data)
            }
            LayerKind::DownConv { in_ch, out_ch, factor } => {
                let p = node.param.unwrap();
                let g = ConvGeom::strided(in_ch, out_ch, x.rows(), x.cols(), factor);
                kernels::conv_forward(&g, x.data(), &self.params.tensors[p].data, &self.params.tensors[p + 1].data)
            }
            LayerKind::UpConv { in_ch, out_ch, factor } => {
                let p = node.param.unwrap();
                let g = up_geom(in_ch, out_ch, x.rows(), x.cols(), factor);
                kernels::upconv_forward(&g, x.data(), &self.params.tensors[p].data, &self.params.tensors[p + 1].data)
            }
            LayerKind::LeakyRelu { slope } => x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
            LayerKind::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            LayerKind::Concat => [x.data(), ins[1].data()].concat(),
            LayerKind::SkipAdd => x.data().iter().zip(ins[1].data()).map(|(a, b)| a + b).collect(),
        };
        if let Some(bad) = data.iter().position(|v: &f64| !v.is_finite()) {
            return Err(layer_err(idx, &node.layer, format!("non-finite activation at {bad}")));
        }
        Ok(HyperImage::from_vec(oc, oh, ow, data).expect("shape computed above"))
    }

    /// Reverse pass: gradients of the scalar whose derivative with respect to
    /// the output is `grad_out`.
    pub fn backward(&self, tape: &Tape, grad_out: &HyperImage) -> Result<Gradients> {
        if tape.version != self.params.version() || tape.name != self.spec.name {
            return Err(Error::StaleTape {
                tape: tape.version,
                current: self.params.version(),
            });
        }
        let out_shape = tape.values[self.spec.output].shape();
        grad_out.ensure_shape(out_shape, "backward grad_out")?;

        let mut grads: Vec<Option<HyperImage>> = vec![None; tape.values.len()];
        grads[self.spec.output] = Some(grad_out.clone());
        let mut pgrads = self.params.zero_grads();

        for (i, node) in self.spec.nodes.iter().enumerate().rev() {
            let vid = self.spec.inputs + i;
            let Some(g) = grads[vid].take() else { continue };
            let x = &tape.values[node.inputs[0]];
            let y = &tape.values[vid];
            let mut contribs: Vec<(usize, HyperImage)> = Vec::with_capacity(2);
            match node.layer {
                LayerKind::Conv { in_ch, out_ch } | LayerKind::DownConv { in_ch, out_ch, .. } => {
                    let stride = match node.layer {
                        LayerKind::DownConv { factor, .. } => factor,
                        _ => 1,
                    };
                    let p = node.param.unwrap();
                    let geom = ConvGeom::strided(in_ch, out_ch, x.rows(), x.cols(), stride);
                    let (gw, gb) = split_pair(&mut pgrads, p);
                    let dx = kernels::conv_backward(&geom, x.data(), &self.params.tensors[p].data, g.data(), gw, gb);
                    contribs.push((node.inputs[0], HyperImage::from_vec(in_ch, x.rows(), x.cols(), dx)?));
                }
                LayerKind::UpConv { in_ch, out_ch, factor } => {
                    let p = node.param.unwrap();
                    let geom = up_geom(in_ch, out_ch, x.rows(), x.cols(), factor);
                    let (gw, gb) = split_pair(&mut pgrads, p);
                    let dx = kernels::upconv_backward(&geom, x.data(), &self.params.tensors[p].data, g.data(), gw, gb);
                    contribs.push((node.inputs[0], HyperImage::from_vec(in_ch, x.rows(), x.cols(), dx)?));
                }
                LayerKind::LeakyRelu { slope } => {
                    let d = x.data().iter().zip(g.data()).map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv });
                    contribs.push((node.inputs[0], image_like(x, d.collect())));
                }
                LayerKind::Relu => {
                    let d = x.data().iter().zip(g.data()).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 });
                    contribs.push((node.inputs[0], image_like(x, d.collect())));
                }
                LayerKind::Sigmoid => {
                    let d = y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (1.0 - s));
                    contribs.push((node.inputs[0], image_like(x, d.collect())));
                }
                LayerKind::Concat => {
                    let split = x.shape().len();
                    let b = &tape.values[node.inputs[1]];
                    contribs.push((node.inputs[0], image_like(x, g.data()[..split].to_vec())));
                    contribs.push((node.inputs[1], image_like(b, g.data()[split..].to_vec())));
                }
                LayerKind::SkipAdd => {
                    contribs.push((node.inputs[0], g.clone()));
                    contribs.push((node.inputs[1], g));
                }
            }
            for (target, c) in contribs {
                match &mut grads[target] {
                    Some(acc) => acc.data_mut().iter_mut().zip(c.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let inputs = (0..self.spec.inputs)
            .map(|i| grads[i].take().unwrap_or_else(|| HyperImage::zeros_like(&tape.values[i])))
            .collect();
        Ok(Gradients { params: pgrads, inputs })
    }
}

fn up_geom(in_ch: usize, out_ch: usize, rows: usize, cols: usize, factor: usize) -> ConvGeom {
    // Transposed view: the large side carries the output channels.
    ConvGeom {
        in_ch: out_ch,
        out_ch: in_ch,
        h: rows * factor,
        w: cols * factor,
        oh: rows,
        ow: cols,
        stride: factor,
    }
}

fn split_pair(grads: &mut ParamGrads, p: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = grads.split_at_mut(p + 1);
    (&mut a[p], &mut b[0])
}

fn image_like(x: &HyperImage, data: Vec<f64>) -> HyperImage {
    HyperImage::from_vec(x.bands(), x.rows(), x.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, b: usize, r: usize, c: usize) -> HyperImage {
        HyperImage::from_fn(b, r, c, |_, _, _| rng.normal())
    }

    #[test]
    fn he_init_bounds_and_zero_output_layer() {
        let mut b = NetBuilder::new("h", 1);
        let x = b.input(0);
        let h = b.conv(x, 3, 6);
        let h = b.leaky(h, 0.2);
        let y = b.conv(h, 6, 2);
        let spec = b.finish(y);
        let params = spec.init_he(0.2, &mut Rng::new(4));
        let bound = (6.0_f64 / (1.04 * 27.0)).sqrt();
        assert!(params.tensors[0].data.iter().all(|v| v.abs() <= bound));
        assert!(params.tensors[0].data.iter().any(|v| v.abs() > 0.5 * bound));
        assert!(params.tensors[1].data.iter().all(|&v| v == 0.0));

        let mut net = Network::new(spec, params).unwrap();
        let before = net.params.tensors[0].clone();
        net.zero_output_layer();
        assert_eq!(net.params.tensors[0], before);
        assert!(net.params.tensors[2..].iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        let out = net.predict(&[&random(&mut Rng::new(5), 3, 5, 5)]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_relu_tail_gives_zero() {
        let mut b = NetBuilder::new("z", 1);
        let x = b.input(0);
        let c = b.conv(x, 2, 3);
        let r = b.relu(c);
        let spec = b.finish(r);
        let net = Network::new(spec.clone(), spec.zero_params()).unwrap();
        let mut rng = Rng::new(1);
        let out = net.predict(&[&random(&mut rng, 2, 4, 4)]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_center_tap_is_identity_map() {
        let mut b = NetBuilder::new("id", 1);
        let x = b.input(0);
        let c = b.conv(x, 2, 2);
        let spec = b.finish(c);
        let mut params = spec.zero_params();
        for ch in 0..2 {
            params.tensors[0].data[(ch * 2 + ch) * 9 + 4] = 1.0;
        }
        let net = Network::new(spec, params).unwrap();
        let mut rng = Rng::new(2);
        let x = random(&mut rng, 2, 5, 3);
        assert_eq!(net.predict(&[&x]).unwrap(), x);
    }

    #[test]
    fn two_layer_net_matches_loop_oracle() {
        let mut b = NetBuilder::new("toy", 1);
        let x = b.input(0);
        let c1 = b.conv(x, 2, 3);
        let a = b.leaky(c1, 0.2);
        let c2 = b.conv(a, 3, 1);
        let spec = b.finish(c2);
        let mut rng = Rng::new(3);
        let net = Network::init(spec, &mut rng);
        let input = random(&mut rng, 2, 4, 4);
        let got = net.predict(&[&input]).unwrap();

        let t = &net.params.tensors;
        let conv = |inp: &dyn Fn(usize, isize, isize) -> f64, w: &[f64], bias: &[f64], cin: usize, o: usize, y: usize, x: usize| {
            let mut acc = bias[o];
            for i in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        acc += w[((o * cin + i) * 3 + ky) * 3 + kx] * inp(i, y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    }
                }
            }
            acc
        };
        let at = |i: usize, y: isize, x: isize| {
            if (0..4).contains(&y) && (0..4).contains(&x) {
                input.get(i, y as usize, x as usize)
            } else {
                0.0
            }
        };
        let hidden = |i: usize, y: isize, x: isize| {
            if !((0..4).contains(&y) && (0..4).contains(&x)) {
                return 0.0;
            }
            let v = conv(&at, &t[0].data, &t[1].data, 2, i, y as usize, x as usize);
            if v > 0.0 { v } else { 0.2 * v }
        };
        for y in 0..4 {
            for x in 0..4 {
                let want = conv(&hidden, &t[2].data, &t[3].data, 3, 0, y, x);
                assert!((got.get(0, y, x) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let mut b = NetBuilder::new("bad", 2);
        let (x, y) = (b.input(0), b.input(1));
        let s = b.add(x, y);
        let spec = b.finish(s);
        let net = Network::new(spec.clone(), spec.zero_params()).unwrap();
        let err = net.forward(&[&HyperImage::zeros(2, 4, 4), &HyperImage::zeros(3, 4, 4)]).unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 0, kind: "skip_add", .. }), "{err}");
    }

    #[test]
    fn stale_tape_rejected() {
        let mut b = NetBuilder::new("s", 1);
        let x = b.input(0);
        let c = b.conv(x, 1, 1);
        let spec = b.finish(c);
        let mut rng = Rng::new(4);
        let mut net = Network::init(spec, &mut rng);
        let input = random(&mut rng, 1, 3, 3);
        let (out, tape) = net.forward(&[&input]).unwrap();
        let g = net.params.zero_grads();
        net.params.adam_step(&g, &Default::default()).unwrap();
        assert!(matches!(net.backward(&tape, &out), Err(Error::StaleTape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut b = NetBuilder::new("z", 1);
        let x = b.input(0);
        let c = b.conv(x, 2, 2);
        let s = b.sigmoid(c);
        let spec = b.finish(s);
        let mut rng = Rng::new(5);
        let net = Network::init(spec, &mut rng);
        let input = random(&mut rng, 2, 3, 3);
        let (out, tape) = net.forward(&[&input]).unwrap();
        let g = net.backward(&tape, &HyperImage::zeros_like(&out)).unwrap();
        assert!(g.params.iter().flatten().all(|&v| v == 0.0));
        assert!(g.inputs[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut b = NetBuilder::new("sig", 1);
        let x = b.input(0);
        let s = b.sigmoid(x);
        let spec = b.finish(s);
        let net = Network::new(spec.clone(), spec.zero_params()).unwrap();
        let (out, tape) = net.forward(&[&HyperImage::zeros(1, 1, 1)]).unwrap();
        assert_eq!(out.data()[0], 0.5);
        let g = net.backward(&tape, &HyperImage::filled(1, 1, 1, 2.0)).unwrap();
        assert_eq!(g.inputs[0].data()[0], 0.5);
    }

    #[test]
    fn up_conv_is_adjoint_of_down_conv_layer() {
        let mut rng = Rng::new(6);
        let mut bd = NetBuilder::new("d", 1);
        let x = bd.input(0);
        let d = bd.down(x, 3, 4, 2);
        let down_spec = bd.finish(d);
        let mut bu = NetBuilder::new("u", 1);
        let y = bu.input(0);
        let u = bu.up(y, 4, 3, 2);
        let up_spec = bu.finish(u);

        let mut dp = down_spec.init_params(&mut rng);
        dp.tensors[1].data.iter_mut().for_each(|v| *v = 0.0);
        let mut up = up_spec.zero_params();
        up.tensors[0].data = dp.tensors[0].data.clone();
        let down = Network::new(down_spec, dp).unwrap();
        let upn = Network::new(up_spec, up).unwrap();

        let xin = random(&mut rng, 3, 8, 6);
        let yin = random(&mut rng, 4, 4, 3);
        let lhs = down.predict(&[&xin]).unwrap().dot(&yin).unwrap();
        let rhs = xin.dot(&upn.predict(&[&yin]).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn output_shape_is_pure_function_of_input_shape() {
        let mut b = NetBuilder::new("shape", 1);
        let x = b.input(0);
        let d = b.down(x, 2, 2, 2);
        let u = b.up(d, 2, 5, 2);
        let spec = b.finish(u);
        assert_eq!(spec.output_shape(&[(2, 8, 6)]).unwrap(), (5, 8, 6));
        let mut rng = Rng::new(9);
        let net = Network::init(spec, &mut rng);
        let out = net.predict(&[&random(&mut rng, 2, 8, 6)]).unwrap();
        assert_eq!((out.bands(), out.rows(), out.cols()), (5, 8, 6));
    }
}
