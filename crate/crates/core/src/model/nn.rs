//! Minimal feed-forward layers with hand-derived gradients.
//!
//! Tensors are flat `f64` slices in channel-major `(c, h, w)` order; dense
//! layers consume the flattened form directly. Each layer's parameters are
//! laid out as `weight` followed by `bias`, and a [`Sequential`] concatenates
//! layers in order. That flat order is the order used by gradients and by the
//! parameter file.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs][inputs]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        for (o, out) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let z = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *out = self.activation.apply(z);
        }
    }

    fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        let mut dx = dx;
        if let Some(dx) = dx.as_deref_mut() {
            dx.fill(0.0);
        }
        for o in 0..self.outputs {
            let dz = dy[o] * self.activation.grad_from_output(y[o]);
            if dz == 0.0 {
                continue;
            }
            gb[o] += dz;
            let base = o * self.inputs;
            for (g, v) in gw[base..base + self.inputs].iter_mut().zip(x) {
                *g += dz * v;
            }
            if let Some(dx) = dx.as_deref_mut() {
                for (d, w) in dx.iter_mut().zip(&self.weight[base..base + self.inputs]) {
                    *d += dz * w;
                }
            }
        }
    }
}

/// Valid (unpadded) 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_height: usize,
    pub in_width: usize,
    /// `[out][in][k][k]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Conv2d {
    pub fn zeros(
        (in_channels, in_height, in_width): (usize, usize, usize),
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            in_height,
            in_width,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
            activation,
        }
    }

    pub fn out_height(&self) -> usize {
        (self.in_height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width - self.kernel) / self.stride + 1
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        let (k, s) = (self.kernel, self.stride);
        let (h, w) = (self.in_height, self.in_width);
        let (oh, ow) = (self.out_height(), self.out_width());
        for oc in 0..self.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[oc];
                    for ic in 0..self.in_channels {
                        let wbase = (oc * self.in_channels + ic) * k * k;
                        let xbase = ic * h * w;
                        for ky in 0..k {
                            let xrow = xbase + (oy * s + ky) * w + ox * s;
                            let wrow = wbase + ky * k;
                            let xs = &x[xrow..xrow + k];
                            let ws = &self.weight[wrow..wrow + k];
                            acc += xs.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    y[(oc * oh + oy) * ow + ox] = self.activation.apply(acc);
                }
            }
        }
    }

    fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let (k, s) = (self.kernel, self.stride);
        let (h, w) = (self.in_height, self.in_width);
        let (oh, ow) = (self.out_height(), self.out_width());
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        let mut dx = dx;
        if let Some(dx) = dx.as_deref_mut() {
            dx.fill(0.0);
        }
        for oc in 0..self.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let idx = (oc * oh + oy) * ow + ox;
                    let dz = dy[idx] * self.activation.grad_from_output(y[idx]);
                    if dz == 0.0 {
                        continue;
                    }
                    gb[oc] += dz;
                    for ic in 0..self.in_channels {
                        let wbase = (oc * self.in_channels + ic) * k * k;
                        let xbase = ic * h * w;
                        for ky in 0..k {
                            let xrow = xbase + (oy * s + ky) * w + ox * s;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                gw[wrow + kx] += dz * x[xrow + kx];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                for kx in 0..k {
                                    dx[xrow + kx] += dz * self.weight[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution ("deconvolution"), the adjoint of [`Conv2d`]'s
/// input map plus bias and activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_height: usize,
    pub in_width: usize,
    /// Extra rows/columns appended so the output matches a target size.
    pub output_padding: usize,
    /// `[in][out][k][k]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl ConvTranspose2d {
    pub fn zeros(
        (in_channels, in_height, in_width): (usize, usize, usize),
        out_channels: usize,
        kernel: usize,
        stride: usize,
        output_padding: usize,
        activation: Activation,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            in_height,
            in_width,
            output_padding,
            weight: vec![0.0; in_channels * out_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
            activation,
        }
    }

    pub fn out_height(&self) -> usize {
        (self.in_height - 1) * self.stride + self.kernel + self.output_padding
    }

    pub fn out_width(&self) -> usize {
        (self.in_width - 1) * self.stride + self.kernel + self.output_padding
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        let (k, s) = (self.kernel, self.stride);
        let (ih, iw) = (self.in_height, self.in_width);
        let (oh, ow) = (self.out_height(), self.out_width());
        for oc in 0..self.out_channels {
            y[oc * oh * ow..(oc + 1) * oh * ow].fill(self.bias[oc]);
        }
        for ic in 0..self.in_channels {
            for iy in 0..ih {
                for ix in 0..iw {
                    let v = x[(ic * ih + iy) * iw + ix];
                    if v == 0.0 {
                        continue;
                    }
                    for oc in 0..self.out_channels {
                        let wbase = (ic * self.out_channels + oc) * k * k;
                        for ky in 0..k {
                            let yrow = (oc * oh + iy * s + ky) * ow + ix * s;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                y[yrow + kx] += v * self.weight[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
        if self.activation != Activation::Identity {
            for v in y.iter_mut() {
                *v = self.activation.apply(*v);
            }
        }
    }

    fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let (k, s) = (self.kernel, self.stride);
        let (ih, iw) = (self.in_height, self.in_width);
        let (oh, ow) = (self.out_height(), self.out_width());
        let dz: Vec<f64> = dy
            .iter()
            .zip(y)
            .map(|(d, y)| d * self.activation.grad_from_output(*y))
            .collect();
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        for oc in 0..self.out_channels {
            gb[oc] += dz[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
        }
        let mut dx = dx;
        for ic in 0..self.in_channels {
            for iy in 0..ih {
                for ix in 0..iw {
                    let xi = (ic * ih + iy) * iw + ix;
                    let v = x[xi];
                    let mut acc = 0.0;
                    for oc in 0..self.out_channels {
                        let wbase = (ic * self.out_channels + oc) * k * k;
                        for ky in 0..k {
                            let yrow = (oc * oh + iy * s + ky) * ow + ix * s;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                let d = dz[yrow + kx];
                                gw[wrow + kx] += v * d;
                                acc += d * self.weight[wrow + kx];
                            }
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[xi] = acc;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
}

impl Layer {
    pub fn input_len(&self) -> usize {
        match self {
            Layer::Dense(l) => l.inputs,
            Layer::Conv(l) => l.in_channels * l.in_height * l.in_width,
            Layer::Deconv(l) => l.in_channels * l.in_height * l.in_width,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Layer::Dense(l) => l.outputs,
            Layer::Conv(l) => l.out_channels * l.out_height() * l.out_width(),
            Layer::Deconv(l) => l.out_channels * l.out_height() * l.out_width(),
        }
    }

    /// `(out_channels, out_height, out_width)`; dense layers report `(n, 1, 1)`.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        match self {
            Layer::Dense(l) => (l.outputs, 1, 1),
            Layer::Conv(l) => (l.out_channels, l.out_height(), l.out_width()),
            Layer::Deconv(l) => (l.out_channels, l.out_height(), l.out_width()),
        }
    }

    fn tensors(&self) -> (&[f64], &[f64]) {
        match self {
            Layer::Dense(l) => (&l.weight, &l.bias),
            Layer::Conv(l) => (&l.weight, &l.bias),
            Layer::Deconv(l) => (&l.weight, &l.bias),
        }
    }

    fn tensors_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        match self {
            Layer::Dense(l) => (&mut l.weight, &mut l.bias),
            Layer::Conv(l) => (&mut l.weight, &mut l.bias),
            Layer::Deconv(l) => (&mut l.weight, &mut l.bias),
        }
    }

    pub fn param_count(&self) -> usize {
        let (w, b) = self.tensors();
        w.len() + b.len()
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self {
            Layer::Dense(l) => vec![l.outputs, l.inputs],
            Layer::Conv(l) => vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
            Layer::Deconv(l) => vec![l.in_channels, l.out_channels, l.kernel, l.kernel],
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            Layer::Dense(l) => l.inputs,
            Layer::Conv(l) => l.in_channels * l.kernel * l.kernel,
            // Each output of a strided deconvolution sees roughly
            // in_channels * (k / stride)^2 inputs.
            Layer::Deconv(l) => {
                let per_axis = l.kernel.div_ceil(l.stride);
                l.in_channels * per_axis * per_axis
            }
        }
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        match self {
            Layer::Dense(l) => l.forward(x, y),
            Layer::Conv(l) => l.forward(x, y),
            Layer::Deconv(l) => l.forward(x, y),
        }
    }

    fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        match self {
            Layer::Dense(l) => l.backward(x, y, dy, grad, dx),
            Layer::Conv(l) => l.backward(x, y, dy, grad, dx),
            Layer::Deconv(l) => l.backward(x, y, dy, grad, dx),
        }
    }
}

/// Weight initialization scheme. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-gain / sqrt(fan_in), gain / sqrt(fan_in)]`.
    UniformFanIn {
        gain: f64,
    },
    Zeros,
}

/// Layers applied in order; every layer's output feeds the next.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Per-layer outputs from a forward pass, kept for backpropagation.
pub struct Trace {
    pub outputs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, Layer::input_len)
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_len)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn init_layer<R: Rng>(&mut self, index: usize, init: Init, rng: &mut R) {
        let layer = &mut self.layers[index];
        let fan_in = layer.fan_in().max(1);
        let (w, b) = layer.tensors_mut();
        b.fill(0.0);
        match init {
            Init::Zeros => w.fill(0.0),
            Init::UniformFanIn { gain } => {
                let bound = gain / (fan_in as f64).sqrt();
                for v in w.iter_mut() {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
    }

    pub fn tensor_infos(&self, prefix: &str) -> Vec<TensorInfo> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(TensorInfo {
                name: format!("{prefix}.{i}.weight"),
                shape: layer.weight_shape(),
            });
            out.push(TensorInfo {
                name: format!("{prefix}.{i}.bias"),
                shape: vec![layer.tensors().1.len()],
            });
        }
        out
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            let (w, b) = layer.tensors();
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrites all parameters from a flat slice of length `param_count()`.
    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter length");
        let mut offset = 0;
        for layer in &mut self.layers {
            let (w, b) = layer.tensors_mut();
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            b.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
    }

    /// `params -= eta * grad`.
    pub fn descend(&mut self, grad: &[f64], eta: f64) {
        assert_eq!(grad.len(), self.param_count(), "gradient length");
        let mut offset = 0;
        for layer in &mut self.layers {
            let (w, b) = layer.tensors_mut();
            for t in [w, b] {
                for (p, g) in t.iter_mut().zip(&grad[offset..]) {
                    *p -= eta * g;
                }
                offset += t.len();
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.output_len()];
            layer.forward(&cur, &mut next);
            cur = next;
        }
        cur
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outputs.last().map(Vec::as_slice).unwrap_or(x);
            let mut next = vec![0.0; layer.output_len()];
            layer.forward(input, &mut next);
            outputs.push(next);
        }
        Trace { outputs }
    }

    /// Accumulates the parameter gradient of `dout . output` into `grad`
    /// and returns the gradient with respect to the input when requested.
    pub fn backward(
        &self,
        x: &[f64],
        trace: &Trace,
        dout: &[f64],
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.param_count();
        }
        let mut upstream = dout.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = if i == 0 { x } else { &trace.outputs[i - 1] };
            let need_dx = i > 0 || want_input_grad;
            let mut dx = if need_dx {
                vec![0.0; layer.input_len()]
            } else {
                Vec::new()
            };
            let g = &mut grad[offsets[i]..offsets[i] + layer.param_count()];
            layer.backward(
                input,
                &trace.outputs[i],
                &upstream,
                g,
                need_dx.then_some(dx.as_mut_slice()),
            );
            if !need_dx {
                return None;
            }
            upstream = dx;
        }
        Some(upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(layers: Vec<Layer>, seed: u64) -> Sequential {
        let mut net = Sequential::new(layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..net.layers.len() {
            net.init_layer(i, Init::UniformFanIn { gain: 1.0 }, &mut rng);
        }
        // Nonzero biases exercise the bias paths too.
        let mut p = net.params();
        for v in p.iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.2..0.2);
            }
        }
        net.set_params(&p);
        net
    }

    /// Central finite differences of `sum(c_i * out_i)`.
    fn check(net: &Sequential, x: &[f64], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..net.output_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let objective = |n: &Sequential, x: &[f64]| -> f64 {
            n.forward(x).iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let trace = net.forward_trace(x);
        let mut grad = vec![0.0; net.param_count()];
        let dx = net.backward(x, &trace, &c, &mut grad, true).unwrap();
        let h = 1e-5;
        let params = net.params();
        let mut probe = net.clone();
        for i in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p[i] += h;
            probe.set_params(&p);
            let up = objective(&probe, x);
            p[i] -= 2.0 * h;
            probe.set_params(&p);
            let down = objective(&probe, x);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: fd={fd} analytic={}",
                grad[i]
            );
        }
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.to_vec();
            xp[i] += h;
            let up = objective(net, &xp);
            xp[i] -= 2.0 * h;
            let down = objective(net, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - dx[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "input {i}: fd={fd} analytic={}",
                dx[i]
            );
        }
    }

    #[test]
    fn conv_deconv_dense_gradients_match_finite_differences() {
        let conv = Conv2d::zeros((2, 9, 9), 3, 3, 2, Activation::Tanh);
        let (oc, oh, ow) = (3, conv.out_height(), conv.out_width());
        let dense = Dense::zeros(oc * oh * ow, 5, Activation::Sigmoid);
        let up = Dense::zeros(5, oc * oh * ow, Activation::Tanh);
        let deconv = ConvTranspose2d::zeros((oc, oh, ow), 2, 3, 2, 0, Activation::Identity);
        assert_eq!(deconv.out_height(), 9);
        let net = random_net(
            vec![
                Layer::Conv(conv),
                Layer::Dense(dense),
                Layer::Dense(up),
                Layer::Deconv(deconv),
            ],
            3,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..net.input_len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        check(&net, &x, 5);
    }

    #[test]
    fn deconv_output_padding_shapes() {
        let d = ConvTranspose2d::zeros((16, 5, 5), 8, 5, 2, 1, Activation::Relu);
        assert_eq!((d.out_height(), d.out_width()), (14, 14));
        let d = ConvTranspose2d::zeros((8, 14, 14), 2, 5, 2, 1, Activation::Identity);
        assert_eq!(d.out_height(), 32);
    }

    #[test]
    fn descend_moves_against_gradient() {
        let mut net = Sequential::new(vec![Layer::Dense(Dense::zeros(2, 1, Activation::Identity))]);
        net.descend(&[1.0, -2.0, 0.5], 0.1);
        assert_eq!(net.params(), vec![-0.1, 0.2, -0.05]);
    }
}
