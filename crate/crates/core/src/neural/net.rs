//! Small convolutional networks with exact manual forward and backward
//! passes in `f64`.
//!
//! All parameters live in one flat `theta` vector with a per-layer layout
//! table. That single decision keeps optimizers (elementwise updates),
//! checkpoints (one blob), and finite-difference verification (perturb
//! `theta[i]`) simple and exact.
//!
//! Conventions that matter for verification:
//! - ReLU uses subgradient 0 at exactly 0.
//! - Max-pool ties break toward the first (row-major) maximum.
//! - Cross-entropy uses the max-subtracted softmax; binary cross-entropy is
//!   evaluated in its overflow-free form.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// One layer of a sequential network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    /// 2D convolution, stride 1, square kernel, zero padding.
    Conv {
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping max pooling; extents must divide by `size`.
    MaxPool { size: usize },
    Flatten,
    Dense { out_dim: usize },
}

/// Shape of the value flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueShape {
    T3(usize, usize, usize),
    T1(usize),
}

impl ValueShape {
    pub fn len(&self) -> usize {
        match self {
            ValueShape::T3(c, h, w) => c * h * w,
            ValueShape::T1(n) => *n,
        }
    }
}

/// A value flowing between layers.
#[derive(Debug, Clone)]
pub enum Value {
    T3(Array3<f64>),
    T1(Array1<f64>),
}

impl Value {
    fn as_t3(&self) -> &Array3<f64> {
        match self {
            Value::T3(a) => a,
            Value::T1(_) => unreachable!("shape inference guarantees a 3D value here"),
        }
    }

    fn as_t1(&self) -> &Array1<f64> {
        match self {
            Value::T1(a) => a,
            Value::T3(_) => unreachable!("shape inference guarantees a 1D value here"),
        }
    }
}

/// Architecture: input shape plus a layer stack ending in a 1D output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Infer the output shape of every layer, rejecting inconsistent stacks.
    pub fn infer_shapes(&self) -> Result<Vec<ValueShape>> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("input extents must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut shape = ValueShape::T3(c, h, w);
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        padding,
                    },
                    ValueShape::T3(_, h, w),
                ) => {
                    if out_channels == 0 || kernel == 0 {
                        return Err(Error::Config(format!("layer {i}: conv extents must be positive")));
                    }
                    let oh = (h + 2 * padding).checked_sub(kernel - 1);
                    let ow = (w + 2 * padding).checked_sub(kernel - 1);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                            let cin = match shape {
                                ValueShape::T3(c, _, _) => c,
                                ValueShape::T1(_) => unreachable!(),
                            };
                            let _ = cin;
                            ValueShape::T3(out_channels, oh, ow)
                        }
                        _ => {
                            return Err(Error::Config(format!(
                                "layer {i}: kernel {kernel} too large for {h}x{w} input"
                            )))
                        }
                    }
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::MaxPool { size }, ValueShape::T3(c, h, w)) => {
                    if size == 0 || h % size != 0 || w % size != 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: pool size {size} does not divide {h}x{w}"
                        )));
                    }
                    ValueShape::T3(c, h / size, w / size)
                }
                (LayerSpec::Flatten, ValueShape::T3(c, h, w)) => ValueShape::T1(c * h * w),
                (LayerSpec::Dense { out_dim }, ValueShape::T1(n)) => {
                    if out_dim == 0 || n == 0 {
                        return Err(Error::Config(format!("layer {i}: dense extents must be positive")));
                    }
                    ValueShape::T1(out_dim)
                }
                (l, s) => {
                    return Err(Error::Config(format!(
                        "layer {i}: {l:?} cannot consume a {s:?} value"
                    )))
                }
            };
            shapes.push(shape);
        }
        match shapes.last() {
            Some(ValueShape::T1(_)) => Ok(shapes),
            _ => Err(Error::Config("network must end in a 1D output".into())),
        }
    }
}

/// Where one layer's parameters live inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct ParamSlot {
    weight_offset: usize,
    weight_len: usize,
    bias_offset: usize,
    bias_len: usize,
}

/// A network: spec, inferred shapes, and the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<ValueShape>,
    slots: Vec<Option<ParamSlot>>,
    pub theta: Vec<f64>,
}

/// Intermediate values of one forward pass: `values[i]` is the input of layer
/// `i`, `values[len]` the network output.
pub struct Trace {
    values: Vec<Value>,
}

impl Trace {
    pub fn output(&self) -> &Array1<f64> {
        self.values
            .last()
            .expect("trace always holds the input")
            .as_t1()
    }
}

impl Network {
    /// He-initialized network: weights are zero-mean normals scaled by
    /// `sqrt(2 / fan_in)`, biases start at zero.
    pub fn new(spec: NetworkSpec, rng: &mut RngState) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for (i, slot) in net.slots.clone().iter().enumerate() {
            let Some(slot) = slot else { continue };
            let fan_in = match net.spec.layers[i] {
                LayerSpec::Conv { kernel, .. } => {
                    let cin = net.input_channels_of(i);
                    cin * kernel * kernel
                }
                LayerSpec::Dense { .. } => match net.layer_input_shape(i) {
                    ValueShape::T1(n) => n,
                    ValueShape::T3(..) => unreachable!(),
                },
                _ => unreachable!(),
            };
            let scale = (2.0 / fan_in as f64).sqrt();
            for v in &mut net.theta[slot.weight_offset..slot.weight_offset + slot.weight_len] {
                *v = rng.normal() * scale;
            }
        }
        Ok(net)
    }

    /// All-zero parameters (used by optimizer state and tests).
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let mut slots = Vec::with_capacity(spec.layers.len());
        let mut offset = 0usize;
        for (i, layer) in spec.layers.iter().enumerate() {
            let slot = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let cin = match if i == 0 {
                        ValueShape::T3(spec.input.0, spec.input.1, spec.input.2)
                    } else {
                        shapes[i - 1]
                    } {
                        ValueShape::T3(c, _, _) => c,
                        ValueShape::T1(_) => unreachable!(),
                    };
                    let weight_len = out_channels * cin * kernel * kernel;
                    let s = ParamSlot {
                        weight_offset: offset,
                        weight_len,
                        bias_offset: offset + weight_len,
                        bias_len: out_channels,
                    };
                    offset += weight_len + out_channels;
                    Some(s)
                }
                LayerSpec::Dense { out_dim } => {
                    let in_dim = match if i == 0 {
                        return Err(Error::Config("dense cannot be the first layer".into()));
                    } else {
                        shapes[i - 1]
                    } {
                        ValueShape::T1(n) => n,
                        ValueShape::T3(..) => unreachable!(),
                    };
                    let weight_len = out_dim * in_dim;
                    let s = ParamSlot {
                        weight_offset: offset,
                        weight_len,
                        bias_offset: offset + weight_len,
                        bias_len: out_dim,
                    };
                    offset += weight_len + out_dim;
                    Some(s)
                }
                _ => None,
            };
            slots.push(slot);
        }
        Ok(Network {
            spec,
            shapes,
            slots,
            theta: vec![0.0; offset],
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.spec.input
    }

    pub fn output_dim(&self) -> usize {
        match self.shapes.last() {
            Some(ValueShape::T1(n)) => *n,
            _ => unreachable!("validated specs end in a 1D output"),
        }
    }

    fn layer_input_shape(&self, i: usize) -> ValueShape {
        if i == 0 {
            let (c, h, w) = self.spec.input;
            ValueShape::T3(c, h, w)
        } else {
            self.shapes[i - 1]
        }
    }

    fn input_channels_of(&self, i: usize) -> usize {
        match self.layer_input_shape(i) {
            ValueShape::T3(c, _, _) => c,
            ValueShape::T1(_) => unreachable!("conv layers always see 3D inputs"),
        }
    }

    /// Indices of weight (not bias) entries, for L2 regularization.
    pub fn weight_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().flatten().flat_map(|s| {
            s.weight_offset..s.weight_offset + s.weight_len
        })
    }

    /// `lambda * sum(w^2)` over weights only; biases are never regularized.
    pub fn l2_penalty(&self, lambda: f64) -> f64 {
        lambda
            * self
                .weight_indices()
                .map(|i| self.theta[i] * self.theta[i])
                .sum::<f64>()
    }

    /// Add `d(lambda * sum(w^2))/dw = 2 lambda w` into `grad`.
    pub fn add_l2_gradient(&self, lambda: f64, grad: &mut [f64]) {
        for i in self.weight_indices() {
            grad[i] += 2.0 * lambda * self.theta[i];
        }
    }

    /// Multiply the final dense layer's weights and bias by `s`, scaling all
    /// outputs (and hence every logit margin) without moving any decision
    /// boundary. Used to calibrate the logit scale after training so that
    /// deployment margin thresholds are meaningful.
    pub fn scale_output(&mut self, s: f64) -> Result<()> {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::Config(format!(
                "output scale must be positive and finite, got {s}"
            )));
        }
        let (i, slot) = self
            .slots
            .iter()
            .enumerate()
            .rev()
            .find_map(|(i, s)| s.map(|slot| (i, slot)))
            .ok_or_else(|| Error::Config("network has no parameterized layers".into()))?;
        if !matches!(self.spec.layers[i], LayerSpec::Dense { .. }) {
            return Err(Error::Config(
                "output scaling expects a dense final layer".into(),
            ));
        }
        for v in &mut self.theta[slot.weight_offset..slot.bias_offset + slot.bias_len] {
            *v *= s;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_trace(x)?.0)
    }

    pub fn forward_trace(&self, x: &Array3<f64>) -> Result<(Array1<f64>, Trace)> {
        let (c, h, w) = x.dim();
        if (c, h, w) != self.spec.input {
            return Err(Error::Shape(format!(
                "input {:?} does not match network input {:?}",
                (c, h, w),
                self.spec.input
            )));
        }
        let mut values = Vec::with_capacity(self.spec.layers.len() + 1);
        values.push(Value::T3(x.clone()));
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let out = self.layer_forward(i, *layer, values.last().expect("non-empty"));
            values.push(out);
        }
        let out = values.last().expect("non-empty").as_t1().clone();
        Ok((out, Trace { values }))
    }

    fn layer_forward(&self, i: usize, layer: LayerSpec, input: &Value) -> Value {
        match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                padding,
            } => {
                let slot = self.slots[i].expect("conv has parameters");
                let w = &self.theta[slot.weight_offset..slot.weight_offset + slot.weight_len];
                let b = &self.theta[slot.bias_offset..slot.bias_offset + slot.bias_len];
                Value::T3(conv_forward(input.as_t3(), w, b, out_channels, kernel, padding))
            }
            LayerSpec::Relu => match input {
                Value::T3(a) => Value::T3(a.mapv(|v| v.max(0.0))),
                Value::T1(a) => Value::T1(a.mapv(|v| v.max(0.0))),
            },
            LayerSpec::MaxPool { size } => Value::T3(pool_forward(input.as_t3(), size).0),
            LayerSpec::Flatten => {
                let a = input.as_t3();
                Value::T1(Array1::from_iter(a.iter().copied()))
            }
            LayerSpec::Dense { out_dim } => {
                let slot = self.slots[i].expect("dense has parameters");
                let w = &self.theta[slot.weight_offset..slot.weight_offset + slot.weight_len];
                let b = &self.theta[slot.bias_offset..slot.bias_offset + slot.bias_len];
                let x = input.as_t1();
                let in_dim = x.len();
                let mut out = Array1::zeros(out_dim);
                for o in 0..out_dim {
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    let mut acc = b[o];
                    for (wi, xi) in row.iter().zip(x.iter()) {
                        acc += wi * xi;
                    }
                    out[o] = acc;
                }
                Value::T1(out)
            }
        }
    }

    /// Backward pass from `d(loss)/d(logits)`; returns the gradient with
    /// respect to every parameter and to the network input. No regularization
    /// term is included here.
    pub fn backward(&self, trace: &Trace, dlogits: &Array1<f64>) -> (Vec<f64>, Array3<f64>) {
        let mut dtheta = vec![0.0; self.theta.len()];
        let mut grad = Value::T1(dlogits.clone());
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let input = &trace.values[i];
            grad = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let slot = self.slots[i].expect("conv has parameters");
                    let w = &self.theta[slot.weight_offset..slot.weight_offset + slot.weight_len];
                    let (dx, dw, db) = conv_backward(
                        input.as_t3(),
                        w,
                        grad.as_t3(),
                        out_channels,
                        kernel,
                        padding,
                    );
                    dtheta[slot.weight_offset..slot.weight_offset + slot.weight_len]
                        .iter_mut()
                        .zip(dw.iter())
                        .for_each(|(a, b)| *a += b);
                    dtheta[slot.bias_offset..slot.bias_offset + slot.bias_len]
                        .iter_mut()
                        .zip(db.iter())
                        .for_each(|(a, b)| *a += b);
                    Value::T3(dx)
                }
                LayerSpec::Relu => match (input, &grad) {
                    (Value::T3(x), Value::T3(g)) => {
                        let mut dx = g.clone();
                        dx.zip_mut_with(x, |d, &v| {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        });
                        Value::T3(dx)
                    }
                    (Value::T1(x), Value::T1(g)) => {
                        let mut dx = g.clone();
                        dx.zip_mut_with(x, |d, &v| {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        });
                        Value::T1(dx)
                    }
                    _ => unreachable!("relu input and gradient have matching ranks"),
                },
                LayerSpec::MaxPool { size } => {
                    let x = input.as_t3();
                    let (_, argmax) = pool_forward(x, size);
                    let g = grad.as_t3();
                    let mut dx = Array3::zeros(x.dim());
                    let (c, oh, ow) = g.dim();
                    for ch in 0..c {
                        for r in 0..oh {
                            for col in 0..ow {
                                let (mr, mc) = argmax[[ch, r, col]];
                                dx[[ch, mr, mc]] += g[[ch, r, col]];
                            }
                        }
                    }
                    Value::T3(dx)
                }
                LayerSpec::Flatten => {
                    let x = input.as_t3();
                    let g = grad.as_t1();
                    let dx = Array3::from_shape_vec(x.dim(), g.to_vec())
                        .expect("flatten gradient length matches input");
                    Value::T3(dx)
                }
                LayerSpec::Dense { out_dim } => {
                    let slot = self.slots[i].expect("dense has parameters");
                    let w = &self.theta[slot.weight_offset..slot.weight_offset + slot.weight_len];
                    let x = input.as_t1();
                    let g = grad.as_t1();
                    let in_dim = x.len();
                    let mut dx = Array1::zeros(in_dim);
                    for o in 0..out_dim {
                        let go = g[o];
                        dtheta[slot.bias_offset + o] += go;
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        let drow = &mut dtheta
                            [slot.weight_offset + o * in_dim..slot.weight_offset + (o + 1) * in_dim];
                        for idx in 0..in_dim {
                            drow[idx] += go * x[idx];
                            dx[idx] += go * row[idx];
                        }
                    }
                    Value::T1(dx)
                }
            };
        }
        let dinput = match grad {
            Value::T3(a) => a,
            Value::T1(_) => unreachable!("network input is 3D"),
        };
        (dtheta, dinput)
    }

    /// Gradient of `sum_j upstream[j] * logits[j]` with respect to the input.
    pub fn input_gradient(&self, x: &Array3<f64>, upstream: &Array1<f64>) -> Result<Array3<f64>> {
        let (_, trace) = self.forward_trace(x)?;
        Ok(self.backward(&trace, upstream).1)
    }

    /// Smallest distance to a ReLU or max-pool decision boundary along the
    /// trace of `x`: the minimum of `|pre-activation|` over ReLU inputs and of
    /// the top-two gap over pooling windows. Finite-difference verification
    /// uses this to stay away from kinks.
    pub fn kink_margin(&self, x: &Array3<f64>) -> Result<f64> {
        let (_, trace) = self.forward_trace(x)?;
        let mut margin = f64::INFINITY;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Relu => {
                    let m = match &trace.values[i] {
                        Value::T3(a) => a.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
                        Value::T1(a) => a.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
                    };
                    margin = margin.min(m);
                }
                LayerSpec::MaxPool { size } => {
                    let a = trace.values[i].as_t3();
                    let (c, h, w) = a.dim();
                    for ch in 0..c {
                        for r in (0..h).step_by(size) {
                            for col in (0..w).step_by(size) {
                                let mut best = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for dr in 0..size {
                                    for dc in 0..size {
                                        let v = a[[ch, r + dr, col + dc]];
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                if second.is_finite() {
                                    margin = margin.min(best - second);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(margin)
    }
}

fn conv_forward(
    x: &Array3<f64>,
    w: &[f64],
    b: &[f64],
    cout: usize,
    k: usize,
    p: usize,
) -> Array3<f64> {
    let (cin, h, wd) = x.dim();
    let oh = h + 2 * p - (k - 1);
    let ow = wd + 2 * p - (k - 1);
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; cout * oh * ow];
    for oc in 0..cout {
        let wbase = oc * cin * k * k;
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = b[oc];
                for ic in 0..cin {
                    let xplane = ic * h * wd;
                    let wplane = wbase + ic * k * k;
                    for kh in 0..k {
                        let ih = r + kh;
                        if ih < p || ih >= h + p {
                            continue;
                        }
                        let ih = ih - p;
                        let xrow = xplane + ih * wd;
                        let wrow = wplane + kh * k;
                        for kw in 0..k {
                            let iw = c + kw;
                            if iw < p || iw >= wd + p {
                                continue;
                            }
                            acc += w[wrow + kw] * xs[xrow + (iw - p)];
                        }
                    }
                }
                out[(oc * oh + r) * ow + c] = acc;
            }
        }
    }
    Array3::from_shape_vec((cout, oh, ow), out).expect("computed shape is consistent")
}

fn conv_backward(
    x: &Array3<f64>,
    w: &[f64],
    dy: &Array3<f64>,
    cout: usize,
    k: usize,
    p: usize,
) -> (Array3<f64>, Vec<f64>, Vec<f64>) {
    let (cin, h, wd) = x.dim();
    let (_, oh, ow) = dy.dim();
    let xs = x.as_slice().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let mut dx = vec![0.0; cin * h * wd];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for oc in 0..cout {
        let wbase = oc * cin * k * k;
        for r in 0..oh {
            for c in 0..ow {
                let g = dys[(oc * oh + r) * ow + c];
                if g == 0.0 {
                    continue;
                }
                db[oc] += g;
                for ic in 0..cin {
                    let xplane = ic * h * wd;
                    let wplane = wbase + ic * k * k;
                    for kh in 0..k {
                        let ih = r + kh;
                        if ih < p || ih >= h + p {
                            continue;
                        }
                        let ih = ih - p;
                        let xrow = xplane + ih * wd;
                        let wrow = wplane + kh * k;
                        for kw in 0..k {
                            let iw = c + kw;
                            if iw < p || iw >= wd + p {
                                continue;
                            }
                            let xi = xrow + (iw - p);
                            dw[wrow + kw] += g * xs[xi];
                            dx[xi] += g * w[wrow + kw];
                        }
                    }
                }
            }
        }
    }
    (
        Array3::from_shape_vec((cin, h, wd), dx).expect("shape matches input"),
        dw,
        db,
    )
}

/// Max pooling with argmax positions; ties go to the first maximum in
/// row-major window order.
fn pool_forward(x: &Array3<f64>, size: usize) -> (Array3<f64>, Array3<(usize, usize)>) {
    let (c, h, w) = x.dim();
    let oh = h / size;
    let ow = w / size;
    let mut out = Array3::zeros((c, oh, ow));
    let mut argmax = Array3::from_elem((c, oh, ow), (0usize, 0usize));
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut pos = (0, 0);
                for dr in 0..size {
                    for dc in 0..size {
                        let rr = r * size + dr;
                        let cc = col * size + dc;
                        let v = x[[ch, rr, cc]];
                        if v > best {
                            best = v;
                            pos = (rr, cc);
                        }
                    }
                }
                out[[ch, r, col]] = best;
                argmax[[ch, r, col]] = pos;
            }
        }
    }
    (out, argmax)
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Cross-entropy loss and its gradient with respect to logits. The loss is
/// evaluated in log space (`logsumexp(z) - z_target`) so extreme logits give
/// a large finite value instead of overflowing through `exp`.
pub fn cross_entropy(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>();
    let loss = sum.ln() + max - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}

/// Binary cross-entropy on a single logit in overflow-free form; returns the
/// loss and `d(loss)/d(logit) = sigmoid(logit) - target`.
pub fn binary_cross_entropy(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let grad = sigmoid(logit) - target;
    (loss, grad)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stock architecture for the desk-scale classifier.
pub fn desk_classifier_spec(channels: usize, side: usize, num_classes: usize) -> NetworkSpec {
    NetworkSpec {
        input: (channels, side, side),
        layers: vec![
            LayerSpec::Conv {
                out_channels: 8,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv {
                out_channels: 16,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                out_dim: num_classes,
            },
        ],
    }
}

/// Stock architecture for the residual detector (single-logit output).
///
/// The head is a global max pool rather than a flatten: a patch can sit
/// anywhere in the image, so the detector keys on the strongest local filter
/// response wherever it occurs instead of memorizing positions, and its score
/// grows monotonically with residual magnitude — which is what lets a
/// detector fit on weak attacks generalize to much stronger ones.
pub fn desk_detector_spec(channels: usize, side: usize) -> NetworkSpec {
    let pooled = (side / 2) / 2;
    NetworkSpec {
        input: (channels, side, side),
        layers: vec![
            LayerSpec::Conv {
                out_channels: 16,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv {
                out_channels: 32,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::MaxPool { size: pooled },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_dim: 16 },
            LayerSpec::Relu,
            LayerSpec::Dense { out_dim: 1 },
        ],
    }
}

/// Stock architecture for the substitute model: deeper than the victim so
/// transfer does not depend on architectural coincidence.
pub fn desk_substitute_spec(channels: usize, side: usize, num_classes: usize) -> NetworkSpec {
    NetworkSpec {
        input: (channels, side, side),
        layers: vec![
            LayerSpec::Conv {
                out_channels: 8,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv {
                out_channels: 16,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                out_channels: 16,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv {
                out_channels: 32,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                out_dim: num_classes,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input: (1, 4, 4),
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 3 },
            ],
        }
    }

    #[test]
    fn shape_inference_known_stack() {
        let shapes = tiny_spec().infer_shapes().unwrap();
        assert_eq!(
            shapes,
            vec![
                ValueShape::T3(2, 4, 4),
                ValueShape::T3(2, 4, 4),
                ValueShape::T3(2, 2, 2),
                ValueShape::T1(8),
                ValueShape::T1(3),
            ]
        );
    }

    #[test]
    fn shape_inference_rejects_bad_stacks() {
        // Pool size must divide the extent.
        let bad_pool = NetworkSpec {
            input: (1, 9, 9),
            layers: vec![LayerSpec::MaxPool { size: 2 }, LayerSpec::Flatten, LayerSpec::Dense { out_dim: 1 }],
        };
        assert!(bad_pool.infer_shapes().is_err());
        // Dense cannot consume a 3D value.
        let bad_dense = NetworkSpec {
            input: (1, 8, 8),
            layers: vec![LayerSpec::Dense { out_dim: 4 }],
        };
        assert!(bad_dense.infer_shapes().is_err());
        // Must end 1D.
        let no_flatten = NetworkSpec {
            input: (1, 8, 8),
            layers: vec![LayerSpec::Relu],
        };
        assert!(no_flatten.infer_shapes().is_err());
        // Kernel larger than padded input.
        let big_kernel = NetworkSpec {
            input: (1, 8, 8),
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 1,
                    kernel: 11,
                    padding: 0,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 1 },
            ],
        };
        assert!(big_kernel.infer_shapes().is_err());
    }

    #[test]
    fn param_count_matches_hand_total() {
        let net = Network::zeros(tiny_spec()).unwrap();
        // conv: 2*1*3*3 + 2 = 20, dense: 3*8 + 3 = 27.
        assert_eq!(net.num_params(), 47);
    }

    #[test]
    fn conv_forward_hand_case() {
        // 1-channel 3x3 input, single 2x2 kernel, no padding, bias 0.5.
        // Window at (0,0): 1*1 + 2*2 + 4*3 + 5*4 = 37; plus bias = 37.5.
        let x = array![[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]];
        let w = [1.0, 2.0, 3.0, 4.0];
        let b = [0.5];
        let y = conv_forward(&x, &w, &b, 1, 2, 0);
        assert_eq!(y.dim(), (1, 2, 2));
        assert!((y[[0, 0, 0]] - 37.5).abs() < 1e-12);
        // Window at (1,1): 5 + 2*6 + 3*8 + 4*9 = 77; plus bias.
        assert!((y[[0, 1, 1]] - 77.5).abs() < 1e-12);
    }

    #[test]
    fn conv_padding_zero_extends() {
        // Identity-ish: 1x1 kernel with weight 1 and padding 1 grows the map
        // with a zero border.
        let x = array![[[2.0]]];
        let y = conv_forward(&x, &[1.0], &[0.0], 1, 1, 1);
        assert_eq!(y.dim(), (1, 3, 3));
        assert_eq!(y[[0, 1, 1]], 2.0);
        assert_eq!(y[[0, 0, 0]], 0.0);
    }

    #[test]
    fn pool_forward_and_tie_breaking() {
        let x = array![[
            [1.0, 5.0, 2.0, 2.0],
            [3.0, 4.0, 2.0, 2.0],
            [7.0, 7.0, 0.0, 1.0],
            [7.0, 7.0, 1.0, 0.0],
        ]];
        let (y, argmax) = pool_forward(&x, 2);
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(argmax[[0, 0, 0]], (0, 1));
        // All-equal window: first in row-major order wins.
        assert_eq!(y[[0, 1, 0]], 7.0);
        assert_eq!(argmax[[0, 1, 0]], (2, 0));
    }

    #[test]
    fn softmax_and_cross_entropy_hand_case() {
        let logits = array![0.0, 0.0];
        let p = softmax(&logits);
        assert!((p[0] - 0.5).abs() < 1e-15);
        let (loss, grad) = cross_entropy(&logits, 0);
        assert!((loss - 2.0_f64.ln()).abs() < 1e-15);
        assert!((grad[0] + 0.5).abs() < 1e-15);
        assert!((grad[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let logits = array![1000.0, 0.0];
        let p = softmax(&logits);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn binary_cross_entropy_hand_case() {
        let (loss, grad) = binary_cross_entropy(0.0, 1.0);
        assert!((loss - 2.0_f64.ln()).abs() < 1e-15);
        assert!((grad + 0.5).abs() < 1e-15);
        // Far-off logits stay finite.
        let (loss, _) = binary_cross_entropy(-800.0, 0.0);
        assert!(loss.is_finite());
        let (loss, _) = binary_cross_entropy(800.0, 1.0);
        assert!(loss.is_finite());
    }

    #[test]
    fn l2_penalty_covers_weights_only() {
        let mut net = Network::zeros(tiny_spec()).unwrap();
        net.theta.iter_mut().for_each(|v| *v = 1.0);
        // 18 conv weights + 24 dense weights = 42 (biases excluded).
        assert!((net.l2_penalty(1.0) - 42.0).abs() < 1e-12);
        let mut grad = vec![0.0; net.num_params()];
        net.add_l2_gradient(0.5, &mut grad);
        let nonzero = grad.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 42);
        assert!(grad.iter().all(|&v| v == 0.0 || (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let mut rng = crate::rng::RngState::new(1);
        let net = Network::new(tiny_spec(), &mut rng).unwrap();
        let x = Array3::zeros((1, 8, 8));
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        let a = Network::new(tiny_spec(), &mut crate::rng::RngState::new(5)).unwrap();
        let b = Network::new(tiny_spec(), &mut crate::rng::RngState::new(5)).unwrap();
        assert_eq!(a.theta, b.theta);
        let c = Network::new(tiny_spec(), &mut crate::rng::RngState::new(6)).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn desk_specs_validate() {
        assert!(desk_classifier_spec(3, 32, 4).infer_shapes().is_ok());
        assert!(desk_detector_spec(3, 32).infer_shapes().is_ok());
        assert!(desk_substitute_spec(3, 32, 4).infer_shapes().is_ok());
    }
}
