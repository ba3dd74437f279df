//! Parameter storage, activations and hand-derived backward passes.
//!
//! The computation graph of the model is fixed (dense layers, ReLU6,
//! softmax gating, the mixture loss heads), so instead of a general tape
//! every differentiable object implements [`Differentiable`] with an explicit
//! forward that records what it needs and a backward that accumulates
//! gradients into a flat buffer laid out like [`ParamStore`].

use std::fmt;

use rand::Rng;

use crate::error::{DsmError, Result};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu6,
    Selu,
    Tanh,
    Softmax,
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ActivationKind::Relu6 => "relu6",
            ActivationKind::Selu => "selu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Softmax => "softmax",
        };
        f.write_str(s)
    }
}

#[inline]
pub fn relu6(x: f64) -> f64 {
    x.clamp(0.0, 6.0)
}

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

#[inline]
pub fn selu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// Numerically stable softmax written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// `log softmax`, computed as `l - max - ln Σ exp(l - max)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

impl ActivationKind {
    /// Elementwise activation, or the softmax of the whole vector.
    pub fn apply(self, xs: &[f64]) -> Vec<f64> {
        match self {
            ActivationKind::Relu6 => xs.iter().map(|&x| relu6(x)).collect(),
            ActivationKind::Selu => xs.iter().map(|&x| selu(x)).collect(),
            ActivationKind::Tanh => xs.iter().map(|&x| x.tanh()).collect(),
            ActivationKind::Softmax => softmax(xs),
        }
    }

    /// Scalar form. A one-element softmax is identically 1.
    #[inline]
    pub fn scalar(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu6 => relu6(x),
            ActivationKind::Selu => selu(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Softmax => 1.0,
        }
    }

    /// Derivative of the scalar form at `x`.
    #[inline]
    pub fn scalar_derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Selu => selu_derivative(x),
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Softmax => 0.0,
        }
    }
}

/// Handle to one named array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

impl Entry {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Named real arrays packed into one flat buffer, with a gradient buffer of
/// identical layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-initialised `rows × cols` array (row-major).
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        let name = name.into();
        if self.id(&name).is_some() {
            return Err(DsmError::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let offset = self.values.len();
        let entry = Entry {
            name,
            rows,
            cols,
            offset,
        };
        self.values.resize(offset + entry.len(), 0.0);
        self.grads.resize(offset + entry.len(), 0.0);
        self.entries.push(entry);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn offset(&self, id: ParamId) -> usize {
        self.entries[id.0].offset
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        &mut self.values[e.offset..e.offset + e.len()]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.grads[e.offset..e.offset + e.len()]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    /// Values and gradient accumulator borrowed together.
    pub fn split_mut(&mut self) -> (&[f64], &mut [f64]) {
        (&self.values, &mut self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Name of the parameter array holding flat index `index`.
    pub fn name_of_index(&self, index: usize) -> &str {
        self.entries
            .iter()
            .find(|e| index >= e.offset && index < e.offset + e.len())
            .map(|e| e.name.as_str())
            .unwrap_or("<out of range>")
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(DsmError::NonFinite(format!("parameter `{}`", self.name_of_index(i)))),
            None => Ok(()),
        }
    }

    /// Glorot-uniform fill: `U(±sqrt(6 / (fan_in + fan_out)))`.
    pub fn init_glorot<R: Rng>(&mut self, id: ParamId, fan_in: usize, fan_out: usize, rng: &mut R) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in self.value_mut(id) {
            *v = rng.gen_range(-limit..=limit);
        }
    }
}

/// A loss over the parameters of a store.
///
/// `forward` returns the loss and whatever the backward pass needs;
/// `backward` adds `∂loss/∂p` into `grads` (same layout as the store).
pub trait Differentiable {
    type Tape;

    fn forward(&self, values: &[f64]) -> Result<(f64, Self::Tape)>;

    fn backward(&self, values: &[f64], tape: &Self::Tape, grads: &mut [f64]) -> Result<()>;
}

/// Enforces forward-before-backward for one loss.
pub struct GradSession<'l, L: Differentiable> {
    loss: &'l L,
    recorded: Option<(f64, L::Tape)>,
}

impl<'l, L: Differentiable> GradSession<'l, L> {
    pub fn new(loss: &'l L) -> Self {
        Self {
            loss,
            recorded: None,
        }
    }

    pub fn forward(&mut self, store: &ParamStore) -> Result<f64> {
        let (value, tape) = self.loss.forward(store.values())?;
        self.recorded = Some((value, tape));
        Ok(value)
    }

    pub fn value(&self) -> Option<f64> {
        self.recorded.as_ref().map(|(v, _)| *v)
    }

    /// Accumulates gradients of the recorded forward pass into the store.
    pub fn backward(&self, store: &mut ParamStore) -> Result<()> {
        let (_, tape) = self
            .recorded
            .as_ref()
            .ok_or_else(|| DsmError::Usage("backward called before forward".into()))?;
        let (values, grads) = store.split_mut();
        self.loss.backward(values, tape, grads)
    }
}

/// Hidden-layer architecture: input dimension and hidden widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl LayerSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Self {
        Self { input_dim, hidden }
    }

    pub fn output_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Fully connected ReLU6 network. Every hidden layer, including the last,
/// is activated; the last layer's output is the representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    weight_ids: Vec<(ParamId, ParamId)>,
    input_dim: usize,
}

impl Mlp {
    /// Registers `{prefix}.{l}.weight` (out × in) and `{prefix}.{l}.bias`.
    pub fn register(store: &mut ParamStore, prefix: &str, spec: &LayerSpec) -> Result<Self> {
        if spec.hidden.is_empty() {
            return Err(DsmError::InvalidArgument(
                "the representation network needs at least one hidden layer".into(),
            ));
        }
        if spec.input_dim == 0 || spec.hidden.contains(&0) {
            return Err(DsmError::InvalidArgument("layer widths must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut weight_ids = Vec::new();
        let mut fan_in = spec.input_dim;
        for (l, &fan_out) in spec.hidden.iter().enumerate() {
            let w = store.add(format!("{prefix}.{l}.weight"), fan_out, fan_in)?;
            let b = store.add(format!("{prefix}.{l}.bias"), fan_out, 1)?;
            layers.push(Dense {
                weight: store.offset(w),
                bias: store.offset(b),
                fan_in,
                fan_out,
            });
            weight_ids.push((w, b));
            fan_in = fan_out;
        }
        Ok(Self {
            layers,
            weight_ids,
            input_dim: spec.input_dim,
        })
    }

    /// Rebinds to an existing store (used after deserialisation).
    pub fn bind(store: &ParamStore, prefix: &str, spec: &LayerSpec) -> Result<Self> {
        let mut layers = Vec::new();
        let mut weight_ids = Vec::new();
        let mut fan_in = spec.input_dim;
        for (l, &fan_out) in spec.hidden.iter().enumerate() {
            let lookup = |suffix: &str| {
                store
                    .id(&format!("{prefix}.{l}.{suffix}"))
                    .ok_or_else(|| DsmError::InvalidArgument(format!("missing parameter {prefix}.{l}.{suffix}")))
            };
            let w = lookup("weight")?;
            let b = lookup("bias")?;
            if store.shape(w) != (fan_out, fan_in) || store.shape(b) != (fan_out, 1) {
                return Err(DsmError::DimensionMismatch {
                    context: format!("layer {l}"),
                    expected: fan_out * fan_in,
                    actual: store.value(w).len(),
                });
            }
            layers.push(Dense {
                weight: store.offset(w),
                bias: store.offset(b),
                fan_in,
                fan_out,
            });
            weight_ids.push((w, b));
            fan_in = fan_out;
        }
        Ok(Self {
            layers,
            weight_ids,
            input_dim: spec.input_dim,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for (layer, &(w, b)) in self.layers.iter().zip(&self.weight_ids) {
            store.init_glorot(w, layer.fan_in, layer.fan_out, rng);
            store.value_mut(b).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.fan_out)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.fan_out).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(DsmError::DimensionMismatch {
                context: "layer 0 input".into(),
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Representation of one input vector.
    pub fn forward(&self, values: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut outputs: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.fan_out]).collect();
        self.forward_into(values, x, &mut outputs)?;
        Ok(outputs.pop().unwrap_or_default())
    }

    /// Forward pass keeping every layer's activated output.
    pub fn forward_into(&self, values: &[f64], x: &[f64], outputs: &mut [Vec<f64>]) -> Result<()> {
        self.check_input(x)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = outputs.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &before[l - 1] };
            let out = &mut after[0];
            if out.len() != layer.fan_out {
                return Err(DsmError::DimensionMismatch {
                    context: format!("layer {l} output buffer"),
                    expected: layer.fan_out,
                    actual: out.len(),
                });
            }
            let w = &values[layer.weight..layer.weight + layer.fan_in * layer.fan_out];
            let b = &values[layer.bias..layer.bias + layer.fan_out];
            for (o, out_o) in out.iter_mut().enumerate() {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let pre = b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                *out_o = relu6(pre);
            }
        }
        Ok(())
    }

    /// Backpropagates `d_repr` (∂loss/∂representation) through the layers,
    /// accumulating weight and bias gradients. `outputs` are the activations
    /// recorded by [`Mlp::forward_into`] for the same `x`; `d_repr` is used as
    /// scratch and left in an unspecified state.
    pub fn backward(&self, values: &[f64], x: &[f64], outputs: &[Vec<f64>], d_repr: &mut Vec<f64>, grads: &mut [f64]) {
        let mut d_out = std::mem::take(d_repr);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &outputs[l];
            // ReLU6 passes gradient only strictly inside (0, 6); the output
            // value identifies that region.
            for (d, &y) in d_out.iter_mut().zip(out) {
                if !(y > 0.0 && y < 6.0) {
                    *d = 0.0;
                }
            }
            let input: &[f64] = if l == 0 { x } else { &outputs[l - 1] };
            let w = &values[layer.weight..layer.weight + layer.fan_in * layer.fan_out];
            {
                let gw = &mut grads[layer.weight..layer.weight + layer.fan_in * layer.fan_out];
                for (o, &d) in d_out.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let grow = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (g, &xi) in grow.iter_mut().zip(input) {
                        *g += d * xi;
                    }
                }
            }
            let gb = &mut grads[layer.bias..layer.bias + layer.fan_out];
            for (g, &d) in gb.iter_mut().zip(&d_out) {
                *g += d;
            }
            if l > 0 {
                let mut d_in = vec![0.0; layer.fan_in];
                for (o, &d) in d_out.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (di, &wi) in d_in.iter_mut().zip(row) {
                        *di += d * wi;
                    }
                }
                d_out = d_in;
            }
        }
        *d_repr = d_out;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    /// Loss equal to the parameter at an offset.
    struct ParamValue(usize);

    impl Differentiable for ParamValue {
        type Tape = ();
        fn forward(&self, values: &[f64]) -> Result<(f64, ())> {
            Ok((values[self.0], ()))
        }
        fn backward(&self, _: &[f64], _: &(), grads: &mut [f64]) -> Result<()> {
            grads[self.0] += 1.0;
            Ok(())
        }
    }

    struct SumSquares {
        offset: usize,
        len: usize,
    }

    impl Differentiable for SumSquares {
        type Tape = ();
        fn forward(&self, values: &[f64]) -> Result<(f64, ())> {
            Ok((values[self.offset..self.offset + self.len].iter().map(|p| p * p).sum(), ()))
        }
        fn backward(&self, values: &[f64], _: &(), grads: &mut [f64]) -> Result<()> {
            for i in self.offset..self.offset + self.len {
                grads[i] += 2.0 * values[i];
            }
            Ok(())
        }
    }

    #[test]
    fn gradient_of_a_single_parameter_is_one() {
        let mut store = ParamStore::new();
        let p = store.add("p", 1, 1).unwrap();
        store.value_mut(p)[0] = 3.7;
        let loss = ParamValue(store.offset(p));
        let mut session = GradSession::new(&loss);
        assert_eq!(session.forward(&store).unwrap(), 3.7);
        session.backward(&mut store).unwrap();
        assert_eq!(store.grad(p), &[1.0]);
    }

    #[test]
    fn quadratic_gradient_and_accumulation() {
        let mut store = ParamStore::new();
        let p = store.add("p", 2, 1).unwrap();
        store.value_mut(p).copy_from_slice(&[1.0, 2.0]);
        let loss = SumSquares {
            offset: store.offset(p),
            len: 2,
        };
        let mut session = GradSession::new(&loss);
        assert_eq!(session.forward(&store).unwrap(), 5.0);
        session.backward(&mut store).unwrap();
        assert_eq!(store.grad(p), &[2.0, 4.0]);
        session.backward(&mut store).unwrap();
        assert_eq!(store.grad(p), &[4.0, 8.0]);
        store.zero_grad();
        assert_eq!(store.grad(p), &[0.0, 0.0]);
    }

    #[test]
    fn backward_before_forward_is_a_usage_error() {
        let mut store = ParamStore::new();
        let p = store.add("p", 1, 1).unwrap();
        let loss = ParamValue(store.offset(p));
        let session = GradSession::new(&loss);
        assert!(matches!(session.backward(&mut store), Err(DsmError::Usage(_))));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("a", 1, 1).unwrap();
        assert!(store.add("a", 2, 2).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(selu(0.0), 0.0);
        assert!((selu(1.0) - 1.050701).abs() < 1e-6);
        assert_eq!(ActivationKind::Softmax.apply(&[0.3; 4]), vec![0.25; 4]);
        assert_eq!(ActivationKind::Relu6.apply(&[7.0, -1.0, 2.5]), vec![6.0, 0.0, 2.5]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let logits = [0.1, -3.0, 2.5, 0.0];
        let direct = log_softmax(&logits);
        for (a, b) in direct.iter().zip(softmax(&logits)) {
            assert!((a - b.ln()).abs() < 1e-14);
        }
        // large logits stay finite in log space
        let big = log_softmax(&[1000.0, 0.0]);
        assert!((big[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "mlp", &LayerSpec::new(3, vec![4, 2])).unwrap();
        let out = mlp.forward(store.values(), &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_clamps_with_relu6() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "mlp", &LayerSpec::new(2, vec![2])).unwrap();
        let w = store.id("mlp.0.weight").unwrap();
        store.value_mut(w).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mlp.forward(store.values(), &[7.0, -1.0]).unwrap(), vec![6.0, 0.0]);
    }

    #[test]
    fn two_layer_net_matches_straight_line_arithmetic() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "mlp", &LayerSpec::new(2, vec![2, 2])).unwrap();
        let set = |s: &mut ParamStore, n: &str, v: &[f64]| {
            let id = s.id(n).unwrap();
            s.value_mut(id).copy_from_slice(v);
        };
        set(&mut store, "mlp.0.weight", &[0.5, -1.0, 2.0, 0.25]);
        set(&mut store, "mlp.0.bias", &[0.1, -0.2]);
        set(&mut store, "mlp.1.weight", &[1.5, -0.5, 0.3, 0.7]);
        set(&mut store, "mlp.1.bias", &[0.0, 0.05]);
        // x = (0.4, -0.3)
        // h0 = relu6(0.5*0.4 - 1*(-0.3) + 0.1) = relu6(0.6) = 0.6
        // h1 = relu6(2*0.4 + 0.25*(-0.3) - 0.2) = relu6(0.525) = 0.525
        // o0 = relu6(1.5*0.6 - 0.5*0.525) = relu6(0.6375) = 0.6375
        // o1 = relu6(0.3*0.6 + 0.7*0.525 + 0.05) = relu6(0.5975) = 0.5975
        let out = mlp.forward(store.values(), &[0.4, -0.3]).unwrap();
        assert!((out[0] - 0.6375).abs() < 1e-12);
        assert!((out[1] - 0.5975).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_names_the_layer() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "mlp", &LayerSpec::new(3, vec![2])).unwrap();
        let err = mlp.forward(store.values(), &[1.0]).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    /// ∑ c_j · repr_j, differentiated through the network.
    struct LinearReadout {
        mlp: Mlp,
        x: Vec<f64>,
        c: Vec<f64>,
    }

    impl Differentiable for LinearReadout {
        type Tape = Vec<Vec<f64>>;
        fn forward(&self, values: &[f64]) -> Result<(f64, Self::Tape)> {
            let mut outs: Vec<Vec<f64>> = self.mlp.widths().into_iter().map(|w| vec![0.0; w]).collect();
            self.mlp.forward_into(values, &self.x, &mut outs)?;
            let v = outs.last().unwrap().iter().zip(&self.c).map(|(a, b)| a * b).sum();
            Ok((v, outs))
        }
        fn backward(&self, values: &[f64], tape: &Self::Tape, grads: &mut [f64]) -> Result<()> {
            let mut d = self.c.clone();
            self.mlp.backward(values, &self.x, tape, &mut d, grads);
            Ok(())
        }
    }

    #[test]
    fn mlp_backward_matches_central_differences() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "mlp", &LayerSpec::new(3, vec![5, 4])).unwrap();
        let mut r = rng::stream(11, "test");
        mlp.init(&mut store, &mut r);
        // push biases off zero so that few units sit on a kink
        for v in store.values_mut() {
            *v += 0.05;
        }
        let loss = LinearReadout {
            mlp,
            x: vec![0.7, -1.2, 2.0],
            c: vec![1.0, -0.5, 2.0, 0.3],
        };
        let mut s = GradSession::new(&loss);
        s.forward(&store).unwrap();
        s.backward(&mut store).unwrap();
        let analytic = store.grads().to_vec();
        let h = 1e-6;
        for i in 0..store.len() {
            let orig = store.values()[i];
            store.values_mut()[i] = orig + h;
            let up = loss.forward(store.values()).unwrap().0;
            store.values_mut()[i] = orig - h;
            let down = loss.forward(store.values()).unwrap().0;
            store.values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!(
                (numeric - analytic[i]).abs() <= 1e-6 * (1.0 + analytic[i].abs()),
                "coordinate {i}: {numeric} vs {}",
                analytic[i]
            );
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..10),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
            prop_assert_eq!(argmax(&p), argmax(&logits));
        }

        #[test]
        fn bounded_activations(x in -1e3f64..1e3) {
            let r = relu6(x);
            prop_assert!((0.0..=6.0).contains(&r));
            // tanh saturates to ±1 in floating point beyond |x| ≈ 19
            let t = x.tanh();
            prop_assert!(t.abs() <= 1.0);
            if x.abs() < 15.0 {
                prop_assert!(t.abs() < 1.0);
            }
        }
    }
}
