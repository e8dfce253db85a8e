//! Small predictors: multilayer perceptrons for tabular inputs and a fixed
//! two-convolution network for tiny images.
//!
//! The CNN is `conv3x3 -> act -> conv3x3 -> act -> global average pool ->
//! linear`. The activation after the second convolution is the designated
//! last convolutional feature map used by Grad-CAM.
//!
//! # Parameter file layout
//!
//! ```text
//! DRE-PARAMS\n
//! version 1\n
//! kind mlp|cnn\n
//! activation relu|softplus\n
//! input_shape <d0> [<d1> ...]\n
//! hidden <w0> [<w1> ...]\n
//! output_dim <k>\n
//! param <name> <d0> [<d1> ...]\n      (one line per tensor, in payload order)
//! end\n
//! <each tensor's values as little-endian f64, row-major>
//! ```

use std::path::Path;

use dre_autograd::{Bindings, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DreError, Result};
use crate::format;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden widths (mlp) or the two conv channel counts (cnn).
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Per-sample input shape: `[d]` for tabular, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    /// Number of classes, or 1 for regression.
    pub output_dim: usize,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden: hidden.to_vec(),
            activation,
            input_shape: vec![input_dim],
            output_dim,
        }
    }

    pub fn cnn(input_shape: [usize; 3], channels: [usize; 2], output_dim: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Cnn,
            hidden: channels.to_vec(),
            activation,
            input_shape: input_shape.to_vec(),
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(DreError::input("model needs at least one hidden layer with positive width"));
        }
        if self.output_dim == 0 {
            return Err(DreError::input("output_dim must be >= 1"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(DreError::input("input_shape must be non-empty with positive extents"));
        }
        if self.kind == ModelKind::Cnn {
            if self.input_shape.len() != 3 {
                return Err(DreError::input("cnn input_shape must be [channels, height, width]"));
            }
            if self.hidden.len() != 2 {
                return Err(DreError::input("cnn takes exactly two conv channel counts"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Names and shapes of every parameter tensor, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.kind {
            ModelKind::Mlp => {
                let mut widths = vec![self.input_dim()];
                widths.extend(&self.hidden);
                widths.push(self.output_dim);
                for (i, w) in widths.windows(2).enumerate() {
                    out.push((format!("fc{i}.weight"), vec![w[0], w[1]]));
                    out.push((format!("fc{i}.bias"), vec![w[1]]));
                }
            }
            ModelKind::Cnn => {
                let cin = self.input_shape[0];
                let (c1, c2) = (self.hidden[0], self.hidden[1]);
                out.push(("conv0.weight".into(), vec![c1, cin, 3, 3]));
                out.push(("conv0.bias".into(), vec![c1]));
                out.push(("conv1.weight".into(), vec![c2, c1, 3, 3]));
                out.push(("conv1.bias".into(), vec![c2]));
                out.push(("head.weight".into(), vec![c2, self.output_dim]));
                out.push(("head.bias".into(), vec![self.output_dim]));
            }
        }
        out
    }
}

/// Fan-in of a weight tensor: all axes but the output one.
fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[0],
        4 => shape[1] * shape[2] * shape[3],
        _ => 1,
    }
}

pub fn init_bound(shape: &[usize]) -> f64 {
    (6.0 / fan_in(shape) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParameterSet,
}

/// Parameter leaves of a model registered in a graph, in layout order.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// [n, output_dim]
    pub logits: NodeId,
    /// [n, c2, h, w] activation of the last conv layer (cnn only).
    pub last_conv: Option<NodeId>,
}

pub(crate) fn param_input_name(name: &str) -> String {
    format!("param/{name}")
}

impl Model {
    /// Builds a model with `U(-sqrt(6/fan_in), sqrt(6/fan_in))` weights and zero biases.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = spec
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let b = init_bound(&shape);
                    (0..n).map(|_| rng.random_range(-b..b)).collect()
                };
                (name, Tensor::new(&shape, data).expect("layout shape"))
            })
            .collect();
        Ok(Self { spec: spec.clone(), params: ParameterSet::new(entries) })
    }

    /// Wraps explicit parameters, checking them against the layout `spec` describes.
    pub fn from_parts(spec: ModelSpec, params: ParameterSet) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(DreError::input(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, t)) in layout.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != t.shape() {
                return Err(DreError::input(format!(
                    "parameter `{pn}` {:?} does not match layout `{name}` {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.is_finite() {
                return Err(DreError::Numeric(format!("parameter `{pn}` has non-finite values")));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn is_classifier(&self) -> bool {
        self.spec.output_dim > 1
    }

    /// Declares every parameter as a named graph input.
    pub fn register(&self, g: &mut Graph) -> Result<ParamNodes> {
        let ids = self
            .params
            .iter()
            .map(|(name, t)| g.input(&param_input_name(name), t.shape()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(ParamNodes { ids })
    }

    pub fn bind_params(&self, b: &mut Bindings) {
        for (name, t) in self.params.iter() {
            b.insert(param_input_name(name), t.clone());
        }
    }

    /// Checks `x` against the input shape and returns the batch size
    /// (`None` for a single unbatched sample).
    pub fn batch_size(&self, x: &Tensor) -> Result<Option<usize>> {
        let s = &self.spec.input_shape;
        if x.shape() == s.as_slice() {
            return Ok(None);
        }
        if x.shape().len() == s.len() + 1 && &x.shape()[1..] == s.as_slice() {
            return Ok(Some(x.shape()[0]));
        }
        Err(DreError::input(format!("input shape {:?} does not match model input {:?}", x.shape(), s)))
    }

    /// Appends a forward pass over batch node `x` ([n, ...input_shape]).
    pub fn forward_nodes(&self, g: &mut Graph, p: &ParamNodes, x: NodeId) -> Result<ForwardNodes> {
        let spec = &self.spec;
        let xs = g.shape(x).to_vec();
        if xs.len() != spec.input_shape.len() + 1 || xs[1..] != spec.input_shape[..] {
            return Err(DreError::input(format!(
                "batch shape {:?} does not match model input {:?}",
                xs, spec.input_shape
            )));
        }
        let n = xs[0];
        let act = |g: &mut Graph, v: NodeId| match spec.activation {
            Activation::Relu => g.relu(v),
            Activation::Softplus => g.softplus(v),
        };
        match spec.kind {
            ModelKind::Mlp => {
                let mut h = g.reshape(x, &[n, spec.input_dim()])?;
                let layers = p.ids.len() / 2;
                for l in 0..layers {
                    let z = g.matmul(h, p.ids[2 * l])?;
                    let z = g.add(z, p.ids[2 * l + 1])?;
                    h = if l + 1 < layers { act(g, z)? } else { z };
                }
                Ok(ForwardNodes { logits: h, last_conv: None })
            }
            ModelKind::Cnn => {
                let (c1, c2) = (spec.hidden[0], spec.hidden[1]);
                let z = g.conv2d(x, p.ids[0])?;
                let b0 = g.reshape(p.ids[1], &[c1, 1, 1])?;
                let z = g.add(z, b0)?;
                let a = act(g, z)?;
                let z = g.conv2d(a, p.ids[2])?;
                let b1 = g.reshape(p.ids[3], &[c2, 1, 1])?;
                let z = g.add(z, b1)?;
                let last = act(g, z)?;
                g.label(last, "last_conv");
                let pooled = g.global_avg_pool(last)?;
                let o = g.matmul(pooled, p.ids[4])?;
                let logits = g.add(o, p.ids[5])?;
                Ok(ForwardNodes { logits, last_conv: Some(last) })
            }
        }
    }

    /// Logits `[n, output_dim]` for a batch, or `[output_dim]` for one sample.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.batch_size(x)?;
        let xb = match batch {
            Some(_) => x.clone(),
            None => {
                let mut s = vec![1];
                s.extend(x.shape());
                x.reshape(&s)?
            }
        };
        let mut g = Graph::new();
        let p = self.register(&mut g)?;
        let xi = g.input("x", xb.shape())?;
        let f = self.forward_nodes(&mut g, &p, xi)?;
        let mut b = Bindings::new();
        self.bind_params(&mut b);
        b.insert("x".into(), xb);
        let out = g.eval_nodes(&b, &[f.logits])?.remove(0);
        Ok(match batch {
            Some(_) => out,
            None => out.reshape(&[self.spec.output_dim])?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ");
        let mut head = String::from("DRE-PARAMS\nversion 1\n");
        head += &format!("kind {}\n", if s.kind == ModelKind::Mlp { "mlp" } else { "cnn" });
        head += &format!(
            "activation {}\n",
            if s.activation == Activation::Relu { "relu" } else { "softplus" }
        );
        head += &format!("input_shape {}\n", join(&s.input_shape));
        head += &format!("hidden {}\n", join(&s.hidden));
        head += &format!("output_dim {}\n", s.output_dim);
        for (name, t) in self.params.iter() {
            head += &format!("param {} {}\n", name, join(t.shape()));
        }
        head += "end\n";
        let mut out = head.into_bytes();
        for t in self.params.tensors() {
            format::push_f64s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = format::parse_header(bytes, "DRE-PARAMS", 1)?;
        let (mut kind, mut activation, mut input_shape, mut hidden, mut output_dim) = (None, None, None, None, None);
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        for (line, parts) in &header.lines {
            let line = *line;
            match parts.as_slice() {
                ["kind", "mlp"] => kind = Some(ModelKind::Mlp),
                ["kind", "cnn"] => kind = Some(ModelKind::Cnn),
                ["activation", "relu"] => activation = Some(Activation::Relu),
                ["activation", "softplus"] => activation = Some(Activation::Softplus),
                ["input_shape", rest @ ..] => input_shape = Some(format::parse_usizes(line, rest)?),
                ["hidden", rest @ ..] => hidden = Some(format::parse_usizes(line, rest)?),
                ["output_dim", k] => output_dim = Some(format::parse_usize(line, k)?),
                ["param", name, rest @ ..] => tensors.push((name.to_string(), format::parse_usizes(line, rest)?)),
                _ => return Err(format::parse_err(line, format!("unrecognised header line `{}`", parts.join(" ")))),
            }
        }
        let missing = |f: &str| format::parse_err(0, format!("header is missing `{f}`"));
        let spec = ModelSpec {
            kind: kind.ok_or_else(|| missing("kind"))?,
            activation: activation.ok_or_else(|| missing("activation"))?,
            input_shape: input_shape.ok_or_else(|| missing("input_shape"))?,
            hidden: hidden.ok_or_else(|| missing("hidden"))?,
            output_dim: output_dim.ok_or_else(|| missing("output_dim"))?,
        };
        let mut offset = header.body_offset;
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, shape) in tensors {
            let n: usize = shape.iter().product();
            let data = format::read_f64s(bytes, &mut offset, n, &format!("parameter `{name}`"))?;
            entries.push((name, Tensor::new(&shape, data)?));
        }
        format::expect_eof(bytes, offset)?;
        Model::from_parts(spec, ParameterSet::new(entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
