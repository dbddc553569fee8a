//! Small classifiers with named tap points.
//!
//! Two architectures cover the experiments at desk scale: a plain MLP and
//! a miniature residual CNN ("mini-resnet": stem conv, four residual
//! blocks with stride-2 downsampling between them, global average pooling
//! and a dense head). Each block exposes its activation as a named tap so
//! the relation-consistency loss can be attached at any depth.
//!
//! Batch normalization is deliberately omitted: it is not needed for the
//! consistency mechanism and would enlarge the differentiable surface.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Architecture family plus its width parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchKind {
    /// Fully connected layers with relu; every hidden layer is a block.
    Mlp { hidden: Vec<usize> },
    /// Residual conv blocks; `channels[i]` is the width of block i+1.
    MiniResNet { channels: Vec<usize> },
}

/// Declarative description of a classifier and where taps are taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: ArchKind,
    /// Per-example input shape: `[features]` for MLP, `[C, H, W]` for conv.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Block names whose activations are returned by `forward_with_taps`.
    pub tap_points: Vec<String>,
    /// Taps are taken after the block's final relu when true (the default),
    /// before it otherwise.
    pub tap_after_activation: bool,
}

impl ModelSpec {
    /// MLP over flat features; the tap defaults to the last hidden layer.
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        let tap = if hidden.is_empty() {
            vec![]
        } else {
            vec![format!("fc{}", hidden.len())]
        };
        ModelSpec {
            arch: ArchKind::Mlp { hidden },
            input_shape: vec![input_dim],
            classes,
            tap_points: tap,
            tap_after_activation: true,
        }
    }

    /// Default mini-resnet: widths {8, 16, 32, 64}, tap at the last block.
    pub fn mini_resnet(input_shape: [usize; 3], classes: usize) -> Self {
        Self::mini_resnet_with_channels(input_shape, classes, vec![8, 16, 32, 64])
    }

    pub fn mini_resnet_with_channels(
        input_shape: [usize; 3],
        classes: usize,
        channels: Vec<usize>,
    ) -> Self {
        let tap = if channels.is_empty() {
            vec![]
        } else {
            vec![format!("block{}", channels.len())]
        };
        ModelSpec {
            arch: ArchKind::MiniResNet { channels },
            input_shape: input_shape.to_vec(),
            classes,
            tap_points: tap,
            tap_after_activation: true,
        }
    }

    /// Ordered names of the blocks this architecture declares.
    pub fn block_names(&self) -> Vec<String> {
        match &self.arch {
            ArchKind::Mlp { hidden } => (1..=hidden.len()).map(|i| format!("fc{i}")).collect(),
            ArchKind::MiniResNet { channels } => {
                (1..=channels.len()).map(|i| format!("block{i}")).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        let blocks = self.block_names();
        if blocks.is_empty() {
            return Err(Error::InvalidConfig(
                "model must declare at least one block".into(),
            ));
        }
        for tap in &self.tap_points {
            if !blocks.contains(tap) {
                return Err(Error::InvalidConfig(format!(
                    "tap point {tap:?} is not one of the declared blocks {blocks:?}"
                )));
            }
        }
        match &self.arch {
            ArchKind::Mlp { hidden } => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "mlp input_shape must be [features], got {:?}",
                        self.input_shape
                    )));
                }
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::InvalidConfig(
                        "hidden widths must be positive".into(),
                    ));
                }
            }
            ArchKind::MiniResNet { channels } => {
                if self.input_shape.len() != 3 || self.input_shape.iter().any(|&d| d == 0) {
                    return Err(Error::InvalidConfig(format!(
                        "mini-resnet input_shape must be [C,H,W], got {:?}",
                        self.input_shape
                    )));
                }
                if channels.iter().any(|&c| c == 0) {
                    return Err(Error::InvalidConfig(
                        "channel widths must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of features per example.
    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Canonical key=value rendering, embedded in checkpoints.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        match &self.arch {
            ArchKind::Mlp { hidden } => {
                s.push_str("arch=mlp\n");
                s.push_str(&format!("hidden={}\n", join_usize(hidden)));
            }
            ArchKind::MiniResNet { channels } => {
                s.push_str("arch=mini-resnet\n");
                s.push_str(&format!("channels={}\n", join_usize(channels)));
            }
        }
        s.push_str(&format!("input_shape={}\n", join_usize(&self.input_shape)));
        s.push_str(&format!("classes={}\n", self.classes));
        s.push_str(&format!("taps={}\n", self.tap_points.join(",")));
        s.push_str(&format!(
            "tap_after_activation={}\n",
            self.tap_after_activation
        ));
        s
    }

    /// Inverse of [`to_config_string`].
    pub fn from_config_string(text: &str) -> Result<Self> {
        let mut arch = None;
        let mut hidden = None;
        let mut channels = None;
        let mut input_shape = None;
        let mut classes = None;
        let mut taps = None;
        let mut tap_after = true;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(
                    format!("model spec line {}", lineno + 1),
                    "expected key=value",
                )
            })?;
            let loc = format!("model spec line {}", lineno + 1);
            match key.trim() {
                "arch" => arch = Some(value.trim().to_string()),
                "hidden" => hidden = Some(parse_usize_list(value, &loc)?),
                "channels" => channels = Some(parse_usize_list(value, &loc)?),
                "input_shape" => input_shape = Some(parse_usize_list(value, &loc)?),
                "classes" => {
                    classes = Some(
                        value
                            .trim()
                            .parse::<usize>()
                            .map_err(|e| Error::format(loc, format!("bad classes: {e}")))?,
                    )
                }
                "taps" => {
                    let v = value.trim();
                    taps = Some(if v.is_empty() {
                        vec![]
                    } else {
                        v.split(',').map(|s| s.trim().to_string()).collect()
                    })
                }
                "tap_after_activation" => {
                    tap_after = value
                        .trim()
                        .parse::<bool>()
                        .map_err(|e| Error::format(loc, format!("bad bool: {e}")))?
                }
                other => {
                    return Err(Error::format(loc, format!("unknown key {other:?}")));
                }
            }
        }
        let arch = arch.ok_or_else(|| Error::format("model spec", "missing arch"))?;
        let arch = match arch.as_str() {
            "mlp" => ArchKind::Mlp {
                hidden: hidden.ok_or_else(|| Error::format("model spec", "mlp needs hidden"))?,
            },
            "mini-resnet" => ArchKind::MiniResNet {
                channels: channels
                    .ok_or_else(|| Error::format("model spec", "mini-resnet needs channels"))?,
            },
            other => {
                return Err(Error::format(
                    "model spec",
                    format!("unknown arch {other:?}"),
                ))
            }
        };
        let spec = ModelSpec {
            arch,
            input_shape: input_shape
                .ok_or_else(|| Error::format("model spec", "missing input_shape"))?,
            classes: classes.ok_or_else(|| Error::format("model spec", "missing classes"))?,
            tap_points: taps.unwrap_or_default(),
            tap_after_activation: tap_after,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usize_list(value: &str, loc: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::format(loc.to_string(), format!("bad integer {s:?}: {e}")))
        })
        .collect()
}

/// A named parameter tensor. Biases are tracked so weight decay can skip them.
#[derive(Debug, Clone)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub is_bias: bool,
}

/// A classifier: spec plus its parameters.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    spec: ModelSpec,
    params: Vec<Param<E>>,
}

/// Graph handles for a model's parameters, index-parallel to its params.
/// Cloning copies the handles; both copies refer to the same graph leaves.
#[derive(Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

/// Logits plus the activation at every tap point, on one graph.
pub struct ForwardOutput {
    pub logits: Var,
    pub taps: Vec<(String, Var)>,
}

impl<E: Element> Model<E> {
    /// Assemble a model from a spec and pre-built parameters.
    /// Shapes must match what `init_model` would produce.
    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<Param<E>>) -> Self {
        Model { spec, params }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<E>] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over the exact bits of every parameter, in declaration order.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.data() {
                for byte in v.to_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Insert every parameter into a graph.
    pub fn bind(&self, g: &mut Graph<E>, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    fn var(&self, bound: &BoundParams, name: &str) -> Var {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("parameter {name} exists by construction"));
        bound.vars[idx]
    }

    /// Gradient of each parameter after a backward pass, in declaration order.
    pub fn grads(&self, g: &Graph<E>, bound: &BoundParams) -> Vec<Tensor<E>> {
        bound.vars.iter().map(|&v| g.grad(v)).collect()
    }

    /// Forward pass returning logits and the activations at the spec's tap
    /// points, all recorded on `g` so gradients flow through every tap.
    pub fn forward_with_taps(
        &self,
        g: &mut Graph<E>,
        bound: &BoundParams,
        x: Var,
    ) -> Result<ForwardOutput> {
        let batch = g.shape(x)[0];
        let per_example: usize = g.shape(x)[1..].iter().product();
        if per_example != self.spec.input_numel() {
            return Err(Error::InvalidInput(format!(
                "input shape {:?} does not match model input {:?}",
                g.shape(x),
                self.spec.input_shape
            )));
        }
        match &self.spec.arch {
            ArchKind::Mlp { hidden } => {
                let mut h = g.reshape(x, &[batch, self.spec.input_numel()])?;
                let mut taps = Vec::new();
                for i in 1..=hidden.len() {
                    let w = self.var(bound, &format!("fc{i}.weight"));
                    let b = self.var(bound, &format!("fc{i}.bias"));
                    let lin = g.matmul(h, w)?;
                    let pre = g.add_row_bias(lin, b)?;
                    let post = g.relu(pre);
                    let name = format!("fc{i}");
                    if self.spec.tap_points.contains(&name) {
                        let tap = if self.spec.tap_after_activation {
                            post
                        } else {
                            pre
                        };
                        taps.push((name, tap));
                    }
                    h = post;
                }
                let w = self.var(bound, "head.weight");
                let b = self.var(bound, "head.bias");
                let lin = g.matmul(h, w)?;
                let logits = g.add_row_bias(lin, b)?;
                Ok(ForwardOutput { logits, taps })
            }
            ArchKind::MiniResNet { channels } => {
                let shape: Vec<usize> = std::iter::once(batch)
                    .chain(self.spec.input_shape.iter().copied())
                    .collect();
                let mut h = g.reshape(x, &shape)?;
                // stem
                let w = self.var(bound, "stem.weight");
                let b = self.var(bound, "stem.bias");
                let conv = g.conv2d(h, w, 1, 1)?;
                let biased = g.add_channel_bias(conv, b)?;
                h = g.relu(biased);

                let mut taps = Vec::new();
                let mut in_ch = channels[0];
                for (i, &out_ch) in channels.iter().enumerate() {
                    let block = i + 1;
                    let stride = if i == 0 { 1 } else { 2 };
                    let prefix = format!("block{block}");

                    let w1 = self.var(bound, &format!("{prefix}.conv1.weight"));
                    let b1 = self.var(bound, &format!("{prefix}.conv1.bias"));
                    let c1 = g.conv2d(h, w1, stride, 1)?;
                    let c1 = g.add_channel_bias(c1, b1)?;
                    let a1 = g.relu(c1);

                    let w2 = self.var(bound, &format!("{prefix}.conv2.weight"));
                    let b2 = self.var(bound, &format!("{prefix}.conv2.bias"));
                    let c2 = g.conv2d(a1, w2, 1, 1)?;
                    let c2 = g.add_channel_bias(c2, b2)?;

                    let shortcut = if in_ch == out_ch && stride == 1 {
                        h
                    } else {
                        let ws = self.var(bound, &format!("{prefix}.shortcut.weight"));
                        let bs = self.var(bound, &format!("{prefix}.shortcut.bias"));
                        let sc = g.conv2d(h, ws, stride, 0)?;
                        g.add_channel_bias(sc, bs)?
                    };
                    let pre = g.add(c2, shortcut)?;
                    let post = g.relu(pre);
                    if self.spec.tap_points.contains(&prefix) {
                        let tap = if self.spec.tap_after_activation {
                            post
                        } else {
                            pre
                        };
                        taps.push((prefix.clone(), tap));
                    }
                    h = post;
                    in_ch = out_ch;
                }

                let pooled = g.gap(h)?;
                let w = self.var(bound, "head.weight");
                let b = self.var(bound, "head.bias");
                let lin = g.matmul(pooled, w)?;
                let logits = g.add_row_bias(lin, b)?;
                Ok(ForwardOutput { logits, taps })
            }
        }
    }

    /// Plain forward: exactly `forward_with_taps(..).logits`.
    pub fn forward(&self, g: &mut Graph<E>, bound: &BoundParams, x: Var) -> Result<Var> {
        Ok(self.forward_with_taps(g, bound, x)?.logits)
    }

    /// Logits for a batch with no gradient bookkeeping.
    pub fn logits_value(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let logits = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(logits).clone())
    }

    /// Predicted class per example (first index on ties).
    pub fn predict(&self, x: &Tensor<E>) -> Result<Vec<usize>> {
        let logits = self.logits_value(x)?;
        let k = self.spec.classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Deterministic He-style initialization: weights are normal with
/// std = sqrt(2 / fan_in), biases start at zero.
pub fn init_model<E: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<E>> {
    spec.validate()?;
    let mut rng = SplitMix64::derive(seed, &[0x1e17]);
    let mut params: Vec<Param<E>> = Vec::new();

    fn push_weight<E: Element>(
        params: &mut Vec<Param<E>>,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut SplitMix64,
    ) {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n).map(|_| E::from_f64(rng.normal() * std)).collect();
        params.push(Param {
            name,
            value: Tensor::from_vec(shape, data).expect("shape matches data"),
            is_bias: false,
        });
    }
    fn push_bias<E: Element>(params: &mut Vec<Param<E>>, name: String, len: usize) {
        params.push(Param {
            name,
            value: Tensor::zeros(&[len]),
            is_bias: true,
        });
    }

    match &spec.arch {
        ArchKind::Mlp { hidden } => {
            let mut in_dim = spec.input_numel();
            for (i, &h) in hidden.iter().enumerate() {
                push_weight(
                    &mut params,
                    format!("fc{}.weight", i + 1),
                    vec![in_dim, h],
                    in_dim,
                    &mut rng,
                );
                push_bias(&mut params, format!("fc{}.bias", i + 1), h);
                in_dim = h;
            }
            push_weight(
                &mut params,
                "head.weight".into(),
                vec![in_dim, spec.classes],
                in_dim,
                &mut rng,
            );
            push_bias(&mut params, "head.bias".into(), spec.classes);
        }
        ArchKind::MiniResNet { channels } => {
            let in_ch = spec.input_shape[0];
            push_weight(
                &mut params,
                "stem.weight".into(),
                vec![channels[0], in_ch, 3, 3],
                in_ch * 9,
                &mut rng,
            );
            push_bias(&mut params, "stem.bias".into(), channels[0]);
            let mut prev = channels[0];
            for (i, &ch) in channels.iter().enumerate() {
                let block = i + 1;
                let stride = if i == 0 { 1 } else { 2 };
                push_weight(
                    &mut params,
                    format!("block{block}.conv1.weight"),
                    vec![ch, prev, 3, 3],
                    prev * 9,
                    &mut rng,
                );
                push_bias(&mut params, format!("block{block}.conv1.bias"), ch);
                push_weight(
                    &mut params,
                    format!("block{block}.conv2.weight"),
                    vec![ch, ch, 3, 3],
                    ch * 9,
                    &mut rng,
                );
                push_bias(&mut params, format!("block{block}.conv2.bias"), ch);
                if prev != ch || stride != 1 {
                    push_weight(
                        &mut params,
                        format!("block{block}.shortcut.weight"),
                        vec![ch, prev, 1, 1],
                        prev,
                        &mut rng,
                    );
                    push_bias(&mut params, format!("block{block}.shortcut.bias"), ch);
                }
                prev = ch;
            }
            push_weight(
                &mut params,
                "head.weight".into(),
                vec![prev, spec.classes],
                prev,
                &mut rng,
            );
            push_bias(&mut params, "head.bias".into(), spec.classes);
        }
    }

    Ok(Model {
        spec: spec.clone(),
        params,
    })
}
