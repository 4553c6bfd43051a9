//! Encoder–decoder 3D segmentation backbone with a sigmoid head after every
//! decoder stage. The student variant appends mixed attention to each encoder
//! level; everything else is shared with the teacher so their per-stage maps
//! line up one-to-one.

pub mod cbam;
pub mod checkpoint;

use std::collections::HashMap;

use digest_nn::param::he_uniform;
use digest_nn::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DigestError, Result};

const LEAKY_SLOPE: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Group normalization with up to 8 groups of at least 2 channels.
    Group,
    /// One group per channel.
    Instance,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Nested regions (ET, TC, WT).
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of resolution levels.
    pub depth: usize,
    pub use_cbam: bool,
    pub norm_kind: NormKind,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 3,
            base_width: 8,
            depth: 4,
            use_cbam: false,
            norm_kind: NormKind::Group,
            cbam_reduction: 4,
            cbam_kernel: 7,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn teacher(&self) -> Self {
        Self {
            use_cbam: false,
            ..self.clone()
        }
    }

    pub fn student(&self) -> Self {
        Self {
            use_cbam: true,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DigestError::Config(m));
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.base_width < 2 {
            return bad(format!("base_width must be at least 2, got {}", self.base_width));
        }
        if self.out_channels != 3 {
            return bad(format!("out_channels must be 3, got {}", self.out_channels));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.cbam_kernel.is_multiple_of(2) {
            return bad(format!("cbam_kernel must be odd, got {}", self.cbam_kernel));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn groups(&self, channels: usize) -> usize {
        match self.norm_kind {
            NormKind::Instance => channels,
            NormKind::None => 0,
            NormKind::Group => {
                let mut g = (channels / 2).clamp(1, 8);
                while !channels.is_multiple_of(g) {
                    g -= 1;
                }
                g
            }
        }
    }

    /// Number of decoder stages, each carrying an auxiliary head.
    pub fn num_stages(&self) -> usize {
        self.depth - 1
    }
}

/// Final map plus per-decoder-stage maps (coarsest first). The final map is
/// the last stage's map.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    pub final_map: Tensor,
    pub aux: Vec<Tensor>,
}

/// Graph handles for a forward pass; `aux.last()` is the final map.
#[derive(Clone, Debug)]
pub struct StageVars {
    pub aux: Vec<Var>,
}

impl StageVars {
    pub fn final_map(&self) -> Var {
        *self.aux.last().expect("at least one decoder stage")
    }

    pub fn collect(&self, g: &Graph) -> StageOutputs {
        StageOutputs {
            final_map: g.value(self.final_map()).clone(),
            aux: self.aux.iter().map(|v| g.value(*v).clone()).collect(),
        }
    }
}

/// Parameters registered on a graph, addressable by name.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    /// Graph variable of the `i`-th parameter in store order.
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: ParamStore,
    /// Test hook: skip attention blocks even when present.
    pub cbam_bypass: bool,
}

/// What [`Network::init_from`] transferred.
#[derive(Clone, Debug, PartialEq)]
pub struct CopyReport {
    pub copied_tensors: usize,
    pub copied_elements: usize,
    pub total_elements: usize,
}

impl CopyReport {
    pub fn fraction(&self) -> f64 {
        self.copied_elements as f64 / self.total_elements as f64
    }
}

fn is_cbam_param(name: &str) -> bool {
    name.contains(".cbam.")
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let seed = config.seed;
        let has_norm = config.norm_kind != NormKind::None;
        let conv = |params: &mut ParamStore, name: String, cin: usize, cout: usize, k: usize, bias: bool| {
            let wname = format!("{name}.weight");
            params.insert(
                wname.clone(),
                he_uniform(&[cout, cin, k, k, k], cin * k * k * k, seed, &wname),
            );
            if bias {
                params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
            }
        };
        let norm = |params: &mut ParamStore, name: String, c: usize| {
            if has_norm {
                params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
                params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
            }
        };
        for l in 0..config.depth {
            let cin = if l == 0 {
                config.in_channels
            } else {
                config.width(l - 1)
            };
            let c = config.width(l);
            conv(&mut params, format!("enc{l}.conv1"), cin, c, 3, !has_norm);
            norm(&mut params, format!("enc{l}.norm1"), c);
            conv(&mut params, format!("enc{l}.conv2"), c, c, 3, !has_norm);
            norm(&mut params, format!("enc{l}.norm2"), c);
            if config.use_cbam {
                cbam::init_params(
                    &mut params,
                    &format!("enc{l}.cbam"),
                    c,
                    config.cbam_reduction,
                    config.cbam_kernel,
                    seed,
                );
            }
        }
        for z in 0..config.num_stages() {
            let l = config.depth - 2 - z;
            let (c, below) = (config.width(l), config.width(l + 1));
            let up = format!("dec{z}.up.weight");
            params.insert(up.clone(), he_uniform(&[below, c, 2, 2, 2], below, seed, &up));
            params.insert(format!("dec{z}.up.bias"), Tensor::zeros(&[c]));
            conv(&mut params, format!("dec{z}.conv1"), 2 * c, c, 3, !has_norm);
            norm(&mut params, format!("dec{z}.norm1"), c);
            conv(&mut params, format!("dec{z}.conv2"), c, c, 3, !has_norm);
            norm(&mut params, format!("dec{z}.norm2"), c);
            conv(&mut params, format!("dec{z}.head"), c, config.out_channels, 1, true);
        }
        Ok(Self {
            config,
            params,
            cbam_bypass: false,
        })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_parts(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(DigestError::Structure(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| DigestError::Structure(format!("parameter `{name}` missing")))?;
            if got.shape() != t.shape() {
                return Err(DigestError::Structure(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            cbam_bypass: false,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Registers every parameter on `g` (as trainable leaves or constants).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            vars.push(if trainable {
                g.leaf(t.clone())
            } else {
                g.input(t.clone())
            });
            index.insert(name.to_string(), i);
        }
        BoundParams { vars, index }
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        let [_, c, d, h, w] = shape else {
            return Err(DigestError::Shape(format!("expected B×C×D×H×W input, got {shape:?}")));
        };
        if *c != self.config.in_channels {
            return Err(DigestError::Shape(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let factor = 1usize << (self.config.depth - 1);
        for (axis, n) in [("D", d), ("H", h), ("W", w)] {
            if *n == 0 || n % factor != 0 {
                return Err(DigestError::Shape(format!(
                    "axis {axis} has size {n}, not divisible by {factor}"
                )));
            }
        }
        Ok(())
    }

    fn conv_block(&self, g: &mut Graph, x: Var, p: &BoundParams, prefix: &str) -> Result<Var> {
        let mut h = x;
        for i in 1..=2 {
            let bias = (self.config.norm_kind == NormKind::None).then(|| p.get(&format!("{prefix}.conv{i}.bias")));
            h = g.conv3d(h, p.get(&format!("{prefix}.conv{i}.weight")), bias)?;
            if self.config.norm_kind != NormKind::None {
                let c = g.value(h).shape()[1];
                h = g.group_norm(
                    h,
                    p.get(&format!("{prefix}.norm{i}.gamma")),
                    p.get(&format!("{prefix}.norm{i}.beta")),
                    self.config.groups(c),
                )?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }

    /// Records a forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph, input: Var, p: &BoundParams) -> Result<StageVars> {
        self.check_input_shape(g.value(input).shape())?;
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = input;
        for l in 0..depth {
            if l > 0 {
                h = g.max_pool2(h)?;
            }
            h = self.conv_block(g, h, p, &format!("enc{l}"))?;
            if self.config.use_cbam && !self.cbam_bypass {
                h = cbam::apply(g, h, p, &format!("enc{l}.cbam"))?.output;
            }
            skips.push(h);
        }
        let mut aux = Vec::with_capacity(self.config.num_stages());
        for z in 0..self.config.num_stages() {
            let l = depth - 2 - z;
            let up = g.up_conv(
                h,
                p.get(&format!("dec{z}.up.weight")),
                Some(p.get(&format!("dec{z}.up.bias"))),
            )?;
            let cat = g.concat(skips[l], up)?;
            h = self.conv_block(g, cat, p, &format!("dec{z}"))?;
            let logits = g.conv3d(
                h,
                p.get(&format!("dec{z}.head.weight")),
                Some(p.get(&format!("dec{z}.head.bias"))),
            )?;
            aux.push(g.sigmoid(logits));
        }
        Ok(StageVars { aux })
    }

    /// Inference forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<StageOutputs> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let x = g.input(input.clone());
        let vars = self.forward_graph(&mut g, x, &p)?;
        Ok(vars.collect(&g))
    }

    /// Copies every parameter whose name and shape match `teacher`; attention
    /// parameters keep their initialization.
    pub fn init_from(&mut self, teacher: &Network) -> Result<CopyReport> {
        let mut unmatched = Vec::new();
        for (name, t) in teacher.params.iter() {
            match self.params.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                _ => unmatched.push(name.to_string()),
            }
        }
        for (name, _) in self.params.iter() {
            if !is_cbam_param(name) && teacher.params.get(name).is_none() {
                unmatched.push(name.to_string());
            }
        }
        if !unmatched.is_empty() {
            unmatched.sort();
            unmatched.dedup();
            return Err(DigestError::Structure(format!(
                "unmatched parameters: {}",
                unmatched.join(", ")
            )));
        }
        let mut report = CopyReport {
            copied_tensors: 0,
            copied_elements: 0,
            total_elements: self.params.num_elements(),
        };
        for (name, t) in teacher.params.iter() {
            if is_cbam_param(name) {
                continue;
            }
            *self.params.get_mut(name).expect("checked above") = t.clone();
            report.copied_tensors += 1;
            report.copied_elements += t.len();
        }
        Ok(report)
    }

    pub fn decoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("dec"))
            .map(|(_, t)| t.len())
            .sum()
    }
}
