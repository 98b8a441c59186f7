//! Convolutional backbone with three candidate-grid heads and a flat
//! classification head.
//!
//! The backbone is five stride-2 `3×3` convolutions. Heads tap the stages
//! at strides 32, 16 and 8 (head 1 is the coarsest). Each head is two
//! `3×3` conv + leaky-ReLU layers followed by a `1×1` projection to
//! `1 + N_c` channels, transposed to `[W, H, 1 + N_c]` with channel 0 the
//! objectness logit.

use diffcore::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STRIDES: [usize; 3] = [32, 16, 8];
const NUM_STAGES: usize = 5;
/// Backbone stage (0-based) feeding each head.
const HEAD_TAPS: [usize; 3] = [4, 3, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Output channels of the five backbone stages.
    pub widths: Vec<usize>,
    pub head_width: usize,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::new(160, 4)
    }
}

impl NetworkConfig {
    pub fn new(image_size: usize, num_classes: usize) -> Self {
        NetworkConfig {
            image_size,
            num_classes,
            widths: vec![16, 32, 64, 96, 128],
            head_width: 32,
            leaky_slope: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::config(format!(
                "image_size {} is not a positive multiple of 32",
                self.image_size
            )));
        }
        if self.widths.len() != NUM_STAGES || self.widths.contains(&0) {
            return Err(Error::config("widths must list five positive stage widths"));
        }
        if self.num_classes == 0 || self.head_width == 0 {
            return Err(Error::config("num_classes and head_width must be positive"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope must lie in (0,1)"));
        }
        Ok(())
    }

    /// Grid side `W_k = H_k = S / stride_k` for heads 1..3.
    pub fn grid_sizes(&self) -> [usize; 3] {
        STRIDES.map(|s| self.image_size / s)
    }

    pub fn candidate_count(&self) -> usize {
        self.grid_sizes().iter().map(|g| g * g).sum()
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |prefix: String, c_out: usize, c_in: usize, k: usize| {
            out.push((format!("{prefix}.kernel"), vec![c_out, c_in, k, k]));
            out.push((format!("{prefix}.bias"), vec![c_out]));
        };
        let mut c_in = 3;
        for (i, &w) in self.widths.iter().enumerate() {
            conv(format!("backbone.stage{}", i + 1), w, c_in, 3);
            c_in = w;
        }
        for (k, &tap) in HEAD_TAPS.iter().enumerate() {
            let hw = self.head_width;
            conv(format!("head{}.conv1", k + 1), hw, self.widths[tap], 3);
            conv(format!("head{}.conv2", k + 1), hw, hw, 3);
            conv(format!("head{}.out", k + 1), 1 + self.num_classes, hw, 1);
        }
        out.push(("flat.weight".into(), vec![self.num_classes, self.widths[NUM_STAGES - 1]]));
        out.push(("flat.bias".into(), vec![self.num_classes]));
        out
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    GridHeads,
    FlatHead,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("backbone.") {
        ParamGroup::Backbone
    } else if name.starts_with("flat.") {
        ParamGroup::FlatHead
    } else {
        ParamGroup::GridHeads
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Params { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }
}

/// Per-head raw logits, each `[W_k, H_k, 1 + N_c]`, head 1 = stride 32.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrids {
    pub heads: Vec<Tensor>,
}

impl CandidateGrids {
    pub fn new(heads: Vec<Tensor>) -> Result<Self> {
        let channels = heads.first().map(|t| t.shape().get(2).copied());
        let ok = !heads.is_empty()
            && heads
                .iter()
                .all(|t| t.ndim() == 3 && Some(t.shape().get(2).copied()) == channels && t.shape()[2] >= 2);
        if !ok {
            return Err(Error::Usage("candidate grids must be [W,H,1+N_c] with a shared N_c".into()));
        }
        Ok(CandidateGrids { heads })
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].shape()[2] - 1
    }

    pub fn candidate_count(&self) -> usize {
        self.heads.iter().map(|t| t.shape()[0] * t.shape()[1]).sum()
    }

    /// Logit vectors of the candidates of one head.
    pub fn candidates(&self, head: usize) -> std::slice::ChunksExact<'_, f64> {
        let t = &self.heads[head];
        t.data().chunks_exact(t.shape()[2])
    }
}

/// Parameters bound as leaves of a particular graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Params,
}

impl Network {
    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(&shape, |_| normal.sample(&mut rng))?
                };
                Ok((name, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            config,
            params: Params::from_entries(entries),
        })
    }

    pub fn from_params(config: NetworkConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        let matches = expected.len() == params.len()
            && expected
                .iter()
                .zip(params.iter())
                .all(|((n, s), (pn, pt))| n == pn && s.as_slice() == pt.shape());
        if !matches {
            return Err(Error::Usage("parameters do not match the network config".into()));
        }
        Ok(Network { config, params })
    }

    /// Adds every parameter to `g`, trainable or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect::<diffcore::Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.params.index_of(name).expect("known parameter name")]
    }

    fn conv(&self, g: &mut Graph, bound: &Bound, prefix: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let k = self.var(bound, &format!("{prefix}.kernel"));
        let b = self.var(bound, &format!("{prefix}.bias"));
        Ok(g.conv2d(x, k, b, stride, padding)?)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(diffcore::DiffError::Shape {
                op: "forward",
                detail: format!("image {:?} does not match [3,{s},{s}]", image.shape()),
            }
            .into());
        }
        Ok(())
    }

    /// Activations of the five backbone stages.
    pub fn backbone_graph(&self, g: &mut Graph, bound: &Bound, image: Var) -> Result<Vec<Var>> {
        self.check_image(g.value(image))?;
        let mut x = image;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let h = self.conv(g, bound, &format!("backbone.stage{}", i + 1), x, 2, 1)?;
            x = g.leaky_relu(h, self.config.leaky_slope)?;
            stages.push(x);
        }
        Ok(stages)
    }

    /// Head outputs as `[W_k, H_k, 1 + N_c]` graph nodes.
    pub fn heads_graph(&self, g: &mut Graph, bound: &Bound, image: Var) -> Result<Vec<Var>> {
        let stages = self.backbone_graph(g, bound, image)?;
        self.heads_from_stages(g, bound, &stages)
    }

    pub fn heads_from_stages(&self, g: &mut Graph, bound: &Bound, stages: &[Var]) -> Result<Vec<Var>> {
        let slope = self.config.leaky_slope;
        HEAD_TAPS
            .iter()
            .enumerate()
            .map(|(k, &tap)| {
                let p = format!("head{}", k + 1);
                let h1 = self.conv(g, bound, &format!("{p}.conv1"), stages[tap], 1, 1)?;
                let a1 = g.leaky_relu(h1, slope)?;
                let h2 = self.conv(g, bound, &format!("{p}.conv2"), a1, 1, 1)?;
                let a2 = g.leaky_relu(h2, slope)?;
                let out = self.conv(g, bound, &format!("{p}.out"), a2, 1, 0)?;
                // [C, H, W] -> [W, H, C]
                Ok(g.permute(out, &[2, 1, 0])?)
            })
            .collect()
    }

    /// Flat classifier logits `[N_c]` from the pooled deepest stage.
    pub fn flat_graph(&self, g: &mut Graph, bound: &Bound, image: Var) -> Result<Var> {
        let stages = self.backbone_graph(g, bound, image)?;
        self.flat_from_stages(g, bound, &stages)
    }

    pub fn flat_from_stages(&self, g: &mut Graph, bound: &Bound, stages: &[Var]) -> Result<Var> {
        let pooled = g.global_avg_pool(stages[NUM_STAGES - 1])?;
        let w = self.var(bound, "flat.weight");
        let b = self.var(bound, "flat.bias");
        Ok(g.linear(pooled, w, b)?)
    }

    pub fn forward(&self, image: &Tensor) -> Result<CandidateGrids> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let heads = self.heads_graph(&mut g, &bound, x)?;
        CandidateGrids::new(heads.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn forward_flat(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let logits = self.flat_graph(&mut g, &bound, x)?;
        Ok(g.value(logits).data().to_vec())
    }
}
