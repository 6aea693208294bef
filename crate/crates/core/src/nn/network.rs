//! Miniature DRUNet-style denoiser as a static computation graph.
//!
//! Topology for scales `c_0 .. c_{S-1}`:
//!
//! ```text
//! x_0 = head(x)                                   3x3 conv, 2 -> c_0
//! x_s = down_s(resblocks(x_{s-1}))                2x2 stride-2 conv, c_{s-1} -> c_s
//! h   = resblocks(x_{S-1})                        body
//! h   = resblocks(up_s(h + x_s))  for s = S-1..1  2x2 stride-2 transposed conv
//! out = tail(h + x_0)                             3x3 conv, c_0 -> 2
//! ```
//!
//! Residual blocks are `x + conv(relu(conv(x)))`. No layer has a bias, so the
//! network is positively homogeneous: `psi(a x) = a psi(x)` for `a > 0`.
//!
//! Besides the forward pass the graph supports a tangent (forward-mode) pass
//! and a reverse pass that can seed either stream, which together give the
//! mixed second derivatives needed for denoising score matching.

use serde::{Deserialize, Serialize};

use super::conv::{ConvKind, ConvLayer, Tensor};
use crate::error::{Error, Result};

/// Architecture descriptor of the denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Channel width per scale, finest first.
    pub channels: Vec<usize>,
    pub blocks_per_scale: usize,
    pub kernel_size: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::with_base(16)
    }
}

impl Architecture {
    /// Three scales `(c, 2c, 4c)` with two residual blocks each and 3x3 kernels.
    pub fn with_base(c0: usize) -> Self {
        Architecture {
            channels: vec![c0, 2 * c0, 4 * c0],
            blocks_per_scale: 2,
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidParam(format!(
                "architecture needs at least one scale with positive width, got {:?}",
                self.channels
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

#[derive(Clone, Copy, Debug)]
enum Node {
    Input,
    Conv { layer: usize, src: usize },
    Relu { src: usize },
    Add { a: usize, b: usize },
}

#[derive(Clone, Debug)]
pub struct Network {
    arch: Architecture,
    layers: Vec<ConvLayer>,
    nodes: Vec<Node>,
    param_count: usize,
}

struct Builder {
    layers: Vec<ConvLayer>,
    nodes: Vec<Node>,
    params: usize,
}

impl Builder {
    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn conv(&mut self, kind: ConvKind, cin: usize, cout: usize, src: usize) -> usize {
        let layer = ConvLayer {
            kind,
            cin,
            cout,
            offset: self.params,
        };
        self.params += layer.weight_count();
        self.layers.push(layer);
        self.push(Node::Conv {
            layer: self.layers.len() - 1,
            src,
        })
    }

    fn resblock(&mut self, c: usize, k: usize, src: usize) -> usize {
        let a = self.conv(ConvKind::Same(k), c, c, src);
        let r = self.push(Node::Relu { src: a });
        let b = self.conv(ConvKind::Same(k), c, c, r);
        self.push(Node::Add { a: src, b })
    }

    fn resblocks(&mut self, c: usize, k: usize, n: usize, mut h: usize) -> usize {
        for _ in 0..n {
            h = self.resblock(c, k, h);
        }
        h
    }
}

impl Network {
    pub fn new(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel_size;
        let nb = arch.blocks_per_scale;
        let ch = &arch.channels;
        let s = ch.len();
        let mut b = Builder {
            layers: Vec::new(),
            nodes: Vec::new(),
            params: 0,
        };
        let input = b.push(Node::Input);
        let mut skips = vec![b.conv(ConvKind::Same(k), 2, ch[0], input)];
        for i in 1..s {
            let h = b.resblocks(ch[i - 1], k, nb, skips[i - 1]);
            skips.push(b.conv(ConvKind::Down, ch[i - 1], ch[i], h));
        }
        let mut h = b.resblocks(ch[s - 1], k, nb, skips[s - 1]);
        for i in (1..s).rev() {
            let joined = b.push(Node::Add { a: h, b: skips[i] });
            let up = b.conv(ConvKind::Up, ch[i], ch[i - 1], joined);
            h = b.resblocks(ch[i - 1], k, nb, up);
        }
        let joined = b.push(Node::Add { a: h, b: skips[0] });
        b.conv(ConvKind::Same(k), ch[0], 2, joined);
        Ok(Network {
            arch: arch.clone(),
            layers: b.layers,
            nodes: b.nodes,
            param_count: b.params,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Layers that close a residual branch (second conv of each block).
    pub(crate) fn residual_branch_layers(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match *n {
                Node::Add { b, .. } => match self.nodes[b] {
                    Node::Conv { layer, src } if matches!(self.nodes[src], Node::Relu { .. }) => Some(layer),
                    _ => None,
                },
                _ => None,
            })
            .collect()
    }

    /// Evaluates every node; the last entry is the network output.
    pub fn forward(&self, params: &[f64], x: Tensor) -> Vec<Tensor> {
        debug_assert_eq!(params.len(), self.param_count);
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match *node {
                Node::Input => x.clone(),
                Node::Conv { layer, src } => self.layers[layer].forward(params, &values[src]),
                Node::Relu { src } => {
                    let mut t = values[src].clone();
                    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    t
                }
                Node::Add { a, b } => {
                    let mut t = values[a].clone();
                    t.add_assign(&values[b]);
                    t
                }
            };
            values.push(v);
        }
        values
    }

    /// Directional derivative of every node along `dir`, linearized at `primal`.
    pub fn tangent(&self, params: &[f64], primal: &[Tensor], dir: Tensor) -> Vec<Tensor> {
        let mut tangents: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let t = match *node {
                Node::Input => dir.clone(),
                Node::Conv { layer, src } => self.layers[layer].forward(params, &tangents[src]),
                Node::Relu { src } => {
                    let mut t = tangents[src].clone();
                    for (v, p) in t.data.iter_mut().zip(&primal[i].data) {
                        if *p <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    t
                }
                Node::Add { a, b } => {
                    let mut t = tangents[a].clone();
                    t.add_assign(&tangents[b]);
                    t
                }
            };
            tangents.push(t);
        }
        tangents
    }

    /// Reverse pass from an output seed.
    ///
    /// Rectifier masks come from `primal`. Weight gradients are accumulated into
    /// `grad` using `stream` as the forward activations (`primal` itself for an
    /// ordinary backward pass, or a tangent trace for its adjoint). Returns the
    /// input gradient when `want_input` is set.
    pub fn reverse(
        &self,
        params: &[f64],
        primal: &[Tensor],
        stream: &[Tensor],
        seed: Tensor,
        mut grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Tensor> {
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        *adj.last_mut().expect("non-empty graph") = Some(seed);
        let accumulate = |slot: &mut Option<Tensor>, t: Tensor| match slot {
            Some(acc) => acc.add_assign(&t),
            None => *slot = Some(t),
        };
        let mut input_grad = None;
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            match self.nodes[i] {
                Node::Input => input_grad = Some(g),
                Node::Conv { layer, src } => {
                    let l = &self.layers[layer];
                    if let Some(grad) = grad.as_deref_mut() {
                        l.backward_weight(&stream[src], &g, grad);
                    }
                    if want_input || !matches!(self.nodes[src], Node::Input) {
                        let gx = l.backward_input(params, &g);
                        accumulate(&mut adj[src], gx);
                    }
                }
                Node::Relu { src } => {
                    let mut g = g;
                    for (v, p) in g.data.iter_mut().zip(&primal[i].data) {
                        if *p <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    accumulate(&mut adj[src], g);
                }
                Node::Add { a, b } => {
                    accumulate(&mut adj[b], g.clone());
                    accumulate(&mut adj[a], g);
                }
            }
        }
        if want_input {
            input_grad
        } else {
            None
        }
    }
}
