//! Parameterized layers built on [`Graph`] ops.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Init, ParamId, ParamStore};
use crate::nn::seq::SeqVar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, output_dim: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), &[input_dim, output_dim], Init::FanIn(input_dim)),
            bias: store.add(format!("{name}.bias"), &[output_dim], Init::Zeros),
            input_dim,
            output_dim,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize) -> Self {
        Self {
            // Rows are looked up, not multiplied; unit fan-in keeps entries in [-1, 1].
            table: store.add(format!("{name}.table"), &[vocab_size, dim], Init::FanIn(1)),
            vocab_size,
            dim,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, indices: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.gather(t, Rc::new(indices.to_vec()))
    }
}

/// Valid (unpadded) 1-d convolution over time.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel;
        Self {
            weight: store.add(format!("{name}.weight"), &[fan_in, out_channels], Init::FanIn(fan_in)),
            bias: store.add(format!("{name}.bias"), &[out_channels], Init::Zeros),
            kernel,
            stride,
            in_channels,
            out_channels,
        }
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| (len - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<SeqVar> {
        let lengths = x
            .lengths
            .iter()
            .map(|&l| {
                self.output_len(l).ok_or_else(|| {
                    Error::invalid(format!(
                        "sequence of length {l} shorter than conv kernel {}",
                        self.kernel
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = self.output_len(x.steps).unwrap();
        let cols = g.im2col(x.data, x.batch(), self.kernel, self.stride)?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.add_bias(g.matmul(cols, w)?, b)?;
        let out = SeqVar { data: y, lengths, steps };
        let data = g.mask_rows(out.data, out.mask())?;
        Ok(SeqVar { data, ..out })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

/// Single-direction GRU.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize) -> Self {
        Self {
            w_input: store.add(format!("{name}.w_input"), &[input_dim, 3 * hidden], Init::FanIn(input_dim)),
            b_input: store.add(format!("{name}.b_input"), &[3 * hidden], Init::Zeros),
            w_hidden: store.add(format!("{name}.w_hidden"), &[hidden, 3 * hidden], Init::FanIn(hidden)),
            b_hidden: store.add(format!("{name}.b_hidden"), &[3 * hidden], Init::Zeros),
            input_dim,
            hidden,
        }
    }

    /// Input projection for every row of `x` at once.
    pub fn project(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w_input);
        let b = g.param(store, self.b_input);
        g.add_bias(g.matmul(x, w)?, b)
    }

    pub fn step(
        &self,
        g: &Graph,
        store: &ParamStore,
        xp: Var,
        h: Var,
        mask: Rc<Vec<bool>>,
    ) -> Result<Var> {
        let wh = g.param(store, self.w_hidden);
        let bh = g.param(store, self.b_hidden);
        g.gru_cell(xp, h, wh, bh, mask)
    }

    /// Run over a whole sequence. Outputs on padded steps are zero; the
    /// backward direction starts at each item's own last valid step.
    pub fn run(&self, g: &Graph, store: &ParamStore, x: &SeqVar, reverse: bool) -> Result<SeqVar> {
        let b = x.batch();
        let xp = self.project(g, store, x.data)?;
        let mut h = g.input(Tensor::zeros(&[b, self.hidden]));
        let mut outs = vec![h; x.steps];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..x.steps).rev())
        } else {
            Box::new(0..x.steps)
        };
        for t in order {
            let xt = g.slice_rows(xp, t * b, b)?;
            h = self.step(g, store, xt, h, x.step_mask(t))?;
            outs[t] = h;
        }
        let stacked = g.concat_rows(&outs)?;
        let data = g.mask_rows(stacked, x.mask())?;
        Ok(SeqVar {
            data,
            lengths: x.lengths.clone(),
            steps: x.steps,
        })
    }
}

/// One GRU layer in a given direction; bidirectional output concatenates
/// forward then backward features.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub direction: Direction,
    pub forward: Option<GruCell>,
    pub backward: Option<GruCell>,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, direction: Direction) -> Self {
        let fwd = matches!(direction, Direction::Forward | Direction::Bidirectional)
            .then(|| GruCell::new(store, &format!("{name}.fwd"), input_dim, hidden));
        let bwd = matches!(direction, Direction::Backward | Direction::Bidirectional)
            .then(|| GruCell::new(store, &format!("{name}.bwd"), input_dim, hidden));
        Self {
            direction,
            forward: fwd,
            backward: bwd,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.direction {
            Direction::Bidirectional => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<SeqVar> {
        match (&self.forward, &self.backward) {
            (Some(f), Some(b)) => {
                let of = f.run(g, store, x, false)?;
                let ob = b.run(g, store, x, true)?;
                let data = g.concat_cols(&[of.data, ob.data])?;
                Ok(SeqVar { data, ..of })
            }
            (Some(f), None) => f.run(g, store, x, false),
            (None, Some(b)) => b.run(g, store, x, true),
            (None, None) => unreachable!(),
        }
    }
}

/// Stacked bidirectional GRUs; layer `k + 1` reads the concatenated
/// forward/backward output of layer `k`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub layers: Vec<GruLayer>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, num_layers: usize) -> Self {
        let layers = (0..num_layers)
            .map(|i| {
                let d = if i == 0 { input_dim } else { 2 * hidden };
                GruLayer::new(store, &format!("{name}.{i}"), d, hidden, Direction::Bidirectional)
            })
            .collect();
        Self {
            layers,
            input_dim,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        if self.layers.is_empty() {
            self.input_dim
        } else {
            2 * self.hidden
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<SeqVar> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(g, store, &h)?;
        }
        Ok(h)
    }
}

/// Learned weighted average over time: `s_t = u . tanh(W h_t + b)`,
/// weights are a masked softmax of `s`, output `sum_t w_t h_t`.
#[derive(Clone, Debug)]
pub struct VectorialAttention {
    pub proj: Linear,
    pub score: ParamId,
    pub dim: usize,
}

impl VectorialAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim),
            score: store.add(format!("{name}.score"), &[dim, 1], Init::FanIn(dim)),
            dim,
        }
    }

    pub fn weights(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<Var> {
        let hidden = g.tanh(self.proj.forward(g, store, x.data)?);
        let u = g.param(store, self.score);
        let s = g.matmul(hidden, u)?;
        g.seq_softmax(s, x.batch(), x.mask())
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<Var> {
        let w = self.weights(g, store, x)?;
        g.seq_weighted_sum(x.data, w, x.batch())
    }
}

/// Additive attention `e_t = v . tanh(W_s s + W_h h_t + b)`.
#[derive(Clone, Debug)]
pub struct BahdanauAttention {
    pub w_query: ParamId,
    pub w_key: Linear,
    pub v: ParamId,
    pub query_dim: usize,
    pub key_dim: usize,
    pub attn_dim: usize,
}

/// Encoder outputs with their precomputed key projections.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    pub values: SeqVar,
    pub keys: Var,
}

impl BahdanauAttention {
    pub fn new(store: &mut ParamStore, name: &str, query_dim: usize, key_dim: usize, attn_dim: usize) -> Self {
        Self {
            w_query: store.add(format!("{name}.w_query"), &[query_dim, attn_dim], Init::FanIn(query_dim)),
            w_key: Linear::new(store, &format!("{name}.w_key"), key_dim, attn_dim),
            v: store.add(format!("{name}.v"), &[attn_dim, 1], Init::FanIn(attn_dim)),
            query_dim,
            key_dim,
            attn_dim,
        }
    }

    pub fn memory(&self, g: &Graph, store: &ParamStore, values: &SeqVar) -> Result<AttentionMemory> {
        Ok(AttentionMemory {
            keys: self.w_key.forward(g, store, values.data)?,
            values: values.clone(),
        })
    }

    /// Returns `(context [B, D], weights [T * B, 1])`.
    pub fn attend(&self, g: &Graph, store: &ParamStore, query: Var, memory: &AttentionMemory) -> Result<(Var, Var)> {
        let b = memory.values.batch();
        let wq = g.param(store, self.w_query);
        let q = g.matmul(query, wq)?;
        let e = g.tanh(g.add_broadcast_time(memory.keys, q, b)?);
        let v = g.param(store, self.v);
        let scores = g.matmul(e, v)?;
        let w = g.seq_softmax(scores, b, memory.values.mask())?;
        let ctx = g.seq_weighted_sum(memory.values.data, w, b)?;
        Ok((ctx, w))
    }
}
