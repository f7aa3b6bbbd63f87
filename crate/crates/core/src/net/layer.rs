//! Parameters and the point transformer layer built on the autodiff tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::knn_neighbors;
use super::NetError;
use crate::autodiff::{Graph, RowMix, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// Registers every tensor on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }
}

/// Graph handles for a [`ParamStore`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform fan-in scaled initialization, bound `sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::new(fan_in, fan_out, (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// `x · W (+ b)` with `W` stored `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), he_uniform(rng, c_in, c_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, c_out)));
        Self { w, b, c_in, c_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Two linear layers with a rectifier between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_hid: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::init(store, &format!("{name}.0"), c_in, c_hid, true, rng),
            l2: Linear::init(store, &format!("{name}.1"), c_hid, c_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.l1.forward(g, p, x);
        let h = g.relu(h);
        self.l2.forward(g, p, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Independent softmax over neighbors for every channel.
    #[default]
    Vector,
    /// Channel-summed logits; one weight per neighbor shared by all channels.
    Scalar,
}

#[derive(Debug, Clone, Copy)]
pub struct PtLayerParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub mlp_pos: Mlp2,
    pub mlp_w: Mlp2,
    pub c_in: usize,
    pub c_out: usize,
}

impl PtLayerParams {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::init(store, &format!("{name}.wq"), c_in, c_out, false, rng),
            wk: Linear::init(store, &format!("{name}.wk"), c_in, c_out, false, rng),
            wv: Linear::init(store, &format!("{name}.wv"), c_in, c_out, false, rng),
            mlp_pos: Mlp2::init(store, &format!("{name}.pos"), 3, c_out, c_out, rng),
            mlp_w: Mlp2::init(store, &format!("{name}.attn"), c_out, c_out, c_out, rng),
            c_in,
            c_out,
        }
    }
}

/// Neighbor table plus the constant relative offsets `p_j − p_i`.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub k: usize,
    /// Flat `n×k`.
    pub index: Vec<usize>,
    /// `(n·k) × 3`.
    pub delta: Tensor,
}

impl Neighborhood {
    pub fn build(points: &[[f64; 3]], k: usize) -> Result<Self, NetError> {
        let index = knn_neighbors(points, k)?;
        Ok(Self::from_table(points, k, index))
    }

    pub fn from_table(points: &[[f64; 3]], k: usize, index: Vec<usize>) -> Self {
        assert_eq!(index.len(), points.len() * k);
        let mut delta = Vec::with_capacity(index.len() * 3);
        for (slot, &j) in index.iter().enumerate() {
            let i = slot / k;
            for a in 0..3 {
                delta.push(points[j][a] - points[i][a]);
            }
        }
        Self { k, delta: Tensor::new(index.len(), 3, delta), index }
    }

    pub fn len(&self) -> usize {
        self.index.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

pub struct PtLayerOutput {
    /// `n × C_out`.
    pub out: Var,
    /// `(n·k) × C_out` attention weights (columns repeat in scalar mode).
    pub attention: Var,
}

/// One point transformer layer: `x'_i = Σ_j α_ij ⊙ (v_j + γ_ij)` with
/// `α = softmax_j(MLP_w(k_j − q_i + γ_ij))`, `γ_ij = MLP_pos(p_j − p_i)`.
pub fn pt_layer_forward(
    g: &mut Graph,
    p: &Bound,
    params: &PtLayerParams,
    nb: &Neighborhood,
    x: Var,
    mode: AttentionMode,
) -> Result<PtLayerOutput, NetError> {
    let (n, c_in) = g.value(x).shape();
    if c_in != params.c_in || n != nb.len() {
        return Err(NetError::ShapeMismatch(format!(
            "layer expects {} points x {} channels, got {n} x {c_in}",
            nb.len(),
            params.c_in
        )));
    }
    let k = nb.k;
    let q = params.wq.forward(g, p, x);
    let kf = params.wk.forward(g, p, x);
    let vf = params.wv.forward(g, p, x);

    let gather_j = RowMix::gather(nb.index.clone());
    let gather_i = RowMix::gather((0..n * k).map(|slot| slot / k).collect());
    let kj = g.mix(kf, gather_j.clone());
    let vj = g.mix(vf, gather_j);
    let qi = g.mix(q, gather_i);

    let delta = g.constant(nb.delta.clone());
    let gamma = params.mlp_pos.forward(g, p, delta);

    let rel = g.sub(kj, qi);
    let rel = g.add(rel, gamma);
    let w = params.mlp_w.forward(g, p, rel);
    let attention = match mode {
        AttentionMode::Vector => g.group_softmax(w, k),
        AttentionMode::Scalar => {
            let s = g.sum_cols(w);
            let a = g.group_softmax(s, k);
            g.broadcast_cols(a, params.c_out)
        }
    };
    let values = g.add(vj, gamma);
    let weighted = g.mul(attention, values);
    let out = g.mix(weighted, RowMix::group_sum(n, k));
    Ok(PtLayerOutput { out, attention })
}
