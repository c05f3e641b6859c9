//! The full classifier: learned feature mapping, k-NN graph, T edge-featured
//! message-passing blocks, max-pool readout with a fused skip block, and a
//! prediction head. Forward caches everything reverse mode needs; backward
//! produces a [`GradBundle`] shaped exactly like [`ModelParams`].
//!
//! The neighbor graph is built once per forward pass and reused by every
//! block. Neighbor selection is piecewise constant in the parameters, so it
//! contributes no gradient; the mapping network trains through the initial
//! edge features and, when enabled, the stress term.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knn::{knn_kdtree, DirectedGraph, GraphError};
use crate::nn::{Mlp, MlpTape, NnError};
use crate::stress::StressGrad;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("width chain broken at {place}: expected {expected:?}, found {found:?}")]
    WidthChain {
        place: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("bad dimension: {0}")]
    BadDims(String),
    #[error("input has {found} columns, model expects {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("cloud has {n} points, need more than k = {k}")]
    TooFewPoints { n: usize, k: usize },
    #[error("caches do not match this model or input: {0}")]
    StaleCaches(String),
    #[error("stress gradient required when stress weight is nonzero")]
    MissingStressGrad,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Which feature space the neighbor graph is built in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// k-NN over the learned mapping of the input features.
    Learned,
    /// k-NN over raw xyz; the mapping network is bypassed entirely.
    Baseline,
}

/// Hidden/output widths of every sub-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelWidths {
    /// Hidden width of the 2-layer mapping network.
    pub f_hidden: usize,
    /// Output width of every node-update network.
    pub node: usize,
    /// Output width of every edge-update network.
    pub edge: usize,
    /// Output width of the fusion layer in the readout.
    pub fusion: usize,
    /// Hidden width of the 2-layer prediction head.
    pub pred_hidden: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        ModelWidths {
            f_hidden: 16,
            node: 64,
            edge: 64,
            fusion: 256,
            pred_hidden: 128,
        }
    }
}

/// Complete shape description of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub mode: GraphMode,
    pub d_in: usize,
    pub d_graph: usize,
    pub d_classes: usize,
    pub t_blocks: usize,
    pub k: usize,
    pub widths: ModelWidths,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive: [(usize, &str); 9] = [
            (self.d_graph, "d_graph"),
            (self.t_blocks, "t_blocks"),
            (self.k, "k"),
            (self.widths.f_hidden, "f_hidden"),
            (self.widths.node, "node width"),
            (self.widths.edge, "edge width"),
            (self.widths.fusion, "fusion width"),
            (self.widths.pred_hidden, "pred_hidden"),
            (self.d_classes, "d_classes"),
        ];
        for (value, name) in positive {
            if value == 0 {
                return Err(ModelError::BadDims(format!("{name} must be positive")));
            }
        }
        if self.d_in < 3 {
            return Err(ModelError::BadDims(format!(
                "d_in must be at least 3 (xyz), got {}",
                self.d_in
            )));
        }
        if self.d_classes < 2 {
            return Err(ModelError::BadDims(format!(
                "d_classes must be at least 2, got {}",
                self.d_classes
            )));
        }
        if self.mode == GraphMode::Baseline && self.d_graph != 3 {
            return Err(ModelError::BadDims(format!(
                "baseline mode requires d_graph = 3, got {}",
                self.d_graph
            )));
        }
        Ok(())
    }

    /// Width of the initial edge features: mapped_v concatenated with
    /// (mapped_w - mapped_v).
    pub fn e0_width(&self) -> usize {
        2 * self.d_graph
    }

    /// Node-state width entering block `t` (1-based).
    fn node_width_before(&self, t: usize) -> usize {
        if t == 1 {
            self.d_in
        } else {
            self.widths.node
        }
    }

    /// Edge-state width entering block `t` (1-based).
    fn edge_width_before(&self, t: usize) -> usize {
        if t == 1 {
            self.e0_width()
        } else {
            self.widths.edge
        }
    }

    fn edge_mlp_dims(&self, t: usize) -> Vec<usize> {
        vec![
            self.edge_width_before(t) + 2 * self.node_width_before(t),
            self.widths.edge,
            self.widths.edge,
        ]
    }

    fn node_mlp_dims(&self, t: usize) -> Vec<usize> {
        vec![
            self.node_width_before(t) + self.widths.edge,
            self.widths.node,
            self.widths.node,
        ]
    }

    fn f_dims(&self) -> Vec<usize> {
        vec![self.d_in, self.widths.f_hidden, self.d_graph]
    }

    /// Input width of the fusion layer: the whole node-state history.
    pub fn readout_in(&self) -> usize {
        self.t_blocks * self.widths.node
    }

    /// The skip connection is identity when widths already agree, a learned
    /// projection otherwise.
    pub fn needs_skip_projection(&self) -> bool {
        self.readout_in() != self.widths.fusion
    }

    fn p_dims(&self) -> Vec<usize> {
        vec![self.widths.fusion, self.widths.pred_hidden, self.d_classes]
    }
}

/// All trainable parameters. The same struct doubles as the gradient bundle
/// returned by [`backward`]; shapes always mirror the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Mapping network, input features to graph space.
    pub f: Mlp,
    /// Node-update networks, one per block.
    pub h: Vec<Mlp>,
    /// Edge-update networks, one per block.
    pub e: Vec<Mlp>,
    /// Fusion layer of the readout (single fully connected layer).
    pub g: Mlp,
    /// Learned skip projection, present only when history and fusion widths
    /// differ. Applied without bias.
    pub skip: Option<Array2<f64>>,
    /// Prediction head.
    pub p: Mlp,
}

pub type GradBundle = ModelParams;

impl ModelParams {
    /// He-uniform initialization of every sub-network.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self, ModelError> {
        dims.validate()?;
        let f = Mlp::he_init(&dims.f_dims(), rng);
        let mut h = Vec::with_capacity(dims.t_blocks);
        let mut e = Vec::with_capacity(dims.t_blocks);
        for t in 1..=dims.t_blocks {
            e.push(Mlp::he_init(&dims.edge_mlp_dims(t), rng));
            h.push(Mlp::he_init(&dims.node_mlp_dims(t), rng));
        }
        let g = Mlp::he_init(&[dims.readout_in(), dims.widths.fusion], rng);
        let skip = if dims.needs_skip_projection() {
            let bound = (6.0 / dims.readout_in() as f64).sqrt();
            Some(Array2::from_shape_fn(
                (dims.widths.fusion, dims.readout_in()),
                |_| rng.gen_range(-bound..bound),
            ))
        } else {
            None
        };
        let p = Mlp::he_init(&dims.p_dims(), rng);
        let params = ModelParams { dims, f, h, e, g, skip, p };
        params.validate()?;
        Ok(params)
    }

    /// Zero bundle with this model's shapes, used to accumulate gradients.
    pub fn zeros(dims: ModelDims) -> Result<Self, ModelError> {
        dims.validate()?;
        let f = Mlp::zeros(&dims.f_dims());
        let mut h = Vec::with_capacity(dims.t_blocks);
        let mut e = Vec::with_capacity(dims.t_blocks);
        for t in 1..=dims.t_blocks {
            e.push(Mlp::zeros(&dims.edge_mlp_dims(t)));
            h.push(Mlp::zeros(&dims.node_mlp_dims(t)));
        }
        let g = Mlp::zeros(&[dims.readout_in(), dims.widths.fusion]);
        let skip = dims
            .needs_skip_projection()
            .then(|| Array2::zeros((dims.widths.fusion, dims.readout_in())));
        let p = Mlp::zeros(&dims.p_dims());
        Ok(ModelParams { dims, f, h, e, g, skip, p })
    }

    /// Verify every sub-network against the width chain. Construction through
    /// [`ModelParams::init`] always passes; checkpoints are re-verified here.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.dims.validate()?;
        let check = |place: &'static str, found: Vec<usize>, expected: Vec<usize>| {
            if found == expected {
                Ok(())
            } else {
                Err(ModelError::WidthChain { place, expected, found })
            }
        };
        check("mapping network", self.f.dims(), self.dims.f_dims())?;
        if self.h.len() != self.dims.t_blocks || self.e.len() != self.dims.t_blocks {
            return Err(ModelError::BadDims(format!(
                "expected {} blocks, found {} node and {} edge networks",
                self.dims.t_blocks,
                self.h.len(),
                self.e.len()
            )));
        }
        for t in 1..=self.dims.t_blocks {
            check("edge update", self.e[t - 1].dims(), self.dims.edge_mlp_dims(t))?;
            check("node update", self.h[t - 1].dims(), self.dims.node_mlp_dims(t))?;
        }
        check(
            "fusion layer",
            self.g.dims(),
            vec![self.dims.readout_in(), self.dims.widths.fusion],
        )?;
        match (&self.skip, self.dims.needs_skip_projection()) {
            (None, false) => {}
            (Some(m), true) => {
                let found = vec![m.nrows(), m.ncols()];
                let expected = vec![self.dims.widths.fusion, self.dims.readout_in()];
                check("skip projection", found, expected)?;
            }
            (Some(_), false) => {
                return Err(ModelError::BadDims(
                    "skip projection present but widths already match".into(),
                ))
            }
            (None, true) => {
                return Err(ModelError::BadDims(
                    "skip projection missing but history and fusion widths differ".into(),
                ))
            }
        }
        check("prediction head", self.p.dims(), self.dims.p_dims())?;
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Accumulate a gradient bundle of identical shape.
    pub fn add_assign(&mut self, other: &ModelParams) {
        self.f.add_assign(&other.f);
        for (a, b) in self.h.iter_mut().zip(&other.h) {
            a.add_assign(b);
        }
        for (a, b) in self.e.iter_mut().zip(&other.e) {
            a.add_assign(b);
        }
        self.g.add_assign(&other.g);
        if let (Some(a), Some(b)) = (self.skip.as_mut(), other.skip.as_ref()) {
            *a += b;
        }
        self.p.add_assign(&other.p);
    }

    /// Flat parameter views in a fixed order (F, then per block E then H,
    /// then G, skip, P). Gradient bundles emit the identical order, which is
    /// what ties the optimizer state to the right tensors.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.f.param_slices();
        for t in 0..self.dims.t_blocks {
            out.extend(self.e[t].param_slices());
            out.extend(self.h[t].param_slices());
        }
        out.extend(self.g.param_slices());
        if let Some(skip) = &self.skip {
            out.push(skip.as_slice().expect("standard layout"));
        }
        out.extend(self.p.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.f.param_slices_mut();
        for (e, h) in self.e.iter_mut().zip(self.h.iter_mut()) {
            out.extend(e.param_slices_mut());
            out.extend(h.param_slices_mut());
        }
        out.extend(self.g.param_slices_mut());
        if let Some(skip) = self.skip.as_mut() {
            out.push(skip.as_slice_mut().expect("standard layout"));
        }
        out.extend(self.p.param_slices_mut());
        out
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    /// All parameters flattened in [`ModelParams::param_slices`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for slice in self.param_slices() {
            out.extend_from_slice(slice);
        }
        out
    }

    /// Overwrite every parameter from a flat vector produced by
    /// [`ModelParams::to_flat`] on an identically shaped model.
    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.n_params() {
            return Err(ModelError::BadDims(format!(
                "flat vector has {} entries, model has {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        }
        Ok(())
    }
}

/// Map input features into graph space. Baseline mode bypasses the network
/// and returns the xyz columns; no tape exists in that case.
pub fn map_features(
    f: &Mlp,
    input: &Array2<f64>,
    mode: GraphMode,
) -> Result<(Array2<f64>, Option<MlpTape>), ModelError> {
    match mode {
        GraphMode::Baseline => {
            if input.ncols() < 3 {
                return Err(ModelError::InputWidth { expected: 3, found: input.ncols() });
            }
            Ok((input.slice(s![.., 0..3]).to_owned(), None))
        }
        GraphMode::Learned => {
            let (mapped, tape) = f.forward(input)?;
            Ok((mapped, Some(tape)))
        }
    }
}

/// Initial features of each directed edge (w -> v): the target's mapped
/// coordinates followed by the neighbor's offset from them.
pub fn initial_edge_features(
    mapped: &Array2<f64>,
    graph: &DirectedGraph,
) -> Result<Array2<f64>, ModelError> {
    if mapped.nrows() != graph.n_nodes() {
        return Err(ModelError::StaleCaches(format!(
            "graph has {} nodes, mapped features have {} rows",
            graph.n_nodes(),
            mapped.nrows()
        )));
    }
    let d = mapped.ncols();
    let mut e0 = Array2::zeros((graph.n_edges(), 2 * d));
    for r in 0..graph.n_edges() {
        let v = graph.edge_target(r);
        let w = graph.edge_source(r) as usize;
        for c in 0..d {
            e0[[r, c]] = mapped[[v, c]];
            e0[[r, d + c]] = mapped[[w, c]] - mapped[[v, c]];
        }
    }
    Ok(e0)
}

/// Per-node sum of incoming edge features, in neighbor-rank order.
pub fn aggregate_messages(
    e_t: &Array2<f64>,
    graph: &DirectedGraph,
) -> Result<Array2<f64>, ModelError> {
    if e_t.nrows() != graph.n_edges() {
        return Err(ModelError::StaleCaches(format!(
            "graph has {} edges, edge features have {} rows",
            graph.n_edges(),
            e_t.nrows()
        )));
    }
    let mut m = Array2::zeros((graph.n_nodes(), e_t.ncols()));
    for r in 0..graph.n_edges() {
        let v = graph.edge_target(r);
        let mut row = m.row_mut(v);
        row += &e_t.row(r);
    }
    Ok(m)
}

/// One node update: the MLP applied to (previous state, message).
pub fn node_update(
    h_mlp: &Mlp,
    h_prev: &Array2<f64>,
    messages: &Array2<f64>,
) -> Result<(Array2<f64>, MlpTape), ModelError> {
    let joined = concatenate(Axis(1), &[h_prev.view(), messages.view()])
        .map_err(|e| ModelError::StaleCaches(e.to_string()))?;
    Ok(h_mlp.forward(&joined)?)
}

/// One edge update: the MLP applied to (previous edge state, source node
/// state, target node state) for every directed edge (w -> v).
pub fn edge_update(
    e_mlp: &Mlp,
    e_prev: &Array2<f64>,
    h_prev: &Array2<f64>,
    graph: &DirectedGraph,
) -> Result<(Array2<f64>, MlpTape), ModelError> {
    if e_prev.nrows() != graph.n_edges() || h_prev.nrows() != graph.n_nodes() {
        return Err(ModelError::StaleCaches(
            "edge or node state rows disagree with the graph".into(),
        ));
    }
    let (we, wh) = (e_prev.ncols(), h_prev.ncols());
    let mut joined = Array2::zeros((graph.n_edges(), we + 2 * wh));
    for r in 0..graph.n_edges() {
        let v = graph.edge_target(r);
        let w = graph.edge_source(r) as usize;
        joined.slice_mut(s![r, 0..we]).assign(&e_prev.row(r));
        joined.slice_mut(s![r, we..we + wh]).assign(&h_prev.row(w));
        joined.slice_mut(s![r, we + wh..]).assign(&h_prev.row(v));
    }
    Ok(e_mlp.forward(&joined)?)
}

/// Intermediates of [`readout`] kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ReadoutCache {
    /// Node-state history laid side by side, N x (T * node width).
    pub history: Array2<f64>,
    /// Per-node fused vectors after the skip connection.
    pub fused: Array2<f64>,
    /// Winning node per fused coordinate (first index on ties).
    pub argmax: Vec<usize>,
    pub tape: MlpTape,
}

/// Fusion layer plus skip per node, then coordinatewise max over nodes.
pub fn readout(
    g: &Mlp,
    skip: Option<&Array2<f64>>,
    h_history: &[Array2<f64>],
) -> Result<(Array1<f64>, ReadoutCache), ModelError> {
    if h_history.is_empty() {
        return Err(ModelError::BadDims("readout needs at least one block".into()));
    }
    let n = h_history[0].nrows();
    if n == 0 {
        return Err(ModelError::TooFewPoints { n: 0, k: 0 });
    }
    let views: Vec<_> = h_history.iter().map(|h| h.view()).collect();
    let history =
        concatenate(Axis(1), &views).map_err(|e| ModelError::StaleCaches(e.to_string()))?;
    let (linear, tape) = g.forward(&history)?;
    let mut fused = linear;
    match skip {
        Some(proj) => fused += &history.dot(&proj.t()),
        None => {
            if history.ncols() != fused.ncols() {
                return Err(ModelError::WidthChain {
                    place: "identity skip",
                    expected: vec![fused.ncols()],
                    found: vec![history.ncols()],
                });
            }
            fused += &history;
        }
    }
    let width = fused.ncols();
    let mut pooled = Array1::zeros(width);
    let mut argmax = vec![0usize; width];
    for j in 0..width {
        let mut best = fused[[0, j]];
        let mut best_v = 0;
        for v in 1..n {
            if fused[[v, j]] > best {
                best = fused[[v, j]];
                best_v = v;
            }
        }
        pooled[j] = best;
        argmax[j] = best_v;
    }
    Ok((pooled, ReadoutCache { history, fused, argmax, tape }))
}

/// Everything the reverse pass needs, produced by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCaches {
    pub dims: ModelDims,
    /// h0: the raw per-point inputs.
    pub input: Array2<f64>,
    /// Graph-space coordinates, N x d_graph.
    pub mapped: Array2<f64>,
    pub f_tape: Option<MlpTape>,
    pub graph: DirectedGraph,
    pub e0: Array2<f64>,
    /// h_states[t] for t = 0..=T; index 0 is the input.
    pub h_states: Vec<Array2<f64>>,
    /// e_states[t - 1] is the output of block t's edge update.
    pub e_states: Vec<Array2<f64>>,
    pub h_tapes: Vec<MlpTape>,
    pub e_tapes: Vec<MlpTape>,
    pub readout: ReadoutCache,
    pub pooled: Array1<f64>,
    pub p_tape: MlpTape,
    pub logits: Array1<f64>,
}

/// Full forward pass over one cloud's input matrix (N x d_in).
pub fn forward(params: &ModelParams, input: &Array2<f64>) -> Result<ForwardCaches, ModelError> {
    let dims = params.dims;
    if input.ncols() != dims.d_in {
        return Err(ModelError::InputWidth { expected: dims.d_in, found: input.ncols() });
    }
    let n = input.nrows();
    if n <= dims.k {
        return Err(ModelError::TooFewPoints { n, k: dims.k });
    }

    let (mapped, f_tape) = map_features(&params.f, input, dims.mode)?;
    let graph = knn_kdtree(&mapped, dims.k)?;
    let e0 = initial_edge_features(&mapped, &graph)?;

    let mut h_states = vec![input.to_owned()];
    let mut e_states = Vec::with_capacity(dims.t_blocks);
    let mut h_tapes = Vec::with_capacity(dims.t_blocks);
    let mut e_tapes = Vec::with_capacity(dims.t_blocks);
    for t in 1..=dims.t_blocks {
        let e_prev = if t == 1 { &e0 } else { &e_states[t - 2] };
        let (e_t, e_tape) = edge_update(&params.e[t - 1], e_prev, &h_states[t - 1], &graph)?;
        let m_t = aggregate_messages(&e_t, &graph)?;
        let (h_t, h_tape) = node_update(&params.h[t - 1], &h_states[t - 1], &m_t)?;
        e_states.push(e_t);
        h_states.push(h_t);
        e_tapes.push(e_tape);
        h_tapes.push(h_tape);
    }

    let (pooled, readout_cache) = readout(&params.g, params.skip.as_ref(), &h_states[1..])?;
    let pooled_row = pooled
        .clone()
        .into_shape_with_order((1, pooled.len()))
        .map_err(|e| ModelError::StaleCaches(e.to_string()))?;
    let (logit_rows, p_tape) = params.p.forward(&pooled_row)?;
    let logits = logit_rows.row(0).to_owned();

    Ok(ForwardCaches {
        dims,
        input: input.to_owned(),
        mapped,
        f_tape,
        graph,
        e0,
        h_states,
        e_states,
        h_tapes,
        e_tapes,
        readout: readout_cache,
        pooled,
        p_tape,
        logits,
    })
}

/// Reverse pass. `dlogits` is the task-loss gradient at the logits;
/// `stress_weight` scales `stress_grad`'s contribution to the mapping (use
/// the loss's effective per-cloud weight, e.g. gamma / batch size).
pub fn backward(
    params: &ModelParams,
    caches: &ForwardCaches,
    dlogits: &Array1<f64>,
    stress_weight: f64,
    stress_grad: Option<&StressGrad>,
) -> Result<GradBundle, ModelError> {
    let dims = params.dims;
    if caches.dims != dims {
        return Err(ModelError::StaleCaches("caches built for different dims".into()));
    }
    if dlogits.len() != dims.d_classes {
        return Err(ModelError::StaleCaches(format!(
            "dlogits has {} entries, model emits {}",
            dlogits.len(),
            dims.d_classes
        )));
    }
    if stress_weight != 0.0 && dims.mode == GraphMode::Learned && stress_grad.is_none() {
        return Err(ModelError::MissingStressGrad);
    }
    let mut grads = ModelParams::zeros(dims)?;
    let n = caches.input.nrows();
    let graph = &caches.graph;

    // Prediction head.
    let dlogits_row = dlogits
        .clone()
        .into_shape_with_order((1, dims.d_classes))
        .map_err(|e| ModelError::StaleCaches(e.to_string()))?;
    let (dpooled_row, p_grads) = params.p.backward(&caches.p_tape, &dlogits_row)?;
    grads.p = p_grads;

    // Max pool routes each coordinate's gradient to its winning node.
    let mut dfused = Array2::zeros((n, dims.widths.fusion));
    for (j, &v) in caches.readout.argmax.iter().enumerate() {
        dfused[[v, j]] += dpooled_row[[0, j]];
    }

    // Fusion layer plus skip.
    let (mut dhistory, g_grads) = params.g.backward(&caches.readout.tape, &dfused)?;
    grads.g = g_grads;
    match &params.skip {
        Some(proj) => {
            dhistory += &dfused.dot(proj);
            let skip_grad = grads.skip.as_mut().expect("shapes mirror params");
            general_mat_mul(1.0, &dfused.t(), &caches.readout.history, 1.0, skip_grad);
        }
        None => dhistory += &dfused,
    }

    // Node-state gradient accumulators, t = 0..=T. The history split seeds
    // t = 1..=T; message passing adds the rest on the way down.
    let mut dh: Vec<Array2<f64>> = (0..=dims.t_blocks)
        .map(|t| Array2::zeros((n, if t == 0 { dims.d_in } else { dims.widths.node })))
        .collect();
    for (t, dh_t) in dh.iter_mut().enumerate().skip(1) {
        let lo = (t - 1) * dims.widths.node;
        let hi = t * dims.widths.node;
        *dh_t += &dhistory.slice(s![.., lo..hi]);
    }
    let mut de0 = Array2::zeros((graph.n_edges(), dims.e0_width()));

    let mut de_next: Option<Array2<f64>> = None;
    for t in (1..=dims.t_blocks).rev() {
        // Node update: input was (h_prev, m_t).
        let (djoined_h, h_grads) = params.h[t - 1].backward(&caches.h_tapes[t - 1], &dh[t])?;
        grads.h[t - 1] = h_grads;
        let w_prev = dims.node_width_before(t);
        {
            let mut target = dh[t - 1].view_mut();
            target += &djoined_h.slice(s![.., 0..w_prev]);
        }
        let dm = djoined_h.slice(s![.., w_prev..]).to_owned();

        // Message aggregation fans dm back to every incoming edge; combine
        // with the contribution already flowing from block t+1's edge input.
        let mut de_t = de_next.take().unwrap_or_else(|| {
            Array2::zeros((graph.n_edges(), dims.widths.edge))
        });
        for r in 0..graph.n_edges() {
            let v = graph.edge_target(r);
            let mut row = de_t.row_mut(r);
            row += &dm.row(v);
        }

        // Edge update: input was (e_prev, h_w, h_v).
        let (djoined_e, e_grads) = params.e[t - 1].backward(&caches.e_tapes[t - 1], &de_t)?;
        grads.e[t - 1] = e_grads;
        let we = dims.edge_width_before(t);
        let wh = dims.node_width_before(t);
        let mut de_prev = Array2::zeros((graph.n_edges(), we));
        for r in 0..graph.n_edges() {
            let v = graph.edge_target(r);
            let w = graph.edge_source(r) as usize;
            {
                let mut row = de_prev.row_mut(r);
                row += &djoined_e.slice(s![r, 0..we]);
            }
            {
                let mut row = dh[t - 1].row_mut(w);
                row += &djoined_e.slice(s![r, we..we + wh]);
            }
            {
                let mut row = dh[t - 1].row_mut(v);
                row += &djoined_e.slice(s![r, we + wh..]);
            }
        }
        if t == 1 {
            de0 += &de_prev;
        } else {
            de_next = Some(de_prev);
        }
    }

    // Initial edge features: row r = (mapped_v, mapped_w - mapped_v).
    let d = dims.d_graph;
    let mut dmapped = Array2::zeros((n, d));
    for r in 0..graph.n_edges() {
        let v = graph.edge_target(r);
        let w = graph.edge_source(r) as usize;
        for c in 0..d {
            dmapped[[v, c]] += de0[[r, c]] - de0[[r, d + c]];
            dmapped[[w, c]] += de0[[r, d + c]];
        }
    }
    if stress_weight != 0.0 {
        if let Some(sg) = stress_grad {
            if sg.d_mapped.dim() != dmapped.dim() {
                return Err(ModelError::StaleCaches(
                    "stress gradient shape disagrees with mapped features".into(),
                ));
            }
            dmapped.scaled_add(stress_weight, &sg.d_mapped);
        }
    }

    // The mapping network only exists on the learned path; neighbor selection
    // itself is piecewise constant and contributes nothing.
    if dims.mode == GraphMode::Learned {
        let f_tape = caches
            .f_tape
            .as_ref()
            .ok_or_else(|| ModelError::StaleCaches("missing mapping tape".into()))?;
        let (_dinput, f_grads) = params.f.backward(f_tape, &dmapped)?;
        grads.f = f_grads;
    }
    Ok(grads)
}
