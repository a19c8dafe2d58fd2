//! The recognition network: GCN+TCN backbone, action decomposition, relation
//! reconstruction, and a linear classifier head.
//!
//! Shapes per sample:
//!
//! | stage | shape |
//! |---|---|
//! | input | 3 frames × 31 nodes × 2 |
//! | backbone output `X_B` | 31 × C1 |
//! | map matrix per component | N_f × N_a |
//! | action features `F_A` | 3·N_a × C1 |
//! | relation features `F'` | 3·N_a × C2 |
//! | action weights `W` | 3·N_a × 1 |
//! | expression feature | 1 × C1 |
//! | logits | 1 × K |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Bindings, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::landmark_data::NUM_FRAMES;
use crate::st_graph::{normalize_symmetric, subgraphs, Component, NodeSelection, StGraph, SubGraph};

pub const INPUT_CHANNELS: usize = 2;
const TEMPORAL_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of each backbone layer; the last entry is C1. Every
    /// layer but the last pads in time, the last collapses the frame axis.
    pub backbone_channels: Vec<usize>,
    /// Action features per facial component (N_a).
    pub n_actions: usize,
    /// Relation-mixer channels (C2).
    pub c2: usize,
    pub num_classes: usize,
    /// Rescale action weights to sum to one.
    pub normalize_weights: bool,
    /// Use one decomposition parameter set for all three components.
    pub share_adm_params: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 16],
            n_actions: 3,
            c2: 16,
            num_classes: 5,
            normalize_weights: true,
            share_adm_params: false,
        }
    }
}

impl ModelConfig {
    /// C1, the backbone's output width.
    pub fn c1(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&0)
    }

    pub fn with_c1(mut self, c1: usize) -> Self {
        self.backbone_channels = vec![c1; self.backbone_channels.len().max(1)];
        self
    }

    pub fn num_actions_total(&self) -> usize {
        3 * self.n_actions
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone needs at least one layer of positive width".into()));
        }
        if self.n_actions < 2 {
            return Err(Error::Config(format!("n_actions must be >= 2, got {}", self.n_actions)));
        }
        if self.c2 < 1 {
            return Err(Error::Config("c2 must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BackboneOnly,
    BackboneAdm,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::BackboneOnly, Variant::BackboneAdm, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::BackboneOnly => "backbone",
            Variant::BackboneAdm => "backbone + ADM",
            Variant::Full => "backbone + ADM + RRM",
        }
    }

    pub fn has_actions(self) -> bool {
        self != Variant::BackboneOnly
    }

    pub fn has_weights(self) -> bool {
        self == Variant::Full
    }
}

/// Handles to one sample's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `1 × K`.
    pub logits: Var,
    pub x_b: Var,
    /// Row-stochastic map matrices, eyebrow/nose/mouth.
    pub map_matrices: Option<[Var; 3]>,
    pub f_a: Option<Var>,
    /// `3·N_a × 1`.
    pub w: Option<Var>,
    pub f_me: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct DereModel {
    config: ModelConfig,
    selection: NodeSelection,
    subgraphs: Vec<SubGraph>,
    relation_adjacency: Tensor,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive extents")
}

/// Complete graph over `n` nodes with its self-loops, plus the usual `+I`,
/// symmetrically normalized. Each node weighs itself twice as much as any
/// other, so aggregation does not erase node identity.
pub fn relation_adjacency(n: usize) -> Tensor {
    let mut a = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        a.set(i, i, 2.0);
    }
    normalize_symmetric(a)
}

impl DereModel {
    pub fn new(config: ModelConfig, selection: NodeSelection) -> Result<Self> {
        config.validate()?;
        selection.validate()?;
        Ok(Self {
            relation_adjacency: relation_adjacency(config.num_actions_total()),
            subgraphs: subgraphs(&selection),
            config,
            selection,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn selection(&self) -> &NodeSelection {
        &self.selection
    }

    pub fn subgraphs(&self) -> &[SubGraph] {
        &self.subgraphs
    }

    pub fn relation_adjacency(&self) -> &Tensor {
        &self.relation_adjacency
    }

    /// Parameter-name prefix of a component's decomposition mapper.
    pub fn adm_prefix(&self, c: Component) -> String {
        if self.config.share_adm_params {
            "adm.shared".into()
        } else {
            format!("adm.{}", c.name())
        }
    }

    /// Glorot-uniform weights and zero biases, deterministic per seed.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let add = |store: &mut ParamStore, name: String, t: Tensor| {
            store.insert(name, t).expect("parameter names are unique");
        };
        let c1 = self.config.c1();

        let mut c_in = INPUT_CHANNELS;
        for (l, &c_out) in self.config.backbone_channels.iter().enumerate() {
            add(&mut store, format!("backbone.{l}.gc.weight"), glorot(&mut rng, c_in, c_out));
            add(
                &mut store,
                format!("backbone.{l}.tc.weight"),
                glorot(&mut rng, TEMPORAL_WIDTH * c_out, c_out),
            );
            add(&mut store, format!("backbone.{l}.tc.bias"), Tensor::zeros(&[1, c_out]));
            c_in = c_out;
        }

        let prefixes: Vec<String> = if self.config.share_adm_params {
            vec![self.adm_prefix(Component::Eyebrow)]
        } else {
            Component::ALL.iter().map(|&c| self.adm_prefix(c)).collect()
        };
        for p in prefixes {
            add(&mut store, format!("{p}.gc.weight"), glorot(&mut rng, c1, c1));
            add(&mut store, format!("{p}.tc.weight"), glorot(&mut rng, c1, self.config.n_actions));
            add(&mut store, format!("{p}.tc.bias"), Tensor::zeros(&[1, self.config.n_actions]));
        }

        let c2 = self.config.c2;
        add(&mut store, "rrm.gc.weight".into(), glorot(&mut rng, c1, c2));
        add(&mut store, "rrm.tc.weight".into(), glorot(&mut rng, c2, c2));
        add(&mut store, "rrm.tc.bias".into(), Tensor::zeros(&[1, c2]));

        let k = self.config.num_classes;
        add(&mut store, "head.weight".into(), glorot(&mut rng, c1, k));
        add(&mut store, "head.bias".into(), Tensor::zeros(&[1, k]));
        store
    }

    /// `ReLU(Â X Θ)`.
    fn graph_conv(&self, tape: &mut Tape, adj: Var, x: Var, weight: Var) -> Result<Var> {
        let xw = tape.matmul(x, weight)?;
        let agg = tape.matmul(adj, xw)?;
        tape.relu(agg)
    }

    /// Width-1 temporal convolution, i.e. per-node channel mixing.
    fn pointwise(&self, tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = tape.matmul(x, weight)?;
        tape.add_bias(y, bias)
    }

    /// Per-frame graph convolution followed by a width-3 temporal convolution
    /// across frames, for every layer. Returns `X_B` (31 × C1).
    pub fn backbone_forward(&self, tape: &mut Tape, params: &Bindings, graph: &StGraph) -> Result<Var> {
        let shape = graph.node_features.shape();
        if shape != [NUM_FRAMES, self.selection.len(), INPUT_CHANNELS] {
            return Err(Error::shape(
                "backbone_forward",
                format!("node features {shape:?}, expected [3, {}, 2]", self.selection.len()),
            ));
        }
        let n = self.selection.len();
        let adj = tape.constant(graph.adjacency.clone());
        let mut frames: Vec<Var> = (0..NUM_FRAMES).map(|t| tape.constant(graph.frame(t))).collect();

        let layers = self.config.backbone_channels.len();
        for (l, &c_out) in self.config.backbone_channels.iter().enumerate() {
            let gw = params.get(&format!("backbone.{l}.gc.weight"))?;
            let tw = params.get(&format!("backbone.{l}.tc.weight"))?;
            let tb = params.get(&format!("backbone.{l}.tc.bias"))?;

            let spatial = frames
                .iter()
                .map(|&x| self.graph_conv(tape, adj, x, gw))
                .collect::<Result<Vec<_>>>()?;

            let last = l + 1 == layers;
            let zero = tape.constant(Tensor::zeros(&[n, c_out]));
            let at = |t: isize| -> Var {
                usize::try_from(t)
                    .ok()
                    .and_then(|t| spatial.get(t).copied())
                    .unwrap_or(zero)
            };
            // `valid` keeps only the centre frame; `same` keeps all three.
            let centres: Vec<isize> = if last { vec![1] } else { vec![0, 1, 2] };
            frames = centres
                .into_iter()
                .map(|t| {
                    let window = tape.concat_cols(&[at(t - 1), at(t), at(t + 1)])?;
                    self.pointwise(tape, window, tw, tb)
                })
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(frames[0])
    }

    /// Maps each component's rows of `X_B` to `N_a` action features. Returns
    /// the three map matrices and `F_A`.
    pub fn adm_forward(&self, tape: &mut Tape, params: &Bindings, x_b: Var) -> Result<([Var; 3], Var)> {
        let expected = [self.selection.len(), self.config.c1()];
        if tape.shape(x_b) != expected {
            return Err(Error::shape(
                "adm_forward",
                format!("X_B {:?}, expected {expected:?}", tape.shape(x_b)),
            ));
        }
        let mut maps = Vec::with_capacity(3);
        let mut actions = Vec::with_capacity(3);
        for sg in &self.subgraphs {
            let prefix = self.adm_prefix(sg.component);
            let x_o = tape.gather_rows(x_b, &sg.nodes)?;
            let adj = tape.constant(sg.adjacency.clone());
            let h = self.graph_conv(
                tape,
                adj,
                x_o,
                params.get(&format!("{prefix}.gc.weight"))?,
            )?;
            let logits = self.pointwise(
                tape,
                h,
                params.get(&format!("{prefix}.tc.weight"))?,
                params.get(&format!("{prefix}.tc.bias"))?,
            )?;
            let map = tape.softmax_rows(logits)?;
            check_row_stochastic(tape.value(map))?;
            let map_t = tape.transpose(map)?;
            actions.push(tape.matmul(map_t, x_o)?);
            maps.push(map);
        }
        let f_a = tape.concat_rows(&actions)?;
        Ok(([maps[0], maps[1], maps[2]], f_a))
    }

    /// Computes action weights from the relation features and pools the
    /// action features with them. Returns `(F_ME, W)`.
    pub fn rrm_forward(&self, tape: &mut Tape, params: &Bindings, f_a: Var) -> Result<(Var, Var)> {
        let n = self.config.num_actions_total();
        let expected = [n, self.config.c1()];
        if tape.shape(f_a) != expected {
            return Err(Error::shape(
                "rrm_forward",
                format!("F_A {:?}, expected {expected:?}", tape.shape(f_a)),
            ));
        }
        let adj = tape.constant(self.relation_adjacency.clone());
        let h = self.graph_conv(
            tape,
            adj,
            f_a,
            params.get("rrm.gc.weight")?,
        )?;
        let relation = self.pointwise(tape, h, params.get("rrm.tc.weight")?, params.get("rrm.tc.bias")?)?;
        let raw = tape.l1_rowsum(relation)?;

        let w = if !self.config.normalize_weights {
            raw
        } else if tape.value(raw).data().iter().sum::<f64>() > 0.0 {
            tape.normalize_sum(raw)?
        } else {
            log::warn!("relation features are all zero; using uniform action weights");
            tape.constant(Tensor::full(&[n, 1], 1.0 / n as f64))
        };
        let w_t = tape.transpose(w)?;
        let f_me = tape.matmul(w_t, f_a)?;
        Ok((f_me, w))
    }

    /// Affine map from a `1 × C1` feature to `1 × K` logits.
    pub fn classify(&self, tape: &mut Tape, params: &Bindings, feature: Var) -> Result<Var> {
        self.pointwise(tape, feature, params.get("head.weight")?, params.get("head.bias")?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bindings,
        graph: &StGraph,
        variant: Variant,
    ) -> Result<ForwardOutput> {
        let x_b = self.backbone_forward(tape, params, graph)?;
        let mut out = ForwardOutput {
            logits: x_b,
            x_b,
            map_matrices: None,
            f_a: None,
            w: None,
            f_me: None,
        };
        let pooled = match variant {
            Variant::BackboneOnly => tape.mean_rows(x_b)?,
            Variant::BackboneAdm | Variant::Full => {
                let (maps, f_a) = self.adm_forward(tape, params, x_b)?;
                out.map_matrices = Some(maps);
                out.f_a = Some(f_a);
                if variant == Variant::Full {
                    let (f_me, w) = self.rrm_forward(tape, params, f_a)?;
                    out.w = Some(w);
                    out.f_me = Some(f_me);
                    f_me
                } else {
                    tape.mean_rows(f_a)?
                }
            }
        };
        out.logits = self.classify(tape, params, pooled)?;
        Ok(out)
    }

    /// Logits for one graph without recording gradients.
    pub fn predict(&self, params: &ParamStore, graph: &StGraph, variant: Variant) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind_constants(&mut tape);
        let out = self.forward(&mut tape, &bound, graph, variant)?;
        Ok(tape.value(out.logits).data().to_vec())
    }
}

fn check_row_stochastic(m: &Tensor) -> Result<()> {
    for i in 0..m.rows() {
        let s: f64 = m.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!("map matrix row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// One line of `model inspect` output.
#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    /// `backbone.<layer>`, `adm.<component>`, `rrm` or `head`.
    pub module: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

pub fn inspect(params: &ParamStore) -> Vec<ParamSummary> {
    params
        .iter()
        .map(|(name, p)| ParamSummary {
            module: {
                let parts: Vec<&str> = name.split('.').collect();
                let depth = if matches!(parts[0], "backbone" | "adm") { 2 } else { 1 };
                parts[..depth.min(parts.len())].join(".")
            },
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            count: p.value.numel(),
        })
        .collect()
}
