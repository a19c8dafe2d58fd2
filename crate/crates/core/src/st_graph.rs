//! Key-landmark selection and the three-frame landmark graph.
//!
//! Nodes are ordered eyebrows, nose, mouth, each in landmark-index order, so
//! component parts are contiguous row blocks of any node-feature matrix.
//! Temporal links are implicit: node `i` in frame `t` corresponds to node `i`
//! in every other frame, and mixing across frames happens in the temporal
//! convolutions.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::landmark_data::{LandmarkSample, NUM_FRAMES};

pub const NUM_NODES: usize = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Eyebrow,
    Nose,
    Mouth,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Eyebrow, Component::Nose, Component::Mouth];

    pub fn name(self) -> &'static str {
        match self {
            Component::Eyebrow => "eyebrow",
            Component::Nose => "nose",
            Component::Mouth => "mouth",
        }
    }
}

/// The 31 selected landmarks with their component assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSelection {
    /// Indices into the 68-point layout, in node order.
    pub indices: Vec<usize>,
    pub component_of: Vec<Component>,
}

const EYEBROWS: std::ops::RangeInclusive<usize> = 17..=26;
const NOSE: std::ops::RangeInclusive<usize> = 27..=35;
const OUTER_LIP: std::ops::RangeInclusive<usize> = 48..=59;
const EYES: std::ops::RangeInclusive<usize> = 36..=47;

/// Landmark-index edges: contour chains per component plus one bridge per
/// adjacent component pair.
const EDGE_TEMPLATE: &[(usize, usize)] = &[
    // brows, joined at the inner ends
    (17, 18), (18, 19), (19, 20), (20, 21),
    (22, 23), (23, 24), (24, 25), (25, 26),
    (21, 22),
    // nose bridge, nostril base, bridge tip to base center
    (27, 28), (28, 29), (29, 30),
    (31, 32), (32, 33), (33, 34), (34, 35),
    (30, 33),
    // outer lip loop
    (48, 49), (49, 50), (50, 51), (51, 52), (52, 53), (53, 54),
    (54, 55), (55, 56), (56, 57), (57, 58), (58, 59), (59, 48),
    // bridges
    (21, 27),
    (33, 51),
];

pub fn default_selection() -> NodeSelection {
    let mut indices = Vec::with_capacity(NUM_NODES);
    let mut component_of = Vec::with_capacity(NUM_NODES);
    for (range, c) in [
        (EYEBROWS, Component::Eyebrow),
        (NOSE, Component::Nose),
        (OUTER_LIP, Component::Mouth),
    ] {
        for i in range {
            indices.push(i);
            component_of.push(c);
        }
    }
    NodeSelection {
        indices,
        component_of,
    }
}

impl NodeSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Node positions belonging to `c`, in node order.
    pub fn nodes_of(&self, c: Component) -> Vec<usize> {
        (0..self.len()).filter(|&n| self.component_of[n] == c).collect()
    }

    pub fn component_sizes(&self) -> [usize; 3] {
        Component::ALL.map(|c| self.nodes_of(c).len())
    }

    /// Node position of a landmark index, if selected.
    pub fn node_of_landmark(&self, landmark: usize) -> Option<usize> {
        self.indices.iter().position(|&i| i == landmark)
    }

    /// Node-position edges of the template restricted to this selection.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        EDGE_TEMPLATE
            .iter()
            .filter_map(|&(a, b)| Some((self.node_of_landmark(a)?, self.node_of_landmark(b)?)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.component_of.len() {
            return Err(Error::Config("selection indices and components differ in length".into()));
        }
        if self.indices.iter().any(|i| EYES.contains(i)) {
            return Err(Error::Config("eye-region landmarks cannot be selected".into()));
        }
        if self.component_sizes() != [10, 9, 12] {
            return Err(Error::Config(format!(
                "component sizes {:?}, expected [10, 9, 12]",
                self.component_sizes()
            )));
        }
        Ok(())
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` for an undirected edge list on `n` nodes.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut a = Tensor::identity(n);
    for &(i, j) in edges {
        if i != j {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
    }
    normalize_symmetric(a)
}

/// Symmetric degree normalization of a matrix that already holds its
/// self-loops.
pub fn normalize_symmetric(mut a: Tensor) -> Tensor {
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
            a.set(i, j, v);
        }
    }
    a
}

/// One component's induced subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct SubGraph {
    pub component: Component,
    /// Node positions in the parent graph.
    pub nodes: Vec<usize>,
    pub adjacency: Tensor,
}

pub fn subgraphs(selection: &NodeSelection) -> Vec<SubGraph> {
    let edges = selection.edges();
    Component::ALL
        .iter()
        .map(|&c| {
            let nodes = selection.nodes_of(c);
            let local = |n: usize| nodes.iter().position(|&m| m == n);
            let sub_edges: Vec<(usize, usize)> = edges
                .iter()
                .filter_map(|&(a, b)| Some((local(a)?, local(b)?)))
                .collect();
            SubGraph {
                component: c,
                adjacency: normalized_adjacency(nodes.len(), &sub_edges),
                nodes,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StGraph {
    /// Normalized spatial adjacency shared by all frames.
    pub adjacency: Tensor,
    /// Shape `[3, 31, 2]`.
    pub node_features: Tensor,
}

impl StGraph {
    /// Node features of frame `t` as a `31 × 2` matrix.
    pub fn frame(&self, t: usize) -> Tensor {
        let per = NUM_NODES * 2;
        Tensor::matrix(NUM_NODES, 2, self.node_features.data()[t * per..(t + 1) * per].to_vec())
            .expect("frame slice has 31x2 values")
    }

    /// Frame-to-frame coordinate deltas, `[(apex − onset), (offset − apex)]`.
    pub fn temporal_deltas(&self) -> [Tensor; 2] {
        let f: Vec<Tensor> = (0..NUM_FRAMES).map(|t| self.frame(t)).collect();
        let delta = |a: &Tensor, b: &Tensor| {
            Tensor::matrix(
                NUM_NODES,
                2,
                b.data().iter().zip(a.data()).map(|(y, x)| y - x).collect(),
            )
            .expect("same shape")
        };
        [delta(&f[0], &f[1]), delta(&f[1], &f[2])]
    }
}

/// Builds node features from the selected landmarks. With `normalize`, all
/// frames are shifted by the onset centroid and divided by the onset RMS
/// radius, which makes the features invariant to translation and uniform
/// scale of the input.
pub fn build_graph(sample: &LandmarkSample, selection: &NodeSelection, normalize: bool) -> Result<StGraph> {
    sample.validate(&sample.subject_id)?;
    if let Some(&bad) = selection.indices.iter().find(|&&i| i >= crate::landmark_data::NUM_LANDMARKS) {
        return Err(Error::Config(format!("selected landmark {bad} out of range")));
    }
    let n = selection.len();
    let degenerate = |t: usize| Error::Validation {
        sample: sample.subject_id.clone(),
        message: format!("frame {t}: selected landmarks are all identical"),
    };
    for (t, frame) in sample.frames.iter().enumerate() {
        let first = frame.points[selection.indices[0]];
        if selection.indices.iter().all(|&i| frame.points[i] == first) {
            return Err(degenerate(t));
        }
    }

    let onset = &sample.frames[0].points;
    let (center, scale) = if normalize {
        let mut c = [0.0; 2];
        for &i in &selection.indices {
            c[0] += onset[i][0] / n as f64;
            c[1] += onset[i][1] / n as f64;
        }
        let ms = selection
            .indices
            .iter()
            .map(|&i| (onset[i][0] - c[0]).powi(2) + (onset[i][1] - c[1]).powi(2))
            .sum::<f64>()
            / n as f64;
        let rms = ms.sqrt();
        if !(rms > 0.0) {
            return Err(degenerate(0));
        }
        (c, rms)
    } else {
        ([0.0; 2], 1.0)
    };

    let mut data = Vec::with_capacity(NUM_FRAMES * n * 2);
    for frame in &sample.frames {
        for &i in &selection.indices {
            let p = frame.points[i];
            data.push((p[0] - center[0]) / scale);
            data.push((p[1] - center[1]) / scale);
        }
    }
    Ok(StGraph {
        adjacency: normalized_adjacency(n, &selection.edges()),
        node_features: Tensor::new(vec![NUM_FRAMES, n, 2], data)?,
    })
}

/// Splits an `n × C` node-feature matrix into eyebrow, nose and mouth parts.
pub fn split_components(features: &Tensor, selection: &NodeSelection) -> Result<[Tensor; 3]> {
    if !features.is_matrix() || features.rows() != selection.len() {
        return Err(Error::shape(
            "split_components",
            format!("{:?} for {} nodes", features.shape(), selection.len()),
        ));
    }
    let c = features.cols();
    Ok(Component::ALL.map(|comp| {
        let nodes = selection.nodes_of(comp);
        let data = nodes.iter().flat_map(|&n| features.row(n).iter().copied()).collect();
        Tensor::matrix(nodes.len(), c, data).expect("rows gathered")
    }))
}

/// Inverse of [`split_components`].
pub fn merge_components(parts: &[Tensor; 3], selection: &NodeSelection) -> Result<Tensor> {
    let c = parts[0].cols();
    let mut out = Tensor::zeros(&[selection.len(), c]);
    for (comp, part) in Component::ALL.iter().zip(parts) {
        let nodes = selection.nodes_of(*comp);
        if part.rows() != nodes.len() || part.cols() != c {
            return Err(Error::shape(
                "merge_components",
                format!("{} part {:?}, expected {}x{c}", comp.name(), part.shape(), nodes.len()),
            ));
        }
        for (k, &n) in nodes.iter().enumerate() {
            for j in 0..c {
                out.set(n, j, part.get(k, j));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct GraphDump {
    pub selection: NodeSelection,
    pub component_sizes: [usize; 3],
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Vec<Vec<f64>>,
    pub node_features: Vec<Vec<[f64; 2]>>,
}

pub fn dump(graph: &StGraph, selection: &NodeSelection) -> GraphDump {
    let a = &graph.adjacency;
    GraphDump {
        selection: selection.clone(),
        component_sizes: selection.component_sizes(),
        edges: selection.edges(),
        adjacency: (0..a.rows()).map(|i| a.row(i).to_vec()).collect(),
        node_features: (0..NUM_FRAMES)
            .map(|t| {
                let f = graph.frame(t);
                (0..f.rows()).map(|i| [f.get(i, 0), f.get(i, 1)]).collect()
            })
            .collect(),
    }
}
