//! Loop-based reference implementations shared by the integration tests.
#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use dere_grl::diff::{ParamStore, Tensor};
use dere_grl::landmark_data::{synthesize_dataset, DatasetManifest, SynthSpec};
use dere_grl::model::DereModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect()
}

pub fn add_bias(a: &Mat, bias: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(bias).map(|(v, b)| v + b).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_row(r: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.len());
    let mut max = f64::NEG_INFINITY;
    for &v in r {
        if v > max {
            max = v;
        }
    }
    let mut z = 0.0;
    for &v in r {
        let e = (v - max).exp();
        out.push(e);
        z += e;
    }
    for v in &mut out {
        *v /= z;
    }
    out
}

pub fn param(params: &ParamStore, name: &str) -> Mat {
    to_mat(params.value(name).unwrap())
}

/// Width-3 temporal convolution of one node's per-frame feature rows at
/// frame `t`, zero outside `[0, frames)`.
fn temporal_window(spatial: &[Mat], node: usize, t: isize, width: usize) -> Vec<f64> {
    let mut window = Vec::with_capacity(3 * width);
    for dt in -1..=1 {
        let s = t + dt;
        if s < 0 || s as usize >= spatial.len() {
            window.extend(std::iter::repeat_n(0.0, width));
        } else {
            window.extend_from_slice(&spatial[s as usize][node]);
        }
    }
    window
}

/// Backbone: per-frame `ReLU(Â X Θ)`, then a linear width-3 temporal
/// convolution; `same` padding on every layer but the last, which keeps only
/// the middle frame.
pub fn backbone_oracle(model: &DereModel, params: &ParamStore, adjacency: &Mat, frames: &[Mat]) -> Mat {
    let layers = model.config().backbone_channels.len();
    let mut frames: Vec<Mat> = frames.to_vec();
    for (l, &c_out) in model.config().backbone_channels.iter().enumerate() {
        let gw = param(params, &format!("backbone.{l}.gc.weight"));
        let tw = param(params, &format!("backbone.{l}.tc.weight"));
        let tb = param(params, &format!("backbone.{l}.tc.bias"));
        let spatial: Vec<Mat> = frames
            .iter()
            .map(|x| relu(&matmul(adjacency, &matmul(x, &gw))))
            .collect();
        let centres: Vec<isize> = if l + 1 == layers { vec![1] } else { vec![0, 1, 2] };
        frames = centres
            .iter()
            .map(|&t| {
                (0..adjacency.len())
                    .map(|node| {
                        let w = temporal_window(&spatial, node, t, c_out);
                        (0..c_out)
                            .map(|j| tb[0][j] + (0..w.len()).map(|p| w[p] * tw[p][j]).sum::<f64>())
                            .collect()
                    })
                    .collect()
            })
            .collect();
    }
    frames.remove(0)
}

/// Decomposition mapper: map matrices and concatenated action features.
pub fn adm_oracle(model: &DereModel, params: &ParamStore, x_b: &Mat) -> (Vec<Mat>, Mat) {
    let mut maps = Vec::new();
    let mut f_a = Vec::new();
    for sg in model.subgraphs() {
        let prefix = model.adm_prefix(sg.component);
        let x_o: Mat = sg.nodes.iter().map(|&n| x_b[n].clone()).collect();
        let adj = to_mat(&sg.adjacency);
        let h = relu(&matmul(&adj, &matmul(&x_o, &param(params, &format!("{prefix}.gc.weight")))));
        let bias = param(params, &format!("{prefix}.tc.bias"));
        let logits = add_bias(&matmul(&h, &param(params, &format!("{prefix}.tc.weight"))), &bias[0]);
        let map: Mat = logits.iter().map(|r| softmax_row(r)).collect();
        let n_a = map[0].len();
        let c1 = x_o[0].len();
        for a in 0..n_a {
            let mut row = vec![0.0; c1];
            for (node, x) in x_o.iter().enumerate() {
                for c in 0..c1 {
                    row[c] += map[node][a] * x[c];
                }
            }
            f_a.push(row);
        }
        maps.push(map);
    }
    (maps, f_a)
}

/// Relation mixer: normalized L1 row norms as weights, then the weighted sum
/// of action rows. Returns `(F_ME, W)`.
pub fn rrm_oracle(model: &DereModel, params: &ParamStore, f_a: &Mat) -> (Vec<f64>, Vec<f64>) {
    let adj = to_mat(model.relation_adjacency());
    let h = relu(&matmul(&adj, &matmul(f_a, &param(params, "rrm.gc.weight"))));
    let bias = param(params, "rrm.tc.bias");
    let rel = add_bias(&matmul(&h, &param(params, "rrm.tc.weight")), &bias[0]);
    let raw: Vec<f64> = rel.iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = if total > 0.0 {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    };
    let mut f_me = vec![0.0; f_a[0].len()];
    for (i, row) in f_a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            f_me[c] += w[i] * v;
        }
    }
    (f_me, w)
}

pub fn loss_me_oracle(logits: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &l) in logits.iter().zip(labels) {
        total -= softmax_row(r)[l].ln();
    }
    total / labels.len() as f64
}

pub fn loss_mc_oracle(f: &Mat) -> f64 {
    let n = f.len();
    let d = f[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mean: f64 = f.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        for r in f {
            total += (r[j] - mean).powi(2);
        }
    }
    total / (2.0 * n as f64)
}

pub fn loss_wc_oracle(w: &Mat, labels: &[usize], centers: &Mat) -> f64 {
    let mut total = 0.0;
    for (r, &l) in w.iter().zip(labels) {
        for (v, c) in r.iter().zip(&centers[l]) {
            total += (v - c).powi(2);
        }
    }
    total / labels.len() as f64
}

pub fn loss_b_oracle(w: &Mat) -> f64 {
    let n = w.len() as f64;
    let d = w[0].len();
    (0..d)
        .map(|j| {
            let mean = w.iter().map(|r| r[j]).sum::<f64>() / n;
            (mean - 1.0 / d as f64).powi(2)
        })
        .sum()
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A small synthetic dataset for protocol tests.
pub fn small_dataset(subjects: usize, per_subject: usize, seed: u64) -> DatasetManifest {
    synthesize_dataset(&SynthSpec {
        classes: 3,
        subjects,
        per_subject,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

/// Initial parameters with every entry, biases included, redrawn at random.
pub fn random_params(model: &DereModel, seed: u64) -> ParamStore {
    let mut params = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let names = params.names().to_vec();
    for name in names {
        let mut v = params.value(&name).unwrap().clone();
        v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.8..0.8));
        params.set_value(&name, v).unwrap();
    }
    params
}

/// Random node features with the shape of a built graph and the default
/// adjacency.
pub fn random_graph(seed: u64) -> dere_grl::st_graph::StGraph {
    use dere_grl::st_graph::{default_selection, normalized_adjacency, NUM_NODES};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selection = default_selection();
    let data = (0..3 * NUM_NODES * 2).map(|_| rng.random_range(-1.5..1.5)).collect();
    dere_grl::st_graph::StGraph {
        adjacency: normalized_adjacency(NUM_NODES, &selection.edges()),
        node_features: Tensor::new(vec![3, NUM_NODES, 2], data).unwrap(),
    }
}

/// A LOSO configuration small enough to run in a few seconds.
pub fn quick_config(variant: dere_grl::model::Variant, seed: u64) -> dere_grl::harness::ExperimentConfig {
    use dere_grl::harness::{DatasetSpec, ExperimentConfig, TrainConfig};
    let mut config = ExperimentConfig {
        dataset: DatasetSpec::Synthetic(SynthSpec {
            classes: 3,
            subjects: 4,
            per_subject: 2,
            ..SynthSpec::default()
        }),
        variant,
        seed,
        ..ExperimentConfig::default()
    };
    config.model = config.model.with_c1(8);
    config.model.c2 = 8;
    config.train = TrainConfig {
        epochs: 4,
        batch_size: 8,
        ..TrainConfig::default()
    };
    config.augment.copies = 1;
    config
}

/// Eight training-ready samples (4 classes × 2 subjects) with their graphs.
pub fn eight_samples(config: &dere_grl::harness::ExperimentConfig) -> Vec<dere_grl::harness::PreparedSample> {
    let manifest = synthesize_dataset(&SynthSpec {
        classes: 4,
        subjects: 2,
        per_subject: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let selection = dere_grl::st_graph::default_selection();
    manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| dere_grl::harness::prepare_sample(s, i, config, &selection).unwrap())
        .collect()
}
