use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::Dataset;
use crate::numcore::Tensor;

/// Degree one-hot features are capped at this degree unless configured.
pub const DEFAULT_DEGREE_CAP: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureScheme {
    /// Node labels when the files have them, degree one-hot otherwise.
    Auto { degree_cap: usize },
    NodeLabelsOnehot,
    DegreeOnehot { cap: usize },
    Attributes,
}

impl Default for FeatureScheme {
    fn default() -> Self {
        FeatureScheme::Auto {
            degree_cap: DEFAULT_DEGREE_CAP,
        }
    }
}

impl fmt::Display for FeatureScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureScheme::Auto { .. } => f.write_str("auto"),
            FeatureScheme::NodeLabelsOnehot => f.write_str("node_labels_onehot"),
            FeatureScheme::DegreeOnehot { .. } => f.write_str("degree_onehot"),
            FeatureScheme::Attributes => f.write_str("attributes"),
        }
    }
}

impl FromStr for FeatureScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(FeatureScheme::default()),
            "node_labels_onehot" | "labels" => Ok(FeatureScheme::NodeLabelsOnehot),
            "degree_onehot" | "degree" => Ok(FeatureScheme::DegreeOnehot {
                cap: DEFAULT_DEGREE_CAP,
            }),
            "attributes" => Ok(FeatureScheme::Attributes),
            other => Err(Error::Config(format!(
                "unknown feature scheme `{other}` (auto, node_labels_onehot, degree_onehot, attributes)"
            ))),
        }
    }
}

/// Returns a copy of `dataset` with every `x` filled according to `scheme`.
pub fn build_features(dataset: &Dataset, scheme: FeatureScheme) -> Result<Dataset> {
    let has_labels = dataset.graphs.iter().all(|g| g.node_labels.is_some());
    let scheme = match scheme {
        FeatureScheme::Auto { .. } if has_labels && !dataset.is_empty() => {
            FeatureScheme::NodeLabelsOnehot
        }
        FeatureScheme::Auto { degree_cap } => FeatureScheme::DegreeOnehot { cap: degree_cap },
        s => s,
    };
    let mut out = dataset.clone();
    match scheme {
        FeatureScheme::NodeLabelsOnehot => {
            if !has_labels {
                return Err(Error::Config(format!(
                    "{}: node_labels_onehot requested but the dataset has no node labels",
                    dataset.name
                )));
            }
            let values: Vec<i64> = dataset
                .graphs
                .iter()
                .flat_map(|g| g.node_labels.as_deref().unwrap_or_default().iter().copied())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let d = values.len();
            for g in &mut out.graphs {
                let labels = g.node_labels.as_ref().expect("checked");
                let mut x = Tensor::zeros(g.n(), d);
                for (v, l) in labels.iter().enumerate() {
                    let c = values.binary_search(l).expect("label collected above");
                    x.set(v, c, 1.0);
                }
                g.x = x;
            }
            out.feature_dim = d;
        }
        FeatureScheme::DegreeOnehot { cap } => {
            let d = cap + 1;
            for g in &mut out.graphs {
                let mut x = Tensor::zeros(g.n(), d);
                for (v, deg) in g.adjacency.degrees().into_iter().enumerate() {
                    x.set(v, deg.min(cap), 1.0);
                }
                g.x = x;
            }
            out.feature_dim = d;
        }
        FeatureScheme::Attributes => {
            if !dataset.graphs.iter().all(|g| g.node_attributes.is_some()) || dataset.is_empty() {
                return Err(Error::Config(format!(
                    "{}: attributes requested but the dataset has no node attributes",
                    dataset.name
                )));
            }
            let d = dataset.graphs[0]
                .node_attributes
                .as_ref()
                .and_then(|a| a.first())
                .map_or(0, Vec::len);
            for g in &mut out.graphs {
                let rows = g.node_attributes.as_ref().expect("checked");
                g.x = if rows.is_empty() {
                    Tensor::zeros(0, d)
                } else {
                    Tensor::from_rows(rows)?
                };
            }
            out.feature_dim = d;
        }
        FeatureScheme::Auto { .. } => unreachable!("resolved above"),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphio::{Adjacency, Graph};

    fn dataset(graphs: Vec<Graph>) -> Dataset {
        Dataset {
            name: "t".into(),
            graphs,
            num_classes: 2,
            feature_dim: 0,
            class_values: vec![0, 1],
        }
    }

    fn bare(adj: Adjacency) -> Graph {
        let n = adj.n();
        Graph::new(adj, Tensor::zeros(n, 0), 0).unwrap()
    }

    #[test]
    fn node_label_onehot() {
        let mut g = bare(Adjacency::empty(7));
        g.node_labels = Some((0..7).collect());
        let ds = build_features(&dataset(vec![g]), FeatureScheme::NodeLabelsOnehot).unwrap();
        assert_eq!(ds.feature_dim, 7);
        let x = &ds.graphs[0].x;
        assert_eq!(x.row(3), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn isolated_node_degree_is_e0() {
        let ds = build_features(
            &dataset(vec![bare(Adjacency::empty(1))]),
            FeatureScheme::DegreeOnehot { cap: 4 },
        )
        .unwrap();
        assert_eq!(ds.graphs[0].x.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn path_degree_sequence() {
        let p3 = Adjacency::new(3, [(0, 1), (1, 2)]).unwrap();
        let ds = build_features(&dataset(vec![bare(p3)]), FeatureScheme::DegreeOnehot { cap: 3 }).unwrap();
        let x = &ds.graphs[0].x;
        assert_eq!(x.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(x.row(1), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(x.row(2), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn degree_is_capped() {
        let star = Adjacency::new(6, (1..6).map(|v| (0, v))).unwrap();
        let ds = build_features(&dataset(vec![bare(star)]), FeatureScheme::DegreeOnehot { cap: 2 }).unwrap();
        assert_eq!(ds.graphs[0].x.row(0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_data_is_config_error() {
        let ds = dataset(vec![bare(Adjacency::empty(2))]);
        assert!(matches!(
            build_features(&ds, FeatureScheme::NodeLabelsOnehot),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_features(&ds, FeatureScheme::Attributes),
            Err(Error::Config(_))
        ));
        // auto falls back to degrees
        let auto = build_features(&ds, FeatureScheme::default()).unwrap();
        assert_eq!(auto.feature_dim, DEFAULT_DEGREE_CAP + 1);
    }

    #[test]
    fn attributes_verbatim() {
        let mut g = bare(Adjacency::empty(2));
        g.node_attributes = Some(vec![vec![0.5, -1.0], vec![2.0, 3.0]]);
        let ds = build_features(&dataset(vec![g]), FeatureScheme::Attributes).unwrap();
        assert_eq!(ds.graphs[0].x.data(), &[0.5, -1.0, 2.0, 3.0]);
    }
}
