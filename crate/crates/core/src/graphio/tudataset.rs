//! Reader and writer for the TUDataset plain-text layout:
//!
//! ```text
//! <dir>/<NAME>_A.txt               "u, v" per line, 1-indexed global node ids
//! <dir>/<NAME>_graph_indicator.txt graph id (1-indexed) of node i on line i
//! <dir>/<NAME>_graph_labels.txt    label of graph i on line i
//! <dir>/<NAME>_node_labels.txt     optional, integer label of node i
//! <dir>/<NAME>_node_attributes.txt optional, comma-separated floats of node i
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graphio::{Adjacency, Dataset, Graph};
use crate::numcore::Tensor;

/// Graph counts published alongside the benchmarks; used only to flag
/// mismatching downloads.
const REFERENCE_GRAPH_COUNTS: &[(&str, usize)] = &[
    ("MUTAG", 188),
    ("ENZYMES", 600),
    ("PROTEINS", 1173),
    ("PTC_MR", 344),
    ("Synthie", 400),
    ("IMDB-BINARY", 1000),
    ("IMDB-MULTI", 1500),
];

pub fn reference_graph_count(name: &str) -> Option<usize> {
    REFERENCE_GRAPH_COUNTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, c)| c)
}

fn file_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

fn read_required(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::Format {
            file: path.to_path_buf(),
            msg: "mandatory file is missing".into(),
        });
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    if !path.is_file() {
        return Ok(None);
    }
    fs::read_to_string(path).map(Some).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_int(path: &Path, line: usize, tok: &str) -> Result<i64> {
    tok.trim().parse::<i64>().map_err(|_| Error::Format {
        file: path.to_path_buf(),
        msg: format!("line {line}: expected an integer, found `{}`", tok.trim()),
    })
}

fn parse_float(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.trim().parse::<f64>().map_err(|_| Error::Format {
        file: path.to_path_buf(),
        msg: format!("line {line}: expected a number, found `{}`", tok.trim()),
    })
}

fn parse_int_column(path: &Path, text: &str) -> Result<Vec<(usize, i64)>> {
    lines(text)
        .map(|(ln, l)| {
            // Some releases carry extra comma-separated columns; the first one is the value.
            let first = l.split(',').next().unwrap_or(l);
            parse_int(path, ln, first).map(|v| (ln, v))
        })
        .collect()
}

/// Reads the collection called `name` from `dir`; `name` defaults to the
/// directory's last path component.
pub fn parse_tudataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Argument(format!("cannot infer dataset name from {}", dir.display())))?
        .to_string();
    parse_named(dir, &name)
}

pub(crate) fn parse_named(dir: &Path, name: &str) -> Result<Dataset> {
    let a_path = file_path(dir, name, "A");
    let ind_path = file_path(dir, name, "graph_indicator");
    let lab_path = file_path(dir, name, "graph_labels");
    let a_text = read_required(&a_path)?;
    let ind_text = read_required(&ind_path)?;
    let lab_text = read_required(&lab_path)?;

    let raw_labels: Vec<i64> = parse_int_column(&lab_path, &lab_text)?
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let num_graphs = raw_labels.len();
    if num_graphs == 0 {
        return Err(Error::Format {
            file: lab_path,
            msg: "no graphs".into(),
        });
    }

    // node (0-based global) -> graph (0-based)
    let mut node_graph = Vec::new();
    for (ln, g) in parse_int_column(&ind_path, &ind_text)? {
        if g < 1 || g as usize > num_graphs {
            return Err(Error::Consistency {
                file: ind_path.clone(),
                line: ln,
                msg: format!("graph id {g} outside 1..={num_graphs}"),
            });
        }
        node_graph.push(g as usize - 1);
    }
    let total_nodes = node_graph.len();

    let mut local_id = vec![0usize; total_nodes];
    let mut sizes = vec![0usize; num_graphs];
    for (v, &g) in node_graph.iter().enumerate() {
        local_id[v] = sizes[g];
        sizes[g] += 1;
    }

    let mut edge_lists: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (ln, l) in lines(&a_text) {
        let mut parts = l.split(',');
        let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
            return Err(Error::Format {
                file: a_path.clone(),
                msg: format!("line {ln}: expected `u, v`"),
            });
        };
        let u = parse_int(&a_path, ln, a)?;
        let v = parse_int(&a_path, ln, b)?;
        for w in [u, v] {
            if w < 1 || w as usize > total_nodes {
                return Err(Error::Consistency {
                    file: a_path.clone(),
                    line: ln,
                    msg: format!("node {w} outside 1..={total_nodes}"),
                });
            }
        }
        let (u, v) = (u as usize - 1, v as usize - 1);
        if node_graph[u] != node_graph[v] {
            return Err(Error::Consistency {
                file: a_path.clone(),
                line: ln,
                msg: format!(
                    "edge ({}, {}) joins graph {} and graph {}",
                    u + 1,
                    v + 1,
                    node_graph[u] + 1,
                    node_graph[v] + 1
                ),
            });
        }
        edge_lists[node_graph[u]].push((local_id[u], local_id[v]));
    }

    let nl_path = file_path(dir, name, "node_labels");
    let node_labels = match read_optional(&nl_path)? {
        Some(text) => {
            let vals = parse_int_column(&nl_path, &text)?;
            if vals.len() != total_nodes {
                return Err(Error::Consistency {
                    file: nl_path,
                    line: vals.len().min(total_nodes) + 1,
                    msg: format!("{} node labels for {total_nodes} nodes", vals.len()),
                });
            }
            Some(vals.into_iter().map(|(_, v)| v).collect::<Vec<_>>())
        }
        None => None,
    };

    let na_path = file_path(dir, name, "node_attributes");
    let node_attrs = match read_optional(&na_path)? {
        Some(text) => {
            let mut rows = Vec::with_capacity(total_nodes);
            let mut width = None;
            for (ln, l) in lines(&text) {
                let row = l
                    .split(',')
                    .map(|t| parse_float(&na_path, ln, t))
                    .collect::<Result<Vec<f64>>>()?;
                if *width.get_or_insert(row.len()) != row.len() {
                    return Err(Error::Consistency {
                        file: na_path.clone(),
                        line: ln,
                        msg: "attribute rows differ in length".into(),
                    });
                }
                rows.push(row);
            }
            if rows.len() != total_nodes {
                return Err(Error::Consistency {
                    file: na_path,
                    line: rows.len().min(total_nodes) + 1,
                    msg: format!("{} attribute rows for {total_nodes} nodes", rows.len()),
                });
            }
            Some(rows)
        }
        None => None,
    };

    let class_values: Vec<i64> = raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if class_values.len() < 2 {
        log::warn!("{name}: only {} graph class(es) present", class_values.len());
    }

    let mut per_graph_nodes: Vec<Vec<usize>> = vec![Vec::new(); num_graphs];
    for (v, &g) in node_graph.iter().enumerate() {
        per_graph_nodes[g].push(v);
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (g, edges) in edge_lists.into_iter().enumerate() {
        let n = sizes[g];
        let adjacency = Adjacency::new(n, edges)?;
        let label = class_values
            .binary_search(&raw_labels[g])
            .expect("label drawn from class_values");
        let nodes = &per_graph_nodes[g];
        graphs.push(Graph {
            adjacency,
            x: Tensor::zeros(n, 0),
            label,
            node_labels: node_labels
                .as_ref()
                .map(|nl| nodes.iter().map(|&v| nl[v]).collect()),
            node_attributes: node_attrs
                .as_ref()
                .map(|na| nodes.iter().map(|&v| na[v].clone()).collect()),
        });
    }

    if let Some(expected) = reference_graph_count(name) {
        if expected != num_graphs {
            log::warn!(
                "{name}: files contain {num_graphs} graphs, published statistics list {expected}"
            );
        }
    }

    Ok(Dataset {
        name: name.to_string(),
        graphs,
        num_classes: class_values.len(),
        feature_dim: 0,
        class_values,
    })
}

/// Writes `dataset` in TUDataset layout under `dir` (created if needed),
/// listing every undirected edge in both directions. Features in `x` are not
/// written; raw node labels and attributes are.
pub fn write_tudataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = &dataset.name;

    let mut a = String::new();
    let mut ind = String::new();
    let mut labels = String::new();
    let mut node_labels = String::new();
    let mut node_attrs = String::new();
    let has_nl = dataset.graphs.iter().all(|g| g.node_labels.is_some()) && !dataset.is_empty();
    let has_na = dataset.graphs.iter().all(|g| g.node_attributes.is_some()) && !dataset.is_empty();

    let mut offset = 0usize;
    for (gi, g) in dataset.graphs.iter().enumerate() {
        for &(u, v) in g.edges() {
            let _ = writeln!(a, "{}, {}", u + offset + 1, v + offset + 1);
            let _ = writeln!(a, "{}, {}", v + offset + 1, u + offset + 1);
        }
        for _ in 0..g.n() {
            let _ = writeln!(ind, "{}", gi + 1);
        }
        let _ = writeln!(labels, "{}", dataset.class_values[g.label]);
        if has_nl {
            for l in g.node_labels.as_ref().expect("checked") {
                let _ = writeln!(node_labels, "{l}");
            }
        }
        if has_na {
            for row in g.node_attributes.as_ref().expect("checked") {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                let _ = writeln!(node_attrs, "{}", cells.join(", "));
            }
        }
        offset += g.n();
    }

    let write = |suffix: &str, body: &str| -> Result<()> {
        let p = file_path(dir, name, suffix);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("A", &a)?;
    write("graph_indicator", &ind)?;
    write("graph_labels", &labels)?;
    if has_nl {
        write("node_labels", &node_labels)?;
    }
    if has_na {
        write("node_attributes", &node_attrs)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_files(dir: &Path, name: &str, files: &[(&str, &str)]) {
        fs::create_dir_all(dir).unwrap();
        for (suffix, body) in files {
            fs::write(file_path(dir, name, suffix), body).unwrap();
        }
    }

    #[test]
    fn two_node_toy() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("TOY");
        write_files(
            &dir,
            "TOY",
            &[("A", "1, 2\n2, 1\n"), ("graph_indicator", "1\n1\n"), ("graph_labels", "-1\n")],
        );
        let ds = parse_tudataset(&dir).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.graphs[0].n(), 2);
        assert_eq!(ds.graphs[0].edges(), &[(0, 1)]);
        assert_eq!(ds.graphs[0].label, 0);
    }

    #[test]
    fn self_loops_dropped_and_labels_remapped() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("T");
        write_files(
            &dir,
            "T",
            &[
                ("A", "1, 1\n1, 2\n3, 4\n4, 3\n"),
                ("graph_indicator", "1\n1\n2\n2\n"),
                ("graph_labels", "5\n2\n"),
            ],
        );
        let ds = parse_tudataset(&dir).unwrap();
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.class_values, vec![2, 5]);
        assert_eq!(ds.graphs[0].label, 1);
        assert_eq!(ds.graphs[1].label, 0);
        assert_eq!(ds.graphs[0].edges(), &[(0, 1)]);
        assert_eq!(ds.graphs[1].edges(), &[(0, 1)]);
    }

    #[test]
    fn missing_file_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("M");
        write_files(&dir, "M", &[("A", "1, 2\n"), ("graph_indicator", "1\n1\n")]);
        let err = parse_tudataset(&dir).unwrap_err();
        match err {
            Error::Format { file, .. } => {
                assert!(file.ends_with("M_graph_labels.txt"))
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn cross_graph_edge_reports_line() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("X");
        write_files(
            &dir,
            "X",
            &[
                ("A", "1, 2\n2, 3\n"),
                ("graph_indicator", "1\n1\n2\n"),
                ("graph_labels", "0\n1\n"),
            ],
        );
        match parse_tudataset(&dir).unwrap_err() {
            Error::Consistency { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn node_out_of_range_reports_line() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("Y");
        write_files(
            &dir,
            "Y",
            &[("A", "1, 2\n1, 9\n"), ("graph_indicator", "1\n1\n"), ("graph_labels", "0\n")],
        );
        assert!(matches!(
            parse_tudataset(&dir).unwrap_err(),
            Error::Consistency { line: 2, .. }
        ));
    }

    #[test]
    fn reference_counts() {
        assert_eq!(reference_graph_count("MUTAG"), Some(188));
        assert_eq!(reference_graph_count("PROTEINS"), Some(1173));
        assert_eq!(reference_graph_count("nope"), None);
    }
}
