//! Text formats for graphs.
//!
//! * edges: one `u v` pair per line, 0-indexed, `#` starts a comment.
//! * features: header `n f`, then `n` rows of `f` reals. A header `n f coo`
//!   switches to coordinate lines `node_id feat_id value`; absent entries are 0.
//! * labels: one integer per line, `-1` for unlabeled.
//!
//! A graph directory holds `edges.txt`, `features.txt` and `labels.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CsrAdjacency, LabeledGraph};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const EDGES_FILE: &str = "edges.txt";
pub const FEATURES_FILE: &str = "features.txt";
pub const LABELS_FILE: &str = "labels.txt";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty, comment-stripped lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

pub fn parse_edge_list(text: &str, n: usize, path: &Path) -> Result<CsrAdjacency> {
    let mut pairs = Vec::new();
    for (line, l) in content_lines(text) {
        let mut it = l.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(path, line, format!("expected `u v`, got {l:?}")));
        };
        let u: usize = a
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad node id {a:?}")))?;
        let v: usize = b
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad node id {b:?}")))?;
        if u >= n || v >= n {
            return Err(parse_err(
                path,
                line,
                format!("node id {} out of range for n = {n}", u.max(v)),
            ));
        }
        pairs.push((u, v));
    }
    CsrAdjacency::from_edges(n, pairs)
}

pub fn load_edge_list(path: impl AsRef<Path>, n: usize) -> Result<CsrAdjacency> {
    let path = path.as_ref();
    parse_edge_list(&read(path)?, n, path)
}

pub fn format_edge_list(adj: &CsrAdjacency) -> String {
    let mut out = String::new();
    for (u, v) in adj.edges() {
        let _ = writeln!(out, "{u} {v}");
    }
    out
}

pub fn write_edge_list(path: impl AsRef<Path>, adj: &CsrAdjacency) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_edge_list(adj)).map_err(|e| Error::io(path, e))
}

pub fn parse_features(text: &str, path: &Path) -> Result<DenseMatrix> {
    let mut lines = content_lines(text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing `n f` header"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| parse_err(path, hline, format!("bad header field {s:?}")))
    };
    let (n, f, sparse) = match head.as_slice() {
        [n, f] => (parse_dim(n)?, parse_dim(f)?, false),
        [n, f, "coo"] => (parse_dim(n)?, parse_dim(f)?, true),
        _ => return Err(parse_err(path, hline, "expected header `n f` or `n f coo`")),
    };
    let mut m = DenseMatrix::zeros(n, f);
    if sparse {
        for (line, l) in lines {
            let t: Vec<&str> = l.split_whitespace().collect();
            let [i, j, v] = t.as_slice() else {
                return Err(parse_err(path, line, "expected `node_id feat_id value`"));
            };
            let i: usize = i
                .parse()
                .map_err(|_| parse_err(path, line, "bad node id"))?;
            let j: usize = j
                .parse()
                .map_err(|_| parse_err(path, line, "bad feature id"))?;
            let v: f64 = v.parse().map_err(|_| parse_err(path, line, "bad value"))?;
            if i >= n || j >= f {
                return Err(parse_err(path, line, format!("entry ({i}, {j}) outside {n}x{f}")));
            }
            m.set(i, j, v);
        }
    } else {
        let mut r = 0;
        for (line, l) in lines {
            if r >= n {
                return Err(parse_err(path, line, format!("more than {n} feature rows")));
            }
            let row = m.row_mut(r);
            let mut count = 0;
            for tok in l.split_whitespace() {
                if count >= f {
                    return Err(parse_err(path, line, format!("more than {f} values")));
                }
                row[count] = tok
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("bad value {tok:?}")))?;
                count += 1;
            }
            if count != f {
                return Err(parse_err(path, line, format!("expected {f} values, got {count}")));
            }
            r += 1;
        }
        if r != n {
            return Err(parse_err(path, hline, format!("expected {n} rows, got {r}")));
        }
    }
    Ok(m)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    parse_features(&read(path)?, path)
}

/// Dense text form. `{:?}` on f64 prints the shortest round-tripping value.
pub fn format_features(m: &DenseMatrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_features(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_features(m)).map_err(|e| Error::io(path, e))
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<Option<usize>>> {
    content_lines(text)
        .map(|(line, l)| {
            let v: i64 = l
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad label {l:?}")))?;
            match v {
                -1 => Ok(None),
                v if v >= 0 => Ok(Some(v as usize)),
                _ => Err(parse_err(path, line, format!("negative label {v}"))),
            }
        })
        .collect()
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<Option<usize>>> {
    let path = path.as_ref();
    parse_labels(&read(path)?, path)
}

pub fn format_labels(labels: &[Option<usize>]) -> String {
    let mut out = String::new();
    for l in labels {
        match l {
            Some(c) => {
                let _ = writeln!(out, "{c}");
            }
            None => out.push_str("-1\n"),
        }
    }
    out
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[Option<usize>]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_labels(labels)).map_err(|e| Error::io(path, e))
}

fn dir_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Loads a graph directory. The node count comes from the feature header and
/// the class count from the largest label.
pub fn load_graph_dir(dir: impl AsRef<Path>) -> Result<LabeledGraph> {
    let dir = dir.as_ref();
    let features = load_features(dir_file(dir, FEATURES_FILE))?;
    let n = features.rows();
    let labels = load_labels(dir_file(dir, LABELS_FILE))?;
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{}: {} labels for {n} nodes",
            dir.display(),
            labels.len()
        )));
    }
    let adjacency = load_edge_list(dir_file(dir, EDGES_FILE), n)?;
    let class_count = labels.iter().flatten().max().map_or(0, |&m| m + 1);
    LabeledGraph::new(adjacency, features, labels, class_count)
}

pub fn write_graph_dir(dir: impl AsRef<Path>, g: &LabeledGraph) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_edge_list(dir_file(dir, EDGES_FILE), &g.adjacency)?;
    write_features(dir_file(dir, FEATURES_FILE), &g.features)?;
    write_labels(dir_file(dir, LABELS_FILE), &g.labels)
}
