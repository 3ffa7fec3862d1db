//! Planetoid-style raw citation files (`.content` / `.cites`), plus the canonical
//! binary form and manifest written by the ingest command.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use log::warn;
use sha2::{Digest, Sha256};

use super::{EdgeCleanup, Graph};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// Citation lines naming an id absent from the content file.
    pub unknown_ids: usize,
    pub self_loops: usize,
    pub duplicate_edges: usize,
}

#[derive(Clone, Debug)]
pub struct Planetoid {
    pub graph: Graph,
    pub stats: LoadStats,
}

/// Parses a `.content` stream (`<id> <f_0> … <f_{d-1}> <label>`) and a `.cites`
/// stream (`<cited> <citing>`).
///
/// Nodes are numbered in content order and labels in first-appearance order. Citation
/// edges are symmetrized; lines that mention unknown ids are dropped and counted.
pub fn load_planetoid(content: impl BufRead, cites: impl BufRead) -> Result<Planetoid> {
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;

    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                message: "expected `<id> <features…> <label>`".into(),
            });
        }
        let found = tokens.len() - 2;
        match dim {
            None => dim = Some(found),
            Some(expected) if expected != found => {
                return Err(Error::Dimension {
                    line: line_no,
                    expected,
                    found,
                })
            }
            _ => {}
        }
        let id = tokens[0].to_string();
        if index.contains_key(&id) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate node id `{id}`"),
            });
        }
        for tok in &tokens[1..tokens.len() - 1] {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad feature value `{tok}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-finite feature value `{tok}`"),
                });
            }
            data.push(v);
        }
        let label = tokens[tokens.len() - 1];
        let next = class_names.len();
        let y = *class_index.entry(label.to_string()).or_insert_with(|| {
            class_names.push(label.to_string());
            next
        });
        labels.push(y);
        index.insert(id.clone(), ids.len());
        ids.push(id);
    }

    if ids.is_empty() {
        return Err(Error::EmptyInput("content file has no nodes".into()));
    }

    let mut stats = LoadStats::default();
    let mut edges = Vec::new();
    for (i, line) in cites.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            [a, b] => match (index.get(*a), index.get(*b)) {
                (Some(&u), Some(&v)) => edges.push((u, v)),
                _ => stats.unknown_ids += 1,
            },
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected `<cited_id> <citing_id>`".into(),
                })
            }
        }
    }
    if stats.unknown_ids > 0 {
        warn!("dropped {} citation lines with unknown node ids", stats.unknown_ids);
    }

    let n = ids.len();
    let features = Tensor::from_vec(n, dim.unwrap_or(0), data)?;
    let (graph, EdgeCleanup { self_loops, duplicates }) =
        Graph::from_edges(features, labels, class_names, &edges)?;
    stats.self_loops = self_loops;
    stats.duplicate_edges = duplicates;
    Ok(Planetoid {
        graph: graph.with_node_ids(ids)?,
        stats,
    })
}

/// Writes the graph back in raw Planetoid form. Each undirected edge appears once.
pub fn write_planetoid(graph: &Graph, mut content: impl Write, mut cites: impl Write) -> Result<()> {
    let ids = graph.node_ids();
    for u in 0..graph.num_nodes() {
        write!(content, "{}", ids[u])?;
        for v in graph.features().row(u) {
            write!(content, "\t{v}")?;
        }
        writeln!(content, "\t{}", graph.class_names()[graph.labels()[u]])?;
    }
    for (u, v) in graph.undirected_edges() {
        writeln!(cites, "{}\t{}", ids[u], ids[v])?;
    }
    Ok(())
}

/// Summary written next to a converted dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_edge_entries: usize,
    pub class_names: Vec<String>,
    pub edge_checksum: String,
    pub unknown_ids: usize,
    pub self_loops: usize,
    pub duplicate_edges: usize,
}

impl DatasetManifest {
    pub fn new(graph: &Graph, stats: LoadStats) -> Self {
        Self {
            num_nodes: graph.num_nodes(),
            feature_dim: graph.feature_dim(),
            num_classes: graph.num_classes(),
            num_edge_entries: graph.num_edge_entries(),
            class_names: graph.class_names().to_vec(),
            edge_checksum: edge_checksum(graph),
            unknown_ids: stats.unknown_ids,
            self_loops: stats.self_loops,
            duplicate_edges: stats.duplicate_edges,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("num_nodes={}\n", self.num_nodes));
        s.push_str(&format!("feature_dim={}\n", self.feature_dim));
        s.push_str(&format!("num_classes={}\n", self.num_classes));
        s.push_str(&format!("num_edge_entries={}\n", self.num_edge_entries));
        for (i, name) in self.class_names.iter().enumerate() {
            s.push_str(&format!("class.{i}={name}\n"));
        }
        s.push_str(&format!("edge_checksum=sha256:{}\n", self.edge_checksum));
        s.push_str(&format!("dropped_unknown_ids={}\n", self.unknown_ids));
        s.push_str(&format!("dropped_self_loops={}\n", self.self_loops));
        s.push_str(&format!("dropped_duplicate_edges={}\n", self.duplicate_edges));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: HashMap<&str, &str> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            kv.insert(k.trim(), v.trim());
        }
        let num = |key: &str| -> Result<usize> {
            kv.get(key)
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    message: format!("manifest is missing `{key}`"),
                })?
                .parse()
                .map_err(|_| Error::Parse {
                    line: 0,
                    message: format!("manifest `{key}` is not a count"),
                })
        };
        let num_classes = num("num_classes")?;
        let class_names = (0..num_classes)
            .map(|i| {
                kv.get(format!("class.{i}").as_str())
                    .map(|s| s.to_string())
                    .ok_or_else(|| Error::Parse {
                        line: 0,
                        message: format!("manifest is missing `class.{i}`"),
                    })
            })
            .collect::<Result<_>>()?;
        let checksum = kv.get("edge_checksum").copied().unwrap_or_default();
        Ok(Self {
            num_nodes: num("num_nodes")?,
            feature_dim: num("feature_dim")?,
            num_classes,
            num_edge_entries: num("num_edge_entries")?,
            class_names,
            edge_checksum: checksum.trim_start_matches("sha256:").to_string(),
            unknown_ids: num("dropped_unknown_ids").unwrap_or(0),
            self_loops: num("dropped_self_loops").unwrap_or(0),
            duplicate_edges: num("dropped_duplicate_edges").unwrap_or(0),
        })
    }
}

/// SHA-256 over the CSR adjacency, as little-endian `u64` (row, col) pairs.
pub fn edge_checksum(graph: &Graph) -> String {
    let mut h = Sha256::new();
    for u in 0..graph.num_nodes() {
        for &v in graph.neighbors(u) {
            h.update((u as u64).to_le_bytes());
            h.update((v as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

const GRAPH_MAGIC: &[u8; 8] = b"GUGRAPH1";

/// Compact little-endian binary form: header counts, class names, node ids, labels,
/// CSR adjacency, then sparse feature rows.
pub fn write_graph_binary(graph: &Graph, mut w: impl Write) -> Result<()> {
    let put = |w: &mut dyn Write, v: u64| w.write_all(&v.to_le_bytes());
    let put_str = |w: &mut dyn Write, s: &str| -> std::io::Result<()> {
        w.write_all(&(s.len() as u64).to_le_bytes())?;
        w.write_all(s.as_bytes())
    };
    w.write_all(GRAPH_MAGIC)?;
    put(&mut w, graph.num_nodes() as u64)?;
    put(&mut w, graph.feature_dim() as u64)?;
    put(&mut w, graph.num_classes() as u64)?;
    put(&mut w, graph.num_edge_entries() as u64)?;
    for name in graph.class_names() {
        put_str(&mut w, name)?;
    }
    for id in graph.node_ids() {
        put_str(&mut w, id)?;
    }
    for &y in graph.labels() {
        put(&mut w, y as u64)?;
    }
    for &o in graph.offsets() {
        put(&mut w, o as u64)?;
    }
    for &t in graph.targets() {
        put(&mut w, t as u64)?;
    }
    let csr = graph.feature_csr();
    for &o in csr.offsets() {
        put(&mut w, o as u64)?;
    }
    for &c in csr.indices() {
        put(&mut w, c as u64)?;
    }
    for &v in csr.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_graph_binary(mut r: impl Read) -> Result<Graph> {
    let bad = |msg: &str| Error::Parse {
        line: 0,
        message: format!("graph binary: {msg}"),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != GRAPH_MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut buf = [0u8; 8];
    let mut get = |r: &mut dyn Read| -> Result<u64> {
        r.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    };
    let n = get(&mut r)? as usize;
    let d = get(&mut r)? as usize;
    let c = get(&mut r)? as usize;
    let m = get(&mut r)? as usize;
    let get_str = |r: &mut dyn Read| -> Result<String> {
        let mut lb = [0u8; 8];
        r.read_exact(&mut lb)?;
        let len = u64::from_le_bytes(lb) as usize;
        let mut s = vec![0u8; len];
        r.read_exact(&mut s)?;
        String::from_utf8(s).map_err(|_| bad("invalid utf-8"))
    };
    let class_names = (0..c).map(|_| get_str(&mut r)).collect::<Result<Vec<_>>>()?;
    let ids = (0..n).map(|_| get_str(&mut r)).collect::<Result<Vec<_>>>()?;
    let mut get = |r: &mut dyn Read| -> Result<u64> {
        r.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    };
    let labels = (0..n).map(|_| get(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let offsets = (0..=n).map(|_| get(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let targets = (0..m).map(|_| get(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    if offsets.last() != Some(&m) {
        return Err(bad("adjacency offsets inconsistent"));
    }
    let f_offsets = (0..=n).map(|_| get(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let nnz = *f_offsets.last().unwrap_or(&0);
    let f_idx = (0..nnz).map(|_| get(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let f_val = (0..nnz)
        .map(|_| get(&mut r).map(f64::from_bits))
        .collect::<Result<Vec<_>>>()?;

    let mut features = Tensor::zeros(n, d);
    for u in 0..n {
        for p in f_offsets[u]..f_offsets[u + 1] {
            if f_idx[p] >= d {
                return Err(bad("feature index out of range"));
            }
            features.set(u, f_idx[p], f_val[p]);
        }
    }
    let mut edges = Vec::with_capacity(m / 2);
    for u in 0..n {
        for &v in &targets[offsets[u]..offsets[u + 1]] {
            if u < v {
                edges.push((u, v));
            }
        }
    }
    let (graph, _) = Graph::from_edges(features, labels, class_names, &edges)?;
    if graph.num_edge_entries() != m {
        return Err(bad("adjacency is not symmetric"));
    }
    graph.with_node_ids(ids)
}
