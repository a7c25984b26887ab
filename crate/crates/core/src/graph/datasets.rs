//! Readers for the eight public datasets and the processed on-disk cache.
//!
//! Layout: `<cache_dir>/<dataset>/raw/` holds the files as distributed,
//! `<cache_dir>/<dataset>/processed/` holds `data.bin` plus `manifest.json`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use ndarray_npy::NpzReader;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Domain, Graph, GraphCollection};
use crate::error::{GmopeError, Result};
use crate::scalar::Scalar;

const PROCESSED_MAGIC: &[u8; 8] = b"GMOPEDS1";
const PROCESSED_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Cora,
    Citeseer,
    Pubmed,
    Photo,
    Computers,
    Proteins,
    Dd,
    Nci109,
}

/// Published summary statistics. Node and edge counts are per graph for
/// single-graph datasets and averages for the molecular collections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub graphs: usize,
    pub nodes: f64,
    pub edges: f64,
    pub features: usize,
    pub node_classes: Option<usize>,
    pub graph_classes: Option<usize>,
}

impl DatasetId {
    pub const ALL: [DatasetId; 8] = [
        DatasetId::Cora,
        DatasetId::Citeseer,
        DatasetId::Pubmed,
        DatasetId::Photo,
        DatasetId::Computers,
        DatasetId::Proteins,
        DatasetId::Dd,
        DatasetId::Nci109,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Cora => "cora",
            DatasetId::Citeseer => "citeseer",
            DatasetId::Pubmed => "pubmed",
            DatasetId::Photo => "photo",
            DatasetId::Computers => "computers",
            DatasetId::Proteins => "proteins",
            DatasetId::Dd => "dd",
            DatasetId::Nci109 => "nci109",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            DatasetId::Cora | DatasetId::Citeseer | DatasetId::Pubmed => Domain::Citation,
            DatasetId::Photo | DatasetId::Computers => Domain::Product,
            DatasetId::Proteins | DatasetId::Dd | DatasetId::Nci109 => Domain::Molecular,
        }
    }

    pub fn published_stats(self) -> DatasetStats {
        let single = |nodes: f64, edges: f64, features, classes| DatasetStats {
            graphs: 1,
            nodes,
            edges,
            features,
            node_classes: Some(classes),
            graph_classes: None,
        };
        let multi = |graphs, nodes, edges, features| DatasetStats {
            graphs,
            nodes,
            edges,
            features,
            node_classes: None,
            graph_classes: Some(2),
        };
        match self {
            DatasetId::Cora => single(2708.0, 5429.0, 1433, 7),
            DatasetId::Citeseer => single(3327.0, 4732.0, 3703, 6),
            DatasetId::Pubmed => single(19717.0, 44338.0, 500, 3),
            DatasetId::Photo => single(7650.0, 119081.0, 745, 8),
            DatasetId::Computers => single(13752.0, 245778.0, 767, 10),
            DatasetId::Proteins => multi(1113, 39.1, 72.8, 1),
            DatasetId::Dd => multi(1178, 284.3, 715.7, 89),
            DatasetId::Nci109 => multi(4127, 29.9, 32.3, 38),
        }
    }

    /// Files that must be present under `raw/`.
    pub fn raw_files(self) -> Vec<String> {
        match self {
            DatasetId::Cora | DatasetId::Citeseer => {
                vec![format!("{}.content", self.name()), format!("{}.cites", self.name())]
            }
            DatasetId::Pubmed => vec![
                "Pubmed-Diabetes.NODE.paper.tab".into(),
                "Pubmed-Diabetes.DIRECTED.cites.tab".into(),
            ],
            DatasetId::Photo | DatasetId::Computers => {
                vec![format!("amazon_electronics_{}.npz", self.name())]
            }
            DatasetId::Proteins | DatasetId::Dd | DatasetId::Nci109 => {
                let tu = self.tu_name();
                vec![
                    format!("{tu}_A.txt"),
                    format!("{tu}_graph_indicator.txt"),
                    format!("{tu}_graph_labels.txt"),
                ]
            }
        }
    }

    fn tu_name(self) -> &'static str {
        match self {
            DatasetId::Proteins => "PROTEINS",
            DatasetId::Dd => "DD",
            DatasetId::Nci109 => "NCI109",
            _ => unreachable!("not a TU dataset"),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = GmopeError;

    fn from_str(s: &str) -> Result<Self> {
        DatasetId::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                GmopeError::Config(format!(
                    "unknown dataset '{s}', expected one of {}",
                    DatasetId::ALL.map(DatasetId::name).join(", ")
                ))
            })
    }
}

/// Sidecar describing `processed/data.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedManifest {
    pub format_version: u32,
    pub dataset: String,
    pub domain: Domain,
    pub graph_count: usize,
    pub node_count: usize,
    pub edge_count: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    pub checksum: String,
}

/// Sparse row-compressed feature matrix as read from disk.
#[derive(Debug, Clone, PartialEq)]
struct SparseRows {
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        SparseRows {
            cols,
            indptr,
            indices,
            values,
        }
    }

    fn rows(&self) -> usize {
        self.indptr.len() - 1
    }

    fn to_dense<T: Scalar>(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.rows(), self.cols));
        for r in 0..self.rows() {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[[r, self.indices[k]]] = T::from_f64_lossy(self.values[k]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RawGraph {
    nodes: usize,
    edges: Vec<(usize, usize)>,
    features: SparseRows,
    node_labels: Option<Vec<usize>>,
    graph_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct RawCollection {
    graphs: Vec<RawGraph>,
    node_classes: Option<usize>,
    graph_classes: Option<usize>,
}

/// Load a dataset from `cache_dir`, parsing the raw files on first use and
/// reusing the processed cache afterwards.
pub fn load_dataset<T: Scalar>(name: &str, cache_dir: &Path) -> Result<GraphCollection<T>> {
    let id: DatasetId = name.parse()?;
    let root = cache_dir.join(id.name());
    let processed = root.join("processed");
    let raw = match read_processed(id, &processed) {
        Some(raw) => raw,
        None => {
            let raw = parse_raw(id, &root.join("raw"))?;
            write_processed(id, &processed, &raw)?;
            raw
        }
    };
    into_collection(id, raw)
}

fn into_collection<T: Scalar>(id: DatasetId, raw: RawCollection) -> Result<GraphCollection<T>> {
    let mut graphs = Vec::with_capacity(raw.graphs.len());
    for rg in raw.graphs {
        let mut g = Graph::new(rg.nodes, rg.edges, rg.features.to_dense())?;
        if let Some(l) = rg.node_labels {
            g = g.with_node_labels(l)?;
        }
        if let Some(l) = rg.graph_label {
            g = g.with_graph_label(l);
        }
        graphs.push(g);
    }
    GraphCollection::new(id.name(), id.domain(), graphs, raw.node_classes, raw.graph_classes)
}

fn parse_raw(id: DatasetId, dir: &Path) -> Result<RawCollection> {
    if !dir.is_dir() {
        return Err(GmopeError::ingest(dir, "raw dataset directory not found"));
    }
    for f in id.raw_files() {
        let p = dir.join(&f);
        if !p.is_file() {
            return Err(GmopeError::ingest(p, "required raw file missing"));
        }
    }
    match id {
        DatasetId::Cora | DatasetId::Citeseer => parse_linqs(id, dir),
        DatasetId::Pubmed => parse_pubmed(dir),
        DatasetId::Photo | DatasetId::Computers => parse_amazon(&dir.join(&id.raw_files()[0])),
        DatasetId::Proteins | DatasetId::Dd | DatasetId::Nci109 => parse_tu(id.tu_name(), dir),
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>> + '_> {
    let file = fs::File::open(path).map_err(|e| GmopeError::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| l.map(|l| (i + 1, l)).map_err(|e| GmopeError::io(path, e))))
}

fn dense_labels<K: Ord + Clone>(raw: &[K]) -> (Vec<usize>, usize) {
    let uniq: BTreeSet<K> = raw.iter().cloned().collect();
    let map: BTreeMap<K, usize> = uniq.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
    (raw.iter().map(|k| map[k]).collect(), map.len())
}

/// `<id> <f_1> ... <f_D> <label>` per node plus `<cited> <citing>` pairs.
fn parse_linqs(id: DatasetId, dir: &Path) -> Result<RawCollection> {
    let content = dir.join(format!("{}.content", id.name()));
    let mut index = HashMap::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for line in open_lines(&content)? {
        let (no, line) = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(GmopeError::ingest(&content, format!("line {no}: too few fields")));
        }
        let d = toks.len() - 2;
        if *width.get_or_insert(d) != d {
            return Err(GmopeError::ingest(&content, format!("line {no}: expected {} features, found {d}", width.unwrap())));
        }
        let mut row = Vec::new();
        for (c, t) in toks[1..=d].iter().enumerate() {
            let v: f64 = t
                .parse()
                .map_err(|_| GmopeError::ingest(&content, format!("line {no}: bad feature '{t}'")))?;
            if v != 0.0 {
                row.push((c, v));
            }
        }
        if index.insert(toks[0].to_string(), rows.len()).is_some() {
            return Err(GmopeError::ingest(&content, format!("line {no}: duplicate node id {}", toks[0])));
        }
        rows.push(row);
        labels.push(toks[d + 1].to_string());
    }
    if rows.is_empty() {
        return Err(GmopeError::ingest(&content, "no nodes"));
    }
    let cites = dir.join(format!("{}.cites", id.name()));
    let mut edges = Vec::new();
    for line in open_lines(&cites)? {
        let (no, line) = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 2 {
            return Err(GmopeError::ingest(&cites, format!("line {no}: expected two ids")));
        }
        // Citeseer cites a handful of papers absent from the content file.
        if let (Some(&a), Some(&b)) = (index.get(toks[0]), index.get(toks[1])) {
            edges.push((a, b));
        }
    }
    let (node_labels, classes) = dense_labels(&labels);
    let n = rows.len();
    Ok(RawCollection {
        graphs: vec![RawGraph {
            nodes: n,
            edges,
            features: SparseRows::from_rows(width.unwrap(), rows),
            node_labels: Some(node_labels),
            graph_label: None,
        }],
        node_classes: Some(classes),
        graph_classes: None,
    })
}

fn parse_pubmed(dir: &Path) -> Result<RawCollection> {
    let nodes_path = dir.join("Pubmed-Diabetes.NODE.paper.tab");
    let mut lines = open_lines(&nodes_path)?;
    let _title = lines.next().transpose()?;
    let (_, header) = lines
        .next()
        .transpose()?
        .ok_or_else(|| GmopeError::ingest(&nodes_path, "missing feature header"))?;
    let mut feat_index = HashMap::new();
    for tok in header.split('\t') {
        // numeric:w-rat:0.0
        let mut parts = tok.split(':');
        if let (Some("numeric"), Some(name)) = (parts.next(), parts.next()) {
            let next = feat_index.len();
            feat_index.entry(name.to_string()).or_insert(next);
        }
    }
    if feat_index.is_empty() {
        return Err(GmopeError::ingest(&nodes_path, "feature header lists no numeric features"));
    }
    let mut index = HashMap::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for line in lines {
        let (no, line) = line?;
        let mut toks = line.split('\t');
        let Some(id) = toks.next().filter(|t| !t.is_empty()) else { continue };
        let mut label = None;
        let mut row = Vec::new();
        for tok in toks {
            let Some((k, v)) = tok.split_once('=') else { continue };
            if k == "label" {
                label = Some(v.trim().parse::<i64>().map_err(|_| {
                    GmopeError::ingest(&nodes_path, format!("line {no}: bad label '{v}'"))
                })?);
            } else if let Some(&c) = feat_index.get(k) {
                let val: f64 = v.trim().parse().map_err(|_| {
                    GmopeError::ingest(&nodes_path, format!("line {no}: bad value for {k}"))
                })?;
                row.push((c, val));
            }
        }
        let label = label.ok_or_else(|| GmopeError::ingest(&nodes_path, format!("line {no}: no label")))?;
        index.insert(id.to_string(), rows.len());
        rows.push(row);
        labels.push(label);
    }
    let cites_path = dir.join("Pubmed-Diabetes.DIRECTED.cites.tab");
    let mut edges = Vec::new();
    for line in open_lines(&cites_path)? {
        let (_, line) = line?;
        let ends: Vec<&str> = line
            .split('\t')
            .filter_map(|t| t.strip_prefix("paper:"))
            .collect();
        if let [a, b] = ends[..] {
            if let (Some(&a), Some(&b)) = (index.get(a), index.get(b)) {
                edges.push((a, b));
            }
        }
    }
    let (node_labels, classes) = dense_labels(&labels);
    Ok(RawCollection {
        graphs: vec![RawGraph {
            nodes: rows.len(),
            edges,
            features: SparseRows::from_rows(feat_index.len(), rows),
            node_labels: Some(node_labels),
            graph_label: None,
        }],
        node_classes: Some(classes),
        graph_classes: None,
    })
}

fn npz_ints<R: Read + std::io::Seek>(npz: &mut NpzReader<R>, path: &Path, key: &str) -> Result<Vec<usize>> {
    let name = format!("{key}.npy");
    let as_i64: std::result::Result<Array1<i64>, _> = npz.by_name(&name);
    let vals: Vec<i64> = match as_i64 {
        Ok(a) => a.to_vec(),
        Err(_) => {
            let a: Array1<i32> = npz
                .by_name(&name)
                .map_err(|e| GmopeError::ingest(path, format!("array '{key}': {e}")))?;
            a.iter().map(|&v| v as i64).collect()
        }
    };
    vals.into_iter()
        .map(|v| usize::try_from(v).map_err(|_| GmopeError::ingest(path, format!("negative entry in '{key}'"))))
        .collect()
}

fn npz_floats<R: Read + std::io::Seek>(npz: &mut NpzReader<R>, path: &Path, key: &str) -> Result<Vec<f64>> {
    let name = format!("{key}.npy");
    let as_f32: std::result::Result<Array1<f32>, _> = npz.by_name(&name);
    match as_f32 {
        Ok(a) => Ok(a.iter().map(|&v| v as f64).collect()),
        Err(_) => {
            let a: Array1<f64> = npz
                .by_name(&name)
                .map_err(|e| GmopeError::ingest(path, format!("array '{key}': {e}")))?;
            Ok(a.to_vec())
        }
    }
}

fn csr_from_npz<R: Read + std::io::Seek>(
    npz: &mut NpzReader<R>,
    path: &Path,
    prefix: &str,
) -> Result<SparseRows> {
    let values = npz_floats(npz, path, &format!("{prefix}_data"))?;
    let indices = npz_ints(npz, path, &format!("{prefix}_indices"))?;
    let indptr = npz_ints(npz, path, &format!("{prefix}_indptr"))?;
    let shape = npz_ints(npz, path, &format!("{prefix}_shape"))?;
    if shape.len() != 2 || indptr.len() != shape[0] + 1 || indices.len() != values.len() {
        return Err(GmopeError::ingest(path, format!("inconsistent CSR arrays for '{prefix}'")));
    }
    if indptr.last() != Some(&indices.len()) || indices.iter().any(|&c| c >= shape[1]) {
        return Err(GmopeError::ingest(path, format!("CSR index out of bounds for '{prefix}'")));
    }
    Ok(SparseRows {
        cols: shape[1],
        indptr,
        indices,
        values,
    })
}

fn parse_amazon(path: &Path) -> Result<RawCollection> {
    let file = fs::File::open(path).map_err(|e| GmopeError::io(path, e))?;
    let mut npz = NpzReader::new(file).map_err(|e| GmopeError::ingest(path, e.to_string()))?;
    let adj = csr_from_npz(&mut npz, path, "adj")?;
    let attr = csr_from_npz(&mut npz, path, "attr")?;
    let labels = npz_ints(&mut npz, path, "labels")?;
    let n = adj.rows();
    if attr.rows() != n || labels.len() != n {
        return Err(GmopeError::ingest(path, "adjacency, attributes and labels disagree on node count"));
    }
    let mut edges = Vec::with_capacity(adj.indices.len());
    for r in 0..n {
        for k in adj.indptr[r]..adj.indptr[r + 1] {
            edges.push((r, adj.indices[k]));
        }
    }
    let (node_labels, classes) = dense_labels(&labels);
    Ok(RawCollection {
        graphs: vec![RawGraph {
            nodes: n,
            edges,
            features: attr,
            node_labels: Some(node_labels),
            graph_label: None,
        }],
        node_classes: Some(classes),
        graph_classes: None,
    })
}

fn read_numbers<V: FromStr>(path: &Path) -> Result<Vec<Vec<V>>> {
    let mut out = Vec::new();
    for line in open_lines(path)? {
        let (no, line) = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<V>()
                    .map_err(|_| GmopeError::ingest(path, format!("line {no}: cannot parse '{}'", t.trim())))
            })
            .collect::<Result<Vec<V>>>()?;
        out.push(row);
    }
    Ok(out)
}

/// TU benchmark text format: 1-based global node ids, one graph id per node.
fn parse_tu(tu: &str, dir: &Path) -> Result<RawCollection> {
    let p = |suffix: &str| dir.join(format!("{tu}_{suffix}.txt"));
    let indicator: Vec<usize> = read_numbers::<usize>(&p("graph_indicator"))?
        .into_iter()
        .map(|r| r[0])
        .collect();
    let graph_labels_raw: Vec<i64> = read_numbers::<i64>(&p("graph_labels"))?
        .into_iter()
        .map(|r| r[0])
        .collect();
    let graph_count = graph_labels_raw.len();
    let n_total = indicator.len();
    if indicator.iter().any(|&g| g == 0 || g > graph_count) {
        return Err(GmopeError::ingest(p("graph_indicator"), "graph id outside [1, #graphs]"));
    }
    if indicator.windows(2).any(|w| w[1] < w[0]) {
        return Err(GmopeError::ingest(p("graph_indicator"), "node ids must be grouped by graph"));
    }

    let attributes = p("node_attributes");
    let node_labels = p("node_labels");
    let features: SparseRows = if attributes.is_file() {
        let rows = read_numbers::<f64>(&attributes)?;
        let width = rows.first().map_or(1, Vec::len);
        if rows.len() != n_total || rows.iter().any(|r| r.len() != width) {
            return Err(GmopeError::ingest(&attributes, "attribute rows disagree with node count or width"));
        }
        SparseRows::from_rows(width, rows.into_iter().map(|r| r.into_iter().enumerate().collect()).collect())
    } else if node_labels.is_file() {
        let labels: Vec<i64> = read_numbers::<i64>(&node_labels)?.into_iter().map(|r| r[0]).collect();
        if labels.len() != n_total {
            return Err(GmopeError::ingest(&node_labels, "node label count disagrees with node count"));
        }
        let (dense, width) = dense_labels(&labels);
        SparseRows::from_rows(width, dense.into_iter().map(|c| vec![(c, 1.0)]).collect())
    } else {
        SparseRows::from_rows(1, vec![vec![(0, 1.0)]; n_total])
    };

    // Offsets of each graph's first node.
    let mut start = vec![0usize; graph_count + 1];
    for &g in &indicator {
        start[g] += 1;
    }
    for g in 1..=graph_count {
        start[g] += start[g - 1];
    }
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    for row in read_numbers::<usize>(&p("A"))? {
        let (u, v) = match row[..] {
            [u, v] if u >= 1 && v >= 1 && u <= n_total && v <= n_total => (u - 1, v - 1),
            _ => return Err(GmopeError::ingest(p("A"), format!("bad edge row {row:?}"))),
        };
        let g = indicator[u] - 1;
        if indicator[v] - 1 != g {
            return Err(GmopeError::ingest(p("A"), format!("edge ({}, {}) crosses graphs", u + 1, v + 1)));
        }
        edges[g].push((u - start[g], v - start[g]));
    }
    let (glabels, classes) = dense_labels(&graph_labels_raw);
    let mut graphs = Vec::with_capacity(graph_count);
    for (g, graph_edges) in edges.into_iter().enumerate() {
        let (lo, hi) = (start[g], start[g + 1]);
        let rows = (lo..hi)
            .map(|r| {
                (features.indptr[r]..features.indptr[r + 1])
                    .map(|k| (features.indices[k], features.values[k]))
                    .collect()
            })
            .collect();
        graphs.push(RawGraph {
            nodes: hi - lo,
            edges: graph_edges,
            features: SparseRows::from_rows(features.cols, rows),
            node_labels: None,
            graph_label: Some(glabels[g]),
        });
    }
    Ok(RawCollection {
        graphs,
        node_classes: None,
        graph_classes: Some(classes),
    })
}

fn put_u64(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u64).to_le_bytes());
}

fn encode_processed(raw: &RawCollection) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PROCESSED_MAGIC);
    buf.extend_from_slice(&PROCESSED_VERSION.to_le_bytes());
    put_u64(&mut buf, raw.node_classes.map_or(0, |c| c + 1));
    put_u64(&mut buf, raw.graph_classes.map_or(0, |c| c + 1));
    put_u64(&mut buf, raw.graphs.len());
    for g in &raw.graphs {
        put_u64(&mut buf, g.nodes);
        put_u64(&mut buf, g.edges.len());
        for &(u, v) in &g.edges {
            put_u64(&mut buf, u);
            put_u64(&mut buf, v);
        }
        match &g.node_labels {
            Some(l) => {
                buf.push(1);
                l.iter().for_each(|&x| put_u64(&mut buf, x));
            }
            None => buf.push(0),
        }
        put_u64(&mut buf, g.graph_label.map_or(0, |l| l + 1));
        put_u64(&mut buf, g.features.cols);
        put_u64(&mut buf, g.features.values.len());
        g.features.indptr.iter().for_each(|&x| put_u64(&mut buf, x));
        g.features.indices.iter().for_each(|&x| put_u64(&mut buf, x));
        for &v in &g.features.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<usize> {
        let b = self.take(8)?;
        usize::try_from(u64::from_le_bytes(b.try_into().ok()?)).ok()
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn vec(&mut self, n: usize) -> Option<Vec<usize>> {
        if n > self.buf.len() / 8 {
            return None;
        }
        (0..n).map(|_| self.u64()).collect()
    }
}

fn decode_processed(buf: &[u8]) -> Option<RawCollection> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != PROCESSED_MAGIC {
        return None;
    }
    if u32::from_le_bytes(c.take(4)?.try_into().ok()?) != PROCESSED_VERSION {
        return None;
    }
    let node_classes = c.u64()?.checked_sub(1);
    let graph_classes = c.u64()?.checked_sub(1);
    let count = c.u64()?;
    let mut graphs = Vec::new();
    for _ in 0..count {
        let nodes = c.u64()?;
        let m = c.u64()?;
        let flat = c.vec(m.checked_mul(2)?)?;
        let edges = flat.chunks(2).map(|p| (p[0], p[1])).collect();
        let node_labels = match c.take(1)?[0] {
            1 => Some(c.vec(nodes)?),
            _ => None,
        };
        let graph_label = c.u64()?.checked_sub(1);
        let cols = c.u64()?;
        let nnz = c.u64()?;
        let indptr = c.vec(nodes.checked_add(1)?)?;
        let indices = c.vec(nnz)?;
        let values = (0..nnz).map(|_| c.f64()).collect::<Option<Vec<_>>>()?;
        graphs.push(RawGraph {
            nodes,
            edges,
            features: SparseRows {
                cols,
                indptr,
                indices,
                values,
            },
            node_labels,
            graph_label,
        });
    }
    (c.pos == buf.len()).then_some(RawCollection {
        graphs,
        node_classes,
        graph_classes,
    })
}

fn read_processed(id: DatasetId, dir: &Path) -> Option<RawCollection> {
    let manifest: ProcessedManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json")).ok()?).ok()?;
    let data = fs::read(dir.join("data.bin")).ok()?;
    if manifest.format_version != PROCESSED_VERSION
        || manifest.dataset != id.name()
        || manifest.checksum != hex::encode(Sha256::digest(&data))
    {
        log::warn!("processed cache for {id} is stale or corrupt, re-parsing raw files");
        return None;
    }
    decode_processed(&data)
}

fn write_processed(id: DatasetId, dir: &Path, raw: &RawCollection) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GmopeError::io(dir, e))?;
    let data = encode_processed(raw);
    let manifest = ProcessedManifest {
        format_version: PROCESSED_VERSION,
        dataset: id.name().to_string(),
        domain: id.domain(),
        graph_count: raw.graphs.len(),
        node_count: raw.graphs.iter().map(|g| g.nodes).sum(),
        edge_count: raw.graphs.iter().map(|g| undirected_count(&g.edges)).sum(),
        feature_dim: raw.graphs[0].features.cols,
        class_count: raw.node_classes.or(raw.graph_classes).unwrap_or(0),
        checksum: hex::encode(Sha256::digest(&data)),
    };
    write_file(&dir.join("data.bin"), &data)?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), &json)
}

fn undirected_count(edges: &[(usize, usize)]) -> usize {
    edges
        .iter()
        .filter(|(u, v)| u != v)
        .map(|&(u, v)| (u.min(v), u.max(v)))
        .collect::<BTreeSet<_>>()
        .len()
}

fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| GmopeError::io(path, e))?;
    f.write_all(bytes).map_err(|e| GmopeError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_dataset_is_configuration_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset::<f64>("foo", dir.path()).unwrap_err();
        assert!(matches!(err, GmopeError::Config(_)));
        assert!(err.is_configuration());
    }

    #[test]
    fn missing_raw_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        match load_dataset::<f64>("cora", dir.path()).unwrap_err() {
            GmopeError::Ingestion { path, .. } => assert!(path.ends_with("cora/raw")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn published_stats_table() {
        let cora = DatasetId::Cora.published_stats();
        assert_eq!((cora.nodes, cora.features, cora.node_classes), (2708.0, 1433, Some(7)));
        let p = DatasetId::Proteins.published_stats();
        assert_eq!((p.graphs, p.graph_classes), (1113, Some(2)));
    }

    #[test]
    fn processed_encoding_round_trips() {
        let raw = RawCollection {
            graphs: vec![RawGraph {
                nodes: 3,
                edges: vec![(0, 1), (2, 1)],
                features: SparseRows::from_rows(2, vec![vec![(1, 0.5)], vec![], vec![(0, 2.0)]]),
                node_labels: Some(vec![0, 1, 0]),
                graph_label: Some(1),
            }],
            node_classes: Some(2),
            graph_classes: None,
        };
        let bytes = encode_processed(&raw);
        assert_eq!(decode_processed(&bytes), Some(raw));
        assert_eq!(decode_processed(&bytes[..bytes.len() - 3]), None);
    }
}
