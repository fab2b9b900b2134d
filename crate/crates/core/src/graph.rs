//! Propagation graphs, corpora and the JSON-lines corpus format.
//!
//! One record per line:
//!
//! ```json
//! {"graph_id":"g0","label":"fake","root":0,
//!  "features":[[0.1,0.2],[0.3,0.4]],"edges":[[0,1]],"causal_flags":[true,false]}
//! ```

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use csda_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, RecordError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    True,
    Fake,
}

impl Label {
    /// Class index used by the classifiers: true news 0, fake news 1.
    pub fn class(self) -> usize {
        match self {
            Label::True => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 0 {
            Label::True
        } else {
            Label::Fake
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionTag {
    InDistribution,
    OutOfDistribution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationGraph {
    pub graph_id: String,
    /// `N x d` node features.
    pub features: Tensor,
    /// Directed `(parent, child)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
    pub label: Option<Label>,
    pub causal_flags: Option<Vec<bool>>,
}

impl PropagationGraph {
    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Checks the structural invariants: at least one node, edge endpoints in
    /// range, no self-edges, acyclic, every node reachable from the root.
    pub fn validate(&self) -> std::result::Result<(), RecordError> {
        let n = self.num_nodes();
        if n == 0 {
            return Err(RecordError::Malformed("graph has no nodes".into()));
        }
        if self.root >= n {
            return Err(RecordError::IndexOutOfRange {
                index: self.root,
                nodes: n,
            });
        }
        for &(u, v) in &self.edges {
            for idx in [u, v] {
                if idx >= n {
                    return Err(RecordError::IndexOutOfRange { index: idx, nodes: n });
                }
            }
            if u == v {
                return Err(RecordError::SelfEdge(u));
            }
        }
        if let Some(flags) = &self.causal_flags {
            if flags.len() != n {
                return Err(RecordError::Malformed(format!(
                    "{} causal flags for {n} nodes",
                    flags.len()
                )));
            }
        }
        let children = self.children();
        // Kahn's algorithm detects cycles.
        let mut indegree = vec![0usize; n];
        for &(_, v) in &self.edges {
            indegree[v] += 1;
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(u) = queue.pop_front() {
            seen += 1;
            for &v in &children[u] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        if seen != n {
            return Err(RecordError::Cycle);
        }
        let mut reached = vec![false; n];
        reached[self.root] = true;
        let mut stack = vec![self.root];
        while let Some(u) = stack.pop() {
            for &v in &children[u] {
                if !reached[v] {
                    reached[v] = true;
                    stack.push(v);
                }
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return Err(RecordError::Unreachable(i));
        }
        Ok(())
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_nodes()];
        for &(u, v) in &self.edges {
            out[u].push(v);
        }
        out
    }

    /// Undirected neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_nodes()];
        for &(u, v) in &self.edges {
            out[u].push(v);
            out[v].push(u);
        }
        out
    }

    /// For each node, the index of the first edge pointing at it.
    pub fn parent_edge(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_nodes()];
        for (e, &(_, v)) in self.edges.iter().enumerate() {
            out[v].get_or_insert(e);
        }
        out
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> PropagationGraph {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n);
        let mut rows = vec![Vec::new(); n];
        for (i, &p) in perm.iter().enumerate() {
            rows[p] = self.features.row(i).to_vec();
        }
        let causal_flags = self.causal_flags.as_ref().map(|f| {
            let mut out = vec![false; n];
            for (i, &p) in perm.iter().enumerate() {
                out[p] = f[i];
            }
            out
        });
        PropagationGraph {
            graph_id: self.graph_id.clone(),
            features: Tensor::from_rows(&rows).expect("rectangular"),
            edges: self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect(),
            root: perm[self.root],
            label: self.label,
            causal_flags,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    graph_id: String,
    label: Option<Label>,
    root: usize,
    features: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    causal_flags: Option<Vec<bool>>,
}

impl Record {
    fn into_graph(self) -> std::result::Result<PropagationGraph, RecordError> {
        let features =
            Tensor::from_rows(&self.features).map_err(|e| RecordError::Malformed(e.to_string()))?;
        let g = PropagationGraph {
            graph_id: self.graph_id,
            features,
            edges: self.edges.into_iter().map(|[u, v]| (u, v)).collect(),
            root: self.root,
            label: self.label,
            causal_flags: self.causal_flags,
        };
        g.validate()?;
        Ok(g)
    }

    fn from_graph(g: &PropagationGraph) -> Self {
        Record {
            graph_id: g.graph_id.clone(),
            label: g.label,
            root: g.root,
            features: g.features.to_rows(),
            edges: g.edges.iter().map(|&(u, v)| [u, v]).collect(),
            causal_flags: g.causal_flags.clone(),
        }
    }
}

/// A set of graphs sharing one feature dimension.
///
/// Label reads made for training on an out-of-distribution corpus are
/// counted, so experiment reports can show that zero-shot runs never
/// touched OOD labels.
#[derive(Debug)]
pub struct Corpus {
    graphs: Vec<PropagationGraph>,
    tag: DistributionTag,
    feature_dim: usize,
    training_label_reads: AtomicUsize,
}

impl Clone for Corpus {
    fn clone(&self) -> Self {
        Self {
            graphs: self.graphs.clone(),
            tag: self.tag,
            feature_dim: self.feature_dim,
            training_label_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.graphs == other.graphs && self.tag == other.tag && self.feature_dim == other.feature_dim
    }
}

impl Corpus {
    pub fn new(graphs: Vec<PropagationGraph>, tag: DistributionTag) -> Result<Self> {
        let feature_dim = graphs.first().map_or(0, |g| g.feature_dim());
        for g in &graphs {
            g.validate()?;
            if g.feature_dim() != feature_dim {
                return Err(RecordError::FeatureDim {
                    expected: feature_dim,
                    found: g.feature_dim(),
                }
                .into());
            }
            if tag == DistributionTag::InDistribution && g.label.is_none() {
                return Err(Error::Contract(format!(
                    "in-distribution graph {} has no label",
                    g.graph_id
                )));
            }
        }
        Ok(Self {
            graphs,
            tag,
            feature_dim,
            training_label_reads: AtomicUsize::new(0),
        })
    }

    pub fn graphs(&self) -> &[PropagationGraph] {
        &self.graphs
    }

    pub fn into_graphs(self) -> Vec<PropagationGraph> {
        self.graphs
    }

    pub fn tag(&self) -> DistributionTag {
        self.tag
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn is_labelled(&self) -> bool {
        self.graphs.iter().all(|g| g.label.is_some())
    }

    /// Label of graph `i` for use as a training target.
    pub fn training_label(&self, i: usize) -> Result<Label> {
        if self.tag == DistributionTag::OutOfDistribution {
            self.training_label_reads.fetch_add(1, Ordering::Relaxed);
        }
        self.graphs[i].label.ok_or_else(|| {
            Error::Contract(format!("graph {} has no label", self.graphs[i].graph_id))
        })
    }

    /// Number of training label reads on this corpus (always 0 for
    /// in-distribution corpora).
    pub fn training_label_reads(&self) -> usize {
        self.training_label_reads.load(Ordering::Relaxed)
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            tag: self.tag,
            feature_dim: self.feature_dim,
            training_label_reads: AtomicUsize::new(0),
        }
    }

    /// Narrows to the in-distribution view accepted by zero-shot training.
    pub fn in_distribution(self) -> Result<InDistCorpus> {
        if self.tag != DistributionTag::InDistribution {
            return Err(Error::Contract(
                "expected an in-distribution corpus".into(),
            ));
        }
        Ok(InDistCorpus(self))
    }
}

/// A labelled corpus known to be in-distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct InDistCorpus(Corpus);

impl std::ops::Deref for InDistCorpus {
    type Target = Corpus;
    fn deref(&self) -> &Corpus {
        &self.0
    }
}

impl InDistCorpus {
    pub fn into_inner(self) -> Corpus {
        self.0
    }
}

pub fn load_corpus(path: impl AsRef<Path>, tag: DistributionTag) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut graphs = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |source| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        };
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| at(RecordError::Malformed(e.to_string())))?;
        let g = record.into_graph().map_err(at)?;
        match dim {
            Some(d) if d != g.feature_dim() => {
                return Err(at(RecordError::FeatureDim {
                    expected: d,
                    found: g.feature_dim(),
                }))
            }
            _ => dim = Some(g.feature_dim()),
        }
        if tag == DistributionTag::InDistribution && g.label.is_none() {
            return Err(at(RecordError::Malformed(
                "in-distribution record without label".into(),
            )));
        }
        graphs.push(g);
    }
    Corpus::new(graphs, tag)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for g in corpus.graphs() {
        serde_json::to_writer(&mut w, &Record::from_graph(g))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn parse_err(lines: &[&str]) -> RecordError {
        let f = write_lines(lines);
        match load_corpus(f.path(), DistributionTag::OutOfDistribution) {
            Err(Error::Parse { source, .. }) => source,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn single_node_graph() {
        let f = write_lines(&[r#"{"graph_id":"a","label":"true","root":0,"features":[[1.0,2.0]],"edges":[]}"#]);
        let c = load_corpus(f.path(), DistributionTag::InDistribution).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.feature_dim(), 2);
        assert_eq!(c.graphs()[0].label, Some(Label::True));
    }

    #[test]
    fn self_edge_rejected() {
        let e = parse_err(&[r#"{"graph_id":"a","label":null,"root":0,"features":[[1.0],[2.0]],"edges":[[0,1],[0,0]]}"#]);
        assert_eq!(e, RecordError::SelfEdge(0));
    }

    #[test]
    fn cycle_rejected() {
        let e = parse_err(&[r#"{"graph_id":"a","label":null,"root":0,"features":[[1.0],[2.0],[3.0]],"edges":[[0,1],[1,2],[2,1]]}"#]);
        assert_eq!(e, RecordError::Cycle);
    }

    #[test]
    fn out_of_range_rejected() {
        let e = parse_err(&[r#"{"graph_id":"a","label":null,"root":0,"features":[[1.0]],"edges":[[0,3]]}"#]);
        assert_eq!(e, RecordError::IndexOutOfRange { index: 3, nodes: 1 });
    }

    #[test]
    fn inconsistent_dim_rejected_with_line() {
        let f = write_lines(&[
            r#"{"graph_id":"a","label":null,"root":0,"features":[[1.0]],"edges":[]}"#,
            r#"{"graph_id":"b","label":null,"root":0,"features":[[1.0,2.0]],"edges":[]}"#,
        ]);
        match load_corpus(f.path(), DistributionTag::OutOfDistribution) {
            Err(Error::Parse { line, source, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(source, RecordError::FeatureDim { expected: 1, found: 2 });
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_json_rejected() {
        assert!(matches!(parse_err(&["{not json"]), RecordError::Malformed(_)));
    }

    #[test]
    fn unreachable_node_rejected() {
        let e = parse_err(&[r#"{"graph_id":"a","label":null,"root":0,"features":[[1.0],[2.0],[3.0]],"edges":[[0,1]]}"#]);
        assert_eq!(e, RecordError::Unreachable(2));
    }

    #[test]
    fn ood_label_reads_are_counted() {
        let g = PropagationGraph {
            graph_id: "x".into(),
            features: Tensor::zeros(1, 1),
            edges: vec![],
            root: 0,
            label: Some(Label::Fake),
            causal_flags: None,
        };
        let ood = Corpus::new(vec![g.clone()], DistributionTag::OutOfDistribution).unwrap();
        assert_eq!(ood.training_label_reads(), 0);
        ood.training_label(0).unwrap();
        assert_eq!(ood.training_label_reads(), 1);
        let ind = Corpus::new(vec![g], DistributionTag::InDistribution).unwrap();
        ind.training_label(0).unwrap();
        assert_eq!(ind.training_label_reads(), 0);
        assert!(ood.in_distribution().is_err());
    }
}
