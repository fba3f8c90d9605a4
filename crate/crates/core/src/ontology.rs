//! Rooted diagnosis hierarchy with binary-lifting LCA queries and
//! root-excluded path-set Jaccard similarity between codes.

use std::collections::HashMap;
use std::io::BufRead;

use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum OntologyError {
    #[error("node `{0}` is defined more than once")]
    DuplicateNode(String),
    #[error("node `{child}` references undefined parent `{parent}`")]
    MissingParent { child: String, parent: String },
    #[error("parent chain of `{0}` never reaches the root")]
    CycleDetected(String),
    #[error("more than one parentless record: `{0}` and `{1}`")]
    MultipleRoots(String, String),
    #[error("ontology contains no nodes")]
    EmptyOntology,
    #[error("unknown code `{0}`")]
    UnknownCode(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Dense index of a node inside one [`OntologyTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeIdx(pub u32);

impl NodeIdx {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodePair {
    pub a: NodeIdx,
    pub b: NodeIdx,
}

/// One `child_id,parent_id,label` record. `parent == None` marks the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeRecord {
    pub child: String,
    pub parent: Option<String>,
    pub label: String,
}

/// Immutable rooted tree. Node ids are interned to dense indices; the
/// ancestor table `up[k][v]` holds the 2^k-th ancestor of `v` (saturating
/// at the root).
#[derive(Debug, Clone)]
pub struct OntologyTree {
    ids: Vec<String>,
    labels: Vec<String>,
    parent: Vec<Option<NodeIdx>>,
    depth: Vec<u32>,
    index: HashMap<String, NodeIdx>,
    root: NodeIdx,
    up: Vec<Vec<NodeIdx>>,
}

impl OntologyTree {
    /// Parses an edge-list stream. Blank lines and `#` comments are skipped.
    pub fn load<R: BufRead>(reader: R) -> Result<Self, OntologyError> {
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| OntologyError::Io(e.to_string()))?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let mut fields = trimmed.splitn(3, ',');
            let child = fields.next().unwrap_or("").trim();
            let parent = fields.next().ok_or_else(|| OntologyError::Malformed {
                line: lineno + 1,
                reason: "expected `child_id,parent_id,label`".into(),
            })?;
            let label = fields.next().unwrap_or("").trim();
            if child.is_empty() {
                return Err(OntologyError::Malformed {
                    line: lineno + 1,
                    reason: "empty child id".into(),
                });
            }
            let parent = parent.trim();
            records.push(EdgeRecord {
                child: child.to_string(),
                parent: (!parent.is_empty()).then(|| parent.to_string()),
                label: label.to_string(),
            });
        }
        Self::from_records(records)
    }

    pub fn load_path(path: &std::path::Path) -> Result<Self, OntologyError> {
        let file = std::fs::File::open(path).map_err(|e| OntologyError::Io(format!("{}: {e}", path.display())))?;
        Self::load(std::io::BufReader::new(file))
    }

    pub fn from_records(records: Vec<EdgeRecord>) -> Result<Self, OntologyError> {
        if records.is_empty() {
            return Err(OntologyError::EmptyOntology);
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if index.insert(rec.child.clone(), NodeIdx(i as u32)).is_some() {
                return Err(OntologyError::DuplicateNode(rec.child.clone()));
            }
        }

        let n = records.len();
        let mut parent = vec![None; n];
        let mut root: Option<NodeIdx> = None;
        for (i, rec) in records.iter().enumerate() {
            match &rec.parent {
                None => {
                    if let Some(prev) = root {
                        return Err(OntologyError::MultipleRoots(
                            records[prev.index()].child.clone(),
                            rec.child.clone(),
                        ));
                    }
                    root = Some(NodeIdx(i as u32));
                }
                Some(p) => {
                    let pidx = *index.get(p).ok_or_else(|| OntologyError::MissingParent {
                        child: rec.child.clone(),
                        parent: p.clone(),
                    })?;
                    parent[i] = Some(pidx);
                }
            }
        }
        let root = match root {
            Some(r) => r,
            // every node has a parent, so following any chain must loop
            None => return Err(OntologyError::CycleDetected(records[0].child.clone())),
        };

        let mut children: Vec<Vec<NodeIdx>> = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[p.index()].push(NodeIdx(i as u32));
            }
        }
        let mut depth = vec![u32::MAX; n];
        depth[root.index()] = 0;
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            for &c in &children[v.index()] {
                depth[c.index()] = depth[v.index()] + 1;
                stack.push(c);
            }
        }
        if let Some(unreached) = depth.iter().position(|&d| d == u32::MAX) {
            return Err(OntologyError::CycleDetected(records[unreached].child.clone()));
        }

        let max_depth = depth.iter().copied().max().unwrap_or(0);
        let levels = (32 - max_depth.max(1).leading_zeros()) as usize;
        let mut up = Vec::with_capacity(levels.max(1));
        up.push((0..n).map(|i| parent[i].unwrap_or(root)).collect::<Vec<_>>());
        for k in 1..levels.max(1) {
            let prev: &Vec<NodeIdx> = &up[k - 1];
            let next = (0..n).map(|i| prev[prev[i].index()]).collect();
            up.push(next);
        }

        let (ids, labels) = records.into_iter().map(|r| (r.child, r.label)).unzip();
        Ok(Self {
            ids,
            labels,
            parent,
            depth,
            index,
            root,
            up,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn root(&self) -> NodeIdx {
        self.root
    }

    pub fn id(&self, node: NodeIdx) -> &str {
        &self.ids[node.index()]
    }

    pub fn label(&self, node: NodeIdx) -> &str {
        &self.labels[node.index()]
    }

    pub fn parent(&self, node: NodeIdx) -> Option<NodeIdx> {
        self.parent[node.index()]
    }

    pub fn depth(&self, node: NodeIdx) -> u32 {
        self.depth[node.index()]
    }

    pub fn max_depth(&self) -> u32 {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeIdx> + '_ {
        (0..self.ids.len() as u32).map(NodeIdx)
    }

    pub fn leaves(&self) -> Vec<NodeIdx> {
        let mut has_child = vec![false; self.len()];
        for p in self.parent.iter().flatten() {
            has_child[p.index()] = true;
        }
        self.nodes().filter(|n| !has_child[n.index()]).collect()
    }

    pub fn lookup(&self, id: &str) -> Result<NodeIdx, OntologyError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| OntologyError::UnknownCode(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn pair(&self, a: &str, b: &str) -> Result<CodePair, OntologyError> {
        Ok(CodePair {
            a: self.lookup(a)?,
            b: self.lookup(b)?,
        })
    }

    fn check(&self, node: NodeIdx) -> Result<(), OntologyError> {
        if node.index() < self.len() {
            Ok(())
        } else {
            Err(OntologyError::UnknownCode(format!("#{}", node.0)))
        }
    }

    /// Walks `node` up by `steps` generations.
    fn ancestor(&self, mut node: NodeIdx, mut steps: u32) -> NodeIdx {
        let mut k = 0;
        while steps > 0 {
            if steps & 1 == 1 {
                node = self.up[k][node.index()];
            }
            steps >>= 1;
            k += 1;
        }
        node
    }

    pub fn lca(&self, pair: CodePair) -> Result<NodeIdx, OntologyError> {
        self.check(pair.a)?;
        self.check(pair.b)?;
        Ok(self.lca_unchecked(pair.a, pair.b))
    }

    pub(crate) fn lca_unchecked(&self, a: NodeIdx, b: NodeIdx) -> NodeIdx {
        let (da, db) = (self.depth(a), self.depth(b));
        let (mut a, mut b) = if da >= db {
            (self.ancestor(a, da - db), b)
        } else {
            (a, self.ancestor(b, db - da))
        };
        if a == b {
            return a;
        }
        for k in (0..self.up.len()).rev() {
            let (ua, ub) = (self.up[k][a.index()], self.up[k][b.index()]);
            if ua != ub {
                a = ua;
                b = ub;
            }
        }
        self.up[0][a.index()]
    }

    /// Jaccard overlap of the root-excluded root paths of the two codes.
    pub fn code_similarity(&self, pair: CodePair) -> Result<f64, OntologyError> {
        self.check(pair.a)?;
        self.check(pair.b)?;
        Ok(self.similarity_unchecked(pair.a, pair.b))
    }

    #[inline]
    pub(crate) fn similarity_unchecked(&self, a: NodeIdx, b: NodeIdx) -> f64 {
        if a == b {
            return 1.0;
        }
        let shared = self.depth(self.lca_unchecked(a, b));
        let union = self.depth(a) + self.depth(b) - shared;
        shared as f64 / union as f64
    }

    /// Node ids on the path from the root down to `node`, root first.
    pub fn root_path(&self, node: NodeIdx) -> Vec<NodeIdx> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Content hash over the sorted edge list; independent of record order.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut edges: Vec<(&str, &str, &str)> = self
            .nodes()
            .map(|n| {
                (
                    self.id(n),
                    self.parent(n).map(|p| self.id(p)).unwrap_or(""),
                    self.label(n),
                )
            })
            .collect();
        edges.sort_unstable();
        let mut hasher = Sha256::new();
        for (c, p, l) in edges {
            hasher.update(c.as_bytes());
            hasher.update([0u8]);
            hasher.update(p.as_bytes());
            hasher.update([0u8]);
            hasher.update(l.as_bytes());
            hasher.update(*b"\n");
        }
        hasher.finalize().into()
    }

    /// Serializes back into the edge-list format, parents before children.
    pub fn to_edge_list(&self) -> String {
        let mut order: Vec<NodeIdx> = self.nodes().collect();
        order.sort_by_key(|n| (self.depth(*n), n.0));
        let mut out = String::new();
        for n in order {
            let parent = self.parent(n).map(|p| self.id(p)).unwrap_or("");
            out.push_str(&format!("{},{},{}\n", self.id(n), parent, self.label(n)));
        }
        out
    }
}
