//! Directed acyclic graphs over named variables, plus the connectivity masks
//! that bake a graph into a masked conditioner network.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A validated DAG over `d` named variables.
///
/// `adj[[j, i]] == 1` means there is a directed edge `j -> i` (j is a parent
/// of i). A topological order is computed on construction; ties are broken by
/// ascending variable index so the order is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalDag {
    names: Vec<String>,
    adj: Array2<u8>,
    topo: Vec<usize>,
}

impl CausalDag {
    /// Builds a DAG from an adjacency matrix. Fails with `Error::Cycle` if the
    /// matrix contains a directed cycle, `Error::Shape` if it is not square or
    /// does not match `names`.
    pub fn from_adjacency(names: Vec<String>, adj: Array2<u8>) -> Result<Self> {
        let d = names.len();
        if adj.nrows() != d || adj.ncols() != d {
            return Err(Error::Shape(format!(
                "adjacency is {}x{}, expected {d}x{d}",
                adj.nrows(),
                adj.ncols()
            )));
        }
        for ((j, i), &v) in adj.indexed_iter() {
            if v > 1 {
                return Err(Error::Config(format!(
                    "adjacency[{j}][{i}] = {v}, entries must be 0 or 1"
                )));
            }
            if j == i && v != 0 {
                return Err(Error::Cycle(names[j].clone()));
            }
        }
        let topo = toposort(&adj).map_err(|v| Error::Cycle(names[v].clone()))?;
        Ok(Self { names, adj, topo })
    }

    /// Builds a DAG from `(parent, child)` index pairs.
    pub fn from_edges(names: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let d = names.len();
        let mut adj = Array2::<u8>::zeros((d, d));
        for &(j, i) in edges {
            if j >= d || i >= d {
                return Err(Error::Index(format!("edge ({j}, {i}) with {d} variables")));
            }
            adj[[j, i]] = 1;
        }
        Self::from_adjacency(names, adj)
    }

    /// Builds a DAG from `(parent, child)` name pairs.
    pub fn from_named_edges(names: Vec<String>, edges: &[(&str, &str)]) -> Result<Self> {
        let mut idx_edges = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            let ja = names
                .iter()
                .position(|n| n == a)
                .ok_or_else(|| Error::Config(format!("unknown variable `{a}` in edge list")))?;
            let jb = names
                .iter()
                .position(|n| n == b)
                .ok_or_else(|| Error::Config(format!("unknown variable `{b}` in edge list")))?;
            idx_edges.push((ja, jb));
        }
        Self::from_edges(names, &idx_edges)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    #[inline]
    pub fn names(&self) -> &[String] {
        &self.names
    }

    #[inline]
    pub fn adjacency(&self) -> &Array2<u8> {
        &self.adj
    }

    /// Topological order; every parent appears before each of its children.
    #[inline]
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    #[inline]
    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.adj[[parent, child]] == 1
    }

    pub fn parents(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.adj[[j, i]] == 1).collect()
    }

    pub fn children(&self, j: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.adj[[j, i]] == 1).collect()
    }

    /// True when the variable has no parents.
    pub fn is_source(&self, i: usize) -> bool {
        (0..self.len()).all(|j| self.adj[[j, i]] == 0)
    }

    /// Strict descendants of `i` in ascending index order, `i` excluded.
    pub fn descendants(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.len() {
            return Err(Error::Index(format!(
                "variable {i} with {} variables",
                self.len()
            )));
        }
        let mut seen = vec![false; self.len()];
        let mut stack = vec![i];
        while let Some(v) = stack.pop() {
            for c in self.children(v) {
                if !seen[c] {
                    seen[c] = true;
                    stack.push(c);
                }
            }
        }
        seen[i] = false;
        Ok((0..self.len()).filter(|&v| seen[v]).collect())
    }

    /// Strict ancestors of `i` in ascending index order, `i` excluded.
    pub fn ancestors(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.len() {
            return Err(Error::Index(format!(
                "variable {i} with {} variables",
                self.len()
            )));
        }
        let mut seen = vec![false; self.len()];
        let mut stack = vec![i];
        while let Some(v) = stack.pop() {
            for p in self.parents(v) {
                if !seen[p] {
                    seen[p] = true;
                    stack.push(p);
                }
            }
        }
        seen[i] = false;
        Ok((0..self.len()).filter(|&v| seen[v]).collect())
    }
}

/// Kahn's algorithm; smallest-index-first among ready nodes so the result is
/// deterministic. Returns the index of some node on a cycle on failure.
fn toposort(adj: &Array2<u8>) -> std::result::Result<Vec<usize>, usize> {
    let d = adj.nrows();
    let mut indeg: Vec<usize> = (0..d)
        .map(|i| (0..d).filter(|&j| adj[[j, i]] == 1).count())
        .collect();
    let mut placed = vec![false; d];
    let mut order = Vec::with_capacity(d);
    for _ in 0..d {
        let next = (0..d).find(|&i| !placed[i] && indeg[i] == 0);
        match next {
            Some(i) => {
                placed[i] = true;
                order.push(i);
                for c in 0..d {
                    if adj[[i, c]] == 1 {
                        indeg[c] -= 1;
                    }
                }
            }
            None => {
                let stuck = (0..d).find(|&i| !placed[i]).unwrap();
                return Err(stuck);
            }
        }
    }
    Ok(order)
}

/// Connectivity masks for one masked conditioner network.
///
/// All three matrices are weight-shaped (rows index the receiving layer)
/// with entries in {0, 1}. Hidden unit `k` carries the label `k % d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// `(n*d) x d`; entry `[h, j]` allows input `j` into hidden unit `h`
    /// when `j` is a parent of `label(h)` or `j == label(h)`.
    pub input_to_hidden: Array2<f64>,
    /// `(n*d) x (n*d)`; same rule between consecutive hidden layers.
    pub hidden_to_hidden: Array2<f64>,
    /// `d x (n*d)`; entry `[i, v]` allows hidden unit `v` into output `i`
    /// only when `label(v)` is a parent of `i`. Source rows are all zero.
    pub hidden_to_output: Array2<f64>,
    /// Label of each hidden unit, `labels[k] == k % d`.
    pub labels: Vec<usize>,
}

impl MaskSet {
    #[inline]
    pub fn hidden_width(&self) -> usize {
        self.labels.len()
    }
}

/// Builds the mask set for a conditioner with hidden layers of `hidden_width`
/// units. The width must be a positive multiple of the variable count so the
/// label pattern tiles evenly; anything else is `Error::Config`.
pub fn build_masks(dag: &CausalDag, hidden_width: usize) -> Result<MaskSet> {
    let d = dag.len();
    if d == 0 {
        return Err(Error::Config("graph has no variables".into()));
    }
    if hidden_width == 0 || !hidden_width.is_multiple_of(d) {
        return Err(Error::Config(format!(
            "hidden width {hidden_width} is not a positive multiple of {d} variables"
        )));
    }
    let w = hidden_width;
    let adj = dag.adjacency();
    let labels: Vec<usize> = (0..w).map(|k| k % d).collect();

    let mut input_to_hidden = Array2::<f64>::zeros((w, d));
    for h in 0..w {
        let lh = labels[h];
        for j in 0..d {
            if adj[[j, lh]] == 1 || j == lh {
                input_to_hidden[[h, j]] = 1.0;
            }
        }
    }

    let mut hidden_to_hidden = Array2::<f64>::zeros((w, w));
    for u in 0..w {
        let lu = labels[u];
        for v in 0..w {
            let lv = labels[v];
            if adj[[lv, lu]] == 1 || lv == lu {
                hidden_to_hidden[[u, v]] = 1.0;
            }
        }
    }

    let mut hidden_to_output = Array2::<f64>::zeros((d, w));
    for i in 0..d {
        for v in 0..w {
            if adj[[labels[v], i]] == 1 {
                hidden_to_output[[i, v]] = 1.0;
            }
        }
    }

    Ok(MaskSet {
        input_to_hidden,
        hidden_to_hidden,
        hidden_to_output,
        labels,
    })
}
