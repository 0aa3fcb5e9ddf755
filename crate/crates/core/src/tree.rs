//! Rooted bifurcating phylogenies.
//!
//! Nodes are numbered tips first: tips `0..n` in Newick left-to-right order,
//! internal nodes `n..2n-2` in post-order, the root last at `2n-2`.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Post,
    Pre,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phylogeny {
    n_tips: usize,
    parent: Vec<Option<NodeId>>,
    children: Vec<Option<[NodeId; 2]>>,
    branch_length: Vec<f64>,
    tip_labels: Vec<String>,
    internal_labels: Vec<Option<String>>,
    postorder: Vec<NodeId>,
}

/// Shape of a parsed Newick expression before node numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct NewickNode {
    pub label: Option<String>,
    pub length: Option<f64>,
    pub children: Vec<NewickNode>,
}

impl NewickNode {
    pub fn tip(label: &str, length: f64) -> Self {
        NewickNode { label: Some(label.to_string()), length: Some(length), children: Vec::new() }
    }

    pub fn internal(children: Vec<NewickNode>, length: Option<f64>) -> Self {
        NewickNode { label: None, length, children }
    }
}

impl Phylogeny {
    /// Builds a tree from internal child pairs.
    ///
    /// `children[j]` holds the two children of internal node `n_tips + j`;
    /// every child must have a smaller index than its parent and the last
    /// internal node is the root. `branch_length` has one entry per node, the
    /// root entry is ignored.
    pub fn from_children(
        tip_labels: Vec<String>,
        children: Vec<[NodeId; 2]>,
        branch_length: Vec<f64>,
    ) -> Result<Self> {
        let n = tip_labels.len();
        if n < 2 {
            return Err(Error::TooFewTips(n));
        }
        let n_nodes = 2 * n - 1;
        if children.len() != n - 1 || branch_length.len() != n_nodes {
            return Err(Error::DimensionMismatch(format!(
                "{n} tips need {} internal nodes and {n_nodes} branch lengths",
                n - 1
            )));
        }
        let mut seen = HashMap::with_capacity(n);
        for label in &tip_labels {
            if seen.insert(label.as_str(), ()).is_some() {
                return Err(Error::DuplicateTip(label.clone()));
            }
        }
        let mut parent = vec![None; n_nodes];
        let mut child_slots = vec![None; n_nodes];
        for (j, pair) in children.iter().enumerate() {
            let p = n + j;
            for &c in pair {
                if c >= p || parent[c].is_some() {
                    return Err(Error::InvalidParameter(format!(
                        "node {c} cannot be a child of node {p}"
                    )));
                }
                parent[c] = Some(p);
            }
            child_slots[p] = Some(*pair);
        }
        let root = n_nodes - 1;
        if let Some(orphan) = (0..root).find(|&k| parent[k].is_none()) {
            return Err(Error::InvalidParameter(format!("node {orphan} has no parent")));
        }
        for (k, &t) in branch_length.iter().enumerate().take(root) {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "branch length {t} above node {k} is not a finite non-negative number"
                )));
            }
        }
        let mut branch_length = branch_length;
        branch_length[root] = 0.0;

        let mut tree = Phylogeny {
            n_tips: n,
            parent,
            children: child_slots,
            branch_length,
            tip_labels,
            internal_labels: vec![None; n - 1],
            postorder: Vec::new(),
        };
        tree.postorder = tree.compute_postorder();
        Ok(tree)
    }

    /// Builds a tree from a parsed Newick shape.
    pub fn from_newick_node(root: &NewickNode) -> Result<Self> {
        let mut tip_labels = Vec::new();
        let mut internal_labels = Vec::new();
        let mut children = Vec::new();
        // Lengths are collected per tip and per internal node separately
        // because internal indices are only known after all tips are counted.
        let mut tip_len = Vec::new();
        let mut internal_len = Vec::new();

        enum Ref {
            Tip(usize),
            Internal(usize),
        }
        fn walk(
            node: &NewickNode,
            is_root: bool,
            tip_labels: &mut Vec<String>,
            internal_labels: &mut Vec<Option<String>>,
            children: &mut Vec<[Ref; 2]>,
            tip_len: &mut Vec<f64>,
            internal_len: &mut Vec<f64>,
        ) -> Result<Ref> {
            let length = if is_root {
                0.0
            } else {
                match node.length {
                    Some(t) => t,
                    None => {
                        let name = node.label.clone().unwrap_or_else(|| "<internal>".into());
                        return Err(Error::MissingBranchLength(name));
                    }
                }
            };
            if node.children.is_empty() {
                let label = match &node.label {
                    Some(l) if !l.is_empty() => l.clone(),
                    _ => {
                        return Err(Error::NewickSyntax { pos: 0, msg: "tip without a label".into() })
                    }
                };
                tip_labels.push(label);
                tip_len.push(length);
                return Ok(Ref::Tip(tip_labels.len() - 1));
            }
            if node.children.len() != 2 {
                return Err(Error::Polytomy(node.children.len()));
            }
            let a = walk(&node.children[0], false, tip_labels, internal_labels, children, tip_len, internal_len)?;
            let b = walk(&node.children[1], false, tip_labels, internal_labels, children, tip_len, internal_len)?;
            children.push([a, b]);
            internal_labels.push(node.label.clone());
            internal_len.push(length);
            Ok(Ref::Internal(children.len() - 1))
        }

        walk(
            root,
            true,
            &mut tip_labels,
            &mut internal_labels,
            &mut children,
            &mut tip_len,
            &mut internal_len,
        )?;
        let n = tip_labels.len();
        if n < 2 {
            return Err(Error::TooFewTips(n));
        }
        let resolve = |r: &Ref| match r {
            Ref::Tip(i) => *i,
            Ref::Internal(j) => n + j,
        };
        let pairs = children.iter().map(|[a, b]| [resolve(a), resolve(b)]).collect();
        let mut lengths = tip_len;
        lengths.extend(internal_len);
        let mut tree = Phylogeny::from_children(tip_labels, pairs, lengths)?;
        tree.internal_labels = internal_labels;
        Ok(tree)
    }

    pub fn n_tips(&self) -> usize {
        self.n_tips
    }

    pub fn n_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> NodeId {
        self.parent.len() - 1
    }

    pub fn is_tip(&self, k: NodeId) -> bool {
        k < self.n_tips
    }

    pub fn parent(&self, k: NodeId) -> Option<NodeId> {
        self.parent[k]
    }

    pub fn children(&self, k: NodeId) -> Option<[NodeId; 2]> {
        self.children[k]
    }

    /// Length of the branch above `k`; zero at the root.
    pub fn branch_length(&self, k: NodeId) -> f64 {
        self.branch_length[k]
    }

    pub fn branch_lengths(&self) -> &[f64] {
        &self.branch_length
    }

    pub fn tip_labels(&self) -> &[String] {
        &self.tip_labels
    }

    pub fn tip_label(&self, i: NodeId) -> &str {
        &self.tip_labels[i]
    }

    pub fn internal_label(&self, k: NodeId) -> Option<&str> {
        k.checked_sub(self.n_tips)
            .and_then(|j| self.internal_labels.get(j))
            .and_then(|l| l.as_deref())
    }

    pub fn tip_index(&self, label: &str) -> Option<NodeId> {
        self.tip_labels.iter().position(|l| l == label)
    }

    /// Children before parents, left child first, root last.
    pub fn postorder(&self) -> &[NodeId] {
        &self.postorder
    }

    pub fn traversal(&self, order: Order) -> Vec<NodeId> {
        match order {
            Order::Post => self.postorder.clone(),
            Order::Pre => self.postorder.iter().rev().copied().collect(),
        }
    }

    fn compute_postorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.n_nodes());
        let mut stack = vec![(self.root(), false)];
        while let Some((k, expanded)) = stack.pop() {
            match self.children[k] {
                Some([a, b]) if !expanded => {
                    stack.push((k, true));
                    stack.push((b, false));
                    stack.push((a, false));
                }
                _ => out.push(k),
            }
        }
        out
    }

    /// Rejects zero branch lengths, which the likelihood recursion cannot deflate.
    pub fn check_positive_branches(&self) -> Result<()> {
        for k in 0..self.root() {
            let t = self.branch_length[k];
            if t <= 0.0 {
                return Err(Error::NonPositiveBranchLength { node: k, length: t });
            }
        }
        Ok(())
    }

    /// Distance from the root to every node.
    pub fn depths(&self) -> Vec<f64> {
        let mut depth = vec![0.0; self.n_nodes()];
        for &k in self.postorder.iter().rev() {
            if let Some(p) = self.parent[k] {
                depth[k] = depth[p] + self.branch_length[k];
            }
        }
        depth
    }

    pub fn mrca(&self, a: NodeId, b: NodeId) -> NodeId {
        let mut ancestors = vec![false; self.n_nodes()];
        let mut k = Some(a);
        while let Some(x) = k {
            ancestors[x] = true;
            k = self.parent[x];
        }
        let mut k = b;
        while !ancestors[k] {
            k = self.parent[k].expect("root is an ancestor of every node");
        }
        k
    }

    pub fn to_newick_node(&self) -> NewickNode {
        fn build(tree: &Phylogeny, k: NodeId) -> NewickNode {
            let length = (k != tree.root()).then(|| tree.branch_length[k]);
            match tree.children[k] {
                None => NewickNode { label: Some(tree.tip_labels[k].clone()), length, children: vec![] },
                Some([a, b]) => NewickNode {
                    label: tree.internal_label(k).map(str::to_string),
                    length,
                    children: vec![build(tree, a), build(tree, b)],
                },
            }
        }
        build(self, self.root())
    }

    /// Newick text with branch lengths printed to 17 significant digits.
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        write_node(&self.to_newick_node(), &mut out);
        out.push(';');
        out
    }

    /// Same tree with the two children of every internal node exchanged.
    pub fn with_children_swapped(&self) -> Phylogeny {
        fn swap(node: &NewickNode) -> NewickNode {
            let mut out = node.clone();
            out.children = node.children.iter().rev().map(swap).collect();
            out
        }
        Phylogeny::from_newick_node(&swap(&self.to_newick_node()))
            .expect("swapping children preserves validity")
    }

    /// Removes tip `label` and suppresses its parent, merging the sibling's
    /// branch with the parent's. Tips attached directly to the root are
    /// rejected since removing them would change the root prior.
    pub fn prune_tip(&self, label: &str) -> Result<Phylogeny> {
        let i = self
            .tip_index(label)
            .ok_or_else(|| Error::InvalidParameter(format!("no tip `{label}`")))?;
        let p = self.parent[i].expect("tips have parents");
        if p == self.root() {
            return Err(Error::InvalidParameter(format!("tip `{label}` hangs from the root")));
        }
        fn build(tree: &Phylogeny, k: NodeId, drop: NodeId, extra: f64) -> NewickNode {
            let length = (k != tree.root()).then(|| tree.branch_length[k] + extra);
            match tree.children[k] {
                None => NewickNode { label: Some(tree.tip_labels[k].clone()), length, children: vec![] },
                Some([a, b]) if a == drop || b == drop => {
                    let sibling = if a == drop { b } else { a };
                    build(tree, sibling, drop, extra + tree.branch_length[k])
                }
                Some([a, b]) => NewickNode {
                    label: tree.internal_label(k).map(str::to_string),
                    length,
                    children: vec![build(tree, a, drop, 0.0), build(tree, b, drop, 0.0)],
                },
            }
        }
        Phylogeny::from_newick_node(&build(self, self.root(), i, 0.0))
    }
}

fn needs_quotes(label: &str) -> bool {
    label.is_empty()
        || label
            .chars()
            .any(|c| c.is_whitespace() || "()[]':;,".contains(c))
}

fn write_node(node: &NewickNode, out: &mut String) {
    if !node.children.is_empty() {
        out.push('(');
        for (i, c) in node.children.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_node(c, out);
        }
        out.push(')');
    }
    if let Some(label) = &node.label {
        if needs_quotes(label) {
            let _ = write!(out, "'{}'", label.replace('\'', "''"));
        } else {
            out.push_str(label);
        }
    }
    if let Some(t) = node.length {
        out.push(':');
        out.push_str(&format_sig17(t));
    }
}

/// Decimal text with 17 significant digits and trailing zeros removed;
/// parsing it back yields the identical `f64`.
pub fn format_sig17(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-6..=16).contains(&exp) {
        return format!("{x:.16e}");
    }
    let decimals = (16 - exp).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

pub fn parse_newick(text: &str) -> Result<Phylogeny> {
    let mut parser = NewickParser { src: text.as_bytes(), pos: 0 };
    let root = parser.parse()?;
    Phylogeny::from_newick_node(&root)
}

/// Parses a Newick expression into its nested shape without validating it
/// as a binary phylogeny.
pub fn parse_newick_node(text: &str) -> Result<NewickNode> {
    NewickParser { src: text.as_bytes(), pos: 0 }.parse()
}

struct NewickParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl NewickParser<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::NewickSyntax { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) -> Result<()> {
        loop {
            match self.src.get(self.pos) {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    let start = self.pos;
                    match self.src[self.pos..].iter().position(|&c| c == b']') {
                        Some(off) => self.pos += off + 1,
                        None => {
                            self.pos = start;
                            return self.err("unterminated comment");
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn peek(&mut self) -> Result<Option<u8>> {
        self.skip_ws()?;
        Ok(self.src.get(self.pos).copied())
    }

    fn parse(&mut self) -> Result<NewickNode> {
        let node = self.subtree(0)?;
        match self.peek()? {
            Some(b';') => self.pos += 1,
            Some(_) => return self.err("unexpected character after tree"),
            None => return self.err("missing terminating ';'"),
        }
        if self.peek()?.is_some() {
            return self.err("trailing text after ';'");
        }
        Ok(node)
    }

    fn subtree(&mut self, depth: usize) -> Result<NewickNode> {
        let mut children = Vec::new();
        if self.peek()? == Some(b'(') {
            self.pos += 1;
            loop {
                children.push(self.subtree(depth + 1)?);
                match self.peek()? {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(_) => return self.err("expected ',' or ')'"),
                    None => return self.err("unbalanced parentheses"),
                }
            }
        }
        let label = self.label()?;
        let length = if self.peek()? == Some(b':') {
            self.pos += 1;
            Some(self.number()?)
        } else {
            None
        };
        Ok(NewickNode { label, length, children })
    }

    fn label(&mut self) -> Result<Option<String>> {
        match self.peek()? {
            Some(b'\'') => {
                self.pos += 1;
                let mut out = Vec::new();
                loop {
                    match self.src.get(self.pos) {
                        Some(b'\'') if self.src.get(self.pos + 1) == Some(&b'\'') => {
                            out.push(b'\'');
                            self.pos += 2;
                        }
                        Some(b'\'') => {
                            self.pos += 1;
                            break;
                        }
                        Some(&c) => {
                            out.push(c);
                            self.pos += 1;
                        }
                        None => return self.err("unterminated quoted label"),
                    }
                }
                String::from_utf8(out).map(Some).or_else(|_| self.err("label is not UTF-8"))
            }
            _ => {
                let start = self.pos;
                while let Some(&c) = self.src.get(self.pos) {
                    if c.is_ascii_whitespace() || b"()[]':;,".contains(&c) {
                        break;
                    }
                    self.pos += 1;
                }
                if start == self.pos {
                    return Ok(None);
                }
                let raw = std::str::from_utf8(&self.src[start..self.pos])
                    .or_else(|_| self.err("label is not UTF-8"))?;
                Ok(Some(raw.to_string()))
            }
        }
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws()?;
        let start = self.pos;
        while let Some(&c) = self.src.get(self.pos) {
            if c.is_ascii_digit() || b"+-.eE".contains(&c) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let raw = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
            Ok(_) => {
                self.pos = start;
                self.err(format!("branch length `{raw}` must be finite and non-negative"))
            }
            Err(_) => {
                self.pos = start;
                self.err("expected a branch length")
            }
        }
    }
}

/// Dense tree covariance Ψ and Ψ̃ = Ψ + J/κ. O(N²); for oracles only.
#[derive(Debug, Clone)]
pub struct DenseTreeCovariance {
    pub psi: DMatrix<f64>,
    pub psi_tilde: DMatrix<f64>,
}

pub fn build_psi(tree: &Phylogeny, kappa: f64) -> DenseTreeCovariance {
    let n = tree.n_tips();
    let depth = tree.depths();
    let mut psi = DMatrix::zeros(n, n);
    // Ψ_ii' = depth of the most recent common ancestor, filled by
    // visiting each internal node and pairing tips across its two subtrees.
    let mut below: Vec<Vec<NodeId>> = vec![Vec::new(); tree.n_nodes()];
    for &k in tree.postorder() {
        match tree.children(k) {
            None => {
                psi[(k, k)] = depth[k];
                below[k].push(k);
            }
            Some([a, b]) => {
                let left = std::mem::take(&mut below[a]);
                let right = std::mem::take(&mut below[b]);
                for &i in &left {
                    for &j in &right {
                        psi[(i, j)] = depth[k];
                        psi[(j, i)] = depth[k];
                    }
                }
                let mut merged = left;
                merged.extend(right);
                below[k] = merged;
            }
        }
    }
    let psi_tilde = psi.add_scalar(1.0 / kappa);
    DenseTreeCovariance { psi, psi_tilde }
}
