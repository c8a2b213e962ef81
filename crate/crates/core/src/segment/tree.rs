//! Word-level parse tree construction and simplification into segments.

use std::collections::{BTreeMap, BTreeSet};

use super::{Lock, Removability, Segment, SegmentError, SegmentForest, SegmentId, SegmentKind};
use crate::document::Document;
use crate::rules::{RelationClass, RemovabilityRuleTable};

/// Node of the word-level tree. Before simplification every Normal node owns
/// exactly one token; Dummy nodes own the coordinating conjunction(s) and any
/// punctuation that belongs to the coordination as a whole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub kind: SegmentKind,
    pub tokens: Vec<usize>,
    pub separators: Vec<usize>,
    pub parent: Option<usize>,
    pub removability: Removability,
    pub children: Vec<usize>,
    pub alternatives: Vec<String>,
    pub merged: bool,
    pub lock: Option<Lock>,
}

impl TreeNode {
    fn new(kind: SegmentKind) -> Self {
        TreeNode {
            kind,
            tokens: Vec::new(),
            separators: Vec::new(),
            parent: None,
            removability: Removability::Removable,
            children: Vec::new(),
            alternatives: Vec::new(),
            merged: false,
            lock: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParseTree {
    pub doc: Document,
    pub nodes: Vec<TreeNode>,
    pub root: usize,
}

impl ParseTree {
    pub fn dummy_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == SegmentKind::Dummy)
            .count()
    }

    /// Smallest token position in the subtree of `n`.
    fn subtree_min(&self, n: usize) -> usize {
        let node = &self.nodes[n];
        let own = node
            .tokens
            .iter()
            .chain(node.separators.iter())
            .copied()
            .min()
            .unwrap_or(usize::MAX);
        node.children
            .iter()
            .map(|&c| self.subtree_min(c))
            .fold(own, usize::min)
    }
}

fn is_cc(deprel: &str) -> bool {
    let l = deprel.to_ascii_lowercase();
    l == "cc"
}

fn is_punct(deprel: &str) -> bool {
    deprel.eq_ignore_ascii_case("punct")
}

/// Builds the word-level tree for every non-pinned sentence of `doc` and
/// joins the sentences under a single root.
///
/// Each coordination cluster (a head plus its `conj` dependents, following
/// chained conjuncts) is replaced by a Dummy node placed where the head used
/// to hang; the head and every conjunct become Removable children of it.
pub fn build_parse_tree(
    doc: &Document,
    rules: &RemovabilityRuleTable,
) -> Result<ParseTree, SegmentError> {
    let n = doc.tokens.len();
    if n == 0 {
        return Err(SegmentError::EmptyDocument);
    }
    let mut nodes: Vec<TreeNode> = Vec::new();
    // token -> node that owns it
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut tops = Vec::new();
    let mut pinned_tokens = Vec::new();

    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, t) in doc.tokens.iter().enumerate() {
        if let Some(h) = t.head {
            if h >= n {
                return Err(SegmentError::InvalidParse(format!(
                    "token {i} points at missing head {h}"
                )));
            }
            dependents[h].push(i);
        }
    }
    let class_of = |i: usize| rules.classify(&doc.tokens[i].deprel);

    for sent in &doc.sentences {
        if sent.pinned {
            pinned_tokens.extend(sent.tokens.clone());
            continue;
        }
        let range = sent.tokens.clone();
        let roots: Vec<usize> = range
            .clone()
            .filter(|&i| doc.tokens[i].head.is_none())
            .collect();
        if roots.len() != 1 {
            return Err(SegmentError::InvalidParse(format!(
                "sentence {} has {} roots",
                doc.tokens[range.start].sentence,
                roots.len()
            )));
        }

        // Coordination clusters keyed by their head.
        let cluster_head = |mut i: usize| {
            let mut guard = 0;
            while class_of(i) == RelationClass::Conjunct {
                match doc.tokens[i].head {
                    Some(h) => i = h,
                    None => break,
                }
                guard += 1;
                if guard > n {
                    break;
                }
            }
            i
        };
        let mut clusters: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for i in range.clone() {
            if class_of(i) == RelationClass::Conjunct && doc.tokens[i].head.is_some() {
                let h = cluster_head(i);
                // A cc token becomes a separator of the enclosing
                // coordination, so it cannot also head one.
                if is_cc(&doc.tokens[h].deprel) {
                    continue;
                }
                let c = clusters.entry(h).or_default();
                c.insert(h);
                c.insert(i);
            }
        }
        let mut member_of: BTreeMap<usize, usize> = BTreeMap::new();
        for (&h, members) in &clusters {
            for &m in members {
                member_of.insert(m, h);
            }
        }

        // Dummy node per cluster; cc and coordination-level punctuation move
        // onto it.
        let mut dummy_of: BTreeMap<usize, usize> = BTreeMap::new();
        for (&h, members) in &clusters {
            let d = nodes.len();
            nodes.push(TreeNode::new(SegmentKind::Dummy));
            dummy_of.insert(h, d);

            let is_attachment = |c: usize| {
                members.contains(&c)
                    || is_cc(&doc.tokens[c].deprel)
                    || is_punct(&doc.tokens[c].deprel)
            };
            let mut spans = BTreeMap::new();
            for &m in members {
                let mut lo = m;
                let mut hi = m;
                let mut stack: Vec<usize> = dependents[m]
                    .iter()
                    .copied()
                    .filter(|&c| !is_attachment(c))
                    .collect();
                while let Some(x) = stack.pop() {
                    lo = lo.min(x);
                    hi = hi.max(x);
                    stack.extend(
                        dependents[x]
                            .iter()
                            .copied()
                            .filter(|c| !members.contains(c)),
                    );
                }
                spans.insert(m, (lo, hi));
            }
            let cl_lo = spans.values().map(|s| s.0).min().unwrap_or(h);
            let cl_hi = spans.values().map(|s| s.1).max().unwrap_or(h);
            for &m in members {
                let (lo, hi) = spans[&m];
                for &c in &dependents[m] {
                    let rel = &doc.tokens[c].deprel;
                    if members.contains(&c) {
                        continue;
                    }
                    if is_cc(rel) {
                        nodes[d].separators.push(c);
                        owner[c] = Some(d);
                    } else if is_punct(rel) && (c < lo || c > hi) && dependents[c].is_empty() {
                        if c > cl_lo && c < cl_hi {
                            nodes[d].separators.push(c);
                        } else {
                            nodes[d].tokens.push(c);
                        }
                        owner[c] = Some(d);
                    }
                }
            }
            nodes[d].separators.sort_unstable();
            nodes[d].tokens.sort_unstable();
        }

        for i in range.clone() {
            if owner[i].is_none() {
                let id = nodes.len();
                let mut node = TreeNode::new(SegmentKind::Normal);
                node.tokens.push(i);
                nodes.push(node);
                owner[i] = Some(id);
            }
        }

        // Dependents of a cc that moved onto a Dummy hang from the conjunct
        // the cc belonged to.
        let dummy: Vec<bool> = nodes.iter().map(|x| x.kind == SegmentKind::Dummy).collect();
        let attach = |head: usize| {
            let o = owner[head]?;
            if dummy[o] && is_cc(&doc.tokens[head].deprel) {
                return doc.tokens[head].head.and_then(|m| owner[m]);
            }
            Some(o)
        };
        let mut parents: Vec<(usize, Option<usize>, Removability)> = Vec::new();
        let mut top = None;
        for i in range.clone() {
            let node = owner[i].expect("every token has an owner");
            if nodes[node].kind == SegmentKind::Dummy {
                continue;
            }
            if let Some(&h) = member_of.get(&i) {
                nodes[node].parent = Some(dummy_of[&h]);
                nodes[node].removability = Removability::Removable;
            } else if let Some(head) = doc.tokens[i].head {
                let r = match class_of(i) {
                    RelationClass::Unremovable => Removability::Unremovable,
                    _ => Removability::Removable,
                };
                parents.push((node, attach(head), r));
            } else {
                top = Some(node);
            }
        }
        for (&h, &d) in &dummy_of {
            match doc.tokens[h].head {
                Some(head) => {
                    let r = match class_of(h) {
                        RelationClass::Unremovable => Removability::Unremovable,
                        _ => Removability::Removable,
                    };
                    parents.push((d, attach(head), r));
                }
                None => {
                    nodes[d].parent = None;
                    top = Some(d);
                }
            }
        }
        for (node, parent, r) in parents {
            nodes[node].parent = parent;
            nodes[node].removability = r;
        }
        tops.push(top.ok_or_else(|| SegmentError::InvalidParse("sentence without root".into()))?);
    }

    let root = match tops.len() {
        0 => {
            let id = nodes.len();
            let mut node = TreeNode::new(SegmentKind::Normal);
            node.tokens = pinned_tokens;
            nodes.push(node);
            id
        }
        1 => {
            let r = tops[0];
            nodes[r].tokens.extend(pinned_tokens);
            nodes[r].tokens.sort_unstable();
            r
        }
        _ => {
            let id = nodes.len();
            let mut node = TreeNode::new(SegmentKind::Dummy);
            node.tokens = pinned_tokens;
            nodes.push(node);
            for &t in &tops {
                nodes[t].parent = Some(id);
                nodes[t].removability = Removability::Removable;
            }
            id
        }
    };

    for i in 0..nodes.len() {
        if let Some(p) = nodes[i].parent {
            nodes[p].children.push(i);
        }
    }
    let mut tree = ParseTree {
        doc: doc.clone(),
        nodes,
        root,
    };
    sort_children(&mut tree);
    Ok(tree)
}

fn sort_children(tree: &mut ParseTree) {
    for i in 0..tree.nodes.len() {
        let mut kids = std::mem::take(&mut tree.nodes[i].children);
        kids.sort_by_key(|&c| tree.subtree_min(c));
        tree.nodes[i].children = kids;
    }
}

/// Merges every Unremovable Normal node into its parent until none remain
/// and numbers the resulting segments in pre-order (root = 0).
pub fn simplify(tree: &ParseTree) -> SegmentForest {
    let nodes = &tree.nodes;
    let mut rep: Vec<usize> = (0..nodes.len()).collect();
    fn find(nodes: &[TreeNode], i: usize) -> usize {
        let mut cur = i;
        loop {
            let n = &nodes[cur];
            match n.parent {
                Some(p)
                    if n.kind == SegmentKind::Normal
                        && n.removability == Removability::Unremovable =>
                {
                    cur = p
                }
                _ => return cur,
            }
        }
    }
    for (i, r) in rep.iter_mut().enumerate() {
        *r = find(nodes, i);
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &r) in rep.iter().enumerate() {
        groups.entry(r).or_default().push(i);
    }

    let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &r in groups.keys() {
        if let Some(p) = nodes[r].parent {
            children.entry(rep[p]).or_default().push(r);
        }
    }

    let subtree_min = |r: usize| -> usize {
        // Minimum over the merged group and all groups below it.
        let mut best = usize::MAX;
        let mut stack = vec![r];
        while let Some(g) = stack.pop() {
            for &m in &groups[&g] {
                for &t in nodes[m].tokens.iter().chain(nodes[m].separators.iter()) {
                    best = best.min(t);
                }
            }
            if let Some(k) = children.get(&g) {
                stack.extend(k.iter().copied());
            }
        }
        best
    };
    let mins: BTreeMap<usize, usize> = groups.keys().map(|&g| (g, subtree_min(g))).collect();
    for kids in children.values_mut() {
        kids.sort_by_key(|k| mins[k]);
    }

    let root_rep = rep[tree.root];
    let mut order = Vec::new();
    let mut stack = vec![root_rep];
    while let Some(g) = stack.pop() {
        order.push(g);
        if let Some(k) = children.get(&g) {
            stack.extend(k.iter().rev().copied());
        }
    }
    let id_of: BTreeMap<usize, SegmentId> = order
        .iter()
        .enumerate()
        .map(|(i, &g)| (g, i as SegmentId))
        .collect();

    let mut segments = BTreeMap::new();
    for &g in &order {
        let head = &nodes[g];
        let mut tokens: Vec<usize> = groups[&g]
            .iter()
            .flat_map(|&m| {
                let n = &nodes[m];
                let seps = if m != g {
                    n.separators.clone()
                } else {
                    Vec::new()
                };
                n.tokens.iter().copied().chain(seps)
            })
            .collect();
        tokens.sort_unstable();
        tokens.dedup();
        let id = id_of[&g];
        segments.insert(
            id,
            Segment {
                id,
                kind: head.kind,
                tokens,
                separators: head.separators.clone(),
                parent: head.parent.map(|p| id_of[&rep[p]]),
                removability: if g == root_rep {
                    Removability::Unremovable
                } else {
                    head.removability
                },
                children: children
                    .get(&g)
                    .map(|k| k.iter().map(|c| id_of[c]).collect())
                    .unwrap_or_default(),
                alternatives: head.alternatives.clone(),
                merged: head.merged,
                lock: head.lock,
            },
        );
    }

    SegmentForest {
        doc: tree.doc.clone(),
        segments,
        root: 0,
        merge_log: Vec::new(),
    }
}

impl SegmentForest {
    /// Segment-level tree view of the forest (one node per segment, in id
    /// order), suitable for re-simplification.
    pub fn to_tree(&self) -> ParseTree {
        let ids: Vec<SegmentId> = self.segments.keys().copied().collect();
        let pos: BTreeMap<SegmentId, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let nodes = ids
            .iter()
            .map(|id| {
                let s = &self.segments[id];
                TreeNode {
                    kind: s.kind,
                    tokens: s.tokens.clone(),
                    separators: s.separators.clone(),
                    parent: s.parent.map(|p| pos[&p]),
                    removability: s.removability,
                    children: s.children.iter().map(|c| pos[c]).collect(),
                    alternatives: s.alternatives.clone(),
                    merged: s.merged,
                    lock: s.lock,
                }
            })
            .collect();
        ParseTree {
            doc: self.doc.clone(),
            nodes,
            root: pos[&self.root],
        }
    }
}
