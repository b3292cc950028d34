//! Exact future validity and exact terminal laws over enumerable grammars.
//!
//! Decoding positions are merged into a [`StateGraph`] whenever they share a
//! matcher state and the slice of context the model conditions on, so the
//! backward pass costs one sweep over distinct positions rather than over
//! all prefixes. Terminal laws are produced by walking the prefix tree
//! through that graph and summing log-kernels along each path.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grammar::DEFAULT_ENUMERATION_LIMIT;
use crate::instance::{Cursor, Instance, NodeKey, Position};
use crate::toylm::{log_sum_exp, Token, TokenDistribution, Vocab, Word};

pub const DEFAULT_GRAPH_CAPACITY: usize = 2_000_000;

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub position: Position,
    /// Successor node per entry of `position.valid`; `None` for EOS.
    pub children: Vec<Option<usize>>,
}

/// All distinct reachable decoding positions.
#[derive(Debug, Clone)]
pub struct StateGraph {
    nodes: Vec<GraphNode>,
    index: HashMap<NodeKey, usize>,
    /// Node ids by decreasing prefix length.
    backward: Vec<usize>,
}

impl StateGraph {
    pub fn build(inst: &Instance) -> Result<Self> {
        Self::build_with_capacity(inst, DEFAULT_GRAPH_CAPACITY)
    }

    pub fn build_with_capacity(inst: &Instance, limit: usize) -> Result<Self> {
        let grammar = inst.grammar();
        let root = inst.root();
        let mut nodes: Vec<GraphNode> = Vec::new();
        let mut index = HashMap::new();
        index.insert(inst.key(&root), 0usize);
        nodes.push(GraphNode { position: inst.position(&root)?, children: Vec::new() });

        let mut queue = VecDeque::from([0usize]);
        while let Some(id) = queue.pop_front() {
            let pos = nodes[id].position.clone();
            let mut children = Vec::with_capacity(pos.valid.len());
            for &y in &pos.valid {
                if y == grammar.eos() {
                    children.push(None);
                    continue;
                }
                let next = pos.cursor.advance(grammar, y)?;
                let key = inst.key(&next);
                let child = match index.get(&key) {
                    Some(&c) => c,
                    None => {
                        if nodes.len() >= limit {
                            return Err(Error::Capacity { limit });
                        }
                        let c = nodes.len();
                        nodes.push(GraphNode { position: inst.position(&next)?, children: Vec::new() });
                        index.insert(key, c);
                        queue.push_back(c);
                        c
                    }
                };
                children.push(Some(child));
            }
            nodes[id].children = children;
        }

        let mut backward: Vec<usize> = (0..nodes.len()).collect();
        backward.sort_by_key(|&i| std::cmp::Reverse(nodes[i].position.cursor.prefix.len()));
        Ok(Self { nodes, index, backward })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &GraphNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn find(&self, inst: &Instance, cursor: &Cursor) -> Option<usize> {
        self.index.get(&inst.key(cursor)).copied()
    }

    /// Node ids with the longest prefixes first.
    pub fn backward_order(&self) -> &[usize] {
        &self.backward
    }

    pub fn forward_order(&self) -> impl Iterator<Item = usize> + '_ {
        self.backward.iter().rev().copied()
    }

    /// Number of EOS-terminated paths from the root.
    pub fn count_strings(&self) -> u128 {
        let mut count = vec![0u128; self.nodes.len()];
        for &id in &self.backward {
            count[id] = self.nodes[id]
                .children
                .iter()
                .map(|c| c.map_or(1, |c| count[c]))
                .sum();
        }
        count[0]
    }

    /// Per-node kernels of local masking.
    pub fn local_mask_kernels(&self) -> Result<Vec<TokenDistribution>> {
        self.nodes.iter().map(|n| n.position.local_mask()).collect()
    }

    /// Probability that a kernel-driven decode passes through each node.
    pub fn reach_probabilities(&self, kernels: &[TokenDistribution]) -> Vec<f64> {
        let mut reach = vec![0.0; self.nodes.len()];
        reach[0] = 1.0;
        for id in self.forward_order() {
            let node = &self.nodes[id];
            for (&y, child) in node.position.valid.iter().zip(&node.children) {
                if let Some(c) = child {
                    reach[*c] += reach[id] * kernels[id].prob(y);
                }
            }
        }
        reach
    }
}

/// Exact future validity at every reachable position.
#[derive(Debug, Clone)]
pub struct PhiTable {
    graph: StateGraph,
    /// `phi[node][i]` is Φ for `node.position.valid[i]`.
    phi: Vec<Vec<f64>>,
    /// `Σ_y p(y) Φ(y)` per node: the probability of completing from there.
    completion: Vec<f64>,
}

/// Backward DP over the state graph in decreasing prefix length.
pub fn phi_exact(inst: &Instance) -> Result<PhiTable> {
    PhiTable::from_graph(StateGraph::build(inst)?)
}

impl PhiTable {
    pub fn from_graph(graph: StateGraph) -> Result<Self> {
        let n = graph.len();
        let mut phi = vec![Vec::new(); n];
        let mut completion = vec![0.0; n];
        for &id in graph.backward_order() {
            let node = graph.node(id);
            let values: Vec<f64> = node.children.iter().map(|c| c.map_or(1.0, |c| completion[c])).collect();
            completion[id] = node
                .position
                .valid
                .iter()
                .zip(&values)
                .map(|(&y, v)| node.position.dist.prob(y) * v)
                .sum();
            phi[id] = values;
        }
        Ok(Self { graph, phi, completion })
    }

    pub fn graph(&self) -> &StateGraph {
        &self.graph
    }

    pub fn values_at(&self, node: usize) -> &[f64] {
        &self.phi[node]
    }

    pub fn completion_at(&self, node: usize) -> f64 {
        self.completion[node]
    }

    /// Total model mass of the language, `Z_C`.
    pub fn root_mass(&self) -> f64 {
        self.completion[0]
    }

    pub fn lookup(&self, inst: &Instance, cursor: &Cursor) -> Option<&[f64]> {
        self.graph.find(inst, cursor).map(|id| self.phi[id].as_slice())
    }

    pub fn phi(&self, inst: &Instance, cursor: &Cursor, y: Token) -> Option<f64> {
        let id = self.graph.find(inst, cursor)?;
        let i = self.graph.node(id).position.valid.iter().position(|&t| t == y)?;
        Some(self.phi[id][i])
    }

    /// Largest violation of `Φ(s,y) = Σ_u p(u|s·y) Φ(s·y,u)` (EOS entries must be 1).
    pub fn recursion_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (id, node) in self.graph.nodes().iter().enumerate() {
            for (i, child) in node.children.iter().enumerate() {
                let rhs = match child {
                    None => 1.0,
                    Some(c) => {
                        let cn = self.graph.node(*c);
                        cn.position
                            .valid
                            .iter()
                            .zip(&self.phi[*c])
                            .map(|(&u, v)| cn.position.dist.prob(u) * v)
                            .sum()
                    }
                };
                worst = worst.max((self.phi[id][i] - rhs).abs());
            }
        }
        worst
    }

    /// `node,state,prefix,token,phi` rows.
    pub fn write_csv<W: Write>(&self, vocab: &Vocab, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "state", "prefix", "token", "phi"])?;
        for (id, node) in self.graph.nodes().iter().enumerate() {
            for (&y, v) in node.position.valid.iter().zip(&self.phi[id]) {
                w.write_record([
                    id.to_string(),
                    format!("{:?}", node.position.cursor.state),
                    vocab.render(&node.position.cursor.prefix),
                    vocab.glyph(y).to_string(),
                    format!("{v:.17e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Anything that can supply per-candidate Φ values at a position.
pub trait PhiSource {
    fn phi_for(&self, inst: &Instance, pos: &Position) -> Result<Vec<f64>>;
}

impl PhiSource for PhiTable {
    fn phi_for(&self, inst: &Instance, pos: &Position) -> Result<Vec<f64>> {
        self.lookup(inst, &pos.cursor).map(<[f64]>::to_vec).ok_or(Error::Coverage)
    }
}

/// Kernel `∝ p_t(y) Φ(y)` over `A_t`, normalized in log-space.
pub fn doob_kernel(pos: &Position, phi: &[f64]) -> Result<TokenDistribution> {
    if phi.len() != pos.valid.len() {
        return Err(Error::Precondition("Φ vector does not match the valid set".into()));
    }
    let mut logw = vec![f64::NEG_INFINITY; pos.dist.len()];
    for (&y, &v) in pos.valid.iter().zip(phi) {
        if v > 0.0 {
            logw[y.index()] = pos.dist.prob(y).ln() + v.ln();
        }
    }
    TokenDistribution::from_log_weights(&logw).map_err(|_| Error::EstimatorDegeneracy)
}

pub fn doob_kernels(inst: &Instance, graph: &StateGraph, source: &dyn PhiSource) -> Result<Vec<TokenDistribution>> {
    graph
        .nodes()
        .iter()
        .map(|n| doob_kernel(&n.position, &source.phi_for(inst, &n.position)?))
        .collect()
}

/// Exact probability over complete strings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TerminalLaw {
    probs: BTreeMap<Word, f64>,
}

impl TerminalLaw {
    /// Normalizes unnormalized log-masses; zero-mass strings are dropped.
    pub fn from_log_masses(entries: Vec<(Word, f64)>) -> Result<(Self, f64)> {
        let logs: Vec<f64> = entries.iter().map(|(_, l)| *l).collect();
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            return Err(Error::DegenerateGrammar);
        }
        let probs = entries
            .into_iter()
            .filter(|(_, l)| l.is_finite())
            .map(|(w, l)| (w, (l - lse).exp()))
            .collect();
        Ok((Self { probs }, lse))
    }

    pub fn from_probs(probs: BTreeMap<Word, f64>) -> Self {
        Self { probs }
    }

    pub fn prob(&self, word: &[Token]) -> f64 {
        self.probs.get(word).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Word, f64)> {
        self.probs.iter().map(|(w, &p)| (w, p))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    /// Half the L1 distance over the union of supports.
    pub fn tv(&self, other: &Self) -> f64 {
        let mut sum = 0.0;
        for (w, &p) in &self.probs {
            sum += (p - other.prob(w)).abs();
        }
        for (w, &q) in &other.probs {
            if !self.probs.contains_key(w) {
                sum += q;
            }
        }
        0.5 * sum
    }

    /// `string,probability` rows.
    pub fn write_csv<W: Write>(&self, vocab: &Vocab, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["string", "probability"])?;
        for (word, p) in &self.probs {
            w.write_record([vocab.render(word), format!("{p:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Walks every root-to-EOS path, summing `log_weights[node][valid index]`.
fn walk(graph: &StateGraph, log_weights: &[Vec<f64>]) -> Result<Vec<(Word, f64)>> {
    let count = graph.count_strings();
    if count > DEFAULT_ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge { count, limit: DEFAULT_ENUMERATION_LIMIT });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut word = Vec::new();
    walk_from(graph, log_weights, 0, 0.0, &mut word, &mut out);
    Ok(out)
}

fn walk_from(
    graph: &StateGraph,
    log_weights: &[Vec<f64>],
    id: usize,
    acc: f64,
    word: &mut Word,
    out: &mut Vec<(Word, f64)>,
) {
    let node = graph.node(id);
    for (i, (&y, child)) in node.position.valid.iter().zip(&node.children).enumerate() {
        let lw = acc + log_weights[id][i];
        match child {
            None => out.push((word.clone(), lw)),
            Some(c) => {
                word.push(y);
                walk_from(graph, log_weights, *c, lw, word, out);
                word.pop();
            }
        }
    }
}

fn kernel_log_weights(graph: &StateGraph, kernels: &[TokenDistribution]) -> Vec<Vec<f64>> {
    graph
        .nodes()
        .iter()
        .zip(kernels)
        .map(|(n, k)| n.position.valid.iter().map(|&y| k.prob(y).ln()).collect())
        .collect()
}

/// `μ*` with its normalizer `Z_C`.
pub fn mu_star(graph: &StateGraph) -> Result<(TerminalLaw, f64)> {
    let logw: Vec<Vec<f64>> = graph
        .nodes()
        .iter()
        .map(|n| n.position.valid.iter().map(|&y| n.position.dist.prob(y).ln()).collect())
        .collect();
    let (law, log_z) = TerminalLaw::from_log_masses(walk(graph, &logw)?)?;
    Ok((law, log_z.exp()))
}

/// `μ^proj`: chained masked-and-renormalized conditionals.
pub fn mu_proj(graph: &StateGraph) -> Result<TerminalLaw> {
    chained_law(graph, &graph.local_mask_kernels()?)
}

/// Chained Doob-reweighted kernels with Φ from `source`.
pub fn mu_phi(inst: &Instance, graph: &StateGraph, source: &dyn PhiSource) -> Result<TerminalLaw> {
    chained_law(graph, &doob_kernels(inst, graph, source)?)
}

pub fn chained_law(graph: &StateGraph, kernels: &[TokenDistribution]) -> Result<TerminalLaw> {
    let entries = walk(graph, &kernel_log_weights(graph, kernels))?;
    Ok(TerminalLaw::from_log_masses(entries)?.0)
}

/// Result of the grouped budget-DFA computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetTv {
    pub tv_proj_star: f64,
    pub tv_phi_star: f64,
    pub valid_count: u128,
    /// `P(1)` at the root under local masking.
    pub root_masked_p1: f64,
    /// `P(1)` at the root under the Doob kernel.
    pub root_doob_p1: f64,
}

fn ln_binom(n: usize, k: usize) -> f64 {
    statrs::function::factorial::ln_binomial(n as u64, k as u64)
}

/// Exact TVs for `{x ∈ {0,1}^n : Σx ≤ k}` under an iid Bernoulli(`p1`) base,
/// computed per group without touching individual strings.
///
/// Strings with fewer than `k` ones never see the mask bind, so `μ^proj`
/// equals the unnormalized base mass; strings that saturate the budget are
/// grouped by the position of their k-th one, after which zeros are forced.
/// `μ^Φ` is propagated forward over the `(t, c)` grid with the closed-form
/// completion probability `P(Bin(n-t, p1) ≤ k-c)`.
pub fn budget_grouped_tv(n: usize, k: usize, p1: f64) -> Result<BudgetTv> {
    if n > 64 || k > n {
        return Err(Error::Precondition("budget TV needs k <= n <= 64".into()));
    }
    if !(p1 > 0.0 && p1 < 1.0) {
        return Err(Error::Precondition(format!("p1 = {p1} not in (0,1)")));
    }
    let (lp, lq) = (p1.ln(), (1.0 - p1).ln());
    let log_z = log_sum_exp(
        &(0..=k).map(|j| ln_binom(n, j) + j as f64 * lp + (n - j) as f64 * lq).collect::<Vec<_>>(),
    );

    let mut l1 = 0.0;
    for j in 0..k {
        let lw = j as f64 * lp + (n - j) as f64 * lq;
        let diff = (lw.exp() - (lw - log_z).exp()).abs();
        l1 += ln_binom(n, j).exp() * diff;
    }
    if k == 0 {
        // Only the all-zero string, forced at every step.
        l1 += (1.0 - (n as f64 * lq - log_z).exp()).abs();
    } else {
        let star = (k as f64 * lp + (n - k) as f64 * lq - log_z).exp();
        for m in k..=n {
            let proj = (k as f64 * lp + (m - k) as f64 * lq).exp();
            l1 += ln_binom(m - 1, k - 1).exp() * (proj - star).abs();
        }
    }
    let tv_proj_star = 0.5 * l1;

    // completion[t][c] = P(Bin(n - t, p1) <= k - c)
    let completion = |t: usize, c: usize| -> f64 {
        let m = n - t;
        let top = (k - c).min(m);
        (0..=top)
            .map(|j| (ln_binom(m, j) + j as f64 * lp + (m - j) as f64 * lq).exp())
            .sum::<f64>()
            .min(1.0)
    };
    let mut grid = vec![vec![0.0; k + 1]; n + 1];
    for (t, row) in grid.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = completion(t, c);
        }
    }
    let mut mass = vec![0.0; k + 1];
    mass[0] = 1.0;
    for t in 0..n {
        let mut next = vec![0.0; k + 1];
        for c in 0..=k.min(t) {
            if mass[c] == 0.0 {
                continue;
            }
            let w0 = (1.0 - p1) * grid[t + 1][c];
            let w1 = if c < k { p1 * grid[t + 1][c + 1] } else { 0.0 };
            let z = w0 + w1;
            next[c] += mass[c] * w0 / z;
            if c < k {
                next[c + 1] += mass[c] * w1 / z;
            }
        }
        mass = next;
    }
    let tv_phi_star = 0.5
        * (0..=k)
            .map(|c| (mass[c] - (ln_binom(n, c) + c as f64 * lp + (n - c) as f64 * lq - log_z).exp()).abs())
            .sum::<f64>();

    let (root_masked_p1, root_doob_p1) = if n == 0 || k == 0 {
        (0.0, 0.0)
    } else {
        let w1 = p1 * grid[1][1];
        let w0 = (1.0 - p1) * grid[1][0];
        (p1, w1 / (w0 + w1))
    };
    let valid_count = (0..=k).map(|j| crate::grammar::binomial_u128(n, j)).sum();
    Ok(BudgetTv { tv_proj_star, tv_phi_star, valid_count, root_masked_p1, root_doob_p1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::GrammarSpec;
    use crate::toylm::LmSpec;

    fn trie(strings: &[&str], lm: LmSpec) -> Instance {
        let spec = GrammarSpec::FiniteTrie { strings: strings.iter().map(|s| s.to_string()).collect() };
        Instance::new(spec, lm, 8).unwrap()
    }

    fn uniform_bigram(n: usize) -> LmSpec {
        LmSpec::BigramChar { table: vec![vec![0.0; n]; n], temperature: 1.0 }
    }

    #[test]
    fn single_string_law_is_point_mass() {
        let inst = trie(&["ab"], uniform_bigram(3));
        let g = StateGraph::build(&inst).unwrap();
        let (star, _) = mu_star(&g).unwrap();
        assert_eq!(star.len(), 1);
        assert!((star.prob(&inst.grammar().tokenize("ab").unwrap()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_model_equal_length_trie_is_uniform() {
        let inst = trie(&["aa", "ab", "ba", "bb"], uniform_bigram(3));
        let g = StateGraph::build(&inst).unwrap();
        let (star, _) = mu_star(&g).unwrap();
        for (_, p) in star.iter() {
            assert!((p - 0.25).abs() < 1e-12);
        }
        let proj = mu_proj(&g).unwrap();
        assert!(proj.tv(&star) < 1e-12);
    }

    #[test]
    fn two_branch_projection_splits_evenly() {
        let inst = trie(&["ab", "ac"], uniform_bigram(4));
        let proj = mu_proj(&StateGraph::build(&inst).unwrap()).unwrap();
        for (_, p) in proj.iter() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_phi_recovers_mu_star_and_z() {
        let inst = Instance::new(GrammarSpec::Dyck { depth: 3, length: 12 }, LmSpec::seeded(5, 1), 32).unwrap();
        let table = phi_exact(&inst).unwrap();
        let (star, z) = mu_star(table.graph()).unwrap();
        let phi = mu_phi(&inst, table.graph(), &table).unwrap();
        assert!(phi.tv(&star) <= 1e-12);
        assert!((table.root_mass() - z).abs() <= 1e-12 * z.max(1.0));
        assert!(table.recursion_residual() <= 1e-12);
        assert!((star.total() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn eos_phi_is_one() {
        let inst = Instance::new(GrammarSpec::Dyck { depth: 2, length: 4 }, LmSpec::seeded(1, 0), 8).unwrap();
        let table = phi_exact(&inst).unwrap();
        assert_eq!(table.phi(&inst, &inst.root(), inst.eos()), Some(1.0));
    }

    #[test]
    fn budget_rows_and_root_correction() {
        let r = budget_grouped_tv(20, 10, 0.62).unwrap();
        assert!((r.tv_proj_star - 0.670).abs() < 5e-4);
        assert_eq!(r.valid_count, 616_666);
        assert!(r.tv_phi_star < 1e-12);
        let r = budget_grouped_tv(30, 15, 0.70).unwrap();
        assert!((r.root_doob_p1 - 0.482).abs() < 1e-3);
        assert_eq!(r.root_masked_p1, 0.70);
        assert!(budget_grouped_tv(12, 12, 0.8).unwrap().tv_proj_star < 1e-14);
    }

    #[test]
    fn budget_zero_budget_is_trivial() {
        let r = budget_grouped_tv(6, 0, 0.4).unwrap();
        assert!(r.tv_proj_star < 1e-12);
        assert_eq!(r.valid_count, 1);
    }

    #[test]
    fn phi_csv_has_rows() {
        let inst = trie(&["ab", "ac"], uniform_bigram(4));
        let table = phi_exact(&inst).unwrap();
        let mut buf = Vec::new();
        table.write_csv(inst.vocab(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("node,state,prefix,token,phi"));
        assert_eq!(text.lines().count(), 1 + 1 + 2 + 1 + 1);
    }
}
