//! Prefix-checkable constraints with incremental matcher states.
//!
//! Three families are supported: bounded Dyck languages with one bracket
//! pair, finite languages compiled to a character trie, and the budget DFA
//! of fixed-length binary strings with at most `k` ones. EOS is an ordinary
//! token that is valid exactly when the consumed prefix is a complete string.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylm::{Token, Vocab, Word};

pub const EOS_GLYPH: &str = "<eos>";

/// Default cap on the number of strings `enumerate_language` will materialize.
pub const DEFAULT_ENUMERATION_LIMIT: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum GrammarSpec {
    Dyck { depth: usize, length: usize },
    FiniteTrie { strings: Vec<String> },
    BudgetDfa { n: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatcherState {
    Dyck { depth: u16, len: u16 },
    Trie { node: u32 },
    Budget { t: u16, c: u16 },
    /// EOS has been consumed.
    Accepted,
}

impl MatcherState {
    pub fn key_words(&self) -> [u64; 3] {
        match *self {
            MatcherState::Dyck { depth, len } => [1, depth as u64, len as u64],
            MatcherState::Trie { node } => [2, node as u64, 0],
            MatcherState::Budget { t, c } => [3, t as u64, c as u64],
            MatcherState::Accepted => [4, 0, 0],
        }
    }
}

#[derive(Debug, Clone)]
struct TrieNode {
    children: BTreeMap<Token, u32>,
    terminal: bool,
    /// Fewest further content tokens to reach a terminal node.
    min_to_end: usize,
}

#[derive(Debug, Clone)]
enum Compiled {
    Dyck { depth: usize, length: usize, open: Token, close: Token },
    Trie { nodes: Vec<TrieNode>, max_len: usize },
    Budget { n: usize, k: usize, zero: Token, one: Token },
}

#[derive(Debug, Clone)]
pub struct Grammar {
    spec: GrammarSpec,
    vocab: Vocab,
    compiled: Compiled,
}

impl Grammar {
    pub fn new(spec: GrammarSpec) -> Result<Self> {
        let (vocab, compiled) = match &spec {
            GrammarSpec::Dyck { depth, length } => {
                if *depth < 1 || *length < 2 {
                    return Err(Error::InvalidSpec("Dyck needs depth >= 1 and length >= 2".into()));
                }
                if *length > u16::MAX as usize {
                    return Err(Error::InvalidSpec("Dyck length too large".into()));
                }
                let vocab = Vocab::new(vec!["(".into(), ")".into(), EOS_GLYPH.into()], Token(2))?;
                let compiled =
                    Compiled::Dyck { depth: *depth, length: *length, open: Token(0), close: Token(1) };
                (vocab, compiled)
            }
            GrammarSpec::FiniteTrie { strings } => compile_trie(strings)?,
            GrammarSpec::BudgetDfa { n, k } => {
                if k > n {
                    return Err(Error::InvalidSpec("budget DFA needs k <= n".into()));
                }
                if *n > 64 {
                    return Err(Error::InvalidSpec("budget DFA supports n <= 64".into()));
                }
                let vocab = Vocab::new(vec!["0".into(), "1".into(), EOS_GLYPH.into()], Token(2))?;
                (vocab, Compiled::Budget { n: *n, k: *k, zero: Token(0), one: Token(1) })
            }
        };
        Ok(Self { spec, vocab, compiled })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn eos(&self) -> Token {
        self.vocab.eos()
    }

    /// Length of the longest string in the language.
    pub fn max_length(&self) -> usize {
        match &self.compiled {
            Compiled::Dyck { length, .. } => length - length % 2,
            Compiled::Trie { max_len, .. } => *max_len,
            Compiled::Budget { n, .. } => *n,
        }
    }

    /// Opening and closing bracket tokens of a Dyck grammar.
    pub fn brackets(&self) -> Option<(Token, Token)> {
        match &self.compiled {
            Compiled::Dyck { open, close, .. } => Some((*open, *close)),
            _ => None,
        }
    }

    pub fn initial_state(&self) -> MatcherState {
        match &self.compiled {
            Compiled::Dyck { .. } => MatcherState::Dyck { depth: 0, len: 0 },
            Compiled::Trie { .. } => MatcherState::Trie { node: 0 },
            Compiled::Budget { .. } => MatcherState::Budget { t: 0, c: 0 },
        }
    }

    /// Whether the consumed prefix is itself a member of the language.
    pub fn is_complete(&self, s: MatcherState) -> bool {
        match (&self.compiled, s) {
            (Compiled::Dyck { .. }, MatcherState::Dyck { depth, .. }) => depth == 0,
            (Compiled::Trie { nodes, .. }, MatcherState::Trie { node }) => nodes[node as usize].terminal,
            (Compiled::Budget { n, .. }, MatcherState::Budget { t, .. }) => t as usize == *n,
            _ => false,
        }
    }

    /// Valid next tokens in increasing id order.
    pub fn valid_next(&self, s: MatcherState) -> Vec<Token> {
        let eos = self.eos();
        let mut out = Vec::with_capacity(3);
        match (&self.compiled, s) {
            (Compiled::Dyck { depth: d, length, open, close }, MatcherState::Dyck { depth, len }) => {
                let (depth, len) = (depth as usize, len as usize);
                if depth < *d && length - len >= depth + 2 {
                    out.push(*open);
                }
                if depth > 0 {
                    out.push(*close);
                }
                if depth == 0 {
                    out.push(eos);
                }
            }
            (Compiled::Trie { nodes, .. }, MatcherState::Trie { node }) => {
                let nd = &nodes[node as usize];
                out.extend(nd.children.keys().copied());
                if nd.terminal {
                    out.push(eos);
                }
            }
            (Compiled::Budget { n, k, zero, one }, MatcherState::Budget { t, c }) => {
                if (t as usize) < *n {
                    out.push(*zero);
                    if (c as usize) < *k {
                        out.push(*one);
                    }
                } else {
                    out.push(eos);
                }
            }
            _ => {}
        }
        out.sort();
        out
    }

    /// Returns the successor state; `s` itself is a value and is never mutated.
    pub fn advance(&self, s: MatcherState, y: Token) -> Result<MatcherState> {
        if !self.valid_next(s).contains(&y) {
            return Err(Error::ConstraintViolation { token: y });
        }
        if y == self.eos() {
            return Ok(MatcherState::Accepted);
        }
        let next = match (&self.compiled, s) {
            (Compiled::Dyck { open, .. }, MatcherState::Dyck { depth, len }) => {
                let depth = if y == *open { depth + 1 } else { depth - 1 };
                MatcherState::Dyck { depth, len: len + 1 }
            }
            (Compiled::Trie { nodes, .. }, MatcherState::Trie { node }) => {
                MatcherState::Trie { node: nodes[node as usize].children[&y] }
            }
            (Compiled::Budget { one, .. }, MatcherState::Budget { t, c }) => {
                MatcherState::Budget { t: t + 1, c: c + u16::from(y == *one) }
            }
            _ => unreachable!("valid_next is empty for mismatched states"),
        };
        Ok(next)
    }

    /// Advances along a whole word from the initial state.
    pub fn run(&self, word: &[Token]) -> Result<MatcherState> {
        word.iter().try_fold(self.initial_state(), |s, &y| self.advance(s, y))
    }

    pub fn accepts(&self, word: &[Token]) -> bool {
        self.run(word).map(|s| self.is_complete(s)).unwrap_or(false)
    }

    /// Fewest tokens, EOS included, needed to finish from `s`.
    pub fn min_completion(&self, s: MatcherState) -> usize {
        match (&self.compiled, s) {
            (Compiled::Dyck { .. }, MatcherState::Dyck { depth, .. }) => depth as usize + 1,
            (Compiled::Trie { nodes, .. }, MatcherState::Trie { node }) => {
                nodes[node as usize].min_to_end + 1
            }
            (Compiled::Budget { n, .. }, MatcherState::Budget { t, .. }) => n - t as usize + 1,
            _ => 0,
        }
    }

    /// Counts complete strings of at most `cap` tokens without materializing them.
    pub fn count_language(&self, cap: usize) -> u128 {
        if let Compiled::Budget { n, k, .. } = &self.compiled {
            return if *n <= cap { (0..=*k).map(|j| binomial_u128(*n, j)).sum() } else { 0 };
        }
        let mut memo = HashMap::new();
        self.count_from(self.initial_state(), 0, cap, &mut memo)
    }

    fn count_from(
        &self,
        s: MatcherState,
        len: usize,
        cap: usize,
        memo: &mut HashMap<(MatcherState, usize), u128>,
    ) -> u128 {
        if let Some(&v) = memo.get(&(s, len)) {
            return v;
        }
        let mut total = 0u128;
        for y in self.valid_next(s) {
            if y == self.eos() {
                total += 1;
            } else if len < cap {
                let next = self.advance(s, y).expect("valid token");
                total += self.count_from(next, len + 1, cap, memo);
            }
        }
        memo.insert((s, len), total);
        total
    }

    pub fn enumerate_language(&self, cap: usize) -> Result<Vec<Word>> {
        self.enumerate_language_limited(cap, DEFAULT_ENUMERATION_LIMIT)
    }

    /// All complete strings of at most `cap` tokens in lexicographic order.
    pub fn enumerate_language_limited(&self, cap: usize, limit: u128) -> Result<Vec<Word>> {
        let count = self.count_language(cap);
        if count > limit {
            return Err(Error::EnumerationTooLarge { count, limit });
        }
        let mut out = Vec::with_capacity(count as usize);
        let mut word = Vec::new();
        self.enumerate_from(self.initial_state(), cap, &mut word, &mut out);
        Ok(out)
    }

    fn enumerate_from(&self, s: MatcherState, cap: usize, word: &mut Word, out: &mut Vec<Word>) {
        // EOS has the largest id, so emit the complete word first to keep
        // shorter strings ahead of their extensions.
        if self.is_complete(s) {
            out.push(word.clone());
        }
        if word.len() >= cap {
            return;
        }
        for y in self.valid_next(s) {
            if y == self.eos() {
                continue;
            }
            let next = self.advance(s, y).expect("valid token");
            word.push(y);
            self.enumerate_from(next, cap, word, out);
            word.pop();
        }
    }

    /// Writes one rendered string per line.
    pub fn dump_language<W: Write>(&self, words: &[Word], mut out: W) -> Result<()> {
        for w in words {
            writeln!(out, "{}", self.vocab.render(w))?;
        }
        Ok(())
    }

    /// Number of matcher states. For the budget DFA this is the full `(t, c)`
    /// grid; for Dyck it is the set of reachable `(depth, len)` pairs.
    pub fn state_count(&self) -> Result<usize> {
        match &self.compiled {
            Compiled::Budget { n, k, .. } => Ok((n + 1) * (k + 1)),
            Compiled::Dyck { .. } => {
                let mut seen = HashSet::new();
                let mut queue = VecDeque::from([self.initial_state()]);
                seen.insert(self.initial_state());
                while let Some(s) = queue.pop_front() {
                    for y in self.valid_next(s) {
                        if y == self.eos() {
                            continue;
                        }
                        let next = self.advance(s, y)?;
                        if seen.insert(next) {
                            queue.push_back(next);
                        }
                    }
                }
                Ok(seen.len())
            }
            Compiled::Trie { nodes, .. } => Ok(nodes.len()),
        }
    }

    /// Maximum nesting depth of a Dyck word.
    pub fn max_depth(&self, word: &[Token]) -> Option<usize> {
        let (open, _) = self.brackets()?;
        let mut depth = 0usize;
        let mut best = 0usize;
        for &t in word {
            if t == open {
                depth += 1;
                best = best.max(depth);
            } else {
                depth = depth.saturating_sub(1);
            }
        }
        Some(best)
    }

    /// Tokenizes a string under this grammar's character vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Word> {
        text.chars()
            .map(|c| {
                self.vocab
                    .lookup(c.encode_utf8(&mut [0u8; 4]))
                    .ok_or_else(|| Error::InvalidSpec(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }
}

fn compile_trie(strings: &[String]) -> Result<(Vocab, Compiled)> {
    if strings.is_empty() {
        return Err(Error::InvalidSpec("finite language must contain at least one string".into()));
    }
    let distinct: BTreeSet<&String> = strings.iter().collect();
    if distinct.len() != strings.len() {
        return Err(Error::InvalidSpec("finite language strings must be distinct".into()));
    }
    let chars: BTreeSet<char> = strings.iter().flat_map(|s| s.chars()).collect();
    let mut glyphs: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
    let eos = Token(glyphs.len() as u16);
    glyphs.push(EOS_GLYPH.into());
    let vocab = Vocab::new(glyphs, eos)?;
    let index: HashMap<char, Token> = chars.iter().enumerate().map(|(i, &c)| (c, Token(i as u16))).collect();

    let mut nodes = vec![TrieNode { children: BTreeMap::new(), terminal: false, min_to_end: usize::MAX }];
    let mut depth_of = vec![0usize];
    let mut max_len = 0;
    for s in strings {
        let mut cur = 0usize;
        let mut len = 0usize;
        for c in s.chars() {
            let t = index[&c];
            len += 1;
            cur = match nodes[cur].children.get(&t) {
                Some(&next) => next as usize,
                None => {
                    let id = nodes.len();
                    nodes.push(TrieNode { children: BTreeMap::new(), terminal: false, min_to_end: usize::MAX });
                    depth_of.push(len);
                    nodes[cur].children.insert(t, id as u32);
                    id
                }
            };
        }
        nodes[cur].terminal = true;
        max_len = max_len.max(len);
    }
    // Children always have larger ids than their parent.
    for id in (0..nodes.len()).rev() {
        let from_children = nodes[id]
            .children
            .values()
            .map(|&c| nodes[c as usize].min_to_end.saturating_add(1))
            .min()
            .unwrap_or(usize::MAX);
        nodes[id].min_to_end = if nodes[id].terminal { 0 } else { from_children };
    }
    Ok((vocab, Compiled::Trie { nodes, max_len }))
}

pub fn binomial_u128(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1u128;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dyck(d: usize, l: usize) -> Grammar {
        Grammar::new(GrammarSpec::Dyck { depth: d, length: l }).unwrap()
    }

    fn trie(strings: &[&str]) -> Grammar {
        Grammar::new(GrammarSpec::FiniteTrie { strings: strings.iter().map(|s| s.to_string()).collect() })
            .unwrap()
    }

    #[test]
    fn dyck_root_allows_open_and_eos() {
        let g = dyck(3, 16);
        assert_eq!(g.initial_state(), MatcherState::Dyck { depth: 0, len: 0 });
        assert_eq!(g.valid_next(g.initial_state()), vec![Token(0), Token(2)]);
        let s = g.advance(g.initial_state(), Token(0)).unwrap();
        assert_eq!(s, MatcherState::Dyck { depth: 1, len: 1 });
    }

    #[test]
    fn dyck_counts_match_bounded_catalan_sums() {
        assert_eq!(dyck(3, 12).enumerate_language(32).unwrap().len(), 145);
        assert_eq!(dyck(3, 16).enumerate_language(32).unwrap().len(), 988);
        assert_eq!(dyck(3, 16).count_language(32), 988);
    }

    #[test]
    fn enumeration_is_lexicographic() {
        let words = dyck(2, 6).enumerate_language(32).unwrap();
        let mut sorted = words.clone();
        sorted.sort();
        assert_eq!(words, sorted);
        assert_eq!(words[0], Vec::<Token>::new());
    }

    #[test]
    fn budget_saturation_forces_zero() {
        let g = Grammar::new(GrammarSpec::BudgetDfa { n: 20, k: 10 }).unwrap();
        assert_eq!(g.initial_state(), MatcherState::Budget { t: 0, c: 0 });
        assert_eq!(g.valid_next(MatcherState::Budget { t: 12, c: 10 }), vec![Token(0)]);
        let s = g.advance(MatcherState::Budget { t: 5, c: 3 }, Token(1)).unwrap();
        assert_eq!(s, MatcherState::Budget { t: 6, c: 4 });
        assert_eq!(g.valid_next(MatcherState::Budget { t: 20, c: 4 }), vec![Token(2)]);
    }

    #[test]
    fn budget_state_counts() {
        let count = |n, k| Grammar::new(GrammarSpec::BudgetDfa { n, k }).unwrap().state_count().unwrap();
        assert_eq!(count(20, 10), 231);
        assert_eq!(count(30, 15), 496);
        assert_eq!(count(1, 0), 2);
    }

    #[test]
    fn budget_count_20_10() {
        let g = Grammar::new(GrammarSpec::BudgetDfa { n: 20, k: 10 }).unwrap();
        assert_eq!(g.count_language(20), 616_666);
    }

    #[test]
    fn trie_branches_and_dead_edges() {
        let g = trie(&["ab", "ac"]);
        let a = g.tokenize("a").unwrap()[0];
        let s = g.advance(g.initial_state(), a).unwrap();
        let next: Vec<&str> = g.valid_next(s).iter().map(|&t| g.vocab().glyph(t)).collect();
        assert_eq!(next, vec!["b", "c"]);
        assert!(matches!(g.advance(s, a), Err(Error::ConstraintViolation { .. })));
        assert_eq!(g.state_count().unwrap(), 4);
    }

    #[test]
    fn trie_prefix_strings_allow_eos_midway() {
        let g = trie(&["a", "ab"]);
        let s = g.run(&g.tokenize("a").unwrap()).unwrap();
        assert!(g.valid_next(s).contains(&g.eos()));
        assert_eq!(g.enumerate_language(8).unwrap().len(), 2);
        assert_eq!(g.min_completion(g.initial_state()), 2);
    }

    #[test]
    fn invalid_specs() {
        assert!(Grammar::new(GrammarSpec::Dyck { depth: 0, length: 4 }).is_err());
        assert!(Grammar::new(GrammarSpec::BudgetDfa { n: 3, k: 4 }).is_err());
        assert!(Grammar::new(GrammarSpec::FiniteTrie { strings: vec![] }).is_err());
        assert!(Grammar::new(GrammarSpec::FiniteTrie { strings: vec!["a".into(), "a".into()] }).is_err());
    }

    #[test]
    fn enumeration_limit_errors() {
        let g = Grammar::new(GrammarSpec::BudgetDfa { n: 20, k: 10 }).unwrap();
        assert!(matches!(
            g.enumerate_language_limited(20, 1000),
            Err(Error::EnumerationTooLarge { count: 616_666, limit: 1000 })
        ));
    }

    #[test]
    fn cap_filters_long_strings() {
        assert_eq!(dyck(3, 12).count_language(4), 1 + 1 + 2);
    }
}
