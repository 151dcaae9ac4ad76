//! The task language: subgoal atoms composed with `then`, `or` and `and`.
//!
//! Grammar (ASCII, lowercase keywords):
//!
//! ```text
//! task    := primary (CONN primary)*     -- every CONN at one level must be the same keyword
//! primary := IDENT | "(" task ")"
//! CONN    := "then" | "or" | "and"
//! ```
//!
//! A chain of one connective becomes a single n-ary node. Parenthesized
//! groups are kept as written, so `(a and b) and c` and `a and b and c`
//! parse to different trees.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of a subgoal, e.g. `mine-wood`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SubgoalName(String);

impl SubgoalName {
    pub fn new(name: impl Into<String>) -> Result<Self, TlError> {
        let name = name.into();
        if !is_identifier(&name) || Connective::from_keyword(&name).is_some() {
            return Err(TlError::InvalidName(name));
        }
        Ok(SubgoalName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SubgoalName {
    type Error = TlError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        SubgoalName::new(value)
    }
}

impl From<SubgoalName> for String {
    fn from(value: SubgoalName) -> Self {
        value.0
    }
}

impl fmt::Display for SubgoalName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for SubgoalName {
    type Err = TlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SubgoalName::new(s)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Connective {
    Then,
    Or,
    And,
}

impl Connective {
    pub fn keyword(self) -> &'static str {
        match self {
            Connective::Then => "then",
            Connective::Or => "or",
            Connective::And => "and",
        }
    }

    fn from_keyword(word: &str) -> Option<Self> {
        match word {
            "then" => Some(Connective::Then),
            "or" => Some(Connective::Or),
            "and" => Some(Connective::And),
            _ => None,
        }
    }
}

/// Parse tree of a task description.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TaskAst {
    Atom(SubgoalName),
    Then(Vec<TaskAst>),
    Or(Vec<TaskAst>),
    And(Vec<TaskAst>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TlError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown keyword `{word}` at byte {offset}; expected `then`, `or` or `and`")]
    UnknownKeyword { offset: usize, word: String },
    #[error("mixed connectives at byte {offset}: `{found}` after `{expected}` needs parentheses")]
    MixedConnectives {
        offset: usize,
        expected: &'static str,
        found: &'static str,
    },
    #[error("invalid subgoal name `{0}`")]
    InvalidName(String),
    #[error("cannot evaluate a task on an empty state sequence")]
    EmptySequence,
}

impl TaskAst {
    pub fn atom(name: &str) -> Self {
        TaskAst::Atom(SubgoalName::new(name).expect("valid subgoal name"))
    }

    pub fn compound(conn: Connective, children: Vec<TaskAst>) -> Self {
        assert!(children.len() >= 2, "compound task needs at least two children");
        match conn {
            Connective::Then => TaskAst::Then(children),
            Connective::Or => TaskAst::Or(children),
            Connective::And => TaskAst::And(children),
        }
    }

    /// A `then` chain of atoms; a single name stays an atom.
    pub fn chain(names: &[SubgoalName]) -> Self {
        assert!(!names.is_empty());
        if names.len() == 1 {
            TaskAst::Atom(names[0].clone())
        } else {
            TaskAst::Then(names.iter().cloned().map(TaskAst::Atom).collect())
        }
    }

    pub fn connective(&self) -> Option<Connective> {
        match self {
            TaskAst::Atom(_) => None,
            TaskAst::Then(_) => Some(Connective::Then),
            TaskAst::Or(_) => Some(Connective::Or),
            TaskAst::And(_) => Some(Connective::And),
        }
    }

    pub fn children(&self) -> &[TaskAst] {
        match self {
            TaskAst::Atom(_) => &[],
            TaskAst::Then(c) | TaskAst::Or(c) | TaskAst::And(c) => c,
        }
    }

    /// Leaves in left-to-right order (with repeats).
    pub fn atoms(&self) -> Vec<&SubgoalName> {
        let mut out = Vec::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<&'a SubgoalName>) {
        match self {
            TaskAst::Atom(name) => out.push(name),
            _ => self.children().iter().for_each(|c| c.collect_atoms(out)),
        }
    }

    pub fn mentions(&self, name: &SubgoalName) -> bool {
        self.atoms().into_iter().any(|a| a == name)
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            TaskAst::Atom(_) => 1,
            _ => self.children().iter().map(TaskAst::leaf_count).sum(),
        }
    }

    /// Normal form used for comparing tasks: directly nested `then` and `or`
    /// chains are flattened (they mean the same thing) and `or`/`and` children
    /// are sorted. Nested `and` is kept because it changes the meaning.
    pub fn canonical(&self) -> TaskAst {
        match self {
            TaskAst::Atom(_) => self.clone(),
            TaskAst::Then(cs) => TaskAst::Then(flatten(cs, Connective::Then)),
            TaskAst::Or(cs) => {
                let mut flat = flatten(cs, Connective::Or);
                flat.sort_by_cached_key(|c| c.to_string());
                TaskAst::Or(flat)
            }
            TaskAst::And(cs) => {
                let mut kids: Vec<TaskAst> = cs.iter().map(TaskAst::canonical).collect();
                kids.sort_by_cached_key(|c| c.to_string());
                TaskAst::And(kids)
            }
        }
    }
}

fn flatten(children: &[TaskAst], conn: Connective) -> Vec<TaskAst> {
    let mut out = Vec::new();
    for child in children {
        let child = child.canonical();
        if child.connective() == Some(conn) {
            out.extend(child.children().iter().cloned());
        } else {
            out.push(child);
        }
    }
    out
}

impl fmt::Display for TaskAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskAst::Atom(name) => write!(f, "{name}"),
            _ => {
                let kw = self.connective().map(Connective::keyword).unwrap_or_default();
                for (i, child) in self.children().iter().enumerate() {
                    if i > 0 {
                        write!(f, " {kw} ")?;
                    }
                    match child {
                        TaskAst::Atom(_) => write!(f, "{child}")?,
                        _ => write!(f, "({child})")?,
                    }
                }
                Ok(())
            }
        }
    }
}

impl FromStr for TaskAst {
    type Err = TlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_task(s)
    }
}

impl Serialize for TaskAst {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskAst {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_task(&text).map_err(serde::de::Error::custom)
    }
}

/// Render a task in the surface syntax accepted by [`parse_task`].
pub fn unparse(ast: &TaskAst) -> String {
    ast.to_string()
}

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Word(&'a str),
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token<'_>)>, TlError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'(' => {
                out.push((i, Token::Open));
                i += 1;
            }
            b')' => {
                out.push((i, Token::Close));
                i += 1;
            }
            c if c.is_ascii_alphanumeric() || c == b'-' || c == b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'-' || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push((start, Token::Word(&text[start..i])));
            }
            _ => {
                return Err(TlError::Syntax {
                    offset: i,
                    message: format!("unexpected character {:?}", text[i..].chars().next().unwrap()),
                })
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Token<'a>)>,
    pos: usize,
    len: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&(usize, Token<'a>)> {
        self.tokens.get(self.pos)
    }

    fn offset(&self) -> usize {
        self.peek().map(|t| t.0).unwrap_or(self.len)
    }

    fn task(&mut self) -> Result<TaskAst, TlError> {
        let first = self.primary()?;
        let mut conn: Option<Connective> = None;
        let mut children = vec![first];
        loop {
            let (offset, word) = match self.peek() {
                None | Some((_, Token::Close)) => break,
                Some((offset, Token::Word(word))) => (*offset, *word),
                Some((offset, Token::Open)) => {
                    return Err(TlError::Syntax {
                        offset: *offset,
                        message: "expected a connective before `(`".into(),
                    })
                }
            };
            let next = Connective::from_keyword(word).ok_or_else(|| TlError::UnknownKeyword {
                offset,
                word: word.to_string(),
            })?;
            match conn {
                Some(c) if c != next => {
                    return Err(TlError::MixedConnectives {
                        offset,
                        expected: c.keyword(),
                        found: next.keyword(),
                    })
                }
                _ => conn = Some(next),
            }
            self.pos += 1;
            children.push(self.primary()?);
        }
        Ok(match conn {
            None => children.pop().unwrap(),
            Some(c) => TaskAst::compound(c, children),
        })
    }

    fn primary(&mut self) -> Result<TaskAst, TlError> {
        let offset = self.offset();
        match self.peek().cloned() {
            None => Err(TlError::Syntax {
                offset,
                message: "unexpected end of input; expected a subgoal or `(`".into(),
            }),
            Some((_, Token::Close)) => Err(TlError::Syntax {
                offset,
                message: "unexpected `)`; expected a subgoal or `(`".into(),
            }),
            Some((_, Token::Open)) => {
                self.pos += 1;
                let inner = self.task()?;
                match self.peek() {
                    Some((_, Token::Close)) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(TlError::Syntax {
                        offset: self.offset(),
                        message: "missing `)`".into(),
                    }),
                }
            }
            Some((_, Token::Word(word))) => {
                if Connective::from_keyword(word).is_some() {
                    return Err(TlError::Syntax {
                        offset,
                        message: format!("expected a subgoal, found keyword `{word}`"),
                    });
                }
                let name = SubgoalName::new(word).map_err(|_| TlError::Syntax {
                    offset,
                    message: format!("`{word}` is not a valid subgoal name"),
                })?;
                self.pos += 1;
                Ok(TaskAst::Atom(name))
            }
        }
    }
}

/// Parse a task description.
pub fn parse_task(text: &str) -> Result<TaskAst, TlError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        len: text.len(),
    };
    let ast = parser.task()?;
    if let Some((offset, _)) = parser.peek() {
        return Err(TlError::Syntax {
            offset: *offset,
            message: "unbalanced `)`".into(),
        });
    }
    Ok(ast)
}

/// Interval table: `get(i, j)` is whether states `i..=j` satisfy a subtask.
#[derive(Clone)]
struct Spans {
    n: usize,
    cells: Vec<bool>,
}

impl Spans {
    fn empty(n: usize) -> Self {
        Spans {
            n,
            cells: vec![false; n * n],
        }
    }

    fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize) {
        self.cells[i * self.n + j] = true;
    }

    fn or_assign(&mut self, other: &Spans) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a |= *b;
        }
    }

    /// `first` on `i..=k` followed by `second` on `k..=j`, sharing state `k`.
    fn then(first: &Spans, second: &Spans) -> Spans {
        let n = first.n;
        let mut out = Spans::empty(n);
        for i in 0..n {
            for k in i + 1..n {
                if !first.get(i, k) {
                    continue;
                }
                for j in k + 1..n {
                    if second.get(k, j) {
                        out.set(i, j);
                    }
                }
            }
        }
        out
    }
}

/// Whether the state sequence satisfies `task`, given a goal test per subgoal.
pub fn satisfies<S, F>(states: &[S], task: &TaskAst, goal: F) -> Result<bool, TlError>
where
    F: Fn(&SubgoalName, &S) -> bool,
{
    if states.is_empty() {
        return Err(TlError::EmptySequence);
    }
    let n = states.len();
    let mut truth: HashMap<&SubgoalName, Vec<bool>> = HashMap::new();
    for name in task.atoms() {
        truth
            .entry(name)
            .or_insert_with(|| states.iter().map(|s| goal(name, s)).collect());
    }
    let spans = spans_for(task, n, &truth);
    Ok(spans.get(0, n - 1))
}

fn spans_for(task: &TaskAst, n: usize, truth: &HashMap<&SubgoalName, Vec<bool>>) -> Spans {
    match task {
        TaskAst::Atom(name) => {
            let t = &truth[name];
            let mut out = Spans::empty(n);
            for i in 0..n {
                if t[i] {
                    continue;
                }
                for j in i + 1..n {
                    if t[j] {
                        out.set(i, j);
                    }
                }
            }
            out
        }
        TaskAst::Then(cs) => {
            let mut acc = spans_for(&cs[0], n, truth);
            for c in &cs[1..] {
                acc = Spans::then(&acc, &spans_for(c, n, truth));
            }
            acc
        }
        TaskAst::Or(cs) => {
            let mut acc = Spans::empty(n);
            for c in cs {
                acc.or_assign(&spans_for(c, n, truth));
            }
            acc
        }
        TaskAst::And(cs) => {
            // best[mask]: spans covering exactly the children in `mask`, in some order.
            let parts: Vec<Spans> = cs.iter().map(|c| spans_for(c, n, truth)).collect();
            let full = (1usize << parts.len()) - 1;
            let mut best: Vec<Option<Spans>> = vec![None; full + 1];
            for mask in 1..=full {
                if mask.count_ones() == 1 {
                    best[mask] = Some(parts[mask.trailing_zeros() as usize].clone());
                    continue;
                }
                let mut acc = Spans::empty(n);
                for (c, part) in parts.iter().enumerate() {
                    if mask & (1 << c) == 0 {
                        continue;
                    }
                    let rest = best[mask & !(1 << c)].as_ref().unwrap();
                    acc.or_assign(&Spans::then(part, rest));
                }
                best[mask] = Some(acc);
            }
            best[full].take().unwrap()
        }
    }
}

/// Every task over `vocab` with at most `max_atoms` leaves, in normal form
/// (see [`TaskAst::canonical`]). A subgoal appears at most once per task.
pub fn enumerate_tasks(vocab: &[SubgoalName], max_atoms: usize) -> Vec<TaskAst> {
    assert!(max_atoms >= 1, "max_atoms must be at least 1");
    let vocab: Vec<SubgoalName> = vocab
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    assert!(vocab.len() <= 63, "vocabulary too large to enumerate");
    let mut memo: BTreeMap<u64, Vec<TaskAst>> = BTreeMap::new();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let full = if vocab.len() == 64 { u64::MAX } else { (1u64 << vocab.len()) - 1 };
    let mut mask = 1u64;
    while mask <= full && mask != 0 {
        if (mask.count_ones() as usize) <= max_atoms {
            for task in trees_over(mask, &vocab, &mut memo) {
                let task = task.canonical();
                if seen.insert(task.to_string()) {
                    out.push(task);
                }
            }
        }
        mask += 1;
    }
    out.sort_by_key(|t| (t.leaf_count(), t.to_string()));
    out
}

fn trees_over(mask: u64, vocab: &[SubgoalName], memo: &mut BTreeMap<u64, Vec<TaskAst>>) -> Vec<TaskAst> {
    if let Some(hit) = memo.get(&mask) {
        return hit.clone();
    }
    let out = if mask.count_ones() == 1 {
        vec![TaskAst::Atom(vocab[mask.trailing_zeros() as usize].clone())]
    } else {
        let mut out = Vec::new();
        for blocks in ordered_partitions(mask).into_iter().filter(|b| b.len() >= 2) {
            let lists: Vec<Vec<TaskAst>> = blocks
                .iter()
                .map(|&b| {
                    trees_over(b, vocab, memo)
                        .into_iter()
                        .filter(|t| t.connective() != Some(Connective::Then))
                        .collect()
                })
                .collect();
            out.extend(product(&lists).into_iter().map(TaskAst::Then));
        }
        for blocks in set_partitions(mask).into_iter().filter(|b| b.len() >= 2) {
            let non_or: Vec<Vec<TaskAst>> = blocks
                .iter()
                .map(|&b| {
                    trees_over(b, vocab, memo)
                        .into_iter()
                        .filter(|t| t.connective() != Some(Connective::Or))
                        .collect()
                })
                .collect();
            out.extend(product(&non_or).into_iter().map(TaskAst::Or));
            let any: Vec<Vec<TaskAst>> = blocks.iter().map(|&b| trees_over(b, vocab, memo)).collect();
            out.extend(product(&any).into_iter().map(TaskAst::And));
        }
        out
    };
    memo.insert(mask, out.clone());
    out
}

fn subsets(mask: u64) -> impl Iterator<Item = u64> {
    // Nonempty submasks in decreasing order.
    let mut sub = mask;
    let mut done = mask == 0;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let cur = sub;
        if sub == 0 {
            return None;
        }
        sub = (sub - 1) & mask;
        if sub == 0 {
            done = true;
        }
        Some(cur)
    })
}

fn ordered_partitions(mask: u64) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    for first in subsets(mask) {
        let rest = mask & !first;
        if rest == 0 {
            out.push(vec![first]);
        } else {
            for tail in ordered_partitions(rest) {
                let mut seq = vec![first];
                seq.extend(tail);
                out.push(seq);
            }
        }
    }
    out
}

fn set_partitions(mask: u64) -> Vec<Vec<u64>> {
    if mask == 0 {
        return vec![vec![]];
    }
    let low = mask & mask.wrapping_neg();
    let others = mask & !low;
    let mut out = Vec::new();
    let mut extra = others;
    loop {
        let block = low | extra;
        for tail in set_partitions(mask & !block) {
            let mut p = vec![block];
            p.extend(tail);
            out.push(p);
        }
        if extra == 0 {
            break;
        }
        extra = (extra - 1) & others;
    }
    out
}

fn product(lists: &[Vec<TaskAst>]) -> Vec<Vec<TaskAst>> {
    let mut acc: Vec<Vec<TaskAst>> = vec![vec![]];
    for list in lists {
        let mut next = Vec::with_capacity(acc.len() * list.len());
        for prefix in &acc {
            for item in list {
                let mut v = prefix.clone();
                v.push(item.clone());
                next.push(v);
            }
        }
        acc = next;
    }
    acc
}
