//! Dependency parses and the neighbor structure the graph attention layer
//! runs over.
//!
//! Node 0 is the sentence-start placeholder, nodes `1..=N_w` are the words
//! and node `N_w + 1` is the sentence-end placeholder. Edges are undirected:
//! every node has a self-loop, every non-root word is linked to its head, and
//! both placeholders are linked to the root word.

use std::fs;
use std::io::BufRead;
use std::path::Path;

use ndarray::Array2;

use crate::corpus::Dataset;
use crate::error::{Error, Result};

/// Head indices for one sentence: `heads[i]` is the 1-based head of word
/// `i + 1`, or 0 for the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepParse {
    heads: Vec<usize>,
}

impl DepParse {
    /// Validates a head sequence. `line` is only used for error reporting.
    pub fn new(heads: Vec<usize>, line: usize) -> Result<Self> {
        let n = heads.len();
        if n == 0 {
            return Err(Error::NoRoot(line));
        }
        let roots = heads.iter().filter(|&&h| h == 0).count();
        if roots > 1 {
            return Err(Error::MultipleRoots(line));
        }
        if heads.iter().any(|&h| h > n) {
            return Err(Error::HeadOutOfRange(line));
        }
        if heads.iter().enumerate().any(|(i, &h)| h == i + 1) {
            return Err(Error::CyclicHead(line));
        }
        if roots == 0 {
            return Err(Error::NoRoot(line));
        }
        // Every word must reach the root within n steps.
        for start in 1..=n {
            let mut cur = start;
            let mut steps = 0;
            while cur != 0 {
                cur = heads[cur - 1];
                steps += 1;
                if steps > n {
                    return Err(Error::CyclicHead(line));
                }
            }
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// 1-based index of the root word.
    pub fn root(&self) -> usize {
        self.heads.iter().position(|&h| h == 0).expect("validated parse has a root") + 1
    }
}

/// Symmetric boolean neighbor matrix over `N_w + 2` nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    a: Array2<bool>,
}

impl AdjacencyMatrix {
    /// Wraps an arbitrary mask. Every row needs at least one neighbor.
    pub fn from_mask(a: Array2<bool>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::dims("adjacency must be square"));
        }
        if a.rows().into_iter().any(|r| !r.iter().any(|&v| v)) {
            return Err(Error::dims("adjacency row without neighbors"));
        }
        Ok(Self { a })
    }

    /// Self-loops only.
    pub fn identity(n: usize) -> Self {
        Self {
            a: Array2::from_shape_fn((n, n), |(i, j)| i == j),
        }
    }

    pub fn size(&self) -> usize {
        self.a.nrows()
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.a
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.a[[i, j]]
    }

    /// `n[i]`, in increasing order.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.size()).filter(|&j| self.a[[i, j]]).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.a == self.a.t()
    }

    /// Count of true entries off the diagonal (ordered pairs).
    pub fn off_diagonal_edges(&self) -> usize {
        self.a
            .indexed_iter()
            .filter(|((i, j), &v)| v && i != j)
            .count()
    }
}

pub fn build_adjacency(parse: &DepParse) -> AdjacencyMatrix {
    let n = parse.len();
    let size = n + 2;
    let mut a = Array2::from_shape_fn((size, size), |(i, j)| i == j);
    let mut link = |i: usize, j: usize| {
        a[[i, j]] = true;
        a[[j, i]] = true;
    };
    for (i, &head) in parse.heads().iter().enumerate() {
        if head != 0 {
            link(i + 1, head);
        }
    }
    let root = parse.root();
    link(0, root);
    link(size - 1, root);
    AdjacencyMatrix { a }
}

pub fn parse_line(line: &str, lineno: usize) -> Result<DepParse> {
    let heads = line
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| Error::ParseInt(lineno)))
        .collect::<Result<Vec<_>>>()?;
    DepParse::new(heads, lineno)
}

/// Reads a `.dep` file aligned 1:1 with `dataset`.
pub fn load_parses(path: &Path, dataset: &Dataset) -> Result<Vec<DepParse>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != dataset.len() {
        return Err(Error::LineCountMismatch {
            what: path.display().to_string(),
            expected: dataset.len(),
            found: lines.len(),
        });
    }
    lines
        .iter()
        .zip(&dataset.samples)
        .enumerate()
        .map(|(i, (line, sample))| {
            let lineno = i + 1;
            if line.split_whitespace().count() != sample.utterance.len() {
                return Err(Error::LengthMismatch(lineno));
            }
            parse_line(line, lineno)
        })
        .collect()
}

/// Extracts the HEAD column of every sentence in a CoNLL-U stream.
///
/// Comment lines, multiword-token ranges (`3-4`) and empty nodes (`5.1`) are
/// skipped. Sentences without any word line are dropped with a warning.
pub fn read_conllu_heads(reader: impl BufRead) -> Result<Vec<Vec<usize>>> {
    let mut sentences = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut in_block = false;
    let mut block_start = 0;

    let mut flush = |current: &mut Vec<usize>, in_block: &mut bool, start: usize| {
        if *in_block {
            if current.is_empty() {
                log::warn!("CoNLL-U sentence starting at line {start} has no words; skipped");
            } else {
                sentences.push(std::mem::take(current));
            }
        }
        *in_block = false;
    };

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<conllu>", e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut current, &mut in_block, block_start);
            continue;
        }
        if !in_block {
            in_block = true;
            block_start = lineno;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::MalformedConllu(lineno));
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let id: usize = id.parse().map_err(|_| Error::MalformedConllu(lineno))?;
        if id != current.len() + 1 {
            return Err(Error::MalformedConllu(lineno));
        }
        let head: usize = cols[6].parse().map_err(|_| Error::MalformedConllu(lineno))?;
        current.push(head);
    }
    flush(&mut current, &mut in_block, block_start);
    Ok(sentences)
}

/// Renders head sequences in the `.dep` line format.
pub fn format_dep(sentences: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for heads in sentences {
        let line: Vec<String> = heads.iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
