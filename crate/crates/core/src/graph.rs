//! Directed interference networks.
//!
//! An edge `(j, i)` means the treatment of `j` can move the outcome of `i`.
//! Every node carries a self-loop, so `i` is always in its own in-neighbourhood.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    /// Sorted, duplicate-free in-neighbour lists; `i` is always in `in_neighbors[i]`.
    in_neighbors: Vec<Vec<usize>>,
    out_degree: Vec<usize>,
    max_in_degree: usize,
    max_out_degree: usize,
}

impl Graph {
    /// Builds a graph from in-neighbour lists, checking the self-loop,
    /// range and uniqueness invariants. Lists are sorted on the way in.
    pub fn from_in_neighbors(mut in_neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = in_neighbors.len();
        if n == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        let mut out_degree = vec![0usize; n];
        for (i, list) in in_neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!(
                    "duplicate in-neighbour of node {i}"
                )));
            }
            if let Some(&j) = list.iter().find(|&&j| j >= n) {
                return Err(Error::invalid(format!(
                    "in-neighbour {j} of node {i} out of range for n = {n}"
                )));
            }
            if list.binary_search(&i).is_err() {
                return Err(Error::invalid(format!("node {i} is missing its self-loop")));
            }
            for &j in list.iter() {
                out_degree[j] += 1;
            }
        }
        let max_in_degree = in_neighbors.iter().map(Vec::len).max().unwrap_or(0);
        let max_out_degree = out_degree.iter().copied().max().unwrap_or(0);
        Ok(Graph {
            n,
            in_neighbors,
            out_degree,
            max_in_degree,
            max_out_degree,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// In-neighbourhood of `i`, including `i` itself, in ascending order.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    pub fn all_in_neighbors(&self) -> &[Vec<usize>] {
        &self.in_neighbors
    }

    /// Out-neighbour lists (including the self-loop), ascending.
    pub fn out_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n];
        for (i, list) in self.in_neighbors.iter().enumerate() {
            for &j in list {
                out[j].push(i);
            }
        }
        out
    }

    pub fn out_degree(&self, j: usize) -> usize {
        self.out_degree[j]
    }

    pub fn max_in_degree(&self) -> usize {
        self.max_in_degree
    }

    pub fn max_out_degree(&self) -> usize {
        self.max_out_degree
    }

    /// `d = max(d_in, d_out)`.
    pub fn max_degree(&self) -> usize {
        self.max_in_degree.max(self.max_out_degree)
    }

    /// Number of edges, self-loops included.
    pub fn edge_count(&self) -> usize {
        self.in_neighbors.iter().map(Vec::len).sum()
    }

    /// Serialises to the edge-list text format: a `n <count>` header followed by
    /// one `src dst` line per edge, grouped by destination.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::with_capacity(16 * self.edge_count());
        let _ = writeln!(s, "n {}", self.n);
        for (i, list) in self.in_neighbors.iter().enumerate() {
            for &j in list {
                let _ = writeln!(s, "{j} {i}");
            }
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let n = loop {
            let Some((idx, line)) = lines.next() else {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing `n <count>` header".into(),
                });
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some("n"), Some(count), None) => match count.parse::<usize>() {
                    Ok(n) if n > 0 => break n,
                    _ => {
                        return Err(Error::Parse {
                            line: idx + 1,
                            message: format!("invalid node count `{count}`"),
                        })
                    }
                },
                _ => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: "expected `n <count>` header".into(),
                    })
                }
            }
        };

        let mut in_neighbors = vec![Vec::new(); n];
        let mut last_line = 1;
        for (idx, line) in lines {
            let line_no = idx + 1;
            last_line = line_no;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let mut parts = line.split_whitespace();
            let (src, dst) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => return Err(parse_err(format!("expected `src dst`, got `{line}`"))),
            };
            let src: usize = src
                .parse()
                .map_err(|_| parse_err(format!("invalid index `{src}`")))?;
            let dst: usize = dst
                .parse()
                .map_err(|_| parse_err(format!("invalid index `{dst}`")))?;
            if src >= n || dst >= n {
                return Err(parse_err(format!(
                    "edge {src} {dst} out of range for n = {n}"
                )));
            }
            let list: &mut Vec<usize> = &mut in_neighbors[dst];
            if list.contains(&src) {
                return Err(parse_err(format!("duplicate edge {src} {dst}")));
            }
            list.push(src);
        }
        for (i, list) in in_neighbors.iter().enumerate() {
            if !list.contains(&i) {
                return Err(Error::Parse {
                    line: last_line,
                    message: format!("node {i} has no self-loop `{i} {i}`"),
                });
            }
        }
        Graph::from_in_neighbors(in_neighbors)
    }

    pub fn save_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }

    pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Graph::from_edge_list(&text)
    }
}

/// Inverse-CDF sampler for the discrete power law `P(x) ∝ x^-exponent` on `{1, …, max}`.
struct PowerLaw {
    cdf: Vec<f64>,
}

impl PowerLaw {
    fn new(max: usize, exponent: f64) -> Self {
        let mut cdf = Vec::with_capacity(max);
        let mut acc = 0.0;
        for x in 1..=max {
            acc += (x as f64).powf(-exponent);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        PowerLaw { cdf }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c < u);
        idx.min(self.cdf.len() - 1) + 1
    }
}

/// Samples a configuration-model network.
///
/// Each node draws an in-degree (self-loop excluded) from a discrete power law
/// on `{1, …, n-1}`. The resulting in-stubs are shuffled and handed out
/// round-robin over a random node permutation, so out-degrees differ by at
/// most one before self-loops are added. Repeated `(j, i)` pairs collapse.
pub fn generate_configuration_model(n: usize, exponent: f64, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if !(exponent > 1.0) || !exponent.is_finite() {
        return Err(Error::invalid(format!(
            "power-law exponent must exceed 1, got {exponent}"
        )));
    }
    if n == 1 {
        return Graph::from_in_neighbors(vec![vec![0]]);
    }

    let mut rng = rng_from_seed(seed);
    let law = PowerLaw::new(n - 1, exponent);
    let mut stubs: Vec<usize> = Vec::new();
    for i in 0..n {
        let deg = law.sample(&mut rng);
        stubs.extend(std::iter::repeat_n(i, deg));
    }
    stubs.shuffle(&mut rng);
    let mut sources: Vec<usize> = (0..n).collect();
    sources.shuffle(&mut rng);

    let mut in_neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for (m, &target) in stubs.iter().enumerate() {
        in_neighbors[target].push(sources[m % n]);
    }
    for list in &mut in_neighbors {
        list.sort_unstable();
        list.dedup();
    }
    Graph::from_in_neighbors(in_neighbors)
}
