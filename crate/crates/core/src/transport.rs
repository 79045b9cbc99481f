//! Exact optimal transport between transition rows and the channel alignment
//! weights derived from it.
//!
//! The solver is a transportation simplex: a north-west-corner basis, dual
//! potentials from the basis tree, and stepping-stone pivots along the unique
//! cycle closed by the entering cell. Bland's rule (lowest row-major index for
//! both the entering and the leaving cell) rules out cycling on degenerate
//! bases, so zero-valued basic cells are kept explicitly instead of perturbing
//! the marginals.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::markov::ChannelTm;
use crate::par;
use crate::rvq::Codebook;

pub const DEFAULT_SIGMA: f64 = 0.2;

/// Tolerance on simplex marginal sums.
pub const MARGINAL_TOL: f64 = 1e-9;

const REDUCED_COST_TOL: f64 = 1e-12;
const MAX_PIVOTS: usize = 100_000;

/// Cosine distances between coarse codes: symmetric, zero diagonal, entries in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub costs: Array2<f64>,
}

impl CostMatrix {
    pub fn new(costs: Array2<f64>) -> Result<Self> {
        let (r, c) = costs.dim();
        if r != c {
            return Err(Error::InvalidArgument(format!("cost matrix must be square, got {r}x{c}")));
        }
        if costs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("costs must be finite and non-negative".into()));
        }
        Ok(CostMatrix { costs })
    }

    pub fn len(&self) -> usize {
        self.costs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn cosine_cost(coarse: &Codebook) -> Result<CostMatrix> {
    let e = &coarse.vectors;
    let n = e.nrows();
    let norms: Vec<f64> = e.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNormCode(i));
    }
    let mut costs = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            let cos = e.row(i).dot(&e.row(j)) / (norms[i] * norms[j]);
            let c = (1.0 - cos).clamp(0.0, 2.0);
            costs[[i, j]] = c;
            costs[[j, i]] = c;
        }
    }
    Ok(CostMatrix { costs })
}

/// An optimal plan together with the dual potentials certifying it.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// `<plan, costs>`.
    pub cost: f64,
    /// Row potentials `u`; `costs[i][j] - u[i] - v[j] >= 0` everywhere at optimum.
    pub row_potential: Vec<f64>,
    /// Column potentials `v`.
    pub col_potential: Vec<f64>,
}

fn check_simplex(v: &[f64], name: &str) -> Result<f64> {
    if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Marginal(format!("{name} has an invalid entry {x}")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > MARGINAL_TOL {
        return Err(Error::Marginal(format!("{name} sums to {s}, expected 1")));
    }
    Ok(s)
}

/// Exact earth mover's distance between simplex vectors `p` (rows) and `q` (columns).
pub fn solve_emd(p: &[f64], q: &[f64], m: &CostMatrix) -> Result<TransportPlan> {
    if p.len() != m.len() || q.len() != m.len() {
        return Err(Error::InvalidArgument(format!(
            "marginals of length {} and {} for a {}x{} cost matrix",
            p.len(),
            q.len(),
            m.len(),
            m.len()
        )));
    }
    let sp = check_simplex(p, "source marginal")?;
    let sq = check_simplex(q, "target marginal")?;
    // Match total masses exactly before building the basis.
    let q: Vec<f64> = q.iter().map(|v| v * (sp / sq)).collect();
    Simplex::new(p, &q, &m.costs).solve()
}

struct Simplex<'a> {
    costs: &'a Array2<f64>,
    x: Array2<f64>,
    basic: Array2<bool>,
    rows: usize,
    cols: usize,
}

impl<'a> Simplex<'a> {
    /// North-west-corner start; always yields `rows + cols - 1` basic cells
    /// forming a spanning tree, some possibly at zero.
    fn new(p: &[f64], q: &[f64], costs: &'a Array2<f64>) -> Self {
        let (rows, cols) = (p.len(), q.len());
        let mut x = Array2::zeros((rows, cols));
        let mut basic = Array2::from_elem((rows, cols), false);
        let (mut a, mut b) = (p.to_vec(), q.to_vec());
        let (mut i, mut j) = (0, 0);
        loop {
            let v = a[i].min(b[j]);
            x[[i, j]] = v;
            basic[[i, j]] = true;
            let row_done = a[i] <= b[j];
            a[i] -= v;
            b[j] -= v;
            if i == rows - 1 && j == cols - 1 {
                break;
            }
            if i == rows - 1 {
                j += 1;
            } else if j == cols - 1 || row_done {
                i += 1;
            } else {
                j += 1;
            }
        }
        Simplex { costs, x, basic, rows, cols }
    }

    /// Solves `u[i] + v[j] = c[i][j]` over the basis tree with `u[0] = 0`.
    fn potentials(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (r, c) = (self.rows, self.cols);
        let mut u = vec![f64::NAN; r];
        let mut v = vec![f64::NAN; c];
        u[0] = 0.0;
        // Nodes: rows are 0..r, columns r..r+c.
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            if node < r {
                let i = node;
                for j in 0..c {
                    if self.basic[[i, j]] && v[j].is_nan() {
                        v[j] = self.costs[[i, j]] - u[i];
                        stack.push(r + j);
                    }
                }
            } else {
                let j = node - r;
                for i in 0..r {
                    if self.basic[[i, j]] && u[i].is_nan() {
                        u[i] = self.costs[[i, j]] - v[j];
                        stack.push(i);
                    }
                }
            }
        }
        if u.iter().chain(&v).any(|x| x.is_nan()) {
            return Err(Error::Internal("transport basis is not a spanning tree".into()));
        }
        Ok((u, v))
    }

    /// Cells of the tree path from row `i` to column `j`, in order from row `i`.
    fn tree_path(&self, i: usize, j: usize) -> Result<Vec<(usize, usize)>> {
        let (r, c) = (self.rows, self.cols);
        let mut parent: Vec<Option<usize>> = vec![None; r + c];
        let mut seen = vec![false; r + c];
        let mut queue = std::collections::VecDeque::from([i]);
        seen[i] = true;
        while let Some(node) = queue.pop_front() {
            if node == r + j {
                break;
            }
            let neighbours: Vec<usize> = if node < r {
                (0..c).filter(|&jj| self.basic[[node, jj]]).map(|jj| r + jj).collect()
            } else {
                (0..r).filter(|&ii| self.basic[[ii, node - r]]).collect()
            };
            for nb in neighbours {
                if !seen[nb] {
                    seen[nb] = true;
                    parent[nb] = Some(node);
                    queue.push_back(nb);
                }
            }
        }
        if !seen[r + j] {
            return Err(Error::Internal("no tree path closes the pivot cycle".into()));
        }
        let mut cells = Vec::new();
        let mut node = r + j;
        while let Some(prev) = parent[node] {
            let cell = if prev < r { (prev, node - r) } else { (node, prev - r) };
            cells.push(cell);
            node = prev;
        }
        cells.reverse();
        Ok(cells)
    }

    fn solve(mut self) -> Result<TransportPlan> {
        for _ in 0..MAX_PIVOTS {
            let (u, v) = self.potentials()?;
            let entering = (0..self.rows)
                .flat_map(|i| (0..self.cols).map(move |j| (i, j)))
                .find(|&(i, j)| {
                    !self.basic[[i, j]] && self.costs[[i, j]] - u[i] - v[j] < -REDUCED_COST_TOL
                });
            let Some((ei, ej)) = entering else {
                let cost = (&self.x * self.costs).sum();
                return Ok(TransportPlan {
                    plan: self.x,
                    cost,
                    row_potential: u,
                    col_potential: v,
                });
            };
            // Cycle: entering (+), then the path walked back from column ej,
            // alternating (-), (+), ..., ending (-) next to row ei.
            let path = self.tree_path(ei, ej)?;
            let minus: Vec<(usize, usize)> = path.iter().rev().step_by(2).copied().collect();
            let plus: Vec<(usize, usize)> = path.iter().rev().skip(1).step_by(2).copied().collect();
            let theta = minus
                .iter()
                .map(|&(a, b)| self.x[[a, b]])
                .fold(f64::INFINITY, f64::min);
            let leaving = minus
                .iter()
                .filter(|&&(a, b)| self.x[[a, b]] == theta)
                .min_by_key(|&&(a, b)| a * self.cols + b)
                .copied()
                .expect("cycle has a minus cell");
            for &(a, b) in &minus {
                self.x[[a, b]] -= theta;
            }
            for &(a, b) in &plus {
                self.x[[a, b]] += theta;
            }
            self.x[[ei, ej]] += theta;
            self.x[[leaving.0, leaving.1]] = 0.0;
            self.basic[[leaving.0, leaving.1]] = false;
            self.basic[[ei, ej]] = true;
        }
        Err(Error::Internal(format!("transport simplex exceeded {MAX_PIVOTS} pivots")))
    }
}

/// RBF transform of a mean transport cost. Floored at the smallest normal
/// float so a tiny bandwidth cannot underflow a weight to zero.
pub fn rbf_weight(mean_cost: f64, sigma: f64) -> f64 {
    (-(mean_cost * mean_cost) / (sigma * sigma)).exp().max(f64::MIN_POSITIVE)
}

/// Per-channel alignment weights and the mean transport costs behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub w: Vec<f64>,
    pub sigma: f64,
    pub mean_costs: Vec<f64>,
}

impl ChannelWeights {
    /// All-ones weights (channel alignment disabled).
    pub fn uniform(n_channels: usize, sigma: f64) -> Self {
        ChannelWeights {
            w: vec![1.0; n_channels],
            sigma,
            mean_costs: vec![0.0; n_channels],
        }
    }

    /// Standing of each channel: the number of channels with a strictly smaller
    /// weight. The least trusted channel has standing 0.
    pub fn standings(&self) -> Vec<usize> {
        self.w
            .iter()
            .map(|wd| self.w.iter().filter(|&&o| o < *wd).count())
            .collect()
    }

    /// Tab-separated report: config comment line, then one row per channel.
    pub fn report(&self, config: &Value) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# config: {config}");
        let _ = writeln!(out, "# sigma: {}", self.sigma);
        out.push_str("channel\tmean_cost\tweight\tstanding\n");
        for (d, ((c, w), s)) in self.mean_costs.iter().zip(&self.w).zip(self.standings()).enumerate() {
            let _ = writeln!(out, "{d}\t{c}\t{w}\t{s}");
        }
        out
    }

    pub fn write_report(&self, path: &Path, config: &Value) -> Result<()> {
        std::fs::write(path, self.report(config)).map_err(|e| Error::io(path, e))
    }
}

/// For every channel, solves one transport problem per source row against the
/// matching target row, averages the costs, and maps the mean through the RBF
/// kernel. Both models should already be smoothed.
pub fn channel_weights(src: &ChannelTm, trg: &ChannelTm, m: &CostMatrix, sigma: f64) -> Result<ChannelWeights> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if src.n_channels() != trg.n_channels() {
        return Err(Error::DimensionMismatch {
            id: "<channel model>".into(),
            detail: format!("source has {} channels, target {}", src.n_channels(), trg.n_channels()),
        });
    }
    let n_c = src.n_codes();
    if trg.n_codes() != n_c || m.len() != n_c {
        return Err(Error::DimensionMismatch {
            id: "<channel model>".into(),
            detail: format!("code counts differ: source {n_c}, target {}, costs {}", trg.n_codes(), m.len()),
        });
    }
    let d = src.n_channels();
    let costs = par::map_range(d * n_c, |idx| {
        let (ch, i) = (idx / n_c, idx % n_c);
        solve_emd(&src.tms[ch].row(i), &trg.tms[ch].row(i), m).map(|p| p.cost)
    });
    let costs = costs.into_iter().collect::<Result<Vec<f64>>>()?;
    let mean_costs: Vec<f64> = costs
        .chunks(n_c)
        .map(|row| row.iter().sum::<f64>() / n_c as f64)
        .collect();
    Ok(ChannelWeights {
        w: mean_costs.iter().map(|&c| rbf_weight(c, sigma)).collect(),
        sigma,
        mean_costs,
    })
}
