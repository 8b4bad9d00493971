//! Offline expert construction: balanced k-means over FFN hidden units and
//! exact re-slicing of the FFN weights into experts.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Activation;
use crate::dynrouter::MoeLayer;
use crate::error::{invalid, Result};
use crate::model::{add_bias_rows, DenseFfn, FfnLayer, NextScaleModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub num_experts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            max_iters: 50,
            seed: 0,
        }
    }
}

/// Expert grid `(E, expert size)` used by sweeps on a 256-wide FFN.
pub const EXPERT_GRID: [(usize, usize); 4] = [(32, 8), (16, 16), (8, 32), (2, 128)];

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Cluster of every row.
    pub assignment: Vec<usize>,
    /// Sum of squared distances to centroids after each accepted iteration.
    pub objective: Vec<f64>,
    pub sizes: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids(rows: &Tensor, assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = rows.cols();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (r, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(rows.row(r)) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

fn objective(rows: &Tensor, assignment: &[usize], cents: &[Vec<f64>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| sq_dist(rows.row(r), &cents[c]))
        .sum()
}

fn kmeans_pp(rows: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|r| sq_dist(rows.row(r), rows.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (r, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = r;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (r, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(rows.row(r), rows.row(next)));
        }
    }
    chosen.into_iter().map(|r| rows.row(r).to_vec()).collect()
}

/// Capacity-constrained greedy assignment: rows with the largest gap
/// between their best and second-best centroid choose first.
fn balanced_assign(rows: &Tensor, cents: &[Vec<f64>], cap: usize) -> Vec<usize> {
    let n = rows.rows();
    let k = cents.len();
    let dists: Vec<Vec<f64>> = (0..n)
        .map(|r| cents.iter().map(|c| sq_dist(rows.row(r), c)).collect())
        .collect();
    let margin = |r: usize| -> f64 {
        if k < 2 {
            return 0.0;
        }
        let mut s = dists[r].clone();
        s.sort_by(f64::total_cmp);
        s[1] - s[0]
    };
    let mut order: Vec<(usize, f64)> = (0..n).map(|r| (r, margin(r))).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut fill = vec![0usize; k];
    let mut assignment = vec![0usize; n];
    for (r, _) in order {
        let mut prefs: Vec<usize> = (0..k).collect();
        prefs.sort_by(|&a, &b| dists[r][a].total_cmp(&dists[r][b]).then(a.cmp(&b)));
        let c = prefs.into_iter().find(|&c| fill[c] < cap).expect("total capacity equals row count");
        fill[c] += 1;
        assignment[r] = c;
    }
    assignment
}

/// Pairwise exchange between clusters of equal size. A swap is taken when
/// it lowers the exact objective (centroids move with their members), so
/// sizes never change and the objective strictly decreases. Returns whether
/// anything moved.
fn swap_refine(rows: &Tensor, assignment: &mut [usize], k: usize, max_passes: usize) -> bool {
    let n = rows.rows();
    let dim = rows.cols();
    let sizes = cluster_sizes(assignment, k);
    let mut sums = vec![vec![0.0; dim]; k];
    for (r, &c) in assignment.iter().enumerate() {
        for (s, v) in sums[c].iter_mut().zip(rows.row(r)) {
            *s += v;
        }
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    // Σ_c −|S_c|²/m_c is the only part of the objective a swap changes.
    let term = |s: &[f64], m: usize| -sq(s) / m as f64;
    let mut moved = false;
    for _ in 0..max_passes {
        let mut improved = false;
        for a in 0..n {
            for b in a + 1..n {
                let (ca, cb) = (assignment[a], assignment[b]);
                if ca == cb {
                    continue;
                }
                let (xa, xb) = (rows.row(a), rows.row(b));
                let new_a: Vec<f64> = sums[ca].iter().zip(xa).zip(xb).map(|((s, p), q)| s - p + q).collect();
                let new_b: Vec<f64> = sums[cb].iter().zip(xa).zip(xb).map(|((s, p), q)| s + p - q).collect();
                let before = term(&sums[ca], sizes[ca]) + term(&sums[cb], sizes[cb]);
                let after = term(&new_a, sizes[ca]) + term(&new_b, sizes[cb]);
                if after < before - 1e-12 * before.abs().max(1.0) {
                    sums[ca] = new_a;
                    sums[cb] = new_b;
                    assignment.swap(a, b);
                    improved = true;
                    moved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    moved
}

/// Balanced k-means over the rows of `rows`: every cluster receives exactly
/// `rows / E` members. A new assignment is only accepted when it lowers the
/// objective under the current centroids, so the recorded objective
/// sequence never increases. Lloyd iterations are followed by pairwise
/// swap refinement.
pub fn balanced_kmeans(rows: &Tensor, config: &ClusterConfig) -> Result<Clustering> {
    let n = rows.rows();
    let k = config.num_experts;
    if rows.rank() != 2 || n == 0 {
        return Err(invalid("balanced_kmeans needs a non-empty matrix"));
    }
    if k == 0 || n % k != 0 {
        return Err(invalid(format!("{k} clusters do not evenly divide {n} rows")));
    }
    let cap = n / k;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut assignment = if k == 1 {
        vec![0; n]
    } else {
        balanced_assign(rows, &kmeans_pp(rows, k, &mut rng), cap)
    };
    let mut cents = centroids(rows, &assignment, k);
    let mut history = vec![objective(rows, &assignment, &cents)];
    for _ in 0..config.max_iters {
        if k == 1 {
            break;
        }
        let candidate = balanced_assign(rows, &cents, cap);
        if candidate == assignment
            || objective(rows, &candidate, &cents) >= objective(rows, &assignment, &cents)
        {
            break;
        }
        assignment = candidate;
        cents = centroids(rows, &assignment, k);
        history.push(objective(rows, &assignment, &cents));
    }
    if k > 1 && swap_refine(rows, &mut assignment, k, config.max_iters) {
        cents = centroids(rows, &assignment, k);
        let refined = objective(rows, &assignment, &cents);
        if refined < *history.last().expect("initial objective recorded") {
            history.push(refined);
        }
    }
    Ok(Clustering {
        sizes: cluster_sizes(&assignment, k),
        assignment,
        objective: history,
    })
}

pub fn cluster_sizes(assignment: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &c in assignment {
        if c < k {
            sizes[c] += 1;
        }
    }
    sizes
}

/// One slice of an FFN: hidden units `units` with their input rows, biases
/// and output columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub units: Vec<usize>,
    /// `size × d_model`.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `d_model × size`.
    pub w2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSet {
    pub experts: Vec<Expert>,
    pub b2: Tensor,
    pub assignment: Vec<usize>,
    pub activation: Activation,
}

impl ExpertSet {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_size(&self) -> usize {
        self.experts[0].units.len()
    }

    pub fn d_ff(&self) -> usize {
        self.assignment.len()
    }

    pub fn d_model(&self) -> usize {
        self.b2.len()
    }

    /// `E_i(x) = W₂ⁱ σ(W₁ⁱ x + b₁ⁱ)` for each row of `x`; no `b₂`.
    pub fn expert_forward(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        self.expert_forward_masked(i, x, None)
    }

    /// As [`expert_forward`](Self::expert_forward), with hidden units whose
    /// original index is false in `keep` forced to zero.
    pub fn expert_forward_masked(&self, i: usize, x: &Tensor, keep: Option<&[bool]>) -> Result<Tensor> {
        let e = self
            .experts
            .get(i)
            .ok_or_else(|| invalid(format!("expert {i} of {}", self.experts.len())))?;
        let mut h = x.matmul_t(&e.w1)?;
        let b = e.b1.data();
        let s = b.len();
        for (j, v) in h.data_mut().iter_mut().enumerate() {
            let u = j % s;
            *v = if keep.is_some_and(|k| !k[e.units[u]]) {
                0.0
            } else {
                self.activation.apply(*v + b[u])
            };
        }
        h.matmul_t(&e.w2)
    }

    /// `Σ_i E_i(x) + b₂` over all experts.
    pub fn forward_all(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[x.rows(), self.d_model()]);
        for i in 0..self.num_experts() {
            let y = self.expert_forward(i, x)?;
            for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
                *o += v;
            }
        }
        add_bias_rows(&mut out, &self.b2);
        Ok(out)
    }

    /// Hidden units executed for a selection mask, honouring `keep`.
    pub fn selected_units(&self, selected: &[bool], keep: Option<&[bool]>) -> usize {
        self.experts
            .iter()
            .zip(selected)
            .filter(|(_, &s)| s)
            .map(|(e, _)| match keep {
                Some(k) => e.units.iter().filter(|&&u| k[u]).count(),
                None => e.units.len(),
            })
            .sum()
    }

    /// Reassembles the original dense weights by the assignment table.
    pub fn reassemble(&self) -> DenseFfn {
        let d = self.d_model();
        let d_ff = self.d_ff();
        let mut w1 = Tensor::zeros(&[d_ff, d]);
        let mut b1 = Tensor::zeros(&[d_ff]);
        let mut w2 = Tensor::zeros(&[d, d_ff]);
        for e in &self.experts {
            for (j, &u) in e.units.iter().enumerate() {
                w1.row_mut(u).copy_from_slice(e.w1.row(j));
                b1.data_mut()[u] = e.b1.data()[j];
                for r in 0..d {
                    w2.data_mut()[r * d_ff + u] = e.w2.data()[r * e.units.len() + j];
                }
            }
        }
        DenseFfn {
            w1,
            b1,
            w2,
            b2: self.b2.clone(),
        }
    }
}

/// Slices `ffn` into experts following a balanced assignment; each expert's
/// units are kept in ascending original order.
pub fn split_ffn(ffn: &DenseFfn, activation: Activation, assignment: &[usize], num_experts: usize) -> Result<ExpertSet> {
    let d_ff = ffn.d_ff();
    if assignment.len() != d_ff {
        return Err(invalid(format!("assignment covers {} of {d_ff} units", assignment.len())));
    }
    if num_experts == 0 || d_ff % num_experts != 0 {
        return Err(invalid(format!("{num_experts} experts do not divide d_ff {d_ff}")));
    }
    let sizes = cluster_sizes(assignment, num_experts);
    if assignment.iter().any(|&c| c >= num_experts) || sizes.iter().any(|&s| s != d_ff / num_experts) {
        return Err(invalid(format!("unbalanced assignment, cluster sizes {sizes:?}")));
    }
    let d = ffn.b2.len();
    let experts = (0..num_experts)
        .map(|i| {
            let units: Vec<usize> = (0..d_ff).filter(|&u| assignment[u] == i).collect();
            let s = units.len();
            let w1 = ffn.w1.gather_rows(&units);
            let b1 = Tensor::vector(units.iter().map(|&u| ffn.b1.data()[u]).collect());
            let mut w2 = vec![0.0; d * s];
            for r in 0..d {
                for (j, &u) in units.iter().enumerate() {
                    w2[r * s + j] = ffn.w2.data()[r * d_ff + u];
                }
            }
            Ok(Expert {
                w1,
                b1,
                w2: Tensor::new(vec![d, s], w2)?,
                units,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertSet {
        experts,
        b2: ffn.b2.clone(),
        assignment: assignment.to_vec(),
        activation,
    })
}

/// Converts every dense FFN of `model` into `config.num_experts` experts,
/// clustering on the rows of W₁.
pub fn moefy_model(model: &NextScaleModel, config: &ClusterConfig) -> Result<(NextScaleModel, Vec<Clustering>)> {
    let mut out = model.clone();
    let mut clusterings = Vec::with_capacity(model.blocks.len());
    for (l, block) in out.blocks.iter_mut().enumerate() {
        let dense = block
            .ffn
            .as_dense()
            .ok_or_else(|| invalid(format!("block {l} is already a MoE layer")))?
            .clone();
        let layer_cfg = ClusterConfig {
            seed: config.seed.wrapping_add(l as u64),
            ..config.clone()
        };
        let clustering = balanced_kmeans(&dense.w1, &layer_cfg)?;
        let experts = split_ffn(&dense, model.config.activation, &clustering.assignment, config.num_experts)?;
        block.ffn = FfnLayer::Moe(MoeLayer { experts, router: None });
        clusterings.push(clustering);
    }
    Ok((out, clusterings))
}

/// CSV with one row per (layer, iteration) objective value and one row per
/// (layer, expert) size.
pub fn write_cluster_csv<W: Write>(w: W, clusterings: &[Clustering]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["layer", "kind", "index", "value"])?;
    for (l, c) in clusterings.iter().enumerate() {
        for (i, o) in c.objective.iter().enumerate() {
            csv.write_record([l.to_string(), "objective".into(), i.to_string(), format!("{o:.12e}")])?;
        }
        for (i, s) in c.sizes.iter().enumerate() {
            csv.write_record([l.to_string(), "size".into(), i.to_string(), s.to_string()])?;
        }
    }
    csv.flush()?;
    Ok(())
}
