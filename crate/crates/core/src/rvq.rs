//! Residual coarse/fine vector quantization of latent patches.
//!
//! Assignment follows cosine geometry: a latent `z` goes to the coarse code
//! minimizing `|l2(z) - l2(e_c)|^2`, and the residual `l2(z) - l2(e_c)` goes to
//! the fine code minimizing `|l2(z) - l2(e_c) - l2(e_f)|^2`. Codebooks are fit
//! with spherical Lloyd iterations seeded by k-means++.
//!
//! Coarse code vectors are stored unit-length. Fine code vectors are stored as
//! `s * u`, where `u` is the unit assignment direction and `s >= 0` is the
//! least-squares scale of the residuals assigned to it, so that
//! `e_c + e_f` reconstructs `l2(z)`.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{patchify, DomainDataset, PatchGrid, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::par;
use crate::record::{self, Header};
use crate::rng::{self, streams, Rng};

/// Weight of the commitment terms in the reported code-loss diagnostic.
pub const COMMITMENT_BETA: f64 = 0.25;

/// Added to the patch standard deviation before dividing.
pub const ZNORM_STABILIZER: f64 = 1e-8;

pub const QUANTIZER_KIND: &str = "quantizer";

/// How patches are mapped into latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbedMode {
    /// Per-patch z-normalization; `d_dim = m`.
    Znorm,
    /// Patches used as-is; `d_dim = m`.
    Raw,
    /// z-normalization followed by a fixed seeded semi-orthogonal projection.
    Projected { d_dim: usize, seed: u64 },
}

impl Default for EmbedMode {
    fn default() -> Self {
        EmbedMode::Znorm
    }
}

impl EmbedMode {
    pub fn d_dim(&self, patch_length: usize) -> usize {
        match *self {
            EmbedMode::Znorm | EmbedMode::Raw => patch_length,
            EmbedMode::Projected { d_dim, .. } => d_dim,
        }
    }
}

/// Latent patches, shaped `(channels, n_patches, d_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub latents: Array3<f64>,
}

impl LatentGrid {
    pub fn new(latents: Array3<f64>) -> Result<Self> {
        if latents.dim().2 == 0 {
            return Err(Error::InvalidArgument("latent dimension must be positive".into()));
        }
        if latents.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latents must be finite".into()));
        }
        Ok(LatentGrid { latents })
    }

    pub fn d_dim(&self) -> usize {
        self.latents.dim().2
    }
}

/// z-normalizes one patch. Constant patches map to the zero vector.
pub fn znorm(patch: ArrayView1<f64>) -> Vec<f64> {
    let m = patch.len() as f64;
    let mean = patch.sum() / m;
    let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    let std = var.sqrt();
    let scale = patch.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    // Rounding in the mean leaves ~ulp-sized wiggle on constant patches.
    if std <= 8.0 * f64::EPSILON * scale {
        return vec![0.0; patch.len()];
    }
    patch
        .iter()
        .map(|v| (v - mean) / (std + ZNORM_STABILIZER))
        .collect()
}

/// Semi-orthogonal `d_dim x m` matrix: orthonormal rows when `d_dim <= m`,
/// orthonormal columns otherwise.
pub fn projection_matrix(d_dim: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, streams::PROJECTION);
    let mut a = Array2::from_shape_fn((d_dim, m), |_| StandardNormal.sample(&mut rng));
    let rows_short = d_dim <= m;
    let mut basis = if rows_short { a.clone() } else { a.t().to_owned() };
    // Modified Gram-Schmidt over the rows of `basis`.
    for i in 0..basis.nrows() {
        for j in 0..i {
            let proj: f64 = basis.row(i).dot(&basis.row(j));
            let bj = basis.row(j).to_owned();
            basis.row_mut(i).scaled_add(-proj, &bj);
        }
        let norm = basis.row(i).dot(&basis.row(i)).sqrt();
        basis.row_mut(i).mapv_inplace(|v| v / norm);
    }
    a = if rows_short { basis } else { basis.t().to_owned() };
    a
}

/// Maps a patch grid into latent space.
pub fn embed(grid: &PatchGrid, mode: EmbedMode) -> Result<LatentGrid> {
    let (d, n, m) = grid.patches.dim();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("patch length must be >= 2, got {m}")));
    }
    let projection = match mode {
        EmbedMode::Projected { d_dim, seed } => {
            if d_dim == 0 {
                return Err(Error::InvalidArgument("projected d_dim must be positive".into()));
            }
            Some(projection_matrix(d_dim, m, seed))
        }
        _ => None,
    };
    let d_dim = mode.d_dim(m);
    let mut out = Array3::zeros((d, n, d_dim));
    for c in 0..d {
        for t in 0..n {
            let patch = grid.patches.slice(ndarray::s![c, t, ..]);
            let latent: Vec<f64> = match (&mode, &projection) {
                (EmbedMode::Raw, _) => patch.to_vec(),
                (_, Some(p)) => p.dot(&ndarray::Array1::from(znorm(patch))).to_vec(),
                _ => znorm(patch),
            };
            for (k, v) in latent.into_iter().enumerate() {
                out[[c, t, k]] = v;
            }
        }
    }
    LatentGrid::new(out)
}

/// L2 normalization with `l2(0) = 0`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the row of `codes` nearest to `x`; ties go to the lowest index.
fn nearest(x: &[f64], codes: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, row) in codes.rows().into_iter().enumerate() {
        let d = sq_dist(x, row.as_slice().expect("standard layout"));
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Array2<f64>,
}

impl Codebook {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        let n = vectors.nrows();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("a codebook needs at least 2 codes, got {n}")));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("code vectors must be finite".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if vectors.row(i) == vectors.row(j) {
                    return Err(Error::InvalidArgument(format!("code vectors {j} and {i} are identical")));
                }
            }
        }
        Ok(Codebook { vectors: as_standard(vectors) })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Code vectors with every row L2-normalized.
    pub fn normalized(&self) -> Array2<f64> {
        let mut out = self.vectors.clone();
        for mut row in out.rows_mut() {
            let v = l2_normalize(row.as_slice().expect("standard layout"));
            row.assign(&ArrayView1::from(&v));
        }
        out
    }
}

fn as_standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualQuantizer {
    pub coarse: Codebook,
    pub fine: Codebook,
    pub embed: EmbedMode,
    pub patch_length: usize,
    pub seed: u64,
    coarse_unit: Array2<f64>,
    fine_unit: Array2<f64>,
}

impl ResidualQuantizer {
    pub fn new(
        coarse: Codebook,
        fine: Codebook,
        embed: EmbedMode,
        patch_length: usize,
        seed: u64,
    ) -> Result<Self> {
        if coarse.d_dim() != fine.d_dim() {
            return Err(Error::InvalidArgument(format!(
                "coarse d_dim {} differs from fine d_dim {}",
                coarse.d_dim(),
                fine.d_dim()
            )));
        }
        if embed.d_dim(patch_length) != coarse.d_dim() {
            return Err(Error::InvalidArgument(format!(
                "embedding produces d_dim {} but codebooks have {}",
                embed.d_dim(patch_length),
                coarse.d_dim()
            )));
        }
        let coarse_unit = coarse.normalized();
        let fine_unit = fine.normalized();
        Ok(ResidualQuantizer {
            coarse,
            fine,
            embed,
            patch_length,
            seed,
            coarse_unit,
            fine_unit,
        })
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse.len()
    }

    pub fn n_fine(&self) -> usize {
        self.fine.len()
    }

    pub fn d_dim(&self) -> usize {
        self.coarse.d_dim()
    }

    /// Assigns one latent vector to its `(coarse, fine)` pair.
    pub fn quantize(&self, z: &[f64]) -> (usize, usize) {
        let x = l2_normalize(z);
        let (c, _) = nearest(&x, &self.coarse_unit);
        let residual: Vec<f64> = x
            .iter()
            .zip(self.coarse_unit.row(c))
            .map(|(a, b)| a - b)
            .collect();
        let (f, _) = nearest(&residual, &self.fine_unit);
        (c, f)
    }
}

/// Per-patch code indices, each matrix shaped `(channels, n_patches)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    pub coarse: Array2<usize>,
    pub fine: Array2<usize>,
}

impl CodeGrid {
    pub fn n_channels(&self) -> usize {
        self.coarse.nrows()
    }

    pub fn n_patches(&self) -> usize {
        self.coarse.ncols()
    }

    /// Coarse state sequence of channel `d`.
    pub fn coarse_sequence(&self, d: usize) -> Vec<usize> {
        self.coarse.row(d).to_vec()
    }
}

pub fn encode(q: &ResidualQuantizer, latents: &LatentGrid) -> Result<CodeGrid> {
    if latents.d_dim() != q.d_dim() {
        return Err(Error::DimensionMismatch {
            id: "<latents>".into(),
            detail: format!("latent d_dim {} vs quantizer d_dim {}", latents.d_dim(), q.d_dim()),
        });
    }
    let (d, n, _) = latents.latents.dim();
    let mut coarse = Array2::zeros((d, n));
    let mut fine = Array2::zeros((d, n));
    for c in 0..d {
        for t in 0..n {
            let z = latents.latents.slice(ndarray::s![c, t, ..]).to_vec();
            let (ci, fi) = q.quantize(&z);
            coarse[[c, t]] = ci;
            fine[[c, t]] = fi;
        }
    }
    Ok(CodeGrid { coarse, fine })
}

/// Patchifies, embeds, and encodes one instance.
pub fn encode_instance(q: &ResidualQuantizer, instance: &TimeSeriesInstance) -> Result<(LatentGrid, CodeGrid)> {
    let grid = patchify(instance, q.patch_length)?;
    let latents = embed(&grid, q.embed)?;
    let codes = encode(q, &latents)?;
    Ok((latents, codes))
}

/// [`encode_instance`] over a whole dataset, in instance order.
pub fn encode_dataset(q: &ResidualQuantizer, dataset: &DomainDataset) -> Result<(Vec<LatentGrid>, Vec<CodeGrid>)> {
    let pairs = par::try_map_slice(&dataset.instances, |inst| encode_instance(q, inst))?;
    Ok(pairs.into_iter().unzip())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reconstruction {
    /// `e_c + e_f`.
    Full,
    /// `e_c` only.
    CoarseOnly,
    /// `e_f` only (the residual detail).
    FineOnly,
}

pub fn reconstruct(q: &ResidualQuantizer, codes: &CodeGrid, mode: Reconstruction) -> Result<LatentGrid> {
    let (d, n) = codes.coarse.dim();
    if codes.fine.dim() != (d, n) {
        return Err(Error::InvalidArgument("coarse and fine index grids differ in shape".into()));
    }
    let dim = q.d_dim();
    let mut out = Array3::zeros((d, n, dim));
    for c in 0..d {
        for t in 0..n {
            let (ci, fi) = (codes.coarse[[c, t]], codes.fine[[c, t]]);
            if ci >= q.n_coarse() {
                return Err(Error::IndexOutOfRange { index: ci, n_codes: q.n_coarse() });
            }
            if fi >= q.n_fine() {
                return Err(Error::IndexOutOfRange { index: fi, n_codes: q.n_fine() });
            }
            for k in 0..dim {
                let ec = q.coarse.vectors[[ci, k]];
                let ef = q.fine.vectors[[fi, k]];
                out[[c, t, k]] = match mode {
                    Reconstruction::Full => ec + ef,
                    Reconstruction::CoarseOnly => ec,
                    Reconstruction::FineOnly => ef,
                };
            }
        }
    }
    Ok(LatentGrid { latents: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub max_iters: usize,
    pub seed: u64,
}

/// Objective traces recorded while fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `sum |l2(z) - l2(e_c)|^2` after each coarse assignment pass.
    pub coarse_objective: Vec<f64>,
    /// `sum |r - l2(e_f)|^2` after each fine assignment pass.
    pub fine_objective: Vec<f64>,
    /// `(1 + beta) * (coarse + fine)` per fine pass, with the coarse book frozen.
    pub code_loss: Vec<f64>,
}

struct Lloyd {
    /// Unit-length centers, `k x dim`.
    centers: Array2<f64>,
    assign: Vec<usize>,
    history: Vec<f64>,
}

fn assign_all(points: &Array2<f64>, centers: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let rows: Vec<(usize, f64)> = par::map_range(points.nrows(), |i| {
        nearest(points.row(i).as_slice().expect("standard layout"), centers)
    });
    rows.into_iter().unzip()
}

/// k-means++ seeding over unit directions of the points.
fn seed_centers(points: &Array2<f64>, k: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    let (n, dim) = points.dim();
    let unit: Vec<Vec<f64>> = points
        .rows()
        .into_iter()
        .map(|r| l2_normalize(r.as_slice().expect("standard layout")))
        .collect();
    let candidates: Vec<usize> = (0..n).filter(|&i| unit[i].iter().any(|v| *v != 0.0)).collect();
    if candidates.is_empty() {
        return Err(Error::InsufficientData("every point has zero norm".into()));
    }
    let mut centers = Array2::zeros((k, dim));
    let first = candidates[rng.random_range(0..candidates.len())];
    centers.row_mut(0).assign(&ArrayView1::from(&unit[first]));
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i).as_slice().unwrap(), &unit[first]))
        .collect();
    for c in 1..k {
        let total: f64 = candidates.iter().map(|&i| best[i]).sum();
        if total <= 0.0 {
            return Err(Error::InsufficientData(format!(
                "only {c} distinct directions available for {k} codes"
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = *candidates.iter().rev().find(|&&i| best[i] > 0.0).expect("total > 0");
        for &i in &candidates {
            if best[i] <= 0.0 {
                continue;
            }
            if target < best[i] {
                pick = i;
                break;
            }
            target -= best[i];
        }
        centers.row_mut(c).assign(&ArrayView1::from(&unit[pick]));
        for i in 0..n {
            let d = sq_dist(points.row(i).as_slice().unwrap(), &unit[pick]);
            if d < best[i] {
                best[i] = d;
            }
        }
    }
    Ok(centers)
}

/// Spherical Lloyd iterations: minimizes `sum |x_i - u_{a(i)}|^2` over unit
/// centers `u`. Empty (or zero-sum) clusters are re-seeded at the point with
/// the largest current error.
fn spherical_lloyd(points: &Array2<f64>, k: usize, max_iters: usize, rng: &mut Rng) -> Result<Lloyd> {
    let (n, dim) = points.dim();
    let mut centers = seed_centers(points, k, rng)?;
    let mut history = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    let mut converged = false;
    let mut assign = Vec::new();
    for _ in 0..max_iters {
        let (a, errs) = assign_all(points, &centers);
        history.push(errs.iter().sum());
        if prev.as_ref() == Some(&a) {
            assign = a;
            converged = true;
            break;
        }
        // Update, accumulating in point order.
        let mut sums = Array2::<f64>::zeros((k, dim));
        for (i, &c) in a.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &points.row(i));
        }
        let mut errs = errs;
        for c in 0..k {
            let s = l2_normalize(sums.row(c).as_slice().unwrap());
            if s.iter().any(|v| *v != 0.0) {
                centers.row_mut(c).assign(&ArrayView1::from(&s));
                continue;
            }
            // Re-seed from the worst-fit point that has a direction.
            let far = (0..n)
                .filter(|&i| points.row(i).iter().any(|v| *v != 0.0))
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(j) if errs[j] >= errs[i] => Some(j),
                    _ => Some(i),
                });
            if let Some(i) = far {
                let u = l2_normalize(points.row(i).as_slice().unwrap());
                centers.row_mut(c).assign(&ArrayView1::from(&u));
                errs[i] = 0.0;
            }
        }
        assign = a.clone();
        prev = Some(a);
    }
    if !converged {
        let (a, errs) = assign_all(points, &centers);
        history.push(errs.iter().sum());
        assign = a;
    }
    Ok(Lloyd { centers, assign, history })
}

fn pool_rows(latents: &[LatentGrid]) -> Result<Array2<f64>> {
    let dim = latents
        .first()
        .ok_or_else(|| Error::InsufficientData("no latent grids to fit".into()))?
        .d_dim();
    let mut flat = Vec::new();
    for g in latents {
        if g.d_dim() != dim {
            return Err(Error::InvalidArgument("latent grids disagree on d_dim".into()));
        }
        for v in g.latents.lanes(Axis(2)) {
            flat.extend(l2_normalize(&v.to_vec()));
        }
    }
    let n = flat.len() / dim;
    Ok(Array2::from_shape_vec((n, dim), flat).expect("pooled shape"))
}

/// Fits coarse then fine codebooks on the pooled latents.
pub fn fit(
    latents: &[LatentGrid],
    cfg: &FitConfig,
    embed: EmbedMode,
    patch_length: usize,
) -> Result<(ResidualQuantizer, FitReport)> {
    if cfg.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if cfg.n_coarse < 2 || cfg.n_fine < 2 {
        return Err(Error::InvalidArgument("codebooks need at least 2 codes each".into()));
    }
    let points = pool_rows(latents)?;
    let n = points.nrows();
    if cfg.n_coarse >= n {
        return Err(Error::InsufficientData(format!(
            "{n} pooled patches cannot support {} coarse codes",
            cfg.n_coarse
        )));
    }
    if cfg.n_fine > n {
        return Err(Error::InsufficientData(format!(
            "{n} residuals cannot support {} fine codes",
            cfg.n_fine
        )));
    }
    if cfg.n_coarse >= cfg.n_fine {
        log::warn!(
            "n_coarse = {} is not smaller than n_fine = {}",
            cfg.n_coarse,
            cfg.n_fine
        );
    }

    let mut rng_c = rng::stream(cfg.seed, streams::KMEANS_COARSE);
    let coarse = spherical_lloyd(&points, cfg.n_coarse, cfg.max_iters, &mut rng_c)?;

    let mut residuals = points.clone();
    for (i, &c) in coarse.assign.iter().enumerate() {
        residuals.row_mut(i).scaled_add(-1.0, &coarse.centers.row(c));
    }
    let mut rng_f = rng::stream(cfg.seed, streams::KMEANS_FINE);
    let fine = spherical_lloyd(&residuals, cfg.n_fine, cfg.max_iters, &mut rng_f)?;

    // Least-squares scale of each fine direction over its members.
    let mut dot_sum = vec![0.0; cfg.n_fine];
    let mut count = vec![0usize; cfg.n_fine];
    for (i, &f) in fine.assign.iter().enumerate() {
        dot_sum[f] += residuals.row(i).dot(&fine.centers.row(f));
        count[f] += 1;
    }
    let mut fine_vectors = fine.centers.clone();
    for f in 0..cfg.n_fine {
        // Unused codes keep unit length.
        let scale = if count[f] > 0 { (dot_sum[f] / count[f] as f64).max(0.0) } else { 1.0 };
        fine_vectors.row_mut(f).mapv_inplace(|v| v * scale);
    }

    let coarse_final = *coarse.history.last().expect("at least one pass");
    let code_loss = fine
        .history
        .iter()
        .map(|f| (1.0 + COMMITMENT_BETA) * (coarse_final + f))
        .collect();
    let report = FitReport {
        coarse_objective: coarse.history,
        fine_objective: fine.history,
        code_loss,
    };
    let q = ResidualQuantizer::new(
        Codebook::new(coarse.centers)?,
        Codebook::new(fine_vectors)?,
        embed,
        patch_length,
        cfg.seed,
    )?;
    Ok((q, report))
}

/// Code usage and reconstruction quality over a collection of grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeUsage {
    pub coarse_counts: Vec<usize>,
    pub fine_counts: Vec<usize>,
    pub coarse_dead_pct: f64,
    pub fine_dead_pct: f64,
    /// Mean squared error of `e_c + e_f` against `l2(z)`, per element.
    pub recon_mse: f64,
    /// Mean squared error of `e_c` alone against `l2(z)`, per element.
    pub coarse_only_mse: f64,
}

pub fn code_stats(q: &ResidualQuantizer, latents: &[LatentGrid], codes: &[CodeGrid]) -> Result<CodeUsage> {
    if codes.is_empty() {
        return Err(Error::InsufficientData("no code grids".into()));
    }
    if latents.len() != codes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} latent grids but {} code grids",
            latents.len(),
            codes.len()
        )));
    }
    let mut coarse_counts = vec![0usize; q.n_coarse()];
    let mut fine_counts = vec![0usize; q.n_fine()];
    let (mut full_se, mut coarse_se, mut elems) = (0.0, 0.0, 0usize);
    for (lat, cg) in latents.iter().zip(codes) {
        for &c in cg.coarse.iter() {
            *coarse_counts
                .get_mut(c)
                .ok_or(Error::IndexOutOfRange { index: c, n_codes: q.n_coarse() })? += 1;
        }
        for &f in cg.fine.iter() {
            *fine_counts
                .get_mut(f)
                .ok_or(Error::IndexOutOfRange { index: f, n_codes: q.n_fine() })? += 1;
        }
        let full = reconstruct(q, cg, Reconstruction::Full)?;
        let coarse = reconstruct(q, cg, Reconstruction::CoarseOnly)?;
        for (lane, (fl, cl)) in lat
            .latents
            .lanes(Axis(2))
            .into_iter()
            .zip(full.latents.lanes(Axis(2)).into_iter().zip(coarse.latents.lanes(Axis(2))))
        {
            let x = l2_normalize(&lane.to_vec());
            full_se += sq_dist(&x, &fl.to_vec());
            coarse_se += sq_dist(&x, &cl.to_vec());
            elems += x.len();
        }
    }
    let dead = |counts: &[usize]| {
        100.0 * counts.iter().filter(|&&c| c == 0).count() as f64 / counts.len() as f64
    };
    Ok(CodeUsage {
        coarse_dead_pct: dead(&coarse_counts),
        fine_dead_pct: dead(&fine_counts),
        coarse_counts,
        fine_counts,
        recon_mse: full_se / elems as f64,
        coarse_only_mse: coarse_se / elems as f64,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantizerRecord {
    version: u32,
    d_dim: usize,
    n_c: usize,
    n_f: usize,
    patch_length: usize,
    coarse: Vec<Vec<f64>>,
    fine: Vec<Vec<f64>>,
    embed: EmbedMode,
    seed: u64,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<Array2<f64>> {
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Incompatible(format!("{what} vectors do not all have d_dim {dim}")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), dim), flat).map_err(|e| Error::Incompatible(e.to_string()))
}

pub fn save_quantizer(path: &Path, q: &ResidualQuantizer, config: &Value) -> Result<()> {
    let rec = QuantizerRecord {
        version: record::VERSION,
        d_dim: q.d_dim(),
        n_c: q.n_coarse(),
        n_f: q.n_fine(),
        patch_length: q.patch_length,
        coarse: rows(&q.coarse.vectors),
        fine: rows(&q.fine.vectors),
        embed: q.embed,
        seed: q.seed,
    };
    let header = Header::new(QUANTIZER_KIND, Value::Null, config.clone());
    record::write_envelope(path, &header, &[rec])
}

pub fn load_quantizer(path: &Path) -> Result<ResidualQuantizer> {
    let env = record::read_envelope(path, QUANTIZER_KIND)?;
    let mut recs: Vec<QuantizerRecord> = env.records()?;
    if recs.len() != 1 {
        return Err(Error::Incompatible(format!("expected one quantizer record, found {}", recs.len())));
    }
    let rec = recs.remove(0);
    if rec.version != record::VERSION {
        return Err(Error::Incompatible(format!("quantizer version {}", rec.version)));
    }
    let coarse = from_rows(&rec.coarse, rec.d_dim, "coarse")?;
    let fine = from_rows(&rec.fine, rec.d_dim, "fine")?;
    if coarse.nrows() != rec.n_c || fine.nrows() != rec.n_f {
        return Err(Error::Incompatible("codebook sizes disagree with n_c / n_f".into()));
    }
    ResidualQuantizer::new(Codebook::new(coarse)?, Codebook::new(fine)?, rec.embed, rec.patch_length, rec.seed)
}
