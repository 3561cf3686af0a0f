//! Multichannel NMF: the generative covariance model, its log-determinant
//! cost, the offline majorization-minimization updates, and the online
//! mini-batch updates with a forgetting factor.
//!
//! The model for each time-frequency bin is
//!
//!   Y_ft = sum_k v_kf h_kt sum_n z_nk G_nf,
//!
//! fit to the rank-1 observed covariances X_ft = x_ft x_ft^H by minimizing
//! the log-determinant divergence. Multiplicative square-root updates handle
//! the nonnegative factors; the spatial templates follow the analytic
//! geometric-mean solution of their Riccati equation. Y is recomputed after
//! each factor family so every rule majorizes the current model.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::hermitian::{dense, riccati_solve, HermitianMatrix};
use crate::ilrma;
use crate::scalar::{Scalar, C};
use crate::spatial;
use crate::stft::Spectrogram;

/// Numerical floor for the nonnegative factors.
pub const FACTOR_FLOOR: f64 = 1e-12;
/// Relative eigenvalue floor used when flooring rank-deficient observed
/// covariances in the full divergence.
const X_LOGDET_FLOOR_REL: f64 = 1e-10;

/// Salt separating the demixing-initialization RNG stream from the factor
/// stream, so batch segmentation cannot shift factor draws.
pub(crate) const ILRMA_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
pub(crate) const FACTOR_SEED_SALT: u64 = 0x5851_F42D_4C95_7F2D;

/// Full parameter state of the factorization model.
#[derive(Debug, Clone)]
pub struct MnmfParams<T: Scalar> {
    /// Basis spectra, K x F.
    pub v: Array2<T>,
    /// Activations, K x T (grows per batch in streaming use).
    pub h: Array2<T>,
    /// Partitioning weights, N x K.
    pub z: Array2<T>,
    /// Spatial covariance templates, indexed [source][frequency].
    pub g: Vec<Vec<HermitianMatrix<T>>>,
}

impl<T: Scalar> MnmfParams<T> {
    pub fn new(
        v: Array2<T>,
        h: Array2<T>,
        z: Array2<T>,
        g: Vec<Vec<HermitianMatrix<T>>>,
    ) -> Result<Self> {
        let k = v.nrows();
        let n = z.nrows();
        let f = v.ncols();
        if h.nrows() != k || z.ncols() != k {
            return Err(Error::dim_mismatch(
                format!("H with {k} rows and Z with {k} columns"),
                format!("H {}x{}, Z {}x{}", h.nrows(), h.ncols(), z.nrows(), z.ncols()),
            ));
        }
        if g.len() != n || g.iter().any(|row| row.len() != f) {
            return Err(Error::dim_mismatch(
                format!("{n} x {f} spatial templates"),
                format!("{} rows", g.len()),
            ));
        }
        if v.iter().chain(h.iter()).chain(z.iter()).any(|x| *x < T::zero() || !x.is_finite()) {
            return Err(Error::InvalidInput(
                "factors must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { v, h, z, g })
    }

    pub fn num_bases(&self) -> usize {
        self.v.nrows()
    }

    pub fn num_sources(&self) -> usize {
        self.z.nrows()
    }

    pub fn num_freqs(&self) -> usize {
        self.v.ncols()
    }

    pub fn num_frames(&self) -> usize {
        self.h.ncols()
    }

    pub fn num_channels(&self) -> usize {
        self.g[0][0].dim()
    }

    /// Modelled power of source n at bin (f, t): sum_k z_nk v_kf h_kt.
    pub fn source_power(&self, n: usize, f: usize, t: usize) -> T {
        let mut acc = T::zero();
        for k in 0..self.num_bases() {
            acc += self.z[[n, k]] * self.v[[k, f]] * self.h[[k, t]];
        }
        acc
    }
}

/// Materialized model covariances Y_ft, indexed (f, t).
#[derive(Debug, Clone)]
pub struct ModelField<T: Scalar> {
    y: Vec<HermitianMatrix<T>>,
    num_freqs: usize,
    num_frames: usize,
}

impl<T: Scalar> ModelField<T> {
    pub fn num_freqs(&self) -> usize {
        self.num_freqs
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn y(&self, f: usize, t: usize) -> &HermitianMatrix<T> {
        &self.y[f * self.num_frames + t]
    }
}

/// Y_ft for every bin, from the current parameters.
pub fn compute_model<T: Scalar>(p: &MnmfParams<T>) -> ModelField<T> {
    let (num_freqs, num_frames, n, m) = (
        p.num_freqs(),
        p.num_frames(),
        p.num_sources(),
        p.num_channels(),
    );
    let mut y = Vec::with_capacity(num_freqs * num_frames);
    for f in 0..num_freqs {
        for t in 0..num_frames {
            let mut acc = HermitianMatrix::zeros(m);
            for src in 0..n {
                acc.add_scaled_assign(&p.g[src][f], p.source_power(src, f, t));
            }
            y.push(acc);
        }
    }
    ModelField {
        y,
        num_freqs,
        num_frames,
    }
}

/// Full log-determinant divergence sum_ft [tr(X Y^{-1}) - log det(X Y^{-1}) - M]
/// with X = x x^H. The rank-deficient log det X is evaluated with floored
/// eigenvalues, a constant in the parameters; a bin with no energy makes the
/// divergence infinite and is reported as a numerical failure.
pub fn cost_logdet<T: Scalar>(x: &Spectrogram<T>, model: &ModelField<T>) -> Result<T> {
    let m = x.num_channels();
    if model.num_freqs != x.num_freqs() || model.num_frames != x.num_frames() {
        return Err(Error::dim_mismatch(
            format!("model field {}x{}", x.num_freqs(), x.num_frames()),
            format!("{}x{}", model.num_freqs, model.num_frames),
        ));
    }
    let mut total = T::zero();
    for f in 0..x.num_freqs() {
        for t in 0..x.num_frames() {
            let xv = x.bin(f, t);
            let y = model.y(f, t);
            let norm_sq: T = xv.iter().map(|v| v.norm_sqr()).sum();
            if norm_sq <= T::zero() {
                return Err(Error::NumericalFailure {
                    stage: "cost_logdet",
                    freq: f,
                    frame: t,
                    detail: "observed covariance has no energy; divergence is infinite".into(),
                });
            }
            // log det X with zero eigenvalues floored relative to ||x||^2.
            let floor = T::of(X_LOGDET_FLOOR_REL) * norm_sq;
            let logdet_x = norm_sq.ln() + T::of_usize(m - 1) * floor.ln();

            let u = y.solve_pd(xv, "model covariance in cost")?;
            let tr_xyinv: T = xv.iter().zip(u.iter()).map(|(a, b)| (a.conj() * b).re).sum();
            let eig = crate::hermitian::hermitian_eig(y);
            let mut logdet_y = T::zero();
            for &l in &eig.eigenvalues {
                if l <= T::zero() {
                    return Err(Error::NumericalFailure {
                        stage: "cost_logdet",
                        freq: f,
                        frame: t,
                        detail: format!("model covariance eigenvalue {l} is not positive"),
                    });
                }
                logdet_y += l.ln();
            }
            let bin = tr_xyinv - (logdet_x - logdet_y) - T::of_usize(m);
            if !bin.is_finite() {
                return Err(Error::NumericalFailure {
                    stage: "cost_logdet",
                    freq: f,
                    frame: t,
                    detail: "non-finite divergence".into(),
                });
            }
            total += bin;
        }
    }
    Ok(total)
}

/// Configuration of a model fit.
#[derive(Debug, Clone)]
pub struct MnmfConfig {
    /// K, number of shared basis spectra.
    pub num_bases: usize,
    /// N, number of sources (source 0 is the target).
    pub num_sources: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Basis count per source for the demixing initializer.
    pub ilrma_bases: usize,
    pub ilrma_iterations: usize,
}

impl MnmfConfig {
    pub fn new(num_bases: usize, num_sources: usize, iterations: usize, seed: u64) -> Self {
        Self {
            num_bases,
            num_sources,
            iterations,
            seed,
            ilrma_bases: 2,
            ilrma_iterations: 50,
        }
    }
}

/// Per-iteration diagnostics of a fit.
#[derive(Debug, Clone)]
pub struct FitTrace<T: Scalar> {
    /// Parameter-dependent part of the divergence, sum_ft [tr(X Y^{-1}) +
    /// log det Y]; entry 0 is the cost at initialization, entry i the cost
    /// after iteration i. Equals `cost_logdet` up to a data constant.
    pub cost: Vec<T>,
    /// Largest relative Riccati residual of the spatial updates in each
    /// iteration.
    pub riccati_residual: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct MnmfFit<T: Scalar> {
    pub params: MnmfParams<T>,
    pub trace: FitTrace<T>,
}

/// Initializes parameters for `x`: demixing-based spatial templates with the
/// empirical-covariance anchor for source 0, and seeded uniform factors.
pub fn init_params<T: Scalar>(x: &Spectrogram<T>, cfg: &MnmfConfig) -> Result<MnmfParams<T>> {
    if cfg.num_sources != x.num_channels() {
        return Err(Error::Config(format!(
            "initialization requires N = M (determined demixing); got N={}, M={}",
            cfg.num_sources,
            x.num_channels()
        )));
    }
    let ilrma_res = ilrma::ilrma_run(
        x,
        cfg.ilrma_bases,
        cfg.ilrma_iterations,
        cfg.seed ^ ILRMA_SEED_SALT,
    )?;
    let g = spatial::init_spatial(x, &ilrma_res.demixing, spatial::EpsilonPolicy::default())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ FACTOR_SEED_SALT);
    let v = uniform_factor::<T>(cfg.num_bases, x.num_freqs(), &mut rng);
    let z = uniform_factor::<T>(cfg.num_sources, cfg.num_bases, &mut rng);
    let mut h = Array2::zeros((cfg.num_bases, x.num_frames()));
    fill_activation_columns(&mut h, 0..x.num_frames(), &mut rng);
    MnmfParams::new(v, h, z, g)
}

/// Uniform draws in [0.1, 1), filled row-major.
pub(crate) fn uniform_factor<T: Scalar>(
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<T> {
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            out[[r, c]] = T::of(0.1 + 0.9 * rng.gen::<f64>());
        }
    }
    out
}

/// Fills activation columns in frame order so a streaming consumer draws the
/// same values as an offline run over the same frames.
pub(crate) fn fill_activation_columns<T: Scalar>(
    h: &mut Array2<T>,
    frames: Range<usize>,
    rng: &mut ChaCha8Rng,
) {
    for t in frames {
        for k in 0..h.nrows() {
            h[[k, t]] = T::of(0.1 + 0.9 * rng.gen::<f64>());
        }
    }
}

/// Offline fit: initialization followed by full sweeps of
/// {update V, update H, update Z, update G}.
pub fn offline_fit<T: Scalar>(x: &Spectrogram<T>, cfg: &MnmfConfig) -> Result<MnmfFit<T>> {
    let params = init_params(x, cfg)?;
    fit_iterations(x, params, cfg.iterations)
}

/// Runs `iterations` full update sweeps from the given parameters.
pub fn fit_iterations<T: Scalar>(
    x: &Spectrogram<T>,
    mut params: MnmfParams<T>,
    iterations: usize,
) -> Result<MnmfFit<T>> {
    let all = 0..x.num_frames();
    let mut cost = Vec::with_capacity(iterations + 1);
    let mut riccati = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let stats = bin_stats(x, &params, all.clone())?;
        cost.push(stats.cost);
        apply_v_update(&mut params, &stats, all.clone(), None);

        let stats = bin_stats(x, &params, all.clone())?;
        apply_h_update(&mut params, &stats, all.clone());

        let stats = bin_stats(x, &params, all.clone())?;
        apply_z_update(&mut params, &stats, all.clone(), None);

        let residual = apply_g_update(&mut params, x, all.clone(), None)?;
        riccati.push(residual);
    }
    let stats = bin_stats(x, &params, all)?;
    cost.push(stats.cost);
    Ok(MnmfFit {
        params,
        trace: FitTrace {
            cost,
            riccati_residual: riccati,
        },
    })
}

/// One sweep of the three multiplicative factor updates (V, then H, then Z),
/// recomputing the model statistics before each family.
pub fn update_nmf_factors<T: Scalar>(p: &mut MnmfParams<T>, x: &Spectrogram<T>) -> Result<()> {
    let all = 0..x.num_frames();
    let stats = bin_stats(x, p, all.clone())?;
    apply_v_update(p, &stats, all.clone(), None);
    let stats = bin_stats(x, p, all.clone())?;
    apply_h_update(p, &stats, all.clone());
    let stats = bin_stats(x, p, all.clone())?;
    apply_z_update(p, &stats, all, None);
    Ok(())
}

/// Geometric-mean update of every spatial template; returns the largest
/// relative Riccati residual.
pub fn update_spatial<T: Scalar>(p: &mut MnmfParams<T>, x: &Spectrogram<T>) -> Result<T> {
    let all = 0..x.num_frames();
    apply_g_update(p, x, all, None)
}

/// Parameter-dependent part of the divergence for the given frame range.
pub fn trend_cost<T: Scalar>(
    x: &Spectrogram<T>,
    p: &MnmfParams<T>,
    frames: Range<usize>,
) -> Result<T> {
    Ok(bin_stats(x, p, frames)?.cost)
}

// ---------------------------------------------------------------------------
// Online mini-batch updates
// ---------------------------------------------------------------------------

/// Exponentially weighted sufficient statistics carried across mini-batches.
/// Each accumulator S holds x^(j) + rho x^(j-1) + rho^2 x^(j-2) + ...; the
/// parameter-weighted forms store the products (a x a) at fold time.
#[derive(Debug, Clone)]
pub struct OnlineStats<T: Scalar> {
    /// Accumulated v^2-weighted numerator statistics, K x F.
    pub vav: Array2<T>,
    /// Accumulated denominator statistics for V, K x F.
    pub beta: Array2<T>,
    /// Accumulated z^2-weighted numerator statistics, N x K.
    pub zgz: Array2<T>,
    /// Accumulated denominator statistics for Z, N x K.
    pub delta: Array2<T>,
    /// Accumulated Psi matrices, [source][frequency].
    pub psi: Vec<Vec<HermitianMatrix<T>>>,
    /// Accumulated G Phi G matrices, [source][frequency].
    pub gphig: Vec<Vec<HermitianMatrix<T>>>,
    /// Forgetting weight in [0, 1]; 0 keeps only the current batch.
    pub rho: T,
    /// Number of batches folded so far.
    pub batches: usize,
}

impl<T: Scalar> OnlineStats<T> {
    pub fn zeros(num_bases: usize, num_sources: usize, num_freqs: usize, m: usize, rho: T) -> Self {
        Self {
            vav: Array2::zeros((num_bases, num_freqs)),
            beta: Array2::zeros((num_bases, num_freqs)),
            zgz: Array2::zeros((num_sources, num_bases)),
            delta: Array2::zeros((num_sources, num_bases)),
            psi: vec![vec![HermitianMatrix::zeros(m); num_freqs]; num_sources],
            gphig: vec![vec![HermitianMatrix::zeros(m); num_freqs]; num_sources],
            rho,
            batches: 0,
        }
    }
}

/// Diagnostics of one mini-batch update.
#[derive(Debug, Clone)]
pub struct OnlineBatchTrace<T: Scalar> {
    /// Batch-restricted trend cost before each inner iteration.
    pub cost: Vec<T>,
    pub riccati_residual: Vec<T>,
}

/// Processes one mini-batch: `inner_iterations` sweeps of the online rules
/// (V and Z combine the batch statistics with the weighted history; H uses
/// the offline rule restricted to the batch; G solves the combined Riccati
/// equation), then folds the batch statistics into the accumulators.
pub fn online_update<T: Scalar>(
    stats: &mut OnlineStats<T>,
    params: &mut MnmfParams<T>,
    x: &Spectrogram<T>,
    frames: Range<usize>,
    inner_iterations: usize,
) -> Result<OnlineBatchTrace<T>> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("empty mini-batch".into()));
    }
    if frames.end > params.num_frames() || frames.end > x.num_frames() {
        return Err(Error::dim_mismatch(
            format!("activations covering frame {}", frames.end),
            format!("{} activation frames", params.num_frames()),
        ));
    }
    // With no folded batches yet, or rho = 0, there is no usable history and
    // the rules reduce exactly to their batch-only forms.
    let prior = if stats.batches > 0 && stats.rho > T::zero() {
        Some(stats.rho)
    } else {
        None
    };
    let mut trace = OnlineBatchTrace {
        cost: Vec::with_capacity(inner_iterations),
        riccati_residual: Vec::with_capacity(inner_iterations),
    };
    for _ in 0..inner_iterations {
        let bs = bin_stats(x, params, frames.clone())?;
        trace.cost.push(bs.cost);
        apply_v_update(params, &bs, frames.clone(), prior.map(|rho| (&stats.vav, &stats.beta, rho)));

        let bs = bin_stats(x, params, frames.clone())?;
        apply_h_update(params, &bs, frames.clone());

        let bs = bin_stats(x, params, frames.clone())?;
        apply_z_update(params, &bs, frames.clone(), prior.map(|rho| (&stats.zgz, &stats.delta, rho)));

        let residual = apply_g_update(
            params,
            x,
            frames.clone(),
            prior.map(|rho| (stats.psi.as_slice(), stats.gphig.as_slice(), rho)),
        )?;
        trace.riccati_residual.push(residual);
    }
    fold_batch(stats, params, x, frames)?;
    Ok(trace)
}

/// Folds the batch statistics, computed at the final parameters, into the
/// exponentially weighted accumulators. Folding happens exactly once per
/// batch so no frame is double-counted.
fn fold_batch<T: Scalar>(
    stats: &mut OnlineStats<T>,
    params: &MnmfParams<T>,
    x: &Spectrogram<T>,
    frames: Range<usize>,
) -> Result<()> {
    let rho = stats.rho;
    let bs = bin_stats(x, params, frames.clone())?;
    let alpha = reduce_kf(params, &bs.b, frames.clone());
    let beta = reduce_kf(params, &bs.c, frames.clone());
    let gamma = reduce_nk(params, &bs.b, frames.clone());
    let delta = reduce_nk(params, &bs.c, frames.clone());
    let (phi, psi) = spatial_stats(params, x, frames)?;

    let (k, f) = (params.num_bases(), params.num_freqs());
    for ki in 0..k {
        for fi in 0..f {
            let v2 = params.v[[ki, fi]] * params.v[[ki, fi]];
            stats.vav[[ki, fi]] = v2 * alpha[[ki, fi]] + rho * stats.vav[[ki, fi]];
            stats.beta[[ki, fi]] = beta[[ki, fi]] + rho * stats.beta[[ki, fi]];
        }
    }
    let n = params.num_sources();
    for ni in 0..n {
        for ki in 0..k {
            let z2 = params.z[[ni, ki]] * params.z[[ni, ki]];
            stats.zgz[[ni, ki]] = z2 * gamma[[ni, ki]] + rho * stats.zgz[[ni, ki]];
            stats.delta[[ni, ki]] = delta[[ni, ki]] + rho * stats.delta[[ni, ki]];
        }
    }
    for ni in 0..n {
        for fi in 0..f {
            let g = &params.g[ni][fi];
            let gphig = HermitianMatrix::symmetrize_from(
                g.entries().dot(phi[ni][fi].entries()).dot(g.entries()),
            );
            let mut new_psi = stats.psi[ni][fi].scaled(rho);
            new_psi.add_scaled_assign(&psi[ni][fi], T::one());
            stats.psi[ni][fi] = new_psi;
            let mut new_gphig = stats.gphig[ni][fi].scaled(rho);
            new_gphig.add_scaled_assign(&gphig, T::one());
            stats.gphig[ni][fi] = new_gphig;
        }
    }
    stats.batches += 1;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared per-bin statistics engine
// ---------------------------------------------------------------------------

/// Per-bin traces against the current model:
///   b[n, f, ti] = Re tr(Y^{-1} X Y^{-1} G_nf) = u^H G_nf u,  u = Y^{-1} x,
///   c[n, f, ti] = Re tr(Y^{-1} G_nf),
/// plus the trend cost sum_ft [tr(X Y^{-1}) + log det Y] over the range.
/// `ti` indexes frames relative to the range start.
struct BinStats<T: Scalar> {
    b: Array3<T>,
    c: Array3<T>,
    cost: T,
}

struct BinWorkspace<T: Scalar> {
    m: usize,
    y: Vec<C<T>>,
    chol: Vec<C<T>>,
    yinv: Vec<C<T>>,
    u: Vec<C<T>>,
    col: Vec<C<T>>,
}

impl<T: Scalar> BinWorkspace<T> {
    fn new(m: usize) -> Self {
        let zero = C::new(T::zero(), T::zero());
        Self {
            m,
            y: vec![zero; m * m],
            chol: vec![zero; m * m],
            yinv: vec![zero; m * m],
            u: vec![zero; m],
            col: vec![zero; m],
        }
    }

    /// Assembles Y = sum_n lambda_n G_nf and factorizes it. A failed
    /// factorization is retried once with relative diagonal loading.
    fn factor(
        &mut self,
        g_f: &[&HermitianMatrix<T>],
        lambda: &[T],
        f: usize,
        t: usize,
        stage: &'static str,
    ) -> Result<()> {
        let m = self.m;
        self.y.iter_mut().for_each(|v| *v = C::new(T::zero(), T::zero()));
        for (g, &l) in g_f.iter().zip(lambda.iter()) {
            let e = g.entries();
            for i in 0..m {
                for j in 0..m {
                    self.y[i * m + j] += e[[i, j]] * l;
                }
            }
        }
        self.chol.copy_from_slice(&self.y);
        if dense::chol_in_place(&mut self.chol, m).is_ok() {
            return Ok(());
        }
        let mut trace = T::zero();
        for i in 0..m {
            trace += self.y[i * m + i].re;
        }
        let jitter = T::of(1e-10) * trace.abs() / T::of_usize(m);
        self.chol.copy_from_slice(&self.y);
        for i in 0..m {
            self.chol[i * m + i] += C::new(jitter, T::zero());
        }
        dense::chol_in_place(&mut self.chol, m).map_err(|_| Error::NumericalFailure {
            stage,
            freq: f,
            frame: t,
            detail: "model covariance is not positive definite".into(),
        })
    }

    fn solve_u(&mut self, x: ndarray::ArrayView1<C<T>>) {
        for i in 0..self.m {
            self.u[i] = x[i];
        }
        dense::chol_solve_in_place(&self.chol, self.m, &mut self.u);
    }

    fn invert(&mut self) {
        dense::chol_invert(&self.chol, self.m, &mut self.yinv, &mut self.col);
    }

    fn log_det(&self) -> T {
        dense::chol_log_det(&self.chol, self.m)
    }
}

/// Per-frequency lambda values for the frames in `frames`: lambda[n][ti].
fn lambda_at_freq<T: Scalar>(p: &MnmfParams<T>, f: usize, frames: Range<usize>) -> Array2<T> {
    let n = p.num_sources();
    let k = p.num_bases();
    let len = frames.len();
    // Weight n,k at this frequency: z_nk v_kf.
    let mut w = Array2::zeros((n, k));
    for ni in 0..n {
        for ki in 0..k {
            w[[ni, ki]] = p.z[[ni, ki]] * p.v[[ki, f]];
        }
    }
    let mut lambda = Array2::zeros((n, len));
    for (ti, t) in frames.enumerate() {
        for ni in 0..n {
            let mut acc = T::zero();
            for ki in 0..k {
                acc += w[[ni, ki]] * p.h[[ki, t]];
            }
            lambda[[ni, ti]] = acc;
        }
    }
    lambda
}

fn bin_stats<T: Scalar>(
    x: &Spectrogram<T>,
    p: &MnmfParams<T>,
    frames: Range<usize>,
) -> Result<BinStats<T>> {
    let (num_freqs, n, m) = (x.num_freqs(), p.num_sources(), x.num_channels());
    let len = frames.len();

    let per_f: Vec<(Array2<T>, Array2<T>, T)> = (0..num_freqs)
        .into_par_iter()
        .map(|f| -> Result<(Array2<T>, Array2<T>, T)> {
            let mut ws = BinWorkspace::new(m);
            let g_f: Vec<&HermitianMatrix<T>> = (0..n).map(|ni| &p.g[ni][f]).collect();
            let lambda = lambda_at_freq(p, f, frames.clone());
            let mut b_f = Array2::zeros((n, len));
            let mut c_f = Array2::zeros((n, len));
            let mut cost = T::zero();
            let mut lam = vec![T::zero(); n];
            for (ti, t) in frames.clone().enumerate() {
                for ni in 0..n {
                    lam[ni] = lambda[[ni, ti]];
                }
                ws.factor(&g_f, &lam, f, t, "model statistics")?;
                let xv = x.bin(f, t);
                ws.solve_u(xv);
                ws.invert();
                let tr_xyinv: T = xv
                    .iter()
                    .zip(ws.u.iter())
                    .map(|(a, b)| (a.conj() * *b).re)
                    .sum();
                cost += tr_xyinv + ws.log_det();
                for ni in 0..n {
                    let e = g_f[ni].entries();
                    let mut bq = T::zero();
                    let mut cq = T::zero();
                    for i in 0..m {
                        for j in 0..m {
                            let gij = e[[i, j]];
                            bq += (ws.u[i].conj() * gij * ws.u[j]).re;
                            cq += (ws.yinv[j * m + i] * gij).re;
                        }
                    }
                    b_f[[ni, ti]] = bq;
                    c_f[[ni, ti]] = cq;
                }
            }
            Ok((b_f, c_f, cost))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut b = Array3::zeros((n, num_freqs, len));
    let mut c = Array3::zeros((n, num_freqs, len));
    let mut cost = T::zero();
    for (f, (b_f, c_f, cost_f)) in per_f.into_iter().enumerate() {
        for ni in 0..n {
            for ti in 0..len {
                b[[ni, f, ti]] = b_f[[ni, ti]];
                c[[ni, f, ti]] = c_f[[ni, ti]];
            }
        }
        cost += cost_f;
    }
    Ok(BinStats { b, c, cost })
}

/// sum_n z_nk sum_t h_kt stat[n, f, ti], per (k, f).
fn reduce_kf<T: Scalar>(p: &MnmfParams<T>, stat: &Array3<T>, frames: Range<usize>) -> Array2<T> {
    let (n, num_freqs, _) = stat.dim();
    let k = p.num_bases();
    let mut out = Array2::zeros((k, num_freqs));
    for f in 0..num_freqs {
        for ki in 0..k {
            let mut acc = T::zero();
            for (ti, t) in frames.clone().enumerate() {
                let mut s = T::zero();
                for ni in 0..n {
                    s += p.z[[ni, ki]] * stat[[ni, f, ti]];
                }
                acc += p.h[[ki, t]] * s;
            }
            out[[ki, f]] = acc;
        }
    }
    out
}

/// sum_n z_nk sum_f v_kf stat[n, f, ti], per (k, ti).
fn reduce_kt<T: Scalar>(p: &MnmfParams<T>, stat: &Array3<T>) -> Array2<T> {
    let (n, num_freqs, len) = stat.dim();
    let k = p.num_bases();
    let mut out = Array2::zeros((k, len));
    for ti in 0..len {
        for ki in 0..k {
            let mut acc = T::zero();
            for f in 0..num_freqs {
                let mut s = T::zero();
                for ni in 0..n {
                    s += p.z[[ni, ki]] * stat[[ni, f, ti]];
                }
                acc += p.v[[ki, f]] * s;
            }
            out[[ki, ti]] = acc;
        }
    }
    out
}

/// sum_f v_kf sum_t h_kt stat[n, f, ti], per (n, k).
fn reduce_nk<T: Scalar>(p: &MnmfParams<T>, stat: &Array3<T>, frames: Range<usize>) -> Array2<T> {
    let (n, num_freqs, _) = stat.dim();
    let k = p.num_bases();
    let mut out = Array2::zeros((n, k));
    for f in 0..num_freqs {
        for ki in 0..k {
            let mut per_f = vec![T::zero(); n];
            for (ti, t) in frames.clone().enumerate() {
                let hkt = p.h[[ki, t]];
                for ni in 0..n {
                    per_f[ni] += hkt * stat[[ni, f, ti]];
                }
            }
            let vkf = p.v[[ki, f]];
            for ni in 0..n {
                out[[ni, ki]] += vkf * per_f[ni];
            }
        }
    }
    out
}

/// Multiplicative square-root update with the zero-denominator floor rule:
/// an entry with a vanishing denominator is left unchanged.
fn sqrt_update<T: Scalar>(old: T, num: T, den: T) -> T {
    if den > T::zero() && num >= T::zero() {
        let next = old * (num / den).sqrt();
        if next.is_finite() {
            return next.max(T::of(FACTOR_FLOOR));
        }
    }
    old.max(T::of(FACTOR_FLOOR))
}

/// Online form: new value = sqrt(combined numerator / combined denominator).
fn sqrt_update_combined<T: Scalar>(old: T, num: T, den: T) -> T {
    if den > T::zero() && num >= T::zero() {
        let next = (num / den).sqrt();
        if next.is_finite() {
            return next.max(T::of(FACTOR_FLOOR));
        }
    }
    old.max(T::of(FACTOR_FLOOR))
}

type PriorPair<'a, T> = (&'a Array2<T>, &'a Array2<T>, T);

fn apply_v_update<T: Scalar>(
    p: &mut MnmfParams<T>,
    stats: &BinStats<T>,
    frames: Range<usize>,
    prior: Option<PriorPair<'_, T>>,
) {
    let num = reduce_kf(p, &stats.b, frames.clone());
    let den = reduce_kf(p, &stats.c, frames);
    for ki in 0..p.num_bases() {
        for f in 0..p.num_freqs() {
            let old = p.v[[ki, f]];
            p.v[[ki, f]] = match prior {
                None => sqrt_update(old, num[[ki, f]], den[[ki, f]]),
                Some((vav, beta, rho)) => {
                    let cn = old * old * num[[ki, f]] + rho * vav[[ki, f]];
                    let cd = den[[ki, f]] + rho * beta[[ki, f]];
                    sqrt_update_combined(old, cn, cd)
                }
            };
        }
    }
}

fn apply_h_update<T: Scalar>(p: &mut MnmfParams<T>, stats: &BinStats<T>, frames: Range<usize>) {
    let num = reduce_kt(p, &stats.b);
    let den = reduce_kt(p, &stats.c);
    for ki in 0..p.num_bases() {
        for (ti, t) in frames.clone().enumerate() {
            let old = p.h[[ki, t]];
            p.h[[ki, t]] = sqrt_update(old, num[[ki, ti]], den[[ki, ti]]);
        }
    }
}

fn apply_z_update<T: Scalar>(
    p: &mut MnmfParams<T>,
    stats: &BinStats<T>,
    frames: Range<usize>,
    prior: Option<PriorPair<'_, T>>,
) {
    let num = reduce_nk(p, &stats.b, frames.clone());
    let den = reduce_nk(p, &stats.c, frames);
    for ni in 0..p.num_sources() {
        for ki in 0..p.num_bases() {
            let old = p.z[[ni, ki]];
            p.z[[ni, ki]] = match prior {
                None => sqrt_update(old, num[[ni, ki]], den[[ni, ki]]),
                Some((zgz, delta, rho)) => {
                    let cn = old * old * num[[ni, ki]] + rho * zgz[[ni, ki]];
                    let cd = den[[ni, ki]] + rho * delta[[ni, ki]];
                    sqrt_update_combined(old, cn, cd)
                }
            };
        }
    }
}

/// Phi and Psi accumulations per (source, frequency) over the frame range.
#[allow(clippy::type_complexity)]
fn spatial_stats<T: Scalar>(
    p: &MnmfParams<T>,
    x: &Spectrogram<T>,
    frames: Range<usize>,
) -> Result<(Vec<Vec<HermitianMatrix<T>>>, Vec<Vec<HermitianMatrix<T>>>)> {
    let (num_freqs, n, m) = (x.num_freqs(), p.num_sources(), x.num_channels());

    let per_f: Vec<(Vec<HermitianMatrix<T>>, Vec<HermitianMatrix<T>>)> = (0..num_freqs)
        .into_par_iter()
        .map(|f| -> Result<(Vec<HermitianMatrix<T>>, Vec<HermitianMatrix<T>>)> {
            let mut ws = BinWorkspace::new(m);
            let g_f: Vec<&HermitianMatrix<T>> = (0..n).map(|ni| &p.g[ni][f]).collect();
            let lambda = lambda_at_freq(p, f, frames.clone());
            let mut phi_acc = vec![Array2::<C<T>>::zeros((m, m)); n];
            let mut psi_acc = vec![Array2::<C<T>>::zeros((m, m)); n];
            let mut lam = vec![T::zero(); n];
            for (ti, t) in frames.clone().enumerate() {
                for ni in 0..n {
                    lam[ni] = lambda[[ni, ti]];
                }
                ws.factor(&g_f, &lam, f, t, "spatial statistics")?;
                let xv = x.bin(f, t);
                ws.solve_u(xv);
                ws.invert();
                for ni in 0..n {
                    let w = lam[ni];
                    for i in 0..m {
                        for j in 0..m {
                            // Phi += lambda (u u^H); Psi += lambda Y^{-1}.
                            phi_acc[ni][[i, j]] += ws.u[i] * ws.u[j].conj() * w;
                            psi_acc[ni][[i, j]] += ws.yinv[i * m + j] * w;
                        }
                    }
                }
            }
            Ok((
                phi_acc.into_iter().map(HermitianMatrix::symmetrize_from).collect(),
                psi_acc.into_iter().map(HermitianMatrix::symmetrize_from).collect(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut phi = vec![Vec::with_capacity(num_freqs); n];
    let mut psi = vec![Vec::with_capacity(num_freqs); n];
    for (phi_f, psi_f) in per_f {
        for (ni, (ph, ps)) in phi_f.into_iter().zip(psi_f).enumerate() {
            phi[ni].push(ph);
            psi[ni].push(ps);
        }
    }
    Ok((phi, psi))
}

type MatrixPrior<'a, T> = (
    &'a [Vec<HermitianMatrix<T>>],
    &'a [Vec<HermitianMatrix<T>>],
    T,
);

/// Updates every G_nf by solving G Psi_c G = K_c, where the batch statistics
/// are optionally combined with weighted history (K_c = G Phi G + rho S_gpg,
/// Psi_c = Psi + rho S_psi). Returns the largest relative residual
/// ||G_new Psi_c G_new - K_c|| / ||K_c||.
fn apply_g_update<T: Scalar>(
    p: &mut MnmfParams<T>,
    x: &Spectrogram<T>,
    frames: Range<usize>,
    prior: Option<MatrixPrior<'_, T>>,
) -> Result<T> {
    let (phi, psi) = spatial_stats(p, x, frames)?;
    let n = p.num_sources();
    let num_freqs = p.num_freqs();

    let updated: Vec<Vec<(HermitianMatrix<T>, T)>> = (0..num_freqs)
        .into_par_iter()
        .map(|f| -> Result<Vec<(HermitianMatrix<T>, T)>> {
            let mut row = Vec::with_capacity(n);
            for ni in 0..n {
                let g = &p.g[ni][f];
                let mut k_mat = HermitianMatrix::symmetrize_from(
                    g.entries().dot(phi[ni][f].entries()).dot(g.entries()),
                );
                let mut psi_c = psi[ni][f].clone();
                if let Some((psi_prior, gphig_prior, rho)) = prior {
                    k_mat.add_scaled_assign(&gphig_prior[ni][f], rho);
                    psi_c.add_scaled_assign(&psi_prior[ni][f], rho);
                }
                let g_new = riccati_solve(&k_mat, &psi_c)?;
                // Residual of the defining equation.
                let lhs = g_new
                    .entries()
                    .dot(psi_c.entries())
                    .dot(g_new.entries());
                let mut err = T::zero();
                let mut nrm = T::zero();
                for i in 0..g_new.dim() {
                    for j in 0..g_new.dim() {
                        err += (lhs[[i, j]] - k_mat.get(i, j)).norm_sqr();
                        nrm += k_mat.get(i, j).norm_sqr();
                    }
                }
                let residual = if nrm > T::zero() {
                    (err / nrm).sqrt()
                } else {
                    T::zero()
                };
                row.push((g_new, residual));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut max_residual = T::zero();
    for (f, row) in updated.into_iter().enumerate() {
        for (ni, (g_new, residual)) in row.into_iter().enumerate() {
            p.g[ni][f] = g_new;
            max_residual = max_residual.max(residual);
        }
    }
    Ok(max_residual)
}
