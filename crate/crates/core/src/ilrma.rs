//! Independent low-rank matrix analysis: determined blind source separation
//! (N = M) with a low-rank nonnegative source model. Used here to initialize
//! the spatial matrices of the multichannel factorization model.
//!
//! One iteration alternates (a) per-source multiplicative updates of the
//! basis/activation factors under the Itakura-Saito objective against the
//! current source power estimates, and (b) iterative-projection updates of
//! the demixing filters with per-source normalization. After the final
//! iteration the filters are rescaled by projection back onto a reference
//! channel.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hermitian::general;
use crate::scalar::{Scalar, C};
use crate::stft::Spectrogram;

/// Numerical floor for nonnegative factors and modelled powers.
const FACTOR_FLOOR: f64 = 1e-12;
/// Relative diagonal loading for singular weighted covariances.
const COV_REG_REL: f64 = 1e-10;

/// Per-frequency demixing matrices. Column n of `W_f` is the demixing
/// filter of source n; source estimates are s_ft = W_f^H x_ft.
#[derive(Debug, Clone)]
pub struct DemixingMatrixField<T: Scalar> {
    matrices: Vec<Array2<C<T>>>,
}

impl<T: Scalar> DemixingMatrixField<T> {
    pub fn from_matrices(matrices: Vec<Array2<C<T>>>) -> Self {
        Self { matrices }
    }

    pub fn num_freqs(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrix(&self, f: usize) -> &Array2<C<T>> {
        &self.matrices[f]
    }
}

/// Demixing matrices plus the per-iteration objective values, which tests
/// use to check monotone convergence.
#[derive(Debug, Clone)]
pub struct IlrmaResult<T: Scalar> {
    pub demixing: DemixingMatrixField<T>,
    pub cost_trace: Vec<T>,
}

struct IlrmaState<T: Scalar> {
    /// M x N per frequency, columns are demixing filters.
    w: Vec<Array2<C<T>>>,
    /// Per source: K_il x F basis and K_il x T activations.
    basis: Vec<Array2<T>>,
    act: Vec<Array2<T>>,
    /// |w_nf^H x_ft|^2, shape (N, F, T).
    y_pow: Array3<T>,
    /// Modelled source powers, shape (N, F, T).
    r: Array3<T>,
}

/// Runs ILRMA and returns the demixing matrices after `iterations` sweeps.
pub fn ilrma_run<T: Scalar>(
    x: &Spectrogram<T>,
    k_il: usize,
    iterations: usize,
    seed: u64,
) -> Result<IlrmaResult<T>> {
    let (num_freqs, num_frames, m) = (x.num_freqs(), x.num_frames(), x.num_channels());
    let n = m; // determined case
    if m == 0 || num_frames == 0 || num_freqs == 0 {
        return Err(Error::InvalidInput("empty spectrogram".into()));
    }
    if num_frames < m {
        return Err(Error::InvalidInput(format!(
            "need at least {m} frames for rank-{m} covariances, got {num_frames}"
        )));
    }
    if k_il == 0 {
        return Err(Error::InvalidInput("basis count must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = IlrmaState {
        w: vec![Array2::eye(m); num_freqs],
        basis: Vec::with_capacity(n),
        act: Vec::with_capacity(n),
        y_pow: Array3::zeros((n, num_freqs, num_frames)),
        r: Array3::zeros((n, num_freqs, num_frames)),
    };
    for _ in 0..n {
        state.basis.push(random_factor(k_il, num_freqs, &mut rng));
        state.act.push(random_factor(k_il, num_frames, &mut rng));
    }
    refresh_y_pow(&mut state, x);
    for src in 0..n {
        refresh_model(&mut state, src);
    }

    let mut cost_trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        for src in 0..n {
            update_basis(&mut state, src);
            refresh_model(&mut state, src);
            update_activations(&mut state, src);
            refresh_model(&mut state, src);
        }
        update_demixing(&mut state, x)?;
        cost_trace.push(cost(&state, x)?);
    }

    project_back(&mut state)?;

    // Condition check: every demixing matrix must remain invertible.
    for (f, w_f) in state.w.iter().enumerate() {
        let wh = w_f.t().mapv(|v| v.conj());
        general::log_abs_det(&wh, &format!("demixing matrix at f={f}"))
            .map_err(|_| Error::EstimationFailure(format!("singular demixing matrix at f={f}")))?;
    }

    Ok(IlrmaResult {
        demixing: DemixingMatrixField { matrices: state.w },
        cost_trace,
    })
}

/// Per-frequency mixing matrices G_f = W_f^{-H}; column n is the steering
/// vector of source n implied by the demixing filters.
pub fn mixing_from_demixing<T: Scalar>(w: &DemixingMatrixField<T>) -> Result<Vec<Array2<C<T>>>> {
    w.matrices
        .iter()
        .enumerate()
        .map(|(f, w_f)| {
            let wh = w_f.t().mapv(|v| v.conj());
            general::inverse(&wh, &format!("demixing matrix at f={f}"))
        })
        .collect()
}

fn random_factor<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            out[[r, c]] = T::of(0.1 + 0.9 * rng.gen::<f64>());
        }
    }
    out
}

fn refresh_y_pow<T: Scalar>(state: &mut IlrmaState<T>, x: &Spectrogram<T>) {
    let (n, num_freqs, num_frames) = state.y_pow.dim();
    for f in 0..num_freqs {
        for t in 0..num_frames {
            let xv = x.bin(f, t);
            for src in 0..n {
                let w_col = state.w[f].column(src);
                let mut acc = C::new(T::zero(), T::zero());
                for ch in 0..xv.len() {
                    acc += w_col[ch].conj() * xv[ch];
                }
                state.y_pow[[src, f, t]] = acc.norm_sqr();
            }
        }
    }
}

fn refresh_model<T: Scalar>(state: &mut IlrmaState<T>, src: usize) {
    let (_, num_freqs, num_frames) = state.r.dim();
    let k = state.basis[src].nrows();
    let floor = T::of(FACTOR_FLOOR);
    for f in 0..num_freqs {
        for t in 0..num_frames {
            let mut acc = T::zero();
            for ki in 0..k {
                acc += state.basis[src][[ki, f]] * state.act[src][[ki, t]];
            }
            state.r[[src, f, t]] = acc.max(floor);
        }
    }
}

fn update_basis<T: Scalar>(state: &mut IlrmaState<T>, src: usize) {
    let (_, num_freqs, num_frames) = state.r.dim();
    let k = state.basis[src].nrows();
    let floor = T::of(FACTOR_FLOOR);
    for ki in 0..k {
        for f in 0..num_freqs {
            let mut num = T::zero();
            let mut den = T::zero();
            for t in 0..num_frames {
                let r = state.r[[src, f, t]];
                let a = state.act[src][[ki, t]];
                num += a * state.y_pow[[src, f, t]] / (r * r);
                den += a / r;
            }
            if den > T::zero() {
                let b = &mut state.basis[src][[ki, f]];
                *b = (*b * (num / den).sqrt()).max(floor);
            }
        }
    }
}

fn update_activations<T: Scalar>(state: &mut IlrmaState<T>, src: usize) {
    let (_, num_freqs, num_frames) = state.r.dim();
    let k = state.act[src].nrows();
    let floor = T::of(FACTOR_FLOOR);
    for ki in 0..k {
        for t in 0..num_frames {
            let mut num = T::zero();
            let mut den = T::zero();
            for f in 0..num_freqs {
                let r = state.r[[src, f, t]];
                let b = state.basis[src][[ki, f]];
                num += b * state.y_pow[[src, f, t]] / (r * r);
                den += b / r;
            }
            if den > T::zero() {
                let a = &mut state.act[src][[ki, t]];
                *a = (*a * (num / den).sqrt()).max(floor);
            }
        }
    }
}

/// Iterative-projection update of every demixing filter, then a refresh of
/// the separated source powers. Parallel over frequency; each frequency
/// writes only its own slot, so results match serial execution exactly.
fn update_demixing<T: Scalar>(state: &mut IlrmaState<T>, x: &Spectrogram<T>) -> Result<()> {
    let (n, _num_freqs, num_frames) = state.y_pow.dim();
    let m = x.num_channels();
    let r = &state.r;

    let mut per_freq: Vec<(Array2<C<T>>, Array2<T>)> = state
        .w
        .par_iter()
        .enumerate()
        .map(|(f, w_f)| -> Result<(Array2<C<T>>, Array2<T>)> {
            let mut w_new = w_f.clone();
            // Cache the rank-1 outer products of this frequency's frames.
            let mut outers: Vec<C<T>> = vec![C::new(T::zero(), T::zero()); num_frames * m * m];
            for t in 0..num_frames {
                let xv = x.bin(f, t);
                let base = t * m * m;
                for i in 0..m {
                    for j in 0..m {
                        outers[base + i * m + j] = xv[i] * xv[j].conj();
                    }
                }
            }
            let inv_frames = T::one() / T::of_usize(num_frames);
            for src in 0..n {
                let mut u: Array2<C<T>> = Array2::zeros((m, m));
                for t in 0..num_frames {
                    let weight = inv_frames / r[[src, f, t]];
                    let base = t * m * m;
                    for i in 0..m {
                        for j in 0..m {
                            u[[i, j]] += outers[base + i * m + j] * weight;
                        }
                    }
                }
                let w_col = ip_update(&w_new, &u, src, f)?;
                for ch in 0..m {
                    w_new[[ch, src]] = w_col[ch];
                }
            }
            // Refresh separated powers at this frequency.
            let mut pow_f = Array2::zeros((n, num_frames));
            for t in 0..num_frames {
                let xv = x.bin(f, t);
                for src in 0..n {
                    let mut acc = C::new(T::zero(), T::zero());
                    for ch in 0..m {
                        acc += w_new[[ch, src]].conj() * xv[ch];
                    }
                    pow_f[[src, t]] = acc.norm_sqr();
                }
            }
            Ok((w_new, pow_f))
        })
        .collect::<Result<Vec<_>>>()?;

    for (f, (w_new, pow_f)) in per_freq.drain(..).enumerate() {
        state.w[f] = w_new;
        for src in 0..n {
            for t in 0..num_frames {
                state.y_pow[[src, f, t]] = pow_f[[src, t]];
            }
        }
    }
    Ok(())
}

/// w <- (W^H U)^{-1} e_src, normalized so w^H U w = 1. A singular system is
/// retried once with relative diagonal loading of U.
fn ip_update<T: Scalar>(
    w: &Array2<C<T>>,
    u: &Array2<C<T>>,
    src: usize,
    f: usize,
) -> Result<Array1<C<T>>> {
    let m = u.nrows();
    let mut unit: Array1<C<T>> = Array1::zeros(m);
    unit[src] = C::new(T::one(), T::zero());

    let attempt = |u_try: &Array2<C<T>>| -> Option<Array1<C<T>>> {
        let wh = w.t().mapv(|v| v.conj());
        let a = wh.dot(u_try);
        let sol = general::solve(&a, unit.view(), "iterative projection").ok()?;
        let mut quad = T::zero();
        for i in 0..m {
            for j in 0..m {
                quad += (sol[i].conj() * u_try[[i, j]] * sol[j]).re;
            }
        }
        if !(quad > T::zero()) || !quad.is_finite() {
            return None;
        }
        let scale = C::new(T::one() / quad.sqrt(), T::zero());
        Some(sol.mapv(|v| v * scale))
    };

    if let Some(sol) = attempt(u) {
        return Ok(sol);
    }
    let trace: T = (0..m).map(|i| u[[i, i]].re).sum();
    let delta = T::of(COV_REG_REL) * trace / T::of_usize(m);
    let mut u_reg = u.clone();
    for i in 0..m {
        u_reg[[i, i]] += C::new(delta, T::zero());
    }
    attempt(&u_reg).ok_or_else(|| {
        Error::EstimationFailure(format!(
            "weighted covariance stayed singular at f={f}, source {src}"
        ))
    })
}

/// Negative log-likelihood of the current state (up to constants).
fn cost<T: Scalar>(state: &IlrmaState<T>, x: &Spectrogram<T>) -> Result<T> {
    let (n, num_freqs, num_frames) = state.y_pow.dim();
    let mut acc = T::zero();
    for src in 0..n {
        for f in 0..num_freqs {
            for t in 0..num_frames {
                let r = state.r[[src, f, t]];
                acc += state.y_pow[[src, f, t]] / r + r.ln();
            }
        }
    }
    let mut logdet = T::zero();
    for (f, w_f) in state.w.iter().enumerate() {
        let mut work: Vec<C<T>> = w_f.iter().copied().collect();
        logdet += crate::hermitian::dense::ge_log_abs_det(&mut work, x.num_channels())
            .map_err(|_| Error::EstimationFailure(format!("singular demixing matrix at f={f}")))?;
    }
    Ok(acc - T::of(2.0) * T::of_usize(num_frames) * logdet)
}

/// Rescales each source by the reference-channel entry of W_f^{-H} so the
/// filters reproduce physically scaled source images at channel 0.
fn project_back<T: Scalar>(state: &mut IlrmaState<T>) -> Result<()> {
    let n = state.w[0].ncols();
    let guard = T::of(FACTOR_FLOOR);
    for f in 0..state.w.len() {
        let wh = state.w[f].t().mapv(|v| v.conj());
        let g = general::inverse(&wh, &format!("projection back at f={f}"))?;
        for src in 0..n {
            let alpha = g[[0, src]];
            if alpha.norm() >= guard {
                let scale = alpha.conj();
                for ch in 0..state.w[f].nrows() {
                    state.w[f][[ch, src]] = state.w[f][[ch, src]] * scale;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::Spectrogram;
    use ndarray::Array3 as NdArray3;

    type C64 = C<f64>;

    fn gauss(rng: &mut ChaCha8Rng) -> C64 {
        // Box-Muller; circular complex Gaussian with unit variance.
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        let r = (-u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        C64::new(r * th.cos(), r * th.sin())
    }

    /// Synthetic determined mixture of two sources with rank-1 variance
    /// structure (distinct spectral envelopes, anti-phase activation bursts),
    /// mixed by `mix(f)` per frequency.
    fn synth_mixture(
        num_freqs: usize,
        num_frames: usize,
        mix: &dyn Fn(usize) -> Array2<C64>,
        seed: u64,
    ) -> (Spectrogram<f64>, Vec<Array2<C64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = mix(0).nrows();
        let mut data = NdArray3::zeros((num_freqs, num_frames, m));
        let mut mixes = Vec::with_capacity(num_freqs);
        for f in 0..num_freqs {
            let a = mix(f);
            let frac = f as f64 / num_freqs as f64;
            let var0 = (-2.5 * frac).exp() + 0.01;
            let var1 = (-2.5 * (1.0 - frac)).exp() + 0.01;
            for t in 0..num_frames {
                let burst0 = if (t / 8) % 2 == 0 { 1.0 } else { 0.02 };
                let burst1 = if (t / 8) % 2 == 1 { 1.0 } else { 0.02 };
                let s0 = gauss(&mut rng) * (var0 * burst0).sqrt();
                let s1 = gauss(&mut rng) * (var1 * burst1).sqrt();
                for ch in 0..m {
                    data[[f, t, ch]] = a[[ch, 0]] * s0 + a[[ch, 1]] * s1;
                }
            }
            mixes.push(a);
        }
        (
            Spectrogram::from_parts(data, (num_freqs - 1) * 2, 160, 16000).unwrap(),
            mixes,
        )
    }

    /// Amplitude crosstalk of W^H A after the best per-frequency permutation.
    fn crosstalk(w: &DemixingMatrixField<f64>, mixes: &[Array2<C64>]) -> f64 {
        let mut on = 0.0f64;
        let mut off = 0.0f64;
        for (f, a) in mixes.iter().enumerate() {
            let wh = w.matrix(f).t().mapv(|v| v.conj());
            let b = wh.dot(a);
            let d_ident = b[[0, 0]].norm_sqr() + b[[1, 1]].norm_sqr();
            let d_swap = b[[0, 1]].norm_sqr() + b[[1, 0]].norm_sqr();
            if d_ident >= d_swap {
                on += d_ident;
                off += d_swap;
            } else {
                on += d_swap;
                off += d_ident;
            }
        }
        (off / on).sqrt()
    }

    #[test]
    fn identity_mixing_separates() {
        let (x, mixes) = synth_mixture(33, 64, &|_| Array2::eye(2), 7);
        let res = ilrma_run(&x, 2, 50, 7).unwrap();
        let ct = crosstalk(&res.demixing, &mixes);
        assert!(ct <= 0.1, "crosstalk ratio {ct}");
    }

    #[test]
    fn anechoic_mixing_separates() {
        let mix = |f: usize| {
            let th1 = 0.015 * f as f64;
            let th2 = -0.04 * f as f64;
            ndarray::array![
                [C64::new(1.0, 0.0), C64::new(1.0, 0.0)],
                [C64::from_polar(1.0, th1), C64::from_polar(0.9, th2)],
            ]
        };
        let (x, mixes) = synth_mixture(33, 64, &mix, 11);
        let res = ilrma_run(&x, 2, 50, 11).unwrap();
        let ct = crosstalk(&res.demixing, &mixes);
        assert!(ct <= 0.1, "crosstalk ratio {ct}");
    }

    #[test]
    fn zero_variance_channel_engages_regularization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = NdArray3::zeros((9, 16, 2));
        for f in 0..9 {
            for t in 0..16 {
                data[[f, t, 0]] = C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                // channel 1 stays exactly zero
            }
        }
        let x = Spectrogram::from_parts(data, 16, 8, 16000).unwrap();
        let res = ilrma_run(&x, 2, 5, 3);
        assert!(res.is_ok(), "regularized run should not fail: {res:?}");
    }

    #[test]
    fn cost_is_monotone_nonincreasing() {
        let (x, _) = synth_mixture(17, 32, &|_| Array2::eye(2), 21);
        let res = ilrma_run(&x, 2, 30, 21).unwrap();
        for w in res.cost_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-8 * w[0].abs(),
                "cost increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn mixing_from_demixing_cases() {
        // Identity.
        let field = DemixingMatrixField::<f64> {
            matrices: vec![Array2::eye(2)],
        };
        let g = mixing_from_demixing(&field).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g[0][[i, j]] - C64::new(expect, 0.0)).norm() < 1e-12);
            }
        }

        // Diagonal scaling.
        let mut d = Array2::zeros((2, 2));
        d[[0, 0]] = C64::new(2.0, 0.0);
        d[[1, 1]] = C64::new(4.0, 0.0);
        let field = DemixingMatrixField { matrices: vec![d] };
        let g = mixing_from_demixing(&field).unwrap();
        assert!((g[0][[0, 0]].re - 0.5).abs() < 1e-12);
        assert!((g[0][[1, 1]].re - 0.25).abs() < 1e-12);

        // Random non-singular: W^H G = I.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = Array2::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                w[[i, j]] = C64::new(rng.gen::<f64>() + 0.2, rng.gen::<f64>() - 0.5);
            }
        }
        let field = DemixingMatrixField {
            matrices: vec![w.clone()],
        };
        let g = mixing_from_demixing(&field).unwrap();
        let wh = w.t().mapv(|v: C64| v.conj());
        let prod = wh.dot(&g[0]);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (prod[[i, j]] - C64::new(expect, 0.0)).norm() < 1e-8,
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn too_few_frames_rejected() {
        let data = NdArray3::<C64>::zeros((5, 1, 2));
        let x = Spectrogram::from_parts(data, 8, 4, 16000).unwrap();
        assert!(matches!(ilrma_run(&x, 2, 5, 0), Err(Error::InvalidInput(_))));
    }
}
