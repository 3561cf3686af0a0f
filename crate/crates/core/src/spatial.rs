//! Spatial-template initialization and extraction of speech/noise
//! covariances and steering vectors from fitted model parameters.
//!
//! Initialization combines the demixing-based steering vectors with an
//! empirical-covariance anchor: the steering vector of the target source is
//! replaced by the principal component of the time-averaged observed
//! covariance, on the assumption that the target is predominant over the
//! analyzed stretch.

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hermitian::{principal_eigenvector, HermitianMatrix};
use crate::ilrma::{mixing_from_demixing, DemixingMatrixField};
use crate::mnmf::MnmfParams;
use crate::scalar::{Scalar, C};
use crate::stft::Spectrogram;

/// Diagonal loading added to the rank-1 initial templates.
#[derive(Debug, Clone, Copy)]
pub enum EpsilonPolicy {
    /// epsilon = factor * trace(g g^H) / M, floored at 1e-12.
    Relative(f64),
    /// Fixed epsilon.
    Absolute(f64),
}

impl Default for EpsilonPolicy {
    fn default() -> Self {
        EpsilonPolicy::Relative(1e-4)
    }
}

impl EpsilonPolicy {
    fn value<T: Scalar>(&self, g_norm_sq: T, m: usize) -> T {
        match *self {
            EpsilonPolicy::Relative(factor) => {
                (T::of(factor) * g_norm_sq / T::of_usize(m)).max(T::of(1e-12))
            }
            EpsilonPolicy::Absolute(eps) => T::of(eps),
        }
    }
}

/// Initial spatial templates G_nf = g_nf g_nf^H + epsilon I.
///
/// The demixing result supplies the per-source steering vectors; the source
/// whose steering best matches the empirical principal component (averaged
/// over frequency) becomes source 0 and has its steering replaced by that
/// anchor. Remaining sources keep their original order.
pub fn init_spatial<T: Scalar>(
    x: &Spectrogram<T>,
    demixing: &DemixingMatrixField<T>,
    policy: EpsilonPolicy,
) -> Result<Vec<Vec<HermitianMatrix<T>>>> {
    let (num_freqs, num_frames, m) = (x.num_freqs(), x.num_frames(), x.num_channels());
    if demixing.num_freqs() != num_freqs {
        return Err(Error::dim_mismatch(
            format!("{num_freqs} demixing matrices"),
            format!("{}", demixing.num_freqs()),
        ));
    }
    if num_frames == 0 {
        return Err(Error::InvalidInput("empty spectrogram".into()));
    }
    let n = m;
    let mixing = mixing_from_demixing(demixing)?;

    // Empirical anchor: principal component of the frame-averaged covariance.
    let inv_frames = T::one() / T::of_usize(num_frames);
    let mut anchors: Vec<Option<Array1<C<T>>>> = Vec::with_capacity(num_freqs);
    for f in 0..num_freqs {
        let mut acc = HermitianMatrix::zeros(m);
        for t in 0..num_frames {
            acc.add_scaled_assign(&HermitianMatrix::from_outer(x.bin(f, t)), inv_frames);
        }
        // A silent bin has no usable principal direction; the demixing
        // steering is kept there instead.
        anchors.push(principal_eigenvector(&acc, 0).ok());
    }

    // Pick the demixing source most aligned with the anchor direction.
    let mut best = (0usize, T::neg_infinity());
    for src in 0..n {
        let mut sim = T::zero();
        let mut count = 0usize;
        for f in 0..num_freqs {
            let Some(anchor) = &anchors[f] else { continue };
            let g = mixing[f].column(src);
            let norm_sq: T = g.iter().map(|v| v.norm_sqr()).sum();
            if norm_sq <= T::zero() {
                continue;
            }
            let mut dot = C::new(T::zero(), T::zero());
            for i in 0..m {
                dot += g[i].conj() * anchor[i];
            }
            sim += dot.norm() / norm_sq.sqrt();
            count += 1;
        }
        if count > 0 {
            sim /= T::of_usize(count);
        }
        if sim > best.1 {
            best = (src, sim);
        }
    }
    let speech_src = best.0;

    // Source order: anchored speech first, the rest keep their order.
    let mut order = Vec::with_capacity(n);
    order.push(speech_src);
    order.extend((0..n).filter(|&s| s != speech_src));

    let mut templates: Vec<Vec<HermitianMatrix<T>>> = vec![Vec::with_capacity(num_freqs); n];
    for f in 0..num_freqs {
        for (slot, &src) in order.iter().enumerate() {
            let g: Array1<C<T>> = if slot == 0 {
                match &anchors[f] {
                    Some(anchor) => anchor.clone(),
                    None => mixing[f].column(src).to_owned(),
                }
            } else {
                mixing[f].column(src).to_owned()
            };
            let norm_sq: T = g.iter().map(|v| v.norm_sqr()).sum();
            let eps = policy.value(norm_sq, m);
            let template = HermitianMatrix::from_outer(g.view()).load_diagonal(eps);
            templates[slot].push(template);
        }
    }
    Ok(templates)
}

/// Speech/noise covariance estimates extracted from fitted parameters.
/// Time-variant fields keep the factored form (per-source weights times
/// per-frequency templates), which is exact for this model.
#[derive(Debug, Clone)]
pub struct SpatialEstimates<T: Scalar> {
    num_channels: usize,
    num_freqs: usize,
    num_frames: usize,
    speech_ti: Vec<HermitianMatrix<T>>,
    noise_ti: Vec<HermitianMatrix<T>>,
    time_variant: Option<TimeVariantScms<T>>,
}

/// Factored per-frame covariances: scm(n, f, t) = weights[n, f, t] *
/// templates[n][f], with source 0 the target speech.
#[derive(Debug, Clone)]
pub struct TimeVariantScms<T: Scalar> {
    weights: Array3<T>,
    templates: Vec<Vec<HermitianMatrix<T>>>,
}

impl<T: Scalar> SpatialEstimates<T> {
    /// Wraps precomputed time-invariant fields (mask-derived estimates,
    /// synthetic test fixtures). Time-variant queries will be unavailable.
    pub fn from_time_invariant(
        speech_ti: Vec<HermitianMatrix<T>>,
        noise_ti: Vec<HermitianMatrix<T>>,
        num_frames: usize,
    ) -> Result<Self> {
        Self::from_components(speech_ti, noise_ti, num_frames, None)
    }

    /// Assembles estimates from explicit fields. The optional factored
    /// time-variant part supplies (weights (N, F, T), templates [n][f]) with
    /// source 0 the target speech.
    pub fn from_components(
        speech_ti: Vec<HermitianMatrix<T>>,
        noise_ti: Vec<HermitianMatrix<T>>,
        num_frames: usize,
        time_variant: Option<(Array3<T>, Vec<Vec<HermitianMatrix<T>>>)>,
    ) -> Result<Self> {
        if speech_ti.is_empty() || speech_ti.len() != noise_ti.len() {
            return Err(Error::dim_mismatch(
                "matching nonempty speech/noise fields",
                format!("{} vs {}", speech_ti.len(), noise_ti.len()),
            ));
        }
        let m = speech_ti[0].dim();
        let num_freqs = speech_ti.len();
        let time_variant = match time_variant {
            None => None,
            Some((weights, templates)) => {
                let (n, wf, wt) = weights.dim();
                if wf != num_freqs || wt != num_frames || templates.len() != n {
                    return Err(Error::dim_mismatch(
                        format!("weights ({n}, {num_freqs}, {num_frames})"),
                        format!("({n}, {wf}, {wt}) with {} template rows", templates.len()),
                    ));
                }
                Some(TimeVariantScms { weights, templates })
            }
        };
        Ok(Self {
            num_channels: m,
            num_freqs,
            num_frames,
            speech_ti,
            noise_ti,
            time_variant,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn num_freqs(&self) -> usize {
        self.num_freqs
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn has_time_variant(&self) -> bool {
        self.time_variant.is_some()
    }

    /// Time-invariant speech covariance P_f.
    pub fn speech_ti(&self, f: usize) -> &HermitianMatrix<T> {
        &self.speech_ti[f]
    }

    /// Time-invariant noise covariance Q_f.
    pub fn noise_ti(&self, f: usize) -> &HermitianMatrix<T> {
        &self.noise_ti[f]
    }

    /// Per-frame speech covariance P_ft.
    pub fn speech_tv(&self, f: usize, t: usize) -> Result<HermitianMatrix<T>> {
        let tv = self.require_tv()?;
        Ok(tv.templates[0][f].scaled(tv.weights[[0, f, t]]))
    }

    /// Per-frame noise covariance Q_ft.
    pub fn noise_tv(&self, f: usize, t: usize) -> Result<HermitianMatrix<T>> {
        let tv = self.require_tv()?;
        let mut acc = HermitianMatrix::zeros(self.num_channels);
        for n in 1..tv.templates.len() {
            acc.add_scaled_assign(&tv.templates[n][f], tv.weights[[n, f, t]]);
        }
        Ok(acc)
    }

    /// Per-frame model covariance P_ft + Q_ft.
    pub fn model_tv(&self, f: usize, t: usize) -> Result<HermitianMatrix<T>> {
        let mut acc = self.speech_tv(f, t)?;
        let q = self.noise_tv(f, t)?;
        acc.add_scaled_assign(&q, T::one());
        Ok(acc)
    }

    fn require_tv(&self) -> Result<&TimeVariantScms<T>> {
        self.time_variant.as_ref().ok_or_else(|| {
            Error::InvalidInput("time-variant covariances are not available".into())
        })
    }
}

/// Builds [`SpatialEstimates`] from fitted parameters, with `speech_source`
/// naming the target source index (0 by convention after initialization).
pub fn extract_scms<T: Scalar>(
    p: &MnmfParams<T>,
    speech_source: usize,
) -> Result<SpatialEstimates<T>> {
    let (n, num_freqs, num_frames, m) = (
        p.num_sources(),
        p.num_freqs(),
        p.num_frames(),
        p.num_channels(),
    );
    if speech_source >= n {
        return Err(Error::InvalidInput(format!(
            "speech source {speech_source} out of range for {n} sources"
        )));
    }
    // Source order with speech first.
    let mut order = Vec::with_capacity(n);
    order.push(speech_source);
    order.extend((0..n).filter(|&s| s != speech_source));

    let weight_rows: Vec<Array2<T>> = (0..num_freqs)
        .into_par_iter()
        .map(|f| {
            let mut w = Array2::zeros((n, num_frames));
            for (slot, &src) in order.iter().enumerate() {
                for t in 0..num_frames {
                    w[[slot, t]] = p.source_power(src, f, t);
                }
            }
            w
        })
        .collect();

    let mut weights = Array3::zeros((n, num_freqs, num_frames));
    for (f, w) in weight_rows.into_iter().enumerate() {
        for slot in 0..n {
            for t in 0..num_frames {
                weights[[slot, f, t]] = w[[slot, t]];
            }
        }
    }
    let templates: Vec<Vec<HermitianMatrix<T>>> =
        order.iter().map(|&src| p.g[src].clone()).collect();

    // Time-invariant fields are frame averages of the factored forms.
    let inv_frames = T::one() / T::of_usize(num_frames.max(1));
    let mut speech_ti = Vec::with_capacity(num_freqs);
    let mut noise_ti = Vec::with_capacity(num_freqs);
    for f in 0..num_freqs {
        let mut mean_w = vec![T::zero(); n];
        for slot in 0..n {
            for t in 0..num_frames {
                mean_w[slot] += weights[[slot, f, t]];
            }
            mean_w[slot] *= inv_frames;
        }
        speech_ti.push(templates[0][f].scaled(mean_w[0]));
        let mut q = HermitianMatrix::zeros(m);
        for slot in 1..n {
            q.add_scaled_assign(&templates[slot][f], mean_w[slot]);
        }
        noise_ti.push(q);
    }

    Ok(SpatialEstimates {
        num_channels: m,
        num_freqs,
        num_frames,
        speech_ti,
        noise_ti,
        time_variant: Some(TimeVariantScms { weights, templates }),
    })
}

/// Which covariance fields a beamformer consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMode {
    TimeInvariant,
    TimeVariant,
}

/// Steering vectors and speech powers derived from the speech covariances.
#[derive(Debug, Clone)]
pub struct SteeringEstimate<T: Scalar> {
    /// Unit-norm steering vector per frequency, anchored phase.
    pub vectors: Vec<Array1<C<T>>>,
    /// Time-invariant speech power lambda_f = ||P_f||_F.
    pub lambda: Vec<T>,
    /// Per-frame speech powers lambda_ft for the time-variant mode.
    pub lambda_tv: Option<Array2<T>>,
}

/// Principal-component steering vectors with Frobenius-norm power estimates.
pub fn extract_steering<T: Scalar>(
    est: &SpatialEstimates<T>,
    mode: TimeMode,
) -> Result<SteeringEstimate<T>> {
    let mut vectors = Vec::with_capacity(est.num_freqs);
    let mut lambda = Vec::with_capacity(est.num_freqs);
    for f in 0..est.num_freqs {
        let p_f = est.speech_ti(f);
        let v = principal_eigenvector(p_f, 0).map_err(|e| match e {
            Error::DegenerateMatrix { .. } => Error::DegenerateMatrix {
                context: format!("speech covariance at f={f} has no positive eigenvalue"),
            },
            other => other,
        })?;
        vectors.push(v);
        lambda.push(p_f.frobenius_norm());
    }
    let lambda_tv = match mode {
        TimeMode::TimeInvariant => None,
        TimeMode::TimeVariant => {
            let tv = est.require_tv()?;
            let mut lt = Array2::zeros((est.num_freqs, est.num_frames));
            for f in 0..est.num_freqs {
                let template_norm = tv.templates[0][f].frobenius_norm();
                for t in 0..est.num_frames {
                    lt[[f, t]] = tv.weights[[0, f, t]] * template_norm;
                }
            }
            Some(lt)
        }
    };
    Ok(SteeringEstimate {
        vectors,
        lambda,
        lambda_tv,
    })
}
