//! Demixing-filter construction and application.
//!
//! Three filter families, each in a time-variant and a time-invariant
//! version:
//!
//! - full-rank Wiener filter  w = (P + Q)^{-1} P u_m
//! - rank-1 Wiener filter     w = Q^{-1} p (p^H Q^{-1} p + 1/lambda)^{-1} p^H u_m
//! - MVDR                     w = Q^{-1} p (p^H Q^{-1} p)^{-1} p^H u_m
//!
//! Time-variant rank-1 and MVDR filters keep the speech-side quantities
//! time-invariant and vary only the noise covariance per frame. The
//! reference channel is either fixed or chosen to maximize the average
//! a-posteriori SNR over candidate filters built for every channel.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::hermitian::HermitianMatrix;
use crate::scalar::{Scalar, C};
use crate::spatial::{extract_steering, SpatialEstimates, TimeMode};
use crate::stft::Spectrogram;

/// Relative diagonal loading applied to covariances before inversion.
const INV_REG_REL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeamformerFamily {
    FullRankWf,
    Rank1Wf,
    Mvdr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    Automatic,
    Channel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamformerSpec {
    pub family: BeamformerFamily,
    pub time_mode: TimeMode,
    pub reference: Reference,
}

/// Demixing filters: an M-vector per frequency, or per (frequency, frame).
#[derive(Debug, Clone)]
pub enum FilterWeights<T: Scalar> {
    /// Shape (F, M).
    TimeInvariant(Array2<C<T>>),
    /// Shape (F, T, M).
    TimeVariant(Array3<C<T>>),
}

#[derive(Debug, Clone)]
pub struct BeamformerFilterField<T: Scalar> {
    pub reference: usize,
    pub weights: FilterWeights<T>,
}

/// Builds the filter for `spec`, selecting the reference channel by the
/// a-posteriori SNR rule when it is automatic.
pub fn build_filter<T: Scalar>(
    spec: &BeamformerSpec,
    est: &SpatialEstimates<T>,
) -> Result<BeamformerFilterField<T>> {
    match spec.reference {
        Reference::Channel(m) => {
            if m >= est.num_channels() {
                return Err(Error::InvalidInput(format!(
                    "reference channel {m} out of range for {} channels",
                    est.num_channels()
                )));
            }
            build_filter_with_reference(spec.family, spec.time_mode, est, m)
        }
        Reference::Automatic => {
            let candidates = (0..est.num_channels())
                .map(|m| build_filter_with_reference(spec.family, spec.time_mode, est, m))
                .collect::<Result<Vec<_>>>()?;
            let best = select_reference(&candidates, est)?;
            Ok(candidates.into_iter().nth(best).expect("candidate exists"))
        }
    }
}

/// Builds one filter field for a fixed reference channel.
pub fn build_filter_with_reference<T: Scalar>(
    family: BeamformerFamily,
    time_mode: TimeMode,
    est: &SpatialEstimates<T>,
    reference: usize,
) -> Result<BeamformerFilterField<T>> {
    let num_freqs = est.num_freqs();
    let m = est.num_channels();

    // Speech-side quantities of the steered families are time-invariant.
    let steering = match family {
        BeamformerFamily::FullRankWf => None,
        _ => Some(extract_steering(est, TimeMode::TimeInvariant)?),
    };

    let weights = match time_mode {
        TimeMode::TimeInvariant => {
            let mut w = Array2::zeros((num_freqs, m));
            for f in 0..num_freqs {
                let wf = filter_vector(
                    family,
                    est.speech_ti(f),
                    est.noise_ti(f),
                    steering.as_ref().map(|s| (&s.vectors[f], s.lambda[f])),
                    reference,
                    f,
                    0,
                )?;
                for ch in 0..m {
                    w[[f, ch]] = wf[ch];
                }
            }
            FilterWeights::TimeInvariant(w)
        }
        TimeMode::TimeVariant => {
            let num_frames = est.num_frames();
            let mut w = Array3::zeros((num_freqs, num_frames, m));
            for f in 0..num_freqs {
                for t in 0..num_frames {
                    let p_ft = est.speech_tv(f, t)?;
                    let q_ft = est.noise_tv(f, t)?;
                    let wf = filter_vector(
                        family,
                        &p_ft,
                        &q_ft,
                        steering.as_ref().map(|s| (&s.vectors[f], s.lambda[f])),
                        reference,
                        f,
                        t,
                    )?;
                    for ch in 0..m {
                        w[[f, t, ch]] = wf[ch];
                    }
                }
            }
            FilterWeights::TimeVariant(w)
        }
    };
    Ok(BeamformerFilterField {
        reference,
        weights,
    })
}

/// Closed-form filter vector at one bin.
fn filter_vector<T: Scalar>(
    family: BeamformerFamily,
    p: &HermitianMatrix<T>,
    q: &HermitianMatrix<T>,
    steering: Option<(&Array1<C<T>>, T)>,
    reference: usize,
    f: usize,
    t: usize,
) -> Result<Array1<C<T>>> {
    let fail = |_| Error::NumericalFailure {
        stage: "filter construction",
        freq: f,
        frame: t,
        detail: "covariance stayed singular after regularization".into(),
    };
    match family {
        BeamformerFamily::FullRankWf => {
            let mix = regularized(&p.add(q));
            let rhs = p.entries().column(reference).to_owned();
            mix.solve_pd(rhs.view(), "mixture covariance").map_err(fail)
        }
        BeamformerFamily::Rank1Wf | BeamformerFamily::Mvdr => {
            let (p_vec, lambda) = steering.expect("steered families carry steering");
            let qr = regularized(q);
            let qi_p = qr.solve_pd(p_vec.view(), "noise covariance").map_err(fail)?;
            let mut quad = T::zero();
            for ch in 0..p_vec.len() {
                quad += (p_vec[ch].conj() * qi_p[ch]).re;
            }
            let denom = match family {
                BeamformerFamily::Rank1Wf => quad + T::one() / lambda,
                _ => quad,
            };
            // p^H u_m picks the conjugated reference entry of the steering.
            let gain = p_vec[reference].conj() / denom;
            Ok(qi_p.mapv(|v| v * gain))
        }
    }
}

fn regularized<T: Scalar>(a: &HermitianMatrix<T>) -> HermitianMatrix<T> {
    let load = T::of(INV_REG_REL) * a.trace().abs() / T::of_usize(a.dim());
    a.load_diagonal(load)
}

/// Average a-posteriori SNR of one candidate filter over all bins.
fn posterior_snr<T: Scalar>(
    filter: &BeamformerFilterField<T>,
    est: &SpatialEstimates<T>,
) -> Result<T> {
    let mut num = T::zero();
    let mut den = T::zero();
    match &filter.weights {
        FilterWeights::TimeInvariant(w) => {
            for f in 0..est.num_freqs() {
                let wf = w.row(f);
                num += est.speech_ti(f).quadratic_form(wf);
                den += est.noise_ti(f).quadratic_form(wf);
            }
        }
        FilterWeights::TimeVariant(w) => {
            for f in 0..est.num_freqs() {
                for t in 0..est.num_frames() {
                    let wft = w.index_axis(ndarray::Axis(0), f);
                    let wft = wft.index_axis(ndarray::Axis(0), t);
                    num += est.speech_tv(f, t)?.quadratic_form(wft);
                    den += est.noise_tv(f, t)?.quadratic_form(wft);
                }
            }
        }
    }
    if den <= T::zero() {
        // No noise energy passes the filter: infinitely favorable.
        return Ok(T::infinity());
    }
    Ok(num / den)
}

/// Index of the candidate with the largest average a-posteriori SNR;
/// exact ties resolve to the lowest index.
pub fn select_reference<T: Scalar>(
    candidates: &[BeamformerFilterField<T>],
    est: &SpatialEstimates<T>,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate filters".into()));
    }
    let mut best = 0usize;
    let mut best_snr = T::neg_infinity();
    for (m, cand) in candidates.iter().enumerate() {
        let snr = posterior_snr(cand, est)?;
        if snr > best_snr {
            best_snr = snr;
            best = m;
        }
    }
    Ok(best)
}

/// Applies the filter: s_ft = w^H x_ft, yielding a single-channel
/// spectrogram with the mixture's framing.
pub fn apply_filter<T: Scalar>(
    filter: &BeamformerFilterField<T>,
    x: &Spectrogram<T>,
) -> Result<Spectrogram<T>> {
    let (num_freqs, num_frames, m) = (x.num_freqs(), x.num_frames(), x.num_channels());
    let check = |wf: usize, wm: usize, wt: Option<usize>| -> Result<()> {
        if wf != num_freqs || wm != m || wt.map_or(false, |t| t != num_frames) {
            return Err(Error::dim_mismatch(
                format!("filters for {num_freqs} bins x {m} channels x {num_frames} frames"),
                format!("{wf} bins x {wm} channels{}", match wt {
                    Some(t) => format!(" x {t} frames"),
                    None => String::new(),
                }),
            ));
        }
        Ok(())
    };
    let mut out = Array3::zeros((num_freqs, num_frames, 1));
    match &filter.weights {
        FilterWeights::TimeInvariant(w) => {
            check(w.nrows(), w.ncols(), None)?;
            for f in 0..num_freqs {
                for t in 0..num_frames {
                    let xv = x.bin(f, t);
                    let mut acc = C::new(T::zero(), T::zero());
                    for ch in 0..m {
                        acc += w[[f, ch]].conj() * xv[ch];
                    }
                    out[[f, t, 0]] = acc;
                }
            }
        }
        FilterWeights::TimeVariant(w) => {
            let (wf, wt, wm) = w.dim();
            check(wf, wm, Some(wt))?;
            for f in 0..num_freqs {
                for t in 0..num_frames {
                    let xv = x.bin(f, t);
                    let mut acc = C::new(T::zero(), T::zero());
                    for ch in 0..m {
                        acc += w[[f, t, ch]].conj() * xv[ch];
                    }
                    out[[f, t, 0]] = acc;
                }
            }
        }
    }
    Spectrogram::from_parts(out, x.window_len(), x.hop(), x.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3 as NdArray3};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type C64 = C<f64>;

    fn random_psd(m: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix<f64> {
        let mut b: Array2<C64> = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                b[[i, j]] = C64::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0);
            }
        }
        let bh = b.t().mapv(|v| v.conj());
        let mut a = b.dot(&bh);
        for i in 0..m {
            a[[i, i]] += C64::new(0.1, 0.0);
        }
        HermitianMatrix::symmetrize_from(a)
    }

    fn random_unit(m: usize, rng: &mut ChaCha8Rng) -> Array1<C64> {
        let mut v: Array1<C64> = Array1::zeros(m);
        for ch in 0..m {
            v[ch] = C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        }
        let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        v.mapv(|x| x / norm)
    }

    fn ti_estimates(
        p: Vec<HermitianMatrix<f64>>,
        q: Vec<HermitianMatrix<f64>>,
    ) -> SpatialEstimates<f64> {
        SpatialEstimates::from_time_invariant(p, q, 4).unwrap()
    }

    fn ti_weights(field: &BeamformerFilterField<f64>) -> &Array2<C64> {
        match &field.weights {
            FilterWeights::TimeInvariant(w) => w,
            _ => panic!("expected time-invariant weights"),
        }
    }

    #[test]
    fn full_rank_identity_case() {
        // P = Q = I: w = (2I)^{-1} I u_0 = 0.5 u_0.
        let est = ti_estimates(
            vec![HermitianMatrix::identity(2)],
            vec![HermitianMatrix::identity(2)],
        );
        let f = build_filter_with_reference(
            BeamformerFamily::FullRankWf,
            TimeMode::TimeInvariant,
            &est,
            0,
        )
        .unwrap();
        let w = ti_weights(&f);
        assert!((w[[0, 0]] - C64::new(0.5, 0.0)).norm() < 1e-9);
        assert!(w[[0, 1]].norm() < 1e-9);
    }

    #[test]
    fn mvdr_unit_steering() {
        // Q = I, p = e0, m = 0: w = e0.
        let p = array![C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        let est = ti_estimates(
            vec![HermitianMatrix::from_outer(p.view())],
            vec![HermitianMatrix::identity(2)],
        );
        let f =
            build_filter_with_reference(BeamformerFamily::Mvdr, TimeMode::TimeInvariant, &est, 0)
                .unwrap();
        let w = ti_weights(&f);
        assert!((w[[0, 0]] - C64::new(1.0, 0.0)).norm() < 1e-9);
        assert!(w[[0, 1]].norm() < 1e-9);
    }

    #[test]
    fn rank1_with_huge_lambda_approaches_mvdr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let m = 3;
            let p_vec = random_unit(m, &mut rng);
            let q = random_psd(m, &mut rng);
            let lambda = 1e8;
            let p_mat = HermitianMatrix::from_outer(p_vec.view()).scaled(lambda);
            let est = ti_estimates(vec![p_mat], vec![q]);

            let wf1 = build_filter_with_reference(
                BeamformerFamily::Rank1Wf,
                TimeMode::TimeInvariant,
                &est,
                0,
            )
            .unwrap();
            let mv = build_filter_with_reference(
                BeamformerFamily::Mvdr,
                TimeMode::TimeInvariant,
                &est,
                0,
            )
            .unwrap();
            let (w1, w2) = (ti_weights(&wf1), ti_weights(&mv));
            let mut err = 0.0f64;
            let mut nrm = 0.0f64;
            for ch in 0..m {
                err += (w1[[0, ch]] - w2[[0, ch]]).norm_sqr();
                nrm += w2[[0, ch]].norm_sqr();
            }
            assert!(
                (err / nrm).sqrt() <= 1e-3,
                "trial {trial}: relative gap {}",
                (err / nrm).sqrt()
            );
        }
    }

    #[test]
    fn full_rank_reduces_to_rank1_on_rank_one_speech() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let m = 2 + (trial % 3);
            let p_vec = random_unit(m, &mut rng);
            let lambda = 0.2 + 5.0 * rng.gen::<f64>();
            let q = random_psd(m, &mut rng);
            let p_mat = HermitianMatrix::from_outer(p_vec.view()).scaled(lambda);
            let est = ti_estimates(vec![p_mat], vec![q]);

            for reference in 0..m {
                let full = build_filter_with_reference(
                    BeamformerFamily::FullRankWf,
                    TimeMode::TimeInvariant,
                    &est,
                    reference,
                )
                .unwrap();
                let r1 = build_filter_with_reference(
                    BeamformerFamily::Rank1Wf,
                    TimeMode::TimeInvariant,
                    &est,
                    reference,
                )
                .unwrap();
                let (wa, wb) = (ti_weights(&full), ti_weights(&r1));
                let mut err = 0.0f64;
                let mut nrm = 0.0f64;
                for ch in 0..m {
                    err += (wa[[0, ch]] - wb[[0, ch]]).norm_sqr();
                    nrm += wa[[0, ch]].norm_sqr();
                }
                assert!(
                    (err / nrm.max(1e-30)).sqrt() <= 1e-8,
                    "trial {trial} ref {reference}: gap {}",
                    (err / nrm.max(1e-30)).sqrt()
                );
            }
        }
    }

    #[test]
    fn mvdr_distortionless_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let m = 4;
            let p_vec = random_unit(m, &mut rng);
            let q = random_psd(m, &mut rng);
            let p_mat = HermitianMatrix::from_outer(p_vec.view()).scaled(2.0);
            let est = ti_estimates(vec![p_mat.clone()], vec![q.clone()]);
            let mv = build_filter_with_reference(
                BeamformerFamily::Mvdr,
                TimeMode::TimeInvariant,
                &est,
                1,
            )
            .unwrap();
            let w = ti_weights(&mv);

            // Distortionless: w^H p equals the reference entry of p.
            let steer = extract_steering(&est, TimeMode::TimeInvariant).unwrap();
            let mut resp = C64::new(0.0, 0.0);
            for ch in 0..m {
                resp += w[[0, ch]].conj() * steer.vectors[0][ch];
            }
            assert!(
                (resp - steer.vectors[0][1]).norm() < 1e-9,
                "response {resp} vs steering entry"
            );

            // Scale invariance: Q -> c Q leaves w unchanged.
            let est_scaled = ti_estimates(vec![p_mat.clone()], vec![q.scaled(37.5)]);
            let mv2 = build_filter_with_reference(
                BeamformerFamily::Mvdr,
                TimeMode::TimeInvariant,
                &est_scaled,
                1,
            )
            .unwrap();
            let w2 = ti_weights(&mv2);
            for ch in 0..m {
                assert!(
                    (w[[0, ch]] - w2[[0, ch]]).norm() < 1e-9,
                    "channel {ch} changed under noise scaling"
                );
            }
        }
    }

    #[test]
    fn reference_selection_prefers_speech_heavy_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..10 {
            // Speech power concentrated on a known channel.
            let loud = trial % 2;
            let mut diag = [1.0f64, 1.0];
            diag[loud] = 10.0 + rng.gen::<f64>();
            let est = ti_estimates(
                vec![HermitianMatrix::from_diagonal(&diag)],
                vec![HermitianMatrix::identity(2)],
            );
            let candidates: Vec<_> = (0..2)
                .map(|m| {
                    build_filter_with_reference(
                        BeamformerFamily::FullRankWf,
                        TimeMode::TimeInvariant,
                        &est,
                        m,
                    )
                    .unwrap()
                })
                .collect();
            let chosen = select_reference(&candidates, &est).unwrap();
            assert_eq!(chosen, loud, "trial {trial}");
        }
    }

    #[test]
    fn reference_selection_tie_breaks_low() {
        let est = ti_estimates(
            vec![HermitianMatrix::from_diagonal(&[2.0f64, 2.0])],
            vec![HermitianMatrix::identity(2)],
        );
        let candidates: Vec<_> = (0..2)
            .map(|m| {
                build_filter_with_reference(
                    BeamformerFamily::FullRankWf,
                    TimeMode::TimeInvariant,
                    &est,
                    m,
                )
                .unwrap()
            })
            .collect();
        assert_eq!(select_reference(&candidates, &est).unwrap(), 0);
    }

    #[test]
    fn reference_selection_single_channel() {
        let est = ti_estimates(
            vec![HermitianMatrix::from_diagonal(&[3.0f64])],
            vec![HermitianMatrix::from_diagonal(&[1.0f64])],
        );
        let spec = BeamformerSpec {
            family: BeamformerFamily::Mvdr,
            time_mode: TimeMode::TimeInvariant,
            reference: Reference::Automatic,
        };
        let filter = build_filter(&spec, &est).unwrap();
        assert_eq!(filter.reference, 0);
    }

    #[test]
    fn reference_selection_invariant_to_common_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let p: Vec<_> = (0..3).map(|_| random_psd(2, &mut rng)).collect();
            let q: Vec<_> = (0..3).map(|_| random_psd(2, &mut rng)).collect();
            let est = ti_estimates(p.clone(), q.clone());
            let scale = 12.75;
            let est_scaled = ti_estimates(
                p.iter().map(|m| m.scaled(scale)).collect(),
                q.iter().map(|m| m.scaled(scale)).collect(),
            );
            for family in [
                BeamformerFamily::FullRankWf,
                BeamformerFamily::Rank1Wf,
                BeamformerFamily::Mvdr,
            ] {
                let cands: Vec<_> = (0..2)
                    .map(|m| {
                        build_filter_with_reference(family, TimeMode::TimeInvariant, &est, m)
                            .unwrap()
                    })
                    .collect();
                let cands_scaled: Vec<_> = (0..2)
                    .map(|m| {
                        build_filter_with_reference(
                            family,
                            TimeMode::TimeInvariant,
                            &est_scaled,
                            m,
                        )
                        .unwrap()
                    })
                    .collect();
                assert_eq!(
                    select_reference(&cands, &est).unwrap(),
                    select_reference(&cands_scaled, &est_scaled).unwrap()
                );
            }
        }
    }

    #[test]
    fn apply_unit_filter_picks_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut data = NdArray3::zeros((3, 4, 2));
        for f in 0..3 {
            for t in 0..4 {
                for ch in 0..2 {
                    data[[f, t, ch]] = C64::new(rng.gen::<f64>(), rng.gen::<f64>());
                }
            }
        }
        let x = Spectrogram::from_parts(data.clone(), 4, 2, 16000).unwrap();
        let mut w = Array2::zeros((3, 2));
        for f in 0..3 {
            w[[f, 0]] = C64::new(1.0, 0.0);
        }
        let field = BeamformerFilterField {
            reference: 0,
            weights: FilterWeights::TimeInvariant(w),
        };
        let out = apply_filter(&field, &x).unwrap();
        for f in 0..3 {
            for t in 0..4 {
                assert_eq!(out.data()[[f, t, 0]], data[[f, t, 0]]);
            }
        }

        // Zero filter gives zero output.
        let field = BeamformerFilterField {
            reference: 0,
            weights: FilterWeights::TimeInvariant(Array2::zeros((3, 2))),
        };
        let out = apply_filter(&field, &x).unwrap();
        assert!(out.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn mvdr_passes_speech_image_undistorted() {
        // Speech-only scene x_ft = p_f s_ft: the MVDR output equals the
        // reference-channel speech image p_m s_ft.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let m = 3;
        let num_freqs = 5;
        let num_frames = 6;
        let reference = 2;
        let mut steer = Vec::new();
        let mut p_field = Vec::new();
        for _ in 0..num_freqs {
            let p = random_unit(m, &mut rng);
            p_field.push(HermitianMatrix::from_outer(p.view()).scaled(1.7));
            steer.push(p);
        }
        let q_field: Vec<_> = (0..num_freqs).map(|_| random_psd(m, &mut rng)).collect();
        let est = ti_estimates(p_field, q_field);
        let filter = build_filter_with_reference(
            BeamformerFamily::Mvdr,
            TimeMode::TimeInvariant,
            &est,
            reference,
        )
        .unwrap();

        let mut data = NdArray3::zeros((num_freqs, num_frames, m));
        let mut s = Array2::zeros((num_freqs, num_frames));
        for f in 0..num_freqs {
            for t in 0..num_frames {
                let v = C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 2.0;
                s[[f, t]] = v;
                for ch in 0..m {
                    data[[f, t, ch]] = steer[f][ch] * v;
                }
            }
        }
        let x = Spectrogram::from_parts(data, (num_freqs - 1) * 2, 2, 16000).unwrap();
        let out = apply_filter(&filter, &x).unwrap();
        // The extracted steering may differ from the planted one by a phase;
        // the product w^H p_planted s still equals p_planted[m] s.
        for f in 0..num_freqs {
            for t in 0..num_frames {
                let expect = steer[f][reference] * s[[f, t]];
                let got = out.data()[[f, t, 0]];
                assert!(
                    (got - expect).norm() <= 1e-6 * expect.norm().max(1e-12),
                    "bin ({f},{t}): {got} vs {expect}"
                );
            }
        }
    }
}
