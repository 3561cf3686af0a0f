//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Analysis uses a periodic Hamming window; frame t covers samples
//! [t*hop, t*hop + window_len) with no center padding, and a trailing
//! partial frame is dropped. Synthesis overlap-adds windowed inverse
//! transforms and normalizes by the accumulated squared window, so an
//! unmodified round trip reproduces the covered samples exactly.

use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::scalar::{Scalar, C};

/// Analysis window length from the reference front-end configuration.
pub const DEFAULT_WINDOW_LEN: usize = 1024;
/// Frame shift of 10 ms at 16 kHz.
pub const DEFAULT_HOP: usize = 160;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Multichannel time-domain block, shape (channels, samples).
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBlock<T: Scalar> {
    samples: Array2<T>,
    sample_rate: u32,
}

impl<T: Scalar> WaveformBlock<T> {
    pub fn new(samples: Array2<T>, sample_rate: u32) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::InvalidInput(
                "waveform must have at least one channel and one sample".into(),
            ));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        let n = samples.len();
        Self::new(
            Array2::from_shape_vec((1, n), samples).expect("shape"),
            sample_rate,
        )
    }

    pub fn num_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> ArrayView1<T> {
        self.samples.row(m)
    }

    pub fn samples(&self) -> &Array2<T> {
        &self.samples
    }

    /// Sum of squared samples over all channels.
    pub fn energy(&self) -> T {
        self.samples.iter().map(|&v| v * v).sum()
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples.slice(s![.., ..len.min(self.len())]).to_owned(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Complex spectrogram tensor, shape (freqs, frames, channels).
#[derive(Debug, Clone)]
pub struct Spectrogram<T: Scalar> {
    data: Array3<C<T>>,
    window_len: usize,
    hop: usize,
    sample_rate: u32,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn from_parts(
        data: Array3<C<T>>,
        window_len: usize,
        hop: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        if data.dim().0 != window_len / 2 + 1 {
            return Err(Error::dim_mismatch(
                format!("{} frequency bins for window {window_len}", window_len / 2 + 1),
                format!("{}", data.dim().0),
            ));
        }
        Ok(Self {
            data,
            window_len,
            hop,
            sample_rate,
        })
    }

    pub fn num_freqs(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn data(&self) -> &Array3<C<T>> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<C<T>> {
        &mut self.data
    }

    /// Multichannel bin vector x_ft.
    pub fn bin(&self, f: usize, t: usize) -> ArrayView1<C<T>> {
        self.data.slice(s![f, t, ..])
    }

    /// Number of time-domain samples the frames cover.
    pub fn covered_len(&self) -> usize {
        if self.num_frames() == 0 {
            0
        } else {
            (self.num_frames() - 1) * self.hop + self.window_len
        }
    }

    /// Copy of the frame range [start, end) as its own spectrogram.
    pub fn frame_slice(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data.slice(s![.., start..end, ..]).to_owned(),
            window_len: self.window_len,
            hop: self.hop,
            sample_rate: self.sample_rate,
        }
    }
}

/// Periodic Hamming window: 0.54 - 0.46 cos(2 pi n / N).
pub fn hamming_window<T: Scalar>(len: usize) -> Array1<T> {
    let n = T::of_usize(len);
    Array1::from_iter((0..len).map(|i| {
        T::of(0.54) - T::of(0.46) * (T::of(2.0) * T::PI() * T::of_usize(i) / n).cos()
    }))
}

/// Forward multichannel STFT.
pub fn stft_forward<T: Scalar>(
    w: &WaveformBlock<T>,
    window_len: usize,
    hop: usize,
) -> Result<Spectrogram<T>> {
    if window_len == 0 || window_len % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "window length must be even and positive, got {window_len}"
        )));
    }
    if hop == 0 || hop > window_len {
        return Err(Error::InvalidInput(format!(
            "hop must satisfy 0 < hop <= window length, got hop {hop} window {window_len}"
        )));
    }
    if w.len() < window_len {
        return Err(Error::InvalidInput(format!(
            "signal of {} samples is shorter than one window of {window_len}",
            w.len()
        )));
    }
    let num_frames = (w.len() - window_len) / hop + 1;
    let num_freqs = window_len / 2 + 1;
    let channels = w.num_channels();
    let window = hamming_window::<T>(window_len);

    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(window_len);
    let mut buf = vec![C::new(T::zero(), T::zero()); window_len];
    let mut scratch = vec![C::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];

    let mut data = Array3::zeros((num_freqs, num_frames, channels));
    for m in 0..channels {
        let chan = w.channel(m);
        for t in 0..num_frames {
            let start = t * hop;
            for i in 0..window_len {
                buf[i] = C::new(chan[start + i] * window[i], T::zero());
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..num_freqs {
                data[[f, t, m]] = buf[f];
            }
        }
    }
    Spectrogram::from_parts(data, window_len, hop, w.sample_rate())
}

/// Inverse multichannel STFT by weighted overlap-add.
pub fn stft_inverse<T: Scalar>(s: &Spectrogram<T>) -> Result<WaveformBlock<T>> {
    if s.num_frames() == 0 {
        return Err(Error::InvalidInput("spectrogram has no frames".into()));
    }
    let channels = s.num_channels();
    let out_len = s.covered_len();
    let mut samples = Array2::zeros((channels, out_len));
    for m in 0..channels {
        let mut stream = OverlapAddStream::new(s.window_len(), s.hop())?;
        let mut frame = vec![C::new(T::zero(), T::zero()); s.num_freqs()];
        let mut written = 0;
        for t in 0..s.num_frames() {
            for f in 0..s.num_freqs() {
                frame[f] = s.data()[[f, t, m]];
            }
            stream.push_frame(&frame)?;
            for v in stream.drain_ready()? {
                samples[[m, written]] = v;
                written += 1;
            }
        }
        for v in stream.finish()? {
            samples[[m, written]] = v;
            written += 1;
        }
        debug_assert_eq!(written, out_len);
    }
    WaveformBlock::new(samples, s.sample_rate())
}

/// Incremental single-channel overlap-add synthesizer. Frames are pushed in
/// order; a sample becomes available once no future frame can touch it, so
/// pushing frame t releases samples up to (t+1)*hop. The batch-mode inverse
/// is built on this same accumulator, keeping offline and streaming
/// resynthesis arithmetic identical.
pub struct OverlapAddStream<T: Scalar> {
    window: Array1<T>,
    window_len: usize,
    hop: usize,
    num_freqs: usize,
    acc: Vec<T>,
    win_acc: Vec<T>,
    /// Absolute sample index of acc[0].
    base: usize,
    frames_pushed: usize,
    emitted: usize,
    fft: std::sync::Arc<dyn rustfft::Fft<T>>,
    buf: Vec<C<T>>,
    scratch: Vec<C<T>>,
}

impl<T: Scalar> OverlapAddStream<T> {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        if window_len == 0 || window_len % 2 != 0 || hop == 0 || hop > window_len {
            return Err(Error::Config(format!(
                "invalid synthesis configuration: window {window_len}, hop {hop}"
            )));
        }
        let mut planner = FftPlanner::<T>::new();
        let fft = planner.plan_fft_inverse(window_len);
        let scratch_len = fft.get_inplace_scratch_len();
        Ok(Self {
            window: hamming_window::<T>(window_len),
            window_len,
            hop,
            num_freqs: window_len / 2 + 1,
            acc: Vec::new(),
            win_acc: Vec::new(),
            base: 0,
            frames_pushed: 0,
            emitted: 0,
            fft,
            buf: vec![C::new(T::zero(), T::zero()); window_len],
            scratch: vec![C::new(T::zero(), T::zero()); scratch_len],
        })
    }

    /// Overlap-adds one spectral frame (window_len/2 + 1 bins).
    pub fn push_frame(&mut self, frame: &[C<T>]) -> Result<()> {
        if frame.len() != self.num_freqs {
            return Err(Error::dim_mismatch(
                format!("{} bins", self.num_freqs),
                format!("{}", frame.len()),
            ));
        }
        let n = self.window_len;
        self.buf[..self.num_freqs].copy_from_slice(frame);
        // Rebuild the negative-frequency half by conjugate symmetry.
        for f in 1..(n / 2) {
            self.buf[n - f] = frame[f].conj();
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);

        let start = self.frames_pushed * self.hop;
        let needed = start + n - self.base;
        if self.acc.len() < needed {
            self.acc.resize(needed, T::zero());
            self.win_acc.resize(needed, T::zero());
        }
        let inv_n = T::one() / T::of_usize(n);
        let offset = start - self.base;
        for i in 0..n {
            let w = self.window[i];
            self.acc[offset + i] += self.buf[i].re * inv_n * w;
            self.win_acc[offset + i] += w * w;
        }
        self.frames_pushed += 1;
        Ok(())
    }

    /// Samples finalized by the frames pushed so far.
    pub fn drain_ready(&mut self) -> Result<Vec<T>> {
        let ready_until = self.frames_pushed * self.hop;
        self.take_until(ready_until)
    }

    /// Remaining samples through the end of the last pushed frame.
    pub fn finish(mut self) -> Result<Vec<T>> {
        if self.frames_pushed == 0 {
            return Ok(Vec::new());
        }
        let end = (self.frames_pushed - 1) * self.hop + self.window_len;
        self.take_until(end)
    }

    fn take_until(&mut self, end: usize) -> Result<Vec<T>> {
        let mut out = Vec::new();
        while self.emitted < end {
            let idx = self.emitted - self.base;
            let den = self.win_acc[idx];
            if den <= T::min_positive_value() {
                return Err(Error::Config(format!(
                    "overlap-add normalization vanished at sample {}",
                    self.emitted
                )));
            }
            out.push(self.acc[idx] / den);
            self.emitted += 1;
        }
        // Drop fully emitted prefix to keep the buffers bounded.
        let drop = self.emitted - self.base;
        if drop > 4 * self.window_len {
            self.acc.drain(..drop);
            self.win_acc.drain(..drop);
            self.base = self.emitted;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    fn tone(freq_hz: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| (2.0 * std::f64::consts::PI * freq_hz * i as f64 / 16000.0).sin())
            .collect()
    }

    fn interior_rel_rms(a: &[f64], b: &[f64], margin: usize) -> f64 {
        let lo = margin;
        let hi = a.len().min(b.len()).saturating_sub(margin);
        let mut err = 0.0;
        let mut nrm = 0.0;
        for i in lo..hi {
            err += (a[i] - b[i]).powi(2);
            nrm += a[i].powi(2);
        }
        (err / nrm.max(1e-300)).sqrt()
    }

    #[test]
    fn zero_in_zero_out() {
        let w = WaveformBlock::mono(vec![0.0f64; 4000], 16000).unwrap();
        let s = stft_forward(&w, 1024, 160).unwrap();
        assert!(s.data().iter().all(|v| v.norm() == 0.0));
        let back = stft_inverse(&s).unwrap();
        assert!(back.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_frame_zero_is_flat() {
        let mut x = vec![0.0f64; 2048];
        x[0] = 1.0;
        let w = WaveformBlock::mono(x, 16000).unwrap();
        let s = stft_forward(&w, 1024, 160).unwrap();
        let w0 = hamming_window::<f64>(1024)[0];
        for f in 0..s.num_freqs() {
            let mag = s.data()[[f, 0, 0]].norm();
            assert!(
                (mag - w0).abs() < 1e-12,
                "bin {f}: |S| = {mag}, expected {w0}"
            );
        }
    }

    #[test]
    fn sinusoid_peaks_at_its_bin() {
        // Bin-16 center frequency for window 1024 at 16 kHz: 16 * 16000/1024 Hz.
        let freq = 16.0 * 16000.0 / 1024.0;
        let w = WaveformBlock::mono(tone(freq, 16000), 16000).unwrap();
        let s = stft_forward(&w, 1024, 160).unwrap();
        let t = s.num_frames() / 2;
        let mut best = (0usize, 0.0f64);
        for f in 0..s.num_freqs() {
            let mag = s.data()[[f, t, 0]].norm();
            if mag > best.1 {
                best = (f, mag);
            }
        }
        assert_eq!(best.0, 16, "peak bin");
    }

    #[test]
    fn roundtrip_noise() {
        let x = noise(16000, 42);
        let w = WaveformBlock::mono(x.clone(), 16000).unwrap();
        let s = stft_forward(&w, 1024, 160).unwrap();
        let back = stft_inverse(&s).unwrap();
        let y: Vec<f64> = back.channel(0).to_vec();
        let err = interior_rel_rms(&x, &y, 1024);
        assert!(err <= 1e-6, "interior relative RMS {err}");
    }

    #[test]
    fn roundtrip_tone() {
        let x = tone(440.0, 16000);
        let w = WaveformBlock::mono(x.clone(), 16000).unwrap();
        let s = stft_forward(&w, 1024, 160).unwrap();
        let back = stft_inverse(&s).unwrap();
        let y: Vec<f64> = back.channel(0).to_vec();
        let err = interior_rel_rms(&x, &y, 1024);
        assert!(err <= 1e-6, "interior relative RMS {err}");
    }

    #[test]
    fn linearity() {
        let xa = noise(8000, 1);
        let xb = noise(8000, 2);
        let combined: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| 0.7 * a - 1.3 * b).collect();
        let sa = stft_forward(&WaveformBlock::mono(xa, 16000).unwrap(), 1024, 160).unwrap();
        let sb = stft_forward(&WaveformBlock::mono(xb, 16000).unwrap(), 1024, 160).unwrap();
        let sc = stft_forward(&WaveformBlock::mono(combined, 16000).unwrap(), 1024, 160).unwrap();
        let mut max_err = 0.0f64;
        let mut scale = 0.0f64;
        for f in 0..sc.num_freqs() {
            for t in 0..sc.num_frames() {
                let expect = sa.data()[[f, t, 0]] * 0.7 - sb.data()[[f, t, 0]] * 1.3;
                max_err = max_err.max((sc.data()[[f, t, 0]] - expect).norm());
                scale = scale.max(expect.norm());
            }
        }
        assert!(max_err <= 1e-10 * scale, "linearity error {max_err} vs scale {scale}");
    }

    #[test]
    fn channels_are_independent() {
        let xa = noise(4000, 3);
        let xb = noise(4000, 4);
        let mut two = Array2::zeros((2, 4000));
        for i in 0..4000 {
            two[[0, i]] = xa[i];
            two[[1, i]] = xb[i];
        }
        let s2 = stft_forward(&WaveformBlock::new(two, 16000).unwrap(), 1024, 160).unwrap();
        let s_a = stft_forward(&WaveformBlock::mono(xa, 16000).unwrap(), 1024, 160).unwrap();
        for f in 0..s2.num_freqs() {
            for t in 0..s2.num_frames() {
                assert_eq!(s2.data()[[f, t, 0]], s_a.data()[[f, t, 0]]);
            }
        }
    }

    #[test]
    fn short_signal_rejected() {
        let w = WaveformBlock::mono(vec![0.0f64; 512], 16000).unwrap();
        assert!(matches!(
            stft_forward(&w, 1024, 160),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn frame_count_and_coverage() {
        let w = WaveformBlock::mono(vec![0.0f64; 16000], 16000).unwrap();
        let s = stft_forward(&w, 1024, 160).unwrap();
        assert_eq!(s.num_frames(), (16000 - 1024) / 160 + 1);
        assert_eq!(s.covered_len(), (s.num_frames() - 1) * 160 + 1024);
        assert!(s.covered_len() <= 16000);
    }
}
