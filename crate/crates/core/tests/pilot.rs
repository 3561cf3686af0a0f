//! Temporary pilot measurement (will be replaced by the acceptance suite).
use ubeam_core::beamform::{BeamformerFamily, BeamformerSpec, Reference};
use ubeam_core::harness::{si_sdr, synth_scene, SceneSpec, SceneTruth};
use ubeam_core::pipeline::{enhance_offline, EnhanceConfig};
use ubeam_core::spatial::TimeMode;

#[test]
#[ignore]
fn pilot_zero_db_scene() {
    for seed in [1u64, 2, 3] {
        let spec = SceneSpec::new(4, 2, 0.0, 4.0, seed);
        let scene: SceneTruth<f64> = synth_scene(&spec).unwrap();
        for family in [BeamformerFamily::Mvdr, BeamformerFamily::FullRankWf] {
            let cfg = EnhanceConfig::<f64> {
                num_bases: 12,
                offline_iterations: 40,
                ilrma_iterations: 30,
                seed,
                beamformer: BeamformerSpec {
                    family,
                    time_mode: TimeMode::TimeInvariant,
                    reference: Reference::Automatic,
                },
                ..EnhanceConfig::default()
            };
            let t0 = std::time::Instant::now();
            let (out, summary) = enhance_offline(&scene.mixture, &cfg).unwrap();
            let m = summary.reference;
            let len = out.len();
            let reference: Vec<f64> = scene.images[0].channel(m).to_vec()[..len].to_vec();
            let estimate: Vec<f64> = out.channel(0).to_vec();
            let mix_ref: Vec<f64> = scene.mixture.channel(m).to_vec()[..len].to_vec();
            let sdr_out = si_sdr(&reference, &estimate).unwrap();
            let sdr_in = si_sdr(&reference, &mix_ref).unwrap();
            eprintln!(
                "seed {seed} {family:?}: in {sdr_in:.2} dB -> out {sdr_out:.2} dB (improvement {:.2}, ref {m}, {:.1}s)",
                sdr_out - sdr_in, t0.elapsed().as_secs_f64()
            );
        }
    }
}
