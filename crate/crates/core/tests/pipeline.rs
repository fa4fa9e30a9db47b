use inr_audio::audio::{three_sine_mixture, wav_read, wav_write, AudioClip, WavFormat};
use inr_audio::fewsound::{meta_train, reconstruct_long, toy_dataset, FewSoundConfig, FewSoundState};
use inr_audio::inr::{time_grid, Arch, InrConfig};
use inr_audio::metrics::evaluate;
use inr_audio::modelfile::{load_model, load_state, save_model, save_state};
use inr_audio::trainer::{fit_inr, loss_of, TrainConfig};

#[test]
fn saved_model_reproduces_fit_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let clip = three_sine_mixture(2048, 22_050, 3);
    let train = TrainConfig {
        steps: 20,
        seed: Some(1),
        ..TrainConfig::default()
    };
    let fit = fit_inr(&clip, &InrConfig::new(Arch::Kan).with_layers(&[8, 4]), &train).unwrap();
    let path = dir.path().join("kan.ainr");
    save_model(&path, &fit.model).unwrap();
    let loaded = load_model(&path).unwrap();
    let pred = loaded.forward(&time_grid(clip.len())).unwrap();
    assert_eq!(evaluate(&clip.samples, &pred).unwrap(), fit.metrics.unwrap());
}

#[test]
fn float_wav_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let samples: Vec<f64> = (0..500).map(|i| ((i as f32) * 0.37).sin() as f64).collect();
    let clip = AudioClip::new(22_050, samples.clone(), "x").unwrap();
    wav_write(&path, &clip, WavFormat::Float32).unwrap();
    let back = wav_read(&path).unwrap();
    assert_eq!(back.sample_rate, 22_050);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.samples), bits(&samples));
}

#[test]
fn single_clip_meta_training_tracks_a_direct_fit() {
    let steps = 200;
    let cfg = FewSoundConfig {
        epochs: steps,
        batch_size: 1,
        ..FewSoundConfig::toy()
    };
    let clip = toy_dataset(1, cfg.window, 7).remove(0);
    let meta = meta_train(std::slice::from_ref(&clip), &cfg).unwrap();
    let meta_loss = meta.state.window_loss(&clip.samples, true).unwrap();
    let train = TrainConfig {
        steps,
        seed: Some(cfg.target.seed),
        ..TrainConfig::default()
    };
    let direct = fit_inr(&clip, &cfg.target, &train).unwrap();
    let direct_loss = loss_of(&direct.model, &clip, &train).unwrap();
    assert!(
        meta_loss < 2.0 * direct_loss,
        "meta {meta_loss} vs direct {direct_loss}"
    );
}

#[test]
fn state_file_roundtrip_and_long_reconstruction_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let state = FewSoundState::init(&FewSoundConfig::new(InrConfig::new(Arch::Kan))).unwrap();
    assert_eq!(state.theta().len(), 31_080);
    let path = dir.path().join("fs.ainr");
    save_state(&path, &state).unwrap();
    let state = load_state(&path).unwrap();
    for n in [1, 32_768, 50_000] {
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.01).sin() * 0.3).collect();
        assert_eq!(reconstruct_long(&state, &x).unwrap().len(), n);
    }
}
