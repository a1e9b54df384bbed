mod support;

use emofilm::efilm::{apply_film, generate, DecodeMode, EFiLMModel, ModulationVariant};
use emofilm::{tts_loss, Matrix, TtsBatch};
use support::*;

#[test]
fn zero_initialized_modulation_matches_variant_none_bit_for_bit() {
    for variant in [ModulationVariant::Film, ModulationVariant::Addition] {
        let cfg = micro_efilm(variant);
        let ex = micro_example(&cfg);
        let mut m = EFiLMModel::<f64>::new(cfg, 21).unwrap();
        let with = m.forward(&ex.text_tokens, ex.emotion.as_deref(), &ex.decoder_inputs).unwrap();
        m.set_variant(ModulationVariant::None);
        let without = m.forward(&ex.text_tokens, ex.emotion.as_deref(), &ex.decoder_inputs).unwrap();
        assert_eq!(with, without);
    }
}

#[test]
fn forced_film_parameters_reproduce_the_modulation_formula() {
    let h = Matrix::from_vec(1, 2, vec![1.0, 2.0]);
    let out = apply_film(&h, &Matrix::from_vec(1, 2, vec![2.0, 0.5]), &Matrix::from_vec(1, 2, vec![1.0, -1.0])).unwrap();
    assert_eq!(out.as_slice(), &[3.0, 0.0]);

    // Same arithmetic through the model: bias of the FiLM projection set to (γ-1, β).
    let cfg = micro_efilm(ModulationVariant::Film);
    let mut m = EFiLMModel::<f64>::new(cfg, 1).unwrap();
    let bias = m.params_mut().get_mut("film.bias").unwrap();
    for k in 0..8 {
        bias.set(0, k, if k % 2 == 0 { 1.0 } else { -0.5 });
        bias.set(0, 8 + k, if k % 2 == 0 { 1.0 } else { -1.0 });
    }
    let h = Matrix::from_vec(1, 8, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    let fused = Matrix::from_vec(1, 8, vec![0.4; 8]);
    assert_eq!(m.film(&h, &fused).unwrap().as_slice(), &[3.0, 0.0, 3.0, 0.0, 3.0, 0.0, 3.0, 0.0]);
}

#[test]
fn decoder_is_causal_under_teacher_forcing() {
    let cfg = micro_efilm(ModulationVariant::Film);
    let mut m = EFiLMModel::<f64>::new(cfg.clone(), 4).unwrap();
    randomize(m.params_mut(), "film", 0.3, 2);
    let text = [0, 1, 2, 3];
    let inputs = vec![cfg.bos(), 3, 7, 11, 2];
    let base = m.forward(&text, None, &inputs).unwrap();
    for t in 0..inputs.len() - 1 {
        let mut changed = inputs.clone();
        changed[t + 1] = (changed[t + 1] + 5) % cfg.speech_vocab();
        let out = m.forward(&text, None, &changed).unwrap();
        for s in 0..inputs.len() {
            let same = out.speech_logits.row(s) == base.speech_logits.row(s)
                && out.emotion_logits.row(s) == base.emotion_logits.row(s);
            assert_eq!(same, s <= t, "target {t} perturbed, step {s}");
        }
    }
}

#[test]
fn unsmoothed_loss_is_mean_cross_entropy() {
    let logits = vec![Matrix::from_vec(2, 3, vec![0.3, -1.0, 2.0, 1.5, 0.0, -0.5])];
    let batch = TtsBatch { targets: vec![vec![2, 0]], emotion_labels: vec![vec![0, 0]], vocab: 3, categories: 5 };
    let ce = |row: &[f64], y: usize| -> f64 {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        -(row[y].exp() / z).ln()
    };
    let expected = (ce(logits[0].row(0), 2) + ce(logits[0].row(1), 0)) / 2.0;
    assert!((tts_loss(&logits, &batch, 0.0).unwrap() - expected).abs() < 1e-15);
}

#[test]
fn single_precision_model_runs_and_tracks_double() {
    let cfg = micro_efilm(ModulationVariant::Film);
    let ex = micro_example(&cfg);
    let m64 = EFiLMModel::<f64>::new(cfg.clone(), 6).unwrap();
    let m32 = EFiLMModel::<f32>::from_checkpoint(&m64.to_checkpoint()).unwrap();
    let a = m64.forward(&ex.text_tokens, ex.emotion.as_deref(), &ex.decoder_inputs).unwrap();
    let b = m32.forward(&ex.text_tokens, ex.emotion.as_deref(), &ex.decoder_inputs).unwrap();
    for (x, y) in a.speech_logits.as_slice().iter().zip(b.speech_logits.as_slice()) {
        assert!((x - f64::from(*y)).abs() < 1e-3);
    }
    let g = generate(&m32, &ex.text_tokens, ex.emotion.as_deref(), 6, DecodeMode::Greedy).unwrap();
    assert!(g.tokens.len() <= 6);
}
