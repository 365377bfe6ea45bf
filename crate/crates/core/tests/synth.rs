use cfvsr::data_synth::{generate_corpus, read_manifest, write_manifest, Codebook, SynthConfig};
use cfvsr::linguistics::{Lexicon, LinguisticInventory};

fn frame_error(cfg: &SynthConfig, inv: &LinguisticInventory, lex: &Lexicon) -> f64 {
    let corpus = generate_corpus(cfg, inv, lex).unwrap();
    let book = Codebook::generate(cfg, inv);
    let (mut wrong, mut total) = (0usize, 0usize);
    for u in &corpus {
        let guess = book.classify(&u.features);
        wrong += guess.iter().zip(&u.frame_phonemes).filter(|(a, b)| a != b).count();
        total += guess.len();
    }
    wrong as f64 / total as f64
}

#[test]
fn more_noise_means_more_frame_errors() {
    let inv = LinguisticInventory::bundled();
    let lex = Lexicon::bundled(&inv);
    for seed in [100, 101, 102] {
        let errs: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&noise_std| {
                let cfg = SynthConfig {
                    seed,
                    noise_std,
                    num_utterances: 40,
                    ..SynthConfig::default()
                };
                frame_error(&cfg, &inv, &lex)
            })
            .collect();
        assert_eq!(errs[0], 0.0);
        assert!(errs[0] < errs[1] && errs[1] < errs[2], "seed {seed}: {errs:?}");
    }
}

#[test]
fn frame_labels_follow_the_inventory() {
    let inv = LinguisticInventory::bundled();
    let lex = Lexicon::bundled(&inv);
    let cfg = SynthConfig {
        viseme_prior: true,
        time_mask_prob: 1.0,
        ..SynthConfig::default()
    };
    for u in generate_corpus(&cfg, &inv, &lex).unwrap() {
        assert_eq!(inv.visemes_for(&u.frame_phonemes), u.frame_visemes);
        assert_eq!(inv.visemes_for(&u.labels.phonemes), u.labels.visemes);
        assert_eq!(u.labels.phonemes.len(), u.durations.len());
    }
}

#[test]
fn manifest_round_trip_on_disk() {
    let inv = LinguisticInventory::bundled();
    let lex = Lexicon::bundled(&inv);
    let corpus = generate_corpus(&SynthConfig { num_utterances: 3, ..SynthConfig::default() }, &inv, &lex).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/data");
    write_manifest(&path, &corpus).unwrap();
    assert_eq!(read_manifest(&path, &inv).unwrap(), corpus);
    write_manifest(&path, &[]).unwrap();
    assert!(read_manifest(&path, &inv).unwrap().is_empty());
}
