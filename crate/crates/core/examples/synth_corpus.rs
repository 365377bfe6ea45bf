//! Generates a corpus with the viseme prior, writes it as a manifest and
//! reads it back, then compares viseme shares with the prior.

use cfvsr::data_synth::{empirical_viseme_frequency, generate_corpus, read_manifest, write_manifest, SynthConfig};
use cfvsr::linguistics::{Lexicon, LinguisticInventory};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inv = LinguisticInventory::bundled();
    let lexicon = Lexicon::bundled(&inv);
    let cfg = SynthConfig {
        num_utterances: 2000,
        char_vocab_size: lexicon.len(),
        viseme_prior: true,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg, &inv, &lexicon)?;
    let u = &corpus[0];
    println!("{}: {} frames, text {}", u.id, u.frames(), lexicon.text_of(&u.labels.chars));
    println!("  frame visemes {:?}", u.frame_visemes);

    let dir = std::env::temp_dir().join("cfvsr-synth-example");
    write_manifest(&dir, &corpus)?;
    assert_eq!(read_manifest(&dir, &inv)?, corpus);
    println!("manifest round trip ok ({})", dir.display());

    let tokens: usize = corpus.iter().map(|u| u.labels.phonemes.len()).sum();
    println!("\n{tokens} phoneme tokens\nviseme  prior   empirical");
    let freq = empirical_viseme_frequency(&corpus, &inv);
    for v in 1..inv.num_visemes() {
        println!("{v:>6}  {:6.2}%  {:6.2}%", 100.0 * inv.viseme_frequency()[v], 100.0 * freq[v]);
    }
    Ok(())
}
