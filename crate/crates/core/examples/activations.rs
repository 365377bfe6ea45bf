//! Trains a small model, saves and reloads the checkpoint, then decodes
//! a held-out set under each branch activation.

use cfvsr::data_synth::{generate_corpus, SynthConfig};
use cfvsr::linguistics::{Lexicon, LinguisticInventory};
use cfvsr::model::{ActivationConfig, Checkpoint, DecodeMethod};
use cfvsr::trainer::{evaluate, standard_benchmark, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inv = LinguisticInventory::bundled();
    // the benchmark's corpus and model settings, one seed
    let bench = standard_benchmark();
    let synth = SynthConfig { seed: 7, ..bench.synth };
    let lexicon = Lexicon::bundled(&inv).truncated(synth.char_vocab_size);
    let train_set = generate_corpus(&synth, &inv, &lexicon)?;
    let test_set = generate_corpus(&SynthConfig { seed: 1007, num_utterances: 64, ..synth.clone() }, &inv, &lexicon)?;
    let mut cfg = TrainConfig { seed: 7, ..bench.train };
    cfg.model.num_chars = lexicon.len();
    cfg.model.input_dim = synth.feature_dim;
    let state = train(cfg, &train_set, &inv)?;

    let path = std::env::temp_dir().join("cfvsr-activations.ckpt");
    Checkpoint::from_model(&state.model, serde_json::Value::Null).save(&path)?;
    let model = Checkpoint::load(&path)?.to_model()?;

    let out = evaluate(&model, &test_set, &lexicon, &ActivationConfig::ALL, DecodeMethod::CtcGreedy, 3)?;
    println!("config  CER     active params  seconds");
    for (s, (_, secs)) in out.summaries.iter().zip(&out.latency) {
        println!("{:6}  {:.4}  {:13}  {secs:.4}", s.activation.label(), s.cer, s.active_params);
    }
    if let Some(r) = out.records.iter().find(|r| r.branch_frames.is_some()) {
        println!("\n{}  ref {}  hyp {}", r.id, r.reference, r.hypothesis);
    }
    Ok(())
}
