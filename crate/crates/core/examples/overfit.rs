//! Overfits eight synthetic utterances and prints the training CER.

use std::time::Instant;

use cfvsr::data_synth::{generate_corpus, SynthConfig};
use cfvsr::linguistics::{Lexicon, LinguisticInventory};
use cfvsr::trainer::{corpus_cer, LogLine, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inv = LinguisticInventory::bundled();
    let lexicon = Lexicon::bundled(&inv).truncated(12);
    let synth = SynthConfig {
        num_utterances: 8,
        char_vocab_size: 12,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&synth, &inv, &lexicon)?;
    let mut cfg = TrainConfig {
        epochs_phase1: 0,
        epochs_phase2: 300,
        batch_size: 8,
        lr_phase2: 3e-3,
        warmup_steps: 20,
        time_mask_prob: 0.0,
        cer_sample: 0,
        ..TrainConfig::default()
    };
    cfg.model.num_chars = lexicon.len();
    cfg.model.input_dim = synth.feature_dim;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, &corpus, &inv)?;
    trainer.run(|_, lines| {
        if let Some(LogLine::Step(s)) = lines.first() {
            if s.step % 50 == 0 || s.step == 1 {
                println!("step {:4}  total {:.4}  char_ctc {:.4}  {:.1}s", s.step, s.total, s.char_ctc, start.elapsed().as_secs_f64());
            }
        }
        Ok(())
    })?;
    let cer = corpus_cer(&trainer.state().model, &corpus, 8)?;
    println!("training CER {cer:.4} after {} steps ({:.1}s)", trainer.state().step, start.elapsed().as_secs_f64());
    Ok(())
}
