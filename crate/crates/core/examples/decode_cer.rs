//! Greedy and prefix beam decoding of a hand-made posteriorgram, and CER
//! scoring of the printed hypothesis rows.

use cfvsr::decode_metrics::{cer, ctc_beam_decode, ctc_greedy_decode};
use cfvsr::diffcore::Array;
use cfvsr::verify::{TABLE_VI, TABLE_VI_REFERENCE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // blank, a, b; frames favour a a _ b with an uncertain middle
    let probs = [
        [0.1, 0.8, 0.1],
        [0.3, 0.6, 0.1],
        [0.5, 0.4, 0.1],
        [0.2, 0.1, 0.7],
    ];
    let logits = Array::new(&[4, 3], probs.iter().flatten().map(|p: &f64| p.ln()).collect())?;
    println!("greedy {:?}", ctc_greedy_decode(&logits));
    for h in ctc_beam_decode(&logits, 4) {
        println!("beam   {:?}  p = {:.4}", h.tokens, h.score.exp());
    }

    let reference: Vec<char> = TABLE_VI_REFERENCE.chars().collect();
    println!("\nreference {TABLE_VI_REFERENCE}");
    for (config, hyp, _) in TABLE_VI {
        let h: Vec<char> = hyp.chars().collect();
        let r = cer(&reference, &h)?;
        println!(
            "{config:6} {hyp}  S {} D {} I {}  CER {:.4}",
            r.substitutions, r.deletions, r.insertions, r.cer
        );
    }
    Ok(())
}
