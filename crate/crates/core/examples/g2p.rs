//! Converts text to phoneme and viseme rows, then prints the mapping
//! matrix for the first character's frames.

use cfvsr::cli::format_g2p;
use cfvsr::linguistics::{build_mapping_matrix, text_to_labels, Lexicon, LinguisticInventory};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inv = LinguisticInventory::bundled();
    let lexicon = Lexicon::bundled(&inv);
    let text = std::env::args().nth(1).unwrap_or_else(|| "国务院".to_string());
    let labels = text_to_labels(&text, &lexicon, &inv)?;
    print!("{}", format_g2p(&labels, &lexicon, &inv));

    // M[i][j] = 1 when phoneme j is rendered by viseme i
    let m = build_mapping_matrix(&labels.visemes, &labels.phonemes, &inv)?;
    println!("\nmapping matrix ({} ones)", m.count_ones());
    for i in 0..m.size() {
        let row: String = m.row(i).iter().map(|&b| if b { '1' } else { '.' }).collect();
        println!("{:>3} {row}", labels.visemes[i]);
    }
    println!("\n{}", inv.format_frequency_table(inv.printed_frequency()));
    Ok(())
}
