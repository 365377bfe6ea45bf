//! Evaluates the CTC and alignment losses on small random inputs and
//! checks them against brute-force references.

use cfvsr::diffcore::Array;
use cfvsr::linguistics::LinguisticInventory;
use cfvsr::losses::{align_loss, ctc_loss, LossConfig};
use cfvsr::verify::oracles::{ctc_probability, dense_align_loss, AlignSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (t, k) = (5, 4);
    let logits = Array::new(&[t, k], (0..t * k).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    for target in [vec![], vec![1], vec![2, 2], vec![1, 3, 2]] {
        let nll = ctc_loss(&logits, &target)?;
        let brute = ctc_probability(&logits, &target);
        println!("target {target:?}: p = {:.12}  enumerated {:.12}", (-nll).exp(), brute);
    }

    let inv = LinguisticInventory::bundled();
    let (t, c) = (8, 6);
    let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..t).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
    let (v, p) = (rows(&mut rng), rows(&mut rng));
    let vc: Vec<usize> = (0..t).map(|_| rng.random_range(0..inv.num_visemes())).collect();
    let pc: Vec<usize> = (0..t).map(|_| rng.random_range(0..inv.num_phonemes())).collect();
    let cfg = LossConfig::default();
    let flat = |x: &[Vec<f64>]| Array::new(&[1, t, c], x.concat());
    let got = align_loss(&flat(&v)?, &flat(&p)?, &[vc.clone()], &[pc.clone()], &inv, &cfg)?;
    let sample = AlignSample {
        v: &v,
        p: &p,
        viseme_classes: &vc,
        phoneme_classes: &pc,
    };
    let want = dense_align_loss(&[sample], &inv, cfg.window_w, cfg.tau, cfg.epsilon);
    println!("\nalign loss {got:.12}  dense {want:.12}  diff {:.1e}", (got - want).abs());
    Ok(())
}
