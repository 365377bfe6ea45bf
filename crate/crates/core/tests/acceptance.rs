//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `criterion N: PASS|FAIL ...` line. Tests take a shared lock so
//! their runtime budgets are measured without competing for the CPU.

use std::fs;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use cfvsr::cli::run;
use cfvsr::data_synth::{empirical_viseme_frequency, generate_corpus, SynthConfig};
use cfvsr::decode_metrics::cer;
use cfvsr::linguistics::{Lexicon, LinguisticInventory};
use cfvsr::model::ActivationConfig;
use cfvsr::trainer::{corpus_cer, median, run_benchmark, standard_benchmark, BenchmarkRun, TrainConfig, Trainer, Variant};
use cfvsr::verify::{self, VerifyOptions, TABLE_VI_REFERENCE};

const CTC_TOL: f64 = 1e-10;
const ALIGN_TOL: f64 = 1e-10;
const LOSS_GRAD_TOL: f64 = 1e-4;
const MODEL_GRAD_TOL: f64 = 1e-3;
const MIN_GRAD_INSTANCES: usize = 50;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
const PRIOR_TOL: f64 = 0.01;
const PRIOR_PHONEMES: usize = 50_000;
const BENCHMARK_BUDGET: Duration = Duration::from_secs(600);
const OVERFIT_BUDGET: Duration = Duration::from_secs(120);
const OVERFIT_CER: f64 = 0.05;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, ok: bool, detail: impl AsRef<str>) {
    println!("criterion {n}: {} {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(ok, "criterion {n} failed: {}", detail.as_ref());
}

#[test]
fn criterion_1_ctc_matches_enumeration() {
    let _g = serial();
    let start = Instant::now();
    let r = verify::ctc_enumeration_suite(&VerifyOptions::default());
    let elapsed = start.elapsed();
    let ok = r.passed && r.max_error <= CTC_TOL && r.tolerance == CTC_TOL && elapsed < ORACLE_BUDGET;
    report(1, ok, format!("{} grid cases, max |p - brute| {:.2e} (tol {CTC_TOL:.0e}), {:.2}s", r.cases, r.max_error, elapsed.as_secs_f64()));
}

#[test]
fn criterion_2_align_matches_dense_oracle() {
    let _g = serial();
    let inv = LinguisticInventory::bundled();
    let start = Instant::now();
    let r = verify::align_dense_suite(&VerifyOptions::default(), &inv);
    let elapsed = start.elapsed();
    let ok = r.passed && r.cases == 200 && r.max_error <= ALIGN_TOL && elapsed < ORACLE_BUDGET;
    report(2, ok, format!("{} instances, max diff {:.2e} (tol {ALIGN_TOL:.0e}), {:.2}s", r.cases, r.max_error, elapsed.as_secs_f64()));
}

#[test]
fn criterion_3_gradient_checks() {
    let _g = serial();
    let inv = LinguisticInventory::bundled();
    let opts = VerifyOptions::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for r in verify::gradient_suites(&opts, &inv) {
        let tol = if r.name.contains("model") { MODEL_GRAD_TOL } else { LOSS_GRAD_TOL };
        let this = r.passed && r.max_error <= tol && r.cases >= MIN_GRAD_INSTANCES;
        ok &= this;
        lines.push(format!("{} {:.1e}/{tol:.0e} x{}", r.name, r.max_error, r.cases));
    }
    ok &= lines.len() == 5;
    report(3, ok, lines.join(", "));
}

#[test]
fn criterion_4_cer_oracle_and_table_vi() {
    let _g = serial();
    let r = verify::cer_dp_suite(&VerifyOptions::default());
    // printed hypothesis rows and CER column
    let rows = [
        ("F", "国务院督查组将陆续展开", "0.4545"),
        ("F+P", "国务院督查组将突出整改", "0.2727"),
        ("F+V", "国务院督查组将图书整改", "0.2727"),
        ("F+P+V", "国务院督查组将督促整改", "0.0909"),
    ];
    let reference: Vec<char> = TABLE_VI_REFERENCE.chars().collect();
    assert_eq!(TABLE_VI_REFERENCE, "国务院督察组将督促整改");
    let mut ok = r.passed && r.cases >= 1000;
    let mut got = Vec::new();
    for (name, hyp, printed) in rows {
        let h: Vec<char> = hyp.chars().collect();
        let value = format!("{:.4}", cer(&reference, &h).unwrap().cer);
        ok &= value == printed;
        got.push(format!("{name} {value}"));
    }
    report(4, ok, format!("{} random pairs exact; {}", r.cases, got.join(", ")));
}

#[test]
fn criterion_5_table_i_fidelity() {
    let _g = serial();
    let inv = LinguisticInventory::bundled();
    // viseme id, printed frequency, IPA members
    let table: [(usize, &str, &[&str]); 16] = [
        (0, "N/A", &["_"]),
        (1, "0.01%", &["ʔ"]),
        (2, "3.08%", &["p", "pʰ", "m"]),
        (3, "1.34%", &["f"]),
        (4, "15.30%", &["t", "tʰ", "n", "l"]),
        (5, "12.91%", &["k", "kʰ", "x", "ŋ"]),
        (6, "7.34%", &["tɕ", "tɕʰ", "ɕ"]),
        (7, "8.00%", &["ʈʂ", "ʈʂʰ", "ʂ", "ʐ"]),
        (8, "2.32%", &["ts", "tsʰ", "s"]),
        (9, "8.81%", &["ɑ"]),
        (10, "11.43%", &["e", "o", "ə", "ɚ"]),
        (11, "15.56%", &["ɪ", "z̩", "ʐ̩"]),
        (12, "7.81%", &["ʊ"]),
        (13, "0.69%", &["y"]),
        (14, "2.36%", &["aʲ", "eʲ"]),
        (15, "3.02%", &["aʷ", "oʷ"]),
    ];
    let mut ok = inv.num_visemes() == 16;
    for (id, freq, members) in table {
        let got: Vec<&str> = inv.viseme_members(id).iter().map(|&p| inv.phoneme_symbol(p)).collect();
        let printed = inv.printed_frequency()[id];
        let got_freq = if id == 0 { "N/A".to_string() } else { format!("{:.2}%", 100.0 * printed) };
        if got != members || got_freq != freq {
            ok = false;
            println!("row {id}: got {got:?} {got_freq}, want {members:?} {freq}");
        }
    }

    let lexicon = Lexicon::bundled(&inv);
    let mut cfg = SynthConfig {
        seed: 2024,
        char_vocab_size: lexicon.len(),
        viseme_prior: true,
        num_utterances: 1,
        ..SynthConfig::default()
    };
    // scale the corpus until it holds at least 50k phoneme tokens
    let probe = generate_corpus(&SynthConfig { num_utterances: 200, ..cfg.clone() }, &inv, &lexicon).unwrap();
    let per_utt = probe.iter().map(|u| u.labels.phonemes.len()).sum::<usize>() as f64 / 200.0;
    cfg.num_utterances = (1.1 * PRIOR_PHONEMES as f64 / per_utt).ceil() as usize;
    let corpus = generate_corpus(&cfg, &inv, &lexicon).unwrap();
    let tokens: usize = corpus.iter().map(|u| u.labels.phonemes.len()).sum();
    ok &= tokens >= PRIOR_PHONEMES;
    let emp = empirical_viseme_frequency(&corpus, &inv);
    let worst = (1..16)
        .map(|v| (v, (emp[v] - inv.viseme_frequency()[v]).abs()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    ok &= worst.1 <= PRIOR_TOL;
    report(
        5,
        ok,
        format!("16 rows match; {tokens} phonemes, worst viseme {} off by {:.2} pp (tol 1 pp)", worst.0, 100.0 * worst.1),
    );
}

struct Bench {
    runs: Vec<BenchmarkRun>,
    elapsed: Duration,
}

fn benchmark() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let inv = LinguisticInventory::bundled();
        let lexicon = Lexicon::bundled(&inv);
        let start = Instant::now();
        let runs = run_benchmark(&standard_benchmark(), &inv, &lexicon, |r| {
            println!("  {} seed {} test CER {:.4}", r.variant.name(), r.seed, r.test_cer);
        })
        .unwrap();
        Bench {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

fn variant_median(runs: &[BenchmarkRun], v: Variant) -> f64 {
    median(&runs.iter().filter(|r| r.variant == v).map(|r| r.test_cer).collect::<Vec<_>>())
}

#[test]
fn criterion_6_ablation_direction() {
    let _g = serial();
    let b = benchmark();
    let full = variant_median(&b.runs, Variant::Full);
    let no_align = variant_median(&b.runs, Variant::DisableAlign);
    let no_branches = variant_median(&b.runs, Variant::DisableBranches);
    let seeds = standard_benchmark().seeds.len();
    let ok = seeds == 5 && full < no_align && no_align < no_branches && b.elapsed < BENCHMARK_BUDGET;
    report(
        6,
        ok,
        format!(
            "median CER full {full:.4} < disable_align {no_align:.4} < disable_branches {no_branches:.4}, {seeds} seeds, {:.0}s",
            b.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_activation_trade_off() {
    let _g = serial();
    let b = benchmark();
    let full: Vec<&BenchmarkRun> = b.runs.iter().filter(|r| r.variant == Variant::Full).collect();
    let stat = |act: ActivationConfig, f: fn(&cfvsr::trainer::ActivationResult) -> f64| {
        median(
            &full
                .iter()
                .map(|r| f(r.activations.iter().find(|a| a.activation == act).unwrap()))
                .collect::<Vec<_>>(),
        )
    };
    let cer_of = |act| stat(act, |a| a.cer);
    let secs_of = |act| stat(act, |a| a.wall_clock_secs);
    let params = |act: ActivationConfig| {
        full[0].activations.iter().find(|a| a.activation == act).unwrap().active_params
    };
    use ActivationConfig as A;
    let mut ok = cer_of(A::FPV) <= cer_of(A::F);
    ok &= params(A::F) < params(A::FP) && params(A::F) < params(A::FV);
    ok &= params(A::FP) < params(A::FPV) && params(A::FV) < params(A::FPV);
    let mut by_params = A::ALL.to_vec();
    by_params.sort_by_key(|&a| params(a));
    let times: Vec<f64> = by_params.iter().map(|&a| secs_of(a)).collect();
    ok &= times.windows(2).all(|w| w[0] <= w[1]);
    let table: Vec<String> = by_params
        .iter()
        .map(|&a| format!("{} cer {:.4} params {} {:.4}s", a.label(), cer_of(a), params(a), secs_of(a)))
        .collect();
    report(7, ok, table.join("; "));
}

#[test]
fn criterion_8_overfit() {
    let _g = serial();
    let inv = LinguisticInventory::bundled();
    let lexicon = Lexicon::bundled(&inv).truncated(12);
    let synth = SynthConfig {
        num_utterances: 8,
        char_vocab_size: 12,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&synth, &inv, &lexicon).unwrap();
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
    let mut t = Trainer::new(cfg, &corpus, &inv).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let elapsed = start.elapsed();
    let steps = t.state().step;
    let value = corpus_cer(&t.state().model, &corpus, 8).unwrap();
    let ok = steps == 300 && value < OVERFIT_CER && elapsed < OVERFIT_BUDGET;
    report(8, ok, format!("training CER {value:.4} after {steps} steps (tol {OVERFIT_CER}), {:.1}s", elapsed.as_secs_f64()));
}

fn cli(args: &[&str]) -> i32 {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    run(std::iter::once("cfvsr").chain(args.iter().copied()), &mut out, &mut err)
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.toml");
    fs::write(
        &cfg_path,
        "[synth]\nnum_utterances = 16\nchar_vocab_size = 8\n\n[train]\nepochs_phase1 = 2\nepochs_phase2 = 2\ntime_mask_prob = 1.0\n\n\
         [train.model]\nfeature_dim = 16\nffn_dim = 32\n\n[eval]\ntest_utterances = 8\ntiming_repeats = 1\n",
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let outputs = ["gen/index.jsonl", "train/metrics.jsonl", "eval/report.jsonl"];
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let root = tmp.path().join(name);
        let sub = |s: &str| root.join(s).to_str().unwrap().to_string();
        let (g, t, e) = (sub("gen"), sub("train"), sub("eval"));
        let ckpt = root.join("train/model.ckpt");
        let codes = [
            cli(&["--config", cfg, "--seed", "3", "--out", &g, "--quiet", "gen"]),
            cli(&["--config", cfg, "--seed", "3", "--out", &t, "--quiet", "train", "--data", &g]),
            cli(&["--config", cfg, "--seed", "3", "--out", &e, "--quiet", "eval", "--checkpoint", ckpt.to_str().unwrap()]),
        ];
        assert_eq!(codes, [0, 0, 0]);
        dirs.push(root);
    }
    let same = |rel: &str| -> bool {
        let read = |d: &Path| fs::read(d.join(rel)).unwrap_or_default();
        let a = read(&dirs[0]);
        !a.is_empty() && a == read(&dirs[1])
    };
    let results: Vec<String> = outputs.iter().map(|o| format!("{o} {}", if same(o) { "identical" } else { "DIFFERS" })).collect();
    let ok = outputs.iter().all(|o| same(o)) && same("train/checkpoints/last.ckpt");
    report(9, ok, results.join(", "));
}
