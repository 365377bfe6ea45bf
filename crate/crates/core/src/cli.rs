//! The `cfvsr` command line: `gen`, `train`, `eval`, `g2p` and `verify`.
//!
//! Settings come from an optional TOML file with `[synth]`, `[train]`,
//! `[train.model]`, `[train.loss]` and `[eval]` sections; flags override
//! the file. The effective config is echoed to stderr and saved next to
//! the outputs, and feeding it back with `--config` reproduces the run.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data_synth::{generate_corpus, read_manifest, write_manifest, SynthConfig, Utterance};
use crate::decode_metrics::{write_report, CorpusSummary};
use crate::linguistics::{text_to_labels, LabelTriple, Lexicon, LinguisticInventory};
use crate::model::{ActivationConfig, Checkpoint, DecodeMethod};
use crate::trainer::{evaluate, LogLine, TrainConfig, Trainer};
use crate::verify::{run_all, VerifyOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `ctc_greedy`, `ctc_beam` or `attention`.
    pub decoder: String,
    pub beam_width: usize,
    /// Utterances in the generated test set when no manifest is given.
    pub test_utterances: usize,
    /// Added to the synth seed for the generated test set.
    pub test_seed_offset: u64,
    pub timing_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decoder: "ctc_greedy".into(),
            beam_width: 8,
            test_utterances: 64,
            test_seed_offset: 1000,
            timing_repeats: 3,
        }
    }
}

impl EvalConfig {
    fn method(&self) -> Result<DecodeMethod, CliError> {
        match self.decoder.as_str() {
            "ctc_greedy" => Ok(DecodeMethod::CtcGreedy),
            "ctc_beam" => Ok(DecodeMethod::CtcBeam(self.beam_width.max(1))),
            "attention" => Ok(DecodeMethod::Attention),
            other => Err(CliError::Usage(format!(
                "eval.decoder: unknown decoder {other:?} (expected ctc_greedy, ctc_beam or attention)"
            ))),
        }
    }
}

/// Everything a run reads from the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Keeps the model input and vocabulary consistent with the data.
    fn link(&mut self) {
        self.train.model.input_dim = self.synth.feature_dim;
        self.train.model.num_chars = self.synth.char_vocab_size;
    }
}

#[derive(Debug, Parser)]
#[command(name = "cfvsr", version, about = "Cascade-free multitask sequence recognition on synthetic data")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Only errors on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and write it as a manifest.
    Gen,
    /// Train with the two-phase curriculum.
    Train(TrainArgs),
    /// Decode a test set under one or more activation configs.
    Eval(EvalArgs),
    /// Print characters, phonemes and viseme ids for text.
    G2p(G2pArgs),
    /// Run the oracle and gradient-check suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest directory; a corpus is generated from `[synth]` if absent.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Train without the alignment loss.
    #[arg(long)]
    pub disable_align: bool,
    /// Train without the phoneme and viseme branches.
    #[arg(long)]
    pub disable_branches: bool,
    /// Stop after this many optimizer steps.
    #[arg(long, value_name = "N")]
    pub max_steps: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Manifest directory; a held-out set is generated if absent.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// One of f, f+p, f+v, f+p+v. Repeatable; default is every config
    /// the checkpoint supports.
    #[arg(long = "activate", value_name = "CONFIG")]
    pub activate: Vec<ActivationConfig>,
    /// Overrides `eval.decoder`.
    #[arg(long, value_name = "NAME")]
    pub decoder: Option<String>,
}

#[derive(Debug, Args)]
pub struct G2pArgs {
    /// Text to convert.
    pub text: Option<String>,
    /// Read lines from a file instead.
    #[arg(long, value_name = "PATH", conflicts_with = "text")]
    pub file: Option<PathBuf>,
    /// Print the viseme frequency table of the input instead.
    #[arg(long)]
    pub stats: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Machine-readable results.
    #[arg(long)]
    pub json: bool,
    #[arg(long, hide = true)]
    pub inject_ctc_fault: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Ctx<'a> {
    quiet: bool,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn log(&mut self, msg: &str) {
        if !self.quiet {
            let _ = writeln!(self.err, "{msg}");
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let mut ctx = Ctx {
        quiet: cli.quiet,
        out,
        err,
    };
    match dispatch(&cli, &mut ctx) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(ctx.err, "error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<CliConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            CliConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn echo_config(ctx: &mut Ctx<'_>, cfg: &CliConfig, dir: &Path) -> Result<(), CliError> {
    let text = cfg.to_toml();
    ctx.log(&format!("effective config:\n{text}"));
    fs::write(dir.join("config.toml"), text).map_err(runtime)
}

fn dispatch(cli: &Cli, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let inv = LinguisticInventory::bundled();
    match &cli.command {
        Command::Gen => cmd_gen(cli, ctx, &inv),
        Command::Train(a) => cmd_train(cli, a, ctx, &inv),
        Command::Eval(a) => cmd_eval(cli, a, ctx, &inv),
        Command::G2p(a) => cmd_g2p(a, ctx, &inv),
        Command::Verify(a) => cmd_verify(cli, a, ctx, &inv),
    }
}

fn lexicon_for(inv: &LinguisticInventory, n: usize) -> Lexicon {
    Lexicon::bundled(inv).truncated(n)
}

fn cmd_gen(cli: &Cli, ctx: &mut Ctx<'_>, inv: &LinguisticInventory) -> Result<(), CliError> {
    let mut cfg = load_config(cli)?;
    cfg.link();
    cfg.synth.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = out_dir(cli)?;
    echo_config(ctx, &cfg, &dir)?;
    let corpus = generate_corpus(&cfg.synth, inv, &lexicon_for(inv, cfg.synth.char_vocab_size)).map_err(runtime)?;
    write_manifest(&dir, &corpus).map_err(runtime)?;
    ctx.log(&format!("wrote {} utterances to {}", corpus.len(), dir.display()));
    Ok(())
}

fn load_corpus(data: Option<&Path>, synth: &SynthConfig, inv: &LinguisticInventory) -> Result<Vec<Utterance>, CliError> {
    match data {
        Some(dir) => read_manifest(dir, inv).map_err(|e| runtime(format!("{}: {e}", dir.display()))),
        None => generate_corpus(synth, inv, &lexicon_for(inv, synth.char_vocab_size)).map_err(runtime),
    }
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<(), CliError> {
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?);
    for l in lines {
        writeln!(f, "{l}").map_err(runtime)?;
    }
    f.flush().map_err(runtime)
}

fn cmd_train(cli: &Cli, a: &TrainArgs, ctx: &mut Ctx<'_>, inv: &LinguisticInventory) -> Result<(), CliError> {
    let mut cfg = load_config(cli)?;
    cfg.link();
    cfg.train.disable_align |= a.disable_align;
    cfg.train.disable_branches |= a.disable_branches;
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = out_dir(cli)?;
    let corpus = load_corpus(a.data.as_deref(), &cfg.synth, inv)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(runtime)?;
            let t = Trainer::resume(&ckpt, &corpus, inv).map_err(runtime)?;
            cfg.train = t.config().clone();
            ctx.log(&format!("resumed from {} at step {}", path.display(), t.state().step));
            t
        }
        None => Trainer::new(cfg.train.clone(), &corpus, inv).map_err(runtime)?,
    };
    echo_config(ctx, &cfg, &dir)?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(runtime)?;
    let metrics = dir.join("metrics.jsonl");
    let mut epochs = 0usize;
    trainer
        .run(|t, lines| {
            epochs += 1;
            let s = t.state();
            let ckpt = t.checkpoint();
            ckpt.save(ckpt_dir.join(format!("step-{:06}.ckpt", s.step)))?;
            ckpt.save(ckpt_dir.join("last.ckpt"))?;
            write_lines(&metrics, s.log.iter().map(LogLine::to_json)).map_err(|e| crate::trainer::TrainError::Checkpoint(e.to_string()))?;
            if let Some(LogLine::Epoch(e)) = lines.last() {
                let cer = e.train_cer.map_or("-".to_string(), |c| format!("{c:.4}"));
                ctx.log(&format!("phase {} epoch {} step {} train CER {cer}", e.phase, e.epoch, e.step));
            }
            Ok(())
        })
        .map_err(runtime)?;
    let s = trainer.state();
    write_lines(&metrics, s.log.iter().map(LogLine::to_json))?;
    trainer.checkpoint().save(dir.join("model.ckpt")).map_err(runtime)?;
    ctx.log(&format!("trained {} steps over {epochs} epochs; checkpoint {}", s.step, dir.join("model.ckpt").display()));
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs, ctx: &mut Ctx<'_>, inv: &LinguisticInventory) -> Result<(), CliError> {
    let mut cfg = load_config(cli)?;
    cfg.link();
    if let Some(d) = &a.decoder {
        cfg.eval.decoder = d.clone();
    }
    let method = cfg.eval.method()?;
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(runtime)?;
    let model = ckpt.to_model().map_err(runtime)?;
    let lexicon = lexicon_for(inv, model.config().num_chars);
    let activations: Vec<ActivationConfig> = if a.activate.is_empty() {
        ActivationConfig::ALL
            .into_iter()
            .filter(|act| (!act.use_phoneme || model.full_activation().use_phoneme) && (!act.use_viseme || model.full_activation().use_viseme))
            .collect()
    } else {
        a.activate.clone()
    };
    let dir = out_dir(cli)?;
    echo_config(ctx, &cfg, &dir)?;
    let test_synth = SynthConfig {
        seed: cfg.synth.seed + cfg.eval.test_seed_offset,
        num_utterances: cfg.eval.test_utterances,
        ..cfg.synth.clone()
    };
    let corpus = load_corpus(a.data.as_deref(), &test_synth, inv)?;
    let result = evaluate(&model, &corpus, &lexicon, &activations, method, cfg.eval.timing_repeats).map_err(runtime)?;
    let report = dir.join("report.jsonl");
    let f = fs::File::create(&report).map_err(|e| runtime(format!("{}: {e}", report.display())))?;
    write_report(BufWriter::new(f), &result.records, &result.summaries).map_err(runtime)?;
    let timed: Vec<CorpusSummary> = result
        .summaries
        .iter()
        .zip(&result.latency)
        .map(|(s, &(_, secs))| CorpusSummary {
            wall_clock_secs: Some(secs),
            ..s.clone()
        })
        .collect();
    write_lines(&dir.join("latency.jsonl"), timed.iter().map(|s| serde_json::to_string(s).expect("serializes")))?;
    writeln!(ctx.out, "config\tCER\tS\tD\tI\tN\tactive_params\tseconds").map_err(runtime)?;
    for s in &timed {
        writeln!(
            ctx.out,
            "{}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{:.4}",
            s.activation,
            s.cer,
            s.substitutions,
            s.deletions,
            s.insertions,
            s.ref_len,
            s.active_params,
            s.wall_clock_secs.unwrap_or(0.0)
        )
        .map_err(runtime)?;
    }
    ctx.log(&format!("report written to {}", report.display()));
    Ok(())
}

fn display_width(s: &str) -> usize {
    s.chars().map(|c| if c >= '\u{2E80}' { 2 } else { 1 }).sum()
}

/// Three rows (characters, phonemes, viseme ids) with one column per
/// character.
pub fn format_g2p(labels: &LabelTriple, lexicon: &Lexicon, inv: &LinguisticInventory) -> String {
    let mut cols: Vec<[String; 3]> = vec![["chars".into(), "phonemes".into(), "visemes".into()]];
    for &c in &labels.chars {
        let e = lexicon.entry(c);
        let ph: Vec<&str> = e.phonemes.iter().map(|&p| inv.phoneme_symbol(p)).collect();
        let vi: Vec<String> = e.phonemes.iter().map(|&p| inv.viseme_of(p).to_string()).collect();
        cols.push([e.character.to_string(), ph.join(" "), vi.join(" ")]);
    }
    let widths: Vec<usize> = cols.iter().map(|c| c.iter().map(|s| display_width(s)).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in 0..3 {
        let mut line = String::new();
        for (c, w) in cols.iter().zip(&widths) {
            line.push_str(&c[row]);
            line.push_str(&" ".repeat(w - display_width(&c[row]) + 2));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn cmd_g2p(a: &G2pArgs, ctx: &mut Ctx<'_>, inv: &LinguisticInventory) -> Result<(), CliError> {
    let lexicon = Lexicon::bundled(inv);
    let lines: Vec<String> = match (&a.text, &a.file) {
        (Some(t), _) => vec![t.clone()],
        (None, Some(p)) => fs::read_to_string(p)
            .map_err(|e| runtime(format!("{}: {e}", p.display())))?
            .lines()
            .map(str::to_string)
            .collect(),
        (None, None) => return Err(CliError::Usage("g2p needs TEXT or --file".into())),
    };
    let mut counts = vec![0usize; inv.num_visemes()];
    for (n, line) in lines.iter().enumerate() {
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let labels = text_to_labels(text, &lexicon, inv).map_err(|e| runtime(format!("line {}: {e}", n + 1)))?;
        if a.stats {
            labels.visemes.iter().for_each(|&v| counts[v] += 1);
        } else {
            write!(ctx.out, "{}", format_g2p(&labels, &lexicon, inv)).map_err(runtime)?;
        }
    }
    if a.stats {
        let total = counts.iter().sum::<usize>().max(1) as f64;
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
        write!(ctx.out, "{}", inv.format_frequency_table(&freq)).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs, ctx: &mut Ctx<'_>, inv: &LinguisticInventory) -> Result<(), CliError> {
    let opts = VerifyOptions {
        seed: cli.seed.unwrap_or(0),
        inject_ctc_fault: a.inject_ctc_fault,
        ..VerifyOptions::default()
    };
    let results = run_all(&opts, inv);
    if a.json {
        let text = serde_json::to_string_pretty(&results).map_err(runtime)?;
        writeln!(ctx.out, "{text}").map_err(runtime)?;
    } else {
        for r in &results {
            writeln!(
                ctx.out,
                "{} {} ({} cases, max error {:.2e}, tolerance {:.0e})",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.cases,
                r.max_error,
                r.tolerance
            )
            .map_err(runtime)?;
            if let Some(f) = &r.failure {
                writeln!(ctx.out, "  {f}").map_err(runtime)?;
            }
        }
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} verification suite(s) failed")));
    }
    Ok(())
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
