use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use actual::actor::GenerationConfig;
use actual::corpus::{CorpusSplits, GrammarSpec, SyntheticGrammar, Vocabulary};
use actual::trainer::metrics::CsvSink;
use actual::trainer::streams::{stream, SAMPLE};
use actual::trainer::{self, evaluate, MetricsRow, MetricsSink, TrainConfig, TrainState};
use actual::Error;
use rand::Rng;

use crate::{Command, Common};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;
pub const EXIT_SELFCHECK: u8 = 3;

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

const CONFIG: &str = "config.toml";
const VOCAB: &str = "vocab.toml";
const CHECKPOINT: &str = "checkpoint.bin";
const METRICS: &str = "metrics.csv";
const EVAL: &str = "eval.csv";
const SAMPLES: &str = "samples.txt";

fn split_file(split: &str) -> String {
    format!("{split}.ids")
}

struct Run {
    out: PathBuf,
    cfg: TrainConfig,
}

impl Run {
    /// Resolves the configuration and snapshots it into the run directory.
    fn open(common: &Common) -> Result<Self, Failure> {
        let out = common.out.clone().ok_or_else(|| usage("--out is required"))?;
        fs::create_dir_all(&out)?;
        let text = match &common.config {
            Some(p) => fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
            None if out.join(CONFIG).exists() => fs::read_to_string(out.join(CONFIG))?,
            None => String::new(),
        };
        let mut overrides = common.set.clone();
        if let Some(seed) = common.seed {
            overrides.push(format!("seed={seed}"));
        }
        let cfg = TrainConfig::resolve(&text, &overrides)?;
        fs::write(out.join(CONFIG), cfg.to_toml()?)?;
        Ok(Self { out, cfg })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn corpus(&self) -> Result<(Vocabulary, CorpusSplits), Failure> {
        let vocab_path = self.path(VOCAB);
        if !vocab_path.exists() {
            return Err(usage(format!("{} missing; run `prepare` first", vocab_path.display())));
        }
        let vocab = Vocabulary::from_toml(&fs::read_to_string(vocab_path)?)?;
        let read = |s: &str| CorpusSplits::read_ids(&self.path(&split_file(s)));
        let splits = CorpusSplits {
            seq_len: self.cfg.seq_len,
            train: read("train")?,
            valid: read("valid")?,
            test: read("test")?,
        };
        for s in splits.train.iter().chain(&splits.valid).chain(&splits.test) {
            if s.len() != self.cfg.seq_len {
                return Err(usage(format!(
                    "prepared sequences have length {} but seq_len is {}",
                    s.len(),
                    self.cfg.seq_len
                )));
            }
        }
        Ok((vocab, splits))
    }

    fn state(&self, vocab: &Vocabulary) -> Result<TrainState, Failure> {
        let p = self.path(CHECKPOINT);
        Ok(if p.exists() {
            TrainState::load(&p, vocab.len(), &self.cfg)?
        } else {
            TrainState::new(vocab.len(), &self.cfg)?
        })
    }

    fn existing_state(&self, vocab: &Vocabulary) -> Result<TrainState, Failure> {
        let p = self.path(CHECKPOINT);
        if !p.exists() {
            return Err(usage(format!("{} missing; train first", p.display())));
        }
        Ok(TrainState::load(&p, vocab.len(), &self.cfg)?)
    }

    fn sink(&self) -> Result<LoggingSink, Failure> {
        let p = self.path(METRICS);
        let fresh = !p.exists();
        let file = OpenOptions::new().create(true).append(true).open(p)?;
        Ok(LoggingSink {
            csv: CsvSink::new(file, fresh)?,
        })
    }
}

/// Appends rows to the metrics CSV and logs evaluation rows to stderr.
struct LoggingSink {
    csv: CsvSink<File>,
}

impl MetricsSink for LoggingSink {
    fn record(&mut self, row: &MetricsRow) -> actual::Result<()> {
        if let Some(v) = row.valid_nll {
            eprintln!("{} step {}: valid nll {v:.4} nats/token", row.phase, row.step);
        }
        self.csv.record(row)
    }
}

pub fn dispatch(command: &Command, common: &Common) -> Result<(), Failure> {
    match command {
        Command::Selfcheck => selfcheck(),
        Command::Prepare => prepare(&Run::open(common)?),
        Command::PretrainActor => {
            let run = Run::open(common)?;
            let (vocab, corpus) = run.corpus()?;
            let mut state = run.state(&vocab)?;
            let report = trainer::pretrain_actor(&mut state, &corpus, &run.cfg, &mut run.sink()?)?;
            state.save(&run.path(CHECKPOINT))?;
            if let Some(best) = report.best_valid_nll {
                println!("best valid nll {best:.6} after {} steps", state.counters.actor_steps);
            }
            Ok(())
        }
        Command::PretrainCritic => {
            let run = Run::open(common)?;
            let (vocab, corpus) = run.corpus()?;
            let mut state = run.state(&vocab)?;
            let report = trainer::pretrain_critic(&mut state, &corpus, &run.cfg, &mut run.sink()?)?;
            state.save(&run.path(CHECKPOINT))?;
            if let Some(last) = report.td_loss.last() {
                println!("final td loss {last:.6} after {} steps", state.counters.critic_steps);
            }
            Ok(())
        }
        Command::Train => {
            let run = Run::open(common)?;
            let (vocab, corpus) = run.corpus()?;
            let mut state = run.state(&vocab)?;
            trainer::train(&mut state, &corpus, &run.cfg, common.allow_cold_start, &mut run.sink()?)?;
            state.save(&run.path(CHECKPOINT))?;
            let ev = evaluate(&state.actor, &corpus.valid)?;
            println!("valid nll {:.6} after {} steps", ev.nll, state.counters.train_steps);
            Ok(())
        }
        Command::Eval => eval(&Run::open(common)?),
        Command::Sample {
            count,
            temperature,
            greedy,
        } => {
            let run = Run::open(common)?;
            let (vocab, _) = run.corpus()?;
            let state = run.existing_state(&vocab)?;
            let gen = GenerationConfig {
                len: run.cfg.seq_len,
                temperature: *temperature,
                greedy: *greedy,
            };
            let seqs = state.actor.sample(*count, &gen, &mut stream(run.cfg.seed, SAMPLE, 0))?;
            let mut text = String::new();
            for s in &seqs {
                text.push_str(&vocab.decode(s));
                text.push('\n');
            }
            fs::write(run.path(SAMPLES), &text)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn prepare(run: &Run) -> Result<(), Failure> {
    let d = &run.cfg.data;
    let (vocab, splits) = match (&d.grammar, &d.text) {
        (Some(g), None) => {
            let spec = GrammarSpec::parse(&read(g)?)?;
            let grammar = SyntheticGrammar::from_spec(&spec)?;
            let seed = stream(run.cfg.seed, "data", spec.seed).gen::<u64>();
            let out = CorpusSplits::from_grammar(&grammar, run.cfg.seq_len, (spec.train, spec.valid, spec.test), seed)?;
            println!("grammar entropy rate {:.6} nats/token", grammar.entropy_rate());
            out
        }
        (None, Some(t)) => {
            let f_train = 1.0 - d.valid_fraction - d.test_fraction;
            CorpusSplits::from_text(&read(t)?, d.granularity, run.cfg.seq_len, (f_train, d.valid_fraction))?
        }
        _ => return Err(usage("set exactly one of data.grammar and data.text")),
    };
    fs::write(run.path(VOCAB), vocab.to_toml()?)?;
    for (name, seqs) in [
        ("train", &splits.train),
        ("valid", &splits.valid),
        ("test", &splits.test),
    ] {
        CorpusSplits::write_ids(&run.path(&split_file(name)), seqs)?;
    }
    println!(
        "vocabulary {} entries; sequences train {} valid {} test {} of length {}",
        vocab.len(),
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        splits.seq_len
    );
    Ok(())
}

fn read(p: &Path) -> Result<String, Failure> {
    fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))
}

fn eval(run: &Run) -> Result<(), Failure> {
    let (vocab, corpus) = run.corpus()?;
    let state = run.existing_state(&vocab)?;
    let mut text = String::from("split,nll,bpc,tokens\n");
    for (name, seqs) in [("valid", &corpus.valid), ("test", &corpus.test)] {
        if seqs.is_empty() {
            continue;
        }
        let ev = evaluate(&state.actor, seqs)?;
        text.push_str(&format!("{name},{},{},{}\n", ev.nll, ev.bpc, ev.tokens));
    }
    File::create(run.path(EVAL))?.write_all(text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn selfcheck() -> Result<(), Failure> {
    let checks = actual::selfcheck::run()?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_SELFCHECK,
            message: format!("{failed} of {} checks failed", checks.len()),
        });
    }
    Ok(())
}
