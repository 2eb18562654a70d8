//! The `dst` command line.
//!
//! Exit codes: 0 on success, 1 when input data is bad, 2 for usage and
//! configuration errors.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use dst_core::engine::{Conversation, TrackerMode};
use dst_core::eval::{evaluate_pipeline, run_dialogue, EvalConfig, HumanAnnotations, NluMode, Noise};
use dst_core::generate::generate_corpus;
use dst_core::llm::RuleEchoBackend;
use dst_core::nlu::{build_lexicon_backend, LexiconBackend, NluBackend};
use dst_core::tracker::DialogueState;
use dst_core::validator::synth::{imbalanced, IMBALANCED_PRIOR};
use dst_core::validator::{train_gbt, tune_thresholds, ClassWeights, Dataset, GbtParams, Label};
use dst_core::{demo, load_corpus, Corpus, Ontology};

use crate::app::{reply_for, router, spawn_eviction, AppState};
use crate::config::EngineConfig;
use crate::store::SessionStore;

pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dst", version, about = "Hybrid dialogue state tracking engine")]
pub struct Cli {
    /// Engine config file (JSON). Fields may be overridden by DST_<FIELD>.
    #[arg(long, global = true, env = "DST_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalNlu {
    /// Echo the corpus's own gold annotations.
    Gold,
    /// The NLU backend from the config.
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTracker {
    /// The tracker from the config.
    Config,
    Rule,
    /// The LLM tracker path with the rule-echo backend.
    LlmEcho,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve,
    /// Talk to a local engine from the terminal.
    Chat,
    /// K-fold evaluation of a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes <report>.json and <report>.txt.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalNlu::Gold)]
        nlu: EvalNlu,
        #[arg(long, value_enum, default_value_t = EvalTracker::Config)]
        tracker: EvalTracker,
        /// Per-turn probability of corrupting one predicted slot value.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Human judgements: {"dialogue_id": {"user_turn_index": bool}}.
        #[arg(long)]
        human: Option<PathBuf>,
    },
    /// Train the GBT validator on NLU outputs labelled against gold intents.
    TrainValidator {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_trees: usize,
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train without class weights.
        #[arg(long)]
        unweighted: bool,
        /// Tune per-class offsets on a 20% hold-out.
        #[arg(long)]
        tune: bool,
        /// Add this many synthetic samples drawn with a 97/2/1 class mix.
        #[arg(long, default_value_t = 0)]
        synthetic: usize,
    },
    /// Check a corpus against the ontology.
    ValidateCorpus {
        corpus: PathBuf,
    },
    /// Generate a synthetic annotated corpus.
    GenFixture {
        #[arg(long)]
        dialogues: usize,
        #[arg(long)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: e.to_string(),
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn config(path: Option<&Path>) -> Result<EngineConfig, Failure> {
    EngineConfig::load(path).map_err(usage)
}

fn read_corpus(path: &Path, ontology: &Ontology) -> Result<Corpus, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    load_corpus(&text, ontology).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn lexicon(cfg: &EngineConfig, ontology: &Ontology) -> Result<LexiconBackend, Failure> {
    let text = match &cfg.lexicon {
        Some(p) => std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => demo::LEXICON_JSON.to_string(),
    };
    build_lexicon_backend(&text, ontology).map_err(usage)
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    let cfg = config(cli.config.as_deref())?;
    match cli.command {
        Command::Serve => serve(cfg),
        Command::Chat => chat(cfg),
        Command::Eval {
            corpus,
            k,
            seed,
            report,
            nlu,
            tracker,
            noise,
            noise_seed,
            human,
        } => {
            let rt = cfg.build().map_err(usage)?;
            let ontology = rt.engine.ontology.clone();
            let corpus = read_corpus(&corpus, &ontology)?;
            let human: Option<HumanAnnotations> = match human {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| data(format!("{}: {e}", p.display())))?;
                    Some(serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", p.display())))?)
                }
                None => None,
            };
            let ec = EvalConfig {
                nlu: match nlu {
                    EvalNlu::Gold => NluMode::GoldEcho,
                    EvalNlu::Config => NluMode::Shared(rt.engine.nlu.clone()),
                },
                validator: (*rt.engine.validator).clone(),
                tracker: match tracker {
                    EvalTracker::Config => rt.engine.tracker.clone(),
                    EvalTracker::Rule => TrackerMode::Rule,
                    EvalTracker::LlmEcho => TrackerMode::Llm {
                        library: Arc::new(demo::prompts().clone()),
                        backend: Arc::new(RuleEchoBackend),
                    },
                },
                noise: noise.map(|p| Noise { p, seed: noise_seed }),
                human,
                session_seed: cfg.seed,
            };
            let r = evaluate_pipeline(&corpus, &ontology, &ec, k, seed).map_err(data)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "{}", r.summary_line()).and_then(|_| out.write_all(r.to_text().as_bytes())).map_err(data)?;
            if let Some(p) = report {
                r.write(&p).map_err(data)?;
            }
            Ok(())
        }
        Command::TrainValidator {
            corpus,
            out,
            n_trees,
            max_depth,
            learning_rate,
            seed,
            unweighted,
            tune,
            synthetic,
        } => {
            let ontology = cfg.load_ontology().map_err(usage)?;
            let corpus = read_corpus(&corpus, &ontology)?;
            let nlu = lexicon(&cfg, &ontology)?;
            let mut samples = label_corpus(&corpus, &ontology, Arc::new(nlu), cfg.seed)?;
            samples.extend(imbalanced(synthetic, seed, IMBALANCED_PRIOR));
            let data_set = Dataset::from_features(samples);
            let counts = data_set.class_counts();
            if counts.iter().filter(|c| **c > 0).count() < 2 {
                return Err(data(format!(
                    "labels cover fewer than two classes ({counts:?} confirmed/ambiguous/unclear); add --synthetic"
                )));
            }
            let params = GbtParams {
                n_trees,
                max_depth,
                learning_rate,
                seed,
                class_weights: if unweighted { ClassWeights::Uniform } else { ClassWeights::Balanced },
                ..GbtParams::default()
            };
            let (train, dev) = if tune { split_dev(&data_set) } else { (data_set.clone(), Dataset::default()) };
            let (mut model, report) = train_gbt(&train, &params).map_err(data)?;
            if tune {
                model.thresholds = tune_thresholds(&model, &dev).map_err(data)?.to_vec();
            }
            std::fs::write(&out, model.to_json()).map_err(|e| data(format!("{}: {e}", out.display())))?;
            let mut stdout = std::io::stdout().lock();
            writeln!(
                stdout,
                "trained {} rounds on {} samples (confirmed/ambiguous/unclear = {}/{}/{}); loss {:.6} -> {:.6}{}",
                model.trees.len(),
                train.len(),
                counts[0],
                counts[1],
                counts[2],
                report.loss_history.first().copied().unwrap_or(f64::NAN),
                report.loss_history.last().copied().unwrap_or(f64::NAN),
                if report.stopped_early { " (stopped early)" } else { "" },
            )
            .and_then(|_| writeln!(stdout, "offsets {:?}; model written to {}", model.thresholds, out.display()))
            .map_err(data)?;
            Ok(())
        }
        Command::ValidateCorpus { corpus } => {
            let ontology = cfg.load_ontology().map_err(usage)?;
            let c = read_corpus(&corpus, &ontology)?;
            writeln!(std::io::stdout(), "ok: {} dialogues, {} user turns", c.dialogues.len(), c.user_turn_count())
                .map_err(data)?;
            Ok(())
        }
        Command::GenFixture { dialogues, seed, out } => {
            let ontology = cfg.load_ontology().map_err(usage)?;
            let lex = lexicon(&cfg, &ontology)?;
            let text = generate_corpus(&ontology, lex.rules(), dialogues, seed).to_json() + "\n";
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| data(format!("{}: {e}", p.display()))),
                None => {
                    std::io::stdout().write_all(text.as_bytes()).map_err(data)?;
                    Ok(())
                }
            }
        }
    }
}

/// Every 5th sample goes to the dev split.
fn split_dev(d: &Dataset) -> (Dataset, Dataset) {
    let (mut train, mut dev) = (Dataset::default(), Dataset::default());
    for (i, (x, y)) in d.x.iter().zip(&d.y).enumerate() {
        let part = if i % 5 == 4 { &mut dev } else { &mut train };
        part.x.push(x.clone());
        part.y.push(*y);
    }
    (train, dev)
}

/// Runs the lexicon NLU over each dialogue and labels every turn's
/// features: confirmed when the context intent is right, ambiguous when the
/// right intent is the runner-up, unclear otherwise. A "don't care" answer
/// counts as right on turns annotated with one.
pub fn label_corpus(
    corpus: &Corpus,
    ontology: &Ontology,
    nlu: Arc<dyn NluBackend>,
    seed: u64,
) -> Result<Vec<(dst_core::validator::ValidatorFeatures, Label)>, Failure> {
    let engine = dst_core::engine::Engine::rule(
        Arc::new(ontology.clone()),
        nlu.clone(),
        dst_core::validator::Validator::default(),
    );
    let dont_care = ontology.dont_care_intent().id.clone();
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        let run = run_dialogue(&engine, d, nlu.as_ref(), seed).map_err(data)?;
        for (gold, o) in d.user_turns().zip(&run.outcomes) {
            let want = gold.gold_intent.as_deref().unwrap_or_default();
            let ok = |i: &str| i == want || (i == dont_care && !gold.gold_dont_care.is_empty());
            let ranked = o.nlu.ranked();
            let label = if ok(&o.nlu.context_intent) {
                Label::Confirmed
            } else if ranked.get(1).is_some_and(|(i, _)| ok(i)) {
                Label::Ambiguous
            } else {
                Label::Unclear
            };
            out.push((o.verdict.features, label));
        }
    }
    Ok(out)
}

fn serve(cfg: EngineConfig) -> Result<(), Failure> {
    let rt = cfg.build().map_err(usage)?;
    let store = SessionStore::open(&cfg.persistence).map_err(usage)?;
    let ttl = Duration::from_secs(cfg.session_ttl_secs);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(data)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.bind)
            .await
            .map_err(|e| data(format!("cannot bind {}: {e}", cfg.bind)))?;
        let addr = listener.local_addr().map_err(data)?;
        let app = AppState::new(rt, store, cfg.seed, ttl);
        spawn_eviction(app.clone(), (ttl / 4).clamp(Duration::from_secs(1), Duration::from_secs(60)));
        println!("listening on http://{addr}");
        std::io::stdout().flush().map_err(data)?;
        log::info!("persistence at {}", cfg.persistence.display());
        axum::serve(listener, router(app, cfg.cors_origin.as_deref()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(data)
    })
}

fn chat(cfg: EngineConfig) -> Result<(), Failure> {
    let rt = cfg.build().map_err(usage)?;
    let mut conv = Conversation::new(DialogueState::new(uuid::Uuid::new_v4().to_string(), cfg.seed));
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    writeln!(out, "Type a request. /state shows the tracked state, /quit leaves.").map_err(data)?;
    loop {
        write!(out, "> ").map_err(data)?;
        out.flush().map_err(data)?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(data)? == 0 {
            return Ok(());
        }
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => return Ok(()),
            "/state" => {
                let s = serde_json::to_string_pretty(&conv.state).expect("state serializes");
                writeln!(out, "{s}").map_err(data)?;
                continue;
            }
            _ => {}
        }
        match rt.engine.step(&mut conv, text) {
            Ok(o) => {
                writeln!(out, "{}", reply_for(rt.retriever.as_ref(), &o.action)).map_err(data)?;
                let mut info = format!("  [{} / {}]", o.action.kind.as_str(), o.verdict.label.as_str());
                if let Some(r) = &o.result {
                    info.push_str(&format!(" {} {:?}  sql: {}", r.intent, r.state, r.sql.text));
                }
                writeln!(out, "{info}").map_err(data)?;
            }
            Err(e) => writeln!(out, "  (could not process that: {e})").map_err(data)?,
        }
    }
}
