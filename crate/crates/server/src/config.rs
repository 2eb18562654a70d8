//! Engine configuration: one JSON document, any top-level field overridable
//! by an environment variable `DST_<FIELD>`.
//!
//! API keys never appear here. Remote endpoints name the environment
//! variable that holds the key, and startup only checks that it is set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dst_core::engine::{Engine, TrackerMode};
use dst_core::http::Endpoint;
use dst_core::llm::{CannedBackend, CompletionBackend, CompletionEndpoint, FixtureRetriever, HttpCompletion, PromptLibrary, RuleEchoBackend};
use dst_core::nlu::{build_lexicon_backend, NluBackend, RemoteNlu};
use dst_core::validator::{GbtModel, RuleThresholds, Validator};
use dst_core::{demo, parse_ontology, Ontology};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ENV_PREFIX: &str = "DST_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("{what} {path}: {message}")]
    Invalid { what: &'static str, path: String, message: String },
    #[error("environment variable {0} named by api_key_env is not set")]
    MissingKey(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValidatorConfig {
    Rule {
        #[serde(default)]
        thresholds: RuleThresholds,
    },
    Gbt {
        model: PathBuf,
    },
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        ValidatorConfig::Rule {
            thresholds: RuleThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrackerConfig {
    #[default]
    RuleTracker,
    LlmTracker {
        endpoint: CompletionEndpoint,
    },
    /// Replies looked up by prompt digest from a JSON file.
    LlmMock {
        replies: PathBuf,
    },
    /// The LLM path driven by the rule tracker's own output.
    LlmRuleEcho,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum NluConfig {
    #[default]
    Lexicon,
    Remote {
        endpoint: Endpoint,
    },
}

fn default_persistence() -> PathBuf {
    PathBuf::from("sessions")
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_ttl() -> u64 {
    30 * 60
}

/// Paths left out fall back to the bundled fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub ontology: Option<PathBuf>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    #[serde(default)]
    pub retrieval: Option<PathBuf>,
    #[serde(default)]
    pub validator: ValidatorConfig,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub nlu: NluConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_persistence")]
    pub persistence: PathBuf,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_ttl")]
    pub session_ttl_secs: u64,
    /// Allowed browser origin; any origin when unset.
    #[serde(default)]
    pub cors_origin: Option<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

const FIELDS: [&str; 12] = [
    "ontology",
    "lexicon",
    "prompts",
    "retrieval",
    "validator",
    "tracker",
    "nlu",
    "seed",
    "persistence",
    "bind",
    "session_ttl_secs",
    "cors_origin",
];

/// Applies `DST_<FIELD>` overrides to a config document. A value that parses
/// as JSON is used as such, anything else as a string. Variables that name
/// no field are ignored.
pub fn apply_overrides<I, K, V>(doc: &mut Value, vars: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let Value::Object(map) = doc else {
        return Err(ConfigError::Parse("config must be a JSON object".into()));
    };
    for (k, v) in vars {
        let Some(field) = k.as_ref().strip_prefix(ENV_PREFIX) else { continue };
        let field = field.to_ascii_lowercase();
        if !FIELDS.contains(&field.as_str()) {
            continue;
        }
        let raw = v.as_ref();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(field, value);
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn invalid(what: &'static str, path: &Option<PathBuf>, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        what,
        path: path.as_ref().map_or("(bundled)".into(), |p| p.display().to_string()),
        message: e.to_string(),
    }
}

fn check_key(endpoint: &Endpoint) -> Result<(), ConfigError> {
    match &endpoint.api_key_env {
        Some(var) if std::env::var_os(var).is_none() => Err(ConfigError::MissingKey(var.clone())),
        _ => Ok(()),
    }
}

impl EngineConfig {
    /// Reads `path` (or starts from defaults), then applies the process
    /// environment's overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load_with(path, std::env::vars())
    }

    pub fn load_with<I, K, V>(path: Option<&Path>, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut doc = match path {
            Some(p) => serde_json::from_str(&read(p)?).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?,
            None => Value::Object(Default::default()),
        };
        apply_overrides(&mut doc, vars)?;
        let mut cfg: EngineConfig = serde_json::from_value(doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(base) = path.and_then(Path::parent) {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    /// Makes file references relative to the config file's directory. This
    /// applies to overridden values too.
    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.ontology, &mut self.lexicon, &mut self.prompts, &mut self.retrieval]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.persistence);
        match &mut self.validator {
            ValidatorConfig::Gbt { model } => fix(model),
            ValidatorConfig::Rule { .. } => {}
        }
        if let TrackerConfig::LlmMock { replies } = &mut self.tracker {
            fix(replies);
        }
    }

    pub fn load_ontology(&self) -> Result<Ontology, ConfigError> {
        let text = match &self.ontology {
            Some(p) => read(p)?,
            None => demo::ONTOLOGY_JSON.to_string(),
        };
        parse_ontology(&text).map_err(|e| invalid("ontology", &self.ontology, e))
    }

    /// Loads and checks every referenced file and builds the engine.
    pub fn build(&self) -> Result<Runtime, ConfigError> {
        if self.session_ttl_secs == 0 {
            return Err(ConfigError::Parse("session_ttl_secs must be positive".into()));
        }
        let ontology = Arc::new(self.load_ontology()?);

        let nlu: Arc<dyn NluBackend> = match &self.nlu {
            NluConfig::Lexicon => {
                let text = match &self.lexicon {
                    Some(p) => read(p)?,
                    None => demo::LEXICON_JSON.to_string(),
                };
                Arc::new(build_lexicon_backend(&text, &ontology).map_err(|e| invalid("lexicon", &self.lexicon, e))?)
            }
            NluConfig::Remote { endpoint } => {
                check_key(endpoint)?;
                Arc::new(RemoteNlu::new(endpoint.clone()).map_err(|e| invalid("nlu endpoint", &None, e))?)
            }
        };

        let validator = match &self.validator {
            ValidatorConfig::Rule { thresholds } => {
                thresholds.validate().map_err(|e| invalid("validator thresholds", &None, e))?;
                Validator::Rule(*thresholds)
            }
            ValidatorConfig::Gbt { model } => {
                let m = GbtModel::from_json(&read(model)?).map_err(|e| invalid("validator model", &Some(model.clone()), e))?;
                Validator::Gbt(m)
            }
        };

        let tracker = match &self.tracker {
            TrackerConfig::RuleTracker => TrackerMode::Rule,
            other => {
                let library = match &self.prompts {
                    Some(p) => PromptLibrary::from_json(&read(p)?).map_err(|e| invalid("prompt library", &self.prompts, e))?,
                    None => demo::prompts().clone(),
                };
                library
                    .check_intents(&ontology)
                    .map_err(|e| invalid("prompt library", &self.prompts, e))?;
                let backend: Arc<dyn CompletionBackend> = match other {
                    TrackerConfig::LlmTracker { endpoint } => {
                        check_key(&endpoint.endpoint)?;
                        Arc::new(HttpCompletion::new(endpoint.clone()).map_err(|e| invalid("llm endpoint", &None, e))?)
                    }
                    TrackerConfig::LlmMock { replies } => Arc::new(
                        CannedBackend::from_json(&read(replies)?)
                            .map_err(|e| invalid("canned replies", &Some(replies.clone()), e))?,
                    ),
                    _ => Arc::new(RuleEchoBackend),
                };
                TrackerMode::Llm {
                    library: Arc::new(library),
                    backend,
                }
            }
        };

        let retriever = match &self.retrieval {
            Some(p) => FixtureRetriever::from_json(&read(p)?).map_err(|e| invalid("retrieval fixture", &self.retrieval, e))?,
            None => demo::retriever().clone(),
        };

        Ok(Runtime {
            engine: Engine::rule(ontology, nlu, validator).with_tracker(tracker),
            retriever: Arc::new(retriever),
        })
    }

    /// The config as JSON with every default filled in.
    pub fn effective(&self) -> BTreeMap<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!("config is an object"),
        }
    }
}

/// Everything built from a valid config.
#[derive(Clone)]
pub struct Runtime {
    pub engine: Engine,
    pub retriever: Arc<FixtureRetriever>,
}
