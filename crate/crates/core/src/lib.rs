//! Hybrid dialogue state tracking: ontology and corpus formats, a
//! schedule-aware NLU interface, three-way intent validation, a rule-guided
//! state tracker with SQL emission, an LLM bridge, and the evaluation harness.

pub mod corpus;
pub mod engine;
pub mod eval;
pub mod generate;
pub mod http;
pub mod llm;
pub mod metrics;
pub mod nlu;
pub mod ontology;
pub mod querygen;
pub mod tracker;
pub mod validator;

pub use corpus::{load_corpus, split_kfold, Corpus, CorpusError, Dialogue, Fold, Speaker, Turn};
pub use nlu::{build_schedule, NluBackend, NluError, NluOutput, ScheduleInput};
pub use ontology::{parse_ontology, IntentKind, IntentSchema, Ontology, OntologyError, SlotDef};

/// The bundled demo ontology and lexicon, parsed once.
pub mod demo {
    use std::sync::OnceLock;

    use crate::llm::{FixtureRetriever, PromptLibrary};
    use crate::nlu::{build_lexicon_backend, LexiconBackend};
    use crate::ontology::{parse_ontology, Ontology};

    pub const ONTOLOGY_JSON: &str = include_str!("../../../fixtures/ontology.json");
    pub const LEXICON_JSON: &str = include_str!("../../../fixtures/lexicon.json");
    pub const PROMPTS_JSON: &str = include_str!("../../../fixtures/prompts.json");
    pub const RETRIEVAL_JSON: &str = include_str!("../../../fixtures/retrieval.json");

    pub fn ontology() -> &'static Ontology {
        static O: OnceLock<Ontology> = OnceLock::new();
        O.get_or_init(|| parse_ontology(ONTOLOGY_JSON).expect("bundled ontology is valid"))
    }

    pub fn lexicon() -> &'static LexiconBackend {
        static L: OnceLock<LexiconBackend> = OnceLock::new();
        L.get_or_init(|| build_lexicon_backend(LEXICON_JSON, ontology()).expect("bundled lexicon is valid"))
    }

    pub fn prompts() -> &'static PromptLibrary {
        static P: OnceLock<PromptLibrary> = OnceLock::new();
        P.get_or_init(|| PromptLibrary::from_json(PROMPTS_JSON).expect("bundled prompts are valid"))
    }

    pub fn retriever() -> &'static FixtureRetriever {
        static R: OnceLock<FixtureRetriever> = OnceLock::new();
        R.get_or_init(|| FixtureRetriever::from_json(RETRIEVAL_JSON).expect("bundled retrieval rows are valid"))
    }
}
