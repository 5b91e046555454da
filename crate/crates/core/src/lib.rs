pub mod domain;
pub mod eval;
pub mod frontmatter;
pub mod gateway;
pub mod orchestrator;
pub mod par;
pub mod personas;
pub mod retrieval;
