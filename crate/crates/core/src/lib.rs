//! Penetration-testing pipelines for cloud management endpoints:
//! command-line fuzzing from block-based configs, HTTP protocol fuzzing,
//! session sidejacking, credential-leak scanning, port reconnaissance and
//! a deliberately vulnerable target to run them against.

pub mod capture;
pub mod credscan;
pub mod grammar;
pub mod http;
pub mod http_fuzz;
pub mod payload;
pub mod recon;
pub mod report;
pub mod runner;
pub mod sidejack;
pub mod victim;

pub use grammar::{parse_config, Defaults, FuzzConfig, GrammarError, Template, TestCase, Token};
pub use payload::{campaign_total, emit_script, generate, plan, FuzzPlan, GeneratedCommand};
