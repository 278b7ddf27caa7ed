//! Automated grading on top of a GitLab server: course provisioning,
//! submission intake, sandboxed evaluation and feedback publishing.

pub mod clock;
pub mod commit_db;
pub mod config;
pub mod evaluator;
pub mod git_ops;
pub mod gitlab_api;
pub mod intake;
pub mod mock_gitlab;
pub mod provisioner;
pub mod reporting;
pub mod sandbox;
pub mod service;
