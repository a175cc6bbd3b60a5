pub mod analytics;
pub mod config;
pub mod dataset;
pub mod domain;
pub mod ensemble;
pub mod evaluation;
pub mod formats;
pub mod ingest;
pub mod interpret;
pub mod matrix;
pub mod notifier;
pub mod store;
pub mod synthetic;
