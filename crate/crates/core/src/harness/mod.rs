//! Experiment orchestration: dataset, defense, purification, fine-tuning and
//! evaluation for every configured cell, with a content-addressed cache.

mod config;
mod dataset;
mod report;
mod run;

pub use config::{content_hash, AsplSettings, DatasetSource, DefenseKind, EvaluationSettings, ExperimentConfig, FinetuneSettings, ModelConfig, SeedConfig, SplitConfig};
pub use dataset::{contact_sheet, generate_toy_dataset, ToyDataset, ToyDatasetSpec};
pub use report::{parse_table, render_report, Cell, CellReport, ConditionResult, ExperimentReport, Provenance, RenderedReport, Table, TableRow, ABSENT, COLUMNS};
pub use run::*;
