//! Long-context evaluation: sliding-window perplexity and needle retrieval.

pub mod niah;
pub mod ppl;
pub mod report;

pub use niah::{generate_niah, score_niah, NiahCase, NiahTask};
pub use ppl::{sliding_window_nll, sliding_window_ppl, LanguageModel, NllSum};
pub use report::{
    comparison_csv, comparison_table, run_eval_matrix, Answerer, CellResult, EvalEntry, EvalGrid,
    EvalReport, OracleAnswerer, RandomAnswerer, ReportMeta,
};
