//! Ingest, normalize, window, deduplicate and synthesize sensor series.

mod normalize;
mod series;
mod synth;
mod window;

pub use normalize::{apply_normalizer, fit_normalizer, NormStats, STD_FLOOR};
pub(crate) use series::ByteReader;
pub use series::{load_csv, read_cache, write_cache, write_csv, CsvSchema, TimeSeries, ANOMALY};
pub use synth::{synth_generate, AnomalyKind, AnomalySpec, Sinusoid, SynthSpec};
pub use window::{dedup_filter, make_windows, window_label, WindowConfig, WindowSet};
