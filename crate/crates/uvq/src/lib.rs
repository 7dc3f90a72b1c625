//! File formats, experiment pipeline and reporting for universal-codebook
//! vector quantization. The numerical core lives in `uvq-core`.

pub mod cli;
pub mod format;
pub mod pipeline;
pub mod presets;
pub mod report;
pub mod runlog;
