//! Reference standards, agreement metrics and operating points for
//! diabetic retinopathy grading studies.

pub mod analysis;
pub mod manifest;
pub mod io;
pub mod metrics;
pub mod model;
pub mod operating;
pub mod refstd;
pub mod report;
pub mod synth;
