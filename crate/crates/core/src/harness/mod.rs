//! Experiment harness: datasets, run configs, training runs and their
//! artifacts, run comparison and SVG plots.

mod config;
mod data;
mod plot;
mod run;

pub use config::{DataSection, ModelSection, OptimizerSection, PolicySection, RunConfig, RunSection, Task};
pub use data::{
    gen_underflow_task, load_mnist, mnist_dir, parse_idx_images, parse_idx_labels, synthetic_classify, Dataset, Split, SplitTag,
    DATA_DIR_ENV, DEFAULT_MNIST_DIR, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, UNDERFLOW_BATCH, UNDERFLOW_CLASSES, UNDERFLOW_INPUT_NOISE,
    UNDERFLOW_TARGET, UNDERFLOW_TARGET_NOISE,
};
pub use plot::{emit_plot, read_series, render_svg, PlotOptions, Series};
pub use run::{
    argmax_rows, compare, evaluate_split, load_dataset, run, train, write_outcome, Comparison, EpochRecord, RunArtifacts, RunOutcome,
    RunSummary, EPOCHS_HEADER, SUMMARY_HEADER,
};
