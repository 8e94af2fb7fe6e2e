//! Write a blob dataset as IDX files and read it back.
//!
//! cargo run --example idx_roundtrip [dir]

use felo::cli::gen_data_to_dir;
use felo::data::load_idx;
use felo::ExperimentConfig;

fn main() -> felo::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "idx-data".to_string());
    let dir = std::path::Path::new(&dir);
    let config = ExperimentConfig::default();
    gen_data_to_dir(&config, dir)?;
    for split in ["train", "test"] {
        let ds = load_idx(
            dir.join(format!("{split}-images.idx")),
            dir.join(format!("{split}-labels.idx")),
        )?;
        println!(
            "{split}: {} rows of {} values, classes {:?}",
            ds.len(),
            ds.d_in(),
            ds.class_histogram()
        );
    }
    Ok(())
}
