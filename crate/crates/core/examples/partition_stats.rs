//! Per-client class histograms under iid and Dirichlet splits.
//!
//! cargo run --example partition_stats [dirichlet_alpha]

use felo::data::{dirichlet_partition, generate_blobs, iid_partition, Dataset};

fn show(title: &str, data: &Dataset, clients: &[Vec<usize>]) -> felo::Result<()> {
    println!("{title}");
    for (k, idx) in clients.iter().enumerate() {
        let hist = data.subset(idx)?.class_histogram();
        let cells: Vec<String> = hist.iter().map(|n| format!("{n:>3}")).collect();
        println!("  client {k:>2} ({:>4}): {}", idx.len(), cells.join(" "));
    }
    Ok(())
}

fn main() -> felo::Result<()> {
    let alpha: f64 = std::env::args()
        .nth(1)
        .map_or(0.5, |s| s.parse().expect("alpha"));
    let data = generate_blobs(10, 32, 200, 0.3, 0)?;
    show("iid", &data, iid_partition(data.labels(), 10, 0)?.clients())?;
    show(
        &format!("dirichlet({alpha})"),
        &data,
        dirichlet_partition(data.labels(), 10, alpha, 0)?.clients(),
    )
}
