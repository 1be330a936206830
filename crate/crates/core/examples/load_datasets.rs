//! Loading IDX and CSV files, and the errors malformed files produce.
//!
//! ```bash
//! cargo run --example load_datasets
//! ```

use std::fs;

use trikd::data::{load_csv, load_idx_split, save_csv, Dataset, SplitId};
use trikd::nn::ArchitectureSpec;
use trikd::trainer::{run_wiring, DistillConfig, Roles, Wiring};

/// Big-endian IDX bytes for a `u8` array.
fn idx(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    dims.iter().for_each(|d| out.extend(d.to_be_bytes()));
    out.extend_from_slice(payload);
    out
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);

    // 40 4×4 images: class 1 is bright in the top half, class 0 in the bottom
    let (n, side) = (40u32, 4u32);
    let labels: Vec<u8> = (0..n as u8).map(|i| i % 2).collect();
    let pixels: Vec<u8> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, &y)| (0..side * side).map(move |p| if (p < 8) == (y == 1) { 200 + (i % 50) as u8 } else { (p * 3) as u8 }))
        .collect();
    fs::write(path("images.idx"), idx(&[n, 1, side, side], &pixels)).unwrap();
    fs::write(path("labels.idx"), idx(&[n], &labels)).unwrap();
    let train = load_idx_split(path("images.idx"), path("labels.idx"), SplitId::Train).unwrap();
    println!("IDX: {} samples of {} features, {} classes", train.len(), train.input_dim(), train.num_classes);

    let data = Dataset { id: "idx-demo".into(), test: train.clone(), train };
    let spec = ArchitectureSpec::tiny_cnn([1, 4, 4], 2, [4, 4], 1.0);
    let cfg = DistillConfig { epochs: 15, batch_size: 8, ..DistillConfig::new(Wiring::LabelOnly, spec.clone(), spec.with_multiplier(2.0)) };
    let r = run_wiring(Wiring::LabelOnly, &cfg, &data, 0, Roles::default()).unwrap();
    println!("tiny CNN after {} epochs: accuracy {:.3}", cfg.epochs, r.final_student_test_acc());

    save_csv(&data.train, path("train.csv"), "label").unwrap();
    let back = load_csv(path("train.csv"), "label", SplitId::Train).unwrap();
    println!("CSV round trip: {} rows, inputs equal: {}", back.len(), back.inputs.data() == data.train.inputs.data());

    fs::write(path("short.idx"), &idx(&[n], &labels)[..20]).unwrap();
    fs::write(path("ragged.csv"), "x0,x1,label\n0.1,0.2,0\n0.3,1\n").unwrap();
    fs::write(path("text.csv"), "x0,label\nabc,1\n").unwrap();
    println!("\nmalformed inputs:");
    println!("  {}", load_idx_split(path("images.idx"), path("short.idx"), SplitId::Train).unwrap_err());
    println!("  {}", load_csv(path("ragged.csv"), "label", SplitId::Train).unwrap_err());
    println!("  {}", load_csv(path("text.csv"), "label", SplitId::Train).unwrap_err());
    println!("  {}", load_csv(path("train.csv"), "class", SplitId::Train).unwrap_err());
}
