//! Calibration of label-only models as width grows, with a reliability
//! table for the narrowest and widest.
//!
//! ```bash
//! cargo run --release --example calibration_width
//! ```

use trikd::data::{generate_synthetic, SyntheticSpec};
use trikd::metrics::{model_accuracy, model_ece, CalibrationReport, ECE_BINS};
use trikd::nn::ArchitectureSpec;
use trikd::trainer::{run_wiring, DistillConfig, Roles, Wiring};

fn reliability(name: &str, rep: &CalibrationReport) {
    println!("\n{name}: confidence bin, mean confidence, accuracy, count");
    let n = rep.bin_count() as f64;
    for (b, bin) in rep.bins.iter().enumerate().filter(|(_, bin)| bin.count > 0) {
        println!("  ({:.3}, {:.3}]  {:.3}  {:.3}  {}", b as f64 / n, (b + 1) as f64 / n, bin.confidence_mean, bin.accuracy, bin.count);
    }
}

fn main() {
    let data = generate_synthetic(&SyntheticSpec { seed: 2, ..SyntheticSpec::default() }).unwrap();
    let base = ArchitectureSpec::mlp(2, 5, &[64, 64], 1.0);
    let mut reports = Vec::new();
    // each label-only run trains two independent widths
    for (s, t) in [(0.5, 2.0), (1.0, 4.0)] {
        let cfg = DistillConfig { epochs: 30, ..DistillConfig::new(Wiring::LabelOnly, base.with_multiplier(s), base.with_multiplier(t)) };
        let r = run_wiring(Wiring::LabelOnly, &cfg, &data, 2, Roles::default()).unwrap();
        reports.push((s, r.student));
        reports.push((t, r.teacher.unwrap()));
    }
    reports.sort_by(|a, b| a.0.total_cmp(&b.0));
    println!("{:>6} {:>8} {:>8} {:>8}", "width", "params", "acc", "ECE");
    for (w, net) in &reports {
        let ece = model_ece(net, &data.test, ECE_BINS).unwrap().ece;
        println!("{w:>5}X {:>8} {:>8.4} {ece:>8.4}", net.param_count(), model_accuracy(net, &data.test).unwrap());
    }
    reliability("0.5X", &model_ece(&reports[0].1, &data.test, ECE_BINS).unwrap());
    reliability("4X", &model_ece(&reports[3].1, &data.test, ECE_BINS).unwrap());
}
