//! How closely the student ends up mimicking its teacher under offline,
//! online and anchored distillation.
//!
//! ```bash
//! cargo run --release --example behavior_similarity
//! ```

use trikd::data::{generate_synthetic, SyntheticSpec};
use trikd::metrics::behavior_similarity;
use trikd::nn::ArchitectureSpec;
use trikd::trainer::{run_wiring, DistillConfig, Roles, Wiring};

fn main() {
    let data = generate_synthetic(&SyntheticSpec { seed: 4, ..SyntheticSpec::default() }).unwrap();
    let base = ArchitectureSpec::mlp(2, 5, &[32, 32], 1.0);
    let cfg = DistillConfig { epochs: 20, ..DistillConfig::new(Wiring::Trikd, base.with_multiplier(0.5), base.with_multiplier(2.0)) };
    let run = |w, s, roles| run_wiring(w, &cfg, &data, s, roles).unwrap();

    let label = run(Wiring::LabelOnly, 4, Roles::default());
    let offline = run(Wiring::OfflineKd, 4, Roles { anchor: None, teacher: label.teacher.clone() });
    let dml = run(Wiring::OnlineDml, 4, Roles::default());
    let tri = run(Wiring::Trikd, 5, Roles { anchor: Some(dml.student.clone()), teacher: None });

    println!("{:<11} {:>10} {:>10}", "method", "KL train", "KL test");
    for (name, r) in [("offline KD", &offline), ("online DML", &dml), ("TriKD", &tri)] {
        let s = behavior_similarity(r.teacher.as_ref().unwrap(), &r.student, &data).unwrap();
        println!("{name:<11} {:>10.5} {:>10.5}", s.kl_train, s.kl_test);
    }
}
