//! Which supervision helps the student: labels alone (L), plus an online
//! teacher (L+T), plus an anchor (L+A), or all three (L+T+A).
//!
//! ```bash
//! cargo run --release --example role_ablation
//! ```

use trikd::data::{generate_synthetic, SyntheticSpec};
use trikd::nn::ArchitectureSpec;
use trikd::trainer::{run_wiring, DistillConfig, Roles, Wiring};

fn main() {
    let base = ArchitectureSpec::mlp(2, 5, &[64, 64], 1.0);
    let cfg = DistillConfig { epochs: 30, ..DistillConfig::new(Wiring::Trikd, base.with_multiplier(0.5), base.with_multiplier(2.0)) };
    println!("{:>4} {:>8} {:>8} {:>8} {:>8} {:>8}", "seed", "L", "L+T", "L+A", "L+T+A", "Bayes");
    for seed in 0..2 {
        let data = generate_synthetic(&SyntheticSpec { seed, ..SyntheticSpec::default() }).unwrap();
        let run = |w, s, anchor| run_wiring(w, &cfg, &data, s, Roles { anchor, teacher: None }).unwrap();
        let l = run(Wiring::LabelOnly, seed, None);
        let lt = run(Wiring::OnlineDml, seed, None);
        let la = run(Wiring::BornAgain, seed + 1, Some(l.student.clone()));
        let lta = run(Wiring::Trikd, seed + 1, Some(lt.student.clone()));
        let bayes = (0..data.test.len())
            .filter(|&i| {
                let p = data.test.posterior_row(i).unwrap();
                (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])) == Some(data.test.labels[i])
            })
            .count() as f64
            / data.test.len() as f64;
        let acc = |r: &trikd::trainer::TrainReport| r.final_student_test_acc();
        println!("{seed:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {bayes:>8.4}", acc(&l), acc(&lt), acc(&la), acc(&lta));
    }
}
