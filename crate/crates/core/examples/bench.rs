// Ordering calibration probe: key combos only.
use std::time::Instant;
use leco::harness::*;
use leco::losses::*;
use leco::model::InitStrategy;
use leco::synthdata::*;
use leco::trainer::TrainConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sigma_noise: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let tail: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let sigma_fine: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let wd: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let depth: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let sigma_coarse: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(4.0);

    let config = ExperimentConfig {
        name: "probe".into(),
        taxonomy: TaxonomySource::Shape { level_sizes: vec![20, 100] },
        data: HierarchicalGaussianSpec {
            dim: 32, sigma_coarse, sigma_fine, sigma_noise,
            tail_exponent: tail, seed: 0,
        },
        num_tps: 2,
        budget_per_tp: 10_000,
        budgets: None,
        test_size: 5000,
        plan: vec![
            TpPlanSet::single(AnnotationStrategy::LabelNew, InitStrategy::TrainScratch, LossSpec::base_only()),
            TpPlanSet {
                annotations: vec![AnnotationStrategy::LabelNew],
                trainings: vec![InitStrategy::FinetunePrev, InitStrategy::TrainScratch],
                losses: vec![
                    LossSpec::base_only(),
                    LossSpec { use_joint: true, ..LossSpec::default() },
                ],
            },
        ],
        train: TrainConfig { seed: 0, weight_decay: wd, base_lr: lr, ..TrainConfig::default() },
        hidden_widths: vec![128; depth],
        seeds: (0..5).map(|i| seed + i).collect(),
        output_dir: "/tmp/bench/out".into(),
    };
    let t0 = Instant::now();
    let out = run_experiment(&config, false).unwrap();
    let mut config2 = config.clone();
    config2.plan[1] = TpPlanSet::single(AnnotationStrategy::AllFine, InitStrategy::FinetunePrev, LossSpec::base_only());
    let out2 = run_experiment(&config2, false).unwrap();
    println!("--- sc={sigma_coarse} sf={sigma_fine} sn={sigma_noise} tail={tail} seed={seed} wd={wd} depth={depth} lr={lr} ({:.0}s)", t0.elapsed().as_secs_f64());
    for a in out.table.aggregate() {
        if a.tp == 0 {
            println!("{:>7.3}  tp0 {}", 100.0 * a.mean, a.combo);
        }
    }
    for o in [&out, &out2] {
        for a in o.table.aggregate() {
            if a.tp == 1 && a.level == 1 {
                let short: String = a.combo.split('|').next_back().unwrap().to_string();
                println!("{:>7.3}  {short}", 100.0 * a.mean);
            }
        }
    }
}
