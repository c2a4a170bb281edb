use biomoe_core::trainer::{
    interference_report, make_synthetic_suite, stage1_train, stage2_train, InterferenceConfig, SuiteConfig,
    TrainConfig,
};
use biomoe_core::{assemble_unified, MoeConfig, RankPolicy};

fn defaults() -> (SuiteConfig, MoeConfig) {
    let suite = SuiteConfig::default();
    let moe = MoeConfig {
        d_model: suite.d_model,
        num_landmarks: suite.num_landmarks,
        ..MoeConfig::default()
    };
    (suite, moe)
}

#[test]
fn both_stages_reduce_loss_on_defaults() {
    let (suite_cfg, moe) = defaults();
    let suite = make_synthetic_suite(&suite_cfg, 11).unwrap();
    let train = TrainConfig { steps: 500, lr: 0.05 };
    let bundle = stage1_train(&suite, moe.d_inner, &train, 11).unwrap();
    for t in &bundle.tasks {
        assert!(t.meta.final_loss < t.meta.initial_loss, "{}: {:?}", t.id, t.meta);
    }

    let mut model = assemble_unified(&bundle, &RankPolicy::result_based(moe.tau), &moe).unwrap();
    let report = stage2_train(&mut model, &suite, &train).unwrap();
    let joint = report.joint_curve();
    assert!(joint[joint.len() - 1] < joint[0], "{} -> {}", joint[0], joint[joint.len() - 1]);
    for u in &report.usage {
        assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for e in 0..moe.num_experts {
        let mean = report.usage.iter().map(|u| u[e]).sum::<f64>() / report.usage.len() as f64;
        assert!(mean > 0.0, "routed expert {e} was never selected");
    }
}

#[test]
fn single_task_regimes_agree() {
    let (suite_cfg, moe) = defaults();
    let suite = make_synthetic_suite(&suite_cfg, 0).unwrap().subset(&[2]);
    let cfg = InterferenceConfig {
        moe,
        stage1: TrainConfig { steps: 300, lr: 0.05 },
        stage2: TrainConfig { steps: 300, lr: 0.05 },
        tolerance: 0.2,
    };
    let r = interference_report(&suite, &cfg).unwrap();
    let (spec, naive, ours) = (r.task_specific[0], r.naive_sharing[0], r.biomoe[0]);
    // Naive sharing is the specialist here. The expert model keeps its
    // routed experts on top, so it may undercut the specialist but must not
    // trail it.
    assert!((naive - spec).abs() <= 1e-12 * spec);
    assert!(ours <= 1.01 * spec, "biomoe {ours} vs specialist {spec}");
}
