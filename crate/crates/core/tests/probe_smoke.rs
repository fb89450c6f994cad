//! Scratch calibration probe (deleted before ship).
use diet_core::backbone::{build_backbone, Arch, Hyper};
use diet_core::data::{
    kcore_filter, keep_positive, split, synthetic_clustered, ClusteredConfig, SplitKind,
};
use diet_core::rng::Rng;
use diet_core::trainer::{evaluate_model, fit, Mode, ModelKind, SerialExecutor, TrainConfig};
use std::time::Instant;

#[test]
#[ignore]
fn probe_standin_base_vs_diet() {
    let log = synthetic_clustered(&ClusteredConfig::default());
    let pos = keep_positive(&log, 4.0);
    let core = kcore_filter(&pos, 20);
    let s = split(&core, SplitKind::LeaveOneOut, 0);
    println!(
        "stand-in: users={} items={} records={} train_users={} test={}",
        core.n_users, core.n_items, core.records.len(), s.train_users.len(), s.test.len()
    );
    for (mode, epochs, lr, kr) in [
        (Mode::Base, 20, 0.001, 1.0),
        (Mode::Diet, 20, 0.001, 0.1),
    ] {
        let t0 = Instant::now();
        let mut backbone =
            build_backbone(Arch::SasRec, s.n_items, Hyper::default(), &mut Rng::new(11)).unwrap();
        let cfg = TrainConfig {
            mode,
            epochs,
            keep_ratio: kr,
            lr_base: lr,
            batch_size: 32,
            negatives_per_positive: 1,
            positions_per_user: Some(1),
            seed: 5,
            ..TrainConfig::default()
        };
        let out = fit(&cfg, &s, &mut backbone, &SerialExecutor).unwrap();
        let kind = match &out.stack {
            Some(st) => ModelKind::Generated(st),
            None => ModelKind::Dense,
        };
        let m = evaluate_model(&backbone, &kind, &s.test, 10, true).unwrap();
        let first: f64 = out.log.iter().take(5).map(|r| r.loss).sum::<f64>() / 5.0;
        println!(
            "{:6} epochs={epochs} lr={lr} kr={kr} hit={:.4} ndcg={:.4} loss {:.3}->{:.3}  [{:.0}s]",
            mode.name(), m.hit, m.ndcg, first, out.final_epoch_loss,
            t0.elapsed().as_secs_f64()
        );
    }
}
