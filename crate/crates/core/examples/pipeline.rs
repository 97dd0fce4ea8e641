//! Runs the full pipeline once and prints the headline numbers.
//!
//! cargo run --release -p vidgate-core --example pipeline -- [seed] [gamma]

use std::time::Instant;

use vidgate::config::ExperimentConfig;
use vidgate::data::generate;
use vidgate::eval::evaluate;
use vidgate::gating::{FullUsage, Learned, RandomKeep};
use vidgate::selection::build_selection_net;
use vidgate::trainer::{finetune_with_random, pretrain_classifier, train_adaptive};
use vidgate::video_net::build_toy_net;

fn main() -> vidgate::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = ExperimentConfig::default().with_seed(seed);
    if let Some(g) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.reward.gamma = g;
    }
    let t0 = Instant::now();
    let data = generate(&cfg.dataset, seed)?;
    let mut f = build_toy_net(cfg.net_spec()?, seed)?;
    pretrain_classifier(&mut f, &data.train, &cfg.train)?;
    println!("pretrain done {:.1}s", t0.elapsed().as_secs_f64());
    let k = f.num_temporal();
    let t = cfg.dataset.frames;
    let (upper, _) = evaluate(
        &FullUsage {
            frames: t,
            stages: k,
        },
        &f,
        &data.test,
        &cfg.reward,
    )?;
    println!(
        "upper acc {:.4} flops {:.0}",
        upper.accuracy, upper.mean_flops
    );

    let sel = build_selection_net(cfg.selection_spec()?, seed)?;
    let run = train_adaptive(&f, sel, &data.train, &cfg.train, &cfg.reward)?;
    for r in &run.metrics {
        println!("{r:?}");
    }
    println!("adaptive done {:.1}s", t0.elapsed().as_secs_f64());
    let (s1, _) = evaluate(
        &Learned::new(run.selection_stage1.clone()),
        &f,
        &data.test,
        &cfg.reward,
    )?;
    println!(
        "stage1 acc {:.4} flops {:.0} 3d {:.2} frames {:.2}",
        s1.accuracy, s1.mean_flops, s1.mean_3d, s1.mean_frames
    );
    let learned = Learned::new(run.selection.clone());
    let (ada, _) = evaluate(&learned, &run.classifier, &data.test, &cfg.reward)?;
    println!(
        "ada acc {:.4} flops {:.0} ({:.3}) 3d {:.2} frames {:.2}",
        ada.accuracy,
        ada.mean_flops,
        ada.mean_flops / upper.mean_flops,
        ada.mean_3d,
        ada.mean_frames
    );
    for (k, v) in &ada.per_tag {
        println!("  {k}: {v:?}");
    }
    let (frozen, _) = evaluate(&learned, &f, &data.test, &cfg.reward)?;
    println!("frozen-F same masks acc {:.4}", frozen.accuracy);
    let rand = RandomKeep::matching(t, k, ada.mean_frames, ada.mean_3d, seed)?;
    let (r, _) = evaluate(&rand, &f, &data.test, &cfg.reward)?;
    println!(
        "random acc {:.4} flops {:.0} 3d {:.2} frames {:.2}",
        r.accuracy, r.mean_flops, r.mean_3d, r.mean_frames
    );
    let mut fr = f.clone();
    finetune_with_random(&mut fr, &rand, &data.train, &cfg.train)?;
    let (rf, _) = evaluate(&rand, &fr, &data.test, &cfg.reward)?;
    println!("random_ft acc {:.4}", rf.accuracy);
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
