//! Scratch harness for dialing in training budgets. Not part of the test
//! suite; run with `cargo run --release -p roadseg-core --example tune -- <cmd>`.

use std::time::Instant;

use roadseg_core::curriculum::{self, EntropyMode};
use roadseg_core::distill::{finetune_few, relative_weight_distance, DistillConfig};
use roadseg_core::rng;
use roadseg_core::segnet::NetConfig;
use roadseg_core::train::{
    evaluate_scenes, pretrain_supervised, run_curriculum, AdaptConfig, SelfTraining, SgdConfig,
};
use roadseg_core::weather::{corrupt, generate_scene, CorruptionSpec, Scene};

fn gen_scenes(seed: u64, purpose: &str, count: usize, w: usize, h: usize) -> Vec<Scene> {
    (0..count)
        .map(|i| {
            generate_scene(rng::derive_seed_indexed(seed, purpose, i as u64), w, h).unwrap()
        })
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cmd = args.first().map(String::as_str).unwrap_or("pretrain");
    let seed: u64 = args
        .iter()
        .position(|a| a == "--seed")
        .and_then(|i| args.get(i + 1))
        .and_then(|s| s.parse().ok())
        .unwrap_or(42);
    let epochs: usize = args
        .iter()
        .position(|a| a == "--epochs")
        .and_then(|i| args.get(i + 1))
        .and_then(|s| s.parse().ok())
        .unwrap_or(12);
    let step1_lr: f64 = args
        .iter()
        .position(|a| a == "--step1-lr")
        .and_then(|i| args.get(i + 1))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.2);
    let adapt_lr: f64 = args
        .iter()
        .position(|a| a == "--adapt-lr")
        .and_then(|i| args.get(i + 1))
        .and_then(|s| s.parse().ok())
        .unwrap_or(2.5e-4);

    let size: usize = args
        .iter()
        .position(|a| a == "--size")
        .and_then(|i| args.get(i + 1))
        .and_then(|s| s.parse().ok())
        .unwrap_or(64);
    let scenes_n: usize = args
        .iter()
        .position(|a| a == "--scenes")
        .and_then(|i| args.get(i + 1))
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let batch: usize = args
        .iter()
        .position(|a| a == "--batch")
        .and_then(|i| args.get(i + 1))
        .and_then(|s| s.parse().ok())
        .unwrap_or(8);
    let lr: f64 = args
        .iter()
        .position(|a| a == "--lr")
        .and_then(|i| args.get(i + 1))
        .and_then(|s| s.parse().ok())
        .unwrap_or(2.5e-4);

    match cmd {
        "pretrain" => pretrain_probe(seed, epochs, size, scenes_n, batch, lr),
        "grads" => grad_probe(seed, size, scenes_n),
        "ladder" => ladder_probe(seed, epochs, lr, size, scenes_n),
        "adapt" => adapt_probe(seed, epochs, lr, step1_lr, adapt_lr, size, scenes_n),
        "transfer" => transfer_probe(seed, epochs, lr, step1_lr, adapt_lr, size, scenes_n),
        "stab" => stability_probe(seed, epochs, lr, size, scenes_n),
        "pmap" => pmap_probe(seed, epochs, lr, size, scenes_n),
        "distill" => distill_probe(seed, epochs, lr, step1_lr, adapt_lr),
        other => eprintln!("unknown command {other}"),
    }
}

/// Probability-mass histograms of the pretrained model across the ladder,
/// split by true class.
fn pmap_probe(seed: u64, epochs: usize, lr: f64, size: usize, scenes_n: usize) {
    use roadseg_core::segnet::predict;
    let net = NetConfig {
        width: size,
        height: size,
        ..NetConfig::default()
    };
    let train = gen_scenes(seed, "train", scenes_n, size, size);
    let sgd = SgdConfig {
        epochs,
        lr,
        ..SgdConfig::default()
    };
    let (pre, _) = pretrain_supervised(&train, &net, &sgd, seed).unwrap();
    let base = gen_scenes(seed, "target", 16, size, size);
    let inv_e = std::f64::consts::E.recip();
    for v in [f64::INFINITY, 750.0, 375.0, 150.0, 75.0, 50.0, 30.0] {
        let scenes: Vec<Scene> = if v.is_finite() {
            base.iter()
                .map(|s| corrupt(s, CorruptionSpec::fog(v)).unwrap())
                .collect()
        } else {
            base.clone()
        };
        // Histogram buckets: [<0.1, 0.1..1/e, 1/e..0.5, 0.5..0.9, >=0.9]
        let mut road = [0usize; 5];
        let mut bg = [0usize; 5];
        for scene in &scenes {
            let p = predict(&net, &pre, &scene.image).unwrap();
            for (i, &pv) in p.data().iter().enumerate() {
                let bucket = if pv < 0.1 {
                    0
                } else if pv < inv_e {
                    1
                } else if pv < 0.5 {
                    2
                } else if pv < 0.9 {
                    3
                } else {
                    4
                };
                if scene.label.data()[i] == 1 {
                    road[bucket] += 1;
                } else {
                    bg[bucket] += 1;
                }
            }
        }
        let total: usize = road.iter().sum::<usize>() + bg.iter().sum::<usize>();
        let fmt = |b: [usize; 5]| {
            b.iter()
                .map(|&c| format!("{:5.1}", 100.0 * c as f64 / total as f64))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!("V={v:6}: road [{}]  bg [{}]", fmt(road), fmt(bg));
    }
}

/// Epoch-by-epoch behavior of each step alone at one severity: does it
/// improve the rung it trains on, and the next heavier rung?
fn stability_probe(seed: u64, epochs: usize, lr: f64, size: usize, scenes_n: usize) {
    use roadseg_core::train::{step1_entropy_min, step2_online_selftrain};
    let args: Vec<String> = std::env::args().collect();
    let grab = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|s| s.parse().ok())
            .unwrap_or(default)
    };
    let severity: f64 = grab("--severity", 150.0);
    let tau = grab("--tau", 0.5);
    let next_severity = severity / 2.0;
    let net = NetConfig {
        width: size,
        height: size,
        ..NetConfig::default()
    };
    let train = gen_scenes(seed, "train", scenes_n, size, size);
    let sgd = SgdConfig {
        epochs,
        lr,
        ..SgdConfig::default()
    };
    let (pre, _) = pretrain_supervised(&train, &net, &sgd, seed).unwrap();
    let base = gen_scenes(seed, "target", 16, size, size);
    let rung: Vec<Scene> = base
        .iter()
        .map(|s| corrupt(s, CorruptionSpec::fog(severity)).unwrap())
        .collect();
    let next_rung: Vec<Scene> = base
        .iter()
        .map(|s| corrupt(s, CorruptionSpec::fog(next_severity)).unwrap())
        .collect();
    let images: Vec<_> = rung.iter().map(|s| s.image.clone()).collect();
    println!(
        "V={severity} frozen here {:?} next(V={next_severity}) {:?}",
        evaluate_scenes(&net, &pre, &rung).unwrap().miou,
        evaluate_scenes(&net, &pre, &next_rung).unwrap().miou
    );
    for (which, lr2, mu) in [
        ("step1", 0.003, 0.0),
        ("step2", 0.003, 0.0),
        ("step2", 0.01, 0.0),
    ] {
        let mut params = pre.clone();
        println!("{which} lr {lr2} mu {mu} (miou/recall/precision here, miou next):");
        for _ in 0..6 {
            let acfg = AdaptConfig {
                tau,
                step1_epochs: 1,
                step2_epochs: 1,
                step1_lr: lr2,
                sgd: SgdConfig {
                    lr: lr2,
                    momentum: mu,
                    weight_decay: 0.0,
                    batch_size: 4,
                    ..SgdConfig::default()
                },
                ..AdaptConfig::default()
            };
            let next = if which == "step1" {
                step1_entropy_min(params, &images, &net, &acfg).unwrap().0
            } else {
                step2_online_selftrain(params, &images, &net, &acfg).unwrap().0
            };
            params = next;
            let here = evaluate_scenes(&net, &params, &rung).unwrap();
            println!(
                "  {:.3}/{:.3}/{:.3}  next {:.3}",
                here.miou.unwrap(),
                here.recall.unwrap(),
                here.precision.unwrap(),
                evaluate_scenes(&net, &params, &next_rung).unwrap().miou.unwrap()
            );
        }
    }
}

/// Does the two-step procedure, run along a fine severity ladder, extend
/// road recovery into heavier fog?
fn transfer_probe(
    seed: u64,
    epochs: usize,
    lr: f64,
    step1_lr: f64,
    adapt_lr: f64,
    size: usize,
    scenes_n: usize,
) {
    use roadseg_core::train::{step1_entropy_min, step2_online_selftrain};
    let args: Vec<String> = std::env::args().collect();
    let grab = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|s| s.parse().ok())
            .unwrap_or(default)
    };
    let tau = grab("--tau", 0.5);
    let mu = grab("--mu", 0.0);
    let wd = grab("--wd", 0.0);
    let pre_epochs = grab("--pre-epochs", epochs as f64) as usize;
    let s1e = grab("--s1e", 1.0) as usize;
    let s2e = grab("--s2e", 2.0) as usize;
    let per_rung = grab("--per-rung", 16.0) as usize;

    let net = NetConfig {
        width: size,
        height: size,
        ..NetConfig::default()
    };
    let train = gen_scenes(seed, "train", scenes_n, size, size);
    let sgd = SgdConfig {
        epochs: pre_epochs,
        lr,
        ..SgdConfig::default()
    };
    let (mut params, _) = pretrain_supervised(&train, &net, &sgd, seed).unwrap();
    let pre = params.clone();
    let base = gen_scenes(seed, "target", per_rung, size, size);
    let ladder: Vec<f64> = if args.iter().any(|a| a == "--ladder4") {
        vec![375.0, 150.0, 75.0, 30.0]
    } else {
        vec![750.0, 375.0, 150.0, 75.0, 50.0, 40.0, 30.0]
    };
    let rungs: Vec<(f64, Vec<Scene>)> = ladder
        .iter()
        .map(|&v| {
            let spec = CorruptionSpec::fog(v);
            (v, base.iter().map(|s| corrupt(s, spec).unwrap()).collect())
        })
        .collect();
    print!("frozen: ");
    for (v, scenes) in &rungs {
        print!(
            "V{v}={:.3} ",
            evaluate_scenes(&net, &pre, scenes).unwrap().miou.unwrap()
        );
    }
    println!();
    let acfg = AdaptConfig {
        tau,
        step1_lr,
        step1_epochs: s1e,
        step2_epochs: s2e,
        sgd: SgdConfig {
            lr: adapt_lr,
            momentum: mu,
            weight_decay: wd,
            batch_size: 4,
            ..SgdConfig::default()
        },
        ..AdaptConfig::default()
    };
    for (v, scenes) in &rungs {
        let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
        let (p1, _) = step1_entropy_min(params.clone(), &images, &net, &acfg).unwrap();
        let (p2, _) = step2_online_selftrain(p1, &images, &net, &acfg).unwrap();
        params = p2;
        print!("after V={v:5}: ");
        for (v2, scenes2) in &rungs {
            print!(
                "V{v2}={:.3} ",
                evaluate_scenes(&net, &params, scenes2).unwrap().miou.unwrap()
            );
        }
        let all: Vec<Scene> = rungs.iter().flat_map(|(_, s)| s.clone()).collect();
        println!(
            "| target-all {:.3}",
            evaluate_scenes(&net, &params, &all).unwrap().miou.unwrap()
        );
    }
}

fn grad_probe(seed: u64, size: usize, scenes_n: usize) {
    use roadseg_core::autograd::Tape;
    use roadseg_core::segnet::{bce_loss, forward, init_params, stage_params};
    let net = NetConfig {
        width: size,
        height: size,
        ..NetConfig::default()
    };
    let scenes = gen_scenes(seed, "train", scenes_n.min(8), size, size);
    let params = init_params(&net, seed).unwrap();
    let mut acc: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for scene in &scenes {
        let tape = Tape::new();
        let vars = stage_params(&tape, &params, true);
        let p = forward(&net, &vars, &tape, &scene.image).unwrap();
        bce_loss(&p, &scene.label).unwrap().backward().unwrap();
        for (name, g) in vars.grads() {
            let entry = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in entry.iter_mut().zip(&g) {
                *a += b / scenes.len() as f64;
            }
        }
    }
    for (name, g) in &acc {
        let rms = (g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64).sqrt();
        let max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!("{name:14} rms {rms:10.4} max {max:10.4}");
    }
}

fn pretrain_probe(seed: u64, epochs: usize, size: usize, scenes_n: usize, batch: usize, lr: f64) {
    let net = NetConfig {
        width: size,
        height: size,
        ..NetConfig::default()
    };
    let train = gen_scenes(seed, "train", scenes_n, size, size);
    let holdout = gen_scenes(seed, "holdout", scenes_n / 4, size, size);
    let t0 = Instant::now();
    for budget in [epochs / 4, epochs / 2, epochs].into_iter().filter(|&e| e > 0) {
        let cfg = SgdConfig {
            epochs: budget,
            batch_size: batch,
            lr,
            ..SgdConfig::default()
        };
        let t = Instant::now();
        let (params, losses) = pretrain_supervised(&train, &net, &cfg, seed).unwrap();
        let train_time = t.elapsed().as_secs_f64();
        let rep = evaluate_scenes(&net, &params, &holdout).unwrap();
        println!(
            "epochs {budget:3} loss {:.4} holdout mIoU {:?} road {:?} ({train_time:.1}s)",
            losses.last().unwrap(),
            rep.miou,
            rep.road_iou
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}

fn ladder_probe(seed: u64, epochs: usize, lr: f64, size: usize, scenes_n: usize) {
    let net = NetConfig {
        width: size,
        height: size,
        ..NetConfig::default()
    };
    let train = gen_scenes(seed, "train", scenes_n, size, size);
    let sgd = SgdConfig {
        epochs,
        lr,
        ..SgdConfig::default()
    };
    let t = Instant::now();
    let (params, _) = pretrain_supervised(&train, &net, &sgd, seed).unwrap();
    println!("pretrain {:.1}s", t.elapsed().as_secs_f64());
    let base = gen_scenes(seed, "target", 12, size, size);
    let mut panel: Vec<(String, Vec<Scene>)> = vec![("clean".into(), base.clone())];
    for v in [375.0, 150.0, 75.0, 30.0] {
        let spec = CorruptionSpec::fog(v);
        panel.push((
            spec.tag(),
            base.iter().map(|s| corrupt(s, spec).unwrap()).collect(),
        ));
    }
    for (name, scenes) in &panel {
        let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
        let ent =
            roadseg_core::train::mean_entropy(&net, &params, &images, EntropyMode::Paper).unwrap();
        let ent_b =
            roadseg_core::train::mean_entropy(&net, &params, &images, EntropyMode::Binary).unwrap();
        let rep = evaluate_scenes(&net, &params, scenes).unwrap();
        println!(
            "{name:10} entropy {ent:.5} binary {ent_b:.5} mIoU {:?} road {:?}",
            rep.miou, rep.road_iou
        );
    }
}

fn adapt_probe(seed: u64, epochs: usize, lr: f64, step1_lr: f64, adapt_lr: f64, size: usize, scenes_n: usize) {
    let args: Vec<String> = std::env::args().collect();
    let grab = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|s| s.parse().ok())
            .unwrap_or(default)
    };
    let tau = grab("--tau", 0.2);
    let mu = grab("--mu", 0.0);
    let wd = grab("--wd", 0.0);
    let pre_epochs = grab("--pre-epochs", epochs as f64) as usize;
    let s1e = grab("--s1e", 1.0) as usize;
    let s2e = grab("--s2e", 2.0) as usize;
    let per_rung = grab("--per-rung", 12.0) as usize;
    let m = grab("--m", 4.0) as usize;

    let net = NetConfig {
        width: size,
        height: size,
        ..NetConfig::default()
    };
    let train = gen_scenes(seed, "train", scenes_n, size, size);
    let holdout = gen_scenes(seed, "holdout", scenes_n / 4, size, size);
    let sgd = SgdConfig {
        epochs: pre_epochs,
        lr,
        ..SgdConfig::default()
    };
    let t = Instant::now();
    let (pre, _) = pretrain_supervised(&train, &net, &sgd, seed).unwrap();
    eprintln!("pretrain {:.1}s", t.elapsed().as_secs_f64());
    let clean_rep = evaluate_scenes(&net, &pre, &holdout).unwrap();
    println!("clean holdout mIoU {:?}", clean_rep.miou);

    let base = gen_scenes(seed, "target", per_rung, size, size);
    let ladder = [375.0, 150.0, 75.0, 30.0];
    let mut target: Vec<Scene> = Vec::new();
    for v in ladder {
        let spec = CorruptionSpec::fog(v);
        target.extend(base.iter().map(|s| corrupt(s, spec).unwrap()));
    }
    let heaviest: Vec<Scene> = base
        .iter()
        .map(|s| corrupt(s, CorruptionSpec::fog(30.0)).unwrap())
        .collect();
    let frozen_rep = evaluate_scenes(&net, &pre, &heaviest).unwrap();
    println!(
        "frozen: target-all {:?} heaviest {:?}",
        evaluate_scenes(&net, &pre, &target).unwrap().miou,
        frozen_rep.miou
    );

    let acfg = AdaptConfig {
        tau,
        step1_epochs: s1e,
        step2_epochs: s2e,
        step1_lr,
        m,
        sgd: SgdConfig {
            lr: adapt_lr,
            momentum: mu,
            weight_decay: wd,
            batch_size: 4,
            ..SgdConfig::default()
        },
        ..AdaptConfig::default()
    };
    let scores = curriculum::score_dataset(&net, &pre, &target, acfg.entropy_mode).unwrap();
    let plan = curriculum::sort_and_partition(&scores, acfg.m).unwrap();
    let t = Instant::now();
    let outcome =
        run_curriculum(&net, pre.clone(), &plan, &target, &acfg, SelfTraining::Online).unwrap();
    let (adapted, snaps) = (outcome.final_params, outcome.snapshots);
    eprintln!("adapt {:.1}s", t.elapsed().as_secs_f64());
    for s in &snaps {
        println!(
            "  batch {} ent {:.4} -> {:.4} -> {:.4} mIoU step1 {:.4} step2 {:.4}",
            s.batch_index,
            s.entropy_before,
            s.entropy_after_step1,
            s.entropy_after_step2,
            s.miou_after_step1.unwrap(),
            s.miou_after_step2.unwrap()
        );
    }
    let adapted_heavy = evaluate_scenes(&net, &adapted, &heaviest).unwrap();
    let adapted_clean = evaluate_scenes(&net, &adapted, &holdout).unwrap();
    println!(
        "adapted: heaviest {:.4} (frozen {:.4}) clean {:.4} (was {:.4})",
        adapted_heavy.miou.unwrap(),
        frozen_rep.miou.unwrap(),
        adapted_clean.miou.unwrap(),
        clean_rep.miou.unwrap()
    );

    let plan1 = curriculum::sort_and_partition(&scores, 1).unwrap();
    let flat = run_curriculum(&net, pre.clone(), &plan1, &target, &acfg, SelfTraining::Online)
        .unwrap()
        .final_params;
    println!(
        "no-curriculum heaviest {:.4}",
        evaluate_scenes(&net, &flat, &heaviest).unwrap().miou.unwrap()
    );

    let iter = run_curriculum(
        &net,
        pre,
        &plan,
        &target,
        &acfg,
        SelfTraining::IterativeFrozen,
    )
    .unwrap()
    .final_params;
    println!(
        "iterative heaviest {:.4}",
        evaluate_scenes(&net, &iter, &heaviest).unwrap().miou.unwrap()
    );
}

fn distill_probe(seed: u64, epochs: usize, lr: f64, step1_lr: f64, adapt_lr: f64) {
    let net = NetConfig {
        width: 32,
        height: 32,
        channels: vec![8, 16],
        downsamplings: 2,
        attention: true,
        reduction: 8,
    };
    let train = gen_scenes(seed, "train", 80, 32, 32);
    let sgd = SgdConfig {
        epochs,
        lr,
        ..SgdConfig::default()
    };
    let t = Instant::now();
    let (pre, _) = pretrain_supervised(&train, &net, &sgd, seed).unwrap();
    println!("pretrain {:.1}s", t.elapsed().as_secs_f64());

    // Mixed-corruption target.
    let base = gen_scenes(seed, "target", 24, 32, 32);
    let specs = [
        CorruptionSpec::fog(75.0),
        CorruptionSpec::rain(100.0),
        CorruptionSpec::night(0.35),
    ];
    let target: Vec<Scene> = base
        .iter()
        .enumerate()
        .map(|(i, s)| corrupt(s, specs[i % specs.len()]).unwrap())
        .collect();
    let held_base = gen_scenes(seed, "held", 24, 32, 32);
    let held: Vec<Scene> = held_base
        .iter()
        .enumerate()
        .map(|(i, s)| corrupt(s, specs[i % specs.len()]).unwrap())
        .collect();

    let acfg = AdaptConfig {
        step1_lr,
        sgd: SgdConfig {
            lr: adapt_lr,
            batch_size: 4,
            ..SgdConfig::default()
        },
        ..AdaptConfig::default()
    };
    let scores = curriculum::score_dataset(&net, &pre, &target, acfg.entropy_mode).unwrap();
    let plan = curriculum::sort_and_partition(&scores, acfg.m).unwrap();
    let anchor =
        run_curriculum(&net, pre, &plan, &target, &acfg, SelfTraining::Online)
            .unwrap()
            .final_params;
    println!(
        "anchor: target {:?} held {:?}",
        evaluate_scenes(&net, &anchor, &target).unwrap().miou,
        evaluate_scenes(&net, &anchor, &held).unwrap().miou
    );

    // k labeled scenes drawn from the target.
    let mut pick = rng::stream(seed, "k-select");
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..target.len()).collect();
    idx.shuffle(&mut pick);
    let labeled: Vec<Scene> = idx[..10].iter().map(|&i| target[i].clone()).collect();

    for lambda in [0.0, 1.0, 1e6] {
        let dcfg = DistillConfig {
            lambda,
            epochs: 40,
            sgd: SgdConfig {
                lr: 2.5e-4,
                batch_size: 10,
                ..SgdConfig::default()
            },
            ..DistillConfig::default()
        };
        let (tuned, _) = finetune_few(&anchor, &labeled, &net, &dcfg).unwrap();
        println!(
            "lambda {lambda:>9.1}: held {:?} rel-dist {:.2e}",
            evaluate_scenes(&net, &tuned, &held).unwrap().miou,
            relative_weight_distance(&tuned, &anchor).unwrap()
        );
    }
}
