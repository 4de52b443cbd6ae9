// temporary tuning harness; deleted before release
use anchor_adapt::config::{Config, Variant};
use anchor_adapt::pipeline::*;
use std::time::Instant;

#[test]
#[ignore]
fn probe_ladder() {
    let config = Config::default();
    let bundle = DataBundle::from_config(&config).unwrap();
    println!(
        "exclusive base rate: {:.3}",
        exclusive_base_rate(&bundle)
    );
    for seed in [1u64, 2] {
        let t0 = Instant::now();
        let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
        let t_warm = t0.elapsed();
        let m0 = evaluate(&warmup.params, &bundle.eval).unwrap();
        let stage1 = run_stage1(&config, &warmup, &bundle.target, seed).unwrap();
        let cap = exclusive_capture_of(&stage1.selection, &bundle);
        println!(
            "seed {seed}: warmup {:?} m0_miou {:.4} selected {} exclusive_capture {:.3}",
            t_warm,
            m0.miou,
            stage1.selection.selected.len(),
            cap
        );
        for variant in [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::Mu] {
            let t1 = Instant::now();
            let res = run_experiment(&config, &bundle, variant, seed, Some(&warmup), Some(&stage1)).unwrap();
            println!(
                "  {} miou {:.4} ({:?})",
                variant.name(),
                res.metrics.miou,
                t1.elapsed()
            );
        }
    }
}

#[test]
#[ignore]
fn probe_random_vs_multi() {
    let config = Config::default();
    let bundle = DataBundle::from_config(&config).unwrap();
    for seed in [1u64, 2, 3] {
        let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
        let stage1 = run_stage1(&config, &warmup, &bundle.target, seed).unwrap();
        for strat in ["multi_anchor", "random"] {
            let sel = select_with_strategy(
                &stage1.scores,
                strat.parse().unwrap(),
                config.select.budget,
                seed,
            )
            .unwrap();
            let s2 = run_stage2(
                &config,
                &warmup.params,
                &bundle.source,
                &bundle.target,
                &sel.selected,
                Variant::M1,
                seed,
            )
            .unwrap();
            let m = evaluate(&s2.params, &bundle.eval).unwrap();
            println!(
                "seed {seed} {strat}: miou {:.4} capture {:.3}",
                m.miou,
                exclusive_capture_of(&sel, &bundle)
            );
        }
    }
}

#[test]
#[ignore]
fn probe_trap() {
    let mut config = Config::default();
    config.data.preset = "centroid_trap".into();
    let bundle = DataBundle::from_config(&config).unwrap();
    println!("exclusive base rate: {:.3}", exclusive_base_rate(&bundle));
    for seed in [1u64, 2, 3] {
        let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
        for k in [1usize, 5, 10, 20] {
            let mut c = config.clone();
            c.anchors.k_source = k;
            let stage1 = run_stage1(&c, &warmup, &bundle.target, seed).unwrap();
            let res = run_experiment(&c, &bundle, Variant::M1, seed, Some(&warmup), Some(&stage1)).unwrap();
            println!(
                "seed {seed} K={k}: miou {:.4} capture {:.3}",
                res.metrics.miou,
                exclusive_capture_of(&stage1.selection, &bundle)
            );
        }
    }
}

#[test]
#[ignore]
fn probe_lr() {
    for lr in [0.05f64, 0.03, 0.02] {
        let mut config = Config::default();
        config.train.base_lr = lr;
        let bundle = DataBundle::from_config(&config).unwrap();
        let seed = 1u64;
        let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
        let m0 = evaluate(&warmup.params, &bundle.eval).unwrap();
        let stage1 = run_stage1(&config, &warmup, &bundle.target, seed).unwrap();
        print!("lr {lr}: m0 {:.4}", m0.miou);
        for variant in [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::Mu] {
            match run_experiment(&config, &bundle, variant, seed, Some(&warmup), Some(&stage1)) {
                Ok(res) => print!("  {} {:.4}", variant.name(), res.metrics.miou),
                Err(e) => print!("  {} DIVERGED({e})", variant.name()),
            }
        }
        println!();
    }
}

#[test]
#[ignore]
fn probe_grid() {
    for (lr, epochs, warm) in [(0.01f64, 100usize, 30usize), (0.01, 150, 30), (0.015, 100, 30), (0.02, 150, 20)] {
        let mut config = Config::default();
        config.train.base_lr = lr;
        config.train.stage2_epochs = epochs;
        config.train.warmup_epochs = warm;
        let bundle = DataBundle::from_config(&config).unwrap();
        let seed = 1u64;
        let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
        let m0 = evaluate(&warmup.params, &bundle.eval).unwrap();
        let stage1 = run_stage1(&config, &warmup, &bundle.target, seed).unwrap();
        print!("lr {lr} ep {epochs}: m0 {:.4}", m0.miou);
        for variant in [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::Mu] {
            match run_experiment(&config, &bundle, variant, seed, Some(&warmup), Some(&stage1)) {
                Ok(res) => print!("  {} {:.4}", variant.name(), res.metrics.miou),
                Err(_) => print!("  {} DIVERGED", variant.name()),
            }
        }
        println!();
    }
}

#[test]
#[ignore]
fn probe_mu_diag() {
    let mut config = Config::default();
    config.train.base_lr = 0.02;
    config.train.stage2_epochs = 100;
    let bundle = DataBundle::from_config(&config).unwrap();
    let seed = 1u64;
    let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
    let all_ids: Vec<u64> = bundle.target.samples.iter().map(|s| s.id).collect();
    let s2 = run_stage2(&config, &warmup.params, &bundle.source, &bundle.target, &all_ids, Variant::Mu, seed).unwrap();
    let last = s2.log.last().unwrap();
    println!("final losses: seg_source {:.5} seg_active {:.5}", last.report.seg_source, last.report.seg_active);
    // train-set accuracy on target
    let m_train = evaluate(&s2.params, &bundle.target).unwrap();
    let m_eval = evaluate(&s2.params, &bundle.eval).unwrap();
    let m_src = evaluate(&s2.params, &bundle.source).unwrap();
    println!("train-target miou {:.4} per-class {:?}", m_train.miou, m_train.per_class_iou);
    println!("eval miou {:.4} per-class {:?}", m_eval.miou, m_eval.per_class_iou);
    println!("source miou {:.4}", m_src.miou);
    println!("eval confusion:");
    for row in &m_eval.confusion { println!("  {:?}", row); }
    // scene composition of errors
    for scene in 0..5u32 {
        let mut right = 0u64; let mut total = 0u64;
        for s in bundle.eval.samples.iter().filter(|s| s.scene == scene) {
            let cache = anchor_adapt::nn::forward_encoder(&s2.params, &s.pixels).unwrap();
            let prob = anchor_adapt::nn::forward_classifier(&s2.params, &cache.latent()).unwrap();
            let pred = anchor_adapt::losses::pseudo_labels(&prob);
            for (&gt, &p) in s.labels.as_ref().unwrap().iter().zip(pred.iter()) {
                total += 1; if gt == p { right += 1; }
            }
        }
        println!("scene {scene}: acc {:.4} ({right}/{total})", right as f64 / total.max(1) as f64);
    }
}

use anchor_adapt::data::{DomainSpec, SceneSpec, Shift};

fn ring_mean2(off: (f64, f64), angle_steps: f64, c_total: usize, radius: f64) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * angle_steps / c_total as f64;
    vec![off.0, off.1, radius * angle.cos(), radius * angle.sin()]
}

fn mk_scene(off: (f64, f64), c: usize, sigma: f64, exclusive: bool, appearance: impl Fn(usize) -> f64) -> SceneSpec {
    let cats: Vec<usize> = (0..c).collect();
    SceneSpec {
        categories: cats.clone(),
        band_weights: vec![1.0; c],
        means: cats.iter().map(|&k| ring_mean2(off, appearance(k), c, 1.2)).collect(),
        sigmas: vec![sigma; c],
        offset_jitter: 0.0,
        appearance_jitter: 0.0,
        pool_weight: 1.0,
        exclusive,
    }
}

fn bench_variant(kind: &str, seed: u64) -> DomainSpec {
    let c = 4;
    let sigma = 0.18;
    let scenes = match kind {
        // permutation design at small scale
        "perm" => vec![
            mk_scene((0.0, 0.0), c, sigma, false, |k| k as f64),
            mk_scene((1.8, 0.0), c, sigma, false, |k| k as f64),
            mk_scene((0.0, 1.8), c, sigma, false, |k| k as f64),
            mk_scene((3.0, 3.0), c, sigma, true, |k| (k + 1) as f64),
            mk_scene((-2.0, 1.5), c, sigma, true, |k| (k + 2) as f64),
        ],
        // novel-appearance design: exclusive scenes use half-step ring angles
        "novel" => vec![
            mk_scene((0.0, 0.0), c, sigma, false, |k| k as f64),
            mk_scene((1.8, 0.0), c, sigma, false, |k| k as f64),
            mk_scene((0.0, 1.8), c, sigma, false, |k| k as f64),
            mk_scene((3.0, 3.0), c, sigma, true, |k| k as f64 + 0.5),
            mk_scene((-2.0, 1.5), c, sigma, true, |k| k as f64 - 0.5),
        ],
        _ => unreachable!(),
    };
    DomainSpec {
        num_classes: c, height: 8, width: 8, d_in: 4,
        n_source: 400, n_target: 400, seed,
        shift: Shift { rotate: 0.12, scale: 1.04, translate: vec![0.12, -0.08, 0.04, 0.0] },
        scenes,
    }
}

fn bundle_from_spec(spec: &DomainSpec, n_eval: usize) -> DataBundle {
    let (source, target) = anchor_adapt::data::generate(spec).unwrap();
    let eval = anchor_adapt::data::generate_eval(spec, n_eval, spec.seed ^ 0xe7a1).unwrap();
    let exclusive_scenes = spec.scenes.iter().enumerate().filter(|(_, s)| s.exclusive).map(|(i, _)| i as u32).collect();
    DataBundle { source, target, eval, exclusive_scenes }
}

#[test]
#[ignore]
fn probe_designs() {
    for kind in ["perm", "novel"] {
        for h in [16usize, 32] {
            let mut config = Config::default();
            config.train.base_lr = 0.02;
            config.train.stage2_epochs = 60;
            config.model.encoder_hidden = vec![h];
            let spec = bench_variant(kind, 7);
            let bundle = bundle_from_spec(&spec, 200);
            let seed = 1u64;
            let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
            let m0 = evaluate(&warmup.params, &bundle.eval).unwrap();
            let stage1 = run_stage1(&config, &warmup, &bundle.target, seed).unwrap();
            let cap = exclusive_capture_of(&stage1.selection, &bundle);
            print!("{kind} h{h}: m0 {:.4} cap {:.2}", m0.miou, cap);
            for variant in [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::Mu] {
                match run_experiment(&config, &bundle, variant, seed, Some(&warmup), Some(&stage1)) {
                    Ok(res) => print!("  {} {:.4}", variant.name(), res.metrics.miou),
                    Err(_) => print!("  {} DIV", variant.name()),
                }
            }
            println!();
        }
    }
}

#[test]
#[ignore]
fn probe_v2() {
    let mut config = Config::default();
    config.train.base_lr = 0.02;
    config.train.stage2_epochs = 60;
    let bundle = DataBundle::from_config(&config).unwrap();
    for seed in [1u64, 2, 3] {
        let warmup = match run_warmup(&config, &bundle.source, &bundle.target, seed) {
            Ok(w) => w,
            Err(e) => { println!("seed {seed}: WARMUP FAILED {e}"); continue; }
        };
        let m0 = evaluate(&warmup.params, &bundle.eval).unwrap();
        let stage1 = run_stage1(&config, &warmup, &bundle.target, seed).unwrap();
        let cap = exclusive_capture_of(&stage1.selection, &bundle);
        print!("seed {seed}: m0 {:.4} cap {:.2}", m0.miou, cap);
        for variant in [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::Mu] {
            match run_experiment(&config, &bundle, variant, seed, Some(&warmup), Some(&stage1)) {
                Ok(res) => print!("  {} {:.4}", variant.name(), res.metrics.miou),
                Err(e) => print!("  {} DIV({e})", variant.name()),
            }
        }
        // random baseline under M1
        let sel = select_with_strategy(&stage1.scores, "random".parse().unwrap(), config.select.budget, seed).unwrap();
        let s2 = run_stage2(&config, &warmup.params, &bundle.source, &bundle.target, &sel.selected, Variant::M1, seed).unwrap();
        let mr = evaluate(&s2.params, &bundle.eval).unwrap();
        println!("  rand {:.4} (cap {:.2})", mr.miou, exclusive_capture_of(&sel, &bundle));
    }
}

#[test]
#[ignore]
fn probe_seed1() {
    let mut config = Config::default();
    config.train.base_lr = 0.02;
    config.train.stage2_epochs = 60;
    let bundle = DataBundle::from_config(&config).unwrap();
    let seed = 1u64;
    let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
    println!("warmup ok");
    let m0 = evaluate(&warmup.params, &bundle.eval).unwrap();
    println!("m0 {:.4}", m0.miou);
    let stage1 = run_stage1(&config, &warmup, &bundle.target, seed).unwrap();
    println!("stage1 ok, selected {}", stage1.selection.selected.len());
    for variant in [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::Mu] {
        match run_experiment(&config, &bundle, variant, seed, Some(&warmup), Some(&stage1)) {
            Ok(res) => println!("{} {:.4}", variant.name(), res.metrics.miou),
            Err(e) => println!("{} DIV({e})", variant.name()),
        }
    }
    let sel = select_with_strategy(&stage1.scores, "random".parse().unwrap(), config.select.budget, seed).unwrap();
    println!("rand selected");
    let s2 = run_stage2(&config, &warmup.params, &bundle.source, &bundle.target, &sel.selected, Variant::M1, seed).unwrap();
    let mr = evaluate(&s2.params, &bundle.eval).unwrap();
    println!("rand {:.4}", mr.miou);
}

#[test]
#[ignore]
fn probe_v3() {
    for (ep, s1frac) in [(140usize, 0.6f64), (180, 0.5)] {
        let mut config = Config::default();
        config.train.base_lr = 0.02;
        config.train.stage2_epochs = ep;
        config.train.step1_fraction = s1frac;
        let bundle = DataBundle::from_config(&config).unwrap();
        println!("=== epochs {ep} step1 {s1frac}");
        for seed in [1u64, 2, 3, 4, 5, 6] {
            let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
            let m0 = evaluate(&warmup.params, &bundle.eval).unwrap();
            let stage1 = run_stage1(&config, &warmup, &bundle.target, seed).unwrap();
            let mut line = format!("seed {seed}: m0 {:.4} cap {:.2}", m0.miou, exclusive_capture_of(&stage1.selection, &bundle));
            for variant in [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::Mu] {
                match run_experiment(&config, &bundle, variant, seed, Some(&warmup), Some(&stage1)) {
                    Ok(res) => line += &format!("  {} {:.4}", variant.name(), res.metrics.miou),
                    Err(e) => line += &format!("  {} DIV({e})", variant.name()),
                }
            }
            let sel = select_with_strategy(&stage1.scores, "random".parse().unwrap(), config.select.budget, seed).unwrap();
            let s2 = run_stage2(&config, &warmup.params, &bundle.source, &bundle.target, &sel.selected, Variant::M1, seed).unwrap();
            let mr = evaluate(&s2.params, &bundle.eval).unwrap();
            line += &format!("  rand {:.4}", mr.miou);
            println!("{line}");
        }
    }
}

#[test]
#[ignore]
fn probe_selection_hist() {
    let mut config = Config::default();
    config.train.base_lr = 0.02;
    let bundle = DataBundle::from_config(&config).unwrap();
    for seed in [1u64, 2, 3, 4, 5, 6] {
        let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
        let stage1 = run_stage1(&config, &warmup, &bundle.target, seed).unwrap();
        let mut hist = std::collections::BTreeMap::new();
        for id in &stage1.selection.selected {
            let s = bundle.target.samples.iter().find(|s| s.id == *id).unwrap();
            *hist.entry(s.scene).or_insert(0usize) += 1;
        }
        println!("seed {seed}: selected-per-scene {:?}", hist);
    }
}

#[test]
#[ignore]
fn probe_mu_epochs() {
    for ep in [100usize, 140] {
        let mut config = Config::default();
        config.train.base_lr = 0.02;
        config.train.stage2_epochs = ep;
        config.train.step1_fraction = 0.5;
        let bundle = DataBundle::from_config(&config).unwrap();
        let mut line = format!("ep {ep}: mu");
        for seed in [1u64, 2, 3, 4, 5, 6] {
            let warmup = run_warmup(&config, &bundle.source, &bundle.target, seed).unwrap();
            let res = run_experiment(&config, &bundle, Variant::Mu, seed, Some(&warmup), None).unwrap();
            line += &format!(" {:.4}", res.metrics.miou);
        }
        println!("{line}");
    }
}
