//! Dev-only probe that measures fixture convergence so integration-test
//! thresholds can be pinned from evidence. Not part of the pipeline.

use ndarray::Array2;
use spinlam_core::eval::{
    composition_consistency, degeneration_probe, linear_probe, open_loop_action_mse, LatentMode,
    ProbeOptions,
};
use spinlam_core::flow::{
    action_chunk_normalizer, finetune, pretrain_vla, robot_chunk, ContextSource, FlowConfig,
    FlowModel, FlowTrainConfig,
};
use spinlam_core::lam::{train_lam, LamConfig, LamModel, LamTrainConfig};
use spinlam_core::rng::derived_rng;
use spinlam_core::scalar::Scalar;
use spinlam_core::world::{
    builtin_style, generate_triplets, render, sample_action, sample_start, FrameTriplet,
    GroundTruthAction, WorldConfig,
};
use std::time::Instant;

fn static_triplets(cfg: &WorldConfig, seed: u64, count: usize) -> Vec<FrameTriplet<f32>> {
    let mut rng = derived_rng(seed, "static-fixture");
    (0..count)
        .map(|i| {
            let start = sample_start(cfg, &mut rng);
            let style = builtin_style(cfg.style_ids[i % cfg.style_ids.len()]).unwrap();
            let f = render::<f32>(cfg, &start, style);
            FrameTriplet {
                frames: [f.clone(), f.clone(), f],
                interval_k: cfg.interval_k,
                actions: [GroundTruthAction::zero(), GroundTruthAction::zero()],
                style_id: style.style_id,
            }
        })
        .collect()
}

fn frame_mse(a: &ndarray::Array3<f32>, b: &ndarray::Array3<f32>) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (*x - *y) as f64;
        s += d * d;
    }
    s / a.len() as f64
}

fn probe_lam_static(steps: usize) {
    probe_lam_static_cfg(32, steps, 1e-4, 64);
}

fn probe_lam_static_cfg(side: usize, steps: usize, lr: f64, count: usize) {
    let world = WorldConfig {
        height: side,
        width: side,
        ..WorldConfig::default()
    };
    let data = static_triplets(&world, 11, count);
    let heldout = static_triplets(&world, 12, 8);
    let cfg = LamConfig {
        frame_height: side,
        frame_width: side,
        ..LamConfig::default()
    };
    let mut model: LamModel<f32> = LamModel::new(&cfg, 7).unwrap();
    let tcfg = LamTrainConfig {
        steps,
        lr,
        log_every: 500,
        seed: 7,
        ..LamTrainConfig::default()
    };
    let t0 = Instant::now();
    let log = spinlam_core::lam::train_lam(&mut model, &data[..], &tcfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let frames: Vec<&ndarray::Array3<f32>> = heldout.iter().map(|t| &t.frames[0]).collect();
    let z_id = model.identity_anchor(&frames).unwrap();
    let mut mse_anchor = 0.0;
    let mut mse_pair = 0.0;
    for t in &heldout {
        let dec = model.decode_matrix(&t.frames[0], &z_id.view()).unwrap();
        mse_anchor += frame_mse(&dec, &t.frames[0]);
        let z = model.extract_latent(&t.frames[0], &t.frames[0]).unwrap();
        let img = model.imagined_frame(&t.frames[0], &z).unwrap();
        mse_pair += frame_mse(&img, &t.frames[0]);
    }
    mse_anchor /= heldout.len() as f64;
    mse_pair /= heldout.len() as f64;
    println!(
        "lam-static side={side} lr={lr} count={count} steps={} first_loss={:.4} last_loss={:.6} decode_anchor_mse={:.6} imagined_pair_mse={:.6} wall_s={:.0}",
        steps,
        log.first().unwrap().get("l_total").unwrap(),
        log.last().unwrap().get("l_total").unwrap(),
        mse_anchor,
        mse_pair,
        dt
    );
}

fn probe_lam_recon_only(steps: usize) {
    let world = WorldConfig::default();
    let data = generate_triplets::<f32>(&world, 21, 256).unwrap();
    let cfg = LamConfig {
        compose_loss: false,
        ..LamConfig::default()
    };
    let mut model: LamModel<f32> = LamModel::new(&cfg, 9).unwrap();
    let tcfg = LamTrainConfig {
        steps,
        log_every: 100,
        seed: 9,
        ..LamTrainConfig::default()
    };
    let log = spinlam_core::lam::train_lam(&mut model, &data[..], &tcfg).unwrap();
    println!(
        "lam-recon-only steps={} first={:.4} at500={:.4} last={:.5}",
        steps,
        log.first().unwrap().get("l_total").unwrap(),
        log.iter()
            .find(|r| r.step == 500)
            .map(|r| r.get("l_total").unwrap())
            .unwrap_or(f64::NAN),
        log.last().unwrap().get("l_total").unwrap(),
    );
}

fn probe_lam_full_ratio(steps: usize) {
    let world = WorldConfig::default();
    let data = generate_triplets::<f32>(&world, 31, 256).unwrap();
    let heldout = generate_triplets::<f32>(&world, 32, 20).unwrap();
    let mut model: LamModel<f32> = LamModel::new(&LamConfig::default(), 13).unwrap();
    let tcfg = LamTrainConfig {
        steps,
        log_every: 100,
        seed: 13,
        ..LamTrainConfig::default()
    };
    let log = spinlam_core::lam::train_lam(&mut model, &data[..], &tcfg).unwrap();
    let mut mse_next = 0.0;
    let mut mse_comp = 0.0;
    let mut mse_imagined = 0.0;
    for t in &heldout {
        let z1 = model.extract_latent(&t.frames[0], &t.frames[1]).unwrap();
        let z2 = model.extract_latent(&t.frames[1], &t.frames[2]).unwrap();
        let frames: Vec<&ndarray::Array3<f32>> = heldout.iter().map(|x| &x.frames[0]).collect();
        let z_id = model.identity_anchor(&frames[..4]).unwrap();
        let z_id_inv = z_id.t().to_owned();
        let comp = z2.matrix().dot(&z_id_inv).dot(z1.matrix());
        let pred2 = model.decode_matrix(&t.frames[1], &z2.matrix().view()).unwrap();
        let pred_comp = model.decode_matrix(&t.frames[0], &comp.view()).unwrap();
        mse_next += frame_mse(&pred2, &t.frames[2]);
        mse_comp += frame_mse(&pred_comp, &t.frames[2]);
        let img = model.imagined_frame(&t.frames[1], &z1).unwrap();
        mse_imagined += frame_mse(&img, &t.frames[1]);
    }
    println!(
        "lam-full steps={} first={:.4} last={:.5} heldout mse_next={:.5} mse_comp={:.5} ratio={:.3} mse_imagined_vs_t1={:.5}",
        steps,
        log.first().unwrap().get("l_total").unwrap(),
        log.last().unwrap().get("l_total").unwrap(),
        mse_next / 20.0,
        mse_comp / 20.0,
        mse_comp / mse_next,
        mse_imagined / 20.0
    );
}

fn probe_flow_memorize(lr: f64, batch: usize) {
    let world = WorldConfig::default();
    let data = generate_triplets::<f32>(&world, 41, 1).unwrap();
    let lam: LamModel<f32> = LamModel::new(&LamConfig::default(), 17).unwrap();
    let mut flow: FlowModel<f32> = FlowModel::new(&FlowConfig::default(), 19).unwrap();
    let tcfg = FlowTrainConfig {
        steps: 3000,
        batch,
        lr,
        log_every: 500,
        seed: 19,
        ..FlowTrainConfig::default()
    };
    let t0 = Instant::now();
    let log = pretrain_vla(&mut flow, &lam, &data[..], &tcfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let z = lam
        .transition_matrix(&data[0].frames[0], &data[0].frames[1])
        .unwrap();
    let src = ContextSource::FramePair {
        prev: &data[0].frames[0],
        next: &data[0].frames[1],
    };
    let sampled = flow
        .sample_latent(&src, 50, &mut derived_rng(23, "mem-sample"))
        .unwrap();
    let mse = (&sampled - &z).mapv(|v| (v as f64) * (v as f64)).mean().unwrap();
    println!(
        "flow-memorize lr={} batch={} first={:.4} last={:.6} sample_mse={:.6} ms_per_step={:.1} wall_s={:.0}",
        lr,
        batch,
        log.first().unwrap().get("l_fm").unwrap(),
        log.last().unwrap().get("l_fm").unwrap(),
        mse,
        dt * 1000.0 / 3000.0,
        dt
    );
}

fn probe_flow_pretrain() {
    let world = WorldConfig::default();
    let data = generate_triplets::<f32>(&world, 51, 128).unwrap();
    let mut lam: LamModel<f32> = LamModel::new(&LamConfig::default(), 29).unwrap();
    let ltc = LamTrainConfig {
        steps: 500,
        log_every: 250,
        seed: 29,
        ..LamTrainConfig::default()
    };
    spinlam_core::lam::train_lam(&mut lam, &data[..], &ltc).unwrap();
    let mut flow: FlowModel<f32> = FlowModel::new(&FlowConfig::default(), 31).unwrap();
    let tcfg = FlowTrainConfig {
        steps: 2000,
        log_every: 100,
        seed: 31,
        ..FlowTrainConfig::default()
    };
    let t0 = Instant::now();
    let log = pretrain_vla(&mut flow, &lam, &data[..], &tcfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let first = log.first().unwrap().get("l_fm").unwrap();
    let last = log.last().unwrap().get("l_fm").unwrap();
    println!(
        "flow-pretrain steps=2000 first={:.4} at1000={:.4} last={:.4} drop={:.1}% ms_per_step={:.1}",
        first,
        log.iter()
            .find(|r| r.step == 1000)
            .map(|r| r.get("l_fm").unwrap())
            .unwrap_or(f64::NAN),
        last,
        100.0 * (1.0 - last / first),
        dt * 1000.0 / 2000.0
    );
}

fn probe_flow_finetune(planner: bool) {
    let world = WorldConfig::default();
    let data = generate_triplets::<f32>(&world, 61, 128).unwrap();
    let heldout = generate_triplets::<f32>(&world, 62, 16).unwrap();
    let mut lam: LamModel<f32> = LamModel::new(&LamConfig::default(), 37).unwrap();
    let ltc = LamTrainConfig {
        steps: 500,
        log_every: 250,
        seed: 37,
        ..LamTrainConfig::default()
    };
    spinlam_core::lam::train_lam(&mut lam, &data[..], &ltc).unwrap();
    let norm = action_chunk_normalizer(&world);

    let open_loop = |flow: &FlowModel<f32>, label: &str| -> f64 {
        let mut rng = derived_rng(43, label);
        let mut mse = 0.0;
        for t in &heldout {
            let src = ContextSource::FrameTask {
                frame: &t.frames[0],
                task: t.actions[0].class_label.index(),
            };
            let (rob, _) = flow.sample_actions(&src, 10, &mut rng, planner).unwrap();
            let gt = robot_chunk(t, 8, &norm).unwrap();
            let diff: Array2<f32> = &rob - gt.actions();
            mse += diff.mapv(|v| (v as f64) * (v as f64)).mean().unwrap();
        }
        mse / heldout.len() as f64
    };

    let mut flow: FlowModel<f32> = FlowModel::new(&FlowConfig::default(), 41).unwrap();
    let before = open_loop(&flow, "before");
    let ptc = FlowTrainConfig {
        steps: 500,
        log_every: 100,
        seed: 41,
        ..FlowTrainConfig::default()
    };
    pretrain_vla(&mut flow, &lam, &data[..], &ptc).unwrap();
    let ftc = FlowTrainConfig {
        steps: 1500,
        log_every: 100,
        seed: 42,
        ..FlowTrainConfig::default()
    };
    let t0 = Instant::now();
    let log = spinlam_core::flow::finetune(&mut flow, &lam, &data[..], &world, &ftc, planner).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let after = open_loop(&flow, "after");
    let first = log.first().unwrap().get("l_fm").unwrap();
    let last = log.last().unwrap().get("l_fm").unwrap();
    println!(
        "flow-finetune planner={} first={:.4} last={:.4} drop={:.1}% open_loop before={:.4} after={:.4} ms_per_step={:.1}",
        planner,
        first,
        last,
        100.0 * (1.0 - last / first),
        before,
        after,
        dt * 1000.0 / 1500.0
    );
}

fn equal_action_triplets(cfg: &WorldConfig, seed: u64, count: usize) -> Vec<FrameTriplet<f32>> {
    let mut rng = derived_rng(seed, "equal-actions");
    (0..count)
        .map(|i| {
            let a = sample_action(cfg, &mut rng);
            let s0 = sample_start(cfg, &mut rng);
            let style = builtin_style(cfg.style_ids[i % cfg.style_ids.len()]).unwrap();
            let mut s1 = s0;
            for _ in 0..cfg.interval_k {
                s1 = s1.apply(&a);
            }
            let mut s2 = s1;
            for _ in 0..cfg.interval_k {
                s2 = s2.apply(&a);
            }
            FrameTriplet {
                frames: [
                    render(cfg, &s0, style),
                    render(cfg, &s1, style),
                    render(cfg, &s2, style),
                ],
                interval_k: cfg.interval_k,
                actions: [a, a],
                style_id: style.style_id,
            }
        })
        .collect()
}

// Trains one latent-mode arm and prints every metric the paired
// invariants need: degeneration report, composition ratio, linear
// probe quality, and the equal-action two-step imagined error.
fn zoo_arm(
    mode: LatentMode,
    seed: u64,
    lam_steps: usize,
    train: &[FrameTriplet<f32>],
    heldout: &[FrameTriplet<f32>],
    equal: &[FrameTriplet<f32>],
) -> LamModel<f32> {
    let mut cfg = LamConfig::default();
    mode.apply(&mut cfg);
    let mut lam: LamModel<f32> = LamModel::new(&cfg, seed).unwrap();
    let tcfg = LamTrainConfig {
        steps: lam_steps,
        log_every: (lam_steps / 4).max(1),
        seed,
        ..LamTrainConfig::default()
    };
    let t0 = Instant::now();
    let log = train_lam(&mut lam, train, &tcfg).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    let degen = degeneration_probe(&lam, heldout).unwrap();
    let ratio = composition_consistency(&lam, heldout).unwrap();
    let probe = linear_probe(&lam, train, &ProbeOptions::default()).unwrap();
    let mut eq_mse = 0.0;
    for t in equal {
        let z1 = lam.transition_matrix(&t.frames[0], &t.frames[1]).unwrap();
        let img = lam.decode_matrix(&t.frames[1], &z1.view()).unwrap();
        eq_mse += frame_mse(&img, &t.frames[2]);
    }
    eq_mse /= equal.len() as f64;
    println!(
        "zoo seed={} mode={} steps={} last_loss={:.5} mse_next={:.5} mse_imagined={:.5} delta={:.5} ratio={:.3} r2={:.3} acc={:.3} base={:.3} eqact_mse_t2={:.5} wall_s={:.0}",
        seed,
        mode.name(),
        lam_steps,
        log.last().unwrap().get("l_total").unwrap(),
        degen.mse_next,
        degen.mse_imagined,
        degen.delta,
        ratio,
        probe.r_squared,
        probe.classification_accuracy,
        probe.baseline_accuracy,
        eq_mse,
        wall
    );
    lam
}

fn zoo_flow(
    lam: &LamModel<f32>,
    seed: u64,
    world: &WorldConfig,
    train: &[FrameTriplet<f32>],
    heldout: &[FrameTriplet<f32>],
    planner: bool,
) {
    let mut flow: FlowModel<f32> = FlowModel::new(&FlowConfig::default(), seed).unwrap();
    let ptc = FlowTrainConfig {
        steps: 1000,
        log_every: 500,
        seed,
        ..FlowTrainConfig::default()
    };
    pretrain_vla(&mut flow, lam, train, &ptc).unwrap();
    let ftc = FlowTrainConfig {
        steps: 1500,
        log_every: 500,
        seed: seed.wrapping_add(1),
        ..FlowTrainConfig::default()
    };
    let t0 = Instant::now();
    finetune(&mut flow, lam, train, world, &ftc, planner).unwrap();
    let open = open_loop_action_mse(&flow, heldout, world, 10, planner, 77).unwrap();
    println!(
        "zoo-flow seed={} planner={} open_loop={:.4} wall_s={:.0}",
        seed,
        planner,
        open,
        t0.elapsed().as_secs_f64()
    );
}

fn probe_zoo(seed: u64, lam_steps: usize) {
    let world = WorldConfig::default();
    let train = generate_triplets::<f32>(&world, 101, 384).unwrap();
    let heldout = generate_triplets::<f32>(&world, 102, 64).unwrap();
    let equal = equal_action_triplets(&world, 103, 32);
    for mode in [LatentMode::Full, LatentMode::Rotation, LatentMode::Discrete] {
        let lam = zoo_arm(mode, seed, lam_steps, &train, &heldout, &equal);
        if mode == LatentMode::Full {
            zoo_flow(&lam, seed, &world, &train, &heldout, true);
            zoo_flow(&lam, seed, &world, &train, &heldout, false);
        }
    }
}

fn probe_pair(lam_steps: usize) {
    let world = WorldConfig::default();
    let train = generate_triplets::<f32>(&world, 101, 384).unwrap();
    let heldout = generate_triplets::<f32>(&world, 102, 64).unwrap();
    let equal = equal_action_triplets(&world, 103, 32);
    for mode in [LatentMode::Full, LatentMode::Rotation] {
        zoo_arm(mode, 0, lam_steps, &train, &heldout, &equal);
    }
}

// Simple ridge r2 on the two translation components, single lambda, for
// comparing feature sets (pre-latent vs quantized) on equal footing.
fn ridge_r2(features: &Array2<f64>, targets: &Array2<f64>, lambda: f64) -> f64 {
    let n = features.nrows();
    let n_train = n * 3 / 4;
    let d = features.ncols();
    let x_train = features.slice(ndarray::s![..n_train, ..]);
    let y_train = targets.slice(ndarray::s![..n_train, ..]);
    let x_held = features.slice(ndarray::s![n_train.., ..]);
    let y_held = targets.slice(ndarray::s![n_train.., ..]);

    let x_mean = x_train.mean_axis(ndarray::Axis(0)).unwrap();
    let y_mean = y_train.mean_axis(ndarray::Axis(0)).unwrap();
    let xc = &x_train - &x_mean;
    let mut xtx = xc.t().dot(&xc);
    for i in 0..d {
        xtx[[i, i]] += lambda;
    }
    let mut sse = 0.0;
    let mut sst = 0.0;
    for c in 0..2 {
        let yc = y_train.column(c).to_owned() - y_mean[c];
        let xty = xc.t().dot(&yc);
        let w = f64::solve(&xtx, &xty).unwrap();
        for (r, yrow) in y_held.outer_iter().enumerate() {
            let xrow = x_held.row(r).to_owned() - &x_mean;
            let pred = xrow.dot(&w) + y_mean[c];
            sse += (yrow[c] - pred).powi(2);
            sst += (yrow[c] - y_mean[c]).powi(2);
        }
    }
    1.0 - sse / sst
}

// Trains one full-mode model and reports where the action signal dies:
// copy baselines, posterior sharpness, latent spread, decoder sensitivity
// to the latent, and ridge r2 on pre-latent vs quantized features.
fn probe_diag(lr: f64, steps: usize, lambda_entropy: f64, count: usize) {
    let world = WorldConfig::default();
    let train = generate_triplets::<f32>(&world, 101, count).unwrap();
    let heldout = generate_triplets::<f32>(&world, 102, 64).unwrap();

    let mut copy1 = 0.0;
    for t in &heldout {
        copy1 += frame_mse(&t.frames[0], &t.frames[1]);
    }
    copy1 /= heldout.len() as f64;
    println!("diag copy_baseline_mse={:.5}", copy1);

    let cfg = LamConfig {
        lambda_entropy,
        ..LamConfig::default()
    };
    let mut lam: LamModel<f32> = LamModel::new(&cfg, 0).unwrap();
    let tcfg = LamTrainConfig {
        steps,
        lr,
        log_every: (steps / 8).max(1),
        ..LamTrainConfig::default()
    };
    let t0 = Instant::now();
    let log = train_lam(&mut lam, &train, &tcfg).unwrap();
    for row in &log {
        println!(
            "diag step={} l_single={:.5} l_comp={:.5} l_soft={:.5}",
            row.step,
            row.get("l_single").unwrap(),
            row.get("l_comp").unwrap(),
            row.get("l_soft").unwrap()
        );
    }
    println!("diag train wall_s={:.0}", t0.elapsed().as_secs_f64());

    // Rebuild the codebook to inspect posteriors outside the graph.
    let words = lam
        .params()
        .iter_named()
        .find(|(name, _)| *name == "codebook")
        .unwrap()
        .1
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let cb = spinlam_core::quantizer::Codebook::try_new(words, cfg.temperature as f32).unwrap();

    let nn = cfg.latent_n * cfg.latent_n;
    let m = heldout.len();
    let mut pre_feats = Array2::<f64>::zeros((m, nn));
    let mut q_feats = Array2::<f64>::zeros((m, nn));
    let mut targets = Array2::<f64>::zeros((m, 3));
    let mut max_w = 0.0f64;
    let mut ent = 0.0f64;
    let mut min_d = 0.0f64;
    let mut spread_d = 0.0f64;
    let mut agg = ndarray::Array1::<f64>::zeros(cfg.codebook_k);
    let mut pre_norm = 0.0f64;
    let mut argmaxes: Vec<usize> = Vec::with_capacity(m);
    for (i, t) in heldout.iter().enumerate() {
        let pre = lam.encode_pre_latent(&t.frames[0], &t.frames[1]).unwrap();
        let flat: Vec<f32> = pre.iter().cloned().collect();
        let flat = ndarray::Array1::from_vec(flat);
        let post = cb.posterior(&flat.view()).unwrap();
        max_w += post.max_weight() as f64;
        ent += post.entropy() as f64;
        argmaxes.push(post.argmax());
        for (k, &w) in post.weights().iter().enumerate() {
            agg[k] += w as f64 / m as f64;
        }
        pre_norm += flat.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        // Distance landscape: nearest vs mean distance to codewords.
        let mut dists: Vec<f64> = (0..cb.k())
            .map(|k| {
                cb.codewords()
                    .row(k)
                    .iter()
                    .zip(flat.iter())
                    .map(|(&c, &p)| ((c - p) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        min_d += dists[0];
        spread_d += dists[cb.k() - 1] - dists[0];

        let z = lam.transition_matrix(&t.frames[0], &t.frames[1]).unwrap();
        for (c, &v) in pre.iter().enumerate() {
            pre_feats[[i, c]] = v as f64;
        }
        for (c, &v) in z.iter().enumerate() {
            q_feats[[i, c]] = v as f64;
        }
        let act = &t.actions[0];
        targets[[i, 0]] = act.delta_position[0];
        targets[[i, 1]] = act.delta_position[1];
        targets[[i, 2]] = act.delta_heading;
    }
    let inv = 1.0 / m as f64;
    let agg_max = agg.iter().cloned().fold(0.0, f64::max);
    let eff_k = (-agg.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum::<f64>()).exp();
    println!(
        "diag posterior max_w={:.4} entropy={:.3} (logK={:.3}) agg_max={:.4} eff_codewords={:.1} pre_norm={:.3} min_dist={:.4} dist_spread={:.4}",
        max_w * inv,
        ent * inv,
        (cfg.codebook_k as f64).ln(),
        agg_max,
        eff_k,
        pre_norm * inv,
        min_d * inv,
        spread_d * inv
    );

    // What the argmax codeword tracks: style (appearance) vs action class.
    {
        use spinlam_core::world::ActionClass;
        use std::collections::BTreeMap;
        let mut by_code: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, t) in heldout.iter().enumerate() {
            let e = by_code
                .entry(argmaxes[i])
                .or_insert_with(|| (vec![0; 4], vec![0; ActionClass::ALL.len()]));
            e.0[t.style_id as usize] += 1;
            let ci = ActionClass::ALL
                .iter()
                .position(|c| *c == t.actions[0].class_label)
                .unwrap();
            e.1[ci] += 1;
        }
        for (code, (styles, classes)) in &by_code {
            println!(
                "diag code={:2} styles={:?} classes={:?}",
                code, styles, classes
            );
        }
    }

    // Spread of latents across transitions, pre and post quantization.
    let spread = |f: &Array2<f64>| {
        let mut s = 0.0;
        let mut c = 0;
        for i in 0..m.min(24) {
            for j in (i + 1)..m.min(24) {
                let d: f64 = f
                    .row(i)
                    .iter()
                    .zip(f.row(j).iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                s += d;
                c += 1;
            }
        }
        s / c as f64
    };
    println!(
        "diag spread pre={:.4} quantized={:.4}",
        spread(&pre_feats),
        spread(&q_feats)
    );

    // Decoder sensitivity: same base frame, different latents.
    let mut sens = 0.0;
    let mut n_sens = 0;
    for i in 0..8.min(m) {
        let zi = lam
            .transition_matrix(&heldout[i].frames[0], &heldout[i].frames[1])
            .unwrap();
        let zj = lam
            .transition_matrix(&heldout[i + 8].frames[0], &heldout[i + 8].frames[1])
            .unwrap();
        let da = lam.decode_matrix(&heldout[0].frames[0], &zi.view()).unwrap();
        let db = lam.decode_matrix(&heldout[0].frames[0], &zj.view()).unwrap();
        sens += frame_mse(&da, &db);
        n_sens += 1;
    }
    println!("diag decoder_z_sensitivity={:.6}", sens / n_sens as f64);

    let degen = degeneration_probe(&lam, &heldout).unwrap();
    println!(
        "diag mse_next={:.5} mse_imagined={:.5} delta={:.5}",
        degen.mse_next, degen.mse_imagined, degen.delta
    );
    println!(
        "diag ridge_r2 pre_latent={:.3} quantized={:.3}",
        ridge_r2(&pre_feats, &targets, 1e-2),
        ridge_r2(&q_feats, &targets, 1e-2)
    );
    let probe = linear_probe(&lam, &train, &ProbeOptions::default()).unwrap();
    println!(
        "diag full_probe r2={:.3} acc={:.3} base={:.3}",
        probe.r_squared, probe.classification_accuracy, probe.baseline_accuracy
    );
}

// Can the model overfit a handful of triplets below the copy baseline?
// Separates architecture failures from data-scale failures.
fn probe_overfit(lr: f64, steps: usize, count: usize) {
    let world = WorldConfig::default();
    let train = generate_triplets::<f32>(&world, 101, count).unwrap();
    let mut copy1 = 0.0;
    for t in &train {
        copy1 += frame_mse(&t.frames[0], &t.frames[1]) + frame_mse(&t.frames[1], &t.frames[2]);
    }
    copy1 /= train.len() as f64;

    let cfg = LamConfig::default();
    let mut lam: LamModel<f32> = LamModel::new(&cfg, 0).unwrap();
    let tcfg = LamTrainConfig {
        steps,
        lr,
        log_every: (steps / 6).max(1),
        ..LamTrainConfig::default()
    };
    let t0 = Instant::now();
    let log = train_lam(&mut lam, &train, &tcfg).unwrap();
    let mut mse_train = 0.0;
    for t in &train {
        let z = lam.transition_matrix(&t.frames[0], &t.frames[1]).unwrap();
        let rec = lam.decode_matrix(&t.frames[0], &z.view()).unwrap();
        mse_train += frame_mse(&rec, &t.frames[1]);
    }
    mse_train /= train.len() as f64;
    println!(
        "overfit lr={} steps={} count={} copy_baseline_2x={:.5} l_single_first={:.5} l_single_last={:.5} mse_train={:.5} wall_s={:.0}",
        lr,
        steps,
        count,
        copy1,
        log.first().unwrap().get("l_single").unwrap(),
        log.last().unwrap().get("l_single").unwrap(),
        mse_train,
        t0.elapsed().as_secs_f64()
    );
}

fn arg_f64(i: usize, default: f64) -> f64 {
    std::env::args()
        .nth(i)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn arg_usize(i: usize, default: usize) -> usize {
    std::env::args()
        .nth(i)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "diag" => probe_diag(
            arg_f64(2, 1e-4),
            arg_usize(3, 2000),
            arg_f64(4, 0.0),
            arg_usize(5, 384),
        ),
        "overfit" => probe_overfit(arg_f64(2, 3e-4), arg_usize(3, 2000), arg_usize(4, 4)),
        "lam-static-1000" => probe_lam_static(1000),
        "lam-static-2000" => probe_lam_static(2000),
        "static16-lo" => probe_lam_static_cfg(16, 2500, 1e-4, 32),
        "static16-hi" => probe_lam_static_cfg(16, 2500, 3e-4, 32),
        "static32-hi" => probe_lam_static_cfg(32, 3000, 3e-4, 64),
        "lam-recon-1000" => probe_lam_recon_only(1000),
        "lam-full-2000" => probe_lam_full_ratio(2000),
        "flow-mem-lo" => probe_flow_memorize(1e-4, 4),
        "flow-mem-hi" => probe_flow_memorize(1e-3, 4),
        "flow-pretrain" => probe_flow_pretrain(),
        "flow-finetune-on" => probe_flow_finetune(true),
        "flow-finetune-off" => probe_flow_finetune(false),
        "pair-2000" => probe_pair(2000),
        "zoo-0" => probe_zoo(0, 5000),
        "zoo-1" => probe_zoo(1, 5000),
        "zoo-2" => probe_zoo(2, 5000),
        other => {
            eprintln!("unknown probe {:?}", other);
            std::process::exit(1);
        }
    }
}
