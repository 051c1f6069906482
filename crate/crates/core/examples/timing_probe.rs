use ndarray::Array2;
use spinlam_core::lam::{train_lam, LamConfig, LamModel, LamTrainConfig};
use spinlam_core::world::{generate_triplets, WorldConfig};
use std::time::Instant;

fn main() {
    let cfg = LamConfig::default();
    let mut model: LamModel<f32> = LamModel::new(&cfg, 0).unwrap();
    let data = generate_triplets::<f32>(&WorldConfig::default(), 0, 512).unwrap();
    let t0 = Instant::now();
    let log = train_lam(&mut model, &data, &LamTrainConfig { steps: 2000, batch: 8, log_every: 100, ..LamTrainConfig::default() }).unwrap();
    let dt = t0.elapsed();
    println!("2000 steps in {:?} ({:.1} ms/step)", dt, dt.as_secs_f64() * 1000.0 / 2000.0);
    for row in &log {
        println!(
            "step {:4} total {:.4} single {:.4} comp {:.4} soft {:.4}",
            row.step,
            row.get("l_total").unwrap(),
            row.get("l_single").unwrap(),
            row.get("l_comp").unwrap(),
            row.get("l_soft").unwrap()
        );
    }
    // Static-pair fixture: how close is decode(frame, z_identity) to the frame?
    let anchor_frames: Vec<_> = data.iter().take(16).map(|t| &t.frames[0]).collect();
    let z_id = model.identity_anchor(&anchor_frames).unwrap();
    let mut worst = 0.0f32;
    for t in data.iter().take(8) {
        let out = model.decode_matrix(&t.frames[0], &z_id.view()).unwrap();
        let mse = (&out - &t.frames[0]).mapv(|d| d * d).mean().unwrap();
        if mse > worst { worst = mse; }
    }
    println!("worst decode(frame, z_identity) mse over 8 frames: {:.6}", worst);
    // Next-frame reconstruction quality through the full pipeline.
    let mut worst_next = 0.0f32;
    for t in data.iter().take(8) {
        let z = model.extract_latent(&t.frames[0], &t.frames[1]).unwrap();
        let out = model.decode(&t.frames[0], &z).unwrap();
        let mse = (&out - &t.frames[1]).mapv(|d| d * d).mean().unwrap();
        if mse > worst_next { worst_next = mse; }
    }
    println!("worst next-frame mse over 8 transitions: {:.6}", worst_next);
    // Latent distinctness across 50 pairs.
    let mut latents: Vec<Array2<f32>> = Vec::new();
    for t in data.iter().take(50) {
        latents.push(model.extract_latent(&t.frames[0], &t.frames[1]).unwrap().matrix().clone());
    }
    let mut min_d = f32::INFINITY;
    for i in 0..latents.len() {
        for j in (i + 1)..latents.len() {
            let d = (&latents[i] - &latents[j]).mapv(|x| x * x).sum().sqrt();
            if d < min_d { min_d = d; }
        }
    }
    println!("min pairwise latent distance over 50 transitions: {:.6}", min_d);
}
