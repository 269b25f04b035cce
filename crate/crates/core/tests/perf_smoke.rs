//! Manual performance probes (run with `cargo test --test perf_smoke -- --ignored --nocapture`).

use std::time::Instant;

use nsig_core::field::{FieldConfig, RadianceField};
use nsig_core::numerics::rng::{rng, Domain};
use nsig_core::numerics::tape::Tape;
use nsig_core::renderer::{
    assemble_pixels, build_plan, camera::sample_hemisphere_pose, pixel_rays, FieldVars,
    RenderConfig,
};

#[test]
#[ignore]
fn full_frame_render_cost() {
    let mut r = rng(1, Domain::Scene);
    let field = RadianceField::<f32>::init_random(&FieldConfig::default(), &mut r);
    let pose = sample_hemisphere_pose(&mut r, 128, 128);
    let rays = pixel_rays(&pose);

    let t0 = Instant::now();
    let plan = build_plan(&field, &rays, 64);
    println!("plan build: {:?}", t0.elapsed());

    // Forward only.
    let t1 = Instant::now();
    let mut tape = Tape::new();
    let vars = FieldVars::constants(&mut tape, &field);
    let graph = assemble_pixels(&mut tape, &vars, &plan, [1.0; 3]);
    let _ = tape.values(graph.pixels);
    println!("forward (no grad): {:?}", t1.elapsed());
    drop(tape);

    // Forward + full backward to the finest grid.
    let t2 = Instant::now();
    let mut tape = Tape::new();
    let vars = FieldVars::params(&mut tape, &field);
    let graph = assemble_pixels(&mut tape, &vars, &plan, [1.0; 3]);
    let fwd = t2.elapsed();
    let t3 = Instant::now();
    let root = tape.mean(graph.pixels);
    let grads = tape.backward(root).unwrap();
    println!(
        "forward (grad): {fwd:?}, backward (all pixels active): {:?}",
        t3.elapsed()
    );
    let g = grads.get(vars.var(field.theta_e_index())).unwrap();
    assert!(g.iter().any(|&x| x != 0.0));

    // Inference-style chunked full frame.
    let t4 = Instant::now();
    let img = nsig_core::renderer::render_image(&field, &pose, &RenderConfig::default());
    println!("render_image (chunked): {:?}", t4.elapsed());
    assert_eq!(img.data.len(), 128 * 128 * 3);
}

#[test]
#[ignore]
fn scene_generation_cost_and_silhouettes() {
    use nsig_core::field::scene::make_scene;
    let t = Instant::now();
    let s = make_scene(42);
    println!("make_scene(42): {:?} ({} train, {} heldout)",
        t.elapsed(), s.train.len(), s.heldout.len());
    let mut worst = 1.0f64;
    for v in s.train.iter().chain(&s.heldout) {
        let nw = v.image.data.chunks_exact(3)
            .filter(|p| p.iter().any(|&c| c < 0.999)).count();
        worst = worst.min(nw as f64 / (128.0 * 128.0));
    }
    println!("worst silhouette fraction: {worst:.4}");
    for seed in [1u64, 7, 9, 123, 999] {
        let s = nsig_core::field::scene::make_scene_sized(seed, 6, 0, 64, 256);
        let mut w = 1.0f64;
        for v in &s.train {
            let nw = v.image.data.chunks_exact(3)
                .filter(|p| p.iter().any(|&c| c < 0.999)).count();
            w = w.min(nw as f64 / (64.0 * 64.0));
        }
        println!("seed {seed}: worst {w:.4}");
    }
}

#[test]
#[ignore]
fn pretrain_reaches_quality_floor() {
    use nsig_core::field::pretrain::{heldout_psnr, pretrain, PretrainConfig};
    use nsig_core::field::scene::make_scene;
    use nsig_core::field::{FieldConfig, RadianceField};
    use nsig_core::numerics::rng::{rng, Domain};

    let t = Instant::now();
    let scene = make_scene(7);
    println!("scene: {:?}", t.elapsed());
    let mut field = RadianceField::init_random(&FieldConfig::default(), &mut rng(7, Domain::Pretrain));
    let mut done = 0usize;
    for stage in [500usize, 500, 1000, 1000, 2000] {
        let cfg = PretrainConfig { steps: stage, seed: 7 + done as u64, ..PretrainConfig::default() };
        let t = Instant::now();
        let rep = pretrain(&mut field, &scene, &cfg).unwrap();
        done += stage;
        println!(
            "after {done} steps: loss {:.5}, heldout {:.2} dB ({:?})",
            rep.final_loss, rep.heldout_psnr, t.elapsed()
        );
    }
    let final_psnr = heldout_psnr(&field, &scene.heldout, 64);
    println!("final heldout psnr: {final_psnr:.2} dB");
}
