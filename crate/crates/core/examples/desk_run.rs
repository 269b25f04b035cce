//! Full desk-scale pipeline: pretrain the seed-0 scene, then jointly
//! optimize the codebook and extractor, printing live progress.
//! Run with `cargo run --example desk_run [pretrain_steps] [iterations] [dil]`.

use std::time::Instant;

use nsig_core::field::pretrain::{pretrain, PretrainConfig};
use nsig_core::field::scene::make_scene;
use nsig_core::field::{FieldConfig, RadianceField};
use nsig_core::numerics::rng::{rng, Domain};
use nsig_core::trainer::{optimize_with_progress, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let pre_steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5000);
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3000);
    let distortion: bool = args.next().and_then(|s| s.parse().ok()).unwrap_or(true);

    let t0 = Instant::now();
    println!("scene seed 0, {pre_steps} pretrain steps, {iterations} iterations, DiL {distortion}");
    let scene = make_scene(0);
    let mut field = RadianceField::init_random(&FieldConfig::default(), &mut rng(0, Domain::Pretrain));
    let report = pretrain(&mut field, &scene, &PretrainConfig { steps: pre_steps, ..Default::default() })
        .expect("pretraining failed");
    println!(
        "[{:7.1}s] pretrained: loss {:.6}, held-out {:.2} dB",
        t0.elapsed().as_secs_f64(),
        report.final_loss,
        report.heldout_psnr
    );

    let cfg = TrainConfig {
        iterations,
        distortion,
        curve_every: 25,
        ..TrainConfig::default()
    };
    let run0 = Instant::now();
    let out = optimize_with_progress(&field, &cfg, |p| {
        let el = run0.elapsed().as_secs_f64();
        let eta = el / p.step as f64 * (iterations - p.step) as f64;
        println!(
            "[{:7.1}s] step {:4}: content {:.5}  signature {:.4}  overall {:.4}  (eta {:.0}s)",
            t0.elapsed().as_secs_f64(),
            p.step,
            p.content,
            p.signature,
            p.overall,
            eta
        );
    })
    .expect("optimization failed");

    println!(
        "[{:7.1}s] done: accuracy {:.4} over {} fresh signatures, key-pose PSNR {:.2} dB, train wall {:.1}s",
        t0.elapsed().as_secs_f64(),
        out.report.final_accuracy,
        cfg.eval_signatures,
        out.report.psnr_at_key_pose,
        out.report.wall_seconds
    );

    let dir = std::env::temp_dir().join("nsig-desk");
    std::fs::create_dir_all(&dir).expect("create output dir");
    field.save(&dir.join("model.nsig")).expect("save model");
    out.codebook.save(&dir.join("codebook.nscb")).expect("save codebook");
    out.extractor.save(&dir.join("extractor.nsex")).expect("save extractor");
    out.key.save(&dir.join("key.json")).expect("save key");
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_vec_pretty(&out.report).expect("serialize report"),
    )
    .expect("write report");
    println!("artifacts under {}", dir.display());
}
