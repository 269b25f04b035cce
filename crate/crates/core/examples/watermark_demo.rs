//! Minimal end-to-end walkthrough: generate a procedural scene, pretrain a
//! field on it for a few hundred steps, embed a signature, select a patch
//! key, and report image quality under distortion. Run with
//! `cargo run --example watermark_demo [steps]`.

use nsig_core::caks::{select_key, KeyConfig};
use nsig_core::codebook::{embed, Signature, SignatureCodebook, INIT_SCALE};
use nsig_core::distortion::{apply_spec, DistortionKind, DistortionRanges, DistortionSpec};
use nsig_core::field::pretrain::{heldout_psnr, pretrain, PretrainConfig};
use nsig_core::field::scene::make_scene;
use nsig_core::field::{FieldConfig, RadianceField};
use nsig_core::numerics::rng::{rng, Domain};
use nsig_core::renderer::{render_image, render_patch_set, RenderConfig};
use nsig_core::verify::{psnr, ssim};

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let seed = 7u64;

    println!("generating scene (seed {seed})...");
    let scene = make_scene(seed);
    println!(
        "  {} training views, {} held-out views",
        scene.train.len(),
        scene.heldout.len()
    );

    let mut field = RadianceField::init_random(&FieldConfig::default(), &mut rng(seed, Domain::Pretrain));
    println!(
        "  initial held-out PSNR: {:.2} dB",
        heldout_psnr(&field, &scene.heldout, 64)
    );
    println!("pretraining for {steps} steps...");
    let cfg = PretrainConfig {
        steps,
        seed,
        ..PretrainConfig::default()
    };
    let report = pretrain(&mut field, &scene, &cfg).expect("pretraining failed");
    println!(
        "  final loss {:.6}, held-out PSNR {:.2} dB",
        report.final_loss, report.heldout_psnr
    );

    let shape = {
        let lvl = &field.levels[field.theta_e_index()];
        [lvl.res, lvl.res, lvl.res, lvl.feat]
    };
    let cb = SignatureCodebook::init(16, shape, &mut rng(seed, Domain::Codebook), INIT_SCALE);
    let m = Signature::random(16, &mut rng(seed, Domain::Signature));
    println!("embedding signature {m}...");
    let t = std::time::Instant::now();
    let watermarked = embed(&field, &cb, &m);
    println!("  embed took {:?}", t.elapsed());

    let pose = &scene.heldout[0].pose;
    let rc = RenderConfig::default();
    let original = render_image(&field, pose, &rc);
    let marked = render_image(&watermarked, pose, &rc);
    println!(
        "  watermarked vs original render: PSNR {:.2} dB, SSIM {:.4}",
        psnr(&original, &marked),
        ssim(&original, &marked)
    );

    println!("selecting patch key...");
    let key_cfg = KeyConfig {
        pose_seed: seed,
        selection_seed: seed,
        ..KeyConfig::default()
    };
    let (key, pool) = select_key(&watermarked, &key_cfg).expect("key selection failed");
    println!(
        "  {} candidates -> {} after variation filter -> {} patches (complexity >= {:.3})",
        pool.p0.len(),
        pool.p1.len(),
        key.n_patches(),
        pool.complexity_threshold
    );
    let patches = render_patch_set(&watermarked, &key.patch_spec(), &rc).expect("render patches");
    println!("  rendered {} keyed patches of {}x{} px", patches.len(), key.patch.h, key.patch.w);

    println!("distorting a watermarked render...");
    let view = render_image(&watermarked, &key.pose, &rc);
    for kind in [
        DistortionKind::Jpeg,
        DistortionKind::Rotation,
        DistortionKind::Combined,
    ] {
        let spec = DistortionSpec { kind, seed };
        let (distorted, rd) = apply_spec(&view, &spec, &DistortionRanges::default());
        println!(
            "  {:?}: {} op(s), PSNR vs clean {:.2} dB",
            kind,
            rd.ops.len(),
            psnr(&view, &distorted)
        );
    }

    let dir = std::env::temp_dir().join("nsig-demo");
    std::fs::create_dir_all(&dir).expect("create output dir");
    let model_path = dir.join("model.nsig");
    let wm_path = dir.join("watermarked.nsig");
    let cb_path = dir.join("codebook.nscb");
    let key_path = dir.join("key.json");
    field.save(&model_path).expect("save model");
    watermarked.save(&wm_path).expect("save watermarked model");
    cb.save(&cb_path).expect("save codebook");
    key.save(&key_path).expect("save key");
    for p in [&model_path, &wm_path, &cb_path, &key_path] {
        println!("  wrote {} ({} bytes)", p.display(), std::fs::metadata(p).unwrap().len());
    }
    let back = RadianceField::<f32>::load(&model_path).expect("reload model");
    assert_eq!(back.param_bytes(), field.param_bytes());
    let key_back = nsig_core::caks::SecretKey::load(&key_path).expect("reload key");
    assert_eq!(key_back.patch.centers, key.patch.centers);
    println!("  model and key round-trips: bit-exact");
}
