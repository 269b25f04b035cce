//! Scratch probe: attack behavior on desk-run artifacts.

use nsig_core::attacks::{
    finetune_attack, guessed_key, pgd_attack, random_key_attack, transform_robustness, AttackKey,
    FinetuneConfig, FinetuneSetting,
};
use nsig_core::caks::SecretKey;
use nsig_core::codebook::{embed, Signature, SignatureCodebook};
use nsig_core::distortion::BASE_KINDS;
use nsig_core::extractor::Extractor;
use nsig_core::field::scene::make_scene;
use nsig_core::field::RadianceField;
use nsig_core::numerics::rng::{rng, Domain};
use nsig_core::renderer::RenderConfig;
use std::path::Path;

fn main() {
    let which: String = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let dir = Path::new("/tmp/nsig-desk");
    let field: RadianceField<f32> = RadianceField::load(&dir.join("model.nsig")).unwrap();
    let cb = SignatureCodebook::load(&dir.join("codebook.nscb")).unwrap();
    let key = SecretKey::load(&dir.join("key.json")).unwrap();
    let ext = Extractor::load(&dir.join("extractor.nsex")).unwrap();
    let rc = RenderConfig::default();

    let mut r = rng(123, Domain::Signature);
    let m = Signature::random(cb.n_bits, &mut r);
    let marked = embed(&field, &cb, &m);

    if which == "all" || which == "random" {
        let t = std::time::Instant::now();
        let (rep, hist) = random_key_attack(&marked, &m, &key, &ext, 200, 0, &rc).unwrap();
        println!(
            "random-key: correct {:.4} mean {:.4} params {} ({:.0}s)",
            rep.conditions[0].accuracy,
            rep.conditions[1].accuracy,
            rep.parameters,
            t.elapsed().as_secs_f64()
        );
        println!("{}", hist.to_csv());
    }

    if which == "all" || which == "transform" {
        let t = std::time::Instant::now();
        let rep = transform_robustness(&field, &cb, &key, &ext, &BASE_KINDS, 50, 0, &rc).unwrap();
        for c in &rep.conditions {
            println!(
                "transform {}: acc {:.4} psnr {:?}",
                c.label, c.accuracy, c.psnr
            );
        }
        println!("transform wall {:.0}s", t.elapsed().as_secs_f64());
    }

    if which == "all" || which == "pgd" {
        let t = std::time::Instant::now();
        let (rep, linf) =
            pgd_attack(&marked, &m, &key, &ext, &AttackKey::Actual, 1.0, 40, 0, &rc).unwrap();
        println!(
            "pgd actual d=1.0: acc {:.4} psnr {:?} max-linf {:.4} ({:.0}s)",
            rep.conditions[0].accuracy,
            rep.conditions[0].psnr,
            linf.iter().copied().fold(0.0f32, f32::max),
            t.elapsed().as_secs_f64()
        );
        let mut found = Vec::new();
        for s in 1..200u64 {
            if guessed_key(&marked, &key, s).is_ok() {
                found.push(s);
                if found.len() == 5 {
                    break;
                }
            }
        }
        println!("guess seeds: {found:?}");
        for s in found {
            let t = std::time::Instant::now();
            let (rep, _) = pgd_attack(
                &marked,
                &m,
                &key,
                &ext,
                &AttackKey::Guessed { seed: s },
                0.1,
                40,
                0,
                &rc,
            )
            .unwrap();
            println!(
                "pgd guessed {s} d=0.1: acc {:.4} psnr {:?} ({:.0}s)",
                rep.conditions[0].accuracy,
                rep.conditions[0].psnr,
                t.elapsed().as_secs_f64()
            );
        }
    }

    if which == "all" || which == "finetune" {
        let scene = make_scene(0);
        for (ci, pk) in [(false, false), (false, true), (true, true), (true, false)] {
            let cfg = FinetuneConfig {
                setting: FinetuneSetting {
                    clean_images: ci,
                    knows_pose: pk,
                },
                trials: 1,
                seed: 0,
                ..FinetuneConfig::default()
            };
            let t = std::time::Instant::now();
            let rep = finetune_attack(&field, &cb, &key, &ext, &scene, &cfg).unwrap();
            let rows: Vec<String> = rep
                .conditions
                .iter()
                .map(|c| format!("{}={:.4}/{:.1}dB", c.label, c.accuracy, c.psnr.unwrap()))
                .collect();
            println!(
                "finetune {}: {} ({:.0}s)",
                rep.attack,
                rows.join(" "),
                t.elapsed().as_secs_f64()
            );
        }
    }
}
