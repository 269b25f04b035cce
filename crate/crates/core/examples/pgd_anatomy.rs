//! Scratch probe: which parameter groups carry PGD collateral damage.

use nsig_core::attacks::guessed_key;
use nsig_core::caks::SecretKey;
use nsig_core::codebook::{embed, Signature, SignatureCodebook};
use nsig_core::extractor::{bit_accuracy, Extractor, StatsSource};
use nsig_core::field::RadianceField;
use nsig_core::numerics::rng::{rng, Domain};
use nsig_core::numerics::tape::Tape;
use nsig_core::renderer::{
    assemble_pixels, build_plan, rays_for_pixels, render_image, FieldVars, RenderConfig,
};
use nsig_core::verify::{extract_signature, psnr};
use std::path::Path;

fn sgn(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn main() {
    let dir = Path::new("/tmp/nsig-desk");
    let field: RadianceField<f32> = RadianceField::load(&dir.join("model.nsig")).unwrap();
    let cb = SignatureCodebook::load(&dir.join("codebook.nscb")).unwrap();
    let key = SecretKey::load(&dir.join("key.json")).unwrap();
    let ext = Extractor::load(&dir.join("extractor.nsex")).unwrap();
    let rc = RenderConfig::default();

    let mut r = rng(123, Domain::Signature);
    let m = Signature::random(cb.n_bits, &mut r);
    let marked = embed(&field, &cb, &m);

    // Parameter magnitude profile.
    for i in 0..marked.n_param_arrays() {
        let a = marked.param_array(i);
        let mean_abs: f32 = a.iter().map(|v| v.abs()).sum::<f32>() / a.len() as f32;
        let max_abs = a.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        println!(
            "array {i}: len {} mean|v| {:.4} max|v| {:.4}",
            a.len(),
            mean_abs,
            max_abs
        );
    }

    let delta_adv = 0.1f32;
    let steps = 40;
    let step_size = delta_adv / 10.0;
    let guess = guessed_key(&marked, &key, 1).unwrap();
    let n_bits = guess.n_patches();
    let spec = guess.patch_spec();
    let mut pixels = Vec::new();
    for i in 0..n_bits {
        pixels.extend(spec.patch_pixels(i));
    }
    let rays = rays_for_pixels(&guess.pose, &pixels);
    let mut ar = rng(0, Domain::Attack);
    let m_random = Signature::random(n_bits, &mut ar);
    let targets: Vec<f32> = m_random.bits().iter().map(|&b| b as f32).collect();

    let n_arrays = marked.n_param_arrays();
    let mut delta: Vec<Vec<f32>> = (0..n_arrays)
        .map(|i| vec![0.0; marked.param_array(i).len()])
        .collect();
    let mut attacked = marked.clone();
    for _ in 0..steps {
        let plan = build_plan(&attacked, &rays, rc.samples);
        let mut tape: Tape<f32> = Tape::new();
        let vars = FieldVars::params(&mut tape, &attacked);
        let graph = assemble_pixels(&mut tape, &vars, &plan, [1.0; 3]);
        let g = ext.build_graph(
            &mut tape,
            graph.pixels,
            n_bits,
            spec.ph,
            spec.pw,
            StatsSource::Frozen,
            false,
        );
        let target = tape.constant_owned(targets.clone(), n_bits, 1);
        let loss = tape.bce_logits_mean(g.logits, target);
        let grads = tape.backward(loss).unwrap();
        for i in 0..n_arrays {
            if let Some(gr) = grads.get(vars.var(i)) {
                let d = &mut delta[i];
                for (dv, &gv) in d.iter_mut().zip(gr) {
                    *dv = (*dv - step_size * sgn(gv)).clamp(-delta_adv, delta_adv);
                }
            }
            let base = marked.param_array(i);
            let arr = attacked.param_array_mut(i);
            for (j, a) in arr.iter_mut().enumerate() {
                *a = base[j] + delta[i][j];
            }
        }
    }

    // Perturbation stats per array.
    let grid_count = marked.levels.len();
    for (i, d) in delta.iter().enumerate() {
        let nz = d.iter().filter(|v| v.abs() > 0.0).count();
        let sat = d.iter().filter(|v| v.abs() >= delta_adv).count();
        let kind = if i < grid_count { "grid" } else { "dec" };
        println!(
            "delta[{i}] ({kind}): touched {nz}/{} saturated {sat}",
            d.len()
        );
    }

    let base_frame = render_image(&marked, &key.pose, &rc);
    let eval = |label: &str, f: &RadianceField<f32>| {
        let got = extract_signature(f, &key, &ext, &rc).unwrap();
        let acc = bit_accuracy(&got, &m);
        let q = psnr(&render_image(f, &key.pose, &rc), &base_frame);
        println!("{label}: acc {acc:.4} key-pose psnr {q:.2}");
    };
    eval("full delta", &attacked);

    let mut grids_only = marked.clone();
    let mut dec_only = marked.clone();
    for i in 0..n_arrays {
        let base = marked.param_array(i);
        if i < grid_count {
            let arr = grids_only.param_array_mut(i);
            for (j, a) in arr.iter_mut().enumerate() {
                *a = base[j] + delta[i][j];
            }
        } else {
            let arr = dec_only.param_array_mut(i);
            for (j, a) in arr.iter_mut().enumerate() {
                *a = base[j] + delta[i][j];
            }
        }
    }
    eval("grid-only delta", &grids_only);
    eval("decoder-only delta", &dec_only);
}
