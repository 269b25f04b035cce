//! Joint optimization of the signature codebook and extractor against a
//! frozen, pretrained field.
//!
//! Each iteration samples a fresh random signature, renders the key pose
//! under the watermarked parameters, pushes the render through a sampled
//! distortion, extracts the keyed patches, and takes one Adam step on the
//! codebook and extractor jointly. The content loss compares a random ray
//! batch of the same render against the cached original. Only the pixels
//! that actually feed either loss are rendered: the distortion plan walks
//! the op composition backwards to find the source footprint of the keyed
//! patches, which keeps the per-iteration cost far below a full frame while
//! producing values identical to distorting the full image.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::caks::{select_key, KeyConfig, SecretKey};
use crate::codebook::{embed, Signature, SignatureCodebook, INIT_SCALE};
use crate::distortion::{
    apply_on_tape, plan_for_pixels, resolve, sample_spec, DistortionKind, DistortionRanges,
    DistortionSpec,
};
use crate::extractor::{binarize, bit_accuracy, Extractor, StatsSource};
use crate::field::RadianceField;
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::real::Real;
use crate::numerics::rng::{rng, Domain};
use crate::numerics::tape::{Tape, Var};
use crate::renderer::{
    assemble_pixels, build_plan, rays_for_pixels, render_image, render_patch_set, FieldVars,
    RenderConfig,
};
use crate::verify::psnr;
use crate::{Error, Result};

pub const GAMMA_SIGNATURE: f32 = 10.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainConfig {
    pub key: KeyConfig,
    pub iterations: usize,
    /// Rays in the content-loss subsample of the key-pose render.
    pub ray_batch: usize,
    /// Weight of the signature loss in the overall loss.
    pub gamma_signature: f32,
    pub lr: f32,
    pub lr_decay: f32,
    pub weight_decay: f32,
    /// Quadrature samples per ray.
    pub samples: usize,
    /// Seed of the training stream (signatures, distortions, ray batches).
    pub seed: u64,
    /// Train with the distortion layer between rendering and extraction.
    pub distortion: bool,
    /// Record every n-th point of the loss curve.
    pub curve_every: usize,
    /// Fresh random signatures embedded and extracted for the final report.
    pub eval_signatures: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            key: KeyConfig::default(),
            iterations: 3000,
            ray_batch: 4096,
            gamma_signature: GAMMA_SIGNATURE,
            lr: 1e-3,
            lr_decay: 0.999,
            weight_decay: 5e-4,
            samples: 64,
            seed: 0,
            distortion: true,
            curve_every: 10,
            eval_signatures: 50,
        }
    }
}

impl TrainConfig {
    pub fn n_bits(&self) -> usize {
        self.key.n_bits
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct LossPoint {
    pub step: usize,
    pub content: f32,
    pub signature: f32,
    pub overall: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainReport {
    pub config: TrainConfig,
    pub loss_curve: Vec<LossPoint>,
    /// Mean bit accuracy over fresh signatures embedded after optimization.
    pub final_accuracy: f32,
    /// Watermarked-vs-original render PSNR at the key pose.
    pub psnr_at_key_pose: f32,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub codebook: SignatureCodebook,
    pub extractor: Extractor,
    pub key: SecretKey,
    pub report: TrainReport,
}

/// Mean per-bit cross-entropy between the logits and the signature.
pub fn signature_loss<F: Real>(t: &mut Tape<F>, logits: Var, m: &Signature) -> Var {
    let targets: Vec<F> = m.bits().iter().map(|&b| F::from_usize(b as usize)).collect();
    let tv = t.constant_owned(targets, m.len(), 1);
    t.bce_logits_mean(logits, tv)
}

/// Content loss plus `gamma` times the signature loss.
pub fn overall_loss<F: Real>(t: &mut Tape<F>, content: Var, signature: Var, gamma: f32) -> Var {
    let scaled = t.affine(signature, F::from_f32(gamma), F::ZERO);
    t.add(content, scaled)
}

/// Row-major pixels of an axis-aligned window.
fn window_pixels(origin: (u32, u32), ph: u32, pw: u32, out: &mut Vec<(u32, u32)>) {
    for dy in 0..ph {
        for dx in 0..pw {
            out.push((origin.0 + dx, origin.1 + dy));
        }
    }
}

/// Jointly optimize a codebook and extractor for the given frozen field.
pub fn optimize(field: &RadianceField<f32>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    optimize_with_progress(field, cfg, |_| {})
}

/// [`optimize`] with a callback invoked at every recorded loss point.
pub fn optimize_with_progress(
    field: &RadianceField<f32>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossPoint),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let n_bits = cfg.key.n_bits;
    let (ph, pw) = (cfg.key.patch_h as u32, cfg.key.patch_w as u32);
    let (img_h, img_w) = (cfg.key.image_h as u32, cfg.key.image_w as u32);
    assert!(cfg.ray_batch >= 1, "content batch must be positive");

    let (key, _pool) = select_key(field, &cfg.key)?;
    let shape = {
        let lvl = &field.levels[field.theta_e_index()];
        [lvl.res, lvl.res, lvl.res, lvl.feat]
    };
    let mut cb = SignatureCodebook::init(n_bits, shape, &mut rng(cfg.seed, Domain::Codebook), INIT_SCALE);
    let mut ext = Extractor::standard(&mut rng(cfg.seed, Domain::ExtractorInit));

    let rc = RenderConfig {
        samples: cfg.samples,
        ..RenderConfig::default()
    };
    let original = render_image(field, &key.pose, &rc);
    let ranges = DistortionRanges::default();

    let mut sizes = vec![cb.data.len()];
    sizes.extend(ext.trainable().iter().map(|a| a.len()));
    let adam_cfg = AdamConfig {
        lr_decay: cfg.lr_decay,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::standard(cfg.lr)
    };
    let mut opt = Adam::new(adam_cfg, &sizes);

    let mut tr = rng(cfg.seed, Domain::Train);
    let mut curve = Vec::new();
    let grid_rows = shape[0] * shape[1] * shape[2];

    for step in 1..=cfg.iterations {
        let m = Signature::random(n_bits, &mut tr);
        let spec = if cfg.distortion {
            sample_spec(&mut tr)
        } else {
            DistortionSpec {
                kind: DistortionKind::None,
                seed: 0,
            }
        };
        let rd = resolve(&spec, &ranges, img_h, img_w);

        // Keyed patch windows tracked through the geometric part of the
        // distortion, then the source pixels they need.
        let mut out_px = Vec::with_capacity(n_bits * (ph * pw) as usize);
        for &(cx, cy) in &key.patch.centers {
            let origin = rd.displaced_patch_origin(cx, cy, ph, pw);
            window_pixels(origin, ph, pw, &mut out_px);
        }
        let dplan = plan_for_pixels::<f32>(&rd, &out_px);

        // Content subsample, then the union of every pixel to render.
        let content_px: Vec<(u32, u32)> =
            rand::seq::index::sample(&mut tr, (img_h * img_w) as usize, cfg.ray_batch)
                .iter()
                .map(|i| (i as u32 % img_w, i as u32 / img_w))
                .collect();
        let mut union: Vec<(u32, u32)> = Vec::with_capacity(content_px.len() + dplan.source_pixels.len());
        let mut seen = HashSet::with_capacity(union.capacity());
        for &p in content_px.iter().chain(&dplan.source_pixels) {
            if seen.insert(p) {
                union.push(p);
            }
        }
        let index_in_union: std::collections::HashMap<(u32, u32), u32> = union
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i as u32))
            .collect();

        let rays = rays_for_pixels(&key.pose, &union);
        let plan = build_plan(field, &rays, cfg.samples);

        let mut t: Tape<f32> = Tape::new();
        let vars = FieldVars::constants(&mut t, field);
        let cb_var = t.param(Arc::new(cb.data.clone()), 2 * n_bits, cb.entry_len());
        let bit_rows: Vec<u32> = (0..n_bits).map(|n| cb.row(n, m.bits()[n])).collect();
        let picked = t.gather_rows(cb_var, Arc::new(bit_rows));
        let gm_flat = t.sum_groups(picked, n_bits);
        let gm = t.reshape(gm_flat, grid_rows, shape[3]);
        let theta_e = vars.grids[field.theta_e_index()];
        let watermarked = t.add(theta_e, gm);
        let vars = vars.with_finest(watermarked);
        let graph = assemble_pixels(&mut t, &vars, &plan, [1.0; 3]);

        let content_idx: Vec<u32> = content_px.iter().map(|p| index_in_union[p]).collect();
        let content_pred = t.gather_rows(graph.pixels, Arc::new(content_idx));
        let mut target = Vec::with_capacity(cfg.ray_batch * 3);
        for &(px, py) in &content_px {
            target.extend_from_slice(&original.pixel(px as usize, py as usize));
        }
        let target = t.constant_owned(target, cfg.ray_batch, 3);
        let l_content = t.mse_loss(content_pred, target);

        let src_idx: Vec<u32> = dplan.source_pixels.iter().map(|p| index_in_union[p]).collect();
        let src_rows = t.gather_rows(graph.pixels, Arc::new(src_idx));
        let patches = apply_on_tape(&mut t, src_rows, &dplan);
        let ext_graph = ext.build_graph(
            &mut t,
            patches,
            n_bits,
            ph as usize,
            pw as usize,
            StatsSource::Batch,
            true,
        );
        let l_sig = signature_loss(&mut t, ext_graph.logits, &m);
        let l_total = overall_loss(&mut t, l_content, l_sig, cfg.gamma_signature);

        let (lc, ls, lt) = (
            t.scalar_value(l_content),
            t.scalar_value(l_sig),
            t.scalar_value(l_total),
        );
        if !lt.is_finite() {
            return Err(Error::invalid(format!(
                "training diverged: loss non-finite at iteration {step} \
                 (content {lc}, signature {ls})"
            )));
        }
        let grads = t
            .backward(l_total)
            .map_err(|e| Error::invalid(format!("training diverged at iteration {step}: {e}")))?;

        opt.begin_step();
        if let Some(g) = grads.get(cb_var) {
            opt.update(0, &mut cb.data, g, true);
        }
        for (slot, (arr, leaf)) in ext
            .trainable_mut()
            .into_iter()
            .zip(&ext_graph.leaves)
            .enumerate()
        {
            if let Some(g) = grads.get(*leaf) {
                opt.update(slot + 1, arr, g, true);
            }
        }
        ext.update_running_stats(&t, &ext_graph);

        if step == 1 || step == cfg.iterations || step % cfg.curve_every == 0 {
            let point = LossPoint {
                step,
                content: lc,
                signature: ls,
                overall: lt,
            };
            progress(&point);
            curve.push(point);
        }
    }

    // Post-optimization evaluation: embed fresh signatures, extract through
    // the key, and score bit accuracy; one render gauges imperceptibility.
    let mut ev = rng(cfg.seed, Domain::Signature);
    let spec = key.patch_spec();
    let mut acc_sum = 0.0f64;
    let mut psnr_at_key_pose = f32::NAN;
    for i in 0..cfg.eval_signatures {
        let m = Signature::random(n_bits, &mut ev);
        let marked = embed(field, &cb, &m);
        let patches = render_patch_set(&marked, &spec, &rc)?;
        let got = binarize(&ext.extract_logits(&patches))?;
        acc_sum += bit_accuracy(&got, &m) as f64;
        if i == 0 {
            psnr_at_key_pose = psnr(&original, &render_image(&marked, &key.pose, &rc));
        }
    }
    let final_accuracy = if cfg.eval_signatures > 0 {
        (acc_sum / cfg.eval_signatures as f64) as f32
    } else {
        f32::NAN
    };

    let report = TrainReport {
        config: cfg.clone(),
        loss_curve: curve,
        final_accuracy,
        psnr_at_key_pose,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        codebook: cb,
        extractor: ext,
        key,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caks::FilterMode;
    use crate::field::scene::make_scene_sized;
    use crate::field::FieldConfig;

    fn test_field(seed: u64) -> RadianceField<f32> {
        RadianceField::init_random(&FieldConfig::default(), &mut rng(seed, Domain::Pretrain))
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            key: KeyConfig {
                n_bits: 4,
                image_h: 48,
                image_w: 48,
                ..KeyConfig::default()
            },
            iterations: 8,
            ray_batch: 96,
            samples: 12,
            curve_every: 3,
            eval_signatures: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn signature_loss_oracles() {
        let m = Signature::new(vec![1, 0, 1]).unwrap();
        // Logits matching the targets drive the loss to zero.
        let mut t: Tape<f32> = Tape::new();
        let logits = t.constant_owned(vec![25.0, -25.0, 25.0], 3, 1);
        let l = signature_loss(&mut t, logits, &m);
        assert!(t.scalar_value(l) < 1e-6);
        // Zero logits sit at ln 2 regardless of the targets.
        let mut t: Tape<f32> = Tape::new();
        let logits = t.constant_owned(vec![0.0; 3], 3, 1);
        let l = signature_loss(&mut t, logits, &m);
        assert!((t.scalar_value(l) - std::f32::consts::LN_2).abs() < 1e-6);
        // A hopeless logit is clamped to 30 per bit.
        let one = Signature::new(vec![1]).unwrap();
        let mut t: Tape<f32> = Tape::new();
        let logits = t.constant_owned(vec![-500.0], 1, 1);
        let l = signature_loss(&mut t, logits, &one);
        let v = t.scalar_value(l);
        assert!((v - 30.0).abs() < 1e-4, "clamped loss is {v}");
    }

    #[test]
    fn overall_loss_combines_linearly() {
        let mut t: Tape<f32> = Tape::new();
        let lc = t.scalar_const(0.01);
        let ls = t.scalar_const(std::f32::consts::LN_2);
        let total = overall_loss(&mut t, lc, ls, 10.0);
        assert!((t.scalar_value(total) - 6.941).abs() < 1e-3);
        let zero_gamma = overall_loss(&mut t, lc, ls, 0.0);
        assert_eq!(t.scalar_value(zero_gamma), 0.01);
        let zero_sig = t.scalar_const(0.0);
        let just_content = overall_loss(&mut t, lc, zero_sig, 10.0);
        assert_eq!(t.scalar_value(just_content), 0.01);
    }

    #[test]
    fn zero_iterations_leave_codebook_and_extractor_at_init() {
        let field = test_field(2);
        let cfg = TrainConfig {
            iterations: 0,
            ..small_config()
        };
        let out = optimize(&field, &cfg).unwrap();
        let fresh_cb = SignatureCodebook::init(
            cfg.key.n_bits,
            out.codebook.shape,
            &mut rng(cfg.seed, Domain::Codebook),
            INIT_SCALE,
        );
        assert_eq!(out.codebook.data, fresh_cb.data);
        let fresh_ext = Extractor::standard(&mut rng(cfg.seed, Domain::ExtractorInit));
        assert_eq!(out.extractor.trainable(), fresh_ext.trainable());
        assert!(out.report.loss_curve.is_empty());
    }

    #[test]
    fn short_run_is_deterministic_and_leaves_field_frozen() {
        let field = test_field(3);
        let before = field.param_bytes();
        let cfg = small_config();
        let a = optimize(&field, &cfg).unwrap();
        assert_eq!(field.param_bytes(), before, "field was mutated");
        let b = optimize(&field, &cfg).unwrap();
        assert_eq!(a.codebook.data, b.codebook.data);
        assert_eq!(a.report.final_accuracy, b.report.final_accuracy);
        // Losses recorded and finite; first and last step always present.
        assert_eq!(a.report.loss_curve.first().unwrap().step, 1);
        assert_eq!(a.report.loss_curve.last().unwrap().step, cfg.iterations);
        assert!(a
            .report
            .loss_curve
            .iter()
            .all(|p| p.overall.is_finite() && p.content >= 0.0));
        // The signature stream actually varies across iterations.
        assert!(a.report.wall_seconds > 0.0);
    }

    #[test]
    fn distortion_off_uses_identity_and_still_trains() {
        let field = test_field(4);
        let cfg = TrainConfig {
            distortion: false,
            ..small_config()
        };
        let out = optimize(&field, &cfg).unwrap();
        assert_eq!(out.report.loss_curve.len(), 4);
        assert!(out.report.final_accuracy >= 0.0);
    }

    #[test]
    fn variation_mode_key_and_training_compose() {
        // The alternate filter mode flows through key selection unchanged.
        let field = test_field(5);
        let cfg = TrainConfig {
            key: KeyConfig {
                n_bits: 4,
                image_h: 48,
                image_w: 48,
                mode: FilterMode::VariationBelow { delta: 0.9 },
                ..KeyConfig::default()
            },
            iterations: 2,
            ray_batch: 64,
            samples: 8,
            eval_signatures: 1,
            ..TrainConfig::default()
        };
        let out = optimize(&field, &cfg).unwrap();
        assert_eq!(out.key.patch.centers.len(), 4);
    }

    #[test]
    fn scene_fixture_is_available_for_training() {
        // Guards the desk-run entry point: a pretrained-small scene field
        // must survive a couple of optimization steps end to end.
        let scene = make_scene_sized(0, 2, 1, 24, 96);
        let mut field = test_field(6);
        let pre = crate::field::pretrain::PretrainConfig {
            steps: 5,
            batch: 32,
            samples: 8,
            ..Default::default()
        };
        crate::field::pretrain::pretrain(&mut field, &scene, &pre).unwrap();
        let cfg = TrainConfig {
            iterations: 2,
            eval_signatures: 1,
            ..small_config()
        };
        let out = optimize(&field, &cfg).unwrap();
        assert!(out.report.psnr_at_key_pose > 20.0);
    }
}
