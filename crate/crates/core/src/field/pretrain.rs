//! Photometric pretraining: fit a randomly initialized radiance field to the
//! reference images of a procedural scene, producing the to-be-protected
//! model. Training minimizes squared error between rendered and reference
//! colors over random ray batches with Adam; quality is reported as PSNR on
//! the held-out views.

use rand::Rng;

use crate::field::scene::{Scene, View};
use crate::field::RadianceField;
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::rng::{rng, Domain};
use crate::numerics::tape::Tape;
use crate::renderer::{
    assemble_pixels, build_plan, rays_for_pixels, render_image, FieldVars, RenderConfig,
};
use crate::{verify, Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Rays per optimization step.
    pub batch: usize,
    /// Quadrature samples per ray during training and evaluation.
    pub samples: usize,
    pub lr: f32,
    /// Multiplicative per-step learning-rate decay.
    pub lr_decay: f32,
    /// Run seed; all batch sampling derives from this.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 5000,
            batch: 1024,
            samples: 64,
            lr: 1e-2,
            lr_decay: 0.9995,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f32,
    pub heldout_psnr: f32,
}

/// PSNR of the field's renders against reference views, pooled over all
/// pixels of all views.
pub fn heldout_psnr(field: &RadianceField<f32>, views: &[View], samples: usize) -> f32 {
    let cfg = RenderConfig {
        samples,
        ..RenderConfig::default()
    };
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for v in views {
        let img = render_image(field, &v.pose, &cfg);
        for (&a, &b) in img.data.iter().zip(&v.image.data) {
            let d = (a - b) as f64;
            acc += d * d;
        }
        n += img.data.len();
    }
    verify::psnr_from_mse((acc / n.max(1) as f64) as f32)
}

/// Train `field` against the scene's training views. Returns the held-out
/// PSNR after the final step. A non-finite loss aborts with the step index.
pub fn pretrain(
    field: &mut RadianceField<f32>,
    scene: &Scene,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    assert!(!scene.train.is_empty(), "scene has no training views");
    assert!(cfg.batch >= 1 && cfg.samples >= 1);
    let sizes: Vec<usize> = (0..field.n_param_arrays())
        .map(|i| field.param_array(i).len())
        .collect();
    let adam_cfg = AdamConfig {
        lr_decay: cfg.lr_decay,
        ..AdamConfig::standard(cfg.lr)
    };
    let mut opt = Adam::new(adam_cfg, &sizes);
    let mut g = rng(cfg.seed, Domain::Pretrain);
    let mut final_loss = f32::NAN;
    for step in 1..=cfg.steps {
        let view = &scene.train[g.gen_range(0..scene.train.len())];
        let pixels: Vec<(u32, u32)> = (0..cfg.batch)
            .map(|_| (g.gen_range(0..view.pose.w), g.gen_range(0..view.pose.h)))
            .collect();
        let rays = rays_for_pixels(&view.pose, &pixels);
        let plan = build_plan(field, &rays, cfg.samples);
        let mut tape = Tape::new();
        let vars = FieldVars::params(&mut tape, field);
        let graph = assemble_pixels(&mut tape, &vars, &plan, [1.0; 3]);
        let mut target = Vec::with_capacity(cfg.batch * 3);
        for &(px, py) in &pixels {
            target.extend_from_slice(&view.image.pixel(px as usize, py as usize));
        }
        let target = tape.constant_owned(target, cfg.batch, 3);
        let loss = tape.mse_loss(graph.pixels, target);
        final_loss = tape.scalar_value(loss);
        if !final_loss.is_finite() {
            return Err(Error::invalid(format!(
                "pretraining diverged: loss is non-finite at step {step}"
            )));
        }
        let grads = tape
            .backward(loss)
            .map_err(|e| Error::invalid(format!("pretraining diverged at step {step}: {e}")))?;
        opt.begin_step();
        for i in 0..field.n_param_arrays() {
            if let Some(gr) = grads.get(vars.var(i)) {
                opt.update(i, field.param_array_mut(i), gr, false);
            }
        }
    }
    Ok(PretrainReport {
        steps: cfg.steps,
        final_loss,
        heldout_psnr: heldout_psnr(field, &scene.heldout, cfg.samples),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::scene::make_scene_sized;
    use crate::field::FieldConfig;
    use crate::numerics::rng::{rng as seeded, Domain};

    fn small_field(seed: u64) -> RadianceField<f32> {
        let mut r = seeded(seed, Domain::Pretrain);
        RadianceField::init_random(&FieldConfig::default(), &mut r)
    }

    #[test]
    fn zero_steps_leaves_field_unchanged() {
        let scene = make_scene_sized(3, 2, 1, 24, 96);
        let mut field = small_field(11);
        let before = field.param_bytes();
        let cfg = PretrainConfig {
            steps: 0,
            batch: 16,
            samples: 8,
            ..PretrainConfig::default()
        };
        let report = pretrain(&mut field, &scene, &cfg).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(field.param_bytes(), before);
    }

    #[test]
    fn non_finite_loss_aborts_with_step_index() {
        let scene = make_scene_sized(3, 2, 1, 24, 96);
        let mut field = small_field(11);
        for v in field.theta_e_mut().iter_mut() {
            *v = f32::NAN;
        }
        let cfg = PretrainConfig {
            steps: 5,
            batch: 16,
            samples: 8,
            ..PretrainConfig::default()
        };
        let err = pretrain(&mut field, &scene, &cfg).unwrap_err();
        assert!(err.to_string().contains("step 1"), "got: {err}");
    }

    #[test]
    fn short_run_improves_heldout_psnr() {
        let scene = make_scene_sized(5, 3, 2, 48, 256);
        let mut field = small_field(11);
        let before = heldout_psnr(&field, &scene.heldout, 32);
        let cfg = PretrainConfig {
            steps: 150,
            batch: 512,
            samples: 32,
            seed: 5,
            ..PretrainConfig::default()
        };
        let report = pretrain(&mut field, &scene, &cfg).unwrap();
        assert!(
            report.heldout_psnr > before + 3.0,
            "psnr before {before:.2} dB, after {:.2} dB",
            report.heldout_psnr
        );
        assert!(report.final_loss.is_finite());
    }
}
