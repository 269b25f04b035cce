//! Attack harness: image-transform robustness, photometric fine-tuning of a
//! stolen model, projected-gradient parameter attacks, and the random-key
//! probe.
//!
//! Every attack runs from fixed seeds and reports its results as an
//! [`AttackReport`] whose conditions carry bit accuracy (and render PSNR
//! where the attack touches the model itself). Attackers see only what
//! their threat model grants them: the owner's key enters an attack routine
//! solely for the final accuracy measurement.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caks::{partition, select_key, KeyConfig, PatchKey, SecretKey};
use crate::codebook::{embed, Signature, SignatureCodebook};
use crate::distortion::{
    apply_spec, DistortionKind, DistortionRanges, DistortionSpec, ResolvedDistortion,
};
use crate::extractor::{binarize, bit_accuracy, Extractor, StatsSource};
use crate::field::scene::Scene;
use crate::field::RadianceField;
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::rng::{normal, rng, Domain};
use crate::numerics::tape::Tape;
use crate::renderer::camera::sample_hemisphere_pose;
use crate::renderer::image::Image;
use crate::renderer::{
    assemble_pixels, build_plan, rays_for_pixels, render_image, FieldVars, RenderConfig,
};
use crate::verify::{extract_signature, psnr};
use crate::{Error, Result};

/// Optimizer steps at which fine-tuning attacks measure bit accuracy.
pub const FINETUNE_CHECKPOINTS: [usize; 4] = [0, 100, 300, 500];

/// Projected-gradient steps of the parameter attack.
pub const PGD_STEPS: usize = 40;

/// One measured condition of an attack (a distortion kind, a checkpoint, a
/// key hypothesis, ...).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Condition {
    pub label: String,
    pub accuracy: f32,
    /// Render quality against the pre-attack model, where the attack
    /// modifies parameters (absent for pure image-level transforms).
    pub psnr: Option<f32>,
}

/// Outcome of one attack scenario.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AttackReport {
    pub attack: String,
    pub parameters: serde_json::Value,
    pub conditions: Vec<Condition>,
    pub seed: u64,
    pub trials: usize,
    pub wall_seconds: f64,
}

fn kind_label(kind: DistortionKind) -> String {
    match serde_json::to_value(kind) {
        Ok(serde_json::Value::String(s)) => s,
        _ => format!("{kind:?}"),
    }
}

/// Crop the displaced patch windows out of a distorted render and binarize
/// the extractor logits, mirroring how training tracked keyed patches
/// through geometric distortions.
pub fn extract_through_distortion(
    distorted: &Image,
    rd: &ResolvedDistortion,
    key: &SecretKey,
    ext: &Extractor,
) -> Result<Signature> {
    let (ph, pw) = (key.patch.h, key.patch.w);
    let patches: Vec<Image> = key
        .patch
        .centers
        .iter()
        .map(|&(cx, cy)| {
            let (ox, oy) = rd.displaced_patch_origin(cx, cy, ph, pw);
            distorted.crop(ox as usize, oy as usize, pw as usize, ph as usize)
        })
        .collect();
    binarize(&ext.extract_logits(&patches))
}

/// Bit accuracy under image-level transformations: embed fresh signatures,
/// render the key pose, push the frame through each distortion kind, and
/// extract through the displaced windows.
#[allow(clippy::too_many_arguments)]
pub fn transform_robustness(
    field: &RadianceField<f32>,
    cb: &SignatureCodebook,
    key: &SecretKey,
    ext: &Extractor,
    kinds: &[DistortionKind],
    trials: usize,
    seed: u64,
    rc: &RenderConfig,
) -> Result<AttackReport> {
    assert!(trials >= 1, "transform robustness needs at least one trial");
    let start = Instant::now();
    let ranges = DistortionRanges::default();
    let mut r = rng(seed, Domain::Attack);
    let mut acc = vec![0.0f64; kinds.len()];
    let mut quality = vec![0.0f64; kinds.len()];
    for _ in 0..trials {
        let m = Signature::random(cb.n_bits, &mut r);
        let marked = embed(field, cb, &m);
        let frame = render_image(&marked, &key.pose, rc);
        for (k, &kind) in kinds.iter().enumerate() {
            let spec = DistortionSpec {
                kind,
                seed: r.gen(),
            };
            let (distorted, rd) = apply_spec(&frame, &spec, &ranges);
            let got = extract_through_distortion(&distorted, &rd, key, ext)?;
            acc[k] += bit_accuracy(&got, &m) as f64;
            quality[k] += psnr(&frame, &distorted) as f64;
        }
    }
    let conditions = kinds
        .iter()
        .enumerate()
        .map(|(k, &kind)| Condition {
            label: kind_label(kind),
            accuracy: (acc[k] / trials as f64) as f32,
            psnr: Some((quality[k] / trials as f64) as f32),
        })
        .collect();
    Ok(AttackReport {
        attack: "transform-robustness".into(),
        parameters: serde_json::json!({
            "kinds": kinds,
            "samples": rc.samples,
        }),
        conditions,
        seed,
        trials,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// What the fine-tuning attacker is granted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FinetuneSetting {
    /// Clean reference images of the scene (otherwise the attacker fits the
    /// watermarked model's own renders plus noise).
    pub clean_images: bool,
    /// The secret key pose (otherwise fine-tuning happens at random poses).
    pub knows_pose: bool,
}

impl FinetuneSetting {
    pub fn label(&self) -> String {
        format!(
            "{}-ci/{}-pk",
            if self.clean_images { "w" } else { "wo" },
            if self.knows_pose { "w" } else { "wo" }
        )
    }
}

/// Knobs of the fine-tuning attack.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FinetuneConfig {
    pub setting: FinetuneSetting,
    pub steps: usize,
    pub checkpoints: Vec<usize>,
    /// Watermarked models attacked (each carries a fresh signature).
    pub trials: usize,
    pub lr: f32,
    /// Rays per fine-tuning step.
    pub batch: usize,
    /// Noise added to the attacker's self-rendered references.
    pub noise_sigma: f32,
    /// Reference views fitted when the key pose is unknown.
    pub reference_poses: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            setting: FinetuneSetting {
                clean_images: false,
                knows_pose: false,
            },
            steps: *FINETUNE_CHECKPOINTS.last().unwrap(),
            checkpoints: FINETUNE_CHECKPOINTS.to_vec(),
            trials: 3,
            lr: 1e-3,
            batch: 1024,
            noise_sigma: 0.02,
            reference_poses: 10,
            samples: crate::renderer::DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

/// Quadrature bins of the analytic reference renderer, matching the scene
/// generator's own views.
const REFERENCE_BINS: usize = 768;

/// Photometric fine-tuning of a stolen watermarked model. All model
/// parameters train against the references the setting grants; bit accuracy
/// with the true key is measured at each checkpoint. A diverging run is
/// rolled back to its last finite checkpoint and recorded.
pub fn finetune_attack(
    field: &RadianceField<f32>,
    cb: &SignatureCodebook,
    key: &SecretKey,
    ext: &Extractor,
    scene: &Scene,
    cfg: &FinetuneConfig,
) -> Result<AttackReport> {
    assert!(cfg.trials >= 1, "fine-tuning needs at least one trial");
    let mut checkpoints = cfg.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if checkpoints.last().copied().unwrap_or(0) > cfg.steps {
        return Err(Error::invalid(format!(
            "checkpoint {} exceeds the {}-step budget",
            checkpoints.last().unwrap(),
            cfg.steps
        )));
    }
    let start = Instant::now();
    let rc = RenderConfig {
        samples: cfg.samples,
        ..RenderConfig::default()
    };
    let mut r = rng(cfg.seed, Domain::Attack);
    let mut acc = vec![0.0f64; checkpoints.len()];
    let mut quality = vec![0.0f64; checkpoints.len()];
    let mut events: Vec<String> = Vec::new();

    for trial in 0..cfg.trials {
        let m = Signature::random(cb.n_bits, &mut r);
        let mut attacked = embed(field, cb, &m);
        let reference_frame = render_image(&attacked, &key.pose, &rc);

        // References granted by the setting: poses first, then targets.
        let poses: Vec<_> = if cfg.setting.knows_pose {
            vec![key.pose.clone()]
        } else {
            (0..cfg.reference_poses)
                .map(|_| sample_hemisphere_pose(&mut r, key.pose.h, key.pose.w))
                .collect()
        };
        let views: Vec<(usize, Image)> = poses
            .iter()
            .enumerate()
            .map(|(i, pose)| {
                let img = if cfg.setting.clean_images {
                    scene.model.render(pose, REFERENCE_BINS)
                } else {
                    let mut img = render_image(&attacked, pose, &rc);
                    for v in &mut img.data {
                        *v = (*v + normal(&mut r, 0.0, cfg.noise_sigma)).clamp(0.0, 1.0);
                    }
                    img
                };
                (i, img)
            })
            .collect();

        let sizes: Vec<usize> = (0..attacked.n_param_arrays())
            .map(|i| attacked.param_array(i).len())
            .collect();
        let mut opt = Adam::new(AdamConfig::standard(cfg.lr), &sizes);

        let mut measure =
            |field: &RadianceField<f32>, slot: usize, acc: &mut [f64], quality: &mut [f64]| {
                let got = extract_signature(field, key, ext, &rc)?;
                acc[slot] += bit_accuracy(&got, &m) as f64;
                quality[slot] += psnr(&render_image(field, &key.pose, &rc), &reference_frame) as f64;
                Ok::<(), Error>(())
            };

        let mut next = 0usize;
        if checkpoints.first() == Some(&0) {
            measure(&attacked, 0, &mut acc, &mut quality)?;
            next = 1;
        }
        let mut snapshot = attacked.clone();
        'steps: for step in 1..=cfg.steps {
            let (pi, target_img) = &views[r.gen_range(0..views.len())];
            let pose = &poses[*pi];
            let pixels: Vec<(u32, u32)> = (0..cfg.batch)
                .map(|_| (r.gen_range(0..pose.w), r.gen_range(0..pose.h)))
                .collect();
            let rays = rays_for_pixels(pose, &pixels);
            let plan = build_plan(&attacked, &rays, cfg.samples);
            let mut tape: Tape<f32> = Tape::new();
            let vars = FieldVars::params(&mut tape, &attacked);
            let graph = assemble_pixels(&mut tape, &vars, &plan, [1.0; 3]);
            let mut target = Vec::with_capacity(cfg.batch * 3);
            for &(px, py) in &pixels {
                target.extend_from_slice(&target_img.pixel(px as usize, py as usize));
            }
            let target = tape.constant_owned(target, cfg.batch, 3);
            let loss = tape.mse_loss(graph.pixels, target);
            if !tape.scalar_value(loss).is_finite() {
                events.push(format!(
                    "trial {trial}: diverged at step {step}, rolled back to last checkpoint"
                ));
                attacked = snapshot.clone();
                break 'steps;
            }
            let grads = tape.backward(loss).map_err(|e| {
                Error::invalid(format!("fine-tuning failed at step {step}: {e}"))
            })?;
            opt.begin_step();
            for i in 0..attacked.n_param_arrays() {
                if let Some(g) = grads.get(vars.var(i)) {
                    opt.update(i, attacked.param_array_mut(i), g, false);
                }
            }
            while next < checkpoints.len() && checkpoints[next] == step {
                measure(&attacked, next, &mut acc, &mut quality)?;
                snapshot = attacked.clone();
                next += 1;
            }
        }
        // A rolled-back run still reports its remaining checkpoints, all
        // measured on the restored parameters.
        while next < checkpoints.len() {
            measure(&attacked, next, &mut acc, &mut quality)?;
            next += 1;
        }
    }

    let conditions = checkpoints
        .iter()
        .enumerate()
        .map(|(i, &step)| Condition {
            label: format!("step-{step}"),
            accuracy: (acc[i] / cfg.trials as f64) as f32,
            psnr: Some((quality[i] / cfg.trials as f64) as f32),
        })
        .collect();
    Ok(AttackReport {
        attack: format!("finetune-{}", cfg.setting.label()),
        parameters: serde_json::json!({
            "setting": cfg.setting,
            "steps": cfg.steps,
            "lr": cfg.lr,
            "batch": cfg.batch,
            "noise-sigma": cfg.noise_sigma,
            "reference-poses": if cfg.setting.knows_pose { 1 } else { cfg.reference_poses },
            "events": events,
        }),
        conditions,
        seed: cfg.seed,
        trials: cfg.trials,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// The key hypothesis a PGD attacker optimizes against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKey {
    /// The attacker somehow obtained the owner's key.
    Actual,
    /// A key drawn from the selection pipeline under the attacker's seed.
    Guessed { seed: u64 },
}

impl AttackKey {
    fn label(&self, delta_adv: f32) -> String {
        match self {
            AttackKey::Actual => format!("actual-key/delta-{delta_adv}"),
            AttackKey::Guessed { seed } => format!("guessed-key-{seed}/delta-{delta_adv}"),
        }
    }
}

/// The key a guessing attacker derives: the published patch geometry plus
/// the regular selection pipeline run under the attacker's own seed. Fails
/// when the guessed pose yields too few candidate patches, in which case an
/// attacker would simply move on to the next seed.
pub fn guessed_key(model: &RadianceField<f32>, like: &SecretKey, seed: u64) -> Result<SecretKey> {
    let cfg = KeyConfig {
        n_bits: like.n_patches(),
        patch_h: like.patch.h,
        patch_w: like.patch.w,
        image_h: like.pose.h,
        image_w: like.pose.w,
        pose_seed: seed,
        selection_seed: seed,
        ..KeyConfig::default()
    };
    Ok(select_key(model, &cfg)?.0)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected-gradient attack on the model parameters: drive the extractor's
/// output at the attack key toward a random signature while keeping the
/// parameter perturbation inside the l-infinity ball of radius `delta_adv`
/// (sign steps of `delta_adv / 10`, projected after every step).
///
/// Returns the report plus the per-step l-infinity norm of the perturbation
/// so callers can audit that the constraint held exactly.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack(
    marked: &RadianceField<f32>,
    m: &Signature,
    key: &SecretKey,
    ext: &Extractor,
    attack_key: &AttackKey,
    delta_adv: f32,
    steps: usize,
    seed: u64,
    rc: &RenderConfig,
) -> Result<(AttackReport, Vec<f32>)> {
    assert!(delta_adv > 0.0, "perturbation budget must be positive");
    let start = Instant::now();
    let mut r = rng(seed, Domain::Attack);

    let guess = match attack_key {
        AttackKey::Actual => key.clone(),
        AttackKey::Guessed { seed } => guessed_key(marked, key, *seed)?,
    };
    let n_bits = guess.n_patches();
    let m_random = Signature::random(n_bits, &mut r);
    let spec = guess.patch_spec();
    let mut pixels = Vec::with_capacity(n_bits * spec.ph * spec.pw);
    for i in 0..n_bits {
        pixels.extend(spec.patch_pixels(i));
    }
    let rays = rays_for_pixels(&guess.pose, &pixels);
    let targets: Vec<f32> = m_random.bits().iter().map(|&b| b as f32).collect();
    let step_size = delta_adv / 10.0;

    let mut delta: Vec<Vec<f32>> = (0..marked.n_param_arrays())
        .map(|i| vec![0.0; marked.param_array(i).len()])
        .collect();
    let mut attacked = marked.clone();
    let mut linf_per_step = Vec::with_capacity(steps);
    for _ in 0..steps {
        let plan = build_plan(&attacked, &rays, rc.samples);
        let mut tape: Tape<f32> = Tape::new();
        let vars = FieldVars::params(&mut tape, &attacked);
        let graph = assemble_pixels(&mut tape, &vars, &plan, [1.0; 3]);
        let ext_graph = ext.build_graph(
            &mut tape,
            graph.pixels,
            n_bits,
            spec.ph,
            spec.pw,
            StatsSource::Frozen,
            false,
        );
        let target = tape.constant_owned(targets.clone(), n_bits, 1);
        let loss = tape.bce_logits_mean(ext_graph.logits, target);
        let grads = tape
            .backward(loss)
            .map_err(|e| Error::invalid(format!("pgd backward failed: {e}")))?;
        let mut linf = 0.0f32;
        for i in 0..marked.n_param_arrays() {
            let d = &mut delta[i];
            if let Some(g) = grads.get(vars.var(i)) {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = (*dv - step_size * sign(gv)).clamp(-delta_adv, delta_adv);
                }
            }
            let base = marked.param_array(i);
            let arr = attacked.param_array_mut(i);
            for (j, a) in arr.iter_mut().enumerate() {
                *a = base[j] + d[j];
                linf = linf.max(d[j].abs());
            }
        }
        linf_per_step.push(linf);
    }

    let got = extract_signature(&attacked, key, ext, rc)?;
    let accuracy = bit_accuracy(&got, m);
    let quality = psnr(
        &render_image(&attacked, &key.pose, rc),
        &render_image(marked, &key.pose, rc),
    );
    let report = AttackReport {
        attack: "pgd".into(),
        parameters: serde_json::json!({
            "attack-key": attack_key,
            "delta-adv": delta_adv,
            "step-size": step_size,
            "steps": steps,
            "target": m_random.to_bitstring(),
            "max-linf": linf_per_step.iter().copied().fold(0.0f32, f32::max),
        }),
        conditions: vec![Condition {
            label: attack_key.label(delta_adv),
            accuracy,
            psnr: Some(quality),
        }],
        seed,
        trials: 1,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, linf_per_step))
}

/// Accuracy histogram over [0, 1] with fixed-width bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Histogram {
    pub bin_width: f32,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(bin_width: f32) -> Self {
        assert!(bin_width > 0.0 && bin_width <= 1.0);
        let bins = (1.0 / bin_width).ceil() as usize;
        Histogram {
            bin_width,
            counts: vec![0; bins],
        }
    }

    pub fn push(&mut self, v: f32) {
        let last = self.counts.len() - 1;
        let i = ((v / self.bin_width) as usize).min(last);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_center(&self, i: usize) -> f32 {
        (i as f32 + 0.5) * self.bin_width
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin-center,count\n");
        for (i, &c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.4},{c}\n", self.bin_center(i)));
        }
        out
    }
}

/// Probe a watermarked model with random keys: poses from the key-selection
/// distribution, patch centers drawn uniformly from the alignment lattice.
/// Reports the accuracy histogram next to the correct key's accuracy.
pub fn random_key_attack(
    marked: &RadianceField<f32>,
    m: &Signature,
    key: &SecretKey,
    ext: &Extractor,
    trials: usize,
    seed: u64,
    rc: &RenderConfig,
) -> Result<(AttackReport, Histogram)> {
    let start = Instant::now();
    let mut r = rng(seed, Domain::Attack);
    let correct = bit_accuracy(&extract_signature(marked, key, ext, rc)?, m);

    let (h, w) = (key.pose.h, key.pose.w);
    let (ph, pw) = (key.patch.h, key.patch.w);
    let lattice = partition(h, w, ph, pw);
    let n_bits = key.n_patches();
    assert!(
        lattice.len() >= n_bits,
        "lattice holds too few cells for the key size"
    );

    let mut hist = Histogram::new(0.05);
    let mut sum = 0.0f64;
    let mut below_gap = 0usize;
    for _ in 0..trials {
        let pose = sample_hemisphere_pose(&mut r, h, w);
        let centers = rand::seq::index::sample(&mut r, lattice.len(), n_bits)
            .iter()
            .map(|i| lattice[i])
            .collect();
        let probe = SecretKey {
            version: key.version,
            pose,
            patch: PatchKey {
                h: ph,
                w: pw,
                centers,
            },
            created_from: key.created_from.clone(),
        };
        let acc = bit_accuracy(&extract_signature(marked, &probe, ext, rc)?, m);
        hist.push(acc);
        sum += acc as f64;
        if acc < correct - 0.2 {
            below_gap += 1;
        }
    }
    let mean = if trials == 0 {
        0.0
    } else {
        (sum / trials as f64) as f32
    };
    let report = AttackReport {
        attack: "random-key".into(),
        parameters: serde_json::json!({
            "lattice-cells": lattice.len(),
            "fraction-below-gap": if trials == 0 { 0.0 } else { below_gap as f64 / trials as f64 },
        }),
        conditions: vec![
            Condition {
                label: "correct-key".into(),
                accuracy: correct,
                psnr: None,
            },
            Condition {
                label: "random-key-mean".into(),
                accuracy: mean,
                psnr: None,
            },
        ],
        seed,
        trials,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, hist))
}
