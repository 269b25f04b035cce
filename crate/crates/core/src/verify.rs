//! Image-quality metrics and ownership verification.
//!
//! The metric half of this module (PSNR, SSIM) is self-contained image math
//! used both by pretraining (held-out quality) and by the imperceptibility
//! sweep that compares watermarked renders against the original model's
//! renders. The verification half drives the end-to-end ownership check:
//! render keyed patches from a model file, run the extractor, binarize, and
//! compare against every expected signature.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::caks::SecretKey;
use crate::codebook::{embed, Signature, SignatureCodebook};
use crate::extractor::{binarize, bit_accuracy, Extractor};
use crate::field::RadianceField;
use crate::numerics::rng::{rng, Domain};
use crate::renderer::camera::sample_hemisphere_pose;
use crate::renderer::image::Image;
use crate::renderer::{render_image, render_patch_set, RenderConfig};
use crate::{Error, Result};

/// PSNR is capped here so identical images report a finite score.
pub const PSNR_CAP: f32 = 100.0;

/// Default bit-accuracy threshold above which a signature counts as matched.
pub const MATCH_THRESHOLD: f32 = 0.9;

/// Default number of probe poses for the imperceptibility sweep.
pub const SWEEP_POSES: usize = 20;

/// Mean squared error over all channels of two same-shaped images.
pub fn mse(a: &Image, b: &Image) -> f32 {
    assert_eq!(
        (a.h, a.w),
        (b.h, b.w),
        "mse requires images of identical shape"
    );
    let mut acc = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    (acc / a.data.len() as f64) as f32
}

/// PSNR in decibels for a mean squared error measured on [0, 1] images.
pub fn psnr_from_mse(mse: f32) -> f32 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse as f64).log10() as f32).min(PSNR_CAP)
}

/// Peak signal-to-noise ratio between two images with channels in [0, 1].
pub fn psnr(a: &Image, b: &Image) -> f32 {
    psnr_from_mse(mse(a, b))
}

/// Rec. 601 luma of an RGB image.
pub fn to_gray(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-region convolution with a symmetric 1-D kernel applied
/// along both axes. Output is (h - 10) x (w - 10).
fn sep_filter(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &img[y * w..(y + 1) * w];
        let dst = &mut rows[y * ow..(y + 1) * ow];
        for (x, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[x + i];
            }
            *d = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Structural similarity between two RGB images with channels in [0, 1].
///
/// Both images are converted to Rec. 601 grayscale, local statistics are
/// taken under an 11x11 Gaussian window (sigma 1.5), and the mean local SSIM
/// over all fully covered windows is returned. Constants follow the standard
/// choice K1 = 0.01, K2 = 0.03 with dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> f32 {
    assert_eq!(
        (a.h, a.w),
        (b.h, b.w),
        "ssim requires images of identical shape"
    );
    assert!(
        a.h >= SSIM_WINDOW && a.w >= SSIM_WINDOW,
        "ssim requires images at least {SSIM_WINDOW} pixels on each side"
    );
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let (h, w) = (a.h, a.w);
    let ga = to_gray(a);
    let gb = to_gray(b);
    let k = gaussian_kernel();
    let mu_a = sep_filter(&ga, h, w, &k);
    let mu_b = sep_filter(&gb, h, w, &k);
    let sq = |v: &[f64]| v.iter().map(|&x| x * x).collect::<Vec<_>>();
    let aa = sep_filter(&sq(&ga), h, w, &k);
    let bb = sep_filter(&sq(&gb), h, w, &k);
    let ab_raw: Vec<f64> = ga.iter().zip(&gb).map(|(&x, &y)| x * y).collect();
    let ab = sep_filter(&ab_raw, h, w, &k);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += s;
    }
    (acc / mu_a.len() as f64) as f32
}

/// Render quality of a watermarked model relative to its original, measured
/// over a sweep of random camera poses.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct QualitySweep {
    pub seed: u64,
    pub psnr: Vec<f32>,
    pub ssim: Vec<f32>,
    pub psnr_mean: f32,
    pub psnr_min: f32,
    pub ssim_mean: f32,
    pub ssim_min: f32,
}

/// Render both models at `poses` random hemisphere poses of the given
/// resolution and collect per-pose PSNR and SSIM plus their mean and minimum.
pub fn quality_sweep(
    original: &RadianceField<f32>,
    marked: &RadianceField<f32>,
    h: u32,
    w: u32,
    poses: usize,
    seed: u64,
    rc: &RenderConfig,
) -> QualitySweep {
    assert!(poses >= 1, "quality sweep needs at least one pose");
    let mut r = rng(seed, Domain::Verify);
    let mut ps = Vec::with_capacity(poses);
    let mut ss = Vec::with_capacity(poses);
    for _ in 0..poses {
        let pose = sample_hemisphere_pose(&mut r, h, w);
        let a = render_image(original, &pose, rc);
        let b = render_image(marked, &pose, rc);
        ps.push(psnr(&a, &b));
        ss.push(ssim(&a, &b));
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    let min = |v: &[f32]| v.iter().copied().fold(f32::INFINITY, f32::min);
    QualitySweep {
        seed,
        psnr_mean: mean(&ps),
        psnr_min: min(&ps),
        ssim_mean: mean(&ss),
        ssim_min: min(&ss),
        psnr: ps,
        ssim: ss,
    }
}

/// Outcome of watermarking one field with a batch of signatures.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EmbedBatch {
    pub files: Vec<PathBuf>,
    /// Wall time of each embed itself, in milliseconds (file writes excluded).
    pub embed_ms: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Embed each signature into its own copy of the field and save the copies
/// under `out_dir` as `watermarked-NNN.nsig`. Duplicate signatures are
/// embedded anyway but flagged in the warnings list.
pub fn embed_batch(
    field: &RadianceField<f32>,
    cb: &SignatureCodebook,
    signatures: &[Signature],
    out_dir: &Path,
) -> Result<EmbedBatch> {
    for (i, m) in signatures.iter().enumerate() {
        if m.len() != cb.n_bits {
            return Err(Error::invalid(format!(
                "signature {i} has {} bits, the codebook holds {}",
                m.len(),
                cb.n_bits
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut out = EmbedBatch {
        files: Vec::with_capacity(signatures.len()),
        embed_ms: Vec::with_capacity(signatures.len()),
        warnings: Vec::new(),
    };
    for (i, m) in signatures.iter().enumerate() {
        if let Some(j) = signatures[..i].iter().position(|p| p == m) {
            out.warnings.push(format!(
                "signature {i} duplicates signature {j} ({})",
                m.to_bitstring()
            ));
        }
        let t0 = Instant::now();
        let marked = embed(field, cb, m);
        out.embed_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        let path = out_dir.join(format!("watermarked-{i:03}.nsig"));
        marked.save(&path)?;
        out.files.push(path);
    }
    Ok(out)
}

/// Render the keyed patches from a field and binarize the extractor output.
pub fn extract_signature(
    field: &RadianceField<f32>,
    key: &SecretKey,
    ext: &Extractor,
    rc: &RenderConfig,
) -> Result<Signature> {
    let patches = render_patch_set(field, &key.patch_spec(), rc)?;
    binarize(&ext.extract_logits(&patches))
}

/// Knobs for `verify_model` beyond the artifacts themselves.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct VerifyOptions {
    pub match_threshold: f32,
    pub sweep_poses: usize,
    pub sweep_seed: u64,
    pub samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            match_threshold: MATCH_THRESHOLD,
            sweep_poses: SWEEP_POSES,
            sweep_seed: 0,
            samples: crate::renderer::DEFAULT_SAMPLES,
        }
    }
}

/// Ownership decision for one model file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct VerificationReport {
    pub model: String,
    /// Extracted bits in patch order, as a 0/1 string.
    pub extracted: String,
    /// Bit accuracy of the extraction against each expected signature.
    pub accuracies: Vec<f32>,
    pub best_accuracy: f32,
    /// Index of the best expected signature, present iff its accuracy
    /// reached the match threshold.
    pub matched: Option<usize>,
    pub match_threshold: f32,
    /// Present when the original model was supplied for a quality sweep.
    pub quality: Option<QualitySweep>,
}

/// Check an in-memory field against a set of expected signatures.
///
/// Renders the keyed patches, extracts and binarizes, and scores the result
/// against every candidate signature; the best scorer is declared a match
/// when it clears the threshold. When the original field is supplied the
/// report also carries an imperceptibility sweep against it.
pub fn verify_field(
    field: &RadianceField<f32>,
    key: &SecretKey,
    ext: &Extractor,
    expected: &[Signature],
    original: Option<&RadianceField<f32>>,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    key.validate()?;
    for (i, m) in expected.iter().enumerate() {
        if m.len() != key.n_patches() {
            return Err(Error::invalid(format!(
                "expected signature {i} has {} bits but the key selects {} patches",
                m.len(),
                key.n_patches()
            )));
        }
    }
    let rc = RenderConfig {
        samples: opts.samples,
        ..RenderConfig::default()
    };
    let extracted = extract_signature(field, key, ext, &rc)?;
    let accuracies: Vec<f32> = expected
        .iter()
        .map(|m| bit_accuracy(&extracted, m))
        .collect();
    let mut matched = None;
    let mut best_accuracy = 0.0f32;
    for (i, &a) in accuracies.iter().enumerate() {
        if matched.is_none() || a > best_accuracy {
            matched = Some(i);
            best_accuracy = a;
        }
    }
    if best_accuracy < opts.match_threshold {
        matched = None;
    }
    let quality = original.map(|orig| {
        quality_sweep(
            orig,
            field,
            key.pose.h,
            key.pose.w,
            opts.sweep_poses,
            opts.sweep_seed,
            &rc,
        )
    });
    Ok(VerificationReport {
        model: String::new(),
        extracted: extracted.to_bitstring(),
        accuracies,
        best_accuracy,
        matched,
        match_threshold: opts.match_threshold,
        quality,
    })
}

/// Load a model file and check it against a set of expected signatures.
pub fn verify_model(
    path: &Path,
    key: &SecretKey,
    ext: &Extractor,
    expected: &[Signature],
    original: Option<&RadianceField<f32>>,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let field = RadianceField::load(path)?;
    let mut report = verify_field(&field, key, ext, expected, original, opts)?;
    report.model = path.display().to_string();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinusoid(h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + 0.35 * ((x as f32 * 0.7).sin() * (y as f32 * 0.5).cos());
                data.extend_from_slice(&[v, v, v]);
            }
        }
        Image::new(h, w, data)
    }

    #[test]
    fn psnr_hits_known_values() {
        let a = Image::fill(8, 8, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        let zero = Image::fill(8, 8, [0.0; 3]);
        let tenth = Image::fill(8, 8, [0.1; 3]);
        assert!((psnr(&zero, &tenth) - 20.0).abs() < 1e-4);
        let one = Image::fill(8, 8, [1.0; 3]);
        assert!(psnr(&zero, &one).abs() < 1e-6);
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = sinusoid(24, 24);
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_negated_texture_is_negative() {
        let a = sinusoid(24, 24);
        let b = Image::new(24, 24, a.data.iter().map(|&v| 1.0 - v).collect());
        assert!(ssim(&a, &b) < 0.0, "got {}", ssim(&a, &b));
    }

    #[test]
    fn ssim_constant_offset_matches_closed_form() {
        let a = Image::fill(16, 16, [0.4; 3]);
        let b = Image::fill(16, 16, [0.5; 3]);
        // Zero variance on both sides leaves only the luminance term:
        // (2*0.4*0.5 + C1) / (0.4^2 + 0.5^2 + C1).
        let expected = (2.0 * 0.4 * 0.5 + 1e-4) / (0.4f64.powi(2) + 0.5f64.powi(2) + 1e-4);
        assert!((ssim(&a, &b) as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = sinusoid(20, 28);
        let mut b = sinusoid(20, 28);
        for (i, v) in b.data.iter_mut().enumerate() {
            *v = (*v + (i % 7) as f32 * 0.01).min(1.0);
        }
        assert!((ssim(&a, &b) - ssim(&b, &a)).abs() < 1e-7);
    }

    use crate::caks::{select_key, KeyConfig};
    use crate::codebook::INIT_SCALE;
    use crate::field::FieldConfig;

    fn tiny_field(seed: u64) -> RadianceField<f32> {
        RadianceField::init_random(&FieldConfig::default(), &mut rng(seed, Domain::Pretrain))
    }

    fn tiny_codebook(field: &RadianceField<f32>, n_bits: usize) -> SignatureCodebook {
        let lvl = &field.levels[field.theta_e_index()];
        SignatureCodebook::init(
            n_bits,
            [lvl.res, lvl.res, lvl.res, lvl.feat],
            &mut rng(7, Domain::Codebook),
            INIT_SCALE,
        )
    }

    fn tiny_key(field: &RadianceField<f32>, n_bits: usize) -> SecretKey {
        let cfg = KeyConfig {
            n_bits,
            image_h: 48,
            image_w: 48,
            ..KeyConfig::default()
        };
        select_key(field, &cfg).unwrap().0
    }

    fn signatures(n: usize, n_bits: usize) -> Vec<Signature> {
        let mut r = rng(11, Domain::Signature);
        (0..n).map(|_| Signature::random(n_bits, &mut r)).collect()
    }

    #[test]
    fn embed_batch_marks_only_the_finest_grid() {
        let field = tiny_field(1);
        let cb = tiny_codebook(&field, 4);
        let sigs = signatures(3, 4);
        let dir = tempfile::tempdir().unwrap();
        let batch = embed_batch(&field, &cb, &sigs, dir.path()).unwrap();
        assert_eq!(batch.files.len(), 3);
        assert_eq!(batch.embed_ms.len(), 3);
        assert!(batch.warnings.is_empty());
        let marked: Vec<RadianceField<f32>> = batch
            .files
            .iter()
            .map(|p| RadianceField::load(p).unwrap())
            .collect();
        let fin = field.theta_e_index();
        for (i, m) in marked.iter().enumerate() {
            for j in 0..field.n_param_arrays() {
                if j == fin {
                    assert_ne!(m.param_array(j), field.param_array(j));
                } else {
                    assert_eq!(m.param_array(j), field.param_array(j));
                }
            }
            for other in &marked[..i] {
                assert_ne!(m.theta_e(), other.theta_e());
            }
        }
    }

    #[test]
    fn embed_batch_flags_duplicates_and_handles_empty_input() {
        let field = tiny_field(2);
        let cb = tiny_codebook(&field, 4);
        let dir = tempfile::tempdir().unwrap();
        let none = embed_batch(&field, &cb, &[], dir.path().join("none").as_path()).unwrap();
        assert!(none.files.is_empty() && none.warnings.is_empty());
        let m = signatures(2, 4);
        let dup = vec![m[0].clone(), m[1].clone(), m[0].clone()];
        let batch = embed_batch(&field, &cb, &dup, dir.path()).unwrap();
        assert_eq!(batch.files.len(), 3);
        assert_eq!(batch.warnings.len(), 1);
        assert!(batch.warnings[0].contains("signature 2 duplicates signature 0"));
        let bytes = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(bytes(&batch.files[0]), bytes(&batch.files[2]));
        assert_ne!(bytes(&batch.files[0]), bytes(&batch.files[1]));
    }

    #[test]
    fn reembedding_the_same_batch_is_byte_identical() {
        let field = tiny_field(3);
        let cb = tiny_codebook(&field, 4);
        let sigs = signatures(2, 4);
        let dir = tempfile::tempdir().unwrap();
        let a = embed_batch(&field, &cb, &sigs, dir.path().join("a").as_path()).unwrap();
        let b = embed_batch(&field, &cb, &sigs, dir.path().join("b").as_path()).unwrap();
        for (pa, pb) in a.files.iter().zip(&b.files) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
    }

    #[test]
    fn embed_batch_rejects_wrong_signature_length() {
        let field = tiny_field(4);
        let cb = tiny_codebook(&field, 4);
        let dir = tempfile::tempdir().unwrap();
        let bad = vec![Signature::new(vec![1, 0, 1]).unwrap()];
        let err = embed_batch(&field, &cb, &bad, dir.path()).unwrap_err();
        assert!(err.to_string().contains("3 bits"));
    }

    #[test]
    fn verify_field_scores_against_every_candidate() {
        let field = tiny_field(5);
        let key = tiny_key(&field, 4);
        let ext = Extractor::standard(&mut rng(5, Domain::ExtractorInit));
        let mut expected = signatures(3, 4);
        let opts = VerifyOptions {
            samples: 16,
            ..VerifyOptions::default()
        };
        let report = verify_field(&field, &key, &ext, &expected, None, &opts).unwrap();
        assert_eq!(report.extracted.len(), 4);
        assert_eq!(report.accuracies.len(), 3);
        let best = report
            .accuracies
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(report.best_accuracy, best);
        assert!(report.quality.is_none());

        // Planting the extracted bits as candidate 1 forces a perfect match
        // there; an impossible threshold suppresses the match decision.
        let bits: Vec<u8> = report.extracted.bytes().map(|b| b - b'0').collect();
        expected[1] = Signature::new(bits).unwrap();
        let report = verify_field(&field, &key, &ext, &expected, None, &opts).unwrap();
        assert_eq!(report.best_accuracy, 1.0);
        assert_eq!(report.matched, Some(1));
        let strict = VerifyOptions {
            match_threshold: 1.5,
            ..opts
        };
        let report = verify_field(&field, &key, &ext, &expected, None, &strict).unwrap();
        assert_eq!(report.matched, None);
        assert_eq!(report.best_accuracy, 1.0);
    }

    #[test]
    fn verify_model_reads_the_saved_file() {
        let field = tiny_field(6);
        let key = tiny_key(&field, 4);
        let ext = Extractor::standard(&mut rng(6, Domain::ExtractorInit));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nsig");
        field.save(&path).unwrap();
        let opts = VerifyOptions {
            samples: 16,
            ..VerifyOptions::default()
        };
        let expected = signatures(2, 4);
        let from_file = verify_model(&path, &key, &ext, &expected, None, &opts).unwrap();
        let in_memory = verify_field(&field, &key, &ext, &expected, None, &opts).unwrap();
        assert_eq!(from_file.model, path.display().to_string());
        assert_eq!(from_file.extracted, in_memory.extracted);
        assert_eq!(from_file.accuracies, in_memory.accuracies);
    }

    #[test]
    fn verify_field_rejects_structural_mismatches() {
        let field = tiny_field(7);
        let key = tiny_key(&field, 4);
        let ext = Extractor::standard(&mut rng(7, Domain::ExtractorInit));
        let opts = VerifyOptions::default();
        let short = vec![Signature::new(vec![1, 0]).unwrap()];
        let err = verify_field(&field, &key, &ext, &short, None, &opts).unwrap_err();
        assert!(err.to_string().contains("2 bits"));

        let mut broken = key.clone();
        broken.patch.centers[1] = broken.patch.centers[0];
        let expected = signatures(1, 4);
        assert!(verify_field(&field, &broken, &ext, &expected, None, &opts).is_err());
    }

    #[test]
    fn quality_sweep_of_identical_fields_hits_the_cap() {
        let field = tiny_field(8);
        let rc = RenderConfig {
            samples: 8,
            ..RenderConfig::default()
        };
        let sweep = quality_sweep(&field, &field, 24, 24, 2, 0, &rc);
        assert_eq!(sweep.psnr, vec![PSNR_CAP; 2]);
        assert_eq!(sweep.psnr_mean, PSNR_CAP);
        assert_eq!(sweep.psnr_min, PSNR_CAP);
        assert!(sweep.ssim.iter().all(|&s| (s - 1.0).abs() < 1e-6));
        let again = quality_sweep(&field, &field, 24, 24, 2, 0, &rc);
        assert_eq!(sweep.psnr, again.psnr);
        assert_eq!(sweep.ssim, again.ssim);
    }

    #[test]
    fn quality_sweep_attaches_to_the_report() {
        let field = tiny_field(9);
        let cb = tiny_codebook(&field, 4);
        let key = tiny_key(&field, 4);
        let ext = Extractor::standard(&mut rng(9, Domain::ExtractorInit));
        let m = signatures(1, 4);
        let marked = crate::codebook::embed(&field, &cb, &m[0]);
        let opts = VerifyOptions {
            samples: 8,
            sweep_poses: 2,
            ..VerifyOptions::default()
        };
        let report = verify_field(&marked, &key, &ext, &m, Some(&field), &opts).unwrap();
        let q = report.quality.expect("sweep requested");
        assert_eq!(q.psnr.len(), 2);
        // A fresh tiny-scale codebook perturbs renders only slightly.
        assert!(q.psnr_min > 30.0, "psnr {:?}", q.psnr);
        assert!(q.ssim_min > 0.8, "ssim {:?}", q.ssim);
    }
}
