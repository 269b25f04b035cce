//! Joint pose-patch key construction. A secret key is a camera pose plus an
//! ordered set of patch centers. Candidate patches come from evenly
//! partitioning a rendered frame into a center lattice, then filtering twice:
//! first dropping background-like patches, then keeping only the most
//! visually complex ones (measured as DEFLATE compressibility), and finally
//! sampling the keyed patches at random from the survivors.

use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::FORMAT_VERSION;
use crate::field::RadianceField;
use crate::numerics::rng::{rng, Domain};
use crate::renderer::camera::{sample_hemisphere_pose, CameraPose, IMAGE_SIZE};
use crate::renderer::image::Image;
use crate::renderer::{render_image, PatchSpec, RenderConfig};
use crate::{Error, Result};

/// Default mean-grayscale threshold above which a patch counts as background.
pub const BACKGROUND_GRAY_DELTA: f32 = 0.9;

/// How the first candidate filter decides which patches to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Discard patches whose mean grayscale is at or above the threshold
    /// (default 0.9) — removes background-dominated patches.
    BackgroundGray { delta: f32 },
    /// Keep patches whose color variation is strictly below the threshold,
    /// matching the printed form of the variation rule.
    VariationBelow { delta: f32 },
}

impl Default for FilterMode {
    fn default() -> Self {
        FilterMode::BackgroundGray {
            delta: BACKGROUND_GRAY_DELTA,
        }
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background-gray" => Ok(FilterMode::default()),
            "variation-below" => Ok(FilterMode::VariationBelow {
                delta: BACKGROUND_GRAY_DELTA,
            }),
            other => Err(Error::invalid(format!(
                "unknown filter mode {other:?}; expected background-gray or variation-below"
            ))),
        }
    }
}

/// Patch centers of an evenly partitioned H x W image, in lattice (row-major)
/// order: x_i = i*w + w/2 across, y_j = j*h + h/2 down, with residual rows and
/// columns dropped.
pub fn partition(img_h: u32, img_w: u32, patch_h: u32, patch_w: u32) -> Vec<(u32, u32)> {
    assert!(
        patch_h >= 1 && patch_w >= 1 && patch_h <= img_h && patch_w <= img_w,
        "patch {patch_h}x{patch_w} does not fit a {img_h}x{img_w} image"
    );
    let n_rows = img_h / patch_h;
    let n_cols = img_w / patch_w;
    let mut centers = Vec::with_capacity((n_rows * n_cols) as usize);
    for j in 0..n_rows {
        for i in 0..n_cols {
            centers.push((i * patch_w + patch_w / 2, j * patch_h + patch_h / 2));
        }
    }
    centers
}

/// Color variation: mean over channels of the per-channel pixel variance.
pub fn color_variation(patch: &Image) -> f32 {
    let n = (patch.h * patch.w) as f64;
    let mut y = 0.0f64;
    for ch in 0..3 {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for p in patch.data.chunks_exact(3) {
            let v = p[ch] as f64;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n;
        y += sq / n - mean * mean;
    }
    (y / 3.0) as f32
}

/// Mean Rec. 601 grayscale of a patch.
pub fn mean_gray(patch: &Image) -> f32 {
    let g = crate::verify::to_gray(patch);
    (g.iter().sum::<f64>() / g.len() as f64) as f32
}

/// Visual complexity: DEFLATE (level 6) output length of the 8-bit RGB bytes
/// divided by the raw byte length. Flat patches compress far below 1; noisy
/// patches sit near or slightly above 1.
pub fn visual_complexity(patch: &Image) -> f32 {
    let raw = patch.to_rgb8();
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(6));
    enc.write_all(&raw).expect("in-memory deflate cannot fail");
    let compressed = enc.finish().expect("in-memory deflate cannot fail");
    compressed.len() as f32 / raw.len() as f32
}

/// One scored candidate patch.
#[derive(Clone, Debug)]
pub struct Candidate {
    /// Position in the partition lattice (row-major index).
    pub index: usize,
    pub center: (u32, u32),
    pub patch: Image,
    pub variation: f32,
    pub gray: f32,
    pub complexity: f32,
}

impl Candidate {
    fn new(index: usize, center: (u32, u32), patch: Image) -> Self {
        let variation = color_variation(&patch);
        let gray = mean_gray(&patch);
        let complexity = visual_complexity(&patch);
        Candidate {
            index,
            center,
            patch,
            variation,
            gray,
            complexity,
        }
    }
}

/// The three filtering stages: all lattice patches, the variation-filtered
/// subset, and the complexity-filtered subset (each a subset of the last).
#[derive(Clone, Debug)]
pub struct PatchCandidates {
    pub p0: Vec<Candidate>,
    pub p1: Vec<Candidate>,
    pub p2: Vec<Candidate>,
    /// Complexity of the last patch admitted into `p2`.
    pub complexity_threshold: f32,
}

/// First filter stage.
pub fn filter_variation(p0: &[Candidate], mode: FilterMode) -> Vec<Candidate> {
    p0.iter()
        .filter(|c| match mode {
            FilterMode::BackgroundGray { delta } => c.gray < delta,
            FilterMode::VariationBelow { delta } => c.variation < delta,
        })
        .cloned()
        .collect()
}

/// Second filter stage: keep the ceil(1.5*n_bits) most complex candidates,
/// breaking complexity ties by lattice order. The result stays in lattice
/// order. Fails when too few candidates survive the first stage.
pub fn filter_complexity(p1: &[Candidate], n_bits: usize) -> Result<(Vec<Candidate>, f32)> {
    let need = (3 * n_bits).div_ceil(2);
    if p1.len() < need {
        return Err(Error::invalid(format!(
            "key selection failed: {} candidates survive the variation filter, \
             but the complexity stage needs {need}",
            p1.len()
        )));
    }
    let mut order: Vec<usize> = (0..p1.len()).collect();
    order.sort_by(|&a, &b| {
        p1[b].complexity
            .partial_cmp(&p1[a].complexity)
            .expect("complexity is finite")
            .then(p1[a].index.cmp(&p1[b].index))
    });
    let threshold = p1[order[need - 1]].complexity;
    let mut keep: Vec<usize> = order[..need].to_vec();
    keep.sort_unstable();
    Ok((keep.into_iter().map(|i| p1[i].clone()).collect(), threshold))
}

/// Run the full candidate pipeline for one pose: render the frame, partition
/// it, and apply both filters.
pub fn candidates(
    field: &RadianceField<f32>,
    pose: &CameraPose,
    patch_h: u32,
    patch_w: u32,
    mode: FilterMode,
    n_bits: usize,
) -> Result<PatchCandidates> {
    let frame = render_image(field, pose, &RenderConfig::default());
    let centers = partition(pose.h, pose.w, patch_h, patch_w);
    let p0: Vec<Candidate> = centers
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let patch = frame.crop(
                (c.0 - patch_w / 2) as usize,
                (c.1 - patch_h / 2) as usize,
                patch_w as usize,
                patch_h as usize,
            );
            Candidate::new(i, c, patch)
        })
        .collect();
    let p1 = filter_variation(&p0, mode);
    let (p2, complexity_threshold) = filter_complexity(&p1, n_bits)?;
    Ok(PatchCandidates {
        p0,
        p1,
        p2,
        complexity_threshold,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PatchKey {
    pub h: u32,
    pub w: u32,
    /// Ordered (x, y) centers; order is part of the key.
    pub centers: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct KeyProvenance {
    #[serde(rename = "pose-seed")]
    pub pose_seed: u64,
    #[serde(rename = "selection-seed")]
    pub selection_seed: u64,
}

/// The shared secret: one camera pose plus the ordered patch centers.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SecretKey {
    pub version: u16,
    pub pose: CameraPose,
    pub patch: PatchKey,
    #[serde(rename = "created-from")]
    pub created_from: KeyProvenance,
}

impl SecretKey {
    /// Check every structural invariant without rendering anything: pose
    /// orthonormality, lattice alignment, bounds, and center distinctness.
    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        let (ph, pw) = (self.patch.h, self.patch.w);
        if ph < 1 || pw < 1 || ph > self.pose.h || pw > self.pose.w {
            return Err(Error::invalid(format!(
                "patch size {pw}x{ph} does not fit a {}x{} image",
                self.pose.w, self.pose.h
            )));
        }
        if self.patch.centers.is_empty() {
            return Err(Error::invalid("key holds no patch centers"));
        }
        let mut seen = std::collections::HashSet::new();
        for &(cx, cy) in &self.patch.centers {
            if cx < pw / 2 || cy < ph / 2 {
                return Err(Error::invalid(format!(
                    "center ({cx}, {cy}) is not on the partition lattice"
                )));
            }
            if (cx - pw / 2) % pw != 0 || (cy - ph / 2) % ph != 0 {
                return Err(Error::invalid(format!(
                    "center ({cx}, {cy}) is not on the partition lattice"
                )));
            }
            if cx - pw / 2 + pw > self.pose.w || cy - ph / 2 + ph > self.pose.h {
                return Err(Error::invalid(format!(
                    "patch at center ({cx}, {cy}) leaves the image"
                )));
            }
            if !seen.insert((cx, cy)) {
                return Err(Error::invalid(format!(
                    "duplicate patch center ({cx}, {cy})"
                )));
            }
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.patch.centers.len()
    }

    /// Renderer-facing view of the key: pose plus patch origins.
    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            pose: self.pose.clone(),
            origins: self
                .patch
                .centers
                .iter()
                .map(|&(cx, cy)| (cx - self.patch.w / 2, cy - self.patch.h / 2))
                .collect(),
            ph: self.patch.h as usize,
            pw: self.patch.w as usize,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::invalid(format!("key serialization: {e}")))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let key: SecretKey = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format_in(path.display().to_string(), e.to_string()))?;
        key.validate()
            .map_err(|e| Error::format_in(path.display().to_string(), e.to_string()))?;
        Ok(key)
    }
}

/// Everything `select_key` needs besides the field.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct KeyConfig {
    pub n_bits: usize,
    pub patch_h: u32,
    pub patch_w: u32,
    pub image_h: u32,
    pub image_w: u32,
    pub mode: FilterMode,
    pub pose_seed: u64,
    pub selection_seed: u64,
}

impl Default for KeyConfig {
    fn default() -> Self {
        KeyConfig {
            n_bits: 16,
            patch_h: 8,
            patch_w: 8,
            image_h: IMAGE_SIZE,
            image_w: IMAGE_SIZE,
            mode: FilterMode::default(),
            pose_seed: 0,
            selection_seed: 0,
        }
    }
}

/// Build a secret key: draw a pose from the training-pose distribution, run
/// the candidate pipeline, and sample the keyed patches uniformly without
/// replacement from the final stage (the sampled order is part of the key).
pub fn select_key(
    field: &RadianceField<f32>,
    cfg: &KeyConfig,
) -> Result<(SecretKey, PatchCandidates)> {
    let mut pose_rng = rng(cfg.pose_seed, Domain::KeyPose);
    let pose = sample_hemisphere_pose(&mut pose_rng, cfg.image_h, cfg.image_w);
    let cands = candidates(field, &pose, cfg.patch_h, cfg.patch_w, cfg.mode, cfg.n_bits)?;
    let mut pick_rng = rng(cfg.selection_seed, Domain::KeySelect);
    let mut pool: Vec<usize> = (0..cands.p2.len()).collect();
    let mut centers = Vec::with_capacity(cfg.n_bits);
    for _ in 0..cfg.n_bits {
        let at = pick_rng.gen_range(0..pool.len());
        centers.push(cands.p2[pool.swap_remove(at)].center);
    }
    let key = SecretKey {
        version: FORMAT_VERSION,
        pose,
        patch: PatchKey {
            h: cfg.patch_h,
            w: cfg.patch_w,
            centers,
        },
        created_from: KeyProvenance {
            pose_seed: cfg.pose_seed,
            selection_seed: cfg.selection_seed,
        },
    };
    key.validate()?;
    Ok((key, cands))
}
