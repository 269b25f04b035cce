//! Distortion layer: seeded image corruptions applied between rendering and
//! patch extraction during training, and used verbatim for robustness
//! evaluation.
//!
//! Every distortion is lowered to a short pipeline of primitive stages —
//! weighted gathers (resampling with white fill), a JPEG round trip over
//! stacked 8x8 blocks, constant shifts, precomputed noise rows, and clamps.
//! The pipeline can be built for an arbitrary subset of output pixels; the
//! builder walks the composition backwards to find exactly which source
//! pixels must be rendered, which keeps training cost proportional to the
//! keyed patches rather than the full frame. The same stage list drives both
//! the plain-image evaluator and the autodiff tape, so the two cannot drift.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::ops_render::{jpeg_forward, weighted_gather_forward, GatherPlan, JpegPlan};
use crate::numerics::real::Real;
use crate::numerics::rng::{hash01, rng, Domain};
use crate::numerics::tape::{Tape, Var};
use crate::renderer::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    None,
    Rotation,
    Cropping,
    Scaling,
    Jpeg,
    Blurring,
    Noise,
    Brightness,
    Combined,
}

/// The seven elementary corruptions `Combined` draws from.
pub const BASE_KINDS: [DistortionKind; 7] = [
    DistortionKind::Rotation,
    DistortionKind::Cropping,
    DistortionKind::Scaling,
    DistortionKind::Jpeg,
    DistortionKind::Blurring,
    DistortionKind::Noise,
    DistortionKind::Brightness,
];

/// Everything `sample_spec` can draw.
pub const ALL_KINDS: [DistortionKind; 9] = [
    DistortionKind::None,
    DistortionKind::Rotation,
    DistortionKind::Cropping,
    DistortionKind::Scaling,
    DistortionKind::Jpeg,
    DistortionKind::Blurring,
    DistortionKind::Noise,
    DistortionKind::Brightness,
    DistortionKind::Combined,
];

/// Parameter ranges for each corruption; all overridable.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DistortionRanges {
    /// Rotation angle in degrees, symmetric.
    pub rotation_deg: (f32, f32),
    /// Linear keep-ratio of the cropping window per axis.
    pub crop_keep: (f32, f32),
    /// Uniform scale factor about the image center.
    pub scale: (f32, f32),
    /// JPEG quality (libjpeg convention), inclusive.
    pub jpeg_quality: (u32, u32),
    /// Gaussian blur sigma in pixels (5x5 kernel).
    pub blur_sigma: (f32, f32),
    /// Additive Gaussian noise sigma.
    pub noise_sigma: (f32, f32),
    /// Additive brightness offset, symmetric.
    pub brightness: (f32, f32),
}

impl Default for DistortionRanges {
    fn default() -> Self {
        DistortionRanges {
            rotation_deg: (-15.0, 15.0),
            crop_keep: (0.7, 1.0),
            scale: (0.75, 1.25),
            jpeg_quality: (50, 95),
            blur_sigma: (0.5, 1.5),
            noise_sigma: (0.01, 0.06),
            brightness: (-0.15, 0.15),
        }
    }
}

/// A corruption to apply: the kind plus the seed that fixes its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub seed: u64,
}

/// Draw a training-time spec: kind uniform over none, the seven elementary
/// corruptions, and combined.
pub fn sample_spec(r: &mut ChaCha8Rng) -> DistortionSpec {
    DistortionSpec {
        kind: ALL_KINDS[r.gen_range(0..ALL_KINDS.len())],
        seed: r.gen(),
    }
}

/// One corruption with concrete sampled parameters.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResolvedOp {
    Rotation { degrees: f64 },
    Cropping { x0: u32, y0: u32, keep_w: u32, keep_h: u32 },
    Scaling { factor: f64 },
    Jpeg { quality: u32 },
    Blurring { sigma: f64 },
    Noise { sigma: f32, field_seed: u64 },
    Brightness { offset: f32 },
}

/// A fully sampled distortion: the op sequence and the canvas it acts on.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedDistortion {
    pub h: u32,
    pub w: u32,
    pub ops: Vec<ResolvedOp>,
}

fn resolve_one(
    kind: DistortionKind,
    r: &mut ChaCha8Rng,
    ranges: &DistortionRanges,
    h: u32,
    w: u32,
) -> ResolvedOp {
    match kind {
        DistortionKind::Rotation => ResolvedOp::Rotation {
            degrees: r.gen_range(ranges.rotation_deg.0..ranges.rotation_deg.1) as f64,
        },
        DistortionKind::Cropping => {
            let keep = r.gen_range(ranges.crop_keep.0..ranges.crop_keep.1);
            let keep_w = ((w as f32 * keep).round() as u32).clamp(1, w);
            let keep_h = ((h as f32 * keep).round() as u32).clamp(1, h);
            ResolvedOp::Cropping {
                x0: r.gen_range(0..=w - keep_w),
                y0: r.gen_range(0..=h - keep_h),
                keep_w,
                keep_h,
            }
        }
        DistortionKind::Scaling => ResolvedOp::Scaling {
            factor: r.gen_range(ranges.scale.0..ranges.scale.1) as f64,
        },
        DistortionKind::Jpeg => ResolvedOp::Jpeg {
            quality: r.gen_range(ranges.jpeg_quality.0..=ranges.jpeg_quality.1),
        },
        DistortionKind::Blurring => ResolvedOp::Blurring {
            sigma: r.gen_range(ranges.blur_sigma.0..ranges.blur_sigma.1) as f64,
        },
        DistortionKind::Noise => ResolvedOp::Noise {
            sigma: r.gen_range(ranges.noise_sigma.0..ranges.noise_sigma.1),
            field_seed: r.gen(),
        },
        DistortionKind::Brightness => ResolvedOp::Brightness {
            offset: r.gen_range(ranges.brightness.0..ranges.brightness.1),
        },
        DistortionKind::None | DistortionKind::Combined => {
            unreachable!("composite kinds are expanded by resolve")
        }
    }
}

/// Sample concrete parameters for a spec on an h x w canvas.
pub fn resolve(
    spec: &DistortionSpec,
    ranges: &DistortionRanges,
    h: u32,
    w: u32,
) -> ResolvedDistortion {
    let mut r = rng(spec.seed, Domain::Distortion);
    let mut ops = Vec::new();
    match spec.kind {
        DistortionKind::None => {}
        DistortionKind::Combined => {
            let n = r.gen_range(2..=4usize);
            let mut pool = BASE_KINDS.to_vec();
            for _ in 0..n {
                let at = r.gen_range(0..pool.len());
                let kind = pool.swap_remove(at);
                ops.push(resolve_one(kind, &mut r, ranges, h, w));
            }
        }
        kind => ops.push(resolve_one(kind, &mut r, ranges, h, w)),
    }
    ResolvedDistortion { h, w, ops }
}

fn center(h: u32, w: u32) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

impl ResolvedOp {
    /// Where a source-image point lands on the distorted canvas.
    fn map_point(&self, p: (f64, f64), h: u32, w: u32) -> (f64, f64) {
        let c = center(h, w);
        match *self {
            ResolvedOp::Rotation { degrees } => {
                let a = degrees.to_radians();
                let (dx, dy) = (p.0 - c.0, p.1 - c.1);
                (
                    c.0 + a.cos() * dx - a.sin() * dy,
                    c.1 + a.sin() * dx + a.cos() * dy,
                )
            }
            ResolvedOp::Scaling { factor } => {
                (c.0 + factor * (p.0 - c.0), c.1 + factor * (p.1 - c.1))
            }
            _ => p,
        }
    }
}

impl ResolvedDistortion {
    /// Forward coordinate map of the whole composition.
    pub fn map_point(&self, p: (f64, f64)) -> (f64, f64) {
        self.ops
            .iter()
            .fold(p, |q, op| op.map_point(q, self.h, self.w))
    }

    pub fn is_geometric(&self) -> bool {
        self.ops.iter().any(|op| {
            matches!(
                op,
                ResolvedOp::Rotation { .. } | ResolvedOp::Scaling { .. }
            )
        })
    }

    /// Top-left corner of the axis-aligned patch window that tracks a keyed
    /// center through the geometric part of the distortion, clamped so the
    /// window stays inside the canvas.
    pub fn displaced_patch_origin(&self, cx: u32, cy: u32, ph: u32, pw: u32) -> (u32, u32) {
        let (mx, my) = self.map_point((cx as f64, cy as f64));
        let ox = (mx.round() as i64 - (pw / 2) as i64).clamp(0, (self.w - pw) as i64);
        let oy = (my.round() as i64 - (ph / 2) as i64).clamp(0, (self.h - ph) as i64);
        (ox as u32, oy as u32)
    }
}

/// A primitive step of a lowered distortion.
pub enum Stage<F: Real> {
    Gather(Arc<GatherPlan<F>>),
    Jpeg(Arc<JpegPlan>),
    Shift(F),
    AddRows(Arc<Vec<F>>),
    Clamp01,
}

/// A distortion lowered over an explicit pixel set. `source_pixels` are the
/// source-image pixels that must be provided, in row order; the stages then
/// produce the requested output pixels, in the requested order.
pub struct DistortionPlan<F: Real> {
    pub source_pixels: Vec<(u32, u32)>,
    pub stages: Vec<Stage<F>>,
    pub out_rows: usize,
}

/// Per-output-row taps of a resampling op: (source pixel, weight) pairs plus
/// the white-fill weight for anything sampled outside the canvas.
struct Taps {
    rows: Vec<(Vec<((u32, u32), f64)>, f64)>,
}

fn bilinear_taps(src: (f64, f64), h: u32, w: u32) -> (Vec<((u32, u32), f64)>, f64) {
    let (x0, y0) = (src.0.floor(), src.1.floor());
    let (fx, fy) = (src.0 - x0, src.1 - y0);
    let mut taps = Vec::with_capacity(4);
    let mut white = 0.0;
    for (dx, dy, wgt) in [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
        (1.0, 0.0, fx * (1.0 - fy)),
        (0.0, 1.0, (1.0 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ] {
        if wgt == 0.0 {
            continue;
        }
        let (x, y) = (x0 + dx, y0 + dy);
        if x >= 0.0 && y >= 0.0 && (x as u32) < w && (y as u32) < h {
            taps.push(((x as u32, y as u32), wgt));
        } else {
            white += wgt;
        }
    }
    (taps, white)
}

impl ResolvedOp {
    /// Source taps needed for each requested output pixel.
    fn taps(&self, out: &[(u32, u32)], h: u32, w: u32) -> Option<Taps> {
        let c = center(h, w);
        let rows = match *self {
            ResolvedOp::Rotation { degrees } => {
                let a = -degrees.to_radians();
                out.iter()
                    .map(|&(u, v)| {
                        let (dx, dy) = (u as f64 - c.0, v as f64 - c.1);
                        let src = (
                            c.0 + a.cos() * dx - a.sin() * dy,
                            c.1 + a.sin() * dx + a.cos() * dy,
                        );
                        bilinear_taps(src, h, w)
                    })
                    .collect()
            }
            ResolvedOp::Scaling { factor } => out
                .iter()
                .map(|&(u, v)| {
                    let src = (
                        c.0 + (u as f64 - c.0) / factor,
                        c.1 + (v as f64 - c.1) / factor,
                    );
                    bilinear_taps(src, h, w)
                })
                .collect(),
            ResolvedOp::Cropping {
                x0,
                y0,
                keep_w,
                keep_h,
            } => out
                .iter()
                .map(|&(u, v)| {
                    if u >= x0 && u < x0 + keep_w && v >= y0 && v < y0 + keep_h {
                        (vec![((u, v), 1.0)], 0.0)
                    } else {
                        (Vec::new(), 1.0)
                    }
                })
                .collect(),
            ResolvedOp::Blurring { sigma } => {
                let mut k = [0.0f64; 5];
                for (i, v) in k.iter_mut().enumerate() {
                    let d = i as f64 - 2.0;
                    *v = (-d * d / (2.0 * sigma * sigma)).exp();
                }
                let s: f64 = k.iter().sum();
                for v in &mut k {
                    *v /= s;
                }
                out.iter()
                    .map(|&(u, v)| {
                        let mut acc: HashMap<(u32, u32), f64> = HashMap::new();
                        for dy in 0..5i64 {
                            for dx in 0..5i64 {
                                let x = (u as i64 + dx - 2).clamp(0, w as i64 - 1) as u32;
                                let y = (v as i64 + dy - 2).clamp(0, h as i64 - 1) as u32;
                                *acc.entry((x, y)).or_insert(0.0) +=
                                    k[dx as usize] * k[dy as usize];
                            }
                        }
                        let mut taps: Vec<_> = acc.into_iter().collect();
                        taps.sort_unstable_by_key(|&((x, y), _)| (y, x));
                        (taps, 0.0)
                    })
                    .collect()
            }
            _ => return None,
        };
        Some(Taps { rows })
    }

    /// Which source pixels this op needs to produce the given output pixels.
    fn needed_inputs(&self, out: &[(u32, u32)], h: u32, w: u32) -> Vec<(u32, u32)> {
        match self {
            ResolvedOp::Jpeg { .. } => {
                let mut blocks: Vec<(u32, u32)> =
                    out.iter().map(|&(x, y)| (x / 8, y / 8)).collect();
                blocks.sort_unstable_by_key(|&(bx, by)| (by, bx));
                blocks.dedup();
                let mut px = Vec::with_capacity(blocks.len() * 64);
                for (bx, by) in blocks {
                    for dy in 0..8 {
                        for dx in 0..8 {
                            px.push((bx * 8 + dx, by * 8 + dy));
                        }
                    }
                }
                px
            }
            ResolvedOp::Noise { .. } | ResolvedOp::Brightness { .. } => out.to_vec(),
            _ => {
                let taps = self.taps(out, h, w).expect("resampling op");
                let mut px: Vec<(u32, u32)> = taps
                    .rows
                    .iter()
                    .flat_map(|(t, _)| t.iter().map(|&(p, _)| p))
                    .collect();
                px.sort_unstable_by_key(|&(x, y)| (y, x));
                px.dedup();
                px
            }
        }
    }
}

fn index_of(pixels: &[(u32, u32)]) -> HashMap<(u32, u32), u32> {
    pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i as u32))
        .collect()
}

fn gather_from_taps<F: Real>(taps: &Taps, input: &[(u32, u32)]) -> GatherPlan<F> {
    let map = index_of(input);
    let mut plan_taps = Vec::new();
    let mut offsets = Vec::with_capacity(taps.rows.len() + 1);
    let mut bias = Vec::with_capacity(taps.rows.len());
    let mut any_bias = false;
    offsets.push(0u32);
    for (row, &white) in taps.rows.iter().map(|(t, b)| (t, b)) {
        for &(p, wgt) in row {
            plan_taps.push((map[&p], F::from_f64(wgt)));
        }
        offsets.push(plan_taps.len() as u32);
        bias.push(F::from_f64(white));
        any_bias |= white != 0.0;
    }
    GatherPlan {
        taps: plan_taps,
        offsets,
        bias: if any_bias { Some(bias) } else { None },
        in_rows: input.len(),
    }
}

/// One-tap gather selecting `out` rows from `input` rows.
fn selection_gather<F: Real>(input: &[(u32, u32)], out: &[(u32, u32)]) -> GatherPlan<F> {
    let map = index_of(input);
    let taps: Vec<(u32, F)> = out.iter().map(|p| (map[p], F::ONE)).collect();
    GatherPlan {
        offsets: (0..=taps.len() as u32).collect(),
        taps,
        bias: None,
        in_rows: input.len(),
    }
}

/// Gaussian noise value for one pixel channel, derived from a hash so the
/// field is identical regardless of which pixel subset is materialized.
fn noise_value(field_seed: u64, x: u32, y: u32, ch: u32) -> f32 {
    let u1 = hash01(field_seed, x as u64, y as u64, (2 * ch) as u64);
    let u2 = hash01(field_seed, x as u64, y as u64, (2 * ch + 1) as u64);
    let r = (-2.0 * (1.0 - u1 as f64).ln()).sqrt();
    (r * (std::f64::consts::TAU * u2 as f64).cos()) as f32
}

/// Lower a resolved distortion over an explicit set of output pixels.
pub fn plan_for_pixels<F: Real>(
    rd: &ResolvedDistortion,
    out_pixels: &[(u32, u32)],
) -> DistortionPlan<F> {
    let (h, w) = (rd.h, rd.w);
    // Backwards: what does each op need from its input image?
    let mut boundaries: Vec<Vec<(u32, u32)>> = vec![out_pixels.to_vec()];
    for op in rd.ops.iter().rev() {
        let needed = op.needed_inputs(boundaries.last().unwrap(), h, w);
        boundaries.push(needed);
    }
    boundaries.reverse();
    let source_pixels = boundaries[0].clone();

    // Forwards: build stages. `live` tracks the pixel list actually
    // materialized (JPEG computes whole blocks, a superset of what later
    // stages need, so a final selection restores the requested order).
    let mut stages: Vec<Stage<F>> = Vec::new();
    let mut live: Vec<(u32, u32)> = source_pixels.clone();
    for (op, required_out) in rd.ops.iter().zip(boundaries.iter().skip(1)) {
        match op {
            ResolvedOp::Jpeg { quality } => {
                let blocks = op.needed_inputs(required_out, h, w);
                if live != blocks {
                    stages.push(Stage::Gather(Arc::new(selection_gather(&live, &blocks))));
                    live = blocks;
                }
                stages.push(Stage::Jpeg(Arc::new(JpegPlan::new(live.len() / 8, 8, *quality))));
                stages.push(Stage::Clamp01);
            }
            ResolvedOp::Noise { sigma, field_seed } => {
                let mut vals = Vec::with_capacity(live.len() * 3);
                for &(x, y) in &live {
                    for ch in 0..3 {
                        vals.push(F::from_f32(sigma * noise_value(*field_seed, x, y, ch)));
                    }
                }
                stages.push(Stage::AddRows(Arc::new(vals)));
                stages.push(Stage::Clamp01);
            }
            ResolvedOp::Brightness { offset } => {
                stages.push(Stage::Shift(F::from_f32(*offset)));
                stages.push(Stage::Clamp01);
            }
            _ => {
                let taps = op.taps(required_out, h, w).expect("resampling op");
                stages.push(Stage::Gather(Arc::new(gather_from_taps(&taps, &live))));
                live = required_out.clone();
            }
        }
    }
    if live != out_pixels {
        stages.push(Stage::Gather(Arc::new(selection_gather(&live, out_pixels))));
    }
    DistortionPlan {
        source_pixels,
        stages,
        out_rows: out_pixels.len(),
    }
}

/// Evaluate a plan on plain RGB rows (source pixel order must match
/// `plan.source_pixels`).
pub fn eval_plan<F: Real>(plan: &DistortionPlan<F>, input: Vec<F>) -> Vec<F> {
    assert_eq!(input.len(), plan.source_pixels.len() * 3);
    let mut data = input;
    for stage in &plan.stages {
        match stage {
            Stage::Gather(g) => data = weighted_gather_forward(&data, 3, g),
            Stage::Jpeg(j) => data = jpeg_forward(&data, j),
            Stage::Shift(c) => {
                for v in &mut data {
                    *v = *v + *c;
                }
            }
            Stage::AddRows(n) => {
                for (v, &a) in data.iter_mut().zip(n.iter()) {
                    *v = *v + a;
                }
            }
            Stage::Clamp01 => {
                for v in &mut data {
                    *v = (*v).clamp(F::ZERO, F::ONE);
                }
            }
        }
    }
    assert_eq!(data.len(), plan.out_rows * 3);
    data
}

/// Apply a plan's stages to a tape node holding the source rows.
pub fn apply_on_tape<F: Real>(t: &mut Tape<F>, x: Var, plan: &DistortionPlan<F>) -> Var {
    let mut v = x;
    for stage in &plan.stages {
        v = match stage {
            Stage::Gather(g) => t.weighted_gather_rows(v, g.clone()),
            Stage::Jpeg(j) => t.jpeg_ste(v, j.clone()),
            Stage::Shift(c) => t.affine(v, F::ONE, *c),
            Stage::AddRows(n) => {
                let rows = n.len() / 3;
                let c = t.constant(n.clone(), rows, 3);
                t.add(v, c)
            }
            Stage::Clamp01 => t.clamp01(v),
        };
    }
    v
}

fn all_pixels(h: u32, w: u32) -> Vec<(u32, u32)> {
    (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect()
}

/// Apply a resolved distortion to a full image.
pub fn apply(img: &Image, rd: &ResolvedDistortion) -> Image {
    assert_eq!(
        (img.h as u32, img.w as u32),
        (rd.h, rd.w),
        "distortion was resolved for a different canvas"
    );
    let out = all_pixels(rd.h, rd.w);
    let plan = plan_for_pixels::<f32>(rd, &out);
    let mut input = Vec::with_capacity(plan.source_pixels.len() * 3);
    for &(x, y) in &plan.source_pixels {
        input.extend_from_slice(&img.pixel(x as usize, y as usize));
    }
    Image::new(img.h, img.w, eval_plan(&plan, input))
}

/// Sample parameters for a spec and apply it; returns the distorted image
/// and the resolved parameters (whose coordinate map locates displaced
/// patches for geometric kinds).
pub fn apply_spec(
    img: &Image,
    spec: &DistortionSpec,
    ranges: &DistortionRanges,
) -> (Image, ResolvedDistortion) {
    let rd = resolve(spec, ranges, img.h as u32, img.w as u32);
    (apply(img, &rd), rd)
}
