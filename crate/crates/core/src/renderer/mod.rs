//! Ray generation and differentiable volumetric rendering.
//!
//! Rendering follows the discrete quadrature
//! `C = Σ_i T_i · α_i · c_i + T_end · background` with `α_i = 1 − exp(−σ_i δ)`
//! and `T_i = exp(−Σ_{j<i} σ_j δ)`, using `S` stratified samples per ray on a
//! constant bin width `δ = (t_f − t_n)/S`. Per-sample jitter is a pure
//! function of the pixel coordinates and sample index, never of call order,
//! so a patch rendered on its own is bit-identical to the same region of a
//! full-frame render.

pub mod camera;
pub mod image;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::numerics::ops_render::{tri_plan, TriPlan};
use crate::numerics::real::Real;
use crate::numerics::rng::hash01;
use crate::numerics::tape::{Act, Tape, Var};
use camera::CameraPose;
use image::Image;

/// Fixed seed for per-pixel sample jitter. Part of the rendering definition:
/// changing it changes every rendered image.
pub const RENDER_JITTER_SEED: u64 = 0x6e5f_3d1a_9b42_c708;

/// Default stratified sample count per ray.
pub const DEFAULT_SAMPLES: usize = 64;

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: [f32; 3],
    pub dir: [f32; 3],
    /// Pixel coordinates that identify this ray's jitter stream.
    pub px: u32,
    pub py: u32,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderConfig {
    pub samples: usize,
    pub background: [f32; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: DEFAULT_SAMPLES,
            background: [1.0; 3],
        }
    }
}

/// Stratified sample distances for one ray: bin `k` gets
/// `t_n + (k + jitter(px, py, k)) · δ`.
pub fn sample_ts(px: u32, py: u32, t_n: f32, t_f: f32, samples: usize) -> Vec<f32> {
    let delta = (t_f - t_n) / samples as f32;
    (0..samples)
        .map(|k| {
            let j = hash01(RENDER_JITTER_SEED, px as u64, py as u64, k as u64);
            t_n + (k as f32 + j) * delta
        })
        .collect()
}

/// All pixel rays of a pose, row-major (matching `Image` layout).
pub fn pixel_rays(pose: &CameraPose) -> Vec<Ray> {
    let mut rays = Vec::with_capacity((pose.h * pose.w) as usize);
    for py in 0..pose.h {
        for px in 0..pose.w {
            rays.push(make_ray(pose, px, py));
        }
    }
    rays
}

pub fn rays_for_pixels(pose: &CameraPose, pixels: &[(u32, u32)]) -> Vec<Ray> {
    pixels
        .iter()
        .map(|&(px, py)| make_ray(pose, px, py))
        .collect()
}

fn make_ray(pose: &CameraPose, px: u32, py: u32) -> Ray {
    let (o, d) = pose.ray(px, py);
    Ray {
        origin: [o[0] as f32, o[1] as f32, o[2] as f32],
        dir: [d[0] as f32, d[1] as f32, d[2] as f32],
        px,
        py,
    }
}

/// Precomputed geometry for a batch of rays: interpolation plans per grid
/// level, per-sample view directions, and the inside-the-unit-cube mask.
/// Everything that does not depend on field parameter values lives here, so
/// one plan can be reused across many training iterations.
pub struct RenderPlan<F: Real> {
    pub n_rays: usize,
    pub samples: usize,
    pub delta: F,
    pub tri: Vec<Arc<TriPlan<F>>>,
    pub dirs: Arc<Vec<F>>,
    pub mask: Arc<Vec<F>>,
}

pub fn build_plan<F: Real>(
    field: &RadianceField<F>,
    rays: &[Ray],
    samples: usize,
) -> RenderPlan<F> {
    assert!(samples >= 1, "need at least one sample per ray");
    let n = rays.len();
    let p = n * samples;
    let delta = (field.t_f - field.t_n) / samples as f32;
    let mut points = Vec::with_capacity(p);
    let mut dirs = Vec::with_capacity(p * 3);
    let mut mask = Vec::with_capacity(p);
    for ray in rays {
        let ts = sample_ts(ray.px, ray.py, field.t_n, field.t_f, samples);
        for &t in &ts {
            let x = [
                ray.origin[0] + t * ray.dir[0],
                ray.origin[1] + t * ray.dir[1],
                ray.origin[2] + t * ray.dir[2],
            ];
            let inside = x.iter().all(|&v| (0.0..=1.0).contains(&v));
            mask.push(if inside { F::ONE } else { F::ZERO });
            points.push([F::from_f32(x[0]), F::from_f32(x[1]), F::from_f32(x[2])]);
            dirs.extend(ray.dir.iter().map(|&v| F::from_f32(v)));
        }
    }
    let tri = field
        .levels
        .iter()
        .map(|lvl| Arc::new(tri_plan(&points, lvl.res)))
        .collect();
    RenderPlan {
        n_rays: n,
        samples,
        delta: F::from_f32(delta),
        tri,
        dirs: Arc::new(dirs),
        mask: Arc::new(mask),
    }
}

/// Tape variables for every field parameter array, in the same order as
/// `RadianceField::param_array`.
pub struct FieldVars {
    pub grids: Vec<Var>,
    pub dec: [Var; 8],
}

impl FieldVars {
    pub fn params<F: Real>(tape: &mut Tape<F>, field: &RadianceField<F>) -> Self {
        Self::build(tape, field, true)
    }

    pub fn constants<F: Real>(tape: &mut Tape<F>, field: &RadianceField<F>) -> Self {
        Self::build(tape, field, false)
    }

    fn build<F: Real>(tape: &mut Tape<F>, field: &RadianceField<F>, trainable: bool) -> Self {
        let mk = |tape: &mut Tape<F>, data: &[F], rows: usize, cols: usize| {
            let arc = Arc::new(data.to_vec());
            if trainable {
                tape.param(arc, rows, cols)
            } else {
                tape.constant(arc, rows, cols)
            }
        };
        let grids = field
            .levels
            .iter()
            .map(|l| mk(tape, &l.data, l.res * l.res * l.res, l.feat))
            .collect();
        let d = &field.decoder;
        let h = d.hidden;
        let dec = [
            mk(tape, &d.w1, d.in_feat, h),
            mk(tape, &d.b1, 1, h),
            mk(tape, &d.w_sigma, h, 1),
            mk(tape, &d.b_sigma, 1, 1),
            mk(tape, &d.w2, h + 3, h),
            mk(tape, &d.b2, 1, h),
            mk(tape, &d.w_rgb, h, 3),
            mk(tape, &d.b_rgb, 1, 3),
        ];
        FieldVars { grids, dec }
    }

    /// Variable for parameter array `i` in `param_array` order.
    pub fn var(&self, i: usize) -> Var {
        if i < self.grids.len() {
            self.grids[i]
        } else {
            self.dec[i - self.grids.len()]
        }
    }

    pub fn n_arrays(&self) -> usize {
        self.grids.len() + 8
    }

    /// Replace the finest-grid variable (used when rendering a watermarked
    /// field whose embedding surface is itself a tape expression).
    pub fn with_finest(mut self, v: Var) -> Self {
        *self.grids.last_mut().expect("grids nonempty") = v;
        self
    }
}

/// The assembled per-ray rendering graph. `pixels` is [n_rays, 3]; the
/// auxiliary variables expose quadrature internals for inspection.
pub struct PixelGraph {
    pub pixels: Var,
    /// [n_rays·S, 1] transmittance at each sample.
    pub transmittance: Var,
    /// [n_rays·S, 1] compositing weight T·α per sample.
    pub weights: Var,
    /// [n_rays·S, 1] masked density.
    pub sigma: Var,
    /// [n_rays·S, 3] decoded color per sample.
    pub rgb: Var,
}

/// Build the differentiable quadrature for a batch of rays.
pub fn assemble_pixels<F: Real>(
    tape: &mut Tape<F>,
    vars: &FieldVars,
    plan: &RenderPlan<F>,
    background: [f32; 3],
) -> PixelGraph {
    let p = plan.n_rays * plan.samples;
    // Interpolated features, concatenated across levels.
    let mut x = tape.trilinear_gather(vars.grids[0], plan.tri[0].clone());
    for (l, tri) in plan.tri.iter().enumerate().skip(1) {
        let f = tape.trilinear_gather(vars.grids[l], tri.clone());
        x = tape.concat_cols(x, f);
    }
    // First hidden layer and density head (view-independent).
    let h1 = tape.linear(x, vars.dec[0], Some(vars.dec[1]), Act::Relu);
    let zs = tape.linear(h1, vars.dec[2], Some(vars.dec[3]), Act::None);
    let sp = tape.softplus(zs);
    let mask = tape.constant(plan.mask.clone(), p, 1);
    let sigma = tape.mul(sp, mask);
    // Quadrature: optical depth per bin, transmittance, weights.
    let tau = tape.affine(sigma, plan.delta, F::ZERO);
    let cum = tape.cumsum_excl_groups(tau, plan.samples);
    let neg_cum = tape.affine(cum, -F::ONE, F::ZERO);
    let transmittance = tape.exp(neg_cum);
    let neg_tau = tape.affine(tau, -F::ONE, F::ZERO);
    let exp_neg_tau = tape.exp(neg_tau);
    let alpha = tape.affine(exp_neg_tau, -F::ONE, F::ONE);
    let weights = tape.mul(transmittance, alpha);
    // Color head sees the view direction.
    let dirs = tape.constant(plan.dirs.clone(), p, 3);
    let h2 = tape.linear2(h1, dirs, vars.dec[4], Some(vars.dec[5]), Act::Relu);
    let rgb = tape.linear(h2, vars.dec[6], Some(vars.dec[7]), Act::Logistic);
    // Composite: weighted colors plus residual-transmittance background.
    let wc = tape.mul_col(rgb, weights);
    let fg = tape.sum_groups(wc, plan.samples);
    let tau_sum = tape.sum_groups(tau, plan.samples);
    let neg_total = tape.affine(tau_sum, -F::ONE, F::ZERO);
    let t_end = tape.exp(neg_total);
    let mut bg = Vec::with_capacity(plan.n_rays * 3);
    for _ in 0..plan.n_rays {
        bg.extend(background.iter().map(|&v| F::from_f32(v)));
    }
    let bg = tape.constant_owned(bg, plan.n_rays, 3);
    let bg_term = tape.mul_col(bg, t_end);
    let pixels = tape.add(fg, bg_term);
    PixelGraph {
        pixels,
        transmittance,
        weights,
        sigma,
        rgb,
    }
}

/// Maximum rays per forward chunk when rendering without gradients.
const CHUNK_RAYS: usize = 2048;

/// Render arbitrary rays; returns RGB triples in ray order.
pub fn render_rays<F: Real>(
    field: &RadianceField<F>,
    rays: &[Ray],
    cfg: &RenderConfig,
) -> Vec<F> {
    let mut out = Vec::with_capacity(rays.len() * 3);
    for chunk in rays.chunks(CHUNK_RAYS.max(1)) {
        let plan = build_plan(field, chunk, cfg.samples);
        let mut tape = Tape::new();
        let vars = FieldVars::constants(&mut tape, field);
        let graph = assemble_pixels(&mut tape, &vars, &plan, cfg.background);
        out.extend_from_slice(tape.values(graph.pixels));
    }
    out
}

/// Render a full frame at the pose's resolution.
pub fn render_image<F: Real>(
    field: &RadianceField<F>,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> Image {
    let rays = pixel_rays(pose);
    let vals = render_rays(field, &rays, cfg);
    Image::new(
        pose.h as usize,
        pose.w as usize,
        vals.iter().map(|v| v.to_f32()).collect(),
    )
}

/// Where to render a set of equally sized patches: the shared pose and the
/// top-left corner of each patch.
#[derive(Clone, Debug)]
pub struct PatchSpec {
    pub pose: CameraPose,
    pub origins: Vec<(u32, u32)>,
    pub ph: usize,
    pub pw: usize,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        for &(ox, oy) in &self.origins {
            if ox as usize + self.pw > self.pose.w as usize
                || oy as usize + self.ph > self.pose.h as usize
            {
                return Err(Error::invalid(format!(
                    "patch at ({ox}, {oy}) of size {}x{} leaves the {}x{} image",
                    self.pw, self.ph, self.pose.w, self.pose.h
                )));
            }
        }
        Ok(())
    }

    /// Row-major pixel list of one patch.
    pub fn patch_pixels(&self, i: usize) -> Vec<(u32, u32)> {
        let (ox, oy) = self.origins[i];
        let mut px = Vec::with_capacity(self.ph * self.pw);
        for dy in 0..self.ph as u32 {
            for dx in 0..self.pw as u32 {
                px.push((ox + dx, oy + dy));
            }
        }
        px
    }
}

/// Render each patch of a spec; order follows `spec.origins`.
pub fn render_patch_set<F: Real>(
    field: &RadianceField<F>,
    spec: &PatchSpec,
    cfg: &RenderConfig,
) -> Result<Vec<Image>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.origins.len());
    for i in 0..spec.origins.len() {
        let rays = rays_for_pixels(&spec.pose, &spec.patch_pixels(i));
        let vals = render_rays(field, &rays, cfg);
        out.push(Image::new(
            spec.ph,
            spec.pw,
            vals.iter().map(|v| v.to_f32()).collect(),
        ));
    }
    Ok(out)
}

/// Plain (non-tape) reference compositor for one ray, used to cross-check the
/// graph assembly: `sigma`/`rgb` are per-sample values, `delta` the bin width.
pub fn composite<F: Real>(sigma: &[F], rgb: &[[F; 3]], delta: F, background: [F; 3]) -> [F; 3] {
    assert_eq!(sigma.len(), rgb.len());
    let mut t = F::ONE;
    let mut c = [F::ZERO; 3];
    for (&s, col) in sigma.iter().zip(rgb) {
        let alpha = F::ONE - (-s * delta).exp();
        let w = t * alpha;
        for k in 0..3 {
            c[k] = c[k] + w * col[k];
        }
        t = t * (F::ONE - alpha);
    }
    for k in 0..3 {
        c[k] = c[k] + t * background[k];
    }
    c
}
