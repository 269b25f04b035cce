//! Rendering-oriented tape kernels: trilinear grid gathers, sparse weighted
//! row mixes (warps / blurs / crops / patch extraction), and the JPEG
//! round-trip with straight-through rounding.

use super::linalg;
use super::real::Real;

/// Trilinear interpolation plan: for each output sample, the 8 grid vertex
/// rows and weights. Plans depend only on sample positions, so render loops
/// build them once per pose and reuse them across training iterations.
pub struct TriPlan<F: Real> {
    pub idx: Vec<[u32; 8]>,
    pub w: Vec<[F; 8]>,
}

/// Build a gather plan for points in the unit cube against a cubic grid of
/// `res^3` vertices, vertex `(ix,iy,iz)` sitting at `i/(res-1)` per axis and
/// stored at flat row `(ix*res + iy)*res + iz`. Coordinates are clamped to
/// the cube; density masking for out-of-bounds samples happens elsewhere.
pub fn tri_plan<F: Real>(points: &[[F; 3]], res: usize) -> TriPlan<F> {
    assert!(res >= 2, "grid needs at least 2 vertices per axis");
    let scale = F::from_usize(res - 1);
    let mut idx = Vec::with_capacity(points.len());
    let mut w = Vec::with_capacity(points.len());
    for p in points {
        let mut cell = [0usize; 3];
        let mut frac = [F::ZERO; 3];
        for a in 0..3 {
            let x = p[a].clamp(F::ZERO, F::ONE) * scale;
            let c = (x.floor().to_f64() as usize).min(res - 2);
            cell[a] = c;
            frac[a] = x - F::from_usize(c);
        }
        let mut ii = [0u32; 8];
        let mut ww = [F::ZERO; 8];
        for k in 0..8 {
            let (dx, dy, dz) = (k >> 2 & 1, k >> 1 & 1, k & 1);
            let (vx, vy, vz) = (cell[0] + dx, cell[1] + dy, cell[2] + dz);
            ii[k] = ((vx * res + vy) * res + vz) as u32;
            let wx = if dx == 1 { frac[0] } else { F::ONE - frac[0] };
            let wy = if dy == 1 { frac[1] } else { F::ONE - frac[1] };
            let wz = if dz == 1 { frac[2] } else { F::ONE - frac[2] };
            ww[k] = wx * wy * wz;
        }
        idx.push(ii);
        w.push(ww);
    }
    TriPlan { idx, w }
}

pub fn trilinear_forward<F: Real>(grid: &[F], cols: usize, plan: &TriPlan<F>) -> Vec<F> {
    let mut out = vec![F::ZERO; plan.idx.len() * cols];
    for ((orow, idx), w) in out
        .chunks_exact_mut(cols)
        .zip(plan.idx.iter())
        .zip(plan.w.iter())
    {
        for k in 0..8 {
            let src = &grid[idx[k] as usize * cols..(idx[k] as usize + 1) * cols];
            linalg::axpy(w[k], src, orow);
        }
    }
    out
}

pub fn trilinear_backward<F: Real>(g: &[F], cols: usize, plan: &TriPlan<F>, ggrid: &mut [F]) {
    for ((grow, idx), w) in g
        .chunks_exact(cols)
        .zip(plan.idx.iter())
        .zip(plan.w.iter())
    {
        if linalg::row_is_zero(grow) {
            continue;
        }
        for k in 0..8 {
            let dst = &mut ggrid[idx[k] as usize * cols..(idx[k] as usize + 1) * cols];
            linalg::axpy(w[k], grow, dst);
        }
    }
}

/// Sparse row-mixing plan in CSR form: output row `i` is
/// `sum_t w_t * input[idx_t, :] + bias[i]` (bias broadcast across columns —
/// used for white fill where white is 1.0 in every channel).
pub struct GatherPlan<F: Real> {
    pub taps: Vec<(u32, F)>,
    pub offsets: Vec<u32>,
    pub bias: Option<Vec<F>>,
    pub in_rows: usize,
}

impl<F: Real> GatherPlan<F> {
    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

pub fn weighted_gather_forward<F: Real>(a: &[F], cols: usize, plan: &GatherPlan<F>) -> Vec<F> {
    let out_rows = plan.out_rows();
    let mut out = vec![F::ZERO; out_rows * cols];
    for i in 0..out_rows {
        let orow = &mut out[i * cols..(i + 1) * cols];
        if let Some(bias) = &plan.bias {
            orow.fill(bias[i]);
        }
        for &(idx, w) in &plan.taps[plan.offsets[i] as usize..plan.offsets[i + 1] as usize] {
            let src = &a[idx as usize * cols..(idx as usize + 1) * cols];
            linalg::axpy(w, src, orow);
        }
    }
    out
}

pub fn weighted_gather_backward<F: Real>(
    g: &[F],
    cols: usize,
    plan: &GatherPlan<F>,
    ga: &mut [F],
) {
    for (i, grow) in g.chunks_exact(cols).enumerate() {
        if linalg::row_is_zero(grow) {
            continue;
        }
        for &(idx, w) in &plan.taps[plan.offsets[i] as usize..plan.offsets[i + 1] as usize] {
            let dst = &mut ga[idx as usize * cols..(idx as usize + 1) * cols];
            linalg::axpy(w, grow, dst);
        }
    }
}

// ----- JPEG -----

/// Baseline JPEG round-trip (4:4:4, Annex K tables scaled by quality) used
/// as a differentiable-in-training distortion. Rounding is the only
/// nonlinearity and is treated straight-through.
pub struct JpegPlan {
    pub h: usize,
    pub w: usize,
    qy: [f64; 64],
    qc: [f64; 64],
}

#[rustfmt::skip]
const BASE_LUMA: [i32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const BASE_CHROMA: [i32; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

impl JpegPlan {
    /// `quality` in [1, 100], libjpeg scaling convention.
    pub fn new(h: usize, w: usize, quality: u32) -> Self {
        assert!(h % 8 == 0 && w % 8 == 0, "image dims must be multiples of 8");
        assert!((1..=100).contains(&quality), "quality out of range");
        let scale = if quality < 50 {
            5000 / quality as i32
        } else {
            200 - 2 * quality as i32
        };
        let scaled = |base: &[i32; 64]| {
            let mut t = [0f64; 64];
            for (o, &b) in t.iter_mut().zip(base.iter()) {
                *o = ((b * scale + 50) / 100).clamp(1, 255) as f64;
            }
            t
        };
        JpegPlan {
            h,
            w,
            qy: scaled(&BASE_LUMA),
            qc: scaled(&BASE_CHROMA),
        }
    }
}

/// Orthonormal 8-point DCT-II matrix.
fn dct_matrix() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (u, row) in d.iter_mut().enumerate() {
        let cu = if u == 0 {
            1.0 / 2f64.sqrt()
        } else {
            1.0
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * 0.5 * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    d
}

pub fn jpeg_forward<F: Real>(img: &[F], plan: &JpegPlan) -> Vec<F> {
    let (h, w) = (plan.h, plan.w);
    let d = dct_matrix();

    // RGB -> YCbCr (JFIF full range), centered at 0 in units of 255.
    let mut planes = vec![0f64; 3 * h * w];
    for (p, px) in img.chunks_exact(3).enumerate() {
        let (r, g, b) = (px[0].to_f64(), px[1].to_f64(), px[2].to_f64());
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let cb = -0.168_735_892 * r - 0.331_264_108 * g + 0.5 * b + 0.5;
        let cr = 0.5 * r - 0.418_687_589 * g - 0.081_312_411 * b + 0.5;
        planes[p] = y * 255.0 - 128.0;
        planes[h * w + p] = cb * 255.0 - 128.0;
        planes[2 * h * w + p] = cr * 255.0 - 128.0;
    }

    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for c in 0..3 {
        let q = if c == 0 { &plan.qy } else { &plan.qc };
        let plane = &mut planes[c * h * w..(c + 1) * h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (yy, row) in block.iter_mut().enumerate() {
                    for (xx, v) in row.iter_mut().enumerate() {
                        *v = plane[(by + yy) * w + bx + xx];
                    }
                }
                // coeffs = D * X * D^T, quantize, X' = D^T * coeffs * D
                mat8(&d, &block, &mut tmp, false);
                mat8t(&tmp, &d, &mut block);
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let qq = q[i * 8 + j];
                        *v = (*v / qq).round() * qq;
                    }
                }
                mat8(&d, &block, &mut tmp, true);
                let src = tmp;
                mat8(&src, &d, &mut block, false);
                for (yy, row) in block.iter().enumerate() {
                    for (xx, &v) in row.iter().enumerate() {
                        plane[(by + yy) * w + bx + xx] = v;
                    }
                }
            }
        }
    }

    // YCbCr -> RGB.
    let mut out = vec![F::ZERO; img.len()];
    for p in 0..h * w {
        let y = (planes[p] + 128.0) / 255.0;
        let cb = (planes[h * w + p] + 128.0) / 255.0 - 0.5;
        let cr = (planes[2 * h * w + p] + 128.0) / 255.0 - 0.5;
        out[p * 3] = F::from_f64(y + 1.402 * cr);
        out[p * 3 + 1] = F::from_f64(y - 0.344_136_286 * cb - 0.714_136_286 * cr);
        out[p * 3 + 2] = F::from_f64(y + 1.772 * cb);
    }
    out
}

/// `out = a * b` (or `a^T * b` when `ta`) for 8x8.
fn mat8(a: &[[f64; 8]; 8], b: &[[f64; 8]; 8], out: &mut [[f64; 8]; 8], ta: bool) {
    for i in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for l in 0..8 {
                let av = if ta { a[l][i] } else { a[i][l] };
                s += av * b[l][j];
            }
            out[i][j] = s;
        }
    }
}

/// `out = a * b^T` for 8x8.
fn mat8t(a: &[[f64; 8]; 8], b: &[[f64; 8]; 8], out: &mut [[f64; 8]; 8]) {
    for i in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for l in 0..8 {
                s += a[i][l] * b[j][l];
            }
            out[i][j] = s;
        }
    }
}
