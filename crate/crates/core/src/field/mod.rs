//! Grid-based radiance field: multi-level dense feature grids feeding a small
//! perceptron decoder, with an explicit split between the embedding surface
//! (the finest grid) and everything else.

pub mod pretrain;
pub mod scene;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, split_payload, write_container};
use crate::error::{Error, Result};
use crate::numerics::ops_render::tri_plan;
use crate::numerics::real::Real;
use crate::numerics::rng::normal;
use rand_chacha::ChaCha8Rng;

pub const MAGIC_FIELD: &[u8; 4] = b"NSIG";

/// Static shape of a radiance field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// (resolution, features per vertex) per level, coarsest first.
    pub levels: Vec<(usize, usize)>,
    /// Width of both decoder hidden layers.
    pub hidden: usize,
    pub t_n: f32,
    pub t_f: f32,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            levels: vec![(16, 2), (32, 2)],
            hidden: 32,
            t_n: 1.2,
            t_f: 3.2,
        }
    }
}

impl FieldConfig {
    pub fn feature_dim(&self) -> usize {
        self.levels.iter().map(|&(_, f)| f).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("field needs at least one grid level"));
        }
        for &(res, feat) in &self.levels {
            if res < 2 || feat == 0 {
                return Err(Error::invalid(format!(
                    "bad grid level ({res}, {feat}): need resolution >= 2 and features >= 1"
                )));
            }
        }
        if self.hidden == 0 {
            return Err(Error::invalid("decoder hidden width must be positive"));
        }
        if !(self.t_n > 0.0 && self.t_f > self.t_n) {
            return Err(Error::invalid("require 0 < t_n < t_f"));
        }
        Ok(())
    }
}

/// One dense feature grid over the unit cube. Vertex (ix, iy, iz) sits at
/// (ix, iy, iz) / (res - 1); its features occupy
/// data[((ix*res + iy)*res + iz)*feat ..][..feat].
#[derive(Clone, Debug)]
pub struct GridLevel<F> {
    pub res: usize,
    pub feat: usize,
    pub data: Vec<F>,
}

impl<F: Real> GridLevel<F> {
    pub fn zeroed(res: usize, feat: usize) -> Self {
        GridLevel {
            res,
            feat,
            data: vec![F::ZERO; res * res * res * feat],
        }
    }

    pub fn vertex(&self, ix: usize, iy: usize, iz: usize) -> &[F] {
        let i = ((ix * self.res + iy) * self.res + iz) * self.feat;
        &self.data[i..i + self.feat]
    }
}

/// Two-hidden-layer decoder. Weight matrices are row-major [inputs, outputs]
/// so that a row vector of activations multiplies from the left. Density is
/// produced before the view direction enters, making it view-independent by
/// construction.
#[derive(Clone, Debug)]
pub struct Decoder<F> {
    pub in_feat: usize,
    pub hidden: usize,
    pub w1: Vec<F>,      // [in_feat, hidden]
    pub b1: Vec<F>,      // [hidden]
    pub w_sigma: Vec<F>, // [hidden, 1]
    pub b_sigma: Vec<F>, // [1]
    pub w2: Vec<F>,      // [in_feat2 = hidden + 3, hidden]
    pub b2: Vec<F>,      // [hidden]
    pub w_rgb: Vec<F>,   // [hidden, 3]
    pub b_rgb: Vec<F>,   // [3]
}

impl<F: Real> Decoder<F> {
    pub fn zeroed(in_feat: usize, hidden: usize) -> Self {
        Decoder {
            in_feat,
            hidden,
            w1: vec![F::ZERO; in_feat * hidden],
            b1: vec![F::ZERO; hidden],
            w_sigma: vec![F::ZERO; hidden],
            b_sigma: vec![F::ZERO; 1],
            w2: vec![F::ZERO; (hidden + 3) * hidden],
            b2: vec![F::ZERO; hidden],
            w_rgb: vec![F::ZERO; hidden * 3],
            b_rgb: vec![F::ZERO; 3],
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.len()
            + self.b1.len()
            + self.w_sigma.len()
            + self.b_sigma.len()
            + self.w2.len()
            + self.b2.len()
            + self.w_rgb.len()
            + self.b_rgb.len()
    }
}

#[derive(Clone, Debug)]
pub struct RadianceField<F> {
    pub levels: Vec<GridLevel<F>>,
    pub decoder: Decoder<F>,
    pub t_n: f32,
    pub t_f: f32,
}

/// Index of a parameter array within a field, in serialization order:
/// all grids coarsest-first, then the eight decoder arrays.
pub const DECODER_ARRAY_NAMES: [&str; 8] = [
    "w1", "b1", "w_sigma", "b_sigma", "w2", "b2", "w_rgb", "b_rgb",
];

impl<F: Real> RadianceField<F> {
    pub fn zeroed(cfg: &FieldConfig) -> Self {
        let levels = cfg
            .levels
            .iter()
            .map(|&(res, feat)| GridLevel::zeroed(res, feat))
            .collect();
        RadianceField {
            levels,
            decoder: Decoder::zeroed(cfg.feature_dim(), cfg.hidden),
            t_n: cfg.t_n,
            t_f: cfg.t_f,
        }
    }

    /// A field that renders pure background everywhere: the density bias is
    /// pushed far negative so softplus yields effectively zero opacity.
    pub fn empty(cfg: &FieldConfig) -> Self {
        let mut f = Self::zeroed(cfg);
        f.decoder.b_sigma[0] = F::from_f64(-30.0);
        f
    }

    /// Small random init used as the starting point for photometric training.
    pub fn init_random(cfg: &FieldConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut f = Self::zeroed(cfg);
        for lvl in &mut f.levels {
            for v in &mut lvl.data {
                *v = F::from_f32(normal(rng, 0.0, 0.1));
            }
        }
        let d = &mut f.decoder;
        let kaiming = |w: &mut Vec<F>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let s = (2.0 / fan_in as f64).sqrt() as f32;
            for v in w.iter_mut() {
                *v = F::from_f32(normal(rng, 0.0, s));
            }
        };
        let (fi, h) = (d.in_feat, d.hidden);
        kaiming(&mut d.w1, fi, rng);
        kaiming(&mut d.w_sigma, h, rng);
        kaiming(&mut d.w2, h + 3, rng);
        kaiming(&mut d.w_rgb, h, rng);
        // Start mostly transparent so early training carves density in, not out.
        d.b_sigma[0] = F::from_f64(-1.0);
        f
    }

    pub fn config(&self) -> FieldConfig {
        FieldConfig {
            levels: self.levels.iter().map(|l| (l.res, l.feat)).collect(),
            hidden: self.decoder.hidden,
            t_n: self.t_n,
            t_f: self.t_f,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.levels.iter().map(|l| l.feat).sum()
    }

    /// The embedding surface: the finest grid's raw parameter vector.
    pub fn theta_e(&self) -> &[F] {
        &self.levels.last().expect("field has levels").data
    }

    pub fn theta_e_mut(&mut self) -> &mut Vec<F> {
        &mut self.levels.last_mut().expect("field has levels").data
    }

    /// Number of parameter arrays (grids + decoder pieces).
    pub fn n_param_arrays(&self) -> usize {
        self.levels.len() + 8
    }

    pub fn param_array(&self, i: usize) -> &Vec<F> {
        let l = self.levels.len();
        if i < l {
            return &self.levels[i].data;
        }
        let d = &self.decoder;
        match i - l {
            0 => &d.w1,
            1 => &d.b1,
            2 => &d.w_sigma,
            3 => &d.b_sigma,
            4 => &d.w2,
            5 => &d.b2,
            6 => &d.w_rgb,
            7 => &d.b_rgb,
            _ => panic!("parameter array index out of range"),
        }
    }

    pub fn param_array_mut(&mut self, i: usize) -> &mut Vec<F> {
        let l = self.levels.len();
        if i < l {
            return &mut self.levels[i].data;
        }
        let d = &mut self.decoder;
        match i - l {
            0 => &mut d.w1,
            1 => &mut d.b1,
            2 => &mut d.w_sigma,
            3 => &mut d.b_sigma,
            4 => &mut d.w2,
            5 => &mut d.b2,
            6 => &mut d.w_rgb,
            7 => &mut d.b_rgb,
            _ => panic!("parameter array index out of range"),
        }
    }

    /// Index of the embedding surface among the parameter arrays.
    pub fn theta_e_index(&self) -> usize {
        self.levels.len() - 1
    }

    /// Concatenated trilinearly interpolated features at a point inside the
    /// unit cube (coordinates are clamped to it).
    pub fn features_at(&self, x: [f32; 3]) -> Vec<F> {
        let mut out = Vec::with_capacity(self.feature_dim());
        let xf = [F::from_f32(x[0]), F::from_f32(x[1]), F::from_f32(x[2])];
        for lvl in &self.levels {
            let plan = tri_plan::<F>(&[xf], lvl.res);
            for c in 0..lvl.feat {
                let mut acc = F::ZERO;
                for k in 0..8 {
                    let vi = plan.idx[0][k] as usize * lvl.feat + c;
                    acc = acc + plan.w[0][k] * lvl.data[vi];
                }
                out.push(acc);
            }
        }
        out
    }

    /// Pointwise field evaluation. Outside the unit cube the medium is vacuum
    /// and the color is the white background.
    pub fn query(&self, x: [f32; 3], d: [f32; 3]) -> (F, [F; 3]) {
        if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return (F::ZERO, [F::ONE; 3]);
        }
        let feats = self.features_at(x);
        let (sigma, rgb) = self.decode(&feats, d);
        (sigma, rgb)
    }

    /// Decoder forward pass for one point given its interpolated features.
    pub fn decode(&self, feats: &[F], d: [f32; 3]) -> (F, [F; 3]) {
        let dec = &self.decoder;
        let h = dec.hidden;
        assert_eq!(feats.len(), dec.in_feat);
        let mut h1 = vec![F::ZERO; h];
        for (i, &f) in feats.iter().enumerate() {
            if f.to_f64() == 0.0 {
                continue;
            }
            for j in 0..h {
                h1[j] = h1[j] + f * dec.w1[i * h + j];
            }
        }
        for j in 0..h {
            h1[j] = (h1[j] + dec.b1[j]).max(F::ZERO);
        }
        let mut z_sigma = dec.b_sigma[0];
        for j in 0..h {
            z_sigma = z_sigma + h1[j] * dec.w_sigma[j];
        }
        let sigma = softplus(z_sigma);

        let din = h + 3;
        let mut h2 = vec![F::ZERO; h];
        for j in 0..h {
            let f = h1[j];
            if f.to_f64() == 0.0 {
                continue;
            }
            for k in 0..h {
                h2[k] = h2[k] + f * dec.w2[j * h + k];
            }
        }
        for (a, &dv) in d.iter().enumerate() {
            let f = F::from_f32(dv);
            for k in 0..h {
                h2[k] = h2[k] + f * dec.w2[(h + a) * h + k];
            }
        }
        debug_assert_eq!(dec.w2.len(), din * h);
        for k in 0..h {
            h2[k] = (h2[k] + dec.b2[k]).max(F::ZERO);
        }
        let mut rgb = [F::ZERO; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let mut z = dec.b_rgb[c];
            for k in 0..h {
                z = z + h2[k] * dec.w_rgb[k * 3 + c];
            }
            *out = logistic(z);
        }
        (sigma, rgb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = FieldHeader {
            config: self.config(),
            arrays: (0..self.n_param_arrays())
                .map(|i| ArrayDesc {
                    name: self.array_name(i),
                    len: self.param_array(i).len(),
                })
                .collect(),
        };
        let f32_arrays: Vec<Vec<f32>> = (0..self.n_param_arrays())
            .map(|i| self.param_array(i).iter().map(|v| v.to_f32()).collect())
            .collect();
        let refs: Vec<&[f32]> = f32_arrays.iter().map(|a| a.as_slice()).collect();
        write_container(path, MAGIC_FIELD, &header, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload): (FieldHeader, Vec<f32>) = read_container(path, MAGIC_FIELD)?;
        header.config.validate()?;
        let mut field = Self::zeroed(&header.config);
        field.t_n = header.config.t_n;
        field.t_f = header.config.t_f;
        if header.arrays.len() != field.n_param_arrays() {
            return Err(Error::format_in(
                path.display().to_string(),
                format!(
                    "expected {} parameter arrays, header lists {}",
                    field.n_param_arrays(),
                    header.arrays.len()
                ),
            ));
        }
        let lens: Vec<usize> = header.arrays.iter().map(|a| a.len).collect();
        let parts = split_payload(payload, &lens, "field parameters")?;
        for (i, part) in parts.into_iter().enumerate() {
            let dst = field.param_array_mut(i);
            if dst.len() != part.len() {
                return Err(Error::format_in(
                    path.display().to_string(),
                    format!(
                        "array {} has {} values, config implies {}",
                        header.arrays[i].name,
                        part.len(),
                        dst.len()
                    ),
                ));
            }
            *dst = part.into_iter().map(F::from_f32).collect();
        }
        Ok(field)
    }

    fn array_name(&self, i: usize) -> String {
        let l = self.levels.len();
        if i < l {
            format!("grid{i}")
        } else {
            DECODER_ARRAY_NAMES[i - l].to_string()
        }
    }

    /// Serialize every parameter to a flat little-endian f32 byte string
    /// (used for byte-identity checks across the parameter split).
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for i in 0..self.n_param_arrays() {
            for v in self.param_array(i) {
                out.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
        out
    }
}

impl RadianceField<f32> {
    pub fn to_f64(&self) -> RadianceField<f64> {
        let mut out = RadianceField::<f64>::zeroed(&self.config());
        for i in 0..self.n_param_arrays() {
            *out.param_array_mut(i) = self.param_array(i).iter().map(|&v| v as f64).collect();
        }
        out
    }
}

fn softplus<F: Real>(z: F) -> F {
    // ln(1 + e^z), stable on both tails.
    if z.to_f64() > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn logistic<F: Real>(z: F) -> F {
    if z.to_f64() >= 0.0 {
        F::ONE / (F::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::ONE + e)
    }
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    config: FieldConfig,
    arrays: Vec<ArrayDesc>,
}

#[derive(Serialize, Deserialize)]
struct ArrayDesc {
    name: String,
    len: usize,
}
