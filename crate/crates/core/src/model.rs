//! Parameters and forward computations of the joint embedding model.
//!
//! ```text
//! image ──P_img──▶ z_x ──W_x──▶ normalize ──▶ h_x ┐
//!                                                 ├─▶ S = (H_X·H_Yᵀ)·e^τ
//! mask  ──P_mask─▶ z_y ──W_y──▶ normalize ──▶ h_y ┘
//!                   └──decoder──▶ per-pixel softmax over K classes
//! ```
//!
//! Encoders are two affine+tanh layers over flattened inputs. The decoder
//! has a tanh hidden layer and emits `K·H·W` logits. A separate affine
//! adapter maps image latents into the mask latent space so the model can
//! produce its own segmentations through the shared decoder.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::mask::{Mask, ProbMap};
use crate::numerics::{dot, gemm, l2_normalize, softmax_in_place, Matrix, Op};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRSPMD01";
/// Upper bound on the similarity scale `exp(τ)`.
pub const MAX_TEMPERATURE_SCALE: f64 = 100.0;

/// Initial similarity scale is `1 / INITIAL_TEMPERATURE`.
pub const INITIAL_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub d_h: usize,
    pub hidden: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_classes,
            d_x: 32,
            d_y: 32,
            d_h: 16,
            hidden: 128,
            init_seed: 0,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn mask_len(&self) -> usize {
        self.num_classes * self.num_pixels()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("height", self.height),
            ("width", self.width),
            ("num_classes", self.num_classes),
            ("d_x", self.d_x),
            ("d_y", self.d_y),
            ("d_h", self.d_h),
            ("hidden", self.hidden),
        ];
        if let Some((name, v)) = dims.iter().find(|(_, v)| *v < 2) {
            return Err(CrispError::Config(format!("{name} must be at least 2, got {v}")));
        }
        if self.d_h > self.d_x.min(self.d_y) {
            return Err(CrispError::Config(format!(
                "joint dim {} exceeds min(d_x, d_y) = {}",
                self.d_h,
                self.d_x.min(self.d_y)
            )));
        }
        if self.num_classes > u8::MAX as usize {
            return Err(CrispError::Config("too many classes".into()));
        }
        Ok(())
    }
}

/// Affine layer `y = W·x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    fn uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        fill_uniform(&mut layer.weight, rng);
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// Row-batched forward: `x` is `B × in`, result is `B × out`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = gemm(x, Op::N, &self.weight, Op::T)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

fn fill_uniform(m: &mut Matrix, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (m.cols() as f64).sqrt();
    for v in m.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Two affine layers with tanh after the first and, optionally, after the
/// second.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: Dense,
    pub second: Dense,
}

impl Mlp {
    fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            first: Dense::zeros(inputs, hidden),
            second: Dense::zeros(hidden, outputs),
        }
    }

    fn uniform(inputs: usize, hidden: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let first = Dense::uniform(inputs, hidden, rng);
        let second = Dense::uniform(hidden, outputs, rng);
        Self { first, second }
    }

    /// Returns `(hidden activations, outputs)`.
    pub fn forward(&self, x: &Matrix, output_tanh: bool) -> Result<(Matrix, Matrix)> {
        let mut hidden = self.first.forward(x)?;
        tanh_in_place(&mut hidden);
        let mut out = self.second.forward(&hidden)?;
        if output_tanh {
            tanh_in_place(&mut out);
        }
        Ok((hidden, out))
    }
}

pub(crate) fn tanh_in_place(m: &mut Matrix) {
    m.data_mut().iter_mut().for_each(|v| *v = v.tanh());
}

/// Which side of the joint space a latent comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Image,
    Mask,
}

/// Unit-norm vector in the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding(Vec<f64>);

impl JointEmbedding {
    /// Normalizes `v`; fails on a zero vector.
    pub fn from_unnormalized(v: &[f64]) -> Result<Self> {
        Ok(Self(l2_normalize(v)?.0))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Named view over one parameter tensor.
pub struct ParamRef<'a> {
    pub name: &'static str,
    pub values: &'a [f64],
    /// Whether decoupled weight decay applies.
    pub decays: bool,
}

pub struct ParamMut<'a> {
    pub name: &'static str,
    pub values: &'a mut [f64],
    pub decays: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrispModel {
    pub config: ModelConfig,
    pub image_encoder: Mlp,
    pub mask_encoder: Mlp,
    /// `W_x`, `d_h × d_x`.
    pub image_projection: Matrix,
    /// `W_y`, `d_h × d_y`.
    pub mask_projection: Matrix,
    pub decoder: Mlp,
    /// Affine `d_x → d_y` map used by [`CrispModel::segment`].
    pub adapter: Dense,
    /// Log-scale temperature τ.
    pub log_temperature: f64,
}

/// Gradients share the parameter layout.
pub type Gradients = CrispModel;

impl CrispModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let image_encoder = Mlp::uniform(config.num_pixels(), config.hidden, config.d_x, &mut rng);
        let mask_encoder = Mlp::uniform(config.mask_len(), config.hidden, config.d_y, &mut rng);
        let mut image_projection = Matrix::zeros(config.d_h, config.d_x);
        fill_uniform(&mut image_projection, &mut rng);
        let mut mask_projection = Matrix::zeros(config.d_h, config.d_y);
        fill_uniform(&mut mask_projection, &mut rng);
        let decoder = Mlp::uniform(config.d_y, config.hidden, config.mask_len(), &mut rng);
        let adapter = Dense::uniform(config.d_x, config.d_y, &mut rng);
        Ok(Self {
            config,
            image_encoder,
            mask_encoder,
            image_projection,
            mask_projection,
            decoder,
            adapter,
            log_temperature: (1.0 / INITIAL_TEMPERATURE).ln(),
        })
    }

    /// Same shapes as `config`, every parameter (including τ) zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            image_encoder: Mlp::zeros(config.num_pixels(), config.hidden, config.d_x),
            mask_encoder: Mlp::zeros(config.mask_len(), config.hidden, config.d_y),
            image_projection: Matrix::zeros(config.d_h, config.d_x),
            mask_projection: Matrix::zeros(config.d_h, config.d_y),
            decoder: Mlp::zeros(config.d_y, config.hidden, config.mask_len()),
            adapter: Dense::zeros(config.d_x, config.d_y),
            log_temperature: 0.0,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    /// Parameter tensors in checkpoint declaration order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        fn p<'a>(name: &'static str, values: &'a [f64], decays: bool) -> ParamRef<'a> {
            ParamRef { name, values, decays }
        }
        vec![
            p("image_encoder.first.weight", self.image_encoder.first.weight.data(), true),
            p("image_encoder.first.bias", &self.image_encoder.first.bias, false),
            p("image_encoder.second.weight", self.image_encoder.second.weight.data(), true),
            p("image_encoder.second.bias", &self.image_encoder.second.bias, false),
            p("mask_encoder.first.weight", self.mask_encoder.first.weight.data(), true),
            p("mask_encoder.first.bias", &self.mask_encoder.first.bias, false),
            p("mask_encoder.second.weight", self.mask_encoder.second.weight.data(), true),
            p("mask_encoder.second.bias", &self.mask_encoder.second.bias, false),
            p("image_projection", self.image_projection.data(), true),
            p("mask_projection", self.mask_projection.data(), true),
            p("decoder.first.weight", self.decoder.first.weight.data(), true),
            p("decoder.first.bias", &self.decoder.first.bias, false),
            p("decoder.second.weight", self.decoder.second.weight.data(), true),
            p("decoder.second.bias", &self.decoder.second.bias, false),
            p("adapter.weight", self.adapter.weight.data(), true),
            p("adapter.bias", &self.adapter.bias, false),
            p("log_temperature", std::slice::from_ref(&self.log_temperature), false),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        fn p<'a>(name: &'static str, values: &'a mut [f64], decays: bool) -> ParamMut<'a> {
            ParamMut { name, values, decays }
        }
        vec![
            p("image_encoder.first.weight", self.image_encoder.first.weight.data_mut(), true),
            p("image_encoder.first.bias", &mut self.image_encoder.first.bias, false),
            p("image_encoder.second.weight", self.image_encoder.second.weight.data_mut(), true),
            p("image_encoder.second.bias", &mut self.image_encoder.second.bias, false),
            p("mask_encoder.first.weight", self.mask_encoder.first.weight.data_mut(), true),
            p("mask_encoder.first.bias", &mut self.mask_encoder.first.bias, false),
            p("mask_encoder.second.weight", self.mask_encoder.second.weight.data_mut(), true),
            p("mask_encoder.second.bias", &mut self.mask_encoder.second.bias, false),
            p("image_projection", self.image_projection.data_mut(), true),
            p("mask_projection", self.mask_projection.data_mut(), true),
            p("decoder.first.weight", self.decoder.first.weight.data_mut(), true),
            p("decoder.first.bias", &mut self.decoder.first.bias, false),
            p("decoder.second.weight", self.decoder.second.weight.data_mut(), true),
            p("decoder.second.bias", &mut self.decoder.second.bias, false),
            p("adapter.weight", self.adapter.weight.data_mut(), true),
            p("adapter.bias", &mut self.adapter.bias, false),
            p("log_temperature", std::slice::from_mut(&mut self.log_temperature), false),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum()
    }

    /// All parameters concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.values.iter().copied()).collect()
    }

    /// Parameter at a flat index of [`CrispModel::flatten`].
    pub fn flat_get(&self, mut index: usize) -> f64 {
        for p in self.params() {
            if index < p.values.len() {
                return p.values[index];
            }
            index -= p.values.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flat_set(&mut self, mut index: usize, value: f64) {
        for p in self.params_mut() {
            if index < p.values.len() {
                p.values[index] = value;
                return;
            }
            index -= p.values.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.values.iter().all(|v| v.is_finite()))
    }

    /// Similarity scale `min(exp(τ), 100)`.
    pub fn temperature_scale(&self) -> f64 {
        temperature_scale(self.log_temperature)
    }

    pub fn check_geometry(&self, height: usize, width: usize, num_classes: usize) -> Result<()> {
        let c = &self.config;
        if (c.height, c.width, c.num_classes) != (height, width, num_classes) {
            return Err(CrispError::Dimension(format!(
                "model expects {}x{}x{}, data is {num_classes}x{height}x{width}",
                c.num_classes, c.height, c.width
            )));
        }
        Ok(())
    }

    pub fn encode_images(&self, images: &Matrix) -> Result<Matrix> {
        check_cols(images, self.config.num_pixels(), "image")?;
        Ok(self.image_encoder.forward(images, true)?.1)
    }

    pub fn encode_masks(&self, masks: &Matrix) -> Result<Matrix> {
        check_cols(masks, self.config.mask_len(), "one-hot mask")?;
        Ok(self.mask_encoder.forward(masks, true)?.1)
    }

    pub fn encode_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_images(&row(image))?.into_data())
    }

    pub fn encode_mask(&self, mask: &Mask) -> Result<Vec<f64>> {
        self.check_geometry(mask.height(), mask.width(), mask.num_classes())?;
        Ok(self.encode_masks(&row(&mask.one_hot()))?.into_data())
    }

    pub fn projection(&self, side: Side) -> &Matrix {
        match side {
            Side::Image => &self.image_projection,
            Side::Mask => &self.mask_projection,
        }
    }

    pub fn project(&self, z: &[f64], side: Side) -> Result<JointEmbedding> {
        let w = self.projection(side);
        if z.len() != w.cols() {
            return Err(CrispError::Dimension(format!(
                "{side:?} latent has length {}, projection expects {}",
                z.len(),
                w.cols()
            )));
        }
        let projected: Vec<f64> = (0..w.rows()).map(|r| dot(w.row(r), z)).collect();
        JointEmbedding::from_unnormalized(&projected)
    }

    /// Decoder logits for a batch of mask latents (`B × d_y`).
    pub fn decode_logits(&self, latents: &Matrix) -> Result<Matrix> {
        check_cols(latents, self.config.d_y, "mask latent")?;
        Ok(self.decoder.forward(latents, false)?.1)
    }

    pub fn decode(&self, z_y: &[f64]) -> Result<ProbMap> {
        let logits = self.decode_logits(&row(z_y))?;
        Ok(self.logits_to_probs(logits.data()))
    }

    /// Per-pixel softmax over the class channels of one logit row.
    pub fn logits_to_probs(&self, logits: &[f64]) -> ProbMap {
        let c = &self.config;
        ProbMap {
            num_classes: c.num_classes,
            height: c.height,
            width: c.width,
            data: pixel_softmax(logits, c.num_classes, c.num_pixels()),
        }
    }

    /// Image latent mapped into the mask latent space.
    pub fn adapt(&self, z_x: &[f64]) -> Result<Vec<f64>> {
        check_cols(&row(z_x), self.config.d_x, "image latent")?;
        Ok(self.adapter.forward(&row(z_x))?.into_data())
    }

    /// Segmentation of an image: encoder, adapter, then the mask decoder.
    pub fn segment(&self, image: &[f64]) -> Result<ProbMap> {
        let z_x = self.encode_image(image)?;
        self.decode(&self.adapt(&z_x)?)
    }
}

pub fn temperature_scale(log_temperature: f64) -> f64 {
    log_temperature.exp().min(MAX_TEMPERATURE_SCALE)
}

/// `S[i][j] = (h_x[i] · h_y[j]) · min(exp(τ), 100)`.
pub fn similarity_matrix(hx: &[JointEmbedding], hy: &[JointEmbedding], log_temperature: f64) -> Result<Matrix> {
    if hx.len() != hy.len() {
        return Err(CrispError::Dimension(format!(
            "batch sizes {} and {} differ",
            hx.len(),
            hy.len()
        )));
    }
    let scale = temperature_scale(log_temperature);
    let mut s = Matrix::zeros(hx.len(), hy.len());
    for (i, a) in hx.iter().enumerate() {
        for (j, b) in hy.iter().enumerate() {
            if a.dim() != b.dim() {
                return Err(CrispError::Dimension("embedding dims differ".into()));
            }
            s.set(i, j, dot(a.as_slice(), b.as_slice()) * scale);
        }
    }
    Ok(s)
}

/// Softmax over `k` channel-major planes of `hw` pixels.
pub fn pixel_softmax(logits: &[f64], k: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * hw];
    let mut scratch = vec![0.0; k];
    for p in 0..hw {
        for c in 0..k {
            scratch[c] = logits[c * hw + p];
        }
        softmax_in_place(&mut scratch);
        for c in 0..k {
            out[c * hw + p] = scratch[c];
        }
    }
    out
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("single row")
}

fn check_cols(m: &Matrix, expected: usize, what: &str) -> Result<()> {
    if m.cols() != expected {
        return Err(CrispError::Dimension(format!(
            "{what} input has {} values, expected {expected}",
            m.cols()
        )));
    }
    Ok(())
}

pub fn encode_checkpoint(model: &CrispModel) -> Vec<u8> {
    let c = &model.config;
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    for v in [c.height, c.width, c.num_classes, c.d_x, c.d_y, c.d_h, c.hidden] {
        w.u32(v as u32);
    }
    w.u64(c.init_seed);
    for p in model.params() {
        w.f64s(p.values);
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CrispModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        height: dims[0],
        width: dims[1],
        num_classes: dims[2],
        d_x: dims[3],
        d_y: dims[4],
        d_h: dims[5],
        hidden: dims[6],
        init_seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| CrispError::Format(format!("checkpoint header: {e}")))?;
    let mut model = CrispModel::zeros(config)?;
    for p in model.params_mut() {
        let values = r.f64s(p.values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CrispError::Format(format!("{} holds non-finite values", p.name)));
        }
        p.values.copy_from_slice(&values);
    }
    r.finish().map_err(|_| {
        CrispError::Dimension("checkpoint payload is larger than its header describes".into())
    })?;
    Ok(model)
}

pub fn save_checkpoint(model: &CrispModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CrispModel> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn small() -> ModelConfig {
        ModelConfig {
            height: 6,
            width: 5,
            num_classes: 3,
            d_x: 6,
            d_y: 5,
            d_h: 4,
            hidden: 7,
            init_seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let c = small();
        let a = CrispModel::new(c).unwrap();
        assert_eq!(a, CrispModel::new(c).unwrap());
        assert_eq!(a.image_encoder.first.weight.shape(), (7, 30));
        assert_eq!(a.image_encoder.second.weight.shape(), (6, 7));
        assert_eq!(a.mask_encoder.first.weight.shape(), (7, 90));
        assert_eq!(a.mask_encoder.second.weight.shape(), (5, 7));
        assert_eq!(a.image_projection.shape(), (4, 6));
        assert_eq!(a.mask_projection.shape(), (4, 5));
        assert_eq!(a.decoder.first.weight.shape(), (7, 5));
        assert_eq!(a.decoder.second.weight.shape(), (90, 7));
        assert_eq!(a.adapter.weight.shape(), (5, 6));
        assert!(a.params().iter().filter(|p| p.name.ends_with("bias")).all(|p| p.values.iter().all(|&v| v == 0.0)));
        let bound = 1.0 / 30f64.sqrt();
        assert!(a.image_encoder.first.weight.data().iter().all(|v| v.abs() < bound));
        assert!((a.temperature_scale() - 1.0 / 0.07).abs() < 1e-12);
        assert!((a.temperature_scale() - 14.285714285714286).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.d_h = 6;
        assert!(CrispModel::new(c).is_err());
        let mut c = small();
        c.hidden = 1;
        assert!(CrispModel::new(c).is_err());
    }

    #[test]
    fn zero_model_null_cases() {
        let m = CrispModel::zeros(small()).unwrap();
        assert_eq!(m.encode_image(&[0.0; 30]).unwrap(), vec![0.0; 6]);
        assert_eq!(m.encode_image(&[0.7; 30]).unwrap(), vec![0.0; 6]);
        let mask = Mask::background(6, 5, 3);
        assert_eq!(m.encode_mask(&mask).unwrap(), vec![0.0; 5]);
        let p = m.decode(&[0.3; 5]).unwrap();
        assert!(p.data.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn encoders_check_shapes() {
        let m = CrispModel::new(small()).unwrap();
        assert_eq!(m.encode_image(&[0.5; 30]).unwrap().len(), 6);
        assert!(matches!(m.encode_image(&[0.5; 29]), Err(CrispError::Dimension(_))));
        assert!(m.encode_mask(&Mask::background(5, 5, 3)).is_err());
        assert_eq!(m.encode_mask(&Mask::background(6, 5, 3)).unwrap().len(), 5);
        assert_eq!(m.encode_image(&[0.5; 30]).unwrap(), m.encode_image(&[0.5; 30]).unwrap());
    }

    #[test]
    fn single_pixel_change_moves_mask_latent() {
        let m = CrispModel::new(small()).unwrap();
        let a = Mask::background(6, 5, 3);
        let mut b = a.clone();
        b.labels_mut()[7] = 2;
        assert_ne!(m.encode_mask(&a).unwrap(), m.encode_mask(&b).unwrap());
    }

    #[test]
    fn projection_contract() {
        let m = CrispModel::new(small()).unwrap();
        let z = [0.3, -0.2, 0.9, 0.1, -0.5];
        let h = m.project(&z, Side::Mask).unwrap();
        assert!((dot(h.as_slice(), h.as_slice()).sqrt() - 1.0).abs() < 1e-12);
        let z2: Vec<f64> = z.iter().map(|v| v * 2.0).collect();
        let h2 = m.project(&z2, Side::Mask).unwrap();
        for (a, b) in h.as_slice().iter().zip(h2.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m.project(&z, Side::Image).is_err());
        assert!(matches!(
            m.project(&[0.0; 5], Side::Mask),
            Err(CrispError::DegenerateInput(_))
        ));
    }

    #[test]
    fn identity_projection_three_four_five() {
        let mut c = small();
        c.d_y = 4;
        let mut m = CrispModel::new(c).unwrap();
        m.mask_projection = Matrix::identity(4);
        let h = m.project(&[3.0, 4.0, 0.0, 0.0], Side::Mask).unwrap();
        let want = [0.6, 0.8, 0.0, 0.0];
        for (a, b) in h.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn similarity_cases() {
        let e = JointEmbedding::from_unnormalized(&[1.0, 2.0]).unwrap();
        let s = similarity_matrix(&[e.clone()], &[e], 0.0).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);

        let x = JointEmbedding::from_unnormalized(&[1.0, 0.0]).unwrap();
        let y = JointEmbedding::from_unnormalized(&[0.0, 1.0]).unwrap();
        let s = similarity_matrix(&[x.clone(), y.clone()], &[x, y], 1.7).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 0), 0.0);

        let a = JointEmbedding::from_unnormalized(&[0.3, -1.2, 0.4]).unwrap();
        let b = JointEmbedding::from_unnormalized(&[2.0, 0.1, -0.5]).unwrap();
        let c = JointEmbedding::from_unnormalized(&[-0.7, 0.6, 0.9]).unwrap();
        let d = JointEmbedding::from_unnormalized(&[0.2, 0.2, 1.0]).unwrap();
        let tau = 0.5f64;
        let s = similarity_matrix(&[a.clone(), b.clone()], &[c.clone(), d.clone()], tau).unwrap();
        let pairs = [(&a, &c), (&a, &d), (&b, &c), (&b, &d)];
        for (idx, (u, v)) in pairs.iter().enumerate() {
            let naive: f64 = (0..3).map(|k| u.as_slice()[k] * v.as_slice()[k]).sum::<f64>() * tau.exp();
            assert!((s.data()[idx] - naive).abs() < 1e-14);
        }
        // scaling exp(τ) by c scales every entry by c
        let s2 = similarity_matrix(&[a, b], &[c, d], tau + 2f64.ln()).unwrap();
        for (x, y) in s.data().iter().zip(s2.data()) {
            assert!((2.0 * x - y).abs() < 1e-14);
        }
        assert!(similarity_matrix(&[], &[x_unit()], 0.0).is_err());
    }

    fn x_unit() -> JointEmbedding {
        JointEmbedding::from_unnormalized(&[1.0]).unwrap()
    }

    #[test]
    fn temperature_is_clamped() {
        assert_eq!(temperature_scale(10.0), 100.0);
        assert!((temperature_scale(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decode_and_segment_are_distributions() {
        let m = CrispModel::new(small()).unwrap();
        for pm in [m.decode(&[0.2, -0.1, 0.5, 0.0, 0.9]).unwrap(), m.segment(&[0.4; 30]).unwrap()] {
            assert_eq!(pm.data.len(), 90);
            for p in 0..30 {
                let s: f64 = (0..3).map(|k| pm.prob(k, p)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let m = CrispModel::new(ModelConfig::new(16, 16, 2)).unwrap();
        let bytes = encode_checkpoint(&m);
        assert_eq!(bytes.len(), 8 + 7 * 4 + 8 + 8 * m.num_params());
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);

        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        assert!(matches!(decode_checkpoint(&bad), Err(CrispError::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 8]), Err(CrispError::Format(_))));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_checkpoint(&longer), Err(CrispError::Dimension(_))));
        // header claiming a wider hidden layer than the payload holds
        let mut wrong = bytes;
        wrong[8 + 6 * 4] = 200;
        assert!(decode_checkpoint(&wrong).is_err());
    }

    #[test]
    fn geometry_check() {
        let m = CrispModel::new(ModelConfig::new(16, 16, 3)).unwrap();
        let d = generate_dataset(1, 16, 16, 3, 0).unwrap();
        assert!(m.check_geometry(d.height, d.width, d.num_classes).is_ok());
        assert!(m.check_geometry(16, 16, 2).is_err());
    }
}
