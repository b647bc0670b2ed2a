//! Uncertainty maps from latent retrieval, plus the Edge and entropy
//! baselines.
//!
//! For a test image `x*` with prediction `y*`, the image embedding `h_x` is
//! compared to the joint embeddings of every ground-truth mask in a
//! [`LatentBank`]. The `M` most similar masks are decoded from their mask
//! latents, and each pixel's uncertainty is the kernel-weighted average
//! disagreement between those decodings and `y*`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::mask::{Mask, ProbMap};
use crate::model::{CrispModel, JointEmbedding, Side};
use crate::morphology::{dilate, erode};
use crate::numerics::{dot, norm, Matrix};

pub const BANK_MAGIC: &[u8; 8] = b"CRSPBK01";

/// Number of Edge dilation/erosion iterations.
pub const EDGE_ITERATIONS: usize = 5;

/// Mask latents `Z̄` and their unit joint embeddings `H̄`, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBank {
    latents: Matrix,
    embeddings: Matrix,
}

impl LatentBank {
    pub fn new(latents: Matrix, embeddings: Matrix) -> Result<Self> {
        if latents.rows() != embeddings.rows() {
            return Err(CrispError::Dimension(format!(
                "{} latents but {} embeddings",
                latents.rows(),
                embeddings.rows()
            )));
        }
        for r in 0..embeddings.rows() {
            let n = norm(embeddings.row(r));
            if (n - 1.0).abs() > 1e-9 {
                return Err(CrispError::Input(format!("bank embedding {r} has norm {n}")));
            }
        }
        Ok(Self { latents, embeddings })
    }

    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(BANK_MAGIC)
            .u32(self.len() as u32)
            .u32(self.latents.cols() as u32)
            .u32(self.embeddings.cols() as u32)
            .f64s(self.latents.data())
            .f64s(self.embeddings.data());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(BANK_MAGIC)?;
        let n = r.u32()? as usize;
        let d_y = r.u32()? as usize;
        let d_h = r.u32()? as usize;
        let latents = Matrix::from_vec(n, d_y, r.f64s(n * d_y)?)?;
        let embeddings = Matrix::from_vec(n, d_h, r.f64s(n * d_h)?)?;
        r.finish()?;
        Self::new(latents, embeddings).map_err(|e| CrispError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Encodes every mask and projects it onto the joint sphere.
pub fn build_bank(masks: &[Mask], model: &CrispModel) -> Result<LatentBank> {
    if masks.len() < 2 {
        return Err(CrispError::Input(format!(
            "a latent bank needs at least 2 masks, got {}",
            masks.len()
        )));
    }
    let c = &model.config;
    let mut stacked = Vec::with_capacity(masks.len() * c.mask_len());
    for (i, m) in masks.iter().enumerate() {
        model
            .check_geometry(m.height(), m.width(), m.num_classes())
            .map_err(|e| CrispError::Dimension(format!("mask {i}: {e}")))?;
        stacked.extend(m.one_hot());
    }
    let latents = model.encode_masks(&Matrix::from_vec(masks.len(), c.mask_len(), stacked)?)?;
    let mut embeddings = Matrix::zeros(masks.len(), c.d_h);
    for i in 0..masks.len() {
        let h = model
            .project(latents.row(i), Side::Mask)
            .map_err(|e| CrispError::DegenerateInput(format!("mask {i}: {e}")))?;
        embeddings.row_mut(i).copy_from_slice(h.as_slice());
    }
    Ok(LatentBank { latents, embeddings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub indices: Vec<usize>,
    /// `H̄[i] · h_x`, descending.
    pub similarities: Vec<f64>,
}

/// The `m` bank rows most similar to `h_x`; ties go to the lower index.
pub fn retrieve(h_x: &JointEmbedding, bank: &LatentBank, m: usize) -> Result<Retrieval> {
    let n = bank.len();
    if m == 0 || m > n {
        return Err(CrispError::Config(format!("M must be in 1..={n}, got {m}")));
    }
    if h_x.dim() != bank.embeddings.cols() {
        return Err(CrispError::Dimension(format!(
            "query has {} dims, bank has {}",
            h_x.dim(),
            bank.embeddings.cols()
        )));
    }
    let sims: Vec<f64> = (0..n).map(|i| dot(bank.embeddings.row(i), h_x.as_slice())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let by_score = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    if m < n {
        order.select_nth_unstable_by(m - 1, by_score);
        order.truncate(m);
    }
    order.sort_unstable_by(by_score);
    Ok(Retrieval {
        similarities: order.iter().map(|&i| sims[i]).collect(),
        indices: order,
    })
}

/// Maximum-likelihood von Mises–Fisher fit of the bank embeddings and the
/// resulting kernel bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfKernel {
    pub mean_direction: Vec<f64>,
    pub resultant_length: f64,
    pub concentration: f64,
    pub bandwidth: f64,
}

pub fn fit_vmf(bank: &LatentBank) -> Result<VmfKernel> {
    fit_vmf_rows(&bank.embeddings)
}

/// `κ = r(D − r²)/(1 − r²)` with `r` the mean resultant length, and
/// bandwidth `b = κ^(−1/2)·(40√π/N)^(1/5)`.
pub fn fit_vmf_rows(embeddings: &Matrix) -> Result<VmfKernel> {
    let (n, dim) = embeddings.shape();
    if n < 2 {
        return Err(CrispError::Input(format!("need at least 2 embeddings, got {n}")));
    }
    let mut mean = vec![0.0; dim];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(embeddings.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let r = norm(&mean);
    if r <= 1e-12 {
        return Err(CrispError::DegenerateInput(
            "embeddings cancel out: mean direction is undefined".into(),
        ));
    }
    if r >= 1.0 - 1e-12 {
        return Err(CrispError::DegenerateConcentration(r));
    }
    let d = dim as f64;
    let concentration = r * (d - r * r) / (1.0 - r * r);
    let bandwidth = concentration.powf(-0.5) * (40.0 * std::f64::consts::PI.sqrt() / n as f64).powf(0.2);
    Ok(VmfKernel {
        mean_direction: mean.iter().map(|m| m / r).collect(),
        resultant_length: r,
        concentration,
        bandwidth,
    })
}

/// Kernel weight `exp((h_i·h_x − 1)/b)`, equal to 1 when the directions
/// coincide.
pub fn vmf_weight(h_i: &[f64], h_x: &[f64], bandwidth: f64) -> f64 {
    ((dot(h_i, h_x) - 1.0) / bandwidth).exp()
}

/// Per-pixel uncertainty in `[0,1]`, row-major `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(CrispError::Dimension(format!(
                "{height}x{width} map with {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CrispError::Input(format!("uncertainty value {v} outside [0,1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Pixel confidences `1 − u`.
    pub fn confidences(&self) -> Vec<f64> {
        self.values.iter().map(|u| 1.0 - u).collect()
    }
}

/// How the weighted disagreements are averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the number of retrieved samples `M`.
    #[default]
    Count,
    /// Divide by the sum of kernel weights.
    WeightSum,
}

/// `U(p) = (1/Z) Σ_i w_i · ½ Σ_k |ȳ_i(k,p) − y*(k,p)|`, clamped to `[0,1]`,
/// with `Z = M` or `Z = Σ w_i`.
pub fn weighted_disagreement(decoded: &[ProbMap], weights: &[f64], y_star: &Mask, normalization: Normalization) -> Result<UncertaintyMap> {
    if decoded.is_empty() || decoded.len() != weights.len() {
        return Err(CrispError::Input(format!(
            "{} decoded samples with {} weights",
            decoded.len(),
            weights.len()
        )));
    }
    let hw = y_star.num_pixels();
    let target = y_star.one_hot();
    let mut values = vec![0.0; hw];
    for (pm, &w) in decoded.iter().zip(weights) {
        pm.matches(y_star)?;
        for (p, v) in values.iter_mut().enumerate() {
            let tv: f64 = (0..pm.num_classes)
                .map(|k| (pm.prob(k, p) - target[k * hw + p]).abs())
                .sum();
            *v += w * 0.5 * tv;
        }
    }
    let z = match normalization {
        Normalization::Count => decoded.len() as f64,
        Normalization::WeightSum => weights.iter().sum(),
    };
    values.iter_mut().for_each(|v| *v = (*v / z).clamp(0.0, 1.0));
    UncertaintyMap::new(y_star.height(), y_star.width(), values)
}

/// Everything computed on the way to one CRISP map.
#[derive(Debug, Clone)]
pub struct CrispEstimate {
    pub map: UncertaintyMap,
    pub retrieval: Retrieval,
    pub weights: Vec<f64>,
}

/// Reusable estimator: the bank and its kernel are fitted once.
#[derive(Debug, Clone)]
pub struct CrispEstimator<'a> {
    pub model: &'a CrispModel,
    pub bank: &'a LatentBank,
    pub kernel: VmfKernel,
    pub normalization: Normalization,
}

impl<'a> CrispEstimator<'a> {
    pub fn new(model: &'a CrispModel, bank: &'a LatentBank) -> Result<Self> {
        if bank.latents.cols() != model.config.d_y || bank.embeddings.cols() != model.config.d_h {
            return Err(CrispError::Dimension("bank was built with a different model shape".into()));
        }
        Ok(Self {
            model,
            bank,
            kernel: fit_vmf(bank)?,
            normalization: Normalization::Count,
        })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn embed_image(&self, image: &[f64]) -> Result<JointEmbedding> {
        self.model.project(&self.model.encode_image(image)?, Side::Image)
    }

    pub fn estimate(&self, image: &[f64], y_star: &Mask, m: usize) -> Result<CrispEstimate> {
        self.model.check_geometry(y_star.height(), y_star.width(), y_star.num_classes())?;
        let h_x = self.embed_image(image)?;
        let retrieval = retrieve(&h_x, self.bank, m)?;
        let c = &self.model.config;
        let mut picked = Matrix::zeros(m, c.d_y);
        for (r, &i) in retrieval.indices.iter().enumerate() {
            picked.row_mut(r).copy_from_slice(self.bank.latents.row(i));
        }
        let logits = self.model.decode_logits(&picked)?;
        let decoded: Vec<ProbMap> = (0..m).map(|r| self.model.logits_to_probs(logits.row(r))).collect();
        let weights: Vec<f64> = retrieval
            .indices
            .iter()
            .map(|&i| vmf_weight(self.bank.embeddings.row(i), h_x.as_slice(), self.kernel.bandwidth))
            .collect();
        let map = weighted_disagreement(&decoded, &weights, y_star, self.normalization)?;
        Ok(CrispEstimate { map, retrieval, weights })
    }
}

pub fn crisp_uncertainty(image: &[f64], y_star: &Mask, model: &CrispModel, bank: &LatentBank, m: usize) -> Result<UncertaintyMap> {
    Ok(CrispEstimator::new(model, bank)?.estimate(image, y_star, m)?.map)
}

/// `max(5, round(0.03·N))`, capped at `N`.
pub fn default_m(bank_size: usize) -> usize {
    ((0.03 * bank_size as f64).round() as usize).max(5).min(bank_size)
}

/// Morphological band around the predicted foreground boundary:
/// `Σ_{n=1..5} (|δⁿ − δⁿ⁻¹| + |ξⁿ⁻¹ − ξⁿ|)·(1 − n/5)`.
pub fn edge_uncertainty(y_star: &Mask) -> UncertaintyMap {
    let (h, w) = (y_star.height(), y_star.width());
    let mut values = vec![0.0; h * w];
    let mut dilated = y_star.foreground();
    let mut eroded = dilated.clone();
    for n in 1..=EDGE_ITERATIONS {
        let weight = 1.0 - n as f64 / EDGE_ITERATIONS as f64;
        let next_d = dilate(&dilated, h, w);
        let next_e = erode(&eroded, h, w);
        for p in 0..h * w {
            let ring = (next_d[p] != dilated[p]) as u8 + (eroded[p] != next_e[p]) as u8;
            values[p] += ring as f64 * weight;
        }
        dilated = next_d;
        eroded = next_e;
    }
    UncertaintyMap { height: h, width: w, values }
}

/// Normalized predictive entropy `−Σ p log p / log K` per pixel.
pub fn entropy_uncertainty(prob: &ProbMap) -> UncertaintyMap {
    let hw = prob.num_pixels();
    let log_k = (prob.num_classes as f64).ln();
    let values = (0..hw)
        .map(|p| {
            let h: f64 = (0..prob.num_classes)
                .map(|k| prob.prob(k, p))
                .filter(|&v| v > 0.0)
                .map(|v| -v * v.ln())
                .sum();
            (h / log_k).clamp(0.0, 1.0)
        })
        .collect();
    UncertaintyMap {
        height: prob.height,
        width: prob.width,
        values,
    }
}
