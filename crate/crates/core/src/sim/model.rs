//! A small seeded joint-attention transformer.
//!
//! Blocks are pre-norm: `x += attn(norm(x))`, `x += mlp(norm(x))`. Image
//! and text tokens attend jointly; only image tokens are merged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::numerics::{dot, softmax_in_place, Matrix};
use crate::ptr::{reweight_attention_in_place, PromptWeightPlan};
use crate::sim::macs::ModelShape;

#[derive(Debug, Clone)]
struct BlockWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    pub shape: ModelShape,
    blocks: Vec<BlockWeights>,
    /// Fixed text-token embeddings, `text_tokens x model_dim`.
    pub text: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Prompt-token reweighting applied inside attention.
#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub plan: &'a PromptWeightPlan,
    pub step: usize,
    pub total_steps: usize,
}

impl ToyTransformer {
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (shape.model_dim, shape.mlp_dim);
        let sd = 1.0 / (d as f64).sqrt();
        let blocks = (0..shape.blocks)
            .map(|_| BlockWeights {
                wq: gaussian(&mut rng, d, d, sd),
                wk: gaussian(&mut rng, d, d, sd),
                wv: gaussian(&mut rng, d, d, sd),
                wo: gaussian(&mut rng, d, d, 0.5 * sd),
                w1: gaussian(&mut rng, d, h, sd),
                w2: gaussian(&mut rng, h, d, 0.5 / (h as f64).sqrt()),
            })
            .collect();
        let text = gaussian(&mut rng, shape.text_tokens, d, 1.0);
        Ok(Self {
            shape,
            blocks,
            text,
        })
    }

    fn check(&self, layer: usize, x: &Matrix) -> Result<()> {
        if layer >= self.blocks.len() {
            return Err(Error::Shape(format!(
                "layer {layer} out of range for {} blocks",
                self.blocks.len()
            )));
        }
        if x.cols() != self.shape.model_dim {
            return Err(Error::Shape(format!(
                "tokens have dim {}, model expects {}",
                x.cols(),
                self.shape.model_dim
            )));
        }
        Ok(())
    }

    /// Attention residual for `x` (image rows first, then `text_len` text
    /// rows) and the head-averaged attention map.
    pub fn attention(
        &self,
        layer: usize,
        x: &Matrix,
        text_len: usize,
        prompt: Option<PromptContext<'_>>,
        par: Parallelism,
    ) -> Result<(Matrix, Matrix)> {
        self.check(layer, x)?;
        let w = &self.blocks[layer];
        let xn = rms_norm(x);
        let q = xn.matmul(&w.wq)?;
        let k = xn.matmul(&w.wk)?;
        let v = xn.matmul(&w.wv)?;
        let n = x.rows();
        let heads = self.shape.heads;
        let hd = self.shape.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let text_cols: Vec<usize> = (n - text_len..n).collect();

        let per_head: Vec<Result<(Matrix, Matrix)>> = map_indexed(par, heads, |h| {
            let cols: Vec<usize> = (h * hd..(h + 1) * hd).collect();
            let (qh, kh, vh) = (
                q.select_cols(&cols),
                k.select_cols(&cols),
                v.select_cols(&cols),
            );
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = qh.row(i);
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, kh.row(j)) * scale;
                }
                softmax_in_place(row);
            }
            if let Some(ctx) = prompt {
                let cols = &text_cols[..ctx.plan.tokens.len().min(text_len)];
                reweight_attention_in_place(&mut p, ctx.plan, cols, ctx.step, ctx.total_steps)?;
            }
            Ok((p.matmul(&vh)?, p))
        });

        let mut concat = Matrix::zeros(n, self.shape.model_dim);
        let mut avg = Matrix::zeros(n, n);
        for (h, r) in per_head.into_iter().enumerate() {
            let (out, p) = r?;
            for i in 0..n {
                concat.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(out.row(i));
            }
            avg.add_assign(&p)?;
        }
        for a in avg.data_mut() {
            *a /= heads as f64;
        }
        Ok((concat.matmul(&w.wo)?, avg))
    }

    /// Feed-forward residual for `x`.
    pub fn mlp(&self, layer: usize, x: &Matrix) -> Result<Matrix> {
        self.check(layer, x)?;
        let w = &self.blocks[layer];
        let mut hid = rms_norm(x).matmul(&w.w1)?;
        for a in hid.data_mut() {
            *a = gelu(*a);
        }
        hid.matmul(&w.w2)
    }
}

fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// The image-by-image block of a joint attention map, rows renormalized.
pub fn image_attention(attn: &Matrix, image_len: usize) -> Result<Matrix> {
    if attn.rows() < image_len || attn.cols() < image_len {
        return Err(Error::Shape(format!(
            "attention map {}x{} smaller than {image_len} image tokens",
            attn.rows(),
            attn.cols()
        )));
    }
    let mut out = Matrix::zeros(image_len, image_len);
    for i in 0..image_len {
        let src = &attn.row(i)[..image_len];
        let sum: f64 = src.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "image attention row {i} sums to {sum}"
            )));
        }
        for (o, &a) in out.row_mut(i).iter_mut().zip(src) {
            *o = a / sum;
        }
    }
    Ok(out)
}
