//! Model configuration and parameter storage.
//!
//! Parameters live in plain `ndarray` arrays grouped by component. A second
//! `ModelParams` of identical shape serves as the gradient (and as each
//! optimizer moment), and [`ModelParams::flat_tensors_mut`] exposes every
//! tensor as a flat slice in one fixed enumeration order, which is also the
//! checkpoint layout.

use ndarray::{Array1, Array2, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::substream;

/// Float type the model runs in: f32 for training, f64 for numerical
/// verification.
pub trait Real: NdFloat {
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Weight scale for the normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Model width.
    pub dim: usize,
    /// Transformer block count.
    pub blocks: usize,
    /// Attention heads per block; must divide `dim`.
    pub heads: usize,
    /// Learned position count, the hard cap on input length.
    pub max_len: usize,
    /// Maxout pieces in the union head.
    pub maxout_pieces: usize,
    /// Token inventory size.
    pub vocab_size: usize,
    /// `Some(entity_count)` adds the classification head used by
    /// transductive training; inductive models have none.
    pub classify_entities: Option<usize>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("dim {dim} is not divisible by heads {heads}")]
    HeadSplit { dim: usize, heads: usize },
    #[error("{0} must be nonzero")]
    Zero(&'static str),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("dim", self.dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("max_len", self.max_len),
            ("maxout_pieces", self.maxout_pieces),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(ConfigError::HeadSplit {
                dim: self.dim,
                heads: self.heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Affine map `y = x · w + b`, weights stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct LinearP<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Real> LinearP<F> {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Array2::zeros((inp, out)),
            b: Array1::zeros(out),
        }
    }

    fn init<R: Rng>(inp: usize, out: usize, rng: &mut R, normal: &Normal<f64>) -> Self {
        Self {
            w: Array2::from_shape_fn((inp, out), |_| F::from_f64(normal.sample(rng))),
            b: Array1::zeros(out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormP<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Real> LayerNormP<F> {
    fn ones(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }
}

/// One post-norm transformer block: self-attention then feed-forward, each
/// followed by residual and layer norm.
#[derive(Debug, Clone)]
pub struct BlockP<F> {
    pub wq: LinearP<F>,
    pub wk: LinearP<F>,
    pub wv: LinearP<F>,
    pub wo: LinearP<F>,
    pub ln1: LayerNormP<F>,
    pub ffn1: LinearP<F>,
    pub ffn2: LinearP<F>,
    pub ln2: LayerNormP<F>,
}

/// Additive scoring attention over branch vectors (intersection head).
#[derive(Debug, Clone)]
pub struct AttnPoolP<F> {
    pub proj: LinearP<F>,
    pub v: Array1<F>,
}

/// Maxout over branches and pieces (union head).
#[derive(Debug, Clone)]
pub struct MaxoutP<F> {
    pub pieces: Vec<LinearP<F>>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    /// `[vocab, dim]`
    pub tok_emb: Array2<F>,
    /// `[max_len, dim]`
    pub pos_emb: Array2<F>,
    pub blocks: Vec<BlockP<F>>,
    pub intersect: AttnPoolP<F>,
    pub union: MaxoutP<F>,
    /// `[dim, entity_count]`, transductive mode only.
    pub classify: Option<LinearP<F>>,
}

impl<F: Real> ModelParams<F> {
    /// All-zero parameters of the configured shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let d = config.dim;
        let block = || BlockP {
            wq: LinearP::zeros(d, d),
            wk: LinearP::zeros(d, d),
            wv: LinearP::zeros(d, d),
            wo: LinearP::zeros(d, d),
            ln1: LayerNormP::zeros(d),
            ffn1: LinearP::zeros(d, 4 * d),
            ffn2: LinearP::zeros(4 * d, d),
            ln2: LayerNormP::zeros(d),
        };
        Ok(Self {
            config: config.clone(),
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_len, d)),
            blocks: (0..config.blocks).map(|_| block()).collect(),
            intersect: AttnPoolP {
                proj: LinearP::zeros(d, d),
                v: Array1::zeros(d),
            },
            union: MaxoutP {
                pieces: (0..config.maxout_pieces).map(|_| LinearP::zeros(d, d)).collect(),
            },
            classify: config.classify_entities.map(|n| LinearP::zeros(d, n)),
        })
    }

    /// Gradient or moment holder shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("existing config is valid")
    }

    /// Random initialization: weights from N(0, 0.02^2), biases zero, layer
    /// norm gains one. Maxout pieces start at identity plus the same noise,
    /// so an untrained union head passes branch signal through instead of
    /// scrambling it, which matters because union shapes are never trained.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = substream(seed, "model/init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let d = config.dim;
        let block = |rng: &mut _| BlockP {
            wq: LinearP::init(d, d, rng, &normal),
            wk: LinearP::init(d, d, rng, &normal),
            wv: LinearP::init(d, d, rng, &normal),
            wo: LinearP::init(d, d, rng, &normal),
            ln1: LayerNormP::ones(d),
            ffn1: LinearP::init(d, 4 * d, rng, &normal),
            ffn2: LinearP::init(4 * d, d, rng, &normal),
            ln2: LayerNormP::ones(d),
        };
        let blocks = (0..config.blocks).map(|_| block(&mut rng)).collect();
        let intersect = AttnPoolP {
            proj: LinearP::init(d, d, &mut rng, &normal),
            v: Array1::from_shape_fn(d, |_| F::from_f64(normal.sample(&mut rng))),
        };
        let union = MaxoutP {
            pieces: (0..config.maxout_pieces)
                .map(|_| {
                    let mut p = LinearP::init(d, d, &mut rng, &normal);
                    for i in 0..d {
                        p.w[(i, i)] = p.w[(i, i)] + F::one();
                    }
                    p
                })
                .collect(),
        };
        Ok(Self {
            config: config.clone(),
            tok_emb: Array2::from_shape_fn((config.vocab_size, d), |_| {
                F::from_f64(normal.sample(&mut rng))
            }),
            pos_emb: Array2::from_shape_fn((config.max_len, d), |_| {
                F::from_f64(normal.sample(&mut rng))
            }),
            blocks,
            intersect,
            union,
            classify: config
                .classify_entities
                .map(|n| LinearP::init(d, n, &mut rng, &normal)),
        })
    }

    /// Grow the token embedding to `new_vocab_size`; each new row starts at
    /// the mean of the existing rows, so unseen words begin as an average
    /// word rather than noise.
    pub fn extend_vocab(&mut self, new_vocab_size: usize) {
        let old = self.config.vocab_size;
        assert!(new_vocab_size >= old, "vocabulary cannot shrink");
        if new_vocab_size == old {
            return;
        }
        let mut mean = self.tok_emb.sum_axis(ndarray::Axis(0));
        mean.mapv_inplace(|v| v / F::from_f64(old as f64));
        let mut grown = Array2::zeros((new_vocab_size, self.config.dim));
        grown.slice_mut(ndarray::s![..old, ..]).assign(&self.tok_emb);
        for r in old..new_vocab_size {
            grown.row_mut(r).assign(&mean);
        }
        self.tok_emb = grown;
        self.config.vocab_size = new_vocab_size;
    }

    /// Every tensor as a flat slice, in the fixed enumeration order.
    pub fn flat_tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        out.push(self.tok_emb.as_slice_mut().expect("standard layout"));
        out.push(self.pos_emb.as_slice_mut().expect("standard layout"));
        for b in &mut self.blocks {
            for lin in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                out.push(lin.w.as_slice_mut().expect("standard layout"));
                out.push(lin.b.as_slice_mut().expect("standard layout"));
            }
            out.push(b.ln1.gamma.as_slice_mut().expect("standard layout"));
            out.push(b.ln1.beta.as_slice_mut().expect("standard layout"));
            for lin in [&mut b.ffn1, &mut b.ffn2] {
                out.push(lin.w.as_slice_mut().expect("standard layout"));
                out.push(lin.b.as_slice_mut().expect("standard layout"));
            }
            out.push(b.ln2.gamma.as_slice_mut().expect("standard layout"));
            out.push(b.ln2.beta.as_slice_mut().expect("standard layout"));
        }
        out.push(self.intersect.proj.w.as_slice_mut().expect("standard layout"));
        out.push(self.intersect.proj.b.as_slice_mut().expect("standard layout"));
        out.push(self.intersect.v.as_slice_mut().expect("standard layout"));
        for p in &mut self.union.pieces {
            out.push(p.w.as_slice_mut().expect("standard layout"));
            out.push(p.b.as_slice_mut().expect("standard layout"));
        }
        if let Some(c) = &mut self.classify {
            out.push(c.w.as_slice_mut().expect("standard layout"));
            out.push(c.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.flat_tensors_mut().iter().map(|t| t.len()).sum()
    }

    /// Reset every value to zero (gradient reuse between steps).
    pub fn zero_all(&mut self) {
        for t in self.flat_tensors_mut() {
            t.fill(F::zero());
        }
    }

    /// Cast every tensor (f32 checkpoints to f64 verification models and
    /// back).
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(&self.config).expect("same config");
        let mut src = self.clone();
        let from = src.flat_tensors_mut();
        let mut dst = out.flat_tensors_mut();
        assert_eq!(from.len(), dst.len());
        for (s, d) in from.iter().zip(dst.iter_mut()) {
            assert_eq!(s.len(), d.len());
            for (a, b) in s.iter().zip(d.iter_mut()) {
                *b = G::from_f64(Real::into_f64(*a));
            }
        }
        drop(dst);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            dim: 16,
            blocks: 1,
            heads: 4,
            max_len: 32,
            maxout_pieces: 2,
            vocab_size: 30,
            classify_entities: Some(7),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(ConfigError::HeadSplit { .. })));
        let mut c = small_config();
        c.blocks = 0;
        assert!(matches!(c.validate(), Err(ConfigError::Zero("blocks"))));
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let c = small_config();
        let mut a = ModelParams::<f32>::init(&c, 5).unwrap();
        let mut b = ModelParams::<f32>::init(&c, 5).unwrap();
        let (ta, tb) = (a.flat_tensors_mut(), b.flat_tensors_mut());
        for (x, y) in ta.iter().zip(tb.iter()) {
            assert_eq!(x, y);
        }
        let mut c2 = ModelParams::<f32>::init(&c, 6).unwrap();
        assert_ne!(a.flat_tensors_mut()[0], c2.flat_tensors_mut()[0]);
    }

    #[test]
    fn parameter_shapes_and_count() {
        let c = small_config();
        let mut p = ModelParams::<f32>::init(&c, 1).unwrap();
        assert_eq!(p.tok_emb.dim(), (30, 16));
        assert_eq!(p.pos_emb.dim(), (32, 16));
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.blocks[0].ffn1.w.dim(), (16, 64));
        assert_eq!(p.union.pieces.len(), 2);
        assert_eq!(p.classify.as_ref().unwrap().w.dim(), (16, 7));
        let expect = 30 * 16
            + 32 * 16
            + (4 * (16 * 16 + 16) + 2 * 16 + (16 * 64 + 64) + (64 * 16 + 16) + 2 * 16)
            + (16 * 16 + 16 + 16)
            + 2 * (16 * 16 + 16)
            + (16 * 7 + 7);
        assert_eq!(p.param_count(), expect);
    }

    #[test]
    fn zeros_like_matches_shapes() {
        let c = small_config();
        let mut p = ModelParams::<f64>::init(&c, 2).unwrap();
        let mut g = p.zeros_like();
        let (tp, tg) = (p.flat_tensors_mut(), g.flat_tensors_mut());
        assert_eq!(tp.len(), tg.len());
        for (a, b) in tp.iter().zip(tg.iter()) {
            assert_eq!(a.len(), b.len());
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn biases_start_at_zero_and_gains_at_one() {
        let c = small_config();
        let p = ModelParams::<f32>::init(&c, 3).unwrap();
        assert!(p.blocks[0].wq.b.iter().all(|&v| v == 0.0));
        assert!(p.blocks[0].ln1.gamma.iter().all(|&v| v == 1.0));
        assert!(p.blocks[0].ln2.beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxout_starts_near_identity() {
        let c = small_config();
        let p = ModelParams::<f32>::init(&c, 4).unwrap();
        for piece in &p.union.pieces {
            for i in 0..16 {
                for j in 0..16 {
                    let v = piece.w[(i, j)];
                    if i == j {
                        assert!((v - 1.0).abs() < 0.2, "diagonal {v}");
                    } else {
                        assert!(v.abs() < 0.2, "off-diagonal {v}");
                    }
                }
            }
            assert!(piece.b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn extend_vocab_keeps_rows_and_appends_mean() {
        let c = small_config();
        let mut p = ModelParams::<f32>::init(&c, 9).unwrap();
        let before = p.tok_emb.clone();
        let mean = p.tok_emb.mean_axis(ndarray::Axis(0)).unwrap();
        p.extend_vocab(34);
        assert_eq!(p.config.vocab_size, 34);
        assert_eq!(p.tok_emb.dim(), (34, 16));
        assert_eq!(p.tok_emb.slice(ndarray::s![..30, ..]), before);
        for r in 30..34 {
            for j in 0..16 {
                assert!((p.tok_emb[(r, j)] - mean[j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn cast_round_trips() {
        let c = small_config();
        let p = ModelParams::<f32>::init(&c, 8).unwrap();
        let mut back = p.cast::<f64>().cast::<f32>();
        let mut orig = p.clone();
        for (a, b) in orig
            .flat_tensors_mut()
            .iter()
            .zip(back.flat_tensors_mut().iter())
        {
            assert_eq!(a, b);
        }
    }
}
