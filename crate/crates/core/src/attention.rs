//! Reference attention and LoRA forward passes.
//!
//! These are the ground-truth functions that equivalence checks compare.
//! Activations are `n_tokens × d_model` row-major matrices and every
//! projection is applied as `x · W`, so `W_q` is `d_model × (n_q_heads·head_dim)`.
//! Head `h` owns the contiguous column block `[h·head_dim, (h+1)·head_dim)`
//! and query head `h` reads key/value head `h / g`.

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul, matmul_transposed, row_softmax, Matrix, TensorError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("{tensor} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        tensor: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Geometry of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLayout {
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    #[serde(default)]
    pub has_bias: bool,
    /// Lower-triangular masking. Equivalence holds with or without it.
    #[serde(default)]
    pub causal: bool,
}

impl AttentionLayout {
    pub fn new(d_model: usize, n_q_heads: usize, n_kv_heads: usize, head_dim: usize) -> Result<Self> {
        let layout = Self {
            d_model,
            n_q_heads,
            n_kv_heads,
            head_dim,
            has_bias: false,
            causal: false,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn mha(d_model: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        Self::new(d_model, n_heads, n_heads, head_dim)
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.head_dim == 0 || self.n_q_heads == 0 || self.n_kv_heads == 0 {
            return Err(ModelError::Layout(format!("all dimensions must be non-zero: {self:?}")));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(ModelError::Layout(format!(
                "n_q_heads {} is not a multiple of n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads per key/value head; 1 for MHA.
    pub fn group_factor(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn q_width(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }
}

/// Projection weights of one attention block. Biases are `1 × width` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub b_q: Option<Matrix>,
    pub b_k: Option<Matrix>,
    pub b_v: Option<Matrix>,
    pub b_o: Option<Matrix>,
}

impl AttentionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix) -> Self {
        Self {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: None,
            b_k: None,
            b_v: None,
            b_o: None,
        }
    }

    /// Checks every tensor against the layout's geometry.
    pub fn check(&self, layout: &AttentionLayout) -> Result<()> {
        layout.validate()?;
        let d = layout.d_model;
        let expect = |tensor, m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(ModelError::TensorShape {
                    tensor,
                    expected: shape,
                    found: m.shape(),
                })
            }
        };
        expect("w_q", &self.w_q, (d, layout.q_width()))?;
        expect("w_k", &self.w_k, (d, layout.kv_width()))?;
        expect("w_v", &self.w_v, (d, layout.kv_width()))?;
        expect("w_o", &self.w_o, (layout.q_width(), d))?;
        let biases = [
            ("b_q", &self.b_q, layout.q_width()),
            ("b_k", &self.b_k, layout.kv_width()),
            ("b_v", &self.b_v, layout.kv_width()),
            ("b_o", &self.b_o, d),
        ];
        for (name, bias, width) in biases {
            if let Some(b) = bias {
                expect(name, b, (1, width))?;
            }
        }
        Ok(())
    }
}

/// Low-rank adapter `ΔW = A·B` with `A: m × r`, `B: r × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let pair = Self { a, b };
        pair.check()?;
        Ok(pair)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn check(&self) -> Result<()> {
        if self.a.cols() != self.b.rows() {
            return Err(ModelError::TensorShape {
                tensor: "lora_b",
                expected: (self.a.cols(), self.b.cols()),
                found: self.b.shape(),
            });
        }
        if self.rank() > self.a.rows().min(self.b.cols()) {
            return Err(ModelError::Layout(format!(
                "rank {} exceeds min({}, {})",
                self.rank(),
                self.a.rows(),
                self.b.cols()
            )));
        }
        Ok(())
    }

    pub fn delta(&self) -> Result<Matrix> {
        Ok(matmul(&self.a, &self.b)?)
    }
}

fn project(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Result<Matrix> {
    let y = matmul(x, w)?;
    Ok(match b {
        Some(b) => y.add_row_broadcast(b)?,
        None => y,
    })
}

/// Multi-head attention; requires `n_q_heads == n_kv_heads`.
pub fn mha_forward(x: &Matrix, w: &AttentionWeights, layout: &AttentionLayout) -> Result<Matrix> {
    if layout.group_factor() != 1 {
        return Err(ModelError::Layout(format!(
            "mha_forward needs g == 1, layout has g == {}",
            layout.group_factor()
        )));
    }
    gqa_forward(x, w, layout)
}

/// Grouped-query attention. With `g == 1` this is plain multi-head attention.
pub fn gqa_forward(x: &Matrix, w: &AttentionWeights, layout: &AttentionLayout) -> Result<Matrix> {
    w.check(layout)?;
    if x.cols() != layout.d_model {
        return Err(ModelError::TensorShape {
            tensor: "x",
            expected: (x.rows(), layout.d_model),
            found: x.shape(),
        });
    }
    let hd = layout.head_dim;
    let g = layout.group_factor();
    let scale = 1.0 / (hd as f64).sqrt();

    let q = project(x, &w.w_q, w.b_q.as_ref())?;
    let k = project(x, &w.w_k, w.b_k.as_ref())?;
    let v = project(x, &w.w_v, w.b_v.as_ref())?;

    let k_heads = (0..layout.n_kv_heads)
        .map(|h| k.column_block(h * hd, hd))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let v_heads = (0..layout.n_kv_heads)
        .map(|h| v.column_block(h * hd, hd))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let mut heads = Vec::with_capacity(layout.n_q_heads);
    for h in 0..layout.n_q_heads {
        let kv = h / g;
        let q_h = q.column_block(h * hd, hd)?;
        let mut scores = matmul_transposed(&q_h, &k_heads[kv])?.scale(scale);
        if layout.causal {
            for i in 0..scores.rows() {
                for j in i + 1..scores.cols() {
                    scores.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        let probs = row_softmax(&scores);
        heads.push(matmul(&probs, &v_heads[kv])?);
    }
    let concat = Matrix::hcat(&heads.iter().collect::<Vec<_>>())?;
    project(&concat, &w.w_o, w.b_o.as_ref())
}

/// `x · (W + A·B)`.
pub fn lora_forward(x: &Matrix, w: &Matrix, p: &LoraPair) -> Result<Matrix> {
    p.check()?;
    let merged = w.add(&p.delta()?)?;
    Ok(matmul(x, &merged)?)
}

/// Reorders key/value groups (and their query heads and `W_o` rows) by `perm`.
///
/// Output of the block is unchanged; this is a second, simpler family of
/// equivalent models used to cross-check the verifier.
pub fn permute_groups(w: &AttentionWeights, layout: &AttentionLayout, perm: &[usize]) -> Result<AttentionWeights> {
    w.check(layout)?;
    let n = layout.n_kv_heads;
    let mut seen = vec![false; n];
    if perm.len() != n || !perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true)) {
        return Err(ModelError::Layout(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    let hd = layout.head_dim;
    let qw = layout.group_factor() * hd;
    let cols = |m: &Matrix, width: usize| -> Result<Matrix> {
        let blocks = perm
            .iter()
            .map(|&p| m.column_block(p * width, width))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Matrix::hcat(&blocks.iter().collect::<Vec<_>>())?)
    };
    let rows_o = {
        let blocks = perm
            .iter()
            .map(|&p| w.w_o.row_block(p * qw, qw).map(|b| b.transpose()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Matrix::hcat(&blocks.iter().collect::<Vec<_>>())?.transpose()
    };
    Ok(AttentionWeights {
        w_q: cols(&w.w_q, qw)?,
        w_k: cols(&w.w_k, hd)?,
        w_v: cols(&w.w_v, hd)?,
        w_o: rows_o,
        b_q: w.b_q.as_ref().map(|b| cols(b, qw)).transpose()?,
        b_k: w.b_k.as_ref().map(|b| cols(b, hd)).transpose()?,
        b_v: w.b_v.as_ref().map(|b| cols(b, hd)).transpose()?,
        b_o: w.b_o.clone(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gaussian_fill;

    pub(crate) fn random_weights(layout: &AttentionLayout, rng: &mut Rng) -> AttentionWeights {
        let d = layout.d_model;
        let mut w = AttentionWeights::new(
            gaussian_fill(d, layout.q_width(), 0.5, rng).unwrap(),
            gaussian_fill(d, layout.kv_width(), 0.5, rng).unwrap(),
            gaussian_fill(d, layout.kv_width(), 0.5, rng).unwrap(),
            gaussian_fill(layout.q_width(), d, 0.5, rng).unwrap(),
        );
        if layout.has_bias {
            w.b_q = Some(gaussian_fill(1, layout.q_width(), 0.1, rng).unwrap());
            w.b_k = Some(gaussian_fill(1, layout.kv_width(), 0.1, rng).unwrap());
            w.b_v = Some(gaussian_fill(1, layout.kv_width(), 0.1, rng).unwrap());
            w.b_o = Some(gaussian_fill(1, d, 0.1, rng).unwrap());
        }
        w
    }

    /// Scalar-loop attention written independently of `gqa_forward`.
    fn naive_attention(x: &Matrix, w: &AttentionWeights, l: &AttentionLayout) -> Matrix {
        let n = x.rows();
        let hd = l.head_dim;
        let g = l.group_factor();
        let bias = |b: &Option<Matrix>, j: usize| b.as_ref().map_or(0.0, |b| b.get(0, j));
        let proj = |wm: &Matrix, b: &Option<Matrix>, t: usize, j: usize| {
            (0..l.d_model).map(|i| x.get(t, i) * wm.get(i, j)).sum::<f64>() + bias(b, j)
        };
        let mut concat = vec![vec![0.0; l.q_width()]; n];
        for h in 0..l.n_q_heads {
            let kv = h / g;
            for t in 0..n {
                let mut logits = vec![0.0; n];
                for (s, logit) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += proj(&w.w_q, &w.b_q, t, h * hd + c) * proj(&w.w_k, &w.b_k, s, kv * hd + c);
                    }
                    *logit = dot / (hd as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    concat[t][h * hd + c] =
                        (0..n).map(|s| e[s] / z * proj(&w.w_v, &w.b_v, s, kv * hd + c)).sum();
                }
            }
        }
        let mut out = Matrix::zeros(n, l.d_model);
        for t in 0..n {
            for j in 0..l.d_model {
                let v: f64 = (0..l.q_width()).map(|i| concat[t][i] * w.w_o.get(i, j)).sum();
                out.set(t, j, v + bias(&w.b_o, j));
            }
        }
        out
    }

    #[test]
    fn single_token_skips_softmax() {
        let mut rng = Rng::new(5);
        let l = AttentionLayout::mha(8, 2, 4).unwrap().with_bias(true);
        let w = random_weights(&l, &mut rng);
        let x = gaussian_fill(1, 8, 1.0, &mut rng).unwrap();
        let out = mha_forward(&x, &w, &l).unwrap();
        let v = project(&x, &w.w_v, w.b_v.as_ref()).unwrap();
        let expect = project(&v, &w.w_o, w.b_o.as_ref()).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut rng = Rng::new(6);
        let l = AttentionLayout::mha(6, 3, 2).unwrap();
        let mut w = random_weights(&l, &mut rng);
        w.w_q = Matrix::zeros(6, 6);
        w.w_k = Matrix::zeros(6, 6);
        let x = gaussian_fill(5, 6, 1.0, &mut rng).unwrap();
        // Uniform weights 1/n: every output row is the mean value row through W_o.
        let v = matmul(&x, &w.w_v).unwrap();
        let mut mean = Matrix::zeros(1, 6);
        for t in 0..5 {
            for c in 0..6 {
                mean.set(0, c, mean.get(0, c) + v.get(t, c) / 5.0);
            }
        }
        let expect = matmul(&mean, &w.w_o).unwrap();
        let out = mha_forward(&x, &w, &l).unwrap();
        for t in 0..5 {
            for c in 0..6 {
                assert!((out.get(t, c) - expect.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_matches_naive_oracle() {
        let mut rng = Rng::new(7);
        for bias in [false, true] {
            let l = AttentionLayout::mha(8, 2, 4).unwrap().with_bias(bias);
            let w = random_weights(&l, &mut rng);
            let x = gaussian_fill(4, 8, 1.0, &mut rng).unwrap();
            let diff = mha_forward(&x, &w, &l)
                .unwrap()
                .max_abs_diff(&naive_attention(&x, &w, &l))
                .unwrap();
            assert!(diff < 1e-12, "{diff}");
        }
    }

    #[test]
    fn gqa_matches_naive_oracle() {
        let mut rng = Rng::new(8);
        let l = AttentionLayout::new(12, 6, 2, 3).unwrap().with_bias(true);
        let w = random_weights(&l, &mut rng);
        let x = gaussian_fill(5, 12, 1.0, &mut rng).unwrap();
        let diff = gqa_forward(&x, &w, &l)
            .unwrap()
            .max_abs_diff(&naive_attention(&x, &w, &l))
            .unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn gqa_with_g1_is_mha() {
        let mut rng = Rng::new(9);
        let l = AttentionLayout::mha(8, 4, 2).unwrap();
        let w = random_weights(&l, &mut rng);
        let x = gaussian_fill(6, 8, 1.0, &mut rng).unwrap();
        assert_eq!(gqa_forward(&x, &w, &l).unwrap(), mha_forward(&x, &w, &l).unwrap());
    }

    #[test]
    fn gqa_equals_mha_with_duplicated_kv_heads() {
        let mut rng = Rng::new(10);
        let l = AttentionLayout::new(8, 4, 2, 2).unwrap();
        let w = random_weights(&l, &mut rng);
        let dup = |m: &Matrix| {
            let blocks: Vec<Matrix> = (0..4).map(|h| m.column_block((h / 2) * 2, 2).unwrap()).collect();
            Matrix::hcat(&blocks.iter().collect::<Vec<_>>()).unwrap()
        };
        let mha_w = AttentionWeights::new(w.w_q.clone(), dup(&w.w_k), dup(&w.w_v), w.w_o.clone());
        let mha_l = AttentionLayout::mha(8, 4, 2).unwrap();
        let x = gaussian_fill(5, 8, 1.0, &mut rng).unwrap();
        let a = gqa_forward(&x, &w, &l).unwrap();
        let b = mha_forward(&x, &mha_w, &mha_l).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);

        let x1 = gaussian_fill(1, 8, 1.0, &mut rng).unwrap();
        let single = gqa_forward(&x1, &w, &l).unwrap();
        let expect = matmul(&matmul(&x1, &dup(&w.w_v)).unwrap(), &w.w_o).unwrap();
        assert!(single.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn group_permutation_preserves_output() {
        let mut rng = Rng::new(11);
        for (nq, nkv) in [(3, 3), (6, 3)] {
            let l = AttentionLayout::new(9, nq, nkv, 3).unwrap().with_bias(true);
            let w = random_weights(&l, &mut rng);
            let p = permute_groups(&w, &l, &[2, 0, 1]).unwrap();
            let x = gaussian_fill(4, 9, 1.0, &mut rng).unwrap();
            let a = gqa_forward(&x, &w, &l).unwrap();
            let b = gqa_forward(&x, &p, &l).unwrap();
            assert!(a.max_rel_diff(&b).unwrap() < 1e-12);
        }
        let l = AttentionLayout::mha(4, 2, 2).unwrap();
        let w = random_weights(&l, &mut rng);
        assert!(permute_groups(&w, &l, &[0, 0]).is_err());
    }

    #[test]
    fn causal_rows_sum_to_one() {
        let mut rng = Rng::new(12);
        let l = AttentionLayout::mha(4, 1, 4).unwrap().with_causal(true);
        let mut w = random_weights(&l, &mut rng);
        // Identity V/O exposes the attention probabilities of the single head
        // when the tokens are one-hot.
        w.w_v = Matrix::identity(4);
        w.w_o = Matrix::identity(4);
        let x = Matrix::identity(4);
        let out = mha_forward(&x, &w, &l).unwrap();
        for t in 0..4 {
            let s: f64 = out.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(out.row(t)[t + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = Rng::new(13);
        let l = AttentionLayout::mha(8, 2, 4).unwrap();
        let w = random_weights(&l, &mut rng);
        let x = gaussian_fill(3, 7, 1.0, &mut rng).unwrap();
        assert!(matches!(mha_forward(&x, &w, &l), Err(ModelError::TensorShape { tensor: "x", .. })));
        let bad = AttentionLayout::mha(8, 4, 4).unwrap();
        assert!(matches!(mha_forward(&x, &w, &bad), Err(ModelError::TensorShape { .. })));
        assert!(AttentionLayout::new(8, 3, 2, 4).is_err());
        let gqa = AttentionLayout::new(8, 4, 2, 2).unwrap();
        assert!(matches!(mha_forward(&x, &w, &gqa), Err(ModelError::Layout(_))));
    }

    #[test]
    fn lora_examples() {
        let mut rng = Rng::new(14);
        let w = gaussian_fill(8, 6, 1.0, &mut rng).unwrap();
        let x = gaussian_fill(5, 8, 1.0, &mut rng).unwrap();

        let zero_b = LoraPair::new(gaussian_fill(8, 2, 1.0, &mut rng).unwrap(), Matrix::zeros(2, 6)).unwrap();
        assert_eq!(lora_forward(&x, &w, &zero_b).unwrap(), matmul(&x, &w).unwrap());

        let ident = LoraPair::new(Matrix::identity(4), Matrix::identity(4)).unwrap();
        let x4 = gaussian_fill(3, 4, 1.0, &mut rng).unwrap();
        assert_eq!(lora_forward(&x4, &Matrix::zeros(4, 4), &ident).unwrap(), x4);

        let p = LoraPair::new(
            gaussian_fill(8, 2, 1.0, &mut rng).unwrap(),
            gaussian_fill(2, 6, 1.0, &mut rng).unwrap(),
        )
        .unwrap();
        let merged = w.add(&matmul(&p.a, &p.b).unwrap()).unwrap();
        let diff = lora_forward(&x, &w, &p)
            .unwrap()
            .max_abs_diff(&matmul(&x, &merged).unwrap())
            .unwrap();
        assert!(diff < 1e-12);

        assert!(LoraPair::new(Matrix::zeros(2, 3), Matrix::zeros(3, 2)).is_err());
        assert!(LoraPair::new(Matrix::zeros(4, 2), Matrix::zeros(3, 4)).is_err());
    }
}
