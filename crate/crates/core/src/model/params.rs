use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{ModelConfig, ModelError};
use super::Scalar;

/// A named row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Tensor {
            name: name.into(),
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// All trainable tensors of a model, in a fixed order determined by the config.
/// Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.rows, t.cols))
                .collect(),
        }
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Reads the scalar at flat position `i` across all tensors.
    pub fn flat(&self, mut i: usize) -> F {
        for t in &self.tensors {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_mut(&mut self, mut i: usize) -> &mut F {
        for t in &mut self.tensors {
            if i < t.data.len() {
                return &mut t.data[i];
            }
            i -= t.data.len();
        }
        panic!("flat index out of range")
    }

    /// Name of the tensor holding flat position `i`.
    pub fn flat_name(&self, mut i: usize) -> &str {
        for t in &self.tensors {
            if i < t.data.len() {
                return &t.name;
            }
            i -= t.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x.f64() * x.f64())
            .sum()
    }

    /// Converts to another precision.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data.iter().map(|x| G::of(x.f64())).collect(),
                })
                .collect(),
        }
    }

    /// Checks names and shapes against another parameter set.
    pub fn check_same_layout(&self, other: &Self) -> Result<(), ModelError> {
        if self.tensors.len() != other.tensors.len() {
            return Err(ModelError::Config(format!(
                "tensor count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name {
                return Err(ModelError::MissingParam(a.name.clone()));
            }
            if a.shape() != b.shape() {
                return Err(ModelError::ShapeMismatch {
                    name: a.name.clone(),
                    expected: a.shape(),
                    got: b.shape(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross: AttnIdx,
    pub ln3: LnIdx,
    pub ffn: FfnIdx,
}

/// Tensor positions inside [`ModelParams`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub enc_embed: usize,
    pub dec_embed: usize,
    pub enc_layers: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub dec_layers: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub out_proj: Option<usize>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Xavier,
}

struct Builder<'a, F> {
    tensors: Vec<Tensor<F>>,
    rng: &'a mut ChaCha8Rng,
}

impl<F: Scalar> Builder<'_, F> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let n = rows * cols;
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| F::of(d.sample(self.rng))).collect()
            }
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let d = Uniform::new_inclusive(-a, a).expect("valid range");
                (0..n).map(|_| F::of(d.sample(self.rng))).collect()
            }
        };
        self.tensors.push(Tensor {
            name,
            rows,
            cols,
            data,
        });
        self.tensors.len() - 1
    }

    fn ln(&mut self, p: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{p}.g"), 1, d, Init::Ones),
            b: self.add(format!("{p}.b"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.add(format!("{p}.wq"), d, d, Init::Xavier),
            bq: self.add(format!("{p}.bq"), 1, d, Init::Zeros),
            wk: self.add(format!("{p}.wk"), d, d, Init::Xavier),
            bk: self.add(format!("{p}.bk"), 1, d, Init::Zeros),
            wv: self.add(format!("{p}.wv"), d, d, Init::Xavier),
            bv: self.add(format!("{p}.bv"), 1, d, Init::Zeros),
            wo: self.add(format!("{p}.wo"), d, d, Init::Xavier),
            bo: self.add(format!("{p}.bo"), 1, d, Init::Zeros),
        }
    }

    fn ffn(&mut self, p: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{p}.w1"), d, f, Init::Xavier),
            b1: self.add(format!("{p}.b1"), 1, f, Init::Zeros),
            w2: self.add(format!("{p}.w2"), f, d, Init::Xavier),
            b2: self.add(format!("{p}.b2"), 1, d, Init::Zeros),
        }
    }
}

/// Creates freshly initialized parameters and their layout.
pub(crate) fn init_params<F: Scalar>(cfg: &ModelConfig) -> (ModelParams<F>, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // burn one draw so different seeds diverge immediately
    let _: u64 = rng.random();
    let (d, f, v) = (cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size);
    let emb_std = (d as f64).powf(-0.5);
    let mut b = Builder {
        tensors: Vec::new(),
        rng: &mut rng,
    };
    let enc_embed = b.add("enc.embed".into(), v, d, Init::Normal(emb_std));
    let dec_embed = b.add("dec.embed".into(), v, d, Init::Normal(emb_std));
    let enc_layers = (0..cfg.layers)
        .map(|l| {
            let p = format!("enc.{l}");
            EncLayerIdx {
                ln1: b.ln(&format!("{p}.ln1"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                ln2: b.ln(&format!("{p}.ln2"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, f),
            }
        })
        .collect();
    let enc_ln = b.ln("enc.ln", d);
    let dec_layers = (0..cfg.layers)
        .map(|l| {
            let p = format!("dec.{l}");
            DecLayerIdx {
                ln1: b.ln(&format!("{p}.ln1"), d),
                self_attn: b.attn(&format!("{p}.self"), d),
                ln2: b.ln(&format!("{p}.ln2"), d),
                cross: b.attn(&format!("{p}.cross"), d),
                ln3: b.ln(&format!("{p}.ln3"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, f),
            }
        })
        .collect();
    let dec_ln = b.ln("dec.ln", d);
    let out_proj = (!cfg.tie_output).then(|| b.add("out.proj".into(), d, v, Init::Normal(emb_std)));
    let params = ModelParams { tensors: b.tensors };
    let layout = Layout {
        enc_embed,
        dec_embed,
        enc_layers,
        enc_ln,
        dec_layers,
        dec_ln,
        out_proj,
    };
    (params, layout)
}
