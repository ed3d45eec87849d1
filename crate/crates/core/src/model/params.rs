use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::{ModelConfig, NormPlacement};
use crate::tokenizer::PAD;
use crate::{Error, Result};

/// Bottleneck adapter inserted after every self-attention and every
/// feed-forward sublayer: `z + up(relu(down(z)))`, with `up` zero-initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck_dim: usize,
}

/// Low-rank delta `(alpha / rank) · A·B` on the query and value projections of
/// every attention block; `B` starts at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Optional trainable add-ons used by the baseline fine-tuners.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Extensions {
    pub adapter: Option<AdapterConfig>,
    pub lora: Option<LoraConfig>,
}

impl Extensions {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if let Some(a) = self.adapter {
            if a.bottleneck_dim == 0 || a.bottleneck_dim >= d_model {
                return Err(Error::InvalidArgument(format!(
                    "adapter bottleneck {} must be in 1..{d_model}",
                    a.bottleneck_dim
                )));
            }
        }
        if let Some(l) = self.lora {
            if l.rank == 0 || l.rank >= d_model {
                return Err(Error::InvalidArgument(format!(
                    "lora rank {} must be in 1..{d_model}",
                    l.rank
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over `[vocab × d]`, PAD row zeroed.
    Embedding,
    /// Glorot uniform.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    /// Uniform(±1/sqrt(fan_in)).
    FanIn {
        fan_in: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LoraIdx {
    pub a: usize,
    pub b: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    pub lora_q: Option<LoraIdx>,
    pub lora_v: Option<LoraIdx>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AdapterIdx {
    pub down: LinearIdx,
    pub up: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIdx {
    pub attn: AttnIdx,
    pub attn_adapter: Option<AdapterIdx>,
    pub ln1: NormIdx,
    pub ffn: FfnIdx,
    pub ffn_adapter: Option<AdapterIdx>,
    pub ln2: NormIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIdx {
    pub self_attn: AttnIdx,
    pub self_adapter: Option<AdapterIdx>,
    pub ln1: NormIdx,
    pub cross_attn: AttnIdx,
    pub ln2: NormIdx,
    pub ffn: FfnIdx,
    pub ffn_adapter: Option<AdapterIdx>,
    pub ln3: NormIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub specs: Vec<TensorSpec>,
    pub embedding: usize,
    pub enc: Vec<EncLayerIdx>,
    pub dec: Vec<DecLayerIdx>,
    pub enc_final: Option<NormIdx>,
    pub dec_final: Option<NormIdx>,
    pub lora_scale: f64,
}

struct Builder {
    specs: Vec<TensorSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(TensorSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> LinearIdx {
        let w = self.add(
            format!("{prefix}.weight"),
            vec![din, dout],
            Init::Xavier {
                fan_in: din,
                fan_out: dout,
            },
        );
        let b = self.add(format!("{prefix}.bias"), vec![dout], Init::Zeros);
        LinearIdx { w, b, din, dout }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn lora(&mut self, prefix: &str, d: usize, cfg: &LoraConfig) -> LoraIdx {
        LoraIdx {
            a: self.add(format!("{prefix}.lora_a"), vec![d, cfg.rank], Init::FanIn { fan_in: d }),
            b: self.add(format!("{prefix}.lora_b"), vec![cfg.rank, d], Init::Zeros),
            rank: cfg.rank,
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, ext: &Extensions) -> AttnIdx {
        let q = self.linear(&format!("{prefix}.q"), d, d);
        let lora_q = ext.lora.map(|l| self.lora(&format!("{prefix}.q"), d, &l));
        let k = self.linear(&format!("{prefix}.k"), d, d);
        let v = self.linear(&format!("{prefix}.v"), d, d);
        let lora_v = ext.lora.map(|l| self.lora(&format!("{prefix}.v"), d, &l));
        let o = self.linear(&format!("{prefix}.o"), d, d);
        AttnIdx {
            q,
            k,
            v,
            o,
            lora_q,
            lora_v,
        }
    }

    fn adapter(&mut self, prefix: &str, d: usize, ext: &Extensions) -> Option<AdapterIdx> {
        ext.adapter.map(|a| {
            let down = self.linear(&format!("{prefix}.down"), d, a.bottleneck_dim);
            let up_w = self.add(format!("{prefix}.up.weight"), vec![a.bottleneck_dim, d], Init::Zeros);
            let up_b = self.add(format!("{prefix}.up.bias"), vec![d], Init::Zeros);
            AdapterIdx {
                down,
                up: LinearIdx {
                    w: up_w,
                    b: up_b,
                    din: a.bottleneck_dim,
                    dout: d,
                },
            }
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            fc1: self.linear(&format!("{prefix}.fc1"), d, f),
            fc2: self.linear(&format!("{prefix}.fc2"), f, d),
        }
    }
}

impl Layout {
    pub(crate) fn new(cfg: &ModelConfig, ext: &Extensions) -> Layout {
        let d = cfg.d_model;
        let mut b = Builder { specs: Vec::new() };
        let embedding = b.add("embed.weight".into(), vec![cfg.vocab_size, d], Init::Embedding);
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncLayerIdx {
                    attn: b.attn(&format!("{p}.self_attn"), d, ext),
                    attn_adapter: b.adapter(&format!("{p}.self_attn_adapter"), d, ext),
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ffn),
                    ffn_adapter: b.adapter(&format!("{p}.ffn_adapter"), d, ext),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                }
            })
            .collect();
        let enc_final = (cfg.norm == NormPlacement::Pre).then(|| b.norm("enc.final_ln", d));
        let dec = (0..cfg.dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayerIdx {
                    self_attn: b.attn(&format!("{p}.self_attn"), d, ext),
                    self_adapter: b.adapter(&format!("{p}.self_attn_adapter"), d, ext),
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    cross_attn: b.attn(&format!("{p}.cross_attn"), d, ext),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ffn),
                    ffn_adapter: b.adapter(&format!("{p}.ffn_adapter"), d, ext),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                }
            })
            .collect();
        let dec_final = (cfg.norm == NormPlacement::Pre).then(|| b.norm("dec.final_ln", d));
        Layout {
            specs: b.specs,
            embedding,
            enc,
            dec,
            enc_final,
            dec_final,
            lora_scale: ext.lora.map_or(0.0, |l| l.scale()),
        }
    }
}

/// Names and shapes of every tensor for a config, in storage order.
pub fn layout_specs(cfg: &ModelConfig, ext: &Extensions) -> Vec<TensorSpec> {
    Layout::new(cfg, ext).specs
}

/// Closed-form parameter count of the base model (no extensions).
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let norm = 2 * d;
    let enc = cfg.enc_layers * (attn + ffn + 2 * norm);
    let dec = cfg.dec_layers * (2 * attn + ffn + 3 * norm);
    let finals = if cfg.norm == NormPlacement::Pre { 2 * norm } else { 0 };
    cfg.vocab_size * d + enc + dec + finals
}

impl Extensions {
    /// Closed-form count of the extension tensors alone.
    pub fn count(&self, cfg: &ModelConfig) -> usize {
        let d = cfg.d_model;
        let adapters_per_stack = cfg.enc_layers * 2 + cfg.dec_layers * 2;
        let attention_blocks = cfg.enc_layers + cfg.dec_layers * 2;
        let adapter = self.adapter.map_or(0, |a| {
            adapters_per_stack * (d * a.bottleneck_dim + a.bottleneck_dim + a.bottleneck_dim * d + d)
        });
        let lora = self
            .lora
            .map_or(0, |l| attention_blocks * 2 * (d * l.rank + l.rank * d));
        adapter + lora
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Named tensors of a model, in layout order.
#[derive(Debug, Clone)]
pub struct Parameters<F> {
    pub config: ModelConfig,
    pub ext: Extensions,
    pub tensors: Vec<Tensor<F>>,
    pub(crate) layout: Layout,
}

impl<F: PartialEq> PartialEq for Parameters<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.ext == other.ext && self.tensors == other.tensors
    }
}

/// Gradient buffers aligned with [`Parameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub tensors: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(params: &Parameters<F>) -> Self {
        Gradients {
            tensors: params.tensors.iter().map(|t| vec![F::zero(); t.data.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
}

fn sample_init<R: Rng>(rng: &mut R, init: Init, shape: &[usize], d_model: usize) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let uniform = |rng: &mut R, bound: f64| -> f64 { rng.gen_range(-bound..=bound) };
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Embedding => {
            let bound = libm_sqrt(6.0 / (shape[0] + d_model) as f64);
            let mut v: Vec<f64> = (0..n).map(|_| uniform(rng, bound)).collect();
            v[PAD as usize * d_model..(PAD as usize + 1) * d_model].fill(0.0);
            v
        }
        Init::Xavier { fan_in, fan_out } => {
            let bound = libm_sqrt(6.0 / (fan_in + fan_out) as f64);
            (0..n).map(|_| uniform(rng, bound)).collect()
        }
        Init::FanIn { fan_in } => {
            let bound = 1.0 / libm_sqrt(fan_in as f64);
            (0..n).map(|_| uniform(rng, bound)).collect()
        }
    }
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

/// Seeded initialization. Values are drawn in f64 and rounded, so f32 and
/// f64 models from the same seed agree to f32 precision.
pub fn init_params<F: Scalar>(config: &ModelConfig) -> Result<Parameters<F>> {
    init_with_extensions(config, &Extensions::default())
}

pub(crate) fn init_with_extensions<F: Scalar>(config: &ModelConfig, ext: &Extensions) -> Result<Parameters<F>> {
    config.validate()?;
    ext.validate(config.d_model)?;
    let layout = Layout::new(config, ext);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tensors = layout
        .specs
        .iter()
        .map(|s| Tensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            data: sample_init(&mut rng, s.init, &s.shape, config.d_model)
                .into_iter()
                .map(F::of)
                .collect(),
        })
        .collect();
    Ok(Parameters {
        config: config.clone(),
        ext: *ext,
        tensors,
        layout,
    })
}

impl<F: Scalar> Parameters<F> {
    /// Assembles parameters from raw tensors, checking names and shapes
    /// against the layout for `config` and `ext`.
    pub fn from_tensors(config: ModelConfig, ext: Extensions, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        ext.validate(config.d_model)?;
        let layout = Layout::new(&config, &ext);
        if layout.specs.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in layout.specs.iter().zip(&tensors) {
            if s.name != t.name || s.shape != t.shape || s.numel() != t.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{}` does not match layout `{}`",
                    t.name, s.name
                )));
            }
        }
        Ok(Parameters {
            config,
            ext,
            tensors,
            layout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn embedding_index(&self) -> usize {
        self.layout.embedding
    }

    pub fn embedding_row(&self, id: u32) -> &[F] {
        let d = self.config.d_model;
        &self.tensors[self.layout.embedding].data[id as usize * d..(id as usize + 1) * d]
    }

    pub fn embedding_row_mut(&mut self, id: u32) -> &mut [F] {
        let d = self.config.d_model;
        &mut self.tensors[self.layout.embedding].data[id as usize * d..(id as usize + 1) * d]
    }

    /// Returns a copy carrying freshly initialized extension tensors (seeded
    /// by `seed`); every base tensor is copied over unchanged.
    pub fn with_extensions(&self, ext: Extensions, seed: u64) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.seed = seed;
        let mut out = init_with_extensions::<F>(&cfg, &ext)?;
        out.config.seed = self.config.seed;
        for t in &mut out.tensors {
            if let Some(src) = self.tensor(&t.name) {
                t.data.clone_from(&src.data);
            }
        }
        Ok(out)
    }

    /// Folds LoRA deltas into the query/value weights and drops the LoRA
    /// tensors. Adapters are kept.
    pub fn merge_lora(&self) -> Result<Self> {
        let Some(lora) = self.ext.lora else {
            return Ok(self.clone());
        };
        let d = self.config.d_model;
        let scale = F::of(lora.scale());
        let mut merged = self.clone();
        let mut pairs = Vec::new();
        for l in &self.layout.enc {
            pairs.push(l.attn);
        }
        for l in &self.layout.dec {
            pairs.push(l.self_attn);
            pairs.push(l.cross_attn);
        }
        for attn in pairs {
            for (lin, lo) in [(attn.q, attn.lora_q), (attn.v, attn.lora_v)] {
                let lo = lo.expect("lora layout");
                let a = &self.tensors[lo.a].data;
                let b = &self.tensors[lo.b].data;
                let w = &mut merged.tensors[lin.w].data;
                for i in 0..d {
                    for r in 0..lo.rank {
                        let air = a[i * lo.rank + r] * scale;
                        super::ops::axpy(air, &b[r * d..(r + 1) * d], &mut w[i * d..(i + 1) * d]);
                    }
                }
            }
        }
        let ext = Extensions { lora: None, ..self.ext };
        let tensors = merged
            .tensors
            .into_iter()
            .filter(|t| !t.name.ends_with(".lora_a") && !t.name.ends_with(".lora_b"))
            .collect();
        Parameters::from_tensors(self.config.clone(), ext, tensors)
    }

    /// Converts every tensor to another precision.
    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            config: self.config.clone(),
            ext: self.ext,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| G::of(x.as_f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Number of coordinates that differ bit-wise from `other`.
    pub fn diff_count(&self, other: &Parameters<F>) -> usize {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .filter(|(x, y)| x.as_f64().to_bits() != y.as_f64().to_bits())
                    .count()
            })
            .sum()
    }
}
