use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, GroupNormCache, Tensor};
use super::{Arm, Real, UNetConfig};
use crate::error::{Error, Result};
use crate::preprocess::ModelInput;
use crate::seed;
use crate::volume::{Dims, KernelSpec, VoxelGrid};

/// One step of the network program. Parameter fields index into
/// [`ModelParameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv { k: usize, cout: usize, w: usize, b: usize },
    Relu,
    Norm { groups: usize, scale: usize, shift: usize },
    Dropout { p: f64 },
    Pool,
    Up { cout: usize, w: usize, b: usize },
    /// Pushes the current activation onto the skip stack.
    Save,
    /// Pops the skip stack and appends it after the current channels.
    Concat { first: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn program(config: &UNetConfig) -> Result<(Vec<Op>, Vec<Spec>)> {
    config.validate()?;
    let mut ops = Vec::new();
    let mut specs: Vec<Spec> = Vec::new();
    let add = |specs: &mut Vec<Spec>, name: String, shape: Vec<usize>, init| {
        specs.push(Spec { name, shape, init });
        specs.len() - 1
    };
    let block = |ops: &mut Vec<Op>, specs: &mut Vec<Spec>, prefix: &str, j: usize, cin: usize, cout: usize| {
        let w = add(specs, format!("{prefix}/conv{j}/w"), vec![3, 3, 3, cin, cout], Init::HeUniform { fan_in: 27 * cin });
        let b = add(specs, format!("{prefix}/conv{j}/b"), vec![cout], Init::Zeros);
        let scale = add(specs, format!("{prefix}/norm{j}/scale"), vec![cout], Init::Ones);
        let shift = add(specs, format!("{prefix}/norm{j}/shift"), vec![cout], Init::Zeros);
        ops.push(Op::Conv { k: 3, cout, w, b });
        ops.push(Op::Relu);
        ops.push(Op::Norm {
            groups: layers::groupnorm_groups(config.groupnorm_groups, cout),
            scale,
            shift,
        });
        ops.push(Op::Dropout {
            p: config.dropout_at(cout),
        });
    };
    let mut cin = config.in_channels;
    for l in 1..=config.pools + 1 {
        let f = config.filters_at(l, Arm::Down)?;
        let prefix = format!("encoder/L{l}");
        for j in 1..=2 {
            block(&mut ops, &mut specs, &prefix, j, cin, f);
            cin = f;
        }
        if l <= config.pools {
            ops.push(Op::Save);
            ops.push(Op::Pool);
        }
    }
    for l in (1..=config.pools).rev() {
        let f = config.filters_at(l, Arm::Up)?;
        let prefix = format!("decoder/L{l}");
        let w = add(&mut specs, format!("{prefix}/up/w"), vec![2, 2, 2, cin, f], Init::HeUniform { fan_in: 8 * cin });
        let b = add(&mut specs, format!("{prefix}/up/b"), vec![f], Init::Zeros);
        ops.push(Op::Up { cout: f, w, b });
        ops.push(Op::Concat { first: f });
        cin = 2 * f;
        for j in 1..=2 {
            block(&mut ops, &mut specs, &prefix, j, cin, f);
            cin = f;
        }
    }
    let out = config.out_channels;
    let w = add(&mut specs, "head/w".into(), vec![1, 1, 1, cin, out], Init::HeUniform { fan_in: cin });
    let b = add(&mut specs, "head/b".into(), vec![out], Init::Zeros);
    ops.push(Op::Conv { k: 1, cout: out, w, b });
    Ok((ops, specs))
}

/// The op sequence for `config`.
pub fn architecture(config: &UNetConfig) -> Result<Vec<Op>> {
    Ok(program(config)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named trainable tensors of one UNet plus the configuration and kernel
/// they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    pub config: UNetConfig,
    pub kernel: KernelSpec,
    pub tensors: Vec<ParamTensor<T>>,
    ops: Vec<Op>,
}

impl<T: Real> ModelParameters<T> {
    /// Rebuilds from stored tensors, checking names and shapes against the
    /// architecture of `config`.
    pub fn from_tensors(config: UNetConfig, kernel: KernelSpec, tensors: Vec<ParamTensor<T>>) -> Result<Self> {
        kernel.validate(config.pools)?;
        let (ops, specs) = program(&config)?;
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            let n: usize = t.shape.iter().product();
            if s.name != t.name || s.shape != t.shape || n != t.data.len() {
                return Err(Error::Shape(format!("parameter `{}` does not match `{}` {:?}", t.name, s.name, s.shape)));
            }
        }
        Ok(Self {
            config,
            kernel,
            tensors,
            ops,
        })
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config,
            kernel: self.kernel,
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::of(v.f64())).collect(),
                })
                .collect(),
            ops: self.ops.clone(),
        }
    }
}

/// Parameter count of `config` without allocating weights.
pub fn parameter_count(config: &UNetConfig) -> Result<usize> {
    Ok(program(config)?.1.iter().map(|s| s.shape.iter().product::<usize>()).sum())
}

/// He-uniform weights drawn in declaration order from `init_seed`, zero
/// biases and shifts, unit GroupNorm scales.
pub fn build_unet<T: Real>(config: &UNetConfig, kernel: KernelSpec, init_seed: u64) -> Result<ModelParameters<T>> {
    kernel.validate(config.pools)?;
    let (ops, specs) = program(config)?;
    let mut rng = seed::rng(init_seed);
    let tensors = specs
        .into_iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::HeUniform { fan_in } => {
                    let limit = libm::sqrt(6.0 / fan_in as f64);
                    (0..n).map(|_| T::of(rng.gen_range(-limit..limit))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            ParamTensor {
                name: s.name,
                shape: s.shape,
                data,
            }
        })
        .collect();
    Ok(ModelParameters {
        config: *config,
        kernel,
        tensors,
        ops,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from the forward seed.
    Train,
    /// Dropout off.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
enum Cache<T> {
    Conv(Tensor<T>),
    Relu(Tensor<T>),
    Norm(GroupNormCache<T>),
    Dropout(Option<Vec<T>>),
    Pool(Vec<u32>, Dims),
    Up(Tensor<T>),
    Save,
    Concat,
}

/// Intermediate values recorded by [`forward_tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

/// Per-tensor parameter gradients plus the gradient for the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub params: Vec<Vec<T>>,
    pub input: Tensor<T>,
}

fn run<T: Real>(
    p: &ModelParameters<T>,
    input: &Tensor<T>,
    mode: Mode,
    seed: u64,
    mut tape: Option<&mut Vec<Cache<T>>>,
) -> Result<Tensor<T>> {
    if input.dims != p.kernel.dims || input.channels != p.config.in_channels {
        return Err(Error::Shape(format!(
            "input {:?}x{} does not match model {:?}x{}",
            input.dims, input.channels, p.kernel.dims, p.config.in_channels
        )));
    }
    let mut rng: Option<ChaCha8Rng> = None;
    let mut skips: Vec<Tensor<T>> = Vec::new();
    let mut x = input.clone();
    let t = &p.tensors;
    for op in &p.ops {
        let (next, cache) = match *op {
            Op::Conv { k, cout, w, b } => {
                let y = layers::conv3d(&x, &t[w].data, &t[b].data, k, cout)?;
                (y, Cache::Conv(x))
            }
            Op::Relu => {
                let y = layers::relu(&x);
                let c = if tape.is_some() { Cache::Relu(y.clone()) } else { Cache::Save };
                (y, c)
            }
            Op::Norm { groups, scale, shift } => {
                let (y, c) = layers::groupnorm(&x, &t[scale].data, &t[shift].data, groups)?;
                (y, Cache::Norm(c))
            }
            Op::Dropout { p } => {
                if mode == Mode::Train && p > 0.0 {
                    let r = rng.get_or_insert_with(|| seed::rng(seed));
                    let mask = layers::dropout_mask(x.data.len(), p, r);
                    let y = layers::apply_mask(&x, &mask)?;
                    (y, Cache::Dropout(Some(mask)))
                } else {
                    (x, Cache::Dropout(None))
                }
            }
            Op::Pool => {
                let (y, arg) = layers::maxpool2(&x)?;
                (y, Cache::Pool(arg, x.dims))
            }
            Op::Up { cout, w, b } => {
                let y = layers::upconv2(&x, &t[w].data, &t[b].data, cout)?;
                (y, Cache::Up(x))
            }
            Op::Save => {
                skips.push(x.clone());
                (x, Cache::Save)
            }
            Op::Concat { .. } => {
                let s = skips.pop().ok_or_else(|| Error::Shape("skip stack underflow".into()))?;
                (layers::concat(&x, &s)?, Cache::Concat)
            }
        };
        if let Some(tape) = tape.as_deref_mut() {
            tape.push(cache);
        }
        x = next;
    }
    Ok(x)
}

/// Forward pass that records what [`backward`] needs.
pub fn forward_tape<T: Real>(p: &ModelParameters<T>, input: &Tensor<T>, mode: Mode, seed: u64) -> Result<(Tensor<T>, Tape<T>)> {
    let mut caches = Vec::with_capacity(p.ops.len());
    let y = run(p, input, mode, seed, Some(&mut caches))?;
    Ok((y, Tape { caches }))
}

/// Dropout-free forward pass.
pub fn infer<T: Real>(p: &ModelParameters<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    run(p, input, Mode::Infer, 0, None)
}

/// Backpropagates `gy` (gradient of the loss with respect to the network
/// output) through a recorded tape.
pub fn backward<T: Real>(p: &ModelParameters<T>, tape: Tape<T>, gy: Tensor<T>) -> Result<Gradients<T>> {
    if tape.caches.len() != p.ops.len() {
        return Err(Error::Shape("tape does not belong to this model".into()));
    }
    let t = &p.tensors;
    let mut grads: Vec<Vec<T>> = t.iter().map(|x| vec![T::zero(); x.data.len()]).collect();
    let mut skip_grads: Vec<Tensor<T>> = Vec::new();
    let mut g = gy;
    for (op, cache) in p.ops.iter().zip(tape.caches).rev() {
        g = match (op, cache) {
            (&Op::Conv { k, w, b, .. }, Cache::Conv(x)) => {
                let (gx, gw, gb) = layers::conv3d_backward(&x, &t[w].data, k, &g)?;
                grads[w] = gw;
                grads[b] = gb;
                gx
            }
            (Op::Relu, Cache::Relu(y)) => layers::relu_backward(&y, &g),
            (&Op::Norm { scale, shift, .. }, Cache::Norm(c)) => {
                let (gx, gs, gb) = layers::groupnorm_backward(&c, &t[scale].data, &g)?;
                grads[scale] = gs;
                grads[shift] = gb;
                gx
            }
            (Op::Dropout { .. }, Cache::Dropout(mask)) => match mask {
                Some(m) => layers::apply_mask(&g, &m)?,
                None => g,
            },
            (Op::Pool, Cache::Pool(arg, dims)) => layers::maxpool2_backward(&g, &arg, dims)?,
            (&Op::Up { w, b, .. }, Cache::Up(x)) => {
                let (gx, gw, gb) = layers::upconv2_backward(&x, &t[w].data, &g)?;
                grads[w] = gw;
                grads[b] = gb;
                gx
            }
            (Op::Save, Cache::Save) => {
                let s = skip_grads.pop().ok_or_else(|| Error::Shape("skip gradient underflow".into()))?;
                for (a, &b) in g.data.iter_mut().zip(&s.data) {
                    *a = *a + b;
                }
                g
            }
            (&Op::Concat { first }, Cache::Concat) => {
                let (a, s) = layers::split(&g, first);
                skip_grads.push(s);
                a
            }
            _ => return Err(Error::Shape("tape does not match the op sequence".into())),
        };
    }
    Ok(Gradients { params: grads, input: g })
}

/// Predicted dose on the kernel grid.
pub fn forward(p: &ModelParameters<f32>, input: &ModelInput, mode: Mode, seed: u64) -> Result<VoxelGrid> {
    if input.kernel() != p.kernel {
        return Err(Error::Shape(format!(
            "input kernel {:?} differs from model kernel {:?}",
            input.kernel().dims,
            p.kernel.dims
        )));
    }
    let x = Tensor::new(p.kernel.dims, crate::preprocess::N_CHANNELS, input.data().to_vec())?;
    let y = run(p, &x, mode, seed, None)?;
    VoxelGrid::new(p.kernel.dims, input.spacing, y.data)
}
