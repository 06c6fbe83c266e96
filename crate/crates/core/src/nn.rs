//! Seeded parameter storage and the handful of layer primitives the toy
//! networks are built from.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::device;

/// Named trainable arrays in insertion-independent (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        let t = Tensor::from_vec(data, shape, &device())?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub(crate) fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let t = Tensor::zeros(shape, crate::tensor::DTYPE, &device())?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// He-normal convolution kernel `(out, in, k, k)` plus zero bias.
    pub(crate) fn add_conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<()> {
        let fan_in = (c_in * kernel * kernel) as f64;
        self.add_normal(
            &format!("{name}.w"),
            &[c_out, c_in, kernel, kernel],
            gain * (2.0 / fan_in).sqrt(),
            rng,
        )?;
        self.add_zeros(&format!("{name}.b"), &[c_out])
    }

    /// Dense layer `(out, in)` plus zero bias.
    pub(crate) fn add_linear<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<()> {
        self.add_normal(
            &format!("{name}.w"),
            &[d_out, d_in],
            gain * (1.0 / d_in as f64).sqrt(),
            rng,
        )?;
        self.add_zeros(&format!("{name}.b"), &[d_out])
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// The parameter as a graph input; detached (no gradient) when frozen.
    pub(crate) fn get(&self, name: &str, trainable: bool) -> Result<Tensor> {
        let v = self.var(name)?;
        Ok(if trainable {
            v.as_tensor().clone()
        } else {
            v.as_tensor().detach()
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Deep copy: the new set shares no storage with `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { vars })
    }

    /// Replaces values from `tensors`; names and shapes must match exactly.
    pub(crate) fn load_from(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, archive has {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("archive lacks `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(t)?;
        }
        Ok(())
    }

    /// Flat snapshot of all values, for exact before/after comparisons.
    pub fn snapshot(&self) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        for v in self.vars.values() {
            out.extend(
                v.as_tensor()
                    .flatten_all()?
                    .to_vec1::<f64>()?
                    .into_iter()
                    .map(f64::to_bits),
            );
        }
        Ok(out)
    }
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let y = x.conv2d(w, padding, stride, 1, 1)?;
    let c = b.dims()[0];
    Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
}

pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

/// Row-wise L2 normalization of a `(B, D)` tensor.
pub(crate) fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Three stride-2 convolutions with SiLU, flattened: `(B, 3, R, R)` to
/// `(B, 2c * (R/8)^2)`. Shared by the face embedder and the age classifier.
pub(crate) fn add_trunk<R: Rng + ?Sized>(ps: &mut ParamSet, channels: usize, rng: &mut R) -> Result<()> {
    ps.add_conv("trunk0", 3, channels, 3, 1.0, rng)?;
    ps.add_conv("trunk1", channels, 2 * channels, 3, 1.0, rng)?;
    ps.add_conv("trunk2", 2 * channels, 2 * channels, 3, 1.0, rng)
}

pub(crate) fn trunk_features(resolution: usize, channels: usize) -> usize {
    2 * channels * (resolution / 8) * (resolution / 8)
}

pub(crate) fn trunk_forward(ps: &ParamSet, x: &Tensor, trainable: bool) -> Result<Tensor> {
    let mut h = ((x * 2.0)? - 1.0)?;
    for i in 0..3 {
        h = conv2d(
            &h,
            &ps.get(&format!("trunk{i}.w"), trainable)?,
            &ps.get(&format!("trunk{i}.b"), trainable)?,
            2,
            1,
        )?
        .silu()?;
    }
    Ok(h.flatten_from(1)?)
}

pub(crate) fn adam(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    let params = candle_nn::ParamsAdamW {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    use candle_nn::Optimizer;
    Ok(candle_nn::AdamW::new(vars, params)?)
}
