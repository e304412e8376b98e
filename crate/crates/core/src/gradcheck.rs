//! Central finite-difference checks of autograd gradients.

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(GradSample::rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn set_entry(var: &Var, index: usize, value: f64) -> Result<()> {
    let shape = var.shape().clone();
    let mut data: Vec<f64> = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    data[index] = value;
    let t = Tensor::from_vec(data, shape, var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares the autograd gradient of `loss` against central differences on
/// `count` parameter entries drawn uniformly over all scalars of `store`.
/// Only vars whose name satisfies `filter` are eligible.
pub fn check_gradients<F>(
    store: &ParamStore,
    loss: F,
    count: usize,
    h: f64,
    seed: u64,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let vars: Vec<(String, Var)> = store.vars().into_iter().filter(|(n, _)| filter(n)).collect();
    let total: usize = vars.iter().map(|(_, v)| v.elem_count()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("no parameters to check".into()));
    }
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut k = rng.random_range(0..total);
        let (name, var) = vars
            .iter()
            .find(|(_, v)| {
                if k < v.elem_count() {
                    true
                } else {
                    k -= v.elem_count();
                    false
                }
            })
            .expect("index within total");
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[k],
            None => 0.0,
        };
        let orig = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[k];
        set_entry(var, k, orig + h)?;
        let plus = scalar(&loss()?)?;
        set_entry(var, k, orig - h)?;
        let minus = scalar(&loss()?)?;
        set_entry(var, k, orig)?;
        samples.push(GradSample {
            name: name.clone(),
            index: k,
            analytic,
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    Ok(GradCheckReport { samples })
}

/// Replaces every parameter with N(0, std²) noise so that zero-initialized
/// layers do not trivially zero out gradients.
pub fn randomize(store: &ParamStore, std: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in store.vars() {
        let data: Vec<f64> = (0..var.elem_count())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
            .collect();
        let t = Tensor::from_vec(data, var.shape().clone(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic_gradients_match() {
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F64, &Device::Cpu);
        let w = vb.get((3, 4), "w").unwrap();
        let target = Tensor::arange(0f64, 12.0, &Device::Cpu)
            .unwrap()
            .reshape((3, 4))
            .unwrap();
        let loss = || -> Result<Tensor> {
            let d = (&w - &target)?;
            Ok(d.sqr()?.sum_all()?.mul(&d.sin()?.sum_all()?)?)
        };
        let report = check_gradients(&store, loss, 20, 1e-3, 1, |_| true).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }
}
