use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gelu, gelu_grad, MaskingPolicy, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::{affine, matvec_t_acc, outer_acc};
use crate::rng::{gaussian_vec, rng_from_seed};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Hidden layers are `linear → layer norm → activation → dropout`; the
/// output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpBackboneConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
    pub mask_ratio: f64,
    pub mask_value: f64,
    pub layer_norm: bool,
    pub activation: Activation,
    /// Standard deviation multiplier for the output layer's initial weights.
    pub output_init_scale: f64,
}

impl Default for MlpBackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            hidden_dims: vec![256],
            output_dim: 1,
            dropout_rate: 0.1,
            mask_ratio: 0.15,
            mask_value: 0.0,
            layer_norm: true,
            activation: Activation::Gelu,
            output_init_scale: 1.0,
        }
    }
}

impl MlpBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("mlp dims must be at least 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("mlp needs at least one hidden layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        self.masking().validate()
    }

    pub fn masking(&self) -> MaskingPolicy {
        MaskingPolicy {
            mask_ratio: self.mask_ratio,
            mask_value: self.mask_value,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: usize,
    b: usize,
    ln: Option<(usize, usize)>,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    config: MlpBackboneConfig,
    layers: Vec<Layer>,
    pub params: ParamStore,
}

struct HiddenCache {
    xhat: Vec<f64>,
    inv_std: f64,
    normed: Vec<f64>,
    dropout: Option<Vec<f64>>,
}

/// Activations retained from a training-mode forward pass.
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    hidden: Vec<HiddenCache>,
}

impl Mlp {
    /// Gaussian fan-in initialisation seeded by `seed`.
    pub fn new(config: MlpBackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::default();
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.output_dim);
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l + 1 == n_layers;
            let scale =
                (1.0 / fan_in as f64).sqrt() * if last { config.output_init_scale } else { 1.0 };
            let w = gaussian_vec(&mut rng, fan_in * fan_out)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            let w = params.push(format!("layer{l}.weight"), vec![fan_out, fan_in], w);
            let b = params.push(format!("layer{l}.bias"), vec![fan_out], vec![0.0; fan_out]);
            let ln = (!last && config.layer_norm).then(|| {
                (
                    params.push(
                        format!("layer{l}.ln_gain"),
                        vec![fan_out],
                        vec![1.0; fan_out],
                    ),
                    params.push(
                        format!("layer{l}.ln_bias"),
                        vec![fan_out],
                        vec![0.0; fan_out],
                    ),
                )
            });
            layers.push(Layer {
                w,
                b,
                ln,
                fan_in,
                fan_out,
            });
        }
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &MlpBackboneConfig {
        &self.config
    }

    /// Overwrites the output-layer bias, e.g. with the mean training target.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        let b = self.layers.last().expect("at least one layer").b;
        let dst = self.params.get_mut(b);
        if dst.len() != bias.len() {
            return Err(Error::dims("mlp output bias", dst.len(), bias.len()));
        }
        dst.copy_from_slice(bias);
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::dims("mlp input", self.config.input_dim, x.len()));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass: no masking, no dropout.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run(x, None).0)
    }

    /// Training-mode forward pass with dropout drawn from `dropout_seed`.
    /// Input masking is the caller's responsibility.
    pub fn forward_train(&self, x: &[f64], dropout_seed: u64) -> Result<(Vec<f64>, MlpCache)> {
        self.check_input(x)?;
        let (out, cache) = self.run(x, Some(dropout_seed));
        Ok((out, cache.expect("training pass keeps a cache")))
    }

    fn run(&self, x: &[f64], dropout_seed: Option<u64>) -> (Vec<f64>, Option<MlpCache>) {
        let train = dropout_seed.is_some();
        let mut rng = dropout_seed.map(rng_from_seed);
        let mut inputs = Vec::new();
        let mut hidden = Vec::new();
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = vec![0.0; layer.fan_out];
            affine(
                self.params.get(layer.w),
                self.params.get(layer.b),
                &cur,
                layer.fan_out,
                layer.fan_in,
                &mut a,
            );
            if train {
                inputs.push(std::mem::take(&mut cur));
            }
            if l + 1 == self.layers.len() {
                cur = a;
                break;
            }
            let (xhat, inv_std, normed) = match layer.ln {
                Some((g, b)) => {
                    let (xhat, inv_std) = normalize(&a);
                    let gain = self.params.get(g);
                    let bias = self.params.get(b);
                    let normed = xhat
                        .iter()
                        .zip(gain)
                        .zip(bias)
                        .map(|((x, g), b)| g * x + b)
                        .collect();
                    (xhat, inv_std, normed)
                }
                None => (Vec::new(), 1.0, a),
            };
            let act = self.config.activation;
            let mut h: Vec<f64> = normed.iter().map(|&v| act.apply(v)).collect();
            let dropout = match rng.as_mut() {
                Some(rng) if self.config.dropout_rate > 0.0 => {
                    let p = self.config.dropout_rate;
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..h.len())
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    h.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    Some(mask)
                }
                _ => None,
            };
            if train {
                hidden.push(HiddenCache {
                    xhat,
                    inv_std,
                    normed,
                    dropout,
                });
            }
            cur = h;
        }
        let cache = train.then_some(MlpCache { inputs, hidden });
        (cur, cache)
    }

    /// Accumulates parameter gradients into `grads` (aligned with
    /// `self.params`) and returns the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if l + 1 < self.layers.len() {
                let hc = &cache.hidden[l];
                if let Some(mask) = &hc.dropout {
                    g.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                }
                let act = self.config.activation;
                g.iter_mut()
                    .zip(&hc.normed)
                    .for_each(|(v, n)| *v *= act.grad(*n));
                if let Some((gi, bi)) = layer.ln {
                    let gain = self.params.get(gi);
                    for ((dg, x), gv) in grads[gi].iter_mut().zip(&hc.xhat).zip(&g) {
                        *dg += gv * x;
                    }
                    for (db, gv) in grads[bi].iter_mut().zip(&g) {
                        *db += gv;
                    }
                    let dxhat: Vec<f64> = g.iter().zip(gain).map(|(a, b)| a * b).collect();
                    g = normalize_backward(&dxhat, &hc.xhat, hc.inv_std);
                }
            }
            let input = &cache.inputs[l];
            outer_acc(&g, input, &mut grads[layer.w]);
            for (db, gv) in grads[layer.b].iter_mut().zip(&g) {
                *db += gv;
            }
            let mut gx = vec![0.0; layer.fan_in];
            matvec_t_acc(
                self.params.get(layer.w),
                &g,
                layer.fan_out,
                layer.fan_in,
                &mut gx,
            );
            g = gx;
        }
        g
    }
}

fn normalize(a: &[f64]) -> (Vec<f64>, f64) {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    (a.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

fn normalize_backward(dxhat: &[f64], xhat: &[f64], inv_std: f64) -> Vec<f64> {
    let n = dxhat.len() as f64;
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(d, x)| inv_std * (d - mean_d - x * mean_dx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_difference, relative_error};
    use crate::rng::gaussian_vec_seeded;

    fn tiny(layer_norm: bool, activation: Activation) -> MlpBackboneConfig {
        MlpBackboneConfig {
            input_dim: 4,
            hidden_dims: vec![8],
            output_dim: 3,
            dropout_rate: 0.0,
            layer_norm,
            activation,
            ..Default::default()
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut mlp = Mlp::new(tiny(true, Activation::Gelu), 1).unwrap();
        mlp.params.fill(0.0);
        assert_eq!(mlp.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layers_pass_input_through() {
        let cfg = MlpBackboneConfig {
            input_dim: 3,
            hidden_dims: vec![3],
            output_dim: 3,
            dropout_rate: 0.0,
            layer_norm: false,
            activation: Activation::Identity,
            ..Default::default()
        };
        let mut mlp = Mlp::new(cfg, 0).unwrap();
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for i in [0, 2] {
            mlp.params.get_mut(i).copy_from_slice(&eye);
        }
        mlp.params.get_mut(1).fill(0.0);
        mlp.params.get_mut(3).fill(0.0);
        let x = [0.3, -1.2, 7.5];
        assert_eq!(mlp.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_manual_trace() {
        let mlp = Mlp::new(tiny(false, Activation::Gelu), 5).unwrap();
        let x = [0.5, -1.0, 2.0, 0.25];
        let w1 = mlp.params.get(0);
        let b1 = mlp.params.get(1);
        let w2 = mlp.params.get(2);
        let b2 = mlp.params.get(3);
        let mut h = [0.0; 8];
        for r in 0..8 {
            let mut s = b1[r];
            for c in 0..4 {
                s += w1[r * 4 + c] * x[c];
            }
            h[r] = gelu(s);
        }
        let mut expected = [0.0; 3];
        for r in 0..3 {
            expected[r] = b2[r];
            for c in 0..8 {
                expected[r] += w2[r * 8 + c] * h[c];
            }
        }
        let out = mlp.forward(&x).unwrap();
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_input_length() {
        let mlp = Mlp::new(tiny(true, Activation::Gelu), 1).unwrap();
        assert!(matches!(
            mlp.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = MlpBackboneConfig {
            input_dim: 5,
            hidden_dims: vec![6, 4],
            output_dim: 3,
            dropout_rate: 0.3,
            ..Default::default()
        };
        let mlp = Mlp::new(cfg, 11).unwrap();
        let x = gaussian_vec_seeded(1, 5);
        let probe = gaussian_vec_seeded(2, 3);
        let seed = 99;
        let loss = |m: &Mlp, x: &[f64]| {
            let (y, _) = m.forward_train(x, seed).unwrap();
            y.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = mlp.forward_train(&x, seed).unwrap();
        let mut grads = mlp.params.zeros_like();
        let gx = mlp.backward(&cache, &probe, &mut grads);

        let fd_x = central_difference(|v| loss(&mlp, v), &x, 1e-6);
        assert!(relative_error(&gx, &fd_x) < 1e-6);

        for pi in 0..mlp.params.len() {
            let base = mlp.params.get(pi).to_vec();
            let fd = central_difference(
                |v| {
                    let mut m = mlp.clone();
                    m.params.get_mut(pi).copy_from_slice(v);
                    loss(&m, &x)
                },
                &base,
                1e-6,
            );
            assert!(relative_error(&grads[pi], &fd) < 1e-6, "param {pi}");
        }
    }

    #[test]
    fn eval_is_deterministic_and_dropout_free() {
        let cfg = MlpBackboneConfig {
            input_dim: 4,
            hidden_dims: vec![16],
            output_dim: 2,
            dropout_rate: 0.5,
            ..Default::default()
        };
        let mlp = Mlp::new(cfg, 3).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mlp.forward(&x).unwrap(), mlp.forward(&x).unwrap());
        let (train_out, _) = mlp.forward_train(&x, 1).unwrap();
        assert_ne!(train_out, mlp.forward(&x).unwrap());
    }
}
