//! Multilayer perceptrons on top of the tape.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Checkpoint, Gradients, Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Linear { w: usize, b: usize },
    LayerNorm { gain: usize, bias: usize },
    Act(Activation),
}

/// Shape and activation layout of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    /// First hidden layer is `layernorm -> tanh` regardless of `activation`.
    pub layernorm_tanh_first: bool,
    /// Affine layer norm on the output.
    pub output_layernorm: bool,
    /// `tanh` on the output.
    pub output_tanh: bool,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
            activation,
            layernorm_tanh_first: false,
            output_layernorm: false,
            output_tanh: false,
        }
    }

    pub fn layernorm_tanh_first(mut self) -> Self {
        self.layernorm_tanh_first = true;
        self
    }

    pub fn output_layernorm(mut self) -> Self {
        self.output_layernorm = true;
        self
    }

    pub fn output_tanh(mut self) -> Self {
        self.output_tanh = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    layers: Vec<Layer>,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Parameters of an [`Mlp`] recorded on one graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<Var>,
    trainable: bool,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with [`Mlp::params`]. Zeros when bound frozen.
    pub fn grads<T: Scalar>(&self, grads: &Gradients<T>, mlp: &Mlp<T>) -> Vec<Tensor<T>> {
        if !self.trainable {
            return mlp.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.vars.iter().map(|&v| grads.get(v).clone()).collect()
    }
}

impl<T: Scalar> Mlp<T> {
    /// Linear weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(spec: MlpSpec, rng: &mut RngStream) -> Self {
        let mut mlp = Self {
            spec: spec.clone(),
            layers: Vec::new(),
            names: Vec::new(),
            params: Vec::new(),
        };
        let mut dims = vec![spec.input];
        dims.extend(&spec.hidden);
        dims.push(spec.output);
        let n_linear = dims.len() - 1;
        for i in 0..n_linear {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| T::lit(rng.uniform_in(-bound, bound))).collect();
            let b = (0..fan_out).map(|_| T::lit(rng.uniform_in(-bound, bound))).collect();
            let wi = mlp.add_param(format!("l{i}.weight"), Tensor::new(vec![fan_in, fan_out], w).unwrap());
            let bi = mlp.add_param(format!("l{i}.bias"), Tensor::new(vec![1, fan_out], b).unwrap());
            mlp.layers.push(Layer::Linear { w: wi, b: bi });
            let last = i + 1 == n_linear;
            if !last {
                if i == 0 && spec.layernorm_tanh_first {
                    mlp.push_layernorm(format!("ln{i}"), fan_out);
                    mlp.layers.push(Layer::Act(Activation::Tanh));
                } else {
                    mlp.layers.push(Layer::Act(spec.activation));
                }
            } else {
                if spec.output_layernorm {
                    mlp.push_layernorm(format!("ln{i}"), fan_out);
                }
                if spec.output_tanh {
                    mlp.layers.push(Layer::Act(Activation::Tanh));
                }
            }
        }
        mlp
    }

    fn add_param(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn push_layernorm(&mut self, name: String, dim: usize) {
        let gain = self.add_param(format!("{name}.gain"), Tensor::full(&[1, dim], T::one()));
        let bias = self.add_param(format!("{name}.bias"), Tensor::zeros(&[1, dim]));
        self.layers.push(Layer::LayerNorm { gain, bias });
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Record parameters on `g`; trainable bindings are differentiable leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundMlp {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.leaf(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        BoundMlp { vars, trainable }
    }

    /// Forward pass with parameters taken from `vars` (one per parameter).
    pub fn forward_with(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var, TensorError> {
        let cols = *g.shape(x).last().unwrap();
        if cols != self.spec.input {
            return Err(TensorError::ShapeMismatch {
                op: "mlp input",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.spec.input],
            });
        }
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                Layer::Linear { w, b } => g.affine(h, vars[w], vars[b])?,
                Layer::LayerNorm { gain, bias } => {
                    let n = g.layernorm(h);
                    let s = g.mul(n, vars[gain])?;
                    g.add(s, vars[bias])?
                }
                Layer::Act(Activation::Tanh) => g.tanh(h),
                Layer::Act(Activation::Relu) => g.relu(h),
            };
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &BoundMlp, x: Var) -> Result<Var, TensorError> {
        self.forward_with(g, &bound.vars, x)
    }

    /// Forward pass outside any training graph.
    pub fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xi)?;
        Ok(g.value(y).clone())
    }

    pub fn export(&self, prefix: &str, ck: &mut Checkpoint<T>) {
        for (n, p) in self.names.iter().zip(&self.params) {
            ck.insert(format!("{prefix}.{n}"), p.clone());
        }
    }

    /// Overwrite parameters from a checkpoint; every name must be present
    /// with a matching shape.
    pub fn import(&mut self, prefix: &str, ck: &Checkpoint<T>) -> Result<(), String> {
        for (n, p) in self.names.iter().zip(self.params.iter_mut()) {
            let key = format!("{prefix}.{n}");
            let t = ck.get(&key).ok_or_else(|| format!("checkpoint lacks `{key}`"))?;
            if t.shape() != p.shape() {
                return Err(format!("`{key}` has shape {:?}, expected {:?}", t.shape(), p.shape()));
            }
            *p = t.clone();
        }
        Ok(())
    }

    /// Stable fingerprint of the parameter bits.
    pub fn checksum(&self) -> u64 {
        checksum(self.params.iter())
    }
}

/// FNV-1a over the bit patterns of a parameter list.
pub fn checksum<'a, T: Scalar>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for p in params {
        for v in p.data() {
            for b in v.as_f64().to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01B3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    #[test]
    fn shapes_and_determinism() {
        let spec = MlpSpec::new(5, &[8, 8], 3, Activation::Relu).output_tanh();
        let a = Mlp::<f64>::new(spec.clone(), &mut RngStream::new(1));
        let b = Mlp::<f64>::new(spec, &mut RngStream::new(1));
        assert_eq!(a, b);
        let x = Tensor::full(&[4, 5], 0.3);
        let y = a.eval(&x).unwrap();
        assert_eq!(y.shape(), &[4, 3]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn tanh_mlp_passes_gradient_check() {
        let spec = MlpSpec::new(3, &[6, 6], 2, Activation::Tanh)
            .layernorm_tanh_first()
            .output_layernorm();
        let mlp = Mlp::<f64>::new(spec, &mut RngStream::new(4));
        let mut params = mlp.params().to_vec();
        let x = Tensor::from_f64(&[2, 3], &[0.1, -0.5, 0.9, 0.3, 0.2, -0.4]).unwrap();
        let report = finite_diff_check(
            mlp.names(),
            &mut params,
            |g, vars| {
                let xi = g.constant(x.clone());
                let y = mlp.forward_with(g, vars, xi)?;
                let sq = g.square(y);
                Ok(g.mean(sq))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn export_import_round_trip() {
        let spec = MlpSpec::new(2, &[3], 1, Activation::Tanh);
        let a = Mlp::<f64>::new(spec.clone(), &mut RngStream::new(1));
        let mut b = Mlp::<f64>::new(spec, &mut RngStream::new(2));
        assert_ne!(a.checksum(), b.checksum());
        let mut ck = Checkpoint::new();
        a.export("net", &mut ck);
        b.import("net", &ck).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(b.import("other", &ck).is_err());
    }
}
