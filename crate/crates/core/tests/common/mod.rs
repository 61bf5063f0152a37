#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recast::model::{log_likelihood_grad, DropoutMasks, ModelSpec};
use recast::tensor::{Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.value_and_grad(theta, &mut g)
    }
}

pub struct MlpObjective {
    pub spec: ModelSpec,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub masks: Option<DropoutMasks>,
}

impl Objective for MlpObjective {
    fn dim(&self) -> usize {
        self.spec.layout().len
    }

    fn value_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        log_likelihood_grad(&self.spec, theta, &self.x, &self.labels, self.masks.as_ref(), grad).unwrap()
    }
}

/// conv -> relu -> maxpool -> flatten -> dense -> log-softmax, built on the
/// tape directly so convolution and pooling are covered at small sizes.
pub struct ConvObjective {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub pad: usize,
    pub classes: usize,
}

impl ConvObjective {
    fn shapes(&self) -> Vec<Vec<usize>> {
        let s = self.x.shape();
        let (h, w) = (s[2] + 2 * self.pad - self.kernel + 1, s[3] + 2 * self.pad - self.kernel + 1);
        let flat = self.filters * (h / 2) * (w / 2);
        vec![
            vec![self.filters, self.channels, self.kernel, self.kernel],
            vec![self.filters],
            vec![flat, self.classes],
            vec![self.classes],
        ]
    }
}

impl Objective for ConvObjective {
    fn dim(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn value_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let mut tape = Tape::new();
        let mut offset = 0;
        let mut leaves = Vec::new();
        for shape in self.shapes() {
            let n: usize = shape.iter().product();
            leaves.push(tape.leaf(Tensor::new(shape, theta[offset..offset + n].to_vec()).unwrap()));
            offset += n;
        }
        let x = tape.constant(self.x.clone());
        let c = tape.conv2d(x, leaves[0], leaves[1], self.pad).unwrap();
        let r = tape.relu(c);
        let p = tape.max_pool2d(r, 2).unwrap();
        let f = tape.flatten(p).unwrap();
        let z = tape.matmul(f, leaves[2]).unwrap();
        let z = tape.add_row(z, leaves[3]).unwrap();
        let lp = tape.log_softmax(z).unwrap();
        let total = tape.pick_sum(lp, &self.labels).unwrap();
        tape.backward(total).unwrap();
        let mut offset = 0;
        for leaf in leaves {
            let g = tape.grad(leaf);
            for (dst, src) in grad[offset..offset + g.len()].iter_mut().zip(g.data()) {
                *dst += src;
            }
            offset += g.len();
        }
        tape.value(total).item().unwrap()
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// The `i`-th random network of the gradient check suite together with a
/// random parameter point. Even indices are MLPs (every fourth with
/// dropout masks), odd ones small convolutional nets.
pub fn random_network(i: u64) -> (Box<dyn Objective>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
    let batch = rng.random_range(2..6);
    let classes = rng.random_range(2..7);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let obj: Box<dyn Objective> = if i % 2 == 0 {
        let input = rng.random_range(2..24);
        let depth = rng.random_range(0..3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..40)).collect();
        let mut spec = ModelSpec::mlp(input, &hidden, classes);
        let masks = if i % 4 == 0 && depth > 0 {
            spec = spec.with_dropout(0.5);
            Some(DropoutMasks::sample(&spec, batch, &mut rng))
        } else {
            None
        };
        let x = Tensor::new(vec![batch, input], uniform(&mut rng, batch * input, 1.0)).unwrap();
        Box::new(MlpObjective { spec, x, labels, masks })
    } else {
        let channels = rng.random_range(1..3);
        let (h, w) = (rng.random_range(5..10), rng.random_range(5..10));
        let x = Tensor::new(vec![batch, channels, h, w], uniform(&mut rng, batch * channels * h * w, 1.0)).unwrap();
        Box::new(ConvObjective {
            x,
            labels,
            channels,
            filters: rng.random_range(1..5),
            kernel: 3,
            pad: rng.random_range(0..2),
            classes,
        })
    };
    let theta = uniform(&mut rng, obj.dim(), 0.5);
    (obj, theta)
}

/// Largest `|g - fd| / max(|g|, |fd|, floor)` over every coordinate, with
/// central differences of step [`FD_STEP`].
pub fn max_relative_error(obj: &dyn Objective, theta: &[f64], floor: f64) -> f64 {
    let mut grad = vec![0.0; obj.dim()];
    obj.value_and_grad(theta, &mut grad);
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for j in 0..theta.len() {
        probe[j] = theta[j] + FD_STEP;
        let up = obj.value(&probe);
        probe[j] = theta[j] - FD_STEP;
        let down = obj.value(&probe);
        probe[j] = theta[j];
        let fd = (up - down) / (2.0 * FD_STEP);
        let denom = grad[j].abs().max(fd.abs()).max(floor);
        worst = worst.max((grad[j] - fd).abs() / denom);
    }
    worst
}

/// Conjugate normal-normal posterior, recomputed from the raw formula.
pub fn conjugate_posterior(prior_mean: f64, prior_var: f64, obs_var: f64, data: &[f64]) -> (f64, f64) {
    let precision = 1.0 / prior_var + data.len() as f64 / obs_var;
    let var = 1.0 / precision;
    let mean = var * (prior_mean / prior_var + data.iter().sum::<f64>() / obs_var);
    (mean, var)
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}
