//! Eager tape-based reverse-mode differentiation over the kernels in
//! [`crate::ops`]. Each forward call computes its value immediately and
//! records the node; `backward` walks the tape in reverse.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Deconv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    LRelu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    ConcatC {
        a: Var,
        b: Var,
        a_channels: usize,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node after `backward`; zeros if the node
    /// did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = ops::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn deconv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let value = ops::deconv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
            output_padding,
        )?;
        Ok(self.push(
            value,
            Op::Deconv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn lrelu(&mut self, input: Var) -> Var {
        let value = ops::lrelu(self.value(input));
        self.push(value, Op::LRelu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_channels = self.value(a).c();
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::ConcatC { a, b, a_channels }))
    }

    /// Scalar loss node (1x1x1x1 value).
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let value = ops::mse(self.value(pred), target)?;
        Ok(self.push(
            Tensor::scalar(value as f32),
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    /// Reverse pass seeding d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward requires a scalar loss node".to_string(),
            ));
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // restore before dispatch so later queries can read it
            self.grads[i] = Some(g.clone());
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (input, weight, bias, stride, padding) =
                        (*input, *weight, *bias, *stride, *padding);
                    let (gi, gw, gb) = ops::conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &g,
                        stride,
                        padding,
                    )?;
                    self.accumulate(input, gi)?;
                    self.accumulate(weight, gw)?;
                    self.accumulate(bias, gb)?;
                }
                Op::Deconv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (input, weight, bias, stride, padding) =
                        (*input, *weight, *bias, *stride, *padding);
                    let (gi, gw, gb) = ops::deconv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &g,
                        stride,
                        padding,
                    )?;
                    self.accumulate(input, gi)?;
                    self.accumulate(weight, gw)?;
                    self.accumulate(bias, gb)?;
                }
                Op::LRelu { input } => {
                    let input = *input;
                    let gi = ops::lrelu_backward(&self.nodes[input.0].value, &g);
                    self.accumulate(input, gi)?;
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, g)?;
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, g.scale(-1.0))?;
                }
                Op::ConcatC { a, b, a_channels } => {
                    let (a, b, ca) = (*a, *b, *a_channels);
                    let ga = ops::slice_channels(&g, 0, ca)?;
                    let gb = ops::slice_channels(&g, ca, g.c())?;
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::Mse { pred, target } => {
                    let pred = *pred;
                    let scale = g.data()[0];
                    let gp = ops::mse_backward(&self.nodes[pred.0].value, target)?.scale(scale);
                    self.accumulate(pred, gp)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(rng: &mut Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Central-difference check of a conv+lrelu+mse chain w.r.t. the weight.
    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut rng = Rng::seed(42);
        let input = random_tensor(&mut rng, [1, 2, 5, 5]);
        let mut weight = random_tensor(&mut rng, [3, 2, 3, 3]);
        let bias = random_tensor(&mut rng, [1, 3, 1, 1]);
        let target = random_tensor(&mut rng, [1, 3, 5, 5]);

        let loss_of = |w: &Tensor| -> f64 {
            let out = ops::conv2d(&input, w, &bias, 1, 1).unwrap();
            let act = ops::lrelu(&out);
            ops::mse(&act, &target).unwrap()
        };

        let mut tape = Tape::new();
        let vx = tape.leaf(input.clone());
        let vw = tape.leaf(weight.clone());
        let vb = tape.leaf(bias.clone());
        let conv = tape.conv2d(vx, vw, vb, 1, 1).unwrap();
        let act = tape.lrelu(conv);
        let loss = tape.mse_loss(act, &target).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(vw);

        let eps = 1e-3f32;
        let mut max_rel = 0f64;
        for i in 0..weight.len() {
            let orig = weight.data()[i];
            weight.data_mut()[i] = orig + eps;
            let fp = loss_of(&weight);
            weight.data_mut()[i] = orig - eps;
            let fm = loss_of(&weight);
            weight.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps as f64);
            let a = analytic.data()[i] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        // f32 forward arithmetic limits central-difference agreement
        assert!(max_rel < 5e-3, "max rel err {max_rel}");
    }

    #[test]
    fn gradient_flows_through_shared_input() {
        // y = (x + x) -> mse against zeros: dL/dx should be 2 * d(mse)/dy
        let x = Tensor::full([1, 1, 2, 2], 1.0);
        let target = Tensor::zeros([1, 1, 2, 2]);
        let mut tape = Tape::new();
        let vx = tape.leaf(x);
        let sum = tape.add(vx, vx).unwrap();
        let loss = tape.mse_loss(sum, &target).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(vx);
        // d/dy mse(y,0) = 2y/4 = 1 at y=2, doubled by the fan-out
        for &v in g.data() {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.backward(v).is_err());
    }
}
