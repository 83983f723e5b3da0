//! A small static computation graph over `(B, C, H, W)` activations.
//!
//! Networks are built once as a node list in evaluation order; forward keeps
//! a tape of activations for the backward pass, and evaluation mode frees
//! activations as soon as their last consumer has run. Parameters live in
//! flat lists of conv and affine layers referenced by node ops; the flat
//! parameter vector concatenates them in creation order.

use ndarray::{Array4, ArrayView4, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    global_pool_backward, global_pool_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, upsample_backward, upsample_forward, ChannelAffine, Conv2d,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input,
    Conv(usize),
    Affine(usize),
    Relu,
    MaxPool { kernel: usize, stride: usize, pad: usize },
    /// Bilinear resize to the spatial dims of another node's activation.
    UpsampleTo { target: usize },
    Add,
    Concat,
    GlobalPool,
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    op: Op,
    inputs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Graph {
    nodes: Vec<Node>,
    pub(crate) convs: Vec<Conv2d>,
    pub(crate) affines: Vec<ChannelAffine>,
    output: usize,
}

pub(crate) struct Tape {
    acts: Vec<Option<Array4<f64>>>,
}

pub(crate) struct GraphBuilder {
    nodes: Vec<Node>,
    convs: Vec<Conv2d>,
    affines: Vec<ChannelAffine>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        GraphBuilder {
            nodes: vec![Node { op: Op::Input, inputs: vec![] }],
            convs: Vec::new(),
            affines: Vec::new(),
            rng,
        }
    }

    /// The input node is always node 0.
    pub fn input(&self) -> usize {
        0
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>) -> usize {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node { op, inputs });
        self.nodes.len() - 1
    }

    pub fn conv(
        &mut self,
        input: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> usize {
        let conv = Conv2d::new(cin, cout, kernel, stride, pad, dilation, &mut self.rng);
        self.convs.push(conv);
        self.push(Op::Conv(self.convs.len() - 1), vec![input])
    }

    pub fn affine(&mut self, input: usize, channels: usize) -> usize {
        self.affines.push(ChannelAffine::new(channels));
        self.push(Op::Affine(self.affines.len() - 1), vec![input])
    }

    pub fn relu(&mut self, input: usize) -> usize {
        self.push(Op::Relu, vec![input])
    }

    pub fn maxpool(&mut self, input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        self.push(Op::MaxPool { kernel, stride, pad }, vec![input])
    }

    pub fn upsample_to(&mut self, input: usize, target: usize) -> usize {
        self.push(Op::UpsampleTo { target }, vec![input])
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(Op::Add, vec![a, b])
    }

    pub fn concat(&mut self, inputs: Vec<usize>) -> usize {
        self.push(Op::Concat, inputs)
    }

    pub fn global_pool(&mut self, input: usize) -> usize {
        self.push(Op::GlobalPool, vec![input])
    }

    pub fn finish(self, output: usize) -> Graph {
        assert!(output < self.nodes.len());
        Graph {
            nodes: self.nodes,
            convs: self.convs,
            affines: self.affines,
            output,
        }
    }
}

impl Graph {
    fn eval_node(&self, idx: usize, acts: &[Option<Array4<f64>>], dims: &[(usize, usize, usize, usize)]) -> Array4<f64> {
        let node = &self.nodes[idx];
        let input = |i: usize| {
            acts[node.inputs[i]]
                .as_ref()
                .expect("input activation alive")
                .view()
        };
        match &node.op {
            Op::Input => unreachable!("input node is seeded directly"),
            Op::Conv(k) => self.convs[*k].forward(&input(0)),
            Op::Affine(k) => self.affines[*k].forward(&input(0)),
            Op::Relu => relu_forward(&input(0)),
            Op::MaxPool { kernel, stride, pad } => maxpool_forward(&input(0), *kernel, *stride, *pad),
            Op::UpsampleTo { target } => {
                let (_, _, th, tw) = dims[*target];
                upsample_forward(&input(0), th, tw)
            }
            Op::Add => &input(0).to_owned() + &input(1),
            Op::Concat => {
                let views: Vec<ArrayView4<f64>> = (0..node.inputs.len()).map(input).collect();
                ndarray::concatenate(Axis(1), &views).expect("concat shapes agree")
            }
            Op::GlobalPool => global_pool_forward(&input(0)),
        }
    }

    /// Forward pass keeping every activation for [`Graph::backward`].
    pub fn forward_train(&self, x: &ArrayView4<f64>) -> (Array4<f64>, Tape) {
        let mut acts: Vec<Option<Array4<f64>>> = vec![None; self.nodes.len()];
        let mut dims = vec![(0, 0, 0, 0); self.nodes.len()];
        acts[0] = Some(x.to_owned());
        dims[0] = x.dim();
        for idx in 1..self.nodes.len() {
            let y = self.eval_node(idx, &acts, &dims);
            dims[idx] = y.dim();
            acts[idx] = Some(y);
        }
        let out = acts[self.output].clone().expect("output computed");
        (out, Tape { acts })
    }

    /// Forward pass that frees activations once their consumers are done.
    pub fn forward_eval(&self, x: &ArrayView4<f64>) -> Array4<f64> {
        let mut consumers = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                consumers[i] += 1;
            }
        }
        consumers[self.output] += 1; // never free the output

        let mut acts: Vec<Option<Array4<f64>>> = vec![None; self.nodes.len()];
        let mut dims = vec![(0, 0, 0, 0); self.nodes.len()];
        acts[0] = Some(x.to_owned());
        dims[0] = x.dim();
        for idx in 1..self.nodes.len() {
            let y = self.eval_node(idx, &acts, &dims);
            dims[idx] = y.dim();
            acts[idx] = Some(y);
            for &i in &self.nodes[idx].inputs {
                consumers[i] -= 1;
                if consumers[i] == 0 {
                    acts[i] = None;
                }
            }
        }
        acts[self.output].take().expect("output computed")
    }

    /// Reverse pass; accumulates parameter gradients in the layers.
    pub fn backward(&mut self, tape: &Tape, grad_output: &ArrayView4<f64>) {
        let mut grads: Vec<Option<Array4<f64>>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(grad_output.to_owned());

        for idx in (1..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = self.nodes[idx].clone();
            let act = |i: usize| tape.acts[node.inputs[i]].as_ref().expect("tape alive").view();
            let send = |grads: &mut Vec<Option<Array4<f64>>>, to: usize, dg: Array4<f64>| {
                match &mut grads[to] {
                    Some(existing) => *existing += &dg,
                    slot @ None => *slot = Some(dg),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Conv(k) => {
                    let dx = self.convs[*k].backward(&act(0), &g.view());
                    send(&mut grads, node.inputs[0], dx);
                }
                Op::Affine(k) => {
                    let dx = self.affines[*k].backward(&act(0), &g.view());
                    send(&mut grads, node.inputs[0], dx);
                }
                Op::Relu => {
                    let dx = relu_backward(&act(0), &g.view());
                    send(&mut grads, node.inputs[0], dx);
                }
                Op::MaxPool { kernel, stride, pad } => {
                    let dx = maxpool_backward(&act(0), &g.view(), *kernel, *stride, *pad);
                    send(&mut grads, node.inputs[0], dx);
                }
                Op::UpsampleTo { .. } => {
                    let (_, _, ih, iw) = act(0).dim();
                    let dx = upsample_backward(&g.view(), ih, iw);
                    send(&mut grads, node.inputs[0], dx);
                }
                Op::Add => {
                    send(&mut grads, node.inputs[0], g.clone());
                    send(&mut grads, node.inputs[1], g);
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &i in &node.inputs {
                        let c = tape.acts[i].as_ref().expect("tape alive").shape()[1];
                        let part = g.slice(ndarray::s![.., offset..offset + c, .., ..]).to_owned();
                        send(&mut grads, i, part);
                        offset += c;
                    }
                }
                Op::GlobalPool => {
                    let (_, _, ih, iw) = act(0).dim();
                    let dx = global_pool_backward(&g.view(), ih, iw);
                    send(&mut grads, node.inputs[0], dx);
                }
            }
        }
    }

    pub fn param_len(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum::<usize>()
            + self.affines.iter().map(ChannelAffine::param_count).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for conv in &self.convs {
            out.extend(conv.weight.iter());
            out.extend(conv.bias.iter());
        }
        for aff in &self.affines {
            out.extend(aff.scale.iter());
            out.extend(aff.shift.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::Model(format!(
                "parameter vector length {} does not match model ({})",
                params.len(),
                self.param_len()
            )));
        }
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("length checked");
        for conv in &mut self.convs {
            for v in conv.weight.iter_mut() {
                *v = next();
            }
            for v in conv.bias.iter_mut() {
                *v = next();
            }
        }
        for aff in &mut self.affines {
            for v in aff.scale.iter_mut() {
                *v = next();
            }
            for v in aff.shift.iter_mut() {
                *v = next();
            }
        }
        Ok(())
    }

    pub fn grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for conv in &self.convs {
            out.extend(conv.grad_weight.iter());
            out.extend(conv.grad_bias.iter());
        }
        for aff in &self.affines {
            out.extend(aff.grad_scale.iter());
            out.extend(aff.grad_shift.iter());
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for conv in &mut self.convs {
            conv.grad_weight.fill(0.0);
            conv.grad_bias.fill(0.0);
        }
        for aff in &mut self.affines {
            aff.grad_scale.fill(0.0);
            aff.grad_shift.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn toy_graph(seed: u64) -> Graph {
        // conv -> relu -> (skip concat with input) -> conv, with an upsample
        let mut b = GraphBuilder::new(ChaCha8Rng::seed_from_u64(seed));
        let x = b.input();
        let c1 = b.conv(x, 2, 4, 3, 2, 1, 1);
        let r1 = b.relu(c1);
        let up = b.upsample_to(r1, x);
        let cat = b.concat(vec![up, x]);
        let c2 = b.conv(cat, 6, 3, 3, 1, 1, 1);
        b.finish(c2)
    }

    #[test]
    fn train_and_eval_forward_agree() {
        let g = toy_graph(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((2, 2, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let (train_out, _) = g.forward_train(&x.view());
        let eval_out = g.forward_eval(&x.view());
        assert_eq!(train_out, eval_out);
        assert_eq!(train_out.dim(), (2, 3, 8, 8));
    }

    #[test]
    fn param_roundtrip_is_exact() {
        let mut g = toy_graph(3);
        let params = g.params();
        assert_eq!(params.len(), g.param_len());
        let mut altered = params.clone();
        for v in &mut altered {
            *v += 0.125;
        }
        g.set_params(&altered).unwrap();
        assert_eq!(g.params(), altered);
        assert!(g.set_params(&params[1..]).is_err());
    }

    #[test]
    fn graph_parameter_gradients_match_finite_differences() {
        let mut g = toy_graph(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((1, 2, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let (y, tape) = g.forward_train(&x.view());
        let w_out = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        g.zero_grads();
        g.backward(&tape, &w_out.view());
        let analytic = g.grads();

        let params = g.params();
        let h = 1e-5;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..25 {
            let i = probe_rng.gen_range(0..params.len());
            let mut p = params.clone();
            p[i] += h;
            g.set_params(&p).unwrap();
            let up: f64 = (g.forward_eval(&x.view()) * &w_out).sum();
            p[i] -= 2.0 * h;
            g.set_params(&p).unwrap();
            let down: f64 = (g.forward_eval(&x.view()) * &w_out).sum();
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic[i] - numeric).abs() / scale < 1e-6,
                "param {i}: {} vs {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut g = toy_graph(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let (y, tape) = g.forward_train(&x.view());
        let seed_grad = Array4::from_elem(y.dim(), 0.5);

        g.zero_grads();
        g.backward(&tape, &seed_grad.view());
        let once = g.grads();
        g.backward(&tape, &seed_grad.view());
        let twice = g.grads();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }
}
