//! A minimal reverse-mode tape over flat `f64` tensors.
//!
//! Nodes are appended in evaluation order, which is already a topological
//! order; the reverse sweep walks them backwards once, skipping nodes that
//! received no gradient.

use crate::grid::Dims;

use super::conv::{conv3d_backward_input, conv3d_backward_params, conv3d_forward};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        cin: usize,
        cout: usize,
        dims: Dims,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    /// Straight-through pass where `pass[i]`, zero elsewhere.
    Masked {
        x: Var,
        pass: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients after a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of `v`, or zeros of the right length if nothing reached it.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; len])
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

pub const NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `[cin, dims] * [cout, cin, 3, 3, 3] + [cout]`, zero padded.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, cin: usize, dims: Dims) -> Var {
        let cout = self.value(b).len();
        debug_assert_eq!(self.value(x).len(), cin * dims.len());
        debug_assert_eq!(self.value(w).len(), cout * cin * 27);
        let out = conv3d_forward(self.value(x), cin, self.value(w), self.value(b), cout, dims);
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                cin,
                cout,
                dims,
            },
        )
    }

    /// Per-channel normalisation with learned scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, channels: usize) -> Var {
        let xv = self.value(x);
        let n = xv.len() / channels;
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(channels);
        for c in 0..channels {
            let xs = &xv[c * n..(c + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(inv);
            for i in 0..n {
                let h = (xs[i] - mean) * inv;
                xhat[c * n + i] = h;
                out[c * n + i] = g[c] * h + bt[c];
            }
        }
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                channels,
                xhat,
                inv_std,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        self.push(out, Op::LeakyRelu { x, slope })
    }

    /// A node whose value is `value` and whose gradient passes to `x` where
    /// `pass` is set (straight-through estimator for fake quantisation).
    pub fn straight_through(&mut self, x: Var, value: Vec<f64>, pass: Vec<bool>) -> Var {
        debug_assert_eq!(value.len(), self.value(x).len());
        self.push(value, Op::Masked { x, pass })
    }

    /// Reverse sweep from the given seed gradients.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.len(), self.nodes[v.0].value.len(), "seed gradient shape");
            accumulate(&mut grads[v.0], g);
        }
        let mut visited = 0;
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv {
                    x,
                    w,
                    b,
                    cin,
                    cout,
                    dims,
                } => {
                    let gin = conv3d_backward_input(&g, *cout, self.value(*w), *cin, *dims);
                    let (gw, gb) = conv3d_backward_params(&g, *cout, self.value(*x), *cin, *dims);
                    accumulate(&mut grads[x.0], &gin);
                    accumulate(&mut grads[w.0], &gw);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    channels,
                    xhat,
                    inv_std,
                } => {
                    let n = g.len() / channels;
                    let gam = self.value(*gamma);
                    let mut gx = vec![0.0; g.len()];
                    let mut gg = vec![0.0; *channels];
                    let mut gb = vec![0.0; *channels];
                    for c in 0..*channels {
                        let r = c * n..(c + 1) * n;
                        let (gs, hs) = (&g[r.clone()], &xhat[r.clone()]);
                        let sum_g: f64 = gs.iter().sum();
                        let sum_gh: f64 = gs.iter().zip(hs).map(|(a, b)| a * b).sum();
                        gg[c] = sum_gh;
                        gb[c] = sum_g;
                        let k = gam[c] * inv_std[c] / n as f64;
                        for (o, (gi, hi)) in gx[r].iter_mut().zip(gs.iter().zip(hs)) {
                            *o = k * (n as f64 * gi - sum_g - hi * sum_gh);
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                    accumulate(&mut grads[gamma.0], &gg);
                    accumulate(&mut grads[beta.0], &gb);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, &v)| if v > 0.0 { *gi } else { slope * gi })
                        .collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Masked { x, pass } => {
                    let gx: Vec<f64> = g.iter().zip(pass).map(|(gi, &p)| if p { *gi } else { 0.0 }).collect();
                    accumulate(&mut grads[x.0], &gx);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads, visited }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
