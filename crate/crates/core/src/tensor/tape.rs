use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, ConvGeom};
use super::{GradSlot, NodeRef, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

type Buf = Arc<Vec<f32>>;

/// How a recorded node pushes its output gradient to its inputs. Input
/// indices are `None` when that input does not need a gradient.
pub(crate) enum Backward {
    Leaf(GradSlot),
    MatMul {
        a: Buf,
        b: Buf,
        m: usize,
        k: usize,
        n: usize,
        ia: Option<usize>,
        ib: Option<usize>,
    },
    Add {
        ia: Option<usize>,
        ib: Option<usize>,
        a_scalar: bool,
        b_scalar: bool,
    },
    Sub {
        ia: Option<usize>,
        ib: Option<usize>,
        a_scalar: bool,
        b_scalar: bool,
    },
    Mul {
        a: Buf,
        b: Buf,
        ia: Option<usize>,
        ib: Option<usize>,
    },
    Scale {
        s: f32,
        ia: usize,
    },
    Identity {
        ia: usize,
    },
    Relu {
        x: Buf,
        ia: usize,
    },
    Log {
        x: Buf,
        ia: usize,
    },
    Exp {
        y: Buf,
        ia: usize,
    },
    ClampMin {
        x: Buf,
        lo: f32,
        ia: usize,
    },
    Sum {
        ia: usize,
        n: usize,
    },
    Mean {
        ia: usize,
        n: usize,
    },
    AddBias {
        cols: usize,
        ia: Option<usize>,
        ib: Option<usize>,
    },
    Softmax {
        y: Buf,
        cols: usize,
        tau: f32,
        ia: usize,
    },
    Conv2d {
        cols: Buf,
        w: Buf,
        geom: ConvGeom,
        ix: Option<usize>,
        iw: Option<usize>,
    },
    AddChannelBias {
        ch: usize,
        plane: usize,
        ia: Option<usize>,
        ib: Option<usize>,
    },
    AvgPool2 {
        batch_ch: usize,
        h: usize,
        w: usize,
        ia: usize,
    },
}

pub(crate) struct Node {
    numel: usize,
    backward: Backward,
}

/// Records operations for one forward pass.
///
/// A tape created with [`Tape::no_grad`] records nothing and every tensor it
/// produces is a constant. The tape is single-owner; it is neither `Send`
/// nor `Sync`.
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<HashMap<usize, usize>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Tensors produced earlier become
    /// unreachable for `backward`.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.leaves.borrow_mut().clear();
    }

    /// Node index for `t` if it participates in differentiation.
    pub(crate) fn input(&self, t: &Tensor) -> Result<Option<usize>> {
        if !self.recording || !t.requires_grad() {
            return Ok(None);
        }
        if let Some(NodeRef { tape, index }) = t.node() {
            if tape != self.id || index >= self.len() {
                return Err(TensorError::NotOnTape);
            }
            return Ok(Some(index));
        }
        let slot = t.grad_slot().ok_or(TensorError::NotOnTape)?;
        let key = Arc::as_ptr(slot) as usize;
        if let Some(&idx) = self.leaves.borrow().get(&key) {
            return Ok(Some(idx));
        }
        let idx = self.push(t.numel(), Backward::Leaf(Arc::clone(slot)));
        self.leaves.borrow_mut().insert(key, idx);
        Ok(Some(idx))
    }

    fn push(&self, numel: usize, backward: Backward) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { numel, backward });
        nodes.len() - 1
    }

    /// Wraps an op result; records `backward` only if some input needs it.
    pub(crate) fn output(
        &self,
        shape: Vec<usize>,
        data: Vec<f32>,
        needs_grad: bool,
        backward: impl FnOnce() -> Backward,
    ) -> Tensor {
        let node = if self.recording && needs_grad {
            let index = self.push(data.len(), backward());
            Some(NodeRef { tape: self.id, index })
        } else {
            None
        };
        Tensor::from_op(shape, data, node)
    }

    /// Accumulates `∂loss/∂leaf` into every reachable leaf's gradient slot.
    /// Calling it twice on the same loss doubles the stored gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape().to_vec()));
        }
        let root = match loss.node() {
            Some(NodeRef { tape, index }) if tape == self.id && index < self.len() => index,
            _ => match self.input(loss)? {
                Some(idx) => idx,
                None => return Err(TensorError::NotOnTape),
            },
        };
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<f32>>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            propagate(&nodes, &mut adj, &nodes[i].backward, g);
        }
        Ok(())
    }
}

fn grad_buf<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f32>>], i: usize) -> &'a mut [f32] {
    adj[i].get_or_insert_with(|| vec![0.0; nodes[i].numel])
}

fn add_into(nodes: &[Node], adj: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    let buf = grad_buf(nodes, adj, i);
    for (o, v) in buf.iter_mut().zip(g) {
        *o += v;
    }
}

fn add_scaled(nodes: &[Node], adj: &mut [Option<Vec<f32>>], i: usize, g: &[f32], s: f32) {
    let buf = grad_buf(nodes, adj, i);
    for (o, v) in buf.iter_mut().zip(g) {
        *o += s * v;
    }
}

fn add_sum(nodes: &[Node], adj: &mut [Option<Vec<f32>>], i: usize, g: &[f32], s: f32) {
    let total: f32 = g.iter().sum();
    grad_buf(nodes, adj, i)[0] += s * total;
}

fn propagate(nodes: &[Node], adj: &mut [Option<Vec<f32>>], bw: &Backward, g: Vec<f32>) {
    match bw {
        Backward::Leaf(slot) => {
            let mut guard = slot.lock().expect("grad lock");
            match guard.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => *guard = Some(g),
            }
        }
        Backward::MatMul { a, b, m, k, n, ia, ib } => {
            if let Some(ia) = *ia {
                gemm_nt(&g, b, grad_buf(nodes, adj, ia), *m, *n, *k);
            }
            if let Some(ib) = *ib {
                gemm_tn(a, &g, grad_buf(nodes, adj, ib), *m, *k, *n);
            }
        }
        Backward::Add { ia, ib, a_scalar, b_scalar } => {
            for (idx, scalar) in [(*ia, *a_scalar), (*ib, *b_scalar)] {
                if let Some(i) = idx {
                    if scalar {
                        add_sum(nodes, adj, i, &g, 1.0);
                    } else {
                        add_into(nodes, adj, i, &g);
                    }
                }
            }
        }
        Backward::Sub { ia, ib, a_scalar, b_scalar } => {
            for (idx, scalar, s) in [(*ia, *a_scalar, 1.0), (*ib, *b_scalar, -1.0)] {
                if let Some(i) = idx {
                    if scalar {
                        add_sum(nodes, adj, i, &g, s);
                    } else {
                        add_scaled(nodes, adj, i, &g, s);
                    }
                }
            }
        }
        Backward::Mul { a, b, ia, ib } => {
            for (idx, own, other) in [(*ia, a, b), (*ib, b, a)] {
                let Some(i) = idx else { continue };
                if own.len() == 1 && g.len() > 1 {
                    let s: f32 = g.iter().zip(other.iter()).map(|(gv, ov)| gv * ov).sum();
                    grad_buf(nodes, adj, i)[0] += s;
                } else if other.len() == 1 {
                    add_scaled(nodes, adj, i, &g, other[0]);
                } else {
                    let buf = grad_buf(nodes, adj, i);
                    for ((o, gv), ov) in buf.iter_mut().zip(&g).zip(other.iter()) {
                        *o += gv * ov;
                    }
                }
            }
        }
        Backward::Scale { s, ia } => add_scaled(nodes, adj, *ia, &g, *s),
        Backward::Identity { ia } => add_into(nodes, adj, *ia, &g),
        Backward::Relu { x, ia } => {
            let buf = grad_buf(nodes, adj, *ia);
            for ((o, gv), xv) in buf.iter_mut().zip(&g).zip(x.iter()) {
                if *xv > 0.0 {
                    *o += gv;
                }
            }
        }
        Backward::Log { x, ia } => {
            let buf = grad_buf(nodes, adj, *ia);
            for ((o, gv), xv) in buf.iter_mut().zip(&g).zip(x.iter()) {
                *o += gv / xv;
            }
        }
        Backward::Exp { y, ia } => {
            let buf = grad_buf(nodes, adj, *ia);
            for ((o, gv), yv) in buf.iter_mut().zip(&g).zip(y.iter()) {
                *o += gv * yv;
            }
        }
        Backward::ClampMin { x, lo, ia } => {
            let buf = grad_buf(nodes, adj, *ia);
            for ((o, gv), xv) in buf.iter_mut().zip(&g).zip(x.iter()) {
                if *xv >= *lo {
                    *o += gv;
                }
            }
        }
        Backward::Sum { ia, n } => {
            let buf = grad_buf(nodes, adj, *ia);
            debug_assert_eq!(buf.len(), *n);
            buf.iter_mut().for_each(|o| *o += g[0]);
        }
        Backward::Mean { ia, n } => {
            let s = g[0] / *n as f32;
            grad_buf(nodes, adj, *ia).iter_mut().for_each(|o| *o += s);
        }
        Backward::AddBias { cols, ia, ib } => {
            if let Some(ia) = *ia {
                add_into(nodes, adj, ia, &g);
            }
            if let Some(ib) = *ib {
                let buf = grad_buf(nodes, adj, ib);
                for row in g.chunks(*cols) {
                    for (o, v) in buf.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        Backward::Softmax { y, cols, tau, ia } => {
            // dz = y ⊙ (dy − ⟨dy, y⟩) / τ, row by row
            let buf = grad_buf(nodes, adj, *ia);
            for ((grow, yrow), orow) in g.chunks(*cols).zip(y.chunks(*cols)).zip(buf.chunks_mut(*cols)) {
                let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o += yv * (gv - dot) / tau;
                }
            }
        }
        Backward::Conv2d { cols, w, geom, ix, iw } => {
            // forward laid out as [B, O, H'·W']; regroup to [B·H'·W', O]
            let (pos_per_img, oc) = (geom.out_h() * geom.out_w(), geom.out_ch);
            let mut gp = vec![0.0; g.len()];
            for b in 0..geom.batch {
                for o in 0..oc {
                    for p in 0..pos_per_img {
                        gp[(b * pos_per_img + p) * oc + o] = g[(b * oc + o) * pos_per_img + p];
                    }
                }
            }
            let (rows, patch) = (geom.positions(), geom.patch());
            if let Some(iw) = *iw {
                // dW[O×patch] += gpᵀ · cols
                gemm_tn(&gp, cols, grad_buf(nodes, adj, iw), rows, oc, patch);
            }
            if let Some(ix) = *ix {
                let mut dcols = vec![0.0; rows * patch];
                gemm_nn(&gp, w, &mut dcols, rows, oc, patch);
                col2im(&dcols, geom, grad_buf(nodes, adj, ix));
            }
        }
        Backward::AddChannelBias { ch, plane, ia, ib } => {
            if let Some(ia) = *ia {
                add_into(nodes, adj, ia, &g);
            }
            if let Some(ib) = *ib {
                let buf = grad_buf(nodes, adj, ib);
                for (i, block) in g.chunks(*plane).enumerate() {
                    buf[i % ch] += block.iter().sum::<f32>();
                }
            }
        }
        Backward::AvgPool2 { batch_ch, h, w, ia } => {
            let (oh, ow) = (h / 2, w / 2);
            let buf = grad_buf(nodes, adj, *ia);
            for c in 0..*batch_ch {
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = g[(c * oh + y) * ow + x] * 0.25;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            buf[(c * h + 2 * y + dy) * w + 2 * x + dx] += gv;
                        }
                    }
                }
            }
        }
    }
}
