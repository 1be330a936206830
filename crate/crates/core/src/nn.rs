//! Width-scaled networks and the tempered softmax head.

use std::fmt;
use std::hash::{DefaultHasher, Hasher};
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;

use crate::seed;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("input batch has shape {got:?}, network expects [B, {expected}]")]
    InputShape { expected: usize, got: Vec<usize> },
    #[error("parameter `{name}` has shape {got:?}, architecture expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter set does not match architecture: {0}")]
    ParamSet(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    TinyCnn,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Mlp => "mlp",
            ArchKind::TinyCnn => "tiny_cnn",
        })
    }
}

impl FromStr for ArchKind {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchKind::Mlp),
            "tiny_cnn" => Ok(ArchKind::TinyCnn),
            other => Err(NnError::InvalidSpec(format!("unknown architecture kind `{other}`"))),
        }
    }
}

/// Architecture descriptor. Hidden widths are `round(base × multiplier)`,
/// never below 1.
///
/// For `tiny_cnn`, `input_dims` is `[C, H, W]` and `base_widths` gives the
/// channel counts of the two 3×3 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub input_dims: Vec<usize>,
    pub num_classes: usize,
    pub base_widths: Vec<usize>,
    pub width_multiplier: f64,
}

impl ArchitectureSpec {
    pub fn mlp(input_dim: usize, num_classes: usize, base_widths: &[usize], width_multiplier: f64) -> Self {
        Self {
            kind: ArchKind::Mlp,
            input_dims: vec![input_dim],
            num_classes,
            base_widths: base_widths.to_vec(),
            width_multiplier,
        }
    }

    pub fn tiny_cnn(input_dims: [usize; 3], num_classes: usize, channels: [usize; 2], width_multiplier: f64) -> Self {
        Self {
            kind: ArchKind::TinyCnn,
            input_dims: input_dims.to_vec(),
            num_classes,
            base_widths: channels.to_vec(),
            width_multiplier,
        }
    }

    /// Same architecture at a different width.
    pub fn with_multiplier(&self, width_multiplier: f64) -> Self {
        Self {
            width_multiplier,
            ..self.clone()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.base_widths
            .iter()
            .map(|&b| ((b as f64 * self.width_multiplier).round() as usize).max(1))
            .collect()
    }

    /// Flattened length of one input row.
    pub fn input_size(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return bad(format!("width multiplier must be positive, got {}", self.width_multiplier));
        }
        if self.base_widths.is_empty() || self.base_widths.contains(&0) {
            return bad(format!("base widths must be non-empty and positive, got {:?}", self.base_widths));
        }
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return bad(format!("input dims must be non-empty and positive, got {:?}", self.input_dims));
        }
        if self.kind == ArchKind::TinyCnn {
            match self.input_dims.as_slice() {
                [_, h, w] if *h >= 2 && *w >= 2 => {}
                _ => return bad(format!("tiny_cnn needs input dims [C, H, W] with H, W >= 2, got {:?}", self.input_dims)),
            }
            if self.base_widths.len() != 2 {
                return bad(format!("tiny_cnn needs exactly two channel widths, got {:?}", self.base_widths));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes, in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let widths = self.widths();
        let k = self.num_classes;
        let mut out = Vec::new();
        match self.kind {
            ArchKind::Mlp => {
                let mut fan_in = self.input_size();
                for (i, &w) in widths.iter().enumerate() {
                    out.push((format!("hidden{i}.weight"), vec![fan_in, w]));
                    out.push((format!("hidden{i}.bias"), vec![w]));
                    fan_in = w;
                }
                out.push(("head.weight".into(), vec![fan_in, k]));
                out.push(("head.bias".into(), vec![k]));
            }
            ArchKind::TinyCnn => {
                let (c, h, w) = (self.input_dims[0], self.input_dims[1], self.input_dims[2]);
                out.push(("conv0.weight".into(), vec![widths[0], c, 3, 3]));
                out.push(("conv0.bias".into(), vec![widths[0]]));
                out.push(("conv1.weight".into(), vec![widths[1], widths[0], 3, 3]));
                out.push(("conv1.bias".into(), vec![widths[1]]));
                out.push(("head.weight".into(), vec![widths[1] * (h / 2) * (w / 2), k]));
                out.push(("head.bias".into(), vec![k]));
            }
        }
        out
    }
}

fn fan_in(shape: &[usize]) -> usize {
    match shape {
        [fan_in, _] => *fan_in,
        [_, c, kh, kw] => c * kh * kw,
        _ => 1,
    }
}

/// Ordered, named parameters plus the architecture they instantiate.
#[derive(Debug)]
pub struct Network {
    spec: ArchitectureSpec,
    params: IndexMap<String, Tensor>,
    seed: u64,
}

impl Clone for Network {
    /// Deep copy: the clone never shares gradient slots with the original.
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.deep_clone())).collect(),
            seed: self.seed,
        }
    }
}

impl Network {
    /// He-uniform weights (`U(±√(6/fan_in))`), zero biases.
    pub fn init(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = IndexMap::new();
        for (name, shape) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let bound = (6.0 / fan_in(&shape) as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::parameter(shape, data)?);
        }
        Ok(Self { spec: spec.clone(), params, seed })
    }

    /// Rebuilds a network from stored parameter arrays, checking that
    /// names and shapes match the architecture exactly.
    pub fn from_params(spec: ArchitectureSpec, arrays: Vec<(String, Vec<usize>, Vec<f32>)>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_shapes();
        if expected.len() != arrays.len() {
            return Err(NnError::ParamSet(format!(
                "expected {} tensors, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        let mut params = IndexMap::new();
        for ((name, shape), (got_name, got_shape, data)) in expected.into_iter().zip(arrays) {
            if name != got_name {
                return Err(NnError::ParamSet(format!("expected `{name}`, found `{got_name}`")));
            }
            if shape != got_shape {
                return Err(NnError::ParamShape { name, expected: shape, got: got_shape });
            }
            params.insert(name, Tensor::parameter(shape, data)?);
        }
        Ok(Self { spec, params, seed })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    /// Stops every parameter from requiring gradients.
    pub fn freeze(&mut self) {
        self.params.values_mut().for_each(Tensor::freeze);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.values().all(|p| !p.requires_grad())
    }

    /// Hash over names, shapes and parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.params {
            h.write(name.as_bytes());
            t.shape().iter().for_each(|&d| h.write_usize(d));
            t.data().iter().for_each(|v| h.write_u32(v.to_bits()));
        }
        h.finish()
    }

    /// Bitwise parameter equality (architecture included).
    pub fn same_params(&self, other: &Network) -> bool {
        self.spec == other.spec
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn p(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Logits `[B × K]` for a `[B × input_size]` batch.
    pub fn forward(&self, tape: &Tape, batch: &Tensor) -> Result<Tensor> {
        let d = self.spec.input_size();
        let rows = match batch.shape() {
            [b, cols] if *cols == d => *b,
            _ => return Err(NnError::InputShape { expected: d, got: batch.shape().to_vec() }),
        };
        match self.spec.kind {
            ArchKind::Mlp => {
                let mut h = batch.clone();
                for i in 0..self.spec.base_widths.len() {
                    let z = tape.matmul(&h, self.p(&format!("hidden{i}.weight")))?;
                    h = tape.relu(&tape.add_bias(&z, self.p(&format!("hidden{i}.bias")))?)?;
                }
                let z = tape.matmul(&h, self.p("head.weight"))?;
                Ok(tape.add_bias(&z, self.p("head.bias"))?)
            }
            ArchKind::TinyCnn => {
                let dims = &self.spec.input_dims;
                let x = tape.reshape(batch, vec![rows, dims[0], dims[1], dims[2]])?;
                let h = tape.conv2d(&x, self.p("conv0.weight"), 1)?;
                let h = tape.relu(&tape.add_channel_bias(&h, self.p("conv0.bias"))?)?;
                let h = tape.conv2d(&h, self.p("conv1.weight"), 1)?;
                let h = tape.relu(&tape.add_channel_bias(&h, self.p("conv1.bias"))?)?;
                let h = tape.avg_pool2(&h)?;
                let flat = h.numel() / rows;
                let h = tape.reshape(&h, vec![rows, flat])?;
                let z = tape.matmul(&h, self.p("head.weight"))?;
                Ok(tape.add_bias(&z, self.p("head.bias"))?)
            }
        }
    }

    /// Gradient-free logits over a full input matrix, evaluated in chunks.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 1024;
        let tape = Tape::no_grad();
        let (rows, cols) = match inputs.shape() {
            [r, c] => (*r, *c),
            other => return Err(NnError::InputShape { expected: self.spec.input_size(), got: other.to_vec() }),
        };
        if rows <= CHUNK {
            return self.forward(&tape, inputs);
        }
        let mut out = Vec::with_capacity(rows * self.spec.num_classes);
        for start in (0..rows).step_by(CHUNK) {
            let end = (start + CHUNK).min(rows);
            let chunk = Tensor::from_vec(vec![end - start, cols], inputs.data()[start * cols..end * cols].to_vec())?;
            out.extend_from_slice(self.forward(&tape, &chunk)?.data());
        }
        Ok(Tensor::from_vec(vec![rows, self.spec.num_classes], out)?)
    }
}

/// Row-wise `softmax(z / τ)`.
pub fn tempered_softmax(tape: &Tape, logits: &Tensor, tau: f32) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(NnError::Temperature(tau));
    }
    Ok(tape.softmax_rows(logits, tau)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn softmax(z: &[f32], k: usize, tau: f32) -> Vec<f32> {
        let t = Tensor::from_vec(vec![z.len() / k, k], z.to_vec()).unwrap();
        tempered_softmax(&Tape::no_grad(), &t, tau).unwrap().to_vec()
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let spec = ArchitectureSpec::mlp(2, 5, &[16, 16], 1.0);
        let a = Network::init(&spec, 7).unwrap();
        let b = Network::init(&spec, 7).unwrap();
        let c = Network::init(&spec, 8).unwrap();
        assert!(a.same_params(&b));
        assert!(!a.same_params(&c));
    }

    #[test]
    fn multiplier_scales_widths() {
        let spec = ArchitectureSpec::mlp(2, 5, &[16, 16], 2.0);
        assert_eq!(spec.widths(), vec![32, 32]);
        assert_eq!(spec.with_multiplier(0.01).widths(), vec![1, 1]);
        assert_eq!(spec.with_multiplier(0.5).widths(), vec![8, 8]);
    }

    #[test]
    fn biases_start_at_zero() {
        let net = Network::init(&ArchitectureSpec::mlp(3, 4, &[8, 6], 1.0), 1).unwrap();
        for (name, t) in net.params() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = (6.0 / t.shape()[0] as f32).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ArchitectureSpec::mlp(2, 1, &[4], 1.0).validate().is_err());
        assert!(ArchitectureSpec::mlp(2, 3, &[4], 0.0).validate().is_err());
        assert!(ArchitectureSpec::mlp(2, 3, &[], 1.0).validate().is_err());
        assert!(ArchitectureSpec::tiny_cnn([1, 1, 4], 3, [2, 2], 1.0).validate().is_err());
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut net = Network::init(&ArchitectureSpec::mlp(3, 4, &[5], 1.0), 2).unwrap();
        for (_, p) in net.params_mut() {
            p.update_data(|d| d.fill(0.0));
        }
        let x = Tensor::from_vec(vec![2, 3], vec![1., -2., 3., 0.5, 0.5, 9.]).unwrap();
        let z = net.forward(&Tape::new(), &x).unwrap();
        assert_eq!(z.shape(), &[2, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Network::init(&ArchitectureSpec::mlp(3, 4, &[5], 1.0), 2).unwrap();
        let x = Tensor::from_vec(vec![2, 2], vec![0.; 4]).unwrap();
        assert!(matches!(net.forward(&Tape::new(), &x), Err(NnError::InputShape { expected: 3, .. })));
    }

    #[test]
    fn cnn_forward_shape() {
        let spec = ArchitectureSpec::tiny_cnn([1, 6, 6], 3, [4, 4], 0.5);
        let net = Network::init(&spec, 3).unwrap();
        let x = Tensor::from_vec(vec![5, 36], (0..180).map(|i| (i % 11) as f32 / 11.0).collect()).unwrap();
        assert_eq!(net.forward(&Tape::new(), &x).unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn clone_does_not_share_grad() {
        let net = Network::init(&ArchitectureSpec::mlp(2, 2, &[3], 1.0), 4).unwrap();
        let copy = net.clone();
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![1, 2], vec![1., 1.]).unwrap();
        let loss = tape.sum(&net.forward(&tape, &x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert!(net.param("head.bias").unwrap().grad().is_some());
        assert!(copy.params().values().all(|p| p.grad().is_none()));
    }

    #[test]
    fn tempered_softmax_hand_values() {
        let y = softmax(&[2.0, 0.0], 2, 2.0);
        assert!((y[0] - 0.731059).abs() < 1e-6 && (y[1] - 0.268941).abs() < 1e-6, "{y:?}");
        // τ = 1 is plain softmax
        let plain: Vec<f32> = {
            let e = [1.0f32.exp(), 2.0f32.exp(), 0.5f32.exp()];
            let s: f32 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let y = softmax(&[1.0, 2.0, 0.5], 3, 1.0);
        assert!(y.iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-7));
        // large τ flattens every row to 1/K
        let y = softmax(&[5.0, -3.0, 12.0, 0.0], 4, 1e6);
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-4));
    }

    #[test]
    fn tempered_softmax_rejects_bad_tau() {
        let z = Tensor::from_vec(vec![1, 2], vec![0., 1.]).unwrap();
        assert!(matches!(tempered_softmax(&Tape::no_grad(), &z, 0.0), Err(NnError::Temperature(_))));
        assert!(tempered_softmax(&Tape::no_grad(), &z, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            z in proptest::collection::vec(-4.0f32..4.0, 12),
            tau in 0.5f32..8.0,
        ) {
            let y = softmax(&z, 4, tau);
            for row in y.chunks(4) {
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            z in proptest::collection::vec(-10.0f32..10.0, 8),
            c in -50.0f32..50.0,
            tau in 0.5f32..4.0,
        ) {
            let shifted: Vec<f32> = z.iter().map(|v| v + c).collect();
            let a = softmax(&z, 4, tau);
            let b = softmax(&shifted, 4, tau);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn param_count_grows_with_width(
            base in proptest::collection::vec(4usize..64, 1..4),
            i in 0usize..5,
        ) {
            let mults = [0.25, 0.5, 1.0, 2.0, 3.0, 4.0];
            let small = Network::init(&ArchitectureSpec::mlp(2, 5, &base, mults[i]), 0).unwrap();
            let large = Network::init(&ArchitectureSpec::mlp(2, 5, &base, mults[i + 1]), 0).unwrap();
            prop_assert!(large.param_count() > small.param_count());
        }
    }
}
