//! Encoder `f`, classifier `h` and EMP-learner `g`.
//!
//! `f` and `h` form the parameter group θ; `g` alone forms φ. The two
//! groups are separate tensors and every update path names the group it
//! touches, so a step on one group cannot move the other.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::domains::rng_from_seed;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Number of ratios the EMP-learner chooses between.
pub const GRID_SIZE: usize = 11;

/// The fixed mixup ratios `0.0, 0.1, …, 1.0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioGrid {
    values: [f64; GRID_SIZE],
}

impl Default for RatioGrid {
    fn default() -> Self {
        let mut values = [0.0; GRID_SIZE];
        for (k, v) in values.iter_mut().enumerate() {
            *v = k as f64 / 10.0;
        }
        Self { values }
    }
}

impl RatioGrid {
    pub fn values(&self) -> &[f64; GRID_SIZE] {
        &self.values
    }

    pub fn get(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// Grid as a `[11×1]` column, for expected-ratio products.
    pub fn column(&self) -> Tensor {
        Tensor::new(&[GRID_SIZE, 1], self.values.to_vec()).expect("grid shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub feat_dim: usize,
    pub emp_hidden: usize,
}

impl ModelDims {
    /// Encoder `d → 64 → 32`, EMP-learner `64 → 32 → 11`.
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            n_classes,
            hidden: 64,
            feat_dim: 32,
            emp_hidden: 32,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.input_dim,
            self.n_classes,
            self.hidden,
            self.feat_dim,
            self.emp_hidden,
        ];
        if all.contains(&0) {
            return Err(Error::contract(format!("model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Affine map `x·W + b` with `W` of shape `[in×out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut crate::domains::Rng) -> Self {
        let bound = libm::sqrt(gain / fan_in as f64);
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(&[fan_in, fan_out], w).expect("shape").into_parameter(),
            bias: Tensor::zeros(&[fan_out]).into_parameter(),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, [Var; 2])> {
        let (w, b) = if trainable {
            (tape.leaf(&self.weight), tape.leaf(&self.bias))
        } else {
            (tape.constant(&self.weight), tape.constant(&self.bias))
        };
        let y = tape.matmul(x, w)?;
        Ok((tape.add_bias(y, b)?, [w, b]))
    }
}

/// Parameter group selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Encoder and classifier.
    Theta,
    /// EMP-learner.
    Phi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    seed: u64,
    pub encoder_in: Linear,
    pub encoder_out: Linear,
    pub classifier: Linear,
    pub emp_in: Linear,
    pub emp_out: Linear,
}

/// Checkpoint names, in the order of [`ModelParams::named_params`].
pub const PARAM_NAMES: [&str; 10] = [
    "encoder.0.weight",
    "encoder.0.bias",
    "encoder.1.weight",
    "encoder.1.bias",
    "classifier.weight",
    "classifier.bias",
    "emp_learner.0.weight",
    "emp_learner.0.bias",
    "emp_learner.1.weight",
    "emp_learner.1.bias",
];

/// Fresh model: uniform fan-in scaled weights, zero biases.
pub fn init_model(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = rng_from_seed(seed ^ 0x9e37_79b9_7f4a_7c15);
    // He-uniform ahead of a ReLU, LeCun-uniform ahead of a linear output.
    Ok(ModelParams {
        dims,
        seed,
        encoder_in: Linear::init(dims.input_dim, dims.hidden, 6.0, &mut rng),
        encoder_out: Linear::init(dims.hidden, dims.feat_dim, 3.0, &mut rng),
        classifier: Linear::init(dims.feat_dim, dims.n_classes, 3.0, &mut rng),
        emp_in: Linear::init(2 * dims.feat_dim, dims.emp_hidden, 6.0, &mut rng),
        emp_out: Linear::init(dims.emp_hidden, GRID_SIZE, 3.0, &mut rng),
    })
}

impl ModelParams {
    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn named_params(&self) -> [(&'static str, &Tensor); 10] {
        let t = [
            &self.encoder_in.weight,
            &self.encoder_in.bias,
            &self.encoder_out.weight,
            &self.encoder_out.bias,
            &self.classifier.weight,
            &self.classifier.bias,
            &self.emp_in.weight,
            &self.emp_in.bias,
            &self.emp_out.weight,
            &self.emp_out.bias,
        ];
        core::array::from_fn(|i| (PARAM_NAMES[i], t[i]))
    }

    /// Rebuilds a model from named arrays; every name in [`PARAM_NAMES`]
    /// must be present with the shape implied by `dims`.
    pub fn from_named(dims: ModelDims, seed: u64, arrays: &[(&str, &Tensor)]) -> Result<Self> {
        let mut m = init_model(dims, seed)?;
        let expected: Vec<Vec<usize>> = m.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        for (k, slot) in m.all_mut().into_iter().enumerate() {
            let name = PARAM_NAMES[k];
            let t = arrays
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| *t)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if t.shape() != expected[k].as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    expected[k]
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(m)
    }

    fn all_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.encoder_in.weight,
            &mut self.encoder_in.bias,
            &mut self.encoder_out.weight,
            &mut self.encoder_out.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
            &mut self.emp_in.weight,
            &mut self.emp_in.bias,
            &mut self.emp_out.weight,
            &mut self.emp_out.bias,
        ]
    }

    /// Mutable view of one parameter group, in a fixed order.
    pub fn group_mut(&mut self, group: Group) -> Vec<&mut Tensor> {
        let [a, b, c, d, e, f, g, h, i, j] = self.all_mut();
        match group {
            Group::Theta => alloc::vec![a, b, c, d, e, f],
            Group::Phi => alloc::vec![g, h, i, j],
        }
    }

    pub fn zero_grad(&mut self) {
        self.all_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Checksum over every tensor of a group.
    pub fn checksum(&self, group: Group) -> u64 {
        let p = self.named_params();
        let range = match group {
            Group::Theta => 0..6,
            Group::Phi => 6..10,
        };
        p[range]
            .iter()
            .fold(0u64, |h, (_, t)| h.rotate_left(7) ^ t.checksum())
    }

    /// Records the model on `tape`. Groups not listed in `trainable` are
    /// recorded as constants.
    pub fn bind(&self, trainable: &[Group]) -> BoundModel<'_> {
        BoundModel {
            params: self,
            theta: trainable.contains(&Group::Theta),
            phi: trainable.contains(&Group::Phi),
            vars: Vec::new(),
        }
    }


    /// `f(x)`, detached.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = self.bind(&[]);
        let xv = tape.constant(x);
        let z = b.encode(&mut tape, xv)?;
        Ok(tape.tensor(z))
    }

    /// `h(z)`, detached.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = self.bind(&[]);
        let zv = tape.constant(z);
        let y = b.classify(&mut tape, zv)?;
        Ok(tape.tensor(y))
    }

    /// `h(f(x))`, detached.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = self.bind(&[]);
        let xv = tape.constant(x);
        let y = b.logits(&mut tape, xv)?;
        Ok(tape.tensor(y))
    }

    /// `g(zs ⊕ zt)`, detached: one row of 11 grid logits per pair.
    pub fn emp_forward(&self, zs: &Tensor, zt: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = self.bind(&[]);
        let (a, c) = (tape.constant(zs), tape.constant(zt));
        let y = b.emp_forward(&mut tape, a, c)?;
        Ok(tape.tensor(y))
    }

    /// One-hot argmax of `h(f(x))`; ties go to the lowest class index.
    pub fn pseudo_labels(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.logits(x)?;
        Tensor::one_hot(&z.argmax_rows(), self.dims.n_classes)
    }
}

/// A model recorded on a tape, remembering the variables of its trainable
/// tensors so gradients can be routed back to [`ModelParams`].
#[derive(Debug)]
pub struct BoundModel<'a> {
    params: &'a ModelParams,
    theta: bool,
    phi: bool,
    // (index into PARAM_NAMES, tape variable)
    vars: Vec<(usize, Var)>,
}

impl BoundModel<'_> {
    fn layer(&mut self, tape: &mut Tape, x: Var, slot: usize) -> Result<Var> {
        let p = self.params;
        let (layer, trainable) = match slot {
            0 => (&p.encoder_in, self.theta),
            2 => (&p.encoder_out, self.theta),
            4 => (&p.classifier, self.theta),
            6 => (&p.emp_in, self.phi),
            8 => (&p.emp_out, self.phi),
            _ => unreachable!("layer slots are even"),
        };
        let (y, [w, b]) = layer.apply(tape, x, trainable)?;
        if trainable {
            self.vars.push((slot, w));
            self.vars.push((slot + 1, b));
        }
        Ok(y)
    }

    pub fn encode(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.params.dims.input_dim {
            return Err(Error::shape(
                "encode",
                format!("input {:?}, model expects {} features", shape, self.params.dims.input_dim),
            ));
        }
        let h = self.layer(tape, x, 0)?;
        let h = tape.relu(h);
        self.layer(tape, h, 2)
    }

    pub fn classify(&mut self, tape: &mut Tape, z: Var) -> Result<Var> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.params.dims.feat_dim {
            return Err(Error::shape(
                "classify",
                format!("features {:?}, classifier expects {}", shape, self.params.dims.feat_dim),
            ));
        }
        self.layer(tape, z, 4)
    }

    pub fn logits(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = self.encode(tape, x)?;
        self.classify(tape, z)
    }

    pub fn emp_forward(&mut self, tape: &mut Tape, zs: Var, zt: Var) -> Result<Var> {
        if tape.shape(zs) != tape.shape(zt) {
            return Err(Error::shape(
                "emp_forward",
                format!("{:?} vs {:?}", tape.shape(zs), tape.shape(zt)),
            ));
        }
        let zc = tape.concat_cols(zs, zt)?;
        let h = self.layer(tape, zc, 6)?;
        let h = tape.relu(h);
        self.layer(tape, h, 8)
    }

    /// Ends recording; the returned binding routes gradients back to the
    /// parameter tensors.
    pub fn finish(self) -> Binding {
        Binding { vars: self.vars }
    }
}

/// Tape variables of the trainable tensors of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: Vec<(usize, Var)>,
}

impl Binding {
    /// Adds `scale · ∂loss/∂p` into every trainable parameter touched on the
    /// tape. A tensor recorded several times receives the sum.
    pub fn accumulate(&self, grads: &Gradients, target: &mut ModelParams, scale: f64) -> Result<()> {
        let slots = target.all_mut();
        for &(slot, v) in &self.vars {
            grads.accumulate_scaled(v, slots[slot], scale)?;
        }
        Ok(())
    }

    /// Parameter slots (indices into [`PARAM_NAMES`]) and their variables.
    pub fn vars(&self) -> &[(usize, Var)] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;

    fn small() -> ModelParams {
        init_model(
            ModelDims {
                input_dim: 3,
                n_classes: 4,
                hidden: 5,
                feat_dim: 4,
                emp_hidden: 6,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn grid_is_increasing_with_unit_endpoints() {
        let g = RatioGrid::default();
        assert_eq!(g.get(0), 0.0);
        assert_eq!(g.get(10), 1.0);
        assert_eq!(g.get(7), 0.7);
        assert!(g.values().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        assert_eq!(small(), small());
        let m = small();
        let x = Tensor::new(&[2, 3], alloc::vec![0.5, -1.0, 2.0, 1e3, -1e3, 0.0]).unwrap();
        assert!(m.logits(&x).unwrap().data().iter().all(|v| v.is_finite()));
        assert_eq!(m.emp_out.weight.shape(), &[6, GRID_SIZE]);
        assert_eq!(m.emp_in.weight.shape(), &[8, 6]);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut m = small();
        for t in m.group_mut(Group::Theta) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::new(&[2, 3], alloc::vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap();
        assert!(m.encode(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_give_identical_outputs() {
        let m = small();
        let x = Tensor::new(&[2, 3], alloc::vec![0.3, -0.2, 1.1, 0.3, -0.2, 1.1]).unwrap();
        let z = m.encode(&x).unwrap();
        assert_eq!(z.row(0), z.row(1));
        let y = m.classify(&z).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = small();
        assert!(matches!(m.encode(&Tensor::zeros(&[2, 4])), Err(Error::Shape { .. })));
        assert!(matches!(m.classify(&Tensor::zeros(&[2, 3])), Err(Error::Shape { .. })));
        assert!(m.emp_forward(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn zero_emp_weights_give_uniform_grid() {
        let mut m = small();
        for t in m.group_mut(Group::Phi) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = Tensor::new(&[1, 4], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = softmax_rows(&m.emp_forward(&z, &z).unwrap());
        let lam: f64 = p.row(0).iter().zip(RatioGrid::default().values()).map(|(a, b)| a * b).sum();
        assert!((lam - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pseudo_labels_tie_break_low() {
        let mut m = small();
        for t in m.group_mut(Group::Theta) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m.classifier.bias.data_mut().copy_from_slice(&[0.0, 2.0, 2.0, 1.0]);
        let y = m.pseudo_labels(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(y.argmax_rows(), [1, 1, 1]);
        assert_eq!(y.row(0), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn from_named_round_trips() {
        let m = small();
        let named = m.named_params();
        let again = ModelParams::from_named(m.dims(), m.seed(), &named).unwrap();
        assert_eq!(m, again);
        assert!(ModelParams::from_named(m.dims(), m.seed(), &named[..9]).is_err());
    }
}
