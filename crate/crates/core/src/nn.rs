//! Fully connected networks with hand-written reverse mode.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multibody::{State, Velocity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// On-disk layout of one layer: shape plus row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

impl Mlp {
    /// Layer widths `sizes[0] → … → sizes[last]`; hidden layers use
    /// `hidden` and the output layer is linear. Weights and biases are drawn
    /// from `U(−1/√fan_in, 1/√fan_in)`; `zero_last` zeroes the output layer.
    pub fn new<R: Rng>(sizes: &[usize], hidden: Activation, zero_last: bool, rng: &mut R) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let last = i + 1 == n;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |_, _| {
                    if last && zero_last {
                        0.0
                    } else {
                        rng.gen_range(-bound..bound)
                    }
                };
                let weights = DMatrix::from_fn(fan_out, fan_in, &mut draw);
                let bias = DVector::from_fn(fan_out, &mut draw);
                Layer {
                    weights,
                    bias,
                    activation: if last { Activation::Identity } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weights.nrows()).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = &l.weights * &h + &l.bias;
            z.apply(|v| *v = l.activation.apply(*v));
            h = z;
        }
        h
    }

    pub fn forward_tape(&self, x: &DVector<f64>) -> Tape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let z = &l.weights * &h + &l.bias;
            let y = z.map(|v| l.activation.apply(v));
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        Tape { inputs, pre, output: h }
    }

    /// Reverse pass. Returns the flat parameter gradient (layout of
    /// [`Mlp::params`]) and the input gradient.
    pub fn backward(&self, tape: &Tape, upstream: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre[i];
            let y = if i + 1 == self.layers.len() {
                &tape.output
            } else {
                &tape.inputs[i + 1]
            };
            let dz = DVector::from_fn(z.len(), |k, _| g[k] * l.activation.derivative(z[k], y[k]));
            let dw = &dz * tape.inputs[i].transpose();
            g = l.weights.transpose() * &dz;
            grads.push((dw, dz));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (dw, db) in grads {
            push_row_major(&mut flat, &dw);
            flat.extend(db.iter());
        }
        (flat, g)
    }

    /// Flat parameters: per layer, row-major weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            push_row_major(&mut out, &l.weights);
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let (r, c) = l.weights.shape();
            for i in 0..r {
                for j in 0..c {
                    l.weights[(i, j)] = p[k];
                    k += 1;
                }
            }
            for i in 0..r {
                l.bias[i] = p[k];
                k += 1;
            }
        }
    }

    /// `Σ‖W‖²_F` over weight matrices (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.norm_squared()).sum()
    }

    /// Gradient of [`Mlp::weight_norm_sq`] in the flat layout.
    pub fn weight_norm_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            push_row_major(&mut out, &(l.weights.clone() * 2.0));
            out.extend(std::iter::repeat_n(0.0, l.bias.len()));
        }
        out
    }

    pub fn to_records(&self) -> Vec<LayerRecord> {
        self.layers
            .iter()
            .map(|l| {
                let mut w = Vec::with_capacity(l.weights.len());
                push_row_major(&mut w, &l.weights);
                LayerRecord {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    activation: l.activation,
                    weights: w,
                    bias: l.bias.iter().copied().collect(),
                }
            })
            .collect()
    }

    pub fn from_records(records: &[LayerRecord]) -> Result<Self> {
        let mut layers = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.weights.len() != r.rows * r.cols || r.bias.len() != r.rows {
                return Err(Error::Format(format!("layer {i} shape mismatch")));
            }
            if i > 0 && records[i - 1].rows != r.cols {
                return Err(Error::Format(format!("layer {i} input width does not compose")));
            }
            if r.weights.iter().chain(&r.bias).any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("layer {i} has non-finite values")));
            }
            layers.push(Layer {
                weights: DMatrix::from_row_slice(r.rows, r.cols, &r.weights),
                bias: DVector::from_vec(r.bias.clone()),
                activation: r.activation,
            });
        }
        if layers.is_empty() {
            return Err(Error::Format("network has no layers".into()));
        }
        Ok(Self { layers })
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
}

/// State features with the quaternion replaced by its rotation matrix:
/// `[p (3), R row-major (9), joint angles, v]`.
pub fn quat_feature(x: &State) -> DVector<f64> {
    let r = x.q.orientation.to_rotation_matrix();
    let mut f = Vec::with_capacity(12 + x.q.joint_angles.len() + x.v.dim());
    f.extend(x.q.position.iter());
    for i in 0..3 {
        for j in 0..3 {
            f.push(r[(i, j)]);
        }
    }
    f.extend(&x.q.joint_angles);
    f.extend(x.v.to_flat());
    DVector::from_vec(f)
}

/// Raw state `[p, quaternion w x y z, joint angles, v]`.
pub fn raw_feature(x: &State) -> DVector<f64> {
    let mut f = x.q.to_flat();
    f.extend(x.v.to_flat());
    DVector::from_vec(f)
}

pub const RESIDUAL_HIDDEN: [usize; 2] = [128, 128];
pub const END_TO_END_HIDDEN: [usize; 4] = [256, 256, 256, 256];

/// Additive correction to the continuous acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNet {
    pub mlp: Mlp,
}

impl ResidualNet {
    pub fn new<R: Rng>(n_joints: usize, rng: &mut R) -> Self {
        let n_vel = 6 + n_joints;
        let input = 12 + n_joints + n_vel;
        let sizes = [input, RESIDUAL_HIDDEN[0], RESIDUAL_HIDDEN[1], n_vel];
        Self {
            mlp: Mlp::new(&sizes, Activation::Relu, true, rng),
        }
    }

    pub fn forward(&self, x: &State) -> DVector<f64> {
        self.mlp.forward(&quat_feature(x))
    }

    pub fn forward_tape(&self, x: &State) -> Tape {
        self.mlp.forward_tape(&quat_feature(x))
    }

    /// Parameter gradient for `∂L/∂δ = upstream`.
    pub fn backward(&self, tape: &Tape, upstream: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
        self.mlp.backward(tape, upstream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Raw,
    QuatFeature,
}

/// Maps the full state to the next velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndNet {
    pub mlp: Mlp,
    pub input_mode: InputMode,
}

impl EndToEndNet {
    pub fn new<R: Rng>(n_joints: usize, input_mode: InputMode, rng: &mut R) -> Self {
        let n_vel = 6 + n_joints;
        let input = match input_mode {
            InputMode::Raw => 7 + n_joints + n_vel,
            InputMode::QuatFeature => 12 + n_joints + n_vel,
        };
        let mut sizes = vec![input];
        sizes.extend(END_TO_END_HIDDEN);
        sizes.push(n_vel);
        Self {
            mlp: Mlp::new(&sizes, Activation::Tanh, false, rng),
            input_mode,
        }
    }

    pub fn features(&self, x: &State) -> DVector<f64> {
        match self.input_mode {
            InputMode::Raw => raw_feature(x),
            InputMode::QuatFeature => quat_feature(x),
        }
    }

    pub fn forward(&self, x: &State) -> Velocity {
        Velocity::from_slice(self.mlp.forward(&self.features(x)).as_slice())
    }
}

/// `w_res·mean‖δ‖² + w_res_w·Σ‖W‖²_F`.
pub fn regularization(net: &Mlp, deltas: &[DVector<f64>], w_res: f64, w_res_w: f64) -> f64 {
    let mean = if deltas.is_empty() {
        0.0
    } else {
        deltas.iter().map(|d| d.norm_squared()).sum::<f64>() / deltas.len() as f64
    };
    w_res * mean + w_res_w * net.weight_norm_sq()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multibody::Configuration;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, nj: usize) -> State {
        let mut q = Configuration::identity(nj);
        q.position = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.0..1.0),
        );
        q.orientation = UnitQuaternion::from_scaled_axis(Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        ));
        for a in &mut q.joint_angles {
            *a = rng.gen_range(-1.0..1.0);
        }
        let v: Vec<f64> = (0..6 + nj).map(|_| rng.gen_range(-3.0..3.0)).collect();
        State {
            q,
            v: Velocity::from_slice(&v),
        }
    }

    fn randomize(mlp: &mut Mlp, rng: &mut ChaCha8Rng) {
        let p: Vec<f64> = (0..mlp.n_params()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        mlp.set_params(&p);
    }

    #[test]
    fn quat_feature_layout() {
        let mut x = State::rest(1);
        let f = quat_feature(&x);
        assert_eq!(f.len(), (8 - 4) + 9 + 7);
        assert_eq!(&f.as_slice()[3..12], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        x.q.orientation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let f = quat_feature(&x);
        let expected = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (a, e) in f.as_slice()[3..12].iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn quat_feature_rotation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_state(&mut rng, 0);
        let g = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let mut y = x.clone();
        y.q.orientation = g * x.q.orientation;
        let rx = x.q.orientation.to_rotation_matrix();
        let composed = g.to_rotation_matrix() * rx;
        let f = quat_feature(&y);
        for i in 0..3 {
            for j in 0..3 {
                assert!((f[3 + 3 * i + j] - composed[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut net = ResidualNet::new(1, &mut rng);
        let x = random_state(&mut rng, 1);
        net.mlp.set_params(&vec![0.0; net.mlp.n_params()]);
        assert_eq!(net.forward(&x).norm(), 0.0);
        let fresh = ResidualNet::new(1, &mut rng);
        assert_eq!(fresh.forward(&x).norm(), 0.0);
        let mut e2e = EndToEndNet::new(0, InputMode::Raw, &mut rng);
        e2e.mlp.set_params(&vec![0.0; e2e.mlp.n_params()]);
        let out = e2e.forward(&random_state(&mut rng, 0));
        assert_eq!(out.dim(), 6);
        assert_eq!(out.to_dvector().norm(), 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut net = ResidualNet::new(0, &mut rng);
        randomize(&mut net.mlp, &mut rng);
        let x = random_state(&mut rng, 0);
        let a = net.forward(&x);
        let b = net.forward(&x);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn relu_net_is_lipschitz_on_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut net = ResidualNet::new(0, &mut rng);
        randomize(&mut net.mlp, &mut rng);
        let bound: f64 = net.mlp.layers.iter().map(|l| l.weights.norm()).product();
        for _ in 0..100 {
            let x = DVector::from_fn(18, |_, _| rng.gen_range(-1.0..1.0));
            let e = DVector::from_fn(18, |_, _| rng.gen_range(-1e-3..1e-3));
            let d = (net.mlp.forward(&(&x + &e)) - net.mlp.forward(&x)).norm();
            assert!(d <= bound * e.norm() + 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut net = ResidualNet::new(1, &mut rng);
        randomize(&mut net.mlp, &mut rng);
        let tape = net.forward_tape(&random_state(&mut rng, 1));
        let (g, gi) = net.backward(&tape, &DVector::zeros(7));
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(gi.norm(), 0.0);
    }

    fn fd_check(mlp: &mut Mlp, rng: &mut ChaCha8Rng) {
        let x = DVector::from_fn(mlp.input_dim(), |_, _| rng.gen_range(-1.0..1.0));
        let up = DVector::from_fn(mlp.output_dim(), |_, _| rng.gen_range(-1.0..1.0));
        let loss = |m: &Mlp| m.forward(&x).dot(&up);
        let tape = mlp.forward_tape(&x);
        let (g, gi) = mlp.backward(&tape, &up);
        let base = mlp.params();
        for _ in 0..20 {
            let k = rng.gen_range(0..base.len());
            let h = 1e-6;
            let mut p = base.clone();
            p[k] += h;
            mlp.set_params(&p);
            let fp = loss(mlp);
            p[k] -= 2.0 * h;
            mlp.set_params(&p);
            let fm = loss(mlp);
            mlp.set_params(&base);
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(g[k].abs()).max(1e-6);
            assert!((fd - g[k]).abs() / scale < 1e-4, "param {k}: {fd} vs {}", g[k]);
        }
        for k in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (mlp.forward(&xp).dot(&up) - mlp.forward(&xm).dot(&up)) / (2.0 * h);
            let scale = fd.abs().max(gi[k].abs()).max(1e-6);
            assert!((fd - gi[k]).abs() / scale < 1e-4);
        }
    }

    #[test]
    fn residual_backprop_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..3 {
            let mut net = ResidualNet::new(1, &mut rng);
            randomize(&mut net.mlp, &mut rng);
            fd_check(&mut net.mlp, &mut rng);
        }
    }

    #[test]
    fn end_to_end_backprop_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut net = EndToEndNet::new(0, InputMode::Raw, &mut rng);
        fd_check(&mut net.mlp, &mut rng);
    }

    #[test]
    fn linear_network_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let mlp = Mlp::new(&[4, 3], Activation::Identity, false, &mut rng);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let up = DVector::from_vec(vec![0.2, -1.0, 0.7]);
        let (g, gi) = mlp.backward(&mlp.forward_tape(&x), &up);
        let outer = &up * x.transpose();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(g[4 * i + j], outer[(i, j)]);
            }
            assert_eq!(g[12 + i], up[i]);
        }
        assert!((gi - mlp.layers[0].weights.transpose() * &up).norm() < 1e-15);
    }

    #[test]
    fn regularization_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let mut net = ResidualNet::new(0, &mut rng);
        net.mlp.set_params(&vec![0.0; net.mlp.n_params()]);
        assert_eq!(regularization(&net.mlp, &[DVector::zeros(6)], 1.0, 0.1), 0.0);
        let d = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![0.0, 2.0])];
        let mut lin = Mlp::new(&[1, 1], Activation::Identity, false, &mut rng);
        lin.set_params(&[3.0, 5.0]);
        assert!((regularization(&lin, &d, 0.5, 0.1) - (0.5 * 4.5 + 0.1 * 9.0)).abs() < 1e-15);
    }

    #[test]
    fn records_roundtrip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut net = ResidualNet::new(1, &mut rng);
        randomize(&mut net.mlp, &mut rng);
        let json = serde_json::to_string(&net.mlp.to_records()).unwrap();
        let back: Vec<LayerRecord> = serde_json::from_str(&json).unwrap();
        let mlp = Mlp::from_records(&back).unwrap();
        assert_eq!(mlp, net.mlp);
        assert_eq!(serde_json::to_string(&mlp.to_records()).unwrap(), json);
    }
}
