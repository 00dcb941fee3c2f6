//! Dense feed-forward network with batch normalization and dropout.
//!
//! Hidden layers apply `affine → batchnorm (optional) → relu → dropout`;
//! the output layer is a plain affine map producing one logit per class.
//! Trainable tensors are addressed in declaration order: for each layer its
//! weight and bias, then (hidden layers with batchnorm) γ and β. Optimizers,
//! gradient checking and checkpoints all rely on that order.

mod checkpoint;
mod gradcheck;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, FORMAT_VERSION};
pub use gradcheck::{analytic_gradients, grad_check, relative_error};
pub use loss::cross_entropy_loss;
pub use train::{train, EpochStats, LrSchedule, Optimizer, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::{softmax, Matrix};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight on the old running statistic in the batchnorm moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// `[d_in, h_1, ..., h_L, K]`.
    pub layer_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub use_batchnorm: bool,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(layer_dims: Vec<usize>) -> Self {
        Self {
            layer_dims,
            dropout_rate: 0.0,
            use_batchnorm: true,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::invalid("network needs at least input and output widths"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::invalid("layer widths must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_outputs(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Width of the penultimate activations.
    pub fn embedding_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn num_hidden(&self) -> usize {
        self.layer_dims.len() - 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub layers: Vec<Dense>,
    /// One entry per hidden layer.
    pub norms: Vec<Option<BatchNorm>>,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-hidden-layer values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Matrix,
    /// Normalized pre-activations, when batchnorm is on.
    pub xhat: Option<Matrix>,
    pub inv_std: Option<Vec<f64>>,
    /// Whether `inv_std` came from the batch (train) or running stats (eval).
    pub batch_stats: bool,
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
    /// Input to the relu.
    pub pre_activation: Matrix,
    /// Inverted-dropout multipliers (0 or 1/(1-p)).
    pub mask: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub hidden: Vec<LayerCache>,
    /// Input to the output layer.
    pub penultimate: Matrix,
}

/// Gradients aligned with [`MlpModel::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

/// Initializes weights from N(0, 2/fan_in), zero biases, γ = 1, β = 0.
pub fn init_model(config: &MlpConfig, seed: u64) -> Result<MlpModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(config.layer_dims.len() - 1);
    for w in config.layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
        layers.push(Dense {
            weight: Matrix::from_vec(fan_out, fan_in, data)?,
            bias: vec![0.0; fan_out],
        });
    }
    let norms = (0..config.num_hidden())
        .map(|l| config.use_batchnorm.then(|| BatchNorm::new(config.layer_dims[l + 1])))
        .collect();
    Ok(MlpModel {
        config: config.clone(),
        layers,
        norms,
        rng_seed: seed,
    })
}

impl MlpModel {
    /// Names of the trainable tensors in declaration order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            names.push(format!("layer{l}.weight"));
            names.push(format!("layer{l}.bias"));
            if matches!(self.norms.get(l), Some(Some(_))) {
                names.push(format!("layer{l}.bn.gamma"));
                names.push(format!("layer{l}.bn.beta"));
            }
        }
        names
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(layer.weight.as_slice());
            out.push(&layer.bias);
            if let Some(Some(bn)) = self.norms.get(l) {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut norms = self.norms.iter_mut();
        for layer in self.layers.iter_mut() {
            out.push(layer.weight.as_mut_slice());
            out.push(&mut layer.bias);
            if let Some(Some(bn)) = norms.next() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.config.input_dim() {
            return Err(Error::DimensionMismatch {
                stage: "network input",
                expected: self.config.input_dim(),
                found: batch.cols(),
            });
        }
        Ok(())
    }

    /// Runs the network. In train mode batchnorm uses batch statistics and
    /// dropout masks are drawn from `seed`; in eval mode running statistics
    /// are used, there is no dropout and `seed` is ignored. Running
    /// statistics are not touched here, see [`MlpModel::update_running_stats`].
    pub fn forward(&self, batch: &Matrix, mode: Mode, seed: u64) -> Result<(Matrix, ForwardCache)> {
        self.check_input(batch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.config.dropout_rate;
        let n = batch.rows();
        let mut x = batch.clone();
        let mut hidden = Vec::with_capacity(self.config.num_hidden());
        for l in 0..self.config.num_hidden() {
            let layer = &self.layers[l];
            let mut z = x.affine(&layer.weight, &layer.bias);
            let width = z.cols();
            let mut cache = LayerCache {
                input: x,
                xhat: None,
                inv_std: None,
                batch_stats: false,
                batch_mean: None,
                batch_var: None,
                pre_activation: Matrix::zeros(0, 0),
                mask: None,
            };
            if let Some(bn) = &self.norms[l] {
                let (mean, var, batch_stats) = match mode {
                    Mode::Train => {
                        let (m, v) = column_moments(&z);
                        (m, v, true)
                    }
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), false),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                let mut xhat = Matrix::zeros(n, width);
                for r in 0..n {
                    let zr = z.row_mut(r);
                    let xr = xhat.row_mut(r);
                    for j in 0..width {
                        xr[j] = (zr[j] - mean[j]) * inv_std[j];
                        zr[j] = bn.gamma[j] * xr[j] + bn.beta[j];
                    }
                }
                cache.xhat = Some(xhat);
                cache.inv_std = Some(inv_std);
                cache.batch_stats = batch_stats;
                if batch_stats {
                    cache.batch_mean = Some(mean);
                    cache.batch_var = Some(var);
                }
            }
            cache.pre_activation = z.clone();
            for v in z.as_mut_slice() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            if mode == Mode::Train && p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let mut mask = Matrix::zeros(n, width);
                for (m, a) in mask.as_mut_slice().iter_mut().zip(z.as_mut_slice()) {
                    *m = if rng.random::<f64>() < p { 0.0 } else { keep };
                    *a *= *m;
                }
                cache.mask = Some(mask);
            }
            hidden.push(cache);
            x = z;
        }
        let out = self.layers.last().unwrap();
        let logits = x.affine(&out.weight, &out.bias);
        Ok((
            logits,
            ForwardCache {
                hidden,
                penultimate: x,
            },
        ))
    }

    /// Backpropagates `dlogits` through the cached forward pass.
    pub fn backward(&self, dlogits: &Matrix, cache: &ForwardCache) -> Gradients {
        let n_layers = self.layers.len();
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_layers];

        let out = &self.layers[n_layers - 1];
        per_layer[n_layers - 1] = vec![
            dlogits.t_matmul(&cache.penultimate).into_vec(),
            dlogits.column_sums(),
        ];
        let mut dx = dlogits.matmul(&out.weight);

        for l in (0..self.config.num_hidden()).rev() {
            let c = &cache.hidden[l];
            let n = dx.rows();
            let width = dx.cols();
            let mut dy = dx;
            if let Some(mask) = &c.mask {
                for (d, m) in dy.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *d *= m;
                }
            }
            for (d, pre) in dy.as_mut_slice().iter_mut().zip(c.pre_activation.as_slice()) {
                if *pre <= 0.0 {
                    *d = 0.0;
                }
            }
            let mut extra = Vec::new();
            let dz = if let (Some(bn), Some(xhat), Some(inv_std)) = (&self.norms[l], &c.xhat, &c.inv_std) {
                let mut dgamma = vec![0.0; width];
                let mut dbeta = vec![0.0; width];
                for r in 0..n {
                    for j in 0..width {
                        dgamma[j] += dy.get(r, j) * xhat.get(r, j);
                        dbeta[j] += dy.get(r, j);
                    }
                }
                let mut dz = Matrix::zeros(n, width);
                if c.batch_stats {
                    let nf = n as f64;
                    for j in 0..width {
                        // dxhat = dy * γ, so Σdxhat = γ·dβ and Σdxhat·xhat = γ·dγ
                        let sum_dxhat = bn.gamma[j] * dbeta[j];
                        let sum_dxhat_xhat = bn.gamma[j] * dgamma[j];
                        for r in 0..n {
                            let dxhat = dy.get(r, j) * bn.gamma[j];
                            let v = inv_std[j] / nf
                                * (nf * dxhat - sum_dxhat - xhat.get(r, j) * sum_dxhat_xhat);
                            dz.set(r, j, v);
                        }
                    }
                } else {
                    for r in 0..n {
                        for j in 0..width {
                            dz.set(r, j, dy.get(r, j) * bn.gamma[j] * inv_std[j]);
                        }
                    }
                }
                extra.push(dgamma);
                extra.push(dbeta);
                dz
            } else {
                dy
            };
            let layer = &self.layers[l];
            let mut grads = vec![dz.t_matmul(&c.input).into_vec(), dz.column_sums()];
            grads.extend(extra);
            per_layer[l] = grads;
            dx = dz.matmul(&layer.weight);
        }
        Gradients {
            tensors: per_layer.into_iter().flatten().collect(),
        }
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (bn, c) in self.norms.iter_mut().zip(&cache.hidden) {
            if let (Some(bn), Some(mean), Some(var)) = (bn, &c.batch_mean, &c.batch_var) {
                for j in 0..mean.len() {
                    bn.running_mean[j] = BN_MOMENTUM * bn.running_mean[j] + (1.0 - BN_MOMENTUM) * mean[j];
                    bn.running_var[j] = BN_MOMENTUM * bn.running_var[j] + (1.0 - BN_MOMENTUM) * var[j];
                }
            }
        }
    }

    /// Eval-mode logits.
    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch, Mode::Eval, 0)?.0)
    }

    /// Eval-mode class probabilities, one row per sample.
    pub fn predict_proba(&self, batch: &Matrix) -> Result<Matrix> {
        let logits = self.logits(batch)?;
        let mut out = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            out.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
        }
        Ok(out)
    }

    /// Eval-mode penultimate activations (post-relu, before the output
    /// layer) for every row of `batch`.
    pub fn embed_batch(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch, Mode::Eval, 0)?.1.penultimate)
    }

    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        let batch = Matrix::from_rows(&[features], features.len())?;
        self.check_input(&batch)?;
        Ok(self.embed_batch(&batch)?.into_vec())
    }

    /// Applies only the output layer to embeddings.
    pub fn head(&self, embeddings: &Matrix) -> Result<Matrix> {
        let out = self.layers.last().unwrap();
        if embeddings.cols() != out.weight.cols() {
            return Err(Error::DimensionMismatch {
                stage: "output layer",
                expected: out.weight.cols(),
                found: embeddings.cols(),
            });
        }
        Ok(embeddings.affine(&out.weight, &out.bias))
    }
}

/// Column means and biased variances.
fn column_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows() as f64;
    let mean: Vec<f64> = z.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; z.cols()];
    for row in z.iter_rows() {
        for j in 0..row.len() {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = MlpConfig::new(vec![4, 3, 2]);
        let a = init_model(&cfg, 7).unwrap();
        let b = init_model(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(&cfg, 8).unwrap());
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let bn = a.norms[0].as_ref().unwrap();
        assert!(bn.gamma.iter().all(|&g| g == 1.0) && bn.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_weight_spread_matches_he_scale() {
        let cfg = MlpConfig::new(vec![400, 250, 2]);
        let m = init_model(&cfg, 3).unwrap();
        let w = m.layers[0].weight.as_slice();
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0f64 / 400.0).sqrt();
        assert!((std - target).abs() / target < 0.05, "std {std} vs {target}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(init_model(&MlpConfig::new(vec![3]), 0).is_err());
        assert!(init_model(&MlpConfig::new(vec![3, 0, 2]), 0).is_err());
        let mut cfg = MlpConfig::new(vec![3, 2]);
        cfg.dropout_rate = 1.0;
        assert!(init_model(&cfg, 0).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_logits_and_embedding() {
        let mut cfg = MlpConfig::new(vec![3, 4, 2]);
        cfg.use_batchnorm = false;
        let mut m = init_model(&cfg, 1).unwrap();
        for t in m.tensors_mut() {
            t.fill(0.0);
        }
        let x = random_batch(5, 3, 2);
        let (logits, _) = m.forward(&x, Mode::Train, 3).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(m.embed(x.row(0)).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn hand_computed_single_hidden_unit() {
        let mut cfg = MlpConfig::new(vec![2, 1, 2]);
        cfg.use_batchnorm = false;
        let mut m = init_model(&cfg, 0).unwrap();
        m.layers[0].weight = Matrix::from_vec(1, 2, vec![0.5, -1.0]).unwrap();
        m.layers[0].bias = vec![0.25];
        m.layers[1].weight = Matrix::from_vec(2, 1, vec![2.0, -3.0]).unwrap();
        m.layers[1].bias = vec![0.1, 0.2];
        // h = relu(0.5*2 - 1*0.5 + 0.25) = 0.75
        let x = Matrix::from_vec(2, 2, vec![2.0, 0.5, 0.0, 1.0]).unwrap();
        let logits = m.logits(&x).unwrap();
        assert_eq!(logits.row(0), &[2.0 * 0.75 + 0.1, -3.0 * 0.75 + 0.2]);
        // second row: relu(-1 + 0.25) = 0
        assert_eq!(logits.row(1), &[0.1, 0.2]);
    }

    #[test]
    fn eval_mode_is_repeatable() {
        let mut cfg = MlpConfig::new(vec![6, 8, 5, 3]);
        cfg.dropout_rate = 0.5;
        let m = init_model(&cfg, 4).unwrap();
        let x = random_batch(7, 6, 5);
        assert_eq!(m.logits(&x).unwrap(), m.logits(&x).unwrap());
    }

    #[test]
    fn dropout_masks_follow_the_seed() {
        let mut cfg = MlpConfig::new(vec![6, 16, 3]);
        cfg.dropout_rate = 0.5;
        let m = init_model(&cfg, 4).unwrap();
        let x = random_batch(4, 6, 5);
        let a = m.forward(&x, Mode::Train, 10).unwrap().0;
        assert_eq!(a, m.forward(&x, Mode::Train, 10).unwrap().0);
        assert_ne!(a, m.forward(&x, Mode::Train, 11).unwrap().0);
    }

    #[test]
    fn embedding_then_head_reproduces_logits() {
        let mut cfg = MlpConfig::new(vec![5, 9, 4, 3]);
        cfg.dropout_rate = 0.2;
        let m = init_model(&cfg, 12).unwrap();
        let x = random_batch(6, 5, 13);
        let emb = m.embed_batch(&x).unwrap();
        assert_eq!(emb.cols(), 4);
        let via_head = m.head(&emb).unwrap();
        let direct = m.logits(&x).unwrap();
        for (a, b) in via_head.as_slice().iter().zip(direct.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = init_model(&MlpConfig::new(vec![3, 2]), 0).unwrap();
        let x = random_batch(1, 4, 0);
        assert!(matches!(
            m.forward(&x, Mode::Eval, 0),
            Err(Error::DimensionMismatch { expected: 3, found: 4, .. })
        ));
        assert!(m.embed(&[0.0; 2]).is_err());
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let m0 = init_model(&MlpConfig::new(vec![3, 4, 2]), 0).unwrap();
        let mut m = m0.clone();
        let x = random_batch(10, 3, 1);
        let (_, cache) = m.forward(&x, Mode::Train, 0).unwrap();
        m.update_running_stats(&cache);
        let bn = m.norms[0].as_ref().unwrap();
        let mean = cache.hidden[0].batch_mean.as_ref().unwrap();
        for j in 0..4 {
            assert!((bn.running_mean[j] - 0.1 * mean[j]).abs() < 1e-15);
            assert!(bn.running_var[j] >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn eval_logits_do_not_depend_on_batch_company(seed in 0u64..500, pos in 0usize..16) {
            let mut cfg = MlpConfig::new(vec![5, 7, 6, 3]);
            cfg.dropout_rate = 0.3;
            let mut m = init_model(&cfg, seed).unwrap();
            // move running stats away from the identity
            let (_, cache) = m.forward(&random_batch(8, 5, seed + 1), Mode::Train, seed).unwrap();
            m.update_running_stats(&cache);
            let batch = random_batch(16, 5, seed + 2);
            let all = m.logits(&batch).unwrap();
            let alone = m.logits(&batch.select_rows(&[pos])).unwrap();
            prop_assert_eq!(alone.row(0), all.row(pos));
        }
    }
}
