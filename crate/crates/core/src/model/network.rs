//! Split ReLU multilayer perceptron.
//!
//! Hidden layer `l` holds a `width_l × width_{l-1}` matrix whose row `j` is
//! unit `j`'s incoming weights; there are no biases. The scalar output is
//! `h(x) = Σ_j s_j a_j σ(z_j)` over the last hidden layer, where with width
//! scaling `s_j = 1/√m1` for personalized units and `1/√m2` for shared ones
//! (`1/√m` when the last layer is not split).

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::facsplit::Partition;
use crate::numerics::{dot, DenseMatrix, RngStream};

/// Probabilities are clamped into `[P_CLAMP, 1 − P_CLAMP]` inside the log loss.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Quadratic,
    BinaryCrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quadratic" | "mse" => Ok(LossKind::Quadratic),
            "bce" | "binary_cross_entropy" => Ok(LossKind::BinaryCrossEntropy),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Quadratic => "quadratic",
            LossKind::BinaryCrossEntropy => "binary_cross_entropy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[d, hidden widths…, 1]`
    pub layer_widths: Vec<usize>,
    pub loss: LossKind,
    pub scale_by_sqrt_width: bool,
    pub train_output_weights: bool,
    /// Standard deviation of the Gaussian weight initialisation.
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn single_hidden(input_dim: usize, hidden: usize, loss: LossKind) -> Self {
        Self {
            layer_widths: vec![input_dim, hidden, 1],
            loss,
            scale_by_sqrt_width: true,
            train_output_weights: false,
            init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(contract("model needs an input width, at least one hidden layer and an output"));
        }
        if *self.layer_widths.last().unwrap() != 1 {
            return Err(contract("output width must be 1"));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(contract("layer widths must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(contract("init_scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_hidden(&self) -> usize {
        self.layer_widths.len() - 2
    }

    pub fn hidden_width(&self, layer: usize) -> usize {
        self.layer_widths[layer + 1]
    }
}

/// One client's (or the server's) full parameter set, with the partition of
/// each split layer. Layers without a partition are entirely shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub config: ModelConfig,
    pub hidden: Vec<DenseMatrix>,
    pub head: Vec<f64>,
    pub partitions: Vec<Option<Partition>>,
    pub client_id: Option<usize>,
}

/// Gradient or parameter-delta with the same layout as [`SplitParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensors {
    pub hidden: Vec<DenseMatrix>,
    pub head: Vec<f64>,
}

impl ParamTensors {
    pub fn zeros_like(params: &SplitParams) -> Self {
        Self {
            hidden: params.hidden.iter().map(|w| DenseMatrix::zeros(w.rows(), w.cols())).collect(),
            head: vec![0.0; params.head.len()],
        }
    }

    pub fn max_abs(&self) -> f64 {
        let h = self.head.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.hidden.iter().fold(h, |m, w| m.max(w.max_abs()))
    }
}

/// Forward pass intermediates for a batch.
pub struct ForwardCache {
    /// Pre-activations per hidden layer (`n × width`).
    pub pre: Vec<DenseMatrix>,
    /// Post-ReLU activations per hidden layer.
    pub post: Vec<DenseMatrix>,
    pub output: Vec<f64>,
}

#[inline]
pub fn relu(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        0.0
    }
}

/// ReLU derivative with the indicator `𝕀{z ≥ 0}`, i.e. active at exactly 0.
#[inline]
pub fn relu_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn sigmoid(h: f64) -> f64 {
    if h >= 0.0 {
        1.0 / (1.0 + (-h).exp())
    } else {
        let e = h.exp();
        e / (1.0 + e)
    }
}

/// Initialise parameters for the given split layers.
///
/// Hidden weights are i.i.d. `N(0, init_scale²)`, output weights uniform on
/// `{−1, +1}`. Every split layer starts fully shared; callers install
/// partitions afterwards.
pub fn init_params(cfg: &ModelConfig, split_layers: &[usize], rng: &mut RngStream) -> Result<SplitParams> {
    cfg.validate()?;
    let nh = cfg.num_hidden();
    if let Some(&bad) = split_layers.iter().find(|&&l| l >= nh) {
        return Err(contract(format!(
            "layer {bad} cannot be split: the model has {nh} hidden layers and the output head is always shared"
        )));
    }
    let mut wrng = rng.child("hidden", 0);
    let hidden = (0..nh)
        .map(|l| {
            let (rows, cols) = (cfg.layer_widths[l + 1], cfg.layer_widths[l]);
            DenseMatrix::from_fn(rows, cols, |_, _| cfg.init_scale * wrng.normal())
        })
        .collect();
    let mut hrng = rng.child("head", 0);
    let head = (0..cfg.layer_widths[nh]).map(|_| hrng.sign()).collect();
    let mut partitions = vec![None; nh];
    for &l in split_layers {
        partitions[l] = Some(Partition::all_shared(l, cfg.hidden_width(l)));
    }
    Ok(SplitParams { config: cfg.clone(), hidden, head, partitions, client_id: None })
}

impl SplitParams {
    pub fn num_hidden(&self) -> usize {
        self.hidden.len()
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].cols()
    }

    pub fn split_layers(&self) -> Vec<usize> {
        (0..self.partitions.len()).filter(|&l| self.partitions[l].is_some()).collect()
    }

    pub fn set_partition(&mut self, partition: Partition) -> Result<()> {
        let l = partition.layer;
        if l >= self.num_hidden() || self.partitions[l].is_none() {
            return Err(contract(format!("layer {l} is not a split layer")));
        }
        if partition.width() != self.hidden[l].rows() {
            return Err(contract(format!(
                "partition width {} does not match layer {l} width {}",
                partition.width(),
                self.hidden[l].rows()
            )));
        }
        self.partitions[l] = Some(partition);
        Ok(())
    }

    /// Whether row `unit` of hidden layer `layer` is shared with the server.
    pub fn is_shared_row(&self, layer: usize, unit: usize) -> bool {
        self.partitions[layer].as_ref().is_none_or(|p| p.is_shared(unit))
    }

    /// Per-unit output prefactors `s_j`.
    pub fn head_scales(&self) -> Vec<f64> {
        let last = self.num_hidden() - 1;
        let m = self.head.len();
        if !self.config.scale_by_sqrt_width {
            return vec![1.0; m];
        }
        match &self.partitions[last] {
            None => vec![1.0 / (m as f64).sqrt(); m],
            Some(p) => {
                let s_shared = 1.0 / (p.n_shared().max(1) as f64).sqrt();
                let s_personal = 1.0 / (p.n_personal().max(1) as f64).sqrt();
                p.zeta.iter().map(|&z| if z { s_shared } else { s_personal }).collect()
            }
        }
    }

    pub fn forward_batch(&self, x: &DenseMatrix) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(contract(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let n = x.rows();
        let mut pre = Vec::with_capacity(self.num_hidden());
        let mut post: Vec<DenseMatrix> = Vec::with_capacity(self.num_hidden());
        for (l, w) in self.hidden.iter().enumerate() {
            let input = if l == 0 { x } else { &post[l - 1] };
            let mut z = DenseMatrix::zeros(n, w.rows());
            for i in 0..n {
                let xi = input.row(i);
                let zi = z.row_mut(i);
                for (j, zij) in zi.iter_mut().enumerate() {
                    *zij = dot(w.row(j), xi);
                }
            }
            let mut a = z.clone();
            a.values_mut().iter_mut().for_each(|v| *v = relu(*v));
            pre.push(z);
            post.push(a);
        }
        let scales = self.head_scales();
        let coef: Vec<f64> = self.head.iter().zip(&scales).map(|(a, s)| a * s).collect();
        let last = post.last().expect("at least one hidden layer");
        let output = (0..n).map(|i| dot(last.row(i), &coef)).collect();
        Ok(ForwardCache { pre, post, output })
    }

    /// Network output `h(x)` for a single input.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let xm = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&xm)?.output[0])
    }

    /// Raw outputs for every row of `x`.
    pub fn predict_raw(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x)?.output)
    }

    /// Predicted probability of label 1: `sigmoid(h)` for the log loss, `h`
    /// clamped into `[0,1]` for the quadratic loss.
    pub fn predict_proba(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        let h = self.predict_raw(x)?;
        Ok(match self.config.loss {
            LossKind::BinaryCrossEntropy => h.into_iter().map(sigmoid).collect(),
            LossKind::Quadratic => h.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn accuracy(&self, x: &DenseMatrix, y: &[f64]) -> Result<f64> {
        if y.is_empty() {
            return Err(contract("accuracy over an empty set"));
        }
        let p = self.predict_proba(x)?;
        Ok(classification_accuracy(&p, y))
    }

    /// Mean loss over the samples.
    pub fn loss(&self, x: &DenseMatrix, y: &[f64]) -> Result<f64> {
        if y.is_empty() {
            return Err(contract("loss over an empty dataset"));
        }
        if x.rows() != y.len() {
            return Err(contract("row count differs from label count"));
        }
        let h = self.predict_raw(x)?;
        Ok(mean_loss(self.config.loss, &h, y))
    }

    /// Loss and its gradient with respect to every parameter, by backpropagation.
    /// The head gradient is zero unless output weights are trainable.
    pub fn gradients(&self, x: &DenseMatrix, y: &[f64]) -> Result<(f64, ParamTensors)> {
        if y.is_empty() {
            return Err(contract("gradient over an empty batch"));
        }
        if x.rows() != y.len() {
            return Err(contract("row count differs from label count"));
        }
        let cache = self.forward_batch(x)?;
        let n = y.len();
        let loss = mean_loss(self.config.loss, &cache.output, y);
        // dℓ/dh per sample, already divided by n
        let dh: Vec<f64> = cache
            .output
            .iter()
            .zip(y)
            .map(|(&h, &t)| {
                let g = match self.config.loss {
                    LossKind::Quadratic => h - t,
                    LossKind::BinaryCrossEntropy => sigmoid(h) - t,
                };
                g / n as f64
            })
            .collect();

        let mut grads = ParamTensors::zeros_like(self);
        let scales = self.head_scales();
        let nh = self.num_hidden();
        if self.config.train_output_weights {
            let last = &cache.post[nh - 1];
            for i in 0..n {
                for (j, g) in grads.head.iter_mut().enumerate() {
                    *g += dh[i] * scales[j] * last[(i, j)];
                }
            }
        }

        // delta at the last hidden layer's pre-activations
        let mut delta = DenseMatrix::zeros(n, self.head.len());
        for i in 0..n {
            let zi = cache.pre[nh - 1].row(i);
            let di = delta.row_mut(i);
            for j in 0..di.len() {
                di[j] = dh[i] * scales[j] * self.head[j] * relu_grad(zi[j]);
            }
        }
        for l in (0..nh).rev() {
            let input = if l == 0 { x } else { &cache.post[l - 1] };
            let gw = &mut grads.hidden[l];
            for i in 0..n {
                let xi = input.row(i);
                let di = delta.row(i);
                for (j, &dij) in di.iter().enumerate() {
                    if dij == 0.0 {
                        continue;
                    }
                    for (g, &v) in gw.row_mut(j).iter_mut().zip(xi) {
                        *g += dij * v;
                    }
                }
            }
            if l > 0 {
                let w = &self.hidden[l];
                let mut prev = DenseMatrix::zeros(n, w.cols());
                for i in 0..n {
                    let zi = cache.pre[l - 1].row(i);
                    let di = delta.row(i);
                    let pi = prev.row_mut(i);
                    for (j, &dij) in di.iter().enumerate() {
                        if dij == 0.0 {
                            continue;
                        }
                        for (p, &wv) in pi.iter_mut().zip(w.row(j)) {
                            *p += dij * wv;
                        }
                    }
                    for (p, &z) in pi.iter_mut().zip(zi) {
                        *p *= relu_grad(z);
                    }
                }
                delta = prev;
            }
        }
        Ok((loss, grads))
    }

    /// Post-ReLU outputs of hidden layer `layer` for every row of `x`.
    pub fn hidden_activations(&self, x: &DenseMatrix, layer: usize) -> Result<DenseMatrix> {
        if layer >= self.num_hidden() {
            return Err(contract(format!("no hidden layer {layer}")));
        }
        Ok(self.forward_batch(x)?.post.swap_remove(layer))
    }

    /// `self += s * t`, honoring the head's trainability.
    pub fn add_scaled(&mut self, s: f64, t: &ParamTensors) -> Result<()> {
        for (w, g) in self.hidden.iter_mut().zip(&t.hidden) {
            w.axpy(s, g)?;
        }
        for (a, g) in self.head.iter_mut().zip(&t.head) {
            *a += s * g;
        }
        Ok(())
    }

    /// `self − other`
    pub fn difference(&self, other: &SplitParams) -> Result<ParamTensors> {
        let hidden = self
            .hidden
            .iter()
            .zip(&other.hidden)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<Vec<_>>>()?;
        let head = self.head.iter().zip(&other.head).map(|(a, b)| a - b).collect();
        Ok(ParamTensors { hidden, head })
    }
}

/// `ln(1 + e^h)` without overflow.
pub fn softplus(h: f64) -> f64 {
    h.max(0.0) + (-h.abs()).exp().ln_1p()
}

pub fn mean_loss(kind: LossKind, h: &[f64], y: &[f64]) -> f64 {
    let n = y.len() as f64;
    match kind {
        LossKind::Quadratic => h.iter().zip(y).map(|(h, y)| 0.5 * (h - y).powi(2)).sum::<f64>() / n,
        LossKind::BinaryCrossEntropy => {
            -h.iter()
                .zip(y)
                .map(|(&h, &y)| {
                    // ln p and ln(1-p) via softplus, clamped as p would be
                    let (lo, hi) = (P_CLAMP.ln(), (-P_CLAMP).ln_1p());
                    let ln_p = (-softplus(-h)).clamp(lo, hi);
                    let ln_q = (-softplus(h)).clamp(lo, hi);
                    y * ln_p + (1.0 - y) * ln_q
                })
                .sum::<f64>()
                / n
        }
    }
}

/// Fraction of samples where `𝕀{p > 0.5}` matches the binary label.
pub fn classification_accuracy(p: &[f64], y: &[f64]) -> f64 {
    let hits = p.iter().zip(y).filter(|(&p, &y)| (p > 0.5) == (y > 0.5)).count();
    hits as f64 / y.len() as f64
}

impl ParamTensors {
    /// `self += s * t`
    pub fn add_scaled(&mut self, s: f64, t: &ParamTensors) -> Result<()> {
        for (w, g) in self.hidden.iter_mut().zip(&t.hidden) {
            w.axpy(s, g)?;
        }
        for (a, g) in self.head.iter_mut().zip(&t.head) {
            *a += s * g;
        }
        Ok(())
    }
}
