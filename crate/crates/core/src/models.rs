//! Softmax classifiers over flat parameter vectors: multinomial logistic
//! regression and fully connected ReLU networks, with hand-written
//! backpropagation.
//!
//! Parameter layout, per layer in order: the weight matrix (`out x in`,
//! row-major) followed by the bias vector (`out`).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlr,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub l2_reg: f64,
}

/// Named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// 784-100-10; the size whose parameter count is 79510.
    PaperCount,
    /// 784-100-100-10; two hidden layers.
    PaperText,
    /// 784-10 logistic regression.
    Mlr,
}

impl ModelSpec {
    pub fn mlr(input_dim: usize, num_classes: usize, l2_reg: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlr,
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            l2_reg,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dims,
            num_classes,
            l2_reg: 0.0,
        }
    }

    pub fn preset(preset: ModelPreset, l2_reg: f64) -> Self {
        match preset {
            ModelPreset::PaperCount => Self::mlp(784, vec![100], 10),
            ModelPreset::PaperText => Self::mlp(784, vec![100, 100], 10),
            ModelPreset::Mlr => Self::mlr(784, 10, l2_reg),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be positive".to_string());
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be positive".to_string());
        }
        match self.kind {
            ModelKind::Mlr if !self.hidden_dims.is_empty() => {
                problems.push("MLR takes no hidden layers".to_string())
            }
            ModelKind::Mlp if self.hidden_dims.is_empty() => {
                problems.push("MLP needs at least one hidden layer".to_string())
            }
            _ => {}
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            problems.push("hidden widths must be positive".to_string());
        }
        if !(self.l2_reg >= 0.0) {
            problems.push(format!("l2_reg must be nonnegative, got {}", self.l2_reg));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    fn layers(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

pub fn param_count(spec: &ModelSpec) -> usize {
    spec.layers().iter().map(|&(i, o)| i * o + o).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    Zeros,
    /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
    GlorotUniform,
}

pub fn init_params<R: Rng>(spec: &ModelSpec, scheme: InitScheme, rng: &mut R) -> ParamVector {
    let mut values = Vec::with_capacity(param_count(spec));
    for (fan_in, fan_out) in spec.layers() {
        match scheme {
            InitScheme::Zeros => values.extend(std::iter::repeat(0.0).take(fan_in * fan_out)),
            InitScheme::GlorotUniform => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                values.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)));
            }
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParamVector::from_vec_unchecked(values)
}

/// Feature rows with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "batch has {} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::invalid("batch must contain at least one sample"));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        check_dim(spec.input_dim, self.features.ncols())?;
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= spec.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                spec.num_classes
            )));
        }
        Ok(())
    }
}

struct LayerView<'a> {
    weights: ArrayView2<'a, f64>,
    bias: ArrayView1<'a, f64>,
    offset: usize,
}

fn layer_views<'a>(spec: &ModelSpec, params: &'a [f64]) -> Vec<LayerView<'a>> {
    let mut offset = 0;
    spec.layers()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let w_len = fan_in * fan_out;
            let weights = ArrayView2::from_shape((fan_out, fan_in), &params[offset..offset + w_len])
                .expect("layer shape");
            let bias = ArrayView1::from(&params[offset + w_len..offset + w_len + fan_out]);
            let view = LayerView {
                weights,
                bias,
                offset,
            };
            offset += w_len + fan_out;
            view
        })
        .collect()
}

/// Hidden activations (post-ReLU) and output logits.
fn forward(layers: &[LayerView<'_>], x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(layers.len().saturating_sub(1));
    for (l, layer) in layers.iter().enumerate() {
        let input = if l == 0 { x } else { hidden[l - 1].view() };
        let mut z = input.dot(&layer.weights.t());
        z += &layer.bias;
        if l + 1 == layers.len() {
            return (hidden, z);
        }
        z.mapv_inplace(|v| v.max(0.0));
        hidden.push(z);
    }
    unreachable!("model has at least one layer")
}

pub fn logits(spec: &ModelSpec, params: &ParamVector, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_dim(param_count(spec), params.dim())?;
    check_dim(spec.input_dim, features.ncols())?;
    let layers = layer_views(spec, params.as_slice());
    Ok(forward(&layers, features).1)
}

/// Mean cross-entropy (plus `l2_reg/2 * ||params||^2`) and its gradient.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    check_dim(param_count(spec), params.dim())?;
    batch.check(spec)?;
    let layers = layer_views(spec, params.as_slice());
    let x = batch.features.view();
    let n = batch.len();
    let (hidden, mut delta) = forward(&layers, x);

    // softmax cross-entropy; delta becomes d(loss)/d(logits)
    let inv_n = 1.0 / n as f64;
    let mut ce = 0.0;
    for (mut row, &y) in delta.axis_iter_mut(Axis(0)).zip(&batch.labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted_y = row[y] - max;
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        ce += denom.ln() - shifted_y;
        for v in row.iter_mut() {
            *v = *v / denom * inv_n;
        }
        row[y] -= inv_n;
    }
    ce *= inv_n;

    let mut grad = vec![0.0; params.dim()];
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let input = if l == 0 { x } else { hidden[l - 1].view() };
        let dw = delta.t().dot(&input);
        let db = delta.sum_axis(Axis(0));
        let (fan_out, fan_in) = layer.weights.dim();
        let w_len = fan_out * fan_in;
        grad[layer.offset..layer.offset + w_len]
            .copy_from_slice(dw.as_slice().expect("standard layout"));
        grad[layer.offset + w_len..layer.offset + w_len + fan_out]
            .copy_from_slice(db.as_slice().expect("standard layout"));
        if l > 0 {
            let mut d_in = delta.dot(&layer.weights);
            ndarray::Zip::from(&mut d_in)
                .and(&hidden[l - 1])
                .for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = d_in;
        }
    }

    let mut loss = ce;
    if spec.l2_reg > 0.0 {
        loss += 0.5 * spec.l2_reg * params.norm_sq();
        for (g, p) in grad.iter_mut().zip(params.as_slice()) {
            *g += spec.l2_reg * p;
        }
    }
    let grad = ParamVector::from_vec_unchecked(grad);
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss}")));
    }
    Ok((loss, grad))
}

/// Index of the largest logit; ties go to the lowest class index.
fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Number of correctly classified rows.
pub fn correct_count(spec: &ModelSpec, params: &ParamVector, data: &Batch) -> Result<usize> {
    data.check(spec)?;
    let z = logits(spec, params, data.features.view())?;
    Ok(z.axis_iter(Axis(0))
        .zip(&data.labels)
        .filter(|(row, &y)| argmax(*row) == y)
        .count())
}

pub fn accuracy(spec: &ModelSpec, params: &ParamVector, data: &Batch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of empty data"));
    }
    Ok(correct_count(spec, params, data)? as f64 / data.len() as f64)
}

/// Per-class mean of softmax probabilities; handy for debugging collapsed models.
pub fn mean_probabilities(spec: &ModelSpec, params: &ParamVector, data: &Batch) -> Result<Array1<f64>> {
    let mut z = logits(spec, params, data.features.view())?;
    for mut row in z.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(z.mean_axis(Axis(0)).expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_counts() {
        assert_eq!(param_count(&ModelSpec::preset(ModelPreset::PaperCount, 0.0)), 79510);
        assert_eq!(param_count(&ModelSpec::mlr(784, 10, 0.0)), 7850);
        assert_eq!(param_count(&ModelSpec::mlr(1, 1, 0.0)), 2);
        assert_eq!(
            param_count(&ModelSpec::preset(ModelPreset::PaperText, 0.0)),
            784 * 100 + 100 + 100 * 100 + 100 + 100 * 10 + 10
        );
    }

    #[test]
    fn zero_params_give_log_c() {
        let spec = ModelSpec::mlr(3, 7, 0.0);
        let batch = Batch::new(array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]], vec![0, 6]).unwrap();
        let (loss, _) = loss_and_grad(&spec, &ParamVector::zeros(param_count(&spec)), &batch).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bias_gradient_by_hand() {
        // weights then biases: w00 w01 w10 w11 b0 b1
        let spec = ModelSpec::mlr(2, 2, 0.0);
        let batch = Batch::new(array![[0.3, -0.7]], vec![1]).unwrap();
        let (_, g) = loss_and_grad(&spec, &ParamVector::zeros(6), &batch).unwrap();
        assert_eq!(&g.as_slice()[4..], &[0.5, -0.5]);
        // weight grads are (softmax - onehot) x features
        assert_eq!(&g.as_slice()[..4], &[0.15, -0.35, -0.15, 0.35]);
    }

    #[test]
    fn tie_break_is_lowest_class() {
        let spec = ModelSpec::mlr(2, 10, 0.0);
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let feats = Array2::from_shape_fn((20, 2), |(i, j)| (i + j) as f64);
        let data = Batch::new(feats, labels).unwrap();
        let acc = accuracy(&spec, &ParamVector::zeros(param_count(&spec)), &data).unwrap();
        assert!((acc - 0.1).abs() < 1e-15);
    }

    #[test]
    fn separable_points_with_oracle_weights() {
        let spec = ModelSpec::mlr(1, 2, 0.0);
        // logit0 = -x, logit1 = x
        let params = ParamVector::new(vec![-1.0, 1.0, 0.0, 0.0]).unwrap();
        let data = Batch::new(array![[-2.0], [2.0]], vec![0, 1]).unwrap();
        assert_eq!(accuracy(&spec, &params, &data).unwrap(), 1.0);
    }

    #[test]
    fn random_model_is_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ModelSpec::mlp(20, vec![16], 10);
        let params = init_params(&spec, InitScheme::GlorotUniform, &mut rng);
        let feats = Array2::from_shape_fn((1000, 20), |_| rng.gen::<f64>());
        let labels = (0..1000).map(|_| rng.gen_range(0..10)).collect();
        let acc = accuracy(&spec, &params, &Batch::new(feats, labels).unwrap()).unwrap();
        assert!((acc - 0.10).abs() <= 0.03, "accuracy {acc}");
    }

    #[test]
    fn bad_inputs() {
        let spec = ModelSpec::mlr(2, 2, 0.0);
        let batch = Batch::new(array![[0.0, 0.0]], vec![2]).unwrap();
        assert!(matches!(
            loss_and_grad(&spec, &ParamVector::zeros(6), &batch),
            Err(Error::InvalidInput(_))
        ));
        let ok = Batch::new(array![[0.0, 0.0]], vec![1]).unwrap();
        assert!(matches!(
            loss_and_grad(&spec, &ParamVector::zeros(5), &ok),
            Err(Error::Dimension { .. })
        ));
        assert!(Batch::new(Array2::zeros((2, 2)), vec![0]).is_err());
        assert!(ModelSpec::mlp(4, vec![], 2).validate().is_err());
    }

    #[test]
    fn deterministic_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ModelSpec::mlp(12, vec![7, 5], 4);
        let params = init_params(&spec, InitScheme::GlorotUniform, &mut rng);
        let feats = Array2::from_shape_fn((9, 12), |_| rng.gen::<f64>());
        let labels = (0..9).map(|_| rng.gen_range(0..4)).collect();
        let batch = Batch::new(feats, labels).unwrap();
        let a = loss_and_grad(&spec, &params, &batch).unwrap();
        let b = loss_and_grad(&spec, &params, &batch).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.as_slice().iter().zip(b.1.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
