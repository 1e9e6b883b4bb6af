//! Fully connected networks with dependent weights.
//!
//! Layer `ℓ` computes `Z⁽ℓ⁾ = b⁽ℓ⁾𝟏ᵀ + W⁽ℓ⁾ σ(Z⁽ℓ⁻¹⁾)` on the whole input batch
//! (one column per input point), with `σ(Z⁽⁰⁾) := 𝐱`. Weight columns share a
//! random variance: `W_hj = √V_j · N_hj`, `N_hj ~ 𝒩(0, C_W)`. The variances of
//! the inputs are fixed at `1/n₀`; every hidden layer has its own
//! [`VarianceModel`].

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::random::{sample_variance_vector, std_normal, RngStream, VarianceModel};

#[derive(Clone)]
pub enum Activation {
    Relu,
    Identity,
    /// Any pointwise map. It should grow at most polynomially.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
            Activation::Custom(f) => f(x),
        }
    }

    pub fn apply_matrix(&self, m: &Matrix) -> Matrix {
        m.map(|x| self.apply(x))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Custom(_) => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct Architecture {
    widths: Vec<usize>,
    c_b: f64,
    c_w: f64,
    activation: Activation,
    variance_models: Vec<VarianceModel>,
}

impl Architecture {
    /// `widths` lists `n₀, …, n_{L+1}`; `variance_models[ℓ-1]` is the law of
    /// the variances `V⁽ℓ⁾` attached to the outputs of hidden layer `ℓ`.
    pub fn new(
        widths: Vec<usize>,
        c_b: f64,
        c_w: f64,
        activation: Activation,
        variance_models: Vec<VarianceModel>,
    ) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::invalid("widths", "need n_0, at least one hidden width and n_out"));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::invalid("widths", format!("width of layer {pos} is zero")));
        }
        if !(c_b >= 0.0) || !c_b.is_finite() {
            return Err(Error::invalid("c_b", "must be finite and >= 0"));
        }
        if !(c_w > 0.0) || !c_w.is_finite() {
            return Err(Error::invalid("c_w", "must be finite and > 0"));
        }
        let depth = widths.len() - 2;
        if variance_models.len() != depth {
            return Err(Error::invalid(
                "variance_models",
                format!("expected {depth} entries, got {}", variance_models.len()),
            ));
        }
        Ok(Self {
            widths,
            c_b,
            c_w,
            activation,
            variance_models,
        })
    }

    /// Same hidden width and variance model at every hidden layer.
    pub fn uniform(
        n0: usize,
        depth: usize,
        width: usize,
        n_out: usize,
        c_b: f64,
        c_w: f64,
        activation: Activation,
        model: VarianceModel,
    ) -> Result<Self> {
        let mut widths = vec![n0];
        widths.extend(std::iter::repeat(width).take(depth));
        widths.push(n_out);
        Self::new(widths, c_b, c_w, activation, vec![model; depth])
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn width(&self, layer: usize) -> usize {
        self.widths[layer]
    }

    pub fn n_in(&self) -> usize {
        self.widths[0]
    }

    pub fn n_out(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn c_b(&self) -> f64 {
        self.c_b
    }

    pub fn c_w(&self) -> f64 {
        self.c_w
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    pub fn variance_models(&self) -> &[VarianceModel] {
        &self.variance_models
    }

    /// Law of `V⁽ℓ⁾` for `ℓ = 0, …, L`. Layer 0 is always fixed.
    pub fn variance_model(&self, layer: usize) -> VarianceModel {
        if layer == 0 {
            VarianceModel::Fixed
        } else {
            self.variance_models[layer - 1]
        }
    }

    pub fn has_bias(&self) -> bool {
        self.c_b > 0.0
    }
}

/// Parameters of layer `ℓ`: bias `b⁽ℓ⁾`, weights `W⁽ℓ⁾`, and the draws
/// `V⁽ℓ⁻¹⁾`, `N⁽ℓ⁾` the weights were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub bias: Vector,
    pub weights: Matrix,
    pub variances: Vector,
    pub normals: Matrix,
}

impl LayerParams {
    pub fn from_parts(bias: Vector, variances: Vector, normals: Matrix) -> Self {
        let mut weights = normals.clone();
        for (j, mut col) in weights.column_iter_mut().enumerate() {
            col *= variances[j].sqrt();
        }
        Self {
            bias,
            weights,
            variances,
            normals,
        }
    }

    pub fn zeros(n_out: usize, n_in: usize) -> Self {
        Self {
            bias: Vector::zeros(n_out),
            weights: Matrix::zeros(n_out, n_in),
            variances: Vector::from_element(n_in, 1.0),
            normals: Matrix::zeros(n_out, n_in),
        }
    }

    /// `b·𝟏ᵀ + W·σ(m)`.
    pub fn phi_sigma(&self, m: &Matrix, activation: &Activation) -> Result<Matrix> {
        phi_sigma(&self.bias, &self.weights, m, activation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    /// `layers[k]` holds layer `k + 1`.
    pub layers: Vec<LayerParams>,
}

impl NetworkParams {
    pub fn layer(&self, layer: usize) -> &LayerParams {
        &self.layers[layer - 1]
    }
}

/// Draws the parameters of layer `ℓ ∈ 1..=L+1`: first `V⁽ℓ⁻¹⁾`, then `N⁽ℓ⁾`
/// column by column, then the bias (skipped entirely when `C_B = 0`).
pub fn sample_layer_params(rng: &mut RngStream, arch: &Architecture, layer: usize) -> LayerParams {
    assert!(layer >= 1 && layer <= arch.depth() + 1, "layer {layer} out of range");
    let n_in = arch.width(layer - 1);
    let n_out = arch.width(layer);
    let variances = sample_variance_vector(rng, arch.variance_model(layer - 1), n_in);
    let sd_w = arch.c_w().sqrt();
    let normals = Matrix::from_fn(n_out, n_in, |_, _| sd_w * std_normal(rng));
    let bias = if arch.has_bias() {
        let sd_b = arch.c_b().sqrt();
        Vector::from_fn(n_out, |_, _| sd_b * std_normal(rng))
    } else {
        Vector::zeros(n_out)
    };
    LayerParams::from_parts(bias, variances, normals)
}

pub fn sample_prior_params(rng: &mut RngStream, arch: &Architecture) -> NetworkParams {
    NetworkParams {
        layers: (1..=arch.depth() + 1)
            .map(|l| sample_layer_params(rng, arch, l))
            .collect(),
    }
}

/// `b·𝟏ᵀ + W·σ(m)`, the map from one layer's pre-activations to the next.
pub fn phi_sigma(bias: &Vector, weights: &Matrix, m: &Matrix, activation: &Activation) -> Result<Matrix> {
    affine(bias, weights, &activation.apply_matrix(m))
}

fn affine(bias: &Vector, weights: &Matrix, input: &Matrix) -> Result<Matrix> {
    if weights.ncols() != input.nrows() || weights.nrows() != bias.len() {
        return Err(Error::invalid(
            "shape",
            format!(
                "weights {:?}, bias {}, input {:?}",
                weights.shape(),
                bias.len(),
                input.shape()
            ),
        ));
    }
    let mut out = weights * input;
    for mut col in out.column_iter_mut() {
        col += bias;
    }
    Ok(out)
}

/// Pre-activations `Z⁽¹⁾, …, Z⁽ᴸ⁺¹⁾` on the batch `x` (columns are inputs).
pub fn forward(params: &NetworkParams, x: &Matrix, activation: &Activation) -> Result<Vec<Matrix>> {
    let mut out: Vec<Matrix> = Vec::with_capacity(params.layers.len());
    for (k, layer) in params.layers.iter().enumerate() {
        let z = if k == 0 {
            affine(&layer.bias, &layer.weights, x)?
        } else {
            layer.phi_sigma(&out[k - 1], activation)?
        };
        out.push(z);
    }
    Ok(out)
}

/// Runs `layers` in order starting from the pre-activations `z`.
pub fn propagate(layers: &[LayerParams], z: &Matrix, activation: &Activation) -> Result<Matrix> {
    let mut cur = z.clone();
    for layer in layers {
        cur = layer.phi_sigma(&cur, activation)?;
    }
    Ok(cur)
}

/// `−Σᵢ ‖ξ(i) − y(i)‖²`, the log of the Gaussian likelihood `g`.
pub fn gaussian_log_likelihood(xi: &Matrix, y: &Matrix) -> Result<f64> {
    if xi.shape() != y.shape() {
        return Err(Error::invalid(
            "shape",
            format!("outputs {:?} vs targets {:?}", xi.shape(), y.shape()),
        ));
    }
    Ok(-(xi - y).norm_squared())
}

/// Inputs `𝐱 ∈ ℝ^{n₀×d}` and targets `𝐲 ∈ ℝ^{n_out×d}`, one column per point.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub x: Matrix,
    pub y: Matrix,
}

impl DataSet {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.ncols() == 0 || x.ncols() != y.ncols() {
            return Err(Error::invalid(
                "dataset",
                format!("x has {} points, y has {}", x.ncols(), y.ncols()),
            ));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    /// Reads a CSV with header `x_1..x_{n0}, y_1..y_{n_out}` and one row per
    /// input point.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let mut x_cols = Vec::new();
        let mut y_cols = Vec::new();
        for (pos, name) in headers.iter().enumerate() {
            let name = name.trim();
            let (target, idx) = if let Some(rest) = name.strip_prefix("x_") {
                (&mut x_cols, rest)
            } else if let Some(rest) = name.strip_prefix("y_") {
                (&mut y_cols, rest)
            } else {
                return Err(Error::invalid("dataset", format!("unexpected column '{name}'")));
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::invalid("dataset", format!("bad column name '{name}'")))?;
            target.push((idx, pos));
        }
        for (cols, prefix) in [(&mut x_cols, "x"), (&mut y_cols, "y")] {
            cols.sort();
            if cols.is_empty() || cols.iter().enumerate().any(|(k, &(idx, _))| idx != k + 1) {
                return Err(Error::invalid(
                    "dataset",
                    format!("columns {prefix}_1..{prefix}_n must be present without gaps"),
                ));
            }
        }
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<Vec<f64>> = Vec::new();
        for (row_no, record) in reader.records().enumerate() {
            let record = record?;
            let parse = |pos: usize| -> Result<f64> {
                record
                    .get(pos)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::invalid("dataset", format!("row {}: bad value", row_no + 1)))
            };
            xs.push(x_cols.iter().map(|&(_, p)| parse(p)).collect::<Result<_>>()?);
            ys.push(y_cols.iter().map(|&(_, p)| parse(p)).collect::<Result<_>>()?);
        }
        if xs.is_empty() {
            return Err(Error::invalid("dataset", "no data rows"));
        }
        let d = xs.len();
        let x = Matrix::from_fn(x_cols.len(), d, |r, c| xs[c][r]);
        let y = Matrix::from_fn(y_cols.len(), d, |r, c| ys[c][r]);
        Self::new(x, y)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.x.nrows()).map(|k| format!("x_{k}")).collect();
        header.extend((1..=self.y.nrows()).map(|k| format!("y_{k}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .x
                .column(i)
                .iter()
                .chain(self.y.column(i).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn tiny_arch() -> Architecture {
        Architecture::new(vec![1, 1, 1], 1.0, 1.0, Activation::Relu, vec![VarianceModel::Fixed]).unwrap()
    }

    fn hand_params() -> NetworkParams {
        let l1 = LayerParams::from_parts(
            Vector::from_element(1, 1.0),
            Vector::from_element(1, 1.0),
            Matrix::from_element(1, 1, 2.0),
        );
        let l2 = LayerParams::from_parts(
            Vector::from_element(1, 1.0),
            Vector::from_element(1, 1.0),
            Matrix::from_element(1, 1, 3.0),
        );
        NetworkParams { layers: vec![l1, l2] }
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(vec![1, 0, 1], 1.0, 1.0, Activation::Relu, vec![VarianceModel::Fixed]).is_err());
        assert!(Architecture::new(vec![1, 1, 1], -1.0, 1.0, Activation::Relu, vec![VarianceModel::Fixed]).is_err());
        assert!(Architecture::new(vec![1, 1, 1], 1.0, 0.0, Activation::Relu, vec![VarianceModel::Fixed]).is_err());
        assert!(Architecture::new(vec![1, 1, 1], 1.0, 1.0, Activation::Relu, vec![]).is_err());
        let a = tiny_arch();
        assert_eq!(a.depth(), 1);
        assert_eq!(a.variance_model(0), VarianceModel::Fixed);
    }

    #[test]
    fn forward_hand_examples() {
        let p = hand_params();
        let z = forward(&p, &dmatrix![1.0], &Activation::Relu).unwrap();
        assert_eq!(z[0][(0, 0)], 3.0);
        assert_eq!(z[1][(0, 0)], 10.0);
        let z = forward(&p, &dmatrix![-1.0], &Activation::Relu).unwrap();
        assert_eq!(z[0][(0, 0)], -1.0);
        assert_eq!(z[1][(0, 0)], 1.0);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = NetworkParams {
            layers: vec![LayerParams::zeros(3, 2), LayerParams::zeros(1, 3)],
        };
        let z = forward(&p, &dmatrix![1.0, 2.0; 3.0, 4.0], &Activation::Relu).unwrap();
        assert!(z.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn phi_sigma_examples() {
        let b = Vector::from_vec(vec![1.0, -2.0]);
        let m = dmatrix![1.0, -1.0, 3.0];
        let out = phi_sigma(&b, &Matrix::zeros(2, 1), &m, &Activation::Relu).unwrap();
        assert_eq!(out, dmatrix![1.0, 1.0, 1.0; -2.0, -2.0, -2.0]);
        let w = dmatrix![2.0; 5.0];
        let out = phi_sigma(&Vector::zeros(2), &w, &m, &Activation::Identity).unwrap();
        assert_eq!(out, &w * &m);
        assert!(phi_sigma(&b, &Matrix::zeros(2, 2), &m, &Activation::Relu).is_err());
    }

    #[test]
    fn phi_chain_matches_forward() {
        let arch = Architecture::uniform(3, 3, 5, 2, 1.0, 1.0, Activation::Relu, VarianceModel::Model1).unwrap();
        let mut rng = RngStream::new(9, 0);
        let p = sample_prior_params(&mut rng, &arch);
        let x = crate::random::std_normal_matrix(&mut rng, 3, 4);
        let z = forward(&p, &x, arch.activation()).unwrap();
        let out = propagate(&p.layers[1..], &z[0], arch.activation()).unwrap();
        assert_eq!(out, z[3]);
    }

    #[test]
    fn log_likelihood_examples() {
        let y = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert_eq!(gaussian_log_likelihood(&y, &y).unwrap(), 0.0);
        assert_eq!(gaussian_log_likelihood(&dmatrix![2.0], &dmatrix![1.0]).unwrap(), -1.0);
        let mut rng = RngStream::new(2, 0);
        let a = crate::random::std_normal_matrix(&mut rng, 2, 3);
        let b = crate::random::std_normal_matrix(&mut rng, 2, 3);
        let r = &a - &b;
        let trace = (&r * r.transpose()).trace();
        assert!((gaussian_log_likelihood(&a, &b).unwrap() + trace).abs() < 1e-12);
        assert!(gaussian_log_likelihood(&a, &dmatrix![1.0]).is_err());
    }

    #[test]
    fn zero_bias_variance_gives_zero_bias() {
        let arch = Architecture::uniform(2, 2, 3, 1, 0.0, 1.0, Activation::Relu, VarianceModel::Model2).unwrap();
        let p = sample_prior_params(&mut RngStream::new(4, 0), &arch);
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn columns_share_variance() {
        let arch = Architecture::uniform(2, 2, 6, 1, 1.0, 1.0, Activation::Relu, VarianceModel::Model1).unwrap();
        let p = sample_prior_params(&mut RngStream::new(8, 0), &arch);
        let l = p.layer(2);
        for j in 0..6 {
            let ratios: Vec<f64> = (0..6).map(|h| l.weights[(h, j)] / l.normals[(h, j)]).collect();
            for r in &ratios {
                assert!((r - l.variances[j].sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_one_weight_variance() {
        let arch = Architecture::uniform(4, 1, 1, 1, 1.0, 1.0, Activation::Relu, VarianceModel::Fixed).unwrap();
        let mut rng = RngStream::new(17, 0);
        let mut s2 = 0.0;
        let reps = 250_000;
        for _ in 0..reps {
            let l = sample_layer_params(&mut rng, &arch, 1);
            s2 += l.weights.norm_squared();
        }
        let var = s2 / (4 * reps) as f64;
        assert!((var - 0.25).abs() < 0.002, "{var}");
    }

    #[test]
    fn permuting_hidden_units_keeps_output() {
        let arch = Architecture::uniform(2, 2, 4, 1, 1.0, 1.0, Activation::Relu, VarianceModel::Model1).unwrap();
        let mut rng = RngStream::new(21, 0);
        let p = sample_prior_params(&mut rng, &arch);
        let x = crate::random::std_normal_matrix(&mut rng, 2, 3);
        let perm = [2usize, 0, 3, 1];
        let mut q = p.clone();
        // permute hidden layer 1: rows of W1, b1 and columns of W2
        for (new, &old) in perm.iter().enumerate() {
            q.layers[0].weights.set_row(new, &p.layers[0].weights.row(old));
            q.layers[0].bias[new] = p.layers[0].bias[old];
            q.layers[1].weights.set_column(new, &p.layers[1].weights.column(old));
        }
        let a = forward(&p, &x, arch.activation()).unwrap();
        let b = forward(&q, &x, arch.activation()).unwrap();
        assert!((&a[2] - &b[2]).amax() < 1e-12);
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "y_1,x_2,x_1\n5.1,0,1\n5.1,1,0\n").unwrap();
        let ds = DataSet::from_csv(&path).unwrap();
        assert_eq!(ds.x, dmatrix![1.0, 0.0; 0.0, 1.0]);
        assert_eq!(ds.y, dmatrix![5.1, 5.1]);
        let out = dir.path().join("out.csv");
        ds.write_csv(&out).unwrap();
        assert_eq!(DataSet::from_csv(&out).unwrap(), ds);
        std::fs::write(&path, "x_1,x_3,y_1\n1,2,3\n").unwrap();
        assert!(DataSet::from_csv(&path).is_err());
    }
}
