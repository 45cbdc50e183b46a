//! Residual feedforward regressor with hand-written backpropagation.
//!
//! Hidden layers use ReLU, the single output unit a sigmoid. The output of
//! hidden layer `from` is added to the pre-activation of hidden layer `to`:
//!
//! ```text
//! h_k = relu(W_k h_{k-1} + b_k)                for k != to
//! h_to = relu(W_to h_{to-1} + b_to + h_from)
//! y   = sigmoid(W_out h_last + b_out)
//! ```
//!
//! Batches are row-major: one sample per row.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::Standardizer;

/// Layer widths of the production network, input first.
pub const DEFAULT_DIMS: [usize; 8] = [28, 512, 256, 128, 64, 128, 32, 1];
pub const CHECKPOINT_VERSION: u32 = 1;

/// Smallest distance the output keeps from 0 and 1.
const OUTPUT_MARGIN: f64 = 1e-12;

/// Skip connection between two hidden layers, numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residual {
    pub from: usize,
    pub to: usize,
}

impl Default for Residual {
    fn default() -> Self {
        Self { from: 3, to: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    dims: Vec<usize>,
    layers: Vec<Dense>,
    residual: Option<Residual>,
    revision: u64,
}

impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.layers == other.layers && self.residual == other.residual
    }
}

fn validate_architecture(dims: &[usize], residual: Option<Residual>) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Invalid("network needs at least an input and an output width".into()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Invalid(format!("zero-width layer in {dims:?}")));
    }
    if *dims.last().unwrap() != 1 {
        return Err(Error::Invalid("output layer must have width 1".into()));
    }
    if let Some(r) = residual {
        let hidden = dims.len() - 2;
        if r.from < 1 || r.from >= r.to || r.to > hidden {
            return Err(Error::Invalid(format!(
                "residual {}→{} does not join two hidden layers of {hidden}",
                r.from, r.to
            )));
        }
        if dims[r.from] != dims[r.to] {
            return Err(Error::ShapeMismatch {
                layer: r.to,
                detail: format!(
                    "residual source width {} differs from destination width {}",
                    dims[r.from], dims[r.to]
                ),
            });
        }
    }
    Ok(())
}

impl MlpModel {
    /// He-uniform weights in ±√(6/fan_in), zero biases.
    pub fn init(dims: &[usize], residual: Option<Residual>, seed: u64) -> Result<Self> {
        validate_architecture(dims, residual)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                        rng.random_range(-bound..bound)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            residual,
            revision: 0,
        })
    }

    /// The production architecture: `DEFAULT_DIMS` with a 3→5 skip.
    pub fn standard(seed: u64) -> Self {
        Self::init(&DEFAULT_DIMS, Some(Residual::default()), seed).expect("default architecture is valid")
    }

    pub fn from_layers(layers: Vec<Dense>, residual: Option<Residual>) -> Result<Self> {
        let mut dims = Vec::with_capacity(layers.len() + 1);
        if let Some(first) = layers.first() {
            dims.push(first.weights.ncols());
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.ncols() != *dims.last().unwrap() || l.bias.len() != l.weights.nrows() {
                return Err(Error::ShapeMismatch {
                    layer: i + 1,
                    detail: format!(
                        "weights {:?} and bias {} do not chain",
                        l.weights.dim(),
                        l.bias.len()
                    ),
                });
            }
            dims.push(l.weights.nrows());
        }
        validate_architecture(&dims, residual)?;
        Ok(Self {
            dims,
            layers,
            residual,
            revision: 0,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn residual(&self) -> Option<Residual> {
        self.residual
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Same weights with the skip connection removed.
    pub fn without_residual(&self) -> Self {
        Self {
            residual: None,
            revision: self.revision.wrapping_add(1),
            ..self.clone()
        }
    }

    /// Mutable views of every tensor, layer by layer (weights then bias).
    /// Invalidates outstanding activation caches.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision = self.revision.wrapping_add(1);
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.revision = self.revision.wrapping_add(1);
        &mut self.layers
    }

    fn check_width(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dims[0] {
            return Err(Error::WidthMismatch {
                expected: self.dims[0],
                found: x.ncols(),
            });
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<'_, f64>, mut keep: impl FnMut(Array2<f64>, Array2<f64>)) -> Array1<f64> {
        let hidden = self.layers.len() - 1;
        let mut h = x.to_owned();
        let mut skip: Option<Array2<f64>> = None;
        for (k, layer) in self.layers[..hidden].iter().enumerate() {
            let number = k + 1;
            let mut z = h.dot(&layer.weights.t());
            z += &layer.bias;
            if let (Some(r), Some(s)) = (self.residual, skip.as_ref()) {
                if r.to == number {
                    z += s;
                }
            }
            let a = z.mapv(|v| v.max(0.0));
            if self.residual.is_some_and(|r| r.from == number) {
                skip = Some(a.clone());
            }
            let prev = std::mem::replace(&mut h, a);
            keep(prev, z);
        }
        let out = &self.layers[hidden];
        let mut z = h.dot(&out.weights.t());
        z += &out.bias;
        keep(h, z.clone());
        z.column(0).mapv(sigmoid)
    }

    /// Predictions without keeping activations.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_width(&x)?;
        Ok(self.run(x, |_, _| {}))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_width(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let output = self.run(x, |i, z| {
            inputs.push(i);
            pre.push(z);
        });
        Ok(ForwardCache {
            dims: self.dims.clone(),
            revision: self.revision,
            inputs,
            pre,
            output,
        })
    }

    /// Exact gradients of the loss given `d_output = ∂L/∂y` per row.
    pub fn backward(&self, cache: &ForwardCache, d_output: &Array1<f64>) -> Result<Gradients> {
        if cache.dims != self.dims || cache.revision != self.revision {
            return Err(Error::StaleCache(format!(
                "cache from revision {} of {:?}, model at revision {} of {:?}",
                cache.revision, cache.dims, self.revision, self.dims
            )));
        }
        if d_output.len() != cache.output.len() {
            return Err(Error::WidthMismatch {
                expected: cache.output.len(),
                found: d_output.len(),
            });
        }
        let n_layers = self.layers.len();
        let mut grads: Vec<Option<(Array2<f64>, Array1<f64>)>> = vec![None; n_layers];

        // ∂L/∂z at the output: sigmoid' = y(1 − y).
        let mut dz: Array2<f64> = Zip::from(d_output)
            .and(&cache.output)
            .map_collect(|&g, &y| g * y * (1.0 - y))
            .insert_axis(Axis(1));
        let mut skip_grad: Option<Array2<f64>> = None;

        for k in (0..n_layers).rev() {
            let number = k + 1;
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            grads[k] = Some((dz.t().dot(input), dz.sum_axis(Axis(0))));
            if k == 0 {
                break;
            }
            // ∂L/∂h_{number-1}
            let mut dh = dz.dot(&layer.weights);
            if let Some(r) = self.residual {
                if r.to == number {
                    skip_grad = Some(dz.clone());
                }
                if r.from == number - 1 {
                    if let Some(s) = skip_grad.take() {
                        dh += &s;
                    }
                }
            }
            let z_prev = &cache.pre[k - 1];
            Zip::from(&mut dh).and(z_prev).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            dz = dh;
        }
        Ok(Gradients {
            layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    let y = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    y.clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN)
}

/// Activations kept by [`MlpModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: Vec<usize>,
    revision: u64,
    /// Input to each layer (`h_{k-1}`).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer, residual included.
    pre: Vec<Array2<f64>>,
    pub output: Array1<f64>,
}

impl ForwardCache {
    /// Post-activation output of hidden layer `number` (1-based).
    pub fn hidden(&self, number: usize) -> &Array2<f64> {
        &self.inputs[number]
    }
}

/// Per-layer (weights, bias) gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn as_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice().expect("standard layout"), b.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.as_slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRecord {
    format_version: u32,
    dims: Vec<usize>,
    residual: Option<Residual>,
    hidden_activation: String,
    output_activation: String,
    layers: Vec<LayerRecord>,
    standardizer: Option<Standardizer>,
}

/// A trained network plus the feature standardizer it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub standardizer: Option<Standardizer>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let record = CheckpointRecord {
            format_version: CHECKPOINT_VERSION,
            dims: self.model.dims.clone(),
            residual: self.model.residual,
            hidden_activation: "relu".into(),
            output_activation: "sigmoid".into(),
            layers: self
                .model
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            standardizer: self.standardizer.clone(),
        };
        let mut s = serde_json::to_string(&record).map_err(|e| Error::Invalid(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        // Read the version first so a newer layout reports a version error.
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let json_err = |source| Error::Json {
            path: path.into(),
            source,
        };
        let v: Version = serde_json::from_str(text).map_err(json_err)?;
        if v.format_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: v.format_version,
            });
        }
        let rec: CheckpointRecord = serde_json::from_str(text).map_err(json_err)?;
        if rec.hidden_activation != "relu" || rec.output_activation != "sigmoid" {
            return Err(Error::Invalid(format!(
                "unsupported activations {}/{}",
                rec.hidden_activation, rec.output_activation
            )));
        }
        if rec.dims.len() < 2 {
            return Err(Error::ShapeMismatch {
                layer: 1,
                detail: format!("dims {:?} describe no layer", rec.dims),
            });
        }
        let expected_layers = rec.dims.len() - 1;
        let mut layers = Vec::with_capacity(rec.layers.len());
        for (i, l) in rec.layers.into_iter().enumerate() {
            let number = i + 1;
            if i >= expected_layers {
                return Err(Error::ShapeMismatch {
                    layer: number,
                    detail: format!("checkpoint has a layer beyond dims {:?}", rec.dims),
                });
            }
            let (fan_in, fan_out) = (rec.dims[i], rec.dims[i + 1]);
            if l.weights.len() != fan_in * fan_out || l.bias.len() != fan_out {
                return Err(Error::ShapeMismatch {
                    layer: number,
                    detail: format!(
                        "expected {fan_out}×{fan_in} weights and {fan_out} biases, found {} weights and {} biases",
                        l.weights.len(),
                        l.bias.len()
                    ),
                });
            }
            layers.push(Dense {
                weights: Array2::from_shape_vec((fan_out, fan_in), l.weights).expect("length checked"),
                bias: Array1::from(l.bias),
            });
        }
        if layers.len() != expected_layers {
            return Err(Error::ShapeMismatch {
                layer: layers.len() + 1,
                detail: format!("dims {:?} need {expected_layers} layers, found {}", rec.dims, layers.len()),
            });
        }
        let model = MlpModel::from_layers(layers, rec.residual)?;
        if let Some(s) = &rec.standardizer {
            s.validate()?;
            if s.means.len() != model.input_width() {
                return Err(Error::WidthMismatch {
                    expected: model.input_width(),
                    found: s.means.len(),
                });
            }
        }
        Ok(Self {
            model,
            standardizer: rec.standardizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};

    const TINY: [usize; 8] = [4, 8, 6, 5, 3, 5, 4, 1];

    fn tiny(seed: u64) -> MlpModel {
        let mut m = MlpModel::init(&TINY, Some(Residual::default()), seed).unwrap();
        // Nonzero biases so the check exercises bias gradients too.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
        for l in m.layers_mut() {
            l.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        }
        m
    }

    fn inputs(n: usize, width: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, width), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MlpModel::standard(7);
        assert_eq!(a, MlpModel::standard(7));
        assert_ne!(a, MlpModel::standard(8));
        for l in a.layers() {
            let bound = (6.0 / l.weights.ncols() as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= bound));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
        assert_eq!(a.dims(), &DEFAULT_DIMS);
    }

    #[test]
    fn architecture_validation() {
        assert!(MlpModel::init(&[4, 8, 6, 5, 3, 4, 4, 1], Some(Residual::default()), 0).is_err());
        assert!(MlpModel::init(&[4, 8, 1], Some(Residual::default()), 0).is_err());
        assert!(MlpModel::init(&[4, 8, 2], None, 0).is_err());
    }

    #[test]
    fn zero_model_outputs_half() {
        let mut m = MlpModel::standard(1);
        for p in m.parameters_mut() {
            p.fill(0.0);
        }
        let y = m.predict(inputs(5, 28, 3).view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zeroed_layers_make_residual_identity() {
        let mut m = tiny(3);
        for number in [4, 5] {
            let l = &mut m.layers_mut()[number - 1];
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let cache = m.forward(inputs(6, 4, 9).view()).unwrap();
        assert_eq!(cache.hidden(5), cache.hidden(3));
    }

    #[test]
    fn width_mismatch() {
        let m = tiny(1);
        assert!(matches!(
            m.predict(inputs(2, 5, 0).view()),
            Err(Error::WidthMismatch { expected: 4, found: 5 })
        ));
    }

    #[test]
    fn batch_matches_rowwise() {
        let m = MlpModel::standard(11);
        let x = inputs(33, 28, 5);
        let batch = m.predict(x.view()).unwrap();
        for i in 0..x.nrows() {
            let one = m.predict(x.slice(s![i..i + 1, ..])).unwrap();
            assert!((one[0] - batch[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_permute_with_outputs() {
        let m = tiny(4);
        let x = inputs(10, 4, 6);
        let y = m.predict(x.view()).unwrap();
        let order: Vec<usize> = (0..10).rev().collect();
        let xp = x.select(Axis(0), &order);
        let yp = m.predict(xp.view()).unwrap();
        for (i, &j) in order.iter().enumerate() {
            assert_eq!(yp[i], y[j]);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = tiny(2);
        let cache = m.forward(inputs(4, 4, 1).view()).unwrap();
        let g = m.backward(&cache, &Array1::zeros(4)).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m = tiny(2);
        let cache = m.forward(inputs(4, 4, 1).view()).unwrap();
        m.parameters_mut()[0][0] += 1.0;
        assert!(matches!(m.backward(&cache, &Array1::ones(4)), Err(Error::StaleCache(_))));
        let other = MlpModel::standard(0);
        assert!(matches!(other.backward(&cache, &Array1::ones(4)), Err(Error::StaleCache(_))));
    }

    fn loss(m: &MlpModel, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
        let p = m.predict(x.view()).unwrap();
        (&p - y).mapv(|d| d * d).mean().unwrap()
    }

    fn analytic(m: &MlpModel, x: &Array2<f64>, y: &Array1<f64>) -> Gradients {
        let cache = m.forward(x.view()).unwrap();
        let n = y.len() as f64;
        let d = (&cache.output - y).mapv(|v| 2.0 * v / n);
        m.backward(&cache, &d).unwrap()
    }

    #[test]
    fn residual_changes_third_layer_gradient() {
        let m = tiny(5);
        let x = inputs(8, 4, 2);
        let y = array![0.1, 0.9, 0.3, 0.5, 0.2, 0.7, 0.4, 0.6];
        let with = analytic(&m, &x, &y);
        let without = analytic(&m.without_residual(), &x, &y);
        assert_ne!(with.layers[2].0, without.layers[2].0);
    }

    #[test]
    fn skip_disabled_equals_plain_mlp() {
        let m = tiny(6);
        let plain = m.without_residual();
        let x = inputs(12, 4, 8);
        let got = plain.predict(x.view()).unwrap();
        for i in 0..x.nrows() {
            let mut h: Vec<f64> = x.row(i).to_vec();
            for (k, l) in m.layers().iter().enumerate() {
                let mut next: Vec<f64> = (0..l.weights.nrows())
                    .map(|o| l.bias[o] + (0..h.len()).map(|j| l.weights[[o, j]] * h[j]).sum::<f64>())
                    .collect();
                if k + 1 < m.layers().len() {
                    next.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                h = next;
            }
            let expected = 1.0 / (1.0 + (-h[0]).exp());
            assert!((got[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ck = Checkpoint {
            model: tiny(9),
            standardizer: None,
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Json { .. })));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["format_version"] = 99.into();
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::VersionMismatch { found: 99, .. })));
    }

    #[test]
    fn truncated_dims_name_the_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint {
            model: MlpModel::standard(1),
            standardizer: None,
        }
        .save(&path)
        .unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["dims"] = serde_json::json!([28, 512]);
        std::fs::write(&path, v.to_string()).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let m = tiny(seed);
            let x = inputs(7, 4, seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            let y = Array1::from_shape_simple_fn(7, || rng.random_range(0.1..0.9));
            let g = analytic(&m, &x, &y);
            let err = crate::gradcheck::max_relative_error(&m, &g, |mm| loss(mm, &x, &y), 1e-5);
            assert!(err < 1e-6, "seed {seed}: max relative error {err}");
        }
    }
}
