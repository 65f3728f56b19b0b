use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterManifest, AdapterState};
use crate::error::{Error, Result};
use crate::io::{read_json, read_matrix, write_json, write_matrix};
use crate::matrix::DenseMatrix;
use crate::rng::{gaussian_matrix, purpose, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: &DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Tanh => z.map(f64::tanh),
            Activation::Identity => z.clone(),
        }
    }

    /// Multiplies `grad` in place by the derivative, given the pre-activation
    /// `z` and the activation output `h`.
    fn backprop(self, grad: &mut DenseMatrix, z: &DenseMatrix, h: &DenseMatrix) {
        match self {
            Activation::Relu => {
                for (g, &zv) in grad.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &hv) in grad.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    *g *= 1.0 - hv * hv;
                }
            }
            Activation::Identity => {}
        }
    }
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

/// Architecture of an MLP classifier: layer `l` maps `layer_dims[l]` to
/// `layer_dims[l + 1]`, with the activation between layers (not after the
/// last one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub adapted_layers: BTreeSet<usize>,
    pub bias: bool,
    /// Multiplier on the He-normal init std of every layer except the last.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Self {
        Self {
            layer_dims,
            activation,
            adapted_layers: BTreeSet::new(),
            bias: true,
            init_scale: 1.0,
        }
    }

    pub fn with_adapted(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.adapted_layers = layers.into_iter().collect();
        self
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// `min(in, out)` of layer `l`.
    pub fn layer_k(&self, l: usize) -> usize {
        self.layer_dims[l].min(self.layer_dims[l + 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::config("model.layer_dims", "needs at least two entries"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::config("model.layer_dims", "dimensions must be positive"));
        }
        if let Some(&l) = self.adapted_layers.iter().find(|&&l| l >= self.num_layers()) {
            return Err(Error::config(
                "model.adapted_layers",
                format!("layer {l} does not exist ({} layers)", self.num_layers()),
            ));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::config("model.init_scale", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeight {
    Dense(DenseMatrix),
    Adapted(AdapterState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: LayerWeight,
    pub bias: Option<Vec<f64>>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match &self.weight {
            LayerWeight::Dense(w) => w.rows(),
            LayerWeight::Adapted(st) => st.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.weight {
            LayerWeight::Dense(w) => w.cols(),
            LayerWeight::Adapted(st) => st.out_dim(),
        }
    }

    /// The weight this layer applies (`W_p + scale · A · B` when adapted).
    pub fn effective_weight(&self) -> DenseMatrix {
        match &self.weight {
            LayerWeight::Dense(w) => w.clone(),
            LayerWeight::Adapted(st) => st.merge(),
        }
    }

    pub fn adapter(&self) -> Option<&AdapterState> {
        match &self.weight {
            LayerWeight::Adapted(st) => Some(st),
            LayerWeight::Dense(_) => None,
        }
    }

    /// Pre-activation output, plus `h · A` for adapted layers.
    fn forward(&self, h: &DenseMatrix) -> Result<(DenseMatrix, Option<DenseMatrix>)> {
        let (mut z, low) = match &self.weight {
            LayerWeight::Dense(w) => (h.matmul(w)?, None),
            LayerWeight::Adapted(st) => {
                let mut z = h.matmul(&st.w_p)?;
                let low = h.matmul(&st.a)?;
                z.add_scaled_assign(st.scale, &low.matmul(&st.b)?)?;
                (z, Some(low))
            }
        };
        if let Some(b) = &self.bias {
            z.add_row_vector(b);
        }
        Ok((z, low))
    }
}

/// Which parameters a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Every weight and bias (adapter factors, never residuals).
    Full,
    /// Adapter factors, plus the biases of adapted layers when `train_bias`.
    Adapters { train_bias: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Weight,
    A,
    B,
    Bias,
}

/// Accuracies recorded at the end of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Intermediate values of a forward pass kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`.
    pub inputs: Vec<DenseMatrix>,
    /// `pre[l]` is the pre-activation output of layer `l`; the last is the logits.
    pub pre: Vec<DenseMatrix>,
    low: Vec<Option<DenseMatrix>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &DenseMatrix {
        self.pre.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub summary: Option<TrainSummary>,
}

impl Model {
    /// He-normal weights (std `√(2 / fan_in)`, scaled by `init_scale` on
    /// hidden layers) and zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_layers();
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
                let mut std = (2.0 / fan_in as f64).sqrt();
                if l + 1 < n {
                    std *= spec.init_scale;
                }
                let mut rng = stream(seed, purpose::MODEL_INIT, l as u64);
                Layer {
                    weight: LayerWeight::Dense(gaussian_matrix(&mut rng, fan_in, fan_out, std)),
                    bias: spec.bias.then(|| vec![0.0; fan_out]),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
            summary: None,
        })
    }

    /// Model with the given dense weights; biases are zero when enabled.
    pub fn from_weights(spec: &ModelSpec, weights: Vec<DenseMatrix>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.num_layers() {
            return Err(Error::LengthMismatch {
                op: "Model::from_weights",
                left: spec.num_layers(),
                right: weights.len(),
            });
        }
        let mut layers = Vec::with_capacity(weights.len());
        for (l, w) in weights.into_iter().enumerate() {
            let want = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            if w.shape() != want {
                return Err(Error::ShapeMismatch {
                    op: "Model::from_weights",
                    left: w.shape(),
                    right: want,
                });
            }
            w.ensure_finite("Model::from_weights")?;
            layers.push(Layer {
                bias: spec.bias.then(|| vec![0.0; w.cols()]),
                weight: LayerWeight::Dense(w),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            summary: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, x: &DenseMatrix, op: &'static str) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape(),
                right: (x.rows(), self.input_dim()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(x, "Model::forward")?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (z, _) = layer.forward(&h)?;
            h = if l < last { self.spec.activation.apply(&z) } else { z };
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &DenseMatrix) -> Result<ForwardCache> {
        self.check_input(x, "Model::forward_cached")?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut low = Vec::with_capacity(n);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (z, lo) = layer.forward(&h)?;
            let next = (l + 1 < n).then(|| self.spec.activation.apply(&z));
            inputs.push(h);
            pre.push(z);
            low.push(lo);
            if let Some(next) = next {
                h = next;
            } else {
                break;
            }
        }
        Ok(ForwardCache { inputs, pre, low })
    }

    /// Activations entering layer `l`.
    pub fn layer_input(&self, x: &DenseMatrix, l: usize) -> Result<DenseMatrix> {
        self.check_input(x, "Model::layer_input")?;
        let mut h = x.clone();
        for layer in &self.layers[..l] {
            let (z, _) = layer.forward(&h)?;
            h = self.spec.activation.apply(&z);
        }
        Ok(h)
    }

    /// Logits given the pre-activation output `z` of layer `l`.
    pub fn forward_from(&self, l: usize, z: DenseMatrix) -> Result<DenseMatrix> {
        let mut h = z;
        for layer in &self.layers[l + 1..] {
            h = self.spec.activation.apply(&h);
            h = layer.forward(&h)?.0;
        }
        Ok(h)
    }

    /// Effective weight of layer `l`.
    pub fn weight(&self, l: usize) -> DenseMatrix {
        self.layers[l].effective_weight()
    }

    /// Replaces every adapted layer by its merged dense weight.
    pub fn merged(&self) -> Self {
        let mut m = self.clone();
        for layer in &mut m.layers {
            if let LayerWeight::Adapted(st) = &layer.weight {
                layer.weight = LayerWeight::Dense(st.merge());
            }
        }
        m
    }

    pub fn adapters(&self) -> impl Iterator<Item = (usize, &AdapterState)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(l, layer)| layer.adapter().map(|st| (l, st)))
    }

    fn slots(&self, l: usize, scope: TrainScope) -> Vec<Slot> {
        let layer = &self.layers[l];
        let adapted = layer.adapter().is_some();
        let mut slots = match (scope, adapted) {
            (TrainScope::Full, false) => vec![Slot::Weight],
            (_, true) => vec![Slot::A, Slot::B],
            (TrainScope::Adapters { .. }, false) => return Vec::new(),
        };
        let bias_trains = match scope {
            TrainScope::Full => true,
            TrainScope::Adapters { train_bias } => train_bias,
        };
        if bias_trains && layer.bias.is_some() {
            slots.push(Slot::Bias);
        }
        slots
    }

    /// Trainable parameter tensors in a fixed order (layer by layer; weight
    /// or `A`, `B`; then bias). [`Model::gradients`] uses the same order.
    pub fn params_mut(&mut self, scope: TrainScope) -> Vec<&mut [f64]> {
        let slots: Vec<Vec<Slot>> = (0..self.layers.len()).map(|l| self.slots(l, scope)).collect();
        let mut out = Vec::new();
        for (layer, slots) in self.layers.iter_mut().zip(slots) {
            if slots.is_empty() {
                continue;
            }
            match &mut layer.weight {
                LayerWeight::Dense(w) => out.push(w.as_mut_slice()),
                LayerWeight::Adapted(st) => {
                    out.push(st.a.as_mut_slice());
                    out.push(st.b.as_mut_slice());
                }
            }
            if slots.contains(&Slot::Bias) {
                out.push(layer.bias.as_mut().unwrap().as_mut_slice());
            }
        }
        out
    }

    /// Copies of the trainable tensors, in [`Model::params_mut`] order.
    pub fn params(&self, scope: TrainScope) -> Vec<Vec<f64>> {
        self.clone().params_mut(scope).into_iter().map(|p| p.to_vec()).collect()
    }

    pub fn params_finite(&mut self, scope: TrainScope) -> bool {
        self.params_mut(scope)
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Backpropagates `dlogits` (gradient of the loss with respect to the
    /// logits) and returns gradients in [`Model::params_mut`] order.
    ///
    /// For an adapted layer `z = h W_p + s (h A) B + b`:
    /// `dB = s (hA)ᵀ dz`, `dA = s hᵀ (dz Bᵀ)`, `dh = dz W_pᵀ + s (dz Bᵀ) Aᵀ`.
    pub fn gradients(
        &self,
        cache: &ForwardCache,
        dlogits: &DenseMatrix,
        scope: TrainScope,
    ) -> Result<Vec<Vec<f64>>> {
        let n = self.layers.len();
        let slots: Vec<Vec<Slot>> = (0..n).map(|l| self.slots(l, scope)).collect();
        let Some(lowest) = slots.iter().position(|s| !s.is_empty()) else {
            return Ok(Vec::new());
        };
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
        let mut dz = dlogits.clone();
        for l in (lowest..n).rev() {
            let h = &cache.inputs[l];
            let layer = &self.layers[l];
            let mut dz_bt = None;
            if let LayerWeight::Adapted(st) = &layer.weight {
                dz_bt = Some(dz.matmul_t(&st.b)?);
            }
            for slot in &slots[l] {
                let g = match (slot, &layer.weight) {
                    (Slot::Weight, _) => h.t_matmul(&dz)?.into_vec(),
                    (Slot::A, LayerWeight::Adapted(st)) => h
                        .t_matmul(dz_bt.as_ref().unwrap())?
                        .scale(st.scale)
                        .into_vec(),
                    (Slot::B, LayerWeight::Adapted(st)) => cache.low[l]
                        .as_ref()
                        .expect("adapted layer caches h·A")
                        .t_matmul(&dz)?
                        .scale(st.scale)
                        .into_vec(),
                    (Slot::Bias, _) => dz.column_sums(),
                    _ => unreachable!("factor slots only exist on adapted layers"),
                };
                per_layer[l].push(g);
            }
            if l > lowest {
                let mut dh = match &layer.weight {
                    LayerWeight::Dense(w) => dz.matmul_t(w)?,
                    LayerWeight::Adapted(st) => {
                        let mut dh = dz.matmul_t(&st.w_p)?;
                        dh.add_scaled_assign(st.scale, &dz_bt.unwrap().matmul_t(&st.a)?)?;
                        dh
                    }
                };
                self.spec
                    .activation
                    .backprop(&mut dh, &cache.pre[l - 1], &cache.inputs[l]);
                dz = dh;
            }
        }
        Ok(per_layer.into_iter().flatten().collect())
    }

    /// Writes `manifest.json` plus per-layer SMX1 files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let adapter = match &layer.weight {
                LayerWeight::Dense(w) => {
                    write_matrix(dir.join(format!("layer{l}_w.smx")), w)?;
                    None
                }
                LayerWeight::Adapted(st) => {
                    st.save(&dir.join(format!("layer{l}_adapter")))?;
                    Some(AdapterManifest::from(st))
                }
            };
            if let Some(b) = &layer.bias {
                let m = DenseMatrix::from_vec(1, b.len(), b.clone())?;
                write_matrix(dir.join(format!("layer{l}_bias.smx")), &m)?;
            }
            entries.push(LayerEntry {
                index: l,
                bias: layer.bias.is_some(),
                adapter,
            });
        }
        write_json(
            &dir.join("manifest.json"),
            &ModelManifest {
                spec: self.spec.clone(),
                layers: entries,
                summary: self.summary,
                format: "SMX1".into(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path));
        }
        let man: ModelManifest = read_json(&path)?;
        man.spec.validate()?;
        if man.layers.len() != man.spec.num_layers() {
            return Err(Error::config("layers", "layer count does not match layer_dims"));
        }
        let mut layers = Vec::with_capacity(man.layers.len());
        for (l, entry) in man.layers.iter().enumerate() {
            let weight = match &entry.adapter {
                Some(_) => LayerWeight::Adapted(AdapterState::load(&dir.join(format!("layer{l}_adapter")))?),
                None => LayerWeight::Dense(read_matrix(dir.join(format!("layer{l}_w.smx")))?),
            };
            let bias = if entry.bias {
                Some(read_matrix(dir.join(format!("layer{l}_bias.smx")))?.into_vec())
            } else {
                None
            };
            let layer = Layer { weight, bias };
            let want = (man.spec.layer_dims[l], man.spec.layer_dims[l + 1]);
            let got = (layer.in_dim(), layer.out_dim());
            if got != want || layer.bias.as_ref().is_some_and(|b| b.len() != want.1) {
                return Err(Error::ShapeMismatch {
                    op: "Model::load",
                    left: got,
                    right: want,
                });
            }
            layers.push(layer);
        }
        Ok(Self {
            spec: man.spec,
            layers,
            summary: man.summary,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    index: usize,
    bias: bool,
    adapter: Option<AdapterManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    spec: ModelSpec,
    layers: Vec<LayerEntry>,
    summary: Option<TrainSummary>,
    format: String,
}
