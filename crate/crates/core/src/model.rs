//! Per-modality MLP encoders, late fusion of their logits, and the exact
//! reverse pass used by the trainer and the attack harness.
//!
//! Encoders are ReLU MLPs producing `C` logits each. The fused score is a
//! per-sample convex combination of the unimodal logits; in dynamic mode the
//! combination weights come from each modality's peak confidence and are
//! treated as constants of the forward pass (no gradient flows through the
//! weighting).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::MultimodalBatch;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Mat, RngStream};

/// One affine layer: `w` is out×in, `b` has one entry per output.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }
}

/// The MLP for one modality; ReLU between layers, linear final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    /// He-initialized MLP: weights ~ N(0, 2/fan_in), biases zero.
    pub fn new_mlp(input_dim: usize, hidden: &[usize], classes: usize, rng: &mut RngStream) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let mut w = Mat::zeros(fan_out, fan_in);
                for v in w.data_mut() {
                    *v = std * rng.normal();
                }
                Layer {
                    w,
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("encoder has layers").out_dim()
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::shape(format!(
                    "layer {} output {} does not feed layer {} input {}",
                    l,
                    pair[0].out_dim(),
                    l + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.b.len() != layer.out_dim() {
                return Err(Error::shape(format!("layer {l} bias length mismatch")));
            }
        }
        Ok(())
    }
}

/// How unimodal logits combine into the fused score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum FusionSpec {
    Static { weights: Vec<f64> },
    Dynamic { temperature: f64 },
}

impl FusionSpec {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        match self {
            FusionSpec::Static { weights } => {
                if weights.len() != modalities {
                    return Err(Error::config(format!(
                        "{} fusion weights for {} modalities",
                        weights.len(),
                        modalities
                    )));
                }
                if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                    return Err(Error::config("fusion weights must be finite and >= 0"));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::config(format!("fusion weights sum to {sum}, not 1")));
                }
                Ok(())
            }
            FusionSpec::Dynamic { temperature } => {
                if *temperature > 0.0 && temperature.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config("fusion temperature must be finite and > 0"))
                }
            }
        }
    }
}

/// Per-modality logits, the per-sample fusion weights actually used, and the
/// fused logits. `fused` row i equals `Σ_m weights[i][m] · per_modality[m]`
/// row i.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    pub per_modality: Vec<Mat>,
    pub weights: Mat,
    pub fused: Mat,
}

impl LogitBundle {
    pub fn batch_size(&self) -> usize {
        self.fused.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.fused.cols()
    }

    pub fn modalities(&self) -> usize {
        self.per_modality.len()
    }
}

/// Layer-by-layer activations retained for one encoder's reverse pass.
/// `inputs[l]` feeds layer `l`; `pre[l]` is that layer's affine output.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub inputs: Vec<Mat>,
    pub pre: Vec<Mat>,
}

/// Gradients mirroring a [`Layer`]'s shapes.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Gradients for every encoder parameter, same nesting as the model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoders: Vec<Vec<LayerGrads>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &FusedModel) -> Self {
        let encoders = model
            .encoders
            .iter()
            .map(|enc| {
                enc.layers
                    .iter()
                    .map(|l| LayerGrads {
                        w: Mat::zeros(l.out_dim(), l.in_dim()),
                        b: vec![0.0; l.out_dim()],
                    })
                    .collect()
            })
            .collect();
        ModelGrads { encoders }
    }
}

/// The complete late-fusion classifier: one encoder per modality plus the
/// fusion rule.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedModel {
    pub encoders: Vec<EncoderParams>,
    pub fusion: FusionSpec,
}

/// `z = x·wᵀ + b`, rows are samples.
fn affine(x: &Mat, layer: &Layer) -> Mat {
    let (rows, out) = (x.rows(), layer.out_dim());
    let mut z = Mat::zeros(rows, out);
    for r in 0..rows {
        let xr = x.row(r);
        let zr = z.row_mut(r);
        for (o, zv) in zr.iter_mut().enumerate() {
            let wr = layer.w.row(o);
            let mut acc = layer.b[o];
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            *zv = acc;
        }
    }
    z
}

fn relu(z: &Mat) -> Mat {
    let mut a = z.clone();
    for v in a.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    a
}

impl FusedModel {
    /// Fresh model with He-initialized encoders, one derived rng stream per
    /// modality so adding a modality never reshuffles earlier ones.
    pub fn init(
        input_dims: &[usize],
        hidden: &[usize],
        classes: usize,
        fusion: FusionSpec,
        rng: &RngStream,
    ) -> Result<Self> {
        if input_dims.len() < 2 {
            return Err(Error::invalid("need at least 2 modalities"));
        }
        if classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        fusion.validate(input_dims.len())?;
        let encoders = input_dims
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                let mut stream = rng.derive_indexed("encoder", m as u64);
                EncoderParams::new_mlp(d, hidden, classes, &mut stream)
            })
            .collect();
        Ok(FusedModel { encoders, fusion })
    }

    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn num_classes(&self) -> usize {
        self.encoders[0].output_dim()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.input_dim()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.len() < 2 {
            return Err(Error::invalid("need at least 2 encoders"));
        }
        for enc in &self.encoders {
            enc.validate()?;
        }
        let c = self.num_classes();
        if self.encoders.iter().any(|e| e.output_dim() != c) {
            return Err(Error::shape("encoders disagree on class count"));
        }
        self.fusion.validate(self.encoders.len())
    }

    fn check_batch(&self, batch: &MultimodalBatch) -> Result<()> {
        if batch.modalities() != self.modalities() {
            return Err(Error::shape(format!(
                "batch has {} modalities, model has {}",
                batch.modalities(),
                self.modalities()
            )));
        }
        for (m, x) in batch.features.iter().enumerate() {
            if x.cols() != self.encoders[m].input_dim() {
                return Err(Error::shape(format!(
                    "modality {m}: batch dim {} vs encoder dim {}",
                    x.cols(),
                    self.encoders[m].input_dim()
                )));
            }
        }
        Ok(())
    }

    fn encode(&self, m: usize, x: &Mat) -> (Mat, EncoderCache) {
        let layers = &self.encoders[m].layers;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut cur = x.clone();
        for (l, layer) in layers.iter().enumerate() {
            let z = affine(&cur, layer);
            inputs.push(cur);
            cur = if l + 1 < layers.len() { relu(&z) } else { z.clone() };
            pre.push(z);
        }
        (cur, EncoderCache { inputs, pre })
    }

    /// Forward pass returning logits plus the caches the reverse pass needs.
    pub fn forward_cached(&self, batch: &MultimodalBatch) -> Result<(LogitBundle, Vec<EncoderCache>)> {
        self.check_batch(batch)?;
        let rows = batch.len();
        let classes = self.num_classes();
        let mut per_modality = Vec::with_capacity(self.modalities());
        let mut caches = Vec::with_capacity(self.modalities());
        for (m, x) in batch.features.iter().enumerate() {
            let (logits, cache) = self.encode(m, x);
            per_modality.push(logits);
            caches.push(cache);
        }

        let weights = match &self.fusion {
            FusionSpec::Static { weights } => {
                let mut w = Mat::zeros(rows, weights.len());
                for r in 0..rows {
                    w.row_mut(r).copy_from_slice(weights);
                }
                w
            }
            FusionSpec::Dynamic { temperature } => {
                let probs: Vec<Mat> = per_modality
                    .iter()
                    .map(|z| softmax_rows(z))
                    .collect::<Result<_>>()?;
                dynamic_weights(&probs, *temperature)?
            }
        };

        let mut fused = Mat::zeros(rows, classes);
        for r in 0..rows {
            let wr = weights.row(r).to_vec();
            let fr = fused.row_mut(r);
            for (m, z) in per_modality.iter().enumerate() {
                for (f, zv) in fr.iter_mut().zip(z.row(r)) {
                    *f += wr[m] * zv;
                }
            }
        }
        Ok((
            LogitBundle {
                per_modality,
                weights,
                fused,
            },
            caches,
        ))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, batch: &MultimodalBatch) -> Result<LogitBundle> {
        self.forward_cached(batch).map(|(b, _)| b)
    }

    /// Logits of one encoder alone (rows = samples); lets probes perturb a
    /// single modality without paying for the others.
    pub fn encoder_logits(&self, modality: usize, x: &Mat) -> Result<Mat> {
        if modality >= self.modalities() {
            return Err(Error::invalid("modality index out of range"));
        }
        if x.cols() != self.encoders[modality].input_dim() {
            return Err(Error::shape(format!(
                "input dim {} vs encoder dim {}",
                x.cols(),
                self.encoders[modality].input_dim()
            )));
        }
        Ok(self.encode(modality, x).0)
    }

    /// Reverse pass. `grad_modality[m]` is the loss gradient on modality m's
    /// logits, `grad_fused` the gradient on the fused logits; the fused part
    /// is routed to each modality scaled by the fusion weight actually used
    /// (weights are constants — dynamic weighting carries no gradient).
    /// Returns parameter gradients and the gradient on each modality's input.
    pub fn backward(
        &self,
        bundle: &LogitBundle,
        caches: &[EncoderCache],
        grad_modality: &[Mat],
        grad_fused: &Mat,
    ) -> Result<(ModelGrads, Vec<Mat>)> {
        let rows = bundle.batch_size();
        let classes = bundle.num_classes();
        if grad_modality.len() != self.modalities() || caches.len() != self.modalities() {
            return Err(Error::shape("per-modality gradient/cache count mismatch"));
        }
        if grad_fused.rows() != rows || grad_fused.cols() != classes {
            return Err(Error::shape("fused gradient shape mismatch"));
        }
        let mut grads = ModelGrads::zeros_like(self);
        let mut input_grads = Vec::with_capacity(self.modalities());

        for m in 0..self.modalities() {
            let gm = &grad_modality[m];
            if gm.rows() != rows || gm.cols() != classes {
                return Err(Error::shape(format!("modality {m} gradient shape mismatch")));
            }
            // Upstream on this encoder's logits: its own term plus the fused
            // term scaled per sample.
            let mut g = gm.clone();
            for r in 0..rows {
                let w = bundle.weights.get(r, m);
                for (gv, fv) in g.row_mut(r).iter_mut().zip(grad_fused.row(r)) {
                    *gv += w * fv;
                }
            }

            let cache = &caches[m];
            let layers = &self.encoders[m].layers;
            for l in (0..layers.len()).rev() {
                let input = &cache.inputs[l];
                let lg = &mut grads.encoders[m][l];
                for r in 0..rows {
                    let gr = g.row(r);
                    let ir = input.row(r);
                    for (o, &gv) in gr.iter().enumerate() {
                        lg.b[o] += gv;
                        let wr = lg.w.row_mut(o);
                        for (wv, iv) in wr.iter_mut().zip(ir) {
                            *wv += gv * iv;
                        }
                    }
                }
                // Gradient on this layer's input, masked by the previous
                // layer's ReLU when one exists.
                let mut gp = Mat::zeros(rows, layers[l].in_dim());
                for r in 0..rows {
                    let gr = g.row(r);
                    let gpr = gp.row_mut(r);
                    for (o, &gv) in gr.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        for (pv, wv) in gpr.iter_mut().zip(layers[l].w.row(o)) {
                            *pv += gv * wv;
                        }
                    }
                }
                if l > 0 {
                    let z_prev = &cache.pre[l - 1];
                    for r in 0..rows {
                        for (pv, zv) in gp.row_mut(r).iter_mut().zip(z_prev.row(r)) {
                            if *zv <= 0.0 {
                                *pv = 0.0;
                            }
                        }
                    }
                }
                g = gp;
            }
            input_grads.push(g);
        }
        Ok((grads, input_grads))
    }

    /// Flat mutable views over every parameter tensor, in a fixed order that
    /// matches [`grad_slices`](ModelGrads) iteration; used by optimizers.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for enc in &mut self.encoders {
            for layer in &mut enc.layers {
                out.push(layer.w.data_mut());
                out.push(layer.b.as_mut_slice());
            }
        }
        out
    }
}

/// Flat read-only views over gradients, ordered like `param_slices_mut`.
pub fn grad_slices(grads: &ModelGrads) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for enc in &grads.encoders {
        for layer in enc {
            out.push(layer.w.data());
            out.push(layer.b.as_slice());
        }
    }
    out
}

/// Row-wise softmax of a logits matrix.
pub fn softmax_rows(z: &Mat) -> Result<Mat> {
    let mut p = Mat::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let sm = softmax(z.row(r))?;
        p.row_mut(r).copy_from_slice(&sm);
    }
    Ok(p)
}

/// Per-sample fusion weights from peak confidences: `w_m ∝ exp(max_k P_k / T)`,
/// computed with max-subtraction. Rows sum to 1.
pub fn dynamic_weights(probs: &[Mat], temperature: f64) -> Result<Mat> {
    if probs.len() < 2 {
        return Err(Error::invalid("dynamic weights need at least 2 modalities"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid("temperature must be finite and > 0"));
    }
    let rows = probs[0].rows();
    if probs.iter().any(|p| p.rows() != rows) {
        return Err(Error::shape("probability matrices disagree on row count"));
    }
    let mut w = Mat::zeros(rows, probs.len());
    for r in 0..rows {
        let scores: Vec<f64> = probs
            .iter()
            .map(|p| {
                let peak = p.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                peak / temperature
            })
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (m, e) in exps.iter().enumerate() {
            w.set(r, m, e / sum);
        }
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Checkpoint container: "MNLM" magic, version, fusion spec, per-modality
// layer shapes, then raw little-endian f64 weights. Round-trip is bit-exact.
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 4] = b"MNLM";
const MODEL_VERSION: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_model(model: &FusedModel, path: &Path) -> Result<()> {
    model.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    match &model.fusion {
        FusionSpec::Static { weights } => {
            w.write_all(&0u32.to_le_bytes())?;
            w.write_all(&(weights.len() as u32).to_le_bytes())?;
            for v in weights {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        FusionSpec::Dynamic { temperature } => {
            w.write_all(&1u32.to_le_bytes())?;
            w.write_all(&temperature.to_le_bytes())?;
        }
    }
    w.write_all(&(model.encoders.len() as u32).to_le_bytes())?;
    for enc in &model.encoders {
        w.write_all(&(enc.layers.len() as u32).to_le_bytes())?;
        for layer in &enc.layers {
            w.write_all(&(layer.out_dim() as u32).to_le_bytes())?;
            w.write_all(&(layer.in_dim() as u32).to_le_bytes())?;
        }
    }
    for enc in &model.encoders {
        for layer in &enc.layers {
            for v in layer.w.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &layer.b {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| format_err(path, "truncated header"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| format_err(path, "truncated payload"))?;
    Ok(f64::from_le_bytes(buf))
}

pub fn load_model(path: &Path) -> Result<FusedModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err(path, "file too short for magic"))?;
    if &magic != MODEL_MAGIC {
        return Err(format_err(path, "bad magic, not a model checkpoint"));
    }
    let version = read_u32(&mut r, path)?;
    if version != MODEL_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let fusion = match read_u32(&mut r, path)? {
        0 => {
            let m = read_u32(&mut r, path)? as usize;
            let weights = (0..m)
                .map(|_| read_f64(&mut r, path))
                .collect::<Result<Vec<f64>>>()?;
            FusionSpec::Static { weights }
        }
        1 => FusionSpec::Dynamic {
            temperature: read_f64(&mut r, path)?,
        },
        other => return Err(format_err(path, format!("unknown fusion mode {other}"))),
    };
    let m_count = read_u32(&mut r, path)? as usize;
    let mut shapes = Vec::with_capacity(m_count);
    for _ in 0..m_count {
        let layers = read_u32(&mut r, path)? as usize;
        let dims = (0..layers)
            .map(|_| {
                let out = read_u32(&mut r, path)? as usize;
                let inp = read_u32(&mut r, path)? as usize;
                Ok((out, inp))
            })
            .collect::<Result<Vec<_>>>()?;
        shapes.push(dims);
    }
    let mut encoders = Vec::with_capacity(m_count);
    for dims in shapes {
        let mut layers = Vec::with_capacity(dims.len());
        for (out, inp) in dims {
            let mut data = vec![0.0; out * inp];
            for v in &mut data {
                *v = read_f64(&mut r, path)?;
            }
            let mut b = vec![0.0; out];
            for v in &mut b {
                *v = read_f64(&mut r, path)?;
            }
            layers.push(Layer {
                w: Mat::from_vec(out, inp, data)?,
                b,
            });
        }
        encoders.push(EncoderParams { layers });
    }
    let model = FusedModel { encoders, fusion };
    model.validate().map_err(|e| format_err(path, e.to_string()))?;
    Ok(model)
}
