//! Model zoo: the desk-scale MicroCNN classifier, plain linear probes, the
//! NCB auxiliary block that scores labels from scaled gradients, training,
//! and bit-exact weight serialization.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fl::LossKind;
use crate::optim::Adam;
use crate::rng::Rng;
use crate::serialize::{self, Entry, WEIGHTS_MAGIC};
use crate::tensor::{Tape, Tensor, Val};

/// Epsilon used by inference-mode batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d { stride: usize, padding: usize },
    Relu,
    AvgPool2d { k: usize },
    Flatten,
    Linear { bias: bool },
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Conv2d: [kernel, bias]; Linear: [weight] or [weight, bias]; else empty.
    pub params: Vec<Tensor>,
}

/// Ordered, named, parameterized layer sequence ending in a fully-connected
/// head of `class_count` outputs.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub class_count: usize,
    pub feature_count: usize,
    pub input_shape: [usize; 3],
    pub trained: bool,
}

impl ModelGraph {
    /// Dry-run the layer plan so malformed graphs fail at build time.
    fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for layer in &self.layers {
            if !names.insert(&layer.name) {
                return Err(Error::Config(format!("duplicate layer name {:?}", layer.name)));
            }
        }
        match self.layers.last() {
            Some(l) if matches!(l.kind, LayerKind::Linear { .. }) => {}
            _ => return Err(Error::Config("final layer must be fully-connected".into())),
        }
        let zeros = Tensor::zeros(&[
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
        ]);
        let logits = self.logits(&zeros)?;
        if logits.numel() != self.class_count {
            return Err(Error::Config(format!(
                "head emits {} scores, expected {}",
                logits.numel(),
                self.class_count
            )));
        }
        Ok(())
    }

    /// Register every parameter as a tape leaf (gradient leaves iff asked).
    pub fn register_params(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Vec<Val>>> {
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut vals = Vec::with_capacity(layer.params.len());
            for p in &layer.params {
                let mut t = p.clone();
                t.requires_grad = requires_grad;
                vals.push(tape.leaf(&t)?);
            }
            out.push(vals);
        }
        Ok(out)
    }

    /// Forward pass over registered parameters; `x` is [1,C,H,W]; returns
    /// logits as a flat [class_count] node.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Val, params: &[Vec<Val>]) -> Result<Val> {
        let mut cur = x;
        for (layer, vals) in self.layers.iter().zip(params) {
            cur = match &layer.kind {
                LayerKind::Conv2d { stride, padding } => {
                    let y = tape.conv2d(cur, vals[0], *stride, *padding)?;
                    let b = tape.bc_channel_like(vals[1], y)?;
                    tape.add(y, b)?
                }
                LayerKind::Relu => tape.relu(cur)?,
                LayerKind::AvgPool2d { k } => tape.avgpool2d(cur, *k)?,
                LayerKind::Flatten => {
                    let numel: usize = tape.shape_of(cur).iter().product();
                    tape.reshape(cur, &[1, numel])?
                }
                LayerKind::Linear { bias } => {
                    let b = if *bias { Some(vals[1]) } else { None };
                    tape.linear(cur, vals[0], b)?
                }
            };
        }
        let numel: usize = tape.shape_of(cur).iter().product();
        tape.reshape(cur, &[numel])
    }

    /// Convenience inference: logits for a [C,H,W] image.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let sh = image.shape();
        if sh != self.input_shape {
            return Err(Error::Dimension {
                op: "ModelGraph::logits",
                detail: format!("image shape {sh:?} != model input {:?}", self.input_shape),
            });
        }
        let mut tape = Tape::new();
        let x4 = image.reshaped(&[1, sh[0], sh[1], sh[2]])?;
        let x = tape.constant(&x4)?;
        let params = self.register_params(&mut tape, false)?;
        let out = self.forward_on_tape(&mut tape, x, &params)?;
        Ok(tape.tensor_of(out))
    }

    /// Parameter entry names in serialization (lexicographic) order. That
    /// order also defines the flattened-concatenation layout of gradients.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, _) in layer.params.iter().enumerate() {
                names.push(param_name(i, &layer.name, j));
            }
        }
        names.sort();
        names
    }

    /// (entry name, layer index, param index), sorted by entry name.
    pub fn param_index(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for j in 0..layer.params.len() {
                out.push((param_name(i, &layer.name, j), i, j));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(|p| p.numel()).sum()
    }

    /// Entry name of the final fully-connected weight.
    pub fn head_weight_name(&self) -> String {
        let i = self.layers.len() - 1;
        param_name(i, &self.layers[i].name, 0)
    }

    /// Final fully-connected (weight, bias) tensors.
    pub fn head(&self) -> (&Tensor, Option<&Tensor>) {
        let layer = self.layers.last().expect("validated: model has layers");
        (&layer.params[0], layer.params.get(1))
    }

    /// Hash of the architecture and every weight, as serialized.
    pub fn fingerprint(&self) -> u64 {
        serialize::fnv1a(&serialize::encode(WEIGHTS_MAGIC, &self.to_entries()))
    }

    fn to_entries(&self) -> Vec<Entry> {
        let mut entries = Vec::new();
        entries.push(Entry::new(
            "__meta__",
            vec![7],
            vec![
                0.0,
                self.class_count as f64,
                self.feature_count as f64,
                self.input_shape[0] as f64,
                self.input_shape[1] as f64,
                self.input_shape[2] as f64,
                if self.trained { 1.0 } else { 0.0 },
            ],
        ));
        for (i, layer) in self.layers.iter().enumerate() {
            entries.push(Entry::marker(format!(
                "{i:02}|{}|{}",
                layer.name,
                kind_tag(&layer.kind)
            )));
            for (j, p) in layer.params.iter().enumerate() {
                entries.push(Entry::new(
                    param_name(i, &layer.name, j),
                    p.shape().to_vec(),
                    p.data().to_vec(),
                ));
            }
        }
        entries
    }
}

fn param_name(layer_idx: usize, layer_name: &str, param_idx: usize) -> String {
    let suffix = if param_idx == 0 { "w" } else { "b" };
    format!("{layer_idx:02}|{layer_name}|{suffix}")
}

fn kind_tag(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Conv2d { stride, padding } => format!("conv2d;s={stride};p={padding}"),
        LayerKind::Relu => "relu".into(),
        LayerKind::AvgPool2d { k } => format!("avgpool2d;k={k}"),
        LayerKind::Flatten => "flatten".into(),
        LayerKind::Linear { bias } => format!("linear;bias={}", if *bias { 1 } else { 0 }),
    }
}

fn parse_kind_tag(tag: &str) -> Result<LayerKind> {
    let mut parts = tag.split(';');
    let head = parts.next().unwrap_or("");
    let mut kv = std::collections::BTreeMap::new();
    for part in parts {
        if let Some((k, v)) = part.split_once('=') {
            let n: usize = v.parse().map_err(|_| Error::Format {
                detail: format!("bad layer tag parameter {part:?}"),
                offset: 0,
            })?;
            kv.insert(k.to_string(), n);
        }
    }
    let get = |k: &str| -> Result<usize> {
        kv.get(k).copied().ok_or_else(|| Error::Format {
            detail: format!("layer tag {tag:?} missing {k}"),
            offset: 0,
        })
    };
    Ok(match head {
        "conv2d" => LayerKind::Conv2d { stride: get("s")?, padding: get("p")? },
        "relu" => LayerKind::Relu,
        "avgpool2d" => LayerKind::AvgPool2d { k: get("k")? },
        "flatten" => LayerKind::Flatten,
        "linear" => LayerKind::Linear { bias: get("bias")? == 1 },
        other => {
            return Err(Error::Format {
                detail: format!("unknown layer kind {other:?}"),
                offset: 0,
            })
        }
    })
}

// ── Builders ────────────────────────────────────────────────────────────

/// Three conv+relu stages, one average pool and a fully-connected head.
/// Resolutions must be multiples of 8 and at least 16. Deterministic in
/// (shape, class_count, seed); parameters stay well under 50k at 1x32x32.
pub fn build_micro_cnn(
    input_shape: (usize, usize, usize),
    class_count: usize,
    seed: u64,
) -> Result<ModelGraph> {
    let (c, h, w) = input_shape;
    if h < 16 || w < 16 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!(
            "micro-cnn pooling plan needs height/width >= 16 and divisible by 8, got {h}x{w}"
        )));
    }
    if class_count == 0 || c == 0 {
        return Err(Error::Config("class_count and channels must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let conv = |rng: &mut Rng, name: &str, c_in: usize, c_out: usize, k: usize, stride, padding| Layer {
        name: name.into(),
        kind: LayerKind::Conv2d { stride, padding },
        params: vec![
            init_normal(rng, &[c_out, c_in, k, k], (2.0 / (c_in * k * k) as f64).sqrt()),
            Tensor::zeros(&[c_out]),
        ],
    };
    let feature_count = 16 * (h / 8) * (w / 8);
    let layers = vec![
        conv(&mut rng, "conv1", c, 8, 3, 1, 1),
        Layer { name: "relu1".into(), kind: LayerKind::Relu, params: vec![] },
        conv(&mut rng, "conv2", 8, 16, 2, 2, 0),
        Layer { name: "relu2".into(), kind: LayerKind::Relu, params: vec![] },
        conv(&mut rng, "conv3", 16, 16, 2, 2, 0),
        Layer { name: "relu3".into(), kind: LayerKind::Relu, params: vec![] },
        Layer { name: "pool".into(), kind: LayerKind::AvgPool2d { k: 2 }, params: vec![] },
        Layer { name: "flatten".into(), kind: LayerKind::Flatten, params: vec![] },
        Layer {
            name: "fc".into(),
            kind: LayerKind::Linear { bias: true },
            params: vec![
                init_normal(&mut rng, &[class_count, feature_count], (1.0 / feature_count as f64).sqrt()),
                Tensor::zeros(&[class_count]),
            ],
        },
    ];
    let model = ModelGraph {
        layers,
        class_count,
        feature_count,
        input_shape: [c, h, w],
        trained: false,
    };
    model.validate()?;
    Ok(model)
}

/// Flatten + single fully-connected layer.
pub fn build_linear_model(
    input_shape: (usize, usize, usize),
    class_count: usize,
    bias: bool,
    seed: u64,
) -> Result<ModelGraph> {
    let (c, h, w) = input_shape;
    let feature_count = c * h * w;
    let mut rng = Rng::new(seed);
    let mut params = vec![init_normal(
        &mut rng,
        &[class_count, feature_count],
        (1.0 / feature_count as f64).sqrt(),
    )];
    if bias {
        params.push(Tensor::zeros(&[class_count]));
    }
    let layers = vec![
        Layer { name: "flatten".into(), kind: LayerKind::Flatten, params: vec![] },
        Layer { name: "fc".into(), kind: LayerKind::Linear { bias }, params },
    ];
    let model = ModelGraph {
        layers,
        class_count,
        feature_count,
        input_shape: [c, h, w],
        trained: false,
    };
    model.validate()?;
    Ok(model)
}

fn init_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() * std).collect())
        .expect("normal init is finite")
}

// ── Training ────────────────────────────────────────────────────────────

/// Plain per-sample SGD. Single-label mode uses softmax cross-entropy (each
/// label set must be a singleton); multi-label mode uses multi-hot BCE.
/// Returns the per-epoch mean loss trace and marks the model trained.
pub fn train(
    model: &mut ModelGraph,
    data: &[(Tensor, Vec<usize>)],
    loss_kind: LossKind,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Contract("train requires a nonempty dataset".into()));
    }
    let mut rng = Rng::new(seed);
    let mut trace = Vec::with_capacity(epochs);
    let [c, h, w] = model.input_shape;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (image, labels) = &data[i];
            let mut tape = Tape::new();
            let x4 = image.reshaped(&[1, c, h, w])?;
            let x = tape.constant(&x4)?;
            let params = model.register_params(&mut tape, true)?;
            let logits = model.forward_on_tape(&mut tape, x, &params)?;
            let loss = crate::fl::loss_on_tape(&mut tape, logits, labels, loss_kind)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            let loss_value = tape.item(loss);
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            epoch_loss += loss_value;
            tape.backward(loss)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            for (layer_vals, layer) in params.iter().zip(model.layers.iter_mut()) {
                for (val, param) in layer_vals.iter().zip(layer.params.iter_mut()) {
                    let g = tape.grad(*val).expect("param is a grad leaf");
                    let pd = param.data_mut();
                    for (p, gv) in pd.iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
            }
        }
        trace.push(epoch_loss / data.len() as f64);
    }
    model.trained = true;
    Ok(trace)
}

/// Fraction of samples whose argmax logit equals the (single) label.
pub fn single_label_accuracy(model: &ModelGraph, data: &[(Tensor, Vec<usize>)]) -> Result<f64> {
    let mut hits = 0usize;
    for (image, labels) in data {
        let logits = model.logits(image)?;
        let arg = argmax(logits.data());
        if labels.first() == Some(&arg) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ── Weight serialization ────────────────────────────────────────────────

pub fn save_weights(model: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, serialize::encode(WEIGHTS_MAGIC, &model.to_entries()))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelGraph> {
    let bytes = std::fs::read(path)?;
    let entries = serialize::decode(&bytes, WEIGHTS_MAGIC)?;
    model_from_entries(&entries)
}

fn model_from_entries(entries: &[Entry]) -> Result<ModelGraph> {
    let meta = entries
        .iter()
        .find(|e| e.name == "__meta__")
        .ok_or_else(|| Error::Format { detail: "missing __meta__ entry".into(), offset: 0 })?;
    if meta.data.len() != 7 || meta.data[0] != 0.0 {
        return Err(Error::Format {
            detail: "not a model container (wrong meta flavor)".into(),
            offset: 0,
        });
    }
    let class_count = meta.data[1] as usize;
    let feature_count = meta.data[2] as usize;
    let input_shape = [meta.data[3] as usize, meta.data[4] as usize, meta.data[5] as usize];
    let trained = meta.data[6] != 0.0;

    let mut layers: Vec<Layer> = Vec::new();
    for e in entries {
        if e.name == "__meta__" {
            continue;
        }
        let parts: Vec<&str> = e.name.splitn(3, '|').collect();
        if parts.len() != 3 {
            return Err(Error::Format {
                detail: format!("malformed entry name {:?}", e.name),
                offset: 0,
            });
        }
        let idx: usize = parts[0].parse().map_err(|_| Error::Format {
            detail: format!("bad layer index in {:?}", e.name),
            offset: 0,
        })?;
        match parts[2] {
            "w" | "b" => {
                let layer = layers.get_mut(idx).ok_or_else(|| Error::Format {
                    detail: format!("parameter {:?} before its layer marker", e.name),
                    offset: 0,
                })?;
                layer.params.push(Tensor::new(&e.dims, e.data.clone())?);
            }
            tag => {
                if idx != layers.len() {
                    return Err(Error::Format {
                        detail: format!("layer marker {:?} out of order", e.name),
                        offset: 0,
                    });
                }
                layers.push(Layer {
                    name: parts[1].to_string(),
                    kind: parse_kind_tag(tag)?,
                    params: vec![],
                });
            }
        }
    }
    let model = ModelGraph { layers, class_count, feature_count, input_shape, trained };
    model.validate()?;
    Ok(model)
}

// ── NCB ─────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcbMode {
    CopyWeights,
    TrainOnGradients,
}

/// Auxiliary block that turns a scaled head-weight gradient [C,F,1,1] into
/// per-label scores. The gradient is treated as a batch of C class rows:
/// each row passes through a linear stage with activation, the average pool
/// over the trailing 1x1 spatial extent (an identity at this shape, kept for
/// structure), batch normalization with stored statistics, and the
/// fully-connected stage; row i scored by head row i (the diagonal of the
/// resulting C x C score matrix) gives the per-label scores, squashed by a
/// sigmoid. Weights are immutable during attacks.
#[derive(Clone, Debug)]
pub struct NcbGraph {
    pub class_count: usize,
    pub feature_count: usize,
    pub mode: NcbMode,
    pub linear_w: Tensor,
    pub linear_b: Tensor,
    pub bn_mean: Tensor,
    pub bn_var: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

/// Recipe for `NcbMode::TrainOnGradients`.
#[derive(Clone, Copy, Debug)]
pub struct NcbTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Gradient scale applied before the block; must match the attack's.
    pub ncb_scale: f64,
}

impl Default for NcbTrainConfig {
    fn default() -> Self {
        NcbTrainConfig { epochs: 60, lr: 3e-3, seed: 7, ncb_scale: 7e8 }
    }
}

impl NcbGraph {
    pub fn input_shape(&self) -> [usize; 4] {
        [self.class_count, self.feature_count, 1, 1]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.linear_w,
            &mut self.linear_b,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    fn logits_on_tape(&self, tape: &mut Tape, g: Val, params: &[Val; 6]) -> Result<Val> {
        let [lw, lb, gamma, beta, fw, fb] = *params;
        let c = self.class_count;
        let mixed = tape.matmul_nn(g, lw)?;
        let lb_b = tape.broadcast_rows(lb, c)?;
        let mixed = tape.add(mixed, lb_b)?;
        let active = tape.relu(mixed)?;
        // AvgPool over the trailing 1x1 spatial extent: identity here.
        let mean = tape.constant(&self.bn_mean)?;
        let var = tape.constant(&self.bn_var)?;
        let normed = tape.batchnorm_inference(active, mean, var, gamma, beta, BN_EPS)?;
        let score_matrix = tape.linear(normed, fw, Some(fb))?;
        let diag: Vec<usize> = (0..c).map(|i| i * c + i).collect();
        let flat = tape.reshape(score_matrix, &[c * c])?;
        tape.gather(flat, &diag)
    }

    fn register(&self, tape: &mut Tape, requires_grad: bool) -> Result<[Val; 6]> {
        let mut reg = |t: &Tensor| -> Result<Val> {
            let mut c = t.clone();
            c.requires_grad = requires_grad;
            tape.leaf(&c)
        };
        Ok([
            reg(&self.linear_w)?,
            reg(&self.linear_b)?,
            reg(&self.bn_gamma)?,
            reg(&self.bn_beta)?,
            reg(&self.fc_w)?,
            reg(&self.fc_b)?,
        ])
    }

    /// Per-label sigmoid scores for an already scaled gradient tensor shaped
    /// [C,F], [C,F,1,1] or anything that flattens to C*F.
    pub fn forward_scores(&self, scaled_grad: &Tensor) -> Result<Tensor> {
        let (c, f) = (self.class_count, self.feature_count);
        if scaled_grad.numel() != c * f {
            return Err(Error::Dimension {
                op: "NcbGraph::forward_scores",
                detail: format!(
                    "gradient has {} elements, block expects {}x{}",
                    scaled_grad.numel(),
                    c,
                    f
                ),
            });
        }
        let mut tape = Tape::new();
        let g2 = scaled_grad.reshaped(&[c, f])?;
        let g = tape.constant(&g2)?;
        let params = self.register(&mut tape, false)?;
        let logits = self.logits_on_tape(&mut tape, g, &params)?;
        let scores = tape.sigmoid(logits)?;
        Ok(tape.tensor_of(scores))
    }

    /// Fingerprint of all block weights; attacks must leave it unchanged.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for t in [
            &self.linear_w,
            &self.linear_b,
            &self.bn_mean,
            &self.bn_var,
            &self.bn_gamma,
            &self.bn_beta,
            &self.fc_w,
            &self.fc_b,
        ] {
            h ^= t.checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Build the NCB for a trained model.
///
/// Copy mode mirrors the trained head exactly (identity linear stage and
/// identity normalization); train mode fits the block on a corpus of
/// (capture, true label set) pairs with Adam on multi-hot BCE, normalization
/// statistics frozen from a pass over the corpus under the initial weights.
pub fn build_ncb(
    model: &ModelGraph,
    mode: NcbMode,
    corpus: Option<&[(crate::fl::GradientCapture, Vec<usize>)]>,
    cfg: &NcbTrainConfig,
) -> Result<NcbGraph> {
    let c = model.class_count;
    let f = model.feature_count;
    match mode {
        NcbMode::CopyWeights => {
            if !model.trained {
                return Err(Error::Config("copy-weights NCB requires a trained model".into()));
            }
            let (head_w, head_b) = model.head();
            let mut eye = vec![0.0; f * f];
            for i in 0..f {
                eye[i * f + i] = 1.0;
            }
            Ok(NcbGraph {
                class_count: c,
                feature_count: f,
                mode,
                linear_w: Tensor::new(&[f, f], eye)?,
                linear_b: Tensor::zeros(&[f]),
                bn_mean: Tensor::zeros(&[f]),
                bn_var: Tensor::full(&[f], 1.0),
                bn_gamma: Tensor::full(&[f], 1.0),
                bn_beta: Tensor::zeros(&[f]),
                fc_w: head_w.clone(),
                fc_b: head_b.cloned().unwrap_or_else(|| Tensor::zeros(&[c])),
            })
        }
        NcbMode::TrainOnGradients => {
            let corpus = corpus.ok_or_else(|| {
                Error::Config("train-on-gradients NCB requires a capture corpus".into())
            })?;
            if corpus.is_empty() {
                return Err(Error::Config("NCB training corpus is empty".into()));
            }
            let head_name = model.head_weight_name();
            let mut inputs = Vec::with_capacity(corpus.len());
            for (cap, labels) in corpus {
                let g = cap.grad(&head_name).ok_or_else(|| {
                    Error::Mismatch(format!("capture lacks head gradient {head_name:?}"))
                })?;
                let mut scaled = g.reshaped(&[c, f])?;
                for v in scaled.data_mut() {
                    *v *= cfg.ncb_scale;
                }
                inputs.push((scaled, labels.clone()));
            }
            let mut rng = Rng::new(cfg.seed);
            let mut ncb = NcbGraph {
                class_count: c,
                feature_count: f,
                mode,
                linear_w: init_normal(&mut rng, &[f, f], (1.0 / f as f64).sqrt()),
                linear_b: Tensor::zeros(&[f]),
                bn_mean: Tensor::zeros(&[f]),
                bn_var: Tensor::full(&[f], 1.0),
                bn_gamma: Tensor::full(&[f], 1.0),
                bn_beta: Tensor::zeros(&[f]),
                fc_w: init_normal(&mut rng, &[c, f], (1.0 / f as f64).sqrt()),
                fc_b: Tensor::zeros(&[c]),
            };
            ncb.freeze_bn_stats(&inputs)?;
            ncb.fit(&inputs, cfg, &mut rng)?;
            Ok(ncb)
        }
    }
}

impl NcbGraph {
    /// Per-feature statistics over every class row of the corpus, under the
    /// initial weights.
    fn freeze_bn_stats(&mut self, inputs: &[(Tensor, Vec<usize>)]) -> Result<()> {
        let f = self.feature_count;
        let c = self.class_count;
        let mut mean = vec![0.0; f];
        let mut sq = vec![0.0; f];
        for (g, _) in inputs {
            let mut tape = Tape::new();
            let gv = tape.constant(g)?;
            let lw = tape.constant(&self.linear_w)?;
            let lb = tape.constant(&self.linear_b)?;
            let mixed = tape.matmul_nn(gv, lw)?;
            let lb_b = tape.broadcast_rows(lb, c)?;
            let mixed = tape.add(mixed, lb_b)?;
            let active = tape.relu(mixed)?;
            let rows = tape.value(active);
            for row in 0..c {
                for i in 0..f {
                    let v = rows[row * f + i];
                    mean[i] += v;
                    sq[i] += v * v;
                }
            }
        }
        let n = (inputs.len() * c) as f64;
        let mut var = vec![0.0; f];
        for i in 0..f {
            mean[i] /= n;
            var[i] = (sq[i] / n - mean[i] * mean[i]).max(1e-12);
        }
        self.bn_mean = Tensor::new(&[f], mean)?;
        self.bn_var = Tensor::new(&[f], var)?;
        Ok(())
    }

    fn fit(&mut self, inputs: &[(Tensor, Vec<usize>)], cfg: &NcbTrainConfig, rng: &mut Rng) -> Result<()> {
        let mut opts: Vec<Adam> = {
            let sizes = [
                self.linear_w.numel(),
                self.linear_b.numel(),
                self.bn_gamma.numel(),
                self.bn_beta.numel(),
                self.fc_w.numel(),
                self.fc_b.numel(),
            ];
            sizes.iter().map(|&n| Adam::new(cfg.lr, n)).collect()
        };
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..inputs.len()).collect();
            rng.shuffle(&mut order);
            for &i in &order {
                let (g, labels) = &inputs[i];
                let mut tape = Tape::new();
                let gv = tape.constant(g)?;
                let params = self.register(&mut tape, true)?;
                let logits = self.logits_on_tape(&mut tape, gv, &params)?;
                let loss = tape
                    .multi_hot_bce(logits, labels)
                    .map_err(|e| Error::Numeric(format!("NCB epoch {epoch}: {e}")))?;
                tape.backward(loss)
                    .map_err(|e| Error::Numeric(format!("NCB epoch {epoch}: {e}")))?;
                let grads: Vec<Vec<f64>> = params
                    .iter()
                    .map(|v| tape.grad(*v).expect("NCB param is a grad leaf").data().to_vec())
                    .collect();
                for ((opt, grad), param) in
                    opts.iter_mut().zip(&grads).zip(self.params_mut())
                {
                    opt.step(param.data_mut(), grad);
                }
            }
        }
        Ok(())
    }
}

/// Serialize an NCB with the weights container (meta flavor 1).
pub fn save_ncb(ncb: &NcbGraph, path: &Path) -> Result<()> {
    let mut entries = vec![Entry::new(
        "__meta__",
        vec![7],
        vec![
            1.0,
            ncb.class_count as f64,
            ncb.feature_count as f64,
            match ncb.mode {
                NcbMode::CopyWeights => 0.0,
                NcbMode::TrainOnGradients => 1.0,
            },
            0.0,
            0.0,
            0.0,
        ],
    )];
    for (name, t) in [
        ("ncb|linear|w", &ncb.linear_w),
        ("ncb|linear|b", &ncb.linear_b),
        ("ncb|bn|mean", &ncb.bn_mean),
        ("ncb|bn|var", &ncb.bn_var),
        ("ncb|bn|gamma", &ncb.bn_gamma),
        ("ncb|bn|beta", &ncb.bn_beta),
        ("ncb|fc|w", &ncb.fc_w),
        ("ncb|fc|b", &ncb.fc_b),
    ] {
        entries.push(Entry::new(name, t.shape().to_vec(), t.data().to_vec()));
    }
    std::fs::write(path, serialize::encode(WEIGHTS_MAGIC, &entries))?;
    Ok(())
}

pub fn load_ncb(path: &Path) -> Result<NcbGraph> {
    let bytes = std::fs::read(path)?;
    let entries = serialize::decode(&bytes, WEIGHTS_MAGIC)?;
    let meta = entries
        .iter()
        .find(|e| e.name == "__meta__")
        .ok_or_else(|| Error::Format { detail: "missing __meta__ entry".into(), offset: 0 })?;
    if meta.data.len() != 7 || meta.data[0] != 1.0 {
        return Err(Error::Format {
            detail: "not an NCB container (wrong meta flavor)".into(),
            offset: 0,
        });
    }
    let fetch = |name: &str| -> Result<Tensor> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format { detail: format!("missing entry {name:?}"), offset: 0 })
            .and_then(|e| Tensor::new(&e.dims, e.data.clone()))
    };
    Ok(NcbGraph {
        class_count: meta.data[1] as usize,
        feature_count: meta.data[2] as usize,
        mode: if meta.data[3] == 0.0 { NcbMode::CopyWeights } else { NcbMode::TrainOnGradients },
        linear_w: fetch("ncb|linear|w")?,
        linear_b: fetch("ncb|linear|b")?,
        bn_mean: fetch("ncb|bn|mean")?,
        bn_var: fetch("ncb|bn|var")?,
        bn_gamma: fetch("ncb|bn|gamma")?,
        bn_beta: fetch("ncb|bn|beta")?,
        fc_w: fetch("ncb|fc|w")?,
        fc_b: fetch("ncb|fc|b")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_cnn_is_deterministic_and_small() {
        let a = build_micro_cnn((1, 32, 32), 8, 42).unwrap();
        let b = build_micro_cnn((1, 32, 32), 8, 42).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(a.param_count() <= 50_000, "param count {}", a.param_count());
        let other = build_micro_cnn((1, 32, 32), 8, 43).unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
    }

    #[test]
    fn micro_cnn_forward_on_zeros_is_finite() {
        let m = build_micro_cnn((1, 32, 32), 8, 1).unwrap();
        let logits = m.logits(&Tensor::zeros(&[1, 32, 32])).unwrap();
        assert_eq!(logits.numel(), 8);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bad_resolution_is_a_configuration_error() {
        match build_micro_cnn((1, 20, 20), 8, 1) {
            Err(Error::Config(_)) => {}
            other => panic!("expected configuration error, got {other:?}"),
        }
        assert!(build_micro_cnn((1, 8, 8), 4, 1).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut m = build_micro_cnn((1, 16, 16), 4, 3).unwrap();
        let before = m.fingerprint();
        let data = vec![(Tensor::full(&[1, 16, 16], 0.5), vec![1usize])];
        train(&mut m, &data, LossKind::SingleCe, 2, 0.0, 9).unwrap();
        let mut untouched = m.clone();
        untouched.trained = false;
        assert_eq!(untouched.fingerprint(), before);
    }

    #[test]
    fn one_sgd_epoch_reduces_the_sample_loss() {
        let mut m = build_micro_cnn((1, 16, 16), 4, 5).unwrap();
        let mut img = Tensor::zeros(&[1, 16, 16]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i % 7) as f64) / 7.0;
        }
        let data = vec![(img.clone(), vec![2usize])];
        let loss_of = |m: &ModelGraph| {
            let mut tape = Tape::new();
            let x = tape.constant(&img.reshaped(&[1, 1, 16, 16]).unwrap()).unwrap();
            let params = m.register_params(&mut tape, false).unwrap();
            let logits = m.forward_on_tape(&mut tape, x, &params).unwrap();
            let l = tape.cross_entropy(logits, 2).unwrap();
            tape.item(l)
        };
        let before = loss_of(&m);
        train(&mut m, &data, LossKind::SingleCe, 1, 0.05, 9).unwrap();
        let after = loss_of(&m);
        assert!(after < before, "loss did not decrease: {before} -> {after}");
    }

    #[test]
    fn training_trace_is_bitwise_reproducible() {
        let build = || {
            let mut m = build_micro_cnn((1, 16, 16), 4, 11).unwrap();
            let mut rng = Rng::new(55);
            let data: Vec<(Tensor, Vec<usize>)> = (0..6)
                .map(|i| {
                    let img = Tensor::new(
                        &[1, 16, 16],
                        (0..256).map(|_| rng.next_f64()).collect::<Vec<_>>(),
                    )
                    .unwrap();
                    (img, vec![i % 4])
                })
                .collect();
            train(&mut m, &data, LossKind::SingleCe, 3, 0.02, 77).unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn weight_round_trip_is_bit_exact() {
        let mut m = build_micro_cnn((1, 16, 16), 4, 21).unwrap();
        m.trained = true;
        let dir = std::env::temp_dir().join("glab-model-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.mgic");
        save_weights(&m, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(m.fingerprint(), back.fingerprint());
        assert!(back.trained);
        // Byte-identical on re-save.
        let path2 = dir.join("model2.mgic");
        save_weights(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_weight_file_is_a_format_error() {
        let m = build_micro_cnn((1, 16, 16), 4, 2).unwrap();
        let dir = std::env::temp_dir().join("glab-model-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.mgic");
        save_weights(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_weights(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_a_version_error() {
        let m = build_micro_cnn((1, 16, 16), 4, 2).unwrap();
        let dir = std::env::temp_dir().join("glab-model-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("version.mgic");
        save_weights(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_weights(&path) {
            Err(Error::Version { found: 999, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn copy_mode_ncb_copies_the_head_exactly() {
        let mut m = build_micro_cnn((1, 16, 16), 4, 31).unwrap();
        m.trained = true;
        let ncb = build_ncb(&m, NcbMode::CopyWeights, None, &NcbTrainConfig::default()).unwrap();
        let (head_w, head_b) = m.head();
        assert_eq!(ncb.fc_w.data(), head_w.data());
        assert_eq!(ncb.fc_b.data(), head_b.unwrap().data());
    }

    #[test]
    fn copy_mode_requires_a_trained_model() {
        let m = build_micro_cnn((1, 16, 16), 4, 31).unwrap();
        match build_ncb(&m, NcbMode::CopyWeights, None, &NcbTrainConfig::default()) {
            Err(Error::Config(_)) => {}
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn ncb_forward_on_zero_gradient_is_finite() {
        let mut m = build_micro_cnn((1, 16, 16), 4, 31).unwrap();
        m.trained = true;
        let ncb = build_ncb(&m, NcbMode::CopyWeights, None, &NcbTrainConfig::default()).unwrap();
        let before = ncb.checksum();
        let zero = Tensor::zeros(&[4, m.feature_count, 1, 1]);
        let scores = ncb.forward_scores(&zero).unwrap();
        assert_eq!(scores.numel(), 4);
        assert!(scores.data().iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        assert_eq!(ncb.checksum(), before, "forward mutated NCB weights");
    }
}
