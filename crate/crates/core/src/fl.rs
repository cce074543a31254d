//! FedSGD simulation at batch size 1.
//!
//! `client_step` runs one honest client update and returns the server's view:
//! named parameter gradients plus architecture metadata. A capture carries no
//! pixels and no labels; that is the attacker's knowledge boundary, enforced
//! by the type itself.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::serialize::{self, Entry, CAPTURE_MAGIC};
use crate::tensor::{Tape, Tensor, Val};

/// Training objective the client used; the honest-but-curious server knows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SingleCe,
    MultiHotBce,
}

impl LossKind {
    fn to_code(self) -> f64 {
        match self {
            LossKind::SingleCe => 0.0,
            LossKind::MultiHotBce => 1.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        if v == 0.0 {
            Ok(LossKind::SingleCe)
        } else if v == 1.0 {
            Ok(LossKind::MultiHotBce)
        } else {
            Err(Error::Format { detail: format!("unknown loss kind code {v}"), offset: 0 })
        }
    }
}

/// Build the client loss on the tape. Single-label cross-entropy sums one CE
/// term per provided label (the honest client passes exactly one; attack
/// hypotheses may pass several); multi-hot mode is BCE over the label set.
pub fn loss_on_tape(
    tape: &mut Tape,
    logits: Val,
    labels: &[usize],
    loss_kind: LossKind,
) -> Result<Val> {
    if labels.is_empty() {
        return Err(Error::Contract("loss requires at least one label".into()));
    }
    match loss_kind {
        LossKind::SingleCe => {
            let mut total = tape.cross_entropy(logits, labels[0])?;
            for &l in &labels[1..] {
                let term = tape.cross_entropy(logits, l)?;
                total = tape.add(total, term)?;
            }
            Ok(total)
        }
        LossKind::MultiHotBce => tape.multi_hot_bce(logits, labels),
    }
}

/// The attacker's view of one client step.
#[derive(Clone, Debug)]
pub struct GradientCapture {
    grads: BTreeMap<String, Tensor>,
    pub arch_fingerprint: u64,
    pub loss_kind: LossKind,
    pub class_count: usize,
}

impl GradientCapture {
    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor> {
        &self.grads
    }

    /// Mutable access for building synthetic captures in experiments and
    /// diagnostics (e.g. degenerate-gradient cases).
    pub fn grads_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.grads
    }

    /// All gradients concatenated flat in entry-name order.
    pub fn flat_concat(&self) -> Tensor {
        let total: usize = self.grads.values().map(|t| t.numel()).sum();
        let mut data = Vec::with_capacity(total);
        for t in self.grads.values() {
            data.extend_from_slice(t.data());
        }
        Tensor::new(&[total], data).expect("gradients are finite")
    }

    pub fn total_len(&self) -> usize {
        self.grads.values().map(|t| t.numel()).sum()
    }
}

/// One client step at batch size 1: exact analytic gradients of the chosen
/// loss at (image, labels). The model is untouched.
pub fn client_step(
    model: &ModelGraph,
    image: &Tensor,
    labels: &[usize],
    loss_kind: LossKind,
) -> Result<GradientCapture> {
    if image.shape() != model.input_shape {
        return Err(Error::Dimension {
            op: "client_step",
            detail: format!(
                "image shape {:?} != model input {:?}",
                image.shape(),
                model.input_shape
            ),
        });
    }
    let labels = normalize_labels(labels, model.class_count)?;
    if loss_kind == LossKind::SingleCe && labels.len() != 1 {
        return Err(Error::Contract(format!(
            "single-label cross-entropy takes exactly one label, got {}",
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let [c, h, w] = model.input_shape;
    let x4 = image.reshaped(&[1, c, h, w])?;
    let x = tape.constant(&x4)?;
    let params = model.register_params(&mut tape, true)?;
    let logits = model.forward_on_tape(&mut tape, x, &params)?;
    let loss = loss_on_tape(&mut tape, logits, &labels, loss_kind)?;
    tape.backward(loss)?;

    let mut grads = BTreeMap::new();
    for (name, li, pi) in model.param_index() {
        let g = tape.grad(params[li][pi]).expect("model param is a grad leaf");
        grads.insert(name, g);
    }
    Ok(GradientCapture {
        grads,
        arch_fingerprint: model.fingerprint(),
        loss_kind,
        class_count: model.class_count,
    })
}

pub(crate) fn normalize_labels(labels: &[usize], class_count: usize) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Contract("label set must be nonempty".into()));
    }
    let mut out = labels.to_vec();
    out.sort_unstable();
    out.dedup();
    for &l in &out {
        if l >= class_count {
            return Err(Error::Contract(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
    }
    Ok(out)
}

/// Element-wise mean of captures sharing the same fingerprint and loss kind.
pub fn average_captures(captures: &[GradientCapture]) -> Result<GradientCapture> {
    let first = captures
        .first()
        .ok_or_else(|| Error::Contract("average_captures of an empty list".into()))?;
    for cap in &captures[1..] {
        if cap.arch_fingerprint != first.arch_fingerprint {
            return Err(Error::Mismatch(format!(
                "fingerprint {:016x} != {:016x}",
                cap.arch_fingerprint, first.arch_fingerprint
            )));
        }
        if cap.loss_kind != first.loss_kind {
            return Err(Error::Mismatch("captures disagree on loss kind".into()));
        }
    }
    let inv = 1.0 / captures.len() as f64;
    let mut grads = BTreeMap::new();
    for (name, proto) in &first.grads {
        let mut acc = vec![0.0; proto.numel()];
        for cap in captures {
            let t = cap.grads.get(name).ok_or_else(|| {
                Error::Mismatch(format!("capture missing gradient entry {name:?}"))
            })?;
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a *= inv;
        }
        grads.insert(name.clone(), Tensor::new(proto.shape(), acc)?);
    }
    Ok(GradientCapture {
        grads,
        arch_fingerprint: first.arch_fingerprint,
        loss_kind: first.loss_kind,
        class_count: first.class_count,
    })
}

pub fn save_capture(capture: &GradientCapture, path: &Path) -> Result<()> {
    let fp = capture.arch_fingerprint;
    let mut entries = vec![Entry::new(
        "__meta__",
        vec![4],
        vec![
            capture.loss_kind.to_code(),
            capture.class_count as f64,
            (fp & 0xffff_ffff) as f64,
            (fp >> 32) as f64,
        ],
    )];
    for (name, t) in &capture.grads {
        entries.push(Entry::new(format!("g|{name}"), t.shape().to_vec(), t.data().to_vec()));
    }
    std::fs::write(path, serialize::encode(CAPTURE_MAGIC, &entries))?;
    Ok(())
}

pub fn load_capture(path: &Path) -> Result<GradientCapture> {
    let bytes = std::fs::read(path)?;
    let entries = serialize::decode(&bytes, CAPTURE_MAGIC)?;
    let meta = entries
        .iter()
        .find(|e| e.name == "__meta__")
        .ok_or_else(|| Error::Format { detail: "missing __meta__ entry".into(), offset: 0 })?;
    if meta.data.len() != 4 {
        return Err(Error::Format { detail: "malformed capture metadata".into(), offset: 0 });
    }
    let loss_kind = LossKind::from_code(meta.data[0])?;
    let class_count = meta.data[1] as usize;
    let fingerprint = (meta.data[2] as u64) | ((meta.data[3] as u64) << 32);
    let mut grads = BTreeMap::new();
    for e in &entries {
        if let Some(name) = e.name.strip_prefix("g|") {
            grads.insert(name.to_string(), Tensor::new(&e.dims, e.data.clone())?);
        }
    }
    if grads.is_empty() {
        return Err(Error::Format { detail: "capture holds no gradients".into(), offset: 0 });
    }
    Ok(GradientCapture { grads, arch_fingerprint: fingerprint, loss_kind, class_count })
}

/// Check a capture against the model it will be attacked with.
pub fn check_capture_matches(model: &ModelGraph, capture: &GradientCapture) -> Result<()> {
    let expect = model.fingerprint();
    if capture.arch_fingerprint != expect {
        return Err(Error::Mismatch(format!(
            "capture fingerprint {:016x} does not match model {:016x}",
            capture.arch_fingerprint, expect
        )));
    }
    let names = model.param_names();
    if names.len() != capture.grads.len() {
        return Err(Error::Mismatch(format!(
            "capture has {} gradient entries, model has {} parameters",
            capture.grads.len(),
            names.len()
        )));
    }
    for (name, li, pi) in model.param_index() {
        let g = capture
            .grads
            .get(&name)
            .ok_or_else(|| Error::Mismatch(format!("capture missing gradient {name:?}")))?;
        let p = &model.layers[li].params[pi];
        if g.shape() != p.shape() {
            return Err(Error::Mismatch(format!(
                "gradient {name:?} shape {:?} != parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_linear_model, build_micro_cnn};
    use crate::rng::Rng;

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn linear_softmax_bias_gradient_is_probs_minus_onehot() {
        let model = build_linear_model((1, 4, 4), 5, true, 3).unwrap();
        let mut rng = Rng::new(17);
        let img =
            Tensor::new(&[1, 4, 4], (0..16).map(|_| rng.next_f64()).collect::<Vec<_>>()).unwrap();
        let label = 2usize;
        let cap = client_step(&model, &img, &[label], LossKind::SingleCe).unwrap();
        let logits = model.logits(&img).unwrap();
        let p = softmax(logits.data());
        let bias_grad = cap.grad("01|fc|b").unwrap();
        for (i, g) in bias_grad.data().iter().enumerate() {
            let expect = p[i] - if i == label { 1.0 } else { 0.0 };
            assert!((g - expect).abs() < 1e-12, "bias grad {i}: {g} vs {expect}");
        }
    }

    #[test]
    fn zero_image_gradients_are_finite_and_reproducible() {
        let model = build_micro_cnn((1, 16, 16), 4, 8).unwrap();
        let img = Tensor::zeros(&[1, 16, 16]);
        let a = client_step(&model, &img, &[1], LossKind::SingleCe).unwrap();
        let b = client_step(&model, &img, &[1], LossKind::SingleCe).unwrap();
        let fa = a.flat_concat();
        let fb = b.flat_concat();
        assert!(fa.data().iter().all(|v| v.is_finite()));
        assert_eq!(
            fa.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            fb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn client_gradients_match_finite_differences() {
        use crate::testkit::{finite_difference, rel_err};
        let model = build_micro_cnn((1, 16, 16), 4, 12).unwrap();
        let mut rng = Rng::new(19);
        let img = Tensor::new(
            &[1, 16, 16],
            (0..256).map(|_| rng.next_f64()).collect::<Vec<_>>(),
        )
        .unwrap();
        let label = 3usize;
        let cap = client_step(&model, &img, &[label], LossKind::SingleCe).unwrap();

        // Perturb one whole-model flat parameter vector through a rebuilt model.
        for (name, li, pi) in model.param_index() {
            let flat = model.layers[li].params[pi].clone();
            let grad = cap.grad(&name).unwrap();
            let numeric = finite_difference(&flat, |probe| {
                let mut m2 = model.clone();
                m2.layers[li].params[pi] = probe.clone();
                let mut tape = Tape::new();
                let x = tape.constant(&img.reshaped(&[1, 1, 16, 16])?)?;
                let params = m2.register_params(&mut tape, false)?;
                let logits = m2.forward_on_tape(&mut tape, x, &params)?;
                let l = tape.cross_entropy(logits, label)?;
                Ok(tape.item(l))
            })
            .unwrap();
            for (i, (a, n)) in grad.data().iter().zip(&numeric).enumerate() {
                let e = rel_err(*a, *n);
                assert!(e < 1e-4, "{name}[{i}]: analytic {a} vs fd {n} (rel err {e:.2e})");
            }
        }
    }

    #[test]
    fn label_out_of_range_is_a_contract_error() {
        let model = build_micro_cnn((1, 16, 16), 4, 8).unwrap();
        let img = Tensor::zeros(&[1, 16, 16]);
        match client_step(&model, &img, &[4], LossKind::SingleCe) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn averaging_identities() {
        let model = build_micro_cnn((1, 16, 16), 4, 8).unwrap();
        let mut rng = Rng::new(31);
        let img =
            Tensor::new(&[1, 16, 16], (0..256).map(|_| rng.next_f64()).collect::<Vec<_>>())
                .unwrap();
        let cap = client_step(&model, &img, &[0], LossKind::SingleCe).unwrap();

        // Average of one capture is itself.
        let one = average_captures(std::slice::from_ref(&cap)).unwrap();
        assert_eq!(one.flat_concat().data(), cap.flat_concat().data());

        // Average of g and -g is zero.
        let mut neg = cap.clone();
        for t in neg.grads.values_mut() {
            for v in t.data_mut() {
                *v = -*v;
            }
        }
        let zero = average_captures(&[cap.clone(), neg]).unwrap();
        assert!(zero.flat_concat().data().iter().all(|&v| v == 0.0));

        // Average of k identical captures stays within 1e-15 of the capture.
        let avg = average_captures(&[cap.clone(), cap.clone(), cap.clone()]).unwrap();
        for (a, b) in avg.flat_concat().data().iter().zip(cap.flat_concat().data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn capture_round_trip_is_bit_exact() {
        let model = build_micro_cnn((1, 16, 16), 4, 8).unwrap();
        let mut rng = Rng::new(41);
        let img =
            Tensor::new(&[1, 16, 16], (0..256).map(|_| rng.next_f64()).collect::<Vec<_>>())
                .unwrap();
        let cap = client_step(&model, &img, &[1, 3], LossKind::MultiHotBce).unwrap();
        let dir = std::env::temp_dir().join("glab-fl-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cap.mgig");
        save_capture(&cap, &path).unwrap();
        let back = load_capture(&path).unwrap();
        assert_eq!(back.arch_fingerprint, cap.arch_fingerprint);
        assert_eq!(back.loss_kind, cap.loss_kind);
        assert_eq!(
            back.flat_concat().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            cap.flat_concat().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        check_capture_matches(&model, &back).unwrap();
    }

    #[test]
    fn tampered_fingerprint_is_a_mismatch_at_attack_time() {
        let model = build_micro_cnn((1, 16, 16), 4, 8).unwrap();
        let img = Tensor::zeros(&[1, 16, 16]);
        let cap = client_step(&model, &img, &[0], LossKind::SingleCe).unwrap();
        let dir = std::env::temp_dir().join("glab-fl-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tampered.mgig");
        save_capture(&cap, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // __meta__ is the first entry: header(12) + name_len(4) + "__meta__"(8)
        // + rank(4) + dim(4) puts its payload at byte 32; the fingerprint low
        // half is the third f64, bytes 48..56. Flip a high mantissa byte.
        bytes[54] ^= 0x5a;
        std::fs::write(&path, &bytes).unwrap();
        match load_capture(&path) {
            Ok(loaded) => match check_capture_matches(&model, &loaded) {
                Err(Error::Mismatch(_)) => {}
                other => panic!("expected mismatch, got {other:?}"),
            },
            // Corruption may also surface as a format error; both are honest.
            Err(Error::Format { .. }) => {}
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn capture_into_a_different_model_is_a_mismatch() {
        let model_a = build_micro_cnn((1, 16, 16), 4, 8).unwrap();
        let model_b = build_micro_cnn((1, 16, 16), 4, 9).unwrap();
        let img = Tensor::zeros(&[1, 16, 16]);
        let cap = client_step(&model_a, &img, &[0], LossKind::SingleCe).unwrap();
        match check_capture_matches(&model_b, &cap) {
            Err(Error::Mismatch(_)) => {}
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn capture_payload_is_gradients_only() {
        // Knowledge boundary: the serialized capture holds exactly the
        // gradient entries plus metadata, nothing image- or label-shaped.
        let model = build_micro_cnn((1, 32, 32), 8, 8).unwrap();
        let mut rng = Rng::new(77);
        let img = Tensor::new(
            &[1, 32, 32],
            (0..1024).map(|_| rng.next_f64()).collect::<Vec<_>>(),
        )
        .unwrap();
        let cap = client_step(&model, &img, &[2], LossKind::SingleCe).unwrap();
        assert_eq!(cap.total_len(), model.param_count());
        let names: Vec<&String> = cap.grads().keys().collect();
        assert_eq!(names.len(), model.param_names().len());
        for (have, expect) in names.iter().zip(model.param_names().iter()) {
            assert_eq!(*have, expect);
        }
    }
}
