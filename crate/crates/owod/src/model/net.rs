//! Parameter storage, initialization, and the tape-based forward pass.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use owod_grad::{ConvSpec, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::DetectorConfig;
use crate::error::{Error, Result};

/// Named parameter tensors in a stable creation order.
#[derive(Debug, Clone)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn init(config: &DetectorConfig, rng: &mut ChaCha20Rng) -> Self {
        let mut p = Params {
            entries: Vec::new(),
        };
        let d = config.embed_dim;
        let [c1, c2] = config.backbone_channels;

        // backbone: 3 -> c1 -> c2 -> d, each conv 3x3 stride 2 pad 1
        p.add_xavier(rng, "backbone.conv0.weight", 9 * 3, c1);
        p.add_zeros("backbone.conv0.bias", &[c1]);
        p.add_xavier(rng, "backbone.conv1.weight", 9 * c1, c2);
        p.add_zeros("backbone.conv1.bias", &[c2]);
        p.add_xavier(rng, "backbone.conv2.weight", 9 * c2, d);
        p.add_zeros("backbone.conv2.bias", &[d]);

        p.add_normal(rng, "query_pos", &[config.num_queries, d]);
        p.add_normal(rng, "feat_pos", &[config.num_positions(), d]);

        for l in 0..config.num_decoder_layers {
            for block in ["self", "cross"] {
                for proj in ["wq", "wk", "wv", "wo"] {
                    p.add_xavier(rng, &format!("decoder.{l}.{block}.{proj}"), d, d);
                }
                for bias in ["bq", "bk", "bv", "bo"] {
                    p.add_zeros(&format!("decoder.{l}.{block}.{bias}"), &[d]);
                }
            }
            for ln in ["ln1", "ln2", "ln3"] {
                p.add_ones(&format!("decoder.{l}.{ln}.gain"), &[d]);
                p.add_zeros(&format!("decoder.{l}.{ln}.bias"), &[d]);
            }
            p.add_xavier(rng, &format!("decoder.{l}.ffn.w1"), d, config.ffn_dim);
            p.add_zeros(&format!("decoder.{l}.ffn.b1"), &[config.ffn_dim]);
            p.add_xavier(rng, &format!("decoder.{l}.ffn.w2"), config.ffn_dim, d);
            p.add_zeros(&format!("decoder.{l}.ffn.b2"), &[d]);
        }

        p.add_xavier(rng, "head.class.weight", d, config.num_known_classes);
        // bias the class logits toward background so focal loss starts calm
        let prior = 0.01f64;
        let bias = -((1.0 - prior) / prior).ln();
        p.entries.push((
            "head.class.bias".into(),
            Tensor::from_elem(IxDyn(&[config.num_known_classes]), bias),
        ));
        p.add_xavier(rng, "head.box.w1", d, d);
        p.add_zeros("head.box.b1", &[d]);
        p.add_xavier(rng, "head.box.w2", d, 4);
        // start boxes centered with moderate extent: sigmoid(-1.386) ~ 0.2
        let wh = (0.2f64 / 0.8).ln();
        p.entries.push((
            "head.box.b2".into(),
            Tensor::from_shape_vec(IxDyn(&[4]), vec![0.0, 0.0, wh, wh]).unwrap(),
        ));
        p
    }

    fn add_xavier(&mut self, rng: &mut ChaCha20Rng, name: &str, fan_in: usize, fan_out: usize) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_shape_simple_fn(IxDyn(&[fan_in, fan_out]), || {
            rng.gen_range(-limit..limit)
        });
        self.entries.push((name.into(), t));
    }

    fn add_normal(&mut self, rng: &mut ChaCha20Rng, name: &str, shape: &[usize]) {
        // Box-Muller from the seeded stream; scale keeps attention logits tame.
        let t = Tensor::from_shape_simple_fn(IxDyn(shape), || {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        self.entries.push((name.into(), t));
    }

    fn add_zeros(&mut self, name: &str, shape: &[usize]) {
        self.entries
            .push((name.into(), Tensor::zeros(IxDyn(shape))));
    }

    fn add_ones(&mut self, name: &str, shape: &[usize]) {
        self.entries
            .push((name.into(), Tensor::from_elem(IxDyn(shape), 1.0)));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        *self.get_mut(name) = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }
}

/// Tape handles for one staging of the parameters.
pub struct TapeParams {
    vars: BTreeMap<String, Var>,
}

impl TapeParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not staged"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

/// Insert every parameter as a differentiable leaf on the tape.
pub fn stage_params(tape: &mut Tape, params: &Params) -> TapeParams {
    let mut vars = BTreeMap::new();
    for (name, tensor) in params.iter() {
        vars.insert(name.to_string(), tape.leaf(tensor.clone()));
    }
    TapeParams { vars }
}

/// Tape handles produced by one image's forward pass.
pub struct ForwardOutputs {
    /// Residual-stream output of every decoder layer, `[num_queries, dim]`.
    pub layer_embeddings: Vec<Var>,
    /// Class logits per layer; populated for layers after the first.
    pub class_logits: Vec<Option<Var>>,
    /// Sigmoid boxes `[num_queries, 4]` per layer, same population rule.
    pub boxes: Vec<Option<Var>>,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, dim: usize) -> Var {
    let scores = tape.matmul_nt(q, k);
    let scaled = tape.scale(scores, 1.0 / (dim as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    tape.matmul(attn, v)
}

/// Run the detector on one image tensor `[3, H, W]`.
pub fn forward_image(
    tape: &mut Tape,
    tp: &TapeParams,
    config: &DetectorConfig,
    image: &Tensor,
) -> Result<ForwardOutputs> {
    let d = config.embed_dim;
    let class_width = config.num_known_classes;
    {
        let staged = tape.value(tp.var("head.class.bias")).len();
        if staged != class_width {
            return Err(Error::ConfigMismatch(format!(
                "class head width {staged} != configured known classes {class_width}"
            )));
        }
    }
    if image.shape() != [3, config.image_size, config.image_size] {
        return Err(Error::ConfigMismatch(format!(
            "image shape {:?} != [3, {}, {}]",
            image.shape(),
            config.image_size,
            config.image_size
        )));
    }

    // backbone: three stride-2 convs; relu on all but the projection
    let [c1, c2] = config.backbone_channels;
    let channels = [3, c1, c2, d];
    let mut x = tape.constant(image.clone());
    let mut side = config.image_size;
    for stage in 0..3 {
        let spec = ConvSpec {
            in_ch: channels[stage],
            in_h: side,
            in_w: side,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let cols = tape.im2col(x, spec);
        let w = tp.var(&format!("backbone.conv{stage}.weight"));
        let b = tp.var(&format!("backbone.conv{stage}.bias"));
        let mut y = linear(tape, cols, w, b);
        side = spec.out_h();
        if stage < 2 {
            y = tape.relu(y);
            let yt = tape.transpose2(y);
            x = tape.reshape(yt, &[channels[stage + 1], side, side]);
        } else {
            x = y; // [positions, d]
        }
    }
    let features = x;
    let feat_pos = tp.var("feat_pos");
    let features_pos = tape.add(features, feat_pos);

    let query_pos = tp.var("query_pos");
    let mut h = tape.constant(Tensor::zeros(IxDyn(&[config.num_queries, d])));

    let mut layer_embeddings = Vec::with_capacity(config.num_decoder_layers);
    let mut class_logits = Vec::with_capacity(config.num_decoder_layers);
    let mut boxes = Vec::with_capacity(config.num_decoder_layers);

    for l in 0..config.num_decoder_layers {
        let name = |s: &str| format!("decoder.{l}.{s}");

        // self-attention over queries
        let g = tp.var(&name("ln1.gain"));
        let b = tp.var(&name("ln1.bias"));
        let u = tape.layer_norm_rows(h, g, b, 1e-5);
        let uq = tape.add(u, query_pos);
        let q = {
            let (w, b) = (tp.var(&name("self.wq")), tp.var(&name("self.bq")));
            linear(tape, uq, w, b)
        };
        let k = {
            let (w, b) = (tp.var(&name("self.wk")), tp.var(&name("self.bk")));
            linear(tape, uq, w, b)
        };
        let v = {
            let (w, b) = (tp.var(&name("self.wv")), tp.var(&name("self.bv")));
            linear(tape, u, w, b)
        };
        let sa = attention(tape, q, k, v, d);
        let sa_out = {
            let (w, b) = (tp.var(&name("self.wo")), tp.var(&name("self.bo")));
            linear(tape, sa, w, b)
        };
        h = tape.add(h, sa_out);

        // cross-attention over the feature grid
        let g = tp.var(&name("ln2.gain"));
        let b = tp.var(&name("ln2.bias"));
        let u = tape.layer_norm_rows(h, g, b, 1e-5);
        let uq = tape.add(u, query_pos);
        let q = {
            let (w, b) = (tp.var(&name("cross.wq")), tp.var(&name("cross.bq")));
            linear(tape, uq, w, b)
        };
        let k = {
            let (w, b) = (tp.var(&name("cross.wk")), tp.var(&name("cross.bk")));
            linear(tape, features_pos, w, b)
        };
        let v = {
            let (w, b) = (tp.var(&name("cross.wv")), tp.var(&name("cross.bv")));
            linear(tape, features, w, b)
        };
        let ca = attention(tape, q, k, v, d);
        let ca_out = {
            let (w, b) = (tp.var(&name("cross.wo")), tp.var(&name("cross.bo")));
            linear(tape, ca, w, b)
        };
        h = tape.add(h, ca_out);

        // feed-forward
        let g = tp.var(&name("ln3.gain"));
        let b = tp.var(&name("ln3.bias"));
        let u = tape.layer_norm_rows(h, g, b, 1e-5);
        let pre = {
            let (w, b) = (tp.var(&name("ffn.w1")), tp.var(&name("ffn.b1")));
            linear(tape, u, w, b)
        };
        let act = tape.relu(pre);
        let ffn_out = {
            let (w, b) = (tp.var(&name("ffn.w2")), tp.var(&name("ffn.b2")));
            linear(tape, act, w, b)
        };
        h = tape.add(h, ffn_out);

        layer_embeddings.push(h);
        if l >= 1 {
            let (w, b) = (tp.var("head.class.weight"), tp.var("head.class.bias"));
            class_logits.push(Some(linear(tape, h, w, b)));
            let (w1, b1) = (tp.var("head.box.w1"), tp.var("head.box.b1"));
            let (w2, b2) = (tp.var("head.box.w2"), tp.var("head.box.b2"));
            let pre = linear(tape, h, w1, b1);
            let act = tape.relu(pre);
            let raw = linear(tape, act, w2, b2);
            boxes.push(Some(tape.sigmoid(raw)));
        } else {
            class_logits.push(None);
            boxes.push(None);
        }
    }

    Ok(ForwardOutputs {
        layer_embeddings,
        class_logits,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{collect_outputs, ObjectnessModel};
    use rand::SeedableRng;

    fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            num_queries: 6,
            embed_dim: 8,
            num_decoder_layers: 3,
            objectness_layer_index: 1,
            num_known_classes: 2,
            ffn_dim: 16,
            image_size: 16,
            backbone_channels: [4, 6],
        }
    }

    fn random_image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::from_shape_simple_fn(IxDyn(&[3, size, size]), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn output_shape_contract() {
        let config = DetectorConfig {
            num_queries: 100,
            num_known_classes: 20,
            image_size: 16,
            embed_dim: 8,
            num_decoder_layers: 2,
            ffn_dim: 8,
            backbone_channels: [4, 4],
            objectness_layer_index: 1,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let params = Params::init(&config, &mut rng);
        let om = ObjectnessModel::new(config.embed_dim, 0.9, 1e-4, 1.3);

        let mut per_image = Vec::new();
        for seed in [10, 11] {
            let mut tape = Tape::new();
            let tp = stage_params(&mut tape, &params);
            let image = random_image(config.image_size, seed);
            let fwd = forward_image(&mut tape, &tp, &config, &image).unwrap();
            let out = collect_outputs(&tape, &fwd, &config, &om).unwrap();
            per_image.push(out);
        }
        assert_eq!(per_image.len(), 2);
        for out in &per_image {
            assert_eq!(out.class_logits.dim(), (100, 20));
            assert_eq!(out.boxes.len(), 100);
            assert_eq!(out.objectness.len(), 100);
            assert!(out.objectness.iter().all(|p| (0.0..=1.0).contains(p)));
            assert!(out.boxes.iter().all(|b| b.is_valid()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny_config();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let params = Params::init(&config, &mut rng);
        let image = random_image(config.image_size, 3);

        let run = || {
            let mut tape = Tape::new();
            let tp = stage_params(&mut tape, &params);
            let fwd = forward_image(&mut tape, &tp, &config, &image).unwrap();
            let last = fwd.class_logits.last().unwrap().unwrap();
            tape.value(last).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same parameters and input must be bitwise equal");
    }

    #[test]
    fn backbone_weight_perturbation_reaches_objectness_layer() {
        let config = tiny_config();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let params = Params::init(&config, &mut rng);
        let image = random_image(config.image_size, 5);

        let embeddings = |params: &Params| {
            let mut tape = Tape::new();
            let tp = stage_params(&mut tape, &params.clone());
            let fwd = forward_image(&mut tape, &tp, &config, &image).unwrap();
            tape.value(fwd.layer_embeddings[config.objectness_layer_index - 1])
                .clone()
        };
        let base = embeddings(&params);
        let mut perturbed = params.clone();
        perturbed.get_mut("backbone.conv0.weight").as_slice_mut().unwrap()[0] += 1e-3;
        let after = embeddings(&perturbed);
        let delta: f64 = (&after - &base).iter().map(|d| d.abs()).sum();
        assert!(delta > 0.0, "gradient path from backbone to layer 1 missing");
    }

    #[test]
    fn class_head_width_mismatch_is_an_error() {
        let config = tiny_config();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let params = Params::init(&config, &mut rng);
        let mut wrong = config.clone();
        wrong.num_known_classes = 5;
        let image = random_image(config.image_size, 7);
        let mut tape = Tape::new();
        let tp = stage_params(&mut tape, &params);
        let got = forward_image(&mut tape, &tp, &wrong, &image);
        assert!(matches!(got, Err(Error::ConfigMismatch(_))));
    }
}
