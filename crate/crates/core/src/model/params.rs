use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_segments: usize,
    pub dropout_prob: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// 12 layers, hidden size 768, 12 heads, feed-forward width 4H.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            intermediate_size: 3072,
            vocab_size,
            max_positions: 128,
            num_segments: 2,
            dropout_prob: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    /// Small profile used by tests and the desk-scale runs.
    pub fn tiny() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 2,
            intermediate_size: 256,
            vocab_size: 1000,
            ..ModelConfig::base(1000)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.hidden_size == 0 || self.num_heads == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return bad("sizes must be positive".into());
        }
        if self.hidden_size % self.num_heads != 0 {
            return bad(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.intermediate_size < self.hidden_size {
            return bad("intermediate_size must be at least hidden_size".into());
        }
        if self.num_segments != 2 {
            return bad("num_segments must be 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad(format!("dropout_prob {} outside [0, 1)", self.dropout_prob));
        }
        Ok(())
    }
}

/// Closed-form parameter count. Each encoder layer holds
/// `4(H² + H) + 2HI + I + H + 4H` values, which is `12H² + 13H` when
/// `I = 4H`. The MLM decoder is tied to the word embeddings and adds only
/// its output bias.
pub fn param_count(config: &ModelConfig) -> usize {
    let (v, h, p, l, i) = (
        config.vocab_size,
        config.hidden_size,
        config.max_positions,
        config.num_layers,
        config.intermediate_size,
    );
    let embeddings = v * h + p * h + config.num_segments * h + 2 * h;
    let layer = 4 * (h * h + h) + 2 * h + (h * i + i) + (i * h + h) + 2 * h;
    let pooler = h * h + h;
    let mlm = h * h + h + 2 * h + v;
    let two_way_head = 2 * h + 2;
    embeddings + l * layer + pooler + mlm + 3 * two_way_head
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub query_w: Tensor<T>,
    pub query_b: Tensor<T>,
    pub key_w: Tensor<T>,
    pub key_b: Tensor<T>,
    pub value_w: Tensor<T>,
    pub value_b: Tensor<T>,
    pub attn_out_w: Tensor<T>,
    pub attn_out_b: Tensor<T>,
    pub attn_norm_g: Tensor<T>,
    pub attn_norm_b: Tensor<T>,
    pub ffn_in_w: Tensor<T>,
    pub ffn_in_b: Tensor<T>,
    pub ffn_out_w: Tensor<T>,
    pub ffn_out_b: Tensor<T>,
    pub ffn_norm_g: Tensor<T>,
    pub ffn_norm_b: Tensor<T>,
}

/// All trainable tensors. The MLM decoder has no tensor of its own: it
/// reads `word_emb`, so its gradient lands there.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub word_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub seg_emb: Tensor<T>,
    pub emb_norm_g: Tensor<T>,
    pub emb_norm_b: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub pooler_w: Tensor<T>,
    pub pooler_b: Tensor<T>,
    pub mlm_transform_w: Tensor<T>,
    pub mlm_transform_b: Tensor<T>,
    pub mlm_norm_g: Tensor<T>,
    pub mlm_norm_b: Tensor<T>,
    pub mlm_bias: Tensor<T>,
    pub nsp_w: Tensor<T>,
    pub nsp_b: Tensor<T>,
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
    pub qa_w: Tensor<T>,
    pub qa_b: Tensor<T>,
}

macro_rules! layer_fields {
    ($layer:expr, $f:ident) => {
        [
            ("attention.query.weight", $f!($layer.query_w)),
            ("attention.query.bias", $f!($layer.query_b)),
            ("attention.key.weight", $f!($layer.key_w)),
            ("attention.key.bias", $f!($layer.key_b)),
            ("attention.value.weight", $f!($layer.value_w)),
            ("attention.value.bias", $f!($layer.value_b)),
            ("attention.output.weight", $f!($layer.attn_out_w)),
            ("attention.output.bias", $f!($layer.attn_out_b)),
            ("attention.norm.gamma", $f!($layer.attn_norm_g)),
            ("attention.norm.beta", $f!($layer.attn_norm_b)),
            ("ffn.input.weight", $f!($layer.ffn_in_w)),
            ("ffn.input.bias", $f!($layer.ffn_in_b)),
            ("ffn.output.weight", $f!($layer.ffn_out_w)),
            ("ffn.output.bias", $f!($layer.ffn_out_b)),
            ("ffn.norm.gamma", $f!($layer.ffn_norm_g)),
            ("ffn.norm.beta", $f!($layer.ffn_norm_b)),
        ]
    };
}

macro_rules! named_tensors {
    ($self:expr, $f:ident) => {{
        let mut out = Vec::new();
        out.push(("embeddings.word.weight".to_string(), $f!($self.word_emb)));
        out.push(("embeddings.position.weight".to_string(), $f!($self.pos_emb)));
        out.push(("embeddings.segment.weight".to_string(), $f!($self.seg_emb)));
        out.push(("embeddings.norm.gamma".to_string(), $f!($self.emb_norm_g)));
        out.push(("embeddings.norm.beta".to_string(), $f!($self.emb_norm_b)));
        for (i, layer) in $f!($self.layers).into_iter().enumerate() {
            for (name, t) in layer_fields!(layer, $f) {
                out.push((format!("encoder.{i}.{name}"), t));
            }
        }
        out.push(("pooler.weight".to_string(), $f!($self.pooler_w)));
        out.push(("pooler.bias".to_string(), $f!($self.pooler_b)));
        out.push(("mlm.transform.weight".to_string(), $f!($self.mlm_transform_w)));
        out.push(("mlm.transform.bias".to_string(), $f!($self.mlm_transform_b)));
        out.push(("mlm.norm.gamma".to_string(), $f!($self.mlm_norm_g)));
        out.push(("mlm.norm.beta".to_string(), $f!($self.mlm_norm_b)));
        out.push(("mlm.output.bias".to_string(), $f!($self.mlm_bias)));
        out.push(("nsp.weight".to_string(), $f!($self.nsp_w)));
        out.push(("nsp.bias".to_string(), $f!($self.nsp_b)));
        out.push(("classifier.weight".to_string(), $f!($self.cls_w)));
        out.push(("classifier.bias".to_string(), $f!($self.cls_b)));
        out.push(("qa.weight".to_string(), $f!($self.qa_w)));
        out.push(("qa.bias".to_string(), $f!($self.qa_b)));
        out
    }};
}

macro_rules! by_ref {
    ($e:expr) => {
        &$e
    };
}

macro_rules! by_mut {
    ($e:expr) => {
        &mut $e
    };
}

/// Task heads that can be re-initialized independently of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Classification,
    Qa,
}

/// Standard deviation of initialized weights.
pub const INIT_STD: f64 = 0.02;

/// Standard deviation of a unit normal truncated to [-2, 2].
const TRUNCATED_UNIT_STD: f64 = 0.879_625_661_034_239_8;

fn truncated_normal<T: Scalar>(rng: &mut rng::StreamRng) -> T {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return T::lit(INIT_STD / TRUNCATED_UNIT_STD * z);
        }
    }
}

fn init_tensor<T: Scalar>(name: &str, t: &mut Tensor<T>, rng: &mut rng::StreamRng) {
    if name.ends_with(".weight") {
        for v in &mut t.data {
            *v = truncated_normal(rng);
        }
    } else if name.ends_with(".gamma") {
        t.data.fill(T::one());
    } else {
        t.data.fill(T::zero());
    }
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (h, i, v) = (config.hidden_size, config.intermediate_size, config.vocab_size);
        let z = |shape: &[usize]| Tensor::zeros(shape);
        let layer = || LayerParams {
            query_w: z(&[h, h]),
            query_b: z(&[h]),
            key_w: z(&[h, h]),
            key_b: z(&[h]),
            value_w: z(&[h, h]),
            value_b: z(&[h]),
            attn_out_w: z(&[h, h]),
            attn_out_b: z(&[h]),
            attn_norm_g: z(&[h]),
            attn_norm_b: z(&[h]),
            ffn_in_w: z(&[h, i]),
            ffn_in_b: z(&[i]),
            ffn_out_w: z(&[i, h]),
            ffn_out_b: z(&[h]),
            ffn_norm_g: z(&[h]),
            ffn_norm_b: z(&[h]),
        };
        Parameters {
            word_emb: z(&[v, h]),
            pos_emb: z(&[config.max_positions, h]),
            seg_emb: z(&[config.num_segments, h]),
            emb_norm_g: z(&[h]),
            emb_norm_b: z(&[h]),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            pooler_w: z(&[h, h]),
            pooler_b: z(&[h]),
            mlm_transform_w: z(&[h, h]),
            mlm_transform_b: z(&[h]),
            mlm_norm_g: z(&[h]),
            mlm_norm_b: z(&[h]),
            mlm_bias: z(&[v]),
            nsp_w: z(&[h, 2]),
            nsp_b: z(&[2]),
            cls_w: z(&[h, 2]),
            cls_b: z(&[2]),
            qa_w: z(&[h, 2]),
            qa_b: z(&[2]),
        }
    }

    /// Weights ~ N(0, 0.02²) truncated at two standard deviations (the
    /// underlying normal is widened so the truncated draw keeps std 0.02),
    /// biases 0, normalization scales 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut params = Parameters::zeros(config);
        let mut rng = rng::stream(seed, domain::INIT, 0);
        for (name, t) in params.named_mut() {
            init_tensor(&name, t, &mut rng);
        }
        params
    }

    /// Fresh weights for one task head, drawn from a stream keyed by `seed`.
    pub fn reinit_head(&mut self, head: Head, seed: u64) {
        let mut rng = rng::stream(seed, domain::HEAD_INIT, head as u64);
        let (w, b, prefix) = match head {
            Head::Classification => (&mut self.cls_w, &mut self.cls_b, "classifier"),
            Head::Qa => (&mut self.qa_w, &mut self.qa_b, "qa"),
        };
        init_tensor(&format!("{prefix}.weight"), w, &mut rng);
        init_tensor(&format!("{prefix}.bias"), b, &mut rng);
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        named_tensors!(self, by_ref)
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        named_tensors!(self, by_mut)
    }

    pub fn num_elements(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.named_mut() {
            t.data.fill(T::zero());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let cast_layer = |l: &LayerParams<T>| LayerParams {
            query_w: l.query_w.cast(),
            query_b: l.query_b.cast(),
            key_w: l.key_w.cast(),
            key_b: l.key_b.cast(),
            value_w: l.value_w.cast(),
            value_b: l.value_b.cast(),
            attn_out_w: l.attn_out_w.cast(),
            attn_out_b: l.attn_out_b.cast(),
            attn_norm_g: l.attn_norm_g.cast(),
            attn_norm_b: l.attn_norm_b.cast(),
            ffn_in_w: l.ffn_in_w.cast(),
            ffn_in_b: l.ffn_in_b.cast(),
            ffn_out_w: l.ffn_out_w.cast(),
            ffn_out_b: l.ffn_out_b.cast(),
            ffn_norm_g: l.ffn_norm_g.cast(),
            ffn_norm_b: l.ffn_norm_b.cast(),
        };
        Parameters {
            word_emb: self.word_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            seg_emb: self.seg_emb.cast(),
            emb_norm_g: self.emb_norm_g.cast(),
            emb_norm_b: self.emb_norm_b.cast(),
            layers: self.layers.iter().map(cast_layer).collect(),
            pooler_w: self.pooler_w.cast(),
            pooler_b: self.pooler_b.cast(),
            mlm_transform_w: self.mlm_transform_w.cast(),
            mlm_transform_b: self.mlm_transform_b.cast(),
            mlm_norm_g: self.mlm_norm_g.cast(),
            mlm_norm_b: self.mlm_norm_b.cast(),
            mlm_bias: self.mlm_bias.cast(),
            nsp_w: self.nsp_w.cast(),
            nsp_b: self.nsp_b.cast(),
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
            qa_w: self.qa_w.cast(),
            qa_b: self.qa_b.cast(),
        }
    }

    /// `self += other`, tensor by tensor in declaration order.
    pub fn add_assign(&mut self, other: &Parameters<T>) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.named_mut() {
            for x in &mut t.data {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Parameters::<T>::zeros(config);
        let ours = self.named();
        let theirs = expected.named();
        if ours.len() != theirs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", a.shape, b.shape)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_param_count_matches_closed_form() {
        // 64000 + 8192 + 128 + 128 embeddings, 2·(12·64² + 13·64) encoder,
        // 4160 pooler, 5288 MLM head, 3·130 two-way heads.
        let config = ModelConfig::tiny();
        assert_eq!(param_count(&config), 182_254);
        assert_eq!(Parameters::<f32>::zeros(&config).num_elements(), 182_254);
    }

    #[test]
    fn zero_layer_count_is_embeddings_plus_heads() {
        let config = ModelConfig { num_layers: 0, ..ModelConfig::tiny() };
        let h = 64;
        let expected = 1000 * h + 128 * h + 2 * h + 2 * h + (h * h + h) + (h * h + h + 2 * h + 1000) + 3 * (2 * h + 2);
        assert_eq!(param_count(&config), expected);
        assert_eq!(Parameters::<f32>::zeros(&config).num_elements(), expected);
    }

    #[test]
    fn layer_terms_scale_quadratically() {
        let small = ModelConfig { hidden_size: 64, intermediate_size: 256, ..ModelConfig::tiny() };
        let big = ModelConfig { hidden_size: 128, intermediate_size: 512, ..ModelConfig::tiny() };
        let per_layer = |c: &ModelConfig| {
            param_count(c) - param_count(&ModelConfig { num_layers: 0, ..c.clone() })
        };
        let ratio = per_layer(&big) as f64 / per_layer(&small) as f64;
        assert!((3.9..4.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn base_profile_shape() {
        let config = ModelConfig::base(30_000);
        config.validate().unwrap();
        assert_eq!((config.num_layers, config.hidden_size, config.num_heads), (12, 768, 12));
        assert_eq!(config.intermediate_size, 4 * config.hidden_size);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let bad_heads = ModelConfig { num_heads: 3, ..ModelConfig::tiny() };
        assert!(bad_heads.validate().is_err());
        let narrow = ModelConfig { intermediate_size: 32, ..ModelConfig::tiny() };
        assert!(narrow.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let config = ModelConfig::tiny();
        let a = Parameters::<f32>::init(&config, 5);
        let b = Parameters::<f32>::init(&config, 5);
        let bits = |p: &Parameters<f32>| -> Vec<u32> {
            p.named().iter().flat_map(|(_, t)| t.data.iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&Parameters::<f32>::init(&config, 6)));
    }

    #[test]
    fn init_sets_norm_scales_and_biases() {
        let params = Parameters::<f32>::init(&ModelConfig::tiny(), 1);
        for (name, t) in params.named() {
            if name.ends_with(".gamma") {
                assert!(t.data.iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_std_is_point_zero_two() {
        // 1000×128 word embedding: 128,000 truncated-normal draws.
        let config = ModelConfig { hidden_size: 128, intermediate_size: 512, ..ModelConfig::tiny() };
        let params = Parameters::<f64>::init(&config, 3);
        let w = &params.word_emb.data;
        assert!(w.len() >= 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.018..=0.021).contains(&std), "std {std}");
        let bound = 2.0 * INIT_STD / TRUNCATED_UNIT_STD;
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn truncated_unit_std_constant() {
        // Var of N(0,1) truncated to [-2,2] is 1 - 2·2·φ(2)/(2Φ(2) - 1),
        // evaluated here by midpoint quadrature.
        let n = 200_000;
        let (mut mass, mut second) = (0.0, 0.0);
        for i in 0..n {
            let z = -2.0 + 4.0 * (i as f64 + 0.5) / n as f64;
            let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            mass += pdf;
            second += z * z * pdf;
        }
        let std = (second / mass).sqrt();
        assert!((std - TRUNCATED_UNIT_STD).abs() < 1e-9, "{std}");
    }

    #[test]
    fn reinit_head_only_touches_that_head() {
        let config = ModelConfig::tiny();
        let base = Parameters::<f32>::init(&config, 1);
        let mut p = base.clone();
        p.reinit_head(Head::Qa, 9);
        assert_ne!(p.qa_w, base.qa_w);
        assert_eq!(p.cls_w, base.cls_w);
        assert_eq!(p.word_emb, base.word_emb);
    }
}
