//! Random inputs and the finite-difference gradient check.

use dialbert::model::*;
use dialbert::pretrain_data::IGNORE_LABEL;
use dialbert::tokenizer::{build_input, EncodedInput, CLS, NUM_SPECIAL, SEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny() -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.dropout_prob = 0.0;
    c
}

pub fn random_input(rng: &mut ChaCha8Rng, a: usize, b: usize, max_len: usize, vocab: usize) -> EncodedInput {
    let mut draw = |n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(NUM_SPECIAL as u32..vocab as u32)).collect() };
    let ta = draw(a);
    let tb = draw(b);
    build_input(&ta, Some(&tb), max_len).unwrap()
}

pub fn pretrain_labels(rng: &mut ChaCha8Rng, input: &EncodedInput, vocab: usize) -> Vec<i32> {
    let n = input.active_len();
    let mut labels = vec![IGNORE_LABEL; input.len()];
    for (i, label) in labels.iter_mut().enumerate().take(n) {
        let id = input.token_ids[i];
        if id != CLS && id != SEP && (rng.random::<f64>() < 0.3 || i == 1) {
            *label = rng.random_range(NUM_SPECIAL as i32..vocab as i32);
        }
    }
    labels
}

pub struct Case {
    pub inputs: Vec<EncodedInput>,
    pub labels: Vec<Vec<i32>>,
}

impl Case {
    pub fn new(seed: u64, vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random_input(&mut rng, 5, 4, 16, vocab), random_input(&mut rng, 7, 3, 14, vocab)];
        let labels = inputs.iter().map(|x| pretrain_labels(&mut rng, x, vocab)).collect();
        Case { inputs, labels }
    }

    pub fn samples(&self, head: &str) -> Vec<Sample<'_>> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (input, labels))| {
                let target = match head {
                    "pretrain" => Target::Pretrain { mlm_labels: labels, nsp_label: (i % 2) as u8 },
                    "classification" => Target::Classification(1 - i % 2),
                    _ => Target::Span { start: 2 + i, end: 4 + i },
                };
                Sample { input, target }
            })
            .collect()
    }
}

/// Coordinates on which to compare analytic and numerical gradients: a tensor
/// drawn uniformly among those the loss reaches, then an entry with a
/// nonzero analytic gradient.
pub fn sample_coordinates(grads: &Parameters<f64>, count: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live: Vec<(String, Vec<usize>)> = grads
        .named()
        .into_iter()
        .map(|(name, t)| (name, (0..t.len()).filter(|&i| t.data[i] != 0.0).collect::<Vec<_>>()))
        .filter(|(_, idx)| !idx.is_empty())
        .collect();
    (0..count)
        .map(|_| {
            let (name, idx) = &live[rng.random_range(0..live.len())];
            (name.clone(), idx[rng.random_range(0..idx.len())])
        })
        .collect()
}

pub fn set(params: &mut Parameters<f64>, name: &str, index: usize, value: f64) {
    for (n, t) in params.named_mut() {
        if n == name {
            t.data[index] = value;
            return;
        }
    }
    panic!("no tensor {name}");
}

pub fn get(params: &Parameters<f64>, name: &str, index: usize) -> f64 {
    params.named().into_iter().find(|(n, _)| n == name).unwrap().1.data[index]
}

/// Max relative error `|a - n| / max(|a|, |n|, floor)` over sampled coordinates.
pub fn gradient_check(head: &str) -> (f64, usize) {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let config = tiny();
    let mut params = Parameters::<f32>::init(&config, 21).cast::<f64>();
    // Move norms and biases off their initial values so their gradients are generic.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (name, t) in params.named_mut() {
        if !name.ends_with(".weight") {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    }
    let case = Case::new(23, config.vocab_size);
    let samples = case.samples(head);
    let (_, grads) = batch_loss_and_grad(&params, &config, &samples, None).unwrap();
    let coords = sample_coordinates(&grads, 200, 24);
    let mut worst = 0.0f64;
    for (name, i) in &coords {
        let x = get(&params, name, *i);
        set(&mut params, name, *i, x + H);
        let up = batch_loss(&params, &config, &samples).unwrap().total;
        set(&mut params, name, *i, x - H);
        let down = batch_loss(&params, &config, &samples).unwrap().total;
        set(&mut params, name, *i, x);
        let numeric = (up - down) / (2.0 * H);
        let analytic = get(&grads, name, *i);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    println!("{head}: max relative error {worst:.3e} over {} coordinates", coords.len());
    (worst, coords.len())
}
