//! Finite-difference checks of the analytic prompt gradients, shared by the
//! gradient tests and the acceptance target.

use smoothcert::seed;
use smoothcert::toymodel::{prompt_gradient, synth_dataset, LossKind, PromptState, ToyDims, ToyVlm};
use smoothcert::vlmhead::Temperature;

use rand::Rng;

const STEP: f64 = 1e-4;

pub struct Case {
    pub vlm: ToyVlm,
    pub prompts: PromptState,
    pub images: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub sigmas: Vec<f64>,
    pub tau: Temperature,
    pub kind: LossKind,
    pub seed: u64,
}

impl Case {
    pub fn loss(&self, prompts: &PromptState) -> f64 {
        prompt_gradient(
            &self.vlm,
            prompts,
            &self.images,
            self.labels.as_deref(),
            &self.sigmas,
            self.tau,
            self.kind,
            self.seed,
        )
        .unwrap()
        .loss
    }
}

/// Config `index`, redrawn while the softmax is so saturated that the
/// gradient (below 1e-6) drowns in finite-difference round-off.
pub fn case(index: u64, kind: LossKind) -> Case {
    (0..)
        .map(|attempt| draw(index, kind, attempt))
        .find(|c| {
            let g = prompt_gradient(&c.vlm, &c.prompts, &c.images, c.labels.as_deref(), &c.sigmas, c.tau, c.kind, c.seed)
                .unwrap()
                .gradient;
            g.iter().any(|x| x.abs() > 1e-6)
        })
        .unwrap()
}

fn draw(index: u64, kind: LossKind, attempt: u64) -> Case {
    let mut rng = seed::stream(0x6ead, index, 64 * attempt + kind as u64);
    let dims = ToyDims {
        input_dim: [16, 32, 64][rng.random_range(0..3)],
        embed_dim: rng.random_range(4..=16),
        token_dim: rng.random_range(4..=16),
        num_classes: rng.random_range(2..=5),
    };
    let data = synth_dataset(dims.num_classes, dims.input_dim, 3, 1.0, rng.random()).unwrap();
    let vlm = ToyVlm::aligned(dims, &data.class_means, rng.random_range(-0.5..0.5), rng.random()).unwrap();
    let tokens = rng.random_range(1..=6);
    let scale = [1.0, 5.0, 20.0][rng.random_range(0..3)];
    let base = PromptState::random(tokens, dims.token_dim, rng.random()).unwrap();
    let prompts = PromptState::from_tokens(
        base.as_slice().iter().map(|x| x * scale).collect(),
        dims.token_dim,
    )
    .unwrap();
    let tau = Temperature::new([10.0, 30.0, 100.0][rng.random_range(0..3)]).unwrap();
    let draws = rng.random_range(1..=6);
    let sigmas: Vec<f64> = (0..draws).map(|_| [0.1, 0.25, 0.5, 1.0][rng.random_range(0..4)]).collect();
    let (images, labels) = match kind {
        LossKind::CrossEntropy => {
            let picks: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..data.len())).collect();
            let images = picks.iter().flat_map(|&i| data.image(i).to_vec()).collect();
            (images, Some(picks.iter().map(|&i| data.labels[i]).collect()))
        }
        LossKind::MeanProbEntropy => (data.image(rng.random_range(0..data.len())).to_vec(), None),
    };
    Case {
        vlm,
        prompts,
        images,
        labels,
        sigmas,
        tau,
        kind,
        seed: index,
    }
}

/// Largest per-coordinate relative error. Coordinates far below the gradient's
/// scale are measured against `1e-3 * max|g|` instead of their own size.
pub fn worst_relative_error(c: &Case) -> f64 {
    let analytic = prompt_gradient(
        &c.vlm,
        &c.prompts,
        &c.images,
        c.labels.as_deref(),
        &c.sigmas,
        c.tau,
        c.kind,
        c.seed,
    )
    .unwrap()
    .gradient;
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let mut plus = c.prompts.as_slice().to_vec();
        let mut minus = plus.clone();
        plus[i] += STEP;
        minus[i] -= STEP;
        let e = c.prompts.token_dim();
        let fd = (c.loss(&PromptState::from_tokens(plus, e).unwrap())
            - c.loss(&PromptState::from_tokens(minus, e).unwrap()))
            / (2.0 * STEP);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-3 * scale).max(1e-12);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    worst
}
