//! Unsupervised training loop and pairwise registration.

use morphwin_tensor::{AdamConfig, AdamState, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::init::rng;
use crate::loss::{total_loss, DEFAULT_LAMBDA};
use crate::rfrnet::{init_params, predict_field, ArchConfig, Network};
use crate::spatial::{warp_image, warp_nearest};
use crate::volume::LabeledVolume;

const ORDER_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchConfig::default(),
            lambda: DEFAULT_LAMBDA,
            adam: AdamConfig::default(),
            iterations: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    /// 1-based.
    pub iter: usize,
    pub pair: usize,
    pub similarity: f64,
    pub regularity: f64,
    pub total: f64,
}

impl LossRow {
    pub const HEADER: &'static str = "iter,sim,reg,total";

    pub fn to_csv(&self) -> String {
        format!("{},{:.9e},{:.9e},{:.9e}", self.iter, self.similarity, self.regularity, self.total)
    }
}

/// Moving/fixed intensity tensors, each `[D, H, W, 1]`.
pub type ImagePair = (Tensor<f32>, Tensor<f32>);

pub fn image_pair(moving: &LabeledVolume, fixed: &LabeledVolume) -> ImagePair {
    (moving.intensity.clone(), fixed.intensity.clone())
}

/// Stateful trainer so callers can checkpoint or stop between iterations.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    adam: AdamState<f32>,
    order: Vec<usize>,
    cursor: usize,
    iteration: usize,
    shuffler: crate::init::SeededRng,
}

impl Trainer {
    pub fn new(config: TrainConfig, pairs: usize) -> Result<Self> {
        config.arch.validate()?;
        if pairs == 0 {
            return Err(Error::Data("training needs at least one pair".into()));
        }
        if !(config.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", config.lambda)));
        }
        let params = init_params(&config.arch, config.seed)?;
        Ok(Trainer {
            shuffler: rng(config.seed, ORDER_STREAM),
            config,
            params,
            adam: AdamState::new(),
            order: (0..pairs).collect(),
            cursor: pairs,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Each pass over the data visits every pair once in a seeded order.
    fn next_pair(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.shuffler);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn step(&mut self, pairs: &[ImagePair]) -> Result<LossRow> {
        if pairs.len() != self.order.len() {
            return Err(Error::Data(format!("trainer built for {} pairs, got {}", self.order.len(), pairs.len())));
        }
        let index = self.next_pair();
        self.iteration += 1;
        let (moving, fixed) = &pairs[index];
        let want = self.config.arch.input_dims;
        for t in [moving, fixed] {
            if t.shape() != [want[0], want[1], want[2], 1] {
                return Err(Error::Data(format!(
                    "pair {index} has shape {:?}, network expects {:?}x1",
                    t.shape(),
                    want
                )));
            }
        }
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let net = Network::bind(&vars, &self.config.arch)?;
        let m = tape.constant(moving.clone());
        let f = tape.constant(fixed.clone());
        let phi = net.forward(m, f)?;
        let terms = total_loss(m, f, phi, self.config.lambda, self.config.arch.border)?;
        let b = terms.breakdown();
        if !b.total.is_finite() {
            return Err(Error::NonFinite { iteration: self.iteration, pair: index });
        }
        let mut grads = tape.backward(terms.total)?;
        let grads = vars.gradients(&mut grads);
        if grads.values().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { iteration: self.iteration, pair: index });
        }
        self.adam.step(&self.config.adam, &mut self.params, &grads)?;
        Ok(LossRow {
            iter: self.iteration,
            pair: index,
            similarity: b.similarity,
            regularity: b.regularity,
            total: b.total,
        })
    }
}

/// Runs the configured number of iterations; `observe` sees every row.
pub fn train(
    config: &TrainConfig,
    pairs: &[ImagePair],
    mut observe: impl FnMut(&LossRow, &ParamStore<f32>) -> Result<()>,
) -> Result<(ParamStore<f32>, Vec<LossRow>)> {
    let mut trainer = Trainer::new(config.clone(), pairs.len())?;
    let mut log = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let row = trainer.step(pairs)?;
        observe(&row, &trainer.params)?;
        log.push(row);
    }
    Ok((trainer.params, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub field: Tensor<f32>,
    pub warped: LabeledVolume,
}

/// Predicts the field for `moving -> fixed` and applies it to both the
/// intensities and the labels of `moving`.
pub fn register(
    params: &ParamStore<f32>,
    arch: &ArchConfig,
    moving: &LabeledVolume,
    fixed: &LabeledVolume,
) -> Result<Registration> {
    if moving.dims() != fixed.dims() {
        return Err(Error::Data(format!("moving {:?} and fixed {:?} differ", moving.dims(), fixed.dims())));
    }
    let field = predict_field(params, arch, &moving.intensity, &fixed.intensity)?;
    let warped = LabeledVolume {
        intensity: warp_image(&moving.intensity, &field, arch.border)?,
        labels: warp_nearest(&moving.labels, &field)?,
        spacing: moving.spacing,
    };
    Ok(Registration { field, warped })
}

/// Errors unless `params` has exactly the names and shapes `arch` needs.
pub fn check_compatible(params: &ParamStore<f32>, arch: &ArchConfig) -> Result<()> {
    let expected: ParamStore<f32> = init_params(arch, 0)?;
    match expected.first_mismatch(params) {
        None => Ok(()),
        Some(m) => Err(Error::Config(format!("checkpoint does not match architecture: {m}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_pair, PhantomSpec};

    fn tiny() -> ArchConfig {
        ArchConfig::toy([16, 8, 8], 8, vec![2, 2, 2, 2], [2, 2, 2])
    }

    fn tiny_pairs(n: usize, amplitude: f64) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let spec = PhantomSpec { seed: i as u64, dims: [16, 8, 8], organs: 2, amplitude, control_spacing: 4, ..PhantomSpec::default() };
                let p = make_pair(&spec).unwrap();
                image_pair(&p.moving, &p.fixed)
            })
            .collect()
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = TrainConfig { arch: tiny(), iterations: 4, ..TrainConfig::default() };
        let pairs = tiny_pairs(3, 1.0);
        let (p1, l1) = train(&cfg, &pairs, |_, _| Ok(())).unwrap();
        let (p2, l2) = train(&cfg, &pairs, |_, _| Ok(())).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
        assert_eq!(l1.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn epoch_visits_every_pair() {
        let cfg = TrainConfig { arch: tiny(), iterations: 6, ..TrainConfig::default() };
        let (_, log) = train(&cfg, &tiny_pairs(3, 1.0), |_, _| Ok(())).unwrap();
        for epoch in log.chunks(3) {
            let mut seen: Vec<usize> = epoch.iter().map(|r| r.pair).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2]);
        }
    }

    #[test]
    fn identical_pair_stays_at_identity() {
        let spec = PhantomSpec { dims: [16, 8, 8], organs: 2, control_spacing: 4, ..PhantomSpec::default() };
        let v = make_pair(&spec).unwrap().fixed;
        let pairs = vec![image_pair(&v, &v)];
        let cfg = TrainConfig { arch: tiny(), iterations: 50, ..TrainConfig::default() };
        let (params, log) = train(&cfg, &pairs, |_, _| Ok(())).unwrap();
        assert!(log.iter().all(|r| r.total < 1e-6), "{:?}", log.last());
        let reg = register(&params, &cfg.arch, &v, &v).unwrap();
        let max = reg.field.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max < 0.05, "{max}");
    }

    #[test]
    fn fresh_model_registers_to_identity() {
        let arch = tiny();
        let params = init_params(&arch, 5).unwrap();
        let spec = PhantomSpec { dims: [16, 8, 8], organs: 2, control_spacing: 4, ..PhantomSpec::default() };
        let p = make_pair(&spec).unwrap();
        let reg = register(&params, &arch, &p.moving, &p.fixed).unwrap();
        assert!(reg.field.data().iter().all(|&v| v == 0.0));
        assert_eq!(reg.warped, p.moving);
        assert_eq!(register(&params, &arch, &p.moving, &p.fixed).unwrap(), reg);
    }

    #[test]
    fn mismatched_checkpoint_names_parameter() {
        let params = init_params(&tiny(), 0).unwrap();
        check_compatible(&params, &tiny()).unwrap();
        let other = ArchConfig::toy([16, 8, 8], 16, vec![2, 2, 2, 2], [2, 2, 2]);
        let err = check_compatible(&params, &other).unwrap_err().to_string();
        assert!(err.contains("scpe.conv1"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = TrainConfig { arch: tiny(), iterations: 1, ..TrainConfig::default() };
        let bad = vec![(Tensor::zeros(&[8, 8, 8, 1]), Tensor::zeros(&[8, 8, 8, 1]))];
        assert!(train(&cfg, &bad, |_, _| Ok(())).is_err());
        assert!(train(&cfg, &[], |_, _| Ok(())).is_err());
    }

    #[test]
    fn nan_input_aborts() {
        let cfg = TrainConfig { arch: tiny(), iterations: 1, ..TrainConfig::default() };
        let mut pairs = tiny_pairs(1, 1.0);
        pairs[0].0.data_mut()[0] = f32::NAN;
        match train(&cfg, &pairs, |_, _| Ok(())) {
            Err(Error::NonFinite { iteration: 1, pair: 0 }) => {}
            other => panic!("{:?}", other.map(|r| r.1)),
        }
    }
}
