use ifss_core::casm::{train_step, train_step_loss};
use ifss_core::eaus::{UpdateKind, UpdateScope, UpdateStrategy};
use ifss_core::gradsuite::toy_classes;
use ifss_core::membank::ClassId;
use ifss_core::numkit::{fd_grad, flatten, rel_error, seeded_rng, unflatten_into, ActKind, Optimizer, OptimizerKind, ParamSet};
use ifss_core::pipeline::{train_base, ClassSamples, LearnConfig, Learner, Model, ModelConfig, TrainConfig};
use ifss_core::Error;

fn small_config() -> ModelConfig {
    ModelConfig {
        image_channels: 3,
        widths: vec![3, 4],
        embed_dim: 4,
        hidden: 3,
        iterations: 2,
        act: ActKind::Silu,
    }
}

fn learned(strategy: UpdateStrategy) -> (Learner, Vec<ClassSamples>) {
    let data = toy_classes(&mut seeded_rng(1), 4, 4).unwrap();
    let learn = LearnConfig {
        clusters: 2,
        strategy,
        ..LearnConfig::default()
    };
    let mut learner = Learner::new(Model::init(&small_config(), 3).unwrap(), learn);
    learner.learn_base(&data[..3]).unwrap();
    (learner, data)
}

#[test]
fn train_step_gradient_matches_finite_differences() {
    let (learner, data) = learned(UpdateStrategy::EAUS);
    let mut model = learner.model().clone();
    model.strategy.eaus.w = ifss_core::numkit::AffineParams::init(4, 4, false, &mut seeded_rng(8));
    let sample = &data[1].samples[2];
    let pool = learner.pool();
    let mut g = model.zeros_like();
    train_step_loss(&sample.image, &sample.mask, ClassId(1), pool, &model, UpdateKind::Eaus, Some(&mut g)).unwrap();
    let fd = fd_grad(
        |t| {
            let mut m = model.clone();
            unflatten_into(&mut m, t);
            train_step_loss(&sample.image, &sample.mask, ClassId(1), pool, &m, UpdateKind::Eaus, None).unwrap()
        },
        &flatten(&model),
        1e-3,
    )
    .unwrap();
    assert!(rel_error(&flatten(&g), &fd) < 1e-4);
}

#[test]
fn train_step_reduces_loss_on_a_fixed_sample() {
    let (learner, data) = learned(UpdateStrategy::EAUS);
    let mut model = learner.model().clone();
    let sample = &data[0].samples[1];
    let mut opt = Optimizer::new(OptimizerKind::ADAM, model.num_params());
    let mut losses = Vec::new();
    for _ in 0..=50 {
        losses.push(
            train_step(&sample.image, &sample.mask, ClassId(0), learner.pool(), &mut model, &mut opt, 1e-2, UpdateKind::Eaus).unwrap(),
        );
    }
    assert!(losses[50] < losses[0], "{} -> {}", losses[0], losses[50]);
    assert_eq!(
        train_step(&sample.image, &sample.mask, ClassId(42), learner.pool(), &mut model, &mut opt, 1e-2, UpdateKind::Eaus),
        Err(Error::UnknownClass(ClassId(42)))
    );
}

#[test]
fn sessions_grow_the_pool_and_keep_hyper_fixed() {
    let (mut learner, data) = learned(UpdateStrategy::EAUS);
    assert_eq!(learner.pool().len(), 3);
    let hypers = learner.pool().hypers();
    let shots = ClassSamples {
        class_id: data[3].class_id,
        samples: data[3].samples[..2].to_vec(),
    };
    learner.learn_session(&[shots]).unwrap();
    assert_eq!(learner.session(), Some(1));
    assert_eq!(learner.pool().len(), 4);
    assert_eq!(&learner.pool().hypers()[..3], &hypers[..]);
    let labels = learner.predict(&data[0].samples[0].image).unwrap();
    assert_eq!((labels.height(), labels.width()), (8, 8));
    for l in labels.data().iter().flatten() {
        assert!(l.0 < 4);
    }
    let again = learned(UpdateStrategy::EAUS).0;
    assert_eq!(again.pool(), learned(UpdateStrategy::EAUS).0.pool());
    assert!(learner.learn_base(&data[..3]).is_err());
}

#[test]
fn short_training_lowers_episode_loss() {
    let data = toy_classes(&mut seeded_rng(5), 4, 6).unwrap();
    let learn = LearnConfig {
        clusters: 2,
        strategy: UpdateStrategy::new(UpdateKind::LinearTransform, UpdateScope::Both),
        ..LearnConfig::default()
    };
    let train = TrainConfig {
        epochs: 6,
        episodes_per_epoch: 10,
        pseudo_new: 2,
        max_rounds: 2,
        queries: 2,
        negatives: 1,
        ..TrainConfig::default()
    };
    let mut model = Model::init(&small_config(), 0).unwrap();
    let log = train_base(&mut model, &data, &train, &learn, 9).unwrap();
    assert_eq!(log.epoch_losses.len(), 6);
    assert!(log.epoch_losses[5] < log.epoch_losses[0], "{:?}", log.epoch_losses);
}
