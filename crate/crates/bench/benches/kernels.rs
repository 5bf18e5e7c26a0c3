use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pixelfool::classifier::ClassifierModel;
use pixelfool::dataset::{generate_corpus, CorpusConfig, Image, NormalizationSpec, IMAGE_LEN};
use pixelfool::env::{Action, EvasionEnv, ImagePool, ACTION_COUNT};
use pixelfool::numnet::{LayerSpec, Network};
use pixelfool::oracle::{randomize_confidences, DefenseConfig, Scenario};
use pixelfool::ppo::{loss_from_outputs, ActorCritic, LossTargets, PpoConfig};
use pixelfool::Tensor;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn image(rng: &mut ChaCha8Rng) -> Image {
    Image::new((0..IMAGE_LEN).map(|_| rng.random()).collect()).unwrap()
}

fn layers(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dense = Network::new(&[3076], &[LayerSpec::Dense { out_features: 256 }], &mut rng).unwrap();
    let x = Tensor::new(vec![256, 3076], random(&mut rng, 256 * 3076)).unwrap();
    c.bench_function("dense_3076x256_batch256_forward", |b| {
        b.iter(|| dense.infer(black_box(&x)).unwrap())
    });

    let conv_specs = [LayerSpec::Conv2d {
        out_channels: 32,
        kernel: 3,
        stride: 1,
        padding: 1,
    }];
    let mut conv = Network::new(&[16, 32, 32], &conv_specs, &mut rng).unwrap();
    let x = Tensor::new(vec![8, 16, 32, 32], random(&mut rng, 8 * 16 * 32 * 32)).unwrap();
    let up = Tensor::new(vec![8, 32, 32, 32], random(&mut rng, 8 * 32 * 32 * 32)).unwrap();
    c.bench_function("conv_16to32_3x3_batch8_forward", |b| {
        b.iter(|| conv.infer(black_box(&x)).unwrap())
    });
    c.bench_function("conv_16to32_3x3_batch8_forward_backward", |b| {
        b.iter(|| {
            conv.forward(&x).unwrap();
            conv.backward(black_box(&up)).unwrap()
        })
    });
}

fn classifier(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = ClassifierModel::new(8, NormalizationSpec::default(), 2).unwrap();
    let one = image(&mut rng);
    let batch: Vec<Image> = (0..64).map(|_| image(&mut rng)).collect();
    c.bench_function("classifier_predict_one", |b| {
        b.iter(|| model.predict_probs(black_box(&one)))
    });
    c.bench_function("classifier_predict_batch64", |b| {
        b.iter(|| model.predict_batch(black_box(&batch)))
    });

    let probs = [0.6f32, 0.1, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05];
    c.bench_function("randomize_confidences_k8", |b| {
        b.iter(|| randomize_confidences(black_box(&probs), 0, 1.0, &mut rng))
    });
}

fn policy(c: &mut Criterion) {
    let cfg = PpoConfig::default();
    let mut ac = ActorCritic::for_environment(8, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = cfg.minibatch_size;
    let obs = Tensor::new(vec![n, ac.obs_len()], random(&mut rng, n * ac.obs_len())).unwrap();
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..ACTION_COUNT)).collect();
    let old = vec![-(ACTION_COUNT as f32).ln(); n];
    let adv = random(&mut rng, n);
    let ret = random(&mut rng, n);
    let targets = LossTargets {
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        returns: &ret,
    };
    let one = Tensor::new(vec![1, ac.obs_len()], random(&mut rng, ac.obs_len())).unwrap();
    c.bench_function("actor_critic_infer_one", |b| {
        b.iter(|| ac.infer(black_box(&one)).unwrap())
    });
    c.bench_function("ppo_minibatch_forward_loss_backward", |b| {
        b.iter(|| {
            let (logits, values) = ac.forward(&obs).unwrap();
            let (_, grads) = loss_from_outputs(&logits, &values, &targets, &cfg, true);
            let (dl, dv) = grads.unwrap();
            ac.backward(&dl, &dv).unwrap()
        })
    });
}

fn environment(c: &mut Criterion) {
    let corpus_cfg = CorpusConfig {
        samples_per_class: 20,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&corpus_cfg).unwrap();
    let pool = Arc::new(ImagePool::new(&corpus.test, corpus.class_count).unwrap());
    let model = Arc::new(
        ClassifierModel::new(corpus.class_count, NormalizationSpec::default(), 4).unwrap(),
    );
    let mut env = EvasionEnv::new(
        pool,
        model,
        Scenario::TrueDistribution,
        DefenseConfig::default(),
        4,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    env.reset().unwrap();
    c.bench_function("env_step", |b| {
        b.iter_batched(
            || Action::new(rng.random_range(0..ACTION_COUNT)).unwrap(),
            |a| {
                if env.step(a).unwrap().done {
                    env.reset().unwrap();
                }
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, layers, classifier, policy, environment);
criterion_main!(benches);
