mod common;

use std::sync::OnceLock;

use pairdebias::alignment::{bias_measure, build_knn, causal_effect, group_embeddings, weighted_effect, Neighborhoods};
use pairdebias::encoder::{EncoderModel, Frozen, Tape};
use pairdebias::synthetic::{gender_setup, SkewedSetup};
use pairdebias::training::{
    frozen_hidden, loss_bias, loss_bias_on_tape, loss_repr, loss_repr_on_tape, pretrain, total_loss, train,
    LossContext, PretrainConfig, TrainConfig, TrainData,
};

use common::model_for;

struct Fixture {
    setup: SkewedSetup,
    m0: Frozen,
    nbs: Neighborhoods,
    aligned: Vec<String>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let setup = gender_setup(10, 5, 0).unwrap();
        let mut model = model_for(&setup.corpus, 32, 2, 0);
        let cfg = PretrainConfig {
            epochs: 6,
            ..PretrainConfig::default()
        };
        pretrain(&mut model, &setup.pretrain_sentences, &cfg).unwrap();
        let m0 = model.snapshot();
        let nbs = build_knn(&group_embeddings(&m0, &setup.corpus).unwrap(), 5, 1.0).unwrap();
        let mut report = causal_effect(&m0, &setup.corpus, &nbs, 1.0).unwrap();
        report.apply_selection(0.5).unwrap();
        let mut aligned: Vec<String> = report.kept_ids().into_iter().collect();
        aligned.sort();
        Fixture { setup, m0, nbs, aligned }
    })
}

fn data(f: &Fixture) -> TrainData<'_> {
    TrainData {
        corpus: &f.setup.corpus,
        aligned: &f.aligned,
        neighborhoods: &f.nbs,
        held_out: &f.setup.held_out,
    }
}

fn run(lambda: f64, epochs: usize) -> (EncoderModel, pairdebias::training::TrainLog) {
    run_lr(lambda, TrainConfig::default().learning_rate, epochs)
}

fn run_lr(lambda: f64, learning_rate: f64, epochs: usize) -> (EncoderModel, pairdebias::training::TrainLog) {
    let f = fixture();
    let cfg = TrainConfig {
        lambda,
        learning_rate,
        epochs,
        ..TrainConfig::default()
    };
    train(f.m0.thaw(), &f.m0, &data(f), &cfg).unwrap()
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(0.5, 0.25, 1.0), 0.75);
    assert_eq!(total_loss(0.3, 9.0, 0.0), 0.3);
    assert_eq!(total_loss(0.3, 0.0, 2.0), 0.3);
}

#[test]
fn bias_loss_is_the_weighted_sum_of_d() {
    let f = fixture();
    let lists = &f.setup.corpus.word_lists;
    let anchors: Vec<&str> = f.aligned.iter().take(4).map(String::as_str).collect();
    let d = |id: &str| bias_measure(&f.m0, f.setup.corpus.get(id).unwrap(), lists, 1.0).unwrap();
    let expect: f64 = anchors.iter().map(|a| weighted_effect(&f.nbs[*a], d)).sum();
    let got = loss_bias(&f.m0, &f.setup.corpus, &f.nbs, &anchors, 1.0).unwrap();
    assert!((got - expect).abs() < 1e-12);

    let k0 = build_knn(&group_embeddings(&f.m0, &f.setup.corpus).unwrap(), 0, 1.0).unwrap();
    let got = loss_bias(&f.m0, &f.setup.corpus, &k0, &anchors, 1.0).unwrap();
    let expect: f64 = anchors.iter().map(|a| d(a)).sum();
    assert!((got - expect).abs() < 1e-12);
}

#[test]
fn repr_loss_examples() {
    let f = fixture();
    let sentences: Vec<&str> = f.setup.corpus.sentences().take(6).collect();
    assert_eq!(loss_repr(&f.m0, &f.m0, &sentences).unwrap(), 0.0);

    let mut shifted = f.m0.thaw();
    let bias = shifted.param_names().iter().position(|n| n == "final_ln.bias").unwrap();
    shifted.params_mut()[bias].data.iter_mut().for_each(|b| *b += 0.1);
    let l = loss_repr(&shifted, &f.m0, &sentences).unwrap();
    assert!((l - 0.01).abs() < 1e-12, "{l}");

    let mut other = f.m0.thaw();
    other.params_mut()[0].data.iter_mut().enumerate().for_each(|(i, v)| *v += 1e-3 * (i % 7) as f64);
    let ab = loss_repr(&other, &f.m0, &sentences).unwrap();
    let ba = loss_repr(&f.m0, &other, &sentences).unwrap();
    assert!((ab - ba).abs() < 1e-15 && ab > 0.0);
}

#[test]
fn gradient_of_total_is_linear() {
    let f = fixture();
    let mut model = f.m0.thaw();
    model.params_mut()[0].data.iter_mut().enumerate().for_each(|(i, v)| *v += 1e-2 * ((i % 5) as f64 - 2.0));
    let ctx = LossContext::new(&f.setup.corpus, &f.nbs, 1.0);
    let anchors: Vec<&str> = f.aligned.iter().take(3).map(String::as_str).collect();
    let sentences: Vec<&str> = anchors
        .iter()
        .flat_map(|a| f.setup.corpus.get(a).unwrap().variants.iter().map(|v| v.text.as_str()))
        .collect();
    let frozen = frozen_hidden(&f.m0, &sentences).unwrap();
    let targets: Vec<_> = frozen.iter().collect();
    let lambda = 2.5;
    let grads = |which: u8| {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let lb = loss_bias_on_tape(&mut tape, &model, &b, &ctx, &anchors).unwrap().loss;
        let lr = loss_repr_on_tape(&mut tape, &model, &b, &sentences, &targets).unwrap();
        let loss = match which {
            0 => lb,
            1 => lr,
            _ => {
                let w = tape.scale(lr, lambda);
                tape.sum(&[lb, w])
            }
        };
        model.gradients(&tape, loss).unwrap()
    };
    let (gb, gr, gt) = (grads(0), grads(1), grads(2));
    for ((b, r), t) in gb.iter().zip(&gr).zip(&gt) {
        for ((x, y), z) in b.data.iter().zip(&r.data).zip(&t.data) {
            assert!((x + lambda * y - z).abs() <= 1e-12 * (1.0 + z.abs()));
        }
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let f = fixture();
    let (model, log) = run(1.0, 0);
    assert!(log.epochs.is_empty());
    assert_eq!(model.params(), f.m0.params());
}

#[test]
fn training_is_deterministic_and_leaves_m0_alone() {
    let f = fixture();
    let before = f.m0.params().to_vec();
    let (a, la) = run(1.0, 1);
    let (b, lb) = run(1.0, 1);
    assert_eq!(a.params(), b.params());
    assert_eq!(la.to_json(), lb.to_json());
    assert_eq!(f.m0.params(), &before[..]);
    assert_ne!(a.params(), &before[..]);
}

// Plain SGD moves λ·L_r with step λ·lr, so the step is held at the default's.
#[test]
fn strong_anchor_preserves_perplexity() {
    let step = TrainConfig::default().learning_rate;
    for lambda in [100.0, 1000.0] {
        let (_, log) = run_lr(lambda, step / lambda, 4);
        let p0 = log.initial.ppl;
        let p1 = log.last().ppl;
        assert!(((p1 - p0) / p0).abs() < 0.01, "lambda {lambda}: {p0} -> {p1}");
    }
}

#[test]
fn representation_loss_is_lower_with_the_anchor() {
    let (_, with) = run(1.0, 4);
    let (_, without) = run(0.0, 4);
    assert!(with.last().l_r <= without.last().l_r, "{} vs {}", with.last().l_r, without.last().l_r);
}

#[test]
fn bias_drops_on_the_skewed_corpus() {
    let (_, log) = run(1.0, 4);
    assert!(log.last().mean_d < log.initial.mean_d);
    assert!(log.epochs.iter().all(|e| e.l_b.is_finite() && e.l_r.is_finite() && e.ppl.is_finite()));
}

