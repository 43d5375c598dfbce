mod common;

use common::*;
use modfus::daffus::{
    argmax, extract_block_features, extract_features, fit_heads, train_head, Extraction, ExtractionMode, FeatureSet,
    HeadHyper, Variant,
};
use modfus::dataset::{split_limited_label, SplitSpec};
use modfus::diffusion::{forward_sample, NoiseSchedule, SignalBatch};
use modfus::synth::{synth_dataset, NoiseColor, SynthSpec};
use modfus::checkpoint::Checkpoint;
use modfus::rng;
use modfus::unet::{ModelParams, UNetConfig};
use rand_distr::{Distribution, StandardNormal};

fn report(c: Check) {
    println!("{}", c.detail);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn schedules_keep_unit_total_variance() {
    report(schedule_invariants());
}

#[test]
fn posterior_matches_grid_bayes_at_t10() {
    let sched = NoiseSchedule::cosine(100).unwrap();
    let st = sched.mu(10) * 1.0 - 0.4 * sched.sigma(10);
    let post = modfus::diffusion::posterior_params(&[st], &[1.0], 10, &sched).unwrap();
    let (m, v) = grid_bayes_posterior(&sched, 10, 1.0, st, 100_000);
    assert!(((post.mean[0] - m) / m).abs() < 1e-4);
    assert!(((post.var - v) / v).abs() < 1e-4);
    report(posterior_oracle());
}

#[test]
fn forward_variance_matches_sigma_squared() {
    let sched = NoiseSchedule::cosine(100).unwrap();
    let n = 10_000;
    let mut r = rng::seeded(3);
    for t in [1, 25, 100] {
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let st = forward_sample(&vec![0.0; n], t, &eps, &sched).unwrap();
        let mean = st.iter().sum::<f64>() / n as f64;
        let var = st.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = sched.sigma(t).powi(2);
        // Standard error of a Gaussian sample variance.
        let se = target * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - target).abs() <= 3.0 * se, "t={t}: {var} vs {target}");
    }
}

#[test]
fn perfect_noise_oracle_recovers_clean_signals() {
    report(perfect_oracle_chain());
}

#[test]
fn zero_model_loss_is_one() {
    report(zero_predictor_loss());
}

#[test]
fn synth_metrology_checks() {
    report(synth_metrology());
}

#[test]
fn blue_noise_rises_ten_db_per_decade() {
    let slope = colored_slope(NoiseColor::Blue, 7);
    assert!((slope - 10.0).abs() <= 1.5, "{slope}");
}

#[test]
fn split_trials_differ() {
    let ds = synth_dataset(&SynthSpec::easy_four_class(30), 1).unwrap();
    let spec = SplitSpec { n_per_type_per_snr: 10, trials: 2, seed: 0 };
    let a = split_limited_label(&ds, &spec, 0).unwrap();
    let b = split_limited_label(&ds, &spec, 1).unwrap();
    assert_eq!(a.labeled.len(), 40);
    assert_ne!(a.labeled, b.labeled);
}

fn small_model() -> ModelParams<f32> {
    let mut p = ModelParams::<f32>::init(&UNetConfig::default(), 4).unwrap();
    // Give the zero output projection and biases some weight so that every
    // block sees a nontrivial input.
    let mut r = rng::seeded(5);
    for v in p.data_mut() {
        let z: f64 = StandardNormal.sample(&mut r);
        *v += 0.05 * z as f32;
    }
    p
}

#[test]
fn pooled_features_are_row_means_of_block_outputs() {
    let p = small_model();
    let sched = NoiseSchedule::cosine(100).unwrap();
    let ds = synth_dataset(&SynthSpec::easy_four_class(1), 2).unwrap();
    let sig = &ds.signals()[1];
    let ex = Extraction { t: 3, mode: ExtractionMode::Stochastic, seed: 8 };
    let fs = extract_block_features(&p, sig, &sched, &ex).unwrap();

    // Rebuild the same noisy input and capture raw block activations.
    let mut r = rng::stream(8, 0);
    let eps: Vec<f32> = (0..2 * sig.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            z as f32
        })
        .collect();
    let x = forward_sample(&sig.to_flat(), 3, &eps, &sched).unwrap();
    let batch = SignalBatch::new(x, 1, sig.len()).unwrap();
    let (_, acts) = p.forward(&batch, &[3], true).unwrap();
    let acts = acts.unwrap();
    for (bi, act) in acts.blocks.iter().enumerate() {
        assert_eq!(fs.blocks[bi].len(), act.c);
        for c in 0..act.c {
            let row = &act.data[c * act.l..(c + 1) * act.l];
            let mut sum = 0.0f64;
            for &v in row {
                sum += f64::from(v);
            }
            let mean = sum / act.l as f64;
            assert!((fs.blocks[bi][c] - mean).abs() < 1e-5, "block {bi} channel {c}");
        }
    }
}

#[test]
fn deterministic_extraction_is_repeatable() {
    let p = small_model();
    let sched = NoiseSchedule::cosine(100).unwrap();
    let ds = synth_dataset(&SynthSpec::easy_four_class(2), 3).unwrap();
    let ex = Extraction::default();
    assert_eq!(ex.t, 1);
    let a = extract_features(&p, ds.signals(), &sched, &ex, 0).unwrap();
    let b = extract_features(&p, ds.signals(), &sched, &ex, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn daffus_prediction_ignores_down_path_blocks() {
    let p = small_model();
    let sched = NoiseSchedule::cosine(100).unwrap();
    let ds = synth_dataset(&SynthSpec::easy_four_class(5), 3).unwrap();
    let heads = train_head(&p, &ds, &sched, Extraction::default(), Variant::Daffus, &HeadHyper { epochs: 3, ..HeadHyper::default() }).unwrap();
    let fs = extract_block_features(&p, &ds.signals()[0], &sched, &Extraction::default()).unwrap();
    let mut masked = fs.clone();
    for b in 0..4 {
        masked.blocks[b].iter_mut().for_each(|v| *v = 1e3);
    }
    assert_eq!(heads.probabilities(&fs).unwrap(), heads.probabilities(&masked).unwrap());
}

#[test]
fn argmax_survives_positive_classifier_scaling() {
    let p = small_model();
    let sched = NoiseSchedule::cosine(100).unwrap();
    let ds = synth_dataset(&SynthSpec::easy_four_class(5), 3).unwrap();
    let heads = train_head(&p, &ds, &sched, Extraction::default(), Variant::Daffus, &HeadHyper { epochs: 5, ..HeadHyper::default() }).unwrap();
    let feats = extract_features(&p, ds.signals(), &sched, &Extraction::default(), 0).unwrap();
    for lambda in [0.1, 3.0, 40.0] {
        let mut scaled = heads.clone();
        scaled.classifier.w.iter_mut().for_each(|w| *w *= lambda);
        scaled.classifier.b.iter_mut().for_each(|b| *b *= lambda);
        for fs in &feats {
            assert_eq!(heads.predict_features(fs).unwrap().0, scaled.predict_features(fs).unwrap().0);
        }
    }
}

#[test]
fn head_training_leaves_backbone_bytes_unchanged() {
    let p = small_model();
    let before = Checkpoint::backbone_bytes(&p);
    let sched = NoiseSchedule::cosine(100).unwrap();
    let ds = synth_dataset(&SynthSpec::easy_four_class(5), 3).unwrap();
    train_head(&p, &ds, &sched, Extraction::default(), Variant::FusionAll, &HeadHyper { epochs: 4, ..HeadHyper::default() }).unwrap();
    assert_eq!(before, Checkpoint::backbone_bytes(&p));
}

#[test]
fn heads_separate_two_gaussian_blobs() {
    // Blob centres sit five standard deviations from the separating hyperplane.
    let mut r = rng::seeded(17);
    let dim = 12;
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for k in 0..60 {
        let label = k % 2;
        let offset = if label == 0 { -2.5 } else { 2.5 };
        let x: Vec<f64> = dir
            .iter()
            .map(|d| {
                let z: f64 = StandardNormal.sample(&mut r);
                offset * d / norm + z * 0.5
            })
            .collect();
        inputs.push(x);
        labels.push(label);
    }
    let (fusion, clf, history) = fit_heads(&inputs, &labels, 2, &HeadHyper { seed: 3, ..HeadHyper::default() }).unwrap();
    assert!(history.last().unwrap() < history.first().unwrap());
    let correct = inputs
        .iter()
        .zip(&labels)
        .filter(|(x, &l)| argmax(&clf.logits(&fusion.apply(x).unwrap()).unwrap()) == l)
        .count();
    assert_eq!(correct, inputs.len());
}

#[test]
fn feature_set_concat_orders_blocks() {
    let fs = FeatureSet { blocks: (0..8).map(|b| vec![b as f64; b + 1]).collect() };
    let v = fs.concat(Variant::Daffus);
    assert_eq!(v.len(), 5 + 6 + 7 + 8);
    assert_eq!(v[0], 4.0);
    assert_eq!(*v.last().unwrap(), 7.0);
}
