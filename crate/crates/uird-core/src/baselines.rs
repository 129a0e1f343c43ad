//! Comparison strategies run on the same streams and seeds as the
//! pseudo-replay loop: EWC, joint training over all real data, and the
//! detector-only ablation.

use crate::classifier::{BeatClassifier, ClassifierArch, GradPenalty, TrainOptions};
use crate::metrics::TaskReport;
use crate::nn::{apply_grads, Graph, Tensor};
use crate::pipeline::{run_sequence, PipelineConfig, ReplaySource, SequenceOutcome, TaskStream};
use crate::signal::Beat;
use crate::{derive_seed, Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Diagonal empirical Fisher information with the anchor parameters it was
/// computed at. Tensors parallel the classifier's parameter set.
#[derive(Debug, Clone)]
pub struct FisherInfo {
    pub fisher: Vec<Tensor>,
    pub anchor: Vec<Tensor>,
}

/// Diagonal empirical Fisher: `F_j = mean over samples of
/// (∂ log p(y|x) / ∂θ_j)²`, estimated on up to `n_samples` beats (a seeded
/// subsample when the set is larger). Anchors at the current parameters.
pub fn compute_fisher(
    classifier: &mut BeatClassifier,
    beats: &[Beat],
    n_samples: usize,
    seed: u64,
) -> Result<FisherInfo> {
    if beats.is_empty() {
        return Err(Error::Invalid("fisher estimation needs samples".into()));
    }
    let mut idxs: Vec<usize> = (0..beats.len()).collect();
    if idxs.len() > n_samples {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "fisher.subsample"));
        idxs.shuffle(&mut rng);
        idxs.truncate(n_samples);
        idxs.sort_unstable();
    }
    let mut fisher: Vec<Tensor> = (0..classifier.params().len())
        .map(|i| Tensor::zeros(classifier.params().value(i).shape()))
        .collect();
    let n = idxs.len() as f64;
    for &bi in &idxs {
        let beat = &beats[bi];
        let Some(target) = classifier.class_index(beat.label) else {
            return Err(Error::Invalid(format!("label {:?} unknown to classifier", beat.label)));
        };
        let mut g = Graph::new();
        let (logits, pnodes) = classifier.forward_logits(&mut g, &[beat])?;
        // −log p(y|x); the sign squares away
        let (loss, _) = g.softmax_cross_entropy(logits, &[target])?;
        let grads = g.backward(loss)?;
        apply_grads(classifier.params_mut(), &pnodes, &grads);
        for (f, idx) in fisher.iter_mut().zip(0..) {
            let grad = classifier.params().grad(idx);
            for (acc, &gv) in f.data_mut().iter_mut().zip(grad.data()) {
                *acc += gv * gv / n;
            }
        }
    }
    let anchor = (0..classifier.params().len())
        .map(|i| classifier.params().value(i).clone())
        .collect();
    Ok(FisherInfo { fisher, anchor })
}

/// Quadratic EWC penalty over every stored task anchor:
/// `(λ/2)·Σ_tasks Σ_j F_j (θ_j − θ*_j)²`. Parameters beyond an anchor's
/// shape (freshly widened head rows) are exempt.
pub struct EwcPenalty<'a> {
    pub tasks: &'a [FisherInfo],
    pub lambda: f64,
}

impl GradPenalty for EwcPenalty<'_> {
    fn apply(&self, params: &mut crate::nn::ParameterSet) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let mut penalty = 0.0;
        for task in self.tasks {
            for idx in 0..params.len().min(task.anchor.len()) {
                let anchor = &task.anchor[idx];
                let fisher = &task.fisher[idx];
                let overlap = anchor.len().min(params.value(idx).len());
                // value/grad pulled separately to satisfy the borrow checker
                let theta: Vec<f64> = params.value(idx).data()[..overlap].to_vec();
                let grad = params.grad_mut(idx);
                for i in 0..overlap {
                    let d = theta[i] - anchor.data()[i];
                    let f = fisher.data()[i];
                    grad.data_mut()[i] += self.lambda * f * d;
                    penalty += 0.5 * self.lambda * f * d * d;
                }
            }
        }
        penalty
    }
}

/// Train with cross-entropy plus the summed EWC penalties. With
/// `lambda == 0` the trajectory is bit-identical to plain training under
/// the same seed.
pub fn ewc_train(
    classifier: &mut BeatClassifier,
    new_beats: &[Beat],
    fisher_list: &[FisherInfo],
    lambda: f64,
    opts: &TrainOptions,
) -> Result<Vec<f64>> {
    let penalty = EwcPenalty {
        tasks: fisher_list,
        lambda,
    };
    classifier.train_with_penalty(new_beats, opts, Some(&penalty))
}

/// Fresh classifier trained on the union of all real data seen so far,
/// the upper-bound reference.
pub fn joint_baseline_train(
    all_real_beats: &[Beat],
    class_symbols: Vec<char>,
    arch: ClassifierArch,
    opts: &TrainOptions,
    seed: u64,
) -> Result<BeatClassifier> {
    let mut clf = BeatClassifier::build(class_symbols, arch, seed)?;
    clf.train(all_real_beats, opts)?;
    Ok(clf)
}

/// Hyperparameters for the EWC sequence runner.
#[derive(Debug, Clone)]
pub struct EwcOptions {
    pub lambda: f64,
    pub fisher_samples: usize,
}

impl Default for EwcOptions {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            fisher_samples: 1000,
        }
    }
}

fn clf_opts(cfg: &PipelineConfig, seed: u64) -> TrainOptions {
    TrainOptions {
        epochs: cfg.classifier_epochs,
        batch_size: cfg.classifier_batch,
        lr: cfg.classifier_lr,
        seed,
        balanced: true,
        require_all_classes: true,
    }
}

/// EWC over the stream: task 1 trains a fresh two-class classifier on real
/// data of the first two classes (the shared initial stage), then each task
/// widens the head and trains on the new class's real data only, anchored
/// by one (Fisher, θ*) pair per completed task.
pub fn run_ewc_sequence(stream: &TaskStream, cfg: &PipelineConfig, ewc: &EwcOptions) -> Result<Vec<TaskReport>> {
    if stream.classes.len() < 2 {
        return Err(Error::Config("need >= 2 classes for a sequence".into()));
    }
    let splits = crate::pipeline::split_stream(stream, cfg.split_ratio, cfg.master_seed)?;
    let seed = cfg.master_seed;

    let symbols = stream.symbols();
    let mut classifier = BeatClassifier::build(
        symbols[..2].to_vec(),
        cfg.classifier_arch.clone(),
        derive_seed(seed, "ewc.task1.classifier"),
    )?;
    let mut train_set: Vec<Beat> = splits[0].0.clone();
    train_set.extend(splits[1].0.iter().cloned());
    classifier.train(&train_set, &clf_opts(cfg, derive_seed(seed, "ewc.task1.train")))?;

    let mut anchors = vec![compute_fisher(
        &mut classifier,
        &train_set,
        ewc.fisher_samples,
        derive_seed(seed, "ewc.task1.fisher"),
    )?];

    let mut test_union: Vec<Beat> = splits[0].1.clone();
    test_union.extend(splits[1].1.iter().cloned());
    let n0 = splits[0].0.len();
    let n1 = splits[1].0.len();
    let mut reports = vec![classifier.evaluate_as_task(&test_union, 1, vec![n0, n1], vec![0, 0])?];

    for (task, (symbol, _)) in stream.classes.iter().enumerate().skip(2) {
        classifier.widen_head(*symbol, derive_seed(seed, &format!("ewc.task{task}.widen")))?;
        let new_train = &splits[task].0;
        let opts = TrainOptions {
            require_all_classes: false,
            ..clf_opts(cfg, derive_seed(seed, &format!("ewc.task{task}.train")))
        };
        ewc_train(&mut classifier, new_train, &anchors, ewc.lambda, &opts)?;
        anchors.push(compute_fisher(
            &mut classifier,
            new_train,
            ewc.fisher_samples,
            derive_seed(seed, &format!("ewc.task{task}.fisher")),
        )?);
        test_union.extend(splits[task].1.iter().cloned());
        let mut real = vec![0; task + 1];
        real[task] = new_train.len();
        reports.push(classifier.evaluate_as_task(&test_union, task, real, vec![0; task + 1])?);
    }
    Ok(reports)
}

/// Joint training over the stream: at task i a fresh classifier trains on
/// all real train data of classes 0..=i.
pub fn run_joint_sequence(stream: &TaskStream, cfg: &PipelineConfig) -> Result<Vec<TaskReport>> {
    if stream.classes.len() < 2 {
        return Err(Error::Config("need >= 2 classes for a sequence".into()));
    }
    let splits = crate::pipeline::split_stream(stream, cfg.split_ratio, cfg.master_seed)?;
    let seed = cfg.master_seed;
    let symbols = stream.symbols();

    let mut reports = Vec::new();
    let mut train_union: Vec<Beat> = splits[0].0.clone();
    let mut test_union: Vec<Beat> = splits[0].1.clone();
    let mut real_counts = vec![splits[0].0.len()];
    for (i, _) in stream.classes.iter().enumerate().skip(1) {
        train_union.extend(splits[i].0.iter().cloned());
        test_union.extend(splits[i].1.iter().cloned());
        real_counts.push(splits[i].0.len());
        let mut clf = joint_baseline_train(
            &train_union,
            symbols[..=i].to_vec(),
            cfg.classifier_arch.clone(),
            &clf_opts(cfg, derive_seed(seed, &format!("joint.task{i}.train"))),
            derive_seed(seed, &format!("joint.task{i}.classifier")),
        )?;
        reports.push(clf.evaluate_as_task(&test_union, i, real_counts.clone(), vec![0; i + 1])?);
    }
    Ok(reports)
}

/// Detector-only ablation: identical plumbing to the full loop, but the
/// classifier trains on the stored real detected samples instead of pseudo
/// data.
pub fn madegan_only_pipeline(stream: &TaskStream, cfg: &PipelineConfig) -> Result<SequenceOutcome> {
    let cfg = PipelineConfig {
        replay: ReplaySource::RealStores,
        ..cfg.clone()
    };
    run_sequence(stream, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierArch;
    use crate::synth::synthetic_beats;

    fn toy_set() -> Vec<Beat> {
        let mut beats = synthetic_beats(0, 'N', 20, 0.05, 1);
        beats.extend(synthetic_beats(2, 'V', 20, 0.05, 2));
        beats
    }

    fn fast_opts(seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            seed,
            balanced: true,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn fisher_values_are_nonnegative_and_anchored() {
        let beats = toy_set();
        let mut clf = BeatClassifier::build(vec!['N', 'V'], ClassifierArch::desk(), 1).unwrap();
        clf.train(&beats, &fast_opts(1)).unwrap();
        let info = compute_fisher(&mut clf, &beats, 10, 1).unwrap();
        assert_eq!(info.fisher.len(), clf.params().len());
        for f in &info.fisher {
            assert!(f.data().iter().all(|&v| v >= 0.0));
        }
        for (i, a) in info.anchor.iter().enumerate() {
            assert_eq!(a.data(), clf.params().value(i).data(), "anchor must snapshot θ");
        }
    }

    #[test]
    fn fisher_matches_hand_computed_squared_gradient() {
        // micro case: single sample, fisher = (∂ log p / ∂θ)² exactly
        let mut clf = BeatClassifier::build(vec!['N', 'V'], ClassifierArch::micro(), 3).unwrap();
        let beat = Beat {
            values: vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8],
            label: 'N',
            r_peak_index: 0,
            standardized: true,
            degenerate: false,
            synthetic: false,
        };
        let info = compute_fisher(&mut clf, std::slice::from_ref(&beat), 10, 3).unwrap();

        // hand route: backward of −log p for the same sample
        let mut g = Graph::new();
        let (logits, pnodes) = clf.forward_logits(&mut g, &[&beat]).unwrap();
        let (loss, _) = g.softmax_cross_entropy(logits, &[0]).unwrap();
        let grads = g.backward(loss).unwrap();
        apply_grads(clf.params_mut(), &pnodes, &grads);
        for idx in 0..clf.params().len() {
            for (f, gv) in info.fisher[idx].data().iter().zip(clf.params().grad(idx).data()) {
                assert!((f - gv * gv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ewc_penalty_zero_at_anchor_and_nonnegative() {
        let beats = toy_set();
        let mut clf = BeatClassifier::build(vec!['N', 'V'], ClassifierArch::desk(), 5).unwrap();
        clf.train(&beats, &fast_opts(5)).unwrap();
        let info = compute_fisher(&mut clf, &beats, 20, 5).unwrap();
        let penalty = EwcPenalty {
            tasks: std::slice::from_ref(&info),
            lambda: 100.0,
        };
        clf.params_mut().zero_grads();
        let at_anchor = penalty.apply(clf.params_mut());
        assert_eq!(at_anchor, 0.0, "penalty vanishes exactly at θ*");

        // perturb one parameter: penalty strictly positive
        clf.params_mut().value_mut(0).data_mut()[0] += 0.5;
        clf.params_mut().zero_grads();
        let moved = penalty.apply(clf.params_mut());
        assert!(moved >= 0.0);
    }

    #[test]
    fn lambda_zero_is_bit_identical_to_plain_training() {
        let beats = toy_set();
        let build = || BeatClassifier::build(vec!['N', 'V'], ClassifierArch::desk(), 7).unwrap();
        let mut plain = build();
        plain.train(&beats, &fast_opts(7)).unwrap();

        let mut anchored = build();
        let mut pre = build();
        let info = compute_fisher(&mut pre, &beats, 10, 7).unwrap();
        ewc_train(&mut anchored, &beats, &[info], 0.0, &fast_opts(7)).unwrap();

        for i in 0..plain.params().len() {
            for (a, b) in plain.params().value(i).data().iter().zip(anchored.params().value(i).data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn huge_lambda_freezes_anchored_parameters() {
        let beats_a = toy_set();
        let beats_b = synthetic_beats(3, 'R', 20, 0.05, 9);
        let mut clf = BeatClassifier::build(vec!['N', 'V'], ClassifierArch::desk(), 9).unwrap();
        clf.train(&beats_a, &fast_opts(9)).unwrap();
        let info = compute_fisher(&mut clf, &beats_a, 40, 9).unwrap();
        let before: Vec<Vec<f64>> = (0..clf.params().len())
            .map(|i| clf.params().value(i).data().to_vec())
            .collect();
        clf.widen_head('R', 9).unwrap();
        let opts = TrainOptions {
            require_all_classes: false,
            ..fast_opts(10)
        };
        ewc_train(&mut clf, &beats_b, &[info.clone()], 1e9, &opts).unwrap();
        // parameters with meaningful fisher mass must stay put
        let mut max_moved = 0.0_f64;
        for idx in 0..before.len() {
            let overlap = before[idx].len().min(clf.params().value(idx).len());
            for i in 0..overlap {
                if info.fisher[idx].data()[i] > 1e-6 {
                    max_moved = max_moved.max((clf.params().value(idx).data()[i] - before[idx][i]).abs());
                }
            }
        }
        assert!(max_moved < 1e-3, "anchored parameters moved {max_moved}");
    }

    #[test]
    fn joint_task1_equals_plain_training() {
        let beats = toy_set();
        let opts = fast_opts(11);
        let joint = joint_baseline_train(&beats, vec!['N', 'V'], ClassifierArch::desk(), &opts, 11).unwrap();
        let mut plain = BeatClassifier::build(vec!['N', 'V'], ClassifierArch::desk(), 11).unwrap();
        plain.train(&beats, &opts).unwrap();
        for i in 0..joint.params().len() {
            for (a, b) in joint.params().value(i).data().iter().zip(plain.params().value(i).data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
