use proptest::collection::vec;
use proptest::prelude::*;

use mcbmn::cues::{extract_tags, synth_example, synth_tag_lexicon, synth_vocabulary, SynthConfig, PAD, QUESTION_WORDS, UNK};
use mcbmn::fusion::{mix_encoding, moderator_gate, GateSource, Moderator};
use mcbmn::harness::{OptimizerKind, RunConfig};
use mcbmn::metrics::{bleu_n, rouge_l};
use mcbmn::model::{Combiner, DropoutMode};
use mcbmn::nn::{gradient_reversal, EmbeddingTable, McStatistics, Noise, ParamStore};
use mcbmn::tensor::{softmax_logsumexp, RngStream, Tape, Tensor};

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    vec(-1.0..1.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d.iter().map(|x| x * scale).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_is_a_simplex_point(x in vec(-1e3..1e3f64, 1..12)) {
        let (p, _) = softmax_logsumexp(&x).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_ignores_constant_shifts(x in vec(-50.0..50.0f64, 1..12), c in -100.0..100.0f64) {
        let (p, _) = softmax_logsumexp(&x).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let (q, _) = softmax_logsumexp(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rng_streams_replay_and_separate(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = RngStream::new(seed, stream);
        let mut b = RngStream::new(seed, stream);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        prop_assert_eq!(&xs, &ys);
        let mut other = RngStream::new(seed, stream.wrapping_add(1));
        let zs: Vec<u64> = (0..16).map(|_| other.next_u64()).collect();
        prop_assert_ne!(xs, zs);
    }

    #[test]
    fn tensors_reject_bad_shapes_and_non_finite(n in 1usize..10, extra in 1usize..4) {
        prop_assert!(Tensor::new(vec![n], vec![0.0; n + extra]).is_err());
        let mut d = vec![0.5; n];
        d[n - 1] = f64::NAN;
        prop_assert!(Tensor::new(vec![n], d).is_err());
    }

    #[test]
    fn gate_weights_form_a_simplex(
        seed in any::<u64>(),
        rows in 1usize..4,
        cues in 1usize..5,
        scale in 0.01..30.0f64,
        temperature in 0.1..10.0f64,
    ) {
        let width = 4;
        let mut store = ParamStore::new();
        let moderator = Moderator::new(&mut store, 3, width, temperature, GateSource::Fused, &mut RngStream::new(seed, 1));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let mut rng = RngStream::new(seed, 2);
        let mut draw = |r: usize, c: usize| tape.constant(Tensor::new(vec![r, c], (0..r * c).map(|_| scale * rng.normal()).collect()).unwrap());
        let image = draw(rows, 3);
        let fused: Vec<_> = (0..cues).map(|_| draw(rows, width)).collect();
        let w = moderator_gate(&p, &moderator, &fused, image, Noise::Off).unwrap();
        let values = w.value();
        for r in 0..rows {
            let row = values.row_slice(r);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        // the mixed encoding is a convex combination of the fused embeddings
        let mixed = mix_encoding(w, &fused).unwrap().value();
        for r in 0..rows {
            for j in 0..width {
                let vals: Vec<f64> = fused.iter().map(|f| f.value().get2(r, j)).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let m = mixed.get2(r, j);
                prop_assert!(m >= lo - 1e-12 * (1.0 + lo.abs()) && m <= hi + 1e-12 * (1.0 + hi.abs()));
            }
        }
    }

    #[test]
    fn equal_scores_average_the_fused_embeddings(fused in vec(matrix(2, 3, 5.0), 1..5)) {
        let tape = Tape::new();
        let k = fused.len();
        let weights = tape.constant(Tensor::full(&[2, k], 1.0 / k as f64));
        let fused: Vec<_> = fused.iter().map(|f| tape.constant(f.clone())).collect();
        let mixed = mix_encoding(weights, &fused).unwrap().value();
        for r in 0..2 {
            for j in 0..3 {
                let mean = fused.iter().map(|f| f.value().get2(r, j)).sum::<f64>() / k as f64;
                prop_assert!((mixed.get2(r, j) - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
            }
        }
    }

    #[test]
    fn distorted_loss_is_bounded_and_monotone(mut xs in vec(-20.0..20.0f64, 2..20), alpha in 0.1..5.0f64) {
        xs.sort_by(f64::total_cmp);
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![xs.len(), 1], xs.clone()).unwrap()).distort(alpha).unwrap().to_vec();
        prop_assert!(v.iter().all(|&y| y >= -alpha));
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn mc_variance_is_nonnegative_and_zero_for_repeats(samples in vec(vec(-5.0..5.0f64, 3), 1..10)) {
        let s = McStatistics::from_samples(&samples, false).unwrap();
        prop_assert!(s.variance.iter().all(|&v| v >= 0.0));
        let repeated = vec![samples[0].clone(); samples.len()];
        let r = McStatistics::from_samples(&repeated, false).unwrap();
        prop_assert!(r.variance.iter().all(|&v| v == 0.0));
        prop_assert_eq!(&r.mean, &samples[0]);
    }

    #[test]
    fn embedding_lookup_equals_one_hot_product(seed in any::<u64>(), ids in vec(0usize..7, 1..5)) {
        let mut store = ParamStore::new();
        let table = EmbeddingTable::new(&mut store, "w", 4, 7, &mut RngStream::new(seed, 0));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let looked = table.lookup(&p, &ids).unwrap().value();
        let w = store.get("w.table").unwrap();
        for (r, &id) in ids.iter().enumerate() {
            for j in 0..4 {
                let one_hot: f64 = (0..7).map(|v| w.get2(j, v) * if v == id { 1.0 } else { 0.0 }).sum();
                prop_assert_eq!(looked.get2(r, j), one_hot);
            }
        }
    }

    #[test]
    fn gradient_reversal_negates_and_scales(x in matrix(2, 3, 2.0), gamma in 0.0..4.0f64) {
        let tape = Tape::new();
        let a = tape.leaf(&x);
        let plain = tape.backward(a.tanh().unwrap().mul(&a).unwrap().sum().unwrap()).unwrap().get(a).unwrap();
        let tape = Tape::new();
        let a = tape.leaf(&x);
        let r = gradient_reversal(&a, gamma).unwrap();
        let reversed = tape.backward(r.tanh().unwrap().mul(&r).unwrap().sum().unwrap()).unwrap().get(a).unwrap();
        for (g, h) in plain.data().iter().zip(reversed.data()) {
            prop_assert_eq!(-gamma * g, *h);
        }
    }

    #[test]
    fn metrics_are_bounded_and_reference_order_free(
        cand in vec(0u8..10, 1..7),
        refs in vec(vec(0u8..10, 1..7), 1..4),
    ) {
        let r: Vec<&[u8]> = refs.iter().map(Vec::as_slice).collect();
        let mut rev = r.clone();
        rev.reverse();
        for n in 1..=4 {
            let b = bleu_n(&cand, &r, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert_eq!(b, bleu_n(&cand, &rev, n).unwrap());
        }
        let l = rouge_l(&cand, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert_eq!(l, rouge_l(&cand, &rev).unwrap());
        prop_assert!((rouge_l(&cand, &[&cand]).unwrap() - 1.0).abs() < 1e-12);
        if cand.len() >= 4 {
            prop_assert!((bleu_n(&cand, &[&cand], 4).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_examples_are_reproducible_and_well_formed(seed in any::<u64>(), index in 0usize..10_000) {
        let vocab = synth_vocabulary();
        let lex = synth_tag_lexicon(&vocab);
        let config = SynthConfig::default();
        let (s1, a) = synth_example(seed, index, &config, &vocab, &lex);
        let (s2, b) = synth_example(seed, index, &config, &vocab, &lex);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(s1, s2);
        prop_assert!(a.caption.iter().chain(a.questions.iter().flatten()).all(|&t| t < vocab.len() && t != UNK));
        let question_ids: Vec<usize> = QUESTION_WORDS.iter().map(|w| vocab.id(w)).collect();
        for cat in a.tags.categories() {
            prop_assert_eq!(cat.len(), 5);
        }
        prop_assert!(a.tags.question.iter().all(|t| *t == PAD || question_ids.contains(t)));
        prop_assert_eq!(extract_tags(&a.caption, &lex, &a.questions), a.tags.clone());
        for q in &a.questions {
            prop_assert_eq!(vocab.encode(&vocab.decode(q)), q[..q.len() - 1].to_vec());
        }
    }

    #[test]
    fn configs_survive_a_toml_round_trip(
        seed in any::<u32>(),
        hidden in 1usize..128,
        rate in 0.0..0.95f64,
        lr in 1e-4..1.0f64,
        mixture in any::<bool>(),
        gaussian in any::<bool>(),
        adam in any::<bool>(),
        max_q in proptest::option::of(1usize..6),
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed as u64;
        cfg.model.hidden = hidden;
        cfg.model.dropout.rate = rate;
        cfg.model.dropout.kind = if gaussian { DropoutMode::Gaussian } else { DropoutMode::Bernoulli };
        cfg.model.combiner = if mixture { Combiner::Mixture } else { Combiner::Moderator };
        cfg.optim.learning_rate = lr;
        cfg.optim.kind = if adam { OptimizerKind::Adam } else { OptimizerKind::Sgd };
        cfg.data.max_questions = max_q;
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}
