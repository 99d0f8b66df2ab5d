use proptest::prelude::*;
use rand::Rng;

use comdad::bridge::{inject, Encoders};
use comdad::config::ExperimentConfig;
use comdad::datagen::{gen_corpus, CorpusCounts, Split, ToyWorld, WorldConfig, UNPAIRED};
use comdad::discrete::{corrupt, reverse_step, sample, CorruptionState, SamplerSettings, TokenSequence, UnmaskPolicy, MASK};
use comdad::eval::{bleu_n, decode_cost};
use comdad::latent::{latent_loss, standard_normal};
use comdad::modality::Modality;
use comdad::nets::{DiscreteDenoiser, DiscreteDenoiserConfig, EpsDenoiser, Injection};
use comdad::rng;
use comdad::schedules::{MaskKind, NoiseSchedule};
use comdad::tensor::{Graph, ParamStore, Tensor};
use comdad::trainer::init_discrete;

fn schedule(cosine: bool) -> NoiseSchedule {
    NoiseSchedule { kind: if cosine { MaskKind::Cosine } else { MaskKind::Linear }, ..Default::default() }
}

fn tiny_denoiser(vocab: usize, max_len: usize) -> DiscreteDenoiser {
    DiscreteDenoiser::new(DiscreteDenoiserConfig {
        layers: 1,
        heads: 2,
        width: 8,
        ff_width: 8,
        text_vocab: vocab,
        image_vocab: vocab,
        max_len,
        semantic_dim: 4,
        ..Default::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut r = rng::stream(seed, "prop.softmax");
        let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-30.0..30.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax(x).unwrap();
        for row in g.value(s).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_over_summed_graphs(seed in any::<u64>(), n in 1usize..6) {
        let mut r = rng::stream(seed, "prop.linearity");
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![n], (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()).unwrap();
        let c: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let grads = |which: u8| -> Vec<f64> {
            let mut g = Graph::new();
            let w = g.param(&store, "w").unwrap();
            let k = g.constant(Tensor::new(vec![n], c.clone()).unwrap());
            let f = { let sq = g.mul(w, w).unwrap(); g.sum(sq).unwrap() };
            let h = { let t = g.tanh(w).unwrap(); let p = g.mul(t, k).unwrap(); g.sum(p).unwrap() };
            let out = match which { 0 => f, 1 => h, _ => g.add(f, h).unwrap() };
            g.gradients(out).unwrap().wrt(w).unwrap().to_vec()
        };
        let (a, b, both) = (grads(0), grads(1), grads(2));
        for i in 0..n {
            prop_assert!((a[i] + b[i] - both[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_is_monotone(s in 0.0f64..=1.0, t in 0.0f64..=1.0, cosine in any::<bool>()) {
        let (s, t) = if s <= t { (s, t) } else { (t, s) };
        let sch = schedule(cosine);
        prop_assert!(sch.gamma_at(s).unwrap() <= sch.gamma_at(t).unwrap());
    }

    #[test]
    fn budget_sums_to_length_without_zeros(len in 1usize..300, steps in 1usize..300, cosine in any::<bool>()) {
        prop_assume!(steps <= len);
        let b = schedule(cosine).unmask_budget(len, steps).unwrap();
        prop_assert_eq!(b.len(), steps);
        prop_assert_eq!(b.iter().sum::<usize>(), len);
        prop_assert!(b.iter().all(|&c| c > 0));
    }

    #[test]
    fn alpha_bar_times_exp_integral_is_one(t in 0.0f64..=1.0) {
        let sch = NoiseSchedule::default();
        // Midpoint rule, independent of the closed form.
        let n = 20_000;
        let h = t / n as f64;
        let integral: f64 = (0..n).map(|i| sch.beta_at((i as f64 + 0.5) * h).unwrap() * h).sum();
        prop_assert!((sch.alpha_bar_at(t).unwrap() * integral.exp() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn reverse_step_keeps_committed_positions(seed in any::<u64>(), t in 0.05f64..0.95, budget in 1usize..4) {
        let (vocab, len) = (5u32, 6usize);
        let den = tiny_denoiser(vocab as usize, len);
        let store = init_discrete(&den, seed).unwrap();
        let mut r = rng::stream(seed, "prop.reverse");
        let x = TokenSequence::new((0..len).map(|_| r.gen_range(0..vocab)).collect(), Modality::Text, vocab).unwrap();
        let mut st = corrupt(&x, t, &NoiseSchedule::default(), &mut r).unwrap();
        prop_assume!(st.mask_set.len() >= budget);
        let before = st.clone();
        let settings = SamplerSettings { steps: 2, policy: UnmaskPolicy::Random, temperature: 1.0, injection: Injection::Absent };
        let rec = reverse_step(&den, &store, &mut st, None, budget, t / 2.0, &settings, &mut r).unwrap();
        prop_assert_eq!(rec.positions.len(), budget);
        for p in 0..len {
            if !before.mask_set.contains(&p) {
                prop_assert_eq!(st.corrupted.tokens()[p], before.corrupted.tokens()[p]);
            }
        }
        prop_assert_eq!(st.mask_set.len(), before.mask_set.len() - budget);
        st.validate().unwrap();
    }

    #[test]
    fn identical_seeds_replay_identically(seed in any::<u64>(), steps in 1usize..5, policy in 0u8..3) {
        let den = tiny_denoiser(6, 4);
        let store = init_discrete(&den, 1).unwrap();
        let policy = [UnmaskPolicy::Confidence, UnmaskPolicy::Random, UnmaskPolicy::LeftToRight][policy as usize];
        let settings = SamplerSettings { steps, policy, temperature: 1.0, injection: Injection::Absent };
        let run = || sample(&den, &store, &NoiseSchedule::default(), Modality::Text, 4, None, &settings, &mut rng::stream(seed, "prop.replay")).unwrap();
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn decode_cost_is_independent_of_weights(init in any::<u64>(), steps in 1usize..9) {
        let den = tiny_denoiser(6, 8);
        let store = init_discrete(&den, init).unwrap();
        let settings = SamplerSettings { steps, policy: UnmaskPolicy::Confidence, temperature: 1.0, injection: Injection::Absent };
        let run = sample(&den, &store, &NoiseSchedule::default(), Modality::Text, 8, None, &settings, &mut rng::stream(init, "prop.cost")).unwrap();
        let cost = decode_cost(&run);
        prop_assert_eq!(cost.evaluations, steps);
        prop_assert_eq!(cost.tokens, 8);
    }

    #[test]
    fn bleu_is_bounded_and_monotone_under_exact_matches(seed in any::<u64>(), n in 1usize..5, extra in 1usize..4) {
        let mut r = rng::stream(seed, "prop.bleu");
        let mut seq = |len: usize| -> Vec<u32> { (0..len).map(|_| r.gen_range(0..6)).collect() };
        let cands: Vec<Vec<u32>> = (0..3).map(|_| seq(8)).collect();
        let refs: Vec<Vec<u32>> = (0..3).map(|_| seq(8)).collect();
        let c: Vec<&[u32]> = cands.iter().map(|v| v.as_slice()).collect();
        let rs: Vec<Vec<&[u32]>> = refs.iter().map(|v| vec![v.as_slice()]).collect();
        let base = bleu_n(&c, &rs, n).unwrap();
        prop_assert!((0.0..=100.0).contains(&base));
        let mut c2 = c.clone();
        let mut rs2 = rs.clone();
        for _ in 0..extra {
            c2.push(refs[0].as_slice());
            rs2.push(vec![refs[0].as_slice()]);
        }
        let more = bleu_n(&c2, &rs2, n).unwrap();
        prop_assert!((0.0..=100.0).contains(&more));
        prop_assert!(more >= base - 1e-9);
    }

    #[test]
    fn inject_leaves_token_embeddings_alone(batch in 1usize..4, len in 1usize..6, width in 1usize..5, seed in any::<u64>()) {
        let mut r = rng::stream(seed, "prop.inject");
        let emb: Vec<f64> = (0..batch * len * width).map(|_| r.gen_range(-1.0..1.0)).collect();
        let slot: Vec<f64> = (0..batch * width).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![batch * len, width], emb.clone()).unwrap());
        let s = g.constant(Tensor::new(vec![batch, width], slot.clone()).unwrap());
        let out = inject(&mut g, s, e, batch, len).unwrap();
        let v = g.value(out);
        for b in 0..batch {
            let row = |p: usize| &v[(b * (len + 1) + p) * width..(b * (len + 1) + p + 1) * width];
            prop_assert_eq!(row(0), &slot[b * width..(b + 1) * width]);
            for p in 0..len {
                prop_assert_eq!(row(p + 1), &emb[(b * len + p) * width..(b * len + p + 1) * width]);
            }
        }
    }

    #[test]
    fn config_echo_round_trips(seed in 0u64..(i64::MAX as u64), iters in 1usize..10_000, steps in 1usize..16, cosine in any::<bool>()) {
        let overrides = vec![
            format!("seed={seed}"),
            format!("stage2.iterations={iters}"),
            format!("eval.steps={steps}"),
            format!("schedule.kind={:?}", if cosine { "cosine" } else { "linear" }),
        ];
        let cfg = ExperimentConfig::from_toml_str("", &overrides).unwrap().resolved().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap().resolved().unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.run_id(), cfg.run_id());
    }
}

/// Zero-prediction and exact-prediction stand-ins for the latent denoiser.
struct Fixed {
    d: usize,
    eps: Option<Vec<f64>>,
}

impl EpsDenoiser for Fixed {
    fn dim(&self) -> usize {
        self.d
    }

    fn predict(&self, g: &mut Graph, _: &ParamStore, r_t: comdad::tensor::Var, times: &[f64], _: &[Modality]) -> comdad::tensor::Result<comdad::tensor::Var> {
        let _ = r_t;
        let v = self.eps.clone().unwrap_or_else(|| vec![0.3; times.len() * self.d]);
        Ok(g.constant(Tensor::new(vec![times.len(), self.d], v)?))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn latent_loss_is_non_negative_and_zero_at_truth(seed in any::<u64>(), b in 1usize..5, d in 1usize..6) {
        let mut r = rng::stream(seed, "prop.latent");
        let r0 = standard_normal(&mut r, b * d);
        let eps = standard_normal(&mut r, b * d);
        let times: Vec<f64> = (0..b).map(|_| r.gen_range(0.01..1.0)).collect();
        let modality = vec![Modality::Text; b];
        let sch = NoiseSchedule::default();
        let loss = |den: &Fixed| {
            let mut g = Graph::new();
            let l = latent_loss(den, &mut g, &ParamStore::new(), &sch, &r0, &modality, &times, &eps).unwrap();
            g.scalar(l)
        };
        let zero = Fixed { d, eps: None };
        let exact = Fixed { d, eps: Some(eps.clone()) };
        prop_assert!(loss(&zero) > 0.0);
        prop_assert_eq!(loss(&exact), 0.0);
    }
}

#[test]
fn composed_corruption_matches_direct_marginal() {
    // Mask at s, then extend to t by masking survivors with probability
    // (gamma(t) - gamma(s)) / (1 - gamma(s)). Survival must match 1 - gamma(t)
    // and masked positions must stay masked.
    let sch = NoiseSchedule::default();
    let x = TokenSequence::new(vec![2; 100], Modality::Text, 4).unwrap();
    let (s, t) = (0.3, 0.7);
    let (gs, gt) = (sch.gamma_at(s).unwrap(), sch.gamma_at(t).unwrap());
    let extend = (gt - gs) / (1.0 - gs);
    let mut r = rng::stream(5, "prop.compose");
    let mut masked = 0usize;
    let trials = 200;
    for _ in 0..trials {
        let first = corrupt(&x, s, &sch, &mut r).unwrap();
        let mut tokens = first.corrupted.tokens().to_vec();
        for tok in tokens.iter_mut() {
            if *tok != MASK && r.gen::<f64>() < extend {
                *tok = MASK;
            }
        }
        for &p in &first.mask_set {
            assert_eq!(tokens[p], MASK);
        }
        masked += tokens.iter().filter(|&&v| v == MASK).count();
    }
    let n = (trials * x.len()) as f64;
    let z = (masked as f64 / n - gt).abs() / (gt * (1.0 - gt) / n).sqrt();
    assert!(z <= 3.0, "z = {z}");
}

#[test]
fn forward_masking_rate_within_three_sigma_at_spec_times() {
    let x = TokenSequence::new(vec![1; 100], Modality::Text, 4).unwrap();
    for (i, t) in [0.1, 0.25, 0.5, 0.75, 0.9].into_iter().enumerate() {
        let sch = NoiseSchedule::default();
        let mut r = rng::substream(8, "prop.rate", i as u64);
        let mut masked = 0;
        for _ in 0..100 {
            let st: CorruptionState = corrupt(&x, t, &sch, &mut r).unwrap();
            masked += st.mask_set.len();
        }
        let g = sch.gamma_at(t).unwrap();
        let z = (masked as f64 / 10_000.0 - g).abs() / (g * (1.0 - g) / 10_000.0).sqrt();
        assert!(z <= 3.0, "t = {t}: z = {z}");
    }
}

#[test]
fn pairs_share_factors_and_fillers_carry_no_factor() {
    let world = ToyWorld::new(WorldConfig::default()).unwrap();
    let corpus = gen_corpus(&world, CorpusCounts::default(), 3).unwrap();
    for split in [Split::Train, Split::Heldout] {
        for (t, i) in corpus.pairs(split) {
            assert_eq!(corpus.records[t].factor, corpus.records[i].factor);
            assert_ne!(corpus.records[t].pair_id, UNPAIRED);
        }
    }

    // Chi-square test of filler token against factor on text records.
    let vocab = world.vocab(Modality::Text);
    let k = world.num_factors();
    let mut table = vec![vec![0f64; vocab]; k];
    let mut r = rng::stream(4, "prop.chi");
    for f in 0..k {
        for _ in 0..1000 {
            let x = world.render(Modality::Text, f, &mut r);
            for (p, &tok) in x.tokens().iter().enumerate() {
                if !world.is_content(Modality::Text, p) {
                    table[f][tok as usize] += 1.0;
                }
            }
        }
    }
    let used: Vec<usize> = (0..vocab).filter(|&v| table.iter().any(|row| row[v] > 0.0)).collect();
    let total: f64 = table.iter().flatten().sum();
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let mut chi2 = 0.0;
    for (f, row) in table.iter().enumerate() {
        for &v in &used {
            let col: f64 = table.iter().map(|row| row[v]).sum();
            let expected = row_sums[f] * col / total;
            chi2 += (row[v] - expected).powi(2) / expected;
        }
    }
    let df = ((k - 1) * (used.len() - 1)) as f64;
    let p = 1.0 - statrs::distribution::ContinuousCDF::cdf(&statrs::distribution::ChiSquared::new(df).unwrap(), chi2);
    assert!(p > 0.01, "chi2 {chi2:.1} on {df} df, p = {p:.4}");
}

#[test]
fn encoders_have_no_trainable_parameters() {
    // Encoders own their projections; nothing they use lives in a store.
    let enc = Encoders::new(8, 8, 4, 3, 1);
    let x = TokenSequence::new(vec![1, 2, 3, 4], Modality::Text, 8).unwrap();
    let a = enc.encode(&x).unwrap();
    let b = Encoders::new(8, 8, 4, 3, 1).encode(&x).unwrap();
    assert_eq!(a, b);
}
