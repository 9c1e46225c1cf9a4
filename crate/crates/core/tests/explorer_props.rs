use noisealign::explorer::{explore, sample_candidates, select_winner, ExplorationConfig, Mode};
use noisealign::generator::{Category, Generator, GeneratorParams};
use noisealign::harness::random_prompt;
use noisealign::optimizer::OptimizerConfig;
use noisealign::rewards::RewardSpec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn candidate_pools_are_prefixes(seed in any::<u64>(), n in 1usize..8, m in 1usize..8, d in 1usize..10) {
        let (lo, hi) = (n.min(m), n.max(m));
        let short = sample_candidates(lo, d, seed);
        let long = sample_candidates(hi, d, seed);
        prop_assert_eq!(&long[..lo], &short[..]);
    }

    #[test]
    fn winner_is_first_maximum(v in prop::collection::vec(0u8..5, 1..12)) {
        let totals: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
        let w = select_winner(&totals).unwrap();
        let max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(totals[w], max);
        prop_assert!(totals[..w].iter().all(|&t| t < max));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn combined_mode_dominates_on_every_prompt(seed in any::<u64>(), cat in 0usize..4) {
        let gen = Generator::Slots(GeneratorParams::init(1, 16, 3, 4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = random_prompt(&mut rng, Category::ALL[cat], 3, 4);
        let specs = RewardSpec::default_set();
        let run = |mode| {
            let cfg = ExplorationConfig {
                candidates: 4,
                master_seed: seed,
                mode,
                optimizer: OptimizerConfig { iters: 10, ..OptimizerConfig::default() },
            };
            explore(&prompt, &gen, &specs, &cfg).unwrap().winner_total
        };
        let (base, x, o, ox) = (run(Mode::Baseline), run(Mode::Carinx), run(Mode::Carino), run(Mode::Carinox));
        prop_assert!(x >= base && o >= base);
        prop_assert!(ox >= x && ox >= o);
    }
}
