mod common;

use oirl::discriminator::{d_prob, extract_reward};
use oirl::rng::stream;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identities_hold_on_random_instances(seed in any::<u64>()) {
        let mut rng = stream(seed, 3);
        let (mdp, opts, per_step) = common::random_instance(&mut rng);
        for id in common::identity_errors(&mdp, &opts, &per_step) {
            prop_assert!(id.ok(), "{}: {:e} > {:e}", id.name, id.max_error, id.tolerance);
        }
    }

    #[test]
    fn discriminator_is_half_at_log_pi(p in 1e-300f64..=1.0) {
        let lp = p.ln();
        prop_assert_eq!(d_prob(lp, lp), 0.5);
        prop_assert_eq!(extract_reward(lp, lp), 0.0);
    }

    #[test]
    fn extracted_reward_is_logit_of_d(lp in -12.0f64..0.0, dz in -12.0f64..12.0) {
        // Beyond |f - log π| ≈ 12, 1 - D itself carries too few digits.
        let f = lp + dz;
        let d = d_prob(lp, f);
        prop_assert!((d.ln() - (1.0 - d).ln() - extract_reward(lp, f)).abs() < 1e-9);
        prop_assert!(d > 0.0 && d < 1.0);
    }
}

#[test]
fn initiation_masks_keep_kernels_normalized() {
    let mut rng = stream(11, 0);
    let mdp = common::random_mdp(&mut rng, 5, 2, 0.8, true);
    let k = 3;
    let mut mask = vec![true; 5 * k];
    mask[0] = false;
    mask[k + 1] = false;
    mask[2 * k] = false;
    mask[2 * k + 2] = false;
    let opts = oirl::options::TabularOptions::random(5, k, 2, &mut rng).with_initiation(mask).unwrap();
    let per_step = vec![0.5; k * 5 * 2];
    for id in common::identity_errors(&mdp, &opts, &per_step) {
        assert!(id.ok(), "{}: {:e}", id.name, id.max_error);
    }
    assert_eq!(opts.master_probs(0)[0], 0.0);
}
