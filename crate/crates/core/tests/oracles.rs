mod common;

use oirl::rng::stream;

#[test]
fn returns_and_losses_match_monte_carlo() {
    for c in common::monte_carlo_checks(10, 4000, 0) {
        assert!(c.worst_z < 3.0, "{}: {} standard errors", c.name, c.worst_z);
    }
}

#[test]
fn gae_matches_direct_sum() {
    assert!(common::gae_max_error(200, 0) < 1e-10);
}

#[test]
fn gae_special_cases() {
    // λ = 1 gives Monte-Carlo returns minus values; λ = 0 gives one-step TD errors.
    let r = [1.0, 0.0, 2.0];
    let v = [0.5, 0.25, 1.0];
    let g = 0.9;
    let mc = oirl::ppoc::gae(&r, &v, 0.0, g, 1.0);
    let ret0 = 1.0 + g * 0.0 + g * g * 2.0;
    assert!((mc[0] - (ret0 - 0.5)).abs() < 1e-12);
    let td = oirl::ppoc::gae(&r, &v, 3.0, g, 0.0);
    assert!((td[2] - (2.0 + g * 3.0 - 1.0)).abs() < 1e-12);
    assert!((td[0] - (1.0 + g * 0.25 - 0.5)).abs() < 1e-12);
}

#[test]
fn single_option_return_is_policy_evaluation() {
    // With one option the recursive return reduces to V^π of the flat policy.
    let mut rng = stream(4, 0);
    let mdp = common::random_mdp(&mut rng, 5, 2, 0.85, true);
    let opts = oirl::options::TabularOptions::random(5, 1, 2, &mut rng);
    let per_step = oirl::options::env_reward_table(&mdp, 1);
    let r = oirl::options::discounted_option_return(&mdp, &opts, &per_step).unwrap();
    // Solve (I - γ P_π) v = r_π directly.
    let n = 5;
    let mut a = nalgebra::DMatrix::<f64>::identity(n, n);
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    for s in 0..n {
        if mdp.terminal[s] {
            continue;
        }
        for act in 0..2 {
            let p = opts.pi(s, 0, act);
            b[s] += p * mdp.reward(s, act);
            for t in mdp.row(s, act) {
                if !mdp.terminal[t.next] {
                    a[(s, t.next)] -= mdp.gamma * p * t.prob;
                }
            }
        }
    }
    let v = a.lu().solve(&b).unwrap();
    for s in 0..n {
        assert!((v[s] - r.by_state[s]).abs() < 1e-10);
    }
}
