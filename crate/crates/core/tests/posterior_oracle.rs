mod common;

#[test]
fn gibbs_and_random_walk_metropolis_agree_on_the_tiny_posterior() {
    let p = common::oracle_priors();
    let g = common::gibbs_tiny(p, 400_000, 3);
    let r = common::rwm_oracle(p, 1_000_000, 4);
    for (k, name) in ["sigma_sq", "mu_beta1", "gamma"].iter().enumerate() {
        let se = (g.se[k].powi(2) + r.se[k].powi(2)).sqrt();
        let z = (g.mean[k] - r.mean[k]) / se;
        assert!(z.abs() < 3.0, "{name}: gibbs {} rwm {} z {z:.2}", g.mean[k], r.mean[k]);
    }
}
