use negctrl::identify::{
    bridge_row, coarsen_dataset, empirical_matrices, enumerate_coarsenings, gmm_combine, observed_matrices,
    set_partitions, BridgeSolver,
};
use negctrl::simulate::DgpSpec;
use negctrl::{
    ate_by_identification, ate_by_reparameterization, estimate, infer_latent_cardinality, read_dataset, ColumnRoles,
    Dataset, DesignedData, DiscreteLaw, EstimatorKind, EstimatorOptions, ModelSpec,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn sample_law(law: &DiscreteLaw, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let px = WeightedIndex::new(&law.p_x).unwrap();
    let mut csv = String::from("Y,A,Z,W,x\n");
    for _ in 0..n {
        let x = px.sample(&mut rng);
        let cell = WeightedIndex::new(&law.p_az_given_x[x]).unwrap().sample(&mut rng);
        let (a, z) = (cell / law.n_z, cell % law.n_z);
        let u = WeightedIndex::new(&law.p_u_given_azx[x][cell]).unwrap().sample(&mut rng);
        let w = WeightedIndex::new(&law.p_w_given_ux[x][u]).unwrap().sample(&mut rng);
        let y = u8::from(rng.random::<f64>() < law.y_given_aux[x][u][a]);
        csv.push_str(&format!("{y},{a},{z},{w},{x}\n"));
    }
    read_dataset(csv.as_bytes(), &ColumnRoles::standard(&["x"])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identification_recovers_latent_ate(seed in any::<u64>(), k in 2usize..=4, nx in 1usize..=3) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let law = DiscreteLaw::random_well_conditioned(&mut rng, k, nx, k, k, 0.05, 1e4);
        let m = observed_matrices(&law);
        let truth = law.latent_ate();
        prop_assert!((ate_by_identification(&m, 1e-8).unwrap().delta - truth).abs() < 1e-9);
        prop_assert!((ate_by_reparameterization(&m).unwrap().delta - truth).abs() < 1e-9);
    }

    #[test]
    fn reparameterization_splits_into_its_parts(seed in any::<u64>(), k in 2usize..=3) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let law = DiscreteLaw::random_well_conditioned(&mut rng, k, 2, k, k, 0.05, 1e4);
        let r = ate_by_reparameterization(&observed_matrices(&law)).unwrap();
        prop_assert!((r.confounded - r.bias - r.delta).abs() < 1e-14);
    }

    #[test]
    fn rank_equals_latent_levels_with_surplus_controls(seed in any::<u64>(), nu in 1usize..=3, extra_z in 0usize..=2, extra_w in 0usize..=2) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let law = DiscreteLaw::random_well_conditioned(&mut rng, nu, 2, nu + extra_z + 1, nu + extra_w + 1, 0.05, 1e4);
        prop_assert_eq!(infer_latent_cardinality(&observed_matrices(&law), 1e-8).unwrap(), nu);
    }

    #[test]
    fn bridge_row_solves_square_systems(seed in any::<u64>(), k in 1usize..=5) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = DMatrix::from_fn(k, k, |r, c| if r == c { 1.0 } else { 0.0 } + 0.3 * rng.random::<f64>());
        let h = DVector::from_fn(k, |_, _| rng.random::<f64>());
        let y = p.transpose() * &h;
        let (got, _, residual) = bridge_row(&y, &p, 1e-8).unwrap();
        prop_assert!((got - h).amax() < 1e-10);
        prop_assert!(residual < 1e-12);
    }
}

#[test]
fn simulation_law_is_identified() {
    let spec = DgpSpec::standard(1, 0);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let xs: Vec<Vec<f64>> = (0..25).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
    let law = spec.discrete_law(&xs);
    law.validate().unwrap();
    let m = observed_matrices(&law);
    let truth = law.latent_ate();
    let mean_u: f64 = (0..law.n_x).map(|x| law.p_u_given_x(x)[1]).sum::<f64>() / law.n_x as f64;
    assert!((truth - (spec.y_a + spec.y_au * mean_u)).abs() < 1e-15);
    assert!((ate_by_identification(&m, 1e-8).unwrap().delta - truth).abs() < 1e-10);
    assert!((ate_by_reparameterization(&m).unwrap().delta - truth).abs() < 1e-10);
}

#[test]
fn rank_deficient_bridge_falls_back_to_pseudoinverse() {
    let p = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.5, 0.3, 0.3, 0.3, 0.2, 0.2, 0.2]);
    let y = DVector::from_vec(vec![0.4, 0.4, 0.4]);
    let (h, solver, residual) = bridge_row(&y, &p, 1e-8).unwrap();
    assert_eq!(solver, BridgeSolver::Pseudoinverse);
    assert!(residual < 1e-12);
    let min_norm = DVector::from_vec(vec![0.5, 0.3, 0.2]) * (0.4 / 0.38);
    assert!((h - min_norm).amax() < 1e-12);
}

#[test]
fn inconsistent_bridge_is_an_error() {
    let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
    let y = DVector::from_vec(vec![0.1, 0.9]);
    assert!(bridge_row(&y, &p, 1e-8).is_err());
}

#[test]
fn partitions_cover_every_labelling_once() {
    let parts = set_partitions(5, 3);
    assert_eq!(parts.len(), 25);
    for p in &parts {
        assert_eq!(p[0], 0);
        assert_eq!(*p.iter().max().unwrap(), 2);
    }
    let mut sorted = parts.clone();
    sorted.dedup();
    assert_eq!(sorted.len(), parts.len());
}

#[test]
fn empirical_identification_converges() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let law = DiscreteLaw::random_well_conditioned(&mut rng, 2, 2, 2, 2, 0.1, 20.0);
    let data = sample_law(&law, 200_000, 3);
    let m = empirical_matrices(&data).unwrap();
    let got = ate_by_identification(&m, 1e-8).unwrap().delta;
    assert!((got - law.latent_ate()).abs() < 0.05, "{got} vs {}", law.latent_ate());
}

#[test]
fn coarsening_merges_levels_and_gmm_weights_sum_to_one() {
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let law = DiscreteLaw::random_well_conditioned(&mut rng, 2, 2, 3, 3, 0.1, 50.0);
    let data = sample_law(&law, 20_000, 4);
    let cs = enumerate_coarsenings(&data.z_coding, &data.w_coding, 2).unwrap();
    assert_eq!(cs.len(), 9);
    let c = coarsen_dataset(&data, &cs[1]).unwrap();
    assert_eq!(c.z_coding.levels, vec!["0+1", "2"]);
    assert_eq!(c.w_coding.levels, vec!["0+2", "1"]);
    assert_eq!(c.n(), data.n());
    assert!(enumerate_coarsenings(&data.z_coding, &data.w_coding, 4).is_err());

    let spec = ModelSpec::saturated(&data.covariate_names);
    let opts = EstimatorOptions::default();
    let g = gmm_combine(&data, &spec, &cs, EstimatorKind::Mr, &opts).unwrap();
    assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(g.per_coarsening.len(), 9);
    assert!(g.se > 0.0);

    let one = gmm_combine(&data, &spec, &cs[..1], EstimatorKind::Mr, &opts).unwrap();
    let cd = coarsen_dataset(&data, &cs[0]).unwrap();
    let direct = estimate(&DesignedData::new(&cd, &spec).unwrap(), EstimatorKind::Mr, &opts).unwrap();
    assert!((one.estimate - direct.report.estimate).abs() < 1e-12);
    assert!((one.se - direct.report.se.unwrap()).abs() < 1e-6 * direct.report.se.unwrap());
}
