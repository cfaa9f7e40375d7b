use hybrid_smpc::mpc::{solve_ocp, DiscreteModel, MpcConfig, MpcController, ShootingOcp};
use hybrid_smpc::plant::{step_true_plant, DisturbanceModel, PlantParams, State};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn warm_start_needs_no_more_iterations_than_cold() {
    let params = PlantParams::default();
    let config = MpcConfig::default();
    let model = DiscreteModel::nominal(&params, config.dt);
    let mut ctrl = MpcController::new(config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draw = DisturbanceModel::default().sample(&mut rng);
    let mut x = State::new(0.2, 0.0);
    let (mut fewer, mut steps) = (0, 0);
    for k in 0..120 {
        let t = k as f64 * config.dt;
        let s_f = hybrid_smpc::plant::influent_substrate(t, &draw);
        let band = vec![None; config.horizon];
        let cold_ocp = ShootingOcp::new(&config, x, ctrl.u_prev, s_f, &model, band.clone());
        let (u, xs) = ctrl.cold_guess(&x.to_vector());
        let cold = solve_ocp(&cold_ocp, &cold_ocp.initial_guess(&u, &xs), &ctrl.options());
        let (warm, _) = ctrl.step(&model, x, s_f, band);
        steps += 1;
        if warm.iterations <= cold.iterations {
            fewer += 1;
        }
        assert!((0.0..=2.0).contains(&warm.applied_input));
        x = step_true_plant(
            &params,
            x,
            warm.applied_input,
            t,
            config.dt,
            &draw,
            &mut rng,
        )
        .unwrap();
    }
    assert!(
        fewer as f64 >= 0.8 * steps as f64,
        "warm <= cold on {fewer} of {steps} steps"
    );
}
