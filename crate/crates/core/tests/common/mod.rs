use hybrid_smpc::config::ExperimentConfig;

pub const SMALL: &str = r#"
[data]
episodes = 1
t_sim = 20.0
target = 300

[mpc]
horizon = 24

[smpc.mpc]
horizon = 12

[gp.training]
restarts = 1
max_iter = 100

[bnn]
epochs = 3

[open_loop]
t_sim = 15.0

[closed_loop]
seeds = [0]
t_sim = 31.0
"#;

pub fn small_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL).expect("small config")
}
