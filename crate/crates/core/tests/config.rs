use motiondiff::config::RunConfig;
use proptest::prelude::*;

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

prop_compose! {
    fn valid_config()(
        world_seed in any::<u64>(),
        noise in finite(0.0, 0.5),
        lag in 0usize..6,
        lips in prop::sample::subsequence((0..16usize).collect::<Vec<_>>(), 1..8),
        layers in 1usize..4,
        heads in 1usize..5,
        width in 1usize..8,
        (window, overlap) in (2usize..64).prop_flat_map(|w| (Just(w), 1..w)),
        t in 10usize..2000,
        lr in finite(1e-6, 1e-1),
        batch in 1usize..128,
        lambdas in prop::array::uniform5(finite(0.0, 4.0)),
        steps_frac in finite(0.0, 1.0),
        dropout in prop::array::uniform3(finite(0.0, 1.0)),
        capp_seconds in finite(0.1, 10.0),
        root in "[a-z/]{0,12}",
    ) -> RunConfig {
        let mut c = RunConfig::default();
        c.world.seed = world_seed;
        c.world.noise_level = noise;
        c.world.lag = lag;
        c.world.lip_channels = lips;
        c.denoiser.layers = layers;
        c.denoiser.heads = heads;
        c.denoiser.embed_dim = 2 * heads * width;
        c.denoiser.window = window;
        c.denoiser.overlap = overlap;
        c.schedule.steps = t;
        c.train.lr = lr;
        c.train.batch_size = batch;
        c.generation.lambda_a = lambdas[0];
        c.generation.lambda_g = lambdas[1];
        c.generation.lambda_d = lambdas[2];
        c.generation.lambda_e = lambdas[3];
        c.generation.lambda_pre = lambdas[4];
        c.generation.steps = 1 + (steps_frac * (t - 1) as f64) as usize;
        c.dropout.condition = dropout[0];
        c.dropout.carry = dropout[1];
        c.dropout.audio_tail = dropout[2];
        c.capp.seconds = capp_seconds;
        c.paths.data_root = root;
        c
    }
}

proptest! {
    #[test]
    fn config_round_trips(cfg in valid_config()) {
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn default_config_emits_every_section() {
    let text = RunConfig::default().to_toml().unwrap();
    for s in ["[world]", "[dataset]", "[denoiser]", "[schedule]", "[train]", "[dropout]", "[capp]", "[generation]", "[eval]", "[paths]"] {
        assert!(text.contains(s), "{s} missing from\n{text}");
    }
}
