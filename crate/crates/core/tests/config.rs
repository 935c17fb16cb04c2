use oel::config::*;
use oel::knowledge::KnowledgeFormat;
use oel::textgames::Game;
use proptest::prelude::*;

fn repo_config(name: &str) -> String {
    std::fs::read_to_string(format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn shipped_configs_parse() {
    let toy = OelConfig::from_toml(&repo_config("fz_toy.cfg")).unwrap();
    assert_eq!(toy.game, Game::FrozenLake);
    assert_eq!((toy.rounds, toy.extraction.n, toy.extraction.k, toy.extraction.l_max), (3, 15, 10, 2048));
    assert_eq!(toy.extraction.format, KnowledgeFormat::Unstructured);
    assert_eq!(toy.extraction.extractor, ExtractorKind::Scripted);
    assert_eq!((toy.distill.steps, toy.distill.games_per_step, toy.distill.topk), (20, 64, 256));
    assert_eq!((toy.eval.num_maps, toy.eval.num_seeds), (128, 10));
    let d = toy.distill_config();
    assert_eq!(d.trajectories_needed(), 1280);
    let remote = OelConfig::from_toml(&repo_config("fz_remote.cfg")).unwrap();
    assert_eq!(remote.backend.kind, BackendKind::Remote);
}

#[test]
fn default_round_trips_through_toml() {
    let c = OelConfig::default();
    assert_eq!(OelConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert_eq!(OelConfig::from_toml("").unwrap(), c);
}

#[test]
fn parse_errors_name_the_field() {
    match OelConfig::from_toml("[distill]\nsteps = \"many\"\n") {
        Err(ConfigError::Parse { field, .. }) => assert_eq!(field, "distill.steps"),
        other => panic!("{other:?}"),
    }
    match OelConfig::from_toml("[extraction]\nbogus = 1\n") {
        Err(ConfigError::Parse { field, message }) => {
            assert_eq!(field, "extraction.bogus");
            assert!(message.contains("bogus"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(OelConfig::from_toml("game = \"chess\""), Err(ConfigError::Parse { .. })));
}

#[test]
fn invalid_values_are_rejected() {
    for (text, field) in [
        ("rounds = 0", "rounds"),
        ("[extraction]\nk = 0", "extraction.k"),
        ("[distill]\nlearning_rate = -0.5", "distill.learning_rate"),
        ("[eval]\nnum_seeds = 0", "eval.num_seeds"),
        ("[backend]\nkind = \"remote\"\nendpoint = \"\"", "backend.endpoint"),
    ] {
        match OelConfig::from_toml(text) {
            Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{text}: {other:?}"),
        }
    }
    let huge = OelConfig { seed: u64::MAX, ..OelConfig::default() };
    assert!(matches!(huge.validate(), Err(ConfigError::Invalid { field, .. }) if field == "seed"));
    assert!(matches!(OelConfig::load("/nonexistent/x.cfg".as_ref()), Err(ConfigError::Read { .. })));
}

#[test]
fn hash_tracks_content() {
    let a = OelConfig::default();
    let b = OelConfig { seed: a.seed + 1, ..a.clone() };
    assert_eq!(a.hash(), OelConfig::default().hash());
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

proptest! {
    #[test]
    fn valid_configs_round_trip(rounds in 1usize..10, n in 1usize..40, k in 1usize..12, steps in 0usize..30,
                                lr in 1e-6f64..1.0, seed in 0..=i64::MAX as u64, sokoban in any::<bool>()) {
        let mut c = OelConfig { rounds, seed, ..OelConfig::default() };
        c.game = if sokoban { Game::Sokoban } else { Game::FrozenLake };
        c.extraction.n = n;
        c.extraction.k = k;
        c.distill.steps = steps;
        c.distill.learning_rate = lr;
        let back = OelConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}
