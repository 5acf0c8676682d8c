import pytest

from stormig.config import ConfigError, default_profiles, dump_config, load_config
from stormig.simulator import RewardMode


def test_defaults_load():
    cfg = load_config()
    assert cfg.workload.T == 64 and cfg.sim.n_cores == 12
    assert cfg.sim.reward_mode is RewardMode.WORK
    assert cfg.qbn.obs_latent == 16 and cfg.qbn.hidden_latent == 64
    assert len(cfg.profiles) == 12
    assert all(abs(sum(p.mixture) - 1) < 1e-12 for p in default_profiles())


def test_packaged_smoke_overlay():
    cfg = load_config("smoke.ini")
    assert cfg.workload.T == 16 and cfg.train.epochs_real == 400
    assert cfg.sim == load_config().sim


def test_overlay_file_and_fingerprint(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[sim]\ncache_miss_rate = 0.5\n[fsm]\nmetric = cosine\n")
    cfg = load_config(p)
    assert cfg.sim.cache_miss_rate == 0.5 and cfg.fsm_metric == "cosine"
    assert cfg.fingerprint() != load_config().fingerprint()
    assert load_config(p).fingerprint() == cfg.fingerprint()
    assert '"cache_miss_rate": 0.5' in dump_config(cfg)


def test_with_seed():
    cfg = load_config().with_seed(7)
    assert (cfg.workload.seed, cfg.sim.seed, cfg.train.seed, cfg.qbn.seed) == (7, 7, 7, 7)


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("[sim]\nn_cores = many\n", "cannot parse"),
        ("[sim]\ncores = 4\n", "unknown key"),
        ("[simulator]\nx = 1\n", "unknown section"),
        ("[sim]\ncache_miss_rate = 2\n", "[sim]"),
        ("[train]\nkeep_best = maybe\n", "cannot parse"),
        ("[fsm]\nmetric = manhattan\n", "metric"),
        ("[profile:x]\nmixture = q9:1\n", "bad entry"),
        ("[interpret]\nwindow = 0\n", "window"),
        ("not an ini", "not an ini"),
    ],
)
def test_config_errors(tmp_path, text, fragment):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert fragment in str(exc.value) or "bad.ini" in str(exc.value)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.ini")
