import pytest

from tdsnet.config import ConfigError, RunConfig, build_config, load_config, tiny_config


def test_defaults():
    cfg = RunConfig()
    assert (cfg.n_way, cfg.k_shot, cfg.lam, cfg.lr, cfg.topk, cfg.t, cfg.m) == (5, 1, 0.4, 0.001, 3, 20.0, 8)
    assert cfg.feature_hw == 5


def test_precedence_file_env_flag(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("n_way = 3\nk_shot = 2\nlam = 0.1\n")
    cfg = load_config(path, env={"TDSNET_K_SHOT": "4", "TDSNET_LAM": "0.2"}, overrides={"lam": "0.3"})
    assert (cfg.n_way, cfg.k_shot, cfg.lam) == (3, 4, 0.3)


def test_unknown_keys_named(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("nway = 3\n")
    with pytest.raises(ConfigError, match="nway"):
        load_config(path, env={})
    with pytest.raises(ConfigError, match="bogus"):
        build_config(env={"TDSNET_BOGUS": "1"})


def test_coercion_of_flags():
    cfg = build_config(env={}, overrides={"backbone_widths": "8,8", "backbone_pools": "true,false",
                                          "use_lfe": "no", "image_size": "16"})
    assert cfg.backbone_widths == (8, 8) and cfg.backbone_pools == (True, False) and cfg.use_lfe is False


@pytest.mark.parametrize("changes", [dict(hconv="conv5"), dict(n_way=0), dict(topk=10_000),
                                     dict(backbone_widths=(8,), backbone_pools=(True, True)), dict(lr=0.0)])
def test_validation_errors(changes):
    with pytest.raises(ConfigError):
        RunConfig(**changes)


def test_digest_ignores_paths_but_not_numerics():
    a = RunConfig()
    assert a.digest() == a.replace(output_dir="elsewhere", data_root="x").digest()
    assert a.digest() != a.replace(lam=0.0).digest()


def test_tiny_config():
    cfg = tiny_config()
    assert (cfg.n_way, cfg.k_shot, cfg.image_size, cfg.m, cfg.topk, cfg.precision) == (2, 1, 16, 2, 2, "float64")
    assert cfg.backbone_widths == (8, 8) and cfg.feature_hw == 4
