import numpy as np
import pytest
import torch

from refsr import checkpoint, config
from refsr.config import ConfigError, RunConfig


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    path = cfg.write(tmp_path)
    assert path.name == "config.resolved"
    again = config.load_config(path)
    assert again == cfg and again.config_hash() == cfg.config_hash()


def test_overrides_win():
    cfg = config.load_config(None, {"alpha_kl": "0", "round_targets": "true", "iters": "7"})
    assert cfg.alpha_kl == 0.0 and cfg.round_targets is True and cfg.iters == 7
    assert cfg.train_config().alpha_kl == 0.0
    assert cfg.restoration_config().lambda_adv == 1e-6


def test_rejections(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        config.load_config(None, {"nope": "1"})
    with pytest.raises(ConfigError, match="bad value"):
        config.load_config(None, {"iters": "many"})
    with pytest.raises(ConfigError, match="bad value"):
        config.load_config(None, {"round_targets": "maybe"})
    with pytest.raises(ConfigError, match="not found"):
        config.load_config(tmp_path / "missing.cfg")
    (tmp_path / "bad.cfg").write_text("just words\n")
    with pytest.raises(ConfigError, match="bad.cfg:1"):
        config.load_config(tmp_path / "bad.cfg")
    with pytest.raises(ConfigError):
        config.load_config(None, {"temperature": "0"})
    with pytest.raises(ConfigError):
        config.load_config(None, {"mode": "wild"})


def test_hash_tracks_values():
    assert RunConfig().config_hash() != RunConfig(seed=1).config_hash()


def test_checkpoint_round_trip(tmp_path):
    net = torch.nn.Linear(3, 2)
    path = checkpoint.save_checkpoint(tmp_path / "x.ckpt", {"a": net, "b": {"w": np.arange(4.0)}},
                                      "teacher", 5, "h", n_blocks=2)
    assert path.exists() and not (tmp_path / "x.ckpt.npz").exists()
    states, manifest = checkpoint.load_checkpoint(path)
    assert manifest == {"stage": "teacher", "iteration": 5, "config_hash": "h",
                        "components": ["a", "b"], "n_blocks": 2}
    assert torch.equal(states["a"]["weight"], net.weight.detach())
    assert checkpoint.state_checksum(states["a"]) == checkpoint.state_checksum(net.state_dict())


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        checkpoint.load_checkpoint(tmp_path / "none.ckpt")
