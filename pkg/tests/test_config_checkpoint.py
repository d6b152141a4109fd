import struct

import numpy as np
import pytest

from finegrain.checkpoint import (
    CheckpointError, CheckpointVersionError, checkpoint_bytes, load_checkpoint, save_checkpoint,
)
from finegrain.config import RunConfig, preset
from finegrain.finet import build_finet
from finegrain.fusion import fuse_model
from finegrain.norm import ConfigError, GroupSpec
from finegrain.tensor import Rng, Tensor


def test_config_text_round_trip():
    cfg = RunConfig(variant="large", groups=4, use_se=True, lr=0.05, milestones="3,7")
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_config_rejects_unknown_keys_and_values():
    with pytest.raises(ConfigError):
        RunConfig.from_text("nonsense=1\n")
    with pytest.raises(ConfigError):
        RunConfig().updated({"groups": "four"})
    with pytest.raises(ConfigError):
        RunConfig(variant="huge")


def test_presets():
    assert preset("cifar").epochs == 200
    assert preset("imagenet").schedule == "linear"
    with pytest.raises(ConfigError):
        preset("nope")


def test_group_spec_from_config():
    assert RunConfig(channels_per_group=20).group_spec == GroupSpec.channels_per_group(20)
    assert RunConfig(groups=4).group_spec == GroupSpec.fixed_groups(4)


def trained_like(seed=0, **kw):
    net = build_finet("small", cifar_adapted=True, num_classes=10, seed=seed, **kw)
    rng = Rng(seed + 50)
    for _, s in net.named_norm_states():
        s.running_mean = rng.normal(s.running_mean.shape, 0, 0.1)
        s.running_var = rng.uniform(s.running_var.shape, 0.5, 1.5)
    return net


@pytest.mark.parametrize("fused", [False, True])
def test_checkpoint_round_trip_is_byte_identical(tmp_path, fused):
    net = trained_like(group_spec=GroupSpec.fixed_groups(4), use_se=True)
    if fused:
        net = fuse_model(net.eval())
    cfg = RunConfig(groups=4, use_se=True)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, net, cfg)
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert checkpoint_bytes(loaded, cfg2) == path.read_bytes()
    x = Tensor(Rng(0).normal((2, 3, 32, 32)))
    assert np.array_equal(net.eval()(x).data, loaded.eval()(x).data)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_version_mismatch(tmp_path):
    raw = bytearray(checkpoint_bytes(trained_like(), RunConfig()))
    raw[4:8] = struct.pack("<I", 99)
    p = tmp_path / "v.ckpt"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)


def test_truncated_tensor_data(tmp_path):
    raw = checkpoint_bytes(trained_like(), RunConfig())
    p = tmp_path / "t.ckpt"
    p.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")
