import struct

import numpy as np
import pytest

from hfbrimae.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from hfbrimae.data import featurize, synthetic_dataset
from hfbrimae.errors import ConfigError, DataError
from hfbrimae.mae import HfbriMae, ModelConfig
from hfbrimae.training import pretrain

CFG = dict(embed_dim=16, encoder_blocks=2, decoder_blocks=1, heads=2, n_patches=8,
           points_per_patch=8, token_hidden=(8, 16), pos_hidden=16, cls_hidden=(16, 8),
           seg_hidden=(16, 8), seg_label_dim=8)


@pytest.fixture(scope="module")
def trained():
    m = HfbriMae(ModelConfig(**CFG))
    pretrain(m, synthetic_dataset(per_class=2, n_points=128), epochs=1, batch_size=4, seed=0)
    return m


def test_round_trip_forward_bitwise(tmp_path, trained):
    path = save_checkpoint(tmp_path / "m.hfbm", trained, step=7)
    loaded, meta = load_checkpoint(path)
    assert meta["step"] == 7
    assert meta["fingerprint"] == trained.cfg.fingerprint()
    assert loaded.cfg == trained.cfg
    ds = synthetic_dataset(per_class=1, n_points=128, split="test")
    f = featurize([c.points for c in ds.clouds], 8, 8)
    a, b = trained.eval().classify(f).data, loaded.eval().classify(f).data
    assert a.tobytes() == b.tobytes()
    for (n1, v1), (n2, v2) in zip(trained.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and v1.tobytes() == v2.tobytes()
    # saving the loaded model reproduces the file byte for byte
    again = save_checkpoint(tmp_path / "again.hfbm", loaded, step=7)
    assert again.read_bytes() == path.read_bytes()


def test_running_stats_are_stored(tmp_path, trained):
    _, tensors = read_checkpoint(save_checkpoint(tmp_path / "m.hfbm", trained))
    assert "token_embed.norms.0.running_mean" in tensors
    np.testing.assert_array_equal(tensors["token_embed.norms.0.running_var"],
                                  trained.token_embed.norms[0].running_var)


def test_documented_layout(tmp_path, trained):
    raw = save_checkpoint(tmp_path / "m.hfbm", trained).read_bytes()
    assert raw[:4] == MAGIC
    (version,) = struct.unpack("<H", raw[4:6])
    (n_text,) = struct.unpack("<I", raw[6:10])
    text = raw[10:10 + n_text].decode()
    assert version == 1 and "embed_dim=16" in text.splitlines()
    pos = 10 + n_text
    (n_name,) = struct.unpack("<H", raw[pos:pos + 2])
    name = raw[pos + 2:pos + 2 + n_name].decode()
    rank = raw[pos + 2 + n_name]
    dims = struct.unpack(f"<{rank}I", raw[pos + 3 + n_name:pos + 3 + n_name + 4 * rank])
    first = next(iter(trained.state_dict().items()))
    assert (name, dims) == (first[0], first[1].shape)


def test_bad_files(tmp_path, trained):
    bad = tmp_path / "bad.hfbm"
    bad.write_bytes(b"NOPE")
    with pytest.raises(DataError):
        read_checkpoint(bad)
    good = save_checkpoint(tmp_path / "m.hfbm", trained).read_bytes()
    bad.write_bytes(good[:-3])
    with pytest.raises(DataError):
        read_checkpoint(bad)


def test_config_mismatch_lists_fields(tmp_path, trained):
    path = save_checkpoint(tmp_path / "m.hfbm", trained)
    other = ModelConfig(**{**CFG, "embed_dim": 32, "n_patches": 4})
    with pytest.raises(ConfigError, match="embed_dim.*n_patches"):
        load_checkpoint(path, expect=other)
