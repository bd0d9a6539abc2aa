import math

import numpy as np
import pytest

from hfbrimae.data import synthetic_dataset
from hfbrimae.errors import DataError, NumericError
from hfbrimae.mae import HfbriMae, ModelConfig
from hfbrimae.training import evaluate, finetune, global_features, pretrain

SMALL = dict(embed_dim=16, encoder_blocks=2, decoder_blocks=1, heads=2, n_patches=8,
             points_per_patch=8, token_hidden=(8, 16), pos_hidden=16, cls_hidden=(16, 8),
             seg_hidden=(16, 8), seg_label_dim=8)


def model(**kw):
    return HfbriMae(ModelConfig(**{**SMALL, **kw}))


@pytest.fixture(scope="module")
def tiny():
    return synthetic_dataset(per_class=3, n_points=96, seed=1)


def state_bytes(m):
    return {k: v.tobytes() for k, v in m.state_dict().items()}


def test_pretrain_is_deterministic(tiny):
    a, b = model(), model()
    ha = pretrain(a, tiny, epochs=2, batch_size=4, seed=3)
    hb = pretrain(b, tiny, epochs=2, batch_size=4, seed=3)
    assert [(r.epoch, r.mean_loss, r.lr) for r in ha] == [(r.epoch, r.mean_loss, r.lr) for r in hb]
    assert state_bytes(a) == state_bytes(b)
    c = model()
    pretrain(c, tiny, epochs=2, batch_size=4, seed=4)
    assert state_bytes(a) != state_bytes(c)


def test_pretrain_records_and_checkpoints(tiny, tmp_path):
    seen = []
    hist = pretrain(model(), tiny, epochs=2, batch_size=6, checkpoint_every=1,
                    checkpoint_dir=tmp_path, on_epoch=seen.append)
    assert [r.epoch for r in hist] == [1, 2] and seen == hist
    assert all(math.isfinite(r.mean_loss) and r.wall_seconds >= 0 for r in hist)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "checkpoint_epoch0001.hfbm", "checkpoint_epoch0002.hfbm"]


def test_nan_loss_names_step(tiny):
    m = model()
    # poison the first parameter once epoch 1 finishes

    def poison(rec):
        m.parameters()[0].data[...] = np.nan

    with pytest.raises(NumericError) as err:
        pretrain(m, tiny, epochs=3, batch_size=4, on_epoch=poison)
    assert err.value.step == 3  # 12 clouds / 4 = 3 steps in the first epoch


def test_head_only_finetune_freezes_encoder(tiny):
    m = model()
    before = {k: v.copy() for k, v in m.state_dict().items()}
    finetune(m, "classification", tiny, epochs=2, batch_size=4, head_only=True, seed=0)
    after = m.state_dict()
    changed = {k for k in before if before[k].tobytes() != after[k].tobytes()}
    assert changed and all(k.startswith("cls_head.") for k in changed)


def test_full_finetune_changes_encoder(tiny):
    m = model()
    before = state_bytes(m)
    finetune(m, "classification", tiny, epochs=1, batch_size=4, seed=0)
    after = state_bytes(m)
    assert any(before[k] != after[k] for k in before if not k.startswith(("cls_head.", "seg_head.")))


def test_classification_learns_small_set():
    data = synthetic_dataset(["sphere", "cube"], per_class=8, n_points=128, seed=2)
    m = model(cls_dim=2)
    hist = finetune(m, "classification", data, data, epochs=25, batch_size=8, lr=3e-3, seed=0)
    assert hist[-1].mean_loss < hist[0].mean_loss
    assert evaluate(m, "classification", data, "R", seed=9) >= 0.9


def test_segmentation_runs_and_requires_parts(tiny):
    parts = synthetic_dataset(["cylinder", "torus"], per_class=3, n_points=96, seed=0)
    m = model()
    hist = finetune(m, "segmentation", parts, parts, epochs=2, batch_size=3, seed=0)
    assert 0.0 <= hist[-1].accuracy <= 1.0
    with pytest.raises(DataError, match="part labels"):
        finetune(model(), "segmentation", tiny, epochs=1, batch_size=4)


def test_global_features_invariant_and_shaped(tiny):
    m = model()
    for pooling, width in (("maxmean", 16), ("concat", 32)):
        f_z = global_features(m, tiny.clouds, "Z", seed=0, pooling=pooling)
        f_r = global_features(m, tiny.clouds, "R", seed=1, pooling=pooling)
        assert f_z.shape == (len(tiny), width)
        np.testing.assert_allclose(f_z, f_r, atol=1e-4)
