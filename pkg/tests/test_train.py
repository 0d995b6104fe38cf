import numpy as np
import pytest

from prsnet.experiments import flip_labels
from prsnet.model import ModelConfig, ModelParams, build_model
from prsnet.synthetic import smooth_images, toy_reid_set
from prsnet.tensor import Tensor
from prsnet.train import SGD, embed, pk_batches, pretrain, reid_train


def _one_param(value):
    return ModelParams(ModelConfig.tiny(), {"w": Tensor(np.array(value, dtype=np.float64), requires_grad=True)})


class TestSGD:
    def test_momentum_by_hand(self):
        params = _one_param([1.0])
        opt = SGD(params, lr=0.1, momentum=0.5)
        params["w"].grad = np.array([2.0])
        opt.step()  # v = 2, w = 1 - 0.2
        params["w"].grad = np.array([2.0])
        opt.step()  # v = 0.5 * 2 + 2 = 3, w = 0.8 - 0.3
        np.testing.assert_allclose(params["w"].data, [0.5])

    def test_weight_decay(self):
        params = _one_param([2.0])
        opt = SGD(params, lr=0.1, momentum=0.0, weight_decay=0.5)
        params["w"].grad = np.array([0.0])
        opt.step()
        np.testing.assert_allclose(params["w"].data, [1.9])

    def test_cosine_schedule(self):
        opt = SGD(_one_param([0.0]), lr=1.0, total_steps=10, cosine=True)
        assert opt.lr == 1.0
        opt.step_count = 5
        assert opt.lr == pytest.approx(0.5)
        opt.step_count = 10
        assert opt.lr == pytest.approx(0.0)

    def test_frozen_tensors_untouched(self):
        params = _one_param([1.0])
        params["buf"] = Tensor(np.array([3.0]))
        SGD(params, lr=1.0).step()
        assert params["buf"].data[0] == 3.0


def test_pk_batches_shape():
    pids = np.repeat([1, 2, 3, 4, 5], [2, 6, 6, 6, 6])
    batches = list(pk_batches(pids, p=2, k=4, rng=np.random.default_rng(0)))
    assert len(batches) == 2
    for b in batches:
        ids, counts = np.unique(pids[b], return_counts=True)
        assert len(ids) == 2 and set(counts) == {4}


def test_pretrain_rejects_empty_corpus():
    with pytest.raises(ValueError):
        pretrain(build_model(ModelConfig.tiny()), np.zeros((0, 3, 64, 32), np.float32))


def test_reid_needs_two_identities():
    imgs = smooth_images(4, 64, 32)
    with pytest.raises(ValueError):
        reid_train(build_model(ModelConfig.tiny(), parts=("encoder",)), imgs, np.ones(4, int))


def test_reid_loss_trend_on_toy_data():
    splits = toy_reid_set(seed=0)
    images, pids, _ = splits["train"]
    params = build_model(ModelConfig.tiny(), seed=0, parts=("encoder",))
    res = reid_train(params, images, pids, epochs=10, steps_per_epoch=10, p=3, k=4, margin=2.0, normalize=True, seed=0)
    window = 10
    smoothed = np.convolve(res.losses, np.ones(window) / window, mode="valid")
    assert smoothed[-1] < smoothed[0]
    assert res.skipped_anchors == 0


def test_embed_normalized():
    params = build_model(ModelConfig.tiny(), parts=("encoder",))
    e = embed(params, smooth_images(5, 64, 32), batch_size=2, normalize=True)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, rtol=1e-5)


def test_flip_labels():
    pids = np.repeat([1, 2, 3], 10)
    noisy = flip_labels(pids, 0.2, np.random.default_rng(0))
    assert (noisy != pids).sum() == 6
    assert set(noisy) <= {1, 2, 3}


def test_toy_set_layout():
    splits = toy_reid_set(n_ids=3, per_id=20, seed=0)
    assert [len(splits[s][0]) for s in ("train", "query", "gallery")] == [36, 6, 18]
    assert set(splits["query"][2]) == {1} and 1 not in set(splits["gallery"][2])
    assert splits["train"][0].shape[1:] == (3, 64, 32)
