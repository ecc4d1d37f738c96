import math

import jsonschema
import numpy as np
import pytest
import torch

from vidres import metrics
from vidres.math_core import ContractError, RandomSource
from vidres.metrics import (
    REPORT_SCHEMA,
    ProbeClassifier,
    fvd_analog,
    frechet_image_distance,
    inception_score,
    inception_score_from_probs,
    metric_report,
    probe_accuracy,
    standard_probe,
    train_probe,
)
from vidres.synth_data import dataset_in_memory


@pytest.fixture(scope="module")
def data():
    return dataset_in_memory(32, 8, 32, 3)


@pytest.fixture(scope="module")
def video_probe(data):
    return train_probe(data, "video_3d", "action", RandomSource(0), steps=10, width=4)


@pytest.fixture(scope="module")
def image_probe(data):
    return train_probe(data, "image_2d", "identity", RandomSource(0), steps=10, width=4)


def test_is_uniform_conditionals():
    mean, std = inception_score_from_probs(np.full((20, 4), 0.25), 2, 10)
    assert abs(mean - 1.0) <= 1e-9 and std == 0.0


def test_is_balanced_one_hot():
    p = np.tile(np.eye(5), (4, 1))
    mean, _ = inception_score_from_probs(p, 1, 20)
    assert abs(mean - 5.0) <= 1e-6


def test_is_two_image_hand_case():
    p = np.array([[0.9, 0.1], [0.1, 0.9]])
    kl = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    mean, _ = inception_score_from_probs(p, 1, 2)
    assert mean == pytest.approx(math.exp(kl), abs=1e-12)
    assert abs(mean - 1.4450) <= 1e-3


def test_is_bounds_and_contracts():
    g = np.random.default_rng(0)
    p = g.dirichlet(np.ones(6) * 0.3, size=200)
    mean, _ = inception_score_from_probs(p, 4, 50)
    assert 1.0 <= mean <= 6.0
    with pytest.raises(ContractError):
        inception_score_from_probs(p, 5, 50)
    with pytest.raises(ContractError):
        inception_score_from_probs(p[0], 1, 1)


def test_probe_shapes_and_contracts(video_probe, image_probe, data):
    f = video_probe.features(data.videos[:5])
    assert f.shape == (5, 64) and f.dtype == np.float64
    assert image_probe.features(data.videos[:5, 0]).shape == (5, 64)
    p = image_probe.predict_proba(data.videos[:5, 0])
    assert np.allclose(p.sum(1), 1.0)
    with pytest.raises(ContractError):
        video_probe.features(data.videos[:5, :4])
    with pytest.raises(ContractError):
        image_probe.features(data.videos[:5])
    with pytest.raises(ContractError):
        ProbeClassifier("audio", 4)
    with pytest.raises(ContractError):
        train_probe(data, "video_3d", "colour", RandomSource(0), steps=1)


def test_probe_training_is_deterministic(data, video_probe):
    again = train_probe(data, "video_3d", "action", RandomSource(0), steps=10, width=4)
    for (k, a), (_, b) in zip(video_probe.state_dict().items(), again.state_dict().items()):
        assert torch.equal(a, b), k
    assert again.meta == video_probe.meta
    assert 0.0 <= video_probe.meta["heldout_accuracy"] <= 1.0


def test_probe_save_load(tmp_path, video_probe, data):
    video_probe.save(tmp_path / "p")
    back = ProbeClassifier.load(tmp_path / "p")
    assert back.meta == video_probe.meta and back.pool
    assert np.array_equal(back.features(data.videos[:4]), video_probe.features(data.videos[:4]))
    assert probe_accuracy(back, data, "action") == probe_accuracy(video_probe, data, "action")


def test_standard_probe_uses_cache(tmp_path, data, monkeypatch):
    monkeypatch.setitem(metrics.PROBE_DEFAULTS, "video_3d", {"width": 4, "steps": 5})
    first = standard_probe("video_3d", 0, cache_dir=tmp_path, data=(data, data))
    cached = list(tmp_path.iterdir())
    assert len(cached) == 1
    second = standard_probe("video_3d", 0, cache_dir=tmp_path)
    assert second.meta == first.meta


def test_fvd_identical_and_unrelated(video_probe, data):
    assert fvd_analog(data.videos, data.videos, video_probe) <= 1e-4
    noise = np.random.default_rng(0).uniform(-1, 1, data.videos.shape).astype(np.float32)
    assert fvd_analog(data.videos, noise, video_probe) > 1e-2
    with pytest.raises(ContractError):
        fvd_analog(data.videos, data.videos, ProbeClassifier("image_2d", 4))


def test_fid_and_is_wrappers(image_probe, data):
    frames = data.videos.reshape(-1, 3, 32, 32)
    assert frechet_image_distance(frames, frames, image_probe) <= 1e-4
    mean, std = inception_score(frames, image_probe, 2, 64)
    assert 1.0 <= mean <= 16.0 and std >= 0
    with pytest.raises(ContractError):
        inception_score(frames[:10], image_probe, 2, 64)


def test_report_schema():
    rep = metric_report("fvd", 1.5, None, 256, "/x", 0, probe_heldout_accuracy=0.9)
    jsonschema.validate(rep, REPORT_SCHEMA)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({**rep, "num_samples": 0}, REPORT_SCHEMA)


# -- standard probes (trained once per session, a few minutes on one core) ----


@pytest.mark.slow
def test_standard_probes_meet_accuracy_targets(video_probes, standard_image_probe):
    for seed, probe in video_probes.items():
        assert probe.meta["heldout_accuracy"] >= 0.95, seed
    assert standard_image_probe.meta["heldout_accuracy"] >= 0.90


@pytest.mark.slow
def test_fvd_half_split_calibration(video_probes):
    probe = video_probes[0]
    real = dataset_in_memory(512, 8, 32, 6001).videos
    base = []
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(len(real))
        a, b = real[perm[:256]], real[perm[256:]]
        base.append(fvd_analog(a, b, probe))
        assert fvd_analog(a, b, probe) == pytest.approx(fvd_analog(b, a, probe), rel=1e-6)
    assert min(base) > 0 and max(base) <= 2 * min(base)
    shuffled = real[:256, np.random.default_rng(9).permutation(8)]
    assert fvd_analog(real[:256], shuffled, probe) > max(base)
