import colorsys
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from drdg import syndata
from drdg.errors import ConfigError
from drdg.syndata import DomainSpec, FaceGeometry


def _check_sample(s, n_domains):
    assert s.image.dtype == np.float32
    assert s.image.shape[-1] == 6
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert s.domain.shape == (n_domains,)
    assert s.domain.sum() == 1 and set(np.unique(s.domain)) <= {0.0, 1.0}
    if s.label == syndata.SPOOF:
        assert not s.depth.any()


def test_generate_counts_and_depth_contract():
    spec = DomainSpec(0, tint=(1, 1, 1), exposure=1.0)
    samples = syndata.generate_domain_dataset(spec, 4, (32, 32), seed=0)
    assert len(samples) == 4
    live = [s for s in samples if s.label == syndata.LIVE]
    spoof = [s for s in samples if s.label == syndata.SPOOF]
    assert len(live) == 2 and len(spoof) == 2
    assert all(s.depth.any() for s in live)
    assert all(not s.depth.any() for s in spoof)
    for s in samples:
        _check_sample(s, 1)
        assert s.depth.shape == (16, 16)


def test_generate_is_deterministic():
    spec = DomainSpec(2, tint=(0.8, 0.9, 1.0), exposure=1.3, texture_freq=4.0, noise_sigma=0.05)
    a = syndata.generate_domain_dataset(spec, 6, (16, 16), seed=5, n_domains=3)
    b = syndata.generate_domain_dataset(spec, 6, (16, 16), seed=5, n_domains=3)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.depth.tobytes() == y.depth.tobytes()
        assert x.label == y.label
    c = syndata.generate_domain_dataset(spec, 6, (16, 16), seed=6, n_domains=3)
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_tint_scales_channel_means():
    H = W = 32
    n = 20
    sigma = 0.01
    tint = np.array([0.5, 0.8, 0.65])
    base = syndata.generate_domain_dataset(DomainSpec(0, noise_sigma=sigma), n, (H, W), seed=3)
    tinted = syndata.generate_domain_dataset(DomainSpec(0, tint=tuple(tint), noise_sigma=sigma), n, (H, W), seed=3)
    mean_base = np.mean([s.image[..., :3] for s in base], axis=(0, 1, 2))
    mean_tint = np.mean([s.image[..., :3] for s in tinted], axis=(0, 1, 2))
    tol = 3 * sigma / np.sqrt(H * W * n)
    np.testing.assert_allclose(mean_tint, tint * mean_base, atol=tol)


@pytest.mark.parametrize("n,size", [(3, (32, 32)), (0, (32, 32)), (4, (4, 32))])
def test_generate_rejects_bad_config(n, size):
    with pytest.raises(ConfigError):
        syndata.generate_domain_dataset(DomainSpec(0), n, size)


@pytest.mark.parametrize("kwargs", [
    dict(tint=(1.2, 1, 1)), dict(exposure=5.0), dict(texture_freq=0.0), dict(noise_sigma=0.3),
])
def test_domain_spec_ranges(kwargs):
    with pytest.raises(ConfigError):
        DomainSpec(0, **kwargs)


@pytest.mark.parametrize("rgb,hsv", [
    ((1, 0, 0), (0, 1, 1)),
    ((0.5, 0.5, 0.5), (0, 0, 0.5)),
    ((0, 1, 0), (1 / 3, 1, 1)),
    ((0, 0, 1), (2 / 3, 1, 1)),
    ((0, 0, 0), (0, 0, 0)),
])
def test_rgb_to_hsv_pixels(rgb, hsv):
    out = syndata.rgb_to_hsv(np.array(rgb, dtype=float).reshape(1, 1, 3))[0, 0]
    np.testing.assert_allclose(out, hsv, atol=1e-12)
    np.testing.assert_allclose(out, colorsys.rgb_to_hsv(*rgb), atol=1e-12)


def test_rgb_to_hsv_matches_colorsys_and_round_trips():
    rng = np.random.default_rng(0)
    rgb = rng.uniform(size=(10, 100, 3))
    hsv = syndata.rgb_to_hsv(rgb)
    flat_rgb = rgb.reshape(-1, 3)
    flat_hsv = hsv.reshape(-1, 3)
    for px, ours in zip(flat_rgb, flat_hsv):
        np.testing.assert_allclose(ours, colorsys.rgb_to_hsv(*px), atol=1e-12)
        if ours[1] > 0:
            np.testing.assert_allclose(colorsys.hsv_to_rgb(*ours), px, atol=1e-6)


def test_rgb_to_hsv_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="drdg.syndata"):
        out = syndata.rgb_to_hsv(np.array([[[1.5, -0.2, 0.3]]]))
    assert "clamped" in caplog.text
    np.testing.assert_allclose(out[0, 0], colorsys.rgb_to_hsv(1.0, 0.0, 0.3))


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_hsv_range(px):
    out = syndata.rgb_to_hsv(np.array(px).reshape(1, 1, 3))
    assert out.min() >= 0 and out.max() <= 1


def test_pseudo_depth():
    spoof = syndata.make_pseudo_depth(FaceGeometry(live=False), (16, 16))
    assert spoof.shape == (16, 16) and not spoof.any()
    live = syndata.make_pseudo_depth(FaceGeometry(center=(0.5, 0.5), live=True), (16, 16))
    assert live[8, 8] == live.max()
    assert live.sum() > 0 and live.min() >= 0 and live.max() <= 1
    assert not live[0].any() and not live[-1].any() and not live[:, 0].any() and not live[:, -1].any()
    odd = syndata.make_pseudo_depth(FaceGeometry(center=(0.5, 0.5)), (15, 15))
    assert np.unravel_index(odd.argmax(), odd.shape) == (7, 7)
    with pytest.raises(ConfigError):
        syndata.make_pseudo_depth(FaceGeometry(), (3, 16))


def _datasets(M=3, n=12, size=(8, 8)):
    return [syndata.generate_domain_dataset(DomainSpec(d), n, size, seed=0, n_domains=M) for d in range(M)]


def test_make_batch_balance():
    datasets = _datasets()
    batch = syndata.make_batch(datasets, n_dom=4, seed=1)
    assert len(batch) == 12
    assert batch.domain_counts == {0: 4, 1: 4, 2: 4}
    assert batch.class_counts == {(d, c): 2 for d in range(3) for c in (0, 1)}
    assert batch.images.shape == (12, 8, 8, 6)


def test_make_batch_determinism():
    datasets = _datasets()
    a = syndata.make_batch(datasets, 4, seed=7, position=3)
    b = syndata.make_batch(datasets, 4, seed=7, position=3)
    assert a.origin == b.origin
    assert syndata.make_batch(datasets, 4, seed=8, position=3).origin != a.origin


def test_no_repeats_within_epoch():
    datasets = _datasets(n=12)
    sampler = syndata.BalancedBatchSampler(datasets, n_dom=4, seed=0)
    seen = {d: [] for d in range(3)}
    # 12 samples per domain, 4 per batch: 3 batches make one epoch
    for _ in range(3):
        for d, i in sampler.next_batch().origin:
            seen[d].append(i)
    for d in range(3):
        assert sorted(seen[d]) == list(range(12))


def test_sampler_restore_continues_sequence():
    datasets = _datasets(n=10)
    a = syndata.BalancedBatchSampler(datasets, 4, seed=2)
    for _ in range(5):
        a.next_batch()
    b = syndata.BalancedBatchSampler(datasets, 4, seed=2)
    b.restore(a.state())
    for _ in range(4):
        assert a.next_batch().origin == b.next_batch().origin


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.sampled_from([2, 4, 6]), st.integers(0, 10 ** 6), st.integers(0, 5))
def test_batch_composition_is_exact(M, n_dom, seed, position):
    datasets = _datasets(M=M, n=8)
    batch = syndata.make_batch(datasets, n_dom, seed, position)
    assert batch.domain_counts == {d: n_dom for d in range(M)}
    assert batch.class_counts == {(d, c): n_dom // 2 for d in range(M) for c in (0, 1)}


def test_make_batch_insufficient_samples():
    with pytest.raises(ConfigError):
        syndata.make_batch(_datasets(n=4), n_dom=6, seed=0)
    with pytest.raises(ConfigError):
        syndata.make_batch(_datasets(n=4), n_dom=3, seed=0)


def test_generated_samples_satisfy_invariants():
    for d, data in enumerate(_datasets(M=3, n=10, size=(16, 16))):
        for s in data:
            _check_sample(s, 3)
            assert s.domain_index == d


def _write_png(path, rng, size=(20, 24)):
    Image.fromarray(rng.integers(0, 255, size=(*size, 3), dtype=np.uint8)).save(path)


def test_ingest_directory(tmp_path, caplog):
    rng = np.random.default_rng(0)
    for dom in ("a", "b", "c"):
        for cls in ("live", "spoof"):
            (tmp_path / dom / cls).mkdir(parents=True)
            for i in range(5):
                _write_png(tmp_path / dom / cls / f"{i}.png", rng)
    Image.fromarray(np.full((10, 10), 128, dtype=np.uint8)).save(tmp_path / "a" / "live" / "0_depth.png")
    with caplog.at_level(logging.WARNING, logger="drdg.syndata"):
        datasets = syndata.ingest_directory(tmp_path, {"image_size": (16, 16)})
    assert [len(d) for d in datasets] == [10, 10, 10]
    first = datasets[0][0]
    assert first.image.shape == (16, 16, 6) and first.depth.shape == (8, 8)
    np.testing.assert_allclose(first.depth, 128 / 255, atol=1e-6)
    for d, data in enumerate(datasets):
        for s in data:
            _check_sample(s, 3)
            assert s.domain_index == d
            if s.label == syndata.LIVE:
                assert s.depth.any()
    assert "synthesized" in caplog.text


def test_ingest_skips_corrupt_file(tmp_path, caplog):
    rng = np.random.default_rng(1)
    for cls in ("live", "spoof"):
        (tmp_path / "x" / cls).mkdir(parents=True)
        for i in range(3):
            _write_png(tmp_path / "x" / cls / f"{i}.png", rng)
            Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(tmp_path / "x" / cls / f"{i}_depth.png")
    (tmp_path / "x" / "spoof" / "broken.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING, logger="drdg.syndata"):
        datasets = syndata.ingest_directory(tmp_path, syndata.IngestLayout(image_size=(8, 8)))
    assert len(datasets[0]) == 6
    assert len([r for r in caplog.records if r.levelno == logging.WARNING]) == 1
    spoof = [s for s in datasets[0] if s.label == syndata.SPOOF]
    assert all(not s.depth.any() for s in spoof)


def test_ingest_empty_class_dir(tmp_path):
    (tmp_path / "x" / "live").mkdir(parents=True)
    _write_png(tmp_path / "x" / "live" / "0.png", np.random.default_rng(0))
    (tmp_path / "x" / "spoof").mkdir()
    with pytest.raises(ConfigError):
        syndata.ingest_directory(tmp_path)


def test_spoof_without_depth_gets_zeros(tmp_path):
    rng = np.random.default_rng(2)
    for cls in ("live", "spoof"):
        (tmp_path / "d" / cls).mkdir(parents=True)
        _write_png(tmp_path / "d" / cls / "0.png", rng)
    [data] = syndata.ingest_directory(tmp_path, {"image_size": (8, 8)})
    [spoof] = [s for s in data if s.label == syndata.SPOOF]
    assert not spoof.depth.any()


def test_save_and_load_datasets(tmp_path):
    datasets = _datasets(M=2, n=4)
    path = syndata.save_datasets(tmp_path / "data", datasets, {"seed": 0, "spec": DomainSpec(0)})
    loaded = syndata.load_datasets(path)
    assert [len(d) for d in loaded] == [4, 4]
    for a, b in zip(datasets[1], loaded[1]):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.label == b.label
    import json
    sidecar = json.loads((tmp_path / "data.json").read_text())
    assert sidecar["counts"] == [4, 4] and sidecar["seed"] == 0
    assert sidecar["shapes"]["images"] == [8, 8, 8, 6]


def test_benchmark_layout():
    cfg = syndata.BenchmarkConfig(image_size=(16, 16), depth_size=(8, 8), n_per_domain=6, n_target=4)
    sources, target = syndata.make_benchmark(cfg)
    assert len(sources) == 3 and len(target) == 4
    assert sources[0][0].domain.shape == (3,)
    assert target[0].domain_index == 3
