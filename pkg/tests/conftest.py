import numpy as np
import pytest

from triscene import TriplaneAutoencoder, TriplaneDiffusion, generate_toy_scene

TOY_DIMS = (32, 32, 8)
TOY_CLASSES = 5


@pytest.fixture(scope="session")
def toy_scenes():
    return [generate_toy_scene(s, TOY_DIMS, TOY_CLASSES) for s in range(16)]


@pytest.fixture(scope="session")
def quick_models(toy_scenes):
    """Fast, barely-trained model pair for structural tests (preservation,
    seams, service plumbing); quality-sensitive tests use the acceptance
    fixtures instead."""
    ae = TriplaneAutoencoder(plane_channels=8, epochs=2, points_per_scene=512, seed=1)
    ae.fit(toy_scenes[:8])
    diffusion = TriplaneDiffusion(timesteps=100, epochs=2, batch_size=8, seed=1)
    diffusion.fit(ae.transform(toy_scenes[:8]))
    return ae, diffusion


@pytest.fixture(scope="session")
def quick_workspace(tmp_path_factory, quick_models):
    """Pipeline root with quick checkpoints, as the service expects on disk."""
    from triscene import save_autoencoder, save_diffusion

    ae, diffusion = quick_models
    root = tmp_path_factory.mktemp("workspace")
    (root / "checkpoints").mkdir()
    save_autoencoder(ae, root / "checkpoints" / "autoencoder.ckpt")
    save_diffusion(diffusion, root / "checkpoints" / "diffusion.ckpt")
    return root


# ---------------------------------------------------------------------------
# Acceptance-grade trained models. Training runs once per session; set
# TRISCENE_TEST_CACHE=<dir> to reuse checkpoints across sessions while
# iterating locally (the cache key tracks the training configuration).
# ---------------------------------------------------------------------------

import hashlib
import json
import os
from pathlib import Path

from triscene import (SscRefiner, corrupt_scene, load_autoencoder, load_diffusion,
                      load_refiner, save_autoencoder, save_diffusion, save_refiner)

CALIBRATION_TAG = "toy-v3"  # bump when the toy generator or configs change

ACCEPTANCE_AE = dict(plane_channels=8, downsample=2, epochs=120, batch_size=8,
                     points_per_scene=8192, lr=1e-3, seed=101)
ACCEPTANCE_DIFFUSION = dict(timesteps=100, base_channels=32, channel_mults=(1, 2, 4),
                            p_norm=2, epochs=1200, batch_size=16, lr=1e-3, seed=202)
ACCEPTANCE_REFINER = dict(timesteps=100, base_channels=32, channel_mults=(1, 2, 4),
                          p_norm=1, epochs=250, batch_size=16, lr=1e-3, seed=303)
REFINER_SEVERITY = 0.3
REFINER_PAIRS_PER_SCENE = 2


def _cache_path(name: str, params: dict) -> Path | None:
    cache_dir = os.environ.get("TRISCENE_TEST_CACHE")
    if not cache_dir:
        return None
    blob = json.dumps({"tag": CALIBRATION_TAG, "params": {k: list(v) if isinstance(v, tuple)
                                                          else v for k, v in params.items()}},
                      sort_keys=True)
    digest = hashlib.sha256(blob.encode()).hexdigest()[:16]
    path = Path(cache_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path / f"{name}-{digest}.ckpt"


@pytest.fixture(scope="session")
def acceptance_scenes():
    train = [generate_toy_scene(s, TOY_DIMS, TOY_CLASSES) for s in range(64)]
    held = [generate_toy_scene(1000 + s, TOY_DIMS, TOY_CLASSES) for s in range(32)]
    return train, held


@pytest.fixture(scope="session")
def trained_ae(acceptance_scenes):
    cache = _cache_path("autoencoder", ACCEPTANCE_AE)
    if cache is not None and cache.exists():
        return load_autoencoder(cache)
    train, _ = acceptance_scenes
    ae = TriplaneAutoencoder(**ACCEPTANCE_AE).fit(train)
    if cache is not None:
        save_autoencoder(ae, cache)
    return ae


@pytest.fixture(scope="session")
def trained_diffusion(acceptance_scenes, trained_ae):
    cache = _cache_path("diffusion", ACCEPTANCE_DIFFUSION)
    if cache is not None and cache.exists():
        return load_diffusion(cache)
    train, _ = acceptance_scenes
    model = TriplaneDiffusion(**ACCEPTANCE_DIFFUSION).fit(trained_ae.transform(train))
    if cache is not None:
        save_diffusion(model, cache)
    return model


@pytest.fixture(scope="session")
def trained_refiner(acceptance_scenes, trained_ae):
    cache = _cache_path("refiner", ACCEPTANCE_REFINER)
    if cache is not None and cache.exists():
        return load_refiner(cache, trained_ae)
    train, _ = acceptance_scenes
    ssc, gt = [], []
    for i, g in enumerate(train):
        for k in range(REFINER_PAIRS_PER_SCENE):
            ssc.append(corrupt_scene(g, REFINER_SEVERITY, seed=7000 + i * 10 + k))
            gt.append(g)
    refiner = SscRefiner(autoencoder=trained_ae, **ACCEPTANCE_REFINER).fit(ssc, gt)
    if cache is not None:
        save_refiner(refiner, cache)
    return refiner
