from __future__ import annotations

import numpy as np
import pytest

from nshape.field import FieldConfig
from nshape.scenegen import Dataset, generate_dataset


def small_field(hidden: int = 16, depth: int = 3, pe_x: int = 2, pe_v: int = 1, feat: int = 8,
                color_hidden: int = 16) -> FieldConfig:
    return FieldConfig(pe_x=pe_x, pe_v=pe_v, hidden=hidden, depth=depth, color_hidden=color_hidden,
                       feat_dim=feat)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "sphere_box"
    generate_dataset("sphere+box", root, views=4, size=16, seed=0, mesh_res=64)
    return Dataset.load(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_field() -> FieldConfig:
    return small_field(hidden=8, depth=2, pe_x=1, pe_v=1, feat=4, color_hidden=8)


def loss_case(shaping: str, seed: int, fcfg: FieldConfig | None = None, select: int = 0, **overrides):
    """A single-chunk loss configuration with concrete bindings for every slot.

    Parameters start from the sphere init plus noise so no symmetry hides errors.
    """
    from nshape.field import init_params
    from nshape.render import cube_bounds, sample_ray
    from nshape.train import TrainConfig

    fcfg = fcfg or tiny_field()
    kw = dict(shaping=shaping, rays=2, samples=6, eikonal_points=4, positives=2, negatives=2, chunks=1,
              jacobian_samples=select, lambda_e=1.0, lambda_m=1.0, seed=seed)
    kw.update(overrides)
    tcfg = TrainConfig(**kw)
    rng = np.random.default_rng(seed)
    params = init_params(fcfg, seed)
    params = {k: v + 0.05 * rng.standard_normal(np.shape(v)) for k, v in params.items()}
    b = dict(params)

    def rays(R, prefix):
        o = rng.normal(size=(R, 3))
        o = 2.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
        d = -o / 2.0 + 0.1 * rng.normal(size=(R, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        near, far = cube_bounds(o, d)
        t = sample_ray(near, far, tcfg.samples, "stratified", rng)
        b.update({prefix + "o": o, prefix + "d": d, prefix + "t": t})

    rays(tcfg.rays, "c")
    b["gt"] = rng.uniform(0, 1, size=(tcfg.rays, 3))
    b["eik_x"] = rng.uniform(-0.8, 0.8, size=(tcfg.eikonal_points, 3))
    if shaping != "none":
        n_neg = 0 if shaping == "fo" else tcfg.negatives
        rays(1 + tcfg.positives + n_neg, "m")
        b["mpos"] = np.ones(tcfg.positives)
        if n_neg:
            b["mneg"] = np.ones(n_neg)
        if shaping == "normal" and tcfg.jacobian_select:
            from nshape.render import top_weight_selection

            b["mts"], b["msel"] = top_weight_selection(b["mt"], rng.uniform(size=(len(b["mt"]), tcfg.samples - 1)),
                                                       tcfg.jacobian_select)
    return fcfg, tcfg, b
