import statistics
from dataclasses import replace

import numpy as np
import pytest

from refstyle import synthetic
from refstyle.codec import SpaceToDepth
from refstyle.denoiser import Conditioning, Inject, ToyUNetConfig, build_toy_unet
from refstyle.errors import CacheMissError, ConstraintError, ShapeError
from refstyle.feature_cache import CachedFeatures, FeatureStore
from refstyle.pipeline import (
    StylizeConfig,
    csdi_invert,
    fff_sample,
    fuse_initial_latents,
    invert_pair,
    reconstruct,
    resolve_sites,
    stylize,
)
from refstyle.schedule import plan_timesteps

from conftest import rel_err

CODEC = SpaceToDepth(8)


@pytest.fixture(scope="module")
def images():
    return synthetic.content_image(0), synthetic.style_image(0)


def test_zero_backend_inversion_is_rescale(zero_backend, schedule):
    plan = plan_timesteps(schedule, 30)
    x = np.random.default_rng(0).random(zero_backend.latent_shape)
    store = FeatureStore()
    z = csdi_invert(x, zero_backend, plan, store, "content", StylizeConfig(injection_sites="all"))
    assert rel_err(z, np.sqrt(schedule.alpha_bar(plan.steps[0])) * x) < 1e-13
    assert store.count("content") == 30 * 2


def test_store_counts_per_role(toy, schedule, images):
    plan = plan_timesteps(schedule, 5)
    cfg = StylizeConfig(injection_sites="all")
    store, _, _ = invert_pair(CODEC.encode(images[0]), CODEC.encode(images[1]), toy, plan, cfg)
    n_sites = len(toy.list_attention_sites())
    assert store.count("content") == store.count("style") == 5 * n_sites
    for key in store:
        feats = store.lookup(key)
        assert (feats.q is not None) == (key.role == "content")
        assert key.timestep in plan.steps


def test_more_steps_reconstruct_better(toy, schedule, images):
    x = CODEC.encode(images[0])
    err30 = rel_err(reconstruct(x, toy, plan_timesteps(schedule, 30)), x)
    err60 = rel_err(reconstruct(x, toy, plan_timesteps(schedule, 60)), x)
    assert err60 < err30


def test_fuse_identity_and_statistics():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((1, 4, 3, 3))
    s = rng.standard_normal((1, 4, 3, 3)) * 2 + 1
    assert np.allclose(fuse_initial_latents(z, z), z, atol=1e-6)
    out = fuse_initial_latents(z, s)
    assert np.allclose(out[0].mean(axis=(1, 2)), s[0].mean(axis=(1, 2)), atol=1e-5)
    with pytest.raises(ShapeError):
        fuse_initial_latents(z, s[:, :3])


def test_fuse_one_channel_instance():
    zc = np.array([1.0, 2.0, 3.0, 4.0])
    zs = np.array([0.0, 0.0, 2.0, 2.0])
    mu_c, sd_c = statistics.fmean(zc), statistics.pstdev(zc)
    mu_s, sd_s = statistics.fmean(zs), statistics.pstdev(zs)
    expected = [sd_s * (v - mu_c) / sd_c + mu_s for v in zc]
    out = fuse_initial_latents(zc.reshape(1, 1, 2, 2), zs.reshape(1, 1, 2, 2))
    assert np.allclose(out.ravel(), expected, atol=1e-12)


@pytest.fixture(scope="module")
def pair_run(schedule, images):
    backend = build_toy_unet(ToyUNetConfig(seed=0))
    plan = plan_timesteps(schedule, 30)
    cfg = StylizeConfig()
    store, zc, zs = invert_pair(CODEC.encode(images[0]), CODEC.encode(images[1]), backend, plan, cfg)
    return backend, plan, store, fuse_initial_latents(zc, zs)


def test_missing_style_entry_is_cache_miss(pair_run):
    backend, plan, store, zcs = pair_run
    pruned = FeatureStore()
    dropped = (plan.steps[3], "up.0.attn0", "style")
    for key, feats in store.items():
        if key != dropped:
            pruned.record(key, feats)
    with pytest.raises(CacheMissError) as info:
        fff_sample(zcs, backend, plan, pruned, StylizeConfig())
    msg = str(info.value)
    assert "step 4/30" in msg and f"t={plan.steps[3]}" in msg and "up.0.attn0" in msg


def test_beta_changes_output(pair_run):
    backend, plan, store, zcs = pair_run
    a = fff_sample(zcs, backend, plan, store, StylizeConfig(alpha=1.0, beta=0.0))
    b = fff_sample(zcs, backend, plan, store, StylizeConfig(alpha=0.0, beta=1.0))
    assert not np.array_equal(a, b)


def test_sampling_never_writes_cache(pair_run):
    backend, plan, store, zcs = pair_run
    before = store.to_bytes()
    fff_sample(zcs, backend, plan, store, StylizeConfig())
    assert store.to_bytes() == before


class LoggingStore(FeatureStore):
    def __init__(self, base):
        super().__init__()
        self._entries = dict(base.items())
        self.frozen = True
        self.lookups = []

    def lookup(self, key):
        self.lookups.append(tuple(key))
        return super().lookup(key)


def test_lookups_use_recorded_timesteps(pair_run):
    backend, plan, store, zcs = pair_run
    logged = LoggingStore(store)
    fff_sample(zcs, backend, plan, logged, StylizeConfig())
    assert {k[0] for k in logged.lookups} == set(plan.steps)
    assert all(k in store for k in logged.lookups)
    sites = resolve_sites(backend, "decoder")
    assert len(logged.lookups) == 30 * len(sites) * 2


def test_inversion_leaves_weights_untouched(schedule, images):
    backend = build_toy_unet(ToyUNetConfig(seed=2))
    snapshot = {k: v.copy() for k, v in backend.params.items()}
    csdi_invert(CODEC.encode(images[0]), backend, plan_timesteps(schedule, 10), FeatureStore(), "content")
    assert all(np.array_equal(snapshot[k], backend.params[k]) for k in snapshot)


def test_duplicated_cache_matches_plain_attention_per_step(toy, schedule, images):
    plan = plan_timesteps(schedule, 30)
    x = CODEC.encode(images[0])
    cfg = StylizeConfig(alpha=1.0, beta=0.0, injection_sites="all")
    store = FeatureStore()
    traj = []
    csdi_invert(x, toy, plan, store, "content", cfg, trajectory=traj)
    inputs = [x] + traj[:-1]
    for x_in, (_, t) in zip(inputs, plan.ascending()):
        hooks = {}
        for site in toy.list_attention_sites():
            c = store.lookup((t, site, "content"))
            hooks[site] = Inject(c, CachedFeatures(c.k, c.v), 1.0, 0.0)
        diff = toy.predict_noise(x_in, t, hooks=hooks) - toy.predict_noise(x_in, t)
        assert np.max(np.abs(diff)) <= 1e-5


def test_self_style_reconstructs(toy, images):
    content = images[0]
    cfg = StylizeConfig(alpha=1.0, beta=0.0)
    result = stylize(content, content, toy, cfg, codec=CODEC)
    baseline = reconstruct(CODEC.encode(content), toy, result.plan)
    assert rel_err(result.latent, baseline) < 5e-2


def test_stylize_defaults_and_determinism(toy, images):
    cfg = StylizeConfig()
    assert (cfg.steps, cfg.alpha, cfg.beta, cfg.cfg_inversion, cfg.cfg_forward) == (30, 0.8, 0.2, 1.0, 5.0)
    a = stylize(*images, toy, cfg, codec=CODEC)
    b = stylize(*images, toy, cfg, codec=CODEC)
    assert a.latent.tobytes() == b.latent.tobytes()
    assert a.latent.shape == CODEC.encode(images[0]).shape
    assert a.image.min() >= 0 and a.image.max() <= 1
    assert a.plan.num_inference_steps == 30


def test_stylize_size_mismatch_mentions_resize(toy, images):
    with pytest.raises(ShapeError, match="resize"):
        stylize(images[0], synthetic.style_image(0, size=32), toy, codec=CODEC)


def test_config_validation():
    with pytest.raises(ConstraintError):
        StylizeConfig(alpha=0.5, beta=0.6)
    with pytest.raises(Exception):
        StylizeConfig(steps=0)
    assert StylizeConfig().with_beta(0.5).alpha == 0.5


def test_guided_inversion_with_conditioning(toy, schedule, images):
    cond = Conditioning(np.random.default_rng(0).standard_normal(toy.context_shape))
    cfg = StylizeConfig(conditioning=cond, cfg_inversion=2.0, cfg_forward=3.0)
    result = stylize(*images, toy, cfg, codec=CODEC)
    assert np.all(np.isfinite(result.latent))
    plain = stylize(*images, toy, replace(cfg, conditioning=None), codec=CODEC)
    assert not np.allclose(result.latent, plain.latent)
