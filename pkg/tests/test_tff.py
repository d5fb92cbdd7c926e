import dataclasses

import numpy as np
import pytest

from rasa import numcore as nc
from rasa.datamodel import FeatureBag
from rasa.tff import (CheckpointError, ConfigError, TffConfig, decode_checkpoint,
                      encode_checkpoint, forward, init_params, load_checkpoint, project_text,
                      save_checkpoint)
from oracles import central_difference, rel_error

SMALL = TffConfig(d_text_in=5, d_patch_in=6, d_model=8, n_heads=2, n_qformer_blocks=2,
                  n_self_blocks=1, ff_multiplier=2, seed=0)
# narrow enough that a full finite-difference sweep stays quick
GRAD = TffConfig(d_text_in=3, d_patch_in=4, d_model=4, n_heads=2, n_qformer_blocks=2,
                 n_self_blocks=1, ff_multiplier=2, seed=0)


def _closed_form_count(c: TffConfig) -> int:
    d, f = c.d_model, c.ff_multiplier * c.d_model
    lin = lambda a, b: a * b + b  # noqa: E731
    norm = 2 * d
    attn = 4 * (d * d + d)
    ff = lin(d, f) + lin(f, d)
    block = 2 * norm + attn + ff
    cross = 3 * norm + attn + ff
    return (lin(c.d_text_in, d) + lin(c.d_patch_in, d) +
            (c.n_qformer_blocks + c.n_self_blocks) * block + cross + norm + lin(d, 1))


def _instance(rng, n_text=3, n_patch=5, cfg=SMALL):
    return rng.normal(size=(n_text, cfg.d_text_in)), rng.normal(size=(n_patch, cfg.d_patch_in))


def _perturbed(seed, cfg=SMALL):
    """Params with non-trivial norms and biases so every path carries signal."""
    p = init_params(dataclasses.replace(cfg, seed=seed))
    rng = np.random.default_rng(seed + 100)
    for t in p.values():
        t.data += rng.normal(size=t.shape) * 0.1
    return p


class TestConfig:
    def test_indivisible_heads(self):
        with pytest.raises(ConfigError, match="divisible"):
            TffConfig(d_model=10, n_heads=4)

    def test_nonpositive_count(self):
        with pytest.raises(ConfigError):
            TffConfig(n_self_blocks=0)


class TestInit:
    def test_same_seed_identical(self):
        assert init_params(SMALL).equals(init_params(SMALL))
        assert not init_params(SMALL).equals(init_params(dataclasses.replace(SMALL, seed=1)))

    @pytest.mark.parametrize("cfg", [SMALL, TffConfig(), TffConfig(d_model=32, n_heads=4,
                                                                   n_qformer_blocks=1)])
    def test_parameter_count(self, cfg):
        assert init_params(cfg).n_parameters() == _closed_form_count(cfg)

    def test_zero_inputs_give_zero(self):
        out = forward(init_params(SMALL), np.zeros((3, 5)), np.zeros((4, 6)))
        assert out.score == 0.0

    def test_unique_names(self):
        names = init_params(SMALL).names()
        assert len(names) == len(set(names))


class TestForward:
    def test_shapes(self, rng):
        text, patches = _instance(rng)
        out = forward(init_params(SMALL), text, patches)
        assert out.y.shape == (1, 1)
        assert out.t_proj.shape == (3, 8) and out.t_refined.shape == (3, 8)
        assert out.z.shape == (3, 8)

    def test_accepts_feature_bags(self, rng):
        text, patches = _instance(rng)
        p = init_params(SMALL)
        a = forward(p, FeatureBag(text), FeatureBag(patches)).score
        b = forward(p, FeatureBag(text).matrix, FeatureBag(patches).matrix).score
        assert a == b

    def test_permutation_invariance(self, rng):
        p = _perturbed(3)
        text, patches = _instance(rng, 4, 7)
        base = forward(p, text, patches)
        for _ in range(10):
            tp, pp = rng.permutation(4), rng.permutation(7)
            out = forward(p, text[tp], patches[pp])
            assert abs(out.score - base.score) < 1e-9
            assert np.array_equal(out.t_proj.data, base.t_proj.data[tp])

    def test_projector_is_row_wise(self, rng):
        p = _perturbed(1)
        text, _ = _instance(rng)
        base = project_text(p, text).data
        text[2] += 5.0
        moved = project_text(p, text).data
        assert np.array_equal(moved[:2], base[:2])
        assert not np.array_equal(moved[2], base[2])

    def test_deterministic(self, rng):
        p = _perturbed(2)
        text, patches = _instance(rng)
        assert forward(p, text, patches).y.data.tobytes() == \
            forward(p, text, patches).y.data.tobytes()

    def test_errors(self, rng):
        p = init_params(SMALL)
        text, patches = _instance(rng)
        with pytest.raises(ValueError):
            forward(p, text[:0], patches)
        with pytest.raises(ValueError):
            forward(p, text, patches[:0])
        with pytest.raises(ValueError, match="width"):
            forward(p, text, patches[:, :5])

    def test_full_gradient(self):
        for seed in range(10):
            p = _perturbed(seed, GRAD)
            rng = np.random.default_rng(seed)
            text, patches = _instance(rng, cfg=GRAD)
            p.zero_grad()
            with nc.Tape() as tape:
                y = forward(p, text, patches).y
                loss = nc.sum_all(y)
            nc.backward(tape, loss)
            analytic = [t.grad.copy() for t in p.values()]
            arrays = [t.data for t in p.values()]  # perturbed in place by the oracle

            def f(*_):
                return forward(p, text, patches).score

            numeric = central_difference(f, arrays)
            err = rel_error(np.concatenate([a.ravel() for a in analytic]),
                            np.concatenate([n.ravel() for n in numeric]))
            assert err < 1e-4, (seed, err)
            for name, a, n in zip(p.names(), analytic, numeric):
                if np.linalg.norm(n) > 1e-6:
                    assert rel_error(a, n) < 1e-4, (seed, name)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        p = _perturbed(4)
        save_checkpoint(p, tmp_path / "m.rasc")
        back = load_checkpoint(tmp_path / "m.rasc", expected=dataclasses.replace(SMALL, seed=4))
        assert back.equals(p)
        assert encode_checkpoint(back) == encode_checkpoint(p)
        text, patches = _instance(rng)
        assert forward(back, text, patches).y.data.tobytes() == \
            forward(p, text, patches).y.data.tobytes()

    def test_wrong_d_model_named(self):
        buf = encode_checkpoint(init_params(SMALL))
        with pytest.raises(ConfigError, match="d_model"):
            decode_checkpoint(buf, expected=dataclasses.replace(SMALL, d_model=16))

    def test_corruption(self):
        buf = encode_checkpoint(init_params(SMALL))
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"XXXX" + buf[4:])
        with pytest.raises(CheckpointError):
            decode_checkpoint(buf[:-3])
        with pytest.raises(CheckpointError):
            decode_checkpoint(buf + b"\0")
