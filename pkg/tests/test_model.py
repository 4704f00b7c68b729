import os

import numpy as np
import pytest

from boxseg import boxops, checkpoint, losses, model
from boxseg import tensor as T
from boxseg.errors import DataError, ShapeError


@pytest.fixture(scope="module")
def cfg():
    return model.ModelConfig(input_size=64, seed=11)


@pytest.fixture(scope="module")
def params(cfg):
    return model.init_params(cfg)


def rand_image(seed, size=64):
    r = np.random.Generator(np.random.Philox(seed))
    return r.uniform(size=(3, size, size))


class TestConfig:
    def test_size_must_divide_32(self):
        with pytest.raises(ShapeError):
            model.ModelConfig(input_size=48)

    def test_four_stages_required(self):
        with pytest.raises(ShapeError):
            model.ModelConfig(stage_channels=(8, 16, 32))

    def test_fused_channels(self, cfg):
        assert cfg.fused_channels == 32

    def test_header_round_trip(self, cfg):
        assert model.ModelConfig.from_header(cfg.header_items()) == cfg


class TestEncode:
    def test_pyramid_shapes(self, cfg, params):
        pyr = model.encode(params, cfg, rand_image(0))
        assert [p.shape for p in pyr] == [(8, 16, 16), (8, 8, 8), (8, 4, 4), (8, 2, 2)]

    def test_deterministic_init_and_forward(self, cfg):
        p1 = model.init_params(cfg)
        p2 = model.init_params(cfg)
        for k in p1:
            assert np.array_equal(p1[k].values, p2[k].values)
        img = rand_image(1)
        m1, f1 = model.forward(p1, cfg, img)
        m2, f2 = model.forward(p2, cfg, img)
        assert np.array_equal(m1.values, m2.values)
        assert np.array_equal(f1.values, f2.values)

    def test_zero_input_finite(self, cfg, params):
        m, f = model.forward(params, cfg, np.zeros((3, 64, 64)))
        assert np.all(np.isfinite(m.values)) and np.all(np.isfinite(f.values))

    def test_bad_input_shape(self, cfg, params):
        with pytest.raises(ShapeError):
            model.encode(params, cfg, np.zeros((3, 32, 32)))


class TestDecode:
    def test_all_ones_pyramid_update_is_identity(self):
        pyr = [T.constant(np.ones((8, n, n))) for n in (16, 8, 4, 2)]
        updated = model._multiply_updated(pyr)
        for u, n in zip(updated, (16, 8, 4, 2)):
            assert np.array_equal(u.values, np.ones((8, n, n)))

    def test_output_shape_and_range(self, cfg, params):
        m, f = model.forward(params, cfg, rand_image(2))
        assert m.shape == (64, 64)
        assert np.all(m.values > 0) and np.all(m.values < 1)
        assert f.shape == (32, 16, 16)

    def test_every_parameter_gets_gradient(self, cfg, params):
        img = rand_image(3)
        b = boxops.boxes_to_mask([(8, 8, 30, 30), (40, 36, 60, 55)], 64, 64)
        r = np.random.Generator(np.random.Philox(99))
        m_tea = np.clip(b + r.normal(0, 0.1, size=b.shape), 0, 1)
        f_tea = r.normal(size=(32, 16, 16))
        with T.Tape() as tape:
            m, f = model.forward(params, cfg, img)
            bundle, _ = losses.total_loss(m, f, b, m_tea, f_tea)
            tape.backward(bundle.total)
        missing = [k for k, p in params.items()
                   if p.grad is None or not np.any(p.grad != 0)]
        for p in params.values():
            p.zero_grad()
        assert not missing, f"dead parameters: {missing}"

    def test_fuse_is_nonparametric_concat(self, cfg, params):
        pyr = model.encode(params, cfg, rand_image(4))
        f = model.fuse_features(pyr)
        assert f.shape == (32, 16, 16)
        assert np.array_equal(f.values[:8], pyr[0].values)

    def test_constant_pyramid_fuses_constant(self):
        pyr = [T.constant(np.full((8, n, n), 0.3)) for n in (16, 8, 4, 2)]
        f = model.fuse_features(pyr)
        assert np.allclose(f.values, 0.3)


class TestTeacherForward:
    def test_equal_params_equal_outputs(self, cfg, params):
        img = rand_image(5)
        tp = model.clone_params(params)
        m, f = model.forward(params, cfg, img)
        m_t, f_t = model.forward_teacher(tp, cfg, img)
        assert np.array_equal(m.values, m_t)
        assert np.array_equal(f.values, f_t)

    def test_teacher_records_nothing(self, cfg, params):
        tp = model.clone_params(params)
        with T.Tape() as tape:
            model.forward_teacher(tp, cfg, rand_image(6))
            assert len(tape) == 0

    def test_clone_does_not_share_storage(self, cfg, params):
        tp = model.clone_params(params)
        name = next(iter(tp))
        tp[name].values[...] = 123.0
        assert not np.array_equal(tp[name].values, params[name].values)


class TestBatchingConsistency:
    def test_two_samples_one_tape_match_singles(self, cfg, params):
        imgs = [rand_image(7), rand_image(8)]
        singles = []
        for img in imgs:
            with T.Tape():
                m, f = model.forward(params, cfg, img)
                singles.append((m.values.copy(), f.values.copy()))
        with T.Tape():
            joint = [model.forward(params, cfg, img) for img in imgs]
        for (m, f), (ms, fs) in zip(joint, singles):
            assert np.array_equal(m.values, ms)
            assert np.array_equal(f.values, fs)


class TestModelStats:
    def test_parameter_count_stable(self, cfg, params):
        assert model.parameter_count(params) == 76289


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, cfg, params):
        path = os.path.join(tmp_path, "model.bsl")
        arrays = {f"student/{k}": p.values for k, p in params.items()}
        checkpoint.save_checkpoint(path, cfg.header_items(), arrays)
        header, loaded = checkpoint.load_checkpoint(path)
        assert model.ModelConfig.from_header(header) == cfg
        assert loaded.keys() == arrays.keys()
        for k in arrays:
            assert loaded[k].shape == arrays[k].shape
            assert np.array_equal(loaded[k], arrays[k])

    def test_save_is_deterministic(self, tmp_path, params, cfg):
        a1 = {k: p.values for k, p in params.items()}
        p1 = os.path.join(tmp_path, "a.bsl")
        p2 = os.path.join(tmp_path, "b.bsl")
        checkpoint.save_checkpoint(p1, cfg.header_items(), a1)
        checkpoint.save_checkpoint(p2, cfg.header_items(), a1)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "junk.bsl")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError):
            checkpoint.load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path, cfg):
        path = os.path.join(tmp_path, "trunc.bsl")
        checkpoint.save_checkpoint(path, cfg.header_items(), {"x": np.ones((4, 4))})
        raw = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(raw[:-9])
        with pytest.raises(DataError):
            checkpoint.load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            checkpoint.load_checkpoint(os.path.join(tmp_path, "absent.bsl"))
