"""Network init, forward contracts, checkpoint round-trips."""

import numpy as np
import pytest

from dcfseg import segnet
from dcfseg.autodiff import ShapeError, Tape, Tensor4, sum_all


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = segnet.init_params(7), segnet.init_params(7)
        for x, y in zip(a.arrays, b.arrays):
            assert x.tobytes() == y.tobytes()

    def test_different_seeds_differ_almost_everywhere(self):
        a, b = segnet.init_params(7), segnet.init_params(8)
        diff = equal = 0
        for name, x, y in zip(a.names, a.arrays, b.arrays):
            if name.endswith(".bias"):
                continue  # biases are zero by construction
            diff += int((x != y).sum())
            equal += int((x == y).sum())
        assert diff / (diff + equal) >= 0.99

    def test_biases_exactly_zero(self):
        params = segnet.init_params(3)
        for name, arr in zip(params.names, params.arrays):
            if name.endswith(".bias"):
                assert (arr == 0.0).all()

    def test_glorot_bounds(self):
        params = segnet.init_params(11)
        for name, arr in zip(params.names, params.arrays):
            if not name.endswith(".weight"):
                continue
            cout, cin, k, _ = arr.shape
            bound = np.sqrt(6.0 / (cin * k * k + cout * k * k))
            assert np.abs(arr).max() <= bound

    def test_structure_identical_across_seeds(self):
        assert segnet.init_params(1).same_structure(segnet.init_params(2))


class TestForward:
    def test_channel_sums_to_one(self, rng):
        params = segnet.init_params(0)
        x = Tensor4(rng.random((2, 1, 16, 16), dtype=np.float32))
        probs = segnet.forward(params, x)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_params_give_uniform(self, rng):
        params = segnet.init_params(0)
        zeros = params.copy()
        for arr in zeros.arrays:
            arr[:] = 0.0
        x = Tensor4(rng.random((1, 1, 8, 8), dtype=np.float32))
        probs = segnet.forward(zeros, x)
        np.testing.assert_array_equal(probs.data, 0.5)

    def test_tape_on_off_same_probabilities(self, rng):
        params = segnet.init_params(4)
        data = rng.random((1, 1, 16, 16), dtype=np.float32)
        off = segnet.forward(params, Tensor4(data))
        tape = Tape()
        on = segnet.forward(params, Tensor4(data), tape=tape)
        np.testing.assert_array_equal(off.data, on.data)
        assert off.tape is None and on.tape is tape

    def test_no_tape_no_gradient_state(self, rng):
        params = segnet.init_params(4)
        probs = segnet.forward(params, Tensor4(rng.random((1, 1, 8, 8), dtype=np.float32)))
        assert probs.tape is None

    def test_indivisible_dims_rejected(self, rng):
        params = segnet.init_params(0)
        with pytest.raises(ShapeError, match="divisible"):
            segnet.forward(params, Tensor4(np.zeros((1, 1, 6, 8), np.float32)))

    def test_output_spatial_dims_match_input(self, rng):
        params = segnet.init_params(0)
        probs = segnet.forward(params, Tensor4(rng.random((3, 1, 12, 20), dtype=np.float32)))
        assert probs.dims == (3, 2, 12, 20)

    def test_gradients_reach_every_segment(self, rng):
        params = segnet.init_params(5)
        tape = Tape()
        leaves = params.watch_all(tape)
        probs = segnet.forward_leaves(leaves, Tensor4(rng.random((1, 1, 8, 8), dtype=np.float32)))
        tape.backward(sum_all(probs * Tensor4(rng.normal(size=(1, 2, 8, 8)).astype(np.float32))))
        for name, leaf in zip(params.names, leaves):
            assert leaf.grad is not None, name
            assert np.isfinite(leaf.grad).all(), name


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = segnet.init_params(9)
        path = tmp_path / "net.ckpt"
        segnet.save_checkpoint(params, path)
        loaded = segnet.load_checkpoint(path)
        assert loaded.names == params.names
        for x, y in zip(params.arrays, loaded.arrays):
            assert x.tobytes() == y.tobytes()

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "net.ckpt"
        segnet.save_checkpoint(segnet.init_params(0), path)
        assert path.read_bytes()[:4] == b"DCF1"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(segnet.CheckpointError, match="magic"):
            segnet.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "net.ckpt"
        segnet.save_checkpoint(segnet.init_params(0), path)
        blob = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(segnet.CheckpointError, match="truncated"):
            segnet.load_checkpoint(tmp_path / "cut.ckpt")

    def test_forward_identical_after_reload(self, tmp_path, rng):
        params = segnet.init_params(2)
        path = tmp_path / "net.ckpt"
        segnet.save_checkpoint(params, path)
        loaded = segnet.load_checkpoint(path)
        imgs = rng.random((2, 8, 8), dtype=np.float32)
        np.testing.assert_array_equal(segnet.predict_probs(params, imgs),
                                      segnet.predict_probs(loaded, imgs))
