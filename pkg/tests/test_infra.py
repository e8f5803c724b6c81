"""Optimizer, checkpoint, and RNG plumbing."""
import numpy as np
import pytest

from geofm import tensor as T
from geofm.checkpoint import load_checkpoint, load_into, save_checkpoint
from geofm.errors import CheckpointError, NumericError
from geofm.module import Linear, Module
from geofm.optim import AdamW
from geofm.rng import Rng

from conftest import assert_close


# ------------------------------------------------------------------- AdamW
def test_adamw_zero_grad_no_decay_keeps_params():
    p = T.Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros_like(p.data)
    before = p.data.copy()
    opt.step()
    assert_close(p.data, before)


def test_adamw_first_step_hand_value():
    p = T.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    # mhat = 1, vhat = 1 -> update = lr * 1/(1+eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * (1.0 / (1.0 + 1e-8)), abs=1e-6)


def test_adamw_decoupled_decay_with_zero_grad():
    p = T.Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.1)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(2.0 * (1.0 - 0.01))


def test_adamw_rejects_nonfinite_grad():
    p = T.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = AdamW({"weights.w": p}, lr=0.1)
    p.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(NumericError, match="weights.w"):
        opt.step()


def test_adamw_converges_on_quadratic():
    p = T.Tensor(np.array([5.0], dtype=np.float32), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        loss = ((p - 1.5) ** 2.0).sum()
        loss.backward()
        opt.step()
    assert abs(p.data[0] - 1.5) < 1e-2


# ------------------------------------------------------------------- module
def test_module_names_follow_registration_order(rng):
    class Net(Module):
        def __init__(self):
            super().__init__()
            self.fc1 = Linear(3, 4, rng.child("fc1"))
            self.fc2 = Linear(4, 2, rng.child("fc2"))

    names = list(Net().named_parameters())
    assert names == ["fc1.w", "fc1.b", "fc2.w", "fc2.b"]


# ---------------------------------------------------------------- checkpoint
def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {
        "a.w": rng.normal((3, 4)),
        "b.bias": rng.normal((7,)),
        "scalar": np.array(2.5, dtype=np.float32),
    }
    save_checkpoint(tmp_path / "ck", tensors)
    loaded = load_checkpoint(tmp_path / "ck")
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == np.float32
        assert_close(loaded[k], tensors[k], tol=0)


def test_checkpoint_manifest_is_little_endian_f32(tmp_path):
    import json

    save_checkpoint(tmp_path / "ck", {"x": np.arange(4, dtype=np.float32)})
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest[0]["dtype"] == "f32"
    raw = (tmp_path / "ck" / "tensors.bin").read_bytes()
    assert np.frombuffer(raw, dtype="<f4").tolist() == [0.0, 1.0, 2.0, 3.0]


def test_checkpoint_truncated_payload(tmp_path):
    save_checkpoint(tmp_path / "ck", {"x": np.arange(8, dtype=np.float32)})
    payload = tmp_path / "ck" / "tensors.bin"
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "ck")


def test_load_into_strict_reports_missing(tmp_path, rng):
    params = {"a": T.Tensor(rng.normal((2,)), requires_grad=True),
              "b": T.Tensor(rng.normal((2,)), requires_grad=True)}
    save_checkpoint(tmp_path / "ck", {"a": params["a"].data})
    loaded = load_checkpoint(tmp_path / "ck")
    with pytest.raises(CheckpointError, match="'b'"):
        load_into(params, loaded, strict=True)
    report = load_into(params, loaded, strict=False)
    assert report["loaded"] == ["a"] and report["missing"] == ["b"]


def test_load_into_shape_mismatch_names_tensor(tmp_path, rng):
    params = {"w": T.Tensor(rng.normal((2, 3)), requires_grad=True)}
    save_checkpoint(tmp_path / "ck", {"w": rng.normal((3, 2))})
    with pytest.raises(CheckpointError, match="'w'"):
        load_into(params, load_checkpoint(tmp_path / "ck"))


# ---------------------------------------------------------------------- rng
def test_rng_deterministic_per_seed():
    a = Rng(42).normal((5,))
    b = Rng(42).normal((5,))
    assert_close(a, b, tol=0)


def test_rng_children_independent_of_sibling_draws():
    root = Rng(7)
    child_a_first = root.child("a").normal((3,))
    _ = root.child("b").normal((100,))
    child_a_second = Rng(7).child("a").normal((3,))
    assert_close(child_a_first, child_a_second, tol=0)


def test_rng_distinct_names_distinct_streams():
    assert not np.allclose(Rng(7).child("a").normal((8,)), Rng(7).child("b").normal((8,)))


def test_trunc_normal_within_two_sigma():
    draws = Rng(3).trunc_normal((10000,), std=0.02)
    assert np.abs(draws).max() <= 0.04 + 1e-7
