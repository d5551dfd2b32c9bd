"""Container format and optimizer checks.

AdamW is compared against torch.optim.AdamW (test-only dependency) and a
hand-computed first step; the schedule against its closed form.
"""

from __future__ import annotations

import math
import struct

import numpy as np
import pytest

from vaemo import arrayio
from vaemo.autodiff import Tensor
from vaemo.errors import FormatError, NumericError, ParameterError
from vaemo.optim import AdamWState, adamw_step, cosine_lr

RNG = np.random.default_rng(11)


def test_container_roundtrip(tmp_path):
    arrays = {
        "a.weight": RNG.normal(size=(3, 4)).astype(np.float32),
        "b": RNG.normal(size=7).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
    }
    path = tmp_path / "x.vaem"
    arrayio.write_arrays(path, arrays)
    back = arrayio.read_arrays(path)
    assert set(back) == set(arrays)
    for name in arrays:
        assert back[name].dtype == np.float32
        assert np.array_equal(back[name], np.asarray(arrays[name], dtype=np.float32))


def test_container_bytes_independent_of_insertion_order():
    a = {"x": np.ones(2, np.float32), "y": np.zeros(3, np.float32)}
    b = {"y": np.zeros(3, np.float32), "x": np.ones(2, np.float32)}
    assert arrayio.pack_arrays(a) == arrayio.pack_arrays(b)


def test_container_empty_is_valid():
    assert arrayio.unpack_arrays(arrayio.pack_arrays({})) == {}


def test_container_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        arrayio.unpack_arrays(b"NOPE" + b"\x00" * 16)


def test_container_bad_version():
    data = bytearray(arrayio.pack_arrays({"x": np.ones(1, np.float32)}))
    data[4:6] = struct.pack("<H", 9)
    with pytest.raises(FormatError, match="version"):
        arrayio.unpack_arrays(bytes(data))


def test_container_truncation():
    data = arrayio.pack_arrays({"x": np.ones(5, np.float32)})
    with pytest.raises(FormatError, match="truncated"):
        arrayio.unpack_arrays(data[:-3])


def test_container_trailing_bytes():
    data = arrayio.pack_arrays({"x": np.ones(1, np.float32)})
    with pytest.raises(FormatError, match="trailing"):
        arrayio.unpack_arrays(data + b"\x00")


def test_container_duplicate_names():
    body = arrayio.pack_arrays({"x": np.ones(1, np.float32)})
    entry = body[10:]  # single entry after the header
    dup = body[:4] + struct.pack("<HI", arrayio.VERSION, 2) + entry + entry
    with pytest.raises(FormatError, match="duplicate"):
        arrayio.unpack_arrays(dup)


# ---------------------------------------------------------------- optimizer


def test_adamw_first_step_closed_form():
    p = {"w": Tensor(np.array([1.0], np.float32), requires_grad=True)}
    state = AdamWState()
    adamw_step(p, {"w": np.array([1.0], np.float32)}, state, lr=0.1, beta1=0.9, beta2=0.999)
    # bias-corrected m_hat = v_hat = 1 on the first step with g = 1
    np.testing.assert_allclose(p["w"].data, 1.0 - 0.1 * 1.0 / (1.0 + 1e-8), atol=1e-7)


def test_adamw_matches_torch_reference():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(4, 3)).astype(np.float32)
    b0 = rng.normal(size=3).astype(np.float32)
    grads = [
        {"w": rng.normal(size=(4, 3)).astype(np.float32), "b": rng.normal(size=3).astype(np.float32)}
        for _ in range(5)
    ]

    mine = {
        "w": Tensor(w0.copy(), requires_grad=True),
        "b": Tensor(b0.copy(), requires_grad=True),
    }
    state = AdamWState()
    for g in grads:
        adamw_step(
            mine,
            g,
            state,
            lr=0.01,
            beta1=0.9,
            beta2=0.95,
            weight_decay=0.05,
            no_decay={"b"},
        )

    tw = torch.nn.Parameter(torch.tensor(w0.astype(np.float64)))
    tb = torch.nn.Parameter(torch.tensor(b0.astype(np.float64)))
    opt = torch.optim.AdamW(
        [
            {"params": [tw], "weight_decay": 0.05},
            {"params": [tb], "weight_decay": 0.0},
        ],
        lr=0.01,
        betas=(0.9, 0.95),
        eps=1e-8,
    )
    for g in grads:
        tw.grad = torch.tensor(g["w"].astype(np.float64))
        tb.grad = torch.tensor(g["b"].astype(np.float64))
        opt.step()

    np.testing.assert_allclose(mine["w"].data, tw.detach().numpy(), atol=1e-5)
    np.testing.assert_allclose(mine["b"].data, tb.detach().numpy(), atol=1e-5)


def test_adamw_rejects_nonfinite_gradient():
    p = {"w": Tensor(np.ones(2, np.float32), requires_grad=True)}
    bad = np.array([1.0, np.nan], np.float32)
    with pytest.raises(NumericError, match="'w'"):
        adamw_step(p, {"w": bad}, AdamWState(), lr=0.1)


def test_adamw_validates_hyperparameters():
    p = {"w": Tensor(np.ones(1, np.float32), requires_grad=True)}
    g = {"w": np.ones(1, np.float32)}
    with pytest.raises(ParameterError):
        adamw_step(p, g, AdamWState(), lr=-0.1)
    with pytest.raises(ParameterError):
        adamw_step(p, g, AdamWState(), lr=0.1, beta1=1.0)


def test_adamw_zero_grad_zero_decay_is_identity():
    w0 = np.array([1.5, -2.0], np.float32)
    p = {"w": Tensor(w0.copy(), requires_grad=True)}
    adamw_step(p, {"w": np.zeros(2, np.float32)}, AdamWState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, w0)


def test_adamw_converges_on_quadratic():
    p = {"w": Tensor(np.array([0.0], np.float32), requires_grad=True)}
    state = AdamWState()
    for _ in range(200):
        g = 2.0 * (p["w"].data - 3.0)
        adamw_step(p, {"w": g.astype(np.float32)}, state, lr=0.05, beta2=0.999)
    assert abs(float(p["w"].data[0]) - 3.0) < 1e-2


def test_cosine_schedule_closed_form():
    base = 1.2e-3
    assert cosine_lr(0, 100, base, 0.0) == base
    assert cosine_lr(100, 100, base, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(50, 100, base, 0.0) == pytest.approx(base / 2)
    # linear warmup: 10 warmup steps at fraction 0.1
    assert cosine_lr(5, 100, base, 0.1) == pytest.approx(base * 0.5)
    # value at the warmup boundary equals the cosine start
    assert cosine_lr(10, 100, base, 0.1) == pytest.approx(base)


def test_cosine_schedule_monotone_after_warmup():
    vals = [cosine_lr(s, 200, 1.0, 0.05) for s in range(10, 201)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[0] == pytest.approx(1.0)


def test_cosine_schedule_matches_formula_at_samples():
    total, base, wf = 400, 0.3, 0.05
    warm = wf * total
    for step in (20, 50, 123, 399):
        expected = base * 0.5 * (1 + math.cos(math.pi * (step - warm) / (total - warm)))
        assert cosine_lr(step, total, base, wf) == pytest.approx(expected)


def test_cosine_schedule_domain_errors():
    with pytest.raises(ParameterError):
        cosine_lr(-1, 10, 1.0)
    with pytest.raises(ParameterError):
        cosine_lr(11, 10, 1.0)
    with pytest.raises(ParameterError):
        cosine_lr(0, 0, 1.0)
    with pytest.raises(ParameterError):
        cosine_lr(0, 10, 1.0, warmup_fraction=1.0)
