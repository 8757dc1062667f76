import math

import numpy as np
import pytest

from spotdiff.schedule import (
    build_schedule,
    log_gene_zeta,
    schedule_table,
    subsample_indices,
    subsample_schedule,
)

TOL = 1e-12


def test_linear_t4_alpha_bar():
    s = build_schedule("power", 4, 1.0)
    assert np.allclose(s.alpha_bar, [1.0, 0.75, 0.5, 0.25, 0.0], atol=TOL)


def test_linear_t4_drop_and_revive():
    s = build_schedule("power", 4, 1.0)
    assert np.allclose(s.drop, [0.25, 1 / 3, 0.5, 1.0], atol=TOL)
    assert np.allclose(s.revive, [1.0, 0.5, 1 / 3, 0.25], atol=TOL)


def test_log_gene_schedule_endpoint():
    # (1/T)^(log_T G) = 1/G
    s = build_schedule("power", 50, log_gene_zeta(50, 100))
    assert s.alpha_bar[49] == pytest.approx(0.01, abs=1e-12)


def test_log_gene_zeta_values():
    assert log_gene_zeta(50, 100) == pytest.approx(math.log(100) / math.log(50), abs=1e-15)
    assert log_gene_zeta(50, 100) == pytest.approx(1.177184, abs=1e-6)
    assert log_gene_zeta(7, 7) == 1.0
    assert log_gene_zeta(10, 100) == pytest.approx(2.0, abs=1e-12)


def test_log_gene_zeta_rejects_degenerate():
    with pytest.raises(ValueError):
        log_gene_zeta(1, 100)
    with pytest.raises(ValueError):
        log_gene_zeta(10, 1)


def test_build_rejects_bad_args():
    with pytest.raises(ValueError):
        build_schedule("power", 0, 1.0)
    with pytest.raises(ValueError):
        build_schedule("power", 10, 0.0)
    with pytest.raises(ValueError):
        build_schedule("power", 10, -1.0)
    with pytest.raises(ValueError):
        build_schedule("geometric", 10, 1.0)


def test_cosine_endpoints_exact():
    s = build_schedule("cosine", 7)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[7] == 0.0
    mid = np.cos((np.arange(1, 7) / 7) * np.pi / 2) ** 2
    assert np.allclose(s.alpha_bar[1:7], mid, atol=TOL)


def test_linear_equals_power_zeta_one():
    a = build_schedule("linear", 9, 3.0)  # zeta argument ignored for linear
    b = build_schedule("power", 9, 1.0)
    assert np.array_equal(a.alpha_bar, b.alpha_bar)
    assert a.zeta == 1.0


@pytest.mark.parametrize("kind", ["power", "linear", "cosine"])
@pytest.mark.parametrize("T", [1, 2, 5, 50, 200])
def test_invariants_hold(kind, T):
    for zeta in (0.3, 1.0, 2.7):
        s = build_schedule(kind, T, zeta)
        s.validate(tol=TOL)
        # weight is revive, elementwise
        assert np.array_equal(s.weight, s.revive)
        # monotone mask ratio
        assert np.all(np.diff(1.0 - s.alpha_bar) > 0)


def test_random_schedules_telescope():
    rng = np.random.default_rng(7)
    for _ in range(20):
        kind = rng.choice(["power", "linear", "cosine"])
        T = int(rng.integers(1, 201))
        zeta = float(rng.uniform(0.3, 3.0))
        s = build_schedule(str(kind), T, zeta)
        s.validate(tol=TOL)
        q = 0.0
        for t in range(T, 0, -1):
            assert abs(q - s.alpha_bar[t]) <= TOL
            q = q + (1.0 - q) * s.revive[t - 1]
        assert abs(q - 1.0) <= TOL


def test_subsample_identity():
    s = build_schedule("linear", 4)
    sub = subsample_schedule(s, 4)
    assert np.array_equal(sub.alpha_bar, s.alpha_bar)
    assert np.array_equal(sub.revive, s.revive)


def test_subsample_half():
    s = build_schedule("linear", 4)
    sub = subsample_schedule(s, 2)
    assert np.allclose(sub.alpha_bar, [1.0, 0.5, 0.0], atol=TOL)
    assert np.allclose(sub.revive, [1.0, 0.5], atol=TOL)


def test_subsample_single_step():
    s = build_schedule("linear", 4)
    sub = subsample_schedule(s, 1)
    assert np.allclose(sub.alpha_bar, [1.0, 0.0], atol=TOL)
    assert np.allclose(sub.revive, [1.0], atol=TOL)


def test_subsample_rejects_out_of_range():
    s = build_schedule("linear", 4)
    with pytest.raises(ValueError):
        subsample_schedule(s, 0)
    with pytest.raises(ValueError):
        subsample_schedule(s, 5)


def test_subsample_closure_random():
    # any subsampled schedule satisfies all invariants
    rng = np.random.default_rng(3)
    for _ in range(20):
        T = int(rng.integers(2, 120))
        s = build_schedule("power", T, float(rng.uniform(0.3, 3.0)))
        K = int(rng.integers(1, T + 1))
        sub = subsample_schedule(s, K)
        sub.validate(tol=TOL)
        assert sub.alpha_bar[0] == 1.0 and sub.alpha_bar[-1] == 0.0


def test_subsample_indices_endpoints():
    idx = subsample_indices(50, 5)
    assert idx[0] == 0 and idx[-1] == 50
    assert all(b > a for a, b in zip(idx, idx[1:]))


def test_schedule_table_rows():
    s = build_schedule("linear", 4)
    rows = schedule_table(s)
    assert len(rows) == 5
    assert rows[0] == {"t": 0, "alpha_bar": 1.0, "drop": None, "revive": None, "weight": None}
    assert rows[1]["drop"] == pytest.approx(0.25)
    assert rows[4]["alpha_bar"] == 0.0
