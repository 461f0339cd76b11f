"""Fusion math against the naive product oracle, plus training behaviour."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ztw.autodiff import Tensor
from ztw.ensembles import (EnsembleParams, additive_combine, ensemble_flops,
                           geometric_combine, read_head_log_probs, softplus_inv,
                           stage_outputs, train_ensembles, write_head_log_probs)
from ztw.exceptions import NumericError, StageError
from ztw.rng import SplitMix64


def params_with(w, b):
    """Stage params whose effective weights/priors equal w and b exactly."""
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return EnsembleParams(raw_w=Tensor([softplus_inv(v) for v in w]),
                          raw_b=Tensor([softplus_inv(v) for v in b]),
                          stage=len(w))


def naive_geometric(p_list, w, b):
    """Direct product form; only valid on well-conditioned inputs."""
    prod = np.asarray(b, dtype=np.float64).copy()
    for p, wj in zip(p_list, w):
        prod = prod * np.asarray(p, dtype=np.float64) ** wj
    return prod / prod.sum()


def random_dists(rng, m, k):
    out = []
    for _ in range(m):
        logits = rng.uniform_array((k,), -3, 3)
        e = np.exp(logits - logits.max())
        p = e / e.sum()
        out.append(np.maximum(p, 1e-6) / np.maximum(p, 1e-6).sum())
    return out


def test_single_head_identity():
    p1 = np.array([0.3, 0.5, 0.2])
    out = geometric_combine([np.log(p1)], params_with([1.0], [1 / 3, 1 / 3, 1 / 3]))
    assert np.allclose(out.q[0], p1, atol=1e-12)


def test_two_head_hand_oracle():
    # naive products: 0.48 and 0.08 -> normalized 6/7, 1/7
    p1, p2 = np.array([0.8, 0.2]), np.array([0.6, 0.4])
    out = geometric_combine([np.log(p1), np.log(p2)], params_with([1.0, 1.0], [1.0, 1.0]))
    assert np.allclose(out.q[0], [6 / 7, 1 / 7], atol=1e-12)
    assert np.allclose(naive_geometric([p1, p2], [1, 1], [1, 1]), [6 / 7, 1 / 7], atol=1e-15)


def test_underflow_construction_stays_finite():
    p1 = np.array([1e-300, 1.0 - 1e-300])
    p2 = np.array([1e-300, 1.0 - 1e-300])
    params = params_with([1.0, 1.0], [0.5, 0.5])
    # naive route underflows to a hard zero
    assert (p1[0] ** 1.0) * (p2[0] ** 1.0) == 0.0
    out = geometric_combine([np.log(p1), np.log(p2)], params)
    assert np.all(np.isfinite(out.log_q))
    assert abs(out.q.sum() - 1.0) <= 1e-9


def test_oracle_equivalence_on_well_conditioned_inputs():
    rng = SplitMix64(8)
    for _ in range(200):
        m = 1 + rng.randint(4)
        k = 2 + rng.randint(4)
        ps = random_dists(rng, m, k)
        w = [0.2 + 2 * rng.uniform() for _ in range(m)]
        b = [0.1 + rng.uniform() for _ in range(k)]
        got = geometric_combine([np.log(p) for p in ps], params_with(w, b)).q[0]
        want = naive_geometric(ps, w, b)
        assert np.max(np.abs(got - want)) < 1e-9


def test_prior_scale_invariance():
    rng = SplitMix64(9)
    ps = random_dists(rng, 3, 4)
    logs = [np.log(p) for p in ps]
    w = [0.5, 1.0, 1.5]
    b = np.array([0.2, 0.4, 0.3, 0.1])
    q1 = geometric_combine(logs, params_with(w, b)).q
    q2 = geometric_combine(logs, params_with(w, 7.5 * b)).q
    assert np.allclose(q1, q2, atol=1e-12)


def test_large_weight_dominates():
    rng = SplitMix64(10)
    ps = random_dists(rng, 3, 5)
    logs = [np.log(p) for p in ps]
    for j in range(3):
        w = [1e-6] * 3
        w[j] = 50.0
        q = geometric_combine(logs, params_with(w, [0.2] * 5)).q[0]
        assert q.argmax() == ps[j].argmax()


def test_stage_mismatch():
    with pytest.raises(StageError):
        geometric_combine([np.log([0.5, 0.5])], params_with([1.0, 1.0], [0.5, 0.5]))


def test_rejects_non_log_distribution():
    with pytest.raises(NumericError):
        geometric_combine([np.array([0.5, 0.5])], params_with([1.0], [0.5, 0.5]))


def test_additive_single_head_near_identity():
    p1 = np.array([0.7, 0.1, 0.2])
    out = additive_combine([p1], params_with([1.0], [1e-9, 1e-9, 1e-9]))
    assert np.allclose(out.q[0], p1, atol=1e-6)


def test_additive_disagreement_averages():
    p1, p2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    out = additive_combine([p1, p2], params_with([1.0, 1.0], [1e-9, 1e-9]))
    assert np.allclose(out.q[0], [0.5, 0.5], atol=1e-6)


def test_additive_consensus_is_fixed_point():
    p = np.array([0.2, 0.5, 0.3])
    out = additive_combine([p, p, p], params_with([0.4, 1.0, 2.0], [1e-9] * 3))
    assert np.allclose(out.q[0], p, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(2, 6))
def test_normalization_property(seed, m, k):
    rng = SplitMix64(seed)
    ps = random_dists(rng, m, k)
    w = [0.1 + 3 * rng.uniform() for _ in range(m)]
    b = [0.05 + rng.uniform() for _ in range(k)]
    q = geometric_combine([np.log(p) for p in ps], params_with(w, b)).q
    assert abs(q.sum() - 1.0) <= 1e-9
    assert np.all(q > 0)


def head_fixture(seed=0, n=400, k=4, m=3):
    """Synthetic per-head log-probs of increasing quality plus labels."""
    rng = SplitMix64(seed)
    labels = np.array([rng.randint(k) for _ in range(n)])
    logs = []
    for j in range(m):
        sharp = 0.5 + 1.2 * j
        logits = rng.uniform_array((n, k), -1, 1)
        logits[np.arange(n), labels] += sharp
        z = logits - logits.max(axis=1, keepdims=True)
        logs.append(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))
    return logs, labels


def head_loss(log_p, labels):
    return float(-log_p[np.arange(len(labels)), labels].mean())


def test_training_reaches_best_head():
    logs, labels = head_fixture(seed=3)
    ensembles, losses = train_ensembles(logs, labels, kind="geometric",
                                        epochs=500, lr=0.1)
    for m, stage_loss in enumerate(losses, start=1):
        best_head = min(head_loss(logs[j], labels) for j in range(m))
        assert stage_loss <= best_head + 0.01, f"stage {m}: {stage_loss} vs {best_head}"


def test_single_stage_feasibility():
    logs, labels = head_fixture(seed=4, m=1)
    _, losses = train_ensembles(logs, labels, epochs=500, lr=0.1)
    assert losses[0] <= head_loss(logs[0], labels) + 1e-6 + 0.01


def test_training_deterministic():
    logs, labels = head_fixture(seed=5, n=100)

    def run():
        ens, _ = train_ensembles(logs, labels, epochs=50, lr=0.1)
        return b"".join(p.raw_w.data.tobytes() + p.raw_b.data.tobytes() for p in ens)

    assert run() == run()


def test_additive_training_runs():
    logs, labels = head_fixture(seed=6, n=150)
    ens, losses = train_ensembles(logs, labels, kind="additive", epochs=200, lr=0.1)
    assert len(ens) == 3
    assert all(np.isfinite(l) for l in losses)
    outs = stage_outputs(logs, ens, kind="additive")
    for q in outs:
        assert np.allclose(q.sum(axis=1), 1.0, atol=1e-9)


def test_flops_convention():
    assert ensemble_flops(1, 4) == 2 * 4 + 16
    assert ensemble_flops(3, 10) == 2 * 3 * 10 + 40


def test_log_prob_cache_roundtrip(tmp_path):
    logs, _ = head_fixture(seed=7, n=13, k=3, m=2)
    path = tmp_path / "cache.csv"
    write_head_log_probs(str(path), logs)
    back = read_head_log_probs(str(path))
    for a, b in zip(logs, back):
        assert np.array_equal(a, b)
    header = path.read_text().splitlines()[0]
    assert header == "sample_id,head,class,log_prob"
