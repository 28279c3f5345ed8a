"""Shared fixtures and independent oracles.

The oracles here are written as plain Python loops on purpose: they share no
code with the vectorised implementations they check.
"""

import math
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sigattn.jagged import JaggedBatch

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=150, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def loop_attention(q, k, v, n_q, n_k, mechanism="sigmoid", scale=None, bias=None):
    """Three nested loops over (z, h, query) with an inner key sum, scalar math only.

    ``bias=None`` means -log(n_k[z]) for sigmoid.
    """
    Z, L_q, H, D = q.shape
    alpha = 1.0 / math.sqrt(D) if scale is None else scale
    out = np.zeros((Z, L_q, H, D))
    for z in range(Z):
        b = -math.log(n_k[z]) if bias is None else bias
        for h in range(H):
            for i in range(n_q[z]):
                scores = []
                for j in range(n_k[z]):
                    s = 0.0
                    for c in range(D):
                        s += float(q[z, i, h, c]) * float(k[z, j, h, c])
                    scores.append(alpha * s)
                if mechanism == "softmax":
                    m = max(scores)
                    e = [math.exp(s - m) for s in scores]
                    tot = sum(e)
                    w = [x / tot for x in e]
                else:
                    w = [1.0 / (1.0 + math.exp(-(s + b))) for s in scores]
                for j, wj in enumerate(w):
                    for c in range(D):
                        out[z, i, h, c] += wj * float(v[z, j, h, c])
    return out


def random_batch(rng, Z, L, H, D, n_q=None, n_k=None, L_k=None, dtype=np.float64):
    L_k = L if L_k is None else L_k
    if n_q is None:
        n_q = rng.integers(1, L + 1, Z)
    if n_k is None:
        n_k = np.minimum(n_q, L_k)
    n_q = np.asarray(n_q, dtype=np.int64)
    n_k = np.asarray(n_k, dtype=np.int64)
    qm = (np.arange(L)[None, :] < n_q[:, None])[:, :, None, None]
    km = (np.arange(L_k)[None, :] < n_k[:, None])[:, :, None, None]
    q = rng.standard_normal((Z, L, H, D)) * qm
    k = rng.standard_normal((Z, L_k, H, D)) * km
    v = rng.standard_normal((Z, L_k, H, D)) * km
    return JaggedBatch(q.astype(dtype), k.astype(dtype), v.astype(dtype), n_q, n_k)


def padded_grad(batch, rng):
    """Upstream gradient that is zero at padded query rows."""
    dO = rng.standard_normal(batch.q.shape)
    return (dO * batch.query_mask()[:, :, None, None]).astype(batch.dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        name = report.nodeid.split("::test_criterion_", 1)[1]
        _CRITERIA.setdefault(name, report.outcome)
        if report.outcome != "passed":
            _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        num, _, title = name.partition("_")
        verdict = "PASS" if _CRITERIA[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {int(num):>2} {verdict}  {title.replace('_', ' ')}")
