"""Fast property checks runnable without pytest (``qadmm selftest``)."""
from __future__ import annotations

import numpy as np

from .eflink import EfChannel
from .engine import AsyncOracle, ServerState, scheduler_step
from .numkit import RngStream, max_norm, soft_threshold, spd_solve
from .quantize import CompressorConfig, compress, decode, decompress, encode, message_bits


def check_spd_solve(rng):
    for _ in range(20):
        B = rng.standard_normal((6, 6))
        G = B @ B.T + 6 * np.eye(6)
        rhs = rng.standard_normal(6)
        x = spd_solve(G, rhs)
        assert np.max(np.abs(G @ x - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))


def check_soft_threshold(rng):
    grid = np.linspace(-3, 3, 60001)
    for _ in range(20):
        v, k = rng.standard_normal(), abs(rng.standard_normal())
        best = grid[np.argmin(k * np.abs(grid) + 0.5 * (grid - v) ** 2)]
        assert abs(soft_threshold(np.array([v]), k)[0] - best) <= 1e-4


def check_quantizer(rng):
    cfg = CompressorConfig(q=3)
    stream = RngStream(1, "selftest/quantizer")
    delta = rng.standard_normal(8)
    draws = np.stack([decompress(compress(cfg, delta, stream)) for _ in range(20000)])
    assert np.all(np.abs(draws - delta) <= max_norm(delta) / cfg.levels * (1 + 1e-12))
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    # residual mean is exactly zero on deterministic (on-grid) elements
    assert np.all(np.abs((draws - delta).mean(axis=0)) <= 4 * se)


def check_codec(rng):
    cfg = CompressorConfig(q=3)
    stream = RngStream(2, "selftest/codec")
    for _ in range(50):
        msg = compress(cfg, rng.standard_normal(37), stream)
        back = decode(encode(msg), 37, cfg)
        assert np.array_equal(decompress(back), decompress(msg))
    assert message_bits(compress(cfg, np.ones(200), stream)) == 665


def check_error_feedback(rng):
    cfg = CompressorConfig(q=3)
    v = rng.standard_normal(10)
    ch = EfChannel(np.zeros(10), cfg, rng=RngStream(3, "selftest/ef"))
    for r in range(1, 50):
        y = (1 - 2.0 ** -r) * v
        delta = y - ch.mirror
        ch.send(y)
        assert max_norm(ch.mirror - y) <= max_norm(delta) / cfg.levels * (1 + 1e-12) + 1e-300


def check_scheduler(rng):
    tau, n = 3, 16
    oracle = AsyncOracle(n, RngStream(4, "selftest/oracle"))
    server = ServerState(None, [None] * n, [None] * n, None, None, 1.0, tau)
    server.active = set(range(n))
    last = np.zeros(n, dtype=int)
    for r in range(1, 2000):
        server.active = scheduler_step(server, oracle, tau)
        assert server.d.max() <= tau - 1
        for i in server.active:
            last[i] = r
        assert np.all(r - last <= tau)


CHECKS = [check_spd_solve, check_soft_threshold, check_quantizer, check_codec, check_error_feedback,
          check_scheduler]


def run(verbose: bool = True) -> bool:
    ok = True
    for check in CHECKS:
        rng = np.random.default_rng(12345)
        try:
            check(rng)
            status = "PASS"
        except AssertionError:
            status = "FAIL"
            ok = False
        if verbose:
            print(f"{status}  {check.__name__.removeprefix('check_')}")
    return ok
