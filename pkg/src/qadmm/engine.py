"""Quantized asynchronous consensus ADMM, simulated in discrete rounds.

Asynchrony is modelled as membership in the active set ``A_r``: only active
nodes update and upload in round ``r``. A node left out for ``tau - 1``
consecutive rounds is forced into the next active set, and the server only
updates once at least ``P`` nodes are active.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .eflink import EfChannel, MirrorEstimate
from .numkit import RngStream
from .quantize import FLAG_BITS, SERVER_ID, BitLedger, CompressorConfig


class AsyncOracle:
    """Two-group Bernoulli model of which nodes finish within the next round.

    ``fixed-split`` assigns a random half of the nodes to the slow group once;
    ``per-call-bernoulli`` re-assigns every node to a group by a fair coin on
    each call.
    """

    MODES = ("fixed-split", "per-call-bernoulli")

    def __init__(self, n_nodes: int, rng: RngStream, *, mode: str = "fixed-split",
                 p_slow: float = 0.1, p_fast: float = 0.8):
        if mode not in self.MODES:
            raise ValueError(f"unknown oracle mode {mode!r}")
        for name, p in (("p_slow", p_slow), ("p_fast", p_fast)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        self.n_nodes = n_nodes
        self.rng = rng
        self.mode = mode
        self.p_slow = p_slow
        self.p_fast = p_fast
        self.slow = None
        if mode == "fixed-split":
            perm = rng.permutation(n_nodes)
            self.slow = np.zeros(n_nodes, dtype=bool)
            self.slow[perm[: n_nodes // 2]] = True

    def __call__(self) -> set[int]:
        if self.mode == "fixed-split":
            slow = self.slow
        else:
            slow = self.rng.uniform(self.n_nodes) < 0.5
        prob = np.where(slow, self.p_slow, self.p_fast)
        picked = self.rng.uniform(self.n_nodes) < prob
        return set(np.flatnonzero(picked).tolist())


class FullOracle:
    """Every node completes every round."""

    def __init__(self, n_nodes: int):
        self.n_nodes = n_nodes

    def __call__(self) -> set[int]:
        return set(range(self.n_nodes))


@dataclass
class NodeState:
    id: int
    x: np.ndarray
    u: np.ndarray
    z_hat: MirrorEstimate
    x_channel: EfChannel
    u_channel: EfChannel
    local: object


@dataclass
class ServerState:
    z: np.ndarray
    x_hat: list[MirrorEstimate]
    u_hat: list[MirrorEstimate]
    z_channel: EfChannel
    regularizer: object
    rho: float
    tau: int
    P: int = 1
    d: np.ndarray = None
    active: set[int] = field(default_factory=set)

    def __post_init__(self):
        if self.d is None:
            self.d = np.zeros(len(self.x_hat), dtype=np.int64)


def node_primal_update(node: NodeState, rho: float) -> np.ndarray:
    node.x = node.local.solve(node.z_hat.value, node.u, rho, node.x)
    return node.x


def node_dual_update(node: NodeState) -> np.ndarray:
    node.u = node.u + (node.x - node.z_hat.value)
    return node.u


def server_consensus_update(server: ServerState) -> np.ndarray:
    """``argmin_z h(z) + rho/2 sum_i ||x_hat_i - z + u_hat_i||^2``."""
    n = len(server.x_hat)
    stacked = np.stack([xh.value for xh in server.x_hat]) + np.stack([uh.value for uh in server.u_hat])
    server.z = server.regularizer.consensus(stacked.mean(axis=0), server.rho, n)
    return server.z


def scheduler_step(server: ServerState, oracle, tau: int) -> set[int]:
    """Advance staleness counters past ``server.active`` and draw the next active set.

    Returns ``oracle() | {i : d_i == tau - 1}``, topped up by further oracle
    draws until it holds at least ``server.P`` nodes.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    n = len(server.d)
    nxt = set(oracle())
    for i in range(n):
        if i in server.active:
            server.d[i] = 0
        else:
            server.d[i] += 1
    nxt |= {i for i in range(n) if server.d[i] == tau - 1}
    while len(nxt) < server.P:
        nxt |= set(oracle())
    return nxt


def initial_active_set(server: ServerState, oracle, tau: int) -> set[int]:
    nxt = set(oracle()) | {i for i in range(len(server.d)) if server.d[i] == tau - 1}
    while len(nxt) < server.P:
        nxt |= set(oracle())
    return nxt


@dataclass
class RoundInfo:
    iteration: int
    active: frozenset
    uplink_bits: int
    downlink_bits: int


class QADMM:
    """Nodes, server and links of one simulated run.

    Construction performs the full-precision initialization exchange of
    ``x_i``, ``u_i`` and ``z``; each :meth:`run_round` call then executes one
    iteration of the protocol.
    """

    def __init__(self, locals_, regularizer, *, rho: float, compressor: CompressorConfig,
                 tau: int = 1, P: int = 1, oracle=None, rng: RngStream | None = None,
                 x0=None, u0=None):
        n = len(locals_)
        if not 1 <= P <= n:
            raise ValueError(f"P must lie in [1, {n}], got {P}")
        if tau < 1:
            raise ValueError("tau must be >= 1")
        if rho <= 0:
            raise ValueError("rho must be positive")
        if compressor.kind == "stochastic" and rng is None:
            raise ValueError("a stochastic compressor needs an RngStream")
        M = locals_[0].dim
        self.M = M
        self.n = n
        self.rho = rho
        self.tau = tau
        self.compressor = compressor
        self.oracle = oracle if oracle is not None else FullOracle(n)
        self.ledger = BitLedger()
        self.r = 0
        boot_bits = FLAG_BITS + M * compressor.full_precision_bits

        def stream(label):
            return rng.child(label) if rng is not None else None

        # full-precision initialization: x_i^(0), u_i^(0) up, z^(0) down, verbatim
        self.nodes = []
        x_hat, u_hat = [], []
        for i, local in enumerate(locals_):
            x = np.zeros(M) if x0 is None else np.array(x0[i], dtype=np.float64)
            u = np.zeros(M) if u0 is None else np.array(u0[i], dtype=np.float64)
            self.ledger.charge("up", 2 * boot_bits)
            x_hat.append(MirrorEstimate(x))
            u_hat.append(MirrorEstimate(u))
            xc = EfChannel(x, compressor, tensor_id="x", sender=i, direction="up",
                           ledger=self.ledger, rng=stream(f"x/{i}"))
            uc = EfChannel(u, compressor, tensor_id="u", sender=i, direction="up",
                           ledger=self.ledger, rng=stream(f"u/{i}"))
            self.nodes.append(NodeState(i, x, u, None, xc, uc, local))

        self.server = ServerState(np.zeros(M), x_hat, u_hat, None, regularizer, rho, tau, P)
        z = server_consensus_update(self.server)
        self.server.z_channel = EfChannel(z, compressor, tensor_id="z", sender=SERVER_ID, direction="down",
                                          ledger=self.ledger, rng=stream("z"), copies=n)
        self.ledger.charge("down", n * boot_bits)
        for node in self.nodes:
            node.z_hat = MirrorEstimate(z)
        self._pending_z = None
        self.server.active = initial_active_set(self.server, self.oracle, tau)

    @property
    def active(self) -> set[int]:
        return self.server.active

    def run_round(self) -> RoundInfo:
        r = self.r
        server = self.server
        if self._pending_z is not None:
            for node in self.nodes:
                node.z_hat.apply(self._pending_z)
        active = server.active
        for i in sorted(active):
            node = self.nodes[i]
            node_primal_update(node, self.rho)
            node_dual_update(node)
            mx = node.x_channel.prepare_send(node.x, r)
            node.x_channel.commit(mx)
            server.x_hat[i].apply(mx)
            mu = node.u_channel.prepare_send(node.u, r)
            node.u_channel.commit(mu)
            server.u_hat[i].apply(mu)
        if len(active) < server.P:
            raise RuntimeError(f"server update with {len(active)} < P={server.P} active nodes")
        nxt = scheduler_step(server, self.oracle, self.tau)
        server_consensus_update(server)
        self._pending_z = server.z_channel.prepare_send(server.z, r)
        server.z_channel.commit(self._pending_z)
        info = RoundInfo(r + 1, frozenset(active), self.ledger.uplink_bits, self.ledger.downlink_bits)
        server.active = nxt
        self.r += 1
        return info

    @property
    def xs(self) -> list[np.ndarray]:
        return [node.x for node in self.nodes]

    @property
    def us(self) -> list[np.ndarray]:
        return [node.u for node in self.nodes]

    @property
    def z(self) -> np.ndarray:
        return self.server.z

