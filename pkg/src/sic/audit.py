"""Executable checks of the six attribution axioms on random B-cos probes.

Each probe is a small random network (optionally topped with the evidence
ReLU and a similarity head) together with an input. Attributions are
feature-level: ``phi = W(x) * x`` over every input entry. Every probe draws
from its own generator, seeded by ``probe_seed(seed, axiom, k)``, so any
failure can be replayed in isolation.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .bcos import BCosConv2d, BCosLinear, BCosNetwork, GlobalAvgPool, explicit_summary_matrix, gradient_rows
from .head import Evidence, HeadConfig, SimilarityHead, SupportEntry, SupportSet
from .tensor import Tensor

AXIOMS = ("completeness", "sensitivity", "implementation_invariance", "dummy", "linearity", "symmetry")
TOLERANCE = {
    "completeness": 1e-4,
    "sensitivity": 0.0,
    "implementation_invariance": 1e-4,
    "dummy": 0.0,
    "linearity": 1e-4,
    "symmetry": 1e-6,
}
EXPONENTS = (1.0, 1.5, 2.0, 3.0)


def probe_seed(seed: int, axiom: str, k: int) -> int:
    return int(seed) * 1_000_000 + AXIOMS.index(axiom) * 10_000 + int(k)


class InputMask:
    """Fixed elementwise 0/1 mask; the network cannot see masked entries at all."""

    kind = "input_mask"

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=np.float32)

    def parameters(self) -> list:
        return []

    def out_shape(self, in_shape):
        if tuple(in_shape) != self.mask.shape:
            raise T.DimensionError(f"mask {self.mask.shape} does not match input {tuple(in_shape)}")
        return tuple(in_shape)

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        m = Tensor(np.broadcast_to(self.mask, x.shape).copy(), dtype=x.dtype)
        return T.mul(x, m)

    def summary_matrix(self, a: np.ndarray) -> sp.csr_matrix:
        return sp.diags(self.mask.ravel().astype(np.float64)).tocsr()


# -- probe construction -----------------------------------------------------------


@dataclass
class Probe:
    net: BCosNetwork
    x: np.ndarray
    unit: int

    def output(self, x: Optional[np.ndarray] = None) -> float:
        x = self.x if x is None else x
        return float(self.net.embed(x[None])[0][self.unit])

    def phi(self, strategy: str = "gradient", x: Optional[np.ndarray] = None) -> np.ndarray:
        x = self.x if x is None else x
        if strategy == "explicit":
            row = explicit_summary_matrix(self.net, x)[self.unit]
        else:
            row = gradient_rows(self.net, x, [self.unit])[0]
        return row.astype(np.float64) * x.astype(np.float64).ravel()


def _head_layers(rng: np.random.Generator, d: int, B: float) -> list:
    C = int(rng.integers(2, 4))
    ns = int(rng.integers(1, 3))
    entries = [SupportEntry(rng.uniform(0.05, 1.0, d).astype(np.float32), i, c) for i, c in enumerate(np.repeat(np.arange(C), ns))]
    cfg = HeadConfig(C, temperature=float(rng.choice([1.0, 10.0, 30.0])), n_support=ns, B=B)
    return [Evidence(), SimilarityHead(SupportSet(entries), cfg)]


def random_image_net(rng: np.random.Generator, with_head: Optional[bool] = None, mask: bool = False) -> BCosNetwork:
    c_in = int(rng.integers(2, 4))
    hw = int(rng.integers(4, 8))
    B = float(rng.choice(EXPONENTS))
    layers: list = []
    if mask:
        layers.append(InputMask((rng.random((c_in, hw, hw)) > 0.3).astype(np.float32)))
    prev = c_in
    for _ in range(int(rng.integers(1, 3))):
        ch = int(rng.integers(2, 5))
        k = int(rng.choice([1, 3]))
        layers.append(BCosConv2d.init(rng, prev, ch, k, B=B, stride=int(rng.integers(1, 3)), padding=int(k == 3)))
        prev = ch
    layers.append(GlobalAvgPool())
    d = int(rng.integers(2, 6))
    layers.append(BCosLinear.init(rng, prev, d, B=B))
    if with_head if with_head is not None else rng.random() < 0.5:
        layers += _head_layers(rng, d, B)
    return BCosNetwork(layers, (c_in, hw, hw))


def _probe(rng: np.random.Generator, net: BCosNetwork, x: Optional[np.ndarray] = None, tries: int = 20) -> Optional[Probe]:
    """Pick the output unit with the largest response; None if all are ~0."""
    for _ in range(tries):
        xi = rng.uniform(0.0, 1.0, net.input_shape).astype(np.float32) if x is None else x
        out = net.embed(xi[None])[0]
        j = int(np.argmax(np.abs(out)))
        if abs(out[j]) > 1e-4:
            return Probe(net, xi, j)
        if x is not None:
            return None
    return None


def random_probe(rng: np.random.Generator, **kw) -> Probe:
    while True:
        p = _probe(rng, random_image_net(rng, **kw))
        if p is not None:
            return p


def _scale(v: np.ndarray) -> float:
    return max(float(np.abs(v).max()), 1e-30)


# -- single-probe checks; each returns (passed, deviation) -----------------------


def check_completeness(rng: np.random.Generator) -> tuple:
    p = random_probe(rng)
    f = p.output()
    dev = max(abs(p.phi("gradient").sum() - f), abs(p.phi("explicit").sum() - f)) / abs(f)
    return dev <= TOLERANCE["completeness"], dev


def check_sensitivity(rng: np.random.Generator) -> tuple:
    """x and x_hat differ in entry i and f(x) != f(x_hat): phi_i must differ (not both zero)."""
    p = random_probe(rng)
    f = p.output()
    for _ in range(50):
        i = int(rng.integers(p.x.size))
        x_hat = p.x.copy().ravel()
        x_hat[i] += float(rng.choice([-1, 1]) * rng.uniform(0.25, 1.0))
        x_hat = x_hat.reshape(p.x.shape)
        if abs(p.output(x_hat) - f) > 1e-5 * abs(f):
            break
    else:
        return False, 1.0
    a, b = p.phi(x=p.x)[i], p.phi(x=x_hat)[i]
    ok = a != b and max(abs(a), abs(b)) > 0
    return ok, 0.0 if ok else 1.0


def reimplement(net: BCosNetwork, rng: np.random.Generator) -> BCosNetwork:
    """Functionally equivalent copy: positive weight rescaling plus hidden-channel permutation."""
    layers = []
    perm_in = None
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, BCosConv2d):
            w = layer.kernels.data.copy()
            if perm_in is not None:
                w = w[:, perm_in]
            perm_out = rng.permutation(w.shape[0])
            w = w[perm_out] * rng.uniform(0.1, 10.0, (w.shape[0], 1, 1, 1)).astype(np.float32)
            layers.append(BCosConv2d(w, layer.B, layer.stride, layer.padding))
            perm_in = perm_out
        elif isinstance(layer, BCosLinear):
            w = layer.weights.data.copy()
            if perm_in is not None:
                w = w[:, perm_in]
            layers.append(BCosLinear(w * rng.uniform(0.1, 10.0, (w.shape[0], 1)).astype(np.float32), layer.B))
            perm_in = None
        else:
            layers.append(layer)  # pooling / evidence / head keep channel order or act after the projection
    return BCosNetwork(layers, net.input_shape)


def check_implementation_invariance(rng: np.random.Generator) -> tuple:
    p = random_probe(rng)
    ref = p.phi("explicit")
    twin = Probe(reimplement(p.net, rng), p.x, p.unit)
    f, g = p.output(), twin.output()
    premise = abs(f - g) <= 1e-5 * abs(f)
    devs = [np.abs(p.phi("gradient") - ref).max(), np.abs(twin.phi("gradient") - ref).max(), np.abs(twin.phi("explicit") - ref).max()]
    dev = float(max(devs)) / _scale(ref)
    return bool(premise and dev <= TOLERANCE["implementation_invariance"]), dev


def check_dummy(rng: np.random.Generator) -> tuple:
    """Entries the network cannot depend on get exactly zero attribution."""
    if rng.random() < 0.5:
        # a B-cos first layer with a structurally zero input channel
        p = random_probe(rng)
        first = p.net.layers[0]
        k = int(rng.integers(first.kernels.shape[1]))
        first.kernels.data[:, k] = 0
        p = _probe(rng, p.net) or random_probe(rng)
        if not np.all(p.net.layers[0].kernels.data[:, k] == 0):
            return check_dummy(rng)
        dummy = np.zeros(p.net.input_shape, bool)
        dummy[k] = True
        dummy = dummy.ravel()
    else:
        p = random_probe(rng, mask=True)
        dummy = p.net.layers[0].mask.ravel() == 0
        if not dummy.any():
            return check_dummy(rng)
        # premise: perturbing masked entries leaves the output bit-identical
        x2 = p.x.copy().ravel()
        x2[dummy] = rng.uniform(0, 1, int(dummy.sum()))
        if p.output(x2.reshape(p.x.shape)) != p.output():
            return False, np.inf
    dev = max(float(np.abs(p.phi(s)[dummy]).max()) for s in ("gradient", "explicit"))
    return dev == 0.0, dev


def combined_phi(net1: BCosNetwork, u1: int, net2: BCosNetwork, u2: int, alpha: float, beta: float, x: np.ndarray) -> tuple:
    """phi of g = alpha f1 + beta f2 as one frozen-scaling model; returns (phi, g(x))."""
    xt = Tensor(x[None].astype(np.float32), requires_grad=True)
    o1 = T.reshape(net1.forward(xt, frozen=True), (-1,))
    o2 = T.reshape(net2.forward(xt, frozen=True), (-1,))
    g = T.add(T.mul(o1[u1], alpha), T.mul(o2[u2], beta))
    g.backward()
    return xt.grad.ravel().astype(np.float64) * x.astype(np.float64).ravel(), float(g.data)


def check_linearity(rng: np.random.Generator, alpha: Optional[float] = None, beta: Optional[float] = None) -> tuple:
    p1 = random_probe(rng)
    net2 = random_image_net(rng)
    while net2.input_shape != p1.net.input_shape:
        net2 = random_image_net(rng)
    p2 = _probe(rng, net2, x=p1.x)
    if p2 is None:
        return check_linearity(rng, alpha, beta)
    a = float(rng.uniform(-2, 2)) if alpha is None else alpha
    b = float(rng.uniform(-2, 2)) if beta is None else beta
    phi, g = combined_phi(p1.net, p1.unit, p2.net, p2.unit, a, b, p1.x)
    ref = a * p1.phi("explicit") + b * p2.phi("explicit")
    scale = _scale(np.abs(a * p1.phi("explicit")) + np.abs(b * p2.phi("explicit")))
    dev = max(float(np.abs(phi - ref).max()) / scale, abs(phi.sum() - g) / max(abs(g), scale))
    return dev <= TOLERANCE["linearity"], dev


def check_symmetry(rng: np.random.Generator) -> tuple:
    """Identical first-layer columns i, j and x_i = x_j give phi_i = phi_j."""
    n = int(rng.integers(3, 9))
    h = int(rng.integers(2, 7))
    B = float(rng.choice(EXPONENTS))
    w1 = rng.normal(0, 1, (h, n)).astype(np.float32)
    i, j = (int(v) for v in rng.choice(n, 2, replace=False))
    w1[:, j] = w1[:, i]
    d = int(rng.integers(2, 5))
    layers = [BCosLinear(w1, B), BCosLinear.init(rng, h, d, B=B)]
    if rng.random() < 0.5:
        layers += _head_layers(rng, d, B)
    net = BCosNetwork(layers, (n,))
    x = rng.uniform(0, 1, n).astype(np.float32)
    x[j] = x[i]
    p = _probe(rng, net, x=x)
    if p is None:
        return check_symmetry(rng)
    # premise: swapping the pair leaves the output unchanged for another input
    z = rng.uniform(0, 1, n).astype(np.float32)
    zs = z.copy()
    zs[[i, j]] = z[[j, i]]
    fz, fzs = p.output(z), p.output(zs)
    if abs(fz - fzs) > 1e-5 * max(abs(fz), 1e-6):
        return False, np.inf
    dev = 0.0
    for s in ("gradient", "explicit"):
        phi = p.phi(s)
        dev = max(dev, abs(phi[i] - phi[j]) / max(1.0, _scale(phi)))
    return dev <= TOLERANCE["symmetry"], dev


CHECKS: dict = {
    "completeness": check_completeness,
    "sensitivity": check_sensitivity,
    "implementation_invariance": check_implementation_invariance,
    "dummy": check_dummy,
    "linearity": check_linearity,
    "symmetry": check_symmetry,
}


@dataclass
class AxiomResult:
    axiom: str
    passed: bool
    max_deviation: float
    tolerance: float
    probes: int
    failing_seeds: list = field(default_factory=list)


@dataclass
class AuditReport:
    seed: int
    results: dict
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "passed": self.passed,
            "seconds": self.seconds,
            "axioms": {k: asdict(v) for k, v in self.results.items()},
        }

    def lines(self) -> list:
        out = []
        for r in self.results.values():
            verdict = "PASS" if r.passed else "FAIL"
            out.append(f"{verdict} {r.axiom:<26} probes={r.probes} max_dev={r.max_deviation:.3e} tol={r.tolerance:g}")
            if r.failing_seeds:
                out.append(f"     failing probe seeds: {r.failing_seeds[:10]}")
        return out


def run_axiom(axiom: str, seed: int, probes: int = 100, check: Optional[Callable] = None) -> AxiomResult:
    check = check or CHECKS[axiom]
    worst, failing = 0.0, []
    for k in range(probes):
        s = probe_seed(seed, axiom, k)
        ok, dev = check(np.random.default_rng(s))
        worst = max(worst, float(dev))
        if not ok:
            failing.append(s)
    return AxiomResult(axiom, not failing, worst, TOLERANCE[axiom], probes, failing)


def replay(axiom: str, probe: int) -> tuple:
    """Re-run one recorded probe: ``replay("dummy", probe_seed(...))``."""
    return CHECKS[axiom](np.random.default_rng(probe))


def audit_axioms(seed: int = 0, probes: int = 100) -> AuditReport:
    t0 = time.perf_counter()
    results = {a: run_axiom(a, seed, probes) for a in AXIOMS}
    return AuditReport(int(seed), results, time.perf_counter() - t0)
