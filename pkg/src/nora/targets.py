"""Benchmark targets and the external black-box target protocol.

Builtins are cheap, deterministic log-likelihoods with known analytic
structure (modes, moments, or a dense quadrature reference) used by the
benchmark harness and tests. Expensive real-world posteriors attach as
child processes speaking a newline-delimited JSON protocol.
"""

from __future__ import annotations

import json
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np

from .metrics import WeightedSample
from .transforms import PriorBox

__all__ = [
    "ProtocolError",
    "Target",
    "TargetReference",
    "curved_degeneracy_logl",
    "ring_logl",
    "himmelblau2d_logl",
    "himmelblau4d_logl",
    "make_target",
    "list_targets",
    "external_target",
    "ExternalTarget",
    "PROTOCOL_NAME",
]

PROTOCOL_NAME = "nora-target/1"


class ProtocolError(RuntimeError):
    """Raised on malformed traffic from, or failure of, an external target."""


@dataclass(frozen=True)
class TargetReference:
    """Analytic ground truth attached to a builtin target."""

    modes: np.ndarray | None = None
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    sample_factory: object = None  # callable (n, seed) -> WeightedSample

    def make_sample(self, n: int = 10000, seed: int = 0) -> WeightedSample:
        if self.sample_factory is None:
            raise ValueError("target has no reference sampler")
        return self.sample_factory(n, seed)


@dataclass(frozen=True)
class Target:
    """A named log-density over a prior box, vectorized over rows."""

    name: str
    box: PriorBox
    log_density_fn: object
    params: dict = field(default_factory=dict)
    reference: TargetReference | None = None

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.log_density_fn(x), dtype=float)

    def close(self):
        pass


def curved_degeneracy_logl(x: np.ndarray) -> np.ndarray:
    """Tight ridge along x2 = 4 * x1**4."""
    x1, x2 = x[:, 0], x[:, 1]
    return -((10.0 * (0.45 - x1)) ** 2) / 4.0 - (20.0 * (x2 / 4.0 - x1**4)) ** 2


def ring_logl(x: np.ndarray, mu: float = 1.0, sigma: float = 0.05) -> np.ndarray:
    r = np.sqrt(x[:, 0] ** 2 + x[:, 1] ** 2)
    return -0.5 * ((r - mu) ** 2 / sigma + np.log(2.0 * np.pi * sigma**2))


def himmelblau2d_logl(x: np.ndarray) -> np.ndarray:
    x1, x2 = x[:, 0], x[:, 1]
    return -0.5 * (100.0 * (x1**2 - x2 - 11.0) ** 2 + (x1 + x2**2 - 7.0) ** 2)


def himmelblau4d_logl(x: np.ndarray) -> np.ndarray:
    """Four maxima in (x1, x2), constant along (x3, x4)."""
    return himmelblau2d_logl(x[:, :2])


def _himmelblau_modes() -> np.ndarray:
    """Simultaneous roots of {x1^2 - x2 = 11, x1 + x2^2 = 7}."""
    roots = np.roots([1.0, 0.0, -22.0, 1.0, 114.0])
    x1 = np.sort(np.real(roots[np.abs(np.imag(roots)) < 1e-9]))
    return np.column_stack([x1, x1**2 - 11.0])


def _grid_sample_factory(logl, box: PriorBox, n_per_dim: int):
    """Deterministic quadrature reference sample on a 2-d grid."""

    def factory(n: int = 0, seed: int = 0) -> WeightedSample:
        axes = [
            np.linspace(lo, hi, n_per_dim + 1)[:-1] + (hi - lo) / (2 * n_per_dim)
            for lo, hi in zip(box.lower, box.upper)
        ]
        g1, g2 = np.meshgrid(axes[0], axes[1], indexing="ij")
        locs = np.column_stack([g1.ravel(), g2.ravel()])
        logp = logl(locs)
        return WeightedSample(locs, logp, logp)

    return factory


def _himmelblau4d_sample_factory(box: PriorBox, n_per_dim: int):
    def factory(n: int = 0, seed: int = 0) -> WeightedSample:
        base = _grid_sample_factory(himmelblau2d_logl, PriorBox(box.lower[:2], box.upper[:2]), n_per_dim)()
        rng = np.random.default_rng(seed)
        flats = rng.uniform(box.lower[2], box.upper[2], size=(base.size, 2))
        locs = np.column_stack([base.locations, flats])
        return WeightedSample(locs, base.log_weights, base.log_p)

    return factory


class _RandomGaussian:
    """Seeded random-correlation Gaussian with analytic moments."""

    # Largest eigenvalue sqrt(scale^2 * sqrt(20)) keeps 3 sigma plus the
    # mean's central-half offset inside the [-1, 1] box.
    SCALE = 0.075
    CONDITION = 20.0

    def __init__(self, d: int, seed: int):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((d, d))
        q, r = np.linalg.qr(a)
        q *= np.sign(np.diag(r))
        lam = np.exp(
            rng.uniform(
                np.log(self.SCALE**2 / np.sqrt(self.CONDITION)),
                np.log(self.SCALE**2 * np.sqrt(self.CONDITION)),
                size=d,
            )
        )
        self.cov = q @ np.diag(lam) @ q.T
        self.mean = rng.uniform(-0.5, 0.5, size=d)
        self.chol = np.linalg.cholesky(self.cov)
        self._log_norm = -0.5 * (
            2.0 * np.sum(np.log(np.diag(self.chol))) + d * np.log(2.0 * np.pi)
        )
        self.d = d

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        z = np.linalg.solve(self.chol, (x - self.mean).T)
        return self._log_norm - 0.5 * np.sum(z * z, axis=0)

    def sample_in_box(self, n: int, seed: int, box: PriorBox) -> WeightedSample:
        rng = np.random.default_rng(seed)
        out = []
        while sum(len(c) for c in out) < n:
            draw = self.mean + rng.standard_normal((2 * n, self.d)) @ self.chol.T
            inside = np.all((draw >= box.lower) & (draw <= box.upper), axis=1)
            out.append(draw[inside])
        locs = np.vstack(out)[:n]
        logp = self.logpdf(locs)
        return WeightedSample(locs, np.zeros(n), logp)


def _make_curved_degeneracy() -> Target:
    box = PriorBox(np.array([-1.0, -1.0]), np.array([1.0, 2.0]))
    ref = TargetReference(
        modes=np.array([[0.45, 4 * 0.45**4]]),
        sample_factory=_grid_sample_factory(curved_degeneracy_logl, box, 250),
    )
    return Target("curved_degeneracy", box, curved_degeneracy_logl, reference=ref)


def _make_ring(mu: float = 1.0, sigma: float = 0.05) -> Target:
    box = PriorBox(np.array([-2.0, -2.0]), np.array([2.0, 2.0]))

    def logl(x):
        return ring_logl(x, mu=mu, sigma=sigma)

    ref = TargetReference(sample_factory=_grid_sample_factory(logl, box, 250))
    return Target("ring", box, logl, params={"mu": mu, "sigma": sigma}, reference=ref)


def _make_himmelblau2d() -> Target:
    box = PriorBox(np.array([-5.0, -5.0]), np.array([5.0, 5.0]))
    ref = TargetReference(
        modes=_himmelblau_modes(),
        sample_factory=_grid_sample_factory(himmelblau2d_logl, box, 300),
    )
    return Target("himmelblau2d", box, himmelblau2d_logl, reference=ref)


def _make_himmelblau4d() -> Target:
    box = PriorBox(np.full(4, -5.0), np.full(4, 5.0))
    ref = TargetReference(
        modes=_himmelblau_modes(),
        sample_factory=_himmelblau4d_sample_factory(
            PriorBox(np.full(4, -5.0), np.full(4, 5.0)), 300
        ),
    )
    return Target("himmelblau4d", box, himmelblau4d_logl, reference=ref)


def _make_gaussian_random(d: int = 2, seed: int = 0) -> Target:
    if d < 1:
        raise ValueError("d must be >= 1")
    box = PriorBox(np.full(d, -1.0), np.full(d, 1.0))
    gauss = _RandomGaussian(d, seed)
    ref = TargetReference(
        modes=gauss.mean[None, :],
        mean=gauss.mean,
        cov=gauss.cov,
        sample_factory=lambda n=10000, s=0: gauss.sample_in_box(n, s, box),
    )
    return Target(
        "gaussian_random", box, gauss.logpdf, params={"d": d, "seed": seed},
        reference=ref,
    )


_REGISTRY = {
    "curved_degeneracy": _make_curved_degeneracy,
    "ring": _make_ring,
    "himmelblau2d": _make_himmelblau2d,
    "himmelblau4d": _make_himmelblau4d,
    "gaussian_random": _make_gaussian_random,
}


def make_target(name: str, **params) -> Target:
    """Build a builtin target by name; unknown names raise KeyError."""
    if name not in _REGISTRY:
        raise KeyError(f"unknown target {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**params)


def list_targets() -> list[str]:
    return sorted(_REGISTRY)


# ----------------------------------------------------------------------------
# External targets: one child process per worker, newline-delimited JSON.
#   handshake (child -> harness): {"protocol": "nora-target/1", "dim": <d>}
#   request   (harness -> child): {"id": <int>, "x": [<d floats>]}
#   response  (child -> harness): {"id": <int>, "logp": <float|"-inf"|"nan">}

def _format_request(req_id: int, x: np.ndarray) -> str:
    vals = ", ".join(format(float(v), ".17g") for v in x)
    return '{"id": %d, "x": [%s]}' % (req_id, vals)


class _Child:
    """One external child process with a line-reader thread."""

    def __init__(self, argv: list[str], dim: int, timeout: float):
        self.timeout = timeout
        self.proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self.lines: queue.Queue = queue.Queue()
        self.reader = threading.Thread(target=self._read_loop, daemon=True)
        self.reader.start()
        hello = self._next_line()
        try:
            head = json.loads(hello)
        except json.JSONDecodeError as err:
            raise ProtocolError(f"bad handshake line: {hello!r}") from err
        if head.get("protocol") != PROTOCOL_NAME:
            raise ProtocolError(f"unsupported protocol: {head!r}")
        if int(head.get("dim", -1)) != dim:
            raise ProtocolError(
                f"child dimension {head.get('dim')} does not match box dimension {dim}"
            )

    def _read_loop(self):
        for line in self.proc.stdout:
            self.lines.put(line)
        self.lines.put(None)

    def _next_line(self) -> str:
        try:
            line = self.lines.get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError(f"external target timed out after {self.timeout}s") from None
        if line is None:
            raise ProtocolError("external target exited unexpectedly")
        return line.rstrip("\n")

    def evaluate(self, xs: np.ndarray) -> np.ndarray:
        """Evaluate a block of points; responses may arrive in any order."""
        for i, x in enumerate(xs):
            try:
                self.proc.stdin.write(_format_request(i, x) + "\n")
            except (BrokenPipeError, ValueError) as err:
                raise ProtocolError("external target pipe closed") from err
        self.proc.stdin.flush()
        got: dict[int, float] = {}
        while len(got) < len(xs):
            raw = self._next_line()
            try:
                msg = json.loads(raw)
                req_id = int(msg["id"])
                logp = msg["logp"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ProtocolError(f"malformed response line: {raw!r}") from err
            if isinstance(logp, str):
                if logp == "-inf":
                    value = -np.inf
                elif logp == "nan":
                    raise ProtocolError(f"external target reported nan for id {req_id}")
                else:
                    raise ProtocolError(f"malformed logp in response: {raw!r}")
            else:
                value = float(logp)
            got[req_id] = value
        return np.array([got[i] for i in range(len(xs))])

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            self.proc.terminate()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class ExternalTarget:
    """Black-box target evaluated by child processes over the wire protocol.

    One child per worker; a batch of points is split across children and
    the slices are evaluated concurrently (the children do the computing,
    so threads suffice on the harness side).
    """

    def __init__(self, command: str, box: PriorBox, workers: int = 1,
                 timeout: float = 3600.0, name: str = "external"):
        self.name = name
        self.box = box
        self.command = command
        self.workers = max(1, workers)
        self.timeout = timeout
        self.params = {"command": command}
        self.reference = None
        self._argv = shlex.split(command)
        self._children: list[_Child] = []
        self._lock = threading.Lock()

    def _ensure_children(self, n: int):
        with self._lock:
            while len(self._children) < n:
                self._children.append(_Child(self._argv, self.box.dim, self.timeout))

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n_children = min(self.workers, max(1, x.shape[0]))
        self._ensure_children(n_children)
        blocks = np.array_split(np.arange(x.shape[0]), n_children)
        blocks = [b for b in blocks if b.size]
        if len(blocks) == 1:
            return self._children[0].evaluate(x)
        results: list = [None] * len(blocks)
        errors: list = []

        def work(slot, idx):
            try:
                results[slot] = self._children[slot].evaluate(x[idx])
            except Exception as err:  # noqa: BLE001 - surfaced below
                errors.append(err)

        threads = [
            threading.Thread(target=work, args=(slot, idx))
            for slot, idx in enumerate(blocks)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        out = np.empty(x.shape[0])
        for idx, res in zip(blocks, results):
            out[idx] = res
        return out

    def restart(self):
        """Terminate all children; fresh ones spawn on the next evaluation."""
        with self._lock:
            for child in self._children:
                child.close()
            self._children = []

    def close(self):
        self.restart()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_target(command: str, box: PriorBox, workers: int = 1,
                    timeout: float = 3600.0) -> ExternalTarget:
    """Wrap a child-process command as a target over the wire protocol."""
    return ExternalTarget(command, box, workers=workers, timeout=timeout)
