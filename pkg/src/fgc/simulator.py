"""Bulk-synchronous SGD with per-worker gradient compression.

W logical workers each compute the mean gradient of their shard of the
mini-batch; every shard gradient runs through the codec (compress,
serialize, deserialize, decompress) and the reconstructions are averaged
in worker-index order to form the update direction.  Communication is
simulated by value: convergence behaviour is the claim under test here,
wall-clock modelling lives in the cost model.

The per-step update with learning rate eta_t and sparsified gradient
v_hat_t is the plain SGD iterate ``x <- x - eta_t * v_hat_t``.  With a
fixed dropout ratio theta the squared gradient norm plateaus at a floor
that grows with ``L * eta + theta**2``; with a diminishing schedule
``theta_t**2 = L * eta_t`` it converges.  The ``mixed`` (stepwise)
schedule compresses aggressively early and switches theta to zero later,
recovering the uncompressed trajectory's final loss.

Determinism: one counter-based Philox stream drives batch sampling, the
worker reduction order is fixed, and worker gradients are deterministic
given the batch, so identical seeds give byte-identical traces.  When
``theta_t == 0`` and the quantizer is passthrough the channel is an
exact identity and is skipped, which makes the baseline runs bit-equal
to plain SGD.

The per-iteration ``err_ratio`` column records the worst per-worker
relative reconstruction error ``||g_w - g_hat_w|| / ||g_w||`` (the
quantity the energy rule bounds by theta); the error of the averaged
gradient can only be smaller by the triangle inequality.  sigma**2 is
estimated from per-example gradients at the initial point only, which
is recorded in the trace metadata.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .codec import (
    CodecConfig,
    DEFAULT_CHUNK_SIZE,
    compress,
    decompress,
    deserialize,
    reconstruct_rows,
    serialize,
)
from .quantizer import QuantizerConfig
from .spectral import SparsificationSpec

__all__ = [
    "QuadraticProblem",
    "LogisticProblem",
    "MlpProblem",
    "make_problem",
    "LrSchedule",
    "ThetaSchedule",
    "TrainConfig",
    "GradientHistogram",
    "ConvergenceTrace",
    "GradientStats",
    "sub_gradient",
    "step",
    "run",
    "gradient_stats",
]

DIVERGENCE_LOSS = 1e12


def _power_iteration(matrix: np.ndarray, tol: float = 1e-6, max_iters: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(matrix.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iters):
        w = matrix @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - lam) <= tol * max(norm, 1.0):
            return norm
        lam = norm
    return lam


@dataclass
class QuadraticProblem:
    """Least squares: f(x) = (1/N) sum_i (a_i.x - b_i)**2 / 2."""

    a: np.ndarray
    b: np.ndarray
    name: str = "quadratic"
    lipschitz_is_estimate: bool = False

    def __post_init__(self) -> None:
        n = self.a.shape[0]
        self.hessian = self.a.T @ self.a / n
        self._linear = self.a.T @ self.b / n
        self._const = float(self.b @ self.b) / (2 * n)
        self.lipschitz = _power_iteration(self.hessian)
        self.x0 = np.zeros(self.dim)

    @classmethod
    def synthesize(cls, seed: int = 0, n_examples: int = 256, dim: int = 50,
                   noise: float = 0.3, feature_smoothing: int = 1) -> "QuadraticProblem":
        """Random least squares; ``feature_smoothing > 1`` applies a circular
        moving average across feature index, giving gradients a decaying
        frequency spectrum like structured real-world signals."""
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((n_examples, dim))
        if feature_smoothing > 1:
            kernel = np.ones(feature_smoothing) / feature_smoothing
            smooth = np.stack(
                [np.convolve(np.tile(row, 3), kernel, mode="same")[dim : 2 * dim] for row in a]
            )
            # small iid component keeps the Hessian non-singular
            a = smooth + 0.03 * rng.standard_normal((n_examples, dim))
        x_star = rng.standard_normal(dim)
        b = a @ x_star + noise * rng.standard_normal(n_examples)
        return cls(a=a, b=b)

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    @property
    def n_examples(self) -> int:
        return self.a.shape[0]

    def loss(self, x: np.ndarray) -> float:
        return self.trace_stats(x)[0]

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return self.hessian @ x - self._linear

    def trace_stats(self, x: np.ndarray) -> tuple[float, float]:
        hx = self.hessian @ x
        grad = hx - self._linear
        loss = 0.5 * float(x @ hx) - float(self._linear @ x) + self._const
        return loss, float(grad @ grad)

    def example_grads(self, indices: np.ndarray, x: np.ndarray) -> np.ndarray:
        rows = self.a[indices]
        residuals = rows @ x - self.b[indices]
        return rows * residuals[:, None]


@dataclass
class LogisticProblem:
    """Ridge-regularized logistic regression with +-1 labels."""

    a: np.ndarray
    y: np.ndarray
    ridge: float = 1e-2
    name: str = "logistic"
    lipschitz_is_estimate: bool = True

    def __post_init__(self) -> None:
        n = self.a.shape[0]
        # logistic Hessian is (1/N) A' D A with D <= 1/4: a safe upper bound
        self.lipschitz = _power_iteration(self.a.T @ self.a / n) / 4.0 + self.ridge
        self.x0 = np.zeros(self.dim)

    @classmethod
    def synthesize(cls, seed: int = 0, n_examples: int = 256, dim: int = 20,
                   label_flip: float = 0.1, ridge: float = 1e-2) -> "LogisticProblem":
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((n_examples, dim))
        x_star = rng.standard_normal(dim)
        y = np.sign(a @ x_star + 1e-12)
        flips = rng.random(n_examples) < label_flip
        y[flips] = -y[flips]
        return cls(a=a, y=y, ridge=ridge)

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    @property
    def n_examples(self) -> int:
        return self.a.shape[0]

    def loss(self, x: np.ndarray) -> float:
        margins = self.y * (self.a @ x)
        return float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * self.ridge * x @ x)

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return self.example_grads(np.arange(self.n_examples), x).mean(axis=0)

    def example_grads(self, indices: np.ndarray, x: np.ndarray) -> np.ndarray:
        rows = self.a[indices]
        labels = self.y[indices]
        margins = labels * (rows @ x)
        # sigmoid(-m) = (1 - tanh(m/2)) / 2, stable for any margin
        weights = 0.5 * (1.0 - np.tanh(0.5 * margins))
        return (-labels * weights)[:, None] * rows + self.ridge * x


@dataclass
class MlpProblem:
    """One-hidden-layer tanh network on a scalar regression target."""

    x_data: np.ndarray
    y_data: np.ndarray
    hidden: int
    lipschitz: float = 10.0  # supplied upper estimate; tanh nets have no cheap exact L
    name: str = "mlp"
    lipschitz_is_estimate: bool = True

    def __post_init__(self) -> None:
        if self.hidden > 64:
            raise ValueError("hidden layer capped at 64 units")
        rng = np.random.default_rng(1234)
        self.x0 = 0.1 * rng.standard_normal(self.dim)

    @classmethod
    def synthesize(cls, seed: int = 0, n_examples: int = 256, in_dim: int = 8,
                   hidden: int = 16, noise: float = 0.1) -> "MlpProblem":
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n_examples, in_dim))
        y = np.sin(x @ rng.standard_normal(in_dim)) + noise * rng.standard_normal(n_examples)
        return cls(x_data=x, y_data=y, hidden=hidden)

    @property
    def in_dim(self) -> int:
        return self.x_data.shape[1]

    @property
    def dim(self) -> int:
        h, d = self.hidden, self.in_dim
        return h * d + h + h + 1

    @property
    def n_examples(self) -> int:
        return self.x_data.shape[0]

    def _unpack(self, params: np.ndarray):
        h, d = self.hidden, self.in_dim
        w1 = params[: h * d].reshape(h, d)
        b1 = params[h * d : h * d + h]
        w2 = params[h * d + h : h * d + 2 * h]
        b2 = params[-1]
        return w1, b1, w2, b2

    def _forward(self, params: np.ndarray, inputs: np.ndarray):
        w1, b1, w2, b2 = self._unpack(params)
        hidden = np.tanh(inputs @ w1.T + b1)
        return hidden @ w2 + b2, hidden

    def loss(self, x: np.ndarray) -> float:
        pred, _ = self._forward(x, self.x_data)
        return float(0.5 * np.mean((pred - self.y_data) ** 2))

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return self.example_grads(np.arange(self.n_examples), x).mean(axis=0)

    def example_grads(self, indices: np.ndarray, x: np.ndarray) -> np.ndarray:
        inputs = self.x_data[indices]
        targets = self.y_data[indices]
        w1, b1, w2, b2 = self._unpack(x)
        hidden = np.tanh(inputs @ w1.T + b1)
        errors = hidden @ w2 + b2 - targets
        grad_w2 = hidden * errors[:, None]
        grad_b2 = errors[:, None]
        delta = (errors[:, None] * w2[None, :]) * (1.0 - hidden**2)
        grad_w1 = delta[:, :, None] * inputs[:, None, :]
        return np.concatenate(
            [grad_w1.reshape(len(indices), -1), delta, grad_w2, grad_b2], axis=1
        )


_PROBLEMS = {
    "quadratic": QuadraticProblem.synthesize,
    "logistic": LogisticProblem.synthesize,
    "mlp": MlpProblem.synthesize,
}


def make_problem(kind: str, seed: int = 0, **kwargs):
    if kind not in _PROBLEMS:
        raise ValueError(f"unknown problem kind {kind!r}; choose from {sorted(_PROBLEMS)}")
    return _PROBLEMS[kind](seed=seed, **kwargs)


@dataclass(frozen=True)
class LrSchedule:
    """eta_t = eta0 (fixed) or eta0 / (1 + t/tau)**power (diminishing)."""

    eta0: float
    kind: str = "fixed"
    tau: float = 1.0
    power: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "diminishing"):
            raise ValueError(f"unknown lr schedule {self.kind!r}")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.kind == "diminishing" and self.tau <= 0:
            raise ValueError("tau must be positive")

    def rate(self, t: int) -> float:
        if self.kind == "fixed":
            return self.eta0
        return self.eta0 / (1.0 + t / self.tau) ** self.power


@dataclass(frozen=True)
class ThetaSchedule:
    """Dropout-ratio schedule: fixed, stepwise ("mixed"), coupled
    diminishing (theta_t**2 = L * eta_t, capped), or polynomial decay."""

    kind: str = "fixed"
    theta0: float = 0.0
    theta1: float = 0.0
    switch_at: int = 0
    cap: float = 0.99
    power: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "stepwise", "diminishing", "polynomial"):
            raise ValueError(f"unknown theta schedule {self.kind!r}")
        for name in ("theta0", "theta1", "cap"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {value}")

    def value(self, t: int, eta: float, lipschitz: float, total_iters: int) -> float:
        if self.kind == "fixed":
            return self.theta0
        if self.kind == "stepwise":
            return self.theta0 if t < self.switch_at else self.theta1
        if self.kind == "diminishing":
            return min(self.cap, float(np.sqrt(lipschitz * eta)))
        fraction = 1.0 - t / max(total_iters, 1)
        return self.theta0 * fraction**self.power


@dataclass(frozen=True)
class TrainConfig:
    lr: LrSchedule
    theta: ThetaSchedule
    workers: int = 1
    batch_size: int = 8
    mode: str = "count"
    iterations: int = 1000
    clip_c1: float | None = None
    seed: int = 0
    quantizer: QuantizerConfig | None = None  # None -> passthrough f32
    channel: str = "wire"
    chunk_size: int = DEFAULT_CHUNK_SIZE
    hist_interval: int | None = None
    enforce_theorem_bounds: bool = False

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.batch_size < self.workers:
            raise ValueError("batch_size must be >= workers so every shard is non-empty")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mode not in ("count", "energy"):
            raise ValueError(f"unknown sparsification mode {self.mode!r}")
        if self.channel not in ("wire", "memory"):
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.clip_c1 is not None and self.clip_c1 <= 0:
            raise ValueError("clip_c1 must be positive")

    def validate_theorem_bounds(self, lipschitz: float) -> None:
        """Hypotheses under which the convergence guarantees hold: step and
        dropout caps for fixed schedules, summability for diminishing."""
        if self.lr.kind == "fixed" and self.lr.eta0 > 1.0 / (4.0 * lipschitz) + 1e-15:
            raise ValueError(
                f"fixed eta {self.lr.eta0} exceeds 1/(4L) = {1.0 / (4.0 * lipschitz)}"
            )
        if self.lr.kind == "diminishing" and not (0.5 < self.lr.power <= 1.0):
            raise ValueError(
                "diminishing lr needs 0.5 < power <= 1 so that sum(eta) diverges "
                "while sum(eta**2) converges"
            )
        if self.theta.kind == "fixed" and self.theta.theta0**2 > 0.25:
            raise ValueError(f"fixed theta {self.theta.theta0} violates theta**2 <= 1/4")


@dataclass
class GradientHistogram:
    iteration: int
    counts: np.ndarray  # normalized to unit mass
    bin_edges: np.ndarray
    mean: float
    std: float
    lo: float
    hi: float


@dataclass
class ConvergenceTrace:
    loss: np.ndarray
    grad_sq_norm: np.ndarray
    err_ratio: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    histograms: list[GradientHistogram] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    diverged: bool = False

    @property
    def iterations(self) -> int:
        return self.loss.size

    def to_csv_bytes(self) -> bytes:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["t", "loss", "grad_sq_norm", "theta", "eta", "err_ratio"])
        for t in range(self.iterations):
            writer.writerow(
                [
                    t,
                    repr(float(self.loss[t])),
                    repr(float(self.grad_sq_norm[t])),
                    repr(float(self.theta[t])),
                    repr(float(self.eta[t])),
                    repr(float(self.err_ratio[t])),
                ]
            )
        return buffer.getvalue().encode()

    def to_csv(self, path) -> None:
        with open(path, "wb") as handle:
            handle.write(self.to_csv_bytes())


def sub_gradient(problem, x: np.ndarray, batch_indices) -> np.ndarray:
    """Mini-batch gradient: mean of the per-example gradients."""
    indices = np.asarray(batch_indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("batch must be non-empty")
    if indices.min() < 0 or indices.max() >= problem.n_examples:
        raise ValueError("batch index out of range")
    return problem.example_grads(indices, x).mean(axis=0)


def step(x: np.ndarray, v_hat: np.ndarray, eta: float) -> np.ndarray:
    """One SGD update x - eta * v_hat; rejects non-finite results."""
    x_next = x - eta * v_hat
    if not np.isfinite(x_next).all():
        raise FloatingPointError("non-finite parameter update")
    return x_next


def _estimate_sigma_sq(problem, x: np.ndarray) -> float:
    grads = problem.example_grads(np.arange(problem.n_examples), x)
    mean = grads.mean(axis=0)
    return float(np.mean(np.sum((grads - mean) ** 2, axis=1)))


def _trace_stats(problem, x: np.ndarray) -> tuple[float, float]:
    stats = getattr(problem, "trace_stats", None)
    if stats is not None:
        return stats(x)
    grad = problem.full_grad(x)
    return problem.loss(x), float(grad @ grad)


def run(problem, config: TrainConfig) -> ConvergenceTrace:
    """Simulate config.iterations of compressed BSP SGD."""
    lipschitz = problem.lipschitz
    if config.enforce_theorem_bounds:
        config.validate_theorem_bounds(lipschitz)

    iters = config.iterations
    workers = config.workers
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))

    # fixed shard layout: worker w averages shard_sizes[w] examples
    shard_sizes = np.array(
        [len(part) for part in np.array_split(np.arange(config.batch_size), workers)]
    )
    shard_offsets = np.concatenate([[0], np.cumsum(shard_sizes)[:-1]])
    shard_weights = shard_sizes / config.batch_size

    loss = np.empty(iters)
    grad_sq = np.empty(iters)
    err_ratio = np.empty(iters)
    thetas = np.empty(iters)
    etas = np.empty(iters)
    histograms: list[GradientHistogram] = []

    x = problem.x0.copy()
    sigma_sq = _estimate_sigma_sq(problem, x)
    diverged = False
    recorded = iters

    # one bulk draw from the counter-based stream keeps per-iteration
    # overhead out of the loop without changing determinism
    batches = rng.integers(0, problem.n_examples, size=(iters, config.batch_size))
    example_grads = problem.example_grads
    lr_rate = config.lr.rate
    theta_value = config.theta.value
    quant = config.quantizer
    shard_scale = shard_sizes[:, None].astype(np.float64)
    codec_config: CodecConfig | None = None
    config_theta: float | None = None

    for t in range(iters):
        eta = lr_rate(t)
        theta = theta_value(t, eta, lipschitz, iters)

        grads = example_grads(batches[t], x)
        shards = np.add.reduceat(grads, shard_offsets, axis=0)
        shards /= shard_scale
        if config.clip_c1 is not None:
            np.clip(shards, -config.clip_c1, config.clip_c1, out=shards)

        active = theta > 0.0 or quant is not None
        if active:
            if theta != config_theta:
                codec_config = CodecConfig(
                    sparsification=SparsificationSpec(theta, config.mode, "frequency"),
                    quantizer=quant,
                    chunk_size=config.chunk_size,
                )
                config_theta = theta
            if config.channel == "wire":
                recon = np.stack(
                    [
                        decompress(deserialize(serialize(compress(shards[w], codec_config))))
                        for w in range(workers)
                    ]
                )
            else:
                recon = reconstruct_rows(shards, codec_config)
            diff = shards - recon
            err_sq = np.einsum("ij,ij->i", diff, diff)
            norm_sq = np.einsum("ij,ij->i", shards, shards)
            ratios_sq = np.divide(err_sq, norm_sq, out=np.zeros(workers), where=norm_sq > 0)
            err_ratio[t] = float(np.sqrt(ratios_sq.max()))
        else:
            recon = shards
            err_ratio[t] = 0.0

        v_hat = shard_weights @ recon

        loss[t], grad_sq[t] = _trace_stats(problem, x)
        thetas[t] = theta
        etas[t] = eta

        if config.hist_interval and t % config.hist_interval == 0:
            v_batch = shard_weights @ shards
            counts, edges = np.histogram(v_batch, bins=64)
            total = counts.sum()
            histograms.append(
                GradientHistogram(
                    iteration=t,
                    counts=counts / total if total else counts.astype(float),
                    bin_edges=edges,
                    mean=float(v_batch.mean()),
                    std=float(v_batch.std()),
                    lo=float(v_batch.min()),
                    hi=float(v_batch.max()),
                )
            )

        if not np.isfinite(loss[t]) or loss[t] > DIVERGENCE_LOSS:
            diverged = True
            recorded = t + 1
            break
        try:
            x = step(x, v_hat, eta)
        except FloatingPointError:
            diverged = True
            recorded = t + 1
            break

    return ConvergenceTrace(
        loss=loss[:recorded],
        grad_sq_norm=grad_sq[:recorded],
        err_ratio=err_ratio[:recorded],
        theta=thetas[:recorded],
        eta=etas[:recorded],
        histograms=histograms,
        meta={
            "problem": problem.name,
            "dim": problem.dim,
            "n_examples": problem.n_examples,
            "lipschitz": lipschitz,
            "lipschitz_is_estimate": problem.lipschitz_is_estimate,
            "sigma_sq_at_x0": sigma_sq,
            "sigma_sq_note": "estimated once at the initial point",
            "seed": config.seed,
            "workers": workers,
            "batch_size": config.batch_size,
            "mode": config.mode,
            "channel": config.channel,
            "clip_c1": config.clip_c1,
            "passthrough": config.quantizer is None,
        },
        diverged=diverged,
    )


@dataclass
class GradientStats:
    samples: list[dict]
    stddev_shrinks: bool


def gradient_stats(trace: ConvergenceTrace) -> GradientStats:
    """Summarize the sampled gradient histograms of a trace."""
    if len(trace.histograms) < 2:
        raise ValueError("need at least two sampled histograms")
    samples = [
        {
            "iteration": h.iteration,
            "mean": h.mean,
            "std": h.std,
            "lo": h.lo,
            "hi": h.hi,
        }
        for h in trace.histograms
    ]
    return GradientStats(
        samples=samples,
        stddev_shrinks=trace.histograms[-1].std < trace.histograms[0].std,
    )
