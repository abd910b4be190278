"""Splittable models with hand-written backprop, synthetic datasets and ToyLQ.

A :class:`PipelineModel` is an ordered tuple of :class:`Stage` blocks. Each
stage is a chain of layers with one flat parameter vector; the last stage
ends in a squared-error loss head, so it computes ``f o a_K``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .constants import CERTIFIED, NoCertificateError, TheoremConstants
from .numerics import DATA_STREAM, INIT_STREAM, RngStream

__all__ = [
    "Dense",
    "DenseTanh",
    "DenseLinear",
    "Diagonal",
    "SquaredLoss",
    "Stage",
    "PipelineModel",
    "Dataset",
    "ToyLQ",
    "make_dataset",
    "mlp_model",
    "sgd_train",
]


def _check_dim(x: np.ndarray, d: int, what: str):
    if x.shape != (d,):
        raise ValueError(f"{what}: expected shape ({d},), got {x.shape}")


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    activation: str = "tanh"
    bias: bool = True

    @property
    def n_params(self) -> int:
        return self.n_out * self.n_in + (self.n_out if self.bias else 0)

    def _split(self, params):
        k = self.n_out * self.n_in
        W = params[:k].reshape(self.n_out, self.n_in)
        b = params[k:] if self.bias else None
        return W, b

    def _pre(self, params, x):
        W, b = self._split(params)
        z = W @ x
        if b is not None:
            z = z + b
        return W, z

    def forward(self, params, x):
        _check_dim(x, self.n_in, "dense input")
        _, z = self._pre(params, x)
        return np.tanh(z) if self.activation == "tanh" else z

    def backward(self, params, x, upstream):
        _check_dim(x, self.n_in, "dense input")
        _check_dim(upstream, self.n_out, "dense upstream")
        W, z = self._pre(params, x)
        if self.activation == "tanh":
            y = np.tanh(z)
            dz = upstream * (1.0 - y * y)
        else:
            dz = upstream
        gW = np.outer(dz, x).ravel()
        gp = np.concatenate([gW, dz]) if self.bias else gW
        return gp, W.T @ dz

    def init(self, rng: RngStream):
        W = rng.normal((self.n_out, self.n_in)) / math.sqrt(self.n_in)
        parts = [W.ravel()]
        if self.bias:
            parts.append(np.zeros(self.n_out))
        return np.concatenate(parts)


def DenseTanh(n_in: int, n_out: int) -> Dense:
    return Dense(n_in, n_out, "tanh", True)


def DenseLinear(n_in: int, n_out: int, bias: bool = True) -> Dense:
    return Dense(n_in, n_out, "linear", bias)


@dataclass(frozen=True)
class Diagonal:
    """Elementwise scaling ``v * x``."""

    n: int

    @property
    def n_in(self):
        return self.n

    @property
    def n_out(self):
        return self.n

    @property
    def n_params(self):
        return self.n

    def forward(self, params, x):
        _check_dim(x, self.n, "diagonal input")
        return params * x

    def backward(self, params, x, upstream):
        _check_dim(x, self.n, "diagonal input")
        _check_dim(upstream, self.n, "diagonal upstream")
        return upstream * x, upstream * params

    def init(self, rng: RngStream):
        return np.ones(self.n)


@dataclass(frozen=True)
class SquaredLoss:
    """Loss head ``0.5 * ||x - target||^2``."""

    n: int

    def value(self, x, target):
        r = x - target
        return 0.5 * float(r @ r)

    def grad(self, x, target):
        return x - target


@dataclass(frozen=True)
class Stage:
    layers: tuple
    loss: SquaredLoss | None = None
    offsets: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("a stage needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"incompatible layers {a} -> {b}")
        if self.loss is not None and self.loss.n != layers[-1].n_out:
            raise ValueError("loss head dimension mismatch")
        offs = [0]
        for layer in layers:
            offs.append(offs[-1] + layer.n_params)
        object.__setattr__(self, "offsets", tuple(offs))

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    @property
    def n_params(self):
        return self.offsets[-1]

    def _p(self, params, i):
        return params[self.offsets[i]: self.offsets[i + 1]]

    def _inputs(self, params, x):
        _check_dim(params, self.n_params, "stage params")
        xs = [x]
        for i, layer in enumerate(self.layers):
            xs.append(layer.forward(self._p(params, i), xs[-1]))
        return xs

    def forward(self, params, x):
        """Output of the layer chain (before any loss head)."""
        return self._inputs(params, x)[-1]

    def _backprop(self, params, xs, upstream):
        grads = [None] * len(self.layers)
        g = upstream
        for i in range(len(self.layers) - 1, -1, -1):
            grads[i], g = self.layers[i].backward(self._p(params, i), xs[i], g)
        return np.concatenate(grads), g

    def backward(self, params, x, upstream):
        """Returns ``(grad wrt params, grad wrt input)`` for a given upstream."""
        return self._backprop(params, self._inputs(params, x), upstream)

    def loss_and_grad(self, params, x, target):
        """Terminal stage: loss value and its gradients wrt params and input."""
        if self.loss is None:
            raise ValueError("stage has no loss head")
        xs = self._inputs(params, x)
        loss = self.loss.value(xs[-1], target)
        gp, gx = self._backprop(params, xs, self.loss.grad(xs[-1], target))
        return loss, gp, gx

    def init(self, rng: RngStream):
        return np.concatenate([layer.init(rng) for layer in self.layers])


@dataclass(frozen=True)
class PipelineModel:
    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        if len(stages) < 2:
            raise ValueError("a pipeline needs K >= 2 stages")
        for a, b in zip(stages, stages[1:]):
            if a.n_out != b.n_in:
                raise ValueError("adjacent stage dimensions differ")
            if a.loss is not None:
                raise ValueError("only the last stage may carry the loss head")
        if stages[-1].loss is None:
            raise ValueError("last stage must carry the loss head")

    @property
    def K(self) -> int:
        return len(self.stages)

    @property
    def boundary_dims(self) -> tuple:
        return tuple(s.n_out for s in self.stages[:-1])

    @property
    def in_dim(self) -> int:
        return self.stages[0].n_in

    def init_params(self, seed: int) -> list[np.ndarray]:
        rng = RngStream(seed, INIT_STREAM)
        return [s.init(rng) for s in self.stages]

    def activations(self, params, xi) -> list[np.ndarray]:
        """Exact boundary activations ``a_bar^(1..K-1)`` (no compression)."""
        acts = []
        h = xi
        for s, p in zip(self.stages[:-1], params[:-1]):
            h = s.forward(p, h)
            acts.append(h)
        return acts

    def loss(self, params, xi, y) -> float:
        h = xi
        for s, p in zip(self.stages[:-1], params[:-1]):
            h = s.forward(p, h)
        return self.stages[-1].loss_and_grad(params[-1], h, y)[0]

    def sample_grad(self, params, xi, y, inputs=None):
        """Exact per-sample loss and per-stage gradients by chained backprop.

        ``inputs`` optionally fixes the input of each stage (e.g. received
        messages); the backward chain is always exact.
        """
        if inputs is None:
            inputs = [xi] + self.activations(params, xi)
        loss, gp, g = self.stages[-1].loss_and_grad(params[-1], inputs[-1], y)
        grads = [None] * self.K
        grads[-1] = gp
        for k in range(self.K - 2, -1, -1):
            grads[k], g = self.stages[k].backward(params[k], inputs[k], g)
        return loss, grads

    def full_loss(self, params, data: "Dataset") -> float:
        return float(np.mean([self.loss(params, x, y) for x, y in zip(data.X, data.Y)]))

    def full_gradient(self, params, data: "Dataset") -> list[np.ndarray]:
        acc = [np.zeros_like(p) for p in params]
        for x, y in zip(data.X, data.Y):
            _, g = self.sample_grad(params, x, y)
            for a, gk in zip(acc, g):
                a += gk
        return [a / data.N for a in acc]


def split_layers(layers, K: int) -> list[tuple]:
    n = len(layers)
    if not 1 <= K <= n:
        raise ValueError(f"cannot split {n} layers into {K} stages")
    sizes = [n // K + (1 if i < n % K else 0) for i in range(K)]
    out, i = [], 0
    for s in sizes:
        out.append(tuple(layers[i: i + s]))
        i += s
    return out


def mlp_model(in_dim: int, out_dim: int, K: int, hidden: int = 16, n_layers: int = 4) -> PipelineModel:
    """tanh MLP with a linear output layer, split into ``K`` contiguous stages."""
    dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
    layers = [DenseTanh(a, b) for a, b in zip(dims[:-2], dims[1:-1])]
    layers.append(DenseLinear(dims[-2], dims[-1]))
    groups = split_layers(layers, K)
    stages = [Stage(g) for g in groups[:-1]]
    stages.append(Stage(groups[-1], SquaredLoss(out_dim)))
    return PipelineModel(tuple(stages))


@dataclass(frozen=True)
class Dataset:
    name: str
    X: np.ndarray
    Y: np.ndarray
    seed: int
    x_bound: float
    y_bound: float

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def in_dim(self) -> int:
        return self.X.shape[1]

    @property
    def out_dim(self) -> int:
        return self.Y.shape[1]

    def in_box(self) -> bool:
        return bool(np.all(np.abs(self.X) <= self.x_bound) and np.all(np.abs(self.Y) <= self.y_bound))


DATASET_DIMS = {
    "regression-mlp": (8, 2),
    "toy-lq": (4, 4),
    "classification-2d": (2, 2),
}


def _name_stream(name: str) -> int:
    return DATA_STREAM + (zlib.crc32(name.encode()) << 8)


def make_dataset(name: str, N: int, seed: int) -> Dataset:
    """Deterministic synthetic dataset.

    regression-mlp: x in [-1,1]^8, y in R^2 from a fixed random tanh teacher
    plus noise, clipped to [-1.5, 1.5].
    toy-lq: x in [-1,1]^4, y = v* . (W* x) + noise, clipped to [-1, 1].
    classification-2d: two Gaussian blobs in [-1,1]^2, targets (+1,-1) or (-1,+1).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if name not in DATASET_DIMS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASET_DIMS)}")
    rng = RngStream(seed, _name_stream(name))
    n, o = DATASET_DIMS[name]
    if name == "regression-mlp":
        X = rng.uniform((N, n)) * 2.0 - 1.0
        W1 = rng.normal((12, n)) / math.sqrt(n) * 1.5
        W2 = rng.normal((o, 12)) / math.sqrt(12) * 1.5
        Y = np.tanh(np.tanh(X @ W1.T) @ W2.T) + 0.05 * rng.normal((N, o))
        return Dataset(name, X, np.clip(Y, -1.5, 1.5), seed, 1.0, 1.5)
    if name == "toy-lq":
        X = rng.uniform((N, n)) * 2.0 - 1.0
        W = (rng.uniform((o, n)) * 2.0 - 1.0) * 0.5
        v = 0.5 + rng.uniform(o)
        Y = (X @ W.T) * v + 0.05 * rng.normal((N, o))
        return Dataset(name, X, np.clip(Y, -1.0, 1.0), seed, 1.0, 1.0)
    labels = rng.integers(0, 2, size=N)
    centers = np.array([[-0.4, -0.3], [0.4, 0.3]])
    X = np.clip(centers[labels] + 0.3 * rng.normal((N, n)), -1.0, 1.0)
    Y = np.where(labels[:, None] == 0, [[1.0, -1.0]], [[-1.0, 1.0]])
    return Dataset(name, X, Y.astype(np.float64), seed, 1.0, 1.0)


@dataclass(frozen=True)
class ToyLQ:
    """``a(xi, W) = W xi`` followed by ``0.5 * ||v * z - y||^2``.

    The domain box is ``|W_jk| <= w_bound``, ``|v_j| <= v_bound`` and, for
    the activation argument of the loss stage, ``|z_j| <= z_bound`` with
    ``z_bound = z_margin * w_bound * max ||xi||_1`` so that every exact
    activation, and any message within the margin of it, lies inside.
    """

    n: int = 4
    h: int = 4
    w_bound: float = 1.0
    v_bound: float = 2.0
    z_margin: float = 1.25

    def model(self) -> PipelineModel:
        return PipelineModel((
            Stage((DenseLinear(self.n, self.h, bias=False),)),
            Stage((Diagonal(self.h),), SquaredLoss(self.h)),
        ))

    def init_params(self, seed: int) -> list[np.ndarray]:
        rng = RngStream(seed, INIT_STREAM)
        W = (rng.uniform(self.h * self.n) * 2.0 - 1.0) * 0.5 * self.w_bound
        v = 0.5 + 0.5 * rng.uniform(self.h)
        return [W, v]

    def z_bound(self, data: Dataset) -> float:
        return self.z_margin * self.w_bound * float(np.max(np.sum(np.abs(data.X), axis=1)))

    def params_in_box(self, params) -> bool:
        return bool(np.all(np.abs(params[0]) <= self.w_bound) and np.all(np.abs(params[1]) <= self.v_bound))

    def activation_in_box(self, z, data: Dataset) -> bool:
        return bool(np.all(np.abs(z) <= self.z_bound(data)))

    def optimum(self, data: Dataset) -> float:
        """Global minimum of the mean loss (unconstrained).

        Row scaling by ``v`` adds no expressiveness over a free matrix, so the
        minimum is the linear least-squares residual.
        """
        M, *_ = np.linalg.lstsq(data.X, data.Y, rcond=None)
        R = data.X @ M - data.Y
        return 0.5 * float(np.mean(np.sum(R * R, axis=1)))


def exact_constants(toy: ToyLQ, data: Dataset) -> TheoremConstants:
    """Closed-form constants on the ToyLQ domain box (``c_Q`` left at 0).

    See docs/toy_lq_constants.md for the derivation.
    """
    bounds = (toy.w_bound, toy.v_bound, toy.z_margin, data.x_bound, data.y_bound)
    if not all(math.isfinite(b) for b in bounds):
        raise NoCertificateError("domain box must be bounded")
    x2 = float(np.max(np.linalg.norm(data.X, axis=1)))
    Y = float(np.max(np.abs(data.Y)))
    Z = toy.z_bound(data)
    V = toy.v_bound
    L_fb = math.sqrt(V**4 + Z**4 + 2.0 * (2.0 * V * Z + Y) ** 2)
    C_fb = math.sqrt(toy.h * (V * V + Z * Z)) * (V * Z + Y)
    lift = max(x2, 1.0)
    return TheoremConstants(
        L_f=lift * lift * L_fb,
        ell_a=(x2,),
        C_a=(x2,),
        L_down=(L_fb,),
        C_down=(C_fb,),
        sigma=lift * C_fb,
        c_Q=0.0,
        N=data.N,
        K=2,
        provenance={k: CERTIFIED for k in ("L_f", "ell_a", "C_a", "L_down", "C_down", "sigma")},
    )


def sgd_train(model: PipelineModel, data: Dataset, params, schedule, lr: float, trajectory=None):
    """Plain single-machine SGD on the composed model, one sample per step."""
    params = [p.copy() for p in params]
    for sid in schedule:
        _, grads = model.sample_grad(params, data.X[sid], data.Y[sid])
        params = [p - lr * g for p, g in zip(params, grads)]
        if trajectory is not None:
            trajectory.append([p.copy() for p in params])
    return params
