"""Small fully-connected networks with exact per-sample Jacobians.

Architecture: L affine layers described by ``layer_widths = [D, n_1, ...,
K]``. Hidden layers apply the activation; the output layer is linear.
Layers listed in ``normalize_after`` (1-based, < L) normalize their
pre-activations by per-unit statistics, then apply a learned gain and
shift. Evaluation, Jacobians and linearized prediction always use the
frozen running statistics; batch statistics are used only inside
:func:`train_sgd`.

Flat parameter layout, per layer l = 1..L: weights of layer l in
row-major order, then biases, then (for normalized layers) gain and
shift. This layout is shared with the kernel backends.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ctklab.backend import kernels

ACTIVATIONS = ("relu", "tanh", "identity")
INIT_SCHEMES = ("ntk_standard_gaussian", "he")
_ACT_IDS = {"relu": 0, "tanh": 1, "identity": 2}

#: dense Jacobians are materialized only up to this many entries
DENSE_JACOBIAN_BUDGET = 10**8

#: EMA weight given to fresh batch statistics during training
RUNNING_STATS_MOMENTUM = 0.1


class TrainingDivergedError(RuntimeError):
    """Raised when the SGD loss becomes non-finite."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description; hashable so derived layouts can be cached."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    normalize_after: frozenset[int] = frozenset()
    init_scheme: str = "he"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "normalize_after",
                           frozenset(int(l) for l in self.normalize_after))
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        for l in self.normalize_after:
            if not 1 <= l < self.n_layers:
                raise ValueError(
                    f"normalization index {l} must be in [1, {self.n_layers - 1}]")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        return _arch(self).n_params

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "normalize_after": sorted(self.normalize_after),
            "init_scheme": self.init_scheme,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            layer_widths=tuple(d["layer_widths"]),
            activation=d.get("activation", "relu"),
            normalize_after=frozenset(d.get("normalize_after", ())),
            init_scheme=d.get("init_scheme", "he"),
        )


@dataclass(frozen=True)
class _ArchPack:
    """Precomputed offset arrays consumed by the kernel backends."""

    widths: np.ndarray
    act_id: int
    fscale: np.ndarray
    w_off: np.ndarray
    b_off: np.ndarray
    g_off: np.ndarray
    s_off: np.ndarray
    nm_off: np.ndarray
    n_params: int
    n_stats: int


_ARCH_CACHE: dict[NetworkSpec, _ArchPack] = {}


def _arch(spec: NetworkSpec) -> _ArchPack:
    pack = _ARCH_CACHE.get(spec)
    if pack is not None:
        return pack
    L = spec.n_layers
    widths = np.asarray(spec.layer_widths, dtype=np.int64)
    w_off = np.full(L, -1, dtype=np.int64)
    b_off = np.full(L, -1, dtype=np.int64)
    g_off = np.full(L, -1, dtype=np.int64)
    s_off = np.full(L, -1, dtype=np.int64)
    nm_off = np.full(L, -1, dtype=np.int64)
    off = 0
    stat_off = 0
    for l in range(1, L + 1):
        nin, nout = spec.layer_widths[l - 1], spec.layer_widths[l]
        w_off[l - 1] = off
        off += nin * nout
        b_off[l - 1] = off
        off += nout
        if l in spec.normalize_after:
            g_off[l - 1] = off
            off += nout
            s_off[l - 1] = off
            off += nout
            nm_off[l - 1] = stat_off
            stat_off += 2 * nout
    if spec.init_scheme == "ntk_standard_gaussian":
        fscale = 1.0 / np.sqrt(widths[:-1].astype(np.float64))
    else:
        fscale = np.ones(L)
    pack = _ArchPack(widths=widths, act_id=_ACT_IDS[spec.activation],
                     fscale=fscale, w_off=w_off, b_off=b_off, g_off=g_off,
                     s_off=s_off, nm_off=nm_off, n_params=int(off),
                     n_stats=int(stat_off))
    _ARCH_CACHE[spec] = pack
    return pack


@dataclass
class ParamVector:
    """Flat float64 parameter vector tied to a NetworkSpec."""

    values: np.ndarray
    spec: NetworkSpec

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (_arch(self.spec).n_params,):
            raise ValueError(
                f"expected {_arch(self.spec).n_params} parameters, "
                f"got shape {self.values.shape}")

    @property
    def n_params(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)

    def weight(self, layer: int) -> np.ndarray:
        """View of layer weights as an (n_l, n_{l-1}) matrix (1-based layer)."""
        a = _arch(self.spec)
        nin = self.spec.layer_widths[layer - 1]
        nout = self.spec.layer_widths[layer]
        o = a.w_off[layer - 1]
        return self.values[o : o + nin * nout].reshape(nout, nin)

    def bias(self, layer: int) -> np.ndarray:
        a = _arch(self.spec)
        nout = self.spec.layer_widths[layer]
        o = a.b_off[layer - 1]
        return self.values[o : o + nout]

    def norm_gain(self, layer: int) -> np.ndarray:
        a = _arch(self.spec)
        if a.g_off[layer - 1] < 0:
            raise ValueError(f"layer {layer} has no normalization")
        nout = self.spec.layer_widths[layer]
        o = a.g_off[layer - 1]
        return self.values[o : o + nout]

    def norm_shift(self, layer: int) -> np.ndarray:
        a = _arch(self.spec)
        if a.s_off[layer - 1] < 0:
            raise ValueError(f"layer {layer} has no normalization")
        nout = self.spec.layer_widths[layer]
        o = a.s_off[layer - 1]
        return self.values[o : o + nout]


def index_map(spec: NetworkSpec) -> list[dict]:
    """Coordinate -> (layer, role, units) description of the flat layout.

    Roles are "weight" (out_unit, in_unit), "bias", "norm_gain" and
    "norm_shift" (out_unit only). The map is a bijection onto 0..P-1.
    """
    entries: list[dict] = []
    for l in range(1, spec.n_layers + 1):
        nin, nout = spec.layer_widths[l - 1], spec.layer_widths[l]
        for i in range(nout):
            for j in range(nin):
                entries.append({"layer": l, "role": "weight",
                                "out_unit": i, "in_unit": j})
        for i in range(nout):
            entries.append({"layer": l, "role": "bias", "out_unit": i})
        if l in spec.normalize_after:
            for role in ("norm_gain", "norm_shift"):
                for i in range(nout):
                    entries.append({"layer": l, "role": role, "out_unit": i})
    return entries


@dataclass
class NormState:
    """Frozen running statistics for the normalized layers."""

    running_mean: dict[int, np.ndarray] = field(default_factory=dict)
    running_var: dict[int, np.ndarray] = field(default_factory=dict)
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        for l, v in self.running_var.items():
            if np.any(np.asarray(v) <= 0.0):
                raise ValueError(f"running variance of layer {l} must be > 0")

    @staticmethod
    def fresh(spec: NetworkSpec, epsilon: float = 1e-12) -> "NormState":
        means = {l: np.zeros(spec.layer_widths[l]) for l in spec.normalize_after}
        vars_ = {l: np.ones(spec.layer_widths[l]) for l in spec.normalize_after}
        return NormState(means, vars_, epsilon)

    def copy(self) -> "NormState":
        return NormState({l: m.copy() for l, m in self.running_mean.items()},
                         {l: v.copy() for l, v in self.running_var.items()},
                         self.epsilon)

    def pack(self, spec: NetworkSpec) -> np.ndarray:
        """Statistics in the flat layout consumed by the kernels."""
        a = _arch(spec)
        out = np.zeros(a.n_stats)
        for l in sorted(spec.normalize_after):
            nout = spec.layer_widths[l]
            o = a.nm_off[l - 1]
            out[o : o + nout] = np.asarray(self.running_mean[l], dtype=np.float64)
            out[o + nout : o + 2 * nout] = np.asarray(self.running_var[l],
                                                      dtype=np.float64)
        return out

    @staticmethod
    def unpack(spec: NetworkSpec, packed: np.ndarray,
               epsilon: float) -> "NormState":
        a = _arch(spec)
        means, vars_ = {}, {}
        for l in sorted(spec.normalize_after):
            nout = spec.layer_widths[l]
            o = a.nm_off[l - 1]
            means[l] = packed[o : o + nout].copy()
            vars_[l] = packed[o + nout : o + 2 * nout].copy()
        return NormState(means, vars_, epsilon)


@dataclass
class Batch:
    """A dataset slice: float64 inputs (N, D) and targets (N, K)."""

    inputs: np.ndarray
    targets: np.ndarray
    split_tag: str = "S_P"

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have equal row counts")
        if self.split_tag not in ("S_P", "S_Q", "test"):
            raise ValueError(f"unknown split tag {self.split_tag!r}")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def class_labels(self) -> np.ndarray:
        """Class indices for one-hot targets (argmax, ties to lowest)."""
        return np.argmax(self.targets, axis=1)


def _kernel_args(spec: NetworkSpec, params: ParamVector,
                 norm: NormState | None):
    a = _arch(spec)
    if norm is None:
        norm = NormState.fresh(spec)
    if spec.normalize_after and set(norm.running_mean) != set(spec.normalize_after):
        raise ValueError("norm state layers do not match normalize_after")
    stats = norm.pack(spec)
    return (a, params.values, a.widths, a.act_id, a.fscale, a.w_off, a.b_off,
            a.g_off, a.s_off, a.nm_off, stats, float(norm.epsilon))


def _check_inputs(spec: NetworkSpec, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != spec.input_dim:
        raise ValueError(
            f"inputs have {X.shape[1]} features, spec expects {spec.input_dim}")
    return np.ascontiguousarray(X)


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    """Deterministic parameter draw.

    ``ntk_standard_gaussian`` draws every weight and bias from N(0, 1);
    the 1/sqrt(fan-in) factor lives in the forward pass. ``he`` draws
    weights from N(0, 2/fan-in) with zero biases and unit forward scale.
    Gains start at 1, shifts at 0.
    """
    a = _arch(spec)
    rng = np.random.default_rng(seed)
    theta = np.zeros(a.n_params)
    for l in range(1, spec.n_layers + 1):
        nin, nout = spec.layer_widths[l - 1], spec.layer_widths[l]
        o = a.w_off[l - 1]
        if spec.init_scheme == "ntk_standard_gaussian":
            theta[o : o + nin * nout] = rng.standard_normal(nin * nout)
            theta[a.b_off[l - 1] : a.b_off[l - 1] + nout] = rng.standard_normal(nout)
        else:
            theta[o : o + nin * nout] = rng.standard_normal(nin * nout) * np.sqrt(2.0 / nin)
        if l in spec.normalize_after:
            theta[a.g_off[l - 1] : a.g_off[l - 1] + nout] = 1.0
    return ParamVector(theta, spec)


def forward(spec: NetworkSpec, params: ParamVector, norm: NormState | None,
            X: np.ndarray, mode: str = "running_stats") -> np.ndarray:
    """Network outputs (N, K).

    ``mode="running_stats"`` normalizes by the frozen state;
    ``mode="batch_stats"`` normalizes by the statistics of X itself
    (without updating the state).
    """
    X = _check_inputs(spec, X)
    _, *args = _kernel_args(spec, params, norm)
    if mode == "running_stats":
        return kernels.forward(args[0], X, *args[1:])
    if mode == "batch_stats":
        out, _ = kernels.forward_batchstats(args[0], X, *args[1:])
        return out
    raise ValueError(f"unknown forward mode {mode!r}")


def jacobian_params(spec: NetworkSpec, params: ParamVector,
                    norm: NormState | None, X: np.ndarray) -> np.ndarray:
    """Dense (N*K, P) Jacobian of outputs w.r.t. parameters.

    Rows are sample-major then output-dimension; frozen running
    statistics. Refuses to materialize beyond DENSE_JACOBIAN_BUDGET
    entries (use vjp_params / jvp_params then).
    """
    X = _check_inputs(spec, X)
    a, *args = _kernel_args(spec, params, norm)
    n_entries = X.shape[0] * spec.output_dim * a.n_params
    if n_entries > DENSE_JACOBIAN_BUDGET:
        raise ValueError(
            f"dense Jacobian would hold {n_entries} entries "
            f"(budget {DENSE_JACOBIAN_BUDGET}); use the matrix-free products")
    return kernels.jacobian(args[0], X, *args[1:])


def jacobian_connectivity(spec: NetworkSpec, params: ParamVector,
                          norm: NormState | None, X: np.ndarray) -> np.ndarray:
    """Jacobian w.r.t. the dimensionless perturbation: column j scaled by theta_j."""
    return jacobian_params(spec, params, norm, X) * params.values[None, :]


def vjp_params(spec: NetworkSpec, params: ParamVector, norm: NormState | None,
               X: np.ndarray, seed_matrix: np.ndarray) -> np.ndarray:
    """Matrix-free J^T z for an (N, K) seed; returns (P,)."""
    X = _check_inputs(spec, X)
    Z = np.ascontiguousarray(np.asarray(seed_matrix, dtype=np.float64))
    if Z.shape != (X.shape[0], spec.output_dim):
        raise ValueError("seed matrix must have shape (N, K)")
    _, *args = _kernel_args(spec, params, norm)
    return kernels.vjp(args[0], X, Z, *args[1:])


def jvp_params(spec: NetworkSpec, params: ParamVector, norm: NormState | None,
               X: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Matrix-free J v for a (P,) tangent; returns (N, K)."""
    X = _check_inputs(spec, X)
    v = np.ascontiguousarray(np.asarray(tangent, dtype=np.float64))
    if v.shape != (params.n_params,):
        raise ValueError("tangent must have shape (P,)")
    _, *args = _kernel_args(spec, params, norm)
    return kernels.jvp(args[0], X, v, *args[1:])


def linearized_predict(spec: NetworkSpec, params: ParamVector,
                       norm: NormState | None, perturbation: np.ndarray,
                       X: np.ndarray, space: str = "connectivity") -> np.ndarray:
    """First-order prediction f(X) + J v.

    ``space="connectivity"`` uses the scale-matched perturbation
    (tangent theta * c); ``space="parameter"`` uses the raw delta.
    """
    v = np.asarray(perturbation, dtype=np.float64)
    if space == "connectivity":
        tangent = params.values * v
    elif space == "parameter":
        tangent = v
    else:
        raise ValueError(f"unknown perturbation space {space!r}")
    base = forward(spec, params, norm, X)
    return base + jvp_params(spec, params, norm, X, tangent)


def squared_loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over samples of 0.5 * ||f - y||^2 (sum over output dims)."""
    outputs = np.atleast_2d(outputs)
    targets = np.atleast_2d(targets)
    r = outputs - targets
    return 0.5 * float((r * r).sum()) / outputs.shape[0]


def squared_loss_classification(outputs: np.ndarray,
                                labels: np.ndarray) -> float:
    """One-hot squared loss: mean_n 0.5*[(f_c - 1)^2 + sum_{i != c} f_i^2]."""
    outputs = np.atleast_2d(outputs)
    labels = np.asarray(labels, dtype=np.int64)
    K = outputs.shape[1]
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    onehot = np.zeros_like(outputs)
    onehot[np.arange(outputs.shape[0]), labels] = 1.0
    return squared_loss(outputs, onehot)


@dataclass(frozen=True)
class SGDConfig:
    """Hyperparameters for the reference SGD trainer."""

    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 0.0
    cosine_warmup_frac: float = 0.1
    seed: int = 0


def _lr_schedule(base_lr: float, step: int, total: int, warmup_frac: float) -> float:
    warmup = int(np.floor(warmup_frac * total))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def train_sgd(spec: NetworkSpec, params: ParamVector, norm: NormState | None,
              data: Batch, hyper: SGDConfig) -> tuple[ParamVector, NormState]:
    """Minibatch SGD with momentum and cosine learning-rate annealing.

    Minimizes mean_n 0.5*||f - y||^2 on a batch tagged S_P. Normalized
    layers use batch statistics for the forward/backward pass; the
    returned NormState holds the exponential moving average of those
    statistics. Deterministic given hyper.seed.
    """
    if data.split_tag != "S_P":
        raise ValueError("train_sgd expects a batch tagged S_P")
    if norm is None:
        norm = NormState.fresh(spec)
    a = _arch(spec)
    theta = params.values.copy()
    stats = norm.pack(spec)
    rng = np.random.default_rng(hyper.seed)
    N = data.n
    bs = min(hyper.batch_size, N)
    steps_per_epoch = int(np.ceil(N / bs))
    total = hyper.epochs * steps_per_epoch
    velocity = np.zeros_like(theta)
    X, Y = data.inputs, data.targets
    step = 0
    m = RUNNING_STATS_MOMENTUM
    for _ in range(hyper.epochs):
        perm = rng.permutation(N)
        for b in range(steps_per_epoch):
            idx = perm[b * bs : (b + 1) * bs]
            xb = np.ascontiguousarray(X[idx])
            yb = np.ascontiguousarray(Y[idx])
            grad, loss, bstats = kernels.loss_grad_batchstats(
                theta, xb, yb, a.widths, a.act_id, a.fscale, a.w_off,
                a.b_off, a.g_off, a.s_off, a.nm_off, stats,
                float(norm.epsilon))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at step {step}")
            if hyper.weight_decay:
                grad = grad + hyper.weight_decay * theta
            lr = _lr_schedule(hyper.lr, step, total, hyper.cosine_warmup_frac)
            velocity = hyper.momentum * velocity + grad
            theta = theta - lr * velocity
            if a.n_stats:
                stats = (1.0 - m) * stats + m * bstats
            step += 1
    out_norm = (NormState.unpack(spec, stats, norm.epsilon)
                if spec.normalize_after else norm.copy())
    return ParamVector(theta, spec), out_norm


def save_params(params: ParamVector, path: str | Path) -> None:
    """Write the flat vector as little-endian float64 plus a JSON sidecar.

    The sidecar (path + ".json") carries the spec and the explicit
    coordinate index map.
    """
    path = Path(path)
    path.write_bytes(params.values.astype("<f8").tobytes())
    sidecar = {
        "format": "float64-le",
        "n_params": params.n_params,
        "spec": params.spec.to_dict(),
        "index_map": index_map(params.spec),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def load_params(path: str | Path) -> ParamVector:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    spec = NetworkSpec.from_dict(sidecar["spec"])
    values = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    return ParamVector(values, spec)
