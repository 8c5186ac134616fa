"""Function-preserving parameter scaling transformations.

Three catalog kinds, all invertible diagonal maps on the flat parameter
vector:

* ``activation_rescale``: scale the input edges (weights + bias) of one
  ReLU unit by gamma and its output edges by 1/gamma. Valid only on
  positively homogeneous (ReLU) hidden layers without normalization.
* ``norm_scale``: scale the rows feeding a normalized layer by a
  per-unit positive vector; the running mean scales along and the
  running variance by the square, so the normalized output is unchanged.
* ``weight_decay_scale``: multiply every scale-invariant coordinate
  (weights/biases feeding normalized layers) by a single gamma in (0, 1],
  with the same statistics update. This is the decay-step realization of
  the catalog.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ctklab.nets import NetworkSpec, NormState, ParamVector, _arch, forward

TRANSFORM_KINDS = ("activation_rescale", "norm_scale", "weight_decay_scale")


@dataclass(frozen=True)
class TransformSpec:
    """One catalog transformation.

    ``layer``/``unit`` are used by activation_rescale (unit is 0-based);
    norm_scale uses ``layer`` and a scalar-or-vector ``gamma``;
    weight_decay_scale uses only a scalar ``gamma``.
    """

    kind: str
    layer: int | None = None
    unit: int | None = None
    gamma: float | tuple[float, ...] = 1.0

    def gamma_vector(self, width: int) -> np.ndarray:
        g = np.asarray(self.gamma, dtype=np.float64)
        if g.ndim == 0:
            g = np.full(width, float(g))
        if g.shape != (width,):
            raise ValueError(f"gamma vector must have length {width}")
        return g

    def to_dict(self) -> dict:
        g = self.gamma
        return {"kind": self.kind, "layer": self.layer, "unit": self.unit,
                "gamma": list(g) if isinstance(g, tuple) else g}

    @staticmethod
    def from_dict(d: dict) -> "TransformSpec":
        g = d.get("gamma", 1.0)
        if isinstance(g, (list, tuple)):
            g = tuple(float(x) for x in g)
        return TransformSpec(kind=d["kind"], layer=d.get("layer"),
                             unit=d.get("unit"), gamma=g)


def validate_transform(spec: NetworkSpec, t: TransformSpec) -> None:
    """Raise ValueError unless t is applicable to this architecture."""
    if t.kind not in TRANSFORM_KINDS:
        raise ValueError(f"unknown transform kind {t.kind!r}")
    if t.kind == "activation_rescale":
        if spec.activation != "relu":
            raise ValueError(
                "activation_rescale needs a positively homogeneous "
                f"activation, not {spec.activation!r}")
        if t.layer is None or not 1 <= t.layer < spec.n_layers:
            raise ValueError("activation_rescale layer must be a hidden layer")
        if t.layer in spec.normalize_after:
            raise ValueError(
                "activation_rescale on a normalized layer would not "
                "preserve the function (frozen statistics); use norm_scale")
        if t.unit is None or not 0 <= t.unit < spec.layer_widths[t.layer]:
            raise ValueError("activation_rescale unit out of range")
        if np.ndim(t.gamma) != 0 or not float(np.asarray(t.gamma)) > 0:
            raise ValueError("gamma must be a positive scalar")
    elif t.kind == "norm_scale":
        if t.layer is None or t.layer not in spec.normalize_after:
            raise ValueError("norm_scale layer must carry normalization")
        g = t.gamma_vector(spec.layer_widths[t.layer])
        if np.any(g <= 0):
            raise ValueError("gamma must be strictly positive")
    else:
        g = np.asarray(t.gamma, dtype=np.float64)
        if g.ndim != 0 or not 0.0 < float(g) <= 1.0:
            raise ValueError("weight_decay_scale gamma must lie in (0, 1]")


def scale_invariant_mask(spec: NetworkSpec) -> np.ndarray:
    """Boolean (P,) mask of weights and biases feeding normalized layers."""
    a = _arch(spec)
    mask = np.zeros(a.n_params, dtype=bool)
    for l in sorted(spec.normalize_after):
        nin, nout = spec.layer_widths[l - 1], spec.layer_widths[l]
        mask[a.w_off[l - 1] : a.w_off[l - 1] + nin * nout] = True
        mask[a.b_off[l - 1] : a.b_off[l - 1] + nout] = True
    return mask


def transform_scale_vector(spec: NetworkSpec, t: TransformSpec) -> np.ndarray:
    """The diagonal of the transform: per-coordinate multiplicative factor."""
    validate_transform(spec, t)
    a = _arch(spec)
    scale = np.ones(a.n_params)
    if t.kind == "activation_rescale":
        l, k = t.layer, t.unit
        g = float(np.asarray(t.gamma))
        nin, nout = spec.layer_widths[l - 1], spec.layer_widths[l]
        wo = a.w_off[l - 1]
        scale[wo + k * nin : wo + (k + 1) * nin] = g
        scale[a.b_off[l - 1] + k] = g
        nin_next = nout
        nout_next = spec.layer_widths[l + 1]
        wo_next = a.w_off[l]
        scale[wo_next + k : wo_next + nin_next * nout_next : nin_next] = 1.0 / g
    elif t.kind == "norm_scale":
        l = t.layer
        nin, nout = spec.layer_widths[l - 1], spec.layer_widths[l]
        g = t.gamma_vector(nout)
        wo = a.w_off[l - 1]
        scale[wo : wo + nin * nout] = np.repeat(g, nin)
        scale[a.b_off[l - 1] : a.b_off[l - 1] + nout] = g
    else:
        scale[scale_invariant_mask(spec)] = float(np.asarray(t.gamma))
    return scale


def _scaled_stats(norm: NormState, layer: int, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # the mean scales along; the variance co-transforms through the
    # effective denominator var + eps so that (g*z - g*m)/sqrt(var' + eps)
    # reproduces the original normalized value exactly
    eps = norm.epsilon
    mean = norm.running_mean[layer] * g
    var = g * g * (norm.running_var[layer] + eps) - eps
    if np.any(var <= 0.0):
        raise ValueError(
            f"scaling layer {layer} would drive a running variance below "
            "zero; variance is too close to epsilon for this gamma")
    return mean, var


def apply_transform(spec: NetworkSpec, params: ParamVector, norm: NormState,
                    t: TransformSpec) -> tuple[ParamVector, NormState]:
    """Apply one catalog transform, returning fresh (params, norm).

    Statistics of affected normalized layers co-transform (mean by gamma,
    effective variance by gamma^2) so normalized outputs are preserved
    exactly, not just up to the epsilon floor.
    """
    scale = transform_scale_vector(spec, t)
    new_params = ParamVector(params.values * scale, spec)
    new_norm = norm.copy()
    if t.kind == "norm_scale":
        g = t.gamma_vector(spec.layer_widths[t.layer])
        mean, var = _scaled_stats(norm, t.layer, g)
        new_norm.running_mean[t.layer] = mean
        new_norm.running_var[t.layer] = var
    elif t.kind == "weight_decay_scale":
        g = float(np.asarray(t.gamma))
        for l in sorted(spec.normalize_after):
            mean, var = _scaled_stats(norm, l, np.full(spec.layer_widths[l], g))
            new_norm.running_mean[l] = mean
            new_norm.running_var[l] = var
    return new_params, new_norm


@dataclass(frozen=True)
class PreservationCheck:
    max_abs_gap: float
    passed: bool


def verify_function_preserving(spec: NetworkSpec, params: ParamVector,
                               norm: NormState, t: TransformSpec,
                               X_probe: np.ndarray,
                               tol: float = 1e-9) -> PreservationCheck:
    """Max |f(x, theta) - f(x, T(theta))| over probe inputs and outputs."""
    X_probe = np.atleast_2d(np.asarray(X_probe, dtype=np.float64))
    if X_probe.shape[0] == 0:
        raise ValueError("X_probe must be nonempty")
    before = forward(spec, params, norm, X_probe)
    tp, tn = apply_transform(spec, params, norm, t)
    after = forward(spec, tp, tn, X_probe)
    gap = float(np.abs(before - after).max())
    return PreservationCheck(max_abs_gap=gap, passed=gap <= tol)


def sample_transforms(spec: NetworkSpec, n: int, seed: int,
                      gamma_range: tuple[float, float] = (0.5, 2.0)) -> list[TransformSpec]:
    """Draw n random valid catalog transforms (log-uniform gammas)."""
    rng = np.random.default_rng(seed)
    kinds: list[str] = []
    rescale_layers = [l for l in range(1, spec.n_layers)
                      if spec.activation == "relu" and l not in spec.normalize_after]
    if rescale_layers:
        kinds.append("activation_rescale")
    if spec.normalize_after:
        kinds.extend(["norm_scale", "weight_decay_scale"])
    if not kinds:
        raise ValueError("no catalog transform is valid for this spec")
    lo, hi = np.log(gamma_range[0]), np.log(gamma_range[1])

    def draw_gamma() -> float:
        return float(np.exp(rng.uniform(lo, hi)))

    out = []
    for _ in range(n):
        kind = kinds[rng.integers(len(kinds))]
        if kind == "activation_rescale":
            l = rescale_layers[rng.integers(len(rescale_layers))]
            k = int(rng.integers(spec.layer_widths[l]))
            out.append(TransformSpec("activation_rescale", layer=l, unit=k,
                                     gamma=draw_gamma()))
        elif kind == "norm_scale":
            layers = sorted(spec.normalize_after)
            l = layers[rng.integers(len(layers))]
            g = tuple(np.exp(rng.uniform(lo, hi, size=spec.layer_widths[l])))
            out.append(TransformSpec("norm_scale", layer=l, gamma=g))
        else:
            g = float(np.exp(rng.uniform(lo, 0.0)))
            g = min(g, 1.0)
            out.append(TransformSpec("weight_decay_scale", gamma=g))
    return out
