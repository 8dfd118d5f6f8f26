"""Trainable parameter storage, Adam, learning-rate schedule and gradient checking.

Every differentiable piece of the pipeline is written as a *block*: a function
``apply(params, inputs) -> (outputs, pullback)`` where ``pullback(cotangent)``
returns ``(input_cotangents, param_grads)``.  There is no general tape; the
pipeline is fixed, so each block carries its own hand-derived VJP.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, GradientCheckError, MissingGradientError

logger = logging.getLogger(__name__)

Arrays = Dict[str, np.ndarray]
Pullback = Callable[[object], Tuple[Arrays, Arrays]]


class ParameterStore:
    """Ordered name -> array map with matching additive gradient buffers."""

    def __init__(self, params: Optional[Mapping[str, np.ndarray]] = None):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix: str = "") -> list:
        return [n for n in self.params if n.startswith(prefix)]

    def subset(self, prefix: str) -> Arrays:
        """Parameters under ``prefix`` with the prefix stripped."""
        return {n[len(prefix):]: v for n, v in self.params.items() if n.startswith(prefix)}

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def accumulate(self, grads: Mapping[str, np.ndarray], prefix: str = "") -> None:
        for name, g in grads.items():
            key = prefix + name
            if key not in self.grads:
                raise ConfigError(f"gradient for unknown parameter {key!r}")
            buf = self.grads[key]
            if np.shape(g) != buf.shape:
                raise ConfigError(
                    f"gradient shape {np.shape(g)} does not match parameter {key!r} {buf.shape}"
                )
            buf += g

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self.params.items():
            out.add(name, value.copy())
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self.params.items():
            out.add(name, value.astype(dtype))
        return out

    def num_values(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.beta1,
            self.beta2,
            self.eps,
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


LrFn = Callable[[str], float]


def adam_step(store: ParameterStore, state: AdamState, lr, names: Optional[Iterable[str]] = None) -> None:
    """Bias-corrected Adam update, in place.

    ``lr`` is either a float or a callable mapping parameter name to its rate.
    Gradients are left untouched; the caller zeroes them.
    """
    names = list(store.params) if names is None else list(names)
    for name in names:
        if name not in store.grads or store.grads[name] is None:
            raise MissingGradientError(f"no gradient populated for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in names:
        p = store.params[name]
        g = store.grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        rate = lr(name) if callable(lr) else lr
        if rate == 0.0:
            continue
        p -= (rate / c1) * m / (np.sqrt(v / c2) + state.eps)


def lr_schedule(base_lr: float, iteration: int, decay_period: int = 500_000) -> float:
    """Step decay by 0.1 every ``decay_period`` iterations."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return base_lr * 0.1 ** (iteration // decay_period)


@dataclass(frozen=True)
class LearningRates:
    """Group-wise base rates resolved by parameter-name prefix."""

    base: float = 5e-5
    voxels: float = 2e-2
    radiance: float = 5e-4
    decay_period: int = 500_000

    def base_for(self, name: str) -> float:
        if name.endswith("voxels"):
            return self.voxels
        if name.startswith("radiance."):
            return self.radiance
        return self.base

    def resolver(self, iteration: int) -> LrFn:
        return lambda name: lr_schedule(self.base_for(name), iteration, self.decay_period)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    block: str
    max_rel_err: float
    passed: bool
    worst: str = ""
    checked: int = 0
    kinks: int = 0


def _scalarize(outputs, weights):
    if isinstance(outputs, tuple):
        return sum(float(np.sum(o * w)) for o, w in zip(outputs, weights))
    return float(np.sum(outputs * weights))


def _random_cotangent(outputs, rng):
    if isinstance(outputs, tuple):
        return tuple(rng.standard_normal(np.shape(o)) for o in outputs)
    return rng.standard_normal(np.shape(outputs))


def check_gradients(
    name: str,
    apply: Callable,
    params: Arrays,
    inputs: Arrays,
    seed: int = 0,
    fd_step: float = 1e-5,
    tol: float = 1e-4,
    wrt_inputs: Iterable[str] = (),
    max_entries: int = 256,
    abs_floor: float = 1e-7,
) -> GradCheckReport:
    """Compare a block's pullback against central finite differences.

    The output is scalarized with a fixed random cotangent ``r`` so that the
    pullback of ``r`` is the gradient of ``sum(r * out)``.  For tensors larger
    than ``max_entries`` a seeded random subset of entries is checked.
    Relative error per tensor is ``|g - fd|_2 / max(|g|_2, |fd|_2)``; tensors
    whose gradients are both below ``abs_floor`` count as exact.
    """
    rng = np.random.default_rng(seed)
    outputs, pullback = apply(params, inputs)
    flat = outputs if isinstance(outputs, tuple) else (outputs,)
    for o in flat:
        if not np.all(np.isfinite(o)):
            raise GradientCheckError(f"block {name!r} produced a non-finite forward output")
    cot = _random_cotangent(outputs, rng)
    g_inputs, g_params = pullback(cot)

    targets = [("param", k, params, g_params.get(k)) for k in params]
    targets += [("input", k, inputs, g_inputs.get(k)) for k in wrt_inputs]

    worst_err, worst_name, checked, kinks = 0.0, "", 0, 0
    base_value = None
    for kind, key, holder, analytic in targets:
        arr = holder[key]
        if analytic is None:
            analytic = np.zeros_like(arr)
        analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
        flat_arr = arr.reshape(-1)
        if flat_arr.size > max_entries:
            idx = np.sort(rng.choice(flat_arr.size, size=max_entries, replace=False))
        else:
            idx = np.arange(flat_arr.size)
        ups, downs = np.empty(idx.size), np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat_arr[i]
            flat_arr[i] = orig + fd_step
            ups[j] = _scalarize(apply(params, inputs)[0], cot)
            flat_arr[i] = orig - fd_step
            downs[j] = _scalarize(apply(params, inputs)[0], cot)
            flat_arr[i] = orig
        fd = (ups - downs) / (2 * fd_step)
        a = analytic[idx]
        scale = max(np.linalg.norm(a), np.linalg.norm(fd))
        if scale >= abs_floor:
            # A piecewise-smooth block (ReLU, cell boundaries) may have a kink
            # inside the step.  For a smooth function the analytic value sits
            # halfway between the one-sided slopes; at a kink it matches one of
            # them much more closely.  Such entries drop out of the comparison.
            suspect = np.flatnonzero(np.abs(a - fd) > tol * scale)
            if suspect.size:
                if base_value is None:
                    base_value = _scalarize(apply(params, inputs)[0], cot)
                fwd = (ups[suspect] - base_value) / fd_step
                bwd = (base_value - downs[suspect]) / fd_step
                near = np.minimum(np.abs(a[suspect] - fwd), np.abs(a[suspect] - bwd))
                kink = near <= 0.1 * np.abs(fwd - bwd)
                hit = suspect[kink]
                fd[hit] = a[hit]
                kinks += int(hit.size)
        err = 0.0 if scale < abs_floor else float(np.linalg.norm(a - fd) / scale)
        checked += idx.size
        if err > worst_err or not worst_name:
            worst_err, worst_name = err, f"{kind}:{key}"
    report = GradCheckReport(name, worst_err, worst_err <= tol, worst_name, checked, kinks)
    logger.debug("gradcheck %s: max rel err %.3e (%s)", name, worst_err, worst_name)
    return report
