"""Small dense feed-forward networks with manual backprop.

Layers are dense -> optional batch norm -> activation. Parameters live in a
flat ``name -> ndarray`` dict so optimizers, polyak averaging and checkpoints
can treat every network the same way. Everything is float64.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5


class NetworkStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    batch_norm: bool = False
    activation: str = "identity"  # or "leaky_relu"
    slope: float = 0.01

    def __post_init__(self):
        if self.activation not in ("identity", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


def mlp_specs(sizes, *, hidden_bn=False, out_bn=False, out_activation="identity",
              slope=0.01) -> list[LayerSpec]:
    """Specs for a plain MLP: leaky-relu on hidden layers, configurable output."""
    specs = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        specs.append(LayerSpec(
            a, b,
            batch_norm=out_bn if last else hidden_bn,
            activation=out_activation if last else "leaky_relu",
            slope=slope,
        ))
    return specs


class Network:
    def __init__(self, specs: list[LayerSpec], rng: np.random.Generator | None = None,
                 bn_momentum: float = 0.1):
        for a, b in zip(specs[:-1], specs[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        self.specs = list(specs)
        self.bn_momentum = bn_momentum
        self.mode = "train"
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, s in enumerate(self.specs):
            gain = 2.0 if s.activation == "leaky_relu" else 1.0
            self.params[f"{i}.weight"] = rng.normal(0.0, np.sqrt(gain / s.in_dim), (s.in_dim, s.out_dim))
            self.params[f"{i}.bias"] = np.zeros(s.out_dim)
            if s.batch_norm:
                self.params[f"{i}.gamma"] = np.ones(s.out_dim)
                self.params[f"{i}.beta"] = np.zeros(s.out_dim)
                self.buffers[f"{i}.running_mean"] = np.zeros(s.out_dim)
                self.buffers[f"{i}.running_var"] = np.ones(s.out_dim)

    @classmethod
    def mlp(cls, sizes, rng=None, **kw) -> "Network":
        return cls(mlp_specs(sizes, **kw), rng=rng)

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def clone(self) -> "Network":
        other = copy.copy(self)
        other.specs = list(self.specs)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other._cache = None
        return other

    def describe(self) -> list[dict]:
        return [dict(in_dim=s.in_dim, out_dim=s.out_dim, batch_norm=s.batch_norm,
                     activation=s.activation, slope=s.slope) for s in self.specs]

    @classmethod
    def from_description(cls, desc: list[dict]) -> "Network":
        return cls([LayerSpec(**d) for d in desc])

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v.copy() for k, v in self.params.items()}
        out.update({f"buffer.{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> "Network":
        for k in self.params:
            self.params[k] = np.array(arrays[f"param.{k}"], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(arrays[f"buffer.{k}"], dtype=np.float64)
        self._cache = None
        return self

    # -- forward / backward ----------------------------------------------------

    def _run(self, x, train: bool, record: bool):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (n, {self.in_dim}), got {x.shape}")
        cache = []
        h = x
        for i, s in enumerate(self.specs):
            entry = {"x": h}
            z = h @ self.params[f"{i}.weight"] + self.params[f"{i}.bias"]
            if s.batch_norm:
                if train:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    if record:
                        m = self.bn_momentum
                        rm, rv = self.buffers[f"{i}.running_mean"], self.buffers[f"{i}.running_var"]
                        rm *= 1.0 - m
                        rm += m * mu
                        rv *= 1.0 - m
                        rv += m * var
                else:
                    mu = self.buffers[f"{i}.running_mean"]
                    var = self.buffers[f"{i}.running_var"]
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (z - mu) * inv_std
                entry.update(xhat=xhat, inv_std=inv_std, bn_train=train)
                z = self.params[f"{i}.gamma"] * xhat + self.params[f"{i}.beta"]
            entry["pre"] = z
            if s.activation == "leaky_relu":
                h = np.where(z > 0, z, s.slope * z)
            else:
                h = z
            cache.append(entry)
        return h, cache

    def forward(self, x) -> np.ndarray:
        """Forward pass in the current mode; caches activations for backward."""
        out, cache = self._run(x, self.mode == "train", record=True)
        self._cache = cache
        return out

    def predict(self, x) -> np.ndarray:
        """Eval-mode forward that leaves the backward cache and BN statistics alone."""
        return self._run(x, False, record=False)[0]

    def activation_pattern(self, x) -> list[np.ndarray]:
        """Sign pattern of every leaky-relu pre-activation (kink detection)."""
        _, cache = self._run(x, self.mode == "train", record=False)
        return [e["pre"] > 0 for e, s in zip(cache, self.specs) if s.activation == "leaky_relu"]

    def backward(self, grad_out) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Return (parameter gradients, input gradient) for the last forward."""
        if self._cache is None:
            raise NetworkStateError("backward called before forward")
        g = np.asarray(grad_out, dtype=np.float64)
        grads: dict[str, np.ndarray] = {}
        for i in reversed(range(len(self.specs))):
            s, e = self.specs[i], self._cache[i]
            if g.shape != e["pre"].shape:
                raise ValueError(f"upstream gradient shape {g.shape} != {e['pre'].shape}")
            if s.activation == "leaky_relu":
                g = g * np.where(e["pre"] > 0, 1.0, s.slope)
            if s.batch_norm:
                xhat = e["xhat"]
                grads[f"{i}.gamma"] = (g * xhat).sum(axis=0)
                grads[f"{i}.beta"] = g.sum(axis=0)
                dxhat = g * self.params[f"{i}.gamma"]
                if e["bn_train"]:
                    n = g.shape[0]
                    g = (e["inv_std"] / n) * (
                        n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                    )
                else:
                    g = dxhat * e["inv_std"]
            grads[f"{i}.weight"] = e["x"].T @ g
            grads[f"{i}.bias"] = g.sum(axis=0)
            g = g @ self.params[f"{i}.weight"].T
        return grads, g


def leaky_relu(x, slope=0.01):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, slope * x)


def mse(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# -- optimizers ------------------------------------------------------------------


@dataclass
class ExponentialDecay:
    """lr(t) = start * (end/start)^(t/horizon), held at ``end`` past the horizon."""

    start: float
    end: float
    horizon: int

    def __call__(self, step: int) -> float:
        if step <= 0:
            return self.start
        if step >= self.horizon:
            return self.end
        return self.start * (self.end / self.start) ** (step / self.horizon)


@dataclass
class Optimizer:
    schedule: ExponentialDecay
    kind: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: float | None = None
    step_count: int = 0
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of every parameter that has a gradient."""
        lr = self.lr
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        for name in sorted(grads):
            p, g = params[name], grads[name]
            if self.kind == "sgd":
                p -= lr * g
                continue
            m = self.state.setdefault(f"m:{name}", np.zeros_like(p))
            v = self.state.setdefault(f"v:{name}", np.zeros_like(p))
            b1, b2 = self.betas
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = dict(kind=self.kind, betas=list(self.betas), eps=self.eps,
                    max_grad_norm=self.max_grad_norm, step_count=self.step_count,
                    schedule=dict(start=self.schedule.start, end=self.schedule.end,
                                  horizon=self.schedule.horizon))
        return meta, {k: v.copy() for k, v in self.state.items()}

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "Optimizer":
        return cls(schedule=ExponentialDecay(**meta["schedule"]), kind=meta["kind"],
                   betas=tuple(meta["betas"]), eps=meta["eps"],
                   max_grad_norm=meta["max_grad_norm"], step_count=meta["step_count"],
                   state={k: v.copy() for k, v in arrays.items()})


def polyak_update(target: Network, main: Network, tau: float) -> Network:
    """target <- tau * main + (1 - tau) * target, in place (params and BN stats)."""
    if target.describe() != main.describe():
        raise ValueError("polyak update between different architectures")
    for store_t, store_m in ((target.params, main.params), (target.buffers, main.buffers)):
        for k, v in store_m.items():
            t = store_t[k]
            t *= 1.0 - tau
            t += tau * v
    return target


# -- gradient checking -------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: list[tuple[str, tuple[int, ...]]]
    worst: tuple[str, tuple[int, ...]] | None = None

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(net: Network, batch, tolerance: float = 1e-4, h: float = 1e-4,
               seed: int = 0, include_input: bool = True) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The scalar probed is ``sum(forward(x) * c)`` for a fixed random ``c``.
    Coordinates whose perturbation flips any leaky-relu sign are reported as
    skipped instead of compared, since the loss has a kink there. The network
    must be in eval mode so batch-norm statistics stay frozen.
    """
    if net.mode != "eval":
        raise NetworkStateError("grad_check requires eval mode")
    x = np.array(batch, dtype=np.float64)
    coef = np.random.default_rng(seed).normal(size=(x.shape[0], net.out_dim))

    def loss():
        return float(np.sum(net.predict(x) * coef))

    net.forward(x)
    grads, gx = net.backward(coef)
    base_pattern = net.activation_pattern(x)

    def same_pattern():
        return all(np.array_equal(a, b) for a, b in zip(base_pattern, net.activation_pattern(x)))

    worst, max_err, checked, skipped = None, 0.0, 0, []
    targets = [(k, net.params[k], grads[k]) for k in net.params]
    if include_input:
        targets.append(("input", x, gx))
    for name, arr, analytic in targets:
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp, ok_p = loss(), same_pattern()
            arr[idx] = old - h
            lm, ok_m = loss(), same_pattern()
            arr[idx] = old
            if not (ok_p and ok_m):
                skipped.append((name, idx))
                continue
            numeric = (lp - lm) / (2 * h)
            a = analytic[idx]
            err = float(abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
            checked += 1
            if err > max_err:
                max_err, worst = err, (name, idx)
    return GradCheckReport(max_err, checked, skipped, worst)


def random_network(rng: np.random.Generator, max_layers: int = 3, max_width: int = 6) -> Network:
    """Small random MLP with random batch-norm statistics, for gradient checks."""
    n_layers = int(rng.integers(1, max_layers + 1))
    sizes = [int(s) for s in rng.integers(2, max_width + 1, size=n_layers + 1)]
    specs = [LayerSpec(a, b, batch_norm=bool(rng.integers(0, 2)),
                       activation="leaky_relu" if i < n_layers - 1 or rng.integers(0, 2) else "identity")
             for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
    net = Network(specs, rng=rng)
    for k in net.params:
        if k.endswith(("gamma", "beta", "bias")):
            net.params[k] = rng.normal(1.0 if k.endswith("gamma") else 0.0, 0.3, net.params[k].shape)
    for k in net.buffers:
        shape = net.buffers[k].shape
        net.buffers[k] = rng.uniform(0.5, 2.0, shape) if k.endswith("var") else rng.normal(0, 0.5, shape)
    return net.eval()
