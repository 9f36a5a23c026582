"""Numpy MLP with element-wise affine personalization layers.

The combined model is ``f_out . f_shared . f_in`` where ``f_in`` and ``f_out``
are per-client maps ``x -> (x + b) * w`` and ``f_shared`` is the fixed
D -> 128 -> 64 -> K tanh network. Forward, backward and the momentum SGD
update are written out by hand; there is no autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

HIDDEN = (128, 64)
KEEP_PROB = 0.8
INIT_SCHEMES = ("uniform", "glorot")

SHARED_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
PERSONAL_NAMES = ("b_in", "w_in", "b_out", "w_out")


@dataclass
class SharedParams:
    """Weights of the shared block. ``w*`` are (fan_in, fan_out)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def n_features(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w3.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SHARED_NAMES}

    def copy(self) -> "SharedParams":
        return SharedParams(**{k: v.copy() for k, v in self.arrays().items()})

    def size(self) -> int:
        return sum(v.size for v in self.arrays().values())

    @classmethod
    def zeros(cls, n_features: int, n_classes: int) -> "SharedParams":
        dims = (n_features,) + HIDDEN + (n_classes,)
        kw = {}
        for i in range(3):
            kw[f"w{i + 1}"] = np.zeros((dims[i], dims[i + 1]))
            kw[f"b{i + 1}"] = np.zeros(dims[i + 1])
        return cls(**kw)

    @classmethod
    def init(cls, n_features: int, n_classes: int, rng: np.random.Generator,
             scheme: str = "uniform") -> "SharedParams":
        """Random shared block.

        ``uniform``: weights and biases uniform in +-1/sqrt(fan_in).
        ``glorot``: weights uniform in +-sqrt(6/(fan_in+fan_out)), zero biases.
        """
        if scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {scheme!r}")
        dims = (n_features,) + HIDDEN + (n_classes,)
        kw = {}
        for i in range(3):
            if scheme == "uniform":
                bound = 1.0 / np.sqrt(dims[i])
                kw[f"w{i + 1}"] = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
                kw[f"b{i + 1}"] = rng.uniform(-bound, bound, size=dims[i + 1])
            else:
                bound = np.sqrt(6.0 / (dims[i] + dims[i + 1]))
                kw[f"w{i + 1}"] = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
                kw[f"b{i + 1}"] = np.zeros(dims[i + 1])
        return cls(**kw)


@dataclass
class PersonalParams:
    """Per-client input/output affine layers.

    ``w_out`` has shape (K,) in vector mode and (1,) in scalar mode. The
    ``train_*`` flags decide which vectors receive gradients.
    """

    b_in: np.ndarray
    w_in: np.ndarray
    b_out: np.ndarray
    w_out: np.ndarray
    train_b_in: bool = True
    train_w_in: bool = True
    train_b_out: bool = False
    train_w_out: bool = False

    @classmethod
    def identity(
        cls,
        n_features: int,
        n_classes: int,
        *,
        scalar_w_out: bool = False,
        train_b_in: bool = True,
        train_w_in: bool = True,
        train_b_out: bool = False,
        train_w_out: bool = False,
    ) -> "PersonalParams":
        return cls(
            b_in=np.zeros(n_features),
            w_in=np.ones(n_features),
            b_out=np.zeros(n_classes),
            w_out=np.ones(1 if scalar_w_out else n_classes),
            train_b_in=train_b_in,
            train_w_in=train_w_in,
            train_b_out=train_b_out,
            train_w_out=train_w_out,
        )

    def trainable(self) -> Dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PERSONAL_NAMES if getattr(self, f"train_{n}")}

    def frozen(self) -> bool:
        return not self.trainable()

    def copy(self) -> "PersonalParams":
        return PersonalParams(
            b_in=self.b_in.copy(),
            w_in=self.w_in.copy(),
            b_out=self.b_out.copy(),
            w_out=self.w_out.copy(),
            train_b_in=self.train_b_in,
            train_w_in=self.train_w_in,
            train_b_out=self.train_b_out,
            train_w_out=self.train_w_out,
        )

    def size(self) -> int:
        return self.b_in.size + self.w_in.size + self.b_out.size + self.w_out.size


@dataclass
class ForwardCache:
    x: np.ndarray
    a0: np.ndarray  # f_in output, pre-dropout
    a1: np.ndarray  # tanh outputs, pre-dropout
    a2: np.ndarray
    d0: np.ndarray  # the same after dropout
    d1: np.ndarray
    d2: np.ndarray
    z: np.ndarray  # shared-block logits
    out: np.ndarray  # final logits
    masks: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        for v in self.velocity.values():
            v.fill(0.0)


def affine_apply(b: np.ndarray, w, x: np.ndarray) -> np.ndarray:
    """Element-wise ``(x + b) * w``; ``w`` may be a scalar or length-1 array."""
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    if b.shape[-1:] != x.shape[-1:]:
        raise ValueError(f"bias has shape {b.shape}, input has {x.shape}")
    if w.ndim > 0 and w.size != 1 and w.shape[-1:] != x.shape[-1:]:
        raise ValueError(f"weight has shape {w.shape}, input has {x.shape}")
    return (x + b) * w


def draw_masks(
    rng: np.random.Generator, n: int, n_features: int, keep: float = KEEP_PROB
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverted-dropout masks for the three dropout sites (values 0 or 1/keep)."""
    # float32 uniforms are plenty for a Bernoulli draw and about twice as cheap
    block = (rng.random((n, n_features + sum(HIDDEN)), dtype=np.float32) < keep) * (1.0 / keep)
    a, b = n_features, n_features + HIDDEN[0]
    return block[:, :a], block[:, a:b], block[:, b:]


def forward(
    shared: SharedParams,
    personal: Optional[PersonalParams],
    batch: np.ndarray,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    masks: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
) -> Tuple[np.ndarray, ForwardCache]:
    """Logits of the combined model and the cache needed by :func:`backward`.

    In train mode masks are drawn from ``rng`` unless given explicitly.
    ``personal=None`` runs the bare shared block.
    """
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != shared.n_features:
        raise ValueError(f"batch shape {x.shape} does not match D={shared.n_features}")
    if train_mode and masks is None:
        if rng is None:
            raise ValueError("train mode needs an rng or explicit masks")
        masks = draw_masks(rng, x.shape[0], shared.n_features)
    if not train_mode:
        masks = None

    a0 = x if personal is None else (x + personal.b_in) * personal.w_in
    d0 = a0 if masks is None else a0 * masks[0]
    a1 = np.tanh(d0 @ shared.w1 + shared.b1)
    d1 = a1 if masks is None else a1 * masks[1]
    a2 = np.tanh(d1 @ shared.w2 + shared.b2)
    d2 = a2 if masks is None else a2 * masks[2]
    z = d2 @ shared.w3 + shared.b3
    out = z if personal is None else (z + personal.b_out) * personal.w_out
    return out, ForwardCache(x=x, a0=a0, a1=a1, a2=a2, d0=d0, d1=d1, d2=d2, z=z, out=out, masks=masks)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_targets(targets: np.ndarray, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError(f"targets must lie in [0, {n_classes})")
    return targets.astype(np.intp)


def loss_weighted_nll(logits: np.ndarray, targets, class_weights) -> float:
    """Mean over the batch of ``weight[y] * -log_softmax(logits)[y]``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    targets = _check_targets(targets, logits.shape[1])
    weights = np.asarray(class_weights, dtype=float)
    if np.any(weights <= 0):
        raise ValueError("class weights must be strictly positive")
    rows = np.arange(len(targets))
    picked = log_softmax(logits)[rows, targets]
    return float(np.mean(-weights[targets] * picked))


def backward(
    shared: SharedParams,
    personal: Optional[PersonalParams],
    cache: ForwardCache,
    targets,
    class_weights,
) -> Dict[str, np.ndarray]:
    """Gradients of :func:`loss_weighted_nll` for every trainable parameter.

    Returns a dict keyed by parameter name; frozen personal vectors are absent.
    """
    n = cache.out.shape[0]
    targets = _check_targets(targets, cache.out.shape[1])
    if len(targets) != n:
        raise ValueError(f"cache holds {n} rows but {len(targets)} targets were given")
    weights = np.asarray(class_weights, dtype=float)
    rows = np.arange(n)

    g_out = softmax(cache.out)
    g_out[rows, targets] -= 1.0
    g_out *= (weights[targets] / n)[:, None]

    grads: Dict[str, np.ndarray] = {}
    if personal is not None:
        if personal.train_w_out:
            prod = g_out * (cache.z + personal.b_out)
            grads["w_out"] = np.array([prod.sum()]) if personal.w_out.size == 1 else prod.sum(axis=0)
        g_z = g_out * personal.w_out
        if personal.train_b_out:
            grads["b_out"] = g_z.sum(axis=0)
    else:
        g_z = g_out

    m0, m1, m2 = cache.masks if cache.masks is not None else (None, None, None)
    grads["w3"] = cache.d2.T @ g_z
    grads["b3"] = g_z.sum(axis=0)
    g = g_z @ shared.w3.T
    if m2 is not None:
        g *= m2
    g *= 1.0 - cache.a2 * cache.a2

    grads["w2"] = cache.d1.T @ g
    grads["b2"] = g.sum(axis=0)
    g = g @ shared.w2.T
    if m1 is not None:
        g *= m1
    g *= 1.0 - cache.a1 * cache.a1

    grads["w1"] = cache.d0.T @ g
    grads["b1"] = g.sum(axis=0)

    if personal is not None and (personal.train_b_in or personal.train_w_in):
        g = g @ shared.w1.T
        if m0 is not None:
            g *= m0
        if personal.train_w_in:
            grads["w_in"] = (g * (cache.x + personal.b_in)).sum(axis=0)
        if personal.train_b_in:
            grads["b_in"] = (g * personal.w_in).sum(axis=0)
    return grads


def trainable_arrays(shared: SharedParams, personal: Optional[PersonalParams]) -> Dict[str, np.ndarray]:
    params = shared.arrays()
    if personal is not None:
        params.update(personal.trainable())
    return params


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], opt: OptimizerState) -> None:
    """Classical momentum, in place: ``v = mu*v + g``; ``p -= lr*v``.

    Velocity buffers are created lazily (zero) on first sight of a parameter.
    """
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: parameter {p.shape} vs gradient {g.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(p)
        v *= opt.momentum
        v += g
        p -= opt.lr * v


def lr_schedule(t: int, base_lr: float = 0.002, total_rounds: int = 1000, n_decays: int = 50, gamma: float = 0.9) -> float:
    """Step decay: ``n_decays`` multiplications by ``gamma`` spread over ``total_rounds``."""
    if t < 0:
        raise ValueError("round must be non-negative")
    return base_lr * gamma ** ((t * n_decays) // total_rounds)


def param_count(n_features: int, n_classes: int, scalar_w_out: bool = False) -> Tuple[int, int]:
    """(shared, personal) parameter counts."""
    if n_features < 1 or n_classes < 1:
        raise ValueError("D and K must be positive")
    dims = (n_features,) + HIDDEN + (n_classes,)
    shared = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(3))
    personal = 2 * n_features + n_classes + (1 if scalar_w_out else n_classes)
    return shared, personal


def iter_batches(n: int, batch_size: Optional[int], rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches covering ``range(n)``; ``batch_size`` None or <=0 means full batch."""
    order = rng.permutation(n)
    if not batch_size or batch_size <= 0:
        batch_size = n
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
