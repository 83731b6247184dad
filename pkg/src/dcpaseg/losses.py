"""Class-weighted cross-entropy, soft F-beta (dice) loss and the Adam update.

In the stochastic variants a penalty is drawn once per mini-batch from the
grid ``{1, 1 + s, 1 + 2s, ...}`` capped at ``alpha``. For cross-entropy it
weights the disc-class term; for the F-beta loss it is beta itself.
Losses consume softmax probabilities shaped ``(2, H, W)`` or
``(N, 2, H, W)``; channel 1 is the disc class.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import Tensor, as_tensor

LOSS_KINDS = ("cross_entropy", "dice")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "dice"
    stochastic: bool = True
    alpha: float = 5.0
    step: float = 0.5
    eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.alpha >= 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if not self.step > 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")

    def grid(self):
        """Penalty values the stochastic draw can return."""
        # tolerance absorbs float noise so that e.g. alpha=2, s=0.1 keeps 2.0
        count = int(np.floor((self.alpha - 1.0) / self.step + 1e-9)) + 1
        return [1.0 + k * self.step for k in range(count)]


def draw_penalty(cfg, rng):
    """Uniform draw from the penalty grid; exactly 1.0 when not stochastic."""
    if not cfg.stochastic:
        return 1.0
    values = cfg.grid()
    return values[int(rng.integers(len(values)))]


def _split(probs, target):
    p = as_tensor(probs)
    if p.ndim not in (3, 4) or p.shape[-3] != 2:
        raise ShapeError(f"expected probabilities shaped (2, H, W) or (N, 2, H, W), got {p.shape}")
    t = np.asarray(target)
    expected = p.shape[:-3] + p.shape[-2:]
    if t.shape != expected:
        raise ShapeError(f"target shape {t.shape} does not match probabilities {p.shape}")
    return p, (t != 0).astype(np.float64)


def weighted_cross_entropy(probs, target, weight=1.0, eps=1e-6):
    """Mean over pixels of -[w t log(q1 + eps) + (1 - t) log(q0 + eps)]."""
    p, t = _split(probs, target)
    q0 = p.data[..., 0, :, :].astype(np.float64)
    q1 = p.data[..., 1, :, :].astype(np.float64)
    n = t.size
    terms = weight * t * np.log(q1 + eps) + (1.0 - t) * np.log(q0 + eps)
    value = -terms.sum() / n

    def backward(g):
        g = float(g)
        grad = np.empty(p.shape, dtype=np.float64)
        grad[..., 1, :, :] = -g * weight * t / (q1 + eps) / n
        grad[..., 0, :, :] = -g * (1.0 - t) / (q0 + eps) / n
        return (grad.astype(p.dtype),)

    return Tensor(np.asarray(value, dtype=p.dtype), _parents=(p,), _backward=backward, op="wce")


def fbeta(precision, recall, beta):
    """(1 + b^2) P R / (b^2 P + R), taken as 0 when both are 0."""
    b2 = beta * beta
    denom = b2 * precision + recall
    return 0.0 if denom == 0 else (1.0 + b2) * precision * recall / denom


def soft_fbeta_loss(probs, target, beta=1.0, eps=1e-6):
    """1 - F_beta of the soft precision and recall, pooled over all pixels.

    With I = sum(q1 t), S = sum(q1), G = sum(t), precision I / (S + eps) and
    recall I / (G + eps), the score simplifies to
    (1 + b^2) I / (b^2 (G + eps) + S + eps), which stays smooth at I = 0.
    """
    p, t = _split(probs, target)
    q1 = p.data[..., 1, :, :].astype(np.float64)
    b2 = float(beta) ** 2
    inter, mass, truth = float((q1 * t).sum()), float(q1.sum()), float(t.sum())
    denom = b2 * (truth + eps) + mass + eps
    if denom == 0:
        raise ShapeError("soft F-beta is undefined for an empty target with eps = 0")
    score = (1.0 + b2) * inter / denom

    def backward(g):
        g = float(g)
        grad = np.zeros(p.shape, dtype=np.float64)
        grad[..., 1, :, :] = -g * (1.0 + b2) * (t * denom - inter) / (denom * denom)
        return (grad.astype(p.dtype),)

    return Tensor(np.asarray(1.0 - score, dtype=p.dtype), _parents=(p,), _backward=backward, op="fbeta")


def loss_value(cfg, probs, target, penalty):
    """Build the configured loss node for one batch with an already drawn penalty."""
    if cfg.kind == "dice":
        return soft_fbeta_loss(probs, target, beta=penalty, eps=cfg.eps)
    return weighted_cross_entropy(probs, target, weight=penalty, eps=cfg.eps)


# -- optimizer ----------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam update of ``params`` (name -> Tensor) in place.

    Every gradient is checked before any parameter changes, so a NaN or
    infinite entry leaves the model and the optimizer state untouched.
    """
    for name in params:
        g = grads.get(name)
        if g is None:
            raise KeyError(f"no gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
    return params, state
