"""Tiny dense-network engine on flat parameter vectors.

All trainable state lives in a single float64 vector so optimizer steps,
meta-updates and checkpoints stay trivial. The engine covers exactly what
the stacked detector needs: affine layers with ReLU / softmax / identity
activations, cross-entropy, exact reverse-mode gradients, and an exact
Hessian-vector product (forward-over-reverse) so a gradient can be pushed
through one inner SGD step without approximation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "softmax", "identity")

# probabilities are clamped here before any log, so a saturated softmax
# cannot turn the loss into -inf
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    """Shape and nonlinearity of one affine layer."""

    input_dim: int
    output_dim: int
    activation: str

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.input_dim * self.output_dim + self.output_dim


def validate_specs(specs: Sequence[LayerSpec]) -> tuple[LayerSpec, ...]:
    """Check dimension chaining and that softmax appears only on top."""
    specs = tuple(specs)
    if not specs:
        raise ValueError("need at least one layer")
    for prev, cur in zip(specs, specs[1:]):
        if prev.output_dim != cur.input_dim:
            raise ValueError(
                f"layer output width {prev.output_dim} does not match "
                f"next input width {cur.input_dim}"
            )
    for spec in specs[:-1]:
        if spec.activation == "softmax":
            raise ValueError("softmax is only allowed on the final layer")
    return specs


@dataclass
class MlpParams:
    """All weights and biases of one network as a flat vector.

    Layout is per layer: the weight matrix (input_dim x output_dim,
    row-major) followed by the bias vector.
    """

    specs: tuple[LayerSpec, ...]
    theta: np.ndarray

    def __post_init__(self) -> None:
        self.specs = validate_specs(self.specs)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        expected = sum(s.n_params for s in self.specs)
        if self.theta.shape != (expected,):
            raise ValueError(
                f"parameter vector has length {self.theta.size}, expected {expected}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("parameter vector contains non-finite entries")

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].output_dim

    def copy(self) -> "MlpParams":
        return MlpParams(self.specs, self.theta.copy())

    def with_theta(self, theta: np.ndarray) -> "MlpParams":
        return MlpParams(self.specs, np.asarray(theta, dtype=np.float64).copy())


def _layer_views(specs, theta):
    """(W, b) views into the flat vector, one pair per layer."""
    views = []
    off = 0
    for s in specs:
        n_w = s.input_dim * s.output_dim
        w = theta[off : off + n_w].reshape(s.input_dim, s.output_dim)
        off += n_w
        b = theta[off : off + s.output_dim]
        off += s.output_dim
        views.append((w, b))
    return views


def mlp_init(specs: Sequence[LayerSpec], seed) -> MlpParams:
    """Fan-in-scaled uniform weights, zero biases, reproducible per seed.

    Weights are U(-sqrt(1/fan_in), +sqrt(1/fan_in)); the scaling keeps the
    logits of these very small nets inside the sensitive range of softmax.
    `seed` may be an int or an existing numpy Generator.
    """
    specs = validate_specs(specs)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for s in specs:
        limit = np.sqrt(1.0 / s.input_dim)
        chunks.append(rng.uniform(-limit, limit, size=s.input_dim * s.output_dim))
        chunks.append(np.zeros(s.output_dim))
    return MlpParams(specs, np.concatenate(chunks))


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    return _softmax(z)


def _forward(specs, views, x):
    """Batch forward pass; returns (activations, pre-activations) caches.

    activations[0] is the input; activations[l+1] is layer l's output.
    """
    acts = [x]
    pre = []
    for spec, (w, b) in zip(specs, views):
        z = acts[-1] @ w + b
        pre.append(z)
        acts.append(_activate(spec.activation, z))
    return acts, pre


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != params.input_dim:
        raise ValueError(
            f"input has shape {x.shape}, expected ({params.input_dim},)"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite entries")
    views = _layer_views(params.specs, params.theta)
    acts, _ = _forward(params.specs, views, x[None, :])
    return acts[-1][0]


def cross_entropy_loss(probs, label: int) -> float:
    """-log(probs[label]) with the probability floored at PROB_FLOOR."""
    probs = np.asarray(probs, dtype=np.float64)
    label = int(label)
    if not 0 <= label < probs.size:
        raise ValueError(f"label {label} out of range for {probs.size} classes")
    return float(-np.log(max(probs[label], PROB_FLOOR)))


def _ce_value(p, labels, reduction):
    picked = np.maximum(p[np.arange(p.shape[0]), labels], PROB_FLOOR)
    total = -np.log(picked)
    return float(total.mean() if reduction == "mean" else total.sum())


def _act_mask(kind, z):
    # derivative of the activation; softmax never appears below the top
    if kind == "relu":
        return z > 0.0
    return None  # identity


def _backward_from_logits(specs, views, acts, pre, d_logits, need_input_grad=False):
    """Reverse pass from a gradient w.r.t. the final pre-activation.

    Returns (flat parameter gradient, gradient w.r.t. the input batch or
    None).
    """
    sizes = [s.n_params for s in specs]
    grad = np.empty(int(np.sum(sizes)))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    delta = d_logits
    d_input = None
    for l in range(len(specs) - 1, -1, -1):
        w, _ = views[l]
        n_w = specs[l].input_dim * specs[l].output_dim
        off = offsets[l]
        grad[off : off + n_w] = (acts[l].T @ delta).ravel()
        grad[off + n_w : offsets[l + 1]] = delta.sum(axis=0)
        if l > 0:
            da = delta @ w.T
            mask = _act_mask(specs[l - 1].activation, pre[l - 1])
            delta = da * mask if mask is not None else da
        elif need_input_grad:
            d_input = delta @ w.T
    return grad, d_input


def mlp_backward(params: MlpParams, x, label: int) -> np.ndarray:
    """Gradient of cross_entropy_loss(mlp_forward(params, x), label).

    The final layer must be softmax; the softmax+cross-entropy shortcut
    (p - onehot) is used for the top gradient.
    """
    if params.specs[-1].activation != "softmax":
        raise ValueError("mlp_backward requires a softmax output layer")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != params.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected ({params.input_dim},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite entries")
    label = int(label)
    if not 0 <= label < params.output_dim:
        raise ValueError(f"label {label} out of range")
    views = _layer_views(params.specs, params.theta)
    acts, pre = _forward(params.specs, views, x[None, :])
    dz = acts[-1].copy()
    dz[0, label] -= 1.0
    grad, _ = _backward_from_logits(params.specs, views, acts, pre, dz)
    return grad


def ce_loss_grad(params: MlpParams, x, labels, reduction="mean"):
    """Batched cross-entropy loss and flat gradient for one network."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    views = _layer_views(params.specs, params.theta)
    acts, pre = _forward(params.specs, views, x)
    p = acts[-1]
    n = x.shape[0]
    loss = _ce_value(p, labels, reduction)
    dz = p.copy()
    dz[np.arange(n), labels] -= 1.0
    if reduction == "mean":
        dz /= n
    grad, _ = _backward_from_logits(params.specs, views, acts, pre, dz)
    return loss, grad


def _jvp_forward(specs, views, vviews, acts, pre, r_input=None):
    """Tangent (directional-derivative) pass along a parameter direction.

    Propagates d(activation)/d(epsilon) for theta + epsilon*v, optionally
    with a tangent on the input batch. Returns the tangent activations.
    """
    r_acts = [np.zeros_like(acts[0]) if r_input is None else r_input]
    for l, (spec, (w, _), (rw, rb)) in enumerate(zip(specs, views, vviews)):
        rz = r_acts[-1] @ w + acts[l] @ rw + rb
        if spec.activation == "relu":
            ra = rz * (pre[l] > 0.0)
        elif spec.activation == "identity":
            ra = rz
        else:
            p = acts[l + 1]
            ra = p * (rz - (p * rz).sum(axis=1, keepdims=True))
        r_acts.append(ra)
    return r_acts


def _backward_with_rop(specs, views, vviews, acts, pre, r_acts, d_logits,
                       rd_logits, need_input_grad=False):
    """Reverse pass carrying both the adjoint and its tangent.

    Returns (grad, R{grad}, d_input, R{d_input}); the R-quantities are the
    directional derivatives along the parameter direction encoded in
    vviews/r_acts. ReLU's second derivative is zero a.e., so masks are
    treated as constant.
    """
    sizes = [s.n_params for s in specs]
    grad = np.empty(int(np.sum(sizes)))
    r_grad = np.empty_like(grad)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    delta, r_delta = d_logits, rd_logits
    d_input = r_d_input = None
    for l in range(len(specs) - 1, -1, -1):
        w, _ = views[l]
        rw, _ = vviews[l]
        n_w = specs[l].input_dim * specs[l].output_dim
        off = offsets[l]
        grad[off : off + n_w] = (acts[l].T @ delta).ravel()
        r_grad[off : off + n_w] = (r_acts[l].T @ delta + acts[l].T @ r_delta).ravel()
        grad[off + n_w : offsets[l + 1]] = delta.sum(axis=0)
        r_grad[off + n_w : offsets[l + 1]] = r_delta.sum(axis=0)
        if l > 0 or need_input_grad:
            da = delta @ w.T
            rda = r_delta @ w.T + delta @ rw.T
            if l > 0:
                mask = _act_mask(specs[l - 1].activation, pre[l - 1])
                if mask is not None:
                    da = da * mask
                    rda = rda * mask
                delta, r_delta = da, rda
            else:
                d_input, r_d_input = da, rda
    return grad, r_grad, d_input, r_d_input


def ce_hvp(params: MlpParams, x, labels, v, reduction="mean"):
    """Exact Hessian-vector product of the batched cross-entropy loss."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.theta.shape:
        raise ValueError("direction vector has wrong length")
    views = _layer_views(params.specs, params.theta)
    vviews = _layer_views(params.specs, v)
    acts, pre = _forward(params.specs, views, x)
    r_acts = _jvp_forward(params.specs, views, vviews, acts, pre)
    p = acts[-1]
    n = x.shape[0]
    scale = 1.0 / n if reduction == "mean" else 1.0
    dz = p.copy()
    dz[np.arange(n), labels] -= 1.0
    dz *= scale
    rdz = r_acts[-1] * scale
    _, r_grad, _, _ = _backward_with_rop(
        params.specs, views, vviews, acts, pre, r_acts, dz, rdz
    )
    return r_grad


def _check_batch(batch):
    x, labels = batch
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a non-empty (n, d) array with labels")
    if labels.shape != (x.shape[0],):
        raise ValueError("labels must be one integer per batch row")
    return x, labels


def grad_through_inner_step(params: MlpParams, inner_batch, outer_batch,
                            inner_step: float, first_order: bool = False):
    """Gradient of L_outer(theta - inner_step * grad L_inner(theta)).

    Batches are (inputs, labels) pairs. With `first_order` the dependence
    of the inner update on theta is ignored (the curvature term is
    dropped) and the result is the plain outer gradient at the adapted
    parameters; otherwise the exact Hessian-vector product is included.
    """
    xi, yi = _check_batch(inner_batch)
    xo, yo = _check_batch(outer_batch)
    _, g_inner = ce_loss_grad(params, xi, yi)
    adapted = params.with_theta(params.theta - inner_step * g_inner)
    _, g_outer = ce_loss_grad(adapted, xo, yo)
    if first_order or inner_step == 0.0:
        return g_outer
    return g_outer - inner_step * ce_hvp(params, xi, yi, g_outer)


@dataclass
class OptimizerState:
    """State for plain SGD or bias-corrected Adam on a flat vector."""

    kind: str
    step_size: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.step_size < 0:
            raise ValueError("step size must be >= 0")
        if self.t < 0:
            raise ValueError("step counter must be >= 0")


def init_optimizer(kind: str, step_size: float, n_params: int | None = None) -> OptimizerState:
    state = OptimizerState(kind=kind, step_size=step_size)
    if kind == "adam":
        if n_params is None:
            raise ValueError("adam needs the parameter count up front")
        state.m = np.zeros(n_params)
        state.v = np.zeros(n_params)
    return state


def opt_step_vec(theta: np.ndarray, grad: np.ndarray, state: OptimizerState):
    """One optimizer step on a flat vector; returns (theta', state')."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError("gradient length does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient contains non-finite entries")
    if state.kind == "sgd":
        return theta - state.step_size * grad, state
    if state.m is None or state.m.shape != theta.shape:
        raise ValueError("adam moment vectors do not match the parameters")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta2 = theta - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(
        kind="adam", step_size=state.step_size, beta1=state.beta1,
        beta2=state.beta2, eps=state.eps, m=m, v=v, t=t,
    )
    return theta2, new_state


def opt_step(params: MlpParams, grad: np.ndarray, state: OptimizerState):
    """One optimizer step on a parameter set; returns (params', state')."""
    theta2, state2 = opt_step_vec(params.theta, grad, state)
    return params.with_theta(theta2), state2
