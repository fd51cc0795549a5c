"""Stacked soft-decision detector.

One dense block per device: block 1 maps the received sample [Re y, Im y]
to a probability vector over the constellation for the strongest device,
and every later block additionally sees the soft outputs of the blocks
before it. Probabilities, not hard symbols, are fed forward, and training
minimises the combined cross-entropy over all devices end to end (the
gradient of a later block flows back into earlier blocks through the soft
inputs).

The stock two-device configuration is 2-24-12-2 and 4-32-16-2 with ReLU
hidden layers and softmax outputs, 1120 trainable parameters in total.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics
from .numerics import LayerSpec, MlpParams, init_optimizer, mlp_init, opt_step_vec
from .phy import Constellation, PilotSet, bpsk, draw_transmissions, snr_db_to_sigma2

DEFAULT_HIDDEN = ((24, 12), (32, 16))

_ACT_CODES = {"relu": 0, "softmax": 1, "identity": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}

CHECKPOINT_MAGIC = b"SICN"
CHECKPOINT_VERSION = 1


@dataclass
class SicNetModel:
    """Block parameter sets plus the constellation order they classify."""

    blocks: tuple[MlpParams, ...]
    order: int

    def __post_init__(self) -> None:
        self.blocks = tuple(self.blocks)
        if not self.blocks:
            raise ValueError("need at least one block")
        if self.order < 2:
            raise ValueError("constellation order must be >= 2")
        for l, block in enumerate(self.blocks):
            want_in = 2 + l * self.order
            if block.input_dim != want_in:
                raise ValueError(
                    f"block {l + 1} input width is {block.input_dim}, "
                    f"expected {want_in}"
                )
            if block.output_dim != self.order:
                raise ValueError(f"block {l + 1} must emit {self.order} classes")
            if block.specs[-1].activation != "softmax":
                raise ValueError("every block must end in softmax")

    @property
    def n_devices(self) -> int:
        return len(self.blocks)

    @property
    def n_params(self) -> int:
        return sum(b.n_params for b in self.blocks)

    @property
    def theta(self) -> np.ndarray:
        """The full stacked parameter vector (a copy)."""
        return np.concatenate([b.theta for b in self.blocks])

    def with_theta(self, theta: np.ndarray) -> "SicNetModel":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError("stacked parameter vector has wrong length")
        blocks = []
        off = 0
        for b in self.blocks:
            blocks.append(MlpParams(b.specs, theta[off : off + b.n_params].copy()))
            off += b.n_params
        return SicNetModel(tuple(blocks), self.order)

    def copy(self) -> "SicNetModel":
        return SicNetModel(tuple(b.copy() for b in self.blocks), self.order)


@dataclass
class SoftDecisions:
    """Per-device probability vectors over the constellation."""

    probs: tuple[np.ndarray, ...]


def _block_specs(input_dim: int, hidden, order: int):
    widths = [input_dim, *hidden, order]
    specs = []
    for i in range(len(widths) - 1):
        act = "softmax" if i == len(widths) - 2 else "relu"
        specs.append(LayerSpec(widths[i], widths[i + 1], act))
    return specs


def build_model(hidden=DEFAULT_HIDDEN, order: int = 2, seed=0) -> SicNetModel:
    """Fresh model with the given hidden widths per block, seeded init."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    blocks = []
    for l, h in enumerate(hidden):
        specs = _block_specs(2 + l * order, h, order)
        blocks.append(mlp_init(specs, rng))
    return SicNetModel(tuple(blocks), order)


def build_default(seed) -> SicNetModel:
    """The stock two-device model (2-24-12-2 and 4-32-16-2)."""
    return build_model(DEFAULT_HIDDEN, 2, seed)


def count_params(model: SicNetModel) -> int:
    return model.n_params


def _rx_matrix(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.complex128)
    return np.column_stack([y.real, y.imag])


def _forward_caches(model: SicNetModel, rx: np.ndarray):
    """Forward through every block, keeping caches for the reverse pass."""
    probs, caches = [], []
    inp = rx
    for block in model.blocks:
        views = numerics._layer_views(block.specs, block.theta)
        acts, pre = numerics._forward(block.specs, views, inp)
        caches.append((inp, views, acts, pre))
        probs.append(acts[-1])
        inp = np.hstack([inp, acts[-1]])
    return probs, caches


def forward_batch(model: SicNetModel, rx: np.ndarray) -> list[np.ndarray]:
    """Soft decisions for a batch of (n, 2) received features."""
    probs, _ = _forward_caches(model, np.asarray(rx, dtype=np.float64))
    return probs


def sicnet_forward(model: SicNetModel, y) -> SoftDecisions:
    """Soft decisions for one received sample."""
    probs = forward_batch(model, _rx_matrix(np.array([y])))
    return SoftDecisions(tuple(p[0] for p in probs))


def detect_batch(model: SicNetModel, rx: np.ndarray) -> np.ndarray:
    """Hard per-device decisions (argmax, ties to the lowest index)."""
    probs = forward_batch(model, rx)
    return np.column_stack([p.argmax(axis=1) for p in probs])


def sicnet_detect(model: SicNetModel, y) -> tuple[int, ...]:
    return tuple(int(i) for i in detect_batch(model, _rx_matrix(np.array([y])))[0])


def _check_training_batch(model, rx, labels):
    rx = np.asarray(rx, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if rx.ndim != 2 or rx.shape[1] != 2 or rx.shape[0] == 0:
        raise ValueError("received features must be a non-empty (n, 2) array")
    if labels.shape != (rx.shape[0], model.n_devices):
        raise ValueError("labels must be (n, L) symbol indices")
    if np.any(labels < 0) or np.any(labels >= model.order):
        raise ValueError("symbol index out of range")
    return rx, labels


def combined_loss(model: SicNetModel, rx, labels, reduction="mean") -> float:
    """Sum over devices of the (mean) cross-entropy of each block."""
    rx, labels = _check_training_batch(model, rx, labels)
    probs = forward_batch(model, rx)
    return float(sum(numerics._ce_value(p, labels[:, l], reduction)
                     for l, p in enumerate(probs)))


def combined_loss_grad(model: SicNetModel, rx, labels, reduction="mean"):
    """Combined loss and its gradient w.r.t. the full stacked vector.

    The reverse pass walks the blocks from last to first; the gradient a
    block receives through its soft output (from later blocks' inputs) is
    pulled through the softmax Jacobian and added to its own
    cross-entropy term.
    """
    rx, labels = _check_training_batch(model, rx, labels)
    n = rx.shape[0]
    scale = 1.0 / n if reduction == "mean" else 1.0
    probs, caches = _forward_caches(model, rx)
    loss = float(sum(numerics._ce_value(p, labels[:, l], reduction)
                     for l, p in enumerate(probs)))
    rows = np.arange(n)
    d_probs = [np.zeros_like(p) for p in probs]
    grads: list[np.ndarray] = [None] * model.n_devices  # type: ignore[list-item]
    for l in range(model.n_devices - 1, -1, -1):
        block = model.blocks[l]
        inp, views, acts, pre = caches[l]
        p = probs[l]
        dz = p.copy()
        dz[rows, labels[:, l]] -= 1.0
        dz *= scale
        g = d_probs[l]
        if l < model.n_devices - 1:
            # gradient arriving through later blocks' inputs
            dz += p * (g - (g * p).sum(axis=1, keepdims=True))
        grad_l, d_in = numerics._backward_from_logits(
            block.specs, views, acts, pre, dz, need_input_grad=(l > 0)
        )
        grads[l] = grad_l
        if l > 0:
            for j in range(l):
                d_probs[j] += d_in[:, 2 + j * model.order : 2 + (j + 1) * model.order]
    return loss, np.concatenate(grads)


def combined_loss_hvp(model: SicNetModel, rx, labels, v, reduction="mean"):
    """Exact Hessian-vector product of the combined loss.

    Same structure as combined_loss_grad but every adjoint carries its
    directional derivative along v (forward-over-reverse).
    """
    rx, labels = _check_training_batch(model, rx, labels)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.n_params,):
        raise ValueError("direction vector has wrong length")
    n = rx.shape[0]
    scale = 1.0 / n if reduction == "mean" else 1.0
    probs, caches = _forward_caches(model, rx)
    rows = np.arange(n)

    v_blocks, v_views = [], []
    off = 0
    for b in model.blocks:
        vb = v[off : off + b.n_params]
        off += b.n_params
        v_blocks.append(vb)
        v_views.append(numerics._layer_views(b.specs, vb))

    # tangent forward pass; the tangent of a later block's input is the
    # tangent of the earlier blocks' outputs
    r_probs, r_acts_all = [], []
    r_inp = np.zeros_like(rx)
    for l, block in enumerate(model.blocks):
        inp, views, acts, pre = caches[l]
        r_acts = numerics._jvp_forward(block.specs, views, v_views[l], acts, pre,
                                       r_input=r_inp)
        r_acts_all.append(r_acts)
        r_probs.append(r_acts[-1])
        r_inp = np.hstack([r_inp, r_acts[-1]])

    d_probs = [np.zeros_like(p) for p in probs]
    rd_probs = [np.zeros_like(p) for p in probs]
    r_grads: list[np.ndarray] = [None] * model.n_devices  # type: ignore[list-item]
    for l in range(model.n_devices - 1, -1, -1):
        block = model.blocks[l]
        inp, views, acts, pre = caches[l]
        p, rp = probs[l], r_probs[l]
        dz = p.copy()
        dz[rows, labels[:, l]] -= 1.0
        dz *= scale
        rdz = rp * scale
        if l < model.n_devices - 1:
            g, rg = d_probs[l], rd_probs[l]
            gp = (g * p).sum(axis=1, keepdims=True)
            dz += p * (g - gp)
            rdz += rp * (g - gp) + p * (
                rg
                - (rg * p).sum(axis=1, keepdims=True)
                - (g * rp).sum(axis=1, keepdims=True)
            )
        _, r_grad_l, d_in, rd_in = numerics._backward_with_rop(
            block.specs, views, v_views[l], acts, pre, r_acts_all[l], dz, rdz,
            need_input_grad=(l > 0),
        )
        r_grads[l] = r_grad_l
        if l > 0:
            for j in range(l):
                cols = slice(2 + j * model.order, 2 + (j + 1) * model.order)
                d_probs[j] += d_in[:, cols]
                rd_probs[j] += rd_in[:, cols]
    return np.concatenate(r_grads)


def sicnet_train(model: SicNetModel, pilots: PilotSet, epochs: int,
                 optimizer: str = "adam", step_size: float = 0.01,
                 reduction: str = "mean"):
    """Full-batch training on a pilot set.

    Returns (trained model, per-epoch loss trace); the trace records the
    loss before each step, so trace[0] is the loss at the initial
    parameters. Zero epochs returns an unchanged copy.
    """
    if pilots.size == 0:
        raise ValueError("pilot set is empty")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    rx = pilots.rx_features()
    labels = pilots.symbols
    theta = model.theta
    state = init_optimizer(optimizer, step_size, theta.size)
    trace = np.empty(epochs)
    work = model
    for e in range(epochs):
        loss, grad = combined_loss_grad(work, rx, labels, reduction)
        trace[e] = loss
        theta, state = opt_step_vec(theta, grad, state)
        work = model.with_theta(theta)
    return work, trace


def evaluate_decisions(model: SicNetModel, y, chunk: int = 100_000) -> np.ndarray:
    """Hard decisions for a (possibly large) array of received samples."""
    y = np.asarray(y, dtype=np.complex128)
    out = np.empty((y.size, model.n_devices), dtype=np.intp)
    for start in range(0, y.size, chunk):
        sl = slice(start, min(start + chunk, y.size))
        out[sl] = detect_batch(model, _rx_matrix(y[sl]))
    return out


def sicnet_ser(model: SicNetModel, h, snr_db: float, n_symbols: int, seed: int,
               constellation: Constellation | None = None, powers=(4.0, 1.0),
               chunk: int = 100_000) -> np.ndarray:
    """Monte-Carlo symbol error rate per device on fresh transmissions."""
    if n_symbols < 1:
        raise ValueError("need at least one symbol")
    constellation = constellation or bpsk()
    powers = np.asarray(powers, dtype=np.float64)
    sigma2 = snr_db_to_sigma2(snr_db, float(powers.sum()))
    rng = np.random.default_rng(seed)
    errors = np.zeros(model.n_devices)
    done = 0
    while done < n_symbols:
        n = min(chunk, n_symbols - done)
        idx, y = draw_transmissions(n, constellation, powers, h, sigma2, rng)
        dec = detect_batch(model, _rx_matrix(y))
        errors += (dec != idx).sum(axis=0)
        done += n
    return errors / n_symbols


# --- checkpoints ------------------------------------------------------------
# Binary layout (little-endian throughout):
#   magic "SICN" | u32 version | u32 order | u32 n_blocks
#   per block: u32 n_layers, then per layer u32 in, u32 out, u8 activation
#   u32 n_extra
#   f64[n_params] stacked parameter vector
#   per extra array: u16 name length | name utf-8 | u64 count | f64[count]
# A JSON sidecar at <path>.json carries free-form metadata.


def save_checkpoint(path, model: SicNetModel, extra_arrays=None, metadata=None) -> None:
    """Write the model (and optional named float vectors) plus a sidecar."""
    extra_arrays = dict(extra_arrays or {})
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<III", CHECKPOINT_VERSION, model.order, len(model.blocks))]
    for block in model.blocks:
        parts.append(struct.pack("<I", len(block.specs)))
        for s in block.specs:
            parts.append(struct.pack("<IIB", s.input_dim, s.output_dim,
                                     _ACT_CODES[s.activation]))
    parts.append(struct.pack("<I", len(extra_arrays)))
    parts.append(model.theta.astype("<f8").tobytes())
    for name, arr in extra_arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    sidecar = {
        "format": "sicnet-checkpoint",
        "version": CHECKPOINT_VERSION,
        "order": model.order,
        "n_devices": model.n_devices,
        "n_params": model.n_params,
        "layer_widths": [[s.input_dim for s in b.specs] + [b.specs[-1].output_dim]
                         for b in model.blocks],
        "extra_arrays": sorted(extra_arrays),
    }
    sidecar.update(metadata or {})
    with open(f"{path}.json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (model, extra arrays, sidecar metadata)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    version, order, n_blocks = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    all_specs = []
    for _ in range(n_blocks):
        (n_layers,) = struct.unpack_from("<I", raw, off)
        off += 4
        specs = []
        for _ in range(n_layers):
            din, dout, act = struct.unpack_from("<IIB", raw, off)
            off += 9
            specs.append(LayerSpec(din, dout, _ACT_NAMES[act]))
        all_specs.append(tuple(specs))
    (n_extra,) = struct.unpack_from("<I", raw, off)
    off += 4
    blocks = []
    for specs in all_specs:
        count = sum(s.n_params for s in specs)
        theta = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        blocks.append(MlpParams(specs, theta))
    extras = {}
    for _ in range(n_extra):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (count,) = struct.unpack_from("<Q", raw, off)
        off += 8
        extras[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
    try:
        with open(f"{path}.json") as f:
            metadata = json.load(f)
    except FileNotFoundError:
        metadata = {}
    return SicNetModel(tuple(blocks), order), extras, metadata
