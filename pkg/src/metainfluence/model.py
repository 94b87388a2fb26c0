"""Small dense feed-forward classifier with exact derivative primitives.

All weights of a network live in one flat float64 vector. The packing order
is fixed so stored vectors are portable: for each layer in order, the weight
matrix W (out x in, row-major) followed by the bias b (out). Losses are mean
softmax cross-entropy over the batch, so every derivative here carries the
1/n prefactor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected classifier.

    ``layer_widths`` runs input dim -> hidden widths -> class count.
    ``activation`` applies to every hidden layer, or per hidden layer when a
    tuple is given. tanh is the default because its second derivatives are
    smooth, which exact curvature checks rely on.
    """

    layer_widths: tuple[int, ...]
    activation: str | tuple[str, ...] = "tanh"

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        if widths[-1] < 2:
            raise ValueError("output width (class count) must be >= 2")
        acts = self.activation
        if isinstance(acts, str):
            acts = (acts,) * (len(widths) - 2)
        else:
            acts = tuple(acts)
            if len(acts) != len(widths) - 2:
                raise ValueError(
                    f"need {len(widths) - 2} activations, got {len(acts)}"
                )
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", acts)

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def num_params(self) -> int:
        widths = self.layer_widths
        return sum((widths[i] + 1) * widths[i + 1] for i in range(len(widths) - 1))

    def layer_slices(self) -> list[tuple[slice, slice, int, int]]:
        """(weight slice, bias slice, out, in) per layer in packing order."""
        out = []
        offset = 0
        widths = self.layer_widths
        for i in range(self.num_layers):
            d_in, d_out = widths[i], widths[i + 1]
            w_sl = slice(offset, offset + d_out * d_in)
            offset += d_out * d_in
            b_sl = slice(offset, offset + d_out)
            offset += d_out
            out.append((w_sl, b_sl, d_out, d_in))
        return out

    def init_weights(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        """Scaled fan-in Gaussian weights, zero biases."""
        w = np.zeros(self.num_params)
        for w_sl, _, d_out, d_in in self.layer_slices():
            w[w_sl] = rng.normal(0.0, scale / np.sqrt(d_in), size=d_out * d_in)
        return w


@dataclass(frozen=True)
class Batch:
    """Inputs (n x d) with integer class labels (n)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError("labels must be 1-D and match the input count")
        if x.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if y.size and y.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return int(self.x.shape[0])


def unpack(spec: MlpSpec, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer of a flat weight vector."""
    w = np.asarray(w, dtype=float)
    if w.shape != (spec.num_params,):
        raise ValueError(f"expected weight vector of length {spec.num_params}, got {w.shape}")
    layers = []
    for w_sl, b_sl, d_out, d_in in spec.layer_slices():
        layers.append((w[w_sl].reshape(d_out, d_in), w[b_sl]))
    return layers


def _unpack_directions(spec: MlpSpec, v: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer views of direction matrix v (p x k): (out x in x k, out x k)."""
    k = v.shape[1]
    out = []
    for w_sl, b_sl, d_out, d_in in spec.layer_slices():
        out.append((v[w_sl].reshape(d_out, d_in, k), v[b_sl]))
    return out


def _act(kind: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation value and first derivative."""
    if kind == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    return np.maximum(z, 0.0), (z > 0.0).astype(float)


def _act_second(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return -2.0 * a * (1.0 - a * a)
    return np.zeros_like(z)


def _forward_cache(spec: MlpSpec, w: np.ndarray, x: np.ndarray):
    """Logits plus per-layer pre-activations, activations and derivatives."""
    layers = unpack(spec, w)
    acts: list[np.ndarray] = [np.asarray(x, dtype=float)]
    zs: list[np.ndarray] = []
    dacts: list[np.ndarray] = []
    a = acts[0]
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        zs.append(z)
        if i < spec.num_layers - 1:
            a, da = _act(spec.activation[i], z)
            acts.append(a)
            dacts.append(da)
        else:
            a = z
    return zs[-1], zs, acts, dacts, layers


def forward(spec: MlpSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Logits (n x c) for inputs (n x d)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs (n, {spec.input_dim}), got {x.shape}")
    logits, *_ = _forward_cache(spec, w, x)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy, log-sum-exp stabilized."""
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def _check_batch(spec: MlpSpec, batch: Batch) -> None:
    if batch.x.shape[1] != spec.input_dim:
        raise ValueError(f"batch input dim {batch.x.shape[1]} != spec {spec.input_dim}")
    if batch.y.size and int(batch.y.max()) >= spec.num_classes:
        raise ValueError(f"label {int(batch.y.max())} out of range for {spec.num_classes} classes")


def loss(spec: MlpSpec, w: np.ndarray, batch: Batch) -> float:
    _check_batch(spec, batch)
    logits, *_ = _forward_cache(spec, w, batch.x)
    return cross_entropy(logits, batch.y)


def loss_and_grad(spec: MlpSpec, w: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Loss and its gradient in one forward/backward pass."""
    _check_batch(spec, batch)
    logits, zs, acts, dacts, layers = _forward_cache(spec, w, batch.x)
    n = batch.n
    s = softmax(logits)
    delta = s.copy()
    delta[np.arange(n), batch.y] -= 1.0
    delta /= n

    g = np.empty(spec.num_params)
    slices = spec.layer_slices()
    for l in range(spec.num_layers - 1, -1, -1):
        w_sl, b_sl, d_out, d_in = slices[l]
        a_prev = acts[l]
        g[w_sl] = (delta.T @ a_prev).ravel()
        g[b_sl] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ layers[l][0]) * dacts[l - 1]
    return cross_entropy(logits, batch.y), g


def grad(spec: MlpSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the weight vector."""
    return loss_and_grad(spec, w, batch)[1]


def hvp(spec: MlpSpec, w: np.ndarray, batch: Batch, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product(s) of the mean cross-entropy.

    ``v`` may be a single direction (p,) or a stack of directions (p, k);
    the result has the same shape. Uses forward-over-reverse propagation, so
    no second-order tensor is ever materialized.
    """
    _check_batch(spec, batch)
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    if single:
        v = v[:, None]
    if v.shape[0] != spec.num_params:
        raise ValueError(f"direction length {v.shape[0]} != {spec.num_params}")

    logits, zs, acts, dacts, layers = _forward_cache(spec, w, batch.x)
    dirs = _unpack_directions(spec, v)
    n = batch.n
    n_layers = spec.num_layers

    # forward sweep of directional derivatives r_z, r_a
    r_acts: list[np.ndarray | None] = [None]  # inputs are constants
    r_zs: list[np.ndarray] = []
    a = acts[0]
    ra = None
    for l in range(n_layers):
        W, _ = layers[l]
        vw, vb = dirs[l]
        rz = np.einsum("ni,oik->nok", a, vw) + vb[None, :, :]
        if ra is not None:
            rz += np.einsum("nik,oi->nok", ra, W)
        r_zs.append(rz)
        if l < n_layers - 1:
            a = acts[l + 1]
            ra = dacts[l][:, :, None] * rz
            r_acts.append(ra)

    s = softmax(logits)
    delta = s.copy()
    delta[np.arange(n), batch.y] -= 1.0
    delta /= n
    rz_last = r_zs[-1]
    s3 = s[:, :, None]
    r_delta = (s3 * (rz_last - (s3 * rz_last).sum(axis=1, keepdims=True))) / n

    out = np.empty_like(v)
    slices = spec.layer_slices()
    for l in range(n_layers - 1, -1, -1):
        w_sl, b_sl, d_out, d_in = slices[l]
        a_prev = acts[l]
        ra_prev = r_acts[l]
        hw = np.einsum("nok,ni->oik", r_delta, a_prev)
        if ra_prev is not None:
            hw += np.einsum("no,nik->oik", delta, ra_prev)
        out[w_sl] = hw.reshape(d_out * d_in, -1)
        out[b_sl] = r_delta.sum(axis=0)
        if l > 0:
            W = layers[l][0]
            vw = dirs[l][0]
            u = delta @ W
            ru = np.einsum("nok,oi->nik", r_delta, W) + np.einsum("no,oik->nik", delta, vw)
            kind = spec.activation[l - 1]
            da = dacts[l - 1]
            dda = _act_second(kind, zs[l - 1], acts[l])
            r_delta = ru * da[:, :, None] + (u * dda)[:, :, None] * r_zs[l - 1]
            delta = u * da
    return out[:, 0] if single else out


def output_jacobian(spec: MlpSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    """Jacobian of every logit with respect to the weights, shape (n, c, p)."""
    _check_batch(spec, batch)
    _, zs, acts, dacts, layers = _forward_cache(spec, w, batch.x)
    n = batch.n
    c = spec.num_classes
    p = spec.num_params
    jac = np.empty((n, c, p))

    d = np.zeros((n, c, c))
    d[:, np.arange(c), np.arange(c)] = 1.0
    slices = spec.layer_slices()
    for l in range(spec.num_layers - 1, -1, -1):
        w_sl, b_sl, d_out, d_in = slices[l]
        a_prev = acts[l]
        jac[:, :, w_sl] = np.einsum("nko,ni->nkoi", d, a_prev).reshape(n, c, d_out * d_in)
        jac[:, :, b_sl] = d
        if l > 0:
            d = np.einsum("nko,oi->nki", d, layers[l][0]) * dacts[l - 1][:, None, :]
    return jac


def accuracy(spec: MlpSpec, w: np.ndarray, batch: Batch) -> float:
    logits = forward(spec, w, batch.x)
    return float(np.mean(logits.argmax(axis=1) == batch.y))
