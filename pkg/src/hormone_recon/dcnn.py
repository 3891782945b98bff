"""
Non-causal dilated convolutional network g(z, w) with manual backprop.

Layout: width-1 input projection (H -> W channels), ``L`` residual units
``h <- ReLU(h + conv_d(h) + c)`` with centered dilated filters, and a
width-1 linear output projection (W -> H).  Sequences are zero padded, which
in standardized units pads with the hormone mean.
"""

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from .hormones import N_HORMONES

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DcnnConfig:
    layers: int = 4
    dilation: int = 2
    filter_size: int = 5
    width: int = 8
    learning_rate: float = 2e-3
    max_iterations: int = 4000
    batch_size: int = 16
    seed: int = 0
    schedule: str = "constant"  # or "exponential": layer l uses dilation**l
    optimizer: str = "sgd"  # or "adam"
    eval_every: int = 50
    patience: int = 20
    val_streams: int = 20
    channels: int = N_HORMONES
    validate: bool = True

    def __post_init__(self):
        if self.schedule not in ("constant", "exponential"):
            raise ValueError(f"unknown dilation schedule {self.schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.validate:
            for name, (lo, hi) in {
                "layers": (3, 6),
                "dilation": (1, 3),
                "filter_size": (2, 9),
                "width": (5, 12),
            }.items():
                value = getattr(self, name)
                if not lo <= value <= hi:
                    raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        elif min(self.layers, self.dilation, self.filter_size, self.width) < 1:
            raise ValueError("layers, dilation, filter_size and width must be >= 1")

    def to_dict(self):
        return asdict(self)


def layer_dilations(config):
    if config.schedule == "exponential":
        return [config.dilation**l for l in range(1, config.layers + 1)]
    return [config.dilation] * config.layers


def tap_offsets(K, d):
    """Time offsets of the ``K`` taps; even ``K`` gets the extra tap backward."""
    return d * (np.arange(K) - K // 2)


def receptive_field(config):
    """One-sided reach ``(backward, forward)`` of the whole network, in days."""
    K = config.filter_size
    back = sum(d * (K // 2) for d in layer_dilations(config))
    fwd = sum(d * (K - 1 - K // 2) for d in layer_dilations(config))
    return back, fwd


# ---------------------------------------------------------------------------
# Dilated convolution
# ---------------------------------------------------------------------------


def _pad(x, d, K):
    left, right = d * (K // 2), d * (K - 1 - K // 2)
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(left, right)])


def _columns(x, d, K):
    """Shifted copies of ``x`` (B, C, T) stacked as (B, K*C, T), tap-major."""
    T = x.shape[-1]
    xp = _pad(x, d, K)
    return np.concatenate([xp[..., k * d : k * d + T] for k in range(K)], axis=-2)


def dilated_conv_noncausal(x, filters, d):
    """``out[o, t] = sum_{c,k} filters[o, c, k] * x[c, t + d*(k - K//2)]``.

    Parameters
    ----------
    x : ndarray, (C, T) or (B, C, T)
    filters : ndarray, (C_out, C, K)
    d : int
        Dilation.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    C_out, C, K = filters.shape
    cols = _columns(x, d, K)
    out = np.matmul(filters.transpose(0, 2, 1).reshape(C_out, K * C), cols)
    return out[0] if squeeze else out


def _conv_backward(g, x, filters, d, cols=None):
    """Gradients of a dilated conv w.r.t. its filters and input."""
    C_out, C, K = filters.shape
    T = x.shape[-1]
    if cols is None:
        cols = _columns(x, d, K)
    dW = np.einsum("bot,bjt->oj", g, cols).reshape(C_out, K, C).transpose(0, 2, 1)
    dcols = np.matmul(filters.transpose(0, 2, 1).reshape(C_out, K * C).T, g)
    dxp = np.zeros(x.shape[:-1] + (T + d * (K - 1),))
    for k in range(K):
        dxp[..., k * d : k * d + T] += dcols[:, k * C : (k + 1) * C]
    left = d * (K // 2)
    return dW, dxp[..., left : left + T]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class DcnnModel:
    """Weights of the network; ``params`` keys follow :func:`param_names`."""

    config: DcnnConfig
    params: dict

    def copy(self):
        return DcnnModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def flat(self):
        return np.concatenate([self.params[k].ravel() for k in param_names(self.config)])


def param_names(config):
    """Documented layer order used for checkpoints and flat weight vectors."""
    names = ["w_in", "b_in"]
    for l in range(config.layers):
        names += [f"filter{l}", f"bias{l}"]
    return names + ["w_out", "b_out"]


def init_model(config, rng=None):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    H, W, K = config.channels, config.width, config.filter_size
    params = {
        "w_in": rng.standard_normal((W, H)) / np.sqrt(H),
        "b_in": np.zeros(W),
    }
    for l in range(config.layers):
        params[f"filter{l}"] = 0.5 * rng.standard_normal((W, W, K)) / np.sqrt(W * K)
        params[f"bias{l}"] = np.zeros(W)
    params["w_out"] = rng.standard_normal((H, W)) / np.sqrt(W)
    params["b_out"] = np.zeros(H)
    return DcnnModel(config, params)


def _forward(model, z):
    p = model.params
    h = np.matmul(p["w_in"], z) + p["b_in"][:, None]
    cache = {"z": z, "h0": h, "units": []}
    for l, d in enumerate(layer_dilations(model.config)):
        F = p[f"filter{l}"]
        cols = _columns(h, d, F.shape[2])
        pre = h + np.matmul(F.transpose(0, 2, 1).reshape(F.shape[0], -1), cols) + p[f"bias{l}"][:, None]
        out = np.maximum(pre, 0.0)
        cache["units"].append((h, cols, pre > 0))
        h = out
    y = np.matmul(p["w_out"], h) + p["b_out"][:, None]
    cache["h_last"] = h
    return y, cache


def forward(model, z):
    """Reconstruction for one stream (H, T) or a batch (B, H, T)."""
    z = np.asarray(z, dtype=float)
    squeeze = z.ndim == 2
    y, _ = _forward(model, z[None] if squeeze else z)
    return y[0] if squeeze else y


def _mask_array(mask, T):
    if mask is None:
        return np.ones(T, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    lo, hi = mask
    m = np.zeros(T, dtype=bool)
    m[lo - 1 : hi] = True
    return m


def mse_loss(pred, target, mask=None):
    """Mean squared error over the masked days (1-based ``(lo, hi)`` or boolean)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    m = _mask_array(mask, pred.shape[-1])
    if not m.any():
        raise ValueError("empty mask")
    diff = (pred - target)[..., m]
    return float(np.mean(diff * diff))


def gradients(model, z, target, mask=None):
    """Exact gradient of :func:`mse_loss` w.r.t. every parameter.

    ``z`` and ``target`` are (H, T) or batched (B, H, T); the loss is the
    mean over the batch, hormones and masked days.
    """
    z = np.asarray(z, dtype=float)
    target = np.asarray(target, dtype=float)
    if z.ndim == 2:
        z, target = z[None], target[None]
    m = _mask_array(mask, z.shape[-1])
    y, cache = _forward(model, z)
    diff = (y - target) * m
    count = y.shape[0] * y.shape[1] * m.sum()
    loss = float(np.sum(diff * diff) / count)
    g = 2.0 * diff / count

    p = model.params
    grads = {}
    grads["w_out"] = np.einsum("bht,bwt->hw", g, cache["h_last"])
    grads["b_out"] = g.sum(axis=(0, 2))
    gh = np.matmul(p["w_out"].T, g)
    dilations = layer_dilations(model.config)
    for l in reversed(range(model.config.layers)):
        h_in, cols, active = cache["units"][l]
        gpre = gh * active
        grads[f"bias{l}"] = gpre.sum(axis=(0, 2))
        dF, dh = _conv_backward(gpre, h_in, p[f"filter{l}"], dilations[l], cols)
        grads[f"filter{l}"] = dF
        gh = gpre + dh
    grads["w_in"] = np.einsum("bwt,bht->wh", gh, cache["z"])
    grads["b_in"] = gh.sum(axis=(0, 2))
    return grads, loss


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DcnnModel
    history: list  # (iteration, train_mse, val_mse)
    best_iteration: int
    best_val: float
    checkpoints: list  # (iteration, val_mse) at each new best


def predict(model, streams, chunk=256):
    """Average of ``g`` over a stack of streams (S, H, T)."""
    streams = np.asarray(streams, dtype=float)
    total = np.zeros(streams.shape[1:])
    for i in range(0, streams.shape[0], chunk):
        total += forward(model, streams[i : i + chunk]).sum(axis=0)
    return total / streams.shape[0]


def _val_loss(model, val_set, n_streams, mask):
    losses = [mse_loss(predict(model, z[:n_streams]), y, mask) for z, y in val_set]
    return float(np.mean(losses))


def train(model, dataset, config=None, val_set=None, mask=None):
    """Mini-batch gradient descent on ``sum_i sum_s [g(z_i^s) - y_i]^2``.

    Parameters
    ----------
    model : DcnnModel
        Initial weights (not modified).
    dataset : list of (streams (S, H, T), target (H, T))
    config : DcnnConfig, optional
        Defaults to ``model.config``.
    val_set : list of (streams, target), optional
        Enables early stopping with ``config.patience`` evaluations.
    mask : day range or boolean mask for the loss

    Returns
    -------
    TrainResult
        The best-validation model (or the last one without ``val_set``).
    """
    config = model.config if config is None else config
    if not dataset:
        raise ValueError("empty training set")
    streams = np.concatenate([np.asarray(z, dtype=float) for z, _ in dataset])
    targets = np.stack([np.asarray(y, dtype=float) for _, y in dataset])
    owner = np.concatenate([np.full(len(z), i) for i, (z, _) in enumerate(dataset)])
    n_pairs = streams.shape[0]
    rng = np.random.default_rng(config.seed)

    model = model.copy()
    best = model.copy()
    best_val, best_iter = np.inf, 0
    history, checkpoints = [], []
    adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}
    order = rng.permutation(n_pairs)
    pos = 0
    running, running_n = 0.0, 0
    stale = 0
    for it in range(1, config.max_iterations + 1):
        if pos + config.batch_size > n_pairs:
            order = rng.permutation(n_pairs)
            pos = 0
        idx = order[pos : pos + config.batch_size]
        pos += config.batch_size
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            grads, loss = gradients(model, streams[idx], targets[owner[idx]], mask)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {it}; learning rate {config.learning_rate} too high?")
        running += loss
        running_n += 1
        lr = config.learning_rate
        for k, g in grads.items():
            if config.optimizer == "adam":
                adam_m[k] = 0.9 * adam_m[k] + 0.1 * g
                adam_v[k] = 0.999 * adam_v[k] + 0.001 * g * g
                mhat = adam_m[k] / (1 - 0.9**it)
                vhat = adam_v[k] / (1 - 0.999**it)
                model.params[k] -= lr * mhat / (np.sqrt(vhat) + 1e-8)
            else:
                model.params[k] -= lr * g

        if it % config.eval_every == 0 or it == config.max_iterations:
            train_mse = running / running_n
            running, running_n = 0.0, 0
            val = _val_loss(model, val_set, config.val_streams, mask) if val_set else np.nan
            history.append((it, train_mse, val))
            if not np.isfinite(train_mse) or (val_set and not np.isfinite(val)):
                raise TrainingError(f"non-finite loss at iteration {it}")
            if val_set:
                if val < best_val:
                    best_val, best_iter, best = val, it, model.copy()
                    checkpoints.append((it, val))
                    stale = 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        log.info("early stop at iteration %d (best %d)", it, best_iter)
                        break
    if not val_set:
        best, best_iter = model, it
    return TrainResult(
        model=best, history=history, best_iteration=best_iter, best_val=float(best_val), checkpoints=checkpoints
    )


def with_config(model, **changes):
    """Same weights under a modified config (shape-preserving changes only)."""
    return DcnnModel(replace(model.config, **changes), {k: v.copy() for k, v in model.params.items()})
