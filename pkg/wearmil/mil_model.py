"""
Attention-based multi-instance regression over instance embeddings.

Graph, per bag of N instances with embeddings e (N x 192) and modality ids m:

    e~ = LN_affine(e) + v[m]
    h  = ELU(Dropout(ELU(e~ W1 + b1)) W2 + b2)        projector 192 -> 256 -> 256
    l  = tanh(h A1 + a1) a2 + a2_bias                 attention 256 -> 128 -> 1
    alpha = softmax(l) over the bag's own instances
    z  = sum_i alpha_i h_i
    y^ = Dropout(ELU(z H1 + c1)) h2 + h2_bias         head 256 -> 128 -> 1

Gradients are computed by hand in reverse order over this fixed graph.
"""
import json
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import FormatError, StaleTraceError, TrainingDiverged
from .utils.seed_utils import rng_for

# --- Defaults ---
DEFAULT_EMBED_DIM = 192
DEFAULT_N_MODALITIES = 3
LN_EPS = 1e-5
LOSSES = ("mse", "huber")
HUBER_DELTA = 1.0


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    weight_decay: float = 1e-4
    max_epochs: int = 150
    patience: int = 15
    warmup_epochs: int = 10
    batch_bags: int = 8
    dropout: float = 0.15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "mse"
    standardize_targets: bool = True
    val_fraction: float = 0.2
    projector_hidden: int = 256
    projector_out: int = 256
    attention_hidden: int = 128
    head_hidden: int = 128

    def validate(self):
        for name in ("lr0", "max_epochs", "patience", "batch_bags", "projector_hidden",
                     "projector_out", "attention_hidden", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("weight_decay and warmup_epochs must be non-negative")
        if self.patience >= self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be < max_epochs ({self.max_epochs})")
        if self.warmup_epochs >= self.max_epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < max_epochs ({self.max_epochs})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ValueError("AdamW betas must lie in [0, 1) and eps must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got '{self.loss}'")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        return self


def mil_shapes(c=None, embed_dim=DEFAULT_EMBED_DIM, n_modalities=DEFAULT_N_MODALITIES):
    """Ordered parameter shapes of the MIL head for the widths in `c`."""
    c = c or TrainConfig()
    return OrderedDict([
        ("modality_table", (n_modalities, embed_dim)),
        ("ln_gain", (embed_dim,)),
        ("ln_bias", (embed_dim,)),
        ("proj_w1", (embed_dim, c.projector_hidden)),
        ("proj_b1", (c.projector_hidden,)),
        ("proj_w2", (c.projector_hidden, c.projector_out)),
        ("proj_b2", (c.projector_out,)),
        ("attn_w1", (c.projector_out, c.attention_hidden)),
        ("attn_b1", (c.attention_hidden,)),
        ("attn_w2", (c.attention_hidden,)),
        ("attn_b2", (1,)),
        ("head_w1", (c.projector_out, c.head_hidden)),
        ("head_b1", (c.head_hidden,)),
        ("head_w2", (c.head_hidden,)),
        ("head_b2", (1,)),
    ])


class MilParams:
    """
    Every learnable weight in one flat float64 vector with named views.

    `version` increases on each in-place update; traces record it so that a
    backward pass on an outdated trace is detected. Code that edits `data`
    directly should call bump().
    """

    def __init__(self, shapes, data=None):
        self.shapes = OrderedDict((k, tuple(v)) for k, v in shapes.items())
        self._offsets = OrderedDict()
        offset = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self._offsets[name] = (offset, size)
            offset += size
        if data is None:
            data = np.zeros(offset)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (offset,):
            raise ValueError(f"parameter vector has {data.size} entries, shapes need {offset}")
        self.data = data
        self.version = 0
        self.target_mean = 0.0
        self.target_std = 1.0

    @property
    def n_params(self):
        return self.data.size

    def names(self):
        return list(self.shapes)

    def __getitem__(self, name):
        start, size = self._offsets[name]
        return self.data[start:start + size].reshape(self.shapes[name])

    def slice_of(self, name):
        start, size = self._offsets[name]
        return slice(start, start + size)

    def bump(self):
        self.version += 1

    def copy(self):
        other = MilParams(self.shapes, self.data.copy())
        other.target_mean = self.target_mean
        other.target_std = self.target_std
        return other

    def zeros_like(self):
        return MilParams(self.shapes)

    def group_norms(self):
        return {name: float(np.linalg.norm(self[name])) for name in self.shapes}

    def __repr__(self):
        return f"MilParams(n_params={self.n_params}, groups={len(self.shapes)})"


def init_params(c=None, seed=0, embed_dim=DEFAULT_EMBED_DIM, n_modalities=DEFAULT_N_MODALITIES):
    """
    Seeded initialization: weights and biases uniform in +-1/sqrt(fan_in),
    layer-norm gain 1 and bias 0, modality table all zeros.
    """
    c = c or TrainConfig()
    p = MilParams(mil_shapes(c, embed_dim, n_modalities))
    rng = rng_for(seed, "mil_init")
    fan_in = {
        "proj_w1": embed_dim, "proj_b1": embed_dim,
        "proj_w2": c.projector_hidden, "proj_b2": c.projector_hidden,
        "attn_w1": c.projector_out, "attn_b1": c.projector_out,
        "attn_w2": c.attention_hidden, "attn_b2": c.attention_hidden,
        "head_w1": c.projector_out, "head_b1": c.projector_out,
        "head_w2": c.head_hidden, "head_b2": c.head_hidden,
    }
    for name in p.names():
        if name in fan_in:
            bound = 1.0 / math.sqrt(fan_in[name])
            p[name][...] = rng.uniform(-bound, bound, size=p.shapes[name])
    p["ln_gain"][...] = 1.0
    return p


# --- Forward ---

def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _dropout_mask(shape, rate, rng):
    if rate <= 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


@dataclass
class ForwardTrace:
    prediction: float
    attention: np.ndarray
    mode: str
    params_version: int
    params_id: int
    cache: dict = field(default_factory=dict, repr=False)


def forward(b, p, mode="eval", rng=None, dropout=0.15):
    """
    Runs the MIL graph on one bag.

    Args:
        b: A bag exposing `embeddings` (N x d) and `modality_ids` (N).
        p (MilParams): Parameters.
        mode (str): "train" enables inverted dropout, "eval" disables it.
        rng (np.random.Generator): Dropout mask source, required in train mode.
        dropout (float): Dropout rate of the projector and head.

    Returns:
        ForwardTrace: Prediction on the model's (possibly standardized) scale,
        attention weights, and every intermediate the backward pass needs.
    """
    e = np.asarray(b.embeddings, dtype=np.float64)
    m = np.asarray(b.modality_ids, dtype=np.int64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise ValueError("forward needs a non-empty bag")
    if e.shape[1] != p.shapes["ln_gain"][0]:
        raise ValueError(f"embedding dimension {e.shape[1]} does not match parameters ({p.shapes['ln_gain'][0]})")
    if m.shape != (e.shape[0],) or m.min() < 0 or m.max() >= p.shapes["modality_table"][0]:
        raise ValueError("modality ids must align with embeddings and lie in the modality table")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got '{mode}'")
    train_mode = mode == "train" and dropout > 0
    if train_mode and rng is None:
        raise ValueError("train mode needs a dropout rng")

    mu = e.mean(axis=1, keepdims=True)
    xc = e - mu
    inv_std = 1.0 / np.sqrt((xc ** 2).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = xc * inv_std
    e_tilde = xhat * p["ln_gain"] + p["ln_bias"] + p["modality_table"][m]

    a1 = e_tilde @ p["proj_w1"] + p["proj_b1"]
    h1 = _elu(a1)
    mask1 = _dropout_mask(h1.shape, dropout, rng) if train_mode else np.ones(h1.shape)
    d1 = h1 * mask1
    a2 = d1 @ p["proj_w2"] + p["proj_b2"]
    h = _elu(a2)

    s1 = h @ p["attn_w1"] + p["attn_b1"]
    t = np.tanh(s1)
    logits = t @ p["attn_w2"] + p["attn_b2"][0]
    shifted = np.exp(logits - logits.max())
    alpha = shifted / shifted.sum()

    z = (alpha[:, None] * h).sum(axis=0)

    c1 = z @ p["head_w1"] + p["head_b1"]
    g1 = _elu(c1)
    mask_h = _dropout_mask(g1.shape, dropout, rng) if train_mode else np.ones(g1.shape)
    gd = g1 * mask_h
    y_hat = float(gd @ p["head_w2"] + p["head_b2"][0])

    cache = {
        "m": m, "xhat": xhat, "e_tilde": e_tilde, "a1": a1, "mask1": mask1, "d1": d1,
        "a2": a2, "h": h, "t": t, "logits": logits, "z": z, "c1": c1, "mask_h": mask_h, "gd": gd,
    }
    return ForwardTrace(
        prediction=y_hat,
        attention=alpha,
        mode=mode,
        params_version=p.version,
        params_id=id(p),
        cache=cache,
    )


# --- Loss ---

def loss(y_hat, y, kind="mse"):
    """Per-bag training loss; squared error by default."""
    r = y_hat - y
    if kind == "mse":
        return r * r
    if kind == "huber":
        a = abs(r)
        return 0.5 * r * r if a <= HUBER_DELTA else HUBER_DELTA * (a - 0.5 * HUBER_DELTA)
    raise ValueError(f"unknown loss '{kind}'")


def loss_grad(y_hat, y, kind="mse"):
    r = y_hat - y
    if kind == "mse":
        return 2.0 * r
    if kind == "huber":
        return r if abs(r) <= HUBER_DELTA else HUBER_DELTA * math.copysign(1.0, r)
    raise ValueError(f"unknown loss '{kind}'")


def batch_loss(pairs, kind="mse"):
    """Mean of per-bag losses over (y_hat, y) pairs."""
    pairs = list(pairs)
    return sum(loss(y_hat, y, kind) for y_hat, y in pairs) / len(pairs)


# --- Backward ---

def backward(trace, p, upstream=1.0):
    """
    Reverse pass of forward() for one bag.

    Args:
        trace (ForwardTrace): Output of forward() under the current parameters.
        p (MilParams): The parameters the trace was computed with.
        upstream (float): d(objective)/d(prediction); 1.0 gives the gradient
            of the prediction itself, loss_grad(y_hat, y) that of the loss.

    Returns:
        MilParams: Gradients in the same flat layout as `p`.

    Raises:
        StaleTraceError: when `p` changed since the trace was recorded.
    """
    if trace.params_id != id(p) or trace.params_version != p.version:
        raise StaleTraceError(
            f"trace recorded at parameter version {trace.params_version}, parameters now at {p.version}"
        )
    cache = trace.cache
    grads = p.zeros_like()
    dy = float(upstream)

    grads["head_w2"][...] = cache["gd"] * dy
    grads["head_b2"][...] = dy
    dc1 = p["head_w2"] * dy * cache["mask_h"] * _elu_grad(cache["c1"])
    grads["head_w1"][...] = np.outer(cache["z"], dc1)
    grads["head_b1"][...] = dc1
    dz = p["head_w1"] @ dc1

    h = cache["h"]
    alpha = trace.attention
    dh = alpha[:, None] * dz[None, :]
    dalpha = h @ dz
    dlogits = alpha * (dalpha - np.dot(alpha, dalpha))

    t = cache["t"]
    grads["attn_w2"][...] = t.T @ dlogits
    grads["attn_b2"][...] = dlogits.sum()
    ds1 = np.outer(dlogits, p["attn_w2"]) * (1.0 - t * t)
    grads["attn_w1"][...] = h.T @ ds1
    grads["attn_b1"][...] = ds1.sum(axis=0)
    dh = dh + ds1 @ p["attn_w1"].T

    da2 = dh * _elu_grad(cache["a2"])
    grads["proj_w2"][...] = cache["d1"].T @ da2
    grads["proj_b2"][...] = da2.sum(axis=0)
    da1 = (da2 @ p["proj_w2"].T) * cache["mask1"] * _elu_grad(cache["a1"])
    grads["proj_w1"][...] = cache["e_tilde"].T @ da1
    grads["proj_b1"][...] = da1.sum(axis=0)
    de_tilde = da1 @ p["proj_w1"].T

    np.add.at(grads["modality_table"], cache["m"], de_tilde)
    grads["ln_gain"][...] = (de_tilde * cache["xhat"]).sum(axis=0)
    grads["ln_bias"][...] = de_tilde.sum(axis=0)
    return grads


# --- Schedule and optimizer ---

def lr_at(epoch, c):
    """Linear warm-up over `warmup_epochs`, then cosine decay towards 0 at max_epochs."""
    if epoch < c.warmup_epochs:
        return c.lr0 * ((epoch + 1) / c.warmup_epochs)
    progress = (epoch - c.warmup_epochs) / (c.max_epochs - c.warmup_epochs)
    return c.lr0 * (0.5 * (1.0 + math.cos(math.pi * progress)))


class AdamW:
    """Adam with decoupled weight decay, applied to every parameter."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros_like(params.data)
        self.v = np.zeros_like(params.data)
        self.t = 0

    def step(self, grads, lr):
        g = grads.data if isinstance(grads, MilParams) else np.asarray(grads)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        data = self.params.data
        data *= 1.0 - lr * self.weight_decay
        data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.params.bump()


# --- Training ---

def predict(b, p):
    """Eval-mode prediction on the PSS scale plus the attention weights."""
    trace = forward(b, p, mode="eval")
    return p.target_mean + p.target_std * trace.prediction, trace.attention


def rmse_of(bags, p):
    errors = [predict(b, p)[0] - float(b.target) for b in bags]
    return float(np.sqrt(np.mean(np.square(errors))))


def _diverged(epoch, batch, p):
    return TrainingDiverged(epoch, batch, p.group_norms())


def train(train_bags, val_bags, c=None, verbose=False):
    """
    Fits the MIL head with AdamW over shuffled mini-batches of bags.

    After every epoch the validation RMSE (eval mode, PSS scale) is recorded;
    the snapshot at its minimum is returned. Training stops once `patience`
    epochs pass without improvement, or at `max_epochs`.

    Args:
        train_bags (list): Training bags (objects with embeddings, modality_ids, target).
        val_bags (list): Validation bags for early stopping.
        c (TrainConfig): Hyperparameters; `c.seed` drives initialization,
            shuffling and dropout.
        verbose (bool): Print one line per epoch.

    Returns:
        tuple: (best MilParams, history list of dicts with epoch, lr, train_loss, val_rmse)

    Raises:
        TrainingDiverged: when a batch loss or the validation RMSE is not finite.
    """
    c = (c or TrainConfig()).validate()
    if not train_bags or not val_bags:
        raise ValueError("train needs non-empty training and validation sets")

    embed_dim = int(np.asarray(train_bags[0].embeddings).shape[1])
    p = init_params(c, c.seed, embed_dim=embed_dim)
    targets = np.array([float(b.target) for b in train_bags])
    if c.standardize_targets:
        p.target_mean = float(targets.mean())
        std = float(targets.std())
        p.target_std = std if std > 0 else 1.0
    y_model = (targets - p.target_mean) / p.target_std

    optimizer = AdamW(p, betas=(c.beta1, c.beta2), eps=c.eps, weight_decay=c.weight_decay)
    n = len(train_bags)
    history = []
    best, best_rmse, best_epoch = None, math.inf, -1
    since_best = 0

    for epoch in range(c.max_epochs):
        lr = lr_at(epoch, c)
        order = rng_for(c.seed, "shuffle", epoch).permutation(n)
        epoch_losses = []
        for batch, start in enumerate(range(0, n, c.batch_bags)):
            members = order[start:start + c.batch_bags]
            grads = np.zeros_like(p.data)
            batch_losses = []
            for slot, idx in enumerate(members):
                rng = rng_for(c.seed, "dropout", epoch, batch, slot)
                trace = forward(train_bags[idx], p, mode="train", rng=rng, dropout=c.dropout)
                value = loss(trace.prediction, y_model[idx], c.loss)
                if not math.isfinite(value):
                    raise _diverged(epoch, batch, p)
                batch_losses.append(value)
                upstream = loss_grad(trace.prediction, y_model[idx], c.loss) / len(members)
                grads += backward(trace, p, upstream).data
            optimizer.step(grads, lr)
            if not np.all(np.isfinite(p.data)):
                raise _diverged(epoch, batch, p)
            epoch_losses.append(float(np.mean(batch_losses)))

        val_rmse = rmse_of(val_bags, p)
        if not math.isfinite(val_rmse):
            raise _diverged(epoch, "validation", p)
        history.append({
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(epoch_losses)),
            "val_rmse": val_rmse,
        })
        if verbose:
            print(f"  -> epoch {epoch:3d} lr={lr:.2e} train_loss={history[-1]['train_loss']:.4f} val_rmse={val_rmse:.3f}")
        if val_rmse < best_rmse:
            best, best_rmse, best_epoch = p.copy(), val_rmse, epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= c.patience:
                break

    if verbose:
        print(f"  -> best epoch {best_epoch} (val RMSE {best_rmse:.3f}) after {len(history)} epochs")
    return best, history


# --- Persistence ---

def write_history(history, path):
    """Writes the training history as CSV `epoch,lr,train_loss,val_rmse`."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    frame = pd.DataFrame(history, columns=["epoch", "lr", "train_loss", "val_rmse"])
    frame.to_csv(path, index=False)
    return path


def write_checkpoint(path, p, seed=0, epoch=-1, val_rmse=float("nan")):
    """
    Checkpoint layout: uint32 LE header length, UTF-8 JSON header
    {shapes, seed, epoch, val_rmse, target_mean, target_std}, then the
    float64 LE parameter vector in shape order.
    """
    header = {
        "shapes": {name: list(shape) for name, shape in p.shapes.items()},
        "seed": int(seed),
        "epoch": int(epoch),
        "val_rmse": None if not math.isfinite(val_rmse) else float(val_rmse),
        "target_mean": p.target_mean,
        "target_std": p.target_std,
    }
    header_bytes = json.dumps(header, sort_keys=False).encode("utf-8")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(p.data.astype("<f8").tobytes())
    return path


def read_checkpoint(path):
    """Returns (MilParams, header dict) from a file written by write_checkpoint."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError("checkpoint shorter than its length prefix", len(raw))
    (header_len,) = struct.unpack_from("<I", raw, 0)
    if 4 + header_len > len(raw):
        raise FormatError(f"checkpoint header of {header_len} bytes is truncated", len(raw))
    try:
        header = json.loads(raw[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint header is not valid JSON: {e}", 4) from e
    shapes = OrderedDict((name, tuple(shape)) for name, shape in header["shapes"].items())
    expected = sum(int(np.prod(s)) for s in shapes.values())
    blob = raw[4 + header_len:]
    if len(blob) != expected * 8:
        raise FormatError(f"checkpoint holds {len(blob)} parameter bytes, shapes need {expected * 8}", 4 + header_len)
    p = MilParams(shapes, np.frombuffer(blob, dtype="<f8").astype(np.float64))
    p.target_mean = float(header.get("target_mean", 0.0))
    p.target_std = float(header.get("target_std", 1.0))
    return p, header
