"""Loss-switching fusion network.

A five-layer autoencoder ``D_in -> H -> D_code -> H -> D_in`` whose decoder
reuses the transposed encoder matrices, plus a classifier head that reads the
code layer. Training alternates one reconstruction step and one
classification step per mini-batch. Everything runs in float64 numpy with
hand-written backpropagation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import numpy as np

from .descriptors import LabeledDescriptorBatch
from .errors import DataError, DivergenceError, FormatError, check_magic

MODEL_MAGIC = b"LSFM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sH5I3B")

IDENTITY, RELU = 0, 1
_ACT_NAMES = {IDENTITY: "identity", RELU: "relu"}

# parameters touched by each loss
AE_PARAMS = ("w1", "b1", "w2", "b2", "b3", "b4")
ENCODER_PARAMS = ("w1", "b1", "w2", "b2")


def _act(kind, a):
    return np.maximum(a, 0.0) if kind == RELU else a


def _act_grad(kind, a, upstream):
    return upstream * (a > 0.0) if kind == RELU else upstream


@dataclass
class LSFNetModel:
    """Network parameters. Decoder weights are never stored: they are ``w2.T`` and ``w1.T``.

    Shapes: ``w1 (H, D_in)``, ``w2 (D_code, H)``, ``wh (C, D_code)`` or, with a
    hidden head layer, ``wg (G, D_code)`` and ``wh (C, G)``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    b4: np.ndarray
    wh: np.ndarray
    bh: np.ndarray
    wg: Optional[np.ndarray] = None
    bg: Optional[np.ndarray] = None
    act_hidden: int = RELU
    act_code: int = IDENTITY
    act_out: int = IDENTITY

    @property
    def layer_dims(self) -> tuple[int, int, int]:
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    @property
    def n_classes(self) -> int:
        return self.wh.shape[0]

    @property
    def head_hidden(self) -> int:
        return 0 if self.wg is None else self.wg.shape[0]

    def param_names(self) -> tuple[str, ...]:
        head = ("wg", "bg", "wh", "bh") if self.wg is not None else ("wh", "bh")
        return AE_PARAMS + head

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names()}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params().values())

    def copy(self) -> "LSFNetModel":
        kw = {name: p.copy() for name, p in self.params().items()}
        return LSFNetModel(**kw, act_hidden=self.act_hidden, act_code=self.act_code, act_out=self.act_out)

    def check(self) -> None:
        d_in, h, d_code = self.layer_dims
        expected = {"b1": (h,), "w2": (d_code, h), "b2": (d_code,), "b3": (h,), "b4": (d_in,),
                    "bh": (self.n_classes,)}
        if self.wg is not None:
            expected.update(wg=(self.head_hidden, d_code), bg=(self.head_hidden,),
                            wh=(self.n_classes, self.head_hidden))
        else:
            expected["wh"] = (self.n_classes, d_code)
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DataError(f"parameter {name} has shape {getattr(self, name).shape}, expected {shape}")
        for name, p in self.params().items():
            if not np.all(np.isfinite(p)):
                raise DataError(f"parameter {name} is not finite")


@dataclass
class TrainConfig:
    lr_autoencoder: float = 1e-3
    lr_classifier: float = 1e-2
    iterations: int = 200
    batch_size: int = 256
    seed: int = 0
    early_stop: bool = False
    early_stop_window: int = 10
    early_stop_tol: float = 1e-6

    def __post_init__(self):
        if self.lr_autoencoder <= 0 or self.lr_classifier <= 0:
            raise DataError("learning rates must be positive")
        if self.iterations < 1 or self.batch_size < 1:
            raise DataError("iterations and batch_size must be >= 1")


@dataclass
class LossHistory:
    """Interleaved ``("L1", epoch, batch, value)`` / ``("L2", ...)`` records."""

    entries: list = field(default_factory=list)

    def record(self, kind: str, epoch: int, batch: int, value: float) -> None:
        self.entries.append((kind, epoch, batch, value))

    def curve(self, kind: str) -> np.ndarray:
        return np.array([e[3] for e in self.entries if e[0] == kind])

    def epoch_means(self, kind: str) -> np.ndarray:
        rows = [(e[1], e[3]) for e in self.entries if e[0] == kind]
        if not rows:
            return np.empty(0)
        epochs = np.array([r[0] for r in rows])
        values = np.array([r[1] for r in rows])
        return np.array([values[epochs == ep].mean() for ep in np.unique(epochs)])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("loss,epoch,batch,value\n")
            for kind, epoch, batch, value in self.entries:
                fh.write(f"{kind},{epoch},{batch},{value!r}\n")


def _glorot(rng, fan_out, fan_in):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_model(layer_dims=(426, 256, 128), n_classes: int = 6, seed: int = 0, head_hidden: int = 0) -> LSFNetModel:
    """Glorot-uniform weights, zero biases, reproducible from ``seed``."""
    d_in, h, d_code = (int(d) for d in layer_dims)
    if min(d_in, h, d_code) <= 0 or head_hidden < 0:
        raise DataError(f"layer dimensions must be positive, got {layer_dims}")
    if n_classes < 2:
        raise DataError("the classifier head needs at least two classes")
    rng = np.random.default_rng(seed)
    w1 = _glorot(rng, h, d_in)
    w2 = _glorot(rng, d_code, h)
    wg = bg = None
    head_in = d_code
    if head_hidden:
        wg = _glorot(rng, head_hidden, d_code)
        bg = np.zeros(head_hidden)
        head_in = head_hidden
    wh = _glorot(rng, n_classes, head_in)
    return LSFNetModel(w1, np.zeros(h), w2, np.zeros(d_code), np.zeros(h), np.zeros(d_in),
                       wh, np.zeros(n_classes), wg, bg)


def _as_input(model: LSFNetModel, rows) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise DataError(f"input width {x.shape[-1]} does not match network input {model.layer_dims[0]}")
    if not np.all(np.isfinite(x)):
        raise DataError("input contains non-finite values")
    return x


def _encode_cache(model, x):
    a1 = x @ model.w1.T + model.b1
    h1 = _act(model.act_hidden, a1)
    a2 = h1 @ model.w2.T + model.b2
    return a1, h1, a2, _act(model.act_code, a2)


def encode(model: LSFNetModel, rows) -> np.ndarray:
    """Fused per-row code, shape ``(S, D_code)``."""
    return _encode_cache(model, _as_input(model, rows))[3]


def _decode_cache(model, z):
    a3 = z @ model.w2 + model.b3
    h3 = _act(model.act_hidden, a3)
    a4 = h3 @ model.w1 + model.b4
    return a3, h3, a4, _act(model.act_out, a4)


def reconstruct(model: LSFNetModel, rows) -> np.ndarray:
    z = encode(model, rows)
    return _decode_cache(model, z)[3]


def _head_forward(model, z):
    if model.wg is None:
        return None, None, z @ model.wh.T + model.bh
    ag = z @ model.wg.T + model.bg
    g = np.maximum(ag, 0.0)
    return ag, g, g @ model.wh.T + model.bh


def classify_logits(model: LSFNetModel, rows) -> np.ndarray:
    return _head_forward(model, encode(model, rows))[2]


def mse_loss(x, x_hat) -> float:
    """Squared reconstruction error summed over features, averaged over rows."""
    diff = np.asarray(x_hat, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float(np.einsum("ij,ij->", diff, diff) / diff.shape[0])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def _encoder_backward(model, x, cache, dz, grads):
    a1, h1, a2, _ = cache
    da2 = _act_grad(model.act_code, a2, dz)
    grads["w2"] = grads.get("w2", 0) + da2.T @ h1
    grads["b2"] = da2.sum(axis=0)
    da1 = _act_grad(model.act_hidden, a1, da2 @ model.w2)
    grads["w1"] = grads.get("w1", 0) + da1.T @ x
    grads["b1"] = da1.sum(axis=0)


def ae_loss_and_grads(model: LSFNetModel, rows) -> tuple[float, dict[str, np.ndarray]]:
    """Reconstruction loss and its gradient for the six autoencoder tensors.

    ``w1`` and ``w2`` each collect two terms: one from their encoder use and
    one from their transposed decoder use.
    """
    x = _as_input(model, rows)
    s = x.shape[0]
    cache = _encode_cache(model, x)
    z = cache[3]
    a3, h3, a4, x_hat = _decode_cache(model, z)
    diff = x_hat - x
    loss = float(np.einsum("ij,ij->", diff, diff) / s)

    grads: dict[str, np.ndarray] = {}
    da4 = _act_grad(model.act_out, a4, 2.0 * diff / s)
    grads["w1"] = h3.T @ da4
    grads["b4"] = da4.sum(axis=0)
    da3 = _act_grad(model.act_hidden, a3, da4 @ model.w1.T)
    grads["w2"] = z.T @ da3
    grads["b3"] = da3.sum(axis=0)
    _encoder_backward(model, x, cache, da3 @ model.w2.T, grads)
    return loss, grads


def cls_loss_and_grads(model: LSFNetModel, rows, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy and its gradient for the encoder and head tensors."""
    x = _as_input(model, rows)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise DataError("need exactly one label per row")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise DataError(f"labels must lie in [0, {model.n_classes})")
    s = x.shape[0]
    cache = _encode_cache(model, x)
    z = cache[3]
    ag, g, logits = _head_forward(model, z)
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(s), labels].mean())

    grads: dict[str, np.ndarray] = {}
    dlogits = np.exp(logp)
    dlogits[np.arange(s), labels] -= 1.0
    dlogits /= s
    if model.wg is None:
        grads["wh"] = dlogits.T @ z
        grads["bh"] = dlogits.sum(axis=0)
        dz = dlogits @ model.wh
    else:
        grads["wh"] = dlogits.T @ g
        grads["bh"] = dlogits.sum(axis=0)
        dag = (dlogits @ model.wh) * (ag > 0.0)
        grads["wg"] = dag.T @ z
        grads["bg"] = dag.sum(axis=0)
        dz = dag @ model.wg
    _encoder_backward(model, x, cache, dz, grads)
    return loss, grads


def _sgd(model, grads, lr):
    for name, g in grads.items():
        getattr(model, name)[...] -= lr * g


def train_step_ae(model: LSFNetModel, rows, lr: float = 1e-3) -> float:
    """One SGD step on the reconstruction loss; returns the pre-step loss."""
    loss, grads = ae_loss_and_grads(model, rows)
    if not math.isfinite(loss):
        raise DivergenceError(f"reconstruction loss became non-finite ({loss})")
    _sgd(model, grads, lr)
    return loss


def train_step_cls(model: LSFNetModel, rows, labels, lr: float = 1e-2) -> float:
    """One SGD step on the classification loss; decoder biases are left alone."""
    loss, grads = cls_loss_and_grads(model, rows, labels)
    if not math.isfinite(loss):
        raise DivergenceError(f"classification loss became non-finite ({loss})")
    _sgd(model, grads, lr)
    return loss


def minibatches(data: LabeledDescriptorBatch, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield data.rows[idx], data.labels[idx]


BatchSource = Union[LabeledDescriptorBatch, Callable[[int], Iterable]]


def train(model: LSFNetModel, batches: BatchSource, config: Optional[TrainConfig] = None,
          log: Optional[Callable[[str], None]] = None) -> tuple[LSFNetModel, LossHistory]:
    """Alternate reconstruction and classification steps.

    ``batches`` is either a labelled sample (reshuffled every epoch from
    ``config.seed``) or a callable returning the ``(rows, labels)`` batches of
    a given epoch. The input model is not modified.
    """
    config = config or TrainConfig()
    model = model.copy()
    history = LossHistory()
    rng = np.random.default_rng(config.seed)
    stalled = 0
    prev = None
    for epoch in range(config.iterations):
        stream = batches(epoch) if callable(batches) else minibatches(batches, config.batch_size, rng)
        for b, (rows, labels) in enumerate(stream):
            try:
                l1 = train_step_ae(model, rows, config.lr_autoencoder)
                history.record("L1", epoch, b, l1)
                l2 = train_step_cls(model, rows, labels, config.lr_classifier)
                history.record("L2", epoch, b, l2)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, batch {b}") from None
        if log is not None:
            log(f"epoch {epoch + 1}/{config.iterations}  "
                f"L1 {history.epoch_means('L1')[-1]:.6g}  L2 {history.epoch_means('L2')[-1]:.6g}")
        if config.early_stop:
            cur = np.array([history.epoch_means("L1")[-1], history.epoch_means("L2")[-1]])
            if prev is not None and np.all((prev - cur) < config.early_stop_tol * np.abs(prev)):
                stalled += 1
                if stalled >= config.early_stop_window:
                    break
            else:
                stalled = 0
            prev = cur
    return model, history


# -- persistence ----------------------------------------------------------------

def _header_dict(model: LSFNetModel) -> dict:
    d_in, h, d_code = model.layer_dims
    return {
        "magic": MODEL_MAGIC.decode(), "version": MODEL_VERSION,
        "layer_dims": [d_in, h, d_code], "n_classes": model.n_classes, "head_hidden": model.head_hidden,
        "activations": {"hidden": _ACT_NAMES[model.act_hidden], "code": _ACT_NAMES[model.act_code],
                        "output": _ACT_NAMES[model.act_out]},
        "tensors": [[name, list(p.shape)] for name, p in model.params().items()],
    }


def save_model(model: LSFNetModel, path, sidecar: bool = True) -> None:
    """Write the binary model file and, optionally, a ``.json`` header copy."""
    model.check()
    path = Path(path)
    d_in, h, d_code = model.layer_dims
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, d_in, h, d_code, model.n_classes, model.head_hidden,
                              model.act_hidden, model.act_code, model.act_out))
        for p in model.params().values():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    if sidecar:
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(_header_dict(model), indent=2) + "\n")


def load_model(path) -> LSFNetModel:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such model file")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, d_in, h, d_code, n_classes, head_hidden, act_h, act_c, act_o = _HEADER.unpack_from(raw)
    check_magic(path, magic, MODEL_MAGIC)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    if any(a not in _ACT_NAMES for a in (act_h, act_c, act_o)):
        raise FormatError(f"{path}: unknown activation code")
    head_in = head_hidden or d_code
    shapes = [("w1", (h, d_in)), ("b1", (h,)), ("w2", (d_code, h)), ("b2", (d_code,)),
              ("b3", (h,)), ("b4", (d_in,))]
    if head_hidden:
        shapes += [("wg", (head_hidden, d_code)), ("bg", (head_hidden,))]
    shapes += [("wh", (n_classes, head_in)), ("bh", (n_classes,))]
    n_values = sum(math.prod(s) for _, s in shapes)
    if len(raw) != _HEADER.size + 8 * n_values:
        raise FormatError(f"{path}: parameter payload size does not match header")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    tensors, pos = {}, 0
    for name, shape in shapes:
        n = math.prod(shape)
        tensors[name] = flat[pos:pos + n].reshape(shape).copy()
        pos += n
    model = LSFNetModel(**tensors, act_hidden=act_h, act_code=act_c, act_out=act_o)
    try:
        model.check()
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return model


# -- gradient checking ------------------------------------------------------------

def numeric_grads(loss_fn: Callable[[LSFNetModel], float], model: LSFNetModel, h: float = 1e-6,
                  names: Optional[Iterable[str]] = None) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn`` for every entry of the named tensors."""
    out = {}
    for name in names or model.param_names():
        p = getattr(model, name)
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss_fn(model)
            p[idx] = orig - h
            down = loss_fn(model)
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(layer_dims=(20, 12, 8), n_classes: int = 3, n_rows: int = 16, seed: int = 0,
                   h: float = 1e-6) -> dict[str, dict[str, float]]:
    """Relative error between backprop and central differences, per loss and tensor."""
    rng = np.random.default_rng(seed)
    model = init_model(layer_dims, n_classes, seed)
    # non-zero biases so every path is exercised
    for name in model.param_names():
        if name.startswith("b"):
            getattr(model, name)[...] = rng.normal(0.0, 0.1, getattr(model, name).shape)
    x = rng.normal(size=(n_rows, layer_dims[0]))
    y = rng.integers(0, n_classes, size=n_rows)

    _, g1 = ae_loss_and_grads(model, x)
    _, g2 = cls_loss_and_grads(model, x, y)
    n1 = numeric_grads(lambda m: ae_loss_and_grads(m, x)[0], model, h)
    n2 = numeric_grads(lambda m: cls_loss_and_grads(m, x, y)[0], model, h)
    report = {"L1": {}, "L2": {}}
    for name in model.param_names():
        report["L1"][name] = relative_error(g1.get(name, np.zeros_like(n1[name])), n1[name])
        report["L2"][name] = relative_error(g2.get(name, np.zeros_like(n2[name])), n2[name])
    return report
