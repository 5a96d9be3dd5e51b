"""Classifier, loss, gradients, SGD and the training loop."""

from __future__ import annotations

import contextlib
import logging
import tempfile
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from ._seeding import rng_stream
from .exceptions import DegenerateInputError, DivergenceError, ParameterError
from .network import EPS, NetworkConfig, ScatteringNetwork, update_running

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "lr", "train_loss", "train_err", "test_err", "seconds")

# fixed-network features above this size are cached on disk instead of in memory
FEATURE_CACHE_BYTES = 1 << 30


def softmax_xent(logits, labels):
    """Mean cross-entropy of a batch and its gradient with respect to the logits.

    Returns ``(loss, grad)`` with ``grad = (softmax - onehot) / batch``.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    single = logits.ndim == 1
    if single:
        logits, labels = logits[None], np.atleast_1d(labels)
    K = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise ParameterError(f"label out of range for {K} classes")
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits", layer="classifier")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    n = len(labels)
    loss = float(np.mean(logsum - shifted[np.arange(n), labels]))
    grad = np.exp(shifted - logsum[:, None])
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, (grad[0] if single else grad)


class Classifier:
    """Per-channel batch normalization of real features followed by a linear map.

    Complex network outputs are split into real and imaginary channels
    first; ``real_input=True`` keeps only the real part (for modulus
    outputs, whose imaginary part is identically zero).
    """

    def __init__(self, channels, spatial, n_classes, real_input=False):
        self.real_input = real_input
        self.channels = channels * (1 if real_input else 2)
        self.spatial = tuple(spatial)
        dim = self.channels * int(np.prod(self.spatial))
        self.W = np.zeros((n_classes, dim))
        self.b = np.zeros(n_classes)
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)
        self.stat_updates = 0

    def parameters(self):
        return {"clf.W": self.W, "clf.b": self.b}

    def _split(self, f):
        if self.real_input:
            return np.real(f).astype(np.float64, copy=False)
        return np.concatenate([f.real, f.imag], axis=-3).astype(np.float64, copy=False)

    def forward(self, f, training=False):
        r = self._split(f)
        if training:
            mean = r.mean(axis=(0, 2, 3))
            var = r.var(axis=(0, 2, 3))
            running = [self.running_mean, self.running_var]
            update_running(running, mean, var, self.stat_updates > 0)
            self.running_mean, self.running_var = running
            self.stat_updates += 1
        else:
            mean, var = self.running_mean, self.running_var
        scale = np.sqrt(np.maximum(var, EPS))
        h = (r - mean[:, None, None]) / scale[:, None, None]
        flat = h.reshape(len(h), -1)
        logits = flat @ self.W.T + self.b
        return logits, (h, var, training)

    def backward(self, cache, grad_logits, input_dtype=None):
        """Parameter gradients, plus the feature gradient unless ``input_dtype`` is None."""
        h, var, training = cache
        flat = h.reshape(len(h), -1)
        grads = {"clf.W": grad_logits.T @ flat, "clf.b": grad_logits.sum(axis=0)}
        if input_dtype is None:
            return None, grads
        G = (grad_logits @ self.W).reshape(h.shape)
        scale = np.sqrt(np.maximum(var, EPS))[:, None, None]
        if training:
            mean_G = G.mean(axis=(0, 2, 3), keepdims=True)
            proj = np.mean(G * h, axis=(0, 2, 3), keepdims=True)
            live = (var > EPS)[:, None, None]
            G = (G - mean_G - np.where(live, proj * h, 0)) / scale
        else:
            G = G / scale
        if self.real_input:
            grad_f = G.astype(input_dtype)
        else:
            C = self.channels // 2
            grad_f = (G[:, :C] + 1j * G[:, C:]).astype(input_dtype)
        return grad_f, grads

    def state_arrays(self):
        return {"clf.W": self.W, "clf.b": self.b,
                "clf.running_mean": self.running_mean, "clf.running_var": self.running_var,
                "clf.stat_updates": np.array([float(self.stat_updates)])}

    def load_state_arrays(self, arrays):
        self.W[...] = arrays["clf.W"]
        self.b[...] = arrays["clf.b"]
        self.running_mean = np.array(arrays["clf.running_mean"], dtype=float)
        self.running_var = np.array(arrays["clf.running_var"], dtype=float)
        self.stat_updates = int(np.real(arrays.get("clf.stat_updates", [1])[0]))


class Model:
    """A scattering network plus its linear classifier."""

    def __init__(self, config: NetworkConfig, n_classes: int, dtype=np.complex128):
        self.config = config
        self.n_classes = n_classes
        self.network = ScatteringNetwork(config, dtype=dtype)
        C, H, W = config.output_shape()
        self.classifier = Classifier(C, (H, W), n_classes, real_input=not config.learned)

    def parameters(self) -> dict:
        return {**self.network.parameters(), **self.classifier.parameters()}

    def features(self, images, training=False):
        return self.network.forward(images, training=training)

    def logits(self, images, batch_size=256):
        """Evaluation-mode logits, computed in batches."""
        out = []
        for start in range(0, len(images), batch_size):
            f, _ = self.network.forward(images[start:start + batch_size], training=False)
            out.append(self.classifier.forward(f, training=False)[0])
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def loss_and_grads(self, images, labels, features=None):
        """Training-mode loss and exact gradients for every parameter.

        ``features`` may carry precomputed network outputs when the network
        has no learnable parameters.
        """
        if features is None:
            f, caches = self.network.forward(images, training=True)
        else:
            f, caches = features, None
        logits, clf_cache = self.classifier.forward(f, training=True)
        loss, g_logits = softmax_xent(logits, labels)
        need_input = caches is not None and not self.network.is_fixed
        grad_f, grads = self.classifier.backward(clf_cache, g_logits, f.dtype if need_input else None)
        if need_input:
            _, net_grads = self.network.backward(caches, grad_f)
            grads.update(net_grads)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {name}", layer=name)
        return loss, grads

    def state_arrays(self):
        return {**{f"net.{k}": v for k, v in self.network.state_arrays().items()},
                **self.classifier.state_arrays()}

    def load_state_arrays(self, arrays):
        self.network.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("net.")})
        self.classifier.load_state_arrays(arrays)

    def save(self, path):
        """Write a ``PCT1`` checkpoint plus a ``.manifest`` with the configuration."""
        path = Path(path)
        io.write_tensors(path, self.state_arrays())
        manifest = {k: getattr(self.config, k) for k in io.NETWORK_KEYS}
        manifest_text = io.format_config(manifest) + f"# n_classes = {self.n_classes}\n"
        path.with_suffix(".manifest").write_text(manifest_text)

    @classmethod
    def load(cls, path, n_classes=None, dtype=np.complex128):
        path = Path(path)
        text = path.with_suffix(".manifest").read_text()
        values = io.parse_config(text)
        if n_classes is None:
            n_classes = int(text.rsplit("n_classes =", 1)[1].split()[0])
        model = cls(NetworkConfig(**values), n_classes, dtype=dtype)
        model.load_state_arrays(io.read_tensors(path))
        return model


def backward(model: Model, images, labels) -> dict:
    """Gradients of the mean cross-entropy with respect to every parameter."""
    return model.loss_and_grads(images, labels)[1]


@dataclass
class SGDConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    lr_period: Optional[int] = 70
    augment: bool = False
    checkpoint_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def from_values(cls, values: dict):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    def lr_at(self, epoch: int) -> float:
        if not self.lr_period:
            return self.lr
        return self.lr / 10 ** (epoch // self.lr_period)


def sgd_step(params: dict, grads: dict, config: SGDConfig, velocity: dict, lr=None):
    """In-place SGD with momentum and weight decay.

    ``v <- momentum * v + (grad + wd * param)``; ``param <- param - lr * v``.
    Parameters without a gradient in ``grads`` are left untouched.
    """
    lr = config.lr if lr is None else lr
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        step = g + config.weight_decay * p
        v = velocity.get(name)
        v = step if v is None else config.momentum * v + step
        velocity[name] = v
        p -= lr * v
    return params


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    train_err: list = field(default_factory=list)
    test_err: list = field(default_factory=list)
    test_top5: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    @property
    def final_test_err(self):
        return self.test_err[-1] if self.test_err else None


def evaluate_logits(logits, labels):
    """Top-1 and top-5 error (percent) of a logit matrix; top-5 is ``None`` below 5 classes.

    Ties are broken in favour of the lowest class index.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DegenerateInputError("cannot evaluate on an empty dataset")
    order = np.argsort(-logits, axis=1, kind="stable")
    rank = np.argmax(order == labels[:, None], axis=1)
    top1 = 100.0 * np.mean(rank > 0)
    top5 = 100.0 * np.mean(rank >= 5) if logits.shape[1] >= 5 else None
    return float(top1), (None if top5 is None else float(top5))


def evaluate(model: Model, dataset, batch_size=256):
    return evaluate_logits(model.logits(dataset.images, batch_size), dataset.labels)


def augment_batch(images, rng, pad=4):
    """Random crops from a zero-padded copy and random horizontal flips."""
    n, C, H, W = images.shape
    padded = np.zeros((n, C, H + 2 * pad, W + 2 * pad), images.dtype)
    padded[:, :, pad:pad + H, pad:pad + W] = images
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W]
    flip = rng.random(n) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    return out


class _RowFile:
    """Read-only rows of a ``.npy`` file fetched with explicit reads.

    Page-fault readahead on a memory map makes scattered row access many
    times slower than reading each row directly.
    """

    def __init__(self, path, stack):
        header = np.load(path, mmap_mode="r")
        self.shape, self.dtype, self.offset = header.shape, header.dtype, header.offset
        del header
        self.row_bytes = int(np.prod(self.shape[1:])) * self.dtype.itemsize
        self.file = stack.enter_context(open(path, "rb", buffering=0))

    def __len__(self):
        return self.shape[0]

    def __getitem__(self, key):
        if isinstance(key, slice):
            start, stop, _ = key.indices(len(self))
            out = np.empty((max(stop - start, 0), *self.shape[1:]), self.dtype)
            self.file.seek(self.offset + start * self.row_bytes)
            self.file.readinto(memoryview(out.reshape(-1).view(np.uint8)))
            return out
        rows = np.asarray(key)
        out = np.empty((len(rows), *self.shape[1:]), self.dtype)
        for k, r in enumerate(rows):
            self.file.seek(self.offset + int(r) * self.row_bytes)
            self.file.readinto(memoryview(out[k].reshape(-1).view(np.uint8)))
        return out


def _precompute(model, images, batch_size, stack):
    """Network outputs for every image, in memory or in a temporary ``.npy`` file."""
    real = model.classifier.real_input
    first = model.network.forward(images[:1])[0]
    if real:
        first = model.classifier._split(first)
    shape, dtype = (len(images), *first.shape[1:]), first.dtype
    nbytes = int(np.prod(shape)) * dtype.itemsize
    path = None
    if nbytes <= FEATURE_CACHE_BYTES:
        out = np.empty(shape, dtype)
    else:
        folder = stack.enter_context(tempfile.TemporaryDirectory(prefix="phasecollapse-"))
        log.info("caching %.1f GB of features in %s", nbytes / 2 ** 30, folder)
        path = Path(folder) / "features.npy"
        out = np.lib.format.open_memmap(path, "w+", dtype, shape)
    for s in range(0, len(images), batch_size):
        f = model.network.forward(images[s:s + batch_size])[0]
        # real-input classifiers get float64 features so minibatches need no conversion
        out[s:s + batch_size] = model.classifier._split(f) if real else f
    if path is None:
        return out
    out.flush()
    del out
    return _RowFile(path, stack)


def _cached_logits(model, features, batch_size):
    return np.concatenate([model.classifier.forward(features[s:s + batch_size])[0]
                           for s in range(0, len(features), batch_size)])


def train(model: Model, train_set, test_set, config: SGDConfig, seed: int = 0,
          checkpoint_dir=None, metrics_csv=None, on_epoch=None) -> TrainReport:
    """Train ``model`` with minibatch SGD and report per-epoch errors.

    Shuffling and augmentation draw from seeded sub-streams keyed by epoch,
    so a rerun with the same seed and thread count reproduces the loss curve
    bit for bit.  On a non-finite loss or gradient the parameters are rolled
    back to the last completed epoch and :class:`DivergenceError` is raised.
    """
    if len(train_set) == 0:
        raise DegenerateInputError("training set is empty")
    report = TrainReport()
    fixed = model.network.is_fixed and not config.augment
    with contextlib.ExitStack() as stack:
        train_features = _precompute(model, train_set.images, config.batch_size, stack) if fixed else None
        test_features = (_precompute(model, test_set.images, config.batch_size, stack)
                         if fixed and test_set else None)
        _run_epochs(model, train_set, test_set, config, seed, report, train_features, test_features,
                    checkpoint_dir, metrics_csv, on_epoch)
    return report


def _run_epochs(model, train_set, test_set, config, seed, report, train_features, test_features,
                checkpoint_dir, metrics_csv, on_epoch):
    fixed = train_features is not None
    params = model.parameters()
    velocity = {}
    checkpoint = None
    last_good = {k: np.array(v) for k, v in model.state_arrays().items()}

    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = config.lr_at(epoch)
        order = rng_stream(seed, "shuffle", epoch).permutation(len(train_set))
        aug_rng = rng_stream(seed, "augment", epoch)
        total, count = 0.0, 0
        try:
            for b in range(0, len(order), config.batch_size):
                # sorted indices keep reads from a disk cache in file order
                idx = np.sort(order[b:b + config.batch_size])
                labels = train_set.labels[idx]
                if fixed:
                    loss, grads = model.loss_and_grads(None, labels, features=train_features[idx])
                else:
                    images = train_set.images[idx]
                    if config.augment:
                        images = augment_batch(images, aug_rng)
                    loss, grads = model.loss_and_grads(images, labels)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}", layer="loss")
                sgd_step(params, grads, config, velocity, lr=lr)
                model.network.project_constraints()
                total += loss * len(idx)
                count += len(idx)
        except DivergenceError as exc:
            model.load_state_arrays(last_good)
            exc.checkpoint = checkpoint
            raise

        if fixed:
            train_logits = _cached_logits(model, train_features, config.batch_size)
            test_logits = (_cached_logits(model, test_features, config.batch_size)
                           if test_features is not None else None)
        else:
            train_logits = model.logits(train_set.images, config.batch_size)
            test_logits = model.logits(test_set.images, config.batch_size) if test_set else None
        train_err, _ = evaluate_logits(train_logits, train_set.labels)
        test_err, test_top5 = (evaluate_logits(test_logits, test_set.labels)
                               if test_logits is not None else (float("nan"), None))
        elapsed = time.perf_counter() - start

        report.train_loss.append(total / count)
        report.train_err.append(train_err)
        report.test_err.append(test_err)
        report.test_top5.append(test_top5)
        report.lr.append(lr)
        report.seconds.append(elapsed)
        last_good = {k: np.array(v) for k, v in model.state_arrays().items()}
        log.info("epoch %d lr %.4g loss %.4f train %.2f%% test %.2f%% (%.1fs)",
                 epoch, lr, total / count, train_err, test_err, elapsed)
        if metrics_csv is not None:
            io.append_csv(metrics_csv, METRICS_HEADER,
                          [epoch, lr, f"{total / count:.6f}", f"{train_err:.4f}", f"{test_err:.4f}", f"{elapsed:.3f}"])
        if checkpoint_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint = Path(checkpoint_dir) / f"epoch{epoch + 1:04d}.pct"
            checkpoint.parent.mkdir(parents=True, exist_ok=True)
            model.save(checkpoint)
        if on_epoch is not None:
            on_epoch(epoch, report)


def gradient_check(model: Model, images, labels, step=1e-4, max_entries=None, seed=0):
    """Compare analytic gradients with central finite differences.

    Complex parameters are perturbed along their real and imaginary parts
    separately.  ``max_entries`` caps the number of entries probed per
    parameter (chosen at random).  Returns ``{name: worst relative error}``
    with relative error ``|num - ana| / max(|num|, |ana|, 1e-8)``.
    """
    _, grads = model.loss_and_grads(images, labels)
    rng = rng_stream(seed, "gradient_check")
    worst = {}
    for name, p in model.parameters().items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        units = (1.0, 1j) if np.iscomplexobj(p) else (1.0,)
        err = 0.0
        for i in idx:
            for unit in units:
                old = flat[i]
                flat[i] = old + step * unit
                lp = model.loss_and_grads(images, labels)[0]
                flat[i] = old - step * unit
                lm = model.loss_and_grads(images, labels)[0]
                flat[i] = old
                num = (lp - lm) / (2 * step)
                ana = g[i].real if unit == 1.0 else g[i].imag
                err = max(err, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
        worst[name] = err
    return worst
