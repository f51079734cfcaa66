"""Model assembly and SGD training.

A model is a front-end (optional), a pooling encoder (average pooling or
the learnable dictionary encoder), and a linear classifier. Training is
plain momentum SGD with weight decay and a two-drop step schedule,
cropping every batch to one shared random length. Checkpoints are
section-tagged little-endian binary files with a JSON meta block, so a
reload reproduces the model bit for bit.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .data import CropPolicy, make_batches
from .encoding import Dictionary, LdeConfig, lde_backward, lde_forward, tap_forward
from .frontend import ConvSpec, Frontend, StageSpec
from .gmm import GmmModel
from .ndcore import DimensionError, Param, Rng, log_sum_exp_rows, rng_gaussian

CKPT_MAGIC = b"LDEK"
CKPT_VERSION = 1

ENCODER_TAP = "tap"
ENCODER_LDE = "lde"


class NumericalError(RuntimeError):
    """Training or scoring produced a non-finite value."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent."""


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Multiclass cross-entropy of one logit vector; returns the loss and
    its gradient w.r.t. the logits (softmax minus one-hot)."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= label < logits.size:
        raise IndexError(f"label {label} out of range for {logits.size} classes")
    z = float(log_sum_exp_rows(logits[None, :])[0])
    grad = np.exp(logits - z)
    grad[label] -= 1.0
    return z - float(logits[label]), grad


class LinearClassifier:
    """Affine map from pooled embeddings to class logits."""

    def __init__(self, num_classes: int, in_dim: int, rng: Rng | None):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        if rng is None:
            w = np.zeros((num_classes, in_dim))
        else:
            w = rng_gaussian(rng, num_classes, in_dim,
                             std=1.0 / np.sqrt(in_dim))
        self.weights = Param("classifier.weights", w)
        self.bias = Param("classifier.bias", np.zeros((num_classes, 1)))

    def params(self):
        return [self.weights, self.bias]

    def forward_batch(self, embeds: np.ndarray) -> np.ndarray:
        # (B, E) -> (B, K)
        return embeds @ self.weights.value.T + self.bias.value[:, 0]

    def backward_batch(self, embeds: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
        self.weights.grad += dlogits.T @ embeds
        self.bias.grad[:, 0] += dlogits.sum(axis=0)
        return dlogits @ self.weights.value


@dataclass
class SgdConfig:
    """Momentum SGD recipe: step drops divide the rate by 10 and 100."""

    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 90
    drop1: int = 60
    drop2: int = 80

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.drop1 <= self.drop2:
            raise ValueError("need 0 <= drop1 <= drop2")

    def scaled(self, epochs: int) -> "SgdConfig":
        """Same recipe compressed to a different epoch budget, drop points
        kept at the same fractions of the run."""
        return replace(self, epochs=epochs,
                       drop1=epochs * self.drop1 // self.epochs,
                       drop2=epochs * self.drop2 // self.epochs)


def learning_rate(cfg: SgdConfig, epoch: int) -> float:
    if epoch < cfg.drop1:
        return cfg.lr0
    if epoch < cfg.drop2:
        return cfg.lr0 / 10.0
    return cfg.lr0 / 100.0


class Sgd:
    """v <- momentum * v + (grad + weight_decay * param); param -= lr * v.
    Gradients are cleared after every step."""

    def __init__(self, params: list[Param], cfg: SgdConfig):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = params
        self.cfg = cfg
        self.velocity = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, lr: float) -> None:
        for p in self.params:
            g = p.grad + self.cfg.weight_decay * p.value
            v = self.velocity[p.name]
            v *= self.cfg.momentum
            v += g
            p.value -= lr * v
            p.zero_grad()


@dataclass
class ModelConfig:
    in_dim: int
    num_classes: int
    encoder: str = ENCODER_TAP
    lde: LdeConfig | None = None
    frontend: ConvSpec | None = None
    freeze_dictionary: bool = False
    zero_dictionary: bool = False

    def __post_init__(self):
        if self.encoder not in (ENCODER_TAP, ENCODER_LDE):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.encoder == ENCODER_LDE and self.lde is None:
            raise ValueError("lde encoder needs an LdeConfig")
        if self.frontend is not None and self.frontend.in_dim != self.in_dim:
            raise DimensionError("frontend input dim does not match in_dim")
        embed = self.embed_dim
        if self.lde is not None and self.lde.feature_dim != embed:
            raise DimensionError(
                f"encoder feature_dim {self.lde.feature_dim} does not match "
                f"the pooled input dim {embed}")

    @property
    def embed_dim(self) -> int:
        return self.frontend.out_dim if self.frontend is not None else self.in_dim

    @property
    def encoder_dim(self) -> int:
        if self.encoder == ENCODER_LDE:
            return self.lde.num_components * self.embed_dim
        return self.embed_dim


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = {"in_dim": cfg.in_dim, "num_classes": cfg.num_classes,
         "encoder": cfg.encoder, "freeze_dictionary": cfg.freeze_dictionary,
         "zero_dictionary": cfg.zero_dictionary, "lde": None, "frontend": None}
    if cfg.lde is not None:
        d["lde"] = {"num_components": cfg.lde.num_components,
                    "feature_dim": cfg.lde.feature_dim,
                    "smoothing_mode": cfg.lde.smoothing_mode,
                    "beta": cfg.lde.beta,
                    "aggregation_mode": cfg.lde.aggregation_mode,
                    "length_normalize": cfg.lde.length_normalize}
    if cfg.frontend is not None:
        d["frontend"] = {"in_dim": cfg.frontend.in_dim,
                         "kernel": cfg.frontend.kernel,
                         "activation": cfg.frontend.activation,
                         "stages": [[s.channels, s.blocks, s.downsample]
                                    for s in cfg.frontend.stages]}
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    try:
        lde = LdeConfig(**d["lde"]) if d.get("lde") else None
        fe = None
        if d.get("frontend"):
            f = d["frontend"]
            stages = [StageSpec(channels=c, blocks=b, downsample=dn)
                      for c, b, dn in f["stages"]]
            fe = ConvSpec(in_dim=f["in_dim"], stages=stages,
                          kernel=f["kernel"], activation=f["activation"])
        return ModelConfig(in_dim=d["in_dim"], num_classes=d["num_classes"],
                           encoder=d["encoder"], lde=lde, frontend=fe,
                           freeze_dictionary=d.get("freeze_dictionary", False),
                           zero_dictionary=d.get("zero_dictionary", False))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config: {exc}") from exc


@dataclass
class BatchCache:
    frontend_saved: object
    member_caches: list
    embeds: np.ndarray


class Model:
    """Front-end + pooling encoder + linear classifier.

    Component initializers draw from separate child streams of the given
    generator, so models that share a seed get identical front-ends and
    classifiers regardless of which encoder sits in between.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        fe_rng, enc_rng, cls_rng = rng.split(0), rng.split(1), rng.split(2)
        self.frontend = (Frontend(cfg.frontend, fe_rng)
                         if cfg.frontend is not None else None)
        if cfg.encoder == ENCODER_LDE:
            self.dictionary = (Dictionary.zeros(cfg.lde) if cfg.zero_dictionary
                               else Dictionary.init(cfg.lde, enc_rng))
        else:
            self.dictionary = None
        self.classifier = LinearClassifier(cfg.num_classes, cfg.encoder_dim,
                                           cls_rng)

    def params(self) -> list[Param]:
        out = []
        if self.frontend is not None:
            out.extend(self.frontend.params())
        if self.dictionary is not None:
            out.extend(self.dictionary.params())
        out.extend(self.classifier.params())
        return out

    def trainable_params(self) -> list[Param]:
        frozen = set()
        if self.dictionary is not None and self.cfg.freeze_dictionary:
            frozen = {p.name for p in self.dictionary.params()}
        return [p for p in self.params() if p.name not in frozen]

    def _encode(self, x: np.ndarray):
        if self.cfg.encoder == ENCODER_LDE:
            enc, saved = lde_forward(x, self.dictionary, self.cfg.lde)
            return enc.flat, saved
        return tap_forward(x), x.shape[1]

    def _encode_backward(self, cache, dvec: np.ndarray) -> np.ndarray:
        if self.cfg.encoder == ENCODER_LDE:
            return lde_backward(cache, dvec, self.dictionary, self.cfg.lde)
        length = cache
        return np.tile((dvec / length)[:, None], (1, length))

    def forward_batch(self, feats: np.ndarray) -> tuple[np.ndarray, BatchCache]:
        """feats (B, D, L) -> logits (B, K) plus the backward cache."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 and feats.ndim != 3:
            raise DimensionError(f"expected (B, D, L) batch, got {feats.shape}")
        if feats.ndim == 2:
            feats = feats[None]
        if self.frontend is not None:
            hidden, fe_saved = self.frontend.forward_batch(feats)
        else:
            hidden, fe_saved = feats, None
        embeds, caches = [], []
        for member in hidden:
            vec, cache = self._encode(member)
            embeds.append(vec)
            caches.append(cache)
        embeds = np.stack(embeds)
        logits = self.classifier.forward_batch(embeds)
        return logits, BatchCache(fe_saved, caches, embeds)

    def backward_batch(self, cache: BatchCache, dlogits: np.ndarray) -> None:
        """Accumulates parameter gradients for a batch scored by
        forward_batch."""
        dembeds = self.classifier.backward_batch(cache.embeds, dlogits)
        dhidden = np.stack([self._encode_backward(c, g)
                            for c, g in zip(cache.member_caches, dembeds)])
        if self.frontend is not None:
            self.frontend.backward_batch(cache.frontend_saved, dhidden)

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()


def infer(model: Model, feats: np.ndarray) -> np.ndarray:
    """Class logits for one whole utterance (D x L), no cropping."""
    logits, _ = model.forward_batch(np.asarray(feats, dtype=np.float64)[None])
    return logits[0]


def batch_loss(model: Model, feats: np.ndarray, labels: np.ndarray,
               accumulate: bool = True) -> float:
    """Mean cross-entropy over one batch; optionally backprops it."""
    logits, cache = model.forward_batch(feats)
    num = logits.shape[0]
    total = 0.0
    dlogits = np.empty_like(logits)
    for b in range(num):
        loss_b, grad_b = cross_entropy(logits[b], int(labels[b]))
        total += loss_b
        dlogits[b] = grad_b / num
    if accumulate:
        model.backward_batch(cache, dlogits)
    return total / num


@dataclass
class TrainStep:
    step: int
    epoch: int
    loss: float
    smoothed: float


def train_model(model: Model, utts, sgd_cfg: SgdConfig, rng: Rng,
                batch_size: int = 32, policy: CropPolicy | None = None,
                smooth_window: int = 400,
                log_path=None) -> list[TrainStep]:
    """SGD over shuffled random-crop batches for sgd_cfg.epochs epochs.

    Writes one 'step<TAB>loss<TAB>smoothed' line per step to log_path when
    given; the smoothed value is the mean of the last smooth_window raw
    losses. Aborts with NumericalError on a non-finite loss.
    """
    if not utts:
        raise ValueError("no training utterances")
    if policy is None:
        policy = CropPolicy()
    optimizer = Sgd(model.trainable_params(), sgd_cfg)
    recent = deque(maxlen=smooth_window)
    history = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        step = 0
        for epoch in range(sgd_cfg.epochs):
            lr = learning_rate(sgd_cfg, epoch)
            for feats, labels in make_batches(utts, batch_size, policy,
                                              rng.split(epoch)):
                loss = batch_loss(model, feats, labels)
                if not np.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss {loss} at step {step} "
                        f"(epoch {epoch}); lower the learning rate or "
                        f"check the input data")
                recent.append(loss)
                smoothed = float(np.mean(recent))
                history.append(TrainStep(step, epoch, loss, smoothed))
                if log_fh is not None:
                    log_fh.write(f"{step}\t{loss:.17g}\t{smoothed:.17g}\n")
                optimizer.step(lr)
                model.zero_grads()  # frozen params accumulate too
                step += 1
    finally:
        if log_fh is not None:
            log_fh.close()
    return history


# ---------------------------------------------------------------------------
# checkpoint file format: magic, version, then (tag, payload) sections

def _pack_block(data: bytes) -> bytes:
    return struct.pack("<Q", len(data)) + data


def _pack_params(params: list[Param]) -> bytes:
    out = [struct.pack("<I", len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        arr = np.ascontiguousarray(p.value, dtype="<f8")
        out.append(struct.pack("<I", len(name)))
        out.append(name)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def _unpack_params(blob: bytes) -> dict[str, np.ndarray]:
    try:
        (count,) = struct.unpack_from("<I", blob, 0)
        off = 4
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
            out[name] = arr.reshape(shape).copy()
            off += n * 8
        return out
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt parameter section: {exc}") from exc


def _pack_gmms(gmms: list[GmmModel]) -> bytes:
    out = [struct.pack("<I", len(gmms))]
    for m in gmms:
        comp, dim = m.means.shape
        out.append(struct.pack("<II", comp, dim))
        for arr in (m.weights.reshape(-1), m.means, m.variances):
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def _unpack_gmms(blob: bytes) -> list[GmmModel]:
    try:
        (count,) = struct.unpack_from("<I", blob, 0)
        off = 4
        models = []
        for _ in range(count):
            comp, dim = struct.unpack_from("<II", blob, off)
            off += 8
            w = np.frombuffer(blob, dtype="<f8", count=comp, offset=off).copy()
            off += comp * 8
            mu = np.frombuffer(blob, dtype="<f8", count=comp * dim,
                               offset=off).reshape(comp, dim).copy()
            off += comp * dim * 8
            var = np.frombuffer(blob, dtype="<f8", count=comp * dim,
                                offset=off).reshape(comp, dim).copy()
            off += comp * dim * 8
            models.append(GmmModel(weights=w, means=mu, variances=var))
        return models
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt mixture section: {exc}") from exc


@dataclass
class Checkpoint:
    version: int
    meta: dict
    params: dict[str, np.ndarray] | None = None
    gmms: list[GmmModel] | None = None


def save_checkpoint(path, meta: dict, params: list[Param] | None = None,
                    gmms: list[GmmModel] | None = None) -> None:
    sections = [(b"meta", json.dumps(meta, sort_keys=True).encode("utf-8"))]
    if params is not None:
        sections.append((b"params", _pack_params(params)))
    if gmms is not None:
        sections.append((b"gmm", _pack_gmms(gmms)))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(sections)))
        for tag, payload in sections:
            fh.write(struct.pack("<I", len(tag)))
            fh.write(tag)
            fh.write(_pack_block(payload))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, num_sections = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    meta, params, gmms = None, None, None
    for _ in range(num_sections):
        if off + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated section table")
        (tag_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        tag = blob[off:off + tag_len]
        off += tag_len
        if off + 8 > len(blob):
            raise CheckpointError(f"{path}: truncated section {tag!r}")
        (payload_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        if off + payload_len > len(blob):
            raise CheckpointError(f"{path}: truncated section {tag!r}")
        payload = blob[off:off + payload_len]
        off += payload_len
        if tag == b"meta":
            try:
                meta = json.loads(payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CheckpointError(f"{path}: corrupt meta: {exc}") from exc
        elif tag == b"params":
            params = _unpack_params(payload)
        elif tag == b"gmm":
            gmms = _unpack_gmms(payload)
        else:
            raise CheckpointError(f"{path}: unknown section {tag!r}")
    if meta is None:
        raise CheckpointError(f"{path}: missing meta section")
    return Checkpoint(version=version, meta=meta, params=params, gmms=gmms)


def save_model(path, model: Model, epoch: int | None = None,
               rng_state: dict | None = None,
               extra_meta: dict | None = None) -> None:
    meta = {"kind": "model", "config": model_config_to_dict(model.cfg),
            "epoch": epoch, "rng": rng_state}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, meta, params=model.params())


def load_model(path) -> tuple[Model, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "model" or ckpt.params is None:
        raise CheckpointError(f"{path}: not a model checkpoint")
    cfg = model_config_from_dict(ckpt.meta.get("config", {}))
    model = Model(cfg, Rng(0))
    expected = {p.name for p in model.params()}
    if expected != set(ckpt.params):
        missing = sorted(expected - set(ckpt.params))
        extra = sorted(set(ckpt.params) - expected)
        raise CheckpointError(
            f"{path}: parameter names do not match the config "
            f"(missing {missing}, unexpected {extra})")
    for p in model.params():
        saved = ckpt.params[p.name]
        if saved.shape != p.value.shape:
            raise CheckpointError(
                f"{path}: {p.name} has shape {saved.shape}, "
                f"expected {p.value.shape}")
        p.value[...] = saved
    return model, ckpt.meta


def save_gmm_bank(path, gmms: list[GmmModel], meta: dict | None = None) -> None:
    full = {"kind": "gmm"}
    if meta:
        full.update(meta)
    save_checkpoint(path, full, gmms=gmms)


def load_gmm_bank(path) -> tuple[list[GmmModel], dict]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "gmm" or ckpt.gmms is None:
        raise CheckpointError(f"{path}: not a mixture checkpoint")
    return ckpt.gmms, ckpt.meta
