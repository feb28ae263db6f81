"""Desk-scale end-to-end demonstration: linear feature extractor ->
Fisher-vector layer -> linear classifier, trained jointly. The mixture
parameters update by streaming EM each batch; only the extractor and
classifier receive gradients. Also hosts the GAP-concatenation baseline
and the separate-estimation (full-EM) comparison arm."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import FeatureBatch
from .encoding import encode, encode_vjp, normalize_fv
from .gmm import DiagGmm, InitSpec, em_full, mean_log_likelihood
from .parts import filter_by_norm
from .streaming import EmaState, bias_corrected, init_streaming, streaming_step
from .synth import PartImage, SyntheticPartDataset


@dataclass(frozen=True)
class TrainConfig:
    """Defaults mirror the reference schedule: step decay by 0.1 after
    epochs 20 and 40 of 60, base learning rate 1e-4, batch size 64.
    Toy runs typically override epochs/lr."""

    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-4
    decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (20, 40)
    lam: float = 0.9
    k: int = 2
    feature_dim: int = 2
    seed: int = 0
    fuse_global_head: bool = False

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e in self.decay_epochs:
            if epoch >= e:
                lr *= self.decay_factor
        return lr


@dataclass
class ToyModel:
    extractor_w: np.ndarray       # (D_in, D)
    extractor_b: np.ndarray       # (D,)
    gmm_state: EmaState
    classifier_w: np.ndarray      # (2KD, C)
    classifier_b: np.ndarray      # (C,)
    # optional second head over mean-pooled raw parts; off by default
    global_w: Optional[np.ndarray] = None
    global_b: Optional[np.ndarray] = None

    @property
    def fuses(self) -> bool:
        return self.global_w is not None


class NonFiniteLossError(RuntimeError):
    def __init__(self, loss, snapshot):
        super().__init__(f"non-finite loss {loss}; diagnostic snapshot attached")
        self.snapshot = snapshot


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def extract_features(model: ToyModel, images: list[PartImage]) -> FeatureBatch:
    """Apply the linear extractor to every part of every image and run
    the per-image activation-norm filter."""
    data = np.concatenate([img.parts for img in images]) @ model.extractor_w + model.extractor_b
    groups = np.concatenate(
        [np.full(img.parts.shape[0], i, dtype=np.int64) for i, img in enumerate(images)]
    )
    filtered, _ = filter_by_norm(FeatureBatch(data, groups))
    return filtered


def init_toy_model(dataset: SyntheticPartDataset, cfg: TrainConfig) -> ToyModel:
    rng = np.random.default_rng(cfg.seed)
    d_in, d = dataset.d_in, cfg.feature_dim
    model = ToyModel(
        extractor_w=rng.standard_normal((d_in, d)) / np.sqrt(d_in),
        extractor_b=np.zeros(d),
        gmm_state=None,  # filled below, needs extracted features
        classifier_w=rng.standard_normal((2 * cfg.k * d, dataset.num_classes)) * 0.01,
        classifier_b=np.zeros(dataset.num_classes),
    )
    if cfg.fuse_global_head:
        model.global_w = rng.standard_normal((d_in, dataset.num_classes)) * 0.01
        model.global_b = np.zeros(dataset.num_classes)
    first = extract_features(model, dataset.train[: max(cfg.batch_size, 4 * cfg.k)])
    model.gmm_state = init_streaming(
        first, cfg.k, cfg.lam, InitSpec(strategy="kmeans-plus-plus", seed=cfg.seed)
    )
    return model


@dataclass
class ForwardResult:
    fvs: np.ndarray               # (B, 2KD)
    logits: np.ndarray            # (B, C)
    loss: float
    gmm: DiagGmm
    feats: list[np.ndarray]       # extracted parts per image (pre-filter)
    kept: list[np.ndarray]        # boolean keep mask per image


def forward(model: ToyModel, images: list[PartImage], labels: np.ndarray) -> ForwardResult:
    gmm = bias_corrected(model.gmm_state)
    fvs, feats, kept = [], [], []
    for img in images:
        f = img.parts @ model.extractor_w + model.extractor_b
        norms = np.linalg.norm(f, axis=1)
        mask = norms > norms.mean()
        if not mask.any():
            mask = np.ones(f.shape[0], dtype=bool)
        fvs.append(encode(gmm, f[mask]))
        feats.append(f)
        kept.append(mask)
    fvs = np.stack(fvs)
    logits = fvs @ model.classifier_w + model.classifier_b
    if model.fuses:
        pooled = np.stack([img.parts.mean(axis=0) for img in images])
        logits = logits + pooled @ model.global_w + model.global_b
    probs = _softmax(logits)
    loss = float(-np.mean(np.log(probs[np.arange(len(images)), labels] + 1e-300)))
    if not np.isfinite(loss):
        raise NonFiniteLossError(loss, {"logits": logits, "gmm": gmm})
    return ForwardResult(fvs=fvs, logits=logits, loss=loss, gmm=gmm, feats=feats, kept=kept)


def _backward(model: ToyModel, images: list[PartImage], labels: np.ndarray,
              fwd: ForwardResult) -> dict[str, np.ndarray]:
    b = len(images)
    dlogits = _softmax(fwd.logits)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    grads = {
        "classifier_w": fwd.fvs.T @ dlogits,
        "classifier_b": dlogits.sum(axis=0),
        "extractor_w": np.zeros_like(model.extractor_w),
        "extractor_b": np.zeros_like(model.extractor_b),
    }
    dfvs = dlogits @ model.classifier_w.T
    for i, img in enumerate(images):
        mask = fwd.kept[i]
        dfeat = np.zeros_like(fwd.feats[i])
        # dropped rows never enter the encode graph: zero gradient
        dfeat[mask] = encode_vjp(fwd.gmm, fwd.feats[i][mask], dfvs[i])
        grads["extractor_w"] += img.parts.T @ dfeat
        grads["extractor_b"] += dfeat.sum(axis=0)
    if model.fuses:
        pooled = np.stack([img.parts.mean(axis=0) for img in images])
        grads["global_w"] = pooled.T @ dlogits
        grads["global_b"] = dlogits.sum(axis=0)
    return grads


def train_step(model: ToyModel, images: list[PartImage], labels: np.ndarray,
               lr: float, update_gmm: bool = True) -> dict:
    """One joint step: EM update on the filtered batch features first,
    then encode with the post-update model, then gradient updates of the
    extractor and classifier only."""
    if update_gmm:
        filtered = extract_features(model, images)
        model.gmm_state = streaming_step(model.gmm_state, filtered)
    fwd = forward(model, images, labels)
    grads = _backward(model, images, labels, fwd)
    for name, g in grads.items():
        setattr(model, name, getattr(model, name) - lr * g)
    acc = float(np.mean(fwd.logits.argmax(axis=1) == labels))
    return {"loss": fwd.loss, "accuracy": acc, "gmm_loglik": None, "gmm": fwd.gmm}


def train(model: ToyModel, dataset: SyntheticPartDataset, cfg: TrainConfig,
          images: Optional[list[PartImage]] = None,
          record_features: bool = False) -> list[dict]:
    """Full training loop; returns one metrics record per step. With
    record_features, each record also keeps the filtered batch features
    entering the EM update (for bit-exact replay checks)."""
    images = dataset.train if images is None else images
    labels = np.asarray([img.label for img in images], dtype=np.int64)
    rng = np.random.default_rng(cfg.seed + 1)
    metrics: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(images))
        for start in range(0, len(images), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [images[i] for i in idx]
            if record_features:
                recorded = extract_features(model, batch)
            rec = train_step(model, batch, labels[idx], lr)
            rec.update(step=step, epoch=epoch, lr=lr,
                       gmm_loglik=mean_log_likelihood(rec.pop("gmm"), extract_features(model, batch)))
            if record_features:
                rec["filtered_features"] = recorded
            metrics.append(rec)
            step += 1
    return metrics


def evaluate(predict_logits, images: list[PartImage], labels: np.ndarray
             ) -> tuple[float, dict[int, float]]:
    """Top-1 accuracy plus per-class breakdown for any logits function."""
    logits = predict_logits(images)
    pred = logits.argmax(axis=1)
    acc = float(np.mean(pred == labels))
    per_class = {
        int(c): float(np.mean(pred[labels == c] == c)) for c in np.unique(labels)
    }
    return acc, per_class


def model_logits(model: ToyModel):
    def predict(images: list[PartImage]) -> np.ndarray:
        labels = np.zeros(len(images), dtype=np.int64)
        return forward(model, images, labels).logits
    return predict


def fill_missing_parts(images: list[PartImage], p_max: int,
                       shuffle_seed: Optional[int] = None) -> list[PartImage]:
    """Complement missing part slots with zero vectors; with a shuffle
    seed, assign observed parts to slots in per-image random order."""
    rng = None if shuffle_seed is None else np.random.default_rng(shuffle_seed)
    out = []
    for img in images:
        d_in = img.parts.shape[1]
        full = np.zeros((p_max, d_in))
        slots = img.slots if rng is None else rng.permutation(p_max)[: img.slots.size]
        full[slots] = img.parts
        out.append(PartImage(parts=full, slots=np.arange(p_max, dtype=np.int64), label=img.label))
    return out


def train_linear_classifier(x: np.ndarray, y: np.ndarray, num_classes: int,
                            cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Softmax regression by plain gradient descent on the same step-decay
    schedule as the joint model."""
    rng = np.random.default_rng(cfg.seed)
    w = rng.standard_normal((x.shape[1], num_classes)) * 0.01
    b = np.zeros(num_classes)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = x[idx] @ w + b
            dlogits = _softmax(logits)
            dlogits[np.arange(idx.size), y[idx]] -= 1.0
            dlogits /= idx.size
            w -= lr * (x[idx].T @ dlogits)
            b -= lr * dlogits.sum(axis=0)
    return w, b


def gap_concat_features(images: list[PartImage], p_max: int,
                        extractor_w: np.ndarray, extractor_b: np.ndarray,
                        part_order: str = "ordered",
                        shuffle_seed: int = 0) -> np.ndarray:
    """Per part slot, average the part's extracted features (one vector
    per part here, so the pool is the vector itself); concatenate in slot
    order with zeros for missing slots."""
    if part_order not in ("ordered", "shuffled"):
        raise ValueError(f"unknown part order {part_order!r}")
    rng = np.random.default_rng(shuffle_seed)
    d = extractor_w.shape[1]
    out = np.zeros((len(images), p_max * d))
    for i, img in enumerate(images):
        feats = img.parts @ extractor_w + extractor_b
        slots = img.slots
        if part_order == "shuffled":
            slots = rng.permutation(p_max)[: img.slots.size]
        for s, f in zip(slots, feats):
            out[i, s * d:(s + 1) * d] = f
    return out


def gap_concat_baseline(dataset: SyntheticPartDataset, cfg: TrainConfig,
                        extractor_w: np.ndarray, extractor_b: np.ndarray,
                        part_order: str = "ordered") -> float:
    """Fixed-length GAP-concat vectors with zero filling, plus a linear
    softmax classifier on the same schedule. Returns test accuracy."""
    p_max = dataset.parts_per_image_max
    xtr = gap_concat_features(dataset.train, p_max, extractor_w, extractor_b,
                              part_order, shuffle_seed=cfg.seed)
    xte = gap_concat_features(dataset.test, p_max, extractor_w, extractor_b,
                              part_order, shuffle_seed=cfg.seed + 1)
    ytr = np.asarray([img.label for img in dataset.train])
    yte = np.asarray([img.label for img in dataset.test])
    w, b = train_linear_classifier(xtr, ytr, dataset.num_classes, cfg)
    return float(np.mean((xte @ w + b).argmax(axis=1) == yte))


def conventional_pipeline_oracle(dataset: SyntheticPartDataset, k: int, cfg: TrainConfig,
                                 extractor_w: np.ndarray, extractor_b: np.ndarray) -> float:
    """Separate-estimation arm: frozen extractor, full-batch EM on all
    training features, normalized Fisher vectors, linear classifier.
    Returns test accuracy."""
    def encode_split(images):
        data = np.concatenate([img.parts for img in images]) @ extractor_w + extractor_b
        groups = np.concatenate(
            [np.full(img.parts.shape[0], i, dtype=np.int64) for i, img in enumerate(images)]
        )
        filtered, _ = filter_by_norm(FeatureBatch(data, groups))
        return filtered

    train_feats = encode_split(dataset.train)
    result = em_full(train_feats, k, InitSpec(strategy="kmeans-plus-plus", seed=cfg.seed),
                     max_iters=100, tol=1e-7)

    def fv_matrix(images):
        filtered = encode_split(images)
        return np.stack([
            normalize_fv(encode(result.gmm, filtered.data[filtered.groups == i]),
                         apply_power=True, apply_l2=True)
            if np.any(filtered.groups == i) else np.zeros(2 * k * extractor_w.shape[1])
            for i in range(len(images))
        ])

    xtr, xte = fv_matrix(dataset.train), fv_matrix(dataset.test)
    ytr = np.asarray([img.label for img in dataset.train])
    yte = np.asarray([img.label for img in dataset.test])
    w, b = train_linear_classifier(xtr, ytr, dataset.num_classes, cfg)
    return float(np.mean((xte @ w + b).argmax(axis=1) == yte))
