"""Patch-level flake classification and thickness regression on source data."""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig, hash_obj
from .neural import Adam, Conv2d, Graph, Linear, Module, Tensor, checkpoint, ops
from .synthgen import LAYER_CLASSES, Dataset

log = logging.getLogger(__name__)


class TaskError(ValueError):
    pass


def quantize_thickness(thickness_nm: float, bin_edges) -> int:
    """Class of a thickness given sorted edges e_0 < ... < e_{m-1}.

    Class 0 holds everything below e_0; class i (i >= 1) is the right-open
    bin [e_{i-1}, e_i), and class m everything at or above the last edge.
    """
    edges = list(bin_edges)
    if not edges:
        raise TaskError("need at least one bin edge")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise TaskError("bin edges must be strictly increasing")
    return bisect.bisect_right(edges, thickness_nm)


def layer_bin_edges(per_layer_nm: float, max_layers: int = 12) -> list:
    """Edges halfway between layer counts, giving classes 0..max_layers-1 for 1..max_layers layers."""
    return [(n + 0.5) * per_layer_nm for n in range(1, max_layers)]


@dataclass
class PatchSet:
    """Patches in NCHW layout with per-patch labels and provenance."""

    x: np.ndarray
    layer_class: np.ndarray
    layer_count: np.ndarray
    thickness_nm: np.ndarray
    material: np.ndarray
    image_id: np.ndarray
    center: np.ndarray

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "PatchSet":
        return PatchSet(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def patch_center(labels: np.ndarray, k: int, half: int):
    """Flake pixel nearest the flake centroid whose patch fits in the image."""
    h, w = labels.shape
    ys, xs = np.nonzero(labels == k)
    ok = (ys >= half) & (ys <= h - half) & (xs >= half) & (xs <= w - half)
    if not ok.any():
        return None
    ys, xs = ys[ok], xs[ok]
    cy, cx = np.nonzero(labels == k)[0].mean(), np.nonzero(labels == k)[1].mean()
    i = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
    return int(ys[i]), int(xs[i])


def extract_patches(ds: Dataset, size: int = 32, images=None, dtype=np.float32) -> PatchSet:
    """One patch per flake whose centered window fits inside its image."""
    half = size // 2
    by_image: dict[int, list] = {}
    for a in ds.instances:
        by_image.setdefault(a["image_id"], []).append(a)
    xs, cls, cnt, thk, mat, iid, ctr = [], [], [], [], [], [], []
    ids = range(len(ds.images)) if images is None else images
    for image_id in ids:
        anns = by_image.get(image_id)
        if not anns:
            continue
        img = ds.image(image_id)
        labels = ds.label_map(image_id)
        for a in sorted(anns, key=lambda a: a["label"]):
            c = patch_center(labels, a["label"], half)
            if c is None:
                continue
            y, x = c
            xs.append(img[y - half : y + half, x - half : x + half].transpose(2, 0, 1))
            cls.append(LAYER_CLASSES.index(a["layer_class"]))
            cnt.append(a["layer_count"])
            thk.append(a["thickness_nm"])
            mat.append(a["material_id"])
            iid.append(image_id)
            ctr.append(c)
    if not xs:
        raise TaskError(f"no usable patches in dataset {ds.root}")
    return PatchSet(
        np.stack(xs).astype(dtype),
        np.array(cls),
        np.array(cnt),
        np.array(thk),
        np.array(mat),
        np.array(iid),
        np.array(ctr),
    )


def split_indices(n: int, val_fraction: float, seed: int):
    perm = np.random.default_rng([seed, 0x5917]).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class Backbone(Module):
    def __init__(self, rng, dtype=np.float32):
        self.conv1 = Conv2d(3, 16, 3, stride=2, pad=1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(16, 32, 3, stride=2, pad=1, rng=rng, dtype=dtype)

    def __call__(self, x):
        return ops.avgpool_global(ops.relu(self.conv2(ops.relu(self.conv1(x)))))


class TaskHead(Module):
    """Shared conv backbone with a class head and a thickness head.

    Inputs are scaled by a fixed constant and the thickness head predicts in
    units of ``thickness_scale`` nm; both constants are stored with the model.
    """

    input_scale = 4.0

    def __init__(self, num_classes=3, seed=0, dtype=np.float32, thickness_scale=1.0):
        rng = np.random.default_rng([seed, 0x7A5C])
        self.num_classes = num_classes
        self.thickness_scale = float(thickness_scale)
        self.backbone = Backbone(rng, dtype)
        self.class_head = Linear(32, num_classes, rng=rng, dtype=dtype)
        self.thickness_head = Linear(32, 1, rng=rng, dtype=dtype)

    def features(self, x: Tensor, feature_affine=None) -> Tensor:
        f = self.backbone(ops.scale(x, self.input_scale))
        if feature_affine is not None:
            f = ops.channel_affine(f, *feature_affine)
        return f

    def logits(self, x: Tensor, feature_affine=None) -> Tensor:
        return self.class_head(self.features(x, feature_affine))

    def thickness(self, x: Tensor, feature_affine=None) -> Tensor:
        return self.thickness_head(self.features(x, feature_affine))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def digest(self) -> str:
        return checkpoint.digest(self.state_dict())


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def predict_logits(model: TaskHead, x: np.ndarray, batch_size: int = 256, feature_affine=None) -> np.ndarray:
    out = [model.logits(Tensor(x[i : i + batch_size]), feature_affine).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64)


def labels_for(patches: PatchSet, cfg: TrainConfig, bin_edges=None) -> np.ndarray:
    if cfg.label_mode == "class":
        return patches.layer_class
    edges = bin_edges if bin_edges is not None else layer_bin_edges(float(patches.thickness_nm.min() / patches.layer_count.min()))
    return np.array([quantize_thickness(t, edges) for t in patches.thickness_nm])


def train_source(patches: PatchSet, cfg: TrainConfig, seed: int = 0, labels=None):
    """Cross-entropy training of the backbone and class head.

    Returns ``(model, metrics)``; metrics carry per-epoch loss and the
    train/val accuracies. Fully determined by ``seed``.
    """
    if len(patches) == 0:
        raise TaskError("empty dataset")
    y = labels_for(patches, cfg) if labels is None else np.asarray(labels)
    num_classes = cfg.num_classes
    if y.min() < 0 or y.max() >= num_classes:
        raise TaskError(f"labels must lie in [0, {num_classes})")
    tr, va = split_indices(len(patches), cfg.val_fraction, seed)
    # thickness head works in layer-equivalents, where smooth-L1 acts like L1 at the one-layer scale
    unit = float(np.median(patches.thickness_nm / np.maximum(patches.layer_count, 1))) or 1.0
    model = TaskHead(num_classes, seed=seed, thickness_scale=unit)
    params = model.backbone.parameters() + model.class_head.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([seed, 0xBA7C])
    history = []
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in _batches(len(tr), cfg.batch_size, rng):
            b = tr[idx]
            opt.zero_grad()
            with Graph() as g:
                loss = ops.cross_entropy(model.logits(Tensor(patches.x[b])), y[b])
            g.backward(loss)
            opt.step()
            total += float(loss.data) * len(b)
            seen += len(b)
        history.append(total / seen)
        log.info("epoch %d loss %.4f", epoch, history[-1])
    acc = lambda idx: float(np.mean(predict_logits(model, patches.x[idx]).argmax(1) == y[idx])) if len(idx) else float("nan")
    metrics = {"train_accuracy": acc(tr), "val_accuracy": acc(va), "loss_history": history, "n_train": int(len(tr)), "n_val": int(len(va))}
    return model, metrics


def train_thickness(model: TaskHead, patches: PatchSet, cfg: TrainConfig, seed: int = 0):
    """Fit only the thickness head on frozen backbone features with smooth-L1.

    Targets are thickness in units of ``model.thickness_scale``; the reported
    MAE is in nm on the held-out split.
    """
    if len(patches) == 0:
        raise TaskError("empty dataset")
    before = checkpoint.digest(model.backbone.state_dict())
    tr, va = split_indices(len(patches), cfg.val_fraction, seed)
    feats = features_of(model, patches.x)
    target = (patches.thickness_nm / model.thickness_scale)[:, None]
    head = model.thickness_head
    # fit on standardized features, then fold the standardization into the head
    mu = feats[tr].mean(axis=0) if len(tr) else np.zeros(feats.shape[1], feats.dtype)
    sd = feats[tr].std(axis=0) + 1e-6 if len(tr) else np.ones(feats.shape[1], feats.dtype)
    z = ((feats - mu) / sd).astype(feats.dtype)
    if len(tr):
        # warm start from the ridge solution; smooth-L1 epochs refine it
        a = np.c_[z[tr].astype(np.float64), np.ones(len(tr))]
        reg = 1e-3 * len(tr) * np.eye(a.shape[1])
        reg[-1, -1] = 0.0
        sol = np.linalg.solve(a.T @ a + reg, a.T @ target[tr, 0])
        head.weight.data = sol[None, :-1].astype(feats.dtype)
        head.bias.data = sol[-1:].astype(feats.dtype)
    opt = Adam(head.parameters(), lr=cfg.thickness_lr, weight_decay=0.0)
    rng = np.random.default_rng([seed, 0x7410])
    for epoch in range(cfg.thickness_epochs):
        opt.lr = cfg.thickness_lr * (1 - epoch / cfg.thickness_epochs)
        for idx in _batches(len(tr), cfg.batch_size, rng):
            b = tr[idx]
            opt.zero_grad()
            with Graph() as g:
                loss = ops.smooth_l1(head(Tensor(z[b])), target[b].astype(feats.dtype))
            g.backward(loss)
            opt.step()
    w = head.weight.data / sd
    head.bias.data = (head.bias.data - w @ mu).astype(feats.dtype)
    head.weight.data = w.astype(feats.dtype)
    if checkpoint.digest(model.backbone.state_dict()) != before:
        raise TaskError("backbone changed during thickness training")
    pred = predict_thickness_from_features(model, feats)
    mae = lambda idx: float(np.mean(np.abs(pred[idx] - patches.thickness_nm[idx]))) if len(idx) else float("nan")
    return model, {"train_mae_nm": mae(tr), "val_mae_nm": mae(va), "metric": "mean absolute error (nm)"}


def features_of(model: TaskHead, x: np.ndarray, batch_size: int = 256, feature_affine=None) -> np.ndarray:
    return np.concatenate([model.features(Tensor(x[i : i + batch_size]), feature_affine).data for i in range(0, len(x), batch_size)])


def predict_thickness_from_features(model: TaskHead, feats: np.ndarray) -> np.ndarray:
    return model.thickness_head(Tensor(feats)).data[:, 0].astype(np.float64) * model.thickness_scale


def predict_thickness(model: TaskHead, x: np.ndarray, feature_affine=None) -> np.ndarray:
    return predict_thickness_from_features(model, features_of(model, x, feature_affine=feature_affine))


def summarize(pred, y, num_classes, materials=None, thickness_pred=None, thickness_true=None) -> dict:
    pred = np.asarray(pred)
    y = np.asarray(y)
    conf = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(conf, (y, pred), 1)
    per_class = [float(conf[c, c] / conf[c].sum()) if conf[c].sum() else None for c in range(num_classes)]
    out = {
        "accuracy": float(np.mean(pred == y)),
        "per_class_accuracy": per_class,
        "confusion_matrix": conf.tolist(),
        "n": int(len(y)),
    }
    if materials is not None:
        out["per_material_accuracy"] = {
            str(m): float(np.mean(pred[materials == m] == y[materials == m])) for m in sorted(set(materials.tolist()))
        }
    if thickness_pred is not None:
        out["thickness_mae_nm"] = float(np.mean(np.abs(np.asarray(thickness_pred) - np.asarray(thickness_true))))
    return out


def evaluate(model: TaskHead, patches: PatchSet, transform=None, labels=None, with_thickness=True, feature_affine=None) -> dict:
    """Accuracy, confusion matrix and thickness MAE, plus the per-sample dump.

    ``transform`` maps an NCHW batch (numpy) to the images the task model
    should see, e.g. an adaptation network; None evaluates directly.
    ``feature_affine`` is an optional (scale, shift) pair applied to the
    pooled backbone features.
    """
    y = patches.layer_class if labels is None else np.asarray(labels)
    if y.max(initial=0) >= model.num_classes:
        raise TaskError(f"labels exceed the model's {model.num_classes} classes")
    x = patches.x if transform is None else transform(patches.x)
    logits = predict_logits(model, x, feature_affine=feature_affine)
    pred = logits.argmax(axis=1)
    tpred = predict_thickness(model, x, feature_affine) if with_thickness else None
    report = summarize(pred, y, model.num_classes, patches.material, tpred, patches.thickness_nm if with_thickness else None)
    report["predictions"] = {
        "label": y.tolist(),
        "pred": pred.tolist(),
        "thickness_nm": patches.thickness_nm.tolist(),
        "thickness_pred_nm": None if tpred is None else [float(v) for v in tpred],
    }
    return report


def dataset_hash(ds: Dataset) -> str:
    return ds.manifest.get("annotations_sha256") or hash_obj(ds.instances)


def save_model(path, model: TaskHead) -> str:
    state = model.state_dict()
    state["meta.num_classes"] = np.array([model.num_classes], dtype=np.float32)
    state["meta.thickness_scale"] = np.array([model.thickness_scale], dtype=np.float32)
    return checkpoint.save(path, state)


def load_model(path) -> TaskHead:
    state = checkpoint.load(path)
    n = int(state.pop("meta.num_classes")[0])
    scale = float(state.pop("meta.thickness_scale")[0])
    model = TaskHead(n, thickness_scale=scale)
    model.load_state_dict(state)
    return model
