"""Physics-informed adaptation: white-balance estimation, spectral inversion,
re-rendering under the source sensor, and source-free entropy adaptation.

Inference path for a target batch ``x`` (NCHW, linear RGB)::

    G, x_bar = color_normalize(colornorm, x)      # x_bar = x / G
    R_hat    = spec_invert(specinv, x_bar)        # per-pixel reflectance
    x_src    = source_transform(R_hat, sensor)    # rendered under the source sensor
    logits   = task_model.logits(x_src)

Only the ColorNorm and SpecInv parameters move during adaptation; the task
model is frozen and its digest is checked before and after.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import colorimetry as cm
from .config import AdaptConfig, PretrainConfig
from .neural import Adam, Conv2d, Graph, Linear, Module, Tensor, checkpoint, ops
from .optics import ConfigurationError
from .synthgen import Dataset, SceneRenderer
from .tasks import TaskHead

log = logging.getLogger(__name__)


class AdaptationError(RuntimeError):
    pass


class ColorNormNet(Module):
    """conv 3->16, ReLU, global average, fc 16->3 giving log gains z; G = exp(z).

    The conv sees log(max(x, floor)), where a per-channel gain is an additive
    shift. With ``gamma`` a fourth output gives log(gamma), applied as
    x ** (1/gamma) before the gains are divided out.
    """

    log_floor = 1e-3

    def __init__(self, seed: int = 0, gamma: bool = False, dtype=np.float32):
        rng = np.random.default_rng([seed, 0xC0102])
        self.gamma = gamma
        self.conv = Conv2d(3, 16, 3, stride=1, pad=1, rng=rng, dtype=dtype)
        self.fc = Linear(16, 4 if gamma else 3, rng=rng, dtype=dtype)
        # start close to G = 1 so an untrained net is a near identity
        self.fc.weight.data *= 0.1

    def log_gain(self, x: Tensor) -> Tensor:
        # the image is data, never a parameter, so the log needs no gradient
        lx = Tensor(np.log(np.maximum(x.data, self.log_floor)).astype(x.data.dtype))
        return self.fc(ops.avgpool_global(ops.relu(self.conv(lx))))


class SpecInvNet(Module):
    """Encoder-decoder from linear RGB to per-pixel reflectance in (0, 1).

    Two stride-2 convs down, two nearest-neighbour upsamplings with convs up;
    the last conv has one output channel per wavelength (``d_out``).
    """

    input_scale = 4.0

    def __init__(self, d_out: int, seed: int = 0, dtype=np.float32, init_reflectance: float = 0.2):
        if d_out < 1:
            raise ConfigurationError("SpecInv needs at least one output channel")
        rng = np.random.default_rng([seed, 0x5BEC])
        self.d_out = d_out
        self.enc1 = Conv2d(3, 16, 3, stride=2, pad=1, rng=rng, dtype=dtype)
        self.enc2 = Conv2d(16, 32, 3, stride=2, pad=1, rng=rng, dtype=dtype)
        self.dec1 = Conv2d(32, 16, 3, stride=1, pad=1, rng=rng, dtype=dtype)
        self.dec2 = Conv2d(16, d_out, 3, stride=1, pad=1, rng=rng, dtype=dtype)
        self.dec2.weight.data *= 0.1
        self.dec2.bias.data[:] = math.log(init_reflectance / (1 - init_reflectance))

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.relu(self.enc1(ops.scale(x, self.input_scale)))
        h = ops.relu(self.enc2(h))
        h = ops.relu(self.dec1(ops.upsample_nearest2x(h)))
        return ops.sigmoid(self.dec2(ops.upsample_nearest2x(h)))


def color_normalize(net: ColorNormNet, x: Tensor):
    """Return ``(G, x_bar)`` with G (N x 3) from the network and x_bar = x / G."""
    x = ops.as_tensor(x)
    z = net.log_gain(x)
    if net.gamma:
        inv_gamma = ops.exp(ops.scale(ops.columns(z, 3, 4), -1.0))
        x = ops.power(x, inv_gamma)
        z = ops.columns(z, 0, 3)
    G = ops.exp(z)
    x_bar = ops.scale_channels(x, ops.exp(ops.scale(z, -1.0)))
    return G, x_bar


def spec_invert(net: SpecInvNet, x_bar: Tensor) -> Tensor:
    """Reflectance estimate with the input's spatial size.

    Inputs whose sides are not multiples of 4 are zero-padded at the
    bottom/right and the output cropped back.
    """
    h, w = x_bar.shape[2:]
    ph, pw = -h % 4, -w % 4
    return ops.crop(net(ops.pad_zero(x_bar, ph, pw)), h, w)


def broadcast_spectrum(R: Tensor, d: int) -> Tensor:
    """Repeat a single-channel reflectance across ``d`` wavelengths."""
    if R.shape[1] != 1:
        raise ConfigurationError(f"broadcast_spectrum expects one channel, got {R.shape[1]}")
    return ops.channel_mix(R, np.ones((d, 1)))


def source_transform(R: Tensor, sensor: cm.SensorModel) -> Tensor:
    """Render an N x D x H x W reflectance tensor through the source sensor."""
    d = sensor.grid.size
    if R.shape[1] != d:
        raise ConfigurationError(
            f"source transform needs {d} spectral channels, got {R.shape[1]}; "
            "with adapt.d_out = 1 broadcast the single channel first (broadcast_spectrum)"
        )
    return ops.channel_mix(R, sensor.rgb_matrix)


def tau_neighbor(net: SpecInvNet) -> Tensor:
    """Smoothness of the final conv across neighbouring wavelength channels."""
    if net.d_out < 2:
        log.info("tau_neighbor: single output channel, penalty is 0")
        return Tensor(np.array(0.0, dtype=net.dec2.weight.dtype))
    return ops.neighbor_penalty(net.dec2.weight, net.dec2.bias)


# ---------------------------------------------------------------- state


@dataclass
class AdaptationState:
    colornorm: ColorNormNet
    specinv: SpecInvNet
    source_sensor: cm.SensorModel
    task_model: TaskHead
    cfg: AdaptConfig = field(default_factory=AdaptConfig)
    feature_affine: tuple | None = None
    optimizer: Adam | None = None

    @classmethod
    def create(cls, task_model, source_sensor, cfg: AdaptConfig, seed: int = 0, dtype=np.float32):
        d_out = cfg.d_out if cfg.d_out is not None else source_sensor.grid.size
        return cls(
            ColorNormNet(seed, gamma=cfg.gamma, dtype=dtype),
            SpecInvNet(d_out, seed, dtype=dtype),
            source_sensor,
            task_model,
            cfg,
        )

    def copy(self, cfg: AdaptConfig | None = None) -> "AdaptationState":
        cfg = cfg or self.cfg
        d_out = self.specinv.d_out
        cn = ColorNormNet(gamma=self.colornorm.gamma, dtype=self.colornorm.conv.weight.dtype)
        cn.load_state_dict(self.colornorm.state_dict())
        si = SpecInvNet(d_out, dtype=self.specinv.dec2.weight.dtype)
        si.load_state_dict(self.specinv.state_dict())
        return AdaptationState(cn, si, self.source_sensor, self.task_model, cfg)

    def view(self, x: Tensor) -> Tensor:
        """The image the task model sees under the current toggles."""
        if self.cfg.use_colornorm:
            _, x = color_normalize(self.colornorm, x)
        if self.cfg.use_source_transform:
            R = spec_invert(self.specinv, x)
            if R.shape[1] == 1:
                R = broadcast_spectrum(R, self.source_sensor.grid.size)
            x = source_transform(R, self.source_sensor)
        return x

    def logits(self, x: Tensor) -> Tensor:
        return self.task_model.logits(self.view(x), self.feature_affine)

    def trainable(self) -> list:
        params = []
        if self.cfg.use_colornorm:
            params += self.colornorm.parameters()
        if self.cfg.use_source_transform:
            params += self.specinv.parameters()
        if not params:
            # no adaptation network: entropy acts on a per-feature affine
            # after the frozen backbone, starting at the identity
            if self.feature_affine is None:
                dt = self.task_model.class_head.weight.dtype
                self.feature_affine = (
                    Tensor(np.ones(32, dtype=dt), requires_grad=True, name="affine.scale"),
                    Tensor(np.zeros(32, dtype=dt), requires_grad=True, name="affine.shift"),
                )
            params = list(self.feature_affine)
        return params

    def transform(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Numpy NCHW batch through ``view`` (no graph)."""
        out = [self.view(Tensor(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def state_dict(self) -> dict:
        out = {}
        out.update({f"colornorm.{k}": v for k, v in self.colornorm.state_dict().items()})
        out.update({f"specinv.{k}": v for k, v in self.specinv.state_dict().items()})
        if self.feature_affine is not None:
            out["affine.scale"] = self.feature_affine[0].data.copy()
            out["affine.shift"] = self.feature_affine[1].data.copy()
        return out

    def load_state_dict(self, state: dict):
        self.colornorm.load_state_dict({k[10:]: v for k, v in state.items() if k.startswith("colornorm.")})
        self.specinv.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("specinv.")})
        if "affine.scale" in state:
            self.feature_affine = (
                Tensor(state["affine.scale"].copy(), requires_grad=True),
                Tensor(state["affine.shift"].copy(), requires_grad=True),
            )

    def digest(self) -> str:
        return checkpoint.digest(self.state_dict())


def save_state(path, state: AdaptationState) -> str:
    sd = state.state_dict()
    sd["meta.d_out"] = np.array([state.specinv.d_out], dtype=np.float32)
    sd["meta.gamma"] = np.array([float(state.colornorm.gamma)], dtype=np.float32)
    return checkpoint.save(path, sd)


def load_state(path, task_model: TaskHead, source_sensor: cm.SensorModel, cfg: AdaptConfig) -> AdaptationState:
    sd = checkpoint.load(path)
    d_out = int(sd.pop("meta.d_out")[0])
    gamma = bool(sd.pop("meta.gamma")[0])
    cfg = AdaptConfig(**{**asdict(cfg), "d_out": d_out, "gamma": gamma})
    state = AdaptationState.create(task_model, source_sensor, cfg)
    state.load_state_dict(sd)
    return state


# ---------------------------------------------------------------- pretraining


@dataclass
class SpectralCrops:
    """Source crops with the label maps needed to rebuild their reflectance."""

    x: np.ndarray  # N x 3 x s x s
    labels: np.ndarray  # N x s x s, indices into the crop's spectra table
    table_index: np.ndarray  # N
    tables: list  # per source image: (flakes + 1) x D

    def __len__(self):
        return len(self.x)

    def reflectance(self, idx) -> np.ndarray:
        """N x D x s x s reflectance for crops ``idx``."""
        return np.stack([self.tables[self.table_index[i]][self.labels[i]].transpose(2, 0, 1) for i in idx])


def spectral_crops(ds: Dataset, renderer: SceneRenderer, size: int, per_image: int, seed: int, dtype=np.float32) -> SpectralCrops:
    """Random ``size`` x ``size`` crops from every image of a source dataset."""
    from .synthgen import spectra_table

    rng = np.random.default_rng([seed, 0xC4095])
    xs, labs, tidx, tables = [], [], [], []
    for image_id in range(len(ds.images)):
        scene = ds.scene(image_id)
        img = ds.image(image_id)
        tables.append(spectra_table(scene, renderer.cache).astype(dtype))
        h, w = scene.label_map.shape
        for _ in range(per_image):
            y0 = int(rng.integers(0, h - size + 1))
            x0 = int(rng.integers(0, w - size + 1))
            xs.append(img[y0 : y0 + size, x0 : x0 + size].transpose(2, 0, 1))
            labs.append(scene.label_map[y0 : y0 + size, x0 : x0 + size])
            tidx.append(len(tables) - 1)
    return SpectralCrops(np.stack(xs).astype(dtype), np.stack(labs), np.array(tidx), tables)


def sample_log_gains(rng, n: int, cfg: PretrainConfig) -> np.ndarray:
    return rng.uniform(cfg.g_log_lo, cfg.g_log_hi, size=(n, 3))


def pretrain_colornorm(net: ColorNormNet, x: np.ndarray, cfg: PretrainConfig, seed: int = 0, val_fraction: float = 0.2) -> dict:
    """Regress log G from source crops re-balanced by random gains (MSE on log G).

    The learning rate decays linearly to zero over the run (both pretraining loops).

    Returns the median and 95th percentile relative error of G on held-out
    crops with fresh gains.
    """
    n = len(x)
    n_val = max(1, int(n * val_fraction))
    rng = np.random.default_rng([seed, 0xC0])
    perm = rng.permutation(n)
    val, tr = perm[:n_val], perm[n_val:]
    opt = Adam(net.parameters(), lr=cfg.lr, weight_decay=0.0)
    dt = net.conv.weight.dtype
    history = []
    for step in range(cfg.colornorm_steps):
        opt.lr = cfg.lr * (1 - step / cfg.colornorm_steps)
        b = tr[rng.integers(0, len(tr), cfg.batch_size)]
        z = sample_log_gains(rng, len(b), cfg).astype(dt)
        xb = x[b] * np.exp(z)[:, :, None, None]
        opt.zero_grad()
        with Graph() as g:
            pred = net.log_gain(Tensor(xb))
            loss = ops.mse(ops.columns(pred, 0, 3) if net.gamma else pred, z)
        g.backward(loss)
        opt.step()
        history.append(float(loss.data))
    zv = sample_log_gains(np.random.default_rng([seed, 0xC1]), n_val, cfg).astype(dt)
    G_true = np.exp(zv)
    G_pred, _ = color_normalize(net, Tensor(x[val] * G_true[:, :, None, None]))
    rel = np.abs(G_pred.data / G_true - 1)
    return {
        "loss_history": history[:: max(1, len(history) // 50)],
        "final_loss": float(np.mean(history[-50:])) if history else float("nan"),
        "val_rel_error_median": float(np.median(rel)),
        "val_rel_error_p95": float(np.percentile(rel, 95)),
        "n_val": int(n_val),
    }


def pretrain_specinv(net: SpecInvNet, crops: SpectralCrops, cfg: PretrainConfig, seed: int = 0, val_fraction: float = 0.2) -> dict:
    """Fit SpecInv on (source RGB, true reflectance) crops with per-pixel MSE."""
    n = len(crops)
    n_val = max(1, int(n * val_fraction))
    rng = np.random.default_rng([seed, 0x5B])
    perm = rng.permutation(n)
    val, tr = perm[:n_val], perm[n_val:]
    opt = Adam(net.parameters(), lr=cfg.lr, weight_decay=0.0)
    history = []
    for step in range(cfg.specinv_steps):
        opt.lr = cfg.lr * (1 - step / cfg.specinv_steps)
        b = tr[rng.integers(0, len(tr), cfg.batch_size)]
        R = crops.reflectance(b)
        if net.d_out == 1:
            R = R.mean(axis=1, keepdims=True)
        opt.zero_grad()
        with Graph() as g:
            loss = ops.mse(spec_invert(net, Tensor(crops.x[b])), R)
        g.backward(loss)
        opt.step()
        history.append(float(loss.data))
    return {
        "loss_history": history[:: max(1, len(history) // 50)],
        "final_loss": float(np.mean(history[-50:])) if history else float("nan"),
        "val_mse": specinv_mse(net, crops, val),
        "n_val": int(n_val),
    }


def specinv_mse(net: SpecInvNet, crops: SpectralCrops, idx, batch_size: int = 32) -> float:
    total, count = 0.0, 0
    for i in range(0, len(idx), batch_size):
        b = idx[i : i + batch_size]
        R = crops.reflectance(b)
        if net.d_out == 1:
            R = R.mean(axis=1, keepdims=True)
        d = spec_invert(net, Tensor(crops.x[b])).data - R
        total += float((d.astype(np.float64) ** 2).sum())
        count += d.size
    return total / count


# ---------------------------------------------------------------- adaptation


def _batches(n: int, cfg: AdaptConfig, image_ids, rng):
    if cfg.mode == "per_image":
        ids = np.asarray(image_ids) if image_ids is not None else np.arange(n)
        order = [np.flatnonzero(ids == i) for i in np.unique(ids)]
    else:
        order = []
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            order += [perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    if cfg.max_batches is not None:
        order = order[: cfg.max_batches]
    return order


def mean_entropy(state: AdaptationState, x: np.ndarray, batch_size: int = 64) -> float:
    ents = []
    for i in range(0, len(x), batch_size):
        p = ops.softmax(state.logits(Tensor(x[i : i + batch_size]))).data
        ents.append(ops.row_entropy(p.astype(np.float64)))
    return float(np.concatenate(ents).mean())


def adapt(state: AdaptationState, target_x: np.ndarray, image_ids=None, seed: int = 0) -> dict:
    """Entropy minimization on unlabeled target patches (NCHW numpy).

    Set mode walks shuffled batches for ``epochs``; per-image mode takes all
    patches of one image per batch. Each batch gets ``steps`` Adam updates of
    mean entropy + beta_reg * tau_neighbor. Returns a JSON-ready report.
    """
    cfg = state.cfg
    task_before = state.task_model.digest()
    state.task_model.freeze()
    params = state.trainable()
    state.optimizer = Adam(params, lr=cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng([seed, 0xADA])
    start_digest = state.digest()
    use_tau = cfg.use_tau and cfg.use_source_transform and state.specinv.d_out > 1
    num_classes = state.task_model.num_classes
    history = []
    t0 = time.perf_counter()
    batches = _batches(len(target_x), cfg, image_ids, rng) if cfg.use_entropy else []
    for bi, b in enumerate(batches):
        xb = Tensor(target_x[b])
        for step in range(cfg.steps):
            state.optimizer.zero_grad()
            with Graph() as g:
                probs = ops.softmax(state.logits(xb))
                ent = ops.entropy_loss(probs)
                loss = ent
                tau = None
                if use_tau:
                    tau = tau_neighbor(state.specinv)
                    loss = ops.add(ent, ops.scale(tau, cfg.beta_reg))
            terms = {"entropy": float(ent.data), "tau_neighbor": float(tau.data) if tau is not None else 0.0}
            # row_entropy maps NaN probabilities to 0, so check them directly
            if not (np.isfinite(probs.data).all() and all(math.isfinite(v) for v in terms.values())):
                G = color_normalize(state.colornorm, xb)[0].data.mean(axis=0).tolist() if cfg.use_colornorm else None
                raise AdaptationError(f"non-finite loss at batch {bi} step {step}: {terms}, last mean G {G}")
            g.backward(loss)
            state.optimizer.step()
            history.append({"batch": bi, "step": step, **terms})
    wall = time.perf_counter() - t0
    task_after = state.task_model.digest()
    if task_after != task_before:
        raise AdaptationError("task model changed during adaptation")
    for h in history:
        if not 0.0 <= h["entropy"] <= math.log(num_classes) + 1e-6:
            raise AdaptationError(f"entropy {h['entropy']} outside [0, ln C]")
    return {
        "hyperparameters": asdict(cfg),
        "seed": seed,
        "n_target": int(len(target_x)),
        "n_batches": len(batches),
        "history": history,
        "final_mean_entropy": mean_entropy(state, target_x),
        "wall_time_s": wall,
        "task_model_digest_before": task_before,
        "task_model_digest_after": task_after,
        "adaptation_digest_before": start_digest,
        "adaptation_digest_after": state.digest(),
    }
