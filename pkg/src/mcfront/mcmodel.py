"""Model assembly, optimisation and stage-wise training.

A model is one :class:`~mcfront.gradnet.Sequential` stack:

    [input normalizer] -> [MC front] -> [FE DNN] -> [feature normalizer]
        -> LSTM x n_layers -> output affine  (softmax cross-entropy outside)

The LFBE model skips the first three blocks; the single-channel DFT model
uses ``pow_pairs`` as its front. Frame-wise layers act on (T, B, F) arrays.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gradnet as gn
from .beamform import BeamformerBank
from .signal import LOG_FLOOR, GlobalStats, estimate_global_stats, mel_filterbank, FrameSpec

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
INPUT_KINDS = ("lfbe", "dft1", "dftm")
VARIANTS = ("cat", "dsf", "esf")
INITS = ("beamformer", "random")


@dataclass(frozen=True)
class McArch:
    variant: str
    n_directions: int
    n_bins: int
    n_channels: int
    init: str = "beamformer"
    cat_direction: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if min(self.n_directions, self.n_bins, self.n_channels) < 1:
            raise ValueError("D, K and M must be positive")


@dataclass(frozen=True)
class ClassifierConfig:
    n_layers: int = 2
    hidden: int = 64
    n_classes: int = 8
    forget_bias: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 20
    bptt_length: int = 20
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "eps", "batch_size", "epochs", "bptt_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


# ---------------------------------------------------------------------------
# building blocks


def build_classifier(input_dim: int, cfg: ClassifierConfig, rng: np.random.Generator) -> list[gn.Layer]:
    layers: list[gn.Layer] = []
    dim = input_dim
    for i in range(cfg.n_layers):
        layers.append(gn.LSTM.init(dim, cfg.hidden, rng, cfg.forget_bias, name=f"lstm{i}"))
        dim = cfg.hidden
    s = 1.0 / math.sqrt(dim)
    layers.append(gn.Affine(rng.uniform(-s, s, (cfg.n_classes, dim)), name="out"))
    return layers


def build_fe_dnn(n_bins: int, n_mels: int = 64, init: str = "mel", spec: FrameSpec | None = None,
                 rng: np.random.Generator | None = None, eps: float = LOG_FLOOR) -> list[gn.Layer]:
    """affine(n_mels x K, bias 0) -> relu -> log_floor over a K-vector of powers."""
    if init == "mel":
        spec = spec or FrameSpec(fft_size=2 * (n_bins + 1))
        if spec.n_bins_kept != n_bins:
            raise ValueError("frame spec does not match the number of bins")
        weight = mel_filterbank(n_mels, spec)
    elif init == "random":
        rng = rng or np.random.default_rng(0)
        weight = rng.uniform(0.0, 2.0 / n_bins, (n_mels, n_bins))
    else:
        raise ValueError("FE init must be 'mel' or 'random'")
    return [gn.Affine(weight, name="fe_affine"), gn.ReLU(name="fe_relu"), gn.LogFloor(eps, name="fe_log")]


def _complex_to_real_dense(c: np.ndarray) -> np.ndarray:
    """Complex (P, Q) -> real (2P, 2Q) acting on interleaved [Re, Im] vectors."""
    p, q = c.shape
    out = np.zeros((p, 2, q, 2))
    out[:, 0, :, 0] = c.real
    out[:, 0, :, 1] = -c.imag
    out[:, 1, :, 0] = c.imag
    out[:, 1, :, 1] = c.real
    return out.reshape(2 * p, 2 * q)


def _bank_conj(arch: McArch, bank: BeamformerBank | None) -> np.ndarray:
    if bank is None:
        raise ValueError("beamformer initialisation needs a bank")
    d, k, m = bank.shape
    if (d, k, m) != (arch.n_directions, arch.n_bins, arch.n_channels):
        raise ValueError(f"bank shape {(d, k, m)} does not match arch {(arch.n_directions, arch.n_bins, arch.n_channels)}")
    # rows of the MC layer hold w^H, i.e. conj(w)
    return bank.weights.conj()


def build_mc_front(arch: McArch, bank: BeamformerBank | None = None,
                   rng: np.random.Generator | None = None) -> list[gn.Layer]:
    """Spatial filtering front for one variant; every bias starts at zero.

    cat: dense complex affine (K outputs from MK inputs) -> pow_pairs
    dsf: dense real 2DK x 2MK affine (bank rows on the diagonal blocks) -> pow_pairs -> maxpool(D)
    esf: per-bin (D, M) complex blocks -> pow_pairs -> affine DK -> K (mean over D) -> relu
    """
    rng = rng or np.random.default_rng(0)
    d, k, m = arch.n_directions, arch.n_bins, arch.n_channels
    use_bank = arch.init == "beamformer"
    if arch.variant == "cat":
        if use_bank:
            w = np.zeros((k, k * m), dtype=np.complex128)
            rows = _bank_conj(arch, bank)[arch.cat_direction]
            for i in range(k):
                w[i, i * m : (i + 1) * m] = rows[i]
        else:
            s = 1.0 / math.sqrt(2 * m * k)
            w = rng.normal(0, s, (k, k * m)) + 1j * rng.normal(0, s, (k, k * m))
        return [gn.ComplexAffine(w, name="mc_cat"), gn.PowPairs(name="mc_pow")]
    if arch.variant == "dsf":
        if use_bank:
            c = np.zeros((k, d, k, m), dtype=np.complex128)
            conj = _bank_conj(arch, bank)
            for i in range(k):
                c[i, :, i, :] = conj[:, i, :]
            dense = _complex_to_real_dense(c.reshape(k * d, k * m))
        else:
            dense = rng.normal(0, 1.0 / math.sqrt(2 * m * k), (2 * k * d, 2 * k * m))
        return [gn.Affine(dense, name="mc_dsf"), gn.PowPairs(name="mc_pow"),
                gn.MaxPoolGroups(d, name="mc_pool")]
    # esf
    if use_bank:
        block = _bank_conj(arch, bank).transpose(1, 0, 2)
    else:
        s = 1.0 / math.sqrt(2 * m)
        block = rng.normal(0, s, (k, d, m)) + 1j * rng.normal(0, s, (k, d, m))
    comb = np.zeros((k, k * d))
    for i in range(k):
        comb[i, i * d : (i + 1) * d] = 1.0 / d
    return [gn.BlockComplexAffine(block, name="mc_esf"), gn.PowPairs(name="mc_pow"),
            gn.Affine(comb, name="mc_comb"), gn.ReLU(name="mc_relu")]


# ---------------------------------------------------------------------------
# model graph


class ModelGraph:
    """Ordered layer stack plus the metadata needed to rebuild it."""

    def __init__(self, layers: Sequence[gn.Layer], input_kind: str, n_classes: int, meta: dict | None = None):
        if input_kind not in INPUT_KINDS:
            raise ValueError(f"input_kind must be one of {INPUT_KINDS}")
        self.net = gn.Sequential(layers, name="net")
        self.input_kind = input_kind
        self.n_classes = n_classes
        self.meta = dict(meta or {})
        self._mark_first_trainable()

    def _mark_first_trainable(self):
        for layer in self.net:
            layer.need_input_grad = True
        for layer in self.net:
            if layer.params:
                layer.need_input_grad = False
                break

    @property
    def layers(self) -> list[gn.Layer]:
        return self.net.layers

    def layer(self, name: str) -> gn.Layer:
        for l in self.net:
            if l.name == name:
                return l
        raise KeyError(name)

    def has_layer(self, name: str) -> bool:
        return any(l.name == name for l in self.net)

    @property
    def input_dim(self) -> int:
        first = self.layers[0]
        if isinstance(first, gn.Normalize):
            return first.shift.shape[0]
        return first.in_dim

    def lstms(self) -> list[gn.LSTM]:
        return [l for l in self.net if isinstance(l, gn.LSTM)]

    def reset_state(self):
        for l in self.lstms():
            l.initial_state = None

    def carry_state(self):
        for l in self.lstms():
            l.initial_state = l.final_state

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)

    def backward(self, g: np.ndarray):
        return self.net.backward(g)

    def parameters(self) -> list[tuple[str, gn.DiffTensor]]:
        return list(self.net.parameters())

    def zero_grad(self):
        self.net.zero_grad()

    def layer_specs(self) -> list[dict]:
        specs = []
        for l in self.net:
            s = {"kind": l.kind, "name": l.name}
            if isinstance(l, gn.MaxPoolGroups):
                s["group_size"] = l.group_size
            if isinstance(l, gn.LogFloor):
                s["eps"] = l.eps
            specs.append(s)
        return specs

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.net:
            if isinstance(l, gn.Normalize):
                out[f"{l.name}.shift"] = l.shift
                out[f"{l.name}.scale"] = l.scale
            for key, p in l.params.items():
                out[f"{l.name}.{key}"] = p.values
        return out

    def copy_weights_from(self, other: "ModelGraph", names: Sequence[str]):
        """Copy parameters/normalizer constants of the named layers from ``other``."""
        src = other.arrays()
        for name in names:
            l = self.layer(name)
            if isinstance(l, gn.Normalize):
                l.shift = src[f"{name}.shift"].copy()
                l.scale = src[f"{name}.scale"].copy()
            for key, p in l.params.items():
                val = src[f"{name}.{key}"]
                if val.shape != p.shape:
                    raise ValueError(f"shape mismatch for {name}.{key}")
                p.values[...] = val


def assemble(kind: str, classifier: ClassifierConfig, rng: np.random.Generator, *,
             input_stats: GlobalStats | None = None, feature_stats: GlobalStats | None = None,
             n_mels: int = 64, n_bins: int = 127, arch: McArch | None = None,
             bank: BeamformerBank | None = None, fe_init: str = "mel",
             fe_spec: FrameSpec | None = None) -> ModelGraph:
    """Build an LFBE, single-channel DFT or multi-channel DFT model.

    Missing normalizer statistics default to identity normalizers.
    """
    def norm(stats, dim, name):
        if stats is None:
            return gn.Normalize(np.zeros(dim), np.ones(dim), name=name)
        if stats.dim != dim:
            raise ValueError(f"{name}: stats dimension {stats.dim} != {dim}")
        return gn.Normalize.from_stats(stats, name=name)

    meta = {"kind": kind, "n_mels": n_mels, "n_bins": n_bins, "classifier": asdict(classifier)}
    layers: list[gn.Layer] = []
    if kind == "lfbe":
        layers.append(norm(feature_stats, n_mels, "feat_norm"))
    elif kind in ("dft1", "dftm"):
        if kind == "dft1":
            layers.append(norm(input_stats, 2 * n_bins, "in_norm"))
            layers.append(gn.PowPairs(name="fe_pow"))
        else:
            if arch is None:
                raise ValueError("multi-channel model needs an McArch")
            if arch.n_bins != n_bins:
                raise ValueError("arch bins do not match n_bins")
            meta["arch"] = asdict(arch)
            layers.append(norm(input_stats, 2 * n_bins * arch.n_channels, "in_norm"))
            layers.extend(build_mc_front(arch, bank, rng))
        layers.extend(build_fe_dnn(n_bins, n_mels, fe_init, fe_spec, rng))
        layers.append(norm(feature_stats, n_mels, "feat_norm"))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    layers.extend(build_classifier(n_mels, classifier, rng))
    return ModelGraph(layers, "dftm" if kind == "dftm" else kind, classifier.n_classes, meta)


_LAYER_BUILDERS: dict[str, Callable[[dict, dict], gn.Layer]] = {
    "normalize": lambda s, a: gn.Normalize(a[f"{s['name']}.shift"], a[f"{s['name']}.scale"], s["name"]),
    "affine": lambda s, a: gn.Affine(a[f"{s['name']}.W"], a[f"{s['name']}.b"], s["name"]),
    "complex_affine": lambda s, a: gn.ComplexAffine(a[f"{s['name']}.W"], a[f"{s['name']}.b"], s["name"]),
    "block_complex_affine": lambda s, a: gn.BlockComplexAffine(a[f"{s['name']}.W"], a[f"{s['name']}.b"], s["name"]),
    "pow_pairs": lambda s, a: gn.PowPairs(s["name"]),
    "maxpool": lambda s, a: gn.MaxPoolGroups(s["group_size"], s["name"]),
    "relu": lambda s, a: gn.ReLU(s["name"]),
    "log_floor": lambda s, a: gn.LogFloor(s["eps"], s["name"]),
    "lstm": lambda s, a: gn.LSTM(a[f"{s['name']}.Wx"], a[f"{s['name']}.Wh"], a[f"{s['name']}.b"], s["name"]),
}


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _adam_update(values, grad, m, v, t, cfg: TrainConfig):
    """In place: m, v moments, then values -= lr * m_hat / (sqrt(v_hat) + eps)."""
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    tmp = np.square(grad, out=np.empty_like(m))
    tmp *= 1.0 - cfg.beta2
    v *= cfg.beta2
    v += tmp
    # reuse one scratch buffer for sqrt(v_hat) + eps and the step itself
    np.sqrt(v, out=tmp)
    tmp *= 1.0 / math.sqrt(1.0 - cfg.beta2**t)
    tmp += cfg.eps
    np.divide(m, tmp, out=tmp)
    tmp *= cfg.lr / (1.0 - cfg.beta1**t)
    values -= tmp


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> tuple[dict, AdamState]:
    """Pure Adam update on dicts of arrays; returns new params and state."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(value):
            raise ValueError(f"gradient shape mismatch for {name}")
        m = np.array(state.m.get(name, np.zeros_like(g)), dtype=np.float64)
        v = np.array(state.v.get(name, np.zeros_like(g)), dtype=np.float64)
        p = np.array(value, dtype=np.float64)
        _adam_update(p, g, m, v, t, config)
        new_params[name], new_m[name], new_v[name] = p, m, v
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """In-place Adam over a model's DiffTensors."""

    def __init__(self, params: Sequence[tuple[str, gn.DiffTensor]], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.state = AdamState()
        for name, p in self.params:
            self.state.m[name] = np.zeros_like(p.values)
            self.state.v[name] = np.zeros_like(p.values)

    def step(self):
        self.state.t += 1
        cfg = self.config
        if cfg.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(p.grad**2)) for _, p in self.params))
            if total > cfg.clip_norm:
                for _, p in self.params:
                    p.grad *= cfg.clip_norm / total
        for name, p in self.params:
            _adam_update(p.values, p.grad, self.state.m[name], self.state.v[name], self.state.t, cfg)
            if not np.all(np.isfinite(p.values)):
                raise FloatingPointError(f"non-finite parameter {name} after update")


# ---------------------------------------------------------------------------
# data batching, training and evaluation


@dataclass
class DataView:
    """Per-utterance feature matrices (T_i, F) and label vectors (T_i,)."""

    features: list
    labels: list

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        for f, y in zip(self.features, self.labels):
            if f.shape[0] != y.shape[0]:
                raise ValueError("feature/label frame counts differ")

    def __len__(self):
        return len(self.features)

    @property
    def n_frames(self) -> int:
        return int(sum(y.shape[0] for y in self.labels))

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Time-major padded batch (T, B, F) float64 and labels (T, B) with -1 padding."""
        t_max = max(self.labels[i].shape[0] for i in idx)
        dim = self.features[idx[0]].shape[1]
        x = np.zeros((t_max, len(idx), dim))
        y = np.full((t_max, len(idx)), -1, dtype=np.int64)
        for j, i in enumerate(idx):
            t = self.labels[i].shape[0]
            x[:t, j] = self.features[i]
            y[:t, j] = self.labels[i]
        return x, y


def masked_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, int]:
    """Cross-entropy over positions with label >= 0; returns (mean loss, grad, count)."""
    mask = labels >= 0
    count = int(mask.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad, 0
    loss, g = gn.softmax_xent(logits[mask], labels[mask])
    grad[mask] = g
    return loss, grad, count


def evaluate(model: ModelGraph, data: DataView, batch_size: int = 32) -> dict:
    """Frame error rate and mean cross-entropy of full-sequence (stateful) decoding."""
    if len(data) == 0 or data.n_frames == 0:
        raise ValueError("empty evaluation set")
    errors = 0
    total_loss = 0.0
    count = 0
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        x, y = data.batch(idx)
        model.reset_state()
        logits = model.forward(x)
        loss, _, n = masked_xent(logits, y)
        mask = y >= 0
        errors += int(np.sum(np.argmax(logits, axis=-1)[mask] != y[mask]))
        total_loss += loss * n
        count += n
    model.reset_state()
    return {"frame_error_rate": errors / count, "loss": total_loss / count}


def predict(model: ModelGraph, features: np.ndarray) -> np.ndarray:
    model.reset_state()
    logits = model.forward(np.asarray(features, dtype=np.float64)[:, None, :])
    model.reset_state()
    return np.argmax(logits[:, 0, :], axis=-1)


def relative_reduction(candidate: float, baseline: float) -> float:
    """(baseline - candidate) / baseline."""
    if baseline == 0:
        raise ValueError("baseline error is zero")
    return (baseline - candidate) / baseline


def train_epoch(model: ModelGraph, opt: Adam, data: DataView, cfg: TrainConfig,
                rng: np.random.Generator, after_step: Callable[[], None] | None = None) -> float:
    """One pass of truncated BPTT; LSTM state is carried between chunks of an utterance."""
    order = rng.permutation(len(data))
    total, count = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size].tolist()
        x, y = data.batch(idx)
        model.reset_state()
        for t0 in range(0, x.shape[0], cfg.bptt_length):
            xc, yc = x[t0 : t0 + cfg.bptt_length], y[t0 : t0 + cfg.bptt_length]
            logits = model.forward(xc)
            loss, grad, n = masked_xent(logits, yc)
            if n:
                model.zero_grad()
                model.backward(grad)
                opt.step()
                if after_step is not None:
                    after_step()
                total += loss * n
                count += n
            model.carry_state()
    model.reset_state()
    return total / max(count, 1)


@dataclass
class Checkpoint:
    arrays: dict
    meta: dict
    history: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        arrays = {}
        for name in sorted(self.arrays):
            a = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            arrays[name] = {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}
        doc = {"format_version": self.format_version, "meta": self.meta, "history": self.history,
               "arrays": arrays}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {version!r}")
        arrays = {}
        for name, rec in doc["arrays"].items():
            raw = base64.b64decode(rec["data"])
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).astype(np.float64)
        return cls(arrays, doc["meta"], doc.get("history", []), version)

    def save(self, path):
        from .io import atomic_write_text

        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def make_checkpoint(model: ModelGraph, history: list | None = None, extra_meta: dict | None = None) -> Checkpoint:
    meta = dict(model.meta)
    meta.update(extra_meta or {})
    meta["input_kind"] = model.input_kind
    meta["n_classes"] = model.n_classes
    meta["layers"] = model.layer_specs()
    return Checkpoint({k: np.array(v) for k, v in model.arrays().items()}, meta, list(history or []))


def model_from_checkpoint(ckpt: Checkpoint) -> ModelGraph:
    layers = []
    for spec in ckpt.meta["layers"]:
        try:
            builder = _LAYER_BUILDERS[spec["kind"]]
        except KeyError:
            raise ValueError(f"unknown layer kind {spec['kind']!r}") from None
        layers.append(builder(spec, ckpt.arrays))
    meta = {k: v for k, v in ckpt.meta.items() if k not in ("layers", "input_kind", "n_classes")}
    return ModelGraph(layers, ckpt.meta["input_kind"], ckpt.meta["n_classes"], meta)


def fit(model: ModelGraph, train: DataView, dev: DataView, cfg: TrainConfig, tag: str = "",
        after_step: Callable[[], None] | None = None) -> list[dict]:
    """Train for ``cfg.epochs`` epochs; history starts with the untrained dev score (epoch 0)."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg)
    history = []
    ev = evaluate(model, dev)
    history.append({"epoch": 0, "split": "dev", "loss": ev["loss"], "frame_error": ev["frame_error_rate"]})
    for epoch in range(1, cfg.epochs + 1):
        train_loss = train_epoch(model, opt, train, cfg, rng, after_step)
        ev = evaluate(model, dev)
        history.append({"epoch": epoch, "split": "train", "loss": train_loss, "frame_error": None})
        history.append({"epoch": epoch, "split": "dev", "loss": ev["loss"], "frame_error": ev["frame_error_rate"]})
        log.info("%s epoch %d train_loss %.4f dev_loss %.4f dev_err %.4f", tag, epoch, train_loss,
                 ev["loss"], ev["frame_error_rate"])
    return history


def feature_stats_of(model: ModelGraph, data: DataView, upto: str) -> GlobalStats:
    """Global statistics of the activations just after layer ``upto`` over ``data``."""
    names = [l.name for l in model.layers]
    stop = names.index(upto) + 1
    head = gn.Sequential(model.layers[:stop], name="head")

    def chunks():
        for f in data.features:
            yield head.forward(np.asarray(f, dtype=np.float64))

    return estimate_global_stats(chunks())


@dataclass
class StageViews:
    """Aligned train/dev views of the same frames for the three training stages."""

    lfbe: tuple
    dft1: tuple
    dftm: tuple | None = None

    def require(self, name: str) -> tuple:
        view = getattr(self, name)
        if view is None:
            raise ValueError(f"missing {name} view")
        return view


def stagewise_train(views: StageViews, classifier: ClassifierConfig, cfgs: Sequence[TrainConfig], *,
                    arch: McArch | None = None, bank: BeamformerBank | None = None,
                    n_mels: int = 64, n_bins: int = 127, lfbe_spec: FrameSpec | None = None,
                    dft_spec: FrameSpec | None = None) -> list[Checkpoint]:
    """LFBE classifier -> FE + classifier on 1-ch DFT -> joint MC network.

    ``cfgs`` holds one TrainConfig per stage. Stage 2 reuses the stage-1
    classifier; stage 3 reuses the stage-2 FE DNN, feature normalizer and
    classifier and initialises the MC front from ``bank`` or randomly
    according to ``arch.init``. Stage 3 is skipped when ``arch`` is None.
    """
    lfbe_train, lfbe_dev = views.require("lfbe")
    dft_train, dft_dev = views.require("dft1")
    rng = np.random.default_rng(cfgs[0].seed)
    ckpts = []

    lfbe_stats = estimate_global_stats(lfbe_train.features)
    m1 = assemble("lfbe", classifier, rng, feature_stats=lfbe_stats, n_mels=n_mels)
    hist = fit(m1, lfbe_train, lfbe_dev, cfgs[0], "stage1")
    ckpts.append(make_checkpoint(m1, hist, {"stage": 1}))

    m2 = stage2_model(m1, dft_train, classifier, rng, n_mels=n_mels, n_bins=n_bins, dft_spec=dft_spec)
    hist = fit(m2, dft_train, dft_dev, cfgs[1], "stage2")
    ckpts.append(make_checkpoint(m2, hist, {"stage": 2}))

    if arch is not None:
        mc_train, mc_dev = views.require("dftm")
        m3 = stage3_model(m2, arch, bank, mc_train, classifier, rng, n_mels=n_mels, n_bins=n_bins,
                          dft_spec=dft_spec)
        hist = fit(m3, mc_train, mc_dev, cfgs[2], f"stage3-{arch.variant}")
        ckpts.append(make_checkpoint(m3, hist, {"stage": 3}))
    return ckpts


def stage2_model(stage1: ModelGraph, dft_train: DataView, classifier: ClassifierConfig,
                 rng: np.random.Generator, n_mels: int = 64, n_bins: int = 127,
                 dft_spec: FrameSpec | None = None) -> ModelGraph:
    """Single-channel DFT model with the stage-1 classifier and a mel-initialised FE DNN.

    The feature normalizer is re-estimated on the FE DNN output so the
    classifier sees inputs on the scale it was trained on.
    """
    dft_stats = estimate_global_stats(dft_train.features)
    m2 = assemble("dft1", classifier, rng, input_stats=dft_stats, n_mels=n_mels, n_bins=n_bins,
                  fe_spec=dft_spec)
    m2.copy_weights_from(stage1, [l.name for l in stage1.lstms()] + ["out"])
    fe_stats = feature_stats_of(m2, dft_train, "fe_log")
    m2.layer("feat_norm").shift, m2.layer("feat_norm").scale = fe_stats.mean, np.sqrt(fe_stats.variance)
    return m2


def stage3_model(stage2: ModelGraph, arch: McArch, bank: BeamformerBank | None, mc_train: DataView,
                 classifier: ClassifierConfig, rng: np.random.Generator, n_mels: int = 64,
                 n_bins: int = 127, dft_spec: FrameSpec | None = None) -> ModelGraph:
    """Joint MC network initialised from a stage-2 model."""
    mc_stats = estimate_global_stats(mc_train.features)
    m3 = assemble("dftm", classifier, rng, input_stats=mc_stats, n_mels=n_mels, n_bins=n_bins,
                  arch=arch, bank=bank, fe_spec=dft_spec)
    keep = ["fe_affine", "feat_norm"] + [l.name for l in stage2.lstms()] + ["out"]
    m3.copy_weights_from(stage2, keep)
    return m3
