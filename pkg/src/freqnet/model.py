"""The residual frequency-aware classifier, its checkpoints and CAM extraction.

Layout (channel ladder ``base * stage_multipliers``)::

    [hfri] -> stem conv 3x3 -> bn -> relu
    stage 1: residual block(s)           -> fcl -> hfrf_spatial
    stage 2: residual block(s), stride 2 -> fcl -> hfrf_channel
    stage 3: residual block(s), stride 2
    stage 4: residual block(s), stride 2
    global average pool -> linear -> 2 logits

Plugin positions come from ``ModelConfig.placements`` and are each gated by
an ablation flag.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as C
from . import freq
from . import tensor as T

PLUGINS = ("fcl", "hfrf_spatial", "hfrf_channel")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 256
    base_channels: int = 32
    stage_multipliers: tuple = (1, 2, 4, 10)
    blocks_per_stage: tuple = (1, 1, 2, 1)
    placements: dict = field(default_factory=lambda: {1: ("fcl", "hfrf_spatial"), 2: ("fcl", "hfrf_channel")})
    use_hfri: bool = True
    use_hfrf_spatial: bool = True
    use_hfrf_channel: bool = True
    use_fcl: bool = True
    fcl_mode: str = freq.CARTESIAN
    fcl_tied: bool = False
    batchnorm: bool = True
    cut_fraction: Fraction = Fraction(1, 4)
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.input_size < 1 or self.base_channels < 1:
            raise C.ConfigError("input_size and base_channels must be positive")
        if not self.stage_multipliers or any(m < 1 for m in self.stage_multipliers):
            raise C.ConfigError("stage_multipliers must be positive")
        if len(self.blocks_per_stage) != len(self.stage_multipliers) or any(b < 1 for b in self.blocks_per_stage):
            raise C.ConfigError("blocks_per_stage needs one positive entry per stage")
        for stage, names in self.placements.items():
            if not 1 <= stage <= len(self.stage_multipliers):
                raise C.ConfigError(f"placement references stage {stage}, model has {len(self.stage_multipliers)}")
            for n in names:
                if n not in PLUGINS:
                    raise C.ConfigError(f"unknown plugin {n!r} in placements")
        if self.fcl_mode not in (freq.CARTESIAN, freq.POLAR):
            raise C.ConfigError(f"fcl_mode must be cartesian or polar, got {self.fcl_mode!r}")
        freq.FilterSpec(self.cut_fraction)
        return self

    @property
    def ladder(self) -> tuple:
        return tuple(self.base_channels * m for m in self.stage_multipliers)

    def enabled(self, plugin: str) -> bool:
        return getattr(self, "use_" + plugin)


DESK_MODEL = ModelConfig(input_size=32, base_channels=8)


# -- layers ----------------------------------------------------------------------

class Conv:
    def __init__(self, name, cin, cout, k, stride=1, pad=0):
        self.name, self.stride, self.pad = name, stride, pad
        self.w = ad.Variable(np.zeros((cout, cin, k, k), np.float32), True, name + ".w")
        self.b = ad.Variable(np.zeros(cout, np.float32), True, name + ".b")

    def init(self, rng):
        fan_in = int(np.prod(self.w.shape[1:]))
        self.w.value = (rng.standard_normal(self.w.shape) * np.sqrt(2.0 / fan_in)).astype(self.w.value.dtype)

    def params(self):
        return [self.w, self.b]

    def __call__(self, x, training):
        return ad.conv2d(x, self.w, self.b, self.stride, self.pad)


class BatchNorm:
    def __init__(self, name, c):
        self.name = name
        self.gamma = ad.Variable(np.ones(c, np.float32), True, name + ".gamma")
        self.beta = ad.Variable(np.zeros(c, np.float32), True, name + ".beta")
        self.stats = ad.RunningStats.fresh(c)

    def init(self, rng):
        pass

    def params(self):
        return [self.gamma, self.beta]

    def __call__(self, x, training):
        return ad.batchnorm2d(x, self.gamma, self.beta, self.stats, training)


class Identity:
    def init(self, rng):
        pass

    def params(self):
        return []

    def __call__(self, x, training):
        return x


class ResidualBlock:
    def __init__(self, name, cin, cout, stride, use_bn):
        norm = (lambda n, c: BatchNorm(n, c)) if use_bn else (lambda n, c: Identity())
        self.name = name
        self.conv1 = Conv(name + ".conv1", cin, cout, 3, stride, 1)
        self.bn1 = norm(name + ".bn1", cout)
        self.conv2 = Conv(name + ".conv2", cout, cout, 3, 1, 1)
        self.bn2 = norm(name + ".bn2", cout)
        if stride != 1 or cin != cout:
            self.shortcut = [Conv(name + ".down", cin, cout, 1, stride, 0), norm(name + ".down_bn", cout)]
        else:
            self.shortcut = []

    def layers(self):
        return [self.conv1, self.bn1, self.conv2, self.bn2, *self.shortcut]

    def init(self, rng):
        for layer in self.layers():
            layer.init(rng)

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]

    def __call__(self, x, training):
        h = ad.relu(self.bn1(self.conv1(x, training), training))
        h = self.bn2(self.conv2(h, training), training)
        skip = x
        for layer in self.shortcut:
            skip = layer(skip, training)
        return ad.relu(ad.add(h, skip))


class SpectralConv:
    """Frequency convolutional layer wrapper with its own parameters."""

    def __init__(self, name, c, mode, tied):
        self.name, self.mode = name, mode
        w_am = ad.Variable(np.zeros((c, c, 1, 1), np.float32), True, name + ".w_am")
        b_am = ad.Variable(np.zeros(c, np.float32), True, name + ".b_am")
        if tied:
            w_ph, b_ph = w_am, b_am
        else:
            w_ph = ad.Variable(np.zeros((c, c, 1, 1), np.float32), True, name + ".w_ph")
            b_ph = ad.Variable(np.zeros(c, np.float32), True, name + ".b_ph")
        self.p = freq.FclParams(w_am, b_am, w_ph, b_ph)

    def init(self, rng):
        for w in {id(v): v for v in (self.p.w_am, self.p.w_ph)}.values():
            w.value = (rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[1])).astype(w.value.dtype)

    def params(self):
        return list({id(v): v for v in (self.p.w_am, self.p.b_am, self.p.w_ph, self.p.b_ph)}.values())

    def __call__(self, x, training):
        return freq.fcl(x, self.p, self.mode)


class HighPass:
    def __init__(self, name, kind, spec):
        self.name, self.kind, self.spec = name, kind, spec

    def init(self, rng):
        pass

    def params(self):
        return []

    def __call__(self, x, training):
        fn = freq.hfrf_spatial if self.kind == "hfrf_spatial" else freq.hfrf_channel
        return fn(x, self.spec)


# -- model -------------------------------------------------------------------------

class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        bn = cfg.batchnorm
        base = cfg.base_channels
        self.stem = [Conv("stem.conv", 3, base, 3, 1, 1), BatchNorm("stem.bn", base) if bn else Identity()]
        self.stages = []
        cin = base
        for s, (cout, nblocks) in enumerate(zip(cfg.ladder, cfg.blocks_per_stage), start=1):
            layers = []
            for b in range(nblocks):
                stride = 2 if (s > 1 and b == 0) else 1
                layers.append(ResidualBlock(f"stage{s}.block{b}", cin, cout, stride, bn))
                cin = cout
            for plugin in cfg.placements.get(s, ()):
                if not cfg.enabled(plugin):
                    continue
                name = f"stage{s}.{plugin}"
                if plugin == "fcl":
                    layers.append(SpectralConv(name, cout, cfg.fcl_mode, cfg.fcl_tied))
                else:
                    spec = freq.FilterSpec(cfg.cut_fraction, "spatial" if plugin == "hfrf_spatial" else "channel")
                    layers.append(HighPass(name, plugin, spec))
            self.stages.append(layers)
        self.head_w = ad.Variable(np.zeros((2, cin), np.float32), True, "head.w")
        self.head_b = ad.Variable(np.zeros(2, np.float32), True, "head.b")
        self.image_spec = freq.FilterSpec(cfg.cut_fraction)

    def layers(self):
        return [*self.stem, *(layer for stage in self.stages for layer in stage)]

    def init(self, seed: int):
        rng = np.random.default_rng(seed)
        for layer in self.layers():
            layer.init(rng)
        fan_in = self.head_w.shape[1]
        self.head_w.value = (rng.standard_normal(self.head_w.shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    def named_params(self) -> dict:
        out = {}
        for layer in self.layers():
            sub = layer.params()
            for v in sub:
                out.setdefault(v.name, v)
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def named_stats(self) -> dict:
        out = {}
        for layer in self.layers():
            bns = [layer] if isinstance(layer, BatchNorm) else [
                l for l in getattr(layer, "layers", lambda: [])() if isinstance(l, BatchNorm)]
            for b in bns:
                out[b.name] = b.stats
        return out

    def astype(self, dtype) -> "Model":
        for v in self.named_params().values():
            v.value = v.value.astype(dtype)
        for st in self.named_stats().values():
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.head_w.value.dtype

    def preprocess(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=self.dtype)
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (s, s):
            raise ad.ShapeError(f"expected N×3×{s}×{s} batch, got {x.shape}")
        return freq.hfri(x, self.image_spec) if self.cfg.use_hfri else x

    def features(self, batch, training: bool = False) -> ad.Variable:
        """Final-stage feature maps (before pooling)."""
        h = ad.Variable(self.preprocess(batch))
        for layer in self.stem:
            h = layer(h, training)
        h = ad.relu(h)
        for stage in self.stages:
            for layer in stage:
                h = layer(h, training)
        return h

    def forward(self, batch, training: bool = False) -> ad.Variable:
        h = ad.global_avg_pool(self.features(batch, training))
        return ad.linear(h, self.head_w, self.head_b)

    __call__ = forward


def build_model(cfg: ModelConfig) -> Model:
    m = Model(cfg.validate())
    m.init(cfg.seed)
    return m


def param_count(m) -> int:
    """Trainable parameter elements (running statistics excluded).

    Accepts a :class:`Model` or any single layer exposing ``params()``.
    """
    params = m.named_params().values() if hasattr(m, "named_params") else m.params()
    unique = {id(v): v for v in params}
    return int(sum(v.value.size for v in unique.values()))


def cam(m: Model, image) -> np.ndarray:
    """Class activation map for the predicted class, in [0, 1], at input resolution."""
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[None]
    feats = m.features(x[:1], training=False).value[0]
    logits = ad.linear(ad.global_avg_pool(feats[None]), m.head_w.value, m.head_b.value).value[0]
    k = int(np.argmax(logits))
    heat = np.tensordot(m.head_w.value[k], feats, axes=(0, 0))
    lo, hi = heat.min(), heat.max()
    heat = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    s = m.cfg.input_size
    rows = np.arange(s) * heat.shape[0] // s
    cols = np.arange(s) * heat.shape[1] // s
    return heat[np.ix_(rows, cols)]


# -- checkpoints ---------------------------------------------------------------------

def config_lines(cfg: ModelConfig) -> list:
    return C.to_lines(cfg, "model")


def save_checkpoint(m: Model, directory) -> Path:
    """Write ``manifest.txt`` (name -> tensor file), tensors and ``config.txt``."""
    d = Path(directory)
    (d / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, v in m.named_params().items():
        entries.append((name, v.value))
    for name, st in m.named_stats().items():
        entries.append((name + ".running_mean", st.mean))
        entries.append((name + ".running_var", st.var))
    lines = []
    for name, arr in entries:
        fname = f"tensors/{name}.fqt"
        T.save_tensor(d / fname, arr)
        lines.append(f"{name} {fname}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (d / "config.txt").write_text("\n".join(config_lines(m.cfg)) + "\n", encoding="utf-8")
    return d


def load_checkpoint(directory) -> Model:
    d = Path(directory)
    if not (d / "manifest.txt").is_file():
        raise FileNotFoundError(f"no checkpoint manifest in {d}")
    cfg = C.apply_pairs(ModelConfig(), "model", C.read_pairs(d / "config.txt"))
    m = build_model(cfg)
    params, stats = m.named_params(), m.named_stats()
    for line in (d / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, fname = line.split()
        arr = T.load_tensor(d / fname)
        if name in params:
            target = params[name]
            if target.shape != arr.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {target.shape}")
            target.value = arr
        elif name.endswith(".running_mean") and name[:-13] in stats:
            stats[name[:-13]].mean = arr
        elif name.endswith(".running_var") and name[:-12] in stats:
            stats[name[:-12]].var = arr
        else:
            raise ValueError(f"checkpoint entry {name!r} does not match the model")
    return m
