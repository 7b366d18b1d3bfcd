"""The seven trainable components and the channel modulation operator.

Feature maps follow the ``N x H' x W' x C`` (channels-last) convention at every
public boundary; the convolutions permute internally.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation

ENC = "enc"
FRM = "frm"
SRM_REAL = "srm_real"
SRM_FAKE = "srm_fake"
BC = "bc"
DEP = "dep"
DIS = "dis"
PARAM_SETS = (ENC, FRM, SRM_REAL, SRM_FAKE, BC, DEP, DIS)

_ACTIVATIONS = {
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
    "relu": nn.ReLU,
    "elu": nn.ELU,
    "tanh": nn.Tanh,
    "silu": nn.SiLU,
}


@dataclass
class ArchConfig:
    in_channels: int = 6
    image_size: tuple = (32, 32)
    enc_widths: tuple = (16, 32, 32)
    head_hidden: int = 16
    depth_size: tuple = (16, 16)
    n_domains: int = 3
    activation: str = "leaky_relu"
    # per-sample GroupNorm after every encoder conv ("group") or nothing ("none")
    norm: str = "group"
    # multiply softmax channel weights by C so modulation preserves magnitude
    frm_rescale: bool = False
    zero_init_heads: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.enc_widths = tuple(self.enc_widths)
        self.depth_size = tuple(self.depth_size)
        if self.activation not in _ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.norm not in ("group", "none"):
            raise ContractViolation(f"unknown norm {self.norm!r}")
        if self.channels < 2:
            raise ContractViolation("encoder must produce at least 2 channels")
        if self.n_domains < 2:
            raise ContractViolation("discriminator needs at least 2 domains")

    @property
    def channels(self) -> int:
        return self.enc_widths[-1]

    @property
    def feature_size(self) -> tuple:
        h, w = self.image_size
        for _ in self.enc_widths:
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


def _act(cfg):
    return _ACTIVATIONS[cfg.activation]()


def _norm(cfg, width):
    if cfg.norm == "none":
        return nn.Identity()
    return nn.GroupNorm(max(1, width // 8), width)


def _zero(layer):
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)


def _nchw(x):
    return x.permute(0, 3, 1, 2)


def _nhwc(x):
    return x.permute(0, 2, 3, 1)


class Encoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        layers, prev = [], cfg.in_channels
        for width in cfg.enc_widths:
            layers += [nn.Conv2d(prev, width, 3, stride=2, padding=1), _norm(cfg, width), _act(cfg)]
            prev = width
        layers += [nn.Conv2d(prev, prev, 3, padding=1), _norm(cfg, prev), _act(cfg)]
        self.body = nn.Sequential(*layers)

    def forward(self, images):
        return _nhwc(self.body(_nchw(images)))


class PooledHead(nn.Module):
    """Global average pool followed by a two-layer perceptron."""

    def __init__(self, cfg: ArchConfig, out_features: int):
        super().__init__()
        self.hidden = nn.Linear(cfg.channels, cfg.head_hidden)
        self.act = _act(cfg)
        self.out = nn.Linear(cfg.head_hidden, out_features)
        if cfg.zero_init_heads:
            _zero(self.out)

    def forward(self, feats):
        return self.out(self.act(self.hidden(feats.mean(dim=(1, 2)))))


class ConvHead(nn.Module):
    """3x3 conv, global pool, linear layer; used by the classifier and discriminator."""

    def __init__(self, cfg: ArchConfig, out_features: int):
        super().__init__()
        self.conv = nn.Conv2d(cfg.channels, cfg.head_hidden, 3, padding=1)
        self.act = _act(cfg)
        self.out = nn.Linear(cfg.head_hidden, out_features)
        if cfg.zero_init_heads:
            _zero(self.out)

    def forward(self, feats):
        h = self.act(self.conv(_nchw(feats)))
        return self.out(h.mean(dim=(2, 3)))


class DepthHead(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.size = cfg.depth_size
        self.conv = nn.Conv2d(cfg.channels, cfg.head_hidden, 3, padding=1)
        self.act = _act(cfg)
        self.out = nn.Conv2d(cfg.head_hidden, 1, 3, padding=1)
        if cfg.zero_init_heads:
            _zero(self.out)

    def forward(self, feats):
        x = F.interpolate(_nchw(feats), size=self.size, mode="nearest")
        return self.out(self.act(self.conv(x)))[:, 0]


def _component_seed(seed: int, name: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 31)


def _build(name, cfg):
    if name == ENC:
        return Encoder(cfg)
    if name == FRM:
        return PooledHead(cfg, cfg.channels)
    if name in (SRM_REAL, SRM_FAKE):
        return PooledHead(cfg, 1)
    if name == BC:
        return ConvHead(cfg, 1)
    if name == DEP:
        return DepthHead(cfg)
    if name == DIS:
        return ConvHead(cfg, cfg.n_domains)
    raise ContractViolation(f"unknown parameter set {name!r}")


class ModelState:
    """All parameter sets plus one Adam optimizer per set.

    Each component is initialized from its own seed derived from ``seed`` and
    its name, so omitting a component never changes the others' init.
    ``components`` selects which sets exist; absent ones are ``None``.
    """

    def __init__(self, cfg: ArchConfig = None, seed: int = 0, components=PARAM_SETS):
        self.cfg = cfg or ArchConfig()
        self.seed = seed
        self.modules = {}
        for name in PARAM_SETS:
            if name not in components:
                self.modules[name] = None
                continue
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(_component_seed(seed, name))
                self.modules[name] = _build(name, self.cfg).to(self.cfg.torch_dtype)
        if self.modules[ENC] is None:
            raise ContractViolation("the encoder is required")
        self.optimizers = {}
        self.step = 0

    def __getitem__(self, name):
        return self.modules[name]

    def has(self, name) -> bool:
        return self.modules.get(name) is not None

    @property
    def components(self):
        return tuple(n for n in PARAM_SETS if self.has(n))

    def parameters(self, name):
        if name not in self.modules:
            raise ContractViolation(f"unknown parameter set {name!r}")
        if self.modules[name] is None:
            raise ContractViolation(f"parameter set {name!r} is absent from this model")
        return list(self.modules[name].parameters())

    def optimizer(self, name, lr):
        opt = self.optimizers.get(name)
        if opt is None:
            opt = torch.optim.Adam(self.parameters(name), lr=lr)
            self.optimizers[name] = opt
        for group in opt.param_groups:
            group["lr"] = lr
        return opt

    def snapshot(self) -> dict:
        return {name: {k: v.detach().cpu().numpy().copy() for k, v in m.state_dict().items()}
                for name, m in self.modules.items() if m is not None}

    def set_hashes(self) -> dict:
        """SHA-256 digest of every parameter set's raw bytes."""
        out = {}
        for name, m in self.modules.items():
            if m is None:
                continue
            h = hashlib.sha256()
            for k, v in sorted(m.state_dict().items()):
                h.update(k.encode())
                h.update(v.detach().cpu().numpy().tobytes())
            out[name] = h.hexdigest()
        return out

    def n_parameters(self, name=None) -> int:
        names = [name] if name else self.components
        return sum(p.numel() for n in names for p in self.parameters(n))


def _as_tensor(state, x):
    if isinstance(x, torch.Tensor):
        return x.to(state.cfg.torch_dtype)
    return torch.as_tensor(np.asarray(x), dtype=state.cfg.torch_dtype)


def check_features(feats, channels=None):
    if feats.ndim != 4:
        raise ContractViolation(f"feature map must be N x H x W x C, got shape {tuple(feats.shape)}")
    if channels is not None and feats.shape[-1] != channels:
        raise ContractViolation(f"expected {channels} channels, got {feats.shape[-1]}")


def encoder_forward(state: ModelState, images):
    x = _as_tensor(state, images)
    cfg = state.cfg
    if x.ndim != 4 or x.shape[-1] != cfg.in_channels or tuple(x.shape[1:3]) != cfg.image_size:
        raise ContractViolation(
            f"expected images N x {cfg.image_size[0]} x {cfg.image_size[1]} x {cfg.in_channels}, "
            f"got {tuple(x.shape)}")
    return state[ENC](x)


def frm_forward(state: ModelState, feats):
    """Per-sample softmax weights over the C channels."""
    check_features(feats, state.cfg.channels)
    return torch.softmax(state[FRM](feats), dim=-1)


def modulate(weights, feats):
    """Scale every channel of every sample: ``out[n,h,w,c] = weights[n,c] * feats[n,h,w,c]``."""
    check_features(feats)
    if weights.ndim != 2 or weights.shape[0] != feats.shape[0] or weights.shape[1] != feats.shape[-1]:
        raise ContractViolation(
            f"channel weights {tuple(weights.shape)} do not match features {tuple(feats.shape)}")
    return feats * weights[:, None, None, :]


def apply_frm(state: ModelState, feats):
    """Return ``(F_FRM, A)``; the identity path with ``A=None`` when FRM is absent."""
    if not state.has(FRM):
        return feats, None
    weights = frm_forward(state, feats)
    scale = weights * state.cfg.channels if state.cfg.frm_rescale else weights
    return modulate(scale, feats), weights


def srm_forward(state: ModelState, feats_frm, labels):
    """Sample weights in (0, 1); live rows go through SRM_real, spoof rows through SRM_fake."""
    check_features(feats_frm, state.cfg.channels)
    y = torch.as_tensor(np.asarray(labels) if not isinstance(labels, torch.Tensor) else labels)
    if y.shape != (feats_frm.shape[0],):
        raise ContractViolation("labels must be a length-N vector")
    out = torch.zeros(feats_frm.shape[0], dtype=feats_frm.dtype)
    for name, cls in ((SRM_REAL, 1), (SRM_FAKE, 0)):
        idx = torch.nonzero(y == cls).flatten()
        if idx.numel():
            logits = state[name](feats_frm[idx])[:, 0]
            out = out.index_put((idx,), torch.sigmoid(logits))
    return out


def discriminator_forward(state: ModelState, feats_frm):
    check_features(feats_frm, state.cfg.channels)
    return torch.softmax(state[DIS](feats_frm), dim=-1)


def classifier_forward(state: ModelState, feats_frm):
    check_features(feats_frm, state.cfg.channels)
    return torch.sigmoid(state[BC](feats_frm)[:, 0])


def depth_forward(state: ModelState, feats_frm):
    check_features(feats_frm, state.cfg.channels)
    return torch.sigmoid(state[DEP](feats_frm))


def save_checkpoint(state: ModelState, path, extra=None):
    """Write ``<path>.npz`` (parameters and Adam state) and ``<path>.json`` (manifest)."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, sd in state.snapshot().items():
        for k, v in sd.items():
            arrays[f"param/{name}/{k}"] = v
    optim_meta = {}
    for name, opt in state.optimizers.items():
        sd = opt.state_dict()
        optim_meta[name] = {"lr": sd["param_groups"][0]["lr"]}
        for idx, st in sd["state"].items():
            for k, v in st.items():
                arrays[f"optim/{name}/{idx}/{k}"] = v.detach().cpu().numpy()
    np.savez(path.with_suffix(".npz"), **arrays)
    manifest = {
        "arch": asdict(state.cfg),
        "components": list(state.components),
        "seed": state.seed,
        "step": state.step,
        "optimizers": optim_meta,
    }
    manifest.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path.with_suffix(".npz")


def load_checkpoint(path) -> ModelState:
    """Rebuild a ModelState; parameter sets missing from the archive stay absent."""
    path = Path(path).with_suffix("")
    manifest = json.loads(path.with_suffix(".json").read_text())
    cfg = ArchConfig(**manifest["arch"])
    with np.load(path.with_suffix(".npz")) as z:
        arrays = {k: z[k] for k in z.files}
    present = {k.split("/")[1] for k in arrays if k.startswith("param/")}
    state = ModelState(cfg, seed=manifest.get("seed", 0), components=[n for n in PARAM_SETS if n in present])
    for name in state.components:
        prefix = f"param/{name}/"
        sd = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
        try:
            state[name].load_state_dict(sd)
        except RuntimeError as exc:
            raise ContractViolation(f"checkpoint set {name!r} does not fit the architecture: {exc}") from exc
    for name, meta in manifest.get("optimizers", {}).items():
        if not state.has(name):
            continue
        opt = state.optimizer(name, meta["lr"])
        sd = opt.state_dict()
        prefix = f"optim/{name}/"
        for k, v in arrays.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split("/")
                sd["state"].setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
        opt.load_state_dict(sd)
    state.step = manifest.get("step", 0)
    return state
