"""Two-tower contrastive model with an adversarial attribute discriminator.

The image tower maps pre-extracted image features to ``h_v`` and then to a
unit-norm embedding ``v``; the text tower runs per token, mean-pools over
unmasked tokens to ``h_u`` and projects to ``u``. The discriminator reads
``h_v`` (vision_only) or ``[h_v; h_u]`` (multimodal) and outputs attribute
logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk

VISION_ONLY = "vision_only"
MULTIMODAL = "multimodal"
DISC_MODES = (VISION_ONLY, MULTIMODAL)


class ConfigurationError(ValueError):
    pass


@dataclass
class ArchConfig:
    d_img_in: int = 32
    d_txt_in: int = 16
    L_max: int = 8
    d_hv: int = 32
    d_hu: int = 16
    d_proj: int = 16
    enc_hidden_layers: tuple = (64,)
    disc_hidden_layers: tuple = (32, 32)
    C_attr: int = 3
    C_cls: int = 5
    disc_input_mode: str = MULTIMODAL
    activation: str = "relu"

    def __post_init__(self):
        self.enc_hidden_layers = tuple(int(w) for w in self.enc_hidden_layers)
        self.disc_hidden_layers = tuple(int(w) for w in self.disc_hidden_layers)
        dims = [self.d_img_in, self.d_txt_in, self.L_max, self.d_hv, self.d_hu,
                self.d_proj, self.C_attr, self.C_cls,
                *self.enc_hidden_layers, *self.disc_hidden_layers]
        if any(d < 1 for d in dims):
            raise ConfigurationError(f"all dimensions must be >= 1: {self}")
        if self.disc_input_mode not in DISC_MODES:
            raise ConfigurationError(
                f"disc_input_mode must be one of {DISC_MODES}, got {self.disc_input_mode!r}"
            )

    @property
    def disc_in(self) -> int:
        if self.disc_input_mode == MULTIMODAL:
            return self.d_hv + self.d_hu
        return self.d_hv

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_hidden_layers"] = list(self.enc_hidden_layers)
        d["disc_hidden_layers"] = list(self.disc_hidden_layers)
        return d

    def layer_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        """Parameter names and shapes in checkpoint order."""
        shapes = []

        def stack(prefix, widths):
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                shapes.append((f"{prefix}.{i}.W", (fan_in, fan_out)))
                shapes.append((f"{prefix}.{i}.b", (1, fan_out)))

        stack("img", [self.d_img_in, *self.enc_hidden_layers, self.d_hv])
        shapes += [("img.proj.W", (self.d_hv, self.d_proj)), ("img.proj.b", (1, self.d_proj))]
        stack("txt", [self.d_txt_in, *self.enc_hidden_layers, self.d_hu])
        shapes += [("txt.proj.W", (self.d_hu, self.d_proj)), ("txt.proj.b", (1, self.d_proj))]
        stack("disc", [self.disc_in, *self.disc_hidden_layers, self.C_attr])
        return shapes


GROUP_PREFIXES = {"w_v": "img.", "w_u": "txt.", "w_d": "disc."}


@dataclass
class ModelParams:
    arch: ArchConfig
    tensors: dict = field(default_factory=dict)
    tau_fixed: float = 0.1
    tau_learnable: bool = False

    @property
    def tau(self) -> float:
        if self.tau_learnable:
            return float(np.exp(self.tensors["log_tau"][0, 0]))
        return self.tau_fixed

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.tensors)
        if group == "tau":
            return [n for n in self.tensors if n == "log_tau"]
        prefix = GROUP_PREFIXES[group]
        return [n for n in self.tensors if n.startswith(prefix)]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            {k: v.copy() for k, v in self.tensors.items()},
            self.tau_fixed,
            self.tau_learnable,
        )


def init_params(arch: ArchConfig, seed: int, tau: float = 0.1,
                tau_learnable: bool = False) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if tau <= 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (rows, cols) in arch.layer_shapes():
        if name.endswith(".W"):
            limit = math.sqrt(6.0 / (rows + cols))
            tensors[name] = rng.uniform(-limit, limit, size=(rows, cols))
        else:
            tensors[name] = np.zeros((rows, cols))
    if tau_learnable:
        tensors["log_tau"] = np.full((1, 1), math.log(tau))
    return ModelParams(arch, tensors, float(tau), tau_learnable)


def _mlp(params: ModelParams, prefix: str, x: np.ndarray, act: str,
         final_act: str | None = None):
    """Run layers ``prefix.0 .. prefix.k``; ``final_act`` overrides the last one."""
    n = 0
    while f"{prefix}.{n}.W" in params.tensors:
        n += 1
    if n == 0:
        raise ConfigurationError(f"no layers found under {prefix!r}")
    steps = []
    h = x
    for i in range(n):
        lin = nk.affine(h, params.tensors[f"{prefix}.{i}.W"], params.tensors[f"{prefix}.{i}.b"])
        kind = final_act if (i == n - 1 and final_act is not None) else act
        nl = nk.nonlinearity(lin.output, kind)
        steps.append((i, lin, nl))
        h = nl.output

    def backward(dout):
        grads = {}
        g = dout
        for i, lin, nl in reversed(steps):
            (g,) = nl.backward(g)
            g, dW, db = lin.backward(g)
            grads[f"{prefix}.{i}.W"] = dW
            grads[f"{prefix}.{i}.b"] = db
        return g, grads

    return h, backward


def _project(params, prefix, h):
    lin = nk.affine(h, params.tensors[f"{prefix}.proj.W"], params.tensors[f"{prefix}.proj.b"])
    norm = nk.l2_normalize_rows(lin.output)

    def backward(demb):
        (g,) = norm.backward(demb)
        dh, dW, db = lin.backward(g)
        return dh, {f"{prefix}.proj.W": dW, f"{prefix}.proj.b": db}

    return norm.output, backward


def _add_grads(into: dict, new: dict):
    for k, v in new.items():
        if k in into:
            into[k] = into[k] + v
        else:
            into[k] = v


def image_forward(params: ModelParams, images):
    """Returns ``(h_v, v, backward)``; ``backward(dh_v, dv)`` gives grads."""
    images = nk.as_tensor(images)
    if images.shape[1] != params.arch.d_img_in:
        raise nk.DimensionError(
            f"image features have {images.shape[1]} columns, model expects {params.arch.d_img_in}"
        )
    h_v, tower_bw = _mlp(params, "img", images, params.arch.activation)
    v, proj_bw = _project(params, "img", h_v)

    def backward(dh_v, dv):
        grads = {}
        dh = np.zeros_like(h_v) if dh_v is None else dh_v
        if dv is not None:
            dh_proj, g = proj_bw(dv)
            _add_grads(grads, g)
            dh = dh + dh_proj
        _, g = tower_bw(dh)
        _add_grads(grads, g)
        return grads

    return h_v, v, backward


def _text_inputs(arch: ArchConfig, tokens, masks):
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim == 1:
        masks = masks.reshape(1, -1)
    n = masks.shape[0]
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 3:
        tokens = tokens.reshape(-1, tokens.shape[2])
    tokens = nk.as_tensor(tokens)
    if masks.shape[1] != arch.L_max or tokens.shape != (n * arch.L_max, arch.d_txt_in):
        raise nk.DimensionError(
            f"text batch tokens {tokens.shape} / masks {masks.shape} do not match "
            f"L_max={arch.L_max}, d_txt_in={arch.d_txt_in}"
        )
    return tokens, masks


def text_forward(params: ModelParams, tokens, masks):
    """Returns ``(h_u, u, backward)``."""
    tokens, masks = _text_inputs(params.arch, tokens, masks)
    per_token, tower_bw = _mlp(params, "txt", tokens, params.arch.activation)
    pool = nk.masked_mean_pool_batch(per_token, masks)
    h_u = pool.output
    u, proj_bw = _project(params, "txt", h_u)

    def backward(dh_u, du):
        grads = {}
        dh = np.zeros_like(h_u) if dh_u is None else dh_u
        if du is not None:
            dh_proj, g = proj_bw(du)
            _add_grads(grads, g)
            dh = dh + dh_proj
        (dtok,) = pool.backward(dh)
        _, g = tower_bw(dtok)
        _add_grads(grads, g)
        return grads

    return h_u, u, backward


def disc_forward(params: ModelParams, h_v, h_u, mode: str | None = None):
    """Returns ``(s, backward)``; ``backward(ds) -> (grads, dh_v, dh_u)``."""
    mode = params.arch.disc_input_mode if mode is None else mode
    if mode != params.arch.disc_input_mode:
        raise ConfigurationError(
            f"discriminator built for {params.arch.disc_input_mode!r}, called with {mode!r}"
        )
    h_v = nk.as_tensor(h_v)
    if mode == MULTIMODAL:
        cat = nk.concat_cols(h_v, h_u)
        x = cat.output
    else:
        cat = None
        x = h_v
    if x.shape[1] != params.arch.disc_in:
        raise ConfigurationError(
            f"discriminator input width {x.shape[1]} != configured {params.arch.disc_in}"
        )
    s, mlp_bw = _mlp(params, "disc", x, params.arch.activation, final_act="identity")

    def backward(ds):
        dx, grads = mlp_bw(ds)
        if cat is None:
            return grads, dx, None
        dh_v, dh_u = cat.backward(dx)
        return grads, dh_v, dh_u

    return s, backward


def encode_image(params: ModelParams, images):
    h_v, v, _ = image_forward(params, images)
    return h_v, v


def encode_text(params: ModelParams, tokens, masks):
    h_u, u, _ = text_forward(params, tokens, masks)
    return h_u, u


def discriminate(params: ModelParams, h_v, h_u, mode: str | None = None) -> np.ndarray:
    s, _ = disc_forward(params, h_v, h_u, mode)
    return s


def gradient_reversal(x, alpha: float) -> nk.DualResult:
    """Identity forward; backward scales the incoming gradient by ``-alpha``."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    x = nk.as_tensor(x)

    def backward(dout):
        if alpha == 0:
            return (np.zeros_like(dout),)
        return (-alpha * dout,)

    return nk.DualResult(x, backward)


@dataclass
class FeatureBatch:
    h_v: np.ndarray
    h_u: np.ndarray
    v: np.ndarray
    u: np.ndarray


def forward_features(params: ModelParams, images, tokens, masks) -> FeatureBatch:
    h_v, v = encode_image(params, images)
    h_u, u = encode_text(params, tokens, masks)
    return FeatureBatch(h_v, h_u, v, u)


# -- checkpoints -------------------------------------------------------------

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


def save_checkpoint(params: ModelParams, directory, seed: int = 0, step: int = 0,
                    extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = params.names()
    manifest = {
        "format": "adfair-checkpoint/1",
        "arch": params.arch.to_dict(),
        "parameters": [{"name": n, "shape": list(params.tensors[n].shape)} for n in names],
        "tau": params.tau,
        "tau_learnable": params.tau_learnable,
        "seed": int(seed),
        "step": int(step),
    }
    if extra:
        manifest.update(extra)
    blob = b"".join(
        np.ascontiguousarray(params.tensors[n], dtype="<f4").tobytes() for n in names
    )
    (directory / WEIGHTS).write_bytes(blob)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[ModelParams, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    arch = ArchConfig(**manifest["arch"])
    flat = np.frombuffer((directory / WEIGHTS).read_bytes(), dtype="<f4")
    expected = dict(arch.layer_shapes())
    total = sum(int(np.prod(e["shape"])) for e in manifest["parameters"])
    if total != flat.size:
        raise ConfigurationError(
            f"weights.bin holds {flat.size} values, manifest describes {total}"
        )
    tensors = {}
    offset = 0
    for entry in manifest["parameters"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name in expected and expected[name] != shape:
            raise ConfigurationError(f"checkpoint shape for {name} is {shape}, arch says {expected[name]}")
        size = int(np.prod(shape))
        tensors[name] = flat[offset:offset + size].astype(np.float64).reshape(shape)
        offset += size
    params = ModelParams(arch, tensors, float(manifest["tau"]), bool(manifest["tau_learnable"]))
    return params, manifest
