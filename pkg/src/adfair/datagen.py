"""Synthetic biased image/text feature datasets.

Each sample gets a group ``g`` drawn from ``group_marginals`` and a label
``y`` drawn from the group's row of ``prevalence``. Features are a linear
mix of class and group directions plus Gaussian noise::

    img_feat = A_cls[y] + leak_img * A_grp[g] + noise
    token    = B_cls[y] + leak_txt * B_grp[g] + noise   (per unmasked token)

Directions are independent seeded unit vectors, so group directions
overlap the class directions slightly: the group offset nudges samples
toward some classes, which is the spurious correlation a debiased encoder
has to undo. Projecting out the group span leaves the class signal
linearly separable.

With ``instance_scale > 0`` a per-sample latent is added to both
modalities through fixed maps, so an image matches its own report rather
than just any report of the same class.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test_pool", "test")
REAL_FMT = "%.9g"


class GenConfigError(ValueError):
    pass


class CellPopulationError(ValueError):
    pass


@dataclass
class GenConfig:
    name: str = "custom"
    seed: int = 0
    basis_seed: int = 1234
    n_train: int = 2000
    n_val: int = 400
    n_test_pool: int = 6000
    test_per_cell: int = 30
    C_cls: int = 5
    C_attr: int = 3
    group_marginals: list = field(default_factory=lambda: [0.7, 0.2, 0.1])
    prevalence: list = field(default_factory=list)
    leak_img: float = 1.0
    leak_txt: float = 1.0
    noise_sigma: float = 0.35
    instance_dim: int = 8
    instance_scale: float = 0.0
    d_img_in: int = 32
    d_txt_in: int = 16
    L_max: int = 8

    def __post_init__(self):
        if not self.prevalence:
            self.prevalence = [[1.0 / self.C_cls] * self.C_cls for _ in range(self.C_attr)]
        self.validate()

    def validate(self):
        marg = np.asarray(self.group_marginals, dtype=np.float64)
        if marg.shape != (self.C_attr,) or np.any(marg < 0) or abs(marg.sum() - 1) > 1e-9:
            raise GenConfigError(
                f"group_marginals must be a length-{self.C_attr} probability vector, "
                f"got {self.group_marginals}"
            )
        prev = np.asarray(self.prevalence, dtype=np.float64)
        if prev.shape != (self.C_attr, self.C_cls):
            raise GenConfigError(
                f"prevalence must be {self.C_attr}x{self.C_cls}, got shape {prev.shape}"
            )
        if np.any(prev < 0) or np.any(np.abs(prev.sum(axis=1) - 1) > 1e-9):
            raise GenConfigError("prevalence rows must be probability vectors")
        if min(self.leak_img, self.leak_txt, self.noise_sigma, self.instance_scale) < 0:
            raise GenConfigError(
                "leak_img, leak_txt, noise_sigma and instance_scale must be >= 0"
            )
        for name in ("n_train", "n_val", "n_test_pool", "test_per_cell",
                     "C_cls", "C_attr", "d_img_in", "d_txt_in", "L_max"):
            if getattr(self, name) < 1:
                raise GenConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "cxp-analog": dict(
        name="cxp-analog",
        leak_txt=0.1,
        instance_scale=2.0,
        seed=11,
        C_cls=5,
        C_attr=3,
        group_marginals=[0.7, 0.2, 0.1],
        prevalence=[
            [0.30, 0.25, 0.20, 0.15, 0.10],
            [0.15, 0.20, 0.20, 0.20, 0.25],
            [0.10, 0.35, 0.15, 0.10, 0.30],
        ],
    ),
    "mimic-analog": dict(
        name="mimic-analog",
        leak_txt=0.1,
        instance_scale=2.0,
        seed=23,
        C_cls=5,
        C_attr=3,
        group_marginals=[0.7, 0.2, 0.1],
        prevalence=[
            [0.20, 0.30, 0.15, 0.20, 0.15],
            [0.25, 0.15, 0.25, 0.15, 0.20],
            [0.30, 0.20, 0.10, 0.25, 0.15],
        ],
    ),
}


def preset(name: str, **overrides) -> GenConfig:
    if name not in PRESETS:
        raise GenConfigError(f"unknown dataset preset {name!r}; known: {sorted(PRESETS)}")
    fields = copy.deepcopy(PRESETS[name])
    fields.update(overrides)
    return GenConfig(**fields)


@dataclass
class Dataset:
    """Column-oriented split: one row per :class:`SampleRecord`."""

    sample_id: np.ndarray
    group: np.ndarray
    label: np.ndarray
    images: np.ndarray
    tokens: np.ndarray  # N x L_max x d_txt_in
    masks: np.ndarray  # N x L_max, 0/1

    def __len__(self):
        return int(self.sample_id.shape[0])

    @property
    def y_attr(self):
        return self.group

    @property
    def y_cls(self):
        return self.label

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.sample_id[idx], self.group[idx], self.label[idx],
                       self.images[idx], self.tokens[idx], self.masks[idx])

    def records(self):
        for i in range(len(self)):
            yield SampleRecord(int(self.sample_id[i]), int(self.group[i]), int(self.label[i]),
                               self.images[i], self.tokens[i], self.masks[i])


@dataclass
class SampleRecord:
    sample_id: int
    group: int
    label: int
    img_feat: np.ndarray
    txt_tokens: np.ndarray
    txt_mask: np.ndarray


@dataclass
class Prompts:
    tokens: np.ndarray  # C_cls x L_max x d_txt_in
    masks: np.ndarray  # C_cls x L_max


@dataclass
class GeneratedData:
    config: GenConfig
    splits: dict
    prompts: Prompts


def _unit_rows(rng, n_rows, dim):
    x = rng.standard_normal((n_rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def direction_bases(config: GenConfig):
    """``(A_cls, A_grp, B_cls, B_grp, S_img, S_txt)`` from ``basis_seed``.

    The bases depend only on ``basis_seed`` and the dimensions, so presets
    with different sampling seeds share one feature space.
    """
    rng = np.random.default_rng(config.basis_seed)
    return (_unit_rows(rng, config.C_cls, config.d_img_in),
            _unit_rows(rng, config.C_attr, config.d_img_in),
            _unit_rows(rng, config.C_cls, config.d_txt_in),
            _unit_rows(rng, config.C_attr, config.d_txt_in),
            _unit_rows(rng, config.instance_dim, config.d_img_in),
            _unit_rows(rng, config.instance_dim, config.d_txt_in))


def _sample_split(rng, config: GenConfig, n: int, bases, id_offset: int) -> Dataset:
    a_cls, a_grp, b_cls, b_grp, s_img, s_txt = bases
    prev = np.asarray(config.prevalence, dtype=np.float64)
    group = rng.choice(config.C_attr, size=n, p=np.asarray(config.group_marginals, dtype=np.float64))
    u = rng.random(n)
    cdf = np.cumsum(prev, axis=1)
    label = np.minimum((u[:, None] >= cdf[group]).sum(axis=1), config.C_cls - 1)
    images = (a_cls[label] + config.leak_img * a_grp[group]
              + config.noise_sigma * rng.standard_normal((n, config.d_img_in)))
    counts = rng.integers(1, config.L_max + 1, size=n)
    masks = (np.arange(config.L_max)[None, :] < counts[:, None]).astype(np.float64)
    centre = b_cls[label] + config.leak_txt * b_grp[group]
    if config.instance_scale > 0:
        latent = config.instance_scale * rng.standard_normal((n, config.instance_dim))
        images = images + latent @ s_img / np.sqrt(config.instance_dim)
        centre = centre + latent @ s_txt / np.sqrt(config.instance_dim)
    noise = config.noise_sigma * rng.standard_normal((n, config.L_max, config.d_txt_in))
    tokens = (centre[:, None, :] + noise) * masks[:, :, None]
    ids = np.arange(id_offset, id_offset + n)
    return Dataset(ids, group.astype(np.int64), label.astype(np.int64), images, tokens, masks)


def balanced_test_sample(pool: Dataset, per_cell: int, C_cls: int, C_attr: int,
                         seed: int = 0) -> Dataset:
    """Draw exactly ``per_cell`` samples from every (class, group) cell."""
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(C_cls):
        for g in range(C_attr):
            cell = np.flatnonzero((pool.label == c) & (pool.group == g))
            if cell.size < per_cell:
                raise CellPopulationError(
                    f"cell (class={c}, group={g}) has {cell.size} samples, need {per_cell}"
                )
            chosen.append(np.sort(rng.choice(cell, size=per_cell, replace=False)))
    return pool.subset(np.concatenate(chosen))


def generate(config: GenConfig) -> GeneratedData:
    config.validate()
    bases = direction_bases(config)
    rng = np.random.default_rng(config.seed)
    splits = {}
    offset = 0
    for name, n in (("train", config.n_train), ("val", config.n_val),
                    ("test_pool", config.n_test_pool)):
        splits[name] = _sample_split(rng, config, n, bases, offset)
        offset += n
    test_seed = int(rng.integers(0, 2 ** 31 - 1))
    splits["test"] = balanced_test_sample(
        splits["test_pool"], config.test_per_cell, config.C_cls, config.C_attr, test_seed
    )
    b_cls = bases[2]
    prompts = Prompts(
        tokens=np.repeat(b_cls[:, None, :], config.L_max, axis=1),
        masks=np.ones((config.C_cls, config.L_max)),
    )
    return GeneratedData(config, splits, prompts)


# -- files -------------------------------------------------------------------

def column_names(d_img_in: int, L_max: int, d_txt_in: int, lead=("sample_id", "group", "label")):
    cols = list(lead)
    cols += [f"v_{i}" for i in range(d_img_in)]
    cols += [f"t_{l}_{k}" for l in range(L_max) for k in range(d_txt_in)]
    cols += [f"m_{l}" for l in range(L_max)]
    return cols


def _format_rows(lead: np.ndarray, reals: np.ndarray, masks: np.ndarray) -> list[str]:
    lines = []
    for i in range(lead.shape[0]):
        parts = [str(int(x)) for x in lead[i]]
        parts += [REAL_FMT % x for x in reals[i]]
        parts += [str(int(x)) for x in masks[i]]
        lines.append(",".join(parts))
    return lines


def write_split(path, ds: Dataset):
    n = len(ds)
    d_img = ds.images.shape[1]
    L, d_txt = ds.tokens.shape[1:]
    lead = np.stack([ds.sample_id, ds.group, ds.label], axis=1)
    reals = np.concatenate([ds.images, ds.tokens.reshape(n, L * d_txt)], axis=1)
    lines = [",".join(column_names(d_img, L, d_txt))]
    lines += _format_rows(lead, reals, ds.masks)
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path, d_img_in: int, L_max: int, d_txt_in: int) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    expected = column_names(d_img_in, L_max, d_txt_in)
    if header != expected:
        raise GenConfigError(f"{path}: unexpected column layout")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = data.shape[0]
    img_end = 3 + d_img_in
    tok_end = img_end + L_max * d_txt_in
    return Dataset(
        data[:, 0].astype(np.int64),
        data[:, 1].astype(np.int64),
        data[:, 2].astype(np.int64),
        data[:, 3:img_end].copy(),
        data[:, img_end:tok_end].reshape(n, L_max, d_txt_in),
        data[:, tok_end:].copy(),
    )


def write_dataset(out_dir, data: GeneratedData) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = data.config
    for name in SPLITS:
        write_split(out / f"{name}.csv", data.splits[name])
    p = data.prompts
    lead = np.arange(cfg.C_cls).reshape(-1, 1)
    lines = [",".join(column_names(0, cfg.L_max, cfg.d_txt_in, lead=("label",)))]
    lines += _format_rows(lead, p.tokens.reshape(cfg.C_cls, -1), p.masks)
    (out / "prompts.csv").write_text("\n".join(lines) + "\n")
    manifest = {
        "format": "adfair-dataset/1",
        "config": cfg.to_dict(),
        "split_sizes": {name: len(data.splits[name]) for name in SPLITS},
        "columns": column_names(cfg.d_img_in, cfg.L_max, cfg.d_txt_in),
        "prompt_columns": column_names(0, cfg.L_max, cfg.d_txt_in, lead=("label",)),
        "real_format": REAL_FMT,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_dataset(data_dir) -> GeneratedData:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    cfg = GenConfig(**manifest["config"])
    splits = {
        name: read_split(data_dir / f"{name}.csv", cfg.d_img_in, cfg.L_max, cfg.d_txt_in)
        for name in SPLITS
    }
    raw = np.loadtxt(data_dir / "prompts.csv", delimiter=",", skiprows=1, ndmin=2)
    tok_end = 1 + cfg.L_max * cfg.d_txt_in
    order = np.argsort(raw[:, 0], kind="stable")
    raw = raw[order]
    if not np.array_equal(raw[:, 0], np.arange(cfg.C_cls)):
        raise GenConfigError(f"{data_dir / 'prompts.csv'}: need exactly one prompt per class")
    prompts = Prompts(raw[:, 1:tok_end].reshape(cfg.C_cls, cfg.L_max, cfg.d_txt_in),
                      raw[:, tok_end:].copy())
    return GeneratedData(cfg, splits, prompts)
