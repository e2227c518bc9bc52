"""CSI/pose data model, dataset IO, patch front end and the synthetic generator.

A CSI sample is a real amplitude tensor of shape ``(E, R, A, S, T)``:
transmitters, receivers, antennas, subcarriers and WiFi snapshots per pose
frame.  The network consumes it as an image of shape ``(A, E*R*S, T)`` with
antennas on the channel axis.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from einops import rearrange
from torch import nn

from .errors import ConfigError, DataError

FORMAT_VERSION = 1
CSI_FILE = "csi.f32"
POSE_FILE = "pose.f32"
META_FILE = "meta.json"
_F32 = np.dtype("<f4")


@dataclass
class CsiSample:
    values: np.ndarray  # (E, R, A, S, T)
    sequence_id: int
    frame_index: int

    def __post_init__(self):
        if self.values.ndim != 5:
            raise DataError(f"CSI sample must be 5-D (E,R,A,S,T), got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("CSI sample contains non-finite values")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PoseSample:
    values: np.ndarray  # (M, J, C)
    skeleton_id: str

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DataError(f"pose must be 3-D (M,J,C), got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("pose contains non-finite values")


@dataclass
class DatasetMeta:
    E: int
    R: int
    A: int
    S: int
    T: int
    M: int
    J: int
    C: int
    skeleton_id: str
    joint_names: list[str]
    sequences: list[tuple[int, int]]  # (sequence_id, length) in storage order
    N: int
    edges: list[tuple[int, int]] = field(default_factory=list)
    sequence_labels: dict[int, int] | None = None
    frame_index: list[int] | None = None
    unit: str = "mm"
    f_video: float | None = None
    f_wifi: float | None = None
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        for name in ("E", "R", "A", "S", "T", "M", "J", "C", "N"):
            if int(getattr(self, name)) <= 0:
                raise DataError(f"meta field {name} must be positive, got {getattr(self, name)}")
        if len(self.joint_names) != self.J:
            raise DataError(f"meta lists {len(self.joint_names)} joint names for J={self.J}")
        total = sum(length for _, length in self.sequences)
        if total != self.N:
            raise DataError(f"sequence lengths sum to {total} but meta declares N={self.N}")
        seen = set()
        for sid, length in self.sequences:
            if length < 1:
                raise DataError(f"sequence {sid} has non-positive length {length}")
            if sid in seen:
                raise DataError(f"sequence {sid} appears twice; its frames are not contiguous")
            seen.add(sid)
        if self.frame_index is not None:
            if len(self.frame_index) != self.N:
                raise DataError(f"frame_index has {len(self.frame_index)} entries for N={self.N}")
            expected = np.concatenate([np.arange(length) for _, length in self.sequences])
            bad = np.flatnonzero(np.asarray(self.frame_index) != expected)
            if bad.size:
                i = int(bad[0])
                raise DataError(
                    f"non-contiguous frame index at sample {i}: "
                    f"got {self.frame_index[i]}, expected {int(expected[i])}"
                )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.A, self.E * self.R * self.S, self.T

    @property
    def csi_shape(self) -> tuple[int, ...]:
        return self.E, self.R, self.A, self.S, self.T

    @property
    def pose_shape(self) -> tuple[int, ...]:
        return self.M, self.J, self.C

    def to_json(self) -> dict:
        d = asdict(self)
        d["sequences"] = [list(s) for s in self.sequences]
        d["edges"] = [list(e) for e in self.edges]
        if self.sequence_labels is not None:
            d["sequence_labels"] = {str(k): int(v) for k, v in self.sequence_labels.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetMeta":
        d = dict(d)
        try:
            d["sequences"] = [(int(s), int(n)) for s, n in d["sequences"]]
            d["edges"] = [(int(a), int(b)) for a, b in d.get("edges", [])]
            if d.get("sequence_labels") is not None:
                d["sequence_labels"] = {int(k): int(v) for k, v in d["sequence_labels"].items()}
            known = set(cls.__dataclass_fields__)
            return cls(**{k: v for k, v in d.items() if k in known})
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed meta.json: {exc}") from exc


@dataclass
class PatchTokens:
    tokens: np.ndarray | torch.Tensor  # (..., n, d)
    grid_rows: int
    grid_cols: int
    patch_height: int
    patch_width: int

    @property
    def n(self) -> int:
        return self.grid_rows * self.grid_cols


# ---------------------------------------------------------------------------
# image-like reshaping and patch tiling


def reshape_to_image(x: np.ndarray) -> np.ndarray:
    """(..., E, R, A, S, T) -> (..., A, E*R*S, T), height ordered (tx, rx, subcarrier)."""
    if x.ndim < 5:
        raise DataError(f"expected (..., E, R, A, S, T), got shape {x.shape}")
    return rearrange(x, "... e r a s t -> ... a (e r s) t")


def inverse_reshape(img: np.ndarray, E: int, R: int, S: int) -> np.ndarray:
    """Inverse of :func:`reshape_to_image`."""
    if img.shape[-2] != E * R * S:
        raise DataError(f"image height {img.shape[-2]} != E*R*S = {E * R * S}")
    return rearrange(img, "... a (e r s) t -> ... e r a s t", e=E, r=R, s=S)


def check_patch_dims(height: int, width: int, patch_height: int, patch_width: int) -> tuple[int, int]:
    """Return the patch grid (rows, cols); raise if the patch does not tile the image."""
    if patch_height <= 0 or patch_width <= 0:
        raise ConfigError(f"patch size must be positive, got {patch_height}x{patch_width}")
    if height % patch_height:
        raise ConfigError(
            f"patch_height={patch_height} does not divide image height E*R*S={height}"
        )
    if width % patch_width:
        raise ConfigError(f"patch_width={patch_width} does not divide temporal width T={width}")
    return height // patch_height, width // patch_width


def patchify(img, patch_height: int, patch_width: int):
    """(..., A, H, W) -> (..., n, A*ph*pw) raw patches in row-major grid order.

    Works on numpy arrays and torch tensors alike.
    """
    check_patch_dims(img.shape[-2], img.shape[-1], patch_height, patch_width)
    return rearrange(img, "... a (h p) (w q) -> ... (h w) (a p q)", p=patch_height, q=patch_width)


def unpatchify(patches, grid_rows: int, grid_cols: int, patch_height: int, patch_width: int):
    """Inverse of :func:`patchify`."""
    return rearrange(
        patches,
        "... (h w) (a p q) -> ... a (h p) (w q)",
        h=grid_rows,
        w=grid_cols,
        p=patch_height,
        q=patch_width,
    )


class PatchEmbed(nn.Module):
    """Linear embedding of non-overlapping patches (a strided convolution)."""

    def __init__(self, in_chans: int, patch_height: int, patch_width: int, d: int, bias: bool = True):
        super().__init__()
        self.patch_height = patch_height
        self.patch_width = patch_width
        self.proj = nn.Conv2d(
            in_chans, d, kernel_size=(patch_height, patch_width),
            stride=(patch_height, patch_width), bias=bias,
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        check_patch_dims(img.shape[-2], img.shape[-1], self.patch_height, self.patch_width)
        x = self.proj(img)  # (B, d, rows, cols)
        return x.flatten(2).transpose(1, 2)


def patchify_embed(img: np.ndarray, patch_height: int, patch_width: int, d: int,
                   weight: np.ndarray, bias: np.ndarray | None = None) -> PatchTokens:
    """Embed a single image ``(A, H, W)`` with explicit weights.

    ``weight`` has shape ``(d, A, patch_height, patch_width)`` (convolution
    layout); ``bias`` has shape ``(d,)`` or is None.
    """
    a, h, w = img.shape
    rows, cols = check_patch_dims(h, w, patch_height, patch_width)
    if weight.shape != (d, a, patch_height, patch_width):
        raise ConfigError(f"embedding weight shape {weight.shape} != {(d, a, patch_height, patch_width)}")
    embed = PatchEmbed(a, patch_height, patch_width, d, bias=bias is not None).double()
    with torch.no_grad():
        embed.proj.weight.copy_(torch.as_tensor(weight, dtype=torch.float64))
        if bias is not None:
            embed.proj.bias.copy_(torch.as_tensor(bias, dtype=torch.float64))
        tokens = embed(torch.as_tensor(img, dtype=torch.float64)[None])[0].numpy()
    return PatchTokens(tokens, rows, cols, patch_height, patch_width)


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    """Fixed sinusoidal position table, shape (n, d).

    Column 2k holds sin(pos / 10000**(2k/d)) and column 2k+1 the matching cos.
    """
    if d <= 0 or d % 2:
        raise ConfigError(f"positional embedding needs an even positive dimension, got d={d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 1.0 / 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def add_positional(tokens: PatchTokens) -> PatchTokens:
    t = tokens.tokens
    table = sinusoidal_table(t.shape[-2], t.shape[-1])
    if isinstance(t, torch.Tensor):
        out = t + torch.as_tensor(table, dtype=t.dtype)
    else:
        out = t + table.astype(t.dtype, copy=False)
    return PatchTokens(out, tokens.grid_rows, tokens.grid_cols, tokens.patch_height, tokens.patch_width)


# ---------------------------------------------------------------------------
# dataset container and IO


@dataclass
class CsiDataset:
    """In-memory dataset: ``csi`` is (N, E, R, A, S, T), ``pose`` is (N, M, J, C)."""

    meta: DatasetMeta
    csi: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        self.meta.validate()
        n = self.meta.N
        if self.csi.shape != (n, *self.meta.csi_shape):
            raise DataError(f"csi array shape {self.csi.shape} != {(n, *self.meta.csi_shape)}")
        if self.pose.shape != (n, *self.meta.pose_shape):
            raise DataError(f"pose array shape {self.pose.shape} != {(n, *self.meta.pose_shape)}")

    def __len__(self) -> int:
        return self.meta.N

    @property
    def sequence_ids(self) -> np.ndarray:
        return np.concatenate([np.full(n, sid, dtype=np.int64) for sid, n in self.meta.sequences])

    @property
    def frame_index(self) -> np.ndarray:
        return np.concatenate([np.arange(n, dtype=np.int64) for _, n in self.meta.sequences])

    @property
    def labels(self) -> np.ndarray | None:
        """Per-sample motion class, when the dataset carries sequence labels."""
        if self.meta.sequence_labels is None:
            return None
        return np.array([self.meta.sequence_labels[int(s)] for s in self.sequence_ids])

    def images(self) -> np.ndarray:
        return reshape_to_image(self.csi)

    def samples(self) -> Iterator[tuple[CsiSample, PoseSample]]:
        for i, (sid, fi) in enumerate(zip(self.sequence_ids, self.frame_index)):
            yield (CsiSample(self.csi[i], int(sid), int(fi)),
                   PoseSample(self.pose[i], self.meta.skeleton_id))

    def subset_sequences(self, sequence_ids) -> "CsiDataset":
        """Dataset restricted to the given sequences, storage order preserved."""
        keep = set(int(s) for s in sequence_ids)
        mask = np.isin(self.sequence_ids, list(keep))
        seqs = [(s, n) for s, n in self.meta.sequences if s in keep]
        meta = DatasetMeta.from_json(self.meta.to_json())
        meta.sequences = seqs
        meta.N = int(mask.sum())
        meta.frame_index = None if self.meta.frame_index is None else [
            int(f) for f in np.asarray(self.meta.frame_index)[mask]
        ]
        if meta.sequence_labels is not None:
            meta.sequence_labels = {s: meta.sequence_labels[s] for s, _ in seqs}
        return CsiDataset(meta, self.csi[mask], self.pose[mask])


def save_dataset(path, dataset: CsiDataset) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / META_FILE, "w") as fh:
        json.dump(dataset.meta.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    np.ascontiguousarray(dataset.csi, dtype=_F32).tofile(path / CSI_FILE)
    np.ascontiguousarray(dataset.pose, dtype=_F32).tofile(path / POSE_FILE)


def _read_payload(file: Path, n: int, per_sample: tuple[int, ...], what: str) -> np.ndarray:
    if not file.exists():
        raise DataError(f"missing payload file {file}")
    item = int(np.prod(per_sample)) * _F32.itemsize
    size = os.path.getsize(file)
    if size % item:
        raise DataError(
            f"{file.name} is truncated: {size} bytes is not a multiple of the "
            f"{item}-byte {what} record"
        )
    if size != n * item:
        raise DataError(
            f"{file.name} holds {size // item} {what} records ({size} bytes) but meta declares "
            f"N={n} ({n * item} bytes)"
        )
    arr = np.fromfile(file, dtype=_F32).reshape(n, *per_sample)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{file.name} contains non-finite values")
    return arr.astype(np.float32, copy=False)


def read_dataset(path) -> CsiDataset:
    """Load a dataset directory fully into memory."""
    path = Path(path)
    meta_file = path / META_FILE
    if not meta_file.exists():
        raise DataError(f"missing {META_FILE} in {path}")
    try:
        with open(meta_file) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_file} is not valid JSON: {exc}") from exc
    meta = DatasetMeta.from_json(raw)
    meta.validate()
    csi = _read_payload(path / CSI_FILE, meta.N, meta.csi_shape, "CSI")
    pose = _read_payload(path / POSE_FILE, meta.N, meta.pose_shape, "pose")
    return CsiDataset(meta, csi, pose)


def load_dataset(path) -> tuple[DatasetMeta, Iterator[tuple[CsiSample, PoseSample]]]:
    ds = read_dataset(path)
    return ds.meta, ds.samples()


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    num_sequences: int = 8
    frames_per_sequence: int = 50
    E: int = 1
    R: int = 1
    A: int = 3
    S: int = 32
    T: int = 16
    J: int = 17
    C: int = 3
    motion_classes: int = 4
    noise_std: float = 0.1
    seed: int = 0
    posture_scale: float = 1.0  # spread of the per-class mean posture
    f_video: float = 10.0
    wavelength_mm: tuple[float, float] = (300.0, 600.0)

    def validate(self) -> None:
        for name in ("num_sequences", "frames_per_sequence", "E", "R", "A", "S", "T", "J", "C",
                     "motion_classes"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"synth.{name} must be positive, got {getattr(self, name)}")
        if self.posture_scale < 0:
            raise ConfigError(f"synth.posture_scale must be >= 0, got {self.posture_scale}")
        if self.noise_std < 0:
            raise ConfigError(f"synth.noise_std must be >= 0, got {self.noise_std}")
        if self.C not in (2, 3):
            raise ConfigError(f"synth.C must be 2 or 3, got {self.C}")
        if self.f_video <= 0:
            raise ConfigError("synth.f_video must be positive")


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide PRNG: numpy's Philox4x64-10 counter-based generator."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _rest_pose(parents: np.ndarray, depth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    J = len(parents)
    rest = np.zeros((J, 3))
    rest[0] = (0.0, 0.0, 1000.0)
    for j in np.argsort(depth, kind="stable")[1:]:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        rest[j] = rest[parents[j]] + rng.uniform(150.0, 350.0) * direction
    return rest


def _ring(angle: float, height: float, radius: float = 2500.0) -> list[float]:
    return [radius * math.cos(angle), radius * math.sin(angle), height]


def synth_generate(config: SynthConfig | None = None, **overrides) -> CsiDataset:
    """Generate a labelled synthetic CSI/pose dataset.

    Each sequence draws a motion class.  A class fixes a mean posture offset, a
    frequency and per-joint amplitude/phase of sinusoidal joint displacements
    around a rest pose; each sequence adds its own global phase.  CSI amplitude on link (e, r, a) and
    subcarrier s is ``1 + sum_j g_j sin(2 pi L_j(t) / lambda_s)`` where L_j is
    the tx -> joint -> rx-antenna path length, sampled T times per frame, plus
    Gaussian noise.
    """
    from .pose_decoder import skeleton_for_joint_count

    cfg = config or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**asdict(cfg), **overrides})
    cfg.validate()
    skel = skeleton_for_joint_count(cfg.J)
    rng = make_rng(cfg.seed)
    J, C, T, S = cfg.J, cfg.C, cfg.T, cfg.S

    parents, depth = skel.tree_parents()
    rest = _rest_pose(parents, depth, rng)
    if C == 2:
        rest[:, 2] = 0.0
    # distal joints move more
    scale = (30.0 + 30.0 * depth)[:, None]
    freqs = rng.uniform(0.2, 1.2, size=cfg.motion_classes)
    amps = rng.normal(size=(cfg.motion_classes, J, 3)) * scale
    phases = rng.uniform(0.0, 2 * math.pi, size=(cfg.motion_classes, J, 3))
    postures = rng.normal(size=(cfg.motion_classes, J, 3)) * cfg.posture_scale * scale
    if C == 2:
        amps[..., 2] = 0.0
        postures[..., 2] = 0.0
    gains = rng.uniform(0.5, 1.5, size=J) / J

    # receive antennas spread around the subject so that each link senses a
    # different projection of the joint displacements
    tx = np.array([_ring(math.pi + 0.5 * e, 1200.0 + 300.0 * e) for e in range(cfg.E)])
    rx = np.array([[_ring(2 * math.pi * (a + r / cfg.R) / cfg.A, 600.0 + 800.0 * (a % 2))
                    for a in range(cfg.A)] for r in range(cfg.R)])
    wavelengths = np.linspace(cfg.wavelength_mm[0], cfg.wavelength_mm[1], S)

    F = cfg.frames_per_sequence
    # balanced draw: every class appears as evenly as the sequence count allows
    classes = rng.permutation(np.arange(cfg.num_sequences) % cfg.motion_classes)
    seq_phase = rng.uniform(0.0, 2 * math.pi, size=cfg.num_sequences)
    times = (np.arange(F)[:, None] + np.arange(T)[None, :] / T) / cfg.f_video  # (F, T)

    csi = np.empty((cfg.num_sequences, F, cfg.E, cfg.R, cfg.A, S, T))
    pose = np.empty((cfg.num_sequences, F, 1, J, C))
    for q in range(cfg.num_sequences):
        k = classes[q]
        arg = 2 * math.pi * freqs[k] * times[..., None, None] + phases[k] + seq_phase[q]
        joints = rest + postures[k] + amps[k] * np.sin(arg)  # (F, T, J, 3)
        pose[q, :, 0] = joints[:, 0, :, :C]
        d_tx = np.linalg.norm(joints[:, :, None] - tx[None, None, :, None], axis=-1)  # (F,T,E,J)
        d_rx = np.linalg.norm(joints[:, :, None, None] - rx[None, None, :, :, None], axis=-1)  # (F,T,R,A,J)
        path = d_tx[:, :, :, None, None, :] + d_rx[:, :, None]  # (F,T,E,R,A,J)
        mod = np.sin(2 * math.pi * path[..., None] / wavelengths)  # (F,T,E,R,A,J,S)
        amp = 1.0 + np.tensordot(mod, gains, axes=([5], [0]))  # (F,T,E,R,A,S)
        csi[q] = np.moveaxis(amp, 1, -1)
    if cfg.noise_std > 0:
        csi = csi + rng.normal(0.0, cfg.noise_std, size=csi.shape)

    N = cfg.num_sequences * F
    meta = DatasetMeta(
        E=cfg.E, R=cfg.R, A=cfg.A, S=S, T=T, M=1, J=J, C=C,
        skeleton_id=skel.skeleton_id,
        joint_names=list(skel.joint_names),
        sequences=[(q, F) for q in range(cfg.num_sequences)],
        N=N,
        edges=[tuple(e) for e in skel.edges],
        sequence_labels={q: int(classes[q]) for q in range(cfg.num_sequences)},
        frame_index=[f for _ in range(cfg.num_sequences) for f in range(F)],
        unit="mm" if C == 3 else "px",
        f_video=float(cfg.f_video),
        f_wifi=float(cfg.f_video * T),
    )
    return CsiDataset(
        meta,
        csi.reshape(N, cfg.E, cfg.R, cfg.A, S, T).astype(np.float32),
        pose.reshape(N, 1, J, C).astype(np.float32),
    )
