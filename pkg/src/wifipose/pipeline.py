"""End-to-end runs: configuration files, checkpoints, logs and reports.

A run configuration is a JSON or TOML document with optional sections::

    seed = 0
    [synth]     # SynthConfig fields
    [model]     # encoder architecture (d, heads, depth, patch_height, ...)
    [loss]      # tau, lambda_cl, lambda_unif, recon_scope
    [mask]      # strategy, ratio
    [pretrain]  # epochs, batch_size, lr, weight_decay, warmup_epochs, schedule, ...
    [decode]    # skeleton, decoder layers and its own training settings
    [eval]      # alphas, plots

Every key is optional; missing keys fall back to the estimator defaults.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import encode_checkpoint, load_checkpoint, rng_from_json, save_checkpoint
from .csi_data import CsiDataset, SynthConfig, read_dataset, save_dataset, synth_generate
from .errors import ConfigError, DataError
from .estimators import CsiPretrainer, PoseRegressor
from .metrics import DEFAULT_ALPHAS, MetricReport, evaluate_dataset
from .pose_decoder import SkeletonGraph

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

FORMAT_VERSION = 1
PRETRAIN_CKPT = "pretrain.ckpt"
DECODER_CKPT = "decoder.ckpt"
PRETRAIN_LOG = "pretrain_loss.csv"
DECODE_LOG = "decode_log.csv"
REPORT_FILE = "report.json"
PREDICTIONS_FILE = "predictions.npy"
EMBEDDINGS_FILE = "embeddings.csv"

PRETRAIN_LOG_COLUMNS = ("epoch", "l_mask", "l_cl", "l_unif", "total")
DECODE_LOG_COLUMNS = ("epoch", "train_loss", "val_mpjpe")

_MODEL_KEYS = ("d", "heads", "ffn_dim", "depth", "decoder_depth", "decoder_d", "decoder_heads",
               "patch_height", "patch_width", "proj_dim")
_LOSS_KEYS = ("tau", "lambda_cl", "lambda_unif", "recon_scope")
_MASK_KEYS = ("strategy", "ratio")
_PRETRAIN_KEYS = ("epochs", "steps_per_epoch", "batch_size", "lr", "weight_decay", "warmup_epochs",
                  "schedule", "grad_clip", "deterministic")
_DECODE_KEYS = ("skeleton", "gcn_layers", "attn_layers", "ffn_dim", "head_hidden", "use_prompt",
                "optimizer", "epochs", "steps_per_epoch", "batch_size", "lr", "weight_decay",
                "momentum", "grad_clip", "deterministic", "val_fraction")
_EVAL_KEYS = ("alphas", "plots")
SECTIONS = {
    "synth": tuple(f.name for f in fields(SynthConfig)),
    "model": _MODEL_KEYS,
    "loss": _LOSS_KEYS,
    "mask": _MASK_KEYS,
    "pretrain": _PRETRAIN_KEYS,
    "decode": _DECODE_KEYS,
    "eval": _EVAL_KEYS,
}


# ---------------------------------------------------------------------------
# configuration


def validate_config(cfg: dict) -> dict:
    """Check section and key names; returns a normalised copy with every section present."""
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a mapping of sections")
    out = {"seed": cfg.get("seed", 0)}
    unknown = set(cfg) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}; expected {sorted(SECTIONS)}")
    if not isinstance(out["seed"], int) or isinstance(out["seed"], bool) or out["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {out['seed']!r}")
    for name, keys in SECTIONS.items():
        section = cfg.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        bad = set(section) - set(keys)
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        out[name] = dict(section)
    return out


def load_config(path=None) -> dict:
    """Read a JSON or TOML run configuration (``None`` gives all defaults)."""
    if path is None:
        return validate_config({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix == ".toml":
            raw = tomllib.loads(text)
        elif path.suffix == ".json":
            raw = json.loads(text)
        else:
            raise ConfigError(f"config file must end in .json or .toml, got {path.name!r}")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return validate_config(raw)


def _with_seed(cfg: dict | None, seed: int | None) -> dict:
    cfg = validate_config(cfg if cfg is not None else {})
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def synth_config(cfg: dict | None = None, seed: int | None = None) -> SynthConfig:
    cfg = _with_seed(cfg, seed)
    params = {**cfg["synth"], "seed": cfg["seed"]}
    if "wavelength_mm" in params:
        params["wavelength_mm"] = tuple(params["wavelength_mm"])
    try:
        sc = SynthConfig(**params)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    sc.validate()
    return sc


def build_pretrainer(cfg: dict | None = None, seed: int | None = None) -> CsiPretrainer:
    cfg = _with_seed(cfg, seed)
    params = {**cfg["model"], **cfg["loss"], **cfg["pretrain"]}
    mask = cfg["mask"]
    if "strategy" in mask:
        params["mask_strategy"] = mask["strategy"]
    if "ratio" in mask:
        params["mask_ratio"] = mask["ratio"]
    est = CsiPretrainer(seed=cfg["seed"], **params)
    # surface configuration problems before any data is touched
    est.encoder_config().validate()
    est.loss_config()
    est.train_config()
    return est


def build_regressor(encoder, cfg: dict | None = None, seed: int | None = None,
                    skeleton: str | SkeletonGraph | None = None) -> PoseRegressor:
    cfg = _with_seed(cfg, seed)
    params = {k: v for k, v in cfg["decode"].items() if k != "val_fraction"}
    if skeleton is not None and "skeleton" not in params:
        params["skeleton"] = skeleton
    reg = PoseRegressor(encoder=encoder, seed=cfg["seed"], **params)
    reg.train_config()
    return reg


# ---------------------------------------------------------------------------
# checkpoints


def _params(est) -> dict:
    params = est.get_params(deep=False)
    params.pop("verbose", None)
    params.pop("encoder", None)
    return params


def _pretrainer_header(est: CsiPretrainer) -> dict:
    return {
        "kind": "pretrain",
        "format_version": FORMAT_VERSION,
        "params": _params(est),
        "csi_shape": list(est.csi_shape_),
        "input_mean": est.input_mean_,
        "input_std": est.input_std_,
        "n_steps": est.n_steps_,
        "history": est.history_,
        "optimizer": est.train_config().optimizer,
        "rng_state": getattr(est, "rng_state_", None),
    }


def _state_arrays(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict, prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise DataError(f"checkpoint tensors do not match the model: {exc}") from exc


def pretrainer_to_bytes(est: CsiPretrainer) -> bytes:
    return encode_checkpoint(_pretrainer_header(est), _state_arrays(est.model_))


def save_pretrainer(est: CsiPretrainer, path) -> Path:
    return save_checkpoint(path, _pretrainer_header(est), _state_arrays(est.model_))


def _pretrainer_from(header: dict, arrays: dict, prefix: str = "") -> CsiPretrainer:
    if header.get("kind") != "pretrain":
        raise DataError(f"expected a pre-training checkpoint, found kind {header.get('kind')!r}")
    est = CsiPretrainer(**header["params"])
    est.init_model(tuple(header["csi_shape"]), header["input_mean"], header["input_std"])
    _load_state(est.model_, arrays, prefix)
    est.model_.eval()
    est.n_steps_ = header["n_steps"]
    est.history_ = header["history"]
    if header.get("rng_state") is not None:
        est.rng_state_ = header["rng_state"]
    return est


def _regressor_header(reg: PoseRegressor) -> dict:
    params = _params(reg)
    if isinstance(params["skeleton"], SkeletonGraph):
        params["skeleton"] = None
    return {
        "kind": "decode",
        "format_version": FORMAT_VERSION,
        "params": params,
        "graph": reg.graph_.to_json(),
        "C": int(reg.decoder_.pose_mean.shape[-1]),
        "optimizer": reg.train_config().optimizer,
        "n_steps": reg.n_steps_,
        "history": reg.history_,
        "rng_state": getattr(reg, "rng_state_", None),
        "encoder": _pretrainer_header(reg.encoder_),
    }


def _regressor_arrays(reg: PoseRegressor) -> dict:
    return {**_state_arrays(reg.encoder_.model_, "encoder."), **_state_arrays(reg.decoder_, "decoder.")}


def regressor_to_bytes(reg: PoseRegressor) -> bytes:
    return encode_checkpoint(_regressor_header(reg), _regressor_arrays(reg))


def save_regressor(reg: PoseRegressor, path) -> Path:
    return save_checkpoint(path, _regressor_header(reg), _regressor_arrays(reg))


def _regressor_from(header: dict, arrays: dict) -> PoseRegressor:
    enc = _pretrainer_from(header["encoder"], arrays, "encoder.")
    params = dict(header["params"])
    if params.get("skeleton") is None:
        params["skeleton"] = SkeletonGraph.from_json(header["graph"])
    reg = PoseRegressor(encoder=enc, **params)
    for p in enc.model_.parameters():
        p.requires_grad_(False)
    reg.init_model(enc, header["C"])
    _load_state(reg.decoder_, arrays, "decoder.")
    reg.decoder_.eval()
    reg.n_steps_ = header["n_steps"]
    reg.history_ = header["history"]
    if header.get("rng_state") is not None:
        reg.rng_state_ = header["rng_state"]
    return reg


def load_estimator(path):
    """Load either checkpoint kind: returns a CsiPretrainer or a PoseRegressor."""
    header, arrays = load_checkpoint(path)
    kind = header.get("kind")
    if kind == "pretrain":
        return _pretrainer_from(header, arrays)
    if kind == "decode":
        return _regressor_from(header, arrays)
    raise DataError(f"{path}: unknown checkpoint kind {kind!r}")


def load_pretrainer(path) -> CsiPretrainer:
    est = load_estimator(path)
    return est.encoder_ if isinstance(est, PoseRegressor) else est


def load_regressor(path) -> PoseRegressor:
    est = load_estimator(path)
    if not isinstance(est, PoseRegressor):
        raise DataError(f"{path} is a pre-training checkpoint; a decoder checkpoint is required")
    return est


def checkpoint_rng(path) -> np.random.Generator:
    """The PRNG saved in a checkpoint, positioned where training stopped."""
    header, _ = load_checkpoint(path)
    if header.get("rng_state") is None:
        raise DataError(f"{path} carries no PRNG state")
    return rng_from_json(header["rng_state"])


# ---------------------------------------------------------------------------
# logs


def write_log(path, rows, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in columns])
    return path


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# runs


def split_by_sequence(dataset: CsiDataset, val_fraction: float = 0.25) -> tuple[CsiDataset, CsiDataset | None]:
    """Hold out the last ``val_fraction`` of sequences (at least one when there are two or more)."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"decode.val_fraction must be in [0, 1), got {val_fraction}")
    ids = [sid for sid, _ in dataset.meta.sequences]
    n_val = int(round(val_fraction * len(ids)))
    if val_fraction > 0 and len(ids) > 1:
        n_val = min(max(n_val, 1), len(ids) - 1)
    else:
        n_val = 0
    if n_val == 0:
        return dataset, None
    return dataset.subset_sequences(ids[:-n_val]), dataset.subset_sequences(ids[-n_val:])


def _dataset(dataset) -> CsiDataset:
    return dataset if isinstance(dataset, CsiDataset) else read_dataset(dataset)


def synth_run(cfg: dict | None, out_dir, seed: int | None = None) -> CsiDataset:
    ds = synth_generate(synth_config(cfg, seed))
    save_dataset(out_dir, ds)
    return ds


def pretrain_run(cfg: dict | None, dataset, out_dir, seed: int | None = None) -> Path:
    """Pre-train an encoder; writes the checkpoint and the per-epoch loss log."""
    ds = _dataset(dataset)
    est = build_pretrainer(cfg, seed)
    est.fit(ds.csi, groups=ds.sequence_ids, frame_index=ds.frame_index)
    out_dir = Path(out_dir)
    write_log(out_dir / PRETRAIN_LOG, est.history_, PRETRAIN_LOG_COLUMNS)
    return save_pretrainer(est, out_dir / PRETRAIN_CKPT)


def _check_skeleton(reg: PoseRegressor, ds: CsiDataset) -> SkeletonGraph:
    graph = reg._graph()
    meta = ds.meta
    if graph.J != meta.J:
        raise DataError(f"skeleton {graph.skeleton_id!r} has {graph.J} joints but the dataset has J={meta.J}")
    if isinstance(reg.skeleton, str) and graph.skeleton_id != meta.skeleton_id:
        raise DataError(f"skeleton {graph.skeleton_id!r} does not match dataset skeleton {meta.skeleton_id!r}")
    return graph


def decode_train_run(cfg: dict | None, checkpoint, dataset, out_dir, seed: int | None = None) -> Path:
    """Train the pose decoder on a frozen encoder; writes the checkpoint and a per-epoch log."""
    ds = _dataset(dataset)
    cfg = _with_seed(cfg, seed)
    encoder = load_pretrainer(checkpoint)
    reg = build_regressor(encoder, cfg, skeleton=ds.meta.skeleton_id)
    _check_skeleton(reg, ds)
    train, val = split_by_sequence(ds, cfg["decode"].get("val_fraction", 0.25))
    if val is None:
        reg.fit(train.csi, train.pose)
    else:
        reg.fit(train.csi, train.pose, val.csi, val.pose)
    out_dir = Path(out_dir)
    write_log(out_dir / DECODE_LOG, reg.history_, DECODE_LOG_COLUMNS)
    return save_regressor(reg, out_dir / DECODER_CKPT)


def evaluate_run(checkpoint, dataset, out_dir=None, alphas=DEFAULT_ALPHAS, plots: bool = False) -> MetricReport:
    """Predict every sample with a decoder checkpoint and score it."""
    ds = _dataset(dataset)
    reg = load_regressor(checkpoint)
    if reg.graph_.J != ds.meta.J:
        raise DataError(f"checkpoint skeleton has {reg.graph_.J} joints but the dataset has J={ds.meta.J}")
    pred = reg.predict(ds.csi)
    report = evaluate_dataset(pred, ds.pose[:, 0], reg.graph_, alphas=tuple(alphas))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / REPORT_FILE, "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
            fh.write("\n")
        np.save(out_dir / PREDICTIONS_FILE, pred.astype(np.float32))
        if plots:
            from .plots import plot_history, plot_pose_overlay

            plot_history(reg.history_, out_dir / "decode_curve.png", title="pose decoder")
            plot_pose_overlay(pred[0], ds.pose[0, 0], reg.graph_, out_dir / "pose_overlay.png")
    return report


def embeddings_csv(est, dataset) -> str:
    """CSV text with one row per sample: sample_id, sequence_id, e_0 ... e_{d-1}."""
    ds = _dataset(dataset)
    enc = est.encoder_ if isinstance(est, PoseRegressor) else est
    emb = enc.transform(ds.csi)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "sequence_id", *(f"e_{k}" for k in range(emb.shape[1]))])
    for i, (sid, row) in enumerate(zip(ds.sequence_ids, emb)):
        writer.writerow([i, int(sid), *(repr(float(v)) for v in row)])
    return buf.getvalue()


def export_embeddings(checkpoint, dataset, path) -> Path:
    """Write pooled encoder embeddings of every sample (either checkpoint kind works)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(embeddings_csv(load_estimator(checkpoint), dataset))
    return path


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_embeddings`: (sample_id, sequence_id, embeddings)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2:]


def plot_run(checkpoint=None, out_dir=".", dataset=None, log=None) -> list[Path]:
    """Loss curves (from a checkpoint's history or a CSV log) plus a pose overlay when possible."""
    from .plots import plot_history, plot_pose_overlay

    out_dir = Path(out_dir)
    written = []
    if log is not None:
        written.append(plot_history(read_log(log), out_dir / (Path(log).stem + ".png"), title=Path(log).stem))
    if checkpoint is not None:
        est = load_estimator(checkpoint)
        if isinstance(est, PoseRegressor):
            written.append(plot_history(est.history_, out_dir / "decode_curve.png", title="pose decoder"))
            written.append(plot_history(est.encoder_.history_, out_dir / "pretrain_curve.png", title="pre-training"))
            if dataset is not None:
                ds = _dataset(dataset)
                pred = est.predict(ds.csi[:1])
                written.append(plot_pose_overlay(pred[0], ds.pose[0, 0], est.graph_, out_dir / "pose_overlay.png"))
        else:
            written.append(plot_history(est.history_, out_dir / "pretrain_curve.png", title="pre-training"))
    if not written:
        raise ConfigError("plot needs a --checkpoint or a loss log")
    return written


__all__ = [
    "load_config", "validate_config", "synth_config", "build_pretrainer", "build_regressor",
    "save_pretrainer", "load_pretrainer", "save_regressor", "load_regressor", "load_estimator",
    "pretrainer_to_bytes", "regressor_to_bytes", "checkpoint_rng", "write_log", "read_log",
    "split_by_sequence", "synth_run", "pretrain_run", "decode_train_run", "evaluate_run",
    "export_embeddings", "embeddings_csv", "read_embeddings", "plot_run",
]
