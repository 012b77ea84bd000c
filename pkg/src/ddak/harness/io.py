"""Persistence: the DDAK binary container, CSV exports, observation files.

Container layout, shared by datasets, checkpoints and analysis files:

    bytes 0..3   magic "DDAK"
    u32 LE       format version
    u32 LE       header length in bytes
    ...          UTF-8 JSON header
    ...          little-endian float32 array blobs, in the order the
                 header's "arrays" list declares them

The header always carries "kind", "endianness" and per-array name/shape
metadata; loaders validate magic, version and payload length before
touching any content.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..denoiser import ArchSpec, DenoiserParams, NormStats, param_count, param_groups
from ..diffusion import NoiseSchedule, build_linear_schedule
from ..dynamics import GridSpec, GridState, SystemParams, TrajectoryDataset
from ..errors import DataFormatError
from ..observation import ObservationOperator, ObservationSet
from .metrics import MetricsRecord, emit_csv, format_csv, read_csv  # noqa: F401 (re-export)

MAGIC = b"DDAK"
FORMAT_VERSION = 1


def write_container(path, kind: str, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    meta = []
    blobs = []
    for name, arr in arrays:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        meta.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr32.tobytes())
    full_header = {"kind": kind, "endianness": "little", "arrays": meta, **header}
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a DDAK file")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported DDAK format version {version} (expected {FORMAT_VERSION})"
        )
    if len(raw) < 12 + header_len:
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: malformed header: {exc}") from exc
    arrays: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for meta in header.get("arrays", []):
        shape = tuple(meta["shape"])
        nbytes = int(np.prod(shape)) * 4
        blob = raw[offset : offset + nbytes]
        if len(blob) != nbytes:
            raise DataFormatError(
                f"{path}: truncated array {meta['name']!r} "
                f"(expected {nbytes} bytes, found {len(blob)})"
            )
        arrays[meta["name"]] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} unexpected trailing bytes")
    return header, arrays


# --- datasets ----------------------------------------------------------------


def save_dataset(path, dataset: TrajectoryDataset, params: SystemParams,
                 extra: dict | None = None) -> None:
    spec = dataset.spec
    truth = np.stack([s.values for s in dataset.truth_states]) if dataset.truth_states \
        else np.zeros((0, spec.L, spec.K))
    header = {
        "spec": {"K": spec.K, "L": spec.L, "dt": spec.dt,
                 "steps_per_interval": spec.steps_per_interval},
        "params": {"forcing": params.forcing_per_level(spec.L).tolist(),
                   "coupling": params.coupling, "model_bias": params.model_bias},
        "n_states": len(dataset.truth_states),
        "lead_intervals": dataset.lead_intervals,
        "time_index_start": dataset.truth_states[0].time_index if dataset.truth_states else 0,
        "statistics": _dataset_statistics(truth),
    }
    if extra:
        header["extra"] = extra
    arrays = [("truth", truth)]
    if dataset.forecast_states is not None:
        arrays.append(("forecast", np.stack([s.values for s in dataset.forecast_states])))
    write_container(path, "dataset", header, arrays)


def _dataset_statistics(truth: np.ndarray) -> dict:
    if truth.shape[0] == 0:
        return {}
    return {
        "level_mean": truth.mean(axis=(0, 2)).tolist(),
        "level_std": truth.std(axis=(0, 2)).tolist(),
    }


def load_dataset(path) -> tuple[TrajectoryDataset, SystemParams]:
    header, arrays = read_container(path)
    if header.get("kind") != "dataset":
        raise DataFormatError(f"{path}: container kind {header.get('kind')!r}, expected dataset")
    spec = GridSpec(**header["spec"])
    p = header["params"]
    params = SystemParams(forcing=np.array(p["forcing"]), coupling=p["coupling"],
                          model_bias=p["model_bias"])
    start = header.get("time_index_start", 0)
    truth = arrays.get("truth")
    if truth is None and header["n_states"] > 0:
        raise DataFormatError(f"{path}: dataset missing truth array")
    truth_states = [
        GridState(truth[i].astype(np.float64), start + i) for i in range(header["n_states"])
    ]
    forecast_states = None
    if "forecast" in arrays:
        fc = arrays["forecast"]
        forecast_states = [
            GridState(fc[i].astype(np.float64), start + i) for i in range(header["n_states"])
        ]
    dataset = TrajectoryDataset(
        spec=spec, truth_states=truth_states, forecast_states=forecast_states,
        lead_intervals=header.get("lead_intervals", 0),
    )
    return dataset, params


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: DenoiserParams, schedule: NoiseSchedule,
                    schedule_meta: dict | None = None, train_digest: str = "") -> None:
    arch = model.arch
    groups = param_groups(arch)
    meta = schedule_meta or {}
    header = {
        "arch": {"levels": arch.levels, "hidden": arch.hidden,
                 "kernel_width": arch.kernel_width, "blocks": arch.blocks,
                 "temb_dim": arch.temb_dim},
        "norm": {"state_mean": model.norm.state_mean.tolist(),
                 "state_std": model.norm.state_std.tolist(),
                 "residual_scale": model.norm.residual_scale.tolist()},
        "schedule": {"kind": meta.get("kind", "linear"),
                     "n_steps": schedule.n_steps,
                     "beta_start": meta.get("beta_start", float(schedule.beta[0])),
                     "beta_end": meta.get("beta_end", float(schedule.beta[-1]))},
        "train_digest": train_digest,
        "groups": [{"name": name, "shape": list(shape)} for name, shape in groups],
    }
    arrays = []
    offset = 0
    theta = model.theta
    for name, shape in groups:
        size = int(np.prod(shape))
        arrays.append((name, theta[offset : offset + size].reshape(shape)))
        offset += size
    write_container(path, "checkpoint", header, arrays)


def load_checkpoint(path) -> tuple[DenoiserParams, NoiseSchedule, dict]:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise DataFormatError(f"{path}: container kind {header.get('kind')!r}, expected checkpoint")
    arch = ArchSpec(**header["arch"])
    expected_groups = param_groups(arch)
    declared = [(g["name"], tuple(g["shape"])) for g in header["groups"]]
    if declared != expected_groups:
        raise DataFormatError(f"{path}: parameter groups do not match architecture")
    total = param_count(arch)
    theta = np.empty(total, dtype=np.float32)
    offset = 0
    for name, shape in expected_groups:
        if name not in arrays:
            raise DataFormatError(f"{path}: missing parameter group {name!r}")
        blob = arrays[name]
        if blob.shape != shape:
            raise DataFormatError(f"{path}: group {name!r} has shape {blob.shape}, expected {shape}")
        size = int(np.prod(shape))
        theta[offset : offset + size] = blob.ravel()
        offset += size
    if offset != total:
        raise DataFormatError(f"{path}: parameter count {offset} != expected {total}")
    norm = NormStats(**header["norm"])
    sched = header["schedule"]
    if sched.get("kind", "linear") != "linear":
        raise DataFormatError(f"{path}: unknown schedule kind {sched.get('kind')!r}")
    schedule = build_linear_schedule(sched["n_steps"], sched["beta_start"], sched["beta_end"])
    model = DenoiserParams(arch=arch, theta=theta, norm=norm)
    return model, schedule, header


# --- analyses ----------------------------------------------------------------


def save_analysis(path, analysis: GridState, diagnostics: dict) -> None:
    header = {"time_index": analysis.time_index,
              "shape": list(analysis.values.shape)}
    write_container(path, "analysis", header, [("values", analysis.values)])
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(diagnostics, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")


def load_analysis(path) -> tuple[GridState, dict]:
    header, arrays = read_container(path)
    if header.get("kind") != "analysis":
        raise DataFormatError(f"{path}: container kind {header.get('kind')!r}, expected analysis")
    state = GridState(arrays["values"].astype(np.float64), header.get("time_index", 0))
    sidecar = Path(str(path) + ".json")
    diagnostics = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return state, diagnostics


# --- plain-text exports --------------------------------------------------------


def export_trajectory_csv(dataset: TrajectoryDataset, path) -> None:
    """Long-format truth dump: time_index, level, k, value."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("time_index,level,k,value\n")
        for state in dataset.truth_states:
            L, K = state.values.shape
            for l in range(L):
                for k in range(K):
                    fh.write(f"{state.time_index},{l},{k},{state.values[l, k]!r}\n")


def save_observations(path, obs_stream: list[ObservationSet], meta: dict) -> None:
    """Observation CSV (step, level, k, value) plus a JSON sidecar for the recipe."""
    ks = {obs.operator.K for obs in obs_stream}
    if len(ks) > 1:
        raise ValueError("all observation sets must share the same ring size")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,level,k,value\n")
        for step, obs in enumerate(obs_stream):
            for c, k in enumerate(obs.operator.column_indices):
                for l in range(obs.y.shape[0]):
                    fh.write(f"{step},{l},{k},{obs.y[l, c]!r}\n")
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps({"K": ks.pop() if ks else 0, **meta},
                                  indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_observations(path) -> tuple[list[ObservationSet], dict]:
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise DataFormatError(f"{path}: missing observation sidecar {sidecar}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    K = int(meta["K"])
    by_step: dict[int, dict[int, dict[int, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "step,level,k,value":
            raise DataFormatError(f"{path}: unexpected observation CSV header {header!r}")
        for line in fh:
            step_s, level_s, k_s, value_s = line.strip().split(",")
            by_step.setdefault(int(step_s), {}).setdefault(int(k_s), {})[int(level_s)] = float(value_s)
    stream = []
    for step in sorted(by_step):
        columns = sorted(by_step[step])
        levels = sorted(next(iter(by_step[step].values())))
        y = np.array([[by_step[step][k][l] for k in columns] for l in levels])
        stream.append(ObservationSet(operator=ObservationOperator(tuple(columns), K), y=y))
    return stream, meta
