"""On-disk formats: checkpoints, scene files, manifests and reports.

Array-bearing files share one container: a single JSON header line followed
by raw little-endian float64 blocks.  The header records every array's name,
shape and byte offset plus the payload length and SHA-256, so a reader can
reject truncated or corrupted files before reconstructing anything.  All
writes go through a temp-file-then-rename so no partially written file is
ever observable under the target name.

Reports and comparisons are plain JSON (numbers serialized via ``repr`` and
therefore lossless); the CSV export is a one-way rendering for spreadsheet
use and cannot be read back.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    IntegrityError,
    ProvenanceError,
    UnsupportedVersionError,
    UsageError,
)
from .importance import AnalysisReport, ComparisonReport, ZScoreEntry
from .network import (
    FusionNetwork,
    ModelConfig,
    build,
    named_parameters,
    named_state,
)
from .rng import SeededRng
from .scenes import Scene, SceneConfig
from .training import NATIVE_GRID
from .version import __version__

__all__ = [
    "FORMAT_VERSION",
    "MANIFEST_NAME",
    "ReportFile",
    "save_checkpoint",
    "load_checkpoint",
    "save_scene",
    "load_scene",
    "write_manifest",
    "read_manifest",
    "manifest_dataset_id",
    "load_dataset",
    "write_report",
    "read_report",
    "groups_csv_path",
    "write_comparison",
    "sha256_file",
]

FORMAT_VERSION = 1

_CHECKPOINT_SCHEMA = "fusion-checkpoint"
_SCENE_SCHEMA = "fusion-scene"
_MANIFEST_SCHEMA = "scene-manifest"
_REPORT_SCHEMA = "importance-report"
_COMPARISON_SCHEMA = "variant-comparison"

MANIFEST_NAME = "manifest.json"


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Header + float64-block container


def _write_container(path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    records = []
    chunks = []
    offset = 0
    for name, value in arrays:
        # not ascontiguousarray: that would silently promote 0-d to 1-d
        value = np.asarray(value, dtype=np.float64)
        raw = value.astype("<f8").tobytes()
        records.append({"name": name, "shape": list(value.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tool_version"] = __version__
    header["arrays"] = records
    header["payload_bytes"] = len(payload)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    line = json.dumps(header, sort_keys=True).encode("utf-8")
    _atomic_write_bytes(Path(path), line + b"\n" + payload)


def _read_container(path, schema: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    newline = blob.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path} has no header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path} has a malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("schema") != schema:
        raise FormatError(
            f"{path} holds schema {header.get('schema')!r}, expected {schema!r}"
        )
    if header.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path} uses format version {header.get('format_version')!r}; "
            f"this build reads version {FORMAT_VERSION}"
        )
    payload = blob[newline + 1:]
    if len(payload) != header.get("payload_bytes"):
        raise IntegrityError(
            f"{path} payload is {len(payload)} bytes, header promises "
            f"{header.get('payload_bytes')}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError(f"{path} payload digest mismatch")
    arrays = {}
    for record in header["arrays"]:
        shape = tuple(record["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = record["offset"]
        stop = start + count * 8
        if stop > len(payload):
            raise IntegrityError(f"{path} array {record['name']!r} overruns the payload")
        flat = np.frombuffer(payload[start:stop], dtype="<f8")
        arrays[record["name"]] = flat.reshape(shape).astype(np.float64, copy=True)
    return header, arrays


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(net: FusionNetwork, path, train_seed: int | None = None,
                    provenance: dict | None = None) -> None:
    """Persist parameters, running statistics and the architecture config."""
    norm = net.branches[0].norms[0] if net.branches and net.branches[0].norms else None
    header = {
        "schema": _CHECKPOINT_SCHEMA,
        "model_config": net.config.to_dict(),
        "train_seed": train_seed,
        "norm": {
            "epsilon": norm.epsilon if norm else 1e-5,
            "momentum": norm.momentum if norm else 0.9,
        },
        "provenance": provenance or {},
    }
    arrays = named_parameters(net) + named_state(net)
    _write_container(path, header, arrays)


def load_checkpoint(path) -> FusionNetwork:
    """Rebuild a network from a checkpoint, bit-for-bit.

    Raises rather than returning a partial network when anything is missing
    or damaged.
    """
    header, arrays = _read_container(path, _CHECKPOINT_SCHEMA)
    try:
        config = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint is missing a valid model config: {exc}") from exc
    net = build(config, SeededRng(0))
    norm_meta = header.get("norm", {})
    for branch in net.branches:
        for norm in branch.norms:
            norm.epsilon = float(norm_meta.get("epsilon", norm.epsilon))
            norm.momentum = float(norm_meta.get("momentum", norm.momentum))
    expected = named_parameters(net) + named_state(net)
    for name, value in expected:
        if name not in arrays:
            raise IntegrityError(f"checkpoint lacks array {name!r}")
        stored = arrays[name]
        if stored.shape != value.shape:
            raise IntegrityError(
                f"checkpoint array {name!r} has shape {stored.shape}, expected {value.shape}"
            )
        value[...] = stored
    return net


# ---------------------------------------------------------------------------
# Scenes and manifests


def save_scene(scene: Scene, cfg: SceneConfig, path) -> None:
    header = {
        "schema": _SCENE_SCHEMA,
        "scene_config": {
            "height": cfg.height,
            "width": cfg.width,
            "mwr_factor": cfg.mwr_factor,
            "mwr_channels": cfg.mwr_channels,
            "sar_ambiguity": cfg.sar_ambiguity,
            "mwr_noise": cfg.mwr_noise,
            "mwr_informative_fraction": cfg.mwr_informative_fraction,
            "blob_scale": cfg.blob_scale,
            "edge_amplitude": cfg.edge_amplitude,
            "seed": cfg.seed,
        },
    }
    arrays = [("sar", scene.sar), ("mwr", scene.mwr), ("label", scene.label)]
    _write_container(path, header, arrays)


def load_scene(path) -> tuple[Scene, SceneConfig]:
    header, arrays = _read_container(path, _SCENE_SCHEMA)
    try:
        cfg = SceneConfig(**header["scene_config"])
        scene = Scene(sar=arrays["sar"], mwr=arrays["mwr"], label=arrays["label"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"scene file is incomplete: {exc}") from exc
    return scene, cfg


def write_manifest(directory, scene_files: list[str], generator: dict, master_seed: int) -> Path:
    """Record the dataset's members, their digests and a stable dataset id."""
    directory = Path(directory)
    entries = []
    for name in scene_files:
        entries.append({"file": name, "sha256": sha256_file(directory / name)})
    dataset_id = hashlib.sha256(
        "".join(e["sha256"] for e in entries).encode("ascii")
    ).hexdigest()
    manifest = {
        "schema": _MANIFEST_SCHEMA,
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "generator": generator,
        "master_seed": master_seed,
        "scenes": entries,
        "dataset_id": dataset_id,
    }
    path = directory / MANIFEST_NAME
    _atomic_write_bytes(path, _dump_json(manifest).encode("utf-8"))
    return path


def read_manifest(directory) -> dict:
    path = Path(directory)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text("utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if manifest.get("schema") != _MANIFEST_SCHEMA:
        raise FormatError(f"{path} is not a scene manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"manifest {path} uses format version {manifest.get('format_version')!r}"
        )
    return manifest


def manifest_dataset_id(manifest: dict) -> str:
    try:
        return manifest["dataset_id"]
    except KeyError as exc:
        raise FormatError("manifest lacks a dataset id") from exc


def load_dataset(directory) -> tuple[list[Scene], dict]:
    """All scenes named by the directory's manifest, digest-checked."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    scenes = []
    for entry in manifest["scenes"]:
        path = directory / entry["file"]
        if sha256_file(path) != entry["sha256"]:
            raise IntegrityError(f"scene {path} does not match its manifest digest")
        scene, _ = load_scene(path)
        scenes.append(scene)
    return scenes, manifest


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class ReportFile:
    """An analysis report plus the provenance block it was derived under."""

    report: AnalysisReport
    provenance: dict
    top_ranking: tuple[int, ...] = ()
    tool_version: str = __version__


def _entry_to_json(entry: ZScoreEntry) -> dict:
    return {
        "input_index": entry.input_index,
        "group": entry.group,
        "coefficient": entry.coefficient,
        "sigma": entry.sigma,
        "z": entry.z,
    }


def _entry_from_json(data: dict) -> ZScoreEntry:
    return ZScoreEntry(
        input_index=int(data["input_index"]),
        group=str(data["group"]),
        coefficient=float(data["coefficient"]),
        sigma=float(data["sigma"]),
        z=None if data["z"] is None else float(data["z"]),
    )


def _repr_number(value) -> str:
    return repr(float(value))


def _entries_csv(report: AnalysisReport) -> str:
    rank_of = {i: r + 1 for r, i in enumerate(report.ranking)}
    lines = ["input_index,group,coefficient,sigma,z,abs_z,rank,dead"]
    for e in report.entries:
        if e.dead:
            z = abs_z = rank = ""
            dead = "1"
        else:
            z = _repr_number(e.z)
            abs_z = _repr_number(e.abs_z)
            rank = str(rank_of[e.input_index])
            dead = "0"
        lines.append(
            f"{e.input_index},{e.group},{_repr_number(e.coefficient)},"
            f"{_repr_number(e.sigma)},{z},{abs_z},{rank},{dead}"
        )
    return "\n".join(lines) + "\n"


def _groups_csv(report: AnalysisReport) -> str:
    ordered = sorted(
        report.group_sums.items(),
        key=lambda item: (-item[1], list(report.group_sums).index(item[0])),
    )
    lines = ["group,sum_abs_z,rank"]
    for rank, (name, total) in enumerate(ordered, start=1):
        lines.append(f"{name},{_repr_number(total)},{rank}")
    return "\n".join(lines) + "\n"


def groups_csv_path(path) -> Path:
    path = Path(path)
    if path.suffix == ".csv":
        return path.with_suffix(".groups.csv")
    return path.with_name(path.name + ".groups.csv")


def write_report(report_file: ReportFile, path, format: str = "json") -> None:
    """Serialize a report; ``json`` is canonical, ``csv`` an export.

    The CSV export writes the per-input table to ``path`` and the group-sum
    table next to it (``<path>.groups.csv``).
    """
    if any(p != NATIVE_GRID for p in report_file.provenance.get("btemp_provenance", [])):
        raise ProvenanceError(
            "refusing to write a report whose btemp statistics were pooled on "
            "the upsampled grid"
        )
    report = report_file.report
    if format == "json":
        doc = {
            "schema": _REPORT_SCHEMA,
            "format_version": FORMAT_VERSION,
            "tool_version": report_file.tool_version,
            "provenance": report_file.provenance,
            "variant": report.variant,
            "entries": [_entry_to_json(e) for e in report.entries],
            "group_sums": dict(report.group_sums),
            "ranking": list(report.ranking),
            "dead_nodes": list(report.dead_nodes),
            "top_ranking": list(report_file.top_ranking),
        }
        _atomic_write_bytes(Path(path), _dump_json(doc).encode("utf-8"))
    elif format == "csv":
        _atomic_write_bytes(Path(path), _entries_csv(report).encode("utf-8"))
        _atomic_write_bytes(groups_csv_path(path), _groups_csv(report).encode("utf-8"))
    else:
        raise UsageError(f"unknown report format {format!r}")


def read_report(path) -> ReportFile:
    """Read back a JSON report.  CSV exports are not round-trippable."""
    path = Path(path)
    if path.suffix == ".csv":
        raise UsageError("CSV report exports cannot be read back; use the JSON report")
    try:
        doc = json.loads(path.read_text("utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"report {path} is not valid JSON: {exc}") from exc
    if doc.get("schema") != _REPORT_SCHEMA:
        raise FormatError(f"{path} is not an importance report")
    if doc.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"report {path} uses format version {doc.get('format_version')!r}"
        )
    try:
        report = AnalysisReport(
            variant=str(doc["variant"]),
            entries=tuple(_entry_from_json(e) for e in doc["entries"]),
            group_sums={str(k): float(v) for k, v in doc["group_sums"].items()},
            ranking=tuple(int(i) for i in doc["ranking"]),
            dead_nodes=tuple(int(i) for i in doc["dead_nodes"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"report {path} is incomplete: {exc}") from exc
    return ReportFile(
        report=report,
        provenance=doc.get("provenance", {}),
        top_ranking=tuple(int(i) for i in doc.get("top_ranking", [])),
        tool_version=str(doc.get("tool_version", "")),
    )


def write_comparison(comparison: ComparisonReport, path, provenance: dict | None = None) -> None:
    doc = {
        "schema": _COMPARISON_SCHEMA,
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "provenance": provenance or {},
        "group_ranks_small": dict(comparison.group_ranks_small),
        "group_ranks_large": dict(comparison.group_ranks_large),
        "btemp_rank_stable": comparison.btemp_rank_stable,
        "shared_top_keys": [list(key) for key in comparison.shared_top_keys],
        "inversions": comparison.inversions,
        "k": comparison.k,
    }
    _atomic_write_bytes(Path(path), _dump_json(doc).encode("utf-8"))
